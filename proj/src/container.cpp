// SPDX-License-Identifier: Apache-2.0

#include "flowcast/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "flowcast/errors.hpp"
#include "json.hpp"

namespace flowcast::container {

static_assert(std::endian::native == std::endian::little,
              "container i/o assumes a little-endian host");

using nlohmann::json;

void write_tensors(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t length = static_cast<uint64_t>(t.numel()) * sizeof(float);
        header[name] = {{"dtype", "f32"},
                        {"shape", t.shape()},
                        {"offset", offset},
                        {"length", length}};
        offset += length;
    }
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    const uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) throw DataError("short write to '" + path + "'");
}

std::map<std::string, Tensor> read_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    uint64_t header_len = 0;
    if (!in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len)))
        throw ParseError("'" + path + "': truncated before header length");

    std::string header_text(header_len, '\0');
    if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len)))
        throw ParseError("'" + path + "': truncated header");

    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& e) {
        throw ParseError("'" + path + "': bad header json: " + e.what());
    }
    if (!header.is_object()) throw ParseError("'" + path + "': header is not an object");

    std::vector<char> payload(std::istreambuf_iterator<char>(in), {});

    std::map<std::string, Tensor> result;
    for (const auto& [name, entry] : header.items()) {
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("offset") || !entry.contains("length"))
            throw ParseError("'" + path + "': malformed entry for '" + name + "'");
        if (entry["dtype"].get<std::string>() != "f32")
            throw ParseError("'" + path + "': unsupported dtype for '" + name + "'");
        std::vector<size_t> shape = entry["shape"].get<std::vector<size_t>>();
        const uint64_t offset = entry["offset"].get<uint64_t>();
        const uint64_t length = entry["length"].get<uint64_t>();
        size_t numel = 1;
        for (size_t d : shape) numel *= d;
        if (length != numel * sizeof(float))
            throw ParseError("'" + path + "': length/shape mismatch for '" + name + "'");
        if (offset + length > payload.size())
            throw ParseError("'" + path + "': payload out of bounds for '" + name + "'");
        std::vector<float> data(numel);
        std::memcpy(data.data(), payload.data() + offset, length);
        result.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
    return result;
}

}  // namespace flowcast::container
