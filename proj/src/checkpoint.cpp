// SPDX-License-Identifier: Apache-2.0

#include "flowcast/checkpoint.hpp"

#include <map>

#include "flowcast/container.hpp"
#include "flowcast/errors.hpp"

namespace flowcast {

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& named) {
    std::map<std::string, Tensor> tensors;
    for (const auto& [name, t] : named) {
        if (!tensors.emplace(name, *t).second)
            throw CheckpointError("duplicate tensor name '" + name + "'");
    }
    container::write_tensors(path, tensors);
}

void load_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor*>>& named) {
    const std::map<std::string, Tensor> tensors = container::read_tensors(path);
    std::string missing;
    for (const auto& [name, dest] : named) {
        (void)dest;
        if (tensors.find(name) == tensors.end()) missing += missing.empty() ? name : ", " + name;
    }
    if (!missing.empty())
        throw CheckpointError("'" + path + "': missing tensors: " + missing);
    for (const auto& [name, dest] : named) {
        const Tensor& src = tensors.at(name);
        if (src.shape() != dest->shape())
            throw CheckpointError("'" + path + "': tensor '" + name + "' has shape " +
                                  src.shape_string() + ", expected " + dest->shape_string());
        *dest = src;
    }
}

}  // namespace flowcast
