// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>

#include "flowcast/tensor.hpp"

namespace flowcast::container {

// Named-tensor file format, used for series files and model checkpoints:
//   [u64 little-endian header length][UTF-8 JSON header][payload bytes]
// The header maps tensor name -> {dtype:"f32", shape:[...], offset, length}
// with offsets relative to the payload start. Entries are written in
// name-sorted order so identical contents produce identical files.
void write_tensors(const std::string& path, const std::map<std::string, Tensor>& tensors);

std::map<std::string, Tensor> read_tensors(const std::string& path);

}  // namespace flowcast::container
