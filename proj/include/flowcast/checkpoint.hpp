// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "flowcast/tensor.hpp"

namespace flowcast {

// Persist named parameters to a tensor container and restore them bitwise.
// Loading requires every destination name to be present with a matching
// shape; extra tensors in the file are ignored.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& named);

void load_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor*>>& named);

}  // namespace flowcast
