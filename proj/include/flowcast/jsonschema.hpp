// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace flowcast::jsonschema {

// Validates a document against the schema subset used by this repo:
// type, properties, required, items, enum, minimum. Returns one message per
// violation; an empty list means the document is valid.
std::vector<std::string> validate(const nlohmann::json& value, const nlohmann::json& schema);

}  // namespace flowcast::jsonschema
