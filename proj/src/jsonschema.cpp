// SPDX-License-Identifier: Apache-2.0

#include "flowcast/jsonschema.hpp"

namespace flowcast::jsonschema {

using nlohmann::json;

namespace {

bool type_matches(const json& value, const std::string& type) {
    if (type == "object") return value.is_object();
    if (type == "array") return value.is_array();
    if (type == "string") return value.is_string();
    if (type == "number") return value.is_number();
    if (type == "integer") return value.is_number_integer();
    if (type == "boolean") return value.is_boolean();
    if (type == "null") return value.is_null();
    return false;
}

void check(const json& value, const json& schema, const std::string& path,
           std::vector<std::string>& errors) {
    if (schema.contains("type")) {
        const std::string type = schema["type"].get<std::string>();
        if (!type_matches(value, type)) {
            errors.push_back(path + ": expected " + type + ", got " +
                             std::string(value.type_name()));
            return;
        }
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const json& allowed : schema["enum"])
            if (value == allowed) {
                found = true;
                break;
            }
        if (!found) errors.push_back(path + ": value " + value.dump() + " not in enum");
    }
    if (schema.contains("minimum") && value.is_number()) {
        if (value.get<double>() < schema["minimum"].get<double>())
            errors.push_back(path + ": " + value.dump() + " below minimum " +
                             schema["minimum"].dump());
    }
    if (value.is_object()) {
        if (schema.contains("required"))
            for (const json& key : schema["required"])
                if (!value.contains(key.get<std::string>()))
                    errors.push_back(path + ": missing required key '" +
                                     key.get<std::string>() + "'");
        if (schema.contains("properties"))
            for (const auto& [key, subschema] : schema["properties"].items())
                if (value.contains(key)) check(value[key], subschema, path + "/" + key, errors);
    }
    if (value.is_array() && schema.contains("items")) {
        size_t i = 0;
        for (const json& item : value) {
            check(item, schema["items"], path + "/" + std::to_string(i), errors);
            ++i;
        }
    }
}

}  // namespace

std::vector<std::string> validate(const json& value, const json& schema) {
    std::vector<std::string> errors;
    check(value, schema, "$", errors);
    return errors;
}

}  // namespace flowcast::jsonschema
