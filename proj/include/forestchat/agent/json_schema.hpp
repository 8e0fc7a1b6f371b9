// SPDX-License-Identifier: Apache-2.0
#pragma once

// Validator for the JSON Schema subset used by tool argument declarations:
// type (object, array, string, number, integer, boolean), properties,
// required, additionalProperties (boolean), items, enum, minimum, maximum,
// minItems, maxItems.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace forestchat::agent {

using Json = nlohmann::json;

struct SchemaViolation {
    std::string path;
    std::string message;
};

namespace detail {

inline bool has_type(const Json& value, const std::string& type) {
    if (type == "object") return value.is_object();
    if (type == "array") return value.is_array();
    if (type == "string") return value.is_string();
    if (type == "boolean") return value.is_boolean();
    if (type == "integer") {
        if (value.is_number_integer()) return true;
        return value.is_number_float() && std::isfinite(value.get<double>()) && std::floor(value.get<double>()) == value.get<double>();
    }
    if (type == "number") return value.is_number();
    if (type == "null") return value.is_null();
    return false;
}

inline void validate(const Json& schema, const Json& value, const std::string& path, std::vector<SchemaViolation>& out) {
    if (schema.contains("type")) {
        const auto type = schema.at("type").get<std::string>();
        if (!has_type(value, type)) {
            out.push_back({path, "expected " + type});
            return;
        }
    }
    if (schema.contains("enum")) {
        const auto& options = schema.at("enum");
        if (std::find(options.begin(), options.end(), value) == options.end())
            out.push_back({path, "must be one of " + options.dump()});
    }
    if (value.is_number()) {
        const double v = value.get<double>();
        if (schema.contains("minimum") && v < schema.at("minimum").get<double>())
            out.push_back({path, "must be >= " + schema.at("minimum").dump()});
        if (schema.contains("maximum") && v > schema.at("maximum").get<double>())
            out.push_back({path, "must be <= " + schema.at("maximum").dump()});
    }
    if (value.is_object()) {
        const Json empty = Json::object();
        const auto& props = schema.contains("properties") ? schema.at("properties") : empty;
        if (schema.contains("required"))
            for (const auto& name : schema.at("required"))
                if (!value.contains(name.get<std::string>())) out.push_back({path + "." + name.get<std::string>(), "is required"});
        const bool closed = schema.contains("additionalProperties") && schema.at("additionalProperties") == false;
        for (const auto& [key, v] : value.items()) {
            if (props.contains(key))
                validate(props.at(key), v, path + "." + key, out);
            else if (closed)
                out.push_back({path + "." + key, "is not an allowed property"});
        }
    }
    if (value.is_array()) {
        if (schema.contains("minItems") && value.size() < schema.at("minItems").get<std::size_t>())
            out.push_back({path, "needs at least " + schema.at("minItems").dump() + " items"});
        if (schema.contains("maxItems") && value.size() > schema.at("maxItems").get<std::size_t>())
            out.push_back({path, "allows at most " + schema.at("maxItems").dump() + " items"});
        if (schema.contains("items"))
            for (std::size_t i = 0; i < value.size(); ++i)
                validate(schema.at("items"), value[i], path + "[" + std::to_string(i) + "]", out);
    }
}

} // namespace detail

/// All violations of `schema` by `value`; empty when valid. `root` prefixes paths.
inline std::vector<SchemaViolation> validate_schema(const Json& schema, const Json& value, const std::string& root = "args") {
    std::vector<SchemaViolation> out;
    detail::validate(schema, value, root, out);
    return out;
}

inline std::string describe(const std::vector<SchemaViolation>& violations) {
    std::string s;
    for (const auto& v : violations) {
        if (!s.empty()) s += "; ";
        s += v.path + " " + v.message;
    }
    return s;
}

} // namespace forestchat::agent
