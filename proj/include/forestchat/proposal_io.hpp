// SPDX-License-Identifier: Apache-2.0
#pragma once

// JSON exchange format for mask proposals. Embeddings travel as base64 of
// little-endian float32 so a read/write cycle is bit-exact.
//
// Requires OpenSSL (libcrypto) for base64.

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forestchat/error.hpp"
#include "forestchat/latent.hpp"

namespace forestchat {

namespace detail {

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    require(text.size() % 4 == 0, ErrorKind::parse, "base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out(3 * text.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    require(n >= 0, ErrorKind::parse, "invalid base64 data");
    std::size_t pad = 0;
    for (auto it = text.rbegin(); it != text.rend() && *it == '=' && pad < 2; ++it) ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

} // namespace detail

inline std::string encode_embedding(const std::vector<float>& v) {
    std::vector<std::uint8_t> bytes(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        auto u = std::bit_cast<std::uint32_t>(v[i]);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(u >> (8 * b));
    }
    return detail::base64_encode(bytes);
}

inline std::vector<float> decode_embedding(const std::string& text) {
    const auto bytes = detail::base64_decode(text);
    require(bytes.size() % 4 == 0, ErrorKind::parse, "embedding byte length is not a multiple of 4");
    std::vector<float> v(bytes.size() / 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
        v[i] = std::bit_cast<float>(u);
    }
    return v;
}

inline nlohmann::json to_json(const ProposalSet& set) {
    nlohmann::json j;
    j["width"] = set.width;
    j["height"] = set.height;
    j["embedding_dim"] = set.embedding_dim;
    j["points_per_side"] = set.points_per_side;
    auto& arr = j["proposals"] = nlohmann::json::array();
    for (const auto& p : set.proposals)
        arr.push_back({
            {"id", p.id},
            {"time", std::string(to_string(p.time))},
            {"stability", p.stability},
            {"area_fraction", p.area_fraction},
            {"footprint", {{"counts", p.footprint.counts}}},
            {"emb_same", encode_embedding(p.emb_same)},
            {"emb_other", encode_embedding(p.emb_other)},
        });
    return j;
}

inline ProposalSet proposal_set_from_json(const nlohmann::json& j) {
    ProposalSet set;
    try {
        set.width = j.at("width").get<int>();
        set.height = j.at("height").get<int>();
        set.embedding_dim = j.at("embedding_dim").get<int>();
        set.points_per_side = j.value("points_per_side", 16);
        for (const auto& e : j.at("proposals")) {
            Proposal p;
            p.id = e.at("id").get<int>();
            const auto time = e.at("time").get<std::string>();
            require(time == "t1" || time == "t2", ErrorKind::parse, "proposal time must be \"t1\" or \"t2\", got \"" + time + "\"");
            p.time = time == "t1" ? Epoch::t1 : Epoch::t2;
            p.stability = e.at("stability").get<double>();
            p.area_fraction = e.at("area_fraction").get<double>();
            p.footprint.counts = e.at("footprint").at("counts").get<std::vector<std::uint32_t>>();
            p.emb_same = decode_embedding(e.at("emb_same").get<std::string>());
            p.emb_other = decode_embedding(e.at("emb_other").get<std::string>());
            set.proposals.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("malformed proposal file: ") + e.what());
    }
    validate(set);
    return set;
}

inline nlohmann::json to_json(const MatchParams& p) {
    nlohmann::json j{
        {"change_angle_threshold", p.change_angle_threshold},
        {"stability_threshold", p.stability_threshold},
        {"area_threshold", p.area_threshold},
        {"area_rule", p.area_rule == AreaRule::max_fraction ? "max_fraction" : "min_fraction"},
        {"min_area_pixels", p.min_area_pixels},
        {"object_similarity_threshold", p.object_similarity_threshold},
    };
    j["top_k"] = p.top_k ? nlohmann::json(*p.top_k) : nlohmann::json(nullptr);
    return j;
}

/// Overrides the fields present in `j` on top of `base`, then validates.
inline MatchParams match_params_from_json(const nlohmann::json& j, MatchParams base = {}) {
    require(j.is_object(), ErrorKind::parse, "match parameters must be a JSON object");
    static const std::set<std::string> known = {"change_angle_threshold", "stability_threshold", "area_threshold", "area_rule",
                                                "min_area_pixels", "object_similarity_threshold", "top_k"};
    try {
        for (const auto& [key, v] : j.items()) require(known.count(key) == 1, ErrorKind::parse, "unknown match parameter \"" + key + "\"");
        if (j.contains("change_angle_threshold")) base.change_angle_threshold = j.at("change_angle_threshold").get<double>();
        if (j.contains("stability_threshold")) base.stability_threshold = j.at("stability_threshold").get<double>();
        if (j.contains("area_threshold")) base.area_threshold = j.at("area_threshold").get<double>();
        if (j.contains("area_rule")) {
            const auto rule = j.at("area_rule").get<std::string>();
            require(rule == "max_fraction" || rule == "min_fraction", ErrorKind::parse, "area_rule must be max_fraction or min_fraction");
            base.area_rule = rule == "max_fraction" ? AreaRule::max_fraction : AreaRule::min_fraction;
        }
        for (const char* key : {"min_area_pixels", "top_k"})
            require(!j.contains(key) || j.at(key).is_null() || j.at(key).is_number_unsigned(), ErrorKind::parse,
                    std::string(key) + " must be a non-negative integer");
        if (j.contains("min_area_pixels")) base.min_area_pixels = j.at("min_area_pixels").get<std::size_t>();
        if (j.contains("object_similarity_threshold")) base.object_similarity_threshold = j.at("object_similarity_threshold").get<double>();
        if (j.contains("top_k")) {
            if (j.at("top_k").is_null())
                base.top_k.reset();
            else
                base.top_k = j.at("top_k").get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("malformed match parameters: ") + e.what());
    }
    base.validate();
    return base;
}

inline ProposalSet read_proposals(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open proposal file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, path + ": " + e.what());
    }
    return proposal_set_from_json(j);
}

inline void write_proposals(const ProposalSet& set, const std::string& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write proposal file " + path);
    out << to_json(set).dump(1) << '\n';
    require(static_cast<bool>(out), ErrorKind::io, "failed writing " + path);
}

} // namespace forestchat
