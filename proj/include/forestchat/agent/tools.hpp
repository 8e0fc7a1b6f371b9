// SPDX-License-Identifier: Apache-2.0
#pragma once

// The agent's tool registry. Each tool declares a JSON argument schema and
// returns a short text summary for the language model plus structured data
// and artifact names stored under the session.

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forestchat/agent/json_schema.hpp"
#include "forestchat/agent/session.hpp"
#include "forestchat/caption.hpp"
#include "forestchat/latent.hpp"
#include "forestchat/metrics.hpp"
#include "forestchat/png_io.hpp"
#include "forestchat/proposal_io.hpp"
#include "forestchat/raster.hpp"

namespace forestchat::agent {

struct ToolResult {
    bool ok = true;
    std::string summary;
    Json data = Json::object();
    std::vector<std::string> artifacts;
    /// Set when `ok` is false: an ErrorKind name or "unknown_tool" / "invalid_arguments".
    std::string error_kind;

    Json to_json() const {
        Json j{{"ok", ok}, {"summary", summary}, {"data", data}, {"artifacts", artifacts}};
        if (!ok) j["error"] = error_kind;
        return j;
    }
};

using ToolHandler = std::function<ToolResult(Session&, const Json&)>;

struct Tool {
    std::string name;
    std::string description;
    Json parameters;
    /// Valid arguments, also used in the system prompt.
    Json example_args;
    ToolHandler handler;
};

using Registry = std::vector<Tool>;

inline std::string fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

namespace detail {

inline ToolResult mask_result(Session& s, ChangeMask mask, const std::string& what) {
    const double f = change_fraction(mask);
    const auto patches = connected_patches(mask);
    const auto name = s.add_artifact(png::encode_mask(mask), "png", "image/png");
    s.last_mask = std::move(mask);
    s.last_captions.reset();
    ToolResult r;
    r.summary = what + " marks " + fixed(100.0 * f, 2) + "% of the image as changed in " + std::to_string(patches.size()) +
                (patches.size() == 1 ? " patch." : " patches.");
    r.data = {{"change_fraction", f}, {"percentage", 100.0 * f}, {"patch_count", patches.size()}, {"mask", name}};
    r.artifacts = {name};
    return r;
}

inline Json change_list(const std::vector<ChangeMatch>& changes) {
    Json arr = Json::array();
    for (const auto& c : changes) arr.push_back({{"id", c.proposal.id}, {"time", std::string(to_string(c.proposal.time))}, {"change_angle", c.change_angle}});
    return arr;
}

inline const ProposalSet& require_proposals(const Session& s) {
    require(s.proposals.has_value(), ErrorKind::precondition, "no proposal file is loaded; upload mask proposals first");
    return *s.proposals;
}

inline ToolResult detect_supervised(Session& s, const Json& args) {
    const auto source = args.value("source", std::string("difference"));
    if (source == "precomputed") {
        s.require_pair();
        require(s.precomputed_mask.has_value(), ErrorKind::precondition, "no precomputed mask was uploaded with this pair");
        return mask_result(s, *s.precomputed_mask, "The precomputed change mask");
    }
    DifferenceConfig cfg;
    if (args.contains("threshold_mode")) cfg.threshold_mode = args.at("threshold_mode") == "fixed" ? ThresholdMode::fixed : ThresholdMode::otsu;
    if (args.contains("fixed_threshold")) cfg.fixed_threshold = args.at("fixed_threshold").get<double>();
    if (args.contains("blur_sigma")) cfg.blur_sigma = args.at("blur_sigma").get<double>();
    if (args.contains("min_area")) cfg.min_area = args.at("min_area").get<int>();
    return mask_result(s, difference_mask(s.require_pair(), cfg), "The difference detector");
}

inline MatchParams params_with(const Session& s, const Json& args) {
    Json overrides = Json::object();
    for (const char* key : {"change_angle_threshold", "stability_threshold", "area_threshold", "object_similarity_threshold", "top_k"})
        if (args.contains(key)) overrides[key] = std::string_view(key) == "top_k" ? Json(args.at(key).get<std::size_t>()) : args.at(key);
    return match_params_from_json(overrides, s.params);
}

inline ToolResult detect_zeroshot(Session& s, const Json& args) {
    const auto& set = require_proposals(s);
    const auto params = params_with(s, args);
    const auto changes = bitemporal_match(set.at(Epoch::t1), set.at(Epoch::t2), params);
    auto r = mask_result(s, proposals_to_mask(changes, set.width, set.height),
                         "The zero-shot change mask (" + std::to_string(changes.size()) + " changed proposals)");
    r.data["changes"] = change_list(changes);
    return r;
}

inline std::vector<QueryPoint> parse_points(const Json& points) {
    std::vector<QueryPoint> out;
    for (const auto& p : points) {
        QueryPoint q;
        q.row = p.at("row").get<int>();
        q.col = p.at("col").get<int>();
        q.time = p.value("time", std::string("t1")) == "t2" ? Epoch::t2 : Epoch::t1;
        out.push_back(q);
    }
    return out;
}

} // namespace detail

/// Point query shared by the tool and the direct HTTP endpoint.
inline ToolResult run_point_query(Session& s, const std::vector<QueryPoint>& points, const MatchParams& params) {
    const auto& set = detail::require_proposals(s);
    const auto res = point_query(points, set.at(Epoch::t1), set.at(Epoch::t2), set.width, set.height, params);
    auto r = detail::mask_result(s, proposals_to_mask(res.changes, set.width, set.height),
                                 "The point-query change mask (" + std::to_string(res.category_ids.size()) + " similar proposals, " +
                                     std::to_string(res.changes.size()) + " changed)");
    r.data["seed_ids"] = res.seed_ids;
    r.data["category_ids"] = res.category_ids;
    r.data["changes"] = detail::change_list(res.changes);
    return r;
}

namespace detail {

inline ToolResult point_query_tool(Session& s, const Json& args) {
    return run_point_query(s, parse_points(args.at("points")), params_with(s, args));
}

inline ToolResult caption_tool(Session& s, const Json& args) {
    const auto& mask = s.require_mask();
    const auto seed = args.value("seed", std::uint64_t{0});
    auto set = generate_caption_set(mask, s.human_caption, seed);
    const auto all = set.all();
    const auto name = s.add_json_artifact({{"captions", all}, {"human", set.human.has_value()}});
    ToolResult r;
    r.summary = "Generated " + std::to_string(all.size()) + " captions:";
    for (std::size_t i = 0; i < all.size(); ++i) r.summary += " (" + std::to_string(i + 1) + ") " + all[i] + ".";
    r.data = {{"captions", all}, {"human", set.human.has_value()}, {"captions_file", name}};
    r.artifacts = {name};
    s.last_captions = std::move(set);
    return r;
}

inline ToolResult percentage_tool(Session& s, const Json&) {
    const double f = change_fraction(s.require_mask());
    ToolResult r;
    r.summary = "The deforested area covers " + fixed(100.0 * f, 2) + "% of the image.";
    r.data = {{"change_fraction", f}, {"percentage", 100.0 * f}};
    return r;
}

inline ToolResult count_tool(Session& s, const Json& args) {
    const auto conn = args.value("connectivity", 8) == 4 ? Connectivity::four : Connectivity::eight;
    const auto patches = connected_patches(s.require_mask(), conn);
    const auto st = patch_statistics(patches);
    ToolResult r;
    r.summary = "There " + std::string(st.count == 1 ? "is 1 cleared patch" : "are " + std::to_string(st.count) + " cleared patches");
    if (st.count > 0) r.summary += " with a mean area of " + fixed(st.mean_area, 1) + " pixels";
    r.summary += ".";
    r.data = {{"count", st.count}, {"mean_area", st.mean_area}, {"std_area", st.std_area}, {"coefficient_of_variation", st.coefficient_of_variation}};
    return r;
}

inline ToolResult compare_tool(Session& s, const Json&) {
    const auto& pair = s.require_pair();
    require(pair.ground_truth().has_value(), ErrorKind::precondition, "no ground-truth mask was uploaded with this pair");
    const auto& pred = s.require_mask();
    const auto& gt = *pair.ground_truth();
    const auto cm = accumulate({}, pred, gt);
    const auto iou = miou(cm);
    const auto name = s.add_artifact(png::encode_rgb(overlay(pred, gt, pair.image_b())), "png", "image/png");
    ToolResult r;
    r.summary = "Against the ground truth the mask scores mIoU " + fixed(100.0 * iou.miou, 2) + "% (change IoU " + fixed(100.0 * iou.iou_c, 2) +
                "%). The overlay shows agreement in yellow, false alarms in red and misses in green.";
    r.data = {{"miou", iou.miou}, {"iou_change", iou.iou_c}, {"iou_no_change", iou.iou_nc},
              {"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}, {"overlay", name}};
    r.artifacts = {name};
    return r;
}

inline Json object_schema(Json properties, Json required = Json::array()) {
    return {{"type", "object"}, {"properties", std::move(properties)}, {"required", std::move(required)}, {"additionalProperties", false}};
}

inline Json angle_schema() { return {{"type", "number"}, {"minimum", 0}, {"maximum", 180}}; }
inline Json unit_schema() { return {{"type", "number"}, {"minimum", 0}, {"maximum", 1}}; }

} // namespace detail

inline Registry register_tools() {
    using detail::object_schema;
    const Json match_props = {
        {"change_angle_threshold", detail::angle_schema()},
        {"stability_threshold", detail::unit_schema()},
        {"area_threshold", detail::unit_schema()},
        {"top_k", {{"type", "integer"}, {"minimum", 1}}},
    };
    Json point_props = match_props;
    point_props["object_similarity_threshold"] = detail::angle_schema();
    point_props["points"] = {
        {"type", "array"},
        {"minItems", 1},
        {"items", object_schema({{"row", {{"type", "integer"}, {"minimum", 0}}},
                                 {"col", {{"type", "integer"}, {"minimum", 0}}},
                                 {"time", {{"type", "string"}, {"enum", {"t1", "t2"}}}}},
                                {"row", "col"})},
    };
    return {
        {"detect_changes_supervised",
         "Detect forest change between images A and B with the pixel-difference detector, or use the precomputed mask uploaded with the pair. Produces a change mask.",
         object_schema({{"source", {{"type", "string"}, {"enum", {"difference", "precomputed"}}}},
                        {"threshold_mode", {{"type", "string"}, {"enum", {"otsu", "fixed"}}}},
                        {"fixed_threshold", {{"type", "number"}, {"minimum", 0}, {"maximum", 442}}},
                        {"blur_sigma", {{"type", "number"}, {"minimum", 0}, {"maximum", 10}}},
                        {"min_area", {{"type", "integer"}, {"minimum", 0}}}}),
         {{"source", "difference"}},
         detail::detect_supervised},
        {"detect_changes_zeroshot",
         "Detect changes without training by comparing mask-proposal embeddings across the two dates. Needs an uploaded proposal file. Produces a change mask.",
         object_schema(match_props),
         {{"change_angle_threshold", 145}},
         detail::detect_zeroshot},
        {"point_query_changes",
         "Find changed objects similar to the ones under the given pixel points (row, col, time t1 or t2). Needs an uploaded proposal file. Produces a change mask.",
         object_schema(point_props, {"points"}),
         {{"points", {{{"row", 10}, {"col", 20}, {"time", "t1"}}}}},
         detail::point_query_tool},
        {"caption_changes",
         "Describe the current change mask in words: the dataset caption when one exists plus four generated captions.",
         object_schema({{"seed", {{"type", "integer"}, {"minimum", 0}}}}),
         Json::object(),
         detail::caption_tool},
        {"deforestation_percentage",
         "Percentage of the image marked as changed in the current change mask.",
         object_schema(Json::object()),
         Json::object(),
         detail::percentage_tool},
        {"count_patches",
         "Count the separate cleared patches in the current change mask and report their mean area.",
         object_schema({{"connectivity", {{"type", "integer"}, {"enum", {4, 8}}}}}),
         {{"connectivity", 8}},
         detail::count_tool},
        {"compare_with_ground_truth",
         "Compare the current change mask with the uploaded ground truth: mIoU plus a colour overlay.",
         object_schema(Json::object()),
         Json::object(),
         detail::compare_tool},
    };
}

inline const Tool* find_tool(const Registry& registry, const std::string& name) {
    for (const auto& t : registry)
        if (t.name == name) return &t;
    return nullptr;
}

/// Validates and runs one call. Failures come back as a result with
/// `ok == false` so the language model can relay them.
inline ToolResult execute_tool(Session& session, const Registry& registry, const std::string& name, const Json& args) {
    ToolResult r;
    r.ok = false;
    const Tool* tool = find_tool(registry, name);
    if (tool == nullptr) {
        r.error_kind = "unknown_tool";
        r.summary = "unknown tool \"" + name + "\"";
        return r;
    }
    if (const auto violations = validate_schema(tool->parameters, args); !violations.empty()) {
        r.error_kind = "invalid_arguments";
        r.summary = name + ": " + describe(violations);
        return r;
    }
    try {
        return tool->handler(session, args);
    } catch (const Error& e) {
        r.error_kind = std::string(to_string(e.kind()));
        r.summary = name + " failed: " + e.what();
        return r;
    }
}

} // namespace forestchat::agent
