// SPDX-License-Identifier: Apache-2.0
#pragma once

// File-level evaluation: caption corpora from JSON and mask directories.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forestchat/error.hpp"
#include "forestchat/metrics.hpp"
#include "forestchat/png_io.hpp"

namespace forestchat {

namespace detail {

/// Reads {id: value} or [{"id"|"example_id": ..., <field>: value}] into a map.
inline std::map<std::string, nlohmann::json> keyed_records(const nlohmann::json& j, const std::vector<std::string>& fields,
                                                           const std::string& what) {
    std::map<std::string, nlohmann::json> out;
    try {
        if (j.is_object()) {
            for (const auto& [k, v] : j.items()) out[k] = v;
            return out;
        }
        require(j.is_array(), ErrorKind::parse, what + " must be a JSON object or array");
        for (const auto& rec : j) {
            const auto id = rec.contains("id") ? rec.at("id").get<std::string>() : rec.at("example_id").get<std::string>();
            const auto field = std::find_if(fields.begin(), fields.end(), [&](const std::string& f) { return rec.contains(f); });
            require(field != fields.end(), ErrorKind::parse, what + " record \"" + id + "\" has no " + fields.front() + " field");
            require(out.count(id) == 0, ErrorKind::parse, what + " repeats id \"" + id + "\"");
            out[id] = rec.at(*field);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, what + ": " + e.what());
    }
    return out;
}

} // namespace detail

/// Pairs candidates ({id: text} or [{"id", "caption"}]) with references
/// ({id: [texts]} or [{"id"|"example_id", "captions"|"references"}]) by id, in id order.
inline CaptionCorpus caption_corpus_from_json(const nlohmann::json& candidates, const nlohmann::json& references) {
    const auto cands = detail::keyed_records(candidates, {"caption", "candidate"}, "candidates");
    const auto refs = detail::keyed_records(references, {"captions", "references"}, "references");
    CaptionCorpus corpus;
    for (const auto& [id, c] : cands) {
        const auto it = refs.find(id);
        require(it != refs.end(), ErrorKind::not_found, "no references for candidate \"" + id + "\"");
        require(c.is_string(), ErrorKind::parse, "candidate \"" + id + "\" must be a string");
        require(it->second.is_array(), ErrorKind::parse, "references for \"" + id + "\" must be a list of strings");
        CaptionItem item;
        item.candidate = c.get<std::string>();
        for (const auto& r : it->second) {
            require(r.is_string(), ErrorKind::parse, "references for \"" + id + "\" must be strings");
            item.references.push_back(r.get<std::string>());
        }
        corpus.items.push_back(std::move(item));
    }
    require(!corpus.items.empty(), ErrorKind::invalid_argument, "no candidates to score");
    return corpus;
}

inline nlohmann::json to_json(const CaptionScores& s) {
    nlohmann::json j{{"bleu1", s.bleu[0]}, {"bleu2", s.bleu[1]}, {"bleu3", s.bleu[2]}, {"bleu4", s.bleu[3]},
                     {"meteor_lite", s.meteor_lite}, {"rouge_l", s.rouge_l}};
    j["cider_d"] = s.cider_d ? nlohmann::json(*s.cider_d) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const IoUScores& s) { return {{"iou_c", s.iou_c}, {"iou_nc", s.iou_nc}, {"miou", s.miou}}; }

struct MaskDirEvaluation {
    ConfusionMatrix confusion;
    IoUScores scores;
    std::size_t images = 0;
};

/// Dataset-level confusion over every PNG in `gt_dir`, matched by file name.
inline MaskDirEvaluation evaluate_mask_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir) {
    for (const auto* d : {&pred_dir, &gt_dir})
        require(std::filesystem::is_directory(*d), ErrorKind::not_found, "directory " + d->string() + " does not exist");
    std::vector<std::filesystem::path> names;
    for (const auto& e : std::filesystem::directory_iterator(gt_dir))
        if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename());
    std::sort(names.begin(), names.end());
    require(!names.empty(), ErrorKind::not_found, "no PNG masks in " + gt_dir.string());
    MaskDirEvaluation ev;
    for (const auto& n : names) {
        require(std::filesystem::exists(pred_dir / n), ErrorKind::not_found, "missing prediction for " + n.string());
        ev.confusion = accumulate(ev.confusion, png::read_mask(pred_dir / n), png::read_mask(gt_dir / n));
        ++ev.images;
    }
    ev.scores = miou(ev.confusion);
    return ev;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, path.string() + ": " + e.what());
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << text;
    require(static_cast<bool>(out), ErrorKind::io, "failed writing " + path.string());
}

} // namespace forestchat
