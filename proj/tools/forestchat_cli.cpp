// SPDX-License-Identifier: Apache-2.0
// Command-line front end: service, evaluation, detection, captioning,
// zero-shot matching, the multi-task lab and dataset utilities.

#include <csignal>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "forestchat/agent/service.hpp"
#include "forestchat/caption.hpp"
#include "forestchat/dataset.hpp"
#include "forestchat/evaluation.hpp"
#include "forestchat/latent.hpp"
#include "forestchat/mtl_toy.hpp"
#include "forestchat/png_io.hpp"
#include "forestchat/proposal_io.hpp"
#include "forestchat/raster.hpp"

namespace fc = forestchat;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

/// JSON to `out` when set, otherwise to stdout.
void emit(const Json& j, const std::string& out) {
    if (out.empty())
        std::cout << j.dump(2) << '\n';
    else
        fc::write_text_file(out, j.dump(2) + "\n");
}

std::pair<std::string, int> parse_addr(const std::string& addr) {
    static const std::regex re(R"(^(.+):(\d{1,5})$)");
    std::smatch m;
    fc::require(std::regex_match(addr, m, re), fc::ErrorKind::invalid_argument, "--addr must be HOST:PORT, got \"" + addr + "\"");
    const int port = std::stoi(m[2].str());
    fc::require(port <= 65535, fc::ErrorKind::invalid_argument, "port out of range");
    return {m[1].str(), port};
}

fc::QueryPoint parse_point(const std::string& text) {
    static const std::regex re(R"(^(\d+),(\d+)(?:,(t1|t2))?$)");
    std::smatch m;
    fc::require(std::regex_match(text, m, re), fc::ErrorKind::invalid_argument, "point must be ROW,COL[,t1|t2], got \"" + text + "\"");
    return {std::stoi(m[1].str()), std::stoi(m[2].str()), m[3].matched && m[3].str() == "t2" ? fc::Epoch::t2 : fc::Epoch::t1};
}

fc::agent::Service* g_service = nullptr;

void stop_service(int) {
    if (g_service != nullptr) g_service->stop();
}

// ---------------------------------------------------------------------------

struct ServeArgs {
    std::string addr = "127.0.0.1:8080";
    std::string data_dir;
    std::string static_dir;
};

int run_serve(const ServeArgs& a) {
    const auto [host, port] = parse_addr(a.addr);
    fc::agent::ServiceConfig cfg;
    if (!a.data_dir.empty()) cfg.data_dir = a.data_dir;
    if (!a.static_dir.empty()) cfg.static_dir = a.static_dir;
    fc::agent::Service service(cfg, fc::agent::backend_from_env());
    const int bound = service.bind(host, port);
    g_service = &service;
    std::signal(SIGINT, stop_service);
    std::signal(SIGTERM, stop_service);
    std::cerr << "listening on http://" << host << ":" << bound << "\n";
    service.run();
    g_service = nullptr;
    return 0;
}

struct EvalCaptionArgs {
    std::string candidates, references, out;
};

int run_eval_captions(const EvalCaptionArgs& a) {
    const auto corpus = fc::caption_corpus_from_json(fc::read_json_file(a.candidates), fc::read_json_file(a.references));
    auto j = fc::to_json(fc::evaluate_captions(corpus));
    j["items"] = corpus.items.size();
    emit(j, a.out);
    return 0;
}

struct EvalMaskArgs {
    std::string pred, gt, out;
};

int run_eval_masks(const EvalMaskArgs& a) {
    const auto ev = fc::evaluate_mask_dirs(a.pred, a.gt);
    auto j = fc::to_json(ev.scores);
    j["images"] = ev.images;
    j["confusion"] = {{"tp", ev.confusion.tp}, {"fp", ev.confusion.fp}, {"fn", ev.confusion.fn}, {"tn", ev.confusion.tn}};
    emit(j, a.out);
    return 0;
}

struct DetectArgs {
    std::string a, b, gt, out_mask, overlay, report, threshold = "otsu";
    double fixed_threshold = 60.0, blur = 1.0;
    int min_area = 50;
};

int run_detect(const DetectArgs& a) {
    std::optional<fc::ChangeMask> gt;
    if (!a.gt.empty()) gt = fc::png::read_mask(a.gt);
    const fc::BitemporalPair pair(fc::png::read_rgb(a.a), fc::png::read_rgb(a.b), gt);
    fc::DifferenceConfig cfg;
    cfg.threshold_mode = a.threshold == "fixed" ? fc::ThresholdMode::fixed : fc::ThresholdMode::otsu;
    cfg.fixed_threshold = a.fixed_threshold;
    cfg.blur_sigma = a.blur;
    cfg.min_area = a.min_area;
    const auto mask = fc::difference_mask(pair, cfg);
    fc::png::write_mask(a.out_mask, mask);
    const auto patches = fc::connected_patches(mask);
    Json j{{"mask", a.out_mask}, {"change_fraction", fc::change_fraction(mask)}, {"patch_count", patches.size()}};
    if (gt) {
        j["scores"] = fc::to_json(fc::miou(fc::accumulate({}, mask, *gt)));
        if (!a.overlay.empty()) {
            fc::png::write_rgb(a.overlay, fc::overlay(mask, *gt, pair.image_b()));
            j["overlay"] = a.overlay;
        }
    }
    emit(j, a.report);
    return 0;
}

struct CaptionArgs {
    std::string mask, human, out;
    std::uint64_t seed = 0;
};

int run_caption(const CaptionArgs& a) {
    const auto mask = fc::png::read_mask(a.mask);
    std::optional<std::string> human;
    if (!a.human.empty()) human = a.human;
    const auto set = fc::generate_caption_set(mask, human, a.seed);
    const auto f = fc::extract_features(mask);
    emit({{"captions", set.all()},
          {"human", set.human.has_value()},
          {"features",
           {{"severity", std::string(fc::to_string(f.severity))},
            {"change_fraction", f.change_fraction},
            {"patch_count", f.patch_count},
            {"size_variation", std::string(fc::to_string(f.size_variation))}}}},
         a.out);
    return 0;
}

struct ZeroShotArgs {
    std::string proposals, out_mask, report;
    double change_thresh = 145.0, stability = 0.93, max_area = 0.9, obj_sim = 60.0;
    std::size_t min_area_pixels = 400;
    std::optional<std::size_t> top_k;
    std::vector<std::string> points;
};

int run_zeroshot(const ZeroShotArgs& a) {
    const auto set = fc::read_proposals(a.proposals);
    fc::MatchParams p;
    p.change_angle_threshold = a.change_thresh;
    p.stability_threshold = a.stability;
    p.area_threshold = a.max_area;
    p.object_similarity_threshold = a.obj_sim;
    p.min_area_pixels = a.min_area_pixels;
    p.top_k = a.top_k;
    p.validate();
    Json report{{"params", fc::to_json(p)}};
    std::vector<fc::ChangeMatch> changes;
    if (a.points.empty()) {
        changes = fc::bitemporal_match(set.at(fc::Epoch::t1), set.at(fc::Epoch::t2), p);
    } else {
        std::vector<fc::QueryPoint> pts;
        for (const auto& s : a.points) pts.push_back(parse_point(s));
        const auto res = fc::point_query(pts, set.at(fc::Epoch::t1), set.at(fc::Epoch::t2), set.width, set.height, p);
        report["seed_ids"] = res.seed_ids;
        report["category_ids"] = res.category_ids;
        changes = res.changes;
    }
    const auto mask = fc::proposals_to_mask(changes, set.width, set.height);
    Json list = Json::array();
    for (const auto& c : changes)
        list.push_back({{"id", c.proposal.id}, {"time", std::string(fc::to_string(c.proposal.time))}, {"change_angle", c.change_angle}});
    report["changes"] = list;
    report["change_fraction"] = fc::change_fraction(mask);
    if (!a.out_mask.empty()) {
        fc::png::write_mask(a.out_mask, mask);
        report["mask"] = a.out_mask;
    }
    emit(report, a.report);
    return 0;
}

struct SynthArgs {
    std::string out, truth;
    std::uint64_t seed = 0;
    int width = 256, height = 256;
};

int run_synth(const SynthArgs& a) {
    fc::SynthSpec spec;
    spec.seed = a.seed;
    spec.width = a.width;
    spec.height = a.height;
    const auto r = fc::synth_proposals(spec);
    fc::write_proposals(r.set, a.out);
    if (!a.truth.empty()) fc::png::write_mask(a.truth, r.truth);
    std::cout << Json{{"proposals", r.set.proposals.size()}, {"planted_ids", r.planted_ids}}.dump() << '\n';
    return 0;
}

struct MtlArgs {
    std::string config, out;
    int runs = 3;
};

int run_mtl(const MtlArgs& a) {
    namespace mtl = fc::mtl;
    fc::require(a.runs >= 1, fc::ErrorKind::invalid_argument, "--runs must be at least 1");
    const auto cfg = a.config.empty() ? mtl::lab_config_from_json(Json::object()) : mtl::lab_config_from_json(fc::read_json_file(a.config));
    const fs::path out(a.out);
    std::vector<mtl::RunRecord> records;
    for (const auto& strategy : cfg.strategies)
        for (int run = 0; run < a.runs; ++run) {
            const auto seed = mtl::run_seed(cfg.seed, run);
            const auto res = mtl::train_toy(strategy, cfg.steps, seed);
            const auto file = out / "runs" / (std::string(mtl::to_string(strategy.balancing)) + "_" + std::string(mtl::to_string(strategy.surgery)) +
                                              "_run" + std::to_string(run) + ".json");
            fc::write_text_file(file, mtl::history_to_json(strategy, run, seed, res).dump() + "\n");
            records.push_back(mtl::record_of(strategy, run, seed, res));
            std::cerr << strategy.name() << " run " << run << ": regression " << records.back().initial.regression << " -> "
                      << records.back().final.regression << ", classification " << records.back().initial.classification << " -> "
                      << records.back().final.classification << "\n";
        }
    const auto rep = mtl::ablation_report(records);
    fc::write_text_file(out / "report.json", mtl::to_json(rep).dump(2) + "\n");
    fc::write_text_file(out / "report.md", mtl::to_markdown(rep));
    fc::write_text_file(out / "report.csv", mtl::to_csv(rep));
    std::cout << mtl::to_markdown(rep);
    return 0;
}

struct DatasetArgs {
    std::string root, out, split;
    std::uint64_t seed = 0;
    std::vector<double> ratios{0.8, 0.1, 0.1};
    std::vector<std::size_t> counts;
    bool tree_only = false;
};

Json split_sizes(const fc::dataset::DatasetIndex& index) {
    Json j;
    for (auto s : fc::dataset::kAllSplits) j[std::string(fc::dataset::to_string(s))] = index.size(s);
    j["total"] = index.size();
    return j;
}

int run_filter_trees(const DatasetArgs& a) {
    const auto index = fc::dataset::load_index(a.root);
    const auto tree = fc::dataset::filter_tree_examples(index);
    Json ids;
    for (auto s : fc::dataset::kAllSplits) {
        Json list = Json::array();
        for (const auto& ex : tree.examples(s)) list.push_back(ex.id);
        ids[std::string(fc::dataset::to_string(s))] = list;
    }
    emit({{"source", split_sizes(index)}, {"tree", split_sizes(tree)}, {"ids", ids}}, a.out);
    return 0;
}

int run_stats(const DatasetArgs& a) {
    auto index = fc::dataset::load_index(a.root);
    if (a.tree_only) index = fc::dataset::filter_tree_examples(index);
    std::vector<fc::dataset::Example> examples;
    for (auto s : fc::dataset::kAllSplits)
        if (a.split.empty() || fc::dataset::to_string(s) == a.split)
            examples.insert(examples.end(), index.examples(s).begin(), index.examples(s).end());
    fc::require(!examples.empty(), fc::ErrorKind::not_found, "no examples selected");
    const auto ms = fc::dataset::mask_stats(examples);
    const auto ns = fc::dataset::normalization_stats(examples);
    emit({{"examples", examples.size()},
          {"sizes", split_sizes(index)},
          {"mask", {{"mean_change_percent", 100.0 * ms.mean}, {"max_change_percent", 100.0 * ms.max}, {"histogram_5pct", ms.histogram}}},
          {"normalization", {{"mean", ns.mean}, {"std", ns.std}}}},
         a.out);
    return 0;
}

int run_split(const DatasetArgs& a) {
    auto index = fc::dataset::load_index(a.root);
    if (a.tree_only) index = fc::dataset::filter_tree_examples(index);
    fc::require(a.ratios.size() == 3, fc::ErrorKind::invalid_argument, "--ratios takes three values");
    std::optional<fc::dataset::SplitCounts> counts;
    if (!a.counts.empty()) {
        fc::require(a.counts.size() == 2, fc::ErrorKind::invalid_argument, "--counts takes VAL TEST");
        counts = fc::dataset::SplitCounts{a.counts[0], a.counts[1]};
    }
    const auto s = fc::dataset::make_splits(fc::dataset::all_ids(index), {a.ratios[0], a.ratios[1], a.ratios[2]}, a.seed, counts);
    emit({{"seed", a.seed},
          {"sizes", {{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}}},
          {"train", s.train},
          {"val", s.val},
          {"test", s.test}},
         a.out);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Forest change analysis workbench"};
    app.require_subcommand(1);
    int status = 0;

    ServeArgs serve;
    auto* cmd = app.add_subcommand("serve", "Run the HTTP service");
    cmd->add_option("--addr", serve.addr, "HOST:PORT to bind")->capture_default_str();
    cmd->add_option("--data-dir", serve.data_dir, "Directory for session artifacts");
    cmd->add_option("--static-dir", serve.static_dir, "Directory of UI files served at /");
    cmd->callback([&] { status = run_serve(serve); });

    EvalCaptionArgs ec;
    cmd = app.add_subcommand("eval-captions", "Score candidate captions against references");
    cmd->add_option("--candidates", ec.candidates, "JSON {id: caption} or [{id, caption}]")->required()->check(CLI::ExistingFile);
    cmd->add_option("--references", ec.references, "JSON {id: [captions]} or [{id|example_id, captions}]")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", ec.out, "Write the metrics JSON here instead of stdout");
    cmd->callback([&] { status = run_eval_captions(ec); });

    EvalMaskArgs em;
    cmd = app.add_subcommand("eval-masks", "Dataset-level IoU of predicted masks against ground truth");
    cmd->add_option("--pred", em.pred, "Directory of predicted PNG masks")->required();
    cmd->add_option("--gt", em.gt, "Directory of ground-truth PNG masks")->required();
    cmd->add_option("--out", em.out, "Write the metrics JSON here instead of stdout");
    cmd->callback([&] { status = run_eval_masks(em); });

    DetectArgs det;
    cmd = app.add_subcommand("detect", "Pixel-difference change detection on an image pair");
    cmd->add_option("--a", det.a, "Image A (before)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--b", det.b, "Image B (after)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--gt", det.gt, "Ground-truth mask for scoring")->check(CLI::ExistingFile);
    cmd->add_option("--out", det.out_mask, "Output mask PNG")->required();
    cmd->add_option("--overlay", det.overlay, "Output overlay PNG (needs --gt)");
    cmd->add_option("--report", det.report, "Write the report JSON here instead of stdout");
    cmd->add_option("--threshold", det.threshold, "otsu or fixed")->check(CLI::IsMember({"otsu", "fixed"}))->capture_default_str();
    cmd->add_option("--fixed-threshold", det.fixed_threshold, "RGB distance threshold for --threshold fixed")->capture_default_str();
    cmd->add_option("--blur", det.blur, "Gaussian sigma before thresholding")->capture_default_str();
    cmd->add_option("--min-area", det.min_area, "Drop patches smaller than this")->capture_default_str();
    cmd->callback([&] { status = run_detect(det); });

    CaptionArgs cap;
    cmd = app.add_subcommand("caption", "Generate captions for a change mask");
    cmd->add_option("--mask", cap.mask, "Change mask PNG")->required()->check(CLI::ExistingFile);
    cmd->add_option("--human", cap.human, "Existing human caption to include");
    cmd->add_option("--seed", cap.seed, "Phrasing seed")->capture_default_str();
    cmd->add_option("--out", cap.out, "Write the caption JSON here instead of stdout");
    cmd->callback([&] { status = run_caption(cap); });

    ZeroShotArgs zs;
    cmd = app.add_subcommand("zeroshot", "Zero-shot change detection from mask proposals");
    cmd->add_option("--proposals", zs.proposals, "Proposal JSON file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--change-thresh", zs.change_thresh, "Change angle threshold in degrees")->capture_default_str();
    cmd->add_option("--stability", zs.stability, "Minimum stability score")->capture_default_str();
    cmd->add_option("--max-area", zs.max_area, "Maximum proposal area fraction")->capture_default_str();
    cmd->add_option("--obj-sim", zs.obj_sim, "Object similarity angle for point queries")->capture_default_str();
    cmd->add_option("--min-area-pixels", zs.min_area_pixels, "Minimum proposal area in pixels")->capture_default_str();
    cmd->add_option("--top-k", zs.top_k, "Keep the K largest change angles instead of thresholding");
    cmd->add_option("--points", zs.points, "Point prompts ROW,COL[,t1|t2]");
    cmd->add_option("--out", zs.out_mask, "Output mask PNG");
    cmd->add_option("--report", zs.report, "Write the report JSON here instead of stdout");
    cmd->callback([&] { status = run_zeroshot(zs); });

    SynthArgs syn;
    cmd = app.add_subcommand("synth-proposals", "Write a synthetic proposal file with planted changes");
    cmd->add_option("--out", syn.out, "Output proposal JSON")->required();
    cmd->add_option("--truth", syn.truth, "Output planted-change mask PNG");
    cmd->add_option("--seed", syn.seed, "Generator seed")->capture_default_str();
    cmd->add_option("--width", syn.width, "Image width")->capture_default_str();
    cmd->add_option("--height", syn.height, "Image height")->capture_default_str();
    cmd->callback([&] { status = run_synth(syn); });

    MtlArgs mt;
    auto* lab = app.add_subcommand("mtl-lab", "Multi-task loss balancing and gradient surgery lab");
    lab->require_subcommand(1);
    cmd = lab->add_subcommand("run", "Train the toy model under each strategy and write the ablation report");
    cmd->add_option("--config", mt.config, "Lab config JSON (default: full grid, 500 steps)")->check(CLI::ExistingFile);
    cmd->add_option("--runs", mt.runs, "Runs per strategy")->capture_default_str();
    cmd->add_option("--out", mt.out, "Output directory")->required();
    cmd->callback([&] { status = run_mtl(mt); });

    DatasetArgs ds;
    auto* data = app.add_subcommand("dataset", "Dataset indexing, filtering, statistics and splits");
    data->require_subcommand(1);
    cmd = data->add_subcommand("filter-trees", "Keep examples whose captions mention trees");
    cmd->add_option("--root", ds.root, "Dataset root")->required();
    cmd->add_option("--out", ds.out, "Write the JSON here instead of stdout");
    cmd->callback([&] { status = run_filter_trees(ds); });
    cmd = data->add_subcommand("stats", "Mask and normalisation statistics");
    cmd->add_option("--root", ds.root, "Dataset root")->required();
    cmd->add_option("--split", ds.split, "Only this split")->check(CLI::IsMember({"train", "val", "test"}));
    cmd->add_flag("--tree-only", ds.tree_only, "Filter to tree examples first");
    cmd->add_option("--out", ds.out, "Write the JSON here instead of stdout");
    cmd->callback([&] { status = run_stats(ds); });
    cmd = data->add_subcommand("split", "Seeded train/val/test partition");
    cmd->add_option("--root", ds.root, "Dataset root")->required();
    cmd->add_option("--seed", ds.seed, "Shuffle seed")->capture_default_str();
    cmd->add_option("--ratios", ds.ratios, "TRAIN VAL TEST fractions")->expected(3);
    cmd->add_option("--counts", ds.counts, "VAL TEST sizes overriding --ratios")->expected(2);
    cmd->add_flag("--tree-only", ds.tree_only, "Filter to tree examples first");
    cmd->add_option("--out", ds.out, "Write the JSON here instead of stdout");
    cmd->callback([&] { status = run_split(ds); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const fc::Error& e) {
        std::cerr << "error (" << fc::to_string(e.kind()) << "): " << e.what() << "\n";
        return e.kind() == fc::ErrorKind::invalid_argument || e.kind() == fc::ErrorKind::parse ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return status;
}
