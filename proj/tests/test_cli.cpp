// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "dataset_fixture.hpp"
#include "fixtures.hpp"
#include "forestchat/evaluation.hpp"
#include "forestchat/latent.hpp"
#include "forestchat/png_io.hpp"
#include "forestchat/proposal_io.hpp"

namespace fc = forestchat;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

struct CommandResult {
    int code = -1;
    std::string out;
};

/// Runs the CLI with `args`; captures stdout, stderr goes to `dir`/stderr.txt.
CommandResult run_cli(const std::string& args, const fs::path& dir) {
    const std::string cmd = std::string("\"") + FORESTCHAT_CLI + "\" " + args + " 2>\"" + (dir / "stderr.txt").string() + "\"";
    CommandResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) r.out += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

} // namespace

TEST(Cli, HelpListsSubcommands) {
    fc::testing::TempDir dir("cli_help");
    const auto r = run_cli("--help", dir.path());
    EXPECT_EQ(r.code, 0);
    for (const char* sub : {"serve", "eval-captions", "eval-masks", "detect", "caption", "zeroshot", "synth-proposals", "mtl-lab", "dataset"})
        EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
}

TEST(Cli, UsageErrorsExitNonzero) {
    fc::testing::TempDir dir("cli_usage");
    EXPECT_NE(run_cli("", dir.path()).code, 0);
    EXPECT_NE(run_cli("zeroshot", dir.path()).code, 0);
    EXPECT_NE(run_cli("serve --addr nonsense", dir.path()).code, 0);
    EXPECT_NE(read_text(dir.path() / "stderr.txt").find("HOST:PORT"), std::string::npos);
}

TEST(Cli, DetectWritesMaskAndScoresAgainstTruth) {
    fc::testing::TempDir dir("cli_detect");
    const auto fx = fc::testing::square_fixture(11);
    fc::png::write_rgb(dir.path() / "a.png", fx.pair.image_a());
    fc::png::write_rgb(dir.path() / "b.png", fx.pair.image_b());
    fc::png::write_mask(dir.path() / "gt.png", fx.truth);
    const auto r = run_cli("detect --a " + q(dir.path() / "a.png") + " --b " + q(dir.path() / "b.png") + " --gt " + q(dir.path() / "gt.png") +
                               " --out " + q(dir.path() / "m.png") + " --overlay " + q(dir.path() / "o.png"),
                           dir.path());
    ASSERT_EQ(r.code, 0) << read_text(dir.path() / "stderr.txt");
    const auto j = Json::parse(r.out);
    const auto mask = fc::png::read_mask(dir.path() / "m.png");
    EXPECT_NEAR(j.at("change_fraction").get<double>(), fc::change_fraction(mask), 1e-12);
    EXPECT_GE(fc::testing::change_iou(mask, fx.truth), 0.8);
    EXPECT_GE(j.at("scores").at("miou").get<double>(), 0.8);
    EXPECT_TRUE(fs::exists(dir.path() / "o.png"));
}

TEST(Cli, ZeroShotMatchesLibrary) {
    fc::testing::TempDir dir("cli_zeroshot");
    const auto p = dir.path() / "p.json";
    ASSERT_EQ(run_cli("synth-proposals --seed 9 --out " + q(p) + " --truth " + q(dir.path() / "t.png"), dir.path()).code, 0);
    const auto r = run_cli("zeroshot --proposals " + q(p) + " --out " + q(dir.path() / "m.png"), dir.path());
    ASSERT_EQ(r.code, 0) << read_text(dir.path() / "stderr.txt");
    const auto set = fc::read_proposals(p);
    const auto direct = fc::proposals_to_mask(fc::bitemporal_match(set.at(fc::Epoch::t1), set.at(fc::Epoch::t2), fc::MatchParams{}),
                                              set.width, set.height);
    const auto cli_mask = fc::png::read_mask(dir.path() / "m.png");
    EXPECT_TRUE(std::ranges::equal(cli_mask.bits(), direct.bits()));
    EXPECT_EQ(Json::parse(r.out).at("params"), fc::to_json(fc::MatchParams{}));

    const auto bad = run_cli("zeroshot --proposals " + q(p) + " --stability 1.5", dir.path());
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(read_text(dir.path() / "stderr.txt").find("invalid_argument"), std::string::npos);
}

TEST(Cli, ZeroShotPointQueryMatchesLibrary) {
    fc::testing::TempDir dir("cli_points");
    fc::SynthSpec spec;
    spec.seed = 4;
    const auto synth = fc::synth_proposals(spec);
    const auto p = dir.path() / "p.json";
    fc::write_proposals(synth.set, p);
    const auto planted = synth.set.at(fc::Epoch::t2).front();
    const auto fp = fc::decode_footprint(planted.footprint, synth.set.width, synth.set.height);
    int row = -1, col = -1;
    for (int r = 0; r < fp.height() && row < 0; ++r)
        for (int c = 0; c < fp.width(); ++c)
            if (fp.at(r, c)) {
                row = r;
                col = c;
                break;
            }
    ASSERT_GE(row, 0);
    const auto res = run_cli("zeroshot --proposals " + q(p) + " --points " + std::to_string(row) + "," + std::to_string(col) + ",t2", dir.path());
    ASSERT_EQ(res.code, 0) << read_text(dir.path() / "stderr.txt");
    const auto direct = fc::point_query(std::vector<fc::QueryPoint>{{row, col, fc::Epoch::t2}}, synth.set.at(fc::Epoch::t1), synth.set.at(fc::Epoch::t2), synth.set.width,
                                        synth.set.height, fc::MatchParams{});
    const auto j = Json::parse(res.out);
    EXPECT_EQ(j.at("seed_ids").get<std::vector<int>>(), direct.seed_ids);
    EXPECT_EQ(j.at("changes").size(), direct.changes.size());
}

TEST(Cli, CaptionIsSeededAndIncludesHuman) {
    fc::testing::TempDir dir("cli_caption");
    const auto fx = fc::testing::square_fixture(2);
    fc::png::write_mask(dir.path() / "m.png", fx.truth);
    const auto a = run_cli("caption --mask " + q(dir.path() / "m.png") + " --seed 3", dir.path());
    const auto b = run_cli("caption --mask " + q(dir.path() / "m.png") + " --seed 3", dir.path());
    ASSERT_EQ(a.code, 0);
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(Json::parse(a.out).at("captions").size(), 4u);
    const auto h = run_cli("caption --mask " + q(dir.path() / "m.png") + " --human \"a clearing appeared\"", dir.path());
    const auto hj = Json::parse(h.out);
    EXPECT_EQ(hj.at("captions").size(), 5u);
    EXPECT_TRUE(hj.at("human").get<bool>());
}

TEST(Cli, EvalCaptionsAndMasks) {
    fc::testing::TempDir dir("cli_eval");
    std::ofstream(dir.path() / "c.json") << R"({"x": "a forest was cleared", "y": "trees were cut"})";
    std::ofstream(dir.path() / "r.json") << R"({"x": ["a forest was cleared"], "y": ["many trees were cut down"]})";
    const auto r = run_cli("eval-captions --candidates " + q(dir.path() / "c.json") + " --references " + q(dir.path() / "r.json") + " --out " +
                               q(dir.path() / "scores.json"),
                           dir.path());
    ASSERT_EQ(r.code, 0) << read_text(dir.path() / "stderr.txt");
    const auto j = fc::read_json_file(dir.path() / "scores.json");
    const auto expected = fc::evaluate_captions(
        fc::caption_corpus_from_json(fc::read_json_file(dir.path() / "c.json"), fc::read_json_file(dir.path() / "r.json")));
    EXPECT_DOUBLE_EQ(j.at("bleu4").get<double>(), expected.bleu[3]);
    EXPECT_DOUBLE_EQ(j.at("rouge_l").get<double>(), expected.rouge_l);
    EXPECT_EQ(j.at("items").get<int>(), 2);

    std::ofstream(dir.path() / "c2.json") << R"({"z": "x"})";
    const auto missing = run_cli("eval-captions --candidates " + q(dir.path() / "c2.json") + " --references " + q(dir.path() / "r.json"), dir.path());
    EXPECT_EQ(missing.code, 1);
    EXPECT_NE(read_text(dir.path() / "stderr.txt").find("not_found"), std::string::npos);

    fs::create_directories(dir.path() / "pred");
    fs::create_directories(dir.path() / "gt");
    const auto fx = fc::testing::square_fixture(5);
    fc::png::write_mask(dir.path() / "pred" / "a.png", fx.truth);
    fc::png::write_mask(dir.path() / "gt" / "a.png", fx.truth);
    const auto m = run_cli("eval-masks --pred " + q(dir.path() / "pred") + " --gt " + q(dir.path() / "gt"), dir.path());
    ASSERT_EQ(m.code, 0);
    EXPECT_DOUBLE_EQ(Json::parse(m.out).at("miou").get<double>(), 1.0);
}

TEST(Cli, MtlLabWritesHistoriesAndReports) {
    fc::testing::TempDir dir("cli_mtl");
    std::ofstream(dir.path() / "lab.json")
        << R"({"steps": 40, "seed": 7, "strategies": [{"balancing": "equal", "surgery": "none"}, {"balancing": "uncertainty", "surgery": "pcgrad"}]})";
    const auto out = dir.path() / "out";
    const auto r = run_cli("mtl-lab run --config " + q(dir.path() / "lab.json") + " --runs 2 --out " + q(out), dir.path());
    ASSERT_EQ(r.code, 0) << read_text(dir.path() / "stderr.txt");
    for (const char* f : {"report.md", "report.csv", "report.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
    std::size_t histories = 0;
    for (const auto& e : fs::directory_iterator(out / "runs")) {
        const auto h = fc::read_json_file(e.path());
        EXPECT_TRUE(h.is_object());
        ++histories;
    }
    EXPECT_EQ(histories, 4u);
    const auto again = run_cli("mtl-lab run --config " + q(dir.path() / "lab.json") + " --runs 2 --out " + q(dir.path() / "out2"), dir.path());
    EXPECT_EQ(read_text(out / "report.json"), read_text(dir.path() / "out2" / "report.json"));
}

TEST(Cli, DatasetSubcommands) {
    fc::testing::TempDir dir("cli_dataset");
    std::vector<fc::testing::ToyExample> examples;
    for (int i = 0; i < 10; ++i)
        examples.push_back({"ex" + std::to_string(i), i < 8 ? "train" : "test",
                            {i % 2 == 0 ? "many trees were removed" : "a road was built near the houses"}, i});
    fc::testing::write_toy_dataset(dir.path() / "data", examples);

    const auto f = run_cli("dataset filter-trees --root " + q(dir.path() / "data"), dir.path());
    ASSERT_EQ(f.code, 0) << read_text(dir.path() / "stderr.txt");
    const auto fj = Json::parse(f.out);
    EXPECT_EQ(fj.at("source").at("total").get<int>(), 10);
    EXPECT_EQ(fj.at("tree").at("total").get<int>(), 5);

    const auto s = run_cli("dataset split --root " + q(dir.path() / "data") + " --seed 3", dir.path());
    ASSERT_EQ(s.code, 0);
    const auto sj = Json::parse(s.out);
    EXPECT_EQ(sj.at("sizes").at("train").get<int>(), 8);
    EXPECT_EQ(sj.at("sizes").at("val").get<int>(), 1);
    EXPECT_EQ(sj.at("sizes").at("test").get<int>(), 1);
    EXPECT_EQ(run_cli("dataset split --root " + q(dir.path() / "data") + " --seed 3", dir.path()).out, s.out);

    const auto st = run_cli("dataset stats --root " + q(dir.path() / "data") + " --split train", dir.path());
    ASSERT_EQ(st.code, 0);
    const auto stj = Json::parse(st.out);
    EXPECT_EQ(stj.at("examples").get<int>(), 8);
    // Rows 0..7 of 16 changed: mean over i/16.
    EXPECT_NEAR(stj.at("mask").at("mean_change_percent").get<double>(), 100.0 * (28.0 / 16.0) / 8.0, 1e-9);
}
