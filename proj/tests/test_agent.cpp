// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <deque>
#include <regex>
#include <set>

#include "agent_fixture.hpp"
#include "forestchat/agent/chat.hpp"
#include "forestchat/agent/json_schema.hpp"
#include "forestchat/agent/tools.hpp"

namespace fc = forestchat;
namespace ag = forestchat::agent;
using ag::Json;

namespace {

/// Replays canned replies in order and records what it was sent.
class CannedBackend : public ag::ChatBackend {
public:
    explicit CannedBackend(std::deque<std::string> replies) : replies_(std::move(replies)) {}
    std::string name() const override { return "canned"; }
    std::string complete(const std::vector<ag::ChatMessage>& messages) override {
        seen.push_back(messages);
        if (replies_.empty()) fc::fail(fc::ErrorKind::backend, "canned backend exhausted");
        auto r = replies_.front();
        replies_.pop_front();
        return r;
    }
    std::vector<std::vector<ag::ChatMessage>> seen;

private:
    std::deque<std::string> replies_;
};

fc::ChangeMask three_blob_mask() {
    fc::ChangeMask m(32, 32);
    for (int r = 2; r < 6; ++r)
        for (int c = 2; c < 6; ++c) m.set(r, c, true);
    for (int r = 10; r < 20; ++r) m.set(r, 25, true);
    m.set(30, 30, true);
    return m;
}

void load_precomputed(ag::Session& s, const fc::ChangeMask& mask, std::optional<fc::ChangeMask> gt = std::nullopt) {
    s.pair = fc::BitemporalPair(fc::RgbImage(mask.width(), mask.height(), fc::Rgb{30, 90, 40}),
                                fc::RgbImage(mask.width(), mask.height(), fc::Rgb{160, 120, 70}), std::move(gt));
    s.precomputed_mask = mask;
}

} // namespace

// ---------------------------------------------------------------------------
// Schema validation
// ---------------------------------------------------------------------------

TEST(JsonSchema, AcceptsAndRejects) {
    const Json schema = {
        {"type", "object"},
        {"properties",
         {{"n", {{"type", "integer"}, {"minimum", 1}, {"maximum", 5}}},
          {"mode", {{"type", "string"}, {"enum", {"a", "b"}}}},
          {"pts", {{"type", "array"}, {"minItems", 1}, {"items", {{"type", "object"}, {"required", {"x"}}}}}}}},
        {"required", {"n"}},
        {"additionalProperties", false},
    };
    EXPECT_TRUE(ag::validate_schema(schema, {{"n", 3}, {"mode", "a"}, {"pts", {{{"x", 1}}}}}).empty());
    EXPECT_TRUE(ag::validate_schema(schema, {{"n", 3.0}}).empty());
    const auto v = ag::validate_schema(schema, {{"n", 7}, {"mode", "c"}, {"pts", {Json::object()}}, {"extra", 1}});
    std::set<std::string> paths;
    for (const auto& e : v) paths.insert(e.path);
    EXPECT_EQ(paths, (std::set<std::string>{"args.n", "args.mode", "args.pts[0].x", "args.extra"}));
    EXPECT_EQ(ag::validate_schema(schema, Json::object())[0].path, "args.n");
    EXPECT_EQ(ag::validate_schema(schema, Json::array())[0].message, "expected object");
    EXPECT_FALSE(ag::validate_schema(schema, {{"n", 2.5}}).empty());
    EXPECT_FALSE(ag::validate_schema(schema, {{"n", 2}, {"pts", Json::array()}}).empty());
}

// ---------------------------------------------------------------------------
// Registry and tools
// ---------------------------------------------------------------------------

TEST(Registry, HasExactlySevenTools) {
    const auto reg = ag::register_tools();
    std::set<std::string> names;
    for (const auto& t : reg) names.insert(t.name);
    EXPECT_EQ(reg.size(), 7u);
    EXPECT_EQ(names, (std::set<std::string>{"detect_changes_supervised", "detect_changes_zeroshot", "point_query_changes", "caption_changes",
                                            "deforestation_percentage", "count_patches", "compare_with_ground_truth"}));
}

TEST(Registry, ExampleArgumentsValidate) {
    for (const auto& t : ag::register_tools()) {
        EXPECT_FALSE(t.description.empty()) << t.name;
        EXPECT_EQ(t.parameters.at("type"), "object") << t.name;
        EXPECT_TRUE(ag::validate_schema(t.parameters, t.example_args).empty()) << t.name << ": " << ag::describe(ag::validate_schema(t.parameters, t.example_args));
        EXPECT_TRUE(ag::validate_schema(t.parameters, Json::parse(t.example_args.dump())).empty()) << t.name;
    }
}

TEST(Tools, UnknownToolIsStructuredError) {
    ag::Session s;
    const auto r = ag::execute_tool(s, ag::register_tools(), "google_scholar", Json::object());
    EXPECT_FALSE(r.ok);
    EXPECT_EQ(r.error_kind, "unknown_tool");
    EXPECT_EQ(r.to_json().at("error"), "unknown_tool");
}

TEST(Tools, InvalidArgumentsAreReported) {
    ag::Session s;
    const auto r = ag::execute_tool(s, ag::register_tools(), "count_patches", {{"connectivity", 6}});
    EXPECT_FALSE(r.ok);
    EXPECT_EQ(r.error_kind, "invalid_arguments");
    EXPECT_NE(r.summary.find("args.connectivity"), std::string::npos);
}

TEST(Tools, PreconditionsAreRelayed) {
    ag::Session s;
    const auto reg = ag::register_tools();
    for (const char* tool : {"detect_changes_zeroshot", "detect_changes_supervised", "caption_changes", "deforestation_percentage",
                             "count_patches", "compare_with_ground_truth"}) {
        const auto r = ag::execute_tool(s, reg, tool, Json::object());
        EXPECT_FALSE(r.ok) << tool;
        EXPECT_EQ(r.error_kind, "precondition") << tool;
    }
    const auto q = ag::execute_tool(s, reg, "point_query_changes", {{"points", {{{"row", 1}, {"col", 1}}}}});
    EXPECT_EQ(q.error_kind, "precondition");
}

TEST(Tools, CountPatchesOnThreeComponents) {
    ag::Session s;
    load_precomputed(s, three_blob_mask());
    const auto reg = ag::register_tools();
    ASSERT_TRUE(ag::execute_tool(s, reg, "detect_changes_supervised", {{"source", "precomputed"}}).ok);
    const auto r = ag::execute_tool(s, reg, "count_patches", Json::object());
    ASSERT_TRUE(r.ok) << r.summary;
    EXPECT_EQ(r.data.at("count"), 3);
    EXPECT_DOUBLE_EQ(r.data.at("mean_area").get<double>(), 27.0 / 3.0);
    EXPECT_EQ(r.summary, "There are 3 cleared patches with a mean area of 9.0 pixels.");
}

TEST(Tools, PercentageMatchesChangeFraction) {
    ag::Session s;
    load_precomputed(s, three_blob_mask());
    const auto reg = ag::register_tools();
    ag::execute_tool(s, reg, "detect_changes_supervised", {{"source", "precomputed"}});
    const auto r = ag::execute_tool(s, reg, "deforestation_percentage", Json::object());
    EXPECT_DOUBLE_EQ(r.data.at("percentage").get<double>(), 100.0 * 27.0 / 1024.0);
    EXPECT_EQ(r.summary, "The deforested area covers 2.64% of the image.");
}

TEST(Tools, CaptionCountDependsOnHumanCaption) {
    ag::Session s;
    load_precomputed(s, three_blob_mask());
    const auto reg = ag::register_tools();
    ag::execute_tool(s, reg, "detect_changes_supervised", {{"source", "precomputed"}});
    auto r = ag::execute_tool(s, reg, "caption_changes", Json::object());
    EXPECT_EQ(r.data.at("captions").size(), 4u);
    EXPECT_FALSE(r.data.at("human").get<bool>());
    s.human_caption = "three small clearings appear";
    r = ag::execute_tool(s, reg, "caption_changes", Json::object());
    ASSERT_EQ(r.data.at("captions").size(), 5u);
    EXPECT_EQ(r.data.at("captions")[0], "three small clearings appear");
    ASSERT_EQ(r.artifacts.size(), 1u);
    const auto& bytes = s.artifacts.at(r.artifacts[0]).bytes;
    EXPECT_EQ(Json::parse(std::string(bytes.begin(), bytes.end())).at("captions"), r.data.at("captions"));
}

TEST(Tools, CompareProducesOverlayAndScores) {
    ag::Session s;
    const auto gt = three_blob_mask();
    auto pred = gt;
    pred.set(30, 30, false);
    pred.set(0, 31, true);
    load_precomputed(s, pred, gt);
    const auto reg = ag::register_tools();
    ag::execute_tool(s, reg, "detect_changes_supervised", {{"source", "precomputed"}});
    const auto r = ag::execute_tool(s, reg, "compare_with_ground_truth", Json::object());
    ASSERT_TRUE(r.ok) << r.summary;
    EXPECT_EQ(r.data.at("tp"), 26);
    EXPECT_EQ(r.data.at("fp"), 1);
    EXPECT_EQ(r.data.at("fn"), 1);
    EXPECT_EQ(r.data.at("tn"), 996);
    EXPECT_DOUBLE_EQ(r.data.at("miou").get<double>(), (26.0 / 28.0 + 996.0 / 998.0) / 2.0);
    const auto& bytes = s.artifacts.at(r.data.at("overlay").get<std::string>()).bytes;
    const auto img = fc::png::decode_rgb(bytes);
    EXPECT_EQ(img.at(2, 2), (fc::Rgb{255, 255, 0}));
    EXPECT_EQ(img.at(0, 31), (fc::Rgb{255, 0, 0}));
    EXPECT_EQ(img.at(30, 30), (fc::Rgb{0, 255, 0}));
    EXPECT_EQ(img.at(15, 15), (fc::Rgb{160, 120, 70}));
}

TEST(Tools, ZeroShotAndPointQueryOnSyntheticProposals) {
    fc::SynthSpec spec;
    spec.seed = 11;
    const auto synth = fc::synth_proposals(spec);
    ag::Session s;
    s.proposals = synth.set;
    const auto reg = ag::register_tools();
    const auto r = ag::execute_tool(s, reg, "detect_changes_zeroshot", Json::object());
    ASSERT_TRUE(r.ok) << r.summary;
    std::vector<int> ids;
    for (const auto& c : r.data.at("changes")) ids.push_back(c.at("id").get<int>());
    auto planted = synth.planted_ids;
    std::sort(planted.begin(), planted.end());
    EXPECT_EQ(ids, planted);
    EXPECT_EQ(*s.last_mask, synth.truth);
    const auto none = ag::execute_tool(s, reg, "detect_changes_zeroshot", {{"change_angle_threshold", 180}});
    EXPECT_TRUE(none.data.at("changes").empty());
    const auto oob = ag::execute_tool(s, reg, "point_query_changes", {{"points", {{{"row", 5000}, {"col", 1}}}}});
    EXPECT_EQ(oob.error_kind, "out_of_bounds");
}

TEST(Tools, ArtifactsAreContentAddressed) {
    ag::Session s;
    const std::string abc = "abc";
    const auto name = s.add_artifact({abc.begin(), abc.end()}, "txt", "text/plain");
    EXPECT_EQ(name, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad.txt");
    EXPECT_EQ(s.add_artifact({abc.begin(), abc.end()}, "txt", "text/plain"), name);
    EXPECT_EQ(s.artifacts.size(), 1u);
}

// ---------------------------------------------------------------------------
// Reply protocol
// ---------------------------------------------------------------------------

TEST(Protocol, ParsesToolAndFinalReplies) {
    auto r = ag::parse_backend_reply(R"({"tool": "count_patches", "args": {"connectivity": 4}})");
    ASSERT_TRUE(r && r->tool);
    EXPECT_EQ(*r->tool, "count_patches");
    EXPECT_EQ(r->args.at("connectivity"), 4);
    r = ag::parse_backend_reply("```json\n{\"final\": \"done\"}\n```");
    ASSERT_TRUE(r && r->final);
    EXPECT_EQ(*r->final, "done");
    EXPECT_TRUE(ag::parse_backend_reply(R"({"tool": "x"})")->args.empty());
}

TEST(Protocol, RejectsMalformedReplies) {
    for (const char* bad : {"not json", "[1, 2]", R"({"tool": 3})", R"({"final": "a", "tool": "b"})", R"({"tool": "x", "args": []})",
                            R"({"tool": "x", "why": 1})", R"({"final": "about {{percentage}}%"})", R"({"a": 1} {"b": 2})", ""})
        EXPECT_FALSE(ag::parse_backend_reply(bad).has_value()) << bad;
}

TEST(Protocol, SystemPromptListsEveryTool) {
    const auto reg = ag::register_tools();
    const auto prompt = ag::system_prompt(reg);
    for (const auto& t : reg) EXPECT_NE(prompt.find(t.name), std::string::npos) << t.name;
    EXPECT_NE(prompt.find("{\"final\""), std::string::npos);
}

// ---------------------------------------------------------------------------
// Chat loop
// ---------------------------------------------------------------------------

TEST(Chat, PercentageQuestionCallsToolAndQuotesIt) {
    ag::Session s;
    load_precomputed(s, three_blob_mask());
    s.last_mask = three_blob_mask();
    ag::ScriptedBackend backend;
    const auto turn = ag::handle_chat(s, ag::register_tools(), backend, "what percentage of the area was deforested");
    ASSERT_EQ(turn.tool_calls.size(), 1u);
    EXPECT_EQ(turn.tool_calls[0].at("tool"), "deforestation_percentage");
    EXPECT_NE(turn.reply.find("2.64%"), std::string::npos) << turn.reply;
}

TEST(Chat, SmallTalkNeedsNoTool) {
    ag::Session s;
    ag::ScriptedBackend backend;
    const auto turn = ag::handle_chat(s, ag::register_tools(), backend, "hello");
    EXPECT_TRUE(turn.tool_calls.empty());
    EXPECT_EQ(turn.reply, ag::kSmallTalkReply);
    EXPECT_EQ(s.transcript.size(), 2u);
}

TEST(Chat, ToolErrorsAreRelayedInTheReply) {
    ag::Session s;
    ag::ScriptedBackend backend;
    const auto turn = ag::handle_chat(s, ag::register_tools(), backend, "count the cleared patches");
    ASSERT_EQ(turn.tool_calls.size(), 1u);
    EXPECT_FALSE(turn.tool_calls[0].at("result").at("ok").get<bool>());
    EXPECT_NE(turn.reply.find("no change mask yet"), std::string::npos) << turn.reply;
}

TEST(Chat, TwoMalformedRepliesFailTheTurnAndKeepTheTranscript) {
    ag::Session s;
    CannedBackend backend({"oops", "{still not json"});
    try {
        ag::handle_chat(s, ag::register_tools(), backend, "hello");
        FAIL() << "expected a protocol error";
    } catch (const fc::Error& e) {
        EXPECT_EQ(e.kind(), fc::ErrorKind::protocol);
    }
    ASSERT_EQ(s.transcript.size(), 5u);
    EXPECT_EQ(s.transcript[0].at("content"), "hello");
    EXPECT_EQ(s.transcript[1].at("content"), "oops");
    EXPECT_EQ(s.transcript[2].at("content"), ag::kRepairPrompt);
    EXPECT_EQ(s.transcript[3].at("content"), "{still not json");
    EXPECT_EQ(s.transcript[4].at("role"), "error");
}

TEST(Chat, OneRepairIsAllowed) {
    ag::Session s;
    CannedBackend backend({R"({"final": "it is {{pct}}%"})", R"({"final": "I cannot tell yet."})"});
    const auto turn = ag::handle_chat(s, ag::register_tools(), backend, "how much?");
    EXPECT_EQ(turn.reply, "I cannot tell yet.");
    ASSERT_EQ(backend.seen.size(), 2u);
    EXPECT_EQ(backend.seen[1].back().content, ag::kRepairPrompt);
    EXPECT_EQ(backend.seen[1].front().role, "system");
}

TEST(Chat, RoundLimitIsSix) {
    ag::Session s;
    std::deque<std::string> replies(10, R"({"tool": "deforestation_percentage", "args": {}})");
    CannedBackend backend(replies);
    EXPECT_THROW(ag::handle_chat(s, ag::register_tools(), backend, "loop"), fc::Error);
    EXPECT_EQ(backend.seen.size(), static_cast<std::size_t>(ag::kMaxRounds));
    EXPECT_EQ(s.transcript.back().at("content"), "round limit exceeded");
}

TEST(Chat, BackendFailureIsSurfaced) {
    ag::Session s;
    CannedBackend backend({});
    try {
        ag::handle_chat(s, ag::register_tools(), backend, "hello");
        FAIL();
    } catch (const fc::Error& e) {
        EXPECT_EQ(e.kind(), fc::ErrorKind::backend);
    }
    EXPECT_EQ(s.transcript.size(), 2u);
    EXPECT_EQ(s.transcript[1].at("role"), "error");
    EXPECT_THROW(ag::handle_chat(s, ag::register_tools(), backend, ""), fc::Error);
}

TEST(Chat, UnknownToolFromBackendIsFedBack) {
    ag::Session s;
    CannedBackend backend({R"({"tool": "web_search", "args": {}})", R"({"final": "That tool does not exist."})"});
    const auto turn = ag::handle_chat(s, ag::register_tools(), backend, "search the web");
    EXPECT_EQ(turn.tool_calls[0].at("result").at("error"), "unknown_tool");
    EXPECT_EQ(backend.seen[1].back().role, "tool");
}

TEST(ScriptedBackend, IntentPlans) {
    const auto tools = [](const std::string& m) {
        std::vector<std::string> out;
        for (const auto& c : ag::ScriptedBackend::plan(m)) out.push_back(c.at("tool"));
        return out;
    };
    using V = std::vector<std::string>;
    EXPECT_EQ(tools("hello"), V{});
    EXPECT_EQ(tools("Detect changes please"), V{"detect_changes_supervised"});
    EXPECT_EQ(tools("run zero-shot detection"), V{"detect_changes_zeroshot"});
    EXPECT_EQ(tools("what changed near (12, 40) and (3,4)?"), V{"point_query_changes"});
    EXPECT_EQ(tools("detect the changes, describe them and count the patches"),
              (V{"detect_changes_supervised", "caption_changes", "count_patches"}));
    EXPECT_EQ(tools("how accurate is it compared to the ground truth"), V{"compare_with_ground_truth"});
    const auto pq = ag::ScriptedBackend::plan("objects at (12, 40) after");
    EXPECT_EQ(pq[0].at("args").at("points")[0], (Json{{"row", 12}, {"col", 40}, {"time", "t2"}}));
    EXPECT_EQ(ag::ScriptedBackend::plan("detect with the model mask")[0].at("args").at("source"), "precomputed");
}

// ---------------------------------------------------------------------------
// Scripted end-to-end conversation
// ---------------------------------------------------------------------------

TEST(Conversation, FixtureRunsEveryStep) {
    const auto rec = fc::testing::run_fixture_conversation();
    ASSERT_EQ(rec.turns.size(), 5u);
    const std::vector<std::string> expected = {"detect_changes_supervised", "caption_changes", "deforestation_percentage", "count_patches",
                                               "compare_with_ground_truth"};
    for (std::size_t i = 0; i < expected.size(); ++i) {
        ASSERT_EQ(rec.turns[i].tool_calls.size(), 1u) << i;
        EXPECT_EQ(rec.turns[i].tool_calls[0].at("tool"), expected[i]);
        EXPECT_TRUE(rec.turns[i].tool_calls[0].at("result").at("ok").get<bool>()) << rec.turns[i].reply;
    }
    EXPECT_EQ(rec.turns[1].tool_calls[0].at("result").at("data").at("captions").size(), 5u);
    EXPECT_EQ(rec.turns[3].tool_calls[0].at("result").at("data").at("count"), 1);
    EXPECT_GE(rec.turns[4].tool_calls[0].at("result").at("data").at("miou").get<double>(), 0.9);
    // mask, captions, overlay
    EXPECT_EQ(rec.artifacts.size(), 3u);
}

TEST(Conversation, NumbersInFinalsComeFromToolResults) {
    const auto rec = fc::testing::run_fixture_conversation();
    static const std::regex number(R"(\d+(\.\d+)?)");
    for (const auto& turn : rec.turns) {
        std::string sources;
        for (const auto& c : turn.tool_calls) sources += c.at("result").at("summary").get<std::string>();
        for (auto it = std::sregex_iterator(turn.reply.begin(), turn.reply.end(), number); it != std::sregex_iterator(); ++it)
            EXPECT_NE(sources.find(it->str()), std::string::npos) << it->str();
    }
}

TEST(Conversation, RepeatedRunsAreByteIdentical) {
    const auto a = fc::testing::run_fixture_conversation();
    const auto b = fc::testing::run_fixture_conversation();
    EXPECT_EQ(a.transcript, b.transcript);
    EXPECT_EQ(a.artifacts, b.artifacts);
    const auto other = fc::testing::run_fixture_conversation(4);
    EXPECT_NE(a.transcript, other.transcript);
}

TEST(Conversation, SessionsDoNotShareState) {
    ag::Session a, b;
    fc::testing::load_fixture_pair(a, 3);
    fc::testing::load_fixture_pair(b, 5);
    const auto reg = ag::register_tools();
    ag::ScriptedBackend backend;
    const auto ta = ag::handle_chat(a, reg, backend, "detect changes");
    EXPECT_THROW(b.require_mask(), fc::Error);
    const auto tb = ag::handle_chat(b, reg, backend, "detect changes");
    EXPECT_NE(ta.artifacts, tb.artifacts);
    EXPECT_EQ(a.artifacts.count(tb.artifacts[0]), 0u);
    EXPECT_EQ(b.artifacts.count(ta.artifacts[0]), 0u);
    EXPECT_EQ(a.transcript.size(), 4u);
}
