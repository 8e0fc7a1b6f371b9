// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <thread>

#include "agent_fixture.hpp"
#include "dataset_fixture.hpp"
#include "forestchat/agent/service.hpp"
#include "forestchat/proposal_io.hpp"

namespace fc = forestchat;
namespace ag = forestchat::agent;
using ag::Json;

namespace {

/// Service on an ephemeral localhost port, stopped on destruction.
class LiveService {
public:
    explicit LiveService(std::unique_ptr<ag::ChatBackend> backend = std::make_unique<ag::ScriptedBackend>(), ag::ServiceConfig cfg = {})
        : service_(std::move(cfg), std::move(backend)) {
        port_ = service_.bind("127.0.0.1", 0);
        thread_ = std::thread([this] { service_.run(); });
        service_.wait_until_ready();
    }
    ~LiveService() {
        service_.stop();
        thread_.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port_);
        c.set_read_timeout(std::chrono::seconds(30));
        return c;
    }
    int port() const { return port_; }

private:
    ag::Service service_;
    int port_ = 0;
    std::thread thread_;
};

std::string png_string(const std::vector<std::uint8_t>& bytes) { return {bytes.begin(), bytes.end()}; }

std::string create_session(httplib::Client& c) {
    const auto res = c.Post("/api/session");
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, 201);
    return Json::parse(res->body).at("session_id").get<std::string>();
}

httplib::Result upload_fixture(httplib::Client& c, const std::string& id, std::uint64_t seed, bool with_gt = true) {
    const auto fx = fc::testing::square_fixture(seed);
    httplib::MultipartFormDataItems items = {
        {"image_a", png_string(fc::png::encode_rgb(fx.pair.image_a())), "a.png", "image/png"},
        {"image_b", png_string(fc::png::encode_rgb(fx.pair.image_b())), "b.png", "image/png"},
        {"caption", fc::testing::kFixtureHumanCaption, "", "text/plain"},
    };
    if (with_gt) items.push_back({"ground_truth", png_string(fc::png::encode_mask(fx.truth)), "gt.png", "image/png"});
    return c.Post("/api/session/" + id + "/pair", items);
}

Json chat(httplib::Client& c, const std::string& id, const std::string& message, int expected_status = 200) {
    const auto res = c.Post("/api/session/" + id + "/chat", Json{{"message", message}}.dump(), "application/json");
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, expected_status) << res->body;
    return Json::parse(res->body);
}

class AlwaysMalformed : public ag::ChatBackend {
public:
    std::string name() const override { return "malformed"; }
    std::string complete(const std::vector<ag::ChatMessage>&) override { return "I think the answer is 42"; }
};

} // namespace

TEST(Service, HealthzReportsBuildInfo) {
    LiveService svc;
    auto c = svc.client();
    const auto res = c.Get("/healthz");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    const auto j = Json::parse(res->body);
    EXPECT_EQ(j.at("status"), "ok");
    EXPECT_EQ(j.at("backend"), "scripted");
    EXPECT_EQ(j.at("tools"), 7);
    EXPECT_FALSE(j.at("version").get<std::string>().empty());
}

TEST(Service, ToolsEndpointListsDefaults) {
    LiveService svc;
    auto c = svc.client();
    const auto j = Json::parse(c.Get("/api/tools")->body);
    EXPECT_EQ(j.at("tools").size(), 7u);
    EXPECT_EQ(j.at("defaults").at("change_angle_threshold"), 145.0);
    EXPECT_EQ(j.at("defaults").at("stability_threshold"), 0.93);
    EXPECT_EQ(j.at("defaults").at("area_threshold"), 0.9);
    EXPECT_EQ(j.at("defaults").at("object_similarity_threshold"), 60.0);
}

TEST(Service, ScriptedSessionProducesRetrievableMask) {
    LiveService svc;
    auto c = svc.client();
    const auto id = create_session(c);
    const auto up = upload_fixture(c, id, 3);
    ASSERT_TRUE(up);
    ASSERT_EQ(up->status, 200) << up->body;
    EXPECT_EQ(Json::parse(up->body).at("width"), 128);
    const auto turn = chat(c, id, "detect changes");
    ASSERT_EQ(turn.at("artifacts").size(), 1u);
    const auto name = turn.at("artifacts")[0].get<std::string>();
    const auto art = c.Get("/api/session/" + id + "/artifact/" + name);
    ASSERT_TRUE(art);
    ASSERT_EQ(art->status, 200);
    EXPECT_EQ(art->get_header_value("Content-Type"), "image/png");
    const auto mask = fc::png::decode_mask(std::vector<std::uint8_t>(art->body.begin(), art->body.end()));
    EXPECT_GE(fc::testing::change_iou(mask, fc::testing::square_fixture(3).truth), 0.8);
    EXPECT_EQ(ag::sha256_hex({art->body.begin(), art->body.end()}) + ".png", name);

    for (const auto& m : fc::testing::fixture_conversation()) {
        const auto t = chat(c, id, m);
        EXPECT_FALSE(t.at("reply").get<std::string>().empty());
    }
    const auto tr = Json::parse(c.Get("/api/session/" + id + "/transcript")->body).at("transcript");
    EXPECT_EQ(tr.front().at("content"), "detect changes");
}

TEST(Service, HttpConversationMatchesInProcessRun) {
    LiveService svc;
    auto c = svc.client();
    const auto id = create_session(c);
    ASSERT_EQ(upload_fixture(c, id, 3)->status, 200);
    for (const auto& m : fc::testing::fixture_conversation()) chat(c, id, m);
    const auto rec = fc::testing::run_fixture_conversation(3);
    const auto tr = Json::parse(c.Get("/api/session/" + id + "/transcript")->body).at("transcript");
    EXPECT_EQ(tr.dump(), rec.transcript);
    for (const auto& [name, bytes] : rec.artifacts) {
        const auto art = c.Get("/api/session/" + id + "/artifact/" + name);
        ASSERT_EQ(art->status, 200);
        EXPECT_EQ(art->body, std::string(bytes.begin(), bytes.end()));
    }
}

TEST(Service, PointQueryOutOfBoundsIs422) {
    LiveService svc;
    auto c = svc.client();
    const auto id = create_session(c);
    fc::SynthSpec spec;
    spec.seed = 2;
    const auto synth = fc::synth_proposals(spec);
    const auto up = c.Post("/api/session/" + id + "/proposals", fc::to_json(synth.set).dump(), "application/json");
    ASSERT_EQ(up->status, 200) << up->body;
    EXPECT_EQ(Json::parse(up->body).at("proposals"), synth.set.proposals.size());

    const Json bad{{"points", {{{"row", 9999}, {"col", 3}, {"time", "t1"}}}}};
    const auto res = c.Post("/api/session/" + id + "/point-query", bad.dump(), "application/json");
    ASSERT_EQ(res->status, 422);
    const auto err = Json::parse(res->body).at("error");
    EXPECT_EQ(err.at("kind"), "out_of_bounds");
    try {
        std::vector<fc::QueryPoint> pts{{9999, 3, fc::Epoch::t1}};
        fc::point_query(pts, synth.set.at(fc::Epoch::t1), synth.set.at(fc::Epoch::t2), synth.set.width, synth.set.height, {});
        FAIL();
    } catch (const fc::Error& e) {
        EXPECT_EQ(err.at("message"), e.what());
    }
}

TEST(Service, PointQueryReturnsClusterAndMask) {
    LiveService svc;
    auto c = svc.client();
    const auto id = create_session(c);
    fc::SynthSpec spec;
    spec.seed = 4;
    const auto synth = fc::synth_proposals(spec);
    ASSERT_EQ(c.Post("/api/session/" + id + "/proposals", fc::to_json(synth.set).dump(), "application/json")->status, 200);
    const auto& seed = synth.set.proposals[static_cast<std::size_t>(synth.planted_ids[0])];
    const auto px = fc::decode_footprint(seed.footprint, synth.set.width, synth.set.height);
    int row = -1, col = -1;
    for (int r = 0; r < px.height() && row < 0; ++r)
        for (int cc = 0; cc < px.width(); ++cc)
            if (px.at(r, cc)) {
                row = r;
                col = cc;
                break;
            }
    const Json body{{"points", {{{"row", row}, {"col", col}, {"time", std::string(fc::to_string(seed.time))}}}},
                    {"params", {{"object_similarity_threshold", 60}}}};
    const auto res = c.Post("/api/session/" + id + "/point-query", body.dump(), "application/json");
    ASSERT_EQ(res->status, 200) << res->body;
    const auto j = Json::parse(res->body);
    EXPECT_NE(std::find(j.at("seed_ids").begin(), j.at("seed_ids").end(), seed.id), j.at("seed_ids").end());
    for (const auto& cid : j.at("category_ids"))
        EXPECT_EQ(synth.cluster_of.at(static_cast<std::size_t>(cid.get<int>())), synth.cluster_of.at(static_cast<std::size_t>(seed.id)));
    EXPECT_EQ(c.Get("/api/session/" + id + "/artifact/" + j.at("mask").get<std::string>())->status, 200);
    const auto bad = c.Post("/api/session/" + id + "/point-query", Json{{"points", Json::array({{{"row", 1}, {"col", 1}}})}, {"params", {{"stability_threshold", 2}}}}.dump(),
                            "application/json");
    EXPECT_EQ(bad->status, 400);
}

TEST(Service, ProposalPairSizeMismatchIs422) {
    LiveService svc;
    auto c = svc.client();
    const auto id = create_session(c);
    ASSERT_EQ(upload_fixture(c, id, 1)->status, 200);
    fc::SynthSpec spec;
    const auto synth = fc::synth_proposals(spec);
    const auto res = c.Post("/api/session/" + id + "/proposals", fc::to_json(synth.set).dump(), "application/json");
    EXPECT_EQ(res->status, 422);
    EXPECT_EQ(c.Post("/api/session/" + id + "/proposals", "{broken", "application/json")->status, 400);
}

TEST(Service, ErrorMapping) {
    LiveService svc;
    auto c = svc.client();
    EXPECT_EQ(c.Post("/api/session/deadbeef/chat", R"({"message":"hi"})", "application/json")->status, 404);
    EXPECT_EQ(c.Get("/api/session/deadbeef/artifact/x.png")->status, 404);
    const auto id = create_session(c);
    EXPECT_EQ(c.Get("/api/session/" + id + "/artifact/nothing.png")->status, 404);
    EXPECT_EQ(c.Post("/api/session/" + id + "/chat", "not json", "application/json")->status, 400);
    EXPECT_EQ(c.Post("/api/session/" + id + "/chat", R"({"text":"hi"})", "application/json")->status, 400);
    EXPECT_EQ(c.Post("/api/session/" + id + "/pair", "{}", "application/json")->status, 400);
    httplib::MultipartFormDataItems bad_png = {{"image_a", "xx", "a.png", "image/png"}, {"image_b", "yy", "b.png", "image/png"}};
    EXPECT_EQ(c.Post("/api/session/" + id + "/pair", bad_png)->status, 400);
    const auto fx = fc::testing::square_fixture(1);
    httplib::MultipartFormDataItems mismatched = {
        {"image_a", png_string(fc::png::encode_rgb(fx.pair.image_a())), "a.png", "image/png"},
        {"image_b", png_string(fc::png::encode_rgb(fc::RgbImage(64, 64))), "b.png", "image/png"},
    };
    EXPECT_EQ(c.Post("/api/session/" + id + "/pair", mismatched)->status, 422);
}

TEST(Service, MalformedBackendSurfacesTranscript) {
    LiveService svc(std::make_unique<AlwaysMalformed>());
    auto c = svc.client();
    const auto id = create_session(c);
    const auto j = chat(c, id, "hello", 502);
    EXPECT_EQ(j.at("error").at("kind"), "protocol");
    ASSERT_EQ(j.at("transcript").size(), 5u);
    EXPECT_EQ(j.at("transcript")[0].at("content"), "hello");
    const auto tr = Json::parse(c.Get("/api/session/" + id + "/transcript")->body).at("transcript");
    EXPECT_EQ(tr, j.at("transcript"));
}

TEST(Service, ConcurrentSessionsAreIsolated) {
    LiveService svc;
    constexpr int kSessions = 4;
    std::vector<std::string> ids(kSessions);
    std::vector<std::vector<std::string>> artifacts(kSessions);
    {
        auto c = svc.client();
        for (auto& id : ids) id = create_session(c);
    }
    std::atomic<int> failures{0};
    std::vector<std::thread> threads;
    for (int i = 0; i < kSessions; ++i)
        threads.emplace_back([&, i] {
            auto c = svc.client();
            if (upload_fixture(c, ids[static_cast<std::size_t>(i)], static_cast<std::uint64_t>(10 + i))->status != 200) ++failures;
            for (const auto& m : fc::testing::fixture_conversation()) {
                const auto res = c.Post("/api/session/" + ids[static_cast<std::size_t>(i)] + "/chat", Json{{"message", m}}.dump(), "application/json");
                if (!res || res->status != 200) {
                    ++failures;
                    continue;
                }
                const auto body = Json::parse(res->body);
                for (const auto& a : body.at("artifacts"))
                    artifacts[static_cast<std::size_t>(i)].push_back(a.get<std::string>());
            }
        });
    for (auto& t : threads) t.join();
    EXPECT_EQ(failures.load(), 0);
    auto c = svc.client();
    for (int i = 0; i < kSessions; ++i) {
        const auto& own = artifacts[static_cast<std::size_t>(i)];
        EXPECT_EQ(own.size(), 3u);
        for (int j = 0; j < kSessions; ++j)
            for (const auto& name : artifacts[static_cast<std::size_t>(j)]) {
                // Identical content hashes to the same name in both sessions.
                if (i != j && std::find(own.begin(), own.end(), name) != own.end()) continue;
                const auto res = c.Get("/api/session/" + ids[static_cast<std::size_t>(i)] + "/artifact/" + name);
                EXPECT_EQ(res->status, i == j ? 200 : 404) << i << " " << j;
            }
        const auto expected = fc::testing::run_fixture_conversation(static_cast<std::uint64_t>(10 + i));
        const auto tr = Json::parse(c.Get("/api/session/" + ids[static_cast<std::size_t>(i)] + "/transcript")->body).at("transcript");
        EXPECT_EQ(tr.dump(), expected.transcript) << i;
    }
}

TEST(Service, ServesStaticFilesAndPersistsArtifacts) {
    fc::testing::TempDir dir("service_static");
    std::filesystem::create_directories(dir.path() / "www");
    std::ofstream(dir.path() / "www" / "index.html") << "<html>workbench</html>";
    ag::ServiceConfig cfg;
    cfg.static_dir = dir.path() / "www";
    cfg.data_dir = dir.path() / "data";
    LiveService svc(std::make_unique<ag::ScriptedBackend>(), cfg);
    auto c = svc.client();
    const auto page = c.Get("/index.html");
    ASSERT_TRUE(page);
    EXPECT_EQ(page->status, 200);
    EXPECT_EQ(page->body, "<html>workbench</html>");
    EXPECT_EQ(c.Get("/")->body, "<html>workbench</html>");
    const auto id = create_session(c);
    ASSERT_EQ(upload_fixture(c, id, 2)->status, 200);
    const auto turn = chat(c, id, "detect changes");
    const auto name = turn.at("artifacts")[0].get<std::string>();
    const auto file = dir.path() / "data" / "sessions" / id / name;
    ASSERT_TRUE(std::filesystem::exists(file));
    EXPECT_EQ(std::filesystem::file_size(file), c.Get("/api/session/" + id + "/artifact/" + name)->body.size());
}

// ---------------------------------------------------------------------------
// Remote backend against a local mock endpoint
// ---------------------------------------------------------------------------

TEST(RemoteBackend, SpeaksChatCompletions) {
    httplib::Server mock;
    Json last_request;
    std::string auth;
    std::mutex m;
    mock.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        std::lock_guard lock(m);
        last_request = Json::parse(req.body);
        auth = req.get_header_value("Authorization");
        Json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", R"({"final": "hi from remote"})"}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    const int port = mock.bind_to_any_port("127.0.0.1");
    std::thread t([&] { mock.listen_after_bind(); });
    mock.wait_until_ready();

    ag::RemoteBackend backend({"http://127.0.0.1:" + std::to_string(port) + "/v1/", "secret", "test-model", std::chrono::seconds(5)});
    ag::Session s;
    const auto turn = ag::handle_chat(s, ag::register_tools(), backend, "hello");
    EXPECT_EQ(turn.reply, "hi from remote");
    {
        std::lock_guard lock(m);
        EXPECT_EQ(auth, "Bearer secret");
        EXPECT_EQ(last_request.at("model"), "test-model");
        EXPECT_EQ(last_request.at("messages")[0].at("role"), "system");
        EXPECT_EQ(last_request.at("messages")[1], (Json{{"role", "user"}, {"content", "hello"}}));
    }
    mock.stop();
    t.join();
}

TEST(RemoteBackend, UnreachableEndpointIsBackendError) {
    int port = 0;
    {
        httplib::Server probe;
        port = probe.bind_to_any_port("127.0.0.1");
    }
    ag::RemoteBackend backend({"http://127.0.0.1:" + std::to_string(port), "", "m", std::chrono::seconds(2)});
    try {
        backend.complete({{"user", "hi"}});
        FAIL();
    } catch (const fc::Error& e) {
        EXPECT_EQ(e.kind(), fc::ErrorKind::backend);
    }
    EXPECT_THROW(ag::RemoteBackend({"ftp://x", "", "m"}), fc::Error);
}

TEST(RemoteBackend, EnvironmentSelectsBackend) {
    ::unsetenv("WORKBENCH_BACKEND");
    EXPECT_EQ(ag::backend_from_env()->name(), "scripted");
    ::setenv("WORKBENCH_BACKEND", "remote", 1);
    ::unsetenv("CHAT_API_BASE");
    EXPECT_THROW(ag::backend_from_env(), fc::Error);
    ::setenv("CHAT_API_BASE", "http://127.0.0.1:9/v1", 1);
    ::setenv("CHAT_MODEL", "m", 1);
    EXPECT_EQ(ag::backend_from_env()->name(), "remote");
    ::setenv("WORKBENCH_BACKEND", "bogus", 1);
    EXPECT_THROW(ag::backend_from_env(), fc::Error);
    ::unsetenv("WORKBENCH_BACKEND");
    ::unsetenv("CHAT_API_BASE");
    ::unsetenv("CHAT_MODEL");
}
