// SPDX-License-Identifier: Apache-2.0
#pragma once

// HTTP front end for the agent: JSON API, artifact downloads and static files
// for the browser workbench.

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "forestchat/agent/backend.hpp"
#include "forestchat/agent/chat.hpp"
#include "forestchat/agent/session.hpp"
#include "forestchat/agent/tools.hpp"
#include "forestchat/png_io.hpp"
#include "forestchat/proposal_io.hpp"

namespace forestchat::agent {

inline constexpr const char* kServiceName = "forestchat";
inline constexpr const char* kServiceVersion = "0.1.0";

inline int http_status(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::invalid_argument:
    case ErrorKind::parse: return 400;
    case ErrorKind::not_found: return 404;
    case ErrorKind::precondition: return 409;
    case ErrorKind::dimension_mismatch:
    case ErrorKind::out_of_bounds:
    case ErrorKind::numeric: return 422;
    case ErrorKind::protocol:
    case ErrorKind::backend: return 502;
    case ErrorKind::io: return 500;
    }
    return 500;
}

inline Json error_body(ErrorKind kind, const std::string& message) {
    return {{"error", {{"kind", std::string(to_string(kind))}, {"message", message}}}};
}

struct ServiceConfig {
    std::optional<std::filesystem::path> data_dir;
    std::optional<std::filesystem::path> static_dir;
    std::size_t max_upload_bytes = 64u << 20;
    std::size_t max_sessions = 1024;
};

class Service {
public:
    Service(ServiceConfig config, std::unique_ptr<ChatBackend> backend)
        : config_(std::move(config)), store_(config_.data_dir, config_.max_sessions), registry_(register_tools()), backend_(std::move(backend)) {
        require(backend_ != nullptr, ErrorKind::invalid_argument, "service needs a chat backend");
        routes();
    }

    /// Binds to `host:port` (port 0 picks a free port) and returns the port.
    int bind(const std::string& host, int port) {
        const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        require(bound > 0, ErrorKind::io, "cannot bind " + host + ":" + std::to_string(port));
        return bound;
    }

    /// Blocks until stop().
    void run() { server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() { server_.wait_until_ready(); }

    SessionStore& sessions() { return store_; }
    const Registry& registry() const { return registry_; }

private:
    using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

    static void send_json(httplib::Response& res, const Json& body, int status = 200) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    /// Maps library errors onto HTTP statuses.
    static Handler guarded(Handler h) {
        return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
            try {
                h(req, res);
            } catch (const Error& e) {
                send_json(res, error_body(e.kind(), e.what()), http_status(e.kind()));
            } catch (const Json::exception& e) {
                send_json(res, error_body(ErrorKind::parse, e.what()), 400);
            }
        };
    }

    static Json parse_body(const httplib::Request& req) {
        try {
            return Json::parse(req.body);
        } catch (const Json::exception& e) {
            fail(ErrorKind::parse, std::string("request body is not valid JSON: ") + e.what());
        }
    }

    std::shared_ptr<Session> session_of(const httplib::Request& req) { return store_.get(req.path_params.at("id")); }

    void upload_pair(const httplib::Request& req, httplib::Response& res) {
        require(req.is_multipart_form_data(), ErrorKind::invalid_argument, "pair upload must be multipart/form-data");
        for (const char* field : {"image_a", "image_b"})
            require(req.has_file(field), ErrorKind::invalid_argument, std::string("missing form field ") + field);
        const auto bytes = [&](const char* field) {
            const auto& content = req.get_file_value(field).content;
            return std::vector<std::uint8_t>(content.begin(), content.end());
        };
        auto a = png::decode_rgb(bytes("image_a"));
        auto b = png::decode_rgb(bytes("image_b"));
        std::optional<ChangeMask> gt, pred;
        if (req.has_file("ground_truth")) gt = png::decode_mask(bytes("ground_truth"));
        if (req.has_file("prediction")) pred = png::decode_mask(bytes("prediction"));
        BitemporalPair pair(std::move(a), std::move(b), std::move(gt));
        if (pred)
            require(pred->width() == pair.width() && pred->height() == pair.height(), ErrorKind::dimension_mismatch,
                    "precomputed mask dimensions do not match the image pair");
        auto s = session_of(req);
        std::lock_guard lock(s->mutex);
        if (s->proposals)
            require(s->proposals->width == pair.width() && s->proposals->height == pair.height(), ErrorKind::dimension_mismatch,
                    "image pair dimensions do not match the loaded proposals");
        s->reset_pair();
        const Json info{{"width", pair.width()}, {"height", pair.height()}, {"ground_truth", pair.ground_truth().has_value()},
                        {"prediction", pred.has_value()}, {"caption", req.has_file("caption")}};
        s->pair = std::move(pair);
        s->precomputed_mask = std::move(pred);
        if (req.has_file("caption")) s->human_caption = req.get_file_value("caption").content;
        send_json(res, info);
    }

    void upload_proposals(const httplib::Request& req, httplib::Response& res) {
        auto set = proposal_set_from_json(parse_body(req));
        auto s = session_of(req);
        std::lock_guard lock(s->mutex);
        if (s->pair)
            require(set.width == s->pair->width() && set.height == s->pair->height(), ErrorKind::dimension_mismatch,
                    "proposal dimensions do not match the loaded image pair");
        const Json info{{"proposals", set.proposals.size()}, {"t1", set.at(Epoch::t1).size()}, {"t2", set.at(Epoch::t2).size()},
                        {"width", set.width}, {"height", set.height}};
        s->proposals = std::move(set);
        send_json(res, info);
    }

    void chat(const httplib::Request& req, httplib::Response& res) {
        const auto body = parse_body(req);
        require(body.is_object() && body.contains("message") && body.at("message").is_string(), ErrorKind::invalid_argument,
                "chat body must be {\"message\": <text>}");
        auto s = session_of(req);
        std::lock_guard lock(s->mutex);
        try {
            send_json(res, handle_chat(*s, registry_, *backend_, body.at("message").get<std::string>()).to_json());
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::protocol && e.kind() != ErrorKind::backend) throw;
            auto err = error_body(e.kind(), e.what());
            err["transcript"] = s->transcript;
            send_json(res, err, http_status(e.kind()));
        }
    }

    void point_query(const httplib::Request& req, httplib::Response& res) {
        const auto body = parse_body(req);
        require(body.is_object() && body.contains("points") && body.at("points").is_array(), ErrorKind::invalid_argument,
                "point-query body must contain a points array");
        auto s = session_of(req);
        std::lock_guard lock(s->mutex);
        const auto params = match_params_from_json(body.value("params", Json::object()), s->params);
        std::vector<QueryPoint> points;
        for (const auto& p : body.at("points")) {
            QueryPoint q;
            q.row = p.at("row").get<int>();
            q.col = p.at("col").get<int>();
            const auto t = p.value("time", std::string("t1"));
            require(t == "t1" || t == "t2", ErrorKind::invalid_argument, "point time must be t1 or t2");
            q.time = t == "t1" ? Epoch::t1 : Epoch::t2;
            points.push_back(q);
        }
        const auto result = run_point_query(*s, points, params);
        auto out = result.data;
        out["summary"] = result.summary;
        out["params"] = to_json(params);
        send_json(res, out);
    }

    void routes() {
        server_.set_payload_max_length(config_.max_upload_bytes);
        server_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
            send_json(res, {{"status", "ok"}, {"name", kServiceName}, {"version", kServiceVersion}, {"backend", backend_->name()},
                            {"tools", registry_.size()}});
        });
        server_.Post("/api/session", guarded([this](const httplib::Request&, httplib::Response& res) {
                         send_json(res, {{"session_id", store_.create()->id}}, 201);
                     }));
        server_.Post("/api/session/:id/pair", guarded([this](const httplib::Request& req, httplib::Response& res) { upload_pair(req, res); }));
        server_.Post("/api/session/:id/proposals",
                     guarded([this](const httplib::Request& req, httplib::Response& res) { upload_proposals(req, res); }));
        server_.Post("/api/session/:id/chat", guarded([this](const httplib::Request& req, httplib::Response& res) { chat(req, res); }));
        server_.Post("/api/session/:id/point-query",
                     guarded([this](const httplib::Request& req, httplib::Response& res) { point_query(req, res); }));
        server_.Get("/api/session/:id/transcript", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        auto s = session_of(req);
                        std::lock_guard lock(s->mutex);
                        send_json(res, {{"transcript", s->transcript}});
                    }));
        server_.Get("/api/session/:id/artifact/:name", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        auto s = session_of(req);
                        std::lock_guard lock(s->mutex);
                        const auto it = s->artifacts.find(req.path_params.at("name"));
                        require(it != s->artifacts.end(), ErrorKind::not_found, "unknown artifact \"" + req.path_params.at("name") + "\"");
                        const auto& bytes = it->second.bytes;
                        res.set_content(std::string(bytes.begin(), bytes.end()), it->second.media_type);
                    }));
        server_.Get("/api/tools", [this](const httplib::Request&, httplib::Response& res) {
            Json tools = Json::array();
            for (const auto& t : registry_)
                tools.push_back({{"name", t.name}, {"description", t.description}, {"parameters", t.parameters}, {"example", t.example_args}});
            send_json(res, {{"tools", tools}, {"defaults", to_json(MatchParams{})}});
        });
        if (config_.static_dir) {
            require(server_.set_mount_point("/", config_.static_dir->string()), ErrorKind::not_found,
                    "static directory " + config_.static_dir->string() + " does not exist");
        }
    }

    ServiceConfig config_;
    SessionStore store_;
    Registry registry_;
    std::unique_ptr<ChatBackend> backend_;
    httplib::Server server_;
};

} // namespace forestchat::agent
