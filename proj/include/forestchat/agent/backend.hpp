// SPDX-License-Identifier: Apache-2.0
#pragma once

// Language-model backends. Each reply must be one JSON object, either
// {"tool": name, "args": {...}} or {"final": text}.
//
// ScriptedBackend maps message intents to a fixed tool plan with regular
// expressions and needs no network. RemoteBackend talks to an
// OpenAI-compatible chat-completions endpoint.

#include <chrono>
#include <cstdlib>
#include <memory>
#include <regex>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "forestchat/error.hpp"

namespace forestchat::agent {

using Json = nlohmann::json;

/// Roles: system, user, assistant, tool. Tool messages carry the JSON result.
struct ChatMessage {
    std::string role;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

inline constexpr const char* kRepairPrompt =
    "Your previous reply was not valid. Reply with exactly one JSON object: either {\"tool\": <name>, \"args\": {...}} "
    "or {\"final\": <text>}, with no placeholders such as {{value}}.";

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string name() const = 0;
    /// Must be safe to call from several threads at once.
    virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
};

// ---------------------------------------------------------------------------
// Scripted
// ---------------------------------------------------------------------------

inline constexpr const char* kSmallTalkReply =
    "Hello. I can detect forest change in the loaded image pair, describe it in captions, report the deforested percentage, "
    "count cleared patches and compare the result with a ground-truth mask. Ask me about any of these.";

class ScriptedBackend : public ChatBackend {
public:
    std::string name() const override { return "scripted"; }

    /// Tool calls planned for a user message, in execution order.
    static std::vector<Json> plan(const std::string& message) {
        std::string m = message;
        for (auto& ch : m) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        const auto has = [&](const char* pattern) { return std::regex_search(m, std::regex(pattern)); };
        std::vector<Json> calls;

        std::vector<Json> points;
        static const std::regex point_re(R"(\(\s*(\d+)\s*,\s*(\d+)\s*\))");
        const std::string time = has(R"(\bt2\b|after|later)") ? "t2" : "t1";
        for (auto it = std::sregex_iterator(m.begin(), m.end(), point_re); it != std::sregex_iterator(); ++it)
            points.push_back({{"row", std::stoi((*it)[1].str())}, {"col", std::stoi((*it)[2].str())}, {"time", time}});

        if (!points.empty())
            calls.push_back({{"tool", "point_query_changes"}, {"args", {{"points", points}}}});
        else if (has(R"(zero.?shot|unsupervised|without training|proposal)"))
            calls.push_back({{"tool", "detect_changes_zeroshot"}, {"args", Json::object()}});
        else if (has(R"(\bdetect|\bsegment|change mask|find (the )?change|locate (the )?change)"))
            calls.push_back({{"tool", "detect_changes_supervised"},
                             {"args", {{"source", has(R"(precomputed|model)") ? "precomputed" : "difference"}}}});
        if (has(R"(caption|describe|description|summari[sz]e)")) calls.push_back({{"tool", "caption_changes"}, {"args", Json::object()}});
        if (has(R"(percent|proportion|fraction|how much)")) calls.push_back({{"tool", "deforestation_percentage"}, {"args", Json::object()}});
        if (has(R"(\bcount|how many|number of)")) calls.push_back({{"tool", "count_patches"}, {"args", Json::object()}});
        if (has(R"(compar|ground.?truth|accuracy|\bm?iou\b|evaluat)"))
            calls.push_back({{"tool", "compare_with_ground_truth"}, {"args", Json::object()}});
        return calls;
    }

    std::string complete(const std::vector<ChatMessage>& messages) override {
        std::size_t user = messages.size();
        for (std::size_t i = messages.size(); i-- > 0;)
            if (messages[i].role == "user" && messages[i].content != kRepairPrompt) {
                user = i;
                break;
            }
        require(user < messages.size(), ErrorKind::protocol, "no user message to answer");
        std::vector<Json> results;
        for (std::size_t i = user + 1; i < messages.size(); ++i)
            if (messages[i].role == "tool") results.push_back(Json::parse(messages[i].content));

        const auto calls = plan(messages[user].content);
        if (results.size() < calls.size()) return calls[results.size()].dump();
        if (calls.empty()) return Json{{"final", kSmallTalkReply}}.dump();
        std::string text;
        for (const auto& r : results) {
            if (!text.empty()) text += " ";
            text += r.at("result").at("summary").get<std::string>();
        }
        return Json{{"final", text}}.dump();
    }
};

// ---------------------------------------------------------------------------
// Remote
// ---------------------------------------------------------------------------

struct RemoteConfig {
    /// For example "https://api.example.com/v1"; "/chat/completions" is appended.
    std::string base_url;
    std::string api_key;
    std::string model;
    std::chrono::seconds timeout{60};
};

class RemoteBackend : public ChatBackend {
public:
    explicit RemoteBackend(RemoteConfig config) : config_(std::move(config)) {
        static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
        std::smatch m;
        require(std::regex_match(config_.base_url, m, url_re), ErrorKind::invalid_argument,
                "chat API base URL must look like http(s)://host[:port][/path], got \"" + config_.base_url + "\"");
        origin_ = m[1].str();
        path_ = m[2].matched ? m[2].str() : std::string();
        while (!path_.empty() && path_.back() == '/') path_.pop_back();
        path_ += "/chat/completions";
        require(!config_.model.empty(), ErrorKind::invalid_argument, "chat model name is empty");
    }

    std::string name() const override { return "remote"; }

    std::string complete(const std::vector<ChatMessage>& messages) override {
        Json body{{"model", config_.model}, {"temperature", 0}, {"messages", Json::array()}};
        for (const auto& msg : messages) {
            if (msg.role == "tool")
                body["messages"].push_back({{"role", "user"}, {"content", "Tool result: " + msg.content}});
            else
                body["messages"].push_back({{"role", msg.role}, {"content", msg.content}});
        }
        httplib::Client client(origin_);
        client.set_connection_timeout(config_.timeout);
        client.set_read_timeout(config_.timeout);
        client.set_write_timeout(config_.timeout);
        httplib::Headers headers;
        if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
        const auto res = client.Post(path_, headers, body.dump(), "application/json");
        require(static_cast<bool>(res), ErrorKind::backend, "chat backend unreachable at " + origin_ + ": " + httplib::to_string(res.error()));
        require(res->status == 200, ErrorKind::backend,
                "chat backend returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
        try {
            return Json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const Json::exception& e) {
            fail(ErrorKind::backend, std::string("unexpected chat backend response: ") + e.what());
        }
    }

private:
    RemoteConfig config_;
    std::string origin_;
    std::string path_;
};

inline std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v != nullptr && *v != '\0' ? std::string(v) : fallback;
}

/// WORKBENCH_BACKEND=remote|scripted (default scripted); the remote backend
/// reads CHAT_API_BASE, CHAT_API_KEY, CHAT_MODEL and CHAT_TIMEOUT_SECONDS.
inline std::unique_ptr<ChatBackend> backend_from_env() {
    const auto kind = env_or("WORKBENCH_BACKEND", "scripted");
    if (kind == "scripted") return std::make_unique<ScriptedBackend>();
    require(kind == "remote", ErrorKind::invalid_argument, "WORKBENCH_BACKEND must be remote or scripted, got \"" + kind + "\"");
    RemoteConfig cfg;
    cfg.base_url = env_or("CHAT_API_BASE", "");
    require(!cfg.base_url.empty(), ErrorKind::invalid_argument, "CHAT_API_BASE is required for the remote backend");
    cfg.api_key = env_or("CHAT_API_KEY", "");
    cfg.model = env_or("CHAT_MODEL", "");
    try {
        cfg.timeout = std::chrono::seconds(std::stoi(env_or("CHAT_TIMEOUT_SECONDS", "60")));
    } catch (const std::exception&) {
        fail(ErrorKind::invalid_argument, "CHAT_TIMEOUT_SECONDS must be an integer");
    }
    return std::make_unique<RemoteBackend>(cfg);
}

} // namespace forestchat::agent
