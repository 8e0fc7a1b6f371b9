// SPDX-License-Identifier: Apache-2.0
#pragma once

// Chat orchestration: system prompt, reply protocol and the bounded tool loop.

#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forestchat/agent/backend.hpp"
#include "forestchat/agent/session.hpp"
#include "forestchat/agent/tools.hpp"
#include "forestchat/error.hpp"

namespace forestchat::agent {

inline constexpr int kMaxRounds = 6;
inline constexpr int kMaxRepairs = 1;

/// Tool descriptions, the reply protocol and a few worked exchanges.
inline std::string system_prompt(const Registry& registry) {
    std::string p =
        "You are a remote-sensing assistant for forest change analysis. A user has loaded a pair of co-registered "
        "satellite images (A before, B after) and optionally a ground-truth mask and mask proposals. You answer by "
        "calling tools and then summarising their results.\n\n"
        "Reply with exactly one JSON object and nothing else:\n"
        "  {\"tool\": \"<tool name>\", \"args\": {...}}  to run a tool, or\n"
        "  {\"final\": \"<answer>\"}  to answer the user.\n"
        "After each tool call you receive its result as JSON. Quote numbers only from tool results; never write "
        "placeholders such as {{percentage}}. If a tool fails, explain the error to the user.\n\nTools:\n";
    for (const auto& t : registry) {
        p += "- " + t.name + ": " + t.description + "\n  arguments schema: " + t.parameters.dump() + "\n";
    }
    p += "\nExamples:\n"
         "User: what percentage of the forest was lost?\n"
         "Assistant: {\"tool\": \"detect_changes_supervised\", \"args\": {\"source\": \"difference\"}}\n"
         "Tool result: {\"tool\": \"detect_changes_supervised\", \"result\": {\"ok\": true, \"summary\": \"The difference detector marks 4.10% of the image as changed in 2 patches.\"}}\n"
         "Assistant: {\"tool\": \"deforestation_percentage\", \"args\": {}}\n"
         "Tool result: {\"tool\": \"deforestation_percentage\", \"result\": {\"ok\": true, \"summary\": \"The deforested area covers 4.10% of the image.\"}}\n"
         "Assistant: {\"final\": \"About 4.10% of the image shows forest loss.\"}\n\n"
         "User: which trees near (40, 52) were cut?\n"
         "Assistant: {\"tool\": \"point_query_changes\", \"args\": {\"points\": [{\"row\": 40, \"col\": 52, \"time\": \"t1\"}]}}\n\n"
         "User: thanks!\n"
         "Assistant: {\"final\": \"You are welcome.\"}\n";
    return p;
}

struct BackendReply {
    /// Exactly one of `tool` and `final` is set.
    std::optional<std::string> tool;
    Json args = Json::object();
    std::optional<std::string> final;
};

inline bool has_placeholder(const std::string& text) {
    static const std::regex re(R"(\{\{[^{}]*\}\})");
    return std::regex_search(text, re);
}

/// Parses one backend reply; nullopt when it breaks the protocol. A single
/// surrounding ``` fence is tolerated.
inline std::optional<BackendReply> parse_backend_reply(const std::string& raw) {
    std::string text = raw;
    static const std::regex fence(R"(^\s*```(?:json)?\s*([\s\S]*?)\s*```\s*$)");
    std::smatch m;
    if (std::regex_match(text, m, fence)) text = m[1].str();
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception&) {
        return std::nullopt;
    }
    if (!j.is_object()) return std::nullopt;
    BackendReply r;
    if (j.contains("final")) {
        if (j.size() != 1 || !j.at("final").is_string()) return std::nullopt;
        r.final = j.at("final").get<std::string>();
        if (has_placeholder(*r.final)) return std::nullopt;
        return r;
    }
    if (!j.contains("tool") || !j.at("tool").is_string()) return std::nullopt;
    for (const auto& [key, v] : j.items())
        if (key != "tool" && key != "args") return std::nullopt;
    r.tool = j.at("tool").get<std::string>();
    if (j.contains("args")) {
        if (!j.at("args").is_object()) return std::nullopt;
        r.args = j.at("args");
    }
    return r;
}

struct ChatTurn {
    std::string reply;
    /// One entry per executed call: {"tool", "args", "result"}.
    Json tool_calls = Json::array();
    std::vector<std::string> artifacts;

    Json to_json() const { return {{"reply", reply}, {"tool_calls", tool_calls}, {"artifacts", artifacts}}; }
};

inline std::vector<ChatMessage> backend_messages(const Registry& registry, const Json& transcript) {
    std::vector<ChatMessage> out{{"system", system_prompt(registry)}};
    for (const auto& e : transcript)
        if (e.at("role") != "error") out.push_back({e.at("role").get<std::string>(), e.at("content").get<std::string>()});
    return out;
}

/// Runs one user turn. The caller must hold `session.mutex`. Protocol and
/// backend failures throw after the transcript has been updated.
inline ChatTurn handle_chat(Session& session, const Registry& registry, ChatBackend& backend, const std::string& message) {
    require(!message.empty(), ErrorKind::invalid_argument, "message is empty");
    auto& transcript = session.transcript;
    transcript.push_back({{"role", "user"}, {"content", message}});
    ChatTurn turn;
    int repairs = 0;
    for (int round = 0; round < kMaxRounds; ++round) {
        std::string raw;
        try {
            raw = backend.complete(backend_messages(registry, transcript));
        } catch (const Error& e) {
            transcript.push_back({{"role", "error"}, {"content", e.what()}});
            throw;
        }
        transcript.push_back({{"role", "assistant"}, {"content", raw}});
        const auto reply = parse_backend_reply(raw);
        if (!reply) {
            if (repairs++ < kMaxRepairs) {
                transcript.push_back({{"role", "user"}, {"content", kRepairPrompt}});
                continue;
            }
            transcript.push_back({{"role", "error"}, {"content", "backend reply broke the protocol twice"}});
            fail(ErrorKind::protocol, "the language model did not produce a valid reply after one repair attempt");
        }
        if (reply->final) {
            turn.reply = *reply->final;
            return turn;
        }
        const auto result = execute_tool(session, registry, *reply->tool, reply->args);
        const Json record{{"tool", *reply->tool}, {"args", reply->args}, {"result", result.to_json()}};
        transcript.push_back({{"role", "tool"}, {"content", Json{{"tool", *reply->tool}, {"result", result.to_json()}}.dump()}});
        turn.tool_calls.push_back(record);
        turn.artifacts.insert(turn.artifacts.end(), result.artifacts.begin(), result.artifacts.end());
    }
    transcript.push_back({{"role", "error"}, {"content", "round limit exceeded"}});
    fail(ErrorKind::protocol, "no final answer within " + std::to_string(kMaxRounds) + " rounds");
}

} // namespace forestchat::agent
