// SPDX-License-Identifier: Apache-2.0
#pragma once

// Scripted agent conversation over a seeded square-clearing pair.

#include <memory>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "forestchat/agent/chat.hpp"
#include "forestchat/agent/session.hpp"
#include "forestchat/agent/tools.hpp"

namespace forestchat::testing {

inline const std::vector<std::string>& fixture_conversation() {
    static const std::vector<std::string> messages = {
        "detect changes between the two images",
        "caption the changes",
        "what percentage of the area was deforested",
        "how many patches were cleared",
        "compare the result with the ground truth",
    };
    return messages;
}

inline constexpr const char* kFixtureHumanCaption = "a square of forest in the scene has been cleared";

/// Loads the square fixture (with ground truth and a dataset caption) into `s`.
inline void load_fixture_pair(agent::Session& s, std::uint64_t seed = 3) {
    auto fx = square_fixture(seed);
    s.reset_pair();
    s.pair = BitemporalPair(fx.pair.image_a(), fx.pair.image_b(), fx.truth);
    s.human_caption = kFixtureHumanCaption;
}

struct ConversationRecord {
    std::vector<agent::ChatTurn> turns;
    std::string transcript;
    /// Artifact name and bytes in name order.
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> artifacts;
};

inline ConversationRecord run_fixture_conversation(std::uint64_t seed = 3) {
    agent::Session s;
    load_fixture_pair(s, seed);
    const auto registry = agent::register_tools();
    agent::ScriptedBackend backend;
    ConversationRecord rec;
    for (const auto& m : fixture_conversation()) rec.turns.push_back(agent::handle_chat(s, registry, backend, m));
    rec.transcript = s.transcript.dump();
    for (const auto& [name, a] : s.artifacts) rec.artifacts.emplace_back(name, a.bytes);
    return rec;
}

} // namespace forestchat::testing
