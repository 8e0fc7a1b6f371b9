// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-session state and a content-addressed artifact store.

#include <openssl/evp.h>
#include <openssl/rand.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forestchat/caption.hpp"
#include "forestchat/error.hpp"
#include "forestchat/latent.hpp"
#include "forestchat/raster.hpp"

namespace forestchat::agent {

using Json = nlohmann::json;

inline std::string to_hex(const unsigned char* data, std::size_t n) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(2 * n, '0');
    for (std::size_t i = 0; i < n; ++i) {
        out[2 * i] = digits[data[i] >> 4];
        out[2 * i + 1] = digits[data[i] & 0xf];
    }
    return out;
}

inline std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1, ErrorKind::io, "SHA-256 failed");
    return to_hex(digest, len);
}

struct Artifact {
    std::string name;
    std::string media_type;
    std::vector<std::uint8_t> bytes;
};

struct Session {
    std::string id;
    std::optional<BitemporalPair> pair;
    /// Mask supplied with the pair, e.g. the output of a trained model.
    std::optional<ChangeMask> precomputed_mask;
    std::optional<std::string> human_caption;
    std::optional<ProposalSet> proposals;
    std::optional<ChangeMask> last_mask;
    std::optional<CaptionSet> last_captions;
    MatchParams params;
    /// Append-only conversation record.
    Json transcript = Json::array();
    std::map<std::string, Artifact> artifacts;
    /// Artifacts are mirrored here when set.
    std::optional<std::filesystem::path> artifact_dir;
    /// Serialises tool execution within the session.
    std::mutex mutex;

    /// Stores `bytes` under "<sha256>.<extension>" and returns the name.
    std::string add_artifact(std::vector<std::uint8_t> bytes, const std::string& extension, const std::string& media_type) {
        const auto name = sha256_hex(bytes) + "." + extension;
        if (artifacts.count(name) == 0) {
            if (artifact_dir) {
                std::filesystem::create_directories(*artifact_dir);
                std::ofstream out(*artifact_dir / name, std::ios::binary);
                out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
                require(static_cast<bool>(out), ErrorKind::io, "cannot write artifact " + name);
            }
            artifacts.emplace(name, Artifact{name, media_type, std::move(bytes)});
        }
        return name;
    }

    std::string add_json_artifact(const Json& j) {
        const auto text = j.dump(1);
        return add_artifact(std::vector<std::uint8_t>(text.begin(), text.end()), "json", "application/json");
    }

    const BitemporalPair& require_pair() const {
        require(pair.has_value(), ErrorKind::precondition, "no image pair is loaded; upload images A and B first");
        return *pair;
    }

    const ChangeMask& require_mask() const {
        require(last_mask.has_value(), ErrorKind::precondition, "no change mask yet; run a change detection tool first");
        return *last_mask;
    }

    /// Drops everything derived from a previous image pair.
    void reset_pair() {
        pair.reset();
        precomputed_mask.reset();
        human_caption.reset();
        last_mask.reset();
        last_captions.reset();
    }
};

/// Thread-safe map of live sessions with unguessable ids.
class SessionStore {
public:
    explicit SessionStore(std::optional<std::filesystem::path> data_dir = std::nullopt, std::size_t max_sessions = 1024)
        : data_dir_(std::move(data_dir)), max_sessions_(max_sessions) {}

    std::shared_ptr<Session> create() {
        unsigned char raw[16];
        require(RAND_bytes(raw, sizeof raw) == 1, ErrorKind::io, "random session id generation failed");
        auto s = std::make_shared<Session>();
        s->id = to_hex(raw, sizeof raw);
        if (data_dir_) s->artifact_dir = *data_dir_ / "sessions" / s->id;
        std::lock_guard lock(mutex_);
        require(sessions_.size() < max_sessions_, ErrorKind::precondition, "session limit reached");
        sessions_.emplace(s->id, s);
        return s;
    }

    std::shared_ptr<Session> get(const std::string& id) const {
        std::lock_guard lock(mutex_);
        const auto it = sessions_.find(id);
        require(it != sessions_.end(), ErrorKind::not_found, "unknown session \"" + id + "\"");
        return it->second;
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return sessions_.size();
    }

private:
    std::optional<std::filesystem::path> data_dir_;
    std::size_t max_sessions_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
};

} // namespace forestchat::agent
