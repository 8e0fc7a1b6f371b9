// SPDX-License-Identifier: Apache-2.0
#pragma once

// Caption metrics (corpus BLEU-1..4, METEOR-lite, ROUGE-L, CIDEr-D) and
// binary segmentation IoU over an accumulated confusion matrix.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forestchat/error.hpp"
#include "forestchat/raster.hpp"
#include "forestchat/stemmer.hpp"

namespace forestchat {

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Pixel counts for the change class; the no-change class is its mirror image.
struct ConfusionMatrix {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const noexcept { return tp + fp + fn + tn; }

    /// The same counts seen from the no-change class.
    ConfusionMatrix swapped() const noexcept { return {tn, fn, fp, tp}; }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) noexcept {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) noexcept { return a += b; }
    bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix accumulate(ConfusionMatrix cm, const ChangeMask& pred, const ChangeMask& gt) {
    require(pred.same_shape(gt), ErrorKind::dimension_mismatch,
            "prediction is " + dims_string(pred.width(), pred.height()) + " but ground truth is " +
                dims_string(gt.width(), gt.height()));
    const auto p = pred.bits(), g = gt.bits();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] && g[i])
            ++cm.tp;
        else if (p[i])
            ++cm.fp;
        else if (g[i])
            ++cm.fn;
        else
            ++cm.tn;
    }
    return cm;
}

struct IoUScores {
    double iou_c = 1.0;
    double iou_nc = 1.0;
    double miou = 1.0;
};

/// A class that is absent and never predicted scores 1.
inline double class_iou(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    const std::uint64_t denom = tp + fp + fn;
    return denom == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(denom);
}

inline IoUScores miou(const ConfusionMatrix& cm) {
    IoUScores s;
    s.iou_c = class_iou(cm.tp, cm.fp, cm.fn);
    s.iou_nc = class_iou(cm.tn, cm.fn, cm.fp);
    s.miou = (s.iou_c + s.iou_nc) / 2.0;
    return s;
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

using Tokens = std::vector<std::string>;

/// Lowercase, whitespace split, non-alphanumerics stripped; empty tokens dropped.
inline Tokens tokenize(std::string_view sentence) {
    Tokens out;
    std::string cur;
    const auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (char ch : sentence) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isspace(u)) {
            flush();
        } else if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        }
    }
    flush();
    return out;
}

struct CaptionItem {
    std::string candidate;
    std::vector<std::string> references;
};

struct CaptionCorpus {
    std::vector<CaptionItem> items;
};

struct TokenizedItem {
    Tokens candidate;
    std::vector<Tokens> references;
};

/// Tokenizes every sentence; references that tokenize to nothing are dropped.
inline std::vector<TokenizedItem> prepare(const CaptionCorpus& corpus) {
    require(!corpus.items.empty(), ErrorKind::invalid_argument, "caption corpus is empty");
    std::vector<TokenizedItem> out;
    out.reserve(corpus.items.size());
    for (std::size_t i = 0; i < corpus.items.size(); ++i) {
        TokenizedItem t;
        t.candidate = tokenize(corpus.items[i].candidate);
        for (const auto& r : corpus.items[i].references) {
            auto toks = tokenize(r);
            if (!toks.empty()) t.references.push_back(std::move(toks));
        }
        require(!t.references.empty(), ErrorKind::invalid_argument,
                "corpus item " + std::to_string(i) + " has no non-empty reference");
        out.push_back(std::move(t));
    }
    return out;
}

using NgramCounts = std::map<std::string, int>;

inline NgramCounts ngram_counts(const Tokens& tokens, std::size_t n) {
    NgramCounts counts;
    if (tokens.size() < n || n == 0) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        std::string key = tokens[i];
        for (std::size_t k = 1; k < n; ++k) {
            key.push_back(' ');
            key += tokens[i + k];
        }
        ++counts[key];
    }
    return counts;
}

struct BleuStats {
    std::array<std::uint64_t, 4> matched{};
    std::array<std::uint64_t, 4> total{};
    std::uint64_t candidate_length = 0;
    std::uint64_t reference_length = 0;
};

inline BleuStats bleu_stats(std::span<const TokenizedItem> items) {
    BleuStats s;
    for (const auto& item : items) {
        const auto c = item.candidate.size();
        s.candidate_length += c;
        std::size_t best = item.references.front().size();
        for (const auto& r : item.references) {
            const auto d = r.size() > c ? r.size() - c : c - r.size();
            const auto bd = best > c ? best - c : c - best;
            if (d < bd || (d == bd && r.size() < best)) best = r.size();
        }
        s.reference_length += best;

        for (std::size_t n = 1; n <= 4; ++n) {
            const auto cand = ngram_counts(item.candidate, n);
            NgramCounts max_ref;
            for (const auto& r : item.references)
                for (const auto& [g, cnt] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
            for (const auto& [g, cnt] : cand) {
                s.total[n - 1] += static_cast<std::uint64_t>(cnt);
                const auto it = max_ref.find(g);
                if (it != max_ref.end()) s.matched[n - 1] += static_cast<std::uint64_t>(std::min(cnt, it->second));
            }
        }
    }
    return s;
}

inline double bleu_from_stats(const BleuStats& s, int n) {
    require(n >= 1 && n <= 4, ErrorKind::invalid_argument, "BLEU order must be in 1..4");
    if (s.candidate_length == 0) return 0.0;
    double log_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        const auto idx = static_cast<std::size_t>(k);
        if (s.total[idx] == 0 || s.matched[idx] == 0) return 0.0;
        log_sum += std::log(static_cast<double>(s.matched[idx]) / static_cast<double>(s.total[idx]));
    }
    const double c = static_cast<double>(s.candidate_length), r = static_cast<double>(s.reference_length);
    const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
    return bp * std::exp(log_sum / n);
}

/// Corpus-level BLEU-n with uniform weights and the closest-reference brevity penalty.
inline double bleu(const CaptionCorpus& corpus, int n) {
    require(n >= 1 && n <= 4, ErrorKind::invalid_argument, "BLEU order must be in 1..4");
    return bleu_from_stats(bleu_stats(prepare(corpus)), n);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

inline double rouge_l_sentence(const Tokens& cand, const Tokens& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    const double lcs = static_cast<double>(lcs_length(cand, ref));
    const double rec = lcs / static_cast<double>(ref.size());
    const double prec = lcs / static_cast<double>(cand.size());
    if (rec + prec == 0.0) return 0.0;
    const double b2 = kRougeBeta * kRougeBeta;
    return ((1.0 + b2) * rec * prec) / (rec + b2 * prec);
}

inline double rouge_l(const CaptionCorpus& corpus) {
    const auto items = prepare(corpus);
    double sum = 0.0;
    for (const auto& item : items) {
        double best = 0.0;
        for (const auto& r : item.references) best = std::max(best, rouge_l_sentence(item.candidate, r));
        sum += best;
    }
    return sum / static_cast<double>(items.size());
}

struct MeteorAlignment {
    std::size_t matches = 0;
    std::size_t chunks = 0;
};

/// Greedy two-stage alignment: exact surface match, then Porter-stem match.
/// Each candidate token takes the leftmost still-free reference token.
inline MeteorAlignment meteor_align(const Tokens& cand, const Tokens& ref) {
    std::vector<int> link(cand.size(), -1);
    std::vector<bool> used(ref.size(), false);
    for (std::size_t i = 0; i < cand.size(); ++i)
        for (std::size_t j = 0; j < ref.size(); ++j)
            if (!used[j] && cand[i] == ref[j]) {
                link[i] = static_cast<int>(j);
                used[j] = true;
                break;
            }
    std::vector<std::string> ref_stems(ref.size());
    for (std::size_t j = 0; j < ref.size(); ++j) ref_stems[j] = porter_stem(ref[j]);
    for (std::size_t i = 0; i < cand.size(); ++i) {
        if (link[i] >= 0) continue;
        const auto stem = porter_stem(cand[i]);
        for (std::size_t j = 0; j < ref.size(); ++j)
            if (!used[j] && stem == ref_stems[j]) {
                link[i] = static_cast<int>(j);
                used[j] = true;
                break;
            }
    }
    MeteorAlignment a;
    int prev_i = -2, prev_j = -2;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        if (link[i] < 0) continue;
        ++a.matches;
        if (static_cast<int>(i) != prev_i + 1 || link[i] != prev_j + 1) ++a.chunks;
        prev_i = static_cast<int>(i);
        prev_j = link[i];
    }
    return a;
}

inline double meteor_lite_sentence(const Tokens& cand, const Tokens& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    const auto a = meteor_align(cand, ref);
    if (a.matches == 0) return 0.0;
    const double m = static_cast<double>(a.matches);
    const double p = m / static_cast<double>(cand.size());
    const double r = m / static_cast<double>(ref.size());
    const double fmean = 10.0 * p * r / (r + 9.0 * p);
    const double frag = static_cast<double>(a.chunks) / m;
    const double penalty = 0.5 * frag * frag * frag;
    return fmean * (1.0 - penalty);
}

/// METEOR without synonym matching (exact + stem stages only).
inline double meteor_lite(const CaptionCorpus& corpus) {
    const auto items = prepare(corpus);
    double sum = 0.0;
    for (const auto& item : items) {
        double best = 0.0;
        for (const auto& r : item.references) best = std::max(best, meteor_lite_sentence(item.candidate, r));
        sum += best;
    }
    return sum / static_cast<double>(items.size());
}

inline constexpr double kCiderSigma = 6.0;

/// CIDEr-D, scaled by 10. Document frequency counts items whose reference set
/// contains the n-gram; unseen n-grams use df = 1.
inline double cider_d(const CaptionCorpus& corpus) {
    const auto items = prepare(corpus);
    require(items.size() >= 2, ErrorKind::invalid_argument, "CIDEr-D needs at least two corpus items");
    const double log_n = std::log(static_cast<double>(items.size()));

    std::array<std::map<std::string, int>, 4> df;
    for (const auto& item : items) {
        for (std::size_t n = 1; n <= 4; ++n) {
            std::set<std::string> seen;
            for (const auto& r : item.references)
                for (const auto& [g, cnt] : ngram_counts(r, n)) seen.insert(g);
            for (const auto& g : seen) ++df[n - 1][g];
        }
    }

    struct Vec {
        std::array<std::map<std::string, double>, 4> weights;
        std::array<double, 4> norm{};
        std::size_t length = 0;
    };
    const auto to_vec = [&](const Tokens& toks) {
        Vec v;
        v.length = toks.size();
        for (std::size_t n = 1; n <= 4; ++n) {
            double sq = 0.0;
            for (const auto& [g, tf] : ngram_counts(toks, n)) {
                const auto it = df[n - 1].find(g);
                const double d = it == df[n - 1].end() ? 1.0 : static_cast<double>(it->second);
                const double w = static_cast<double>(tf) * (log_n - std::log(d));
                v.weights[n - 1][g] = w;
                sq += w * w;
            }
            v.norm[n - 1] = std::sqrt(sq);
        }
        return v;
    };

    double corpus_sum = 0.0;
    for (const auto& item : items) {
        const Vec cand = to_vec(item.candidate);
        double item_sum = 0.0;
        for (const auto& r : item.references) {
            const Vec ref = to_vec(r);
            const double delta = static_cast<double>(cand.length) - static_cast<double>(ref.length);
            const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
            double per_n = 0.0;
            for (std::size_t n = 0; n < 4; ++n) {
                if (cand.norm[n] == 0.0 || ref.norm[n] == 0.0) continue;
                double dot = 0.0;
                for (const auto& [g, w] : cand.weights[n]) {
                    const auto it = ref.weights[n].find(g);
                    if (it != ref.weights[n].end()) dot += std::min(w, it->second) * it->second;
                }
                per_n += dot / (cand.norm[n] * ref.norm[n]) * penalty;
            }
            item_sum += per_n / 4.0;
        }
        corpus_sum += item_sum / static_cast<double>(item.references.size());
    }
    return 10.0 * corpus_sum / static_cast<double>(items.size());
}

struct CaptionScores {
    std::array<double, 4> bleu{};
    double meteor_lite = 0.0;
    double rouge_l = 0.0;
    /// Absent for single-item corpora, where IDF is undefined.
    std::optional<double> cider_d;
};

inline CaptionScores evaluate_captions(const CaptionCorpus& corpus) {
    CaptionScores s;
    const auto stats = bleu_stats(prepare(corpus));
    for (int n = 1; n <= 4; ++n) s.bleu[static_cast<std::size_t>(n - 1)] = bleu_from_stats(stats, n);
    s.meteor_lite = meteor_lite(corpus);
    s.rouge_l = rouge_l(corpus);
    if (corpus.items.size() >= 2) s.cider_d = cider_d(corpus);
    return s;
}

} // namespace forestchat
