#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "patchrec/corpus.hpp"
#include "patchrec/detail/seeding.hpp"
#include "patchrec/errors.hpp"

namespace patchrec {

// Desk-scale stand-in corpus with known ground truth. Topics have disjoint
// word sets plus a shared pool; each bug/patch pair additionally narrows to
// a small per-pair focus subset of its topic vocabulary, so the matching
// patch is distinguishable from same-topic patches (not just cross-topic
// ones). Bug and patch texts are sampled independently; a pair never
// consists of two copies of one sequence.
struct SynthConfig {
    int n_topics = 10;
    int bugs_per_topic = 20;
    int vocab_per_topic = 30;
    int shared_vocab = 30;
    int tokens_min = 8;
    int tokens_max = 14;
    double topic_purity = 0.9;  // fraction of tokens drawn from the pair focus
    std::uint64_t seed = 0;

    void validate() const {
        if (n_topics < 2) throw UsageError("n_topics must be >= 2");
        if (bugs_per_topic < 1) throw UsageError("bugs_per_topic must be >= 1");
        if (!(topic_purity > 0.5 && topic_purity <= 1.0)) {
            throw UsageError("topic_purity must be in (0.5, 1]");
        }
        if (tokens_min < 1 || tokens_max < tokens_min) {
            throw UsageError("need 1 <= tokens_min <= tokens_max");
        }
        if (vocab_per_topic < 2) {
            throw DataError("topic vocabulary too small for distinct bug/patch documents");
        }
        if (topic_purity < 1.0 && shared_vocab < 1) {
            throw DataError("shared vocabulary too small: impure tokens need a shared pool");
        }
        if (shared_vocab < 0) throw UsageError("shared_vocab must be >= 0");
    }

    // Focus-subset size per pair; at least 2 words, roughly a fifth of the
    // topic vocabulary.
    int focus_size() const {
        int f = vocab_per_topic / 5;
        return f < 2 ? 2 : f;
    }
};

struct SynthCorpus {
    std::vector<RawRecord> bugs;
    std::vector<RawRecord> patches;
    std::vector<std::pair<std::string, std::string>> matches;  // (bug_id, patch_id)
};

namespace detail {

inline std::vector<std::string> sample_doc_tokens(RandomSource& rng, const std::vector<std::string>& focus,
                                                  const std::vector<std::string>& shared, double purity,
                                                  int tokens_min, int tokens_max) {
    int len = tokens_min + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(tokens_max - tokens_min + 1)));
    std::vector<std::string> tokens;
    tokens.reserve(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
        if (shared.empty() || rng.uniform01() < purity) {
            tokens.push_back(focus[rng.uniform_index(focus.size())]);
        } else {
            tokens.push_back(shared[rng.uniform_index(shared.size())]);
        }
    }
    return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string text;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) text += ' ';
        text += tokens[i];
    }
    return text;
}

}  // namespace detail

inline SynthCorpus generate_synthetic_corpus(const SynthConfig& cfg) {
    cfg.validate();
    detail::RandomSource rng(cfg.seed);

    std::vector<std::vector<std::string>> topic_vocab(static_cast<std::size_t>(cfg.n_topics));
    for (int t = 0; t < cfg.n_topics; ++t) {
        auto& words = topic_vocab[static_cast<std::size_t>(t)];
        words.reserve(static_cast<std::size_t>(cfg.vocab_per_topic));
        for (int w = 0; w < cfg.vocab_per_topic; ++w) {
            words.push_back("t" + std::to_string(t) + "w" + std::to_string(w));
        }
    }
    std::vector<std::string> shared;
    shared.reserve(static_cast<std::size_t>(cfg.shared_vocab));
    for (int w = 0; w < cfg.shared_vocab; ++w) {
        shared.push_back("common" + std::to_string(w));
    }

    SynthCorpus corpus;
    const int focus_size = cfg.focus_size();
    for (int t = 0; t < cfg.n_topics; ++t) {
        const auto& words = topic_vocab[static_cast<std::size_t>(t)];
        for (int b = 0; b < cfg.bugs_per_topic; ++b) {
            std::vector<std::string> focus;
            focus.reserve(static_cast<std::size_t>(focus_size));
            for (std::size_t idx : rng.sample_without_replacement(words.size(), static_cast<std::size_t>(focus_size))) {
                focus.push_back(words[idx]);
            }
            auto bug_tokens = detail::sample_doc_tokens(rng, focus, shared, cfg.topic_purity,
                                                        cfg.tokens_min, cfg.tokens_max);
            auto patch_tokens = bug_tokens;
            for (int attempt = 0; patch_tokens == bug_tokens; ++attempt) {
                if (attempt >= 1000) {
                    throw DataError("topic vocabulary too small for distinct bug/patch documents");
                }
                patch_tokens = detail::sample_doc_tokens(rng, focus, shared, cfg.topic_purity,
                                                         cfg.tokens_min, cfg.tokens_max);
            }
            std::string suffix = "t" + std::to_string(t) + "_" + std::to_string(b);
            RawRecord bug{"bug_" + suffix, RecordKind::bug, detail::join_tokens(bug_tokens)};
            RawRecord patch{"patch_" + suffix, RecordKind::patch, detail::join_tokens(patch_tokens)};
            corpus.matches.emplace_back(bug.id, patch.id);
            corpus.bugs.push_back(std::move(bug));
            corpus.patches.push_back(std::move(patch));
        }
    }
    return corpus;
}

}  // namespace patchrec
