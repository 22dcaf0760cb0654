#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patchrec/detail/numfmt.hpp"
#include "patchrec/detail/seeding.hpp"
#include "patchrec/errors.hpp"

namespace patchrec {

inline constexpr std::int32_t kDefaultMaxLen = 100;

enum class RecordKind { bug, patch };

struct RawRecord {
    std::string id;
    RecordKind kind = RecordKind::bug;
    std::string text;
};

using TokenSeq = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Replaces every character outside [A-Za-z0-9_] with a space, lowercases,
// splits on whitespace runs and drops stopwords. Token order is preserved.
inline TokenSeq preprocess(std::string_view text, const std::unordered_set<std::string>& stopwords) {
    TokenSeq tokens;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            if (!stopwords.contains(current)) {
                tokens.push_back(current);
            }
            current.clear();
        }
    };
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_') {
            current.push_back(static_cast<char>(c));
        } else if (c >= 'A' && c <= 'Z') {
            current.push_back(static_cast<char>(c - 'A' + 'a'));
        } else {
            flush();
        }
    }
    flush();
    return tokens;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct Vocabulary {
    static constexpr std::int32_t kPadIndex = 0;
    static constexpr std::int32_t kUnkIndex = 1;
    static constexpr std::string_view kPadWord = "<pad>";
    static constexpr std::string_view kUnkWord = "<unk>";

    std::unordered_map<std::string, std::int32_t> word_to_index;
    std::vector<std::string> index_to_word;
    std::vector<std::int64_t> frequency;  // per index; 0 for PAD and UNK

    std::int32_t size() const { return static_cast<std::int32_t>(index_to_word.size()); }

    bool contains(const std::string& w) const { return word_to_index.contains(w); }

    // Unknown words map to UNK.
    std::int32_t lookup(const std::string& w) const {
        auto it = word_to_index.find(w);
        return it == word_to_index.end() ? kUnkIndex : it->second;
    }

    const std::string& word_at(std::int32_t index) const {
        if (index < 0 || index >= size()) {
            throw DataError("vocabulary index out of range: " + std::to_string(index));
        }
        return index_to_word[static_cast<std::size_t>(index)];
    }
};

// Words with corpus frequency >= min_count get indices from 2 upward, in
// descending frequency order, ties broken lexicographically. Index 0 is PAD,
// index 1 is UNK.
inline Vocabulary build_vocabulary(const std::vector<TokenSeq>& corpora, std::int64_t min_count = 1) {
    if (min_count < 1) {
        throw UsageError("min_count must be >= 1");
    }
    std::unordered_map<std::string, std::int64_t> counts;
    std::size_t total = 0;
    for (const auto& doc : corpora) {
        for (const auto& token : doc) {
            ++counts[token];
            ++total;
        }
    }
    if (total == 0) {
        throw DataError("empty corpus");
    }
    std::vector<std::pair<std::string, std::int64_t>> admitted;
    admitted.reserve(counts.size());
    for (auto& [word, freq] : counts) {
        if (freq >= min_count) {
            admitted.emplace_back(word, freq);
        }
    }
    std::sort(admitted.begin(), admitted.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary vocab;
    vocab.index_to_word = {std::string(Vocabulary::kPadWord), std::string(Vocabulary::kUnkWord)};
    vocab.frequency = {0, 0};
    vocab.word_to_index.emplace(std::string(Vocabulary::kPadWord), Vocabulary::kPadIndex);
    vocab.word_to_index.emplace(std::string(Vocabulary::kUnkWord), Vocabulary::kUnkIndex);
    vocab.index_to_word.reserve(admitted.size() + 2);
    vocab.frequency.reserve(admitted.size() + 2);
    for (const auto& [word, freq] : admitted) {
        if (!vocab.word_to_index.emplace(word, vocab.size()).second) {
            throw DataError("reserved word in corpus: " + word);
        }
        vocab.index_to_word.push_back(word);
        vocab.frequency.push_back(freq);
    }
    return vocab;
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct EncodedSeq {
    std::vector<std::int32_t> indices;  // fixed length, right-padded with PAD
    std::int32_t true_len = 0;
};

// Unknown words map to UNK; sequences longer than max_len keep the first
// max_len tokens; shorter ones are right-padded with PAD.
inline EncodedSeq encode_tokens(const TokenSeq& tokens, const Vocabulary& vocab,
                                std::int32_t max_len = kDefaultMaxLen) {
    if (max_len < 1) {
        throw UsageError("max_len must be >= 1");
    }
    if (tokens.empty()) {
        throw DataError("empty sequence");
    }
    EncodedSeq seq;
    seq.true_len = static_cast<std::int32_t>(std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(max_len)));
    seq.indices.assign(static_cast<std::size_t>(max_len), Vocabulary::kPadIndex);
    for (std::int32_t i = 0; i < seq.true_len; ++i) {
        seq.indices[static_cast<std::size_t>(i)] = vocab.lookup(tokens[static_cast<std::size_t>(i)]);
    }
    return seq;
}

// Inverse of encode_tokens for the first true_len positions; unknown words
// come back as the UNK word.
inline TokenSeq decode_indices(const EncodedSeq& seq, const Vocabulary& vocab) {
    TokenSeq tokens;
    tokens.reserve(static_cast<std::size_t>(seq.true_len));
    for (std::int32_t i = 0; i < seq.true_len; ++i) {
        tokens.push_back(vocab.word_at(seq.indices[static_cast<std::size_t>(i)]));
    }
    return tokens;
}

// ---------------------------------------------------------------------------
// Labeled pairs
// ---------------------------------------------------------------------------

struct LabeledPair {
    std::string bug_id;
    std::string patch_id;
    EncodedSeq bug_seq;
    EncodedSeq patch_seq;
    int label = 0;  // 1 iff (bug_id, patch_id) is a ground-truth match
};

struct PairId {
    std::string bug_id;
    std::string patch_id;
    int label = 0;
};

// For each match emits one positive pair plus neg_ratio negatives drawn
// uniformly without replacement from patch_pool, excluding every patch
// matched to that bug. Deterministic for a fixed seed.
inline std::vector<PairId> make_pair_ids(const std::vector<std::pair<std::string, std::string>>& matches,
                                         const std::vector<std::string>& patch_pool,
                                         int neg_ratio, std::uint64_t seed) {
    if (neg_ratio < 0) {
        throw UsageError("neg_ratio must be >= 0");
    }
    if (patch_pool.size() <= static_cast<std::size_t>(neg_ratio)) {
        throw DataError("patch pool smaller than neg_ratio + 1");
    }
    std::unordered_set<std::string> pool_set(patch_pool.begin(), patch_pool.end());
    if (pool_set.size() != patch_pool.size()) {
        throw DataError("patch pool contains duplicate ids");
    }
    std::unordered_map<std::string, std::unordered_set<std::string>> matched_by_bug;
    for (const auto& [bug_id, patch_id] : matches) {
        if (!pool_set.contains(patch_id)) {
            throw DataError("matched patch not in pool: " + patch_id);
        }
        matched_by_bug[bug_id].insert(patch_id);
    }

    detail::RandomSource rng(seed);
    std::vector<PairId> out;
    out.reserve(matches.size() * (1 + static_cast<std::size_t>(neg_ratio)));
    std::vector<std::string> candidates;
    for (const auto& [bug_id, patch_id] : matches) {
        out.push_back({bug_id, patch_id, 1});
        const auto& excluded = matched_by_bug[bug_id];
        candidates.clear();
        for (const auto& p : patch_pool) {
            if (!excluded.contains(p)) {
                candidates.push_back(p);
            }
        }
        if (candidates.size() < static_cast<std::size_t>(neg_ratio)) {
            throw DataError("not enough non-matching patches for bug " + bug_id);
        }
        for (std::size_t idx : rng.sample_without_replacement(candidates.size(), static_cast<std::size_t>(neg_ratio))) {
            out.push_back({bug_id, candidates[idx], 0});
        }
    }
    return out;
}

inline std::vector<LabeledPair> make_pairs(const std::vector<std::pair<std::string, std::string>>& matches,
                                           const std::vector<std::string>& patch_pool,
                                           int neg_ratio, std::uint64_t seed,
                                           const std::unordered_map<std::string, EncodedSeq>& bug_encodings,
                                           const std::unordered_map<std::string, EncodedSeq>& patch_encodings) {
    std::vector<PairId> ids = make_pair_ids(matches, patch_pool, neg_ratio, seed);
    std::vector<LabeledPair> out;
    out.reserve(ids.size());
    for (auto& pid : ids) {
        auto bit = bug_encodings.find(pid.bug_id);
        if (bit == bug_encodings.end()) {
            throw DataError("no encoding for bug " + pid.bug_id);
        }
        auto pit = patch_encodings.find(pid.patch_id);
        if (pit == patch_encodings.end()) {
            throw DataError("no encoding for patch " + pid.patch_id);
        }
        out.push_back({pid.bug_id, pid.patch_id, bit->second, pit->second, pid.label});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct DatasetSplits {
    std::vector<LabeledPair> train;
    std::vector<LabeledPair> validation;
    std::vector<LabeledPair> test;
    std::uint64_t seed = 0;
};

// Splits by bug id so all pairs of a bug land in one split. Bug ids are
// shuffled deterministically, then partitioned floor(train), floor(val),
// remainder to test.
inline DatasetSplits split_dataset(const std::vector<LabeledPair>& pairs,
                                   std::array<double, 3> fractions, std::uint64_t seed) {
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) {
        throw UsageError("split fractions must sum to 1");
    }
    std::vector<std::string> bug_ids;  // first-appearance order
    std::unordered_map<std::string, int> split_of;
    for (const auto& p : pairs) {
        if (!split_of.contains(p.bug_id)) {
            split_of.emplace(p.bug_id, -1);
            bug_ids.push_back(p.bug_id);
        }
    }
    if (bug_ids.size() < 3) {
        throw DataError("need at least 3 distinct bug ids to split");
    }
    detail::RandomSource rng(seed);
    rng.shuffle(bug_ids);
    std::size_t n = bug_ids.size();
    std::size_t n_train = static_cast<std::size_t>(fractions[0] * static_cast<double>(n));
    std::size_t n_val = static_cast<std::size_t>(fractions[1] * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        split_of[bug_ids[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
    }
    DatasetSplits splits;
    splits.seed = seed;
    for (const auto& p : pairs) {
        switch (split_of[p.bug_id]) {
            case 0: splits.train.push_back(p); break;
            case 1: splits.validation.push_back(p); break;
            default: splits.test.push_back(p); break;
        }
    }
    return splits;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// Corpus: line-delimited JSON {"id":…, "kind":"bug"|"patch", "text":…}.
inline std::vector<RawRecord> read_corpus_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open corpus file: " + path);
    }
    std::vector<RawRecord> records;
    std::unordered_set<std::string> seen_bug, seen_patch;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("kind") || !j.contains("text") ||
            !j["id"].is_string() || !j["kind"].is_string() || !j["text"].is_string()) {
            throw DataError("bad corpus record at " + path + ":" + std::to_string(lineno));
        }
        RawRecord rec;
        rec.id = j["id"].get<std::string>();
        rec.text = j["text"].get<std::string>();
        std::string kind = j["kind"].get<std::string>();
        if (kind == "bug") {
            rec.kind = RecordKind::bug;
        } else if (kind == "patch") {
            rec.kind = RecordKind::patch;
        } else {
            throw DataError("bad corpus kind '" + kind + "' at " + path + ":" + std::to_string(lineno));
        }
        if (rec.id.empty()) {
            throw DataError("empty record id at " + path + ":" + std::to_string(lineno));
        }
        auto& seen = rec.kind == RecordKind::bug ? seen_bug : seen_patch;
        if (!seen.insert(rec.id).second) {
            throw DataError("duplicate " + kind + " id '" + rec.id + "' at " + path + ":" + std::to_string(lineno));
        }
        records.push_back(std::move(rec));
    }
    return records;
}

inline void write_corpus_file(const std::vector<RawRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write corpus file: " + path);
    }
    for (const auto& rec : records) {
        nlohmann::json j{{"id", rec.id},
                         {"kind", rec.kind == RecordKind::bug ? "bug" : "patch"},
                         {"text", rec.text}};
        out << j.dump() << '\n';
    }
}

// Matches: line-delimited JSON {"bug_id":…, "patch_id":…}.
inline std::vector<std::pair<std::string, std::string>> read_matches_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open matches file: " + path);
    }
    std::vector<std::pair<std::string, std::string>> matches;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("bug_id") || !j.contains("patch_id") ||
            !j["bug_id"].is_string() || !j["patch_id"].is_string()) {
            throw DataError("bad match record at " + path + ":" + std::to_string(lineno));
        }
        matches.emplace_back(j["bug_id"].get<std::string>(), j["patch_id"].get<std::string>());
    }
    return matches;
}

inline void write_matches_file(const std::vector<std::pair<std::string, std::string>>& matches,
                               const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write matches file: " + path);
    }
    for (const auto& [bug_id, patch_id] : matches) {
        nlohmann::json j{{"bug_id", bug_id}, {"patch_id", patch_id}};
        out << j.dump() << '\n';
    }
}

// Stopwords: one word per line; '#' starts a comment.
inline std::unordered_set<std::string> read_stopword_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open stopword file: " + path);
    }
    std::unordered_set<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        auto word = detail::trim(line);
        if (!word.empty()) {
            words.emplace(word);
        }
    }
    return words;
}

// Vocabulary: "index<TAB>word<TAB>frequency", sorted by index.
inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write vocabulary file: " + path);
    }
    for (std::int32_t i = 0; i < vocab.size(); ++i) {
        out << i << '\t' << vocab.index_to_word[static_cast<std::size_t>(i)] << '\t'
            << vocab.frequency[static_cast<std::size_t>(i)] << '\n';
    }
}

inline Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open vocabulary file: " + path);
    }
    Vocabulary vocab;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::size_t t1 = line.find('\t');
        std::size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) {
            throw DataError("bad vocabulary line at " + path + ":" + std::to_string(lineno));
        }
        auto index = detail::parse_int(detail::trim(line.substr(0, t1)), "vocabulary index");
        std::string word = line.substr(t1 + 1, t2 - t1 - 1);
        auto freq = detail::parse_int(detail::trim(line.substr(t2 + 1)), "vocabulary frequency");
        if (index != vocab.size()) {
            throw DataError("non-contiguous vocabulary index at " + path + ":" + std::to_string(lineno));
        }
        if (word.empty()) {
            throw DataError("empty vocabulary word at " + path + ":" + std::to_string(lineno));
        }
        vocab.index_to_word.push_back(word);
        vocab.frequency.push_back(freq);
        if (!vocab.word_to_index.emplace(word, static_cast<std::int32_t>(index)).second) {
            throw DataError("duplicate vocabulary word '" + word + "' at " + path + ":" + std::to_string(lineno));
        }
    }
    if (vocab.size() < 2 || vocab.index_to_word[0] != Vocabulary::kPadWord ||
        vocab.index_to_word[1] != Vocabulary::kUnkWord) {
        throw DataError("vocabulary file missing PAD/UNK entries: " + path);
    }
    return vocab;
}

// Dataset: line-delimited JSON
// {"bug_id","patch_id","bug_idx":[…],"patch_idx":[…],"label"}.
inline void save_dataset(const std::vector<LabeledPair>& pairs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write dataset file: " + path);
    }
    for (const auto& p : pairs) {
        nlohmann::json j{{"bug_id", p.bug_id},
                         {"patch_id", p.patch_id},
                         {"bug_idx", p.bug_seq.indices},
                         {"patch_idx", p.patch_seq.indices},
                         {"label", p.label}};
        out << j.dump() << '\n';
    }
}

namespace detail {
inline EncodedSeq seq_from_indices(std::vector<std::int32_t> indices) {
    EncodedSeq seq;
    seq.true_len = static_cast<std::int32_t>(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] == Vocabulary::kPadIndex) {
            seq.true_len = static_cast<std::int32_t>(i);
            break;
        }
    }
    seq.indices = std::move(indices);
    return seq;
}
}  // namespace detail

inline std::vector<LabeledPair> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open dataset file: " + path);
    }
    std::vector<LabeledPair> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (patchrec::detail::trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("bug_id") || !j.contains("patch_id") ||
            !j.contains("bug_idx") || !j.contains("patch_idx") || !j.contains("label")) {
            throw DataError("bad dataset record at " + path + ":" + std::to_string(lineno));
        }
        LabeledPair p;
        p.bug_id = j["bug_id"].get<std::string>();
        p.patch_id = j["patch_id"].get<std::string>();
        p.bug_seq = detail::seq_from_indices(j["bug_idx"].get<std::vector<std::int32_t>>());
        p.patch_seq = detail::seq_from_indices(j["patch_idx"].get<std::vector<std::int32_t>>());
        p.label = j["label"].get<int>();
        if (p.label != 0 && p.label != 1) {
            throw DataError("bad label at " + path + ":" + std::to_string(lineno));
        }
        if (p.bug_seq.true_len < 1 || p.patch_seq.true_len < 1) {
            throw DataError("all-pad sequence at " + path + ":" + std::to_string(lineno));
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace patchrec
