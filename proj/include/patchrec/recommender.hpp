#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "patchrec/detail/bytes.hpp"
#include "patchrec/detail/numfmt.hpp"
#include "patchrec/errors.hpp"
#include "patchrec/malstm.hpp"

namespace patchrec {

inline constexpr std::size_t kRankAll = std::numeric_limits<std::size_t>::max();

// SHA-256 of the serialized model payload; guards ranked queries against a
// stale precomputed index.
inline std::array<std::uint8_t, 32> model_fingerprint(const ModelParams& m) {
    return detail::sha256(model_payload(m));
}

struct PatchIndexEntry {
    std::string patch_id;
    std::vector<double> h;  // encoder output for the patch
};

struct PatchIndex {
    std::vector<PatchIndexEntry> entries;
    std::array<std::uint8_t, 32> model_fingerprint{};
    std::int32_t hidden_size = 0;
};

// Encodes every patch once; later queries reuse the cached vectors, which is
// exact because the score depends only on the final hidden states.
inline PatchIndex build_patch_index(const ModelParams& m,
                                    const std::vector<std::pair<std::string, EncodedSeq>>& patches,
                                    bool mask_padding = true) {
    if (patches.empty()) {
        throw DataError("cannot build an index from zero patches");
    }
    PatchIndex index;
    index.model_fingerprint = model_fingerprint(m);
    index.hidden_size = m.lstm.hidden_size;
    index.entries.reserve(patches.size());
    std::unordered_set<std::string> seen;
    for (const auto& [patch_id, seq] : patches) {
        if (!seen.insert(patch_id).second) {
            throw DataError("duplicate patch id: " + patch_id);
        }
        index.entries.push_back({patch_id, encode_sequence(m, seq, mask_padding)});
    }
    return index;
}

struct Recommendation {
    std::string patch_id;
    double score = 0;     // in (0, 1]
    std::size_t rank = 0; // 1-based
};

// Scores the bug against every index entry and returns the top k (k =
// kRankAll for the full ranking), sorted by descending score with ties
// broken by ascending patch_id.
inline std::vector<Recommendation> rank_patches(const ModelParams& m, const PatchIndex& index,
                                                const EncodedSeq& bug, std::size_t k = kRankAll,
                                                bool mask_padding = true) {
    if (k < 1) {
        throw UsageError("k must be >= 1");
    }
    if (index.model_fingerprint != model_fingerprint(m)) {
        throw DataError("stale index: model fingerprint mismatch");
    }
    std::vector<double> h_bug = encode_sequence(m, bug, mask_padding);
    std::vector<Recommendation> recs;
    recs.reserve(index.entries.size());
    for (const auto& entry : index.entries) {
        recs.push_back({entry.patch_id, manhattan_similarity(h_bug, entry.h), 0});
    }
    std::sort(recs.begin(), recs.end(), [](const Recommendation& a, const Recommendation& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.patch_id < b.patch_id;
    });
    if (k < recs.size()) {
        recs.resize(k);
    }
    for (std::size_t i = 0; i < recs.size(); ++i) {
        recs[i].rank = i + 1;
    }
    return recs;
}

// 1-based rank of the known solution patch within a full ranking.
inline std::size_t solution_rank(std::span<const Recommendation> ranking, const std::string& solution_patch_id) {
    for (const auto& rec : ranking) {
        if (rec.patch_id == solution_patch_id) {
            return rec.rank;
        }
    }
    throw DataError("solution patch not present in ranking: " + solution_patch_id);
}

// Linear-interpolation percentiles: sort ascending, position p*(n-1)/100,
// interpolate between neighbors. Yields fractional values from integer
// ranks (e.g. p50 of [1,2,3,4] is 2.5).
inline std::vector<double> rank_percentiles(std::span<const double> ranks,
                                            std::span<const double> percentiles) {
    if (ranks.empty()) {
        throw DataError("empty rank list");
    }
    std::vector<double> sorted(ranks.begin(), ranks.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> out;
    out.reserve(percentiles.size());
    for (double p : percentiles) {
        if (!(p >= 0.0 && p <= 100.0)) {
            throw UsageError("percentile must be in [0, 100]");
        }
        double pos = p * static_cast<double>(sorted.size() - 1) / 100.0;
        std::size_t lo = static_cast<std::size_t>(pos);
        std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        double frac = pos - static_cast<double>(lo);
        out.push_back(sorted[lo] + (sorted[hi] - sorted[lo]) * frac);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Index file
// ---------------------------------------------------------------------------

inline constexpr char kIndexMagic[6] = {'P', 'I', 'D', 'X', '1', '\0'};

// "PIDX1\0", 32-byte model fingerprint, u32 hidden size, u64 entry count,
// then per entry a length-prefixed id and hidden_size little-endian doubles.
inline void save_index(const PatchIndex& index, const std::string& path) {
    std::vector<std::uint8_t> buf;
    detail::put_bytes(buf, kIndexMagic, sizeof(kIndexMagic));
    detail::put_bytes(buf, index.model_fingerprint.data(), index.model_fingerprint.size());
    detail::put_u32le(buf, static_cast<std::uint32_t>(index.hidden_size));
    detail::put_u64le(buf, index.entries.size());
    for (const auto& entry : index.entries) {
        detail::put_u32le(buf, static_cast<std::uint32_t>(entry.patch_id.size()));
        detail::put_bytes(buf, entry.patch_id.data(), entry.patch_id.size());
        for (double x : entry.h) {
            detail::put_f64le(buf, x);
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out || !out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
        throw DataError("cannot write index file: " + path);
    }
}

inline PatchIndex load_index(const std::string& path) {
    auto bytes = read_all_bytes(path);
    if (bytes.size() < sizeof(kIndexMagic)) {
        throw DataError("truncated index file: " + path);
    }
    if (std::memcmp(bytes.data(), kIndexMagic, sizeof(kIndexMagic)) != 0) {
        throw DataError("bad magic in index file: " + path);
    }
    detail::ByteReader r{bytes, sizeof(kIndexMagic)};
    auto need = [&](std::size_t n) {
        if (r.remaining() < n) {
            throw DataError("truncated index file: " + path);
        }
    };
    PatchIndex index;
    need(32 + 4 + 8);
    std::memcpy(index.model_fingerprint.data(), bytes.data() + r.pos, 32);
    r.pos += 32;
    index.hidden_size = static_cast<std::int32_t>(r.get_u32le());
    if (index.hidden_size < 1) {
        throw DataError("bad hidden size in index file: " + path);
    }
    std::uint64_t count = r.get_u64le();
    index.entries.reserve(count);
    std::unordered_set<std::string> seen;
    for (std::uint64_t i = 0; i < count; ++i) {
        need(4);
        std::uint32_t id_len = r.get_u32le();
        need(id_len);
        PatchIndexEntry entry;
        entry.patch_id = r.get_string(id_len);
        if (!seen.insert(entry.patch_id).second) {
            throw DataError("duplicate patch id in index file: " + entry.patch_id);
        }
        need(static_cast<std::size_t>(index.hidden_size) * 8);
        entry.h.resize(static_cast<std::size_t>(index.hidden_size));
        for (double& x : entry.h) {
            x = r.get_f64le();
        }
        index.entries.push_back(std::move(entry));
    }
    if (r.remaining() != 0) {
        throw DataError("trailing bytes in index file: " + path);
    }
    return index;
}

// ---------------------------------------------------------------------------
// Text outputs
// ---------------------------------------------------------------------------

// "rank<TAB>patch_id<TAB>score" with scores printed to 9 decimal places.
inline std::string format_recommendations(std::span<const Recommendation> recs) {
    std::string out;
    char buf[32];
    for (const auto& rec : recs) {
        std::snprintf(buf, sizeof(buf), "%.9f", rec.score);
        out += std::to_string(rec.rank);
        out += '\t';
        out += rec.patch_id;
        out += '\t';
        out += buf;
        out += '\n';
    }
    return out;
}

// One rank per line, then "p<P> = <value>" summary lines.
inline std::string format_rank_report(std::span<const double> ranks,
                                      std::span<const double> percentiles) {
    std::vector<double> values = rank_percentiles(ranks, percentiles);
    std::string out;
    for (double r : ranks) {
        out += detail::format_double(r);
        out += '\n';
    }
    for (std::size_t i = 0; i < percentiles.size(); ++i) {
        out += 'p';
        out += detail::format_double(percentiles[i]);
        out += " = ";
        out += detail::format_double(values[i]);
        out += '\n';
    }
    return out;
}

}  // namespace patchrec
