#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "patchrec/corpus.hpp"
#include "patchrec/detail/bytes.hpp"
#include "patchrec/detail/numfmt.hpp"
#include "patchrec/detail/seeding.hpp"
#include "patchrec/errors.hpp"

namespace patchrec {

inline constexpr std::int32_t kDefaultEmbeddingDim = 100;

struct EmbeddingMatrix {
    std::int32_t vocab_size = 0;
    std::int32_t dim = 0;
    std::vector<double> data;  // row-major vocab_size x dim

    std::span<double> row(std::int32_t index) {
        return {data.data() + static_cast<std::size_t>(index) * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }
    std::span<const double> row(std::int32_t index) const {
        return {data.data() + static_cast<std::size_t>(index) * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }
};

// Row `index` of the matrix; PAD (row 0) is the all-zero vector.
inline std::span<const double> embed_lookup(const EmbeddingMatrix& m, std::int32_t index) {
    if (index < 0 || index >= m.vocab_size) {
        throw DataError("embedding index out of range: " + std::to_string(index));
    }
    return m.row(index);
}

struct SkipGramConfig {
    int window = 5;
    int negatives_per_positive = 5;
    int epochs = 5;
    double initial_lr = 0.025;
    double min_lr = 1e-4;
    std::int32_t dim = kDefaultEmbeddingDim;
    std::uint64_t seed = 0;

    void validate() const {
        if (window < 1) throw UsageError("window must be >= 1");
        if (negatives_per_positive < 1) throw UsageError("negatives_per_positive must be >= 1");
        if (epochs < 1) throw UsageError("epochs must be >= 1");
        if (!(initial_lr > min_lr && min_lr > 0)) throw UsageError("need initial_lr > min_lr > 0");
        if (dim < 1) throw UsageError("embedding dim must be >= 1");
    }
};

namespace detail {

// Loss and gradients for one (center, context, negatives) update of the
// negative-sampling objective:
//   L = -log s(v.u_o) - sum_n log s(-v.u_n)
struct SgnsGradients {
    std::vector<double> grad_center;                 // dL/dv
    std::vector<double> grad_context;                // dL/du_o
    std::vector<std::vector<double>> grad_negatives; // dL/du_n
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double sgns_loss(std::span<const double> center, std::span<const double> context,
                        const std::vector<std::vector<double>>& negatives) {
    double loss = -std::log(sigmoid(dot(center, context)));
    for (const auto& neg : negatives) {
        loss -= std::log(sigmoid(-dot(center, neg)));
    }
    return loss;
}

inline SgnsGradients sgns_gradients(std::span<const double> center, std::span<const double> context,
                                    const std::vector<std::vector<double>>& negatives) {
    SgnsGradients g;
    std::size_t d = center.size();
    g.grad_center.assign(d, 0.0);
    g.grad_context.assign(d, 0.0);
    double f = sigmoid(dot(center, context));
    for (std::size_t i = 0; i < d; ++i) {
        g.grad_context[i] = (f - 1.0) * center[i];
        g.grad_center[i] = (f - 1.0) * context[i];
    }
    for (const auto& neg : negatives) {
        auto& gn = g.grad_negatives.emplace_back(d, 0.0);
        double fn = sigmoid(dot(center, std::span<const double>(neg)));
        for (std::size_t i = 0; i < d; ++i) {
            gn[i] = fn * center[i];
            g.grad_center[i] += fn * neg[i];
        }
    }
    return g;
}

// Cumulative unigram^0.75 table; sampling is a binary search over it.
struct NegativeTable {
    std::vector<std::int32_t> words;
    std::vector<double> cumulative;
    double total = 0;

    std::int32_t sample(patchrec::detail::RandomSource& rng) const {
        double u = rng.uniform_real(0.0, total);
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        std::size_t i = std::min(static_cast<std::size_t>(it - cumulative.begin()), words.size() - 1);
        return words[i];
    }
};

}  // namespace detail

// Trains skip-gram with negative sampling over index-encoded, unpadded
// sentences and returns the input-side (projection) weights. Row 0 (PAD) is
// never touched. Deterministic for a fixed seed.
inline EmbeddingMatrix train_word2vec(const std::vector<std::vector<std::int32_t>>& corpus,
                                      const Vocabulary& vocab, const SkipGramConfig& cfg) {
    cfg.validate();
    if (corpus.empty()) {
        throw DataError("empty word2vec corpus");
    }
    const std::int32_t v_size = vocab.size();
    std::vector<std::int64_t> counts(static_cast<std::size_t>(v_size), 0);
    std::size_t total_tokens = 0;
    for (const auto& sent : corpus) {
        for (std::int32_t w : sent) {
            if (w <= Vocabulary::kPadIndex || w >= v_size) {
                throw DataError("word2vec corpus contains index " + std::to_string(w) +
                                "; sentences must be unpadded and within the vocabulary");
            }
            ++counts[static_cast<std::size_t>(w)];
            ++total_tokens;
        }
    }
    std::int32_t distinct_regular = 0;
    for (std::int32_t w = 2; w < v_size; ++w) {
        if (counts[static_cast<std::size_t>(w)] > 0) ++distinct_regular;
    }
    if (distinct_regular < 2) {
        throw DataError("degenerate corpus: fewer than 2 distinct non-special words");
    }

    detail::NegativeTable table;
    for (std::int32_t w = Vocabulary::kUnkIndex; w < v_size; ++w) {
        std::int64_t c = counts[static_cast<std::size_t>(w)];
        if (c > 0) {
            table.total += std::pow(static_cast<double>(c), 0.75);
            table.words.push_back(w);
            table.cumulative.push_back(table.total);
        }
    }

    // Fixed (non-shrinking) context window, so the total pair count -- and
    // with it the linear learning-rate schedule -- is known up front.
    std::uint64_t pairs_per_epoch = 0;
    for (const auto& sent : corpus) {
        std::int64_t len = static_cast<std::int64_t>(sent.size());
        for (std::int64_t t = 0; t < len; ++t) {
            std::int64_t lo = std::max<std::int64_t>(0, t - cfg.window);
            std::int64_t hi = std::min<std::int64_t>(len - 1, t + cfg.window);
            pairs_per_epoch += static_cast<std::uint64_t>(hi - lo);
        }
    }
    if (pairs_per_epoch == 0) {
        throw DataError("degenerate corpus: no (center, context) pairs within the window");
    }
    const std::uint64_t total_pairs = pairs_per_epoch * static_cast<std::uint64_t>(cfg.epochs);

    detail::RandomSource rng(cfg.seed);
    EmbeddingMatrix in;
    in.vocab_size = v_size;
    in.dim = cfg.dim;
    in.data.assign(static_cast<std::size_t>(v_size) * static_cast<std::size_t>(cfg.dim), 0.0);
    const double half = 0.5 / static_cast<double>(cfg.dim);
    for (std::int32_t w = 1; w < v_size; ++w) {
        for (double& x : in.row(w)) {
            x = rng.uniform_real(-half, half);
        }
    }
    std::vector<double> out(in.data.size(), 0.0);
    auto out_row = [&](std::int32_t w) {
        return std::span<double>(out.data() + static_cast<std::size_t>(w) * static_cast<std::size_t>(cfg.dim),
                                 static_cast<std::size_t>(cfg.dim));
    };

    std::vector<double> center_delta(static_cast<std::size_t>(cfg.dim));
    std::uint64_t pair_counter = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& sent : corpus) {
            std::int64_t len = static_cast<std::int64_t>(sent.size());
            for (std::int64_t t = 0; t < len; ++t) {
                std::int32_t center = sent[static_cast<std::size_t>(t)];
                std::int64_t lo = std::max<std::int64_t>(0, t - cfg.window);
                std::int64_t hi = std::min<std::int64_t>(len - 1, t + cfg.window);
                for (std::int64_t j = lo; j <= hi; ++j) {
                    if (j == t) continue;
                    std::int32_t context = sent[static_cast<std::size_t>(j)];
                    double progress = static_cast<double>(pair_counter) / static_cast<double>(total_pairs);
                    double lr = std::max(cfg.min_lr, cfg.initial_lr - (cfg.initial_lr - cfg.min_lr) * progress);
                    ++pair_counter;

                    auto v = in.row(center);
                    std::fill(center_delta.begin(), center_delta.end(), 0.0);
                    // positive example
                    {
                        auto u = out_row(context);
                        double f = detail::sigmoid(detail::dot(v, u));
                        double g = (f - 1.0) * lr;
                        for (std::int32_t i = 0; i < cfg.dim; ++i) {
                            center_delta[static_cast<std::size_t>(i)] += g * u[static_cast<std::size_t>(i)];
                            u[static_cast<std::size_t>(i)] -= g * v[static_cast<std::size_t>(i)];
                        }
                    }
                    // negative examples; resample collisions with the context word
                    for (int n = 0; n < cfg.negatives_per_positive; ++n) {
                        std::int32_t neg = table.sample(rng);
                        for (int attempt = 0; neg == context && attempt < 100; ++attempt) {
                            neg = table.sample(rng);
                        }
                        if (neg == context) continue;
                        auto u = out_row(neg);
                        double f = detail::sigmoid(detail::dot(v, u));
                        double g = f * lr;
                        for (std::int32_t i = 0; i < cfg.dim; ++i) {
                            center_delta[static_cast<std::size_t>(i)] += g * u[static_cast<std::size_t>(i)];
                            u[static_cast<std::size_t>(i)] -= g * v[static_cast<std::size_t>(i)];
                        }
                    }
                    for (std::int32_t i = 0; i < cfg.dim; ++i) {
                        v[static_cast<std::size_t>(i)] -= center_delta[static_cast<std::size_t>(i)];
                    }
                }
            }
        }
    }

    for (double x : in.data) {
        if (!std::isfinite(x)) {
            throw NumericError("non-finite embedding after word2vec training");
        }
    }
    return in;
}

namespace detail {
inline double cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}
}  // namespace detail

// Top-k non-special words by cosine similarity, descending; ties broken by
// ascending index; the query word itself is excluded.
inline std::vector<std::pair<std::string, double>> nearest_neighbors(const EmbeddingMatrix& m,
                                                                     const std::string& word, int k,
                                                                     const Vocabulary& vocab) {
    if (k < 1) {
        throw UsageError("k must be >= 1");
    }
    auto it = vocab.word_to_index.find(word);
    if (it == vocab.word_to_index.end()) {
        throw DataError("word '" + word + "' not in vocabulary; neighbor queries do not fall back to " +
                        std::string(Vocabulary::kUnkWord));
    }
    std::int32_t query = it->second;
    auto qv = embed_lookup(m, query);
    std::vector<std::pair<std::int32_t, double>> scored;
    for (std::int32_t w = 2; w < m.vocab_size; ++w) {
        if (w == query) continue;
        scored.emplace_back(w, detail::cosine(qv, m.row(w)));
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t i = 0; i < scored.size() && i < static_cast<std::size_t>(k); ++i) {
        out.emplace_back(vocab.word_at(scored[i].first), scored[i].second);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding files
// ---------------------------------------------------------------------------

// Text format: header "dim=<d> vocab=<V>", then "index<TAB>v v v ..." per row
// with shortest round-trip decimals.
inline void save_embedding_text(const EmbeddingMatrix& m, const std::string& path) {
    std::ofstream outf(path, std::ios::binary);
    if (!outf) {
        throw DataError("cannot write embedding file: " + path);
    }
    outf << "dim=" << m.dim << " vocab=" << m.vocab_size << '\n';
    for (std::int32_t w = 0; w < m.vocab_size; ++w) {
        outf << w;
        auto row = m.row(w);
        for (std::size_t i = 0; i < row.size(); ++i) {
            outf << (i == 0 ? '\t' : ' ') << detail::format_double(row[i]);
        }
        outf << '\n';
    }
}

inline EmbeddingMatrix load_embedding_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open embedding file: " + path);
    }
    std::string header;
    if (!std::getline(in, header)) {
        throw DataError("truncated embedding file: " + path);
    }
    std::int32_t dim = 0, vocab = 0;
    if (std::sscanf(header.c_str(), "dim=%d vocab=%d", &dim, &vocab) != 2 || dim < 1 || vocab < 1) {
        throw DataError("bad embedding header in " + path + ": '" + header + "'");
    }
    EmbeddingMatrix m;
    m.dim = dim;
    m.vocab_size = vocab;
    m.data.assign(static_cast<std::size_t>(dim) * static_cast<std::size_t>(vocab), 0.0);
    std::string line;
    for (std::int32_t w = 0; w < vocab; ++w) {
        if (!std::getline(in, line)) {
            throw DataError("truncated embedding file: " + path);
        }
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError("bad embedding row " + std::to_string(w) + " in " + path);
        }
        if (detail::parse_int(line.substr(0, tab), "embedding row index") != w) {
            throw DataError("out-of-order embedding row in " + path);
        }
        std::string_view rest = std::string_view(line).substr(tab + 1);
        auto row = m.row(w);
        for (std::int32_t i = 0; i < dim; ++i) {
            std::size_t space = rest.find(' ');
            std::string_view field = space == std::string_view::npos ? rest : rest.substr(0, space);
            if (field.empty()) {
                throw DataError("short embedding row " + std::to_string(w) + " in " + path);
            }
            row[static_cast<std::size_t>(i)] = detail::parse_double(field, "embedding value");
            rest = space == std::string_view::npos ? std::string_view{} : rest.substr(space + 1);
        }
        if (!rest.empty()) {
            throw DataError("trailing data in embedding row " + std::to_string(w) + " in " + path);
        }
    }
    return m;
}

inline constexpr char kEmbeddingMagic[4] = {'W', '2', 'V', '1'};

// Binary format: "W2V1", u32 vocab, u32 dim, then row-major little-endian
// IEEE-754 doubles.
inline void save_embedding_binary(const EmbeddingMatrix& m, const std::string& path) {
    std::vector<std::uint8_t> buf;
    buf.reserve(12 + m.data.size() * 8);
    detail::put_bytes(buf, kEmbeddingMagic, 4);
    detail::put_u32le(buf, static_cast<std::uint32_t>(m.vocab_size));
    detail::put_u32le(buf, static_cast<std::uint32_t>(m.dim));
    for (double x : m.data) {
        detail::put_f64le(buf, x);
    }
    std::ofstream outf(path, std::ios::binary);
    if (!outf || !outf.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
        throw DataError("cannot write embedding file: " + path);
    }
}

inline std::vector<std::uint8_t> read_all_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open file: " + path);
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline EmbeddingMatrix load_embedding_binary(const std::string& path) {
    auto bytes = read_all_bytes(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kEmbeddingMagic, 4) != 0) {
        throw DataError("bad magic in embedding file: " + path);
    }
    detail::ByteReader r{bytes, 4};
    std::uint32_t vocab = r.get_u32le();
    std::uint32_t dim = r.get_u32le();
    if (vocab == 0 || dim == 0) {
        throw DataError("bad dimensions in embedding file: " + path);
    }
    std::size_t need = static_cast<std::size_t>(vocab) * dim * 8;
    if (r.remaining() != need) {
        throw DataError("truncated embedding file: " + path);
    }
    EmbeddingMatrix m;
    m.vocab_size = static_cast<std::int32_t>(vocab);
    m.dim = static_cast<std::int32_t>(dim);
    m.data.resize(static_cast<std::size_t>(vocab) * dim);
    for (double& x : m.data) {
        x = r.get_f64le();
    }
    return m;
}

// Accepts either the binary or the text embedding format.
inline EmbeddingMatrix load_embedding_any(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open embedding file: " + path);
    }
    char magic[4] = {0, 0, 0, 0};
    in.read(magic, 4);
    in.close();
    if (std::memcmp(magic, kEmbeddingMagic, 4) == 0) {
        return load_embedding_binary(path);
    }
    return load_embedding_text(path);
}

}  // namespace patchrec
