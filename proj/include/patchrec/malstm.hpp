#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "patchrec/corpus.hpp"
#include "patchrec/detail/bytes.hpp"
#include "patchrec/detail/numfmt.hpp"
#include "patchrec/detail/seeding.hpp"
#include "patchrec/embedding.hpp"
#include "patchrec/errors.hpp"

namespace patchrec {

inline constexpr std::int32_t kDefaultHiddenSize = 50;

// Dense row-major matrix. Weight rows are laid out per hidden unit so gate
// preactivations reduce to contiguous dot products.
struct Mat {
    std::int32_t rows = 0;
    std::int32_t cols = 0;
    std::vector<double> a;

    void init(std::int32_t r, std::int32_t c) {
        rows = r;
        cols = c;
        a.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0);
    }
    std::span<double> row(std::int32_t r) {
        return {a.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols),
                static_cast<std::size_t>(cols)};
    }
    std::span<const double> row(std::int32_t r) const {
        return {a.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols),
                static_cast<std::size_t>(cols)};
    }
};

// One shared parameter set; both the bug branch and the patch branch of the
// network read through these same weights.
struct LstmParams {
    std::int32_t input_size = 0;
    std::int32_t hidden_size = 0;
    Mat w_i, u_i;
    std::vector<double> b_i;
    Mat w_f, u_f;
    std::vector<double> b_f;
    Mat w_c, u_c;
    std::vector<double> b_c;
    Mat w_o, u_o;
    std::vector<double> b_o;

    void init(std::int32_t d_in, std::int32_t hidden) {
        input_size = d_in;
        hidden_size = hidden;
        for (Mat* w : {&w_i, &w_f, &w_c, &w_o}) w->init(hidden, d_in);
        for (Mat* u : {&u_i, &u_f, &u_c, &u_o}) u->init(hidden, hidden);
        for (auto* b : {&b_i, &b_f, &b_c, &b_o}) b->assign(static_cast<std::size_t>(hidden), 0.0);
    }

    // Serialization order: W_i,U_i,b_i, W_f,U_f,b_f, W_c,U_c,b_c, W_o,U_o,b_o.
    std::array<std::vector<double>*, 12> arrays() {
        return {&w_i.a, &u_i.a, &b_i, &w_f.a, &u_f.a, &b_f,
                &w_c.a, &u_c.a, &b_c, &w_o.a, &u_o.a, &b_o};
    }
    std::array<const std::vector<double>*, 12> arrays() const {
        return {&w_i.a, &u_i.a, &b_i, &w_f.a, &u_f.a, &b_f,
                &w_c.a, &u_c.a, &b_c, &w_o.a, &u_o.a, &b_o};
    }
};

// Weights uniform in (-0.05, 0.05); forget-gate bias 1, other biases 0.
inline LstmParams init_lstm_params(std::int32_t input_size, std::int32_t hidden_size,
                                   detail::RandomSource& rng) {
    LstmParams p;
    p.init(input_size, hidden_size);
    for (Mat* m : {&p.w_i, &p.u_i, &p.w_f, &p.u_f, &p.w_c, &p.u_c, &p.w_o, &p.u_o}) {
        for (double& x : m->a) {
            x = rng.uniform_real(-0.05, 0.05);
        }
    }
    std::fill(p.b_f.begin(), p.b_f.end(), 1.0);
    return p;
}

struct LstmState {
    std::vector<double> h;
    std::vector<double> c;
};

struct ModelParams {
    LstmParams lstm;
    EmbeddingMatrix embedding;
    bool embedding_trainable = false;
    double clamp_eps = 1e-7;
};

namespace detail {

inline double sigmoid_gate(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One cell step writing gate activations and the new state into spans. All
// forward paths (public step, sequence encoding, training unroll) go through
// here, so cached and direct scores agree to the last bit.
inline void lstm_step_core(const LstmParams& p, std::span<const double> x,
                           std::span<const double> h_prev, std::span<const double> c_prev,
                           std::span<double> gi, std::span<double> gf, std::span<double> gg,
                           std::span<double> go, std::span<double> c_new, std::span<double> h_new) {
    const std::int32_t hidden = p.hidden_size;
    for (std::int32_t j = 0; j < hidden; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        double ai = p.b_i[ju] + dot(p.w_i.row(j), x) + dot(p.u_i.row(j), h_prev);
        double af = p.b_f[ju] + dot(p.w_f.row(j), x) + dot(p.u_f.row(j), h_prev);
        double ag = p.b_c[ju] + dot(p.w_c.row(j), x) + dot(p.u_c.row(j), h_prev);
        double ao = p.b_o[ju] + dot(p.w_o.row(j), x) + dot(p.u_o.row(j), h_prev);
        double i = sigmoid_gate(ai);
        double f = sigmoid_gate(af);
        double g = std::tanh(ag);
        double o = sigmoid_gate(ao);
        double c = f * c_prev[ju] + i * g;
        gi[ju] = i;
        gf[ju] = f;
        gg[ju] = g;
        go[ju] = o;
        c_new[ju] = c;
        h_new[ju] = o * std::tanh(c);
    }
}

}  // namespace detail

// i = s(W_i x + U_i h + b_i), f = s(W_f x + U_f h + b_f),
// g = tanh(W_c x + U_c h + b_c), o = s(W_o x + U_o h + b_o),
// c' = f*c + i*g, h' = o*tanh(c').
inline LstmState lstm_step(const LstmParams& p, std::span<const double> x, const LstmState& s) {
    if (static_cast<std::int32_t>(x.size()) != p.input_size ||
        static_cast<std::int32_t>(s.h.size()) != p.hidden_size ||
        static_cast<std::int32_t>(s.c.size()) != p.hidden_size) {
        throw DataError("lstm_step dimension mismatch");
    }
    for (double v : x) {
        if (!std::isfinite(v)) throw NumericError("non-finite input to lstm_step");
    }
    for (std::size_t j = 0; j < s.h.size(); ++j) {
        if (!std::isfinite(s.h[j]) || !std::isfinite(s.c[j])) {
            throw NumericError("non-finite state in lstm_step");
        }
    }
    const auto hidden = static_cast<std::size_t>(p.hidden_size);
    LstmState next{std::vector<double>(hidden), std::vector<double>(hidden)};
    std::vector<double> gi(hidden), gf(hidden), gg(hidden), go(hidden);
    detail::lstm_step_core(p, x, s.h, s.c, gi, gf, gg, go, next.c, next.h);
    return next;
}

namespace detail {

// Per-step activations cached by the forward pass for backprop through time.
struct Unrolled {
    std::vector<std::int32_t> token_rows;  // embedding row used at each step
    std::vector<double> gi, gf, gg, go, c, h;  // steps x hidden, flattened
    std::int32_t steps = 0;
    std::int32_t hidden = 0;

    std::span<const double> step(const std::vector<double>& buf, std::int32_t t) const {
        return {buf.data() + static_cast<std::size_t>(t) * static_cast<std::size_t>(hidden),
                static_cast<std::size_t>(hidden)};
    }
    std::span<const double> final_h() const { return step(h, steps - 1); }
};

inline void forward_sequence(const ModelParams& m, const EncodedSeq& seq, bool mask_padding,
                             Unrolled& u) {
    if (seq.indices.empty()) {
        throw DataError("empty sequence");
    }
    const std::int32_t hidden = m.lstm.hidden_size;
    u.hidden = hidden;
    u.token_rows.clear();
    for (std::int32_t idx : seq.indices) {
        if (idx < 0 || idx >= m.embedding.vocab_size) {
            throw DataError("sequence index out of vocabulary range: " + std::to_string(idx));
        }
        if (mask_padding && idx == Vocabulary::kPadIndex) {
            continue;  // PAD positions are skipped
        }
        u.token_rows.push_back(idx);
    }
    u.steps = static_cast<std::int32_t>(u.token_rows.size());
    if (u.steps == 0) {
        throw DataError("all-pad sequence");
    }
    const std::size_t total = static_cast<std::size_t>(u.steps) * static_cast<std::size_t>(hidden);
    u.gi.resize(total);
    u.gf.resize(total);
    u.gg.resize(total);
    u.go.resize(total);
    u.c.resize(total);
    u.h.resize(total);

    static thread_local std::vector<double> zero_state;
    zero_state.assign(static_cast<std::size_t>(hidden), 0.0);
    std::span<const double> h_prev = zero_state;
    std::span<const double> c_prev = zero_state;
    for (std::int32_t t = 0; t < u.steps; ++t) {
        const std::size_t off = static_cast<std::size_t>(t) * static_cast<std::size_t>(hidden);
        auto x = m.embedding.row(u.token_rows[static_cast<std::size_t>(t)]);
        lstm_step_core(m.lstm, x, h_prev, c_prev,
                       {u.gi.data() + off, static_cast<std::size_t>(hidden)},
                       {u.gf.data() + off, static_cast<std::size_t>(hidden)},
                       {u.gg.data() + off, static_cast<std::size_t>(hidden)},
                       {u.go.data() + off, static_cast<std::size_t>(hidden)},
                       {u.c.data() + off, static_cast<std::size_t>(hidden)},
                       {u.h.data() + off, static_cast<std::size_t>(hidden)});
        h_prev = {u.h.data() + off, static_cast<std::size_t>(hidden)};
        c_prev = {u.c.data() + off, static_cast<std::size_t>(hidden)};
    }
}

}  // namespace detail

// Final hidden state after running the shared LSTM over the embedded tokens,
// starting from the zero state. PAD positions are skipped unless
// mask_padding is false, in which case pads are processed literally.
inline std::vector<double> encode_sequence(const ModelParams& m, const EncodedSeq& seq,
                                           bool mask_padding = true) {
    detail::Unrolled u;
    detail::forward_sequence(m, seq, mask_padding, u);
    auto h = u.final_h();
    return {h.begin(), h.end()};
}

// y = exp(-sum_k |a_k - b_k|), in (0, 1]; exactly 1 iff a == b.
inline double manhattan_similarity(std::span<const double> h_bug, std::span<const double> h_patch) {
    if (h_bug.size() != h_patch.size()) {
        throw DataError("manhattan_similarity dimension mismatch");
    }
    double dist = 0;
    for (std::size_t k = 0; k < h_bug.size(); ++k) {
        dist += std::abs(h_bug[k] - h_patch[k]);
    }
    return std::exp(-dist);
}

// Binary cross-entropy on the clamped score: with yc = clamp(y, eps, 1-eps),
// loss = -(label*ln(yc) + (1-label)*ln(1-yc)).
inline double pair_loss(double y, int label, double clamp_eps) {
    if (label != 0 && label != 1) {
        throw DataError("label must be 0 or 1, got " + std::to_string(label));
    }
    if (!(clamp_eps > 0 && clamp_eps < 0.5)) {
        throw UsageError("clamp_eps must be in (0, 0.5)");
    }
    double yc = std::clamp(y, clamp_eps, 1.0 - clamp_eps);
    return label == 1 ? -std::log(yc) : -std::log(1.0 - yc);
}

struct ModelGrads {
    LstmParams lstm;                 // same shapes as the parameters
    std::vector<double> embedding;   // vocab_size x dim, empty when frozen
};

struct GradientBatch {
    ModelGrads grads;
    double mean_loss = 0;
    std::vector<double> scores;  // raw y per pair, in batch order
};

namespace detail {

inline void axpy(std::span<double> y, double a, std::span<const double> x) {
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] += a * x[i];
    }
}

// Backprop through time for one unrolled branch; accumulates into the shared
// parameter gradients (and embedding rows when trainable).
inline void backward_sequence(const ModelParams& m, const Unrolled& u,
                              std::span<const double> dh_final, ModelGrads& acc) {
    const std::int32_t hidden = u.hidden;
    const auto hid = static_cast<std::size_t>(hidden);
    std::vector<double> dh(dh_final.begin(), dh_final.end());
    std::vector<double> dc(hid, 0.0);
    std::vector<double> da_i(hid), da_f(hid), da_g(hid), da_o(hid);
    std::vector<double> dh_prev(hid), dx(static_cast<std::size_t>(m.lstm.input_size));
    const bool train_embedding = !acc.embedding.empty();

    for (std::int32_t t = u.steps - 1; t >= 0; --t) {
        auto gi = u.step(u.gi, t);
        auto gf = u.step(u.gf, t);
        auto gg = u.step(u.gg, t);
        auto go = u.step(u.go, t);
        auto ct = u.step(u.c, t);
        std::span<const double> h_prev;
        std::span<const double> c_prev;
        static thread_local std::vector<double> zero_state;
        if (t == 0) {
            zero_state.assign(hid, 0.0);
            h_prev = zero_state;
            c_prev = zero_state;
        } else {
            h_prev = u.step(u.h, t - 1);
            c_prev = u.step(u.c, t - 1);
        }
        auto x = m.embedding.row(u.token_rows[static_cast<std::size_t>(t)]);

        for (std::size_t j = 0; j < hid; ++j) {
            double tc = std::tanh(ct[j]);
            double do_ = dh[j] * tc;
            da_o[j] = do_ * go[j] * (1.0 - go[j]);
            dc[j] += dh[j] * go[j] * (1.0 - tc * tc);
            double df = dc[j] * c_prev[j];
            da_f[j] = df * gf[j] * (1.0 - gf[j]);
            double di = dc[j] * gg[j];
            da_i[j] = di * gi[j] * (1.0 - gi[j]);
            double dg = dc[j] * gi[j];
            da_g[j] = dg * (1.0 - gg[j] * gg[j]);
        }

        std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
        if (train_embedding) {
            std::fill(dx.begin(), dx.end(), 0.0);
        }
        auto accumulate_gate = [&](const Mat& w, const Mat& uu, Mat& dw, Mat& du,
                                   std::vector<double>& db, std::span<const double> da) {
            for (std::int32_t j = 0; j < hidden; ++j) {
                const auto ju = static_cast<std::size_t>(j);
                double a = da[ju];
                if (a == 0.0) continue;
                axpy(dw.row(j), a, x);
                axpy(du.row(j), a, h_prev);
                db[ju] += a;
                axpy(dh_prev, a, uu.row(j));
                if (train_embedding) {
                    axpy(dx, a, w.row(j));
                }
            }
        };
        accumulate_gate(m.lstm.w_i, m.lstm.u_i, acc.lstm.w_i, acc.lstm.u_i, acc.lstm.b_i, da_i);
        accumulate_gate(m.lstm.w_f, m.lstm.u_f, acc.lstm.w_f, acc.lstm.u_f, acc.lstm.b_f, da_f);
        accumulate_gate(m.lstm.w_c, m.lstm.u_c, acc.lstm.w_c, acc.lstm.u_c, acc.lstm.b_c, da_g);
        accumulate_gate(m.lstm.w_o, m.lstm.u_o, acc.lstm.w_o, acc.lstm.u_o, acc.lstm.b_o, da_o);

        if (train_embedding) {
            std::int32_t row = u.token_rows[static_cast<std::size_t>(t)];
            if (row != Vocabulary::kPadIndex) {  // PAD embedding is never updated
                std::span<double> erow{acc.embedding.data() +
                                           static_cast<std::size_t>(row) * static_cast<std::size_t>(m.embedding.dim),
                                       static_cast<std::size_t>(m.embedding.dim)};
                axpy(erow, 1.0, dx);
            }
        }

        for (std::size_t j = 0; j < hid; ++j) {
            dc[j] *= gf[j];
        }
        dh = dh_prev;
    }
}

}  // namespace detail

// Mean-loss gradients over a batch. Both branches of each pair accumulate
// into the same shared parameters; pairs whose score falls in the clamp's
// flat region contribute zero gradient.
inline GradientBatch compute_gradients(const ModelParams& m, std::span<const LabeledPair> batch,
                                       double clamp_eps, bool mask_padding = true) {
    if (batch.empty()) {
        throw DataError("empty batch");
    }
    GradientBatch out;
    out.grads.lstm.init(m.lstm.input_size, m.lstm.hidden_size);
    if (m.embedding_trainable) {
        out.grads.embedding.assign(m.embedding.data.size(), 0.0);
    }
    out.scores.reserve(batch.size());

    detail::Unrolled bug_u, patch_u;
    const auto hid = static_cast<std::size_t>(m.lstm.hidden_size);
    std::vector<double> dh_bug(hid), dh_patch(hid);
    double loss_sum = 0;
    for (const auto& pair : batch) {
        detail::forward_sequence(m, pair.bug_seq, mask_padding, bug_u);
        detail::forward_sequence(m, pair.patch_seq, mask_padding, patch_u);
        auto hb = bug_u.final_h();
        auto hp = patch_u.final_h();
        double dist = 0;
        for (std::size_t k = 0; k < hid; ++k) {
            dist += std::abs(hb[k] - hp[k]);
        }
        double y = std::exp(-dist);
        out.scores.push_back(y);
        loss_sum += pair_loss(y, pair.label, clamp_eps);

        if (y < clamp_eps || y > 1.0 - clamp_eps) {
            continue;  // flat region of the clamp
        }
        // d(loss)/dy for the unclamped branch of the BCE
        double dldy = pair.label == 1 ? -1.0 / y : 1.0 / (1.0 - y);
        for (std::size_t k = 0; k < hid; ++k) {
            double diff = hb[k] - hp[k];
            double sgn = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
            double d = dldy * (-y) * sgn;
            dh_bug[k] = d;
            dh_patch[k] = -d;
        }
        detail::backward_sequence(m, bug_u, dh_bug, out.grads);
        detail::backward_sequence(m, patch_u, dh_patch, out.grads);
    }

    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto* arr : out.grads.lstm.arrays()) {
        for (double& g : *arr) {
            g *= inv;
        }
    }
    for (double& g : out.grads.embedding) {
        g *= inv;
    }
    out.mean_loss = loss_sum * inv;
    return out;
}

// ---------------------------------------------------------------------------
// Adadelta
// ---------------------------------------------------------------------------

struct AdadeltaState {
    LstmParams eg2;   // E[g^2]
    LstmParams edx2;  // E[dx^2]
    std::vector<double> emb_eg2, emb_edx2;
};

inline AdadeltaState make_adadelta_state(const ModelParams& m) {
    AdadeltaState s;
    s.eg2.init(m.lstm.input_size, m.lstm.hidden_size);
    s.edx2.init(m.lstm.input_size, m.lstm.hidden_size);
    if (m.embedding_trainable) {
        s.emb_eg2.assign(m.embedding.data.size(), 0.0);
        s.emb_edx2.assign(m.embedding.data.size(), 0.0);
    }
    return s;
}

// Per parameter: E[g2] <- rho E[g2] + (1-rho) g2;
// dx = -sqrt(E[dx2]+eps)/sqrt(E[g2]+eps) * g;
// E[dx2] <- rho E[dx2] + (1-rho) dx2; x <- x + dx.
// Global L2 clipping to clip_norm is applied to the gradients first.
inline void adadelta_update(ModelParams& m, const ModelGrads& grads, AdadeltaState& state,
                            double rho, double eps, double clip_norm) {
    if (!(rho > 0 && rho < 1) || !(eps > 0)) {
        throw UsageError("adadelta needs 0 < rho < 1 and eps > 0");
    }
    double norm_sq = 0;
    for (const auto* arr : grads.lstm.arrays()) {
        for (double g : *arr) {
            norm_sq += g * g;
        }
    }
    for (double g : grads.embedding) {
        norm_sq += g * g;
    }
    double scale = 1.0;
    if (clip_norm > 0) {
        double norm = std::sqrt(norm_sq);
        if (norm > clip_norm) {
            scale = clip_norm / norm;
        }
    }

    auto update_array = [&](std::span<double> x, std::span<const double> g_raw,
                            std::span<double> eg2, std::span<double> edx2) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            double g = g_raw[i] * scale;
            eg2[i] = rho * eg2[i] + (1.0 - rho) * g * g;
            double dx = -std::sqrt(edx2[i] + eps) / std::sqrt(eg2[i] + eps) * g;
            edx2[i] = rho * edx2[i] + (1.0 - rho) * dx * dx;
            x[i] += dx;
        }
    };

    auto params = m.lstm.arrays();
    auto gs = grads.lstm.arrays();
    auto eg2s = state.eg2.arrays();
    auto edx2s = state.edx2.arrays();
    for (std::size_t k = 0; k < params.size(); ++k) {
        update_array(*params[k], *gs[k], *eg2s[k], *edx2s[k]);
    }
    if (m.embedding_trainable && !grads.embedding.empty()) {
        // PAD row stays zero: its gradients are zero by construction, and an
        // all-zero gradient makes the update a no-op on the parameter.
        update_array(m.embedding.data, grads.embedding, state.emb_eg2, state.emb_edx2);
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingConfig {
    int max_epochs = 200;
    int batch_size = 64;
    double adadelta_rho = 0.95;
    double adadelta_eps = 1e-6;
    int early_stop_patience = 10;
    double grad_clip_norm = 5.0;
    double prob_clamp_eps = 1e-7;
    std::int32_t hidden_size = kDefaultHiddenSize;
    bool embedding_trainable = false;
    bool mask_padding = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (max_epochs < 1) throw UsageError("max_epochs must be >= 1");
        if (batch_size < 1) throw UsageError("batch_size must be >= 1");
        if (!(adadelta_rho > 0 && adadelta_rho < 1)) throw UsageError("adadelta_rho must be in (0, 1)");
        if (!(adadelta_eps > 0)) throw UsageError("adadelta_eps must be > 0");
        if (early_stop_patience < 1) throw UsageError("early_stop_patience must be >= 1");
        if (!(prob_clamp_eps > 0 && prob_clamp_eps < 0.5)) throw UsageError("prob_clamp_eps must be in (0, 0.5)");
        if (hidden_size < 1) throw UsageError("hidden_size must be >= 1");
    }
};

struct TrainingHistory {
    std::vector<double> train_loss;
    std::vector<double> train_accuracy;
    std::vector<double> val_loss;
    std::vector<double> val_accuracy;
    int best_epoch = -1;  // 0-based index into the vectors above

    std::size_t epochs_run() const { return train_loss.size(); }
};

struct DatasetMetrics {
    double loss = 0;
    double accuracy = 0;
};

inline double score_pair(const ModelParams& m, const LabeledPair& pair, bool mask_padding = true) {
    auto hb = encode_sequence(m, pair.bug_seq, mask_padding);
    auto hp = encode_sequence(m, pair.patch_seq, mask_padding);
    return manhattan_similarity(hb, hp);
}

inline DatasetMetrics evaluate_dataset(const ModelParams& m, std::span<const LabeledPair> pairs,
                                       double clamp_eps, double threshold = 0.5,
                                       bool mask_padding = true) {
    if (pairs.empty()) {
        throw DataError("empty dataset");
    }
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const auto& pair : pairs) {
        double y = score_pair(m, pair, mask_padding);
        loss_sum += pair_loss(y, pair.label, clamp_eps);
        if ((y >= threshold) == (pair.label == 1)) {
            ++correct;
        }
    }
    return {loss_sum / static_cast<double>(pairs.size()),
            static_cast<double>(correct) / static_cast<double>(pairs.size())};
}

// Fraction of pairs where (y >= threshold) agrees with the label; counts
// both true positives and true negatives.
inline double classification_accuracy(const ModelParams& m, std::span<const LabeledPair> pairs,
                                      double threshold = 0.5, bool mask_padding = true) {
    return evaluate_dataset(m, pairs, 1e-7, threshold, mask_padding).accuracy;
}

// Mini-batch Adadelta training with early stopping on validation loss.
// Returns the parameters from the best validation-loss epoch and the
// per-epoch history. Deterministic for a fixed config.
inline std::pair<ModelParams, TrainingHistory> train_model(const DatasetSplits& splits,
                                                           const EmbeddingMatrix& emb,
                                                           const TrainingConfig& cfg) {
    cfg.validate();
    if (splits.train.empty() || splits.validation.empty()) {
        throw DataError("train and validation splits must be non-empty");
    }

    ModelParams model;
    detail::RandomSource init_rng(detail::derive_seed(cfg.seed, 0x696e6974 /*"init"*/));
    model.lstm = init_lstm_params(emb.dim, cfg.hidden_size, init_rng);
    model.embedding = emb;
    model.embedding_trainable = cfg.embedding_trainable;
    model.clamp_eps = cfg.prob_clamp_eps;

    AdadeltaState opt = make_adadelta_state(model);
    TrainingHistory history;
    ModelParams best_model = model;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int epochs_since_improvement = 0;

    std::vector<std::size_t> order(splits.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<LabeledPair> batch;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        detail::RandomSource shuffle_rng(detail::derive_seed(cfg.seed, 1000003ull + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double loss_sum = 0;
        std::size_t correct = 0;
        const std::size_t n = order.size();
        for (std::size_t start = 0, batch_index = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
            std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            batch.clear();
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(splits.train[order[i]]);
            }
            GradientBatch gb = compute_gradients(model, batch, cfg.prob_clamp_eps, cfg.mask_padding);
            if (!std::isfinite(gb.mean_loss)) {
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch + 1) +
                                   ", batch " + std::to_string(batch_index + 1));
            }
            adadelta_update(model, gb.grads, opt, cfg.adadelta_rho, cfg.adadelta_eps, cfg.grad_clip_norm);
            loss_sum += gb.mean_loss * static_cast<double>(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i) {
                if ((gb.scores[i] >= 0.5) == (batch[i].label == 1)) {
                    ++correct;
                }
            }
        }
        history.train_loss.push_back(loss_sum / static_cast<double>(n));
        history.train_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));

        DatasetMetrics val = evaluate_dataset(model, splits.validation, cfg.prob_clamp_eps, 0.5, cfg.mask_padding);
        if (!std::isfinite(val.loss)) {
            throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch + 1));
        }
        history.val_loss.push_back(val.loss);
        history.val_accuracy.push_back(val.accuracy);

        if (val.loss < best_val_loss) {
            best_val_loss = val.loss;
            history.best_epoch = epoch;
            best_model = model;
            epochs_since_improvement = 0;
        } else {
            ++epochs_since_improvement;
            if (epochs_since_improvement >= cfg.early_stop_patience) {
                break;
            }
        }
    }
    return {std::move(best_model), std::move(history)};
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[8] = {'M', 'A', 'L', 'S', 'T', 'M', '1', '\0'};

// Payload = length-prefixed metadata lines (H, d_in, vocab_size,
// embedding_trainable, clamp_eps) followed by the parameter arrays and the
// embedding matrix as little-endian doubles. The model file is this payload
// wrapped in a magic header and a trailing CRC32.
inline std::vector<std::uint8_t> model_payload(const ModelParams& m) {
    std::vector<std::uint8_t> buf;
    std::vector<std::string> lines = {
        "H=" + std::to_string(m.lstm.hidden_size),
        "d_in=" + std::to_string(m.lstm.input_size),
        "vocab_size=" + std::to_string(m.embedding.vocab_size),
        std::string("embedding_trainable=") + (m.embedding_trainable ? "1" : "0"),
        "clamp_eps=" + detail::format_double(m.clamp_eps),
    };
    detail::put_u32le(buf, static_cast<std::uint32_t>(lines.size()));
    for (const auto& line : lines) {
        detail::put_u32le(buf, static_cast<std::uint32_t>(line.size()));
        detail::put_bytes(buf, line.data(), line.size());
    }
    for (const auto* arr : m.lstm.arrays()) {
        for (double x : *arr) {
            detail::put_f64le(buf, x);
        }
    }
    for (double x : m.embedding.data) {
        detail::put_f64le(buf, x);
    }
    return buf;
}

inline void save_model(const ModelParams& m, const std::string& path) {
    std::vector<std::uint8_t> payload = model_payload(m);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write model file: " + path);
    }
    out.write(kModelMagic, sizeof(kModelMagic));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    std::vector<std::uint8_t> crc;
    detail::put_u32le(crc, detail::crc32(payload));
    out.write(reinterpret_cast<const char*>(crc.data()), static_cast<std::streamsize>(crc.size()));
    if (!out) {
        throw DataError("cannot write model file: " + path);
    }
}

inline ModelParams load_model(const std::string& path) {
    auto bytes = read_all_bytes(path);
    if (bytes.size() < sizeof(kModelMagic) + 4) {
        throw DataError("truncated model file: " + path);
    }
    if (std::memcmp(bytes.data(), kModelMagic, sizeof(kModelMagic)) != 0) {
        throw DataError("bad magic in model file: " + path);
    }
    std::span<const std::uint8_t> payload{bytes.data() + sizeof(kModelMagic),
                                          bytes.size() - sizeof(kModelMagic) - 4};
    detail::ByteReader crc_r{bytes, bytes.size() - 4};
    if (crc_r.get_u32le() != detail::crc32(payload)) {
        throw DataError("model file checksum mismatch: " + path);
    }

    detail::ByteReader r{payload, 0};
    auto need = [&](std::size_t n) {
        if (r.remaining() < n) {
            throw DataError("truncated model file: " + path);
        }
    };
    need(4);
    std::uint32_t line_count = r.get_u32le();
    std::int64_t hidden = -1, d_in = -1, vocab = -1;
    int trainable = -1;
    double clamp_eps = -1;
    for (std::uint32_t i = 0; i < line_count; ++i) {
        need(4);
        std::uint32_t len = r.get_u32le();
        need(len);
        std::string line = r.get_string(len);
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw DataError("bad model metadata line: " + line);
        }
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        if (key == "H") {
            hidden = detail::parse_int(value, key);
        } else if (key == "d_in") {
            d_in = detail::parse_int(value, key);
        } else if (key == "vocab_size") {
            vocab = detail::parse_int(value, key);
        } else if (key == "embedding_trainable") {
            trainable = static_cast<int>(detail::parse_int(value, key));
        } else if (key == "clamp_eps") {
            clamp_eps = detail::parse_double(value, key);
        } else {
            throw DataError("unexpected model metadata key: " + key);
        }
    }
    if (hidden < 1 || d_in < 1 || vocab < 1 || trainable < 0 || trainable > 1 ||
        !(clamp_eps > 0 && clamp_eps < 0.5)) {
        throw DataError("model file dimension inconsistency: " + path);
    }

    ModelParams m;
    m.lstm.init(static_cast<std::int32_t>(d_in), static_cast<std::int32_t>(hidden));
    m.embedding.vocab_size = static_cast<std::int32_t>(vocab);
    m.embedding.dim = static_cast<std::int32_t>(d_in);
    m.embedding.data.resize(static_cast<std::size_t>(vocab) * static_cast<std::size_t>(d_in));
    m.embedding_trainable = trainable == 1;
    m.clamp_eps = clamp_eps;

    std::size_t total_doubles = m.embedding.data.size();
    for (const auto* arr : m.lstm.arrays()) {
        total_doubles += arr->size();
    }
    if (r.remaining() != total_doubles * 8) {
        throw DataError("model file dimension inconsistency: " + path);
    }
    for (auto* arr : m.lstm.arrays()) {
        for (double& x : *arr) {
            x = r.get_f64le();
        }
    }
    for (double& x : m.embedding.data) {
        x = r.get_f64le();
    }
    return m;
}

}  // namespace patchrec
