#pragma once

// Parameters and forward computation of the recommender: per-digit token
// embeddings, the attentive token merger (ATM), composite step blocks with
// an intent token, the step-wise causal decoder and the subspace heads.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "acerec/autograd.hpp"
#include "acerec/error.hpp"
#include "acerec/opq.hpp"
#include "acerec/rng.hpp"

namespace acerec {

enum class Merger { Attentive, MeanPool };

inline std::string to_string(Merger m) { return m == Merger::Attentive ? "atm" : "mean"; }

inline Merger merger_from_string(const std::string& s) {
    if (s == "atm") return Merger::Attentive;
    if (s == "mean") return Merger::MeanPool;
    throw ConfigError("unknown merger '" + s + "' (expected atm or mean)");
}

struct ModelConfig {
    std::size_t d = 448;
    std::size_t m = 32;
    std::size_t k = 4;
    std::size_t M = 256;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_dim = 1024;
    std::size_t max_steps = 50;
    double gamma = 0.03;   // MTP temperature
    double tau = 0.07;     // ISA temperature
    double beta = 0.02;    // popularity debias strength
    double lambda = 0.01;  // ISA weight
    bool tie_embeddings = true;
    bool use_isa = true;
    bool isa_final_only = false;
    Merger merger = Merger::Attentive;

    double compression_ratio() const { return double(m) / double(k); }

    void validate() const {
        if (d == 0 || m == 0 || k == 0 || M == 0 || n_layers == 0 || n_heads == 0 || ffn_dim == 0 || max_steps == 0)
            throw ConfigError("model dimensions must be positive");
        if (k >= m) throw ConfigError("latent count k must be smaller than digit count m");
        if (d % n_heads != 0) throw ConfigError("d must be divisible by n_heads");
        if (M > 65536) throw ConfigError("M must be <= 65536");
        if (!(gamma > 0.0) || !(tau > 0.0)) throw ConfigError("temperatures gamma and tau must be positive");
        if (beta < 0.0 || lambda < 0.0) throw ConfigError("beta and lambda must be non-negative");
        if (merger == Merger::MeanPool && m % k != 0) throw ConfigError("mean-pool merger needs m divisible by k");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"d", c.d},
            {"m", c.m},
            {"k", c.k},
            {"M", c.M},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"ffn_dim", c.ffn_dim},
            {"max_steps", c.max_steps},
            {"gamma", c.gamma},
            {"tau", c.tau},
            {"beta", c.beta},
            {"lambda", c.lambda},
            {"tie_embeddings", c.tie_embeddings},
            {"use_isa", c.use_isa},
            {"isa_final_only", c.isa_final_only},
            {"merger", to_string(c.merger)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d = j.value("d", c.d);
    c.m = j.value("m", c.m);
    c.k = j.value("k", c.k);
    c.M = j.value("M", c.M);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.gamma = j.value("gamma", c.gamma);
    c.tau = j.value("tau", c.tau);
    c.beta = j.value("beta", c.beta);
    c.lambda = j.value("lambda", c.lambda);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.use_isa = j.value("use_isa", c.use_isa);
    c.isa_final_only = j.value("isa_final_only", c.isa_final_only);
    c.merger = merger_from_string(j.value("merger", to_string(c.merger)));
    return c;
}

template <typename T>
struct DecoderLayer {
    ag::Tensor<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    ag::Tensor<T> ln2_g, ln2_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <typename T>
struct Model {
    ModelConfig config;

    ag::Tensor<T> token_table;  // [m*M x d], row j*M + v is codeword v of digit j
    ag::Tensor<T> out_table;    // untied codeword embeddings; undefined when tied
    ag::Tensor<T> digit_pos;    // [m x d]
    ag::Tensor<T> step_pos;     // [max_steps x d]
    // summary f_s: mean followed by a residual two-layer MLP
    ag::Tensor<T> fs_w1, fs_b1, fs_w2, fs_b2;
    // query projector f_q: d -> k*d
    ag::Tensor<T> fq_w, fq_b;
    // cross-attention f_attn
    ag::Tensor<T> atm_wq, atm_bq, atm_wk, atm_bk, atm_wv, atm_bv, atm_wo, atm_bo;
    // f_out: residual MLP + layer norm
    ag::Tensor<T> fout_w1, fout_b1, fout_w2, fout_b2, fout_ln_g, fout_ln_b;
    std::vector<DecoderLayer<T>> layers;
    ag::Tensor<T> final_ln_g, final_ln_b;
    ag::Tensor<T> heads_w;  // [d x m*d], column block j is head j
    ag::Tensor<T> intent_bias;

    const ag::Tensor<T>& codeword_table() const { return config.tie_embeddings ? token_table : out_table; }

    // Every learnable tensor with a stable name, in checkpoint order.
    std::vector<std::pair<std::string, ag::Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, ag::Tensor<T>*>> out{
            {"token_table", &token_table}, {"digit_pos", &digit_pos}, {"step_pos", &step_pos},
            {"fs.w1", &fs_w1},           {"fs.b1", &fs_b1},         {"fs.w2", &fs_w2},
            {"fs.b2", &fs_b2},           {"fq.w", &fq_w},           {"fq.b", &fq_b},
            {"atm.wq", &atm_wq},         {"atm.bq", &atm_bq},       {"atm.wk", &atm_wk},
            {"atm.bk", &atm_bk},         {"atm.wv", &atm_wv},       {"atm.bv", &atm_bv},
            {"atm.wo", &atm_wo},         {"atm.bo", &atm_bo},       {"fout.w1", &fout_w1},
            {"fout.b1", &fout_b1},       {"fout.w2", &fout_w2},     {"fout.b2", &fout_b2},
            {"fout.ln_g", &fout_ln_g},   {"fout.ln_b", &fout_ln_b}};
        if (!config.tie_embeddings) out.insert(out.begin() + 1, {"out_table", &out_table});
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& L = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            for (auto [n, t] : std::initializer_list<std::pair<const char*, ag::Tensor<T>*>>{
                     {"ln1_g", &L.ln1_g}, {"ln1_b", &L.ln1_b}, {"wq", &L.wq},         {"bq", &L.bq},
                     {"wk", &L.wk},       {"bk", &L.bk},       {"wv", &L.wv},         {"bv", &L.bv},
                     {"wo", &L.wo},       {"bo", &L.bo},       {"ln2_g", &L.ln2_g},   {"ln2_b", &L.ln2_b},
                     {"ffn_w1", &L.ffn_w1}, {"ffn_b1", &L.ffn_b1}, {"ffn_w2", &L.ffn_w2}, {"ffn_b2", &L.ffn_b2}})
                out.emplace_back(p + n, t);
        }
        out.emplace_back("final_ln_g", &final_ln_g);
        out.emplace_back("final_ln_b", &final_ln_b);
        out.emplace_back("heads.w", &heads_w);
        out.emplace_back("intent_bias", &intent_bias);
        return out;
    }

    std::vector<std::pair<std::string, const ag::Tensor<T>*>> named_parameters() const {
        std::vector<std::pair<std::string, const ag::Tensor<T>*>> out;
        for (auto& [n, t] : const_cast<Model*>(this)->named_parameters()) out.emplace_back(n, t);
        return out;
    }

    void zero_grad() {
        for (auto& [n, t] : named_parameters()) t->zero_grad();
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t->size();
        return n;
    }
};

namespace detail {

template <typename T>
ag::Tensor<T> normal_param(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    std::vector<T> v(rows * cols);
    for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
    return ag::Tensor<T>::from(rows, cols, std::move(v), true);
}

template <typename T>
ag::Tensor<T> const_param(std::size_t rows, std::size_t cols, T value) {
    return ag::Tensor<T>::from(rows, cols, std::vector<T>(rows * cols, value), true);
}

}  // namespace detail

template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Model<T> p;
    p.config = cfg;
    const std::size_t d = cfg.d;
    const double emb = 1.0 / std::sqrt(double(d));
    const double lin = 1.0 / std::sqrt(double(d));
    auto W = [&](std::size_t in, std::size_t out) { return detail::normal_param<T>(rng, in, out, 1.0 / std::sqrt(double(in))); };
    auto B = [&](std::size_t n) { return detail::const_param<T>(1, n, T(0)); };
    auto G = [&](std::size_t n) { return detail::const_param<T>(1, n, T(1)); };

    p.token_table = detail::normal_param<T>(rng, cfg.m * cfg.M, d, emb);
    if (!cfg.tie_embeddings) p.out_table = detail::normal_param<T>(rng, cfg.m * cfg.M, d, emb);
    p.digit_pos = detail::normal_param<T>(rng, cfg.m, d, emb);
    p.step_pos = detail::normal_param<T>(rng, cfg.max_steps, d, emb);
    p.fs_w1 = W(d, d);
    p.fs_b1 = B(d);
    p.fs_w2 = W(d, d);
    p.fs_b2 = B(d);
    p.fq_w = W(d, cfg.k * d);
    p.fq_b = B(cfg.k * d);
    p.atm_wq = W(d, d);
    p.atm_bq = B(d);
    p.atm_wk = W(d, d);
    p.atm_bk = B(d);
    p.atm_wv = W(d, d);
    p.atm_bv = B(d);
    p.atm_wo = W(d, d);
    p.atm_bo = B(d);
    p.fout_w1 = W(d, d);
    p.fout_b1 = B(d);
    p.fout_w2 = W(d, d);
    p.fout_b2 = B(d);
    p.fout_ln_g = G(d);
    p.fout_ln_b = B(d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        DecoderLayer<T> L;
        L.ln1_g = G(d);
        L.ln1_b = B(d);
        L.wq = W(d, d);
        L.bq = B(d);
        L.wk = W(d, d);
        L.bk = B(d);
        L.wv = W(d, d);
        L.bv = B(d);
        L.wo = W(d, d);
        L.bo = B(d);
        L.ln2_g = G(d);
        L.ln2_b = B(d);
        L.ffn_w1 = W(d, cfg.ffn_dim);
        L.ffn_b1 = B(cfg.ffn_dim);
        L.ffn_w2 = W(cfg.ffn_dim, d);
        L.ffn_b2 = B(d);
        p.layers.push_back(std::move(L));
    }
    p.final_ln_g = G(d);
    p.final_ln_b = B(d);
    p.heads_w = detail::normal_param<T>(rng, d, cfg.m * d, lin);
    p.intent_bias = B(d);
    return p;
}

// Row j = token_tables[j][codes[j]] for every item in `codes` (n*m entries).
template <typename T>
ag::Tensor<T> embed_semantic_id(const Model<T>& model, std::span<const std::uint16_t> codes) {
    const auto& cfg = model.config;
    if (codes.size() % cfg.m != 0) throw ShapeError("embed_semantic_id: code count not a multiple of m");
    std::vector<std::uint32_t> idx(codes.size());
    for (std::size_t r = 0; r < codes.size(); ++r) {
        if (codes[r] >= cfg.M) throw ShapeError("embed_semantic_id: code " + std::to_string(codes[r]) + " out of range");
        idx[r] = static_cast<std::uint32_t>((r % cfg.m) * cfg.M + codes[r]);
    }
    return ag::gather_rows(model.token_table, std::move(idx));
}

// s_i = mean(E_i) + MLP(mean(E_i)) for each of the n items in E [n*m x d].
template <typename T>
ag::Tensor<T> summarize_item(const Model<T>& model, const ag::Tensor<T>& e) {
    const auto mean = ag::group_mean(e, model.config.m);
    const auto hidden = ag::gelu(ag::linear(mean, model.fs_w1, model.fs_b1));
    return ag::add(mean, ag::linear(hidden, model.fs_w2, model.fs_b2));
}

template <typename T>
struct AtmOutput {
    ag::Tensor<T> latents;      // Z: [n*k x d]
    ag::Tensor<T> attn_output;  // input to f_out: [n*k x d]
    // per item i: offsets[i] + (head * k + latent) * m + digit; empty for mean-pool
    std::shared_ptr<const std::vector<T>> weights;
    std::vector<std::size_t> offsets;
};

// Compresses each item's m token embeddings into k latents. For the
// mean-pool ablation the cross-attention is replaced by chunk means.
template <typename T>
AtmOutput<T> atm_merge(const Model<T>& model, const ag::Tensor<T>& e, const ag::Tensor<T>& s) {
    const auto& cfg = model.config;
    const std::size_t n = s.rows(), m = cfg.m, k = cfg.k, d = cfg.d;
    if (e.rows() != n * m || e.cols() != d) throw ShapeError("atm_merge: E must be [n*m x d]");

    std::vector<std::uint32_t> pos(n * m);
    for (std::size_t r = 0; r < pos.size(); ++r) pos[r] = static_cast<std::uint32_t>(r % m);
    const auto e_pos = ag::add(e, ag::gather_rows(model.digit_pos, std::move(pos)));

    AtmOutput<T> out;
    if (cfg.merger == Merger::Attentive) {
        const auto queries = ag::reshape(ag::linear(s, model.fq_w, model.fq_b), n * k, d);
        const auto q = ag::linear(queries, model.atm_wq, model.atm_bq);
        const auto kk = ag::linear(e_pos, model.atm_wk, model.atm_bk);
        const auto v = ag::linear(e_pos, model.atm_wv, model.atm_bv);
        auto segs = std::make_shared<std::vector<ag::AttnSegment>>(n);
        for (std::size_t i = 0; i < n; ++i) (*segs)[i] = {i * k, k, i * m, m, nullptr};
        auto att = ag::attention(q, kk, v, cfg.n_heads, segs);
        out.attn_output = ag::linear(att.out, model.atm_wo, model.atm_bo);
        out.weights = att.probs;
        out.offsets = std::move(att.offsets);
    } else {
        out.attn_output = ag::group_mean(e_pos, m / k);
    }
    const auto& a = out.attn_output;
    const auto mlp = ag::linear(ag::gelu(ag::linear(a, model.fout_w1, model.fout_b1)), model.fout_w2, model.fout_b2);
    out.latents = ag::layer_norm(ag::add(a, mlp), model.fout_ln_g, model.fout_ln_b);
    return out;
}

// Allowed-attention pattern over L steps of k latents plus one intent token.
struct StepMask {
    std::size_t steps = 0;
    std::size_t k = 0;
    std::size_t n = 0;
    std::vector<std::uint8_t> allow;  // n x n, [query * n + source]

    bool operator()(std::size_t q, std::size_t s) const { return allow[q * n + s] != 0; }
};

inline bool step_mask_allows(std::size_t q, std::size_t s, std::size_t k) {
    const std::size_t block = k + 1;
    const std::size_t tq = q / block, ts = s / block;
    if (ts < tq) return true;
    if (ts > tq) return false;
    const bool q_is_intent = q % block == k;
    const bool s_is_intent = s % block == k;
    if (q_is_intent) return true;  // intent sees its latents and itself
    return !s_is_intent;           // latents see latents, never the intent
}

inline StepMask build_step_mask(std::size_t steps, std::size_t k) {
    StepMask mask{steps, k, steps * (k + 1), {}};
    mask.allow.resize(mask.n * mask.n);
    for (std::size_t q = 0; q < mask.n; ++q)
        for (std::size_t s = 0; s < mask.n; ++s) mask.allow[q * mask.n + s] = step_mask_allows(q, s, k) ? 1 : 0;
    return mask;
}

// Padded batch of item sequences. Entry (b, t) is valid for t < lengths[b].
struct SequenceBatch {
    std::size_t batch = 0;
    std::size_t steps = 0;
    std::vector<std::uint16_t> codes;  // batch x steps x m; padded steps hold zeros
    std::vector<std::size_t> lengths;
};

inline SequenceBatch make_sequence_batch(const std::vector<std::vector<std::uint32_t>>& sequences,
                                         const SemanticIdTable& table, std::size_t min_steps = 0) {
    SequenceBatch b;
    b.batch = sequences.size();
    b.steps = min_steps;
    for (const auto& s : sequences) b.steps = std::max(b.steps, s.size());
    b.codes.assign(b.batch * b.steps * table.m, 0);
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        if (sequences[i].empty()) throw ShapeError("empty sequence in batch");
        b.lengths.push_back(sequences[i].size());
        for (std::size_t t = 0; t < sequences[i].size(); ++t) {
            const auto item = sequences[i][t];
            if (item >= table.rows) throw ShapeError("item index outside semantic-id table");
            std::copy_n(table.codes.data() + item * table.m, table.m, b.codes.data() + (i * b.steps + t) * table.m);
        }
    }
    return b;
}

template <typename T>
struct ForwardOutput {
    std::size_t batch = 0, steps = 0;
    ag::Tensor<T> intents;  // [batch*steps x d]; row b*steps+t predicts the item after step t
    ag::Tensor<T> latents;  // [batch*steps*k x d]
};

// Runs the decoder over a padded batch. Padded steps never act as attention
// sources, so valid rows do not depend on how much padding a batch carries.
// Padded slots hold a zero row instead of an item block.
template <typename T>
ForwardOutput<T> forward_sequence(const Model<T>& model, const SequenceBatch& batch) {
    const auto& cfg = model.config;
    const std::size_t B = batch.batch, S = batch.steps, m = cfg.m, k = cfg.k;
    if (S > cfg.max_steps)
        throw ShapeError("sequence length " + std::to_string(S) + " exceeds max_steps " + std::to_string(cfg.max_steps));
    if (batch.codes.size() != B * S * m) throw ShapeError("forward_sequence: code buffer has wrong size");
    const std::size_t n = B * S;
    const std::size_t block = k + 1;
    const std::size_t tokens = S * block;

    // Item blocks depend only on an item's codes, so each distinct code tuple
    // in the batch is merged once and gathered per step. Tuples are numbered
    // by first occurrence: an item keeps its row in the merge whatever later
    // steps hold, so its floating-point result does not depend on them.
    std::map<std::vector<std::uint16_t>, std::uint32_t> unique;
    std::vector<std::uint16_t> unique_codes;
    std::vector<std::int64_t> slot(n, -1);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < std::min(batch.lengths[b], S); ++t) {
            const auto* c = batch.codes.data() + (b * S + t) * m;
            const auto [it, fresh] =
                unique.emplace(std::vector<std::uint16_t>(c, c + m), static_cast<std::uint32_t>(unique.size()));
            if (fresh) unique_codes.insert(unique_codes.end(), c, c + m);
            slot[b * S + t] = it->second;
        }
    const std::size_t nu = unique.size();

    const auto e = embed_semantic_id(model, unique_codes);
    const auto s = summarize_item(model, e);
    const auto atm = atm_merge(model, e, s);
    const auto h = ag::add_row(s, model.intent_bias);
    const auto pool = ag::concat_rows(ag::concat_rows(atm.latents, h), ag::Tensor<T>::zeros(1, cfg.d));
    const auto zero_row = static_cast<std::uint32_t>(nu * (k + 1));

    std::vector<std::uint32_t> layout(n * block), step_of(n * block);
    for (std::size_t i = 0; i < n; ++i) {
        const auto id = slot[i];
        for (std::size_t u = 0; u < k; ++u)
            layout[i * block + u] = id < 0 ? zero_row : static_cast<std::uint32_t>(std::size_t(id) * k + u);
        layout[i * block + k] = id < 0 ? zero_row : static_cast<std::uint32_t>(nu * k + std::size_t(id));
        for (std::size_t u = 0; u < block; ++u) step_of[i * block + u] = static_cast<std::uint32_t>(i % S);
    }
    auto x = ag::gather_rows(pool, std::move(layout));
    x = ag::add(x, ag::gather_rows(model.step_pos, std::move(step_of)));

    const auto base = build_step_mask(S, k);
    std::map<std::size_t, std::shared_ptr<const std::vector<std::uint8_t>>> by_length;
    auto segs = std::make_shared<std::vector<ag::AttnSegment>>(B);
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t len = batch.lengths[b];
        if (len == 0 || len > S) throw ShapeError("forward_sequence: invalid sequence length");
        auto& mask = by_length[len];
        if (!mask) {
            auto mk = std::make_shared<std::vector<std::uint8_t>>(base.allow);
            for (std::size_t q = 0; q < tokens; ++q)
                for (std::size_t src = len * block; src < tokens; ++src) (*mk)[q * tokens + src] = 0;
            mask = mk;
        }
        (*segs)[b] = {b * tokens, tokens, b * tokens, tokens, mask};
    }

    for (const auto& L : model.layers) {
        const auto a = ag::layer_norm(x, L.ln1_g, L.ln1_b);
        const auto att = ag::attention(ag::linear(a, L.wq, L.bq), ag::linear(a, L.wk, L.bk), ag::linear(a, L.wv, L.bv),
                                       cfg.n_heads, segs);
        x = ag::add(x, ag::linear(att.out, L.wo, L.bo));
        const auto f = ag::layer_norm(x, L.ln2_g, L.ln2_b);
        x = ag::add(x, ag::linear(ag::gelu(ag::linear(f, L.ffn_w1, L.ffn_b1)), L.ffn_w2, L.ffn_b2));
    }
    x = ag::layer_norm(x, model.final_ln_g, model.final_ln_b);

    std::vector<std::uint32_t> intent_rows(n), latent_rows(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        intent_rows[i] = static_cast<std::uint32_t>(i * block + k);
        for (std::size_t u = 0; u < k; ++u) latent_rows[i * k + u] = static_cast<std::uint32_t>(i * block + u);
    }
    ForwardOutput<T> out;
    out.batch = B;
    out.steps = S;
    out.intents = ag::gather_rows(x, std::move(intent_rows));
    out.latents = ag::gather_rows(x, std::move(latent_rows));
    return out;
}

// Normalizes each intent row, applies the m heads and normalizes again.
// Output row p*m + j is the digit-j query for intent p.
template <typename T>
ag::Tensor<T> project_intent_to_subspaces(const Model<T>& model, const ag::Tensor<T>& h) {
    const auto& cfg = model.config;
    const auto hn = ag::normalize_rows(h);
    const auto proj = ag::reshape(ag::matmul(hn, model.heads_w), h.rows() * cfg.m, cfg.d);
    return ag::normalize_rows(proj);
}

}  // namespace acerec
