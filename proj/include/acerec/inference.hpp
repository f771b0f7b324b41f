#pragma once

// Holistic candidate scoring: one m x M log-probability table per query,
// then a gather-and-sum over the code table of the whole catalog.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "acerec/autograd.hpp"
#include "acerec/data.hpp"
#include "acerec/error.hpp"
#include "acerec/model.hpp"
#include "acerec/objectives.hpp"
#include "acerec/opq.hpp"
#include "acerec/parallel.hpp"

namespace acerec {

template <typename T>
struct SubspaceLogProbMatrix {
    std::size_t m = 0;
    std::size_t M = 0;
    std::vector<T> values;  // m x M

    T operator()(std::size_t digit, std::size_t code) const { return values[digit * M + code]; }
    std::span<const T> row(std::size_t digit) const { return {values.data() + digit * M, M}; }
};

// Unit-normalized codeword table, computed once per model.
template <typename T>
struct ScoringContext {
    std::size_t m = 0, M = 0, d = 0;
    std::vector<T> unit_codewords;  // m*M x d

    explicit ScoringContext(const Model<T>& model) : m(model.config.m), M(model.config.M), d(model.config.d) {
        const auto& table = model.codeword_table();
        unit_codewords.assign(table.data().begin(), table.data().end());
        for (std::size_t r = 0; r < m * M; ++r) {
            T* e = unit_codewords.data() + r * d;
            T n = T(0);
            for (std::size_t c = 0; c < d; ++c) n += e[c] * e[c];
            n = std::sqrt(n) + T(1e-12);
            for (std::size_t c = 0; c < d; ++c) e[c] /= n;
        }
    }
};

// Log-softmax over the M cosine / gamma logits of every digit. Cost is
// O(m * M * d) and independent of the catalog.
template <typename T>
SubspaceLogProbMatrix<T> subspace_logprob_matrix(const Model<T>& model, const ScoringContext<T>& ctx,
                                                 std::span<const T> h) {
    const auto& cfg = model.config;
    const std::size_t d = cfg.d, m = cfg.m, M = cfg.M;
    if (h.size() != d) throw ShapeError("subspace_logprob_matrix: h must have d entries");
    std::vector<T> hn(h.begin(), h.end());
    T norm = T(0);
    for (T x : hn) norm += x * x;
    norm = std::sqrt(norm) + T(1e-12);
    for (T& x : hn) x /= norm;

    std::vector<T> proj(m * d, T(0));
    ag::detail::gemm_nn(hn.data(), model.heads_w.data().data(), proj.data(), 1, d, m * d);

    SubspaceLogProbMatrix<T> out{m, M, std::vector<T>(m * M)};
    const T inv_gamma = T(1.0 / cfg.gamma);
    for (std::size_t j = 0; j < m; ++j) {
        T* q = proj.data() + j * d;
        T qn = T(0);
        for (std::size_t c = 0; c < d; ++c) qn += q[c] * q[c];
        qn = std::sqrt(qn) + T(1e-12);
        for (std::size_t c = 0; c < d; ++c) q[c] /= qn;
        T* row = out.values.data() + j * M;
        for (std::size_t v = 0; v < M; ++v)
            row[v] = ag::detail::dot(q, ctx.unit_codewords.data() + (j * M + v) * d, d) * inv_gamma;
        const T mx = *std::max_element(row, row + M);
        T z = T(0);
        for (std::size_t v = 0; v < M; ++v) z += std::exp(row[v] - mx);
        const T lse = mx + std::log(z);
        for (std::size_t v = 0; v < M; ++v) row[v] -= lse;
    }
    return out;
}

template <typename T>
SubspaceLogProbMatrix<T> subspace_logprob_matrix(const Model<T>& model, std::span<const T> h) {
    return subspace_logprob_matrix(model, ScoringContext<T>(model), h);
}

// Score(j) = sum_k P[k, c_{j,k}].
template <typename T>
std::vector<T> holistic_scores(const SubspaceLogProbMatrix<T>& P, const SemanticIdTable& codes) {
    if (codes.m != P.m) throw ShapeError("holistic_scores: digit count mismatch");
    std::vector<T> scores(codes.rows);
    const std::uint16_t* c = codes.codes.data();
    const T* p = P.values.data();
    const std::size_t m = P.m, M = P.M;
    for (std::size_t j = 0; j < codes.rows; ++j, c += m) {
        T s = T(0);
        for (std::size_t k = 0; k < m; ++k) {
            if (c[k] >= M) throw ShapeError("holistic_scores: code out of range");
            s += p[k * M + c[k]];
        }
        scores[j] = s;
    }
    return scores;
}

struct ScoredItem {
    std::uint32_t index = 0;
    double score = 0.0;

    friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

// Higher score first, lower index on ties.
template <typename T>
bool ranks_before(T sa, std::uint32_t ia, T sb, std::uint32_t ib) {
    return sa > sb || (sa == sb && ia < ib);
}

template <typename T>
std::vector<ScoredItem> top_k(std::span<const T> scores, std::size_t K) {
    if (K == 0) throw ConfigError("top_k: K must be at least 1");
    K = std::min(K, scores.size());
    std::vector<std::uint32_t> idx(scores.size());
    for (std::uint32_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(K), idx.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return ranks_before(scores[a], a, scores[b], b); });
    std::vector<ScoredItem> out(K);
    for (std::size_t r = 0; r < K; ++r) out[r] = {idx[r], double(scores[idx[r]])};
    return out;
}

template <typename T>
std::vector<ScoredItem> top_k(const std::vector<T>& scores, std::size_t K) {
    return top_k(std::span<const T>(scores), K);
}

// 1-based rank of `target` under the same comparator as top_k.
template <typename T>
std::size_t rank_of(std::span<const T> scores, std::uint32_t target) {
    const T st = scores[target];
    std::size_t rank = 1;
    for (std::uint32_t j = 0; j < scores.size(); ++j)
        if (j != target && ranks_before(scores[j], j, st, target)) ++rank;
    return rank;
}

// Reference scorer: per item, sums log p(c_{j,k} | h) from the per-digit
// distributions without sharing a table across items.
template <typename T>
std::vector<T> oracle_scores(const Model<T>& model, std::span<const T> h, const SemanticIdTable& codes) {
    const auto& cfg = model.config;
    if (codes.m != cfg.m) throw ShapeError("oracle_scores: digit count mismatch");
    std::vector<T> out(codes.rows);
    for (std::size_t j = 0; j < codes.rows; ++j) {
        T s = T(0);
        for (std::size_t k = 0; k < cfg.m; ++k) {
            const auto dist = mtp_digit_distribution(model, h, k);
            const auto c = codes(j, k);
            if (c >= cfg.M) throw ShapeError("oracle_scores: code out of range");
            s += std::log(dist[c]);
        }
        out[j] = s;
    }
    return out;
}

// Final intent representation of each history (the state after its last
// step). Histories longer than max_steps keep their most recent items.
template <typename T>
std::vector<std::vector<T>> history_intents(const Model<T>& model, const std::vector<std::vector<std::uint32_t>>& histories,
                                            const SemanticIdTable& codes, std::size_t batch_size = 256) {
    ag::NoGradGuard no_grad;
    const auto& cfg = model.config;
    std::vector<std::vector<T>> out(histories.size());
    for (std::size_t b0 = 0; b0 < histories.size(); b0 += batch_size) {
        const std::size_t b1 = std::min(histories.size(), b0 + batch_size);
        std::vector<std::vector<std::uint32_t>> seqs;
        for (std::size_t u = b0; u < b1; ++u) {
            const auto& h = histories[u];
            const std::size_t keep = std::min(h.size(), cfg.max_steps);
            seqs.emplace_back(h.end() - static_cast<std::ptrdiff_t>(keep), h.end());
        }
        const auto batch = make_sequence_batch(seqs, codes);
        const auto fwd = forward_sequence(model, batch);
        for (std::size_t i = 0; i < seqs.size(); ++i) {
            const T* row = fwd.intents.row(i * batch.steps + seqs[i].size() - 1);
            out[b0 + i].assign(row, row + cfg.d);
        }
    }
    return out;
}

// What a user's history is when predicting each held-out target.
enum class Target { Validation, Test };

inline std::vector<std::uint32_t> history_for(const UserSplit& u, Target target) {
    auto h = u.train;
    if (target == Target::Test) h.push_back(u.val);
    return h;
}

inline std::uint32_t target_of(const UserSplit& u, Target target) {
    return target == Target::Test ? u.test : u.val;
}

// Full-catalog rank of each user's held-out target.
template <typename T>
std::vector<std::size_t> target_ranks(const Model<T>& model, const SplitDataset& split, const SemanticIdTable& codes,
                                      Target target, std::size_t threads = 1) {
    std::vector<std::vector<std::uint32_t>> histories;
    histories.reserve(split.users.size());
    for (const auto& u : split.users) histories.push_back(history_for(u, target));
    const auto intents = history_intents(model, histories, codes);
    const ScoringContext<T> ctx(model);
    std::vector<std::size_t> ranks(split.users.size());
    parallel_for(split.users.size(), threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t u = b; u < e; ++u) {
            const auto P = subspace_logprob_matrix(model, ctx, std::span<const T>(intents[u]));
            const auto scores = holistic_scores(P, codes);
            ranks[u] = rank_of(std::span<const T>(scores), target_of(split.users[u], target));
        }
    });
    return ranks;
}

}  // namespace acerec
