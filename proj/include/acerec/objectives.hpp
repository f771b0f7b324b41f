#pragma once

// Training objectives: per-digit multi-token prediction (MTP), the
// popularity-debiased intent/semantic alignment loss (ISA) and their sum.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "acerec/autograd.hpp"
#include "acerec/error.hpp"
#include "acerec/model.hpp"
#include "acerec/opq.hpp"

namespace acerec {

// Supervised positions of a forward pass and their next-item targets.
struct BatchTargets {
    std::vector<std::uint32_t> rows;     // row of ForwardOutput::intents
    std::vector<std::uint32_t> items;    // target item index per position
    std::vector<std::uint8_t> is_final;  // position predicts the last item of its sequence
    std::vector<std::uint16_t> codes;    // positions x m

    // Distinct target items ascending, with P(j) = count / total.
    std::vector<std::uint32_t> candidates;
    std::vector<double> popularity;

    std::size_t size() const { return rows.size(); }
};

inline void fill_popularity(BatchTargets& t, std::span<const std::uint32_t> items) {
    std::map<std::uint32_t, std::size_t> counts;
    for (auto i : items) ++counts[i];
    t.candidates.clear();
    t.popularity.clear();
    for (auto [item, c] : counts) {
        t.candidates.push_back(item);
        t.popularity.push_back(double(c) / double(items.size()));
    }
}

// Every step t < len-1 of a sequence is supervised with the item at t+1.
inline BatchTargets next_item_targets(const std::vector<std::vector<std::uint32_t>>& sequences, std::size_t steps,
                                      const SemanticIdTable& table) {
    BatchTargets t;
    for (std::size_t b = 0; b < sequences.size(); ++b) {
        const auto& s = sequences[b];
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            t.rows.push_back(static_cast<std::uint32_t>(b * steps + i));
            t.items.push_back(s[i + 1]);
            t.is_final.push_back(i + 2 == s.size() ? 1 : 0);
            const auto code = table.row(s[i + 1]);
            t.codes.insert(t.codes.end(), code.begin(), code.end());
        }
    }
    fill_popularity(t, t.items);
    return t;
}

// Softmax over the M codewords of one digit, computed directly from parameter
// values with no shared buffers.
template <typename T>
std::vector<T> mtp_digit_distribution(const Model<T>& model, std::span<const T> h, std::size_t digit) {
    const auto& cfg = model.config;
    if (digit >= cfg.m) throw ShapeError("mtp_digit_distribution: digit out of range");
    if (h.size() != cfg.d) throw ShapeError("mtp_digit_distribution: h must have d entries");
    const std::size_t d = cfg.d;
    auto unit = [](std::vector<T> v) {
        T n = T(0);
        for (T x : v) n += x * x;
        n = std::sqrt(n) + T(1e-12);
        for (T& x : v) x /= n;
        return v;
    };
    const auto hn = unit(std::vector<T>(h.begin(), h.end()));
    std::vector<T> q(d, T(0));
    const auto w = model.heads_w.data();
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t c = 0; c < d; ++c) q[c] += hn[i] * w[i * cfg.m * d + digit * d + c];
    q = unit(std::move(q));

    const auto& table = model.codeword_table();
    std::vector<T> logits(cfg.M);
    for (std::size_t v = 0; v < cfg.M; ++v) {
        const T* e = table.row(digit * cfg.M + v);
        const auto en = unit(std::vector<T>(e, e + d));
        T dot = T(0);
        for (std::size_t c = 0; c < d; ++c) dot += q[c] * en[c];
        logits[v] = dot / T(cfg.gamma);
    }
    const T mx = *std::max_element(logits.begin(), logits.end());
    T z = T(0);
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (auto& l : logits) l /= z;
    return logits;
}

// Mean over positions and digits of -log p(target code). `h` holds one intent
// row per supervised position.
template <typename T>
ag::Tensor<T> mtp_loss(const Model<T>& model, const ag::Tensor<T>& h, std::span<const std::uint16_t> codes) {
    const auto& cfg = model.config;
    const std::size_t P = h.rows();
    if (codes.size() != P * cfg.m) throw ShapeError("mtp_loss: need m target codes per position");
    if (P == 0) throw ShapeError("mtp_loss: no supervised positions");
    const auto queries = project_intent_to_subspaces(model, h);
    const auto table = ag::normalize_rows(model.codeword_table());
    const auto logits = ag::scale(ag::digit_logits(queries, table, cfg.m, cfg.M), T(1.0 / cfg.gamma));
    auto targets = std::make_shared<std::vector<std::uint32_t>>(codes.begin(), codes.end());
    for (auto c : *targets)
        if (c >= cfg.M) throw ShapeError("mtp_loss: target code out of range");
    return ag::scale(ag::cross_entropy_sum(logits, std::move(targets)), T(1.0 / double(P * cfg.m)));
}

// phi = cos / tau - beta * log P(j)
inline double isa_debiased_score(double cosine, double p_j, const ModelConfig& cfg) {
    if (!(p_j > 0.0) || p_j > 1.0) throw InvariantError("isa_debiased_score: P(j) must lie in (0, 1]");
    return cosine / cfg.tau - cfg.beta * std::log(p_j);
}

template <typename T>
double isa_debiased_score(std::span<const T> h, std::span<const T> s, double p_j, const ModelConfig& cfg) {
    if (h.size() != s.size()) throw ShapeError("isa_debiased_score: dimension mismatch");
    double dot = 0.0, nh = 0.0, ns = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        dot += double(h[i]) * double(s[i]);
        nh += double(h[i]) * double(h[i]);
        ns += double(s[i]) * double(s[i]);
    }
    const double cosine = dot / ((std::sqrt(nh) + 1e-12) * (std::sqrt(ns) + 1e-12));
    return isa_debiased_score(cosine, p_j, cfg);
}

// In-batch softmax cross-entropy of each position's target against all
// distinct targets, scored by the debiased phi. `positions` selects which
// rows of `h` (and entries of `targets.items`) take part; the candidate set
// and P(j) come from those positions only.
template <typename T>
ag::Tensor<T> isa_loss(const Model<T>& model, const ag::Tensor<T>& h, std::span<const std::uint32_t> items,
                       const SemanticIdTable& table, std::vector<std::uint32_t>* warn_single = nullptr) {
    const auto& cfg = model.config;
    const std::size_t P = h.rows();
    if (items.size() != P) throw ShapeError("isa_loss: one target item per row required");
    BatchTargets pop;
    fill_popularity(pop, items);
    const std::size_t C = pop.candidates.size();
    if (C < 2) {
        if (warn_single) warn_single->push_back(static_cast<std::uint32_t>(C));
        return ag::Tensor<T>::zeros(1, 1);
    }
    std::vector<std::uint16_t> cand_codes;
    cand_codes.reserve(C * cfg.m);
    for (auto j : pop.candidates) {
        const auto row = table.row(j);
        cand_codes.insert(cand_codes.end(), row.begin(), row.end());
    }
    const auto s = summarize_item(model, embed_semantic_id(model, cand_codes));
    const auto cos = ag::matmul_nt(ag::normalize_rows(h), ag::normalize_rows(s));
    std::vector<T> correction(C);
    for (std::size_t c = 0; c < C; ++c) correction[c] = T(-cfg.beta * std::log(pop.popularity[c]));
    const auto phi = ag::add_row(ag::scale(cos, T(1.0 / cfg.tau)), ag::Tensor<T>::from(1, C, std::move(correction)));
    auto slot = std::make_shared<std::vector<std::uint32_t>>(P);
    for (std::size_t p = 0; p < P; ++p)
        (*slot)[p] = static_cast<std::uint32_t>(
            std::lower_bound(pop.candidates.begin(), pop.candidates.end(), items[p]) - pop.candidates.begin());
    return ag::scale(ag::cross_entropy_sum(phi, std::move(slot)), T(1.0 / double(P)));
}

inline double joint_loss(double mtp, double isa, double lambda) { return mtp + lambda * isa; }

template <typename T>
struct LossParts {
    ag::Tensor<T> total;
    double mtp = 0.0;
    double isa = 0.0;
    bool isa_degenerate = false;
};

// Joint objective over one forward pass. ISA consumes the same final intent
// rows as MTP, before the subspace projection.
template <typename T>
LossParts<T> batch_loss(const Model<T>& model, const ForwardOutput<T>& fwd, const BatchTargets& targets,
                        const SemanticIdTable& table) {
    const auto& cfg = model.config;
    const auto h = ag::gather_rows(fwd.intents, targets.rows);
    LossParts<T> out;
    const auto mtp = mtp_loss(model, h, targets.codes);
    out.mtp = double(mtp.item());
    out.total = mtp;
    if (cfg.use_isa && cfg.lambda > 0.0) {
        ag::Tensor<T> isa;
        std::vector<std::uint32_t> warn;
        if (cfg.isa_final_only) {
            std::vector<std::uint32_t> rows, items;
            for (std::size_t p = 0; p < targets.size(); ++p)
                if (targets.is_final[p]) {
                    rows.push_back(static_cast<std::uint32_t>(p));
                    items.push_back(targets.items[p]);
                }
            isa = isa_loss(model, ag::gather_rows(h, std::move(rows)), items, table, &warn);
        } else {
            isa = isa_loss(model, h, targets.items, table, &warn);
        }
        out.isa = double(isa.item());
        out.isa_degenerate = !warn.empty();
        out.total = ag::add(mtp, ag::scale(isa, T(cfg.lambda)));
    }
    return out;
}

}  // namespace acerec
