#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "acerec/autograd.hpp"
#include "acerec/data.hpp"
#include "acerec/error.hpp"
#include "acerec/evaluation.hpp"
#include "acerec/model.hpp"
#include "acerec/objectives.hpp"
#include "acerec/opq.hpp"
#include "acerec/rng.hpp"

namespace acerec {

struct TrainConfig {
    double lr = 0.005;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 200;
    std::size_t patience = 20;
    std::uint64_t seed = 7;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (batch_size == 0) throw ConfigError("batch size must be at least 1");
        if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(eps > 0.0) || weight_decay < 0.0 || !(clip_norm > 0.0)) throw ConfigError("invalid optimizer settings");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},       {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
            {"patience", c.patience}, {"seed", c.seed},   {"beta1", c.beta1},
            {"beta2", c.beta2}, {"eps", c.eps},               {"weight_decay", c.weight_decay},
            {"clip_norm", c.clip_norm}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    return c;
}

// Biases, layer-norm parameters and the intent bias are not decayed.
inline bool decays(const std::string& name, std::size_t rows, std::size_t cols) {
    if (rows == 1 || cols == 1) return false;
    return name.find("ln") == std::string::npos;
}

template <typename T>
class AdamW {
public:
    AdamW(Model<T>& model, const TrainConfig& cfg) : cfg_(cfg), params_(model.named_parameters()) {
        for (const auto& [n, t] : params_) {
            m_.emplace_back(t->size(), T(0));
            v_.emplace_back(t->size(), T(0));
            decay_.push_back(decays(n, t->rows(), t->cols()));
        }
    }

    // Global L2 norm of all gradients before clipping.
    double clip_gradients() {
        double sq = 0.0;
        for (auto& [n, t] : params_)
            for (T g : t->grad()) sq += double(g) * double(g);
        const double norm = std::sqrt(sq);
        if (norm > cfg_.clip_norm) {
            const T s = T(cfg_.clip_norm / (norm + 1e-6));
            for (auto& [n, t] : params_)
                if (!t->grad().empty())
                    for (T& g : t->mutable_grad()) g *= s;
        }
        return norm;
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        const T lr = T(cfg_.lr), b1 = T(cfg_.beta1), b2 = T(cfg_.beta2), eps = T(cfg_.eps);
        const T wd = T(cfg_.lr * cfg_.weight_decay);
        for (std::size_t p = 0; p < params_.size(); ++p) {
            auto* t = params_[p].second;
            auto val = t->data();
            const auto g = t->grad();
            auto& m = m_[p];
            auto& v = v_[p];
            for (std::size_t i = 0; i < val.size(); ++i) {
                const T gi = g.empty() ? T(0) : g[i];
                m[i] = b1 * m[i] + (T(1) - b1) * gi;
                v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
                const T mh = m[i] / T(bc1);
                const T vh = v[i] / T(bc2);
                if (decay_[p]) val[i] -= wd * val[i];
                val[i] -= lr * mh / (std::sqrt(vh) + eps);
            }
        }
    }

private:
    TrainConfig cfg_;
    std::vector<std::pair<std::string, ag::Tensor<T>*>> params_;
    std::vector<std::vector<T>> m_, v_;
    std::vector<bool> decay_;
    std::size_t t_ = 0;
};

template <typename T>
std::vector<std::vector<T>> snapshot(const Model<T>& model) {
    std::vector<std::vector<T>> out;
    for (const auto& [n, t] : model.named_parameters()) out.emplace_back(t->data().begin(), t->data().end());
    return out;
}

template <typename T>
void restore(Model<T>& model, const std::vector<std::vector<T>>& values) {
    auto params = model.named_parameters();
    if (params.size() != values.size()) throw ShapeError("restore: parameter count mismatch");
    for (std::size_t p = 0; p < params.size(); ++p) std::copy(values[p].begin(), values[p].end(), params[p].second->data().begin());
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double mtp = 0.0;
    double isa = 0.0;
    double val_ndcg10 = 0.0;
    double val_recall10 = 0.0;
    double wall_time = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& e) {
    return {{"epoch", e.epoch}, {"train_loss", e.train_loss},     {"mtp", e.mtp},        {"isa", e.isa},
            {"val_ndcg10", e.val_ndcg10}, {"val_recall10", e.val_recall10}, {"wall_time", e.wall_time}};
}

struct ValidationMetrics {
    double ndcg10 = 0.0;
    double recall10 = 0.0;
};

template <typename T>
ValidationMetrics validate(const Model<T>& model, const SplitDataset& split, const SemanticIdTable& codes,
                           std::size_t threads = 1) {
    const auto rep = evaluate_split(model, split, codes, {10}, BucketSpec::standard(), Target::Validation, threads);
    return {rep.overall.ndcg[0], rep.overall.recall[0]};
}

template <typename T>
struct TrainResult {
    Model<T> model;  // parameters of the best validation epoch
    std::vector<EpochMetrics> log;
    std::size_t best_epoch = 0;
    double best_val_ndcg10 = -1.0;
    std::vector<double> batch_losses;  // every batch of every epoch, in order
};

struct TrainOptions {
    std::size_t threads = 1;
    bool validate_each_epoch = true;
    std::function<void(const EpochMetrics&)> on_epoch;
};

// Training sequences: each user's train items, most recent max_steps kept.
// Users without at least one internal next-item pair are skipped.
inline std::vector<std::vector<std::uint32_t>> training_sequences(const SplitDataset& split, std::size_t max_steps) {
    std::vector<std::vector<std::uint32_t>> out;
    for (const auto& u : split.users) {
        if (u.train.size() < 2) continue;
        const std::size_t keep = std::min(u.train.size(), max_steps);
        out.emplace_back(u.train.end() - static_cast<std::ptrdiff_t>(keep), u.train.end());
    }
    return out;
}

template <typename T>
TrainResult<T> train(const SplitDataset& split, const SemanticIdTable& codes, const ModelConfig& mcfg,
                     const TrainConfig& tcfg, const TrainOptions& opts = {}) {
    mcfg.validate();
    tcfg.validate();
    if (codes.rows != split.num_items()) throw InvariantError("semantic-id table does not cover the catalog");
    if (codes.m != mcfg.m) throw ConfigError("semantic-id digit count differs from model m");

    TrainResult<T> res;
    res.model = init_model<T>(mcfg, stage_seed(tcfg.seed, "model-init"));
    auto& model = res.model;
    AdamW<T> opt(model, tcfg);
    Rng shuffle_rng(stage_seed(tcfg.seed, "train-shuffle"));
    const auto sequences = training_sequences(split, mcfg.max_steps);
    if (sequences.empty()) throw InvariantError("no user has a train sequence of length >= 2");
    std::vector<std::size_t> order(sequences.size());
    std::vector<std::vector<T>> best;
    std::size_t since_best = 0;
    const auto start = std::chrono::steady_clock::now();

    for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0, mtp_sum = 0.0, isa_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += tcfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + tcfg.batch_size);
            std::vector<std::vector<std::uint32_t>> seqs;
            for (std::size_t i = b0; i < b1; ++i) seqs.push_back(sequences[order[i]]);
            const auto batch = make_sequence_batch(seqs, codes);
            const auto targets = next_item_targets(seqs, batch.steps, codes);
            model.zero_grad();
            const auto fwd = forward_sequence(model, batch);
            const auto parts = batch_loss(model, fwd, targets, codes);
            const double total = double(parts.total.item());
            if (!std::isfinite(total)) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", batch " << batches << ": total=" << total
                    << " mtp=" << parts.mtp << " isa=" << parts.isa;
                throw TrainingError(msg.str());
            }
            ag::backward(parts.total);
            opt.clip_gradients();
            opt.step();
            loss_sum += total;
            mtp_sum += parts.mtp;
            isa_sum += parts.isa;
            res.batch_losses.push_back(total);
            ++batches;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = loss_sum / double(batches);
        em.mtp = mtp_sum / double(batches);
        em.isa = isa_sum / double(batches);
        if (opts.validate_each_epoch) {
            const auto vm = validate(model, split, codes, opts.threads);
            em.val_ndcg10 = vm.ndcg10;
            em.val_recall10 = vm.recall10;
        }
        em.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        res.log.push_back(em);
        if (opts.on_epoch) opts.on_epoch(em);

        if (em.val_ndcg10 > res.best_val_ndcg10) {
            res.best_val_ndcg10 = em.val_ndcg10;
            res.best_epoch = epoch;
            best = snapshot(model);
            since_best = 0;
        } else if (++since_best >= tcfg.patience) {
            break;
        }
    }
    restore(model, best);
    return res;
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::size_t coordinates = 0;
    std::map<std::string, double> per_tensor;
};

// Compares backprop gradients of the joint loss against central differences
// in double precision on a tiny random corpus.
inline GradCheckResult finite_difference_check(const ModelConfig& cfg, std::uint64_t seed, std::size_t per_tensor = 20,
                                               double h = 1e-3) {
    cfg.validate();
    auto model = init_model<double>(cfg, stage_seed(seed, "gradcheck-model"));
    Rng rng(stage_seed(seed, "gradcheck-data"));

    const std::size_t n_items = 2 * cfg.M + 2;
    SemanticIdTable table{n_items, cfg.m, std::vector<std::uint16_t>(n_items * cfg.m)};
    for (auto& c : table.codes) c = static_cast<std::uint16_t>(rng.below(cfg.M));
    // one full-length sequence and one shorter one, so padding is exercised
    std::vector<std::vector<std::uint32_t>> seqs(2);
    for (std::size_t t = 0; t < cfg.max_steps; ++t) seqs[0].push_back(static_cast<std::uint32_t>(rng.below(n_items)));
    for (std::size_t t = 0; t < std::max<std::size_t>(2, cfg.max_steps - 1); ++t)
        seqs[1].push_back(static_cast<std::uint32_t>(rng.below(n_items)));
    const auto batch = make_sequence_batch(seqs, table);
    const auto targets = next_item_targets(seqs, batch.steps, table);

    auto loss_value = [&] {
        ag::NoGradGuard guard;
        return batch_loss(model, forward_sequence(model, batch), targets, table).total.item();
    };

    model.zero_grad();
    ag::backward(batch_loss(model, forward_sequence(model, batch), targets, table).total);

    GradCheckResult res;
    for (auto& [name, t] : model.named_parameters()) {
        const std::vector<double> analytic = t->grad().empty() ? std::vector<double>(t->size(), 0.0)
                                                               : std::vector<double>(t->grad().begin(), t->grad().end());
        std::vector<std::size_t> coords;
        if (t->size() <= per_tensor) {
            for (std::size_t i = 0; i < t->size(); ++i) coords.push_back(i);
        } else {
            for (std::size_t i = 0; i < per_tensor; ++i) coords.push_back(rng.below(t->size()));
        }
        double worst = 0.0;
        for (auto i : coords) {
            auto v = t->data();
            const double orig = v[i];
            auto at = [&](double x) {
                v[i] = x;
                return loss_value();
            };
            // five-point stencil: truncation O(h^4), so h can stay large
            // enough that round-off in the loss does not dominate
            const double numeric =
                (-at(orig + 2 * h) + 8 * at(orig + h) - 8 * at(orig - h) + at(orig - 2 * h)) / (12.0 * h);
            v[i] = orig;
            const double a = analytic[i];
            // gradients below 1e-6 (e.g. key biases, which softmax ignores)
            // are compared on an absolute scale
            const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-6);
            worst = std::max(worst, rel);
            ++res.coordinates;
        }
        res.per_tensor[name] = worst;
        if (worst >= res.max_rel_error) {
            res.max_rel_error = worst;
            res.worst_tensor = name;
        }
    }
    return res;
}

}  // namespace acerec
