#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "acerec/data.hpp"
#include "acerec/error.hpp"
#include "acerec/inference.hpp"

namespace acerec {

inline double recall_at_k(std::size_t rank, std::size_t K) {
    if (rank == 0) throw InvariantError("rank is 1-based");
    return rank <= K ? 1.0 : 0.0;
}

inline double ndcg_at_k(std::size_t rank, std::size_t K) {
    if (rank == 0) throw InvariantError("rank is 1-based");
    return rank <= K ? 1.0 / std::log2(double(rank) + 1.0) : 0.0;
}

struct Bucket {
    std::size_t lo = 0;
    std::size_t hi = std::numeric_limits<std::size_t>::max();  // inclusive

    bool contains(std::size_t c) const { return c >= lo && c <= hi; }
    std::string label() const {
        if (hi == std::numeric_limits<std::size_t>::max()) return "[" + std::to_string(lo) + ",inf)";
        return "[" + std::to_string(lo) + "," + std::to_string(hi) + "]";
    }
};

struct BucketSpec {
    std::vector<Bucket> buckets;

    static BucketSpec standard() { return BucketSpec{{{0, 5}, {6, 10}, {11, 15}, {16, 20}, {21}}}; }

    void validate() const {
        if (buckets.empty() || buckets.front().lo != 0) throw ConfigError("buckets must start at 0");
        for (std::size_t i = 0; i < buckets.size(); ++i) {
            if (buckets[i].hi < buckets[i].lo) throw ConfigError("bucket upper bound below lower bound");
            if (i + 1 < buckets.size() && buckets[i + 1].lo != buckets[i].hi + 1)
                throw ConfigError("buckets must be contiguous and ordered");
        }
        if (buckets.back().hi != std::numeric_limits<std::size_t>::max())
            throw ConfigError("last bucket must be unbounded");
    }

    std::size_t index_of(std::size_t count) const {
        for (std::size_t b = 0; b < buckets.size(); ++b)
            if (buckets[b].contains(count)) return b;
        throw InvariantError("count outside every bucket");
    }
};

// Occurrences of each item across all train sequences.
inline std::vector<std::size_t> train_item_counts(const SplitDataset& split) {
    std::vector<std::size_t> counts(split.num_items(), 0);
    for (const auto& u : split.users)
        for (auto i : u.train) ++counts[i];
    return counts;
}

struct BucketAssignment {
    std::vector<std::vector<std::size_t>> members;  // positions into `targets`, per bucket
    std::vector<double> percentages;
};

inline BucketAssignment bucket_by_frequency(const std::vector<std::size_t>& train_counts,
                                            const std::vector<std::uint32_t>& targets, const BucketSpec& spec) {
    spec.validate();
    BucketAssignment out;
    out.members.resize(spec.buckets.size());
    for (std::size_t p = 0; p < targets.size(); ++p) {
        const std::size_t c = targets[p] < train_counts.size() ? train_counts[targets[p]] : 0;
        out.members[spec.index_of(c)].push_back(p);
    }
    for (const auto& m : out.members)
        out.percentages.push_back(targets.empty() ? 0.0 : 100.0 * double(m.size()) / double(targets.size()));
    return out;
}

struct MetricSet {
    std::vector<std::size_t> Ks;
    std::vector<double> recall;
    std::vector<double> ndcg;
};

inline MetricSet mean_metrics(const std::vector<std::size_t>& ranks, const std::vector<std::size_t>& positions,
                              const std::vector<std::size_t>& Ks) {
    MetricSet m{Ks, std::vector<double>(Ks.size(), 0.0), std::vector<double>(Ks.size(), 0.0)};
    if (positions.empty()) return m;
    for (std::size_t i = 0; i < Ks.size(); ++i) {
        double r = 0.0, n = 0.0;
        for (auto p : positions) {
            r += recall_at_k(ranks[p], Ks[i]);
            n += ndcg_at_k(ranks[p], Ks[i]);
        }
        m.recall[i] = r / double(positions.size());
        m.ndcg[i] = n / double(positions.size());
    }
    return m;
}

struct BucketMetrics {
    Bucket range;
    std::size_t count = 0;
    double pct = 0.0;
    MetricSet metrics;
};

struct EvalReport {
    std::size_t users = 0;
    MetricSet overall;
    std::vector<BucketMetrics> buckets;

    double metric(const std::string& name, std::size_t K) const {
        for (std::size_t i = 0; i < overall.Ks.size(); ++i)
            if (overall.Ks[i] == K) return name == "ndcg" ? overall.ndcg[i] : overall.recall[i];
        throw ConfigError("K=" + std::to_string(K) + " not evaluated");
    }
};

inline EvalReport summarize_ranks(const std::vector<std::size_t>& ranks, const std::vector<std::uint32_t>& targets,
                                  const std::vector<std::size_t>& train_counts, const std::vector<std::size_t>& Ks,
                                  const BucketSpec& spec) {
    EvalReport rep;
    rep.users = ranks.size();
    std::vector<std::size_t> all(ranks.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    rep.overall = mean_metrics(ranks, all, Ks);
    const auto assign = bucket_by_frequency(train_counts, targets, spec);
    for (std::size_t b = 0; b < spec.buckets.size(); ++b)
        rep.buckets.push_back(
            {spec.buckets[b], assign.members[b].size(), assign.percentages[b], mean_metrics(ranks, assign.members[b], Ks)});
    return rep;
}

inline std::vector<std::uint32_t> split_targets(const SplitDataset& split, Target target) {
    std::vector<std::uint32_t> t;
    for (const auto& u : split.users) t.push_back(target_of(u, target));
    return t;
}

template <typename T>
EvalReport evaluate_split(const Model<T>& model, const SplitDataset& split, const SemanticIdTable& codes,
                          const std::vector<std::size_t>& Ks = {5, 10}, const BucketSpec& spec = BucketSpec::standard(),
                          Target target = Target::Test, std::size_t threads = 1) {
    const auto ranks = target_ranks(model, split, codes, target, threads);
    return summarize_ranks(ranks, split_targets(split, target), train_item_counts(split), Ks, spec);
}

// Baseline that ranks every user's target by global popularity: occurrence
// counts over train sequences plus validation targets.
inline EvalReport evaluate_popularity(const SplitDataset& split, const std::vector<std::size_t>& Ks = {5, 10},
                                      const BucketSpec& spec = BucketSpec::standard()) {
    std::vector<double> scores(split.num_items(), 0.0);
    for (const auto& u : split.users) {
        for (auto i : u.train) scores[i] += 1.0;
        scores[u.val] += 1.0;
    }
    std::vector<std::size_t> ranks;
    for (const auto& u : split.users) ranks.push_back(rank_of(std::span<const double>(scores), u.test));
    return summarize_ranks(ranks, split_targets(split, Target::Test), train_item_counts(split), Ks, spec);
}

inline nlohmann::json metrics_json(const MetricSet& m) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < m.Ks.size(); ++i) {
        j["recall@" + std::to_string(m.Ks[i])] = m.recall[i];
        j["ndcg@" + std::to_string(m.Ks[i])] = m.ndcg[i];
    }
    return j;
}

inline nlohmann::json report_to_json(const EvalReport& r, const std::string& fingerprint) {
    nlohmann::json buckets = nlohmann::json::array();
    for (const auto& b : r.buckets) {
        nlohmann::json e{{"range", b.range.label()}, {"count", b.count}, {"pct", b.pct}};
        const auto m = metrics_json(b.metrics);
        for (auto& [k, v] : m.items()) e[k] = v;
        buckets.push_back(std::move(e));
    }
    return {{"users", r.users}, {"overall", metrics_json(r.overall)}, {"buckets", buckets}, {"config_fingerprint", fingerprint}};
}

}  // namespace acerec
