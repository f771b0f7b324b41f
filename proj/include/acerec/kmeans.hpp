#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "acerec/error.hpp"
#include "acerec/rng.hpp"

namespace acerec {

struct KMeansResult {
    std::vector<double> centroids;  // k x dim
    std::vector<std::uint32_t> assign;
    double sse = 0.0;
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
    double s = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace detail

// Nearest centroid by squared Euclidean distance, lowest index on ties.
inline std::uint32_t nearest_centroid(const double* x, std::span<const double> centroids, std::size_t k,
                                      std::size_t dim, double* best_dist = nullptr) {
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
        const double d = detail::sq_dist(x, centroids.data() + c * dim, dim);
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint32_t>(c);
        }
    }
    if (best_dist) *best_dist = best_d;
    return best;
}

// k-means++ seeding: first centre uniform, the rest proportional to D^2.
inline std::vector<double> kmeanspp_init(std::span<const double> data, std::size_t n, std::size_t dim, std::size_t k,
                                         Rng& rng) {
    std::vector<double> centroids(k * dim);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t pick = rng.below(n);
    for (std::size_t c = 0; c < k; ++c) {
        std::copy_n(data.data() + pick * dim, dim, centroids.data() + c * dim);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], detail::sq_dist(data.data() + i * dim, centroids.data() + c * dim, dim));
            total += d2[i];
        }
        if (c + 1 == k) break;
        if (total <= 0.0) {
            pick = rng.below(n);  // every point already coincides with a centre
            continue;
        }
        double r = rng.uniform() * total;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            r -= d2[i];
            if (r < 0.0) {
                pick = i;
                break;
            }
        }
    }
    return centroids;
}

// Lloyd iterations starting from `init`. An empty cluster is re-seeded at the
// point currently farthest from its centre, so the SSE never increases.
inline KMeansResult lloyd(std::span<const double> data, std::size_t n, std::size_t dim, std::size_t k,
                          std::vector<double> init, std::size_t iters) {
    if (k == 0 || n < k) throw ConfigError("k-means needs 1 <= k <= n");
    KMeansResult res;
    res.centroids = std::move(init);
    res.assign.assign(n, 0);
    std::vector<double> dist(n, 0.0);
    auto assign_all = [&] {
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            res.assign[i] = nearest_centroid(data.data() + i * dim, res.centroids, k, dim, &dist[i]);
            sse += dist[i];
        }
        return sse;
    };
    res.sse = assign_all();
    std::vector<double> sums(k * dim);
    std::vector<std::size_t> counts(k);
    for (std::size_t it = 0; it < iters; ++it) {
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = res.assign[i];
            ++counts[c];
            const double* x = data.data() + i * dim;
            for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += x[j];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t j = 0; j < dim; ++j) res.centroids[c * dim + j] = sums[c * dim + j] / double(counts[c]);
        }
        for (std::size_t i = 0; i < n; ++i)
            dist[i] = detail::sq_dist(data.data() + i * dim, res.centroids.data() + res.assign[i] * dim, dim);
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            std::size_t far = 0;
            for (std::size_t i = 1; i < n; ++i)
                if (dist[i] > dist[far]) far = i;
            std::copy_n(data.data() + far * dim, dim, res.centroids.data() + c * dim);
            dist[far] = 0.0;
        }
        res.sse = assign_all();
    }
    return res;
}

inline KMeansResult kmeans(std::span<const double> data, std::size_t n, std::size_t dim, std::size_t k, Rng& rng,
                           std::size_t iters) {
    if (k == 0 || n < k) throw ConfigError("k-means needs 1 <= k <= n");
    return lloyd(data, n, dim, k, kmeanspp_init(data, n, dim, k, rng), iters);
}

}  // namespace acerec
