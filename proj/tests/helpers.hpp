#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <acerec.hpp>

namespace acerec::test {

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.d = 8;
    c.m = 4;
    c.k = 2;
    c.M = 5;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_dim = 16;
    c.max_steps = 6;
    return c;
}

inline SemanticIdTable random_table(std::size_t rows, std::size_t m, std::size_t M, std::uint64_t seed) {
    Rng rng(seed);
    SemanticIdTable t{rows, m, std::vector<std::uint16_t>(rows * m)};
    for (auto& c : t.codes) c = static_cast<std::uint16_t>(rng.below(M));
    return t;
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

template <typename T>
void fill_normal(ag::Tensor<T>& t, Rng& rng, double stddev = 1.0) {
    for (auto& x : t.data()) x = T(stddev * rng.normal());
}

template <typename T>
void fill_constant(ag::Tensor<T>& t, T value) {
    for (auto& x : t.data()) x = value;
}

// Fresh scratch directory under the test working directory.
inline std::string scratch_dir(const std::string& name) {
    const auto p = std::filesystem::current_path() / "scratch" / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

// Small split over `n_items` items from explicit per-user train/val/test.
inline SplitDataset make_split(std::size_t n_items, const std::vector<UserSplit>& users) {
    SplitDataset s;
    for (std::size_t i = 0; i < n_items; ++i) s.items.push_back("i" + std::to_string(i));
    s.rebuild_lookup();
    s.users = users;
    return s;
}

}  // namespace acerec::test
