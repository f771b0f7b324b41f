#include <gtest/gtest.h>

#include <functional>

#include "helpers.hpp"

using namespace acerec;
using ag::Tensor;

namespace {

using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Random linear functional of a tensor, so every output entry matters.
Tensor<double> probe(const Tensor<double>& out, std::uint64_t seed) {
    Rng rng(seed);
    auto a = Tensor<double>::zeros(out.cols(), 1);
    auto b = Tensor<double>::zeros(out.rows(), 1);
    test::fill_normal(a, rng);
    test::fill_normal(b, rng);
    return ag::matmul(ag::reshape(ag::matmul(out, a), 1, out.rows()), b);
}

double max_grad_error(const Fn& f, std::vector<Tensor<double>> inputs, double h = 1e-5) {
    for (auto& t : inputs) t.zero_grad();
    ag::backward(probe(f(inputs), 99));
    double worst = 0.0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        const std::vector<double> g(t.grad().begin(), t.grad().end());
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = t.data()[i];
            t.data()[i] = orig + h;
            const double up = probe(f(inputs), 99).item();
            t.data()[i] = orig - h;
            const double down = probe(f(inputs), 99).item();
            t.data()[i] = orig;
            const double num = (up - down) / (2 * h);
            const double a = g.empty() ? 0.0 : g[i];
            worst = std::max(worst, std::abs(a - num) / std::max(1.0, std::abs(a) + std::abs(num)));
        }
    }
    return worst;
}

Tensor<double> param(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
    auto t = Tensor<double>::zeros(r, c, true);
    test::fill_normal(t, rng, s);
    return t;
}

}  // namespace

TEST(Autograd, ElementwiseAndLinearOps) {
    Rng rng(1);
    auto x = param(5, 4, rng), w = param(4, 3, rng), b = param(1, 3, rng), y = param(5, 4, rng);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::add(in[0], in[1]); }, {x, y}), 1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::scale(in[0], 2.5); }, {x}), 1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::linear(in[0], in[1], in[2]); }, {x, w, b}), 1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::matmul_nt(in[0], in[1]); }, {x, y}), 1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::gelu(in[0]); }, {x}), 1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::sum(in[0]); }, {x}), 1e-7);
}

TEST(Autograd, NormalizationOps) {
    Rng rng(2);
    auto x = param(6, 5, rng), g = param(1, 5, rng), b = param(1, 5, rng);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::layer_norm(in[0], in[1], in[2]); }, {x, g, b}), 1e-6);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::normalize_rows(in[0]); }, {x}), 1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::group_mean(in[0], 3); }, {x}), 1e-7);
}

TEST(Autograd, IndexingOps) {
    Rng rng(3);
    auto x = param(4, 3, rng), y = param(2, 3, rng);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::gather_rows(in[0], std::vector<std::uint32_t>{3, 0, 3, 1}); }, {x}),
              1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::concat_rows(in[0], in[1]); }, {x, y}), 1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::reshape(in[0], 6, 2); }, {x}), 1e-7);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::add_row(in[0], in[1]); }, {x, param(1, 3, rng)}), 1e-7);
}

TEST(Autograd, CrossEntropyAndDigitLogits) {
    Rng rng(4);
    auto logits = param(5, 4, rng);
    auto targets = std::make_shared<std::vector<std::uint32_t>>(std::vector<std::uint32_t>{0, 3, 2, 2, 1});
    EXPECT_LT(max_grad_error([&](auto& in) { return ag::cross_entropy_sum(in[0], targets); }, {logits}), 1e-7);

    // m=3 digits, M=4 codewords, 2 queries
    auto q = param(2 * 3, 5, rng), table = param(3 * 4, 5, rng);
    EXPECT_LT(max_grad_error([](auto& in) { return ag::digit_logits(in[0], in[1], 3, 4); }, {q, table}), 1e-7);
}

TEST(Autograd, DigitLogitsValues) {
    Rng rng(5);
    auto q = param(2 * 2, 3, rng), table = param(2 * 3, 3, rng);
    const auto out = ag::digit_logits(q, table, 2, 3);
    ASSERT_EQ(out.rows(), 4u);
    ASSERT_EQ(out.cols(), 3u);
    for (std::size_t p = 0; p < 2; ++p)
        for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t v = 0; v < 3; ++v) {
                double dot = 0.0;
                for (std::size_t c = 0; c < 3; ++c) dot += q.at(p * 2 + j, c) * table.at(j * 3 + v, c);
                EXPECT_NEAR(out.at(p * 2 + j, v), dot, 1e-12);
            }
}

TEST(Autograd, MaskedAttention) {
    Rng rng(6);
    auto q = param(5, 4, rng), k = param(5, 4, rng), v = param(5, 4, rng);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(25, 1);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = i + 1; j < 5; ++j) (*mask)[i * 5 + j] = 0;
    auto segs = std::make_shared<std::vector<ag::AttnSegment>>(
        std::vector<ag::AttnSegment>{{0, 3, 0, 3, nullptr}, {3, 2, 0, 5, std::make_shared<std::vector<std::uint8_t>>(
                                                                               std::vector<std::uint8_t>{1, 1, 0, 1, 0, 0, 1, 1, 1, 1})}});
    auto causal = std::make_shared<std::vector<ag::AttnSegment>>(std::vector<ag::AttnSegment>{{0, 5, 0, 5, mask}});
    for (auto s : {segs, causal})
        EXPECT_LT(max_grad_error([&](auto& in) { return ag::attention(in[0], in[1], in[2], 2, s).out; }, {q, k, v}),
                  1e-7);

    const auto att = ag::attention(q, k, v, 2, causal);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < 5; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < 5; ++j) {
                const double p = (*att.probs)[att.offsets[0] + (h * 5 + i) * 5 + j];
                if (j > i) {
                    EXPECT_EQ(p, 0.0);
                }
                row += p;
            }
            EXPECT_NEAR(row, 1.0, 1e-12);
        }
}

TEST(Autograd, AttentionIgnoresMaskedValues) {
    Rng rng(7);
    auto q = param(3, 4, rng), k = param(3, 4, rng), v = param(3, 4, rng);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});
    auto segs = std::make_shared<std::vector<ag::AttnSegment>>(std::vector<ag::AttnSegment>{{0, 3, 0, 3, mask}});
    const auto a = ag::attention(q, k, v, 2, segs).out;
    v.at(2, 1) += 100.0;
    k.at(2, 0) -= 50.0;
    const auto b = ag::attention(q, k, v, 2, segs).out;
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_EQ(a.at(0, c), b.at(0, c));
        EXPECT_EQ(a.at(1, c), b.at(1, c));
    }
}

TEST(Autograd, NoGradGuardSkipsGraph) {
    Rng rng(8);
    auto x = param(2, 2, rng);
    {
        ag::NoGradGuard guard;
        EXPECT_FALSE(ag::scale(x, 2.0).requires_grad());
    }
    EXPECT_TRUE(ag::scale(x, 2.0).requires_grad());
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
    auto x = Tensor<double>::from(1, 1, {3.0}, true);
    ag::backward(ag::add(ag::scale(x, 2.0), ag::scale(x, 5.0)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autograd, ShapeErrors) {
    auto a = Tensor<double>::zeros(2, 3), b = Tensor<double>::zeros(3, 2);
    EXPECT_THROW(ag::add(a, b), ShapeError);
    EXPECT_THROW(ag::matmul(a, a), ShapeError);
    EXPECT_THROW(ag::backward(a), ShapeError);
}
