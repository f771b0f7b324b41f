#include <gtest/gtest.h>

#include <numeric>

#include "helpers.hpp"

using namespace acerec;
using ag::Tensor;

namespace {

// d=2, m=2, k=1, single head; heads are the identity per digit.
Model<double> two_dim_model(std::size_t M, double gamma = 0.03) {
    ModelConfig c;
    c.d = 2;
    c.m = 2;
    c.k = 1;
    c.M = M;
    c.n_heads = 1;
    c.n_layers = 1;
    c.ffn_dim = 4;
    c.max_steps = 3;
    c.gamma = gamma;
    auto model = init_model<double>(c, 1);
    test::fill_constant(model.heads_w, 0.0);
    for (std::size_t j = 0; j < c.m; ++j)
        for (std::size_t i = 0; i < c.d; ++i) model.heads_w.at(i, j * c.d + i) = 1.0;
    return model;
}

}  // namespace

TEST(MtpDistribution, IdenticalCodewordsAreUniform) {
    auto model = two_dim_model(4);
    test::fill_constant(model.token_table, 0.5);
    const std::vector<double> h{0.3, -1.2};
    for (std::size_t j = 0; j < 2; ++j)
        for (double p : mtp_digit_distribution(model, std::span<const double>(h), j)) EXPECT_NEAR(p, 0.25, 1e-15);
}

TEST(MtpDistribution, TwoClassClosedForm) {
    auto model = two_dim_model(2);
    // digit 0: codeword 0 along h, codeword 1 orthogonal
    model.token_table.at(0, 0) = 1.0;
    model.token_table.at(0, 1) = 0.0;
    model.token_table.at(1, 0) = 0.0;
    model.token_table.at(1, 1) = 1.0;
    const std::vector<double> h{2.0, 0.0};
    const auto p = mtp_digit_distribution(model, std::span<const double>(h), 0);
    const double expected = 1.0 / (1.0 + std::exp(-1.0 / 0.03));
    EXPECT_NEAR(p[0], expected, 1e-15);
    EXPECT_NEAR(1.0 - p[0], 3.3e-15, 0.1e-15);
}

TEST(MtpDistribution, SumsToOne) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<double>(cfg, 2);
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const auto h = test::random_vector(cfg.d, rng);
        for (std::size_t j = 0; j < cfg.m; ++j) {
            const auto p = mtp_digit_distribution(model, std::span<const double>(h), j);
            EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
        }
    }
}

TEST(MtpLoss, UniformPredictionsGiveLogM) {
    auto model = two_dim_model(4);
    test::fill_constant(model.token_table, 1.0);
    const auto h = Tensor<double>::from(2, 2, {1.0, 0.5, -0.3, 2.0});
    const std::vector<std::uint16_t> codes{0, 3, 2, 1};
    EXPECT_NEAR(mtp_loss(model, h, codes).item(), std::log(4.0), 1e-12);
}

TEST(MtpLoss, SaturatesForAlignedOrthogonalCodewords) {
    auto model = two_dim_model(2);
    // both digits: codeword 0 = e0, codeword 1 = e1
    for (std::size_t j = 0; j < 2; ++j) {
        model.token_table.at(j * 2 + 0, 0) = 1.0;
        model.token_table.at(j * 2 + 0, 1) = 0.0;
        model.token_table.at(j * 2 + 1, 0) = 0.0;
        model.token_table.at(j * 2 + 1, 1) = 1.0;
    }
    const auto h = Tensor<double>::from(1, 2, {3.0, 0.0});
    EXPECT_LT(mtp_loss(model, h, std::vector<std::uint16_t>{0, 0}).item(), 1e-6);
}

TEST(MtpLoss, MatchesScalarOracle) {
    ModelConfig c;
    c.d = 4;
    c.m = 2;
    c.k = 1;
    c.M = 3;
    c.n_heads = 2;
    c.ffn_dim = 4;
    c.max_steps = 2;
    c.gamma = 0.3;
    const auto model = init_model<double>(c, 3);
    Rng rng(3);
    auto h = Tensor<double>::zeros(3, c.d);
    test::fill_normal(h, rng);
    const std::vector<std::uint16_t> codes{0, 2, 1, 1, 2, 0};
    double nll = 0.0;
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t j = 0; j < c.m; ++j) {
            const auto dist = mtp_digit_distribution(model, std::span<const double>(h.row(p), c.d), j);
            nll -= std::log(dist[codes[p * c.m + j]]);
        }
    EXPECT_NEAR(mtp_loss(model, h, codes).item(), nll / 6.0, 1e-12);
}

TEST(IsaScore, ClosedForms) {
    ModelConfig c;
    c.tau = 0.07;
    c.beta = 0.02;
    EXPECT_NEAR(isa_debiased_score(0.7, 0.25, c), 10.0277259, 1e-7);
    EXPECT_DOUBLE_EQ(isa_debiased_score(0.7, 1.0, c), 0.7 / 0.07);
    c.beta = 0.0;
    EXPECT_DOUBLE_EQ(isa_debiased_score(0.35, 0.1, c), 0.35 / 0.07);
    EXPECT_THROW(isa_debiased_score(0.3, 0.0, c), InvariantError);
    EXPECT_THROW(isa_debiased_score(0.3, 1.5, c), InvariantError);
    const std::vector<double> h{1.0, 0.0}, s{1.0, 1.0};
    c.beta = 0.02;
    EXPECT_NEAR(isa_debiased_score(std::span<const double>(h), std::span<const double>(s), 0.5, c),
                std::sqrt(0.5) / 0.07 - 0.02 * std::log(0.5), 1e-9);
}

TEST(IsaLoss, SingleDistinctItemIsZero) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<double>(cfg, 4);
    const auto table = test::random_table(10, cfg.m, cfg.M, 4);
    auto h = Tensor<double>::zeros(3, cfg.d);
    Rng rng(4);
    test::fill_normal(h, rng);
    std::vector<std::uint32_t> warn;
    EXPECT_EQ(isa_loss(model, h, std::vector<std::uint32_t>{7, 7, 7}, table, &warn).item(), 0.0);
    EXPECT_EQ(warn.size(), 1u);
}

TEST(IsaLoss, SymmetricPairGivesLog2) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<double>(cfg, 5);
    const auto table = test::random_table(10, cfg.m, cfg.M, 5);
    // zero intents have zero cosine with every summary
    const auto h = Tensor<double>::zeros(2, cfg.d);
    EXPECT_NEAR(isa_loss(model, h, std::vector<std::uint32_t>{1, 2}, table).item(), std::log(2.0), 1e-12);
}

TEST(IsaLoss, MatchesScalarOracle) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<double>(cfg, 6);
    const auto table = test::random_table(12, cfg.m, cfg.M, 6);
    Rng rng(6);
    auto h = Tensor<double>::zeros(6, cfg.d);
    test::fill_normal(h, rng);
    const std::vector<std::uint32_t> items{3, 8, 3, 1, 11, 8};
    const std::vector<std::uint32_t> cand{1, 3, 8, 11};
    const std::vector<double> pop{1.0 / 6, 2.0 / 6, 2.0 / 6, 1.0 / 6};
    std::vector<std::vector<double>> s;
    for (auto j : cand) {
        const auto sj = summarize_item(model, embed_semantic_id(model, table.row(j)));
        s.emplace_back(sj.row(0), sj.row(0) + cfg.d);
    }
    double loss = 0.0;
    for (std::size_t p = 0; p < items.size(); ++p) {
        const std::vector<double> hp(h.row(p), h.row(p) + cfg.d);
        std::vector<double> phi;
        for (std::size_t c = 0; c < cand.size(); ++c)
            phi.push_back(isa_debiased_score(std::span<const double>(hp), std::span<const double>(s[c]), pop[c], cfg));
        double z = 0.0;
        for (double v : phi) z += std::exp(v);
        const auto target = std::find(cand.begin(), cand.end(), items[p]) - cand.begin();
        loss += std::log(z) - phi[std::size_t(target)];
    }
    EXPECT_NEAR(isa_loss(model, h, items, table).item(), loss / double(items.size()), 1e-10);
}

TEST(JointLoss, Arithmetic) {
    EXPECT_DOUBLE_EQ(joint_loss(2.0, 9.0, 0.0), 2.0);
    EXPECT_NEAR(joint_loss(1.0, 0.5, 0.01), 1.005, 1e-15);
    EXPECT_LT(joint_loss(1.0, 0.5, 0.1), joint_loss(1.0, 0.6, 0.1));
}

TEST(BatchTargets, NextItemsAndPopularity) {
    const auto table = test::random_table(10, 4, 5, 7);
    const std::vector<std::vector<std::uint32_t>> seqs{{1, 2, 3}, {4, 2}};
    const auto t = next_item_targets(seqs, 3, table);
    EXPECT_EQ(t.rows, (std::vector<std::uint32_t>{0, 1, 3}));
    EXPECT_EQ(t.items, (std::vector<std::uint32_t>{2, 3, 2}));
    EXPECT_EQ(t.is_final, (std::vector<std::uint8_t>{0, 1, 1}));
    EXPECT_EQ(t.candidates, (std::vector<std::uint32_t>{2, 3}));
    EXPECT_NEAR(std::accumulate(t.popularity.begin(), t.popularity.end(), 0.0), 1.0, 1e-9);
    for (auto c : t.codes) EXPECT_LT(c, 5);
    ASSERT_EQ(t.codes.size(), 3u * 4u);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(t.codes[4 + j], table(3, j));
}

TEST(BatchLoss, CombinesTermsWithLambda) {
    auto cfg = test::tiny_config();
    cfg.lambda = 0.25;
    const auto model = init_model<double>(cfg, 8);
    const auto table = test::random_table(15, cfg.m, cfg.M, 8);
    const std::vector<std::vector<std::uint32_t>> seqs{{1, 2, 3, 4}, {5, 6, 7}};
    const auto batch = make_sequence_batch(seqs, table);
    const auto targets = next_item_targets(seqs, batch.steps, table);
    const auto fwd = forward_sequence(model, batch);
    const auto parts = batch_loss(model, fwd, targets, table);
    EXPECT_NEAR(parts.total.item(), joint_loss(parts.mtp, parts.isa, 0.25), 1e-12);
    EXPECT_FALSE(parts.isa_degenerate);

    auto final_only = model;
    final_only.config.isa_final_only = true;
    const auto fo = batch_loss(final_only, fwd, targets, table);
    EXPECT_NEAR(fo.mtp, parts.mtp, 1e-15);
    EXPECT_NE(fo.isa, parts.isa);

    auto no_isa = model;
    no_isa.config.use_isa = false;
    EXPECT_NEAR(batch_loss(no_isa, fwd, targets, table).total.item(), parts.mtp, 1e-15);
}
