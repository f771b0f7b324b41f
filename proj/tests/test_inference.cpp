#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "helpers.hpp"

using namespace acerec;

namespace {

SubspaceLogProbMatrix<double> matrix(std::size_t m, std::size_t M, std::vector<double> v) { return {m, M, std::move(v)}; }

}  // namespace

TEST(LogProbMatrix, RowsAreLogDistributions) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<double>(cfg, 1);
    const ScoringContext<double> ctx(model);
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const auto h = test::random_vector(cfg.d, rng);
        const auto P = subspace_logprob_matrix(model, ctx, std::span<const double>(h));
        for (std::size_t j = 0; j < cfg.m; ++j) {
            double s = 0.0;
            for (double v : P.row(j)) {
                EXPECT_LE(v, 0.0);
                s += std::exp(v);
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(LogProbMatrix, IdenticalCodewordsGiveMinusLogM) {
    const auto cfg = test::tiny_config();
    auto model = init_model<double>(cfg, 2);
    for (std::size_t v = 0; v < cfg.M; ++v)
        for (std::size_t c = 0; c < cfg.d; ++c) model.token_table.at(1 * cfg.M + v, c) = model.token_table.at(cfg.M, c);
    Rng rng(2);
    const auto h = test::random_vector(cfg.d, rng);
    const auto P = subspace_logprob_matrix(model, std::span<const double>(h));
    for (double v : P.row(1)) EXPECT_NEAR(v, -std::log(double(cfg.M)), 1e-12);
}

TEST(LogProbMatrix, MatchesScalarRecomputation) {
    ModelConfig c;
    c.d = 4;
    c.m = 2;
    c.k = 1;
    c.M = 2;
    c.n_heads = 2;
    c.ffn_dim = 4;
    c.max_steps = 2;
    const auto model = init_model<double>(c, 3);
    const std::vector<double> h{0.4, -1.1, 0.7, 2.0};
    const auto P = subspace_logprob_matrix(model, std::span<const double>(h));
    for (std::size_t j = 0; j < 2; ++j) {
        const auto dist = mtp_digit_distribution(model, std::span<const double>(h), j);
        for (std::size_t v = 0; v < 2; ++v) EXPECT_NEAR(P(j, v), std::log(dist[v]), 1e-12);
    }
}

TEST(HolisticScores, HandSum) {
    const auto P = matrix(2, 2, {-0.1, -2.4, -1.0, -0.5});
    const SemanticIdTable codes{3, 2, {0, 1, 1, 0, 0, 1}};
    const auto s = holistic_scores(P, codes);
    EXPECT_NEAR(s[0], -0.6, 1e-15);
    EXPECT_NEAR(s[1], -3.4, 1e-15);
    EXPECT_EQ(s[0], s[2]);
}

TEST(HolisticScores, SingleDigit) {
    const auto P = matrix(1, 3, {-1.0, -0.2, -3.0});
    const auto s = holistic_scores(P, SemanticIdTable{3, 1, {2, 0, 1}});
    EXPECT_EQ(s, (std::vector<double>{-3.0, -1.0, -0.2}));
    EXPECT_THROW(holistic_scores(P, SemanticIdTable{1, 1, {3}}), ShapeError);
    EXPECT_THROW(holistic_scores(P, SemanticIdTable{1, 2, {0, 0}}), ShapeError);
}

TEST(TopK, ArgmaxAndTies) {
    const std::vector<double> s{0.1, 0.9, 0.3};
    EXPECT_EQ(top_k(s, 1), (std::vector<ScoredItem>{{1, 0.9}}));
    const std::vector<double> tie{0.5, 0.9, 0.9, 0.1};
    const auto t = top_k(tie, 2);
    EXPECT_EQ(t[0].index, 1u);
    EXPECT_EQ(t[1].index, 2u);
    EXPECT_THROW(top_k(tie, 0), ConfigError);
    EXPECT_EQ(top_k(tie, 10).size(), 4u);
}

TEST(TopK, FullRankingMatchesSortOracle) {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> s(300);
        // coarse values force many ties
        for (auto& x : s) x = double(rng.below(20));
        const auto got = top_k(s, s.size());
        std::vector<std::uint32_t> idx(s.size());
        std::iota(idx.begin(), idx.end(), 0u);
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
        for (std::size_t r = 0; r < s.size(); ++r) {
            EXPECT_EQ(got[r].index, idx[r]);
            EXPECT_EQ(rank_of(std::span<const double>(s), idx[r]), r + 1);
        }
    }
}

TEST(OracleScores, AgreesWithHolisticScoring) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<double>(cfg, 5);
    const auto codes = test::random_table(200, cfg.m, cfg.M, 5);
    Rng rng(5);
    const auto h = test::random_vector(cfg.d, rng);
    const auto fast = holistic_scores(subspace_logprob_matrix(model, std::span<const double>(h)), codes);
    const auto slow = oracle_scores(model, std::span<const double>(h), codes);
    for (std::size_t j = 0; j < codes.rows; ++j) EXPECT_NEAR(fast[j], slow[j], 1e-9);
}

TEST(OracleScores, SingleItemAndPermutation) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<double>(cfg, 6);
    const auto codes = test::random_table(30, cfg.m, cfg.M, 6);
    Rng rng(6);
    const auto h = test::random_vector(cfg.d, rng);
    const auto base = oracle_scores(model, std::span<const double>(h), codes);

    const SemanticIdTable one{1, cfg.m, std::vector<std::uint16_t>(codes.row(4).begin(), codes.row(4).end())};
    double s = 0.0;
    for (std::size_t j = 0; j < cfg.m; ++j)
        s += std::log(mtp_digit_distribution(model, std::span<const double>(h), j)[codes(4, j)]);
    EXPECT_NEAR(oracle_scores(model, std::span<const double>(h), one)[0], s, 1e-12);

    std::vector<std::uint32_t> perm(codes.rows);
    std::iota(perm.begin(), perm.end(), 0u);
    rng.shuffle(perm.begin(), perm.end());
    SemanticIdTable shuffled{codes.rows, cfg.m, {}};
    for (auto p : perm) shuffled.codes.insert(shuffled.codes.end(), codes.row(p).begin(), codes.row(p).end());
    const auto moved = oracle_scores(model, std::span<const double>(h), shuffled);
    for (std::size_t r = 0; r < perm.size(); ++r) EXPECT_EQ(moved[r], base[perm[r]]);
}

TEST(HistoryIntents, LastStepOfTruncatedHistory) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<double>(cfg, 7);
    const auto codes = test::random_table(20, cfg.m, cfg.M, 7);
    const std::vector<std::uint32_t> longer{1, 2, 3, 4, 5, 6, 7, 8, 9};
    const std::vector<std::uint32_t> recent(longer.end() - 6, longer.end());
    const auto got = history_intents(model, {longer, {3, 4}}, codes);
    const auto ref = forward_sequence(model, make_sequence_batch({recent}, codes));
    for (std::size_t c = 0; c < cfg.d; ++c) EXPECT_NEAR(got[0][c], ref.intents.at(5, c), 1e-12);
}

TEST(TargetRanks, ThreadCountDoesNotMatter) {
    const auto cfg = test::tiny_config();
    const auto model = init_model<float>(cfg, 8);
    const auto codes = test::random_table(25, cfg.m, cfg.M, 8);
    Rng rng(8);
    std::vector<UserSplit> users;
    for (int u = 0; u < 17; ++u) {
        UserSplit s;
        s.user_id = "u" + std::to_string(u);
        for (std::size_t t = 0; t < 2 + rng.below(6); ++t) s.train.push_back(std::uint32_t(rng.below(25)));
        s.val = std::uint32_t(rng.below(25));
        s.test = std::uint32_t(rng.below(25));
        users.push_back(s);
    }
    const auto split = test::make_split(25, users);
    const auto a = target_ranks(model, split, codes, Target::Test, 1);
    const auto b = target_ranks(model, split, codes, Target::Test, 3);
    EXPECT_EQ(a, b);
    for (auto r : a) {
        EXPECT_GE(r, 1u);
        EXPECT_LE(r, 25u);
    }
}

TEST(TargetRanks, HistoryRules) {
    UserSplit u;
    u.train = {1, 2};
    u.val = 3;
    u.test = 4;
    EXPECT_EQ(history_for(u, Target::Validation), (std::vector<std::uint32_t>{1, 2}));
    EXPECT_EQ(history_for(u, Target::Test), (std::vector<std::uint32_t>{1, 2, 3}));
    EXPECT_EQ(target_of(u, Target::Validation), 3u);
    EXPECT_EQ(target_of(u, Target::Test), 4u);
}
