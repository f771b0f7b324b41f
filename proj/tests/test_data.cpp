#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "helpers.hpp"

using namespace acerec;

namespace {

std::vector<Interaction> parse(const std::string& text) {
    std::istringstream in(text);
    return parse_interactions(in);
}

// Removes one offending user or item per round until none is left.
std::vector<Interaction> kcore_one_at_a_time(std::vector<Interaction> log, std::size_t k) {
    while (true) {
        std::map<std::string, std::size_t> users, items;
        for (const auto& x : log) {
            ++users[x.user_id];
            ++items[x.item_id];
        }
        std::string bad_user, bad_item;
        for (auto& [u, c] : users)
            if (c < k) {
                bad_user = u;
                break;
            }
        if (bad_user.empty())
            for (auto& [i, c] : items)
                if (c < k) {
                    bad_item = i;
                    break;
                }
        if (bad_user.empty() && bad_item.empty()) return log;
        std::vector<Interaction> next;
        for (auto& x : log)
            if (x.user_id != bad_user && x.item_id != bad_item) next.push_back(x);
        log = std::move(next);
    }
}

std::string embedding_bytes(const std::vector<std::string>& ids, const std::vector<std::vector<float>>& rows) {
    ItemEmbeddingMatrix x{rows.size(), rows.empty() ? 1 : rows[0].size(), {}};
    for (const auto& r : rows) x.values.insert(x.values.end(), r.begin(), r.end());
    std::ostringstream os;
    write_embeddings(os, ids, x);
    return os.str();
}

}  // namespace

TEST(ParseInteractions, SingleRecord) {
    const auto log = parse("u1\ti9\t100\n");
    ASSERT_EQ(log.size(), 1u);
    EXPECT_EQ(log[0], (Interaction{"u1", "i9", 100}));
}

TEST(ParseInteractions, EmptyStream) { EXPECT_TRUE(parse("").empty()); }

TEST(ParseInteractions, MissingFieldReportsLine) {
    try {
        parse("u1\ti9\n");
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 1u);
    }
    try {
        parse("u1\ti9\t1\nu2\ti3\tx\n");
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
    }
}

TEST(ParseInteractions, RejectsNegativeTimestampAndEmptyIds) {
    EXPECT_THROW(parse("u1\ti9\t-3\n"), ParseError);
    EXPECT_THROW(parse("\ti9\t3\n"), ParseError);
}

TEST(KCore, DropsUserBelowThreshold) {
    std::vector<Interaction> log;
    for (int u = 0; u < 5; ++u)
        for (int i = 0; i < 5; ++i) log.push_back({"u" + std::to_string(u), "i" + std::to_string(i), i});
    for (int i = 0; i < 4; ++i) log.push_back({"short", "i" + std::to_string(i), i});
    const auto kept = kcore_filter(log, 5);
    for (const auto& x : kept) EXPECT_NE(x.user_id, "short");
    EXPECT_EQ(kept.size(), 25u);
}

TEST(KCore, FixedPointIsUnchanged) {
    std::vector<Interaction> log;
    for (int u = 0; u < 5; ++u)
        for (int i = 0; i < 5; ++i) log.push_back({"u" + std::to_string(u), "i" + std::to_string(i), u * 10 + i});
    EXPECT_EQ(kcore_filter(log, 5), log);
}

TEST(KCore, ChainRemovalMatchesOneAtATime) {
    // u2 survives the first pass, but dropping item x leaves it below 2
    std::vector<Interaction> log{{"u0", "a", 0}, {"u0", "b", 1}, {"u1", "a", 0}, {"u1", "b", 1},
                                 {"u2", "x", 0}, {"u2", "a", 1}, {"u3", "y", 0}};
    const auto got = kcore_filter(log, 2);
    EXPECT_EQ(got, kcore_one_at_a_time(log, 2));
    for (const auto& x : got) EXPECT_NE(x.user_id, "u2");
}

TEST(KCore, RandomLogsMatchOneAtATime) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Interaction> log;
        const std::size_t n = 40 + rng.below(80);
        for (std::size_t r = 0; r < n; ++r)
            log.push_back({"u" + std::to_string(rng.below(12)), "i" + std::to_string(rng.below(15)), std::int64_t(r)});
        const auto oracle = kcore_one_at_a_time(log, 3);
        if (oracle.empty()) {
            EXPECT_THROW(kcore_filter(log, 3), InvariantError);
        } else {
            EXPECT_EQ(kcore_filter(log, 3), oracle);
        }
    }
}

TEST(KCore, EmptyResultIsAnError) {
    EXPECT_THROW(kcore_filter({{"u", "i", 0}}, 5), InvariantError);
}

TEST(Split, LeaveLastOut) {
    std::vector<Interaction> log;
    const std::string seq = "abcde";
    for (std::size_t t = 0; t < seq.size(); ++t) log.push_back({"u", std::string(1, seq[t]), std::int64_t(t)});
    const auto s = split_leave_last_out(log, 50);
    ASSERT_EQ(s.users.size(), 1u);
    const auto& u = s.users[0];
    ASSERT_EQ(u.train.size(), 3u);
    EXPECT_EQ(s.items[u.train[0]], "a");
    EXPECT_EQ(s.items[u.train[2]], "c");
    EXPECT_EQ(s.items[u.val], "d");
    EXPECT_EQ(s.items[u.test], "e");
}

TEST(Split, TruncatesToMostRecent) {
    std::vector<Interaction> log;
    for (int t = 0; t < 62; ++t) log.push_back({"u", "i" + std::to_string(t), t});
    const auto s = split_leave_last_out(log, 50);
    const auto& u = s.users[0];
    ASSERT_EQ(u.train.size(), 50u);
    EXPECT_EQ(s.items[u.train.front()], "i10");
    EXPECT_EQ(s.items[u.train.back()], "i59");
}

TEST(Split, ChronologicalOrderWithFileOrderTies) {
    const std::vector<Interaction> log{{"u", "c", 5}, {"u", "a", 1}, {"u", "x", 3}, {"u", "y", 3}, {"u", "z", 9}};
    const auto a = split_leave_last_out(log, 50);
    const auto b = split_leave_last_out(log, 50);
    EXPECT_EQ(split_to_json(a).dump(), split_to_json(b).dump());
    const auto& u = a.users[0];
    std::vector<std::string> train;
    for (auto i : u.train) train.push_back(a.items[i]);
    EXPECT_EQ(train, (std::vector<std::string>{"a", "x", "y"}));
    EXPECT_EQ(a.items[u.val], "c");
    EXPECT_EQ(a.items[u.test], "z");
}

TEST(Split, TooShortUserIsAnError) {
    EXPECT_THROW(split_leave_last_out({{"u", "a", 0}, {"u", "b", 1}}, 50), InvariantError);
}

TEST(Split, InvariantsOnSyntheticCorpus) {
    SynthParams p;
    p.n_users = 300;
    const auto corpus = generate_synthetic_corpus(p);
    const auto split = split_leave_last_out(kcore_filter(corpus.interactions, 5), 10);
    std::map<std::string, std::vector<std::int64_t>> times;
    for (const auto& u : split.users) {
        EXPECT_GE(u.train.size(), 1u);
        EXPECT_LE(u.train.size(), 10u);
        for (auto i : u.train) EXPECT_LT(i, split.num_items());
        EXPECT_LT(u.val, split.num_items());
        EXPECT_LT(u.test, split.num_items());
    }
    const auto round = split_from_json(split_to_json(split));
    EXPECT_EQ(round.users, split.users);
    EXPECT_EQ(round.items, split.items);
}

TEST(Embeddings, RowsFollowDenseIndex) {
    const auto split = test::make_split(2, {});
    // file order is reversed relative to the catalog
    std::istringstream in(embedding_bytes({"i1", "i0"}, {{0, 1, 0}, {1, 0, 0}}));
    const auto x = load_item_embeddings(in, split);
    EXPECT_EQ(x.rows, 2u);
    EXPECT_EQ(x.dim, 3u);
    EXPECT_EQ(x(0, 0), 1.0f);
    EXPECT_EQ(x(1, 1), 1.0f);
    EXPECT_EQ(x(0, 1), 0.0f);
}

TEST(Embeddings, MissingItemIsNamed) {
    const auto split = test::make_split(3, {});
    std::istringstream in(embedding_bytes({"i0", "i1"}, {{1, 0}, {0, 1}}));
    try {
        load_item_embeddings(in, split);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("missing embedding"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("i2"), std::string::npos);
    }
}

TEST(Embeddings, DuplicateZeroAndNonFiniteRowsRejected) {
    const auto split = test::make_split(2, {});
    {
        std::istringstream in(embedding_bytes({"i0", "i1", "i0"}, {{1, 0}, {0, 1}, {1, 1}}));
        EXPECT_THROW(load_item_embeddings(in, split), FormatError);
    }
    {
        std::istringstream in(embedding_bytes({"i0", "i1"}, {{0, 0}, {0, 1}}));
        EXPECT_THROW(load_item_embeddings(in, split), FormatError);
    }
    {
        std::istringstream in(embedding_bytes({"i0", "i1"}, {{NAN, 0}, {0, 1}}));
        EXPECT_THROW(load_item_embeddings(in, split), FormatError);
    }
}

TEST(Embeddings, TruncatedPayloadRejected) {
    const auto split = test::make_split(2, {});
    auto bytes = embedding_bytes({"i0", "i1"}, {{1, 0}, {0, 1}});
    bytes.resize(bytes.size() - 2);
    std::istringstream in(bytes);
    EXPECT_THROW(load_item_embeddings(in, split), FormatError);
}

TEST(Synthetic, SameSeedSameBytes) {
    SynthParams p;
    p.n_users = 200;
    const auto a = generate_synthetic_corpus(p);
    const auto b = generate_synthetic_corpus(p);
    std::ostringstream la, lb, ea, eb;
    write_interactions(la, a.interactions);
    write_interactions(lb, b.interactions);
    write_embeddings(ea, a.item_ids, a.embeddings);
    write_embeddings(eb, b.item_ids, b.embeddings);
    EXPECT_EQ(la.str(), lb.str());
    EXPECT_EQ(ea.str(), eb.str());
}

TEST(Synthetic, ZeroNoiseGivesCentroids) {
    SynthParams p;
    p.n_users = 10;
    p.noise = 0.0;
    const auto c = generate_synthetic_corpus(p);
    for (std::size_t i = 0; i < p.n_items; ++i)
        for (std::size_t d = 0; d < p.dim; ++d)
            EXPECT_EQ(c.embeddings(i, d), d == c.item_cluster[i] ? 1.0f : 0.0f);
}

TEST(Synthetic, ClusterPurityNearTarget) {
    SynthParams p;  // 2,000 users
    const auto c = generate_synthetic_corpus(p);
    std::map<std::string, std::uint32_t> item_index;
    for (std::uint32_t i = 0; i < c.item_ids.size(); ++i) item_index[c.item_ids[i]] = i;
    std::size_t same = 0;
    for (const auto& x : c.interactions) {
        const auto user = std::stoul(x.user_id.substr(1));
        if (c.item_cluster[item_index[x.item_id]] == c.user_cluster[user]) ++same;
    }
    // off-cluster draws land in the home cluster 1/n_clusters of the time
    const double purity = double(same) / double(c.interactions.size());
    EXPECT_NEAR(purity, 0.8, 0.05);
}
