#pragma once

// Interaction logs, leave-last-out splitting, item embeddings and the
// synthetic corpus used by the desk-scale tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "acerec/binary_io.hpp"
#include "acerec/error.hpp"
#include "acerec/rng.hpp"

namespace acerec {

struct Interaction {
    std::string user_id;
    std::string item_id;
    std::int64_t timestamp = 0;

    friend bool operator==(const Interaction&, const Interaction&) = default;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

}  // namespace detail

// Reads `user<TAB>item<TAB>timestamp` lines. Blank lines and lines starting
// with '#' are skipped.
inline std::vector<Interaction> parse_interactions(std::istream& source) {
    std::vector<Interaction> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(source, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const auto fields = detail::split_tabs(line);
        if (fields.size() != 3)
            throw ParseError(lineno, "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
        if (fields[0].empty() || fields[1].empty()) throw ParseError(lineno, "empty user or item id");
        std::int64_t ts = 0;
        const std::string ts_text(fields[2]);
        std::size_t used = 0;
        try {
            ts = std::stoll(ts_text, &used);
        } catch (const std::exception&) {
            throw ParseError(lineno, "unparseable timestamp '" + ts_text + "'");
        }
        if (used != ts_text.size()) throw ParseError(lineno, "unparseable timestamp '" + ts_text + "'");
        if (ts < 0) throw ParseError(lineno, "negative timestamp");
        out.push_back({std::string(fields[0]), std::string(fields[1]), ts});
    }
    return out;
}

inline std::vector<Interaction> read_interactions_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open interactions file: " + path);
    return parse_interactions(in);
}

inline void write_interactions(std::ostream& os, const std::vector<Interaction>& log) {
    for (const auto& x : log) os << x.user_id << '\t' << x.item_id << '\t' << x.timestamp << '\n';
}

// Iteratively drops users and items below their thresholds until nothing
// changes. Relative order of the surviving records is preserved.
inline std::vector<Interaction> kcore_filter(std::vector<Interaction> interactions, std::size_t min_user_count,
                                             std::size_t min_item_count) {
    if (min_user_count == 0 || min_item_count == 0) throw ConfigError("k-core threshold must be >= 1");
    while (true) {
        std::unordered_map<std::string, std::size_t> users, items;
        for (const auto& x : interactions) {
            ++users[x.user_id];
            ++items[x.item_id];
        }
        std::vector<Interaction> kept;
        kept.reserve(interactions.size());
        for (auto& x : interactions)
            if (users[x.user_id] >= min_user_count && items[x.item_id] >= min_item_count) kept.push_back(std::move(x));
        const bool changed = kept.size() != interactions.size();
        interactions = std::move(kept);
        if (!changed) break;
    }
    if (interactions.empty()) throw InvariantError("empty-after-filter: k-core filter removed every interaction");
    return interactions;
}

inline std::vector<Interaction> kcore_filter(std::vector<Interaction> interactions, std::size_t min_count) {
    return kcore_filter(std::move(interactions), min_count, min_count);
}

struct UserSplit {
    std::string user_id;
    std::vector<std::uint32_t> train;  // chronological, at most max_seq_len long
    std::uint32_t val = 0;
    std::uint32_t test = 0;

    friend bool operator==(const UserSplit&, const UserSplit&) = default;
};

struct SplitDataset {
    std::vector<std::string> items;  // dense index -> item id
    std::unordered_map<std::string, std::uint32_t> item_lookup;
    std::vector<UserSplit> users;
    std::size_t max_seq_len = 50;

    std::size_t num_items() const { return items.size(); }

    std::uint32_t index_of(const std::string& item_id) const {
        const auto it = item_lookup.find(item_id);
        if (it == item_lookup.end()) throw Error("unknown item id: " + item_id);
        return it->second;
    }

    const UserSplit& user(const std::string& user_id) const {
        for (const auto& u : users)
            if (u.user_id == user_id) return u;
        throw Error("unknown user id: " + user_id);
    }

    void rebuild_lookup() {
        item_lookup.clear();
        for (std::uint32_t i = 0; i < items.size(); ++i) {
            if (!item_lookup.emplace(items[i], i).second) throw FormatError("duplicate item id in index: " + items[i]);
        }
    }
};

// Chronological leave-last-out split. Items are indexed in order of first
// appearance in the input; users keep input order as well.
inline SplitDataset split_leave_last_out(const std::vector<Interaction>& interactions, std::size_t max_seq_len) {
    if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
    SplitDataset out;
    out.max_seq_len = max_seq_len;

    std::vector<std::string> user_order;
    std::unordered_map<std::string, std::vector<std::size_t>> per_user;
    for (std::size_t i = 0; i < interactions.size(); ++i) {
        const auto& x = interactions[i];
        if (!out.item_lookup.count(x.item_id)) {
            out.item_lookup.emplace(x.item_id, static_cast<std::uint32_t>(out.items.size()));
            out.items.push_back(x.item_id);
        }
        auto [it, inserted] = per_user.try_emplace(x.user_id);
        if (inserted) user_order.push_back(x.user_id);
        it->second.push_back(i);
    }

    out.users.reserve(user_order.size());
    for (const auto& uid : user_order) {
        auto rows = per_user[uid];
        if (rows.size() < 3)
            throw InvariantError("user " + uid + " has " + std::to_string(rows.size()) +
                                 " interactions; leave-last-out needs at least 3");
        // stable: equal timestamps keep file order
        std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
            return interactions[a].timestamp < interactions[b].timestamp;
        });
        UserSplit u;
        u.user_id = uid;
        const std::size_t n = rows.size();
        u.test = out.item_lookup.at(interactions[rows[n - 1]].item_id);
        u.val = out.item_lookup.at(interactions[rows[n - 2]].item_id);
        const std::size_t train_len = n - 2;
        const std::size_t first = train_len > max_seq_len ? train_len - max_seq_len : 0;
        for (std::size_t i = first; i < train_len; ++i) u.train.push_back(out.item_lookup.at(interactions[rows[i]].item_id));
        out.users.push_back(std::move(u));
    }
    return out;
}

inline nlohmann::json split_to_json(const SplitDataset& split) {
    nlohmann::json users = nlohmann::json::array();
    for (const auto& u : split.users)
        users.push_back({{"user", u.user_id}, {"train", u.train}, {"val", u.val}, {"test", u.test}});
    return {{"max_seq_len", split.max_seq_len}, {"items", split.items}, {"users", users}};
}

inline SplitDataset split_from_json(const nlohmann::json& j) {
    SplitDataset s;
    try {
        s.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        s.items = j.at("items").get<std::vector<std::string>>();
        s.rebuild_lookup();
        for (const auto& ju : j.at("users")) {
            UserSplit u;
            u.user_id = ju.at("user").get<std::string>();
            u.train = ju.at("train").get<std::vector<std::uint32_t>>();
            u.val = ju.at("val").get<std::uint32_t>();
            u.test = ju.at("test").get<std::uint32_t>();
            for (auto i : u.train)
                if (i >= s.items.size()) throw FormatError("item index out of range in split manifest");
            if (u.val >= s.items.size() || u.test >= s.items.size())
                throw FormatError("item index out of range in split manifest");
            s.users.push_back(std::move(u));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed split manifest: ") + e.what());
    }
    return s;
}

inline void save_split(const SplitDataset& split, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path);
    os << split_to_json(split).dump() << '\n';
}

inline SplitDataset load_split(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("missing split manifest: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("cannot parse " + path + ": " + e.what());
    }
    return split_from_json(j);
}

// Row r holds the content embedding of the item with dense index r.
struct ItemEmbeddingMatrix {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<float> values;

    float operator()(std::size_t r, std::size_t c) const { return values[r * dim + c]; }
    float& operator()(std::size_t r, std::size_t c) { return values[r * dim + c]; }
    const float* row(std::size_t r) const { return values.data() + r * dim; }
};

inline const std::string kEmbeddingMagic = "ACEEMB01";

// Binary layout: magic, u64 row_count, u64 dim, then per row a u32
// length-prefixed item id followed by dim little-endian f32 values.
inline void write_embeddings(std::ostream& os, const std::vector<std::string>& ids, const ItemEmbeddingMatrix& x) {
    if (ids.size() != x.rows) throw ShapeError("id count does not match embedding rows");
    io::write_bytes(os, kEmbeddingMagic);
    io::write_le<std::uint64_t>(os, x.rows);
    io::write_le<std::uint64_t>(os, x.dim);
    for (std::size_t r = 0; r < x.rows; ++r) {
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ids[r].size()));
        io::write_bytes(os, ids[r]);
        for (std::size_t c = 0; c < x.dim; ++c) io::write_le<float>(os, x(r, c));
    }
}

struct RawEmbeddings {
    std::vector<std::string> ids;
    ItemEmbeddingMatrix matrix;
};

inline RawEmbeddings read_embeddings(std::istream& is) {
    io::expect_magic(is, kEmbeddingMagic, "embedding file");
    RawEmbeddings raw;
    const auto rows = io::read_le<std::uint64_t>(is, "row count");
    const auto dim = io::read_le<std::uint64_t>(is, "dim");
    if (dim == 0) throw FormatError("embedding dim must be positive");
    raw.matrix.rows = rows;
    raw.matrix.dim = dim;
    raw.matrix.values.resize(rows * dim);
    raw.ids.reserve(rows);
    for (std::uint64_t r = 0; r < rows; ++r) {
        const auto len = io::read_le<std::uint32_t>(is, "item id length");
        raw.ids.push_back(io::read_bytes(is, len, "item id"));
        for (std::uint64_t c = 0; c < dim; ++c)
            raw.matrix.values[r * dim + c] = io::read_le<float>(is, "embedding payload (dimension mismatch?)");
    }
    if (is.peek() != std::char_traits<char>::eof())
        throw FormatError("trailing bytes after embedding payload (dimension mismatch?)");
    return raw;
}

// Permutes file rows into the dense item order of `split`. Rows for items
// outside the catalog are ignored.
inline ItemEmbeddingMatrix load_item_embeddings(std::istream& source, const SplitDataset& split) {
    const auto raw = read_embeddings(source);
    const std::size_t dim = raw.matrix.dim;
    ItemEmbeddingMatrix out;
    out.rows = split.num_items();
    out.dim = dim;
    out.values.assign(out.rows * dim, 0.0f);
    std::vector<char> seen(out.rows, 0);
    std::unordered_set<std::string> ids_in_file;
    for (std::size_t r = 0; r < raw.ids.size(); ++r) {
        const auto& id = raw.ids[r];
        if (!ids_in_file.insert(id).second) throw FormatError("duplicate embedding row for item " + id);
        const auto it = split.item_lookup.find(id);
        if (it == split.item_lookup.end()) continue;
        const auto dst = it->second;
        bool nonzero = false;
        for (std::size_t c = 0; c < dim; ++c) {
            const float v = raw.matrix(r, c);
            if (!std::isfinite(v)) throw FormatError("non-finite embedding value for item " + id);
            nonzero = nonzero || v != 0.0f;
            out(dst, c) = v;
        }
        if (!nonzero) throw FormatError("all-zero embedding row for item " + id);
        seen[dst] = 1;
    }
    for (std::size_t i = 0; i < out.rows; ++i)
        if (!seen[i]) throw FormatError("missing embedding for item " + split.items[i]);
    return out;
}

inline ItemEmbeddingMatrix load_item_embeddings(const std::string& path, const SplitDataset& split) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open embeddings file: " + path);
    return load_item_embeddings(is, split);
}

struct SynthParams {
    std::uint64_t seed = 7;
    std::size_t n_users = 2000;
    std::size_t n_items = 500;
    std::size_t n_clusters = 10;
    std::size_t dim = 64;
    double noise = 0.05;
    double in_cluster = 0.8;
    std::size_t min_len = 8;
    std::size_t max_len = 20;
};

struct SyntheticCorpus {
    std::vector<Interaction> interactions;
    std::vector<std::string> item_ids;  // generator order, matches embedding rows
    ItemEmbeddingMatrix embeddings;
    std::vector<std::uint32_t> item_cluster;
    std::vector<std::uint32_t> user_cluster;
};

// Clustered toy catalog: cluster c has centroid e_c (a unit basis vector),
// items are centroid plus isotropic Gaussian noise, and each user mostly
// samples from one home cluster.
inline SyntheticCorpus generate_synthetic_corpus(const SynthParams& p) {
    if (p.n_clusters == 0 || p.n_clusters > p.n_items) throw ConfigError("synth: need 1 <= n_clusters <= n_items");
    if (p.dim < p.n_clusters) throw ConfigError("synth: dim must be >= n_clusters");
    if (p.n_users == 0) throw ConfigError("synth: n_users must be positive");
    if (p.min_len == 0 || p.min_len > p.max_len) throw ConfigError("synth: bad sequence length range");
    if (p.noise < 0.0 || p.in_cluster < 0.0 || p.in_cluster > 1.0) throw ConfigError("synth: bad noise/in_cluster");

    Rng rng(p.seed);
    SyntheticCorpus out;
    std::vector<std::uint32_t> perm(p.n_items);
    for (std::uint32_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    out.item_cluster.assign(p.n_items, 0);
    std::vector<std::vector<std::uint32_t>> members(p.n_clusters);
    for (std::size_t r = 0; r < p.n_items; ++r) {
        const auto c = static_cast<std::uint32_t>(r % p.n_clusters);
        out.item_cluster[perm[r]] = c;
    }
    for (std::uint32_t i = 0; i < p.n_items; ++i) members[out.item_cluster[i]].push_back(i);

    out.embeddings.rows = p.n_items;
    out.embeddings.dim = p.dim;
    out.embeddings.values.assign(p.n_items * p.dim, 0.0f);
    out.item_ids.reserve(p.n_items);
    for (std::uint32_t i = 0; i < p.n_items; ++i) {
        out.item_ids.push_back("i" + std::to_string(i));
        for (std::size_t c = 0; c < p.dim; ++c) {
            const double centroid = c == out.item_cluster[i] ? 1.0 : 0.0;
            const double noise = p.noise > 0.0 ? p.noise * rng.normal() : 0.0;
            out.embeddings(i, c) = static_cast<float>(centroid + noise);
        }
    }

    out.user_cluster.reserve(p.n_users);
    for (std::size_t u = 0; u < p.n_users; ++u) {
        const auto home = static_cast<std::uint32_t>(rng.below(p.n_clusters));
        out.user_cluster.push_back(home);
        const std::size_t len = p.min_len + rng.below(p.max_len - p.min_len + 1);
        const std::string uid = "u" + std::to_string(u);
        for (std::size_t t = 0; t < len; ++t) {
            std::uint32_t item;
            if (rng.uniform() < p.in_cluster) {
                const auto& pool = members[home];
                item = pool[rng.below(pool.size())];
            } else {
                item = static_cast<std::uint32_t>(rng.below(p.n_items));
            }
            out.interactions.push_back({uid, out.item_ids[item], static_cast<std::int64_t>(t)});
        }
    }
    return out;
}

}  // namespace acerec
