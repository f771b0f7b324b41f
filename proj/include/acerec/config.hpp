#pragma once

// Run configuration: one JSON document with a section per stage. Values can
// be overridden with `key=value` strings where key is either dotted
// ("model.d") or a bare field name that occurs in exactly one section.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "acerec/data.hpp"
#include "acerec/error.hpp"
#include "acerec/model.hpp"
#include "acerec/rng.hpp"
#include "acerec/trainer.hpp"

namespace acerec {

struct DataConfig {
    std::string interactions;  // empty: <out>/interactions.tsv
    std::string embeddings;    // empty: <out>/embeddings.bin
    std::size_t min_user_count = 5;
    std::size_t min_item_count = 5;
    std::size_t max_seq_len = 50;
};

struct TokenizerConfig {
    std::size_t iters = 20;
    std::size_t lloyd_iters = 10;
    bool learn_rotation = true;
};

struct EvalConfig {
    std::vector<std::size_t> ks{5, 10};
    std::size_t top_k = 10;
    bool filter_history = false;  // recommend only: drop items the user has seen
};

struct RunConfig {
    std::uint64_t seed = 7;
    std::string out = "out";
    std::size_t threads = 0;  // 0: ACEREC_THREADS or 1
    DataConfig data;
    SynthParams synth;
    TokenizerConfig tokenizer;
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;

    void validate() const {
        model.validate();
        train.validate();
        if (data.max_seq_len == 0) throw ConfigError("data.max_seq_len must be positive");
        if (data.min_user_count == 0 || data.min_item_count == 0) throw ConfigError("k-core thresholds must be >= 1");
        if (tokenizer.iters == 0) throw ConfigError("tokenizer.iters must be >= 1");
        if (eval.ks.empty() || eval.top_k == 0) throw ConfigError("eval.ks and eval.top_k must be non-empty/positive");
        for (auto k : eval.ks)
            if (k == 0) throw ConfigError("eval.ks entries must be positive");
    }

    std::string interactions_path() const { return data.interactions.empty() ? out + "/interactions.tsv" : data.interactions; }
    std::string embeddings_path() const { return data.embeddings.empty() ? out + "/embeddings.bin" : data.embeddings; }
    std::string path(const std::string& file) const { return out + "/" + file; }

    TrainConfig resolved_train() const {
        TrainConfig t = train;
        t.seed = seed;
        return t;
    }

    SynthParams resolved_synth() const {
        SynthParams p = synth;
        p.seed = stage_seed(seed, "synth");
        return p;
    }
};

inline nlohmann::json to_json(const RunConfig& c) {
    auto train = to_json(c.train);
    train.erase("seed");  // derived from the top-level seed
    return {{"seed", c.seed},
            {"out", c.out},
            {"threads", c.threads},
            {"data",
             {{"interactions", c.data.interactions},
              {"embeddings", c.data.embeddings},
              {"min_user_count", c.data.min_user_count},
              {"min_item_count", c.data.min_item_count},
              {"max_seq_len", c.data.max_seq_len}}},
            {"synth",
             {{"n_users", c.synth.n_users},
              {"n_items", c.synth.n_items},
              {"n_clusters", c.synth.n_clusters},
              {"dim", c.synth.dim},
              {"noise", c.synth.noise},
              {"in_cluster", c.synth.in_cluster},
              {"min_len", c.synth.min_len},
              {"max_len", c.synth.max_len}}},
            {"tokenizer",
             {{"iters", c.tokenizer.iters}, {"lloyd_iters", c.tokenizer.lloyd_iters}, {"learn_rotation", c.tokenizer.learn_rotation}}},
            {"model", to_json(c.model)},
            {"train", train},
            {"eval", {{"ks", c.eval.ks}, {"top_k", c.eval.top_k}, {"filter_history", c.eval.filter_history}}}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
    if (!given.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (auto it = given.begin(); it != given.end(); ++it) {
        if (!known.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
        if (known[it.key()].is_object()) reject_unknown(it.value(), known[it.key()], where + it.key() + ".");
    }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        detail::reject_unknown(j, to_json(c), "");
        c.seed = j.value("seed", c.seed);
        c.out = j.value("out", c.out);
        c.threads = j.value("threads", c.threads);
        const auto sec = [&](const char* name) { return j.contains(name) ? j.at(name) : nlohmann::json::object(); };
        const auto d = sec("data");
        c.data.interactions = d.value("interactions", c.data.interactions);
        c.data.embeddings = d.value("embeddings", c.data.embeddings);
        c.data.min_user_count = d.value("min_user_count", c.data.min_user_count);
        c.data.min_item_count = d.value("min_item_count", c.data.min_item_count);
        c.data.max_seq_len = d.value("max_seq_len", c.data.max_seq_len);
        const auto s = sec("synth");
        c.synth.n_users = s.value("n_users", c.synth.n_users);
        c.synth.n_items = s.value("n_items", c.synth.n_items);
        c.synth.n_clusters = s.value("n_clusters", c.synth.n_clusters);
        c.synth.dim = s.value("dim", c.synth.dim);
        c.synth.noise = s.value("noise", c.synth.noise);
        c.synth.in_cluster = s.value("in_cluster", c.synth.in_cluster);
        c.synth.min_len = s.value("min_len", c.synth.min_len);
        c.synth.max_len = s.value("max_len", c.synth.max_len);
        const auto t = sec("tokenizer");
        c.tokenizer.iters = t.value("iters", c.tokenizer.iters);
        c.tokenizer.lloyd_iters = t.value("lloyd_iters", c.tokenizer.lloyd_iters);
        c.tokenizer.learn_rotation = t.value("learn_rotation", c.tokenizer.learn_rotation);
        c.model = model_config_from_json(sec("model"));
        c.train = train_config_from_json(sec("train"));
        const auto e = sec("eval");
        c.eval.ks = e.value("ks", c.eval.ks);
        c.eval.top_k = e.value("top_k", c.eval.top_k);
        c.eval.filter_history = e.value("filter_history", c.eval.filter_history);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    }
    return c;
}

// Applies one `key=value` override. The value is parsed as JSON when
// possible and taken as a plain string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    nlohmann::json::json_pointer ptr;
    if (key.find('.') != std::string::npos) {
        std::string p;
        std::stringstream ss(key);
        std::string part;
        while (std::getline(ss, part, '.')) p += "/" + part;
        ptr = nlohmann::json::json_pointer(p);
        if (!doc.contains(ptr)) throw ConfigError("unknown config key '" + key + "'");
    } else {
        std::vector<std::string> hits;
        if (doc.contains(key) && !doc[key].is_object()) hits.push_back("/" + key);
        for (auto it = doc.begin(); it != doc.end(); ++it)
            if (it.value().is_object() && it.value().contains(key)) hits.push_back("/" + it.key() + "/" + key);
        if (hits.empty()) throw ConfigError("unknown config key '" + key + "'");
        if (hits.size() > 1) throw ConfigError("config key '" + key + "' is ambiguous; use section.key");
        ptr = nlohmann::json::json_pointer(hits.front());
    }
    if (doc[ptr].is_string() && !value.is_string()) value = text;
    doc[ptr] = value;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
}

// Defaults, then the optional config file, then overrides in order.
inline RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    nlohmann::json doc = to_json(RunConfig{});
    if (!config_path.empty()) {
        const auto file = read_json_file(config_path);
        detail::reject_unknown(file, doc, "");
        doc.merge_patch(file);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    auto cfg = run_config_from_json(doc);
    cfg.validate();
    return cfg;
}

// Hash of everything that influences results (not the output path or thread cap).
inline std::string config_fingerprint(const RunConfig& c) {
    auto j = to_json(c);
    j.erase("out");
    j.erase("threads");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

}  // namespace acerec
