#pragma once

// Command-line front end. Every subcommand resolves the run configuration
// first (defaults, --config file, --set overrides), writes it to
// <out>/config.json and then runs one pipeline stage.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "acerec/checkpoint.hpp"
#include "acerec/config.hpp"
#include "acerec/data.hpp"
#include "acerec/error.hpp"
#include "acerec/evaluation.hpp"
#include "acerec/inference.hpp"
#include "acerec/model.hpp"
#include "acerec/opq.hpp"
#include "acerec/parallel.hpp"
#include "acerec/trainer.hpp"

namespace acerec::cli {

namespace fs = std::filesystem;

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
};

inline RunConfig resolve(const Common& c) {
    auto overrides = c.overrides;
    if (c.out) overrides.push_back("out=" + nlohmann::json(*c.out).dump());
    if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
    if (c.threads) overrides.push_back("threads=" + std::to_string(*c.threads));
    return resolve_config(c.config_path, overrides);
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    os << text;
    if (!os) throw Error("failed writing " + path);
}

inline void prepare_out(const RunConfig& cfg) {
    fs::create_directories(cfg.out);
    write_text(cfg.path("config.json"), to_json(cfg).dump(2) + "\n");
}

inline void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw Error("missing " + what + ": " + path);
}

struct Tokens {
    SemanticIdTable table;
    std::size_t M = 0;
};

inline Tokens load_tokens(const RunConfig& cfg, const SplitDataset& split) {
    require_file(cfg.path("codes.bin"), "semantic-id table (run tokenize first)");
    auto loaded = load_codes(cfg.path("codes.bin"));
    if (loaded.table.rows != split.num_items())
        throw InvariantError("codes.bin has " + std::to_string(loaded.table.rows) + " rows but the catalog has " +
                             std::to_string(split.num_items()) + " items");
    return {std::move(loaded.table), loaded.M};
}

inline SplitDataset load_split_checked(const RunConfig& cfg) {
    require_file(cfg.path("split.json"), "split manifest (run prepare or synth first)");
    return load_split(cfg.path("split.json"));
}

inline SplitDataset prepare_split(const RunConfig& cfg, std::ostream& out) {
    const auto path = cfg.interactions_path();
    require_file(path, "interaction log");
    const auto raw = read_interactions_file(path);
    const auto filtered = kcore_filter(raw, cfg.data.min_user_count, cfg.data.min_item_count);
    auto split = split_leave_last_out(filtered, cfg.data.max_seq_len);
    save_split(split, cfg.path("split.json"));
    out << "prepare: " << raw.size() << " interactions, " << filtered.size() << " after k-core, " << split.users.size()
        << " users, " << split.num_items() << " items -> " << cfg.path("split.json") << "\n";
    return split;
}

inline int cmd_synth(const RunConfig& cfg, std::ostream& out) {
    const auto corpus = generate_synthetic_corpus(cfg.resolved_synth());
    {
        std::ofstream os(cfg.path("interactions.tsv"), std::ios::binary);
        if (!os) throw Error("cannot write " + cfg.path("interactions.tsv"));
        write_interactions(os, corpus.interactions);
    }
    {
        std::ofstream os(cfg.path("embeddings.bin"), std::ios::binary);
        if (!os) throw Error("cannot write " + cfg.path("embeddings.bin"));
        write_embeddings(os, corpus.item_ids, corpus.embeddings);
    }
    out << "synth: " << corpus.interactions.size() << " interactions over " << cfg.synth.n_users << " users and "
        << cfg.synth.n_items << " items\n";
    RunConfig local = cfg;
    local.data.interactions = cfg.path("interactions.tsv");
    prepare_split(local, out);
    return 0;
}

inline int cmd_tokenize(const RunConfig& cfg, std::ostream& out) {
    const auto split = load_split_checked(cfg);
    require_file(cfg.embeddings_path(), "embedding file");
    const auto x = load_item_embeddings(cfg.embeddings_path(), split);
    OpqOptions opt;
    opt.m = cfg.model.m;
    opt.M = cfg.model.M;
    opt.iters = cfg.tokenizer.iters;
    opt.lloyd_iters = cfg.tokenizer.lloyd_iters;
    opt.seed = stage_seed(cfg.seed, "tokenize");
    opt.learn_rotation = cfg.tokenizer.learn_rotation;
    const auto fit = fit_opq(x, opt);
    const auto codes = encode_items(x, fit.codebooks);
    save_codebooks(fit.codebooks, cfg.path("codebooks.bin"));
    save_codes(codes, opt.M, cfg.path("codes.bin"));
    const auto collisions = code_collision_pairs(codes);
    nlohmann::json summary{{"error_trace", fit.error_trace},
                           {"orthogonality_trace", fit.orthogonality_trace},
                           {"collision_pairs", collisions},
                           {"padding", fit.codebooks.padding()}};
    write_text(cfg.path("tokenizer.json"), summary.dump(2) + "\n");
    out << "tokenize: m=" << opt.m << " M=" << opt.M << " final error=" << fit.error_trace.back()
        << " collisions=" << collisions << " -> " << cfg.path("codes.bin") << "\n";
    return 0;
}

struct TrainSummary {
    TrainResult<float> result;
    double final_train_loss = 0.0;
};

inline TrainSummary run_training(const RunConfig& cfg, const SplitDataset& split, const Tokens& tokens,
                                 const std::string& out_dir, std::ostream& out) {
    if (tokens.table.m != cfg.model.m || tokens.M != cfg.model.M)
        throw ConfigError("codes.bin was built with m=" + std::to_string(tokens.table.m) + ", M=" + std::to_string(tokens.M) +
                          " but the model config has m=" + std::to_string(cfg.model.m) + ", M=" + std::to_string(cfg.model.M));
    fs::create_directories(out_dir);
    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics) throw Error("cannot write " + out_dir + "/metrics.jsonl");
    TrainOptions opts;
    opts.threads = resolve_threads(cfg.threads);
    opts.on_epoch = [&](const EpochMetrics& e) {
        metrics << to_json(e).dump() << "\n" << std::flush;
        out << "epoch " << e.epoch << " loss=" << e.train_loss << " mtp=" << e.mtp << " isa=" << e.isa
            << " val_ndcg@10=" << e.val_ndcg10 << "\n";
    };
    TrainSummary s;
    s.result = train<float>(split, tokens.table, cfg.model, cfg.resolved_train(), opts);
    s.final_train_loss = s.result.log.back().train_loss;
    save_checkpoint(s.result.model, out_dir + "/ckpt-best.bin");
    out << "train: best epoch " << s.result.best_epoch << " val_ndcg@10=" << s.result.best_val_ndcg10 << " -> "
        << out_dir << "/ckpt-best.bin\n";
    return s;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
    const auto split = load_split_checked(cfg);
    const auto tokens = load_tokens(cfg, split);
    run_training(cfg, split, tokens, cfg.out, out);
    return 0;
}

inline nlohmann::json evaluate_to_json(const RunConfig& cfg, const Model<float>& model, const SplitDataset& split,
                                       const SemanticIdTable& codes, std::ostream& out) {
    const auto spec = BucketSpec::standard();
    const auto rep = evaluate_split(model, split, codes, cfg.eval.ks, spec, Target::Test, resolve_threads(cfg.threads));
    const auto pop = evaluate_popularity(split, cfg.eval.ks, spec);
    auto j = report_to_json(rep, config_fingerprint(cfg));
    j["popularity_baseline"] = metrics_json(pop.overall);

    out << "overall (" << rep.users << " users)\n";
    for (std::size_t i = 0; i < rep.overall.Ks.size(); ++i)
        out << "  recall@" << rep.overall.Ks[i] << " " << std::fixed << std::setprecision(4) << rep.overall.recall[i]
            << "  ndcg@" << rep.overall.Ks[i] << " " << rep.overall.ndcg[i] << "\n";
    out << "buckets\n";
    for (const auto& b : rep.buckets) {
        out << "  " << std::setw(8) << b.range.label() << " n=" << std::setw(5) << b.count << " pct=" << std::setw(6)
            << std::setprecision(2) << b.pct;
        for (std::size_t i = 0; i < b.metrics.Ks.size(); ++i)
            out << "  ndcg@" << b.metrics.Ks[i] << " " << std::setprecision(4) << b.metrics.ndcg[i];
        out << "\n";
    }
    out << std::defaultfloat;
    return j;
}

inline Model<float> load_model(const RunConfig& cfg, const std::string& checkpoint, const Tokens& tokens) {
    require_file(checkpoint, "checkpoint");
    ModelConfig expect = cfg.model;
    expect.m = tokens.table.m;
    expect.M = tokens.M;
    return load_checkpoint(checkpoint, expect);
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, std::ostream& out) {
    const auto ckpt = checkpoint.empty() ? cfg.path("ckpt-best.bin") : checkpoint;
    require_file(ckpt, "checkpoint");
    const auto split = load_split_checked(cfg);
    const auto tokens = load_tokens(cfg, split);
    const auto model = load_model(cfg, ckpt, tokens);
    const auto report = evaluate_to_json(cfg, model, split, tokens.table, out);
    write_text(cfg.path("report.json"), report.dump(2) + "\n");
    out << "eval: -> " << cfg.path("report.json") << "\n";
    return 0;
}

inline int cmd_recommend(const RunConfig& cfg, const std::string& checkpoint, const std::vector<std::string>& users,
                         std::size_t k, std::ostream& out) {
    const auto ckpt = checkpoint.empty() ? cfg.path("ckpt-best.bin") : checkpoint;
    require_file(ckpt, "checkpoint");
    const auto split = load_split_checked(cfg);
    const auto tokens = load_tokens(cfg, split);
    const auto model = load_model(cfg, ckpt, tokens);
    std::vector<const UserSplit*> chosen;
    if (users.empty()) {
        for (const auto& u : split.users) chosen.push_back(&u);
    } else {
        for (const auto& id : users) chosen.push_back(&split.user(id));
    }
    std::vector<std::vector<std::uint32_t>> histories;
    for (const auto* u : chosen) {
        auto h = u->train;
        h.push_back(u->val);
        h.push_back(u->test);
        histories.push_back(std::move(h));
    }
    const auto intents = history_intents(model, histories, tokens.table);
    const ScoringContext<float> ctx(model);
    const std::size_t K = k ? k : cfg.eval.top_k;
    out << "user_id\trank\titem_id\tscore\n";
    for (std::size_t u = 0; u < chosen.size(); ++u) {
        const auto P = subspace_logprob_matrix(model, ctx, std::span<const float>(intents[u]));
        auto scores = holistic_scores(P, tokens.table);
        if (cfg.eval.filter_history)
            for (auto i : histories[u]) scores[i] = -std::numeric_limits<float>::infinity();
        const auto ranked = top_k(scores, K);
        for (std::size_t r = 0; r < ranked.size(); ++r) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.6f", ranked[r].score);
            out << chosen[u]->user_id << "\t" << r + 1 << "\t" << split.items[ranked[r].index] << "\t" << buf << "\n";
        }
    }
    return 0;
}

// Raw ATM cross-attention weights per (item, head, latent, digit).
inline std::string attention_csv(const Model<float>& model, const SplitDataset& split, const SemanticIdTable& codes,
                                 const std::vector<std::string>& item_ids) {
    if (model.config.merger != Merger::Attentive) throw ConfigError("checkpoint uses the mean-pool merger; no attention weights");
    ag::NoGradGuard no_grad;
    const auto& c = model.config;
    std::vector<std::uint32_t> items;
    for (const auto& id : item_ids) items.push_back(split.index_of(id));
    std::vector<std::uint16_t> flat;
    for (auto i : items) {
        const auto row = codes.row(i);
        flat.insert(flat.end(), row.begin(), row.end());
    }
    const auto e = embed_semantic_id(model, flat);
    const auto atm = atm_merge(model, e, summarize_item(model, e));
    std::ostringstream os;
    os << "item_id,head,latent_index,digit_index,weight\n";
    for (std::size_t n = 0; n < items.size(); ++n)
        for (std::size_t h = 0; h < c.n_heads; ++h)
            for (std::size_t l = 0; l < c.k; ++l)
                for (std::size_t j = 0; j < c.m; ++j) {
                    char buf[32];
                    std::snprintf(buf, sizeof buf, "%.9g", double((*atm.weights)[atm.offsets[n] + (h * c.k + l) * c.m + j]));
                    os << item_ids[n] << "," << h << "," << l << "," << j << "," << buf << "\n";
                }
    return os.str();
}

inline int cmd_inspect(const RunConfig& cfg, const std::string& checkpoint, std::vector<std::string> item_ids,
                       std::ostream& out) {
    const auto ckpt = checkpoint.empty() ? cfg.path("ckpt-best.bin") : checkpoint;
    require_file(ckpt, "checkpoint");
    const auto split = load_split_checked(cfg);
    const auto tokens = load_tokens(cfg, split);
    const auto model = load_model(cfg, ckpt, tokens);
    if (item_ids.empty())
        for (std::size_t i = 0; i < std::min<std::size_t>(5, split.num_items()); ++i) item_ids.push_back(split.items[i]);
    write_text(cfg.path("attention.csv"), attention_csv(model, split, tokens.table, item_ids));
    out << "inspect-attention: " << item_ids.size() << " items -> " << cfg.path("attention.csv") << "\n";
    return 0;
}

inline ModelConfig gradcheck_config() {
    ModelConfig c;
    c.d = 8;
    c.m = 4;
    c.k = 2;
    c.M = 5;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_dim = 16;
    c.max_steps = 3;
    c.lambda = 0.01;
    return c;
}

inline int cmd_gradcheck(const std::vector<std::uint64_t>& seeds, std::ostream& out) {
    bool ok = true;
    for (auto s : seeds) {
        const auto r = finite_difference_check(gradcheck_config(), s);
        out << "gradcheck seed " << s << ": max relative error " << std::scientific << std::setprecision(3)
            << r.max_rel_error << std::defaultfloat << " (" << r.worst_tensor << ", " << r.coordinates << " coordinates)\n";
        ok = ok && r.max_rel_error < 1e-4;
    }
    return ok ? 0 : 1;
}

inline int cmd_sweep(const RunConfig& cfg, const std::vector<std::size_t>& ratios, std::ostream& out) {
    const auto split = load_split_checked(cfg);
    const auto tokens = load_tokens(cfg, split);
    nlohmann::json summary = nlohmann::json::array();
    bool ok = true;
    for (auto r : ratios) {
        if (r == 0 || cfg.model.m % r != 0 || cfg.model.m / r == 0)
            throw ConfigError("ratio " + std::to_string(r) + " does not divide m=" + std::to_string(cfg.model.m));
        RunConfig rc = cfg;
        rc.model.k = cfg.model.m / r;
        rc.out = cfg.out + "/sweep/r" + std::to_string(r);
        rc.validate();
        out << "sweep: r=" << r << " (k=" << rc.model.k << ")\n";
        fs::create_directories(rc.out);
        write_text(rc.path("config.json"), to_json(rc).dump(2) + "\n");
        const auto s = run_training(rc, split, tokens, rc.out, out);
        const auto report = evaluate_to_json(rc, s.result.model, split, tokens.table, out);
        write_text(rc.path("report.json"), report.dump(2) + "\n");
        const bool finite = std::isfinite(s.final_train_loss);
        ok = ok && finite;
        summary.push_back({{"r", r},
                           {"k", rc.model.k},
                           {"final_train_loss", s.final_train_loss},
                           {"finite_loss", finite},
                           {"best_epoch", s.result.best_epoch},
                           {"report", rc.path("report.json")},
                           {"overall", report.at("overall")}});
    }
    write_text(cfg.path("sweep.json"), summary.dump(2) + "\n");
    out << "sweep: -> " << cfg.path("sweep.json") << "\n";
    return ok ? 0 : 1;
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Generative sequential recommender over OPQ semantic IDs"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    app.add_option("--config", common.config_path, "JSON config file");
    app.add_option("--set", common.overrides, "Override a config value, key=value (repeatable)")->allow_extra_args(false);
    app.add_option_function<std::string>("--out", [&](const std::string& v) { common.out = v; }, "Output directory");
    app.add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { common.seed = v; }, "Top-level seed");
    app.add_option_function<std::size_t>("--threads", [&](const std::size_t& v) { common.threads = v; },
                                         "Thread cap (default: ACEREC_THREADS or 1)");

    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus and its split");
    auto* prepare = app.add_subcommand("prepare", "k-core filter and leave-last-out split");
    auto* tokenize = app.add_subcommand("tokenize", "Fit OPQ and write semantic IDs");
    auto* trainc = app.add_subcommand("train", "Train and keep the best validation checkpoint");
    std::string checkpoint;
    auto* eval = app.add_subcommand("eval", "Full-catalog test evaluation");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/ckpt-best.bin)");
    auto* recommend = app.add_subcommand("recommend", "Top-K recommendations as TSV");
    std::vector<std::string> users;
    std::size_t top = 0;
    recommend->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/ckpt-best.bin)");
    recommend->add_option("--user", users, "User id (repeatable; default all users)");
    recommend->add_option("-k,--top", top, "List length (default eval.top_k)");
    auto* inspect = app.add_subcommand("inspect-attention", "Dump ATM attention weights as CSV");
    std::vector<std::string> items;
    inspect->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/ckpt-best.bin)");
    inspect->add_option("--item", items, "Item id (repeatable; default first five items)");
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check on a tiny model");
    std::vector<std::uint64_t> seeds{1, 2, 3};
    gradcheck->add_option("--seeds", seeds, "Seeds to check");
    auto* sweep = app.add_subcommand("sweep", "Train and evaluate one model per compression ratio m/k");
    std::vector<std::size_t> ratios{2, 4, 8, 16};
    sweep->add_option("--ratios", ratios, "Compression ratios")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (gradcheck->parsed()) return cmd_gradcheck(seeds, out);
        const auto cfg = resolve(common);
        prepare_out(cfg);
        if (synth->parsed()) return cmd_synth(cfg, out);
        if (prepare->parsed()) {
            prepare_split(cfg, out);
            return 0;
        }
        if (tokenize->parsed()) return cmd_tokenize(cfg, out);
        if (trainc->parsed()) return cmd_train(cfg, out);
        if (eval->parsed()) return cmd_eval(cfg, checkpoint, out);
        if (recommend->parsed()) return cmd_recommend(cfg, checkpoint, users, top, out);
        if (inspect->parsed()) return cmd_inspect(cfg, checkpoint, items, out);
        if (sweep->parsed()) return cmd_sweep(cfg, ratios, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace acerec::cli
