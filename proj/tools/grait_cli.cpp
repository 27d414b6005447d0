#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/core.h>
#include <json.hpp>

#include "grait/config.hpp"
#include "grait/experiment.hpp"

namespace fs = std::filesystem;
using namespace grait;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::vector<std::string> sets;
    std::string strategy = "grait";
    std::string sweep;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "flat key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "run seed (replaces the configured seed list)");
    cmd->add_option("--out", c.out, "working directory for stage files");
    cmd->add_option("--set", c.sets, "override a config key, KEY=VALUE");
}

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path);
    for (const auto& s : c.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
        apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (c.seed) cfg.seeds = {*c.seed};
    if (!c.sweep.empty()) cfg.sweep = parse_sweep(c.sweep);
    cfg.validate();
    return cfg;
}

// Stage files inside the working directory.
struct Paths {
    fs::path dir;
    fs::path corpus() const { return dir / "corpus.jsonl"; }
    fs::path init() const { return dir / "model_init.json"; }
    fs::path probe() const { return dir / "probe.jsonl"; }
    fs::path idk_features() const { return dir / "features_idk.bin"; }
    fs::path ik_features() const { return dir / "features_ik.bin"; }
    fs::path scores() const { return dir / "scores.csv"; }
    fs::path trainset(Strategy s) const { return dir / ("trainset_" + to_string(s) + ".jsonl"); }
    fs::path model(Strategy s) const { return dir / ("model_" + to_string(s) + ".json"); }
    fs::path train_log(Strategy s) const { return dir / ("train_log_" + to_string(s) + ".csv"); }
    fs::path eval(Strategy s) const { return dir / ("eval_" + to_string(s) + ".json"); }
};

void require_file(const fs::path& p, const char* producer) {
    if (!fs::exists(p)) throw ConfigError(fmt::format("missing {} (run `grait {}` first)", p.string(), producer));
}

struct Loaded {
    std::vector<QaSample> train;
    std::vector<QaSample> test;
    ModelState init;
};

Loaded load_base(const Paths& paths, const ExperimentConfig& cfg) {
    require_file(paths.corpus(), "gen");
    require_file(paths.init(), "gen");
    Loaded l;
    for (auto& q : load_jsonl(paths.corpus(), cfg.generator.n_answers).samples)
        (q.split == Split::train ? l.train : l.test).push_back(std::move(q));
    l.init = load_checkpoint(paths.init());
    return l;
}

PartitionResult load_partition(const Paths& paths, const ExperimentConfig& cfg, const Loaded& l) {
    require_file(paths.probe(), "probe");
    const auto records = load_probe_jsonl(paths.probe());
    return partition(records, cfg.pipeline.t_c, l.init.arch.refusal_class(), l.train);
}

std::pair<FeatureSet, FeatureSet> load_features(const Paths& paths, std::uint64_t seed, const ModelState& init) {
    require_file(paths.idk_features(), "features");
    require_file(paths.ik_features(), "features");
    const FeatureKey key{init.checksum(), Variant::as_refusal, stream_seed(seed, Stream::projection)};
    return {load_feature_cache(paths.idk_features(), key), load_feature_cache(paths.ik_features(), key)};
}

std::vector<QaSample> gather(const std::vector<KnowledgeRecord>& recs, const SampleIndex& index) {
    std::vector<QaSample> out;
    for (const auto& r : recs) out.push_back(*index.at(r.sample_id));
    return out;
}

int cmd_gen(const ExperimentConfig& cfg, const Paths& paths) {
    const auto seed = cfg.seeds.front();
    fs::create_directories(paths.dir);
    const auto corpus = generate_synthetic(cfg.generator, seed);
    save_jsonl(corpus, paths.corpus());
    std::vector<QaSample> train;
    for (const auto& q : corpus.samples)
        if (q.split == Split::train) train.push_back(q);
    const auto pre = pretrain_base(train, cfg.arch, cfg.pretrain, seed);
    save_checkpoint(pre.model, paths.init());
    fmt::print("wrote {} samples; base known accuracy {:.3f}, unknown accuracy {:.3f}\n", corpus.samples.size(),
               pre.known_accuracy, pre.unknown_accuracy);
    return 0;
}

int cmd_probe(const ExperimentConfig& cfg, const Paths& paths) {
    const auto l = load_base(paths, cfg);
    const auto records = probe_samples(l.init, l.train, cfg.for_seed(cfg.seeds.front()).probe);
    save_probe_jsonl(records, paths.probe());
    const auto parts = partition(records, cfg.pipeline.t_c, l.init.arch.refusal_class(), l.train);
    fmt::print("probed {} samples: {} ik, {} idk\n", records.size(), parts.ik.size(), parts.idk.size());
    return 0;
}

int cmd_features(const ExperimentConfig& cfg, const Paths& paths) {
    const auto seed = cfg.seeds.front();
    const auto l = load_base(paths, cfg);
    const auto parts = load_partition(paths, cfg, l);
    const auto index = index_samples(l.train);
    const auto proj =
        make_projection(l.init.arch.adapter_size(), cfg.projection_dim, stream_seed(seed, Stream::projection));
    const auto idk = batch_features(l.init, gather(parts.idk, index), Variant::as_refusal, proj, cfg.features);
    const auto ik = batch_features(l.init, gather(parts.ik, index), Variant::as_refusal, proj, cfg.features);
    save_feature_cache(idk, paths.idk_features());
    save_feature_cache(ik, paths.ik_features());
    fmt::print("features: {} idk, {} ik, dimension {}\n", idk.size(), ik.size(), idk.dim);
    return 0;
}

int cmd_score(const ExperimentConfig& cfg, const Paths& paths) {
    const auto seeded = cfg.for_seed(cfg.seeds.front());
    const auto l = load_base(paths, cfg);
    const auto parts = load_partition(paths, cfg, l);
    const auto [idk, ik] = load_features(paths, seeded.seeds.front(), l.init);
    const auto built = build_rait_dataset(index_samples(l.train), parts, idk, ik, seeded.pipeline);
    write_scores_csv(built.scores, paths.scores());
    fmt::print("scored {} idk samples, selected {}\n", built.scores.size(), built.idk_ids.size());
    return 0;
}

int cmd_build(const ExperimentConfig& cfg, const Paths& paths, Strategy strategy) {
    const auto seeded = cfg.for_seed(cfg.seeds.front());
    const auto l = load_base(paths, cfg);
    std::optional<PartitionResult> parts;
    std::optional<std::pair<FeatureSet, FeatureSet>> feats;
    if (strategy != Strategy::van_tuning) parts = load_partition(paths, cfg, l);
    if (strategy != Strategy::van_tuning && strategy != Strategy::r_tuning)
        feats = load_features(paths, seeded.seeds.front(), l.init);
    TrainingInputs in{l.train, parts ? &*parts : nullptr, feats ? &feats->first : nullptr,
                      feats ? &feats->second : nullptr};
    const auto set = build_training_set(strategy, in, seeded.pipeline);
    std::ofstream out(paths.trainset(strategy), std::ios::binary | std::ios::trunc);
    for (const auto& ex : set.examples)
        out << nlohmann::json{{"id", ex.sample_id}, {"target", ex.target}, {"weight", ex.weight}}.dump() << '\n';
    if (!out) throw std::runtime_error("write failed for " + paths.trainset(strategy).string());
    fmt::print("{}: {} training examples\n", to_string(strategy), set.examples.size());
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const Paths& paths, Strategy strategy) {
    const auto seeded = cfg.for_seed(cfg.seeds.front());
    const auto l = load_base(paths, cfg);
    require_file(paths.trainset(strategy), "build");
    const auto index = index_samples(l.train);
    std::vector<RaitExample> examples;
    std::ifstream in(paths.trainset(strategy), std::ios::binary);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto id = j.at("id").get<std::string>();
            const auto it = index.find(id);
            if (it == index.end()) throw ValidationError("unknown sample id '" + id + "'");
            examples.push_back({id, it->second->features, j.at("target").get<int>(), j.at("weight").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    auto run = weighted_sft(l.init, examples, seeded.hyper);
    run.strategy = strategy;
    save_checkpoint(run.model, paths.model(strategy));
    write_training_log(run, paths.train_log(strategy));
    fmt::print("{}: trained {} epochs, final loss {:.4f}\n", to_string(strategy), run.loss_curve.size(),
               run.loss_curve.empty() ? 0.0 : run.loss_curve.back());
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const Paths& paths, Strategy strategy) {
    const auto l = load_base(paths, cfg);
    require_file(paths.model(strategy), "train");
    const auto model = load_checkpoint(paths.model(strategy));
    const auto baseline = to_percent(eval_rates(l.init, l.test, true));
    const auto report = make_report(eval_rates(model, l.test, false), baseline);
    std::ofstream(paths.eval(strategy), std::ios::binary | std::ios::trunc) << report_json(report, to_string(strategy))
                                                                            << '\n';
    const std::pair<std::string, EvalReport> row{to_string(strategy), report};
    fmt::print("{}", report_table(std::span(&row, 1)));
    return 0;
}

int cmd_oracle(const ExperimentConfig& cfg, const Paths& paths) {
    const auto seeded = cfg.for_seed(cfg.seeds.front());
    const auto l = load_base(paths, cfg);
    SeedBase base;
    base.seed = seeded.seeds.front();
    base.train = l.train;
    base.test = l.test;
    base.init = l.init;
    require_file(paths.probe(), "probe");
    base.records = load_probe_jsonl(paths.probe());
    const auto feats = prepare_features(base, seeded);
    const auto d = diagnose_seed(base, feats, seeded);
    write_oracle_csv(d.oracle, paths.dir / "oracle.csv");
    std::vector<double> ref, over;
    for (const auto& s : d.scores) {
        ref.push_back(s.i_ref);
        over.push_back(s.i_over);
    }
    write_scatter_tsv(ref, over, paths.dir / "figure5_scatter.tsv");
    const auto& o = d.orthogonality;
    fmt::print("first-order mean relative error {:.4g} over {} pairs at eta {}\n", d.oracle.mean_rel_error(),
               d.oracle.pairs.size(), d.oracle.eta);
    fmt::print("residual ratio median {:.3f} ({} pairs excluded)\n", d.taylor.median_ratio, d.taylor.excluded);
    fmt::print("mean-gradient products: cross {:.4g}, ik_self {:.4g}, idk_self {:.4g}\n", o.cross, o.ik_self,
               o.idk_self);
    fmt::print("refusal-labeled ik: cross {:.4g}, ik_self {:.4g}\n", o.cross_refusal, o.ik_self_refusal);
    fmt::print("cosine versions: cross {:.4g}, ik_self {:.4g}, idk_self {:.4g}\n", o.cos_cross, o.cos_ik_self,
               o.cos_idk_self);
    if (d.pearson_ref_over) fmt::print("pearson(I_ref, I_over) {:.4f}\n", *d.pearson_ref_over);
    return 0;
}

int cmd_experiment(const ExperimentConfig& cfg, const Paths& paths) {
    const auto summary = run_experiment(cfg, paths.dir);
    std::vector<std::pair<std::string, EvalReport>> rows;
    for (const auto& r : aggregate(summary.runs)) {
        EvalReport rep;
        rep.rates = {r.p_c_mean, r.p_w_mean, r.p_r_mean};
        rep.ths = r.ths_mean;
        const auto name = r.sweep_param.empty() ? r.strategy : fmt::format("{} {}={}", r.strategy, r.sweep_param,
                                                                            r.sweep_value);
        rows.emplace_back(name, rep);
    }
    fmt::print("{}", report_table(rows));
    for (const auto& r : summary.runs)
        if (!r.ok) fmt::print(stderr, "run {} failed: {}\n", r.name, r.error);
    return summary.failures == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gradient-influence refusal-aware instruction tuning on a toy model"};
    app.require_subcommand(1);
    Common common;

    auto add = [&](const char* name, const char* help) {
        auto* cmd = app.add_subcommand(name, help);
        add_common(cmd, common);
        return cmd;
    };
    auto* gen = add("gen", "generate the corpus and pretrain the initial model");
    auto* probe = add("probe", "estimate per-sample correctness at the initial model");
    auto* features = add("features", "compute projected refusal-target gradient features");
    auto* score = add("score", "score idk samples and dump influences");
    auto* build = add("build", "assemble a strategy's training set");
    auto* train = add("train", "fine-tune the adapter on a built training set");
    auto* eval = add("eval", "evaluate a trained model against the initial baseline");
    auto* oracle = add("oracle", "brute-force influence checks and orthogonality diagnostics");
    auto* experiment = add("experiment", "run the full strategy x seed grid");
    auto* sweep = add("sweep", "run the grid across a tau or t_c sweep");
    for (auto* cmd : {build, train, eval})
        cmd->add_option("--strategy", common.strategy, "grait, van_tuning, r_tuning, ablate_no_o1, ablate_no_o2");
    experiment->add_option("--strategy", common.strategy, "restrict the grid to one strategy");
    sweep->add_option("--sweep", common.sweep, "PARAM=V1,V2,...")->required();
    sweep->add_option("--strategy", common.strategy, "restrict the grid to one strategy");

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = resolve(common);
        const Paths paths{common.out};
        const auto strategy = strategy_from_string(common.strategy);
        if (gen->parsed()) return cmd_gen(cfg, paths);
        if (probe->parsed()) return cmd_probe(cfg, paths);
        if (features->parsed()) return cmd_features(cfg, paths);
        if (score->parsed()) return cmd_score(cfg, paths);
        if (build->parsed()) return cmd_build(cfg, paths, strategy);
        if (train->parsed()) return cmd_train(cfg, paths, strategy);
        if (eval->parsed()) return cmd_eval(cfg, paths, strategy);
        if (oracle->parsed()) return cmd_oracle(cfg, paths);
        if (experiment->parsed() || sweep->parsed()) {
            auto* cmd = experiment->parsed() ? experiment : sweep;
            if (cmd->count("--strategy") > 0) cfg.strategies = {strategy};
            return cmd_experiment(cfg, paths);
        }
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
    return 0;
}
