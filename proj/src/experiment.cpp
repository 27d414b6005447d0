#include "grait/experiment.hpp"

#include <fstream>
#include <map>

#include <fmt/core.h>

#include "grait/stats.hpp"

namespace grait {

SeedBase prepare_seed(const ExperimentConfig& config, std::uint64_t seed) {
    const auto seeded = config.for_seed(seed);
    auto corpus = generate_synthetic(seeded.generator, seed);
    SeedBase base;
    base.seed = seed;
    for (auto& q : corpus.samples) (q.split == Split::train ? base.train : base.test).push_back(std::move(q));
    auto pre = pretrain_base(base.train, seeded.arch, seeded.pretrain, seed);
    base.init = std::move(pre.model);
    base.known_accuracy = pre.known_accuracy;
    base.records = probe_samples(base.init, base.train, seeded.probe);
    base.baseline = to_percent(eval_rates(base.init, base.test, true));
    return base;
}

SeedFeatures prepare_features(const SeedBase& base, const ExperimentConfig& config) {
    auto parts = partition(base.records, config.pipeline.t_c, base.init.arch.refusal_class(), base.train);
    const auto index = index_samples(base.train);
    auto gather = [&](const std::vector<KnowledgeRecord>& recs) {
        std::vector<QaSample> out;
        out.reserve(recs.size());
        for (const auto& r : recs) out.push_back(*index.at(r.sample_id));
        return out;
    };
    Projection proj = make_projection(base.init.arch.adapter_size(), config.projection_dim,
                                      stream_seed(base.seed, Stream::projection));
    auto idk = batch_features(base.init, gather(parts.idk), Variant::as_refusal, proj, config.features);
    auto ik = batch_features(base.init, gather(parts.ik), Variant::as_refusal, proj, config.features);
    return {std::move(parts), std::move(proj), std::move(idk), std::move(ik)};
}

std::string run_name(Strategy strategy, std::uint64_t seed, const std::optional<std::pair<std::string, double>>& sweep) {
    if (sweep) return fmt::format("{}_{}{}_seed{}", to_string(strategy), sweep->first, sweep->second, seed);
    return fmt::format("{}_seed{}", to_string(strategy), seed);
}

RunRecord run_strategy(const SeedBase& base, const SeedFeatures& features, const ExperimentConfig& config,
                       Strategy strategy) {
    RunRecord run;
    run.strategy = strategy;
    run.seed = base.seed;
    run.baseline = base.baseline;
    try {
        TrainingInputs in{base.train, &features.parts, &features.idk, &features.ik};
        const auto set = build_training_set(strategy, in, config.pipeline);
        for (const auto& ex : set.examples) run.examples.push_back({ex.sample_id, ex.target, ex.weight});
        auto trained = weighted_sft(base.init, set.examples, config.hyper);
        trained.strategy = strategy;
        run.loss_curve = trained.loss_curve;
        run.rates = eval_rates(trained.model, base.test, false);
        run.ths = ths(to_percent(run.rates), base.baseline);
        run.ok = true;
    } catch (const std::exception& e) {
        run.ok = false;
        run.error = e.what();
    }
    return run;
}

nlohmann::json run_json(const RunRecord& run, const ExperimentConfig& config) {
    nlohmann::json j;
    j["name"] = run.name;
    j["strategy"] = to_string(run.strategy);
    j["seed"] = run.seed;
    j["config"] = to_json(config);
    if (run.sweep) j["sweep"] = {{"param", run.sweep->first}, {"value", run.sweep->second}};
    j["status"] = run.ok ? "ok" : "failed";
    if (!run.ok) j["error"] = run.error;
    j["baseline"] = {{"p_c", run.baseline.p_c}, {"p_w", run.baseline.p_w}};
    if (run.ok) {
        j["p_c"] = run.rates.p_c;
        j["p_w"] = run.rates.p_w;
        j["p_r"] = run.rates.p_r;
        j["ths"] = run.ths;
        j["loss_curve"] = run.loss_curve;
    }
    auto examples = nlohmann::json::array();
    for (const auto& ex : run.examples) examples.push_back({{"id", ex.id}, {"target", ex.target}, {"weight", ex.weight}});
    j["examples"] = std::move(examples);
    return j;
}

std::vector<AggregateRow> aggregate(std::span<const RunRecord> runs) {
    struct Acc {
        AggregateRow row;
        std::vector<double> p_c, p_w, p_r, t;
    };
    std::vector<Acc> groups;
    std::map<std::tuple<std::string, std::string, double>, std::size_t> slot;
    for (const auto& r : runs) {
        const std::string param = r.sweep ? r.sweep->first : std::string();
        const double value = r.sweep ? r.sweep->second : 0.0;
        const auto key = std::make_tuple(to_string(r.strategy), param, value);
        auto it = slot.find(key);
        if (it == slot.end()) {
            it = slot.emplace(key, groups.size()).first;
            groups.emplace_back();
            groups.back().row.strategy = to_string(r.strategy);
            groups.back().row.sweep_param = param;
            groups.back().row.sweep_value = value;
        }
        auto& g = groups[it->second];
        if (!r.ok) {
            ++g.row.n_failed;
            continue;
        }
        ++g.row.n_ok;
        g.p_c.push_back(r.rates.p_c);
        g.p_w.push_back(r.rates.p_w);
        g.p_r.push_back(r.rates.p_r);
        g.t.push_back(r.ths);
    }
    std::vector<AggregateRow> out;
    for (auto& g : groups) {
        if (g.row.n_ok > 0) {
            g.row.p_c_mean = stats::mean(g.p_c);
            g.row.p_c_std = stats::stddev(g.p_c);
            g.row.p_w_mean = stats::mean(g.p_w);
            g.row.p_w_std = stats::stddev(g.p_w);
            g.row.p_r_mean = stats::mean(g.p_r);
            g.row.p_r_std = stats::stddev(g.p_r);
            g.row.ths_mean = stats::mean(g.t);
            g.row.ths_std = stats::stddev(g.t);
        }
        out.push_back(g.row);
    }
    return out;
}

std::string aggregate_csv(std::span<const AggregateRow> rows) {
    std::string out =
        "strategy,sweep_param,sweep_value,n_ok,n_failed,p_c_mean,p_c_std,p_w_mean,p_w_std,p_r_mean,p_r_std,"
        "ths_mean,ths_std\n";
    for (const auto& r : rows) {
        const std::string value = r.sweep_param.empty() ? std::string() : fmt::format("{}", r.sweep_value);
        out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.strategy, r.sweep_param, value, r.n_ok,
                           r.n_failed, r.p_c_mean, r.p_c_std, r.p_w_mean, r.p_w_std, r.p_r_mean, r.p_r_std,
                           r.ths_mean, r.ths_std);
    }
    return out;
}

std::vector<std::pair<LabeledInput, LabeledInput>> oracle_pairs(const SeedBase& base, const PartitionResult& parts,
                                                                std::size_t n) {
    std::vector<std::pair<LabeledInput, LabeledInput>> pairs;
    if (n == 0) return pairs;
    if (base.train.empty() || base.test.empty()) throw ValidationError("oracle pairs need train and test samples");
    std::unordered_map<std::string, int> target;
    for (const auto& r : parts.ik) target.emplace(r.sample_id, r.target);
    for (const auto& r : parts.idk) target.emplace(r.sample_id, r.target);
    Rng rng(stream_seed(base.seed, Stream::oracle));
    pairs.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto& o = base.train[rng.below(base.train.size())];
        const auto& u = base.test[rng.below(base.test.size())];
        pairs.push_back({{o.id, o.features, target.at(o.id)}, {u.id, u.features, u.gold}});
    }
    return pairs;
}

SeedDiagnostics diagnose_seed(const SeedBase& base, const SeedFeatures& features, const ExperimentConfig& config) {
    SeedDiagnostics d;
    d.seed = base.seed;
    d.known_accuracy = base.known_accuracy;
    d.n_ik = features.parts.ik.size();
    d.n_idk = features.parts.idk.size();

    const auto pairs = oracle_pairs(base, features.parts, static_cast<std::size_t>(config.oracle_pairs));
    d.oracle = first_order_check(base.init, pairs, config.oracle_eta);
    d.taylor = taylor_order_check(base.init, pairs, config.oracle_eta, config.oracle_eta / 2.0);

    if (!features.parts.ik.empty() && !features.parts.idk.empty()) {
        const auto index = index_samples(base.train);
        std::vector<QaSample> ik, idk;
        for (const auto& r : features.parts.ik) ik.push_back(*index.at(r.sample_id));
        for (const auto& r : features.parts.idk) idk.push_back(*index.at(r.sample_id));
        d.orthogonality = orthogonality_stats(base.init, ik, idk);
    }

    if (!features.idk.empty()) {
        d.scores = score_idk(features.idk, features.ik);
        std::vector<double> ref, over;
        for (const auto& s : d.scores) {
            ref.push_back(s.i_ref);
            over.push_back(s.i_over);
        }
        try {
            d.pearson_ref_over = influence_correlation(ref, over);
        } catch (const NumericError&) {
            d.pearson_ref_over.reset();
        }
    }
    return d;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << contents;
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

namespace {

nlohmann::json diagnostics_json(const SeedDiagnostics& d) {
    const auto& o = d.orthogonality;
    nlohmann::json j;
    j["seed"] = d.seed;
    j["known_accuracy"] = d.known_accuracy;
    j["n_ik"] = d.n_ik;
    j["n_idk"] = d.n_idk;
    j["oracle_mean_rel_error"] = d.oracle.mean_rel_error();
    j["taylor_median_ratio"] = d.taylor.median_ratio;
    j["taylor_excluded"] = d.taylor.excluded;
    j["orthogonality"] = {{"cross", o.cross},
                          {"ik_self", o.ik_self},
                          {"idk_self", o.idk_self},
                          {"cross_refusal", o.cross_refusal},
                          {"ik_self_refusal", o.ik_self_refusal},
                          {"cos_cross", o.cos_cross},
                          {"cos_ik_self", o.cos_ik_self},
                          {"cos_idk_self", o.cos_idk_self},
                          {"cos_cross_refusal", o.cos_cross_refusal},
                          {"cos_ik_self_refusal", o.cos_ik_self_refusal},
                          {"near_orthogonal", o.near_orthogonal()}};
    if (d.pearson_ref_over)
        j["pearson_ref_over"] = *d.pearson_ref_over;
    else
        j["pearson_ref_over"] = nullptr;
    return j;
}

} // namespace

ExperimentSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir) {
    config.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "runs");

    std::vector<std::optional<std::pair<std::string, double>>> points;
    if (config.sweep)
        for (double v : config.sweep->values) points.emplace_back(std::make_pair(config.sweep->param, v));
    else
        points.emplace_back(std::nullopt);

    ExperimentSummary summary;
    std::string scores_csv = "seed,sample_id,i_ref,i_sta,i_over,selected,weight\n";
    std::string oracle_csv = "seed,train_id,val_id,actual_delta,predicted_delta,rel_error\n";
    std::string scatter = "i_ref\ti_over\n";
    auto diag_json = nlohmann::json::array();

    auto fail_all = [&](std::uint64_t seed, const std::optional<std::pair<std::string, double>>& point,
                        const std::string& why) {
        for (auto s : config.strategies) {
            RunRecord r;
            r.strategy = s;
            r.seed = seed;
            r.sweep = point;
            r.name = run_name(s, seed, point);
            r.error = why;
            summary.runs.push_back(std::move(r));
        }
    };

    for (const auto seed : config.seeds) {
        std::optional<SeedBase> base;
        try {
            base = prepare_seed(config, seed);
        } catch (const std::exception& e) {
            for (const auto& p : points) fail_all(seed, p, e.what());
            continue;
        }

        for (const auto& point : points) {
            ExperimentConfig cfg = config.for_seed(seed);
            cfg.sweep.reset();
            if (point) apply_setting(cfg, point->first, fmt::format("{}", point->second));
            cfg.seeds = config.seeds;

            std::optional<SeedFeatures> feats;
            try {
                cfg.validate();
                feats = prepare_features(*base, cfg);
            } catch (const std::exception& e) {
                fail_all(seed, point, e.what());
                continue;
            }

            if (!point || &point == &points.front()) {
                try {
                    auto d = diagnose_seed(*base, *feats, cfg);
                    if (!d.scores.empty() && !feats->ik.empty()) {
                        const auto built =
                            build_rait_dataset(index_samples(base->train), feats->parts, feats->idk, feats->ik,
                                               cfg.pipeline);
                        d.scores = built.scores;
                    }
                    for (const auto& s : d.scores)
                        scores_csv += fmt::format("{},{},{},{},{},{},{}\n", seed, s.sample_id, s.i_ref, s.i_sta,
                                                  s.i_over, s.selected ? 1 : 0, s.weight);
                    for (const auto& p : d.oracle.pairs)
                        oracle_csv += fmt::format("{},{},{},{},{},{}\n", seed, p.train_id, p.val_id, p.actual_delta,
                                                  p.predicted_delta, p.rel_error);
                    if (seed == config.seeds.front())
                        for (const auto& s : d.scores) scatter += fmt::format("{}\t{}\n", s.i_ref, s.i_over);
                    diag_json.push_back(diagnostics_json(d));
                    summary.diagnostics.push_back(std::move(d));
                } catch (const std::exception& e) {
                    diag_json.push_back({{"seed", seed}, {"error", e.what()}});
                }
            }

            for (auto strategy : config.strategies) {
                auto run = run_strategy(*base, *feats, cfg, strategy);
                run.sweep = point;
                run.name = run_name(strategy, seed, point);
                write_file_atomic(out_dir / "runs" / (run.name + ".json"), run_json(run, cfg).dump(2) + "\n");
                summary.runs.push_back(std::move(run));
            }
        }
    }

    for (const auto& r : summary.runs) {
        if (r.ok) continue;
        ++summary.failures;
        if (!fs::exists(out_dir / "runs" / (r.name + ".json"))) {
            ExperimentConfig cfg = config.for_seed(r.seed);
            write_file_atomic(out_dir / "runs" / (r.name + ".json"), run_json(r, cfg).dump(2) + "\n");
        }
    }

    const auto rows = aggregate(summary.runs);
    write_file_atomic(out_dir / "aggregate.csv", aggregate_csv(rows));
    write_file_atomic(out_dir / "scores.csv", scores_csv);
    write_file_atomic(out_dir / "oracle.csv", oracle_csv);
    write_file_atomic(out_dir / "figure5_scatter.tsv", scatter);
    write_file_atomic(out_dir / "diagnostics.json", diag_json.dump(2) + "\n");
    write_file_atomic(out_dir / "config.txt", to_text(config));

    if (config.sweep) {
        std::string sweep_csv = "param,value,seed,strategy,status,p_c,p_w,p_r,ths\n";
        for (const auto& r : summary.runs) {
            if (!r.sweep) continue;
            if (r.ok)
                sweep_csv += fmt::format("{},{},{},{},ok,{},{},{},{}\n", r.sweep->first, r.sweep->second, r.seed,
                                         to_string(r.strategy), r.rates.p_c, r.rates.p_w, r.rates.p_r, r.ths);
            else
                sweep_csv += fmt::format("{},{},{},{},failed,,,,\n", r.sweep->first, r.sweep->second, r.seed,
                                         to_string(r.strategy));
        }
        write_file_atomic(out_dir / "sweep.csv", sweep_csv);
    }
    return summary;
}

} // namespace grait
