#include "grait/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/core.h>

namespace grait {

std::string to_string(Strategy s) {
    switch (s) {
    case Strategy::grait: return "grait";
    case Strategy::van_tuning: return "van_tuning";
    case Strategy::r_tuning: return "r_tuning";
    case Strategy::ablate_no_o1: return "ablate_no_o1";
    case Strategy::ablate_no_o2: return "ablate_no_o2";
    }
    return "?";
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "grait") return Strategy::grait;
    if (s == "van_tuning") return Strategy::van_tuning;
    if (s == "r_tuning") return Strategy::r_tuning;
    if (s == "ablate_no_o1") return Strategy::ablate_no_o1;
    if (s == "ablate_no_o2") return Strategy::ablate_no_o2;
    throw ConfigError("unknown strategy '" + s + "'");
}

BatchObjective batch_objective(const ModelState& model, std::span<const RaitExample> batch) {
    BatchObjective out;
    out.grad = Vec::Zero(static_cast<Eigen::Index>(model.arch.adapter_size()));
    if (batch.empty()) return out;
    for (const auto& ex : batch) {
        const auto lg = loss_and_grad(model, ex.features, ex.target);
        out.loss += ex.weight * lg.loss;
        out.grad += ex.weight * lg.grad;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.loss *= inv;
    out.grad *= inv;
    return out;
}

double dataset_loss(const ModelState& model, std::span<const RaitExample> examples) {
    if (examples.empty()) return 0.0;
    double s = 0.0;
    for (const auto& ex : examples) s += ex.weight * loss(model, ex.features, ex.target);
    return s / static_cast<double>(examples.size());
}

TrainRun weighted_sft(const ModelState& model, std::span<const RaitExample> examples, const Hyper& hyper) {
    hyper.validate();
    for (const auto& ex : examples)
        if (!(ex.weight > 0.0) || !std::isfinite(ex.weight))
            throw ConfigError(fmt::format("example {} has invalid weight {}", ex.sample_id, ex.weight));

    TrainRun run;
    run.hyper = hyper;
    run.model = model;
    Rng rng(stream_seed(hyper.seed, Stream::shuffle));
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<RaitExample> batch;

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        double epoch_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += hyper.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(examples[order[i]]);
            const auto obj = batch_objective(run.model, batch);
            if (!std::isfinite(obj.loss) || !obj.grad.allFinite())
                throw NumericError(fmt::format("non-finite loss at epoch {} batch {}", epoch, batch_index));
            epoch_sum += obj.loss * static_cast<double>(end - start);
            run.model = sgd_step(run.model, obj.grad, hyper.lr);
        }
        run.loss_curve.push_back(examples.empty() ? 0.0 : epoch_sum / static_cast<double>(examples.size()));
    }
    return run;
}

namespace {

std::vector<std::size_t> random_subset(std::size_t pool, std::size_t n, std::uint64_t seed) {
    if (n > pool) throw ValidationError(fmt::format("cannot draw {} samples from a pool of {}", n, pool));
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(pool - i)]);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    return idx;
}

constexpr std::uint64_t kVanStream = 101;
constexpr std::uint64_t kIdkRandomStream = 102;

void require(const void* p, const char* what, Strategy s) {
    if (p == nullptr)
        throw ConfigError(fmt::format("strategy {} needs {}", to_string(s), what));
}

} // namespace

TrainingSet build_training_set(Strategy strategy, const TrainingInputs& in, const PipelineConfig& config) {
    config.validate();
    TrainingSet out;
    const auto n_ik = static_cast<std::size_t>(config.n_ik);
    const auto n_idk = static_cast<std::size_t>(config.n_idk);

    if (strategy == Strategy::van_tuning) {
        const auto seed = Rng::mix(stream_seed(config.seed, Stream::selection), kVanStream);
        for (auto i : random_subset(in.train.size(), n_ik + n_idk, seed)) {
            const auto& q = in.train[i];
            out.examples.push_back({q.id, q.features, q.gold, 1.0});
        }
        return out;
    }

    require(in.parts, "probe output", strategy);
    const auto index = index_samples(in.train);
    const auto& parts = *in.parts;

    if (strategy == Strategy::grait || strategy == Strategy::ablate_no_o2) {
        require(in.idk_features, "idk features", strategy);
        require(in.ik_features, "ik features", strategy);
        auto built = build_rait_dataset(index, parts, *in.idk_features, *in.ik_features, config);
        if (strategy == Strategy::ablate_no_o2) {
            for (auto& ex : built.examples) ex.weight = 1.0;
            for (auto& r : built.scores)
                if (r.selected) r.weight = 1.0;
        }
        out.examples = std::move(built.examples);
        out.scores = std::move(built.scores);
        return out;
    }

    // r_tuning and ablate_no_o1 share the random idk draw.
    const auto seed = Rng::mix(stream_seed(config.seed, Stream::selection), kIdkRandomStream);
    const auto idk_pick = random_subset(parts.idk.size(), n_idk, seed);
    const auto ik_ids = select_topk_ik(parts.ik, n_ik, config.ik_strategy, config.seed);
    std::unordered_map<std::string, int> ik_target;
    for (const auto& r : parts.ik) ik_target.emplace(r.sample_id, r.target);
    for (const auto& id : ik_ids) out.examples.push_back({id, index.at(id)->features, ik_target.at(id), 1.0});

    std::vector<double> weights(idk_pick.size(), 1.0);
    if (strategy == Strategy::ablate_no_o1) {
        require(in.idk_features, "idk features", strategy);
        require(in.ik_features, "ik features", strategy);
        out.scores = score_idk(*in.idk_features, *in.ik_features);
        if (out.scores.size() != parts.idk.size()) throw ValidationError("idk features do not match the partition");
        std::vector<double> sta;
        for (auto i : idk_pick) sta.push_back(out.scores[i].i_sta);
        weights = compute_weights(sta, config.tau, config.weight_norm);
        for (std::size_t k = 0; k < idk_pick.size(); ++k) {
            out.scores[idk_pick[k]].selected = true;
            out.scores[idk_pick[k]].weight = weights[k];
        }
    } else if (strategy != Strategy::r_tuning) {
        throw ConfigError("unhandled strategy");
    }
    for (std::size_t k = 0; k < idk_pick.size(); ++k) {
        const auto& r = parts.idk[idk_pick[k]];
        out.examples.push_back({r.sample_id, index.at(r.sample_id)->features, r.target, weights[k]});
    }
    return out;
}

void write_training_log(const TrainRun& run, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "epoch,mean_loss\n";
    for (std::size_t e = 0; e < run.loss_curve.size(); ++e) out << fmt::format("{},{}\n", e + 1, run.loss_curve[e]);
}

} // namespace grait
