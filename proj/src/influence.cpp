#include "grait/influence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_set>

#include <fmt/core.h>

namespace grait {

std::string to_string(IkStrategy s) {
    switch (s) {
    case IkStrategy::top: return "top";
    case IkStrategy::random: return "random";
    case IkStrategy::bottom: return "bottom";
    }
    return "?";
}

IkStrategy ik_strategy_from_string(const std::string& s) {
    if (s == "top") return IkStrategy::top;
    if (s == "random") return IkStrategy::random;
    if (s == "bottom") return IkStrategy::bottom;
    throw ConfigError("ik_strategy must be top, random or bottom, got '" + s + "'");
}

std::string to_string(WeightNorm n) { return n == WeightNorm::mean ? "mean" : "sum"; }

WeightNorm weight_norm_from_string(const std::string& s) {
    if (s == "mean") return WeightNorm::mean;
    if (s == "sum") return WeightNorm::sum;
    throw ConfigError("weight_norm must be mean or sum, got '" + s + "'");
}

void PipelineConfig::validate() const {
    if (n_ik < 0) throw ConfigError("n_ik must be >= 0");
    if (n_idk < 0) throw ConfigError("n_idk must be >= 0");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be finite and > 0");
    if (!(t_c > 0.0 && t_c < 1.0)) throw ConfigError("t_c must lie in (0, 1)");
}

Vec mean_gradient(std::span<const Vec> features) {
    if (features.empty()) throw NumericError("mean gradient of an empty set is undefined");
    Vec acc = Vec::Zero(features.front().size());
    for (const auto& f : features) {
        if (f.size() != acc.size()) throw ShapeError("mean_gradient: dimension mismatch");
        acc += f;
    }
    return acc / static_cast<double>(features.size());
}

Vec mean_gradient(const FeatureSet& set) {
    std::vector<Vec> v;
    v.reserve(set.size());
    for (const auto& f : set.features) v.push_back(f.vec);
    return mean_gradient(v);
}

namespace {

double checked_dot(const Eigen::Ref<const Vec>& a, const Eigen::Ref<const Vec>& b) {
    if (a.size() != b.size())
        throw ShapeError(fmt::format("dimension mismatch: {} vs {}", a.size(), b.size()));
    return a.dot(b);
}

} // namespace

double refusal_influence(const Eigen::Ref<const Vec>& feature, const Eigen::Ref<const Vec>& mean_idk) {
    return checked_dot(feature, mean_idk);
}

double stable_influence(const Eigen::Ref<const Vec>& feature, const Eigen::Ref<const Vec>& mean_idk,
                        const Eigen::Ref<const Vec>& mean_ik_as_refusal) {
    if (mean_idk.size() != mean_ik_as_refusal.size()) throw ShapeError("stable_influence: mean size mismatch");
    return checked_dot(feature, mean_idk - mean_ik_as_refusal);
}

double over_influence(const Eigen::Ref<const Vec>& feature, const Eigen::Ref<const Vec>& mean_ik_as_refusal) {
    return checked_dot(feature, mean_ik_as_refusal);
}

std::vector<std::string> select_topk_idk(std::span<const ScoredId> scored, std::size_t n_idk) {
    if (n_idk > scored.size())
        throw ValidationError(fmt::format("cannot select {} idk samples from {}", n_idk, scored.size()));
    std::vector<const ScoredId*> order;
    order.reserve(scored.size());
    for (const auto& s : scored) order.push_back(&s);
    auto better = [](const ScoredId* a, const ScoredId* b) {
        if (a->score != b->score) return a->score > b->score;
        return a->id < b->id;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_idk), order.end(), better);
    std::vector<std::string> out;
    out.reserve(n_idk);
    for (std::size_t i = 0; i < n_idk; ++i) out.push_back(order[i]->id);
    return out;
}

std::vector<std::string> select_topk_ik(std::span<const KnowledgeRecord> records, std::size_t n_ik,
                                        IkStrategy strategy, std::uint64_t seed) {
    if (n_ik > records.size())
        throw ValidationError(fmt::format("cannot select {} ik samples from {}", n_ik, records.size()));
    std::vector<std::size_t> idx(records.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<std::string> out;
    out.reserve(n_ik);

    if (strategy == IkStrategy::random) {
        Rng rng(stream_seed(seed, Stream::selection));
        for (std::size_t i = 0; i < n_ik; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_ik));
        for (std::size_t i = 0; i < n_ik; ++i) out.push_back(records[idx[i]].sample_id);
        return out;
    }

    const bool descending = strategy == IkStrategy::top;
    auto before = [&](std::size_t a, std::size_t b) {
        const double ca = records[a].correctness, cb = records[b].correctness;
        if (ca != cb) return descending ? ca > cb : ca < cb;
        return records[a].sample_id < records[b].sample_id;
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_ik), idx.end(), before);
    for (std::size_t i = 0; i < n_ik; ++i) out.push_back(records[idx[i]].sample_id);
    return out;
}

std::vector<double> compute_weights(std::span<const double> i_sta, double tau, WeightNorm norm) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be finite and > 0");
    if (i_sta.empty()) return {};
    double mx = i_sta.front();
    for (double s : i_sta) {
        if (!std::isfinite(s)) throw NumericError("non-finite stable influence");
        mx = std::max(mx, s);
    }
    std::vector<double> w(i_sta.size());
    double z = 0.0;
    for (std::size_t i = 0; i < i_sta.size(); ++i) {
        // floored so that far-below-max scores keep a positive weight
        w[i] = std::max(std::exp((i_sta[i] - mx) / tau), std::numeric_limits<double>::min());
        z += w[i];
    }
    const double denom = norm == WeightNorm::mean ? z / static_cast<double>(w.size()) : z;
    for (auto& x : w) x /= denom;
    return w;
}

std::vector<InfluenceRecord> score_idk(const FeatureSet& idk_features, const FeatureSet& ik_features) {
    if (idk_features.empty()) return {};
    const Vec mean_idk = mean_gradient(idk_features);
    const Vec mean_ik = ik_features.empty() ? Vec::Zero(mean_idk.size()) : mean_gradient(ik_features);
    if (mean_ik.size() != mean_idk.size()) throw ShapeError("idk and ik features differ in dimension");
    std::vector<InfluenceRecord> out;
    out.reserve(idk_features.size());
    for (const auto& f : idk_features.features) {
        InfluenceRecord r;
        r.sample_id = f.sample_id;
        r.i_ref = refusal_influence(f.vec, mean_idk);
        r.i_over = over_influence(f.vec, mean_ik);
        r.i_sta = stable_influence(f.vec, mean_idk, mean_ik);
        out.push_back(std::move(r));
    }
    return out;
}

SampleIndex index_samples(std::span<const QaSample> samples) {
    SampleIndex idx;
    idx.reserve(samples.size());
    for (const auto& q : samples) idx.emplace(q.id, &q);
    return idx;
}

namespace {

void check_alignment(const std::vector<KnowledgeRecord>& records, const FeatureSet& set, const char* what) {
    if (records.size() != set.size())
        throw ValidationError(fmt::format("{} features: {} records vs {} features", what, records.size(), set.size()));
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].sample_id != set.features[i].sample_id)
            throw ValidationError(fmt::format("{} features out of order at {}", what, records[i].sample_id));
}

} // namespace

RaitBuild build_rait_dataset(const SampleIndex& samples, const PartitionResult& parts,
                             const FeatureSet& idk_features, const FeatureSet& ik_features,
                             const PipelineConfig& config) {
    config.validate();
    check_alignment(parts.idk, idk_features, "idk");
    check_alignment(parts.ik, ik_features, "ik");
    if (idk_features.variant != Variant::as_refusal || (!ik_features.empty() && ik_features.variant != Variant::as_refusal))
        throw ValidationError("influence scoring needs as_refusal features");

    RaitBuild out;
    out.scores = score_idk(idk_features, ik_features);

    std::vector<ScoredId> scored;
    scored.reserve(out.scores.size());
    for (const auto& r : out.scores) scored.push_back({r.sample_id, r.i_ref});
    out.idk_ids = select_topk_idk(scored, static_cast<std::size_t>(config.n_idk));
    out.ik_ids = select_topk_ik(parts.ik, static_cast<std::size_t>(config.n_ik), config.ik_strategy, config.seed);

    std::unordered_map<std::string, InfluenceRecord*> by_id;
    for (auto& r : out.scores) by_id.emplace(r.sample_id, &r);
    std::vector<double> sta;
    sta.reserve(out.idk_ids.size());
    for (const auto& id : out.idk_ids) sta.push_back(by_id.at(id)->i_sta);
    const auto weights = compute_weights(sta, config.tau, config.weight_norm);

    std::unordered_map<std::string, int> ik_target;
    for (const auto& r : parts.ik) ik_target.emplace(r.sample_id, r.target);
    const int refusal = parts.idk.empty() ? -1 : parts.idk.front().target;

    for (const auto& id : out.ik_ids) {
        const auto* q = samples.at(id);
        out.examples.push_back({id, q->features, ik_target.at(id), 1.0});
    }
    for (std::size_t i = 0; i < out.idk_ids.size(); ++i) {
        const auto& id = out.idk_ids[i];
        auto* rec = by_id.at(id);
        rec->selected = true;
        rec->weight = weights[i];
        out.examples.push_back({id, samples.at(id)->features, refusal, weights[i]});
    }
    return out;
}

void write_scores_csv(std::span<const InfluenceRecord> scores, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "sample_id,i_ref,i_sta,i_over,selected,weight\n";
    for (const auto& r : scores)
        out << fmt::format("{},{},{},{},{},{}\n", r.sample_id, r.i_ref, r.i_sta, r.i_over, r.selected ? 1 : 0,
                           r.weight);
}

} // namespace grait
