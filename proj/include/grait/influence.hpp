#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "grait/corpus.hpp"
#include "grait/gradfeat.hpp"
#include "grait/probe.hpp"

namespace grait {

enum class IkStrategy { top, random, bottom };

std::string to_string(IkStrategy s);
IkStrategy ik_strategy_from_string(const std::string& s);

// `mean`: weights average to one over the selected idk set (the default).
// `sum`: weights sum to one instead.
enum class WeightNorm { mean, sum };

std::string to_string(WeightNorm n);
WeightNorm weight_norm_from_string(const std::string& s);

struct PipelineConfig {
    int n_ik = 200;
    int n_idk = 800;
    double tau = 0.05;
    double t_c = 0.5;
    IkStrategy ik_strategy = IkStrategy::top;
    WeightNorm weight_norm = WeightNorm::mean;
    std::uint64_t seed = 0;

    void validate() const;
};

struct InfluenceRecord {
    std::string sample_id;
    double i_ref = 0.0;
    double i_sta = 0.0;
    double i_over = 0.0;
    bool selected = false;
    double weight = 0.0;
};

struct RaitExample {
    std::string sample_id;
    Vec features;
    int target = 0;
    double weight = 1.0;
};

/// Arithmetic mean accumulated in input order. Throws on an empty set.
Vec mean_gradient(std::span<const Vec> features);
Vec mean_gradient(const FeatureSet& set);

double refusal_influence(const Eigen::Ref<const Vec>& feature, const Eigen::Ref<const Vec>& mean_idk);
double stable_influence(const Eigen::Ref<const Vec>& feature, const Eigen::Ref<const Vec>& mean_idk,
                        const Eigen::Ref<const Vec>& mean_ik_as_refusal);
double over_influence(const Eigen::Ref<const Vec>& feature, const Eigen::Ref<const Vec>& mean_ik_as_refusal);

struct ScoredId {
    std::string id;
    double score = 0.0;
};

/// The n highest scores, ordered by descending score then ascending id.
std::vector<std::string> select_topk_idk(std::span<const ScoredId> scored, std::size_t n_idk);

/// top/bottom rank by correctness (ties by ascending id); random draws a
/// seeded uniform subset without replacement, returned in input order.
std::vector<std::string> select_topk_ik(std::span<const KnowledgeRecord> records, std::size_t n_ik,
                                        IkStrategy strategy, std::uint64_t seed);

/// w_i = exp(s_i / tau) / mean_j exp(s_j / tau), evaluated with a max shift.
/// Shifted exponentials are floored at the smallest normal double so every
/// weight stays positive.
std::vector<double> compute_weights(std::span<const double> i_sta, double tau,
                                    WeightNorm norm = WeightNorm::mean);

/// Scores every idk feature against the idk mean and the ik-as-refusal mean.
/// Both feature sets must be the as_refusal variant taken at the initial model.
std::vector<InfluenceRecord> score_idk(const FeatureSet& idk_features, const FeatureSet& ik_features);

struct RaitBuild {
    std::vector<RaitExample> examples;  // ik examples first, then idk by descending i_ref
    std::vector<InfluenceRecord> scores;  // every idk sample, in partition order
    std::vector<std::string> ik_ids;
    std::vector<std::string> idk_ids;
};

using SampleIndex = std::unordered_map<std::string, const QaSample*>;
SampleIndex index_samples(std::span<const QaSample> samples);

RaitBuild build_rait_dataset(const SampleIndex& samples, const PartitionResult& parts,
                             const FeatureSet& idk_features, const FeatureSet& ik_features,
                             const PipelineConfig& config);

// CSV: sample_id,i_ref,i_sta,i_over,selected,weight
void write_scores_csv(std::span<const InfluenceRecord> scores, const std::filesystem::path& path);

} // namespace grait
