#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "grait/config.hpp"
#include "grait/evaluator.hpp"
#include "grait/gradfeat.hpp"
#include "grait/oracle.hpp"

namespace grait {

// Per-seed state shared by every strategy: corpus, pretrained initial model,
// probe records and the never-refusing baseline point.
struct SeedBase {
    std::uint64_t seed = 0;
    std::vector<QaSample> train;
    std::vector<QaSample> test;
    ModelState init;
    double known_accuracy = 0.0;
    std::vector<KnowledgeRecord> records;
    ThsPoint baseline;
};

SeedBase prepare_seed(const ExperimentConfig& config, std::uint64_t seed);

// Partition at config.pipeline.t_c plus as_refusal features at the initial model.
struct SeedFeatures {
    PartitionResult parts;
    Projection projection;
    FeatureSet idk;
    FeatureSet ik;
};

SeedFeatures prepare_features(const SeedBase& base, const ExperimentConfig& config);

struct SelectedExample {
    std::string id;
    int target = 0;
    double weight = 1.0;
};

struct RunRecord {
    std::string name;
    Strategy strategy = Strategy::grait;
    std::uint64_t seed = 0;
    std::optional<std::pair<std::string, double>> sweep;
    bool ok = false;
    std::string error;
    Rates rates;
    double ths = 0.0;
    ThsPoint baseline;
    std::vector<double> loss_curve;
    std::vector<SelectedExample> examples;
};

std::string run_name(Strategy strategy, std::uint64_t seed, const std::optional<std::pair<std::string, double>>& sweep);

/// Builds, trains and evaluates one strategy. `config` must already carry
/// the run seed (see ExperimentConfig::for_seed). Stage failures are caught
/// and recorded on the returned record.
RunRecord run_strategy(const SeedBase& base, const SeedFeatures& features, const ExperimentConfig& config,
                       Strategy strategy);

nlohmann::json run_json(const RunRecord& run, const ExperimentConfig& config);

struct AggregateRow {
    std::string strategy;
    std::string sweep_param;  // empty outside sweeps
    double sweep_value = 0.0;
    std::size_t n_ok = 0;
    std::size_t n_failed = 0;
    double p_c_mean = 0.0, p_c_std = 0.0;
    double p_w_mean = 0.0, p_w_std = 0.0;
    double p_r_mean = 0.0, p_r_std = 0.0;
    double ths_mean = 0.0, ths_std = 0.0;
};

/// Mean and sample std-dev over the successful seeds of each (strategy,
/// sweep value) group, in first-appearance order.
std::vector<AggregateRow> aggregate(std::span<const RunRecord> runs);

// CSV: strategy,sweep_param,sweep_value,n_ok,n_failed,p_c_mean,p_c_std,...,ths_mean,ths_std
std::string aggregate_csv(std::span<const AggregateRow> rows);

// Diagnostics computed at the initial model of one seed.
struct SeedDiagnostics {
    std::uint64_t seed = 0;
    double known_accuracy = 0.0;
    std::size_t n_ik = 0;
    std::size_t n_idk = 0;
    OracleReport oracle;
    TaylorStats taylor;
    OrthogonalityStats orthogonality;
    std::optional<double> pearson_ref_over;
    std::vector<InfluenceRecord> scores;
};

/// `n` random (train, test) pairs. Train samples carry their partition
/// target, test samples their gold answer.
std::vector<std::pair<LabeledInput, LabeledInput>> oracle_pairs(const SeedBase& base, const PartitionResult& parts,
                                                                std::size_t n);

SeedDiagnostics diagnose_seed(const SeedBase& base, const SeedFeatures& features, const ExperimentConfig& config);

struct ExperimentSummary {
    std::vector<RunRecord> runs;
    std::vector<SeedDiagnostics> diagnostics;
    std::size_t failures = 0;
};

/// Runs every (sweep value, strategy, seed) combination and writes
///   runs/<name>.json, aggregate.csv, scores.csv, oracle.csv,
///   figure5_scatter.tsv, diagnostics.json, config.txt
/// plus sweep.csv when config.sweep is set. A failed run is recorded and
/// the remaining runs continue.
ExperimentSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

// Writes through a temporary sibling and renames into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

} // namespace grait
