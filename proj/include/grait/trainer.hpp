#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "grait/influence.hpp"
#include "grait/toymodel.hpp"

namespace grait {

enum class Strategy { grait, van_tuning, r_tuning, ablate_no_o1, ablate_no_o2 };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct TrainRun {
    Strategy strategy = Strategy::grait;
    Hyper hyper;
    std::vector<double> loss_curve;  // mean weighted loss per epoch
    ModelState model;
};

struct BatchObjective {
    double loss = 0.0;  // mean of weight * loss
    Vec grad;           // mean of weight * grad
};

BatchObjective batch_objective(const ModelState& model, std::span<const RaitExample> batch);

// Mean weighted loss over a whole example set at fixed parameters.
double dataset_loss(const ModelState& model, std::span<const RaitExample> examples);

/// Mini-batch SGD on the adapter with per-epoch seeded shuffling. Throws
/// NumericError naming the epoch and batch if the loss goes non-finite.
TrainRun weighted_sft(const ModelState& model, std::span<const RaitExample> examples, const Hyper& hyper);

struct TrainingInputs {
    std::span<const QaSample> train;           // D_src
    const PartitionResult* parts = nullptr;    // probe output
    const FeatureSet* idk_features = nullptr;  // as_refusal, aligned with parts->idk
    const FeatureSet* ik_features = nullptr;   // as_refusal, aligned with parts->ik
};

struct TrainingSet {
    std::vector<RaitExample> examples;
    std::vector<InfluenceRecord> scores;  // empty for strategies that never score
};

TrainingSet build_training_set(Strategy strategy, const TrainingInputs& inputs, const PipelineConfig& config);

// CSV: epoch,mean_loss
void write_training_log(const TrainRun& run, const std::filesystem::path& path);

} // namespace grait
