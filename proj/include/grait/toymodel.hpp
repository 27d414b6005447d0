#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "grait/common.hpp"
#include "grait/corpus.hpp"

namespace grait {

struct Arch {
    int n_features = 32;
    int hidden = 128;
    int n_answers = 4;
    int rank = 15;

    int n_classes() const { return n_answers + 1; }
    int refusal_class() const { return n_answers; }
    std::size_t adapter_size() const {
        return static_cast<std::size_t>(rank) * hidden + static_cast<std::size_t>(n_classes()) * rank;
    }
    bool operator==(const Arch&) const = default;
};

/// Frozen two-layer base with a low-rank adapter on the output head.
///
///   hidden = tanh(base_in * x + base_bias)
///   logits = (base_out + adapter_b * adapter_a) * hidden
///
/// The last class is the refusal class. Adapter gradients are flattened as
/// adapter_a row-major followed by adapter_b row-major.
struct ModelState {
    Arch arch;
    Mat base_in;    // hidden x n_features
    Vec base_bias;  // hidden
    Mat base_out;   // n_classes x hidden
    Mat adapter_a;  // rank x hidden
    Mat adapter_b;  // n_classes x rank

    Mat effective_out() const { return base_out + adapter_b * adapter_a; }
    Vec hidden_of(const Eigen::Ref<const Vec>& x) const;

    std::uint64_t base_checksum() const;
    std::uint64_t checksum() const;

    Vec adapter_params() const;
    void set_adapter_params(const Eigen::Ref<const Vec>& flat);

    bool operator==(const ModelState& o) const;
};

struct Hyper {
    double lr = 0.1;
    int epochs = 3;
    int batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PretrainConfig {
    int epochs = 20;
    double lr = 0.05;
    double momentum = 0.9;
    int batch_size = 32;
    double target_known_accuracy = 0.9;
    // Std-dev of the random adapter_a entries; adapter_b starts at zero.
    double adapter_init_scale = 0.02;
};

ModelState init_model(const Arch& arch, double adapter_init_scale, std::uint64_t seed);

struct PretrainResult {
    ModelState model;
    double known_accuracy = 0.0;
    double unknown_accuracy = 0.0;
    int epochs_run = 0;
};

/// Fits the base on latent-known training samples with their gold labels
/// (momentum SGD over base_in, base_bias, base_out). Throws NumericError
/// carrying the final accuracies when the known-sample target is missed or
/// unknown-sample accuracy exceeds 1/n_answers + 0.15.
/// Zero epochs returns the random initialization untouched.
PretrainResult pretrain_base(std::span<const QaSample> train, const Arch& arch,
                             const PretrainConfig& config, std::uint64_t seed);

Vec forward(const ModelState& model, const Eigen::Ref<const Vec>& features);
Vec logits(const ModelState& model, const Eigen::Ref<const Vec>& features);

// Forward distribution restricted to the answer classes (refusal excluded).
Vec answer_distribution(const ModelState& model, const Eigen::Ref<const Vec>& features);

struct LossGrad {
    double loss = 0.0;
    Vec grad;
};

double loss(const ModelState& model, const Eigen::Ref<const Vec>& features, int target);
LossGrad loss_and_grad(const ModelState& model, const Eigen::Ref<const Vec>& features, int target);

int sample_from(const Eigen::Ref<const Vec>& probs, Rng& rng);
int sample_answer(const ModelState& model, const Eigen::Ref<const Vec>& features, Rng& rng);

ModelState sgd_step(const ModelState& model, const Eigen::Ref<const Vec>& grad, double lr);

// Argmax with ties resolved to the lowest class index.
int argmax(const Eigen::Ref<const Vec>& v);

Vec softmax(const Eigen::Ref<const Vec>& z);

/// JSON checkpoint: {"arch": {...}, "base_in": [[...]], "base_bias": [...],
/// "base_out": [[...]], "adapter_a": [[...]], "adapter_b": [[...]]}.
/// Doubles use shortest round-trip formatting so loading is exact.
void save_checkpoint(const ModelState& model, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

} // namespace grait
