#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "grait/common.hpp"

namespace grait {

enum class Split { train, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct QaSample {
    std::string id;
    Vec features;
    int gold = 0;
    // Generator-side ground truth; pipeline stages never read it.
    bool latent_known = false;
    Split split = Split::train;

    bool operator==(const QaSample& o) const {
        return id == o.id && features.size() == o.features.size() &&
               (features.array() == o.features.array()).all() && gold == o.gold &&
               latent_known == o.latent_known && split == o.split;
    }
};

struct GeneratorConfig {
    int n_train = 5000;
    int n_test = 1000;
    int n_features = 32;
    int n_answers = 4;
    double known_fraction = 0.6;
    double noise_scale = 1.0;
    // Norm of each class prototype.
    double prototype_scale = 3.0;

    void validate() const;
};

struct Corpus {
    std::vector<QaSample> samples;
    GeneratorConfig meta;
    std::uint64_t seed = 0;

    std::vector<QaSample> split(Split s) const;
};

Corpus generate_synthetic(const GeneratorConfig& config, std::uint64_t seed);

// Class prototypes used by the generator, one row per answer class.
Mat make_prototypes(const GeneratorConfig& config, std::uint64_t seed);

// One JSON object per line: id, features, gold, latent_known, split.
void save_jsonl(std::span<const QaSample> samples, const std::filesystem::path& path);
void save_jsonl(const Corpus& corpus, const std::filesystem::path& path);

// `n_answers` bounds the gold labels; the file itself carries no header.
Corpus load_jsonl(const std::filesystem::path& path, int n_answers);

} // namespace grait
