#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "grait/corpus.hpp"
#include "grait/influence.hpp"
#include "grait/probe.hpp"
#include "grait/toymodel.hpp"
#include "grait/trainer.hpp"

namespace grait {

struct SweepSpec {
    std::string param;  // "tau" or "t_c"
    std::vector<double> values;

    bool operator==(const SweepSpec&) const = default;
};

/// Everything one experiment needs. Stage configs carry seed 0 here; the
/// per-run seed is injected by `for_seed`.
struct ExperimentConfig {
    GeneratorConfig generator;
    Arch arch;
    PretrainConfig pretrain;
    ProbeConfig probe;
    PipelineConfig pipeline;
    Hyper hyper;
    std::size_t projection_dim = 512;
    FeatureOptions features;
    std::vector<Strategy> strategies{Strategy::grait, Strategy::van_tuning, Strategy::r_tuning,
                                     Strategy::ablate_no_o1, Strategy::ablate_no_o2};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::optional<SweepSpec> sweep;
    int oracle_pairs = 100;
    double oracle_eta = 1e-3;

    void validate() const;
    // Sets the seed of every stage config.
    ExperimentConfig for_seed(std::uint64_t seed) const;
};

/// Applies one `key = value` assignment. Unknown keys and unparsable values
/// throw ConfigError naming the key.
void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value);

/// Flat text format: one `key = value` per line, `#` starts a comment.
/// List values are comma separated; seeds also accept `a..b`.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// "param=v1,v2,..." as accepted by --sweep.
SweepSpec parse_sweep(const std::string& spec);

// Round-trips through parse_config.
std::string to_text(const ExperimentConfig& config);
nlohmann::json to_json(const ExperimentConfig& config);

} // namespace grait
