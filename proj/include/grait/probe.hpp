#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "grait/corpus.hpp"
#include "grait/toymodel.hpp"

namespace grait {

enum class ProbeMode { mcqa, oeqa };
enum class Knowledge { ik, idk };

std::string to_string(ProbeMode m);
ProbeMode probe_mode_from_string(const std::string& s);
std::string to_string(Knowledge k);
Knowledge knowledge_from_string(const std::string& s);

struct ProbeConfig {
    ProbeMode mode = ProbeMode::mcqa;
    int n_samples = 10;
    double t_c = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
};

struct KnowledgeRecord {
    std::string sample_id;
    double correctness = 0.0;
    Knowledge klass = Knowledge::ik;
    int target = 0;

    bool operator==(const KnowledgeRecord&) const = default;
};

/// C(x): gold probability renormalized over the answer classes (mcqa), or
/// the hit rate of n_samples stochastic decodes restricted to the answer
/// classes (oeqa). `rng` is only consumed in oeqa mode.
double correctness(const ModelState& model, const QaSample& sample, const ProbeConfig& config,
                   Rng& rng);

struct PartitionResult {
    std::vector<KnowledgeRecord> ik;
    std::vector<KnowledgeRecord> idk;
};

/// Splits samples by C >= t_c. Records keep input order; idk targets are
/// relabeled to `refusal_class`.
PartitionResult partition(std::span<const QaSample> samples, std::span<const double> correctness,
                          double t_c, int refusal_class);
PartitionResult partition(std::span<const KnowledgeRecord> records, double t_c, int refusal_class,
                          std::span<const QaSample> samples);

/// Probes every sample; the oeqa stream for sample i is derived from
/// (config.seed, i) so results do not depend on evaluation order.
std::vector<KnowledgeRecord> probe_samples(const ModelState& model, std::span<const QaSample> samples,
                                           const ProbeConfig& config);

// JSON-Lines: sample_id, correctness, klass, target.
void save_probe_jsonl(std::span<const KnowledgeRecord> records, const std::filesystem::path& path);
std::vector<KnowledgeRecord> load_probe_jsonl(const std::filesystem::path& path);

} // namespace grait
