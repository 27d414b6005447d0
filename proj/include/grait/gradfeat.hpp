#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "grait/corpus.hpp"
#include "grait/toymodel.hpp"

namespace grait {

enum class Variant : std::uint8_t { as_labeled = 0, as_refusal = 1 };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

/// Seeded Rademacher sketch with entries +-1/sqrt(d). When d >= the input
/// dimension the projection is the identity and no matrix is stored.
class Projection {
public:
    Projection(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed);

    std::size_t input_dim() const { return input_dim_; }
    std::size_t output_dim() const { return bypass_ ? input_dim_ : output_dim_; }
    std::size_t requested_dim() const { return output_dim_; }
    std::uint64_t seed() const { return seed_; }
    bool bypassed() const { return bypass_; }
    const Mat& matrix() const { return matrix_; }

    Vec apply(const Eigen::Ref<const Vec>& g) const;

private:
    std::size_t input_dim_;
    std::size_t output_dim_;
    std::uint64_t seed_;
    bool bypass_;
    Mat matrix_;
};

Projection make_projection(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed);

struct GradFeature {
    std::string sample_id;
    Variant variant = Variant::as_labeled;
    Vec vec;
};

struct FeatureOptions {
    // Unit-normalize each projected feature. Off by default: scores use raw
    // inner products.
    bool normalize = false;
    unsigned threads = 1;
};

/// as_labeled differentiates toward the gold answer, as_refusal toward the
/// refusal class regardless of the sample's knowledge class.
GradFeature grad_feature(const ModelState& model, const QaSample& sample, Variant variant,
                         const Projection& proj, const FeatureOptions& options = {});

struct FeatureSet {
    std::uint64_t model_checksum = 0;
    Variant variant = Variant::as_labeled;
    std::uint64_t projection_seed = 0;
    std::uint32_t dim = 0;
    bool normalized = false;
    std::vector<GradFeature> features;

    std::size_t size() const { return features.size(); }
    bool empty() const { return features.empty(); }
};

/// Output order matches input order for any thread count.
FeatureSet batch_features(const ModelState& model, std::span<const QaSample> samples, Variant variant,
                          const Projection& proj, const FeatureOptions& options = {});

/// Binary cache, little-endian:
///   char[8]  magic "GRFEAT01"
///   u64      model checksum
///   u8       variant (0 as_labeled, 1 as_refusal)
///   u8       normalized flag
///   u64      projection seed
///   u32      feature dimension d
///   u64      record count n
///   n x { u32 id length, id bytes, d x f64 }
void save_feature_cache(const FeatureSet& set, const std::filesystem::path& path);

struct FeatureKey {
    std::uint64_t model_checksum;
    Variant variant;
    std::uint64_t projection_seed;
};

/// Throws ValidationError when the cached key differs from `expected`.
FeatureSet load_feature_cache(const std::filesystem::path& path, const FeatureKey& expected);
FeatureSet load_feature_cache(const std::filesystem::path& path);

} // namespace grait
