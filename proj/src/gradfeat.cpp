#include "grait/gradfeat.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <thread>

#include <fmt/core.h>

namespace grait {

std::string to_string(Variant v) { return v == Variant::as_labeled ? "as_labeled" : "as_refusal"; }

Variant variant_from_string(const std::string& s) {
    if (s == "as_labeled") return Variant::as_labeled;
    if (s == "as_refusal") return Variant::as_refusal;
    throw ConfigError("variant must be as_labeled or as_refusal, got '" + s + "'");
}

Projection::Projection(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed)
    : input_dim_(input_dim), output_dim_(output_dim), seed_(seed), bypass_(output_dim >= input_dim) {
    if (output_dim < 1) throw ConfigError("projection dimension must be >= 1");
    if (bypass_) return;
    const auto d = static_cast<Eigen::Index>(output_dim);
    const auto p = static_cast<Eigen::Index>(input_dim);
    const double v = 1.0 / std::sqrt(static_cast<double>(output_dim));
    matrix_.resize(d, p);
    Rng rng(stream_seed(seed, Stream::projection));
    std::uint64_t word = 0;
    int left = 0;
    for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) {
            if (left == 0) {
                word = rng.bits();
                left = 64;
            }
            matrix_(i, j) = (word & 1U) ? v : -v;
            word >>= 1;
            --left;
        }
    }
}

Vec Projection::apply(const Eigen::Ref<const Vec>& g) const {
    if (static_cast<std::size_t>(g.size()) != input_dim_)
        throw ShapeError(fmt::format("projection expects {} inputs, got {}", input_dim_, g.size()));
    if (bypass_) return g;
    return matrix_ * g;
}

Projection make_projection(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed) {
    return Projection(input_dim, output_dim, seed);
}

namespace {

int target_for(const ModelState& model, const QaSample& sample, Variant variant) {
    return variant == Variant::as_refusal ? model.arch.refusal_class() : sample.gold;
}

void finish(Vec& v, const FeatureOptions& options, const std::string& id) {
    if (!v.allFinite()) throw NumericError("non-finite gradient feature for sample " + id);
    if (options.normalize) {
        const double n = v.norm();
        if (n > 0.0) v /= n;
    }
}

} // namespace

GradFeature grad_feature(const ModelState& model, const QaSample& sample, Variant variant,
                         const Projection& proj, const FeatureOptions& options) {
    if (proj.input_dim() != model.arch.adapter_size())
        throw ShapeError(fmt::format("projection input {} != adapter size {}", proj.input_dim(),
                                     model.arch.adapter_size()));
    GradFeature f;
    f.sample_id = sample.id;
    f.variant = variant;
    f.vec = proj.apply(loss_and_grad(model, sample.features, target_for(model, sample, variant)).grad);
    finish(f.vec, options, sample.id);
    return f;
}

FeatureSet batch_features(const ModelState& model, std::span<const QaSample> samples, Variant variant,
                          const Projection& proj, const FeatureOptions& options) {
    if (proj.input_dim() != model.arch.adapter_size())
        throw ShapeError(fmt::format("projection input {} != adapter size {}", proj.input_dim(),
                                     model.arch.adapter_size()));
    FeatureSet set;
    set.model_checksum = model.checksum();
    set.variant = variant;
    set.projection_seed = proj.seed();
    set.dim = static_cast<std::uint32_t>(proj.output_dim());
    set.normalized = options.normalize;
    set.features.resize(samples.size());

    // Gradients are gathered in column blocks so the projection runs as a
    // matrix product; each block writes only its own slots.
    constexpr std::size_t block = 256;
    const std::size_t n_blocks = (samples.size() + block - 1) / block;
    auto run_block = [&](std::size_t b) {
        const std::size_t start = b * block;
        const std::size_t end = std::min(samples.size(), start + block);
        Mat grads(static_cast<Eigen::Index>(model.arch.adapter_size()), static_cast<Eigen::Index>(end - start));
        for (std::size_t i = start; i < end; ++i) {
            const auto& q = samples[i];
            try {
                grads.col(static_cast<Eigen::Index>(i - start)) =
                    loss_and_grad(model, q.features, target_for(model, q, variant)).grad;
            } catch (const std::exception& e) {
                throw NumericError(fmt::format("feature extraction failed at sample {}: {}", q.id, e.what()));
            }
        }
        const Mat projected = proj.bypassed() ? grads : Mat(proj.matrix() * grads);
        for (std::size_t i = start; i < end; ++i) {
            auto& f = set.features[i];
            f.sample_id = samples[i].id;
            f.variant = variant;
            f.vec = projected.col(static_cast<Eigen::Index>(i - start));
            finish(f.vec, options, f.sample_id);
        }
    };

    const unsigned threads = std::max(1U, std::min<unsigned>(options.threads, static_cast<unsigned>(n_blocks)));
    if (threads <= 1) {
        for (std::size_t b = 0; b < n_blocks; ++b) run_block(b);
        return set;
    }

    std::vector<std::exception_ptr> errors(n_blocks);
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t b = t; b < n_blocks; b += threads) {
                try {
                    run_block(b);
                } catch (...) {
                    errors[b] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    // First failing sample in input order wins.
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return set;
}

namespace {

constexpr char kMagic[8] = {'G', 'R', 'F', 'E', 'A', 'T', '0', '1'};

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ValidationError("feature cache truncated");
    return v;
}

} // namespace

void save_feature_cache(const FeatureSet& set, const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little, "cache layout assumes little-endian");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(kMagic, sizeof(kMagic));
    put<std::uint64_t>(out, set.model_checksum);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(set.variant));
    put<std::uint8_t>(out, set.normalized ? 1 : 0);
    put<std::uint64_t>(out, set.projection_seed);
    put<std::uint32_t>(out, set.dim);
    put<std::uint64_t>(out, set.features.size());
    for (const auto& f : set.features) {
        if (f.vec.size() != static_cast<Eigen::Index>(set.dim))
            throw ShapeError("feature " + f.sample_id + " does not match the set dimension");
        put<std::uint32_t>(out, static_cast<std::uint32_t>(f.sample_id.size()));
        out.write(f.sample_id.data(), static_cast<std::streamsize>(f.sample_id.size()));
        out.write(reinterpret_cast<const char*>(f.vec.data()),
                  static_cast<std::streamsize>(sizeof(double) * set.dim));
    }
}

FeatureSet load_feature_cache(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw ValidationError(path.string() + " is not a feature cache");
    FeatureSet set;
    set.model_checksum = get<std::uint64_t>(in);
    const auto variant = get<std::uint8_t>(in);
    if (variant > 1) throw ValidationError("feature cache has unknown variant");
    set.variant = static_cast<Variant>(variant);
    set.normalized = get<std::uint8_t>(in) != 0;
    set.projection_seed = get<std::uint64_t>(in);
    set.dim = get<std::uint32_t>(in);
    const auto n = get<std::uint64_t>(in);
    set.features.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        GradFeature f;
        f.variant = set.variant;
        const auto len = get<std::uint32_t>(in);
        f.sample_id.resize(len);
        in.read(f.sample_id.data(), len);
        f.vec.resize(set.dim);
        in.read(reinterpret_cast<char*>(f.vec.data()), static_cast<std::streamsize>(sizeof(double) * set.dim));
        if (!in) throw ValidationError("feature cache truncated");
        set.features.push_back(std::move(f));
    }
    return set;
}

FeatureSet load_feature_cache(const std::filesystem::path& path, const FeatureKey& expected) {
    auto set = load_feature_cache(path);
    if (set.model_checksum != expected.model_checksum || set.variant != expected.variant ||
        set.projection_seed != expected.projection_seed)
        throw ValidationError(fmt::format("feature cache {} is stale (model {:016x}, variant {}, seed {})",
                                          path.string(), set.model_checksum, to_string(set.variant),
                                          set.projection_seed));
    return set;
}

} // namespace grait
