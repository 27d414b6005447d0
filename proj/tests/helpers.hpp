#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "grait/corpus.hpp"
#include "grait/toymodel.hpp"

namespace grait::testing {

inline Arch small_arch() { return Arch{6, 10, 3, 4}; }

// Base and adapter both random, so every gradient block is active.
inline ModelState random_model(const Arch& arch, std::uint64_t seed, double adapter_b_scale = 0.3) {
    ModelState m = init_model(arch, 0.3, seed);
    Rng rng(seed ^ 0xabcdefULL);
    for (Eigen::Index i = 0; i < m.adapter_b.size(); ++i) m.adapter_b.data()[i] = adapter_b_scale * rng.normal();
    return m;
}

inline QaSample random_sample(const Arch& arch, Rng& rng, const std::string& id) {
    QaSample q;
    q.id = id;
    q.features = Vec(arch.n_features);
    for (auto& x : q.features) x = rng.normal();
    q.gold = static_cast<int>(rng.below(static_cast<std::size_t>(arch.n_answers)));
    return q;
}

inline std::vector<QaSample> random_samples(const Arch& arch, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<QaSample> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(random_sample(arch, rng, "s" + std::to_string(1000 + i)));
    return out;
}

// Central differences of the loss over the flattened adapter parameters.
inline double fd_coordinate(const ModelState& model, const QaSample& q, int target, Eigen::Index k, double h) {
    ModelState plus = model, minus = model;
    Vec p = model.adapter_params();
    Vec pp = p, pm = p;
    pp(k) += h;
    pm(k) -= h;
    plus.set_adapter_params(pp);
    minus.set_adapter_params(pm);
    return (loss(plus, q.features, target) - loss(minus, q.features, target)) / (2.0 * h);
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                (std::string("grait_") + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

} // namespace grait::testing
