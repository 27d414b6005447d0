#include "grait/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <fmt/core.h>
#include <json.hpp>

namespace grait {

using json = nlohmann::json;

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + s + "'");
}

void GeneratorConfig::validate() const {
    if (n_answers < 2) throw ConfigError("n_answers must be >= 2");
    if (n_features < 1) throw ConfigError("n_features must be >= 1");
    if (n_train < 0) throw ConfigError("n_train must be >= 0");
    if (n_test < 0) throw ConfigError("n_test must be >= 0");
    if (!(known_fraction >= 0.0 && known_fraction <= 1.0))
        throw ConfigError("known_fraction must lie in [0, 1]");
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale))
        throw ConfigError("noise_scale must be finite and >= 0");
    if (!(prototype_scale >= 0.0) || !std::isfinite(prototype_scale))
        throw ConfigError("prototype_scale must be finite and >= 0");
}

std::vector<QaSample> Corpus::split(Split s) const {
    std::vector<QaSample> out;
    for (const auto& q : samples)
        if (q.split == s) out.push_back(q);
    return out;
}

Mat make_prototypes(const GeneratorConfig& config, std::uint64_t seed) {
    Rng rng(stream_seed(seed, Stream::prototypes));
    Mat protos(config.n_answers, config.n_features);
    for (int k = 0; k < config.n_answers; ++k) {
        Vec v(config.n_features);
        for (auto& x : v) x = rng.normal();
        // Gram-Schmidt while the feature space still has room; beyond that
        // the directions are only normalized.
        if (k < config.n_features) {
            for (int j = 0; j < k; ++j) {
                const Vec pj = protos.row(j).transpose();
                v -= pj.dot(v) * pj;
            }
        }
        protos.row(k) = (v / v.norm()).transpose();
    }
    return protos * config.prototype_scale;
}

namespace {

void fill_split(std::vector<QaSample>& out, const GeneratorConfig& config, const Mat& protos,
                int n, Split split, Rng& rng) {
    const auto n_known = static_cast<int>(std::ceil(config.known_fraction * n - 1e-9));
    std::vector<char> known(n, 0);
    std::fill(known.begin(), known.begin() + std::min(n_known, n), 1);
    std::shuffle(known.begin(), known.end(), rng.engine());

    const std::string prefix = split == Split::train ? "tr-" : "te-";
    for (int i = 0; i < n; ++i) {
        QaSample q;
        q.id = fmt::format("{}{:06d}", prefix, i);
        q.split = split;
        q.gold = static_cast<int>(rng.below(config.n_answers));
        q.latent_known = known[i] != 0;
        q.features.resize(config.n_features);
        for (auto& x : q.features) x = config.noise_scale * rng.normal();
        if (q.latent_known) q.features += protos.row(q.gold).transpose();
        out.push_back(std::move(q));
    }
}

} // namespace

Corpus generate_synthetic(const GeneratorConfig& config, std::uint64_t seed) {
    config.validate();
    const Mat protos = make_prototypes(config, seed);
    Rng rng(stream_seed(seed, Stream::corpus));

    Corpus c;
    c.meta = config;
    c.seed = seed;
    c.samples.reserve(static_cast<std::size_t>(config.n_train + config.n_test));
    fill_split(c.samples, config, protos, config.n_train, Split::train, rng);
    fill_split(c.samples, config, protos, config.n_test, Split::test, rng);
    return c;
}

void save_jsonl(std::span<const QaSample> samples, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (const auto& q : samples) {
        json j;
        j["id"] = q.id;
        j["features"] = std::vector<double>(q.features.begin(), q.features.end());
        j["gold"] = q.gold;
        j["latent_known"] = q.latent_known;
        j["split"] = to_string(q.split);
        out << j.dump() << '\n';
    }
}

void save_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
    save_jsonl(std::span<const QaSample>(corpus.samples), path);
}

Corpus load_jsonl(const std::filesystem::path& path, int n_answers) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());

    Corpus c;
    c.meta.n_answers = n_answers;
    c.meta.n_train = 0;
    c.meta.n_test = 0;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    int width = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(e.what(), lineno);
        }
        QaSample q;
        try {
            q.id = j.at("id").get<std::string>();
            const auto feats = j.at("features").get<std::vector<double>>();
            q.features = Eigen::Map<const Vec>(feats.data(), static_cast<Eigen::Index>(feats.size()));
            q.gold = j.at("gold").get<int>();
            q.latent_known = j.at("latent_known").get<bool>();
            q.split = split_from_string(j.at("split").get<std::string>());
        } catch (const json::exception& e) {
            throw ParseError(e.what(), lineno);
        } catch (const ValidationError& e) {
            throw ParseError(e.what(), lineno);
        }

        const auto where = fmt::format("line {} (id '{}')", lineno, q.id);
        if (q.gold < 0 || q.gold >= n_answers)
            throw ValidationError(fmt::format("{}: gold {} outside [0, {})", where, q.gold, n_answers));
        if (!q.features.allFinite()) throw ValidationError(where + ": non-finite feature");
        if (width < 0) width = static_cast<int>(q.features.size());
        if (q.features.size() != width)
            throw ValidationError(fmt::format("{}: expected {} features, got {}", where, width,
                                              q.features.size()));
        if (!seen.insert(q.id).second) throw ValidationError(where + ": duplicate id");

        (q.split == Split::train ? c.meta.n_train : c.meta.n_test) += 1;
        c.samples.push_back(std::move(q));
    }
    if (width > 0) c.meta.n_features = width;
    return c;
}

} // namespace grait
