#include "grait/probe.hpp"

#include <cmath>
#include <fstream>

#include <fmt/core.h>
#include <json.hpp>

namespace grait {

using json = nlohmann::json;

std::string to_string(ProbeMode m) { return m == ProbeMode::mcqa ? "mcqa" : "oeqa"; }

ProbeMode probe_mode_from_string(const std::string& s) {
    if (s == "mcqa") return ProbeMode::mcqa;
    if (s == "oeqa") return ProbeMode::oeqa;
    throw ConfigError("probe_mode must be mcqa or oeqa, got '" + s + "'");
}

std::string to_string(Knowledge k) { return k == Knowledge::ik ? "ik" : "idk"; }

Knowledge knowledge_from_string(const std::string& s) {
    if (s == "ik") return Knowledge::ik;
    if (s == "idk") return Knowledge::idk;
    throw ValidationError("klass must be ik or idk, got '" + s + "'");
}

void ProbeConfig::validate() const {
    if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
    if (!(t_c > 0.0 && t_c < 1.0)) throw ConfigError("t_c must lie in (0, 1)");
}

double correctness(const ModelState& model, const QaSample& sample, const ProbeConfig& config,
                   Rng& rng) {
    if (sample.gold < 0 || sample.gold >= model.arch.n_answers)
        throw ValidationError(fmt::format("sample {}: gold {} is not an answer class", sample.id, sample.gold));
    const Vec p = answer_distribution(model, sample.features);
    if (config.mode == ProbeMode::mcqa) return p(sample.gold);

    int hits = 0;
    for (int i = 0; i < config.n_samples; ++i) hits += sample_from(p, rng) == sample.gold;
    return static_cast<double>(hits) / static_cast<double>(config.n_samples);
}

PartitionResult partition(std::span<const QaSample> samples, std::span<const double> c, double t_c,
                          int refusal_class) {
    if (samples.size() != c.size()) throw ShapeError("partition: samples and correctness differ in length");
    PartitionResult out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!std::isfinite(c[i]) || c[i] < 0.0 || c[i] > 1.0)
            throw ValidationError(fmt::format("sample {}: correctness {} outside [0, 1]", samples[i].id, c[i]));
        KnowledgeRecord r;
        r.sample_id = samples[i].id;
        r.correctness = c[i];
        if (c[i] >= t_c) {
            r.klass = Knowledge::ik;
            r.target = samples[i].gold;
            out.ik.push_back(std::move(r));
        } else {
            r.klass = Knowledge::idk;
            r.target = refusal_class;
            out.idk.push_back(std::move(r));
        }
    }
    return out;
}

PartitionResult partition(std::span<const KnowledgeRecord> records, double t_c, int refusal_class,
                          std::span<const QaSample> samples) {
    if (records.size() != samples.size()) throw ShapeError("partition: records and samples differ in length");
    std::vector<double> c;
    c.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].sample_id != samples[i].id)
            throw ValidationError(fmt::format("partition: record {} does not match sample {}",
                                              records[i].sample_id, samples[i].id));
        c.push_back(records[i].correctness);
    }
    return partition(samples, c, t_c, refusal_class);
}

std::vector<KnowledgeRecord> probe_samples(const ModelState& model, std::span<const QaSample> samples,
                                           const ProbeConfig& config) {
    config.validate();
    std::vector<double> c(samples.size());
    const auto base = stream_seed(config.seed, Stream::probe);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        Rng rng(Rng::mix(base, i));
        c[i] = correctness(model, samples[i], config, rng);
    }
    const auto parts = partition(samples, c, config.t_c, model.arch.refusal_class());
    // Restore input order across the two classes.
    std::vector<KnowledgeRecord> out;
    out.reserve(samples.size());
    std::size_t a = 0, b = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (a < parts.ik.size() && parts.ik[a].sample_id == samples[i].id)
            out.push_back(parts.ik[a++]);
        else
            out.push_back(parts.idk[b++]);
    }
    return out;
}

void save_probe_jsonl(std::span<const KnowledgeRecord> records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (const auto& r : records) {
        json j;
        j["sample_id"] = r.sample_id;
        j["correctness"] = r.correctness;
        j["klass"] = to_string(r.klass);
        j["target"] = r.target;
        out << j.dump() << '\n';
    }
}

std::vector<KnowledgeRecord> load_probe_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<KnowledgeRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = json::parse(line);
            KnowledgeRecord r;
            r.sample_id = j.at("sample_id").get<std::string>();
            r.correctness = j.at("correctness").get<double>();
            r.klass = knowledge_from_string(j.at("klass").get<std::string>());
            r.target = j.at("target").get<int>();
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ParseError(e.what(), lineno);
        } catch (const ValidationError& e) {
            throw ParseError(e.what(), lineno);
        }
    }
    return out;
}

} // namespace grait
