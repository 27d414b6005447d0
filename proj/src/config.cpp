#include "grait/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <fmt/core.h>
#include <fmt/ranges.h>

namespace grait {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc{} || ptr != end)
        throw ConfigError(fmt::format("{}: cannot parse '{}'", key, text));
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(fmt::format("{}: expected true or false, got '{}'", key, text));
}

std::vector<std::uint64_t> parse_seeds(const std::string& key, const std::string& text) {
    std::vector<std::uint64_t> out;
    for (const auto& item : split_list(text)) {
        const auto dots = item.find("..");
        if (dots == std::string::npos) {
            out.push_back(parse_number<std::uint64_t>(key, item));
            continue;
        }
        const auto lo = parse_number<std::uint64_t>(key, trim(item.substr(0, dots)));
        const auto hi = parse_number<std::uint64_t>(key, trim(item.substr(dots + 2)));
        if (hi < lo) throw ConfigError(fmt::format("{}: empty range '{}'", key, item));
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
    }
    return out;
}

struct Field {
    const char* key;
    std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define GRAIT_NUM(KEY, TYPE, MEMBER)                                                                    \
    Field {                                                                                             \
        KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) {                     \
            c.MEMBER = parse_number<TYPE>(k, v);                                                        \
        },                                                                                              \
            [](const ExperimentConfig& c) { return fmt::format("{}", c.MEMBER); }                      \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        GRAIT_NUM("n_train", int, generator.n_train),
        GRAIT_NUM("n_test", int, generator.n_test),
        {"n_features",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.generator.n_features = c.arch.n_features = parse_number<int>(k, v);
         },
         [](const ExperimentConfig& c) { return fmt::format("{}", c.generator.n_features); }},
        {"n_answers",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.generator.n_answers = c.arch.n_answers = parse_number<int>(k, v);
         },
         [](const ExperimentConfig& c) { return fmt::format("{}", c.generator.n_answers); }},
        GRAIT_NUM("known_fraction", double, generator.known_fraction),
        GRAIT_NUM("noise_scale", double, generator.noise_scale),
        GRAIT_NUM("prototype_scale", double, generator.prototype_scale),
        GRAIT_NUM("hidden", int, arch.hidden),
        GRAIT_NUM("rank", int, arch.rank),
        GRAIT_NUM("pretrain_epochs", int, pretrain.epochs),
        GRAIT_NUM("pretrain_lr", double, pretrain.lr),
        GRAIT_NUM("pretrain_momentum", double, pretrain.momentum),
        GRAIT_NUM("pretrain_batch_size", int, pretrain.batch_size),
        GRAIT_NUM("pretrain_target", double, pretrain.target_known_accuracy),
        GRAIT_NUM("adapter_init_scale", double, pretrain.adapter_init_scale),
        {"probe_mode",
         [](ExperimentConfig& c, const std::string&, const std::string& v) { c.probe.mode = probe_mode_from_string(v); },
         [](const ExperimentConfig& c) { return to_string(c.probe.mode); }},
        GRAIT_NUM("n_samples", int, probe.n_samples),
        {"t_c",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.probe.t_c = c.pipeline.t_c = parse_number<double>(k, v);
         },
         [](const ExperimentConfig& c) { return fmt::format("{}", c.pipeline.t_c); }},
        GRAIT_NUM("n_ik", int, pipeline.n_ik),
        GRAIT_NUM("n_idk", int, pipeline.n_idk),
        GRAIT_NUM("tau", double, pipeline.tau),
        {"ik_strategy",
         [](ExperimentConfig& c, const std::string&, const std::string& v) {
             c.pipeline.ik_strategy = ik_strategy_from_string(v);
         },
         [](const ExperimentConfig& c) { return to_string(c.pipeline.ik_strategy); }},
        {"weight_norm",
         [](ExperimentConfig& c, const std::string&, const std::string& v) {
             c.pipeline.weight_norm = weight_norm_from_string(v);
         },
         [](const ExperimentConfig& c) { return to_string(c.pipeline.weight_norm); }},
        GRAIT_NUM("lr", double, hyper.lr),
        GRAIT_NUM("epochs", int, hyper.epochs),
        GRAIT_NUM("batch_size", int, hyper.batch_size),
        GRAIT_NUM("projection_dim", std::size_t, projection_dim),
        {"normalize_features",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.features.normalize = parse_bool(k, v);
         },
         [](const ExperimentConfig& c) { return std::string(c.features.normalize ? "true" : "false"); }},
        GRAIT_NUM("threads", unsigned, features.threads),
        {"strategies",
         [](ExperimentConfig& c, const std::string&, const std::string& v) {
             c.strategies.clear();
             for (const auto& s : split_list(v)) c.strategies.push_back(strategy_from_string(s));
         },
         [](const ExperimentConfig& c) {
             std::vector<std::string> names;
             for (auto s : c.strategies) names.push_back(to_string(s));
             return fmt::format("{}", fmt::join(names, ","));
         }},
        {"seeds", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seeds = parse_seeds(k, v); },
         [](const ExperimentConfig& c) { return fmt::format("{}", fmt::join(c.seeds, ",")); }},
        {"sweep",
         [](ExperimentConfig& c, const std::string&, const std::string& v) {
             if (v.empty() || v == "none")
                 c.sweep.reset();
             else
                 c.sweep = parse_sweep(v);
         },
         [](const ExperimentConfig& c) {
             if (!c.sweep) return std::string("none");
             return fmt::format("{}={}", c.sweep->param, fmt::join(c.sweep->values, ","));
         }},
        GRAIT_NUM("oracle_pairs", int, oracle_pairs),
        GRAIT_NUM("oracle_eta", double, oracle_eta),
    };
    return table;
}

#undef GRAIT_NUM

} // namespace

void ExperimentConfig::validate() const {
    generator.validate();
    probe.validate();
    pipeline.validate();
    hyper.validate();
    if (arch.n_features != generator.n_features || arch.n_answers != generator.n_answers)
        throw ConfigError("arch must match the generator's n_features and n_answers");
    if (arch.hidden < 1) throw ConfigError("hidden must be >= 1");
    if (arch.rank < 1) throw ConfigError("rank must be >= 1");
    if (pretrain.epochs < 0) throw ConfigError("pretrain_epochs must be >= 0");
    if (!(pretrain.lr > 0.0)) throw ConfigError("pretrain_lr must be > 0");
    if (!(pretrain.momentum >= 0.0 && pretrain.momentum < 1.0))
        throw ConfigError("pretrain_momentum must lie in [0, 1)");
    if (pretrain.batch_size < 1) throw ConfigError("pretrain_batch_size must be >= 1");
    if (!(pretrain.adapter_init_scale >= 0.0)) throw ConfigError("adapter_init_scale must be >= 0");
    if (projection_dim < 1) throw ConfigError("projection_dim must be >= 1");
    if (features.threads < 1) throw ConfigError("threads must be >= 1");
    if (strategies.empty()) throw ConfigError("strategies must be nonempty");
    if (seeds.empty()) throw ConfigError("seeds must be nonempty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
        throw ConfigError("seeds must be distinct");
    if (probe.t_c != pipeline.t_c) throw ConfigError("t_c differs between probe and pipeline");
    if (sweep) {
        if (sweep->param != "tau" && sweep->param != "t_c")
            throw ConfigError("sweep param must be tau or t_c, got '" + sweep->param + "'");
        if (sweep->values.empty()) throw ConfigError("sweep needs at least one value");
    }
    if (oracle_pairs < 0) throw ConfigError("oracle_pairs must be >= 0");
    if (!(oracle_eta > 0.0)) throw ConfigError("oracle_eta must be > 0");
}

ExperimentConfig ExperimentConfig::for_seed(std::uint64_t seed) const {
    ExperimentConfig c = *this;
    c.probe.seed = seed;
    c.pipeline.seed = seed;
    c.hyper.seed = seed;
    return c;
}

void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (key == f.key) {
            try {
                f.set(config, key, value);
            } catch (const ConfigError& e) {
                const std::string msg = e.what();
                if (msg.rfind(key, 0) == 0) throw;
                throw ConfigError(key + ": " + msg);
            }
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig config;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
        const auto key = trim(line.substr(0, eq));
        if (!seen.insert(key).second) throw ParseError("duplicate key '" + key + "'", line_no);
        try {
            apply_setting(config, key, trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

SweepSpec parse_sweep(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep: expected PARAM=V1,V2,..., got '" + spec + "'");
    SweepSpec s;
    s.param = trim(spec.substr(0, eq));
    if (s.param != "tau" && s.param != "t_c") throw ConfigError("sweep: unknown parameter '" + s.param + "'");
    for (const auto& v : split_list(spec.substr(eq + 1))) s.values.push_back(parse_number<double>("sweep", v));
    if (s.values.empty()) throw ConfigError("sweep: no values given");
    return s;
}

std::string to_text(const ExperimentConfig& config) {
    std::string out;
    for (const auto& f : fields()) out += fmt::format("{} = {}\n", f.key, f.get(config));
    return out;
}

nlohmann::json to_json(const ExperimentConfig& config) {
    auto j = nlohmann::json::object();
    for (const auto& f : fields()) j[f.key] = f.get(config);
    j["seeds"] = config.seeds;
    return j;
}

} // namespace grait
