#include <doctest.h>

#include "grait/config.hpp"
#include "helpers.hpp"

using namespace grait;
using namespace grait::testing;

TEST_CASE("defaults are valid and round-trip through text") {
    const ExperimentConfig def;
    CHECK_NOTHROW(def.validate());
    const auto back = parse_config(to_text(def));
    CHECK(to_text(back) == to_text(def));
    CHECK(back.arch == def.arch);
    CHECK(back.seeds == def.seeds);
    CHECK(back.strategies == def.strategies);
    CHECK(!back.sweep);
}

TEST_CASE("parsing assignments") {
    const auto c = parse_config(R"(
# comment line
n_train = 300   # trailing comment
n_features = 8
tau = 0.25
strategies = grait, r_tuning
seeds = 3, 7..9
sweep = t_c=0.5,0.75
normalize_features = false
)");
    CHECK(c.generator.n_train == 300);
    CHECK(c.generator.n_features == 8);
    CHECK(c.arch.n_features == 8);
    CHECK(c.pipeline.tau == 0.25);
    CHECK(c.strategies == std::vector<Strategy>{Strategy::grait, Strategy::r_tuning});
    CHECK(c.seeds == std::vector<std::uint64_t>{3, 7, 8, 9});
    REQUIRE(c.sweep);
    CHECK(c.sweep->param == "t_c");
    CHECK(c.sweep->values == std::vector<double>{0.5, 0.75});
    CHECK(!c.features.normalize);
    CHECK(to_text(parse_config(to_text(c))) == to_text(c));

    const auto j = to_json(c);
    CHECK(j["tau"] == "0.25");
    CHECK(j["seeds"].size() == 4);
}

TEST_CASE("t_c sets probe and pipeline together") {
    ExperimentConfig c;
    apply_setting(c, "t_c", "0.6");
    CHECK(c.probe.t_c == 0.6);
    CHECK(c.pipeline.t_c == 0.6);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("parse errors carry the line number") {
    try {
        parse_config("n_train = 10\n\nthis line has no equals\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    try {
        parse_config("tau = 0.1\ntau = 0.2\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("tau") != std::string::npos);
    }
    try {
        parse_config("lr = 0.1\nbogus_key = 1\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("bogus_key") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("n_train = ten\n"), ParseError);
    CHECK_THROWS_AS(parse_config("n_train = 10x\n"), ParseError);
}

TEST_CASE("setting errors name the key") {
    ExperimentConfig c;
    for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{{"epochs", "two"},
                                                                               {"strategies", "grait,nope"},
                                                                               {"seeds", "5..2"},
                                                                               {"normalize_features", "maybe"},
                                                                               {"sweep", "lr=0.1"}}) {
        try {
            apply_setting(c, k, v);
            FAIL("expected ConfigError for ", k);
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find(k) != std::string::npos);
        }
    }
    CHECK_THROWS_AS(apply_setting(c, "no_such_key", "1"), ConfigError);
}

TEST_CASE("sweep specs") {
    const auto s = parse_sweep("tau=0.01, 0.05,0.1");
    CHECK(s.param == "tau");
    CHECK(s.values == std::vector<double>{0.01, 0.05, 0.1});
    CHECK_THROWS_AS(parse_sweep("tau"), ConfigError);
    CHECK_THROWS_AS(parse_sweep("tau="), ConfigError);
    CHECK_THROWS_AS(parse_sweep("lr=0.1"), ConfigError);
    CHECK_THROWS_AS(parse_sweep("tau=abc"), ConfigError);
}

TEST_CASE("validation rejects inconsistent configs") {
    auto bad = [](auto mutate) {
        ExperimentConfig c;
        mutate(c);
        CHECK_THROWS_AS(c.validate(), ConfigError);
    };
    bad([](ExperimentConfig& c) { c.arch.n_features = 7; });
    bad([](ExperimentConfig& c) { c.arch.rank = 0; });
    bad([](ExperimentConfig& c) { c.pretrain.momentum = 1.0; });
    bad([](ExperimentConfig& c) { c.projection_dim = 0; });
    bad([](ExperimentConfig& c) { c.strategies.clear(); });
    bad([](ExperimentConfig& c) { c.seeds = {1, 1}; });
    bad([](ExperimentConfig& c) { c.seeds.clear(); });
    bad([](ExperimentConfig& c) { c.probe.t_c = 0.3; });
    bad([](ExperimentConfig& c) { c.oracle_eta = 0.0; });
    bad([](ExperimentConfig& c) { c.pipeline.tau = 0.0; });
    bad([](ExperimentConfig& c) { c.generator.known_fraction = 1.5; });
}

TEST_CASE("for_seed sets every stage seed") {
    const auto c = ExperimentConfig{}.for_seed(42);
    CHECK(c.probe.seed == 42);
    CHECK(c.pipeline.seed == 42);
    CHECK(c.hyper.seed == 42);
}

TEST_CASE("load_config reads files") {
    TempDir dir("config");
    {
        std::ofstream out(dir / "c.txt");
        out << "rank = 6\n";
    }
    CHECK(load_config(dir / "c.txt").arch.rank == 6);
    CHECK_THROWS_AS(load_config(dir / "missing.txt"), ConfigError);
}
