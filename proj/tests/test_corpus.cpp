#include <cmath>
#include <fstream>
#include <set>

#include <doctest.h>

#include "grait/corpus.hpp"
#include "helpers.hpp"

using namespace grait;
using grait::testing::TempDir;
using grait::testing::read_file;

namespace {

std::size_t count_known(const std::vector<QaSample>& xs) {
    std::size_t n = 0;
    for (const auto& q : xs) n += q.latent_known;
    return n;
}

// Index of the prototype with the largest inner product.
int nearest_prototype(const Mat& protos, const Vec& x) {
    Eigen::Index best = 0;
    (protos * x).maxCoeff(&best);
    return static_cast<int>(best);
}

} // namespace

TEST_CASE("known counts follow the ceiling rule per split") {
    GeneratorConfig cfg;
    cfg.n_train = 100;
    cfg.n_test = 7;
    cfg.known_fraction = 0.6;
    const auto c = generate_synthetic(cfg, 3);
    CHECK(count_known(c.split(Split::train)) == 60);
    CHECK(count_known(c.split(Split::test)) == 5);  // ceil(4.2)
    CHECK(c.split(Split::train).size() == 100);
    CHECK(c.split(Split::test).size() == 7);

    for (int n : {0, 1, 9, 33}) {
        for (double kf : {0.0, 0.25, 0.5, 0.9, 1.0}) {
            cfg.n_train = n;
            cfg.n_test = 0;
            cfg.known_fraction = kf;
            const auto k = count_known(generate_synthetic(cfg, 11).samples);
            CHECK(k == static_cast<std::size_t>(std::ceil(kf * n - 1e-9)));
        }
    }
}

TEST_CASE("same config and seed give byte-identical corpora") {
    GeneratorConfig cfg;
    cfg.n_train = 50;
    cfg.n_test = 20;
    TempDir dir("corpus_det");
    const auto a = generate_synthetic(cfg, 42);
    const auto b = generate_synthetic(cfg, 42);
    CHECK(a.samples == b.samples);
    save_jsonl(a, dir / "a.jsonl");
    save_jsonl(b, dir / "b.jsonl");
    CHECK(read_file(dir / "a.jsonl") == read_file(dir / "b.jsonl"));

    const auto c = generate_synthetic(cfg, 43);
    CHECK_FALSE(a.samples == c.samples);
}

TEST_CASE("ids are unique and splits are labeled") {
    GeneratorConfig cfg;
    cfg.n_train = 200;
    cfg.n_test = 50;
    const auto c = generate_synthetic(cfg, 1);
    std::set<std::string> ids;
    for (const auto& q : c.samples) {
        CHECK(ids.insert(q.id).second);
        CHECK(q.gold >= 0);
        CHECK(q.gold < cfg.n_answers);
        CHECK(q.features.size() == cfg.n_features);
    }
    CHECK(c.samples.front().split == Split::train);
    CHECK(c.samples.back().split == Split::test);
}

TEST_CASE("prototypes are orthogonal with the configured norm") {
    GeneratorConfig cfg;
    cfg.n_features = 16;
    cfg.n_answers = 5;
    cfg.prototype_scale = 2.5;
    const Mat p = make_prototypes(cfg, 9);
    const Mat gram = p * p.transpose();
    for (int i = 0; i < cfg.n_answers; ++i) {
        CHECK(gram(i, i) == doctest::Approx(2.5 * 2.5).epsilon(1e-12));
        for (int j = 0; j < i; ++j) CHECK(std::abs(gram(i, j)) < 1e-10);
    }
}

TEST_CASE("known samples are learnable and unknown samples are not") {
    GeneratorConfig cfg;
    cfg.n_train = 4000;
    cfg.n_test = 0;
    cfg.known_fraction = 0.5;
    const auto c = generate_synthetic(cfg, 5);
    const Mat protos = make_prototypes(cfg, 5);
    std::size_t known = 0, known_hit = 0, unknown = 0, unknown_hit = 0;
    for (const auto& q : c.samples) {
        const bool hit = nearest_prototype(protos, q.features) == q.gold;
        if (q.latent_known) {
            ++known;
            known_hit += hit;
        } else {
            ++unknown;
            unknown_hit += hit;
        }
    }
    const double acc_known = static_cast<double>(known_hit) / known;
    const double acc_unknown = static_cast<double>(unknown_hit) / unknown;
    CHECK(acc_known > 0.85);
    // chance = 1/4; 2000 draws give a standard error near 0.01
    CHECK(std::abs(acc_unknown - 0.25) < 0.04);
}

TEST_CASE("known_fraction zero leaves every sample uncorrelated") {
    GeneratorConfig cfg;
    cfg.n_train = 30;
    cfg.n_test = 10;
    cfg.known_fraction = 0.0;
    CHECK(count_known(generate_synthetic(cfg, 2).samples) == 0);
}

TEST_CASE("invalid generator configs name the field") {
    auto expect = [](GeneratorConfig cfg, const std::string& field) {
        try {
            generate_synthetic(cfg, 1);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find(field) != std::string::npos);
        }
    };
    GeneratorConfig cfg;
    cfg.n_answers = 1;
    expect(cfg, "n_answers");
    cfg = {};
    cfg.known_fraction = 1.5;
    expect(cfg, "known_fraction");
    cfg = {};
    cfg.n_train = -1;
    expect(cfg, "n_train");
    cfg = {};
    cfg.noise_scale = -1.0;
    expect(cfg, "noise_scale");
}

TEST_CASE("jsonl round trip is exact") {
    GeneratorConfig cfg;
    cfg.n_train = 25;
    cfg.n_test = 5;
    TempDir dir("corpus_rt");
    const auto c = generate_synthetic(cfg, 8);
    save_jsonl(c, dir / "c.jsonl");
    const auto back = load_jsonl(dir / "c.jsonl", cfg.n_answers);
    CHECK(back.samples == c.samples);
    CHECK(back.meta.n_features == cfg.n_features);
}

TEST_CASE("loader rejects malformed input") {
    TempDir dir("corpus_bad");
    auto write = [&](const std::string& body) {
        std::ofstream(dir / "x.jsonl", std::ios::binary) << body;
        return dir / "x.jsonl";
    };
    const std::string ok = R"({"id":"a","features":[0.5,1.0],"gold":1,"latent_known":true,"split":"train"})";

    SUBCASE("broken json reports its line") {
        try {
            load_jsonl(write(ok + "\n\n{\"id\": oops}\n"), 4);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 3);
        }
    }
    SUBCASE("gold outside the answer range") {
        CHECK_THROWS_AS(load_jsonl(write(ok + "\n"), 1), ValidationError);
    }
    SUBCASE("duplicate id") {
        CHECK_THROWS_AS(load_jsonl(write(ok + "\n" + ok + "\n"), 4), ValidationError);
    }
    SUBCASE("feature width mismatch") {
        const std::string wide = R"({"id":"b","features":[1,2,3],"gold":0,"latent_known":false,"split":"test"})";
        CHECK_THROWS_AS(load_jsonl(write(ok + "\n" + wide + "\n"), 4), ValidationError);
    }
    SUBCASE("unknown split") {
        const std::string bad = R"({"id":"c","features":[1,2],"gold":0,"latent_known":false,"split":"dev"})";
        CHECK_THROWS(load_jsonl(write(bad + "\n"), 4));
    }
    SUBCASE("missing field") {
        CHECK_THROWS_AS(load_jsonl(write(R"({"id":"d","gold":0})" "\n"), 4), ParseError);
    }
}
