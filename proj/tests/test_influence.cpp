#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <set>

#include <doctest.h>
#include <fmt/core.h>

#include "grait/influence.hpp"
#include "helpers.hpp"

using namespace grait;
using namespace grait::testing;

namespace {

// Scores drawn from a small grid so that ties are common.
std::vector<ScoredId> random_scored(Rng& rng, std::size_t n) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    std::vector<ScoredId> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back({fmt::format("id{:03d}", perm[i]), static_cast<double>(rng.below(5)) - 2.0});
    return out;
}

std::vector<std::string> brute_topk(std::vector<ScoredId> xs, std::size_t k) {
    std::sort(xs.begin(), xs.end(), [](const ScoredId& a, const ScoredId& b) {
        return a.score > b.score || (a.score == b.score && a.id < b.id);
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(xs[i].id);
    return out;
}

FeatureSet make_set(const std::vector<Vec>& vecs, const std::string& prefix) {
    FeatureSet s;
    s.variant = Variant::as_refusal;
    s.dim = vecs.empty() ? 0 : static_cast<std::uint32_t>(vecs.front().size());
    for (std::size_t i = 0; i < vecs.size(); ++i)
        s.features.push_back({prefix + std::to_string(i), Variant::as_refusal, vecs[i]});
    return s;
}

std::vector<Vec> random_vecs(Rng& rng, std::size_t n, int d, double shift = 0.0) {
    std::vector<Vec> out;
    for (std::size_t i = 0; i < n; ++i) {
        Vec v(d);
        for (auto& x : v) x = rng.normal() + shift;
        out.push_back(v);
    }
    return out;
}

} // namespace

TEST_CASE("mean gradient and the three influence forms") {
    Rng rng(1);
    const auto idk = random_vecs(rng, 7, 5, 0.4);
    const auto ik = random_vecs(rng, 4, 5, -0.2);
    Vec m_idk = Vec::Zero(5), m_ik = Vec::Zero(5);
    for (const auto& v : idk) m_idk += v / 7.0;
    for (const auto& v : ik) m_ik += v / 4.0;
    CHECK((mean_gradient(idk) - m_idk).norm() < 1e-14);

    const auto scores = score_idk(make_set(idk, "d"), make_set(ik, "k"));
    REQUIRE(scores.size() == 7);
    for (std::size_t i = 0; i < 7; ++i) {
        CHECK(scores[i].i_ref == doctest::Approx(idk[i].dot(m_idk)).epsilon(1e-12));
        CHECK(scores[i].i_over == doctest::Approx(idk[i].dot(m_ik)).epsilon(1e-12));
        CHECK(scores[i].i_sta == doctest::Approx(scores[i].i_ref - scores[i].i_over).epsilon(1e-12));
    }
    CHECK_THROWS(mean_gradient(std::vector<Vec>{}));
    CHECK_THROWS_AS(refusal_influence(Vec::Zero(3), Vec::Zero(4)), ShapeError);
}

TEST_CASE("empty ik set leaves stable influence equal to refusal influence") {
    Rng rng(2);
    const auto scores = score_idk(make_set(random_vecs(rng, 5, 4), "d"), FeatureSet{});
    for (const auto& s : scores) {
        CHECK(s.i_over == 0.0);
        CHECK(s.i_sta == s.i_ref);
    }
}

TEST_CASE("select_topk_idk matches exhaustive sort-then-take") {
    Rng rng(3);
    for (int rep = 0; rep < 1000; ++rep) {
        const auto n = rng.below(30);
        const auto xs = random_scored(rng, n);
        const auto k = n == 0 ? 0 : rng.below(n + 1);
        CHECK(select_topk_idk(xs, k) == brute_topk(xs, k));
    }
    CHECK_THROWS_AS(select_topk_idk(std::vector<ScoredId>{{"a", 1.0}}, 2), ValidationError);
}

TEST_CASE("top-k by refusal influence is an optimal fixed-size subset") {
    Rng rng(4);
    for (int rep = 0; rep < 200; ++rep) {
        const auto n = 1 + rng.below(12);
        std::vector<ScoredId> xs;
        for (std::size_t i = 0; i < n; ++i) xs.push_back({fmt::format("s{:02d}", i), rng.normal()});
        const auto k = rng.below(n + 1);
        const auto chosen = select_topk_idk(xs, k);
        double got = 0.0;
        for (const auto& id : chosen)
            for (const auto& x : xs)
                if (x.id == id) got += x.score;
        double best = -1e300;
        for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
            if (static_cast<std::size_t>(std::popcount(mask)) != k) continue;
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                if (mask & (1u << i)) s += xs[i].score;
            best = std::max(best, s);
        }
        CHECK(got == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("select_topk_ik top and bottom match exhaustive sorting") {
    Rng rng(5);
    for (int rep = 0; rep < 1000; ++rep) {
        const auto n = rng.below(25);
        std::vector<KnowledgeRecord> recs;
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        for (std::size_t i = 0; i < n; ++i)
            recs.push_back({fmt::format("k{:03d}", perm[i]), 0.5 + 0.1 * static_cast<double>(rng.below(6)),
                            Knowledge::ik, 0});
        const auto k = n == 0 ? 0 : rng.below(n + 1);

        std::vector<ScoredId> as_scores, negated;
        for (const auto& r : recs) {
            as_scores.push_back({r.sample_id, r.correctness});
            negated.push_back({r.sample_id, -r.correctness});
        }
        CHECK(select_topk_ik(recs, k, IkStrategy::top, 0) == brute_topk(as_scores, k));
        CHECK(select_topk_ik(recs, k, IkStrategy::bottom, 0) == brute_topk(negated, k));
    }
}

TEST_CASE("random ik selection is a seeded uniform subset in input order") {
    std::vector<KnowledgeRecord> recs;
    for (int i = 0; i < 20; ++i) recs.push_back({fmt::format("r{:02d}", 19 - i), 0.9, Knowledge::ik, 0});
    std::vector<int> hits(20, 0);
    const int reps = 4000;
    for (int s = 0; s < reps; ++s) {
        const auto pick = select_topk_ik(recs, 5, IkStrategy::random, s);
        REQUIRE(pick.size() == 5);
        CHECK(std::set<std::string>(pick.begin(), pick.end()).size() == 5);
        // input order: positions strictly increasing
        std::size_t last = 0;
        for (std::size_t j = 0; j < pick.size(); ++j) {
            const auto pos = static_cast<std::size_t>(
                std::find_if(recs.begin(), recs.end(), [&](const auto& r) { return r.sample_id == pick[j]; }) -
                recs.begin());
            if (j > 0) CHECK(pos > last);
            last = pos;
            ++hits[pos];
        }
    }
    CHECK(select_topk_ik(recs, 5, IkStrategy::random, 42) == select_topk_ik(recs, 5, IkStrategy::random, 42));
    // inclusion probability 1/4 each; sd of a count is about 27
    for (int h : hits) CHECK(std::abs(h - reps / 4) < 140);
}

TEST_CASE("weights average to one") {
    Rng rng(6);
    for (int rep = 0; rep < 200; ++rep) {
        const auto n = 1 + rng.below(50);
        std::vector<double> s(n);
        const double scale = std::pow(10.0, static_cast<double>(rng.below(6)) - 3.0);
        for (auto& x : s) x = scale * rng.normal();
        const double tau = std::pow(10.0, static_cast<double>(rng.below(4)) - 2.0);
        const auto w = compute_weights(s, tau);
        double mean = 0.0;
        for (double x : w) {
            CHECK(x > 0.0);  // floored, never underflows to zero
            CHECK(std::isfinite(x));
            mean += x / static_cast<double>(n);
        }
        CHECK(std::abs(mean - 1.0) <= 1e-9);
        double total = 0.0;
        for (double x : compute_weights(s, tau, WeightNorm::sum)) total += x;
        CHECK(std::abs(total - 1.0) <= 1e-12);
    }
}

TEST_CASE("two-element weight case") {
    const double tau = 0.05;
    const auto w = compute_weights(std::vector<double>{tau * std::log(2.0), 0.0}, tau);
    CHECK(std::abs(w[0] - 4.0 / 3.0) <= 4e-16);
    CHECK(std::abs(w[1] - 2.0 / 3.0) <= 4e-16);
}

TEST_CASE("weights are shift invariant, monotone and overflow safe") {
    Rng rng(7);
    std::vector<double> s(30), shifted(30);
    for (std::size_t i = 0; i < 30; ++i) {
        s[i] = rng.normal();
        shifted[i] = s[i] + 123.25;
    }
    const auto a = compute_weights(s, 0.3), b = compute_weights(shifted, 0.3);
    for (std::size_t i = 0; i < 30; ++i) {
        CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
        for (std::size_t j = 0; j < 30; ++j)
            if (s[i] > s[j]) CHECK(a[i] > a[j]);
    }
    const auto big = compute_weights(std::vector<double>{1e4, 0.0, -1e4}, 1e-2);
    for (double x : big) CHECK(std::isfinite(x));
    CHECK(big[0] == doctest::Approx(3.0));

    const auto flat = compute_weights(std::vector<double>(5, 0.7), 0.05);
    for (double x : flat) CHECK(x == doctest::Approx(1.0));
    CHECK(compute_weights(std::vector<double>{}, 0.1).empty());
    CHECK_THROWS_AS(compute_weights(std::vector<double>{1.0}, 0.0), ConfigError);
    CHECK_THROWS_AS(compute_weights(std::vector<double>{1.0}, -1.0), ConfigError);
}

TEST_CASE("flat temperature limit") {
    Rng rng(8);
    std::vector<double> s(40);
    for (auto& x : s) x = 3.0 * rng.normal();
    for (double w : compute_weights(s, 1e6)) CHECK(std::abs(w - 1.0) <= 1e-3);
}

TEST_CASE("decomposition and scale covariance on random features") {
    Rng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
        const auto idk = random_vecs(rng, 12, 8, 0.3);
        const auto ik = random_vecs(rng, 5, 8, 0.1);
        const auto scores = score_idk(make_set(idk, "d"), make_set(ik, "k"));
        for (const auto& r : scores) CHECK(std::abs(r.i_sta - (r.i_ref - r.i_over)) <= 1e-9);

        const double c = 0.1 + 5.0 * rng.uniform();
        std::vector<Vec> idk_c, ik_c;
        for (const auto& v : idk) idk_c.push_back(c * v);
        for (const auto& v : ik) ik_c.push_back(c * v);
        const auto scaled = score_idk(make_set(idk_c, "d"), make_set(ik_c, "k"));
        std::vector<ScoredId> a, b;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            a.push_back({scores[i].sample_id, scores[i].i_ref});
            b.push_back({scaled[i].sample_id, scaled[i].i_ref});
            CHECK(scaled[i].i_ref == doctest::Approx(c * c * scores[i].i_ref).epsilon(1e-9));
        }
        const auto k = rng.below(13);
        auto sa = select_topk_idk(a, k), sb = select_topk_idk(b, k);
        std::sort(sa.begin(), sa.end());
        std::sort(sb.begin(), sb.end());
        CHECK(sa == sb);
    }
}

TEST_CASE("rait dataset assembly") {
    const Arch arch = small_arch();
    const auto train = random_samples(arch, 30, 9);
    const auto m = random_model(arch, 3);
    std::vector<double> c(30);
    Rng rng(10);
    for (auto& x : c) x = rng.uniform();
    const auto parts = partition(train, c, 0.5, arch.refusal_class());
    REQUIRE(parts.ik.size() >= 4);
    REQUIRE(parts.idk.size() >= 6);
    const auto index = index_samples(train);
    std::vector<QaSample> idk_s, ik_s;
    for (const auto& r : parts.idk) idk_s.push_back(*index.at(r.sample_id));
    for (const auto& r : parts.ik) ik_s.push_back(*index.at(r.sample_id));
    const Projection proj(arch.adapter_size(), 16, 1);
    const auto fi = batch_features(m, idk_s, Variant::as_refusal, proj);
    const auto fk = batch_features(m, ik_s, Variant::as_refusal, proj);

    PipelineConfig cfg;
    cfg.n_ik = 3;
    cfg.n_idk = 5;
    cfg.tau = 0.5;
    const auto built = build_rait_dataset(index, parts, fi, fk, cfg);
    REQUIRE(built.examples.size() == 8);
    for (int i = 0; i < 3; ++i) {
        CHECK(built.examples[i].weight == 1.0);
        CHECK(built.examples[i].target == index.at(built.examples[i].sample_id)->gold);
    }
    double mean = 0.0;
    for (int i = 3; i < 8; ++i) {
        CHECK(built.examples[i].target == arch.refusal_class());
        mean += built.examples[i].weight / 5.0;
    }
    CHECK(std::abs(mean - 1.0) <= 1e-9);

    // selected idk are the five largest refusal influences, in that order
    std::vector<ScoredId> scored;
    for (const auto& r : built.scores) scored.push_back({r.sample_id, r.i_ref});
    CHECK(built.idk_ids == brute_topk(scored, 5));
    std::size_t flagged = 0;
    for (const auto& r : built.scores) flagged += r.selected;
    CHECK(flagged == 5);

    // weights come from I_sta of the selected set alone
    std::vector<double> sta;
    for (const auto& id : built.idk_ids)
        for (const auto& r : built.scores)
            if (r.sample_id == id) sta.push_back(r.i_sta);
    const auto w = compute_weights(sta, cfg.tau);
    for (int i = 0; i < 5; ++i) CHECK(built.examples[3 + i].weight == w[i]);

    SUBCASE("zero idk gives a pure ik set") {
        cfg.n_idk = 0;
        const auto pure = build_rait_dataset(index, parts, fi, fk, cfg);
        CHECK(pure.examples.size() == 3);
        for (const auto& ex : pure.examples) CHECK(ex.weight == 1.0);
    }
    SUBCASE("rebuilding is deterministic") {
        cfg.ik_strategy = IkStrategy::random;
        const auto again = build_rait_dataset(index, parts, fi, fk, cfg);
        const auto twice = build_rait_dataset(index, parts, fi, fk, cfg);
        CHECK(again.ik_ids == twice.ik_ids);
        CHECK(again.idk_ids == twice.idk_ids);
        for (std::size_t i = 0; i < again.examples.size(); ++i)
            CHECK(again.examples[i].weight == twice.examples[i].weight);
    }
    SUBCASE("misaligned features are rejected") {
        auto shuffled = fi;
        std::swap(shuffled.features[0], shuffled.features[1]);
        CHECK_THROWS_AS(build_rait_dataset(index, parts, shuffled, fk, cfg), ValidationError);
    }
    SUBCASE("labeled-variant features are rejected") {
        auto labeled = fi;
        labeled.variant = Variant::as_labeled;
        CHECK_THROWS_AS(build_rait_dataset(index, parts, labeled, fk, cfg), ValidationError);
    }
    SUBCASE("asking for more idk than exist") {
        cfg.n_idk = static_cast<int>(parts.idk.size()) + 1;
        CHECK_THROWS_AS(build_rait_dataset(index, parts, fi, fk, cfg), ValidationError);
    }
}

TEST_CASE("scores csv layout") {
    TempDir dir("scores");
    std::vector<InfluenceRecord> recs{{"a", 1.5, 0.5, 1.0, true, 2.0}, {"b", -1.0, -1.0, 0.0, false, 0.0}};
    write_scores_csv(recs, dir / "s.csv");
    CHECK(read_file(dir / "s.csv") == "sample_id,i_ref,i_sta,i_over,selected,weight\na,1.5,0.5,1,1,2\nb,-1,-1,0,0,0\n");
}

TEST_CASE("pipeline config validation") {
    PipelineConfig cfg;
    cfg.tau = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.n_idk = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(ik_strategy_from_string("bottom") == IkStrategy::bottom);
    CHECK_THROWS_AS(ik_strategy_from_string("middle"), ConfigError);
}
