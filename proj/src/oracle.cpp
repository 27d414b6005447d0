#include "grait/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/core.h>

#include "grait/stats.hpp"

namespace grait {

double actual_delta_loss(const ModelState& model, const LabeledInput& train, const LabeledInput& val, double eta) {
    if (!(eta >= 0.0)) throw ConfigError("eta must be >= 0");
    const auto g = loss_and_grad(model, train.features, train.target).grad;
    const ModelState stepped = sgd_step(model, g, eta);
    const double before = loss(model, val.features, val.target);
    const double after = loss(stepped, val.features, val.target);
    if (!std::isfinite(before) || !std::isfinite(after))
        throw NumericError(fmt::format("loss overflow for pair ({}, {})", train.id, val.id));
    return after - before;
}

double influence_estimate(const ModelState& model, const LabeledInput& o, const LabeledInput& u, double eta) {
    const auto go = loss_and_grad(model, o.features, o.target).grad;
    const auto gu = loss_and_grad(model, u.features, u.target).grad;
    return eta * go.dot(gu);
}

double OracleReport::mean_rel_error() const {
    if (pairs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& p : pairs) s += p.rel_error;
    return s / static_cast<double>(pairs.size());
}

OracleReport first_order_check(const ModelState& model,
                               std::span<const std::pair<LabeledInput, LabeledInput>> pairs, double eta) {
    OracleReport report;
    report.eta = eta;
    report.pairs.reserve(pairs.size());
    for (const auto& [o, u] : pairs) {
        OraclePair p;
        p.train_id = o.id;
        p.val_id = u.id;
        p.actual_delta = actual_delta_loss(model, o, u, eta);
        p.predicted_delta = -influence_estimate(model, o, u, eta);
        p.rel_error = std::abs(p.actual_delta - p.predicted_delta) / std::max(std::abs(p.actual_delta), 1e-12);
        report.pairs.push_back(std::move(p));
    }
    return report;
}

TaylorStats taylor_order_check(const ModelState& model,
                               std::span<const std::pair<LabeledInput, LabeledInput>> pairs, double eta,
                               double eta_half) {
    TaylorStats out;
    for (const auto& [o, u] : pairs) {
        const double r1 = std::abs(actual_delta_loss(model, o, u, eta) + influence_estimate(model, o, u, eta));
        const double r2 =
            std::abs(actual_delta_loss(model, o, u, eta_half) + influence_estimate(model, o, u, eta_half));
        if (r2 == 0.0 || r1 == 0.0) {
            ++out.excluded;
            continue;
        }
        out.ratios.push_back(r1 / r2);
    }
    if (!out.ratios.empty()) out.median_ratio = stats::median(out.ratios);
    return out;
}

namespace {

struct Means {
    Vec raw;
    Vec unit;
};

Means mean_grads(const ModelState& model, std::span<const QaSample> set, bool refusal) {
    if (set.empty()) throw NumericError("orthogonality statistics need nonempty sets");
    const auto p = static_cast<Eigen::Index>(model.arch.adapter_size());
    Means m{Vec::Zero(p), Vec::Zero(p)};
    for (const auto& q : set) {
        const int target = refusal ? model.arch.refusal_class() : q.gold;
        const Vec g = loss_and_grad(model, q.features, target).grad;
        m.raw += g;
        const double n = g.norm();
        if (n > 0.0) m.unit += g / n;
    }
    const double inv = 1.0 / static_cast<double>(set.size());
    m.raw *= inv;
    m.unit *= inv;
    return m;
}

} // namespace

bool OrthogonalityStats::near_orthogonal() const {
    return std::abs(cos_cross) <= std::min(cos_ik_self, cos_idk_self);
}

OrthogonalityStats orthogonality_stats(const ModelState& model, std::span<const QaSample> ik,
                                       std::span<const QaSample> idk) {
    const auto m_idk = mean_grads(model, idk, true);
    const auto m_ik = mean_grads(model, ik, false);
    const auto m_ikr = mean_grads(model, ik, true);
    OrthogonalityStats s;
    s.cross = m_idk.raw.dot(m_ik.raw);
    s.ik_self = m_ik.raw.squaredNorm();
    s.idk_self = m_idk.raw.squaredNorm();
    s.cross_refusal = m_idk.raw.dot(m_ikr.raw);
    s.ik_self_refusal = m_ikr.raw.squaredNorm();
    s.cos_cross = m_idk.unit.dot(m_ik.unit);
    s.cos_ik_self = m_ik.unit.squaredNorm();
    s.cos_idk_self = m_idk.unit.squaredNorm();
    s.cos_cross_refusal = m_idk.unit.dot(m_ikr.unit);
    s.cos_ik_self_refusal = m_ikr.unit.squaredNorm();
    return s;
}

double influence_correlation(std::span<const double> i_ref, std::span<const double> i_over) {
    return stats::pearson(i_ref, i_over);
}

void write_oracle_csv(const OracleReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "train_id,val_id,actual_delta,predicted_delta,rel_error\n";
    for (const auto& p : report.pairs)
        out << fmt::format("{},{},{},{},{}\n", p.train_id, p.val_id, p.actual_delta, p.predicted_delta, p.rel_error);
}

void write_scatter_tsv(std::span<const double> i_ref, std::span<const double> i_over,
                       const std::filesystem::path& path) {
    if (i_ref.size() != i_over.size()) throw ShapeError("scatter columns differ in length");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "i_ref\ti_over\n";
    for (std::size_t i = 0; i < i_ref.size(); ++i) out << fmt::format("{}\t{}\n", i_ref[i], i_over[i]);
}

} // namespace grait
