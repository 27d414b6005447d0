#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grait/corpus.hpp"
#include "grait/toymodel.hpp"

namespace grait {

// A sample paired with the label its loss is taken against.
struct LabeledInput {
    std::string id;
    Vec features;
    int target = 0;
};

/// L(val; theta - eta * grad L(train)) - L(val; theta), from two forward
/// passes. `model` is left untouched.
double actual_delta_loss(const ModelState& model, const LabeledInput& train, const LabeledInput& val, double eta);

/// eta * <grad L(o), grad L(u)> with exact adapter gradients; the predicted
/// change in L(u) after one step on o is its negation.
double influence_estimate(const ModelState& model, const LabeledInput& o, const LabeledInput& u, double eta);

struct OraclePair {
    std::string train_id;
    std::string val_id;
    double actual_delta = 0.0;
    double predicted_delta = 0.0;
    double rel_error = 0.0;
};

struct OracleReport {
    std::vector<OraclePair> pairs;
    double eta = 0.0;

    double mean_rel_error() const;
};

// Relative errors use max(|actual|, 1e-12) as the denominator.
OracleReport first_order_check(const ModelState& model,
                               std::span<const std::pair<LabeledInput, LabeledInput>> pairs, double eta);

struct TaylorStats {
    double median_ratio = 0.0;
    std::vector<double> ratios;  // residual(eta) / residual(eta_half), usable pairs only
    std::size_t excluded = 0;    // pairs whose residual vanished
};

/// Residual |actual + I| at two step sizes. With eta_half = eta / 2 a
/// quadratic remainder gives ratios near 4.
TaylorStats taylor_order_check(const ModelState& model,
                               std::span<const std::pair<LabeledInput, LabeledInput>> pairs, double eta,
                               double eta_half);

/// Mean-gradient inner products between the idk set (refusal targets) and
/// the ik set, under both ik label conventions. The cos_* fields repeat the
/// computation on unit-normalized per-sample gradients.
struct OrthogonalityStats {
    double cross = 0.0;             // <mean idk, mean ik(gold)>
    double ik_self = 0.0;           // <mean ik(gold), mean ik(gold)>
    double idk_self = 0.0;          // <mean idk, mean idk>
    double cross_refusal = 0.0;     // <mean idk, mean ik(refusal)>
    double ik_self_refusal = 0.0;   // <mean ik(refusal), mean ik(refusal)>
    double cos_cross = 0.0;
    double cos_ik_self = 0.0;
    double cos_idk_self = 0.0;
    double cos_cross_refusal = 0.0;
    double cos_ik_self_refusal = 0.0;

    // |cos_cross| <= min(cos_ik_self, cos_idk_self); reported, never enforced.
    bool near_orthogonal() const;
};

OrthogonalityStats orthogonality_stats(const ModelState& model, std::span<const QaSample> ik,
                                       std::span<const QaSample> idk);

double influence_correlation(std::span<const double> i_ref, std::span<const double> i_over);

// CSV: train_id,val_id,actual_delta,predicted_delta,rel_error
void write_oracle_csv(const OracleReport& report, const std::filesystem::path& path);

// Two tab-separated columns, i_ref then i_over, with a header line.
void write_scatter_tsv(std::span<const double> i_ref, std::span<const double> i_over,
                       const std::filesystem::path& path);

} // namespace grait
