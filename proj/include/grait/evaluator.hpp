#pragma once

#include <span>
#include <string>

#include "grait/corpus.hpp"
#include "grait/toymodel.hpp"

namespace grait {

enum class Outcome { correct, incorrect, refused };

Outcome classify_response(int pred, int gold, int refusal_class);

// Fractions in [0, 1].
struct Rates {
    double p_c = 0.0;
    double p_w = 0.0;
    double p_r = 0.0;
};

/// Greedy (argmax) decoding over the test set. With `mask_refusal` the
/// refusal class is excluded from the argmax, giving the initial-model
/// anchor that never refuses.
Rates eval_rates(const ModelState& model, std::span<const QaSample> test, bool mask_refusal);

// A (P_c, P_w) point in percentage points.
struct ThsPoint {
    double p_c = 0.0;
    double p_w = 0.0;
};

inline ThsPoint to_percent(const Rates& r) { return {100.0 * r.p_c, 100.0 * r.p_w}; }

/// Truthful Helpfulness Score of `s2` against baseline `s1`, both in
/// percentage points: the cross product OS2 x OS1 normalized by OU x OS1
/// with U = (100, 0), i.e. p_c2 - p_w2 * p_c1 / p_w1. Throws NumericError
/// when p_w1 = 0.
double ths(const ThsPoint& s2, const ThsPoint& s1);

struct EvalReport {
    Rates rates;
    double ths = 0.0;
    ThsPoint baseline;
};

EvalReport make_report(const Rates& rates, const ThsPoint& baseline);

std::string report_json(const EvalReport& r, const std::string& label);

// Aligned text table with P_c, P_w, P_r and THS columns (percent).
std::string report_table(std::span<const std::pair<std::string, EvalReport>> rows);

} // namespace grait
