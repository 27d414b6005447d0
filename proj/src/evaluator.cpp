#include "grait/evaluator.hpp"

#include <cmath>
#include <sstream>

#include <fmt/core.h>
#include <json.hpp>

namespace grait {

Outcome classify_response(int pred, int gold, int refusal_class) {
    if (pred == refusal_class) return Outcome::refused;
    return pred == gold ? Outcome::correct : Outcome::incorrect;
}

Rates eval_rates(const ModelState& model, std::span<const QaSample> test, bool mask_refusal) {
    if (test.empty()) throw ValidationError("evaluation needs a nonempty test set");
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& q : test) {
        const Vec z = logits(model, q.features);
        const int pred = mask_refusal ? argmax(z.head(model.arch.n_answers)) : argmax(z);
        counts[static_cast<int>(classify_response(pred, q.gold, model.arch.refusal_class()))] += 1;
    }
    const double n = static_cast<double>(test.size());
    return {static_cast<double>(counts[0]) / n, static_cast<double>(counts[1]) / n,
            static_cast<double>(counts[2]) / n};
}

double ths(const ThsPoint& s2, const ThsPoint& s1) {
    if (s1.p_w == 0.0) throw NumericError("THS undefined: baseline error rate is zero");
    constexpr double u_c = 100.0;
    const double cross_s2_s1 = s2.p_c * s1.p_w - s2.p_w * s1.p_c;
    const double cross_u_s1 = u_c * s1.p_w;
    return 100.0 * cross_s2_s1 / cross_u_s1;
}

EvalReport make_report(const Rates& rates, const ThsPoint& baseline) {
    return {rates, ths(to_percent(rates), baseline), baseline};
}

std::string report_json(const EvalReport& r, const std::string& label) {
    nlohmann::json j;
    j["label"] = label;
    j["p_c"] = r.rates.p_c;
    j["p_w"] = r.rates.p_w;
    j["p_r"] = r.rates.p_r;
    j["ths"] = r.ths;
    j["baseline"] = {{"p_c", r.baseline.p_c}, {"p_w", r.baseline.p_w}};
    return j.dump(2);
}

std::string report_table(std::span<const std::pair<std::string, EvalReport>> rows) {
    std::size_t width = 8;
    for (const auto& [name, _] : rows) width = std::max(width, name.size());
    std::ostringstream out;
    out << fmt::format("{:<{}}  {:>7}  {:>7}  {:>7}  {:>7}\n", "method", width, "P_c", "P_w", "P_r", "THS");
    for (const auto& [name, r] : rows)
        out << fmt::format("{:<{}}  {:>7.1f}  {:>7.1f}  {:>7.1f}  {:>7.1f}\n", name, width, 100.0 * r.rates.p_c,
                           100.0 * r.rates.p_w, 100.0 * r.rates.p_r, r.ths);
    return out.str();
}

} // namespace grait
