#pragma once

#include <span>
#include <vector>

namespace grait::stats {

double mean(std::span<const double> xs);
// Sample standard deviation (n - 1); zero for fewer than two values.
double stddev(std::span<const double> xs);
double median(std::vector<double> xs);

/// Pearson correlation. Throws NumericError for fewer than three values or
/// a zero-variance input.
double pearson(std::span<const double> x, std::span<const double> y);

// 1-based ranks, ties share their average rank.
std::vector<double> ranks(std::span<const double> xs);
double spearman(std::span<const double> x, std::span<const double> y);

} // namespace grait::stats
