#pragma once

#include <span>
#include <string>

namespace laser {

// Probability that a random positive outranks a random negative, ties counted 1/2.
// Rank-sum method, O(n log n). Throws UndefinedMetric when only one class is present.
double auc(std::span<const double> scores, std::span<const int> labels);

inline constexpr double kLogLossEps = 1e-7;

// Mean binary cross entropy with predictions clipped to [eps, 1 - eps].
double logloss(std::span<const double> scores, std::span<const int> labels,
               double eps = kLogLossEps);

// Relative AUC improvement in percent: (auc_new / auc_base - 1) * 100.
double rel_improvement(double auc_new, double auc_base);

// Two-decimal percentage, e.g. "1.05%".
std::string format_percent(double percent);

}  // namespace laser
