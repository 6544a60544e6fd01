#include "laser/metrics.hpp"

#include "laser/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

namespace laser {

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("auc: scores and labels differ in length");
  const size_t n = scores.size();
  double positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw InvalidArgument("auc: labels must be 0 or 1");
    positives += y;
  }
  const double negatives = static_cast<double>(n) - positives;
  if (positives == 0 || negatives == 0) {
    throw UndefinedMetric("auc is undefined without both positive and negative labels");
  }

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Sum of (1-based, tie-averaged) ranks of the positives.
  double rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) rank_sum += avg_rank;
    }
    i = j + 1;
  }
  return (rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives);
}

double logloss(std::span<const double> scores, std::span<const int> labels, double eps) {
  if (scores.size() != labels.size()) {
    throw InvalidArgument("logloss: scores and labels differ in length");
  }
  if (scores.empty()) throw InvalidArgument("logloss: no samples");
  if (!(eps > 0.0 && eps < 0.5)) throw InvalidArgument("logloss: eps must be in (0, 0.5)");
  double total = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    double p = scores[i];
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("logloss: score outside [0, 1]");
    // Probability given to the observed label, clipped; symmetric in (p, y) <-> (1-p, 1-y).
    const double q = std::clamp(labels[i] == 1 ? p : 1.0 - p, eps, 1.0 - eps);
    total += -std::log(q);
  }
  return total / static_cast<double>(scores.size());
}

double rel_improvement(double auc_new, double auc_base) {
  if (!(auc_base > 0.0)) throw InvalidArgument("rel_improvement: baseline AUC must be positive");
  return (auc_new / auc_base - 1.0) * 100.0;
}

std::string format_percent(double percent) {
  char buf[32];
  // +0.0 avoids printing "-0.00%".
  std::snprintf(buf, sizeof buf, "%.2f%%", percent + 0.0);
  std::string s(buf);
  if (s == "-0.00%") s = "0.00%";
  return s;
}

}  // namespace laser
