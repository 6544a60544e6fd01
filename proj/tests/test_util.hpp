#pragma once

#include "laser/autograd.hpp"
#include "laser/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>

namespace laser::testing {

// Fresh per-process scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("laser_test_" + std::to_string(::getpid())) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline InteractionRecord record(std::int64_t user, std::int64_t item, int rating, std::int64_t ts,
                                std::string title = "", std::string category = "Drama") {
  InteractionRecord r;
  r.user_id = user;
  r.item_id = item;
  r.rating = rating;
  r.timestamp = ts;
  r.item_title = title.empty() ? "Item " + std::to_string(item) : std::move(title);
  r.item_category = std::move(category);
  return r;
}

struct GradCheck {
  double max_rel_error = 0.0;
  int probes = 0;
};

// Compares backward() against central differences at `probes` random
// (parameter, entry) positions. Relative error uses max(|analytic|, |numeric|)
// with a small floor so exactly-zero gradients compare absolutely.
inline GradCheck finite_difference_check(std::vector<ad::Tensor> params,
                                         const std::function<ad::Tensor()>& loss_fn, int probes,
                                         std::uint64_t seed, double h = 1e-4) {
  ad::zero_grads(params);
  ad::backward(loss_fn());
  std::mt19937_64 rng(seed);
  GradCheck out;
  for (int p = 0; p < probes; ++p) {
    auto& t = params[std::uniform_int_distribution<size_t>(0, params.size() - 1)(rng)];
    const auto n = t.value().size();
    const auto i = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
    const double analytic = t.has_grad() ? t.grad().data()[i] : 0.0;
    double& x = t.mutable_value().data()[i];
    const double saved = x;
    double plus, minus;
    {
      ad::NoGradGuard g;
      x = saved + h;
      plus = loss_fn().item();
      x = saved - h;
      minus = loss_fn().item();
    }
    x = saved;
    const double numeric = (plus - minus) / (2 * h);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
    ++out.probes;
  }
  return out;
}

}  // namespace laser::testing
