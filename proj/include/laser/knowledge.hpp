#pragma once

// Knowledge vectors: mean-pooled LM states per user / item, the mixture-of-experts
// adapters that map them into the CTR model's feature space, and the offline
// vector cache.

#include "laser/autograd.hpp"
#include "laser/digest.hpp"
#include "laser/lmcore.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace laser {

enum class Side : std::uint8_t { user = 0, item = 1 };
std::string_view to_string(Side side);

struct KnowledgeVector {
  Side side = Side::user;
  std::int64_t entity_id = 0;
  std::vector<float> vector;
  std::string template_version;
};

struct AdaptedVector {
  Side side = Side::user;
  std::int64_t entity_id = 0;
  std::vector<double> vector;
};

// Column-wise mean of the rows, accumulated in double. Throws on zero rows.
Eigen::VectorXd pool_mean(const ad::Matrix& states);

struct MoeConfig {
  Side side = Side::user;
  int input_dim = 64;
  int output_dim = 16;
  int experts = 4;
  int hidden_width = 0;  // 0 -> 2 * input_dim
  std::uint64_t seed = 0;
};

// alpha = softmax(gate(h)); z = sum_j alpha_j * expert_j(h). Gate and experts are
// one-hidden-layer GELU MLPs.
class MoeAdapter {
 public:
  explicit MoeAdapter(const MoeConfig& config);

  const MoeConfig& config() const { return config_; }
  Side side() const { return config_.side; }
  int input_dim() const { return config_.input_dim; }
  int output_dim() const { return config_.output_dim; }
  int experts() const { return config_.experts; }
  int hidden_width() const { return hidden_; }

  // h: B x input_dim -> B x output_dim. `alpha_out` receives the gate weights.
  ad::Tensor forward(const ad::Tensor& h, ad::Tensor* alpha_out = nullptr) const;
  ad::Tensor gate(const ad::Tensor& h) const;
  ad::Tensor expert(int j, const ad::Tensor& h) const;

  // Order: gate.w1, gate.b1, gate.w2, gate.b2, then the same four per expert.
  std::span<ad::Tensor> parameters() { return params_; }
  std::span<const ad::Tensor> parameters() const { return params_; }

 private:
  ad::Tensor mlp(size_t base, const ad::Tensor& h) const;

  MoeConfig config_;
  int hidden_;
  std::vector<ad::Tensor> params_;
};

// Throws MismatchError on side or dimension mismatch.
AdaptedVector adapt(const MoeAdapter& adapter, const KnowledgeVector& h);

// Mean auxiliary load-balancing penalty J * sum_j mean_b(alpha_bj)^2 (1 when
// perfectly balanced). Off unless a positive weight is configured by the trainer.
ad::Tensor load_balance_penalty(const ad::Tensor& alpha);

struct PrecomputeFailure {
  std::int64_t entity_id = 0;
  std::string message;
};

struct PrecomputeResult {
  std::vector<KnowledgeVector> vectors;  // input order, failed entities omitted
  std::vector<PrecomputeFailure> failures;
};

// hidden_states -> pool_mean for every (entity, prompt). Entities are processed
// in parallel on `threads` workers (0 = hardware concurrency); output order and
// values do not depend on the thread count.
PrecomputeResult precompute_side(const LmBackend& backend,
                                 const std::vector<std::pair<std::int64_t, std::string>>& prompts,
                                 Side side, const std::string& template_version,
                                 unsigned threads = 0);

// Cache file (little endian): "LSRKV01" + version byte, u8 side, u32 dim,
// u64 count, 32-byte SHA-256 of the template version, count x {u64 id, dim x f32},
// u32 CRC-32 of the record bytes.
inline constexpr std::string_view kCacheMagic = "LSRKV01";
inline constexpr std::uint8_t kCacheVersion = 1;

class KnowledgeCache {
 public:
  // Atomic write (temp file + rename). Vectors must share side and dimension and
  // have unique ids and finite entries.
  static KnowledgeCache write(const std::vector<KnowledgeVector>& vectors,
                              const std::filesystem::path& path);
  static KnowledgeCache open(const std::filesystem::path& path);
  static KnowledgeCache parse(std::string_view bytes, const std::string& context);

  const std::filesystem::path& path() const { return path_; }
  Side side() const { return side_; }
  int dim() const { return dim_; }
  std::size_t count() const { return ids_.size(); }
  const Sha256& template_hash() const { return template_hash_; }
  const std::vector<std::int64_t>& ids() const { return ids_; }

  bool contains(std::int64_t id) const { return index_.count(id) != 0; }
  // nullptr if absent.
  const float* find(std::int64_t id) const;
  // Throws NotFoundError if absent.
  KnowledgeVector read(std::int64_t id) const;

  // Throws MismatchError unless the cache was written for `template_version`.
  void check_template(const std::string& template_version) const;

 private:
  std::filesystem::path path_;
  Side side_ = Side::user;
  int dim_ = 0;
  Sha256 template_hash_{};
  std::vector<std::int64_t> ids_;
  std::vector<float> data_;
  std::unordered_map<std::int64_t, std::size_t> index_;
};

inline KnowledgeCache cache_write(const std::vector<KnowledgeVector>& vectors,
                                  const std::filesystem::path& path) {
  return KnowledgeCache::write(vectors, path);
}
KnowledgeVector cache_read(const std::filesystem::path& path, std::int64_t entity_id);

}  // namespace laser
