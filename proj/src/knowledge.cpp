#include "laser/knowledge.hpp"

#include "laser/error.hpp"
#include "laser/io_util.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <thread>
#include <unordered_set>
#include <algorithm>

namespace laser {

std::string_view to_string(Side side) { return side == Side::user ? "user" : "item"; }

Eigen::VectorXd pool_mean(const ad::Matrix& states) {
  if (states.rows() == 0) throw InvalidArgument("pool_mean: no rows to pool");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(states.cols());
  for (Eigen::Index r = 0; r < states.rows(); ++r) sum += states.row(r).transpose();
  return sum / static_cast<double>(states.rows());
}

// ---- MoeAdapter ----------------------------------------------------------------

MoeAdapter::MoeAdapter(const MoeConfig& config)
    : config_(config), hidden_(config.hidden_width > 0 ? config.hidden_width : 2 * config.input_dim) {
  if (config_.input_dim <= 0 || config_.output_dim <= 0 || config_.experts <= 0) {
    throw InvalidArgument("MoE adapter dimensions and expert count must be positive");
  }
  std::mt19937_64 rng(config_.seed);
  auto linear = [&](int in, int out) {
    params_.push_back(ad::Tensor::parameter(ad::normal_matrix(in, out, std::sqrt(2.0 / (in + out)), rng)));
    params_.push_back(ad::Tensor::parameter(ad::Matrix::Zero(1, out)));
  };
  linear(config_.input_dim, hidden_);
  linear(hidden_, config_.experts);
  for (int j = 0; j < config_.experts; ++j) {
    linear(config_.input_dim, hidden_);
    linear(hidden_, config_.output_dim);
  }
}

ad::Tensor MoeAdapter::mlp(size_t base, const ad::Tensor& h) const {
  ad::Tensor hidden = ad::gelu(ad::add_row(ad::matmul(h, params_[base]), params_[base + 1]));
  return ad::add_row(ad::matmul(hidden, params_[base + 2]), params_[base + 3]);
}

ad::Tensor MoeAdapter::gate(const ad::Tensor& h) const { return ad::softmax_rows(mlp(0, h)); }

ad::Tensor MoeAdapter::expert(int j, const ad::Tensor& h) const {
  return mlp(4 + 4 * static_cast<size_t>(j), h);
}

ad::Tensor MoeAdapter::forward(const ad::Tensor& h, ad::Tensor* alpha_out) const {
  if (h.cols() != config_.input_dim) {
    throw MismatchError("MoE adapter expects input dimension " + std::to_string(config_.input_dim) +
                        ", got " + std::to_string(h.cols()));
  }
  // Gate and experts read the same input: one GEMM for all first layers.
  const size_t nets = static_cast<size_t>(config_.experts) + 1;
  std::vector<ad::Tensor> w1, b1;
  for (size_t k = 0; k < nets; ++k) {
    w1.push_back(params_[4 * k]);
    b1.push_back(params_[4 * k + 1]);
  }
  const ad::Tensor hidden = ad::gelu(ad::add_row(ad::matmul(h, ad::concat_cols(w1)), ad::concat_cols(b1)));
  auto head = [&](size_t k) {
    return ad::add_row(ad::matmul(ad::slice_cols(hidden, static_cast<Eigen::Index>(k) * hidden_, hidden_),
                                  params_[4 * k + 2]),
                       params_[4 * k + 3]);
  };
  ad::Tensor alpha = ad::softmax_rows(head(0));
  std::vector<ad::Tensor> outs;
  outs.reserve(static_cast<size_t>(config_.experts));
  for (size_t k = 1; k < nets; ++k) outs.push_back(head(k));
  if (alpha_out) *alpha_out = alpha;
  return ad::mixture(alpha, outs);
}

AdaptedVector adapt(const MoeAdapter& adapter, const KnowledgeVector& h) {
  if (h.side != adapter.side()) {
    throw MismatchError("adapter side " + std::string(to_string(adapter.side())) +
                        " cannot adapt a " + std::string(to_string(h.side)) + " vector");
  }
  if (static_cast<int>(h.vector.size()) != adapter.input_dim()) {
    throw MismatchError("knowledge vector has " + std::to_string(h.vector.size()) +
                        " entries, adapter expects " + std::to_string(adapter.input_dim()));
  }
  ad::NoGradGuard no_grad;
  ad::Matrix row(1, adapter.input_dim());
  for (int i = 0; i < adapter.input_dim(); ++i) row(0, i) = h.vector[static_cast<size_t>(i)];
  ad::Tensor z = adapter.forward(ad::Tensor::constant(std::move(row)));
  AdaptedVector out{h.side, h.entity_id, {}};
  out.vector.assign(z.value().data(), z.value().data() + z.value().size());
  return out;
}

ad::Tensor load_balance_penalty(const ad::Tensor& alpha) {
  const auto B = alpha.rows();
  const auto J = alpha.cols();
  ad::Tensor mean = ad::matmul(ad::Tensor::constant(ad::Matrix::Constant(1, B, 1.0 / B)), alpha);
  return ad::scale(ad::sum_all(ad::mul(mean, mean)), static_cast<double>(J));
}

// ---- precompute ---------------------------------------------------------------------

PrecomputeResult precompute_side(const LmBackend& backend,
                                 const std::vector<std::pair<std::int64_t, std::string>>& prompts,
                                 Side side, const std::string& template_version, unsigned threads) {
  const size_t n = prompts.size();
  std::vector<std::optional<KnowledgeVector>> slots(n);
  std::vector<std::string> errors(n);

  auto work = [&](size_t i) {
    try {
      Eigen::VectorXd pooled = pool_mean(hidden_states(backend, prompts[i].second));
      KnowledgeVector kv{side, prompts[i].first, {}, template_version};
      kv.vector.resize(static_cast<size_t>(pooled.size()));
      for (Eigen::Index k = 0; k < pooled.size(); ++k) {
        kv.vector[static_cast<size_t>(k)] = static_cast<float>(pooled(k));
      }
      slots[i] = std::move(kv);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<size_t>(threads, std::max<size_t>(n, 1)));
  if (threads <= 1) {
    for (size_t i = 0; i < n; ++i) work(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (size_t i = next++; i < n; i = next++) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  PrecomputeResult result;
  for (size_t i = 0; i < n; ++i) {
    if (slots[i]) {
      result.vectors.push_back(std::move(*slots[i]));
    } else {
      result.failures.push_back({prompts[i].first, errors[i]});
    }
  }
  return result;
}

// ---- cache ------------------------------------------------------------------------------

KnowledgeCache KnowledgeCache::write(const std::vector<KnowledgeVector>& vectors,
                                     const std::filesystem::path& path) {
  if (vectors.empty()) throw InvalidArgument("refusing to write an empty knowledge cache");
  const Side side = vectors.front().side;
  const size_t dim = vectors.front().vector.size();
  const std::string& version = vectors.front().template_version;
  if (dim == 0) throw InvalidArgument("knowledge vectors must be non-empty");
  std::unordered_set<std::int64_t> seen;
  for (const auto& v : vectors) {
    if (v.side != side) throw MismatchError("knowledge cache: mixed user/item vectors");
    if (v.vector.size() != dim) {
      throw MismatchError("knowledge cache: vector for entity " + std::to_string(v.entity_id) +
                          " has " + std::to_string(v.vector.size()) + " entries, expected " +
                          std::to_string(dim));
    }
    if (v.template_version != version) throw MismatchError("knowledge cache: mixed template versions");
    if (!seen.insert(v.entity_id).second) {
      throw InvalidArgument("knowledge cache: duplicate entity id " + std::to_string(v.entity_id));
    }
    for (float x : v.vector) {
      if (!std::isfinite(x)) {
        throw InvalidArgument("knowledge cache: non-finite entry for entity " +
                              std::to_string(v.entity_id));
      }
    }
  }

  ByteWriter records;
  for (const auto& v : vectors) {
    records.u64(static_cast<std::uint64_t>(v.entity_id));
    records.f32s(v.vector);
  }
  const std::string& rec = records.bytes();
  const std::uint32_t crc = crc32(std::span(reinterpret_cast<const std::uint8_t*>(rec.data()), rec.size()));

  ByteWriter w;
  w.raw(kCacheMagic);
  w.u8(kCacheVersion);
  w.u8(static_cast<std::uint8_t>(side));
  w.u32(static_cast<std::uint32_t>(dim));
  w.u64(vectors.size());
  const Sha256 h = sha256(version);
  w.raw(std::string_view(reinterpret_cast<const char*>(h.data()), h.size()));
  w.raw(rec);
  w.u32(crc);
  write_file_atomic(path, w.bytes());
  KnowledgeCache cache = parse(w.bytes(), path.string());
  cache.path_ = path;
  return cache;
}

KnowledgeCache KnowledgeCache::open(const std::filesystem::path& path) {
  KnowledgeCache cache = parse(read_file(path), path.string());
  cache.path_ = path;
  return cache;
}

KnowledgeCache KnowledgeCache::parse(std::string_view bytes, const std::string& context) {
  ByteReader r(bytes, context);
  if (bytes.size() < kCacheMagic.size() || r.raw(kCacheMagic.size()) != kCacheMagic) {
    throw FormatError(context + ": bad magic (not a knowledge cache) at byte offset 0");
  }
  const std::uint8_t version = r.u8();
  if (version != kCacheVersion) r.fail("unsupported cache version " + std::to_string(version));
  const std::uint8_t side = r.u8();
  if (side > 1) r.fail("invalid side byte " + std::to_string(side));
  const std::uint32_t dim = r.u32();
  const std::uint64_t count = r.u64();
  if (dim == 0) r.fail("zero vector dimension");
  KnowledgeCache c;
  c.side_ = static_cast<Side>(side);
  c.dim_ = static_cast<int>(dim);
  std::memcpy(c.template_hash_.data(), r.raw(32).data(), 32);

  const size_t record_size = 8 + 4 * static_cast<size_t>(dim);
  const size_t records_begin = r.offset();
  const size_t plausible = std::min<std::uint64_t>(count, r.remaining() / record_size);
  c.ids_.reserve(plausible);
  c.data_.reserve(plausible * dim);
  std::vector<float> row(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id = static_cast<std::int64_t>(r.u64());
    r.f32s(row);
    if (!c.index_.emplace(id, static_cast<size_t>(i)).second) {
      r.fail("duplicate entity id " + std::to_string(id));
    }
    c.ids_.push_back(id);
    c.data_.insert(c.data_.end(), row.begin(), row.end());
  }
  const size_t records_end = r.offset();
  const std::uint32_t stored_crc = r.u32();
  if (r.remaining() != 0) r.fail("trailing bytes after the CRC");
  const std::uint32_t actual = crc32(std::span(
      reinterpret_cast<const std::uint8_t*>(bytes.data()) + records_begin, records_end - records_begin));
  if (stored_crc != actual) {
    throw FormatError(context + ": record CRC mismatch at byte offset " + std::to_string(records_end));
  }
  return c;
}

const float* KnowledgeCache::find(std::int64_t id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : data_.data() + it->second * static_cast<size_t>(dim_);
}

KnowledgeVector KnowledgeCache::read(std::int64_t id) const {
  const float* p = find(id);
  if (!p) {
    throw NotFoundError("entity " + std::to_string(id) + " not in " +
                        std::string(to_string(side_)) + " knowledge cache");
  }
  KnowledgeVector kv{side_, id, std::vector<float>(p, p + dim_), {}};
  return kv;
}

void KnowledgeCache::check_template(const std::string& template_version) const {
  if (sha256(template_version) != template_hash_) {
    throw MismatchError("knowledge cache was built with a different prompt template version");
  }
}

KnowledgeVector cache_read(const std::filesystem::path& path, std::int64_t entity_id) {
  return KnowledgeCache::open(path).read(entity_id);
}

}  // namespace laser
