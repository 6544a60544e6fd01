#include "laser/crm.hpp"

#include "laser/error.hpp"
#include "laser/io_util.hpp"
#include "laser/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

namespace laser {

using nlohmann::json;

CrmKind parse_crm_kind(std::string_view name) {
  if (name == "mlp") return CrmKind::mlp;
  if (name == "target_attention") return CrmKind::target_attention;
  throw InvalidArgument("unknown CRM model '" + std::string(name) + "' (mlp|target_attention)");
}

std::string_view to_string(CrmKind kind) {
  return kind == CrmKind::mlp ? "mlp" : "target_attention";
}

RetrievalMode parse_retrieval_mode(std::string_view name) {
  if (name == "none") return RetrievalMode::none;
  if (name == "category_match") return RetrievalMode::category_match;
  if (name == "recent") return RetrievalMode::recent;
  throw InvalidArgument("unknown retrieval mode '" + std::string(name) +
                        "' (none|category_match|recent)");
}

std::string_view to_string(RetrievalMode mode) {
  switch (mode) {
    case RetrievalMode::none: return "none";
    case RetrievalMode::category_match: return "category_match";
    case RetrievalMode::recent: return "recent";
  }
  return "none";
}

std::vector<FieldSpec> field_specs(const Vocabulary& vocab) {
  std::vector<FieldSpec> out;
  for (const auto& f : vocab.fields) out.push_back({f.name(), f.size()});
  return out;
}

void CrmConfig::validate() const {
  if (embedding_dim < 1) throw InvalidArgument("crm: embedding_dim must be >= 1");
  if (retrieval_size < 1) throw InvalidArgument("crm: retrieval_size must be >= 1");
  if (hidden.empty()) throw InvalidArgument("crm: at least one hidden layer is required");
  for (int h : hidden) {
    if (h < 1) throw InvalidArgument("crm: hidden widths must be >= 1");
  }
  if (use_knowledge && knowledge_dim < 1) throw InvalidArgument("crm: knowledge_dim must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("crm: learning_rate must be positive");
  if (epochs < 1) throw InvalidArgument("crm: epochs must be >= 1");
  if (patience < 1) throw InvalidArgument("crm: patience must be >= 1");
  if (batch_size < 1) throw InvalidArgument("crm: batch_size must be >= 1");
  bool item = false, category = false;
  std::set<std::string> seen;
  for (const auto& f : fields) {
    if (f.size < 1) throw InvalidArgument("crm: field '" + f.name + "' has no vocabulary");
    if (!seen.insert(f.name).second) throw InvalidArgument("crm: duplicate field '" + f.name + "'");
    item |= f.name == kItemField;
    category |= f.name == kCategoryField;
  }
  if (!item || !category) throw InvalidArgument("crm: fields must include item_id and category");
}

// ---- retrieval -------------------------------------------------------------------

HistorySlots retrieve_history(const CtrSample& sample, RetrievalMode mode, int size) {
  if (size < 1) throw InvalidArgument("retrieve_history: size must be >= 1");
  const auto& h = sample.history;
  const size_t n = static_cast<size_t>(size);
  HistorySlots out;
  out.reserve(n);
  if (mode == RetrievalMode::category_match) {
    for (auto it = h.rbegin(); it != h.rend() && out.size() < n; ++it) {
      if (it->item_category == sample.target_category) out.emplace_back(*it);
    }
    for (auto it = h.rbegin(); it != h.rend() && out.size() < n; ++it) {
      if (it->item_category != sample.target_category) out.emplace_back(*it);
    }
  } else {
    const size_t take = std::min(h.size(), n);
    for (size_t i = h.size() - take; i < h.size(); ++i) out.emplace_back(h[i]);
  }
  out.resize(n);  // PAD
  return out;
}

EncodedSample encode_for_crm(const CtrSample& sample, const CrmConfig& config) {
  if (sample.id_features.size() != config.fields.size()) {
    throw MismatchError("crm: sample has " + std::to_string(sample.id_features.size()) +
                        " id features, model expects " + std::to_string(config.fields.size()));
  }
  EncodedSample e;
  e.label = sample.label;
  e.user_id = sample.user_id;
  e.item_id = sample.target_item_id;
  e.fields.reserve(config.fields.size());
  for (size_t f = 0; f < config.fields.size(); ++f) {
    const auto& feat = sample.id_features[f];
    if (feat.field != config.fields[f].name) {
      throw MismatchError("crm: id feature '" + feat.field + "' where the model expects '" +
                          config.fields[f].name + "'");
    }
    if (feat.index < 0 || feat.index >= config.fields[f].size) {
      throw MismatchError("crm: index " + std::to_string(feat.index) + " out of range for field '" +
                          feat.field + "'");
    }
    e.fields.push_back(feat.index);
  }
  const auto slots = retrieve_history(sample, config.retrieval, config.retrieval_size);
  for (const auto& s : slots) {
    e.history_items.push_back(s ? s->item_index : 0);
    e.history_categories.push_back(s ? s->category_index : 0);
    e.history_mask.push_back(s ? 1.0 : 0.0);
  }
  return e;
}

std::vector<EncodedSample> encode_for_crm(const std::vector<CtrSample>& samples,
                                          const CrmConfig& config) {
  std::vector<EncodedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(encode_for_crm(s, config));
  return out;
}

// ---- model -----------------------------------------------------------------------

namespace {

ad::Matrix glorot(int in, int out, std::mt19937_64& rng) {
  return ad::normal_matrix(in, out, std::sqrt(2.0 / (in + out)), rng);
}

constexpr double kEmbeddingStd = 0.1;

}  // namespace

CrmModel::CrmModel(const CrmConfig& config) : config_(config) {
  config_.validate();
  for (size_t f = 0; f < config_.fields.size(); ++f) {
    if (config_.fields[f].name == kItemField) item_field_ = static_cast<int>(f);
    if (config_.fields[f].name == kCategoryField) category_field_ = static_cast<int>(f);
  }
  const int m = config_.embedding_dim;
  std::mt19937_64 rng(config_.seed);
  auto add = [&](std::string name, ad::Matrix value) {
    params_.push_back(ad::Tensor::parameter(std::move(value)));
    names_.push_back(std::move(name));
  };

  for (const auto& f : config_.fields) {
    add("emb." + f.name, ad::normal_matrix(f.size, m, kEmbeddingStd, rng));
  }
  attn_ = params_.size();
  if (config_.model == CrmKind::target_attention) {
    add("attn.wq", glorot(2 * m, m, rng));
    add("attn.wk", glorot(2 * m, m, rng));
  }
  mlp_ = params_.size();
  const int other_fields = static_cast<int>(config_.fields.size()) - 2;
  int in = 2 * m + 2 * m + other_fields * m;
  for (size_t l = 0; l < config_.hidden.size(); ++l) {
    add("mlp." + std::to_string(l) + ".w", glorot(in, config_.hidden[l], rng));
    add("mlp." + std::to_string(l) + ".b", ad::Matrix::Zero(1, config_.hidden[l]));
    in = config_.hidden[l];
  }
  add("out.w", glorot(in, 1, rng));
  add("out.b", ad::Matrix::Zero(1, 1));
  know_ = params_.size();
  if (config_.use_knowledge) {
    add("know.mlp0.w", glorot(2 * m, config_.hidden[0], rng));
    add("know.user.w", ad::Matrix::Zero(config_.knowledge_dim, m));
    add("know.user.b", ad::Matrix::Zero(1, m));
    add("know.item.w", ad::Matrix::Zero(config_.knowledge_dim, m));
    add("know.item.b", ad::Matrix::Zero(1, m));
  }
}

std::span<ad::Tensor> CrmModel::knowledge_parameters() {
  return std::span<ad::Tensor>(params_).subspan(know_);
}

ad::Tensor CrmModel::logits(std::span<const EncodedSample* const> batch, const ad::Tensor* z_user,
                            const ad::Tensor* z_item, ad::Matrix* attention_out) const {
  const auto B = static_cast<Eigen::Index>(batch.size());
  if (B == 0) throw InvalidArgument("crm forward: empty batch");
  const bool has_z = z_user != nullptr || z_item != nullptr;
  if (config_.use_knowledge && (z_user == nullptr || z_item == nullptr)) {
    throw InvalidArgument("crm forward: model uses knowledge but z_user/z_item are missing");
  }
  if (!config_.use_knowledge && has_z) {
    throw InvalidArgument("crm forward: knowledge vectors given to a model without knowledge");
  }
  const size_t F = config_.fields.size();
  const auto L = static_cast<size_t>(config_.retrieval_size);
  for (const auto* s : batch) {
    if (s->fields.size() != F || s->history_items.size() != L ||
        s->history_categories.size() != L || s->history_mask.size() != L) {
      throw MismatchError("crm forward: encoded sample shape does not match the model config");
    }
  }

  std::vector<ad::Tensor> emb(F);
  std::vector<int> idx(static_cast<size_t>(B));
  for (size_t f = 0; f < F; ++f) {
    for (Eigen::Index b = 0; b < B; ++b) {
      const int v = batch[static_cast<size_t>(b)]->fields[f];
      if (v < 0 || v >= config_.fields[f].size) {
        throw MismatchError("crm forward: index out of range for field '" + config_.fields[f].name + "'");
      }
      idx[static_cast<size_t>(b)] = v;
    }
    emb[f] = ad::gather_rows(params_[f], idx);
  }
  const auto item_f = static_cast<size_t>(item_field_);
  const auto cat_f = static_cast<size_t>(category_field_);
  const ad::Tensor target_parts[] = {emb[item_f], emb[cat_f]};
  ad::Tensor target = ad::concat_cols(target_parts);

  std::vector<int> hist_items(static_cast<size_t>(B) * L), hist_cats(static_cast<size_t>(B) * L);
  ad::Matrix mask(B, static_cast<Eigen::Index>(L));
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto* s = batch[static_cast<size_t>(b)];
    for (size_t l = 0; l < L; ++l) {
      const bool valid = s->history_mask[l] != 0.0;
      int it = valid ? s->history_items[l] : 0;
      int ct = valid ? s->history_categories[l] : 0;
      if (it < 0 || it >= config_.fields[item_f].size || ct < 0 || ct >= config_.fields[cat_f].size) {
        throw MismatchError("crm forward: history index out of range");
      }
      hist_items[static_cast<size_t>(b) * L + l] = it;
      hist_cats[static_cast<size_t>(b) * L + l] = ct;
      mask(b, static_cast<Eigen::Index>(l)) = valid ? 1.0 : 0.0;
    }
  }
  const ad::Tensor hist_parts[] = {ad::gather_rows(params_[item_f], hist_items),
                                   ad::gather_rows(params_[cat_f], hist_cats)};
  ad::Tensor history = ad::concat_cols(hist_parts);

  ad::Tensor pooled;
  if (config_.model == CrmKind::target_attention) {
    ad::Tensor q = ad::matmul(target, params_[attn_]);
    ad::Tensor k = ad::matmul(history, params_[attn_ + 1]);
    pooled = ad::target_attention(q, k, history, mask, attention_out);
  } else {
    pooled = ad::masked_group_mean(history, mask);
  }

  std::vector<ad::Tensor> parts = {pooled, target};
  for (size_t f = 0; f < F; ++f) {
    if (f != item_f && f != cat_f) parts.push_back(emb[f]);
  }
  ad::Tensor x = ad::concat_cols(parts);

  const size_t layers = config_.hidden.size();
  ad::Tensor h = ad::matmul(x, params_[mlp_]);
  if (config_.use_knowledge) {
    const auto kd = static_cast<Eigen::Index>(config_.knowledge_dim);
    if (z_user->rows() != B || z_item->rows() != B || z_user->cols() != kd || z_item->cols() != kd) {
      throw MismatchError("crm forward: knowledge vectors must be " + std::to_string(B) + " x " +
                          std::to_string(kd));
    }
    ad::Tensor pu = ad::add_row(ad::matmul(*z_user, params_[know_ + 1]), params_[know_ + 2]);
    ad::Tensor pi = ad::add_row(ad::matmul(*z_item, params_[know_ + 3]), params_[know_ + 4]);
    const ad::Tensor zparts[] = {pu, pi};
    h = ad::add(h, ad::matmul(ad::concat_cols(zparts), params_[know_]));
  }
  h = ad::relu(ad::add_row(h, params_[mlp_ + 1]));
  for (size_t l = 1; l < layers; ++l) {
    h = ad::relu(ad::add_row(ad::matmul(h, params_[mlp_ + 2 * l]), params_[mlp_ + 2 * l + 1]));
  }
  return ad::add_row(ad::matmul(h, params_[mlp_ + 2 * layers]), params_[mlp_ + 2 * layers + 1]);
}

std::vector<double> CrmModel::forward(std::span<const EncodedSample* const> batch,
                                      const ad::Matrix* z_user, const ad::Matrix* z_item) const {
  ad::NoGradGuard no_grad;
  std::optional<ad::Tensor> zu, zi;
  if (z_user) zu = ad::Tensor::constant(*z_user);
  if (z_item) zi = ad::Tensor::constant(*z_item);
  ad::Tensor out = logits(batch, zu ? &*zu : nullptr, zi ? &*zi : nullptr);
  std::vector<double> p(static_cast<size_t>(out.rows()));
  const double hi = std::nextafter(1.0, 0.0);
  for (size_t i = 0; i < p.size(); ++i) {
    const double x = out.value()(static_cast<Eigen::Index>(i), 0);
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    p[i] = std::clamp(s, DBL_MIN, hi);  // keep strictly inside (0, 1)
  }
  return p;
}

// ---- early stopping -------------------------------------------------------------------

bool EarlyStopping::observe(int epoch, double score) {
  if (best_epoch_ < 0 || score > best_) {
    best_ = score;
    best_epoch_ = epoch;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

// ---- knowledge plumbing -------------------------------------------------------------------

ad::Matrix gather_knowledge(const KnowledgeCache& cache, std::span<const std::int64_t> ids) {
  ad::Matrix out(static_cast<Eigen::Index>(ids.size()), cache.dim());
  for (size_t i = 0; i < ids.size(); ++i) {
    const float* v = cache.find(ids[i]);
    if (!v) {
      throw NotFoundError("entity " + std::to_string(ids[i]) + " not in " +
                          std::string(to_string(cache.side())) + " knowledge cache");
    }
    for (int k = 0; k < cache.dim(); ++k) out(static_cast<Eigen::Index>(i), k) = v[k];
  }
  return out;
}

void check_cache_coverage(const std::vector<CtrSample>& samples, const KnowledgeInputs& caches) {
  if (!caches.user || !caches.item) throw InvalidArgument("knowledge caches are missing");
  std::set<std::int64_t> missing_users, missing_items;
  for (const auto& s : samples) {
    if (!caches.user->contains(s.user_id)) missing_users.insert(s.user_id);
    if (!caches.item->contains(s.target_item_id)) missing_items.insert(s.target_item_id);
  }
  if (missing_users.empty() && missing_items.empty()) return;
  auto list = [](const std::set<std::int64_t>& ids) {
    std::string out;
    size_t shown = 0;
    for (auto id : ids) {
      if (shown++ == 20) {
        out += ", ...";
        break;
      }
      out += (out.empty() ? "" : ", ") + std::to_string(id);
    }
    return out;
  };
  std::string msg = "knowledge cache is incomplete (run precompute):";
  if (!missing_users.empty()) {
    msg += " " + std::to_string(missing_users.size()) + " user(s) missing [" + list(missing_users) + "]";
  }
  if (!missing_items.empty()) {
    msg += " " + std::to_string(missing_items.size()) + " item(s) missing [" + list(missing_items) + "]";
  }
  throw NotFoundError(msg);
}

namespace {

struct KnowledgeBatch {
  ad::Matrix user, item;
};

KnowledgeBatch knowledge_batch(std::span<const EncodedSample* const> batch, const KnowledgeInputs& caches) {
  std::vector<std::int64_t> users, items;
  users.reserve(batch.size());
  items.reserve(batch.size());
  for (const auto* s : batch) {
    users.push_back(s->user_id);
    items.push_back(s->item_id);
  }
  return {gather_knowledge(*caches.user, users), gather_knowledge(*caches.item, items)};
}

void check_adapters(const CrmConfig& config, const MoeAdapter& user, const MoeAdapter& item,
                    const KnowledgeInputs& caches) {
  if (user.side() != Side::user || item.side() != Side::item) {
    throw MismatchError("adapters must be (user, item)");
  }
  if (caches.user->side() != Side::user || caches.item->side() != Side::item) {
    throw MismatchError("caches must be (user, item)");
  }
  if (user.input_dim() != caches.user->dim() || item.input_dim() != caches.item->dim()) {
    throw MismatchError("adapter input dimension " + std::to_string(user.input_dim()) + "/" +
                        std::to_string(item.input_dim()) + " does not match cache dimension " +
                        std::to_string(caches.user->dim()) + "/" + std::to_string(caches.item->dim()));
  }
  if (user.output_dim() != config.knowledge_dim || item.output_dim() != config.knowledge_dim) {
    throw MismatchError("adapter output dimension does not match crm knowledge_dim " +
                        std::to_string(config.knowledge_dim));
  }
}

std::vector<const EncodedSample*> pointers(const std::vector<EncodedSample>& samples) {
  std::vector<const EncodedSample*> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

}  // namespace

std::vector<double> predict_batch(const CrmModel& model, std::span<const EncodedSample* const> batch,
                                  const MoeAdapter* user_adapter, const MoeAdapter* item_adapter,
                                  const KnowledgeInputs& caches) {
  ad::NoGradGuard no_grad;
  if (!model.config().use_knowledge) return model.forward(batch);
  if (!user_adapter || !item_adapter || !caches.user || !caches.item) {
    throw InvalidArgument("predict: knowledge model needs adapters and caches");
  }
  KnowledgeBatch kb = knowledge_batch(batch, caches);
  ad::Matrix zu = user_adapter->forward(ad::Tensor::constant(std::move(kb.user))).value();
  ad::Matrix zi = item_adapter->forward(ad::Tensor::constant(std::move(kb.item))).value();
  return model.forward(batch, &zu, &zi);
}

std::vector<double> predict(const CrmModel& model, const std::vector<EncodedSample>& samples,
                            const MoeAdapter* user_adapter, const MoeAdapter* item_adapter,
                            const KnowledgeInputs& caches) {
  const auto ptrs = pointers(samples);
  const auto bs = static_cast<size_t>(model.config().batch_size);
  std::vector<double> out;
  out.reserve(samples.size());
  for (size_t i = 0; i < ptrs.size(); i += bs) {
    std::span<const EncodedSample* const> batch(ptrs.data() + i, std::min(bs, ptrs.size() - i));
    auto p = predict_batch(model, batch, user_adapter, item_adapter, caches);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::pair<MoeAdapter, MoeAdapter> make_adapters(const MoeConfig& shape, const KnowledgeInputs& caches,
                                                int output_dim, std::uint64_t seed) {
  if (!caches.user || !caches.item) throw InvalidArgument("make_adapters: knowledge caches are missing");
  MoeConfig u = shape, i = shape;
  u.side = Side::user;
  u.input_dim = caches.user->dim();
  u.output_dim = output_dim;
  u.seed = seed * 2 + 1;
  i.side = Side::item;
  i.input_dim = caches.item->dim();
  i.output_dim = output_dim;
  i.seed = seed * 2 + 2;
  return {MoeAdapter(u), MoeAdapter(i)};
}

// ---- training -------------------------------------------------------------------------------

CrmTrainResult train_crm(const CrmConfig& config, const DatasetSplit& split,
                         std::optional<KnowledgeInputs> caches,
                         std::optional<std::pair<MoeAdapter, MoeAdapter>> adapters) {
  config.validate();
  if (config.use_knowledge != caches.has_value() || config.use_knowledge != adapters.has_value()) {
    throw InvalidArgument(config.use_knowledge
                              ? "train_crm: use_knowledge requires caches and adapters"
                              : "train_crm: caches/adapters given but use_knowledge is false");
  }
  if (split.train.empty()) throw InvalidArgument("train_crm: empty training set");
  if (config.use_knowledge) {
    if (!caches->user || !caches->item) throw InvalidArgument("train_crm: knowledge caches are missing");
    check_adapters(config, adapters->first, adapters->second, *caches);
    check_cache_coverage(split.train, *caches);
    check_cache_coverage(split.validation, *caches);
  }

  CrmTrainResult result{CrmModel(config), std::nullopt, std::nullopt, {}, 0};
  if (adapters) {
    result.user_adapter = std::move(adapters->first);
    result.item_adapter = std::move(adapters->second);
  }
  CrmModel& model = result.model;
  std::vector<ad::Tensor> params(model.parameters().begin(), model.parameters().end());
  if (config.use_knowledge) {
    for (auto& p : result.user_adapter->parameters()) params.push_back(p);
    for (auto& p : result.item_adapter->parameters()) params.push_back(p);
  }

  const auto train = encode_for_crm(split.train, config);
  const auto val = encode_for_crm(split.validation, config);
  std::vector<int> val_labels;
  for (const auto& s : val) val_labels.push_back(s.label);

  ad::Adam adam(config.learning_rate);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  EarlyStopping stopper(config.patience);
  std::vector<ad::Matrix> best(params.size());
  long step = 0;
  const auto bs = static_cast<size_t>(config.batch_size);
  std::vector<const EncodedSample*> batch;
  std::vector<double> labels;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (size_t i = 0; i < order.size(); i += bs) {
      batch.clear();
      labels.clear();
      for (size_t k = i; k < std::min(order.size(), i + bs); ++k) {
        batch.push_back(&train[order[k]]);
        labels.push_back(train[order[k]].label);
      }
      ad::zero_grads(params);
      ad::Tensor loss;
      if (config.use_knowledge) {
        KnowledgeBatch kb = knowledge_batch(batch, *caches);
        ad::Tensor zu = result.user_adapter->forward(ad::Tensor::constant(std::move(kb.user)));
        ad::Tensor zi = result.item_adapter->forward(ad::Tensor::constant(std::move(kb.item)));
        loss = ad::bce_with_logits(model.logits(batch, &zu, &zi), labels);
      } else {
        loss = ad::bce_with_logits(model.logits(batch, nullptr, nullptr), labels);
      }
      ++step;
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("crm training diverged (non-finite loss) at step " + std::to_string(step), step);
      }
      loss_sum += loss.item() * static_cast<double>(batch.size());
      ad::backward(loss);
      adam.step(params);
    }

    EpochLog entry{epoch, loss_sum / static_cast<double>(train.size()),
                   std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    double score;
    if (!val.empty()) {
      const auto p = predict(model, val, result.user_adapter ? &*result.user_adapter : nullptr,
                             result.item_adapter ? &*result.item_adapter : nullptr,
                             caches.value_or(KnowledgeInputs{}));
      entry.val_logloss = logloss(p, val_labels);
      try {
        entry.val_auc = auc(p, val_labels);
        score = entry.val_auc;
      } catch (const UndefinedMetric&) {
        score = -entry.val_logloss;
      }
    } else {
      score = -entry.train_loss;
    }
    result.log.push_back(entry);
    if (stopper.observe(epoch, score)) {
      for (size_t i = 0; i < params.size(); ++i) best[i] = params[i].value();
    }
    if (stopper.should_stop()) break;
  }

  // Restore the best epoch, rounded to f32 so a saved checkpoint reloads exactly.
  for (size_t i = 0; i < params.size(); ++i) {
    params[i].mutable_value() = best[i].cast<float>().cast<double>();
    params[i].zero_grad();
  }
  result.best_epoch = stopper.best_epoch();
  return result;
}

// ---- config json & checkpoint ------------------------------------------------------------------

namespace {

json config_json(const CrmConfig& c) {
  json fields = json::array();
  for (const auto& f : c.fields) fields.push_back({{"name", f.name}, {"size", f.size}});
  return {{"model", std::string(to_string(c.model))},
          {"embedding_dim", c.embedding_dim},
          {"fields", fields},
          {"hidden", c.hidden},
          {"use_knowledge", c.use_knowledge},
          {"knowledge_dim", c.knowledge_dim},
          {"retrieval", std::string(to_string(c.retrieval))},
          {"retrieval_size", c.retrieval_size},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"patience", c.patience},
          {"batch_size", c.batch_size},
          {"seed", c.seed}};
}

CrmConfig config_from(const json& j, const std::string& context) {
  static const std::set<std::string> known = {
      "model",         "embedding_dim", "fields",  "hidden",   "use_knowledge",
      "knowledge_dim", "retrieval",     "retrieval_size", "learning_rate", "epochs",
      "patience",      "batch_size",    "seed"};
  if (!j.is_object()) throw InvalidArgument(context + ": crm config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw InvalidArgument(context + ": unknown crm config key '" + key + "'");
  }
  CrmConfig c;
  try {
    if (j.contains("model")) c.model = parse_crm_kind(j["model"].get<std::string>());
    if (j.contains("embedding_dim")) c.embedding_dim = j["embedding_dim"].get<int>();
    if (j.contains("fields")) {
      for (const auto& f : j["fields"]) {
        c.fields.push_back({f.at("name").get<std::string>(), f.at("size").get<int>()});
      }
    }
    if (j.contains("hidden")) c.hidden = j["hidden"].get<std::vector<int>>();
    if (j.contains("use_knowledge")) c.use_knowledge = j["use_knowledge"].get<bool>();
    if (j.contains("knowledge_dim")) c.knowledge_dim = j["knowledge_dim"].get<int>();
    if (j.contains("retrieval")) c.retrieval = parse_retrieval_mode(j["retrieval"].get<std::string>());
    if (j.contains("retrieval_size")) c.retrieval_size = j["retrieval_size"].get<int>();
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("patience")) c.patience = j["patience"].get<int>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw InvalidArgument(context + ": crm config: " + e.what());
  }
  return c;
}

json adapter_json(const MoeAdapter& a) {
  return {{"input_dim", a.input_dim()},
          {"output_dim", a.output_dim()},
          {"experts", a.experts()},
          {"hidden_width", a.hidden_width()},
          {"seed", a.config().seed}};
}

MoeConfig adapter_from(const json& j, Side side) {
  MoeConfig c;
  c.side = side;
  c.input_dim = j.at("input_dim").get<int>();
  c.output_dim = j.at("output_dim").get<int>();
  c.experts = j.at("experts").get<int>();
  c.hidden_width = j.at("hidden_width").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void write_tensors(ByteWriter& w, std::span<const ad::Tensor> params) {
  for (const auto& p : params) {
    for (Eigen::Index i = 0; i < p.value().size(); ++i) w.f32(static_cast<float>(p.value().data()[i]));
  }
}

void read_tensors(ByteReader& r, std::span<ad::Tensor> params) {
  std::vector<float> buf;
  for (auto& p : params) {
    buf.resize(static_cast<size_t>(p.value().size()));
    r.f32s(buf);
    for (size_t i = 0; i < buf.size(); ++i) p.mutable_value().data()[i] = buf[i];
  }
}

}  // namespace

std::string crm_config_to_json(const CrmConfig& config) { return config_json(config).dump(2); }

CrmConfig crm_config_from_json(std::string_view text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw InvalidArgument("crm config is not valid JSON");
  return config_from(j, "crm config");
}

std::string serialize_crm(const CrmModel& model, const MoeAdapter* user_adapter,
                          const MoeAdapter* item_adapter) {
  if ((user_adapter == nullptr) != (item_adapter == nullptr)) {
    throw InvalidArgument("serialize_crm: give both adapters or neither");
  }
  if (model.config().use_knowledge != (user_adapter != nullptr)) {
    throw InvalidArgument("serialize_crm: adapters must be present iff the model uses knowledge");
  }
  json tensors = json::array();
  const auto& names = model.parameter_names();
  for (size_t i = 0; i < names.size(); ++i) {
    const auto& p = model.parameters()[i];
    tensors.push_back({{"name", names[i]}, {"shape", {p.rows(), p.cols()}}});
  }
  json blob = {{"format", 1}, {"config", config_json(model.config())}, {"tensors", tensors}};
  if (user_adapter) {
    blob["adapters"] = {{"user", adapter_json(*user_adapter)}, {"item", adapter_json(*item_adapter)}};
  }
  const std::string text = blob.dump();
  ByteWriter w;
  w.raw(kCrmMagic);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  write_tensors(w, model.parameters());
  if (user_adapter) {
    write_tensors(w, user_adapter->parameters());
    write_tensors(w, item_adapter->parameters());
  }
  return w.take();
}

CrmCheckpoint deserialize_crm(std::string_view bytes, const std::string& context) {
  ByteReader r(bytes, context);
  if (bytes.size() < kCrmMagic.size() || r.raw(kCrmMagic.size()) != kCrmMagic) {
    throw FormatError(context + ": bad magic (not a CRM checkpoint) at byte offset 0");
  }
  const std::uint32_t len = r.u32();
  json blob = json::parse(r.raw(len), nullptr, false);
  if (blob.is_discarded() || !blob.is_object()) r.fail("config blob is not valid JSON");
  CrmConfig config;
  std::optional<MoeConfig> user_cfg, item_cfg;
  try {
    if (blob.at("format").get<int>() != 1) r.fail("unsupported CRM checkpoint format");
    config = config_from(blob.at("config"), context);
    if (blob.contains("adapters")) {
      user_cfg = adapter_from(blob["adapters"].at("user"), Side::user);
      item_cfg = adapter_from(blob["adapters"].at("item"), Side::item);
    }
  } catch (const json::exception& e) {
    throw FormatError(context + ": config blob: " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(e.what());
  }
  CrmCheckpoint ck{CrmModel(config), std::nullopt, std::nullopt};
  read_tensors(r, ck.model.parameters());
  if (user_cfg) {
    ck.user_adapter.emplace(*user_cfg);
    ck.item_adapter.emplace(*item_cfg);
    read_tensors(r, ck.user_adapter->parameters());
    read_tensors(r, ck.item_adapter->parameters());
  }
  if (r.remaining() != 0) r.fail("trailing bytes after the last tensor");
  return ck;
}

void save_crm(const std::filesystem::path& path, const CrmModel& model,
              const MoeAdapter* user_adapter, const MoeAdapter* item_adapter) {
  write_file_atomic(path, serialize_crm(model, user_adapter, item_adapter));
}

CrmCheckpoint load_crm(const std::filesystem::path& path) {
  return deserialize_crm(read_file(path), path.string());
}

}  // namespace laser
