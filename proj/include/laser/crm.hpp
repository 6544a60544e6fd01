#pragma once

// Conventional CTR models: an MLP baseline and a target-attention model over
// retrieved history, optionally fed LM knowledge vectors through zero-initialized
// projections.

#include "laser/autograd.hpp"
#include "laser/dataio.hpp"
#include "laser/knowledge.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace laser {

enum class CrmKind { mlp, target_attention };
enum class RetrievalMode { none, category_match, recent };

CrmKind parse_crm_kind(std::string_view name);
std::string_view to_string(CrmKind kind);
RetrievalMode parse_retrieval_mode(std::string_view name);
std::string_view to_string(RetrievalMode mode);

struct FieldSpec {
  std::string name;
  int size = 0;  // including the reserved unseen index 0
  bool operator==(const FieldSpec&) const = default;
};

// Field specs in vocabulary order.
std::vector<FieldSpec> field_specs(const Vocabulary& vocab);

struct CrmConfig {
  CrmKind model = CrmKind::target_attention;
  int embedding_dim = 16;
  std::vector<FieldSpec> fields;  // must contain item_id and category
  std::vector<int> hidden = {200, 80};
  bool use_knowledge = false;
  int knowledge_dim = 16;  // width of the adapted vectors fed in
  RetrievalMode retrieval = RetrievalMode::category_match;
  int retrieval_size = 20;
  double learning_rate = 1e-3;
  int epochs = 10;
  int patience = 3;
  int batch_size = 128;
  std::uint64_t seed = 0;

  // Throws InvalidArgument on violated invariants.
  void validate() const;
};

// PAD slots are std::nullopt.
using HistorySlots = std::vector<std::optional<HistoryEntry>>;

// category_match: same-category entries most recent first, then the remaining
// entries most recent first. recent: the `size` most recent entries,
// chronological. none: the whole history (most recent `size` if longer),
// chronological. Always padded to `size`.
HistorySlots retrieve_history(const CtrSample& sample, RetrievalMode mode, int size);

// Index form of one sample as consumed by the model.
struct EncodedSample {
  std::vector<int> fields;         // one index per config field
  std::vector<int> history_items;  // retrieval_size slots, 0 for PAD
  std::vector<int> history_categories;
  std::vector<double> history_mask;  // 1 valid, 0 PAD
  int label = 0;
  std::int64_t user_id = 0;
  std::int64_t item_id = 0;
};

// `sample` must be encoded against a vocabulary matching config.fields.
EncodedSample encode_for_crm(const CtrSample& sample, const CrmConfig& config);
std::vector<EncodedSample> encode_for_crm(const std::vector<CtrSample>& samples,
                                          const CrmConfig& config);

class CrmModel {
 public:
  explicit CrmModel(const CrmConfig& config);

  const CrmConfig& config() const { return config_; }

  // Logits (B x 1). z_user / z_item (B x knowledge_dim) must be given iff
  // use_knowledge. `attention_out` receives B x retrieval_size weights for the
  // target-attention model.
  ad::Tensor logits(std::span<const EncodedSample* const> batch, const ad::Tensor* z_user,
                    const ad::Tensor* z_item, ad::Matrix* attention_out = nullptr) const;

  // Click probabilities, no graph recorded.
  std::vector<double> forward(std::span<const EncodedSample* const> batch,
                              const ad::Matrix* z_user = nullptr,
                              const ad::Matrix* z_item = nullptr) const;

  // Order: one embedding table per field, [attention wq, wk], base MLP layers
  // (w, b per layer, then the output layer), then, iff use_knowledge, the
  // knowledge part of the first layer followed by the user and item projections
  // (w, b each). Base parameters are drawn first so models differing only in
  // use_knowledge share them for one seed.
  std::span<ad::Tensor> parameters() { return params_; }
  std::span<const ad::Tensor> parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  // Knowledge projections and first-layer knowledge weights; empty without knowledge.
  std::span<ad::Tensor> knowledge_parameters();

 private:
  ad::Tensor& param(size_t i) const { return const_cast<ad::Tensor&>(params_[i]); }

  CrmConfig config_;
  int item_field_ = -1;
  int category_field_ = -1;
  size_t attn_ = 0, mlp_ = 0, know_ = 0;
  std::vector<ad::Tensor> params_;
  std::vector<std::string> names_;
};

// Tracks the best validation score; stop once `patience` epochs pass without a
// strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  // Returns true if `score` is a new best.
  bool observe(int epoch, double score);
  bool should_stop() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_score() const { return best_; }

 private:
  int patience_;
  int best_epoch_ = -1;
  double best_ = 0.0;
  int since_best_ = 0;
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_auc = 0.0;  // NaN when undefined (single-class validation)
  double val_logloss = 0.0;
  bool operator==(const EpochLog&) const = default;
};

struct KnowledgeInputs {
  const KnowledgeCache* user = nullptr;
  const KnowledgeCache* item = nullptr;
};

struct CrmTrainResult {
  CrmModel model;
  std::optional<MoeAdapter> user_adapter;
  std::optional<MoeAdapter> item_adapter;
  std::vector<EpochLog> log;
  int best_epoch = 0;  // 1-based
};

// Adam on BCE, batches of config.batch_size in a seeded shuffled order;
// early stopping on validation AUC (LogLoss when AUC is undefined), returning
// the best epoch's parameters. Caches and adapters must be given iff
// use_knowledge; throws NotFoundError listing entities missing from a cache.
CrmTrainResult train_crm(const CrmConfig& config, const DatasetSplit& split,
                         std::optional<KnowledgeInputs> caches = std::nullopt,
                         std::optional<std::pair<MoeAdapter, MoeAdapter>> adapters = std::nullopt);

// Throws NotFoundError listing ids absent from the caches (at most 20 shown).
void check_cache_coverage(const std::vector<CtrSample>& samples, const KnowledgeInputs& caches);

// Scores samples in batches of config.batch_size. With knowledge, vectors are
// looked up in the caches and adapted on the fly.
std::vector<double> predict(const CrmModel& model, const std::vector<EncodedSample>& samples,
                            const MoeAdapter* user_adapter = nullptr,
                            const MoeAdapter* item_adapter = nullptr,
                            const KnowledgeInputs& caches = {});

// One batch of predict(); no batching of its own.
std::vector<double> predict_batch(const CrmModel& model, std::span<const EncodedSample* const> batch,
                                  const MoeAdapter* user_adapter = nullptr,
                                  const MoeAdapter* item_adapter = nullptr,
                                  const KnowledgeInputs& caches = {});

// Fresh (user, item) adapters shaped by `shape` with input dims taken from the
// caches; seeds 2*seed+1 and 2*seed+2.
std::pair<MoeAdapter, MoeAdapter> make_adapters(const MoeConfig& shape, const KnowledgeInputs& caches,
                                                int output_dim, std::uint64_t seed);

// Stacks cached vectors for a batch of entity ids (B x dim). Throws NotFoundError.
ad::Matrix gather_knowledge(const KnowledgeCache& cache, std::span<const std::int64_t> ids);

// Checkpoint: "LSRCRM1", u32 JSON length, JSON config blob, then every tensor
// of the model followed by the user and item adapters (if any) as raw
// little-endian f32, row-major, in parameters() order.
inline constexpr std::string_view kCrmMagic = "LSRCRM1";

struct CrmCheckpoint {
  CrmModel model;
  std::optional<MoeAdapter> user_adapter;
  std::optional<MoeAdapter> item_adapter;
};

std::string serialize_crm(const CrmModel& model, const MoeAdapter* user_adapter = nullptr,
                          const MoeAdapter* item_adapter = nullptr);
CrmCheckpoint deserialize_crm(std::string_view bytes, const std::string& context);
void save_crm(const std::filesystem::path& path, const CrmModel& model,
              const MoeAdapter* user_adapter = nullptr, const MoeAdapter* item_adapter = nullptr);
CrmCheckpoint load_crm(const std::filesystem::path& path);

std::string crm_config_to_json(const CrmConfig& config);
// Strict: unknown keys are rejected.
CrmConfig crm_config_from_json(std::string_view json);

}  // namespace laser
