#pragma once

// Causal language-model backends, yes/no click scoring and instruction tuning.

#include "laser/autograd.hpp"
#include "laser/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace laser {

// Describes how an external backend exposes the pieces the scorer needs.
struct AdapterDescriptor {
  std::string name;
  int yes_token_id = 0;
  int no_token_id = 0;
  int hidden_dim = 0;
  int context_limit = 0;

  std::string to_json() const;
  static AdapterDescriptor from_json(std::string_view text);
  bool operator==(const AdapterDescriptor&) const = default;
};

// One training sequence: targets[t] is the token expected after position t, and
// only positions with loss_mask[t] != 0 contribute to the loss.
struct TrainingSequence {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<std::uint8_t> loss_mask;
};

class LmBackend {
 public:
  virtual ~LmBackend() = default;

  virtual std::vector<int> tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(const std::vector<int>& ids) const = 0;
  virtual int vocab_size() const = 0;
  virtual int yes_token() const = 0;
  virtual int no_token() const = 0;
  virtual int hidden_dim() const = 0;
  virtual int context_limit() const = 0;

  // Logits for the token following the last position.
  virtual Eigen::VectorXd next_token_logits(std::span<const int> tokens) const = 0;
  // Final-layer states, one row per token.
  virtual ad::Matrix hidden_states(std::span<const int> tokens) const = 0;

  // Token-mean negative log likelihood over the masked positions of `batch`.
  virtual double sequence_loss(std::span<const TrainingSequence> batch) const = 0;
  // One gradient step on that loss; returns the loss before the update.
  virtual double train_step(std::span<const TrainingSequence> batch, double learning_rate) = 0;

  virtual AdapterDescriptor descriptor() const = 0;
};

struct ReferenceLmConfig {
  int layers = 2;
  int hidden_dim = 64;
  int heads = 4;
  int context_limit = 512;
  int ffn_multiplier = 4;
  std::uint64_t seed = 0;
};

// Small decoder-only transformer (pre-norm blocks, learned positions, causal
// attention, GELU feed-forward) over a word-level vocabulary. Parameters live in
// double precision; checkpoints store them as 32-bit floats.
class ReferenceLm final : public LmBackend {
 public:
  ReferenceLm(ReferenceLmConfig config, WordTokenizer tokenizer);
  static ReferenceLm create(const ReferenceLmConfig& config, const std::vector<std::string>& corpus);

  std::vector<int> tokenize(std::string_view text) const override;
  std::string detokenize(const std::vector<int>& ids) const override;
  int vocab_size() const override { return tokenizer_.size(); }
  int yes_token() const override { return WordTokenizer::kYes; }
  int no_token() const override { return WordTokenizer::kNo; }
  int hidden_dim() const override { return config_.hidden_dim; }
  int context_limit() const override { return config_.context_limit; }

  Eigen::VectorXd next_token_logits(std::span<const int> tokens) const override;
  ad::Matrix hidden_states(std::span<const int> tokens) const override;
  double sequence_loss(std::span<const TrainingSequence> batch) const override;
  double train_step(std::span<const TrainingSequence> batch, double learning_rate) override;
  AdapterDescriptor descriptor() const override;

  // Differentiable loss over `batch`; exposed for gradient checks.
  ad::Tensor loss_graph(std::span<const TrainingSequence> batch) const;

  const ReferenceLmConfig& config() const { return config_; }
  const WordTokenizer& tokenizer() const { return tokenizer_; }
  std::span<ad::Tensor> parameters() { return params_; }
  std::span<const ad::Tensor> parameters() const { return params_; }
  std::vector<std::string> parameter_names() const;

  // Checkpoint: "LSRLM01", u32 JSON length, JSON config (incl. vocabulary and
  // tensor shapes), then every parameter as little-endian f32 in parameter order.
  std::string serialize() const;
  static ReferenceLm deserialize(std::string_view bytes, const std::string& context = "checkpoint");
  void save(const std::filesystem::path& path) const;
  static ReferenceLm load(const std::filesystem::path& path);

 private:
  ad::Tensor forward(std::span<const int> tokens) const;
  void init_parameters();

  ReferenceLmConfig config_;
  WordTokenizer tokenizer_;
  std::vector<ad::Tensor> params_;
};

// Click probability from the two answer logits.
struct ScorePair {
  double s_yes = 0.0;
  double s_no = 0.0;
  double probability = 0.5;
  int truncated_entries = 0;  // history entries dropped to fit the context
};

// exp(a) / (exp(a) + exp(b)) in log-sum-exp form, kept strictly inside (0, 1).
double two_way_softmax(double s_yes, double s_no);

// Tokenizes `prompt`, dropping the oldest history entries while it exceeds the
// backend's context limit. Throws InvalidArgument when empty or unfittable.
std::vector<int> fit_prompt(const LmBackend& backend, std::string_view prompt,
                            int reserve_tokens = 0, int* dropped = nullptr);

ScorePair score_click(const LmBackend& backend, std::string_view prompt);
ad::Matrix hidden_states(const LmBackend& backend, std::string_view prompt);

struct TuneConfig {
  long steps = 500;
  int batch_size = 16;
  double learning_rate = 0.2;
  std::uint64_t seed = 0;
};

struct TuneResult {
  std::vector<double> loss_trace;  // per-step mean NLL over answer tokens
};

// Builds the masked sequence for one (prompt, answer) pair: loss only on the
// answer tokens.
TrainingSequence make_instruction_sequence(const LmBackend& backend, std::string_view prompt,
                                           std::string_view answer);

// Instruction tuning with the next-token objective on the answer tokens. Throws
// DivergenceError on a non-finite loss.
TuneResult instruction_tune(LmBackend& backend,
                            const std::vector<std::pair<std::string, std::string>>& pairs,
                            const TuneConfig& config);

}  // namespace laser
