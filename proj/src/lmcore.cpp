#include "laser/lmcore.hpp"

#include "laser/error.hpp"
#include "laser/io_util.hpp"
#include "laser/prompts.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace laser {

using nlohmann::json;

namespace {

constexpr std::string_view kLmMagic = "LSRLM01";
constexpr int kPerLayer = 13;

enum LayerSlot { kLn1G, kLn1B, kWq, kWk, kWv, kWo, kBo, kLn2G, kLn2B, kW1, kB1, kW2, kB2 };

}  // namespace

// ---- AdapterDescriptor ------------------------------------------------------

std::string AdapterDescriptor::to_json() const {
  return json{{"name", name},
              {"yes_token_id", yes_token_id},
              {"no_token_id", no_token_id},
              {"hidden_dim", hidden_dim},
              {"context_limit", context_limit}}
      .dump();
}

AdapterDescriptor AdapterDescriptor::from_json(std::string_view text) {
  json j = json::parse(text, nullptr, false);
  if (!j.is_object()) throw FormatError("adapter descriptor is not a JSON object");
  static const char* const kKeys[] = {"name", "yes_token_id", "no_token_id", "hidden_dim",
                                      "context_limit"};
  for (auto& [k, v] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), k) == std::end(kKeys)) {
      throw FormatError("adapter descriptor: unknown key '" + k + "'");
    }
  }
  AdapterDescriptor d;
  try {
    d.name = j.at("name").get<std::string>();
    d.yes_token_id = j.at("yes_token_id").get<int>();
    d.no_token_id = j.at("no_token_id").get<int>();
    d.hidden_dim = j.at("hidden_dim").get<int>();
    d.context_limit = j.at("context_limit").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("adapter descriptor: ") + e.what());
  }
  if (d.yes_token_id == d.no_token_id || d.yes_token_id < 0 || d.no_token_id < 0) {
    throw FormatError("adapter descriptor: yes/no token ids must be distinct and non-negative");
  }
  if (d.hidden_dim <= 0 || d.context_limit <= 0) {
    throw FormatError("adapter descriptor: hidden_dim and context_limit must be positive");
  }
  return d;
}

// ---- ReferenceLm -------------------------------------------------------------

ReferenceLm::ReferenceLm(ReferenceLmConfig config, WordTokenizer tokenizer)
    : config_(config), tokenizer_(std::move(tokenizer)) {
  if (config_.layers <= 0 || config_.hidden_dim <= 0 || config_.heads <= 0 ||
      config_.context_limit <= 0 || config_.ffn_multiplier <= 0) {
    throw InvalidArgument("reference backend: config values must be positive");
  }
  if (config_.hidden_dim % config_.heads != 0) {
    throw InvalidArgument("reference backend: hidden_dim must be divisible by heads");
  }
  init_parameters();
}

ReferenceLm ReferenceLm::create(const ReferenceLmConfig& config,
                                const std::vector<std::string>& corpus) {
  return ReferenceLm(config, WordTokenizer::from_corpus(corpus));
}

void ReferenceLm::init_parameters() {
  const int d = config_.hidden_dim;
  const int f = d * config_.ffn_multiplier;
  const int v = tokenizer_.size();
  const double std0 = 0.02;
  const double std_out = std0 / std::sqrt(2.0 * config_.layers);
  std::mt19937_64 rng(config_.seed);
  auto normal = [&](int r, int c, double s) { return ad::Tensor::parameter(ad::normal_matrix(r, c, s, rng)); };
  auto constant = [](int r, int c, double x) { return ad::Tensor::parameter(ad::Matrix::Constant(r, c, x)); };

  params_.clear();
  params_.push_back(normal(v, d, std0));
  params_.push_back(normal(config_.context_limit, d, std0));
  for (int l = 0; l < config_.layers; ++l) {
    params_.push_back(constant(1, d, 1.0));
    params_.push_back(constant(1, d, 0.0));
    params_.push_back(normal(d, d, std0));
    params_.push_back(normal(d, d, std0));
    params_.push_back(normal(d, d, std0));
    params_.push_back(normal(d, d, std_out));
    params_.push_back(constant(1, d, 0.0));
    params_.push_back(constant(1, d, 1.0));
    params_.push_back(constant(1, d, 0.0));
    params_.push_back(normal(d, f, std0));
    params_.push_back(constant(1, f, 0.0));
    params_.push_back(normal(f, d, std_out));
    params_.push_back(constant(1, d, 0.0));
  }
  params_.push_back(constant(1, d, 1.0));
  params_.push_back(constant(1, d, 0.0));
  params_.push_back(normal(d, v, std0));
  params_.push_back(constant(1, v, 0.0));
}

std::vector<std::string> ReferenceLm::parameter_names() const {
  static const char* const kSlots[] = {"ln1.gamma", "ln1.beta", "attn.wq", "attn.wk", "attn.wv",
                                       "attn.wo",   "attn.bo",  "ln2.gamma", "ln2.beta", "ffn.w1",
                                       "ffn.b1",    "ffn.w2",   "ffn.b2"};
  std::vector<std::string> names{"tok_emb", "pos_emb"};
  for (int l = 0; l < config_.layers; ++l) {
    for (const char* s : kSlots) names.push_back("layer" + std::to_string(l) + "." + s);
  }
  for (const char* s : {"lnf.gamma", "lnf.beta", "head.w", "head.b"}) names.emplace_back(s);
  return names;
}

std::vector<int> ReferenceLm::tokenize(std::string_view text) const { return tokenizer_.encode(text); }

std::string ReferenceLm::detokenize(const std::vector<int>& ids) const {
  return tokenizer_.decode(ids);
}

ad::Tensor ReferenceLm::forward(std::span<const int> tokens) const {
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw InvalidArgument("empty token sequence");
  if (T > config_.context_limit) throw InvalidArgument("sequence exceeds the context limit");
  std::vector<int> positions(static_cast<size_t>(T));
  std::iota(positions.begin(), positions.end(), 0);

  ad::Tensor x = ad::add(ad::gather_rows(params_[0], tokens), ad::gather_rows(params_[1], positions));
  for (int l = 0; l < config_.layers; ++l) {
    const ad::Tensor* p = &params_[2 + static_cast<size_t>(l) * kPerLayer];
    ad::Tensor h = ad::layer_norm(x, p[kLn1G], p[kLn1B]);
    ad::Tensor att = ad::causal_self_attention(ad::matmul(h, p[kWq]), ad::matmul(h, p[kWk]),
                                               ad::matmul(h, p[kWv]), config_.heads);
    x = ad::add(x, ad::add_row(ad::matmul(att, p[kWo]), p[kBo]));
    ad::Tensor h2 = ad::layer_norm(x, p[kLn2G], p[kLn2B]);
    ad::Tensor ff = ad::add_row(
        ad::matmul(ad::gelu(ad::add_row(ad::matmul(h2, p[kW1]), p[kB1])), p[kW2]), p[kB2]);
    x = ad::add(x, ff);
  }
  const size_t tail = params_.size() - 4;
  return ad::layer_norm(x, params_[tail], params_[tail + 1]);
}

Eigen::VectorXd ReferenceLm::next_token_logits(std::span<const int> tokens) const {
  ad::NoGradGuard no_grad;
  ad::Tensor h = forward(tokens);
  const size_t tail = params_.size() - 4;
  ad::RowVector last = h.value().row(h.rows() - 1);
  ad::RowVector logits = last * params_[tail + 2].value() + params_[tail + 3].value();
  return logits.transpose();
}

ad::Matrix ReferenceLm::hidden_states(std::span<const int> tokens) const {
  ad::NoGradGuard no_grad;
  return forward(tokens).value();
}

ad::Tensor ReferenceLm::loss_graph(std::span<const TrainingSequence> batch) const {
  size_t total = 0;
  for (const auto& s : batch) {
    if (s.tokens.size() != s.targets.size() || s.tokens.size() != s.loss_mask.size()) {
      throw InvalidArgument("training sequence fields differ in length");
    }
    total += static_cast<size_t>(std::count_if(s.loss_mask.begin(), s.loss_mask.end(),
                                               [](std::uint8_t m) { return m != 0; }));
  }
  if (total == 0) throw InvalidArgument("training batch has no answer positions");

  const size_t tail = params_.size() - 4;
  ad::Tensor loss;
  for (const auto& s : batch) {
    std::vector<int> rows, targets;
    for (size_t t = 0; t < s.tokens.size(); ++t) {
      if (!s.loss_mask[t]) continue;
      rows.push_back(static_cast<int>(t));
      targets.push_back(s.targets[t]);
    }
    if (rows.empty()) continue;
    ad::Tensor h = forward(s.tokens);
    ad::Tensor logits =
        ad::add_row(ad::matmul(ad::gather_rows(h, rows), params_[tail + 2]), params_[tail + 3]);
    ad::Tensor part = ad::scale(ad::cross_entropy(logits, targets),
                                static_cast<double>(rows.size()) / static_cast<double>(total));
    loss = loss ? ad::add(loss, part) : part;
  }
  return loss;
}

double ReferenceLm::sequence_loss(std::span<const TrainingSequence> batch) const {
  ad::NoGradGuard no_grad;
  return loss_graph(batch).item();
}

double ReferenceLm::train_step(std::span<const TrainingSequence> batch, double learning_rate) {
  ad::zero_grads(params_);
  ad::Tensor loss = loss_graph(batch);
  const double value = loss.item();
  if (!std::isfinite(value)) return value;
  ad::backward(loss);
  ad::Sgd(learning_rate).step(params_);
  return value;
}

AdapterDescriptor ReferenceLm::descriptor() const {
  return {"reference", yes_token(), no_token(), config_.hidden_dim, config_.context_limit};
}

std::string ReferenceLm::serialize() const {
  json shapes = json::array();
  auto names = parameter_names();
  for (size_t i = 0; i < params_.size(); ++i) {
    shapes.push_back({{"name", names[i]}, {"shape", {params_[i].rows(), params_[i].cols()}}});
  }
  json cfg = {{"format", 1},
              {"layers", config_.layers},
              {"hidden_dim", config_.hidden_dim},
              {"heads", config_.heads},
              {"context_limit", config_.context_limit},
              {"ffn_multiplier", config_.ffn_multiplier},
              {"seed", config_.seed},
              {"vocab", tokenizer_.pieces()},
              {"tensors", shapes}};
  const std::string blob = cfg.dump();
  ByteWriter w;
  w.raw(kLmMagic);
  w.u32(static_cast<std::uint32_t>(blob.size()));
  w.raw(blob);
  for (const auto& p : params_) {
    for (Eigen::Index i = 0; i < p.value().size(); ++i) w.f32(static_cast<float>(p.value().data()[i]));
  }
  return w.take();
}

ReferenceLm ReferenceLm::deserialize(std::string_view bytes, const std::string& context) {
  ByteReader r(bytes, context);
  if (bytes.size() < kLmMagic.size() || r.raw(kLmMagic.size()) != kLmMagic) {
    throw FormatError(context + ": bad magic (not an LM checkpoint)");
  }
  const std::uint32_t len = r.u32();
  json cfg = json::parse(r.raw(len), nullptr, false);
  if (cfg.is_discarded()) r.fail("config blob is not valid JSON");
  ReferenceLmConfig c;
  std::vector<std::string> pieces;
  try {
    c.layers = cfg.at("layers").get<int>();
    c.hidden_dim = cfg.at("hidden_dim").get<int>();
    c.heads = cfg.at("heads").get<int>();
    c.context_limit = cfg.at("context_limit").get<int>();
    c.ffn_multiplier = cfg.at("ffn_multiplier").get<int>();
    c.seed = cfg.at("seed").get<std::uint64_t>();
    pieces = cfg.at("vocab").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(context + ": config blob: " + e.what());
  }
  ReferenceLm lm(c, WordTokenizer::from_pieces(std::move(pieces)));
  std::vector<float> buf;
  for (auto& p : lm.params_) {
    buf.resize(static_cast<size_t>(p.value().size()));
    r.f32s(buf);
    for (size_t i = 0; i < buf.size(); ++i) p.mutable_value().data()[i] = buf[i];
  }
  if (r.remaining() != 0) r.fail("trailing bytes after the last tensor");
  return lm;
}

void ReferenceLm::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

ReferenceLm ReferenceLm::load(const std::filesystem::path& path) {
  return deserialize(read_file(path), path.string());
}

// ---- scoring -------------------------------------------------------------------

double two_way_softmax(double s_yes, double s_no) {
  const double m = std::max(s_yes, s_no);
  const double a = std::exp(s_yes - m);
  const double b = std::exp(s_no - m);
  const double p = a / (a + b);
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

std::vector<int> fit_prompt(const LmBackend& backend, std::string_view prompt, int reserve_tokens,
                            int* dropped) {
  std::string current(prompt);
  std::vector<int> tokens = backend.tokenize(current);
  if (tokens.empty()) throw InvalidArgument("empty prompt");
  int n_dropped = 0;
  while (static_cast<int>(tokens.size()) + reserve_tokens > backend.context_limit()) {
    auto shorter = drop_oldest_history(current);
    if (!shorter) {
      throw InvalidArgument("prompt of " + std::to_string(tokens.size()) +
                            " tokens exceeds the context limit and has no history left to drop");
    }
    current = std::move(*shorter);
    tokens = backend.tokenize(current);
    ++n_dropped;
  }
  if (dropped) *dropped = n_dropped;
  return tokens;
}

ScorePair score_click(const LmBackend& backend, std::string_view prompt) {
  ScorePair out;
  std::vector<int> tokens = fit_prompt(backend, prompt, 0, &out.truncated_entries);
  Eigen::VectorXd logits = backend.next_token_logits(tokens);
  out.s_yes = logits(backend.yes_token());
  out.s_no = logits(backend.no_token());
  out.probability = two_way_softmax(out.s_yes, out.s_no);
  return out;
}

ad::Matrix hidden_states(const LmBackend& backend, std::string_view prompt) {
  return backend.hidden_states(fit_prompt(backend, prompt));
}

// ---- instruction tuning ----------------------------------------------------------

TrainingSequence make_instruction_sequence(const LmBackend& backend, std::string_view prompt,
                                           std::string_view answer) {
  if (answer != "Yes" && answer != "No") {
    throw InvalidArgument("answer must be \"Yes\" or \"No\", got '" + std::string(answer) + "'");
  }
  std::vector<int> answer_ids = backend.tokenize(answer);
  std::vector<int> full =
      fit_prompt(backend, prompt, static_cast<int>(answer_ids.size()) - 1);
  const size_t n_prompt = full.size();
  full.insert(full.end(), answer_ids.begin(), answer_ids.end());

  TrainingSequence s;
  s.tokens.assign(full.begin(), full.end() - 1);
  s.targets.assign(full.begin() + 1, full.end());
  s.loss_mask.resize(s.tokens.size(), 0);
  for (size_t t = n_prompt - 1; t < s.tokens.size(); ++t) s.loss_mask[t] = 1;
  return s;
}

TuneResult instruction_tune(LmBackend& backend,
                            const std::vector<std::pair<std::string, std::string>>& pairs,
                            const TuneConfig& config) {
  if (config.steps < 0 || config.batch_size <= 0 || !(config.learning_rate > 0)) {
    throw InvalidArgument("tuning config values must be positive");
  }
  TuneResult result;
  if (config.steps == 0) return result;
  if (pairs.empty()) throw InvalidArgument("no instruction pairs to tune on");

  std::vector<TrainingSequence> seqs;
  seqs.reserve(pairs.size());
  for (const auto& [prompt, answer] : pairs) {
    seqs.push_back(make_instruction_sequence(backend, prompt, answer));
  }

  std::mt19937_64 rng(config.seed);
  std::vector<size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();
  std::vector<TrainingSequence> batch;
  for (long step = 0; step < config.steps; ++step) {
    batch.clear();
    for (int b = 0; b < config.batch_size && b < static_cast<int>(seqs.size()); ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(seqs[order[cursor++]]);
    }
    const double loss = backend.train_step(batch, config.learning_rate);
    if (!std::isfinite(loss)) {
      throw DivergenceError("instruction tuning diverged at step " + std::to_string(step), step);
    }
    result.loss_trace.push_back(loss);
  }
  return result;
}

}  // namespace laser
