#pragma once

// Evaluation harness: metric reports, the per-sample latency benchmark, the
// sample-efficiency curve runner and the synthetic corpus generator.

#include "laser/crm.hpp"
#include "laser/dataio.hpp"
#include "laser/knowledge.hpp"
#include "laser/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace laser {

// ---- reports -------------------------------------------------------------------

struct RunMeta {
  std::string model_name;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  std::string dataset;
  std::string timestamp;  // ISO-8601 UTC; excluded from determinism checks
};

struct MetricReport {
  double auc = 0.0;
  double logloss = 0.0;
  std::size_t n_samples = 0;
  std::optional<double> latency_mean_s;
  RunMeta run_meta;
};

MetricReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels,
                             RunMeta meta);
std::string utc_timestamp();

std::string report_to_json(const MetricReport& report);
// One JSON object per line.
void write_reports_jsonl(const std::filesystem::path& path, const std::vector<MetricReport>& reports);
// model,fraction,seed,dataset,n_samples,auc,logloss,latency_mean_s
void write_reports_csv(const std::filesystem::path& path, const std::vector<MetricReport>& reports);

// ---- latency -------------------------------------------------------------------

// Scores samples [begin, end).
using BatchRunner = std::function<void(std::size_t begin, std::size_t end)>;

struct LatencyResult {
  double latency_mean_s = 0.0;            // total time / total samples over all repeats
  std::vector<double> per_repeat_s;       // per-sample time of each repeat
  std::size_t batch_size = 0;
  std::size_t samples_per_repeat = 0;
  int warmup_batches = 0;
  int repeats = 0;
};

// Runs `warmup_batches` untimed batches, then `repeats` timed passes over all
// samples in batches of `batch_size` (the last batch may be short). Throws
// InvalidArgument when there are fewer samples than one batch.
LatencyResult bench_latency(std::size_t n_samples, const BatchRunner& runner,
                            std::size_t batch_size = 128, int warmup_batches = 3, int repeats = 5);

// ---- sample-efficiency curve ------------------------------------------------------

struct CurveModel {
  std::string name;
  CrmConfig crm;  // fields are filled from the split vocabulary; seed from the cell
  // Adapter shape for knowledge models; input_dim and side are taken from the caches.
  MoeConfig adapter;
};

struct CurveSpec {
  std::vector<double> fractions = {0.1, 0.5, 1.0};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<CurveModel> models;
  // Throws InvalidArgument unless fractions are in (0, 1], strictly ascending, and
  // seeds and models are non-empty.
  void validate() const;
};

struct CurveCellMean {
  std::string model;
  double fraction = 0.0;
  double mean_auc = 0.0;
  double mean_logloss = 0.0;
  std::size_t seeds = 0;
};

struct CurveResult {
  std::vector<MetricReport> rows;  // model-major, then fraction, then seed
  std::vector<CurveCellMean> means;
  std::string test_hash;  // SHA-256 of the serialized test set
  bool test_hash_constant = true;
};

// Progress callback, called after each cell.
using CurveProgress = std::function<void(const MetricReport&)>;

// For each (model, fraction, seed): subsample_train -> train_crm -> evaluate on
// the unchanged test set. Knowledge models need `caches`. Fails fast.
CurveResult run_curve(const CurveSpec& spec, const DatasetSplit& split,
                      std::optional<KnowledgeInputs> caches = std::nullopt,
                      const std::string& dataset = "", const CurveProgress& progress = {});

// model,fraction,seed,auc,logloss
void write_curve_long_csv(const std::filesystem::path& path, const CurveResult& result);
// model,fraction,mean_auc,mean_logloss,seeds
void write_curve_summary_csv(const std::filesystem::path& path, const CurveResult& result);

const CurveCellMean& find_cell(const CurveResult& result, const std::string& model, double fraction);

// ---- synthetic corpus --------------------------------------------------------------

struct SynthConfig {
  int n_users = 500;
  int n_items = 2000;
  int n_latent_attrs = 4;
  int samples = 50000;  // CTR samples; one extra warm-up interaction per user is added
  double text_signal_strength = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthItem {
  std::int64_t id = 0;
  int latent = 0;  // rendered into the title only
  std::string title;
  std::string category;
  double bias = 0.0;
};

struct SynthUser {
  std::int64_t id = 0;
  int preference = 0;  // latent attribute the user favours
  double bias = 0.0;
  UserAttributes attributes;
};

struct SynthCorpus {
  SynthConfig config;
  std::vector<InteractionRecord> records;  // chronological, unique timestamps
  std::vector<double> click_probability;   // ground truth, parallel to records
  std::vector<SynthItem> items;
  std::vector<SynthUser> users;
};

// Items carry a latent attribute that appears as a word in the title and in no
// ID feature. Click logit = intercept + user bias + item bias
// + strength * affinity * (match(user preference, item latent) - 1 / n_latent);
// label = rating > 3. With strength 0 labels depend on IDs only.
SynthCorpus synth_generate(const SynthConfig& config);

inline constexpr double kSynthIntercept = -1.0;
inline constexpr double kSynthAffinity = 4.0;
inline constexpr double kSynthBiasStd = 0.5;

// Latent attribute words used in titles.
const std::vector<std::string>& synth_latent_words();

// JSON answer key: config, per-item latent/bias, per-user preference/bias and
// the click probability of every record keyed by timestamp.
void write_answer_key(const std::filesystem::path& path, const SynthCorpus& corpus);

// Ground-truth click probabilities of samples built from this corpus (matched by
// timestamp). Throws NotFoundError for unknown samples.
std::vector<double> bayes_scores(const SynthCorpus& corpus, const std::vector<CtrSample>& samples);

}  // namespace laser
