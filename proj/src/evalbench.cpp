#include "laser/evalbench.hpp"

#include "laser/error.hpp"
#include "laser/io_util.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <random>
#include <sstream>
#include <unordered_map>

namespace laser {

using nlohmann::json;

// ---- reports -------------------------------------------------------------------

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

MetricReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels,
                             RunMeta meta) {
  MetricReport r;
  r.auc = auc(scores, labels);
  r.logloss = logloss(scores, labels);
  r.n_samples = scores.size();
  if (meta.timestamp.empty()) meta.timestamp = utc_timestamp();
  r.run_meta = std::move(meta);
  return r;
}

std::string report_to_json(const MetricReport& r) {
  json j = {{"auc", r.auc},
            {"logloss", r.logloss},
            {"n_samples", r.n_samples},
            {"latency_mean_s", r.latency_mean_s ? json(*r.latency_mean_s) : json(nullptr)},
            {"run_meta",
             {{"model_name", r.run_meta.model_name},
              {"fraction", r.run_meta.fraction},
              {"seed", r.run_meta.seed},
              {"dataset", r.run_meta.dataset},
              {"timestamp", r.run_meta.timestamp}}}};
  return j.dump();
}

void write_reports_jsonl(const std::filesystem::path& path, const std::vector<MetricReport>& reports) {
  std::string out;
  for (const auto& r : reports) out += report_to_json(r) + "\n";
  write_file_atomic(path, out);
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void write_reports_csv(const std::filesystem::path& path, const std::vector<MetricReport>& reports) {
  std::string out = "model,fraction,seed,dataset,n_samples,auc,logloss,latency_mean_s\n";
  for (const auto& r : reports) {
    out += r.run_meta.model_name + "," + num(r.run_meta.fraction) + "," +
           std::to_string(r.run_meta.seed) + "," + r.run_meta.dataset + "," +
           std::to_string(r.n_samples) + "," + num(r.auc) + "," + num(r.logloss) + "," +
           (r.latency_mean_s ? num(*r.latency_mean_s) : "") + "\n";
  }
  write_file_atomic(path, out);
}

// ---- latency -------------------------------------------------------------------

LatencyResult bench_latency(std::size_t n_samples, const BatchRunner& runner, std::size_t batch_size,
                            int warmup_batches, int repeats) {
  if (batch_size == 0) throw InvalidArgument("bench_latency: batch_size must be positive");
  if (repeats < 1 || warmup_batches < 0) {
    throw InvalidArgument("bench_latency: repeats must be >= 1 and warmup_batches >= 0");
  }
  if (n_samples < batch_size) {
    throw InvalidArgument("bench_latency: " + std::to_string(n_samples) +
                          " samples is fewer than one batch of " + std::to_string(batch_size));
  }
  const std::size_t full_batches = n_samples / batch_size;
  for (int w = 0; w < warmup_batches; ++w) {
    const std::size_t b = static_cast<std::size_t>(w) % full_batches;
    runner(b * batch_size, (b + 1) * batch_size);
  }
  using clock = std::chrono::steady_clock;
  LatencyResult res;
  res.batch_size = batch_size;
  res.samples_per_repeat = n_samples;
  res.warmup_batches = warmup_batches;
  res.repeats = repeats;
  double total = 0.0;
  for (int rep = 0; rep < repeats; ++rep) {
    const auto t0 = clock::now();
    for (std::size_t begin = 0; begin < n_samples; begin += batch_size) {
      runner(begin, std::min(n_samples, begin + batch_size));
    }
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    total += secs;
    res.per_repeat_s.push_back(secs / static_cast<double>(n_samples));
  }
  res.latency_mean_s = total / (static_cast<double>(n_samples) * repeats);
  return res;
}

// ---- curve ---------------------------------------------------------------------

void CurveSpec::validate() const {
  if (fractions.empty()) throw InvalidArgument("curve: no fractions");
  for (size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] <= 1.0)) {
      throw InvalidArgument("curve: fractions must lie in (0, 1]");
    }
    if (i > 0 && !(fractions[i] > fractions[i - 1])) {
      throw InvalidArgument("curve: fractions must be sorted ascending and unique");
    }
  }
  if (seeds.empty()) throw InvalidArgument("curve: no seeds");
  if (models.empty()) throw InvalidArgument("curve: no models");
  for (const auto& m : models) {
    if (m.name.empty()) throw InvalidArgument("curve: model without a name");
  }
}

CurveResult run_curve(const CurveSpec& spec, const DatasetSplit& split,
                      std::optional<KnowledgeInputs> caches, const std::string& dataset,
                      const CurveProgress& progress) {
  spec.validate();
  for (const auto& m : spec.models) {
    if (m.crm.use_knowledge && (!caches || !caches->user || !caches->item)) {
      throw InvalidArgument("curve: model '" + m.name + "' uses knowledge but no caches were given");
    }
  }
  if (split.test.empty()) throw InvalidArgument("curve: empty test set");

  CurveResult result;
  result.test_hash = samples_digest(split.test);
  std::vector<int> test_labels;
  for (const auto& s : split.test) test_labels.push_back(s.label);

  for (const auto& m : spec.models) {
    for (double fraction : spec.fractions) {
      CurveCellMean mean{m.name, fraction, 0.0, 0.0, 0};
      for (std::uint64_t seed : spec.seeds) {
        DatasetSplit sub = subsample_train(split, fraction, seed);
        if (samples_digest(sub.test) != result.test_hash) result.test_hash_constant = false;

        CrmConfig cfg = m.crm;
        cfg.fields = field_specs(sub.vocab);
        cfg.seed = seed;
        std::optional<std::pair<MoeAdapter, MoeAdapter>> adapters;
        std::optional<KnowledgeInputs> know;
        if (cfg.use_knowledge) {
          adapters.emplace(make_adapters(m.adapter, *caches, cfg.knowledge_dim, seed));
          know = caches;
        }
        CrmTrainResult trained = train_crm(cfg, sub, know, std::move(adapters));
        const auto test = encode_for_crm(sub.test, cfg);
        const auto scores = predict(trained.model, test,
                                    trained.user_adapter ? &*trained.user_adapter : nullptr,
                                    trained.item_adapter ? &*trained.item_adapter : nullptr,
                                    know.value_or(KnowledgeInputs{}));
        MetricReport report = evaluate_scores(scores, test_labels, {m.name, fraction, seed, dataset, ""});
        mean.mean_auc += report.auc;
        mean.mean_logloss += report.logloss;
        ++mean.seeds;
        if (progress) progress(report);
        result.rows.push_back(std::move(report));
      }
      mean.mean_auc /= static_cast<double>(mean.seeds);
      mean.mean_logloss /= static_cast<double>(mean.seeds);
      result.means.push_back(mean);
    }
  }
  return result;
}

void write_curve_long_csv(const std::filesystem::path& path, const CurveResult& result) {
  std::string out = "model,fraction,seed,auc,logloss\n";
  for (const auto& r : result.rows) {
    out += r.run_meta.model_name + "," + num(r.run_meta.fraction) + "," +
           std::to_string(r.run_meta.seed) + "," + num(r.auc) + "," + num(r.logloss) + "\n";
  }
  write_file_atomic(path, out);
}

void write_curve_summary_csv(const std::filesystem::path& path, const CurveResult& result) {
  std::string out = "model,fraction,mean_auc,mean_logloss,seeds\n";
  for (const auto& m : result.means) {
    out += m.model + "," + num(m.fraction) + "," + num(m.mean_auc) + "," + num(m.mean_logloss) + "," +
           std::to_string(m.seeds) + "\n";
  }
  write_file_atomic(path, out);
}

const CurveCellMean& find_cell(const CurveResult& result, const std::string& model, double fraction) {
  for (const auto& m : result.means) {
    if (m.model == model && std::abs(m.fraction - fraction) < 1e-12) return m;
  }
  throw NotFoundError("curve has no cell (" + model + ", " + num(fraction) + ")");
}

// ---- synthetic corpus ------------------------------------------------------------

void SynthConfig::validate() const {
  if (n_users < 1 || n_items < 1 || n_latent_attrs < 1 || samples < 1) {
    throw InvalidArgument("synth: counts must be positive");
  }
  if (n_latent_attrs > static_cast<int>(synth_latent_words().size())) {
    throw InvalidArgument("synth: at most " + std::to_string(synth_latent_words().size()) +
                          " latent attributes are supported");
  }
  if (!(text_signal_strength >= 0.0) || !std::isfinite(text_signal_strength)) {
    throw InvalidArgument("synth: text_signal_strength must be a finite non-negative number");
  }
}

const std::vector<std::string>& synth_latent_words() {
  static const std::vector<std::string> words = {"Space",  "Romance", "Detective", "Pirate",
                                                 "Dragon", "Robot",   "Cowboy",    "Ghost"};
  return words;
}

namespace {

const std::vector<std::string> kAdjectives = {"Silent", "Golden", "Broken", "Hidden", "Last",
                                              "Crimson", "Endless", "Lost", "Wild", "Quiet"};
const std::vector<std::string> kNouns = {"Story", "Journey", "Night", "Road", "Promise",
                                         "Legacy", "Secret", "Summer", "Empire", "Echo"};
const std::vector<std::string> kCategories = {"Drama", "Comedy", "Action", "Documentary", "Thriller"};
const std::vector<std::string> kAgeBuckets = {"18-24", "25-34", "35-44", "45-54", "55+"};

constexpr std::int64_t kSynthEpoch = 1000000000;

}  // namespace

SynthCorpus synth_generate(const SynthConfig& config) {
  config.validate();
  SynthCorpus c;
  c.config = config;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> bias(0.0, kSynthBiasStd);
  std::uniform_int_distribution<int> latent(0, config.n_latent_attrs - 1);
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[std::uniform_int_distribution<size_t>(0, v.size() - 1)(rng)];
  };

  for (int i = 0; i < config.n_items; ++i) {
    SynthItem it;
    it.id = i + 1;
    it.latent = latent(rng);
    const std::string& adj = pick(kAdjectives);
    const std::string& noun = pick(kNouns);
    it.title = adj + " " + synth_latent_words()[static_cast<size_t>(it.latent)] + " " + noun + " " +
               std::to_string(it.id);
    it.category = pick(kCategories);
    it.bias = bias(rng);
    c.items.push_back(std::move(it));
  }
  for (int u = 0; u < config.n_users; ++u) {
    SynthUser us;
    us.id = u + 1;
    us.preference = latent(rng);
    us.bias = bias(rng);
    us.attributes = {{"age", pick(kAgeBuckets)},
                     {"favorite", synth_latent_words()[static_cast<size_t>(us.preference)]}};
    c.users.push_back(std::move(us));
  }

  std::uniform_int_distribution<int> any_user(0, config.n_users - 1);
  std::uniform_int_distribution<int> any_item(0, config.n_items - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> warmup(static_cast<size_t>(config.n_users));
  for (int u = 0; u < config.n_users; ++u) warmup[static_cast<size_t>(u)] = u;
  std::shuffle(warmup.begin(), warmup.end(), rng);

  const double base_shift = 1.0 / config.n_latent_attrs;
  const size_t total = static_cast<size_t>(config.n_users) + static_cast<size_t>(config.samples);
  c.records.reserve(total);
  c.click_probability.reserve(total);
  for (size_t k = 0; k < total; ++k) {
    const int u = k < warmup.size() ? warmup[k] : any_user(rng);
    const int i = any_item(rng);
    const SynthUser& us = c.users[static_cast<size_t>(u)];
    const SynthItem& it = c.items[static_cast<size_t>(i)];
    const double match = us.preference == it.latent ? 1.0 : 0.0;
    const double logit = kSynthIntercept + us.bias + it.bias +
                         config.text_signal_strength * kSynthAffinity * (match - base_shift);
    const double p = 1.0 / (1.0 + std::exp(-logit));
    const bool click = unit(rng) < p;
    const int rating = click ? 4 + static_cast<int>(unit(rng) < 0.5)
                             : 1 + std::uniform_int_distribution<int>(0, 2)(rng);
    InteractionRecord r;
    r.user_id = us.id;
    r.item_id = it.id;
    r.rating = rating;
    r.timestamp = kSynthEpoch + static_cast<std::int64_t>(k) * 60;
    r.item_title = it.title;
    r.item_category = it.category;
    r.user_attributes = us.attributes;
    c.records.push_back(std::move(r));
    c.click_probability.push_back(p);
  }
  return c;
}

void write_answer_key(const std::filesystem::path& path, const SynthCorpus& c) {
  json items = json::array();
  for (const auto& it : c.items) {
    items.push_back({{"item_id", it.id},
                     {"latent", it.latent},
                     {"latent_word", synth_latent_words()[static_cast<size_t>(it.latent)]},
                     {"bias", it.bias}});
  }
  json users = json::array();
  for (const auto& u : c.users) {
    users.push_back({{"user_id", u.id}, {"preference", u.preference}, {"bias", u.bias}});
  }
  json probs = json::array();
  for (size_t k = 0; k < c.records.size(); ++k) {
    probs.push_back({{"timestamp", c.records[k].timestamp}, {"click_probability", c.click_probability[k]}});
  }
  json key = {{"config",
               {{"n_users", c.config.n_users},
                {"n_items", c.config.n_items},
                {"n_latent_attrs", c.config.n_latent_attrs},
                {"samples", c.config.samples},
                {"text_signal_strength", c.config.text_signal_strength},
                {"seed", c.config.seed}}},
              {"intercept", kSynthIntercept},
              {"affinity", kSynthAffinity},
              {"items", items},
              {"users", users},
              {"records", probs}};
  write_file_atomic(path, key.dump(1) + "\n");
}

std::vector<double> bayes_scores(const SynthCorpus& corpus, const std::vector<CtrSample>& samples) {
  std::unordered_map<std::int64_t, double> by_time;
  by_time.reserve(corpus.records.size());
  for (size_t k = 0; k < corpus.records.size(); ++k) {
    by_time.emplace(corpus.records[k].timestamp, corpus.click_probability[k]);
  }
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    auto it = by_time.find(s.timestamp);
    if (it == by_time.end()) {
      throw NotFoundError("sample at timestamp " + std::to_string(s.timestamp) + " is not in the corpus");
    }
    out.push_back(it->second);
  }
  return out;
}

}  // namespace laser
