// laser: prepare -> precompute -> train -> evaluate / bench / curve.
//
// Exit codes: 0 ok, 1 internal error, 2 bad input, 3 artifact mismatch,
// 4 training divergence, 5 missing artifact.

#include "cli.hpp"

#include "laser/crm.hpp"
#include "laser/dataio.hpp"
#include "laser/error.hpp"
#include "laser/evalbench.hpp"
#include "laser/io_util.hpp"
#include "laser/knowledge.hpp"
#include "laser/lmcore.hpp"
#include "laser/metrics.hpp"
#include "laser/prompts.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace laser;

namespace {

enum Exit { kOk = 0, kInternal = 1, kInput = 2, kMismatch = 3, kDivergence = 4, kMissing = 5 };

// ---- run config -------------------------------------------------------------------

// The defaults double as the schema: a config file may only set keys present here,
// with a value of the same kind.
json default_config() {
  return json::parse(R"({
    "seed": 0,
    "out": "runs/laser",
    "data": {
      "format": "canonical_tsv",
      "input": "",
      "dataset": "",
      "split_dir": "",
      "domain": "movies",
      "history_length": 30,
      "threshold": 3,
      "ratios": [0.8, 0.1, 0.1],
      "synth": {"n_users": 500, "n_items": 2000, "n_latent_attrs": 4, "samples": 50000,
                "text_signal_strength": 1.0}
    },
    "prompts": {"template_dir": ""},
    "lm": {"checkpoint": "", "layers": 2, "hidden_dim": 64, "heads": 4, "context_limit": 512,
           "ffn_multiplier": 4, "steps": 500, "batch_size": 16, "learning_rate": 0.2},
    "knowledge": {"user_cache": "", "item_cache": "", "experts": 4, "hidden_width": 16,
                  "output_dim": 16, "threads": 0},
    "crm": {"model": "target_attention", "embedding_dim": 16, "hidden": [200, 80],
            "retrieval": "category_match", "retrieval_size": 20, "learning_rate": 0.001,
            "epochs": 10, "patience": 3, "batch_size": 128},
    "train": {"mode": "crm_only", "fraction": 1.0},
    "eval": {"mode": "crm_only", "max_samples": 0, "bench_models": ["crm_only", "llm_crm", "llm_only"],
             "bench_samples": 1024, "batch_size": 128, "warmup_batches": 3, "repeats": 5,
             "fractions": [0.1, 0.5, 1.0], "seeds": [0, 1, 2], "models": ["crm_only", "llm_crm"]}
  })");
}

bool same_kind(const json& def, const json& v) {
  if (def.is_number_integer()) return v.is_number_integer() && !(def.is_number_unsigned() && v.get<long long>() < 0);
  if (def.is_number()) return v.is_number();
  return def.type() == v.type();
}

void merge_strict(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw InvalidArgument("config: '" + path + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string name = path.empty() ? key : path + "." + key;
    auto it = base.find(key);
    if (it == base.end()) throw InvalidArgument("config: unknown key '" + name + "'");
    if (it->is_object()) {
      merge_strict(*it, value, name);
    } else {
      if (!same_kind(*it, value)) {
        throw InvalidArgument("config: '" + name + "' expects a " + std::string(it->type_name()) +
                              ", got " + value.dump());
      }
      *it = value;
    }
  }
}

// Dotted path -> value. Flags land here after the config file.
void set_path(json& cfg, const std::string& path, json value) {
  json patch = std::move(value);
  std::string rest = path;
  std::vector<std::string> parts;
  for (size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
    parts.push_back(rest.substr(0, dot));
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_strict(cfg, patch, "");
}

struct Paths {
  fs::path out, split, lm, user_cache, item_cache;
  fs::path ckpt(const std::string& mode) const { return out / (mode + ".ckpt"); }
};

fs::path or_default(const json& v, const fs::path& fallback) {
  const auto s = v.get<std::string>();
  return s.empty() ? fallback : fs::path(s);
}

// Fills the derived paths in so the echoed config is self-contained.
Paths resolve_paths(json& cfg) {
  Paths p;
  p.out = cfg["out"].get<std::string>();
  p.split = or_default(cfg["data"]["split_dir"], p.out / "split");
  p.lm = or_default(cfg["lm"]["checkpoint"], p.out / "lm.ckpt");
  p.user_cache = or_default(cfg["knowledge"]["user_cache"], p.out / "cache" / "user.kv");
  p.item_cache = or_default(cfg["knowledge"]["item_cache"], p.out / "cache" / "item.kv");
  cfg["data"]["split_dir"] = p.split.string();
  cfg["lm"]["checkpoint"] = p.lm.string();
  cfg["knowledge"]["user_cache"] = p.user_cache.string();
  cfg["knowledge"]["item_cache"] = p.item_cache.string();
  return p;
}

void echo_config(const json& cfg, const Paths& paths, const std::string& command) {
  fs::create_directories(paths.out);
  write_file_atomic(paths.out / (command + ".config.json"), cfg.dump(2) + "\n");
}

void require_artifact(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw NotFoundError("missing artifact " + p.string() + " (" + hint + ")");
}

std::uint64_t seed_of(const json& cfg) { return cfg["seed"].get<std::uint64_t>(); }

ReferenceLmConfig lm_config(const json& cfg) {
  const auto& l = cfg["lm"];
  ReferenceLmConfig c;
  c.layers = l["layers"];
  c.hidden_dim = l["hidden_dim"];
  c.heads = l["heads"];
  c.context_limit = l["context_limit"];
  c.ffn_multiplier = l["ffn_multiplier"];
  c.seed = seed_of(cfg);
  return c;
}

CrmConfig crm_config(const json& cfg, const Vocabulary& vocab, bool knowledge) {
  const auto& c = cfg["crm"];
  CrmConfig out;
  out.model = parse_crm_kind(c["model"].get<std::string>());
  out.embedding_dim = c["embedding_dim"];
  out.hidden = c["hidden"].get<std::vector<int>>();
  out.retrieval = parse_retrieval_mode(c["retrieval"].get<std::string>());
  out.retrieval_size = c["retrieval_size"];
  out.learning_rate = c["learning_rate"];
  out.epochs = c["epochs"];
  out.patience = c["patience"];
  out.batch_size = c["batch_size"];
  out.fields = field_specs(vocab);
  out.use_knowledge = knowledge;
  out.knowledge_dim = cfg["knowledge"]["output_dim"];
  out.seed = seed_of(cfg);
  out.validate();
  return out;
}

MoeConfig adapter_shape(const json& cfg) {
  MoeConfig m;
  m.experts = cfg["knowledge"]["experts"];
  m.hidden_width = cfg["knowledge"]["hidden_width"];
  m.output_dim = cfg["knowledge"]["output_dim"];
  return m;
}

TemplateSet templates_for(const json& cfg, const SplitManifest& manifest) {
  const auto dir = cfg["prompts"]["template_dir"].get<std::string>();
  return dir.empty() ? TemplateSet::defaults(parse_domain(manifest.domain)) : TemplateSet::load(dir);
}

LoadedSplit load_prepared(const Paths& p) {
  require_artifact(p.split / "manifest.json", "run `laser prepare` first");
  return load_split(p.split);
}

struct OpenCaches {
  KnowledgeCache user, item;
  KnowledgeInputs inputs() const { return {&user, &item}; }
};

// Caches must come from one LM (same width) and the current knowledge templates.
OpenCaches open_caches(const Paths& p, const TemplateSet& templates) {
  require_artifact(p.user_cache, "run `laser precompute` first");
  require_artifact(p.item_cache, "run `laser precompute` first");
  OpenCaches c{KnowledgeCache::open(p.user_cache), KnowledgeCache::open(p.item_cache)};
  if (c.user.side() != Side::user || c.item.side() != Side::item) {
    throw MismatchError("cache sides are swapped: " + p.user_cache.string() + ", " + p.item_cache.string());
  }
  if (c.user.dim() != c.item.dim()) {
    throw MismatchError("user cache dim " + std::to_string(c.user.dim()) + " != item cache dim " +
                        std::to_string(c.item.dim()));
  }
  c.user.check_template(templates.version());
  c.item.check_template(templates.version());
  if (fs::exists(p.lm)) {
    const auto lm = ReferenceLm::load(p.lm);
    if (lm.hidden_dim() != c.user.dim()) {
      throw MismatchError("LM checkpoint hidden_dim " + std::to_string(lm.hidden_dim()) +
                          " does not match cache dim " + std::to_string(c.user.dim()));
    }
  }
  return c;
}

bool is_crm_mode(const std::string& mode) { return mode == "crm_only" || mode == "llm_crm"; }

void check_mode(const std::string& mode) {
  if (mode != "llm_only" && mode != "llm_crm" && mode != "crm_only") {
    throw InvalidArgument("unknown mode '" + mode + "' (expected llm_only, llm_crm or crm_only)");
  }
}

void log(const std::string& msg) { std::cerr << "laser: " << msg << "\n"; }

std::vector<std::string> sample_prompts(const std::vector<CtrSample>& samples, const TemplateSet& t) {
  std::vector<std::string> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(render_sample_prompt(s, t));
  return out;
}

std::vector<CtrSample> capped(const std::vector<CtrSample>& v, long long cap) {
  if (cap <= 0 || static_cast<size_t>(cap) >= v.size()) return v;
  return {v.begin(), v.begin() + cap};
}

// ---- commands ------------------------------------------------------------------------

int cmd_prepare(json& cfg, const Paths& p) {
  const auto& d = cfg["data"];
  const auto format = d["format"].get<std::string>();
  const auto ratios_v = d["ratios"].get<std::vector<double>>();
  if (ratios_v.size() != 3) throw InvalidArgument("config: data.ratios needs three entries");
  const SplitRatios ratios{ratios_v[0], ratios_v[1], ratios_v[2]};
  const int k = d["history_length"], threshold = d["threshold"];

  SplitManifest manifest;
  manifest.seed = seed_of(cfg);
  manifest.ratios = ratios;
  manifest.threshold = threshold;
  manifest.history_length = k;
  manifest.domain = d["domain"].get<std::string>();
  parse_domain(manifest.domain);
  manifest.dataset = d["dataset"].get<std::string>();

  std::vector<InteractionRecord> records;
  if (format == "synthetic") {
    SynthConfig sc;
    const auto& s = d["synth"];
    sc.n_users = s["n_users"];
    sc.n_items = s["n_items"];
    sc.n_latent_attrs = s["n_latent_attrs"];
    sc.samples = s["samples"];
    sc.text_signal_strength = s["text_signal_strength"];
    sc.seed = seed_of(cfg);
    auto corpus = synth_generate(sc);
    fs::create_directories(p.out);
    write_answer_key(p.out / "answer_key.json", corpus);
    records = std::move(corpus.records);
    if (manifest.dataset.empty()) manifest.dataset = "synthetic";
  } else {
    const auto input = d["input"].get<std::string>();
    if (input.empty()) throw InvalidArgument("prepare: no input (--in or data.input)");
    auto parsed = parse_interactions(input, parse_input_format(format));
    if (parsed.malformed_count) {
      std::string lines;
      for (auto l : parsed.malformed_lines) lines += " " + std::to_string(l);
      log(input + ": skipped " + std::to_string(parsed.malformed_count) + " malformed line(s), first at line(s)" +
          lines);
    }
    records = std::move(parsed.records);
    if (manifest.dataset.empty()) manifest.dataset = fs::path(input).filename().string();
  }
  auto split = split_chronological(build_samples(records, k, threshold), ratios, manifest.seed);
  write_split(p.split, split, records, manifest);
  log("prepared " + std::to_string(split.train.size()) + "/" + std::to_string(split.validation.size()) + "/" +
      std::to_string(split.test.size()) + " samples in " + p.split.string());
  return kOk;
}

int cmd_precompute(json& cfg, const Paths& p) {
  const auto loaded = load_prepared(p);
  const auto& split = loaded.split;
  const auto templates = templates_for(cfg, loaded.manifest);
  require_artifact(p.lm, "run `laser train --mode llm_only` first");
  const auto lm = ReferenceLm::load(p.lm);
  const int want = cfg["lm"]["hidden_dim"];
  if (lm.hidden_dim() != want) {
    throw MismatchError("LM checkpoint " + p.lm.string() + " has hidden_dim " + std::to_string(lm.hidden_dim()) +
                        " but the config expects " + std::to_string(want));
  }
  for (const auto* path : {&p.user_cache, &p.item_cache}) {
    if (!fs::exists(*path)) continue;
    const auto old = KnowledgeCache::open(*path);
    if (old.dim() != lm.hidden_dim()) {
      throw MismatchError("existing cache " + path->string() + " has dim " + std::to_string(old.dim()) +
                          " but the LM checkpoint has hidden_dim " + std::to_string(lm.hidden_dim()));
    }
  }

  const auto profiles = ProfileBook::build(split.train, {&split.validation, &split.test});
  std::vector<std::pair<std::int64_t, std::string>> users, items;
  for (const auto& [id, profile] : profiles.profiles()) users.emplace_back(id, render_user_prompt(profile, templates));
  std::set<std::int64_t> seen;
  for (const auto* part : {&split.train, &split.validation, &split.test}) {
    for (const auto& s : *part) {
      if (seen.insert(s.target_item_id).second) {
        items.emplace_back(s.target_item_id, render_item_prompt(s.target_title, s.target_category, templates));
      }
    }
  }
  const unsigned threads = cfg["knowledge"]["threads"];
  fs::create_directories(p.user_cache.parent_path());
  fs::create_directories(p.item_cache.parent_path());
  int status = kOk;
  for (auto [side, prompts, path] : {std::tuple{Side::user, &users, &p.user_cache}, std::tuple{Side::item, &items, &p.item_cache}}) {
    auto res = precompute_side(lm, *prompts, side, templates.version(), threads);
    for (const auto& f : res.failures) {
      log(std::string(to_string(side)) + " " + std::to_string(f.entity_id) + ": " + f.message);
    }
    if (!res.failures.empty()) status = kInput;
    KnowledgeCache::write(res.vectors, *path);
    log("wrote " + std::to_string(res.vectors.size()) + " " + std::string(to_string(side)) + " vectors to " +
        path->string());
  }
  return status;
}

int train_llm_only(const json& cfg, const Paths& p, const LoadedSplit& loaded, const DatasetSplit& sub) {
  const auto templates = templates_for(cfg, loaded.manifest);
  // Vocabulary: every prompt the model will see (text only, no labels).
  std::vector<std::string> corpus;
  const auto& full = loaded.split;
  for (const auto* part : {&full.train, &full.validation, &full.test}) {
    auto ps = sample_prompts(*part, templates);
    corpus.insert(corpus.end(), std::make_move_iterator(ps.begin()), std::make_move_iterator(ps.end()));
  }
  const auto profiles = ProfileBook::build(full.train, {&full.validation, &full.test});
  for (const auto& [id, profile] : profiles.profiles()) corpus.push_back(render_user_prompt(profile, templates));
  for (const auto* part : {&full.train, &full.validation, &full.test}) {
    for (const auto& s : *part) corpus.push_back(render_item_prompt(s.target_title, s.target_category, templates));
  }
  auto lm = ReferenceLm::create(lm_config(cfg), corpus);
  corpus.clear();

  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& s : sub.train) pairs.emplace_back(render_sample_prompt(s, templates), label_to_answer(s.label));
  TuneConfig tc;
  tc.steps = cfg["lm"]["steps"];
  tc.batch_size = cfg["lm"]["batch_size"];
  tc.learning_rate = cfg["lm"]["learning_rate"];
  tc.seed = seed_of(cfg);
  const auto res = instruction_tune(lm, pairs, tc);
  lm.save(p.lm);
  std::string lines;
  for (size_t i = 0; i < res.loss_trace.size(); ++i) {
    lines += json{{"step", i + 1}, {"loss", res.loss_trace[i]}}.dump() + "\n";
  }
  write_file_atomic(p.out / "llm_only.log.jsonl", lines);
  log("tuned LM for " + std::to_string(res.loss_trace.size()) + " steps -> " + p.lm.string());
  return kOk;
}

int cmd_train(json& cfg, const Paths& p) {
  const auto mode = cfg["train"]["mode"].get<std::string>();
  check_mode(mode);
  const double fraction = cfg["train"]["fraction"];
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw InvalidArgument("--fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  const auto loaded = load_prepared(p);
  const auto sub = subsample_train(loaded.split, fraction, seed_of(cfg));
  if (mode == "llm_only") return train_llm_only(cfg, p, loaded, sub);

  const bool know = mode == "llm_crm";
  const auto crm = crm_config(cfg, sub.vocab, know);
  std::optional<OpenCaches> caches;
  if (know) caches.emplace(open_caches(p, templates_for(cfg, loaded.manifest)));
  auto res = know ? train_crm(crm, sub, caches->inputs(),
                              make_adapters(adapter_shape(cfg), caches->inputs(), crm.knowledge_dim, crm.seed))
                  : train_crm(crm, sub);
  save_crm(p.ckpt(mode), res.model, res.user_adapter ? &*res.user_adapter : nullptr,
           res.item_adapter ? &*res.item_adapter : nullptr);
  std::string lines;
  for (const auto& e : res.log) {
    json j{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_logloss", e.val_logloss}};
    j["val_auc"] = std::isnan(e.val_auc) ? json(nullptr) : json(e.val_auc);
    lines += j.dump() + "\n";
  }
  write_file_atomic(p.out / (mode + ".log.jsonl"), lines);
  log("trained " + mode + " (best epoch " + std::to_string(res.best_epoch) + ") -> " + p.ckpt(mode).string());
  return kOk;
}

// A loaded scorer for one mode, over a fixed list of test samples.
struct Scorer {
  std::string mode;
  std::optional<ReferenceLm> lm;
  std::vector<std::string> prompts;
  std::optional<CrmCheckpoint> crm;
  std::vector<EncodedSample> encoded;
  std::vector<const EncodedSample*> ptrs;
  const OpenCaches* caches = nullptr;

  void run(size_t begin, size_t end, std::vector<double>* out) const {
    if (lm) {
      for (size_t i = begin; i < end; ++i) {
        const double pr = score_click(*lm, prompts[i]).probability;
        if (out) out->push_back(pr);
      }
      return;
    }
    std::span<const EncodedSample* const> batch(ptrs.data() + begin, end - begin);
    auto pr = predict_batch(crm->model, batch, crm->user_adapter ? &*crm->user_adapter : nullptr,
                            crm->item_adapter ? &*crm->item_adapter : nullptr,
                            caches ? caches->inputs() : KnowledgeInputs{});
    if (out) out->insert(out->end(), pr.begin(), pr.end());
  }
};

Scorer load_scorer(const std::string& mode, const json& cfg, const Paths& p, const LoadedSplit& loaded,
                   const std::vector<CtrSample>& samples, std::optional<OpenCaches>& caches) {
  check_mode(mode);
  Scorer s;
  s.mode = mode;
  const auto templates = templates_for(cfg, loaded.manifest);
  if (mode == "llm_only") {
    require_artifact(p.lm, "run `laser train --mode llm_only` first");
    s.lm.emplace(ReferenceLm::load(p.lm));
    s.prompts = sample_prompts(samples, templates);
    return s;
  }
  require_artifact(p.ckpt(mode), "run `laser train --mode " + mode + "` first");
  s.crm.emplace(load_crm(p.ckpt(mode)));
  if (s.crm->model.config().use_knowledge != (mode == "llm_crm")) {
    throw MismatchError(p.ckpt(mode).string() + " was not trained in mode " + mode);
  }
  if (mode == "llm_crm") {
    if (!caches) caches.emplace(open_caches(p, templates));
    check_cache_coverage(samples, caches->inputs());
    s.caches = &*caches;
  }
  s.encoded = encode_for_crm(samples, s.crm->model.config());
  for (const auto& e : s.encoded) s.ptrs.push_back(&e);
  return s;
}

std::vector<double> score_all(const Scorer& s, size_t n, size_t batch) {
  std::vector<double> out;
  out.reserve(n);
  for (size_t i = 0; i < n; i += batch) s.run(i, std::min(n, i + batch), &out);
  return out;
}

std::vector<int> labels_of(const std::vector<CtrSample>& samples) {
  std::vector<int> y;
  for (const auto& s : samples) y.push_back(s.label);
  return y;
}

int cmd_evaluate(json& cfg, const Paths& p) {
  const auto mode = cfg["eval"]["mode"].get<std::string>();
  const auto loaded = load_prepared(p);
  const auto test = capped(loaded.split.test, cfg["eval"]["max_samples"].get<long long>());
  std::optional<OpenCaches> caches;
  const auto scorer = load_scorer(mode, cfg, p, loaded, test, caches);
  const auto scores = score_all(scorer, test.size(), cfg["eval"]["batch_size"].get<size_t>());
  auto report = evaluate_scores(scores, labels_of(test),
                                {mode, cfg["train"]["fraction"], seed_of(cfg), loaded.manifest.dataset, ""});
  write_reports_jsonl(p.out / ("eval_" + mode + ".jsonl"), {report});
  write_reports_csv(p.out / ("eval_" + mode + ".csv"), {report});
  std::cout << report_to_json(report) << "\n";
  return kOk;
}

int cmd_bench(json& cfg, const Paths& p) {
  const auto loaded = load_prepared(p);
  const auto& e = cfg["eval"];
  const auto samples = capped(loaded.split.test, e["bench_samples"].get<long long>());
  const auto models = e["bench_models"].get<std::vector<std::string>>();
  if (models.empty()) throw InvalidArgument("bench: no models");
  std::optional<OpenCaches> caches;
  std::vector<Scorer> scorers;
  for (const auto& m : models) scorers.push_back(load_scorer(m, cfg, p, loaded, samples, caches));

  const size_t batch = e["batch_size"];
  const int warmup = e["warmup_batches"], repeats = e["repeats"];
  json out{{"n_samples", samples.size()}, {"batch_size", batch}, {"warmup_batches", warmup}, {"repeats", repeats},
           {"models", json::object()}};
  std::vector<MetricReport> reports;
  std::map<std::string, double> mean;
  for (const auto& s : scorers) {
    ad::NoGradGuard no_grad;
    auto lat = bench_latency(samples.size(), [&](size_t b, size_t en) { s.run(b, en, nullptr); }, batch, warmup,
                             repeats);
    mean[s.mode] = lat.latency_mean_s;
    out["models"][s.mode] = {{"latency_mean_s", lat.latency_mean_s}, {"per_repeat_s", lat.per_repeat_s}};
    auto report = evaluate_scores(score_all(s, samples.size(), batch), labels_of(samples),
                                  {s.mode, cfg["train"]["fraction"], seed_of(cfg), loaded.manifest.dataset, ""});
    report.latency_mean_s = lat.latency_mean_s;
    reports.push_back(report);
    log(s.mode + ": " + std::to_string(lat.latency_mean_s) + " s/sample");
  }
  if (mean.count("crm_only")) {
    json ratios = json::object();
    for (const auto& [m, v] : mean) {
      if (m != "crm_only") ratios[m + "_over_crm_only"] = v / mean["crm_only"];
    }
    out["ratios"] = ratios;
  }
  write_file_atomic(p.out / "bench.json", out.dump(2) + "\n");
  write_reports_jsonl(p.out / "bench.jsonl", reports);
  write_reports_csv(p.out / "bench.csv", reports);
  std::cout << out.dump(2) << "\n";
  return kOk;
}

int cmd_curve(json& cfg, const Paths& p) {
  const auto loaded = load_prepared(p);
  const auto& e = cfg["eval"];
  CurveSpec spec;
  spec.fractions = e["fractions"].get<std::vector<double>>();
  spec.seeds = e["seeds"].get<std::vector<std::uint64_t>>();
  bool any_knowledge = false;
  for (const auto& name : e["models"].get<std::vector<std::string>>()) {
    if (!is_crm_mode(name)) throw InvalidArgument("curve: model '" + name + "' is not a CRM mode");
    const bool know = name == "llm_crm";
    any_knowledge |= know;
    spec.models.push_back({name, crm_config(cfg, loaded.split.vocab, know), adapter_shape(cfg)});
  }
  spec.validate();
  std::optional<OpenCaches> caches;
  if (any_knowledge) caches.emplace(open_caches(p, templates_for(cfg, loaded.manifest)));
  auto res = run_curve(spec, loaded.split, caches ? std::optional(caches->inputs()) : std::nullopt,
                       loaded.manifest.dataset, [](const MetricReport& r) {
                         log(r.run_meta.model_name + " fraction " + std::to_string(r.run_meta.fraction) + " seed " +
                             std::to_string(r.run_meta.seed) + ": auc " + std::to_string(r.auc));
                       });
  if (!res.test_hash_constant) throw Error("curve: test set changed between cells");
  write_curve_long_csv(p.out / "curve.csv", res);
  write_curve_summary_csv(p.out / "curve_summary.csv", res);
  write_reports_jsonl(p.out / "curve.jsonl", res.rows);
  write_file_atomic(p.out / "curve_test_hash.txt", res.test_hash + "\n");
  std::cout << read_file(p.out / "curve_summary.csv");
  return kOk;
}

// ---- wiring -----------------------------------------------------------------------

struct FlagBinding {
  CLI::Option* option;
  std::string path;
  std::function<json()> value;
};

template <class T>
constexpr bool is_vector = false;
template <class T>
constexpr bool is_vector<std::vector<T>> = true;

template <class T>
void bind_flag(std::vector<FlagBinding>& flags, CLI::App* app, const std::string& name, const std::string& path,
               const std::string& help) {
  auto storage = std::make_shared<T>();
  auto* opt = app->add_option(name, *storage, help + " [" + path + "]");
  if constexpr (is_vector<T>) opt->delimiter(',');
  flags.push_back({opt, path, [storage] { return json(*storage); }});
}

}  // namespace

int laser::cli::run(int argc, char** argv) {
  CLI::App app{"laser: LLM-augmented CTR prediction at desk scale"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<FlagBinding> flags;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config (strict)");
    bind_flag<std::string>(flags, sub, "--out", "out", "output directory");
    bind_flag<std::uint64_t>(flags, sub, "--seed", "seed", "global seed");
    bind_flag<std::string>(flags, sub, "--split", "data.split_dir", "prepared split directory");
    bind_flag<std::string>(flags, sub, "--templates", "prompts.template_dir", "prompt template directory");
  };
  auto* prepare = app.add_subcommand("prepare", "parse a log (or synthesize one) and split it");
  auto* precompute = app.add_subcommand("precompute", "write user/item knowledge caches");
  auto* train = app.add_subcommand("train", "train llm_only, llm_crm or crm_only");
  auto* evaluate = app.add_subcommand("evaluate", "AUC / LogLoss on the test split");
  auto* bench = app.add_subcommand("bench", "per-sample inference latency");
  auto* curve = app.add_subcommand("curve", "sample-efficiency curve");
  for (auto* sub : {prepare, precompute, train, evaluate, bench, curve}) common(sub);

  bind_flag<std::string>(flags, prepare, "--format", "data.format",
                    "movielens_dat | bookcrossing_csv | canonical_tsv | synthetic");
  bind_flag<std::string>(flags, prepare, "--in", "data.input", "input file or directory");
  bind_flag<std::string>(flags, prepare, "--dataset", "data.dataset", "dataset name for reports");
  bind_flag<std::string>(flags, prepare, "--domain", "data.domain", "movies | books");
  bind_flag<int>(flags, prepare, "--history-length", "data.history_length", "history entries per sample");
  bind_flag<int>(flags, prepare, "--threshold", "data.threshold", "label = rating > threshold");
  bind_flag<int>(flags, prepare, "--samples", "data.synth.samples", "synthetic CTR samples");

  bind_flag<std::string>(flags, precompute, "--lm", "lm.checkpoint", "LM checkpoint");
  bind_flag<int>(flags, precompute, "--threads", "knowledge.threads", "worker threads (0 = all cores)");

  bind_flag<std::string>(flags, train, "--mode", "train.mode", "llm_only | llm_crm | crm_only");
  bind_flag<double>(flags, train, "--fraction", "train.fraction", "training-set fraction in (0, 1]");
  bind_flag<std::string>(flags, train, "--lm", "lm.checkpoint", "LM checkpoint");
  bind_flag<int>(flags, train, "--epochs", "crm.epochs", "CRM epochs");
  bind_flag<int>(flags, train, "--steps", "lm.steps", "instruction-tuning steps");
  bind_flag<std::string>(flags, train, "--model", "crm.model", "mlp | target_attention");

  bind_flag<std::string>(flags, evaluate, "--mode", "eval.mode", "llm_only | llm_crm | crm_only");
  bind_flag<long long>(flags, evaluate, "--max-samples", "eval.max_samples", "score at most N test samples (0 = all)");
  bind_flag<std::string>(flags, evaluate, "--lm", "lm.checkpoint", "LM checkpoint");

  bind_flag<std::vector<std::string>>(flags, bench, "--models", "eval.bench_models", "modes to time");
  bind_flag<long long>(flags, bench, "--samples", "eval.bench_samples", "test samples to time (0 = all)");
  bind_flag<int>(flags, bench, "--repeats", "eval.repeats", "timed passes");

  bind_flag<std::vector<double>>(flags, curve, "--fractions", "eval.fractions", "training fractions");
  bind_flag<std::vector<std::uint64_t>>(flags, curve, "--seeds", "eval.seeds", "seeds per fraction");
  bind_flag<std::vector<std::string>>(flags, curve, "--models", "eval.models", "crm_only and/or llm_crm");
  bind_flag<int>(flags, curve, "--epochs", "crm.epochs", "CRM epochs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    json cfg = default_config();
    if (!config_path.empty()) {
      json file;
      try {
        file = json::parse(read_file(config_path));
      } catch (const json::parse_error& e) {
        throw InvalidArgument(config_path + ": " + e.what());
      }
      merge_strict(cfg, file, "");
    }
    // Precedence: flags > LASER_OUT > config file > defaults.
    if (const char* env = std::getenv("LASER_OUT"); env && *env) cfg["out"] = env;
    for (const auto& f : flags) {
      if (f.option->count() > 0) {
        set_path(cfg, f.path, f.value());
      }
    }
    Paths paths = resolve_paths(cfg);
    echo_config(cfg, paths, command);

    if (command == "prepare") return cmd_prepare(cfg, paths);
    if (command == "precompute") return cmd_precompute(cfg, paths);
    if (command == "train") return cmd_train(cfg, paths);
    if (command == "evaluate") return cmd_evaluate(cfg, paths);
    if (command == "bench") return cmd_bench(cfg, paths);
    return cmd_curve(cfg, paths);
  } catch (const MismatchError& e) {
    std::cerr << "laser " << command << ": artifact mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const DivergenceError& e) {
    std::cerr << "laser " << command << ": training diverged at step " << e.step() << ": " << e.what() << "\n";
    return kDivergence;
  } catch (const NotFoundError& e) {
    std::cerr << "laser " << command << ": " << e.what() << "\n";
    return kMissing;
  } catch (const InvalidArgument& e) {
    std::cerr << "laser " << command << ": " << e.what() << "\n";
    return kInput;
  } catch (const FormatError& e) {
    std::cerr << "laser " << command << ": " << e.what() << "\n";
    return kInput;
  } catch (const IoError& e) {
    std::cerr << "laser " << command << ": " << e.what() << "\n";
    return kInput;
  } catch (const UndefinedMetric& e) {
    std::cerr << "laser " << command << ": " << e.what() << "\n";
    return kInput;
  } catch (const UnparseableAnswer& e) {
    std::cerr << "laser " << command << ": " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "laser " << command << ": internal error: " << e.what() << "\n";
    return kInternal;
  }
}
