#include "laser/evalbench.hpp"

#include "laser/error.hpp"
#include "laser/io_util.hpp"

#include "table1.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <chrono>
#include <random>
#include <thread>

using namespace laser;

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, pairs = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    for (size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / pairs;
}

void sleep_runner(std::chrono::microseconds per_batch) { std::this_thread::sleep_for(per_batch); }

DatasetSplit small_synth_split(std::uint64_t seed = 0) {
  SynthConfig sc;
  sc.n_users = 40;
  sc.n_items = 80;
  sc.samples = 3000;
  sc.seed = seed;
  auto corpus = synth_generate(sc);
  return split_chronological(build_samples(corpus.records), {0.8, 0.1, 0.1}, seed);
}

CrmConfig quick_crm() {
  CrmConfig c;
  c.model = CrmKind::mlp;
  c.embedding_dim = 4;
  c.hidden = {8};
  c.epochs = 2;
  c.retrieval_size = 5;
  return c;
}

}  // namespace

TEST_CASE("auc: examples, pairwise oracle and invariances") {
  std::vector<double> s = {0.9, 0.1};
  std::vector<int> y = {1, 0};
  CHECK(auc(s, y) == 1.0);
  std::vector<double> flat(6, 0.3);
  std::vector<int> bal = {1, 0, 1, 0, 1, 0};
  CHECK(auc(flat, bal) == 0.5);
  std::vector<int> one_class = {1, 1};
  CHECK_THROWS_AS(auc(s, one_class), UndefinedMetric);

  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<double> r(200);
  std::vector<int> l(200);
  for (size_t i = 0; i < 200; ++i) {
    l[i] = coin(rng);
    r[i] = std::round((nd(rng) + l[i]) * 10) / 10;  // coarse: forces ties
  }
  CHECK(std::abs(auc(r, l) - pairwise_auc(r, l)) < 1e-9);

  std::vector<double> tie_free(200), e(200), affine(200), neg(200);
  for (size_t i = 0; i < 200; ++i) {
    tie_free[i] = nd(rng) + 0.5 * l[i];
    e[i] = std::exp(tie_free[i]);
    affine[i] = 3 * tie_free[i] - 7;
    neg[i] = -tie_free[i];
  }
  const double base = auc(tie_free, l);
  CHECK(auc(e, l) == doctest::Approx(base).epsilon(1e-15));
  CHECK(auc(affine, l) == doctest::Approx(base).epsilon(1e-15));
  CHECK(base + auc(neg, l) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("logloss examples") {
  std::vector<int> pos = {1}, negl = {0};
  std::vector<double> half = {0.5}, one = {1.0}, zero = {0.0};
  CHECK(std::abs(logloss(half, pos) - 0.6931471805599453) < 1e-7);
  CHECK(logloss(one, pos) == doctest::Approx(1.00000005e-7).epsilon(1e-6));
  CHECK(logloss(zero, negl) == logloss(one, pos));
  std::vector<double> two = {0.5, 0.5};
  CHECK_THROWS_AS(logloss(two, pos), InvalidArgument);
}

TEST_CASE("rel_improvement reproduces the published table") {
  CHECK(format_percent(rel_improvement(0.7575, 0.7496)) == "1.05%");
  CHECK(format_percent(rel_improvement(0.8033, 0.7992)) == "0.51%");
  CHECK(format_percent(rel_improvement(0.7, 0.7)) == "0.00%");
  for (const auto& cell : testing::kTable1) {
    CAPTURE(cell.model);
    CAPTURE(cell.dataset);
    CHECK(format_percent(rel_improvement(cell.laser_auc, cell.baseline_auc)) == cell.printed);
  }
}

TEST_CASE("latency harness: sleep oracle, warmup exclusion, doubling") {
  const std::size_t n = 128 * 20;
  auto one_ms = bench_latency(n, [](size_t, size_t) { sleep_runner(std::chrono::microseconds(1000)); });
  CHECK(one_ms.per_repeat_s.size() == 5);
  CHECK(one_ms.latency_mean_s == doctest::Approx(1e-3 / 128).epsilon(0.2));

  auto two_ms = bench_latency(n, [](size_t, size_t) { sleep_runner(std::chrono::microseconds(2000)); });
  CHECK(two_ms.latency_mean_s / one_ms.latency_mean_s == doctest::Approx(2.0).epsilon(0.1));

  int calls = 0;
  auto slow_start = bench_latency(n, [&](size_t, size_t) {
    sleep_runner(std::chrono::microseconds(++calls <= 3 ? 50000 : 1000));
  });
  CHECK(slow_start.latency_mean_s == doctest::Approx(1e-3 / 128).epsilon(0.2));

  CHECK_THROWS_AS(bench_latency(100, [](size_t, size_t) {}), InvalidArgument);
}

TEST_CASE("synthetic generator: determinism, zero signal, Bayes oracle") {
  SynthConfig sc;
  sc.n_users = 30;
  sc.n_items = 50;
  sc.samples = 500;
  sc.seed = 4;
  auto a = synth_generate(sc), b = synth_generate(sc);
  CHECK(a.records == b.records);
  CHECK(a.records.size() == 530u);
  for (const auto& it : a.items) {
    CHECK(it.title.find(synth_latent_words()[static_cast<size_t>(it.latent)]) != std::string::npos);
  }

  // Zero signal: the click probability is a function of the two ID biases only.
  sc.text_signal_strength = 0.0;
  auto z = synth_generate(sc);
  for (size_t k = 0; k < z.records.size(); ++k) {
    const auto& u = z.users[static_cast<size_t>(z.records[k].user_id - 1)];
    const auto& it = z.items[static_cast<size_t>(z.records[k].item_id - 1)];
    CHECK(z.click_probability[k] == doctest::Approx(1.0 / (1.0 + std::exp(-(kSynthIntercept + u.bias + it.bias)))));
  }

  SynthConfig full;
  auto corpus = synth_generate(full);
  auto split = split_chronological(build_samples(corpus.records), {0.8, 0.1, 0.1}, 0);
  REQUIRE(split.train.size() + split.validation.size() + split.test.size() == 50000u);
  std::vector<int> labels;
  for (const auto& s : split.test) labels.push_back(s.label);
  CHECK(auc(bayes_scores(corpus, split.test), labels) >= 0.85);

  auto dir = testing::scratch_dir("synth");
  write_answer_key(dir / "key.json", a);
  CHECK(read_file(dir / "key.json").find("\"latent_word\"") != std::string::npos);
}

TEST_CASE("curve runner: degenerate sweep equals direct run; fixed test set") {
  auto split = small_synth_split();
  CurveSpec spec;
  spec.fractions = {1.0};
  spec.seeds = {5};
  spec.models = {{"crm_only", quick_crm(), {}}};
  auto res = run_curve(spec, split, std::nullopt, "synth");
  REQUIRE(res.rows.size() == 1);

  auto cfg = quick_crm();
  cfg.fields = field_specs(split.vocab);
  cfg.seed = 5;
  auto direct = train_crm(cfg, split);
  auto enc = encode_for_crm(split.test, cfg);
  std::vector<int> labels;
  for (const auto& e : enc) labels.push_back(e.label);
  auto p = predict(direct.model, enc);
  CHECK(res.rows[0].auc == auc(p, labels));
  CHECK(res.rows[0].logloss == logloss(p, labels));

  spec.fractions = {0.1, 0.5};
  spec.seeds = {0, 1};
  auto two = run_curve(spec, split);
  CHECK(two.rows.size() == 4);
  CHECK(two.means.size() == 2);
  CHECK(two.test_hash_constant);
  CHECK(two.test_hash == samples_digest(split.test));

  auto dir = testing::scratch_dir("curve");
  write_curve_long_csv(dir / "long.csv", two);
  auto lines = read_lines(dir / "long.csv");
  CHECK(lines.at(0) == "model,fraction,seed,auc,logloss");
  CHECK(lines.size() == 5);

  spec.fractions = {0.5, 0.1};
  CHECK_THROWS_AS(run_curve(spec, split), InvalidArgument);
}

TEST_CASE("reports: JSON lines and CSV") {
  MetricReport r = evaluate_scores({0.2, 0.8, 0.6}, {0, 1, 0}, {"crm_only", 0.5, 2, "synth", "T"});
  r.latency_mean_s = 1.5e-5;
  auto line = report_to_json(r);
  CHECK(line.find("\"model_name\":\"crm_only\"") != std::string::npos);
  CHECK(line.find("\"timestamp\":\"T\"") != std::string::npos);
  auto dir = testing::scratch_dir("reports");
  write_reports_jsonl(dir / "r.jsonl", {r, r});
  CHECK(read_lines(dir / "r.jsonl").size() == 2);
  write_reports_csv(dir / "r.csv", {r});
  CHECK(read_lines(dir / "r.csv").at(1).starts_with("crm_only,0.5,2,synth,3,"));
}
