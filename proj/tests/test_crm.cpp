#include "laser/crm.hpp"

#include "laser/error.hpp"
#include "laser/metrics.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <random>
#include <set>

using namespace laser;
using laser::ad::Matrix;
using laser::ad::Tensor;
using laser::testing::record;

namespace {

HistoryEntry entry(std::int64_t id, std::string category, std::int64_t ts) {
  HistoryEntry h;
  h.item_id = id;
  h.item_title = "t" + std::to_string(id);
  h.item_category = std::move(category);
  h.timestamp = ts;
  return h;
}

// Labels depend only on the item category: separable through its embedding.
DatasetSplit separable_split(int users = 25, int per_user = 11) {
  std::vector<InteractionRecord> recs;
  std::mt19937_64 rng(42);
  for (int t = 0; t < per_user; ++t) {
    for (int u = 1; u <= users; ++u) {
      const int item = static_cast<int>(rng() % 30) + 1;
      const bool good = item % 3 == 0;
      recs.push_back(record(u, item, good ? 5 : 1, t * 1000 + u, "", good ? "Good" : (item % 2 ? "Bad" : "Meh")));
      recs.back().user_attributes = {{"gender", u % 2 ? "F" : "M"}};
    }
  }
  return split_chronological(build_samples(recs), {0.8, 0.1, 0.1}, 0);
}

CrmConfig config_for(const DatasetSplit& split, CrmKind kind, bool knowledge = false) {
  CrmConfig c;
  c.model = kind;
  c.embedding_dim = 8;
  c.fields = field_specs(split.vocab);
  c.hidden = {16, 8};
  c.use_knowledge = knowledge;
  c.knowledge_dim = 5;
  c.retrieval_size = 6;
  c.seed = 3;
  return c;
}

std::vector<const EncodedSample*> ptrs(const std::vector<EncodedSample>& v) {
  std::vector<const EncodedSample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace

TEST_CASE("retrieve_history modes") {
  CtrSample s;
  s.target_category = "Action";
  s.history = {entry(1, "Action", 1), entry(2, "Drama", 2), entry(3, "Action", 3), entry(4, "Comedy", 4),
               entry(5, "Drama", 5)};
  auto cm = retrieve_history(s, RetrievalMode::category_match, 4);
  REQUIRE(cm.size() == 4);
  CHECK(cm[0]->item_id == 3);
  CHECK(cm[1]->item_id == 1);
  CHECK(cm[2]->item_id == 5);
  CHECK(cm[3]->item_id == 4);

  auto recent = retrieve_history(s, RetrievalMode::recent, 2);
  REQUIRE(recent.size() == 2);
  CHECK(recent[0]->item_id == 4);
  CHECK(recent[1]->item_id == 5);

  auto none = retrieve_history(s, RetrievalMode::none, 8);
  CHECK(none.size() == 8);
  CHECK(none[4]->item_id == 5);
  CHECK_FALSE(none[5].has_value());

  CtrSample empty;
  auto pad = retrieve_history(empty, RetrievalMode::category_match, 3);
  CHECK(pad.size() == 3);
  for (const auto& p : pad) CHECK_FALSE(p.has_value());
  CHECK_THROWS_AS(retrieve_history(s, RetrievalMode::recent, 0), InvalidArgument);
}

TEST_CASE("forward: probabilities in (0,1), one per sample, attention simplex") {
  auto split = separable_split();
  for (auto kind : {CrmKind::mlp, CrmKind::target_attention}) {
    auto cfg = config_for(split, kind);
    CrmModel model(cfg);
    auto enc = encode_for_crm(split.train, cfg);
    auto p = model.forward(ptrs(enc));
    CHECK(p.size() == enc.size());
    for (double x : p) {
      CHECK(x > 0.0);
      CHECK(x < 1.0);
    }
    if (kind == CrmKind::target_attention) {
      ad::NoGradGuard ng;
      Matrix w;
      auto pt = ptrs(enc);
      model.logits(pt, nullptr, nullptr, &w);
      for (size_t b = 0; b < enc.size(); ++b) {
        double total = 0.0;
        bool any = false;
        for (size_t l = 0; l < enc[b].history_mask.size(); ++l) {
          const double wl = w(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(l));
          CHECK(wl >= 0.0);
          if (enc[b].history_mask[l] == 0.0) CHECK(wl == 0.0);
          any |= enc[b].history_mask[l] != 0.0;
          total += wl;
        }
        if (any) CHECK(std::abs(total - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("zeroed knowledge projection reduces to the base model") {
  auto split = separable_split();
  auto base_cfg = config_for(split, CrmKind::target_attention, false);
  auto know_cfg = config_for(split, CrmKind::target_attention, true);
  CrmModel base(base_cfg), know(know_cfg);
  for (size_t i = 0; i < base.parameters().size(); ++i) {
    CHECK(base.parameters()[i].value() == know.parameters()[i].value());
  }
  auto enc = encode_for_crm(split.train, base_cfg);
  std::mt19937_64 rng(1);
  Matrix zu = ad::normal_matrix(static_cast<Eigen::Index>(enc.size()), 5, 3.0, rng);
  Matrix zi = ad::normal_matrix(static_cast<Eigen::Index>(enc.size()), 5, 3.0, rng);
  auto pb = base.forward(ptrs(enc));
  auto pk = know.forward(ptrs(enc), &zu, &zi);
  for (size_t i = 0; i < pb.size(); ++i) CHECK(std::abs(pb[i] - pk[i]) <= 1e-6);

  CHECK_THROWS_AS(know.forward(ptrs(enc)), InvalidArgument);
  CHECK_THROWS_AS(base.forward(ptrs(enc), &zu, &zi), InvalidArgument);
  Matrix narrow(static_cast<Eigen::Index>(enc.size()), 4);
  CHECK_THROWS_AS(know.forward(ptrs(enc), &narrow, &narrow), MismatchError);
}

TEST_CASE("BCE gradient matches finite differences on 20 probed parameters") {
  auto split = separable_split();
  auto cfg = config_for(split, CrmKind::target_attention, true);
  CrmModel model(cfg);
  std::mt19937_64 rng(7);
  for (auto& p : model.knowledge_parameters()) p.mutable_value() = ad::normal_matrix(p.rows(), p.cols(), 0.3, rng);
  auto enc = encode_for_crm(split.train, cfg);
  enc.resize(32);
  auto batch = ptrs(enc);
  std::vector<double> labels;
  for (const auto& e : enc) labels.push_back(e.label);
  Tensor zu = Tensor::constant(ad::normal_matrix(32, 5, 1.0, rng));
  Tensor zi = Tensor::constant(ad::normal_matrix(32, 5, 1.0, rng));
  std::vector<Tensor> params(model.parameters().begin(), model.parameters().end());
  auto res = testing::finite_difference_check(
      params, [&] { return ad::bce_with_logits(model.logits(batch, &zu, &zi), labels); }, 20, 13);
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("early stopping keeps the best epoch") {
  EarlyStopping es(2);
  const double seq[] = {0.60, 0.65, 0.70, 0.69, 0.68, 0.90};
  int epoch = 0;
  for (double s : seq) {
    es.observe(++epoch, s);
    if (es.should_stop()) break;
  }
  CHECK(es.best_epoch() == 3);
  CHECK(epoch == 5);
}

TEST_CASE("training on a separable set: loss decreases, high train AUC, determinism") {
  auto split = separable_split(40, 8);
  REQUIRE(split.train.size() >= 200);
  split.train.resize(200);
  auto cfg = config_for(split, CrmKind::target_attention);
  cfg.learning_rate = 1e-2;
  cfg.epochs = 15;
  cfg.patience = 15;
  cfg.batch_size = 32;
  auto res = train_crm(cfg, split);
  REQUIRE(res.log.size() >= 5);
  for (size_t e = 1; e < 5; ++e) CHECK(res.log[e].train_loss < res.log[e - 1].train_loss);

  auto enc = encode_for_crm(split.train, cfg);
  std::vector<int> labels;
  for (const auto& e : enc) labels.push_back(e.label);
  CHECK(auc(predict(res.model, enc), labels) > 0.95);

  auto again = train_crm(cfg, split);
  CHECK(again.log == res.log);
  CHECK(serialize_crm(again.model) == serialize_crm(res.model));
}

TEST_CASE("knowledge training: cache coverage and checkpoint round trip") {
  auto split = separable_split();
  auto cfg = config_for(split, CrmKind::mlp, true);
  cfg.epochs = 2;
  auto dir = testing::scratch_dir("crm_know");
  std::vector<KnowledgeVector> users, items;
  std::set<std::int64_t> seen_u, seen_i;
  for (const auto* part : {&split.train, &split.validation, &split.test}) {
    for (const auto& s : *part) {
      if (seen_u.insert(s.user_id).second) users.push_back({Side::user, s.user_id, {float(s.user_id % 3), 1.f, 0.f}, "v"});
      if (seen_i.insert(s.target_item_id).second) items.push_back({Side::item, s.target_item_id, {float(s.target_item_id % 3 == 0), 0.f, 1.f}, "v"});
    }
  }
  auto ucache = KnowledgeCache::write(users, dir / "u.bin");
  auto icache = KnowledgeCache::write(items, dir / "i.bin");
  auto adapters = [&] {
    return std::make_pair(MoeAdapter(MoeConfig{Side::user, 3, 5, 2, 0, 1}), MoeAdapter(MoeConfig{Side::item, 3, 5, 2, 0, 2}));
  };
  auto res = train_crm(cfg, split, KnowledgeInputs{&ucache, &icache}, adapters());
  REQUIRE(res.user_adapter);

  auto bytes = serialize_crm(res.model, &*res.user_adapter, &*res.item_adapter);
  auto ck = deserialize_crm(bytes, "mem");
  CHECK(serialize_crm(ck.model, &*ck.user_adapter, &*ck.item_adapter) == bytes);
  auto enc = encode_for_crm(split.test, cfg);
  KnowledgeInputs caches{&ucache, &icache};
  CHECK(predict(res.model, enc, &*res.user_adapter, &*res.item_adapter, caches) ==
        predict(ck.model, enc, &*ck.user_adapter, &*ck.item_adapter, caches));
  CHECK_THROWS_AS(deserialize_crm("LSRKV01xxxx", "mem"), FormatError);

  const auto dropped = items.front().entity_id;
  items.erase(items.begin());
  auto partial = KnowledgeCache::write(items, dir / "i2.bin");
  try {
    train_crm(cfg, split, KnowledgeInputs{&ucache, &partial}, adapters());
    FAIL("expected a cache miss");
  } catch (const NotFoundError& e) {
    CHECK(std::string(e.what()).find("item(s) missing [" + std::to_string(dropped) + "]") != std::string::npos);
  }
  CHECK_THROWS_AS(train_crm(cfg, split), InvalidArgument);
}

TEST_CASE("config validation and strict JSON") {
  auto split = separable_split();
  auto cfg = config_for(split, CrmKind::mlp);
  CHECK(crm_config_to_json(crm_config_from_json(crm_config_to_json(cfg))) == crm_config_to_json(cfg));
  CHECK_THROWS_AS(crm_config_from_json(R"({"embeding_dim": 4})"), InvalidArgument);
  cfg.embedding_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}
