#include "test_util.hpp"

#include <algorithm>
#include <set>

using namespace urnng;
using testutil::acts;

namespace {

struct Toy {
  Vocabulary vocab;
  std::vector<TrainExample> train;
  std::vector<Sentence> valid;
};

Toy toy_data() {
  const std::vector<std::string> trees = {
      "(S (NP (D the) (N dog)) (VP (V saw) (NP (D a) (N cat))))",
      "(S (NP (D a) (N cat)) (VP (V ran)))",
      "(S (NP (D the) (N cat)) (VP (V saw) (NP (D the) (N dog))))",
      "(S (NP (N dogs)) (VP (V ran)))",
      "(S (NP (D a) (N dog)) (VP (V ran)))",
      "(S (NP (N cats)) (VP (V saw) (NP (N dogs))))"};
  Toy t;
  std::vector<LabeledTree> parsed;
  std::vector<std::vector<std::string>> words;
  for (const auto& s : trees) {
    parsed.push_back(parse_bracketed(s));
    words.push_back(tree_words(parsed.back()));
  }
  t.vocab = Vocabulary::build(words, 1);
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    t.train.push_back({make_sentence(words[i], t.vocab, PunctuationSet{}), binarize_right(parsed[i])});
    if (i < 2) t.valid.push_back(t.train.back().sentence);
  }
  return t;
}

TrainConfig toy_config(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.seed = 7;
  c.samples = 3;
  c.batch_size = 2;
  c.epochs = 4;
  c.anneal_epochs = 2;
  c.hidden = c.q_hidden = c.mlp_hidden = 8;
  c.max_length = 8;
  c.dropout = c.q_dropout = 0.1;
  c.phi_lr = 1e-3;
  c.min_count = 1;
  return c;
}

std::unique_ptr<Model> toy_model(const TrainConfig& c, std::size_t vocab) {
  ModelConfig mc;
  mc.kind = c.mode == TrainMode::Lm ? ModelKind::Lm : ModelKind::Rnng;
  mc.vocab = vocab;
  mc.hidden = static_cast<std::size_t>(c.hidden);
  mc.q_hidden = static_cast<std::size_t>(c.q_hidden);
  mc.mlp_hidden = static_cast<std::size_t>(c.mlp_hidden);
  mc.max_length = static_cast<std::size_t>(c.max_length);
  mc.dropout = c.dropout;
  mc.q_dropout = c.q_dropout;
  auto m = std::make_unique<Model>(mc);
  Rng rng(c.seed);
  m->init_uniform(rng, c.init_range);
  return m;
}

bool same_values(const nn::Snapshot& a, const nn::Snapshot& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end() || !std::ranges::equal(it->second.values(), t.values())) return false;
  }
  return true;
}

std::set<std::string> names_of(const std::vector<ad::Parameter*>& ps) {
  std::set<std::string> out;
  for (auto* p : ps) out.insert(p->name);
  return out;
}

}  // namespace

TEST(Estimator, LeaveOneOutTwoSamples) {
  EXPECT_EQ(leave_one_out({3.0, 5.0}), (std::vector<double>{5.0, 3.0}));
  const auto r = leave_one_out({1.0, 2.0, 6.0});
  EXPECT_DOUBLE_EQ(r[0], 4.0);
  EXPECT_DOUBLE_EQ(r[1], 3.5);
  EXPECT_DOUBLE_EQ(r[2], 1.5);
  EXPECT_THROW(leave_one_out({1.0}), std::invalid_argument);
}

TEST(Estimator, ConstantRewardsGiveZeroGradient) {
  ad::Parameter w("w", Shape{3});
  w.value = Tensor::vector({0.2, -0.1, 0.4});
  ad::Tape t;
  const ad::Var v = t.param(w);
  const std::vector<ad::Var> lq{ad::sum(v), ad::scale(ad::sum(v), 2.0)};
  t.backward(phi_surrogate(lq, {-4.0, -4.0}, true));
  for (const auto& [p, g] : t.param_grads())
    for (double x : g.values()) EXPECT_EQ(x, 0.0);
}

TEST(Schedule, AnnealRampsOverConfiguredEpochs) {
  Toy d = toy_data();
  TrainConfig c = toy_config(TrainMode::Urnng);
  c.anneal_epochs = 1;
  auto m = toy_model(c, d.vocab.size());
  Trainer tr(*m, c, d.train, d.valid);
  const std::size_t b = tr.batches_per_epoch();
  EXPECT_EQ(tr.anneal_weight(), 0.0);
  double prev = 0.0;
  for (std::size_t k = 0; k < b; ++k) {
    tr.step();
    EXPECT_GT(tr.anneal_weight(), prev);
    prev = tr.anneal_weight();
  }
  EXPECT_DOUBLE_EQ(tr.anneal_weight(), 1.0);
  tr.step();
  EXPECT_DOUBLE_EQ(tr.anneal_weight(), 1.0);
}

TEST(Schedule, PhiFreezesAfterConfiguredEpoch) {
  Toy d = toy_data();
  TrainConfig c = toy_config(TrainMode::Urnng);
  c.freeze_epoch = 1;
  auto m = toy_model(c, d.vocab.size());
  Trainer tr(*m, c, d.train, d.valid);
  EXPECT_TRUE(tr.phi_trainable());
  EXPECT_TRUE(tr.run_epoch().phi_trained);
  EXPECT_FALSE(tr.phi_trainable());
  const auto before = nn::snapshot(m->phi().all());
  EXPECT_FALSE(tr.run_epoch().phi_trained);
  EXPECT_TRUE(same_values(before, nn::snapshot(m->phi().all())));
}

TEST(Schedule, FinetuneUsesFullWeightAndOwnRate) {
  Toy d = toy_data();
  TrainConfig c = toy_config(TrainMode::Finetune);
  c.finetune_lr = 0.05;
  auto m = toy_model(c, d.vocab.size());
  Trainer tr(*m, c, d.train, d.valid);
  EXPECT_EQ(tr.anneal_weight(), 1.0);
  EXPECT_EQ(tr.theta_lr(), 0.05);
}

TEST(TrivialTrees, Shapes) {
  Rng rng(1);
  EXPECT_EQ(trivial_tree(TrainMode::TrivialRight, 4, rng).actions(), acts("SSSSRRR"));
  EXPECT_EQ(trivial_tree(TrainMode::TrivialLeft, 4, rng).actions(), acts("SSRSRSR"));
  std::set<std::vector<Action>> seen;
  for (int k = 0; k < 2000; ++k) {
    const auto t = trivial_tree(TrainMode::TrivialRandom, 5, rng);
    EXPECT_TRUE(valid_actions(t.actions(), 5));
    seen.insert(t.actions());
  }
  EXPECT_EQ(seen.size(), 14u);
  EXPECT_THROW(trivial_tree(TrainMode::Urnng, 4, rng), std::invalid_argument);
}

TEST(Trainer, SupervisedLossDecreases) {
  Toy d = toy_data();
  TrainConfig c = toy_config(TrainMode::Supervised);
  c.epochs = 200;
  c.batch_size = 6;
  c.dropout = c.q_dropout = 0.0;
  c.freeze_epoch = 0;
  c.decay_grace = 1000;
  c.theta_lr = 1.0;
  c.phi_lr = 0.01;
  auto m = toy_model(c, d.vocab.size());
  Trainer tr(*m, c, d.train, d.valid);
  const auto h = tr.train();
  EXPECT_LT(h.back().train_loss, 0.5 * h.front().train_loss);
  for (const auto& ex : d.train) EXPECT_EQ(parse_viterbi(*m, ex.sentence.tokens), *ex.gold);
}

TEST(Trainer, EveryModeRuns) {
  Toy d = toy_data();
  for (TrainMode mode : {TrainMode::Urnng, TrainMode::Supervised, TrainMode::Lm, TrainMode::TrivialLeft,
                         TrainMode::TrivialRight, TrainMode::TrivialRandom}) {
    TrainConfig c = toy_config(mode);
    c.epochs = 1;
    auto m = toy_model(c, d.vocab.size());
    Trainer tr(*m, c, d.train, d.valid);
    const auto h = tr.train();
    ASSERT_EQ(h.size(), 1u) << to_string(mode);
    EXPECT_TRUE(std::isfinite(h[0].train_loss)) << to_string(mode);
    EXPECT_TRUE(std::isfinite(h[0].valid_elbo)) << to_string(mode);
  }
}

TEST(Trainer, ModelKindMustMatchMode) {
  Toy d = toy_data();
  TrainConfig c = toy_config(TrainMode::Lm);
  auto m = toy_model(toy_config(TrainMode::Urnng), d.vocab.size());
  EXPECT_THROW(Trainer(*m, c, d.train, d.valid), std::invalid_argument);
  TrainConfig s = toy_config(TrainMode::Supervised);
  auto train = d.train;
  train[0].gold.reset();
  EXPECT_THROW(Trainer(*m, s, train, d.valid), DataError);
}

TEST(Trainer, DeterministicGivenSeed) {
  Toy d = toy_data();
  const TrainConfig c = toy_config(TrainMode::Urnng);
  std::vector<std::string> lines[2];
  nn::Snapshot theta[2];
  for (int r = 0; r < 2; ++r) {
    auto m = toy_model(c, d.vocab.size());
    Trainer tr(*m, c, d.train, d.valid);
    for (const auto& e : tr.train()) lines[r].push_back(e.to_line());
    theta[r] = nn::snapshot(m->theta().all());
  }
  EXPECT_EQ(lines[0], lines[1]);
  EXPECT_TRUE(same_values(theta[0], theta[1]));
}

TEST(Trainer, ResumeIsBitIdentical) {
  Toy d = toy_data();
  TrainConfig c = toy_config(TrainMode::Urnng);
  c.epochs = 10;
  auto straight = toy_model(c, d.vocab.size());
  Trainer a(*straight, c, d.train, d.valid);
  for (int k = 0; k < 20; ++k) a.step();

  auto first = toy_model(c, d.vocab.size());
  Trainer b(*first, c, d.train, d.valid);
  for (int k = 0; k < 10; ++k) b.step();
  const Checkpoint saved = Checkpoint::deserialize(b.checkpoint(d.vocab).serialize());
  auto resumed = model_from_checkpoint(saved);
  Trainer b2(*resumed, c, d.train, d.valid);
  b2.resume(saved);
  for (int k = 0; k < 10; ++k) b2.step();

  EXPECT_EQ(a.step_count(), b2.step_count());
  EXPECT_TRUE(same_values(nn::snapshot(straight->theta().all()), nn::snapshot(resumed->theta().all())));
  EXPECT_TRUE(same_values(nn::snapshot(straight->phi().all()), nn::snapshot(resumed->phi().all())));
  ASSERT_EQ(a.history().size(), b2.history().size());
  for (std::size_t i = 0; i < a.history().size(); ++i) EXPECT_EQ(a.history()[i].to_line(), b2.history()[i].to_line());
}

TEST(Trainer, MetricsLineRoundTrip) {
  EpochMetrics m;
  m.epoch = 3;
  m.alpha = 0.5;
  m.valid_elbo = -2.25;
  m.collapse = true;
  const auto back = Trainer::parse_metrics_line(m.to_line());
  EXPECT_EQ(back.epoch, 3);
  EXPECT_EQ(back.alpha, 0.5);
  EXPECT_EQ(back.valid_elbo, -2.25);
  EXPECT_TRUE(back.collapse);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Toy d = toy_data();
  const TrainConfig c = toy_config(TrainMode::Urnng);
  auto m = toy_model(c, d.vocab.size());
  Trainer tr(*m, c, d.train, d.valid);
  tr.run_epoch();
  const auto dir = testutil::temp_dir("ckpt");
  const auto p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();
  tr.checkpoint(d.vocab).save(p1);
  Checkpoint::load(p1).save(p2);
  EXPECT_EQ(testutil::read_file(p1), testutil::read_file(p2));
  EXPECT_FALSE(std::filesystem::exists(p1 + ".tmp"));

  const auto reloaded = model_from_checkpoint(Checkpoint::load(p1));
  EXPECT_TRUE(same_values(nn::snapshot(m->theta().all()), nn::snapshot(reloaded->theta().all())));
  EXPECT_EQ(names_of(m->phi().all()), names_of(reloaded->phi().all()));
}

TEST(Checkpoint, CorruptFilesRejected) {
  Toy d = toy_data();
  const TrainConfig c = toy_config(TrainMode::Urnng);
  auto m = toy_model(c, d.vocab.size());
  const std::string buf = Trainer::model_checkpoint(*m, d.vocab, c).serialize();
  EXPECT_THROW(Checkpoint::deserialize(buf.substr(0, buf.size() / 2)), DataError);
  EXPECT_THROW(Checkpoint::deserialize(buf.substr(0, 4)), DataError);
  std::string wrong_version = buf;
  wrong_version[sizeof Checkpoint::kMagic] = static_cast<char>(Checkpoint::kVersion + 1);
  try {
    Checkpoint::deserialize(wrong_version);
    FAIL() << "expected a DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
  std::string wrong_magic = buf;
  wrong_magic[0] = 'X';
  EXPECT_THROW(Checkpoint::deserialize(wrong_magic), DataError);
  EXPECT_THROW(Checkpoint::load("/nonexistent/x.ckpt"), DataError);
}

TEST(Checkpoint, TensorNamesMatchModel) {
  Toy d = toy_data();
  const TrainConfig c = toy_config(TrainMode::Urnng);
  auto m = toy_model(c, d.vocab.size());
  const Checkpoint ck = Trainer::model_checkpoint(*m, d.vocab, c);
  std::set<std::string> theta, phi;
  for (const auto& [k, v] : ck.group("theta")) theta.insert(k);
  for (const auto& [k, v] : ck.group("phi")) phi.insert(k);
  EXPECT_EQ(theta, names_of(m->theta().all()));
  EXPECT_EQ(phi, names_of(m->phi().all()));
  EXPECT_EQ(ck.vocab, d.vocab.tokens());
}

TEST(Checkpoint, ShapeMismatchRejected) {
  Toy d = toy_data();
  TrainConfig c = toy_config(TrainMode::Urnng);
  auto m = toy_model(c, d.vocab.size());
  Checkpoint ck = Trainer::model_checkpoint(*m, d.vocab, c);
  ck.scalars["model.hidden"] = "9";
  EXPECT_THROW(model_from_checkpoint(ck), DataError);
}
