#pragma once

// Variational training of the generative model and inference network, plus
// the supervised, trivial-tree, language-model and fine-tuning modes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "urnng/chart.hpp"
#include "urnng/checkpoint.hpp"
#include "urnng/config.hpp"
#include "urnng/model.hpp"
#include "urnng/optim.hpp"

namespace urnng {

struct TrainExample {
  Sentence sentence;
  std::optional<TreeRepr> gold;
};

// ---- estimator pieces ---------------------------------------------------------------

/// Leave-one-out baselines: r_k is the mean of the other samples' rewards.
inline std::vector<double> leave_one_out(const std::vector<double>& ell) {
  const std::size_t k = ell.size();
  if (k < 2) throw std::invalid_argument("leave_one_out: needs at least two samples");
  double total = 0.0;
  for (double l : ell) total += l;
  std::vector<double> r(k);
  for (std::size_t i = 0; i < k; ++i) r[i] = (total - ell[i]) / static_cast<double>(k - 1);
  return r;
}

/// Surrogate whose φ-gradient is the score-function estimator
/// (1/K) Σ_k (ℓ_k − r_k) ∇ log q(z_k) + w ∇ H[q]. Rewards are constants.
inline ad::Var phi_surrogate(const std::vector<ad::Var>& log_q, const std::vector<double>& ell, bool baseline,
                             std::optional<ad::Var> entropy = std::nullopt, double entropy_weight = 1.0) {
  if (log_q.empty() || log_q.size() != ell.size())
    throw std::invalid_argument("phi_surrogate: need one reward per sample");
  std::vector<double> r(ell.size(), 0.0);
  if (baseline) r = leave_one_out(ell);
  const double inv_k = 1.0 / static_cast<double>(ell.size());
  std::vector<ad::Var> terms;
  terms.reserve(ell.size() + 1);
  for (std::size_t k = 0; k < ell.size(); ++k) terms.push_back(ad::scale(log_q[k], (ell[k] - r[k]) * inv_k));
  if (entropy) terms.push_back(ad::scale(*entropy, entropy_weight));
  return ad::sum(ad::concat(terms));
}

/// Actions of a trivial tree: left = reduce as early as possible, right = all
/// shifts then all reduces, random = uniform over all binary trees.
inline TreeRepr trivial_tree(TrainMode mode, int length, Rng& rng) {
  switch (mode) {
    case TrainMode::TrivialLeft: return left_branching(length);
    case TrainMode::TrivialRight: return right_branching(length);
    case TrainMode::TrivialRandom: {
      ScoreTable zero(length, 0.0);
      return sample_tree(inside(zero), zero, rng).tree;
    }
    default: throw std::invalid_argument("trivial_tree: not a trivial-tree mode");
  }
}

// ---- metrics --------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double alpha = 0.0;        // anneal weight at the end of the epoch
  double theta_lr = 0.0;
  bool phi_trained = false;  // whether φ received updates this epoch
  double train_loss = 0.0;   // mean per-token training loss
  double train_elbo = 0.0;   // per token, urnng-style modes only
  double train_entropy = 0.0;
  double valid_elbo = 0.0;   // per token (log-likelihood per token for the LM)
  double valid_ppl = 0.0;    // exp(-valid_elbo), an upper bound on perplexity
  double valid_recon = 0.0;  // per token reconstruction log-likelihood
  double valid_entropy = 0.0;
  bool collapse = false;
  bool best = false;

  /// One line of space-separated key=value pairs.
  std::string to_line() const {
    std::ostringstream os;
    os.precision(10);
    os << "epoch=" << epoch << " alpha=" << alpha << " theta_lr=" << theta_lr << " phi_trained=" << phi_trained
       << " train_loss=" << train_loss << " train_elbo=" << train_elbo << " train_entropy=" << train_entropy
       << " valid_elbo=" << valid_elbo << " valid_ppl=" << valid_ppl << " valid_recon=" << valid_recon
       << " valid_entropy=" << valid_entropy << " collapse=" << collapse << " best=" << best;
    return os.str();
  }
};

struct ValidationResult {
  double elbo = 0.0;     // summed
  double recon = 0.0;    // summed
  double entropy = 0.0;  // summed over sentences
  double tokens = 0.0;
  std::size_t sentences = 0;
};

/// Single-sample ELBO log p(x, z) + H[q] with z ~ q, in eval mode, using a
/// fixed seed so successive epochs are comparable. For the LM, exact log p(x).
inline ValidationResult validate(const Model& model, const std::vector<Sentence>& data, std::uint64_t seed) {
  ValidationResult out;
  Rng rng(seed);
  for (const auto& s : data) {
    out.tokens += static_cast<double>(s.length());
    ++out.sentences;
    if (model.is_lm()) {
      const double ll = model.lm().log_likelihood(s.tokens);
      out.elbo += ll;
      out.recon += ll;
      continue;
    }
    const ScoreTable scores = model.parser().score_values(s.tokens);
    const Chart<double> chart = inside(scores);
    const double h = tree_entropy(chart);
    const SampledTree z = sample_tree(chart, scores, rng);
    ad::Tape tape(false);
    const JointLogLikelihood jll = joint_log_likelihood(model.generator(), tape, s.tokens, z.tree.actions());
    out.elbo += jll.total() + h;
    out.recon += jll.terminal.item();
    out.entropy += h;
  }
  return out;
}

// ---- trainer --------------------------------------------------------------------

inline std::string encode_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}
inline double decode_double(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg, std::vector<TrainExample> train, std::vector<Sentence> valid)
      : model_(&model), cfg_(std::move(cfg)), train_(std::move(train)), valid_(std::move(valid)), rng_(cfg_.seed) {
    cfg_.validate();
    if (train_.empty()) throw DataError("training corpus is empty");
    const bool lm_mode = cfg_.mode == TrainMode::Lm;
    if (lm_mode != model.is_lm()) throw std::invalid_argument("Trainer: model kind does not match training mode");
    if (cfg_.mode == TrainMode::Supervised)
      for (std::size_t i = 0; i < train_.size(); ++i)
        if (!train_[i].gold) throw DataError("supervised mode needs a gold tree for sentence " + std::to_string(i));
    theta_lr_ = cfg_.mode == TrainMode::Finetune ? cfg_.finetune_lr : cfg_.theta_lr;
    adam_.lr = cfg_.phi_lr, adam_.beta1 = cfg_.beta1, adam_.beta2 = cfg_.beta2;
    if (!model.is_lm()) {
      model.generator().action_head().weight->lr_scale = cfg_.action_lr_scale;
      model.generator().action_head().bias->lr_scale = cfg_.action_lr_scale;
    }
    build_buckets();
  }

  const TrainConfig& config() const { return cfg_; }
  int epoch() const { return epoch_; }
  long long step_count() const { return step_; }
  double theta_lr() const { return theta_lr_; }
  bool done() const { return epoch_ >= cfg_.epochs; }
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  double best_valid() const { return best_valid_; }

  /// Anneal weight for the next batch.
  double anneal_weight() const {
    if (cfg_.mode == TrainMode::Finetune || cfg_.anneal_epochs <= 0) return 1.0;
    const double span = cfg_.anneal_epochs * static_cast<double>(batches_per_epoch_);
    return std::min(1.0, static_cast<double>(step_) / span);
  }

  /// φ is updated only during the first `freeze_epoch` epochs (all epochs if
  /// freeze_epoch <= 0).
  bool phi_trainable() const {
    if (model_->is_lm()) return false;
    return cfg_.freeze_epoch <= 0 || epoch_ < cfg_.freeze_epoch;
  }

  /// Runs one batch; returns the epoch metrics when this batch ended an epoch.
  std::optional<EpochMetrics> step() {
    if (done()) throw std::logic_error("Trainer::step: training budget exhausted");
    const auto order = epoch_batches(epoch_);
    const auto& batch = order[batch_in_epoch_];
    run_batch(batch);
    ++step_;
    if (++batch_in_epoch_ < order.size()) return std::nullopt;
    return finish_epoch();
  }

  EpochMetrics run_epoch() {
    for (;;)
      if (auto m = step()) return *m;
  }

  /// Full budget; keeps the best-validation parameters at the end.
  std::vector<EpochMetrics> train(const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    while (!done()) {
      EpochMetrics m = run_epoch();
      if (on_epoch) on_epoch(m);
    }
    restore_best();
    return history_;
  }

  void restore_best() {
    if (best_theta_.empty()) return;
    nn::restore(model_->theta().all(), best_theta_);
    if (!best_phi_.empty()) nn::restore(model_->phi().all(), best_phi_);
  }

  /// Model, vocabulary, config and the full training state.
  Checkpoint checkpoint(const Vocabulary& vocab) const {
    Checkpoint c = model_checkpoint(*model_, vocab, cfg_);
    auto& s = c.scalars;
    s["train.epoch"] = std::to_string(epoch_);
    s["train.step"] = std::to_string(step_);
    s["train.batch_in_epoch"] = std::to_string(batch_in_epoch_);
    s["train.theta_lr"] = encode_double(theta_lr_);
    s["train.best_valid"] = encode_double(best_valid_);
    s["train.decaying"] = decaying_ ? "1" : "0";
    s["train.rng"] = rng_state(rng_);
    s["train.adam_t"] = std::to_string(adam_.t);
    s["train.acc"] = acc_.encode();
    std::string hist;
    for (const auto& m : history_) hist += m.to_line() + "\n";
    s["train.history"] = hist;
    c.groups["adam.m"] = adam_.m;
    c.groups["adam.v"] = adam_.v;
    c.groups["best.theta"] = best_theta_;
    c.groups["best.phi"] = best_phi_;
    return c;
  }

  /// Restores a state written by checkpoint(); the model must already hold
  /// the checkpoint's parameters.
  void resume(const Checkpoint& c) {
    epoch_ = std::stoi(c.scalar("train.epoch"));
    step_ = std::stoll(c.scalar("train.step"));
    batch_in_epoch_ = std::stoul(c.scalar("train.batch_in_epoch"));
    theta_lr_ = decode_double(c.scalar("train.theta_lr"));
    best_valid_ = decode_double(c.scalar("train.best_valid"));
    decaying_ = c.scalar("train.decaying") == "1";
    set_rng_state(rng_, c.scalar("train.rng"));
    adam_.t = std::stoll(c.scalar("train.adam_t"));
    acc_ = Accum::decode(c.scalar("train.acc"));
    adam_.m = c.group("adam.m");
    adam_.v = c.group("adam.v");
    best_theta_ = c.group("best.theta");
    best_phi_ = c.group("best.phi");
    history_.clear();
    std::istringstream hs(c.scalar("train.history"));
    std::string line;
    while (std::getline(hs, line)) history_.push_back(parse_metrics_line(line));
  }

  static EpochMetrics parse_metrics_line(const std::string& line) {
    EpochMetrics m;
    std::istringstream is(line);
    std::string kv;
    std::map<std::string, std::string> f;
    while (is >> kv) {
      const auto eq = kv.find('=');
      if (eq != std::string::npos) f[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    auto d = [&](const char* k) { return f.count(k) ? std::stod(f[k]) : 0.0; };
    m.epoch = static_cast<int>(d("epoch"));
    m.alpha = d("alpha");
    m.theta_lr = d("theta_lr");
    m.phi_trained = d("phi_trained") != 0;
    m.train_loss = d("train_loss");
    m.train_elbo = d("train_elbo");
    m.train_entropy = d("train_entropy");
    m.valid_elbo = d("valid_elbo");
    m.valid_ppl = d("valid_ppl");
    m.valid_recon = d("valid_recon");
    m.valid_entropy = d("valid_entropy");
    m.collapse = d("collapse") != 0;
    m.best = d("best") != 0;
    return m;
  }

  /// Checkpoint of a model alone (no training state).
  static Checkpoint model_checkpoint(const Model& model, const Vocabulary& vocab, const TrainConfig& cfg) {
    Checkpoint c;
    c.vocab = vocab.tokens();
    c.config = cfg.to_text();
    const ModelConfig& mc = model.config();
    c.scalars["model.kind"] = to_string(mc.kind);
    c.scalars["model.vocab"] = std::to_string(mc.vocab);
    c.scalars["model.hidden"] = std::to_string(mc.hidden);
    c.scalars["model.q_hidden"] = std::to_string(mc.q_hidden);
    c.scalars["model.mlp_hidden"] = std::to_string(mc.mlp_hidden);
    c.scalars["model.max_length"] = std::to_string(mc.max_length);
    c.scalars["model.dropout"] = encode_double(mc.dropout);
    c.scalars["model.q_dropout"] = encode_double(mc.q_dropout);
    c.groups["theta"] = nn::snapshot(model.theta().all());
    c.groups["phi"] = nn::snapshot(model.phi().all());
    return c;
  }

 private:
  struct Accum {
    double loss = 0, elbo = 0, entropy = 0, tokens = 0, sentences = 0;
    bool phi_trained = false;

    std::string encode() const {
      return encode_double(loss) + " " + encode_double(elbo) + " " + encode_double(entropy) + " " +
             encode_double(tokens) + " " + encode_double(sentences) + " " + (phi_trained ? "1" : "0");
    }
    static Accum decode(const std::string& s) {
      std::istringstream is(s);
      std::string a, b, c, d, e, f;
      is >> a >> b >> c >> d >> e >> f;
      return {decode_double(a), decode_double(b), decode_double(c), decode_double(d), decode_double(e), f == "1"};
    }
  };

  void build_buckets() {
    std::map<std::size_t, std::vector<std::size_t>> by_len;
    for (std::size_t i = 0; i < train_.size(); ++i) {
      if (train_[i].sentence.length() == 0) throw DataError("empty training sentence at index " + std::to_string(i));
      by_len[train_[i].sentence.length()].push_back(i);
    }
    buckets_.clear();
    batches_per_epoch_ = 0;
    const auto b = static_cast<std::size_t>(cfg_.batch_size);
    for (auto& [len, idx] : by_len) {
      buckets_.push_back(idx);
      batches_per_epoch_ += (idx.size() + b - 1) / b;
    }
  }

  /// Batches for an epoch: each length bucket is shuffled and chunked, then the
  /// batch order is shuffled. Derived from (seed, epoch) alone so a resumed run
  /// sees the same order.
  std::vector<std::vector<std::size_t>> epoch_batches(int epoch) const {
    Rng r(cfg_.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
    std::vector<std::vector<std::size_t>> out;
    const auto b = static_cast<std::size_t>(cfg_.batch_size);
    for (auto idx : buckets_) {
      shuffle(idx.begin(), idx.end(), r);
      for (std::size_t s = 0; s < idx.size(); s += b)
        out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + b)));
    }
    shuffle(out.begin(), out.end(), r);
    return out;
  }

  void run_batch(const std::vector<std::size_t>& batch) {
    model_->theta().zero_grad();
    model_->phi().zero_grad();
    const double alpha = anneal_weight();
    const bool train_phi = phi_trainable();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    acc_.phi_trained = acc_.phi_trained || train_phi;
    for (std::size_t idx : batch) {
      try {
        run_sentence(train_[idx], alpha, train_phi, inv_b);
      } catch (const NumericError& e) {
        throw NumericError("non-finite value on training sentence " + std::to_string(idx) + ": " + e.what());
      }
    }
    const auto theta = model_->theta().all();
    clip_grad_norm(theta, cfg_.theta_clip);
    Sgd{theta_lr_}.step(theta);
    if (train_phi) {
      const auto phi = model_->phi().all();
      clip_grad_norm(phi, cfg_.phi_clip);
      adam_.step(phi);
    }
  }

  void run_sentence(const TrainExample& ex, double alpha, bool train_phi, double inv_b) {
    const auto& tokens = ex.sentence.tokens;
    const double n_tok = static_cast<double>(tokens.size());
    acc_.tokens += n_tok;
    acc_.sentences += 1;
    const RunMode mode = RunMode::training(rng_);

    if (cfg_.mode == TrainMode::Lm) {
      ad::Tape tape;
      ad::Var ll = model_->lm().log_likelihood(tape, tokens, mode);
      check_finite(ll.item());
      tape.backward(ad::scale(ll, -inv_b));
      tape.accumulate_param_grads();
      acc_.loss -= ll.item();
      return;
    }

    if (cfg_.mode == TrainMode::Urnng || cfg_.mode == TrainMode::Finetune) {
      ad::Tape qtape(train_phi);
      const SpanTable<ad::Var> scores = model_->parser().score_spans(qtape, tokens, mode);
      const Chart<ad::Var> chart = inside(scores);
      const ad::Var entropy = tree_entropy(chart);
      const ScoreTable sv = values_of(scores);
      const Chart<double> cv = values_of(chart);
      const int k_samples = cfg_.samples;
      std::vector<double> ell;
      std::vector<ad::Var> log_q;
      double mean_full = 0.0;
      for (int k = 0; k < k_samples; ++k) {
        const SampledTree z = sample_tree(cv, sv, rng_);
        ad::Tape tape;
        const JointLogLikelihood jll = joint_log_likelihood(model_->generator(), tape, tokens, z.tree.actions(), mode);
        ad::Var l = ad::add(jll.terminal, ad::scale(jll.action, alpha));
        check_finite(l.item());
        tape.backward(ad::scale(l, -inv_b / k_samples));
        tape.accumulate_param_grads();
        ell.push_back(l.item());
        mean_full += jll.total() / k_samples;
        if (train_phi) log_q.push_back(log_q_of(z.tree, scores, chart));
      }
      const double h = entropy.item();
      acc_.loss -= mean_full + h;
      acc_.elbo += mean_full + h;
      acc_.entropy += h;
      if (train_phi) {
        ad::Var obj = phi_surrogate(log_q, ell, true, entropy, alpha);
        check_finite(obj.item());
        qtape.backward(ad::scale(obj, -inv_b));
        qtape.accumulate_param_grads();
      }
      return;
    }

    // Supervised and trivial-tree modes: maximize log p(x, z) and log q(z | x)
    // for a fixed z.
    const TreeRepr z = cfg_.mode == TrainMode::Supervised
                           ? *ex.gold
                           : trivial_tree(cfg_.mode, static_cast<int>(tokens.size()), rng_);
    ad::Tape tape;
    const JointLogLikelihood jll = joint_log_likelihood(model_->generator(), tape, tokens, z.actions(), mode);
    ad::Var l = ad::add(jll.terminal, jll.action);
    check_finite(l.item());
    tape.backward(ad::scale(l, -inv_b));
    tape.accumulate_param_grads();
    acc_.loss -= l.item();
    if (train_phi) {
      ad::Tape qtape;
      const SpanTable<ad::Var> scores = model_->parser().score_spans(qtape, tokens, mode);
      const Chart<ad::Var> chart = inside(scores);
      ad::Var lq = log_q_of(z, scores, chart);
      check_finite(lq.item());
      acc_.entropy += tree_entropy(values_of(chart));
      qtape.backward(ad::scale(lq, -inv_b));
      qtape.accumulate_param_grads();
    }
  }

  static ad::Var log_q_of(const TreeRepr& z, const SpanTable<ad::Var>& scores, const Chart<ad::Var>& chart) {
    return log_q(z, scores, chart.log_partition());
  }

  static void check_finite(double v) {
    if (!std::isfinite(v)) throw NumericError("non-finite loss");
  }

  EpochMetrics finish_epoch() {
    ++epoch_;
    batch_in_epoch_ = 0;
    EpochMetrics m;
    m.epoch = epoch_;
    m.alpha = cfg_.mode == TrainMode::Urnng || cfg_.mode == TrainMode::Finetune ? anneal_weight() : 1.0;
    m.theta_lr = theta_lr_;
    m.phi_trained = acc_.phi_trained;
    m.train_loss = acc_.loss / acc_.tokens;
    m.train_elbo = acc_.elbo / acc_.tokens;
    m.train_entropy = acc_.entropy / acc_.sentences;
    acc_ = Accum{};

    const auto& vdata = valid_.empty() ? train_sentences() : valid_;
    const ValidationResult v = validate(*model_, vdata, cfg_.valid_seed);
    m.valid_elbo = v.elbo / v.tokens;
    m.valid_ppl = std::exp(-m.valid_elbo);
    m.valid_recon = v.recon / v.tokens;
    m.valid_entropy = v.sentences ? v.entropy / static_cast<double>(v.sentences) : 0.0;
    m.collapse = !model_->is_lm() && m.valid_entropy < cfg_.collapse_threshold;

    if (history_.empty() || m.valid_elbo > best_valid_) {
      best_valid_ = m.valid_elbo;
      best_theta_ = nn::snapshot(model_->theta().all());
      best_phi_ = nn::snapshot(model_->phi().all());
      m.best = true;
    } else if (epoch_ >= cfg_.decay_grace) {
      decaying_ = true;
    }
    if (decaying_) theta_lr_ /= cfg_.decay;
    history_.push_back(m);
    return m;
  }

  const std::vector<Sentence>& train_sentences() const {
    if (train_copy_.empty())
      for (const auto& ex : train_) train_copy_.push_back(ex.sentence);
    return train_copy_;
  }

  Model* model_;
  TrainConfig cfg_;
  std::vector<TrainExample> train_;
  std::vector<Sentence> valid_;
  mutable std::vector<Sentence> train_copy_;
  Rng rng_;
  Adam adam_;
  double theta_lr_ = 1.0;
  int epoch_ = 0;
  long long step_ = 0;
  std::size_t batch_in_epoch_ = 0;
  double best_valid_ = 0.0;
  bool decaying_ = false;
  Accum acc_;
  std::vector<std::vector<std::size_t>> buckets_;
  std::size_t batches_per_epoch_ = 0;
  nn::Snapshot best_theta_, best_phi_;
  std::vector<EpochMetrics> history_;
};

/// Rebuilds a model from a checkpoint's model fields and θ/φ groups.
inline std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& c) {
  ModelConfig mc;
  try {
    mc.kind = parse_model_kind(c.scalar("model.kind"));
    mc.vocab = std::stoul(c.scalar("model.vocab"));
    mc.hidden = std::stoul(c.scalar("model.hidden"));
    mc.q_hidden = std::stoul(c.scalar("model.q_hidden"));
    mc.mlp_hidden = std::stoul(c.scalar("model.mlp_hidden"));
    mc.max_length = std::stoul(c.scalar("model.max_length"));
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint has malformed model fields: ") + e.what());
  }
  mc.dropout = decode_double(c.scalar("model.dropout"));
  mc.q_dropout = decode_double(c.scalar("model.q_dropout"));
  if (mc.vocab != c.vocab.size()) throw DataError("checkpoint vocabulary size does not match model.vocab");
  auto m = std::make_unique<Model>(mc);
  load_group(m->theta().all(), c.group("theta"), "theta");
  load_group(m->phi().all(), c.group("phi"), "phi");
  return m;
}

}  // namespace urnng
