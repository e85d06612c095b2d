#pragma once

// Measurement: importance-weighted perplexity, unlabeled bracket F1 with
// evalb conventions, label recall, distributional metrics, perplexity by
// length and sentence-pair preference.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "urnng/chart.hpp"
#include "urnng/model.hpp"

namespace urnng {

// ---- F1 ---------------------------------------------------------------------------

/// Evaluable brackets of one tree: punctuation removed and positions
/// re-indexed, then singleton and whole-sentence spans dropped.
class BracketSet {
 public:
  BracketSet(const std::vector<Span>& spans, const std::vector<bool>& punct_mask) {
    const int n = static_cast<int>(punct_mask.size());
    std::vector<int> new_index(static_cast<std::size_t>(n) + 1, 0);  // 1-based; 0 for punctuation
    int kept = 0;
    for (int p = 1; p <= n; ++p)
      if (!punct_mask[static_cast<std::size_t>(p - 1)]) new_index[static_cast<std::size_t>(p)] = ++kept;
    length_ = kept;
    for (const Span& s : spans) {
      if (s.i < 1 || s.j > n || s.i > s.j)
        throw std::invalid_argument("BracketSet: span (" + std::to_string(s.i) + "," + std::to_string(s.j) +
                                    ") outside a sentence of length " + std::to_string(n));
      int a = 0, b = 0;
      for (int p = s.i; p <= s.j; ++p) {
        const int q = new_index[static_cast<std::size_t>(p)];
        if (!q) continue;
        if (!a) a = q;
        b = q;
      }
      if (!a || a == b || (a == 1 && b == kept)) continue;
      spans_.insert({a, b});
    }
  }

  const std::set<Span>& spans() const { return spans_; }
  int length() const { return length_; }
  std::size_t size() const { return spans_.size(); }
  bool contains(Span s) const { return spans_.count(s) > 0; }

  std::size_t matched(const BracketSet& other) const {
    std::size_t m = 0;
    for (const Span& s : spans_) m += other.contains(s);
    return m;
  }

 private:
  std::set<Span> spans_;
  int length_ = 0;
};

struct F1Result {
  double precision = 0.0;  // in [0, 1]
  double recall = 0.0;
  double f1 = 0.0;         // in [0, 100]
  std::size_t matched = 0, predicted = 0, gold = 0;
  std::size_t sentences = 0;                    // sentences with evaluable gold spans
  std::vector<std::optional<double>> sentence;  // per-sentence F1 in [0, 100]; empty when skipped
};

inline double harmonic_f1(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

/// Corpus-level F1 from aggregate precision and recall. Sentences without
/// evaluable gold spans are skipped.
inline F1Result unlabeled_f1(const std::vector<std::vector<Span>>& predicted, const std::vector<std::vector<Span>>& gold,
                             const std::vector<std::vector<bool>>& punct_masks) {
  if (predicted.size() != gold.size() || gold.size() != punct_masks.size())
    throw std::invalid_argument("unlabeled_f1: predicted, gold and mask lists differ in length");
  F1Result r;
  for (std::size_t k = 0; k < gold.size(); ++k) {
    const BracketSet g(gold[k], punct_masks[k]);
    const BracketSet p(predicted[k], punct_masks[k]);
    if (g.size() == 0) {
      r.sentence.push_back(std::nullopt);
      continue;
    }
    const std::size_t m = p.matched(g);
    r.matched += m, r.predicted += p.size(), r.gold += g.size();
    ++r.sentences;
    const double sp = p.size() ? static_cast<double>(m) / static_cast<double>(p.size()) : 0.0;
    r.sentence.push_back(100.0 * harmonic_f1(sp, static_cast<double>(m) / static_cast<double>(g.size())));
  }
  r.precision = r.predicted ? static_cast<double>(r.matched) / static_cast<double>(r.predicted) : 0.0;
  r.recall = r.gold ? static_cast<double>(r.matched) / static_cast<double>(r.gold) : 0.0;
  r.f1 = 100.0 * harmonic_f1(r.precision, r.recall);
  return r;
}

inline std::vector<Span> gold_spans(const LabeledTree& t) {
  std::vector<Span> out;
  for (const auto& ls : labeled_spans(t)) out.push_back(ls.span);
  return out;
}

/// "NP-SBJ-1" -> "NP", "PP=2" -> "PP"; labels starting with '-' are kept.
inline std::string strip_function_tags(const std::string& label) {
  if (label.empty() || label[0] == '-') return label;
  const auto cut = label.find_first_of("-=");
  return cut == std::string::npos ? label : label.substr(0, cut);
}

/// Fraction of gold constituents with each label whose span the prediction
/// contains, under the same conventions as unlabeled_f1. Labels with no gold
/// constituents map to nullopt.
inline std::map<std::string, std::optional<double>> label_recall(const std::vector<std::vector<Span>>& predicted,
                                                                 const std::vector<LabeledTree>& gold,
                                                                 const std::vector<std::vector<bool>>& punct_masks,
                                                                 const std::vector<std::string>& labels) {
  if (predicted.size() != gold.size() || gold.size() != punct_masks.size())
    throw std::invalid_argument("label_recall: predicted, gold and mask lists differ in length");
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;  // label -> (hit, total)
  for (std::size_t k = 0; k < gold.size(); ++k) {
    const BracketSet p(predicted[k], punct_masks[k]);
    for (const auto& ls : labeled_spans(gold[k])) {
      const BracketSet one({ls.span}, punct_masks[k]);
      if (one.size() == 0) continue;
      auto& c = counts[strip_function_tags(ls.label)];
      c.first += p.contains(*one.spans().begin());
      ++c.second;
    }
  }
  std::map<std::string, std::optional<double>> out;
  for (const auto& l : labels) {
    auto it = counts.find(l);
    if (it == counts.end() || it->second.second == 0)
      out[l] = std::nullopt;
    else
      out[l] = static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
  }
  return out;
}

// ---- decoding ---------------------------------------------------------------------

inline TreeRepr parse_viterbi(const Model& model, const std::vector<int>& tokens) {
  return viterbi(model.parser().score_values(tokens)).tree;
}

// ---- perplexity -------------------------------------------------------------------

inline double log_mean_exp(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("log_mean_exp: empty input");
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

/// log p̂(x) = log (1/K) Σ_k p(x, z_k) / q̃(z_k | x), z_k drawn from the
/// inference network with scores divided by `temperature`. Joint
/// likelihoods are computed once per distinct tree.
inline double iw_log_marginal(const Model& model, const std::vector<int>& tokens, int samples, double temperature,
                              Rng& rng) {
  if (samples < 1) throw std::invalid_argument("iw_log_marginal: need at least one sample");
  if (model.is_lm()) return model.lm().log_likelihood(tokens);
  const ScoreTable proposal = flatten(model.parser().score_values(tokens), temperature);
  const Chart<double> chart = inside(proposal);
  std::map<std::vector<Action>, double> joint;
  std::vector<double> ratios;
  ratios.reserve(static_cast<std::size_t>(samples));
  for (int k = 0; k < samples; ++k) {
    const SampledTree z = sample_tree(chart, proposal, rng);
    if (!std::isfinite(z.log_q)) throw std::logic_error("iw_log_marginal: proposal assigned a sample zero mass");
    auto it = joint.find(z.tree.actions());
    if (it == joint.end()) {
      ad::Tape tape(false);
      const double lp = joint_log_likelihood(model.generator(), tape, tokens, z.tree.actions()).total();
      it = joint.emplace(z.tree.actions(), lp).first;
    }
    ratios.push_back(it->second - z.log_q);
  }
  return log_mean_exp(ratios);
}

struct PerplexityResult {
  double perplexity = 0.0;
  double tokens = 0.0;  // end-of-sentence tokens are not counted
  std::vector<double> log_marginals;
};

inline double perplexity_of(const std::vector<double>& log_marginals, double tokens) {
  double total = 0.0;
  for (double l : log_marginals) total += l;
  return std::exp(-total / tokens);
}

inline PerplexityResult iw_perplexity(const Model& model, const std::vector<Sentence>& data, int samples,
                                      double temperature, Rng& rng) {
  if (samples < 1) throw std::invalid_argument("iw_perplexity: need at least one sample");
  PerplexityResult r;
  for (const auto& s : data) {
    r.log_marginals.push_back(iw_log_marginal(model, s.tokens, samples, temperature, rng));
    r.tokens += static_cast<double>(s.length());
  }
  r.perplexity = perplexity_of(r.log_marginals, r.tokens);
  return r;
}

struct LengthBucket {
  int lo = 0, hi = 0;  // lengths in [lo, hi)
  std::size_t sentences = 0;
  double tokens = 0.0;
  std::optional<double> perplexity;  // nullopt for an empty bucket
};

/// Perplexity within each length bucket [edges[b], edges[b+1]).
inline std::vector<LengthBucket> ppl_by_length(const std::vector<int>& lengths, const std::vector<double>& log_marginals,
                                               const std::vector<int>& edges) {
  if (lengths.size() != log_marginals.size())
    throw std::invalid_argument("ppl_by_length: lengths and log marginals differ in size");
  if (edges.size() < 2) throw std::invalid_argument("ppl_by_length: need at least two bucket edges");
  std::vector<LengthBucket> out;
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
    LengthBucket bk{edges[b], edges[b + 1], 0, 0.0, std::nullopt};
    double total = 0.0;
    for (std::size_t k = 0; k < lengths.size(); ++k)
      if (lengths[k] >= bk.lo && lengths[k] < bk.hi) {
        ++bk.sentences;
        bk.tokens += lengths[k];
        total += log_marginals[k];
      }
    if (bk.sentences) bk.perplexity = std::exp(-total / bk.tokens);
    out.push_back(bk);
  }
  return out;
}

// ---- distributional metrics ----------------------------------------------------------

/// Samples actions from the conditional prior p(z | x_<z) with the words
/// fixed, under the validity mask. Returns the actions and log p(z | x_<z).
inline std::pair<std::vector<Action>, double> sample_prior_actions(const GenerativeModel& gen,
                                                                   const std::vector<int>& tokens, Rng& rng) {
  const int n = static_cast<int>(tokens.size());
  ad::Tape tape(false);
  StackState stack(gen, tape, RunMode::eval());
  std::vector<Action> actions;
  double lp = 0.0;
  int consumed = 0;
  while (!(consumed == n && stack.real_depth() == 1)) {
    Action a;
    if (auto forced = stack.forced_action(consumed, n)) {
      a = *forced;
    } else {
      const double logit = stack.action_logit().item();
      a = bernoulli(rng, ad::detail::stable_sigmoid(logit)) ? Action::Reduce : Action::Shift;
      lp += a == Action::Reduce ? ad::detail::log_sigmoid(logit) : ad::detail::log_sigmoid(-logit);
    }
    if (a == Action::Shift)
      stack.push_word(tokens[static_cast<std::size_t>(consumed++)]);
    else
      stack.reduce();
    actions.push_back(a);
  }
  return {actions, lp};
}

struct DistributionalMetrics {
  double recon_ppl = 0.0;          // exp(−Σ E_q[log p(x|z)] / tokens)
  double kl = 0.0;                 // mean per sentence of E_q[log q − log p(z|x_<z)]
  double prior_entropy = 0.0;      // mean per sentence, Monte Carlo
  double posterior_entropy = 0.0;  // mean per sentence, exact
  double uniform_entropy = 0.0;    // mean per sentence of log count_trees(T)
};

inline DistributionalMetrics distributional_metrics(const Model& model, const std::vector<Sentence>& data, int samples,
                                                    Rng& rng) {
  if (samples < 1) throw std::invalid_argument("distributional_metrics: need at least one sample");
  DistributionalMetrics m;
  double recon = 0.0, tokens = 0.0;
  for (const auto& s : data) {
    const ScoreTable scores = model.parser().score_values(s.tokens);
    const Chart<double> chart = inside(scores);
    m.posterior_entropy += tree_entropy(chart);
    m.uniform_entropy += std::log(static_cast<double>(count_trees(static_cast<int>(s.length()))));
    double r = 0.0, kl = 0.0, hp = 0.0;
    for (int k = 0; k < samples; ++k) {
      const SampledTree z = sample_tree(chart, scores, rng);
      ad::Tape tape(false);
      const JointLogLikelihood j = joint_log_likelihood(model.generator(), tape, s.tokens, z.tree.actions());
      r += j.terminal.item();
      kl += z.log_q - j.action.item();
      hp -= sample_prior_actions(model.generator(), s.tokens, rng).second;
    }
    recon += r / samples;
    m.kl += kl / samples;
    m.prior_entropy += hp / samples;
    tokens += static_cast<double>(s.length());
  }
  const double n = static_cast<double>(data.size());
  m.recon_ppl = std::exp(-recon / tokens);
  m.kl /= n, m.prior_entropy /= n, m.posterior_entropy /= n, m.uniform_entropy /= n;
  return m;
}

// ---- grammaticality preference -----------------------------------------------------

struct Preference {
  int choice = 0;       // 0 prefers the first sentence, 1 the second
  double margin = 0.0;  // log p̂(a) − log p̂(b)
};

/// Both estimates use the same random stream (a copy of `rng`), so identical
/// inputs give a zero margin and swapping the arguments negates it.
inline Preference prefer_grammatical(const Model& model, const std::vector<int>& a, const std::vector<int>& b,
                                     int samples, double temperature, Rng& rng) {
  Rng ra = rng, rb = rng;
  const double la = iw_log_marginal(model, a, samples, temperature, ra);
  const double lb = iw_log_marginal(model, b, samples, temperature, rb);
  rng.discard(1);
  return {la >= lb ? 0 : 1, la - lb};
}

}  // namespace urnng
