#pragma once

// Oracle cross-checks run by the `verify` command: chart algorithms and the
// generative model against brute-force enumeration on random instances.

#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "urnng/chart.hpp"
#include "urnng/oracle.hpp"

namespace urnng {

struct CheckResult {
  std::string name;
  bool passed = true;
  std::string detail;
};

inline ScoreTable random_scores(int length, Rng& rng, double lo = -2.0, double hi = 2.0) {
  ScoreTable s(length, 0.0);
  for (double& v : s.cells()) v = uniform(rng, lo, hi);
  return s;
}

inline std::vector<CheckResult> run_verification(int max_length, int trials, std::uint64_t seed = 7) {
  if (max_length < 2 || max_length > 8) throw std::invalid_argument("verify: max-length must lie in [2, 8]");
  if (trials < 1) throw std::invalid_argument("verify: trials must be positive");
  Rng rng(seed);
  std::vector<CheckResult> out;
  auto worst = [](double& w, double v) { w = std::max(w, v); };
  auto fmt = [](const char* what, double v) {
    std::ostringstream os;
    os << what << "=" << v;
    return os.str();
  };

  {
    double err = 0.0;
    for (int t = 0; t < trials; ++t)
      for (int n = 2; n <= max_length; ++n) {
        const ScoreTable s = random_scores(n, rng);
        const double exact = oracle::exact_partition(s);
        worst(err, std::abs(inside(s).log_partition() - exact) / std::max(1.0, std::abs(exact)));
      }
    out.push_back({"inside_matches_enumeration", err < 1e-10, fmt("max_rel_err", err)});
  }
  {
    double err = 0.0;
    for (int t = 0; t < trials; ++t)
      for (int n = 2; n <= max_length; ++n) {
        const ScoreTable s = random_scores(n, rng);
        worst(err, std::abs(tree_entropy(inside(s)) - oracle::exact_entropy(s)));
      }
    out.push_back({"entropy_matches_enumeration", err < 1e-8, fmt("max_abs_err", err)});
  }
  {
    int bad = 0;
    for (int t = 0; t < trials; ++t) {
      const int n = 2 + t % (max_length - 1);
      const ScoreTable s = random_scores(n, rng);
      bad += !(viterbi(s).tree == oracle::exact_argmax(s));
    }
    const bool tie = viterbi(ScoreTable(4, 0.0)).tree == left_branching(4);
    out.push_back({"viterbi_matches_enumeration", bad == 0 && tie,
                   fmt("mismatches", bad) + (tie ? "" : " tie_break=wrong")});
  }
  {
    double err = 0.0;
    for (int n = 1; n <= max_length; ++n) {
      const ScoreTable s = random_scores(n, rng);
      const Chart<double> c = inside(s);
      double total = 0.0;
      for (const auto& t : oracle::enumerate_trees(n)) total += std::exp(log_q(t, s, c.log_partition()));
      worst(err, std::abs(total - 1.0));
    }
    out.push_back({"log_q_normalized", err < 1e-10, fmt("max_abs_err", err)});
  }
  {
    bool ok = true;
    for (int n = 1; n <= max_length; ++n) {
      const auto trees = oracle::enumerate_trees(n);
      ok = ok && trees.size() == count_trees(n);
      for (const auto& t : trees) ok = ok && actions_to_tree(tree_to_actions(t.spans(), n)) == t.spans();
    }
    out.push_back({"action_bijection_round_trip", ok, ""});
  }
  {
    double tv = 0.0;
    const int n = std::min(5, max_length);
    const ScoreTable s = random_scores(n, rng);
    const Chart<double> c = inside(s);
    const auto trees = oracle::enumerate_trees(n);
    const auto p = oracle::exact_distribution(s);
    std::map<std::vector<Action>, double> freq;
    const int draws = 50000;
    for (int k = 0; k < draws; ++k) freq[sample_tree(c, s, rng).tree.actions()] += 1.0 / draws;
    for (std::size_t k = 0; k < trees.size(); ++k) tv += std::abs(freq[trees[k].actions()] - p[k]) / 2;
    out.push_back({"sampler_total_variation", tv < 0.02, fmt("tv", tv)});
  }
  {
    double err = 0.0;
    ModelConfig mc;
    mc.vocab = 10, mc.hidden = 6, mc.q_hidden = 5, mc.mlp_hidden = 5, mc.max_length = 8;
    for (int t = 0; t < std::min(trials, 10); ++t) {
      Model m(mc);
      m.init_uniform(rng, 0.5);
      const int n = 1 + t % std::min(6, max_length);
      std::vector<int> x;
      for (int k = 0; k < n; ++k) x.push_back(2 + static_cast<int>(uniform_index(rng, 8)));
      const auto e = oracle::exact_elbo(m, x);
      double norm = 0.0;
      for (const auto& tr : oracle::enumerate_trees(n)) {
        ad::Tape tape(false);
        norm += std::exp(joint_log_likelihood(m.generator(), tape, x, tr.actions()).action.item());
      }
      worst(err, std::abs(norm - 1.0));
      worst(err, std::abs(e.marginal - e.elbo - e.kl));
      if (e.elbo > e.marginal + 1e-10) worst(err, 1.0);
    }
    out.push_back({"generative_normalization_and_elbo_gap", err < 1e-8, fmt("max_abs_err", err)});
  }
  return out;
}

}  // namespace urnng
