#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "urnng/autodiff.hpp"
#include "urnng/random.hpp"

namespace urnng::nn {

using ad::Parameter;
using ad::Tape;
using ad::Var;

/// Owns named parameters with stable addresses, in insertion order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter>(name, shape));
    index_.emplace(name, params_.size() - 1);
    return *params_.back();
  }

  Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  Parameter& at(const std::string& name) const {
    Parameter* p = find(name);
    if (!p) throw std::out_of_range("no parameter named " + name);
    return *p;
  }

  std::vector<Parameter*> all() const {
    std::vector<Parameter*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::size_t size() const { return params_.size(); }

  void init_uniform(Rng& rng, double range) {
    for (auto& p : params_)
      for (double& v : p->value.values()) v = uniform(rng, -range, range);
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Named copy of parameter values (best-checkpoint snapshots, comparisons).
using Snapshot = std::map<std::string, Tensor>;

inline Snapshot snapshot(const std::vector<Parameter*>& params) {
  Snapshot s;
  for (auto* p : params) s.emplace(p->name, p->value);
  return s;
}

inline void restore(const std::vector<Parameter*>& params, const Snapshot& s) {
  for (auto* p : params) {
    auto it = s.find(p->name);
    if (it == s.end()) throw std::invalid_argument("snapshot lacks parameter " + p->name);
    if (it->second.shape() != p->value.shape())
      throw std::invalid_argument("snapshot shape mismatch for " + p->name);
    p->value = it->second;
  }
}

struct Linear {
  Parameter* weight = nullptr;  // [out, in]
  Parameter* bias = nullptr;    // [out]

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out) {
    return {&store.add(name + ".weight", Shape{out, in}), &store.add(name + ".bias", Shape{out})};
  }

  Var operator()(Tape& t, Var x) const { return ad::linear(x, t.param(*weight), t.param(*bias)); }
};

struct LstmState {
  Var h;
  Var c;
};

/// Standard LSTM cell, gate order (input, forget, candidate, output).
struct LstmCell {
  Parameter* w_ih = nullptr;  // [4H, in]
  Parameter* w_hh = nullptr;  // [4H, H]
  Parameter* bias = nullptr;  // [4H]
  std::size_t hidden = 0;

  static LstmCell create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden) {
    return {&store.add(name + ".w_ih", Shape{4 * hidden, in}), &store.add(name + ".w_hh", Shape{4 * hidden, hidden}),
            &store.add(name + ".bias", Shape{4 * hidden}), hidden};
  }

  /// Input projections W_ih x + b for every row of X at once.
  Var project(Tape& t, Var x) const { return ad::linear(x, t.param(*w_ih), t.param(*bias)); }

  /// One step from pre-projected input gates.
  LstmState step_projected(Tape& t, Var x_gates, const LstmState& prev) const {
    Var gates = ad::add(x_gates, ad::matmul(t.param(*w_hh), prev.h));
    Var i = ad::sigmoid(ad::slice(gates, 0, hidden));
    Var f = ad::sigmoid(ad::slice(gates, hidden, hidden));
    Var g = ad::tanh(ad::slice(gates, 2 * hidden, hidden));
    Var o = ad::sigmoid(ad::slice(gates, 3 * hidden, hidden));
    Var c = ad::add(ad::mul(f, prev.c), ad::mul(i, g));
    return {ad::mul(o, ad::tanh(c)), c};
  }

  LstmState step(Tape& t, Var x, const LstmState& prev) const { return step_projected(t, project(t, x), prev); }

  LstmState zero_state(Tape& t) const {
    Var z = t.constant(Tensor(Shape{hidden}));
    return {z, z};
  }
};

/// Binary tree-LSTM: composes (h_l, c_l) and (h_r, c_r) with separate forget
/// gates per child; gate order (input, forget-left, forget-right, output, candidate).
struct TreeLstmCell {
  Parameter* weight = nullptr;  // [5H, 2H]
  Parameter* bias = nullptr;    // [5H]
  std::size_t hidden = 0;

  static TreeLstmCell create(ParameterStore& store, const std::string& name, std::size_t hidden) {
    return {&store.add(name + ".weight", Shape{5 * hidden, 2 * hidden}), &store.add(name + ".bias", Shape{5 * hidden}),
            hidden};
  }

  LstmState compose(Tape& t, const LstmState& left, const LstmState& right) const {
    Var gates = ad::linear(ad::concat({left.h, right.h}), t.param(*weight), t.param(*bias));
    Var i = ad::sigmoid(ad::slice(gates, 0, hidden));
    Var fl = ad::sigmoid(ad::slice(gates, hidden, hidden));
    Var fr = ad::sigmoid(ad::slice(gates, 2 * hidden, hidden));
    Var o = ad::sigmoid(ad::slice(gates, 3 * hidden, hidden));
    Var u = ad::tanh(ad::slice(gates, 4 * hidden, hidden));
    Var c = ad::add(ad::add(ad::mul(i, u), ad::mul(fl, left.c)), ad::mul(fr, right.c));
    return {ad::mul(o, ad::tanh(c)), c};
  }
};

}  // namespace urnng::nn
