#pragma once

// Two-layer LSTM language model with tied input/output embeddings; the
// perplexity baseline sized like the generative model's stack LSTM.

#include <stdexcept>
#include <vector>

#include "urnng/nn.hpp"
#include "urnng/rnng.hpp"

namespace urnng {

class LanguageModel {
 public:
  LanguageModel(nn::ParameterStore& theta, std::size_t vocab_size, std::size_t hidden, double dropout)
      : vocab_size_(vocab_size),
        hidden_(hidden),
        dropout_(dropout),
        embedding_(&theta.add("emb", Shape{vocab_size, hidden})),
        layer0_(nn::LstmCell::create(theta, "lm.l0", hidden, hidden)),
        layer1_(nn::LstmCell::create(theta, "lm.l1", hidden, hidden)),
        word_bias_(&theta.add("word.bias", Shape{vocab_size})) {}

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t hidden() const { return hidden_; }
  ad::Parameter& embedding() const { return *embedding_; }

  /// log p(x) including the end-of-sentence term. x_1 is predicted from the
  /// zero state.
  ad::Var log_likelihood(ad::Tape& tape, const std::vector<int>& tokens, RunMode mode = {}) const {
    if (tokens.empty()) throw std::invalid_argument("log_likelihood: empty sentence");
    ad::Var emb = tape.param(*embedding_);
    ad::Var bias = tape.param(*word_bias_);
    nn::LstmState s0 = layer0_.zero_state(tape), s1 = layer1_.zero_state(tape);
    std::vector<std::size_t> targets(tokens.begin(), tokens.end());
    targets.push_back(Vocabulary::kEos);
    std::vector<ad::Var> hs;
    hs.push_back(s1.h);
    for (int w : tokens) {
      if (w < 0 || static_cast<std::size_t>(w) >= vocab_size_)
        throw std::out_of_range("log_likelihood: word id " + std::to_string(w) + " outside vocabulary");
      ad::Var x = ad::dropout(ad::embedding(emb, static_cast<std::size_t>(w)), dropout_, mode.rng, mode.train);
      s0 = layer0_.step(tape, x, s0);
      s1 = layer1_.step(tape, ad::dropout(s0.h, dropout_, mode.rng, mode.train), s1);
      hs.push_back(s1.h);
    }
    ad::Var h = ad::dropout(ad::stack_rows(hs), dropout_, mode.rng, mode.train);
    ad::Var logits = ad::linear(h, emb, bias);  // [T+1, V]
    std::vector<ad::Var> terms;
    terms.reserve(targets.size());
    for (std::size_t t = 0; t < targets.size(); ++t)
      terms.push_back(ad::pick(ad::log_softmax(ad::row(logits, t)), targets[t]));
    return ad::sum(ad::concat(terms));
  }

  double log_likelihood(const std::vector<int>& tokens) const {
    ad::Tape tape(false);
    return log_likelihood(tape, tokens).item();
  }

 private:
  std::size_t vocab_size_, hidden_;
  double dropout_;
  ad::Parameter* embedding_;
  nn::LstmCell layer0_, layer1_;
  ad::Parameter* word_bias_;
};

}  // namespace urnng
