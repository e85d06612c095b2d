#pragma once

// Inference network q(z | x): a BiLSTM over word + position embeddings with
// learned boundary tokens, and an MLP scoring every span from differences of
// boundary hidden states.

#include <stdexcept>
#include <vector>

#include "urnng/chart.hpp"
#include "urnng/nn.hpp"
#include "urnng/rnng.hpp"

namespace urnng {

class InferenceNetwork {
 public:
  /// `embedding` is the word embedding table shared with the generative model.
  InferenceNetwork(nn::ParameterStore& phi, ad::Parameter& embedding, std::size_t hidden, std::size_t mlp_hidden,
                   std::size_t max_length, double dropout)
      : embedding_(&embedding),
        max_length_(max_length),
        dropout_(dropout),
        positions_(&phi.add("q.pos", Shape{max_length + 1, embedding.value.shape()[1]})),
        boundary_(&phi.add("q.boundary", Shape{2, embedding.value.shape()[1]})),
        forward_(nn::LstmCell::create(phi, "q.fwd", embedding.value.shape()[1], hidden)),
        backward_(nn::LstmCell::create(phi, "q.bwd", embedding.value.shape()[1], hidden)),
        mlp_in_(nn::Linear::create(phi, "q.mlp.0", 2 * hidden, mlp_hidden)),
        norm_gain_(&phi.add("q.ln.gain", Shape{mlp_hidden})),
        norm_bias_(&phi.add("q.ln.bias", Shape{mlp_hidden})),
        mlp_out_(nn::Linear::create(phi, "q.mlp.1", mlp_hidden, 1)) {}

  std::size_t max_length() const { return max_length_; }
  const nn::Linear& output_layer() const { return mlp_out_; }
  ad::Parameter& norm_gain() const { return *norm_gain_; }

  /// Scores for every span, as a vector in span_index order.
  ad::Var score_vector(ad::Tape& tape, const std::vector<int>& tokens, RunMode mode = {}) const {
    const std::size_t n = tokens.size();
    if (n < 1) throw std::invalid_argument("score_spans: empty sentence");
    if (n > max_length_)
      throw std::invalid_argument("score_spans: sentence length " + std::to_string(n) +
                                  " exceeds the position table (" + std::to_string(max_length_) + ")");
    std::vector<std::size_t> ids(tokens.begin(), tokens.end()), pos(n);
    for (std::size_t t = 0; t < n; ++t) pos[t] = t + 1;
    ad::Var emb = tape.param(*embedding_);
    ad::Var ptab = tape.param(*positions_);
    ad::Var bnd = tape.param(*boundary_);
    ad::Var words = ad::add(ad::gather_rows(emb, ids), ad::gather_rows(ptab, pos));
    ad::Var bos = ad::add(ad::row(bnd, 0), ad::row(ptab, 0));
    ad::Var inputs = ad::stack_rows({bos, words, ad::row(bnd, 1)});  // [n+2, D]

    // Positions 0..n+1; fwd[p] has read inputs 0..p, bwd[p] has read p..n+1.
    const std::size_t len = n + 2;
    std::vector<ad::Var> fwd(len), bwd(len);
    ad::Var fproj = forward_.project(tape, inputs), bproj = backward_.project(tape, inputs);
    nn::LstmState fs = forward_.zero_state(tape), bs = backward_.zero_state(tape);
    for (std::size_t p = 0; p < len; ++p) {
      fs = forward_.step_projected(tape, ad::row(fproj, p), fs);
      fwd[p] = fs.h;
      const std::size_t q = len - 1 - p;
      bs = backward_.step_projected(tape, ad::row(bproj, q), bs);
      bwd[q] = bs.h;
    }
    ad::Var fmat = ad::stack_rows(fwd), bmat = ad::stack_rows(bwd);

    // s_ij from [f_{j+1} - f_i ; b_{i-1} - b_j].
    const int length = static_cast<int>(n);
    std::vector<std::size_t> f_end, f_start, b_start, b_end;
    f_end.reserve(span_count(length));
    for (int i = 1; i <= length; ++i)
      for (int j = i; j <= length; ++j) {
        f_end.push_back(static_cast<std::size_t>(j + 1));
        f_start.push_back(static_cast<std::size_t>(i));
        b_start.push_back(static_cast<std::size_t>(i - 1));
        b_end.push_back(static_cast<std::size_t>(j));
      }
    ad::Var feats = ad::concat_cols(ad::sub(ad::gather_rows(fmat, std::move(f_end)), ad::gather_rows(fmat, std::move(f_start))),
                                    ad::sub(ad::gather_rows(bmat, std::move(b_start)), ad::gather_rows(bmat, std::move(b_end))));
    ad::Var hidden = ad::relu(mlp_in_(tape, feats));
    hidden = ad::layer_norm(hidden, tape.param(*norm_gain_), tape.param(*norm_bias_));
    hidden = ad::dropout(hidden, dropout_, mode.rng, mode.train);
    ad::Var out = mlp_out_(tape, hidden);  // [spans, 1]
    return ad::reshape(out, Shape{span_count(length)});
  }

  /// Per-span differentiable scores.
  SpanTable<ad::Var> score_spans(ad::Tape& tape, const std::vector<int>& tokens, RunMode mode = {}) const {
    return unstack(score_vector(tape, tokens, mode), static_cast<int>(tokens.size()));
  }

  /// Value-only scores.
  ScoreTable score_values(const std::vector<int>& tokens) const {
    ad::Tape tape(false);
    ad::Var v = score_vector(tape, tokens);
    return ScoreTable(static_cast<int>(tokens.size()), v.value().storage());
  }

  static SpanTable<ad::Var> unstack(ad::Var scores, int length) {
    std::vector<ad::Var> cells;
    cells.reserve(span_count(length));
    for (std::size_t k = 0; k < span_count(length); ++k) cells.push_back(ad::pick(scores, k));
    return SpanTable<ad::Var>(length, std::move(cells));
  }

 private:
  ad::Parameter* embedding_;
  std::size_t max_length_;
  double dropout_;
  ad::Parameter* positions_;
  ad::Parameter* boundary_;
  nn::LstmCell forward_, backward_;
  nn::Linear mlp_in_;
  ad::Parameter* norm_gain_;
  ad::Parameter* norm_bias_;
  nn::Linear mlp_out_;
};

}  // namespace urnng
