#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "urnng/urnng.hpp"

using namespace urnng;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitVerify = 4;

void write_file_atomic(const std::string& path, const std::string& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + tmp);
    out << data;
    if (!out.flush()) throw DataError("failed writing file: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move file into place: " + path);
}

/// Output sink: a file written atomically on close, or stdout.
struct Sink {
  std::string path;
  std::ostringstream buf;

  explicit Sink(std::string p) : path(std::move(p)) {}
  std::ostream& out() { return path.empty() || path == "-" ? std::cout : buf; }
  void close() {
    if (!path.empty() && path != "-") write_file_atomic(path, buf.str());
  }
};

PunctuationSet load_punct(const std::string& path) { return path.empty() ? PunctuationSet{} : PunctuationSet::from_file(path); }

std::vector<Sentence> sentences_of(const std::vector<GoldTree>& gold) {
  std::vector<Sentence> out;
  for (const auto& g : gold) out.push_back(g.sentence);
  return out;
}

struct Loaded {
  Checkpoint ckpt;
  Vocabulary vocab;
  std::unique_ptr<Model> model;
};

Loaded load_model(const std::string& path) {
  Loaded l{Checkpoint::load(path), {}, nullptr};
  l.vocab = Vocabulary::from_tokens(l.ckpt.vocab);
  l.model = model_from_checkpoint(l.ckpt);
  return l;
}

void require_parser(const Model& m, const std::string& path) {
  if (m.is_lm()) throw DataError("checkpoint " + path + " holds a language model, which has no parser");
}

void check_length(const Model& m, const Sentence& s, std::size_t index) {
  if (!m.is_lm() && s.length() > m.config().max_length)
    throw DataError("sentence " + std::to_string(index + 1) + " has " + std::to_string(s.length()) +
                    " tokens, more than the model's maximum length " + std::to_string(m.config().max_length));
}

// ---- train --------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus, valid, mode, config, out = "model.ckpt", punct;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::load(a.config);
  if (!a.mode.empty()) cfg.mode = parse_train_mode(a.mode);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  const PunctuationSet punct = load_punct(a.punct);

  std::optional<Loaded> init;
  if (cfg.mode == TrainMode::Finetune) {
    if (cfg.init_from.empty()) throw DataError("finetune mode needs init_from=<checkpoint> in the config");
    init = load_model(cfg.init_from);
    require_parser(*init->model, cfg.init_from);
  }

  // Supervised mode reads bracketed trees; every other mode reads plain text.
  std::vector<std::vector<std::string>> words;
  std::vector<LabeledTree> trees;
  if (cfg.mode == TrainMode::Supervised) {
    trees = read_bracketed_trees(a.corpus);
    for (const auto& t : trees) words.push_back(tree_words(t));
  } else {
    words = read_token_lines(a.corpus);
    if (words.empty()) throw DataError("corpus has no usable sentences: " + a.corpus);
  }
  const Vocabulary vocab = init ? init->vocab : Vocabulary::build(words, cfg.min_count);

  std::vector<TrainExample> train;
  std::size_t longest = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    TrainExample ex{make_sentence(words[i], vocab, punct), std::nullopt};
    if (!trees.empty()) ex.gold = binarize_right(trees[i]);
    longest = std::max(longest, ex.sentence.length());
    train.push_back(std::move(ex));
  }
  std::vector<Sentence> valid;
  if (!a.valid.empty()) valid = read_corpus(a.valid, vocab, punct);

  std::unique_ptr<Model> model;
  if (init) {
    model = std::move(init->model);
    if (longest > model->config().max_length)
      throw DataError("training sentence of length " + std::to_string(longest) +
                      " exceeds the checkpoint's maximum length " + std::to_string(model->config().max_length));
  } else {
    ModelConfig mc;
    mc.kind = cfg.mode == TrainMode::Lm ? ModelKind::Lm : ModelKind::Rnng;
    mc.vocab = vocab.size();
    mc.hidden = static_cast<std::size_t>(cfg.hidden);
    mc.q_hidden = static_cast<std::size_t>(cfg.q_hidden);
    mc.mlp_hidden = static_cast<std::size_t>(cfg.mlp_hidden);
    mc.max_length = std::max(static_cast<std::size_t>(cfg.max_length), longest);
    mc.dropout = cfg.dropout;
    mc.q_dropout = cfg.q_dropout;
    model = std::make_unique<Model>(mc);
    Rng init_rng(cfg.seed);
    model->init_uniform(init_rng, cfg.init_range);
  }
  for (std::size_t i = 0; i < valid.size(); ++i) check_length(*model, valid[i], i);

  Trainer trainer(*model, cfg, std::move(train), std::move(valid));
  const std::string metrics_path = a.out + ".metrics";
  std::string metrics;
  std::cerr << "train: mode=" << to_string(cfg.mode) << " sentences=" << words.size() << " vocab=" << vocab.size()
            << " batches_per_epoch=" << trainer.batches_per_epoch() << "\n";
  trainer.train([&](const EpochMetrics& m) {
    metrics += m.to_line() + "\n";
    write_file_atomic(metrics_path, metrics);
    trainer.checkpoint(vocab).save(a.out);
    std::cout << m.to_line() << std::endl;
    if (m.collapse)
      std::cerr << "warning: mean posterior entropy " << m.valid_entropy << " is below the collapse threshold "
                << cfg.collapse_threshold << "\n";
  });
  trainer.checkpoint(vocab).save(a.out);
  std::cerr << "train: best valid_elbo=" << trainer.best_valid() << " saved " << a.out << "\n";
  return kExitOk;
}

// ---- parse ---------------------------------------------------------------------------

int cmd_parse(const std::string& corpus, const std::string& ckpt, const std::string& out_path) {
  Loaded l = load_model(ckpt);
  require_parser(*l.model, ckpt);
  std::ifstream in(corpus);
  if (!in) throw DataError("cannot read corpus file: " + corpus);
  Sink sink(out_path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    const auto words = split_ws(line);
    if (words.empty()) {
      sink.out() << "\n";
    } else {
      const Sentence s = make_sentence(words, l.vocab, PunctuationSet{});
      check_length(*l.model, s, lineno);
      sink.out() << to_bracketed(parse_viterbi(*l.model, s.tokens), words) << "\n";
    }
    ++lineno;
  }
  sink.close();
  return kExitOk;
}

// ---- evaluate ------------------------------------------------------------------------

struct EvalArgs {
  std::string corpus, gold, checkpoint, report, tsv, punct;
  int samples = 1000;
  double temperature = 2.0;
  int dist_samples = 20;
  std::uint64_t seed = 1;
};

int cmd_evaluate(const EvalArgs& a) {
  Loaded l = load_model(a.checkpoint);
  const Model& m = *l.model;
  const PunctuationSet punct = load_punct(a.punct);
  std::vector<GoldTree> gold;
  if (!a.gold.empty()) gold = read_bracketed(a.gold, l.vocab, punct);
  std::vector<Sentence> data;
  if (!a.corpus.empty())
    data = read_corpus(a.corpus, l.vocab, punct);
  else if (!gold.empty())
    data = sentences_of(gold);
  else
    throw DataError("evaluate needs --corpus or --gold");
  for (std::size_t i = 0; i < data.size(); ++i) check_length(m, data[i], i);
  if (a.temperature <= 0) throw DataError("--temperature must be positive");

  Sink report(a.report);
  std::ostream& os = report.out();
  os.precision(10);
  Rng rng(a.seed);
  const PerplexityResult ppl = iw_perplexity(m, data, a.samples, a.temperature, rng);
  os << "sentences=" << data.size() << "\n"
     << "tokens=" << ppl.tokens << "\n"
     << "samples=" << a.samples << "\n"
     << "temperature=" << a.temperature << "\n"
     << "perplexity=" << ppl.perplexity << "\n";
  std::vector<int> lengths;
  for (const auto& s : data) lengths.push_back(static_cast<int>(s.length()));
  for (const auto& b : ppl_by_length(lengths, ppl.log_marginals, {1, 10, 20, 30, 40, 1 << 20})) {
    os << "ppl_len_" << b.lo << "_" << (b.hi == (1 << 20) ? std::string("inf") : std::to_string(b.hi)) << "=";
    if (b.perplexity)
      os << *b.perplexity << "\n";
    else
      os << "NA\n";
  }

  std::vector<std::optional<double>> sentence_f1(data.size());
  if (!m.is_lm()) {
    const DistributionalMetrics d = distributional_metrics(m, data, a.dist_samples, rng);
    os << "recon_ppl=" << d.recon_ppl << "\n"
       << "kl=" << d.kl << "\n"
       << "prior_entropy=" << d.prior_entropy << "\n"
       << "posterior_entropy=" << d.posterior_entropy << "\n"
       << "uniform_entropy=" << d.uniform_entropy << "\n";
    if (!gold.empty()) {
      std::vector<std::vector<Span>> pred, gspans, binarized;
      std::vector<std::vector<bool>> masks;
      std::vector<LabeledTree> gtrees;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        check_length(m, gold[i].sentence, i);
        pred.push_back(parse_viterbi(m, gold[i].sentence.tokens).spans());
        gspans.push_back(gold_spans(gold[i].tree));
        binarized.push_back(binarize_right(gold[i].tree).spans());
        masks.push_back(gold[i].sentence.punct_mask);
        gtrees.push_back(gold[i].tree);
      }
      const F1Result f1 = unlabeled_f1(pred, gspans, masks);
      const F1Result upper = unlabeled_f1(binarized, gspans, masks);
      os << "f1=" << f1.f1 << "\n"
         << "precision=" << 100 * f1.precision << "\n"
         << "recall=" << 100 * f1.recall << "\n"
         << "f1_sentences=" << f1.sentences << "\n"
         << "oracle_binary_f1=" << upper.f1 << "\n";
      for (const auto& [label, r] : label_recall(pred, gtrees, masks, {"NP", "VP", "PP", "SBAR", "ADJP", "ADVP"})) {
        os << "recall_" << label << "=";
        if (r)
          os << *r << "\n";
        else
          os << "NA\n";
      }
      if (gold.size() == data.size()) sentence_f1 = f1.sentence;
    }
  }
  report.close();

  if (!a.tsv.empty()) {
    Sink tsv(a.tsv);
    tsv.out().precision(10);
    tsv.out() << "index\tlength\tlog_marginal\tf1\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
      tsv.out() << i + 1 << "\t" << data[i].length() << "\t" << ppl.log_marginals[i] << "\t";
      if (sentence_f1[i])
        tsv.out() << *sentence_f1[i] << "\n";
      else
        tsv.out() << "NA\n";
    }
    tsv.close();
  }
  return kExitOk;
}

// ---- sample / generate -------------------------------------------------------------

int cmd_sample(const std::string& corpus, const std::string& ckpt, int n, double temperature, std::uint64_t seed) {
  Loaded l = load_model(ckpt);
  require_parser(*l.model, ckpt);
  if (temperature <= 0) throw DataError("--temperature must be positive");
  const auto lines = read_token_lines(corpus);
  Rng rng(seed);
  std::cout.precision(6);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const Sentence s = make_sentence(lines[i], l.vocab, PunctuationSet{});
    check_length(*l.model, s, i);
    const ScoreTable scores = flatten(l.model->parser().score_values(s.tokens), temperature);
    const Chart<double> chart = inside(scores);
    for (int k = 0; k < n; ++k) {
      const SampledTree z = sample_tree(chart, scores, rng);
      std::cout << i + 1 << "\t" << z.log_q << "\t" << to_bracketed(z.tree, lines[i]) << "\n";
    }
  }
  return kExitOk;
}

int cmd_generate(const std::string& ckpt, int n, int max_len, std::uint64_t seed) {
  Loaded l = load_model(ckpt);
  if (l.model->is_lm()) throw DataError("checkpoint " + ckpt + " holds a language model; generate needs a grammar");
  if (max_len < 1) throw DataError("--max-len must be >= 1");
  Rng rng(seed);
  for (int k = 0; k < n; ++k) {
    const GeneratedSentence g = generate(l.model->generator(), rng, max_len);
    if (g.empty) {
      std::cout << "<empty>\n";
      continue;
    }
    std::vector<std::string> words;
    for (int w : g.tokens) words.push_back(l.vocab.token(w));
    std::string line;
    for (const auto& w : words) line += (line.empty() ? "" : " ") + w;
    std::cout << line << "\t";
    if (g.truncated)
      std::cout << "<truncated>\n";
    else
      std::cout << to_bracketed(TreeRepr::from_actions(g.actions), words) << "\n";
  }
  return kExitOk;
}

// ---- synth / verify ------------------------------------------------------------------

int cmd_synth(const std::string& grammar_path, int n, int min_len, int max_len, std::uint64_t seed,
              const std::string& prefix) {
  const Grammar g = Grammar::load(grammar_path);
  if (n < 1) throw DataError("--n must be positive");
  if (min_len < 1 || max_len < min_len) throw DataError("length bounds must satisfy 1 <= min-len <= max-len");
  const SyntheticCorpus c = synth_corpus(g, static_cast<std::size_t>(n), min_len, max_len, seed);
  std::string text, trees;
  for (const auto& t : c.trees) {
    std::string line;
    for (const auto& w : tree_words(t)) line += (line.empty() ? "" : " ") + w;
    text += line + "\n";
    trees += to_bracketed(t) + "\n";
  }
  write_file_atomic(prefix + ".txt", text);
  write_file_atomic(prefix + ".trees", trees);
  std::cerr << "synth: wrote " << c.trees.size() << " sentences (" << c.attempts << " draws) to " << prefix
            << ".txt and " << prefix << ".trees\n";
  return kExitOk;
}

int cmd_verify(int max_length, int trials) {
  bool ok = true;
  for (const auto& r : run_verification(max_length, trials)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << (r.detail.empty() ? "" : " " + r.detail) << "\n";
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised recurrent neural network grammars"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--corpus", ta.corpus, "Training corpus (bracketed trees in supervised mode)")->required();
  train->add_option("--valid", ta.valid, "Validation corpus");
  train->add_option("--mode", ta.mode,
                    "urnng | supervised | lm | trivial-left | trivial-right | trivial-random | finetune");
  train->add_option("--config", ta.config, "key=value config file");
  train->add_option("--seed", ta.seed, "Random seed (overrides the config)");
  train->add_option("--out", ta.out, "Checkpoint path; metrics go to <out>.metrics")->capture_default_str();
  train->add_option("--punct", ta.punct, "Punctuation list file");

  std::string p_corpus, p_ckpt, p_out;
  auto* parse = app.add_subcommand("parse", "Viterbi parses of a corpus");
  parse->add_option("--corpus", p_corpus)->required();
  parse->add_option("--checkpoint", p_ckpt)->required();
  parse->add_option("--out", p_out, "Output file (default stdout)");

  EvalArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Perplexity, F1 and distributional metrics");
  evaluate->add_option("--corpus", ea.corpus, "Plain-text corpus for perplexity");
  evaluate->add_option("--gold", ea.gold, "Gold bracketed trees for F1");
  evaluate->add_option("--checkpoint", ea.checkpoint)->required();
  evaluate->add_option("--samples", ea.samples, "Importance samples K")->capture_default_str()->check(CLI::PositiveNumber);
  evaluate->add_option("--temperature", ea.temperature, "Proposal temperature")->capture_default_str();
  evaluate->add_option("--dist-samples", ea.dist_samples, "Samples for KL/prior/reconstruction")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  evaluate->add_option("--seed", ea.seed)->capture_default_str();
  evaluate->add_option("--report", ea.report, "Report file (default stdout)");
  evaluate->add_option("--tsv", ea.tsv, "Per-sentence TSV file");
  evaluate->add_option("--punct", ea.punct, "Punctuation list file");

  std::string s_corpus, s_ckpt;
  int s_n = 5;
  double s_temp = 1.0;
  std::uint64_t s_seed = 1;
  auto* sample = app.add_subcommand("sample", "Draw trees from the inference network");
  sample->add_option("--corpus", s_corpus)->required();
  sample->add_option("--checkpoint", s_ckpt)->required();
  sample->add_option("--n", s_n, "Samples per sentence")->capture_default_str()->check(CLI::PositiveNumber);
  sample->add_option("--temperature", s_temp)->capture_default_str();
  sample->add_option("--seed", s_seed)->capture_default_str();

  std::string g_ckpt;
  int g_n = 10, g_max = 40;
  std::uint64_t g_seed = 1;
  auto* gen = app.add_subcommand("generate", "Sample sentences and trees from the generative model");
  gen->add_option("--checkpoint", g_ckpt)->required();
  gen->add_option("--n", g_n)->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--max-len", g_max)->capture_default_str();
  gen->add_option("--seed", g_seed)->capture_default_str();

  std::string y_grammar = "data/synthetic.grammar", y_prefix = "synth";
  int y_n = 1000, y_min = 3, y_max = 12;
  std::uint64_t y_seed = 1;
  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus and its gold trees");
  synth->add_option("--grammar", y_grammar)->capture_default_str();
  synth->add_option("--n", y_n)->capture_default_str();
  synth->add_option("--min-len", y_min)->capture_default_str();
  synth->add_option("--max-len", y_max)->capture_default_str();
  synth->add_option("--seed", y_seed)->capture_default_str();
  synth->add_option("--out-prefix", y_prefix, "Writes <prefix>.txt and <prefix>.trees")->capture_default_str();

  int v_len = 8, v_trials = 100;
  auto* verify = app.add_subcommand("verify", "Cross-check chart algorithms against enumeration");
  verify->add_option("--max-length", v_len)->capture_default_str();
  verify->add_option("--trials", v_trials)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*parse) return cmd_parse(p_corpus, p_ckpt, p_out);
    if (*evaluate) return cmd_evaluate(ea);
    if (*sample) return cmd_sample(s_corpus, s_ckpt, s_n, s_temp, s_seed);
    if (*gen) return cmd_generate(g_ckpt, g_n, g_max, g_seed);
    if (*synth) return cmd_synth(y_grammar, y_n, y_min, y_max, y_seed, y_prefix);
    if (*verify) return cmd_verify(v_len, v_trials);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
