#pragma once

// Editing metrics. Efficacy, paraphrase and specificity are means of argmax
// indicators; a multi-token object counts only if every token is the argmax
// under teacher forcing. Argmax ties go to the lowest token id.
//
// Any type with an ADL-visible
//     Matrix score_positions(const M&, std::span<const Token>, std::span<const std::size_t>)
// returning one row of next-token scores per requested position can be
// evaluated, which keeps the metric definitions testable with stub models.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "d4s/corpus.hpp"
#include "d4s/errors.hpp"
#include "d4s/model.hpp"
#include "d4s/numerics.hpp"

namespace d4s {

inline Matrix score_positions(const ToyModel& model, std::span<const Token> tokens,
                              std::span<const std::size_t> positions) {
  return logits_at(model, tokens, positions);
}

template <class M>
concept ScoringModel = requires(const M& m, std::span<const Token> t,
                                std::span<const std::size_t> p) {
  { score_positions(m, t, p) } -> std::convertible_to<Matrix>;
};

inline Token argmax_token(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return static_cast<Token>(best);
}

// exp(-(1/t) sum log p).
inline double perplexity(std::span<const double> logprobs) {
  if (logprobs.empty()) throw Error("perplexity of an empty sequence is undefined");
  double s = 0.0;
  for (double lp : logprobs) s += lp;
  return std::exp(-s / static_cast<double>(logprobs.size()));
}

namespace detail {

template <ScoringModel M>
Matrix target_scores(const M& model, const RenderedPrompt& prompt, std::span<const Token> target,
                     Sequence& seq) {
  if (target.empty()) throw ConfigError("empty target");
  seq = assemble({}, prompt, target);
  std::vector<std::size_t> positions;
  positions.reserve(seq.targets.size());
  for (const auto& t : seq.targets) positions.push_back(t.position);
  return score_positions(model, seq.tokens, positions);
}

inline double log_softmax_at(std::span<const double> row, Token t) {
  double mx = -INFINITY;
  for (double x : row) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : row) z += std::exp(x - mx);
  return row[t] - mx - std::log(z);
}

}  // namespace detail

template <ScoringModel M>
bool predicts(const M& model, const RenderedPrompt& prompt, std::span<const Token> target) {
  Sequence seq;
  const Matrix scores = detail::target_scores(model, prompt, target, seq);
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (argmax_token(scores.row_span(i)) != target[i]) return false;
  }
  return true;
}

// Per-token log-probabilities of target continuing prompt (teacher forcing).
template <ScoringModel M>
Vector target_logprobs(const M& model, const RenderedPrompt& prompt,
                       std::span<const Token> target) {
  Sequence seq;
  const Matrix scores = detail::target_scores(model, prompt, target, seq);
  Vector out(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    out[i] = detail::log_softmax_at(scores.row_span(i), target[i]);
  }
  return out;
}

// Geometric-mean token probability of the target: exp(mean log p).
template <ScoringModel M>
double target_probability(const M& model, const RenderedPrompt& prompt,
                          std::span<const Token> target) {
  return 1.0 / perplexity(target_logprobs(model, prompt, target));
}

template <ScoringModel M>
double evaluate_efficacy(const M& model, std::span<const FactRecord> facts,
                         const Vocabulary& vocab) {
  if (facts.empty()) throw ConfigError("efficacy needs at least one fact");
  std::size_t hits = 0;
  for (const auto& f : facts) {
    hits += predicts(model, render_prompt(f, Variant::base(), vocab), vocab.encode(f.new_object));
  }
  return static_cast<double>(hits) / static_cast<double>(facts.size());
}

// Same indicator, scored against old_object: how many base facts the model knows.
template <ScoringModel M>
double base_fact_accuracy(const M& model, std::span<const FactRecord> facts,
                          const Vocabulary& vocab) {
  if (facts.empty()) throw ConfigError("accuracy needs at least one fact");
  std::size_t hits = 0;
  for (const auto& f : facts) {
    hits += predicts(model, render_prompt(f, Variant::base(), vocab), vocab.encode(f.old_object));
  }
  return static_cast<double>(hits) / static_cast<double>(facts.size());
}

template <ScoringModel M>
double evaluate_paraphrase(const M& model, std::span<const FactRecord> facts,
                           const Vocabulary& vocab) {
  if (facts.empty()) throw ConfigError("paraphrase score needs at least one fact");
  double total = 0.0;
  for (const auto& f : facts) {
    if (f.paraphrases.empty()) throw ConfigError("fact has no paraphrase prompts");
    const TokenSeq target = vocab.encode(f.new_object);
    std::size_t hits = 0;
    for (std::size_t k = 0; k < f.paraphrases.size(); ++k) {
      hits += predicts(model, render_prompt(f, Variant::paraphrase(k), vocab), target);
    }
    total += static_cast<double>(hits) / static_cast<double>(f.paraphrases.size());
  }
  return total / static_cast<double>(facts.size());
}

template <ScoringModel M>
double evaluate_specificity(const M& model, std::span<const FactRecord> facts,
                            const Vocabulary& vocab) {
  if (facts.empty()) throw ConfigError("specificity needs at least one fact");
  double total = 0.0;
  for (const auto& f : facts) {
    if (f.neighbors.empty()) throw ConfigError("fact has an empty neighborhood");
    std::size_t hits = 0;
    for (std::size_t k = 0; k < f.neighbors.size(); ++k) {
      hits += predicts(model, render_prompt(f, Variant::neighbor(k), vocab),
                       vocab.encode(f.neighbors[k].object));
    }
    total += static_cast<double>(hits) / static_cast<double>(f.neighbors.size());
  }
  return total / static_cast<double>(facts.size());
}

// Mean per-fact perplexity of the editing objective (new_object) under the model.
template <ScoringModel M>
double objective_perplexity(const M& model, std::span<const FactRecord> facts,
                            const Vocabulary& vocab) {
  if (facts.empty()) throw ConfigError("perplexity needs at least one fact");
  double total = 0.0;
  for (const auto& f : facts) {
    total += perplexity(target_logprobs(model, render_prompt(f, Variant::base(), vocab),
                                        vocab.encode(f.new_object)));
  }
  return total / static_cast<double>(facts.size());
}

struct EvalReport {
  double efficacy = 0.0;
  double paraphrase = 0.0;
  double specificity = 0.0;
  double average = 0.0;
  std::vector<double> per_edit_target_prob;
  std::vector<std::vector<double>> per_layer_l1;  // [layer slot][checkpoint]
};

template <ScoringModel M>
EvalReport evaluate_report(const M& model, std::span<const FactRecord> facts,
                           const Vocabulary& vocab) {
  EvalReport r;
  r.efficacy = evaluate_efficacy(model, facts, vocab);
  r.paraphrase = evaluate_paraphrase(model, facts, vocab);
  r.specificity = evaluate_specificity(model, facts, vocab);
  r.average = (r.efficacy + r.paraphrase + r.specificity) / 3.0;
  return r;
}

// ---------------------------------------------------------------------------
// Forgetting protocols

struct ForgettingCurve {
  enum class Protocol { overall, degree };
  struct Bucket {
    std::size_t begin = 0;  // first edit index, inclusive
    std::size_t end = 0;    // exclusive
    double efficacy = 0.0;
  };
  Protocol protocol = Protocol::overall;
  std::vector<std::size_t> checkpoints;  // edits applied when measured
  std::vector<Bucket> buckets;
};

template <class M>
struct ModelCheckpoint {
  std::size_t edits_done = 0;
  const M* model = nullptr;
};

// Efficacy over every previously edited fact, at each checkpoint.
template <ScoringModel M>
ForgettingCurve forgetting_overall(std::span<const ModelCheckpoint<M>> checkpoints,
                                   std::span<const FactRecord> edited, const Vocabulary& vocab,
                                   std::size_t stride) {
  if (stride == 0) throw ConfigError("checkpoint stride must be at least 1");
  ForgettingCurve c;
  c.protocol = ForgettingCurve::Protocol::overall;
  for (const auto& cp : checkpoints) {
    if (cp.edits_done == 0 || cp.edits_done % stride != 0 || cp.edits_done > edited.size() ||
        cp.model == nullptr) {
      throw IndexError("checkpoint at " + std::to_string(cp.edits_done) +
                       " edits does not align with stride " + std::to_string(stride) + " and " +
                       std::to_string(edited.size()) + " edited facts");
    }
    c.checkpoints.push_back(cp.edits_done);
    c.buckets.push_back(
        {0, cp.edits_done, evaluate_efficacy(*cp.model, edited.first(cp.edits_done), vocab)});
  }
  return c;
}

// Efficacy per run of `bucket` consecutive edits, measured on the final model.
template <ScoringModel M>
ForgettingCurve forgetting_degree(const M& final_model, std::span<const FactRecord> edited,
                                  const Vocabulary& vocab, std::size_t bucket = 100) {
  if (bucket == 0) throw ConfigError("bucket size must be at least 1");
  if (edited.empty()) throw ConfigError("forgetting degree needs at least one edited fact");
  ForgettingCurve c;
  c.protocol = ForgettingCurve::Protocol::degree;
  c.checkpoints.push_back(edited.size());
  for (std::size_t b = 0; b < edited.size(); b += bucket) {
    const std::size_t e = std::min(edited.size(), b + bucket);
    c.buckets.push_back({b, e, evaluate_efficacy(final_model, edited.subspan(b, e - b), vocab)});
  }
  return c;
}

// ---------------------------------------------------------------------------
// Report files

// Fixed column order: edit_index,metric,value.
struct SeriesRow {
  std::size_t edit_index = 0;
  std::string metric;
  double value = 0.0;
};

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_series_csv(const std::filesystem::path& path, std::span<const SeriesRow> rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << "edit_index,metric,value\n";
  for (const auto& r : rows) os << r.edit_index << ',' << r.metric << ',' << format_real(r.value) << '\n';
}

inline std::vector<SeriesRow> read_series_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  std::vector<SeriesRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    if (++line_no == 1 || line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) {
      throw ParseError(path.string() + ": malformed line " + std::to_string(line_no), line_no);
    }
    rows.push_back({std::stoul(line.substr(0, c1)), line.substr(c1 + 1, c2 - c1 - 1),
                    std::stod(line.substr(c2 + 1))});
  }
  return rows;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"efficacy", r.efficacy},
          {"paraphrase", r.paraphrase},
          {"specificity", r.specificity},
          {"average", r.average},
          {"per_edit_target_prob", r.per_edit_target_prob},
          {"per_layer_l1", r.per_layer_l1}};
}

inline nlohmann::json to_json(const ForgettingCurve& c) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : c.buckets) {
    buckets.push_back({{"begin", b.begin}, {"end", b.end}, {"efficacy", b.efficacy}});
  }
  return {{"protocol", c.protocol == ForgettingCurve::Protocol::overall ? "overall" : "degree"},
          {"checkpoints", c.checkpoints},
          {"buckets", buckets}};
}

}  // namespace d4s
