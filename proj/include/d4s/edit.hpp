#pragma once

// Locate-then-edit algebra on the toy model.
//
// For a fact (s, r, o) an edit
//   1. optimizes a vector delta injected at the last subject token of the
//      last edit layer L so the model emits o under several random prefixes;
//      the target hidden state is z = h^L + delta;
//   2. walks the edit layers in ascending order, reading the MLP key k^l at
//      the subject token (averaged over prefixes) and the residual
//      r^l = (z - h^L) / (L - l + 1) against the current weights;
//   3. rewrites W_out^l with a least-squares update
//        Delta = (R K^T)(C + K K^T)^{-1},   C = lambda K0 K0^T.
//
// Sequential MEMIT solves Delta from the newest (k, r) alone and adds it to
// the current weights. D4S keeps the running sums R K^T and K K^T (an
// EditLedger, constant size in the number of edits) and re-solves the whole
// history against the pristine weights on every edit. The concatenation
// oracle stores K and R explicitly and must agree with the ledger.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "d4s/checkpoint.hpp"
#include "d4s/corpus.hpp"
#include "d4s/errors.hpp"
#include "d4s/evaluation.hpp"
#include "d4s/model.hpp"
#include "d4s/numerics.hpp"

namespace d4s {

struct TargetOptConfig {
  std::size_t max_steps = 100;
  double lr = 0.5;
  double stop_prob = 0.99;
};

struct EditConfig {
  std::vector<std::size_t> edit_layers{1, 2, 3};
  std::size_t n_prefixes = 3;
  std::size_t prefix_length = 4;
  std::uint64_t prefix_seed = 0;
  TargetOptConfig target_opt{};
  double cov_lambda = 1.0;
  std::size_t cov_sample_count = 512;
  double cov_jitter = 0.0;
  std::uint64_t cov_seed = 0;
  // Which tokens of each covariance prompt contribute keys: "last" or "all".
  std::string cov_positions = "last";
  // Weights the ledger-based methods measure residuals against: "pristine"
  // (original weights at this and later edit layers) or "current".
  std::string residual_basis = "pristine";
  // Resolved prefix token strings; see with_prefixes().
  std::vector<TokenSeq> prefixes;

  std::size_t last_edit_layer() const {
    if (edit_layers.empty()) throw ConfigError("edit_layers is empty");
    return edit_layers.back();
  }

  void validate(const ModelConfig& model) const {
    if (edit_layers.empty()) throw ConfigError("edit_layers must not be empty");
    for (std::size_t i = 0; i < edit_layers.size(); ++i) {
      if (edit_layers[i] >= model.n_layers) {
        throw ConfigError("edit layer " + std::to_string(edit_layers[i]) + " >= n_layers");
      }
      if (i > 0 && edit_layers[i] <= edit_layers[i - 1]) {
        throw ConfigError("edit_layers must be strictly increasing");
      }
    }
    if (!(target_opt.stop_prob > 0.0 && target_opt.stop_prob <= 1.0)) {
      throw ConfigError("stop_prob must lie in (0, 1]");
    }
    if (cov_lambda < 0.0) throw ConfigError("cov_lambda must be non-negative");
    if (residual_basis != "pristine" && residual_basis != "current") {
      throw ConfigError("residual_basis must be 'pristine' or 'current', got '" + residual_basis +
                        "'");
    }
    if (cov_positions != "last" && cov_positions != "all") {
      throw ConfigError("cov_positions must be 'last' or 'all', got '" + cov_positions + "'");
    }
    if (prefixes.empty()) throw ConfigError("prefixes not resolved; call with_prefixes()");
  }

  // Copy with `prefixes` filled in: n_prefixes strings, the first one empty.
  EditConfig with_prefixes(const Vocabulary& vocab) const {
    EditConfig out = *this;
    out.prefixes = random_prefixes(vocab, n_prefixes, prefix_length, prefix_seed);
    return out;
  }
};

// A prompt and the continuation the edit should make the model produce.
struct EditRequest {
  RenderedPrompt prompt;
  TokenSeq target;
};

inline EditRequest make_request(const FactRecord& fact, const Vocabulary& vocab) {
  return {render_prompt(fact, Variant::base(), vocab), vocab.encode(fact.new_object)};
}

struct TargetSolution {
  Vector hidden;  // h^L at the last subject token, captured before optimizing
  Vector delta;
  Vector z;       // hidden + delta
  double final_target_prob = 0.0;
  std::size_t steps_used = 0;
  std::vector<double> prob_trace;  // target probability after each accepted step
};

struct KeyResidual {
  Vector key;
  Vector residual;
};

struct LayerDelta {
  std::size_t layer = 0;
  Matrix delta;
};

namespace detail {

inline TokenSeq subject_context(std::span<const Token> prefix, const RenderedPrompt& prompt,
                                std::size_t& subject_position) {
  TokenSeq t;
  t.push_back(kBos);
  t.insert(t.end(), prefix.begin(), prefix.end());
  subject_position = t.size() + prompt.subject_last;
  t.insert(t.end(), prompt.tokens.begin(),
           prompt.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.subject_last + 1));
  return t;
}

inline void check_prompt(const RenderedPrompt& prompt) {
  if (prompt.tokens.empty() || prompt.subject_last >= prompt.tokens.size()) {
    throw ConfigError("prompt does not contain its subject token");
  }
}

}  // namespace detail

// Hidden state h^layer at the last subject token of the bare prompt.
inline Vector subject_hidden(const ToyModel& model, const RenderedPrompt& prompt,
                             std::size_t layer) {
  detail::check_prompt(prompt);
  std::size_t pos = 0;
  const TokenSeq tokens = detail::subject_context({}, prompt, pos);
  const HiddenTrace trace = trace_through(model, tokens, layer);
  const auto row = trace.layers[layer].hidden.row_span(pos);
  return Vector(row.begin(), row.end());
}

// Gradient descent on delta. The step size doubles after an accepted step and
// halves until the loss does not rise, so recorded probabilities never
// decrease. The loss is the per-token mean negative log-likelihood averaged
// over prefixes; the reported probability is exp(-loss).
inline TargetSolution solve_target(const ToyModel& model, const EditRequest& request,
                                   const EditConfig& cfg) {
  cfg.validate(model.config);
  detail::check_prompt(request.prompt);
  if (request.target.empty()) throw ConfigError("edit target is empty");
  const std::size_t layer = cfg.last_edit_layer();

  std::vector<InjectionProbe> probes;
  probes.reserve(cfg.prefixes.size());
  for (const auto& prefix : cfg.prefixes) {
    Sequence s = assemble(prefix, request.prompt, request.target);
    if (s.tokens.size() > model.config.max_seq_len) {
      throw LengthError("prefix + prompt + target exceeds max_seq_len");
    }
    for (auto& t : s.targets) t.weight = 1.0 / static_cast<double>(request.target.size());
    probes.emplace_back(model, std::move(s.tokens), layer, s.subject_position,
                        std::move(s.targets));
  }

  TargetSolution sol;
  sol.hidden = subject_hidden(model, request.prompt, layer);
  const std::size_t d = model.config.d_model;
  sol.delta.assign(d, 0.0);

  const double inv_n = 1.0 / static_cast<double>(probes.size());
  auto evaluate = [&](const Vector& delta, Vector& grad) {
    double loss = 0.0;
    grad.assign(d, 0.0);
    for (auto& p : probes) {
      const auto r = p.evaluate(delta, true);
      loss += r.loss * inv_n;
      for (std::size_t c = 0; c < d; ++c) grad[c] += r.grad[c] * inv_n;
    }
    return loss;
  };

  Vector grad;
  double loss = evaluate(sol.delta, grad);
  double prob = std::exp(-loss);
  sol.prob_trace.push_back(prob);

  if (prob < cfg.target_opt.stop_prob) {
    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    if (gnorm == 0.0) {
      throw StalledError("zero gradient at delta = 0 with target probability " +
                         std::to_string(prob));
    }
    Vector trial(d), trial_grad;
    double lr = cfg.target_opt.lr;
    while (sol.steps_used < cfg.target_opt.max_steps && prob < cfg.target_opt.stop_prob) {
      double trial_loss = 0.0;
      bool accepted = false;
      for (int halving = 0; halving < 60; ++halving, lr *= 0.5) {
        for (std::size_t c = 0; c < d; ++c) trial[c] = sol.delta[c] - lr * grad[c];
        trial_loss = evaluate(trial, trial_grad);
        if (std::isfinite(trial_loss) && trial_loss <= loss) {
          accepted = true;
          break;
        }
      }
      if (!accepted) break;
      ++sol.steps_used;
      sol.delta = trial;
      grad = trial_grad;
      loss = trial_loss;
      prob = std::exp(-loss);
      sol.prob_trace.push_back(prob);
      lr *= 2.0;
    }
  }
  sol.final_target_prob = prob;
  sol.z.resize(d);
  for (std::size_t c = 0; c < d; ++c) sol.z[c] = sol.hidden[c] + sol.delta[c];
  return sol;
}

// Mean MLP key at the last subject token over the given prefixes.
inline Vector extract_key(const ToyModel& model, const RenderedPrompt& prompt, std::size_t layer,
                          std::span<const TokenSeq> prefixes) {
  detail::check_prompt(prompt);
  if (prefixes.empty()) throw ConfigError("extract_key needs at least one prefix");
  Vector key(model.config.d_mlp_hidden, 0.0);
  for (const auto& prefix : prefixes) {
    std::size_t pos = 0;
    const TokenSeq tokens = detail::subject_context(prefix, prompt, pos);
    const HiddenTrace trace = trace_through(model, tokens, layer);
    const auto row = trace.layers[layer].mlp_key.row_span(pos);
    for (std::size_t c = 0; c < key.size(); ++c) key[c] += row[c];
  }
  const double n = static_cast<double>(prefixes.size());
  for (double& x : key) x /= n;
  return key;
}

inline Vector extract_key(const ToyModel& model, const EditRequest& request, std::size_t layer,
                          const EditConfig& cfg) {
  bool member = false;
  for (std::size_t l : cfg.edit_layers) member = member || l == layer;
  if (!member) throw ConfigError("layer " + std::to_string(layer) + " is not an edit layer");
  return extract_key(model, request.prompt, layer, cfg.prefixes);
}

// (z - h_L) / (L - layer + 1).
inline Vector spread_residual(std::span<const double> z, std::span<const double> h_last,
                              std::size_t layer, std::size_t last_layer) {
  if (layer > last_layer) throw ConfigError("residual layer lies above the last edit layer");
  if (z.size() != h_last.size()) throw ShapeError("spread_residual: length mismatch");
  const double denom = static_cast<double>(last_layer - layer + 1);
  Vector r(z.size());
  for (std::size_t c = 0; c < z.size(); ++c) r[c] = (z[c] - h_last[c]) / denom;
  return r;
}

// lambda * sum k k^T (+ jitter I). Positive definiteness is checked unless
// lambda is zero, which yields the zero matrix.
inline SymmetricPD covariance_from_keys(std::span<const Vector> keys, std::size_t dim,
                                        double lambda, double jitter = 0.0) {
  Matrix acc(dim, dim);
  for (const auto& k : keys) rank1_update(acc, k, k, 1.0);
  acc *= lambda;
  for (std::size_t i = 0; i < dim; ++i) acc(i, i) += jitter;
  SymmetricPD cov(acc);
  if (lambda != 0.0 || jitter != 0.0) {
    try {
      (void)cholesky(cov);
    } catch (const SingularityError& e) {
      throw SingularityError(std::string("covariance is rank deficient (") + e.what() +
                                 "); use more samples or enable jitter",
                             e.leading_minor());
    }
  }
  return cov;
}

// Keys of unrelated text: the MLP activation at the last token of each of the
// first cov_sample_count prompts, or at every token with cov_positions = "all".
inline SymmetricPD build_covariance(const ToyModel& model, std::span<const TokenSeq> prompts,
                                    std::size_t layer, const EditConfig& cfg) {
  if (prompts.size() < cfg.cov_sample_count) {
    throw ConfigError("need " + std::to_string(cfg.cov_sample_count) +
                      " covariance prompts, got " + std::to_string(prompts.size()));
  }
  std::vector<Vector> keys;
  keys.reserve(cfg.cov_sample_count);
  for (std::size_t i = 0; i < cfg.cov_sample_count; ++i) {
    const HiddenTrace trace = trace_through(model, prompts[i], layer);
    const std::size_t last = prompts[i].size() - 1;
    const std::size_t first = cfg.cov_positions == "all" ? 0 : last;
    for (std::size_t j = first; j <= last; ++j) {
      const auto row = trace.layers[layer].mlp_key.row_span(j);
      keys.emplace_back(row.begin(), row.end());
    }
  }
  return covariance_from_keys(keys, model.config.d_mlp_hidden, cfg.cov_lambda, cfg.cov_jitter);
}

// Delta = (R K^T)(C + K K^T)^{-1} through a Cholesky solve.
inline LayerDelta solve_delta_batch(const Matrix& rk, const Matrix& kk, const SymmetricPD& cov,
                                    std::size_t layer = 0) {
  return {layer, solve_spd(cov.plus(kk), rk)};
}

// Reference O(n)-memory solve from the explicit key/residual history.
inline LayerDelta oracle_concat_delta(std::span<const KeyResidual> history,
                                      const SymmetricPD& cov, std::size_t layer = 0) {
  if (history.empty()) throw ConfigError("oracle_concat_delta needs a non-empty history");
  const std::size_t u = history.front().residual.size();
  const std::size_t v = history.front().key.size();
  const std::size_t n = history.size();
  Matrix keys(v, n), residuals(u, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (history[i].key.size() != v || history[i].residual.size() != u) {
      throw ShapeError("history entries have inconsistent lengths");
    }
    for (std::size_t c = 0; c < v; ++c) keys(c, i) = history[i].key[c];
    for (std::size_t c = 0; c < u; ++c) residuals(c, i) = history[i].residual[c];
  }
  const Matrix kt = transpose(keys);
  return solve_delta_batch(matmul(residuals, kt), matmul(keys, kt), cov, layer);
}

// ---------------------------------------------------------------------------
// Ledger

struct LayerLedger {
  std::size_t layer = 0;
  Matrix rk_acc;  // sum r k^T, d_model x d_mlp
  Matrix kk_acc;  // sum k k^T, d_mlp x d_mlp
  SymmetricPD cov;
  Matrix w_out_original;
  std::size_t edit_count = 0;

  std::size_t byte_size() const {
    return sizeof(double) * (rk_acc.size() + kk_acc.size() + cov.matrix().size() +
                             w_out_original.size()) +
           2 * sizeof(std::size_t);
  }
  bool operator==(const LayerLedger&) const = default;
};

struct EditLedger {
  std::vector<LayerLedger> layers;

  std::size_t edit_count() const { return layers.empty() ? 0 : layers.front().edit_count; }
  std::size_t byte_size() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.byte_size();
    return n;
  }
  bool operator==(const EditLedger&) const = default;
};

inline LayerLedger& ledger_integrate(LayerLedger& ledger, std::span<const double> key,
                                     std::span<const double> residual) {
  rank1_update(ledger.rk_acc, residual, key, 1.0);
  rank1_update(ledger.kk_acc, key, key, 1.0);
  ++ledger.edit_count;
  return ledger;
}

inline LayerDelta solve_delta_batch(const LayerLedger& ledger) {
  return solve_delta_batch(ledger.rk_acc, ledger.kk_acc, ledger.cov, ledger.layer);
}

// One covariance per edit layer, in edit_layers order.
struct LayerCovariances {
  std::vector<std::size_t> layers;
  std::vector<SymmetricPD> covs;
};

inline LayerCovariances build_covariances(const ToyModel& model,
                                          std::span<const TokenSeq> prompts,
                                          const EditConfig& cfg) {
  LayerCovariances out;
  for (std::size_t l : cfg.edit_layers) {
    out.layers.push_back(l);
    out.covs.push_back(build_covariance(model, prompts, l, cfg));
  }
  return out;
}

inline EditLedger make_ledger(const ToyModel& model, const LayerCovariances& covs) {
  EditLedger ledger;
  for (std::size_t i = 0; i < covs.layers.size(); ++i) {
    const std::size_t l = covs.layers[i];
    LayerLedger ll;
    ll.layer = l;
    ll.rk_acc = Matrix(model.config.d_model, model.config.d_mlp_hidden);
    ll.kk_acc = Matrix(model.config.d_mlp_hidden, model.config.d_mlp_hidden);
    ll.cov = covs.covs[i];
    ll.w_out_original = model.w_out(l);
    ledger.layers.push_back(std::move(ll));
  }
  return ledger;
}

// ---------------------------------------------------------------------------
// Edit pipelines

struct LayerNorm {
  std::size_t layer = 0;
  double l1 = 0.0;
};

struct EditReceipt {
  std::size_t edit_index = 0;
  std::string method;
  double solved_target_prob = 0.0;  // optimizer's probability with delta injected
  double final_target_prob = 0.0;   // target probability on the edited model
  std::size_t target_steps = 0;
  std::vector<LayerNorm> per_layer_l1;
  double wall_time = 0.0;  // seconds
  std::vector<KeyResidual> updates;  // (k, r) per edit layer, in layer order
};

inline nlohmann::json to_json(const EditReceipt& r) {
  nlohmann::json l1 = nlohmann::json::array();
  for (const auto& n : r.per_layer_l1) l1.push_back({{"layer", n.layer}, {"l1", n.l1}});
  return {{"edit_index", r.edit_index},
          {"method", r.method},
          {"final_target_prob", r.final_target_prob},
          {"solved_target_prob", r.solved_target_prob},
          {"target_steps", r.target_steps},
          {"per_layer_l1_norm", l1},
          {"wall_time", r.wall_time}};
}

namespace detail {

// Shared pipeline. apply(slot, layer, key, residual, work) rewrites
// work.w_out(layer). The caller's model is replaced only if every step succeeds.
// With non-empty originals (one per edit layer) and residual_basis "pristine",
// h^L for layer slot s is read with edit layers s.. restored to originals.
template <class ApplyLayer>
EditReceipt run_edit(ToyModel& model, const EditRequest& request, const EditConfig& cfg,
                     std::string method, ApplyLayer&& apply,
                     std::span<const Matrix* const> originals = {}) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate(model.config);
  const std::size_t last = cfg.last_edit_layer();

  const TargetSolution sol = solve_target(model, request, cfg);
  ToyModel work = model;
  EditReceipt receipt;
  receipt.method = std::move(method);
  receipt.solved_target_prob = sol.final_target_prob;
  receipt.target_steps = sol.steps_used;
  for (std::size_t slot = 0; slot < cfg.edit_layers.size(); ++slot) {
    const std::size_t l = cfg.edit_layers[slot];
    KeyResidual kr;
    kr.key = extract_key(work, request.prompt, l, cfg.prefixes);
    Vector h_last;
    if (!originals.empty() && cfg.residual_basis == "pristine") {
      ToyModel basis = work;
      for (std::size_t t = slot; t < cfg.edit_layers.size(); ++t) {
        basis.w_out(cfg.edit_layers[t]) = *originals[t];
      }
      h_last = subject_hidden(basis, request.prompt, last);
    } else {
      h_last = subject_hidden(work, request.prompt, last);
    }
    kr.residual = spread_residual(sol.z, h_last, l, last);
    apply(slot, l, kr.key, kr.residual, work);
    if (!work.w_out(l).all_finite()) {
      throw NumericError("non-finite weights after editing layer " + std::to_string(l));
    }
    receipt.updates.push_back(std::move(kr));
  }
  receipt.final_target_prob = target_probability(work, request.prompt, request.target);
  for (std::size_t l : cfg.edit_layers) receipt.per_layer_l1.push_back({l, l1_norm(work.w_out(l))});
  model = std::move(work);
  receipt.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return receipt;
}

inline void check_layers(const EditConfig& cfg, const std::vector<std::size_t>& layers) {
  if (layers != cfg.edit_layers) throw ConfigError("editor state was built for other edit layers");
}

}  // namespace detail

// Integrates the new (k, r) into the ledger and re-solves the whole history
// against the pristine weights.
inline EditReceipt d4s_edit(ToyModel& model, EditLedger& ledger, const EditRequest& request,
                            const EditConfig& cfg) {
  std::vector<std::size_t> layers;
  for (const auto& l : ledger.layers) layers.push_back(l.layer);
  detail::check_layers(cfg, layers);
  EditLedger work = ledger;
  std::vector<const Matrix*> originals;
  for (const auto& l : ledger.layers) originals.push_back(&l.w_out_original);
  EditReceipt receipt = detail::run_edit(
      model, request, cfg, "d4s",
      [&](std::size_t slot, std::size_t l, const Vector& k, const Vector& r, ToyModel& m) {
        LayerLedger& ll = work.layers[slot];
        ledger_integrate(ll, k, r);
        m.w_out(l) = ll.w_out_original + solve_delta_batch(ll).delta;
      },
      originals);
  ledger = std::move(work);
  return receipt;
}

// Solves Delta from this edit's (k, r) alone and adds it to the current weights.
inline EditReceipt memit_sequential_edit(ToyModel& model, const LayerCovariances& covs,
                                         const EditRequest& request, const EditConfig& cfg) {
  detail::check_layers(cfg, covs.layers);
  return detail::run_edit(
      model, request, cfg, "memit_seq",
      [&](std::size_t slot, std::size_t l, const Vector& k, const Vector& r, ToyModel& m) {
        Matrix rk(r.size(), k.size());
        Matrix kk(k.size(), k.size());
        rank1_update(rk, r, k, 1.0);
        rank1_update(kk, k, k, 1.0);
        m.w_out(l) += solve_delta_batch(rk, kk, covs.covs[slot], l).delta;
      });
}

// Single-layer specialization of the sequential update.
inline EditReceipt rome_style_edit(ToyModel& model, const LayerCovariances& covs,
                                   const EditRequest& request, const EditConfig& cfg) {
  if (cfg.edit_layers.size() != 1) {
    throw ConfigError("rome_style_edit needs exactly one edit layer, got " +
                      std::to_string(cfg.edit_layers.size()));
  }
  EditReceipt receipt = memit_sequential_edit(model, covs, request, cfg);
  receipt.method = "rome_style";
  return receipt;
}

// Same pipeline as d4s_edit, but keeps every (k, r) and re-solves from the
// concatenated history.
struct ConcatHistory {
  std::vector<std::size_t> layers;
  std::vector<SymmetricPD> covs;
  std::vector<Matrix> w_out_original;
  std::vector<std::vector<KeyResidual>> history;  // per layer slot
};

inline ConcatHistory make_concat_history(const ToyModel& model, const LayerCovariances& covs) {
  ConcatHistory h;
  h.layers = covs.layers;
  h.covs = covs.covs;
  for (std::size_t l : covs.layers) h.w_out_original.push_back(model.w_out(l));
  h.history.resize(covs.layers.size());
  return h;
}

inline EditReceipt oracle_concat_edit(ToyModel& model, ConcatHistory& state,
                                      const EditRequest& request, const EditConfig& cfg) {
  detail::check_layers(cfg, state.layers);
  ConcatHistory work = state;
  std::vector<const Matrix*> originals;
  for (const auto& w : state.w_out_original) originals.push_back(&w);
  EditReceipt receipt = detail::run_edit(
      model, request, cfg, "oracle_concat",
      [&](std::size_t slot, std::size_t l, const Vector& k, const Vector& r, ToyModel& m) {
        work.history[slot].push_back({k, r});
        m.w_out(l) =
            work.w_out_original[slot] + oracle_concat_delta(work.history[slot], work.covs[slot], l).delta;
      },
      originals);
  state = std::move(work);
  return receipt;
}

// ---------------------------------------------------------------------------
// Editor state serialization (same binary conventions as model checkpoints)

namespace io {

inline void write_sym(std::ostream& os, const std::string& name, const SymmetricPD& s) {
  write_matrix(os, name, s.matrix());
}

inline void write_ledger(std::ostream& os, const EditLedger& ledger) {
  os.write("D4SLEDGR", 8);
  write_u64(os, ledger.layers.size());
  for (const auto& l : ledger.layers) {
    write_u64(os, l.layer);
    write_u64(os, l.edit_count);
    write_matrix(os, "rk_acc", l.rk_acc);
    write_matrix(os, "kk_acc", l.kk_acc);
    write_sym(os, "cov", l.cov);
    write_matrix(os, "w_out_original", l.w_out_original);
  }
}

inline EditLedger read_ledger(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "D4SLEDGR") {
    throw ParseError("not a ledger file (bad magic)", 0);
  }
  EditLedger ledger;
  const std::uint64_t n = read_u64(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    LayerLedger l;
    l.layer = read_u64(is);
    l.edit_count = read_u64(is);
    l.rk_acc = read_matrix(is, "rk_acc");
    l.kk_acc = read_matrix(is, "kk_acc");
    l.cov = SymmetricPD(read_matrix(is, "cov"));
    l.w_out_original = read_matrix(is, "w_out_original");
    ledger.layers.push_back(std::move(l));
  }
  return ledger;
}

}  // namespace io

}  // namespace d4s
