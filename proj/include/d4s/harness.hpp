#pragma once

// Experiment orchestration: corpus -> pretrained base model -> sequential edit
// loop -> checkpoints, CSV series and reports, all inside one run directory.
//
// Run directory layout:
//   manifest.json            resolved config, derived seeds, status, stage log
//   corpus.jsonl, vocab.txt  the facts and token inventory used
//   base_model.bin           pretrained (unedited) model
//   pretrain_curve.csv       step,loss
//   receipts.jsonl           one EditReceipt per edit
//   series.csv               edit_index,metric,value (per-edit and checkpoint metrics)
//   checkpoints/edit_N/      model.bin (+ editor state) every checkpoint_stride edits
//   forgetting_overall.csv, forgetting_degree.csv   edit_index,metric,value
//   report.json              base and edited EvalReport, forgetting curves

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "d4s/checkpoint.hpp"
#include "d4s/corpus.hpp"
#include "d4s/edit.hpp"
#include "d4s/errors.hpp"
#include "d4s/evaluation.hpp"
#include "d4s/model.hpp"

namespace d4s {

inline constexpr int kManifestSchemaVersion = 1;

struct FineTuneOptions {
  std::size_t steps = 20;
  double lr = 0.1;
};

struct ExperimentConfig {
  ModelConfig model{};
  EditConfig edit{};
  CorpusSpec corpus = [] {
    CorpusSpec c;
    c.n_facts = 200;
    return c;
  }();
  PretrainOptions pretrain = [] {
    PretrainOptions p;
    p.steps = 2000;
    p.max_prefix_len = 4;
    p.prefix_prob = 0.5;
    return p;
  }();
  FineTuneOptions ft{};
  std::string method = "d4s";
  std::size_t n_edits = 200;
  std::size_t checkpoint_stride = 50;
  std::size_t forgetting_bucket = 100;
  std::string output_dir = "runs/default";
  std::string base_model;  // optional checkpoint to load instead of pretraining
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    if (edit.n_prefixes == 0) throw ConfigError("edit.n_prefixes must be at least 1");
    EditConfig e = edit;
    if (e.prefixes.empty()) e.prefixes.emplace_back();  // resolved later from the seed
    e.validate(model);
    static const std::vector<std::string> methods = {"d4s", "memit_seq", "rome_style",
                                                     "oracle_concat", "ft_naive"};
    if (std::find(methods.begin(), methods.end(), method) == methods.end()) {
      throw ConfigError("unknown method '" + method +
                        "' (expected d4s, memit_seq, rome_style, oracle_concat or ft_naive)");
    }
    if (method == "rome_style" && edit.edit_layers.size() != 1) {
      throw ConfigError("rome_style needs exactly one edit layer");
    }
    if (n_edits > corpus.n_facts) {
      throw ConfigError("n_edits (" + std::to_string(n_edits) + ") exceeds corpus size (" +
                        std::to_string(corpus.n_facts) + ")");
    }
    if (checkpoint_stride == 0) throw ConfigError("checkpoint_stride must be at least 1");
    if (forgetting_bucket == 0) throw ConfigError("forgetting_bucket must be at least 1");
    if (corpus.vocab_size != model.vocab_size) {
      throw ConfigError("corpus.vocab_size must equal model.vocab_size");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }
};

// ---------------------------------------------------------------------------
// Seeds: every stochastic component draws from a seed derived from the single
// experiment seed, so one number pins the whole run.

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Copy with component seeds filled in from cfg.seed.
inline ExperimentConfig resolve_seeds(ExperimentConfig cfg) {
  cfg.model.seed = derive_seed(cfg.seed, 1);
  cfg.corpus.seed = derive_seed(cfg.seed, 2);
  cfg.pretrain.seed = derive_seed(cfg.seed, 3);
  cfg.edit.prefix_seed = derive_seed(cfg.seed, 4);
  cfg.edit.cov_seed = derive_seed(cfg.seed, 5);
  return cfg;
}

// ---------------------------------------------------------------------------
// JSON config. Unknown keys are rejected so typos do not silently fall back
// to defaults.

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where,
                           std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size},     {"d_model", m.d_model},
          {"n_layers", m.n_layers},         {"n_heads", m.n_heads},
          {"d_mlp_hidden", m.d_mlp_hidden}, {"max_seq_len", m.max_seq_len},
          {"mlp_reads_residual", m.mlp_reads_residual}};
}

inline void from_json_into(const nlohmann::json& j, ModelConfig& m) {
  detail::reject_unknown(j, "model",
                         {"vocab_size", "d_model", "n_layers", "n_heads", "d_mlp_hidden",
                          "max_seq_len", "mlp_reads_residual"});
  detail::read_field(j, "vocab_size", m.vocab_size, "model");
  detail::read_field(j, "d_model", m.d_model, "model");
  detail::read_field(j, "n_layers", m.n_layers, "model");
  detail::read_field(j, "n_heads", m.n_heads, "model");
  detail::read_field(j, "d_mlp_hidden", m.d_mlp_hidden, "model");
  detail::read_field(j, "max_seq_len", m.max_seq_len, "model");
  detail::read_field(j, "mlp_reads_residual", m.mlp_reads_residual, "model");
}

inline nlohmann::json to_json(const EditConfig& e) {
  return {{"edit_layers", e.edit_layers},
          {"n_prefixes", e.n_prefixes},
          {"prefix_length", e.prefix_length},
          {"target_opt",
           {{"max_steps", e.target_opt.max_steps},
            {"lr", e.target_opt.lr},
            {"stop_prob", e.target_opt.stop_prob}}},
          {"cov_lambda", e.cov_lambda},
          {"cov_sample_count", e.cov_sample_count},
          {"cov_jitter", e.cov_jitter},
          {"cov_positions", e.cov_positions},
          {"residual_basis", e.residual_basis}};
}

inline void from_json_into(const nlohmann::json& j, EditConfig& e) {
  detail::reject_unknown(j, "edit",
                         {"edit_layers", "n_prefixes", "prefix_length", "target_opt", "cov_lambda",
                          "cov_sample_count", "cov_jitter", "cov_positions", "residual_basis"});
  detail::read_field(j, "edit_layers", e.edit_layers, "edit");
  detail::read_field(j, "n_prefixes", e.n_prefixes, "edit");
  detail::read_field(j, "prefix_length", e.prefix_length, "edit");
  if (j.contains("target_opt")) {
    const auto& t = j.at("target_opt");
    detail::reject_unknown(t, "edit.target_opt", {"max_steps", "lr", "stop_prob"});
    detail::read_field(t, "max_steps", e.target_opt.max_steps, "edit.target_opt");
    detail::read_field(t, "lr", e.target_opt.lr, "edit.target_opt");
    detail::read_field(t, "stop_prob", e.target_opt.stop_prob, "edit.target_opt");
  }
  detail::read_field(j, "cov_lambda", e.cov_lambda, "edit");
  detail::read_field(j, "cov_sample_count", e.cov_sample_count, "edit");
  detail::read_field(j, "cov_jitter", e.cov_jitter, "edit");
  detail::read_field(j, "cov_positions", e.cov_positions, "edit");
  detail::read_field(j, "residual_basis", e.residual_basis, "edit");
}

inline nlohmann::json to_json(const CorpusSpec& c) {
  return {{"n_facts", c.n_facts},
          {"vocab_size", c.vocab_size},
          {"n_relations", c.n_relations},
          {"n_fillers", c.n_fillers},
          {"n_paraphrases", c.n_paraphrases},
          {"n_neighbors", c.n_neighbors},
          {"format_mix", {{"dg", c.format_mix.dg}, {"mq", c.format_mix.mq}, {"tf", c.format_mix.tf}}},
          {"min_object_len", c.min_object_len},
          {"max_object_len", c.max_object_len},
          {"dg_target", c.dg_target}};
}

inline void from_json_into(const nlohmann::json& j, CorpusSpec& c) {
  detail::reject_unknown(j, "corpus",
                         {"n_facts", "vocab_size", "n_relations", "n_fillers", "n_paraphrases",
                          "n_neighbors", "format_mix", "min_object_len", "max_object_len",
                          "dg_target"});
  detail::read_field(j, "n_facts", c.n_facts, "corpus");
  detail::read_field(j, "vocab_size", c.vocab_size, "corpus");
  detail::read_field(j, "n_relations", c.n_relations, "corpus");
  detail::read_field(j, "n_fillers", c.n_fillers, "corpus");
  detail::read_field(j, "n_paraphrases", c.n_paraphrases, "corpus");
  detail::read_field(j, "n_neighbors", c.n_neighbors, "corpus");
  if (j.contains("format_mix")) {
    const auto& m = j.at("format_mix");
    detail::reject_unknown(m, "corpus.format_mix", {"dg", "mq", "tf"});
    detail::read_field(m, "dg", c.format_mix.dg, "corpus.format_mix");
    detail::read_field(m, "mq", c.format_mix.mq, "corpus.format_mix");
    detail::read_field(m, "tf", c.format_mix.tf, "corpus.format_mix");
  }
  detail::read_field(j, "min_object_len", c.min_object_len, "corpus");
  detail::read_field(j, "max_object_len", c.max_object_len, "corpus");
  detail::read_field(j, "dg_target", c.dg_target, "corpus");
}

inline nlohmann::json to_json(const PretrainOptions& p) {
  return {{"steps", p.steps},
          {"lr", p.lr},
          {"batch_size", p.batch_size},
          {"max_prefix_len", p.max_prefix_len},
          {"prefix_prob", p.prefix_prob}};
}

inline void from_json_into(const nlohmann::json& j, PretrainOptions& p) {
  detail::reject_unknown(j, "pretrain",
                         {"steps", "lr", "batch_size", "max_prefix_len", "prefix_prob"});
  detail::read_field(j, "steps", p.steps, "pretrain");
  detail::read_field(j, "lr", p.lr, "pretrain");
  detail::read_field(j, "batch_size", p.batch_size, "pretrain");
  detail::read_field(j, "max_prefix_len", p.max_prefix_len, "pretrain");
  detail::read_field(j, "prefix_prob", p.prefix_prob, "pretrain");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"model", to_json(c.model)},
          {"edit", to_json(c.edit)},
          {"corpus", to_json(c.corpus)},
          {"pretrain", to_json(c.pretrain)},
          {"ft", {{"steps", c.ft.steps}, {"lr", c.ft.lr}}},
          {"method", c.method},
          {"n_edits", c.n_edits},
          {"checkpoint_stride", c.checkpoint_stride},
          {"forgetting_bucket", c.forgetting_bucket},
          {"output_dir", c.output_dir},
          {"base_model", c.base_model},
          {"seed", c.seed}};
}

inline void from_json_into(const nlohmann::json& j, ExperimentConfig& c) {
  detail::reject_unknown(j, "config",
                         {"model", "edit", "corpus", "pretrain", "ft", "method", "n_edits",
                          "checkpoint_stride", "forgetting_bucket", "output_dir", "base_model",
                          "seed"});
  if (j.contains("model")) from_json_into(j.at("model"), c.model);
  if (j.contains("edit")) from_json_into(j.at("edit"), c.edit);
  if (j.contains("corpus")) from_json_into(j.at("corpus"), c.corpus);
  if (j.contains("pretrain")) from_json_into(j.at("pretrain"), c.pretrain);
  if (j.contains("ft")) {
    const auto& f = j.at("ft");
    detail::reject_unknown(f, "ft", {"steps", "lr"});
    detail::read_field(f, "steps", c.ft.steps, "ft");
    detail::read_field(f, "lr", c.ft.lr, "ft");
  }
  detail::read_field(j, "method", c.method, "config");
  detail::read_field(j, "n_edits", c.n_edits, "config");
  detail::read_field(j, "checkpoint_stride", c.checkpoint_stride, "config");
  detail::read_field(j, "forgetting_bucket", c.forgetting_bucket, "config");
  detail::read_field(j, "output_dir", c.output_dir, "config");
  detail::read_field(j, "base_model", c.base_model, "config");
  detail::read_field(j, "seed", c.seed, "config");
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  ExperimentConfig cfg;
  from_json_into(j, cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Naive fine-tuning baseline

// Plain gradient descent on W_out of the last edit layer, minimizing the
// per-token mean NLL of the target on the bare prompt.
inline EditReceipt ft_naive_edit(ToyModel& model, const EditRequest& request,
                                 const EditConfig& cfg, const FineTuneOptions& ft) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate(model.config);
  const std::size_t layer = cfg.last_edit_layer();
  Sequence seq = assemble({}, request.prompt, request.target);
  for (auto& t : seq.targets) t.weight = 1.0 / static_cast<double>(request.target.size());
  ToyModel work = model;
  Parameters grad = work.params.zeros_like();
  for (std::size_t step = 0; step < ft.steps; ++step) {
    grad.layers[layer].w_out.fill(0.0);
    const double loss = accumulate_gradients(work, seq.tokens, seq.targets, grad);
    if (!std::isfinite(loss)) throw NumericError("fine-tuning loss is not finite");
    Matrix g = grad.layers[layer].w_out;
    g *= -ft.lr;
    work.w_out(layer) += g;
    if (!work.w_out(layer).all_finite()) throw NumericError("fine-tuning diverged");
  }
  EditReceipt receipt;
  receipt.method = "ft_naive";
  receipt.target_steps = ft.steps;
  receipt.final_target_prob = target_probability(work, request.prompt, request.target);
  receipt.solved_target_prob = receipt.final_target_prob;
  receipt.per_layer_l1.push_back({layer, l1_norm(work.w_out(layer))});
  model = std::move(work);
  receipt.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return receipt;
}

// ---------------------------------------------------------------------------
// Editors: one object per method holding whatever state the method carries
// between edits, with save/load for checkpoints.

class Editor {
 public:
  virtual ~Editor() = default;
  virtual std::string method() const = 0;
  virtual EditReceipt edit(ToyModel& model, const EditRequest& request) = 0;
  virtual void save_state(const std::filesystem::path& dir) const = 0;
  virtual void load_state(const std::filesystem::path& dir) = 0;
};

class D4sEditor final : public Editor {
 public:
  D4sEditor(EditConfig cfg, EditLedger ledger) : cfg_(std::move(cfg)), ledger_(std::move(ledger)) {}
  std::string method() const override { return "d4s"; }
  EditReceipt edit(ToyModel& model, const EditRequest& request) override {
    return d4s_edit(model, ledger_, request, cfg_);
  }
  void save_state(const std::filesystem::path& dir) const override {
    std::ofstream os(dir / "ledger.bin", std::ios::binary | std::ios::trunc);
    io::write_ledger(os, ledger_);
    if (!os) throw Error("cannot write " + (dir / "ledger.bin").string());
  }
  void load_state(const std::filesystem::path& dir) override {
    std::ifstream is(dir / "ledger.bin", std::ios::binary);
    if (!is) throw Error("cannot read " + (dir / "ledger.bin").string());
    ledger_ = io::read_ledger(is);
  }
  const EditLedger& ledger() const { return ledger_; }

 private:
  EditConfig cfg_;
  EditLedger ledger_;
};

// Sequential MEMIT and ROME-style carry no state beyond the fixed covariances.
class SequentialEditor final : public Editor {
 public:
  SequentialEditor(EditConfig cfg, LayerCovariances covs, bool rome)
      : cfg_(std::move(cfg)), covs_(std::move(covs)), rome_(rome) {}
  std::string method() const override { return rome_ ? "rome_style" : "memit_seq"; }
  EditReceipt edit(ToyModel& model, const EditRequest& request) override {
    return rome_ ? rome_style_edit(model, covs_, request, cfg_)
                 : memit_sequential_edit(model, covs_, request, cfg_);
  }
  void save_state(const std::filesystem::path&) const override {}
  void load_state(const std::filesystem::path&) override {}

 private:
  EditConfig cfg_;
  LayerCovariances covs_;
  bool rome_;
};

class ConcatEditor final : public Editor {
 public:
  ConcatEditor(EditConfig cfg, ConcatHistory state) : cfg_(std::move(cfg)), state_(std::move(state)) {}
  std::string method() const override { return "oracle_concat"; }
  EditReceipt edit(ToyModel& model, const EditRequest& request) override {
    return oracle_concat_edit(model, state_, request, cfg_);
  }
  void save_state(const std::filesystem::path& dir) const override {
    std::ofstream os(dir / "history.bin", std::ios::binary | std::ios::trunc);
    io::write_u64(os, state_.history.size());
    for (const auto& h : state_.history) {
      io::write_u64(os, h.size());
      for (const auto& kr : h) {
        io::write_matrix(os, "key", Matrix(1, kr.key.size(), kr.key));
        io::write_matrix(os, "residual", Matrix(1, kr.residual.size(), kr.residual));
      }
    }
    if (!os) throw Error("cannot write " + (dir / "history.bin").string());
  }
  void load_state(const std::filesystem::path& dir) override {
    std::ifstream is(dir / "history.bin", std::ios::binary);
    if (!is) throw Error("cannot read " + (dir / "history.bin").string());
    const std::uint64_t n = io::read_u64(is);
    if (n != state_.layers.size()) throw ParseError("history layer count mismatch", 0);
    for (auto& h : state_.history) {
      h.clear();
      const std::uint64_t m = io::read_u64(is);
      for (std::uint64_t i = 0; i < m; ++i) {
        const Matrix k = io::read_matrix(is, "key");
        const Matrix r = io::read_matrix(is, "residual");
        h.push_back({k.data(), r.data()});
      }
    }
  }

 private:
  EditConfig cfg_;
  ConcatHistory state_;
};

class FineTuneEditor final : public Editor {
 public:
  FineTuneEditor(EditConfig cfg, FineTuneOptions ft) : cfg_(std::move(cfg)), ft_(ft) {}
  std::string method() const override { return "ft_naive"; }
  EditReceipt edit(ToyModel& model, const EditRequest& request) override {
    return ft_naive_edit(model, request, cfg_, ft_);
  }
  void save_state(const std::filesystem::path&) const override {}
  void load_state(const std::filesystem::path&) override {}

 private:
  EditConfig cfg_;
  FineTuneOptions ft_;
};

// base is the unedited model the covariances and pristine weights come from.
inline std::unique_ptr<Editor> make_editor(const std::string& method, const ToyModel& base,
                                           const EditConfig& cfg, const FineTuneOptions& ft,
                                           std::span<const TokenSeq> cov_prompts) {
  if (method == "ft_naive") return std::make_unique<FineTuneEditor>(cfg, ft);
  LayerCovariances covs = build_covariances(base, cov_prompts, cfg);
  if (method == "d4s") return std::make_unique<D4sEditor>(cfg, make_ledger(base, covs));
  if (method == "memit_seq") return std::make_unique<SequentialEditor>(cfg, std::move(covs), false);
  if (method == "rome_style") return std::make_unique<SequentialEditor>(cfg, std::move(covs), true);
  if (method == "oracle_concat") {
    return std::make_unique<ConcatEditor>(cfg, make_concat_history(base, covs));
  }
  throw ConfigError("unknown method '" + method + "'");
}

// ---------------------------------------------------------------------------
// Run directory helpers

namespace detail {

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp);
    os << text;
    if (!os) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
}

inline std::filesystem::path checkpoint_dir(const std::filesystem::path& run, std::size_t n) {
  return run / "checkpoints" / ("edit_" + std::to_string(n));
}

inline void append_series(const std::filesystem::path& path, std::span<const SeriesRow> rows) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw Error("cannot append to " + path.string());
  for (const auto& r : rows) os << r.edit_index << ',' << r.metric << ',' << format_real(r.value) << '\n';
}

inline void write_curve_csv(const std::filesystem::path& path, const ForgettingCurve& c) {
  std::vector<SeriesRow> rows;
  for (const auto& b : c.buckets) rows.push_back({b.end, "efficacy", b.efficacy});
  write_series_csv(path, rows);
}

}  // namespace detail

struct RunResult {
  std::filesystem::path dir;
  bool complete = false;
  EvalReport base;
  EvalReport edited;
  ForgettingCurve overall;
  ForgettingCurve degree;
};

// Everything a run needs before editing starts.
struct RunInputs {
  Vocabulary vocab;
  std::vector<FactRecord> facts;
  ToyModel base;
  TrainingCurve curve;
};

// Loads cfg.base_model and checks its architecture against cfg.model (the
// initialization seed is ignored once a model is trained).
inline ToyModel load_base_model(const ExperimentConfig& cfg) {
  ToyModel m = io::load_model(cfg.base_model);
  ModelConfig a = m.config, b = cfg.model;
  a.seed = b.seed = 0;
  if (!(a == b)) throw ConfigError("base_model architecture does not match config.model");
  return m;
}

// Corpus and pretrained base model for a resolved config (no files touched).
inline RunInputs prepare_inputs(const ExperimentConfig& cfg) {
  RunInputs in;
  in.vocab = cfg.corpus.vocabulary();
  in.facts = generate_corpus(cfg.corpus);
  if (!cfg.base_model.empty()) {
    in.base = load_base_model(cfg);
  } else {
    in.base = make_model(cfg.model);
    PretrainOptions po = cfg.pretrain;
    po.prefix_pool = in.vocab.fillers();
    const auto examples = training_examples(in.facts, in.vocab);
    in.curve = pretrain(in.base, examples, po);
  }
  return in;
}

// The facts the edited-model metrics are computed on: the edited prefix of the
// corpus, or the whole corpus when nothing is edited.
inline std::span<const FactRecord> evaluation_facts(const std::vector<FactRecord>& facts,
                                                    std::size_t n_edits) {
  return n_edits == 0 ? std::span<const FactRecord>(facts)
                      : std::span<const FactRecord>(facts).first(n_edits);
}

// Runs (or with resume = true, continues) an experiment. Every stage failure
// marks the manifest incomplete, records the stage, and rethrows.
inline RunResult run_experiment(const ExperimentConfig& user_cfg, bool resume = false,
                                std::ostream* log = nullptr) {
  user_cfg.validate();
  ExperimentConfig cfg = resolve_seeds(user_cfg);
  const std::filesystem::path dir = cfg.output_dir;
  std::filesystem::create_directories(dir / "checkpoints");

  nlohmann::json manifest;
  std::string stage = "setup";
  auto write_manifest = [&] {
    detail::write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  };
  auto say = [&](const std::string& msg) {
    if (log != nullptr) *log << msg << '\n';
  };

  std::size_t start = 0;
  if (resume) {
    manifest = detail::read_json(dir / "manifest.json");
    if (manifest.value("config", nlohmann::json()) != to_json(user_cfg)) {
      throw ConfigError("resume: config differs from the one recorded in " +
                        (dir / "manifest.json").string());
    }
    start = manifest.value("last_checkpoint", std::size_t{0});
  }
  manifest["schema_version"] = kManifestSchemaVersion;
  manifest["config"] = to_json(user_cfg);
  manifest["derived_seeds"] = {{"model", cfg.model.seed},
                               {"corpus", cfg.corpus.seed},
                               {"pretrain", cfg.pretrain.seed},
                               {"prefix", cfg.edit.prefix_seed},
                               {"cov", cfg.edit.cov_seed}};
  manifest["status"] = "running";
  manifest.erase("error");
  manifest.erase("failed_stage");
  write_manifest();

  RunResult result;
  result.dir = dir;
  try {
    stage = "corpus";
    RunInputs in;
    in.vocab = cfg.corpus.vocabulary();
    in.facts = generate_corpus(cfg.corpus);
    save_jsonl(in.facts, dir / "corpus.jsonl");
    in.vocab.save(dir / "vocab.txt");

    stage = "pretrain";
    if (resume && std::filesystem::exists(dir / "base_model.bin")) {
      in.base = io::load_model(dir / "base_model.bin");
    } else {
      if (!cfg.base_model.empty()) {
        in.base = load_base_model(cfg);
      } else {
        in.base = make_model(cfg.model);
        PretrainOptions po = cfg.pretrain;
        po.prefix_pool = in.vocab.fillers();
        const auto examples = training_examples(in.facts, in.vocab);
        in.curve = pretrain(in.base, examples, po);
        std::vector<SeriesRow> rows;
        for (std::size_t s = 0; s < in.curve.loss.size(); ++s) {
          rows.push_back({s + 1, "loss", in.curve.loss[s]});
        }
        write_series_csv(dir / "pretrain_curve.csv", rows);
      }
      io::save_model(in.base, dir / "base_model.bin");
    }
    say("base model ready");

    stage = "evaluate_base";
    const auto eval_facts = evaluation_facts(in.facts, cfg.n_edits);
    result.base = evaluate_report(in.base, eval_facts, in.vocab);

    stage = "editor_setup";
    EditConfig ecfg = cfg.edit;
    ecfg.prefixes = random_prefixes(in.vocab, ecfg.n_prefixes, ecfg.prefix_length, ecfg.prefix_seed);
    const auto cov_prompts = irrelevant_prompts(in.vocab, ecfg.cov_sample_count, ecfg.cov_seed);
    auto editor = make_editor(cfg.method, in.base, ecfg, cfg.ft, cov_prompts);

    ToyModel model = in.base;
    std::vector<SeriesRow> overall_rows;
    if (start > 0) {
      stage = "resume";
      const auto cp = detail::checkpoint_dir(dir, start);
      model = io::load_model(cp / "model.bin");
      editor->load_state(cp);
      // Drop anything logged after the checkpoint.
      std::vector<SeriesRow> kept;
      for (const auto& r : read_series_csv(dir / "series.csv")) {
        if (r.edit_index <= start) kept.push_back(r);
      }
      write_series_csv(dir / "series.csv", kept);
      std::ifstream is(dir / "receipts.jsonl");
      std::string line, text;
      while (std::getline(is, line)) {
        if (!line.empty() && nlohmann::json::parse(line).at("edit_index").get<std::size_t>() <= start) {
          text += line + "\n";
        }
      }
      is.close();
      detail::write_text_atomic(dir / "receipts.jsonl", text);
      say("resumed at edit " + std::to_string(start));
    } else {
      write_series_csv(dir / "series.csv", {});
      detail::write_text_atomic(dir / "receipts.jsonl", "");
    }

    stage = "edit";
    for (std::size_t i = start; i < cfg.n_edits; ++i) {
      const std::size_t n = i + 1;
      EditReceipt receipt = editor->edit(model, make_request(in.facts[i], in.vocab));
      receipt.edit_index = n;
      {
        std::ofstream os(dir / "receipts.jsonl", std::ios::app);
        os << to_json(receipt).dump() << '\n';
      }
      std::vector<SeriesRow> rows;
      rows.push_back({n, "target_prob", receipt.final_target_prob});
      for (const auto& l : receipt.per_layer_l1) {
        rows.push_back({n, "l1_layer" + std::to_string(l.layer), l.l1});
      }
      if (n % cfg.checkpoint_stride == 0 || n == cfg.n_edits) {
        const auto cp = detail::checkpoint_dir(dir, n);
        std::filesystem::create_directories(cp);
        io::save_model(model, cp / "model.bin");
        editor->save_state(cp);
        rows.push_back({n, "overall_efficacy",
                        evaluate_efficacy(model, std::span<const FactRecord>(in.facts).first(n),
                                          in.vocab)});
        manifest["last_checkpoint"] = n;
        write_manifest();
        say("checkpoint at edit " + std::to_string(n));
      }
      detail::append_series(dir / "series.csv", rows);
    }

    stage = "report";
    result.edited = evaluate_report(model, eval_facts, in.vocab);
    std::vector<SeriesRow> series = read_series_csv(dir / "series.csv");
    for (const auto& r : series) {
      if (r.metric == "target_prob") result.edited.per_edit_target_prob.push_back(r.value);
    }
    result.overall.protocol = ForgettingCurve::Protocol::overall;
    for (const auto& r : series) {
      if (r.metric == "overall_efficacy") {
        result.overall.checkpoints.push_back(r.edit_index);
        result.overall.buckets.push_back({0, r.edit_index, r.value});
      }
    }
    for (std::size_t slot = 0; slot < cfg.edit.edit_layers.size(); ++slot) {
      const std::string metric = "l1_layer" + std::to_string(cfg.edit.edit_layers[slot]);
      std::vector<double> trace;
      for (const auto& r : series)
        if (r.metric == metric) trace.push_back(r.value);
      result.edited.per_layer_l1.push_back(std::move(trace));
    }
    if (cfg.n_edits > 0) {
      result.degree = forgetting_degree(model, eval_facts, in.vocab, cfg.forgetting_bucket);
    } else {
      result.degree.protocol = ForgettingCurve::Protocol::degree;
    }
    detail::write_curve_csv(dir / "forgetting_overall.csv", result.overall);
    detail::write_curve_csv(dir / "forgetting_degree.csv", result.degree);
    nlohmann::json report = {{"method", cfg.method},
                             {"n_edits", cfg.n_edits},
                             {"base", to_json(result.base)},
                             {"edited", to_json(result.edited)},
                             {"forgetting_overall", to_json(result.overall)},
                             {"forgetting_degree", to_json(result.degree)}};
    detail::write_text_atomic(dir / "report.json", report.dump(2) + "\n");
    io::save_model(model, dir / "final_model.bin");

    manifest["status"] = "complete";
    write_manifest();
    result.complete = true;
  } catch (const std::exception& e) {
    manifest["status"] = "incomplete";
    manifest["failed_stage"] = stage;
    manifest["error"] = e.what();
    write_manifest();
    throw Error("stage '" + stage + "' failed: " + e.what());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Report: Eff./Par./Spe./Avg. (x100, two decimals) per checkpoint.

struct ReportRow {
  std::size_t edits = 0;
  double efficacy = 0.0;
  double paraphrase = 0.0;
  double specificity = 0.0;
  double average = 0.0;
};

struct ReportTable {
  std::string method;
  bool complete = false;
  std::vector<ReportRow> rows;
};

inline std::string format_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

// Recomputes Eff./Par./Spe. for the base model and every checkpoint of a run.
inline ReportTable build_report(const std::filesystem::path& dir) {
  const nlohmann::json manifest = detail::read_json(dir / "manifest.json");
  ExperimentConfig cfg;
  from_json_into(manifest.at("config"), cfg);
  ReportTable table;
  table.method = cfg.method;
  table.complete = manifest.value("status", std::string()) == "complete";
  const auto facts = load_jsonl(dir / "corpus.jsonl");
  const auto vocab = Vocabulary::load(dir / "vocab.txt");
  const std::size_t last = manifest.value("last_checkpoint", std::size_t{0});
  auto row_for = [&](const ToyModel& m, std::size_t edits, std::size_t n_eval) {
    const EvalReport r = evaluate_report(m, evaluation_facts(facts, n_eval), vocab);
    return ReportRow{edits, r.efficacy, r.paraphrase, r.specificity, r.average};
  };
  const std::size_t eval_n = table.complete ? cfg.n_edits : last;
  table.rows.push_back(row_for(io::load_model(dir / "base_model.bin"), 0, eval_n));
  for (std::size_t n = cfg.checkpoint_stride; n <= last; n += cfg.checkpoint_stride) {
    const auto cp = detail::checkpoint_dir(dir, n);
    if (std::filesystem::exists(cp / "model.bin")) {
      table.rows.push_back(row_for(io::load_model(cp / "model.bin"), n, n));
    }
  }
  if (last % cfg.checkpoint_stride != 0 && last > 0) {
    table.rows.push_back(row_for(io::load_model(detail::checkpoint_dir(dir, last) / "model.bin"), last, last));
  }
  return table;
}

inline std::string render_report(const ReportTable& t) {
  std::ostringstream os;
  if (!t.complete) os << "WARNING: run is incomplete; this is a partial report\n";
  os << "method: " << t.method << "\n";
  os << "edits\tEff.\tPar.\tSpe.\tAvg.\n";
  for (const auto& r : t.rows) {
    os << r.edits << '\t' << format_percent(r.efficacy) << '\t' << format_percent(r.paraphrase)
       << '\t' << format_percent(r.specificity) << '\t' << format_percent(r.average) << '\n';
  }
  return os.str();
}

}  // namespace d4s
