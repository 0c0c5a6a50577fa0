// d4s: command-line front end for corpus generation, pretraining, editing runs,
// evaluation and reports. Exit codes: 0 success, 1 usage or config error,
// 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "d4s/harness.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Optional overrides for config fields; unset flags leave the config alone.
struct Overrides {
  std::string config_path;
  std::optional<std::string> method, output_dir, base_model, cov_positions, residual_basis,
      dg_target;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_edits, checkpoint_stride, forgetting_bucket, n_facts, vocab_size,
      d_model, n_layers, n_heads, d_mlp_hidden, max_seq_len, pretrain_steps, n_prefixes,
      cov_sample_count, target_steps, ft_steps;
  std::optional<double> cov_lambda, cov_jitter, pretrain_lr, target_lr, stop_prob, ft_lr;
  std::optional<bool> mlp_reads_residual;
  std::vector<std::size_t> edit_layers;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
    app->add_option("--method", method, "d4s | memit_seq | rome_style | oracle_concat | ft_naive");
    app->add_option("--output-dir", output_dir, "run directory");
    app->add_option("--base-model", base_model, "pretrained model checkpoint to start from");
    app->add_option("--seed", seed, "experiment seed");
    app->add_option("--n-edits", n_edits);
    app->add_option("--checkpoint-stride", checkpoint_stride);
    app->add_option("--forgetting-bucket", forgetting_bucket);
    app->add_option("--n-facts", n_facts);
    app->add_option("--vocab-size", vocab_size, "sets model.vocab_size and corpus.vocab_size");
    app->add_option("--dg-target", dg_target, "corpus | fresh");
    app->add_option("--d-model", d_model);
    app->add_option("--n-layers", n_layers);
    app->add_option("--n-heads", n_heads);
    app->add_option("--d-mlp-hidden", d_mlp_hidden);
    app->add_option("--max-seq-len", max_seq_len);
    app->add_option("--mlp-reads-residual", mlp_reads_residual);
    app->add_option("--pretrain-steps", pretrain_steps);
    app->add_option("--pretrain-lr", pretrain_lr);
    app->add_option("--edit-layers", edit_layers, "strictly increasing layer indices");
    app->add_option("--n-prefixes", n_prefixes);
    app->add_option("--cov-lambda", cov_lambda);
    app->add_option("--cov-sample-count", cov_sample_count);
    app->add_option("--cov-jitter", cov_jitter);
    app->add_option("--cov-positions", cov_positions, "last | all");
    app->add_option("--residual-basis", residual_basis, "pristine | current");
    app->add_option("--target-steps", target_steps);
    app->add_option("--target-lr", target_lr);
    app->add_option("--stop-prob", stop_prob);
    app->add_option("--ft-steps", ft_steps);
    app->add_option("--ft-lr", ft_lr);
  }

  d4s::ExperimentConfig resolve() const {
    d4s::ExperimentConfig c =
        config_path.empty() ? d4s::ExperimentConfig{} : d4s::load_config(config_path);
    auto set = [](auto& field, const auto& opt) {
      if (opt) field = *opt;
    };
    set(c.method, method);
    set(c.output_dir, output_dir);
    set(c.base_model, base_model);
    set(c.seed, seed);
    set(c.n_edits, n_edits);
    set(c.checkpoint_stride, checkpoint_stride);
    set(c.forgetting_bucket, forgetting_bucket);
    set(c.corpus.n_facts, n_facts);
    set(c.corpus.vocab_size, vocab_size);
    set(c.model.vocab_size, vocab_size);
    set(c.corpus.dg_target, dg_target);
    set(c.model.d_model, d_model);
    set(c.model.n_layers, n_layers);
    set(c.model.n_heads, n_heads);
    set(c.model.d_mlp_hidden, d_mlp_hidden);
    set(c.model.max_seq_len, max_seq_len);
    set(c.model.mlp_reads_residual, mlp_reads_residual);
    set(c.pretrain.steps, pretrain_steps);
    set(c.pretrain.lr, pretrain_lr);
    if (!edit_layers.empty()) c.edit.edit_layers = edit_layers;
    set(c.edit.n_prefixes, n_prefixes);
    set(c.edit.cov_lambda, cov_lambda);
    set(c.edit.cov_sample_count, cov_sample_count);
    set(c.edit.cov_jitter, cov_jitter);
    set(c.edit.cov_positions, cov_positions);
    set(c.edit.residual_basis, residual_basis);
    set(c.edit.target_opt.max_steps, target_steps);
    set(c.edit.target_opt.lr, target_lr);
    set(c.edit.target_opt.stop_prob, stop_prob);
    set(c.ft.steps, ft_steps);
    set(c.ft.lr, ft_lr);
    return c;
  }
};

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

int cmd_generate_corpus(const Overrides& o, const std::filesystem::path& out_dir) {
  const d4s::ExperimentConfig cfg = d4s::resolve_seeds(o.resolve());
  std::filesystem::create_directories(out_dir);
  const auto facts = d4s::generate_corpus(cfg.corpus);
  d4s::save_jsonl(facts, out_dir / "corpus.jsonl");
  cfg.corpus.vocabulary().save(out_dir / "vocab.txt");
  std::cout << "wrote " << facts.size() << " facts to " << (out_dir / "corpus.jsonl").string()
            << '\n';
  return 0;
}

int cmd_pretrain(const Overrides& o, const std::filesystem::path& out_dir) {
  d4s::ExperimentConfig cfg = o.resolve();
  cfg.base_model.clear();
  cfg.validate();
  cfg = d4s::resolve_seeds(cfg);
  std::filesystem::create_directories(out_dir);
  const d4s::RunInputs in = d4s::prepare_inputs(cfg);
  d4s::io::save_model(in.base, out_dir / "base_model.bin");
  std::vector<d4s::SeriesRow> rows;
  for (std::size_t s = 0; s < in.curve.loss.size(); ++s) rows.push_back({s + 1, "loss", in.curve.loss[s]});
  d4s::write_series_csv(out_dir / "pretrain_curve.csv", rows);
  const auto report = d4s::evaluate_report(in.base, in.facts, in.vocab);
  std::cout << "base fact accuracy " << d4s::base_fact_accuracy(in.base, in.facts, in.vocab)
            << ", final loss " << (in.curve.loss.empty() ? 0.0 : in.curve.loss.back()) << '\n';
  print_json(d4s::to_json(report));
  return 0;
}

int cmd_edit(const Overrides& o, bool resume) {
  const d4s::ExperimentConfig cfg = o.resolve();
  const d4s::RunResult r = d4s::run_experiment(cfg, resume, &std::cerr);
  print_json({{"run_dir", r.dir.string()},
              {"base", d4s::to_json(r.base)},
              {"edited", d4s::to_json(r.edited)},
              {"forgetting_degree", d4s::to_json(r.degree)}});
  return 0;
}

int cmd_evaluate(const std::filesystem::path& model_path, const std::filesystem::path& corpus_path,
                 const std::filesystem::path& vocab_path, std::size_t first_n) {
  const d4s::ToyModel model = d4s::io::load_model(model_path);
  const auto facts = d4s::load_jsonl(corpus_path);
  const auto vocab = d4s::Vocabulary::load(vocab_path);
  if (first_n > facts.size()) throw d4s::ConfigError("--first exceeds corpus size");
  print_json(d4s::to_json(d4s::evaluate_report(model, d4s::evaluation_facts(facts, first_n), vocab)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential knowledge editing on a toy transformer"};
  app.require_subcommand(1);

  Overrides overrides;
  std::string out_dir = "corpus";
  auto* gen = app.add_subcommand("generate-corpus", "write corpus.jsonl and vocab.txt");
  overrides.add_to(gen);
  gen->add_option("-o,--out", out_dir, "output directory");

  std::string pre_out = "pretrained";
  auto* pre = app.add_subcommand("pretrain", "pretrain a base model on the corpus");
  overrides.add_to(pre);
  pre->add_option("-o,--out", pre_out, "output directory");

  bool resume = false;
  auto* edit = app.add_subcommand("edit", "run a sequential editing experiment");
  overrides.add_to(edit);
  edit->add_flag("--resume", resume, "continue from the latest checkpoint in output_dir");

  std::string model_path, corpus_path, vocab_path;
  std::size_t first_n = 0;
  auto* eval = app.add_subcommand("evaluate", "efficacy, paraphrase and specificity of a model");
  eval->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--vocab", vocab_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--first", first_n, "evaluate only the first N facts (0 = all)");

  std::string run_dir;
  auto* rep = app.add_subcommand("report", "Eff./Par./Spe./Avg. table for a run directory");
  rep->add_option("run_dir", run_dir)->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate_corpus(overrides, out_dir);
    if (pre->parsed()) return cmd_pretrain(overrides, pre_out);
    if (edit->parsed()) return cmd_edit(overrides, resume);
    if (eval->parsed()) return cmd_evaluate(model_path, corpus_path, vocab_path, first_n);
    if (rep->parsed()) {
      std::cout << d4s::render_report(d4s::build_report(run_dir));
      return 0;
    }
  } catch (const d4s::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
