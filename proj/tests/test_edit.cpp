#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "d4s/edit.hpp"
#include "support.hpp"

using namespace d4s;
using namespace d4s_test;

namespace {

struct EditFixture {
  ModelConfig mc;
  ToyModel base;
  CorpusSpec cs;
  Vocabulary vocab;
  std::vector<FactRecord> facts;
  EditConfig ec;
  LayerCovariances covs;

  explicit EditFixture(std::vector<std::size_t> layers = {0, 1}) {
    mc.d_model = 16;
    mc.n_layers = 3;
    mc.n_heads = 2;
    mc.d_mlp_hidden = 32;
    mc.max_seq_len = 24;
    mc.seed = 5;
    mc.mlp_reads_residual = true;
    base = make_model(mc);
    cs.seed = 6;
    cs.max_object_len = 3;
    vocab = cs.vocabulary();
    facts = generate_corpus(cs);
    ec.edit_layers = std::move(layers);
    ec.cov_sample_count = 128;
    ec.target_opt.max_steps = 20;
    ec = ec.with_prefixes(vocab);
    covs = build_covariances(base, irrelevant_prompts(vocab, ec.cov_sample_count, 8), ec);
  }

  EditRequest request(std::size_t i) const { return make_request(facts[i], vocab); }
};

}  // namespace

TEST(SpreadResidual, DividesByRemainingLayerCount) {
  const Vector z = {3, 6}, h = {0, 0};
  EXPECT_EQ(spread_residual(z, h, 1, 3), (Vector{1, 2}));
  EXPECT_EQ(spread_residual(z, h, 3, 3), z);
}

TEST(SpreadResidual, LayerAboveLastIsRejected) {
  const Vector z = {1}, h = {0};
  EXPECT_THROW(spread_residual(z, h, 4, 3), ConfigError);
}

TEST(Covariance, ZeroLambdaGivesZeroMatrixThatSolveRejects) {
  const std::vector<Vector> keys = {{1, 2}, {3, 4}};
  const SymmetricPD cov = covariance_from_keys(keys, 2, 0.0);
  EXPECT_EQ(cov.matrix(), Matrix(2, 2));
  EXPECT_THROW(solve_spd(cov, Matrix{{1, 1}}), SingularityError);
}

TEST(Covariance, OneHotKeysGiveScaledIdentity) {
  const std::vector<Vector> keys = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  Matrix want = Matrix::identity(3);
  want *= 2.0;
  EXPECT_EQ(covariance_from_keys(keys, 3, 2.0).matrix(), want);
}

TEST(Covariance, RankDeficientSampleNamesTheProblem) {
  const std::vector<Vector> keys = {{1, 1, 0}};
  try {
    covariance_from_keys(keys, 3, 1.0);
    FAIL() << "expected SingularityError";
  } catch (const SingularityError& e) {
    EXPECT_NE(std::string(e.what()).find("rank deficient"), std::string::npos);
  }
  EXPECT_NO_THROW(covariance_from_keys(keys, 3, 1.0, 1e-6));
}

TEST(SolveDeltaBatch, ZeroResidualGivesZeroUpdate) {
  std::mt19937_64 rng(1);
  const SymmetricPD cov = random_spd(rng, 4, 0.5);
  EXPECT_EQ(solve_delta_batch(Matrix(3, 4), Matrix(4, 4), cov).delta, Matrix(3, 4));
}

TEST(SolveDeltaBatch, HandExample) {
  // C = I, k = e1, r = e2: (I + e1 e1^T)^-1 = diag(1/2, 1).
  const Vector k = {1, 0}, r = {0, 1};
  Matrix rk(2, 2), kk(2, 2);
  rank1_update(rk, r, k, 1.0);
  rank1_update(kk, k, k, 1.0);
  EXPECT_LT(max_abs_diff(solve_delta_batch(rk, kk, SymmetricPD::identity(2)).delta,
                         Matrix{{0, 0}, {0.5, 0}}),
            1e-15);
}

TEST(SolveDeltaBatch, MatchesLongDoubleOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t u = 3 + trial % 4, v = 4 + trial % 5, n = 1 + trial;
    const SymmetricPD cov = random_spd(rng, v, 0.1);
    std::vector<Vector> keys, residuals;
    Matrix rk(u, v), kk(v, v);
    for (std::size_t i = 0; i < n; ++i) {
      keys.push_back(gaussian_vector(rng, v));
      residuals.push_back(gaussian_vector(rng, u));
      rank1_update(rk, residuals.back(), keys.back(), 1.0);
      rank1_update(kk, keys.back(), keys.back(), 1.0);
    }
    EXPECT_LT(max_abs_diff(solve_delta_batch(rk, kk, cov).delta,
                           oracle_delta(keys, residuals, cov.matrix())),
              1e-10);
  }
}

TEST(OracleConcat, SingleEntryEqualsRankOneSolve) {
  std::mt19937_64 rng(3);
  const SymmetricPD cov = random_spd(rng, 5, 0.2);
  const KeyResidual kr{gaussian_vector(rng, 5), gaussian_vector(rng, 3)};
  Matrix rk(3, 5), kk(5, 5);
  rank1_update(rk, kr.residual, kr.key, 1.0);
  rank1_update(kk, kr.key, kr.key, 1.0);
  const std::vector<KeyResidual> history = {kr};
  EXPECT_LT(max_abs_diff(oracle_concat_delta(history, cov).delta,
                         solve_delta_batch(rk, kk, cov).delta),
            1e-12);
}

TEST(OracleConcat, AgreesWithLedgerOverFiftyPairsAndIsOrderFree) {
  std::mt19937_64 rng(4);
  LayerLedger ledger;
  ledger.rk_acc = Matrix(6, 10);
  ledger.kk_acc = Matrix(10, 10);
  ledger.cov = random_spd(rng, 10, 0.1);
  std::vector<KeyResidual> history;
  for (int i = 0; i < 50; ++i) {
    history.push_back({gaussian_vector(rng, 10), gaussian_vector(rng, 6)});
    ledger_integrate(ledger, history.back().key, history.back().residual);
  }
  const Matrix want = oracle_concat_delta(history, ledger.cov).delta;
  EXPECT_LT(max_abs_diff(solve_delta_batch(ledger).delta, want), 1e-10);
  std::shuffle(history.begin(), history.end(), rng);
  EXPECT_LT(max_abs_diff(oracle_concat_delta(history, ledger.cov).delta, want), 1e-10);
}

TEST(OracleConcat, EmptyHistoryIsRejected) {
  EXPECT_THROW(oracle_concat_delta({}, SymmetricPD::identity(2)), ConfigError);
}

TEST(LedgerIntegrate, AccumulatesOuterProductsExactly) {
  LayerLedger ledger;
  ledger.rk_acc = Matrix(2, 2);
  ledger.kk_acc = Matrix(2, 2);
  const Vector k1 = {1, 2}, r1 = {3, 0}, k2 = {0, 1}, r2 = {1, 1};
  ledger_integrate(ledger, k1, r1);
  ledger_integrate(ledger, k2, r2);
  EXPECT_EQ(ledger.rk_acc, (Matrix{{3, 7}, {0, 1}}));
  EXPECT_EQ(ledger.kk_acc, (Matrix{{1, 2}, {2, 5}}));
  EXPECT_EQ(ledger.edit_count, 2u);
}

TEST(LedgerIntegrate, ZeroKeyOnlyCountsTheEdit) {
  LayerLedger ledger;
  ledger.rk_acc = Matrix(2, 3);
  ledger.kk_acc = Matrix(3, 3);
  const Vector k = {0, 0, 0}, r = {5, 7};
  ledger_integrate(ledger, k, r);
  EXPECT_EQ(ledger.rk_acc, Matrix(2, 3));
  EXPECT_EQ(ledger.kk_acc, Matrix(3, 3));
  EXPECT_EQ(ledger.edit_count, 1u);
}

TEST(LedgerIntegrate, LengthMismatchThrows) {
  LayerLedger ledger;
  ledger.rk_acc = Matrix(2, 3);
  ledger.kk_acc = Matrix(3, 3);
  const Vector k = {1, 2}, r = {1, 2};
  EXPECT_THROW(ledger_integrate(ledger, k, r), ShapeError);
}

TEST(ExtractKey, SinglePrefixMatchesTrace) {
  EditFixture fx;
  const EditRequest req = fx.request(0);
  const std::vector<TokenSeq> none = {TokenSeq{}};
  const Vector key = extract_key(fx.base, req.prompt, 1, none);
  TokenSeq tokens = {kBos};
  tokens.insert(tokens.end(), req.prompt.tokens.begin(),
                req.prompt.tokens.begin() + static_cast<std::ptrdiff_t>(req.prompt.subject_last + 1));
  const HiddenTrace trace = trace_through(fx.base, tokens, 1);
  const auto row = trace.layers[1].mlp_key.row_span(tokens.size() - 1);
  EXPECT_EQ(key, Vector(row.begin(), row.end()));
}

TEST(ExtractKey, DuplicatedPrefixesAverageToTheSameKey) {
  EditFixture fx;
  const EditRequest req = fx.request(1);
  const std::vector<TokenSeq> one = {fx.ec.prefixes[1]};
  const std::vector<TokenSeq> two = {fx.ec.prefixes[1], fx.ec.prefixes[1]};
  EXPECT_EQ(extract_key(fx.base, req.prompt, 0, one), extract_key(fx.base, req.prompt, 0, two));
}

TEST(ExtractKey, IsMeanOfPerPrefixKeys) {
  EditFixture fx;
  const EditRequest req = fx.request(2);
  const Vocabulary& v = fx.vocab;
  const std::vector<TokenSeq> prefixes = random_prefixes(v, 4, 3, 77);
  Vector want(fx.mc.d_mlp_hidden, 0.0);
  for (const auto& p : prefixes) {
    const std::vector<TokenSeq> single = {p};
    const Vector k = extract_key(fx.base, req.prompt, 0, single);
    for (std::size_t c = 0; c < want.size(); ++c) want[c] += k[c] / 4.0;
  }
  const Vector got = extract_key(fx.base, req.prompt, 0, prefixes);
  for (std::size_t c = 0; c < want.size(); ++c) EXPECT_NEAR(got[c], want[c], 1e-14);
}

TEST(ExtractKey, RejectsNonEditLayerAndEmptyPrefixes) {
  EditFixture fx;
  const EditRequest req = fx.request(0);
  EXPECT_THROW(extract_key(fx.base, req, 2, fx.ec), ConfigError);
  EXPECT_THROW(extract_key(fx.base, req.prompt, 0, std::vector<TokenSeq>{}), ConfigError);
}

TEST(SolveTarget, AlreadySatisfiedTargetTakesNoSteps) {
  EditFixture fx;
  EditConfig ec = fx.ec;
  ec.target_opt.stop_prob = 1e-300;
  const TargetSolution sol = solve_target(fx.base, fx.request(0), ec);
  EXPECT_EQ(sol.steps_used, 0u);
  EXPECT_EQ(sol.delta, Vector(fx.mc.d_model, 0.0));
  EXPECT_EQ(sol.z, sol.hidden);
}

TEST(SolveTarget, ProbabilityTraceNeverDecreases) {
  EditFixture fx;
  const TargetSolution sol = solve_target(fx.base, fx.request(3), fx.ec);
  ASSERT_EQ(sol.prob_trace.size(), sol.steps_used + 1);
  EXPECT_GT(sol.steps_used, 0u);
  for (std::size_t i = 1; i < sol.prob_trace.size(); ++i) {
    EXPECT_GE(sol.prob_trace[i], sol.prob_trace[i - 1]);
  }
  EXPECT_GT(sol.final_target_prob, sol.prob_trace.front());
  for (std::size_t c = 0; c < sol.z.size(); ++c) EXPECT_EQ(sol.z[c], sol.hidden[c] + sol.delta[c]);
}

TEST(SolveTarget, HiddenIsTheSubjectStateOfTheLastEditLayer) {
  EditFixture fx;
  const EditRequest req = fx.request(4);
  const TargetSolution sol = solve_target(fx.base, req, fx.ec);
  EXPECT_EQ(sol.hidden, subject_hidden(fx.base, req.prompt, 1));
}

TEST(SolveTarget, EmptyTargetIsConfigError) {
  EditFixture fx;
  EditRequest req = fx.request(0);
  req.target.clear();
  EXPECT_THROW(solve_target(fx.base, req, fx.ec), ConfigError);
}

TEST(EditConfig, ValidationRejectsBadLayersAndUnresolvedPrefixes) {
  ModelConfig mc;
  mc.n_layers = 3;
  EditConfig ec;
  ec.edit_layers = {1, 2};
  EXPECT_THROW(ec.validate(mc), ConfigError);
  ec.prefixes = {TokenSeq{}};
  EXPECT_NO_THROW(ec.validate(mc));
  ec.edit_layers = {2, 1};
  EXPECT_THROW(ec.validate(mc), ConfigError);
  ec.edit_layers = {3};
  EXPECT_THROW(ec.validate(mc), ConfigError);
  ec.edit_layers = {0};
  ec.residual_basis = "other";
  EXPECT_THROW(ec.validate(mc), ConfigError);
}

TEST(D4sEdit, ReplaysConcatenationOracle) {
  EditFixture fx;
  ToyModel a = fx.base, b = fx.base;
  EditLedger ledger = make_ledger(fx.base, fx.covs);
  ConcatHistory history = make_concat_history(fx.base, fx.covs);
  for (std::size_t i = 0; i < 6; ++i) {
    d4s_edit(a, ledger, fx.request(i), fx.ec);
    oracle_concat_edit(b, history, fx.request(i), fx.ec);
    for (std::size_t l : fx.ec.edit_layers) EXPECT_LT(max_abs_diff(a.w_out(l), b.w_out(l)), 1e-8);
  }
  EXPECT_EQ(ledger.edit_count(), 6u);
}

TEST(D4sEdit, FirstEditMatchesSequentialUpdate) {
  EditFixture fx;
  ToyModel a = fx.base, b = fx.base;
  EditLedger ledger = make_ledger(fx.base, fx.covs);
  d4s_edit(a, ledger, fx.request(0), fx.ec);
  memit_sequential_edit(b, fx.covs, fx.request(0), fx.ec);
  for (std::size_t l : fx.ec.edit_layers) EXPECT_LT(max_abs_diff(a.w_out(l), b.w_out(l)), 1e-12);
}

TEST(D4sEdit, FailedEditLeavesModelAndLedgerUntouched) {
  EditFixture fx;
  ToyModel model = fx.base;
  EditLedger ledger = make_ledger(fx.base, fx.covs);
  d4s_edit(model, ledger, fx.request(0), fx.ec);
  const ToyModel model_before = model;
  const EditLedger ledger_before = ledger;
  EditRequest bad = fx.request(1);
  bad.target.assign(fx.mc.max_seq_len, bad.target.front());
  EXPECT_THROW(d4s_edit(model, ledger, bad, fx.ec), LengthError);
  EXPECT_EQ(model.params, model_before.params);
  EXPECT_EQ(ledger, ledger_before);
}

TEST(D4sEdit, LedgerForOtherLayersIsRejected) {
  EditFixture fx;
  ToyModel model = fx.base;
  EditLedger ledger = make_ledger(fx.base, fx.covs);
  EditConfig ec = fx.ec;
  ec.edit_layers = {1};
  EXPECT_THROW(d4s_edit(model, ledger, fx.request(0), ec), ConfigError);
}

TEST(D4sEdit, ReceiptRecordsPerLayerNorms) {
  EditFixture fx;
  ToyModel model = fx.base;
  EditLedger ledger = make_ledger(fx.base, fx.covs);
  const EditReceipt r = d4s_edit(model, ledger, fx.request(0), fx.ec);
  ASSERT_EQ(r.per_layer_l1.size(), 2u);
  EXPECT_EQ(r.per_layer_l1[1].layer, 1u);
  EXPECT_EQ(r.per_layer_l1[1].l1, l1_norm(model.w_out(1)));
  EXPECT_EQ(r.updates.size(), 2u);
  EXPECT_EQ(r.method, "d4s");
}

TEST(RomeStyle, EqualsSingleLayerSequentialUpdateOfRankOne) {
  EditFixture fx({1});
  ToyModel a = fx.base, b = fx.base;
  rome_style_edit(a, fx.covs, fx.request(0), fx.ec);
  memit_sequential_edit(b, fx.covs, fx.request(0), fx.ec);
  EXPECT_EQ(a.w_out(1), b.w_out(1));
  const Matrix d = a.w_out(1) - fx.base.w_out(1);
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = 0; j < d.cols(); ++j) {
      scale = std::max(scale, std::abs(d(i, j)));
      worst = std::max(worst, std::abs(d(i, j) * d(0, 0) - d(i, 0) * d(0, j)));
    }
  EXPECT_GT(scale, 0.0);
  EXPECT_LT(worst, 1e-12 * scale * scale);
}

TEST(RomeStyle, MultipleLayersAreRejected) {
  EditFixture fx;
  ToyModel model = fx.base;
  EXPECT_THROW(rome_style_edit(model, fx.covs, fx.request(0), fx.ec), ConfigError);
}

TEST(LedgerIo, RoundTripIsExact) {
  EditFixture fx;
  ToyModel model = fx.base;
  EditLedger ledger = make_ledger(fx.base, fx.covs);
  d4s_edit(model, ledger, fx.request(0), fx.ec);
  std::stringstream ss;
  io::write_ledger(ss, ledger);
  EXPECT_EQ(io::read_ledger(ss), ledger);
}

TEST(LedgerIo, BadMagicIsParseError) {
  std::stringstream ss("NOTALEDGERFILE");
  EXPECT_THROW(io::read_ledger(ss), ParseError);
}

TEST(LedgerMemory, ByteSizeIndependentOfEditCount) {
  EditFixture fx;
  ToyModel model = fx.base;
  EditLedger ledger = make_ledger(fx.base, fx.covs);
  const std::size_t bytes = ledger.byte_size();
  for (std::size_t i = 0; i < 3; ++i) d4s_edit(model, ledger, fx.request(i), fx.ec);
  EXPECT_EQ(ledger.byte_size(), bytes);
}
