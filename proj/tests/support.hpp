#pragma once

// Helpers shared by the unit tests and the acceptance binary: a table-driven
// stub model, an independent long-double linear solver, and small configs.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "d4s/corpus.hpp"
#include "d4s/evaluation.hpp"
#include "d4s/harness.hpp"
#include "d4s/numerics.hpp"

namespace d4s {

// Readable gtest failure output for matrices.
inline void PrintTo(const Matrix& m, std::ostream* os) {
  *os << m.rows() << "x" << m.cols() << " [";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    *os << (i ? "; " : "");
    for (std::size_t j = 0; j < m.cols(); ++j) *os << (j ? " " : "") << m(i, j);
  }
  *os << "]";
}

}  // namespace d4s

namespace d4s_test {

using namespace d4s;

// Predicts, for each context, the next token recorded with teach(); any other
// context predicts `fallback`. Logits are one-hot scaled by `margin`.
struct LookupModel {
  std::size_t vocab_size = 0;
  Token fallback = kBos;
  double margin = 10.0;
  std::map<TokenSeq, Token> next;

  void teach(const RenderedPrompt& prompt, std::span<const Token> target) {
    const Sequence seq = assemble({}, prompt, target);
    for (const auto& t : seq.targets) {
      next[TokenSeq(seq.tokens.begin(), seq.tokens.begin() + t.position + 1)] = t.token;
    }
  }
};

inline Matrix score_positions(const LookupModel& m, std::span<const Token> tokens,
                              std::span<const std::size_t> positions) {
  Matrix out(positions.size(), m.vocab_size);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const TokenSeq ctx(tokens.begin(), tokens.begin() + positions[r] + 1);
    const auto it = m.next.find(ctx);
    out(r, it == m.next.end() ? m.fallback : it->second) = m.margin;
  }
  return out;
}

// Logits fixed by a caller-supplied row, regardless of context.
struct ConstantModel {
  Vector row;
};

inline Matrix score_positions(const ConstantModel& m, std::span<const Token>,
                              std::span<const std::size_t> positions) {
  Matrix out(positions.size(), m.row.size());
  for (std::size_t r = 0; r < positions.size(); ++r)
    for (std::size_t c = 0; c < m.row.size(); ++c) out(r, c) = m.row[c];
  return out;
}

using LMatrix = std::vector<std::vector<long double>>;

// Solves A X = B by Gauss-Jordan elimination with partial pivoting in long
// double. Written without reference to the library's Cholesky path.
inline LMatrix gauss_jordan_solve(LMatrix a, LMatrix b) {
  const std::size_t n = a.size();
  const std::size_t m = b.empty() ? 0 : b[0].size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    const long double d = a[col][col];
    for (std::size_t c = 0; c < n; ++c) a[col][c] /= d;
    for (std::size_t c = 0; c < m; ++c) b[col][c] /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col || a[r][col] == 0.0L) continue;
      const long double f = a[r][col];
      for (std::size_t c = 0; c < n; ++c) a[r][c] -= f * a[col][c];
      for (std::size_t c = 0; c < m; ++c) b[r][c] -= f * b[col][c];
    }
  }
  return b;
}

// Delta = R K^T (C + K K^T)^{-1} from explicit columns, in long double.
inline Matrix oracle_delta(const std::vector<Vector>& keys, const std::vector<Vector>& residuals,
                           const Matrix& cov) {
  const std::size_t v = cov.rows();
  const std::size_t u = residuals.front().size();
  LMatrix a(v, std::vector<long double>(v));
  LMatrix bt(v, std::vector<long double>(u));  // (R K^T)^T = K R^T
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < v; ++j) a[i][j] = cov(i, j);
  for (std::size_t n = 0; n < keys.size(); ++n) {
    for (std::size_t i = 0; i < v; ++i) {
      for (std::size_t j = 0; j < v; ++j) a[i][j] += static_cast<long double>(keys[n][i]) * keys[n][j];
      for (std::size_t j = 0; j < u; ++j) bt[i][j] += static_cast<long double>(keys[n][i]) * residuals[n][j];
    }
  }
  // A symmetric: Delta A = R K^T  <=>  A Delta^T = K R^T.
  const LMatrix xt = gauss_jordan_solve(a, bt);
  Matrix delta(u, v);
  for (std::size_t i = 0; i < u; ++i)
    for (std::size_t j = 0; j < v; ++j) delta(i, j) = static_cast<double>(xt[j][i]);
  return delta;
}

inline Vector gaussian_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// G G^T / n + shift I: symmetric positive definite with a controlled floor.
inline SymmetricPD random_spd(std::mt19937_64& rng, std::size_t n, double shift) {
  Matrix g(n, n);
  std::normal_distribution<double> d(0.0, 1.0);
  for (auto& x : g.data()) x = d(rng);
  Matrix a = matmul_bt(g, g);
  a *= 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += shift;
  return SymmetricPD(a);
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("d4s_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// A fast end-to-end configuration: small model, short pretraining, few edits.
inline ExperimentConfig tiny_experiment(const std::filesystem::path& out, const std::string& method) {
  ExperimentConfig c;
  c.model.d_model = 16;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.d_mlp_hidden = 32;
  c.model.max_seq_len = 24;
  c.model.mlp_reads_residual = true;
  c.corpus.n_facts = 50;
  c.corpus.max_object_len = 3;
  c.pretrain.steps = 60;
  c.pretrain.max_prefix_len = 2;
  c.pretrain.prefix_prob = 0.5;
  c.edit.edit_layers = {0};
  c.edit.n_prefixes = 2;
  c.edit.cov_lambda = 0.1;
  c.edit.cov_positions = "all";
  c.edit.cov_sample_count = 128;
  c.edit.target_opt.max_steps = 20;
  c.method = method;
  c.n_edits = 6;
  c.checkpoint_stride = 2;
  c.forgetting_bucket = 3;
  c.output_dir = out.string();
  c.seed = 11;
  return c;
}

}  // namespace d4s_test
