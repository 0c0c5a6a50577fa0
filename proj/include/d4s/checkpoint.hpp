#pragma once

// Portable binary checkpoints. All integers are unsigned little-endian, all
// reals are IEEE-754 binary64 written little-endian.
//
// Model checkpoint layout (version 1):
//   magic        8 bytes  "D4SMODEL"
//   version      u32      1
//   vocab_size, d_model, n_layers, n_heads, d_mlp_hidden, max_seq_len, seed   u64 each
//   mlp_reads_residual   u8
//   n_tensors    u64
//   n_tensors times: name_len u32, name bytes, rows u64, cols u64, rows*cols f64
//
// Tensors appear in Parameters::visit order and are validated by name and
// shape on load.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "d4s/errors.hpp"
#include "d4s/model.hpp"
#include "d4s/numerics.hpp"

namespace d4s::io {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b.data(), 8);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b.data(), 4);
}

inline void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t read_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw ParseError("truncated checkpoint", 0);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw ParseError("truncated checkpoint", 0);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline void write_matrix(std::ostream& os, const std::string& name, const Matrix& m) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(os, m.rows());
  write_u64(os, m.cols());
  for (double x : m.data()) write_f64(os, x);
}

inline Matrix read_matrix(std::istream& is, const std::string& expected_name) {
  const std::uint32_t len = read_u32(is);
  if (len > 4096) throw ParseError("implausible tensor name length", 0);
  std::string name(len, '\0');
  if (!is.read(name.data(), len)) throw ParseError("truncated checkpoint", 0);
  if (!expected_name.empty() && name != expected_name) {
    throw ParseError("expected tensor '" + expected_name + "' but found '" + name + "'", 0);
  }
  const std::uint64_t rows = read_u64(is);
  const std::uint64_t cols = read_u64(is);
  if (rows > (1u << 24) || cols > (1u << 24)) throw ParseError("implausible tensor shape", 0);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = read_f64(is);
  return m;
}

inline constexpr char kModelMagic[8] = {'D', '4', 'S', 'M', 'O', 'D', 'E', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

inline void write_model(std::ostream& os, const ToyModel& model) {
  os.write(kModelMagic, 8);
  write_u32(os, kModelVersion);
  const ModelConfig& c = model.config;
  for (std::uint64_t v : {std::uint64_t{c.vocab_size}, std::uint64_t{c.d_model},
                          std::uint64_t{c.n_layers}, std::uint64_t{c.n_heads},
                          std::uint64_t{c.d_mlp_hidden}, std::uint64_t{c.max_seq_len}, c.seed}) {
    write_u64(os, v);
  }
  const char flag = c.mlp_reads_residual ? 1 : 0;
  os.write(&flag, 1);
  std::uint64_t n = 0;
  model.params.visit([&](const std::string&, const Matrix&) { ++n; });
  write_u64(os, n);
  model.params.visit([&](const std::string& name, const Matrix& m) { write_matrix(os, name, m); });
}

inline ToyModel read_model(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kModelMagic, 8) != 0) {
    throw ParseError("not a model checkpoint (bad magic)", 0);
  }
  const std::uint32_t version = read_u32(is);
  if (version != kModelVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 0);
  }
  ModelConfig c;
  c.vocab_size = read_u64(is);
  c.d_model = read_u64(is);
  c.n_layers = read_u64(is);
  c.n_heads = read_u64(is);
  c.d_mlp_hidden = read_u64(is);
  c.max_seq_len = read_u64(is);
  c.seed = read_u64(is);
  char flag = 0;
  if (!is.read(&flag, 1)) throw ParseError("truncated checkpoint", 0);
  c.mlp_reads_residual = flag != 0;
  c.validate();

  ToyModel model = make_model(c);
  const std::uint64_t n = read_u64(is);
  std::uint64_t expected = 0;
  model.params.visit([&](const std::string&, const Matrix&) { ++expected; });
  if (n != expected) throw ParseError("tensor count does not match config", 0);
  model.params.visit([&](const std::string& name, Matrix& m) {
    Matrix loaded = read_matrix(is, name);
    if (!loaded.same_shape(m)) throw ParseError("tensor '" + name + "' has wrong shape", 0);
    m = std::move(loaded);
  });
  return model;
}

inline void save_model(const ToyModel& model, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp.string() + " for writing");
    write_model(os, model);
    if (!os) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline ToyModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  return read_model(is);
}

}  // namespace d4s::io
