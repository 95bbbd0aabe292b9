#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kangaroo/adapter.hpp"
#include "kangaroo/errors.hpp"
#include "kangaroo/model.hpp"
#include "kangaroo/trainer.hpp"

namespace kangaroo {

// Binary container shared by model and adapter files:
//
//   magic[4]  "KNGR" (model) or "KNGA" (adapter)
//   u64       format version
//   u64 ...   config fields
//   f32 ...   tensors, row-major, in declaration order
//
// Every integer is little-endian; rope_theta is stored as the bit pattern
// of an IEEE-754 double. The file must end exactly after the last tensor.

inline constexpr char kModelMagic[4] = {'K', 'N', 'G', 'R'};
inline constexpr char kAdapterMagic[4] = {'K', 'N', 'G', 'A'};
inline constexpr std::uint64_t kFormatVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void magic(const char (&m)[4]) { bytes_.insert(bytes_.end(), m, m + 4); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  template <typename Real>
  void tensor(std::span<const Real> values) {
    for (Real v : values) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  }
  void write_to(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw FormatError("write failed for " + path.string());
  }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::filesystem::path& path) : path_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path_);
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void expect_magic(const char (&m)[4]) {
    need(4);
    if (std::memcmp(bytes_.data(), m, 4) != 0) throw FormatError(path_ + ": bad magic, expected " + std::string(m, 4));
    pos_ = 4;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }

  // Checks the remaining payload is exactly `count` floats before reading any.
  void expect_payload_floats(std::uint64_t count) const {
    const std::uint64_t have = bytes_.size() - pos_;
    if (count > have / 4 || have != count * 4) {
      throw FormatError(path_ + ": tensor payload is " + std::to_string(have) + " bytes but header shapes need " +
                        std::to_string(count * 4) + (have < count * 4 ? " (truncated)" : " (shape mismatch)"));
    }
  }
  template <typename Real>
  void tensor(std::span<Real> out) {
    need(out.size() * 4);
    for (auto& v : out) {
      std::uint32_t bits = 0;
      for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
      pos_ += 4;
      v = static_cast<Real>(std::bit_cast<float>(bits));
    }
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(path_ + ": truncated file");
  }
  std::string path_;
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint64_t model_float_count(const ModelConfig& c) {
  const std::uint64_t d = c.d_model, h = c.ffn_hidden, v = c.vocab_size;
  const std::uint64_t per_layer = 2 * d + 4 * d * d + 3 * d * h;
  return v * d + c.n_layers * per_layer + d + d * v;
}

}  // namespace detail

template <typename Real>
void save_weights(const TargetWeights<Real>& w, const std::filesystem::path& path) {
  w.validate();
  const ModelConfig& c = w.config;
  detail::ByteWriter out;
  out.magic(kModelMagic);
  out.u64(kFormatVersion);
  for (std::uint64_t v : {c.vocab_size, c.d_model, c.n_heads, c.head_dim, c.n_layers, c.ffn_hidden, c.exit_layer, c.max_seq_len}) {
    out.u64(v);
  }
  out.f64(c.rope_theta);
  out.tensor<Real>(w.token_embedding.data);
  for (const auto& l : w.layers) {
    out.tensor<Real>(l.attn_norm);
    out.tensor<Real>(l.attn.wq.data);
    out.tensor<Real>(l.attn.wk.data);
    out.tensor<Real>(l.attn.wv.data);
    out.tensor<Real>(l.attn.wo.data);
    out.tensor<Real>(l.ffn_norm);
    out.tensor<Real>(l.gate.data);
    out.tensor<Real>(l.up.data);
    out.tensor<Real>(l.down.data);
  }
  out.tensor<Real>(w.final_norm);
  out.tensor<Real>(w.lm_head.data);
  out.write_to(path);
}

template <typename Real = float>
TargetWeights<Real> load_weights(const std::filesystem::path& path) {
  detail::ByteReader in(path);
  in.expect_magic(kModelMagic);
  const std::uint64_t version = in.u64();
  if (version != kFormatVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  TargetWeights<Real> w;
  ModelConfig& c = w.config;
  c.vocab_size = in.u64();
  c.d_model = in.u64();
  c.n_heads = in.u64();
  c.head_dim = in.u64();
  c.n_layers = in.u64();
  c.ffn_hidden = in.u64();
  c.exit_layer = in.u64();
  c.max_seq_len = in.u64();
  c.rope_theta = in.f64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": invalid header: " + e.what());
  }
  in.expect_payload_floats(detail::model_float_count(c));

  const std::size_t d = c.d_model, h = c.ffn_hidden, v = c.vocab_size;
  w.token_embedding = Matrix<Real>(v, d);
  in.tensor<Real>(w.token_embedding.data);
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    LayerWeights<Real> l;
    l.attn_norm.resize(d);
    l.ffn_norm.resize(d);
    l.attn.n_heads = c.n_heads;
    l.attn.head_dim = c.head_dim;
    l.attn.wq = l.attn.wk = l.attn.wv = l.attn.wo = Matrix<Real>(d, d);
    l.gate = Matrix<Real>(d, h);
    l.up = Matrix<Real>(d, h);
    l.down = Matrix<Real>(h, d);
    in.tensor<Real>(l.attn_norm);
    in.tensor<Real>(l.attn.wq.data);
    in.tensor<Real>(l.attn.wk.data);
    in.tensor<Real>(l.attn.wv.data);
    in.tensor<Real>(l.attn.wo.data);
    in.tensor<Real>(l.ffn_norm);
    in.tensor<Real>(l.gate.data);
    in.tensor<Real>(l.up.data);
    in.tensor<Real>(l.down.data);
    w.layers.push_back(std::move(l));
  }
  w.final_norm.resize(d);
  in.tensor<Real>(w.final_norm);
  w.lm_head = Matrix<Real>(d, v);
  in.tensor<Real>(w.lm_head.data);
  return w;
}

template <typename Real>
void save_adapter(const AdapterWeights<Real>& a, const std::filesystem::path& path) {
  detail::ByteWriter out;
  out.magic(kAdapterMagic);
  out.u64(kFormatVersion);
  out.u64(a.d_model());
  out.u64(a.attention.n_heads);
  out.u64(a.attention.head_dim);
  out.tensor<Real>(a.input_norm);
  out.tensor<Real>(a.attention.wq.data);
  out.tensor<Real>(a.attention.wk.data);
  out.tensor<Real>(a.attention.wv.data);
  out.tensor<Real>(a.attention.wo.data);
  out.tensor<Real>(a.output_norm);
  out.write_to(path);
}

template <typename Real = float>
AdapterWeights<Real> load_adapter(const std::filesystem::path& path) {
  detail::ByteReader in(path);
  in.expect_magic(kAdapterMagic);
  const std::uint64_t version = in.u64();
  if (version != kFormatVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const std::size_t d = in.u64();
  AdapterWeights<Real> a;
  a.attention.n_heads = in.u64();
  a.attention.head_dim = in.u64();
  if (d == 0 || a.attention.n_heads * a.attention.head_dim != d) throw FormatError(path.string() + ": inconsistent adapter header");
  in.expect_payload_floats(2 * d + 4 * d * d);
  a.input_norm.resize(d);
  a.output_norm.resize(d);
  a.attention.wq = a.attention.wk = a.attention.wv = a.attention.wo = Matrix<Real>(d, d);
  in.tensor<Real>(a.input_norm);
  in.tensor<Real>(a.attention.wq.data);
  in.tensor<Real>(a.attention.wk.data);
  in.tensor<Real>(a.attention.wv.data);
  in.tensor<Real>(a.attention.wo.data);
  in.tensor<Real>(a.output_norm);
  return a;
}

// Corpus files: one record per line, space-separated decimal token ids.
inline std::string format_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& seq : corpus) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(seq[i]);
    }
    out += '\n';
  }
  return out;
}

inline Corpus parse_corpus(std::istream& in, const std::string& origin = "corpus") {
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    Sequence seq;
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0 || v > INT32_MAX) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": bad token '" + tok + "'");
      }
      seq.push_back(static_cast<TokenId>(v));
    }
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << format_corpus(corpus);
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open corpus " + path.string());
  return parse_corpus(in, path.string());
}

}  // namespace kangaroo
