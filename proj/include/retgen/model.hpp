#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "retgen/errors.hpp"
#include "retgen/mask.hpp"
#include "retgen/tape.hpp"
#include "retgen/tensor.hpp"

namespace retgen {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 0;
  int n_layers = 0;
  int n_heads = 0;
  int max_seq_len = 0;
  int eos_token_id = 0;
  uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
    if (d_model < 1 || n_layers < 1 || n_heads < 1)
      throw ConfigError("d_model, n_layers and n_heads must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (eos_token_id < 0 || eos_token_id >= vocab_size)
      throw ConfigError("eos_token_id out of vocabulary range");
    if (max_seq_len < 8) throw ConfigError("max_seq_len must be at least 8");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;          // [d x d]
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_in_w, mlp_in_b;      // [d x 4d], [1 x 4d]
  Tensor mlp_out_w, mlp_out_b;    // [4d x d], [1 x d]
};

// All parameters of the tiny decoder-only transformer. Pre-norm blocks,
// learned position embeddings, separate unembedding matrix. Immutable
// during inference; training owns it exclusively.
struct ModelState {
  ModelConfig config;
  Tensor tok_embedding;  // [V x d]
  Tensor pos_embedding;  // [max_seq_len x d]
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;  // [1 x d]
  Tensor unembed;                 // [d x V]

  static ModelState init(const ModelConfig& cfg) {
    cfg.validate();
    ModelState s;
    s.config = cfg;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 0.02);
    auto randn = [&](Shape shape) {
      Tensor t = Tensor::zeros(std::move(shape));
      for (double& v : t.values) v = gauss(rng);
      return t;
    };
    const int d = cfg.d_model;
    s.tok_embedding = randn({cfg.vocab_size, d});
    s.pos_embedding = randn({cfg.max_seq_len, d});
    s.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& l : s.layers) {
      l.ln1_gain = Tensor::full({1, d}, 1.0);
      l.ln1_bias = Tensor::zeros({1, d});
      l.wq = randn({d, d});
      l.wk = randn({d, d});
      l.wv = randn({d, d});
      l.wo = randn({d, d});
      l.ln2_gain = Tensor::full({1, d}, 1.0);
      l.ln2_bias = Tensor::zeros({1, d});
      l.mlp_in_w = randn({d, 4 * d});
      l.mlp_in_b = Tensor::zeros({1, 4 * d});
      l.mlp_out_w = randn({4 * d, d});
      l.mlp_out_b = Tensor::zeros({1, d});
    }
    s.final_gain = Tensor::full({1, d}, 1.0);
    s.final_bias = Tensor::zeros({1, d});
    s.unembed = randn({d, cfg.vocab_size});
    return s;
  }

  // Fixed enumeration order; checkpoint layout, tape binding and the
  // optimizer all rely on it.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    fn("tok_embedding", tok_embedding);
    fn("pos_embedding", pos_embedding);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      LayerParams& l = layers[i];
      fn(p + "ln1_gain", l.ln1_gain);
      fn(p + "ln1_bias", l.ln1_bias);
      fn(p + "wq", l.wq);
      fn(p + "wk", l.wk);
      fn(p + "wv", l.wv);
      fn(p + "wo", l.wo);
      fn(p + "ln2_gain", l.ln2_gain);
      fn(p + "ln2_bias", l.ln2_bias);
      fn(p + "mlp_in_w", l.mlp_in_w);
      fn(p + "mlp_in_b", l.mlp_in_b);
      fn(p + "mlp_out_w", l.mlp_out_w);
      fn(p + "mlp_out_b", l.mlp_out_b);
    }
    fn("final_gain", final_gain);
    fn("final_bias", final_bias);
    fn("unembed", unembed);
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) const {
    const_cast<ModelState*>(this)->for_each_param(
        [&](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
  }

  uint64_t fingerprint() const {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    auto mix_bytes = [&h](const void* p, size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    int64_t cfg_words[6] = {config.vocab_size, config.d_model,   config.n_layers,
                            config.n_heads,    config.max_seq_len, config.eos_token_id};
    mix_bytes(cfg_words, sizeof(cfg_words));
    for_each_param([&](const std::string& name, const Tensor& t) {
      mix_bytes(name.data(), name.size());
      mix_bytes(t.values.data(), t.values.size() * sizeof(double));
    });
    return h;
  }

  void save(const std::filesystem::path& path) const;
  static ModelState load(const std::filesystem::path& path);
};

// Checkpoint container: magic, config, fingerprint, then each parameter
// with a name and shape header followed by raw doubles. Loading reproduces
// the saved state bit-exactly.
namespace ckpt {

constexpr char kMagic[8] = {'R', 'G', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw ParseError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

}  // namespace ckpt

inline void ModelState::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ArgumentError("cannot open checkpoint for writing: " + path.string());
  os.write(ckpt::kMagic, sizeof(ckpt::kMagic));
  ckpt::write_pod(os, static_cast<int64_t>(config.vocab_size));
  ckpt::write_pod(os, static_cast<int64_t>(config.d_model));
  ckpt::write_pod(os, static_cast<int64_t>(config.n_layers));
  ckpt::write_pod(os, static_cast<int64_t>(config.n_heads));
  ckpt::write_pod(os, static_cast<int64_t>(config.max_seq_len));
  ckpt::write_pod(os, static_cast<int64_t>(config.eos_token_id));
  ckpt::write_pod(os, config.seed);
  ckpt::write_pod(os, fingerprint());
  uint32_t count = 0;
  for_each_param([&](const std::string&, const Tensor&) { ++count; });
  ckpt::write_pod(os, count);
  for_each_param([&](const std::string& name, const Tensor& t) {
    ckpt::write_pod(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    ckpt::write_pod(os, static_cast<uint32_t>(t.shape.size()));
    for (int e : t.shape) ckpt::write_pod(os, static_cast<int64_t>(e));
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  });
  if (!os) throw ArgumentError("checkpoint write failed: " + path.string());
}

inline ModelState ModelState::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArgumentError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, ckpt::kMagic, 8) != 0)
    throw ParseError("bad checkpoint magic in " + path.string());
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(ckpt::read_pod<int64_t>(is, "vocab_size"));
  cfg.d_model = static_cast<int>(ckpt::read_pod<int64_t>(is, "d_model"));
  cfg.n_layers = static_cast<int>(ckpt::read_pod<int64_t>(is, "n_layers"));
  cfg.n_heads = static_cast<int>(ckpt::read_pod<int64_t>(is, "n_heads"));
  cfg.max_seq_len = static_cast<int>(ckpt::read_pod<int64_t>(is, "max_seq_len"));
  cfg.eos_token_id = static_cast<int>(ckpt::read_pod<int64_t>(is, "eos_token_id"));
  cfg.seed = ckpt::read_pod<uint64_t>(is, "seed");
  const uint64_t stored_fp = ckpt::read_pod<uint64_t>(is, "fingerprint");
  ModelState s = ModelState::init(cfg);
  const uint32_t count = ckpt::read_pod<uint32_t>(is, "param count");
  uint32_t expected = 0;
  s.for_each_param([&](const std::string&, const Tensor&) { ++expected; });
  if (count != expected)
    throw IntegrityError("checkpoint holds " + std::to_string(count) + " parameters, expected " +
                         std::to_string(expected));
  s.for_each_param([&](const std::string& name, Tensor& t) {
    const uint32_t name_len = ckpt::read_pod<uint32_t>(is, "name length");
    std::string got(name_len, '\0');
    if (!is.read(got.data(), name_len)) throw ParseError("checkpoint truncated in name");
    if (got != name)
      throw IntegrityError("checkpoint parameter '" + got + "' where '" + name + "' expected");
    const uint32_t ndim = ckpt::read_pod<uint32_t>(is, "ndim");
    Shape shape(ndim);
    for (uint32_t i = 0; i < ndim; ++i)
      shape[i] = static_cast<int>(ckpt::read_pod<int64_t>(is, "dim"));
    if (shape != t.shape)
      throw IntegrityError("checkpoint shape " + shape_str(shape) + " for '" + name +
                           "', expected " + shape_str(t.shape));
    if (!is.read(reinterpret_cast<char*>(t.values.data()),
                 static_cast<std::streamsize>(t.values.size() * sizeof(double))))
      throw ParseError("checkpoint truncated in '" + name + "'");
  });
  if (s.fingerprint() != stored_fp)
    throw IntegrityError("checkpoint fingerprint mismatch in " + path.string());
  return s;
}

// Tape bindings for every parameter, in for_each_param order. One binding
// serves all forward passes built on the same tape, so gradients from
// multiple loss terms accumulate on shared leaves.
struct ModelVars {
  Var tok_embedding, pos_embedding;
  struct LayerVars {
    Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias;
    Var mlp_in_w, mlp_in_b, mlp_out_w, mlp_out_b;
  };
  std::vector<LayerVars> layers;
  Var final_gain, final_bias, unembed;
  std::vector<Var> flat;  // same order as ModelState::for_each_param

  static ModelVars bind(Tape& tape, const ModelState& state) {
    ModelVars v;
    state.for_each_param([&](const std::string&, const Tensor& t) {
      v.flat.push_back(tape.leaf(t));
    });
    size_t i = 0;
    v.tok_embedding = v.flat[i++];
    v.pos_embedding = v.flat[i++];
    v.layers.resize(state.layers.size());
    for (auto& l : v.layers) {
      l.ln1_gain = v.flat[i++];
      l.ln1_bias = v.flat[i++];
      l.wq = v.flat[i++];
      l.wk = v.flat[i++];
      l.wv = v.flat[i++];
      l.wo = v.flat[i++];
      l.ln2_gain = v.flat[i++];
      l.ln2_bias = v.flat[i++];
      l.mlp_in_w = v.flat[i++];
      l.mlp_in_b = v.flat[i++];
      l.mlp_out_w = v.flat[i++];
      l.mlp_out_b = v.flat[i++];
    }
    v.final_gain = v.flat[i++];
    v.final_bias = v.flat[i++];
    v.unembed = v.flat[i++];
    return v;
  }
};

// Builds the transformer body on the tape: token+position embeddings,
// pre-norm attention and MLP blocks, final normalization. Returns the
// [t x d] hidden states.
inline Var transformer_hidden(Tape& tape, const ModelVars& vars, const ModelConfig& cfg,
                              const std::vector<int>& tokens, const AttentionMask& mask,
                              AttentionProbe* probe = nullptr) {
  const int t = static_cast<int>(tokens.size());
  if (t < 1) throw ArgumentError("empty token sequence");
  if (t > cfg.max_seq_len)
    throw TruncationError("sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len) + "; caller must pre-truncate");
  if (mask.size != t)
    throw DimensionError("mask size " + std::to_string(mask.size) +
                         " does not match sequence length " + std::to_string(t));
  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  Var x = tape.add(tape.embedding_rows(vars.tok_embedding, tokens),
                   tape.slice_rows(vars.pos_embedding, 0, t));
  for (const auto& l : vars.layers) {
    Var h = tape.layer_norm(x, l.ln1_gain, l.ln1_bias);
    Var q = tape.matmul(h, l.wq);
    Var k = tape.matmul(h, l.wk);
    Var v = tape.matmul(h, l.wv);
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      Var qh = tape.slice_cols(q, hd * dh, dh);
      Var kh = tape.slice_cols(k, hd * dh, dh);
      Var vh = tape.slice_cols(v, hd * dh, dh);
      heads.push_back(tape.masked_attention(qh, kh, vh, mask, probe));
    }
    Var att = tape.matmul(tape.concat_cols(heads), l.wo);
    x = tape.add(x, att);
    Var h2 = tape.layer_norm(x, l.ln2_gain, l.ln2_bias);
    Var up = tape.gelu(tape.add_row_broadcast(tape.matmul(h2, l.mlp_in_w), l.mlp_in_b));
    Var down = tape.add_row_broadcast(tape.matmul(up, l.mlp_out_w), l.mlp_out_b);
    x = tape.add(x, down);
  }
  return tape.layer_norm(x, vars.final_gain, vars.final_bias);
}

inline void check_token_ids(const std::vector<int>& tokens, int vocab_size) {
  for (int id : tokens)
    if (id < 0 || id >= vocab_size)
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab_size));
}

// Appends the end-of-sequence token, runs a causal pass, and returns the
// hidden state at the appended position — the V_seq representation.
inline Var sequence_embedding_var(Tape& tape, const ModelVars& vars, const ModelConfig& cfg,
                                  std::vector<int> tokens, AttentionProbe* probe = nullptr) {
  check_token_ids(tokens, cfg.vocab_size);
  if (static_cast<int>(tokens.size()) + 1 > cfg.max_seq_len)
    throw TruncationError("sequence of " + std::to_string(tokens.size()) +
                          " tokens plus eos exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len) + "; caller must pre-truncate");
  tokens.push_back(cfg.eos_token_id);
  const int t = static_cast<int>(tokens.size());
  Var hidden = transformer_hidden(tape, vars, cfg, tokens, causal_mask(t), probe);
  return tape.slice_rows(hidden, t - 1, 1);
}

inline Tensor sequence_embedding(const ModelState& state, const std::vector<int>& tokens) {
  Tape tape;
  ModelVars vars = ModelVars::bind(tape, state);
  return tape.value(sequence_embedding_var(tape, vars, state.config, tokens));
}

inline Var next_token_logits_var(Tape& tape, const ModelVars& vars, const ModelConfig& cfg,
                                 const std::vector<int>& tokens, const AttentionMask& mask,
                                 AttentionProbe* probe = nullptr) {
  check_token_ids(tokens, cfg.vocab_size);
  Var hidden = transformer_hidden(tape, vars, cfg, tokens, mask, probe);
  return tape.matmul(hidden, vars.unembed);
}

// Per-position vocabulary logits under the given mask.
inline Tensor next_token_logits(const ModelState& state, const std::vector<int>& tokens,
                                const AttentionMask& mask, AttentionProbe* probe = nullptr) {
  Tape tape;
  ModelVars vars = ModelVars::bind(tape, state);
  return tape.value(next_token_logits_var(tape, vars, state.config, tokens, mask, probe));
}

}  // namespace retgen
