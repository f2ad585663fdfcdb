#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "rohydr/param_registry.hpp"
#include "rohydr/tensor.hpp"

namespace rohydr::nn {

using Rng = std::mt19937_64;

enum class Init { kKaiming, kZero };

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) or all zeros.
Tensor init_tensor(const Shape& shape, std::size_t fan_in, Init init, Rng& rng);

// Standard normal draws, no gradient.
Tensor normal_tensor(const Shape& shape, Rng& rng);

/// Affine map x W + b over the trailing axis.
class Linear {
 public:
  Linear() = default;
  Linear(ParamRegistry& reg, Group group, const std::string& name,
         std::size_t in, std::size_t out, Rng& rng, Init init = Init::kKaiming);

  // `frozen` evaluates with detached copies of the weights so that no
  // gradient reaches them.
  Tensor forward(const Tensor& x, bool frozen = false) const;

  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  Tensor weight() const { return w_; }
  Tensor bias() const { return b_; }

 private:
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  Tensor w_;
  Tensor b_;
};

/// Temporal convolution with zero "same" padding: [L, in] or [B, L, in]
/// to the same leading shape with `out` channels.
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParamRegistry& reg, Group group, const std::string& name,
         std::size_t in, std::size_t out, std::size_t kernel, Rng& rng);

  Tensor forward(const Tensor& x) const;

  std::size_t kernel() const { return kernel_; }
  // Weight rows are ordered (offset, input channel).
  Tensor weight() const { return proj_.weight(); }
  Tensor bias() const { return proj_.bias(); }

 private:
  std::size_t in_ = 0;
  std::size_t kernel_ = 0;
  Linear proj_;
};

/// Bidirectional LSTM with zero initial states. Output concatenates the
/// forward and backward hidden states per step: [.., L, 2 * hidden].
class BiLstm {
 public:
  BiLstm() = default;
  BiLstm(ParamRegistry& reg, Group group, const std::string& name,
         std::size_t in, std::size_t hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;
  std::size_t hidden() const { return hidden_; }

 private:
  struct Direction {
    Tensor w_x;  // [in, 4h], gate order i, f, g, o
    Tensor w_h;  // [h, 4h]
    Tensor b;    // [4h]
  };
  Tensor run(const Direction& dir, const Tensor& x, bool reverse) const;

  std::size_t in_ = 0;
  std::size_t hidden_ = 0;
  Direction fwd_;
  Direction bwd_;
};

/// Layer normalisation over the last axis with a learned gain and bias.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, Group group, const std::string& name,
            std::size_t width);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor gain_;
  Tensor bias_;
};

/// Multi-head scaled dot-product attention with learned projections.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry& reg, Group group, const std::string& name,
                     std::size_t width, std::size_t heads, Rng& rng,
                     Init out_init = Init::kZero);

  // queries: [B, Lq, d]; kv: [B, Lkv, d]. `key_bias`, when defined, is a
  // constant [B, 1, 1, Lkv] added to the scores (large negative values mask
  // keys out). Optionally returns the [B, H, Lq, Lkv] attention weights.
  Tensor forward(const Tensor& queries, const Tensor& kv,
                 const Tensor& key_bias = {}, Tensor* weights = nullptr) const;

  std::size_t heads() const { return heads_; }

 private:
  Tensor split_heads(const Tensor& x) const;

  std::size_t width_ = 0;
  std::size_t heads_ = 0;
  Linear q_;
  Linear k_;
  Linear v_;
  Linear o_;
};

/// Builds a [B, 1, 1, L] additive key mask from per-token availability.
Tensor key_bias_from_mask(const std::vector<std::vector<bool>>& available);

inline constexpr double kMaskedScore = -1e9;

struct BlockConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 64;
  bool self_attention = true;
  bool cross_attention = false;
};

/// Pre-norm transformer block: optional self-attention, optional
/// cross-attention onto conditioning tokens, then a position-wise MLP, each
/// wrapped in a residual connection. Output projections start at zero so a
/// fresh block is the identity map.
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(ParamRegistry& reg, Group group, const std::string& name,
                 const BlockConfig& cfg, Rng& rng);

  // x: [B, L, d] (or [L, d]); cond: [B, Lkv, d], required iff the block
  // has cross-attention.
  Tensor forward(const Tensor& x, const Tensor& cond = {},
                 const Tensor& key_bias = {}) const;

  const BlockConfig& config() const { return cfg_; }

 private:
  BlockConfig cfg_;
  LayerNorm ln_self_;
  MultiHeadAttention self_;
  LayerNorm ln_cross_;
  LayerNorm ln_kv_;
  MultiHeadAttention cross_;
  LayerNorm ln_mlp_;
  Linear mlp_in_;
  Linear mlp_out_;
};

/// x + W2 relu(W1 x + b1) + b2 with W2, b2 zero-initialised, so the block
/// is exactly the identity at construction.
class ResidualMlp {
 public:
  ResidualMlp() = default;
  ResidualMlp(ParamRegistry& reg, Group group, const std::string& name,
              std::size_t width, std::size_t hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;
  Tensor branch(const Tensor& x) const;

  Linear& output_layer() { return out_; }

 private:
  std::size_t width_ = 0;
  Linear in_;
  Linear out_;
};

/// Two-layer perceptron in -> hidden -> out with ReLU.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamRegistry& reg, Group group, const std::string& name, std::size_t in,
      std::size_t hidden, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x, bool frozen = false) const;

 private:
  Linear in_;
  Linear out_;
};

// Fixed sinusoidal embedding of positions/timesteps: [count, width].
Tensor sinusoidal_embedding(const std::vector<double>& positions,
                            std::size_t width);

}  // namespace rohydr::nn
