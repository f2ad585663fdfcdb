#pragma once

#include <array>
#include <vector>

#include "rohydr/nn.hpp"
#include "rohydr/unimodal.hpp"

namespace rohydr::recovery {

// Clamp applied to discriminator outputs so every log stays finite.
inline constexpr double kProbabilityEps = 1e-7;

struct FusionConfig {
  std::size_t width = 32;  // token width d
  std::size_t tokens = 8;  // tokens per modality L'
  std::size_t heads = 4;
  std::size_t blocks = 1;
  std::size_t mlp_hidden = 64;
  std::size_t fused_width = 32;  // d_f
};

/// Shared multimodal transformer (theta_f): type-embedded tokens of all
/// three modalities -> self-attention blocks -> layer norm -> mean over
/// tokens -> linear to d_f.
class FusionNetwork {
 public:
  FusionNetwork() = default;
  FusionNetwork(ParamRegistry& reg, const std::string& name, const FusionConfig& cfg,
                nn::Rng& rng);

  // Every slot must be populated with [B, L', d].
  Tensor forward(const Reps& inputs) const;  // [B, d_f]

  const FusionConfig& config() const { return cfg_; }

 private:
  FusionConfig cfg_;
  Tensor type_embedding_;
  std::vector<nn::AttentionBlock> blocks_;
  nn::LayerNorm final_ln_;
  nn::Linear out_;
};

/// Residual refinement of the recovered fused vector (theta_mr).
class MultimodalReconstructor {
 public:
  MultimodalReconstructor() = default;
  MultimodalReconstructor(ParamRegistry& reg, const std::string& name, std::size_t width,
                          std::size_t hidden, nn::Rng& rng);
  Tensor forward(const Tensor& f) const { return net_.forward(f); }
  nn::ResidualMlp& net() { return net_; }

 private:
  nn::ResidualMlp net_;
};

/// MLP with a sigmoid output clamped to [eps, 1 - eps] (theta_d).
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(ParamRegistry& reg, const std::string& name, std::size_t width,
                std::size_t hidden, nn::Rng& rng);

  // f: [B, d_f] -> [B]. `frozen` keeps gradients out of theta_d while still
  // passing them to f.
  Tensor forward(const Tensor& f, bool frozen = false) const;

 private:
  nn::Mlp net_;
};

/// Regression head d_f -> hidden -> 1 (theta_c).
class Classifier {
 public:
  Classifier() = default;
  Classifier(ParamRegistry& reg, const std::string& name, std::size_t width, std::size_t hidden,
             nn::Rng& rng);
  Tensor forward(const Tensor& f) const;  // [B]

 private:
  nn::Mlp net_;
};

// Mean over rows of the squared distance to a constant (detached) target.
Tensor l_rec(const Tensor& f_rec, const Tensor& f_gt);

// -mean log I_gt - mean log(1 - I_rec).
Tensor l_d(const Tensor& i_gt, const Tensor& i_rec);

// -mean log I_rec.
Tensor l_adv(const Tensor& i_rec);

// lambda * adv + (1 - lambda) * rec, lambda in [0, 1].
Tensor l_mr(const Tensor& adv, const Tensor& rec, double lambda);

// Mean squared error of per-row predictions.
Tensor l_c(const Tensor& pred, const Tensor& target);

// Discriminator objective on detached fused vectors: only theta_d can
// receive gradient.
Tensor discriminator_loss(const Discriminator& disc, const Tensor& f_gt, const Tensor& f_rec);

// Generator-side objective through a frozen discriminator.
Tensor adversarial_loss(const Discriminator& disc, const Tensor& f_rec);

}  // namespace rohydr::recovery
