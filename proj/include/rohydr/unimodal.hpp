#pragma once

#include <array>
#include <cstddef>
#include <utility>
#include <vector>

#include "rohydr/data.hpp"
#include "rohydr/nn.hpp"
#include "rohydr/param_registry.hpp"
#include "rohydr/tensor.hpp"

namespace rohydr::recovery {

using data::kModalities;
using data::Mask;
using Reps = std::array<Tensor, kModalities>;  // per modality [B, L', d]

/// Noise schedule indexed 1..T. gamma_bar(0) is 1. A respaced schedule
/// keeps, for each of its steps, the original step the denoiser was
/// trained on (model_step).
class DiffusionSchedule {
 public:
  DiffusionSchedule() = default;

  static DiffusionSchedule linear(std::size_t steps, double beta_start, double beta_end);
  // Linear schedule whose endpoints scale with 1000 / T, so that the final
  // step is close to pure noise for any T.
  static DiffusionSchedule scaled_linear(std::size_t steps);
  static DiffusionSchedule from_betas(std::vector<double> betas,
                                     std::vector<std::size_t> model_steps = {});

  // Schedule over strided_steps(T, stride); consecutive retained steps are
  // joined by a single transition with the same cumulative product.
  DiffusionSchedule respaced(std::size_t stride) const;

  std::size_t steps() const { return betas_.size(); }
  double beta(std::size_t t) const { return betas_.at(check(t) - 1); }
  double gamma(std::size_t t) const { return 1.0 - beta(t); }
  double gamma_bar(std::size_t t) const;
  // Variance of q(x_{t-1} | x_t, x_0).
  double posterior_variance(std::size_t t) const;
  // Range [log posterior variance, log beta] for the learned variance. The
  // first step borrows the second step's posterior variance (its own is 0).
  std::pair<double, double> log_variance_bounds(std::size_t t) const;
  std::size_t model_step(std::size_t t) const { return model_steps_.at(check(t) - 1); }

 private:
  std::size_t check(std::size_t t) const;
  std::vector<double> betas_;
  std::vector<double> gamma_bar_;  // gamma_bar_[t], t = 0..T
  std::vector<std::size_t> model_steps_;
};

// T, T - s, T - 2s, ... (all > 1), then 1.
std::vector<std::size_t> strided_steps(std::size_t steps, std::size_t stride);

// sqrt(gamma_bar_t) x0 + sqrt(1 - gamma_bar_t) eps, outside the graph.
// t = 0 returns x0.
Tensor forward_diffuse(const Tensor& x0, std::size_t t, const Tensor& eps,
                       const DiffusionSchedule& schedule);

// [B, 1, 1] tensor of a per-instance coefficient.
Tensor per_instance(const std::vector<double>& values, std::size_t rank = 3);

// (x_t - beta_t / sqrt(1 - gamma_bar_t) eps_hat) / sqrt(gamma_t), with t
// given per instance (leading axis).
Tensor mean_from_eps(const Tensor& x_t, const std::vector<std::size_t>& t, const Tensor& eps_hat,
                     const DiffusionSchedule& schedule);

// Mean plus exp(log_var / 2) * noise. An undefined `noise` means zero.
Tensor reverse_step(const Tensor& x_t, std::size_t t, const Tensor& eps_hat,
                    const Tensor& log_var, const DiffusionSchedule& schedule,
                    const Tensor& noise);

// Same step written through the implied x_0 estimate, which is clamped to
// [-clip, clip] before forming the posterior mean. Keeps an inaccurate noise
// prediction from being amplified by 1 / sqrt(gamma_bar_t) near t = T.
Tensor reverse_step_clipped(const Tensor& x_t, std::size_t t, const Tensor& eps_hat,
                            const Tensor& log_var, const DiffusionSchedule& schedule,
                            const Tensor& noise, double clip);

// Maps a raw head output into the per-step log variance range by sigmoid
// interpolation between the bounds.
Tensor bounded_log_variance(const Tensor& raw, const std::vector<std::size_t>& t,
                            const DiffusionSchedule& schedule);

// Sum over rows of the per-coordinate mean of
// (target - mean)^2 / (2 exp(log_var)) + log_var / 2.
Tensor gaussian_nll(const Tensor& target, const Tensor& mean, const Tensor& log_var);

// ---- feature extraction -------------------------------------------------

struct FeatureConfig {
  std::size_t width = 32;   // shared representation width d
  std::size_t tokens = 8;   // tokens per modality L'
  std::size_t conv_kernel = 3;
  std::size_t lstm_hidden = 16;
};

/// conv1d -> relu -> BiLSTM -> linear to width -> mean pool to L' tokens ->
/// layer norm (no affine). Parameters live in theta_fe.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(ParamRegistry& reg, const std::string& name, std::size_t in_dim,
                   const FeatureConfig& cfg, nn::Rng& rng);

  // raw: [B, L, in_dim] (or [L, in_dim]) -> [B, L', d] (or [L', d]).
  Tensor forward(const Tensor& raw) const;

 private:
  FeatureConfig cfg_;
  std::size_t in_dim_ = 0;
  nn::Conv1d conv_;
  nn::BiLstm lstm_;
  nn::Linear proj_;
};

// [L', L] averaging matrix over contiguous, near-equal windows.
Tensor pooling_matrix(std::size_t len, std::size_t tokens);

// ---- denoiser ------------------------------------------------------------

struct DenoiserConfig {
  std::size_t width = 32;
  std::size_t tokens = 8;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t mlp_hidden = 64;
};

struct DenoiserOutput {
  Tensor eps;      // [B, L', d]
  Tensor log_var;  // [B, L', d], within the step's bounds
};

/// Conditioning for one denoiser: the tokens of every modality with a type
/// embedding added, plus a key mask hiding unavailable modalities.
struct Conditioning {
  Tensor tokens;    // [B, 3 L', d]
  Tensor key_bias;  // [B, 1, 1, 3 L']
};

/// Transformer denoiser for one target modality: body and noise head in
/// theta_mu, variance head in theta_sigma.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(ParamRegistry& reg, const std::string& name, const DenoiserConfig& cfg,
           nn::Rng& rng);

  // reps[m] may be undefined for modalities that are unavailable in every
  // row. Each row needs at least one available modality.
  Conditioning condition(const Reps& reps, const std::vector<Mask>& masks) const;

  // x_t: [B, L', d]; t: schedule step per row (1-based).
  DenoiserOutput forward(const Tensor& x_t, const std::vector<std::size_t>& t,
                         const Conditioning& cond, const DiffusionSchedule& schedule) const;

  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  Tensor position_;  // fixed [L', d]
  Tensor type_embedding_;
  nn::Mlp time_mlp_;
  std::vector<nn::AttentionBlock> blocks_;
  nn::LayerNorm final_ln_;
  nn::Linear eps_head_;
  nn::Linear sigma_head_;
};

// Full reverse chain from x_T ~ N(0, I) over every step of `schedule`
// (pass a respaced schedule for strided sampling). The last step adds no
// noise. Differentiable with respect to the denoiser. A positive `x0_clip`
// switches to reverse_step_clipped.
Tensor reverse_chain(const Denoiser& denoiser, const Conditioning& cond, std::size_t rows,
                     const DiffusionSchedule& schedule, nn::Rng& rng, double x0_clip = 0.0);

/// Rows of one modality recovered by diffusion.
struct Recovered {
  std::vector<std::size_t> rows;  // batch rows where the modality is missing
  Tensor tokens;                  // [rows, L', d], undefined if rows is empty
};

std::vector<std::size_t> missing_rows(const std::vector<Mask>& masks, std::size_t m);

// Samples every missing modality of every row, conditioned on the available
// ones, with the chain strided by `stride`.
std::array<Recovered, kModalities> sample_missing(
    const Reps& reps, const std::vector<Mask>& masks,
    const std::array<const Denoiser*, kModalities>& denoisers,
    const DiffusionSchedule& schedule, std::size_t stride, nn::Rng& rng, double x0_clip = 0.0);

// Diffusion objective: one step t per missing (row, modality); the targets
// come from the detached ground-truth representations. Returns the gated
// sum over modalities of per-coordinate means, averaged over all rows.
Tensor l_hddm(const Reps& reps, const std::vector<Mask>& masks,
              const std::array<const Denoiser*, kModalities>& denoisers,
              const DiffusionSchedule& schedule, nn::Rng& rng);

// ---- unimodal reconstructor ----------------------------------------------

/// Residual refinement of a diffusion sample (theta_ur); identity at init.
class UnimodalReconstructor {
 public:
  UnimodalReconstructor() = default;
  UnimodalReconstructor(ParamRegistry& reg, const std::string& name, std::size_t width,
                        std::size_t hidden, nn::Rng& rng);
  Tensor forward(const Tensor& x) const { return net_.forward(x); }
  nn::ResidualMlp& net() { return net_; }

 private:
  nn::ResidualMlp net_;
};

// Gated squared error: (1/B) sum_rows sum_m beta_m mean_coords (rec - truth)^2.
// rec[m] / truth[m] are [B, L', d]; entries for modalities missing nowhere
// may be undefined.
Tensor l_ur(const Reps& rec, const Reps& truth, const std::vector<Mask>& masks);

}  // namespace rohydr::recovery
