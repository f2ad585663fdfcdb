#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "rohydr/data.hpp"
#include "rohydr/multimodal.hpp"
#include "rohydr/param_registry.hpp"
#include "rohydr/unimodal.hpp"

namespace rohydr::model {

using recovery::Reps;

// Which parts of the recovery pipeline are active. Switching one off
// removes its loss terms and leaves its parameters untouched.
struct Components {
  bool hddm = true;
  bool ur = true;
  bool disc = true;
  bool mr = true;

  bool operator==(const Components&) const = default;
  std::string str() const;  // e.g. "hddm+ur+disc+mr", "none"
};

struct ModelConfig {
  std::array<std::size_t, data::kModalities> dims{16, 32, 16};
  std::size_t width = 32;
  std::size_t tokens = 8;
  std::size_t heads = 4;
  std::size_t conv_kernel = 3;
  std::size_t lstm_hidden = 16;
  std::size_t denoiser_blocks = 2;
  std::size_t fusion_blocks = 1;
  std::size_t mlp_hidden = 64;
  std::size_t fused_width = 32;
  std::size_t head_hidden = 32;  // UR, MR, discriminator and classifier
  std::size_t diffusion_steps = 50;
  double x0_clip = 4.0;  // sampling clamp on the implied x_0; 0 disables
  Components components;
  // Baseline: missing slots become zero tensors and nothing is recovered.
  bool zero_impute = false;

  void validate() const;
};

/// Everything a forward pass over one batch needs from the dataset.
struct Batch {
  std::vector<std::size_t> index;       // dataset rows
  std::array<Tensor, data::kModalities> raw;  // [B, L, d_m]
  std::vector<data::Mask> masks;
  Tensor labels;  // [B]
};

// Gathers rows of `dataset`. With `withhold_missing` the masked slots are
// never read and stay zero, which is what inference sees.
Batch make_batch(const data::Dataset& dataset, const std::vector<std::size_t>& rows,
                 bool withhold_missing);

/// Output of the recovery path for one batch.
struct Recovery {
  Reps merged;  // available representations with recovered slots filled in
  std::array<std::vector<std::size_t>, data::kModalities> rows;  // missing rows per modality
  std::array<Tensor, data::kModalities> refined;  // recovered rows, [rows, L', d]
};

class RoHyDR {
 public:
  RoHyDR(const ModelConfig& cfg, std::uint64_t seed);
  RoHyDR(const RoHyDR&) = delete;
  RoHyDR& operator=(const RoHyDR&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry& registry() { return reg_; }
  const ParamRegistry& registry() const { return reg_; }
  const recovery::DiffusionSchedule& schedule() const { return schedule_; }

  Reps extract(const Batch& batch) const;

  // Fills every missing slot: diffusion sample (or plain noise without
  // HDDM) refined by UR (or passed through without UR). The chain is strided
  // by `stride`; with `chain_grad` false it is sampled outside the graph and
  // only UR stays differentiable.
  Recovery recover(const Reps& reps, const std::vector<data::Mask>& masks, std::size_t stride,
                   nn::Rng& rng, bool chain_grad = true) const;

  Tensor fuse(const Reps& reps) const { return fusion_.forward(reps); }
  Tensor refine(const Tensor& f_rec) const;  // identity without MR
  Tensor classify(const Tensor& f) const { return clf_.forward(f); }

  Tensor hddm_loss(const Reps& reps, const std::vector<data::Mask>& masks, nn::Rng& rng) const;
  // Needs a recovery produced from the same masks.
  Tensor ur_loss(const Recovery& rec, const Reps& truth,
                 const std::vector<data::Mask>& masks) const;

  const recovery::Discriminator& discriminator() const { return disc_; }
  std::array<const recovery::Denoiser*, data::kModalities> denoisers() const;

 private:
  ModelConfig cfg_;
  ParamRegistry reg_;
  recovery::DiffusionSchedule schedule_;
  std::array<recovery::FeatureExtractor, data::kModalities> fe_;
  std::array<recovery::Denoiser, data::kModalities> den_;
  std::array<recovery::UnimodalReconstructor, data::kModalities> ur_;
  recovery::FusionNetwork fusion_;
  recovery::MultimodalReconstructor mr_;
  recovery::Discriminator disc_;
  recovery::Classifier clf_;
};

// Checkpoint directory: manifest.json (model config, extra metadata, and
// group -> tensor name -> shape) plus one blob per tensor.
void save_checkpoint(const RoHyDR& model, const std::filesystem::path& dir,
                     const std::string& extra_json = "{}");
// Loads tensors into `model`; throws FormatError if names or shapes differ.
void load_checkpoint(RoHyDR& model, const std::filesystem::path& dir);
ModelConfig read_checkpoint_config(const std::filesystem::path& dir);
std::string read_checkpoint_extra(const std::filesystem::path& dir);

}  // namespace rohydr::model
