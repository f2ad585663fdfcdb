#pragma once

#include "rohydr/data.hpp"
#include "rohydr/model.hpp"
#include "rohydr/trainer.hpp"

namespace rohydr::testing {

// Small enough that a training epoch takes milliseconds.
inline model::ModelConfig tiny_model_config() {
  model::ModelConfig c;
  c.dims = {3, 4, 3};
  c.width = 8;
  c.tokens = 2;
  c.heads = 2;
  c.conv_kernel = 3;
  c.lstm_hidden = 4;
  c.denoiser_blocks = 1;
  c.fusion_blocks = 1;
  c.mlp_hidden = 8;
  c.fused_width = 8;
  c.head_hidden = 8;
  c.diffusion_steps = 10;
  return c;
}

inline data::Dataset tiny_dataset(std::size_t n = 60, std::uint64_t seed = 3) {
  data::DatasetSpec spec;
  spec.n = n;
  spec.seq_len = 4;
  spec.dims = {3, 4, 3};
  spec.latent = 2;
  spec.seed = seed;
  return data::generate_synthetic(spec);
}

inline train::TrainConfig tiny_train_config() {
  train::TrainConfig c;
  c.epochs = 2;
  c.batch_size = 16;
  c.stride = 5;
  c.eval_batch = 32;
  c.lr = 1e-2;
  c.lr_disc = 1e-2;
  return c;
}

}  // namespace rohydr::testing
