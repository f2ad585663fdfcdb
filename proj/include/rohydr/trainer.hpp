#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rohydr/adam.hpp"
#include "rohydr/data.hpp"
#include "rohydr/model.hpp"

namespace rohydr::train {

enum class Strategy { kOne, kTwo, kThree };
std::string strategy_name(Strategy s);  // "one", "two", "three"
Strategy parse_strategy(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;       // main optimizer
  double lr_disc = 1e-3;  // discriminator optimizer
  double lambda_g = 1.0;
  double lambda_al = 0.5;
  double lambda_c = 0.5;
  Strategy strategy = Strategy::kThree;
  std::uint64_t seed = 1;
  std::size_t stride = 10;       // diffusion stride during training
  std::size_t eval_stride = 1;   // 1 = full reverse chain
  std::size_t eval_batch = 64;

  void validate() const;
};

// ---- stage objectives (work on doubles and on scalar tensors) ---------------

template <class T>
T stage1_objective(const T& hddm, const T& ur, double lambda_g) {
  return (hddm + ur * lambda_g) / (1.0 + lambda_g);
}

template <class T>
T stage2_objective(const T& disc, const T& mr) {
  return disc + mr;
}

template <class T>
T stage3_objective(const T& c1, const T& c2, double lambda_c) {
  return c1 * lambda_c + c2 * (1.0 - lambda_c);
}

// lambda_g (L_HDDM + L_UR) + (L_D + L_MR) + lambda_c L_C1 + (1 - lambda_c) L_C2.
template <class T>
T one_stage_objective(const T& generative, const T& disc_plus_mr, const T& c1, const T& c2,
                      double lambda_g, double lambda_c) {
  return generative * lambda_g + disc_plus_mr + stage3_objective(c1, c2, lambda_c);
}

// Second phase of the two-stage variant: (L_D + L_MR) + lambda_c L_C1 + (1 - lambda_c) L_C2.
template <class T>
T two_stage_phase2_objective(const T& disc_plus_mr, const T& c1, const T& c2, double lambda_c) {
  return disc_plus_mr + stage3_objective(c1, c2, lambda_c);
}

/// Component losses of one update, as plain numbers (0 when a term is off).
struct LossTerms {
  double hddm = 0, ur = 0, disc = 0, adv = 0, rec = 0, mr = 0, c1 = 0, c2 = 0;
  double total = 0;  // the objective that was minimised
};

class NumericFailure : public std::runtime_error {
 public:
  NumericFailure(const std::string& stage, double value);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct EpochReport {
  std::size_t epoch = 0;  // 1-based
  double loss_s1 = 0, loss_s2 = 0, loss_s3 = 0;  // per-batch means
  std::size_t batches = 0;
  std::uint64_t forward_passes = 0;
};

struct Metrics {
  double acc2 = 0, acc7 = 0, f1 = 0;
};

// Sentiment class rules used by every metric.
bool positive_class(double y);   // y >= 0
int seven_class(double y);       // clamp(round(y), -3, 3)
Metrics compute_metrics(const std::vector<double>& pred, const std::vector<double>& label);

/// Runs the optimisation strategies on one model.
class Trainer {
 public:
  Trainer(model::RoHyDR& model, const TrainConfig& cfg);

  LossTerms stage1_step(const model::Batch& batch);
  // Returns L_D (computed before the discriminator update) in `disc` and the
  // L_MR terms; `total` is L_S2 = L_D + L_MR.
  LossTerms stage2_step(const model::Batch& batch);
  LossTerms stage3_step(const model::Batch& batch);
  LossTerms one_stage_step(const model::Batch& batch);
  std::pair<LossTerms, LossTerms> two_stage_step(const model::Batch& batch);
  // Zero-impute baseline: classifier loss on zero-filled inputs; updates
  // feature extractors, fusion and classifier.
  LossTerms baseline_step(const model::Batch& batch);

  EpochReport train_epoch(const data::Dataset& dataset);

  // Number of full forward passes of the model so far (one per stage).
  std::uint64_t forward_passes() const { return forward_passes_; }
  std::size_t epochs_done() const { return epoch_; }
  void set_epochs_done(std::size_t e) { epoch_ = e; }

  AdamState& optimizer() { return opt_; }
  AdamState& disc_optimizer() { return opt_d_; }

 private:
  struct Forward;
  Forward forward(const model::Batch& batch, bool chain_grad, bool need_rec_path);
  void update(GroupSet groups, AdamState& state, double lr);
  void check_finite(const std::string& stage, double value) const;

  model::RoHyDR& model_;
  TrainConfig cfg_;
  nn::Rng rng_;
  AdamState opt_;
  AdamState opt_d_;
  std::uint64_t forward_passes_ = 0;
  std::size_t epoch_ = 0;
};

// Predictions on `rows` using only available modalities and fresh noise.
// Runs under an InferenceGuard for `dataset`.
std::vector<double> predict(const model::RoHyDR& model, const data::Dataset& dataset,
                            const std::vector<std::size_t>& rows, std::size_t stride,
                            std::size_t batch_size, std::uint64_t seed);

Metrics evaluate(const model::RoHyDR& model, const data::Dataset& dataset,
                 const std::vector<std::size_t>& rows, const TrainConfig& cfg);

// ---- records -----------------------------------------------------------------

struct MetricsRecord {
  std::string protocol;    // e.g. "random", "fixed", "val"
  std::string mr_or_set;   // "0.500000" or "a+t"
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  Metrics metrics;
  double loss_s1 = 0, loss_s2 = 0, loss_s3 = 0;
};

std::string csv_header();
std::string csv_row(const MetricsRecord& r);
// Parses a row written by csv_row; throws std::invalid_argument.
MetricsRecord parse_csv_row(const std::string& line);

/// A full training run: per-epoch validation rows, and the test metrics of
/// the best-validation epoch (ties go to the earlier epoch).
struct RunResult {
  std::vector<MetricsRecord> epochs;
  std::size_t best_epoch = 0;
  Metrics test;
};

struct RunOptions {
  std::string protocol = "random";
  std::string mr_or_set = "0.000000";
  // Called after every epoch, e.g. to stream CSV rows or checkpoints.
  std::function<void(const MetricsRecord&, bool is_best)> on_epoch;
};

// Trains `model` on `dataset` (whose masks define the protocol) and keeps
// the parameters of the best validation epoch in `model` at the end.
RunResult run(model::RoHyDR& model, const data::Dataset& dataset, const TrainConfig& cfg,
              const RunOptions& options, Trainer* resume = nullptr);

// Stable 64-bit sub-seed for a purpose tag.
std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t purpose);

}  // namespace rohydr::train
