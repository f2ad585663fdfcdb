#include "rohydr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace rohydr::train {

using data::kModalities;
using model::Batch;

namespace {

constexpr GroupSet kStage1Groups{Group::kFe, Group::kMu, Group::kSigma, Group::kUr};
constexpr GroupSet kStage2Groups{Group::kFe,     Group::kMu, Group::kSigma,
                                 Group::kUr,     Group::kFusion, Group::kMr};
constexpr GroupSet kAllButDisc = kStage2Groups.with(Group::kClf);
constexpr GroupSet kEverything = kAllButDisc.with(Group::kDisc);
constexpr GroupSet kBaselineGroups{Group::kFe, Group::kFusion, Group::kClf};

Tensor zero_loss() { return Tensor::zeros({1}); }

double value(const Tensor& t) { return t.item(); }

}  // namespace

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t purpose) {
  std::uint64_t x = seed ^ (purpose * 0x9e3779b97f4a7c15ULL);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kOne: return "one";
    case Strategy::kTwo: return "two";
    case Strategy::kThree: return "three";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "one" || name == "one-stage") return Strategy::kOne;
  if (name == "two" || name == "two-stage") return Strategy::kTwo;
  if (name == "three" || name == "three-stage") return Strategy::kThree;
  throw std::invalid_argument("unknown strategy '" + name + "' (expected one, two or three)");
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0 || eval_batch == 0) {
    throw ContractViolation("train: epochs and batch sizes must be positive");
  }
  if (!(lr >= 0.0) || !(lr_disc >= 0.0)) throw ContractViolation("train: negative learning rate");
  if (!(lambda_g >= 0.0)) throw ContractViolation("train: lambda_g must be >= 0");
  if (!(lambda_al >= 0.0 && lambda_al <= 1.0)) {
    throw ContractViolation("train: lambda_al must lie in [0, 1]");
  }
  if (!(lambda_c >= 0.0 && lambda_c <= 1.0)) {
    throw ContractViolation("train: lambda_c must lie in [0, 1]");
  }
  if (stride == 0 || eval_stride == 0) throw ContractViolation("train: stride must be positive");
}

NumericFailure::NumericFailure(const std::string& stage, double v)
    : std::runtime_error("non-finite loss " + std::to_string(v) + " in " + stage), stage_(stage) {}

// ---- metrics -----------------------------------------------------------------

bool positive_class(double y) { return y >= 0.0; }

int seven_class(double y) {
  return static_cast<int>(std::clamp(std::round(y), -3.0, 3.0));
}

Metrics compute_metrics(const std::vector<double>& pred, const std::vector<double>& label) {
  if (pred.empty() || pred.size() != label.size()) {
    throw ContractViolation("metrics: need equally sized, non-empty vectors");
  }
  std::size_t same2 = 0, same7 = 0, tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = positive_class(pred[i]), y = positive_class(label[i]);
    same2 += p == y;
    same7 += seven_class(pred[i]) == seven_class(label[i]);
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
  }
  Metrics m;
  const double n = static_cast<double>(pred.size());
  m.acc2 = static_cast<double>(same2) / n;
  m.acc7 = static_cast<double>(same7) / n;
  const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
  return m;
}

// ---- trainer -----------------------------------------------------------------

struct Trainer::Forward {
  model::Reps reps;
  model::Recovery rec;
  Tensor f_gt;
  Tensor f_tilde;
};

Trainer::Trainer(model::RoHyDR& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), rng_(sub_seed(cfg.seed, 1)) {
  cfg.validate();
  opt_.lr = cfg.lr;
  opt_d_.lr = cfg.lr_disc;
}

void Trainer::update(GroupSet groups, AdamState& state, double lr) {
  adam_step(model_.registry(), groups, state, lr);
}

void Trainer::check_finite(const std::string& stage, double v) const {
  if (!std::isfinite(v)) throw NumericFailure(stage, v);
}

Trainer::Forward Trainer::forward(const Batch& batch, bool chain_grad, bool gt_grad) {
  ++forward_passes_;
  Forward out;
  out.reps = model_.extract(batch);
  out.rec = model_.recover(out.reps, batch.masks, cfg_.stride, rng_, chain_grad);
  if (gt_grad) {
    out.f_gt = model_.fuse(out.reps);
  } else {
    NoGradGuard no_grad;
    out.f_gt = model_.fuse(out.reps);
  }
  out.f_tilde = model_.refine(model_.fuse(out.rec.merged));
  return out;
}

LossTerms Trainer::stage1_step(const Batch& batch) {
  const auto& comp = model_.config().components;
  model_.registry().set_trainable(kStage1Groups);
  GraphScope scope;
  ++forward_passes_;
  LossTerms terms;
  model::Reps reps = model_.extract(batch);
  Tensor hddm = comp.hddm ? model_.hddm_loss(reps, batch.masks, rng_) : zero_loss();
  Tensor ur = zero_loss();
  if (comp.ur) {
    model::Recovery rec = model_.recover(reps, batch.masks, cfg_.stride, rng_, false);
    ur = model_.ur_loss(rec, reps, batch.masks);
  }
  Tensor total = stage1_objective(hddm, ur, cfg_.lambda_g);
  terms.hddm = value(hddm);
  terms.ur = value(ur);
  terms.total = value(total);
  check_finite("stage1", terms.total);
  if (total.requires_grad()) {
    backward(total);
    update(kStage1Groups, opt_, cfg_.lr);
  }
  return terms;
}

LossTerms Trainer::stage2_step(const Batch& batch) {
  const auto& comp = model_.config().components;
  model_.registry().set_trainable(kStage2Groups.with(Group::kDisc));
  GraphScope scope;
  LossTerms terms;
  Forward fw = forward(batch, true, false);
  Tensor disc = zero_loss();
  if (comp.disc) {
    disc = recovery::discriminator_loss(model_.discriminator(), fw.f_gt, fw.f_tilde);
    terms.disc = value(disc);
    check_finite("stage2", terms.disc);
    backward(disc);
    update(GroupSet{Group::kDisc}, opt_d_, cfg_.lr_disc);
  }
  Tensor rec = recovery::l_rec(fw.f_tilde, fw.f_gt);
  Tensor mr = rec;
  if (comp.disc) {
    Tensor adv = recovery::adversarial_loss(model_.discriminator(), fw.f_tilde);
    terms.adv = value(adv);
    mr = recovery::l_mr(adv, rec, cfg_.lambda_al);
  }
  terms.rec = value(rec);
  terms.mr = value(mr);
  terms.total = stage2_objective(terms.disc, terms.mr);
  check_finite("stage2", terms.total);
  if (mr.requires_grad()) {
    backward(mr);
    update(kStage2Groups, opt_, cfg_.lr);
  }
  return terms;
}

LossTerms Trainer::stage3_step(const Batch& batch) {
  model_.registry().set_trainable(kAllButDisc);
  GraphScope scope;
  LossTerms terms;
  Forward fw = forward(batch, true, true);
  Tensor c1 = recovery::l_c(model_.classify(fw.f_tilde), batch.labels);
  Tensor c2 = recovery::l_c(model_.classify(fw.f_gt), batch.labels);
  Tensor total = stage3_objective(c1, c2, cfg_.lambda_c);
  terms.c1 = value(c1);
  terms.c2 = value(c2);
  terms.total = value(total);
  check_finite("stage3", terms.total);
  backward(total);
  update(kAllButDisc, opt_, cfg_.lr);
  return terms;
}

LossTerms Trainer::one_stage_step(const Batch& batch) {
  const auto& comp = model_.config().components;
  model_.registry().set_trainable(kEverything);
  GraphScope scope;
  LossTerms terms;
  Forward fw = forward(batch, true, true);
  Tensor hddm = comp.hddm ? model_.hddm_loss(fw.reps, batch.masks, rng_) : zero_loss();
  Tensor ur = comp.ur ? model_.ur_loss(fw.rec, fw.reps, batch.masks) : zero_loss();
  Tensor disc = zero_loss();
  Tensor rec = recovery::l_rec(fw.f_tilde, fw.f_gt);
  Tensor mr = rec;
  if (comp.disc) {
    disc = recovery::discriminator_loss(model_.discriminator(), fw.f_gt, fw.f_tilde);
    Tensor adv = recovery::adversarial_loss(model_.discriminator(), fw.f_tilde);
    terms.adv = value(adv);
    mr = recovery::l_mr(adv, rec, cfg_.lambda_al);
  }
  Tensor c1 = recovery::l_c(model_.classify(fw.f_tilde), batch.labels);
  Tensor c2 = recovery::l_c(model_.classify(fw.f_gt), batch.labels);
  Tensor total = one_stage_objective(hddm + ur, disc + mr, c1, c2, cfg_.lambda_g, cfg_.lambda_c);
  terms.hddm = value(hddm);
  terms.ur = value(ur);
  terms.disc = value(disc);
  terms.rec = value(rec);
  terms.mr = value(mr);
  terms.c1 = value(c1);
  terms.c2 = value(c2);
  terms.total = value(total);
  check_finite("one-stage", terms.total);
  // The discriminator sees detached inputs and the generator terms see a
  // frozen discriminator, so one backward pass splits cleanly.
  backward(total);
  if (comp.disc) update(GroupSet{Group::kDisc}, opt_d_, cfg_.lr_disc);
  update(kAllButDisc, opt_, cfg_.lr);
  return terms;
}

std::pair<LossTerms, LossTerms> Trainer::two_stage_step(const Batch& batch) {
  const auto& comp = model_.config().components;
  LossTerms first = stage1_step(batch);
  model_.registry().set_trainable(kEverything);
  GraphScope scope;
  LossTerms terms;
  Forward fw = forward(batch, true, true);
  Tensor disc = zero_loss();
  Tensor rec = recovery::l_rec(fw.f_tilde, fw.f_gt);
  Tensor mr = rec;
  if (comp.disc) {
    disc = recovery::discriminator_loss(model_.discriminator(), fw.f_gt, fw.f_tilde);
    Tensor adv = recovery::adversarial_loss(model_.discriminator(), fw.f_tilde);
    terms.adv = value(adv);
    mr = recovery::l_mr(adv, rec, cfg_.lambda_al);
  }
  Tensor c1 = recovery::l_c(model_.classify(fw.f_tilde), batch.labels);
  Tensor c2 = recovery::l_c(model_.classify(fw.f_gt), batch.labels);
  Tensor total = two_stage_phase2_objective(disc + mr, c1, c2, cfg_.lambda_c);
  terms.disc = value(disc);
  terms.rec = value(rec);
  terms.mr = value(mr);
  terms.c1 = value(c1);
  terms.c2 = value(c2);
  terms.total = value(total);
  check_finite("two-stage phase 2", terms.total);
  backward(total);
  if (comp.disc) update(GroupSet{Group::kDisc}, opt_d_, cfg_.lr_disc);
  update(kAllButDisc, opt_, cfg_.lr);
  return {first, terms};
}

LossTerms Trainer::baseline_step(const Batch& batch) {
  model_.registry().set_trainable(kBaselineGroups);
  GraphScope scope;
  ++forward_passes_;
  LossTerms terms;
  model::Reps reps = model_.extract(batch);
  model::Recovery rec = model_.recover(reps, batch.masks, cfg_.stride, rng_);
  Tensor c = recovery::l_c(model_.classify(model_.fuse(rec.merged)), batch.labels);
  terms.c1 = value(c);
  terms.total = terms.c1;
  check_finite("baseline", terms.total);
  backward(c);
  update(kBaselineGroups, opt_, cfg_.lr);
  return terms;
}

EpochReport Trainer::train_epoch(const data::Dataset& dataset) {
  if (dataset.train.empty()) throw ContractViolation("train_epoch: empty training split");
  std::vector<std::size_t> order = dataset.train;
  std::shuffle(order.begin(), order.end(), rng_);
  EpochReport report;
  report.epoch = ++epoch_;
  const std::uint64_t passes_before = forward_passes_;
  const bool baseline = model_.config().zero_impute;
  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                  order.begin() + static_cast<std::ptrdiff_t>(end));
    Batch batch = model::make_batch(dataset, rows, baseline);
    if (baseline) {
      report.loss_s3 += baseline_step(batch).total;
    } else if (cfg_.strategy == Strategy::kThree) {
      report.loss_s1 += stage1_step(batch).total;
      report.loss_s2 += stage2_step(batch).total;
      report.loss_s3 += stage3_step(batch).total;
    } else if (cfg_.strategy == Strategy::kTwo) {
      auto [a, b] = two_stage_step(batch);
      report.loss_s1 += a.total;
      report.loss_s2 += b.total;
    } else {
      report.loss_s1 += one_stage_step(batch).total;
    }
    ++report.batches;
  }
  const double n = static_cast<double>(report.batches);
  report.loss_s1 /= n;
  report.loss_s2 /= n;
  report.loss_s3 /= n;
  report.forward_passes = forward_passes_ - passes_before;
  return report;
}

// ---- evaluation --------------------------------------------------------------

std::vector<double> predict(const model::RoHyDR& model, const data::Dataset& dataset,
                            const std::vector<std::size_t>& rows, std::size_t stride,
                            std::size_t batch_size, std::uint64_t seed) {
  if (rows.empty()) throw ContractViolation("evaluate: empty split");
  NoGradGuard no_grad;
  data::InferenceGuard guard(dataset);
  nn::Rng rng(seed);
  std::vector<double> out;
  out.reserve(rows.size());
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const std::size_t end = std::min(rows.size(), start + batch_size);
    std::vector<std::size_t> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                   rows.begin() + static_cast<std::ptrdiff_t>(end));
    Batch batch = model::make_batch(dataset, chunk, /*withhold_missing=*/true);
    model::Reps reps = model.extract(batch);
    model::Recovery rec = model.recover(reps, batch.masks, stride, rng);
    Tensor y = model.classify(model.refine(model.fuse(rec.merged)));
    out.insert(out.end(), y.data().begin(), y.data().end());
  }
  return out;
}

Metrics evaluate(const model::RoHyDR& model, const data::Dataset& dataset,
                 const std::vector<std::size_t>& rows, const TrainConfig& cfg) {
  auto pred = predict(model, dataset, rows, cfg.eval_stride, cfg.eval_batch, sub_seed(cfg.seed, 3));
  std::vector<double> label(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) label[i] = dataset.label(rows[i]);
  return compute_metrics(pred, label);
}

// ---- records -----------------------------------------------------------------

std::string csv_header() {
  return "protocol,mr_or_set,seed,epoch,acc2,acc7,f1,loss_s1,loss_s2,loss_s3";
}

std::string csv_row(const MetricsRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%s,%llu,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f",
                r.protocol.c_str(), r.mr_or_set.c_str(), static_cast<unsigned long long>(r.seed),
                r.epoch, r.metrics.acc2, r.metrics.acc7, r.metrics.f1, r.loss_s1, r.loss_s2,
                r.loss_s3);
  return buf;
}

MetricsRecord parse_csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  if (cells.size() != 10) {
    throw std::invalid_argument("expected 10 fields, got " + std::to_string(cells.size()));
  }
  auto number = [&](std::size_t i) {
    std::size_t used = 0;
    double v = std::stod(cells[i], &used);
    if (used != cells[i].size()) throw std::invalid_argument("bad number '" + cells[i] + "'");
    return v;
  };
  MetricsRecord r;
  r.protocol = cells[0];
  r.mr_or_set = cells[1];
  r.seed = std::stoull(cells[2]);
  r.epoch = static_cast<std::size_t>(std::stoull(cells[3]));
  r.metrics = {number(4), number(5), number(6)};
  r.loss_s1 = number(7);
  r.loss_s2 = number(8);
  r.loss_s3 = number(9);
  return r;
}

RunResult run(model::RoHyDR& model, const data::Dataset& dataset, const TrainConfig& cfg,
              const RunOptions& options, Trainer* resume) {
  cfg.validate();
  std::optional<Trainer> own;
  Trainer* trainer = resume;
  if (trainer == nullptr) trainer = &own.emplace(model, cfg);
  RunResult result;
  double best = -1.0;
  auto best_params = model.registry().snapshot();
  while (trainer->epochs_done() < cfg.epochs) {
    EpochReport report = trainer->train_epoch(dataset);
    MetricsRecord rec;
    rec.protocol = options.protocol;
    rec.mr_or_set = options.mr_or_set;
    rec.seed = cfg.seed;
    rec.epoch = report.epoch;
    rec.metrics = evaluate(model, dataset, dataset.val, cfg);
    rec.loss_s1 = report.loss_s1;
    rec.loss_s2 = report.loss_s2;
    rec.loss_s3 = report.loss_s3;
    const bool is_best = rec.metrics.acc2 > best;
    if (is_best) {
      best = rec.metrics.acc2;
      result.best_epoch = rec.epoch;
      best_params = model.registry().snapshot();
    }
    result.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec, is_best);
  }
  model.registry().restore(best_params);
  result.test = evaluate(model, dataset, dataset.test, cfg);
  return result;
}

}  // namespace rohydr::train
