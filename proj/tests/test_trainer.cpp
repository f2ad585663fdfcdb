#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "fixtures.hpp"
#include "rohydr/tensor_io.hpp"

using namespace rohydr;
using namespace rohydr::train;
using rohydr::testing::tiny_dataset;
using rohydr::testing::tiny_model_config;
using rohydr::testing::tiny_train_config;

namespace {

using Sums = std::map<Group, std::uint64_t>;

Sums checksums(const model::RoHyDR& m) {
  Sums s;
  for (Group g : kAllGroups) s[g] = m.registry().checksum(g);
  return s;
}

std::vector<Group> changed(const Sums& before, const Sums& after) {
  std::vector<Group> out;
  for (Group g : kAllGroups) {
    if (before.at(g) != after.at(g)) out.push_back(g);
  }
  return out;
}

bool contains(const std::vector<Group>& v, Group g) {
  return std::ranges::find(v, g) != v.end();
}

model::Batch first_batch(const data::Dataset& ds, std::size_t size = 16) {
  std::vector<std::size_t> rows(ds.train.begin(), ds.train.begin() + static_cast<long>(size));
  return model::make_batch(ds, rows, false);
}

data::Dataset masked_tiny(double rate = 0.5, std::uint64_t seed = 4) {
  return data::apply_random_missing(tiny_dataset(), rate, seed);
}

}  // namespace

TEST_CASE("stage objective examples") {
  CHECK(stage1_objective(2.0, 4.0, 1.0) == 3.0);
  CHECK(stage1_objective(2.5, 4.0, 0.0) == 2.5);
  CHECK(stage2_objective(1.25, 0.5) == 1.75);
  CHECK(stage3_objective(1.0, 2.0, 0.4) == doctest::Approx(1.6).epsilon(1e-15));
  CHECK(stage3_objective(1.0, 2.0, 1.0) == 1.0);
  CHECK(one_stage_objective(1.0, 2.0, 0.5, 0.5, 1.0, 0.5) == 3.5);
  CHECK(two_stage_phase2_objective(2.0, 0.5, 1.5, 0.5) == 3.0);
  // Tensor and double forms agree.
  Tensor a = Tensor::scalar(0.7), b = Tensor::scalar(1.9);
  CHECK(stage1_objective(a, b, 0.3).item() == stage1_objective(0.7, 1.9, 0.3));
  CHECK(stage3_objective(a, b, 0.6).item() == stage3_objective(0.7, 1.9, 0.6));
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lambda_al = 1.5;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = TrainConfig{};
  c.lambda_g = -0.1;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = TrainConfig{};
  c.lambda_c = -0.1;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  CHECK(parse_strategy("one") == Strategy::kOne);
  CHECK(parse_strategy("three-stage") == Strategy::kThree);
  CHECK_THROWS(parse_strategy("four"));
}

TEST_CASE("stage 1 updates only its groups and recombines its terms") {
  auto ds = masked_tiny();
  model::RoHyDR m(tiny_model_config(), 1);
  Trainer tr(m, tiny_train_config());
  auto before = checksums(m);
  // Denoiser heads and attention output projections start at zero, so the
  // extractors only see a gradient from the third step on.
  tr.stage1_step(first_batch(ds));
  tr.stage1_step(first_batch(ds));
  LossTerms t = tr.stage1_step(first_batch(ds));
  auto diff = changed(before, checksums(m));
  for (Group g : {Group::kFusion, Group::kDisc, Group::kMr, Group::kClf}) CHECK_FALSE(contains(diff, g));
  for (Group g : {Group::kFe, Group::kMu, Group::kSigma, Group::kUr}) {
    CAPTURE(group_name(g));
    CHECK(contains(diff, g));
  }
  CHECK(t.total == doctest::Approx(stage1_objective(t.hddm, t.ur, 1.0)).epsilon(1e-12));
  CHECK(tr.forward_passes() == 3);
}

TEST_CASE("stage 2 moves the discriminator only in its own sub-update") {
  auto ds = masked_tiny();
  model::RoHyDR m(tiny_model_config(), 1);
  Trainer tr(m, tiny_train_config());
  auto before = checksums(m);
  LossTerms t = tr.stage2_step(first_batch(ds));
  auto diff = changed(before, checksums(m));
  CHECK_FALSE(contains(diff, Group::kClf));
  for (Group g : {Group::kDisc, Group::kFusion, Group::kMr, Group::kUr, Group::kMu}) {
    CHECK(contains(diff, g));
  }
  CHECK(t.mr == doctest::Approx(0.5 * t.adv + 0.5 * t.rec).epsilon(1e-12));
  CHECK(t.total == doctest::Approx(t.disc + t.mr).epsilon(1e-12));
}

TEST_CASE("stage 2 reports the discriminator loss before its update") {
  // With every modality available nothing is sampled, so the forward pass is
  // reproducible outside the trainer.
  auto ds = tiny_dataset();
  model::RoHyDR m(tiny_model_config(), 2);
  auto batch = first_batch(ds);
  double expected = 0.0;
  {
    NoGradGuard no_grad;
    auto reps = m.extract(batch);
    Tensor f_gt = m.fuse(reps);
    Tensor f_rec = m.refine(m.fuse(reps));
    expected = recovery::discriminator_loss(m.discriminator(), f_gt, f_rec).item();
  }
  Trainer tr(m, tiny_train_config());
  LossTerms t = tr.stage2_step(batch);
  CHECK(t.disc == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("stage 3 never touches the discriminator") {
  auto ds = masked_tiny();
  model::RoHyDR m(tiny_model_config(), 1);
  Trainer tr(m, tiny_train_config());
  auto before = checksums(m);
  LossTerms t = tr.stage3_step(first_batch(ds));
  auto diff = changed(before, checksums(m));
  CHECK_FALSE(contains(diff, Group::kDisc));
  for (Group g : {Group::kClf, Group::kFusion, Group::kFe}) CHECK(contains(diff, g));
  CHECK(t.total == doctest::Approx(0.5 * t.c1 + 0.5 * t.c2).epsilon(1e-12));
}

TEST_CASE("three-stage epoch: scoping holds between every sub-update") {
  auto ds = masked_tiny();
  model::RoHyDR m(tiny_model_config(), 5);
  auto cfg = tiny_train_config();
  Trainer tr(m, cfg);
  for (std::size_t start = 0; start + 16 <= ds.train.size(); start += 16) {
    std::vector<std::size_t> rows(ds.train.begin() + static_cast<long>(start),
                                  ds.train.begin() + static_cast<long>(start + 16));
    auto batch = model::make_batch(ds, rows, false);
    auto s0 = checksums(m);
    tr.stage1_step(batch);
    auto s1 = checksums(m);
    tr.stage2_step(batch);
    auto s2 = checksums(m);
    tr.stage3_step(batch);
    auto s3 = checksums(m);
    for (Group g : {Group::kFusion, Group::kDisc, Group::kMr, Group::kClf}) CHECK(s0[g] == s1[g]);
    CHECK(s1[Group::kClf] == s2[Group::kClf]);
    CHECK(s2[Group::kDisc] == s3[Group::kDisc]);
  }
}

TEST_CASE("disabling the discriminator drops the adversarial terms") {
  auto ds = masked_tiny();
  auto mc = tiny_model_config();
  mc.components.disc = false;
  model::RoHyDR m(mc, 1);
  Trainer tr(m, tiny_train_config());
  auto before = checksums(m);
  LossTerms t = tr.stage2_step(first_batch(ds));
  CHECK(checksums(m)[Group::kDisc] == before[Group::kDisc]);
  CHECK(t.disc == 0.0);
  CHECK(t.mr == t.rec);
  CHECK(t.total == t.rec);
}

TEST_CASE("one-stage objective recombines its terms and keeps theta_d on L_D") {
  auto ds = masked_tiny();
  model::RoHyDR m(tiny_model_config(), 1);
  auto cfg = tiny_train_config();
  cfg.lambda_g = 0.7;
  cfg.lambda_c = 0.4;
  Trainer tr(m, cfg);
  auto before = checksums(m);
  LossTerms t = tr.one_stage_step(first_batch(ds));
  const double expected =
      one_stage_objective(t.hddm + t.ur, t.disc + t.mr, t.c1, t.c2, cfg.lambda_g, cfg.lambda_c);
  CHECK(t.total == doctest::Approx(expected).epsilon(1e-12));
  CHECK(changed(before, checksums(m)).size() == kAllGroups.size());
  CHECK(tr.forward_passes() == 1);
}

TEST_CASE("one-stage discriminator update equals a pure L_D step") {
  // Reference: a fresh model with identical weights takes one optimizer step
  // on L_D alone; the one-stage step must move theta_d identically.
  auto ds = tiny_dataset();
  auto batch = first_batch(ds);
  model::RoHyDR a(tiny_model_config(), 9);
  model::RoHyDR b(tiny_model_config(), 9);
  Trainer tr(a, tiny_train_config());
  tr.one_stage_step(batch);

  b.registry().set_trainable(GroupSet{Group::kDisc});
  AdamState opt;
  {
    GraphScope scope;
    auto reps = b.extract(batch);
    Tensor f_gt = b.fuse(reps);
    Tensor f_rec = b.refine(b.fuse(reps));
    backward(recovery::discriminator_loss(b.discriminator(), f_gt, f_rec));
    adam_step(b.registry(), GroupSet{Group::kDisc}, opt, tiny_train_config().lr_disc);
  }
  CHECK(a.registry().checksum(Group::kDisc) == b.registry().checksum(Group::kDisc));
}

TEST_CASE("two-stage step: phase scoping and objective") {
  auto ds = masked_tiny();
  model::RoHyDR m(tiny_model_config(), 1);
  Trainer tr(m, tiny_train_config());
  auto [p1, p2] = tr.two_stage_step(first_batch(ds));
  CHECK(p1.total == doctest::Approx(stage1_objective(p1.hddm, p1.ur, 1.0)).epsilon(1e-12));
  CHECK(p2.total ==
        doctest::Approx(two_stage_phase2_objective(p2.disc + p2.mr, p2.c1, p2.c2, 0.5)).epsilon(1e-12));
  CHECK(tr.forward_passes() == 2);
}

TEST_CASE("train_epoch: forward passes per batch by strategy") {
  auto ds = masked_tiny();
  const std::size_t batches = (ds.train.size() + 15) / 16;
  for (auto [strategy, per_batch] : {std::pair{Strategy::kThree, 3u}, std::pair{Strategy::kTwo, 2u},
                                     std::pair{Strategy::kOne, 1u}}) {
    model::RoHyDR m(tiny_model_config(), 1);
    auto cfg = tiny_train_config();
    cfg.strategy = strategy;
    Trainer tr(m, cfg);
    EpochReport r = tr.train_epoch(ds);
    CHECK(r.batches == batches);
    CHECK(r.forward_passes == per_batch * batches);
    CHECK(std::isfinite(r.loss_s1));
  }
}

TEST_CASE("zero learning rates leave every parameter bit-unchanged") {
  auto ds = masked_tiny();
  for (Strategy s : {Strategy::kOne, Strategy::kTwo, Strategy::kThree}) {
    model::RoHyDR m(tiny_model_config(), 1);
    auto cfg = tiny_train_config();
    cfg.lr = 0.0;
    cfg.lr_disc = 0.0;
    cfg.strategy = s;
    auto before = m.registry().snapshot();
    Trainer tr(m, cfg);
    tr.train_epoch(ds);
    CHECK(m.registry().snapshot() == before);
  }
}

TEST_CASE("same seed gives the same epoch report") {
  auto ds = masked_tiny();
  auto report = [&] {
    model::RoHyDR m(tiny_model_config(), 1);
    Trainer tr(m, tiny_train_config());
    return tr.train_epoch(ds);
  };
  EpochReport a = report(), b = report();
  CHECK(a.loss_s1 == b.loss_s1);
  CHECK(a.loss_s2 == b.loss_s2);
  CHECK(a.loss_s3 == b.loss_s3);
}

TEST_CASE("disabled components receive no updates") {
  auto ds = masked_tiny(0.6);
  struct Case {
    const char* name;
    model::Components comp;
    std::vector<Group> frozen;
  };
  const std::vector<Case> cases = {
      {"no-hddm", {false, true, true, true}, {Group::kMu, Group::kSigma}},
      {"no-ur", {true, false, true, true}, {Group::kUr}},
      {"no-disc", {true, true, false, true}, {Group::kDisc}},
      {"no-mr", {true, true, true, false}, {Group::kMr}},
      {"none", {false, false, false, false}, {Group::kMu, Group::kSigma, Group::kUr, Group::kDisc, Group::kMr}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    auto mc = tiny_model_config();
    mc.components = c.comp;
    model::RoHyDR m(mc, 1);
    auto before = checksums(m);
    for (Strategy s : {Strategy::kThree, Strategy::kOne}) {
      auto cfg = tiny_train_config();
      cfg.strategy = s;
      Trainer tr(m, cfg);
      tr.train_epoch(ds);
    }
    auto after = checksums(m);
    for (Group g : c.frozen) CHECK(before[g] == after[g]);
    CHECK(before[Group::kClf] != after[Group::kClf]);
  }
}

TEST_CASE("zero-impute baseline trains only extractors, fusion and classifier") {
  auto ds = masked_tiny();
  auto mc = tiny_model_config();
  mc.zero_impute = true;
  auto run_once = [&] {
    model::RoHyDR m(mc, 1);
    auto before = checksums(m);
    Trainer tr(m, tiny_train_config());
    EpochReport r = tr.train_epoch(ds);
    auto diff = changed(before, checksums(m));
    CHECK(diff == std::vector<Group>{Group::kFe, Group::kFusion, Group::kClf});
    CHECK(r.forward_passes == r.batches);
    Metrics metrics = evaluate(m, ds, ds.test, tiny_train_config());
    CHECK(metrics.acc2 >= 0.0);
    CHECK(metrics.acc2 <= 1.0);
    return std::pair{r.loss_s3, metrics.acc2};
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("metric examples") {
  auto m = compute_metrics({1.2, -0.3}, {2.0, -1.0});
  CHECK(m.acc2 == 1.0);
  CHECK(seven_class(2.6) == 3);
  CHECK(seven_class(-3.4) == -3);
  CHECK(seven_class(0.49) == 0);
  CHECK(seven_class(-0.5) == -1);  // halves round away from zero
  CHECK(positive_class(0.0));
  auto f = compute_metrics({1.0, 1.0, -1.0}, {1.0, -1.0, -1.0});
  CHECK(f.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(f.acc2 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(compute_metrics({}, {}), ContractViolation);
  CHECK_THROWS_AS(compute_metrics({1.0}, {1.0, 2.0}), ContractViolation);
}

TEST_CASE("metrics match a brute-force reference on random vectors") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-3.6, 3.6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> pred(40), label(40);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pred[i] = u(rng);
      // Labels on the 1/3 grid, zeros and clamp boundaries included.
      label[i] = std::round(u(rng) * 3.0) / 3.0;
    }
    label[0] = 0.0;
    pred[1] = 3.5;
    label[2] = -3.0;
    double acc2 = 0, acc7 = 0, tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int p2 = pred[i] < 0 ? 0 : 1, y2 = label[i] < 0 ? 0 : 1;
      acc2 += p2 == y2;
      auto cls = [](double v) {
        double r = v < 0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5);
        return r > 3 ? 3 : (r < -3 ? -3 : static_cast<int>(r));
      };
      acc7 += cls(pred[i]) == cls(label[i]);
      tp += p2 == 1 && y2 == 1;
      fp += p2 == 1 && y2 == 0;
      fn += p2 == 0 && y2 == 1;
    }
    const double precision = tp / (tp + fp), recall = tp / (tp + fn);
    Metrics m = compute_metrics(pred, label);
    CHECK(m.acc2 == doctest::Approx(acc2 / 40.0).epsilon(1e-15));
    CHECK(m.acc7 == doctest::Approx(acc7 / 40.0).epsilon(1e-15));
    CHECK(m.f1 == doctest::Approx(2 * precision * recall / (precision + recall)).epsilon(1e-12));
  }
}

TEST_CASE("evaluation reads only available modalities") {
  auto ds = masked_tiny(0.6);
  model::RoHyDR m(tiny_model_config(), 1);
  auto before = data::access_stats();
  Metrics metrics;
  CHECK_NOTHROW(metrics = evaluate(m, ds, ds.test, tiny_train_config()));
  auto after = data::access_stats();
  std::size_t available = 0;
  for (auto i : ds.test) available += data::available_count(ds.mask(i));
  CHECK(after.guarded_reads - before.guarded_reads == available);
  CHECK_THROWS_AS(evaluate(m, ds, {}, tiny_train_config()), ContractViolation);
}

TEST_CASE("evaluation is deterministic and independent of withheld data") {
  auto ds = masked_tiny(0.5);
  model::RoHyDR m(tiny_model_config(), 1);
  auto first = predict(m, ds, ds.test, 1, 32, 7);
  // Scramble every withheld slot; predictions must not move.
  auto scrambled = ds;
  for (std::size_t k = 0; k < data::kModalities; ++k) {
    Tensor copy = scrambled.features[k].clone();
    const std::size_t stride = copy.numel() / copy.dim(0);
    for (std::size_t i = 0; i < scrambled.n; ++i) {
      if (scrambled.mask(i)[k] == 0) continue;
      for (std::size_t j = 0; j < stride; ++j) copy.mutable_data()[i * stride + j] = 1e3;
    }
    scrambled.features[k] = copy;
  }
  CHECK(predict(m, scrambled, ds.test, 1, 32, 7) == first);
  CHECK(predict(m, ds, ds.test, 1, 32, 7) == first);
}

TEST_CASE("csv rows") {
  MetricsRecord r{"random", "0.500000", 3, 7, {0.8, 0.25, 0.75}, 1.5, 2.25, 0.125};
  CHECK(csv_header() == "protocol,mr_or_set,seed,epoch,acc2,acc7,f1,loss_s1,loss_s2,loss_s3");
  CHECK(csv_row(r) == "random,0.500000,3,7,0.800000,0.250000,0.750000,1.500000,2.250000,0.125000");
  MetricsRecord back = parse_csv_row(csv_row(r));
  CHECK(back.protocol == "random");
  CHECK(back.mr_or_set == "0.500000");
  CHECK(back.seed == 3);
  CHECK(back.epoch == 7);
  CHECK(back.metrics.f1 == 0.75);
  CHECK_THROWS(parse_csv_row("random,0.5,1,2,0.1"));
  CHECK_THROWS(parse_csv_row("random,0.5,1,2,x,0,0,0,0,0"));
}

TEST_CASE("run keeps the best validation epoch") {
  auto ds = masked_tiny();
  model::RoHyDR m(tiny_model_config(), 1);
  auto cfg = tiny_train_config();
  cfg.epochs = 4;
  std::vector<std::vector<double>> best_params;
  RunOptions opts;
  opts.on_epoch = [&](const MetricsRecord&, bool is_best) {
    if (is_best) {
      best_params.clear();
      for (const auto& row : m.registry().snapshot()) best_params.push_back(row);
    }
  };
  RunResult r = run(m, ds, cfg, opts);
  REQUIRE(r.epochs.size() == 4);
  double best = -1;
  std::size_t best_epoch = 0;
  for (const auto& e : r.epochs) {
    if (e.metrics.acc2 > best) {
      best = e.metrics.acc2;
      best_epoch = e.epoch;
    }
  }
  CHECK(r.best_epoch == best_epoch);
  CHECK(m.registry().snapshot() == best_params);
  CHECK(r.test.acc2 == evaluate(m, ds, ds.test, cfg).acc2);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  auto dir = std::filesystem::temp_directory_path() / "rohydr_ckpt_test";
  std::filesystem::remove_all(dir);
  auto ds = masked_tiny();
  model::RoHyDR a(tiny_model_config(), 1);
  Trainer tr(a, tiny_train_config());
  tr.train_epoch(ds);
  model::save_checkpoint(a, dir, R"({"epoch": 1})");
  CHECK(model::read_checkpoint_extra(dir) == R"({"epoch":1})");
  auto cfg = model::read_checkpoint_config(dir);
  CHECK(cfg.width == a.config().width);
  model::RoHyDR b(cfg, 99);
  model::load_checkpoint(b, dir);
  CHECK(b.registry().snapshot() == a.registry().snapshot());

  auto other = tiny_model_config();
  other.width = 4;
  model::RoHyDR c(other, 1);
  CHECK_THROWS_AS(model::load_checkpoint(c, dir), FormatError);
  std::filesystem::remove_all(dir);
}
