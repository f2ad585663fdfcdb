// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion on
// stdout; progress goes to stderr. Pass criterion numbers as arguments to
// run a subset. Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "fixtures.hpp"
#include "rohydr/adam.hpp"
#include "rohydr/grad_check.hpp"
#include "rohydr/multimodal.hpp"
#include "rohydr/unimodal.hpp"

using namespace rohydr;
using namespace rohydr::recovery;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

Tensor random_tensor(const Shape& shape, nn::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(shape, v);
}

void jitter(const ParamRegistry& reg, nn::Rng& rng, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (const auto& p : reg.params()) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v += dist(rng);
  }
}

std::vector<Tensor> all_params(const ParamRegistry& reg) {
  std::vector<Tensor> out;
  for (const auto& p : reg.params()) out.push_back(p.tensor);
  return out;
}

// ---- 1: gradient suite ---------------------------------------------------------

struct GradTally {
  double tol;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  std::vector<std::string> failed;

  void add(const std::string& name, double err) {
    ++checks;
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
    if (!(err <= tol)) failed.push_back(fmt("%s (%.2e)", name.c_str(), err));
  }
};

Outcome criterion1() {
  const auto start = Clock::now();
  GradTally g{1e-4};
  nn::Rng rng(2024);

  for (int point = 0; point < 10; ++point) {
    // Primitive ops.
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    Tensor row = random_tensor({4}, rng), w = random_tensor({3, 4}, rng);
    auto wsum = [&](const Tensor& t) { return sum(t * w); };
    g.add("add", grad_check_params([&] { return wsum(a + row); }, {a, row}));
    g.add("sub", grad_check_params([&] { return wsum(a - row); }, {a, row}));
    g.add("mul", grad_check_params([&] { return wsum(a * b); }, {a, b}));
    g.add("div", grad_check_params([&] { return wsum(a / pos); }, {a, pos}));
    g.add("pow", grad_check_params([&] { return wsum(pow(pos, 2.5)); }, {pos}));
    g.add("pow_tensor", grad_check_params([&] { return wsum(elementwise(BinaryOp::kPow, pos, b)); }, {pos, b}));
    g.add("exp", grad_check_params([&] { return wsum(exp(a)); }, {a}));
    g.add("log", grad_check_params([&] { return wsum(log(pos)); }, {pos}));
    g.add("sqrt", grad_check_params([&] { return wsum(sqrt(pos)); }, {pos}));
    g.add("neg", grad_check_params([&] { return wsum(-a); }, {a}));
    g.add("sigmoid", grad_check_params([&] { return wsum(sigmoid(a)); }, {a}));
    g.add("tanh", grad_check_params([&] { return wsum(tanh(a)); }, {a}));
    g.add("relu", grad_check_params([&] { return wsum(relu(a)); }, {a}));
    g.add("clamp", grad_check_params([&] { return wsum(clamp(a, -0.5, 0.5)); }, {a}));
    Tensor m = random_tensor({4, 2}, rng), mw = random_tensor({3, 2}, rng);
    g.add("matmul", grad_check_params([&] { return sum(matmul(a, m) * mw); }, {a, m}));
    Tensor bt = random_tensor({2, 3, 4}, rng), bm = random_tensor({2, 4, 3}, rng), bw = random_tensor({2, 3, 3}, rng);
    g.add("batched_matmul", grad_check_params([&] { return sum(matmul(bt, bm) * bw); }, {bt, bm}));
    Tensor tw = random_tensor({4, 3}, rng);
    g.add("transpose", grad_check_params([&] { return sum(transpose(a) * tw); }, {a}));
    Tensor w3 = random_tensor({3}, rng), w4 = random_tensor({4}, rng);
    g.add("sum_axis", grad_check_params([&] { return sum(sum(a, 1) * w3); }, {a}));
    g.add("mean_axis", grad_check_params([&] { return sum(mean(a, 0) * w4); }, {a}));
    g.add("max_axis", grad_check_params([&] { return sum(max(a, 1) * w3); }, {a}));
    g.add("softmax", grad_check_params([&] { return sum(softmax(a, 1) * w); }, {a}));
    g.add("layer_norm", grad_check_params([&] { return sum(layer_norm(a) * w); }, {a}));
    Tensor rw = random_tensor({2, 6}, rng);
    g.add("reshape", grad_check_params([&] { return sum(reshape(a, {2, 6}) * rw); }, {a}));
    Tensor p = random_tensor({2, 3, 4}, rng), pw = random_tensor({4, 2, 3}, rng);
    g.add("permute", grad_check_params([&] { return sum(permute(p, {2, 0, 1}) * pw); }, {p}));
    Tensor cw = random_tensor({3, 8}, rng);
    g.add("concat", grad_check_params([&] { return sum(concat({a, b}, 1) * cw); }, {a, b}));
    Tensor sw = random_tensor({3, 2}, rng);
    g.add("slice", grad_check_params([&] { return sum(slice(a, 1, 1, 2) * sw); }, {a}));
    Tensor iw = random_tensor({2, 4}, rng);
    g.add("index_select", grad_check_params([&] { return sum(index_select(a, {2, 0}) * iw); }, {a}));
    Tensor r = random_tensor({2, 4}, rng);
    g.add("merge_rows", grad_check_params([&] { return sum(merge_rows(a, {1, 2}, r) * w); }, {a, r}));

    // Building blocks.
    {
      ParamRegistry reg;
      nn::Linear lin(reg, Group::kFe, "lin", 4, 3, rng);
      nn::Conv1d conv(reg, Group::kFe, "conv", 3, 2, 3, rng);
      nn::BiLstm lstm(reg, Group::kFe, "lstm", 2, 3, rng);
      nn::LayerNorm ln(reg, Group::kFe, "ln", 4);
      nn::Mlp mlp(reg, Group::kFe, "mlp", 4, 5, 2, rng);
      nn::ResidualMlp res(reg, Group::kFe, "res", 4, 5, rng);
      nn::MultiHeadAttention mha(reg, Group::kFe, "mha", 4, 2, rng, nn::Init::kKaiming);
      nn::BlockConfig bc;
      bc.width = 4;
      bc.heads = 2;
      bc.mlp_hidden = 6;
      bc.cross_attention = true;
      nn::AttentionBlock block(reg, Group::kFe, "block", bc, rng);
      jitter(reg, rng, 0.3);
      Tensor x2 = random_tensor({5, 4}, rng);
      Tensor seq = random_tensor({2, 5, 3}, rng);
      Tensor seq2 = random_tensor({2, 4, 2}, rng);
      Tensor q = random_tensor({2, 3, 4}, rng), kv = random_tensor({2, 2, 4}, rng);
      auto check_block = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                             const Tensor& input) {
        g.add(name + "/input", grad_check([&](const Tensor& in) { return sum(tanh(f(in))); }, input));
        g.add(name + "/params", grad_check_params([&] { return sum(tanh(f(input))); }, all_params(reg)));
      };
      check_block("linear", [&](const Tensor& in) { return lin.forward(in); }, x2);
      check_block("conv1d", [&](const Tensor& in) { return conv.forward(in); }, seq);
      check_block("bilstm", [&](const Tensor& in) { return lstm.forward(in); }, seq2);
      check_block("layernorm+mlp", [&](const Tensor& in) { return mlp.forward(ln.forward(in)); }, x2);
      check_block("residual_mlp", [&](const Tensor& in) { return res.forward(in); }, x2);
      check_block("attention/query", [&](const Tensor& in) { return mha.forward(in, kv); }, q);
      check_block("attention/kv", [&](const Tensor& in) { return mha.forward(q, in); }, kv);
      check_block("attention_block", [&](const Tensor& in) { return block.forward(in, kv); }, q);
    }

    // Recovery components.
    {
      ParamRegistry reg;
      FeatureConfig fc;
      fc.width = 4;
      fc.tokens = 2;
      fc.lstm_hidden = 2;
      FeatureExtractor fe(reg, "fe", 3, fc, rng);
      jitter(reg, rng, 0.1);
      Tensor raw = random_tensor({2, 4, 3}, rng), head = random_tensor({4}, rng);
      g.add("feature_extractor/input",
            grad_check([&](const Tensor& in) { return sum(tanh(fe.forward(in)) * head); }, raw));
      g.add("feature_extractor/params",
            grad_check_params([&] { return sum(tanh(fe.forward(raw)) * head); }, all_params(reg)));
    }
    {
      ParamRegistry reg;
      DenoiserConfig dc;
      dc.width = 4;
      dc.tokens = 2;
      dc.heads = 2;
      dc.blocks = 1;
      dc.mlp_hidden = 6;
      Denoiser den(reg, "den", dc, rng);
      UnimodalReconstructor ur(reg, "ur", 4, 6, rng);
      jitter(reg, rng, 0.3);
      auto sched = DiffusionSchedule::scaled_linear(10);
      Reps reps;
      for (auto& rep : reps) rep = random_tensor({2, 2, 4}, rng);
      std::vector<data::Mask> masks = {{1, 0, 0}, {1, 1, 0}};
      Tensor xt = random_tensor({2, 2, 4}, rng);
      std::vector<std::size_t> steps = {3, 8};
      auto den_loss = [&](const Reps& rs, const Tensor& x) {
        auto out = den.forward(x, steps, den.condition(rs, masks), sched);
        return sum(tanh(out.eps)) + sum(out.log_var) * 0.1;
      };
      g.add("denoiser/x_t", grad_check([&](const Tensor& in) { return den_loss(reps, in); }, xt));
      g.add("denoiser/conditioning", grad_check(
                                         [&](const Tensor& in) {
                                           Reps rs = reps;
                                           rs[2] = in;
                                           return den_loss(rs, xt);
                                         },
                                         reps[2]));
      g.add("denoiser/params", grad_check_params([&] { return den_loss(reps, xt); }, all_params(reg)));

      std::array<const Denoiser*, 3> dens = {&den, &den, &den};
      g.add("l_hddm/params", grad_check_params(
                                 [&] {
                                   nn::Rng fixed(5);
                                   return l_hddm(reps, masks, dens, sched, fixed);
                                 },
                                 all_params(reg)));
      g.add("sampling_chain/params", grad_check_params(
                                         [&] {
                                           nn::Rng fixed(21);
                                           auto rec = sample_missing(reps, masks, dens, sched, 1, fixed, 4.0);
                                           return sum(tanh(rec[0].tokens));
                                         },
                                         all_params(reg)));
      Reps truth;
      for (auto& t : truth) t = random_tensor({2, 2, 4}, rng);
      g.add("l_ur/input", grad_check(
                              [&](const Tensor& in) {
                                Reps rec = reps;
                                rec[0] = ur.forward(in);
                                return l_ur(rec, truth, masks);
                              },
                              reps[0]));

      Tensor eps = random_tensor({2, 2, 4}, rng), lv = random_tensor({2, 2, 4}, rng, -3.0, -1.0);
      g.add("mean_from_eps", grad_check([&](const Tensor& in) { return sum(tanh(mean_from_eps(xt, steps, in, sched))); }, eps));
      g.add("bounded_log_variance",
            grad_check([&](const Tensor& in) { return sum(bounded_log_variance(in, steps, sched)); }, lv));
      Tensor target = random_tensor({2, 2, 4}, rng);
      g.add("gaussian_nll/mean", grad_check([&](const Tensor& in) { return gaussian_nll(target, in, lv); }, eps));
      g.add("gaussian_nll/log_var", grad_check([&](const Tensor& in) { return gaussian_nll(target, eps, in); }, lv));
      Tensor noise = random_tensor({2, 2, 4}, rng);
      g.add("reverse_step/eps", grad_check(
                                    [&](const Tensor& in) { return sum(tanh(reverse_step(xt, 5, in, lv, sched, noise))); },
                                    eps));
      g.add("reverse_step/log_var", grad_check(
                                        [&](const Tensor& in) { return sum(tanh(reverse_step(xt, 5, eps, in, sched, noise))); },
                                        lv));
      g.add("reverse_step_clipped/eps",
            grad_check([&](const Tensor& in) { return sum(tanh(reverse_step_clipped(xt, 5, in, lv, sched, noise, 4.0))); },
                       eps));
    }
    {
      ParamRegistry reg;
      FusionConfig fc;
      fc.width = 4;
      fc.tokens = 3;
      fc.heads = 2;
      fc.blocks = 1;
      fc.mlp_hidden = 6;
      fc.fused_width = 5;
      FusionNetwork fusion(reg, "fusion", fc, rng);
      MultimodalReconstructor mr(reg, "mr", 5, 7, rng);
      Discriminator disc(reg, "disc", 5, 7, rng);
      Classifier clf(reg, "clf", 5, 7, rng);
      jitter(reg, rng, 0.3);
      Reps x;
      for (auto& rep : x) rep = random_tensor({2, 3, 4}, rng);
      Tensor f = random_tensor({3, 5}, rng), f2 = random_tensor({3, 5}, rng);
      Tensor y = Tensor::from({3}, {1.0, -2.0, 0.5});
      g.add("fusion/input", grad_check(
                                [&](const Tensor& in) {
                                  Reps xs = x;
                                  xs[1] = in;
                                  return sum(tanh(fusion.forward(xs)));
                                },
                                x[1]));
      g.add("fusion/params", grad_check_params([&] { return sum(tanh(fusion.forward(x))); }, all_params(reg)));
      g.add("mr+l_rec/input", grad_check([&](const Tensor& in) { return l_rec(mr.forward(in), f2); }, f));
      g.add("mr+l_rec/params", grad_check_params([&] { return l_rec(mr.forward(f), f2); }, all_params(reg)));
      g.add("l_d/params", grad_check_params([&] { return discriminator_loss(disc, f, f2); }, all_params(reg)));
      g.add("l_adv/input", grad_check([&](const Tensor& in) { return adversarial_loss(disc, in); }, f));
      g.add("l_mr/input", grad_check(
                              [&](const Tensor& in) {
                                return l_mr(adversarial_loss(disc, in), l_rec(in, f2), 0.5);
                              },
                              f));
      g.add("classifier+l_c/input", grad_check([&](const Tensor& in) { return l_c(clf.forward(in), y); }, f));
      g.add("classifier+l_c/params", grad_check_params([&] { return l_c(clf.forward(f), y); }, all_params(reg)));
    }
  }

  const double secs = seconds_since(start);
  Outcome o;
  o.pass = g.failed.empty() && secs < 120.0;
  o.detail = fmt("%zu checks over 10 random points, worst rel err %.2e (%s), %zu above 1e-4; %.1f s (limit 120 s)",
                 g.checks, g.worst, g.worst_name.c_str(), g.failed.size(), secs);
  for (std::size_t i = 0; i < std::min<std::size_t>(3, g.failed.size()); ++i) o.detail += "; " + g.failed[i];
  return o;
}

// ---- 2: diffusion marginals ------------------------------------------------------

Outcome criterion2() {
  const auto start = Clock::now();
  nn::Rng rng(77);
  auto s = DiffusionSchedule::scaled_linear(50);
  const std::size_t draws = 10000;
  Tensor x0 = Tensor::from({4}, {1.5, -0.7, 0.2, 2.5});
  std::size_t bad = 0, total = 0;
  double worst_z = 0.0;
  for (std::size_t t : {std::size_t{1}, std::size_t{25}, std::size_t{50}}) {
    const double gb = s.gamma_bar(t);
    std::vector<double> sum(4, 0.0), sq(4, 0.0);
    for (std::size_t n = 0; n < draws; ++n) {
      Tensor xt = forward_diffuse(x0, t, nn::normal_tensor({4}, rng), s);
      for (std::size_t c = 0; c < 4; ++c) {
        sum[c] += xt[c];
        sq[c] += xt[c] * xt[c];
      }
    }
    for (std::size_t c = 0; c < 4; ++c) {
      const double mean = sum[c] / draws;
      const double var = (sq[c] - draws * mean * mean) / (draws - 1);
      const double want_var = 1.0 - gb;
      const double z_mean = std::abs(mean - std::sqrt(gb) * x0[c]) / std::sqrt(want_var / draws);
      const double z_var = std::abs(var - want_var) / (want_var * std::sqrt(2.0 / (draws - 1)));
      worst_z = std::max({worst_z, z_mean, z_var});
      total += 2;
      bad += (z_mean > 3.0) + (z_var > 3.0);
    }
  }
  const double secs = seconds_since(start);
  return {bad == 0 && secs < 60.0,
          fmt("t in {1, 25, 50}, 1e4 draws: %zu of %zu mean/variance statistics outside 3 sigma (worst %.2f sigma); "
              "%.1f s (limit 60 s)",
              bad, total, worst_z, secs)};
}

// ---- 3: loss oracles -------------------------------------------------------------

Outcome criterion3() {
  struct Item {
    std::string name;
    double got, want;
  };
  std::vector<Item> items;
  nn::Rng rng(31);

  // L_HDDM: a fresh denoiser predicts zero noise and the midpoint log
  // variance, so the objective is rebuilt from the same random draws.
  {
    ParamRegistry reg;
    DenoiserConfig dc;
    dc.width = 4;
    dc.tokens = 2;
    dc.heads = 2;
    dc.blocks = 1;
    dc.mlp_hidden = 6;
    Denoiser da(reg, "a", dc, rng), dt(reg, "t", dc, rng), dv(reg, "v", dc, rng);
    std::array<const Denoiser*, 3> dens = {&da, &dt, &dv};
    auto s = DiffusionSchedule::scaled_linear(10);
    Reps reps;
    for (auto& r : reps) r = random_tensor({4, 2, 4}, rng);
    std::vector<data::Mask> masks = {{1, 0, 0}, {0, 0, 0}, {1, 1, 0}, {0, 1, 0}};
    nn::Rng draw(5);
    const double got = l_hddm(reps, masks, dens, s, draw).item();
    nn::Rng replay(5);
    std::uniform_int_distribution<std::size_t> pick(1, 10);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t per_row = 8;
    double want = 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
      std::vector<std::size_t> rows;
      for (std::size_t b = 0; b < 4; ++b) {
        if (masks[b][m]) rows.push_back(b);
      }
      if (rows.empty()) continue;
      std::vector<std::size_t> steps;
      for (std::size_t i = 0; i < rows.size(); ++i) steps.push_back(pick(replay));
      std::vector<double> e1(rows.size() * per_row), e2(rows.size() * per_row);
      for (auto& x : e1) x = normal(replay);
      for (auto& x : e2) x = normal(replay);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t t = steps[i];
        auto [lo, hi] = s.log_variance_bounds(t);
        const double lv = 0.5 * (lo + hi);
        double acc = 0.0;
        for (std::size_t c = 0; c < per_row; ++c) {
          const double x0 = reps[m][rows[i] * per_row + c];
          const double prev = std::sqrt(s.gamma_bar(t - 1)) * x0 + std::sqrt(1.0 - s.gamma_bar(t - 1)) * e1[i * per_row + c];
          const double xt = std::sqrt(s.gamma(t)) * prev + std::sqrt(s.beta(t)) * e2[i * per_row + c];
          const double mu = xt / std::sqrt(s.gamma(t));
          acc += (prev - mu) * (prev - mu) / (2.0 * std::exp(lv)) + 0.5 * lv;
        }
        want += acc / static_cast<double>(per_row);
      }
    }
    items.push_back({"L_HDDM", got, want / 4.0});
  }

  // L_UR: mean squared error over missing slots, coordinates averaged.
  {
    Reps rec, truth;
    for (std::size_t m = 0; m < 3; ++m) {
      rec[m] = random_tensor({2, 3, 2}, rng);
      truth[m] = random_tensor({2, 3, 2}, rng);
    }
    std::vector<data::Mask> masks = {{1, 0, 0}, {1, 0, 1}};
    double want = 0.0;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t m = 0; m < 3; ++m) {
        if (!masks[b][m]) continue;
        double se = 0.0;
        for (std::size_t i = 0; i < 6; ++i) se += std::pow(rec[m][b * 6 + i] - truth[m][b * 6 + i], 2);
        want += se / 6.0;
      }
    }
    items.push_back({"L_UR", l_ur(rec, truth, masks).item(), want / 2.0});
  }

  // Fused-space losses on fixed values.
  Tensor f_rec = Tensor::from({2, 2}, {1.0, 2.0, -1.0, 0.5});
  Tensor f_gt = Tensor::from({2, 2}, {0.5, 2.0, 1.0, 0.0});
  items.push_back({"L_rec", l_rec(f_rec, f_gt).item(), ((0.25 + 0.0) + (4.0 + 0.25)) / 2.0});
  Tensor i_gt = Tensor::from({2}, {0.8, 0.6}), i_rec = Tensor::from({2}, {0.3, 0.1});
  const double ld = -(std::log(0.8) + std::log(0.6)) / 2.0 - (std::log(0.7) + std::log(0.9)) / 2.0;
  items.push_back({"L_D", l_d(i_gt, i_rec).item(), ld});
  const double ladv = -(std::log(0.3) + std::log(0.1)) / 2.0;
  items.push_back({"L_adv", l_adv(i_rec).item(), ladv});
  items.push_back({"L_MR", l_mr(Tensor::scalar(ladv), Tensor::scalar(2.125), 0.3).item(), 0.3 * ladv + 0.7 * 2.125});
  Tensor pred = Tensor::from({3}, {0.5, -1.0, 2.0}), y = Tensor::from({3}, {1.0, -1.0, 0.0});
  items.push_back({"L_C1", l_c(pred, y).item(), (0.25 + 0.0 + 4.0) / 3.0});
  Tensor pred2 = Tensor::from({2}, {-3.0, 0.25});
  items.push_back({"L_C2", l_c(pred2, Tensor::from({2}, {-2.0, 1.0})).item(), (1.0 + 0.5625) / 2.0});

  // Stage objectives.
  items.push_back({"L_S1", train::stage1_objective(2.0, 4.0, 1.0), 3.0});
  items.push_back({"L_S1 lambda_g=0", train::stage1_objective(2.0, 4.0, 0.0), 2.0});
  items.push_back({"L_S1 lambda_g=0.5", train::stage1_objective(2.0, 4.0, 0.5), (2.0 + 2.0) / 1.5});
  items.push_back({"L_S2", train::stage2_objective(1.25, 0.5), 1.75});
  items.push_back({"L_S3", train::stage3_objective(1.0, 2.0, 0.4), 1.6});
  items.push_back({"L_S3 lambda_c=1", train::stage3_objective(1.0, 2.0, 1.0), 1.0});
  items.push_back({"one-stage", train::one_stage_objective(1.0, 2.0, 0.5, 0.5, 1.0, 0.5), 3.5});
  items.push_back({"two-stage phase 2", train::two_stage_phase2_objective(2.0, 0.5, 1.5, 0.5), 3.0});

  // Totals reported by real trainer steps recombine their own terms.
  {
    auto ds = data::apply_random_missing(testing::tiny_dataset(), 0.5, 4);
    model::RoHyDR m(testing::tiny_model_config(), 1);
    auto tc = testing::tiny_train_config();
    tc.lambda_g = 0.7;
    tc.lambda_al = 0.3;
    tc.lambda_c = 0.4;
    train::Trainer tr(m, tc);
    std::vector<std::size_t> rows(ds.train.begin(), ds.train.begin() + 16);
    auto batch = model::make_batch(ds, rows, false);
    auto s1 = tr.stage1_step(batch);
    items.push_back({"trainer L_S1", s1.total, (s1.hddm + 0.7 * s1.ur) / 1.7});
    auto s2 = tr.stage2_step(batch);
    items.push_back({"trainer L_MR", s2.mr, 0.3 * s2.adv + 0.7 * s2.rec});
    items.push_back({"trainer L_S2", s2.total, s2.disc + s2.mr});
    auto s3 = tr.stage3_step(batch);
    items.push_back({"trainer L_S3", s3.total, 0.4 * s3.c1 + 0.6 * s3.c2});
    auto one = tr.one_stage_step(batch);
    items.push_back({"trainer one-stage", one.total,
                     0.7 * (one.hddm + one.ur) + one.disc + one.mr + 0.4 * one.c1 + 0.6 * one.c2});
    auto [p1, p2] = tr.two_stage_step(batch);
    items.push_back({"trainer two-stage phase 2", p2.total, p2.disc + p2.mr + 0.4 * p2.c1 + 0.6 * p2.c2});
  }

  double worst = 0.0;
  std::string worst_name, failures;
  for (const auto& it : items) {
    const double err = std::abs(it.got - it.want);
    if (err > worst || std::isnan(err)) {
      worst = err;
      worst_name = it.name;
    }
    if (!(err <= 1e-10)) failures += " " + it.name;
  }
  return {failures.empty(), fmt("%zu loss/objective oracles, worst abs err %.2e (%s)%s%s", items.size(), worst,
                                worst_name.c_str(), failures.empty() ? "" : "; failed:", failures.c_str())};
}

// ---- 4: stage scoping ----------------------------------------------------------

Outcome criterion4() {
  const auto start = Clock::now();
  std::vector<std::string> problems;
  auto sums = [](const model::RoHyDR& m) {
    std::map<Group, std::uint64_t> s;
    for (Group g : kAllGroups) s[g] = m.registry().checksum(g);
    return s;
  };
  auto ds = data::apply_random_missing(testing::tiny_dataset(120, 5), 0.5, 9);
  model::RoHyDR m(testing::tiny_model_config(), 3);
  train::Trainer tr(m, testing::tiny_train_config());
  std::size_t batches = 0, disc_moves = 0, clf_moves = 0;
  for (std::size_t start_row = 0; start_row + 16 <= ds.train.size(); start_row += 16) {
    std::vector<std::size_t> rows(ds.train.begin() + static_cast<long>(start_row),
                                  ds.train.begin() + static_cast<long>(start_row + 16));
    auto batch = model::make_batch(ds, rows, false);
    auto s0 = sums(m);
    tr.stage1_step(batch);
    auto s1 = sums(m);
    tr.stage2_step(batch);
    auto s2 = sums(m);
    tr.stage3_step(batch);
    auto s3 = sums(m);
    ++batches;
    for (Group g : {Group::kFusion, Group::kDisc, Group::kMr, Group::kClf}) {
      if (s0[g] != s1[g]) problems.push_back(std::string("stage 1 moved ") + std::string(group_name(g)));
    }
    if (s1[Group::kClf] != s2[Group::kClf]) problems.push_back("stage 2 moved theta_c");
    if (s2[Group::kDisc] != s3[Group::kDisc]) problems.push_back("stage 3 moved theta_d");
    disc_moves += s1[Group::kDisc] != s2[Group::kDisc];
    clf_moves += s2[Group::kClf] != s3[Group::kClf];
  }
  if (disc_moves != batches) problems.push_back("theta_d did not move in every stage 2");
  if (clf_moves != batches) problems.push_back("theta_c did not move in every stage 3");

  // Within stage 2, theta_d moves exactly as a pure L_D step would: the L_MR
  // sub-update contributes nothing to it. Full availability keeps the forward
  // pass deterministic so it can be replayed.
  bool disc_only_from_ld = false;
  {
    auto full = testing::tiny_dataset(60, 8);
    std::vector<std::size_t> rows(full.train.begin(), full.train.begin() + 16);
    auto batch = model::make_batch(full, rows, false);
    model::RoHyDR a(testing::tiny_model_config(), 4), b(testing::tiny_model_config(), 4);
    train::Trainer ta(a, testing::tiny_train_config());
    ta.stage2_step(batch);
    b.registry().set_trainable(GroupSet{Group::kDisc});
    AdamState opt;
    GraphScope scope;
    auto reps = b.extract(batch);
    Tensor f = b.fuse(reps);
    backward(discriminator_loss(b.discriminator(), f, b.refine(f)));
    adam_step(b.registry(), GroupSet{Group::kDisc}, opt, testing::tiny_train_config().lr_disc);
    disc_only_from_ld = a.registry().checksum(Group::kDisc) == b.registry().checksum(Group::kDisc);
  }
  if (!disc_only_from_ld) problems.push_back("theta_d after stage 2 differs from a pure L_D step");

  const double secs = seconds_since(start);
  std::string detail = fmt("%zu batches of stages 1-3 checked by parameter checksums; theta_d replay %s; %.1f s (limit 60 s)",
                           batches, disc_only_from_ld ? "matches a pure L_D step" : "MISMATCH", secs);
  for (std::size_t i = 0; i < std::min<std::size_t>(3, problems.size()); ++i) detail += "; " + problems[i];
  return {problems.empty() && secs < 60.0, detail};
}

// ---- 5: mask protocol --------------------------------------------------------------

Outcome criterion5() {
  const std::size_t n = 2000, modalities = data::kModalities;
  std::mt19937_64 rng(555);
  std::uniform_real_distribution<double> rate_dist(0.0, data::kMaxMissingRate);
  std::size_t exact = 0, inexact = 0, inexact_infeasible = 0, empty_rows = 0;
  double worst_gap = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const double rate = rate_dist(rng);
    const std::uint64_t seed = rng();
    auto masks = data::random_missing_masks(n, rate, seed);
    for (const auto& mk : masks) empty_rows += data::available_count(mk) == 0;
    const double want_slots = std::round(rate * static_cast<double>(n * modalities));
    const double want = want_slots / static_cast<double>(n * modalities);
    const double got = data::compute_missing_rate(masks);
    if (got == want) {
      ++exact;
    } else {
      ++inexact;
      worst_gap = std::max(worst_gap, std::abs(got - want));
      // Keeping one modality per sample caps missing slots at (M - 1) N.
      inexact_infeasible += want_slots > static_cast<double>((modalities - 1) * n);
    }
  }
  return {inexact == 0 && empty_rows == 0,
          fmt("N=%zu, 1000 draws with MR uniform on [0, 0.7]: %zu exact, %zu inexact (%zu of them ask for more than "
              "(M-1)N missing slots, which the at-least-one-available rule forbids; worst gap %.4f); %zu samples "
              "with no modality",
              n, exact, inexact, inexact_infeasible, worst_gap, empty_rows)};
}

// ---- 6: metric oracles -------------------------------------------------------------

Outcome criterion6() {
  std::mt19937_64 rng(66);
  std::uniform_real_distribution<double> u(-3.6, 3.6);
  std::size_t bad = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t len = 25 + static_cast<std::size_t>(trial) * 3;
    std::vector<double> pred(len), label(len);
    for (std::size_t i = 0; i < len; ++i) {
      pred[i] = u(rng);
      label[i] = std::round(u(rng) * 3.0) / 3.0;
    }
    // Zero labels and values on and beyond the clamp boundary.
    label[0] = 0.0;
    label[1] = 0.0;
    pred[2] = 3.0;
    pred[3] = -3.5;
    label[4] = -3.0;
    pred[5] = 0.0;
    pred[6] = 2.5;
    double acc2 = 0, acc7 = 0, tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const bool p = pred[i] >= 0, y = label[i] >= 0;
      acc2 += p == y;
      auto cls = [](double v) {
        const double r = v < 0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5);
        return std::clamp(static_cast<int>(r), -3, 3);
      };
      acc7 += cls(pred[i]) == cls(label[i]);
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
    }
    const double f1 = tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
    train::Metrics m = train::compute_metrics(pred, label);
    const double err = std::max({std::abs(m.acc2 - acc2 / len), std::abs(m.acc7 - acc7 / len), std::abs(m.f1 - f1)});
    worst = std::max(worst, err);
    bad += err > 1e-12;
  }
  return {bad == 0, fmt("20 random vectors with zero labels and clamp boundaries: %zu mismatches, worst %.2e", bad, worst)};
}

// ---- 7-9: training experiments --------------------------------------------------

// Desk-scale profile: same architecture and T = 50, narrower layers.
model::ModelConfig compact_model() {
  model::ModelConfig c;
  c.width = 16;
  c.tokens = 4;
  c.heads = 2;
  c.denoiser_blocks = 1;
  c.mlp_hidden = 32;
  c.head_hidden = 16;
  c.lstm_hidden = 8;
  c.fused_width = 16;
  c.diffusion_steps = 50;
  return c;
}

struct Variant {
  std::string name;
  model::Components components;
  bool baseline = false;
};

const Variant kFull{"full", {true, true, true, true}};
const Variant kBaseline{"zero-impute", {false, false, false, false}, true};
const std::vector<Variant> kAblations = {
    {"no-hddm", {false, true, true, true}},
    {"no-ur", {true, false, true, true}},
    {"no-disc", {true, true, false, true}},
    {"no-mr", {true, true, true, false}},
};
const Variant kAllOff{"all-off", {false, false, false, false}};

const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct RunRecord {
  train::RunResult result;
  double seconds = 0;
};

class Experiments {
 public:
  Experiments() : base_(data::generate_synthetic(data::DatasetSpec{})) {}

  const RunRecord& get(const Variant& v, train::Strategy s, double rate, std::uint64_t seed) {
    auto key = std::make_tuple(v.name, static_cast<int>(s), std::llround(rate * 1000), seed);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const auto start = Clock::now();
    auto ds = data::apply_random_missing(base_, rate, 100 + seed);
    model::ModelConfig mc = compact_model();
    mc.dims = ds.dims;
    mc.components = v.components;
    mc.zero_impute = v.baseline;
    model::RoHyDR m(mc, seed);
    train::TrainConfig tc;
    tc.epochs = 30;
    tc.batch_size = 64;
    tc.strategy = s;
    tc.seed = seed;
    RunRecord rec;
    rec.result = train::run(m, ds, tc, {});
    rec.seconds = seconds_since(start);
    std::fprintf(stderr, "  run %-11s %-5s MR %.1f seed %llu: test ACC2 %.4f, best epoch %zu, %.0f s\n",
                 v.name.c_str(), train::strategy_name(s).c_str(), rate, static_cast<unsigned long long>(seed),
                 rec.result.test.acc2, rec.result.best_epoch, rec.seconds);
    return cache_.emplace(key, rec).first->second;
  }

  // Mean test ACC2 over seeds, and the wall time of runs made for this call.
  double mean_acc2(const Variant& v, train::Strategy s, double rate, double* fresh_seconds = nullptr) {
    double total = 0;
    for (auto seed : kSeeds) {
      const bool cached = cache_.contains(std::make_tuple(v.name, static_cast<int>(s), std::llround(rate * 1000), seed));
      const RunRecord& r = get(v, s, rate, seed);
      if (fresh_seconds != nullptr && !cached) *fresh_seconds += r.seconds;
      total += r.result.test.acc2;
    }
    return total / static_cast<double>(kSeeds.size());
  }

 private:
  data::Dataset base_;
  std::map<std::tuple<std::string, int, long long, std::uint64_t>, RunRecord> cache_;
};

Outcome criterion7(Experiments& ex) {
  const auto start = Clock::now();
  std::vector<double> means;
  std::string curve;
  for (int i = 0; i <= 7; ++i) {
    means.push_back(ex.mean_acc2(kFull, train::Strategy::kThree, i / 10.0));
    curve += fmt("%s%.1f:%.4f", i ? " " : "", i / 10.0, means.back());
  }
  const double baseline = ex.mean_acc2(kBaseline, train::Strategy::kThree, 0.5);
  const double secs = seconds_since(start);
  const double gain = means[5] - baseline;
  bool monotone = true;
  std::string rises;
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] > means[i - 1] + 0.01) {
      monotone = false;
      rises += fmt(" %.1f->%.1f(+%.4f)", (i - 1) / 10.0, i / 10.0, means[i] - means[i - 1]);
    }
  }
  const bool a = gain >= 0.03, time_ok = secs < 30 * 60;
  return {a && monotone && time_ok,
          fmt("(a) MR 0.5: full %.4f vs zero-impute %.4f, gain %+.2f points (need >= 3) %s; (b) mean ACC2 by MR "
              "[%s] %s%s; runtime %.1f min (limit 30) %s",
              means[5], baseline, 100 * gain, a ? "ok" : "FAIL", curve.c_str(),
              monotone ? "non-increasing within 1 point ok" : "rises above 1 point:", rises.c_str(), secs / 60,
              time_ok ? "ok" : "FAIL")};
}

Outcome criterion8(Experiments& ex) {
  const auto start = Clock::now();
  const double full = ex.mean_acc2(kFull, train::Strategy::kThree, 0.5);
  const double off = ex.mean_acc2(kAllOff, train::Strategy::kThree, 0.5);
  bool ok = full - off >= 0.02;
  std::string rows = fmt("full %.4f", full);
  for (const auto& v : kAblations) {
    const double acc = ex.mean_acc2(v, train::Strategy::kThree, 0.5);
    rows += fmt(", %s %.4f", v.name.c_str(), acc);
    if (full < acc - 0.005) {
      ok = false;
      rows += "(above full)";
    }
    if (off > acc + 0.005) {
      ok = false;
      rows += "(below all-off)";
    }
  }
  rows += fmt(", all-off %.4f; full - all-off = %+.2f points (need >= 2)", off, 100 * (full - off));
  return {ok, rows + fmt("; %.1f min", seconds_since(start) / 60)};
}

// Mean over runs of the variance of epoch-to-epoch changes in validation ACC2.
double validation_jitter(const train::RunResult& r) {
  std::vector<double> diffs;
  for (std::size_t i = 1; i < r.epochs.size(); ++i) {
    diffs.push_back(r.epochs[i].metrics.acc2 - r.epochs[i - 1].metrics.acc2);
  }
  double mean = 0;
  for (double d : diffs) mean += d;
  mean /= static_cast<double>(diffs.size());
  double var = 0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  return var / static_cast<double>(diffs.size() - 1);
}

Outcome criterion9(Experiments& ex) {
  const auto start = Clock::now();
  const std::vector<double> rates = {0.2, 0.5, 0.7};
  double acc3 = 0, acc1 = 0, jit3 = 0, jit1 = 0;
  std::size_t runs = 0;
  for (double rate : rates) {
    for (auto seed : kSeeds) {
      const auto& three = ex.get(kFull, train::Strategy::kThree, rate, seed);
      const auto& one = ex.get(kFull, train::Strategy::kOne, rate, seed);
      acc3 += three.result.test.acc2;
      acc1 += one.result.test.acc2;
      jit3 += validation_jitter(three.result);
      jit1 += validation_jitter(one.result);
      ++runs;
    }
  }
  const double k = static_cast<double>(runs);
  acc3 /= k;
  acc1 /= k;
  jit3 /= k;
  jit1 /= k;
  const bool acc_ok = acc3 >= acc1, jit_ok = jit3 <= jit1;
  return {acc_ok && jit_ok,
          fmt("MR {0.2, 0.5, 0.7} x 3 seeds: three-stage ACC2 %.4f vs one-stage %.4f %s; epoch-to-epoch validation "
              "ACC2 variance %.3e vs %.3e %s; %.1f min",
              acc3, acc1, acc_ok ? "ok" : "FAIL", jit3, jit1, jit_ok ? "ok" : "FAIL", seconds_since(start) / 60)};
}

// ---- 10: inference purity -------------------------------------------------------

Outcome criterion10() {
  std::vector<std::string> problems;
  auto base = data::generate_synthetic(data::DatasetSpec{});
  model::ModelConfig mc = compact_model();
  mc.dims = base.dims;
  model::RoHyDR m(mc, 1);
  train::TrainConfig tc;
  tc.eval_stride = 10;
  std::size_t protocols = 0;
  auto probe = [&](const data::Dataset& ds, const std::string& name) {
    ++protocols;
    const auto before = data::access_stats();
    try {
      train::evaluate(m, ds, ds.test, tc);
    } catch (const ContractViolation& e) {
      problems.push_back(name + ": " + e.what());
      return;
    }
    const auto after = data::access_stats();
    std::uint64_t available = 0;
    for (auto i : ds.test) available += data::available_count(ds.mask(i));
    if (after.guarded_reads - before.guarded_reads != available) {
      problems.push_back(name + ": guarded reads " + std::to_string(after.guarded_reads - before.guarded_reads) +
                         " != available slots " + std::to_string(available));
    }
  };
  for (double rate : {0.3, 0.7}) probe(data::apply_random_missing(base, rate, 5), fmt("MR %.1f", rate));
  for (auto set : data::ModalitySet::all_nonempty()) probe(data::apply_fixed_availability(base, set), set.str());

  // The guard is armed: a direct read of a withheld slot inside it throws.
  auto masked = data::apply_random_missing(base, 0.5, 6);
  bool armed = false;
  for (auto i : masked.test) {
    for (auto mod : data::kAllModalities) {
      if (masked.mask(i)[data::index_of(mod)] == 0) continue;
      data::InferenceGuard guard(masked);
      try {
        (void)masked.row(mod, i);
      } catch (const ContractViolation&) {
        armed = true;
      }
      break;
    }
    if (armed) break;
  }
  if (!armed) problems.push_back("reading a withheld slot under the guard did not throw");

  // Predictions do not depend on withheld values.
  auto scrambled = masked;
  for (std::size_t k = 0; k < data::kModalities; ++k) {
    Tensor copy = scrambled.features[k].clone();
    const std::size_t stride = copy.numel() / copy.dim(0);
    for (std::size_t i = 0; i < scrambled.n; ++i) {
      if (scrambled.mask(i)[k] == 0) continue;
      for (std::size_t j = 0; j < stride; ++j) copy.mutable_data()[i * stride + j] = 1e3;
    }
    scrambled.features[k] = copy;
  }
  const bool invariant = train::predict(m, masked, masked.test, 10, 64, 3) ==
                         train::predict(m, scrambled, masked.test, 10, 64, 3);
  if (!invariant) problems.push_back("predictions changed when withheld values were scrambled");

  std::string detail = fmt("%zu evaluation protocols under the guard with read counts matching available slots; guard "
                           "%s; predictions %s under scrambled withheld data",
                           protocols, armed ? "armed" : "NOT armed", invariant ? "unchanged" : "CHANGED");
  for (std::size_t i = 0; i < std::min<std::size_t>(3, problems.size()); ++i) detail += "; " + problems[i];
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return selected.empty() || selected.contains(n); };

  Experiments experiments;
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, criterion1},
      {2, criterion2},
      {3, criterion3},
      {4, criterion4},
      {5, criterion5},
      {6, criterion6},
      {10, criterion10},
      {7, [&] { return criterion7(experiments); }},
      {8, [&] { return criterion8(experiments); }},
      {9, [&] { return criterion9(experiments); }},
  };
  int failed = 0;
  std::map<int, Outcome> outcomes;
  for (const auto& [n, fn] : criteria) {
    if (!wanted(n)) continue;
    std::fprintf(stderr, "criterion %d ...\n", n);
    Outcome o = fn();
    outcomes[n] = o;
    std::printf("criterion %2d: %s  %s\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("summary: %zu run, %d failed\n", outcomes.size(), failed);
  return failed;
}
