#include "rohydr/unimodal.hpp"

#include <cmath>
#include <string>

namespace rohydr::recovery {

namespace {

std::vector<Mask> select_masks(const std::vector<Mask>& masks,
                               const std::vector<std::size_t>& rows) {
  std::vector<Mask> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(masks[r]);
  return out;
}

Reps select_reps(const Reps& reps, const std::vector<std::size_t>& rows) {
  Reps out;
  for (std::size_t m = 0; m < kModalities; ++m) {
    if (reps[m].defined()) out[m] = index_select(reps[m], rows);
  }
  return out;
}

}  // namespace

// ---- schedule --------------------------------------------------------------

DiffusionSchedule DiffusionSchedule::linear(std::size_t steps, double beta_start,
                                            double beta_end) {
  if (steps == 0) throw ContractViolation("diffusion schedule needs at least one step");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start) {
    throw ContractViolation("linear schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[i] = beta_start + frac * (beta_end - beta_start);
  }
  return from_betas(std::move(betas));
}

DiffusionSchedule DiffusionSchedule::scaled_linear(std::size_t steps) {
  if (steps == 0) throw ContractViolation("diffusion schedule needs at least one step");
  const double scale = 1000.0 / static_cast<double>(steps);
  return linear(steps, std::min(1e-4 * scale, 0.5), std::min(0.02 * scale, 0.999));
}

DiffusionSchedule DiffusionSchedule::from_betas(std::vector<double> betas,
                                                std::vector<std::size_t> model_steps) {
  if (betas.empty()) throw ContractViolation("diffusion schedule needs at least one step");
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ContractViolation("schedule betas must lie in (0, 1)");
  }
  if (model_steps.empty()) {
    model_steps.resize(betas.size());
    for (std::size_t i = 0; i < betas.size(); ++i) model_steps[i] = i + 1;
  }
  if (model_steps.size() != betas.size()) {
    throw ContractViolation("schedule model steps must match betas");
  }
  DiffusionSchedule s;
  s.gamma_bar_.assign(betas.size() + 1, 1.0);
  for (std::size_t i = 0; i < betas.size(); ++i) s.gamma_bar_[i + 1] = s.gamma_bar_[i] * (1.0 - betas[i]);
  s.betas_ = std::move(betas);
  s.model_steps_ = std::move(model_steps);
  return s;
}

DiffusionSchedule DiffusionSchedule::respaced(std::size_t stride) const {
  auto kept = strided_steps(steps(), stride);
  std::vector<double> betas;
  std::vector<std::size_t> model_steps;
  std::size_t prev = 0;
  for (auto it = kept.rbegin(); it != kept.rend(); ++it) {
    betas.push_back(1.0 - gamma_bar(*it) / gamma_bar(prev));
    model_steps.push_back(model_step(*it));
    prev = *it;
  }
  return from_betas(std::move(betas), std::move(model_steps));
}

std::size_t DiffusionSchedule::check(std::size_t t) const {
  if (t < 1 || t > steps()) {
    throw ContractViolation("diffusion step " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps()) + "]");
  }
  return t;
}

double DiffusionSchedule::gamma_bar(std::size_t t) const {
  if (t > steps()) throw ContractViolation("diffusion step " + std::to_string(t) + " out of range");
  return gamma_bar_[t];
}

double DiffusionSchedule::posterior_variance(std::size_t t) const {
  return beta(t) * (1.0 - gamma_bar(t - 1)) / (1.0 - gamma_bar(t));
}

std::pair<double, double> DiffusionSchedule::log_variance_bounds(std::size_t t) const {
  const double hi = std::log(beta(t));
  if (t == 1) {
    if (steps() == 1) return {hi, hi};
    return {std::log(posterior_variance(2)), hi};
  }
  return {std::log(posterior_variance(t)), hi};
}

std::vector<std::size_t> strided_steps(std::size_t steps, std::size_t stride) {
  if (steps == 0 || stride == 0) throw ContractViolation("strided steps need steps, stride >= 1");
  std::vector<std::size_t> out;
  for (std::size_t t = steps; t > 1; t = t > stride ? t - stride : 0) out.push_back(t);
  out.push_back(1);
  return out;
}

Tensor forward_diffuse(const Tensor& x0, std::size_t t, const Tensor& eps,
                       const DiffusionSchedule& schedule) {
  if (t > schedule.steps()) {
    throw ContractViolation("forward_diffuse: step " + std::to_string(t) + " beyond T");
  }
  if (eps.shape() != x0.shape()) throw ContractViolation("forward_diffuse: noise shape mismatch");
  NoGradGuard no_grad;
  const double gb = schedule.gamma_bar(t);
  if (t == 0) return x0.detach();
  return x0.detach() * std::sqrt(gb) + eps.detach() * std::sqrt(1.0 - gb);
}

Tensor per_instance(const std::vector<double>& values, std::size_t rank) {
  Shape shape(std::max<std::size_t>(rank, 1), 1);
  shape[0] = values.size();
  return Tensor::from(shape, values);
}

Tensor mean_from_eps(const Tensor& x_t, const std::vector<std::size_t>& t, const Tensor& eps_hat,
                     const DiffusionSchedule& schedule) {
  if (x_t.rank() == 0 || x_t.dim(0) != t.size() || eps_hat.shape() != x_t.shape()) {
    throw ContractViolation("mean_from_eps: shape mismatch");
  }
  std::vector<double> scale(t.size()), eps_scale(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double g = schedule.gamma(t[i]);
    scale[i] = 1.0 / std::sqrt(g);
    eps_scale[i] = schedule.beta(t[i]) / (std::sqrt(1.0 - schedule.gamma_bar(t[i])) * std::sqrt(g));
  }
  return x_t * per_instance(scale, x_t.rank()) - eps_hat * per_instance(eps_scale, x_t.rank());
}

Tensor reverse_step(const Tensor& x_t, std::size_t t, const Tensor& eps_hat, const Tensor& log_var,
                    const DiffusionSchedule& schedule, const Tensor& noise) {
  if (eps_hat.shape() != x_t.shape()) throw ContractViolation("reverse_step: shape mismatch");
  const double g = schedule.gamma(t);
  const double eps_scale = schedule.beta(t) / std::sqrt(1.0 - schedule.gamma_bar(t));
  Tensor mean = (x_t - eps_hat * eps_scale) * (1.0 / std::sqrt(g));
  if (!noise.defined()) return mean;
  if (noise.shape() != x_t.shape() || log_var.shape() != x_t.shape()) {
    throw ContractViolation("reverse_step: noise/variance shape mismatch");
  }
  return mean + exp(log_var * 0.5) * noise;
}

Tensor reverse_step_clipped(const Tensor& x_t, std::size_t t, const Tensor& eps_hat,
                            const Tensor& log_var, const DiffusionSchedule& schedule,
                            const Tensor& noise, double clip) {
  if (eps_hat.shape() != x_t.shape()) throw ContractViolation("reverse_step: shape mismatch");
  if (!(clip > 0.0)) throw ContractViolation("reverse_step_clipped: clip must be positive");
  const double gb = schedule.gamma_bar(t), gb_prev = schedule.gamma_bar(t - 1);
  Tensor x0 = clamp((x_t - eps_hat * std::sqrt(1.0 - gb)) * (1.0 / std::sqrt(gb)), -clip, clip);
  const double c0 = std::sqrt(gb_prev) * schedule.beta(t) / (1.0 - gb);
  const double ct = std::sqrt(schedule.gamma(t)) * (1.0 - gb_prev) / (1.0 - gb);
  Tensor mean = x0 * c0 + x_t * ct;
  if (!noise.defined()) return mean;
  if (noise.shape() != x_t.shape() || log_var.shape() != x_t.shape()) {
    throw ContractViolation("reverse_step: noise/variance shape mismatch");
  }
  return mean + exp(log_var * 0.5) * noise;
}

Tensor bounded_log_variance(const Tensor& raw, const std::vector<std::size_t>& t,
                            const DiffusionSchedule& schedule) {
  if (raw.rank() == 0 || raw.dim(0) != t.size()) {
    throw ContractViolation("bounded_log_variance: one step per row expected");
  }
  std::vector<double> lo(t.size()), span(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto [l, h] = schedule.log_variance_bounds(t[i]);
    lo[i] = l;
    span[i] = h - l;
  }
  return sigmoid(raw) * per_instance(span, raw.rank()) + per_instance(lo, raw.rank());
}

Tensor gaussian_nll(const Tensor& target, const Tensor& mean, const Tensor& log_var) {
  if (target.shape() != mean.shape() || log_var.shape() != mean.shape() || mean.rank() == 0) {
    throw ContractViolation("gaussian_nll: shape mismatch");
  }
  const double per_row = static_cast<double>(mean.numel() / mean.dim(0));
  Tensor diff = target - mean;
  Tensor terms = diff * diff * exp(-log_var) * 0.5 + log_var * 0.5;
  return sum(terms) / per_row;
}

// ---- feature extraction ----------------------------------------------------

Tensor pooling_matrix(std::size_t len, std::size_t tokens) {
  if (tokens == 0 || tokens > len) throw ContractViolation("pooling: need 1 <= L' <= L");
  std::vector<double> p(tokens * len, 0.0);
  for (std::size_t i = 0; i < tokens; ++i) {
    const std::size_t lo = i * len / tokens;
    const std::size_t hi = (i + 1) * len / tokens;
    for (std::size_t j = lo; j < hi; ++j) p[i * len + j] = 1.0 / static_cast<double>(hi - lo);
  }
  return Tensor::from({tokens, len}, std::move(p));
}

FeatureExtractor::FeatureExtractor(ParamRegistry& reg, const std::string& name,
                                   std::size_t in_dim, const FeatureConfig& cfg, nn::Rng& rng)
    : cfg_(cfg), in_dim_(in_dim) {
  if (cfg.width == 0 || cfg.tokens == 0 || cfg.lstm_hidden == 0) {
    throw ContractViolation("feature extractor widths must be positive");
  }
  conv_ = nn::Conv1d(reg, Group::kFe, name + ".conv", in_dim, cfg.width, cfg.conv_kernel, rng);
  lstm_ = nn::BiLstm(reg, Group::kFe, name + ".lstm", cfg.width, cfg.lstm_hidden, rng);
  proj_ = nn::Linear(reg, Group::kFe, name + ".proj", 2 * cfg.lstm_hidden, cfg.width, rng);
}

Tensor FeatureExtractor::forward(const Tensor& raw) const {
  const bool single = raw.rank() == 2;
  Tensor x = single ? reshape(raw, {1, raw.dim(0), raw.dim(1)}) : raw;
  if (x.rank() != 3 || x.dim(2) != in_dim_) {
    throw ContractViolation("feature extractor: expected [B, L, " + std::to_string(in_dim_) +
                            "], got " + shape_str(raw.shape()));
  }
  const std::size_t len = x.dim(1);
  Tensor h = proj_.forward(lstm_.forward(relu(conv_.forward(x))));
  if (len != cfg_.tokens) {
    Tensor pool_t = transpose(pooling_matrix(len, cfg_.tokens));  // [L, L']
    h = permute(matmul(permute(h, {0, 2, 1}), pool_t), {0, 2, 1});
  }
  h = layer_norm(h);
  return single ? reshape(h, {cfg_.tokens, cfg_.width}) : h;
}

// ---- denoiser ----------------------------------------------------------------

Denoiser::Denoiser(ParamRegistry& reg, const std::string& name, const DenoiserConfig& cfg,
                   nn::Rng& rng)
    : cfg_(cfg) {
  if (cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0) {
    throw ContractViolation("denoiser width must be a positive multiple of the head count");
  }
  std::vector<double> positions(cfg.tokens);
  for (std::size_t i = 0; i < cfg.tokens; ++i) positions[i] = static_cast<double>(i);
  position_ = nn::sinusoidal_embedding(positions, cfg.width);
  type_embedding_ = reg.add(Group::kMu, name + ".type",
                            nn::init_tensor({kModalities, cfg.width}, cfg.width,
                                            nn::Init::kKaiming, rng));
  time_mlp_ = nn::Mlp(reg, Group::kMu, name + ".time", cfg.width, cfg.mlp_hidden, cfg.width, rng);
  nn::BlockConfig block{cfg.width, cfg.heads, cfg.mlp_hidden, true, true};
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    blocks_.emplace_back(reg, Group::kMu, name + ".block" + std::to_string(i), block, rng);
  }
  final_ln_ = nn::LayerNorm(reg, Group::kMu, name + ".ln", cfg.width);
  eps_head_ = nn::Linear(reg, Group::kMu, name + ".eps", cfg.width, cfg.width, rng, nn::Init::kZero);
  sigma_head_ =
      nn::Linear(reg, Group::kSigma, name + ".sigma", cfg.width, cfg.width, rng, nn::Init::kZero);
}

Conditioning Denoiser::condition(const Reps& reps, const std::vector<Mask>& masks) const {
  const std::size_t batch = masks.size();
  if (batch == 0) throw ContractViolation("denoiser conditioning: empty batch");
  const Shape rep_shape{batch, cfg_.tokens, cfg_.width};
  std::vector<Tensor> blocks;
  for (std::size_t m = 0; m < kModalities; ++m) {
    Tensor rep = reps[m];
    if (rep.defined()) {
      if (rep.shape() != rep_shape) {
        throw ContractViolation("denoiser conditioning: expected " + shape_str(rep_shape) +
                                ", got " + shape_str(rep.shape()));
      }
    } else {
      for (const auto& mask : masks) {
        if (mask[m] == 0) throw ContractViolation("denoiser conditioning: available modality without tokens");
      }
      rep = Tensor::zeros(rep_shape);
    }
    blocks.push_back(rep + slice(type_embedding_, 0, m, 1));
  }
  std::vector<std::vector<bool>> available(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (data::available_count(masks[b]) == 0) {
      throw ContractViolation("denoiser conditioning: no available modality in row " + std::to_string(b));
    }
    available[b].reserve(kModalities * cfg_.tokens);
    for (std::size_t m = 0; m < kModalities; ++m) {
      available[b].insert(available[b].end(), cfg_.tokens, masks[b][m] == 0);
    }
  }
  return {concat(blocks, 1), nn::key_bias_from_mask(available)};
}

DenoiserOutput Denoiser::forward(const Tensor& x_t, const std::vector<std::size_t>& t,
                                 const Conditioning& cond, const DiffusionSchedule& schedule) const {
  const std::size_t batch = t.size();
  if (x_t.shape() != Shape{batch, cfg_.tokens, cfg_.width}) {
    throw ContractViolation("denoiser: x_t has shape " + shape_str(x_t.shape()));
  }
  if (!cond.tokens.defined() || cond.tokens.dim(0) != batch) {
    throw ContractViolation("denoiser: conditioning batch mismatch");
  }
  std::vector<double> steps(batch);
  for (std::size_t b = 0; b < batch; ++b) steps[b] = static_cast<double>(schedule.model_step(t[b]));
  Tensor time = reshape(time_mlp_.forward(nn::sinusoidal_embedding(steps, cfg_.width)),
                        {batch, 1, cfg_.width});
  Tensor h = x_t + position_ + time;
  for (const auto& block : blocks_) h = block.forward(h, cond.tokens, cond.key_bias);
  h = final_ln_.forward(h);
  return {eps_head_.forward(h), bounded_log_variance(sigma_head_.forward(h), t, schedule)};
}

Tensor reverse_chain(const Denoiser& denoiser, const Conditioning& cond, std::size_t rows,
                     const DiffusionSchedule& schedule, nn::Rng& rng, double x0_clip) {
  const auto& cfg = denoiser.config();
  const Shape shape{rows, cfg.tokens, cfg.width};
  Tensor x = nn::normal_tensor(shape, rng);
  for (std::size_t t = schedule.steps(); t >= 1; --t) {
    DenoiserOutput out = denoiser.forward(x, std::vector<std::size_t>(rows, t), cond, schedule);
    Tensor noise = t > 1 ? nn::normal_tensor(shape, rng) : Tensor();
    x = x0_clip > 0.0 ? reverse_step_clipped(x, t, out.eps, out.log_var, schedule, noise, x0_clip)
                      : reverse_step(x, t, out.eps, out.log_var, schedule, noise);
  }
  return x;
}

std::vector<std::size_t> missing_rows(const std::vector<Mask>& masks, std::size_t m) {
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b][m] != 0) rows.push_back(b);
  }
  return rows;
}

std::array<Recovered, kModalities> sample_missing(
    const Reps& reps, const std::vector<Mask>& masks,
    const std::array<const Denoiser*, kModalities>& denoisers, const DiffusionSchedule& schedule,
    std::size_t stride, nn::Rng& rng, double x0_clip) {
  const DiffusionSchedule chain = stride == 1 ? schedule : schedule.respaced(stride);
  std::array<Recovered, kModalities> out;
  for (std::size_t m = 0; m < kModalities; ++m) {
    out[m].rows = missing_rows(masks, m);
    if (out[m].rows.empty()) continue;
    const auto& rows = out[m].rows;
    Conditioning cond = denoisers[m]->condition(select_reps(reps, rows), select_masks(masks, rows));
    out[m].tokens = reverse_chain(*denoisers[m], cond, rows.size(), chain, rng, x0_clip);
  }
  return out;
}

Tensor l_hddm(const Reps& reps, const std::vector<Mask>& masks,
              const std::array<const Denoiser*, kModalities>& denoisers,
              const DiffusionSchedule& schedule, nn::Rng& rng) {
  if (masks.empty()) throw ContractViolation("l_hddm: empty batch");
  const std::size_t steps = schedule.steps();
  std::uniform_int_distribution<std::size_t> pick(1, steps);
  Tensor total = Tensor::zeros({1});
  for (std::size_t m = 0; m < kModalities; ++m) {
    auto rows = missing_rows(masks, m);
    if (rows.empty()) continue;
    if (!reps[m].defined()) {
      throw ContractViolation("l_hddm: ground truth for a missing modality is required in training");
    }
    const std::size_t n = rows.size();
    std::vector<std::size_t> t(n);
    std::vector<double> keep_prev(n), noise_prev(n), keep(n), noise(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = pick(rng);
      const double gb_prev = schedule.gamma_bar(t[i] - 1);
      keep_prev[i] = std::sqrt(gb_prev);
      noise_prev[i] = std::sqrt(1.0 - gb_prev);
      keep[i] = std::sqrt(schedule.gamma(t[i]));
      noise[i] = std::sqrt(schedule.beta(t[i]));
    }
    Tensor x_prev, x_t;
    {
      NoGradGuard no_grad;
      Tensor x0 = index_select(reps[m], rows).detach();
      Tensor eps_prev = nn::normal_tensor(x0.shape(), rng);
      Tensor eps = nn::normal_tensor(x0.shape(), rng);
      x_prev = x0 * per_instance(keep_prev) + eps_prev * per_instance(noise_prev);
      x_t = x_prev * per_instance(keep) + eps * per_instance(noise);
    }
    Conditioning cond = denoisers[m]->condition(select_reps(reps, rows), select_masks(masks, rows));
    DenoiserOutput out = denoisers[m]->forward(x_t, t, cond, schedule);
    Tensor mu = mean_from_eps(x_t, t, out.eps, schedule);
    total = total + gaussian_nll(x_prev, mu, out.log_var);
  }
  return total / static_cast<double>(masks.size());
}

// ---- unimodal reconstructor -------------------------------------------------

UnimodalReconstructor::UnimodalReconstructor(ParamRegistry& reg, const std::string& name,
                                             std::size_t width, std::size_t hidden, nn::Rng& rng)
    : net_(reg, Group::kUr, name, width, hidden, rng) {}

Tensor l_ur(const Reps& rec, const Reps& truth, const std::vector<Mask>& masks) {
  if (masks.empty()) throw ContractViolation("l_ur: empty batch");
  const std::size_t batch = masks.size();
  Tensor total = Tensor::zeros({1});
  for (std::size_t m = 0; m < kModalities; ++m) {
    std::vector<double> gate(batch);
    bool any = false;
    for (std::size_t b = 0; b < batch; ++b) {
      gate[b] = masks[b][m] != 0 ? 1.0 : 0.0;
      any = any || gate[b] != 0.0;
    }
    if (!any) continue;
    if (!rec[m].defined() || !truth[m].defined() || rec[m].shape() != truth[m].shape() ||
        rec[m].dim(0) != batch) {
      throw ContractViolation("l_ur: recovered and ground-truth shapes differ");
    }
    Tensor diff = rec[m] - truth[m];
    Tensor per_row = mean(reshape(diff * diff, {batch, diff.numel() / batch}), 1);
    total = total + sum(per_row * Tensor::from({batch}, gate));
  }
  return total / static_cast<double>(batch);
}

}  // namespace rohydr::recovery
