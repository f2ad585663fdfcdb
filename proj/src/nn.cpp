#include "rohydr/nn.hpp"

#include <cmath>

namespace rohydr::nn {

namespace {

// Lifts [L, d] to [1, L, d]; leaves rank-3 tensors alone.
Tensor as_batched(const Tensor& x, const char* who) {
  if (x.rank() == 3) return x;
  if (x.rank() == 2) return reshape(x, {1, x.dim(0), x.dim(1)});
  throw ContractViolation(std::string(who) + ": expected [L, d] or [B, L, d], got " +
                          shape_str(x.shape()));
}

Tensor restore_rank(const Tensor& y, std::size_t rank) {
  if (rank == 3) return y;
  return reshape(y, {y.dim(1), y.dim(2)});
}

}  // namespace

Tensor init_tensor(const Shape& shape, std::size_t fan_in, Init init, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  if (init == Init::kZero) return t;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

Tensor normal_tensor(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

// ---- Linear -------------------------------------------------------------

Linear::Linear(ParamRegistry& reg, Group group, const std::string& name,
               std::size_t in, std::size_t out, Rng& rng, Init init)
    : in_(in), out_(out) {
  if (in == 0 || out == 0) throw ContractViolation("linear: widths must be positive");
  w_ = reg.add(group, name + ".w", init_tensor({in, out}, in, init, rng));
  b_ = reg.add(group, name + ".b", init_tensor({out}, in, init, rng));
}

Tensor Linear::forward(const Tensor& x, bool frozen) const {
  if (x.rank() == 0 || x.shape().back() != in_) {
    throw ContractViolation("linear: expected trailing width " + std::to_string(in_) +
                            ", got " + shape_str(x.shape()));
  }
  if (frozen) return matmul(x, w_.detach()) + b_.detach();
  return matmul(x, w_) + b_;
}

// ---- Conv1d -------------------------------------------------------------

Conv1d::Conv1d(ParamRegistry& reg, Group group, const std::string& name,
               std::size_t in, std::size_t out, std::size_t kernel, Rng& rng)
    : in_(in), kernel_(kernel) {
  if (kernel % 2 == 0) throw ContractViolation("conv1d: kernel width must be odd");
  proj_ = Linear(reg, group, name, kernel * in, out, rng);
}

Tensor Conv1d::forward(const Tensor& x_in) const {
  const std::size_t rank = x_in.rank();
  Tensor x = as_batched(x_in, "conv1d");
  if (x.dim(2) != in_) {
    throw ContractViolation("conv1d: expected " + std::to_string(in_) +
                            " input channels, got " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(1);
  if (kernel_ > 2 * len + 1) {
    throw ContractViolation("conv1d: kernel wider than 2L+1");
  }
  const std::size_t pad = kernel_ / 2;
  Tensor padded = x;
  if (pad > 0) {
    Tensor zeros = Tensor::zeros({x.dim(0), pad, in_});
    padded = concat({zeros, x, zeros}, 1);
  }
  std::vector<Tensor> windows;
  windows.reserve(kernel_);
  for (std::size_t j = 0; j < kernel_; ++j) windows.push_back(slice(padded, 1, j, len));
  Tensor unfolded = kernel_ == 1 ? windows.front() : concat(windows, 2);
  return restore_rank(proj_.forward(unfolded), rank);
}

// ---- BiLstm -------------------------------------------------------------

BiLstm::BiLstm(ParamRegistry& reg, Group group, const std::string& name,
               std::size_t in, std::size_t hidden, Rng& rng)
    : in_(in), hidden_(hidden) {
  auto make = [&](const std::string& dir) {
    Direction d;
    d.w_x = reg.add(group, name + "." + dir + ".w_x",
                    init_tensor({in, 4 * hidden}, hidden, Init::kKaiming, rng));
    d.w_h = reg.add(group, name + "." + dir + ".w_h",
                    init_tensor({hidden, 4 * hidden}, hidden, Init::kKaiming, rng));
    d.b = reg.add(group, name + "." + dir + ".b",
                  init_tensor({4 * hidden}, hidden, Init::kKaiming, rng));
    return d;
  };
  fwd_ = make("fwd");
  bwd_ = make("bwd");
}

Tensor BiLstm::run(const Direction& dir, const Tensor& x, bool reverse) const {
  const std::size_t batch = x.dim(0);
  const std::size_t len = x.dim(1);
  const std::size_t h = hidden_;
  Tensor xw = matmul(x, dir.w_x) + dir.b;
  Tensor state_h;
  Tensor state_c;
  std::vector<Tensor> outputs(len);
  for (std::size_t step = 0; step < len; ++step) {
    const std::size_t t = reverse ? len - 1 - step : step;
    Tensor gates = reshape(slice(xw, 1, t, 1), {batch, 4 * h});
    if (state_h.defined()) gates = gates + matmul(state_h, dir.w_h);
    Tensor i = sigmoid(slice(gates, 1, 0, h));
    Tensor f = sigmoid(slice(gates, 1, h, h));
    Tensor g = tanh(slice(gates, 1, 2 * h, h));
    Tensor o = sigmoid(slice(gates, 1, 3 * h, h));
    state_c = state_c.defined() ? f * state_c + i * g : i * g;
    state_h = o * tanh(state_c);
    outputs[t] = reshape(state_h, {batch, 1, h});
  }
  return len == 1 ? outputs.front() : concat(outputs, 1);
}

Tensor BiLstm::forward(const Tensor& x_in) const {
  const std::size_t rank = x_in.rank();
  Tensor x = as_batched(x_in, "bilstm");
  if (x.dim(2) != in_) {
    throw ContractViolation("bilstm: expected input width " + std::to_string(in_));
  }
  Tensor out = concat({run(fwd_, x, false), run(bwd_, x, true)}, 2);
  return restore_rank(out, rank);
}

// ---- LayerNorm ----------------------------------------------------------

LayerNorm::LayerNorm(ParamRegistry& reg, Group group, const std::string& name,
                     std::size_t width) {
  gain_ = reg.add(group, name + ".gain", Tensor::full({width}, 1.0));
  bias_ = reg.add(group, name + ".bias", Tensor::zeros({width}));
}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm(x) * gain_ + bias_;
}

// ---- MultiHeadAttention -------------------------------------------------

MultiHeadAttention::MultiHeadAttention(ParamRegistry& reg, Group group,
                                       const std::string& name, std::size_t width,
                                       std::size_t heads, Rng& rng, Init out_init)
    : width_(width), heads_(heads) {
  if (heads == 0 || width % heads != 0) {
    throw ContractViolation("attention: width must be divisible by head count");
  }
  q_ = Linear(reg, group, name + ".q", width, width, rng);
  k_ = Linear(reg, group, name + ".k", width, width, rng);
  v_ = Linear(reg, group, name + ".v", width, width, rng);
  o_ = Linear(reg, group, name + ".o", width, width, rng, out_init);
}

Tensor MultiHeadAttention::split_heads(const Tensor& x) const {
  const std::size_t dh = width_ / heads_;
  return permute(reshape(x, {x.dim(0), x.dim(1), heads_, dh}), {0, 2, 1, 3});
}

Tensor MultiHeadAttention::forward(const Tensor& queries_in, const Tensor& kv_in,
                                   const Tensor& key_bias, Tensor* weights) const {
  const std::size_t rank = queries_in.rank();
  Tensor queries = as_batched(queries_in, "attention");
  Tensor kv = as_batched(kv_in, "attention");
  if (queries.dim(2) != width_ || kv.dim(2) != width_ || queries.dim(0) != kv.dim(0)) {
    throw ContractViolation("attention: width or batch mismatch " +
                            shape_str(queries.shape()) + " vs " + shape_str(kv.shape()));
  }
  const std::size_t batch = queries.dim(0);
  const std::size_t lq = queries.dim(1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(width_ / heads_));
  Tensor q = split_heads(q_.forward(queries));
  Tensor k = split_heads(k_.forward(kv));
  Tensor v = split_heads(v_.forward(kv));
  Tensor scores = matmul(q, transpose(k)) * scale;
  if (key_bias.defined()) scores = scores + key_bias;
  Tensor attn = softmax(scores, 3);
  if (weights != nullptr) *weights = attn;
  Tensor ctx = permute(matmul(attn, v), {0, 2, 1, 3});
  Tensor out = o_.forward(reshape(ctx, {batch, lq, width_}));
  return restore_rank(out, rank);
}

Tensor key_bias_from_mask(const std::vector<std::vector<bool>>& available) {
  if (available.empty()) throw ContractViolation("key mask: empty batch");
  const std::size_t len = available.front().size();
  std::vector<double> bias;
  bias.reserve(available.size() * len);
  for (const auto& row : available) {
    if (row.size() != len) throw ContractViolation("key mask: ragged rows");
    bool any = false;
    for (bool a : row) {
      bias.push_back(a ? 0.0 : kMaskedScore);
      any = any || a;
    }
    if (!any) throw ContractViolation("key mask: every key masked for a row");
  }
  return Tensor::from({available.size(), 1, 1, len}, std::move(bias));
}

// ---- AttentionBlock -----------------------------------------------------

AttentionBlock::AttentionBlock(ParamRegistry& reg, Group group,
                               const std::string& name, const BlockConfig& cfg,
                               Rng& rng)
    : cfg_(cfg) {
  if (cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0) {
    throw ContractViolation("attention block: width must be divisible by heads");
  }
  if (cfg.self_attention) {
    ln_self_ = LayerNorm(reg, group, name + ".ln_self", cfg.width);
    self_ = MultiHeadAttention(reg, group, name + ".self", cfg.width, cfg.heads, rng);
  }
  if (cfg.cross_attention) {
    ln_cross_ = LayerNorm(reg, group, name + ".ln_cross", cfg.width);
    ln_kv_ = LayerNorm(reg, group, name + ".ln_kv", cfg.width);
    cross_ = MultiHeadAttention(reg, group, name + ".cross", cfg.width, cfg.heads, rng);
  }
  ln_mlp_ = LayerNorm(reg, group, name + ".ln_mlp", cfg.width);
  mlp_in_ = Linear(reg, group, name + ".mlp_in", cfg.width, cfg.mlp_hidden, rng);
  mlp_out_ = Linear(reg, group, name + ".mlp_out", cfg.mlp_hidden, cfg.width, rng,
                    Init::kZero);
}

Tensor AttentionBlock::forward(const Tensor& x_in, const Tensor& cond,
                               const Tensor& key_bias) const {
  const std::size_t rank = x_in.rank();
  Tensor x = as_batched(x_in, "attention block");
  if (x.dim(2) != cfg_.width) {
    throw ContractViolation("attention block: width mismatch " + shape_str(x.shape()));
  }
  if (cfg_.self_attention) {
    Tensor h = ln_self_.forward(x);
    x = x + self_.forward(h, h);
  }
  if (cfg_.cross_attention) {
    if (!cond.defined()) {
      throw ContractViolation("attention block: cross-attention needs conditioning");
    }
    Tensor kv = as_batched(cond, "attention block");
    x = x + cross_.forward(ln_cross_.forward(x), ln_kv_.forward(kv), key_bias);
  }
  x = x + mlp_out_.forward(relu(mlp_in_.forward(ln_mlp_.forward(x))));
  return restore_rank(x, rank);
}

// ---- ResidualMlp / Mlp --------------------------------------------------

ResidualMlp::ResidualMlp(ParamRegistry& reg, Group group, const std::string& name,
                         std::size_t width, std::size_t hidden, Rng& rng)
    : width_(width) {
  in_ = Linear(reg, group, name + ".in", width, hidden, rng);
  out_ = Linear(reg, group, name + ".out", hidden, width, rng, Init::kZero);
}

Tensor ResidualMlp::branch(const Tensor& x) const {
  return out_.forward(relu(in_.forward(x)));
}

Tensor ResidualMlp::forward(const Tensor& x) const {
  if (x.rank() == 0 || x.shape().back() != width_) {
    throw ContractViolation("residual mlp: width mismatch " + shape_str(x.shape()));
  }
  return x + branch(x);
}

Mlp::Mlp(ParamRegistry& reg, Group group, const std::string& name, std::size_t in,
         std::size_t hidden, std::size_t out, Rng& rng) {
  in_ = Linear(reg, group, name + ".in", in, hidden, rng);
  out_ = Linear(reg, group, name + ".out", hidden, out, rng);
}

Tensor Mlp::forward(const Tensor& x, bool frozen) const {
  return out_.forward(relu(in_.forward(x, frozen)), frozen);
}

Tensor sinusoidal_embedding(const std::vector<double>& positions, std::size_t width) {
  std::vector<double> out(positions.size() * width);
  for (std::size_t p = 0; p < positions.size(); ++p) {
    for (std::size_t i = 0; i < width; ++i) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = positions[p] * freq;
      out[p * width + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({positions.size(), width}, std::move(out));
}

}  // namespace rohydr::nn
