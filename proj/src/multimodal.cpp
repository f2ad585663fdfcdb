#include "rohydr/multimodal.hpp"

#include <string>

namespace rohydr::recovery {

FusionNetwork::FusionNetwork(ParamRegistry& reg, const std::string& name,
                             const FusionConfig& cfg, nn::Rng& rng)
    : cfg_(cfg) {
  if (cfg.width == 0 || cfg.fused_width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0) {
    throw ContractViolation("fusion width must be a positive multiple of the head count");
  }
  type_embedding_ = reg.add(Group::kFusion, name + ".type",
                            nn::init_tensor({kModalities, cfg.width}, cfg.width,
                                            nn::Init::kKaiming, rng));
  nn::BlockConfig block{cfg.width, cfg.heads, cfg.mlp_hidden, true, false};
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    blocks_.emplace_back(reg, Group::kFusion, name + ".block" + std::to_string(i), block, rng);
  }
  final_ln_ = nn::LayerNorm(reg, Group::kFusion, name + ".ln", cfg.width);
  out_ = nn::Linear(reg, Group::kFusion, name + ".out", cfg.width, cfg.fused_width, rng);
}

Tensor FusionNetwork::forward(const Reps& inputs) const {
  std::vector<Tensor> parts;
  std::size_t batch = 0;
  for (std::size_t m = 0; m < kModalities; ++m) {
    if (!inputs[m].defined()) {
      throw ContractViolation("fusion: modality slot " + std::to_string(m) +
                              " is empty; recover it first");
    }
    if (m == 0) batch = inputs[m].rank() == 3 ? inputs[m].dim(0) : 0;
    if (inputs[m].shape() != Shape{batch, cfg_.tokens, cfg_.width}) {
      throw ContractViolation("fusion: slot " + std::to_string(m) + " has shape " +
                              shape_str(inputs[m].shape()));
    }
    parts.push_back(inputs[m] + slice(type_embedding_, 0, m, 1));
  }
  Tensor h = concat(parts, 1);
  for (const auto& block : blocks_) h = block.forward(h);
  return out_.forward(mean(final_ln_.forward(h), 1));
}

MultimodalReconstructor::MultimodalReconstructor(ParamRegistry& reg, const std::string& name,
                                                 std::size_t width, std::size_t hidden,
                                                 nn::Rng& rng)
    : net_(reg, Group::kMr, name, width, hidden, rng) {}

Discriminator::Discriminator(ParamRegistry& reg, const std::string& name, std::size_t width,
                             std::size_t hidden, nn::Rng& rng)
    : net_(reg, Group::kDisc, name, width, hidden, 1, rng) {}

Tensor Discriminator::forward(const Tensor& f, bool frozen) const {
  if (f.rank() != 2) throw ContractViolation("discriminator: expected [B, d_f]");
  Tensor logits = reshape(net_.forward(f, frozen), {f.dim(0)});
  return clamp(sigmoid(logits), kProbabilityEps, 1.0 - kProbabilityEps);
}

Classifier::Classifier(ParamRegistry& reg, const std::string& name, std::size_t width,
                       std::size_t hidden, nn::Rng& rng)
    : net_(reg, Group::kClf, name, width, hidden, 1, rng) {}

Tensor Classifier::forward(const Tensor& f) const {
  if (f.rank() != 2) throw ContractViolation("classifier: expected [B, d_f]");
  return reshape(net_.forward(f), {f.dim(0)});
}

Tensor l_rec(const Tensor& f_rec, const Tensor& f_gt) {
  if (f_rec.shape() != f_gt.shape() || f_rec.rank() == 0) {
    throw ContractViolation("l_rec: shapes " + shape_str(f_rec.shape()) + " and " +
                            shape_str(f_gt.shape()) + " differ");
  }
  Tensor diff = f_rec - f_gt.detach();
  return sum(diff * diff) / static_cast<double>(f_rec.dim(0));
}

Tensor l_d(const Tensor& i_gt, const Tensor& i_rec) {
  if (i_gt.numel() == 0 || i_rec.numel() == 0) throw ContractViolation("l_d: empty batch");
  return -mean(log(i_gt)) - mean(log(1.0 - i_rec));
}

Tensor l_adv(const Tensor& i_rec) {
  if (i_rec.numel() == 0) throw ContractViolation("l_adv: empty batch");
  return -mean(log(i_rec));
}

Tensor l_mr(const Tensor& adv, const Tensor& rec, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ContractViolation("l_mr: adversarial weight must lie in [0, 1]");
  }
  return adv * lambda + rec * (1.0 - lambda);
}

Tensor l_c(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.numel() == 0) {
    throw ContractViolation("l_c: prediction and label shapes differ");
  }
  Tensor diff = pred - target;
  return mean(diff * diff);
}

Tensor discriminator_loss(const Discriminator& disc, const Tensor& f_gt, const Tensor& f_rec) {
  return l_d(disc.forward(f_gt.detach()), disc.forward(f_rec.detach()));
}

Tensor adversarial_loss(const Discriminator& disc, const Tensor& f_rec) {
  return l_adv(disc.forward(f_rec, /*frozen=*/true));
}

}  // namespace rohydr::recovery
