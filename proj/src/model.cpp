#include "rohydr/model.hpp"

#include <fstream>
#include "json.hpp"

#include "rohydr/tensor_io.hpp"

namespace rohydr::model {

using json = nlohmann::json;
using data::kModalities;
using data::Mask;

std::string Components::str() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(hddm, "hddm");
  add(ur, "ur");
  add(disc, "disc");
  add(mr, "mr");
  return out.empty() ? "none" : out;
}

void ModelConfig::validate() const {
  for (auto d : dims) {
    if (d == 0) throw ContractViolation("model: modality dims must be positive");
  }
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ContractViolation("model: width must be a positive multiple of heads");
  }
  if (tokens == 0 || fused_width == 0 || mlp_hidden == 0 || head_hidden == 0 ||
      lstm_hidden == 0 || conv_kernel == 0) {
    throw ContractViolation("model: sizes must be positive");
  }
  if (!(x0_clip >= 0.0)) throw ContractViolation("model: x0_clip must be >= 0");
  if (diffusion_steps < 2) throw ContractViolation("model: need at least 2 diffusion steps");
}

Batch make_batch(const data::Dataset& dataset, const std::vector<std::size_t>& rows,
                 bool withhold_missing) {
  if (rows.empty()) throw ContractViolation("make_batch: no rows");
  Batch batch;
  batch.index = rows;
  const std::size_t b = rows.size();
  std::vector<double> labels(b);
  batch.masks.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    batch.masks[i] = dataset.masked() ? dataset.mask(rows[i]) : Mask{0, 0, 0};
    labels[i] = dataset.label(rows[i]);
  }
  batch.labels = Tensor::from({b}, labels);
  for (data::Modality m : data::kAllModalities) {
    const std::size_t k = data::index_of(m);
    const std::size_t stride = dataset.seq_len * dataset.dims[k];
    std::vector<double> v(b * stride, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
      if (withhold_missing && batch.masks[i][k] != 0) continue;
      auto src = dataset.row(m, rows[i]);
      std::copy(src.begin(), src.end(), v.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    batch.raw[k] = Tensor::from({b, dataset.seq_len, dataset.dims[k]}, v);
  }
  return batch;
}

RoHyDR::RoHyDR(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  nn::Rng rng(seed);
  schedule_ = recovery::DiffusionSchedule::scaled_linear(cfg.diffusion_steps);
  recovery::FeatureConfig fe{cfg.width, cfg.tokens, cfg.conv_kernel, cfg.lstm_hidden};
  recovery::DenoiserConfig den{cfg.width, cfg.tokens, cfg.heads, cfg.denoiser_blocks,
                               cfg.mlp_hidden};
  recovery::FusionConfig fusion{cfg.width,      cfg.tokens,     cfg.heads,
                                cfg.fusion_blocks, cfg.mlp_hidden, cfg.fused_width};
  for (std::size_t m = 0; m < kModalities; ++m) {
    const std::string letter(1, data::modality_letter(static_cast<data::Modality>(m)));
    fe_[m] = recovery::FeatureExtractor(reg_, "fe_" + letter, cfg.dims[m], fe, rng);
  }
  for (std::size_t m = 0; m < kModalities; ++m) {
    const std::string letter(1, data::modality_letter(static_cast<data::Modality>(m)));
    den_[m] = recovery::Denoiser(reg_, "den_" + letter, den, rng);
  }
  for (std::size_t m = 0; m < kModalities; ++m) {
    const std::string letter(1, data::modality_letter(static_cast<data::Modality>(m)));
    ur_[m] = recovery::UnimodalReconstructor(reg_, "ur_" + letter, cfg.width, cfg.head_hidden, rng);
  }
  fusion_ = recovery::FusionNetwork(reg_, "fusion", fusion, rng);
  mr_ = recovery::MultimodalReconstructor(reg_, "mr", cfg.fused_width, cfg.head_hidden, rng);
  disc_ = recovery::Discriminator(reg_, "disc", cfg.fused_width, cfg.head_hidden, rng);
  clf_ = recovery::Classifier(reg_, "clf", cfg.fused_width, cfg.head_hidden, rng);
  reg_.freeze();
}

std::array<const recovery::Denoiser*, kModalities> RoHyDR::denoisers() const {
  return {&den_[0], &den_[1], &den_[2]};
}

Reps RoHyDR::extract(const Batch& batch) const {
  Reps reps;
  for (std::size_t m = 0; m < kModalities; ++m) reps[m] = fe_[m].forward(batch.raw[m]);
  return reps;
}

Recovery RoHyDR::recover(const Reps& reps, const std::vector<Mask>& masks, std::size_t stride,
                         nn::Rng& rng, bool chain_grad) const {
  Recovery out;
  std::array<recovery::Recovered, kModalities> sampled;
  if (cfg_.zero_impute) {
    for (std::size_t m = 0; m < kModalities; ++m) {
      out.rows[m] = recovery::missing_rows(masks, m);
      if (out.rows[m].empty()) {
        out.merged[m] = reps[m];
        continue;
      }
      out.refined[m] = Tensor::zeros({out.rows[m].size(), cfg_.tokens, cfg_.width});
      out.merged[m] = merge_rows(reps[m], out.rows[m], out.refined[m]);
    }
    return out;
  }
  if (cfg_.components.hddm && chain_grad) {
    sampled = recovery::sample_missing(reps, masks, denoisers(), schedule_, stride, rng, cfg_.x0_clip);
  } else if (cfg_.components.hddm) {
    NoGradGuard no_grad;
    sampled = recovery::sample_missing(reps, masks, denoisers(), schedule_, stride, rng, cfg_.x0_clip);
  } else {
    for (std::size_t m = 0; m < kModalities; ++m) {
      sampled[m].rows = recovery::missing_rows(masks, m);
      if (sampled[m].rows.empty()) continue;
      sampled[m].tokens = nn::normal_tensor({sampled[m].rows.size(), cfg_.tokens, cfg_.width}, rng);
    }
  }
  for (std::size_t m = 0; m < kModalities; ++m) {
    out.rows[m] = sampled[m].rows;
    if (out.rows[m].empty()) {
      out.merged[m] = reps[m];
      continue;
    }
    out.refined[m] = cfg_.components.ur ? ur_[m].forward(sampled[m].tokens) : sampled[m].tokens;
    out.merged[m] = merge_rows(reps[m], out.rows[m], out.refined[m]);
  }
  return out;
}

Tensor RoHyDR::refine(const Tensor& f_rec) const {
  return cfg_.components.mr && !cfg_.zero_impute ? mr_.forward(f_rec) : f_rec;
}

Tensor RoHyDR::hddm_loss(const Reps& reps, const std::vector<Mask>& masks, nn::Rng& rng) const {
  return recovery::l_hddm(reps, masks, denoisers(), schedule_, rng);
}

Tensor RoHyDR::ur_loss(const Recovery& rec, const Reps& truth,
                       const std::vector<Mask>& masks) const {
  Reps full, target;
  for (std::size_t m = 0; m < kModalities; ++m) {
    target[m] = truth[m].detach();
    full[m] = rec.rows[m].empty() ? target[m] : merge_rows(target[m], rec.rows[m], rec.refined[m]);
  }
  return recovery::l_ur(full, target, masks);
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "rohydr-checkpoint";
constexpr int kCheckpointVersion = 1;

json config_to_json(const ModelConfig& c) {
  return {{"dims", c.dims},
          {"width", c.width},
          {"tokens", c.tokens},
          {"heads", c.heads},
          {"conv_kernel", c.conv_kernel},
          {"lstm_hidden", c.lstm_hidden},
          {"denoiser_blocks", c.denoiser_blocks},
          {"fusion_blocks", c.fusion_blocks},
          {"mlp_hidden", c.mlp_hidden},
          {"fused_width", c.fused_width},
          {"head_hidden", c.head_hidden},
          {"diffusion_steps", c.diffusion_steps},
          {"x0_clip", c.x0_clip},
          {"zero_impute", c.zero_impute},
          {"components",
           {{"hddm", c.components.hddm},
            {"ur", c.components.ur},
            {"disc", c.components.disc},
            {"mr", c.components.mr}}}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.dims = j.at("dims").get<std::array<std::size_t, kModalities>>();
  c.width = j.at("width");
  c.tokens = j.at("tokens");
  c.heads = j.at("heads");
  c.conv_kernel = j.at("conv_kernel");
  c.lstm_hidden = j.at("lstm_hidden");
  c.denoiser_blocks = j.at("denoiser_blocks");
  c.fusion_blocks = j.at("fusion_blocks");
  c.mlp_hidden = j.at("mlp_hidden");
  c.fused_width = j.at("fused_width");
  c.head_hidden = j.at("head_hidden");
  c.diffusion_steps = j.at("diffusion_steps");
  c.x0_clip = j.at("x0_clip");
  c.zero_impute = j.at("zero_impute");
  const auto& comp = j.at("components");
  c.components = {comp.at("hddm"), comp.at("ur"), comp.at("disc"), comp.at("mr")};
  return c;
}

json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("cannot open checkpoint manifest in " + dir.string(), 0);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what(), e.byte);
  }
  if (j.value("format", "") != kCheckpointFormat || j.value("version", 0) != kCheckpointVersion) {
    throw FormatError("not a checkpoint manifest: " + (dir / "manifest.json").string(), 0);
  }
  return j;
}

}  // namespace

void save_checkpoint(const RoHyDR& model, const std::filesystem::path& dir,
                     const std::string& extra_json) {
  std::filesystem::create_directories(dir);
  json groups = json::object();
  for (const auto& p : model.registry().params()) {
    groups[std::string(group_name(p.group))][p.name] = p.tensor.shape();
    save_tensor(dir / (p.name + ".bin"), p.tensor);
  }
  json manifest = {{"format", kCheckpointFormat},
                   {"version", kCheckpointVersion},
                   {"model", config_to_json(model.config())},
                   {"groups", groups},
                   {"extra", json::parse(extra_json)}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
}

void load_checkpoint(RoHyDR& model, const std::filesystem::path& dir) {
  const json manifest = read_manifest(dir);
  std::size_t listed = 0;
  for (const auto& [group, names] : manifest.at("groups").items()) listed += names.size();
  if (listed != model.registry().size()) {
    throw FormatError("checkpoint lists " + std::to_string(listed) + " tensors, model has " +
                      std::to_string(model.registry().size()),
                      0);
  }
  for (const auto& p : model.registry().params()) {
    const auto& group = manifest.at("groups").value(std::string(group_name(p.group)), json::object());
    if (!group.contains(p.name)) {
      throw FormatError("checkpoint has no tensor " + p.name, 0);
    }
    const auto blob = dir / (p.name + ".bin");
    if (!std::filesystem::exists(blob)) throw FormatError("checkpoint blob missing: " + blob.string(), 0);
    Tensor loaded = load_tensor(blob);
    if (loaded.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint tensor " + p.name + " has shape " +
                            shape_str(loaded.shape()) + ", model expects " +
                            shape_str(p.tensor.shape()),
                        0);
    }
    Tensor target = p.tensor;
    std::ranges::copy(loaded.data(), target.mutable_data().begin());
  }
}

ModelConfig read_checkpoint_config(const std::filesystem::path& dir) {
  try {
    return config_from_json(read_manifest(dir).at("model"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what(), 0);
  }
}

std::string read_checkpoint_extra(const std::filesystem::path& dir) {
  return read_manifest(dir).value("extra", json::object()).dump();
}

}  // namespace rohydr::model
