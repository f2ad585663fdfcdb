#include "rohydr/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "json.hpp"
#include "rohydr/tensor_io.hpp"

namespace rohydr::data {

namespace {

using json = nlohmann::json;

thread_local const Dataset* t_inference = nullptr;
thread_local AccessStats t_stats;

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kManifestFormat = "rohydr-dataset";
constexpr int kManifestVersion = 1;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ (stream * 0xd1b54a32d192ed03ULL)) + index);
}

enum Stream : std::uint64_t { kMixing = 1, kSample = 2, kSplit = 3, kMask = 4 };

std::string blob_name(Modality m) { return std::string("x_") + modality_letter(m) + ".bin"; }

}  // namespace

char modality_letter(Modality m) {
  switch (m) {
    case Modality::kAudio: return 'a';
    case Modality::kText: return 't';
    case Modality::kVision: return 'v';
  }
  return '?';
}

std::size_t available_count(const Mask& mask) {
  std::size_t n = 0;
  for (auto b : mask) n += (b == 0);
  return n;
}

ModalitySet ModalitySet::parse(const std::string& text) {
  if (text == "all") return full();
  ModalitySet s;
  for (char c : text) {
    switch (c) {
      case 'a': s.bits_ |= 1u; break;
      case 't': s.bits_ |= 2u; break;
      case 'v': s.bits_ |= 4u; break;
      case ',': case '+': case ' ': break;
      default:
        throw ContractViolation("unknown modality '" + std::string(1, c) + "' in \"" + text + "\"");
    }
  }
  return s;
}

std::size_t ModalitySet::size() const { return std::popcount(bits_); }

std::string ModalitySet::str() const {
  std::string out;
  for (Modality m : kAllModalities) {
    if (!contains(m)) continue;
    if (!out.empty()) out += '+';
    out += modality_letter(m);
  }
  return out.empty() ? "none" : out;
}

std::vector<ModalitySet> ModalitySet::all_nonempty() {
  using M = Modality;
  return {ModalitySet{M::kAudio},
          ModalitySet{M::kText},
          ModalitySet{M::kVision},
          ModalitySet{M::kAudio, M::kText},
          ModalitySet{M::kAudio, M::kVision},
          ModalitySet{M::kText, M::kVision},
          full()};
}

void DatasetSpec::validate() const {
  if (n == 0 || seq_len == 0 || latent == 0) {
    throw ContractViolation("dataset spec: n, seq_len and latent must be positive");
  }
  for (std::size_t m = 0; m < kModalities; ++m) {
    if (dims[m] == 0) throw ContractViolation("dataset spec: modality dims must be positive");
    if (!(noise[m] >= 0.0) || !std::isfinite(noise[m])) {
      throw ContractViolation("dataset spec: noise scales must be finite and nonnegative");
    }
  }
  if (train_fraction <= 0 || val_fraction <= 0 || test_fraction <= 0 ||
      std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ContractViolation("dataset spec: split fractions must be positive and sum to 1");
  }
}

Mask Dataset::mask(std::size_t i) const {
  if (masks.empty()) return Mask{0, 0, 0};
  return masks.at(i);
}

std::span<const double> Dataset::row(Modality m, std::size_t i) const {
  if (i >= n) throw ContractViolation("dataset row index out of range");
  ++t_stats.reads;
  if (t_inference == this) {
    ++t_stats.guarded_reads;
    if (!masks.empty() && masks[i][index_of(m)] != 0) {
      throw ContractViolation(std::string("inference read withheld modality ") +
                              modality_letter(m) + " of sample " + std::to_string(i));
    }
  }
  const std::size_t stride = seq_len * dims[index_of(m)];
  return features[index_of(m)].data().subspan(i * stride, stride);
}

InferenceGuard::InferenceGuard(const Dataset& dataset) : previous_(t_inference) {
  t_inference = &dataset;
}

InferenceGuard::~InferenceGuard() { t_inference = previous_; }

AccessStats& access_stats() { return t_stats; }

Dataset generate_synthetic(const DatasetSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n;
  const std::size_t len = spec.seq_len;
  const std::size_t k = spec.latent;
  const std::size_t factors = k + 1;  // latent z plus the scaled label

  Dataset ds;
  ds.n = n;
  ds.seq_len = len;
  ds.dims = spec.dims;
  ds.latent = k;
  ds.seed = spec.seed;

  // Mixing matrices [factors, d_m] and per-step offsets [L, d_m].
  std::array<std::vector<double>, kModalities> mixing;
  std::array<std::vector<double>, kModalities> offsets;
  {
    std::mt19937_64 rng(derive_seed(spec.seed, kMixing, 0));
    std::normal_distribution<double> normal(0.0, 1.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(factors));
    for (std::size_t m = 0; m < kModalities; ++m) {
      mixing[m].resize(factors * spec.dims[m]);
      for (auto& w : mixing[m]) w = normal(rng) * scale;
      offsets[m].resize(len * spec.dims[m]);
      for (auto& b : offsets[m]) b = 0.5 * normal(rng);
    }
  }

  std::array<std::vector<double>, kModalities> feats;
  for (std::size_t m = 0; m < kModalities; ++m) feats[m].resize(n * len * spec.dims[m]);
  std::vector<double> labels(n);

  std::vector<double> factor(factors);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(spec.seed, kSample, i));
    std::uniform_real_distribution<double> uniform(-3.0, 3.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double y = uniform(rng);
    labels[i] = y;
    for (std::size_t j = 0; j < k; ++j) factor[j] = normal(rng);
    factor[k] = y / std::sqrt(3.0);
    for (std::size_t m = 0; m < kModalities; ++m) {
      const std::size_t d = spec.dims[m];
      std::vector<double> signal(d, 0.0);
      for (std::size_t f = 0; f < factors; ++f) {
        for (std::size_t c = 0; c < d; ++c) signal[c] += factor[f] * mixing[m][f * d + c];
      }
      double* out = feats[m].data() + i * len * d;
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t c = 0; c < d; ++c) {
          out[t * d + c] = signal[c] + offsets[m][t * d + c] + spec.noise[m] * normal(rng);
        }
      }
    }
  }
  for (std::size_t m = 0; m < kModalities; ++m) {
    ds.features[m] = Tensor::from({n, len, spec.dims[m]}, std::move(feats[m]));
  }
  ds.labels = Tensor::from({n}, std::move(labels));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 split_rng(derive_seed(spec.seed, kSplit, 0));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * n));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(spec.val_fraction * n)));
  ds.train.assign(order.begin(), order.begin() + n_train);
  ds.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  ds.test.assign(order.begin() + n_train + n_val, order.end());
  return ds;
}

double compute_missing_rate(const std::vector<Mask>& masks) {
  if (masks.empty()) throw ContractViolation("compute_missing_rate: empty mask list");
  // Counting missing slots keeps the result bit-equal to K / (N * M).
  std::size_t missing = 0;
  for (const auto& mask : masks) missing += kModalities - available_count(mask);
  return static_cast<double>(missing) / static_cast<double>(masks.size() * kModalities);
}

std::size_t missing_quota(double rate, std::size_t n) {
  if (!(rate >= 0.0) || rate > kMaxMissingRate + 1e-12) {
    throw ContractViolation("missing rate must lie in [0, 0.7], got " + std::to_string(rate));
  }
  const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n * kModalities)));
  return std::min(k, (kModalities - 1) * n);
}

std::vector<Mask> random_missing_masks(std::size_t n, double rate, std::uint64_t seed) {
  if (n == 0) throw ContractViolation("random_missing_masks: no samples");
  const std::size_t quota = missing_quota(rate, n);
  std::vector<Mask> masks(n, Mask{0, 0, 0});
  std::vector<std::size_t> slots(n * kModalities);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, kMask, n));
  std::shuffle(slots.begin(), slots.end(), rng);
  std::size_t placed = 0;
  for (std::size_t slot : slots) {
    if (placed == quota) break;
    Mask& mask = masks[slot / kModalities];
    if (available_count(mask) == 1) continue;
    mask[slot % kModalities] = 1;
    ++placed;
  }
  return masks;
}

Dataset apply_random_missing(const Dataset& dataset, double rate, std::uint64_t seed) {
  Dataset out = dataset;
  out.masks = random_missing_masks(dataset.n, rate, seed);
  return out;
}

Dataset apply_fixed_availability(const Dataset& dataset, ModalitySet available) {
  if (available.empty()) throw ContractViolation("availability set must be nonempty");
  Mask mask{};
  for (Modality m : kAllModalities) mask[index_of(m)] = available.contains(m) ? 0 : 1;
  Dataset out = dataset;
  out.masks.assign(dataset.n, mask);
  return out;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest = {
      {"format", kManifestFormat},
      {"version", kManifestVersion},
      {"n", dataset.n},
      {"seq_len", dataset.seq_len},
      {"dims", dataset.dims},
      {"latent", dataset.latent},
      {"seed", dataset.seed},
      {"train", dataset.train},
      {"val", dataset.val},
      {"test", dataset.test},
      {"has_mask", dataset.masked()},
  };
  {
    std::ofstream out(dir / kManifestName, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / kManifestName).string());
    out << manifest.dump(2) << '\n';
  }
  for (Modality m : kAllModalities) save_tensor(dir / blob_name(m), dataset.features[index_of(m)]);
  save_tensor(dir / "labels.bin", dataset.labels);
  const auto mask_path = dir / "mask.bin";
  if (dataset.masked()) {
    std::ofstream out(mask_path, std::ios::binary | std::ios::trunc);
    for (const auto& mask : dataset.masks) {
      out.write(reinterpret_cast<const char*>(mask.data()), kModalities);
    }
    if (!out) throw std::runtime_error("cannot write " + mask_path.string());
  } else {
    std::filesystem::remove(mask_path);
  }
}

namespace {

std::vector<std::size_t> read_indices(const json& j, const char* key, std::size_t n) {
  auto v = j.at(key).get<std::vector<std::size_t>>();
  for (auto i : v) {
    if (i >= n) throw FormatError(std::string("split '") + key + "' index out of range", 0);
  }
  return v;
}

std::vector<Mask> read_masks(const std::filesystem::path& path, std::size_t n) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Mask> masks(n);
  std::uint64_t offset = 0;
  for (auto& mask : masks) {
    in.read(reinterpret_cast<char*>(mask.data()), kModalities);
    if (static_cast<std::size_t>(in.gcount()) != kModalities) {
      throw FormatError("truncated mask file", offset + static_cast<std::uint64_t>(in.gcount()));
    }
    for (std::size_t m = 0; m < kModalities; ++m) {
      if (mask[m] > 1) throw FormatError("mask entries must be 0 or 1", offset + m);
    }
    if (available_count(mask) == 0) {
      throw FormatError("mask marks every modality missing", offset);
    }
    offset += kModalities;
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes in mask file", offset);
  }
  return masks;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestName;
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed dataset manifest: ") + e.what(), e.byte);
  }

  Dataset ds;
  try {
    if (manifest.at("format").get<std::string>() != kManifestFormat) {
      throw FormatError("manifest is not a rohydr dataset", 0);
    }
    if (manifest.at("version").get<int>() != kManifestVersion) {
      throw FormatError("unsupported dataset manifest version", 0);
    }
    ds.n = manifest.at("n").get<std::size_t>();
    ds.seq_len = manifest.at("seq_len").get<std::size_t>();
    ds.dims = manifest.at("dims").get<std::array<std::size_t, kModalities>>();
    ds.latent = manifest.at("latent").get<std::size_t>();
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.train = read_indices(manifest, "train", ds.n);
    ds.val = read_indices(manifest, "val", ds.n);
    ds.test = read_indices(manifest, "test", ds.n);
    if (manifest.value("has_mask", false)) ds.masks = read_masks(dir / "mask.bin", ds.n);
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid dataset manifest: ") + e.what(), 0);
  }

  std::set<std::size_t> seen;
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (auto i : *split) {
      if (!seen.insert(i).second) throw FormatError("sample listed in more than one split", 0);
    }
  }

  for (Modality m : kAllModalities) {
    Tensor x = load_tensor(dir / blob_name(m));
    if (x.shape() != Shape{ds.n, ds.seq_len, ds.dims[index_of(m)]}) {
      throw FormatError(blob_name(m) + " has shape " + shape_str(x.shape()) +
                            ", manifest expects " +
                            shape_str({ds.n, ds.seq_len, ds.dims[index_of(m)]}),
                        12);
    }
    ds.features[index_of(m)] = x;
  }
  ds.labels = load_tensor(dir / "labels.bin");
  if (ds.labels.shape() != Shape{ds.n}) throw FormatError("labels.bin shape mismatch", 12);
  return ds;
}

}  // namespace rohydr::data
