#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rohydr/tensor.hpp"

namespace rohydr::data {

inline constexpr std::size_t kModalities = 3;

enum class Modality : std::uint8_t { kAudio = 0, kText = 1, kVision = 2 };

inline constexpr std::array<Modality, kModalities> kAllModalities = {
    Modality::kAudio, Modality::kText, Modality::kVision};

char modality_letter(Modality m);
inline std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }

// Per-sample missing indicators; 1 means the modality is missing.
using Mask = std::array<std::uint8_t, kModalities>;

std::size_t available_count(const Mask& mask);

/// Subset of {a, t, v}.
class ModalitySet {
 public:
  ModalitySet() = default;
  ModalitySet(std::initializer_list<Modality> ms) {
    for (Modality m : ms) bits_ |= static_cast<std::uint8_t>(1u << index_of(m));
  }
  // Accepts "a,t", "at", "a+t" or "all"/"atv".
  static ModalitySet parse(const std::string& text);
  static ModalitySet full() { return ModalitySet{Modality::kAudio, Modality::kText, Modality::kVision}; }

  bool contains(Modality m) const { return (bits_ >> index_of(m)) & 1u; }
  bool empty() const { return bits_ == 0; }
  std::size_t size() const;
  std::string str() const;  // e.g. "a+t"

  // The seven nonempty subsets in the order {a}, {t}, {v}, {a,t}, {a,v},
  // {t,v}, {a,t,v}.
  static std::vector<ModalitySet> all_nonempty();

 private:
  std::uint8_t bits_ = 0;
};

struct DatasetSpec {
  std::size_t n = 2000;
  std::size_t seq_len = 8;
  std::array<std::size_t, kModalities> dims = {16, 32, 16};
  std::size_t latent = 8;
  std::array<double, kModalities> noise = {2.4, 3.0, 2.4};
  std::uint64_t seed = 1;
  double train_fraction = 0.70;
  double val_fraction = 0.15;
  double test_fraction = 0.15;

  void validate() const;
};

/// Multimodal samples with labels, a train/val/test partition and an
/// optional fixed missing mask per sample.
class Dataset {
 public:
  std::size_t n = 0;
  std::size_t seq_len = 0;
  std::array<std::size_t, kModalities> dims{};
  std::size_t latent = 0;
  std::uint64_t seed = 0;

  std::array<Tensor, kModalities> features;  // [N, L, d_m]
  Tensor labels;                             // [N]
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::vector<Mask> masks;  // empty means every modality is available

  bool masked() const { return !masks.empty(); }
  Mask mask(std::size_t i) const;

  // Every read of raw modality data goes through here so that inference
  // paths can be audited (see InferenceGuard).
  std::span<const double> row(Modality m, std::size_t i) const;
  double label(std::size_t i) const { return labels[i]; }
};

/// While alive on the current thread, reading a withheld (masked) modality
/// row of `dataset` throws ContractViolation.
class InferenceGuard {
 public:
  explicit InferenceGuard(const Dataset& dataset);
  ~InferenceGuard();
  InferenceGuard(const InferenceGuard&) = delete;
  InferenceGuard& operator=(const InferenceGuard&) = delete;

 private:
  const Dataset* previous_;
};

// Thread-local read counters used by tests and the acceptance suite.
struct AccessStats {
  std::uint64_t reads = 0;
  std::uint64_t guarded_reads = 0;
};
AccessStats& access_stats();

Dataset generate_synthetic(const DatasetSpec& spec);

double compute_missing_rate(const std::vector<Mask>& masks);

// Largest accepted target rate. Rates above 2/3 saturate at one available
// modality per sample.
inline constexpr double kMaxMissingRate = 0.7;

// Number of missing slots the random protocol assigns for `n` samples.
std::size_t missing_quota(double rate, std::size_t n);

std::vector<Mask> random_missing_masks(std::size_t n, double rate, std::uint64_t seed);
Dataset apply_random_missing(const Dataset& dataset, double rate, std::uint64_t seed);
Dataset apply_fixed_availability(const Dataset& dataset, ModalitySet available);

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace rohydr::data
