#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rohydr/tensor.hpp"

namespace rohydr {

// Parameter groups of the model. Each stage of training updates a fixed
// subset of them.
enum class Group : std::uint8_t {
  kFe = 0,      // feature extractors
  kMu = 1,      // denoiser body and noise head
  kSigma = 2,   // denoiser variance head
  kUr = 3,      // unimodal reconstructors
  kFusion = 4,  // shared fusion network
  kDisc = 5,    // discriminator
  kMr = 6,      // multimodal reconstructor
  kClf = 7,     // classifier
};

inline constexpr std::array<Group, 8> kAllGroups = {
    Group::kFe,     Group::kMu,   Group::kSigma, Group::kUr,
    Group::kFusion, Group::kDisc, Group::kMr,    Group::kClf};

std::string_view group_name(Group g);
std::optional<Group> group_from_name(std::string_view name);

class GroupSet {
 public:
  constexpr GroupSet() = default;
  constexpr GroupSet(std::initializer_list<Group> groups) {
    for (Group g : groups) bits_ |= bit(g);
  }
  static constexpr GroupSet all() {
    GroupSet s;
    s.bits_ = 0xff;
    return s;
  }

  constexpr bool contains(Group g) const { return (bits_ & bit(g)) != 0; }
  constexpr GroupSet with(Group g) const {
    GroupSet s = *this;
    s.bits_ |= bit(g);
    return s;
  }
  constexpr GroupSet without(Group g) const {
    GroupSet s = *this;
    s.bits_ &= static_cast<std::uint8_t>(~bit(g));
    return s;
  }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool operator==(const GroupSet&) const = default;
  std::string str() const;

 private:
  static constexpr std::uint8_t bit(Group g) {
    return static_cast<std::uint8_t>(1u << static_cast<unsigned>(g));
  }
  std::uint8_t bits_ = 0;
};

struct Param {
  std::string name;
  Group group;
  Tensor tensor;
};

/// Owns the trainable tensors of a model, each tagged with exactly one
/// group. Membership is fixed once `freeze()` has been called.
class ParamRegistry {
 public:
  Tensor add(Group group, std::string name, Tensor tensor);
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  const std::vector<Param>& params() const { return params_; }
  std::vector<Tensor> group(Group g) const;
  const Param* find(std::string_view name) const;
  std::size_t size() const { return params_.size(); }

  // Marks exactly the tensors in `groups` as requiring gradients.
  void set_trainable(GroupSet groups);
  void zero_grad();

  // FNV-1a over the raw bytes of every tensor in the group.
  std::uint64_t checksum(Group g) const;

  // Deep copy of all values, for best-epoch snapshots.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

 private:
  std::vector<Param> params_;
  bool frozen_ = false;
};

}  // namespace rohydr
