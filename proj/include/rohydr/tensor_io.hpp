#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "rohydr/tensor.hpp"

namespace rohydr {

// Malformed or truncated binary/manifest input. `offset` is the byte
// position where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

inline constexpr char kBlobMagic[4] = {'R', 'H', 'D', 'R'};
inline constexpr std::uint32_t kBlobVersion = 1;

// Blob layout: "RHDR", u32 version, u32 rank, u32 extent per axis, then
// row-major little-endian IEEE-754 f64 values.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace rohydr
