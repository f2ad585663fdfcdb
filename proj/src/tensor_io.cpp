#include "rohydr/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace rohydr {

namespace {

constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 31;

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b.data(), 4);
}

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(b.data(), 8);
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(std::string("truncated blob while reading ") + what,
                        offset_ + static_cast<std::uint64_t>(in_.gcount()));
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    std::array<unsigned char, 4> b{};
    bytes(reinterpret_cast<char*>(b.data()), 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  double f64() {
    std::array<unsigned char, 8> b{};
    bytes(reinterpret_cast<char*>(b.data()), 8, "values");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(v);
  }

  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kBlobMagic, 4);
  put_u32(out, kBlobVersion);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) put_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  Reader r(in);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kBlobMagic, 4) != 0) {
    throw FormatError("bad magic: expected \"RHDR\"", 0);
  }
  const std::uint32_t version = r.u32("version");
  if (version != kBlobVersion) {
    throw FormatError("unsupported blob version " + std::to_string(version), 4);
  }
  const std::uint32_t rank = r.u32("rank");
  if (rank == 0 || rank > 8) {
    throw FormatError("invalid rank " + std::to_string(rank), 8);
  }
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    const std::uint64_t at = r.offset();
    e = r.u32("extent");
    if (e == 0) throw FormatError("zero extent", at);
    count *= e;
    if (count > kMaxElements) throw FormatError("blob too large", at);
  }
  std::vector<double> values(count);
  for (auto& v : values) v = r.f64();
  return Tensor::from(shape, std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace rohydr
