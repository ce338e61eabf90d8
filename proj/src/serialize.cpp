#include "matnet/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace matnet {

namespace {

constexpr std::array<char, 4> kMagic = {'M', 'T', 'N', '1'};
constexpr std::uint32_t kMaxDim = 1u << 28;

void put_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                         static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  os.write(bytes, 4);
}

void put_u16(std::ostream& os, std::uint16_t v) {
  const char bytes[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
  os.write(bytes, 2);
}

void get_bytes(std::istream& is, char* out, std::size_t n, const char* what) {
  is.read(out, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError(std::string("truncated tensor container while reading ") + what);
  }
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  get_bytes(is, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t get_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  get_bytes(is, reinterpret_cast<char*>(b), 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

void write_tensor(std::ostream& os, const TensorF& t) {
  os.write(kMagic.data(), 4);
  const Shape& s = t.shape();
  put_u32(os, static_cast<std::uint32_t>(s.rank()));
  for (int i = 0; i < s.rank(); ++i) put_u32(os, static_cast<std::uint32_t>(s[i]));
  for (Index i = 0; i < t.size(); ++i) put_u32(os, std::bit_cast<std::uint32_t>(t[i]));
}

TensorF read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  get_bytes(is, magic.data(), 4, "magic");
  if (magic != kMagic) throw FormatError("bad tensor magic (expected MTN1)");
  const std::uint32_t rank = get_u32(is, "rank");
  if (rank < 1 || rank > 4) throw FormatError("tensor rank " + std::to_string(rank) + " not in 1-4");
  std::vector<Index> dims;
  std::uint64_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = get_u32(is, "dims");
    if (d == 0 || d > kMaxDim) throw FormatError("tensor dimension out of range");
    total *= d;
    if (total > (1ull << 32)) throw FormatError("tensor too large");
    dims.push_back(static_cast<Index>(d));
  }
  TensorF t{Shape(dims)};
  for (Index i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(get_u32(is, "payload"));
  return t;
}

void write_archive(std::ostream& os, const NamedTensors& tensors) {
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name);
    put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

NamedTensors read_archive(std::istream& is) {
  const std::uint32_t count = get_u32(is, "archive count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = get_u16(is, "name length");
    std::string name(len, '\0');
    get_bytes(is, name.data(), len, "name");
    out.emplace_back(std::move(name), read_tensor(is));
  }
  return out;
}

void save_archive(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_archive(os, tensors);
  if (!os) throw std::runtime_error("write failed: " + path);
}

NamedTensors load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_archive(is);
}

TensorF text_to_tensor(const std::string& text) {
  TensorF t{Shape{std::max<Index>(1, static_cast<Index>(text.size()))}};
  for (std::size_t i = 0; i < text.size(); ++i) {
    t[static_cast<Index>(i)] = static_cast<float>(static_cast<unsigned char>(text[i]));
  }
  if (text.empty()) t[0] = 0.0f;
  return t;
}

std::string tensor_to_text(const TensorF& t) {
  std::string s;
  for (Index i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (v == 0.0f && t.size() == 1) break;
    if (v < 0.0f || v > 255.0f || v != static_cast<float>(static_cast<int>(v))) {
      throw FormatError("text tensor holds a non-byte value");
    }
    s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

}  // namespace matnet
