#pragma once

#include "matnet/tensor.hpp"

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace matnet {

/// Malformed or truncated container data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One tensor record: "MTN1", u32 rank, rank x u32 dims, f32 payload, all
/// little-endian.
void write_tensor(std::ostream& os, const TensorF& t);
TensorF read_tensor(std::istream& is);

using NamedTensors = std::vector<std::pair<std::string, TensorF>>;

/// Archive: u32 count, then (u16 name length, UTF-8 name, tensor record)
/// repeated. Order is preserved.
void write_archive(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_archive(std::istream& is);

void save_archive(const std::string& path, const NamedTensors& tensors);
NamedTensors load_archive(const std::string& path);

/// Text payloads (manifests) stored as rank-1 tensors of byte values.
TensorF text_to_tensor(const std::string& text);
std::string tensor_to_text(const TensorF& t);

}  // namespace matnet
