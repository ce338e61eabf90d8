#pragma once

#include "matnet/config.hpp"
#include "matnet/rng.hpp"
#include "matnet/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace matnet {

/// Unreadable, malformed, or incompatible input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images in [0,1], shape (n, c, h, w), with optional integer labels.
struct Dataset {
  TensorF images;
  std::vector<int> labels;

  Index size() const { return images.empty() ? 0 : images.dim(0); }
  Dataset subset(const std::vector<Index>& rows) const;
  Dataset head(Index n) const;
};

/// Parses an in-memory IDX image file (magic 2051, u8 payload).
TensorF parse_idx_images(const std::vector<std::uint8_t>& bytes);
/// Parses an in-memory IDX label file (magic 2049).
std::vector<int> parse_idx_labels(const std::vector<std::uint8_t>& bytes);
/// Reads a file, transparently gunzipping .gz content.
std::vector<std::uint8_t> read_file_bytes(const std::string& path);
/// Loads IDX images (and labels when `labels_path` is non-empty).
Dataset load_idx(const std::string& images_path, const std::string& labels_path = "");

/// Shuffles with `seed` and holds out `val_fraction` of the rows.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed);

/// x > 0.5. Idempotent.
TensorF binarize_fixed(const TensorF& images);
/// Bernoulli(x) per pixel.
TensorF binarize_dynamic(const TensorF& images, Rng& rng);
/// (255 x + u) / 256 with u ~ U[0,1) per sub-pixel.
TensorF dequantize(const TensorF& images, Rng& rng);
/// Training images for one epoch: dynamic binarization or dequantization
/// redrawn from a stream keyed by (seed, epoch).
TensorF epoch_view(const TensorF& images, Binarize mode, bool dequant, std::uint64_t seed, Index epoch);

struct MaskSpec {
  MaskKind kind = MaskKind::kQuadrants;
  /// Known quadrants; 0 draws 1-3 uniformly per image.
  Index q_known = 0;
  Index occluders = 3;
  Index occluder_size = 20;
};

/// (n, c, h, w) masks, 1 = known. Quadrant subsets and occluder corners are
/// uniform; occluders may overlap.
TensorF make_mask(const MaskSpec& spec, const Shape& image_shape, Rng& rng);
/// Single-image mask from a PGM file (byte > 127 = known), broadcast over
/// the batch and channels of `image_shape`.
TensorF load_mask_file(const std::string& path, const Shape& image_shape);

struct Raster {
  Index width = 0;
  Index height = 0;
  Index channels = 1;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels
};

/// Tiles images on a rows x cols grid with 1-pixel separators and writes a
/// binary PGM (1 channel) or PPM (3 channels).
void emit_grid(const TensorF& images, Index rows, Index cols, const std::string& path);
Raster read_pnm(const std::string& path);
/// Inverse of emit_grid for `count` tiles of size (c, h, w).
TensorF read_grid(const std::string& path, Index count, Index channels, Index height, Index width,
                  Index cols);

/// Binary 8x8 images: a centred cross (label 0) or a square outline
/// (label 1), each pixel flipped with probability `flip`.
Dataset two_pattern_dataset(Index n, std::uint64_t seed, double flip = 0.05);
/// The noise-free pattern for a label.
TensorF two_pattern_template(int label);

}  // namespace matnet
