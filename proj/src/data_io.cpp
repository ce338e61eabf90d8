#include "matnet/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace matnet {

namespace {

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;
constexpr std::uint64_t kDataStream = 0x64617461;  // "data"
constexpr std::uint64_t kMaxIdxElements = std::uint64_t{1} << 31;

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t offset) {
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

/// Validates an IDX header and returns its dims.
std::vector<std::uint64_t> idx_header(const std::vector<std::uint8_t>& bytes, std::uint32_t magic,
                                      std::size_t rank) {
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < 4) throw DataError("IDX: file shorter than its magic number");
  const std::uint32_t got = read_be32(bytes, 0);
  if (got != magic) {
    throw DataError("IDX: bad magic " + std::to_string(got) + ", expected " + std::to_string(magic));
  }
  if (bytes.size() < header) throw DataError("IDX: truncated header");
  std::vector<std::uint64_t> dims;
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint64_t d = read_be32(bytes, 4 + 4 * i);
    if (d == 0) throw DataError("IDX: zero-sized dimension");
    if (d > kMaxIdxElements || total > kMaxIdxElements / d) {
      throw DataError("IDX: dimensions overflow the supported element count");
    }
    total *= d;
    dims.push_back(d);
  }
  const std::uint64_t payload = bytes.size() - header;
  if (payload < total) {
    throw DataError("IDX: truncated payload, expected " + std::to_string(total) + " bytes, found " +
                    std::to_string(payload));
  }
  if (payload > total) throw DataError("IDX: " + std::to_string(payload - total) + " trailing bytes");
  return dims;
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

void require_unit_range(const TensorF& images, const char* what) {
  if ((images.array() < 0.0f).any() || (images.array() > 1.0f).any() || !images.all_finite()) {
    throw DataError(std::string(what) + ": pixel values must lie in [0,1]");
  }
}

}  // namespace

Dataset Dataset::subset(const std::vector<Index>& rows) const {
  Dataset out;
  const Index inner = images.shape().inner();
  out.images = TensorF(images.shape().with_dim(0, static_cast<Index>(rows.size())));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.images.array().segment(static_cast<Index>(i) * inner, inner) =
        images.array().segment(rows[i] * inner, inner);
    if (!labels.empty()) out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

Dataset Dataset::head(Index n) const {
  std::vector<Index> rows(static_cast<std::size_t>(std::min(n, size())));
  std::iota(rows.begin(), rows.end(), Index{0});
  return subset(rows);
}

TensorF parse_idx_images(const std::vector<std::uint8_t>& bytes) {
  const auto dims = idx_header(bytes, kImageMagic, 3);
  const auto n = static_cast<Index>(dims[0]), h = static_cast<Index>(dims[1]),
             w = static_cast<Index>(dims[2]);
  TensorF out(Shape{n, 1, h, w});
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<float>(bytes[16 + static_cast<std::size_t>(i)]) / 255.0f;
  return out;
}

std::vector<int> parse_idx_labels(const std::vector<std::uint8_t>& bytes) {
  const auto dims = idx_header(bytes, kLabelMagic, 1);
  std::vector<int> out(dims[0]);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bytes[8 + i];
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw DataError("cannot open " + path);
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> buf(1 << 16);
  for (;;) {
    const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (got < 0) {
      int err = 0;
      const std::string msg = gzerror(f, &err);
      gzclose(f);
      throw DataError("read error in " + path + ": " + msg);
    }
    if (got == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + got);
  }
  gzclose(f);
  return out;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  Dataset d;
  try {
    d.images = parse_idx_images(read_file_bytes(images_path));
    if (!labels_path.empty()) {
      d.labels = parse_idx_labels(read_file_bytes(labels_path));
      if (static_cast<Index>(d.labels.size()) != d.size()) {
        throw DataError("label count " + std::to_string(d.labels.size()) + " does not match image count " +
                        std::to_string(d.size()));
      }
    }
  } catch (const DataError& e) {
    throw DataError(images_path + ": " + e.what());
  }
  return d;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_fraction, std::uint64_t seed) {
  if (val_fraction < 0 || val_fraction >= 1) throw std::invalid_argument("val_fraction must be in [0,1)");
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(seed, kDataStream);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(order.size())));
  const std::vector<Index> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  const std::vector<Index> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  return {data.subset(train), data.subset(val)};
}

TensorF binarize_fixed(const TensorF& images) {
  require_unit_range(images, "binarize");
  return TensorF(images.shape(), (images.array() > 0.5f).cast<float>());
}

TensorF binarize_dynamic(const TensorF& images, Rng& rng) {
  require_unit_range(images, "binarize");
  TensorF out(images.shape());
  for (Index i = 0; i < out.size(); ++i) {
    // Exact 0/1 pixels stay put without consuming a draw.
    const float v = images[i];
    out[i] = v <= 0.0f ? 0.0f : v >= 1.0f ? 1.0f : (rng.uniform() < v ? 1.0f : 0.0f);
  }
  return out;
}

TensorF dequantize(const TensorF& images, Rng& rng) {
  require_unit_range(images, "dequantize");
  TensorF out(images.shape());
  for (Index i = 0; i < out.size(); ++i) {
    const double level = std::round(static_cast<double>(images[i]) * 255.0);
    out[i] = static_cast<float>((level + rng.uniform()) / 256.0);
    // float rounding can land exactly on the upper edge
    if (out[i] >= static_cast<float>((level + 1.0) / 256.0)) {
      out[i] = std::nextafter(static_cast<float>((level + 1.0) / 256.0), 0.0f);
    }
  }
  return out;
}

TensorF epoch_view(const TensorF& images, Binarize mode, bool dequant, std::uint64_t seed, Index epoch) {
  Rng rng = Rng(seed, kDataStream).split(static_cast<std::uint64_t>(epoch) + 1);
  switch (mode) {
    case Binarize::kDynamic: return binarize_dynamic(images, rng);
    case Binarize::kFixed: return binarize_fixed(images);
    case Binarize::kNone: break;
  }
  return dequant ? dequantize(images, rng) : images;
}

TensorF make_mask(const MaskSpec& spec, const Shape& image_shape, Rng& rng) {
  if (image_shape.rank() != 4) throw ShapeError("make_mask: expected (n, c, h, w)");
  const Index n = image_shape[0], c = image_shape[1], h = image_shape[2], w = image_shape[3];
  TensorF mask = TensorF::constant(image_shape, 1.0f);
  auto clear = [&](Index i, Index y0, Index x0, Index hh, Index ww, float value) {
    for (Index ch = 0; ch < c; ++ch) {
      for (Index y = y0; y < y0 + hh; ++y) {
        for (Index x = x0; x < x0 + ww; ++x) mask.at(i, ch, y, x) = value;
      }
    }
  };
  switch (spec.kind) {
    case MaskKind::kQuadrants: {
      if (h % 2 != 0 || w % 2 != 0) throw DataError("quadrant masks need even image dims");
      if (spec.q_known < 0 || spec.q_known > 3) throw DataError("q_known must be 1, 2, 3 (or 0 for random)");
      mask.array().setZero();
      for (Index i = 0; i < n; ++i) {
        const Index q = spec.q_known > 0 ? spec.q_known : 1 + static_cast<Index>(rng.below(3));
        std::array<Index, 4> quads{0, 1, 2, 3};
        for (std::size_t k = 3; k > 0; --k) std::swap(quads[k], quads[rng.below(k + 1)]);
        for (Index k = 0; k < q; ++k) {
          const Index qy = quads[static_cast<std::size_t>(k)] / 2, qx = quads[static_cast<std::size_t>(k)] % 2;
          clear(i, qy * h / 2, qx * w / 2, h / 2, w / 2, 1.0f);
        }
      }
      break;
    }
    case MaskKind::kOccluders: {
      const Index s = spec.occluder_size;
      if (h < s || w < s) {
        throw DataError("occluder larger than image: " + std::to_string(s) + "x" + std::to_string(s) +
                        " occluders need images of at least that size");
      }
      for (Index i = 0; i < n; ++i) {
        for (Index k = 0; k < spec.occluders; ++k) {
          const auto y = static_cast<Index>(rng.below(static_cast<std::uint64_t>(h - s + 1)));
          const auto x = static_cast<Index>(rng.below(static_cast<std::uint64_t>(w - s + 1)));
          clear(i, y, x, s, s, 0.0f);
        }
      }
      break;
    }
    case MaskKind::kNone: break;
  }
  return mask;
}

TensorF load_mask_file(const std::string& path, const Shape& image_shape) {
  const Raster r = read_pnm(path);
  const Index n = image_shape[0], c = image_shape[1], h = image_shape[2], w = image_shape[3];
  if (r.height != h || r.width != w || r.channels != 1) {
    throw DataError(path + ": mask must be a " + std::to_string(w) + "x" + std::to_string(h) + " PGM");
  }
  TensorF mask(image_shape);
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          mask.at(i, ch, y, x) = r.pixels[static_cast<std::size_t>(y * w + x)] > 127 ? 1.0f : 0.0f;
        }
      }
    }
  }
  return mask;
}

void emit_grid(const TensorF& images, Index rows, Index cols, const std::string& path) {
  if (images.shape().rank() != 4) throw ShapeError("emit_grid: expected (n, c, h, w)");
  const Index n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (c != 1 && c != 3) throw ShapeError("emit_grid: images need 1 or 3 channels");
  if (rows * cols < n) {
    throw std::invalid_argument("emit_grid: a " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " layout cannot hold " + std::to_string(n) + " images");
  }
  require_unit_range(images, "emit_grid");
  const Index width = cols * (w + 1), height = rows * (h + 1);
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width * height * c), 128);
  for (Index i = 0; i < n; ++i) {
    const Index oy = (i / cols) * (h + 1), ox = (i % cols) * (w + 1);
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        for (Index ch = 0; ch < c; ++ch) {
          pixels[static_cast<std::size_t>(((oy + y) * width + ox + x) * c + ch)] = to_byte(images.at(i, ch, y, x));
        }
      }
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << (c == 1 ? "P5" : "P6") << "\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!os) throw std::runtime_error("write failed for " + path);
}

Raster read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  auto token = [&]() {
    std::string t;
    char ch = 0;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (!std::isspace(static_cast<unsigned char>(ch))) {
        t += ch;
        break;
      }
    }
    while (is.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) t += ch;
    return t;
  };
  Raster r;
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw DataError(path + ": not a binary PGM/PPM");
  r.channels = magic == "P5" ? 1 : 3;
  try {
    r.width = std::stol(token());
    r.height = std::stol(token());
    if (std::stol(token()) != 255) throw DataError(path + ": only 8-bit images are supported");
  } catch (const std::logic_error&) {
    throw DataError(path + ": malformed header");
  }
  if (r.width <= 0 || r.height <= 0) throw DataError(path + ": bad dimensions");
  r.pixels.resize(static_cast<std::size_t>(r.width * r.height * r.channels));
  is.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(r.pixels.size())) throw DataError(path + ": truncated pixel data");
  return r;
}

TensorF read_grid(const std::string& path, Index count, Index channels, Index height, Index width, Index cols) {
  const Raster r = read_pnm(path);
  if (r.channels != channels) throw DataError(path + ": channel count mismatch");
  TensorF out(Shape{count, channels, height, width});
  for (Index i = 0; i < count; ++i) {
    const Index oy = (i / cols) * (height + 1), ox = (i % cols) * (width + 1);
    if (oy + height > r.height || ox + width > r.width) throw DataError(path + ": grid smaller than expected");
    for (Index y = 0; y < height; ++y) {
      for (Index x = 0; x < width; ++x) {
        for (Index ch = 0; ch < channels; ++ch) {
          out.at(i, ch, y, x) =
              static_cast<float>(r.pixels[static_cast<std::size_t>(((oy + y) * r.width + ox + x) * channels + ch)]) / 255.0f;
        }
      }
    }
  }
  return out;
}

TensorF two_pattern_template(int label) {
  TensorF t(Shape{1, 1, 8, 8});
  for (Index y = 0; y < 8; ++y) {
    for (Index x = 0; x < 8; ++x) {
      const bool on = label == 0 ? (y == 3 || y == 4 || x == 3 || x == 4)
                                 : ((y == 1 || y == 6) && x >= 1 && x <= 6) || ((x == 1 || x == 6) && y >= 1 && y <= 6);
      t.at(0, 0, y, x) = on ? 1.0f : 0.0f;
    }
  }
  return t;
}

Dataset two_pattern_dataset(Index n, std::uint64_t seed, double flip) {
  Rng rng(seed, kDataStream + 1);
  const TensorF templates[2] = {two_pattern_template(0), two_pattern_template(1)};
  Dataset d;
  d.images = TensorF(Shape{n, 1, 8, 8});
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    d.labels.push_back(label);
    for (Index p = 0; p < 64; ++p) {
      const float v = templates[label][p];
      d.images[i * 64 + p] = rng.uniform() < flip ? 1.0f - v : v;
    }
  }
  return d;
}

}  // namespace matnet
