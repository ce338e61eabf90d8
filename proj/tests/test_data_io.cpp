#include <doctest.h>

#include "matnet/data_io.hpp"

#include <zlib.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace matnet;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w, std::uint32_t magic = 2051) {
  std::vector<std::uint8_t> out;
  for (std::uint32_t v : {magic, n, h, w}) {
    const auto b = be32(v);
    out.insert(out.end(), b.begin(), b.end());
  }
  for (std::uint32_t i = 0; i < n * h * w; ++i) out.push_back(static_cast<std::uint8_t>(i * 37));
  return out;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("matnet_io_" + std::to_string(::getpid()) + "_" + name);
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  os << bytes;
}

}  // namespace

TEST_CASE("idx images parse to unit floats") {
  const TensorF t = parse_idx_images(idx_images(2, 3, 4));
  CHECK(t.shape() == Shape{2, 1, 3, 4});
  CHECK(t[0] == 0.0f);
  CHECK(t[1] == doctest::Approx(37.0 / 255.0));
  std::vector<std::uint8_t> bright = idx_images(1, 1, 1);
  bright.back() = 255;
  CHECK(parse_idx_images(bright)[0] == 1.0f);
}

TEST_CASE("idx labels parse") {
  std::vector<std::uint8_t> bytes = be32(2049);
  const auto n = be32(3);
  bytes.insert(bytes.end(), n.begin(), n.end());
  bytes.insert(bytes.end(), {7, 0, 9});
  CHECK(parse_idx_labels(bytes) == std::vector<int>{7, 0, 9});
}

TEST_CASE("malformed idx files are rejected") {
  CHECK_THROWS_AS(parse_idx_images({}), DataError);
  CHECK_THROWS_AS(parse_idx_images({0, 0, 8}), DataError);
  CHECK_THROWS_AS(parse_idx_images(idx_images(1, 2, 2, 2049)), DataError);  // label magic
  CHECK_THROWS_AS(parse_idx_images(idx_images(1, 2, 2, 2052)), DataError);

  std::vector<std::uint8_t> header_only = idx_images(1, 2, 2);
  header_only.resize(10);
  CHECK_THROWS_AS(parse_idx_images(header_only), DataError);

  std::vector<std::uint8_t> short_payload = idx_images(2, 2, 2);
  short_payload.pop_back();
  CHECK_THROWS_WITH_AS(parse_idx_images(short_payload), doctest::Contains("truncated"), DataError);

  std::vector<std::uint8_t> trailing = idx_images(1, 2, 2);
  trailing.push_back(0);
  CHECK_THROWS_WITH_AS(parse_idx_images(trailing), doctest::Contains("trailing"), DataError);

  CHECK_THROWS_AS(parse_idx_images(idx_images(0, 2, 2)), DataError);

  std::vector<std::uint8_t> huge = be32(2051);
  for (std::uint32_t d : {0xFFFFFFFFu, 0xFFFFFFFFu, 0xFFFFFFFFu}) {
    const auto b = be32(d);
    huge.insert(huge.end(), b.begin(), b.end());
  }
  CHECK_THROWS_WITH_AS(parse_idx_images(huge), doctest::Contains("overflow"), DataError);

  std::vector<std::uint8_t> labels = be32(2049);
  const auto n = be32(4);
  labels.insert(labels.end(), n.begin(), n.end());
  labels.insert(labels.end(), {1, 2});
  CHECK_THROWS_AS(parse_idx_labels(labels), DataError);
}

TEST_CASE("idx files load through gzip and checks label counts") {
  const std::vector<std::uint8_t> raw = idx_images(3, 2, 2);
  const fs::path gz = temp_path("imgs.gz"), plain = temp_path("imgs"), lab = temp_path("labels");
  {
    gzFile f = gzopen(gz.c_str(), "wb");
    gzwrite(f, raw.data(), static_cast<unsigned>(raw.size()));
    gzclose(f);
  }
  write_bytes(plain, std::string(raw.begin(), raw.end()));
  std::vector<std::uint8_t> labels = be32(2049);
  const auto two = be32(2);
  labels.insert(labels.end(), two.begin(), two.end());
  labels.insert(labels.end(), {1, 2});
  write_bytes(lab, std::string(labels.begin(), labels.end()));

  const Dataset a = load_idx(gz.string()), b = load_idx(plain.string());
  CHECK((a.images.array() == b.images.array()).all());
  CHECK(a.size() == 3);
  CHECK_THROWS_WITH_AS(load_idx(plain.string(), lab.string()), doctest::Contains("label count"), DataError);
  CHECK_THROWS_AS(load_idx(temp_path("missing").string()), DataError);
  for (const auto& p : {gz, plain, lab}) fs::remove(p);
}

TEST_CASE("the bundled digit subset loads") {
  const fs::path dir = fs::path(MATNET_SOURCE_DIR) / "data";
  const Dataset d = load_idx((dir / "mnist5k-images-idx3-ubyte.gz").string(),
                             (dir / "mnist5k-labels-idx1-ubyte.gz").string());
  CHECK(d.images.shape() == Shape{5000, 1, 28, 28});
  CHECK(d.labels.size() == 5000);
  CHECK(d.images.array().maxCoeff() == 1.0f);
  CHECK(d.images.array().minCoeff() == 0.0f);
}

TEST_CASE("split is a seeded partition") {
  Dataset d;
  d.images = TensorF(Shape{10, 1, 1, 1});
  for (Index i = 0; i < 10; ++i) {
    d.images[i] = static_cast<float>(i) / 10.0f;
    d.labels.push_back(static_cast<int>(i));
  }
  const auto [train, val] = split_dataset(d, 0.3, 5);
  CHECK(train.size() == 7);
  CHECK(val.size() == 3);
  std::set<int> seen(train.labels.begin(), train.labels.end());
  seen.insert(val.labels.begin(), val.labels.end());
  CHECK(seen.size() == 10);
  for (Index i = 0; i < 3; ++i) CHECK(val.images[i] == doctest::Approx(val.labels[i] / 10.0));
  const auto again = split_dataset(d, 0.3, 5);
  CHECK(again.second.labels == val.labels);
}

TEST_CASE("binarization") {
  const TensorF x = TensorF::from(Shape{1, 1, 1, 4}, {0.0f, 0.5f, 0.51f, 1.0f});
  const TensorF fixed = binarize_fixed(x);
  CHECK(fixed[1] == 0.0f);
  CHECK(fixed[2] == 1.0f);
  CHECK((binarize_fixed(fixed).array() == fixed.array()).all());
  CHECK_THROWS_AS(binarize_fixed(TensorF::from(Shape{1}, {1.5f})), DataError);

  const Index n = 40000;
  TensorF grey(Shape{n});
  grey.array() = 0.3f;
  Rng rng(4);
  const TensorF b = binarize_dynamic(grey, rng);
  const double mean = b.array().cast<double>().mean();
  CHECK(std::abs(mean - 0.3) < 4 * std::sqrt(0.3 * 0.7 / n));
  CHECK(((b.array() == 0.0f) || (b.array() == 1.0f)).all());
  const TensorF ends = binarize_dynamic(TensorF::from(Shape{2}, {0.0f, 1.0f}), rng);
  CHECK(ends[0] == 0.0f);
  CHECK(ends[1] == 1.0f);
}

TEST_CASE("dequantized pixels stay inside their bin and fill it uniformly") {
  const Index n = 20000;
  TensorF x(Shape{n});
  for (Index i = 0; i < n; ++i) x[i] = static_cast<float>(i % 256) / 255.0f;
  Rng rng(8);
  const TensorF d = dequantize(x, rng);
  double offset = 0;
  for (Index i = 0; i < n; ++i) {
    const double level = static_cast<double>(i % 256);
    CHECK_MESSAGE(d[i] >= level / 256.0, i);
    CHECK_MESSAGE(d[i] < (level + 1) / 256.0, i);
    offset += d[i] * 256.0 - level;
  }
  // U[0,1) offsets: mean 1/2, sd sqrt(1/12)
  CHECK(std::abs(offset / n - 0.5) < 4 * std::sqrt(1.0 / 12.0 / n));
}

TEST_CASE("epoch views are keyed by seed and epoch") {
  TensorF x(Shape{1, 1, 4, 4});
  x.array() = 0.5f;
  const TensorF a = epoch_view(x, Binarize::kDynamic, false, 3, 0);
  CHECK((a.array() == epoch_view(x, Binarize::kDynamic, false, 3, 0).array()).all());
  CHECK_FALSE((a.array() == epoch_view(x, Binarize::kDynamic, false, 3, 1).array()).all());
  CHECK((epoch_view(x, Binarize::kNone, false, 3, 0).array() == x.array()).all());
}

TEST_CASE("quadrant masks") {
  Rng rng(6);
  for (Index q : {1, 2, 3}) {
    MaskSpec spec;
    spec.q_known = q;
    const TensorF m = make_mask(spec, Shape{50, 1, 28, 28}, rng);
    for (Index i = 0; i < 50; ++i) {
      double known = 0;
      for (Index qy = 0; qy < 2; ++qy) {
        for (Index qx = 0; qx < 2; ++qx) {
          const float v = m.at(i, 0, qy * 14, qx * 14);
          // each quadrant is constant
          for (Index y = 0; y < 14; ++y) {
            for (Index x = 0; x < 14; ++x) REQUIRE(m.at(i, 0, qy * 14 + y, qx * 14 + x) == v);
          }
          known += v;
        }
      }
      CHECK(known == q);
    }
  }
  MaskSpec three;
  three.q_known = 3;
  const TensorF m3 = make_mask(three, Shape{200, 1, 28, 28}, rng);
  CHECK(1.0 - m3.array().cast<double>().mean() == doctest::Approx(0.25));
}

TEST_CASE("quadrant subsets are uniform") {
  // Chi-square over the 6 two-of-four subsets, 5 degrees of freedom.
  const Index n = 6000;
  MaskSpec spec;
  spec.q_known = 2;
  Rng rng(12);
  const TensorF m = make_mask(spec, Shape{n, 1, 2, 2}, rng);
  std::map<int, int> counts;
  for (Index i = 0; i < n; ++i) {
    int code = 0;
    for (Index j = 0; j < 4; ++j) code |= (m[i * 4 + j] != 0.0f) << j;
    ++counts[code];
  }
  CHECK(counts.size() == 6);
  double chi2 = 0;
  const double expected = static_cast<double>(n) / 6.0;
  for (const auto& [code, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 20.5);  // p = 0.001

  MaskSpec random;
  const TensorF r = make_mask(random, Shape{n, 1, 2, 2}, rng);
  std::map<int, int> known;
  for (Index i = 0; i < n; ++i) ++known[static_cast<int>(r.array().segment(i * 4, 4).sum())];
  CHECK(known.size() == 3);
  for (int q : {1, 2, 3}) CHECK(std::abs(known[q] - n / 3.0) < 4 * std::sqrt(n * (1.0 / 3) * (2.0 / 3)));
}

TEST_CASE("occluder masks") {
  MaskSpec spec;
  spec.kind = MaskKind::kOccluders;
  spec.occluders = 1;
  spec.occluder_size = 5;
  Rng rng(2);
  const TensorF m = make_mask(spec, Shape{30, 2, 12, 12}, rng);
  for (Index i = 0; i < 30; ++i) {
    CHECK(m.array().segment(i * 288, 144).sum() == 144 - 25);
    CHECK((m.array().segment(i * 288, 144) == m.array().segment(i * 288 + 144, 144)).all());
  }
  spec.occluder_size = 13;
  CHECK_THROWS_WITH_AS(make_mask(spec, Shape{1, 1, 12, 12}, rng), doctest::Contains("larger than image"), DataError);

  // Corners are uniform: every placement is reachable.
  spec.occluder_size = 11;
  std::set<std::pair<int, int>> corners;
  const TensorF many = make_mask(spec, Shape{400, 1, 12, 12}, rng);
  for (Index i = 0; i < 400; ++i) {
    for (Index y = 0; y < 2; ++y) {
      for (Index x = 0; x < 2; ++x) {
        if (many.at(i, 0, y, x) == 0.0f && (y == 0 || many.at(i, 0, y - 1, x) != 0.0f) &&
            (x == 0 || many.at(i, 0, y, x - 1) != 0.0f)) {
          corners.insert({static_cast<int>(y), static_cast<int>(x)});
        }
      }
    }
  }
  CHECK(corners.size() == 4);
}

TEST_CASE("pgm grid round trip") {
  Rng rng(9);
  const TensorF images = rng.uniform_tensor<float>(Shape{5, 1, 6, 7});
  const fs::path path = temp_path("grid.pgm");
  emit_grid(images, 2, 3, path.string());
  const Raster r = read_pnm(path.string());
  CHECK(r.width == 3 * 8);
  CHECK(r.height == 2 * 7);
  const TensorF back = read_grid(path.string(), 5, 1, 6, 7, 3);
  CHECK((back.array() - images.array()).abs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);

  const TensorF colour = rng.uniform_tensor<float>(Shape{2, 3, 4, 4});
  emit_grid(colour, 1, 2, path.string());
  CHECK(read_pnm(path.string()).channels == 3);
  CHECK((read_grid(path.string(), 2, 3, 4, 4, 2).array() - colour.array()).abs().maxCoeff() <= 1.0f / 255.0f);

  CHECK_THROWS(emit_grid(images, 1, 2, path.string()));
  fs::remove(path);
}

TEST_CASE("malformed pnm files are rejected") {
  const fs::path path = temp_path("bad.pgm");
  for (const std::string body : {std::string("P2\n2 2\n255\n0 0 0 0"), std::string("P5\n2 x\n255\n"),
                                 std::string("P5\n2 2\n65535\n"), std::string("P5\n2 2\n255\n\x01\x02"),
                                 std::string("P5\n0 2\n255\n")}) {
    write_bytes(path, body);
    CHECK_THROWS_AS(read_pnm(path.string()), DataError);
  }
  write_bytes(path, "P5\n# comment\n2 1\n255\n\x10\xF0");
  const Raster r = read_pnm(path.string());
  CHECK(r.pixels == std::vector<std::uint8_t>{0x10, 0xF0});
  fs::remove(path);
}

TEST_CASE("mask files broadcast over the batch") {
  const fs::path path = temp_path("mask.pgm");
  write_bytes(path, std::string("P5\n2 2\n255\n") + std::string("\xFF\x00\x80\x7F", 4));
  const TensorF m = load_mask_file(path.string(), Shape{2, 1, 2, 2});
  CHECK(m.at(1, 0, 0, 0) == 1.0f);
  CHECK(m.at(1, 0, 0, 1) == 0.0f);
  CHECK(m.at(0, 0, 1, 0) == 1.0f);
  CHECK(m.at(0, 0, 1, 1) == 0.0f);
  CHECK_THROWS_AS(load_mask_file(path.string(), Shape{1, 1, 3, 3}), DataError);
  fs::remove(path);
}

TEST_CASE("two-pattern dataset") {
  const TensorF cross = two_pattern_template(0), square = two_pattern_template(1);
  CHECK(cross.array().sum() == 28);
  CHECK(square.array().sum() == 20);
  const Dataset d = two_pattern_dataset(4000, 1, 0.05);
  CHECK(d.labels[0] == 0);
  CHECK(d.labels[1] == 1);
  Index flips = 0;
  for (Index i = 0; i < d.size(); ++i) {
    const TensorF& t = d.labels[static_cast<std::size_t>(i)] == 0 ? cross : square;
    flips += (d.images.array().segment(i * 64, 64) != t.array()).count();
  }
  const double total = 4000.0 * 64;
  CHECK(std::abs(flips / total - 0.05) < 4 * std::sqrt(0.05 * 0.95 / total));
  const Dataset same = two_pattern_dataset(4000, 1, 0.05);
  CHECK((same.images.array() == d.images.array()).all());
  CHECK_FALSE((two_pattern_dataset(4000, 2, 0.05).images.array() == d.images.array()).all());
}

TEST_CASE("config parsing") {
  const RunConfig c = RunConfig::parse("# comment\nscales = 14,7\nkind=conditional\nlearning_rate=1e-3 # trailing\n");
  CHECK(c.model.scales == std::vector<Index>{14, 7});
  CHECK(c.model.modules == std::vector<Index>{2, 2});
  CHECK(c.model.kind == NetKind::kConditional);
  CHECK(c.train.learning_rate == 1e-3);
  CHECK_NOTHROW(c.validate());

  CHECK_THROWS_WITH_AS(RunConfig::parse("scales=4\nbogus=1\n"), doctest::Contains("bogus"), ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::parse("kind=conditional\n"), doctest::Contains("scales"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("scales=4\nepochs=ten\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("scales=4\nepochs=3.5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("scales=4\nprior=fancy\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("scales=4\nregularizer=maybe\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("scales\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("scales=14,5\n").validate(), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("scales=14,7\nmodules=1\n").validate(), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("scales=14,7\nprior=mixture\nkind=conditional\n").validate(), ConfigError);
  CHECK_THROWS_AS(RunConfig::load(temp_path("nope.cfg").string()), ConfigError);
}

TEST_CASE("canonical config round trip") {
  RunConfig c = RunConfig::parse("scales=16,8,4\nprior=mixture\nmixture_k=3\nseed=99\nlambda_q=0.125\nmask=occluders\n");
  const std::string text = c.canonical();
  const RunConfig back = RunConfig::parse(text, RunConfig::keys());
  CHECK(back.canonical() == text);
  CHECK(back.model.mixture_k == 3);
  CHECK(back.train.seed == 99);
  CHECK(back.train.lambda_q == 0.125);
  CHECK(back.train.mask == MaskKind::kOccluders);
  std::size_t lines = 0;
  for (char ch : text) lines += ch == '\n';
  CHECK(lines == RunConfig::keys().size());
}
