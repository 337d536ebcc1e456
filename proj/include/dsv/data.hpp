#pragma once

// Synthetic dataset generation (2-D blobs, procedural glyphs), IDX ingestion,
// the DSVD container, and the augmentation family used by the manifold
// condition.

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dsv/error.hpp"
#include "dsv/io.hpp"
#include "dsv/rng.hpp"
#include "dsv/tensor.hpp"

namespace dsv::data {

/// Labeled sample collection. feature_shape is {D} for point data and
/// {C, H, W} for (single- or three-channel) images; image pixels live in [0,1].
struct Dataset {
  std::vector<Tensor> samples;
  std::vector<int> labels;
  Shape feature_shape;
  int classes = 0;

  std::size_t size() const { return samples.size(); }
  bool is_image() const { return feature_shape.size() == 3; }

  void validate() const {
    if (samples.size() != labels.size())
      throw Error("count-mismatch", "sample/label count mismatch");
    for (int y : labels)
      if (y < 0 || y >= classes) throw Error("bad-label", "label out of range");
    for (const auto& s : samples) {
      if (s.shape() != feature_shape)
        throw Error("shape-mismatch", "sample does not match the dataset feature shape");
      if (is_image())
        for (double v : s.data())
          if (v < 0.0 || v > 1.0) throw Error("bad-range", "image pixel outside [0,1]");
    }
  }

  /// Constant (non-differentiable) batch tensor of the given sample indices.
  Tensor batch(const std::vector<std::size_t>& idx) const {
    std::vector<Tensor> parts;
    parts.reserve(idx.size());
    for (std::size_t i : idx) parts.push_back(samples.at(i));
    return stack(parts);
  }

  Tensor batch_all() const {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return batch(idx);
  }

  std::vector<int> labels_at(const std::vector<std::size_t>& idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels.at(i));
    return out;
  }

  /// FNV-1a over labels and raw double bits; used by determinism tests.
  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    };
    for (int y : labels) mix(static_cast<std::uint64_t>(y));
    for (const auto& s : samples)
      for (double v : s.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        mix(bits);
      }
    return h;
  }
};

// ---------------------------------------------------------------------------
// generators

/// C Gaussian clusters (sigma = 1) with centers on a circle of the given
/// radius. Linearly separable for separation >= 4 at desk scale.
inline Dataset gen_blobs2d(int classes, int n_per_class, double separation, std::uint64_t seed) {
  if (classes < 2) throw Error("bad-config", "gen_blobs2d needs at least 2 classes");
  if (separation < 0) throw Error("bad-config", "separation must be non-negative");
  Rng rng(seed);
  Dataset ds;
  ds.feature_shape = {2};
  ds.classes = classes;
  for (int c = 0; c < classes; ++c) {
    const double angle = 6.283185307179586 * static_cast<double>(c) / static_cast<double>(classes);
    const double cx = separation * std::cos(angle);
    const double cy = separation * std::sin(angle);
    for (int i = 0; i < n_per_class; ++i) {
      ds.samples.push_back(Tensor::from_data({2}, {cx + rng.normal(), cy + rng.normal()}));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

namespace detail {

/// Seven-segment-style stroke template for digits 0..9 on a size x size grid.
inline std::vector<double> glyph_template(int digit, std::size_t size) {
  //  segment ids: 0=a top, 1=b top-right, 2=c bottom-right, 3=d bottom,
  //               4=e bottom-left, 5=f top-left, 6=g middle
  static const int seg_table[10][7] = {
      {1, 1, 1, 1, 1, 1, 0},  // 0
      {0, 1, 1, 0, 0, 0, 0},  // 1
      {1, 1, 0, 1, 1, 0, 1},  // 2
      {1, 1, 1, 1, 0, 0, 1},  // 3
      {0, 1, 1, 0, 0, 1, 1},  // 4
      {1, 0, 1, 1, 0, 1, 1},  // 5
      {1, 0, 1, 1, 1, 1, 1},  // 6
      {1, 1, 1, 0, 0, 0, 0},  // 7
      {1, 1, 1, 1, 1, 1, 1},  // 8
      {1, 1, 1, 1, 0, 1, 1},  // 9
  };
  std::vector<double> img(size * size, 0.0);
  const std::size_t m = size / 8;                     // outer margin
  const std::size_t t = std::max<std::size_t>(1, size / 8);  // stroke thickness
  const std::size_t x0 = m, x1 = size - 1 - m;
  const std::size_t y0 = m, y1 = size - 1 - m;
  const std::size_t ym = size / 2;
  auto hline = [&](std::size_t y) {
    for (std::size_t dy = 0; dy < t; ++dy)
      for (std::size_t x = x0; x <= x1; ++x) {
        const std::size_t yy = std::min(y + dy, size - 1);
        img[yy * size + x] = 1.0;
      }
  };
  auto vline = [&](std::size_t x, std::size_t ya, std::size_t yb) {
    for (std::size_t dx = 0; dx < t; ++dx)
      for (std::size_t y = ya; y <= yb; ++y) {
        const std::size_t xx = x + dx >= size ? size - 1 : x + dx;
        img[y * size + xx] = 1.0;
      }
  };
  const int* segs = seg_table[digit];
  if (segs[0]) hline(y0);
  if (segs[6]) hline(ym);
  if (segs[3]) hline(y1 - (t - 1));
  if (segs[5]) vline(x0, y0, ym);
  if (segs[4]) vline(x0, ym, y1);
  if (segs[1]) vline(x1 - (t - 1), y0, ym);
  if (segs[2]) vline(x1 - (t - 1), ym, y1);
  return img;
}

}  // namespace detail

/// Procedural digit-like glyphs: fixed stroke template per class plus
/// Gaussian pixel noise, clipped to [0,1]. Single channel.
inline Dataset gen_glyphs(int classes, int n_per_class, std::size_t size, double noise_sigma,
                          std::uint64_t seed) {
  if (size != 8 && size != 16 && size != 32)
    throw Error("bad-config", "glyph size must be 8, 16 or 32");
  if (classes < 1 || classes > 10) throw Error("bad-config", "glyphs support 1..10 classes");
  Rng rng(seed);
  Dataset ds;
  ds.feature_shape = {1, size, size};
  ds.classes = classes;
  for (int c = 0; c < classes; ++c) {
    const auto tmpl = detail::glyph_template(c, size);
    for (int i = 0; i < n_per_class; ++i) {
      std::vector<double> px = tmpl;
      for (double& v : px) v = std::clamp(v + noise_sigma * rng.normal(), 0.0, 1.0);
      ds.samples.push_back(Tensor::from_data(ds.feature_shape, std::move(px)));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX ingestion (the de-facto format: big-endian magic and dimensions)

namespace detail {

inline std::uint32_t read_be_u32(std::istream& is, const char* what) {
  char b[4];
  io::read_exact(is, b, 4, what);
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[0])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[3]));
}

}  // namespace detail

/// Loads a u8 image IDX file (magic 0x00000803) plus a label IDX file
/// (magic 0x00000801); pixels are scaled to [0,1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  auto imgs = io::open_in(images_path);
  if (detail::read_be_u32(imgs, "image magic") != 0x00000803u)
    throw Error("bad-magic", "bad magic in IDX image file: " + images_path);
  const std::uint32_t n = detail::read_be_u32(imgs, "image count");
  const std::uint32_t h = detail::read_be_u32(imgs, "image height");
  const std::uint32_t w = detail::read_be_u32(imgs, "image width");

  auto labs = io::open_in(labels_path);
  if (detail::read_be_u32(labs, "label magic") != 0x00000801u)
    throw Error("bad-magic", "bad magic in IDX label file: " + labels_path);
  const std::uint32_t nl = detail::read_be_u32(labs, "label count");
  if (n != nl)
    throw Error("count-mismatch", "IDX count mismatch: " + std::to_string(n) + " images vs " +
                                      std::to_string(nl) + " labels");

  Dataset ds;
  ds.feature_shape = {1, h, w};
  std::vector<char> px(static_cast<std::size_t>(h) * w);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    io::read_exact(imgs, px.data(), px.size(), "image pixels");
    std::vector<double> d(px.size());
    for (std::size_t j = 0; j < px.size(); ++j)
      d[j] = static_cast<double>(static_cast<unsigned char>(px[j])) / 255.0;
    ds.samples.push_back(Tensor::from_data(ds.feature_shape, std::move(d)));
    const int y = static_cast<int>(io::read_u8(labs, "label"));
    max_label = std::max(max_label, y);
    ds.labels.push_back(y);
  }
  ds.classes = max_label + 1;
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// DSVD container: magic "DSVD", version u32 = 1, class count u32, feature
// shape (ndim u32, dims u64), sample count u64, labels u32 each, then raw
// little-endian f64 sample data.

inline void save_dataset(const Dataset& ds, const std::string& path) {
  auto os = io::open_out(path);
  os.write("DSVD", 4);
  io::write_u32(os, 1);
  io::write_u32(os, static_cast<std::uint32_t>(ds.classes));
  io::write_u32(os, static_cast<std::uint32_t>(ds.feature_shape.size()));
  for (std::size_t d : ds.feature_shape) io::write_u64(os, d);
  io::write_u64(os, ds.samples.size());
  for (int y : ds.labels) io::write_u32(os, static_cast<std::uint32_t>(y));
  for (const auto& s : ds.samples)
    for (double v : s.data()) io::write_f64(os, v);
  if (!os) throw Error("io", "failed writing dataset: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "DSVD", "dataset");
  const std::uint32_t version = io::read_u32(is, "version");
  if (version != 1)
    throw Error("version-mismatch", "dataset version " + std::to_string(version) + ", expected 1");
  Dataset ds;
  ds.classes = static_cast<int>(io::read_u32(is, "classes"));
  const std::uint32_t ndim = io::read_u32(is, "ndim");
  ds.feature_shape.resize(ndim);
  for (auto& d : ds.feature_shape) d = io::read_u64(is, "dim");
  const std::uint64_t count = io::read_u64(is, "count");
  ds.labels.resize(count);
  for (auto& y : ds.labels) y = static_cast<int>(io::read_u32(is, "label"));
  const std::size_t numel = shape_numel(ds.feature_shape);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::vector<double> d(numel);
    for (auto& v : d) v = io::read_f64(is, "sample data");
    ds.samples.push_back(Tensor::from_data(ds.feature_shape, std::move(d)));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// augmentations

enum class AugKind { hflip, pad_crop, jitter };

/// One member of the augmentation family A, carrying its own seeded stream.
struct Augmentation {
  AugKind kind = AugKind::jitter;
  int pad = 2;          // pad_crop
  double sigma = 0.05;  // jitter
  Rng rng{0};

  static Augmentation make_hflip() { return Augmentation{AugKind::hflip, 0, 0.0, Rng(0)}; }
  static Augmentation make_pad_crop(int pad, std::uint64_t seed) {
    return Augmentation{AugKind::pad_crop, pad, 0.0, Rng(seed)};
  }
  static Augmentation make_jitter(double sigma, std::uint64_t seed) {
    return Augmentation{AugKind::jitter, 0, sigma, Rng(seed)};
  }
};

/// A concrete transform drawn from an Augmentation: Algorithm-style loops
/// draw one per iteration and apply the same function to every candidate.
struct AugSample {
  AugKind kind = AugKind::jitter;
  int dy = 0, dx = 0;        // pad_crop offset in [-pad, pad]
  double sigma = 0.0;        // jitter
  std::uint64_t noise_seed = 0;
};

inline AugSample draw_augmentation(Augmentation& a) {
  AugSample s;
  s.kind = a.kind;
  switch (a.kind) {
    case AugKind::hflip: break;
    case AugKind::pad_crop:
      s.dy = static_cast<int>(a.rng.integer(static_cast<std::uint64_t>(2 * a.pad + 1))) - a.pad;
      s.dx = static_cast<int>(a.rng.integer(static_cast<std::uint64_t>(2 * a.pad + 1))) - a.pad;
      break;
    case AugKind::jitter:
      s.sigma = a.sigma;
      s.noise_seed = a.rng.integer(1ull << 62);
      break;
  }
  return s;
}

/// Applies a drawn transform to a batch: (B, C, H, W) images or (B, D) points.
/// Differentiable w.r.t. the batch; image outputs are clipped to [0,1].
inline Tensor apply_augmentation(const Tensor& batch, const AugSample& s) {
  const bool image = batch.rank() == 4;
  switch (s.kind) {
    case AugKind::hflip:
      if (!image) throw Error("bad-augmentation", "hflip is undefined for point data");
      return hflip(batch);
    case AugKind::pad_crop:
      if (!image) throw Error("bad-augmentation", "pad_crop is undefined for point data");
      return shift2d(batch, s.dy, s.dx);
    case AugKind::jitter: {
      if (s.sigma == 0.0) return batch;
      Rng noise(s.noise_seed);
      std::vector<double> d(batch.numel());
      for (double& v : d) v = s.sigma * noise.normal();
      Tensor noisy = add(batch, Tensor::from_data(batch.shape(), std::move(d)));
      return image ? clip01(noisy) : noisy;
    }
  }
  throw Error("internal", "unreachable");
}

/// Spec'd per-sample entry point: draws from the augmentation's stream and
/// applies the transform to one sample of the dataset's feature shape.
inline Tensor augment(const Tensor& x, Augmentation& a) {
  const bool image = x.rank() == 3;
  if (!image && x.rank() != 1)
    throw Error("shape-mismatch", "augment expects a single sample");
  Shape batched{1};
  batched.insert(batched.end(), x.shape().begin(), x.shape().end());
  Tensor out = apply_augmentation(reshape(x, batched), draw_augmentation(a));
  return reshape(out, x.shape());
}

/// The default family A per data mode: images get {hflip, pad_crop(2)},
/// 2-D points get {jitter(0.05)} since flips and crops are meaningless there.
inline std::vector<Augmentation> default_family(bool image_mode, std::uint64_t seed) {
  std::vector<Augmentation> fam;
  if (image_mode) {
    fam.push_back(Augmentation::make_hflip());
    fam.push_back(Augmentation::make_pad_crop(2, seed ^ 0x9e37ULL));
  } else {
    fam.push_back(Augmentation::make_jitter(0.05, seed ^ 0x7f4aULL));
  }
  return fam;
}

}  // namespace dsv::data
