#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "dsv/data.hpp"
#include "testing_util.hpp"

using namespace dsv;
using Catch::Approx;

namespace {
std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("blobs2d basic counts and determinism") {
  auto ds = data::gen_blobs2d(2, 1, 6.0, 0);
  CHECK(ds.size() == 2);
  CHECK(ds.feature_shape == Shape{2});
  auto again = data::gen_blobs2d(2, 1, 6.0, 0);
  CHECK(ds.content_hash() == again.content_hash());
  auto other = data::gen_blobs2d(2, 1, 6.0, 1);
  CHECK(ds.content_hash() != other.content_hash());
}

TEST_CASE("glyphs: zero noise means identical samples per class") {
  auto ds = data::gen_glyphs(3, 4, 16, 0.0, 42);
  ds.validate();
  for (int c = 0; c < 3; ++c) {
    const Tensor* first = nullptr;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.labels[i] != c) continue;
      if (!first) {
        first = &ds.samples[i];
        continue;
      }
      CHECK(ds.samples[i].data() == first->data());
    }
  }
  // distinct classes have distinct templates
  CHECK(ds.samples[0].data() != ds.samples[4].data());
}

TEST_CASE("glyphs: fixed seed reproduces the dataset hash") {
  auto a = data::gen_glyphs(3, 10, 16, 0.1, 7);
  auto b = data::gen_glyphs(3, 10, 16, 0.1, 7);
  CHECK(a.content_hash() == b.content_hash());
  a.validate();
}

TEST_CASE("glyph preconditions") {
  CHECK_THROWS_AS(data::gen_glyphs(3, 1, 9, 0.1, 0), Error);
  CHECK_THROWS_AS(data::gen_glyphs(11, 1, 16, 0.1, 0), Error);
}

TEST_CASE("idx loader round-trips a fixture and validates errors") {
  const std::string img_path = temp_path("dsv_test.idx3");
  const std::string lab_path = temp_path("dsv_test.idx1");

  // write a tiny 4-image 3x2 fixture in IDX format (big-endian)
  {
    std::ofstream os(img_path, std::ios::binary);
    auto be32 = [&](std::uint32_t v) {
      char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                   static_cast<char>(v)};
      os.write(b, 4);
    };
    be32(0x00000803);
    be32(4);
    be32(3);
    be32(2);
    for (int i = 0; i < 4 * 3 * 2; ++i) os.put(static_cast<char>(i * 10));
  }
  {
    std::ofstream os(lab_path, std::ios::binary);
    auto be32 = [&](std::uint32_t v) {
      char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                   static_cast<char>(v)};
      os.write(b, 4);
    };
    be32(0x00000801);
    be32(4);
    for (int y : {0, 1, 1, 2}) os.put(static_cast<char>(y));
  }

  auto ds = data::load_idx(img_path, lab_path);
  CHECK(ds.size() == 4);
  CHECK(ds.feature_shape == Shape{1, 3, 2});
  CHECK(ds.classes == 3);
  CHECK(ds.samples[0].data()[1] == Approx(10.0 / 255.0));

  SECTION("label magic on image path reports bad magic") {
    try {
      data::load_idx(lab_path, lab_path);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == "bad-magic");
    }
  }
  SECTION("count mismatch is rejected") {
    const std::string lab2 = temp_path("dsv_test2.idx1");
    std::ofstream os(lab2, std::ios::binary);
    const char hdr[8] = {0, 0, 8, 1, 0, 0, 0, 2};
    os.write(hdr, 8);
    os.put(0);
    os.put(1);
    os.close();
    try {
      data::load_idx(img_path, lab2);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == "count-mismatch");
    }
    std::remove(lab2.c_str());
  }
  std::remove(img_path.c_str());
  std::remove(lab_path.c_str());
}

TEST_CASE("dataset container round-trips bit-exactly") {
  auto ds = data::gen_glyphs(2, 3, 8, 0.2, 5);
  const std::string path = temp_path("dsv_test.dsvd");
  data::save_dataset(ds, path);
  auto loaded = data::load_dataset(path);
  CHECK(loaded.content_hash() == ds.content_hash());
  CHECK(loaded.classes == ds.classes);
  CHECK(loaded.feature_shape == ds.feature_shape);
  data::save_dataset(loaded, path + ".2");
  CHECK(io::read_text(path) == io::read_text(path + ".2"));
  std::remove(path.c_str());
  std::remove((path + ".2").c_str());
}

TEST_CASE("augmentations preserve shape, labels untouched by construction") {
  auto ds = data::gen_glyphs(2, 2, 16, 0.1, 3);
  auto fam = data::default_family(true, 11);
  REQUIRE(fam.size() == 2);
  for (auto& aug : fam) {
    Tensor out = data::augment(ds.samples[0], aug);
    CHECK(out.shape() == ds.samples[0].shape());
    for (double v : out.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("hflip on a sample is an involution") {
  auto ds = data::gen_glyphs(2, 1, 16, 0.05, 9);
  auto a = data::Augmentation::make_hflip();
  Tensor once = data::augment(ds.samples[0], a);
  Tensor twice = data::augment(once, a);
  CHECK(twice.data() == ds.samples[0].data());
}

TEST_CASE("jitter with sigma 0 is the identity") {
  auto ds = data::gen_blobs2d(2, 2, 5.0, 1);
  auto a = data::Augmentation::make_jitter(0.0, 4);
  Tensor out = data::augment(ds.samples[1], a);
  CHECK(out.data() == ds.samples[1].data());
}

TEST_CASE("pad_crop keeps the 16x16 shape and rejects point data") {
  auto ds = data::gen_glyphs(2, 1, 16, 0.0, 2);
  auto a = data::Augmentation::make_pad_crop(2, 6);
  Tensor out = data::augment(ds.samples[0], a);
  CHECK(out.shape() == Shape{1, 16, 16});

  auto pts = data::gen_blobs2d(2, 1, 5.0, 3);
  CHECK_THROWS_AS(data::augment(pts.samples[0], a), Error);
}

TEST_CASE("augmentations are differentiable w.r.t. the input") {
  auto ds = data::gen_glyphs(2, 1, 16, 0.1, 8);
  Tensor x = ds.samples[0].with_grad();
  data::AugSample crop{data::AugKind::pad_crop, 1, -2, 0.0, 0};
  Shape batched{1, 1, 16, 16};
  Tensor out = data::apply_augmentation(reshape(x, batched), crop);
  auto g = grad(sum(out), {x});
  CHECK(g[0].shape() == x.shape());
  double total = 0;
  for (double v : g[0].data()) total += v;
  CHECK(total > 0);  // most pixels survive the shift
}
