#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dsv/nn.hpp"
#include "testing_util.hpp"

using namespace dsv;
using Catch::Approx;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

nn::Model two_class_rows_model() {
  // per-class rows [w; -w] with w = [1, 0], zero bias
  nn::Arch arch;
  arch.kind = nn::ArchKind::linear;
  arch.input_shape = {2};
  arch.classes = 2;
  std::vector<std::pair<std::string, Tensor>> params;
  params.emplace_back("fc.w", Tensor::from_data({2, 2}, {1.0, -1.0, 0.0, 0.0}).with_grad());
  params.emplace_back("fc.b", Tensor::zeros({2}).with_grad());
  return nn::Model(arch, std::move(params));
}

}  // namespace

TEST_CASE("linear forward dot-product example") {
  auto model = two_class_rows_model();
  Tensor x = Tensor::from_data({1, 2}, {2.0, 0.0});
  Tensor logits = model.forward(x);
  CHECK(logits.at({0, 0}) == Approx(2.0));
  CHECK(logits.at({0, 1}) == Approx(-2.0));
}

TEST_CASE("zero-initialized mlp produces zero logits") {
  nn::Arch arch;
  arch.kind = nn::ArchKind::mlp;
  arch.input_shape = {3};
  arch.classes = 4;
  arch.hidden = {5};
  Rng rng(1);
  auto model = nn::Model::init(arch, rng);
  auto zeroed = nn::unflatten_params(model, Tensor::zeros({nn::flatten_params(model).numel()}));
  Tensor logits = zeroed.forward(Tensor::from_data({1, 3}, {0.3, -2.0, 7.0}));
  for (double v : logits.data()) CHECK(v == 0.0);
}

TEST_CASE("convnet shape contract on 16x16 input") {
  nn::Arch arch;
  arch.kind = nn::ArchKind::convnet;
  arch.input_shape = {1, 16, 16};
  arch.classes = 3;
  arch.blocks = 3;
  arch.channels = 8;
  Rng rng(2);
  auto model = nn::Model::init(arch, rng);
  Tensor logits = model.forward(Tensor::zeros({2, 1, 16, 16}));
  CHECK(logits.shape() == Shape{2, 3});
  for (double v : logits.data()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(model.forward(Tensor::zeros({2, 1, 8, 8})), Error);
}

TEST_CASE("flatten_params examples") {
  nn::Arch arch;
  arch.kind = nn::ArchKind::linear;
  arch.input_shape = {2};
  arch.classes = 1;
  std::vector<std::pair<std::string, Tensor>> params;
  params.emplace_back("a", Tensor::from_data({2}, {1.0, 2.0}));
  params.emplace_back("b", Tensor::from_data({1}, {3.0}));
  nn::Model m(arch, std::move(params));
  CHECK(nn::flatten_params(m).data() == std::vector<double>{1.0, 2.0, 3.0});
  CHECK(nn::flatten_params(m, nn::ParamMask::of({"b"})).data() == std::vector<double>{3.0});
  CHECK_THROWS_AS(nn::flatten_params(m, nn::ParamMask::of({})), Error);
  CHECK_THROWS_AS(nn::flatten_params(m, nn::ParamMask::of({"nope"})), Error);
}

TEST_CASE("flatten/unflatten round-trips for every architecture") {
  Rng rng(3);
  std::vector<nn::Arch> archs;
  {
    nn::Arch a;
    a.kind = nn::ArchKind::linear;
    a.input_shape = {4};
    a.classes = 3;
    archs.push_back(a);
    a.kind = nn::ArchKind::mlp;
    a.hidden = {6, 5};
    archs.push_back(a);
    nn::Arch c;
    c.kind = nn::ArchKind::convnet;
    c.input_shape = {1, 8, 8};
    c.classes = 2;
    c.blocks = 2;
    c.channels = 4;
    archs.push_back(c);
  }
  for (const auto& arch : archs) {
    auto model = nn::Model::init(arch, rng);
    Tensor flat = nn::flatten_params(model);
    auto rebuilt = nn::unflatten_params(model, flat);
    CHECK(nn::flatten_params(rebuilt).data() == flat.data());
  }
}

TEST_CASE("forward is permutation-consistent over class heads") {
  nn::Arch arch;
  arch.kind = nn::ArchKind::mlp;
  arch.input_shape = {3};
  arch.classes = 3;
  arch.hidden = {4};
  Rng rng(5);
  auto model = nn::Model::init(arch, rng);

  // swap class columns 0 and 2 of the head
  auto params = model.params();
  for (auto& [name, t] : params) {
    if (name == "fc.w") {
      auto d = t.data();
      const std::size_t rows = t.shape()[0], cols = t.shape()[1];
      for (std::size_t r = 0; r < rows; ++r) std::swap(d[r * cols + 0], d[r * cols + 2]);
      t = Tensor::from_data(t.shape(), d).with_grad();
    }
    if (name == "fc.b") {
      auto d = t.data();
      std::swap(d[0], d[2]);
      t = Tensor::from_data(t.shape(), d).with_grad();
    }
  }
  auto permuted = model.with_params(params);

  Tensor x = Tensor::randn({2, 3}, rng);
  Tensor a = model.forward(x), b = permuted.forward(x);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.at({i, 0}) == Approx(b.at({i, 2})).margin(1e-15));
    CHECK(a.at({i, 2}) == Approx(b.at({i, 0})).margin(1e-15));
    CHECK(a.at({i, 1}) == Approx(b.at({i, 1})).margin(1e-15));
  }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  nn::Arch arch;
  arch.kind = nn::ArchKind::convnet;
  arch.input_shape = {1, 8, 8};
  arch.classes = 2;
  arch.blocks = 2;
  arch.channels = 3;
  Rng rng(7);
  auto model = nn::Model::init(arch, rng);
  const std::string path = temp_path("dsv_test_ckpt.dsvc");
  nn::save_checkpoint(model, path);
  auto loaded = nn::load_checkpoint(path);

  CHECK(loaded.arch() == model.arch());
  CHECK(nn::flatten_params(loaded).data() == nn::flatten_params(model).data());

  // logits on a probe batch match to the last bit
  Tensor probe = Tensor::randn({3, 1, 8, 8}, rng);
  CHECK(loaded.forward(probe).data() == model.forward(probe).data());

  // byte-identical when saved twice
  nn::save_checkpoint(loaded, path + ".2");
  CHECK(io::read_text(path) == io::read_text(path + ".2"));
  std::remove((path + ".2").c_str());
  std::remove(path.c_str());
}

TEST_CASE("checkpoint error paths") {
  nn::Arch arch;
  arch.kind = nn::ArchKind::linear;
  arch.input_shape = {2};
  arch.classes = 2;
  Rng rng(9);
  auto model = nn::Model::init(arch, rng);
  const std::string path = temp_path("dsv_test_ckpt2.dsvc");
  nn::save_checkpoint(model, path);

  SECTION("bad magic") {
    auto bytes = io::read_text(path);
    bytes[0] = 'X';
    io::write_text(path, bytes);
    try {
      nn::load_checkpoint(path);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == "bad-magic");
    }
  }
  SECTION("truncated payload") {
    auto bytes = io::read_text(path);
    io::write_text(path, bytes.substr(0, bytes.size() - 7));
    try {
      nn::load_checkpoint(path);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == "truncated");
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("architecture descriptor round-trips") {
  nn::Arch arch;
  arch.kind = nn::ArchKind::mlp;
  arch.input_shape = {12};
  arch.classes = 5;
  arch.hidden = {8, 4};
  auto parsed = nn::Arch::parse(arch.serialize());
  CHECK(parsed == arch);
}
