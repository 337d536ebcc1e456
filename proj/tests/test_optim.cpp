#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dsv/optim.hpp"
#include "testing_util.hpp"

using namespace dsv;
using Catch::Approx;

namespace {

// single scalar parameter model; forward is unused by these tests
nn::Model scalar_model(double theta) {
  nn::Arch arch;
  arch.kind = nn::ArchKind::linear;
  arch.input_shape = {1};
  arch.classes = 1;
  std::vector<std::pair<std::string, Tensor>> params;
  params.emplace_back("fc.w", Tensor::from_data({1, 1}, {theta}).with_grad());
  params.emplace_back("fc.b", Tensor::zeros({1}).with_grad());
  return nn::Model(arch, std::move(params));
}

auto square_loss = [](const nn::Model& m) {
  const Tensor& w = m.param("fc.w");
  return sum(mul(w, w));
};

}  // namespace

TEST_CASE("sgd closed form: theta^2 with lr 0.1 from 1 gives 0.8") {
  optim::Optimizer opt(optim::OptKind::sgd, 0.1);
  auto next = opt.step(scalar_model(1.0), square_loss);
  CHECK(next.param("fc.w").item() == Approx(0.8).margin(1e-15));
}

TEST_CASE("sam with rho 0 reduces exactly to sgd") {
  optim::Optimizer sam(optim::OptKind::sam, 0.05, 0.01, 0.0);
  optim::Optimizer sgd(optim::OptKind::sgd, 0.05, 0.01);
  auto a = scalar_model(0.73);
  auto b = scalar_model(0.73);
  for (int s = 0; s < 5; ++s) {
    a = sam.step(a, square_loss);
    b = sgd.step(b, square_loss);
  }
  CHECK(a.param("fc.w").data() == b.param("fc.w").data());  // bit-for-bit
}

TEST_CASE("sam hand computation: perturb 1.1, gradient 2.2, theta 0.78") {
  optim::Optimizer opt(optim::OptKind::sam, 0.1, 0.0, 0.1);
  auto next = opt.step(scalar_model(1.0), square_loss);
  CHECK(next.param("fc.w").item() == Approx(0.78).margin(1e-15));
}

TEST_CASE("weight decay contributes exactly d*theta to the gradient") {
  // compare an SGD step against finite differences of L + d/2 ||theta||^2
  const double d = 0.37, lr = 0.01;
  nn::Arch arch;
  arch.kind = nn::ArchKind::linear;
  arch.input_shape = {2};
  arch.classes = 2;
  Rng rng(4);
  auto model = nn::Model::init(arch, rng);
  Tensor batch = Tensor::randn({3, 2}, rng);
  std::vector<int> labels{0, 1, 0};

  optim::Optimizer opt(optim::OptKind::sgd, lr, d);
  auto next = opt.step(model, optim::ce_loss_on(batch, labels));

  auto full = [&](const std::vector<double>& flat) {
    auto m = nn::unflatten_params(model, Tensor::from_data({flat.size()}, flat));
    double l = mean(cross_entropy_rows(m.forward(batch), labels)).item();
    double reg = 0;
    for (double v : flat) reg += v * v;
    return l + 0.5 * d * reg;
  };
  auto theta = nn::flatten_params(model).data();
  auto theta_next = nn::flatten_params(next).data();
  const double h = 1e-6;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto up = theta, dn = theta;
    up[i] += h;
    dn[i] -= h;
    const double fd = (full(up) - full(dn)) / (2 * h);
    const double applied = (theta[i] - theta_next[i]) / lr;
    CHECK(applied == Approx(fd).margin(1e-6));
  }
}

TEST_CASE("adam first step matches the bias-corrected closed form") {
  optim::Optimizer opt(optim::OptKind::adam, 0.1);
  auto next = opt.step(scalar_model(1.0), square_loss);
  // g=2: mhat=g, vhat=g^2 -> step = lr * g / (|g| + eps)
  CHECK(next.param("fc.w").item() == Approx(1.0 - 0.1 * (2.0 / (2.0 + 1e-8))).margin(1e-12));
}

TEST_CASE("hinge trainer: first step equals -mean(y x~) times -lr") {
  // two points, both with margin 0 < 1 at w=0
  data::Dataset ds;
  ds.feature_shape = {2};
  ds.classes = 2;
  ds.samples = {Tensor::from_data({2}, {2.0, 1.0}), Tensor::from_data({2}, {-1.0, 0.5})};
  ds.labels = {1, 0};
  const double lr = 0.1;
  auto w = optim::train_hinge_linear(ds, lr, 1);
  // mean(y x~) over {y=+1,(2,1,1)}, {y=-1,(-1,0.5,1)} = ((2,1,1)+(1,-0.5,-1))/2
  CHECK(w[0] == Approx(lr * 1.5).margin(1e-12));
  CHECK(w[1] == Approx(lr * 0.25).margin(1e-12));
  CHECK(w[2] == Approx(lr * 0.0).margin(1e-12));
}

TEST_CASE("hinge trainer converges to the analytic solution on 1-D points") {
  data::Dataset ds;
  ds.feature_shape = {1};
  ds.classes = 2;
  ds.samples = {Tensor::from_data({1}, {1.0}), Tensor::from_data({1}, {-1.0})};
  ds.labels = {1, 0};
  auto w = optim::train_hinge_linear(ds, 0.05, 10000);
  CHECK(w[0] > 0.0);                       // direction matches the oracle w = 1
  CHECK(w[0] == Approx(1.0).margin(0.06));  // stops just past the margin
  CHECK(w[1] == Approx(0.0).margin(1e-12));
  CHECK(optim::hinge_loss(w, ds) == Approx(0.0).margin(1e-12));
}

TEST_CASE("hinge trainer: satisfied data means zero update") {
  auto ds = data::gen_blobs2d(2, 20, 6.0, 3);
  auto w1 = optim::train_hinge_linear(ds, 0.05, 20000);
  auto w2 = optim::train_hinge_linear(ds, 0.05, 25000);
  CHECK(w1 == w2);  // training had already stopped moving
  CHECK(optim::hinge_loss(w1, ds) == 0.0);
}

TEST_CASE("train_classifier fits small blobs with a linear head") {
  auto ds = data::gen_blobs2d(3, 20, 6.0, 5);
  nn::Arch arch;
  arch.kind = nn::ArchKind::linear;
  arch.input_shape = {2};
  arch.classes = 3;
  Rng rng(6);
  auto model = nn::Model::init(arch, rng);
  auto [trained, log] = optim::train_classifier(std::move(model), ds,
                                                optim::Optimizer(optim::OptKind::adam, 1e-2), 40, 16, rng);
  CHECK(optim::accuracy(trained, ds) >= 0.95);
  CHECK(log.size() >= 1);
}

TEST_CASE("grad trace: final probe has cosine 1 with itself") {
  auto ds = data::gen_blobs2d(2, 10, 5.0, 7);
  nn::Arch arch;
  arch.kind = nn::ArchKind::linear;
  arch.input_shape = {2};
  arch.classes = 2;
  Rng rng(8);
  auto model = nn::Model::init(arch, rng);
  auto trace = optim::grad_direction_trace(model, ds, 0.05, 50, 10);
  REQUIRE(!trace.cosines.empty());
  CHECK(trace.cosines.back() == Approx(1.0).margin(1e-12));
}

TEST_CASE("grad trace: late-phase cosines converge on separable blobs") {
  auto ds = data::gen_blobs2d(2, 40, 6.0, 9);
  nn::Arch arch;
  arch.kind = nn::ArchKind::linear;
  arch.input_shape = {2};
  arch.classes = 2;
  Rng rng(10);
  auto model = nn::Model::init(arch, rng);
  auto trace = optim::grad_direction_trace(model, ds, 0.1, 1500, 25);
  REQUIRE(trace.cosines.size() > 10);
  const std::size_t tail_start = trace.cosines.size() - trace.cosines.size() / 10;
  for (std::size_t i = tail_start; i < trace.cosines.size(); ++i) CHECK(trace.cosines[i] >= 0.99);
}
