#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>

#include "dsv/svm.hpp"
#include "testing_util.hpp"

using namespace dsv;
using Catch::Approx;

namespace {

data::Dataset two_points_1d() {
  data::Dataset ds;
  ds.feature_shape = {1};
  ds.classes = 2;
  ds.samples = {Tensor::from_data({1}, {1.0}), Tensor::from_data({1}, {-1.0})};
  ds.labels = {1, 0};
  return ds;
}

}  // namespace

TEST_CASE("two-point analytic solution, both bias conventions") {
  auto ds = two_points_1d();
  for (bool folded : {false, true}) {
    auto sol = svm::solve_hard_margin(ds, folded);
    INFO("folded=" << folded);
    CHECK(sol.w[0] == Approx(1.0).margin(1e-7));
    CHECK(sol.b == Approx(0.0).margin(1e-7));
    CHECK(sol.alpha[0] == Approx(0.5).margin(1e-7));
    CHECK(sol.alpha[1] == Approx(0.5).margin(1e-7));
    CHECK(sol.support.size() == 2);
  }
}

TEST_CASE("oracle solution passes its own KKT checker") {
  auto ds = data::gen_blobs2d(2, 30, 6.0, 0);
  auto sol = svm::solve_hard_margin(ds);
  auto rep = svm::check_classical_kkt(sol, ds);
  CHECK(rep.max_primal_violation < 1e-6);
  CHECK(rep.min_alpha >= 0.0);
  CHECK(rep.max_slackness < 1e-6);
  CHECK(rep.stationarity_residual < 1e-6);
  CHECK(rep.dual_balance < 1e-6);
}

TEST_CASE("support vectors sit on the margin") {
  auto ds = data::gen_blobs2d(2, 25, 5.0, 1);
  auto sol = svm::solve_hard_margin(ds);
  REQUIRE(!sol.support.empty());
  for (std::size_t i : sol.support) {
    const double y = ds.labels[i] == 1 ? 1.0 : -1.0;
    CHECK(std::fabs(y * sol.decision(ds.samples[i].data()) - 1.0) < 1e-6);
  }
}

TEST_CASE("non-separable data reports infeasibility") {
  SECTION("xor") {
    data::Dataset ds;
    ds.feature_shape = {2};
    ds.classes = 2;
    ds.samples = {Tensor::from_data({2}, {1.0, 1.0}), Tensor::from_data({2}, {-1.0, -1.0}),
                  Tensor::from_data({2}, {1.0, -1.0}), Tensor::from_data({2}, {-1.0, 1.0})};
    ds.labels = {1, 1, 0, 0};
    try {
      svm::solve_hard_margin(ds);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == "infeasible");
    }
  }
  SECTION("overlapping blobs") {
    auto ds = data::gen_blobs2d(2, 10, 0.0, 2);
    CHECK_THROWS_AS(svm::solve_hard_margin(ds), Error);
  }
}

TEST_CASE("duplicated dataset keeps the hyperplane and alpha mass per location") {
  auto ds = data::gen_blobs2d(2, 12, 5.0, 3);
  data::Dataset dup = ds;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    dup.samples.push_back(ds.samples[i]);
    dup.labels.push_back(ds.labels[i]);
  }
  auto a = svm::solve_hard_margin(ds);
  auto b = svm::solve_hard_margin(dup);
  for (std::size_t d = 0; d < a.w.size(); ++d) CHECK(b.w[d] == Approx(a.w[d]).margin(1e-5));
  CHECK(b.b == Approx(a.b).margin(1e-5));
  // alpha mass per original location: alpha_i vs alpha_i + alpha_{i+n}
  for (std::size_t i = 0; i < ds.size(); ++i)
    CHECK(b.alpha[i] + b.alpha[i + ds.size()] == Approx(a.alpha[i]).margin(1e-5));
}

TEST_CASE("solution is invariant under sample order permutation") {
  auto ds = data::gen_blobs2d(2, 15, 5.5, 4);
  auto sol = svm::solve_hard_margin(ds);
  data::Dataset rev = ds;
  std::reverse(rev.samples.begin(), rev.samples.end());
  std::reverse(rev.labels.begin(), rev.labels.end());
  auto sol_rev = svm::solve_hard_margin(rev);
  for (std::size_t d = 0; d < sol.w.size(); ++d) CHECK(sol_rev.w[d] == Approx(sol.w[d]).margin(1e-6));
  CHECK(sol_rev.b == Approx(sol.b).margin(1e-6));
}

TEST_CASE("removing a non-support sample leaves the hyperplane unchanged") {
  auto ds = data::gen_blobs2d(2, 15, 6.0, 5);
  auto sol = svm::solve_hard_margin(ds);
  std::size_t victim = ds.size();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (std::find(sol.support.begin(), sol.support.end(), i) == sol.support.end()) {
      victim = i;
      break;
    }
  }
  REQUIRE(victim < ds.size());
  data::Dataset smaller = ds;
  smaller.samples.erase(smaller.samples.begin() + static_cast<std::ptrdiff_t>(victim));
  smaller.labels.erase(smaller.labels.begin() + static_cast<std::ptrdiff_t>(victim));
  auto sol2 = svm::solve_hard_margin(smaller);
  for (std::size_t d = 0; d < sol.w.size(); ++d) CHECK(sol2.w[d] == Approx(sol.w[d]).margin(1e-6));
  CHECK(sol2.b == Approx(sol.b).margin(1e-6));
}

TEST_CASE("perturbing alpha on a non-support point shows up as slackness") {
  auto ds = data::gen_blobs2d(2, 10, 6.0, 6);
  auto sol = svm::solve_hard_margin(ds);
  std::size_t victim = ds.size();
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (std::find(sol.support.begin(), sol.support.end(), i) == sol.support.end()) {
      victim = i;
      break;
    }
  REQUIRE(victim < ds.size());
  const double y = ds.labels[victim] == 1 ? 1.0 : -1.0;
  const double gap = y * sol.decision(ds.samples[victim].data()) - 1.0;
  auto tampered = sol;
  tampered.alpha[victim] += 0.1;
  auto rep = svm::check_classical_kkt(tampered, ds);
  CHECK(rep.max_slackness == Approx(0.1 * gap).margin(1e-6));
}

TEST_CASE("scaling the hyperplane doubles margins and breaks stationarity") {
  auto ds = data::gen_blobs2d(2, 10, 6.0, 7);
  auto sol = svm::solve_hard_margin(ds);
  auto scaled = sol;
  for (double& v : scaled.w) v *= 2.0;
  scaled.b *= 2.0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    CHECK(scaled.decision(ds.samples[i].data()) ==
          Approx(2.0 * sol.decision(ds.samples[i].data())).margin(1e-12));
  auto rep = svm::check_classical_kkt(scaled, ds);
  CHECK(rep.stationarity_residual > 1e-3);
}

TEST_CASE("folded-bias mode satisfies the concatenated stationarity verbatim") {
  auto ds = data::gen_blobs2d(2, 20, 5.0, 8);
  auto sol = svm::solve_hard_margin(ds, /*folded_bias=*/true);
  auto rep = svm::check_classical_kkt(sol, ds);
  CHECK(rep.stationarity_residual < 1e-6);  // includes the bias component
  CHECK(rep.max_primal_violation < 1e-6);
}
