#pragma once

// Classical hard-margin SVM ground truth: dual QP solver (SMO-style pairwise
// coordinate ascent) and a textbook KKT checker. Used to validate the
// DeepKKT pipeline on linear models.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dsv/data.hpp"
#include "dsv/error.hpp"

namespace dsv::svm {

/// Hard-margin solution. In explicit-bias mode (default) the equality
/// constraint sum(alpha*y) = 0 is maintained and the bias is recovered from
/// support-vector margins; folded mode absorbs the bias into x~ = [x; 1] so
/// the stationarity w~ = sum(alpha*y*x~) holds verbatim.
struct SvmSolution {
  std::vector<double> w;  // length D
  double b = 0.0;
  std::vector<double> alpha;
  std::vector<std::size_t> support;
  double margin = 0.0;  // geometric half-margin 1/||w||
  bool folded_bias = false;

  std::vector<double> w_tilde() const {
    std::vector<double> wt = w;
    wt.push_back(b);
    return wt;
  }

  double decision(const std::vector<double>& x) const {
    double f = b;
    for (std::size_t j = 0; j < w.size(); ++j) f += w[j] * x[j];
    return f;
  }
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

struct Problem {
  std::vector<std::vector<double>> x;  // features (bias-augmented in folded mode)
  std::vector<double> y;               // -1 / +1
};

inline Problem build_problem(const data::Dataset& ds, bool folded) {
  if (ds.classes != 2) throw Error("bad-config", "hard-margin solver expects a binary dataset");
  if (ds.size() < 2) throw Error("bad-config", "need at least two samples");
  Problem p;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<double> xi = ds.samples[i].data();
    if (folded) xi.push_back(1.0);
    p.x.push_back(std::move(xi));
    p.y.push_back(ds.labels[i] == 1 ? 1.0 : -1.0);
  }
  return p;
}

}  // namespace detail

/// Solves the hard-margin dual
///   max sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j x_i . x_j
///   s.t. alpha >= 0 (and sum(alpha y) = 0 in explicit-bias mode)
/// to KKT tolerance 1e-8. Non-separable data trips the alpha divergence
/// guard and reports infeasibility.
inline SvmSolution solve_hard_margin(const data::Dataset& ds, bool folded_bias = false) {
  constexpr double kkt_tol = 1e-8;
  constexpr double alpha_cap = 1e6;
  constexpr int max_sweeps = 200000;

  auto prob = detail::build_problem(ds, folded_bias);
  const std::size_t n = prob.x.size();
  const std::size_t dim = prob.x[0].size();

  std::vector<double> alpha(n, 0.0);
  std::vector<double> w(dim, 0.0);  // running sum(alpha y x)
  std::vector<double> self_k(n);
  for (std::size_t i = 0; i < n; ++i) self_k[i] = detail::dot(prob.x[i], prob.x[i]);

  auto compute_bias = [&]() {
    if (folded_bias) return 0.0;
    const double amax = *std::max_element(alpha.begin(), alpha.end());
    const double sv_tol = 1e-7 * std::max(amax, 1e-300);
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (alpha[i] <= sv_tol) continue;
      acc += prob.y[i] - detail::dot(w, prob.x[i]);
      ++count;
    }
    return count ? acc / static_cast<double>(count) : 0.0;
  };

  auto max_violation = [&](double b) {
    const double amax = *std::max_element(alpha.begin(), alpha.end());
    const double sv_tol = 1e-7 * std::max(amax, 1e-300);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double margin = prob.y[i] * (detail::dot(w, prob.x[i]) + b);
      if (alpha[i] > sv_tol)
        worst = std::max(worst, std::fabs(margin - 1.0));  // on-margin condition
      else
        worst = std::max(worst, 1.0 - margin);  // primal feasibility
    }
    return worst;
  };

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool changed = false;

    if (folded_bias) {
      // no equality constraint: plain coordinate ascent per alpha_i
      for (std::size_t i = 0; i < n; ++i) {
        const double f = detail::dot(w, prob.x[i]);
        const double delta = (1.0 - prob.y[i] * f) / self_k[i];
        const double next = std::max(0.0, alpha[i] + delta);
        const double change = next - alpha[i];
        if (std::fabs(change) < 1e-15) continue;
        alpha[i] = next;
        for (std::size_t d = 0; d < dim; ++d) w[d] += change * prob.y[i] * prob.x[i][d];
        changed = true;
      }
    } else {
      // pairwise updates preserving sum(alpha y); the bias cancels in E_i - E_j
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          const double kij = detail::dot(prob.x[i], prob.x[j]);
          const double eta = self_k[i] + self_k[j] - 2.0 * kij;
          if (eta < 1e-12) continue;  // duplicate points
          const double ei = detail::dot(w, prob.x[i]) - prob.y[i];
          const double ej = detail::dot(w, prob.x[j]) - prob.y[j];
          double aj = alpha[j] + prob.y[j] * (ei - ej) / eta;
          // box: alpha >= 0 for both coordinates along the constraint line
          if (prob.y[i] == prob.y[j]) {
            const double total = alpha[i] + alpha[j];
            aj = std::clamp(aj, 0.0, total);
          } else {
            aj = std::max(aj, std::max(0.0, alpha[j] - alpha[i]));
          }
          const double dj = aj - alpha[j];
          if (std::fabs(dj) < 1e-15) continue;
          // rounding can land a hair below zero; the math keeps ai >= 0
          const double ai = std::max(0.0, alpha[i] + prob.y[i] * prob.y[j] * (alpha[j] - aj));
          const double di = ai - alpha[i];
          alpha[i] = ai;
          alpha[j] = aj;
          for (std::size_t d = 0; d < dim; ++d)
            w[d] += di * prob.y[i] * prob.x[i][d] + dj * prob.y[j] * prob.x[j][d];
          changed = true;
        }
    }

    const double amax = *std::max_element(alpha.begin(), alpha.end());
    if (amax > alpha_cap)
      throw Error("infeasible", "hard margin infeasible: alpha cap " + std::to_string(alpha_cap) +
                                    " hit (non-separable data)");
    const double b = compute_bias();
    if (max_violation(b) < kkt_tol) break;
    if (!changed)
      throw Error("infeasible", "hard margin stalled before reaching KKT tolerance");
    if (sweep + 1 == max_sweeps)
      throw Error("infeasible", "hard margin did not converge within the sweep budget");
  }

  SvmSolution sol;
  sol.folded_bias = folded_bias;
  sol.alpha = alpha;
  if (folded_bias) {
    sol.w.assign(w.begin(), w.end() - 1);
    sol.b = w.back();
  } else {
    sol.w = w;
    sol.b = compute_bias();
  }
  double norm_sq = 0;
  for (std::size_t d = 0; d + (folded_bias ? 1 : 0) < dim; ++d) norm_sq += w[d] * w[d];
  sol.margin = norm_sq > 0 ? 1.0 / std::sqrt(norm_sq) : 0.0;
  const double amax = *std::max_element(alpha.begin(), alpha.end());
  const double sv_tol = 1e-7 * std::max(amax, 1e-300);
  for (std::size_t i = 0; i < n; ++i)
    if (alpha[i] > sv_tol) sol.support.push_back(i);
  return sol;
}

/// Textbook KKT residuals of a solution against a dataset.
struct ClassicalKktReport {
  double max_primal_violation = 0;  // max (1 - y f)+
  double min_alpha = 0;
  double max_slackness = 0;  // max |alpha_i (y_i f_i - 1)|
  double stationarity_residual = 0;
  double dual_balance = 0;  // |sum alpha_i y_i| (explicit-bias mode)
};

inline ClassicalKktReport check_classical_kkt(const SvmSolution& sol, const data::Dataset& ds) {
  auto prob = detail::build_problem(ds, sol.folded_bias);
  const std::size_t n = prob.x.size();
  ClassicalKktReport rep;
  rep.min_alpha = *std::min_element(sol.alpha.begin(), sol.alpha.end());

  std::vector<double> wt = sol.folded_bias ? sol.w_tilde() : sol.w;
  std::vector<double> recon(wt.size(), 0.0);
  double balance = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = sol.decision(ds.samples[i].data());
    const double yf = prob.y[i] * f;
    rep.max_primal_violation = std::max(rep.max_primal_violation, std::max(0.0, 1.0 - yf));
    rep.max_slackness = std::max(rep.max_slackness, std::fabs(sol.alpha[i] * (yf - 1.0)));
    for (std::size_t d = 0; d < recon.size(); ++d)
      recon[d] += sol.alpha[i] * prob.y[i] * prob.x[i][d];
    balance += sol.alpha[i] * prob.y[i];
  }
  double resid = 0;
  for (std::size_t d = 0; d < recon.size(); ++d) {
    const double diff = wt[d] - recon[d];
    resid += diff * diff;
  }
  rep.stationarity_residual = std::sqrt(resid);
  rep.dual_balance = sol.folded_bias ? 0.0 : std::fabs(balance);
  return rep;
}

}  // namespace dsv::svm
