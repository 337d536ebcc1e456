#pragma once

// Parameter optimizers for pretraining and DSV retraining (SGD, Adam, SAM),
// the hinge-loss subgradient trainer for the linear case, and the
// gradient-direction convergence diagnostic.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dsv/data.hpp"
#include "dsv/error.hpp"
#include "dsv/nn.hpp"
#include "dsv/rng.hpp"
#include "dsv/tensor.hpp"

namespace dsv::optim {

enum class OptKind { sgd, adam, sam };

inline std::string opt_kind_name(OptKind k) {
  switch (k) {
    case OptKind::sgd: return "sgd";
    case OptKind::adam: return "adam";
    case OptKind::sam: return "sam";
  }
  return "?";
}

/// Optimizer with per-parameter state. SAM evaluates the gradient at the
/// rho-perturbed point and applies an inner SGD step at the original point.
class Optimizer {
 public:
  OptKind kind = OptKind::sgd;
  double lr = 0.1;
  double weight_decay = 0.0;
  double rho = 0.0;  // SAM radius
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  Optimizer() = default;
  Optimizer(OptKind kind, double lr, double weight_decay = 0.0, double rho = 0.0)
      : kind(kind), lr(lr), weight_decay(weight_decay), rho(rho) {
    if (lr <= 0) throw Error("bad-config", "learning rate must be positive");
    if (rho < 0) throw Error("bad-config", "SAM radius must be non-negative");
  }

  /// One update step; returns the model with new parameters.
  nn::Model step(const nn::Model& model, const std::function<Tensor(const nn::Model&)>& loss_fn) {
    std::vector<std::vector<double>> g = gradients(model, loss_fn);

    if (kind == OptKind::sam && rho > 0.0) {
      double norm_sq = 0.0;
      for (const auto& gp : g)
        for (double v : gp) norm_sq += v * v;
      const double norm = std::sqrt(norm_sq);
      if (norm > 0.0) {
        // gradient at theta + rho * g / ||g||, applied at theta
        std::vector<std::pair<std::string, Tensor>> perturbed;
        for (std::size_t p = 0; p < model.params().size(); ++p) {
          const auto& [name, t] = model.params()[p];
          std::vector<double> d = t.data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += rho * g[p][i] / norm;
          perturbed.emplace_back(name, Tensor::from_data(t.shape(), std::move(d)).with_grad());
        }
        g = gradients(model.with_params(std::move(perturbed)), loss_fn);
      }
    }

    // weight decay contributes d * theta to the gradient (L2 at the base point)
    if (weight_decay != 0.0) {
      for (std::size_t p = 0; p < model.params().size(); ++p) {
        const auto& t = model.params()[p].second;
        for (std::size_t i = 0; i < t.numel(); ++i) g[p][i] += weight_decay * t.data()[i];
      }
    }

    ++t_;
    std::vector<std::pair<std::string, Tensor>> next;
    for (std::size_t p = 0; p < model.params().size(); ++p) {
      const auto& [name, t] = model.params()[p];
      std::vector<double> d = t.data();
      switch (kind) {
        case OptKind::sgd:
        case OptKind::sam:
          for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[p][i];
          break;
        case OptKind::adam: {
          auto& m = moments1_[name];
          auto& v = moments2_[name];
          if (m.size() != d.size()) m.assign(d.size(), 0.0);
          if (v.size() != d.size()) v.assign(d.size(), 0.0);
          const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
          const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
          for (std::size_t i = 0; i < d.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[p][i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[p][i] * g[p][i];
            d[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
          }
          break;
        }
      }
      next.emplace_back(name, Tensor::from_data(t.shape(), std::move(d)).with_grad());
    }
    return model.with_params(std::move(next));
  }

 private:
  static std::vector<std::vector<double>> gradients(
      const nn::Model& model, const std::function<Tensor(const nn::Model&)>& loss_fn) {
    Tensor loss = loss_fn(model);
    if (!std::isfinite(loss.item())) throw Error("non-finite", "non-finite training loss");
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : model.params()) leaves.push_back(t);
    auto grads = grad(loss, leaves, /*create_graph=*/false, /*allow_unused=*/true);
    std::vector<std::vector<double>> out;
    out.reserve(grads.size());
    for (auto& gt : grads) out.push_back(gt.data());
    return out;
  }

  std::map<std::string, std::vector<double>> moments1_, moments2_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// training helpers

struct EpochLog {
  int epoch;
  double loss;
  double accuracy;
};

inline double accuracy(const nn::Model& model, const data::Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  // evaluate in chunks to bound graph size
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
    Tensor logits = model.forward(ds.batch(idx));
    const std::size_t C = static_cast<std::size_t>(model.classes());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (logits.data()[r * C + c] > logits.data()[r * C + best]) best = c;
      if (static_cast<int>(best) == ds.labels[idx[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

/// Mean cross-entropy of the model on the given samples, as a loss closure.
inline std::function<Tensor(const nn::Model&)> ce_loss_on(const Tensor& batch,
                                                          const std::vector<int>& labels) {
  return [batch, labels](const nn::Model& m) { return mean(cross_entropy_rows(m.forward(batch), labels)); };
}

/// Seeded minibatch training with cross entropy; returns the trained model
/// and a per-epoch log.
inline std::pair<nn::Model, std::vector<EpochLog>> train_classifier(nn::Model model,
                                                                    const data::Dataset& ds,
                                                                    Optimizer opt, int epochs,
                                                                    std::size_t batch_size, Rng& rng,
                                                                    double target_accuracy = 1.01) {
  std::vector<EpochLog> log;
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int e = 0; e < epochs; ++e) {
    // Fisher-Yates with the seeded stream
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.integer(i)]);
    double loss_acc = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(order.size(), start + batch_size)));
      Tensor batch = ds.batch(idx);
      auto labels = ds.labels_at(idx);
      Tensor pre = mean(cross_entropy_rows(model.forward(batch), labels));
      loss_acc += pre.item();
      ++batches;
      model = opt.step(model, ce_loss_on(batch, labels));
    }
    const double acc = accuracy(model, ds);
    log.push_back({e, loss_acc / static_cast<double>(batches), acc});
    if (acc >= target_accuracy) break;
  }
  return {std::move(model), std::move(log)};
}

// ---------------------------------------------------------------------------
// hinge-loss subgradient trainer (binary linear case)

/// Full-batch subgradient descent on the mean hinge loss from w~ = 0.
/// Features are bias-augmented ([x; 1]); labels must be two classes, mapped
/// to -1/+1 by class index. Returns w~ of length D+1.
inline std::vector<double> train_hinge_linear(const data::Dataset& ds, double lr, int steps) {
  if (ds.classes != 2) throw Error("bad-config", "hinge trainer expects a binary dataset");
  const std::size_t D = shape_numel(ds.feature_shape);
  std::vector<double> w(D + 1, 0.0);
  const double n = static_cast<double>(ds.size());
  for (int s = 0; s < steps; ++s) {
    std::vector<double> g(D + 1, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double y = ds.labels[i] == 1 ? 1.0 : -1.0;
      double margin = w[D];
      for (std::size_t j = 0; j < D; ++j) margin += w[j] * ds.samples[i].data()[j];
      margin *= y;
      if (margin > 1.0) continue;  // zero branch of the hinge subgradient
      for (std::size_t j = 0; j < D; ++j) g[j] -= y * ds.samples[i].data()[j];
      g[D] -= y;
    }
    bool moved = false;
    for (std::size_t j = 0; j <= D; ++j) {
      const double step_j = lr * g[j] / n;
      w[j] -= step_j;
      moved = moved || step_j != 0.0;
    }
    if (!moved) break;
  }
  return w;
}

/// Mean hinge loss of a bias-augmented hyperplane on a binary dataset.
inline double hinge_loss(const std::vector<double>& w, const data::Dataset& ds) {
  const std::size_t D = shape_numel(ds.feature_shape);
  double acc = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double y = ds.labels[i] == 1 ? 1.0 : -1.0;
    double margin = w[D];
    for (std::size_t j = 0; j < D; ++j) margin += w[j] * ds.samples[i].data()[j];
    acc += std::max(0.0, 1.0 - y * margin);
  }
  return acc / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// gradient-direction convergence diagnostic

struct GradTrace {
  std::vector<int> steps;          // probed step indices
  std::vector<double> cosines;     // cos(g_step, g_final) per probe
  std::vector<int> skipped_steps;  // probes with zero gradient
};

/// Trains with full-batch cross entropy and SGD, probing the full-batch
/// gradient every `probe_interval` steps; cosines compare each probe with the
/// final probe's direction.
inline GradTrace grad_direction_trace(nn::Model model, const data::Dataset& ds, double lr, int steps,
                                      int probe_interval) {
  if (probe_interval <= 0) throw Error("bad-config", "probe interval must be positive");
  Tensor batch = ds.batch_all();
  auto loss_fn = ce_loss_on(batch, ds.labels);
  Optimizer opt(OptKind::sgd, lr);

  GradTrace trace;
  std::vector<std::vector<double>> probes;
  auto full_grad = [&](const nn::Model& m) {
    Tensor loss = loss_fn(m);
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : m.params()) leaves.push_back(t);
    auto gs = grad(loss, leaves, false);
    std::vector<double> flat;
    for (const auto& gt : gs) flat.insert(flat.end(), gt.data().begin(), gt.data().end());
    return flat;
  };

  for (int s = 0; s < steps; ++s) {
    if (s % probe_interval == 0) {
      auto g = full_grad(model);
      double norm = 0;
      for (double v : g) norm += v * v;
      if (norm == 0.0) {
        trace.skipped_steps.push_back(s);
      } else {
        trace.steps.push_back(s);
        probes.push_back(std::move(g));
      }
    }
    model = opt.step(model, loss_fn);
  }
  {
    auto g = full_grad(model);
    double norm = 0;
    for (double v : g) norm += v * v;
    if (norm == 0.0)
      trace.skipped_steps.push_back(steps);
    else {
      trace.steps.push_back(steps);
      probes.push_back(std::move(g));
    }
  }

  if (!probes.empty()) {
    const auto& last = probes.back();
    double last_norm = 0;
    for (double v : last) last_norm += v * v;
    last_norm = std::sqrt(last_norm);
    for (const auto& p : probes) {
      double dot = 0, norm = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        dot += p[i] * last[i];
        norm += p[i] * p[i];
      }
      trace.cosines.push_back(dot / (std::sqrt(norm) * last_norm));
    }
  }
  return trace;
}

}  // namespace dsv::optim
