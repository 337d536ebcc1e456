#pragma once

// DeepKKT: the two-step primal loss, the stationarity loss over the masked
// parameter vector, the noise-synthesis refinement loop with lambda pruning
// and augmentation term, lambda-fitting selection, and the condition checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsv/data.hpp"
#include "dsv/error.hpp"
#include "dsv/io.hpp"
#include "dsv/nn.hpp"
#include "dsv/rng.hpp"
#include "dsv/tensor.hpp"

namespace dsv::kkt {

enum class StatMetric { l1, l2sq };
enum class LossMode { full, primal_only, stat_only };

inline std::string stat_metric_name(StatMetric m) { return m == StatMetric::l1 ? "l1" : "l2sq"; }
inline std::string loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::full: return "full";
    case LossMode::primal_only: return "primal-only";
    case LossMode::stat_only: return "stat-only";
  }
  return "?";
}

/// A primal candidate: input x, its target label and Lagrange multiplier.
/// x and lambda are leaves while an extraction loop owns the candidate.
struct DsvCandidate {
  Tensor x;
  int y = 0;
  Tensor lambda;
  bool alive = true;

  double lambda_value() const { return lambda.item(); }
};

struct ExtractConfig {
  int n_per_class = 8;
  int classes = 2;
  double beta = 0.1;      // stationarity weight
  double gamma = 5.0;     // augmentation weight
  double alpha_x = 1e-3;  // candidate step size
  double alpha_lambda = 0.1;
  int iterations = 2000;
  StatMetric metric = StatMetric::l1;
  bool use_signed_sqrt = false;
  int lowres_iterations = -1;  // -1: iterations/4 on images, none on points
  nn::ParamMask mask = nn::ParamMask::full();
  double margin_eps = 0.0;  // checker threshold for Eq.-style margin gaps
  LossMode mode = LossMode::full;
  std::uint64_t seed = 0;
  double lambda_init = -1.0;  // -1: 1/(N*C)

  static constexpr int early_stop_window = 50;
  static constexpr double early_stop_tol = 1e-6;

  void validate() const {
    if (n_per_class < 1) throw Error("bad-config", "n_per_class must be >= 1");
    if (classes < 2) throw Error("bad-config", "classes must be >= 2");
    if (alpha_x <= 0 || alpha_lambda < 0) throw Error("bad-config", "step sizes must be positive");
    if (beta < 0 || gamma < 0) throw Error("bad-config", "beta and gamma must be non-negative");
    if (iterations < 0) throw Error("bad-config", "iterations must be non-negative");
    if (lowres_iterations >= 0 && lowres_iterations >= std::max(iterations, 1))
      throw Error("bad-config", "lowres_iterations must be smaller than iterations");
  }

  int effective_lowres_iterations(bool image_mode) const {
    if (!image_mode) return 0;
    if (lowres_iterations >= 0) return lowres_iterations;
    return iterations / 4;
  }

  double effective_lambda_init() const {
    return lambda_init >= 0 ? lambda_init
                            : 1.0 / (static_cast<double>(n_per_class) * static_cast<double>(classes));
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "extract.n_per_class = " << n_per_class << "\n";
    os << "extract.classes = " << classes << "\n";
    os << "extract.beta = " << io::format_double(beta) << "\n";
    os << "extract.gamma = " << io::format_double(gamma) << "\n";
    os << "extract.alpha_x = " << io::format_double(alpha_x) << "\n";
    os << "extract.alpha_lambda = " << io::format_double(alpha_lambda) << "\n";
    os << "extract.iterations = " << iterations << "\n";
    os << "extract.metric = " << stat_metric_name(metric) << "\n";
    os << "extract.signed_sqrt = " << (use_signed_sqrt ? "true" : "false") << "\n";
    os << "extract.lowres_iterations = " << lowres_iterations << "\n";
    os << "extract.margin_eps = " << io::format_double(margin_eps) << "\n";
    os << "extract.mode = " << loss_mode_name(mode) << "\n";
    os << "extract.lambda_init = " << io::format_double(lambda_init) << "\n";
    os << "extract.mask = ";
    if (mask.all) {
      os << "full";
    } else {
      for (std::size_t i = 0; i < mask.included.size(); ++i)
        os << (i ? "," : "") << mask.included[i];
      if (mask.included.empty()) os << "none";
    }
    os << "\n";
    os << "seed = " << seed << "\n";
    return os.str();
  }
};

struct TraceRow {
  int iteration = 0;
  double primal = 0, stat = 0, total = 0, mean_entropy = 0;
  int alive = 0;
};

struct DsvSet {
  std::vector<DsvCandidate> candidates;
  Shape feature_shape;
  int classes = 0;
  std::string config_echo;

  std::vector<std::size_t> alive_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (candidates[i].alive) idx.push_back(i);
    return idx;
  }

  std::vector<int> alive_per_class() const {
    std::vector<int> counts(static_cast<std::size_t>(classes), 0);
    for (const auto& c : candidates)
      if (c.alive) ++counts[static_cast<std::size_t>(c.y)];
    return counts;
  }

  /// Highest-lambda alive candidate per class; error if a class has none.
  std::vector<std::size_t> top_per_class() const {
    std::vector<std::size_t> best(static_cast<std::size_t>(classes), candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (!candidates[i].alive) continue;
      auto& slot = best[static_cast<std::size_t>(candidates[i].y)];
      if (slot == candidates.size() || candidates[i].lambda_value() > candidates[slot].lambda_value())
        slot = i;
    }
    for (int c = 0; c < classes; ++c)
      if (best[static_cast<std::size_t>(c)] == candidates.size())
        throw Error("missing-class", "no alive candidate for class " + std::to_string(c));
    return best;
  }
};

// ---------------------------------------------------------------------------
// internals shared by the losses and the loops

namespace detail {

inline double entropy_of_row(const double* logits, std::size_t C) {
  double m = logits[0];
  for (std::size_t c = 1; c < C; ++c) m = std::max(m, logits[c]);
  double z = 0;
  for (std::size_t c = 0; c < C; ++c) z += std::exp(logits[c] - m);
  double h = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double p = std::exp(logits[c] - m) / z;
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

inline double mean_entropy(const Tensor& logits) {
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  double acc = 0;
  for (std::size_t r = 0; r < B; ++r) acc += entropy_of_row(logits.data().data() + r * C, C);
  return B ? acc / static_cast<double>(B) : 0.0;
}

inline std::size_t argmax_row(const double* logits, std::size_t C) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < C; ++c)
    if (logits[c] > logits[best]) best = c;
  return best;
}

inline std::vector<std::pair<std::string, Tensor>> masked_params(const nn::Model& model,
                                                                 const nn::ParamMask& mask) {
  for (const auto& name : mask.included) {
    bool known = false;
    for (const auto& [n, t] : model.params()) known = known || n == name;
    if (!known) throw Error("unknown-param", "mask names unknown parameter '" + name + "'");
  }
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : model.params())
    if (mask.contains(name)) out.emplace_back(name, t);
  if (out.empty()) throw Error("empty-mask", "parameter mask selects nothing");
  return out;
}

struct Terms {
  Tensor primal;  // scalar
  Tensor stat;    // scalar (undefined when the mode skips it)
  Tensor total;   // scalar, mode-combined (without the gamma augmentation term)
  Tensor logits;  // (B, C)
};

/// Primal + stationarity terms on one batch. `lambda_vec` must align with
/// `labels`; both cover exactly the candidates stacked into `batch`.
inline Terms eval_terms(const nn::Model& model, const Tensor& batch, const std::vector<int>& labels,
                        const Tensor& lambda_vec, const ExtractConfig& config) {
  Terms t;
  t.logits = model.forward(batch);
  const std::size_t B = labels.size();
  const std::size_t C = static_cast<std::size_t>(model.classes());
  Tensor ce = cross_entropy_rows(t.logits, labels);

  // two-step primal: zero for correctly classified candidates, CE otherwise
  std::vector<double> wrong(B);
  for (std::size_t r = 0; r < B; ++r)
    wrong[r] = argmax_row(t.logits.data().data() + r * C, C) == static_cast<std::size_t>(labels[r])
                   ? 0.0
                   : 1.0;
  t.primal = mean(mul(ce, Tensor::from_data({B}, std::move(wrong))));

  if (config.mode != LossMode::primal_only && config.beta != 0.0) {
    auto masked = masked_params(model, config.mask);
    Tensor weighted = sum(mul(ce, lambda_vec));
    std::vector<Tensor> leaves;
    for (const auto& [name, p] : masked) leaves.push_back(p);
    auto grads = grad(weighted, leaves, /*create_graph=*/true);
    Tensor stat;
    for (std::size_t p = 0; p < leaves.size(); ++p) {
      Tensor g = config.use_signed_sqrt ? signed_sqrt(grads[p]) : grads[p];
      Tensor r = add(leaves[p], g);
      Tensor norm = config.metric == StatMetric::l1 ? l1_norm(r) : l2_norm_sq(r);
      stat = stat.defined() ? add(stat, norm) : norm;
    }
    t.stat = stat;
  }

  switch (config.mode) {
    case LossMode::full:
      t.total = t.stat.defined() ? add(t.primal, mul(t.stat, config.beta)) : t.primal;
      break;
    case LossMode::primal_only:
      t.total = t.primal;
      break;
    case LossMode::stat_only:
      t.total = t.stat.defined() ? mul(t.stat, config.beta) : Tensor::scalar(0.0);
      break;
  }
  return t;
}

struct AliveBatch {
  std::vector<std::size_t> index;  // candidate indices, alive only
  Tensor batch;
  std::vector<int> labels;
  Tensor lambda_vec;
};

inline void upscale_all(std::vector<DsvCandidate>& candidates, const Shape& feature,
                        const Shape& lowres_shape) {
  for (auto& cand : candidates) {
    Tensor up = bilinear_resize(
        reshape(cand.x.detach(), {1, feature[0], lowres_shape[1], lowres_shape[2]}), feature[1],
        feature[2]);
    cand.x = reshape(up, feature).detach().with_grad();
  }
}

inline AliveBatch alive_batch(const std::vector<DsvCandidate>& candidates) {
  AliveBatch ab;
  std::vector<Tensor> xs, ls;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!candidates[i].alive) continue;
    ab.index.push_back(i);
    xs.push_back(candidates[i].x);
    ls.push_back(candidates[i].lambda);
    ab.labels.push_back(candidates[i].y);
  }
  if (xs.empty()) throw Error("no-alive-candidates", "no alive candidates");
  ab.batch = stack(xs);
  ab.lambda_vec = stack(ls);
  return ab;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// the three loss surfaces (model held frozen; only x and lambda are leaves)

/// Two-step primal loss averaged over alive candidates (Eq.-style dead zone:
/// a correctly classified candidate contributes nothing).
inline Tensor primal_loss(const nn::Model& model, const std::vector<DsvCandidate>& candidates) {
  auto ab = detail::alive_batch(candidates);
  ExtractConfig cfg;
  cfg.mode = LossMode::primal_only;
  return detail::eval_terms(model, ab.batch, ab.labels, ab.lambda_vec, cfg).primal;
}

/// Norm of the stationarity residual theta* + sum_i lambda_i grad_theta L_i
/// over the masked parameter vector; differentiable w.r.t. x_i and lambda_i.
inline Tensor stationarity_loss(const nn::Model& model, const std::vector<DsvCandidate>& candidates,
                                const ExtractConfig& config) {
  auto ab = detail::alive_batch(candidates);
  ExtractConfig cfg = config;
  cfg.mode = LossMode::stat_only;
  cfg.beta = 1.0;
  return detail::eval_terms(model, ab.batch, ab.labels, ab.lambda_vec, cfg).stat;
}

/// L_total = L_kkt(X) + gamma * L_kkt(f_A(X)) with one augmentation sample.
inline Tensor kkt_loss(const nn::Model& model, const std::vector<DsvCandidate>& candidates,
                       const ExtractConfig& config, const data::AugSample& aug) {
  auto ab = detail::alive_batch(candidates);
  auto plain = detail::eval_terms(model, ab.batch, ab.labels, ab.lambda_vec, config);
  if (config.gamma == 0.0) return plain.total;
  auto augmented = detail::eval_terms(model, data::apply_augmentation(ab.batch, aug), ab.labels,
                                      ab.lambda_vec, config);
  return add(plain.total, mul(augmented.total, config.gamma));
}

// ---------------------------------------------------------------------------
// synthesis loop (Algorithm-style refinement from noise)

struct SynthResult {
  DsvSet set;
  std::vector<TraceRow> trace;
};

/// Synthesizes N x C candidates from unit Gaussian noise (images: mean 0.5,
/// sigma 0.25, clipped), refining x and lambda by gradient descent on
/// L_total, pruning candidates whose lambda falls below zero, with an
/// optional low-resolution warmup phase on images.
/// `init` overrides the noise initialization (and disables the warmup).
inline SynthResult synthesize(const nn::Model& model, const ExtractConfig& config,
                              const std::vector<DsvCandidate>* init = nullptr) {
  config.validate();
  if (config.classes != model.classes())
    throw Error("bad-config", "config classes do not match the model");
  const Shape feature = model.arch().input_shape;
  const bool image_mode = feature.size() == 3;

  Rng root(config.seed);
  Rng init_rng = root.fork(1);
  Rng aug_rng = root.fork(2);

  int lowres_left = init ? 0 : config.effective_lowres_iterations(image_mode);
  Shape lowres_shape = feature;
  if (image_mode && feature[1] % 2 == 0 && feature[2] % 2 == 0) {
    lowres_shape = {feature[0], feature[1] / 2, feature[2] / 2};
  } else {
    lowres_left = 0;
  }
  bool lowres_phase = lowres_left > 0;

  SynthResult result;
  result.set.feature_shape = feature;
  result.set.classes = config.classes;
  result.set.config_echo = config.serialize();

  if (init) {
    for (const auto& c : *init) {
      if (c.x.shape() != feature)
        throw Error("shape-mismatch", "init candidate does not match the model input shape");
      DsvCandidate copy;
      copy.x = c.x.detach().with_grad();
      copy.y = c.y;
      copy.lambda = c.lambda.defined() ? c.lambda.detach().with_grad()
                                       : Tensor::scalar(config.effective_lambda_init()).with_grad();
      copy.alive = c.alive;
      result.set.candidates.push_back(std::move(copy));
    }
  } else {
    const Shape init_shape = lowres_phase ? lowres_shape : feature;
    for (int c = 0; c < config.classes; ++c)
      for (int i = 0; i < config.n_per_class; ++i) {
        Tensor x = image_mode
                       ? clip01(Tensor::randn(init_shape, init_rng, 0.5, 0.25)).detach().with_grad()
                       : Tensor::randn(init_shape, init_rng).with_grad();
        DsvCandidate cand;
        cand.x = std::move(x);
        cand.y = c;
        cand.lambda = Tensor::scalar(config.effective_lambda_init()).with_grad();
        result.set.candidates.push_back(std::move(cand));
      }
  }

  auto family = data::default_family(image_mode, config.seed);
  auto& candidates = result.set.candidates;

  auto check_class_alive = [&]() {
    auto counts = result.set.alive_per_class();
    for (int c = 0; c < config.classes; ++c)
      if (counts[static_cast<std::size_t>(c)] == 0)
        throw Error("class-died", "all candidates of class " + std::to_string(c) + " died");
  };

  double best_total = std::numeric_limits<double>::infinity();
  int since_improvement = 0;

  for (int t = 0; t < config.iterations; ++t) {
    check_class_alive();
    auto ab = detail::alive_batch(candidates);
    Tensor model_input = lowres_phase ? bilinear_resize(ab.batch, feature[1], feature[2]) : ab.batch;

    auto terms = detail::eval_terms(model, model_input, ab.labels, ab.lambda_vec, config);
    Tensor total = terms.total;
    if (config.gamma != 0.0) {
      auto& member = family[aug_rng.integer(family.size())];
      auto sample = data::draw_augmentation(member);
      auto aug_terms = detail::eval_terms(model, data::apply_augmentation(model_input, sample),
                                          ab.labels, ab.lambda_vec, config);
      total = add(total, mul(aug_terms.total, config.gamma));
    }

    std::vector<Tensor> leaves;
    for (std::size_t i : ab.index) leaves.push_back(candidates[i].x);
    for (std::size_t i : ab.index) leaves.push_back(candidates[i].lambda);
    auto grads = grad(total, leaves, /*create_graph=*/false, /*allow_unused=*/true);

    const std::size_t n_alive = ab.index.size();
    for (std::size_t k = 0; k < n_alive; ++k) {
      auto& cand = candidates[ab.index[k]];
      std::vector<double> xd = cand.x.data();
      const auto& gx = grads[k].data();
      for (std::size_t j = 0; j < xd.size(); ++j) {
        xd[j] -= config.alpha_x * gx[j];
        if (image_mode) xd[j] = std::clamp(xd[j], 0.0, 1.0);
      }
      cand.x = Tensor::from_data(cand.x.shape(), std::move(xd)).with_grad();
      const double lam = cand.lambda.item() - config.alpha_lambda * grads[n_alive + k].item();
      cand.lambda = Tensor::scalar(lam).with_grad();
      if (lam < 0.0) cand.alive = false;  // removed from X for good
    }
    // dual feasibility after the pruning step
    for (const auto& cand : candidates)
      if (cand.alive && cand.lambda_value() < 0.0)
        throw Error("internal", "dual feasibility violated after pruning");

    TraceRow row;
    row.iteration = t;
    row.primal = terms.primal.item();
    row.stat = terms.stat.defined() ? terms.stat.item() : 0.0;
    row.total = total.item();
    row.mean_entropy = detail::mean_entropy(terms.logits);
    row.alive = static_cast<int>(result.set.alive_indices().size());
    result.trace.push_back(row);

    if (row.total < best_total - ExtractConfig::early_stop_tol) {
      best_total = row.total;
      since_improvement = 0;
    } else if (++since_improvement >= ExtractConfig::early_stop_window) {
      break;
    }

    if (lowres_phase && --lowres_left == 0) detail::upscale_all(candidates, feature, lowres_shape), lowres_phase = false;
  }
  // an early stop inside the warmup still has to deliver full-resolution candidates
  if (lowres_phase) detail::upscale_all(candidates, feature, lowres_shape);
  if (config.iterations > 0) check_class_alive();
  return result;
}

// ---------------------------------------------------------------------------
// selection: fit lambda >= 0 over frozen training samples, rank by lambda

struct SelectResult {
  DsvSet set;                                    // all samples with fitted lambdas
  std::vector<std::vector<std::size_t>> ranking;  // per class, sample indices by lambda desc
  std::vector<TraceRow> trace;
};

/// Projected-gradient descent on the stationarity loss over lambda with x
/// frozen to the training samples. Per-sample parameter gradients are
/// precomputed once, so each iteration is plain vector arithmetic with the
/// exact same gradient the autodiff path would produce.
inline SelectResult select(const nn::Model& model, const data::Dataset& dataset,
                           const ExtractConfig& config) {
  if (dataset.size() == 0) throw Error("bad-config", "selection needs a nonempty dataset");
  auto masked = detail::masked_params(model, config.mask);

  std::vector<double> theta;
  for (const auto& [name, p] : masked) theta.insert(theta.end(), p.data().begin(), p.data().end());
  const std::size_t P = theta.size();
  const std::size_t n = dataset.size();

  // per-sample masked gradient of the plain CE loss
  std::vector<std::vector<double>> g(n);
  double entropy_acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor logits = model.forward(dataset.batch({i}));
    entropy_acc += detail::mean_entropy(logits);
    Tensor ce = sum(cross_entropy_rows(logits, {dataset.labels[i]}));
    std::vector<Tensor> leaves;
    for (const auto& [name, p] : masked) leaves.push_back(p);
    auto gs = grad(ce, leaves, false);
    g[i].reserve(P);
    for (const auto& gt : gs) g[i].insert(g[i].end(), gt.data().begin(), gt.data().end());
  }

  std::vector<double> lambda(n, 0.0);  // selection starts from zero multipliers
  std::vector<double> residual = theta;  // theta + sum(lambda g) with lambda = 0

  auto stat_value = [&]() {
    double acc = 0;
    for (double v : residual) acc += config.metric == StatMetric::l1 ? std::fabs(v) : v * v;
    return acc;
  };

  SelectResult result;
  double best = std::numeric_limits<double>::infinity();
  int since_improvement = 0;
  for (int t = 0; t < config.iterations; ++t) {
    // d stat / d lambda_i = sign(r) . g_i  (l1)  or  2 r . g_i  (l2sq)
    std::vector<double> step(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0;
      for (std::size_t p = 0; p < P; ++p) {
        const double r = residual[p];
        acc += (config.metric == StatMetric::l1 ? (r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0)) : 2.0 * r) *
               g[i][p];
      }
      step[i] = acc;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double next = std::max(0.0, lambda[i] - config.alpha_lambda * step[i]);
      const double delta = next - lambda[i];
      if (delta != 0.0) {
        for (std::size_t p = 0; p < P; ++p) residual[p] += delta * g[i][p];
        lambda[i] = next;
      }
    }
    TraceRow row;
    row.iteration = t;
    row.stat = stat_value();
    row.total = row.stat;
    row.mean_entropy = entropy_acc / static_cast<double>(n);
    row.alive = static_cast<int>(n);
    result.trace.push_back(row);
    if (row.total < best - ExtractConfig::early_stop_tol) {
      best = row.total;
      since_improvement = 0;
    } else if (++since_improvement >= ExtractConfig::early_stop_window) {
      break;
    }
  }

  result.set.feature_shape = dataset.feature_shape;
  result.set.classes = dataset.classes;
  result.set.config_echo = config.serialize();
  for (std::size_t i = 0; i < n; ++i) {
    DsvCandidate c;
    c.x = dataset.samples[i];
    c.y = dataset.labels[i];
    c.lambda = Tensor::scalar(lambda[i]);
    result.set.candidates.push_back(std::move(c));
  }

  result.ranking.assign(static_cast<std::size_t>(dataset.classes), {});
  for (std::size_t i = 0; i < n; ++i)
    result.ranking[static_cast<std::size_t>(dataset.labels[i])].push_back(i);
  for (auto& group : result.ranking)
    std::stable_sort(group.begin(), group.end(), [&](std::size_t a, std::size_t b) {
      if (lambda[a] != lambda[b]) return lambda[a] > lambda[b];
      return a < b;  // ties broken by sample index
    });
  return result;
}

// ---------------------------------------------------------------------------
// condition checker

struct KktReport {
  int candidate_count = 0;
  int alive_count = 0;
  std::vector<int> alive_per_class;
  int primal_violations = 0;  // argmax mismatches among alive candidates
  double mean_margin = 0;     // mean gap score_y - max_other
  int within_margin = 0;      // gaps below the configured epsilon
  double margin_eps = 0;
  double min_lambda = 0;
  double stat_l1 = 0;
  double stat_l1_rel = 0;  // relative to ||theta*||_1
  double stat_l2sq = 0;
  double mean_entropy = 0;
  std::vector<std::pair<std::string, double>> aug_consistency;

  std::string to_text() const {
    std::ostringstream os;
    os << "kkt-report\n";
    os << "candidates = " << candidate_count << "\n";
    os << "alive = " << alive_count << "\n";
    os << "alive_per_class =";
    for (int v : alive_per_class) os << " " << v;
    os << "\n";
    os << "primal_violations = " << primal_violations << "\n";
    os << "mean_margin = " << io::format_double(mean_margin) << "\n";
    os << "within_margin = " << within_margin << "\n";
    os << "margin_eps = " << io::format_double(margin_eps) << "\n";
    os << "min_lambda = " << io::format_double(min_lambda) << "\n";
    os << "stat_l1 = " << io::format_double(stat_l1) << "\n";
    os << "stat_l1_rel = " << io::format_double(stat_l1_rel) << "\n";
    os << "stat_l2sq = " << io::format_double(stat_l2sq) << "\n";
    os << "mean_entropy = " << io::format_double(mean_entropy) << "\n";
    for (const auto& [name, rate] : aug_consistency)
      os << "aug_consistency." << name << " = " << io::format_double(rate) << "\n";
    return os.str();
  }

  static KktReport parse(const std::string& text) {
    KktReport rep;
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "kkt-report")
      throw Error("bad-magic", "not a kkt report");
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find(" = ");
      std::string key, value;
      if (eq != std::string::npos) {
        key = line.substr(0, eq);
        value = line.substr(eq + 3);
      } else {
        const auto sp = line.find(" =");
        if (sp == std::string::npos) throw Error("truncated", "malformed report line: " + line);
        key = line.substr(0, sp);
        value = line.substr(sp + 2);
      }
      if (key == "candidates") rep.candidate_count = std::stoi(value);
      else if (key == "alive") rep.alive_count = std::stoi(value);
      else if (key == "alive_per_class") {
        std::istringstream vs(value);
        int v;
        while (vs >> v) rep.alive_per_class.push_back(v);
      } else if (key == "primal_violations") rep.primal_violations = std::stoi(value);
      else if (key == "mean_margin") rep.mean_margin = std::stod(value);
      else if (key == "within_margin") rep.within_margin = std::stoi(value);
      else if (key == "margin_eps") rep.margin_eps = std::stod(value);
      else if (key == "min_lambda") rep.min_lambda = std::stod(value);
      else if (key == "stat_l1") rep.stat_l1 = std::stod(value);
      else if (key == "stat_l1_rel") rep.stat_l1_rel = std::stod(value);
      else if (key == "stat_l2sq") rep.stat_l2sq = std::stod(value);
      else if (key == "mean_entropy") rep.mean_entropy = std::stod(value);
      else if (key.rfind("aug_consistency.", 0) == 0)
        rep.aug_consistency.emplace_back(key.substr(16), std::stod(value));
      else
        throw Error("bad-config", "unknown report key: " + key);
    }
    return rep;
  }
};

/// Evaluates every DeepKKT condition on the alive candidates: primal argmax
/// correctness with margin gaps, dual feasibility (min lambda), stationarity
/// residual in both metrics, prediction entropy, and the manifold condition
/// via augmentation-consistency rates.
inline KktReport check_kkt(const nn::Model& model, const DsvSet& set, const ExtractConfig& config) {
  KktReport rep;
  rep.candidate_count = static_cast<int>(set.candidates.size());
  rep.alive_per_class = set.alive_per_class();
  rep.margin_eps = config.margin_eps;

  auto alive = set.alive_indices();
  rep.alive_count = static_cast<int>(alive.size());
  if (alive.empty()) return rep;

  auto ab = detail::alive_batch(set.candidates);
  Tensor logits = model.forward(ab.batch);
  const std::size_t B = ab.labels.size();
  const std::size_t C = static_cast<std::size_t>(model.classes());

  double margin_acc = 0;
  double min_lambda = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < B; ++r) {
    const double* row = logits.data().data() + r * C;
    const std::size_t am = detail::argmax_row(row, C);
    if (am != static_cast<std::size_t>(ab.labels[r])) ++rep.primal_violations;
    double best_other = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c)
      if (c != static_cast<std::size_t>(ab.labels[r])) best_other = std::max(best_other, row[c]);
    const double gap = row[ab.labels[r]] - best_other;
    margin_acc += gap;
    if (gap < config.margin_eps) ++rep.within_margin;
    min_lambda = std::min(min_lambda, set.candidates[alive[r]].lambda_value());
  }
  rep.mean_margin = margin_acc / static_cast<double>(B);
  rep.min_lambda = min_lambda;
  rep.mean_entropy = detail::mean_entropy(logits);

  // stationarity residual, both metrics, plus the masked theta l1 for scale
  auto masked = detail::masked_params(model, config.mask);
  Tensor ce = cross_entropy_rows(logits, ab.labels);
  Tensor weighted = sum(mul(ce, ab.lambda_vec));
  std::vector<Tensor> leaves;
  for (const auto& [name, p] : masked) leaves.push_back(p);
  auto grads = grad(weighted, leaves, false, /*allow_unused=*/true);
  double l1 = 0, l2 = 0, theta_l1 = 0;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    const auto& th = leaves[p].data();
    const auto& gd = grads[p].data();
    for (std::size_t j = 0; j < th.size(); ++j) {
      double gj = gd[j];
      if (config.use_signed_sqrt) {
        const double a = std::fabs(gj);
        gj = gj / std::sqrt(a + 1e-12);
      }
      const double r = th[j] + gj;
      l1 += std::fabs(r);
      l2 += r * r;
      theta_l1 += std::fabs(th[j]);
    }
  }
  rep.stat_l1 = l1;
  rep.stat_l1_rel = theta_l1 > 0 ? l1 / theta_l1 : 0.0;
  rep.stat_l2sq = l2;

  // manifold condition via argmax consistency under each family member
  auto family = data::default_family(set.feature_shape.size() == 3, config.seed ^ 0xc0ffee);
  std::vector<std::size_t> base_argmax(B);
  for (std::size_t r = 0; r < B; ++r)
    base_argmax[r] = detail::argmax_row(logits.data().data() + r * C, C);
  for (auto& member : family) {
    auto sample = data::draw_augmentation(member);
    Tensor aug_logits = model.forward(data::apply_augmentation(ab.batch, sample));
    std::size_t same = 0;
    for (std::size_t r = 0; r < B; ++r)
      if (detail::argmax_row(aug_logits.data().data() + r * C, C) == base_argmax[r]) ++same;
    std::string name = member.kind == data::AugKind::hflip
                           ? "hflip"
                           : (member.kind == data::AugKind::pad_crop ? "pad_crop" : "jitter");
    rep.aug_consistency.emplace_back(name, static_cast<double>(same) / static_cast<double>(B));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// container and export formats

/// DSVX: magic, version u32 = 1, config echo, classes u32, feature shape,
/// candidate count u64, then per candidate: y u32, lambda f64, alive u8 and
/// the raw little-endian f64 payload of x.
inline void save_dsv_set(const DsvSet& set, const std::string& path) {
  auto os = io::open_out(path);
  os.write("DSVX", 4);
  io::write_u32(os, 1);
  io::write_string(os, set.config_echo);
  io::write_u32(os, static_cast<std::uint32_t>(set.classes));
  io::write_u32(os, static_cast<std::uint32_t>(set.feature_shape.size()));
  for (std::size_t d : set.feature_shape) io::write_u64(os, d);
  io::write_u64(os, set.candidates.size());
  for (const auto& c : set.candidates) {
    io::write_u32(os, static_cast<std::uint32_t>(c.y));
    io::write_f64(os, c.lambda_value());
    io::write_u8(os, c.alive ? 1 : 0);
    if (c.x.shape() != set.feature_shape)
      throw Error("shape-mismatch", "candidate does not match the set feature shape");
    for (double v : c.x.data()) io::write_f64(os, v);
  }
  if (!os) throw Error("io", "failed writing DSV set: " + path);
}

inline DsvSet load_dsv_set(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "DSVX", "DSV set");
  const std::uint32_t version = io::read_u32(is, "version");
  if (version != 1)
    throw Error("version-mismatch", "DSVX version " + std::to_string(version) + ", expected 1");
  DsvSet set;
  set.config_echo = io::read_string(is, "config echo");
  set.classes = static_cast<int>(io::read_u32(is, "classes"));
  const std::uint32_t ndim = io::read_u32(is, "ndim");
  set.feature_shape.resize(ndim);
  for (auto& d : set.feature_shape) d = io::read_u64(is, "dim");
  const std::uint64_t count = io::read_u64(is, "count");
  const std::size_t numel = shape_numel(set.feature_shape);
  for (std::uint64_t i = 0; i < count; ++i) {
    DsvCandidate c;
    c.y = static_cast<int>(io::read_u32(is, "label"));
    const double lambda = io::read_f64(is, "lambda");
    c.alive = io::read_u8(is, "alive") != 0;
    std::vector<double> d(numel);
    for (auto& v : d) v = io::read_f64(is, "candidate data");
    c.x = Tensor::from_data(set.feature_shape, std::move(d));
    c.lambda = Tensor::scalar(lambda);
    set.candidates.push_back(std::move(c));
  }
  return set;
}

/// Trace CSV with a fixed header; floats use shortest round-trip formatting.
inline std::string trace_to_csv(const std::vector<TraceRow>& trace) {
  std::string out = "iteration,L_primal,L_stat,L_total,mean_entropy,alive\n";
  for (const auto& r : trace) {
    out += std::to_string(r.iteration) + "," + io::format_double(r.primal) + "," +
           io::format_double(r.stat) + "," + io::format_double(r.total) + "," +
           io::format_double(r.mean_entropy) + "," + std::to_string(r.alive) + "\n";
  }
  return out;
}

inline std::vector<TraceRow> trace_from_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line) || line != "iteration,L_primal,L_stat,L_total,mean_entropy,alive")
    throw Error("bad-magic", "not a trace csv");
  std::vector<TraceRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    TraceRow r;
    std::getline(ls, field, ',');
    r.iteration = std::stoi(field);
    std::getline(ls, field, ',');
    r.primal = std::stod(field);
    std::getline(ls, field, ',');
    r.stat = std::stod(field);
    std::getline(ls, field, ',');
    r.total = std::stod(field);
    std::getline(ls, field, ',');
    r.mean_entropy = std::stod(field);
    std::getline(ls, field, ',');
    r.alive = std::stoi(field);
    rows.push_back(r);
  }
  return rows;
}

/// PPM grid: one row per class, one cell per candidate (dead cells black).
/// Point-mode sets render as a fixed-size scatter canvas instead.
inline void export_ppm_grid(const DsvSet& set, const std::string& path) {
  if (set.feature_shape.size() == 3) {
    const std::size_t C = set.feature_shape[0], H = set.feature_shape[1], W = set.feature_shape[2];
    const std::size_t classes = static_cast<std::size_t>(set.classes);
    std::size_t per_class = 0;
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < set.candidates.size(); ++i)
      by_class[static_cast<std::size_t>(set.candidates[i].y)].push_back(i);
    for (const auto& g : by_class) per_class = std::max(per_class, g.size());
    per_class = std::max<std::size_t>(per_class, 1);
    const std::size_t width = per_class * W, height = classes * H;
    std::vector<std::uint8_t> rgb(width * height * 3, 0);
    for (std::size_t cls = 0; cls < classes; ++cls)
      for (std::size_t slot = 0; slot < by_class[cls].size(); ++slot) {
        const auto& cand = set.candidates[by_class[cls][slot]];
        if (!cand.alive) continue;  // dead candidates stay black
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w) {
            const std::size_t px = ((cls * H + h) * width + slot * W + w) * 3;
            for (std::size_t ch = 0; ch < 3; ++ch) {
              const std::size_t src_ch = C == 3 ? ch : 0;
              const double v = cand.x.data()[(src_ch * H + h) * W + w];
              rgb[px + ch] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
            }
          }
      }
    io::write_ppm(path, width, height, rgb);
    return;
  }

  // scatter canvas for 2-D point candidates
  const std::size_t S = 200;
  std::vector<std::uint8_t> rgb(S * S * 3, 255);
  double radius = 1.0;
  for (const auto& c : set.candidates)
    for (double v : c.x.data()) radius = std::max(radius, std::fabs(v));
  radius *= 1.1;
  static const std::uint8_t palette[6][3] = {{200, 30, 30},  {30, 110, 200}, {30, 160, 60},
                                             {200, 140, 20}, {130, 60, 180}, {90, 90, 90}};
  for (const auto& c : set.candidates) {
    if (c.x.numel() < 2) continue;
    const double x = c.x.data()[0], y = c.x.data()[1];
    const auto* color = palette[static_cast<std::size_t>(c.y) % 6];
    const std::ptrdiff_t cx = static_cast<std::ptrdiff_t>((x / radius * 0.5 + 0.5) * (S - 1));
    const std::ptrdiff_t cy = static_cast<std::ptrdiff_t>((0.5 - y / radius * 0.5) * (S - 1));
    for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
      for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
        const std::ptrdiff_t px = cx + dx, py = cy + dy;
        if (px < 0 || py < 0 || px >= static_cast<std::ptrdiff_t>(S) || py >= static_cast<std::ptrdiff_t>(S))
          continue;
        const std::size_t at = (static_cast<std::size_t>(py) * S + static_cast<std::size_t>(px)) * 3;
        for (int ch = 0; ch < 3; ++ch)
          rgb[at + static_cast<std::size_t>(ch)] = c.alive ? color[ch] : 160;
      }
  }
  io::write_ppm(path, S, S, rgb);
}

}  // namespace dsv::kkt
