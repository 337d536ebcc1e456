#pragma once

// Model definitions (linear, MLP, ConvNet), parameter flattening/masking and
// checkpoint persistence.

#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsv/error.hpp"
#include "dsv/io.hpp"
#include "dsv/rng.hpp"
#include "dsv/tensor.hpp"

namespace dsv::nn {

enum class ArchKind { linear, mlp, convnet };

inline std::string arch_kind_name(ArchKind k) {
  switch (k) {
    case ArchKind::linear: return "linear";
    case ArchKind::mlp: return "mlp";
    case ArchKind::convnet: return "convnet";
  }
  return "?";
}

/// Architecture descriptor. input_shape excludes the batch axis:
/// {D} for vector inputs, {C, H, W} for images.
struct Arch {
  ArchKind kind = ArchKind::linear;
  Shape input_shape;
  int classes = 2;
  std::vector<int> hidden;  // mlp only
  int blocks = 3;           // convnet only
  int channels = 32;        // convnet only

  std::string serialize() const {
    std::ostringstream os;
    os << "kind=" << arch_kind_name(kind) << ";in=";
    for (std::size_t i = 0; i < input_shape.size(); ++i) {
      if (i) os << ",";
      os << input_shape[i];
    }
    os << ";classes=" << classes << ";hidden=";
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      if (i) os << ",";
      os << hidden[i];
    }
    os << ";blocks=" << blocks << ";channels=" << channels;
    return os.str();
  }

  static Arch parse(const std::string& text) {
    Arch a;
    a.input_shape.clear();
    a.hidden.clear();
    std::istringstream is(text);
    std::string field;
    while (std::getline(is, field, ';')) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw Error("bad-descriptor", "malformed architecture field: " + field);
      const std::string key = field.substr(0, eq);
      const std::string val = field.substr(eq + 1);
      auto parse_ints = [](const std::string& s) {
        std::vector<long> out;
        std::istringstream vs(s);
        std::string item;
        while (std::getline(vs, item, ','))
          if (!item.empty()) out.push_back(std::stol(item));
        return out;
      };
      if (key == "kind") {
        if (val == "linear") a.kind = ArchKind::linear;
        else if (val == "mlp") a.kind = ArchKind::mlp;
        else if (val == "convnet") a.kind = ArchKind::convnet;
        else throw Error("bad-descriptor", "unknown architecture kind: " + val);
      } else if (key == "in") {
        for (long v : parse_ints(val)) a.input_shape.push_back(static_cast<std::size_t>(v));
      } else if (key == "classes") {
        a.classes = std::stoi(val);
      } else if (key == "hidden") {
        for (long v : parse_ints(val)) a.hidden.push_back(static_cast<int>(v));
      } else if (key == "blocks") {
        a.blocks = std::stoi(val);
      } else if (key == "channels") {
        a.channels = std::stoi(val);
      } else {
        throw Error("bad-descriptor", "unknown architecture field: " + key);
      }
    }
    return a;
  }

  bool operator==(const Arch& other) const { return serialize() == other.serialize(); }
};

/// Per-parameter inclusion flags, in the model's declared parameter order.
struct ParamMask {
  bool all = true;
  std::vector<std::string> included;  // consulted when !all; may be empty

  static ParamMask full() { return ParamMask{}; }

  static ParamMask of(std::vector<std::string> names) {
    ParamMask m;
    m.all = false;
    m.included = std::move(names);
    return m;
  }

  bool contains(const std::string& name) const {
    if (all) return true;
    for (const auto& n : included)
      if (n == name) return true;
    return false;
  }
};

/// Named ordered parameters plus the forward map to C logits.
class Model {
 public:
  Model() = default;
  Model(Arch arch, std::vector<std::pair<std::string, Tensor>> params)
      : arch_(std::move(arch)), params_(std::move(params)) {}

  /// Seeded He-style uniform fan-in initialization; biases start at zero.
  static Model init(const Arch& arch, Rng& rng) {
    std::vector<std::pair<std::string, Tensor>> params;
    auto he = [&rng](Shape shape, std::size_t fan_in) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::vector<double> d(shape_numel(shape));
      for (double& v : d) v = rng.uniform(-bound, bound);
      return Tensor::from_data(std::move(shape), std::move(d)).with_grad();
    };
    const std::size_t C = static_cast<std::size_t>(arch.classes);
    switch (arch.kind) {
      case ArchKind::linear: {
        if (arch.input_shape.size() != 1)
          throw Error("bad-descriptor", "linear model expects a flat input shape");
        const std::size_t D = arch.input_shape[0];
        params.emplace_back("fc.w", he({D, C}, D));
        params.emplace_back("fc.b", Tensor::zeros({C}).with_grad());
        break;
      }
      case ArchKind::mlp: {
        if (arch.input_shape.size() != 1)
          throw Error("bad-descriptor", "mlp model expects a flat input shape");
        std::size_t prev = arch.input_shape[0];
        for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
          const std::size_t width = static_cast<std::size_t>(arch.hidden[l]);
          params.emplace_back("layer" + std::to_string(l) + ".w", he({prev, width}, prev));
          params.emplace_back("layer" + std::to_string(l) + ".b", Tensor::zeros({width}).with_grad());
          prev = width;
        }
        params.emplace_back("fc.w", he({prev, C}, prev));
        params.emplace_back("fc.b", Tensor::zeros({C}).with_grad());
        break;
      }
      case ArchKind::convnet: {
        if (arch.input_shape.size() != 3)
          throw Error("bad-descriptor", "convnet expects a (C, H, W) input shape");
        std::size_t cin = arch.input_shape[0];
        std::size_t h = arch.input_shape[1], w = arch.input_shape[2];
        const std::size_t ch = static_cast<std::size_t>(arch.channels);
        for (int b = 0; b < arch.blocks; ++b) {
          if (h % 2 != 0 || w % 2 != 0)
            throw Error("bad-descriptor", "convnet input does not survive " +
                                              std::to_string(arch.blocks) + " pooling stages");
          params.emplace_back("conv" + std::to_string(b) + ".k", he({ch, cin, 3, 3}, cin * 9));
          params.emplace_back("conv" + std::to_string(b) + ".b", Tensor::zeros({ch}).with_grad());
          cin = ch;
          h /= 2;
          w /= 2;
        }
        const std::size_t feat = cin * h * w;
        params.emplace_back("fc.w", he({feat, C}, feat));
        params.emplace_back("fc.b", Tensor::zeros({C}).with_grad());
        break;
      }
    }
    return Model(arch, std::move(params));
  }

  const Arch& arch() const { return arch_; }
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  int classes() const { return arch_.classes; }

  const Tensor& param(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw Error("unknown-param", "no parameter named '" + name + "'");
  }

  /// New model with the same architecture and replaced parameter tensors.
  Model with_params(std::vector<std::pair<std::string, Tensor>> params) const {
    return Model(arch_, std::move(params));
  }

  /// Batched forward pass producing (B, C) logits.
  /// x: (B, D) for linear/mlp, (B, C, H, W) for convnet.
  Tensor forward(const Tensor& x) const {
    switch (arch_.kind) {
      case ArchKind::linear: {
        check_batch_shape(x, 2);
        return affine(x, "fc");
      }
      case ArchKind::mlp: {
        check_batch_shape(x, 2);
        Tensor h = x;
        for (std::size_t l = 0; l < arch_.hidden.size(); ++l)
          h = relu(affine(h, "layer" + std::to_string(l)));
        return affine(h, "fc");
      }
      case ArchKind::convnet: {
        check_batch_shape(x, 4);
        Tensor h = x;
        for (int b = 0; b < arch_.blocks; ++b)
          h = maxpool2x2(relu(conv2d(h, param("conv" + std::to_string(b) + ".k"),
                                     param("conv" + std::to_string(b) + ".b"))));
        const std::size_t B = x.shape()[0];
        return affine(reshape(h, {B, h.numel() / B}), "fc");
      }
    }
    throw Error("internal", "unreachable");
  }

 private:
  void check_batch_shape(const Tensor& x, std::size_t want_rank) const {
    if (x.rank() != want_rank)
      throw Error("shape-mismatch", "forward: input rank " + std::to_string(x.rank()) + ", expected " +
                                        std::to_string(want_rank));
    Shape feature(x.shape().begin() + 1, x.shape().end());
    if (feature != arch_.input_shape)
      throw Error("shape-mismatch", "forward: feature shape " + shape_str(feature) + " does not match " +
                                        shape_str(arch_.input_shape));
  }

  Tensor affine(const Tensor& x, const std::string& prefix) const {
    const Tensor& w = param(prefix + ".w");
    const Tensor& b = param(prefix + ".b");
    const std::size_t B = x.shape()[0];
    Tensor out = matmul(x, w);
    return add(out, matmul(Tensor::ones({B, 1}), reshape(b, {1, b.numel()})));
  }

  Arch arch_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

/// Concatenation of the included parameters in declared order.
inline Tensor flatten_params(const Model& model, const ParamMask& mask = ParamMask::full()) {
  for (const auto& name : mask.included) {
    bool known = false;
    for (const auto& [n, t] : model.params()) known = known || n == name;
    if (!known) throw Error("unknown-param", "mask names unknown parameter '" + name + "'");
  }
  std::vector<double> flat;
  for (const auto& [name, t] : model.params())
    if (mask.contains(name)) flat.insert(flat.end(), t.data().begin(), t.data().end());
  if (flat.empty()) throw Error("empty-mask", "parameter mask selects nothing");
  Shape s{flat.size()};
  return Tensor::from_data(std::move(s), std::move(flat));
}

/// Writes a flat vector back into (a copy of) the model's parameters.
inline Model unflatten_params(const Model& model, const Tensor& flat,
                              const ParamMask& mask = ParamMask::full()) {
  std::vector<std::pair<std::string, Tensor>> params;
  std::size_t off = 0;
  for (const auto& [name, t] : model.params()) {
    if (mask.contains(name)) {
      if (off + t.numel() > flat.numel()) throw Error("shape-mismatch", "flat vector too short");
      std::vector<double> d(flat.data().begin() + static_cast<std::ptrdiff_t>(off),
                            flat.data().begin() + static_cast<std::ptrdiff_t>(off + t.numel()));
      params.emplace_back(name, Tensor::from_data(t.shape(), std::move(d)).with_grad());
      off += t.numel();
    } else {
      params.emplace_back(name, t);
    }
  }
  if (off != flat.numel()) throw Error("shape-mismatch", "flat vector length does not match mask");
  return model.with_params(std::move(params));
}

/// Mask selecting only the final fully-connected classifier layer.
inline ParamMask last_layer_mask(const Model&) { return ParamMask::of({"fc.w", "fc.b"}); }

// ---------------------------------------------------------------------------
// checkpoint format: magic "DSVC", version u32 = 1, architecture descriptor as
// a length-prefixed UTF-8 string, parameter count u64, then per parameter:
// name, ndim u32, dims u64 each, raw little-endian f64 data.

inline void save_checkpoint(const Model& model, const std::string& path) {
  auto os = io::open_out(path);
  os.write("DSVC", 4);
  io::write_u32(os, 1);
  io::write_string(os, model.arch().serialize());
  io::write_u64(os, model.params().size());
  for (const auto& [name, t] : model.params()) {
    io::write_string(os, name);
    io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::write_u64(os, d);
    for (double v : t.data()) io::write_f64(os, v);
  }
  if (!os) throw Error("io", "failed writing checkpoint: " + path);
}

inline Model load_checkpoint(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "DSVC", "checkpoint");
  const std::uint32_t version = io::read_u32(is, "version");
  if (version != 1)
    throw Error("version-mismatch", "checkpoint version " + std::to_string(version) + ", expected 1");
  Arch arch = Arch::parse(io::read_string(is, "descriptor"));
  const std::uint64_t count = io::read_u64(is, "parameter count");
  std::vector<std::pair<std::string, Tensor>> params;
  for (std::uint64_t p = 0; p < count; ++p) {
    std::string name = io::read_string(is, "parameter name");
    const std::uint32_t ndim = io::read_u32(is, "ndim");
    Shape shape(ndim);
    for (auto& d : shape) d = io::read_u64(is, "dim");
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = io::read_f64(is, "parameter data");
    params.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)).with_grad());
  }

  // the descriptor must agree with the stored parameter shapes
  Rng probe_rng(0);
  Model reference = Model::init(arch, probe_rng);
  if (reference.params().size() != params.size())
    throw Error("shape-mismatch", "checkpoint parameter count does not match architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != reference.params()[i].first ||
        params[i].second.shape() != reference.params()[i].second.shape())
      throw Error("shape-mismatch", "checkpoint parameter '" + params[i].first +
                                        "' does not match the architecture descriptor");
  }
  return Model(std::move(arch), std::move(params));
}

/// Linear two-logit model [w~/2, -w~/2] built from a binary separating
/// hyperplane w~ = [w; b]; its logit gap equals w~.[x;1].
inline Model linear_from_binary(const std::vector<double>& w_tilde) {
  if (w_tilde.size() < 2) throw Error("shape-mismatch", "binary hyperplane needs at least [w;b]");
  const std::size_t D = w_tilde.size() - 1;
  Arch arch;
  arch.kind = ArchKind::linear;
  arch.input_shape = {D};
  arch.classes = 2;
  std::vector<double> w(D * 2);
  for (std::size_t i = 0; i < D; ++i) {
    w[i * 2 + 0] = -w_tilde[i] / 2.0;  // class 0 = label -1
    w[i * 2 + 1] = w_tilde[i] / 2.0;   // class 1 = label +1
  }
  std::vector<double> b{-w_tilde[D] / 2.0, w_tilde[D] / 2.0};
  std::vector<std::pair<std::string, Tensor>> params;
  params.emplace_back("fc.w", Tensor::from_data({D, 2}, std::move(w)).with_grad());
  params.emplace_back("fc.b", Tensor::from_data({2}, std::move(b)).with_grad());
  return Model(arch, std::move(params));
}

}  // namespace dsv::nn
