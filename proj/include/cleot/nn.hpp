#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "cleot/errors.hpp"
#include "cleot/rng.hpp"
#include "cleot/tensor.hpp"

namespace cleot {

// Layer specifications.

struct DenseSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  double l2 = 0.0;  // penalty l2 * sum(W^2) on the weights
};
struct ReluSpec {};
struct DropoutSpec {
  double p = 0.5;
};
struct BatchNormSpec {
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
  double epsilon = 1e-3;
};
struct SoftmaxSpec {};

using LayerSpec = std::variant<DenseSpec, ReluSpec, DropoutSpec, BatchNormSpec, SoftmaxSpec>;

enum class Mode { train, eval };

inline const char* layer_name(const LayerSpec& spec) {
  return std::visit(
      [](const auto& s) -> const char* {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, DenseSpec>) return "dense";
        else if constexpr (std::is_same_v<T, ReluSpec>) return "relu";
        else if constexpr (std::is_same_v<T, DropoutSpec>) return "dropout";
        else if constexpr (std::is_same_v<T, BatchNormSpec>) return "batchnorm";
        else return "softmax";
      },
      spec);
}

/// Feed-forward classifier ending in a softmax. Trainable parameters are dense
/// weights/biases and batchnorm scale/shift; batchnorm running statistics are
/// state but not trained.
class DenseNet {
 public:
  struct LayerParams {
    Matrix weight;  // dense: in x out; batchnorm: gamma (1 x f)
    Matrix bias;    // dense: 1 x out;  batchnorm: beta  (1 x f)
    Matrix running_mean;
    Matrix running_var;
  };

  DenseNet() = default;

  explicit DenseNet(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    if (layers_.empty() || !std::holds_alternative<DenseSpec>(layers_.front()))
      throw ContractError("DenseNet: first layer must be dense");
    std::size_t width = std::get<DenseSpec>(layers_.front()).in;
    if (width == 0) throw ContractError("DenseNet: input dimension must be positive");
    input_dim_ = width;
    params_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& spec = layers_[i];
      const bool last = i + 1 == layers_.size();
      if (std::holds_alternative<SoftmaxSpec>(spec) != last)
        throw ContractError("DenseNet: softmax must appear exactly once, as the final layer");
      if (const auto* d = std::get_if<DenseSpec>(&spec)) {
        if (d->in != width)
          throw ShapeError("DenseNet: layer " + std::to_string(i) + " expects input " + std::to_string(d->in) +
                           " but receives " + std::to_string(width));
        if (d->out == 0 || d->l2 < 0.0) throw ContractError("DenseNet: invalid dense layer " + std::to_string(i));
        params_[i].weight = Matrix::Zero(static_cast<Eigen::Index>(d->in), static_cast<Eigen::Index>(d->out));
        params_[i].bias = Matrix::Zero(1, static_cast<Eigen::Index>(d->out));
        width = d->out;
      } else if (const auto* dp = std::get_if<DropoutSpec>(&spec)) {
        if (!(dp->p >= 0.0 && dp->p < 1.0)) throw ContractError("DenseNet: dropout p must lie in [0,1)");
      } else if (const auto* bn = std::get_if<BatchNormSpec>(&spec)) {
        if (!(bn->epsilon > 0.0)) throw ContractError("DenseNet: batchnorm epsilon must be positive");
        if (!(bn->momentum >= 0.0 && bn->momentum <= 1.0))
          throw ContractError("DenseNet: batchnorm momentum must lie in [0,1]");
        const auto f = static_cast<Eigen::Index>(width);
        params_[i].weight = Matrix::Ones(1, f);
        params_[i].bias = Matrix::Zero(1, f);
        params_[i].running_mean = Matrix::Zero(1, f);
        params_[i].running_var = Matrix::Ones(1, f);
      }
    }
    output_dim_ = width;
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return output_dim_; }
  LayerParams& layer_params(std::size_t i) { return params_.at(i); }
  const LayerParams& layer_params(std::size_t i) const { return params_.at(i); }

  /// Glorot-uniform dense weights, zero biases, identity batchnorm.
  void init(Rng& rng) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (const auto* d = std::get_if<DenseSpec>(&layers_[i])) {
        const double limit = std::sqrt(6.0 / static_cast<double>(d->in + d->out));
        auto& w = params_[i].weight;
        for (Eigen::Index r = 0; r < w.rows(); ++r)
          for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = (2.0 * uniform01(rng) - 1.0) * limit;
        params_[i].bias.setZero();
      } else if (std::holds_alternative<BatchNormSpec>(layers_[i])) {
        params_[i].weight.setOnes();
        params_[i].bias.setZero();
        params_[i].running_mean.setZero();
        params_[i].running_var.setOnes();
      }
    }
  }

  /// Trainable tensors in a fixed order: per layer, weight then bias.
  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (has_params(i)) {
        out.push_back(&params_[i].weight);
        out.push_back(&params_[i].bias);
      }
    return out;
  }
  std::vector<const Matrix*> parameters() const {
    std::vector<const Matrix*> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (has_params(i)) {
        out.push_back(&params_[i].weight);
        out.push_back(&params_[i].bias);
      }
    return out;
  }

  /// Every tensor needed to restore the net: parameters then running statistics.
  std::vector<Matrix*> state_tensors() {
    auto out = parameters();
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (std::holds_alternative<BatchNormSpec>(layers_[i])) {
        out.push_back(&params_[i].running_mean);
        out.push_back(&params_[i].running_var);
      }
    return out;
  }
  std::vector<const Matrix*> state_tensors() const {
    auto out = parameters();
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (std::holds_alternative<BatchNormSpec>(layers_[i])) {
        out.push_back(&params_[i].running_mean);
        out.push_back(&params_[i].running_var);
      }
    return out;
  }

  double l2_penalty() const {
    double total = 0.0;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (const auto* d = std::get_if<DenseSpec>(&layers_[i]); d && d->l2 > 0.0)
        total += d->l2 * params_[i].weight.squaredNorm();
    return total;
  }

  bool has_dropout() const {
    for (const auto& l : layers_)
      if (const auto* d = std::get_if<DropoutSpec>(&l); d && d->p > 0.0) return true;
    return false;
  }

 private:
  bool has_params(std::size_t i) const {
    return std::holds_alternative<DenseSpec>(layers_[i]) || std::holds_alternative<BatchNormSpec>(layers_[i]);
  }

  std::vector<LayerSpec> layers_;
  std::vector<LayerParams> params_;
  std::size_t input_dim_ = 0;
  std::size_t output_dim_ = 0;
};

struct MlpOptions {
  std::size_t input = 2;
  std::vector<std::size_t> hidden{256, 256};
  std::size_t classes = 2;
  double dropout = 0.0;  // inserted before the last dense layer when > 0
  bool batchnorm = false;  // batchnorm right before the softmax
  double l2 = 0.0;
};

/// Dense+ReLU hidden stack followed by the classification head.
inline DenseNet make_mlp(const MlpOptions& o) {
  std::vector<LayerSpec> layers;
  std::size_t width = o.input;
  for (std::size_t h : o.hidden) {
    layers.push_back(DenseSpec{width, h, o.l2});
    layers.push_back(ReluSpec{});
    width = h;
  }
  if (o.dropout > 0.0) layers.push_back(DropoutSpec{o.dropout});
  layers.push_back(DenseSpec{width, o.classes, o.l2});
  if (o.batchnorm) layers.push_back(BatchNormSpec{});
  layers.push_back(SoftmaxSpec{});
  return DenseNet(std::move(layers));
}

/// Forward intermediates needed by `backward`.
struct GradientTape {
  struct Cache {
    Matrix input;
    Matrix aux;      // relu/dropout: multiplicative mask; batchnorm: normalized input
    Matrix inv_std;  // batchnorm: 1 / sqrt(var + eps) used for this pass
    Matrix output;   // softmax probabilities
  };
  bool recorded = false;
  Mode mode = Mode::eval;
  std::vector<Cache> caches;
};

struct ForwardResult {
  Matrix output;
  GradientTape tape;
};

struct Gradients {
  std::vector<Matrix> params;  // aligned with DenseNet::parameters()
  Matrix input;
};

namespace detail {

inline void check_finite(const Matrix& m, std::size_t layer, const LayerSpec& spec) {
  if (!m.allFinite())
    throw NumericError("forward: non-finite activation at layer " + std::to_string(layer) + " (" + layer_name(spec) + ")");
}

}  // namespace detail

namespace detail {

// `stats` receives batchnorm running-statistic updates in train mode.
inline ForwardResult forward_impl(const DenseNet& net, const Matrix& x, Mode mode, Rng* rng, DenseNet* stats) {
  if (static_cast<std::size_t>(x.cols()) != net.input_dim())
    throw ShapeError("forward: input has " + std::to_string(x.cols()) + " features, net expects " +
                     std::to_string(net.input_dim()));
  if (mode == Mode::train && net.has_dropout() && rng == nullptr)
    throw ContractError("forward: train mode with dropout requires a generator");

  ForwardResult res;
  res.tape.mode = mode;
  res.tape.caches.resize(net.layers().size());
  Matrix h = x;
  const auto m = static_cast<double>(x.rows());
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& spec = net.layers()[i];
    const auto& p = net.layer_params(i);
    auto& cache = res.tape.caches[i];
    cache.input = h;
    if (std::holds_alternative<DenseSpec>(spec)) {
      h = h * p.weight;
      h.rowwise() += p.bias.row(0);
    } else if (std::holds_alternative<ReluSpec>(spec)) {
      cache.aux = (h.array() > 0.0).cast<double>().matrix();
      h = h.cwiseMax(0.0);
    } else if (const auto* dp = std::get_if<DropoutSpec>(&spec)) {
      if (mode == Mode::train && dp->p > 0.0) {
        cache.aux.resize(h.rows(), h.cols());
        const double keep = 1.0 - dp->p;
        for (Eigen::Index r = 0; r < h.rows(); ++r)
          for (Eigen::Index c = 0; c < h.cols(); ++c) cache.aux(r, c) = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
        h = h.cwiseProduct(cache.aux);
      } else {
        cache.aux = Matrix::Ones(h.rows(), h.cols());
      }
    } else if (const auto* bn = std::get_if<BatchNormSpec>(&spec)) {
      Matrix mean, var;
      if (mode == Mode::train) {
        mean = h.colwise().mean();
        Matrix centered = h.rowwise() - mean.row(0);
        var = centered.array().square().colwise().sum().matrix() / m;
        if (stats) {
          auto& sp = stats->layer_params(i);
          sp.running_mean = bn->momentum * sp.running_mean + (1.0 - bn->momentum) * mean;
          sp.running_var = bn->momentum * sp.running_var + (1.0 - bn->momentum) * var;
        }
      } else {
        mean = p.running_mean;
        var = p.running_var;
      }
      cache.inv_std = (var.array() + bn->epsilon).rsqrt().matrix();
      cache.aux = (h.rowwise() - mean.row(0)).array().rowwise() * cache.inv_std.row(0).array();
      h = (cache.aux.array().rowwise() * p.weight.row(0).array()).matrix();
      h.rowwise() += p.bias.row(0);
    } else {
      h = softmax_rows(h);
      cache.output = h;
    }
    detail::check_finite(h, i, spec);
  }
  res.output = std::move(h);
  res.tape.recorded = true;
  return res;
}

}  // namespace detail

/// Runs the net on a batch and records a tape. Train mode uses batch
/// statistics for batchnorm (and updates the running statistics) and samples
/// dropout masks from `rng`; eval mode is a pure function of `net` and `x`.
inline ForwardResult forward(DenseNet& net, const Matrix& x, Mode mode, Rng* rng = nullptr) {
  return detail::forward_impl(net, x, mode, rng, &net);
}

/// Eval-mode probabilities.
inline Matrix predict(const DenseNet& net, const Matrix& x) {
  return detail::forward_impl(net, x, Mode::eval, nullptr, nullptr).output;
}

/// Reverse pass: gradients of a scalar loss whose gradient w.r.t. the net's
/// output probabilities is `output_grad`. Dense weight gradients include the
/// derivative of the l2 penalty.
inline Gradients backward(const DenseNet& net, const GradientTape& tape, const Matrix& output_grad) {
  if (!tape.recorded) throw StateError("backward: no forward pass recorded on this tape");
  if (tape.caches.size() != net.layers().size()) throw StateError("backward: tape was recorded on a different net");
  const auto& last = tape.caches.back().output;
  require_same_shape(last, output_grad, "backward: output gradient");

  std::vector<Matrix> layer_w(net.layers().size()), layer_b(net.layers().size());
  Matrix g = output_grad;
  for (std::size_t k = net.layers().size(); k-- > 0;) {
    const auto& spec = net.layers()[k];
    const auto& cache = tape.caches[k];
    const auto& p = net.layer_params(k);
    if (const auto* d = std::get_if<DenseSpec>(&spec)) {
      layer_w[k] = cache.input.transpose() * g;
      if (d->l2 > 0.0) layer_w[k] += 2.0 * d->l2 * p.weight;
      layer_b[k] = g.colwise().sum();
      g = g * p.weight.transpose();
    } else if (std::holds_alternative<ReluSpec>(spec) || std::holds_alternative<DropoutSpec>(spec)) {
      g = g.cwiseProduct(cache.aux);
    } else if (std::holds_alternative<BatchNormSpec>(spec)) {
      const Matrix& xhat = cache.aux;
      layer_w[k] = g.cwiseProduct(xhat).colwise().sum();
      layer_b[k] = g.colwise().sum();
      Matrix gx_hat = (g.array().rowwise() * p.weight.row(0).array()).matrix();
      if (tape.mode == Mode::train) {
        const auto m = static_cast<double>(g.rows());
        const Matrix sum_g = gx_hat.colwise().sum();
        const Matrix sum_gx = gx_hat.cwiseProduct(xhat).colwise().sum();
        Matrix t = (m * gx_hat).rowwise() - sum_g.row(0);
        t -= (xhat.array().rowwise() * sum_gx.row(0).array()).matrix();
        g = (t.array().rowwise() * (cache.inv_std.row(0).array() / m)).matrix();
      } else {
        g = (gx_hat.array().rowwise() * cache.inv_std.row(0).array()).matrix();
      }
    } else {
      g = softmax_backward(cache.output, g);
    }
  }

  Gradients out;
  for (std::size_t k = 0; k < net.layers().size(); ++k)
    if (std::holds_alternative<DenseSpec>(net.layers()[k]) || std::holds_alternative<BatchNormSpec>(net.layers()[k])) {
      out.params.push_back(std::move(layer_w[k]));
      out.params.push_back(std::move(layer_b[k]));
    }
  out.input = std::move(g);
  return out;
}

/// Classic momentum SGD: v <- m v - lr g, theta <- theta + v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0)) throw ContractError("SgdMomentum: learning rate must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("SgdMomentum: momentum must lie in [0,1)");
  }

  double learning_rate() const { return lr_; }
  double momentum() const { return momentum_; }
  void reset() { velocity_.clear(); }

  void step(DenseNet& net, const std::vector<Matrix>& grads) {
    auto params = net.parameters();
    if (grads.size() != params.size())
      throw ShapeError("SgdMomentum: " + std::to_string(grads.size()) + " gradients for " +
                       std::to_string(params.size()) + " parameters");
    if (velocity_.empty())
      for (const auto* p : params) velocity_.push_back(Matrix::Zero(p->rows(), p->cols()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      require_same_shape(*params[i], grads[i], "SgdMomentum: gradient");
      require_same_shape(*params[i], velocity_[i], "SgdMomentum: velocity");
      velocity_[i] = momentum_ * velocity_[i] - lr_ * grads[i];
      *params[i] += velocity_[i];
    }
  }

 private:
  double lr_;
  double momentum_;
  std::vector<Matrix> velocity_;
};

// Checkpoint format: "CLNN", u64 tensor count, (u64 rows, u64 cols) per
// tensor, then every tensor's entries row-major as little-endian f64.

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const DenseNet& net, std::ostream& os) {
  const auto tensors = net.state_tensors();
  os.write("CLNN", 4);
  detail::put_u64(os, tensors.size());
  for (const auto* t : tensors) {
    detail::put_u64(os, static_cast<std::uint64_t>(t->rows()));
    detail::put_u64(os, static_cast<std::uint64_t>(t->cols()));
  }
  for (const auto* t : tensors)
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      std::uint64_t bits;
      const double v = t->data()[i];
      std::memcpy(&bits, &v, 8);
      detail::put_u64(os, bits);
    }
}

inline void save_checkpoint(const DenseNet& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_checkpoint: cannot open " + path);
  save_checkpoint(net, os);
}

/// Loads into a net of the same architecture; shapes must match exactly.
inline void load_checkpoint(DenseNet& net, std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CLNN", 4) != 0) throw ParseError("checkpoint: bad magic");
  auto tensors = net.state_tensors();
  const auto count = detail::get_u64(is);
  if (count != tensors.size())
    throw ShapeError("checkpoint: " + std::to_string(count) + " tensors, net has " + std::to_string(tensors.size()));
  for (auto* t : tensors) {
    const auto rows = detail::get_u64(is);
    const auto cols = detail::get_u64(is);
    if (rows != static_cast<std::uint64_t>(t->rows()) || cols != static_cast<std::uint64_t>(t->cols()))
      throw ShapeError("checkpoint: tensor shape mismatch");
  }
  for (auto* t : tensors)
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      const std::uint64_t bits = detail::get_u64(is);
      std::memcpy(t->data() + i, &bits, 8);
    }
}

inline void load_checkpoint(DenseNet& net, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_checkpoint: cannot open " + path);
  load_checkpoint(net, is);
}

}  // namespace cleot
