#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "marginpick/core/rng.hpp"
#include "marginpick/nn/config.hpp"
#include "marginpick/nn/constrained.hpp"
#include "marginpick/tensor/graph.hpp"
#include "marginpick/tensor/ops.hpp"

namespace mp {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

struct StageInfo {
  std::string id;
  std::string kind;
};

// Latent roster: L0 input, L1 constrained conv, L2-L5 block outputs,
// L6-L7 hidden fully connected outputs, L8 logits.
inline constexpr std::size_t kLatentCount = 9;
inline constexpr std::size_t kLogitsLayer = 8;
inline constexpr std::size_t kNumClasses = 2;
inline constexpr std::size_t kInputChannels = 3;
inline constexpr std::size_t kConstrainedFilters = 3;
inline constexpr std::size_t kConstrainedKernel = 5;
inline constexpr std::size_t kHiddenUnits = 200;

template <typename T>
struct DetectorGraph {
  Graph<T> graph;
  NodeId input = 0;
  std::optional<NodeId> labels;
  std::optional<NodeId> loss;
  NodeId logits = 0;
  std::array<NodeId, kLatentCount> latents{};
};

/// Constrained-convolution splicing detector:
///
///   ConstrainedConv(3, 5x5)
///   -> [Conv(96w, 7x7, /2) Norm ReLU Pool] -> [Conv(64w, 5x5) Norm ReLU Pool]
///   -> [Conv(64w, 5x5) Norm ReLU Pool]     -> [Conv(128w, 1x1) Norm ReLU GlobalAvgPool]
///   -> FC(200) ReLU Dropout -> FC(200) ReLU Dropout -> FC(2)
///
/// Convolutions use zero "same" padding; pools are 3x3 with stride 2.
/// The constrained kernel is kept in a 64-bit master copy so the projection
/// holds to double precision; the compute copy is refreshed from it.
template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    walk_shapes();
    build_parameters();
    initialize();
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<StageInfo>& stages() const { return stages_; }

  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  std::vector<NamedTensor<T>>& buffers() { return buffers_; }
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }

  Tensor<T>& parameter(std::string_view name) { return find(params_, name); }
  const Tensor<T>& parameter(std::string_view name) const {
    return const_cast<Model*>(this)->find(params_, name);
  }
  Tensor<T>& buffer(std::string_view name) { return find(buffers_, name); }

  Tensor<double>& constrained_master() { return constrained_master_; }
  const Tensor<double>& constrained_master() const { return constrained_master_; }

  // Re-projects the master kernel and copies it into the compute parameter.
  std::size_t enforce_constraint(Rng& rng) {
    const std::size_t redrawn = project_or_reinitialize(constrained_master_, init_bound(75), rng);
    refresh_constrained();
    return redrawn;
  }

  void refresh_constrained() {
    Tensor<T>& w = params_[0].value;
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(constrained_master_[i]);
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.value.ensure_grad();
      p.value.zero_grad();
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Builds the detector graph for a fixed batch size. With `with_loss`, a
  /// label input (N) and a mean cross-entropy node are appended.
  DetectorGraph<T> graph(std::size_t batch, bool with_loss = false, std::uint64_t dropout_seed = 0) const {
    auto& self = const_cast<Model&>(*this);
    DetectorGraph<T> d;
    Graph<T>& g = d.graph;
    const std::size_t P = config_.patch_size;
    d.input = g.input({batch, kInputChannels, P, P}, "L0.input");
    d.latents[0] = d.input;
    auto param = [&](std::string_view name) { return g.parameter(self.parameter(name), std::string(name)); };

    NodeId h = ops::conv2d(g, d.input, param("constrained.weight"), std::nullopt, 1, kConstrainedKernel / 2,
                           "constrained");
    d.latents[1] = h;
    const std::array<std::size_t, 4> kernels = {7, 5, 5, 1};
    for (std::size_t b = 0; b < 4; ++b) {
      const std::string id = cat("block", b + 1);
      h = ops::conv2d(g, h, param(id + ".conv.weight"), param(id + ".conv.bias"), b == 0 ? 2 : 1,
                      kernels[b] / 2, id + ".conv");
      h = normalization(g, self, h, id);
      h = ops::relu(g, h, id + ".relu");
      if (b < 3) {
        h = ops::pool2d(g, h, config_.pooling, 3, 2, id + ".pool");
      } else {
        h = ops::global_avg_pool(g, h, id + ".pool");
      }
      d.latents[2 + b] = h;
    }
    for (std::size_t f = 0; f < 2; ++f) {
      const std::string id = cat("fc", f + 1);
      h = ops::linear(g, h, param(id + ".weight"), param(id + ".bias"), id);
      h = ops::relu(g, h, id + ".relu");
      d.latents[6 + f] = h;
      h = ops::dropout(g, h, config_.dropout_rate, hash_combine(dropout_seed, f + 1), id + ".dropout");
    }
    d.logits = ops::linear(g, h, param("fc3.weight"), param("fc3.bias"), "fc3.logits");
    d.latents[kLogitsLayer] = d.logits;
    if (with_loss) {
      d.labels = g.input({batch}, "labels");
      d.loss = ops::softmax_cross_entropy(g, d.logits, *d.labels, "loss");
    }
    return d;
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.parameters()[i].value = params_[i].value.template cast<U>();
    for (std::size_t i = 0; i < buffers_.size(); ++i) out.buffers()[i].value = buffers_[i].value.template cast<U>();
    out.constrained_master() = constrained_master_;
    return out;
  }

 private:
  static double init_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

  static Tensor<T>& find(std::vector<NamedTensor<T>>& list, std::string_view name) {
    for (auto& p : list) {
      if (p.name == name) return p.value;
    }
    fail(ErrorKind::not_found, "no tensor named '", name, "'");
  }

  NodeId normalization(Graph<T>& g, Model& self, NodeId h, const std::string& id) const {
    const std::string n = id + ".norm";
    if (config_.normalization == Normalization::local_response) {
      return g.apply(std::make_unique<ops::LocalResponseNormOp<T>>(), {h}, n);
    }
    const NodeId gamma = g.parameter(self.parameter(n + ".gamma"), n + ".gamma");
    const NodeId beta = g.parameter(self.parameter(n + ".beta"), n + ".beta");
    std::unique_ptr<Op<T>> op;
    switch (config_.normalization) {
      case Normalization::instance:
        op = std::make_unique<ops::GroupStandardizeOp<T>>(0, "instance_norm");
        break;
      case Normalization::layer:
        op = std::make_unique<ops::GroupStandardizeOp<T>>(1, "layer_norm");
        break;
      case Normalization::group:
        op = std::make_unique<ops::GroupStandardizeOp<T>>(kGroupNormGroups, "group_norm");
        break;
      case Normalization::batch:
        op = std::make_unique<ops::BatchNormOp<T>>(&self.buffer(n + ".running_mean"),
                                                   &self.buffer(n + ".running_var"));
        break;
      default:
        break;
    }
    return g.apply(std::move(op), {h, gamma, beta}, n);
  }

  // Spatial extents through the stride plan; fails naming the first stage
  // whose extent would reach zero.
  void walk_shapes() const {
    std::size_t s = config_.patch_size;
    s = (s + 6 - 7) / 2 + 1;  // block1 conv, stride 2
    for (std::size_t b = 0; b < 3; ++b) {
      if (s < 3) {
        fail(ErrorKind::config, "patch_size ", config_.patch_size, " too small: block", b + 1,
             ".pool sees extent ", s, " < 3");
      }
      s = (s - 3) / 2 + 1;
    }
  }

  void add_param(std::string name, Shape shape) { params_.push_back({std::move(name), Tensor<T>(std::move(shape))}); }

  void build_parameters() {
    const auto widths = config_.block_widths();
    stages_.push_back({"constrained", "constrained_conv"});
    add_param("constrained.weight", {kConstrainedFilters, kInputChannels, kConstrainedKernel, kConstrainedKernel});
    const std::array<std::size_t, 4> kernels = {7, 5, 5, 1};
    std::size_t in = kConstrainedFilters;
    for (std::size_t b = 0; b < 4; ++b) {
      const std::string id = cat("block", b + 1);
      const std::size_t out = widths[b];
      stages_.push_back({id + ".conv", "conv"});
      add_param(id + ".conv.weight", {out, in, kernels[b], kernels[b]});
      add_param(id + ".conv.bias", {out});
      stages_.push_back({id + ".norm", std::string(to_string(config_.normalization))});
      if (config_.normalization != Normalization::local_response) {
        add_param(id + ".norm.gamma", {out});
        add_param(id + ".norm.beta", {out});
      }
      if (config_.normalization == Normalization::batch) {
        buffers_.push_back({id + ".norm.running_mean", Tensor<T>({out}, T{0})});
        buffers_.push_back({id + ".norm.running_var", Tensor<T>({out}, T{1})});
      }
      stages_.push_back({id + ".pool", b < 3 ? std::string(to_string(config_.pooling)) : "global_average"});
      in = out;
    }
    const std::array<std::size_t, 3> fc_out = {kHiddenUnits, kHiddenUnits, kNumClasses};
    for (std::size_t f = 0; f < 3; ++f) {
      const std::string id = cat("fc", f + 1);
      stages_.push_back({id, f < 2 ? "linear_relu_dropout" : "linear"});
      add_param(id + ".weight", {fc_out[f], in});
      add_param(id + ".bias", {fc_out[f]});
      in = fc_out[f];
    }
    constrained_master_ = Tensor<double>(params_[0].value.shape());
  }

  // Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
  // biases; norm scales 1, shifts 0. The bias of a layer shares its weight's fan-in.
  void initialize() {
    Rng rng(substream(config_.seed, "init"));
    std::size_t fan_in = 0;
    for (auto& p : params_) {
      Tensor<T>& t = p.value;
      if (p.name.ends_with(".gamma")) {
        t.fill(T{1});
        continue;
      }
      if (p.name.ends_with(".beta")) {
        t.fill(T{0});
        continue;
      }
      if (p.name.ends_with(".weight")) fan_in = t.size() / t.dim(0);
      const double bound = init_bound(fan_in);
      if (p.name == "constrained.weight") {
        for (auto& v : constrained_master_.data()) v = rng.uniform(-bound, bound);
        continue;
      }
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    enforce_constraint(rng);
  }

  ModelConfig config_;
  std::vector<StageInfo> stages_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  Tensor<double> constrained_master_;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::vector<Tensor<T>> latents;  // L0..L8 when captured
};

/// Evaluation-mode forward. Captured latents follow the roster L0..L8.
template <typename T>
ForwardResult<T> model_forward(const Model<T>& model, const Tensor<T>& batch, bool capture = false) {
  const std::size_t P = model.config().patch_size;
  if (batch.rank() != 4 || batch.dim(1) != kInputChannels || batch.dim(2) != P || batch.dim(3) != P) {
    fail(ErrorKind::shape, "batch shape ", to_string(batch.shape()), " does not match (N,3,", P, ",", P, ")");
  }
  auto d = model.graph(batch.dim(0));
  d.graph.forward({batch});
  ForwardResult<T> r;
  r.logits = d.graph.value(d.logits);
  if (capture) {
    for (NodeId id : d.latents) r.latents.push_back(d.graph.value(id));
  }
  return r;
}

// Prediction rule: the class with the highest logit (ties go to pristine).
template <typename T>
std::size_t predicted_class(const Tensor<T>& logits, std::size_t row) {
  return logits[row * kNumClasses + 1] > logits[row * kNumClasses] ? 1 : 0;
}

}  // namespace mp
