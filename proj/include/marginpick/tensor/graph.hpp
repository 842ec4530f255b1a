#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "marginpick/core/rng.hpp"
#include "marginpick/tensor/tensor.hpp"

namespace mp {

using NodeId = std::size_t;

// Per-forward settings visible to every op.
struct RunContext {
  bool training = false;
  std::uint64_t step = 0;  // keys dropout masks
};

/// One differentiable operation. Ops may cache state from forward for use in
/// backward; a graph (and so its ops) is confined to one thread at a time.
template <typename T>
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view kind() const = 0;
  virtual Shape output_shape(std::span<const Shape> inputs) const = 0;
  virtual void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out,
                       const RunContext& ctx) = 0;
  // Accumulates (+=) into each non-null gin[i].
  virtual void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out,
                        const Tensor<T>& gout, std::span<Tensor<T>* const> gin) = 0;
  // Hash of the discrete choices made by the last forward (ReLU masks, max
  // locations). Two evaluations with equal signatures lie on the same smooth piece.
  virtual std::uint64_t branch_signature(std::span<const Tensor<T>* const> /*in*/,
                                         const Tensor<T>& /*out*/) const {
    return 0;
  }
};

enum class NodeKind { input, parameter, constant, op };

/// Static computation graph, evaluated on demand.
///
/// Nodes are appended in topological order: an op node may only reference
/// nodes created before it. forward() binds the input placeholders (in
/// creation order) and evaluates every node; backward() propagates a seeded
/// cotangent from one node and returns gradients for any requested nodes,
/// intermediate activations included. Parameter nodes alias tensors owned
/// elsewhere and receive their gradients in the tensor's grad buffer.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  NodeId input(Shape shape, std::string name = "input") {
    Node node;
    node.kind = NodeKind::input;
    node.name = std::move(name);
    node.shape = std::move(shape);
    inputs_.push_back(nodes_.size());
    return push(std::move(node));
  }

  NodeId parameter(Tensor<T>& tensor, std::string name) {
    Node node;
    node.kind = NodeKind::parameter;
    node.name = std::move(name);
    node.shape = tensor.shape();
    node.param = &tensor;
    return push(std::move(node));
  }

  NodeId constant(Tensor<T> value, std::string name = "constant") {
    Node node;
    node.kind = NodeKind::constant;
    node.name = std::move(name);
    node.shape = value.shape();
    node.value = std::move(value);
    return push(std::move(node));
  }

  NodeId apply(std::unique_ptr<Op<T>> op, std::vector<NodeId> args, std::string name = {}) {
    std::vector<Shape> shapes;
    shapes.reserve(args.size());
    for (NodeId id : args) {
      if (id >= nodes_.size()) {
        fail(ErrorKind::not_found, "node ", name, " references unknown node ", id);
      }
      shapes.push_back(nodes_[id].shape);
    }
    Node node;
    node.kind = NodeKind::op;
    node.name = name.empty() ? std::string(op->kind()) : std::move(name);
    try {
      node.shape = op->output_shape(shapes);
    } catch (const Error& e) {
      fail(e.kind(), "node '", node.name, "' (", op->kind(), "): ", e.what());
    }
    node.args = std::move(args);
    node.op = std::move(op);
    return push(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  const std::string& name(NodeId id) const { return node(id).name; }
  NodeKind kind(NodeId id) const { return node(id).kind; }
  std::span<const NodeId> inputs() const { return inputs_; }

  // Non-finite detection after every op; the final node is always checked.
  void set_check_every_op(bool on) { check_every_op_ = on; }

  void forward(std::span<const Tensor<T>> inputs, const RunContext& ctx = {}) {
    if (inputs.size() != inputs_.size()) {
      fail(ErrorKind::shape, "graph expects ", inputs_.size(), " inputs, got ", inputs.size());
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Node& n = nodes_[inputs_[i]];
      if (inputs[i].shape() != n.shape) {
        fail(ErrorKind::shape, "input '", n.name, "' expects shape ", to_string(n.shape), ", got ",
             to_string(inputs[i].shape()));
      }
      n.value = inputs[i];
      if (perturb_node_ == inputs_[i]) n.value[perturb_index_] += perturb_delta_;
      apply_offset(inputs_[i], n.value);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.kind != NodeKind::op) continue;
      if (n.value.shape() != n.shape) n.value = Tensor<T>(n.shape);
      std::vector<const Tensor<T>*> args = arg_values(n);
      n.op->forward(args, n.value, ctx);
      if (perturb_node_ == id) n.value[perturb_index_] += perturb_delta_;
      apply_offset(id, n.value);
      if ((check_every_op_ || id + 1 == nodes_.size()) && !n.value.all_finite()) {
        forwarded_ = false;
        fail(ErrorKind::numeric, "non-finite output at node '", n.name, "' (", n.op->kind(), ")");
      }
    }
    forwarded_ = true;
  }

  void forward(std::initializer_list<Tensor<T>> inputs, const RunContext& ctx = {}) {
    std::vector<Tensor<T>> v(inputs);
    forward(std::span<const Tensor<T>>(v), ctx);
  }

  bool forwarded() const { return forwarded_; }

  // Adds `delta` to one element of an input or op node during subsequent
  // forward passes, so finite differences can probe intermediate activations.
  void set_perturbation(NodeId id, std::size_t index, T delta) {
    const Node& n = node(id);
    if (n.kind != NodeKind::input && n.kind != NodeKind::op) {
      fail(ErrorKind::argument, "only input and op nodes can be perturbed; '", n.name, "' is not");
    }
    if (index >= shape_size(n.shape)) fail(ErrorKind::argument, "perturbation index out of range");
    perturb_node_ = id;
    perturb_index_ = index;
    perturb_delta_ = delta;
  }
  void clear_perturbation() { perturb_node_ = kNoNode; }

  // Adds a whole tensor to a node's value during subsequent forward passes;
  // used to walk along a direction in an intermediate activation space.
  void set_offset(NodeId id, Tensor<T> offset) {
    const Node& n = node(id);
    if (n.kind != NodeKind::input && n.kind != NodeKind::op) {
      fail(ErrorKind::argument, "only input and op nodes can be offset; '", n.name, "' is not");
    }
    if (offset.shape() != n.shape) {
      fail(ErrorKind::shape, "offset shape ", to_string(offset.shape()), " does not match node '", n.name, "' ",
           to_string(n.shape));
    }
    offsets_[id] = std::move(offset);
  }
  void clear_offsets() { offsets_.clear(); }

  std::uint64_t branch_signature() const {
    if (!forwarded_) fail(ErrorKind::state, "branch signature requested before forward");
    std::uint64_t h = 0;
    for (const Node& n : nodes_) {
      if (n.kind != NodeKind::op) continue;
      h = hash_combine(h, n.op->branch_signature(arg_values(n), n.value));
    }
    return h;
  }

  const Tensor<T>& value(NodeId id) const {
    if (!forwarded_) fail(ErrorKind::state, "value requested before forward");
    const Node& n = node(id);
    return n.kind == NodeKind::parameter ? *n.param : n.value;
  }

  /// Reverse pass from `output` seeded with `seed` (same shape as the output).
  /// Returns the gradient of <seed, output> w.r.t. each node in `wrt`. When
  /// `parameter_grads` is set, parameter gradients are accumulated into the
  /// aliased tensors' grad buffers.
  std::map<NodeId, Tensor<T>> backward(NodeId output, const Tensor<T>& seed,
                                       std::span<const NodeId> wrt = {},
                                       bool parameter_grads = true) {
    if (!forwarded_) fail(ErrorKind::state, "backward called before forward");
    if (output >= nodes_.size()) fail(ErrorKind::not_found, "unknown output node ", output);
    for (NodeId id : wrt) {
      if (id >= nodes_.size()) fail(ErrorKind::not_found, "gradient requested for unknown node ", id);
    }
    if (seed.shape() != nodes_[output].shape) {
      fail(ErrorKind::shape, "seed shape ", to_string(seed.shape()), " does not match output ",
           to_string(nodes_[output].shape));
    }

    // A node needs a gradient if a requested node (or trainable parameter)
    // is among its ancestors, itself included.
    std::vector<char> needs(output + 1, 0);
    for (NodeId id : wrt) {
      if (id <= output) needs[id] = 1;
    }
    for (NodeId id = 0; id <= output; ++id) {
      const Node& n = nodes_[id];
      if (parameter_grads && n.kind == NodeKind::parameter) needs[id] = 1;
      if (n.kind == NodeKind::op) {
        for (NodeId a : n.args) needs[id] = needs[id] || needs[a];
      }
    }

    std::vector<Tensor<T>> grads(output + 1);
    grads[output] = seed;
    for (NodeId id = output + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!needs[id] || grads[id].empty()) continue;
      if (n.kind == NodeKind::parameter && parameter_grads) {
        n.param->ensure_grad();
        auto dst = n.param->grad();
        auto src = grads[id].data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        continue;
      }
      if (n.kind != NodeKind::op) continue;
      std::vector<Tensor<T>*> gin(n.args.size(), nullptr);
      for (std::size_t k = 0; k < n.args.size(); ++k) {
        const NodeId a = n.args[k];
        if (!needs[a]) continue;
        if (grads[a].empty()) grads[a] = Tensor<T>(nodes_[a].shape);
        gin[k] = &grads[a];
      }
      std::vector<const Tensor<T>*> args = arg_values(n);
      n.op->backward(args, n.value, grads[id], gin);
      if (check_every_op_) {
        for (Tensor<T>* g : gin) {
          if (g && !g->all_finite()) {
            fail(ErrorKind::numeric, "non-finite gradient below node '", n.name, "'");
          }
        }
      }
      if (id != output && std::find(wrt.begin(), wrt.end(), id) == wrt.end()) {
        grads[id] = Tensor<T>();  // release intermediate cotangents early
      }
    }

    std::map<NodeId, Tensor<T>> out;
    for (NodeId id : wrt) {
      if (id <= output && !grads[id].empty()) {
        out.emplace(id, grads[id]);
      } else {
        out.emplace(id, Tensor<T>(nodes_[id].shape));  // unreachable from output
      }
    }
    return out;
  }

 private:
  struct Node {
    NodeKind kind = NodeKind::input;
    std::string name;
    Shape shape;
    std::vector<NodeId> args;
    std::unique_ptr<Op<T>> op;
    Tensor<T> value;
    Tensor<T>* param = nullptr;
  };

  NodeId push(Node node) {
    nodes_.push_back(std::move(node));
    forwarded_ = false;
    return nodes_.size() - 1;
  }

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) fail(ErrorKind::not_found, "unknown node ", id);
    return nodes_[id];
  }

  std::vector<const Tensor<T>*> arg_values(const Node& n) const {
    std::vector<const Tensor<T>*> args;
    args.reserve(n.args.size());
    for (NodeId a : n.args) {
      const Node& src = nodes_[a];
      args.push_back(src.kind == NodeKind::parameter ? src.param : &src.value);
    }
    return args;
  }

  void apply_offset(NodeId id, Tensor<T>& value) const {
    if (offsets_.empty()) return;
    const auto it = offsets_.find(id);
    if (it == offsets_.end()) return;
    for (std::size_t i = 0; i < value.size(); ++i) value[i] += it->second[i];
  }

  static constexpr NodeId kNoNode = ~NodeId{0};
  std::map<NodeId, Tensor<T>> offsets_;

  std::vector<Node> nodes_;
  std::vector<NodeId> inputs_;
  NodeId perturb_node_ = kNoNode;
  std::size_t perturb_index_ = 0;
  T perturb_delta_{};
  bool forwarded_ = false;
#ifdef NDEBUG
  bool check_every_op_ = false;
#else
  bool check_every_op_ = true;
#endif
};

}  // namespace mp
