#pragma once

// Reverse-mode gradient recording over the fixed layer set. A Tape owns the
// values of every node created on it; a Var is a cheap handle into the tape.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmoe/layers.hpp"
#include "fedmoe/tensor.hpp"

namespace fedmoe {

class Tape;

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  const Tape* owner = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A tensor that gradients may be requested for.
  Var parameter(Tensor value) { return push(std::move(value), {}, true, {}); }

  /// A tensor treated as a constant: gradient requests for it are rejected.
  Var constant(Tensor value) { return push(std::move(value), {}, false, {}); }

  const Tensor& value(Var v) const { return node(v).value; }

  Var dense(Var x, Var w, Var b) {
    Tensor out = dense_forward(value(x), value(w), value(b));
    return push(std::move(out), {x, w, b}, any_grad({x, w, b}),
                [this, x, w, b](const Tensor& go, std::vector<Tensor>& grads) {
                  const bool need_x = node(x).requires_grad;
                  DenseGrads g = dense_backward(value(x), value(w), go, need_x);
                  if (need_x) accumulate(grads, x, g.input);
                  accumulate(grads, w, g.weights);
                  accumulate(grads, b, g.bias);
                });
  }

  Var conv2d(Var x, Var k, Var b) {
    Tensor out = conv2d_forward(value(x), value(k), value(b));
    return push(std::move(out), {x, k, b}, any_grad({x, k, b}),
                [this, x, k, b](const Tensor& go, std::vector<Tensor>& grads) {
                  const bool need_x = node(x).requires_grad;
                  ConvGrads g = conv2d_backward(value(x), value(k), go, need_x);
                  if (need_x) accumulate(grads, x, g.input);
                  accumulate(grads, k, g.kernels);
                  accumulate(grads, b, g.bias);
                });
  }

  Var relu(Var x) {
    return push(relu_forward(value(x)), {x}, any_grad({x}),
                [this, x](const Tensor& go, std::vector<Tensor>& grads) {
                  accumulate(grads, x, relu_backward(value(x), go));
                });
  }

  Var sigmoid(Var x) {
    Tensor out = sigmoid_forward(value(x));
    const std::size_t self = nodes_.size();
    return push(std::move(out), {x}, any_grad({x}),
                [this, x, self](const Tensor& go, std::vector<Tensor>& grads) {
                  accumulate(grads, x, sigmoid_backward(nodes_[self].value, go));
                });
  }

  Var max_pool2x2(Var x) {
    return push(max_pool2x2_forward(value(x)), {x}, any_grad({x}),
                [this, x](const Tensor& go, std::vector<Tensor>& grads) {
                  accumulate(grads, x, max_pool2x2_backward(value(x), go));
                });
  }

  /// [B x ...] -> [B x rest].
  Var flatten(Var x) {
    const Shape& s = value(x).shape();
    Tensor out = value(x).reshaped({s[0], value(x).numel() / s[0]});
    return push(std::move(out), {x}, any_grad({x}),
                [this, x](const Tensor& go, std::vector<Tensor>& grads) {
                  accumulate(grads, x, go.reshaped(value(x).shape()));
                });
  }

  /// Elementwise product of equally shaped tensors.
  Var mul(Var a, Var b) {
    require_same_shape(value(a), value(b), "mul");
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= value(b)[i];
    return push(std::move(out), {a, b}, any_grad({a, b}),
                [this, a, b](const Tensor& go, std::vector<Tensor>& grads) {
                  Tensor ga = go, gb = go;
                  for (std::size_t i = 0; i < go.numel(); ++i) {
                    ga[i] *= value(b)[i];
                    gb[i] *= value(a)[i];
                  }
                  accumulate(grads, a, ga);
                  accumulate(grads, b, gb);
                });
  }

  /// Sum of all elements, as a [1] tensor.
  Var sum(Var x) {
    double s = 0.0;
    for (double v : value(x).data()) s += v;
    return push(Tensor::scalar(s), {x}, any_grad({x}),
                [this, x](const Tensor& go, std::vector<Tensor>& grads) {
                  accumulate(grads, x, Tensor(value(x).shape(), go[0]));
                });
  }

  /// out[b,k] = g[b] * global[b,k] + (1 - g[b]) * local[b,k], with g of shape [B x 1].
  Var mix(Var g, Var global, Var local) {
    const Tensor& gv = value(g);
    const Tensor& hi = value(global);
    const Tensor& lo = value(local);
    require_same_shape(hi, lo, "mix");
    if (hi.rank() != 2 || gv.numel() != hi.dim(0)) {
      throw DimensionError("mix: gate " + shape_str(gv.shape()) + " for outputs " +
                           shape_str(hi.shape()));
    }
    const std::size_t batch = hi.dim(0), k = hi.dim(1);
    Tensor out(hi.shape());
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < k; ++j) {
        out[b * k + j] = gv[b] * hi[b * k + j] + (1.0 - gv[b]) * lo[b * k + j];
      }
    }
    return push(std::move(out), {g, global, local}, any_grad({g, global, local}),
                [this, g, global, local, batch, k](const Tensor& go, std::vector<Tensor>& grads) {
                  const Tensor& gv = value(g);
                  const Tensor& hi = value(global);
                  const Tensor& lo = value(local);
                  Tensor gg(gv.shape()), ghi(hi.shape()), glo(lo.shape());
                  for (std::size_t b = 0; b < batch; ++b) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < k; ++j) {
                      const std::size_t i = b * k + j;
                      acc += go[i] * (hi[i] - lo[i]);
                      ghi[i] = go[i] * gv[b];
                      glo[i] = go[i] * (1.0 - gv[b]);
                    }
                    gg[b] = acc;
                  }
                  accumulate(grads, g, gg);
                  accumulate(grads, global, ghi);
                  accumulate(grads, local, glo);
                });
  }

  /// Mean cross entropy of the logits against `labels`; a [1] tensor.
  Var cross_entropy(Var logits, std::span<const int> labels) {
    std::vector<int> owned(labels.begin(), labels.end());
    const double loss = cross_entropy_loss(value(logits), owned);
    return push(Tensor::scalar(loss), {logits}, any_grad({logits}),
                [this, logits, owned = std::move(owned)](const Tensor& go,
                                                         std::vector<Tensor>& grads) {
                  Tensor g = cross_entropy_grad(value(logits), owned);
                  for (double& v : g.data()) v *= go[0];
                  accumulate(grads, logits, g);
                });
  }

  /// Gradients of the scalar `loss` with respect to each tensor in `wrt`.
  /// Every entry must be a parameter that the loss actually depends on.
  std::vector<Tensor> gradient(Var loss, std::span<const Var> wrt) const {
    check_owner(loss);
    if (value(loss).numel() != 1) {
      throw UsageError("gradient: loss must be a scalar, got " + shape_str(value(loss).shape()));
    }
    std::vector<bool> on_path(nodes_.size(), false);
    on_path[loss.id] = true;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (!on_path[i]) continue;
      for (const Var& p : nodes_[i].parents) on_path[p.id] = true;
    }
    for (const Var& w : wrt) {
      check_owner(w);
      if (!nodes_[w.id].is_parameter || !on_path[w.id]) {
        throw UsageError("gradient requested for tensor #" + std::to_string(w.id) +
                         " that is not a parameter on the recorded path of the loss");
      }
    }

    std::vector<Tensor> grads(nodes_.size());
    grads[loss.id] = Tensor::scalar(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!on_path[i] || !n.requires_grad || !n.backward || grads[i].empty()) continue;
      n.backward(grads[i], grads);
    }

    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const Var& w : wrt) {
      out.push_back(grads[w.id].empty() ? Tensor(value(w).shape()) : std::move(grads[w.id]));
      grads[w.id] = Tensor();
    }
    return out;
  }

  std::vector<Tensor> gradient(Var loss, std::initializer_list<Var> wrt) const {
    return gradient(loss, std::span<const Var>(wrt.begin(), wrt.size()));
  }

 private:
  using Backward = std::function<void(const Tensor&, std::vector<Tensor>&)>;

  struct Node {
    Tensor value;
    std::vector<Var> parents;
    bool requires_grad = false;
    bool is_parameter = false;
    Backward backward;
  };

  const Node& node(Var v) const {
    check_owner(v);
    return nodes_[v.id];
  }

  void check_owner(Var v) const {
    if (v.owner != this || v.id >= nodes_.size()) {
      throw UsageError("variable does not belong to this tape");
    }
  }

  bool any_grad(std::initializer_list<Var> vars) const {
    for (const Var& v : vars) {
      if (node(v).requires_grad) return true;
    }
    return false;
  }

  Var push(Tensor value, std::vector<Var> parents, bool requires_grad, Backward backward) {
    const bool is_param = parents.empty() && requires_grad;
    nodes_.push_back(
        Node{std::move(value), std::move(parents), requires_grad, is_param, std::move(backward)});
    return Var{nodes_.size() - 1, this};
  }

  void accumulate(std::vector<Tensor>& grads, Var target, const Tensor& g) const {
    if (!nodes_[target.id].requires_grad) return;
    Tensor& slot = grads[target.id];
    if (slot.empty()) {
      slot = g;
      return;
    }
    for (std::size_t i = 0; i < slot.numel(); ++i) slot[i] += g[i];
  }

  std::vector<Node> nodes_;
};

}  // namespace fedmoe
