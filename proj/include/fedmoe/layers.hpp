#pragma once

// Forward and backward kernels for the fixed layer set. Everything here is a
// pure function of its arguments.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>

#include "fedmoe/tensor.hpp"

namespace fedmoe {

// ---------------------------------------------------------------- dense ---

inline Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 2 || weights.rank() != 2 || bias.rank() != 1 ||
      input.dim(1) != weights.dim(0) || bias.dim(0) != weights.dim(1)) {
    throw DimensionError("dense: input " + shape_str(input.shape()) + ", weights " +
                         shape_str(weights.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t batch = input.dim(0), in = input.dim(1), out = weights.dim(1);
  Tensor result({batch, out});
  for (std::size_t b = 0; b < batch; ++b) {
    double* row = &result[b * out];
    for (std::size_t o = 0; o < out; ++o) row[o] = bias[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double x = input[b * in + i];
      if (x == 0.0) continue;
      const double* w = &weights[i * out];
      for (std::size_t o = 0; o < out; ++o) row[o] += x * w[o];
    }
  }
  return result;
}

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

/// Gradients of a dense layer given dL/d(output). `need_input` skips the
/// (comparatively expensive) input gradient when the caller has no use for it.
inline DenseGrads dense_backward(const Tensor& input, const Tensor& weights,
                                 const Tensor& grad_out, bool need_input = true) {
  const std::size_t batch = input.dim(0), in = input.dim(1), out = weights.dim(1);
  if (grad_out.rank() != 2 || grad_out.dim(0) != batch || grad_out.dim(1) != out) {
    throw DimensionError("dense backward: grad " + shape_str(grad_out.shape()));
  }
  DenseGrads g{need_input ? Tensor({batch, in}) : Tensor(), Tensor({in, out}), Tensor({out})};
  for (std::size_t b = 0; b < batch; ++b) {
    const double* go = &grad_out[b * out];
    for (std::size_t o = 0; o < out; ++o) g.bias[o] += go[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double x = input[b * in + i];
      const double* w = &weights[i * out];
      double* gw = &g.weights[i * out];
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) {
        gw[o] += x * go[o];
        acc += w[o] * go[o];
      }
      if (need_input) g.input[b * in + i] = acc;
    }
  }
  return g;
}

// --------------------------------------------------------------- conv2d ---

inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  if (input.rank() != 4 || kernels.rank() != 4 || bias.rank() != 1 ||
      input.dim(1) != kernels.dim(1) || kernels.dim(2) != kernels.dim(3) ||
      bias.dim(0) != kernels.dim(0)) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + ", kernels " +
                         shape_str(kernels.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t batch = input.dim(0), chans = input.dim(1), h = input.dim(2),
                    w = input.dim(3), filters = kernels.dim(0), k = kernels.dim(2);
  if (k > h || k > w) {
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) +
                         " larger than input " + shape_str(input.shape()));
  }
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  Tensor out({batch, filters, oh, ow});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t f = 0; f < filters; ++f) {
      double* plane = &out[((b * filters) + f) * oh * ow];
      std::fill(plane, plane + oh * ow, bias[f]);
      for (std::size_t c = 0; c < chans; ++c) {
        const double* src = &input[((b * chans) + c) * h * w];
        const double* ker = &kernels[((f * chans) + c) * k * k];
        for (std::size_t ki = 0; ki < k; ++ki) {
          for (std::size_t kj = 0; kj < k; ++kj) {
            const double kv = ker[ki * k + kj];
            for (std::size_t y = 0; y < oh; ++y) {
              const double* s = src + (y + ki) * w + kj;
              double* d = plane + y * ow;
              for (std::size_t x = 0; x < ow; ++x) d[x] += kv * s[x];
            }
          }
        }
      }
    }
  }
  return out;
}

struct ConvGrads {
  Tensor input;
  Tensor kernels;
  Tensor bias;
};

inline ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernels,
                                 const Tensor& grad_out, bool need_input = true) {
  const std::size_t batch = input.dim(0), chans = input.dim(1), h = input.dim(2),
                    w = input.dim(3), filters = kernels.dim(0), k = kernels.dim(2);
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  if (grad_out.shape() != Shape{batch, filters, oh, ow}) {
    throw DimensionError("conv2d backward: grad " + shape_str(grad_out.shape()));
  }
  ConvGrads g{need_input ? Tensor(input.shape()) : Tensor(), Tensor(kernels.shape()),
              Tensor(Shape{filters})};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t f = 0; f < filters; ++f) {
      const double* go = &grad_out[((b * filters) + f) * oh * ow];
      double bsum = 0.0;
      for (std::size_t i = 0; i < oh * ow; ++i) bsum += go[i];
      g.bias[f] += bsum;
      for (std::size_t c = 0; c < chans; ++c) {
        const double* src = &input[((b * chans) + c) * h * w];
        const double* ker = &kernels[((f * chans) + c) * k * k];
        double* gk = &g.kernels[((f * chans) + c) * k * k];
        double* gi = need_input ? &g.input[((b * chans) + c) * h * w] : nullptr;
        for (std::size_t ki = 0; ki < k; ++ki) {
          for (std::size_t kj = 0; kj < k; ++kj) {
            const double kv = ker[ki * k + kj];
            double acc = 0.0;
            for (std::size_t y = 0; y < oh; ++y) {
              const double* s = src + (y + ki) * w + kj;
              const double* d = go + y * ow;
              for (std::size_t x = 0; x < ow; ++x) acc += d[x] * s[x];
              if (gi) {
                double* t = gi + (y + ki) * w + kj;
                for (std::size_t x = 0; x < ow; ++x) t[x] += kv * d[x];
              }
            }
            gk[ki * k + kj] += acc;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------- activations ---

enum class Activation { relu, sigmoid, max_pool2x2, softmax };

inline double sigmoid(double x) {
  // Branches keep exp() from overflowing for large |x|.
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

inline Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  require_same_shape(input, grad_out, "relu backward");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.numel(); ++i) {
    if (!(input[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

inline Tensor sigmoid_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = sigmoid(v);
  return y;
}

inline Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out) {
  require_same_shape(output, grad_out, "sigmoid backward");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= output[i] * (1.0 - output[i]);
  return g;
}

/// Softmax over the last axis.
inline Tensor softmax_forward(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax of rank-0 tensor");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  Tensor y = x;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &y[r * k];
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < k; ++j) row[j] /= sum;
  }
  return y;
}

namespace detail {
inline void check_poolable(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("max_pool2x2 needs spatial dims, got " + shape_str(x.shape()));
  const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
  if (h % 2 || w % 2) {
    throw DimensionError("max_pool2x2 needs even spatial dims, got " + shape_str(x.shape()));
  }
}

/// Flat index of the first maximum (row-major scan) in the window at (py, px).
inline std::size_t pool_argmax(const double* plane, std::size_t w, std::size_t py,
                               std::size_t px) {
  std::size_t best = (2 * py) * w + 2 * px;
  for (std::size_t dy = 0; dy < 2; ++dy) {
    for (std::size_t dx = 0; dx < 2; ++dx) {
      const std::size_t idx = (2 * py + dy) * w + 2 * px + dx;
      if (plane[idx] > plane[best]) best = idx;
    }
  }
  return best;
}
}  // namespace detail

/// 2x2, stride 2 max pooling over the two trailing axes.
inline Tensor max_pool2x2_forward(const Tensor& x) {
  detail::check_poolable(x);
  const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
  const std::size_t planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = h / 2;
  out_shape[out_shape.size() - 1] = w / 2;
  Tensor y(out_shape);
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* plane = &x[p * h * w];
    for (std::size_t py = 0; py < oh; ++py) {
      for (std::size_t px = 0; px < ow; ++px) {
        y[p * oh * ow + py * ow + px] = plane[detail::pool_argmax(plane, w, py, px)];
      }
    }
  }
  return y;
}

inline Tensor max_pool2x2_backward(const Tensor& input, const Tensor& grad_out) {
  detail::check_poolable(input);
  const std::size_t h = input.shape()[input.rank() - 2], w = input.shape()[input.rank() - 1];
  const std::size_t planes = input.numel() / (h * w), oh = h / 2, ow = w / 2;
  if (grad_out.numel() != planes * oh * ow) {
    throw DimensionError("max_pool2x2 backward: grad " + shape_str(grad_out.shape()));
  }
  Tensor g(input.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* plane = &input[p * h * w];
    for (std::size_t py = 0; py < oh; ++py) {
      for (std::size_t px = 0; px < ow; ++px) {
        g[p * h * w + detail::pool_argmax(plane, w, py, px)] +=
            grad_out[p * oh * ow + py * ow + px];
      }
    }
  }
  return g;
}

inline Tensor activations(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return relu_forward(x);
    case Activation::sigmoid:
      return sigmoid_forward(x);
    case Activation::max_pool2x2:
      return max_pool2x2_forward(x);
    case Activation::softmax:
      return softmax_forward(x);
  }
  throw UsageError("unknown activation");
}

// ------------------------------------------------------------------ loss ---

namespace detail {
inline void check_labels(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const auto k = static_cast<int>(logits.dim(1));
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw InputError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                       std::to_string(k) + ")");
    }
  }
}
}  // namespace detail

/// Mean over the batch of -log softmax(logits)[label].
inline double cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  detail::check_labels(logits, labels);
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = &logits[b * k];
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    total += (mx + std::log(sum)) - row[labels[b]];
  }
  return total / static_cast<double>(batch);
}

/// d(mean cross entropy)/d(logits) = (softmax - onehot) / B.
inline Tensor cross_entropy_grad(const Tensor& logits, std::span<const int> labels) {
  detail::check_labels(logits, labels);
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  Tensor g = softmax_forward(logits);
  const double scale = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    g[b * k + static_cast<std::size_t>(labels[b])] -= 1.0;
    for (std::size_t j = 0; j < k; ++j) g[b * k + j] *= scale;
  }
  return g;
}

/// Index of the largest logit per row; ties go to the lowest index.
inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  const double* r = &logits[row * k];
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (r[j] > r[best]) best = j;
  }
  return best;
}

}  // namespace fedmoe
