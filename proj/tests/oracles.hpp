#pragma once

// Independent reference implementations used only by tests: direct-loop
// kernels and central finite differences. None of this shares code with the
// optimized paths under include/.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "fedmoe/data.hpp"
#include "fedmoe/evaluation.hpp"
#include "fedmoe/tensor.hpp"

namespace fedmoe::oracle {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline Tensor matmul_bias(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(1);
  Tensor y({n, out});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[i * out + o];
      y[r * out + o] = s;
    }
  }
  return y;
}

/// Six nested loops, valid padding, stride 1.
inline Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), f = k.dim(0), ks = k.dim(2);
  const std::size_t oh = h - ks + 1, ow = w - ks + 1;
  Tensor y({n, f, oh, ow});
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t fi = 0; fi < f; ++fi)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double s = b[fi];
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < ks; ++ky)
              for (std::size_t kx = 0; kx < ks; ++kx)
                s += x[((bi * c + ci) * h + oy + ky) * w + ox + kx] * k[((fi * c + ci) * ks + ky) * ks + kx];
          y[((bi * f + fi) * oh + oy) * ow + ox] = s;
        }
  return y;
}

inline Tensor relu(Tensor x) {
  for (double& v : x.data()) v = std::max(v, 0.0);
  return x;
}

inline Tensor maxpool(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n, c, h / 2, w / 2});
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        double m = -INFINITY;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) m = std::max(m, x[(p * h + 2 * i + di) * w + 2 * j + dj]);
        y[(p * (h / 2) + i) * (w / 2) + j] = m;
      }
  return y;
}

/// -log p(label) for one row of logits, computed without max-shifting tricks
/// beyond what is needed for the magnitudes used in tests.
inline double nll_row(const double* row, std::size_t k, int label) {
  double mx = row[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
  return -(row[label] - mx - std::log(z));
}

inline double mean_nll(const Tensor& logits, const std::vector<int>& y) {
  double s = 0.0;
  for (std::size_t b = 0; b < y.size(); ++b) s += nll_row(&logits[b * logits.dim(1)], logits.dim(1), y[b]);
  return s / static_cast<double>(y.size());
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Central differences of a scalar function of one tensor.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, Tensor at, double step = 1e-5) {
  Tensor g(at.shape());
  for (std::size_t i = 0; i < at.numel(); ++i) {
    const double orig = at[i];
    at[i] = orig + step;
    const double up = f(at);
    at[i] = orig - step;
    const double down = f(at);
    at[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps entries that
/// are zero up to round-off from dominating the relative measure.
inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Logits that put the maximum on a fixed label per example.
inline Predictor table_predictor(std::vector<int> table, std::size_t classes) {
  auto pos = std::make_shared<std::size_t>(0);
  return [table = std::move(table), classes, pos](const Tensor& x) {
    Tensor out({x.dim(0), classes});
    for (std::size_t r = 0; r < x.dim(0); ++r) out.at(r, static_cast<std::size_t>(table[*pos + r])) = 1.0;
    *pos += x.dim(0);
    return out;
  };
}

/// Brute force: every test sample contributes ratios[c] / |test_c| when correct.
inline double local_oracle(const std::vector<int>& pred, const LabeledDataset& test, const std::vector<double>& ratios) {
  std::vector<double> count(test.classes, 0.0);
  for (int y : test.labels) count[static_cast<std::size_t>(y)] += 1.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto c = static_cast<std::size_t>(test.labels[i]);
    if (pred[i] == test.labels[i]) acc += ratios[c] / count[c];
  }
  return acc;
}

}  // namespace fedmoe::oracle
