#pragma once

// Dense row-major tensors of doubles with hand-written reverse-mode rules for
// the handful of operations the encoder needs, plus Adam and a finite
// difference gradient checker.
//
// Backward functions follow one convention: they read `out.grad` and
// accumulate into the `grad` buffers of the inputs that have one. Inputs
// without a grad buffer are treated as constants.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "c3/error.hpp"
#include "c3/random.hpp"

namespace c3 {

inline constexpr double kLayerNormEps = 1e-6;

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when the tensor carries no gradient

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : shape(std::move(dims)), data(element_count(shape), fill) {}
  Tensor(std::vector<std::size_t> dims, std::vector<double> values) : shape(std::move(dims)), data(std::move(values)) {
    if (data.size() != element_count(shape)) throw DimensionError("tensor data does not match shape");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }
  static Tensor vector(std::size_t n, double fill = 0.0) { return Tensor({n}, fill); }

  static std::size_t element_count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  /// Product of all leading dimensions; a 1-D tensor is a single row.
  std::size_t rows() const { return shape.empty() ? 1 : size() / shape.back(); }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }
  std::span<double> grad_row(std::size_t r) { return {grad.data() + r * cols(), cols()}; }

  bool has_grad() const { return !grad.empty(); }
  /// Allocates (or resets) the gradient buffer to zeros.
  void enable_grad() { grad.assign(data.size(), 0.0); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  void drop_grad() { grad.clear(); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
  }
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericalError(std::string("non-finite value in ") + what);
}

inline void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw NumericalError(std::string("non-finite value in ") + what);
}

// ---------------------------------------------------------------------------
// matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape) + " x " + shape_string(b.shape));
  Tensor c = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.data[i * k + p];
      const double* __restrict brow = b.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

/// dA += dC·Bᵀ, dB += Aᵀ·dC
inline void matmul_backward(Tensor& a, Tensor& b, const Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (a.has_grad()) {
    // axpy form over a transposed copy of B keeps the inner loop contiguous
    std::vector<double> bt(n * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b.data[p * n + j];
    for (std::size_t i = 0; i < m; ++i) {
      const double* dcrow = c.grad.data() + i * n;
      double* __restrict darow = a.grad.data() + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double g = dcrow[j];
        if (g == 0.0) continue;
        const double* __restrict btrow = bt.data() + j * k;
        for (std::size_t p = 0; p < k; ++p) darow[p] += g * btrow[p];
      }
    }
  }
  if (b.has_grad()) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* dcrow = c.grad.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = a.data[i * k + p];
        double* __restrict dbrow = b.grad.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// softmax

/// In-place softmax of one row with max-subtraction. Entries equal to -inf
/// get probability exactly zero; at least one entry must be finite.
inline void softmax_inplace(std::span<double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const double x : row) mx = std::max(mx, x);
  double sum = 0.0;
  for (double& x : row) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : row) x /= sum;
}

/// Given softmax output y and upstream gradient dy, accumulate dx = y ⊙ (dy − ⟨dy, y⟩).
inline void softmax_backward_row(std::span<const double> y, std::span<const double> dy, std::span<double> dx) {
  double dot = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < y.size(); ++j) dx[j] += y[j] * (dy[j] - dot);
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor y = x;
  y.drop_grad();
  for (std::size_t r = 0; r < y.rows(); ++r) softmax_inplace(y.row(r));
  require_finite(y, "softmax_rows");
  return y;
}

inline void softmax_rows_backward(Tensor& x, const Tensor& y) {
  if (!x.has_grad()) return;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::span<const double> yr = y.row(r);
    const std::span<const double> dyr{y.grad.data() + r * y.cols(), y.cols()};
    softmax_backward_row(yr, dyr, x.grad_row(r));
  }
}

// ---------------------------------------------------------------------------
// layer norm over the last axis: y = gain ⊙ (x − μ)/√(σ² + eps) + bias, σ² with denominator d

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: empty last axis");
  if (gain.size() != d || bias.size() != d) throw DimensionError("layer_norm: gain/bias length differs from last axis");
  Tensor y(x.shape);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::span<const double> xr = x.row(r);
    double mean = 0.0;
    for (const double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (const double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    std::span<double> yr = y.row(r);
    for (std::size_t j = 0; j < d; ++j) yr[j] = gain.data[j] * (xr[j] - mean) * rstd + bias.data[j];
  }
  return y;
}

/// Statistics are recomputed from x rather than cached.
inline void layer_norm_backward(Tensor& x, Tensor& gain, Tensor& bias, const Tensor& y) {
  const std::size_t d = x.cols();
  const double inv_d = 1.0 / static_cast<double>(d);
  std::vector<double> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::span<const double> xr = x.row(r);
    const double* dy = y.grad.data() + r * d;
    double mean = 0.0;
    for (const double v : xr) mean += v;
    mean *= inv_d;
    double var = 0.0;
    for (const double v : xr) var += (v - mean) * (v - mean);
    var *= inv_d;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mean) * rstd;
      dxhat[j] = dy[j] * gain.data[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
      if (gain.has_grad()) gain.grad[j] += dy[j] * xhat[j];
      if (bias.has_grad()) bias.grad[j] += dy[j];
    }
    if (!x.has_grad()) continue;
    mean_dxhat *= inv_d;
    mean_dxhat_xhat *= inv_d;
    double* dx = x.grad.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dx[j] += rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers

/// out = x + row-broadcast bias
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (bias.size() != x.cols()) throw DimensionError("add_row_bias: bias length differs from last axis");
  Tensor y = x;
  y.drop_grad();
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t j = 0; j < y.cols(); ++j) y(r, j) += bias.data[j];
  return y;
}

inline void add_row_bias_backward(Tensor& x, Tensor& bias, const Tensor& y) {
  if (x.has_grad())
    for (std::size_t i = 0; i < x.size(); ++i) x.grad[i] += y.grad[i];
  if (bias.has_grad())
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t j = 0; j < y.cols(); ++j) bias.grad[j] += y.grad[r * y.cols() + j];
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("add: size mismatch");
  Tensor y = a;
  y.drop_grad();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b.data[i];
  return y;
}

inline void add_backward(Tensor& a, Tensor& b, const Tensor& y) {
  if (a.has_grad())
    for (std::size_t i = 0; i < a.size(); ++i) a.grad[i] += y.grad[i];
  if (b.has_grad())
    for (std::size_t i = 0; i < b.size(); ++i) b.grad[i] += y.grad[i];
}

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  y.drop_grad();
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

inline void relu_backward(Tensor& x, const Tensor& y) {
  if (!x.has_grad()) return;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x.data[i] > 0.0) x.grad[i] += y.grad[i];
}

/// Inverted dropout. `keep` receives the per-element scale (0 or 1/(1−rate)).
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, std::vector<double>& keep) {
  Tensor y = x;
  y.drop_grad();
  keep.assign(x.size(), 1.0);
  if (rate <= 0.0) return y;
  const double scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < y.size(); ++i) {
    keep[i] = rng.uniform() < rate ? 0.0 : scale;
    y.data[i] *= keep[i];
  }
  return y;
}

inline void dropout_backward(Tensor& x, const Tensor& y, const std::vector<double>& keep) {
  if (!x.has_grad()) return;
  for (std::size_t i = 0; i < x.size(); ++i) x.grad[i] += y.grad[i] * keep[i];
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
};

inline AdamState make_adam_state(const Tensor& param, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                                 double eps_adam = 1e-8) {
  AdamState s;
  s.m.assign(param.size(), 0.0);
  s.v.assign(param.size(), 0.0);
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps_adam = eps_adam;
  return s;
}

/// Bias-corrected Adam update; zeroes the gradient buffer afterwards.
inline void adam_step(Tensor& param, AdamState& state) {
  if (!param.has_grad()) throw StateError("adam_step: parameter has no gradient buffer");
  if (state.m.size() != param.size() || state.v.size() != param.size())
    throw StateError("adam_step: moment buffers do not match parameter");
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = param.grad[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps_adam);
  }
  param.zero_grad();
  require_finite(param, "adam_step");
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

inline constexpr double kGradCheckStep = 1e-5;

/// Relative error |a − n| / max(|a|, |n|, floor). The floor keeps coordinates
/// whose true gradient is zero from dividing roundoff by zero.
/// |a − n| / max(|a|, |n|, floor). Below the floor the comparison is
/// effectively absolute; the default sits above the roundoff noise of central
/// differences on O(1) objectives (≈1e-11).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose stencil crossed a non-differentiable point.
  std::size_t skipped = 0;
};

/// Discrete branch decisions of the objective (e.g. ReLU signs). When the
/// signature at x+h differs from the one at x−h the stencil straddles a kink
/// and central differences are not a valid reference for that coordinate.
using BranchSignature = std::function<std::vector<std::uint8_t>()>;

/// Compares the gradients already stored in each parameter's grad buffer with
/// central differences of `f`. Up to `coords_per_tensor` coordinates per tensor
/// are sampled (all of them when the tensor is smaller). `f` must not touch
/// the grad buffers.
inline GradCheckReport grad_check(const std::function<double()>& f, std::span<Tensor* const> params,
                                  std::size_t coords_per_tensor, std::uint64_t seed,
                                  const BranchSignature& signature = {}) {
  Rng rng(seed, "grad_check");
  GradCheckReport rep;
  for (Tensor* p : params) {
    if (!p->has_grad()) throw StateError("grad_check: parameter has no gradient buffer");
    std::vector<std::size_t> coords(p->size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > coords_per_tensor) {
      rng.shuffle(coords);
      coords.resize(coords_per_tensor);
    }
    for (const std::size_t i : coords) {
      const double saved = p->data[i];
      p->data[i] = saved + kGradCheckStep;
      const double fp = f();
      std::vector<std::uint8_t> sp, sm;
      if (signature) sp = signature();
      p->data[i] = saved - kGradCheckStep;
      const double fm = f();
      if (signature) sm = signature();
      p->data[i] = saved;
      require_finite(fp, "grad_check objective");
      require_finite(fm, "grad_check objective");
      if (sp != sm) {
        ++rep.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * kGradCheckStep);
      rep.max_rel_error = std::max(rep.max_rel_error, relative_error(p->grad[i], numeric));
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace c3
