// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "morphkit/core.hpp"

namespace morphkit::nn {

// A parameter tensor with its gradient accumulator.
struct Tensor {
  Matrix value;
  Matrix grad;

  Tensor() = default;
  Tensor(int rows, int cols) : value(rows, cols), grad(rows, cols) {}

  void fill_normal(Rng& rng, double stddev) {
    for (size_t i = 0; i < value.size(); ++i) value.data()[i] = stddev * rng.normal();
  }
  void zero_grad() { grad.set_zero(); }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double silu(double x) { return x * sigmoid(x); }
inline double dsilu(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475));
}
inline double dgelu(double x) {
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865475)) +
         x * std::exp(-0.5 * x * x) * 0.3989422804014327;
}

// Y = X W^T + b, with X: N x in, W: out x in, b: 1 x out, Y: N x out.
inline void linear_forward(const Matrix& x, const Matrix& w, const Matrix& b,
                           Matrix& y) {
  const int n = x.rows(), in = x.cols(), out = w.rows();
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out; ++o) {
      double acc = b(0, o);
      const double* xr = x.data() + static_cast<size_t>(i) * in;
      const double* wr = w.data() + static_cast<size_t>(o) * in;
      for (int k = 0; k < in; ++k) acc += wr[k] * xr[k];
      y(i, o) = acc;
    }
  }
}

// Accumulates dW += dY^T X, db += colsum(dY) and, if dx != nullptr,
// dX += dY W.
inline void linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy,
                            Matrix& dw, Matrix& db, Matrix* dx,
                            bool accumulate_params = true) {
  const int n = x.rows(), in = x.cols(), out = w.rows();
  if (accumulate_params) {
    for (int i = 0; i < n; ++i) {
      const double* xr = x.data() + static_cast<size_t>(i) * in;
      const double* dyr = dy.data() + static_cast<size_t>(i) * out;
      for (int o = 0; o < out; ++o) {
        const double g = dyr[o];
        db(0, o) += g;
        double* dwr = dw.data() + static_cast<size_t>(o) * in;
        for (int k = 0; k < in; ++k) dwr[k] += g * xr[k];
      }
    }
  }
  if (dx != nullptr) {
    for (int i = 0; i < n; ++i) {
      const double* dyr = dy.data() + static_cast<size_t>(i) * out;
      double* dxr = dx->data() + static_cast<size_t>(i) * in;
      for (int o = 0; o < out; ++o) {
        const double g = dyr[o];
        const double* wr = w.data() + static_cast<size_t>(o) * in;
        for (int k = 0; k < in; ++k) dxr[k] += g * wr[k];
      }
    }
  }
}

struct LayerNormCache {
  std::vector<double> mean;
  std::vector<double> rstd;
};

inline void layernorm_forward(const Matrix& x, const Matrix& gain,
                              const Matrix& bias, Matrix& y,
                              LayerNormCache& cache) {
  const int n = x.rows(), d = x.cols();
  cache.mean.resize(n);
  cache.rstd.resize(n);
  for (int i = 0; i < n; ++i) {
    const double* xr = x.data() + static_cast<size_t>(i) * d;
    double mean = 0.0;
    for (int k = 0; k < d; ++k) mean += xr[k];
    mean /= d;
    double var = 0.0;
    for (int k = 0; k < d; ++k) var += (xr[k] - mean) * (xr[k] - mean);
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + 1e-6);
    cache.mean[i] = mean;
    cache.rstd[i] = rstd;
    double* yr = y.data() + static_cast<size_t>(i) * d;
    for (int k = 0; k < d; ++k) {
      yr[k] = gain(0, k) * ((xr[k] - mean) * rstd) + bias(0, k);
    }
  }
}

inline void layernorm_backward(const Matrix& x, const Matrix& gain,
                               const LayerNormCache& cache, const Matrix& dy,
                               Matrix& dgain, Matrix& dbias, Matrix& dx) {
  const int n = x.rows(), d = x.cols();
  for (int i = 0; i < n; ++i) {
    const double* xr = x.data() + static_cast<size_t>(i) * d;
    const double* dyr = dy.data() + static_cast<size_t>(i) * d;
    double* dxr = dx.data() + static_cast<size_t>(i) * d;
    const double mean = cache.mean[i], rstd = cache.rstd[i];
    double sum_dh = 0.0, sum_dh_xhat = 0.0;
    for (int k = 0; k < d; ++k) {
      const double xhat = (xr[k] - mean) * rstd;
      const double dh = dyr[k] * gain(0, k);
      sum_dh += dh;
      sum_dh_xhat += dh * xhat;
      dgain(0, k) += dyr[k] * xhat;
      dbias(0, k) += dyr[k];
    }
    for (int k = 0; k < d; ++k) {
      const double xhat = (xr[k] - mean) * rstd;
      const double dh = dyr[k] * gain(0, k);
      dxr[k] += rstd * (dh - sum_dh / d - xhat * sum_dh_xhat / d);
    }
  }
}

// Row softmax over logits that may contain -inf entries; blocked entries get
// exactly zero weight. Throws if a row is fully blocked.
inline void masked_softmax_rows(Matrix& logits) {
  const int n = logits.rows(), m = logits.cols();
  for (int i = 0; i < n; ++i) {
    double* r = logits.data() + static_cast<size_t>(i) * m;
    double mx = kNegInf;
    for (int k = 0; k < m; ++k) mx = std::max(mx, r[k]);
    if (!(mx > kNegInf)) {
      throw std::invalid_argument("attention row " + std::to_string(i) +
                                  " is fully blocked");
    }
    double sum = 0.0;
    for (int k = 0; k < m; ++k) {
      r[k] = std::exp(r[k] - mx);  // exp(-inf) == 0 exactly
      sum += r[k];
    }
    const double inv = 1.0 / sum;
    for (int k = 0; k < m; ++k) r[k] *= inv;
  }
}

// d(logits) for y = softmax(logits) given dy, both n x m; probs holds y.
inline void softmax_backward_rows(const Matrix& probs, const Matrix& dy,
                                  Matrix& dlogits) {
  const int n = probs.rows(), m = probs.cols();
  for (int i = 0; i < n; ++i) {
    const double* p = probs.data() + static_cast<size_t>(i) * m;
    const double* g = dy.data() + static_cast<size_t>(i) * m;
    double* o = dlogits.data() + static_cast<size_t>(i) * m;
    double dot = 0.0;
    for (int k = 0; k < m; ++k) dot += p[k] * g[k];
    for (int k = 0; k < m; ++k) o[k] = p[k] * (g[k] - dot);
  }
}

// Decoupled-weight-decay adaptive moment optimizer over a fixed list of
// tensors. Moment buffers are keyed by position, so the tensor list must be
// stable across steps.
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  explicit AdamW(Hyper h) : hyper_(h) {}

  const Hyper& hyper() const { return hyper_; }

  void step(std::vector<Tensor*>& params, double lr) {
    if (m_.empty()) {
      for (Tensor* t : params) {
        m_.emplace_back(t->value.rows(), t->value.cols());
        v_.emplace_back(t->value.rows(), t->value.cols());
      }
    }
    require(m_.size() == params.size(), "AdamW: parameter list changed size");
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, t_);
    const double bc2 = 1.0 - std::pow(hyper_.beta2, t_);
    for (size_t p = 0; p < params.size(); ++p) {
      Matrix& w = params[p]->value;
      const Matrix& g = params[p]->grad;
      Matrix& m = m_[p];
      Matrix& v = v_[p];
      for (size_t i = 0; i < w.size(); ++i) {
        m.data()[i] = hyper_.beta1 * m.data()[i] + (1.0 - hyper_.beta1) * g.data()[i];
        v.data()[i] = hyper_.beta2 * v.data()[i] +
                      (1.0 - hyper_.beta2) * g.data()[i] * g.data()[i];
        const double mhat = m.data()[i] / bc1;
        const double vhat = v.data()[i] / bc2;
        w.data()[i] -= lr * (mhat / (std::sqrt(vhat) + hyper_.eps) +
                             hyper_.weight_decay * w.data()[i]);
      }
    }
  }

 private:
  Hyper hyper_;
  long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace morphkit::nn
