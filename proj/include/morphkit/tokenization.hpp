// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "morphkit/core.hpp"
#include "morphkit/nn.hpp"

namespace morphkit {

// Horizon x joints action matrix; values(t, j) is the scalar action of
// joint j at time t.
struct ActionTrajectory {
  Matrix values;

  int horizon() const { return values.rows(); }
  int joints() const { return values.cols(); }
};

// Split of a horizon into G non-overlapping chunks of length g = H / G.
struct ChunkSpec {
  int chunks = 1;     // G
  int chunk_len = 1;  // g

  static ChunkSpec make(int horizon, int num_chunks) {
    require(num_chunks >= 1, "chunk count must be >= 1");
    require(horizon >= 1, "horizon must be >= 1");
    require(horizon % num_chunks == 0,
            "chunk count " + std::to_string(num_chunks) +
                " does not divide horizon " + std::to_string(horizon));
    return {num_chunks, horizon / num_chunks};
  }

  int horizon() const { return chunks * chunk_len; }
};

// Per-joint, per-chunk action tokens plus their embeddings. Token (j, k)
// lives in row j * G + k; auxiliary embeddings are kept per encoder index.
struct KinematicTokenSet {
  int joints = 0;
  int chunks = 0;
  int chunk_len = 0;
  Matrix tokens;                       // (J * G) x g
  Matrix embeddings;                   // (J * G) x d, empty until encoded
  std::vector<Matrix> aux_embeddings;  // M entries, each (J * G) x d

  int token_row(int joint, int chunk) const { return joint * chunks + chunk; }
  int standard_count() const { return joints * chunks; }
  int total_count() const {
    return standard_count() * (1 + static_cast<int>(aux_embeddings.size()));
  }
};

inline KinematicTokenSet chunk_actions(const ActionTrajectory& traj,
                                       const ChunkSpec& spec) {
  require(spec.horizon() == traj.horizon(),
          "chunk spec horizon " + std::to_string(spec.horizon()) +
              " does not match trajectory horizon " +
              std::to_string(traj.horizon()));
  KinematicTokenSet set;
  set.joints = traj.joints();
  set.chunks = spec.chunks;
  set.chunk_len = spec.chunk_len;
  set.tokens = Matrix(set.joints * set.chunks, set.chunk_len);
  for (int j = 0; j < set.joints; ++j) {
    for (int k = 0; k < set.chunks; ++k) {
      const int row = set.token_row(j, k);
      for (int t = 0; t < set.chunk_len; ++t) {
        set.tokens(row, t) = traj.values(k * set.chunk_len + t, j);
      }
    }
  }
  return set;
}

inline ActionTrajectory unchunk_actions(const KinematicTokenSet& set,
                                        const ChunkSpec& spec) {
  require(set.chunks == spec.chunks && set.chunk_len == spec.chunk_len,
          "token set does not match chunk spec");
  require(set.tokens.rows() == set.joints * set.chunks &&
              set.tokens.cols() == set.chunk_len,
          "token matrix shape mismatch");
  ActionTrajectory traj{Matrix(spec.horizon(), set.joints)};
  for (int j = 0; j < set.joints; ++j) {
    for (int k = 0; k < set.chunks; ++k) {
      const int row = set.token_row(j, k);
      for (int t = 0; t < set.chunk_len; ++t) {
        traj.values(k * set.chunk_len + t, j) = set.tokens(row, t);
      }
    }
  }
  return traj;
}

enum class EncoderShape { kLinear, kLinearSwigluLinear };

inline std::string to_string(EncoderShape s) {
  return s == EncoderShape::kLinear ? "linear" : "linear_swiglu_linear";
}

inline EncoderShape encoder_shape_from_string(const std::string& s) {
  if (s == "linear") return EncoderShape::kLinear;
  if (s == "linear_swiglu_linear") return EncoderShape::kLinearSwigluLinear;
  throw std::invalid_argument("unknown encoder shape: " + s);
}

// Kinematic-token encoder mapping a length-g token to a d-dimensional
// embedding; either a single linear map or linear-SwiGLU-linear.
struct TokenEncoder {
  EncoderShape shape = EncoderShape::kLinearSwigluLinear;
  int in_dim = 0;
  int hidden_dim = 0;  // gated variant only
  int out_dim = 0;
  bool final_layer_zero_init = true;

  nn::Tensor w_gate, b_gate;  // hidden x in, 1 x hidden
  nn::Tensor w_val, b_val;    // hidden x in, 1 x hidden
  nn::Tensor w_out, b_out;    // out x in (linear) or out x hidden (gated)

  TokenEncoder() = default;
  TokenEncoder(EncoderShape shape_, int in, int hidden, int out,
               bool zero_init = true)
      : shape(shape_), in_dim(in), hidden_dim(hidden), out_dim(out),
        final_layer_zero_init(zero_init) {
    if (shape == EncoderShape::kLinearSwigluLinear) {
      require(hidden >= 1, "SwiGLU hidden width must be >= 1");
      w_gate = nn::Tensor(hidden, in);
      b_gate = nn::Tensor(1, hidden);
      w_val = nn::Tensor(hidden, in);
      b_val = nn::Tensor(1, hidden);
      w_out = nn::Tensor(out, hidden);
    } else {
      w_out = nn::Tensor(out, in);
    }
    b_out = nn::Tensor(1, out);
  }

  void init_params(Rng& rng) {
    if (shape == EncoderShape::kLinearSwigluLinear) {
      w_gate.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(in_dim)));
      w_val.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(in_dim)));
      if (!final_layer_zero_init) {
        w_out.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(hidden_dim)));
      }
    } else if (!final_layer_zero_init) {
      w_out.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    }
    // Zero-init leaves w_out and b_out exactly zero.
  }

  struct Cache {
    std::vector<double> in;
    std::vector<double> u;  // gate pre-activation
    std::vector<double> v;  // value branch
    std::vector<double> a;  // silu(u) * v
  };

  void apply(std::span<const double> token, std::span<double> out,
             Cache* cache = nullptr) const {
    require(static_cast<int>(token.size()) == in_dim,
            "token width " + std::to_string(token.size()) +
                " does not match encoder input width " + std::to_string(in_dim));
    if (cache != nullptr) cache->in.assign(token.begin(), token.end());
    if (shape == EncoderShape::kLinear) {
      for (int o = 0; o < out_dim; ++o) {
        double acc = b_out.value(0, o);
        for (int k = 0; k < in_dim; ++k) acc += w_out.value(o, k) * token[k];
        out[o] = acc;
      }
      return;
    }
    std::vector<double> u(hidden_dim), v(hidden_dim), a(hidden_dim);
    for (int h = 0; h < hidden_dim; ++h) {
      double gu = b_gate.value(0, h), gv = b_val.value(0, h);
      for (int k = 0; k < in_dim; ++k) {
        gu += w_gate.value(h, k) * token[k];
        gv += w_val.value(h, k) * token[k];
      }
      u[h] = gu;
      v[h] = gv;
      a[h] = nn::silu(gu) * gv;
    }
    for (int o = 0; o < out_dim; ++o) {
      double acc = b_out.value(0, o);
      for (int h = 0; h < hidden_dim; ++h) acc += w_out.value(o, h) * a[h];
      out[o] = acc;
    }
    if (cache != nullptr) {
      cache->u = std::move(u);
      cache->v = std::move(v);
      cache->a = std::move(a);
    }
  }

  // Accumulates parameter gradients from one token given d(out).
  void backward(const Cache& cache, std::span<const double> dout) {
    if (shape == EncoderShape::kLinear) {
      for (int o = 0; o < out_dim; ++o) {
        b_out.grad(0, o) += dout[o];
        for (int k = 0; k < in_dim; ++k) {
          w_out.grad(o, k) += dout[o] * cache.in[k];
        }
      }
      return;
    }
    std::vector<double> da(hidden_dim, 0.0);
    for (int o = 0; o < out_dim; ++o) {
      b_out.grad(0, o) += dout[o];
      for (int h = 0; h < hidden_dim; ++h) {
        w_out.grad(o, h) += dout[o] * cache.a[h];
        da[h] += w_out.value(o, h) * dout[o];
      }
    }
    for (int h = 0; h < hidden_dim; ++h) {
      const double du = da[h] * cache.v[h] * nn::dsilu(cache.u[h]);
      const double dv = da[h] * nn::silu(cache.u[h]);
      b_gate.grad(0, h) += du;
      b_val.grad(0, h) += dv;
      for (int k = 0; k < in_dim; ++k) {
        w_gate.grad(h, k) += du * cache.in[k];
        w_val.grad(h, k) += dv * cache.in[k];
      }
    }
  }
};

inline Matrix encode_tokens(const KinematicTokenSet& set,
                            const TokenEncoder& enc) {
  require(set.chunk_len == enc.in_dim,
          "token length " + std::to_string(set.chunk_len) +
              " does not match encoder input width " +
              std::to_string(enc.in_dim));
  Matrix out(set.tokens.rows(), enc.out_dim);
  for (int r = 0; r < set.tokens.rows(); ++r) {
    enc.apply(set.tokens.row(r), out.row(r));
  }
  return out;
}

// Auxiliary embeddings: encoders share the input token but have independent
// parameters; in the sequence they are appended after the standard tokens,
// grouped by encoder index, then joint, then chunk.
inline std::vector<Matrix> encode_auxiliary(
    const KinematicTokenSet& set, std::span<const TokenEncoder> encoders) {
  std::vector<Matrix> out;
  out.reserve(encoders.size());
  for (const TokenEncoder& enc : encoders) {
    if (!encoders.empty()) {
      require(enc.in_dim == encoders.front().in_dim &&
                  enc.out_dim == encoders.front().out_dim,
              "auxiliary encoders must share input and output widths");
    }
    out.push_back(encode_tokens(set, enc));
  }
  return out;
}

}  // namespace morphkit
