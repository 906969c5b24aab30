// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "morphkit/core.hpp"
#include "morphkit/morphology.hpp"
#include "morphkit/nn.hpp"

namespace morphkit {

enum class MaskMode {
  kNoMask,
  kFullMask,
  kMixMask,
  kSpdSoftmask,
  kAdjSoftmaskV10,
  kAdjSoftmaskV11,
  kAdjSoftmaskV20,
};

inline std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::kNoMask: return "no_mask";
    case MaskMode::kFullMask: return "full_mask";
    case MaskMode::kMixMask: return "mix_mask";
    case MaskMode::kSpdSoftmask: return "spd_softmask";
    case MaskMode::kAdjSoftmaskV10: return "adj_softmask_v10";
    case MaskMode::kAdjSoftmaskV11: return "adj_softmask_v11";
    case MaskMode::kAdjSoftmaskV20: return "adj_softmask_v20";
  }
  return "?";
}

inline MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "no_mask") return MaskMode::kNoMask;
  if (s == "full_mask") return MaskMode::kFullMask;
  if (s == "mix_mask") return MaskMode::kMixMask;
  if (s == "spd_softmask") return MaskMode::kSpdSoftmask;
  if (s == "adj_softmask_v10") return MaskMode::kAdjSoftmaskV10;
  if (s == "adj_softmask_v11") return MaskMode::kAdjSoftmaskV11;
  if (s == "adj_softmask_v20") return MaskMode::kAdjSoftmaskV20;
  throw std::invalid_argument("unknown mask mode: " + s);
}

inline bool mask_mode_is_hard_family(MaskMode m) {
  return m == MaskMode::kNoMask || m == MaskMode::kFullMask ||
         m == MaskMode::kMixMask;
}

inline bool mask_mode_is_adj_soft(MaskMode m) {
  return m == MaskMode::kAdjSoftmaskV10 || m == MaskMode::kAdjSoftmaskV11 ||
         m == MaskMode::kAdjSoftmaskV20;
}

enum class LayerKind { kMasked, kFree };

// full_mask: every layer masked. mix_mask: even layers masked, odd layers
// free. no_mask: every layer free.
inline std::vector<LayerKind> layer_schedule(MaskMode mode, int layers) {
  require(layers >= 1, "layer_schedule: need at least one layer");
  require(mask_mode_is_hard_family(mode),
          "layer_schedule applies to no/full/mix mask modes only");
  std::vector<LayerKind> out(layers, LayerKind::kFree);
  for (int l = 0; l < layers; ++l) {
    if (mode == MaskMode::kFullMask ||
        (mode == MaskMode::kMixMask && l % 2 == 0)) {
      out[l] = LayerKind::kMasked;
    }
  }
  return out;
}

// Hard bias: 0 for self and 1-hop neighbors, -inf elsewhere.
inline Matrix hard_bias(const AdjacencyIndicator& adj) {
  const int n = adj.values.rows();
  Matrix b(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      b(i, j) = adj.values(i, j) == 1.0 ? 0.0 : kNegInf;
    }
  }
  return b;
}

enum class BiasInit { kZero, kHard, kMix, kLinear };

inline std::string to_string(BiasInit b) {
  switch (b) {
    case BiasInit::kZero: return "zero";
    case BiasInit::kHard: return "hard";
    case BiasInit::kMix: return "mix";
    case BiasInit::kLinear: return "linear";
  }
  return "?";
}

inline BiasInit bias_init_from_string(const std::string& s) {
  if (s == "zero") return BiasInit::kZero;
  if (s == "hard") return BiasInit::kHard;
  if (s == "mix") return BiasInit::kMix;
  if (s == "linear") return BiasInit::kLinear;
  throw std::invalid_argument("unknown bias init: " + s);
}

// Learnable distance-indexed bias table theta[layer][distance].
struct SpdBiasTable {
  int layers = 0;
  int max_distance = 0;
  nn::Tensor theta;  // layers x (max_distance + 1)

  double at(int layer, int distance) const { return theta.value(layer, distance); }
};

inline SpdBiasTable init_spd_table(BiasInit mode, int layers, int d_max,
                                   double strength = 3.0) {
  require(layers >= 1, "init_spd_table: need at least one layer");
  require(d_max >= 1, "init_spd_table: d_max must be >= 1");
  SpdBiasTable t;
  t.layers = layers;
  t.max_distance = d_max;
  t.theta = nn::Tensor(layers, d_max + 1);
  for (int l = 0; l < layers; ++l) {
    for (int d = 0; d <= d_max; ++d) {
      double v = 0.0;
      const bool hard_row =
          mode == BiasInit::kHard || (mode == BiasInit::kMix && l % 2 == 0);
      if (hard_row && d >= 2) {
        v = -strength;
      } else if (mode == BiasInit::kLinear && d >= 2 && d_max >= 2) {
        v = -strength * static_cast<double>(d - 1) /
            static_cast<double>(d_max - 1);
      }
      t.theta.value(l, d) = v;
    }
  }
  return t;
}

inline Matrix spd_bias(const SpdBiasTable& table, const SpdTable& spd,
                       int layer) {
  require(layer >= 0 && layer < table.layers, "spd_bias: layer out of range");
  require(spd.d_max <= table.max_distance,
          "graph distance " + std::to_string(spd.d_max) +
              " exceeds bias table width " +
              std::to_string(table.max_distance + 1));
  const int n = spd.num_joints;
  Matrix b(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      b(i, j) = table.at(layer, spd.at(i, j));
    }
  }
  return b;
}

enum class AdjVariant { kV10, kV11, kV20 };

inline std::string to_string(AdjVariant v) {
  switch (v) {
    case AdjVariant::kV10: return "v1.0";
    case AdjVariant::kV11: return "v1.1";
    case AdjVariant::kV20: return "v2.0";
  }
  return "?";
}

// Adjacency-indicator soft mask: B = (M - 1) * s, so neighbor and diagonal
// entries are exactly zero. v1.x map theta through a clamped exponential
// (strictly positive suppression); v2.0 uses theta directly and is
// sign-free.
struct AdjSoftParams {
  AdjVariant variant = AdjVariant::kV20;
  int layers = 0;
  int joints = 0;        // v1.0 edge-wise table is joints x joints per layer
  double theta_max = 5.0;
  nn::Tensor theta;      // v1.0: layers x (joints * joints); v1.1/v2.0: layers x 1

  static AdjSoftParams make(AdjVariant variant, int layers, int joints,
                            double theta_max = 5.0) {
    require(layers >= 1, "AdjSoftParams: need at least one layer");
    AdjSoftParams p;
    p.variant = variant;
    p.layers = layers;
    p.joints = joints;
    p.theta_max = theta_max;
    if (variant == AdjVariant::kV10) {
      require(joints >= 1, "AdjSoftParams v1.0 needs a joint count");
      p.theta = nn::Tensor(layers, joints * joints);
    } else {
      p.theta = nn::Tensor(layers, 1);
    }
    return p;
  }

  // Zero: weak effect (close to no mask). Hard: strong suppression
  // approximating a -strength bias on non-neighbors.
  void init(BiasInit mode, double strength = 3.0) {
    require(mode == BiasInit::kZero || mode == BiasInit::kHard,
            "adjacency soft masks support zero or hard init only");
    double v = 0.0;
    if (mode == BiasInit::kHard) {
      v = variant == AdjVariant::kV20 ? strength : std::log(strength);
    }
    theta.value.fill(v);
  }

  double strength_at(int layer, int i, int j) const {
    const double th = variant == AdjVariant::kV10
                          ? theta.value(layer, i * joints + j)
                          : theta.value(layer, 0);
    if (variant == AdjVariant::kV20) return th;
    return std::exp(std::min(th, theta_max));
  }
};

inline Matrix adj_soft_bias(const AdjSoftParams& params,
                            const AdjacencyIndicator& adj, int layer) {
  require(layer >= 0 && layer < params.layers,
          "adj_soft_bias: layer out of range");
  const int n = adj.values.rows();
  if (params.variant == AdjVariant::kV10) {
    require(params.joints >= n,
            "adj_soft_bias: theta sized for " + std::to_string(params.joints) +
                " joints, graph has " + std::to_string(n));
  }
  Matrix b(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      b(i, j) = (adj.values(i, j) - 1.0) * params.strength_at(layer, i, j);
    }
  }
  return b;
}

// Joint-level additive bias for one layer under any mask mode.
inline Matrix joint_bias_for_layer(MaskMode mode, int layer, int layers,
                                   const AdjacencyIndicator& adj,
                                   const SpdTable& spd,
                                   const SpdBiasTable* spd_table,
                                   const AdjSoftParams* adj_params) {
  const int n = adj.values.rows();
  if (mask_mode_is_hard_family(mode)) {
    const auto schedule = layer_schedule(mode, layers);
    require(layer >= 0 && layer < layers, "layer out of range");
    if (schedule[layer] == LayerKind::kMasked) return hard_bias(adj);
    return Matrix(n, n);
  }
  if (mode == MaskMode::kSpdSoftmask) {
    require(spd_table != nullptr, "spd_softmask requires a bias table");
    return spd_bias(*spd_table, spd, layer);
  }
  require(adj_params != nullptr, "adjacency soft masks require parameters");
  return adj_soft_bias(*adj_params, adj, layer);
}

// Per-layer additive joint-to-joint bias expanded to kinematic-token
// granularity: J' = J * G * (1 + M).
struct TopologyBias {
  std::vector<Matrix> per_layer;
};

// Topology is a joint-level property; the bias for a token pair is the bias
// of their joints, replicated across chunk and auxiliary indices. Token
// order: standard tokens (j major, chunk minor), then each auxiliary group.
inline Matrix expand_joint_bias(const Matrix& joint_bias, int chunks,
                                int aux_tokens) {
  const int joints = joint_bias.rows();
  const int group = joints * chunks;
  const int total = group * (1 + aux_tokens);
  Matrix out(total, total);
  for (int a = 0; a < total; ++a) {
    const int ja = (a % group) / chunks;
    for (int b = 0; b < total; ++b) {
      const int jb = (b % group) / chunks;
      out(a, b) = joint_bias(ja, jb);
    }
  }
  return out;
}

inline TopologyBias build_topology_bias(MaskMode mode, int layers,
                                        const AdjacencyIndicator& adj,
                                        const SpdTable& spd,
                                        const SpdBiasTable* spd_table,
                                        const AdjSoftParams* adj_params,
                                        int chunks, int aux_tokens) {
  TopologyBias bias;
  bias.per_layer.reserve(layers);
  for (int l = 0; l < layers; ++l) {
    bias.per_layer.push_back(expand_joint_bias(
        joint_bias_for_layer(mode, l, layers, adj, spd, spd_table, adj_params),
        chunks, aux_tokens));
  }
  return bias;
}

// Ordered token groups of the full sequence.
struct SequenceLayout {
  int obs_tokens = 0;
  int action_tokens = 0;
  int kinematic_tokens = 0;

  int total() const { return obs_tokens + action_tokens + kinematic_tokens; }
};

struct SequenceMask {
  SequenceLayout layout;
  Matrix additive;  // N x N; -inf marks blocked pairs
};

// Block rules: observation tokens attend among themselves; action tokens
// attend everywhere; kinematic tokens attend to observations and, under the
// layer's topology bias, to each other. Kinematic tokens never read action
// tokens, and observations never read action or kinematic tokens.
inline SequenceMask compose_sequence_mask(const SequenceLayout& layout,
                                          const Matrix& kinematic_bias) {
  require(layout.obs_tokens >= 0 && layout.action_tokens >= 0 &&
              layout.kinematic_tokens >= 0,
          "compose_sequence_mask: negative layout counts");
  if (layout.kinematic_tokens > 0) {
    require(kinematic_bias.rows() == layout.kinematic_tokens &&
                kinematic_bias.cols() == layout.kinematic_tokens,
            "kinematic bias shape does not match layout");
  }
  const int n_obs = layout.obs_tokens;
  const int n_act = layout.action_tokens;
  const int n_kin = layout.kinematic_tokens;
  const int n = layout.total();
  require(n >= 1, "compose_sequence_mask: empty sequence");

  SequenceMask mask{layout, Matrix(n, n)};
  Matrix& m = mask.additive;
  const int act0 = n_obs;
  const int kin0 = n_obs + n_act;
  // observation queries: block action and kinematic keys
  for (int q = 0; q < n_obs; ++q) {
    for (int k = act0; k < n; ++k) m(q, k) = kNegInf;
  }
  // action queries: everything stays unblocked (zeros)
  // kinematic queries: block action keys, apply topology bias among kinematic
  for (int q = 0; q < n_kin; ++q) {
    for (int k = act0; k < kin0; ++k) m(kin0 + q, k) = kNegInf;
    for (int k = 0; k < n_kin; ++k) m(kin0 + q, kin0 + k) = kinematic_bias(q, k);
  }
  for (int q = 0; q < n; ++q) {
    bool open = false;
    for (int k = 0; k < n && !open; ++k) open = m(q, k) > kNegInf;
    require(open, "sequence mask blocks every key for query row " +
                      std::to_string(q));
  }
  return mask;
}

struct AttentionResult {
  Matrix outputs;  // N x d_v
  Matrix weights;  // N x N, rows sum to 1 over unblocked keys
};

// Scaled dot-product attention with an additive mask; scaling by
// 1/sqrt(d_head) is applied to the logits before the bias is added.
inline AttentionResult biased_attention(const Matrix& queries,
                                        const Matrix& keys,
                                        const Matrix& values,
                                        const Matrix& additive_mask) {
  require(queries.cols() == keys.cols(), "query/key width mismatch");
  require(keys.rows() == values.rows(), "key/value count mismatch");
  require(additive_mask.rows() == queries.rows() &&
              additive_mask.cols() == keys.rows(),
          "mask shape mismatch");
  const int nq = queries.rows(), nk = keys.rows(), dk = queries.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix logits(nq, nk);
  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < nk; ++j) {
      double acc = 0.0;
      for (int k = 0; k < dk; ++k) acc += queries(i, k) * keys(j, k);
      logits(i, j) = acc * scale + additive_mask(i, j);
    }
  }
  nn::masked_softmax_rows(logits);
  AttentionResult res{Matrix(nq, values.cols()), std::move(logits)};
  for (int i = 0; i < nq; ++i) {
    for (int v = 0; v < values.cols(); ++v) {
      double acc = 0.0;
      for (int j = 0; j < nk; ++j) acc += res.weights(i, j) * values(j, v);
      res.outputs(i, v) = acc;
    }
  }
  return res;
}

inline AttentionResult biased_attention(const Matrix& queries,
                                        const Matrix& keys,
                                        const Matrix& values,
                                        const SequenceMask& mask) {
  return biased_attention(queries, keys, values, mask.additive);
}

// ---- JSON export (CLI golden files; -inf encodes as the string "-inf") ----

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      if (std::isinf(v) && v < 0) {
        row.push_back("-inf");
      } else {
        row.push_back(v);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  require(j.is_array() && !j.empty(), "matrix json must be a nonempty array");
  const int rows = static_cast<int>(j.size());
  const int cols = static_cast<int>(j[0].size());
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    require(static_cast<int>(j[i].size()) == cols, "ragged matrix json");
    for (int k = 0; k < cols; ++k) {
      const auto& cell = j[i][k];
      if (cell.is_string()) {
        require(cell.get<std::string>() == "-inf",
                "unexpected string in matrix json: " + cell.get<std::string>());
        m(i, k) = kNegInf;
      } else {
        m(i, k) = cell.get<double>();
      }
    }
  }
  return m;
}

}  // namespace morphkit
