// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphkit/conditioning.hpp"
#include "morphkit/core.hpp"
#include "morphkit/morphology.hpp"
#include "morphkit/nn.hpp"
#include "morphkit/tokenization.hpp"
#include "morphkit/topo_attention.hpp"

namespace morphkit {

enum class FinetuneMode { kApFt, kFullFt };

inline std::string to_string(FinetuneMode m) {
  return m == FinetuneMode::kApFt ? "ap_ft" : "full_ft";
}

inline FinetuneMode finetune_mode_from_string(const std::string& s) {
  if (s == "ap_ft") return FinetuneMode::kApFt;
  if (s == "full_ft") return FinetuneMode::kFullFt;
  throw std::invalid_argument("unknown finetune mode: " + s);
}

enum class Partition { kBackbone, kActionPolicy };

struct PolicyConfig {
  int model_dim = 32;  // d
  int layers = 2;      // L
  int heads = 4;
  int horizon = 16;    // H
  int max_joints = 8;  // J_max
  int chunks = 1;      // G
  int aux_tokens = 0;  // M
  int obs_dim = 8;
  MaskMode mask_mode = MaskMode::kNoMask;
  bool kt_enabled = false;
  bool film_enabled = false;
  bool kt_positional = true;   // learned per-(aux, joint, chunk) embedding
  bool film_normalize = true;  // standardize descriptors before FiLM
  EncoderShape encoder_shape = EncoderShape::kLinearSwigluLinear;
  int encoder_hidden = 0;  // 0 means 4 * model_dim
  BiasInit bias_init = BiasInit::kZero;
  double bias_strength = 3.0;
  double theta_max = 5.0;
  uint64_t seed = 0;

  int head_dim() const { return model_dim / heads; }
  int chunk_len() const { return horizon / chunks; }
  int hidden_width() const {
    return encoder_hidden > 0 ? encoder_hidden : 4 * model_dim;
  }
  int kinematic_token_count(int joints) const {
    return kt_enabled ? joints * chunks * (1 + aux_tokens) : 0;
  }

  void validate() const {
    require(model_dim >= 1 && layers >= 1 && heads >= 1, "bad model shape");
    require(model_dim % heads == 0, "model_dim must be divisible by heads");
    require(horizon >= 1 && max_joints >= 1, "bad horizon/joint bounds");
    require(chunks >= 1 && horizon % chunks == 0,
            "chunk count " + std::to_string(chunks) +
                " does not divide horizon " + std::to_string(horizon));
    require(aux_tokens >= 0, "aux_tokens must be >= 0");
    require(obs_dim >= 1, "obs_dim must be >= 1");
    require(theta_max == theta_max && std::isfinite(theta_max),
            "theta_max must be finite");
    if (mask_mode != MaskMode::kNoMask) {
      require(kt_enabled,
              "topology-aware masks require kinematic tokens (kt_enabled)");
    }
    if (film_enabled) {
      require(kt_enabled, "FiLM conditions kinematic tokens (kt_enabled)");
    }
    if (mask_mode_is_adj_soft(mask_mode)) {
      require(bias_init == BiasInit::kZero || bias_init == BiasInit::kHard,
              "adjacency soft masks support zero or hard init only");
    }
  }

  nlohmann::json to_json() const {
    return {{"model_dim", model_dim},
            {"layers", layers},
            {"heads", heads},
            {"horizon", horizon},
            {"max_joints", max_joints},
            {"chunks", chunks},
            {"aux_tokens", aux_tokens},
            {"obs_dim", obs_dim},
            {"mask_mode", to_string(mask_mode)},
            {"kt_enabled", kt_enabled},
            {"film_enabled", film_enabled},
            {"kt_positional", kt_positional},
            {"film_normalize", film_normalize},
            {"encoder_shape", to_string(encoder_shape)},
            {"encoder_hidden", encoder_hidden},
            {"bias_init", to_string(bias_init)},
            {"bias_strength", bias_strength},
            {"theta_max", theta_max},
            {"seed", seed}};
  }

  static PolicyConfig from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.model_dim = j.value("model_dim", c.model_dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.horizon = j.value("horizon", c.horizon);
    c.max_joints = j.value("max_joints", c.max_joints);
    c.chunks = j.value("chunks", c.chunks);
    c.aux_tokens = j.value("aux_tokens", c.aux_tokens);
    c.obs_dim = j.value("obs_dim", c.obs_dim);
    if (j.contains("mask_mode")) c.mask_mode = mask_mode_from_string(j["mask_mode"]);
    c.kt_enabled = j.value("kt_enabled", c.kt_enabled);
    c.film_enabled = j.value("film_enabled", c.film_enabled);
    c.kt_positional = j.value("kt_positional", c.kt_positional);
    c.film_normalize = j.value("film_normalize", c.film_normalize);
    if (j.contains("encoder_shape")) {
      c.encoder_shape = encoder_shape_from_string(j["encoder_shape"]);
    }
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    if (j.contains("bias_init")) c.bias_init = bias_init_from_string(j["bias_init"]);
    c.bias_strength = j.value("bias_strength", c.bias_strength);
    c.theta_max = j.value("theta_max", c.theta_max);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

inline bool operator==(const PolicyConfig& a, const PolicyConfig& b) {
  return a.to_json() == b.to_json();
}

// One (obs, action trajectory) pair from a single embodiment.
struct Sample {
  std::vector<double> obs;  // obs_dim features
  Matrix actions;           // H x J
};

namespace detail {

struct TransformerBlock {
  nn::Tensor ln1_g, ln1_b;
  nn::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  nn::Tensor ln2_g, ln2_b;
  nn::Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  TransformerBlock() = default;
  TransformerBlock(int d, int mlp_hidden)
      : ln1_g(1, d), ln1_b(1, d),
        wq(d, d), bq(1, d), wk(d, d), bk(1, d), wv(d, d), bv(1, d),
        wo(d, d), bo(1, d),
        ln2_g(1, d), ln2_b(1, d),
        mlp_w1(mlp_hidden, d), mlp_b1(1, mlp_hidden),
        mlp_w2(d, mlp_hidden), mlp_b2(1, d) {}
};

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

// Parameter store of the toy transformer action expert. The observation
// encoder is the "backbone" partition; everything else belongs to the
// action-policy partition.
struct PolicyModel {
  PolicyConfig config;
  DescriptorStats norm_stats = DescriptorStats::identity();
  bool has_norm_stats = false;
  bool backbone_trainable = true;

  // backbone: observation encoder (two-layer MLP obs_dim -> d -> d)
  nn::Tensor obs_w1, obs_b1, obs_w2, obs_b2;
  // action token path
  nn::Tensor action_in_w, action_in_b;  // d x J_max
  nn::Tensor pos_action;                // H x d
  nn::Tensor time_w1, time_b1, time_w2, time_b2;
  // kinematic token path
  TokenEncoder enc0;
  std::vector<TokenEncoder> aux_enc;
  nn::Tensor kt_pos;  // ((1 + M) * J_max * G) x d
  FilmGenerator film;
  // trunk
  std::vector<detail::TransformerBlock> blocks;
  nn::Tensor ln_f_g, ln_f_b;
  nn::Tensor action_out_w, action_out_b;  // J_max x d, zero-initialized
  // learnable topology bias
  SpdBiasTable spd_table;    // mask_mode == spd_softmask
  AdjSoftParams adj_params;  // adjacency soft-mask modes

  explicit PolicyModel(const PolicyConfig& cfg) : config(cfg) {
    cfg.validate();
    const int d = cfg.model_dim;
    obs_w1 = nn::Tensor(d, cfg.obs_dim);
    obs_b1 = nn::Tensor(1, d);
    obs_w2 = nn::Tensor(d, d);
    obs_b2 = nn::Tensor(1, d);
    action_in_w = nn::Tensor(d, cfg.max_joints);
    action_in_b = nn::Tensor(1, d);
    pos_action = nn::Tensor(cfg.horizon, d);
    time_w1 = nn::Tensor(d, d);
    time_b1 = nn::Tensor(1, d);
    time_w2 = nn::Tensor(d, d);
    time_b2 = nn::Tensor(1, d);
    if (cfg.kt_enabled) {
      enc0 = TokenEncoder(cfg.encoder_shape, cfg.chunk_len(), cfg.hidden_width(),
                          d, /*zero_init=*/true);
      aux_enc.clear();
      for (int m = 0; m < cfg.aux_tokens; ++m) {
        aux_enc.emplace_back(cfg.encoder_shape, cfg.chunk_len(),
                             cfg.hidden_width(), d, /*zero_init=*/true);
      }
      if (cfg.kt_positional) {
        kt_pos = nn::Tensor((1 + cfg.aux_tokens) * cfg.max_joints * cfg.chunks, d);
      }
      if (cfg.film_enabled) film = FilmGenerator(d, /*zero_init=*/true);
    }
    blocks.clear();
    for (int l = 0; l < cfg.layers; ++l) blocks.emplace_back(d, 4 * d);
    ln_f_g = nn::Tensor(1, d);
    ln_f_b = nn::Tensor(1, d);
    action_out_w = nn::Tensor(cfg.max_joints, d);
    action_out_b = nn::Tensor(1, cfg.max_joints);
    if (cfg.mask_mode == MaskMode::kSpdSoftmask) {
      // Sized for the largest distance any served graph can have.
      spd_table = init_spd_table(cfg.bias_init, cfg.layers,
                                 std::max(1, cfg.max_joints - 1),
                                 cfg.bias_strength);
    }
    if (mask_mode_is_adj_soft(cfg.mask_mode)) {
      AdjVariant var = AdjVariant::kV20;
      if (cfg.mask_mode == MaskMode::kAdjSoftmaskV10) var = AdjVariant::kV10;
      if (cfg.mask_mode == MaskMode::kAdjSoftmaskV11) var = AdjVariant::kV11;
      adj_params = AdjSoftParams::make(var, cfg.layers, cfg.max_joints,
                                       cfg.theta_max);
      adj_params.init(cfg.bias_init, cfg.bias_strength);
    }
    init_params();
  }

  template <class F>
  void for_each_param(F&& f) {
    const auto& cfg = config;
    f("obs_enc.w1", obs_w1, Partition::kBackbone);
    f("obs_enc.b1", obs_b1, Partition::kBackbone);
    f("obs_enc.w2", obs_w2, Partition::kBackbone);
    f("obs_enc.b2", obs_b2, Partition::kBackbone);
    f("action_in.w", action_in_w, Partition::kActionPolicy);
    f("action_in.b", action_in_b, Partition::kActionPolicy);
    f("pos.action", pos_action, Partition::kActionPolicy);
    f("time.w1", time_w1, Partition::kActionPolicy);
    f("time.b1", time_b1, Partition::kActionPolicy);
    f("time.w2", time_w2, Partition::kActionPolicy);
    f("time.b2", time_b2, Partition::kActionPolicy);
    if (cfg.kt_enabled) {
      auto encoder_params = [&](const std::string& prefix, TokenEncoder& e) {
        if (e.shape == EncoderShape::kLinearSwigluLinear) {
          f(prefix + ".w_gate", e.w_gate, Partition::kActionPolicy);
          f(prefix + ".b_gate", e.b_gate, Partition::kActionPolicy);
          f(prefix + ".w_val", e.w_val, Partition::kActionPolicy);
          f(prefix + ".b_val", e.b_val, Partition::kActionPolicy);
        }
        f(prefix + ".w_out", e.w_out, Partition::kActionPolicy);
        f(prefix + ".b_out", e.b_out, Partition::kActionPolicy);
      };
      encoder_params("enc0", enc0);
      for (size_t m = 0; m < aux_enc.size(); ++m) {
        encoder_params("aux" + std::to_string(m), aux_enc[m]);
      }
      if (cfg.kt_positional) f("pos.kinematic", kt_pos, Partition::kActionPolicy);
      if (cfg.film_enabled) {
        f("film.w", film.w, Partition::kActionPolicy);
        f("film.b", film.b, Partition::kActionPolicy);
      }
    }
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "block" + std::to_string(l);
      auto& blk = blocks[l];
      f(p + ".ln1.g", blk.ln1_g, Partition::kActionPolicy);
      f(p + ".ln1.b", blk.ln1_b, Partition::kActionPolicy);
      f(p + ".attn.wq", blk.wq, Partition::kActionPolicy);
      f(p + ".attn.bq", blk.bq, Partition::kActionPolicy);
      f(p + ".attn.wk", blk.wk, Partition::kActionPolicy);
      f(p + ".attn.bk", blk.bk, Partition::kActionPolicy);
      f(p + ".attn.wv", blk.wv, Partition::kActionPolicy);
      f(p + ".attn.bv", blk.bv, Partition::kActionPolicy);
      f(p + ".attn.wo", blk.wo, Partition::kActionPolicy);
      f(p + ".attn.bo", blk.bo, Partition::kActionPolicy);
      f(p + ".ln2.g", blk.ln2_g, Partition::kActionPolicy);
      f(p + ".ln2.b", blk.ln2_b, Partition::kActionPolicy);
      f(p + ".mlp.w1", blk.mlp_w1, Partition::kActionPolicy);
      f(p + ".mlp.b1", blk.mlp_b1, Partition::kActionPolicy);
      f(p + ".mlp.w2", blk.mlp_w2, Partition::kActionPolicy);
      f(p + ".mlp.b2", blk.mlp_b2, Partition::kActionPolicy);
    }
    f("ln_f.g", ln_f_g, Partition::kActionPolicy);
    f("ln_f.b", ln_f_b, Partition::kActionPolicy);
    f("action_out.w", action_out_w, Partition::kActionPolicy);
    f("action_out.b", action_out_b, Partition::kActionPolicy);
    if (cfg.mask_mode == MaskMode::kSpdSoftmask) {
      f("bias.spd_theta", spd_table.theta, Partition::kActionPolicy);
    }
    if (mask_mode_is_adj_soft(cfg.mask_mode)) {
      f("bias.adj_theta", adj_params.theta, Partition::kActionPolicy);
    }
  }

  template <class F>
  void for_each_param(F&& f) const {
    const_cast<PolicyModel*>(this)->for_each_param(
        [&](const std::string& name, nn::Tensor& t, Partition p) {
          f(name, static_cast<const nn::Tensor&>(t), p);
        });
  }

  void zero_grads() {
    for_each_param([](const std::string&, nn::Tensor& t, Partition) {
      t.zero_grad();
    });
  }

  std::vector<nn::Tensor*> trainable_params() {
    std::vector<nn::Tensor*> out;
    for_each_param([&](const std::string&, nn::Tensor& t, Partition p) {
      if (p == Partition::kActionPolicy || backbone_trainable) out.push_back(&t);
    });
    return out;
  }

  size_t num_params() const {
    size_t n = 0;
    for_each_param([&](const std::string&, const nn::Tensor& t, Partition) {
      n += t.value.size();
    });
    return n;
  }

  void set_descriptor_stats(const DescriptorStats& stats) {
    norm_stats = stats;
    has_norm_stats = true;
  }

 private:
  // Each tensor gets its own seed stream keyed by name, so initialization is
  // stable regardless of which optional modules exist.
  void init_params() {
    const int d = config.model_dim;
    for_each_param([&](const std::string& name, nn::Tensor& t, Partition) {
      Rng rng(mix_seed(config.seed, detail::fnv1a(name)));
      const bool is_ln_gain = name.ends_with("ln1.g") || name.ends_with("ln2.g") ||
                              name == "ln_f.g";
      if (is_ln_gain) {
        t.value.fill(1.0);
        return;
      }
      if (name == "obs_enc.w1") {
        t.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(config.obs_dim)));
      } else if (name == "obs_enc.w2" || name == "time.w1" || name == "time.w2") {
        t.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(d)));
      } else if (name == "action_in.w") {
        t.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(config.max_joints)));
      } else if (name == "pos.action" || name == "pos.kinematic") {
        t.fill_normal(rng, 0.02);
      } else if (name.find(".attn.w") != std::string::npos ||
                 name.ends_with(".mlp.w1")) {
        t.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(d)));
      } else if (name.ends_with(".mlp.w2")) {
        t.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(4 * d)));
      }
      // Everything else (biases, zero-init heads, FiLM, bias tables) keeps
      // the value set at construction.
    });
    // Token encoders draw through their own init path, also keyed by name.
    if (config.kt_enabled) {
      Rng rng0(mix_seed(config.seed, detail::fnv1a("enc0")));
      enc0.init_params(rng0);
      for (size_t m = 0; m < aux_enc.size(); ++m) {
        Rng rngm(mix_seed(config.seed, detail::fnv1a("aux" + std::to_string(m))));
        aux_enc[m].init_params(rngm);
      }
    }
  }
};

// Precomputed per-(morphology, obs count) state shared by every sample in a
// batch: attention masks per layer, normalized descriptors, FiLM params.
struct PolicyContext {
  const RobotMorphology* morph = nullptr;
  int joints = 0;
  AdjacencyIndicator adj;
  SpdTable spd;
  SequenceLayout layout;
  std::vector<Matrix> masks;  // per layer, N x N additive
  std::vector<std::array<double, kDescriptorDim>> descriptors;
  std::vector<FilmParams> film;  // per joint, when film is enabled
};

inline PolicyContext build_context(const PolicyModel& model,
                                   const RobotMorphology& morph,
                                   int obs_count) {
  const PolicyConfig& cfg = model.config;
  require(obs_count >= 1, "need at least one observation vector");
  require(morph.num_joints <= cfg.max_joints,
          "morphology has " + std::to_string(morph.num_joints) +
              " joints, model supports at most " +
              std::to_string(cfg.max_joints));
  PolicyContext ctx;
  ctx.morph = &morph;
  ctx.joints = morph.num_joints;
  ctx.adj = adjacency_indicator(morph);
  ctx.spd = shortest_path_distances(morph);
  ctx.layout = SequenceLayout{obs_count, cfg.horizon,
                              cfg.kinematic_token_count(morph.num_joints)};
  const TopologyBias topo = cfg.kt_enabled
      ? build_topology_bias(cfg.mask_mode, cfg.layers, ctx.adj, ctx.spd,
                            cfg.mask_mode == MaskMode::kSpdSoftmask
                                ? &model.spd_table : nullptr,
                            mask_mode_is_adj_soft(cfg.mask_mode)
                                ? &model.adj_params : nullptr,
                            cfg.chunks, cfg.aux_tokens)
      : TopologyBias{std::vector<Matrix>(cfg.layers, Matrix())};
  ctx.masks.reserve(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    ctx.masks.push_back(
        compose_sequence_mask(ctx.layout, topo.per_layer[l]).additive);
  }
  if (cfg.kt_enabled) {
    ctx.descriptors.reserve(morph.num_joints);
    for (const auto& d : morph.descriptors) {
      auto v = descriptor_vector(d);
      if (cfg.film_normalize && model.has_norm_stats) {
        v = apply_descriptor_stats(v, model.norm_stats);
      }
      ctx.descriptors.push_back(v);
    }
    if (cfg.film_enabled) {
      ctx.film.reserve(morph.num_joints);
      for (const auto& v : ctx.descriptors) {
        ctx.film.push_back(model.film.generate(v));
      }
    }
  }
  return ctx;
}

namespace detail {

inline void time_features(double tau, int d, std::vector<double>& out) {
  out.resize(d);
  const int pairs = d / 2;
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (int i = 0; i < pairs; ++i) {
    const double freq =
        std::exp(std::log(100.0) * (pairs > 1 ? static_cast<double>(i) / (pairs - 1) : 0.0));
    out[2 * i] = std::sin(two_pi * freq * tau);
    out[2 * i + 1] = std::cos(two_pi * freq * tau);
  }
  if (d % 2 == 1) out[d - 1] = tau;
}

struct LayerCache {
  Matrix x_in;  // block input
  Matrix ln1_out;
  nn::LayerNormCache ln1;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, N x N
  Matrix att_concat;          // head outputs before the output projection
  Matrix x_mid;               // after attention residual
  Matrix ln2_out;
  nn::LayerNormCache ln2;
  Matrix mlp_h;  // pre-activation
  Matrix mlp_a;  // gelu output
};

struct ForwardCache {
  int n = 0;
  double tau = 0.0;
  std::vector<std::vector<double>> obs;
  std::vector<std::vector<double>> obs_h1, obs_a1;
  Matrix x_pad;  // H x J_max
  std::vector<double> time_feat, time_h1, time_a;
  KinematicTokenSet kt;
  std::vector<TokenEncoder::Cache> enc_caches;  // (1+M)*J*G, aux-major order
  Matrix kt_pre_film;                           // ((1+M)*J*G) x d
  Matrix x0;
  std::vector<LayerCache> layers;
  Matrix x_final;
  Matrix lnf_out;
  nn::LayerNormCache lnf;
  Matrix pred;  // H x J_max
};

// Multi-head self-attention over x_ln with an additive mask shared by all
// heads. Fills cache.{q,k,v,probs,att_concat}.
inline void attention_forward(const PolicyModel& model,
                              const TransformerBlock& blk, const Matrix& x_ln,
                              const Matrix& mask, LayerCache& lc) {
  const int n = x_ln.rows(), d = x_ln.cols();
  const int heads = model.config.heads, hd = model.config.head_dim();
  lc.q = Matrix(n, d);
  lc.k = Matrix(n, d);
  lc.v = Matrix(n, d);
  nn::linear_forward(x_ln, blk.wq.value, blk.bq.value, lc.q);
  nn::linear_forward(x_ln, blk.wk.value, blk.bk.value, lc.k);
  nn::linear_forward(x_ln, blk.wv.value, blk.bv.value, lc.v);
  lc.probs.assign(heads, Matrix());
  lc.att_concat = Matrix(n, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < heads; ++h) {
    const int off = h * hd;
    Matrix logits(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int k = 0; k < hd; ++k) acc += lc.q(i, off + k) * lc.k(j, off + k);
        logits(i, j) = acc * scale + mask(i, j);
      }
    }
    nn::masked_softmax_rows(logits);
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < hd; ++k) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += logits(i, j) * lc.v(j, off + k);
        lc.att_concat(i, off + k) = acc;
      }
    }
    lc.probs[h] = std::move(logits);
  }
}

// Backward for attention_forward. Accumulates parameter grads, adds the
// gradient w.r.t. x_ln into dx_ln, and accumulates the gradient w.r.t. the
// additive mask into dmask (for learnable topology biases).
inline void attention_backward(PolicyModel& model, TransformerBlock& blk,
                               const Matrix& x_ln, const LayerCache& lc,
                               const Matrix& datt_concat, Matrix& dx_ln,
                               Matrix* dmask) {
  const int n = x_ln.rows(), d = x_ln.cols();
  const int heads = model.config.heads, hd = model.config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix dq(n, d), dk(n, d), dv(n, d);
  Matrix dprob(n, n), dlogits(n, n);
  for (int h = 0; h < heads; ++h) {
    const int off = h * hd;
    const Matrix& p = lc.probs[h];
    // d(prob) and d(v)
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int k = 0; k < hd; ++k) acc += datt_concat(i, off + k) * lc.v(j, off + k);
        dprob(i, j) = acc;
      }
    }
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < hd; ++k) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += p(i, j) * datt_concat(i, off + k);
        dv(j, off + k) = acc;
      }
    }
    nn::softmax_backward_rows(p, dprob, dlogits);
    if (dmask != nullptr) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) (*dmask)(i, j) += dlogits(i, j);
      }
    }
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < hd; ++k) {
        double accq = 0.0;
        for (int j = 0; j < n; ++j) accq += dlogits(i, j) * lc.k(j, off + k);
        dq(i, off + k) = accq * scale;
      }
    }
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < hd; ++k) {
        double acck = 0.0;
        for (int i = 0; i < n; ++i) acck += dlogits(i, j) * lc.q(i, off + k);
        dk(j, off + k) = acck * scale;
      }
    }
  }
  nn::linear_backward(x_ln, blk.wq.value, dq, blk.wq.grad, blk.bq.grad, &dx_ln);
  nn::linear_backward(x_ln, blk.wk.value, dk, blk.wk.grad, blk.bk.grad, &dx_ln);
  nn::linear_backward(x_ln, blk.wv.value, dv, blk.wv.grad, blk.bv.grad, &dx_ln);
}

}  // namespace detail

// Deterministic forward pass for one sample. `actions` is the current noisy
// action interpolant X_tau (H x J for the context's morphology).
inline void forward_cached(const PolicyModel& model, const PolicyContext& ctx,
                           const std::vector<std::vector<double>>& obs,
                           const Matrix& actions, double tau,
                           detail::ForwardCache& fc) {
  const PolicyConfig& cfg = model.config;
  const int d = cfg.model_dim;
  const int n_obs = ctx.layout.obs_tokens;
  const int h = cfg.horizon;
  const int kin0 = n_obs + h;
  const int n = ctx.layout.total();
  require(static_cast<int>(obs.size()) == n_obs,
          "observation count does not match context");
  require(actions.rows() == h && actions.cols() == ctx.joints,
          "actions must be horizon x joints for this morphology");

  fc.n = n;
  fc.tau = tau;
  fc.obs = obs;
  fc.obs_h1.assign(n_obs, {});
  fc.obs_a1.assign(n_obs, {});
  fc.x0 = Matrix(n, d);

  // observation tokens (backbone encoder)
  for (int i = 0; i < n_obs; ++i) {
    require(static_cast<int>(obs[i].size()) == cfg.obs_dim,
            "observation vector has wrong width");
    auto& h1 = fc.obs_h1[i];
    auto& a1 = fc.obs_a1[i];
    h1.resize(d);
    a1.resize(d);
    for (int o = 0; o < d; ++o) {
      double acc = model.obs_b1.value(0, o);
      for (int k = 0; k < cfg.obs_dim; ++k) acc += model.obs_w1.value(o, k) * obs[i][k];
      h1[o] = acc;
      a1[o] = nn::gelu(acc);
    }
    for (int o = 0; o < d; ++o) {
      double acc = model.obs_b2.value(0, o);
      for (int k = 0; k < d; ++k) acc += model.obs_w2.value(o, k) * a1[k];
      fc.x0(i, o) = acc;
    }
  }

  // shared flow-time embedding
  detail::time_features(tau, d, fc.time_feat);
  fc.time_h1.resize(d);
  fc.time_a.resize(d);
  std::vector<double> temb(d);
  for (int o = 0; o < d; ++o) {
    double acc = model.time_b1.value(0, o);
    for (int k = 0; k < d; ++k) acc += model.time_w1.value(o, k) * fc.time_feat[k];
    fc.time_h1[o] = acc;
    fc.time_a[o] = nn::silu(acc);
  }
  for (int o = 0; o < d; ++o) {
    double acc = model.time_b2.value(0, o);
    for (int k = 0; k < d; ++k) acc += model.time_w2.value(o, k) * fc.time_a[k];
    temb[o] = acc;
  }

  // action tokens: per-timestep embeddings of the full (padded) joint vector
  fc.x_pad = Matrix(h, cfg.max_joints);
  for (int t = 0; t < h; ++t) {
    for (int j = 0; j < ctx.joints; ++j) fc.x_pad(t, j) = actions(t, j);
  }
  for (int t = 0; t < h; ++t) {
    for (int o = 0; o < d; ++o) {
      double acc = model.action_in_b.value(0, o);
      for (int j = 0; j < cfg.max_joints; ++j) {
        acc += model.action_in_w.value(o, j) * fc.x_pad(t, j);
      }
      fc.x0(n_obs + t, o) = acc + model.pos_action.value(t, o) + temb[o];
    }
  }

  // kinematic tokens built from the current interpolant
  if (cfg.kt_enabled) {
    const ChunkSpec spec = ChunkSpec::make(h, cfg.chunks);
    fc.kt = chunk_actions(ActionTrajectory{actions}, spec);
    const int group = ctx.joints * cfg.chunks;
    fc.enc_caches.assign(group * (1 + cfg.aux_tokens), {});
    fc.kt_pre_film = Matrix(group * (1 + cfg.aux_tokens), d);
    std::vector<double> z(d);
    for (int m = 0; m <= cfg.aux_tokens; ++m) {
      const TokenEncoder& enc = m == 0 ? model.enc0 : model.aux_enc[m - 1];
      for (int j = 0; j < ctx.joints; ++j) {
        for (int k = 0; k < cfg.chunks; ++k) {
          const int local = m * group + j * cfg.chunks + k;
          enc.apply(fc.kt.tokens.row(j * cfg.chunks + k), z,
                    &fc.enc_caches[local]);
          for (int o = 0; o < d; ++o) fc.kt_pre_film(local, o) = z[o];
          double* out = fc.x0.data() + static_cast<size_t>(kin0 + local) * d;
          if (cfg.film_enabled) {
            const FilmParams& fp = ctx.film[j];
            for (int o = 0; o < d; ++o) {
              out[o] = (1.0 + fp.gamma[o]) * z[o] + fp.beta[o];
            }
          } else {
            for (int o = 0; o < d; ++o) out[o] = z[o];
          }
          if (cfg.kt_positional) {
            const int prow = (m * cfg.max_joints + j) * cfg.chunks + k;
            for (int o = 0; o < d; ++o) out[o] += model.kt_pos.value(prow, o);
          }
        }
      }
    }
  }

  // transformer trunk
  fc.layers.assign(cfg.layers, {});
  Matrix x = fc.x0;
  for (int l = 0; l < cfg.layers; ++l) {
    auto& lc = fc.layers[l];
    const auto& blk = model.blocks[l];
    lc.x_in = x;
    lc.ln1_out = Matrix(n, d);
    nn::layernorm_forward(lc.x_in, blk.ln1_g.value, blk.ln1_b.value, lc.ln1_out,
                          lc.ln1);
    detail::attention_forward(model, blk, lc.ln1_out, ctx.masks[l], lc);
    Matrix att_out(n, d);
    nn::linear_forward(lc.att_concat, blk.wo.value, blk.bo.value, att_out);
    lc.x_mid = Matrix(n, d);
    for (int i = 0; i < n; ++i) {
      for (int o = 0; o < d; ++o) lc.x_mid(i, o) = lc.x_in(i, o) + att_out(i, o);
    }
    lc.ln2_out = Matrix(n, d);
    nn::layernorm_forward(lc.x_mid, blk.ln2_g.value, blk.ln2_b.value, lc.ln2_out,
                          lc.ln2);
    lc.mlp_h = Matrix(n, 4 * d);
    nn::linear_forward(lc.ln2_out, blk.mlp_w1.value, blk.mlp_b1.value, lc.mlp_h);
    lc.mlp_a = Matrix(n, 4 * d);
    for (size_t i = 0; i < lc.mlp_h.size(); ++i) {
      lc.mlp_a.data()[i] = nn::gelu(lc.mlp_h.data()[i]);
    }
    Matrix mlp_out(n, d);
    nn::linear_forward(lc.mlp_a, blk.mlp_w2.value, blk.mlp_b2.value, mlp_out);
    x = Matrix(n, d);
    for (int i = 0; i < n; ++i) {
      for (int o = 0; o < d; ++o) x(i, o) = lc.x_mid(i, o) + mlp_out(i, o);
    }
  }
  fc.x_final = std::move(x);
  fc.lnf_out = Matrix(n, d);
  nn::layernorm_forward(fc.x_final, model.ln_f_g.value, model.ln_f_b.value,
                        fc.lnf_out, fc.lnf);

  // velocity head reads the action-token positions
  fc.pred = Matrix(h, cfg.max_joints);
  for (int t = 0; t < h; ++t) {
    for (int j = 0; j < cfg.max_joints; ++j) {
      double acc = model.action_out_b.value(0, j);
      for (int k = 0; k < d; ++k) {
        acc += model.action_out_w.value(j, k) * fc.lnf_out(n_obs + t, k);
      }
      fc.pred(t, j) = acc;
    }
  }
}

// Cross-sample gradient accumulators that are routed into parameters once
// per batch (learnable mask tables and the FiLM generator).
struct BatchGrads {
  std::vector<Matrix> dmask;  // per layer, N x N
  Matrix dgamma, dbeta;       // joints x d

  void init(const PolicyModel& model, const PolicyContext& ctx) {
    dmask.assign(model.config.layers,
                 Matrix(ctx.layout.total(), ctx.layout.total()));
    if (model.config.film_enabled) {
      dgamma = Matrix(ctx.joints, model.config.model_dim);
      dbeta = Matrix(ctx.joints, model.config.model_dim);
    }
  }
};

inline void backward_cached(PolicyModel& model, const PolicyContext& ctx,
                            const detail::ForwardCache& fc, const Matrix& dpred,
                            BatchGrads& bg) {
  const PolicyConfig& cfg = model.config;
  const int d = cfg.model_dim;
  const int n_obs = ctx.layout.obs_tokens;
  const int h = cfg.horizon;
  const int kin0 = n_obs + h;
  const int n = fc.n;
  const bool learnable_mask = cfg.mask_mode == MaskMode::kSpdSoftmask ||
                              mask_mode_is_adj_soft(cfg.mask_mode);

  // velocity head
  Matrix dlnf(n, d);
  for (int t = 0; t < h; ++t) {
    for (int j = 0; j < cfg.max_joints; ++j) {
      const double g = dpred(t, j);
      if (g == 0.0) continue;
      model.action_out_b.grad(0, j) += g;
      for (int k = 0; k < d; ++k) {
        model.action_out_w.grad(j, k) += g * fc.lnf_out(n_obs + t, k);
        dlnf(n_obs + t, k) += g * model.action_out_w.value(j, k);
      }
    }
  }
  Matrix dx(n, d);
  nn::layernorm_backward(fc.x_final, model.ln_f_g.value, fc.lnf, dlnf,
                         model.ln_f_g.grad, model.ln_f_b.grad, dx);

  // trunk, reversed
  for (int l = cfg.layers - 1; l >= 0; --l) {
    auto& blk = model.blocks[l];
    const auto& lc = fc.layers[l];
    // MLP branch
    Matrix dmlp_a(n, 4 * d);
    nn::linear_backward(lc.mlp_a, blk.mlp_w2.value, dx, blk.mlp_w2.grad,
                        blk.mlp_b2.grad, &dmlp_a);
    Matrix dmlp_h(n, 4 * d);
    for (size_t i = 0; i < dmlp_h.size(); ++i) {
      dmlp_h.data()[i] = dmlp_a.data()[i] * nn::dgelu(lc.mlp_h.data()[i]);
    }
    Matrix dln2(n, d);
    nn::linear_backward(lc.ln2_out, blk.mlp_w1.value, dmlp_h, blk.mlp_w1.grad,
                        blk.mlp_b1.grad, &dln2);
    Matrix dx_mid = dx;  // residual path
    nn::layernorm_backward(lc.x_mid, blk.ln2_g.value, lc.ln2, dln2,
                           blk.ln2_g.grad, blk.ln2_b.grad, dx_mid);
    // attention branch
    Matrix datt_concat(n, d);
    nn::linear_backward(lc.att_concat, blk.wo.value, dx_mid, blk.wo.grad,
                        blk.bo.grad, &datt_concat);
    Matrix dln1(n, d);
    detail::attention_backward(model, blk, lc.ln1_out, lc, datt_concat, dln1,
                               learnable_mask ? &bg.dmask[l] : nullptr);
    dx = dx_mid;  // residual path
    nn::layernorm_backward(lc.x_in, blk.ln1_g.value, lc.ln1, dln1,
                           blk.ln1_g.grad, blk.ln1_b.grad, dx);
  }

  // observation tokens
  if (model.backbone_trainable) {
    for (int i = 0; i < n_obs; ++i) {
      std::vector<double> da1(d, 0.0);
      for (int o = 0; o < d; ++o) {
        const double g = dx(i, o);
        model.obs_b2.grad(0, o) += g;
        for (int k = 0; k < d; ++k) {
          model.obs_w2.grad(o, k) += g * fc.obs_a1[i][k];
          da1[k] += g * model.obs_w2.value(o, k);
        }
      }
      for (int o = 0; o < d; ++o) {
        const double dh = da1[o] * nn::dgelu(fc.obs_h1[i][o]);
        model.obs_b1.grad(0, o) += dh;
        for (int k = 0; k < cfg.obs_dim; ++k) {
          model.obs_w1.grad(o, k) += dh * fc.obs[i][k];
        }
      }
    }
  }

  // action tokens and the shared time embedding
  std::vector<double> dtemb(d, 0.0);
  for (int t = 0; t < h; ++t) {
    for (int o = 0; o < d; ++o) {
      const double g = dx(n_obs + t, o);
      model.action_in_b.grad(0, o) += g;
      model.pos_action.grad(t, o) += g;
      dtemb[o] += g;
      for (int j = 0; j < cfg.max_joints; ++j) {
        model.action_in_w.grad(o, j) += g * fc.x_pad(t, j);
      }
    }
  }
  {
    std::vector<double> dta(d, 0.0);
    for (int o = 0; o < d; ++o) {
      model.time_b2.grad(0, o) += dtemb[o];
      for (int k = 0; k < d; ++k) {
        model.time_w2.grad(o, k) += dtemb[o] * fc.time_a[k];
        dta[k] += dtemb[o] * model.time_w2.value(o, k);
      }
    }
    for (int o = 0; o < d; ++o) {
      const double dh = dta[o] * nn::dsilu(fc.time_h1[o]);
      model.time_b1.grad(0, o) += dh;
      for (int k = 0; k < d; ++k) {
        model.time_w1.grad(o, k) += dh * fc.time_feat[k];
      }
    }
  }

  // kinematic tokens
  if (cfg.kt_enabled) {
    const int group = ctx.joints * cfg.chunks;
    std::vector<double> dz(d);
    for (int m = 0; m <= cfg.aux_tokens; ++m) {
      TokenEncoder& enc = m == 0 ? model.enc0 : model.aux_enc[m - 1];
      for (int j = 0; j < ctx.joints; ++j) {
        for (int k = 0; k < cfg.chunks; ++k) {
          const int local = m * group + j * cfg.chunks + k;
          const double* g = dx.data() + static_cast<size_t>(kin0 + local) * d;
          if (cfg.kt_positional) {
            const int prow = (m * cfg.max_joints + j) * cfg.chunks + k;
            for (int o = 0; o < d; ++o) model.kt_pos.grad(prow, o) += g[o];
          }
          if (cfg.film_enabled) {
            const FilmParams& fp = ctx.film[j];
            for (int o = 0; o < d; ++o) {
              dz[o] = (1.0 + fp.gamma[o]) * g[o];
              bg.dgamma(j, o) += g[o] * fc.kt_pre_film(local, o);
              bg.dbeta(j, o) += g[o];
            }
          } else {
            for (int o = 0; o < d; ++o) dz[o] = g[o];
          }
          enc.backward(fc.enc_caches[local], dz);
        }
      }
    }
  }
}

// Routes cross-sample accumulators into parameter gradients: FiLM generator
// and learnable topology bias tables.
inline void finish_batch_grads(PolicyModel& model, const PolicyContext& ctx,
                               BatchGrads& bg) {
  const PolicyConfig& cfg = model.config;
  if (cfg.film_enabled) {
    for (int j = 0; j < ctx.joints; ++j) {
      model.film.backward(ctx.descriptors[j], bg.dgamma.row(j), bg.dbeta.row(j));
    }
  }
  if (!cfg.kt_enabled) return;
  const int kin0 = ctx.layout.obs_tokens + ctx.layout.action_tokens;
  const int k_tokens = ctx.layout.kinematic_tokens;
  const int group = ctx.joints * cfg.chunks;
  if (cfg.mask_mode == MaskMode::kSpdSoftmask) {
    for (int l = 0; l < cfg.layers; ++l) {
      const Matrix& dm = bg.dmask[l];
      for (int a = 0; a < k_tokens; ++a) {
        const int ja = (a % group) / cfg.chunks;
        for (int b = 0; b < k_tokens; ++b) {
          const int jb = (b % group) / cfg.chunks;
          model.spd_table.theta.grad(l, ctx.spd.at(ja, jb)) +=
              dm(kin0 + a, kin0 + b);
        }
      }
    }
  } else if (mask_mode_is_adj_soft(cfg.mask_mode)) {
    AdjSoftParams& p = model.adj_params;
    for (int l = 0; l < cfg.layers; ++l) {
      const Matrix& dm = bg.dmask[l];
      for (int a = 0; a < k_tokens; ++a) {
        const int ja = (a % group) / cfg.chunks;
        for (int b = 0; b < k_tokens; ++b) {
          const int jb = (b % group) / cfg.chunks;
          const double m_ab = ctx.adj.values(ja, jb);
          if (m_ab == 1.0) continue;  // bias pinned to zero on neighbors
          const double g = dm(kin0 + a, kin0 + b);
          if (p.variant == AdjVariant::kV20) {
            p.theta.grad(l, 0) += (m_ab - 1.0) * g;
          } else {
            const int col = p.variant == AdjVariant::kV10
                                ? ja * p.joints + jb : 0;
            const double th = p.theta.value(l, col);
            if (th < p.theta_max) {
              p.theta.grad(l, col) += (m_ab - 1.0) * std::exp(th) * g;
            }
          }
        }
      }
    }
  }
}

struct ForwardResult {
  Matrix velocity;                              // H x J
  std::vector<std::vector<Matrix>> attention;   // [layer][head] N x N
};

// Single-sample forward pass: builds kinematic tokens from the interpolant
// X_tau, applies FiLM and the per-layer topology masks, and returns the
// predicted velocity field.
inline ForwardResult forward(const PolicyModel& model,
                             const std::vector<std::vector<double>>& obs,
                             const Matrix& x_tau, double tau,
                             const RobotMorphology& morph,
                             bool want_attention = false) {
  const PolicyContext ctx = build_context(model, morph,
                                          static_cast<int>(obs.size()));
  detail::ForwardCache fc;
  forward_cached(model, ctx, obs, x_tau, tau, fc);
  ForwardResult res;
  res.velocity = Matrix(model.config.horizon, morph.num_joints);
  for (int t = 0; t < model.config.horizon; ++t) {
    for (int j = 0; j < morph.num_joints; ++j) {
      res.velocity(t, j) = fc.pred(t, j);
    }
  }
  if (want_attention) {
    res.attention.resize(model.config.layers);
    for (int l = 0; l < model.config.layers; ++l) {
      res.attention[l] = fc.layers[l].probs;
    }
  }
  return res;
}

// Flow-matching loss over a single-embodiment batch. Draws tau ~ U(0, 1) and
// noise E ~ N(0, 1) per item, forms X_tau = tau A + (1 - tau) E, and
// regresses the predicted velocity onto V = A - E. Gradients are populated
// for the trainable partition (the backbone is skipped under AP-FT).
inline double flow_loss(PolicyModel& model, const RobotMorphology& morph,
                        std::span<const Sample> batch, Rng& rng) {
  require(!batch.empty(), "flow_loss: empty batch");
  const PolicyConfig& cfg = model.config;
  const int h = cfg.horizon;
  const int joints = morph.num_joints;
  const PolicyContext ctx = build_context(model, morph, 1);
  model.zero_grads();
  BatchGrads bg;
  bg.init(model, ctx);

  const double denom = static_cast<double>(batch.size()) * h * joints;
  double total = 0.0;
  detail::ForwardCache fc;
  for (const Sample& s : batch) {
    require(s.actions.rows() == h && s.actions.cols() == joints,
            "flow_loss: sample trajectory shape mismatch");
    const double tau = rng.uniform();
    Matrix noise(h, joints);
    for (int t = 0; t < h; ++t) {
      for (int j = 0; j < joints; ++j) noise(t, j) = rng.normal();
    }
    Matrix x_tau(h, joints);
    for (int t = 0; t < h; ++t) {
      for (int j = 0; j < joints; ++j) {
        x_tau(t, j) = tau * s.actions(t, j) + (1.0 - tau) * noise(t, j);
      }
    }
    forward_cached(model, ctx, {s.obs}, x_tau, tau, fc);
    Matrix dpred(h, cfg.max_joints);
    for (int t = 0; t < h; ++t) {
      for (int j = 0; j < joints; ++j) {
        const double target = s.actions(t, j) - noise(t, j);
        const double diff = fc.pred(t, j) - target;
        total += diff * diff;
        dpred(t, j) = 2.0 * diff / denom;
      }
    }
    backward_cached(model, ctx, fc, dpred, bg);
  }
  finish_batch_grads(model, ctx, bg);
  return total / denom;
}

// Flow-matching MSE without gradients (validation path). Noise and tau come
// from `rng`, so a fixed seed gives a fixed evaluation set.
inline double flow_validation_loss(const PolicyModel& model,
                                   const RobotMorphology& morph,
                                   std::span<const Sample> samples, Rng& rng) {
  require(!samples.empty(), "flow_validation_loss: empty sample set");
  const PolicyConfig& cfg = model.config;
  const int h = cfg.horizon;
  const int joints = morph.num_joints;
  const PolicyContext ctx = build_context(model, morph, 1);
  const double denom = static_cast<double>(samples.size()) * h * joints;
  double total = 0.0;
  detail::ForwardCache fc;
  for (const Sample& s : samples) {
    const double tau = rng.uniform();
    Matrix noise(h, joints);
    for (int t = 0; t < h; ++t) {
      for (int j = 0; j < joints; ++j) noise(t, j) = rng.normal();
    }
    Matrix x_tau(h, joints);
    for (int t = 0; t < h; ++t) {
      for (int j = 0; j < joints; ++j) {
        x_tau(t, j) = tau * s.actions(t, j) + (1.0 - tau) * noise(t, j);
      }
    }
    forward_cached(model, ctx, {s.obs}, x_tau, tau, fc);
    for (int t = 0; t < h; ++t) {
      for (int j = 0; j < joints; ++j) {
        const double diff = fc.pred(t, j) - (s.actions(t, j) - noise(t, j));
        total += diff * diff;
      }
    }
  }
  return total / denom;
}

// Euler integration of the learned velocity field from noise at tau = 0 to
// the action estimate at tau = 1.
inline Matrix sample_actions(const PolicyModel& model,
                             const std::vector<std::vector<double>>& obs,
                             const RobotMorphology& morph, int steps,
                             Rng& rng) {
  require(steps >= 1, "sample_actions: steps must be >= 1");
  const int h = model.config.horizon;
  const int joints = morph.num_joints;
  Matrix x(h, joints);
  for (int t = 0; t < h; ++t) {
    for (int j = 0; j < joints; ++j) x(t, j) = rng.normal();
  }
  const PolicyContext ctx = build_context(model, morph,
                                          static_cast<int>(obs.size()));
  detail::ForwardCache fc;
  const double dt = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    const double tau = static_cast<double>(k) / steps;
    forward_cached(model, ctx, obs, x, tau, fc);
    for (int t = 0; t < h; ++t) {
      for (int j = 0; j < joints; ++j) x(t, j) += dt * fc.pred(t, j);
    }
  }
  return x;
}

// ---- checkpoints ----

inline constexpr int kCheckpointSchemaVersion = 1;

inline nlohmann::json descriptor_stats_to_json(const DescriptorStats& s) {
  return {{"mean", s.mean}, {"scale", s.scale}, {"clamped", s.clamped}};
}

inline DescriptorStats descriptor_stats_from_json(const nlohmann::json& j) {
  DescriptorStats s;
  for (int f = 0; f < kDescriptorDim; ++f) {
    s.mean[f] = j["mean"][f].get<double>();
    s.scale[f] = j["scale"][f].get<double>();
    s.clamped[f] = j["clamped"][f].get<bool>();
  }
  return s;
}

inline nlohmann::json checkpoint_to_json(const PolicyModel& model) {
  nlohmann::json params = nlohmann::json::object();
  model.for_each_param([&](const std::string& name, const nn::Tensor& t,
                           Partition) {
    nlohmann::json data = nlohmann::json::array();
    for (size_t i = 0; i < t.value.size(); ++i) data.push_back(t.value.data()[i]);
    params[name] = {{"rows", t.value.rows()},
                    {"cols", t.value.cols()},
                    {"data", std::move(data)}};
  });
  nlohmann::json j = {{"schema_version", kCheckpointSchemaVersion},
                      {"config", model.config.to_json()},
                      {"params", std::move(params)}};
  if (model.has_norm_stats) {
    j["norm_stats"] = descriptor_stats_to_json(model.norm_stats);
  } else {
    j["norm_stats"] = nullptr;
  }
  return j;
}

inline void save_checkpoint(const PolicyModel& model, const std::string& path) {
  write_text_file_atomic(path, checkpoint_to_json(model).dump() + "\n");
}

namespace detail {

inline void copy_params_from_json(PolicyModel& model, const nlohmann::json& params,
                                  std::vector<std::string>* missing) {
  model.for_each_param([&](const std::string& name, nn::Tensor& t, Partition) {
    auto it = params.find(name);
    if (it == params.end()) {
      if (missing != nullptr) {
        missing->push_back(name);
        return;
      }
      throw std::invalid_argument("checkpoint is missing parameter: " + name);
    }
    const int rows = (*it)["rows"].get<int>();
    const int cols = (*it)["cols"].get<int>();
    require(rows == t.value.rows() && cols == t.value.cols(),
            "checkpoint parameter '" + name + "' has shape " +
                std::to_string(rows) + "x" + std::to_string(cols) +
                ", expected " + std::to_string(t.value.rows()) + "x" +
                std::to_string(t.value.cols()));
    const auto& data = (*it)["data"];
    require(data.size() == t.value.size(),
            "checkpoint parameter '" + name + "' has wrong element count");
    for (size_t i = 0; i < t.value.size(); ++i) {
      t.value.data()[i] = data[i].get<double>();
    }
  });
}

}  // namespace detail

inline PolicyModel checkpoint_from_json(const nlohmann::json& j) {
  require(j.contains("schema_version") &&
              j["schema_version"].get<int>() == kCheckpointSchemaVersion,
          "unsupported checkpoint schema version");
  PolicyModel model(PolicyConfig::from_json(j["config"]));
  detail::copy_params_from_json(model, j["params"], nullptr);
  if (!j["norm_stats"].is_null()) {
    model.set_descriptor_stats(descriptor_stats_from_json(j["norm_stats"]));
  }
  return model;
}

inline PolicyModel load_checkpoint(const std::string& path) {
  return checkpoint_from_json(nlohmann::json::parse(read_text_file(path)));
}

// Loading against a target config. Configs must match exactly, with one
// documented exception (warm-start transfer): a checkpoint trained under
// no/full/mix mask may be loaded into spd_softmask mode; shared tensors are
// preserved bitwise and the new bias table keeps the target's init.
inline PolicyModel load_checkpoint_as(const std::string& path,
                                      const PolicyConfig& target) {
  const nlohmann::json j = nlohmann::json::parse(read_text_file(path));
  require(j.contains("schema_version") &&
              j["schema_version"].get<int>() == kCheckpointSchemaVersion,
          "unsupported checkpoint schema version");
  const PolicyConfig stored = PolicyConfig::from_json(j["config"]);

  const bool warm_start =
      stored.mask_mode != target.mask_mode &&
      mask_mode_is_hard_family(stored.mask_mode) &&
      target.mask_mode == MaskMode::kSpdSoftmask;
  nlohmann::json a = stored.to_json();
  nlohmann::json b = target.to_json();
  // The init seed is not structural; it never affects shapes.
  a.erase("seed");
  b.erase("seed");
  if (warm_start) {
    for (auto* c : {&a, &b}) {
      c->erase("mask_mode");
      c->erase("bias_init");
    }
  }
  require(a == b, warm_start
                      ? "checkpoint config incompatible with warm-start target"
                      : "checkpoint config does not match requested config "
                        "(only warm-start into spd_softmask may differ)");

  PolicyModel model(target);
  std::vector<std::string> missing;
  detail::copy_params_from_json(model, j["params"], &missing);
  for (const std::string& name : missing) {
    require(warm_start && name == "bias.spd_theta",
            "checkpoint is missing parameter: " + name);
  }
  if (!j["norm_stats"].is_null()) {
    model.set_descriptor_stats(descriptor_stats_from_json(j["norm_stats"]));
  }
  return model;
}

}  // namespace morphkit
