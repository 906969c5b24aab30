// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphkit/core.hpp"
#include "morphkit/morphology.hpp"
#include "morphkit/nn.hpp"
#include "morphkit/policy.hpp"

namespace morphkit {

// Synthetic imitation task over one embodiment. The root joint follows a
// smooth signal determined by the observation vector; every other joint
// tracks its BFS parent with gain alpha and lag delta, plus a
// descriptor-dependent drive and Gaussian noise. Both the topology and the
// descriptors are therefore informative about the trajectory.
struct SyntheticTask {
  RobotMorphology morphology;
  double alpha = 0.8;   // parent propagation gain
  int lag = 1;          // delta, in timesteps
  double noise = 0.1;   // sigma
  int obs_dim = 8;
  int horizon = 16;
  uint64_t seed = 0;

  void validate() const {
    validate_morphology(morphology);
    require(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
    require(lag >= 1, "lag must be >= 1");
    require(noise >= 0.0, "noise must be >= 0");
    require(obs_dim >= 1, "obs_dim must be >= 1");
    require(horizon >= 1, "horizon must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"morphology", morphology_to_json(morphology)},
            {"alpha", alpha},
            {"lag", lag},
            {"noise", noise},
            {"obs_dim", obs_dim},
            {"horizon", horizon},
            {"seed", seed}};
  }

  static SyntheticTask from_json(const nlohmann::json& j) {
    SyntheticTask t;
    if (j.contains("morphology_path")) {
      t.morphology = parse_robot_spec(
          read_text_file(j["morphology_path"].get<std::string>()));
    } else {
      require(j.contains("morphology"),
              "task needs 'morphology' or 'morphology_path'");
      t.morphology = parse_robot_spec(j["morphology"].dump());
    }
    t.alpha = j.value("alpha", t.alpha);
    t.lag = j.value("lag", t.lag);
    t.noise = j.value("noise", t.noise);
    t.obs_dim = j.value("obs_dim", t.obs_dim);
    t.horizon = j.value("horizon", t.horizon);
    t.seed = j.value("seed", t.seed);
    t.validate();
    return t;
  }
};

// BFS parent of every joint, rooted at joint 0 (parent[0] == -1). Neighbors
// are visited in ascending index order, so the assignment is deterministic.
inline std::vector<int> bfs_parents(const RobotMorphology& m) {
  const auto nbr = detail::neighbor_lists(m);
  std::vector<int> parent(m.num_joints, -2);
  std::vector<int> queue{0};
  parent[0] = -1;
  for (size_t head = 0; head < queue.size(); ++head) {
    const int u = queue[head];
    for (int v : nbr[u]) {
      if (parent[v] == -2) {
        parent[v] = u;
        queue.push_back(v);
      }
    }
  }
  for (int j = 0; j < m.num_joints; ++j) {
    require(parent[j] != -2, "bfs_parents: disconnected graph");
  }
  return parent;
}

namespace detail {

struct TaskBasis {
  std::vector<double> root_freq, root_phase;
  std::vector<double> drive_freq, drive_phase;
  std::array<double, kDescriptorDim> gain_w;
};

inline TaskBasis task_basis(const SyntheticTask& task) {
  Rng rng(mix_seed(task.seed, 0xBA5E));
  TaskBasis b;
  b.root_freq.resize(task.obs_dim);
  b.root_phase.resize(task.obs_dim);
  b.drive_freq.resize(task.obs_dim);
  b.drive_phase.resize(task.obs_dim);
  for (int i = 0; i < task.obs_dim; ++i) {
    b.root_freq[i] = rng.uniform(0.5, 2.5);
    b.root_phase[i] = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    b.drive_freq[i] = rng.uniform(0.5, 2.5);
    b.drive_phase[i] = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  }
  for (int k = 0; k < kDescriptorDim; ++k) {
    b.gain_w[k] = rng.normal() / std::sqrt(static_cast<double>(kDescriptorDim));
  }
  return b;
}

}  // namespace detail

inline std::vector<Sample> generate_trajectories(const SyntheticTask& task,
                                                 int count) {
  task.validate();
  require(count >= 0, "generate_trajectories: negative count");
  const auto basis = detail::task_basis(task);
  const auto parent = bfs_parents(task.morphology);
  // Joints in BFS order so each parent row is filled before its children.
  std::vector<int> order;
  order.reserve(task.morphology.num_joints);
  {
    const auto nbr = detail::neighbor_lists(task.morphology);
    std::vector<bool> seen(task.morphology.num_joints, false);
    std::vector<int> queue{0};
    seen[0] = true;
    for (size_t head = 0; head < queue.size(); ++head) {
      const int u = queue[head];
      order.push_back(u);
      for (int v : nbr[u]) {
        if (!seen[v]) {
          seen[v] = true;
          queue.push_back(v);
        }
      }
    }
  }
  std::vector<double> gain(task.morphology.num_joints, 0.0);
  for (int j = 0; j < task.morphology.num_joints; ++j) {
    const auto s = descriptor_vector(task.morphology.descriptors[j]);
    for (int k = 0; k < kDescriptorDim; ++k) gain[j] += basis.gain_w[k] * s[k];
  }

  const int h = task.horizon;
  const double inv_sqrt_obs = 1.0 / std::sqrt(static_cast<double>(task.obs_dim));
  const double two_pi = 2.0 * 3.14159265358979323846;
  std::vector<Sample> out;
  out.reserve(count);
  for (int idx = 0; idx < count; ++idx) {
    Rng rng(mix_seed(task.seed, 1000 + static_cast<uint64_t>(idx)));
    Sample s;
    s.obs.resize(task.obs_dim);
    for (int i = 0; i < task.obs_dim; ++i) s.obs[i] = rng.normal();
    s.actions = Matrix(h, task.morphology.num_joints);
    std::vector<double> drive(h, 0.0);
    for (int t = 0; t < h; ++t) {
      double root = 0.0, u = 0.0;
      const double phase_t = static_cast<double>(t + 1) / h;
      for (int i = 0; i < task.obs_dim; ++i) {
        root += s.obs[i] * std::sin(two_pi * basis.root_freq[i] * phase_t +
                                    basis.root_phase[i]);
        u += s.obs[i] * std::sin(two_pi * basis.drive_freq[i] * phase_t +
                                 basis.drive_phase[i]);
      }
      s.actions(t, 0) = root * inv_sqrt_obs;
      drive[t] = u * inv_sqrt_obs;
    }
    for (int oi = 1; oi < static_cast<int>(order.size()); ++oi) {
      const int j = order[oi];
      for (int t = 0; t < h; ++t) {
        const double from_parent =
            t - task.lag >= 0 ? task.alpha * s.actions(t - task.lag, parent[j])
                              : 0.0;
        s.actions(t, j) =
            from_parent + gain[j] * drive[t] + task.noise * rng.normal();
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Weighted list of synthetic tasks; every mini-batch is drawn from exactly
// one embodiment.
struct MixtureSpec {
  struct Entry {
    SyntheticTask task;
    double weight = 1.0;
  };
  std::vector<Entry> embodiments;
  int batch_size = 16;
  static constexpr bool kSingleEmbodimentBatches = true;

  void validate() const {
    require(!embodiments.empty(), "mixture needs at least one embodiment");
    require(batch_size >= 1, "batch_size must be >= 1");
    double sum = 0.0;
    for (const auto& e : embodiments) {
      e.task.validate();
      require(e.weight > 0.0, "mixture weights must be positive");
      sum += e.weight;
    }
    require(std::abs(sum - 1.0) < 1e-9, "mixture weights must sum to 1");
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : embodiments) {
      arr.push_back({{"task", e.task.to_json()}, {"weight", e.weight}});
    }
    return {{"embodiments", arr}, {"batch_size", batch_size}};
  }

  static MixtureSpec from_json(const nlohmann::json& j) {
    MixtureSpec m;
    require(j.contains("embodiments") && j["embodiments"].is_array(),
            "mixture needs an 'embodiments' array");
    for (const auto& e : j["embodiments"]) {
      m.embodiments.push_back(
          {SyntheticTask::from_json(e["task"]), e.value("weight", 1.0)});
    }
    m.batch_size = j.value("batch_size", m.batch_size);
    m.validate();
    return m;
  }
};

inline int sample_embodiment(const MixtureSpec& mix, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  for (size_t e = 0; e < mix.embodiments.size(); ++e) {
    cum += mix.embodiments[e].weight;
    if (u < cum) return static_cast<int>(e);
  }
  return static_cast<int>(mix.embodiments.size()) - 1;
}

struct EmbodimentDataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

inline std::vector<EmbodimentDataset> build_datasets(const MixtureSpec& mix,
                                                     int train_count,
                                                     int val_count) {
  std::vector<EmbodimentDataset> out;
  out.reserve(mix.embodiments.size());
  for (const auto& e : mix.embodiments) {
    auto all = generate_trajectories(e.task, train_count + val_count);
    EmbodimentDataset d;
    d.train.assign(all.begin(), all.begin() + train_count);
    d.val.assign(all.begin() + train_count, all.end());
    out.push_back(std::move(d));
  }
  return out;
}

struct TrainBatch {
  int embodiment = 0;
  std::vector<Sample> items;
};

// Draws the embodiment categorically by weight, then batch_size trajectories
// (with replacement) from that embodiment's training set only.
inline TrainBatch sample_batch(const MixtureSpec& mix,
                               const std::vector<EmbodimentDataset>& data,
                               Rng& rng) {
  mix.validate();
  require(data.size() == mix.embodiments.size(),
          "sample_batch: dataset count mismatch");
  TrainBatch batch;
  batch.embodiment = sample_embodiment(mix, rng);
  const auto& pool = data[batch.embodiment].train;
  require(!pool.empty(), "sample_batch: empty training pool");
  batch.items.reserve(mix.batch_size);
  for (int i = 0; i < mix.batch_size; ++i) {
    batch.items.push_back(pool[rng.uniform_int(static_cast<int>(pool.size()))]);
  }
  return batch;
}

struct TrainConfig {
  int steps = 2000;
  double lr_max = 3e-3;
  double lr_min = 3e-5;
  FinetuneMode finetune_mode = FinetuneMode::kApFt;
  uint64_t seed = 0;
  int val_interval = 500;
  int train_count = 256;
  int val_count = 64;
  nn::AdamW::Hyper optimizer;

  void validate() const {
    require(steps >= 0, "steps must be >= 0");
    require(lr_min > 0.0 && lr_max >= lr_min, "need lr_max >= lr_min > 0");
    require(val_interval >= 1, "val_interval must be >= 1");
    require(train_count >= 1 && val_count >= 1, "dataset sizes must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"steps", steps},
            {"lr_max", lr_max},
            {"lr_min", lr_min},
            {"schedule", "cosine"},
            {"finetune_mode", to_string(finetune_mode)},
            {"seed", seed},
            {"val_interval", val_interval},
            {"train_count", train_count},
            {"val_count", val_count},
            {"optimizer",
             {{"kind", "adamw"},
              {"beta1", optimizer.beta1},
              {"beta2", optimizer.beta2},
              {"eps", optimizer.eps},
              {"weight_decay", optimizer.weight_decay}}}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.lr_max = j.value("lr_max", c.lr_max);
    c.lr_min = j.value("lr_min", c.lr_min);
    if (j.contains("schedule")) {
      require(j["schedule"].get<std::string>() == "cosine",
              "only the cosine schedule is supported");
    }
    if (j.contains("finetune_mode")) {
      c.finetune_mode = finetune_mode_from_string(j["finetune_mode"]);
    }
    c.seed = j.value("seed", c.seed);
    c.val_interval = j.value("val_interval", c.val_interval);
    c.train_count = j.value("train_count", c.train_count);
    c.val_count = j.value("val_count", c.val_count);
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.eps = o.value("eps", c.optimizer.eps);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    }
    c.validate();
    return c;
  }
};

inline double cosine_lr(int step, const TrainConfig& cfg) {
  require(step >= 0 && step <= cfg.steps, "cosine_lr: step out of range");
  if (cfg.steps == 0) return cfg.lr_max;
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.steps);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) *
                          (1.0 + std::cos(3.14159265358979323846 * frac));
}

struct MetricsRow {
  int step;
  double lr;
  double loss;
  int embodiment;
};

struct ValPoint {
  int step;
  double loss;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::vector<std::vector<ValPoint>> val;  // per embodiment
  double final_train_loss = 0.0;
  double final_val_mean = 0.0;
};

inline std::string metrics_to_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "step,lr,loss,embodiment_id\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%d\n", r.step, r.lr, r.loss,
                  r.embodiment);
    out += buf;
  }
  return out;
}

// Runs the loop sample_batch -> flow_loss -> AdamW step under the cosine
// schedule. Deterministic given the config seed. Aborts on a non-finite
// loss, reporting the offending step.
inline TrainResult train(PolicyModel& model, const MixtureSpec& mix,
                         const TrainConfig& cfg) {
  cfg.validate();
  mix.validate();
  for (const auto& e : mix.embodiments) {
    require(e.task.horizon == model.config.horizon,
            "task horizon does not match policy horizon");
    require(e.task.obs_dim == model.config.obs_dim,
            "task obs_dim does not match policy obs_dim");
    require(e.task.morphology.num_joints <= model.config.max_joints,
            "embodiment exceeds the policy joint bound");
  }
  model.backbone_trainable = cfg.finetune_mode == FinetuneMode::kFullFt;
  if (model.config.kt_enabled && model.config.film_normalize) {
    std::vector<std::array<double, kDescriptorDim>> population;
    for (const auto& e : mix.embodiments) {
      for (const auto& d : e.task.morphology.descriptors) {
        population.push_back(descriptor_vector(d));
      }
    }
    model.set_descriptor_stats(compute_descriptor_stats(population));
  }

  const auto data = build_datasets(mix, cfg.train_count, cfg.val_count);
  nn::AdamW adam(cfg.optimizer);
  auto params = model.trainable_params();
  Rng sampler_rng(mix_seed(cfg.seed, 101));
  Rng flow_rng(mix_seed(cfg.seed, 202));

  TrainResult result;
  result.val.resize(mix.embodiments.size());
  auto run_validation = [&](int step) {
    for (size_t e = 0; e < mix.embodiments.size(); ++e) {
      Rng val_rng(mix_seed(cfg.seed, 0x5A11D0 + e));
      const double vl = flow_validation_loss(
          model, mix.embodiments[e].task.morphology, data[e].val, val_rng);
      result.val[e].push_back({step, vl});
    }
  };

  for (int step = 0; step < cfg.steps; ++step) {
    TrainBatch batch = sample_batch(mix, data, sampler_rng);
    double loss;
    try {
      loss = flow_loss(model, mix.embodiments[batch.embodiment].task.morphology,
                       batch.items, flow_rng);
    } catch (const std::exception& e) {
      throw std::runtime_error("training aborted at step " +
                               std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss)) {
      throw std::runtime_error("non-finite training loss at step " +
                               std::to_string(step));
    }
    const double lr = cosine_lr(step, cfg);
    adam.step(params, lr);
    result.metrics.push_back({step, lr, loss, batch.embodiment});
    if ((step + 1) % cfg.val_interval == 0 || step + 1 == cfg.steps) {
      run_validation(step + 1);
    }
  }
  if (cfg.steps == 0) run_validation(0);

  result.final_train_loss =
      result.metrics.empty() ? 0.0 : result.metrics.back().loss;
  double vsum = 0.0;
  for (const auto& v : result.val) vsum += v.back().loss;
  result.final_val_mean = vsum / static_cast<double>(result.val.size());
  return result;
}

inline constexpr int kReportSchemaVersion = 1;

struct RunReport {
  std::string name;
  nlohmann::json config;  // full resolved echo
  uint64_t seed = 0;
  double final_train_loss = 0.0;
  double final_val_mean = 0.0;
  std::vector<std::string> embodiment_names;
  std::vector<std::vector<ValPoint>> val;

  nlohmann::json to_json() const {
    nlohmann::json vals = nlohmann::json::array();
    for (size_t e = 0; e < val.size(); ++e) {
      nlohmann::json points = nlohmann::json::array();
      for (const auto& p : val[e]) {
        points.push_back({{"step", p.step}, {"loss", p.loss}});
      }
      vals.push_back({{"embodiment", embodiment_names[e]},
                      {"points", std::move(points)}});
    }
    return {{"schema_version", kReportSchemaVersion},
            {"name", name},
            {"config", config},
            {"seed", seed},
            {"metrics",
             {{"final_train_loss", final_train_loss},
              {"final_val_loss_mean", final_val_mean},
              {"val", std::move(vals)}}}};
  }
};

// Declarative run description: policy + train + mixture.
struct ExperimentConfig {
  std::string name = "run";
  PolicyConfig policy;
  TrainConfig train;
  MixtureSpec mixture;

  nlohmann::json to_json() const {
    return {{"name", name},
            {"policy", policy.to_json()},
            {"train", train.to_json()},
            {"mixture", mixture.to_json()}};
  }

  // Parses and validates; failures from every section are reported together.
  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    std::vector<std::string> errors;
    c.name = j.value("name", c.name);
    bool have_parts = true;
    for (const char* key : {"policy", "train", "mixture"}) {
      if (!j.contains(key)) {
        errors.push_back(std::string("missing section '") + key + "'");
        have_parts = false;
      }
    }
    if (have_parts) {
      auto attempt = [&](const char* what, auto&& fn) {
        try {
          fn();
        } catch (const std::exception& e) {
          errors.push_back(std::string(what) + ": " + e.what());
        }
      };
      attempt("policy", [&] { c.policy = PolicyConfig::from_json(j["policy"]); });
      attempt("train", [&] { c.train = TrainConfig::from_json(j["train"]); });
      attempt("mixture", [&] { c.mixture = MixtureSpec::from_json(j["mixture"]); });
      if (errors.empty()) {
        for (const auto& e : c.mixture.embodiments) {
          if (e.task.horizon != c.policy.horizon) {
            errors.push_back("task horizon " + std::to_string(e.task.horizon) +
                             " does not match policy horizon " +
                             std::to_string(c.policy.horizon));
          }
          if (e.task.obs_dim != c.policy.obs_dim) {
            errors.push_back("task obs_dim does not match policy obs_dim");
          }
          if (e.task.morphology.num_joints > c.policy.max_joints) {
            errors.push_back("embodiment '" + e.task.morphology.name +
                             "' exceeds policy max_joints");
          }
        }
      }
    }
    if (!errors.empty()) {
      std::string msg = "invalid experiment config:";
      for (const auto& e : errors) msg += " [" + e + "]";
      throw std::invalid_argument(msg);
    }
    return c;
  }
};

struct RunOutput {
  PolicyModel model;
  TrainResult result;
  RunReport report;
};

inline RunOutput run_experiment(const ExperimentConfig& cfg,
                                std::optional<PolicyModel> warm_start = {}) {
  PolicyModel model = warm_start.has_value() ? std::move(*warm_start)
                                             : PolicyModel(cfg.policy);
  TrainResult result = train(model, cfg.mixture, cfg.train);
  RunReport report;
  report.name = cfg.name;
  report.config = cfg.to_json();
  report.seed = cfg.train.seed;
  report.final_train_loss = result.final_train_loss;
  report.final_val_mean = result.final_val_mean;
  for (const auto& e : cfg.mixture.embodiments) {
    report.embodiment_names.push_back(e.task.morphology.name);
  }
  report.val = result.val;
  return {std::move(model), std::move(result), std::move(report)};
}

// Trains and evaluates every config cell. Cells run independently under
// their own (identical, unless overridden) seeds.
inline std::vector<RunReport> run_ablation(
    const std::vector<ExperimentConfig>& grid) {
  std::vector<RunReport> reports;
  reports.reserve(grid.size());
  for (const auto& cfg : grid) {
    reports.push_back(run_experiment(cfg).report);
  }
  return reports;
}

// Grid expansion for ablations: {"base": <experiment>, "sweep":
// {"policy.chunks": [1, 2, 4]}} produces one cell per point of the cartesian
// product, in deterministic (key-sorted, value-listed) order.
inline std::vector<ExperimentConfig> expand_grid(const nlohmann::json& grid) {
  if (grid.contains("runs")) {
    require(grid["runs"].is_array(), "'runs' must be an array");
    std::vector<ExperimentConfig> out;
    for (const auto& r : grid["runs"]) out.push_back(ExperimentConfig::from_json(r));
    return out;
  }
  require(grid.contains("base"), "grid needs a 'base' experiment config");
  std::vector<nlohmann::json> cells{grid["base"]};
  std::vector<std::string> names{grid["base"].value("name", std::string("run"))};
  if (grid.contains("sweep")) {
    for (const auto& [path, values] : grid["sweep"].items()) {
      require(values.is_array() && !values.empty(),
              "sweep axis '" + path + "' must be a nonempty array");
      std::vector<nlohmann::json> next_cells;
      std::vector<std::string> next_names;
      for (size_t c = 0; c < cells.size(); ++c) {
        for (const auto& v : values) {
          nlohmann::json cell = cells[c];
          nlohmann::json* node = &cell;
          std::string rest = path;
          size_t dot;
          while ((dot = rest.find('.')) != std::string::npos) {
            node = &(*node)[rest.substr(0, dot)];
            rest = rest.substr(dot + 1);
          }
          (*node)[rest] = v;
          std::string label = v.is_string() ? v.get<std::string>() : v.dump();
          next_cells.push_back(std::move(cell));
          next_names.push_back(names[c] + "_" + rest + "-" + label);
        }
      }
      cells = std::move(next_cells);
      names = std::move(next_names);
    }
  }
  std::vector<ExperimentConfig> out;
  out.reserve(cells.size());
  for (size_t c = 0; c < cells.size(); ++c) {
    cells[c]["name"] = names[c];
    out.push_back(ExperimentConfig::from_json(cells[c]));
  }
  return out;
}

}  // namespace morphkit
