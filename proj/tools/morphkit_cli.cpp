// SPDX-License-Identifier: Apache-2.0
//
// morphkit CLI: inspect morphologies and masks, generate synthetic data, run
// training and ablations, and evaluate success-rate statistics.
//
//   morphkit graph  <spec.json> [--out FILE]
//   morphkit mask   <spec.json> --mode MODE [--layers L] [--layer K] ...
//   morphkit gen    --config exp.json [--count N] [--out FILE]
//   morphkit train  --config exp.json [--out-dir DIR] [--warm-start CKPT]
//   morphkit ablate --config grid.json [--out-dir DIR]
//   morphkit eval   --k K --n N | --sr LIST | --aggregate FILES --out BASE
//
// MORPHKIT_OUT_DIR sets the default output directory.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "morphkit/morphkit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string default_out_dir() {
  const char* env = std::getenv("MORPHKIT_OUT_DIR");
  return env != nullptr && *env != '\0' ? env : ".";
}

morphkit::MaskMode parse_mode_flag(const std::string& s) {
  if (s == "none") return morphkit::MaskMode::kNoMask;
  if (s == "full") return morphkit::MaskMode::kFullMask;
  if (s == "mix") return morphkit::MaskMode::kMixMask;
  if (s == "spd") return morphkit::MaskMode::kSpdSoftmask;
  if (s == "adj-v1.0") return morphkit::MaskMode::kAdjSoftmaskV10;
  if (s == "adj-v1.1") return morphkit::MaskMode::kAdjSoftmaskV11;
  if (s == "adj-v2.0") return morphkit::MaskMode::kAdjSoftmaskV20;
  return morphkit::mask_mode_from_string(s);  // canonical spellings
}

void emit(const std::string& out_path, const std::string& content) {
  if (out_path.empty()) {
    std::fputs(content.c_str(), stdout);
  } else {
    morphkit::write_text_file_atomic(out_path, content);
  }
}

int cmd_graph(const std::string& spec_path, const std::string& out_path) {
  const auto m = morphkit::parse_robot_spec(morphkit::read_text_file(spec_path));
  const auto adj = morphkit::adjacency_indicator(m);
  const auto spd = morphkit::shortest_path_distances(m);
  std::printf("name: %s\n", m.name.c_str());
  std::printf("joints: %d\n", m.num_joints);
  std::string edges;
  for (const auto& [a, b] : m.edges) {
    edges += (edges.empty() ? "" : " ") + std::to_string(a) + "-" + std::to_string(b);
  }
  std::printf("edges: %s\n", edges.c_str());
  std::printf("d_max: %d\n", spd.d_max);
  static constexpr const char* kFeature[] = {
      "type_pris", "type_rev", "ax", "ay", "az", "hard_lower", "hard_upper",
      "damping_log", "friction_anchor", "lateral_friction",
      "spinning_friction", "stiffness_log"};
  for (int j = 0; j < m.num_joints; ++j) {
    const auto v = morphkit::descriptor_vector(m.descriptors[j]);
    std::string line = "joint " + std::to_string(j) + ":";
    char buf[64];
    for (int f = 0; f < morphkit::kDescriptorDim; ++f) {
      std::snprintf(buf, sizeof(buf), " %s=%.17g", kFeature[f], v[f]);
      line += buf;
    }
    std::printf("%s\n", line.c_str());
  }
  if (!out_path.empty()) {
    json spd_rows = json::array();
    for (int i = 0; i < spd.num_joints; ++i) {
      json row = json::array();
      for (int j = 0; j < spd.num_joints; ++j) row.push_back(spd.at(i, j));
      spd_rows.push_back(std::move(row));
    }
    const json out = {{"name", m.name},
                      {"joints", m.num_joints},
                      {"edges", morphology_to_json(m)["edges"]},
                      {"adjacency", morphkit::matrix_to_json(adj.values)},
                      {"spd", std::move(spd_rows)},
                      {"d_max", spd.d_max}};
    emit(out_path, out.dump(2) + "\n");
  }
  return 0;
}

int cmd_mask(const std::string& spec_path, const std::string& mode_str,
             int layers, int layer, std::optional<std::string> init_str,
             double strength, double theta_max, bool sequence, int horizon,
             int chunks, int aux, int obs_tokens, const std::string& out_path) {
  const auto m = morphkit::parse_robot_spec(morphkit::read_text_file(spec_path));
  const auto mode = parse_mode_flag(mode_str);
  morphkit::require(layer >= 0 && layer < layers,
                    "--layer must be in [0, --layers)");
  if (init_str.has_value() && morphkit::mask_mode_is_hard_family(mode)) {
    throw std::invalid_argument(
        "--init is only valid with soft mask modes (spd, adj-v*)");
  }
  const auto adj = morphkit::adjacency_indicator(m);
  const auto spd = morphkit::shortest_path_distances(m);
  const morphkit::BiasInit init =
      init_str.has_value() ? morphkit::bias_init_from_string(*init_str)
                           : morphkit::BiasInit::kZero;

  std::optional<morphkit::SpdBiasTable> table;
  std::optional<morphkit::AdjSoftParams> adj_params;
  if (mode == morphkit::MaskMode::kSpdSoftmask) {
    table = morphkit::init_spd_table(init, layers, std::max(1, spd.d_max),
                                     strength);
  } else if (morphkit::mask_mode_is_adj_soft(mode)) {
    morphkit::AdjVariant var = morphkit::AdjVariant::kV20;
    if (mode == morphkit::MaskMode::kAdjSoftmaskV10) var = morphkit::AdjVariant::kV10;
    if (mode == morphkit::MaskMode::kAdjSoftmaskV11) var = morphkit::AdjVariant::kV11;
    adj_params = morphkit::AdjSoftParams::make(var, layers, m.num_joints, theta_max);
    adj_params->init(init, strength);
  }
  const morphkit::Matrix joint_bias = morphkit::joint_bias_for_layer(
      mode, layer, layers, adj, spd, table ? &*table : nullptr,
      adj_params ? &*adj_params : nullptr);

  json out = {{"spec", m.name},
              {"mode", morphkit::to_string(mode)},
              {"layers", layers},
              {"layer", layer},
              {"matrix", morphkit::matrix_to_json(joint_bias)}};
  if (init_str.has_value()) out["init"] = morphkit::to_string(init);
  if (sequence) {
    morphkit::require(horizon % chunks == 0,
                      "--chunks must divide --horizon for sequence masks");
    const morphkit::Matrix token_bias =
        morphkit::expand_joint_bias(joint_bias, chunks, aux);
    const morphkit::SequenceLayout layout{
        obs_tokens, horizon, m.num_joints * chunks * (1 + aux)};
    const auto mask = morphkit::compose_sequence_mask(layout, token_bias);
    out["sequence"] = {{"layout",
                        {{"obs_tokens", layout.obs_tokens},
                         {"action_tokens", layout.action_tokens},
                         {"kinematic_tokens", layout.kinematic_tokens}}},
                       {"matrix", morphkit::matrix_to_json(mask.additive)}};
  }
  emit(out_path, out.dump(2) + "\n");
  return 0;
}

int cmd_gen(const std::string& config_path, int count,
            std::optional<uint64_t> seed, const std::string& out_path) {
  json cfg_json = json::parse(morphkit::read_text_file(config_path));
  auto cfg = morphkit::ExperimentConfig::from_json(cfg_json);
  if (seed.has_value()) {
    for (size_t e = 0; e < cfg.mixture.embodiments.size(); ++e) {
      cfg.mixture.embodiments[e].task.seed = morphkit::mix_seed(*seed, e);
    }
  }
  json embodiments = json::array();
  for (const auto& entry : cfg.mixture.embodiments) {
    const auto samples = morphkit::generate_trajectories(entry.task, count);
    json sample_arr = json::array();
    for (const auto& s : samples) {
      json actions = json::array();
      for (int t = 0; t < s.actions.rows(); ++t) {
        json row = json::array();
        for (int j = 0; j < s.actions.cols(); ++j) row.push_back(s.actions(t, j));
        actions.push_back(std::move(row));
      }
      sample_arr.push_back({{"obs", s.obs}, {"actions", std::move(actions)}});
    }
    embodiments.push_back({{"name", entry.task.morphology.name},
                           {"count", count},
                           {"samples", std::move(sample_arr)}});
  }
  const json out = {{"config", cfg.to_json()},
                    {"count_per_embodiment", count},
                    {"embodiments", std::move(embodiments)}};
  const std::string path =
      out_path.empty() ? default_out_dir() + "/dataset.json" : out_path;
  morphkit::write_text_file_atomic(path, out.dump() + "\n");
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<uint64_t> seed, const std::string& warm_start) {
  json cfg_json = json::parse(morphkit::read_text_file(config_path));
  auto cfg = morphkit::ExperimentConfig::from_json(cfg_json);
  if (seed.has_value()) {
    cfg.train.seed = *seed;
    cfg.policy.seed = *seed;
  }
  std::optional<morphkit::PolicyModel> warm;
  if (!warm_start.empty()) {
    warm = morphkit::load_checkpoint_as(warm_start, cfg.policy);
  }
  auto out = morphkit::run_experiment(cfg, std::move(warm));
  const fs::path dir = out_dir.empty() ? default_out_dir() : out_dir;
  morphkit::write_text_file_atomic((dir / "metrics.csv").string(),
                                   morphkit::metrics_to_csv(out.result.metrics));
  morphkit::save_checkpoint(out.model, (dir / "checkpoint.json").string());
  morphkit::write_text_file_atomic((dir / "report.json").string(),
                                   out.report.to_json().dump(2) + "\n");
  std::printf("final_train_loss=%.17g final_val_loss_mean=%.17g\n",
              out.report.final_train_loss, out.report.final_val_mean);
  std::printf("wrote %s\n", (dir / "report.json").string().c_str());
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir,
               std::optional<uint64_t> seed) {
  json grid = json::parse(morphkit::read_text_file(config_path));
  auto cells = morphkit::expand_grid(grid);
  if (seed.has_value()) {
    for (auto& c : cells) {
      c.train.seed = *seed;
      c.policy.seed = *seed;
    }
  }
  const fs::path dir = out_dir.empty() ? default_out_dir() : out_dir;
  std::vector<json> reports;
  for (const auto& cell : cells) {
    auto out = morphkit::run_experiment(cell);
    const json rj = out.report.to_json();
    morphkit::write_text_file_atomic(
        (dir / ("report_" + cell.name + ".json")).string(), rj.dump(2) + "\n");
    reports.push_back(rj);
    std::printf("%s final_val_loss_mean=%.17g\n", cell.name.c_str(),
                out.report.final_val_mean);
  }
  const auto summary = morphkit::aggregate_report(reports);
  morphkit::write_text_file_atomic((dir / "summary.csv").string(),
                                   summary.to_csv());
  morphkit::write_text_file_atomic((dir / "summary.json").string(),
                                   summary.to_json().dump(2) + "\n");
  std::printf("ablation complete: %zu reports in %s\n", reports.size(),
              dir.string().c_str());
  return 0;
}

int cmd_eval(std::optional<long long> k, std::optional<long long> n,
             double confidence, const std::string& sr_list,
             const std::vector<std::string>& aggregate_files,
             const std::string& out_base) {
  if (k.has_value() || n.has_value()) {
    morphkit::require(k.has_value() && n.has_value(),
                      "--k and --n must be given together");
    const auto ci = morphkit::wilson_interval({*k, *n}, confidence);
    std::printf("%.1f ± %.1f\n", 100.0 * ci.sr, 100.0 * ci.half_width);
    return 0;
  }
  if (!sr_list.empty()) {
    std::vector<double> srs;
    std::string item;
    std::stringstream ss(sr_list);
    while (std::getline(ss, item, ',')) srs.push_back(std::stod(item));
    std::printf("%.17g\n", morphkit::macro_sr(srs));
    return 0;
  }
  if (!aggregate_files.empty()) {
    std::vector<json> reports;
    for (const auto& f : aggregate_files) {
      reports.push_back(json::parse(morphkit::read_text_file(f)));
    }
    const auto summary = morphkit::aggregate_report(reports);
    if (out_base.empty()) {
      std::fputs(summary.to_csv().c_str(), stdout);
    } else {
      morphkit::write_text_file_atomic(out_base + ".csv", summary.to_csv());
      morphkit::write_text_file_atomic(out_base + ".json",
                                       summary.to_json().dump(2) + "\n");
      std::printf("wrote %s.csv and %s.json\n", out_base.c_str(), out_base.c_str());
    }
    return 0;
  }
  throw std::invalid_argument("eval needs --k/--n, --sr, or --aggregate");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"morphkit: embodiment-aware transformer policy toolkit"};
  app.require_subcommand(1);

  // graph
  std::string graph_spec, graph_out;
  auto* graph = app.add_subcommand("graph", "inspect a robot description");
  graph->add_option("spec", graph_spec, "robot description JSON")->required();
  graph->add_option("--out", graph_out, "write adjacency + SPD JSON here");
  uint64_t unused_seed = 0;
  graph->add_option("--seed", unused_seed, "unused; accepted for uniformity");

  // mask
  std::string mask_spec, mask_mode, mask_out;
  std::optional<std::string> mask_init;
  int mask_layers = 2, mask_layer = 0;
  double mask_strength = 3.0, mask_theta_max = 5.0;
  bool mask_sequence = false;
  int mask_horizon = 16, mask_chunks = 1, mask_aux = 0, mask_obs = 1;
  auto* mask = app.add_subcommand("mask", "emit a topology bias matrix");
  mask->add_option("spec", mask_spec, "robot description JSON")->required();
  mask->add_option("--mode", mask_mode,
                   "none|full|mix|spd|adj-v1.0|adj-v1.1|adj-v2.0")
      ->required();
  mask->add_option("--layers", mask_layers, "layer count");
  mask->add_option("--layer", mask_layer, "layer index to emit");
  mask->add_option("--init", mask_init, "zero|hard|mix|linear (soft modes)");
  mask->add_option("--strength", mask_strength, "hard/linear init strength");
  mask->add_option("--theta-max", mask_theta_max, "adj-v1.x clamp");
  mask->add_flag("--sequence", mask_sequence, "also emit the full sequence mask");
  mask->add_option("--horizon", mask_horizon, "action tokens (with --sequence)");
  mask->add_option("--chunks", mask_chunks, "temporal chunks (with --sequence)");
  mask->add_option("--aux", mask_aux, "auxiliary tokens (with --sequence)");
  mask->add_option("--obs-tokens", mask_obs, "observation tokens (with --sequence)");
  mask->add_option("--out", mask_out, "output file (default stdout)");
  mask->add_option("--seed", unused_seed, "unused; accepted for uniformity");

  // gen
  std::string gen_config, gen_out;
  int gen_count = 16;
  std::optional<uint64_t> gen_seed;
  auto* gen = app.add_subcommand("gen", "generate synthetic trajectories");
  gen->add_option("--config", gen_config, "experiment config JSON")->required();
  gen->add_option("--count", gen_count, "trajectories per embodiment");
  gen->add_option("--seed", gen_seed, "override task seeds");
  gen->add_option("--out", gen_out, "output file");

  // train
  std::string train_config, train_out_dir, train_warm;
  std::optional<uint64_t> train_seed;
  auto* train = app.add_subcommand("train", "train a policy");
  train->add_option("--config", train_config, "experiment config JSON")->required();
  train->add_option("--out-dir", train_out_dir, "output directory");
  train->add_option("--seed", train_seed, "override config seed");
  train->add_option("--warm-start", train_warm,
                    "checkpoint to warm-start from (spd_softmask transfer)");

  // ablate
  std::string ablate_config, ablate_out_dir;
  std::optional<uint64_t> ablate_seed;
  auto* ablate = app.add_subcommand("ablate", "run a config grid");
  ablate->add_option("--config", ablate_config, "grid JSON")->required();
  ablate->add_option("--out-dir", ablate_out_dir, "output directory");
  ablate->add_option("--seed", ablate_seed, "override all cell seeds");

  // eval
  std::optional<long long> eval_k, eval_n;
  double eval_conf = 0.95;
  std::string eval_sr, eval_out;
  std::vector<std::string> eval_aggregate;
  auto* eval = app.add_subcommand("eval", "success-rate statistics");
  eval->add_option("--k", eval_k, "success count");
  eval->add_option("--n", eval_n, "trial count");
  eval->add_option("--confidence", eval_conf, "confidence level");
  eval->add_option("--sr", eval_sr, "comma-separated rates for macro SR");
  eval->add_option("--aggregate", eval_aggregate, "report files to aggregate");
  eval->add_option("--out", eval_out, "summary output base path");
  eval->add_option("--seed", unused_seed, "unused; accepted for uniformity");

  try {
    app.parse(argc, argv);
    if (graph->parsed()) return cmd_graph(graph_spec, graph_out);
    if (mask->parsed()) {
      return cmd_mask(mask_spec, mask_mode, mask_layers, mask_layer, mask_init,
                      mask_strength, mask_theta_max, mask_sequence,
                      mask_horizon, mask_chunks, mask_aux, mask_obs, mask_out);
    }
    if (gen->parsed()) return cmd_gen(gen_config, gen_count, gen_seed, gen_out);
    if (train->parsed()) {
      return cmd_train(train_config, train_out_dir, train_seed, train_warm);
    }
    if (ablate->parsed()) {
      return cmd_ablate(ablate_config, ablate_out_dir, ablate_seed);
    }
    if (eval->parsed()) {
      return cmd_eval(eval_k, eval_n, eval_conf, eval_sr, eval_aggregate,
                      eval_out);
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 1;
  }
  return 0;
}
