// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "morphkit/core.hpp"

namespace morphkit {

inline constexpr int kDescriptorDim = 12;

// Per-joint semantic descriptor: type flags, axis, limits, contact
// properties. Damping/stiffness are stored pre-logged in the file schema,
// so no transform is applied here.
struct JointDescriptor {
  double type_pris = 0.0;
  double type_rev = 0.0;
  double ax = 0.0, ay = 0.0, az = 0.0;
  double hard_lower = 0.0, hard_upper = 0.0;
  double damping_log = 0.0;
  double friction_anchor = 0.0;
  double lateral_friction = 0.0;
  double spinning_friction = 0.0;
  double stiffness_log = 0.0;
};

// Fixed feature order of the descriptor vector.
inline std::array<double, kDescriptorDim> descriptor_vector(
    const JointDescriptor& d) {
  return {d.type_pris,        d.type_rev,      d.ax,
          d.ay,               d.az,            d.hard_lower,
          d.hard_upper,       d.damping_log,   d.friction_anchor,
          d.lateral_friction, d.spinning_friction, d.stiffness_log};
}

// Feature indices that are binary flags (pass through normalization).
inline bool descriptor_feature_is_binary(int feature) {
  return feature == 0 || feature == 1 || feature == 8;
}

// Kinematic graph of one embodiment: joints as nodes, links as undirected
// edges, plus one descriptor per joint.
struct RobotMorphology {
  std::string name;
  int num_joints = 0;
  std::vector<std::pair<int, int>> edges;  // normalized: first < second
  std::vector<JointDescriptor> descriptors;

  bool has_edge(int i, int j) const {
    if (i > j) std::swap(i, j);
    for (const auto& e : edges) {
      if (e.first == i && e.second == j) return true;
    }
    return false;
  }
};

struct AdjacencyIndicator {
  Matrix values;  // J x J over {0, 1}; diagonal all 1
};

struct SpdTable {
  int num_joints = 0;
  std::vector<int> dist;  // row-major J x J
  int d_max = 0;

  int at(int i, int j) const { return dist[static_cast<size_t>(i) * num_joints + j]; }
};

namespace detail {

inline std::vector<std::vector<int>> neighbor_lists(const RobotMorphology& m) {
  std::vector<std::vector<int>> nbr(m.num_joints);
  for (const auto& [a, b] : m.edges) {
    nbr[a].push_back(b);
    nbr[b].push_back(a);
  }
  for (auto& v : nbr) std::sort(v.begin(), v.end());
  return nbr;
}

inline std::vector<int> bfs_distances(const std::vector<std::vector<int>>& nbr,
                                      int start) {
  std::vector<int> dist(nbr.size(), -1);
  std::vector<int> queue;
  queue.reserve(nbr.size());
  queue.push_back(start);
  dist[start] = 0;
  for (size_t head = 0; head < queue.size(); ++head) {
    const int u = queue[head];
    for (int v : nbr[u]) {
      if (dist[v] < 0) {
        dist[v] = dist[u] + 1;
        queue.push_back(v);
      }
    }
  }
  return dist;
}

}  // namespace detail

inline void validate_descriptor(const JointDescriptor& d, int joint) {
  const std::string at = " (joint " + std::to_string(joint) + ")";
  require(d.type_pris == 0.0 || d.type_pris == 1.0,
          "type_pris must be 0 or 1" + at);
  require(d.type_rev == 0.0 || d.type_rev == 1.0,
          "type_rev must be 0 or 1" + at);
  require(d.type_pris + d.type_rev <= 1.0,
          "joint cannot be both prismatic and revolute" + at);
  if (d.type_pris + d.type_rev == 1.0) {
    const double norm = std::sqrt(d.ax * d.ax + d.ay * d.ay + d.az * d.az);
    require(std::abs(norm - 1.0) < 1e-6,
            "axis of a typed joint must be a unit vector" + at);
  }
  require(d.hard_lower <= d.hard_upper,
          "hard_lower must not exceed hard_upper" + at);
  require(d.friction_anchor == 0.0 || d.friction_anchor == 1.0,
          "friction_anchor must be 0 or 1" + at);
}

inline void validate_morphology(const RobotMorphology& m) {
  require(m.num_joints >= 1, "morphology needs at least one joint");
  require(static_cast<int>(m.descriptors.size()) == m.num_joints,
          "descriptor count " + std::to_string(m.descriptors.size()) +
              " does not match joint count " + std::to_string(m.num_joints));
  for (const auto& [a, b] : m.edges) {
    const std::string at = " (edge [" + std::to_string(a) + ", " +
                           std::to_string(b) + "])";
    require(a >= 0 && a < m.num_joints && b >= 0 && b < m.num_joints,
            "joint index out of range" + at);
    require(a != b, "self-loop edges are not allowed" + at);
  }
  for (int j = 0; j < m.num_joints; ++j) validate_descriptor(m.descriptors[j], j);
  const auto dist = detail::bfs_distances(detail::neighbor_lists(m), 0);
  for (int j = 0; j < m.num_joints; ++j) {
    require(dist[j] >= 0,
            "graph is disconnected: joint " + std::to_string(j) +
                " unreachable from joint 0");
  }
}

// 1-hop neighborhood indicator: 1 on the diagonal and on edges, 0 elsewhere.
inline AdjacencyIndicator adjacency_indicator(const RobotMorphology& m) {
  const int n = m.num_joints;
  AdjacencyIndicator out{Matrix(n, n)};
  for (int i = 0; i < n; ++i) out.values(i, i) = 1.0;
  for (const auto& [a, b] : m.edges) {
    out.values(a, b) = 1.0;
    out.values(b, a) = 1.0;
  }
  return out;
}

// All-pairs shortest path lengths by per-node BFS (graphs are unweighted
// and connectivity is a type invariant).
inline SpdTable shortest_path_distances(const RobotMorphology& m) {
  const int n = m.num_joints;
  const auto nbr = detail::neighbor_lists(m);
  SpdTable out;
  out.num_joints = n;
  out.dist.resize(static_cast<size_t>(n) * n);
  out.d_max = 0;
  for (int s = 0; s < n; ++s) {
    const auto d = detail::bfs_distances(nbr, s);
    for (int j = 0; j < n; ++j) {
      require(d[j] >= 0, "shortest_path_distances: disconnected graph");
      out.dist[static_cast<size_t>(s) * n + j] = d[j];
      out.d_max = std::max(out.d_max, d[j]);
    }
  }
  return out;
}

// Standardization statistics for descriptor features over a training
// population. Binary features keep mean 0 / scale 1.
struct DescriptorStats {
  std::array<double, kDescriptorDim> mean{};
  std::array<double, kDescriptorDim> scale{};
  std::array<bool, kDescriptorDim> clamped{};  // zero-variance warning flags

  static DescriptorStats identity() {
    DescriptorStats s;
    s.mean.fill(0.0);
    s.scale.fill(1.0);
    s.clamped.fill(false);
    return s;
  }
};

inline DescriptorStats compute_descriptor_stats(
    const std::vector<std::array<double, kDescriptorDim>>& vectors) {
  require(!vectors.empty(), "compute_descriptor_stats: empty population");
  DescriptorStats s = DescriptorStats::identity();
  const double n = static_cast<double>(vectors.size());
  for (int f = 0; f < kDescriptorDim; ++f) {
    if (descriptor_feature_is_binary(f)) continue;
    double mean = 0.0;
    for (const auto& v : vectors) mean += v[f];
    mean /= n;
    double var = 0.0;
    for (const auto& v : vectors) var += (v[f] - mean) * (v[f] - mean);
    var /= n;
    s.mean[f] = mean;
    if (var > 0.0) {
      s.scale[f] = std::sqrt(var);
    } else {
      s.scale[f] = 1.0;
      s.clamped[f] = true;
    }
  }
  return s;
}

inline std::array<double, kDescriptorDim> apply_descriptor_stats(
    const std::array<double, kDescriptorDim>& v, const DescriptorStats& s) {
  std::array<double, kDescriptorDim> out;
  for (int f = 0; f < kDescriptorDim; ++f) out[f] = (v[f] - s.mean[f]) / s.scale[f];
  return out;
}

// Standardize a descriptor population; when stats are provided they are
// reused (evaluation-time path), otherwise they are computed here.
inline std::pair<std::vector<std::array<double, kDescriptorDim>>, DescriptorStats>
normalize_descriptors(
    const std::vector<std::array<double, kDescriptorDim>>& vectors,
    const std::optional<DescriptorStats>& stats = std::nullopt) {
  require(!vectors.empty(), "normalize_descriptors: empty input");
  DescriptorStats s;
  if (stats.has_value()) {
    s = *stats;
    for (int f = 0; f < kDescriptorDim; ++f) {
      require(s.scale[f] > 0.0, "normalize_descriptors: scale must be positive");
    }
  } else {
    s = compute_descriptor_stats(vectors);
  }
  std::vector<std::array<double, kDescriptorDim>> out;
  out.reserve(vectors.size());
  for (const auto& v : vectors) out.push_back(apply_descriptor_stats(v, s));
  return {std::move(out), s};
}

// ---- robot-description document (JSON) ----
//
// { "name": ..., "joints": [ {"index": i, "descriptor": {12 named fields}} ],
//   "edges": [[i, j], ...] }

namespace detail {

inline double get_number(const nlohmann::json& j, const std::string& key,
                         const std::string& where) {
  auto it = j.find(key);
  require(it != j.end(), "missing field '" + key + "' in " + where);
  require(it->is_number(), "field '" + key + "' must be a number in " + where);
  return it->get<double>();
}

}  // namespace detail

inline RobotMorphology parse_robot_spec(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("malformed robot spec: ") + e.what());
  }
  require(doc.is_object(), "robot spec must be a JSON object");
  require(doc.contains("joints") && doc["joints"].is_array(),
          "robot spec needs a 'joints' array");
  require(doc.contains("edges") && doc["edges"].is_array(),
          "robot spec needs an 'edges' array");

  RobotMorphology m;
  m.name = doc.value("name", std::string("unnamed"));
  m.num_joints = static_cast<int>(doc["joints"].size());
  m.descriptors.resize(m.num_joints);

  std::vector<bool> seen(m.num_joints, false);
  for (const auto& joint : doc["joints"]) {
    require(joint.is_object() && joint.contains("index"),
            "each joint entry needs an 'index'");
    const int idx = joint["index"].get<int>();
    require(idx >= 0 && idx < m.num_joints,
            "joint index " + std::to_string(idx) + " out of range [0, " +
                std::to_string(m.num_joints) + ")");
    require(!seen[idx], "duplicate joint index " + std::to_string(idx));
    seen[idx] = true;
    require(joint.contains("descriptor") && joint["descriptor"].is_object(),
            "joint " + std::to_string(idx) + " needs a 'descriptor' object");
    const auto& d = joint["descriptor"];
    const std::string where = "descriptor of joint " + std::to_string(idx);
    JointDescriptor& out = m.descriptors[idx];
    out.type_pris = detail::get_number(d, "type_pris", where);
    out.type_rev = detail::get_number(d, "type_rev", where);
    out.ax = detail::get_number(d, "ax", where);
    out.ay = detail::get_number(d, "ay", where);
    out.az = detail::get_number(d, "az", where);
    out.hard_lower = detail::get_number(d, "hard_lower", where);
    out.hard_upper = detail::get_number(d, "hard_upper", where);
    out.damping_log = detail::get_number(d, "damping_log", where);
    out.friction_anchor = detail::get_number(d, "friction_anchor", where);
    out.lateral_friction = detail::get_number(d, "lateral_friction", where);
    out.spinning_friction = detail::get_number(d, "spinning_friction", where);
    out.stiffness_log = detail::get_number(d, "stiffness_log", where);
  }

  for (const auto& e : doc["edges"]) {
    require(e.is_array() && e.size() == 2,
            "each edge must be a pair [i, j]");
    int a = e[0].get<int>();
    int b = e[1].get<int>();
    if (a > b) std::swap(a, b);
    m.edges.emplace_back(a, b);
  }
  std::sort(m.edges.begin(), m.edges.end());
  m.edges.erase(std::unique(m.edges.begin(), m.edges.end()), m.edges.end());

  validate_morphology(m);
  return m;
}

inline nlohmann::json descriptor_to_json(const JointDescriptor& d) {
  return {{"type_pris", d.type_pris},
          {"type_rev", d.type_rev},
          {"ax", d.ax},
          {"ay", d.ay},
          {"az", d.az},
          {"hard_lower", d.hard_lower},
          {"hard_upper", d.hard_upper},
          {"damping_log", d.damping_log},
          {"friction_anchor", d.friction_anchor},
          {"lateral_friction", d.lateral_friction},
          {"spinning_friction", d.spinning_friction},
          {"stiffness_log", d.stiffness_log}};
}

inline nlohmann::json morphology_to_json(const RobotMorphology& m) {
  nlohmann::json joints = nlohmann::json::array();
  for (int j = 0; j < m.num_joints; ++j) {
    joints.push_back({{"index", j}, {"descriptor", descriptor_to_json(m.descriptors[j])}});
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [a, b] : m.edges) edges.push_back({a, b});
  return {{"name", m.name}, {"joints", joints}, {"edges", edges}};
}

inline std::string serialize_robot_spec(const RobotMorphology& m) {
  return morphology_to_json(m).dump(2) + "\n";
}

}  // namespace morphkit
