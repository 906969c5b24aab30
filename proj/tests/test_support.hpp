// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures and independent oracles. Everything here is deliberately
// written without reusing the library's computation paths, so tests compare
// two independent routes.
#pragma once

#include <array>
#include <vector>

#include "morphkit/morphkit.hpp"

namespace testsup {

using morphkit::JointDescriptor;
using morphkit::Matrix;
using morphkit::RobotMorphology;

// Distinct, O(1)-magnitude descriptor for synthetic joint j.
inline JointDescriptor make_descriptor(int j) {
  JointDescriptor d;
  d.type_rev = 1.0;
  d.az = 1.0;
  d.hard_lower = -1.0 - 0.1 * j;
  d.hard_upper = 1.0 + 0.1 * j;
  d.damping_log = 0.15 * j - 0.4;
  d.friction_anchor = j % 2;
  d.lateral_friction = 0.5 + 0.05 * j;
  d.spinning_friction = 0.1;
  d.stiffness_log = 0.2 * j - 0.6;
  return d;
}

inline RobotMorphology make_chain(int joints, const std::string& name = "chain") {
  RobotMorphology m;
  m.name = name;
  m.num_joints = joints;
  for (int j = 0; j + 1 < joints; ++j) m.edges.emplace_back(j, j + 1);
  for (int j = 0; j < joints; ++j) m.descriptors.push_back(make_descriptor(j));
  return m;
}

inline RobotMorphology make_star(int joints) {
  RobotMorphology m;
  m.name = "star";
  m.num_joints = joints;
  for (int j = 1; j < joints; ++j) m.edges.emplace_back(0, j);
  for (int j = 0; j < joints; ++j) m.descriptors.push_back(make_descriptor(j));
  return m;
}

// The representative Franka-arm joint used as the documentation example.
inline JointDescriptor table_example_descriptor() {
  JointDescriptor d;
  d.type_pris = 0;
  d.type_rev = 1;
  d.ax = 0;
  d.ay = 0;
  d.az = 1;
  d.hard_lower = -2.9671;
  d.hard_upper = 2.9671;
  d.damping_log = 6.90776;
  d.friction_anchor = 1;
  d.lateral_friction = 1;
  d.spinning_friction = 0.1;
  d.stiffness_log = 10.30895;
  return d;
}

// Random spanning tree plus a few extra edges; always connected.
inline RobotMorphology random_connected_graph(morphkit::Rng& rng, int joints,
                                              int extra_edges = 2) {
  RobotMorphology m;
  m.name = "random";
  m.num_joints = joints;
  for (int j = 1; j < joints; ++j) {
    m.edges.emplace_back(rng.uniform_int(j), j);
  }
  for (int e = 0; e < extra_edges; ++e) {
    const int a = rng.uniform_int(joints);
    const int b = rng.uniform_int(joints);
    if (a == b) continue;
    m.edges.emplace_back(std::min(a, b), std::max(a, b));
  }
  std::sort(m.edges.begin(), m.edges.end());
  m.edges.erase(std::unique(m.edges.begin(), m.edges.end()), m.edges.end());
  for (int j = 0; j < joints; ++j) m.descriptors.push_back(make_descriptor(j));
  return m;
}

// Independent all-pairs shortest-path oracle (Floyd-Warshall; the library
// uses per-node BFS).
inline std::vector<std::vector<int>> floyd_warshall(const RobotMorphology& m) {
  const int n = m.num_joints;
  const int inf = 1 << 20;
  std::vector<std::vector<int>> d(n, std::vector<int>(n, inf));
  for (int i = 0; i < n; ++i) d[i][i] = 0;
  for (const auto& [a, b] : m.edges) {
    d[a][b] = 1;
    d[b][a] = 1;
  }
  for (int k = 0; k < n; ++k) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (d[i][k] + d[k][j] < d[i][j]) d[i][j] = d[i][k] + d[k][j];
      }
    }
  }
  return d;
}

// Joint relabeling: new index of old joint j is perm[j].
inline RobotMorphology permute_morphology(const RobotMorphology& m,
                                          const std::vector<int>& perm) {
  RobotMorphology out;
  out.name = m.name + "_perm";
  out.num_joints = m.num_joints;
  out.descriptors.resize(m.num_joints);
  for (int j = 0; j < m.num_joints; ++j) out.descriptors[perm[j]] = m.descriptors[j];
  for (const auto& [a, b] : m.edges) {
    const int pa = perm[a], pb = perm[b];
    out.edges.emplace_back(std::min(pa, pb), std::max(pa, pb));
  }
  std::sort(out.edges.begin(), out.edges.end());
  return out;
}

inline std::vector<int> random_permutation(morphkit::Rng& rng, int n) {
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  for (int i = n - 1; i > 0; --i) {
    std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
  }
  return perm;
}

// Dense reference attention without any mask term; used for the bitwise
// neutrality checks against the masked implementation.
inline Matrix reference_attention_weights(const Matrix& q, const Matrix& k) {
  const int n = q.rows(), dk = q.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix logits(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int c = 0; c < dk; ++c) acc += q(i, c) * k(j, c);
      logits(i, j) = acc * scale;
    }
  }
  for (int i = 0; i < n; ++i) {
    double mx = logits(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      logits(i, j) = std::exp(logits(i, j) - mx);
      sum += logits(i, j);
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) logits(i, j) *= inv;
  }
  return logits;
}

inline Matrix random_matrix(morphkit::Rng& rng, int rows, int cols,
                            double scale = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

}  // namespace testsup
