// SPDX-License-Identifier: Apache-2.0
#include "morphkit/morphology.hpp"

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace morphkit;
using testsup::make_chain;
using testsup::make_star;

namespace {

std::string chain_spec_with_table_joint() {
  // 8-joint chain; joint 1 carries the documented Franka example values.
  RobotMorphology m = make_chain(8, "panda_like");
  m.descriptors[1] = testsup::table_example_descriptor();
  return serialize_robot_spec(m);
}

TEST(ParseRobotSpec, AcceptsChainWithExampleDescriptor) {
  const RobotMorphology m = parse_robot_spec(chain_spec_with_table_joint());
  EXPECT_EQ(m.num_joints, 8);
  EXPECT_EQ(m.name, "panda_like");
  const auto v = descriptor_vector(m.descriptors[1]);
  const std::array<double, 12> expected{0, 1, 0, 0, 1, -2.9671, 2.9671,
                                        6.90776, 1, 1, 0.1, 10.30895};
  for (int f = 0; f < 12; ++f) EXPECT_EQ(v[f], expected[f]) << "feature " << f;
}

TEST(ParseRobotSpec, SingleJointNoEdges) {
  const RobotMorphology m =
      parse_robot_spec(serialize_robot_spec(make_chain(1)));
  EXPECT_EQ(m.num_joints, 1);
  EXPECT_TRUE(m.edges.empty());
}

TEST(ParseRobotSpec, DisconnectedGraphNamesUnreachableJoint) {
  RobotMorphology m = make_chain(3);
  m.edges = {{0, 1}};
  try {
    parse_robot_spec(serialize_robot_spec(m));
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("joint 2"), std::string::npos);
  }
}

TEST(ParseRobotSpec, MalformedDocument) {
  EXPECT_THROW(parse_robot_spec("{ not json"), std::invalid_argument);
  EXPECT_THROW(parse_robot_spec("[1,2]"), std::invalid_argument);
}

TEST(ParseRobotSpec, EdgeIndexOutOfRangeNamesEdge) {
  nlohmann::json doc =
      nlohmann::json::parse(serialize_robot_spec(make_chain(3)));
  doc["edges"].push_back({1, 7});
  try {
    parse_robot_spec(doc.dump());
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("[1, 7]"), std::string::npos);
  }
}

TEST(ParseRobotSpec, SelfLoopRejected) {
  nlohmann::json doc =
      nlohmann::json::parse(serialize_robot_spec(make_chain(3)));
  doc["edges"].push_back({2, 2});
  EXPECT_THROW(parse_robot_spec(doc.dump()), std::invalid_argument);
}

TEST(ParseRobotSpec, DuplicateJointIndexRejected) {
  nlohmann::json doc =
      nlohmann::json::parse(serialize_robot_spec(make_chain(3)));
  doc["joints"][2]["index"] = 0;
  try {
    parse_robot_spec(doc.dump());
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("joint"), std::string::npos);
  }
}

TEST(ParseRobotSpec, MissingDescriptorFieldNamesJoint) {
  nlohmann::json doc =
      nlohmann::json::parse(serialize_robot_spec(make_chain(2)));
  doc["joints"][1]["descriptor"].erase("az");
  try {
    parse_robot_spec(doc.dump());
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("az"), std::string::npos);
    EXPECT_NE(msg.find("joint 1"), std::string::npos);
  }
}

TEST(ParseRobotSpec, InvalidDescriptorInvariants) {
  RobotMorphology m = make_chain(2);
  m.descriptors[0].type_pris = 1.0;  // both flags set
  EXPECT_THROW(validate_morphology(m), std::invalid_argument);
  m = make_chain(2);
  m.descriptors[1].az = 0.5;  // typed joint, non-unit axis
  EXPECT_THROW(validate_morphology(m), std::invalid_argument);
  m = make_chain(2);
  m.descriptors[0].hard_lower = 2.0;
  m.descriptors[0].hard_upper = -2.0;
  EXPECT_THROW(validate_morphology(m), std::invalid_argument);
}

TEST(ParseRobotSpec, RoundTripIsIdentical) {
  const std::string text = chain_spec_with_table_joint();
  const RobotMorphology a = parse_robot_spec(text);
  const RobotMorphology b = parse_robot_spec(serialize_robot_spec(a));
  EXPECT_EQ(a.name, b.name);
  EXPECT_EQ(a.num_joints, b.num_joints);
  EXPECT_EQ(a.edges, b.edges);
  for (int j = 0; j < a.num_joints; ++j) {
    EXPECT_EQ(descriptor_vector(a.descriptors[j]),
              descriptor_vector(b.descriptors[j]));
  }
}

TEST(AdjacencyIndicator, Chain3) {
  const auto adj = adjacency_indicator(make_chain(3));
  const double expected[3][3] = {{1, 1, 0}, {1, 1, 1}, {0, 1, 1}};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(adj.values(i, j), expected[i][j]);
  }
}

TEST(AdjacencyIndicator, Star) {
  const auto adj = adjacency_indicator(make_star(4));
  for (int j = 0; j < 4; ++j) {
    EXPECT_EQ(adj.values(0, j), 1.0);
    EXPECT_EQ(adj.values(j, 0), 1.0);
  }
  for (int i = 1; i < 4; ++i) {
    for (int j = 1; j < 4; ++j) {
      EXPECT_EQ(adj.values(i, j), i == j ? 1.0 : 0.0);
    }
  }
}

TEST(AdjacencyIndicator, RandomTreeMatchesEdgeMembership) {
  Rng rng(7);
  const RobotMorphology m = testsup::random_connected_graph(rng, 10, 0);
  const auto adj = adjacency_indicator(m);
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      const double expected = (i == j || m.has_edge(i, j)) ? 1.0 : 0.0;
      EXPECT_EQ(adj.values(i, j), expected);
    }
  }
}

TEST(ShortestPaths, Chain3) {
  const SpdTable spd = shortest_path_distances(make_chain(3));
  EXPECT_EQ(spd.at(0, 2), 2);
  EXPECT_EQ(spd.at(2, 0), 2);
  EXPECT_EQ(spd.d_max, 2);
}

TEST(ShortestPaths, StarLeafPairs) {
  const SpdTable spd = shortest_path_distances(make_star(5));
  for (int a = 1; a < 5; ++a) {
    for (int b = 1; b < 5; ++b) {
      EXPECT_EQ(spd.at(a, b), a == b ? 0 : 2);
    }
  }
}

TEST(ShortestPaths, MatchesFloydWarshallOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + rng.uniform_int(11);  // up to 12 nodes
    const RobotMorphology m = testsup::random_connected_graph(rng, n);
    const SpdTable spd = shortest_path_distances(m);
    const auto oracle = testsup::floyd_warshall(m);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        EXPECT_EQ(spd.at(i, j), oracle[i][j]) << "trial " << trial;
      }
    }
  }
}

TEST(ShortestPaths, DistanceOneIffAdjacentOffDiagonal) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + rng.uniform_int(9);
    const RobotMorphology m = testsup::random_connected_graph(rng, n);
    const auto adj = adjacency_indicator(m);
    const SpdTable spd = shortest_path_distances(m);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (i != j) {
          EXPECT_EQ(spd.at(i, j) == 1, adj.values(i, j) == 1.0);
        }
      }
    }
  }
}

TEST(MorphologyProperties, PermutationEquivariance) {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 3 + rng.uniform_int(8);
    const RobotMorphology m = testsup::random_connected_graph(rng, n);
    const auto perm = testsup::random_permutation(rng, n);
    const RobotMorphology pm = testsup::permute_morphology(m, perm);
    const auto adj = adjacency_indicator(m);
    const auto padj = adjacency_indicator(pm);
    const SpdTable spd = shortest_path_distances(m);
    const SpdTable pspd = shortest_path_distances(pm);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        EXPECT_EQ(padj.values(perm[i], perm[j]), adj.values(i, j));
        EXPECT_EQ(pspd.at(perm[i], perm[j]), spd.at(i, j));
      }
    }
  }
}

TEST(DescriptorVector, FieldPlacement) {
  const auto zero = descriptor_vector(JointDescriptor{});
  for (double v : zero) EXPECT_EQ(v, 0.0);

  JointDescriptor pris;
  pris.type_pris = 1.0;
  pris.ax = 1.0;
  pris.hard_lower = 0.0;
  pris.hard_upper = 0.04;
  const auto v = descriptor_vector(pris);
  EXPECT_EQ(v[0], 1.0);
  EXPECT_EQ(v[1], 0.0);
  EXPECT_EQ(v[2], 1.0);
  EXPECT_EQ(v[3], 0.0);
  EXPECT_EQ(v[4], 0.0);
  EXPECT_EQ(v[5], 0.0);
  EXPECT_EQ(v[6], 0.04);
}

TEST(NormalizeDescriptors, IdenticalVectorsGiveZeroContinuous) {
  const auto vec = descriptor_vector(testsup::table_example_descriptor());
  const auto [normed, stats] = normalize_descriptors({vec, vec});
  for (int f = 0; f < kDescriptorDim; ++f) {
    if (descriptor_feature_is_binary(f)) {
      EXPECT_EQ(normed[0][f], vec[f]) << "binary feature " << f;
      EXPECT_FALSE(stats.clamped[f]);
    } else {
      EXPECT_EQ(normed[0][f], 0.0) << "continuous feature " << f;
      EXPECT_TRUE(stats.clamped[f]);  // zero variance clamps the scale
      EXPECT_EQ(stats.scale[f], 1.0);
    }
  }
}

TEST(NormalizeDescriptors, TwoValuesStandardizeToPlusMinusOne) {
  std::array<double, 12> a{}, b{};
  a[5] = 1.0;  // hard_lower, a continuous feature
  b[5] = 3.0;
  const auto [normed, stats] = normalize_descriptors({a, b});
  EXPECT_DOUBLE_EQ(normed[0][5], -1.0);
  EXPECT_DOUBLE_EQ(normed[1][5], 1.0);
  EXPECT_DOUBLE_EQ(stats.mean[5], 2.0);
  EXPECT_DOUBLE_EQ(stats.scale[5], 1.0);
}

TEST(NormalizeDescriptors, ReusedStatsMatchHandFormula) {
  Rng rng(23);
  std::vector<std::array<double, 12>> population;
  for (int i = 0; i < 6; ++i) {
    std::array<double, 12> v{};
    for (int f = 0; f < 12; ++f) v[f] = rng.normal();
    v[0] = v[1] = v[8] = i % 2;  // keep binary features binary
    population.push_back(v);
  }
  const auto [_, stats] = normalize_descriptors(population);
  std::array<double, 12> held{};
  for (int f = 0; f < 12; ++f) held[f] = rng.normal();
  const auto [out, stats2] = normalize_descriptors({held}, stats);
  for (int f = 0; f < 12; ++f) {
    EXPECT_EQ(out[0][f], (held[f] - stats.mean[f]) / stats.scale[f]);
    EXPECT_EQ(stats2.mean[f], stats.mean[f]);
  }
}

}  // namespace
