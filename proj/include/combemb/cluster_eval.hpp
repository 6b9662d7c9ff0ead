#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "combemb/dataset.hpp"

namespace combemb {

struct ClusteringResult {
  std::vector<int> assignments;
  int k = 0;
  double inertia = 0.0;
};

/// k-means++ / Lloyd with a 300-iteration cap and relative-inertia tolerance
/// 1e-6. Empty clusters are reseeded with the farthest point, so every
/// cluster is nonempty. Throws ParameterError when k > n.
ClusteringResult cluster_kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed);

/// Minimum-cost perfect assignment on a rows <= cols matrix; returns the
/// column assigned to each row.
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost);

struct HungarianResult {
  double accuracy = 0.0;
  std::map<int, int> mapping;  // cluster id -> class id, for matched clusters
};

/// Clustering accuracy under the best one-to-one cluster->class mapping.
/// Throws ParameterError on empty or unequal-length input.
HungarianResult hungarian_accuracy(const std::vector<int>& pred, const std::vector<int>& truth);

/// 2 I(pred; truth) / (H(pred) + H(truth)).
double nmi(const std::vector<int>& pred, const std::vector<int>& truth);

/// Adjusted Rand index.
double ari(const std::vector<int>& pred, const std::vector<int>& truth);

struct ScopeMetrics {
  double acc = 0.0;
  double nmi = 0.0;
  double ari = 0.0;
  std::size_t count = 0;
};

struct OpenSetMetrics {
  std::optional<ScopeMetrics> seen;
  std::optional<ScopeMetrics> unseen;
  std::optional<ScopeMetrics> total;
};

/// Scores a fixed clustering. Accuracy uses one global Hungarian mapping;
/// NMI and ARI are recomputed on each scope's items. Empty scopes are absent.
OpenSetMetrics score_open_set(const std::vector<int>& pred, const std::vector<int>& truth,
                              const std::vector<ClassId>& seen_classes);

/// Clusters the rows of `embeddings` into k groups and scores them.
OpenSetMetrics eval_open_set(const Eigen::MatrixXd& embeddings, const std::vector<int>& truth,
                             const std::vector<ClassId>& seen_classes, int k, std::uint64_t seed);

/// {"seen": {...}, "unseen": {...}, "total": {...}} with acc/nmi/ari/count;
/// absent scopes are omitted.
std::string metrics_to_json(const OpenSetMetrics& metrics);

}  // namespace combemb
