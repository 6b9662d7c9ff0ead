#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace combemb {

enum class EmptyClusterPolicy {
  kReport,          // stop and flag the result; the caller decides
  kReseedFarthest,  // move the point farthest from its centroid into the empty cluster
};

struct KMeansOptions {
  int k = 2;
  int max_iter = 300;
  double rel_tol = 1e-6;
  std::uint64_t seed = 0;
  EmptyClusterPolicy empty_policy = EmptyClusterPolicy::kReseedFarthest;
};

struct KMeansResult {
  std::vector<int> assignments;
  Eigen::MatrixXd centroids;  // k x d
  double inertia = 0.0;
  int iterations = 0;
  bool empty_cluster = false;  // only set under kReport
};

/// Lloyd's algorithm with k-means++ seeding over the rows of `points`.
/// Assignment ties go to the lowest centroid index. Throws ParameterError
/// when k < 1 or k > n.
KMeansResult kmeans(const Eigen::MatrixXd& points, const KMeansOptions& options);

/// Sum of squared distances of each point to its assigned centroid.
double kmeans_inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids,
                      const std::vector<int>& assignments);

}  // namespace combemb
