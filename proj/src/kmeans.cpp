#include "combemb/kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "combemb/error.hpp"
#include "combemb/rng.hpp"

namespace combemb {

namespace {

Eigen::MatrixXd seed_plus_plus(const Eigen::MatrixXd& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Eigen::MatrixXd centroids(k, points.cols());
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);

  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  Eigen::Index idx = first(rng);
  centroids.row(0) = points.row(idx);
  chosen[static_cast<std::size_t>(idx)] = true;

  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    d2[static_cast<std::size_t>(i)] = (points.row(i) - centroids.row(0)).squaredNorm();
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!chosen[static_cast<std::size_t>(i)]) total += d2[static_cast<std::size_t>(i)];
    }
    idx = -1;
    if (total > 0.0) {
      const double target = unif(rng) * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (chosen[static_cast<std::size_t>(i)]) continue;
        acc += d2[static_cast<std::size_t>(i)];
        if (acc >= target && d2[static_cast<std::size_t>(i)] > 0.0) {
          idx = i;
          break;
        }
      }
      // Rounding can leave acc just short of target.
      if (idx < 0) {
        for (Eigen::Index i = n - 1; i >= 0; --i) {
          if (!chosen[static_cast<std::size_t>(i)] && d2[static_cast<std::size_t>(i)] > 0.0) {
            idx = i;
            break;
          }
        }
      }
    } else {
      // Remaining points coincide with existing centers.
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!chosen[static_cast<std::size_t>(i)]) {
          idx = i;
          break;
        }
      }
    }
    centroids.row(c) = points.row(idx);
    chosen[static_cast<std::size_t>(idx)] = true;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], d);
    }
  }
  return centroids;
}

double assign(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids,
              std::vector<int>& assignments) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    assignments[static_cast<std::size_t>(i)] = best;
    inertia += best_d;
  }
  return inertia;
}

std::vector<int> cluster_sizes(const std::vector<int>& assignments, int k) {
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  for (int a : assignments) ++sizes[static_cast<std::size_t>(a)];
  return sizes;
}

/// Moves, for each empty cluster, the point farthest from its centroid
/// (among clusters with more than one member) into it.
void reseed_empty(const Eigen::MatrixXd& points, Eigen::MatrixXd& centroids,
                  std::vector<int>& assignments) {
  const int k = static_cast<int>(centroids.rows());
  auto sizes = cluster_sizes(assignments, k);
  for (int c = 0; c < k; ++c) {
    if (sizes[static_cast<std::size_t>(c)] > 0) continue;
    Eigen::Index far = -1;
    double far_d = -1.0;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      const int a = assignments[static_cast<std::size_t>(i)];
      if (sizes[static_cast<std::size_t>(a)] <= 1) continue;
      const double d = (points.row(i) - centroids.row(a)).squaredNorm();
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    const int from = assignments[static_cast<std::size_t>(far)];
    --sizes[static_cast<std::size_t>(from)];
    ++sizes[static_cast<std::size_t>(c)];
    assignments[static_cast<std::size_t>(far)] = c;
    centroids.row(c) = points.row(far);
  }
}

void update_centroids(const Eigen::MatrixXd& points, const std::vector<int>& assignments,
                      Eigen::MatrixXd& centroids) {
  const auto sizes = cluster_sizes(assignments, static_cast<int>(centroids.rows()));
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(centroids.rows(), centroids.cols());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    sums.row(assignments[static_cast<std::size_t>(i)]) += points.row(i);
  }
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const int s = sizes[static_cast<std::size_t>(c)];
    if (s > 0) centroids.row(c) = sums.row(c) / static_cast<double>(s);
  }
}

}  // namespace

double kmeans_inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids,
                      const std::vector<int>& assignments) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    total += (points.row(i) - centroids.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
  }
  return total;
}

KMeansResult kmeans(const Eigen::MatrixXd& points, const KMeansOptions& options) {
  const Eigen::Index n = points.rows();
  const int k = options.k;
  if (k < 1) throw ParameterError("k-means needs k >= 1");
  if (k > n) {
    throw ParameterError("k-means needs k <= n (k=" + std::to_string(k) +
                         ", n=" + std::to_string(n) + ")");
  }

  auto rng = make_rng(options.seed, kStreamKmeans);
  KMeansResult result;
  result.centroids = seed_plus_plus(points, k, rng);
  result.assignments.assign(static_cast<std::size_t>(n), 0);

  double prev = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < options.max_iter; ++iter) {
    result.iterations = iter + 1;
    assign(points, result.centroids, result.assignments);
    const auto sizes = cluster_sizes(result.assignments, k);
    const bool has_empty = std::find(sizes.begin(), sizes.end(), 0) != sizes.end();
    if (has_empty) {
      if (options.empty_policy == EmptyClusterPolicy::kReport) {
        result.empty_cluster = true;
        result.inertia = kmeans_inertia(points, result.centroids, result.assignments);
        return result;
      }
      reseed_empty(points, result.centroids, result.assignments);
    }
    update_centroids(points, result.assignments, result.centroids);
    const double inertia = kmeans_inertia(points, result.centroids, result.assignments);
    const bool converged = std::isfinite(prev) && (prev - inertia) <= options.rel_tol * std::max(prev, 1e-300);
    prev = inertia;
    if (converged) break;
  }

  // Final assignment against the final centroids.
  assign(points, result.centroids, result.assignments);
  const auto sizes = cluster_sizes(result.assignments, k);
  if (std::find(sizes.begin(), sizes.end(), 0) != sizes.end()) {
    if (options.empty_policy == EmptyClusterPolicy::kReport) {
      result.empty_cluster = true;
    } else {
      reseed_empty(points, result.centroids, result.assignments);
      update_centroids(points, result.assignments, result.centroids);
    }
  }
  result.inertia = kmeans_inertia(points, result.centroids, result.assignments);
  return result;
}

}  // namespace combemb
