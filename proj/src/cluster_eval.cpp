#include "combemb/cluster_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <json.hpp>

#include "combemb/error.hpp"
#include "combemb/kmeans.hpp"

namespace combemb {

namespace {

struct Contingency {
  std::vector<int> pred_ids;   // sorted distinct predicted ids
  std::vector<int> truth_ids;  // sorted distinct true ids
  std::vector<std::vector<long long>> counts;  // [pred][truth]
  std::size_t n = 0;
};

std::vector<int> distinct(const std::vector<int>& v) {
  std::vector<int> out = v;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

int rank_in(const std::vector<int>& sorted, int v) {
  return static_cast<int>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
}

Contingency contingency(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.empty()) throw ParameterError("clustering metrics need at least one item");
  if (pred.size() != truth.size()) throw ParameterError("pred and truth differ in length");
  Contingency c;
  c.n = pred.size();
  c.pred_ids = distinct(pred);
  c.truth_ids = distinct(truth);
  c.counts.assign(c.pred_ids.size(), std::vector<long long>(c.truth_ids.size(), 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++c.counts[static_cast<std::size_t>(rank_in(c.pred_ids, pred[i]))]
              [static_cast<std::size_t>(rank_in(c.truth_ids, truth[i]))];
  }
  return c;
}

/// Same partition up to relabeling: each row and column has one nonzero cell.
bool identical_partitions(const Contingency& c) {
  if (c.pred_ids.size() != c.truth_ids.size()) return false;
  for (const auto& row : c.counts) {
    if (std::count_if(row.begin(), row.end(), [](long long x) { return x > 0; }) != 1) return false;
  }
  for (std::size_t j = 0; j < c.truth_ids.size(); ++j) {
    int nonzero = 0;
    for (const auto& row : c.counts) nonzero += row[j] > 0;
    if (nonzero != 1) return false;
  }
  return true;
}

double choose2(long long x) { return 0.5 * static_cast<double>(x) * static_cast<double>(x - 1); }

}  // namespace

ClusteringResult cluster_kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed) {
  KMeansOptions opt;
  opt.k = k;
  opt.max_iter = 300;
  opt.rel_tol = 1e-6;
  opt.seed = seed;
  opt.empty_policy = EmptyClusterPolicy::kReseedFarthest;
  const auto r = kmeans(points, opt);
  return {r.assignments, k, r.inertia};
}

std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
  // Shortest augmenting path with row/column potentials; O(n^2 m).
  const auto n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const auto m = static_cast<int>(cost[0].size());
  if (m < n) throw ParameterError("assignment needs rows <= cols");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<bool> used(static_cast<std::size_t>(m + 1), false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (p[static_cast<std::size_t>(j)] != 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  }
  return row_to_col;
}

HungarianResult hungarian_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto c = contingency(pred, truth);
  // Square matrix padded with zero-weight dummies; maximize matches.
  const std::size_t size = std::max(c.pred_ids.size(), c.truth_ids.size());
  std::vector<std::vector<double>> cost(size, std::vector<double>(size, 0.0));
  for (std::size_t i = 0; i < c.pred_ids.size(); ++i) {
    for (std::size_t j = 0; j < c.truth_ids.size(); ++j) cost[i][j] = -static_cast<double>(c.counts[i][j]);
  }
  const auto assignment = solve_assignment(cost);

  HungarianResult r;
  long long matched = 0;
  for (std::size_t i = 0; i < c.pred_ids.size(); ++i) {
    const auto j = static_cast<std::size_t>(assignment[i]);
    if (j < c.truth_ids.size()) {
      r.mapping[c.pred_ids[i]] = c.truth_ids[j];
      matched += c.counts[i][j];
    }
  }
  r.accuracy = static_cast<double>(matched) / static_cast<double>(c.n);
  return r;
}

double nmi(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto c = contingency(pred, truth);
  const auto n = static_cast<double>(c.n);
  std::vector<double> row(c.pred_ids.size(), 0.0), col(c.truth_ids.size(), 0.0);
  for (std::size_t i = 0; i < row.size(); ++i) {
    for (std::size_t j = 0; j < col.size(); ++j) {
      row[i] += static_cast<double>(c.counts[i][j]);
      col[j] += static_cast<double>(c.counts[i][j]);
    }
  }
  double mi = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    for (std::size_t j = 0; j < col.size(); ++j) {
      const auto nij = static_cast<double>(c.counts[i][j]);
      if (nij > 0) mi += nij / n * std::log(n * nij / (row[i] * col[j]));
    }
  }
  auto entropy = [n](const std::vector<double>& counts) {
    double h = 0.0;
    for (double x : counts) {
      if (x > 0) h -= x / n * std::log(x / n);
    }
    return h;
  };
  const double denom = entropy(row) + entropy(col);
  if (denom <= 0.0) return identical_partitions(c) ? 1.0 : 0.0;
  return std::clamp(2.0 * mi / denom, 0.0, 1.0);
}

double ari(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto c = contingency(pred, truth);
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  std::vector<long long> col(c.truth_ids.size(), 0);
  for (const auto& row : c.counts) {
    long long r = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      index += choose2(row[j]);
      r += row[j];
      col[j] += row[j];
    }
    sum_rows += choose2(r);
  }
  for (long long x : col) sum_cols += choose2(x);
  const double expected = sum_rows * sum_cols / choose2(static_cast<long long>(c.n));
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected || c.n < 2) return identical_partitions(c) ? 1.0 : 0.0;
  return (index - expected) / (max_index - expected);
}

// ---------------------------------------------------------------------------

OpenSetMetrics score_open_set(const std::vector<int>& pred, const std::vector<int>& truth,
                              const std::vector<ClassId>& seen_classes) {
  const auto global = hungarian_accuracy(pred, truth);

  auto score = [&](auto&& keep) -> std::optional<ScopeMetrics> {
    std::vector<int> p, t;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!keep(truth[i])) continue;
      p.push_back(pred[i]);
      t.push_back(truth[i]);
      const auto it = global.mapping.find(pred[i]);
      if (it != global.mapping.end() && it->second == truth[i]) ++correct;
    }
    if (p.empty()) return std::nullopt;
    ScopeMetrics s;
    s.count = p.size();
    s.acc = static_cast<double>(correct) / static_cast<double>(p.size());
    s.nmi = nmi(p, t);
    s.ari = ari(p, t);
    return s;
  };
  auto seen = [&seen_classes](int c) { return std::find(seen_classes.begin(), seen_classes.end(), c) != seen_classes.end(); };

  OpenSetMetrics out;
  out.total = score([](int) { return true; });
  out.seen = score(seen);
  out.unseen = score([&seen](int c) { return !seen(c); });
  return out;
}

OpenSetMetrics eval_open_set(const Eigen::MatrixXd& embeddings, const std::vector<int>& truth,
                             const std::vector<ClassId>& seen_classes, int k, std::uint64_t seed) {
  if (static_cast<std::size_t>(embeddings.rows()) != truth.size()) {
    throw ShapeError("one ground-truth label per embedding row is required");
  }
  const auto clustering = cluster_kmeans(embeddings, k, seed);
  return score_open_set(clustering.assignments, truth, seen_classes);
}

std::string metrics_to_json(const OpenSetMetrics& metrics) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  auto put = [&j](const char* key, const std::optional<ScopeMetrics>& s) {
    if (!s) return;
    j[key] = {{"acc", s->acc}, {"nmi", s->nmi}, {"ari", s->ari}, {"count", s->count}};
  };
  put("seen", metrics.seen);
  put("unseen", metrics.unseen);
  put("total", metrics.total);
  return j.dump();
}

}  // namespace combemb
