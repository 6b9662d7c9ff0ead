#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "combemb/dataset.hpp"

namespace combemb {

/// One l2-normalized row per seen class, in the order of `classes`.
struct ClassEmbeddingMatrix {
  std::vector<ClassId> classes;
  Eigen::MatrixXd rows;
};

enum class ClassEmbeddingMode { kClassifierWeights, kClassMeans };

/// Feature map applied to each labeled example before class embeddings are
/// computed (identity for raw features, or a trained encoder).
using FeatureMap = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

FeatureMap identity_feature_map();

/// Normalized-softmax linear classifier used by kClassifierWeights.
struct PretrainOptions {
  int epochs = 300;
  double learning_rate = 0.5;
  double temperature = 0.1;
  std::uint64_t seed = 0;
};

/// Class embeddings for the split's seen classes, computed from labeled
/// records only. Throws DataError when a seen class has no labeled record.
ClassEmbeddingMatrix class_embeddings(const FeatureTable& table, const OpenSetSplit& split,
                                      const FeatureMap& encoder, ClassEmbeddingMode mode,
                                      const PretrainOptions& pretrain = {});

/// M partitions of the seen classes into meta-classes.
class MetaClassScheme {
 public:
  MetaClassScheme() = default;
  MetaClassScheme(std::vector<ClassId> classes, std::vector<int> sizes,
                  std::vector<std::vector<int>> assignment,
                  std::vector<std::vector<int>> subspace_dims, std::uint64_t seed);

  int num_sets() const { return static_cast<int>(sizes_.size()); }
  const std::vector<int>& sizes() const { return sizes_; }
  const std::vector<ClassId>& classes() const { return classes_; }
  int num_classes() const { return static_cast<int>(classes_.size()); }
  /// assignment()[m][r] is the meta-class of classes()[r] in set m.
  const std::vector<std::vector<int>>& assignment() const { return assignment_; }
  const std::vector<std::vector<int>>& subspace_dims() const { return subspace_dims_; }
  int subspace_dim() const { return subspace_dims_.empty() ? 0 : static_cast<int>(subspace_dims_[0].size()); }
  std::uint64_t seed() const { return seed_; }

  bool contains(ClassId c) const;

  /// Meta-class of base class `c` in set `m`. Throws LookupError for an
  /// unknown class or set index.
  int meta_label(int m, ClassId c) const;

  /// meta_label(m, c) for every m.
  std::vector<int> meta_labels(ClassId c) const;

  friend bool operator==(const MetaClassScheme&, const MetaClassScheme&) = default;

 private:
  int rank_of(ClassId c) const;

  std::vector<ClassId> classes_;
  std::vector<int> sizes_;
  std::vector<std::vector<int>> assignment_;
  std::vector<std::vector<int>> subspace_dims_;
  std::uint64_t seed_ = 0;
};

struct SchemeOptions {
  int num_sets = 6;        // M
  int meta_classes = 4;    // K_m, shared by all sets
  int subspace_dim = 0;    // Q; 0 selects ceil(d1 / 4)
  std::uint64_t seed = 0;
  int max_iter = 100;
  double rel_tol = 1e-6;
  int max_attempts = 32;
  int restarts = 10;       // k-means runs per attempt; lowest inertia wins
};

/// For each set, samples Q distinct embedding coordinates, projects the
/// class embeddings onto them and clusters with k-means (k = K_m), keeping
/// the lowest-inertia of `restarts` runs. When every run leaves a cluster
/// empty the set is retried with the next sub-seed.
MetaClassScheme build_scheme(const ClassEmbeddingMatrix& embs, const SchemeOptions& options);

/// ceil(log2 K) bits per set, summed.
int code_bits(const std::vector<int>& sizes);
int code_bits(const MetaClassScheme& scheme);
int bits_for(int k);

/// Text scheme file. Classes are stored implicitly as 0..C-1.
void save_scheme(const MetaClassScheme& scheme, const std::filesystem::path& path);
MetaClassScheme load_scheme(const std::filesystem::path& path);

}  // namespace combemb
