#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace combemb {

using ClassId = int;
using RecordId = std::int64_t;

struct FeatureRecord {
  RecordId id = 0;
  std::optional<ClassId> label;  // absent = unlabeled
  std::vector<float> features;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

/// A table of fixed-dimension feature records with unique ids.
class FeatureTable {
 public:
  FeatureTable() = default;
  explicit FeatureTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  const std::vector<FeatureRecord>& records() const { return records_; }
  const FeatureRecord& operator[](std::size_t i) const { return records_[i]; }

  /// Appends a record; throws ShapeError on a dimension mismatch and
  /// DataError on a duplicate id.
  void add(FeatureRecord record);

  /// Row index of `id`, or nullopt.
  std::optional<std::size_t> find(RecordId id) const;

  /// Sorted distinct labels of labeled records.
  std::vector<ClassId> classes() const;

  bool fully_labeled() const;

  /// Features of record `i` widened to double.
  Eigen::VectorXd features(std::size_t i) const;

  friend bool operator==(const FeatureTable& a, const FeatureTable& b) {
    return a.dim_ == b.dim_ && a.records_ == b.records_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<FeatureRecord> records_;
  std::unordered_map<RecordId, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticParams {
  int n_classes = 10;
  int dim = 64;
  int n_per_class = 200;
  double separation = 1.0;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
};

/// Class means (one row per class) with pairwise distance >= separation.
Eigen::MatrixXd synthetic_class_means(const SyntheticParams& params);

/// Gaussian blobs around synthetic_class_means(). Ids run 0..n-1 in class
/// order.
FeatureTable generate_synthetic(const SyntheticParams& params);

/// A second sample from the same class means with an independent noise
/// stream; ids continue after those of generate_synthetic(params).
FeatureTable generate_synthetic_holdout(const SyntheticParams& params, int n_per_class);

// ---------------------------------------------------------------------------
// File I/O

enum class TableFormat { kAuto, kText, kBinary };

/// Loads CEFT binary or the CSV text form (detected from the first bytes).
FeatureTable load_feature_table(const std::filesystem::path& path);

/// kAuto picks text for .csv/.txt extensions and binary otherwise.
void save_feature_table(const FeatureTable& table, const std::filesystem::path& path,
                        TableFormat format = TableFormat::kAuto);

// ---------------------------------------------------------------------------
// Open-set split

struct OpenSetSplit {
  std::vector<ClassId> seen_classes;   // sorted
  std::vector<ClassId> novel_classes;  // sorted
  std::vector<RecordId> labeled_ids;   // sorted
  std::vector<RecordId> unlabeled_ids; // sorted

  bool is_seen(ClassId c) const;
  bool is_labeled(RecordId id) const;

  friend bool operator==(const OpenSetSplit&, const OpenSetSplit&) = default;
};

/// The lowest floor(seen_fraction * K) classes become seen; within each seen
/// class floor(labeled_fraction * n_c) records, chosen by `seed`, are
/// labeled. Everything else is unlabeled.
OpenSetSplit make_open_set_split(const FeatureTable& table, double seen_fraction,
                                 double labeled_fraction, std::uint64_t seed);

/// Relabels classes by a seeded permutation of the distinct labels, so that
/// make_open_set_split picks a different seen set.
FeatureTable permute_class_labels(const FeatureTable& table, std::uint64_t seed);

void save_split(const OpenSetSplit& split, const std::filesystem::path& path);
OpenSetSplit load_split(const std::filesystem::path& path);

}  // namespace combemb
