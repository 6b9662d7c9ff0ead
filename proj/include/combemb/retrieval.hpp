#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "combemb/dataset.hpp"
#include "combemb/embedding.hpp"

namespace combemb {

/// One meta-class index per meta-class set.
using Code = std::vector<int>;

/// Code of an encoder output: per set, the prototype with maximal cosine
/// similarity to z^m (ties to the lowest index).
Code encode_embedding(const VectorXd& z, const std::vector<MatrixXd>& prototypes);

Code encode_item(const Model& model, const VectorXd& x);

/// sum_m (1 - cos(z_q^m, theta^m_{code[m]})), in [0, 2M]. Throws
/// LookupError when an index is out of range.
double asymmetric_distance(const VectorXd& z_q, const Code& code, const std::vector<MatrixXd>& codebook);

/// Bytes per item for a bit-packed code over `sizes`.
std::size_t code_bytes(const std::vector<int>& sizes);

/// Indices written in set order, ceil(log2 K_m) bits each, least
/// significant bit first within little-endian bytes.
void pack_code(const Code& code, const std::vector<int>& sizes, std::span<std::uint8_t> out);
Code unpack_code(std::span<const std::uint8_t> bytes, const std::vector<int>& sizes);

/// Bit-packed database codes plus the prototype codebook used to score
/// them. Immutable once built.
class CodeIndex {
 public:
  CodeIndex() = default;
  explicit CodeIndex(std::vector<int> sizes);

  /// Encodes every record of `table` with `model`.
  static CodeIndex build(const Model& model, const FeatureTable& table);

  void add(RecordId id, std::optional<ClassId> label, const Code& code);

  /// Replaces the codebook; throws ShapeError unless it has one d2 x K_m
  /// matrix per set.
  void set_codebook(std::vector<MatrixXd> codebook);

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  int num_sets() const { return static_cast<int>(sizes_.size()); }
  const std::vector<int>& sizes() const { return sizes_; }
  const std::vector<MatrixXd>& codebook() const { return codebook_; }
  std::size_t bytes_per_item() const { return bytes_per_item_; }
  int bits_per_item() const;

  RecordId id(std::size_t i) const { return ids_[i]; }
  std::optional<ClassId> label(std::size_t i) const { return labels_[i]; }
  Code code(std::size_t i) const;
  std::span<const std::uint8_t> packed(std::size_t i) const;

 private:
  std::vector<int> sizes_;
  std::vector<MatrixXd> codebook_;
  std::size_t bytes_per_item_ = 0;
  std::vector<RecordId> ids_;
  std::vector<std::optional<ClassId>> labels_;
  std::vector<std::uint8_t> codes_;
};

struct SearchHit {
  RecordId id = 0;
  double distance = 0.0;
  std::size_t row = 0;  // position in the index
};

/// M x K_m table of 1 - cos(z_q^m, theta^m_k).
std::vector<std::vector<double>> distance_table(const VectorXd& z_q, const std::vector<MatrixXd>& codebook);

/// Items ordered by ascending asymmetric distance, ties by ascending id,
/// truncated to `topk` (topk = 0 gives an empty result).
std::vector<SearchHit> search(const VectorXd& z_q, const CodeIndex& index, std::size_t topk);

/// Mean over relevant positions r (1-based) of (#relevant in top r) / r;
/// 0 when nothing is relevant.
double average_precision(const std::vector<bool>& ranked_relevance);

struct Query {
  VectorXd z;  // encoder output of the query
  ClassId label = 0;
};

/// mAP over the full ranking of `index`; an item is relevant when its label
/// equals the query label. Throws ParameterError for an empty query set.
double mean_average_precision(const std::vector<Query>& queries, const CodeIndex& index);

/// CECD code file (codebook not included; attach it with set_codebook).
void save_codes(const CodeIndex& index, const std::filesystem::path& path);
CodeIndex load_codes(const std::filesystem::path& path);

}  // namespace combemb
