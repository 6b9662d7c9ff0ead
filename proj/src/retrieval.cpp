#include "combemb/retrieval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>

#include "combemb/binary_io.hpp"
#include "combemb/error.hpp"
#include "combemb/metascheme.hpp"

namespace combemb {

namespace {

constexpr char kCodeMagic[5] = "CECD";

}  // namespace

Code encode_embedding(const VectorXd& z, const std::vector<MatrixXd>& prototypes) {
  const auto slices = split_subvectors(z, static_cast<int>(prototypes.size()));
  Code code;
  code.reserve(prototypes.size());
  for (std::size_t m = 0; m < prototypes.size(); ++m) code.push_back(nearest_prototype(slices[m], prototypes[m]));
  return code;
}

Code encode_item(const Model& model, const VectorXd& x) {
  return encode_embedding(encode(model, x), model.params.prototypes);
}

double asymmetric_distance(const VectorXd& z_q, const Code& code, const std::vector<MatrixXd>& codebook) {
  if (code.size() != codebook.size()) throw LookupError("code length does not match the codebook");
  const auto slices = split_subvectors(z_q, static_cast<int>(codebook.size()));
  double total = 0.0;
  for (std::size_t m = 0; m < codebook.size(); ++m) {
    if (code[m] < 0 || code[m] >= codebook[m].cols()) {
      throw LookupError("code index " + std::to_string(code[m]) + " out of range in set " + std::to_string(m));
    }
    const VectorXd u = l2_normalize(slices[m]);
    const VectorXd t = l2_normalize(codebook[m].col(code[m]));
    total += 1.0 - u.dot(t);
  }
  return total;
}

// ---------------------------------------------------------------------------

std::size_t code_bytes(const std::vector<int>& sizes) {
  return (static_cast<std::size_t>(code_bits(sizes)) + 7) / 8;
}

void pack_code(const Code& code, const std::vector<int>& sizes, std::span<std::uint8_t> out) {
  if (code.size() != sizes.size()) throw ShapeError("code length does not match the meta-class sets");
  if (out.size() < code_bytes(sizes)) throw ShapeError("output buffer too small for packed code");
  std::fill(out.begin(), out.end(), std::uint8_t{0});
  std::size_t bit = 0;
  for (std::size_t m = 0; m < code.size(); ++m) {
    if (code[m] < 0 || code[m] >= sizes[m]) throw LookupError("code index out of range in set " + std::to_string(m));
    const int width = bits_for(sizes[m]);
    for (int b = 0; b < width; ++b, ++bit) {
      if ((code[m] >> b) & 1) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
    }
  }
}

Code unpack_code(std::span<const std::uint8_t> bytes, const std::vector<int>& sizes) {
  if (bytes.size() < code_bytes(sizes)) throw ShapeError("packed code too short");
  Code code(sizes.size(), 0);
  std::size_t bit = 0;
  for (std::size_t m = 0; m < sizes.size(); ++m) {
    const int width = bits_for(sizes[m]);
    int v = 0;
    for (int b = 0; b < width; ++b, ++bit) {
      if ((bytes[bit / 8] >> (bit % 8)) & 1) v |= 1 << b;
    }
    if (v >= sizes[m]) throw LookupError("packed index out of range in set " + std::to_string(m));
    code[m] = v;
  }
  return code;
}

// ---------------------------------------------------------------------------

CodeIndex::CodeIndex(std::vector<int> sizes) : sizes_(std::move(sizes)), bytes_per_item_(code_bytes(sizes_)) {
  if (sizes_.empty()) throw ParameterError("code index needs at least one meta-class set");
}

CodeIndex CodeIndex::build(const Model& model, const FeatureTable& table) {
  CodeIndex index(model.shape.meta_sizes);
  index.set_codebook(model.params.prototypes);
  for (std::size_t i = 0; i < table.size(); ++i) {
    index.add(table[i].id, table[i].label, encode_item(model, table.features(i)));
  }
  return index;
}

void CodeIndex::add(RecordId id, std::optional<ClassId> label, const Code& code) {
  const auto offset = codes_.size();
  codes_.resize(offset + bytes_per_item_);
  pack_code(code, sizes_, std::span<std::uint8_t>(codes_.data() + offset, bytes_per_item_));
  ids_.push_back(id);
  labels_.push_back(label);
}

void CodeIndex::set_codebook(std::vector<MatrixXd> codebook) {
  if (codebook.size() != sizes_.size()) throw ShapeError("codebook has the wrong number of sets");
  for (std::size_t m = 0; m < sizes_.size(); ++m) {
    if (codebook[m].cols() != sizes_[m]) {
      throw ShapeError("codebook set " + std::to_string(m) + " has " + std::to_string(codebook[m].cols()) +
                       " prototypes, codes expect " + std::to_string(sizes_[m]));
    }
    if (m > 0 && codebook[m].rows() != codebook[0].rows()) throw ShapeError("codebook sets differ in dimension");
  }
  codebook_ = std::move(codebook);
}

int CodeIndex::bits_per_item() const { return code_bits(sizes_); }

Code CodeIndex::code(std::size_t i) const { return unpack_code(packed(i), sizes_); }

std::span<const std::uint8_t> CodeIndex::packed(std::size_t i) const {
  return {codes_.data() + i * bytes_per_item_, bytes_per_item_};
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> distance_table(const VectorXd& z_q, const std::vector<MatrixXd>& codebook) {
  const auto slices = split_subvectors(z_q, static_cast<int>(codebook.size()));
  std::vector<std::vector<double>> table(codebook.size());
  for (std::size_t m = 0; m < codebook.size(); ++m) {
    const VectorXd u = l2_normalize(slices[m]);
    table[m].resize(static_cast<std::size_t>(codebook[m].cols()));
    for (Eigen::Index k = 0; k < codebook[m].cols(); ++k) {
      table[m][static_cast<std::size_t>(k)] = 1.0 - u.dot(l2_normalize(codebook[m].col(k)));
    }
  }
  return table;
}

std::vector<SearchHit> search(const VectorXd& z_q, const CodeIndex& index, std::size_t topk) {
  if (topk == 0) return {};
  if (index.empty()) throw ParameterError("search over an empty index");
  if (index.codebook().empty()) throw ShapeError("code index has no codebook attached");
  const auto table = distance_table(z_q, index.codebook());

  std::vector<SearchHit> hits(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const Code code = index.code(i);
    double d = 0.0;
    for (std::size_t m = 0; m < code.size(); ++m) d += table[m][static_cast<std::size_t>(code[m])];
    hits[i] = {index.id(i), d, i};
  }
  const auto by_distance = [](const SearchHit& a, const SearchHit& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  };
  if (topk < hits.size()) {
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(topk), hits.end(), by_distance);
    hits.resize(topk);
  } else {
    std::sort(hits.begin(), hits.end(), by_distance);
  }
  return hits;
}

double average_precision(const std::vector<bool>& ranked_relevance) {
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < ranked_relevance.size(); ++r) {
    if (!ranked_relevance[r]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

double mean_average_precision(const std::vector<Query>& queries, const CodeIndex& index) {
  if (queries.empty()) throw ParameterError("mAP needs at least one query");
  double total = 0.0;
  for (const auto& q : queries) {
    const auto ranking = search(q.z, index, index.size());
    std::vector<bool> relevant(ranking.size());
    for (std::size_t r = 0; r < ranking.size(); ++r) {
      const auto label = index.label(ranking[r].row);
      relevant[r] = label && *label == q.label;
    }
    total += average_precision(relevant);
  }
  return total / static_cast<double>(queries.size());
}

// ---------------------------------------------------------------------------

void save_codes(const CodeIndex& index, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  io::write_magic(out, kCodeMagic);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(index.size()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(index.num_sets()));
  for (int k : index.sizes()) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(k));
  for (std::size_t i = 0; i < index.size(); ++i) {
    io::write_le<std::int64_t>(out, index.id(i));
    const auto label = index.label(i);
    io::write_le<std::int32_t>(out, label ? *label : -1);
    const auto bytes = index.packed(i);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

CodeIndex load_codes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  if (!io::read_magic(in, kCodeMagic)) throw FormatError(path.string() + ": not a CECD code file");
  const auto n = io::read_le<std::uint32_t>(in, "item count");
  const auto num_sets = io::read_le<std::uint32_t>(in, "set count");
  if (num_sets == 0 || num_sets > (1u << 20)) throw FormatError(path.string() + ": bad set count");
  std::vector<int> sizes;
  for (std::uint32_t m = 0; m < num_sets; ++m) {
    const auto k = io::read_le<std::uint32_t>(in, "meta-class count");
    if (k == 0 || k > (1u << 30)) throw FormatError(path.string() + ": bad meta-class count");
    sizes.push_back(static_cast<int>(k));
  }
  CodeIndex index(sizes);
  std::vector<std::uint8_t> buf(index.bytes_per_item());
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto id = io::read_le<std::int64_t>(in, "item id");
    const auto label = io::read_le<std::int32_t>(in, "item label");
    if (label < -1) throw FormatError(path.string() + ": bad label in record " + std::to_string(i));
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw FormatError(path.string() + ": truncated code in record " + std::to_string(i));
    }
    try {
      index.add(id, label < 0 ? std::nullopt : std::optional<ClassId>(label), unpack_code(buf, sizes));
    } catch (const LookupError& e) {
      throw FormatError(path.string() + ": record " + std::to_string(i) + ": " + e.what());
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
  return index;
}

}  // namespace combemb
