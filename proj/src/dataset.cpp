#include "combemb/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "combemb/binary_io.hpp"
#include "combemb/error.hpp"
#include "combemb/rng.hpp"

namespace combemb {

namespace {

constexpr char kTableMagic[5] = "CEFT";
constexpr int kUnlabeled = -1;

std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars rejects a leading '+'.
    if (s.front() == '+') s.remove_prefix(1);
  }
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

[[noreturn]] void line_error(const std::filesystem::path& path, std::size_t line,
                             const std::string& msg) {
  throw FormatError(path.string() + ":" + std::to_string(line) + ": " + msg);
}

FeatureTable load_text(std::istream& in, const std::filesystem::path& path) {
  std::string line;
  if (!std::getline(in, line)) line_error(path, 1, "missing header");
  const auto header = split_fields(trim(line), ',');
  if (header.size() < 3 || trim(header[0]) != "id" || trim(header[1]) != "label") {
    line_error(path, 1, "header must be id,label,f0,...,f{d-1}");
  }
  const std::size_t dim = header.size() - 2;
  for (std::size_t j = 0; j < dim; ++j) {
    if (trim(header[j + 2]) != "f" + std::to_string(j)) {
      line_error(path, 1, "expected column f" + std::to_string(j));
    }
  }

  FeatureTable table(dim);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(trim(line), ',');
    if (fields.size() != dim + 2) {
      line_error(path, lineno,
                 "row has " + std::to_string(fields.size() >= 2 ? fields.size() - 2 : 0) +
                     " features, table dimension is " + std::to_string(dim));
    }
    FeatureRecord rec;
    int label = 0;
    if (!parse_number(fields[0], rec.id)) line_error(path, lineno, "bad id");
    if (!parse_number(fields[1], label) || label < kUnlabeled) line_error(path, lineno, "bad label");
    if (label != kUnlabeled) rec.label = label;
    rec.features.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      if (!parse_number(fields[j + 2], rec.features[j])) {
        line_error(path, lineno, "bad feature value in column f" + std::to_string(j));
      }
    }
    if (table.find(rec.id)) line_error(path, lineno, "duplicate id " + std::to_string(rec.id));
    table.add(std::move(rec));
  }
  return table;
}

FeatureTable load_binary(std::istream& in, const std::filesystem::path& path) {
  const auto n = io::read_le<std::uint32_t>(in, "record count");
  const auto dim = io::read_le<std::uint32_t>(in, "dimension");
  if (dim == 0) throw FormatError(path.string() + ": zero dimension");
  FeatureTable table(dim);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto offset = static_cast<long long>(in.tellg());
    FeatureRecord rec;
    rec.id = io::read_le<std::int64_t>(in, "record id");
    const auto label = io::read_le<std::int32_t>(in, "record label");
    if (label < kUnlabeled) {
      throw FormatError(path.string() + ": bad label in record " + std::to_string(i) +
                        " at offset " + std::to_string(offset));
    }
    if (label != kUnlabeled) rec.label = label;
    rec.features.resize(dim);
    for (auto& f : rec.features) f = io::read_le<float>(in, "feature");
    if (table.find(rec.id)) {
      throw FormatError(path.string() + ": duplicate id " + std::to_string(rec.id) +
                        " in record " + std::to_string(i) + " at offset " + std::to_string(offset));
    }
    table.add(std::move(rec));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": trailing bytes after " + std::to_string(n) + " records");
  }
  return table;
}

void check_synthetic(const SyntheticParams& p) {
  if (p.n_classes < 2) throw ParameterError("n_classes must be >= 2");
  if (p.dim < 2) throw ParameterError("dim must be >= 2");
  if (p.n_per_class < 1) throw ParameterError("n_per_class must be >= 1");
  if (!(p.separation > 0)) throw ParameterError("separation must be > 0");
  if (!(p.noise_sigma > 0)) throw ParameterError("noise_sigma must be > 0");
}

FeatureTable sample_blobs(const SyntheticParams& p, const Eigen::MatrixXd& means, int n_per_class,
                          RecordId first_id, std::uint64_t stream) {
  auto rng = make_rng(p.seed, stream);
  std::normal_distribution<double> noise(0.0, p.noise_sigma);
  FeatureTable table(static_cast<std::size_t>(p.dim));
  RecordId id = first_id;
  for (int c = 0; c < p.n_classes; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      FeatureRecord rec;
      rec.id = id++;
      rec.label = c;
      rec.features.resize(static_cast<std::size_t>(p.dim));
      for (int j = 0; j < p.dim; ++j) {
        rec.features[static_cast<std::size_t>(j)] = static_cast<float>(means(c, j) + noise(rng));
      }
      table.add(std::move(rec));
    }
  }
  return table;
}

}  // namespace

// ---------------------------------------------------------------------------

void FeatureTable::add(FeatureRecord record) {
  if (record.features.size() != dim_) {
    throw ShapeError("record " + std::to_string(record.id) + " has " +
                     std::to_string(record.features.size()) + " features, table dimension is " +
                     std::to_string(dim_));
  }
  if (index_.count(record.id)) throw DataError("duplicate record id " + std::to_string(record.id));
  index_.emplace(record.id, records_.size());
  records_.push_back(std::move(record));
}

std::optional<std::size_t> FeatureTable::find(RecordId id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<ClassId> FeatureTable::classes() const {
  std::set<ClassId> s;
  for (const auto& r : records_) {
    if (r.label) s.insert(*r.label);
  }
  return {s.begin(), s.end()};
}

bool FeatureTable::fully_labeled() const {
  return std::all_of(records_.begin(), records_.end(), [](const auto& r) { return r.label.has_value(); });
}

Eigen::VectorXd FeatureTable::features(std::size_t i) const {
  const auto& f = records_[i].features;
  Eigen::VectorXd v(static_cast<Eigen::Index>(f.size()));
  for (std::size_t j = 0; j < f.size(); ++j) v[static_cast<Eigen::Index>(j)] = f[j];
  return v;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd synthetic_class_means(const SyntheticParams& p) {
  check_synthetic(p);
  auto rng = make_rng(p.seed, kStreamMeans);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Uniform directions on a sphere of radius `separation`, then pairwise
  // repulsion until every pair is at least `separation` apart.
  Eigen::MatrixXd means(p.n_classes, p.dim);
  for (int c = 0; c < p.n_classes; ++c) {
    Eigen::VectorXd v(p.dim);
    do {
      for (int j = 0; j < p.dim; ++j) v[j] = gauss(rng);
    } while (v.norm() < 1e-12);
    means.row(c) = (p.separation * v.normalized()).transpose();
  }

  const double target = p.separation * (1.0 + 1e-6);
  for (int round = 0; round < 10000; ++round) {
    bool moved = false;
    for (int a = 0; a < p.n_classes; ++a) {
      for (int b = a + 1; b < p.n_classes; ++b) {
        Eigen::VectorXd diff = (means.row(b) - means.row(a)).transpose();
        const double dist = diff.norm();
        if (dist >= p.separation) continue;
        Eigen::VectorXd dir(p.dim);
        if (dist > 1e-12) {
          dir = diff / dist;
        } else {
          dir.setZero();
          dir[0] = 1.0;
        }
        const double push = 0.5 * (target - dist);
        means.row(a) -= push * dir.transpose();
        means.row(b) += push * dir.transpose();
        moved = true;
      }
    }
    if (!moved) return means;
  }
  throw NumericError("could not place class means at the requested separation");
}

FeatureTable generate_synthetic(const SyntheticParams& params) {
  const auto means = synthetic_class_means(params);
  return sample_blobs(params, means, params.n_per_class, 0, kStreamNoise);
}

FeatureTable generate_synthetic_holdout(const SyntheticParams& params, int n_per_class) {
  if (n_per_class < 1) throw ParameterError("holdout n_per_class must be >= 1");
  const auto means = synthetic_class_means(params);
  const RecordId first = static_cast<RecordId>(params.n_classes) * params.n_per_class;
  return sample_blobs(params, means, n_per_class, first, derive_seed(kStreamNoise, 1));
}

// ---------------------------------------------------------------------------

FeatureTable load_feature_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  if (io::read_magic(in, kTableMagic)) return load_binary(in, path);
  in.clear();
  in.seekg(0);
  return load_text(in, path);
}

void save_feature_table(const FeatureTable& table, const std::filesystem::path& path,
                        TableFormat format) {
  if (format == TableFormat::kAuto) {
    const auto ext = path.extension().string();
    format = (ext == ".csv" || ext == ".txt") ? TableFormat::kText : TableFormat::kBinary;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());

  if (format == TableFormat::kText) {
    out << "id,label";
    for (std::size_t j = 0; j < table.dim(); ++j) out << ",f" << j;
    out << '\n';
    for (const auto& r : table.records()) {
      out << r.id << ',' << (r.label ? *r.label : kUnlabeled);
      for (float f : r.features) out << ',' << format_float(f);
      out << '\n';
    }
  } else {
    io::write_magic(out, kTableMagic);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.size()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim()));
    for (const auto& r : table.records()) {
      io::write_le<std::int64_t>(out, r.id);
      io::write_le<std::int32_t>(out, r.label ? *r.label : kUnlabeled);
      for (float f : r.features) io::write_le<float>(out, f);
    }
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------

bool OpenSetSplit::is_seen(ClassId c) const {
  return std::binary_search(seen_classes.begin(), seen_classes.end(), c);
}

bool OpenSetSplit::is_labeled(RecordId id) const {
  return std::binary_search(labeled_ids.begin(), labeled_ids.end(), id);
}

OpenSetSplit make_open_set_split(const FeatureTable& table, double seen_fraction,
                                 double labeled_fraction, std::uint64_t seed) {
  if (!(seen_fraction > 0.0 && seen_fraction < 1.0)) {
    throw ParameterError("seen_fraction must lie in (0, 1)");
  }
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
    throw ParameterError("labeled_fraction must lie in (0, 1]");
  }
  if (!table.fully_labeled()) throw DataError("open-set split needs a fully labeled table");

  const auto classes = table.classes();
  const auto n_seen =
      static_cast<std::size_t>(std::floor(seen_fraction * static_cast<double>(classes.size())));
  if (n_seen == 0) throw ParameterError("seen_fraction leaves no seen classes");

  OpenSetSplit split;
  split.seen_classes.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(n_seen));
  split.novel_classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(n_seen), classes.end());

  auto rng = make_rng(seed, kStreamSplit);
  for (ClassId c : split.seen_classes) {
    std::vector<RecordId> ids;
    for (const auto& r : table.records()) {
      if (*r.label == c) ids.push_back(r.id);
    }
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_labeled =
        static_cast<std::size_t>(std::floor(labeled_fraction * static_cast<double>(ids.size())));
    split.labeled_ids.insert(split.labeled_ids.end(), ids.begin(),
                             ids.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  }
  std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
  for (const auto& r : table.records()) {
    if (!split.is_labeled(r.id)) split.unlabeled_ids.push_back(r.id);
  }
  std::sort(split.unlabeled_ids.begin(), split.unlabeled_ids.end());
  return split;
}

FeatureTable permute_class_labels(const FeatureTable& table, std::uint64_t seed) {
  const auto classes = table.classes();
  auto shuffled = classes;
  auto rng = make_rng(seed, kStreamPermute);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::unordered_map<ClassId, ClassId> relabel;
  for (std::size_t i = 0; i < classes.size(); ++i) relabel[classes[i]] = shuffled[i];

  FeatureTable out(table.dim());
  for (auto rec : table.records()) {
    if (rec.label) rec.label = relabel.at(*rec.label);
    out.add(std::move(rec));
  }
  return out;
}

void save_split(const OpenSetSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  auto line = [&out](const char* key, const auto& values) {
    out << key;
    for (const auto& v : values) out << ' ' << v;
    out << '\n';
  };
  line("seen", split.seen_classes);
  line("novel", split.novel_classes);
  line("labeled", split.labeled_ids);
  line("unlabeled", split.unlabeled_ids);
  if (!out) throw FormatError("write failed for " + path.string());
}

OpenSetSplit load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  OpenSetSplit split;
  const char* keys[] = {"seen", "novel", "labeled", "unlabeled"};
  std::string line;
  for (std::size_t k = 0; k < 4; ++k) {
    if (!std::getline(in, line)) line_error(path, k + 1, std::string("missing '") + keys[k] + "' line");
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key != keys[k]) line_error(path, k + 1, std::string("expected '") + keys[k] + "'");
    std::string tok;
    while (ss >> tok) {
      long long v = 0;
      if (!parse_number(std::string_view(tok), v)) line_error(path, k + 1, "bad integer '" + tok + "'");
      switch (k) {
        case 0: split.seen_classes.push_back(static_cast<ClassId>(v)); break;
        case 1: split.novel_classes.push_back(static_cast<ClassId>(v)); break;
        case 2: split.labeled_ids.push_back(v); break;
        default: split.unlabeled_ids.push_back(v); break;
      }
    }
  }
  auto sorted = [](const auto& v) { return std::is_sorted(v.begin(), v.end()); };
  if (!sorted(split.seen_classes) || !sorted(split.novel_classes) || !sorted(split.labeled_ids) ||
      !sorted(split.unlabeled_ids)) {
    throw FormatError(path.string() + ": split lists must be sorted");
  }
  return split;
}

}  // namespace combemb
