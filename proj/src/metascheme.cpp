#include "combemb/metascheme.hpp"

#include <algorithm>
#include <optional>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "combemb/embedding.hpp"
#include "combemb/error.hpp"
#include "combemb/kmeans.hpp"
#include "combemb/rng.hpp"

namespace combemb {

namespace {

Eigen::MatrixXd normalize_rows(Eigen::MatrixXd m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n < kMinNorm) throw NormalizationError("class embedding row collapsed to zero");
    m.row(i) /= n;
  }
  return m;
}

// Full-batch gradient descent on a cosine-logit softmax classifier.
Eigen::MatrixXd pretrain_classifier(const Eigen::MatrixXd& feats, const std::vector<int>& targets,
                                    int num_classes, const PretrainOptions& opt) {
  const Eigen::Index n = feats.rows();
  const Eigen::Index dim = feats.cols();
  Eigen::MatrixXd unit(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) unit.row(i) = l2_normalize(feats.row(i).transpose()).transpose();

  auto rng = make_rng(opt.seed, kStreamPretrain);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd w(num_classes, dim);
  for (Eigen::Index c = 0; c < w.rows(); ++c) {
    for (Eigen::Index j = 0; j < dim; ++j) w(c, j) = gauss(rng);
  }
  w = normalize_rows(w);

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    // w rows are unit length here, so d(logit)/d(w_c) needs the projection
    // of the normalization Jacobian only.
    const Eigen::MatrixXd logits = unit * w.transpose() / opt.temperature;
    Eigen::MatrixXd grad_logits(n, num_classes);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::RowVectorXd row = logits.row(i).array() - logits.row(i).maxCoeff();
      Eigen::RowVectorXd p = row.array().exp();
      p /= p.sum();
      p[targets[static_cast<std::size_t>(i)]] -= 1.0;
      grad_logits.row(i) = p / static_cast<double>(n);
    }
    const Eigen::MatrixXd grad_unit_w = grad_logits.transpose() * unit / opt.temperature;
    Eigen::MatrixXd grad_w(num_classes, dim);
    for (Eigen::Index c = 0; c < w.rows(); ++c) {
      const Eigen::RowVectorXd g = grad_unit_w.row(c);
      grad_w.row(c) = g - w.row(c) * w.row(c).dot(g);
    }
    w = normalize_rows(w - opt.learning_rate * grad_w);
  }
  return w;
}

std::vector<int> sample_subspace(int dim, int q, std::uint64_t seed, int set, int attempt) {
  auto rng = make_rng(seed, kStreamSubspace, static_cast<std::uint64_t>(set) * 1024 + attempt);
  std::vector<int> coords(static_cast<std::size_t>(dim));
  std::iota(coords.begin(), coords.end(), 0);
  // Partial Fisher-Yates: the first q entries are a uniform q-subset.
  for (int i = 0; i < q; ++i) {
    std::uniform_int_distribution<int> pick(i, dim - 1);
    std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(pick(rng))]);
  }
  coords.resize(static_cast<std::size_t>(q));
  std::sort(coords.begin(), coords.end());
  return coords;
}

}  // namespace

FeatureMap identity_feature_map() {
  return [](const Eigen::VectorXd& x) { return x; };
}

ClassEmbeddingMatrix class_embeddings(const FeatureTable& table, const OpenSetSplit& split,
                                      const FeatureMap& encoder, ClassEmbeddingMode mode,
                                      const PretrainOptions& pretrain) {
  if (split.seen_classes.empty()) throw DataError("split has no seen classes");
  std::vector<Eigen::VectorXd> feats;
  std::vector<int> targets;
  std::vector<int> counts(split.seen_classes.size(), 0);
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& rec = table[i];
    if (!rec.label || !split.is_labeled(rec.id)) continue;
    const auto it = std::lower_bound(split.seen_classes.begin(), split.seen_classes.end(), *rec.label);
    if (it == split.seen_classes.end() || *it != *rec.label) continue;
    const auto rank = static_cast<int>(it - split.seen_classes.begin());
    feats.push_back(encoder(table.features(i)));
    targets.push_back(rank);
    ++counts[static_cast<std::size_t>(rank)];
  }
  for (std::size_t r = 0; r < counts.size(); ++r) {
    if (counts[r] == 0) {
      throw DataError("seen class " + std::to_string(split.seen_classes[r]) + " has no labeled examples");
    }
  }

  const auto dim = feats.front().size();
  Eigen::MatrixXd stacked(static_cast<Eigen::Index>(feats.size()), dim);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (feats[i].size() != dim) throw ShapeError("feature map returned inconsistent dimensions");
    stacked.row(static_cast<Eigen::Index>(i)) = feats[i].transpose();
  }

  ClassEmbeddingMatrix out;
  out.classes = split.seen_classes;
  const auto num_classes = static_cast<int>(split.seen_classes.size());
  if (mode == ClassEmbeddingMode::kClassMeans) {
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(num_classes, dim);
    for (std::size_t i = 0; i < targets.size(); ++i) sums.row(targets[i]) += stacked.row(static_cast<Eigen::Index>(i));
    for (int c = 0; c < num_classes; ++c) sums.row(c) /= counts[static_cast<std::size_t>(c)];
    out.rows = normalize_rows(sums);
  } else {
    out.rows = pretrain_classifier(stacked, targets, num_classes, pretrain);
  }
  return out;
}

// ---------------------------------------------------------------------------

MetaClassScheme::MetaClassScheme(std::vector<ClassId> classes, std::vector<int> sizes,
                                 std::vector<std::vector<int>> assignment,
                                 std::vector<std::vector<int>> subspace_dims, std::uint64_t seed)
    : classes_(std::move(classes)),
      sizes_(std::move(sizes)),
      assignment_(std::move(assignment)),
      subspace_dims_(std::move(subspace_dims)),
      seed_(seed) {
  if (!std::is_sorted(classes_.begin(), classes_.end()) ||
      std::adjacent_find(classes_.begin(), classes_.end()) != classes_.end()) {
    throw ParameterError("scheme classes must be sorted and distinct");
  }
  if (assignment_.size() != sizes_.size() || subspace_dims_.size() != sizes_.size()) {
    throw ShapeError("scheme needs one assignment and one subspace per set");
  }
  for (std::size_t m = 0; m < sizes_.size(); ++m) {
    if (assignment_[m].size() != classes_.size()) throw ShapeError("assignment must cover every class");
    std::vector<int> used(static_cast<std::size_t>(std::max(sizes_[m], 0)), 0);
    for (int a : assignment_[m]) {
      if (a < 0 || a >= sizes_[m]) throw ParameterError("meta-class index out of range");
      ++used[static_cast<std::size_t>(a)];
    }
    if (std::find(used.begin(), used.end(), 0) != used.end()) {
      throw ParameterError("meta-class set " + std::to_string(m) + " has an empty meta-class");
    }
  }
}

bool MetaClassScheme::contains(ClassId c) const {
  return std::binary_search(classes_.begin(), classes_.end(), c);
}

int MetaClassScheme::rank_of(ClassId c) const {
  const auto it = std::lower_bound(classes_.begin(), classes_.end(), c);
  if (it == classes_.end() || *it != c) {
    throw LookupError("class " + std::to_string(c) + " is not a seen class of this scheme");
  }
  return static_cast<int>(it - classes_.begin());
}

int MetaClassScheme::meta_label(int m, ClassId c) const {
  if (m < 0 || m >= num_sets()) throw LookupError("meta-class set index " + std::to_string(m) + " out of range");
  return assignment_[static_cast<std::size_t>(m)][static_cast<std::size_t>(rank_of(c))];
}

std::vector<int> MetaClassScheme::meta_labels(ClassId c) const {
  const auto r = static_cast<std::size_t>(rank_of(c));
  std::vector<int> out;
  out.reserve(assignment_.size());
  for (const auto& a : assignment_) out.push_back(a[r]);
  return out;
}

MetaClassScheme build_scheme(const ClassEmbeddingMatrix& embs, const SchemeOptions& opt) {
  const auto n_classes = static_cast<int>(embs.rows.rows());
  const auto d1 = static_cast<int>(embs.rows.cols());
  if (n_classes != static_cast<int>(embs.classes.size())) throw ShapeError("embedding rows != class count");
  if (opt.num_sets < 1) throw ParameterError("need M >= 1 meta-class sets");
  if (opt.meta_classes < 1) throw ParameterError("need K_m >= 1");
  if (opt.meta_classes > n_classes) {
    throw ParameterError("K_m = " + std::to_string(opt.meta_classes) + " exceeds the " +
                         std::to_string(n_classes) + " seen classes");
  }
  const int q = opt.subspace_dim > 0 ? opt.subspace_dim : (d1 + 3) / 4;
  if (q > d1) throw ParameterError("subspace dimension Q exceeds embedding dimension");
  if (opt.restarts < 1 || opt.restarts > 256) throw ParameterError("k-means restarts must lie in [1, 256]");

  std::vector<std::vector<int>> assignment;
  std::vector<std::vector<int>> subspaces;
  for (int m = 0; m < opt.num_sets; ++m) {
    bool done = false;
    for (int attempt = 0; attempt < opt.max_attempts && !done; ++attempt) {
      auto coords = sample_subspace(d1, q, opt.seed, m, attempt);
      Eigen::MatrixXd projected(n_classes, q);
      for (int j = 0; j < q; ++j) projected.col(j) = embs.rows.col(coords[static_cast<std::size_t>(j)]);

      KMeansOptions km;
      km.k = opt.meta_classes;
      km.max_iter = opt.max_iter;
      km.rel_tol = opt.rel_tol;
      km.empty_policy = EmptyClusterPolicy::kReport;
      std::optional<KMeansResult> best;
      for (int r = 0; r < opt.restarts; ++r) {
        const auto stream = ((static_cast<std::uint64_t>(m) * 1024 + static_cast<std::uint64_t>(attempt)) << 8) |
                            static_cast<std::uint64_t>(r);
        km.seed = derive_seed(opt.seed, kStreamKmeans, stream);
        auto result = kmeans(projected, km);
        if (result.empty_cluster) continue;
        if (!best || result.inertia < best->inertia) best = std::move(result);
      }
      if (!best) continue;
      assignment.push_back(best->assignments);
      subspaces.push_back(std::move(coords));
      done = true;
    }
    if (!done) {
      throw NumericError("meta-class set " + std::to_string(m) + ": k-means produced an empty cluster in " +
                         std::to_string(opt.max_attempts) + " attempts");
    }
  }
  return MetaClassScheme(embs.classes, std::vector<int>(static_cast<std::size_t>(opt.num_sets), opt.meta_classes),
                         std::move(assignment), std::move(subspaces), opt.seed);
}

int bits_for(int k) {
  if (k < 1) throw ParameterError("meta-class count must be >= 1");
  int bits = 0;
  while ((1LL << bits) < k) ++bits;
  return bits;
}

int code_bits(const std::vector<int>& sizes) {
  int total = 0;
  for (int k : sizes) total += bits_for(k);
  return total;
}

int code_bits(const MetaClassScheme& scheme) { return code_bits(scheme.sizes()); }

// ---------------------------------------------------------------------------

void save_scheme(const MetaClassScheme& scheme, const std::filesystem::path& path) {
  const auto& classes = scheme.classes();
  for (std::size_t r = 0; r < classes.size(); ++r) {
    if (classes[r] != static_cast<ClassId>(r)) {
      throw ParameterError("scheme files require seen classes 0..C-1");
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << scheme.num_sets() << ' ' << scheme.subspace_dim() << ' ' << scheme.seed() << '\n';
  auto line = [&out](const std::vector<int>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << v[i];
    out << '\n';
  };
  line(scheme.sizes());
  for (const auto& a : scheme.assignment()) line(a);
  for (const auto& s : scheme.subspace_dims()) line(s);
  if (!out) throw FormatError("write failed for " + path.string());
}

MetaClassScheme load_scheme(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::size_t lineno = 0;
  auto next_ints = [&](const char* what) {
    std::string line;
    ++lineno;
    if (!std::getline(in, line)) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": missing " + what);
    }
    std::istringstream ss(line);
    std::vector<long long> v;
    long long x = 0;
    while (ss >> x) v.push_back(x);
    if (!ss.eof()) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad integer in " + what);
    return v;
  };

  std::string first;
  ++lineno;
  if (!std::getline(in, first)) throw FormatError(path.string() + ":1: missing header");
  std::istringstream hs(first);
  long long num_sets = 0, q = 0;
  std::uint64_t seed = 0;
  if (!(hs >> num_sets >> q >> seed) || num_sets < 1) {
    throw FormatError(path.string() + ":1: header must be 'M Q seed'");
  }

  const auto sizes_ll = next_ints("meta-class counts");
  if (static_cast<long long>(sizes_ll.size()) != num_sets) {
    throw FormatError(path.string() + ":2: expected " + std::to_string(num_sets) + " meta-class counts");
  }
  std::vector<int> sizes(sizes_ll.begin(), sizes_ll.end());

  std::vector<std::vector<int>> assignment;
  std::size_t n_classes = 0;
  for (long long m = 0; m < num_sets; ++m) {
    const auto row = next_ints("meta-class assignment");
    if (m == 0) n_classes = row.size();
    if (row.size() != n_classes || n_classes == 0) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": assignment length mismatch");
    }
    assignment.emplace_back(row.begin(), row.end());
  }
  std::vector<std::vector<int>> subspaces;
  for (long long m = 0; m < num_sets; ++m) {
    const auto row = next_ints("subspace coordinates");
    if (static_cast<long long>(row.size()) != q) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(q) +
                        " subspace coordinates");
    }
    subspaces.emplace_back(row.begin(), row.end());
  }

  std::vector<ClassId> classes(n_classes);
  std::iota(classes.begin(), classes.end(), 0);
  try {
    return MetaClassScheme(std::move(classes), std::move(sizes), std::move(assignment), std::move(subspaces),
                           seed);
  } catch (const Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace combemb
