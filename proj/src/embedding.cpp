#include "combemb/embedding.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <string>

#include "combemb/binary_io.hpp"
#include "combemb/error.hpp"
#include "combemb/rng.hpp"

namespace combemb {

namespace {

constexpr char kModelMagic[5] = "CEMB";

MatrixXd xavier(int rows, int cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return m;
}

// Row-major f32 for weights and biases, column-major for prototypes.
void write_row_major(std::ostream& out, const MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) io::write_le<float>(out, static_cast<float>(m(i, j)));
  }
}

void write_col_major(std::ostream& out, const MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) io::write_le<float>(out, static_cast<float>(m(i, j)));
  }
}

MatrixXd read_row_major(std::istream& in, int rows, int cols, const char* what) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = io::read_le<float>(in, what);
  }
  return m;
}

MatrixXd read_col_major(std::istream& in, int rows, int cols, const char* what) {
  MatrixXd m(rows, cols);
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) m(i, j) = io::read_le<float>(in, what);
  }
  return m;
}

}  // namespace

void Hyperparams::validate() const {
  if (!(lambda > 0)) throw ParameterError("lambda must be > 0");
  if (!(tau > 0)) throw ParameterError("tau must be > 0");
  if (!(gamma > -1.0 && gamma <= 1.0)) throw ParameterError("gamma must lie in (-1, 1]");
  if (!(alpha >= 0)) throw ParameterError("alpha must be >= 0");
  if (!(beta >= 0)) throw ParameterError("beta must be >= 0");
}

void ModelShape::validate() const {
  if (input_dim < 1 || hidden < 1 || sub_dim < 1) {
    throw ParameterError("input_dim, hidden and sub_dim must be positive");
  }
  if (meta_sizes.empty()) throw ParameterError("need at least one meta-class set");
  for (int k : meta_sizes) {
    if (k < 1) throw ParameterError("every meta-class set needs K_m >= 1");
  }
}

Parameters Parameters::zeros_like() const {
  Parameters z = *this;
  z.set_zero();
  return z;
}

void Parameters::set_zero() {
  visit([](std::string_view, MatrixXd& m) { m.setZero(); });
}

bool Parameters::all_finite() const {
  bool ok = true;
  visit([&ok](std::string_view, const MatrixXd& m) { ok = ok && m.allFinite(); });
  return ok;
}

bool operator==(const Parameters& a, const Parameters& b) {
  std::vector<const MatrixXd*> lhs, rhs;
  a.visit([&lhs](std::string_view, const MatrixXd& m) { lhs.push_back(&m); });
  b.visit([&rhs](std::string_view, const MatrixXd& m) { rhs.push_back(&m); });
  if (lhs.size() != rhs.size()) return false;
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    if (lhs[i]->rows() != rhs[i]->rows() || lhs[i]->cols() != rhs[i]->cols()) return false;
    if (*lhs[i] != *rhs[i]) return false;
  }
  return true;
}

void Model::normalize_prototypes() {
  for (auto& theta : params.prototypes) {
    for (Eigen::Index k = 0; k < theta.cols(); ++k) {
      const double n = theta.col(k).norm();
      if (n < kMinNorm) throw NormalizationError("prototype column collapsed to zero");
      theta.col(k) /= n;
    }
  }
}

Model init_model(const ModelShape& shape, const Hyperparams& hyper, std::uint64_t seed) {
  shape.validate();
  hyper.validate();
  auto rng = make_rng(seed, kStreamInit);
  const int d1 = shape.embed_dim();

  Model model;
  model.shape = shape;
  model.hyper = hyper;
  auto& p = model.params;
  p.enc_w1 = xavier(shape.hidden, shape.input_dim, rng);
  p.enc_b1 = MatrixXd::Zero(shape.hidden, 1);
  p.enc_w2 = xavier(d1, shape.hidden, rng);
  p.enc_b2 = MatrixXd::Zero(d1, 1);

  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int k_m : shape.meta_sizes) {
    MatrixXd theta(shape.sub_dim, k_m);
    for (int j = 0; j < k_m; ++j) {
      for (int i = 0; i < shape.sub_dim; ++i) theta(i, j) = gauss(rng);
    }
    p.prototypes.push_back(std::move(theta));
  }
  p.head_w1 = xavier(d1, d1, rng);
  p.head_b1 = MatrixXd::Zero(d1, 1);
  p.head_w2 = xavier(d1, d1, rng);
  p.head_b2 = MatrixXd::Zero(d1, 1);
  model.normalize_prototypes();
  return model;
}

VectorXd l2_normalize(const VectorXd& v) {
  const double n = v.norm();
  if (!(n >= kMinNorm)) throw NormalizationError("cannot normalize a vector of norm < 1e-12");
  return v / n;
}

VectorXd l2_normalize_backward(const VectorXd& unit, double norm, const VectorXd& grad_out) {
  return (grad_out - unit * unit.dot(grad_out)) / norm;
}

// ---------------------------------------------------------------------------

EncoderCache encoder_forward(const Parameters& params, const VectorXd& x) {
  if (x.size() != params.enc_w1.cols()) {
    throw ShapeError("encoder expects input dimension " + std::to_string(params.enc_w1.cols()) +
                     ", got " + std::to_string(x.size()));
  }
  EncoderCache c;
  c.x = x;
  c.hidden = (params.enc_w1 * x + params.enc_b1.col(0)).array().tanh().matrix();
  c.z = params.enc_w2 * c.hidden + params.enc_b2.col(0);
  return c;
}

void encoder_backward(const Parameters& params, const EncoderCache& cache, const VectorXd& grad_z,
                      Parameters& grads) {
  grads.enc_w2.noalias() += grad_z * cache.hidden.transpose();
  grads.enc_b2.col(0) += grad_z;
  const VectorXd grad_hidden = params.enc_w2.transpose() * grad_z;
  const VectorXd grad_pre =
      grad_hidden.array() * (1.0 - cache.hidden.array().square());
  grads.enc_w1.noalias() += grad_pre * cache.x.transpose();
  grads.enc_b1.col(0) += grad_pre;
}

VectorXd encode(const Model& model, const VectorXd& x) { return encoder_forward(model.params, x).z; }

std::vector<VectorXd> split_subvectors(const VectorXd& z, int num_sets) {
  if (num_sets < 1 || z.size() % num_sets != 0) {
    throw ShapeError("embedding of size " + std::to_string(z.size()) + " does not split into " +
                     std::to_string(num_sets) + " equal subvectors");
  }
  const Eigen::Index d2 = z.size() / num_sets;
  std::vector<VectorXd> out;
  out.reserve(static_cast<std::size_t>(num_sets));
  for (int m = 0; m < num_sets; ++m) out.emplace_back(z.segment(m * d2, d2));
  return out;
}

// ---------------------------------------------------------------------------

SoftAssignCache soft_assign_forward(const VectorXd& z_m, const MatrixXd& prototypes, double lambda) {
  if (prototypes.cols() < 1) throw ShapeError("soft assignment needs at least one prototype");
  if (z_m.size() != prototypes.rows()) {
    throw ShapeError("subvector dimension " + std::to_string(z_m.size()) +
                     " does not match prototype dimension " + std::to_string(prototypes.rows()));
  }
  SoftAssignCache c;
  c.z_norm = z_m.norm();
  c.unit_z = l2_normalize(z_m);
  c.proto_norms = prototypes.colwise().norm().transpose();
  if (c.proto_norms.minCoeff() < kMinNorm) throw NormalizationError("zero-norm prototype");
  c.unit_protos = prototypes * c.proto_norms.cwiseInverse().asDiagonal();

  const VectorXd scores = lambda * (c.unit_protos.transpose() * c.unit_z);
  const double top = scores.maxCoeff();
  c.weights = (scores.array() - top).exp().matrix();
  c.weights /= c.weights.sum();
  c.out = c.unit_protos * c.weights;
  return c;
}

VectorXd soft_assign_backward(const SoftAssignCache& c, double lambda, const VectorXd& grad_out,
                              MatrixXd& grad_prototypes) {
  // out = P w, w = softmax(lambda * P^T u)
  MatrixXd grad_unit = grad_out * c.weights.transpose();
  const VectorXd grad_w = c.unit_protos.transpose() * grad_out;
  const VectorXd grad_s =
      ((grad_w.array() - c.weights.dot(grad_w)) * c.weights.array()).matrix();
  grad_unit.noalias() += lambda * c.unit_z * grad_s.transpose();
  const VectorXd grad_u = lambda * (c.unit_protos * grad_s);

  for (Eigen::Index k = 0; k < c.unit_protos.cols(); ++k) {
    grad_prototypes.col(k) +=
        l2_normalize_backward(c.unit_protos.col(k), c.proto_norms[k], grad_unit.col(k));
  }
  return l2_normalize_backward(c.unit_z, c.z_norm, grad_u);
}

VectorXd soft_assign(const VectorXd& z_m, const MatrixXd& prototypes, double lambda) {
  return soft_assign_forward(z_m, prototypes, lambda).out;
}

CombEmbedCache comb_embed_forward(const VectorXd& z, const std::vector<MatrixXd>& prototypes,
                                  double lambda) {
  const int num_sets = static_cast<int>(prototypes.size());
  const auto slices = split_subvectors(z, num_sets);
  CombEmbedCache c;
  c.pi.resize(z.size());
  const Eigen::Index d2 = z.size() / num_sets;
  for (int m = 0; m < num_sets; ++m) {
    c.slices.push_back(soft_assign_forward(slices[static_cast<std::size_t>(m)],
                                           prototypes[static_cast<std::size_t>(m)], lambda));
    c.pi.segment(m * d2, d2) = c.slices.back().out;
  }
  return c;
}

VectorXd comb_embed_backward(const CombEmbedCache& cache, double lambda, const VectorXd& grad_pi,
                             std::vector<MatrixXd>& grad_prototypes) {
  const auto num_sets = static_cast<Eigen::Index>(cache.slices.size());
  const Eigen::Index d2 = cache.pi.size() / num_sets;
  VectorXd grad_z(cache.pi.size());
  for (Eigen::Index m = 0; m < num_sets; ++m) {
    grad_z.segment(m * d2, d2) =
        soft_assign_backward(cache.slices[static_cast<std::size_t>(m)], lambda,
                             grad_pi.segment(m * d2, d2), grad_prototypes[static_cast<std::size_t>(m)]);
  }
  return grad_z;
}

VectorXd comb_embed(const VectorXd& z, const std::vector<MatrixXd>& prototypes, double lambda) {
  return comb_embed_forward(z, prototypes, lambda).pi;
}

int nearest_prototype(const VectorXd& z_m, const MatrixXd& prototypes) {
  if (z_m.size() != prototypes.rows()) throw ShapeError("subvector/prototype dimension mismatch");
  const VectorXd u = l2_normalize(z_m);
  int best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < prototypes.cols(); ++k) {
    const double sim = u.dot(prototypes.col(k)) / prototypes.col(k).norm();
    if (sim > best_sim) {
      best_sim = sim;
      best = static_cast<int>(k);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------

HeadCache head_forward(const Parameters& params, const VectorXd& in) {
  HeadCache c;
  c.in = in;
  c.hidden = (params.head_w1 * in + params.head_b1.col(0)).array().tanh().matrix();
  c.out = params.head_w2 * c.hidden + params.head_b2.col(0);
  return c;
}

VectorXd head_backward(const Parameters& params, const HeadCache& cache, const VectorXd& grad_out,
                       Parameters& grads) {
  grads.head_w2.noalias() += grad_out * cache.hidden.transpose();
  grads.head_b2.col(0) += grad_out;
  const VectorXd grad_hidden = params.head_w2.transpose() * grad_out;
  const VectorXd grad_pre = grad_hidden.array() * (1.0 - cache.hidden.array().square());
  grads.head_w1.noalias() += grad_pre * cache.in.transpose();
  grads.head_b1.col(0) += grad_pre;
  return params.head_w1.transpose() * grad_pre;
}

// ---------------------------------------------------------------------------

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto& s = model.shape;
  const auto& p = model.params;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  io::write_magic(out, kModelMagic);
  for (int v : {s.input_dim, s.hidden, s.embed_dim(), s.sub_dim, s.num_sets()}) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  for (int k : s.meta_sizes) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(k));

  write_row_major(out, p.enc_w1);
  write_row_major(out, p.enc_b1);
  write_row_major(out, p.enc_w2);
  write_row_major(out, p.enc_b2);
  for (const auto& theta : p.prototypes) write_col_major(out, theta);
  write_row_major(out, p.head_w1);
  write_row_major(out, p.head_b1);
  write_row_major(out, p.head_w2);
  write_row_major(out, p.head_b2);

  const auto& h = model.hyper;
  for (double v : {h.lambda, h.tau, h.gamma, h.alpha, h.beta}) io::write_le<float>(out, static_cast<float>(v));
  if (!out) throw FormatError("write failed for " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  if (!io::read_magic(in, kModelMagic)) throw FormatError(path.string() + ": not a CEMB model file");

  auto u32 = [&in](const char* what) { return static_cast<int>(io::read_le<std::uint32_t>(in, what)); };
  Model model;
  auto& s = model.shape;
  s.input_dim = u32("input dimension");
  s.hidden = u32("hidden width");
  const int d1 = u32("embedding dimension");
  s.sub_dim = u32("subvector dimension");
  const int num_sets = u32("number of meta-class sets");
  if (num_sets < 1 || num_sets > (1 << 20)) throw FormatError(path.string() + ": bad meta-class set count");
  for (int m = 0; m < num_sets; ++m) s.meta_sizes.push_back(u32("meta-class count"));
  try {
    s.validate();
  } catch (const ParameterError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (d1 != s.embed_dim()) {
    throw FormatError(path.string() + ": embedding dimension " + std::to_string(d1) + " != " +
                      std::to_string(s.sub_dim) + " x " + std::to_string(num_sets));
  }

  auto& p = model.params;
  p.enc_w1 = read_row_major(in, s.hidden, s.input_dim, "encoder weights");
  p.enc_b1 = read_row_major(in, s.hidden, 1, "encoder bias");
  p.enc_w2 = read_row_major(in, d1, s.hidden, "encoder weights");
  p.enc_b2 = read_row_major(in, d1, 1, "encoder bias");
  for (int k : s.meta_sizes) p.prototypes.push_back(read_col_major(in, s.sub_dim, k, "prototypes"));
  p.head_w1 = read_row_major(in, d1, d1, "head weights");
  p.head_b1 = read_row_major(in, d1, 1, "head bias");
  p.head_w2 = read_row_major(in, d1, d1, "head weights");
  p.head_b2 = read_row_major(in, d1, 1, "head bias");

  auto& h = model.hyper;
  h.lambda = io::read_le<float>(in, "lambda");
  h.tau = io::read_le<float>(in, "tau");
  h.gamma = io::read_le<float>(in, "gamma");
  h.alpha = io::read_le<float>(in, "alpha");
  h.beta = io::read_le<float>(in, "beta");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
  if (!p.all_finite()) throw FormatError(path.string() + ": non-finite parameters");
  return model;
}

}  // namespace combemb
