#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace combemb {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kMinNorm = 1e-12;

struct Hyperparams {
  double lambda = 10.0;  // soft-assignment scale
  double tau = 0.1;      // meta-classification temperature
  double gamma = 0.8;    // pseudo-positive cosine threshold
  double alpha = 1.0;    // weight of the pairwise similarity loss
  double beta = 1.0;     // weight of the consistency loss

  /// Throws ParameterError when a field is out of range.
  void validate() const;
};

struct ModelShape {
  int input_dim = 0;             // d
  int hidden = 0;                // encoder hidden width
  int sub_dim = 0;               // d2
  std::vector<int> meta_sizes;   // K_m, one per meta-class set

  int num_sets() const { return static_cast<int>(meta_sizes.size()); }
  int embed_dim() const { return sub_dim * num_sets(); }  // d1 = M * d2

  void validate() const;
  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Every trainable tensor. Biases are single-column matrices so the
/// optimizer and the gradient checker can treat all tensors uniformly.
/// The same struct holds gradients.
struct Parameters {
  MatrixXd enc_w1, enc_b1;            // hidden x d, hidden x 1
  MatrixXd enc_w2, enc_b2;            // d1 x hidden, d1 x 1
  std::vector<MatrixXd> prototypes;   // per set: d2 x K_m, columns are prototypes
  MatrixXd head_w1, head_b1;          // d1 x d1, d1 x 1
  MatrixXd head_w2, head_b2;          // d1 x d1, d1 x 1

  template <typename F>
  void visit(F&& f) {
    f("enc_w1", enc_w1);
    f("enc_b1", enc_b1);
    f("enc_w2", enc_w2);
    f("enc_b2", enc_b2);
    for (auto& p : prototypes) f("prototypes", p);
    f("head_w1", head_w1);
    f("head_b1", head_b1);
    f("head_w2", head_w2);
    f("head_b2", head_b2);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<Parameters*>(this)->visit([&f](std::string_view name, MatrixXd& m) {
      f(name, static_cast<const MatrixXd&>(m));
    });
  }

  Parameters zeros_like() const;
  void set_zero();
  bool all_finite() const;

  friend bool operator==(const Parameters& a, const Parameters& b);
};

struct Model {
  ModelShape shape;
  Hyperparams hyper;
  Parameters params;

  /// Re-normalizes every prototype column to unit length.
  void normalize_prototypes();
};

/// Random initialization: Xavier-uniform weights, zero biases, unit-norm
/// Gaussian prototypes.
Model init_model(const ModelShape& shape, const Hyperparams& hyper, std::uint64_t seed);

/// v / |v|; throws NormalizationError when |v| < 1e-12.
VectorXd l2_normalize(const VectorXd& v);

/// Jacobian-vector product of l2_normalize: maps d(out) to d(v) given the
/// normalized output `unit` and the input norm.
VectorXd l2_normalize_backward(const VectorXd& unit, double norm, const VectorXd& grad_out);

// ---------------------------------------------------------------------------
// Encoder

struct EncoderCache {
  VectorXd x;
  VectorXd hidden;  // tanh activations
  VectorXd z;       // d1
};

EncoderCache encoder_forward(const Parameters& params, const VectorXd& x);

/// Accumulates encoder parameter gradients for dL/dz into `grads`.
void encoder_backward(const Parameters& params, const EncoderCache& cache, const VectorXd& grad_z,
                      Parameters& grads);

/// z = f(x). Throws ShapeError when x has the wrong dimension.
VectorXd encode(const Model& model, const VectorXd& x);

/// Contiguous slice m of z (each of length d2).
std::vector<VectorXd> split_subvectors(const VectorXd& z, int num_sets);

// ---------------------------------------------------------------------------
// Soft assignment and combinatorial embedding

struct SoftAssignCache {
  VectorXd unit_z;         // normalized input subvector
  double z_norm = 0.0;
  MatrixXd unit_protos;    // normalized prototype columns
  VectorXd proto_norms;
  VectorXd weights;        // softmax weights, sum to 1
  VectorXd out;
};

/// Softmax(lambda * cos) weighted combination of the (normalized) prototype
/// columns.
SoftAssignCache soft_assign_forward(const VectorXd& z_m, const MatrixXd& prototypes, double lambda);

/// Returns dL/dz_m and accumulates dL/dTheta_m into `grad_prototypes`.
VectorXd soft_assign_backward(const SoftAssignCache& cache, double lambda, const VectorXd& grad_out,
                              MatrixXd& grad_prototypes);

VectorXd soft_assign(const VectorXd& z_m, const MatrixXd& prototypes, double lambda);

struct CombEmbedCache {
  std::vector<SoftAssignCache> slices;
  VectorXd pi;  // d2 * M
};

CombEmbedCache comb_embed_forward(const VectorXd& z, const std::vector<MatrixXd>& prototypes,
                                  double lambda);

/// Returns dL/dz and accumulates prototype gradients.
VectorXd comb_embed_backward(const CombEmbedCache& cache, double lambda, const VectorXd& grad_pi,
                             std::vector<MatrixXd>& grad_prototypes);

/// pi(z; Theta): concatenation of the per-set soft assignments.
VectorXd comb_embed(const VectorXd& z, const std::vector<MatrixXd>& prototypes, double lambda);

/// Index of the prototype with maximal cosine similarity to z_m; ties go
/// to the lowest index.
int nearest_prototype(const VectorXd& z_m, const MatrixXd& prototypes);

// ---------------------------------------------------------------------------
// Prediction head

struct HeadCache {
  VectorXd in;
  VectorXd hidden;
  VectorXd out;
};

HeadCache head_forward(const Parameters& params, const VectorXd& in);

/// Returns dL/d(in) and accumulates head parameter gradients.
VectorXd head_backward(const Parameters& params, const HeadCache& cache, const VectorXd& grad_out,
                       Parameters& grads);

// ---------------------------------------------------------------------------
// CEMB model file

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace combemb
