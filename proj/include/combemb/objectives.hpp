#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "combemb/dataset.hpp"
#include "combemb/embedding.hpp"
#include "combemb/metascheme.hpp"

namespace combemb {

/// One training example with its two augmented views. Labeled items carry
/// their base class and per-set meta labels; unlabeled items carry neither.
struct BatchItem {
  VectorXd view1;
  VectorXd view2;
  std::optional<ClassId> label;
  std::vector<int> meta_labels;

  bool labeled() const { return label.has_value(); }
};

struct Batch {
  std::vector<BatchItem> items;

  std::size_t size() const { return items.size(); }
  std::size_t num_labeled() const;
};

/// Builds a batch item; meta labels are looked up in `scheme` for labeled
/// items.
BatchItem make_batch_item(VectorXd view1, VectorXd view2, std::optional<ClassId> label,
                          const MetaClassScheme& scheme);

// ---------------------------------------------------------------------------
// Individual loss terms

struct MetaLossResult {
  double value = 0.0;
  VectorXd grad_z;                      // d1, concatenation over sets
  std::vector<MatrixXd> grad_prototypes;
};

/// Normalized-softmax loss summed over the M meta-class sets:
///   -sum_m log softmax_k(cos(z^m, theta^m_k) / tau)[meta_labels[m]]
MetaLossResult meta_loss(const VectorXd& z, const std::vector<int>& meta_labels,
                         const std::vector<MatrixXd>& prototypes, double tau);

/// Indices b != anchor with cos(pi_anchor, pi_b) >= gamma.
std::vector<int> select_positives(int anchor, const std::vector<VectorXd>& pis, double gamma);

struct SimLossResult {
  double value = 0.0;
  VectorXd grad_z;               // d/d(anchor z)
  std::vector<VectorXd> grad_pi; // d/d(pi_b) for every batch member (zero for the anchor)
};

/// Contrastive loss of one anchor against the combinatorial embeddings of
/// the batch. The anchor is excluded from the denominator; an empty
/// positive set yields value 0 with zero gradients.
SimLossResult sim_loss(const VectorXd& anchor_z, int anchor, const std::vector<int>& positives,
                       const std::vector<VectorXd>& pis);

struct ConsLossResult {
  double value = 0.0;
  Parameters grads;        // encoder, prototype and head gradients via the predicted branch
  VectorXd grad_z;         // d/dz through h(pi(z))
  VectorXd grad_z_prime;   // always zero: the target branch is not differentiated
};

/// -cos(h(pi(z)), pi(z')) with stop-gradient on pi(z').
ConsLossResult cons_loss(const Model& model, const VectorXd& z, const VectorXd& z_prime);

// ---------------------------------------------------------------------------
// Total loss

/// Quantities treated as constants during differentiation: the positive
/// sets (a discrete selection) and the consistency targets pi(z').
struct LossContext {
  std::vector<std::vector<int>> positives;  // per item, sorted
  std::vector<VectorXd> target_view1;       // pi(z) of view 1, detached
  std::vector<VectorXd> target_view2;       // pi(z') of view 2, detached
};

enum class ConsMode {
  kSymmetric,  // each view predicts the other once
  kOneWay,     // only view 1 predicts view 2
};

struct LossOptions {
  double w_meta = 1.0;
  double w_sim = 1.0;
  double w_cons = 1.0;
  ConsMode cons_mode = ConsMode::kSymmetric;
  bool compute_grads = true;

  static LossOptions from(const Hyperparams& h) { return {1.0, h.alpha, h.beta}; }
};

struct LossBreakdown {
  double meta = 0.0;  // mean over labeled items
  double sim = 0.0;   // mean over anchors with a nonempty positive set
  double cons = 0.0;  // mean over items
  double total = 0.0; // w_meta * meta + w_sim * sim + w_cons * cons
  std::size_t num_labeled = 0;
  std::size_t num_sim_anchors = 0;

  Parameters grads;
  std::vector<VectorXd> grad_z_view1;
  std::vector<VectorXd> grad_z_view2;
};

/// Positive sets from view-1 embeddings (labeled anchors also take every
/// labeled item of the same class) and detached consistency targets.
LossContext prepare_context(const Batch& batch, const Model& model);

/// Loss and gradients with `context` held fixed.
LossBreakdown evaluate_loss(const Batch& batch, const Model& model, const LossContext& context,
                            const LossOptions& options);

/// L = L_meta + alpha * L_sim + beta * L_cons with the model's hyperparameters.
/// Throws ShapeError when the model and scheme disagree.
LossBreakdown total_loss(const Batch& batch, const Model& model, const MetaClassScheme& scheme);

/// Throws ShapeError unless the model's meta-class sets match the scheme.
void check_consistent(const Model& model, const MetaClassScheme& scheme);

}  // namespace combemb
