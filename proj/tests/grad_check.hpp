#pragma once

// Central-difference gradient checking of evaluate_loss against its
// analytic gradients. The loss context (positive sets, consistency targets)
// is frozen at the unperturbed parameters, so both sides differentiate the
// same function.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "combemb/embedding.hpp"
#include "combemb/objectives.hpp"
#include "combemb/rng.hpp"

namespace gradcheck {

using combemb::Batch;
using combemb::LossContext;
using combemb::LossOptions;
using combemb::MatrixXd;
using combemb::Model;
using combemb::VectorXd;

struct TensorError {
  std::string name;
  double rel_error = 0.0;
};

/// ||a - n|| / max(||a||, ||n||, 1e-8) per tensor (Frobenius norms).
inline double relative_error(const MatrixXd& analytic, const MatrixXd& numeric) {
  const double denom = std::max({analytic.norm(), numeric.norm(), 1e-8});
  return (analytic - numeric).norm() / denom;
}

/// One entry per parameter tensor.
inline std::vector<TensorError> check(const Batch& batch, const Model& model, const LossContext& ctx,
                                      const LossOptions& opts, double step = 1e-5) {
  const auto analytic = combemb::evaluate_loss(batch, model, ctx, opts).grads;
  LossOptions value_only = opts;
  value_only.compute_grads = false;

  std::vector<const MatrixXd*> a_list;
  analytic.visit([&a_list](std::string_view, const MatrixXd& m) { a_list.push_back(&m); });

  Model probe = model;
  std::vector<MatrixXd*> p_list;
  std::vector<std::string> names;
  probe.params.visit([&](std::string_view name, MatrixXd& m) {
    p_list.push_back(&m);
    names.emplace_back(name);
  });

  std::vector<TensorError> out;
  for (std::size_t t = 0; t < p_list.size(); ++t) {
    MatrixXd& p = *p_list[t];
    MatrixXd numeric(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + step;
      const double up = combemb::evaluate_loss(batch, probe, ctx, value_only).total;
      p.data()[i] = saved - step;
      const double down = combemb::evaluate_loss(batch, probe, ctx, value_only).total;
      p.data()[i] = saved;
      numeric.data()[i] = (up - down) / (2 * step);
    }
    std::string name = names[t];
    if (name == "prototypes") name += std::to_string(t - 4);
    out.push_back({name, relative_error(*a_list[t], numeric)});
  }
  return out;
}

inline double worst(const std::vector<TensorError>& errs) {
  double w = 0;
  for (const auto& e : errs) w = std::max(w, e.rel_error);
  return w;
}

/// A random small batch and model: d=4, hidden=8, d2=4, M=3, K=2, 8 items
/// of which half are labeled with 2 classes.
struct Instance {
  Model model;
  Batch batch;
};

inline Instance random_instance(std::uint64_t seed, int input_dim = 4, int hidden = 8, int sub_dim = 4,
                                int num_sets = 3, int k = 2, int batch_size = 8) {
  Instance inst;
  combemb::ModelShape shape;
  shape.input_dim = input_dim;
  shape.hidden = hidden;
  shape.sub_dim = sub_dim;
  shape.meta_sizes.assign(static_cast<std::size_t>(num_sets), k);
  combemb::Hyperparams hyper;
  hyper.gamma = 0.3;  // low enough that unlabeled anchors find positives
  inst.model = combemb::init_model(shape, hyper, seed);

  auto rng = combemb::make_rng(seed, 0x74657374);
  std::normal_distribution<double> g(0.0, 1.0);
  auto randomize = [&](MatrixXd& m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * g(rng);
  };
  // Nonzero biases and a well-conditioned head make every tensor's gradient
  // non-trivial.
  randomize(inst.model.params.enc_b1, 0.3);
  randomize(inst.model.params.enc_b2, 0.3);
  randomize(inst.model.params.head_b1, 0.3);
  randomize(inst.model.params.head_b2, 0.3);

  std::uniform_int_distribution<int> pick(0, k - 1);
  for (int i = 0; i < batch_size; ++i) {
    combemb::BatchItem item;
    item.view1 = VectorXd(input_dim);
    item.view2 = VectorXd(input_dim);
    for (int j = 0; j < input_dim; ++j) {
      const double base = g(rng);
      item.view1[j] = base + 0.1 * g(rng);
      item.view2[j] = base + 0.1 * g(rng);
    }
    if (i < batch_size / 2) {
      item.label = i % 2;
      for (int m = 0; m < num_sets; ++m) item.meta_labels.push_back(pick(rng));
    }
    inst.batch.items.push_back(std::move(item));
  }
  return inst;
}

}  // namespace gradcheck
