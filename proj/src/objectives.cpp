#include "combemb/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "combemb/error.hpp"

namespace combemb {

namespace {

double log_sum_exp(const VectorXd& v) {
  const double top = v.maxCoeff();
  return top + std::log((v.array() - top).exp().sum());
}

VectorXd softmax(const VectorXd& v) {
  VectorXd e = (v.array() - v.maxCoeff()).exp().matrix();
  return e / e.sum();
}

std::vector<MatrixXd> zeros_like(const std::vector<MatrixXd>& ms) {
  std::vector<MatrixXd> out;
  out.reserve(ms.size());
  for (const auto& m : ms) out.push_back(MatrixXd::Zero(m.rows(), m.cols()));
  return out;
}

struct ItemForward {
  EncoderCache enc;
  CombEmbedCache comb;
};

ItemForward forward_item(const Model& model, const VectorXd& x) {
  ItemForward f;
  f.enc = encoder_forward(model.params, x);
  f.comb = comb_embed_forward(f.enc.z, model.params.prototypes, model.hyper.lambda);
  return f;
}

/// Adds scale * d(-cos(h(pi), target))/d(pi) into grad_pi, accumulating head
/// gradients into grads; returns the loss value.
double add_cons_branch(const Parameters& params, const VectorXd& pi, const VectorXd& target,
                       double scale, bool want_grads, VectorXd& grad_pi, Parameters& grads) {
  const HeadCache head = head_forward(params, pi);
  const double q_norm = head.out.norm();
  if (q_norm < kMinNorm) throw NormalizationError("prediction head output has zero norm");
  const VectorXd q_unit = head.out / q_norm;
  const VectorXd t_unit = l2_normalize(target);
  const double value = -q_unit.dot(t_unit);
  if (want_grads) {
    const VectorXd grad_q = l2_normalize_backward(q_unit, q_norm, -scale * t_unit);
    grad_pi += head_backward(params, head, grad_q, grads);
  }
  return value;
}

}  // namespace

std::size_t Batch::num_labeled() const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [](const BatchItem& it) { return it.labeled(); }));
}

BatchItem make_batch_item(VectorXd view1, VectorXd view2, std::optional<ClassId> label,
                          const MetaClassScheme& scheme) {
  BatchItem item;
  item.view1 = std::move(view1);
  item.view2 = std::move(view2);
  item.label = label;
  if (label) item.meta_labels = scheme.meta_labels(*label);
  return item;
}

// ---------------------------------------------------------------------------

MetaLossResult meta_loss(const VectorXd& z, const std::vector<int>& meta_labels,
                         const std::vector<MatrixXd>& prototypes, double tau) {
  if (!(tau > 0)) throw ParameterError("tau must be > 0");
  const int num_sets = static_cast<int>(prototypes.size());
  if (static_cast<int>(meta_labels.size()) != num_sets) {
    throw ShapeError("expected " + std::to_string(num_sets) + " meta labels, got " +
                     std::to_string(meta_labels.size()));
  }
  const auto slices = split_subvectors(z, num_sets);
  const Eigen::Index d2 = z.size() / num_sets;

  MetaLossResult r;
  r.grad_z = VectorXd::Zero(z.size());
  r.grad_prototypes = zeros_like(prototypes);
  for (int m = 0; m < num_sets; ++m) {
    const auto& theta = prototypes[static_cast<std::size_t>(m)];
    const int label = meta_labels[static_cast<std::size_t>(m)];
    if (label < 0 || label >= theta.cols()) {
      throw DataError("meta label " + std::to_string(label) + " out of range for set " + std::to_string(m));
    }
    const auto& zm = slices[static_cast<std::size_t>(m)];
    const double z_norm = zm.norm();
    const VectorXd u = l2_normalize(zm);
    const VectorXd norms = theta.colwise().norm().transpose();
    if (norms.minCoeff() < kMinNorm) throw NormalizationError("zero-norm prototype");
    const MatrixXd unit = theta * norms.cwiseInverse().asDiagonal();

    const VectorXd logits = unit.transpose() * u / tau;
    r.value += log_sum_exp(logits) - logits[label];

    VectorXd grad_logits = softmax(logits);
    grad_logits[label] -= 1.0;
    const VectorXd grad_u = unit * grad_logits / tau;
    r.grad_z.segment(m * d2, d2) = l2_normalize_backward(u, z_norm, grad_u);
    for (Eigen::Index k = 0; k < theta.cols(); ++k) {
      r.grad_prototypes[static_cast<std::size_t>(m)].col(k) =
          l2_normalize_backward(unit.col(k), norms[k], u * (grad_logits[k] / tau));
    }
  }
  return r;
}

std::vector<int> select_positives(int anchor, const std::vector<VectorXd>& pis, double gamma) {
  std::vector<int> out;
  const VectorXd a = l2_normalize(pis[static_cast<std::size_t>(anchor)]);
  for (std::size_t b = 0; b < pis.size(); ++b) {
    if (static_cast<int>(b) == anchor) continue;
    if (a.dot(l2_normalize(pis[b])) >= gamma) out.push_back(static_cast<int>(b));
  }
  return out;
}

SimLossResult sim_loss(const VectorXd& anchor_z, int anchor, const std::vector<int>& positives,
                       const std::vector<VectorXd>& pis) {
  SimLossResult r;
  r.grad_z = VectorXd::Zero(anchor_z.size());
  r.grad_pi.assign(pis.size(), VectorXd::Zero(anchor_z.size()));
  if (positives.empty()) return r;

  const double z_norm = anchor_z.norm();
  const VectorXd u = l2_normalize(anchor_z);
  const auto n = static_cast<Eigen::Index>(pis.size());
  VectorXd logits = VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
  std::vector<VectorXd> unit(pis.size());
  std::vector<double> norms(pis.size(), 0.0);
  for (Eigen::Index b = 0; b < n; ++b) {
    if (b == anchor) continue;
    norms[static_cast<std::size_t>(b)] = pis[static_cast<std::size_t>(b)].norm();
    unit[static_cast<std::size_t>(b)] = l2_normalize(pis[static_cast<std::size_t>(b)]);
    logits[b] = u.dot(unit[static_cast<std::size_t>(b)]);
  }
  const double lse = log_sum_exp(logits);
  const double inv_p = 1.0 / static_cast<double>(positives.size());
  VectorXd grad_logits = (logits.array() - lse).exp().matrix();  // softmax, 0 at the anchor
  for (int p : positives) {
    if (p == anchor) throw ParameterError("anchor cannot be its own positive");
    r.value -= inv_p * (logits[p] - lse);
    grad_logits[p] -= inv_p;
  }

  VectorXd grad_u = VectorXd::Zero(u.size());
  for (Eigen::Index b = 0; b < n; ++b) {
    if (b == anchor) continue;
    const auto& ub = unit[static_cast<std::size_t>(b)];
    grad_u += grad_logits[b] * ub;
    r.grad_pi[static_cast<std::size_t>(b)] =
        l2_normalize_backward(ub, norms[static_cast<std::size_t>(b)], grad_logits[b] * u);
  }
  r.grad_z = l2_normalize_backward(u, z_norm, grad_u);
  return r;
}

ConsLossResult cons_loss(const Model& model, const VectorXd& z, const VectorXd& z_prime) {
  const double lambda = model.hyper.lambda;
  const auto comb = comb_embed_forward(z, model.params.prototypes, lambda);
  const VectorXd target = comb_embed(z_prime, model.params.prototypes, lambda);

  ConsLossResult r;
  r.grads = model.params.zeros_like();
  VectorXd grad_pi = VectorXd::Zero(comb.pi.size());
  r.value = add_cons_branch(model.params, comb.pi, target, 1.0, true, grad_pi, r.grads);
  r.grad_z = comb_embed_backward(comb, lambda, grad_pi, r.grads.prototypes);
  r.grad_z_prime = VectorXd::Zero(z_prime.size());
  return r;
}

// ---------------------------------------------------------------------------

void check_consistent(const Model& model, const MetaClassScheme& scheme) {
  if (model.shape.meta_sizes != scheme.sizes()) {
    throw ShapeError("model meta-class sets do not match the scheme");
  }
}

LossContext prepare_context(const Batch& batch, const Model& model) {
  const double lambda = model.hyper.lambda;
  LossContext ctx;
  std::vector<VectorXd> pis;
  for (const auto& item : batch.items) {
    pis.push_back(comb_embed(encode(model, item.view1), model.params.prototypes, lambda));
    ctx.target_view2.push_back(comb_embed(encode(model, item.view2), model.params.prototypes, lambda));
  }
  ctx.target_view1 = pis;

  const auto n = static_cast<int>(batch.size());
  for (int a = 0; a < n; ++a) {
    auto pos = select_positives(a, pis, model.hyper.gamma);
    const auto& anchor = batch.items[static_cast<std::size_t>(a)];
    if (anchor.labeled()) {
      for (int b = 0; b < n; ++b) {
        const auto& other = batch.items[static_cast<std::size_t>(b)];
        if (b != a && other.labeled() && *other.label == *anchor.label) pos.push_back(b);
      }
      std::sort(pos.begin(), pos.end());
      pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
    }
    ctx.positives.push_back(std::move(pos));
  }
  return ctx;
}

LossBreakdown evaluate_loss(const Batch& batch, const Model& model, const LossContext& ctx,
                            const LossOptions& opt) {
  const auto n = batch.size();
  if (n == 0) throw ParameterError("empty batch");
  if (ctx.positives.size() != n || ctx.target_view1.size() != n || ctx.target_view2.size() != n) {
    throw ShapeError("loss context does not match the batch");
  }
  const auto& params = model.params;
  const auto& hyper = model.hyper;
  const auto d1 = static_cast<Eigen::Index>(model.shape.embed_dim());
  const bool grads = opt.compute_grads;

  std::vector<ItemForward> v1, v2;
  v1.reserve(n);
  v2.reserve(n);
  for (const auto& item : batch.items) {
    v1.push_back(forward_item(model, item.view1));
    v2.push_back(forward_item(model, item.view2));
  }

  LossBreakdown out;
  out.grads = params.zeros_like();
  std::vector<VectorXd> gz1(n, VectorXd::Zero(d1)), gz2(n, VectorXd::Zero(d1));
  std::vector<VectorXd> gpi1(n, VectorXd::Zero(d1)), gpi2(n, VectorXd::Zero(d1));

  // Meta-classification on view 1 of labeled items.
  out.num_labeled = batch.num_labeled();
  if (out.num_labeled > 0) {
    const double scale = opt.w_meta / static_cast<double>(out.num_labeled);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& item = batch.items[i];
      if (!item.labeled()) continue;
      auto r = meta_loss(v1[i].enc.z, item.meta_labels, params.prototypes, hyper.tau);
      out.meta += r.value / static_cast<double>(out.num_labeled);
      if (grads) {
        gz1[i] += scale * r.grad_z;
        for (std::size_t m = 0; m < r.grad_prototypes.size(); ++m) {
          out.grads.prototypes[m] += scale * r.grad_prototypes[m];
        }
      }
    }
  }

  // Pairwise similarity on view 1: anchor z against pi of every other item.
  for (std::size_t a = 0; a < n; ++a) {
    if (!ctx.positives[a].empty()) ++out.num_sim_anchors;
  }
  if (out.num_sim_anchors > 0) {
    const auto n_anchor = static_cast<double>(out.num_sim_anchors);
    const double scale = opt.w_sim / n_anchor;
    std::vector<VectorXd> pis;
    pis.reserve(n);
    for (const auto& f : v1) pis.push_back(f.comb.pi);
    for (std::size_t a = 0; a < n; ++a) {
      if (ctx.positives[a].empty()) continue;
      auto r = sim_loss(v1[a].enc.z, static_cast<int>(a), ctx.positives[a], pis);
      out.sim += r.value / n_anchor;
      if (grads) {
        gz1[a] += scale * r.grad_z;
        for (std::size_t b = 0; b < n; ++b) gpi1[b] += scale * r.grad_pi[b];
      }
    }
  }

  // Consistency: h(pi(view)) against the detached pi of the other view.
  {
    const bool symmetric = opt.cons_mode == ConsMode::kSymmetric;
    const double per_item = symmetric ? 0.5 : 1.0;
    const double scale = opt.w_cons * per_item / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double c = add_cons_branch(params, v1[i].comb.pi, ctx.target_view2[i], scale, grads, gpi1[i], out.grads);
      if (symmetric) {
        c += add_cons_branch(params, v2[i].comb.pi, ctx.target_view1[i], scale, grads, gpi2[i], out.grads);
      }
      out.cons += per_item * c / static_cast<double>(n);
    }
  }

  out.total = opt.w_meta * out.meta + opt.w_sim * out.sim + opt.w_cons * out.cons;
  if (!std::isfinite(out.total)) throw NumericError("non-finite loss");
  if (!grads) return out;

  // Back through the soft assignments and the encoder, in item order.
  for (std::size_t i = 0; i < n; ++i) {
    gz1[i] += comb_embed_backward(v1[i].comb, hyper.lambda, gpi1[i], out.grads.prototypes);
    gz2[i] += comb_embed_backward(v2[i].comb, hyper.lambda, gpi2[i], out.grads.prototypes);
    encoder_backward(params, v1[i].enc, gz1[i], out.grads);
    encoder_backward(params, v2[i].enc, gz2[i], out.grads);
  }
  out.grad_z_view1 = std::move(gz1);
  out.grad_z_view2 = std::move(gz2);
  if (!out.grads.all_finite()) throw NumericError("non-finite gradient");
  return out;
}

LossBreakdown total_loss(const Batch& batch, const Model& model, const MetaClassScheme& scheme) {
  check_consistent(model, scheme);
  for (const auto& item : batch.items) {
    if (item.labeled() && item.meta_labels != scheme.meta_labels(*item.label)) {
      throw DataError("batch meta labels disagree with the scheme");
    }
  }
  const auto ctx = prepare_context(batch, model);
  return evaluate_loss(batch, model, ctx, LossOptions::from(model.hyper));
}

}  // namespace combemb
