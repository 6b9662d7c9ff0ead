#include "combemb/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>

#include "combemb/error.hpp"

namespace combemb {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ParameterError("learning_rate must be > 0");
  if (!(weight_decay >= 0)) throw ParameterError("weight_decay must be >= 0");
  if (steps < 0) throw ParameterError("steps must be >= 0");
  if (batch_labeled < 1) throw ParameterError("batch_labeled must be >= 1");
  if (batch_unlabeled < 0) throw ParameterError("batch_unlabeled must be >= 0");
  if (!(aug_sigma >= 0)) throw ParameterError("aug_sigma must be >= 0");
  if (!(aug_dropout >= 0 && aug_dropout < 1)) throw ParameterError("aug_dropout must lie in [0, 1)");
  if (hidden < 1 || sub_dim < 1) throw ParameterError("hidden and sub_dim must be positive");
  hyper.validate();
}

TrainConfig TrainConfig::from(const KeyValueConfig& cfg) { return from(cfg, TrainConfig{}); }

TrainConfig TrainConfig::from(const KeyValueConfig& cfg, TrainConfig d) {
  d.learning_rate = cfg.get_double("learning_rate", d.learning_rate);
  d.weight_decay = cfg.get_double("weight_decay", d.weight_decay);
  d.steps = cfg.get_int("steps", d.steps);
  d.batch_labeled = cfg.get_int("batch_labeled", d.batch_labeled);
  d.batch_unlabeled = cfg.get_int("batch_unlabeled", d.batch_unlabeled);
  d.aug_sigma = cfg.get_double("aug_sigma", d.aug_sigma);
  d.aug_dropout = cfg.get_double("aug_dropout", d.aug_dropout);
  d.seed = cfg.get_u64("seed", d.seed);
  d.hidden = cfg.get_int("hidden", d.hidden);
  d.sub_dim = cfg.get_int("sub_dim", d.sub_dim);
  d.hyper.lambda = cfg.get_double("lambda", d.hyper.lambda);
  d.hyper.tau = cfg.get_double("tau", d.hyper.tau);
  d.hyper.gamma = cfg.get_double("gamma", d.hyper.gamma);
  d.hyper.alpha = cfg.get_double("alpha", d.hyper.alpha);
  d.hyper.beta = cfg.get_double("beta", d.hyper.beta);
  return d;
}

VectorXd augment(const VectorXd& x, double sigma, double dropout, Rng& rng) {
  if (!(dropout >= 0 && dropout < 1)) throw ParameterError("dropout must lie in [0, 1)");
  VectorXd out = x;
  if (sigma > 0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += noise(rng);
  }
  if (dropout > 0) {
    std::bernoulli_distribution drop(dropout);
    const double keep_scale = 1.0 / (1.0 - dropout);
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = drop(rng) ? 0.0 : out[i] * keep_scale;
  }
  return out;
}

// ---------------------------------------------------------------------------

AdamW::AdamW(const Parameters& like, double learning_rate, double weight_decay, double beta1, double beta2,
             double eps)
    : lr_(learning_rate),
      wd_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      m_(like.zeros_like()),
      v_(like.zeros_like()) {}

void AdamW::step(Parameters& params, const Parameters& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);

  std::vector<MatrixXd*> p, m, v;
  std::vector<const MatrixXd*> g;
  params.visit([&p](std::string_view, MatrixXd& x) { p.push_back(&x); });
  m_.visit([&m](std::string_view, MatrixXd& x) { m.push_back(&x); });
  v_.visit([&v](std::string_view, MatrixXd& x) { v.push_back(&x); });
  grads.visit([&g](std::string_view, const MatrixXd& x) { g.push_back(&x); });
  if (p.size() != g.size() || p.size() != m.size()) throw ShapeError("optimizer/parameter layout mismatch");

  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& mi = *m[i];
    auto& vi = *v[i];
    const auto& gi = *g[i];
    mi = beta1_ * mi + (1.0 - beta1_) * gi;
    vi = beta2_ * vi + (1.0 - beta2_) * gi.cwiseProduct(gi);
    *p[i] *= (1.0 - lr_ * wd_);
    p[i]->array() -= lr_ * (mi.array() / bc1) / ((vi.array() / bc2).sqrt() + eps_);
  }
}

// ---------------------------------------------------------------------------

TrainResult train(const FeatureTable& table, const OpenSetSplit& split, const MetaClassScheme& scheme,
                  const TrainConfig& config) {
  config.validate();
  ModelShape shape;
  shape.input_dim = static_cast<int>(table.dim());
  shape.hidden = config.hidden;
  shape.sub_dim = config.sub_dim;
  shape.meta_sizes = scheme.sizes();
  return train_from(init_model(shape, config.hyper, config.seed), table, split, scheme, config);
}

TrainResult train_from(Model model, const FeatureTable& table, const OpenSetSplit& split,
                       const MetaClassScheme& scheme, const TrainConfig& config) {
  config.validate();
  check_consistent(model, scheme);
  if (model.shape.input_dim != static_cast<int>(table.dim())) {
    throw ShapeError("model input dimension does not match the feature table");
  }
  model.hyper = config.hyper;

  std::vector<std::size_t> labeled, unlabeled;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& rec = table[i];
    if (split.is_labeled(rec.id)) {
      if (!rec.label || !scheme.contains(*rec.label)) {
        throw DataError("labeled record " + std::to_string(rec.id) + " has no seen-class label");
      }
      labeled.push_back(i);
    } else if (std::binary_search(split.unlabeled_ids.begin(), split.unlabeled_ids.end(), rec.id)) {
      unlabeled.push_back(i);
    }
  }
  if (labeled.empty()) throw DataError("training needs labeled data");

  auto sample_rng = make_rng(config.seed, kStreamSample);
  auto aug_rng = make_rng(config.seed, kStreamAugment);
  std::uniform_int_distribution<std::size_t> pick_l(0, labeled.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_u(0, unlabeled.empty() ? 0 : unlabeled.size() - 1);
  const int n_unlabeled = unlabeled.empty() ? 0 : config.batch_unlabeled;

  AdamW opt(model.params, config.learning_rate, config.weight_decay);
  TrainResult result;
  result.trace.reserve(static_cast<std::size_t>(config.steps));

  for (int step = 0; step < config.steps; ++step) {
    Batch batch;
    batch.items.reserve(static_cast<std::size_t>(config.batch_labeled + n_unlabeled));
    auto add = [&](std::size_t row, bool with_label) {
      const VectorXd x = table.features(row);
      VectorXd a = augment(x, config.aug_sigma, config.aug_dropout, aug_rng);
      VectorXd b = augment(x, config.aug_sigma, config.aug_dropout, aug_rng);
      const auto label = with_label ? table[row].label : std::nullopt;
      batch.items.push_back(make_batch_item(std::move(a), std::move(b), label, scheme));
    };
    for (int i = 0; i < config.batch_labeled; ++i) add(labeled[pick_l(sample_rng)], true);
    for (int i = 0; i < n_unlabeled; ++i) add(unlabeled[pick_u(sample_rng)], false);

    const auto ctx = prepare_context(batch, model);
    const auto loss = evaluate_loss(batch, model, ctx, LossOptions::from(model.hyper));
    opt.step(model.params, loss.grads);
    model.normalize_prototypes();
    if (!model.params.all_finite()) {
      throw NumericError("non-finite parameters after step " + std::to_string(step));
    }
    result.trace.push_back({step, loss.meta, loss.sim, loss.cons, loss.total});
  }
  result.model = std::move(model);
  return result;
}

void save_trace(const std::vector<LossRecord>& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "step,meta,sim,cons,total\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", r.step, r.meta, r.sim, r.cons, r.total);
    out << buf;
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace combemb
