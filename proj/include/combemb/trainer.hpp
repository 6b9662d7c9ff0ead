#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "combemb/config.hpp"
#include "combemb/dataset.hpp"
#include "combemb/embedding.hpp"
#include "combemb/metascheme.hpp"
#include "combemb/objectives.hpp"
#include "combemb/rng.hpp"

namespace combemb {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int steps = 2000;
  int batch_labeled = 64;
  int batch_unlabeled = 64;
  double aug_sigma = 0.05;
  double aug_dropout = 0.1;
  std::uint64_t seed = 0;

  int hidden = 128;  // encoder hidden width
  int sub_dim = 12;  // d2
  Hyperparams hyper;

  void validate() const;

  /// Reads every field from `cfg`, keeping the current value for absent keys.
  static TrainConfig from(const KeyValueConfig& cfg, TrainConfig defaults);
  static TrainConfig from(const KeyValueConfig& cfg);
};

/// Feature-space augmentation: additive Gaussian noise, then inverted
/// dropout (zero with probability `dropout`, survivors scaled by 1/(1-dropout)).
VectorXd augment(const VectorXd& x, double sigma, double dropout, Rng& rng);

/// Adam moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(const Parameters& like, double learning_rate, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  void step(Parameters& params, const Parameters& grads);
  int steps_taken() const { return t_; }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  int t_ = 0;
  Parameters m_, v_;
};

struct LossRecord {
  int step = 0;
  double meta = 0, sim = 0, cons = 0, total = 0;
};

struct TrainResult {
  Model model;
  std::vector<LossRecord> trace;
};

/// Mini-batch training over labeled and unlabeled records of `split`.
/// Throws DataError when there is no labeled data and NumericError on a
/// non-finite loss or gradient.
TrainResult train(const FeatureTable& table, const OpenSetSplit& split, const MetaClassScheme& scheme,
                  const TrainConfig& config);

/// Same, starting from a given model instead of a fresh initialization.
TrainResult train_from(Model model, const FeatureTable& table, const OpenSetSplit& split,
                       const MetaClassScheme& scheme, const TrainConfig& config);

/// `step,meta,sim,cons,total` per line, after a header line of the same names.
void save_trace(const std::vector<LossRecord>& trace, const std::filesystem::path& path);

}  // namespace combemb
