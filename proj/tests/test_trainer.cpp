#include <doctest.h>

#include <cmath>

#include "combemb/config.hpp"
#include "combemb/error.hpp"
#include "combemb/metascheme.hpp"
#include "combemb/trainer.hpp"
#include "test_util.hpp"

using namespace combemb;

namespace {

struct Setup {
  FeatureTable table;
  OpenSetSplit split;
  MetaClassScheme scheme;
};

Setup small_setup(int meta_classes = 2, int n_per_class = 20) {
  SyntheticParams p;
  p.n_classes = 5;
  p.dim = 8;
  p.n_per_class = n_per_class;
  Setup s;
  s.table = generate_synthetic(p);
  s.split = make_open_set_split(s.table, 0.8, 0.5, 0);
  const auto embs = class_embeddings(s.table, s.split, identity_feature_map(), ClassEmbeddingMode::kClassMeans);
  SchemeOptions so;
  so.num_sets = 3;
  so.meta_classes = meta_classes;
  s.scheme = build_scheme(embs, so);
  return s;
}

TrainConfig small_config(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch_labeled = 8;
  c.batch_unlabeled = 8;
  c.hidden = 10;
  c.sub_dim = 4;
  return c;
}

}  // namespace

TEST_CASE("augment") {
  const VectorXd x = VectorXd::LinSpaced(10, -1, 1);
  auto rng = make_rng(1, 1);
  CHECK(augment(x, 0, 0, rng) == x);
  auto a = make_rng(3, 1), b = make_rng(3, 1);
  CHECK(augment(x, 0.1, 0.2, a) == augment(x, 0.1, 0.2, b));
  auto c = make_rng(3, 1);
  const VectorXd dropped = augment(x, 0, 0.5, c);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    CHECK((dropped[i] == 0.0 || dropped[i] == doctest::Approx(2 * x[i])));
  }
  CHECK_THROWS_AS(augment(x, 0, 1.0, rng), ParameterError);
}

TEST_CASE("training is deterministic") {
  const auto s = small_setup();
  const auto a = train(s.table, s.split, s.scheme, small_config(30));
  const auto b = train(s.table, s.split, s.scheme, small_config(30));
  CHECK(a.model.params == b.model.params);
  REQUIRE(a.trace.size() == 30);
  for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].total == b.trace[i].total);
  auto other = small_config(30);
  other.seed = 1;
  CHECK_FALSE(train(s.table, s.split, s.scheme, other).model.params == a.model.params);
}

TEST_CASE("prototypes stay unit length") {
  const auto s = small_setup();
  for (int steps : {1, 2, 7, 25}) {
    const auto r = train(s.table, s.split, s.scheme, small_config(steps));
    for (const auto& p : r.model.params.prototypes) {
      for (Eigen::Index k = 0; k < p.cols(); ++k) CHECK(std::abs(p.col(k).norm() - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("single meta-class sets without sim and cons only decay the weights") {
  const auto s = small_setup(1);
  auto cfg = small_config(20);
  cfg.hyper.alpha = 0;
  cfg.hyper.beta = 0;
  ModelShape shape{8, cfg.hidden, cfg.sub_dim, s.scheme.sizes()};
  const auto init = init_model(shape, cfg.hyper, cfg.seed);
  const auto r = train(s.table, s.split, s.scheme, cfg);
  for (const auto& rec : r.trace) CHECK(rec.meta == 0.0);

  Parameters want = init.params;
  for (int i = 0; i < cfg.steps; ++i) {
    want.visit([&](std::string_view, MatrixXd& m) { m *= (1.0 - cfg.learning_rate * cfg.weight_decay); });
  }
  CHECK(r.model.params.enc_w1 == want.enc_w1);
  CHECK(r.model.params.enc_w2 == want.enc_w2);
  CHECK(r.model.params.head_w1 == want.head_w1);
}

TEST_CASE("training needs labeled data") {
  auto s = small_setup();
  s.split.unlabeled_ids.insert(s.split.unlabeled_ids.end(), s.split.labeled_ids.begin(), s.split.labeled_ids.end());
  std::sort(s.split.unlabeled_ids.begin(), s.split.unlabeled_ids.end());
  s.split.labeled_ids.clear();
  CHECK_THROWS_AS(train(s.table, s.split, s.scheme, small_config(3)), DataError);
}

TEST_CASE("invalid training configuration") {
  const auto s = small_setup();
  auto cfg = small_config(3);
  cfg.learning_rate = 0;
  CHECK_THROWS_AS(train(s.table, s.split, s.scheme, cfg), ParameterError);
  cfg = small_config(3);
  cfg.hyper.tau = -1;
  CHECK_THROWS_AS(train(s.table, s.split, s.scheme, cfg), ParameterError);
}

TEST_CASE("adamw matches a hand-computed first step") {
  Parameters p;
  p.enc_w1 = MatrixXd::Constant(1, 1, 2.0);
  Parameters g;
  g.enc_w1 = MatrixXd::Constant(1, 1, 0.5);
  AdamW opt(p, 0.1, 0.01);
  opt.step(p, g);
  // m_hat = g, v_hat = g^2: update = lr * g / (|g| + eps)
  const double want = 2.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
  CHECK(p.enc_w1(0, 0) == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("loss decreases on the default synthetic data") {
  SyntheticParams p;  // 10 classes, d = 64, 200 per class
  const auto table = generate_synthetic(p);
  const auto split = make_open_set_split(table, 0.75, 0.5, 0);
  const auto scheme = build_scheme(
      class_embeddings(table, split, identity_feature_map(), ClassEmbeddingMode::kClassifierWeights), SchemeOptions{});
  const auto r = train(table, split, scheme, TrainConfig{});
  REQUIRE(r.trace.size() == 2000);
  for (const auto& rec : r.trace) CHECK(std::isfinite(rec.total));
  auto window_mean = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 100; ++i) s += r.trace[i].total;
    return s / 100;
  };
  CHECK(window_mean(1900) < window_mean(0));
}

TEST_CASE("trace file") {
  testutil::TempDir dir("trace");
  save_trace({{0, 1.5, 0.25, -0.5, 1.25}}, dir / "t.csv");
  CHECK(testutil::read_bytes(dir / "t.csv") == "step,meta,sim,cons,total\n0,1.5,0.25,-0.5,1.25\n");
}

TEST_CASE("config parsing") {
  const auto cfg = KeyValueConfig::parse("# comment\nsteps = 12\n\nlearning_rate=0.5  # trailing\nname = abc\n");
  CHECK(cfg.get_int("steps", 0) == 12);
  CHECK(cfg.get_double("learning_rate", 0) == 0.5);
  CHECK(cfg.get_string("name", "") == "abc");
  CHECK(cfg.get_int("missing", 7) == 7);
  CHECK_THROWS_AS(cfg.get_int("name", 0), ParameterError);
  CHECK_THROWS_AS(KeyValueConfig::parse("no equals sign\n"), FormatError);

  const auto tc = TrainConfig::from(KeyValueConfig::parse("gamma = 0.9\nsteps = 5\nseed = 3\n"));
  CHECK(tc.hyper.gamma == 0.9);
  CHECK(tc.steps == 5);
  CHECK(tc.seed == 3);
  CHECK(tc.learning_rate == 1e-3);
  CHECK(tc.weight_decay == 1e-4);
}
