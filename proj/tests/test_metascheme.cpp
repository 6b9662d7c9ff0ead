#include <doctest.h>

#include <set>

#include "combemb/dataset.hpp"
#include "combemb/error.hpp"
#include "combemb/metascheme.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace combemb;

namespace {

ClassEmbeddingMatrix random_embeddings(int n, int d, std::uint64_t seed) {
  std::srand(static_cast<unsigned>(seed));
  ClassEmbeddingMatrix e;
  e.rows = Eigen::MatrixXd::Random(n, d);
  for (int i = 0; i < n; ++i) {
    e.classes.push_back(i);
    e.rows.row(i).normalize();
  }
  return e;
}

SchemeOptions opts(int m, int k, int q, std::uint64_t seed = 0) {
  SchemeOptions o;
  o.num_sets = m;
  o.meta_classes = k;
  o.subspace_dim = q;
  o.seed = seed;
  return o;
}

}  // namespace

TEST_CASE("class_means with one example per class gives the normalized feature") {
  FeatureTable t(3);
  t.add({0, 0, {3, 0, 4}});
  t.add({1, 1, {0, 2, 0}});
  t.add({2, 2, {1, 1, 1}});
  const auto split = make_open_set_split(t, 0.7, 1.0, 0);  // classes 0,1 seen
  const auto e = class_embeddings(t, split, identity_feature_map(), ClassEmbeddingMode::kClassMeans);
  REQUIRE(e.classes == std::vector<ClassId>{0, 1});
  CHECK(e.rows(0, 0) == doctest::Approx(0.6));
  CHECK(e.rows(0, 2) == doctest::Approx(0.8));
  CHECK(e.rows(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("classifier weights align with their own class mean") {
  // Two linearly separable blobs; the pretrained weight of each class has a
  // larger inner product with its own mean than with the other one.
  SyntheticParams p;
  p.n_classes = 4;
  p.dim = 8;
  p.n_per_class = 40;
  const auto t = generate_synthetic(p);
  const auto split = make_open_set_split(t, 0.5, 0.5, 0);  // classes 0,1
  const auto e = class_embeddings(t, split, identity_feature_map(), ClassEmbeddingMode::kClassifierWeights);
  REQUIRE(e.rows.rows() == 2);
  const auto means = synthetic_class_means(p);
  for (int c = 0; c < 2; ++c) {
    CHECK(e.rows.row(c).norm() == doctest::Approx(1.0));
    const double own = e.rows.row(c).dot(means.row(c));
    const double other = e.rows.row(c).dot(means.row(1 - c));
    CHECK(own > 0);
    CHECK(own > other);
  }
}

TEST_CASE("class embeddings require labeled examples for every seen class") {
  FeatureTable t(2);
  t.add({0, 0, {1, 0}});
  t.add({1, 1, {0, 1}});
  OpenSetSplit split;
  split.seen_classes = {0, 1};
  split.labeled_ids = {0};
  split.unlabeled_ids = {1};
  CHECK_THROWS_AS(class_embeddings(t, split, identity_feature_map(), ClassEmbeddingMode::kClassMeans), DataError);
}

TEST_CASE("K equal to the class count gives singleton meta-classes") {
  const auto e = random_embeddings(5, 8, 1);
  const auto s = build_scheme(e, opts(3, 5, 4));
  for (int m = 0; m < 3; ++m) {
    std::set<int> seen(s.assignment()[static_cast<std::size_t>(m)].begin(),
                       s.assignment()[static_cast<std::size_t>(m)].end());
    CHECK(seen.size() == 5);
  }
}

TEST_CASE("square corners: clustering matches the brute-force SSE optimum") {
  ClassEmbeddingMatrix e;
  e.classes = {0, 1, 2, 3};
  e.rows.resize(4, 2);
  SUBCASE("unit square") {
    e.rows << 0, 0, 1, 0, 0, 1, 1, 1;
    const auto s = build_scheme(e, opts(1, 2, 2, 4));
    const auto best = oracle::best_two_partition(e.rows);
    CHECK(oracle::partition_sse(e.rows, s.assignment()[0]) == doctest::Approx(oracle::partition_sse(e.rows, best)));
    // Each meta-class is a pair of adjacent corners.
    const auto& a = s.assignment()[0];
    for (int i = 0; i < 4; ++i) {
      int mates = 0;
      for (int j = 0; j < 4; ++j) mates += (j != i && a[static_cast<std::size_t>(j)] == a[static_cast<std::size_t>(i)]);
      CHECK(mates == 1);
    }
    CHECK(a[0] != a[3]);
    CHECK(a[1] != a[2]);
  }
  SUBCASE("rectangle has a unique optimum") {
    e.rows << 0, 0, 3, 0, 0, 1, 3, 1;
    for (std::uint64_t seed : {0u, 1u, 2u}) {
      const auto s = build_scheme(e, opts(1, 2, 2, seed));
      CHECK(oracle::same_partition(s.assignment()[0], oracle::best_two_partition(e.rows)));
    }
  }
}

TEST_CASE("scheme invariants") {
  const auto e = random_embeddings(7, 32, 2);
  const auto s = build_scheme(e, opts(6, 4, 0, 11));
  CHECK(s.num_sets() == 6);
  CHECK(s.subspace_dim() == 8);  // ceil(32 / 4)
  for (int m = 0; m < 6; ++m) {
    const auto& a = s.assignment()[static_cast<std::size_t>(m)];
    REQUIRE(a.size() == 7);
    std::set<int> used(a.begin(), a.end());
    CHECK(used == std::set<int>{0, 1, 2, 3});  // covering, and each class in exactly one
    const auto& dims = s.subspace_dims()[static_cast<std::size_t>(m)];
    CHECK(std::set<int>(dims.begin(), dims.end()).size() == dims.size());
  }
  CHECK(build_scheme(e, opts(6, 4, 0, 11)) == s);
  std::set<std::vector<int>> distinct(s.subspace_dims().begin(), s.subspace_dims().end());
  CHECK(distinct.size() == 6);
}

TEST_CASE("scheme parameter errors") {
  const auto e = random_embeddings(3, 4, 3);
  CHECK_THROWS_AS(build_scheme(e, opts(2, 4, 2)), ParameterError);
  CHECK_THROWS_AS(build_scheme(e, opts(0, 2, 2)), ParameterError);
  CHECK_THROWS_AS(build_scheme(e, opts(2, 2, 5)), ParameterError);
}

TEST_CASE("meta_label lookups") {
  MetaClassScheme s({0, 1, 2, 3}, {3, 2}, {{2, 0, 1, 2}, {0, 1, 1, 0}}, {{0}, {1}}, 0);
  CHECK(s.meta_label(0, 0) == 2);
  CHECK(s.meta_label(1, 2) == 1);
  CHECK(s.meta_labels(3) == std::vector<int>{2, 0});
  CHECK_THROWS_AS(s.meta_label(0, 7), LookupError);
  CHECK_THROWS_AS(s.meta_label(2, 0), LookupError);

  MetaClassScheme identity({4, 8, 9}, {3}, {{0, 1, 2}}, {{0}}, 0);
  CHECK(identity.meta_label(0, 4) == 0);
  CHECK(identity.meta_label(0, 8) == 1);
  CHECK(identity.meta_label(0, 9) == 2);
}

TEST_CASE("bit budget") {
  CHECK(code_bits(std::vector<int>(6, 4)) == 12);
  CHECK(code_bits(std::vector<int>{2}) == 1);
  CHECK(code_bits(std::vector<int>(12, 4)) == 24);
  CHECK(code_bits(std::vector<int>(24, 4)) == 48);
  CHECK(bits_for(1) == 0);
  CHECK(bits_for(3) == 2);
  CHECK(bits_for(5) == 3);
  CHECK(bits_for(16) == 4);
}

TEST_CASE("scheme files round-trip") {
  testutil::TempDir dir("scheme");
  const auto s = build_scheme(random_embeddings(7, 16, 4), opts(4, 3, 5, 8));
  save_scheme(s, dir / "s.txt");
  CHECK(load_scheme(dir / "s.txt") == s);
  testutil::write_text(dir / "bad.txt", "2 1 0\n2\n");
  CHECK_THROWS_AS(load_scheme(dir / "bad.txt"), FormatError);
}
