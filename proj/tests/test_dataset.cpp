#include <doctest.h>

#include <algorithm>
#include <set>

#include "combemb/dataset.hpp"
#include "combemb/error.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace combemb;

namespace {

SyntheticParams small_params(std::uint64_t seed = 3) {
  SyntheticParams p;
  p.n_classes = 10;
  p.dim = 16;
  p.n_per_class = 50;
  p.seed = seed;
  return p;
}

Eigen::MatrixXd as_matrix(const FeatureTable& t) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(t.dim()));
  for (std::size_t i = 0; i < t.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = t.features(i).transpose();
  return x;
}

std::vector<int> labels(const FeatureTable& t) {
  std::vector<int> out;
  for (const auto& r : t.records()) out.push_back(*r.label);
  return out;
}

}  // namespace

TEST_CASE("synthetic table has the requested counts") {
  const auto t = generate_synthetic(small_params());
  CHECK(t.size() == 500);
  CHECK(t.dim() == 16);
  std::map<int, int> per_class;
  for (const auto& r : t.records()) ++per_class[*r.label];
  CHECK(per_class.size() == 10);
  for (const auto& [c, n] : per_class) CHECK(n == 50);
  CHECK(t[0].id == 0);
  CHECK(t[499].id == 499);
}

TEST_CASE("synthetic generation is deterministic per seed") {
  CHECK(generate_synthetic(small_params(5)) == generate_synthetic(small_params(5)));
  CHECK_FALSE(generate_synthetic(small_params(5)) == generate_synthetic(small_params(6)));
}

TEST_CASE("class means respect the separation floor") {
  for (std::uint64_t seed : {0u, 1u, 2u, 9u}) {
    auto p = small_params(seed);
    p.dim = 4;  // crowded: repulsion has to work
    p.separation = 2.5;
    const auto means = synthetic_class_means(p);
    for (Eigen::Index a = 0; a < means.rows(); ++a) {
      for (Eigen::Index b = a + 1; b < means.rows(); ++b) {
        CHECK((means.row(a) - means.row(b)).norm() >= p.separation);
      }
    }
  }
}

TEST_CASE("separation of ten noise sigmas is nearest-mean separable") {
  SyntheticParams p;  // defaults: separation 1.0, sigma 0.1, d = 64
  p.n_per_class = 100;
  const auto t = generate_synthetic(p);
  CHECK(oracle::nearest_mean_accuracy(as_matrix(t), labels(t)) >= 0.99);
}

TEST_CASE("holdout shares class means but not samples") {
  const auto p = small_params();
  const auto train = generate_synthetic(p);
  const auto test = generate_synthetic_holdout(p, 20);
  CHECK(test.size() == 200);
  CHECK(test[0].id == static_cast<RecordId>(train.size()));
  CHECK(train[0].features != test[0].features);

  Eigen::MatrixXd both(static_cast<Eigen::Index>(train.size() + test.size()), p.dim);
  both << as_matrix(train), as_matrix(test);
  auto l = labels(train);
  const auto lt = labels(test);
  l.insert(l.end(), lt.begin(), lt.end());
  CHECK(oracle::nearest_mean_accuracy(both, l) >= 0.99);
}

TEST_CASE("invalid synthetic parameters are rejected") {
  auto p = small_params();
  p.n_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(p), ParameterError);
  p = small_params();
  p.n_per_class = 0;
  CHECK_THROWS_AS(generate_synthetic(p), ParameterError);
  p = small_params();
  p.noise_sigma = -1;
  CHECK_THROWS_AS(generate_synthetic(p), ParameterError);
}

TEST_CASE("feature table add enforces dimension and unique ids") {
  FeatureTable t(3);
  t.add({7, 1, {1, 2, 3}});
  CHECK_THROWS_AS(t.add({8, 1, {1, 2}}), ShapeError);
  CHECK_THROWS_AS(t.add({7, 1, {1, 2, 3}}), DataError);
  REQUIRE(t.find(7).has_value());
  CHECK(*t.find(7) == 0);
  CHECK_FALSE(t.find(8).has_value());
}

TEST_CASE("table files round-trip exactly") {
  testutil::TempDir dir("table");
  auto t = generate_synthetic(small_params());
  FeatureTable mixed(t.dim());
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto rec = t[i];
    if (i % 3 == 0) rec.label.reset();
    mixed.add(rec);
  }
  SUBCASE("binary") {
    save_feature_table(mixed, dir / "t.ceft");
    CHECK(load_feature_table(dir / "t.ceft") == mixed);
  }
  SUBCASE("text") {
    save_feature_table(mixed, dir / "t.csv");
    CHECK(load_feature_table(dir / "t.csv") == mixed);
  }
  SUBCASE("explicit format overrides extension") {
    save_feature_table(mixed, dir / "t.csv", TableFormat::kBinary);
    CHECK(testutil::read_bytes(dir / "t.csv").substr(0, 4) == "CEFT");
    CHECK(load_feature_table(dir / "t.csv") == mixed);
  }
}

TEST_CASE("text tables: -1 label means unlabeled") {
  testutil::TempDir dir("text");
  testutil::write_text(dir / "a.csv", "id,label,f0,f1\n1,-1,0.5,0.25\n2,3,1,2\n");
  const auto t = load_feature_table(dir / "a.csv");
  REQUIRE(t.size() == 2);
  CHECK_FALSE(t[0].label.has_value());
  CHECK(*t[1].label == 3);
  CHECK(t[0].features == std::vector<float>{0.5f, 0.25f});
}

TEST_CASE("text table errors name the offending line") {
  testutil::TempDir dir("bad");
  auto message_for = [&](const std::string& text) {
    testutil::write_text(dir / "b.csv", text);
    try {
      load_feature_table(dir / "b.csv");
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  const auto short_row = message_for("id,label,f0,f1,f2,f3\n1,0,1,2,3,4\n2,0,1,2,3\n");
  CHECK(short_row.find(":3:") != std::string::npos);
  CHECK(message_for("id,f0\n1,2\n").find(":1:") != std::string::npos);
  CHECK(message_for("id,label,f0\n1,0,1\n1,0,2\n").find(":3:") != std::string::npos);
  CHECK(message_for("id,label,f0\n1,0,abc\n").find(":2:") != std::string::npos);
}

TEST_CASE("truncated binary table is a format error") {
  testutil::TempDir dir("trunc");
  save_feature_table(generate_synthetic(small_params()), dir / "t.ceft");
  auto bytes = testutil::read_bytes(dir / "t.ceft");
  bytes.resize(bytes.size() - 3);
  testutil::write_text(dir / "t.ceft", bytes);
  CHECK_THROWS_AS(load_feature_table(dir / "t.ceft"), FormatError);
  CHECK_THROWS_AS(load_feature_table(dir / "missing.ceft"), FormatError);
}

TEST_CASE("open-set split sizes") {
  const auto t = generate_synthetic(small_params());
  SUBCASE("K=10 with seen fraction 0.75 gives 7 seen classes") {
    const auto s = make_open_set_split(t, 0.75, 0.5, 0);
    CHECK(s.seen_classes == std::vector<ClassId>{0, 1, 2, 3, 4, 5, 6});
    CHECK(s.novel_classes == std::vector<ClassId>{7, 8, 9});
  }
  SUBCASE("half of a 100-example seen class is labeled") {
    auto p = small_params();
    p.n_per_class = 100;
    const auto s = make_open_set_split(generate_synthetic(p), 0.75, 0.5, 0);
    CHECK(s.labeled_ids.size() == 7 * 50);
  }
}

TEST_CASE("open-set split invariants") {
  const auto t = generate_synthetic(small_params());
  for (std::uint64_t seed : {0u, 1u, 17u}) {
    const auto s = make_open_set_split(t, 0.75, 0.5, seed);
    CHECK(s.labeled_ids.size() + s.unlabeled_ids.size() == t.size());
    CHECK(std::is_sorted(s.labeled_ids.begin(), s.labeled_ids.end()));
    std::set<RecordId> all(s.labeled_ids.begin(), s.labeled_ids.end());
    all.insert(s.unlabeled_ids.begin(), s.unlabeled_ids.end());
    CHECK(all.size() == t.size());
    for (auto id : s.labeled_ids) CHECK(s.is_seen(*t[*t.find(id)].label));
    CHECK(make_open_set_split(t, 0.75, 0.5, seed) == s);
  }
  CHECK_FALSE(make_open_set_split(t, 0.75, 0.5, 1).labeled_ids == make_open_set_split(t, 0.75, 0.5, 2).labeled_ids);
}

TEST_CASE("open-set split preconditions") {
  const auto t = generate_synthetic(small_params());
  CHECK_THROWS_AS(make_open_set_split(t, 0.0, 0.5, 0), ParameterError);
  CHECK_THROWS_AS(make_open_set_split(t, 0.75, 0.0, 0), ParameterError);
  FeatureTable partial(t.dim());
  partial.add(t[0]);
  auto unl = t[1];
  unl.label.reset();
  partial.add(unl);
  CHECK_THROWS_AS(make_open_set_split(partial, 0.75, 0.5, 0), DataError);
}

TEST_CASE("class permutation changes which classes are seen") {
  const auto t = generate_synthetic(small_params());
  const auto p = permute_class_labels(t, 4);
  CHECK(p.size() == t.size());
  CHECK(p.classes() == t.classes());
  std::map<int, int> mapping;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto [it, fresh] = mapping.emplace(*t[i].label, *p[i].label);
    CHECK(it->second == *p[i].label);
    CHECK(p[i].features == t[i].features);
  }
  bool moved = false;
  for (const auto& [a, b] : mapping) moved |= a != b;
  CHECK(moved);
  CHECK(permute_class_labels(t, 4) == p);
}

TEST_CASE("split files round-trip") {
  testutil::TempDir dir("split");
  const auto s = make_open_set_split(generate_synthetic(small_params()), 0.75, 0.5, 2);
  save_split(s, dir / "s.txt");
  CHECK(load_split(dir / "s.txt") == s);
  testutil::write_text(dir / "bad.txt", "seen 0 1\nnovel 2\nlabeled 5 3\nunlabeled\n");
  CHECK_THROWS_AS(load_split(dir / "bad.txt"), FormatError);
}
