#include <doctest.h>

#include <algorithm>
#include <bit>
#include <numeric>
#include <random>

#include "combemb/error.hpp"
#include "combemb/retrieval.hpp"
#include "combemb/rng.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace combemb;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

std::vector<MatrixXd> random_codebook(int m, int d2, int k, Rng& rng) {
  std::normal_distribution<double> g;
  std::vector<MatrixXd> cb;
  for (int s = 0; s < m; ++s) {
    MatrixXd t(d2, k);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = g(rng);
    t.colwise().normalize();
    cb.push_back(t);
  }
  return cb;
}

/// A random index of n items whose codes are drawn uniformly; ids are
/// shuffled so ranking ties exercise the id rule.
struct RandomDb {
  CodeIndex index;
  std::vector<Code> codes;
  std::vector<RecordId> ids;
};

RandomDb random_db(int n, const std::vector<int>& sizes, const std::vector<MatrixXd>& cb, Rng& rng) {
  RandomDb db{CodeIndex(sizes), {}, {}};
  std::vector<RecordId> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 1000);
  std::shuffle(ids.begin(), ids.end(), rng);
  for (int i = 0; i < n; ++i) {
    Code c;
    for (int k : sizes) c.push_back(std::uniform_int_distribution<int>(0, k - 1)(rng));
    db.index.add(ids[static_cast<std::size_t>(i)], i % 5, c);
    db.codes.push_back(c);
  }
  db.ids = ids;
  db.index.set_codebook(cb);
  return db;
}

}  // namespace

TEST_CASE("encoding picks the most similar prototype") {
  MatrixXd theta(2, 3);
  theta << 1, 0, -1, 0, 1, 0;
  CHECK(encode_embedding(vec({0, 1}), {theta}) == Code{1});
  CHECK(encode_embedding(vec({1, 1, -1, 0}), {theta, theta}) == Code{0, 2});

  MatrixXd tie(2, 2);
  tie << 1, 0, 0, 1;
  CHECK(encode_embedding(vec({1, 1}), {tie}) == Code{0});

  auto rng = make_rng(3, 1);
  std::normal_distribution<double> g;
  const auto cb = random_codebook(1, 5, 4, rng);
  for (int t = 0; t < 200; ++t) {
    VectorXd z(5);
    for (auto& v : z) v = g(rng);
    CHECK(encode_embedding(z, cb)[0] == oracle::brute_argmax(z, cb[0]));
  }
}

TEST_CASE("asymmetric distance") {
  MatrixXd a(2, 2), b(2, 2);
  a << 1, 0, 0, 1;
  b << 0.6, -0.6, 0.8, 0.8;
  SUBCASE("query on its own prototypes") {
    CHECK(asymmetric_distance(vec({2, 0, 0.3, 0.4}), {0, 0}, {a, b}) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("orthogonal single partition") {
    CHECK(asymmetric_distance(vec({1, 0}), {1}, {a}) == doctest::Approx(1.0));
  }
  SUBCASE("sum of per-partition cosine distances") {
    const VectorXd q = vec({0.2, -0.9, 1.5, 0.1});
    const double want = (1 - oracle::cosine(vec({0.2, -0.9}), a.col(1))) + (1 - oracle::cosine(vec({1.5, 0.1}), b.col(1)));
    CHECK(asymmetric_distance(q, {1, 1}, {a, b}) == doctest::Approx(want).epsilon(1e-14));
  }
  SUBCASE("index out of range") {
    CHECK_THROWS_AS(asymmetric_distance(vec({1, 0}), {2}, {a}), LookupError);
  }
}

TEST_CASE("asymmetric distance stays within [0, 2M]") {
  auto rng = make_rng(4, 1);
  std::normal_distribution<double> g;
  const auto cb = random_codebook(3, 4, 4, rng);
  for (int t = 0; t < 300; ++t) {
    VectorXd z(12);
    for (auto& v : z) v = g(rng);
    Code c{t % 4, (t / 4) % 4, (t / 16) % 4};
    const double d = asymmetric_distance(z, c, cb);
    CHECK(d >= 0);
    CHECK(d <= 6);
  }
}

TEST_CASE("bit packing round-trips") {
  auto rng = make_rng(5, 1);
  for (int k : {2, 4, 8, 16}) {
    for (int m : {1, 3, 6, 7}) {
      const std::vector<int> sizes(static_cast<std::size_t>(m), k);
      const std::size_t bytes = code_bytes(sizes);
      CHECK(bytes == static_cast<std::size_t>((m * static_cast<int>(std::bit_width(static_cast<unsigned>(k - 1))) + 7) / 8));
      for (int t = 0; t < 20; ++t) {
        Code c;
        for (int s = 0; s < m; ++s) c.push_back(std::uniform_int_distribution<int>(0, k - 1)(rng));
        std::vector<std::uint8_t> buf(bytes, 0xAB);
        pack_code(c, sizes, buf);
        CHECK(unpack_code(buf, sizes) == c);
      }
    }
  }
}

TEST_CASE("bit layout is least significant bit first") {
  std::vector<std::uint8_t> buf(2);
  pack_code({1, 2, 3, 0, 2}, std::vector<int>(5, 4), buf);
  // 01 | 10 | 11 | 00 -> 0b00111001, then 10 -> 0b00000010
  CHECK(buf[0] == 0x39);
  CHECK(buf[1] == 0x02);
  std::vector<std::uint8_t> one(1);
  pack_code({3, 1}, {8, 2}, one);  // 3 bits then 1 bit
  CHECK(one[0] == 0x0B);
}

TEST_CASE("code size matches the bit budget") {
  for (int m : {6, 12, 24}) {
    CodeIndex idx(std::vector<int>(static_cast<std::size_t>(m), 4));
    CHECK(idx.bits_per_item() == 2 * m);
    CHECK(idx.bytes_per_item() == static_cast<std::size_t>((2 * m + 7) / 8));
  }
  CodeIndex mixed({3, 5, 2});
  CHECK(mixed.bits_per_item() == 2 + 3 + 1);
  CHECK(mixed.bytes_per_item() == 1);
}

TEST_CASE("search") {
  auto rng = make_rng(6, 1);
  std::normal_distribution<double> g;
  const std::vector<int> sizes{4, 4, 4};
  const auto cb = random_codebook(3, 2, 4, rng);

  SUBCASE("single item") {
    CodeIndex idx(sizes);
    idx.add(42, std::nullopt, {1, 2, 3});
    idx.set_codebook(cb);
    const auto hits = search(vec({1, 0, 0, 1, 1, 1}), idx, 5);
    REQUIRE(hits.size() == 1);
    CHECK(hits[0].id == 42);
  }
  SUBCASE("topk zero is empty") {
    auto db = random_db(10, sizes, cb, rng);
    CHECK(search(vec({1, 0, 0, 1, 1, 1}), db.index, 0).empty());
  }
  SUBCASE("ranking equals naive scoring") {
    for (int t = 0; t < 5; ++t) {
      auto db = random_db(100, sizes, cb, rng);
      VectorXd q(6);
      for (auto& v : q) v = g(rng);
      const auto hits = search(q, db.index, 100);
      const auto naive = oracle::naive_ranking(q, db.codes, db.ids, cb);
      REQUIRE(hits.size() == naive.size());
      for (std::size_t i = 0; i < hits.size(); ++i) {
        CHECK(hits[i].id == naive[i].second);
      }
      CHECK(search(q, db.index, 7).size() == 7);
    }
  }
  SUBCASE("search requires a codebook") {
    CodeIndex idx(sizes);
    idx.add(1, std::nullopt, {0, 0, 0});
    CHECK_THROWS(search(vec({1, 0, 0, 1, 1, 1}), idx, 1));
  }
}

TEST_CASE("average precision") {
  CHECK(average_precision({true, true, false}) == doctest::Approx(1.0));
  CHECK(std::abs(average_precision({false, true, true}) - 0.5 * (0.5 + 2.0 / 3.0)) < 1e-12);
  CHECK(average_precision({false, false}) == 0.0);
  CHECK(average_precision({}) == 0.0);
}

TEST_CASE("mean average precision") {
  MatrixXd theta(2, 2);
  theta << 1, 0, 0, 1;
  CodeIndex idx({2});
  idx.add(1, 0, {0});
  idx.add(2, 1, {1});
  idx.add(3, 0, {0});
  idx.set_codebook({theta});
  CHECK(mean_average_precision({{vec({1, 0}), 0}}, idx) == doctest::Approx(1.0));
  CHECK(mean_average_precision({{vec({0, 1}), 0}}, idx) == doctest::Approx(0.5 * (0.5 + 2.0 / 3.0)));
  CHECK(mean_average_precision({{vec({1, 0}), 0}, {vec({1, 0}), 1}}, idx) ==
        doctest::Approx(0.5 * (1.0 + 1.0 / 3.0)));
  CHECK_THROWS_AS(mean_average_precision({}, idx), ParameterError);
}

TEST_CASE("code files round-trip") {
  testutil::TempDir dir("codes");
  auto rng = make_rng(7, 1);
  const std::vector<int> sizes{4, 2, 8};
  const auto cb = random_codebook(3, 3, 8, rng);
  std::vector<MatrixXd> fitted{cb[0].leftCols(4), cb[1].leftCols(2), cb[2]};
  auto db = random_db(50, sizes, fitted, rng);
  save_codes(db.index, dir / "c.cecd");
  auto back = load_codes(dir / "c.cecd");
  CHECK(testutil::read_bytes(dir / "c.cecd").substr(0, 4) == "CECD");
  REQUIRE(back.size() == 50);
  CHECK(back.sizes() == sizes);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(back.id(i) == db.index.id(i));
    CHECK(back.label(i) == db.index.label(i));
    CHECK(back.code(i) == db.codes[i]);
  }
  auto bytes = testutil::read_bytes(dir / "c.cecd");
  testutil::write_text(dir / "t.cecd", bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(load_codes(dir / "t.cecd"), FormatError);
  CHECK_THROWS_AS(back.set_codebook({cb[0]}), ShapeError);
}
