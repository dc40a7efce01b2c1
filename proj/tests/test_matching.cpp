#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "unifeat/matching.hpp"

#include "oracles.hpp"
#include "testutil.hpp"

using namespace unifeat;

namespace {

Matrix<double> orthonormal_rows(int n, int dim, Rng& rng) {
  // Gram-Schmidt on random normal rows
  Matrix<double> m(n, dim);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < dim; ++c) m.at(r, c) = rng.normal();
    for (int prev = 0; prev < r; ++prev) {
      double dot = 0;
      for (int c = 0; c < dim; ++c) dot += m.at(r, c) * m.at(prev, c);
      for (int c = 0; c < dim; ++c) m.at(r, c) -= dot * m.at(prev, c);
    }
    double norm = l2_norm(m.row(r), dim);
    for (int c = 0; c < dim; ++c) m.at(r, c) /= norm;
  }
  return m;
}

DescriptorSet<double> as_set(Matrix<double> m) {
  DescriptorSet<double> d;
  d.vectors = std::move(m);
  d.flags.assign(static_cast<size_t>(d.vectors.rows), 0);
  return d;
}

}  // namespace

TEST_CASE("affinity matrix basics") {
  Rng rng(7);
  Matrix<double> ortho = orthonormal_rows(4, 6, rng);
  Matrix<double> m = affinity_matrix(ortho, ortho);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(m.at(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));

  Matrix<double> a = testutil::random_unit_rows<double>(5, 8, rng);
  Matrix<double> b = testutil::random_unit_rows<double>(7, 8, rng);
  Matrix<double> ab = affinity_matrix(a, b);
  Matrix<double> ref = oracle::oracle_affinity(a, b);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j) {
      CHECK(std::abs(ab.at(i, j)) <= 1.0 + 1e-12);  // Cauchy-Schwarz on unit rows
      CHECK(ab.at(i, j) == doctest::Approx(ref.at(i, j)).epsilon(1e-6));
    }

  Matrix<double> wrong(3, 5);
  CHECK_THROWS_AS(affinity_matrix(a, wrong), DimensionError);
}

TEST_CASE("affinity score frozen hand case and edge cases") {
  Matrix<double> m(3, 2);
  m.at(0, 0) = 0.9;
  m.at(0, 1) = 0.1;
  m.at(1, 0) = 0.2;
  m.at(1, 1) = 0.8;
  m.at(2, 0) = 0.5;
  m.at(2, 1) = 0.4;
  CHECK(std::abs(affinity_score(m) - 19.0 / 24.0) < 1e-9);  // (0.9+0.8+0.5)/6 + (0.9+0.8)/4

  Matrix<double> eye(4, 4);
  for (int i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  CHECK(affinity_score(eye) == 1.0);

  Matrix<double> zeros(3, 5);
  CHECK(affinity_score(zeros) == 0.0);

  Matrix<double> empty;
  CHECK_THROWS_AS(affinity_score(empty), ArgumentError);
}

TEST_CASE("affinity score symmetry and self-score maximality") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix<double> m = testutil::random_matrix<double>(rng.uniform_int(1, 6), rng.uniform_int(1, 6), rng);
    Matrix<double> mt(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
      for (int j = 0; j < m.cols; ++j) mt.at(j, i) = m.at(i, j);
    CHECK(affinity_score(m) == doctest::Approx(affinity_score(mt)).epsilon(1e-12));
  }
  for (int trial = 0; trial < 10; ++trial) {
    Matrix<double> d = testutil::random_unit_rows<double>(6, 12, rng);
    CHECK(affinity_score(affinity_matrix(d, d)) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("affinity score oracle equivalence and argmax variant") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix<double> m = testutil::random_matrix<double>(rng.uniform_int(1, 9), rng.uniform_int(1, 9), rng);
    double s = affinity_score(m);
    CHECK(s == doctest::Approx(oracle::oracle_affinity_score(m)).epsilon(1e-12));
    std::vector<int> ra, ca;
    CHECK(affinity_score_argmax(m, &ra, &ca) == doctest::Approx(s).epsilon(1e-12));
    Matrix<double> dm;
    CHECK(affinity_score_grad(m, &dm) == doctest::Approx(s).epsilon(1e-12));
    // the sparse gradient re-evaluates the forward value
    double recon = 0;
    for (int i = 0; i < m.rows; ++i)
      for (int j = 0; j < m.cols; ++j) recon += dm.at(i, j) * m.at(i, j);
    CHECK(recon == doctest::Approx(s).epsilon(1e-9));
  }
}

TEST_CASE("orthogonal invariance of the affinity matrix") {
  Rng rng(17);
  Matrix<double> q = orthonormal_rows(8, 8, rng);  // square orthogonal
  Matrix<double> a = testutil::random_unit_rows<double>(5, 8, rng);
  Matrix<double> b = testutil::random_unit_rows<double>(6, 8, rng);
  auto rotate = [&](const Matrix<double>& m) {
    Matrix<double> out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i)
      for (int j = 0; j < m.cols; ++j) {
        double s = 0;
        for (int k = 0; k < m.cols; ++k) s += m.at(i, k) * q.at(j, k);
        out.at(i, j) = s;
      }
    return out;
  };
  Matrix<double> before = affinity_matrix(a, b);
  Matrix<double> after = affinity_matrix(rotate(a), rotate(b));
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) CHECK(after.at(i, j) == doctest::Approx(before.at(i, j)).epsilon(1e-6));
}

TEST_CASE("mutual nearest neighbor matching") {
  Rng rng(23);
  Matrix<double> ortho = orthonormal_rows(5, 9, rng);
  MatchSet self = mutual_nn_matches(as_set(ortho), as_set(ortho));
  REQUIRE(self.size() == 5);
  for (const Match& m : self) {
    CHECK(m.index_a == m.index_b);
    CHECK(m.similarity == doctest::Approx(1.0));
  }

  MatchSet single = mutual_nn_matches(as_set(testutil::random_unit_rows<double>(1, 4, rng)),
                                      as_set(testutil::random_unit_rows<double>(1, 4, rng)));
  CHECK(single.size() == 1);

  for (int trial = 0; trial < 30; ++trial) {
    Matrix<double> a = testutil::random_unit_rows<double>(rng.uniform_int(1, 10), 6, rng);
    Matrix<double> b = testutil::random_unit_rows<double>(rng.uniform_int(1, 10), 6, rng);
    MatchSet got = mutual_nn_matches(as_set(a), as_set(b));
    auto ref = oracle::oracle_mutual_nn(a, b);
    REQUIRE(got.size() == ref.size());
    for (size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].index_a == ref[i].first);
      CHECK(got[i].index_b == ref[i].second);
    }
    // injectivity in both coordinates
    std::unordered_set<int> seen_a, seen_b;
    for (const Match& m : got) {
      CHECK(seen_a.insert(m.index_a).second);
      CHECK(seen_b.insert(m.index_b).second);
    }
  }
}

TEST_CASE("mutual nn tie-break is deterministic") {
  Matrix<double> a(1, 2);
  a.at(0, 0) = 1.0;
  Matrix<double> b(3, 2);
  b.at(0, 0) = 0.5;  // rows 0 and 2 tie; lowest index wins
  b.at(1, 0) = 0.2;
  b.at(2, 0) = 0.5;
  MatchSet m = mutual_nn_matches(as_set(a), as_set(b));
  REQUIRE(m.size() == 1);
  CHECK(m[0].index_b == 0);
}

TEST_CASE("mma curve") {
  std::vector<double> thresholds = default_mma_thresholds();

  KeypointSet kps_a, kps_b;
  for (int i = 0; i < 4; ++i) {
    Keypoint k;
    k.x = 10.0 * i + 5;
    k.y = 3.0 * i + 2;
    kps_a.push_back(k);
    kps_b.push_back(k);
  }
  MatchSet matches;
  for (int i = 0; i < 4; ++i) matches.push_back({i, i, 1.0});
  std::vector<double> curve = mma_curve(matches, kps_a, kps_b, Homography::identity(), thresholds);
  for (double v : curve) CHECK(v == 1.0);

  // one match with error 2.5 px -> step curve
  KeypointSet a1(1), b1(1);
  a1[0].x = 10;
  a1[0].y = 10;
  b1[0].x = 11.5;
  b1[0].y = 12.0;  // error = hypot(1.5, 2) = 2.5
  MatchSet m1{{0, 0, 1.0}};
  std::vector<double> step = mma_curve(m1, a1, b1, Homography::identity(), thresholds);
  CHECK(step[0] == 0.0);
  CHECK(step[1] == 0.0);
  for (size_t t = 2; t < step.size(); ++t) CHECK(step[t] == 1.0);

  // monotone in the threshold, equals a direct loop on random data
  Rng rng(29);
  Homography H = make_similarity_homography(100, 100, 8.0, 1.05, 2.0, -1.0);
  KeypointSet ra(20), rb(20);
  MatchSet rm;
  for (int i = 0; i < 20; ++i) {
    ra[i].x = rng.uniform(5, 95);
    ra[i].y = rng.uniform(5, 95);
    double px, py;
    REQUIRE(H.project(ra[i].x, ra[i].y, &px, &py));
    rb[i].x = px + rng.uniform(-4, 4);
    rb[i].y = py + rng.uniform(-4, 4);
    rm.push_back({i, i, 0.5});
  }
  std::vector<double> rc = mma_curve(rm, ra, rb, H, thresholds);
  for (size_t t = 1; t < rc.size(); ++t) CHECK(rc[t] >= rc[t - 1]);
  for (size_t t = 0; t < thresholds.size(); ++t) {
    int count = 0;
    for (int i = 0; i < 20; ++i) {
      double px, py;
      H.project(ra[i].x, ra[i].y, &px, &py);
      if (std::hypot(px - rb[i].x, py - rb[i].y) <= thresholds[t]) ++count;
    }
    CHECK(rc[t] == doctest::Approx(count / 20.0).epsilon(1e-12));
  }

  // empty matches -> zero curve; singular homography -> error
  std::vector<double> zeros = mma_curve(MatchSet{}, ra, rb, H, thresholds);
  for (double v : zeros) CHECK(v == 0.0);
  Homography singular;
  for (double& h : singular.h) h = 0.0;
  CHECK_THROWS_AS(mma_curve(rm, ra, rb, singular, thresholds), ArgumentError);
}

TEST_CASE("points mapping to infinity count as incorrect") {
  Homography H = Homography::identity();
  H.h[6] = 1.0;
  H.h[8] = -10.0;  // w = x - 10: zero at x = 10
  KeypointSet a(2), b(2);
  a[0].x = 10.0;  // maps to infinity
  a[0].y = 1.0;
  a[1].x = 20.0;
  a[1].y = 1.0;
  double px, py;
  REQUIRE(H.project(a[1].x, a[1].y, &px, &py));
  b[1].x = px;
  b[1].y = py;
  MatchSet m{{0, 0, 1.0}, {1, 1, 1.0}};
  std::vector<double> curve = mma_curve(m, a, b, H, {1.0});
  CHECK(curve[0] == doctest::Approx(0.5));
}
