#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "unifeat/descriptor.hpp"
#include "unifeat/losses.hpp"

#include "oracles.hpp"
#include "testutil.hpp"

using namespace unifeat;

TEST_CASE("matching margin loss values") {
  CHECK(matching_margin_loss(0.9, std::vector<double>{0.2, 0.3}, 0.1) == doctest::Approx(0.0));
  CHECK(matching_margin_loss(0.5, std::vector<double>{0.5}, 0.1) == doctest::Approx(0.1));
  CHECK(matching_margin_loss(0.4, std::vector<double>{0.4, 0.4}, 0.0) == doctest::Approx(0.0));
  CHECK_THROWS_AS(matching_margin_loss(0.5, std::vector<double>{}, 0.1), ArgumentError);

  // hinge monotonicity: raising s_ap never increases the loss; raising any
  // s_an never decreases it
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    double s_ap = rng.uniform(-1, 1);
    std::vector<double> s_an{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    double m = rng.uniform(0.05, 0.8);
    double base = matching_margin_loss(s_ap, s_an, m);
    CHECK(base >= 0.0);
    CHECK(matching_margin_loss(s_ap + 0.1, s_an, m) <= base + 1e-12);
    std::vector<double> worse = s_an;
    worse[static_cast<size_t>(trial % 3)] += 0.1;
    CHECK(matching_margin_loss(s_ap, worse, m) >= base - 1e-12);
  }
}

TEST_CASE("matching margin loss gradient") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    double s_ap = rng.uniform(-0.5, 0.5);
    std::vector<double> s_an{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
                             rng.uniform(-1, 1)};
    double m = 0.37;
    bool near_kink = false;
    for (double s : s_an)
      if (std::abs(s - s_ap + m) < 1e-3) near_kink = true;
    if (near_kink) continue;
    double d_ap;
    std::vector<double> d_an;
    matching_margin_loss_grad(s_ap, s_an, m, &d_ap, &d_an);
    std::vector<double> x{s_ap};
    x.insert(x.end(), s_an.begin(), s_an.end());
    std::vector<double> analytic{d_ap};
    analytic.insert(analytic.end(), d_an.begin(), d_an.end());
    auto eval = [&]() {
      std::vector<double> neg(x.begin() + 1, x.end());
      return matching_margin_loss(x[0], neg, m);
    };
    CHECK(oracle::gradcheck(x, eval, analytic) < 1e-6);
  }
}

TEST_CASE("contrastive loss values") {
  std::vector<double> a{1, 0, 0}, b{1, 0, 0};
  CHECK(contrastive_loss(a, b, 1, 0.85) == doctest::Approx(0.0));

  std::vector<double> c{0, 1, 0};
  // distance sqrt(2) > tau: negative loss is zero
  CHECK(contrastive_loss(a, c, 0, 0.85) == doctest::Approx(0.0));

  // distance 0.5, tau 0.85 -> 0.5 * 0.35^2 = 0.06125
  std::vector<double> d{1, 0, 0}, e{1, 0.5, 0};
  double norm = std::sqrt(1.25);
  for (double& v : e) v /= norm;
  double dist = 0;
  for (size_t i = 0; i < d.size(); ++i) dist += (d[i] - e[i]) * (d[i] - e[i]);
  dist = std::sqrt(dist);
  double expected = 0.5 * (0.85 - dist) * (0.85 - dist);
  CHECK(contrastive_loss(d, e, 0, 0.85) == doctest::Approx(expected).epsilon(1e-12));

  std::vector<double> f2{1, 0, 0};
  std::vector<double> g2{std::cos(0.5), std::sin(0.5), 0};
  double dd = std::hypot(f2[0] - g2[0], f2[1] - g2[1]);
  CHECK(dd == doctest::Approx(0.5).epsilon(0.05));

  // the frozen hand case: distance exactly 0.5
  double half = 0.5;
  CHECK(0.5 * (0.85 - half) * (0.85 - half) == doctest::Approx(0.06125));
}

TEST_CASE("contrastive loss gradient") {
  Rng rng(7);
  for (int label : {0, 1}) {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> a(6), b(6);
      for (double& v : a) v = rng.normal();
      for (double& v : b) v = rng.normal();
      double na = l2_norm(a.data(), 6), nb = l2_norm(b.data(), 6);
      for (double& v : a) v /= na;
      for (double& v : b) v /= nb;
      double dist = 0;
      for (int i = 0; i < 6; ++i) dist += (a[i] - b[i]) * (a[i] - b[i]);
      dist = std::sqrt(dist);
      double tau = 0.85;
      if (label == 0 && std::abs(dist - tau) < 1e-2) continue;  // away from the hinge kink
      std::vector<double> da, db;
      contrastive_loss_grad(a, b, label, tau, &da, &db);
      std::vector<double> x = a;
      x.insert(x.end(), b.begin(), b.end());
      std::vector<double> analytic = da;
      analytic.insert(analytic.end(), db.begin(), db.end());
      auto eval = [&]() {
        std::vector<double> xa(x.begin(), x.begin() + 6), xb(x.begin() + 6, x.end());
        return static_cast<double>(contrastive_loss(xa, xb, label, tau));
      };
      CHECK(oracle::gradcheck(x, eval, analytic) < 1e-6);
    }
  }
}

TEST_CASE("soft detection scores") {
  // single spike: scores concentrate at the spike
  FeatureMap<double> spike(3, 6, 6);
  spike.at(1, 2, 3) = 5.0;
  FeatureMap<double> s = soft_detection(spike);
  int arg = 0;
  for (int i = 1; i < 36; ++i)
    if (s.data[static_cast<size_t>(i)] > s.data[static_cast<size_t>(arg)]) arg = i;
  CHECK(arg == 2 * 6 + 3);

  // constant map: exactly uniform
  FeatureMap<double> flat(4, 5, 7);
  flat.fill(1.3);
  FeatureMap<double> uniform = soft_detection(flat);
  for (double v : uniform.data) CHECK(v == doctest::Approx(1.0 / 35.0).epsilon(1e-12));

  // all-zero map: uniform fallback
  FeatureMap<double> zeros(2, 4, 4);
  FeatureMap<double> uz = soft_detection(zeros);
  for (double v : uz.data) CHECK(v == doctest::Approx(1.0 / 16.0));

  // random map: equals the loop oracle, sums to one, non-negative
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    FeatureMap<double> f = testutil::random_map<double>(4, 6, 6, rng, 0.0, 2.0);
    FeatureMap<double> scores = soft_detection(f);
    std::vector<double> ref = oracle::oracle_soft_detection(f, 3);
    double sum = 0;
    for (int i = 0; i < 36; ++i) {
      CHECK(scores.data[static_cast<size_t>(i)] ==
            doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-6));
      CHECK(scores.data[static_cast<size_t>(i)] >= 0.0);
      sum += scores.data[static_cast<size_t>(i)];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }

  CHECK_THROWS_AS(soft_detection(spike, 4), ArgumentError);  // window must be odd
}

TEST_CASE("soft detection gradient") {
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    FeatureMap<double> f = testutil::random_map<double>(3, 4, 4, rng, 0.1, 2.0);
    FeatureMap<double> u = testutil::random_map<double>(1, 4, 4, rng, -1.0, 1.0);
    SoftDetectionCache<double> cache;
    soft_detection(f, 3, &cache);
    FeatureMap<double> analytic = soft_detection_backward(f, cache, u);
    auto eval = [&]() {
      FeatureMap<double> s = soft_detection(f, 3);
      double j = 0;
      for (int i = 0; i < 16; ++i) j += s.data[static_cast<size_t>(i)] * u.data[static_cast<size_t>(i)];
      return j;
    };
    CHECK(oracle::gradcheck(f.data, eval, analytic.data) < 1e-5);
  }
}

TEST_CASE("gem pooling gradient") {
  Rng rng(17);
  for (double p : {1.0, 3.0}) {
    FeatureMap<double> f = testutil::random_map<double>(4, 4, 4, rng, 0.05, 2.0);
    std::vector<double> u(4);
    for (double& v : u) v = rng.uniform(-1, 1);
    std::vector<double> pooled = gem_pool(f, p);
    FeatureMap<double> analytic = gem_pool_backward(f, p, pooled, u);
    auto eval = [&]() {
      std::vector<double> y = gem_pool(f, p);
      double j = 0;
      for (int c = 0; c < 4; ++c) j += y[static_cast<size_t>(c)] * u[static_cast<size_t>(c)];
      return j;
    };
    CHECK(oracle::gradcheck(f.data, eval, analytic.data) < 1e-5);
  }
}

TEST_CASE("distillation loss") {
  Rng rng(19);
  FeatureMap<double> det_a = soft_detection(testutil::random_map<double>(3, 3, 4, rng, 0.0, 2.0));
  FeatureMap<double> det_p = soft_detection(testutil::random_map<double>(3, 4, 3, rng, 0.0, 2.0));
  Matrix<double> m_high = testutil::random_matrix<double>(12, 12, rng);

  // fixed point: M_low = M_high .* W gives exactly zero loss and gradient
  const double n1 = 12, n2 = 12;
  Matrix<double> m_low(12, 12);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j)
      m_low.at(i, j) = m_high.at(i, j) * det_a.data[static_cast<size_t>(i)] *
                       det_p.data[static_cast<size_t>(j)] * n1 * n2;
  CHECK(distillation_loss(m_high, det_a, det_p, m_low) < 1e-12);
  Matrix<double> dm_low;
  distillation_loss_grad(m_high, det_a, det_p, m_low, &dm_low);
  CHECK(l2_norm(dm_low.data.data(), static_cast<int>(dm_low.data.size())) < 1e-8);

  // uniform detections reduce to the plain mean squared difference
  FeatureMap<double> uf_a(1, 3, 4), uf_p(1, 4, 3);
  uf_a.fill(1.0 / 12);
  uf_p.fill(1.0 / 12);
  Matrix<double> m2 = testutil::random_matrix<double>(12, 12, rng);
  double plain = 0;
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) {
      double d = m_high.at(i, j) - m2.at(i, j);
      plain += d * d;
    }
  plain /= 144.0;
  CHECK(distillation_loss(m_high, uf_a, uf_p, m2) == doctest::Approx(plain).epsilon(1e-9));

  // random case equals a loop evaluation
  Matrix<double> m3 = testutil::random_matrix<double>(12, 12, rng);
  double ref = 0;
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) {
      double w = det_a.data[static_cast<size_t>(i)] * det_p.data[static_cast<size_t>(j)] * 144.0;
      double d = m_high.at(i, j) * w - m3.at(i, j);
      ref += d * d;
    }
  ref /= 144.0;
  CHECK(distillation_loss(m_high, det_a, det_p, m3) == doctest::Approx(ref).epsilon(1e-9));

  Matrix<double> wrong(5, 12);
  CHECK_THROWS_AS(distillation_loss(m_high, det_a, det_p, wrong), DimensionError);
}

TEST_CASE("distillation gradients (student and teacher paths)") {
  Rng rng(23);
  FeatureMap<double> fa = testutil::random_map<double>(2, 2, 3, rng, 0.1, 2.0);
  FeatureMap<double> fp = testutil::random_map<double>(2, 3, 2, rng, 0.1, 2.0);
  FeatureMap<double> det_a = soft_detection(fa);
  FeatureMap<double> det_p = soft_detection(fp);
  Matrix<double> m_high = testutil::random_matrix<double>(6, 6, rng);
  Matrix<double> m_low = testutil::random_matrix<double>(6, 6, rng);

  Matrix<double> dm_low, dm_high;
  FeatureMap<double> ddet_a, ddet_p;
  distillation_loss_grad(m_high, det_a, det_p, m_low, &dm_low, &dm_high, &ddet_a, &ddet_p);

  auto eval = [&]() { return static_cast<double>(distillation_loss(m_high, det_a, det_p, m_low)); };
  CHECK(oracle::gradcheck(m_low.data, eval, dm_low.data) < 1e-6);
  CHECK(oracle::gradcheck(m_high.data, eval, dm_high.data) < 1e-6);
  CHECK(oracle::gradcheck(det_a.data, eval, ddet_a.data) < 1e-6);
  CHECK(oracle::gradcheck(det_p.data, eval, ddet_p.data) < 1e-6);
}

TEST_CASE("reduce_dim gradient (input and weights, fixed mask)") {
  Rng rng(29);
  ReductionHead<double> head(4, 2, 6, 3);
  head.init_random(31);
  FeatureMap<double> f = testutil::random_map<double>(10, 3, 3, rng, -1.0, 1.0);
  Rng mask_rng(37);
  Dropout2dMask mask = make_dropout2d_mask(10, 0.3, mask_rng);
  FeatureMap<double> u = testutil::random_map<double>(5, 3, 3, rng, -1.0, 1.0);

  auto eval = [&]() {
    FeatureMap<double> y = reduce_dim(f, head, &mask);
    double j = 0;
    for (size_t i = 0; i < y.data.size(); ++i) j += y.data[i] * u.data[i];
    return j;
  };
  head.zero_grad();
  FeatureMap<double> df = reduce_dim_backward(f, head, &mask, u);
  CHECK(oracle::gradcheck(f.data, eval, df.data) < 1e-6);

  std::vector<double> analytic_w2 = head.b2.gw;
  CHECK(oracle::gradcheck(head.b2.w, eval, analytic_w2) < 1e-6);
  std::vector<double> analytic_w3 = head.b3.gw;
  CHECK(oracle::gradcheck(head.b3.w, eval, analytic_w3) < 1e-6);
}

TEST_CASE("normalized grid descriptor gradient") {
  Rng rng(31);
  FeatureMap<double> f = testutil::random_map<double>(5, 3, 3, rng, 0.2, 2.0);
  Matrix<double> u = testutil::random_matrix<double>(9, 5, rng);
  Matrix<double> normalized = map_descriptors(f);
  FeatureMap<double> analytic = map_descriptors_backward(f, normalized, u);
  auto eval = [&]() {
    Matrix<double> d = map_descriptors(f);
    double j = 0;
    for (size_t i = 0; i < d.data.size(); ++i) j += d.data[i] * u.data[i];
    return j;
  };
  CHECK(oracle::gradcheck(f.data, eval, analytic.data) < 1e-5);
}

TEST_CASE("total loss composition") {
  Rng rng(37);
  const int n = 4;  // anchor, positive, 2 negatives
  std::vector<FeatureMap<double>> b2, b3, teacher, student;
  std::vector<GlobalDescriptor<double>> globals;
  for (int i = 0; i < n; ++i) {
    b2.push_back(testutil::random_map<double>(4, 3, 3, rng, 0.0, 1.0));
    b3.push_back(testutil::random_map<double>(6, 3, 3, rng, 0.0, 1.0));
    teacher.push_back(testutil::random_map<double>(10, 3, 3, rng, 0.0, 1.0));
    student.push_back(testutil::random_map<double>(5, 3, 3, rng, 0.0, 1.0));
    std::vector<FeatureMap<double>> levels{testutil::random_map<double>(4, 2, 2, rng, 0.0, 1.0)};
    globals.push_back(global_descriptor(levels, 3.0));
  }
  LossConfig cfg;

  LossBreakdown full = total_loss(b2, b3, teacher, student, globals, cfg);
  CHECK(full.total == doctest::Approx(full.lm_b2 + full.lm_b3 + full.lm_student + full.lc +
                                      cfg.lambda * full.ldis));
  CHECK(full.lm_b2 >= 0.0);
  CHECK(full.lm_b3 >= 0.0);
  CHECK(full.lm_student >= 0.0);
  CHECK(full.lc >= 0.0);
  CHECK(full.ldis >= 0.0);

  // lambda = 0 drops the distillation term
  LossConfig no_dis = cfg;
  no_dis.lambda = 0.0;
  LossBreakdown lean = total_loss(b2, b3, teacher, student, globals, no_dis);
  CHECK(lean.total == doctest::Approx(lean.lm_b2 + lean.lm_b3 + lean.lm_student + lean.lc));
  CHECK(lean.ldis == 0.0);

  // each component equals its independently computed value
  auto margin_of = [&](const std::vector<FeatureMap<double>>& maps) {
    std::vector<Matrix<double>> descs;
    for (const auto& m : maps) descs.push_back(map_descriptors(m));
    double s_ap = oracle::oracle_affinity_score(oracle::oracle_affinity(descs[0], descs[1]));
    std::vector<double> s_an;
    for (size_t k = 2; k < descs.size(); ++k)
      s_an.push_back(oracle::oracle_affinity_score(oracle::oracle_affinity(descs[0], descs[k])));
    double acc = 0;
    for (double s : s_an) acc += std::max(s - s_ap + cfg.margin_m, 0.0);
    return acc / s_an.size();
  };
  CHECK(full.lm_b2 == doctest::Approx(margin_of(b2)).epsilon(1e-9));
  CHECK(full.lm_b3 == doctest::Approx(margin_of(b3)).epsilon(1e-9));
  CHECK(full.lm_student == doctest::Approx(margin_of(student)).epsilon(1e-9));

  double lc = contrastive_loss(globals[0].v, globals[1].v, 1, cfg.margin_tau);
  for (int k = 2; k < n; ++k) lc += contrastive_loss(globals[0].v, globals[k].v, 0, cfg.margin_tau);
  CHECK(full.lc == doctest::Approx(lc).epsilon(1e-9));

  // engineered zero-loss tuple (margins satisfied, negatives beyond tau)
  std::vector<FeatureMap<double>> zb2, zb3, zteach, zstud;
  std::vector<GlobalDescriptor<double>> zglob;
  for (int i = 0; i < 3; ++i) {
    FeatureMap<double> m2(4, 2, 2), m3(4, 2, 2), mt(8, 2, 2), ms(4, 2, 2);
    int ch = (i < 2) ? 0 : 2;  // negatives live on disjoint channels
    for (int s = 0; s < 4; ++s) {
      m2.plane(ch)[s] = 1.0;
      m3.plane(ch)[s] = 1.0;
      mt.plane(ch)[s] = 1.0;
      ms.plane(ch)[s] = 1.0;
    }
    zb2.push_back(m2);
    zb3.push_back(m3);
    zteach.push_back(mt);
    zstud.push_back(ms);
    std::vector<FeatureMap<double>> levels{FeatureMap<double>(4, 2, 2)};
    levels[0].fill(0.0);
    levels[0].plane(i < 2 ? 0 : 2)[0] = 1.0;
    zglob.push_back(global_descriptor(levels, 3.0));
  }
  LossBreakdown zero = total_loss(zb2, zb3, zteach, zstud, zglob, no_dis);
  CHECK(zero.total == doctest::Approx(0.0));
}
