#include "dif/detector.hpp"

#include <doctest.h>

#include <cmath>

using namespace dif;

namespace {

Tensor<float> noise_image(int s, Rng& rng, float sigma = 1.f) {
  Tensor<float> t({3, s, s});
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data[i] = (float)rng.normal(sigma);
  return t;
}

FingerprintRecord record_with_means(double mu_r, double mu_g) {
  FingerprintRecord rec;
  rec.mu_real = mu_r;
  rec.mu_gen = mu_g;
  return rec;
}

// A dataset whose gen half carries `pattern` on top of noise, plus a record
// scoring against that same pattern. Strong amplitude keeps decisions exact.
ResidualDataset pattern_dataset(const std::string& id, const Tensor<float>& pattern, int n,
                                Rng& rng) {
  ResidualDataset d;
  d.model_id = id;
  d.denoiser_id = "gaussian:3";
  for (int i = 0; i < n; ++i) {
    d.real.push_back(noise_image(pattern.shape[1], rng, 0.3f));
    auto g = noise_image(pattern.shape[1], rng, 0.3f);
    g.data += pattern.data;
    d.gen.push_back(g);
  }
  return d;
}

FingerprintRecord pattern_record(const ResidualDataset& d, const Tensor<float>& pattern) {
  FingerprintRecord proto;
  proto.denoiser_id = d.denoiser_id;
  proto.source_model_id = d.model_id;
  return make_reference_record(pattern, d.real, d.gen, proto);
}

}  // namespace

TEST_CASE("classify_rho nearest-mean rule with Real tiebreak") {
  auto rec = record_with_means(0.0, 0.6);
  CHECK(classify_rho(0.5, rec) == Label::Generated);
  CHECK(classify_rho(0.05, rec) == Label::Real);
  CHECK(classify_rho(0.3, rec) == Label::Real);  // exact tie
  CHECK(classify_rho(0.31, rec) == Label::Generated);
  CHECK(classify_rho(0.29, rec) == Label::Real);
}

TEST_CASE("classify maps degenerate residuals to Real") {
  Rng rng(2);
  FingerprintRecord rec;
  rec.fingerprint = noise_image(8, rng);
  rec.mu_real = -0.5;
  rec.mu_gen = 0.1;  // zero rho would be nearer mu_gen
  CHECK(classify_rho(0.0, rec) == Label::Generated);
  CHECK(classify(Tensor<float>::zeros({3, 8, 8}), rec) == Label::Real);
}

TEST_CASE("classification is invariant under positive rescaling of the fingerprint") {
  Rng rng(6);
  auto pattern = noise_image(8, rng);
  auto d = pattern_dataset("m", pattern, 8, rng);
  auto rec = pattern_record(d, pattern);

  auto scaled = rec;
  scaled.fingerprint.data = 3.0f * scaled.fingerprint.data + 0.25f;
  scaled.mu_real = 0;
  scaled.mu_gen = 0;
  // Means must be rebuilt from the rescaled fingerprint, then decisions match.
  scaled = make_reference_record(scaled.fingerprint, d.real, d.gen, scaled);
  for (const auto& r : d.real) CHECK(classify(r, rec) == classify(r, scaled));
  for (const auto& r : d.gen) CHECK(classify(r, rec) == classify(r, scaled));
}

TEST_CASE("evaluate on separated data reaches 100 percent") {
  Rng rng(11);
  auto pattern = noise_image(8, rng);
  auto d = pattern_dataset("m", pattern, 16, rng);
  auto rec = pattern_record(d, pattern);

  auto m = evaluate(d, rec);
  CHECK(m.accuracy == 100.0);
  CHECK(m.tpr == 100.0);
  CHECK(m.tnr == 100.0);
  CHECK(m.n_real == 16);
  CHECK(m.n_gen == 16);
}

TEST_CASE("evaluate equals a brute-force recount") {
  Rng rng(13);
  auto pattern = noise_image(8, rng);
  auto d = pattern_dataset("m", pattern, 10, rng);
  // Weak record: fingerprint only loosely aligned, some mistakes expected.
  auto fuzzy = pattern;
  fuzzy.data += 3.f * noise_image(8, rng).data;
  auto rec = pattern_record(d, fuzzy);

  auto m = evaluate(d, rec);
  int correct = 0, total = 0;
  for (const auto& r : d.real) {
    correct += classify(r, rec) == Label::Real;
    ++total;
  }
  for (const auto& r : d.gen) {
    correct += classify(r, rec) == Label::Generated;
    ++total;
  }
  CHECK(m.accuracy == doctest::Approx(100.0 * correct / total).epsilon(1e-12));
  CHECK(m.correct_real + m.correct_gen == correct);
}

TEST_CASE("evaluate near 50 percent under random labels") {
  Rng rng(17);
  auto rec = record_with_means(-0.02, 0.02);
  rec.fingerprint = noise_image(8, rng);

  ResidualDataset d;
  d.model_id = "rand";
  for (int i = 0; i < 1024; ++i) {
    auto r = noise_image(8, rng);
    if (rng.uniform() < 0.5)
      d.real.push_back(std::move(r));
    else
      d.gen.push_back(std::move(r));
  }
  auto m = evaluate(d, rec);
  CHECK(m.accuracy > 45.0);
  CHECK(m.accuracy < 55.0);
}

TEST_CASE("evaluate rejects an empty dataset") {
  FingerprintRecord rec;
  CHECK_THROWS_AS(evaluate(ResidualDataset{}, rec), DataError);
}

TEST_CASE("cross_detect diagonal equals evaluate bit for bit") {
  Rng rng(19);
  auto p1 = noise_image(8, rng);
  auto p2 = noise_image(8, rng);
  auto d1 = pattern_dataset("a", p1, 8, rng);
  auto d2 = pattern_dataset("b", p2, 8, rng);
  auto r1 = pattern_record(d1, p1);
  auto r2 = pattern_record(d2, p2);

  auto m = cross_detect({r1, r2}, {d1, d2});
  CHECK(m.model_ids == std::vector<std::string>{"a", "b"});
  CHECK(m.acc[0][0] == evaluate(d1, r1).accuracy);
  CHECK(m.acc[1][1] == evaluate(d2, r2).accuracy);
  for (const auto& row : m.acc)
    for (double v : row) {
      CHECK(v >= 0.0);
      CHECK(v <= 100.0);
    }

  auto single = cross_detect({r1}, {d1});
  CHECK(single.acc.size() == 1);
  CHECK(single.acc[0][0] == evaluate(d1, r1).accuracy);
}

TEST_CASE("cross_detect separates shared from orthogonal patterns") {
  Rng rng(23);
  auto shared = noise_image(8, rng);
  auto other = noise_image(8, rng);

  auto d1 = pattern_dataset("a", shared, 12, rng);
  auto d2 = pattern_dataset("b", shared, 12, rng);  // same pattern: lineage pair
  auto d3 = pattern_dataset("c", other, 12, rng);
  auto r1 = pattern_record(d1, shared);
  auto r2 = pattern_record(d2, shared);
  auto r3 = pattern_record(d3, other);

  auto m = cross_detect({r1, r2, r3}, {d1, d2, d3});
  CHECK(m.acc[0][1] >= 90.0);
  CHECK(m.acc[1][0] >= 90.0);
  CHECK(std::abs(m.acc[0][1] - m.acc[1][0]) <= 5.0);
  CHECK(m.acc[0][2] <= 60.0);
  CHECK(m.acc[2][0] <= 60.0);
}

TEST_CASE("cross_detect validates sizes and denoisers") {
  Rng rng(29);
  auto p = noise_image(8, rng);
  auto d = pattern_dataset("a", p, 8, rng);
  auto rec = pattern_record(d, p);

  auto big = pattern_dataset("b", noise_image(16, rng), 8, rng);
  CHECK_THROWS_AS(cross_detect({rec, rec}, {d, big}), DimensionError);

  auto alien = d;
  alien.denoiser_id = "dncnn:xyz";
  CHECK_THROWS_AS(cross_detect({rec}, {alien}), ConfigError);
  CHECK_THROWS_AS(cross_detect({rec}, {d, d}), ConfigError);
  CHECK_THROWS_AS(cross_detect({}, {}), DataError);
}

TEST_CASE("lineage clustering thresholds and closure") {
  CrossDetectionMatrix identity;
  identity.model_ids = {"a", "b", "c"};
  identity.acc = {{99, 50, 50}, {50, 99, 50}, {50, 50, 99}};
  auto rep = lineage_clusters(identity);
  CHECK(rep.related.empty());
  CHECK(rep.clusters.empty());
  CHECK(rep.t_high == 80.0);
  CHECK(rep.t_sym == 10.0);

  CrossDetectionMatrix block;
  block.model_ids = {"a", "b", "c", "d"};
  block.acc = {{99, 95, 95, 50}, {95, 99, 95, 50}, {95, 95, 99, 50}, {50, 50, 50, 99}};
  rep = lineage_clusters(block);
  CHECK(rep.related.size() == 3);
  REQUIRE(rep.clusters.size() == 1);
  CHECK(rep.clusters[0] == std::vector<int>{0, 1, 2});
  for (const auto& pr : rep.related) {
    CHECK(pr.min_acc >= 80.0);
    CHECK(pr.asymmetry <= 10.0);
  }

  // Chain a-b, b-c related implies one cluster even without a-c.
  CrossDetectionMatrix chain;
  chain.model_ids = {"a", "b", "c"};
  chain.acc = {{99, 95, 10}, {95, 99, 95}, {10, 95, 99}};
  rep = lineage_clusters(chain);
  REQUIRE(rep.clusters.size() == 1);
  CHECK(rep.clusters[0].size() == 3);

  // Asymmetric pair fails the symmetry gate even when both values are high.
  CrossDetectionMatrix asym;
  asym.model_ids = {"a", "b"};
  asym.acc = {{99, 95}, {82, 99}};
  rep = lineage_clusters(asym);
  CHECK(rep.related.empty());

  CrossDetectionMatrix ragged;
  ragged.model_ids = {"a", "b"};
  ragged.acc = {{99, 95}};
  CHECK_THROWS_AS(lineage_clusters(ragged), DimensionError);
}

TEST_CASE("lineage clustering is permutation invariant") {
  CrossDetectionMatrix m;
  m.model_ids = {"a", "b", "c", "d"};
  m.acc = {{99, 92, 40, 88}, {93, 99, 45, 85}, {40, 45, 99, 30}, {90, 86, 30, 99}};
  auto rep = lineage_clusters(m);

  const std::vector<int> perm = {2, 0, 3, 1};
  CrossDetectionMatrix pm;
  pm.acc.assign(4, std::vector<double>(4, 0));
  for (int i = 0; i < 4; ++i) {
    pm.model_ids.push_back(m.model_ids[perm[i]]);
    for (int j = 0; j < 4; ++j) pm.acc[i][j] = m.acc[perm[i]][perm[j]];
  }
  auto prep = lineage_clusters(pm);
  CHECK(prep.related.size() == rep.related.size());
  REQUIRE(prep.clusters.size() == rep.clusters.size());

  auto names = [&](const CrossDetectionMatrix& mat, const std::vector<std::vector<int>>& cs) {
    std::vector<std::vector<std::string>> out;
    for (const auto& c : cs) {
      std::vector<std::string> g;
      for (int i : c) g.push_back(mat.model_ids[i]);
      std::sort(g.begin(), g.end());
      out.push_back(g);
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  CHECK(names(m, rep.clusters) == names(pm, prep.clusters));
}

TEST_CASE("fingerprint cross correlation matrix") {
  Rng rng(31);
  std::vector<Tensor<float>> fps;
  for (int i = 0; i < 4; ++i) fps.push_back(noise_image(8, rng));
  auto m = fingerprint_cross_correlation(fps);
  for (int i = 0; i < 4; ++i) {
    CHECK(m[i][i] == doctest::Approx(1.0).epsilon(1e-6));
    for (int j = 0; j < 4; ++j) {
      CHECK(m[i][j] == m[j][i]);
      CHECK(m[i][j] >= 0.0);
      CHECK(m[i][j] <= 1.0);
    }
  }

  // Shared-pattern fingerprints out-correlate unrelated ones.
  auto base = noise_image(8, rng);
  auto v1 = base, v2 = base;
  v1.data += 0.3f * noise_image(8, rng).data;
  v2.data += 0.3f * noise_image(8, rng).data;
  auto rel = fingerprint_cross_correlation({v1, v2, noise_image(8, rng)});
  CHECK(rel[0][1] > rel[0][2]);
  CHECK(rel[0][1] > rel[1][2]);
}
