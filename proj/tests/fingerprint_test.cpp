#include "dif/fingerprint.hpp"

#include "dif/gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace dif;

namespace {

Tensor<float> noise_image(int c, int s, Rng& rng, float sigma = 1.f) {
  Tensor<float> t({c, s, s});
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data[i] = (float)rng.normal(sigma);
  return t;
}

}  // namespace

TEST_CASE("zm_un hand example and idempotence") {
  auto x = Tensor<float>::from_values({1, 2, 2}, {1, -1, 1, -1});
  auto y = zm_un(x);
  CHECK(y.data[0] == doctest::Approx(0.5));
  CHECK(y.data[1] == doctest::Approx(-0.5));
  CHECK(y.data[2] == doctest::Approx(0.5));
  CHECK(y.data[3] == doctest::Approx(-0.5));

  Rng rng(7);
  auto r = noise_image(3, 8, rng);
  auto once = zm_un(r);
  auto twice = zm_un(once);
  for (std::int64_t i = 0; i < once.numel(); ++i)
    CHECK(std::abs(once.data[i] - twice.data[i]) < 1e-7f);

  // Output channel norms are exactly the normalization target.
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (int i = 0; i < 64; ++i) {
      sum += once.at(c, i / 8, i % 8);
      sq += (double)once.at(c, i / 8, i % 8) * once.at(c, i / 8, i % 8);
    }
    CHECK(std::abs(sum) < 1e-5);
    CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("zm_un rejects constant channels") {
  auto x = Tensor<float>::full({2, 4, 4}, 0.25f);
  CHECK_THROWS_AS(zm_un(x), DegenerateInputError);

  auto mixed = Tensor<float>::zeros({2, 2, 2});
  mixed.at(0, 0, 0) = 1.f;  // channel 1 stays constant
  CHECK_THROWS_AS(zm_un(mixed), DegenerateInputError);
  CHECK_NOTHROW(zm_un(mixed, CorrMode::WholeTensor));
}

TEST_CASE("correlation fixed points") {
  Rng rng(11);
  auto f = noise_image(3, 6, rng);
  CHECK(correlation(f, f) == doctest::Approx(1.0).epsilon(1e-6));

  auto neg = f;
  neg.data = -neg.data;
  CHECK(correlation(neg, f) == doctest::Approx(-1.0).epsilon(1e-6));

  auto r = Tensor<float>::from_values({1, 2, 2}, {1, -1, 1, -1});
  auto g = Tensor<float>::from_values({1, 2, 2}, {1, 1, -1, -1});
  CHECK(correlation(r, g) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("correlation symmetry, bounds, affine invariance") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed * 131 + 5);
    auto a = noise_image(3, 7, rng);
    auto b = noise_image(3, 7, rng);
    const double ab = correlation(a, b);
    CHECK(correlation(b, a) == doctest::Approx(ab).epsilon(1e-9));
    CHECK(ab >= -1.0);
    CHECK(ab <= 1.0);

    auto scaled = a;
    scaled.data = 2.5f * scaled.data + 0.3f;
    CHECK(correlation(scaled, b) == doctest::Approx(ab).epsilon(1e-4));
    scaled.data = -scaled.data;
    CHECK(correlation(scaled, b) == doctest::Approx(-ab).epsilon(1e-4));

    const double whole = correlation(a, b, CorrMode::WholeTensor);
    CHECK(whole >= -1.0);
    CHECK(whole <= 1.0);
  }
}

TEST_CASE("correlation rejects mismatched or degenerate input") {
  Rng rng(3);
  auto a = noise_image(3, 4, rng);
  auto b = noise_image(3, 5, rng);
  CHECK_THROWS_AS(correlation(a, b), DimensionError);
  CHECK_THROWS_AS(correlation(a, Tensor<float>::zeros({3, 4, 4})), DegenerateInputError);
}

TEST_CASE("correlation_distance") {
  CHECK(correlation_distance(0.3, 0.3) == 0.0);
  CHECK(correlation_distance(0.6, 0.59) == doctest::Approx(0.01));
  CHECK(correlation_distance(-1.0, 1.0) == 2.0);
  CHECK(correlation_distance(1.0, -1.0) == 2.0);
}

TEST_CASE("sample_loss values and margin validation") {
  const double m = 0.01;
  CHECK(sample_loss(0.0, 1, m) == 0.0);
  CHECK(sample_loss(0.0, 0, m) == doctest::Approx(1.0));
  CHECK(sample_loss(0.005, 0, m) == doctest::Approx(0.5));
  CHECK(sample_loss(m, 0, m) == doctest::Approx(0.0));
  CHECK(sample_loss(m, 1, m) == doctest::Approx(1.0));

  // t=1 is minimized at D=0, t=0 at D=m, over the admissible distance range.
  for (double d : {0.0, 0.002, 0.005, 0.01}) {
    CHECK(sample_loss(d, 1, m) >= sample_loss(0.0, 1, m));
    CHECK(sample_loss(d, 0, m) >= sample_loss(m, 0, m));
  }

  CHECK_THROWS_AS(sample_loss(0.1, 1, 0.0), ConfigError);
  CHECK_THROWS_AS(sample_loss(0.1, 1, -1.0), ConfigError);
  CHECK_THROWS_AS(sample_loss(0.1, 2, m), ConfigError);
}

TEST_CASE("pair loss gradient wrt fingerprint matches finite differences") {
  Rng rng(42);
  std::vector<std::shared_ptr<Tensor<double>>> rhat;
  std::vector<int> labels = {0, 0, 1, 1};
  for (int i = 0; i < 4; ++i) {
    Tensor<double> r({3, 4, 4});
    for (std::int64_t k = 0; k < r.numel(); ++k) r.data[k] = rng.normal(1);
    rhat.push_back(std::make_shared<Tensor<double>>(zm_un(r)));
  }

  Tensor<double> f0({3, 4, 4});
  for (std::int64_t k = 0; k < f0.numel(); ++k) f0.data[k] = rng.normal(1);
  auto f = leaf(f0, true);
  std::vector<Param<double>> leaves = {{"f", f}};

  const double m = 0.01;
  auto build = [&]() {
    std::vector<NodeRef<double>> rhos;
    for (auto& r : rhat) rhos.push_back(corr_fixed(r, f, CorrMode::PerChannel));
    std::vector<NodeRef<double>> parts;
    for (size_t i = 0; i < rhos.size(); ++i)
      for (size_t j = i + 1; j < rhos.size(); ++j) {
        auto d = nabs(nsub(rhos[i], rhos[j]));
        parts.push_back(labels[i] == labels[j] ? nscale(d, 1.0 / m)
                                               : nshift(nscale(d, -1.0 / m), 1.0));
      }
    return nmean(parts);
  };

  auto rep = gradcheck<double>(build, leaves, 1e-6);
  CHECK_MESSAGE(rep.max_rel_err < 1e-5, rep.worst, " rel err ", rep.max_rel_err);
}

TEST_CASE("ema accumulator is a convex combination") {
  EmaAccumulator<float> ema;
  Rng rng(9);
  auto first = noise_image(3, 4, rng);
  ema.add(first, 0.99f);
  for (std::int64_t i = 0; i < first.numel(); ++i) CHECK(ema.value.data[i] == first.data[i]);

  Tensor<float> lo = first, hi = first;
  double max_norm = std::sqrt((double)first.data.template cast<double>().square().sum());
  for (int step = 0; step < 30; ++step) {
    auto cand = noise_image(3, 4, rng);
    ema.add(cand, 0.99f);
    lo.data = lo.data.min(cand.data);
    hi.data = hi.data.max(cand.data);
    max_norm = std::max(max_norm, std::sqrt((double)cand.data.template cast<double>().square().sum()));
  }
  for (std::int64_t i = 0; i < lo.numel(); ++i) {
    CHECK(ema.value.data[i] >= lo.data[i] - 1e-6f);
    CHECK(ema.value.data[i] <= hi.data[i] + 1e-6f);
  }
  const double norm = std::sqrt((double)ema.value.data.template cast<double>().square().sum());
  CHECK(norm <= max_norm + 1e-6);

  EmaAccumulator<float> bad;
  CHECK_THROWS_AS(bad.add(first, 1.0f), ConfigError);
  CHECK_THROWS_AS(bad.add(first, -0.1f), ConfigError);
}

TEST_CASE("average_fingerprint mean and cancellation") {
  Rng rng(5);
  auto p = noise_image(3, 6, rng);
  auto only = average_fingerprint<float>({p});
  for (std::int64_t i = 0; i < p.numel(); ++i) CHECK(only.data[i] == p.data[i]);

  auto np = p;
  np.data = -np.data;
  auto zero = average_fingerprint<float>({p, np});
  for (std::int64_t i = 0; i < zero.numel(); ++i) CHECK(std::abs(zero.data[i]) < 1e-7f);

  CHECK_THROWS_AS(average_fingerprint<float>({}), DataError);
}

TEST_CASE("fourier correlation is shift-insensitive") {
  Rng rng(17);
  auto f = noise_image(3, 16, rng);
  CHECK(fourier_correlation(f, f) == doctest::Approx(1.0).epsilon(1e-6));

  Tensor<float> shifted({3, 16, 16});
  const int dy = 5, dx = 9;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j)
        shifted.at(c, (i + dy) % 16, (j + dx) % 16) = f.at(c, i, j);
  CHECK(correlation(shifted, f) < 0.5);  // spatially misaligned
  CHECK(fourier_correlation(shifted, f) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("fourier correlation of independent noise is near zero") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 1000);
    auto a = noise_image(3, 32, rng);
    auto b = noise_image(3, 32, rng);
    CHECK(std::abs(fourier_correlation(a, b)) < 0.1);
  }
}

TEST_CASE("reference record means and sign canonicalization") {
  Rng rng(23);
  auto pattern = noise_image(3, 8, rng);

  std::vector<Tensor<float>> res_real, res_gen;
  for (int i = 0; i < 6; ++i) {
    res_real.push_back(noise_image(3, 8, rng));
    auto g = noise_image(3, 8, rng, 0.2f);
    g.data += pattern.data;
    res_gen.push_back(g);
  }

  // Hand the finalizer an anti-correlated fingerprint; canonicalization must
  // flip it so mu_gen ends up on top, without changing the decision geometry.
  Tensor<float> anti = pattern;
  anti.data = -anti.data;
  FingerprintRecord proto;
  proto.margin = 0.01;
  proto.seed = 99;
  auto rec = make_reference_record(anti, res_real, res_gen, proto);

  CHECK(rec.n_real == 6);
  CHECK(rec.n_gen == 6);
  CHECK(rec.working_size == 8);
  CHECK(rec.mu_gen > rec.mu_real);
  CHECK(rec.mu_gen >= -1.0);
  CHECK(rec.mu_gen <= 1.0);
  CHECK(correlation(rec.fingerprint, pattern) > 0.5);

  const double mu_g_direct = [&] {
    double acc = 0;
    for (const auto& r : res_gen) acc += correlation(r, rec.fingerprint);
    return acc / res_gen.size();
  }();
  CHECK(rec.mu_gen == doctest::Approx(mu_g_direct).epsilon(1e-12));

  CHECK_THROWS_AS(make_reference_record(pattern, {}, res_gen, proto), DataError);
}

TEST_CASE("degenerate residuals score zero in reference means") {
  Rng rng(31);
  std::vector<Tensor<float>> res_real = {Tensor<float>::zeros({3, 8, 8}),
                                         Tensor<float>::zeros({3, 8, 8})};
  std::vector<Tensor<float>> res_gen;
  for (int i = 0; i < 2; ++i) res_gen.push_back(noise_image(3, 8, rng));

  FingerprintRecord proto;
  auto rec = make_reference_record(res_gen[0], res_real, res_gen, proto);
  CHECK(rec.mu_real == 0.0);
  CHECK(rec.mu_gen > 0.0);
}

TEST_CASE("record_correlation dispatches on method") {
  Rng rng(41);
  auto f = noise_image(3, 16, rng);
  Tensor<float> shifted({3, 16, 16});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) shifted.at(c, (i + 3) % 16, (j + 7) % 16) = f.at(c, i, j);

  FingerprintRecord rec;
  rec.fingerprint = f;
  rec.method = FpMethod::Extracted;
  const double direct = record_correlation(rec, shifted);
  rec.method = FpMethod::Fourier;
  const double fourier = record_correlation(rec, shifted);
  CHECK(direct == doctest::Approx(correlation(shifted, f)));
  CHECK(fourier == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("extraction config defaults") {
  ExtractConfig cfg;
  CHECK(cfg.model.arch == Arch::UNet);
  CHECK(cfg.model.in_channels == 16);
  CHECK(cfg.margin == 0.01);
  CHECK(cfg.steps == 2000);
  CHECK(cfg.lr == 5e-4);
  CHECK(cfg.ema_decay == 0.99);
  CHECK(cfg.batch == 8);
  CHECK(cfg.corr_mode == CorrMode::PerChannel);
}

namespace {

ExtractConfig tiny_cfg(std::uint64_t seed) {
  ExtractConfig cfg;
  cfg.model = {Arch::CNet, 16, 0, 8, 0};
  cfg.steps = 4;
  cfg.batch = 4;
  cfg.seed = seed;
  cfg.source_model_id = "toy";
  return cfg;
}

std::vector<Tensor<float>> residual_set(int n, int s, Rng& rng, const Tensor<float>* bias) {
  std::vector<Tensor<float>> out;
  for (int i = 0; i < n; ++i) {
    auto r = noise_image(3, s, rng, 0.05f);
    if (bias) r.data += bias->data;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST_CASE("extract_fingerprint is deterministic and fills the record") {
  Rng rng(77);
  auto pattern = noise_image(3, 16, rng, 0.1f);
  auto res_real = residual_set(6, 16, rng, nullptr);
  auto res_gen = residual_set(6, 16, rng, &pattern);

  auto run = [&] { return extract_fingerprint(res_real, res_gen, "gaussian:3", tiny_cfg(5)); };
  auto rec1 = run();
  auto rec2 = run();

  CHECK(rec1.fingerprint.numel() == 3 * 16 * 16);
  for (std::int64_t i = 0; i < rec1.fingerprint.numel(); ++i)
    CHECK(rec1.fingerprint.data[i] == rec2.fingerprint.data[i]);
  CHECK(rec1.mu_real == rec2.mu_real);
  CHECK(rec1.mu_gen == rec2.mu_gen);

  CHECK(rec1.n_real == 6);
  CHECK(rec1.n_gen == 6);
  CHECK(rec1.working_size == 16);
  CHECK(rec1.denoiser_id == "gaussian:3");
  CHECK(rec1.source_model_id == "toy");
  CHECK(rec1.seed == 5);
  CHECK(rec1.method == FpMethod::Extracted);
  CHECK(rec1.mu_gen >= rec1.mu_real);
  CHECK(rec1.mu_real >= -1.0);
  CHECK(rec1.mu_gen <= 1.0);
  for (std::int64_t i = 0; i < rec1.fingerprint.numel(); ++i)
    CHECK(std::isfinite(rec1.fingerprint.data[i]));

  auto rec3 = extract_fingerprint(res_real, res_gen, "gaussian:3", tiny_cfg(6));
  bool differs = false;
  for (std::int64_t i = 0; i < rec1.fingerprint.numel() && !differs; ++i)
    differs = rec1.fingerprint.data[i] != rec3.fingerprint.data[i];
  CHECK(differs);
}

TEST_CASE("extract_fingerprint input validation") {
  Rng rng(88);
  auto res_real = residual_set(6, 16, rng, nullptr);
  auto res_gen = residual_set(6, 16, rng, nullptr);

  CHECK_THROWS_AS(extract_fingerprint({}, res_gen, "d", tiny_cfg(1)), DataError);
  CHECK_THROWS_AS(extract_fingerprint(res_real, {}, "d", tiny_cfg(1)), DataError);

  auto cfg = tiny_cfg(1);
  cfg.batch = 7;
  CHECK_THROWS_AS(extract_fingerprint(res_real, res_gen, "d", cfg), DataError);

  cfg = tiny_cfg(1);
  cfg.steps = 0;
  CHECK_THROWS_AS(extract_fingerprint(res_real, res_gen, "d", cfg), ConfigError);

  cfg = tiny_cfg(1);
  cfg.margin = 0;
  CHECK_THROWS_AS(extract_fingerprint(res_real, res_gen, "d", cfg), ConfigError);

  auto bad = res_gen;
  bad.push_back(noise_image(3, 32, rng));
  CHECK_THROWS_AS(extract_fingerprint(res_real, bad, "d", tiny_cfg(1)), DimensionError);

  auto degen = res_gen;
  degen[2] = Tensor<float>::zeros({3, 16, 16});
  CHECK_THROWS_AS(extract_fingerprint(res_real, degen, "d", tiny_cfg(1)), DegenerateInputError);
}

TEST_CASE("method and corr mode names round-trip") {
  for (auto m : {FpMethod::Extracted, FpMethod::Averaged, FpMethod::Fourier})
    CHECK(method_from_name(method_name(m)) == m);
  for (auto m : {CorrMode::PerChannel, CorrMode::WholeTensor})
    CHECK(corr_mode_from_name(corr_mode_name(m)) == m);
  CHECK_THROWS_AS(method_from_name("nope"), ConfigError);
  CHECK_THROWS_AS(corr_mode_from_name("nope"), ConfigError);
}
