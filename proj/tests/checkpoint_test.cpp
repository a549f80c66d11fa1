#include "dif/checkpoint.hpp"

#include "dif/data.hpp"
#include "dif/hash.hpp"
#include "dif/image_io.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace dif;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("dif_ckpt_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("fnv1a matches published reference values") {
  CHECK(fnv1a("", 0) == 14695981039346656037ull);
  CHECK(fnv1a("a", 1) == 12638187200555641996ull);
  CHECK(fnv1a(std::string("foobar")) == 0x85944171f73967e8ull);
  CHECK(hash_hex(0x85944171f73967e8ull) == "85944171f73967e8");
  CHECK(hash_hex(0) == "0000000000000000");
}

TEST_CASE("tensor hash separates shape from payload") {
  auto a = Tensor<float>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<float>::from_values({3, 2}, {1, 2, 3, 4, 5, 6});
  auto c = Tensor<float>::from_values({2, 3}, {1, 2, 3, 4, 5, 7});
  CHECK(hash_tensor(a) != hash_tensor(b));
  CHECK(hash_tensor(a) != hash_tensor(c));
  CHECK(hash_tensor(a) == hash_tensor(a));
}

TEST_CASE("raw container round-trip is bit-exact") {
  auto dir = fresh_dir("raw");
  Rng rng(3);
  CheckpointContainer c;
  c.metadata_json = R"({"type":"test","value":0.30000000000000004})";
  c.tensors.push_back({"alpha", random_uniform<float>({3, 5, 4}, rng, -2, 2)});
  c.tensors.push_back({"beta", random_uniform<float>({7}, rng, -1e-20, 1e20)});
  c.tensors.push_back({"empty", Tensor<float>({0})});

  const auto path = (dir / "c.dif").string();
  write_checkpoint(c, path);
  auto back = read_checkpoint(path);
  CHECK(back.version == c.version);
  CHECK(back.metadata_json == c.metadata_json);
  REQUIRE(back.tensors.size() == 3);
  for (size_t k = 0; k < c.tensors.size(); ++k) {
    CHECK(back.tensors[k].name == c.tensors[k].name);
    CHECK(back.tensors[k].value.shape == c.tensors[k].value.shape);
    for (std::int64_t i = 0; i < c.tensors[k].value.numel(); ++i)
      CHECK(back.tensors[k].value.data[i] == c.tensors[k].value.data[i]);
  }
  CHECK(checkpoint_hash(back) == checkpoint_hash(c));

  // Re-writing the read-back container reproduces the same bytes.
  const auto path2 = (dir / "c2.dif").string();
  write_checkpoint(back, path2);
  CHECK(slurp(path) == slurp(path2));
  CHECK(file_hash(path) == file_hash(path2));
}

TEST_CASE("container rejects garbage") {
  auto dir = fresh_dir("garbage");
  std::ofstream(dir / "not.dif", std::ios::binary) << "PNG\x89 nonsense";
  CHECK_THROWS_AS(read_checkpoint((dir / "not.dif").string()), DataError);
  CHECK_THROWS_AS(read_checkpoint((dir / "missing.dif").string()), DataError);

  CheckpointContainer c;
  c.metadata_json = "{}";
  c.tensors.push_back({"t", Tensor<float>({2, 2})});
  write_checkpoint(c, (dir / "ok.dif").string());
  auto bytes = slurp(dir / "ok.dif");
  std::ofstream(dir / "cut.dif", std::ios::binary)
      .write(bytes.data(), (std::streamsize)(bytes.size() - 5));
  CHECK_THROWS_AS(read_checkpoint((dir / "cut.dif").string()), DataError);
}

TEST_CASE("fingerprint record survives save and load exactly") {
  auto dir = fresh_dir("fp");
  Rng rng(11);
  FingerprintRecord rec;
  rec.fingerprint = random_uniform<float>({3, 8, 8}, rng, -1, 1);
  rec.mu_real = 0.0123456789012345;
  rec.mu_gen = 0.7;
  rec.n_real = 128;
  rec.n_gen = 96;
  rec.working_size = 8;
  rec.margin = 0.01;
  rec.ema_decay = 0.99;
  rec.denoiser_id = "dncnn:abc123";
  rec.source_model_id = "oracle-a";
  rec.seed = 0xfeedbeefcafe;
  rec.corr_mode = CorrMode::WholeTensor;
  rec.method = FpMethod::Averaged;

  const auto path = (dir / "fp.dif").string();
  save_fingerprint(rec, path);
  auto back = load_fingerprint(path);

  CHECK(back.mu_real == rec.mu_real);
  CHECK(back.mu_gen == rec.mu_gen);
  CHECK(back.n_real == rec.n_real);
  CHECK(back.n_gen == rec.n_gen);
  CHECK(back.working_size == rec.working_size);
  CHECK(back.margin == rec.margin);
  CHECK(back.ema_decay == rec.ema_decay);
  CHECK(back.denoiser_id == rec.denoiser_id);
  CHECK(back.source_model_id == rec.source_model_id);
  CHECK(back.seed == rec.seed);
  CHECK(back.corr_mode == rec.corr_mode);
  CHECK(back.method == rec.method);
  CHECK(back.fingerprint.shape == rec.fingerprint.shape);
  for (std::int64_t i = 0; i < rec.fingerprint.numel(); ++i)
    CHECK(back.fingerprint.data[i] == rec.fingerprint.data[i]);

  // Save→load→save produces identical bytes.
  const auto path2 = (dir / "fp2.dif").string();
  save_fingerprint(back, path2);
  CHECK(slurp(path) == slurp(path2));

  save_denoiser(DenoiserBundle{build_model<float>({Arch::DnCNN, 3, 16, 64, 1}),
                               Tensor<float>({3, 16, 16}), 16, 10, 0.02, 0.06, "h"},
                (dir / "dn.dif").string());
  CHECK_THROWS_AS(load_fingerprint((dir / "dn.dif").string()), DataError);
}

TEST_CASE("denoiser bundle round-trips with identical behavior") {
  auto dir = fresh_dir("dn");
  Rng rng(13);
  ModelSpec spec{Arch::DnCNN, 3, 20, 64, 77};
  DenoiserBundle bundle{build_model<float>(spec), random_uniform<float>({3, 20, 20}, rng, -0.01, 0.01),
                        20, 10, 5.0 / 255, 15.0 / 255, ""};
  // Perturb a BN running stat so serialization must carry it.
  for (auto& L : bundle.model.layers)
    if (L.running_mean.numel()) {
      L.running_mean.data.setConstant(0.25f);
      L.running_var.data.setConstant(0.5f);
      break;
    }
  bundle.model.set_train_grads(false);
  bundle.train_config_hash = denoiser_hash(bundle);

  const auto path = (dir / "dn.dif").string();
  save_denoiser(bundle, path);
  auto back = load_denoiser(path);

  CHECK(back.working_size == 20);
  CHECK(back.pad == 10);
  CHECK(back.sigma_lo == bundle.sigma_lo);
  CHECK(back.sigma_hi == bundle.sigma_hi);
  CHECK(back.train_config_hash == bundle.train_config_hash);
  CHECK(denoiser_hash(back) == bundle.train_config_hash);
  CHECK(back.model.spec.arch == Arch::DnCNN);
  CHECK(back.model.param_count() == bundle.model.param_count());

  auto img = random_uniform<float>({3, 20, 20}, rng, 0, 1);
  auto r1 = extract_residual(img, bundle);
  auto r2 = extract_residual(img, back);
  for (std::int64_t i = 0; i < r1.numel(); ++i) CHECK(r1.data[i] == r2.data[i]);

  const auto path2 = (dir / "dn2.dif").string();
  save_denoiser(back, path2);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("trained denoiser fills its content hash") {
  auto imgs = synthetic_real_images(2, 24, 5);
  DnCnnTrainConfig cfg;
  cfg.epochs = 0;
  cfg.crop = 16;
  auto bundle = train_dncnn(imgs, cfg);
  CHECK(bundle.train_config_hash.size() == 16);
  CHECK(bundle.train_config_hash == denoiser_hash(bundle));
  CHECK(ResidualFilter::dncnn(std::make_shared<DenoiserBundle>(bundle)).id() ==
        "dncnn:" + bundle.train_config_hash);
}

TEST_CASE("matrix csv round-trips ids and values") {
  auto dir = fresh_dir("csv");
  CrossDetectionMatrix m;
  m.model_ids = {"gen-a", "gen-b", "gen-c"};
  m.acc = {{99.21875, 51.0, 48.4375}, {97.0, 98.5, 50.0}, {50.0, 49.0, 96.875}};

  const auto path = (dir / "m.csv").string();
  write_matrix_csv(m, path);
  auto back = read_matrix_csv(path);
  CHECK(back.model_ids == m.model_ids);
  REQUIRE(back.acc.size() == 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(back.acc[i][j] == m.acc[i][j]);

  std::ofstream(dir / "ragged.csv") << "model_id,a,b\na,1,2\nb,3\n";
  CHECK_THROWS_AS(read_matrix_csv((dir / "ragged.csv").string()), DataError);
  std::ofstream(dir / "empty.csv") << "";
  CHECK_THROWS_AS(read_matrix_csv((dir / "empty.csv").string()), DataError);
  std::ofstream(dir / "alpha.csv") << "model_id,a\na,xyz\n";
  CHECK_THROWS_AS(read_matrix_csv((dir / "alpha.csv").string()), DataError);
}

TEST_CASE("heatmap renders one block per cell") {
  auto dir = fresh_dir("heat");
  CrossDetectionMatrix m;
  m.model_ids = {"a", "b"};
  m.acc = {{100.0, 0.0}, {50.0, 100.0}};
  const auto path = (dir / "heat.png").string();
  write_heatmap_png(m, path, 4);
  auto img = read_image(path);
  CHECK(img.shape == std::vector<int>{3, 8, 8});
  // High cells run warm, low cells stay blue.
  CHECK(img.at(0, 0, 0) > 0.9f);
  CHECK(img.at(2, 0, 0) < 0.3f);
  CHECK(img.at(0, 0, 5) < 0.1f);
  CHECK(img.at(2, 0, 5) > 0.7f);
  // Uniform inside a cell.
  CHECK(img.at(1, 1, 1) == img.at(1, 2, 3));
}
