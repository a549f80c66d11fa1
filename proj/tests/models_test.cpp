#include "dif/gradcheck.hpp"
#include "dif/models.hpp"

#include <doctest.h>

using namespace dif;

namespace {

template <class S>
NodeRef<S> fwd_no_grad(Model<S>& m, const Tensor<S>& z) {
  m.set_train_grads(false);
  return m.forward(leaf(z), false);
}

}  // namespace

TEST_CASE("unet maps 16-channel noise to a 3x256x256 tanh image") {
  ModelSpec spec{Arch::UNet, 16, 256, 32, 1};
  auto m = build_unet<float>(spec);
  Rng rng(2);
  auto z = sample_z<float>(spec, rng);
  REQUIRE(z.shape == std::vector<int>{16, 256, 256});
  auto y = fwd_no_grad(m, z);
  CHECK(y->value.shape == std::vector<int>{3, 256, 256});
  CHECK(y->value.data.abs().maxCoeff() <= 1.f);
  CHECK(y->value.data.isFinite().all());
  for (auto& p : m.params()) CHECK(p.node->value.data.isFinite().all());
}

TEST_CASE("frozen parameter counts for the two fixed architectures") {
  auto unet = build_unet<float>({Arch::UNet, 16, 128, 32, 0});
  CHECK(unet.param_count() == 2524291);
  auto dncnn = build_dncnn<float>({Arch::DnCNN, 3, 128, 32, 0});
  CHECK(dncnn.param_count() == 559363);
}

TEST_CASE("u1net is the unet with 1x1 kernels and zero padding") {
  ModelSpec spec{Arch::U1Net, 16, 64, 32, 3};
  auto m = build_u1net<float>(spec);
  for (const auto& L : m.layers)
    if (L.kind == LayerKind::Conv2d) {
      CHECK(L.kernel == 1);
      CHECK(L.pad == 0);
    }
  Rng rng(4);
  auto y = fwd_no_grad(m, sample_z<float>(spec, rng));
  CHECK(y->value.shape == std::vector<int>{3, 64, 64});
}

TEST_CASE("cnet preserves spatial dims with eight convolutions and no resampling") {
  ModelSpec spec{Arch::CNet, 16, 40, 32, 5};
  auto m = build_cnet<float>(spec);
  int convs = 0;
  for (const auto& L : m.layers) {
    CHECK(L.kind != LayerKind::MaxPool2x2);
    CHECK(L.kind != LayerKind::ConvTranspose2d);
    CHECK(L.kind != LayerKind::BatchNorm2d);
    if (L.kind == LayerKind::Conv2d) ++convs;
  }
  CHECK(convs == 8);
  Rng rng(6);
  auto y = fwd_no_grad(m, sample_z<float>(spec, rng));
  CHECK(y->value.shape == std::vector<int>{3, 40, 40});
}

TEST_CASE("zero-weight cnet outputs the constant tanh(bias) image") {
  ModelSpec spec{Arch::CNet, 16, 16, 8, 5};
  auto m = build_cnet<float>(spec);
  for (auto& L : m.layers)
    if (L.kind == LayerKind::Conv2d) {
      L.weight->value.data.setZero();
      L.bias->value.data.setZero();
    }
  for (auto& L : m.layers)
    if (L.kind == LayerKind::Conv2d && L.name == "conv8") L.bias->value.data.setConstant(0.3f);
  Rng rng(8);
  auto y = fwd_no_grad(m, sample_z<float>(spec, rng));
  const float want = std::tanh(0.3f);
  for (std::int64_t i = 0; i < y->value.numel(); ++i)
    CHECK(y->value.data[i] == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("upnet upsamples 16x to working size") {
  ModelSpec spec{Arch::UpNet, 16, 256, 32, 7};
  auto m = build_upnet<float>(spec);
  Rng rng(10);
  auto z = sample_z<float>(spec, rng);
  REQUIRE(z.shape == std::vector<int>{16, 16, 16});
  auto y = fwd_no_grad(m, z);
  CHECK(y->value.shape == std::vector<int>{3, 256, 256});
}

TEST_CASE("upnet on constant input tiles one 16x16 block pattern") {
  ModelSpec spec{Arch::UpNet, 16, 64, 8, 11};
  auto m = build_upnet<float>(spec);
  auto z = Tensor<float>::full({16, 4, 4}, 0.7f);
  auto y = fwd_no_grad(m, z)->value;
  // 1x1 convs without padding keep the net translation equivariant over the
  // block lattice, so a constant input makes the output 16-periodic (up to
  // last-ulp GEMM kernel differences across column positions).
  float max_dev = 0.f;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 64; ++j)
        max_dev = std::max(max_dev, std::abs(y.at(c, i, j) - y.at(c, i % 16, j % 16)));
  CHECK(max_dev < 1e-5f);
  // ... while the deconv kernels leave structure inside the block
  float lo = y.at(0, 0, 0), hi = lo;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      lo = std::min(lo, y.at(0, i, j));
      hi = std::max(hi, y.at(0, i, j));
    }
  CHECK(hi - lo > 1e-4f);
}

TEST_CASE("dnet is the decoder stack alone") {
  ModelSpec spec{Arch::DNet, 16, 256, 32, 13};
  auto m = build_dnet<float>(spec);
  for (const auto& L : m.layers) CHECK(L.concat_skip < 0);
  Rng rng(12);
  auto z = sample_z<float>(spec, rng);
  REQUIRE(z.shape == std::vector<int>{16, 16, 16});
  auto y = fwd_no_grad(m, z);
  CHECK(y->value.shape == std::vector<int>{3, 256, 256});
}

TEST_CASE("dncnn preserves arbitrary shapes and predicts noise") {
  ModelSpec spec{Arch::DnCNN, 3, 48, 32, 15};
  auto m = build_dncnn<float>(spec);
  Rng rng(14);
  for (int s : {5, 7, 48}) {
    auto x = random_uniform<float>({3, s, s}, rng);
    auto y = fwd_no_grad(m, x);
    CHECK(y->value.shape == std::vector<int>{3, s, s});
  }
  // zero final layer -> predicted noise 0 -> denoised equals input exactly
  auto& last = m.layers.back();
  REQUIRE(last.name == "conv17");
  last.weight->value.data.setZero();
  last.bias->value.data.setZero();
  auto x = random_uniform<float>({3, 10, 10}, rng);
  auto noise_pred = fwd_no_grad(m, x)->value;
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(x.data[i] - noise_pred.data[i] == x.data[i]);
}

TEST_CASE("all generator archs emit 3xSxS at S=32") {
  for (Arch a : {Arch::UNet, Arch::U1Net, Arch::CNet, Arch::UpNet, Arch::DNet}) {
    ModelSpec spec{a, 16, 32, 16, 21};
    auto m = build_model<float>(spec);
    Rng rng(20);
    auto y = fwd_no_grad(m, sample_z<float>(spec, rng));
    CHECK_MESSAGE((y->value.shape == std::vector<int>{3, 32, 32}), arch_name(a));
    CHECK(y->value.data.abs().maxCoeff() <= 1.f);
  }
}

TEST_CASE("u1net and dnet pass end-to-end gradcheck at S=32") {
  for (Arch a : {Arch::U1Net, Arch::DNet}) {
    ModelSpec spec{a, 16, 32, 16, 33};
    auto m = build_model<double>(spec);
    Rng rng(30);
    auto z = leaf(sample_z<double>(spec, rng));
    Tensor<double> tgt = random_normal<double>({3, 32, 32}, rng, 0.3);
    // check a spread of small parameter tensors through the whole depth
    std::vector<Param<double>> leaves;
    auto all = m.params();
    for (auto& p : all) {
      const bool small = p.node->value.numel() <= 64;
      const bool pick = small && (p.name.find(".b") != std::string::npos ||
                                  p.name.find(".gamma") != std::string::npos);
      if (pick && leaves.size() < 4) leaves.push_back(p);
    }
    for (auto& p : all)
      if (p.name == "out.conv.b" || p.name == "up4.proj.b") leaves.push_back(p);
    REQUIRE(leaves.size() >= 4);
    // Deep BN+LeakyReLU stacks put many pre-activations right at the kink, so
    // a larger step mixes slopes; h=1e-7 stays below the kink-crossing scale
    // while central-difference roundoff stays under 1e-5 for these graphs.
    auto rep = gradcheck<double>([&] { return mse_to(m.forward(z, true), tgt); }, leaves, 1e-7);
    CHECK_MESSAGE(rep.max_rel_err < 1e-5, arch_name(a), " worst at ", rep.worst);
  }
}

TEST_CASE("spec validation rejects bad geometry") {
  CHECK_THROWS_AS(build_unet<float>({Arch::UNet, 16, 40, 32, 0}), ConfigError);
  CHECK_THROWS_AS(build_dncnn<float>({Arch::DnCNN, 16, 48, 32, 0}), ConfigError);
  CHECK_THROWS_AS(build_unet<float>({Arch::CNet, 16, 128, 32, 0}), ConfigError);
  CHECK_THROWS_AS(build_upnet<float>({Arch::UpNet, 16, 24, 32, 0}), ConfigError);
}
