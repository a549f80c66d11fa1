#pragma once

#include "dif/hash.hpp"
#include "dif/models.hpp"
#include "dif/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace dif {

namespace detail {

// Mirror indexing without edge repeat: -1 -> 1, n -> n-2.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, (int)std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-(double)i * i / (2 * sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

}  // namespace detail

template <class S>
Tensor<S> gaussian_blur(const Tensor<S>& img, double sigma) {
  if (!(sigma > 0)) throw ConfigError("gaussian_blur: sigma must be positive");
  if (img.rank() != 3) throw DimensionError("gaussian_blur: expected CxHxW, got " + shape_str(img.shape));
  const auto k = detail::gaussian_kernel(sigma);
  const int radius = (int)k.size() / 2;
  const int c = img.shape[0], h = img.shape[1], w = img.shape[2];

  Tensor<S> tmp(img.shape), out(img.shape);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double acc = 0;
        for (int t = -radius; t <= radius; ++t)
          acc += k[t + radius] * img.at(ch, i, detail::reflect_index(j + t, w));
        tmp.at(ch, i, j) = (S)acc;
      }
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double acc = 0;
        for (int t = -radius; t <= radius; ++t)
          acc += k[t + radius] * tmp.at(ch, detail::reflect_index(i + t, h), j);
        out.at(ch, i, j) = (S)acc;
      }
  return out;
}

// High-pass residual baseline: what the blur removes.
template <class S>
Tensor<S> gaussian_highpass_residual(const Tensor<S>& img, double sigma = 3.0) {
  auto r = gaussian_blur(img, sigma);
  r.data = img.data - r.data;
  return r;
}

template <class S>
Tensor<S> pad_reflect(const Tensor<S>& img, int pad) {
  if (pad < 0) throw ConfigError("pad_reflect: negative pad");
  const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
  if (pad >= h || pad >= w)
    throw DimensionError("pad_reflect: pad " + std::to_string(pad) + " too large for " +
                         shape_str(img.shape));
  Tensor<S> out({c, h + 2 * pad, w + 2 * pad});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h + 2 * pad; ++i)
      for (int j = 0; j < w + 2 * pad; ++j)
        out.at(ch, i, j) =
            img.at(ch, detail::reflect_index(i - pad, h), detail::reflect_index(j - pad, w));
  return out;
}

template <class S>
Tensor<S> crop_border(const Tensor<S>& img, int pad) {
  const int c = img.shape[0], h = img.shape[1] - 2 * pad, w = img.shape[2] - 2 * pad;
  if (h < 1 || w < 1) throw DimensionError("crop_border: pad eats the whole image");
  Tensor<S> out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at(ch, i, j) = img.at(ch, i + pad, j + pad);
  return out;
}

template <class S>
double mse(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mse");
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = (double)a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / a.numel();
}

template <class S>
double psnr(const Tensor<S>& ref, const Tensor<S>& x) {
  const double e = mse(ref, x);
  return e > 0 ? 10 * std::log10(1.0 / e) : 1e9;
}

struct DnCnnTrainConfig {
  int epochs = 2000;
  double lr = 1e-4;
  int crop = 48;
  double sigma_lo = 5.0 / 255, sigma_hi = 15.0 / 255;
  int corpus_size = 1024;  // how many train images the standard recipe expects
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;
};

// Trained denoiser plus its own output bias, estimated once and then frozen.
// The model weights are shared across copies; treat a bundle as read-only.
struct DenoiserBundle {
  Model<float> model;
  Tensor<float> fingerprint;  // mean noise prediction over the train set
  int working_size = 0;
  int pad = 10;
  double sigma_lo = 0, sigma_hi = 0;
  std::string train_config_hash;
};

// Content hash over weights, normalization state, and bias fingerprint; the
// stable identity that ties fingerprint records to the denoiser they used.
inline std::string denoiser_hash(const DenoiserBundle& b) {
  std::uint64_t h = kFnvOffset;
  auto& model = const_cast<Model<float>&>(b.model);
  for (const auto& p : model.params()) {
    h = fnv1a(p.name, h);
    h = hash_tensor(p.node->value, h);
  }
  for (const auto& L : b.model.layers)
    if (L.running_mean.numel()) {
      h = hash_tensor(L.running_mean, h);
      h = hash_tensor(L.running_var, h);
    }
  if (b.fingerprint.numel()) h = hash_tensor(b.fingerprint, h);
  h = fnv1a_u64((std::uint64_t)b.working_size, h);
  h = fnv1a_u64((std::uint64_t)b.pad, h);
  h = fnv1a(&b.sigma_lo, sizeof b.sigma_lo, h);
  h = fnv1a(&b.sigma_hi, sizeof b.sigma_hi, h);
  return hash_hex(h);
}

namespace detail {

inline Tensor<float> noise_prediction(Model<float>& model, const Tensor<float>& img, int pad) {
  auto y = model.forward(leaf(pad_reflect(img, pad)), false);
  return crop_border(y->value, pad);
}

}  // namespace detail

inline DenoiserBundle train_dncnn(const std::vector<Tensor<float>>& images, DnCnnTrainConfig cfg) {
  if (images.empty()) throw DataError("train_dncnn: empty image set");
  if (cfg.epochs < 0) throw ConfigError("train_dncnn: negative epochs");
  if (!(cfg.lr > 0)) throw ConfigError("train_dncnn: lr must be positive");
  if (!(cfg.sigma_lo > 0) || cfg.sigma_hi < cfg.sigma_lo)
    throw ConfigError("train_dncnn: bad sigma range");
  const auto& first = images.front();
  if (first.rank() != 3 || first.shape[0] != 3)
    throw DimensionError("train_dncnn: expected 3xHxW images");
  for (const auto& img : images) {
    check_same_shape(first, img, "train_dncnn");
    if (img.shape[1] < cfg.crop || img.shape[2] < cfg.crop)
      throw DataError("train_dncnn: image " + shape_str(img.shape) + " smaller than crop " +
                      std::to_string(cfg.crop));
  }

  ModelSpec spec{Arch::DnCNN, 3, first.shape[1], 64, Rng(cfg.seed).derive(0xdc).seed()};
  DenoiserBundle bundle{build_model<float>(spec), {}, first.shape[1], 10, cfg.sigma_lo,
                        cfg.sigma_hi, ""};
  auto params = bundle.model.params();
  AdamState<float> adam((float)cfg.lr);
  Rng rng = Rng(cfg.seed).derive(1);

  bundle.model.set_train_grads(true);
  std::vector<int> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0;
    for (int idx : order) {
      const auto& img = images[idx];
      const int oy = (int)rng.uniform_int(0, img.shape[1] - cfg.crop);
      const int ox = (int)rng.uniform_int(0, img.shape[2] - cfg.crop);
      Tensor<float> clean({3, cfg.crop, cfg.crop});
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < cfg.crop; ++i)
          for (int j = 0; j < cfg.crop; ++j) clean.at(c, i, j) = img.at(c, oy + i, ox + j);

      const double sigma = rng.uniform(cfg.sigma_lo, cfg.sigma_hi);
      Tensor<float> noise({3, cfg.crop, cfg.crop});
      for (std::int64_t i = 0; i < noise.numel(); ++i) noise.data[i] = (float)rng.normal(sigma);
      Tensor<float> noisy = clean;
      noisy.data += noise.data;

      auto loss = mse_to(bundle.model.forward(leaf(std::move(noisy)), true), noise);
      epoch_loss += loss->value.data[0];
      zero_grads(params);
      backward(loss);
      adam_step(params, adam);
    }
    if (cfg.log)
      (*cfg.log) << "epoch " << epoch + 1 << " loss " << epoch_loss / images.size() << "\n";
  }

  bundle.model.set_train_grads(false);
  Tensor<double> acc({3, bundle.working_size, bundle.working_size});
  for (const auto& img : images)
    acc.data += detail::noise_prediction(bundle.model, img, bundle.pad).data.cast<double>();
  acc.data /= (double)images.size();
  bundle.fingerprint = acc.cast<float>();
  bundle.train_config_hash = denoiser_hash(bundle);
  return bundle;
}

// R = f_D(X) - F_DnCNN at the bundle's working size.
inline Tensor<float> extract_residual(const Tensor<float>& img, const DenoiserBundle& bundle,
                                      int pad = -1) {
  if (img.rank() != 3 || img.shape[1] != bundle.working_size ||
      img.shape[2] != bundle.working_size)
    throw DimensionError("extract_residual: image " + shape_str(img.shape) +
                         " vs bundle working size " + std::to_string(bundle.working_size));
  const float lo = img.data.minCoeff(), hi = img.data.maxCoeff();
  if (lo < -1e-5f || hi > 1.f + 1e-5f)
    throw DataError("extract_residual: image values outside [0,1]");
  auto& model = const_cast<Model<float>&>(bundle.model);
  auto r = detail::noise_prediction(model, img, pad < 0 ? bundle.pad : pad);
  r.data -= bundle.fingerprint.data;
  return r;
}

// One residual filter the whole pipeline agrees on: either the trained DnCNN
// bundle or the Gaussian high-pass baseline.
struct ResidualFilter {
  std::shared_ptr<DenoiserBundle> bundle;  // null -> gaussian
  double sigma = 3.0;

  static ResidualFilter gaussian(double sigma = 3.0) { return {nullptr, sigma}; }
  static ResidualFilter dncnn(std::shared_ptr<DenoiserBundle> b) { return {std::move(b), 0}; }

  std::string id() const {
    if (bundle) return "dncnn:" + bundle->train_config_hash;
    std::ostringstream os;
    os << "gaussian:" << sigma;
    return os.str();
  }

  Tensor<float> apply(const Tensor<float>& img) const {
    return bundle ? extract_residual(img, *bundle) : gaussian_highpass_residual(img, sigma);
  }
};

}  // namespace dif
