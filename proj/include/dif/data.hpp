#pragma once

#include "dif/denoiser.hpp"
#include "dif/detector.hpp"

#include <memory>

namespace dif {

struct ManifestEntry {
  std::string path;
  Label label = Label::Real;
  std::string model_id;
};

struct DatasetManifest {
  int working_size = 128;
  std::uint64_t split_seed = 0;
  std::vector<ManifestEntry> entries;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);

template <class S>
Tensor<S> center_crop(const Tensor<S>& img, int size) {
  const int h = img.shape[1], w = img.shape[2];
  if (h < size || w < size)
    throw DimensionError("center_crop: image " + shape_str(img.shape) + " smaller than " +
                         std::to_string(size));
  const int oy = (h - size) / 2, ox = (w - size) / 2;
  Tensor<S> out({img.shape[0], size, size});
  for (int c = 0; c < img.shape[0]; ++c)
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j) out.at(c, i, j) = img.at(c, oy + i, ox + j);
  return out;
}

// Images after deterministic 50/50 split and center crop; crop only, pixels
// are never resampled on the way in.
struct SplitDataset {
  std::string model_id;
  int working_size = 0;
  std::vector<Tensor<float>> train_real, train_gen, test_real, test_gen;
  std::vector<std::string> skipped;  // too-small images, reported not fatal
};

SplitDataset load_and_split(const DatasetManifest& m);

// Ground-truth injectable pattern: zero mean per channel, unit peak before
// amplitude scaling. Amplitude is in 1/255 units.
struct OraclePattern {
  enum class Kind { Checkerboard, AxisGrid, FixedRandom, Interpolated };

  Kind kind = Kind::FixedRandom;
  int period = 2;           // checkerboard period / grid spacing
  std::uint64_t seed = 0;   // fixed-random
  double t = 0;             // interpolation weight toward b
  std::shared_ptr<OraclePattern> a, b;
  double amplitude = 4;     // in 1/255 units

  static OraclePattern checkerboard(int period, double amplitude) {
    OraclePattern p;
    p.kind = Kind::Checkerboard;
    p.period = period;
    p.amplitude = amplitude;
    return p;
  }
  static OraclePattern axis_grid(int spacing, double amplitude) {
    OraclePattern p;
    p.kind = Kind::AxisGrid;
    p.period = spacing;
    p.amplitude = amplitude;
    return p;
  }
  static OraclePattern fixed_random(std::uint64_t seed, double amplitude) {
    OraclePattern p;
    p.kind = Kind::FixedRandom;
    p.seed = seed;
    p.amplitude = amplitude;
    return p;
  }
  static OraclePattern interpolated(OraclePattern pa, OraclePattern pb, double t) {
    OraclePattern p;
    p.kind = Kind::Interpolated;
    p.a = std::make_shared<OraclePattern>(std::move(pa));
    p.b = std::make_shared<OraclePattern>(std::move(pb));
    p.t = t;
    p.amplitude = p.a->amplitude;
    return p;
  }

  // Base pattern at unit peak, before amplitude scaling.
  Tensor<float> render(int size) const;
};

std::vector<Tensor<float>> synth_inject(const std::vector<Tensor<float>>& real,
                                        const OraclePattern& pattern, double noise_sigma,
                                        std::uint64_t seed);

// Desk-scale stand-ins for "real" photographs: gradients, soft blobs, and a
// little texture noise, kept inside [0.1, 0.9] so injection has headroom.
std::vector<Tensor<float>> synthetic_real_images(int n, int size, std::uint64_t seed);

struct PerturbationSpec {
  enum class Kind { None, Jpeg, ResizeHalfNN, GaussianBlur, MixedRandom };

  Kind kind = Kind::None;
  int quality = 75;       // Jpeg
  double sigma = 3.0;     // GaussianBlur
  std::uint64_t seed = 0; // MixedRandom

  static PerturbationSpec none() { return {}; }
  static PerturbationSpec jpeg(int quality) {
    PerturbationSpec s;
    s.kind = Kind::Jpeg;
    s.quality = quality;
    return s;
  }
  static PerturbationSpec resize_half() {
    PerturbationSpec s;
    s.kind = Kind::ResizeHalfNN;
    return s;
  }
  static PerturbationSpec blur(double sigma) {
    PerturbationSpec s;
    s.kind = Kind::GaussianBlur;
    s.sigma = sigma;
    return s;
  }
  static PerturbationSpec mixed(std::uint64_t seed) {
    PerturbationSpec s;
    s.kind = Kind::MixedRandom;
    s.seed = seed;
    return s;
  }
};

PerturbationSpec perturbation_from_name(const std::string& name, int quality, double sigma,
                                        std::uint64_t seed);
std::string perturbation_name(const PerturbationSpec& spec);

Tensor<float> perturb(const Tensor<float>& img, const PerturbationSpec& spec,
                      std::uint64_t image_index = 0);

struct JpegQualityStats {
  double mean = 0;
  int median = 0;
  int count = 0;
  int skipped = 0;
};

JpegQualityStats jpeg_quality_stats(const std::string& dir);

}  // namespace dif
