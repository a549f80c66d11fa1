#pragma once

#include "dif/fft2d.hpp"
#include "dif/models.hpp"
#include "dif/optim.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace dif {

// DC-centered log-magnitude spectrum, one 2D map per channel.
struct SpectrumMap {
  Tensor<double> logmag;  // (C,H,W)
  std::string source_id;

  Eigen::MatrixXd mean_map() const {
    const int c = logmag.shape[0], h = logmag.shape[1], w = logmag.shape[2];
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(h, w);
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) m(i, j) += logmag.at(ch, i, j);
    return m / c;
  }
};

template <class S>
SpectrumMap spectrum_logmag(const Tensor<S>& img, std::string source_id = "") {
  if (img.rank() != 3)
    throw DimensionError("spectrum_logmag: expected CxHxW, got " + shape_str(img.shape));
  const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
  SpectrumMap out{Tensor<double>({c, h, w}), std::move(source_id)};
  for (int ch = 0; ch < c; ++ch) {
    Eigen::MatrixXd m = channel_to_matrix(img, ch);
    m.array() -= m.mean();
    const Eigen::MatrixXd mag = fftshift(fft2(m).cwiseAbs().eval());
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.logmag.at(ch, i, j) = std::log1p(mag(i, j));
  }
  return out;
}

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0;
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
    m = (m + v[mid - 1]) / 2;
  }
  return m;
}

inline double score_ratio(double mean, double median) {
  constexpr double eps = 1e-12;
  if (mean < eps && median < eps) return 0;  // degenerate flat spectrum
  return mean / std::max(median, eps);
}

}  // namespace detail

// Energy on the interior harmonic lattice of a period-p pattern, relative to
// the typical off-lattice bin. Axis bins are left to cross_line_score so the
// two signatures stay separable.
inline double harmonic_peak_score(const SpectrumMap& spec, int p) {
  const Eigen::MatrixXd m = spec.mean_map();
  const int h = (int)m.rows(), w = (int)m.cols();
  if (p < 2 || h % p || w % p)
    throw ConfigError("harmonic_peak_score: period " + std::to_string(p) +
                      " must divide the spectrum size");
  const int cy = h / 2, cx = w / 2;
  const int sy = h / p, sx = w / p;

  double lattice_sum = 0;
  int lattice_n = 0;
  std::vector<double> rest;
  rest.reserve((size_t)h * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (i == cy && j == cx) continue;  // DC
      rest.push_back(m(i, j));
      if (i != cy && j != cx && (i - cy) % sy == 0 && (j - cx) % sx == 0) {
        lattice_sum += m(i, j);
        ++lattice_n;
      }
    }
  if (!lattice_n) throw ConfigError("harmonic_peak_score: empty harmonic lattice");
  return detail::score_ratio(lattice_sum / lattice_n, detail::median_of(std::move(rest)));
}

// Energy along the central row and column (the boundary-artifact cross),
// relative to the typical off-axis bin.
inline double cross_line_score(const SpectrumMap& spec) {
  const Eigen::MatrixXd m = spec.mean_map();
  const int h = (int)m.rows(), w = (int)m.cols();
  const int cy = h / 2, cx = w / 2;

  double line_sum = 0;
  int line_n = 0;
  std::vector<double> rest;
  rest.reserve((size_t)h * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (i == cy && j == cx) continue;
      if (i == cy || j == cx) {
        line_sum += m(i, j);
        ++line_n;
      } else {
        rest.push_back(m(i, j));
      }
    }
  return detail::score_ratio(line_sum / line_n, detail::median_of(std::move(rest)));
}

struct MonochromeRun {
  ModelSpec spec;
  double target_gray = 0.5;
  int steps = 0;
  double final_mse = 0;
  Tensor<float> artifact;  // g(Z) - target at the final weights
};

// The reconstruction experiment: push a generator toward one flat gray image
// and keep whatever it cannot remove.
inline MonochromeRun reconstruct_monochrome(ModelSpec spec, double gray, int steps,
                                            std::uint64_t seed, std::ostream* log = nullptr) {
  if (!(gray >= 0 && gray <= 1)) throw ConfigError("monochrome: gray must be in [0,1]");
  if (steps < 0) throw ConfigError("monochrome: negative step count");
  if (!is_generator(spec.arch)) throw ConfigError("monochrome: generator architectures only");
  spec.seed = Rng(seed).derive(0xa7).seed();

  auto model = build_model<float>(spec);
  auto params = model.params();
  AdamState<float> adam(5e-4f);
  Rng z_rng = Rng(seed).derive(1);

  const int s = spec.working_size;
  auto target = Tensor<float>::full({3, s, s}, (float)gray);

  for (int step = 0; step < steps; ++step) {
    auto loss = mse_to(model.forward(leaf(sample_z<float>(spec, z_rng)), true), target);
    const float l = loss->value.data[0];
    if (!std::isfinite(l))
      throw DataError("monochrome run diverged at step " + std::to_string(step + 1));
    zero_grads(params);
    backward(loss);
    adam_step(params, adam);
    if (log && (step + 1) % 100 == 0) (*log) << "step " << step + 1 << " mse " << l << "\n";
  }

  model.set_train_grads(false);
  Rng eval_rng = Rng(seed).derive(2);
  auto out = model.forward(leaf(sample_z<float>(spec, eval_rng)), false);

  MonochromeRun run;
  run.spec = spec;
  run.target_gray = gray;
  run.steps = steps;
  run.artifact = out->value;
  run.artifact.data -= (float)gray;
  double acc = 0;
  for (std::int64_t i = 0; i < run.artifact.numel(); ++i)
    acc += (double)run.artifact.data[i] * run.artifact.data[i];
  run.final_mse = acc / run.artifact.numel();
  return run;
}

}  // namespace dif
