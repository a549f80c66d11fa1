#pragma once

#include "dif/fft2d.hpp"
#include "dif/models.hpp"
#include "dif/optim.hpp"

#include <algorithm>
#include <ostream>

namespace dif {

// Correlation can normalize per channel (Pearson per channel, averaged over
// the 3 channels; the default reading) or over the whole tensor at once.
enum class CorrMode { PerChannel, WholeTensor };

inline const char* corr_mode_name(CorrMode m) {
  return m == CorrMode::PerChannel ? "per-channel" : "whole-tensor";
}

inline CorrMode corr_mode_from_name(const std::string& s) {
  if (s == "per-channel") return CorrMode::PerChannel;
  if (s == "whole-tensor") return CorrMode::WholeTensor;
  throw ConfigError("unknown correlation mode '" + s + "'");
}

// Fingerprint construction scheme: optimized extraction (the method),
// residual averaging (Marra18-style baseline), or averaging scored by
// Fourier-magnitude correlation (Joslin20-style baseline).
enum class FpMethod { Extracted, Averaged, Fourier };

inline const char* method_name(FpMethod m) {
  switch (m) {
    case FpMethod::Extracted: return "dif";
    case FpMethod::Averaged: return "average";
    case FpMethod::Fourier: return "joslin";
  }
  return "?";
}

inline FpMethod method_from_name(const std::string& s) {
  if (s == "dif") return FpMethod::Extracted;
  if (s == "average") return FpMethod::Averaged;
  if (s == "joslin") return FpMethod::Fourier;
  throw ConfigError("unknown fingerprint method '" + s + "'");
}

namespace detail {

struct GroupStats {
  double mean, norm;  // norm of the mean-subtracted group
};

template <class S>
GroupStats group_stats(const S* p, std::int64_t n) {
  double sum = 0;
  for (std::int64_t i = 0; i < n; ++i) sum += p[i];
  const double mean = sum / n;
  double sq = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = (double)p[i] - mean;
    sq += d * d;
  }
  return {mean, std::sqrt(sq)};
}

template <class S>
void check_image_like(const Tensor<S>& x, const char* what) {
  if (x.rank() != 3 || x.shape[0] < 1)
    throw DimensionError(std::string(what) + ": expected CxHxW tensor, got " + shape_str(x.shape));
}

// Channel grouping for a correlation mode: per-channel gives C groups of HW,
// whole-tensor one group of everything.
template <class S>
int group_count(const Tensor<S>& x, CorrMode mode) {
  return mode == CorrMode::PerChannel ? x.shape[0] : 1;
}

}  // namespace detail

// Zero-mean unit-norm transform, the normalization inside rho.
template <class S>
Tensor<S> zm_un(const Tensor<S>& x, CorrMode mode = CorrMode::PerChannel) {
  detail::check_image_like(x, "zm_un");
  Tensor<S> out(x.shape);
  const int groups = detail::group_count(x, mode);
  const std::int64_t n = x.numel() / groups;
  for (int g = 0; g < groups; ++g) {
    const S* src = x.ptr() + g * n;
    S* dst = out.ptr() + g * n;
    const auto st = detail::group_stats(src, n);
    if (!(st.norm > 0) || !std::isfinite(st.norm))
      throw DegenerateInputError("zm_un: zero-variance channel " + std::to_string(g));
    const double inv = 1.0 / st.norm;
    for (std::int64_t i = 0; i < n; ++i) dst[i] = (S)(((double)src[i] - st.mean) * inv);
  }
  return out;
}

// rho(a, b): Pearson per group, averaged. Reductions accumulate in double.
template <class S>
double correlation(const Tensor<S>& a, const Tensor<S>& b, CorrMode mode = CorrMode::PerChannel) {
  detail::check_image_like(a, "correlation");
  check_same_shape(a, b, "correlation");
  const int groups = detail::group_count(a, mode);
  const std::int64_t n = a.numel() / groups;
  double acc = 0;
  for (int g = 0; g < groups; ++g) {
    const S* pa = a.ptr() + g * n;
    const S* pb = b.ptr() + g * n;
    const auto sa = detail::group_stats(pa, n);
    const auto sb = detail::group_stats(pb, n);
    if (!(sa.norm > 0) || !(sb.norm > 0))
      throw DegenerateInputError("correlation: zero-variance channel " + std::to_string(g));
    double dot = 0;
    for (std::int64_t i = 0; i < n; ++i)
      dot += ((double)pa[i] - sa.mean) * ((double)pb[i] - sb.mean);
    acc += dot / (sa.norm * sb.norm);
  }
  const double rho = acc / groups;
  return std::clamp(rho, -1.0, 1.0);
}

inline double correlation_distance(double rho_i, double rho_j) {
  return std::abs(rho_i - rho_j);
}

// Eq-6-style contrastive pair loss; t=1 for a same-class pair.
inline double sample_loss(double d, int t, double m) {
  if (!(m > 0)) throw ConfigError("sample_loss: margin must be positive");
  if (t != 0 && t != 1) throw ConfigError("sample_loss: t must be 0 or 1");
  return (t * d + (1 - t) * (m - d)) / m;
}

// Graph op: rho(r, f) against a fixed pre-normalized residual r_norm
// (zm_un already applied with the same mode). Scalar output node.
template <class S>
NodeRef<S> corr_fixed(const std::shared_ptr<Tensor<S>>& r_norm, const NodeRef<S>& f,
                      CorrMode mode) {
  detail::check_image_like(f->value, "corr_fixed");
  check_same_shape(*r_norm, f->value, "corr_fixed");
  const int groups = detail::group_count(f->value, mode);
  const std::int64_t n = f->value.numel() / groups;

  auto uhat = std::make_shared<Tensor<S>>(f->value.shape);  // normalized centered f
  auto qs = std::make_shared<std::vector<double>>(groups);
  auto rhos = std::make_shared<std::vector<double>>(groups);
  double acc = 0;
  for (int g = 0; g < groups; ++g) {
    const S* pf = f->value.ptr() + g * n;
    const S* pr = r_norm->ptr() + g * n;
    S* pu = uhat->ptr() + g * n;
    const auto st = detail::group_stats(pf, n);
    if (!(st.norm > 0) || !std::isfinite(st.norm))
      throw DegenerateInputError("corr_fixed: zero-variance candidate channel " +
                                 std::to_string(g));
    const double inv = 1.0 / st.norm;
    double dot = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double u = ((double)pf[i] - st.mean) * inv;
      pu[i] = (S)u;
      dot += (double)pr[i] * u;
    }
    (*qs)[g] = st.norm;
    (*rhos)[g] = dot;
    acc += dot;
  }
  Tensor<S> out({1});
  out.data[0] = (S)(acc / groups);

  return detail::make_op<S>(std::move(out), {f}, [r_norm, uhat, qs, rhos, groups, n](Node<S>& node) {
    auto& f = *node.parents[0];
    if (!f.needs_grad) return;
    f.ensure_grad();
    const double go = (double)node.grad.data[0] / groups;
    for (int g = 0; g < groups; ++g) {
      const S* pr = r_norm->ptr() + g * n;
      const S* pu = uhat->ptr() + g * n;
      S* pg = f.grad.ptr() + g * n;
      const double k = go / (*qs)[g];
      const double rho = (*rhos)[g];
      // d rho_g / d f = (r_hat - rho_g * u_hat) / |u|; the mean-projection
      // term vanishes because both r_hat and u_hat are zero-mean.
      for (std::int64_t i = 0; i < n; ++i) pg[i] += (S)(k * ((double)pr[i] - rho * pu[i]));
    }
  });
}

template <class S>
Tensor<S> average_fingerprint(const std::vector<Tensor<S>>& residuals) {
  if (residuals.empty()) throw DataError("average_fingerprint: empty residual set");
  Tensor<double> acc(residuals[0].shape);
  for (const auto& r : residuals) {
    check_same_shape(residuals[0], r, "average_fingerprint");
    acc.data += r.data.template cast<double>();
  }
  acc.data /= (double)residuals.size();
  return acc.template cast<S>();
}

// Correlation of DC-centered FFT magnitude maps (shift-insensitive score).
template <class S>
double fourier_correlation(const Tensor<S>& r, const Tensor<S>& f,
                           CorrMode mode = CorrMode::PerChannel) {
  detail::check_image_like(r, "fourier_correlation");
  check_same_shape(r, f, "fourier_correlation");
  const int c = r.shape[0], h = r.shape[1], w = r.shape[2];
  Tensor<double> mr({c, h, w}), mf({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const Eigen::MatrixXd ar = fftshift(fft2(channel_to_matrix(r, ch)).cwiseAbs().eval());
    const Eigen::MatrixXd af = fftshift(fft2(channel_to_matrix(f, ch)).cwiseAbs().eval());
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        mr.at(ch, i, j) = ar(i, j);
        mf.at(ch, i, j) = af(i, j);
      }
  }
  return correlation(mr, mf, mode);
}

// EMA accumulation of fingerprint candidates; seeded by the first candidate so
// the running value stays a convex combination of candidates.
template <class S>
struct EmaAccumulator {
  Tensor<S> value;
  bool initialized = false;

  void add(const Tensor<S>& cand, S beta) {
    if (!(beta >= S(0) && beta < S(1))) throw ConfigError("ema: decay must be in [0,1)");
    if (!initialized) {
      value = cand;
      initialized = true;
      return;
    }
    check_same_shape(value, cand, "ema");
    value.data = beta * value.data + (S(1) - beta) * cand.data;
  }
};

struct FingerprintRecord {
  Tensor<float> fingerprint;
  double mu_real = 0, mu_gen = 0;
  int n_real = 0, n_gen = 0;
  int working_size = 0;
  double margin = 0.01;
  double ema_decay = 0.99;
  std::string denoiser_id;
  std::string source_model_id;
  std::uint64_t seed = 0;
  CorrMode corr_mode = CorrMode::PerChannel;
  FpMethod method = FpMethod::Extracted;
};

// Score a residual against a record with the record's own scheme.
inline double record_correlation(const FingerprintRecord& rec, const Tensor<float>& residual) {
  if (rec.method == FpMethod::Fourier)
    return fourier_correlation(residual, rec.fingerprint, rec.corr_mode);
  return correlation(residual, rec.fingerprint, rec.corr_mode);
}

struct ExtractConfig {
  ModelSpec model{Arch::UNet, 16, 0, 32, 0};  // working_size 0 = take from residuals
  double margin = 0.01;
  int steps = 2000;
  double lr = 5e-4;
  double ema_decay = 0.99;
  int batch = 8;  // per class
  CorrMode corr_mode = CorrMode::PerChannel;
  std::uint64_t seed = 0;
  std::string source_model_id;
  std::ostream* log = nullptr;
};

namespace detail {

// mu over a residual set; degenerate residuals score 0 like the detector does.
inline double mean_correlation(const FingerprintRecord& rec,
                               const std::vector<Tensor<float>>& residuals) {
  double acc = 0;
  for (const auto& r : residuals) {
    double rho = 0;
    try {
      rho = record_correlation(rec, r);
    } catch (const DegenerateInputError&) {
    }
    acc += rho;
  }
  return acc / residuals.size();
}

}  // namespace detail

// Finalize a fingerprint into a detection-ready record: reference means over
// the full training residual sets (Eq.-7 style, each class by its own count),
// then sign canonicalization so mu_gen sits above mu_real. The loss is
// invariant under F -> -F, so the flip only fixes an arbitrary sign; it cannot
// apply to Fourier scoring where |FFT| ignores the sign.
inline FingerprintRecord make_reference_record(Tensor<float> fingerprint,
                                               const std::vector<Tensor<float>>& res_real,
                                               const std::vector<Tensor<float>>& res_gen,
                                               FingerprintRecord proto) {
  if (res_real.empty() || res_gen.empty())
    throw DataError("fingerprint record needs residuals from both classes");
  proto.fingerprint = std::move(fingerprint);
  proto.n_real = (int)res_real.size();
  proto.n_gen = (int)res_gen.size();
  proto.working_size = proto.fingerprint.shape[1];
  proto.mu_real = detail::mean_correlation(proto, res_real);
  proto.mu_gen = detail::mean_correlation(proto, res_gen);
  if (proto.method != FpMethod::Fourier && proto.mu_gen < proto.mu_real) {
    proto.fingerprint.data = -proto.fingerprint.data;
    proto.mu_real = -proto.mu_real;
    proto.mu_gen = -proto.mu_gen;
  }
  return proto;
}

inline FingerprintRecord extract_fingerprint(const std::vector<Tensor<float>>& res_real,
                                             const std::vector<Tensor<float>>& res_gen,
                                             const std::string& denoiser_id, ExtractConfig cfg) {
  if (res_real.empty() || res_gen.empty())
    throw DataError("extract_fingerprint: empty residual class");
  if ((int)res_real.size() < cfg.batch || (int)res_gen.size() < cfg.batch)
    throw DataError("extract_fingerprint: need at least batch (" + std::to_string(cfg.batch) +
                    ") residuals per class");
  if (cfg.steps < 1) throw ConfigError("extract_fingerprint: steps must be positive");
  if (!(cfg.margin > 0)) throw ConfigError("extract_fingerprint: margin must be positive");

  const Tensor<float>& first = res_real.front();
  detail::check_image_like(first, "extract_fingerprint");
  const int S = first.shape[1];
  for (const auto& r : res_real) check_same_shape(first, r, "extract_fingerprint");
  for (const auto& r : res_gen) check_same_shape(first, r, "extract_fingerprint");

  ModelSpec spec = cfg.model;
  if (spec.working_size == 0) spec.working_size = S;
  if (spec.working_size != S)
    throw ConfigError("extract_fingerprint: model working size " +
                      std::to_string(spec.working_size) + " vs residual size " + std::to_string(S));
  spec.seed = Rng(cfg.seed).derive(0xd1f).seed();

  // Candidates are mapped from tanh range to residual scale; the scale is the
  // global std over the training residuals, frozen before the first step.
  double sum = 0, sq = 0;
  std::int64_t count = 0;
  for (const auto* set : {&res_real, &res_gen})
    for (const auto& r : *set) {
      for (std::int64_t i = 0; i < r.numel(); ++i) {
        sum += r.data[i];
        sq += (double)r.data[i] * r.data[i];
      }
      count += r.numel();
    }
  const double mean = sum / count;
  const float scale = (float)std::sqrt(std::max(sq / count - mean * mean, 1e-20));

  // Pre-normalized residuals; degenerate training residuals are a data error.
  std::vector<std::shared_ptr<Tensor<float>>> rhat;
  std::vector<int> labels;  // 1 = generated
  for (const auto& r : res_real) {
    rhat.push_back(std::make_shared<Tensor<float>>(zm_un(r, cfg.corr_mode)));
    labels.push_back(0);
  }
  for (const auto& r : res_gen) {
    rhat.push_back(std::make_shared<Tensor<float>>(zm_un(r, cfg.corr_mode)));
    labels.push_back(1);
  }
  const int n_real = (int)res_real.size();

  auto model = build_model<float>(spec);
  auto params = model.params();
  AdamState<float> adam((float)cfg.lr);
  Rng z_rng = Rng(cfg.seed).derive(1);
  Rng batch_rng = Rng(cfg.seed).derive(2);
  EmaAccumulator<float> ema;

  auto sample_class = [&](int offset, int count_in_class, std::vector<int>& out) {
    std::vector<int> idx(count_in_class);
    for (int i = 0; i < count_in_class; ++i) idx[i] = offset + i;
    for (int i = 0; i < cfg.batch; ++i) {
      const int j = i + (int)batch_rng.uniform_int(0, count_in_class - 1 - i);
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
  };

  std::vector<double> loss_trace;
  loss_trace.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    auto z = leaf(sample_z<float>(spec, z_rng));
    auto cand = affine(model.forward(z, true), scale, 0.f);

    std::vector<int> pick;
    sample_class(0, n_real, pick);
    sample_class(n_real, (int)rhat.size() - n_real, pick);

    std::vector<NodeRef<float>> rhos;
    for (int i : pick) rhos.push_back(corr_fixed(rhat[i], cand, cfg.corr_mode));

    std::vector<NodeRef<float>> pair_losses;
    for (size_t i = 0; i < pick.size(); ++i)
      for (size_t j = i + 1; j < pick.size(); ++j) {
        auto d = nabs(nsub(rhos[i], rhos[j]));
        const bool same = labels[pick[i]] == labels[pick[j]];
        auto l = same ? nscale(d, (float)(1.0 / cfg.margin))
                      : nshift(nscale(d, (float)(-1.0 / cfg.margin)), 1.f);
        pair_losses.push_back(l);
      }
    auto loss = nmean(pair_losses);
    loss_trace.push_back(loss->value.data[0]);

    zero_grads(params);
    backward(loss);
    adam_step(params, adam);
    ema.add(cand->value, (float)cfg.ema_decay);

    if (cfg.log && (step + 1) % 100 == 0)
      (*cfg.log) << "step " << step + 1 << " loss " << loss->value.data[0] << "\n";
  }

  const int head = std::max(2, cfg.steps / 10);
  if (head <= (int)loss_trace.size()) {
    double a = 0, b = 0;
    for (int i = 0; i < head / 2; ++i) a += loss_trace[i];
    for (int i = head / 2; i < head; ++i) b += loss_trace[i];
    a /= head / 2;
    b /= head - head / 2;
    if (b >= a && cfg.log)
      (*cfg.log) << "warning: loss not decreasing over the first " << head << " steps (" << a
                 << " -> " << b << ")\n";
  }

  FingerprintRecord proto;
  proto.margin = cfg.margin;
  proto.ema_decay = cfg.ema_decay;
  proto.denoiser_id = denoiser_id;
  proto.source_model_id = cfg.source_model_id;
  proto.seed = cfg.seed;
  proto.corr_mode = cfg.corr_mode;
  proto.method = FpMethod::Extracted;
  return make_reference_record(ema.value, res_real, res_gen, std::move(proto));
}

}  // namespace dif
