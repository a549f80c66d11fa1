#pragma once

#include "dif/fingerprint.hpp"

#include <numeric>

namespace dif {

enum class Label { Real, Generated };

inline const char* label_name(Label l) { return l == Label::Generated ? "Generated" : "Real"; }

// Nearest-reference-mean decision. Ties and degenerate inputs fall back to
// Real: a forensic detector should fail conservative.
inline Label classify_rho(double rho, const FingerprintRecord& rec) {
  return std::abs(rho - rec.mu_gen) < std::abs(rho - rec.mu_real) ? Label::Generated : Label::Real;
}

inline Label classify(const Tensor<float>& residual, const FingerprintRecord& rec) {
  double rho;
  try {
    rho = record_correlation(rec, residual);
  } catch (const DegenerateInputError&) {
    return Label::Real;
  }
  return classify_rho(rho, rec);
}

// Residuals of one dataset, both halves, after a fixed residual filter.
struct ResidualDataset {
  std::string model_id;
  std::string denoiser_id;
  std::vector<Tensor<float>> real, gen;
};

struct EvalMetrics {
  double accuracy = 0;  // percent
  double tpr = 0, tnr = 0;
  int n_real = 0, n_gen = 0;
  int correct_real = 0, correct_gen = 0;
};

inline EvalMetrics evaluate(const ResidualDataset& data, const FingerprintRecord& rec) {
  if (data.real.empty() && data.gen.empty()) throw DataError("evaluate: empty dataset");
  EvalMetrics m;
  m.n_real = (int)data.real.size();
  m.n_gen = (int)data.gen.size();
  for (const auto& r : data.real)
    if (classify(r, rec) == Label::Real) ++m.correct_real;
  for (const auto& r : data.gen)
    if (classify(r, rec) == Label::Generated) ++m.correct_gen;
  m.accuracy = 100.0 * (m.correct_real + m.correct_gen) / (m.n_real + m.n_gen);
  m.tpr = m.n_gen ? 100.0 * m.correct_gen / m.n_gen : 0;
  m.tnr = m.n_real ? 100.0 * m.correct_real / m.n_real : 0;
  return m;
}

struct CrossDetectionMatrix {
  std::vector<std::string> model_ids;
  std::vector<std::vector<double>> acc;  // acc[i][j]: record i on dataset j, percent
};

inline CrossDetectionMatrix cross_detect(const std::vector<FingerprintRecord>& records,
                                         const std::vector<ResidualDataset>& datasets) {
  if (records.size() != datasets.size())
    throw ConfigError("cross_detect: record/dataset count mismatch");
  if (records.empty()) throw DataError("cross_detect: nothing to cross");
  CrossDetectionMatrix m;
  for (const auto& d : datasets) m.model_ids.push_back(d.model_id);
  for (const auto& rec : records) {
    std::vector<double> row;
    for (const auto& d : datasets) {
      const auto& probe = d.real.empty() ? d.gen.front() : d.real.front();
      if (probe.shape[1] != rec.working_size)
        throw DimensionError("cross_detect: dataset " + d.model_id + " size " +
                             std::to_string(probe.shape[1]) + " vs record size " +
                             std::to_string(rec.working_size));
      if (!rec.denoiser_id.empty() && !d.denoiser_id.empty() && rec.denoiser_id != d.denoiser_id)
        throw ConfigError("cross_detect: denoiser mismatch (" + rec.denoiser_id + " vs " +
                          d.denoiser_id + ")");
      row.push_back(evaluate(d, rec).accuracy);
    }
    m.acc.push_back(std::move(row));
  }
  return m;
}

struct RelatedPair {
  int i = 0, j = 0;
  double min_acc = 0, asymmetry = 0;
};

struct LineageReport {
  double t_high = 80, t_sym = 10;
  std::vector<RelatedPair> related;
  std::vector<std::vector<int>> clusters;  // components of size >= 2
};

// Pairs with high, symmetric cross-detection are treated as same-lineage;
// clusters are the transitive closure of that relation.
inline LineageReport lineage_clusters(const CrossDetectionMatrix& m, double t_high = 80,
                                      double t_sym = 10) {
  const int n = (int)m.acc.size();
  for (const auto& row : m.acc)
    if ((int)row.size() != n) throw DimensionError("lineage_clusters: matrix not square");
  LineageReport rep;
  rep.t_high = t_high;
  rep.t_sym = t_sym;

  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };

  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double lo = std::min(m.acc[i][j], m.acc[j][i]);
      const double asym = std::abs(m.acc[i][j] - m.acc[j][i]);
      if (lo >= t_high && asym <= t_sym) {
        rep.related.push_back({i, j, lo, asym});
        parent[find(i)] = find(j);
      }
    }

  std::vector<std::vector<int>> groups(n);
  for (int i = 0; i < n; ++i) groups[find(i)].push_back(i);
  for (auto& g : groups)
    if (g.size() >= 2) rep.clusters.push_back(std::move(g));
  return rep;
}

// Pairwise |rho| between fingerprints; kept to reproduce the negative result
// that fingerprint correlation alone does not recover lineage.
inline std::vector<std::vector<double>> fingerprint_cross_correlation(
    const std::vector<Tensor<float>>& fps, CorrMode mode = CorrMode::PerChannel) {
  const int n = (int)fps.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0));
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      double v = 0;
      try {
        v = std::abs(correlation(fps[i], fps[j], mode));
      } catch (const DegenerateInputError&) {
      }
      m[i][j] = m[j][i] = v;
    }
  return m;
}

}  // namespace dif
