#include "dif/data.hpp"

#include "dif/image_io.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace dif {

namespace fs = std::filesystem;
using nlohmann::json;

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest not readable: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("manifest parse failed: " + path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.working_size = j.at("working_size").get<int>();
    m.split_seed = j.at("split_seed").get<std::uint64_t>();
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.path = e.at("path").get<std::string>();
      const auto label = e.at("label").get<std::string>();
      if (label == "real")
        entry.label = Label::Real;
      else if (label == "generated")
        entry.label = Label::Generated;
      else
        throw DataError("manifest label must be real|generated, got '" + label + "'");
      entry.model_id = e.value("model_id", "");
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw DataError("manifest schema error: " + path + ": " + e.what());
  }
  if (m.working_size < 1) throw DataError("manifest working_size must be positive");
  return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  json j;
  j["working_size"] = m.working_size;
  j["split_seed"] = m.split_seed;
  j["entries"] = json::array();
  for (const auto& e : m.entries)
    j["entries"].push_back({{"path", e.path},
                            {"label", e.label == Label::Real ? "real" : "generated"},
                            {"model_id", e.model_id}});
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

SplitDataset load_and_split(const DatasetManifest& m) {
  if (m.entries.empty()) throw DataError("load_and_split: empty manifest");

  SplitDataset out;
  out.working_size = m.working_size;

  std::vector<Tensor<float>> real, gen;
  for (const auto& e : m.entries) {
    auto img = read_image(e.path);
    if (img.shape[1] < m.working_size || img.shape[2] < m.working_size) {
      out.skipped.push_back(e.path);
      continue;
    }
    auto cropped = center_crop(img, m.working_size);
    if (e.label == Label::Real)
      real.push_back(std::move(cropped));
    else {
      gen.push_back(std::move(cropped));
      if (out.model_id.empty()) out.model_id = e.model_id;
    }
  }
  if (real.empty() || gen.empty())
    throw DataError("load_and_split: need usable images in both classes (real " +
                    std::to_string(real.size()) + ", generated " + std::to_string(gen.size()) +
                    ")");

  Rng rng = Rng(m.split_seed).derive(0x5b);
  auto split = [&](std::vector<Tensor<float>>& src, std::vector<Tensor<float>>& train,
                   std::vector<Tensor<float>>& test) {
    std::vector<int> order(src.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    const size_t n_train = src.size() / 2;
    for (size_t i = 0; i < order.size(); ++i)
      (i < n_train ? train : test).push_back(std::move(src[order[i]]));
  };
  split(real, out.train_real, out.test_real);
  split(gen, out.train_gen, out.test_gen);
  return out;
}

Tensor<float> OraclePattern::render(int size) const {
  Tensor<float> base({3, size, size});
  switch (kind) {
    case Kind::Checkerboard: {
      if (period < 2 || period % 2) throw ConfigError("checkerboard period must be even >= 2");
      if (size % period) throw ConfigError("checkerboard period must divide the render size");
      const int half = period / 2;
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < size; ++i)
          for (int j = 0; j < size; ++j)
            base.at(c, i, j) = ((i / half + j / half) % 2) ? -1.f : 1.f;
      break;
    }
    case Kind::AxisGrid: {
      if (period < 2) throw ConfigError("grid spacing must be >= 2");
      if (size % period) throw ConfigError("grid spacing must divide the render size");
      // +1 on grid lines, constant negative elsewhere for exact zero mean.
      const double line_frac = 1.0 - std::pow(1.0 - 1.0 / period, 2);
      const float bg = (float)(-line_frac / (1.0 - line_frac));
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < size; ++i)
          for (int j = 0; j < size; ++j)
            base.at(c, i, j) = (i % period == 0 || j % period == 0) ? 1.f : bg;
      break;
    }
    case Kind::FixedRandom: {
      Rng rng = Rng(seed).derive(0xf1);
      for (int c = 0; c < 3; ++c) {
        double mean = 0;
        for (int i = 0; i < size; ++i)
          for (int j = 0; j < size; ++j) {
            base.at(c, i, j) = (float)rng.uniform(-1, 1);
            mean += base.at(c, i, j);
          }
        mean /= (double)size * size;
        float peak = 0;
        for (int i = 0; i < size; ++i)
          for (int j = 0; j < size; ++j) {
            base.at(c, i, j) -= (float)mean;
            peak = std::max(peak, std::abs(base.at(c, i, j)));
          }
        for (int i = 0; i < size; ++i)
          for (int j = 0; j < size; ++j) base.at(c, i, j) /= peak;
      }
      break;
    }
    case Kind::Interpolated: {
      if (!a || !b) throw ConfigError("interpolated pattern needs both endpoints");
      if (t < 0 || t > 1) throw ConfigError("interpolation weight must be in [0,1]");
      auto pa = a->render(size);
      auto pb = b->render(size);
      base.data = (float)(1 - t) * pa.data + (float)t * pb.data;
      const float peak = base.data.abs().maxCoeff();
      if (peak > 0) base.data /= peak;
      break;
    }
  }
  return base;
}

std::vector<Tensor<float>> synth_inject(const std::vector<Tensor<float>>& real,
                                        const OraclePattern& pattern, double noise_sigma,
                                        std::uint64_t seed) {
  if (pattern.amplitude < 0) throw ConfigError("synth_inject: negative amplitude");
  if (noise_sigma < 0) throw ConfigError("synth_inject: negative noise sigma");
  if (real.empty()) return {};

  const int size = real.front().shape[1];
  auto base = pattern.render(size);
  const float amp = (float)(pattern.amplitude / 255.0);

  Rng rng = Rng(seed).derive(0x1a);
  std::vector<Tensor<float>> out;
  out.reserve(real.size());
  for (const auto& img : real) {
    check_same_shape(real.front(), img, "synth_inject");
    Tensor<float> g = img;
    g.data += amp * base.data;
    if (noise_sigma > 0)
      for (std::int64_t i = 0; i < g.numel(); ++i) g.data[i] += (float)rng.normal(noise_sigma);
    g.data = g.data.max(0.f).min(1.f);
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<Tensor<float>> synthetic_real_images(int n, int size, std::uint64_t seed) {
  if (n < 1 || size < 4) throw ConfigError("synthetic_real_images: bad count or size");
  std::vector<Tensor<float>> out;
  out.reserve(n);
  Rng rng = Rng(seed).derive(0x2e);
  for (int k = 0; k < n; ++k) {
    Tensor<float> img({3, size, size});
    for (int c = 0; c < 3; ++c) {
      const double base = rng.uniform(0.25, 0.75);
      const double gx = rng.uniform(-0.3, 0.3) / size;
      const double gy = rng.uniform(-0.3, 0.3) / size;
      for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) img.at(c, i, j) = (float)(base + gy * i + gx * j);
    }
    const int blobs = (int)rng.uniform_int(1, 4);
    for (int b = 0; b < blobs; ++b) {
      const double cy = rng.uniform(0, size), cx = rng.uniform(0, size);
      const double rad = rng.uniform(size / 8.0, size / 2.0);
      const double amp = rng.uniform(-0.25, 0.25);
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < size; ++i)
          for (int j = 0; j < size; ++j) {
            const double d2 = (i - cy) * (i - cy) + (j - cx) * (j - cx);
            img.at(c, i, j) += (float)(amp * std::exp(-d2 / (2 * rad * rad)));
          }
    }
    // Every other image gets texture noise so the corpus spans flat and busy.
    if (k % 2) {
      const double sigma = rng.uniform(0.01, 0.03);
      for (std::int64_t i = 0; i < img.numel(); ++i) img.data[i] += (float)rng.normal(sigma);
    }
    img.data = img.data.max(0.1f).min(0.9f);
    out.push_back(std::move(img));
  }
  return out;
}

PerturbationSpec perturbation_from_name(const std::string& name, int quality, double sigma,
                                        std::uint64_t seed) {
  if (name == "none") return PerturbationSpec::none();
  if (name == "jpeg") return PerturbationSpec::jpeg(quality);
  if (name == "resize-half") return PerturbationSpec::resize_half();
  if (name == "blur") return PerturbationSpec::blur(sigma);
  if (name == "mixed") return PerturbationSpec::mixed(seed);
  throw ConfigError("unknown perturbation '" + name + "'");
}

std::string perturbation_name(const PerturbationSpec& spec) {
  switch (spec.kind) {
    case PerturbationSpec::Kind::None: return "none";
    case PerturbationSpec::Kind::Jpeg: return "jpeg" + std::to_string(spec.quality);
    case PerturbationSpec::Kind::ResizeHalfNN: return "resize-half";
    case PerturbationSpec::Kind::GaussianBlur: {
      std::ostringstream os;
      os << "blur" << spec.sigma;
      return os.str();
    }
    case PerturbationSpec::Kind::MixedRandom: return "mixed";
  }
  return "?";
}

namespace {

Tensor<float> resize_half_nn(const Tensor<float>& img) {
  const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
  if (h % 2 || w % 2)
    throw DataError("resize-half: odd image size " + shape_str(img.shape));
  Tensor<float> small({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h / 2; ++i)
      for (int j = 0; j < w / 2; ++j) small.at(ch, i, j) = img.at(ch, 2 * i, 2 * j);
  Tensor<float> back({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) back.at(ch, i, j) = small.at(ch, i / 2, j / 2);
  return back;
}

Tensor<float> jpeg_roundtrip(const Tensor<float>& img, int quality) {
  auto bytes = encode_jpeg(img, quality);
  return decode_jpeg(bytes.data(), bytes.size());
}

}  // namespace

Tensor<float> perturb(const Tensor<float>& img, const PerturbationSpec& spec,
                      std::uint64_t image_index) {
  if (img.rank() != 3) throw DimensionError("perturb: expected CxHxW, got " + shape_str(img.shape));
  switch (spec.kind) {
    case PerturbationSpec::Kind::None:
      return img;
    case PerturbationSpec::Kind::Jpeg:
      return jpeg_roundtrip(img, spec.quality);
    case PerturbationSpec::Kind::ResizeHalfNN:
      return resize_half_nn(img);
    case PerturbationSpec::Kind::GaussianBlur:
      return gaussian_blur(img, spec.sigma);
    case PerturbationSpec::Kind::MixedRandom: {
      Rng rng = Rng(spec.seed).derive(image_index);
      switch (rng.uniform_int(0, 4)) {
        case 0: return img;
        case 1: return jpeg_roundtrip(img, 75);
        case 2: return jpeg_roundtrip(img, 50);
        case 3: return resize_half_nn(img);
        default: return gaussian_blur(img, 3.0);
      }
    }
  }
  throw ConfigError("perturb: bad kind");
}

JpegQualityStats jpeg_quality_stats(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("jpeg_quality_stats: not a directory: " + dir);
  JpegQualityStats stats;
  std::vector<int> qualities;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    try {
      qualities.push_back(estimate_jpeg_quality(p.string()));
    } catch (const DataError&) {
      ++stats.skipped;
    }
  }
  if (qualities.empty()) throw DataError("jpeg_quality_stats: no JPEG files in " + dir);
  double sum = 0;
  for (int q : qualities) sum += q;
  stats.count = (int)qualities.size();
  stats.mean = sum / stats.count;
  std::nth_element(qualities.begin(), qualities.begin() + qualities.size() / 2, qualities.end());
  stats.median = qualities[qualities.size() / 2];
  return stats;
}

}  // namespace dif
