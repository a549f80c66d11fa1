#include "dif/checkpoint.hpp"

#include "dif/hash.hpp"
#include "dif/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace dif {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'D', 'I', 'F', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (unsigned char)(v >> (8 * i));
  os.write((const char*)b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
  os.write((const char*)b, 8);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read((char*)b, 4)) throw DataError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read((char*)b, 8)) throw DataError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

json model_spec_json(const ModelSpec& spec) {
  return {{"arch", arch_name(spec.arch)},
          {"in_channels", spec.in_channels},
          {"working_size", spec.working_size},
          {"hidden_width", spec.hidden_width},
          {"seed", spec.seed}};
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec spec;
  spec.arch = arch_from_name(j.at("arch").get<std::string>());
  spec.in_channels = j.at("in_channels").get<int>();
  spec.working_size = j.at("working_size").get<int>();
  spec.hidden_width = j.at("hidden_width").get<int>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

void append_model_tensors(Model<float>& model, std::vector<NamedTensor>& out) {
  for (const auto& p : model.params()) out.push_back({"model." + p.name, p.node->value});
  for (const auto& L : model.layers)
    if (L.running_mean.numel()) {
      out.push_back({"model." + L.name + ".rm", L.running_mean});
      out.push_back({"model." + L.name + ".rv", L.running_var});
    }
}

Model<float> model_from_tensors(const ModelSpec& spec, const std::vector<NamedTensor>& tensors,
                                size_t& used) {
  std::unordered_map<std::string, const Tensor<float>*> by_name;
  for (const auto& t : tensors) by_name.emplace(t.name, &t.value);

  auto take = [&](const std::string& name, Tensor<float>& dst) {
    auto it = by_name.find("model." + name);
    if (it == by_name.end()) throw DataError("checkpoint missing tensor 'model." + name + "'");
    if (it->second->shape != dst.shape)
      throw DataError("checkpoint tensor 'model." + name + "' has shape " +
                      shape_str(it->second->shape) + ", expected " + shape_str(dst.shape));
    dst = *it->second;
    ++used;
  };

  auto model = build_model<float>(spec);
  for (const auto& p : model.params()) take(p.name, p.node->value);
  for (auto& L : model.layers)
    if (L.running_mean.numel()) {
      take(L.name + ".rm", L.running_mean);
      take(L.name + ".rv", L.running_var);
    }
  return model;
}

json parse_metadata(const CheckpointContainer& c, const std::string& expect_type) {
  json meta;
  try {
    meta = json::parse(c.metadata_json);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata parse failed: ") + e.what());
  }
  const auto type = meta.value("type", "");
  if (type != expect_type)
    throw DataError("checkpoint holds '" + type + "', expected '" + expect_type + "'");
  return meta;
}

}  // namespace

void write_checkpoint(const CheckpointContainer& c, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path);
  os.write(kMagic, 4);
  put_u32(os, (std::uint32_t)c.version);
  put_u64(os, c.metadata_json.size());
  os.write(c.metadata_json.data(), (std::streamsize)c.metadata_json.size());
  put_u32(os, (std::uint32_t)c.tensors.size());
  for (const auto& t : c.tensors) {
    put_u32(os, (std::uint32_t)t.name.size());
    os.write(t.name.data(), (std::streamsize)t.name.size());
    put_u32(os, (std::uint32_t)t.value.rank());
    for (int d : t.value.shape) put_u32(os, (std::uint32_t)d);
    os.write((const char*)t.value.ptr(), (std::streamsize)(4 * t.value.numel()));
  }
  if (!os) throw DataError("checkpoint write failed: " + path);
}

CheckpointContainer read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("not a DIF1 checkpoint: " + path);
  CheckpointContainer c;
  c.version = (int)get_u32(is);
  if (c.version != CheckpointContainer::kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(c.version));
  const auto meta_len = get_u64(is);
  c.metadata_json.resize(meta_len);
  if (meta_len && !is.read(c.metadata_json.data(), (std::streamsize)meta_len))
    throw DataError("checkpoint truncated");
  const auto n = get_u32(is);
  c.tensors.reserve(n);
  for (std::uint32_t k = 0; k < n; ++k) {
    NamedTensor t;
    const auto name_len = get_u32(is);
    t.name.resize(name_len);
    if (name_len && !is.read(t.name.data(), name_len)) throw DataError("checkpoint truncated");
    const auto ndim = get_u32(is);
    if (ndim > 8) throw DataError("checkpoint tensor rank " + std::to_string(ndim));
    std::vector<int> shape(ndim);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = (int)get_u32(is);
      numel *= d;
    }
    t.value = Tensor<float>(shape);
    if (numel && !is.read((char*)t.value.ptr(), (std::streamsize)(4 * numel)))
      throw DataError("checkpoint truncated");
    c.tensors.push_back(std::move(t));
  }
  return c;
}

std::uint64_t checkpoint_hash(const CheckpointContainer& c) {
  std::uint64_t h = fnv1a_u64((std::uint64_t)c.version);
  h = fnv1a(c.metadata_json, h);
  for (const auto& t : c.tensors) {
    h = fnv1a(t.name, h);
    h = hash_tensor(t.value, h);
  }
  return h;
}

void save_fingerprint(const FingerprintRecord& rec, const std::string& path) {
  CheckpointContainer c;
  json meta{{"type", "fingerprint"},
            {"mu_real", rec.mu_real},
            {"mu_gen", rec.mu_gen},
            {"n_real", rec.n_real},
            {"n_gen", rec.n_gen},
            {"working_size", rec.working_size},
            {"margin", rec.margin},
            {"ema_decay", rec.ema_decay},
            {"denoiser_id", rec.denoiser_id},
            {"source_model_id", rec.source_model_id},
            {"seed", rec.seed},
            {"corr_mode", corr_mode_name(rec.corr_mode)},
            {"method", method_name(rec.method)}};
  c.metadata_json = meta.dump();
  c.tensors.push_back({"fingerprint", rec.fingerprint});
  write_checkpoint(c, path);
}

FingerprintRecord load_fingerprint(const std::string& path) {
  auto c = read_checkpoint(path);
  auto meta = parse_metadata(c, "fingerprint");
  FingerprintRecord rec;
  try {
    rec.mu_real = meta.at("mu_real").get<double>();
    rec.mu_gen = meta.at("mu_gen").get<double>();
    rec.n_real = meta.at("n_real").get<int>();
    rec.n_gen = meta.at("n_gen").get<int>();
    rec.working_size = meta.at("working_size").get<int>();
    rec.margin = meta.at("margin").get<double>();
    rec.ema_decay = meta.at("ema_decay").get<double>();
    rec.denoiser_id = meta.at("denoiser_id").get<std::string>();
    rec.source_model_id = meta.at("source_model_id").get<std::string>();
    rec.seed = meta.at("seed").get<std::uint64_t>();
    rec.corr_mode = corr_mode_from_name(meta.at("corr_mode").get<std::string>());
    rec.method = method_from_name(meta.at("method").get<std::string>());
  } catch (const json::exception& e) {
    throw DataError(std::string("fingerprint metadata schema error: ") + e.what());
  }
  if (c.tensors.size() != 1 || c.tensors[0].name != "fingerprint")
    throw DataError("fingerprint checkpoint must hold exactly one 'fingerprint' tensor");
  rec.fingerprint = std::move(c.tensors[0].value);
  return rec;
}

void save_denoiser(const DenoiserBundle& bundle, const std::string& path) {
  CheckpointContainer c;
  json meta{{"type", "denoiser"},
            {"spec", model_spec_json(bundle.model.spec)},
            {"working_size", bundle.working_size},
            {"pad", bundle.pad},
            {"sigma_lo", bundle.sigma_lo},
            {"sigma_hi", bundle.sigma_hi},
            {"train_config_hash", bundle.train_config_hash}};
  c.metadata_json = meta.dump();
  append_model_tensors(const_cast<Model<float>&>(bundle.model), c.tensors);
  c.tensors.push_back({"fingerprint", bundle.fingerprint});
  write_checkpoint(c, path);
}

DenoiserBundle load_denoiser(const std::string& path) {
  auto c = read_checkpoint(path);
  auto meta = parse_metadata(c, "denoiser");
  DenoiserBundle bundle;
  ModelSpec spec;
  try {
    spec = model_spec_from_json(meta.at("spec"));
    bundle.working_size = meta.at("working_size").get<int>();
    bundle.pad = meta.at("pad").get<int>();
    bundle.sigma_lo = meta.at("sigma_lo").get<double>();
    bundle.sigma_hi = meta.at("sigma_hi").get<double>();
    bundle.train_config_hash = meta.at("train_config_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError(std::string("denoiser metadata schema error: ") + e.what());
  }
  size_t used = 0;
  bundle.model = model_from_tensors(spec, c.tensors, used);
  bundle.model.set_train_grads(false);
  for (auto& t : c.tensors)
    if (t.name == "fingerprint") {
      bundle.fingerprint = std::move(t.value);
      ++used;
    }
  if (!bundle.fingerprint.numel()) throw DataError("denoiser checkpoint missing 'fingerprint'");
  if (used != c.tensors.size())
    throw DataError("denoiser checkpoint holds unexpected extra tensors");
  return bundle;
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read file: " + path);
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (is.read(buf, sizeof buf) || is.gcount()) h = fnv1a(buf, (std::size_t)is.gcount(), h);
  return h;
}

void write_matrix_csv(const CrossDetectionMatrix& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write csv: " + path);
  os << std::setprecision(17);
  os << "model_id";
  for (const auto& id : m.model_ids) os << "," << id;
  os << "\n";
  for (size_t i = 0; i < m.model_ids.size(); ++i) {
    os << m.model_ids[i];
    for (double v : m.acc[i]) os << "," << v;
    os << "\n";
  }
}

CrossDetectionMatrix read_matrix_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read csv: " + path);
  CrossDetectionMatrix m;
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty csv: " + path);
  std::istringstream header(line);
  std::string cell;
  std::getline(header, cell, ',');
  while (std::getline(header, cell, ',')) m.model_ids.push_back(cell);
  if (m.model_ids.empty()) throw DataError("csv has no model columns: " + path);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::getline(row, cell, ',');
    const auto row_id = cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError("csv cell '" + cell + "' is not a number: " + path);
      }
    }
    const size_t i = m.acc.size();
    if (i >= m.model_ids.size() || row_id != m.model_ids[i])
      throw DataError("csv row id '" + row_id + "' does not match header order: " + path);
    if (vals.size() != m.model_ids.size())
      throw DataError("csv row '" + row_id + "' has " + std::to_string(vals.size()) +
                      " cells, expected " + std::to_string(m.model_ids.size()));
    m.acc.push_back(std::move(vals));
  }
  if (m.acc.size() != m.model_ids.size())
    throw DataError("csv is not square: " + path);
  return m;
}

void write_heatmap_png(const CrossDetectionMatrix& m, const std::string& path, int cell) {
  const int n = (int)m.model_ids.size();
  if (n == 0) throw DataError("heatmap of empty matrix");
  if (cell < 1) throw ConfigError("heatmap cell size must be positive");
  Tensor<float> img({3, n * cell, n * cell});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const float v = (float)(m.acc[i][j] / 100.0);
      // Dark blue through magenta to warm yellow, clipped to [0,1].
      const float r = std::clamp(1.8f * v - 0.2f, 0.f, 1.f);
      const float g = std::clamp(1.6f * v - 0.6f, 0.f, 1.f);
      const float b = std::clamp(0.9f - 0.7f * v, 0.f, 1.f);
      for (int y = i * cell; y < (i + 1) * cell; ++y)
        for (int x = j * cell; x < (j + 1) * cell; ++x) {
          img.at(0, y, x) = r;
          img.at(1, y, x) = g;
          img.at(2, y, x) = b;
        }
    }
  write_png(path, img);
}

}  // namespace dif
