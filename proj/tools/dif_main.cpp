#include "dif/artifact_lab.hpp"
#include "dif/checkpoint.hpp"
#include "dif/data.hpp"
#include "dif/hash.hpp"
#include "dif/image_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>

namespace fs = std::filesystem;
using namespace dif;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- provenance

struct Provenance {
  std::string command;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::object();

  void input(const std::string& name, const std::string& path) {
    inputs[name] = {{"path", path}, {"hash", hash_hex(file_hash(path))}};
  }
  void output(const std::string& name, const std::string& path) {
    outputs[name] = {{"path", path}, {"hash", hash_hex(file_hash(path))}};
  }
  void write(const std::string& path) const {
    json j{{"command", command}, {"config", config}, {"inputs", inputs}, {"outputs", outputs}};
    std::ofstream os(path);
    if (!os) throw DataError("cannot write provenance: " + path);
    os << j.dump(2) << "\n";
  }
};

// ------------------------------------------------------------------ helpers

ResidualFilter make_filter(const std::string& spec, Provenance& prov) {
  if (spec == "gaussian" || spec.rfind("gaussian:", 0) == 0) {
    double sigma = 3.0;
    if (auto colon = spec.find(':'); colon != std::string::npos) {
      try {
        sigma = std::stod(spec.substr(colon + 1));
      } catch (const std::exception&) {
        throw ConfigError("bad gaussian denoiser spec '" + spec + "'");
      }
    }
    return ResidualFilter::gaussian(sigma);
  }
  auto bundle = std::make_shared<DenoiserBundle>(load_denoiser(spec));
  prov.input("denoiser", spec);
  return ResidualFilter::dncnn(std::move(bundle));
}

std::vector<Tensor<float>> apply_filter(const ResidualFilter& f,
                                        const std::vector<Tensor<float>>& imgs) {
  std::vector<Tensor<float>> out;
  out.reserve(imgs.size());
  for (const auto& img : imgs) out.push_back(f.apply(img));
  return out;
}

struct ExtractFlags {
  std::string method = "dif";
  std::string corr_mode = "per-channel";
  int steps = 2000;
  double lr = 5e-4;
  double margin = 0.01;
  double ema_decay = 0.99;
  int batch = 8;
  std::uint64_t seed = 0;
  bool quiet = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--method", method, "fingerprint method: dif|average|joslin");
    cmd->add_option("--corr-mode", corr_mode, "correlation mode: per-channel|whole-tensor");
    cmd->add_option("--steps", steps, "optimization steps");
    cmd->add_option("--lr", lr, "Adam learning rate");
    cmd->add_option("--margin", margin, "contrastive margin m");
    cmd->add_option("--ema-decay", ema_decay, "fingerprint EMA decay");
    cmd->add_option("--batch", batch, "per-class batch size");
    cmd->add_option("--seed", seed, "random seed");
    cmd->add_flag("--quiet", quiet, "suppress step logging");
  }

  json echo() const {
    return {{"method", method}, {"corr_mode", corr_mode}, {"steps", steps},
            {"lr", lr},         {"margin", margin},       {"ema_decay", ema_decay},
            {"batch", batch},   {"seed", seed}};
  }

  FingerprintRecord build(const std::vector<Tensor<float>>& res_real,
                          const std::vector<Tensor<float>>& res_gen,
                          const std::string& denoiser_id, const std::string& model_id) const {
    const auto fp_method = method_from_name(method);
    const auto mode = corr_mode_from_name(corr_mode);
    if (fp_method == FpMethod::Extracted) {
      ExtractConfig cfg;
      cfg.margin = margin;
      cfg.steps = steps;
      cfg.lr = lr;
      cfg.ema_decay = ema_decay;
      cfg.batch = batch;
      cfg.corr_mode = mode;
      cfg.seed = seed;
      cfg.source_model_id = model_id;
      cfg.log = quiet ? nullptr : &std::cerr;
      return extract_fingerprint(res_real, res_gen, denoiser_id, cfg);
    }
    FingerprintRecord proto;
    proto.margin = margin;
    proto.ema_decay = ema_decay;
    proto.corr_mode = mode;
    proto.method = fp_method;
    proto.denoiser_id = denoiser_id;
    proto.source_model_id = model_id;
    proto.seed = seed;
    return make_reference_record(average_fingerprint(res_gen), res_real, res_gen,
                                 std::move(proto));
  }
};

void check_denoiser_match(const FingerprintRecord& rec, const ResidualFilter& filter) {
  if (!rec.denoiser_id.empty() && rec.denoiser_id != filter.id())
    throw ConfigError("fingerprint was built with denoiser '" + rec.denoiser_id +
                      "' but this run uses '" + filter.id() + "'");
}

json metrics_json(const EvalMetrics& m) {
  return {{"accuracy", m.accuracy},       {"tpr", m.tpr},
          {"tnr", m.tnr},                 {"n_real", m.n_real},
          {"n_gen", m.n_gen},             {"correct_real", m.correct_real},
          {"correct_gen", m.correct_gen}};
}

std::string default_provenance(const std::string& anchor) { return anchor + ".provenance.json"; }

// ------------------------------------------------------------------- oracle

struct OracleOpts {
  std::string pattern = "fixed-random";
  std::string out_dir;
  std::string model_id;
  int count = 128;
  int size = 128;
  double amplitude = 4;    // in 1/255 units
  double noise = 5;        // in 1/255 units
  int period = 8;
  std::uint64_t pattern_seed = 1;
  std::uint64_t mix_seed = 0;
  double mix_t = 0.1;
  bool mix = false;
  std::uint64_t seed = 0;
  std::string provenance;
};

OraclePattern parse_pattern(const OracleOpts& o) {
  OraclePattern p;
  if (o.pattern == "checkerboard")
    p = OraclePattern::checkerboard(o.period, o.amplitude);
  else if (o.pattern == "axis-grid")
    p = OraclePattern::axis_grid(o.period, o.amplitude);
  else if (o.pattern == "fixed-random")
    p = OraclePattern::fixed_random(o.pattern_seed, o.amplitude);
  else
    throw ConfigError("unknown pattern '" + o.pattern + "'");
  if (o.mix) {
    p = OraclePattern::interpolated(p, OraclePattern::fixed_random(o.mix_seed, o.amplitude),
                                    o.mix_t);
    p.amplitude = o.amplitude;
  }
  return p;
}

std::string default_model_id(const OracleOpts& o) {
  std::ostringstream os;
  os << o.pattern;
  if (o.pattern == "fixed-random")
    os << o.pattern_seed;
  else
    os << o.period;
  if (o.mix) os << "+mix" << o.mix_seed << "t" << o.mix_t;
  os << "a" << o.amplitude;
  return os.str();
}

void run_oracle(const OracleOpts& o) {
  if (o.count < 1) throw ConfigError("oracle: count must be positive");
  auto pattern = parse_pattern(o);
  fs::create_directories(o.out_dir);

  auto reals = synthetic_real_images(2 * o.count, o.size, o.seed);
  std::vector<Tensor<float>> carriers(reals.begin() + o.count, reals.end());
  reals.resize(o.count);
  auto gens = synth_inject(carriers, pattern, o.noise / 255.0, Rng(o.seed).derive(1).seed());

  const auto model_id = o.model_id.empty() ? default_model_id(o) : o.model_id;
  DatasetManifest m;
  m.working_size = o.size;
  m.split_seed = o.seed;
  auto save = [&](const Tensor<float>& img, const std::string& stem, Label label) {
    char name[32];
    std::snprintf(name, sizeof name, "%s_%04d.png", stem.c_str(), (int)m.entries.size());
    const auto path = (fs::path(o.out_dir) / name).string();
    write_png(path, img);
    m.entries.push_back({path, label, label == Label::Generated ? model_id : ""});
  };
  for (const auto& img : reals) save(img, "real", Label::Real);
  for (const auto& img : gens) save(img, "gen", Label::Generated);

  const auto manifest_path = (fs::path(o.out_dir) / "manifest.json").string();
  save_manifest(m, manifest_path);

  Provenance prov;
  prov.command = "oracle";
  prov.config = {{"pattern", o.pattern},   {"model_id", model_id},
                 {"count", o.count},       {"size", o.size},
                 {"amplitude", o.amplitude}, {"noise", o.noise},
                 {"period", o.period},     {"pattern_seed", o.pattern_seed},
                 {"mix", o.mix},           {"mix_seed", o.mix_seed},
                 {"mix_t", o.mix_t},       {"seed", o.seed}};
  prov.output("manifest", manifest_path);
  prov.outputs["images"] = {{"count", 2 * o.count}};
  prov.write(o.provenance.empty() ? (fs::path(o.out_dir) / "provenance.json").string()
                                  : o.provenance);
  std::cout << "wrote " << 2 * o.count << " images and manifest to " << o.out_dir << "\n";
}

// ----------------------------------------------------------- train-denoiser

struct TrainDenoiserOpts {
  std::string manifest;
  std::string out;
  int epochs = 2000;
  double lr = 1e-4;
  int crop = 48;
  double sigma_lo = 5.0 / 255, sigma_hi = 15.0 / 255;
  std::uint64_t seed = 0;
  bool quiet = false;
  std::string provenance;
};

void run_train_denoiser(const TrainDenoiserOpts& o) {
  auto manifest = load_manifest(o.manifest);
  auto split = load_and_split(manifest);

  DnCnnTrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.lr = o.lr;
  cfg.crop = o.crop;
  cfg.sigma_lo = o.sigma_lo;
  cfg.sigma_hi = o.sigma_hi;
  cfg.corpus_size = (int)split.train_real.size();
  cfg.seed = o.seed;
  cfg.log = o.quiet ? nullptr : &std::cerr;

  auto bundle = train_dncnn(split.train_real, cfg);
  save_denoiser(bundle, o.out);

  Provenance prov;
  prov.command = "train-denoiser";
  prov.config = {{"epochs", o.epochs},     {"lr", o.lr},
                 {"crop", o.crop},         {"sigma_lo", o.sigma_lo},
                 {"sigma_hi", o.sigma_hi}, {"seed", o.seed},
                 {"train_images", (int)split.train_real.size()}};
  prov.input("manifest", o.manifest);
  prov.output("denoiser", o.out);
  prov.write(o.provenance.empty() ? default_provenance(o.out) : o.provenance);
  std::cout << "trained denoiser " << bundle.train_config_hash << " -> " << o.out << "\n";
}

// ------------------------------------------------------------------ extract

struct ExtractOpts {
  std::string manifest;
  std::string denoiser = "gaussian:3";
  std::string out;
  ExtractFlags flags;
  std::string provenance;
};

void run_extract(const ExtractOpts& o) {
  Provenance prov;
  prov.command = "extract";
  auto manifest = load_manifest(o.manifest);
  auto split = load_and_split(manifest);
  auto filter = make_filter(o.denoiser, prov);

  auto res_real = apply_filter(filter, split.train_real);
  auto res_gen = apply_filter(filter, split.train_gen);
  auto rec = o.flags.build(res_real, res_gen, filter.id(), split.model_id);
  save_fingerprint(rec, o.out);

  prov.config = o.flags.echo();
  prov.config["denoiser"] = o.denoiser;
  prov.input("manifest", o.manifest);
  prov.output("fingerprint", o.out);
  prov.write(o.provenance.empty() ? default_provenance(o.out) : o.provenance);
  std::cout << "extracted fingerprint for '" << rec.source_model_id << "' (mu_real "
            << rec.mu_real << ", mu_gen " << rec.mu_gen << ") -> " << o.out << "\n";
}

// ------------------------------------------------------------------- detect

struct DetectOpts {
  std::string fingerprint;
  std::string denoiser = "gaussian:3";
  std::string manifest;
  std::string image;
  std::string split = "test";
  std::string json_out;
  std::string csv_out;
  std::string provenance;
};

void run_detect(const DetectOpts& o) {
  Provenance prov;
  prov.command = "detect";
  auto rec = load_fingerprint(o.fingerprint);
  prov.input("fingerprint", o.fingerprint);
  auto filter = make_filter(o.denoiser, prov);
  check_denoiser_match(rec, filter);

  prov.config = {{"denoiser", o.denoiser}, {"split", o.split}};

  if (!o.image.empty()) {
    auto img = read_image(o.image);
    if (img.shape[1] < rec.working_size || img.shape[2] < rec.working_size)
      throw DataError("image " + shape_str(img.shape) + " smaller than fingerprint working size " +
                      std::to_string(rec.working_size));
    auto residual = filter.apply(center_crop(img, rec.working_size));
    double rho = 0;
    try {
      rho = record_correlation(rec, residual);
    } catch (const DegenerateInputError&) {
    }
    json line{{"label", label_name(classify(residual, rec))}, {"rho", rho}};
    std::cout << line.dump() << "\n";
    prov.input("image", o.image);
    prov.write(o.provenance.empty() ? "detect.provenance.json" : o.provenance);
    return;
  }

  if (o.manifest.empty()) throw ConfigError("detect needs --manifest or --image");
  auto manifest = load_manifest(o.manifest);
  auto split = load_and_split(manifest);
  auto pick = [&](std::vector<Tensor<float>>& train, std::vector<Tensor<float>>& test) {
    if (o.split == "train") return std::move(train);
    if (o.split == "test") return std::move(test);
    if (o.split != "all") throw ConfigError("detect: --split must be train|test|all");
    auto all = std::move(train);
    for (auto& t : test) all.push_back(std::move(t));
    return all;
  };
  ResidualDataset ds;
  ds.model_id = split.model_id;
  ds.denoiser_id = filter.id();
  ds.real = apply_filter(filter, pick(split.train_real, split.test_real));
  ds.gen = apply_filter(filter, pick(split.train_gen, split.test_gen));

  auto metrics = evaluate(ds, rec);
  json per_image = json::array();
  auto emit = [&](const std::vector<Tensor<float>>& residuals, const char* cls) {
    for (size_t i = 0; i < residuals.size(); ++i) {
      double rho = 0;
      try {
        rho = record_correlation(rec, residuals[i]);
      } catch (const DegenerateInputError&) {
      }
      per_image.push_back({{"index", i},
                           {"class", cls},
                           {"label", label_name(classify(residuals[i], rec))},
                           {"rho", rho}});
    }
  };
  emit(ds.real, "real");
  emit(ds.gen, "generated");

  json report{{"model_id", split.model_id},
              {"split", o.split},
              {"metrics", metrics_json(metrics)},
              {"per_image", per_image}};
  std::cout << report["metrics"].dump(2) << "\n";
  if (!o.json_out.empty()) {
    std::ofstream os(o.json_out);
    if (!os) throw DataError("cannot write " + o.json_out);
    os << report.dump(2) << "\n";
    prov.output("report", o.json_out);
  }
  if (!o.csv_out.empty()) {
    std::ofstream os(o.csv_out);
    if (!os) throw DataError("cannot write " + o.csv_out);
    os << std::setprecision(17) << "index,class,label,rho\n";
    for (const auto& row : per_image)
      os << row["index"].get<size_t>() << "," << row["class"].get<std::string>() << ","
         << row["label"].get<std::string>() << "," << row["rho"].get<double>() << "\n";
    prov.output("csv", o.csv_out);
  }
  prov.input("manifest", o.manifest);
  const auto anchor = !o.json_out.empty() ? o.json_out : "detect";
  prov.write(o.provenance.empty() ? default_provenance(anchor) : o.provenance);
}

// -------------------------------------------------------------- cross-detect

struct CrossDetectOpts {
  std::vector<std::string> fingerprints;
  std::vector<std::string> manifests;
  std::string denoiser = "gaussian:3";
  std::string out_csv;
  std::string heatmap;
  std::string split = "test";
  std::string provenance;
};

void run_cross_detect(const CrossDetectOpts& o) {
  Provenance prov;
  prov.command = "cross-detect";
  auto filter = make_filter(o.denoiser, prov);

  std::vector<FingerprintRecord> records;
  for (size_t i = 0; i < o.fingerprints.size(); ++i) {
    records.push_back(load_fingerprint(o.fingerprints[i]));
    check_denoiser_match(records.back(), filter);
    prov.input("fingerprint_" + std::to_string(i), o.fingerprints[i]);
  }
  std::vector<ResidualDataset> datasets;
  for (size_t i = 0; i < o.manifests.size(); ++i) {
    auto split = load_and_split(load_manifest(o.manifests[i]));
    ResidualDataset ds;
    ds.model_id = split.model_id;
    ds.denoiser_id = filter.id();
    const bool test = o.split != "train";
    ds.real = apply_filter(filter, test ? split.test_real : split.train_real);
    ds.gen = apply_filter(filter, test ? split.test_gen : split.train_gen);
    datasets.push_back(std::move(ds));
    prov.input("manifest_" + std::to_string(i), o.manifests[i]);
  }

  auto matrix = cross_detect(records, datasets);
  write_matrix_csv(matrix, o.out_csv);
  prov.output("matrix", o.out_csv);
  if (!o.heatmap.empty()) {
    write_heatmap_png(matrix, o.heatmap);
    prov.output("heatmap", o.heatmap);
  }
  prov.config = {{"denoiser", o.denoiser}, {"split", o.split}};
  prov.write(o.provenance.empty() ? default_provenance(o.out_csv) : o.provenance);

  for (size_t i = 0; i < matrix.model_ids.size(); ++i) {
    std::cout << matrix.model_ids[i] << ":";
    for (double v : matrix.acc[i]) std::cout << " " << v;
    std::cout << "\n";
  }
}

// ------------------------------------------------------------------ lineage

struct LineageOpts {
  std::string matrix;
  double t_high = 80, t_sym = 10;
  std::string out;
  std::string provenance;
};

void run_lineage(const LineageOpts& o) {
  auto matrix = read_matrix_csv(o.matrix);
  auto lin = lineage_clusters(matrix, o.t_high, o.t_sym);

  std::vector<std::string> isolated;
  {
    std::vector<bool> in_cluster(matrix.model_ids.size(), false);
    for (const auto& c : lin.clusters)
      for (int idx : c) in_cluster[idx] = true;
    for (size_t i = 0; i < matrix.model_ids.size(); ++i)
      if (!in_cluster[i]) isolated.push_back(matrix.model_ids[i]);
  }
  json cluster_names = json::array();
  for (const auto& c : lin.clusters) {
    json names = json::array();
    for (int idx : c) names.push_back(matrix.model_ids[idx]);
    cluster_names.push_back(names);
  }
  json related = json::array();
  for (const auto& p : lin.related)
    related.push_back({{"a", matrix.model_ids[p.i]},
                       {"b", matrix.model_ids[p.j]},
                       {"min_acc", p.min_acc},
                       {"asymmetry", p.asymmetry}});
  json report{{"model_ids", matrix.model_ids},
              {"t_high", o.t_high},
              {"t_sym", o.t_sym},
              {"clusters", cluster_names},
              {"related", related},
              {"isolated", isolated}};
  std::cout << report.dump(2) << "\n";

  Provenance prov;
  prov.command = "lineage";
  prov.config = {{"t_high", o.t_high}, {"t_sym", o.t_sym}};
  prov.input("matrix", o.matrix);
  if (!o.out.empty()) {
    std::ofstream os(o.out);
    if (!os) throw DataError("cannot write " + o.out);
    os << report.dump(2) << "\n";
    prov.output("report", o.out);
  }
  const auto anchor = !o.out.empty() ? o.out : "lineage";
  prov.write(o.provenance.empty() ? default_provenance(anchor) : o.provenance);
}

// ------------------------------------------------------------ monochrome-lab

struct MonoOpts {
  std::string arch = "unet";
  int size = 128;
  int steps = 2000;
  double gray = 0.5;
  int period = 16;
  int width = 32;
  std::uint64_t seed = 0;
  std::string out_dir = "monochrome";
  bool quiet = false;
  std::string provenance;
};

void run_monochrome(const MonoOpts& o) {
  ModelSpec spec{arch_from_name(o.arch), 16, o.size, o.width, 0};
  auto run = reconstruct_monochrome(spec, o.gray, o.steps, o.seed,
                                    o.quiet ? nullptr : &std::cerr);

  auto spectrum = spectrum_logmag(run.artifact, o.arch);
  const double harmonic = harmonic_peak_score(spectrum, o.period);
  const double cross = cross_line_score(spectrum);

  fs::create_directories(o.out_dir);
  const auto artifact_path = (fs::path(o.out_dir) / "artifact.png").string();
  const auto spectrum_path = (fs::path(o.out_dir) / "spectrum.png").string();
  const auto scores_path = (fs::path(o.out_dir) / "scores.json").string();

  Tensor<float> vis = run.artifact;
  const float peak = vis.data.abs().maxCoeff();
  if (peak > 0) vis.data = 0.5f + vis.data / (2 * peak);
  write_png(artifact_path, vis);

  auto mean_map = spectrum.mean_map();
  const double lo = mean_map.minCoeff(), hi = mean_map.maxCoeff();
  Tensor<float> spec_img({3, (int)mean_map.rows(), (int)mean_map.cols()});
  for (int i = 0; i < mean_map.rows(); ++i)
    for (int j = 0; j < mean_map.cols(); ++j) {
      const float v = hi > lo ? (float)((mean_map(i, j) - lo) / (hi - lo)) : 0.f;
      for (int c = 0; c < 3; ++c) spec_img.at(c, i, j) = v;
    }
  write_png(spectrum_path, spec_img);

  json scores{{"arch", o.arch},
              {"size", o.size},
              {"steps", o.steps},
              {"gray", o.gray},
              {"period", o.period},
              {"seed", o.seed},
              {"final_mse", run.final_mse},
              {"harmonic_peak_score", harmonic},
              {"cross_line_score", cross}};
  std::ofstream(scores_path) << scores.dump(2) << "\n";
  std::cout << scores.dump(2) << "\n";

  Provenance prov;
  prov.command = "monochrome-lab";
  prov.config = {{"arch", o.arch}, {"size", o.size},     {"steps", o.steps}, {"gray", o.gray},
                 {"period", o.period}, {"width", o.width}, {"seed", o.seed}};
  prov.output("artifact", artifact_path);
  prov.output("spectrum", spectrum_path);
  prov.output("scores", scores_path);
  prov.write(o.provenance.empty() ? (fs::path(o.out_dir) / "provenance.json").string()
                                  : o.provenance);
}

// ------------------------------------------------------------------ perturb

struct PerturbOpts {
  std::string in_dir;
  std::string out_dir;
  std::string kind = "jpeg";
  int quality = 75;
  double sigma = 3.0;
  std::uint64_t seed = 0;
  std::string provenance;
};

bool image_file(const fs::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = (char)std::tolower((unsigned char)c);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".ppm";
}

void run_perturb(const PerturbOpts& o) {
  if (!fs::is_directory(o.in_dir)) throw DataError("perturb: not a directory: " + o.in_dir);
  auto spec = perturbation_from_name(o.kind, o.quality, o.sigma, o.seed);
  fs::create_directories(o.out_dir);

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(o.in_dir))
    if (e.is_regular_file() && image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("perturb: no images in " + o.in_dir);

  std::map<std::string, std::string> renamed;
  std::uint64_t hashes = kFnvOffset;
  for (size_t k = 0; k < files.size(); ++k) {
    auto img = read_image(files[k].string());
    auto out = perturb(img, spec, k);
    const auto out_path = (fs::path(o.out_dir) / (files[k].stem().string() + ".png")).string();
    write_png(out_path, out);
    renamed[files[k].filename().string()] = out_path;
    hashes = fnv1a_u64(file_hash(out_path), hashes);
  }

  const auto in_manifest = fs::path(o.in_dir) / "manifest.json";
  std::string out_manifest;
  if (fs::exists(in_manifest)) {
    auto m = load_manifest(in_manifest.string());
    for (auto& e : m.entries) {
      auto it = renamed.find(fs::path(e.path).filename().string());
      if (it != renamed.end()) e.path = it->second;
    }
    out_manifest = (fs::path(o.out_dir) / "manifest.json").string();
    save_manifest(m, out_manifest);
  }

  Provenance prov;
  prov.command = "perturb";
  prov.config = {{"kind", perturbation_name(spec)}, {"quality", o.quality},
                 {"sigma", o.sigma},                {"seed", o.seed},
                 {"files", (int)files.size()}};
  prov.outputs["images"] = {{"count", (int)files.size()}, {"hash", hash_hex(hashes)}};
  if (!out_manifest.empty()) prov.output("manifest", out_manifest);
  prov.write(o.provenance.empty() ? (fs::path(o.out_dir) / "provenance.json").string()
                                  : o.provenance);
  std::cout << "perturbed " << files.size() << " images (" << perturbation_name(spec) << ") -> "
            << o.out_dir << "\n";
}

// ----------------------------------------------------------- sweep-train-size

struct SweepOpts {
  std::string manifest;
  std::string denoiser = "gaussian:3";
  std::vector<int> sizes;
  std::string out;
  ExtractFlags flags;
  std::string provenance;
};

void run_sweep(const SweepOpts& o) {
  if (o.sizes.empty()) throw ConfigError("sweep-train-size: need --sizes");
  Provenance prov;
  prov.command = "sweep-train-size";
  auto split = load_and_split(load_manifest(o.manifest));
  auto filter = make_filter(o.denoiser, prov);

  auto train_real = apply_filter(filter, split.train_real);
  auto train_gen = apply_filter(filter, split.train_gen);
  ResidualDataset test;
  test.model_id = split.model_id;
  test.denoiser_id = filter.id();
  test.real = apply_filter(filter, split.test_real);
  test.gen = apply_filter(filter, split.test_gen);

  std::ofstream os(o.out);
  if (!os) throw DataError("cannot write " + o.out);
  os << std::setprecision(17) << "n_train,accuracy,tpr,tnr\n";
  for (int n : o.sizes) {
    if (n < 1 || n > (int)train_real.size() || n > (int)train_gen.size())
      throw ConfigError("sweep-train-size: size " + std::to_string(n) + " exceeds train split (" +
                        std::to_string(train_real.size()) + " per class)");
    std::vector<Tensor<float>> rr(train_real.begin(), train_real.begin() + n);
    std::vector<Tensor<float>> rg(train_gen.begin(), train_gen.begin() + n);
    auto rec = o.flags.build(rr, rg, filter.id(), split.model_id);
    auto m = evaluate(test, rec);
    os << n << "," << m.accuracy << "," << m.tpr << "," << m.tnr << "\n";
    std::cout << "n=" << n << " accuracy " << m.accuracy << "\n";
  }
  os.close();

  prov.config = o.flags.echo();
  prov.config["denoiser"] = o.denoiser;
  prov.config["sizes"] = o.sizes;
  prov.input("manifest", o.manifest);
  prov.output("csv", o.out);
  prov.write(o.provenance.empty() ? default_provenance(o.out) : o.provenance);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"convolutional fingerprint extraction and detection for image generators"};
  app.require_subcommand(1);

  auto oracle = std::make_shared<OracleOpts>();
  {
    auto* cmd = app.add_subcommand("oracle", "synthesize a labeled corpus with an injected pattern");
    cmd->add_option("--pattern", oracle->pattern, "checkerboard|axis-grid|fixed-random");
    cmd->add_option("--out", oracle->out_dir, "output directory")->required();
    cmd->add_option("--model-id", oracle->model_id, "generator id recorded in the manifest");
    cmd->add_option("--count", oracle->count, "images per class");
    cmd->add_option("--size", oracle->size, "image side length");
    cmd->add_option("--amplitude", oracle->amplitude, "pattern amplitude in 1/255 units");
    cmd->add_option("--noise", oracle->noise, "noise sigma in 1/255 units");
    cmd->add_option("--period", oracle->period, "checkerboard/grid period");
    cmd->add_option("--pattern-seed", oracle->pattern_seed, "fixed-random pattern seed");
    cmd->add_option("--mix-seed", oracle->mix_seed, "blend with fixed-random(mix-seed)");
    cmd->add_option("--mix-t", oracle->mix_t, "blend weight toward mix-seed pattern");
    cmd->add_flag("--mix", oracle->mix, "enable pattern blending");
    cmd->add_option("--seed", oracle->seed, "corpus seed");
    cmd->add_option("--provenance", oracle->provenance, "provenance path override");
    cmd->callback([oracle] { run_oracle(*oracle); });
  }

  auto train = std::make_shared<TrainDenoiserOpts>();
  {
    auto* cmd = app.add_subcommand("train-denoiser", "train the residual denoiser on real images");
    cmd->add_option("--manifest", train->manifest, "dataset manifest")->required();
    cmd->add_option("--out", train->out, "denoiser checkpoint path")->required();
    cmd->add_option("--epochs", train->epochs, "training epochs");
    cmd->add_option("--lr", train->lr, "Adam learning rate");
    cmd->add_option("--crop", train->crop, "training crop size");
    cmd->add_option("--sigma-lo", train->sigma_lo, "noise sigma lower bound");
    cmd->add_option("--sigma-hi", train->sigma_hi, "noise sigma upper bound");
    cmd->add_option("--seed", train->seed, "training seed");
    cmd->add_flag("--quiet", train->quiet, "suppress epoch logging");
    cmd->add_option("--provenance", train->provenance, "provenance path override");
    cmd->callback([train] { run_train_denoiser(*train); });
  }

  auto extract = std::make_shared<ExtractOpts>();
  {
    auto* cmd = app.add_subcommand("extract", "optimize a fingerprint from a labeled corpus");
    cmd->add_option("--manifest", extract->manifest, "dataset manifest")->required();
    cmd->add_option("--denoiser", extract->denoiser,
                    "denoiser checkpoint, or gaussian[:sigma] for the high-pass baseline");
    cmd->add_option("--out", extract->out, "fingerprint checkpoint path")->required();
    extract->flags.attach(cmd);
    cmd->add_option("--provenance", extract->provenance, "provenance path override");
    cmd->callback([extract] { run_extract(*extract); });
  }

  auto detect = std::make_shared<DetectOpts>();
  {
    auto* cmd = app.add_subcommand("detect", "classify images against a fingerprint");
    cmd->add_option("--fingerprint", detect->fingerprint, "fingerprint checkpoint")->required();
    cmd->add_option("--denoiser", detect->denoiser, "denoiser checkpoint or gaussian[:sigma]");
    cmd->add_option("--manifest", detect->manifest, "dataset manifest to evaluate");
    cmd->add_option("--image", detect->image, "single image to classify");
    cmd->add_option("--split", detect->split, "manifest split: test|train|all");
    cmd->add_option("--json", detect->json_out, "write full report JSON here");
    cmd->add_option("--csv", detect->csv_out, "write per-image CSV here");
    cmd->add_option("--provenance", detect->provenance, "provenance path override");
    cmd->callback([detect] { run_detect(*detect); });
  }

  auto cross = std::make_shared<CrossDetectOpts>();
  {
    auto* cmd = app.add_subcommand("cross-detect", "fingerprints x datasets accuracy matrix");
    cmd->add_option("--fingerprints", cross->fingerprints, "fingerprint checkpoints, in order")
        ->required()
        ->expected(-1);
    cmd->add_option("--manifests", cross->manifests, "dataset manifests, same order")
        ->required()
        ->expected(-1);
    cmd->add_option("--denoiser", cross->denoiser, "denoiser checkpoint or gaussian[:sigma]");
    cmd->add_option("--out-csv", cross->out_csv, "matrix CSV path")->required();
    cmd->add_option("--heatmap", cross->heatmap, "optional heatmap PNG path");
    cmd->add_option("--split", cross->split, "manifest split: test|train");
    cmd->add_option("--provenance", cross->provenance, "provenance path override");
    cmd->callback([cross] { run_cross_detect(*cross); });
  }

  auto lineage = std::make_shared<LineageOpts>();
  {
    auto* cmd = app.add_subcommand("lineage", "cluster generators from a cross-detection matrix");
    cmd->add_option("--matrix", lineage->matrix, "cross-detection CSV")->required();
    cmd->add_option("--t-high", lineage->t_high, "relatedness accuracy threshold");
    cmd->add_option("--t-sym", lineage->t_sym, "max asymmetry in points");
    cmd->add_option("--out", lineage->out, "cluster report JSON path");
    cmd->add_option("--provenance", lineage->provenance, "provenance path override");
    cmd->callback([lineage] { run_lineage(*lineage); });
  }

  auto mono = std::make_shared<MonoOpts>();
  {
    auto* cmd = app.add_subcommand("monochrome-lab", "architecture artifact study on a flat target");
    cmd->add_option("--arch", mono->arch, "unet|u1net|cnet|upnet|dnet");
    cmd->add_option("--size", mono->size, "output side length");
    cmd->add_option("--steps", mono->steps, "optimization steps");
    cmd->add_option("--gray", mono->gray, "target gray level");
    cmd->add_option("--period", mono->period, "harmonic score lattice period");
    cmd->add_option("--width", mono->width, "hidden width for cnet/upnet");
    cmd->add_option("--seed", mono->seed, "run seed");
    cmd->add_option("--out-dir", mono->out_dir, "output directory");
    cmd->add_flag("--quiet", mono->quiet, "suppress step logging");
    cmd->add_option("--provenance", mono->provenance, "provenance path override");
    cmd->callback([mono] { run_monochrome(*mono); });
  }

  auto pert = std::make_shared<PerturbOpts>();
  {
    auto* cmd = app.add_subcommand("perturb", "apply a perturbation to every image in a directory");
    cmd->add_option("--in-dir", pert->in_dir, "input directory")->required();
    cmd->add_option("--out-dir", pert->out_dir, "output directory")->required();
    cmd->add_option("--kind", pert->kind, "none|jpeg|resize-half|blur|mixed");
    cmd->add_option("--quality", pert->quality, "JPEG quality");
    cmd->add_option("--sigma", pert->sigma, "blur sigma");
    cmd->add_option("--seed", pert->seed, "mixed-kind seed");
    cmd->add_option("--provenance", pert->provenance, "provenance path override");
    cmd->callback([pert] { run_perturb(*pert); });
  }

  auto sweep = std::make_shared<SweepOpts>();
  {
    auto* cmd = app.add_subcommand("sweep-train-size", "accuracy as a function of train set size");
    cmd->add_option("--manifest", sweep->manifest, "dataset manifest")->required();
    cmd->add_option("--denoiser", sweep->denoiser, "denoiser checkpoint or gaussian[:sigma]");
    cmd->add_option("--sizes", sweep->sizes, "per-class train sizes to sweep")
        ->required()
        ->delimiter(',');
    cmd->add_option("--out", sweep->out, "output CSV path")->required();
    sweep->flags.attach(cmd);
    cmd->add_option("--provenance", sweep->provenance, "provenance path override");
    cmd->callback([sweep] { run_sweep(*sweep); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
