#pragma once

#include "dif/denoiser.hpp"
#include "dif/detector.hpp"
#include "dif/fingerprint.hpp"

#include <string>
#include <vector>

namespace dif {

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

// Binary container: "DIF1", u32 version, u64-length JSON metadata, then a
// tensor directory of named little-endian float32 arrays.
struct CheckpointContainer {
  static constexpr int kVersion = 1;
  int version = kVersion;
  std::string metadata_json;
  std::vector<NamedTensor> tensors;
};

void write_checkpoint(const CheckpointContainer& c, const std::string& path);
CheckpointContainer read_checkpoint(const std::string& path);
std::uint64_t checkpoint_hash(const CheckpointContainer& c);

void save_fingerprint(const FingerprintRecord& rec, const std::string& path);
FingerprintRecord load_fingerprint(const std::string& path);

void save_denoiser(const DenoiserBundle& bundle, const std::string& path);
DenoiserBundle load_denoiser(const std::string& path);

std::uint64_t file_hash(const std::string& path);

void write_matrix_csv(const CrossDetectionMatrix& m, const std::string& path);
CrossDetectionMatrix read_matrix_csv(const std::string& path);
void write_heatmap_png(const CrossDetectionMatrix& m, const std::string& path, int cell = 32);

}  // namespace dif
