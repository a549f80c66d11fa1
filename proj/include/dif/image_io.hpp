#pragma once

#include "dif/tensor.hpp"

#include <string>
#include <vector>

namespace dif {

// Images are 3xHxW float in [0,1] everywhere in the pipeline. Readers accept
// PNG, JPEG and binary PPM and promote grayscale to three channels; writers
// clamp, scale to 8 bit and round.
Tensor<float> read_image(const std::string& path);
void write_png(const std::string& path, const Tensor<float>& img);
void write_jpeg(const std::string& path, const Tensor<float>& img, int quality);

std::vector<unsigned char> encode_jpeg(const Tensor<float>& img, int quality);
Tensor<float> decode_jpeg(const unsigned char* data, std::size_t len);

// Quality estimate by nearest IJG luminance quantization table; 1..100.
int estimate_jpeg_quality(const std::string& path);

std::vector<unsigned char> to_bytes_rgb8(const Tensor<float>& img);
Tensor<float> from_bytes_rgb8(const unsigned char* rgb, int h, int w);

}  // namespace dif
