#pragma once

#include "dif/autodiff.hpp"

#include <map>
#include <sstream>

namespace dif {

enum class Arch { UNet, U1Net, CNet, UpNet, DNet, DnCNN };

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::UNet: return "unet";
    case Arch::U1Net: return "u1net";
    case Arch::CNet: return "cnet";
    case Arch::UpNet: return "upnet";
    case Arch::DNet: return "dnet";
    case Arch::DnCNN: return "dncnn";
  }
  return "?";
}

inline Arch arch_from_name(const std::string& s) {
  if (s == "unet") return Arch::UNet;
  if (s == "u1net") return Arch::U1Net;
  if (s == "cnet") return Arch::CNet;
  if (s == "upnet") return Arch::UpNet;
  if (s == "dnet") return Arch::DNet;
  if (s == "dncnn") return Arch::DnCNN;
  throw ConfigError("unknown architecture '" + s + "'");
}

struct ModelSpec {
  Arch arch = Arch::UNet;
  int in_channels = 16;
  int working_size = 128;
  int hidden_width = 32;  // CNet / UpNet only
  std::uint64_t seed = 0;
};

inline bool is_generator(Arch a) { return a != Arch::DnCNN; }

// Spatial side of the net's input. UpNet and DNet start from a 16x smaller
// grid and upsample back; everything else preserves resolution.
inline int input_size(const ModelSpec& spec) {
  if (spec.arch == Arch::UpNet || spec.arch == Arch::DNet) return spec.working_size / 16;
  return spec.working_size;
}

inline void validate_spec(const ModelSpec& spec) {
  if (spec.working_size < 1) throw ConfigError("model: working size must be positive");
  switch (spec.arch) {
    case Arch::UNet:
    case Arch::U1Net:
    case Arch::UpNet:
    case Arch::DNet:
      if (spec.working_size % 16)
        throw ConfigError("model: working size must be divisible by 16 for " +
                          std::string(arch_name(spec.arch)));
      break;
    case Arch::DnCNN:
      if (spec.in_channels != 3) throw ConfigError("dncnn: in_channels must be 3");
      break;
    case Arch::CNet:
      break;
  }
  if ((spec.arch == Arch::CNet || spec.arch == Arch::UpNet) && spec.hidden_width < 1)
    throw ConfigError("model: hidden width must be positive");
}

enum class LayerKind { Conv2d, ConvTranspose2d, BatchNorm2d, MaxPool2x2, LeakyReLU, ReLU, Tanh };

template <class S>
struct LayerParams {
  LayerKind kind;
  std::string name;
  int kernel = 0, stride = 1, pad = 0;
  NodeRef<S> weight, bias;  // Conv2d / ConvTranspose2d
  NodeRef<S> gamma, beta;   // BatchNorm2d
  Tensor<S> running_mean, running_var;
  S momentum = S(0.1);
  S eps = S(1e-5);
  S slope = S(0.2);
  // Skip wiring: after this layer runs, stash the activation under save_skip
  // and/or concatenate the stashed activation concat_skip onto it.
  int save_skip = -1;
  int concat_skip = -1;
};

template <class S>
struct Model {
  ModelSpec spec;
  std::vector<LayerParams<S>> layers;

  NodeRef<S> forward(const NodeRef<S>& z, bool train) {
    std::map<int, NodeRef<S>> skips;
    NodeRef<S> h = z;
    for (auto& L : layers) {
      switch (L.kind) {
        case LayerKind::Conv2d:
          h = conv2d(h, L.weight, L.bias, L.stride, L.pad);
          break;
        case LayerKind::ConvTranspose2d:
          h = conv_transpose2d_k2s2(h, L.weight, L.bias);
          break;
        case LayerKind::BatchNorm2d:
          h = batchnorm2d(h, L.gamma, L.beta, &L.running_mean, &L.running_var, L.momentum, L.eps,
                          train);
          break;
        case LayerKind::MaxPool2x2:
          h = maxpool2x2(h);
          break;
        case LayerKind::LeakyReLU:
          h = leaky_relu(h, L.slope);
          break;
        case LayerKind::ReLU:
          h = relu(h);
          break;
        case LayerKind::Tanh:
          h = tanh_op(h);
          break;
      }
      if (L.save_skip >= 0) skips[L.save_skip] = h;
      if (L.concat_skip >= 0) h = concat_ch(h, skips.at(L.concat_skip));
    }
    return h;
  }

  std::vector<Param<S>> params() {
    std::vector<Param<S>> out;
    for (auto& L : layers) {
      if (L.weight) out.push_back({L.name + ".w", L.weight});
      if (L.bias) out.push_back({L.name + ".b", L.bias});
      if (L.gamma) out.push_back({L.name + ".gamma", L.gamma});
      if (L.beta) out.push_back({L.name + ".beta", L.beta});
    }
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (const auto& p : params()) n += p.node->value.numel();
    return n;
  }

  void set_train_grads(bool on) {
    for (auto& p : params()) p.node->needs_grad = on;
  }

  std::string summary() {
    std::ostringstream os;
    os << arch_name(spec.arch) << " S=" << spec.working_size << " params=" << param_count()
       << "\n";
    for (const auto& L : layers) {
      os << "  " << L.name;
      if (L.weight) os << " w" << shape_str(L.weight->value.shape);
      if (L.save_skip >= 0) os << " [save " << L.save_skip << "]";
      if (L.concat_skip >= 0) os << " [cat " << L.concat_skip << "]";
      os << "\n";
    }
    return os.str();
  }
};

namespace detail {

template <class S>
struct NetBuilder {
  Model<S>& m;
  Rng rng;

  LayerParams<S>& add(LayerKind kind, std::string name) {
    LayerParams<S> L;
    L.kind = kind;
    L.name = std::move(name);
    m.layers.push_back(std::move(L));
    return m.layers.back();
  }

  // Kaiming-style init: conv weights N(0, sqrt(2/fan_in)), biases zero.
  void conv(const std::string& name, int cin, int cout, int k, int pad, int stride = 1) {
    auto& L = add(LayerKind::Conv2d, name);
    L.kernel = k;
    L.stride = stride;
    L.pad = pad;
    const double std = std::sqrt(2.0 / ((double)cin * k * k));
    L.weight = leaf(random_normal<S>({cout, cin, k, k}, rng, std), true);
    L.bias = leaf(Tensor<S>::zeros({cout}), true);
  }

  void deconv(const std::string& name, int cin, int cout) {
    auto& L = add(LayerKind::ConvTranspose2d, name);
    L.kernel = 2;
    L.stride = 2;
    const double std = std::sqrt(2.0 / (double)cin);
    L.weight = leaf(random_normal<S>({cin, cout, 2, 2}, rng, std), true);
    L.bias = leaf(Tensor<S>::zeros({cout}), true);
  }

  void bn(const std::string& name, int c) {
    auto& L = add(LayerKind::BatchNorm2d, name);
    L.gamma = leaf(Tensor<S>::full({c}, S(1)), true);
    L.beta = leaf(Tensor<S>::zeros({c}), true);
    L.running_mean = Tensor<S>::zeros({c});
    L.running_var = Tensor<S>::full({c}, S(1));
  }

  void lrelu(const std::string& name) { add(LayerKind::LeakyReLU, name); }
  void relu(const std::string& name) { add(LayerKind::ReLU, name); }
  void tanh(const std::string& name) { add(LayerKind::Tanh, name); }
  void pool(const std::string& name) { add(LayerKind::MaxPool2x2, name); }

  void conv_bn_act(const std::string& base, int cin, int cout, int k, int pad) {
    conv(base + ".conv", cin, cout, k, pad);
    bn(base + ".bn", cout);
    lrelu(base + ".act");
  }
};

// Shared by UNet and U1Net; k/pad switch between 3x3 pad 1 and 1x1 pad 0.
template <class S>
Model<S> build_unet_like(const ModelSpec& spec, int k, int pad) {
  Model<S> m{spec, {}};
  detail::NetBuilder<S> b{m, Rng(spec.seed)};
  const int enc_ch[4] = {32, 64, 128, 256};
  int cur = spec.in_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string base = "enc" + std::to_string(i + 1);
    b.conv_bn_act(base + ".a", cur, enc_ch[i], k, pad);
    b.conv_bn_act(base + ".b", enc_ch[i], enc_ch[i], k, pad);
    m.layers.back().save_skip = i;  // pre-pool features feed the decoder
    b.pool(base + ".pool");
    cur = enc_ch[i];
  }
  const int dec_ch[4] = {128, 64, 32, 32};
  for (int j = 0; j < 4; ++j) {
    const std::string base = "dec" + std::to_string(j + 1);
    b.deconv(base + ".up", cur, cur);
    m.layers.back().concat_skip = 3 - j;
    const int skip_ch = enc_ch[3 - j];
    b.conv_bn_act(base + ".a", cur + skip_ch, dec_ch[j], k, pad);
    b.conv_bn_act(base + ".b", dec_ch[j], dec_ch[j], k, pad);
    cur = dec_ch[j];
  }
  b.conv("out.conv", cur, 3, k, pad);
  b.tanh("out.act");
  return m;
}

}  // namespace detail

template <class S>
Model<S> build_unet(const ModelSpec& spec) {
  if (spec.arch != Arch::UNet) throw ConfigError("build_unet: wrong arch tag");
  validate_spec(spec);
  return detail::build_unet_like<S>(spec, 3, 1);
}

template <class S>
Model<S> build_u1net(const ModelSpec& spec) {
  if (spec.arch != Arch::U1Net) throw ConfigError("build_u1net: wrong arch tag");
  validate_spec(spec);
  return detail::build_unet_like<S>(spec, 1, 0);
}

template <class S>
Model<S> build_cnet(const ModelSpec& spec) {
  if (spec.arch != Arch::CNet) throw ConfigError("build_cnet: wrong arch tag");
  validate_spec(spec);
  Model<S> m{spec, {}};
  detail::NetBuilder<S> b{m, Rng(spec.seed)};
  const int w = spec.hidden_width;
  int cur = spec.in_channels;
  for (int i = 0; i < 7; ++i) {
    const std::string base = "conv" + std::to_string(i + 1);
    b.conv(base, cur, w, 3, 1);
    b.lrelu(base + ".act");
    cur = w;
  }
  b.conv("conv8", cur, 3, 3, 1);
  b.tanh("out.act");
  return m;
}

template <class S>
Model<S> build_upnet(const ModelSpec& spec) {
  if (spec.arch != Arch::UpNet) throw ConfigError("build_upnet: wrong arch tag");
  validate_spec(spec);
  Model<S> m{spec, {}};
  detail::NetBuilder<S> b{m, Rng(spec.seed)};
  const int w = spec.hidden_width;
  int cur = spec.in_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string base = "up" + std::to_string(i + 1);
    const bool last = i == 3;
    const int cout = last ? 3 : w;
    b.conv(base + ".proj", cur, cout, 1, 0);
    if (!last) b.lrelu(base + ".proj_act");
    b.deconv(base + ".deconv", cout, cout);
    if (!last)
      b.lrelu(base + ".act");
    else
      b.tanh("out.act");
    cur = cout;
  }
  return m;
}

// Table B decoder on its own, fed Z at working-size/16; no encoder, no skips.
template <class S>
Model<S> build_dnet(const ModelSpec& spec) {
  if (spec.arch != Arch::DNet) throw ConfigError("build_dnet: wrong arch tag");
  validate_spec(spec);
  Model<S> m{spec, {}};
  detail::NetBuilder<S> b{m, Rng(spec.seed)};
  const int dec_ch[4] = {128, 64, 32, 32};
  int cur = spec.in_channels;
  for (int j = 0; j < 4; ++j) {
    const std::string base = "dec" + std::to_string(j + 1);
    b.deconv(base + ".up", cur, cur);
    b.conv_bn_act(base + ".a", cur, dec_ch[j], 3, 1);
    b.conv_bn_act(base + ".b", dec_ch[j], dec_ch[j], 3, 1);
    cur = dec_ch[j];
  }
  b.conv("out.conv", cur, 3, 3, 1);
  b.tanh("out.act");
  return m;
}

// DnCNN-S: depth 17, width 64, predicts the noise; denoised = x - model(x).
template <class S>
Model<S> build_dncnn(const ModelSpec& spec) {
  if (spec.arch != Arch::DnCNN) throw ConfigError("build_dncnn: wrong arch tag");
  validate_spec(spec);
  Model<S> m{spec, {}};
  detail::NetBuilder<S> b{m, Rng(spec.seed)};
  b.conv("conv1", 3, 64, 3, 1);
  b.relu("conv1.act");
  for (int i = 2; i <= 16; ++i) {
    const std::string base = "conv" + std::to_string(i);
    b.conv(base, 64, 64, 3, 1);
    b.bn(base + ".bn", 64);
    b.relu(base + ".act");
  }
  b.conv("conv17", 64, 3, 3, 1);
  return m;
}

template <class S>
Model<S> build_model(const ModelSpec& spec) {
  switch (spec.arch) {
    case Arch::UNet: return build_unet<S>(spec);
    case Arch::U1Net: return build_u1net<S>(spec);
    case Arch::CNet: return build_cnet<S>(spec);
    case Arch::UpNet: return build_upnet<S>(spec);
    case Arch::DNet: return build_dnet<S>(spec);
    case Arch::DnCNN: return build_dncnn<S>(spec);
  }
  throw ConfigError("build_model: bad arch");
}

// Input noise Z ~ U(0,1), 16 channels by convention (spec.in_channels).
template <class S>
Tensor<S> sample_z(const ModelSpec& spec, Rng& rng) {
  const int s = input_size(spec);
  return random_uniform<S>({spec.in_channels, s, s}, rng, 0.0, 1.0);
}

}  // namespace dif
