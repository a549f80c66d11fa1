#pragma once

#include "dif/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dif {

// Tape-free reverse mode: each op returns a Node holding its value, links to
// its parents and a closure that scatters the node's grad into them. backward()
// runs the closures in reverse topological order. Graphs are rebuilt every
// step; parameters are long-lived leaves whose grads accumulate across the
// whole graph and are cleared by the optimizer loop.
template <class S>
class Node {
 public:
  Tensor<S> value;
  Tensor<S> grad;
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor<S>::zeros(value.shape);
  }
};

template <class S>
using NodeRef = std::shared_ptr<Node<S>>;

template <class S>
struct Param {
  std::string name;
  NodeRef<S> node;
};

template <class S>
void zero_grads(std::vector<Param<S>>& params) {
  for (auto& p : params)
    if (p.node->grad.numel()) p.node->grad.data.setZero();
}

template <class S>
NodeRef<S> leaf(Tensor<S> v, bool needs_grad = false) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(v);
  n->needs_grad = needs_grad;
  return n;
}

template <class S>
NodeRef<S> constant(Tensor<S> v) {
  return leaf(std::move(v), false);
}

namespace detail {

template <class S>
bool any_needs(const std::vector<NodeRef<S>>& ps) {
  for (const auto& p : ps)
    if (p->needs_grad) return true;
  return false;
}

template <class S>
NodeRef<S> make_op(Tensor<S> value, std::vector<NodeRef<S>> parents,
                   std::function<void(Node<S>&)> backprop) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  if (any_needs(parents)) {
    n->needs_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

}  // namespace detail

template <class S>
void backward(const NodeRef<S>& root) {
  if (root->value.numel() != 1)
    throw DimensionError("backward expects a scalar root, got " + shape_str(root->value.shape));

  // Post-order DFS, then replay reversed.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.data[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (!n->backprop) continue;
    if (n->grad.numel() != n->value.numel()) continue;  // nothing flowed here
    n->backprop(*n);
  }
}

// ---- conv kernels (im2col + GEMM) ----

namespace detail {

template <class S>
using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using MapCM = Eigen::Map<MatCM<S>>;
template <class S>
using CMapCM = Eigen::Map<const MatCM<S>>;
template <class S>
using MapRM =
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using CMapRM =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// im2col scratch runs to tens of MB per conv and is rebuilt every step.
// Recycling exact-size buffers through a freelist keeps those pages warm
// instead of faulting fresh zeroed memory from the kernel on each call. The
// freelist itself is leaked at thread exit so buffers released by late-dying
// graphs still have a home.
template <class S>
std::shared_ptr<S> scratch_buffer(std::int64_t n) {
  using List = std::vector<std::pair<std::int64_t, S*>>;
  static thread_local List* pool = new List;
  S* p = nullptr;
  for (std::size_t i = 0; i < pool->size(); ++i)
    if ((*pool)[i].first == n) {
      p = (*pool)[i].second;
      (*pool)[i] = pool->back();
      pool->pop_back();
      break;
    }
  if (!p) p = static_cast<S*>(::operator new(sizeof(S) * (std::size_t)n, std::align_val_t(64)));
  List* home = pool;
  return std::shared_ptr<S>(p, [home, n](S* q) { home->emplace_back(n, q); });
}

// 3x3 stride-1 specialization: every conv in the model zoo hits this path, and
// interior pixels skip the bounds checks entirely.
template <class S>
void im2col_k3s1(const S* x, int C, int H, int W, int pad, int Ho, int Wo, S* out) {
  const std::int64_t plane = (std::int64_t)H * W;
  for (int oi = 0; oi < Ho; ++oi) {
    const int i0 = oi - pad;
    const bool row_in = i0 >= 0 && i0 + 2 < H;
    for (int oj = 0; oj < Wo; ++oj) {
      const int j0 = oj - pad;
      if (row_in && j0 >= 0 && j0 + 2 < W) {
        const S* base = x + (std::int64_t)i0 * W + j0;
        for (int c = 0; c < C; ++c, out += 9) {
          const S* p = base + c * plane;
          out[0] = p[0];
          out[1] = p[1];
          out[2] = p[2];
          p += W;
          out[3] = p[0];
          out[4] = p[1];
          out[5] = p[2];
          p += W;
          out[6] = p[0];
          out[7] = p[1];
          out[8] = p[2];
        }
      } else {
        for (int c = 0; c < C; ++c) {
          const S* xc = x + c * plane;
          for (int ki = 0; ki < 3; ++ki) {
            const int ii = i0 + ki;
            if (ii < 0 || ii >= H) {
              out[0] = out[1] = out[2] = S(0);
              out += 3;
              continue;
            }
            const S* row = xc + (std::int64_t)ii * W;
            for (int kj = 0; kj < 3; ++kj) {
              const int jj = j0 + kj;
              *out++ = (jj >= 0 && jj < W) ? row[jj] : S(0);
            }
          }
        }
      }
    }
  }
}

template <class S>
void im2col(const Tensor<S>& x, int k, int stride, int pad, int Ho, int Wo, S* out) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  if (k == 3 && stride == 1) {
    im2col_k3s1(x.ptr(), C, H, W, pad, Ho, Wo, out);
    return;
  }
  for (int oi = 0; oi < Ho; ++oi) {
    for (int oj = 0; oj < Wo; ++oj) {
      for (int c = 0; c < C; ++c) {
        const S* xc = x.ptr() + (std::int64_t)c * H * W;
        for (int ki = 0; ki < k; ++ki) {
          const int ii = oi * stride - pad + ki;
          const int jj0 = oj * stride - pad;
          if (ii < 0 || ii >= H) {
            for (int kj = 0; kj < k; ++kj) *out++ = S(0);
            continue;
          }
          const S* row = xc + (std::int64_t)ii * W;
          for (int kj = 0; kj < k; ++kj) {
            const int jj = jj0 + kj;
            *out++ = (jj >= 0 && jj < W) ? row[jj] : S(0);
          }
        }
      }
    }
  }
}

template <class S>
void col2im_add_k3s1(const S* src, int C, int H, int W, int pad, int Ho, int Wo, S* dx) {
  const std::int64_t plane = (std::int64_t)H * W;
  for (int oi = 0; oi < Ho; ++oi) {
    const int i0 = oi - pad;
    const bool row_in = i0 >= 0 && i0 + 2 < H;
    for (int oj = 0; oj < Wo; ++oj) {
      const int j0 = oj - pad;
      if (row_in && j0 >= 0 && j0 + 2 < W) {
        S* base = dx + (std::int64_t)i0 * W + j0;
        for (int c = 0; c < C; ++c, src += 9) {
          S* p = base + c * plane;
          p[0] += src[0];
          p[1] += src[1];
          p[2] += src[2];
          p += W;
          p[0] += src[3];
          p[1] += src[4];
          p[2] += src[5];
          p += W;
          p[0] += src[6];
          p[1] += src[7];
          p[2] += src[8];
        }
      } else {
        for (int c = 0; c < C; ++c) {
          S* xc = dx + c * plane;
          for (int ki = 0; ki < 3; ++ki) {
            const int ii = i0 + ki;
            if (ii < 0 || ii >= H) {
              src += 3;
              continue;
            }
            S* row = xc + (std::int64_t)ii * W;
            for (int kj = 0; kj < 3; ++kj) {
              const int jj = j0 + kj;
              if (jj >= 0 && jj < W) row[jj] += *src;
              ++src;
            }
          }
        }
      }
    }
  }
}

// Stride-1 scatter over a row-major (K,N) gradient: row r of dcol holds tap
// (c,ki,kj) for every output pixel, so each accumulation is a contiguous
// vector add into one input row.
template <class S>
void col2im_add_rows(const S* dcol, int C, int H, int W, int k, int pad, int Ho, int Wo,
                     S* dx) {
  const S* src = dcol;
  const std::int64_t N = (std::int64_t)Ho * Wo;
  for (int c = 0; c < C; ++c) {
    S* xc = dx + (std::int64_t)c * H * W;
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj, src += N) {
        const int dj = kj - pad;
        const int oj0 = std::max(0, -dj), oj1 = std::min(Wo, W - dj);
        if (oj1 <= oj0) continue;
        const int len = oj1 - oj0;
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi + ki - pad;
          if (ii < 0 || ii >= H) continue;
          const S* s = src + (std::int64_t)oi * Wo + oj0;
          S* d = xc + (std::int64_t)ii * W + oj0 + dj;
          for (int j = 0; j < len; ++j) d[j] += s[j];
        }
      }
  }
}

template <class S>
void col2im_add(const S* dcol, int C, int H, int W, int k, int stride, int pad, int Ho,
                int Wo, S* dx) {
  if (k == 3 && stride == 1) {
    col2im_add_k3s1(dcol, C, H, W, pad, Ho, Wo, dx);
    return;
  }
  const S* src = dcol;
  for (int oi = 0; oi < Ho; ++oi) {
    for (int oj = 0; oj < Wo; ++oj) {
      for (int c = 0; c < C; ++c) {
        S* xc = dx + (std::int64_t)c * H * W;
        for (int ki = 0; ki < k; ++ki) {
          const int ii = oi * stride - pad + ki;
          const int jj0 = oj * stride - pad;
          if (ii < 0 || ii >= H) {
            src += k;
            continue;
          }
          S* row = xc + (std::int64_t)ii * W;
          for (int kj = 0; kj < k; ++kj) {
            const int jj = jj0 + kj;
            if (jj >= 0 && jj < W) row[jj] += *src;
            ++src;
          }
        }
      }
    }
  }
}

// ---- Winograd F(2x2,3x3) for stride-1 pad-1 3x3 convs on even spatial dims,
// the shape every hidden conv in the model zoo uses. Y = A^T[(G g G^T) .*
// (B^T d B)]A summed over input channels, realized as 16 per-frequency GEMMs
// over 2x2-strided 4x4 input tiles: 2.25x fewer GEMM flops than im2col.
// Every transform is exact linear algebra, so backward runs the transposed
// transforms and gradients stay analytically identical to the direct path. ----

template <class S>
inline void wino_input_tile(const S d[16], S v[16]) {
  S t[16];
  for (int j = 0; j < 4; ++j) {
    t[j] = d[j] - d[8 + j];
    t[4 + j] = d[4 + j] + d[8 + j];
    t[8 + j] = d[8 + j] - d[4 + j];
    t[12 + j] = d[4 + j] - d[12 + j];
  }
  for (int i = 0; i < 4; ++i) {
    const S a = t[4 * i], b = t[4 * i + 1], c = t[4 * i + 2], e = t[4 * i + 3];
    v[4 * i] = a - c;
    v[4 * i + 1] = b + c;
    v[4 * i + 2] = c - b;
    v[4 * i + 3] = b - e;
  }
}

template <class S>
inline void wino_weight_tile(const S g[9], S u[16]) {
  S t[12];
  for (int j = 0; j < 3; ++j) {
    const S g0 = g[j], g1 = g[3 + j], g2 = g[6 + j];
    t[j] = g0;
    t[3 + j] = S(0.5) * (g0 + g1 + g2);
    t[6 + j] = S(0.5) * (g0 - g1 + g2);
    t[9 + j] = g2;
  }
  for (int i = 0; i < 4; ++i) {
    const S a = t[3 * i], b = t[3 * i + 1], c = t[3 * i + 2];
    u[4 * i] = a;
    u[4 * i + 1] = S(0.5) * (a + b + c);
    u[4 * i + 2] = S(0.5) * (a - b + c);
    u[4 * i + 3] = c;
  }
}

template <class S>
inline void wino_output_tile(const S m[16], S y[4]) {
  S t[8];
  for (int j = 0; j < 4; ++j) {
    t[j] = m[j] + m[4 + j] + m[8 + j];
    t[4 + j] = m[4 + j] - m[8 + j] - m[12 + j];
  }
  y[0] = t[0] + t[1] + t[2];
  y[1] = t[1] - t[2] - t[3];
  y[2] = t[4] + t[5] + t[6];
  y[3] = t[5] - t[6] - t[7];
}

// Adjoint of the output transform: dM = A dY A^T.
template <class S>
inline void wino_dy_tile(const S dy[4], S dm[16]) {
  S t[8];
  for (int j = 0; j < 2; ++j) {
    const S a = dy[j], b = dy[2 + j];
    t[j] = a;
    t[2 + j] = a + b;
    t[4 + j] = a - b;
    t[6 + j] = -b;
  }
  for (int i = 0; i < 4; ++i) {
    const S a = t[2 * i], b = t[2 * i + 1];
    dm[4 * i] = a;
    dm[4 * i + 1] = a + b;
    dm[4 * i + 2] = a - b;
    dm[4 * i + 3] = -b;
  }
}

// Adjoint of the input transform: dd = B dV B^T.
template <class S>
inline void wino_dx_tile(const S dv[16], S dd[16]) {
  S t[16];
  for (int j = 0; j < 4; ++j) {
    const S v0 = dv[j], v1 = dv[4 + j], v2 = dv[8 + j], v3 = dv[12 + j];
    t[j] = v0;
    t[4 + j] = v1 - v2 + v3;
    t[8 + j] = -v0 + v1 + v2;
    t[12 + j] = -v3;
  }
  for (int i = 0; i < 4; ++i) {
    const S v0 = t[4 * i], v1 = t[4 * i + 1], v2 = t[4 * i + 2], v3 = t[4 * i + 3];
    dd[4 * i] = v0;
    dd[4 * i + 1] = v1 - v2 + v3;
    dd[4 * i + 2] = -v0 + v1 + v2;
    dd[4 * i + 3] = -v3;
  }
}

// Adjoint of the weight transform: dg = G^T dU G.
template <class S>
inline void wino_dw_tile(const S du[16], S dg[9]) {
  S t[12];
  for (int j = 0; j < 4; ++j) {
    const S a = du[j], b = du[4 + j], c = du[8 + j], d = du[12 + j];
    t[j] = a + S(0.5) * (b + c);
    t[4 + j] = S(0.5) * (b - c);
    t[8 + j] = S(0.5) * (b + c) + d;
  }
  for (int i = 0; i < 3; ++i) {
    const S a = t[4 * i], b = t[4 * i + 1], c = t[4 * i + 2], d = t[4 * i + 3];
    dg[3 * i] = a + S(0.5) * (b + c);
    dg[3 * i + 1] = S(0.5) * (b - c);
    dg[3 * i + 2] = S(0.5) * (b + c) + d;
  }
}

// Per-frequency planes live kstride apart, padded past the natural plane size
// so the 16 interleaved store streams in the transforms land in distinct cache
// sets instead of thrashing one.
constexpr std::int64_t wino_pad = 16;

// U[k] as (Cout,Cin), one layout per call site: the products want opposite
// contiguity depending on direction, and each direction needs only one. Loop
// order follows the layout so the 16 plane streams write contiguously.
template <class S>
void wino_transform_weights_rm(const S* w, int Cout, int Cin, S* Urm, std::int64_t ustride) {
  std::int64_t idx = 0;
  for (int co = 0; co < Cout; ++co)
    for (int ci = 0; ci < Cin; ++ci, ++idx) {
      S u[16];
      wino_weight_tile(w + idx * 9, u);
      for (int k = 0; k < 16; ++k) Urm[k * ustride + idx] = u[k];
    }
}

template <class S>
void wino_transform_weights_cm(const S* w, int Cout, int Cin, S* Ucm, std::int64_t ustride) {
  std::int64_t idx = 0;
  for (int ci = 0; ci < Cin; ++ci)
    for (int co = 0; co < Cout; ++co, ++idx) {
      S u[16];
      wino_weight_tile(w + ((std::int64_t)co * Cin + ci) * 9, u);
      for (int k = 0; k < 16; ++k) Ucm[k * ustride + idx] = u[k];
    }
}

// V[k]: (Cin,T) col-major over tiles t = p*Q+q; tile (p,q) reads input rows
// 2p-1..2p+2, cols 2q-1..2q+2, zero outside.
template <class S>
void wino_transform_input(const S* x, int Cin, int H, int W, S* V, std::int64_t kstride) {
  const int P = H / 2, Q = W / 2;
  const std::int64_t plane = (std::int64_t)H * W;
  for (int p = 0; p < P; ++p) {
    const int i0 = 2 * p - 1;
    const bool rin = i0 >= 0 && i0 + 3 < H;
    for (int q = 0; q < Q; ++q) {
      const int j0 = 2 * q - 1;
      S* vt = V + ((std::int64_t)p * Q + q) * Cin;
      if (rin && j0 >= 0 && j0 + 3 < W) {
        const S* base = x + (std::int64_t)i0 * W + j0;
        for (int ci = 0; ci < Cin; ++ci) {
          const S* r = base + ci * plane;
          S d[16], v[16];
          for (int i = 0; i < 4; ++i, r += W) {
            d[4 * i] = r[0];
            d[4 * i + 1] = r[1];
            d[4 * i + 2] = r[2];
            d[4 * i + 3] = r[3];
          }
          wino_input_tile(d, v);
          for (int k = 0; k < 16; ++k) vt[k * kstride + ci] = v[k];
        }
      } else {
        for (int ci = 0; ci < Cin; ++ci) {
          const S* xc = x + ci * plane;
          S d[16], v[16];
          for (int i = 0; i < 4; ++i) {
            const int ii = i0 + i;
            for (int j = 0; j < 4; ++j) {
              const int jj = j0 + j;
              d[4 * i + j] =
                  (ii >= 0 && ii < H && jj >= 0 && jj < W) ? xc[(std::int64_t)ii * W + jj] : S(0);
            }
          }
          wino_input_tile(d, v);
          for (int k = 0; k < 16; ++k) vt[k * kstride + ci] = v[k];
        }
      }
    }
  }
}

// M[k]: (Cout,T) col-major -> output planes, bias fused.
template <class S>
void wino_output(const S* M, const S* bias, int Cout, int H, int W, S* y,
                 std::int64_t kstride) {
  const int P = H / 2, Q = W / 2;
  for (int p = 0; p < P; ++p)
    for (int q = 0; q < Q; ++q) {
      const S* mt = M + ((std::int64_t)p * Q + q) * Cout;
      for (int co = 0; co < Cout; ++co) {
        S m[16], o[4];
        for (int k = 0; k < 16; ++k) m[k] = mt[k * kstride + co];
        wino_output_tile(m, o);
        S* r0 = y + ((std::int64_t)co * H + 2 * p) * W + 2 * q;
        const S bv = bias[co];
        r0[0] = o[0] + bv;
        r0[1] = o[1] + bv;
        r0[W] = o[2] + bv;
        r0[W + 1] = o[3] + bv;
      }
    }
}

// dM[k]: (Cout,T) row-major.
template <class S>
void wino_transform_dy(const S* dy, int Cout, int H, int W, S* dM, std::int64_t kstride) {
  const int P = H / 2, Q = W / 2;
  const std::int64_t T = (std::int64_t)P * Q;
  for (int co = 0; co < Cout; ++co) {
    S* mco = dM + (std::int64_t)co * T;
    const S* yc = dy + (std::int64_t)co * H * W;
    for (int p = 0; p < P; ++p) {
      const S* r0 = yc + (std::int64_t)(2 * p) * W;
      const S* r1 = r0 + W;
      for (int q = 0; q < Q; ++q) {
        const S g[4] = {r0[2 * q], r0[2 * q + 1], r1[2 * q], r1[2 * q + 1]};
        S dm[16];
        wino_dy_tile(g, dm);
        S* mt = mco + (std::int64_t)p * Q + q;
        for (int k = 0; k < 16; ++k) mt[k * kstride] = dm[k];
      }
    }
  }
}

template <class S>
void wino_accum_dw(const S* dU, int Cout, int Cin, S* dw) {
  const std::int64_t stride = (std::int64_t)Cout * Cin;
  std::int64_t idx = 0;
  for (int co = 0; co < Cout; ++co)
    for (int ci = 0; ci < Cin; ++ci, ++idx) {
      S du[16], dg[9];
      for (int k = 0; k < 16; ++k) du[k] = dU[k * stride + idx];
      wino_dw_tile(du, dg);
      S* g = dw + idx * 9;
      for (int i = 0; i < 9; ++i) g[i] += dg[i];
    }
}

// Input tiles overlap one pixel, so adjoint patches accumulate.
template <class S>
void wino_accum_dx(const S* dV, int Cin, int H, int W, S* dx, std::int64_t kstride) {
  const int P = H / 2, Q = W / 2;
  const std::int64_t plane = (std::int64_t)H * W;
  for (int p = 0; p < P; ++p) {
    const int i0 = 2 * p - 1;
    const bool rin = i0 >= 0 && i0 + 3 < H;
    for (int q = 0; q < Q; ++q) {
      const int j0 = 2 * q - 1;
      const S* vt = dV + ((std::int64_t)p * Q + q) * Cin;
      if (rin && j0 >= 0 && j0 + 3 < W) {
        S* base = dx + (std::int64_t)i0 * W + j0;
        for (int ci = 0; ci < Cin; ++ci) {
          S dv[16], dd[16];
          for (int k = 0; k < 16; ++k) dv[k] = vt[k * kstride + ci];
          wino_dx_tile(dv, dd);
          S* r = base + ci * plane;
          for (int i = 0; i < 4; ++i, r += W) {
            r[0] += dd[4 * i];
            r[1] += dd[4 * i + 1];
            r[2] += dd[4 * i + 2];
            r[3] += dd[4 * i + 3];
          }
        }
      } else {
        for (int ci = 0; ci < Cin; ++ci) {
          S dv[16], dd[16];
          for (int k = 0; k < 16; ++k) dv[k] = vt[k * kstride + ci];
          wino_dx_tile(dv, dd);
          S* xc = dx + ci * plane;
          for (int i = 0; i < 4; ++i) {
            const int ii = i0 + i;
            if (ii < 0 || ii >= H) continue;
            for (int j = 0; j < 4; ++j) {
              const int jj = j0 + j;
              if (jj >= 0 && jj < W) xc[(std::int64_t)ii * W + jj] += dd[4 * i + j];
            }
          }
        }
      }
    }
  }
}

// Register-blocked products for the 16 per-frequency multiplies. Eigen's gemm
// repacks a half-megabyte operand per tiny product here, so these fixed-width
// broadcast-FMA kernels beat it roughly twofold. Float only; other scalars fall
// back to plain Eigen products.
using Pk16 = Eigen::Array<float, 16, 1>;

// C(M,N) col-major = A(M,K) col-major * B, with B read coefficient-wise at
// b[k*bsk + n*bsn]. Requires M % 16 == 0.
inline void wino_bcast_gemm(const float* A, const float* B, float* C, int M, int K,
                            std::int64_t N, std::int64_t bsk, std::int64_t bsn) {
  for (int mb = 0; mb < M; mb += 32) {
    const int mw = std::min(32, M - mb);
    std::int64_t n = 0;
    for (; n + 4 <= N; n += 4) {
      const float* bj = B + n * bsn;
      float* cj = C + n * M + mb;
      if (mw == 32) {
        Pk16 a00 = Pk16::Zero(), a01 = Pk16::Zero(), a10 = Pk16::Zero(), a11 = Pk16::Zero();
        Pk16 a20 = Pk16::Zero(), a21 = Pk16::Zero(), a30 = Pk16::Zero(), a31 = Pk16::Zero();
        const float* ak = A + mb;
        for (int k = 0; k < K; ++k, ak += M) {
          Eigen::Map<const Pk16> u0(ak), u1(ak + 16);
          const float* bp = bj + k * bsk;
          const float s0 = bp[0], s1 = bp[bsn], s2 = bp[2 * bsn], s3 = bp[3 * bsn];
          a00 += s0 * u0;
          a01 += s0 * u1;
          a10 += s1 * u0;
          a11 += s1 * u1;
          a20 += s2 * u0;
          a21 += s2 * u1;
          a30 += s3 * u0;
          a31 += s3 * u1;
        }
        Eigen::Map<Pk16>{cj} = a00;
        Eigen::Map<Pk16>{cj + 16} = a01;
        Eigen::Map<Pk16>{cj + M} = a10;
        Eigen::Map<Pk16>{cj + M + 16} = a11;
        Eigen::Map<Pk16>{cj + 2 * M} = a20;
        Eigen::Map<Pk16>{cj + 2 * M + 16} = a21;
        Eigen::Map<Pk16>{cj + 3 * M} = a30;
        Eigen::Map<Pk16>{cj + 3 * M + 16} = a31;
      } else {
        Pk16 a0 = Pk16::Zero(), a1 = Pk16::Zero(), a2 = Pk16::Zero(), a3 = Pk16::Zero();
        const float* ak = A + mb;
        for (int k = 0; k < K; ++k, ak += M) {
          Eigen::Map<const Pk16> u0(ak);
          const float* bp = bj + k * bsk;
          a0 += bp[0] * u0;
          a1 += bp[bsn] * u0;
          a2 += bp[2 * bsn] * u0;
          a3 += bp[3 * bsn] * u0;
        }
        Eigen::Map<Pk16>{cj} = a0;
        Eigen::Map<Pk16>{cj + M} = a1;
        Eigen::Map<Pk16>{cj + 2 * M} = a2;
        Eigen::Map<Pk16>{cj + 3 * M} = a3;
      }
    }
    for (; n < N; ++n) {
      const float* bj = B + n * bsn;
      float* cj = C + n * M + mb;
      for (int r = 0; r < mw; r += 16) {
        Pk16 acc = Pk16::Zero();
        const float* ak = A + mb + r;
        for (int k = 0; k < K; ++k, ak += M) acc += bj[k * bsk] * Eigen::Map<const Pk16>(ak);
        Eigen::Map<Pk16>{cj + r} = acc;
      }
    }
  }
}

// dU(Cout,Cin) row-major = dM(Cout,T) row-major * V(Cin,T)^T as rank-1 updates
// over tiles. Requires Cin % 16 == 0 and Cout % 8 == 0.
inline void wino_du_gemm(const float* dM, const float* V, int Cout, int Cin, std::int64_t T,
                         float* dU) {
  for (int cb = 0; cb < Cin; cb += 16)
    for (int ob = 0; ob < Cout; ob += 8) {
      const float* dm = dM + (std::int64_t)ob * T;
      Pk16 a0 = Pk16::Zero(), a1 = Pk16::Zero(), a2 = Pk16::Zero(), a3 = Pk16::Zero();
      Pk16 a4 = Pk16::Zero(), a5 = Pk16::Zero(), a6 = Pk16::Zero(), a7 = Pk16::Zero();
      for (std::int64_t t = 0; t < T; ++t) {
        Eigen::Map<const Pk16> vv(V + t * Cin + cb);
        const float* m = dm + t;
        a0 += m[0 * T] * vv;
        a1 += m[1 * T] * vv;
        a2 += m[2 * T] * vv;
        a3 += m[3 * T] * vv;
        a4 += m[4 * T] * vv;
        a5 += m[5 * T] * vv;
        a6 += m[6 * T] * vv;
        a7 += m[7 * T] * vv;
      }
      Eigen::Map<Pk16>{dU + (std::int64_t)(ob + 0) * Cin + cb} = a0;
      Eigen::Map<Pk16>{dU + (std::int64_t)(ob + 1) * Cin + cb} = a1;
      Eigen::Map<Pk16>{dU + (std::int64_t)(ob + 2) * Cin + cb} = a2;
      Eigen::Map<Pk16>{dU + (std::int64_t)(ob + 3) * Cin + cb} = a3;
      Eigen::Map<Pk16>{dU + (std::int64_t)(ob + 4) * Cin + cb} = a4;
      Eigen::Map<Pk16>{dU + (std::int64_t)(ob + 5) * Cin + cb} = a5;
      Eigen::Map<Pk16>{dU + (std::int64_t)(ob + 6) * Cin + cb} = a6;
      Eigen::Map<Pk16>{dU + (std::int64_t)(ob + 7) * Cin + cb} = a7;
    }
}

template <class S>
constexpr bool wino_fast(int Cout, int Cin) {
  return std::is_same_v<S, float> && Cin % 16 == 0 && Cout % 16 == 0;
}

// M[k] = U[k] * V[k] per frequency.
template <class S>
void wino_mul_fwd(const S* Ucm, const S* V, S* M, int Cout, int Cin, std::int64_t T,
                  std::int64_t uk, std::int64_t vk, std::int64_t mk) {
  if constexpr (std::is_same_v<S, float>)
    if (wino_fast<S>(Cout, Cin)) {
      for (int k = 0; k < 16; ++k)
        wino_bcast_gemm(Ucm + k * uk, V + k * vk, M + k * mk, Cout, Cin, T, 1, Cin);
      return;
    }
  for (int k = 0; k < 16; ++k) {
    CMapCM<S> Um(Ucm + k * uk, Cout, Cin);
    CMapCM<S> Vm(V + k * vk, Cin, T);
    MapCM<S> Mm(M + k * mk, Cout, T);
    Mm.noalias() = Um * Vm;
  }
}

// dU[k] = dM[k] * V[k]^T per frequency.
template <class S>
void wino_mul_dw(const S* dM, const S* V, S* dU, int Cout, int Cin, std::int64_t T,
                 std::int64_t vk, std::int64_t mk) {
  if constexpr (std::is_same_v<S, float>)
    if (wino_fast<S>(Cout, Cin)) {
      for (int k = 0; k < 16; ++k)
        wino_du_gemm(dM + k * mk, V + k * vk, Cout, Cin, T,
                     dU + (std::int64_t)k * Cout * Cin);
      return;
    }
  for (int k = 0; k < 16; ++k) {
    CMapRM<S> dMm(dM + k * mk, Cout, T);
    CMapCM<S> Vm(V + k * vk, Cin, T);
    MapRM<S> dUm(dU + (std::int64_t)k * Cout * Cin, Cout, Cin);
    dUm.noalias() = dMm * Vm.transpose();
  }
}

// dV[k] = U[k]^T * dM[k] per frequency.
template <class S>
void wino_mul_dx(const S* Urm, const S* dM, S* dV, int Cout, int Cin, std::int64_t T,
                 std::int64_t uk, std::int64_t vk, std::int64_t mk) {
  if constexpr (std::is_same_v<S, float>)
    if (wino_fast<S>(Cout, Cin)) {
      for (int k = 0; k < 16; ++k)
        wino_bcast_gemm(Urm + k * uk, dM + k * mk, dV + k * vk, Cin, Cout, T, T, 1);
      return;
    }
  for (int k = 0; k < 16; ++k) {
    CMapRM<S> Um(Urm + k * uk, Cout, Cin);
    CMapRM<S> dMm(dM + k * mk, Cout, T);
    MapCM<S> dVm(dV + k * vk, Cin, T);
    dVm.noalias() = Um.transpose() * dMm;
  }
}

template <class S>
NodeRef<S> conv2d_wino3(const NodeRef<S>& x, const NodeRef<S>& w, const NodeRef<S>& b) {
  const Tensor<S>& xv = x->value;
  const Tensor<S>& wv = w->value;
  const int Cout = wv.shape[0], Cin = wv.shape[1];
  const int H = xv.shape[1], W = xv.shape[2];
  const int P = H / 2, Q = W / 2;
  const std::int64_t T = (std::int64_t)P * Q;
  const std::int64_t uk = (std::int64_t)Cout * Cin + wino_pad;
  const std::int64_t vk = (std::int64_t)Cin * T + wino_pad;
  const std::int64_t mk = (std::int64_t)Cout * T + wino_pad;

  auto Ucm = scratch_buffer<S>(16 * uk);
  wino_transform_weights_cm(wv.ptr(), Cout, Cin, Ucm.get(), uk);
  auto V = scratch_buffer<S>(16 * vk);
  wino_transform_input(xv.ptr(), Cin, H, W, V.get(), vk);

  auto M = scratch_buffer<S>(16 * mk);
  wino_mul_fwd(Ucm.get(), V.get(), M.get(), Cout, Cin, T, uk, vk, mk);

  Tensor<S> out = Tensor<S>::uninit({Cout, H, W});
  wino_output(M.get(), b->value.ptr(), Cout, H, W, out.ptr(), mk);

  const bool keep = w->needs_grad || x->needs_grad;
  return make_op<S>(
      std::move(out), {x, w, b}, [V = keep ? V : nullptr, Cin, Cout, H, W](Node<S>& n) {
        auto& x = *n.parents[0];
        auto& w = *n.parents[1];
        auto& b = *n.parents[2];
        const int P = H / 2, Q = W / 2;
        const std::int64_t T = (std::int64_t)P * Q, N = (std::int64_t)H * W;
        const std::int64_t uk = (std::int64_t)Cout * Cin + wino_pad;
        const std::int64_t vk = (std::int64_t)Cin * T + wino_pad;
        const std::int64_t mk = (std::int64_t)Cout * T + wino_pad;
        if (b.needs_grad) {
          b.ensure_grad();
          CMapRM<S> dym(n.grad.ptr(), Cout, N);
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> db(b.grad.ptr(), Cout);
          db.noalias() += dym.rowwise().sum();
        }
        if (!w.needs_grad && !x.needs_grad) return;
        auto dM = scratch_buffer<S>(16 * mk);
        wino_transform_dy(n.grad.ptr(), Cout, H, W, dM.get(), mk);
        if (w.needs_grad) {
          w.ensure_grad();
          auto dU = scratch_buffer<S>(16 * (std::int64_t)Cout * Cin);
          wino_mul_dw(dM.get(), V.get(), dU.get(), Cout, Cin, T, vk, mk);
          wino_accum_dw(dU.get(), Cout, Cin, w.grad.ptr());
        }
        if (x.needs_grad) {
          x.ensure_grad();
          auto Urm = scratch_buffer<S>(16 * uk);
          wino_transform_weights_rm(w.value.ptr(), Cout, Cin, Urm.get(), uk);
          auto dV = scratch_buffer<S>(16 * vk);
          wino_mul_dx(Urm.get(), dM.get(), dV.get(), Cout, Cin, T, uk, vk, mk);
          wino_accum_dx(dV.get(), Cin, H, W, x.grad.ptr(), vk);
        }
      });
}

}  // namespace detail

// conv2d: x (Cin,H,W), w (Cout,Cin,k,k), b (Cout). Square kernel, symmetric
// zero padding, output size must come out integral.
template <class S>
NodeRef<S> conv2d(const NodeRef<S>& x, const NodeRef<S>& w, const NodeRef<S>& b, int stride,
                  int pad) {
  const Tensor<S>& xv = x->value;
  const Tensor<S>& wv = w->value;
  if (xv.rank() != 3) throw DimensionError("conv2d input must be rank 3, got " + shape_str(xv.shape));
  if (wv.rank() != 4) throw DimensionError("conv2d weight must be rank 4, got " + shape_str(wv.shape));
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >=1 and padding >=0");
  const int Cout = wv.shape[0], Cin = wv.shape[1], k = wv.shape[2];
  if (wv.shape[3] != k) throw DimensionError("conv2d kernel must be square, got " + shape_str(wv.shape));
  if (xv.shape[0] != Cin)
    throw DimensionError("conv2d channel mismatch: input " + shape_str(xv.shape) + " vs weight " +
                         shape_str(wv.shape));
  if (b->value.numel() != Cout)
    throw DimensionError("conv2d bias size " + shape_str(b->value.shape) + " vs weight " +
                         shape_str(wv.shape));
  const int H = xv.shape[1], W = xv.shape[2];
  if (H + 2 * pad < k || W + 2 * pad < k || (H + 2 * pad - k) % stride || (W + 2 * pad - k) % stride)
    throw DimensionError("conv2d geometry does not divide: input " + shape_str(xv.shape) +
                         " kernel " + std::to_string(k) + " stride " + std::to_string(stride) +
                         " pad " + std::to_string(pad));
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (k == 3 && stride == 1 && pad == 1 && H % 2 == 0 && W % 2 == 0)
    return detail::conv2d_wino3(x, w, b);
  const std::int64_t K = (std::int64_t)Cin * k * k, N = (std::int64_t)Ho * Wo;

  auto col = detail::scratch_buffer<S>(K * N);
  detail::im2col(xv, k, stride, pad, Ho, Wo, col.get());

  Tensor<S> out = Tensor<S>::uninit({Cout, Ho, Wo});
  detail::CMapRM<S> wm(wv.ptr(), Cout, K);
  detail::CMapCM<S> colm(col.get(), K, N);
  detail::MapRM<S> ym(out.ptr(), Cout, N);
  ym.noalias() = wm * colm;
  for (int co = 0; co < Cout; ++co) ym.row(co).array() += b->value.data[co];

  const bool keep_col = w->needs_grad || x->needs_grad;
  return detail::make_op<S>(
      std::move(out), {x, w, b},
      [col = keep_col ? col : nullptr, Cin, Cout, k, stride, pad, H, W, Ho, Wo, K, N](Node<S>& n) {
        auto& x = *n.parents[0];
        auto& w = *n.parents[1];
        auto& b = *n.parents[2];
        detail::CMapRM<S> dym(n.grad.ptr(), Cout, N);
        if (b.needs_grad) {
          b.ensure_grad();
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> db(b.grad.ptr(), Cout);
          db.noalias() += dym.rowwise().sum();
        }
        if (w.needs_grad) {
          w.ensure_grad();
          detail::MapRM<S> dwm(w.grad.ptr(), Cout, K);
          detail::CMapCM<S> colm(col.get(), K, N);
          dwm.noalias() += dym * colm.transpose();
        }
        if (x.needs_grad) {
          x.ensure_grad();
          detail::CMapRM<S> wm(w.value.ptr(), Cout, K);
          auto dcol = detail::scratch_buffer<S>(K * N);
          if (stride == 1) {
            detail::MapRM<S> dcolm(dcol.get(), K, N);
            dcolm.noalias() = wm.transpose() * dym;
            detail::col2im_add_rows(dcol.get(), Cin, H, W, k, pad, Ho, Wo, x.grad.ptr());
          } else {
            detail::MapCM<S> dcolm(dcol.get(), K, N);
            dcolm.noalias() = wm.transpose() * dym;
            detail::col2im_add(dcol.get(), Cin, H, W, k, stride, pad, Ho, Wo, x.grad.ptr());
          }
        }
      });
}

// conv_transpose2d with kernel 2, stride 2 (the only transposed conv the model
// zoo uses): x (Cin,H,W), w (Cin,Cout,2,2), b (Cout) -> (Cout,2H,2W). Output
// pixel (2i+a, 2j+b) receives sum_cin x[cin,i,j] * w[cin,cout,a,b]; blocks
// never overlap so forward is a GEMM plus scatter.
template <class S>
NodeRef<S> conv_transpose2d_k2s2(const NodeRef<S>& x, const NodeRef<S>& w, const NodeRef<S>& b) {
  const Tensor<S>& xv = x->value;
  const Tensor<S>& wv = w->value;
  if (xv.rank() != 3)
    throw DimensionError("conv_transpose2d input must be rank 3, got " + shape_str(xv.shape));
  if (wv.rank() != 4 || wv.shape[2] != 2 || wv.shape[3] != 2)
    throw DimensionError("conv_transpose2d weight must be (Cin,Cout,2,2), got " + shape_str(wv.shape));
  if (xv.shape[0] != wv.shape[0])
    throw DimensionError("conv_transpose2d channel mismatch: input " + shape_str(xv.shape) +
                         " vs weight " + shape_str(wv.shape));
  const int Cin = wv.shape[0], Cout = wv.shape[1];
  if (b->value.numel() != Cout)
    throw DimensionError("conv_transpose2d bias size " + shape_str(b->value.shape) + " vs weight " +
                         shape_str(wv.shape));
  const int H = xv.shape[1], W = xv.shape[2];
  const std::int64_t N = (std::int64_t)H * W;

  detail::CMapRM<S> wm(wv.ptr(), Cin, (std::int64_t)Cout * 4);
  detail::CMapRM<S> xm(xv.ptr(), Cin, N);
  auto blocks = detail::scratch_buffer<S>((std::int64_t)Cout * 4 * N);
  detail::MapCM<S> bm(blocks.get(), (std::int64_t)Cout * 4, N);
  bm.noalias() = wm.transpose() * xm;

  Tensor<S> out = Tensor<S>::uninit({Cout, 2 * H, 2 * W});
  for (int co = 0; co < Cout; ++co) {
    const S bias = b->value.data[co];
    for (int a = 0; a < 2; ++a)
      for (int d = 0; d < 2; ++d) {
        const S* src = blocks.get() + ((std::int64_t)co * 4 + a * 2 + d);
        // blocks is col-major (row r, col n) at r + n*rows; walk columns.
        const std::int64_t rows = (std::int64_t)Cout * 4;
        for (int i = 0; i < H; ++i) {
          S* dst = out.ptr() + ((std::int64_t)co * 2 * H + 2 * i + a) * 2 * W + d;
          for (int j = 0; j < W; ++j) dst[2 * j] = src[(((std::int64_t)i * W) + j) * rows] + bias;
        }
      }
  }

  return detail::make_op<S>(std::move(out), {x, w, b}, [Cin, Cout, H, W, N](Node<S>& n) {
    auto& x = *n.parents[0];
    auto& w = *n.parents[1];
    auto& b = *n.parents[2];
    const std::int64_t rows = (std::int64_t)Cout * 4;
    auto dbuf = detail::scratch_buffer<S>(rows * N);
    detail::MapCM<S> dblocks(dbuf.get(), rows, N);
    for (int co = 0; co < Cout; ++co)
      for (int a = 0; a < 2; ++a)
        for (int d = 0; d < 2; ++d) {
          S* dst = dblocks.data() + ((std::int64_t)co * 4 + a * 2 + d);
          for (int i = 0; i < H; ++i) {
            const S* src = n.grad.ptr() + ((std::int64_t)co * 2 * H + 2 * i + a) * 2 * W + d;
            for (int j = 0; j < W; ++j) dst[(((std::int64_t)i * W) + j) * rows] = src[2 * j];
          }
        }
    if (b.needs_grad) {
      b.ensure_grad();
      for (int co = 0; co < Cout; ++co) {
        double s = 0;
        const S* g = n.grad.ptr() + (std::int64_t)co * 4 * N;
        for (std::int64_t i = 0; i < 4 * N; ++i) s += g[i];
        b.grad.data[co] += (S)s;
      }
    }
    if (w.needs_grad) {
      w.ensure_grad();
      detail::MapRM<S> dwm(w.grad.ptr(), Cin, rows);
      detail::CMapRM<S> xm(x.value.ptr(), Cin, N);
      dwm.noalias() += xm * dblocks.transpose();
    }
    if (x.needs_grad) {
      x.ensure_grad();
      detail::CMapRM<S> wm(w.value.ptr(), Cin, rows);
      detail::MapRM<S> dxm(x.grad.ptr(), Cin, N);
      dxm.noalias() += wm * dblocks;
    }
  });
}

template <class S>
NodeRef<S> maxpool2x2(const NodeRef<S>& x) {
  const Tensor<S>& xv = x->value;
  if (xv.rank() != 3)
    throw DimensionError("maxpool2x2 input must be rank 3, got " + shape_str(xv.shape));
  const int C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
  if (H % 2 || W % 2)
    throw DimensionError("maxpool2x2 needs even spatial dims, got " + shape_str(xv.shape));
  Tensor<S> out = Tensor<S>::uninit({C, H / 2, W / 2});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
  std::int64_t o = 0;
  for (int c = 0; c < C; ++c) {
    const S* xc = xv.ptr() + (std::int64_t)c * H * W;
    for (int i = 0; i < H; i += 2)
      for (int j = 0; j < W; j += 2) {
        // ties go to the first element in scan order
        std::int64_t best = (std::int64_t)i * W + j;
        S bv = xc[best];
        const std::int64_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::int64_t idx : cand)
          if (xc[idx] > bv) {
            bv = xc[idx];
            best = idx;
          }
        out.data[o] = bv;
        (*argmax)[o++] = (std::int64_t)c * H * W + best;
      }
  }
  return detail::make_op<S>(std::move(out), {x}, [argmax](Node<S>& n) {
    auto& x = *n.parents[0];
    if (!x.needs_grad) return;
    x.ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) x.grad.data[(*argmax)[i]] += n.grad.data[i];
  });
}

// Per-channel batch norm over a single (C,H,W) activation; batch statistics in
// train mode, running statistics in eval mode. Running buffers live outside the
// graph and are updated in place during train-mode forward.
template <class S>
NodeRef<S> batchnorm2d(const NodeRef<S>& x, const NodeRef<S>& gamma, const NodeRef<S>& beta,
                       Tensor<S>* running_mean, Tensor<S>* running_var, S momentum, S eps,
                       bool train) {
  const Tensor<S>& xv = x->value;
  if (xv.rank() != 3)
    throw DimensionError("batchnorm2d input must be rank 3, got " + shape_str(xv.shape));
  const int C = xv.shape[0];
  if (eps <= S(0)) throw ConfigError("batchnorm2d: eps must be positive");
  if (gamma->value.numel() != C || beta->value.numel() != C ||
      running_mean->numel() != C || running_var->numel() != C)
    throw DimensionError("batchnorm2d parameter size mismatch for input " + shape_str(xv.shape));
  const std::int64_t n = (std::int64_t)xv.shape[1] * xv.shape[2];
  if (n < 2) throw DimensionError("batchnorm2d needs at least 2 spatial positions");

  Tensor<S> out = Tensor<S>::uninit(xv.shape);
  auto xhat = std::make_shared<Tensor<S>>(Tensor<S>::uninit(xv.shape));
  auto inv_std = std::make_shared<std::vector<S>>(C);
  for (int c = 0; c < C; ++c) {
    const S* xc = xv.ptr() + c * n;
    S mu, inv;
    if (train) {
      Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xa(xc, n);
      const auto xd = xa.template cast<double>();
      const double s = xd.sum(), s2 = xd.square().sum();
      const double m = s / n;
      double var = s2 / n - m * m;
      if (var < 0) var = 0;
      mu = (S)m;
      inv = (S)(1.0 / std::sqrt(var + (double)eps));
      running_mean->data[c] = (S(1) - momentum) * running_mean->data[c] + momentum * mu;
      running_var->data[c] =
          (S(1) - momentum) * running_var->data[c] + momentum * (S)(var * n / (n - 1));
    } else {
      mu = running_mean->data[c];
      inv = (S)(1.0 / std::sqrt((double)running_var->data[c] + (double)eps));
    }
    (*inv_std)[c] = inv;
    const S g = gamma->value.data[c], bt = beta->value.data[c];
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> xm(xc, n);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> hm(xhat->ptr() + c * n, n);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> om(out.ptr() + c * n, n);
    hm = (xm - mu) * inv;
    om = g * hm + bt;
  }

  return detail::make_op<S>(std::move(out), {x, gamma, beta},
                            [xhat, inv_std, C, n, train](Node<S>& node) {
    auto& x = *node.parents[0];
    auto& gamma = *node.parents[1];
    auto& beta = *node.parents[2];
    for (int c = 0; c < C; ++c) {
      const S* dy = node.grad.ptr() + c * n;
      const S* h = xhat->ptr() + c * n;
      Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> dya(dy, n), ha(h, n);
      const double sum_dy = dya.template cast<double>().sum();
      const double sum_dyh = (dya.template cast<double>() * ha.template cast<double>()).sum();
      if (gamma.needs_grad) {
        gamma.ensure_grad();
        gamma.grad.data[c] += (S)sum_dyh;
      }
      if (beta.needs_grad) {
        beta.ensure_grad();
        beta.grad.data[c] += (S)sum_dy;
      }
      if (x.needs_grad) {
        x.ensure_grad();
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> dxm(x.grad.ptr() + c * n, n);
        const S gi = gamma.value.data[c] * (*inv_std)[c];
        if (train) {
          const S a = (S)(sum_dy / n), b = (S)(sum_dyh / n);
          dxm += gi * (dya - a - ha * b);
        } else {
          dxm += gi * dya;
        }
      }
    }
  });
}

template <class S>
NodeRef<S> leaky_relu(const NodeRef<S>& x, S slope) {
  Tensor<S> out = Tensor<S>::uninit(x->value.shape);
  if (slope <= S(1))
    out.data = x->value.data.max(x->value.data * slope);
  else
    out.data = x->value.data.min(x->value.data * slope);
  return detail::make_op<S>(std::move(out), {x}, [slope](Node<S>& n) {
    auto& x = *n.parents[0];
    if (!x.needs_grad) return;
    x.ensure_grad();
    x.grad.data +=
        n.grad.data * (slope + (S(1) - slope) * (x.value.data > S(0)).template cast<S>());
  });
}

template <class S>
NodeRef<S> relu(const NodeRef<S>& x) {
  return leaky_relu(x, S(0));
}

template <class S>
NodeRef<S> tanh_op(const NodeRef<S>& x) {
  Tensor<S> out = Tensor<S>::uninit(x->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out.data[i] = std::tanh(x->value.data[i]);
  auto saved = std::make_shared<Tensor<S>>(out);
  return detail::make_op<S>(std::move(out), {x}, [saved](Node<S>& n) {
    auto& x = *n.parents[0];
    if (!x.needs_grad) return;
    x.ensure_grad();
    x.grad.data += n.grad.data * (S(1) - saved->data.square());
  });
}

template <class S>
NodeRef<S> concat_ch(const NodeRef<S>& a, const NodeRef<S>& b) {
  const Tensor<S>& av = a->value;
  const Tensor<S>& bv = b->value;
  if (av.rank() != 3 || bv.rank() != 3 || av.shape[1] != bv.shape[1] || av.shape[2] != bv.shape[2])
    throw DimensionError("concat_ch spatial mismatch: " + shape_str(av.shape) + " vs " +
                         shape_str(bv.shape));
  Tensor<S> out = Tensor<S>::uninit({av.shape[0] + bv.shape[0], av.shape[1], av.shape[2]});
  std::copy(av.ptr(), av.ptr() + av.numel(), out.ptr());
  std::copy(bv.ptr(), bv.ptr() + bv.numel(), out.ptr() + av.numel());
  const std::int64_t na = av.numel();
  return detail::make_op<S>(std::move(out), {a, b}, [na](Node<S>& n) {
    auto& a = *n.parents[0];
    auto& b = *n.parents[1];
    if (a.needs_grad) {
      a.ensure_grad();
      a.grad.data += n.grad.data.head(na);
    }
    if (b.needs_grad) {
      b.ensure_grad();
      b.grad.data += n.grad.data.tail(n.grad.numel() - na);
    }
  });
}

// y = a*x + c elementwise with scalar constants (range remaps).
template <class S>
NodeRef<S> affine(const NodeRef<S>& x, S a, S c) {
  Tensor<S> out = Tensor<S>::uninit(x->value.shape);
  out.data = a * x->value.data + c;
  return detail::make_op<S>(std::move(out), {x}, [a](Node<S>& n) {
    auto& x = *n.parents[0];
    if (!x.needs_grad) return;
    x.ensure_grad();
    x.grad.data += a * n.grad.data;
  });
}

// Mean squared error against a fixed target; reduction accumulates in double.
template <class S>
NodeRef<S> mse_to(const NodeRef<S>& x, const Tensor<S>& target) {
  check_same_shape(x->value, target, "mse_to");
  const std::int64_t n = x->value.numel();
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = (double)x->value.data[i] - target.data[i];
    acc += d * d;
  }
  Tensor<S> out({1});
  out.data[0] = (S)(acc / n);
  auto tgt = std::make_shared<Tensor<S>>(target);
  return detail::make_op<S>(std::move(out), {x}, [tgt, n](Node<S>& node) {
    auto& x = *node.parents[0];
    if (!x.needs_grad) return;
    x.ensure_grad();
    const S go = node.grad.data[0] * (S)(2.0 / n);
    x.grad.data += go * (x.value.data - tgt->data);
  });
}

template <class S>
NodeRef<S> sum_all(const NodeRef<S>& x) {
  double acc = 0;
  for (std::int64_t i = 0; i < x->value.numel(); ++i) acc += x->value.data[i];
  Tensor<S> out({1});
  out.data[0] = (S)acc;
  return detail::make_op<S>(std::move(out), {x}, [](Node<S>& n) {
    auto& x = *n.parents[0];
    if (!x.needs_grad) return;
    x.ensure_grad();
    x.grad.data += n.grad.data[0];
  });
}

template <class S>
NodeRef<S> mean_all(const NodeRef<S>& x) {
  const std::int64_t n = x->value.numel();
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) acc += x->value.data[i];
  Tensor<S> out({1});
  out.data[0] = (S)(acc / n);
  return detail::make_op<S>(std::move(out), {x}, [n](Node<S>& node) {
    auto& x = *node.parents[0];
    if (!x.needs_grad) return;
    x.ensure_grad();
    x.grad.data += node.grad.data[0] / (S)n;
  });
}

// ---- scalar graph ops (loss assembly over correlation outputs) ----

namespace detail {
template <class S>
void check_scalar(const NodeRef<S>& a, const char* what) {
  if (a->value.numel() != 1)
    throw DimensionError(std::string(what) + " expects scalars, got " + shape_str(a->value.shape));
}
}  // namespace detail

template <class S>
NodeRef<S> nadd(const NodeRef<S>& a, const NodeRef<S>& b) {
  detail::check_scalar(a, "nadd");
  detail::check_scalar(b, "nadd");
  Tensor<S> out({1});
  out.data[0] = a->value.data[0] + b->value.data[0];
  return detail::make_op<S>(std::move(out), {a, b}, [](Node<S>& n) {
    for (int i = 0; i < 2; ++i)
      if (n.parents[i]->needs_grad) {
        n.parents[i]->ensure_grad();
        n.parents[i]->grad.data[0] += n.grad.data[0];
      }
  });
}

template <class S>
NodeRef<S> nsub(const NodeRef<S>& a, const NodeRef<S>& b) {
  detail::check_scalar(a, "nsub");
  detail::check_scalar(b, "nsub");
  Tensor<S> out({1});
  out.data[0] = a->value.data[0] - b->value.data[0];
  return detail::make_op<S>(std::move(out), {a, b}, [](Node<S>& n) {
    if (n.parents[0]->needs_grad) {
      n.parents[0]->ensure_grad();
      n.parents[0]->grad.data[0] += n.grad.data[0];
    }
    if (n.parents[1]->needs_grad) {
      n.parents[1]->ensure_grad();
      n.parents[1]->grad.data[0] -= n.grad.data[0];
    }
  });
}

template <class S>
NodeRef<S> nmul(const NodeRef<S>& a, const NodeRef<S>& b) {
  detail::check_scalar(a, "nmul");
  detail::check_scalar(b, "nmul");
  Tensor<S> out({1});
  out.data[0] = a->value.data[0] * b->value.data[0];
  return detail::make_op<S>(std::move(out), {a, b}, [](Node<S>& n) {
    if (n.parents[0]->needs_grad) {
      n.parents[0]->ensure_grad();
      n.parents[0]->grad.data[0] += n.grad.data[0] * n.parents[1]->value.data[0];
    }
    if (n.parents[1]->needs_grad) {
      n.parents[1]->ensure_grad();
      n.parents[1]->grad.data[0] += n.grad.data[0] * n.parents[0]->value.data[0];
    }
  });
}

// |a| with subgradient 0 at the kink.
template <class S>
NodeRef<S> nabs(const NodeRef<S>& a) {
  detail::check_scalar(a, "nabs");
  Tensor<S> out({1});
  out.data[0] = std::abs(a->value.data[0]);
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& n) {
    auto& a = *n.parents[0];
    if (!a.needs_grad) return;
    a.ensure_grad();
    const S v = a.value.data[0];
    const S s = v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
    a.grad.data[0] += n.grad.data[0] * s;
  });
}

template <class S>
NodeRef<S> nscale(const NodeRef<S>& a, S k) {
  detail::check_scalar(a, "nscale");
  Tensor<S> out({1});
  out.data[0] = k * a->value.data[0];
  return detail::make_op<S>(std::move(out), {a}, [k](Node<S>& n) {
    auto& a = *n.parents[0];
    if (!a.needs_grad) return;
    a.ensure_grad();
    a.grad.data[0] += k * n.grad.data[0];
  });
}

template <class S>
NodeRef<S> nshift(const NodeRef<S>& a, S k) {
  detail::check_scalar(a, "nshift");
  Tensor<S> out({1});
  out.data[0] = a->value.data[0] + k;
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& n) {
    auto& a = *n.parents[0];
    if (!a.needs_grad) return;
    a.ensure_grad();
    a.grad.data[0] += n.grad.data[0];
  });
}

template <class S>
NodeRef<S> nmean(const std::vector<NodeRef<S>>& xs) {
  if (xs.empty()) throw DimensionError("nmean of empty list");
  double acc = 0;
  for (const auto& x : xs) {
    detail::check_scalar(x, "nmean");
    acc += x->value.data[0];
  }
  Tensor<S> out({1});
  out.data[0] = (S)(acc / xs.size());
  return detail::make_op<S>(std::move(out), xs, [](Node<S>& n) {
    const S go = n.grad.data[0] / (S)n.parents.size();
    for (auto& p : n.parents)
      if (p->needs_grad) {
        p->ensure_grad();
        p->grad.data[0] += go;
      }
  });
}

}  // namespace dif
