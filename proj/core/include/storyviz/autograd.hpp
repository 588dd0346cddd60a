#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "storyviz/blas.hpp"
#include "storyviz/common.hpp"
#include "storyviz/tensor.hpp"

namespace storyviz {

// Trainable tensor with a gradient accumulator. Modules own their Params;
// tapes reference them, so a Param must outlive any tape that touched it.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape())) {}

  void zero_grad() { grad.fill(T{}); }
  int64_t numel() const { return value.numel(); }
};

// Reverse-mode tape. Operations append nodes in topological order; backward()
// walks them in reverse. Values are handles into the tape, so a Tape instance
// represents one forward graph and is cleared (or destroyed) between steps.
template <typename T>
class Tape {
 public:
  struct Val {
    int32_t i = -1;
    bool valid() const { return i >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // ---- graph inputs -------------------------------------------------------

  Val constant(Tensor<T> v) { return make(std::move(v), false, nullptr); }

  Val input(Tensor<T> v, bool requires_grad) {
    return make(std::move(v), requires_grad, nullptr);
  }

  Val param(Param<T>& p) {
    Val v = make(p.value, true, nullptr);
    node(v).pull = [&p, v](Tape& t) {
      const Tensor<T>& g = t.node(v).grad;
      T* dst = p.grad.data();
      const T* src = g.data();
      for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
    };
    return v;
  }

  // Cuts the graph: the result has the same value but no gradient path.
  Val detach(Val x) { return make(val(x), false, nullptr); }

  const Tensor<T>& val(Val v) const { return node(v).value; }

  const Tensor<T>& grad_of(Val v) const { return node(v).grad; }

  // ---- elementwise --------------------------------------------------------

  Val add(Val a, Val b) {
    SV_CHECK(val(a).same_shape(val(b)), "add shape mismatch");
    Tensor<T> out = val(a);
    const T* pb = val(b).data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
    return binary_ew(std::move(out), a, b,
                     [](T, T, T g) { return g; },
                     [](T, T, T g) { return g; });
  }

  Val sub(Val a, Val b) {
    SV_CHECK(val(a).same_shape(val(b)), "sub shape mismatch");
    Tensor<T> out = val(a);
    const T* pb = val(b).data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] -= pb[i];
    return binary_ew(std::move(out), a, b,
                     [](T, T, T g) { return g; },
                     [](T, T, T g) { return -g; });
  }

  Val mul(Val a, Val b) {
    SV_CHECK(val(a).same_shape(val(b)), "mul shape mismatch");
    Tensor<T> out = val(a);
    const T* pb = val(b).data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] *= pb[i];
    return binary_ew(std::move(out), a, b,
                     [](T, T vb, T g) { return g * vb; },
                     [](T va, T, T g) { return g * va; });
  }

  Val scale(Val x, T c) {
    Tensor<T> out = val(x);
    for (auto& v : out.vec()) v *= c;
    return unary_raw(std::move(out), x, [c](const Tensor<T>&, const Tensor<T>& g,
                                            Tensor<T>& gx) {
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += c * g[i];
    });
  }

  Val add_scalar(Val x, T c) {
    Tensor<T> out = val(x);
    for (auto& v : out.vec()) v += c;
    return unary_raw(std::move(out), x, [](const Tensor<T>&, const Tensor<T>& g,
                                           Tensor<T>& gx) {
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
  }

  // ---- activations (gradients derived from the stored output) -------------

  Val relu(Val x) {
    Tensor<T> out = val(x);
    for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
    return unary_from_out(std::move(out), x, [](T y, T g) { return y > T(0) ? g : T(0); });
  }

  Val leaky_relu(Val x, T slope) {
    Tensor<T> out = val(x);
    for (auto& v : out.vec()) v = v > T(0) ? v : slope * v;
    return unary_from_out(std::move(out), x,
                          [slope](T y, T g) { return y > T(0) ? g : slope * g; });
  }

  Val tanh_act(Val x) {
    Tensor<T> out = val(x);
    for (auto& v : out.vec()) v = std::tanh(v);
    return unary_from_out(std::move(out), x, [](T y, T g) { return g * (T(1) - y * y); });
  }

  Val sigmoid(Val x) {
    Tensor<T> out = val(x);
    for (auto& v : out.vec()) v = sigmoid_scalar(v);
    return unary_from_out(std::move(out), x, [](T y, T g) { return g * y * (T(1) - y); });
  }

  Val exp_act(Val x) {
    Tensor<T> out = val(x);
    for (auto& v : out.vec()) v = std::exp(v);
    return unary_from_out(std::move(out), x, [](T y, T g) { return g * y; });
  }

  // log(sigmoid(x)), computed in the numerically stable split form.
  Val log_sigmoid(Val x) {
    Tensor<T> out = val(x);
    for (auto& v : out.vec()) {
      v = v >= T(0) ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
    }
    return unary_from_out(std::move(out), x,
                          [](T y, T g) { return g * (T(1) - std::exp(y)); });
  }

  // ---- linear algebra ------------------------------------------------------

  // C = op(A) * op(B) with 2-D inputs; op transposes when the flag is set.
  Val matmul(Val a, Val b, bool trans_a = false, bool trans_b = false) {
    const Tensor<T>& ta = val(a);
    const Tensor<T>& tb = val(b);
    SV_CHECK(ta.rank() == 2 && tb.rank() == 2, "matmul expects 2-D tensors");
    const int64_t m = trans_a ? ta.dim(1) : ta.dim(0);
    const int64_t k = trans_a ? ta.dim(0) : ta.dim(1);
    const int64_t kb = trans_b ? tb.dim(1) : tb.dim(0);
    const int64_t n = trans_b ? tb.dim(0) : tb.dim(1);
    SV_CHECK(k == kb, "matmul inner dims differ: ", k, " vs ", kb);
    Tensor<T> out({m, n});
    gemm<T>(trans_a, trans_b, m, n, k, T(1), ta.data(), tb.data(), T(0), out.data());
    Val o = make(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
    node(o).pull = [this, a, b, o, trans_a, trans_b, m, n, k](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      if (t.needs_grad(a)) {
        Tensor<T>& ga = t.grad_buf(a);
        if (!trans_a) {
          gemm<T>(false, !trans_b, m, k, n, T(1), g.data(), t.val(b).data(), T(1),
                  ga.data());
        } else {
          gemm<T>(trans_b, true, k, m, n, T(1), t.val(b).data(), g.data(), T(1),
                  ga.data());
        }
      }
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_buf(b);
        if (!trans_b) {
          gemm<T>(!trans_a, false, k, n, m, T(1), t.val(a).data(), g.data(), T(1),
                  gb.data());
        } else {
          gemm<T>(true, trans_a, n, k, m, T(1), g.data(), t.val(a).data(), T(1),
                  gb.data());
        }
      }
    };
    return o;
  }

  // y = x + v broadcast over rows; x is [B, F], v is [F].
  Val add_rowvec(Val x, Val v) {
    const Tensor<T>& tx = val(x);
    const Tensor<T>& tv = val(v);
    SV_CHECK(tx.rank() == 2 && tv.rank() == 1 && tx.dim(1) == tv.dim(0),
             "add_rowvec shape mismatch");
    Tensor<T> out = tx;
    const int64_t rows = tx.dim(0), cols = tx.dim(1);
    for (int64_t r = 0; r < rows; ++r) {
      T* po = out.data() + r * cols;
      const T* pv = tv.data();
      for (int64_t c = 0; c < cols; ++c) po[c] += pv[c];
    }
    Val o = make(std::move(out), needs_grad(x) || needs_grad(v), nullptr);
    node(o).pull = [this, x, v, o, rows, cols](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      if (t.needs_grad(x)) {
        Tensor<T>& gx = t.grad_buf(x);
        for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      }
      if (t.needs_grad(v)) {
        Tensor<T>& gv = t.grad_buf(v);
        for (int64_t r = 0; r < rows; ++r) {
          const T* pg = g.data() + r * cols;
          for (int64_t c = 0; c < cols; ++c) gv[c] += pg[c];
        }
      }
    };
    return o;
  }

  // ---- shape ops -----------------------------------------------------------

  Val reshape(Val x, Shape new_shape) {
    Tensor<T> out = val(x).reshaped(std::move(new_shape));
    return unary_raw(std::move(out), x, [](const Tensor<T>&, const Tensor<T>& g,
                                           Tensor<T>& gx) {
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
  }

  // Concatenates [B, F_i] blocks along the feature axis.
  Val concat_cols(const std::vector<Val>& parts) {
    SV_CHECK(!parts.empty(), "concat_cols with no inputs");
    const int64_t rows = val(parts[0]).dim(0);
    int64_t total = 0;
    bool rg = false;
    for (Val p : parts) {
      SV_CHECK(val(p).rank() == 2 && val(p).dim(0) == rows, "concat_cols shape mismatch");
      total += val(p).dim(1);
      rg = rg || needs_grad(p);
    }
    Tensor<T> out({rows, total});
    int64_t off = 0;
    for (Val p : parts) {
      const Tensor<T>& tp = val(p);
      const int64_t f = tp.dim(1);
      for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.data() + r * total + off, tp.data() + r * f, sizeof(T) * f);
      }
      off += f;
    }
    Val o = make(std::move(out), rg, nullptr);
    std::vector<Val> parts_copy = parts;
    node(o).pull = [this, parts_copy, o, rows, total](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      int64_t off = 0;
      for (Val p : parts_copy) {
        const int64_t f = t.val(p).dim(1);
        if (t.needs_grad(p)) {
          Tensor<T>& gp = t.grad_buf(p);
          for (int64_t r = 0; r < rows; ++r) {
            const T* src = g.data() + r * total + off;
            T* dst = gp.data() + r * f;
            for (int64_t c = 0; c < f; ++c) dst[c] += src[c];
          }
        }
        off += f;
      }
    };
    return o;
  }

  // Stacks [B_i, F] blocks along the row axis (same F).
  Val stack_rows(const std::vector<Val>& parts) {
    SV_CHECK(!parts.empty(), "stack_rows with no inputs");
    const int64_t f = val(parts[0]).dim(1);
    int64_t rows = 0;
    bool rg = false;
    for (Val p : parts) {
      SV_CHECK(val(p).rank() == 2 && val(p).dim(1) == f, "stack_rows shape mismatch");
      rows += val(p).dim(0);
      rg = rg || needs_grad(p);
    }
    Tensor<T> out({rows, f});
    int64_t off = 0;
    for (Val p : parts) {
      const Tensor<T>& tp = val(p);
      std::memcpy(out.data() + off * f, tp.data(), sizeof(T) * tp.numel());
      off += tp.dim(0);
    }
    Val o = make(std::move(out), rg, nullptr);
    std::vector<Val> parts_copy = parts;
    node(o).pull = [this, parts_copy, o, f](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      int64_t off = 0;
      for (Val p : parts_copy) {
        const int64_t n = t.val(p).numel();
        if (t.needs_grad(p)) {
          Tensor<T>& gp = t.grad_buf(p);
          const T* src = g.data() + off;
          for (int64_t i = 0; i < n; ++i) gp[i] += src[i];
        }
        off += n;
      }
    };
    return o;
  }

  // Concatenates [B, C_i, H, W] blocks along the channel axis.
  Val concat_channels(Val a, Val b) {
    const Tensor<T>& ta = val(a);
    const Tensor<T>& tb = val(b);
    SV_CHECK(ta.rank() == 4 && tb.rank() == 4 && ta.dim(0) == tb.dim(0) &&
                 ta.dim(2) == tb.dim(2) && ta.dim(3) == tb.dim(3),
             "concat_channels shape mismatch");
    const int64_t batch = ta.dim(0), ca = ta.dim(1), cb = tb.dim(1);
    const int64_t hw = ta.dim(2) * ta.dim(3);
    Tensor<T> out({batch, ca + cb, ta.dim(2), ta.dim(3)});
    for (int64_t n = 0; n < batch; ++n) {
      std::memcpy(out.data() + n * (ca + cb) * hw, ta.data() + n * ca * hw,
                  sizeof(T) * ca * hw);
      std::memcpy(out.data() + (n * (ca + cb) + ca) * hw, tb.data() + n * cb * hw,
                  sizeof(T) * cb * hw);
    }
    Val o = make(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
    node(o).pull = [this, a, b, o, batch, ca, cb, hw](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      if (t.needs_grad(a)) {
        Tensor<T>& ga = t.grad_buf(a);
        for (int64_t n = 0; n < batch; ++n) {
          const T* src = g.data() + n * (ca + cb) * hw;
          T* dst = ga.data() + n * ca * hw;
          for (int64_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
        }
      }
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_buf(b);
        for (int64_t n = 0; n < batch; ++n) {
          const T* src = g.data() + (n * (ca + cb) + ca) * hw;
          T* dst = gb.data() + n * cb * hw;
          for (int64_t i = 0; i < cb * hw; ++i) dst[i] += src[i];
        }
      }
    };
    return o;
  }

  // Selects rows of a [R, F] matrix; duplicate indices accumulate in backward.
  Val gather_rows(Val x, std::vector<int64_t> idx) {
    const Tensor<T>& tx = val(x);
    SV_CHECK(tx.rank() == 2, "gather_rows expects a matrix");
    const int64_t f = tx.dim(1);
    Tensor<T> out({static_cast<int64_t>(idx.size()), f});
    for (size_t r = 0; r < idx.size(); ++r) {
      SV_CHECK(idx[r] >= 0 && idx[r] < tx.dim(0), "gather_rows index out of range");
      std::memcpy(out.data() + r * f, tx.data() + idx[r] * f, sizeof(T) * f);
    }
    Val o = make(std::move(out), needs_grad(x), nullptr);
    node(o).pull = [this, x, o, idx = std::move(idx), f](Tape& t) {
      if (!t.needs_grad(x)) return;
      const Tensor<T>& g = t.node(o).grad;
      Tensor<T>& gx = t.grad_buf(x);
      for (size_t r = 0; r < idx.size(); ++r) {
        const T* src = g.data() + r * f;
        T* dst = gx.data() + idx[r] * f;
        for (int64_t c = 0; c < f; ++c) dst[c] += src[c];
      }
    };
    return o;
  }

  // Broadcasts [B, F] features to a [B, F, H, W] map (constant over space).
  Val replicate_hw(Val x, int64_t h, int64_t w) {
    const Tensor<T>& tx = val(x);
    SV_CHECK(tx.rank() == 2, "replicate_hw expects [B, F]");
    const int64_t batch = tx.dim(0), f = tx.dim(1), hw = h * w;
    Tensor<T> out({batch, f, h, w});
    for (int64_t n = 0; n < batch; ++n) {
      for (int64_t c = 0; c < f; ++c) {
        const T v = tx[n * f + c];
        T* dst = out.data() + (n * f + c) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = v;
      }
    }
    Val o = make(std::move(out), needs_grad(x), nullptr);
    node(o).pull = [this, x, o, batch, f, hw](Tape& t) {
      if (!t.needs_grad(x)) return;
      const Tensor<T>& g = t.node(o).grad;
      Tensor<T>& gx = t.grad_buf(x);
      for (int64_t n = 0; n < batch; ++n) {
        for (int64_t c = 0; c < f; ++c) {
          const T* src = g.data() + (n * f + c) * hw;
          T acc = T(0);
          for (int64_t i = 0; i < hw; ++i) acc += src[i];
          gx[n * f + c] += acc;
        }
      }
    };
    return o;
  }

  // Nearest-neighbour 2x upsampling of [B, C, H, W].
  Val upsample2x(Val x) {
    const Tensor<T>& tx = val(x);
    SV_CHECK(tx.rank() == 4, "upsample2x expects [B, C, H, W]");
    const int64_t bc = tx.dim(0) * tx.dim(1), h = tx.dim(2), w = tx.dim(3);
    Tensor<T> out({tx.dim(0), tx.dim(1), 2 * h, 2 * w});
    for (int64_t p = 0; p < bc; ++p) {
      const T* src = tx.data() + p * h * w;
      T* dst = out.data() + p * 4 * h * w;
      for (int64_t y = 0; y < h; ++y) {
        T* row0 = dst + (2 * y) * 2 * w;
        T* row1 = dst + (2 * y + 1) * 2 * w;
        const T* srow = src + y * w;
        for (int64_t xcol = 0; xcol < w; ++xcol) {
          row0[2 * xcol] = row0[2 * xcol + 1] = srow[xcol];
        }
        std::memcpy(row1, row0, sizeof(T) * 2 * w);
      }
    }
    Val o = make(std::move(out), needs_grad(x), nullptr);
    node(o).pull = [this, x, o, bc, h, w](Tape& t) {
      if (!t.needs_grad(x)) return;
      const Tensor<T>& g = t.node(o).grad;
      Tensor<T>& gx = t.grad_buf(x);
      for (int64_t p = 0; p < bc; ++p) {
        const T* src = g.data() + p * 4 * h * w;
        T* dst = gx.data() + p * h * w;
        for (int64_t y = 0; y < h; ++y) {
          const T* row0 = src + (2 * y) * 2 * w;
          const T* row1 = src + (2 * y + 1) * 2 * w;
          for (int64_t xcol = 0; xcol < w; ++xcol) {
            dst[y * w + xcol] += row0[2 * xcol] + row0[2 * xcol + 1] +
                                 row1[2 * xcol] + row1[2 * xcol + 1];
          }
        }
      }
    };
    return o;
  }

  // ---- convolution ---------------------------------------------------------

  // 2-D cross-correlation with zero padding: x [B, Ci, H, W], w [Co, Ci, Kh, Kw].
  // Lowered to GEMM via im2col; images are processed in chunks so the column
  // buffer stays within a fixed memory budget, and backward re-builds the
  // columns instead of keeping them alive.
  Val conv2d(Val x, Val w, Val bias, int64_t stride, int64_t pad) {
    const Tensor<T>& tx = val(x);
    const Tensor<T>& tw = val(w);
    SV_CHECK(tx.rank() == 4 && tw.rank() == 4, "conv2d expects 4-D tensors");
    const int64_t batch = tx.dim(0), ci = tx.dim(1), h = tx.dim(2), wd = tx.dim(3);
    const int64_t co = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
    SV_CHECK(tw.dim(1) == ci, "conv2d channel mismatch: ", tw.dim(1), " vs ", ci);
    SV_CHECK(stride >= 1 && pad >= 0, "conv2d bad stride/pad");
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    SV_CHECK(ho >= 1 && wo >= 1, "conv2d output would be empty");
    const int64_t k = ci * kh * kw, p = ho * wo;
    const int64_t chunk = std::min(batch, col_chunk(k, p));

    Tensor<T> out({batch, co, ho, wo});
    {
      T* col = scratch(0, k * chunk * p);
      T* prod = scratch(1, co * chunk * p);
      for (int64_t b0 = 0; b0 < batch; b0 += chunk) {
        const int64_t bn = std::min(chunk, batch - b0);
        for (int64_t b = 0; b < bn; ++b) {
          im2col(tx.data() + (b0 + b) * ci * h * wd, ci, h, wd, kh, kw, stride, pad,
                 ho, wo, col + b * p, bn * p);
        }
        gemm<T>(false, false, co, bn * p, k, T(1), tw.data(), col, T(0), prod);
        // prod rows are [co, bn*p] with images interleaved along columns.
        for (int64_t b = 0; b < bn; ++b) {
          for (int64_t c = 0; c < co; ++c) {
            std::memcpy(out.data() + ((b0 + b) * co + c) * p,
                        prod + c * bn * p + b * p, sizeof(T) * p);
          }
        }
      }
    }
    if (bias.valid()) {
      const Tensor<T>& tb = val(bias);
      SV_CHECK(tb.rank() == 1 && tb.dim(0) == co, "conv2d bias shape mismatch");
      for (int64_t n = 0; n < batch; ++n) {
        for (int64_t c = 0; c < co; ++c) {
          T* dst = out.data() + (n * co + c) * p;
          const T bv = tb[c];
          for (int64_t i = 0; i < p; ++i) dst[i] += bv;
        }
      }
    }

    const bool rg = needs_grad(x) || needs_grad(w) || (bias.valid() && needs_grad(bias));
    Val o = make(std::move(out), rg, nullptr);
    node(o).pull = [this, x, w, bias, o, stride, pad, batch, ci, h, wd, co, kh, kw,
                    ho, wo, k, p, chunk](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      const Tensor<T>& tx = t.val(x);
      const Tensor<T>& tw = t.val(w);
      if (bias.valid() && t.needs_grad(bias)) {
        Tensor<T>& gb = t.grad_buf(bias);
        for (int64_t n = 0; n < batch; ++n) {
          for (int64_t c = 0; c < co; ++c) {
            const T* src = g.data() + (n * co + c) * p;
            T acc = T(0);
            for (int64_t i = 0; i < p; ++i) acc += src[i];
            gb[c] += acc;
          }
        }
      }
      const bool need_x = t.needs_grad(x);
      const bool need_w = t.needs_grad(w);
      if (!need_x && !need_w) return;
      T* col = scratch(0, k * chunk * p);
      T* gout = scratch(1, co * chunk * p);
      T* gcol = need_x ? scratch(2, k * chunk * p) : nullptr;
      Tensor<T>* gw = need_w ? &t.grad_buf(w) : nullptr;
      Tensor<T>* gx = need_x ? &t.grad_buf(x) : nullptr;
      for (int64_t b0 = 0; b0 < batch; b0 += chunk) {
        const int64_t bn = std::min(chunk, batch - b0);
        for (int64_t b = 0; b < bn; ++b) {
          for (int64_t c = 0; c < co; ++c) {
            std::memcpy(gout + c * bn * p + b * p,
                        g.data() + ((b0 + b) * co + c) * p, sizeof(T) * p);
          }
        }
        if (need_w) {
          for (int64_t b = 0; b < bn; ++b) {
            im2col(tx.data() + (b0 + b) * ci * h * wd, ci, h, wd, kh, kw, stride,
                   pad, ho, wo, col + b * p, bn * p);
          }
          gemm<T>(false, true, co, k, bn * p, T(1), gout, col, T(1), gw->data());
        }
        if (need_x) {
          gemm<T>(true, false, k, bn * p, co, T(1), tw.data(), gout, T(0), gcol);
          for (int64_t b = 0; b < bn; ++b) {
            col2im(gcol + b * p, bn * p, ci, h, wd, kh, kw, stride, pad,
                   ho, wo, gx->data() + (b0 + b) * ci * h * wd);
          }
        }
      }
    };
    return o;
  }

  // Per-sample dynamic 1-D convolution ("same" zero padding): out[b,c,q] =
  // sum_k filt[b,c,k] * sig[b, q + k - pad_left]. Differentiable in both the
  // signal and the filters.
  Val dynamic_conv1d(Val signal, Val filters, int64_t pad_left) {
    const Tensor<T>& ts = val(signal);
    const Tensor<T>& tf = val(filters);
    SV_CHECK(ts.rank() == 2 && tf.rank() == 3 && ts.dim(0) == tf.dim(0),
             "dynamic_conv1d shape mismatch");
    const int64_t batch = ts.dim(0), len = ts.dim(1);
    const int64_t ch = tf.dim(1), klen = tf.dim(2);
    Tensor<T> out({batch, ch, len});
    for (int64_t b = 0; b < batch; ++b) {
      const T* sig = ts.data() + b * len;
      for (int64_t c = 0; c < ch; ++c) {
        const T* f = tf.data() + (b * ch + c) * klen;
        T* dst = out.data() + (b * ch + c) * len;
        for (int64_t q = 0; q < len; ++q) {
          T acc = T(0);
          const int64_t k_lo = std::max<int64_t>(0, pad_left - q);
          const int64_t k_hi = std::min(klen, len + pad_left - q);
          for (int64_t kk = k_lo; kk < k_hi; ++kk) acc += f[kk] * sig[q + kk - pad_left];
          dst[q] = acc;
        }
      }
    }
    Val o = make(std::move(out), needs_grad(signal) || needs_grad(filters), nullptr);
    node(o).pull = [this, signal, filters, o, pad_left, batch, len, ch, klen](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      const Tensor<T>& ts = t.val(signal);
      const Tensor<T>& tf = t.val(filters);
      const bool need_s = t.needs_grad(signal);
      const bool need_f = t.needs_grad(filters);
      Tensor<T>* gs = need_s ? &t.grad_buf(signal) : nullptr;
      Tensor<T>* gf = need_f ? &t.grad_buf(filters) : nullptr;
      for (int64_t b = 0; b < batch; ++b) {
        const T* sig = ts.data() + b * len;
        for (int64_t c = 0; c < ch; ++c) {
          const T* f = tf.data() + (b * ch + c) * klen;
          const T* go = g.data() + (b * ch + c) * len;
          for (int64_t q = 0; q < len; ++q) {
            const T gq = go[q];
            if (gq == T(0)) continue;
            const int64_t k_lo = std::max<int64_t>(0, pad_left - q);
            const int64_t k_hi = std::min(klen, len + pad_left - q);
            for (int64_t kk = k_lo; kk < k_hi; ++kk) {
              const int64_t s_idx = q + kk - pad_left;
              if (need_f) (*gf)[(b * ch + c) * klen + kk] += gq * sig[s_idx];
              if (need_s) (*gs)[b * len + s_idx] += gq * f[kk];
            }
          }
        }
      }
    };
    return o;
  }

  // ---- batch normalisation ---------------------------------------------------

  // Normalises over the batch axis ([B, F]) or batch and spatial axes
  // ([B, C, H, W]). In training mode batch statistics are used and running
  // estimates updated in place; in inference mode the running estimates are
  // used. Variance uses the biased (1/N) estimator for normalisation and the
  // unbiased one for the running estimate.
  Val batchnorm(Val x, Val gamma, Val beta, Tensor<T>& running_mean,
                Tensor<T>& running_var, T momentum, T eps, bool training) {
    const Tensor<T>& tx = val(x);
    SV_CHECK(tx.rank() == 2 || tx.rank() == 4, "batchnorm expects 2-D or 4-D input");
    const int64_t f = tx.rank() == 2 ? tx.dim(1) : tx.dim(1);
    const int64_t n_per_f = tx.numel() / f;
    SV_CHECK(val(gamma).numel() == f && val(beta).numel() == f &&
                 running_mean.numel() == f && running_var.numel() == f,
             "batchnorm parameter size mismatch");

    Tensor<T> mean({f});
    Tensor<T> invstd({f});
    if (training) {
      SV_CHECK(n_per_f > 1, "batchnorm training needs more than one sample per feature");
      accumulate_stats(tx, f, mean, invstd, eps);
      for (int64_t c = 0; c < f; ++c) {
        const T var_b = T(1) / (invstd[c] * invstd[c]) - eps;
        const T var_u = var_b * static_cast<T>(n_per_f) / static_cast<T>(n_per_f - 1);
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[c];
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var_u;
      }
    } else {
      for (int64_t c = 0; c < f; ++c) {
        mean[c] = running_mean[c];
        invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
      }
    }

    Tensor<T> xhat(tx.shape());
    apply_norm(tx, f, mean, invstd, xhat);
    Tensor<T> out(tx.shape());
    {
      const Tensor<T>& tg = val(gamma);
      const Tensor<T>& tb = val(beta);
      for_each_feature(out, f, [&](int64_t c, T* dst, const int64_t* idx, int64_t cnt) {
        const T gm = tg[c], bt = tb[c];
        for (int64_t i = 0; i < cnt; ++i) dst[idx[i]] = gm * xhat[idx[i]] + bt;
      });
    }

    const bool rg = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    Val o = make(std::move(out), rg, nullptr);
    auto xhat_ptr = std::make_shared<Tensor<T>>(std::move(xhat));
    auto invstd_ptr = std::make_shared<Tensor<T>>(std::move(invstd));
    node(o).pull = [this, x, gamma, beta, o, f, n_per_f, training, xhat_ptr,
                    invstd_ptr](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      const Tensor<T>& xh = *xhat_ptr;
      const Tensor<T>& is = *invstd_ptr;
      const Tensor<T>& tg = t.val(gamma);
      // Per-feature reductions of dy and dy*xhat feed all three gradients.
      Tensor<T> sum_dy({f});
      Tensor<T> sum_dy_xhat({f});
      reduce_dy(g, xh, f, sum_dy, sum_dy_xhat);
      if (t.needs_grad(beta)) {
        Tensor<T>& gb = t.grad_buf(beta);
        for (int64_t c = 0; c < f; ++c) gb[c] += sum_dy[c];
      }
      if (t.needs_grad(gamma)) {
        Tensor<T>& gg = t.grad_buf(gamma);
        for (int64_t c = 0; c < f; ++c) gg[c] += sum_dy_xhat[c];
      }
      if (t.needs_grad(x)) {
        Tensor<T>& gx = t.grad_buf(x);
        const T inv_n = T(1) / static_cast<T>(n_per_f);
        if (training) {
          for_each_feature_const(g, f, [&](int64_t c, const T* gsrc,
                                           const int64_t* idx, int64_t cnt) {
            const T k = tg[c] * is[c];
            const T m_dy = sum_dy[c] * inv_n;
            const T m_dyx = sum_dy_xhat[c] * inv_n;
            for (int64_t i = 0; i < cnt; ++i) {
              gx[idx[i]] += k * (gsrc[idx[i]] - m_dy - xh[idx[i]] * m_dyx);
            }
          });
        } else {
          for_each_feature_const(g, f, [&](int64_t c, const T* gsrc,
                                           const int64_t* idx, int64_t cnt) {
            const T k = tg[c] * is[c];
            for (int64_t i = 0; i < cnt; ++i) gx[idx[i]] += k * gsrc[idx[i]];
          });
        }
      }
    };
    return o;
  }

  // ---- reductions ------------------------------------------------------------

  Val sum_all(Val x) {
    const Tensor<T>& tx = val(x);
    T acc = T(0);
    for (int64_t i = 0; i < tx.numel(); ++i) acc += tx[i];
    Tensor<T> out({1});
    out[0] = acc;
    return unary_raw(std::move(out), x, [](const Tensor<T>&, const Tensor<T>& g,
                                           Tensor<T>& gx) {
      const T gv = g[0];
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
    });
  }

  Val mean_all(Val x) {
    const int64_t n = val(x).numel();
    return scale(sum_all(x), T(1) / static_cast<T>(n));
  }

  // ---- backward ---------------------------------------------------------------

  void backward(Val loss) {
    SV_CHECK(loss.valid() && val(loss).numel() == 1, "backward needs a scalar loss");
    grad_buf(loss).fill(T(1));
    for (int32_t i = loss.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.requires_grad && n.grad_alloc && n.pull) n.pull(*this);
    }
  }

  bool needs_grad(Val v) const { return node(v).requires_grad; }

  Tensor<T>& grad_buf(Val v) {
    Node& n = node(v);
    if (!n.grad_alloc) {
      n.grad = Tensor<T>::zeros(n.value.shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::function<void(Tape&)> pull;
  };

  Node& node(Val v) {
    SV_CHECK(v.valid() && v.i < static_cast<int32_t>(nodes_.size()), "bad tape handle");
    return nodes_[static_cast<size_t>(v.i)];
  }
  const Node& node(Val v) const {
    SV_CHECK(v.valid() && v.i < static_cast<int32_t>(nodes_.size()), "bad tape handle");
    return nodes_[static_cast<size_t>(v.i)];
  }

  Val make(Tensor<T> value, bool requires_grad, std::function<void(Tape&)> pull) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, false,
                          std::move(pull)});
    return Val{static_cast<int32_t>(nodes_.size() - 1)};
  }

  template <typename FnA, typename FnB>
  Val binary_ew(Tensor<T> out, Val a, Val b, FnA dfa, FnB dfb) {
    Val o = make(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
    node(o).pull = [this, a, b, o, dfa, dfb](Tape& t) {
      const Tensor<T>& g = t.node(o).grad;
      const Tensor<T>& va = t.val(a);
      const Tensor<T>& vb = t.val(b);
      if (t.needs_grad(a)) {
        Tensor<T>& ga = t.grad_buf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += dfa(va[i], vb[i], g[i]);
      }
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_buf(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += dfb(va[i], vb[i], g[i]);
      }
    };
    return o;
  }

  template <typename Fn>
  Val unary_from_out(Tensor<T> out, Val x, Fn dfn) {
    Val o = make(std::move(out), needs_grad(x), nullptr);
    node(o).pull = [this, x, o, dfn](Tape& t) {
      if (!t.needs_grad(x)) return;
      const Tensor<T>& g = t.node(o).grad;
      const Tensor<T>& y = t.val(o);
      Tensor<T>& gx = t.grad_buf(x);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += dfn(y[i], g[i]);
    };
    return o;
  }

  template <typename Fn>
  Val unary_raw(Tensor<T> out, Val x, Fn pull_fn) {
    Val o = make(std::move(out), needs_grad(x), nullptr);
    node(o).pull = [this, x, o, pull_fn](Tape& t) {
      if (!t.needs_grad(x)) return;
      pull_fn(t.val(x), t.node(o).grad, t.grad_buf(x));
    };
    return o;
  }

  static T sigmoid_scalar(T v) {
    if (v >= T(0)) {
      const T e = std::exp(-v);
      return T(1) / (T(1) + e);
    }
    const T e = std::exp(v);
    return e / (T(1) + e);
  }

  // Chunk size keeping the im2col buffer near 64 MB.
  static int64_t col_chunk(int64_t k, int64_t p) {
    const int64_t budget = 64ll * 1024 * 1024 / static_cast<int64_t>(sizeof(T));
    return std::max<int64_t>(1, budget / std::max<int64_t>(1, k * p));
  }

  // Reusable per-thread scratch for the conv2d lowering buffers. Every user
  // overwrites the region it asks for in full, so stale contents are never
  // observed; reuse avoids re-zeroing tens of megabytes on each call.
  static T* scratch(size_t slot, int64_t n) {
    static thread_local std::array<std::vector<T>, 3> bufs;
    auto& b = bufs[slot];
    if (static_cast<int64_t>(b.size()) < n) b.resize(static_cast<size_t>(n));
    return b.data();
  }

  // Writes one image's patch matrix into col with row stride col_stride,
  // starting at column offset 0 of the caller-provided pointer.
  static void im2col(const T* img, int64_t ci, int64_t h, int64_t w, int64_t kh,
                     int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
                     T* col, int64_t col_stride) {
    for (int64_t c = 0; c < ci; ++c) {
      for (int64_t ki = 0; ki < kh; ++ki) {
        for (int64_t kj = 0; kj < kw; ++kj) {
          T* row = col + ((c * kh + ki) * kw + kj) * col_stride;
          const T* src_plane = img + c * h * w;
          for (int64_t y = 0; y < ho; ++y) {
            const int64_t sy = y * stride + ki - pad;
            T* dst = row + y * wo;
            if (sy < 0 || sy >= h) {
              std::memset(dst, 0, sizeof(T) * wo);
              continue;
            }
            const T* srow = src_plane + sy * w;
            if (stride == 1) {
              const int64_t sx0 = kj - pad;
              int64_t x_lo = std::max<int64_t>(0, -sx0);
              int64_t x_hi = std::min(wo, w - sx0);
              if (x_lo > 0) std::memset(dst, 0, sizeof(T) * std::min(x_lo, wo));
              if (x_hi > x_lo) {
                std::memcpy(dst + x_lo, srow + sx0 + x_lo, sizeof(T) * (x_hi - x_lo));
              }
              if (x_hi < wo) {
                std::memset(dst + std::max(x_hi, int64_t(0)), 0,
                            sizeof(T) * (wo - std::max(x_hi, int64_t(0))));
              }
            } else {
              for (int64_t xcol = 0; xcol < wo; ++xcol) {
                const int64_t sx = xcol * stride + kj - pad;
                dst[xcol] = (sx >= 0 && sx < w) ? srow[sx] : T(0);
              }
            }
          }
        }
      }
    }
  }

  // Scatter-adds one image's column gradients back into the image gradient.
  static void col2im(const T* col, int64_t col_stride, int64_t ci, int64_t h,
                     int64_t w, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                     int64_t ho, int64_t wo, T* gimg) {
    for (int64_t c = 0; c < ci; ++c) {
      for (int64_t ki = 0; ki < kh; ++ki) {
        for (int64_t kj = 0; kj < kw; ++kj) {
          const T* row = col + ((c * kh + ki) * kw + kj) * col_stride;
          T* dst_plane = gimg + c * h * w;
          for (int64_t y = 0; y < ho; ++y) {
            const int64_t sy = y * stride + ki - pad;
            if (sy < 0 || sy >= h) continue;
            const T* srow = row + y * wo;
            T* drow = dst_plane + sy * w;
            for (int64_t xcol = 0; xcol < wo; ++xcol) {
              const int64_t sx = xcol * stride + kj - pad;
              if (sx >= 0 && sx < w) drow[sx] += srow[xcol];
            }
          }
        }
      }
    }
  }

  // Iterates features of a 2-D or 4-D tensor. The index list for a feature is
  // materialised lazily per call; shapes here are small enough that the
  // simple version wins on clarity.
  template <typename Fn>
  static void for_each_feature(Tensor<T>& t, int64_t f, Fn fn) {
    feature_loop(t.shape(), f, [&](int64_t c, const std::vector<int64_t>& idx) {
      fn(c, t.data(), idx.data(), static_cast<int64_t>(idx.size()));
    });
  }

  template <typename Fn>
  static void for_each_feature_const(const Tensor<T>& t, int64_t f, Fn fn) {
    feature_loop(t.shape(), f, [&](int64_t c, const std::vector<int64_t>& idx) {
      fn(c, t.data(), idx.data(), static_cast<int64_t>(idx.size()));
    });
  }

  template <typename Fn>
  static void feature_loop(const Shape& shape, int64_t f, Fn fn) {
    std::vector<int64_t> idx;
    if (shape.size() == 2) {
      const int64_t b = shape[0];
      idx.resize(static_cast<size_t>(b));
      for (int64_t c = 0; c < f; ++c) {
        for (int64_t n = 0; n < b; ++n) idx[static_cast<size_t>(n)] = n * f + c;
        fn(c, idx);
      }
    } else {
      const int64_t b = shape[0], hw = shape[2] * shape[3];
      idx.resize(static_cast<size_t>(b * hw));
      for (int64_t c = 0; c < f; ++c) {
        size_t k = 0;
        for (int64_t n = 0; n < b; ++n) {
          const int64_t base = (n * f + c) * hw;
          for (int64_t i = 0; i < hw; ++i) idx[k++] = base + i;
        }
        fn(c, idx);
      }
    }
  }

  static void accumulate_stats(const Tensor<T>& x, int64_t f, Tensor<T>& mean,
                               Tensor<T>& invstd, T eps) {
    const int64_t n_per_f = x.numel() / f;
    feature_loop(x.shape(), f, [&](int64_t c, const std::vector<int64_t>& idx) {
      T m = T(0);
      for (int64_t i : idx) m += x[i];
      m /= static_cast<T>(n_per_f);
      T v = T(0);
      for (int64_t i : idx) {
        const T d = x[i] - m;
        v += d * d;
      }
      v /= static_cast<T>(n_per_f);
      mean[c] = m;
      invstd[c] = T(1) / std::sqrt(v + eps);
    });
  }

  static void apply_norm(const Tensor<T>& x, int64_t f, const Tensor<T>& mean,
                         const Tensor<T>& invstd, Tensor<T>& xhat) {
    feature_loop(x.shape(), f, [&](int64_t c, const std::vector<int64_t>& idx) {
      const T m = mean[c], is = invstd[c];
      for (int64_t i : idx) xhat[i] = (x[i] - m) * is;
    });
  }

  static void reduce_dy(const Tensor<T>& g, const Tensor<T>& xhat, int64_t f,
                        Tensor<T>& sum_dy, Tensor<T>& sum_dy_xhat) {
    feature_loop(g.shape(), f, [&](int64_t c, const std::vector<int64_t>& idx) {
      T s = T(0), sx = T(0);
      for (int64_t i : idx) {
        s += g[i];
        sx += g[i] * xhat[i];
      }
      sum_dy[c] = s;
      sum_dy_xhat[c] = sx;
    });
  }

  std::vector<Node> nodes_;
};

template <typename T>
using Val = typename Tape<T>::Val;

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace storyviz
