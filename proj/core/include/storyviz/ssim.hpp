#pragma once

#include <array>
#include <cmath>

#include "storyviz/tensor.hpp"

namespace storyviz {

// Single-scale SSIM on luminance: frames in [-1,1] are averaged over RGB and
// mapped to [0,1] (L = 1), then compared with the canonical 11x11 Gaussian
// window (sigma = 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2, averaged over all
// fully-inside window positions.

namespace ssim_detail {

inline constexpr int kWindow = 11;
inline constexpr double kSigma = 1.5;
inline constexpr double kC1 = 0.01 * 0.01;
inline constexpr double kC2 = 0.03 * 0.03;

inline const std::array<double, kWindow>& gaussian_taps() {
  static const std::array<double, kWindow> taps = [] {
    std::array<double, kWindow> t{};
    double sum = 0;
    for (int i = 0; i < kWindow; ++i) {
      const double d = i - (kWindow - 1) / 2.0;
      t[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
      sum += t[i];
    }
    for (auto& v : t) v /= sum;
    return t;
  }();
  return taps;
}

inline TensorD luminance(const TensorF& frame) {
  SV_CHECK(frame.rank() == 3 && frame.dim(0) == 3, "ssim: expected [3,H,W] frame");
  const int64_t h = frame.dim(1), w = frame.dim(2);
  TensorD lum({h, w});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double mean = (frame.at({0, y, x}) + frame.at({1, y, x}) +
                           frame.at({2, y, x})) / 3.0;
      lum.at({y, x}) = (mean + 1.0) / 2.0;
    }
  }
  return lum;
}

// Separable Gaussian filtering restricted to valid rows/cols.
inline TensorD filter_valid(const TensorD& img) {
  const auto& taps = gaussian_taps();
  const int64_t h = img.dim(0), w = img.dim(1);
  const int64_t vw = w - kWindow + 1, vh = h - kWindow + 1;
  SV_CHECK(vw > 0 && vh > 0, "ssim: image smaller than the window");
  TensorD rows({h, vw});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < vw; ++x) {
      double acc = 0;
      for (int k = 0; k < kWindow; ++k) acc += taps[k] * img.at({y, x + k});
      rows.at({y, x}) = acc;
    }
  }
  TensorD out({vh, vw});
  for (int64_t y = 0; y < vh; ++y) {
    for (int64_t x = 0; x < vw; ++x) {
      double acc = 0;
      for (int k = 0; k < kWindow; ++k) acc += taps[k] * rows.at({y + k, x});
      out.at({y, x}) = acc;
    }
  }
  return out;
}

}  // namespace ssim_detail

inline double ssim(const TensorF& a, const TensorF& b) {
  using namespace ssim_detail;
  SV_CHECK(a.same_shape(b), "ssim: shape mismatch");
  const TensorD la = luminance(a);
  const TensorD lb = luminance(b);

  const int64_t h = la.dim(0), w = la.dim(1);
  TensorD aa({h, w}), bb({h, w}), ab({h, w});
  for (int64_t i = 0; i < la.numel(); ++i) {
    aa[i] = la[i] * la[i];
    bb[i] = lb[i] * lb[i];
    ab[i] = la[i] * lb[i];
  }
  const TensorD mu_a = filter_valid(la);
  const TensorD mu_b = filter_valid(lb);
  const TensorD m_aa = filter_valid(aa);
  const TensorD m_bb = filter_valid(bb);
  const TensorD m_ab = filter_valid(ab);

  double total = 0;
  for (int64_t i = 0; i < mu_a.numel(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = m_aa[i] - ma * ma;
    const double vb = m_bb[i] - mb * mb;
    const double cov = m_ab[i] - ma * mb;
    total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
             ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
  }
  return total / static_cast<double>(mu_a.numel());
}

}  // namespace storyviz
