#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "storyviz/autograd.hpp"
#include "storyviz/rng.hpp"
#include "storyviz/tensor.hpp"

namespace storyviz {

// Named non-trainable state (batch-norm running estimates, fixed projections).
template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor = nullptr;
};

// Flat view over a module tree: every trainable Param and named buffer,
// in registration order. Registration order is deterministic, which makes
// initialisation, optimiser state and checkpoints reproducible.
template <typename T>
struct ParamRegistry {
  std::vector<Param<T>*> params;
  std::vector<NamedBuffer<T>> buffers;

  void add(Param<T>& p) { params.push_back(&p); }
  void add_buffer(std::string name, Tensor<T>& t) { buffers.push_back({std::move(name), &t}); }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto* p : params) n += p->numel();
    return n;
  }

  void zero_grad() const {
    for (auto* p : params) p->zero_grad();
  }
};

template <typename T>
inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

// Fills every parameter from a single generator in registration order:
// weights from N(0, 0.02), biases zero, batch-norm scale one. The generator
// is shared so the full assignment depends only on the seed.
template <typename T>
void init_params(const ParamRegistry<T>& reg, Rng& rng, T weight_std = T(0.02)) {
  for (Param<T>* p : reg.params) {
    const std::string& n = p->name;
    const bool is_bias = n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0;
    const bool is_gamma = n.size() >= 6 && n.compare(n.size() - 6, 6, ".gamma") == 0;
    const bool is_beta = n.size() >= 5 && n.compare(n.size() - 5, 5, ".beta") == 0;
    if (is_gamma) {
      p->value.fill(T(1));
    } else if (is_bias || is_beta) {
      p->value.fill(T(0));
    } else {
      for (auto& v : p->value.vec()) v = weight_std * static_cast<T>(rng.normal());
    }
    p->zero_grad();
  }
}

// ---- layers ------------------------------------------------------------------

template <typename T>
struct Linear {
  Param<T> weight;  // [out, in]
  Param<T> bias;    // [out]

  Linear() = default;
  Linear(const std::string& name, int64_t in, int64_t out)
      : weight(name + ".weight", Tensor<T>({out, in})),
        bias(name + ".bias", Tensor<T>({out})) {}

  void collect(ParamRegistry<T>& reg) {
    reg.add(weight);
    reg.add(bias);
  }

  typename Tape<T>::Val forward(Tape<T>& tape, typename Tape<T>::Val x) {
    auto w = tape.param(weight);
    auto b = tape.param(bias);
    return tape.add_rowvec(tape.matmul(x, w, false, true), b);
  }

  int64_t in_features() const { return weight.value.dim(1); }
  int64_t out_features() const { return weight.value.dim(0); }
};

template <typename T>
struct Conv2d {
  Param<T> weight;  // [out, in, kh, kw]
  Param<T> bias;    // [out]
  int64_t stride = 1;
  int64_t pad = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, int64_t in, int64_t out, int64_t kernel,
         int64_t stride_, int64_t pad_)
      : weight(name + ".weight", Tensor<T>({out, in, kernel, kernel})),
        bias(name + ".bias", Tensor<T>({out})),
        stride(stride_),
        pad(pad_) {}

  void collect(ParamRegistry<T>& reg) {
    reg.add(weight);
    reg.add(bias);
  }

  typename Tape<T>::Val forward(Tape<T>& tape, typename Tape<T>::Val x) {
    auto w = tape.param(weight);
    auto b = tape.param(bias);
    return tape.conv2d(x, w, b, stride, pad);
  }
};

template <typename T>
struct BatchNorm {
  Param<T> gamma;
  Param<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
  std::string name;

  BatchNorm() = default;
  BatchNorm(const std::string& name_, int64_t features)
      : gamma(name_ + ".gamma", Tensor<T>({features})),
        beta(name_ + ".beta", Tensor<T>({features})),
        running_mean(Tensor<T>::zeros({features})),
        running_var(Tensor<T>::full({features}, T(1))),
        name(name_) {}

  void collect(ParamRegistry<T>& reg) {
    reg.add(gamma);
    reg.add(beta);
    reg.add_buffer(name + ".running_mean", running_mean);
    reg.add_buffer(name + ".running_var", running_var);
  }

  typename Tape<T>::Val forward(Tape<T>& tape, typename Tape<T>::Val x, bool training) {
    auto g = tape.param(gamma);
    auto b = tape.param(beta);
    return tape.batchnorm(x, g, b, running_mean, running_var, momentum, eps, training);
  }
};

// ---- optimiser -----------------------------------------------------------------

// Adam with per-parameter first/second moment estimates and bias correction.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Param<T>*> params, T lr, T beta1, T beta2, T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Param<T>* p : params_) {
      m_.push_back(Tensor<T>::zeros(p->value.shape()));
      v_.push_back(Tensor<T>::zeros(p->value.shape()));
    }
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Param<T>& p = *params_[i];
      T* m = m_[i].data();
      T* v = v_[i].data();
      const T* g = p.grad.data();
      T* w = p.value.data();
      const int64_t n = p.numel();
      for (int64_t j = 0; j < n; ++j) {
        m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[j] * g[j];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (Param<T>* p : params_) p->zero_grad();
  }

  const std::vector<Param<T>*>& params() const { return params_; }
  int64_t step_count() const { return t_; }
  Tensor<T>& moment1(size_t i) { return m_[i]; }
  Tensor<T>& moment2(size_t i) { return v_[i]; }
  void set_step_count(int64_t t) { t_ = t; }
  T learning_rate() const { return lr_; }

 private:
  std::vector<Param<T>*> params_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  T lr_ = T(1e-4);
  T beta1_ = T(0.5);
  T beta2_ = T(0.999);
  T eps_ = T(1e-8);
  int64_t t_ = 0;
};

}  // namespace storyviz
