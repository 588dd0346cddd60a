#pragma once

#include <string>
#include <vector>

#include "storyviz/autograd.hpp"
#include "storyviz/descriptor.hpp"
#include "storyviz/nn.hpp"

namespace storyviz {

inline constexpr int64_t kHiddenDim = 128;
inline constexpr int64_t kFilterChannels = 16;
inline constexpr int64_t kFilterLen = 64;
inline constexpr int64_t kGistDim = kFilterChannels * kHiddenDim;  // 2048

// "Same" zero padding for the even-length gist filter: 31 zeros on the left,
// 32 on the right, keeping the output length at 128.
inline constexpr int64_t kFilterPadLeft = (kFilterLen - 1) / 2;

// Standard gated recurrent unit over a projected input, with the candidate
// squashed by tanh:
//   z = sigmoid(Wz x + Uz g + bz), r = sigmoid(Wr x + Ur g + br)
//   g' = (1 - z) (.) g + z (.) tanh(Wh x + Uh (r (.) g) + bh)
// The cell output equals the new hidden state.
template <typename T>
struct GruGates {
  Param<T> wz, uz, bz;
  Param<T> wr, ur, br;
  Param<T> wh, uh, bh;

  GruGates() = default;
  GruGates(const std::string& name, int64_t in, int64_t hidden)
      : wz(name + ".wz.weight", Tensor<T>({hidden, in})),
        uz(name + ".uz.weight", Tensor<T>({hidden, hidden})),
        bz(name + ".z.bias", Tensor<T>({hidden})),
        wr(name + ".wr.weight", Tensor<T>({hidden, in})),
        ur(name + ".ur.weight", Tensor<T>({hidden, hidden})),
        br(name + ".r.bias", Tensor<T>({hidden})),
        wh(name + ".wh.weight", Tensor<T>({hidden, in})),
        uh(name + ".uh.weight", Tensor<T>({hidden, hidden})),
        bh(name + ".h.bias", Tensor<T>({hidden})) {}

  void collect(ParamRegistry<T>& reg) {
    for (Param<T>* p : {&wz, &uz, &bz, &wr, &ur, &br, &wh, &uh, &bh}) reg.add(*p);
  }

  struct Step {
    typename Tape<T>::Val h;  // new hidden
    typename Tape<T>::Val z;  // update gate
    typename Tape<T>::Val r;  // reset gate
  };

  // x: [B, in], g_prev: [B, hidden]. Optional overrides force a gate to an
  // exact value (testing hook for the pass-through invariant).
  Step step(Tape<T>& tape, typename Tape<T>::Val x, typename Tape<T>::Val g_prev,
            const Tensor<T>* force_z = nullptr, const Tensor<T>* force_r = nullptr) {
    auto affine = [&](Param<T>& w, Param<T>& u, Param<T>& b,
                      typename Tape<T>::Val state) {
      auto wx = tape.matmul(x, tape.param(w), false, true);
      auto us = tape.matmul(state, tape.param(u), false, true);
      return tape.add_rowvec(tape.add(wx, us), tape.param(b));
    };
    auto z = force_z ? tape.constant(*force_z) : tape.sigmoid(affine(wz, uz, bz, g_prev));
    auto r = force_r ? tape.constant(*force_r) : tape.sigmoid(affine(wr, ur, br, g_prev));
    auto gated = tape.mul(r, g_prev);
    auto wx = tape.matmul(x, tape.param(wh), false, true);
    auto ug = tape.matmul(gated, tape.param(uh), false, true);
    auto cand = tape.tanh_act(tape.add_rowvec(tape.add(wx, ug), tape.param(bh)));
    // (1 - z) (.) g_prev + z (.) cand  ==  g_prev + z (.) (cand - g_prev)
    auto h = tape.add(g_prev, tape.mul(z, tape.sub(cand, g_prev)));
    return Step{h, z, r};
  }
};

// Filter network: i_t -> tanh(BN(Linear(i_t))) reshaped to a bank of
// kFilterChannels 1-D kernels of length kFilterLen, one bank per sample.
template <typename T>
struct FilterNetwork {
  Linear<T> fc;      // 128 -> 1024
  BatchNorm<T> bn;   // 1024

  FilterNetwork() = default;
  explicit FilterNetwork(const std::string& name)
      : fc(name + ".fc", kHiddenDim, kFilterChannels * kFilterLen),
        bn(name + ".bn", kFilterChannels * kFilterLen) {}

  void collect(ParamRegistry<T>& reg) {
    fc.collect(reg);
    bn.collect(reg);
  }

  // i_t: [B, 128] -> [B, 16, 64]
  typename Tape<T>::Val forward(Tape<T>& tape, typename Tape<T>::Val i_t,
                                bool training) {
    auto flat = tape.tanh_act(bn.forward(tape, fc.forward(tape, i_t), training));
    const int64_t batch = tape.val(flat).dim(0);
    return tape.reshape(flat, {batch, kFilterChannels, kFilterLen});
  }
};

// Text2Gist cell (the upper recurrent layer): GRU-style gates update the
// context h_t, and the gist is the 1-D convolution of h_t with a filter bank
// predicted from i_t:
//   z_t = sigmoid(Wz i_t + Uz h_{t-1} + bz)
//   r_t = sigmoid(Wr i_t + Ur h_{t-1} + br)
//   h_t = (1 - z_t) (.) h_{t-1} + z_t (.) tanh(Wh i_t + Uh (r_t (.) h_{t-1}) + bh)
//   o_t = Filter(i_t) * h_t   (flattened to 16 x 128 = 2048)
template <typename T>
struct Text2GistCell {
  GruGates<T> gates;
  FilterNetwork<T> filter;

  Text2GistCell() = default;
  explicit Text2GistCell(const std::string& name)
      : gates(name + ".gates", kHiddenDim, kHiddenDim), filter(name + ".filter") {}

  void collect(ParamRegistry<T>& reg) {
    gates.collect(reg);
    filter.collect(reg);
  }

  struct Step {
    typename Tape<T>::Val o;  // [B, 2048]
    typename Tape<T>::Val h;  // [B, 128]
    typename Tape<T>::Val z;  // [B, 128]
    typename Tape<T>::Val r;  // [B, 128]
  };

  Step step(Tape<T>& tape, typename Tape<T>::Val i_t, typename Tape<T>::Val h_prev,
            bool training, const Tensor<T>* force_z = nullptr,
            const Tensor<T>* force_r = nullptr,
            const Tensor<T>* force_filter = nullptr) {
    auto gs = gates.step(tape, i_t, h_prev, force_z, force_r);
    auto bank = force_filter ? tape.constant(*force_filter)
                             : filter.forward(tape, i_t, training);
    auto conv = tape.dynamic_conv1d(gs.h, bank, kFilterPadLeft);  // [B, 16, 128]
    const int64_t batch = tape.val(conv).dim(0);
    auto o = tape.reshape(conv, {batch, kGistDim});
    return Step{o, gs.h, gs.z, gs.r};
  }
};

// The lower layer of the context encoder: concatenates (s_t, eps_t), projects
// through LINEAR-BN-RELU to 128, then applies the GRU. The cell output i_t is
// the new hidden state g_t.
template <typename T>
struct SentenceGru {
  Linear<T> proj;     // (TEXTDIM + NOISEDIM) -> 128
  BatchNorm<T> bn;    // 128
  GruGates<T> gates;  // in 128, hidden 128
  int64_t noise_dim = 32;

  SentenceGru() = default;
  SentenceGru(const std::string& name, int64_t noise_dim_)
      : proj(name + ".proj", kTextDim + noise_dim_, kHiddenDim),
        bn(name + ".bn", kHiddenDim),
        gates(name + ".gru", kHiddenDim, kHiddenDim),
        noise_dim(noise_dim_) {}

  void collect(ParamRegistry<T>& reg) {
    proj.collect(reg);
    bn.collect(reg);
    gates.collect(reg);
  }

  struct Step {
    typename Tape<T>::Val i;  // cell output i_t == new hidden g_t
    typename Tape<T>::Val g;
  };

  // s_t: [B, 128], eps_t: [B, noise_dim], g_prev: [B, 128].
  Step step(Tape<T>& tape, typename Tape<T>::Val s_t, typename Tape<T>::Val eps_t,
            typename Tape<T>::Val g_prev, bool training) {
    SV_CHECK(tape.val(s_t).dim(1) == kTextDim, "gru_step: sentence width mismatch");
    SV_CHECK(tape.val(eps_t).dim(1) == noise_dim, "gru_step: noise width mismatch");
    auto x = tape.relu(
        bn.forward(tape, proj.forward(tape, tape.concat_cols({s_t, eps_t})), training));
    auto gs = gates.step(tape, x, g_prev);
    return Step{gs.h, gs.h};
  }
};

}  // namespace storyviz
