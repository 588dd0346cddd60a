#pragma once

#include <string>

#include "storyviz/autograd.hpp"
#include "storyviz/context_encoder.hpp"
#include "storyviz/nn.hpp"

namespace storyviz {

inline constexpr int64_t kFrameSize = 64;
inline constexpr int64_t kFrameChannels = 3;
inline constexpr int64_t kGistMapChannels = 128;
inline constexpr int64_t kGistMapSize = 4;  // 2048 == 128 * 4 * 4

// Decodes a 2048-d gist (reshaped to a 128-channel 4x4 map) into a 64x64 RGB
// frame in [-1, 1]:
//   conv512 -> [upsample x2, conv] x4 (256, 128, 64) -> conv3 + tanh,
// every conv 3x3 stride 1 pad 1 with batch norm.
template <typename T>
struct FrameDecoder {
  Conv2d<T> c1;
  BatchNorm<T> bn1;
  Conv2d<T> c2;
  BatchNorm<T> bn2;
  Conv2d<T> c3;
  BatchNorm<T> bn3;
  Conv2d<T> c4;
  BatchNorm<T> bn4;
  Conv2d<T> c5;
  BatchNorm<T> bn5;

  FrameDecoder() = default;
  explicit FrameDecoder(const std::string& name)
      : c1(name + ".c1", kGistMapChannels, 512, 3, 1, 1),
        bn1(name + ".bn1", 512),
        c2(name + ".c2", 512, 256, 3, 1, 1),
        bn2(name + ".bn2", 256),
        c3(name + ".c3", 256, 128, 3, 1, 1),
        bn3(name + ".bn3", 128),
        c4(name + ".c4", 128, 64, 3, 1, 1),
        bn4(name + ".bn4", 64),
        c5(name + ".c5", 64, kFrameChannels, 3, 1, 1),
        bn5(name + ".bn5", kFrameChannels) {}

  void collect(ParamRegistry<T>& reg) {
    c1.collect(reg);
    bn1.collect(reg);
    c2.collect(reg);
    bn2.collect(reg);
    c3.collect(reg);
    bn3.collect(reg);
    c4.collect(reg);
    bn4.collect(reg);
    c5.collect(reg);
    bn5.collect(reg);
  }

  // gists: [B, 2048] -> frames [B, 3, 64, 64]
  typename Tape<T>::Val forward(Tape<T>& tape, typename Tape<T>::Val gists,
                                bool training) {
    SV_CHECK(tape.val(gists).rank() == 2 && tape.val(gists).dim(1) == kGistDim,
             "decode_frame: expected [B,", kGistDim, "], got ",
             shape_str(tape.val(gists).shape()));
    const int64_t batch = tape.val(gists).dim(0);
    auto x = tape.reshape(gists, {batch, kGistMapChannels, kGistMapSize, kGistMapSize});
    x = tape.relu(bn1.forward(tape, c1.forward(tape, x), training));
    x = tape.upsample2x(x);
    x = tape.relu(bn2.forward(tape, c2.forward(tape, x), training));
    x = tape.upsample2x(x);
    x = tape.relu(bn3.forward(tape, c3.forward(tape, x), training));
    x = tape.upsample2x(x);
    x = tape.relu(bn4.forward(tape, c4.forward(tape, x), training));
    x = tape.upsample2x(x);
    return tape.tanh_act(bn5.forward(tape, c5.forward(tape, x), training));
  }
};

}  // namespace storyviz
