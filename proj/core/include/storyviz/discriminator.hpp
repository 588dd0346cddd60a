#pragma once

#include <string>

#include "storyviz/autograd.hpp"
#include "storyviz/context_encoder.hpp"
#include "storyviz/generator.hpp"
#include "storyviz/nn.hpp"

namespace storyviz {

inline constexpr double kLeakySlope = 0.2;

// Image discriminator D_I: scores one frame against its sentence and the
// story context. Four stride-2 4x4 convolutions bring the frame to a 512
// channel 4x4 map; the conditioning vector (s_t || h0, 256-d) is replicated
// spatially and concatenated on channels; a 3x3 fusion convolution and a
// final 4x4 stride-4 convolution produce the logit. The probability is
// sigmoid(logit); losses consume the logit directly for stability.
template <typename T>
struct ImageDiscriminator {
  Conv2d<T> c1;
  BatchNorm<T> bn1;
  Conv2d<T> c2;
  BatchNorm<T> bn2;
  Conv2d<T> c3;
  BatchNorm<T> bn3;
  Conv2d<T> c4;
  BatchNorm<T> bn4;
  Conv2d<T> c5;  // fuses image features with the conditioning block
  BatchNorm<T> bn5;
  Conv2d<T> c6;  // 4x4 stride 4 -> 1x1 logit

  ImageDiscriminator() = default;
  explicit ImageDiscriminator(const std::string& name)
      : c1(name + ".c1", kFrameChannels, 64, 4, 2, 1),
        bn1(name + ".bn1", 64),
        c2(name + ".c2", 64, 128, 4, 2, 1),
        bn2(name + ".bn2", 128),
        c3(name + ".c3", 128, 256, 4, 2, 1),
        bn3(name + ".bn3", 256),
        c4(name + ".c4", 256, 512, 4, 2, 1),
        bn4(name + ".bn4", 512),
        c5(name + ".c5", 512 + 2 * kHiddenDim, 512, 3, 1, 1),
        bn5(name + ".bn5", 512),
        c6(name + ".c6", 512, 1, 4, 4, 0) {}

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
    c6.collect(reg);
  }

  // frames: [B, 3, 64, 64]; cond = (s_t || h0): [B, 256]. Returns logits [B, 1].
  typename Tape<T>::Val logits(Tape<T>& tape, typename Tape<T>::Val frames,
                               typename Tape<T>::Val cond, bool training) {
    SV_CHECK(tape.val(cond).rank() == 2 && tape.val(cond).dim(1) == 2 * kHiddenDim,
             "image discriminator: conditioning must be [B,", 2 * kHiddenDim, "]");
    const T slope = static_cast<T>(kLeakySlope);
    auto x = tape.leaky_relu(bn1.forward(tape, c1.forward(tape, frames), training), slope);
    x = tape.leaky_relu(bn2.forward(tape, c2.forward(tape, x), training), slope);
    x = tape.leaky_relu(bn3.forward(tape, c3.forward(tape, x), training), slope);
    x = tape.leaky_relu(bn4.forward(tape, c4.forward(tape, x), training), slope);
    auto cond_map = tape.replicate_hw(cond, kGistMapSize, kGistMapSize);
    x = tape.concat_channels(x, cond_map);
    x = tape.leaky_relu(bn5.forward(tape, c5.forward(tape, x), training), slope);
    auto logit_map = c6.forward(tape, x);  // [B, 1, 1, 1]
    const int64_t batch = tape.val(logit_map).dim(0);
    return tape.reshape(logit_map, {batch, 1});
  }
};

// Story discriminator D_S: encodes all T frames with a shared conv stack into
// a 128-d code per frame (32 channels at 2x2), concatenates over time, maps
// the story text through LINEAR-BN to the same width, and scores
// sigmoid(w . (img (.) txt) + b).
template <typename T>
struct StoryDiscriminator {
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
  Linear<T> text_fc;
  BatchNorm<T> text_bn;
  Linear<T> head;  // weight w and bias b of the fused score
  int64_t story_len = 4;

  StoryDiscriminator() = default;
  StoryDiscriminator(const std::string& name, int64_t story_len_)
      : c1(name + ".c1", kFrameChannels, 64, 4, 2, 1),
        bn1(name + ".bn1", 64),
        c2(name + ".c2", 64, 128, 4, 2, 1),
        bn2(name + ".bn2", 128),
        c3(name + ".c3", 128, 256, 4, 2, 1),
        bn3(name + ".bn3", 256),
        c4(name + ".c4", 256, 512, 4, 2, 1),
        bn4(name + ".bn4", 512),
        c5(name + ".c5", 512, 32, 4, 2, 1),
        bn5(name + ".bn5", 32),
        text_fc(name + ".text_fc", kTextDim * story_len_, 128 * story_len_),
        text_bn(name + ".text_bn", 128 * story_len_),
        head(name + ".head", 128 * story_len_, 1),
        story_len(story_len_) {}

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
    text_fc.collect(reg);
    text_bn.collect(reg);
    head.collect(reg);
  }

  // frames: [B*T, 3, 64, 64] in story-major order -> [B, 128*T].
  typename Tape<T>::Val image_features(Tape<T>& tape, typename Tape<T>::Val frames,
                                       bool training) {
    const T slope = static_cast<T>(kLeakySlope);
    auto x = tape.leaky_relu(bn1.forward(tape, c1.forward(tape, frames), training), slope);
    x = tape.leaky_relu(bn2.forward(tape, c2.forward(tape, x), training), slope);
    x = tape.leaky_relu(bn3.forward(tape, c3.forward(tape, x), training), slope);
    x = tape.leaky_relu(bn4.forward(tape, c4.forward(tape, x), training), slope);
    x = bn5.forward(tape, c5.forward(tape, x), training);  // [B*T, 32, 2, 2]
    const int64_t bt = tape.val(x).dim(0);
    SV_CHECK(bt % story_len == 0, "story discriminator: frame count not divisible by T");
    // Each frame contributes 32*2*2 = 128 features; consecutive frames of a
    // story are adjacent, so the flat view is the time concatenation.
    return tape.reshape(x, {bt / story_len, 128 * story_len});
  }

  // story_flat: [B, 128*T] -> [B, 128*T].
  typename Tape<T>::Val text_features(Tape<T>& tape, typename Tape<T>::Val story_flat,
                                      bool training) {
    SV_CHECK(tape.val(story_flat).dim(1) == kTextDim * story_len,
             "story discriminator: story width mismatch");
    return text_bn.forward(tape, text_fc.forward(tape, story_flat), training);
  }

  // Returns logits [B, 1] for (frame sequence, story) pairs.
  typename Tape<T>::Val logits(Tape<T>& tape, typename Tape<T>::Val frames,
                               typename Tape<T>::Val story_flat, bool training) {
    auto img = image_features(tape, frames, training);
    auto txt = text_features(tape, story_flat, training);
    return head.forward(tape, tape.mul(img, txt));
  }
};

}  // namespace storyviz
