#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "storyviz/dataset.hpp"
#include "storyviz/image_io.hpp"
#include "storyviz/model.hpp"
#include "storyviz/nn.hpp"
#include "storyviz/ssim.hpp"

namespace storyviz {

struct EvalReport {
  std::string variant;
  uint64_t seed = 0;
  uint32_t dataset_fingerprint = 0;
  std::vector<std::vector<double>> frame_ssim;  // [story][t]
  std::vector<double> story_mean;
  double global_mean = 0;
  double exact_match = -1;           // generated-frame attribute accuracy
  double classifier_real_acc = -1;   // classifier accuracy on real test frames

  std::string to_kv() const {
    std::ostringstream os;
    os << "variant=" << variant << "\n"
       << "seed=" << seed << "\n"
       << "dataset_fingerprint=" << dataset_fingerprint << "\n"
       << "stories=" << story_mean.size() << "\n"
       << "ssim_global_mean=" << global_mean << "\n";
    if (exact_match >= 0) os << "exact_match=" << exact_match << "\n";
    if (classifier_real_acc >= 0)
      os << "classifier_real_acc=" << classifier_real_acc << "\n";
    return os.str();
  }

  std::string to_table() const {
    std::ostringstream os;
    os << "variant " << variant << " (seed " << seed << ", "
       << story_mean.size() << " stories)\n";
    os << "  mean SSIM: " << global_mean << "\n";
    if (exact_match >= 0) os << "  exact match: " << exact_match << "\n";
    if (classifier_real_acc >= 0)
      os << "  classifier real-frame accuracy: " << classifier_real_acc << "\n";
    return os.str();
  }
};

// Generates each record once from a per-record derived stream and scores
// frame-wise against ground truth. Never touches model parameters.
template <typename T>
EvalReport evaluate_ssim(Model<T>& model, const std::vector<StoryRecord>& records,
                         uint64_t seed) {
  SV_CHECK(!records.empty(), "evaluate_ssim: empty test set");
  EvalReport report;
  report.variant = to_string(model.kind());
  report.seed = seed;
  double total = 0;
  int64_t count = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    Rng rng = Rng::derive(seed, static_cast<uint64_t>(i));
    Tensor<T> gen = model.generate_story(records[i].descriptors, rng);
    std::vector<double> per_frame;
    double story_total = 0;
    for (int64_t t = 0; t < kStoryLen; ++t) {
      TensorF frame({kFrameChannels, kFrameSize, kFrameSize});
      const int64_t n = frame.numel();
      for (int64_t j = 0; j < n; ++j) {
        frame[j] = static_cast<float>(gen[t * n + j]);
      }
      const double s = ssim(frame, records[i].frames[t]);
      per_frame.push_back(s);
      story_total += s;
      total += s;
      ++count;
    }
    report.frame_ssim.push_back(std::move(per_frame));
    report.story_mean.push_back(story_total / static_cast<double>(kStoryLen));
  }
  report.global_mean = total / static_cast<double>(count);
  return report;
}

// ---- attribute exact-match protocol ---------------------------------------------

// Per-frame multi-label target: the set of (color, shape) pairs visible in
// the frame. 8 colors x 3 shapes = 24 binary presence labels.
inline constexpr int64_t kAttrLabels = static_cast<int64_t>(kColorCount) * kShapeCount;

inline std::set<int> frame_label_set(const std::vector<ObjectDescriptor>& descs,
                                     int64_t t) {
  std::set<int> labels;
  for (int64_t i = 0; i <= t; ++i) {
    labels.insert(static_cast<int>(descs[i].color) * kShapeCount +
                  static_cast<int>(descs[i].shape));
  }
  return labels;
}

// Small conv net with 24 sigmoid presence heads; trained on real frames only.
class AttributeClassifier {
 public:
  explicit AttributeClassifier(uint64_t seed)
      : c1_("cls.c1", 3, 32, 4, 2, 1),
        b1_("cls.b1", 32),
        c2_("cls.c2", 32, 64, 4, 2, 1),
        b2_("cls.b2", 64),
        c3_("cls.c3", 64, 128, 4, 2, 1),
        b3_("cls.b3", 128),
        head_("cls.head", 128 * 8 * 8, kAttrLabels) {
    c1_.collect(reg_);
    b1_.collect(reg_);
    c2_.collect(reg_);
    b2_.collect(reg_);
    c3_.collect(reg_);
    b3_.collect(reg_);
    head_.collect(reg_);
    Rng rng(seed);
    init_params<float>(reg_, rng);
  }

  TapeF::Val logits(TapeF& tape, TapeF::Val frames, bool training) {
    auto x = tape.leaky_relu(b1_.forward(tape, c1_.forward(tape, frames), training),
                             0.2f);
    x = tape.leaky_relu(b2_.forward(tape, c2_.forward(tape, x), training), 0.2f);
    x = tape.leaky_relu(b3_.forward(tape, c3_.forward(tape, x), training), 0.2f);
    const int64_t batch = tape.val(x).dim(0);
    return head_.forward(tape, tape.reshape(x, {batch, 128 * 8 * 8}));
  }

  // Multi-label binary cross-entropy:
  // -mean[y log sigma(z) + (1-y) log sigma(-z)].
  TapeF::Val bce(TapeF& tape, TapeF::Val z, const TensorF& targets) {
    TensorF ones = TensorF::full(targets.shape(), 1.0f);
    TensorF inv = ones;
    for (int64_t i = 0; i < inv.numel(); ++i) inv[i] -= targets[i];
    auto y = tape.constant(targets);
    auto y_inv = tape.constant(inv);
    auto pos = tape.mul(y, tape.log_sigmoid(z));
    auto neg = tape.mul(y_inv, tape.log_sigmoid(tape.scale(z, -1.0f)));
    return tape.scale(tape.mean_all(tape.add(pos, neg)), -1.0f);
  }

  // Trains on all real frames of `records` for `epochs` passes. Returns the
  // final epoch's mean loss.
  double train(const std::vector<StoryRecord>& records, int64_t epochs, uint64_t seed,
               int64_t batch = 64, double lr = 1e-3) {
    SV_CHECK(!records.empty(), "classifier: empty training set");
    Rng rng = Rng::derive(seed, 0x636c7366ull);
    Adam<float> opt(reg_.params, static_cast<float>(lr), 0.9f, 0.999f);

    const int64_t n_frames = static_cast<int64_t>(records.size()) * kStoryLen;
    std::vector<int64_t> order(n_frames);
    for (int64_t i = 0; i < n_frames; ++i) order[i] = i;
    double last_epoch_loss = 0;
    for (int64_t e = 0; e < epochs; ++e) {
      // Fisher-Yates reshuffle per epoch.
      for (int64_t i = n_frames - 1; i > 0; --i) {
        std::swap(order[i], order[rng.uniform_int(i + 1)]);
      }
      double epoch_loss = 0;
      int64_t steps = 0;
      for (int64_t start = 0; start < n_frames; start += batch) {
        const int64_t bsz = std::min(batch, n_frames - start);
        TensorF frames({bsz, kFrameChannels, kFrameSize, kFrameSize});
        TensorF targets = TensorF::zeros({bsz, kAttrLabels});
        for (int64_t i = 0; i < bsz; ++i) {
          const int64_t idx = order[start + i];
          const StoryRecord& rec = records[idx / kStoryLen];
          const int64_t t = idx % kStoryLen;
          const TensorF& f = rec.frames[t];
          std::copy(f.vec().begin(), f.vec().end(),
                    frames.vec().begin() + i * f.numel());
          for (int lbl : frame_label_set(rec.descriptors, t)) {
            targets.at({i, lbl}) = 1.0f;
          }
        }
        TapeF tape;
        auto z = logits(tape, tape.constant(frames), true);
        auto loss = bce(tape, z, targets);
        epoch_loss += tape.val(loss)[0];
        ++steps;
        reg_.zero_grad();
        tape.backward(loss);
        opt.step();
      }
      last_epoch_loss = epoch_loss / static_cast<double>(steps);
    }
    return last_epoch_loss;
  }

  std::set<int> predict_set(const TensorF& frame) {
    TensorF batch({1, kFrameChannels, kFrameSize, kFrameSize});
    std::copy(frame.vec().begin(), frame.vec().end(), batch.vec().begin());
    TapeF tape;
    auto z = logits(tape, tape.constant(batch), false);
    const TensorF& zv = tape.val(z);
    std::set<int> labels;
    for (int64_t k = 0; k < kAttrLabels; ++k) {
      if (zv[k] > 0.0f) labels.insert(static_cast<int>(k));
    }
    return labels;
  }

  // Exact-match accuracy over the real frames of `records`.
  double real_accuracy(const std::vector<StoryRecord>& records) {
    int64_t hits = 0, total = 0;
    for (const auto& rec : records) {
      for (int64_t t = 0; t < kStoryLen; ++t) {
        if (predict_set(rec.frames[t]) == frame_label_set(rec.descriptors, t)) ++hits;
        ++total;
      }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
  }

  ParamRegistry<float>& params() { return reg_; }

 private:
  Conv2d<float> c1_, c2_, c3_;
  BatchNorm<float> b1_, b2_, b3_;
  Linear<float> head_;
  ParamRegistry<float> reg_;
};

// Exact-match accuracy of generated frames under a real-frame-trained
// classifier, with the same per-record noise protocol as evaluate_ssim.
template <typename T>
double exact_match_accuracy(AttributeClassifier& cls, Model<T>& model,
                            const std::vector<StoryRecord>& records, uint64_t seed) {
  int64_t hits = 0, total = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    Rng rng = Rng::derive(seed, static_cast<uint64_t>(i));
    Tensor<T> gen = model.generate_story(records[i].descriptors, rng);
    for (int64_t t = 0; t < kStoryLen; ++t) {
      TensorF frame({kFrameChannels, kFrameSize, kFrameSize});
      const int64_t n = frame.numel();
      for (int64_t j = 0; j < n; ++j) frame[j] = static_cast<float>(gen[t * n + j]);
      if (cls.predict_set(frame) == frame_label_set(records[i].descriptors, t)) ++hits;
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

// Contact sheet: per story, the generated row above the ground-truth row.
template <typename T>
void write_grid_png(const std::string& path, Model<T>& model,
                    const std::vector<StoryRecord>& records, uint64_t seed,
                    int64_t max_stories = 8) {
  const int64_t n = std::min<int64_t>(max_stories, records.size());
  SV_CHECK(n > 0, "write_grid_png: no stories");
  const int64_t pad = 2;
  const int64_t cell = kFrameSize + pad;
  const int64_t width = kStoryLen * cell + pad;
  const int64_t height = n * 2 * cell + pad;
  std::vector<uint8_t> rgb(static_cast<size_t>(width * height * 3), 255);

  auto blit = [&](const TensorF& frame, int64_t row, int64_t col) {
    const auto bytes = frame_to_rgb8(frame);
    const int64_t oy = pad + row * cell, ox = pad + col * cell;
    for (int64_t y = 0; y < kFrameSize; ++y) {
      for (int64_t x = 0; x < kFrameSize; ++x) {
        for (int64_t c = 0; c < 3; ++c) {
          rgb[static_cast<size_t>(((oy + y) * width + ox + x) * 3 + c)] =
              bytes[static_cast<size_t>((y * kFrameSize + x) * 3 + c)];
        }
      }
    }
  };

  for (int64_t i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, static_cast<uint64_t>(i));
    Tensor<T> gen = model.generate_story(records[i].descriptors, rng);
    for (int64_t t = 0; t < kStoryLen; ++t) {
      TensorF frame({kFrameChannels, kFrameSize, kFrameSize});
      const int64_t fn = frame.numel();
      for (int64_t j = 0; j < fn; ++j) frame[j] = static_cast<float>(gen[t * fn + j]);
      blit(frame, i * 2, t);
      blit(records[i].frames[t], i * 2 + 1, t);
    }
  }
  write_file_bytes(path, encode_png_rgb8(rgb.data(), static_cast<int>(width),
                                         static_cast<int>(height)));
}

}  // namespace storyviz
