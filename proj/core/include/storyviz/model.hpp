#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "storyviz/autograd.hpp"
#include "storyviz/context_encoder.hpp"
#include "storyviz/descriptor.hpp"
#include "storyviz/discriminator.hpp"
#include "storyviz/generator.hpp"
#include "storyviz/nn.hpp"
#include "storyviz/story_encoder.hpp"

namespace storyviz {

// Model ablations. All variants share the frame decoder and discriminator
// architectures; they differ only in how the per-frame gist is produced:
//  - kStoryGan: story encoder + sentence GRU + Text2Gist cell (full model).
//  - kSvfn:     story encoder + sentence GRU; the gist is the dynamic
//               convolution of the static h0 with the filter bank from i_t.
//  - kSvc:      story encoder + sentence GRU; the gist is a fixed projection
//               of (h0 || i_t).
//  - kImageGan: no story encoder, no recurrence, no story discriminator; the
//               gist is a fixed projection of (s_t || S || eps_t).
enum class VariantKind : int { kImageGan = 0, kSvc = 1, kSvfn = 2, kStoryGan = 3 };

inline const char* to_string(VariantKind k) {
  switch (k) {
    case VariantKind::kImageGan: return "imagegan";
    case VariantKind::kSvc: return "svc";
    case VariantKind::kSvfn: return "svfn";
    case VariantKind::kStoryGan: return "storygan";
  }
  return "unknown";
}

inline VariantKind variant_from_string(const std::string& s) {
  for (VariantKind k : {VariantKind::kImageGan, VariantKind::kSvc,
                        VariantKind::kSvfn, VariantKind::kStoryGan}) {
    if (s == to_string(k)) return k;
  }
  SV_CHECK(false, "unknown variant: ", s, " (expected imagegan|svc|svfn|storygan)");
  return VariantKind::kStoryGan;
}

struct ModelConfig {
  VariantKind kind = VariantKind::kStoryGan;
  int64_t story_len = 4;
  int64_t noise_dim = 32;
  uint64_t init_seed = 0;
};

// Noise consumed by one generator forward pass over a batch of stories.
// Draw order (per call): eps_story rows, then g0 rows, then frame noise in
// story-major order. ImageGAN draws only the frame noise.
template <typename T>
struct NoiseDraws {
  Tensor<T> eps_story;   // [B, 128]
  Tensor<T> g0;          // [B, 128]
  Tensor<T> eps_frames;  // [B*T, noise_dim]
};

template <typename T>
NoiseDraws<T> sample_noise(Rng& rng, int64_t batch, int64_t story_len,
                           int64_t noise_dim, VariantKind kind) {
  NoiseDraws<T> n;
  if (kind != VariantKind::kImageGan) {
    n.eps_story = Tensor<T>::from_normal({batch, kHiddenDim}, rng);
    n.g0 = Tensor<T>::from_normal({batch, kHiddenDim}, rng);
  }
  n.eps_frames = Tensor<T>::from_normal({batch * story_len, noise_dim}, rng);
  return n;
}

// Result of the generator-side recurrent forward for a batch of stories.
template <typename T>
struct GenForward {
  typename Tape<T>::Val gists;  // [B*T, 2048], row b*T + t
  typename Tape<T>::Val h0;     // [B, 128]; zeros for ImageGAN
  typename Tape<T>::Val kl;     // scalar; constant 0 for ImageGAN
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), decoder_("gen.decoder"),
                                           d_img_("disc_img") {
    const bool conditioned = cfg.kind != VariantKind::kImageGan;
    if (conditioned) {
      story_enc_.emplace("gen.story_enc", cfg.story_len);
      gru_.emplace("gen.gru", cfg.noise_dim);
      d_story_.emplace("disc_story", cfg.story_len);
    }
    if (cfg.kind == VariantKind::kStoryGan) t2g_.emplace("gen.t2g");
    if (cfg.kind == VariantKind::kSvfn) svfn_filter_.emplace("gen.filter");
    if (cfg.kind == VariantKind::kSvc) {
      fixed_proj_ = Tensor<T>({kGistDim, 2 * kHiddenDim});
    } else if (cfg.kind == VariantKind::kImageGan) {
      fixed_proj_ = Tensor<T>(
          {kGistDim, kTextDim + kTextDim * cfg.story_len + cfg.noise_dim});
    }

    if (story_enc_) story_enc_->collect(theta_);
    if (gru_) gru_->collect(theta_);
    if (t2g_) t2g_->collect(theta_);
    if (svfn_filter_) svfn_filter_->collect(theta_);
    decoder_.collect(theta_);
    if (fixed_proj_.numel() > 0) theta_.add_buffer("gen.fixed_proj", fixed_proj_);
    d_img_.collect(psi_i_);
    if (d_story_) d_story_->collect(psi_s_);

    init();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  VariantKind kind() const { return cfg_.kind; }
  bool conditioned() const { return cfg_.kind != VariantKind::kImageGan; }

  ParamRegistry<T>& theta() { return theta_; }
  ParamRegistry<T>& psi_image() { return psi_i_; }
  ParamRegistry<T>& psi_story() { return psi_s_; }

  StoryEncoder<T>& story_encoder() { return *story_enc_; }
  FrameDecoder<T>& decoder() { return decoder_; }
  ImageDiscriminator<T>& image_disc() { return d_img_; }
  StoryDiscriminator<T>& story_disc() { return *d_story_; }
  bool has_story_disc() const { return d_story_.has_value(); }
  SentenceGru<T>& sentence_gru() { return *gru_; }
  Text2GistCell<T>& text2gist() { return *t2g_; }
  FilterNetwork<T>& svfn_filter() { return *svfn_filter_; }

  // Parameter census per architectural block (trainable parameters only).
  std::map<std::string, int64_t> census() const {
    std::map<std::string, int64_t> out;
    auto bucket = [&](const std::string& name) -> int64_t& {
      return out.try_emplace(name, 0).first->second;
    };
    for (const Param<T>* p : theta_.params) {
      if (p->name.rfind("gen.story_enc", 0) == 0) bucket("story_encoder") += p->numel();
      else if (p->name.rfind("gen.decoder", 0) == 0) bucket("decoder") += p->numel();
      else bucket("context_encoder") += p->numel();
    }
    bucket("image_discriminator") = psi_i_.total_params();
    if (d_story_) bucket("story_discriminator") = psi_s_.total_params();
    bucket("generator_total") = theta_.total_params();
    return out;
  }

  // All parameters finite? (NaN guard asserted after every optimiser step.)
  bool all_finite() const {
    for (const ParamRegistry<T>* reg : {&theta_, &psi_i_, &psi_s_}) {
      for (const Param<T>* p : reg->params) {
        for (const T v : p->value.vec()) {
          if (!std::isfinite(static_cast<double>(v))) return false;
        }
      }
    }
    return true;
  }

  // Generator forward over whole stories. story_flat is a constant
  // [B, 128*T]; returns gists for every (story, t) in story-major order.
  GenForward<T> story_forward(Tape<T>& tape, const Tensor<T>& story_flat,
                              const NoiseDraws<T>& noise, bool training) {
    const int64_t batch = story_flat.dim(0);
    const int64_t t_len = cfg_.story_len;
    SV_CHECK(story_flat.rank() == 2 && story_flat.dim(1) == kTextDim * t_len,
             "story_forward: story batch must be [B,", kTextDim * t_len, "]");
    SV_CHECK(noise.eps_frames.dim(0) == batch * t_len &&
                 noise.eps_frames.dim(1) == cfg_.noise_dim,
             "story_forward: frame noise shape mismatch");

    auto s_flat = tape.constant(story_flat);
    std::vector<typename Tape<T>::Val> sentences;  // each [B, 128]
    sentences.reserve(static_cast<size_t>(t_len));
    for (int64_t t = 0; t < t_len; ++t) {
      Tensor<T> s({batch, kTextDim});
      for (int64_t b = 0; b < batch; ++b) {
        std::memcpy(s.data() + b * kTextDim,
                    story_flat.data() + b * kTextDim * t_len + t * kTextDim,
                    sizeof(T) * kTextDim);
      }
      sentences.push_back(tape.constant(std::move(s)));
    }
    auto frame_noise = [&](int64_t t) {
      Tensor<T> e({batch, cfg_.noise_dim});
      for (int64_t b = 0; b < batch; ++b) {
        std::memcpy(e.data() + b * cfg_.noise_dim,
                    noise.eps_frames.data() + (b * t_len + t) * cfg_.noise_dim,
                    sizeof(T) * cfg_.noise_dim);
      }
      return tape.constant(std::move(e));
    };

    GenForward<T> out;
    std::vector<typename Tape<T>::Val> gists_by_t;
    gists_by_t.reserve(static_cast<size_t>(t_len));

    if (cfg_.kind == VariantKind::kImageGan) {
      auto proj = tape.constant(fixed_proj_);
      for (int64_t t = 0; t < t_len; ++t) {
        auto in = tape.concat_cols({sentences[t], s_flat, frame_noise(t)});
        gists_by_t.push_back(tape.matmul(in, proj, false, true));
      }
      out.h0 = tape.constant(Tensor<T>::zeros({batch, kHiddenDim}));
      out.kl = tape.constant(Tensor<T>::zeros({1}));
    } else {
      SV_CHECK(noise.eps_story.numel() == batch * kHiddenDim &&
                   noise.g0.numel() == batch * kHiddenDim,
               "story_forward: missing story noise");
      auto dist = story_enc_->distribution(tape, s_flat, training);
      auto h0 = story_enc_->sample(tape, dist, tape.constant(noise.eps_story));
      out.h0 = h0;
      out.kl = story_enc_->kl(tape, dist);
      auto g = tape.constant(noise.g0);
      auto h = h0;
      typename Tape<T>::Val proj{};
      if (cfg_.kind == VariantKind::kSvc) proj = tape.constant(fixed_proj_);
      for (int64_t t = 0; t < t_len; ++t) {
        auto gs = gru_->step(tape, sentences[t], frame_noise(t), g, training);
        g = gs.g;
        switch (cfg_.kind) {
          case VariantKind::kStoryGan: {
            auto step = t2g_->step(tape, gs.i, h, training);
            h = step.h;
            gists_by_t.push_back(step.o);
            break;
          }
          case VariantKind::kSvfn: {
            auto bank = svfn_filter_->forward(tape, gs.i, training);
            auto conv = tape.dynamic_conv1d(h0, bank, kFilterPadLeft);
            gists_by_t.push_back(tape.reshape(conv, {batch, kGistDim}));
            break;
          }
          case VariantKind::kSvc: {
            auto fused = tape.concat_cols({h0, gs.i});
            gists_by_t.push_back(tape.matmul(fused, proj, false, true));
            break;
          }
          default:
            SV_CHECK(false, "unreachable variant branch");
        }
      }
    }

    // Stack as [T*B, 2048] (t-major) then reorder rows to story-major b*T + t.
    auto stacked = tape.stack_rows(gists_by_t);
    std::vector<int64_t> order(static_cast<size_t>(batch * t_len));
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t t = 0; t < t_len; ++t) {
        order[static_cast<size_t>(b * t_len + t)] = t * batch + b;
      }
    }
    out.gists = tape.gather_rows(stacked, order);
    return out;
  }

  // Evaluation-mode generation of one story from a seeded stream. Returns
  // [T, 3, 64, 64] in [-1, 1].
  Tensor<T> generate_story(const std::vector<ObjectDescriptor>& descs, Rng& rng) {
    SV_CHECK(static_cast<int64_t>(descs.size()) == cfg_.story_len,
             "generate_story: expected ", cfg_.story_len, " descriptors, got ",
             descs.size());
    TensorF flat_f = encode_story(descs);
    Tensor<T> story_flat({1, flat_f.numel()});
    for (int64_t i = 0; i < flat_f.numel(); ++i) {
      story_flat[i] = static_cast<T>(flat_f[i]);
    }
    auto noise = sample_noise<T>(rng, 1, cfg_.story_len, cfg_.noise_dim, cfg_.kind);
    Tape<T> tape;
    auto fwd = story_forward(tape, story_flat, noise, /*training=*/false);
    auto frames = decoder_.forward(tape, fwd.gists, /*training=*/false);
    return tape.val(frames)
        .reshaped({cfg_.story_len, kFrameChannels, kFrameSize, kFrameSize});
  }

 private:
  void init() {
    Rng rng(cfg_.init_seed);
    for (ParamRegistry<T>* reg : {&theta_, &psi_i_, &psi_s_}) {
      init_params<T>(*reg, rng);
    }
    if (fixed_proj_.numel() > 0) {
      // Fixed (non-trained) reconciling projection: scaled Gaussian from its
      // own derived stream so the map is deterministic per model seed.
      Rng proj_rng = Rng::derive(cfg_.init_seed, 0x66697870ull);  // "fixp"
      const T scale = T(1) / std::sqrt(static_cast<T>(fixed_proj_.dim(1)));
      for (auto& v : fixed_proj_.vec()) {
        v = scale * static_cast<T>(proj_rng.normal());
      }
    }
  }

  ModelConfig cfg_;
  std::optional<StoryEncoder<T>> story_enc_;
  std::optional<SentenceGru<T>> gru_;
  std::optional<Text2GistCell<T>> t2g_;
  std::optional<FilterNetwork<T>> svfn_filter_;
  Tensor<T> fixed_proj_;
  FrameDecoder<T> decoder_;
  ImageDiscriminator<T> d_img_;
  std::optional<StoryDiscriminator<T>> d_story_;

  ParamRegistry<T> theta_;
  ParamRegistry<T> psi_i_;
  ParamRegistry<T> psi_s_;
};

using ModelF = Model<float>;

}  // namespace storyviz
