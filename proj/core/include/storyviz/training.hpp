#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "storyviz/dataset.hpp"
#include "storyviz/model.hpp"
#include "storyviz/nn.hpp"

namespace storyviz {

// Flat key=value config; keys are exactly the field names below.
struct TrainingConfig {
  double alpha = 1.0;
  double beta = 1.0;
  int64_t k_image = 1;
  int64_t k_story = 1;
  int64_t batch_image = 32;
  int64_t batch_story = 8;
  double lr_gen = 1e-4;
  double lr_disc_image = 2e-4;
  double lr_disc_story = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int64_t max_iter = 2000;
  uint64_t seed = 0;
  int64_t noise_dim = 32;
  VariantKind variant = VariantKind::kStoryGan;
  int64_t checkpoint_every = 500;

  void validate() const {
    SV_CHECK(alpha >= 0 && beta >= 0, "config: alpha/beta must be >= 0");
    SV_CHECK(k_image >= 1 && k_story >= 1, "config: k_image/k_story must be >= 1");
    SV_CHECK(batch_image >= 1 && batch_story >= 1, "config: batch sizes must be >= 1");
    SV_CHECK(lr_gen > 0 && lr_disc_image > 0 && lr_disc_story > 0,
             "config: learning rates must be > 0");
    SV_CHECK(max_iter >= 0 && noise_dim >= 1 && checkpoint_every >= 1,
             "config: bad max_iter/noise_dim/checkpoint_every");
  }

  void set(const std::string& key, const std::string& value) {
    if (key == "alpha") alpha = std::stod(value);
    else if (key == "beta") beta = std::stod(value);
    else if (key == "k_image") k_image = std::stoll(value);
    else if (key == "k_story") k_story = std::stoll(value);
    else if (key == "batch_image") batch_image = std::stoll(value);
    else if (key == "batch_story") batch_story = std::stoll(value);
    else if (key == "lr_gen") lr_gen = std::stod(value);
    else if (key == "lr_disc_image") lr_disc_image = std::stod(value);
    else if (key == "lr_disc_story") lr_disc_story = std::stod(value);
    else if (key == "adam_beta1") adam_beta1 = std::stod(value);
    else if (key == "adam_beta2") adam_beta2 = std::stod(value);
    else if (key == "max_iter") max_iter = std::stoll(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "noise_dim") noise_dim = std::stoll(value);
    else if (key == "variant") variant = variant_from_string(value);
    else if (key == "checkpoint_every") checkpoint_every = std::stoll(value);
    else SV_CHECK(false, "config: unknown key '", key, "'");
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "alpha=" << alpha << "\n"
       << "beta=" << beta << "\n"
       << "k_image=" << k_image << "\n"
       << "k_story=" << k_story << "\n"
       << "batch_image=" << batch_image << "\n"
       << "batch_story=" << batch_story << "\n"
       << "lr_gen=" << lr_gen << "\n"
       << "lr_disc_image=" << lr_disc_image << "\n"
       << "lr_disc_story=" << lr_disc_story << "\n"
       << "adam_beta1=" << adam_beta1 << "\n"
       << "adam_beta2=" << adam_beta2 << "\n"
       << "max_iter=" << max_iter << "\n"
       << "seed=" << seed << "\n"
       << "noise_dim=" << noise_dim << "\n"
       << "variant=" << to_string(variant) << "\n"
       << "checkpoint_every=" << checkpoint_every << "\n";
    return os.str();
  }

  // Everything that shapes the step-by-step trace. max_iter and
  // checkpoint_every only decide when to stop or save, so a run may resume
  // under a larger budget.
  std::string trace_signature() const {
    std::ostringstream os;
    os << alpha << "|" << beta << "|" << k_image << "|" << k_story << "|"
       << batch_image << "|" << batch_story << "|" << lr_gen << "|"
       << lr_disc_image << "|" << lr_disc_story << "|" << adam_beta1 << "|"
       << adam_beta2 << "|" << seed << "|" << noise_dim << "|" << to_string(variant);
    return os.str();
  }

  void apply_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const size_t eq = line.find('=');
      if (eq == std::string::npos) {
        SV_CHECK(line.find_first_not_of(" \t\r") == std::string::npos,
                 "config: malformed line '", line, "'");
        continue;
      }
      auto trim = [](std::string s) {
        const size_t a = s.find_first_not_of(" \t\r");
        const size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    validate();
  }

  static TrainingConfig from_file(const std::string& path) {
    std::ifstream f(path);
    SV_CHECK(f.good(), "config: cannot open ", path);
    std::stringstream ss;
    ss << f.rdbuf();
    TrainingConfig cfg;
    cfg.apply_text(ss.str());
    return cfg;
  }
};

struct StepMetrics {
  int64_t step = 0;
  double d_img = 0, g_img = 0, d_story = 0, g_story = 0, kl = 0;
};

inline const char* metrics_header() { return "step, d_img, g_img, d_story, g_story, kl"; }

inline std::string format_metrics(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld, %.9g, %.9g, %.9g, %.9g, %.9g",
                static_cast<long long>(m.step), m.d_img, m.g_img, m.d_story,
                m.g_story, m.kl);
  return buf;
}

// ---- batches -------------------------------------------------------------------

// Image loop: batch_image sampled (story, t) pairs, grouped so each distinct
// story is unrolled once and pairs index into the unrolled gists.
template <typename T>
struct ImageBatch {
  Tensor<T> stories;                // [U, 128*T], unique stories, first-seen order
  std::vector<int64_t> pair_story;  // per pair: row in `stories`
  std::vector<int64_t> pair_t;      // per pair: frame index
  Tensor<T> sentences;              // [P, 128], s_t per pair
  Tensor<T> real;                   // [P, 3, 64, 64]
};

template <typename T>
struct StoryBatch {
  Tensor<T> stories;  // [B, 128*T]
  Tensor<T> real;     // [B*T, 3, 64, 64], story-major
};

template <typename T>
void copy_story_embedding(const StoryRecord& rec, T* dst) {
  const TensorF flat = encode_story(rec.descriptors);
  for (int64_t i = 0; i < flat.numel(); ++i) dst[i] = static_cast<T>(flat[i]);
}

template <typename T>
void copy_frame(const TensorF& frame, T* dst) {
  for (int64_t i = 0; i < frame.numel(); ++i) dst[i] = static_cast<T>(frame[i]);
}

template <typename T>
ImageBatch<T> sample_image_batch(const std::vector<StoryRecord>& records, Rng& rng,
                                 int64_t batch) {
  SV_CHECK(!records.empty(), "sample_image_batch: empty dataset");
  const int64_t n = static_cast<int64_t>(records.size());
  std::vector<int64_t> story_idx(batch), t_idx(batch);
  for (int64_t p = 0; p < batch; ++p) {
    story_idx[p] = rng.uniform_int(n);
    t_idx[p] = rng.uniform_int(kStoryLen);
  }

  ImageBatch<T> b;
  std::map<int64_t, int64_t> row_of;  // dataset story -> unique row
  std::vector<int64_t> uniques;
  b.pair_story.resize(batch);
  b.pair_t = t_idx;
  for (int64_t p = 0; p < batch; ++p) {
    auto it = row_of.find(story_idx[p]);
    if (it == row_of.end()) {
      it = row_of.emplace(story_idx[p], static_cast<int64_t>(uniques.size())).first;
      uniques.push_back(story_idx[p]);
    }
    b.pair_story[p] = it->second;
  }

  const int64_t u = static_cast<int64_t>(uniques.size());
  b.stories = Tensor<T>({u, kTextDim * kStoryLen});
  for (int64_t i = 0; i < u; ++i) {
    copy_story_embedding(records[uniques[i]], b.stories.data() + i * kTextDim * kStoryLen);
  }
  b.sentences = Tensor<T>({batch, kTextDim});
  b.real = Tensor<T>({batch, kFrameChannels, kFrameSize, kFrameSize});
  const int64_t frame_elems = kFrameChannels * kFrameSize * kFrameSize;
  for (int64_t p = 0; p < batch; ++p) {
    const StoryRecord& rec = records[story_idx[p]];
    const TensorF s = encode_descriptor(rec.descriptors[t_idx[p]]);
    for (int64_t i = 0; i < kTextDim; ++i) {
      b.sentences.data()[p * kTextDim + i] = static_cast<T>(s[i]);
    }
    copy_frame(rec.frames[t_idx[p]], b.real.data() + p * frame_elems);
  }
  return b;
}

template <typename T>
StoryBatch<T> sample_story_batch(const std::vector<StoryRecord>& records, Rng& rng,
                                 int64_t batch) {
  SV_CHECK(!records.empty(), "sample_story_batch: empty dataset");
  const int64_t n = static_cast<int64_t>(records.size());
  StoryBatch<T> b;
  b.stories = Tensor<T>({batch, kTextDim * kStoryLen});
  b.real = Tensor<T>({batch * kStoryLen, kFrameChannels, kFrameSize, kFrameSize});
  const int64_t frame_elems = kFrameChannels * kFrameSize * kFrameSize;
  for (int64_t i = 0; i < batch; ++i) {
    const StoryRecord& rec = records[rng.uniform_int(n)];
    copy_story_embedding(rec, b.stories.data() + i * kTextDim * kStoryLen);
    for (int64_t t = 0; t < kStoryLen; ++t) {
      copy_frame(rec.frames[t], b.real.data() + (i * kStoryLen + t) * frame_elems);
    }
  }
  return b;
}

// ---- loss builders -------------------------------------------------------------

// Discriminator ascent target, negated for descent:
// mean over rows of [-log sigmoid(real) - log sigmoid(-fake)].
template <typename T>
typename Tape<T>::Val disc_loss(Tape<T>& tape, typename Tape<T>::Val real_logits,
                                typename Tape<T>::Val fake_logits) {
  const int64_t n = tape.val(real_logits).dim(0);
  auto real_term = tape.scale(tape.log_sigmoid(real_logits), T(-1));
  auto fake_term = tape.scale(tape.log_sigmoid(tape.scale(fake_logits, T(-1))), T(-1));
  return tape.scale(tape.sum_all(tape.add(real_term, fake_term)), T(1) / static_cast<T>(n));
}

// Non-saturating generator loss: mean of -log sigmoid(fake logit).
template <typename T>
typename Tape<T>::Val nonsat_gen_loss(Tape<T>& tape, typename Tape<T>::Val fake_logits) {
  const int64_t n = tape.val(fake_logits).dim(0);
  return tape.scale(tape.sum_all(tape.scale(tape.log_sigmoid(fake_logits), T(-1))),
                    T(1) / static_cast<T>(n));
}

// Minimax value of one GAN term: mean of [log D(real) + log(1 - D(fake))].
template <typename T>
typename Tape<T>::Val minimax_value(Tape<T>& tape, typename Tape<T>::Val real_logits,
                                    typename Tape<T>::Val fake_logits) {
  const int64_t n = tape.val(real_logits).dim(0);
  auto v = tape.add(tape.log_sigmoid(real_logits),
                    tape.log_sigmoid(tape.scale(fake_logits, T(-1))));
  return tape.scale(tape.sum_all(v), T(1) / static_cast<T>(n));
}

// One generator-side forward over an image batch: unrolls unique stories,
// decodes only the sampled (story, t) frames, and builds the D_I conditioning
// rows (s_t || h0). All values live on the caller's tape.
template <typename T>
struct ImageForward {
  typename Tape<T>::Val frames;  // [P, 3, 64, 64]
  typename Tape<T>::Val cond;    // [P, 256]
  typename Tape<T>::Val kl;      // scalar
};

template <typename T>
ImageForward<T> image_forward(Model<T>& model, Tape<T>& tape, const ImageBatch<T>& b,
                              const NoiseDraws<T>& noise) {
  auto fwd = model.story_forward(tape, b.stories, noise, /*training=*/true);
  std::vector<int64_t> rows(b.pair_story.size());
  for (size_t p = 0; p < rows.size(); ++p) {
    rows[p] = b.pair_story[p] * kStoryLen + b.pair_t[p];
  }
  auto gists = tape.gather_rows(fwd.gists, rows);
  auto frames = model.decoder().forward(tape, gists, /*training=*/true);
  auto h0_rows = tape.gather_rows(fwd.h0, b.pair_story);
  auto cond = tape.concat_cols({tape.constant(b.sentences), h0_rows});
  return ImageForward<T>{frames, cond, fwd.kl};
}

template <typename T>
struct StoryForwardFull {
  typename Tape<T>::Val frames;  // [B*T, 3, 64, 64]
  typename Tape<T>::Val kl;
};

template <typename T>
StoryForwardFull<T> story_forward_full(Model<T>& model, Tape<T>& tape,
                                       const StoryBatch<T>& b,
                                       const NoiseDraws<T>& noise) {
  auto fwd = model.story_forward(tape, b.stories, noise, /*training=*/true);
  auto frames = model.decoder().forward(tape, fwd.gists, /*training=*/true);
  return StoryForwardFull<T>{frames, fwd.kl};
}

// Eq. 9 value on fixed batches with fresh noise: alpha * L_image +
// beta * L_story + L_KL (story term 0 when the variant has no story
// discriminator). No parameters are updated.
template <typename T>
struct ObjectiveParts {
  double image_term = 0;
  double story_term = 0;
  double kl_term = 0;
  double total() const { return image_term + story_term + kl_term; }
};

template <typename T>
ObjectiveParts<T> total_objective(Model<T>& model, const ImageBatch<T>& ib,
                                  const StoryBatch<T>& sb, Rng& rng, double alpha,
                                  double beta) {
  ObjectiveParts<T> parts;
  {
    Tape<T> tape;
    auto noise = sample_noise<T>(rng, ib.stories.dim(0), kStoryLen,
                                 model.config().noise_dim, model.kind());
    auto fwd = image_forward(model, tape, ib, noise);
    auto real = model.image_disc().logits(tape, tape.constant(ib.real), fwd.cond, true);
    auto fake = model.image_disc().logits(tape, fwd.frames, fwd.cond, true);
    parts.image_term = alpha * static_cast<double>(tape.val(minimax_value(tape, real, fake))[0]);
    parts.kl_term = static_cast<double>(tape.val(fwd.kl)[0]);
  }
  if (model.has_story_disc()) {
    Tape<T> tape;
    auto noise = sample_noise<T>(rng, sb.stories.dim(0), kStoryLen,
                                 model.config().noise_dim, model.kind());
    auto fwd = story_forward_full(model, tape, sb, noise);
    auto stories = tape.constant(sb.stories);
    auto real = model.story_disc().logits(tape, tape.constant(sb.real), stories, true);
    auto fake = model.story_disc().logits(tape, fwd.frames, stories, true);
    parts.story_term = beta * static_cast<double>(tape.val(minimax_value(tape, real, fake))[0]);
  }
  return parts;
}

// ---- trainer -------------------------------------------------------------------

// Alternating two-loop procedure: per outer iteration, k_image rounds of
// (update psi_I, then update theta on the image loss + KL), then k_story
// rounds of (update psi_S, then update theta on the story loss + KL).
// Variants without a story discriminator skip the story loop.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, const std::vector<StoryRecord>& records, TrainingConfig cfg)
      : model_(model),
        records_(records),
        cfg_(cfg),
        rng_(cfg.seed),
        opt_theta_(model.theta().params, static_cast<T>(cfg.lr_gen),
                   static_cast<T>(cfg.adam_beta1), static_cast<T>(cfg.adam_beta2)),
        opt_disc_image_(model.psi_image().params, static_cast<T>(cfg.lr_disc_image),
                        static_cast<T>(cfg.adam_beta1), static_cast<T>(cfg.adam_beta2)),
        opt_disc_story_(model.psi_story().params, static_cast<T>(cfg.lr_disc_story),
                        static_cast<T>(cfg.adam_beta1), static_cast<T>(cfg.adam_beta2)) {
    cfg.validate();
    SV_CHECK(!records.empty(), "trainer: empty training set");
    SV_CHECK(cfg.noise_dim == model.config().noise_dim &&
                 cfg.variant == model.kind(),
             "trainer: config does not match model");
  }

  StepMetrics step() {
    StepMetrics m;
    m.step = ++iter_;
    for (int64_t k = 0; k < cfg_.k_image; ++k) {
      auto batch = sample_image_batch<T>(records_, rng_, cfg_.batch_image);
      auto noise = sample_noise<T>(rng_, batch.stories.dim(0), kStoryLen,
                                   cfg_.noise_dim, model_.kind());
      m.d_img = update_disc_image(batch, noise);
      auto [g, kl] = update_gen_image(batch, noise);
      m.g_img = g;
      m.kl = kl;
    }
    if (model_.has_story_disc()) {
      for (int64_t k = 0; k < cfg_.k_story; ++k) {
        auto batch = sample_story_batch<T>(records_, rng_, cfg_.batch_story);
        auto noise = sample_noise<T>(rng_, batch.stories.dim(0), kStoryLen,
                                     cfg_.noise_dim, model_.kind());
        m.d_story = update_disc_story(batch, noise);
        m.g_story = update_gen_story(batch, noise);
      }
    }
    return m;
  }

  int64_t iter() const { return iter_; }
  void set_iter(int64_t it) { iter_ = it; }
  Rng& rng() { return rng_; }
  Adam<T>& opt_theta() { return opt_theta_; }
  Adam<T>& opt_disc_image() { return opt_disc_image_; }
  Adam<T>& opt_disc_story() { return opt_disc_story_; }
  const TrainingConfig& config() const { return cfg_; }

 private:
  void guard_finite(const char* where) {
    SV_CHECK(model_.all_finite(), "NaN guard tripped after ", where, " at iteration ",
             iter_);
  }

  double update_disc_image(const ImageBatch<T>& batch, const NoiseDraws<T>& noise) {
    Tensor<T> fake_frames, cond;
    {   // generator forward, detached: D step gradients stop at the inputs
      Tape<T> tape;
      auto fwd = image_forward(model_, tape, batch, noise);
      fake_frames = tape.val(fwd.frames);
      cond = tape.val(fwd.cond);
    }
    Tape<T> tape;
    auto cond_in = tape.constant(cond);
    auto real = model_.image_disc().logits(tape, tape.constant(batch.real), cond_in, true);
    auto fake = model_.image_disc().logits(tape, tape.constant(fake_frames), cond_in, true);
    auto loss = tape.scale(disc_loss(tape, real, fake), static_cast<T>(cfg_.alpha));
    const double value = tape.val(loss)[0];
    SV_CHECK(std::isfinite(value), "image D loss not finite at iteration ", iter_);
    model_.psi_image().zero_grad();
    tape.backward(loss);
    opt_disc_image_.step();
    guard_finite("image discriminator update");
    return value;
  }

  std::pair<double, double> update_gen_image(const ImageBatch<T>& batch,
                                             const NoiseDraws<T>& noise) {
    Tape<T> tape;
    auto fwd = image_forward(model_, tape, batch, noise);
    auto fake = model_.image_disc().logits(tape, fwd.frames, fwd.cond, true);
    auto adv = tape.scale(nonsat_gen_loss(tape, fake), static_cast<T>(cfg_.alpha));
    auto loss = tape.add(adv, fwd.kl);
    const double adv_value = tape.val(adv)[0];
    const double kl_value = tape.val(fwd.kl)[0];
    SV_CHECK(std::isfinite(adv_value) && std::isfinite(kl_value),
             "image G loss not finite at iteration ", iter_);
    model_.theta().zero_grad();
    model_.psi_image().zero_grad();
    tape.backward(loss);
    opt_theta_.step();
    model_.psi_image().zero_grad();  // computed but never applied
    guard_finite("generator update (image loop)");
    return {adv_value, kl_value};
  }

  double update_disc_story(const StoryBatch<T>& batch, const NoiseDraws<T>& noise) {
    Tensor<T> fake_frames;
    {
      Tape<T> tape;
      auto fwd = story_forward_full(model_, tape, batch, noise);
      fake_frames = tape.val(fwd.frames);
    }
    Tape<T> tape;
    auto stories = tape.constant(batch.stories);
    auto real = model_.story_disc().logits(tape, tape.constant(batch.real), stories, true);
    auto fake = model_.story_disc().logits(tape, tape.constant(fake_frames), stories, true);
    auto loss = tape.scale(disc_loss(tape, real, fake), static_cast<T>(cfg_.beta));
    const double value = tape.val(loss)[0];
    SV_CHECK(std::isfinite(value), "story D loss not finite at iteration ", iter_);
    model_.psi_story().zero_grad();
    tape.backward(loss);
    opt_disc_story_.step();
    guard_finite("story discriminator update");
    return value;
  }

  double update_gen_story(const StoryBatch<T>& batch, const NoiseDraws<T>& noise) {
    Tape<T> tape;
    auto fwd = story_forward_full(model_, tape, batch, noise);
    auto fake = model_.story_disc().logits(tape, fwd.frames,
                                           tape.constant(batch.stories), true);
    auto adv = tape.scale(nonsat_gen_loss(tape, fake), static_cast<T>(cfg_.beta));
    auto loss = tape.add(adv, fwd.kl);
    const double value = tape.val(adv)[0];
    SV_CHECK(std::isfinite(value), "story G loss not finite at iteration ", iter_);
    model_.theta().zero_grad();
    model_.psi_story().zero_grad();
    tape.backward(loss);
    opt_theta_.step();
    model_.psi_story().zero_grad();
    guard_finite("generator update (story loop)");
    return value;
  }

  Model<T>& model_;
  const std::vector<StoryRecord>& records_;
  TrainingConfig cfg_;
  Rng rng_;
  Adam<T> opt_theta_;
  Adam<T> opt_disc_image_;
  Adam<T> opt_disc_story_;
  int64_t iter_ = 0;
};

}  // namespace storyviz
