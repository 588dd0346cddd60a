#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "storyviz/model.hpp"

using namespace storyviz;

namespace {

Model<float> make(VariantKind kind, uint64_t seed = 5) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.init_seed = seed;
  return Model<float>(cfg);
}

std::set<std::string> theta_names(Model<float>& m) {
  std::set<std::string> out;
  for (auto* p : m.theta().params) out.insert(p->name);
  return out;
}

std::map<std::string, Shape> shapes_with_prefix(ParamRegistry<float>& reg,
                                                const std::string& prefix) {
  std::map<std::string, Shape> out;
  for (auto* p : reg.params) {
    if (p->name.rfind(prefix, 0) == 0) out[p->name] = p->value.shape();
  }
  return out;
}

Tensor<float>* find_buffer(ParamRegistry<float>& reg, const std::string& name) {
  for (auto& b : reg.buffers) {
    if (b.name == name) return b.tensor;
  }
  return nullptr;
}

Tensor<float> make_story_flat(int64_t batch, uint64_t seed) {
  Rng rng(seed);
  Tensor<float> s({batch, kTextDim * 4});
  for (auto& v : s.vec()) v = static_cast<float>(std::tanh(rng.normal()));
  return s;
}

void zero_story_encoder(Model<float>& m) {
  for (auto* p : m.theta().params) {
    if (p->name.rfind("gen.story_enc", 0) == 0) {
      p->value.vec().assign(p->numel(), 0.0f);
    }
  }
}

}  // namespace

TEST_SUITE("variants") {
  TEST_CASE("parameter census matches the pinned per-part totals") {
    auto sg = make(VariantKind::kStoryGan);
    auto fn = make(VariantKind::kSvfn);
    auto sc = make(VariantKind::kSvc);
    auto ig = make(VariantKind::kImageGan);

    auto c_sg = sg.census(), c_fn = fn.census(), c_sc = sc.census(),
         c_ig = ig.census();

    // Shared parts are architecturally identical across all four kinds.
    for (auto* c : {&c_sg, &c_fn, &c_sc, &c_ig}) {
      CHECK((*c)["decoder"] == 2142729);
      CHECK((*c)["image_discriminator"] == 6307137);
    }
    for (auto* c : {&c_sg, &c_fn, &c_sc}) {
      CHECK((*c)["story_encoder"] == 98944);
      CHECK((*c)["story_discriminator"] == 3284897);
    }

    // Fusion pathways differ; richer fusion costs more parameters.
    CHECK(c_sg["context_encoder"] == 352384);
    CHECK(c_fn["context_encoder"] == 253696);
    CHECK(c_sc["context_encoder"] == 119552);
    CHECK(c_ig.count("context_encoder") == 0);
    CHECK(c_ig.count("story_encoder") == 0);
    CHECK(c_ig.count("story_discriminator") == 0);

    CHECK(c_sg["generator_total"] == 2594057);
    CHECK(c_fn["generator_total"] == 2495369);
    CHECK(c_sc["generator_total"] == 2361225);
    CHECK(c_ig["generator_total"] == 2142729);
    CHECK(c_sg["generator_total"] > c_sc["generator_total"]);

    // The buckets tile the generator exactly.
    for (auto* c : {&c_sg, &c_fn, &c_sc}) {
      CHECK((*c)["generator_total"] == (*c)["story_encoder"] +
                                           (*c)["context_encoder"] +
                                           (*c)["decoder"]);
    }
    CHECK(c_ig["generator_total"] == c_ig["decoder"]);
  }

  TEST_CASE("storygan is the exact composition of its standalone modules") {
    auto sg = make(VariantKind::kStoryGan);
    auto census = sg.census();

    StoryEncoder<float> se("x", 4);
    ParamRegistry<float> r_se;
    se.collect(r_se);
    CHECK(census["story_encoder"] == r_se.total_params());

    SentenceGru<float> gru("x", 32);
    Text2GistCell<float> t2g("x");
    ParamRegistry<float> r_ctx;
    gru.collect(r_ctx);
    t2g.collect(r_ctx);
    CHECK(census["context_encoder"] == r_ctx.total_params());

    FrameDecoder<float> dec("x");
    ParamRegistry<float> r_dec;
    dec.collect(r_dec);
    CHECK(census["decoder"] == r_dec.total_params());

    // Every generator parameter belongs to exactly one of the four blocks.
    for (auto* p : sg.theta().params) {
      const bool known = p->name.rfind("gen.story_enc", 0) == 0 ||
                         p->name.rfind("gen.gru", 0) == 0 ||
                         p->name.rfind("gen.t2g", 0) == 0 ||
                         p->name.rfind("gen.decoder", 0) == 0;
      CHECK(known);
    }
  }

  TEST_CASE("wiring contract: which blocks exist per kind") {
    auto sg = make(VariantKind::kStoryGan);
    auto fn = make(VariantKind::kSvfn);
    auto sc = make(VariantKind::kSvc);
    auto ig = make(VariantKind::kImageGan);

    CHECK(sg.has_story_disc());
    CHECK(fn.has_story_disc());
    CHECK(sc.has_story_disc());
    CHECK_FALSE(ig.has_story_disc());
    CHECK(ig.psi_story().total_params() == 0);

    // SVC and SVFN retain the bottom GRU layer; ImageGAN has none.
    for (auto* m : {&sg, &fn, &sc}) {
      bool has_gru = false;
      for (auto* p : m->theta().params) {
        if (p->name.rfind("gen.gru", 0) == 0) has_gru = true;
      }
      CHECK(has_gru);
    }
    for (auto* p : ig.theta().params) {
      CHECK(p->name.rfind("gen.decoder", 0) == 0);
    }

    // Decoder and discriminator architectures are identical across kinds:
    // the same parameter names with the same shapes, entry for entry.
    auto dec_sg = shapes_with_prefix(sg.theta(), "gen.decoder");
    for (auto* m : {&fn, &sc, &ig}) {
      CHECK(shapes_with_prefix(m->theta(), "gen.decoder") == dec_sg);
    }
    auto di_sg = shapes_with_prefix(sg.psi_image(), "disc_img");
    for (auto* m : {&fn, &sc, &ig}) {
      CHECK(shapes_with_prefix(m->psi_image(), "disc_img") == di_sg);
    }
    auto ds_sg = shapes_with_prefix(sg.psi_story(), "disc_story");
    for (auto* m : {&fn, &sc}) {
      CHECK(shapes_with_prefix(m->psi_story(), "disc_story") == ds_sg);
    }
  }

  TEST_CASE("ablation locality: svc and svfn differ only in the fusion path") {
    auto fn = make(VariantKind::kSvfn);
    auto sc = make(VariantKind::kSvc);
    auto n_fn = theta_names(fn), n_sc = theta_names(sc);

    std::vector<std::string> only_fn, only_sc;
    std::set_difference(n_fn.begin(), n_fn.end(), n_sc.begin(), n_sc.end(),
                        std::back_inserter(only_fn));
    std::set_difference(n_sc.begin(), n_sc.end(), n_fn.begin(), n_fn.end(),
                        std::back_inserter(only_sc));
    CHECK(only_sc.empty());  // SVC's extra piece is a non-trained buffer
    CHECK_FALSE(only_fn.empty());
    for (const auto& n : only_fn) CHECK(n.rfind("gen.filter", 0) == 0);

    CHECK(find_buffer(sc.theta(), "gen.fixed_proj") != nullptr);
    CHECK(find_buffer(fn.theta(), "gen.fixed_proj") == nullptr);
    // The reconciling projection is not a trainable parameter anywhere.
    CHECK(n_sc.count("gen.fixed_proj") == 0);
  }

  TEST_CASE("fixed projection is deterministic in the seed and well shaped") {
    auto a = make(VariantKind::kSvc, 11);
    auto b = make(VariantKind::kSvc, 11);
    auto c = make(VariantKind::kSvc, 12);
    auto* pa = find_buffer(a.theta(), "gen.fixed_proj");
    auto* pb = find_buffer(b.theta(), "gen.fixed_proj");
    auto* pc = find_buffer(c.theta(), "gen.fixed_proj");
    REQUIRE(pa != nullptr);
    CHECK(pa->dim(0) == kGistDim);
    CHECK(pa->dim(1) == 2 * kHiddenDim);
    CHECK(pa->vec() == pb->vec());
    CHECK(pa->vec() != pc->vec());

    auto ig = make(VariantKind::kImageGan, 11);
    auto* pi = find_buffer(ig.theta(), "gen.fixed_proj");
    REQUIRE(pi != nullptr);
    CHECK(pi->dim(0) == kGistDim);
    CHECK(pi->dim(1) == kTextDim + kTextDim * 4 + ig.config().noise_dim);
  }

  TEST_CASE("svfn: with h0 pinned, the gist is a pure function of i_t and h0") {
    // Zeroing the story encoder pins h0 to the story noise draw (mu and
    // logvar collapse to zero, so the reparameterised sample equals eps),
    // making h0 independent of the sentences.
    auto m = make(VariantKind::kSvfn, 21);
    zero_story_encoder(m);
    const int64_t B = 2, T = 4;
    Tensor<float> story = make_story_flat(B, 31);
    Rng noise_rng(77);
    auto noise = sample_noise<float>(noise_rng, B, T, m.config().noise_dim,
                                     m.config().kind);

    Tape<float> tape;
    auto fwd = m.story_forward(tape, story, noise, /*training=*/false);
    // Copy: later tape ops may reallocate the arena behind val() references.
    Tensor<float> gists = tape.val(fwd.gists);

    // h0 really is the pinned draw.
    for (int64_t i = 0; i < B * kHiddenDim; ++i) {
      CHECK(tape.val(fwd.h0)[i] == noise.eps_story[i]);
    }

    // Recompute each o_t outside the model as Filter(i_t) * h0, feeding the
    // recurrent sentence GRU exactly the model's inputs. Bit-equality proves
    // the fusion consumes (i_t, h0) and nothing else: the recurrent context
    // update is gone in this variant.
    auto h0 = tape.constant(noise.eps_story);
    auto g = tape.constant(noise.g0);
    for (int64_t t = 0; t < T; ++t) {
      Tensor<float> s({B, kTextDim});
      Tensor<float> e({B, m.config().noise_dim});
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < kTextDim; ++k) {
          s.at({b, k}) = story.at({b, t * kTextDim + k});
        }
        for (int64_t k = 0; k < m.config().noise_dim; ++k) {
          e.at({b, k}) = noise.eps_frames.at({b * T + t, k});
        }
      }
      auto gs = m.sentence_gru().step(tape, tape.constant(s), tape.constant(e),
                                      g, false);
      g = gs.g;
      auto bank = m.svfn_filter().forward(tape, gs.i, false);
      auto o = tape.reshape(tape.dynamic_conv1d(h0, bank, kFilterPadLeft),
                            {B, kGistDim});
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < kGistDim; ++k) {
          CHECK(tape.val(o).at({b, k}) == gists.at({b * T + t, k}));
        }
      }
    }
  }

  TEST_CASE("svfn: perturbing a later sentence leaves earlier gists intact") {
    // The full invariance "o_t ignores s_{t'} for every t' != t" cannot hold
    // with the bottom GRU retained: i_t carries earlier sentences by design.
    // What the ablation does remove is any other path, so with h0 pinned a
    // perturbation at t' touches exactly the gists with t >= t'.
    auto m = make(VariantKind::kSvfn, 23);
    zero_story_encoder(m);
    const int64_t B = 1, T = 4, t_hit = 2;
    Tensor<float> story = make_story_flat(B, 41);
    Tensor<float> story2 = story;
    for (int64_t k = 0; k < kTextDim; ++k) {
      story2.at({0, t_hit * kTextDim + k}) += 0.25f;
    }
    Rng r1(9), r2(9);
    auto n1 = sample_noise<float>(r1, B, T, m.config().noise_dim, m.config().kind);
    auto n2 = sample_noise<float>(r2, B, T, m.config().noise_dim, m.config().kind);

    Tape<float> tape;
    auto f1 = m.story_forward(tape, story, n1, false);
    auto f2 = m.story_forward(tape, story2, n2, false);
    for (int64_t t = 0; t < T; ++t) {
      bool same = true;
      for (int64_t k = 0; k < kGistDim; ++k) {
        if (tape.val(f1.gists).at({t, k}) != tape.val(f2.gists).at({t, k})) {
          same = false;
          break;
        }
      }
      CHECK(same == (t < t_hit));
    }
  }

  TEST_CASE("svc: the gist is the fixed projection of (h0 || i_t)") {
    auto m = make(VariantKind::kSvc, 25);
    zero_story_encoder(m);
    const int64_t B = 2, T = 4;
    Tensor<float> story = make_story_flat(B, 51);
    Rng noise_rng(61);
    auto noise = sample_noise<float>(noise_rng, B, T, m.config().noise_dim,
                                     m.config().kind);

    Tape<float> tape;
    auto fwd = m.story_forward(tape, story, noise, false);
    auto proj = tape.constant(*find_buffer(m.theta(), "gen.fixed_proj"));
    auto h0 = tape.constant(noise.eps_story);
    auto g = tape.constant(noise.g0);
    for (int64_t t = 0; t < T; ++t) {
      Tensor<float> s({B, kTextDim});
      Tensor<float> e({B, m.config().noise_dim});
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < kTextDim; ++k) {
          s.at({b, k}) = story.at({b, t * kTextDim + k});
        }
        for (int64_t k = 0; k < m.config().noise_dim; ++k) {
          e.at({b, k}) = noise.eps_frames.at({b * T + t, k});
        }
      }
      auto gs = m.sentence_gru().step(tape, tape.constant(s), tape.constant(e),
                                      g, false);
      g = gs.g;
      auto o = tape.matmul(tape.concat_cols({h0, gs.i}), proj, false, true);
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < kGistDim; ++k) {
          CHECK(tape.val(o).at({b, k}) == tape.val(fwd.gists).at({b * T + t, k}));
        }
      }
    }
  }

  TEST_CASE("imagegan: gist projects (s_t || S || eps_t), noise used once") {
    auto m = make(VariantKind::kImageGan, 27);
    const int64_t B = 2, T = 4;
    Tensor<float> story = make_story_flat(B, 71);
    Rng noise_rng(81);
    auto noise = sample_noise<float>(noise_rng, B, T, m.config().noise_dim,
                                     m.config().kind);
    CHECK(noise.eps_story.numel() == 0);
    CHECK(noise.g0.numel() == 0);

    Tape<float> tape;
    auto fwd = m.story_forward(tape, story, noise, false);
    CHECK(tape.val(fwd.kl)[0] == 0.0f);
    for (int64_t i = 0; i < B * kHiddenDim; ++i) CHECK(tape.val(fwd.h0)[i] == 0.0f);

    auto proj = tape.constant(*find_buffer(m.theta(), "gen.fixed_proj"));
    auto s_flat = tape.constant(story);
    for (int64_t t = 0; t < T; ++t) {
      Tensor<float> s({B, kTextDim});
      Tensor<float> e({B, m.config().noise_dim});
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < kTextDim; ++k) {
          s.at({b, k}) = story.at({b, t * kTextDim + k});
        }
        for (int64_t k = 0; k < m.config().noise_dim; ++k) {
          e.at({b, k}) = noise.eps_frames.at({b * T + t, k});
        }
      }
      auto in = tape.concat_cols(
          {tape.constant(s), s_flat, tape.constant(e)});
      auto o = tape.matmul(in, proj, false, true);
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < kGistDim; ++k) {
          CHECK(tape.val(o).at({b, k}) == tape.val(fwd.gists).at({b * T + t, k}));
        }
      }
    }
  }

  TEST_CASE("variant names round-trip; unknown names are rejected") {
    for (VariantKind k : {VariantKind::kImageGan, VariantKind::kSvc,
                          VariantKind::kSvfn, VariantKind::kStoryGan}) {
      CHECK(variant_from_string(to_string(k)) == k);
    }
    CHECK_THROWS(variant_from_string("videogan"));
    CHECK_THROWS(variant_from_string(""));
  }
}
