#pragma once

#include <string>

#include "storyviz/autograd.hpp"
#include "storyviz/descriptor.hpp"
#include "storyviz/nn.hpp"

namespace storyviz {

// Conditioning augmentation: maps the story vector S to a Gaussian
// N(mu(S), diag(sigma2(S))) over the 128-d context, samples the initial
// context h0 = mu + sigma * eps with the reparameterization trick, and
// provides the KL(N(mu, sigma2) || N(0, I)) regularizer.
//
// sigma2 is produced as exp(raw) so positivity holds by construction; the
// distribution is carried around as (mu, logvar) with logvar = ln sigma2.
template <typename T>
struct StoryEncoder {
  Linear<T> fc;         // 128*T -> 128 trunk
  BatchNorm<T> bn;      // 128
  Linear<T> fc_mu;      // 128 -> 128
  Linear<T> fc_logvar;  // 128 -> 128
  int64_t story_len = 4;

  StoryEncoder() = default;
  StoryEncoder(const std::string& name, int64_t story_len_)
      : fc(name + ".fc", kTextDim * story_len_, kTextDim),
        bn(name + ".bn", kTextDim),
        fc_mu(name + ".mu", kTextDim, kTextDim),
        fc_logvar(name + ".logvar", kTextDim, kTextDim),
        story_len(story_len_) {}

  void collect(ParamRegistry<T>& reg) {
    fc.collect(reg);
    bn.collect(reg);
    fc_mu.collect(reg);
    fc_logvar.collect(reg);
  }

  struct Dist {
    typename Tape<T>::Val mu;      // [B, 128]
    typename Tape<T>::Val logvar;  // [B, 128]
  };

  // S_flat is [B, 128*T].
  Dist distribution(Tape<T>& tape, typename Tape<T>::Val s_flat, bool training) {
    SV_CHECK(tape.val(s_flat).rank() == 2 &&
                 tape.val(s_flat).dim(1) == kTextDim * story_len,
             "story_distribution: expected [B,", kTextDim * story_len, "], got ",
             shape_str(tape.val(s_flat).shape()));
    auto hidden = tape.relu(bn.forward(tape, fc.forward(tape, s_flat), training));
    return Dist{fc_mu.forward(tape, hidden), fc_logvar.forward(tape, hidden)};
  }

  // h0 = mu + exp(logvar / 2) ⊙ eps, with eps ~ N(0, I) supplied by the caller.
  typename Tape<T>::Val sample(Tape<T>& tape, const Dist& d,
                               typename Tape<T>::Val eps) {
    SV_CHECK(tape.val(eps).same_shape(tape.val(d.mu)),
             "reparameterized_sample: eps shape mismatch");
    auto sigma = tape.exp_act(tape.scale(d.logvar, T(0.5)));
    return tape.add(d.mu, tape.mul(sigma, eps));
  }

  // Mean over the batch of 0.5 * sum_i(mu_i^2 + sigma2_i - ln sigma2_i - 1).
  typename Tape<T>::Val kl(Tape<T>& tape, const Dist& d) {
    const int64_t batch = tape.val(d.mu).dim(0);
    auto term = tape.sub(tape.add(tape.mul(d.mu, d.mu), tape.exp_act(d.logvar)),
                         tape.add_scalar(d.logvar, T(1)));
    return tape.scale(tape.sum_all(term), T(0.5) / static_cast<T>(batch));
  }
};

}  // namespace storyviz
