#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "storyviz/context_encoder.hpp"

using namespace storyviz;
using storyviz::testing::gradcheck;
using storyviz::testing::gradcheck_sampled;
using storyviz::testing::random_tensor;
using VD = Tape<double>::Val;

namespace {

// Plain-loop oracle for the dynamically filtered convolution: the signal is
// zero-padded with pad_left zeros on the left and (klen - 1 - pad_left) on
// the right, then cross-correlated per channel.
Tensor<double> dynconv_ref(const Tensor<double>& sig, const Tensor<double>& bank,
                           int64_t pad_left) {
  const int64_t batch = sig.dim(0), len = sig.dim(1);
  const int64_t ch = bank.dim(1), klen = bank.dim(2);
  Tensor<double> out({batch, ch, len});
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < ch; ++c) {
      for (int64_t q = 0; q < len; ++q) {
        double acc = 0.0;
        for (int64_t k = 0; k < klen; ++k) {
          const int64_t p = q + k - pad_left;
          if (p < 0 || p >= len) continue;
          acc += bank.at({b, c, k}) * sig.at({b, p});
        }
        out.at({b, c, q}) = acc;
      }
    }
  }
  return out;
}

void zero_params(ParamRegistry<double>& reg) {
  for (auto* p : reg.params) p->value.vec().assign(p->numel(), 0.0);
}

}  // namespace

TEST_SUITE("context_encoder") {
  TEST_CASE("padding splits 31 left / 32 right and preserves length") {
    CHECK(kFilterPadLeft == 31);
    CHECK(kFilterLen - 1 - kFilterPadLeft == 32);
    CHECK(kGistDim == 2048);
    Tape<double> tape;
    Rng rng(1);
    auto sig = tape.constant(random_tensor({2, kHiddenDim}, rng));
    auto bank = tape.constant(random_tensor({2, kFilterChannels, kFilterLen}, rng));
    auto out = tape.dynamic_conv1d(sig, bank, kFilterPadLeft);
    CHECK(tape.val(out).dim(2) == kHiddenDim);
  }

  TEST_CASE("dynamic convolution matches the plain-loop oracle") {
    Rng rng(9);
    Tensor<double> sig = random_tensor({3, kHiddenDim}, rng);
    Tensor<double> bank = random_tensor({3, kFilterChannels, kFilterLen}, rng);
    Tensor<double> want = dynconv_ref(sig, bank, kFilterPadLeft);
    Tape<double> tape;
    auto got = tape.dynamic_conv1d(tape.constant(sig), tape.constant(bank),
                                   kFilterPadLeft);
    for (int64_t i = 0; i < want.numel(); ++i) {
      CHECK(std::abs(tape.val(got)[i] - want[i]) < 1e-9);
    }
  }

  TEST_CASE("a delta filter at the pad offset reproduces the signal") {
    Rng rng(4);
    Tensor<double> sig = random_tensor({2, kHiddenDim}, rng);
    Tensor<double> bank({2, kFilterChannels, kFilterLen});
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t c = 0; c < kFilterChannels; ++c)
        bank.at({b, c, kFilterPadLeft}) = 1.0;
    Tape<double> tape;
    auto out = tape.dynamic_conv1d(tape.constant(sig), tape.constant(bank),
                                   kFilterPadLeft);
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t c = 0; c < kFilterChannels; ++c)
        for (int64_t q = 0; q < kHiddenDim; ++q)
          CHECK(tape.val(out).at({b, c, q}) == sig.at({b, q}));
  }

  TEST_CASE("convolution is linear in the filter bank") {
    Rng rng(12);
    Tensor<double> sig = random_tensor({2, kHiddenDim}, rng);
    Tensor<double> f1 = random_tensor({2, kFilterChannels, kFilterLen}, rng);
    Tensor<double> f2 = random_tensor({2, kFilterChannels, kFilterLen}, rng);
    Tensor<double> fsum({2, kFilterChannels, kFilterLen});
    for (int64_t i = 0; i < fsum.numel(); ++i) fsum[i] = f1[i] + f2[i];

    Text2GistCell<double> cell("t2g");
    ParamRegistry<double> reg;
    cell.collect(reg);
    Rng init(3);
    init_params(reg, init);

    Tape<double> tape;
    auto i_t = tape.constant(random_tensor({2, kHiddenDim}, rng));
    auto h_prev = tape.constant(sig);
    Tensor<double> force_z({2, kHiddenDim});  // z = 0 keeps h_t == h_prev
    auto o1 = cell.step(tape, i_t, h_prev, true, &force_z, nullptr, &f1).o;
    auto o2 = cell.step(tape, i_t, h_prev, true, &force_z, nullptr, &f2).o;
    auto os = cell.step(tape, i_t, h_prev, true, &force_z, nullptr, &fsum).o;
    for (int64_t i = 0; i < tape.val(os).numel(); ++i) {
      CHECK(std::abs(tape.val(os)[i] - tape.val(o1)[i] - tape.val(o2)[i]) < 1e-9);
    }
  }

  TEST_CASE("gru with zero weights halves the hidden state") {
    GruGates<double> gates("g", 6, 5);
    ParamRegistry<double> reg;
    gates.collect(reg);
    zero_params(reg);
    Rng rng(2);
    Tensor<double> g_prev = random_tensor({3, 5}, rng);
    Tape<double> tape;
    auto st = gates.step(tape, tape.constant(random_tensor({3, 6}, rng)),
                         tape.constant(g_prev));
    for (int64_t i = 0; i < g_prev.numel(); ++i) {
      CHECK(tape.val(st.h)[i] == doctest::Approx(0.5 * g_prev[i]).epsilon(1e-12));
      CHECK(tape.val(st.z)[i] == 0.5);
      CHECK(tape.val(st.r)[i] == 0.5);
    }
  }

  TEST_CASE("gru at zero state reduces to z (.) tanh(Wh x + bh)") {
    GruGates<double> gates("g", 4, 3);
    ParamRegistry<double> reg;
    gates.collect(reg);
    Rng rng(8);
    init_params(reg, rng);
    Tensor<double> x = random_tensor({2, 4}, rng);

    Tape<double> tape;
    auto st = gates.step(tape, tape.constant(x), tape.constant(Tensor<double>({2, 3})));
    for (int64_t b = 0; b < 2; ++b) {
      for (int64_t j = 0; j < 3; ++j) {
        double zpre = gates.bz.value[j], hpre = gates.bh.value[j];
        for (int64_t i = 0; i < 4; ++i) {
          zpre += gates.wz.value.at({j, i}) * x.at({b, i});
          hpre += gates.wh.value.at({j, i}) * x.at({b, i});
        }
        const double want = 1.0 / (1.0 + std::exp(-zpre)) * std::tanh(hpre);
        CHECK(tape.val(st.h).at({b, j}) == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("forcing z to zero passes the state through unchanged") {
    Text2GistCell<double> cell("t2g");
    ParamRegistry<double> reg;
    cell.collect(reg);
    Rng rng(21);
    init_params(reg, rng);
    Tensor<double> h_prev = random_tensor({2, kHiddenDim}, rng);
    Tensor<double> force_z({2, kHiddenDim});
    Tape<double> tape;
    auto st = cell.step(tape, tape.constant(random_tensor({2, kHiddenDim}, rng)),
                        tape.constant(h_prev), true, &force_z);
    for (int64_t i = 0; i < h_prev.numel(); ++i) {
      CHECK(tape.val(st.h)[i] == h_prev[i]);
    }
  }

  TEST_CASE("text2gist with zero weights halves the state and emits zero gist") {
    Text2GistCell<double> cell("t2g");
    ParamRegistry<double> reg;
    cell.collect(reg);
    zero_params(reg);
    Rng rng(6);
    Tensor<double> h_prev = random_tensor({3, kHiddenDim}, rng);
    Tape<double> tape;
    auto st = cell.step(tape, tape.constant(random_tensor({3, kHiddenDim}, rng)),
                        tape.constant(h_prev), true);
    for (int64_t i = 0; i < h_prev.numel(); ++i) {
      CHECK(tape.val(st.h)[i] == doctest::Approx(0.5 * h_prev[i]).epsilon(1e-12));
    }
    for (int64_t i = 0; i < tape.val(st.o).numel(); ++i) {
      CHECK(tape.val(st.o)[i] == 0.0);  // filter = tanh(0 * 0 + 0) = 0
    }
  }

  TEST_CASE("sentence gru output equals its new hidden state") {
    SentenceGru<double> gru("sg", 32);
    ParamRegistry<double> reg;
    gru.collect(reg);
    Rng rng(13);
    init_params(reg, rng);
    Tape<double> tape;
    auto st = gru.step(tape, tape.constant(random_tensor({2, kTextDim}, rng)),
                       tape.constant(random_tensor({2, 32}, rng)),
                       tape.constant(random_tensor({2, kHiddenDim}, rng)), true);
    for (int64_t i = 0; i < tape.val(st.i).numel(); ++i) {
      CHECK(tape.val(st.i)[i] == tape.val(st.g)[i]);
    }
  }

  TEST_CASE("unrolled stack is causal: sentence t only affects gists >= t") {
    const int64_t T = 4, B = 2, noise = 32;
    SentenceGru<double> gru("sg", noise);
    Text2GistCell<double> cell("t2g");
    ParamRegistry<double> reg;
    gru.collect(reg);
    cell.collect(reg);
    Rng rng(31);
    init_params(reg, rng);

    std::vector<Tensor<double>> sentences, eps;
    for (int64_t t = 0; t < T; ++t) {
      sentences.push_back(random_tensor({B, kTextDim}, rng));
      eps.push_back(random_tensor({B, noise}, rng));
    }
    Tensor<double> g0 = random_tensor({B, kHiddenDim}, rng);
    Tensor<double> h0 = random_tensor({B, kHiddenDim}, rng);

    auto unroll = [&](const std::vector<Tensor<double>>& sents) {
      Tape<double> tape;
      auto g = tape.constant(g0);
      auto h = tape.constant(h0);
      std::vector<Tensor<double>> gists, inputs;
      for (int64_t t = 0; t < T; ++t) {
        auto sg = gru.step(tape, tape.constant(sents[t]), tape.constant(eps[t]), g,
                           true);
        g = sg.g;
        auto st = cell.step(tape, sg.i, h, true);
        h = st.h;
        gists.push_back(tape.val(st.o));
        inputs.push_back(tape.val(sg.i));
      }
      return std::pair(gists, inputs);
    };

    auto [base_gists, base_inputs] = unroll(sentences);
    auto perturbed = sentences;
    perturbed[2].at({0, 5}) += 0.25;
    auto [pert_gists, pert_inputs] = unroll(perturbed);

    for (int64_t t = 0; t < 2; ++t) {
      CHECK(pert_gists[t].vec() == base_gists[t].vec());   // bit-identical
      CHECK(pert_inputs[t].vec() == base_inputs[t].vec());
    }
    for (int64_t t = 2; t < T; ++t) {
      CHECK(pert_gists[t].vec() != base_gists[t].vec());
    }
  }

  TEST_CASE("gru_step gradients match finite differences") {
    GruGates<double> gates("g", 5, 7);
    ParamRegistry<double> reg;
    gates.collect(reg);
    Rng rng(41);
    init_params(reg, rng);
    Tensor<double> x = random_tensor({3, 5}, rng);
    Tensor<double> g_prev = random_tensor({3, 7}, rng);
    Tensor<double> w = random_tensor({3, 7}, rng);

    auto loss = [&]() -> double {
      Tape<double> tape;
      auto st = gates.step(tape, tape.constant(x), tape.constant(g_prev));
      auto total = tape.sum_all(tape.mul(st.h, tape.constant(w)));
      const double v = tape.val(total)[0];
      tape.backward(total);
      return v;
    };
    const double worst =
        gradcheck<double>({reg.params.begin(), reg.params.end()}, loss, 1e-5);
    CHECK(worst < 1e-4);
  }

  TEST_CASE("filter_network gradients match finite differences") {
    FilterNetwork<double> fn("f");
    ParamRegistry<double> reg;
    fn.collect(reg);
    Rng rng(43);
    init_params(reg, rng);
    Tensor<double> i_t = random_tensor({3, kHiddenDim}, rng);
    Tensor<double> w = random_tensor({3, kFilterChannels, kFilterLen}, rng);

    auto loss = [&]() -> double {
      Tape<double> tape;
      auto bank = fn.forward(tape, tape.constant(i_t), true);
      auto total = tape.sum_all(tape.mul(bank, tape.constant(w)));
      const double v = tape.val(total)[0];
      tape.backward(total);
      return v;
    };
    Rng pick(2);
    const double worst = gradcheck_sampled<double>(
        {reg.params.begin(), reg.params.end()}, loss, 1e-5, 24, pick);
    CHECK(worst < 1e-4);
  }

  TEST_CASE("text2gist_step gradients match finite differences") {
    // FD step chosen by a step-size sweep: the error is V-shaped in h
    // (roundoff below ~2e-4, truncation above ~5e-4), so 3e-4 sits at the
    // bottom with an order of magnitude of margin against the 1e-4 gate.
    Text2GistCell<double> cell("t2g");
    ParamRegistry<double> reg;
    cell.collect(reg);
    Rng rng(47);
    init_params(reg, rng);
    Tensor<double> i_t = random_tensor({4, kHiddenDim}, rng);
    Tensor<double> h_prev = random_tensor({4, kHiddenDim}, rng);
    Tensor<double> w = random_tensor({4, kGistDim}, rng);

    auto loss = [&]() -> double {
      Tape<double> tape;
      auto st = cell.step(tape, tape.constant(i_t), tape.constant(h_prev), true);
      auto total = tape.sum_all(tape.mul(st.o, tape.constant(w)));
      const double v = tape.val(total)[0];
      tape.backward(total);
      return v;
    };
    Rng pick(5);
    const double worst = gradcheck_sampled<double>(
        {reg.params.begin(), reg.params.end()}, loss, 3e-4, 16, pick);
    CHECK(worst < 1e-4);
  }

  TEST_CASE("full two-layer step gradients reach the sentence projection") {
    SentenceGru<double> gru("sg", 8);
    Text2GistCell<double> cell("t2g");
    ParamRegistry<double> reg;
    gru.collect(reg);
    cell.collect(reg);
    Rng rng(53);
    init_params(reg, rng);
    Tensor<double> s = random_tensor({4, kTextDim}, rng);
    Tensor<double> eps = random_tensor({4, 8}, rng);
    Tensor<double> g0 = random_tensor({4, kHiddenDim}, rng);
    Tensor<double> h0 = random_tensor({4, kHiddenDim}, rng);
    Tensor<double> w = random_tensor({4, kGistDim}, rng);

    auto loss = [&]() -> double {
      Tape<double> tape;
      auto sg = gru.step(tape, tape.constant(s), tape.constant(eps),
                         tape.constant(g0), true);
      auto st = cell.step(tape, sg.i, tape.constant(h0), true);
      auto total = tape.sum_all(tape.mul(st.o, tape.constant(w)));
      const double v = tape.val(total)[0];
      tape.backward(total);
      return v;
    };
    // Six stacked nonlinearities compound the FD truncation error; the sweep
    // bottoms out near 7e-5 at h = 2e-4, so this composite check gets a wider
    // gate while the per-op checks above keep the tight one.
    Rng pick(7);
    const double worst = gradcheck_sampled<double>(
        {reg.params.begin(), reg.params.end()}, loss, 2e-4, 10, pick);
    CHECK(worst < 5e-4);
  }
}
