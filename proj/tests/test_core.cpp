#include <doctest.h>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "storyviz/autograd.hpp"
#include "storyviz/blas.hpp"
#include "storyviz/nn.hpp"
#include "storyviz/rng.hpp"
#include "storyviz/tensor.hpp"

using namespace storyviz;
using storyviz::testing::gradcheck;
using storyviz::testing::random_tensor;
using VD = Tape<double>::Val;

namespace {

// Direct (non-GEMM) convolution used as an oracle for the lowered version.
Tensor<double> conv2d_ref(const Tensor<double>& x, const Tensor<double>& w,
                          const Tensor<double>& b, int64_t stride, int64_t pad) {
  const int64_t batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  Tensor<double> out({batch, co, ho, wo});
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t c = 0; c < co; ++c) {
      for (int64_t y = 0; y < ho; ++y) {
        for (int64_t xo = 0; xo < wo; ++xo) {
          double acc = b.numel() ? b[c] : 0.0;
          for (int64_t cc = 0; cc < ci; ++cc) {
            for (int64_t ki = 0; ki < kh; ++ki) {
              for (int64_t kj = 0; kj < kw; ++kj) {
                const int64_t sy = y * stride + ki - pad;
                const int64_t sx = xo * stride + kj - pad;
                if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                acc += x.at({n, cc, sy, sx}) * w.at({c, cc, ki, kj});
              }
            }
          }
          out.at({n, c, y, xo}) = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("rng") {
  TEST_CASE("deterministic per seed and distinct across seeds") {
    Rng a(42), b(42), c(43);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 64; ++i) {
      const uint64_t va = a.next_u64();
      all_equal = all_equal && (va == b.next_u64());
      any_diff = any_diff || (va != c.next_u64());
    }
    CHECK(all_equal);
    CHECK(any_diff);
  }

  TEST_CASE("serialization resumes the exact stream, including normal spare") {
    Rng a(7);
    for (int i = 0; i < 5; ++i) a.normal();  // leaves a cached spare
    std::ostringstream os;
    a.serialize(os);
    Rng b(0);
    std::istringstream is(os.str());
    b.deserialize(is);
    for (int i = 0; i < 100; ++i) {
      const double za = a.normal();
      const double zb = b.normal();
      CHECK(za == zb);  // bit-exact resume
      CHECK(a.next_u64() == b.next_u64());
    }
  }

  TEST_CASE("normal moments match a standard Gaussian") {
    Rng rng(123);
    const int n = 200000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double z = rng.normal();
      sum += z;
      sum2 += z * z;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(std::abs(sum2 / n - 1.0) < 0.02);
  }

  TEST_CASE("uniform_int covers its range uniformly") {
    Rng rng(5);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) counts[rng.uniform_int(7)]++;
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
  }

  TEST_CASE("derived streams are independent of draw order") {
    Rng a = Rng::derive(99, 3);
    Rng b = Rng::derive(99, 4);
    Rng a2 = Rng::derive(99, 3);
    CHECK(a.next_u64() == a2.next_u64());
    CHECK(a.next_u64() != b.next_u64());
  }
}

TEST_SUITE("tensor") {
  TEST_CASE("indexing and reshape") {
    Tensor<float> t({2, 3});
    t.at({0, 1}) = 5.0f;
    t.at({1, 2}) = 7.0f;
    CHECK(t[1] == 5.0f);
    CHECK(t[5] == 7.0f);
    auto r = t.reshaped({3, 2});
    CHECK(r.at({0, 1}) == 5.0f);
    CHECK_THROWS(t.reshaped({4, 2}));
    CHECK_THROWS(t.at({2, 0}));
  }
}

TEST_SUITE("blas") {
  TEST_CASE("gemm matches naive multiply for all transpose flags") {
    Rng rng(11);
    const int64_t m = 4, n = 5, k = 3;
    auto naive = [&](const Tensor<double>& a, const Tensor<double>& b, bool ta,
                     bool tb) {
      Tensor<double> c({m, n});
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int64_t l = 0; l < k; ++l) {
            const double av = ta ? a.at({l, i}) : a.at({i, l});
            const double bv = tb ? b.at({j, l}) : b.at({l, j});
            acc += av * bv;
          }
          c.at({i, j}) = acc;
        }
      }
      return c;
    };
    for (bool ta : {false, true}) {
      for (bool tb : {false, true}) {
        Tensor<double> a = random_tensor(ta ? Shape{k, m} : Shape{m, k}, rng);
        Tensor<double> b = random_tensor(tb ? Shape{n, k} : Shape{k, n}, rng);
        Tensor<double> c({m, n});
        gemm<double>(ta, tb, m, n, k, 1.0, a.data(), b.data(), 0.0, c.data());
        Tensor<double> ref = naive(a, b, ta, tb);
        for (int64_t i = 0; i < c.numel(); ++i) {
          CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_SUITE("autograd") {
  TEST_CASE("matmul gradients (all transpose flags)") {
    Rng rng(21);
    for (bool ta : {false, true}) {
      for (bool tb : {false, true}) {
        Param<double> a("a", random_tensor(ta ? Shape{3, 4} : Shape{4, 3}, rng));
        Param<double>
            b("b", random_tensor(tb ? Shape{5, 3} : Shape{3, 5}, rng));
        auto fn = [&]() {
          Tape<double> tape;
          auto va = tape.param(a);
          auto vb = tape.param(b);
          auto prod = tape.matmul(va, vb, ta, tb);
          auto loss = tape.sum_all(tape.mul(prod, prod));
          tape.backward(loss);
          return tape.val(loss)[0];
        };
        CHECK(gradcheck<double>({&a, &b}, fn, 1e-5) < 1e-7);
      }
    }
  }

  TEST_CASE("elementwise and broadcast op gradients") {
    Rng rng(22);
    Param<double> a("a", random_tensor({3, 4}, rng));
    Param<double> b("b", random_tensor({3, 4}, rng));
    Param<double> v("v", random_tensor({4}, rng));
    auto fn = [&]() {
      Tape<double> tape;
      auto va = tape.param(a);
      auto vb = tape.param(b);
      auto vv = tape.param(v);
      auto x = tape.mul(tape.add(va, vb), tape.sub(va, vb));
      x = tape.add_rowvec(tape.scale(x, 0.7), vv);
      x = tape.add_scalar(x, 0.3);
      auto loss = tape.mean_all(tape.mul(x, x));
      tape.backward(loss);
      return tape.val(loss)[0];
    };
    CHECK(gradcheck<double>({&a, &b, &v}, fn, 1e-5) < 1e-7);
  }

  TEST_CASE("activation gradients") {
    Rng rng(23);
    // Keep values away from the ReLU kink so finite differences are clean.
    Tensor<double> base = random_tensor({4, 5}, rng);
    for (auto& x : base.vec()) {
      if (std::abs(x) < 0.05) x += 0.2;
    }
    Param<double> a("a", base);
    int which = 0;
    auto fn = [&]() {
      Tape<double> tape;
      auto va = tape.param(a);
      VD y;
      switch (which) {
        case 0: y = tape.relu(va); break;
        case 1: y = tape.leaky_relu(va, 0.2); break;
        case 2: y = tape.tanh_act(va); break;
        case 3: y = tape.sigmoid(va); break;
        case 4: y = tape.exp_act(va); break;
        default: y = tape.log_sigmoid(va); break;
      }
      auto loss = tape.mean_all(tape.mul(y, tape.add_scalar(y, 1.0)));
      tape.backward(loss);
      return tape.val(loss)[0];
    };
    for (which = 0; which <= 5; ++which) {
      CAPTURE(which);
      CHECK(gradcheck<double>({&a}, fn, 1e-6) < 1e-6);
    }
  }

  TEST_CASE("sigmoid and log_sigmoid values are stable at extremes") {
    Tape<double> tape;
    Tensor<double> x({4});
    x[0] = -100.0; x[1] = -1.0; x[2] = 1.0; x[3] = 100.0;
    auto v = tape.constant(x);
    const auto& sig = tape.val(tape.sigmoid(v));
    CHECK(sig[0] == doctest::Approx(0.0).epsilon(1e-30));
    CHECK(sig[1] == doctest::Approx(1.0 / (1.0 + std::exp(1.0))));
    CHECK(sig[3] == doctest::Approx(1.0));
    const auto& ls = tape.val(tape.log_sigmoid(v));
    CHECK(ls[0] == doctest::Approx(-100.0));
    CHECK(ls[1] == doctest::Approx(std::log(1.0 / (1.0 + std::exp(1.0)))));
    CHECK(std::isfinite(ls[3]));
  }

  TEST_CASE("conv2d forward matches the direct convolution oracle") {
    Rng rng(24);
    struct Case { int64_t ci, co, h, w, k, s, p; };
    for (const Case& c : {Case{3, 4, 6, 6, 3, 1, 1}, Case{2, 5, 8, 8, 4, 2, 1},
                          Case{3, 2, 4, 4, 4, 4, 0}, Case{1, 3, 5, 7, 3, 1, 2}}) {
      Tensor<double> x = random_tensor({2, c.ci, c.h, c.w}, rng);
      Tensor<double> w = random_tensor({c.co, c.ci, c.k, c.k}, rng);
      Tensor<double> b = random_tensor({c.co}, rng);
      Tape<double> tape;
      auto out = tape.conv2d(tape.constant(x), tape.constant(w), tape.constant(b),
                             c.s, c.p);
      Tensor<double> ref = conv2d_ref(x, w, b, c.s, c.p);
      REQUIRE(tape.val(out).shape() == ref.shape());
      for (int64_t i = 0; i < ref.numel(); ++i) {
        CHECK(tape.val(out)[i] == doctest::Approx(ref[i]).epsilon(1e-10));
      }
    }
  }

  TEST_CASE("conv2d gradients") {
    Rng rng(25);
    Param<double> x("x", random_tensor({2, 2, 5, 5}, rng));
    Param<double> w("w", random_tensor({3, 2, 3, 3}, rng));
    Param<double> b("b", random_tensor({3}, rng));
    int64_t stride = 1, pad = 1;
    auto fn = [&]() {
      Tape<double> tape;
      auto out = tape.conv2d(tape.param(x), tape.param(w), tape.param(b), stride, pad);
      auto loss = tape.mean_all(tape.mul(out, out));
      tape.backward(loss);
      return tape.val(loss)[0];
    };
    CHECK(gradcheck<double>({&x, &w, &b}, fn, 1e-5) < 1e-6);
    stride = 2; pad = 1;
    CHECK(gradcheck<double>({&x, &w, &b}, fn, 1e-5) < 1e-6);
  }

  TEST_CASE("upsample2x values and gradients") {
    Rng rng(26);
    Param<double> x("x", random_tensor({2, 3, 3, 4}, rng));
    {
      Tape<double> tape;
      auto up = tape.upsample2x(tape.param(x));
      const auto& v = tape.val(up);
      REQUIRE(v.shape() == Shape{2, 3, 6, 8});
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 3; ++c)
          for (int64_t y = 0; y < 6; ++y)
            for (int64_t xx = 0; xx < 8; ++xx)
              CHECK(v.at({n, c, y, xx}) == x.value.at({n, c, y / 2, xx / 2}));
    }
    auto fn = [&]() {
      Tape<double> tape;
      auto up = tape.upsample2x(tape.param(x));
      auto loss = tape.mean_all(tape.mul(up, tape.add_scalar(up, 0.5)));
      tape.backward(loss);
      return tape.val(loss)[0];
    };
    CHECK(gradcheck<double>({&x}, fn, 1e-5) < 1e-7);
  }

  TEST_CASE("batchnorm training mode normalises and matches gradcheck") {
    Rng rng(27);
    for (Shape shape : {Shape{6, 3}, Shape{3, 2, 4, 4}}) {
      Param<double> x("x", random_tensor(shape, rng, 1.5));
      Param<double> gamma("bn.gamma", random_tensor({shape[1]}, rng, 0.3));
      Param<double> beta("bn.beta", random_tensor({shape[1]}, rng, 0.3));
      for (auto& g : gamma.value.vec()) g += 1.0;
      Tensor<double> rm = Tensor<double>::zeros({shape[1]});
      Tensor<double> rv = Tensor<double>::full({shape[1]}, 1.0);

      {
        // With unit gamma and zero beta the output has zero mean, unit var.
        Tape<double> tape;
        Param<double> g1("g", Tensor<double>::full({shape[1]}, 1.0));
        Param<double> b0("b", Tensor<double>::zeros({shape[1]}));
        Tensor<double> rm2 = rm, rv2 = rv;
        auto y = tape.batchnorm(tape.param(x), tape.param(g1), tape.param(b0), rm2,
                                rv2, 0.1, 1e-8, true);
        const auto& v = tape.val(y);
        // Each feature is normalised, so overall mean is ~0 and mean square ~1.
        double s = 0.0, s2 = 0.0;
        for (int64_t i = 0; i < v.numel(); ++i) {
          s += v[i];
          s2 += v[i] * v[i];
        }
        CHECK(std::abs(s / v.numel()) < 1e-10);
        CHECK(s2 / v.numel() == doctest::Approx(1.0).epsilon(1e-6));
      }

      auto fn = [&]() {
        Tape<double> tape;
        Tensor<double> rm2 = rm, rv2 = rv;  // keep running stats fixed across calls
        auto y = tape.batchnorm(tape.param(x), tape.param(gamma), tape.param(beta),
                                rm2, rv2, 0.1, 1e-8, true);
        auto loss = tape.mean_all(tape.mul(y, tape.add_scalar(y, 0.3)));
        tape.backward(loss);
        return tape.val(loss)[0];
      };
      // Step 1e-4: many batchnorm input gradients are ~1e-11 by construction
      // (the batch couples elements), so smaller steps are roundoff-dominated.
      CHECK(gradcheck<double>({&x, &gamma, &beta}, fn, 1e-4) < 1e-5);
    }
  }

  TEST_CASE("batchnorm eval mode uses running estimates") {
    Rng rng(28);
    Param<double> x("x", random_tensor({4, 3}, rng));
    Param<double> gamma("g", Tensor<double>::full({3}, 2.0));
    Param<double> beta("b", Tensor<double>::full({3}, -1.0));
    Tensor<double> rm({3});
    Tensor<double> rv({3});
    rm[0] = 0.5; rm[1] = -0.25; rm[2] = 0.0;
    rv[0] = 4.0; rv[1] = 1.0; rv[2] = 0.25;
    Tape<double> tape;
    auto y = tape.batchnorm(tape.param(x), tape.param(gamma), tape.param(beta), rm,
                            rv, 0.1, 0.0, false);
    const auto& v = tape.val(y);
    for (int64_t n = 0; n < 4; ++n) {
      for (int64_t c = 0; c < 3; ++c) {
        const double expect =
            2.0 * (x.value.at({n, c}) - rm[c]) / std::sqrt(rv[c]) - 1.0;
        CHECK(v.at({n, c}) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
    // Running stats must be untouched by eval mode.
    CHECK(rm[0] == 0.5);
    CHECK(rv[2] == 0.25);
  }

  TEST_CASE("batchnorm updates running stats with unbiased variance") {
    Tensor<double> xv({4, 1});
    xv[0] = 1.0; xv[1] = 2.0; xv[2] = 3.0; xv[3] = 4.0;
    Param<double> x("x", xv);
    Param<double> g("g", Tensor<double>::full({1}, 1.0));
    Param<double> b("b", Tensor<double>::zeros({1}));
    Tensor<double> rm = Tensor<double>::zeros({1});
    Tensor<double> rv = Tensor<double>::full({1}, 1.0);
    Tape<double> tape;
    tape.batchnorm(tape.param(x), tape.param(g), tape.param(b), rm, rv, 0.1, 1e-12,
                   true);
    // Batch mean 2.5; biased var 1.25; unbiased var 5/3.
    CHECK(rm[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5));
    CHECK(rv[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (5.0 / 3.0)));
  }

  TEST_CASE("shape ops: concat, gather, replicate, reshape gradients") {
    Rng rng(29);
    Param<double> a("a", random_tensor({3, 2}, rng));
    Param<double> b("b", random_tensor({3, 4}, rng));
    Param<double> c("c", random_tensor({2, 2, 2, 3}, rng));
    Param<double> d("d", random_tensor({2, 3, 2, 3}, rng));
    auto fn = [&]() {
      Tape<double> tape;
      auto cat = tape.concat_cols({tape.param(a), tape.param(b)});
      auto gathered = tape.gather_rows(cat, {2, 0, 0, 1});
      auto rep = tape.replicate_hw(gathered, 2, 3);     // [4, 6, 2, 3]
      auto chan = tape.concat_channels(tape.param(c), tape.param(d));  // [2,5,2,3]
      auto flat_a = tape.reshape(rep, {4 * 6 * 2 * 3});
      auto flat_b = tape.reshape(chan, {2 * 5 * 2 * 3});
      auto la = tape.sum_all(tape.mul(flat_a, flat_a));
      auto lb = tape.sum_all(tape.mul(flat_b, tape.add_scalar(flat_b, 1.0)));
      auto loss = tape.add(la, lb);
      tape.backward(loss);
      return tape.val(loss)[0];
    };
    CHECK(gradcheck<double>({&a, &b, &c, &d}, fn, 1e-5) < 1e-7);
  }

  TEST_CASE("dynamic_conv1d matches brute force and gradchecks") {
    Rng rng(30);
    const int64_t batch = 2, len = 9, ch = 3, klen = 4, pad_left = 1;
    Param<double> sig("s", random_tensor({batch, len}, rng));
    Param<double> filt("f", random_tensor({batch, ch, klen}, rng));
    {
      Tape<double> tape;
      auto out = tape.dynamic_conv1d(tape.param(sig), tape.param(filt), pad_left);
      const auto& v = tape.val(out);
      REQUIRE(v.shape() == Shape{batch, ch, len});
      for (int64_t bb = 0; bb < batch; ++bb) {
        for (int64_t c = 0; c < ch; ++c) {
          for (int64_t q = 0; q < len; ++q) {
            double acc = 0.0;
            for (int64_t k = 0; k < klen; ++k) {
              const int64_t s_idx = q + k - pad_left;
              if (s_idx >= 0 && s_idx < len) {
                acc += filt.value.at({bb, c, k}) * sig.value.at({bb, s_idx});
              }
            }
            CHECK(v.at({bb, c, q}) == doctest::Approx(acc).epsilon(1e-12));
          }
        }
      }
    }
    auto fn = [&]() {
      Tape<double> tape;
      auto out = tape.dynamic_conv1d(tape.param(sig), tape.param(filt), pad_left);
      auto loss = tape.mean_all(tape.mul(out, tape.add_scalar(out, 0.25)));
      tape.backward(loss);
      return tape.val(loss)[0];
    };
    CHECK(gradcheck<double>({&sig, &filt}, fn, 1e-5) < 1e-7);
  }

  TEST_CASE("detach blocks gradient flow") {
    Param<double> a("a", Tensor<double>::full({2, 2}, 3.0));
    Tape<double> tape;
    auto va = tape.param(a);
    auto stopped = tape.detach(tape.mul(va, va));
    auto loss = tape.sum_all(tape.mul(stopped, va));
    tape.backward(loss);
    // d/da of sum(9 * a) with the square detached: constant 9.
    for (int64_t i = 0; i < 4; ++i) CHECK(a.grad[i] == doctest::Approx(9.0));
  }
}

TEST_SUITE("nn") {
  TEST_CASE("linear layer matches manual affine map and gradchecks") {
    Rng rng(31);
    Linear<double> lin("lin", 4, 3);
    ParamRegistry<double> reg;
    lin.collect(reg);
    Rng init(5);
    init_params<double>(reg, init);
    for (auto& v : lin.weight.value.vec()) v = rng.normal() * 0.3;
    for (auto& v : lin.bias.value.vec()) v = rng.normal() * 0.3;
    Tensor<double> x = random_tensor({2, 4}, rng);
    Tape<double> tape;
    auto y = lin.forward(tape, tape.constant(x));
    for (int64_t n = 0; n < 2; ++n) {
      for (int64_t o = 0; o < 3; ++o) {
        double acc = lin.bias.value[o];
        for (int64_t i = 0; i < 4; ++i) acc += x.at({n, i}) * lin.weight.value.at({o, i});
        CHECK(tape.val(y).at({n, o}) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
    Param<double> px("x", x);
    auto fn = [&]() {
      Tape<double> t2;
      auto out = lin.forward(t2, t2.param(px));
      auto loss = t2.mean_all(t2.mul(out, out));
      t2.backward(loss);
      return t2.val(loss)[0];
    };
    CHECK(gradcheck<double>({&px, &lin.weight, &lin.bias}, fn, 1e-5) < 1e-7);
  }

  TEST_CASE("init_params is deterministic and respects parameter roles") {
    Linear<float> lin("layer", 8, 8);
    BatchNorm<float> bn("layer.bn", 8);
    ParamRegistry<float> reg;
    lin.collect(reg);
    bn.collect(reg);
    Rng r1(77);
    init_params<float>(reg, r1);
    std::vector<float> w1 = lin.weight.value.vec();
    CHECK(bn.gamma.value[0] == 1.0f);
    CHECK(bn.beta.value[3] == 0.0f);
    CHECK(lin.bias.value[2] == 0.0f);
    Rng r2(77);
    init_params<float>(reg, r2);
    CHECK(lin.weight.value.vec() == w1);
    Rng r3(78);
    init_params<float>(reg, r3);
    CHECK(lin.weight.value.vec() != w1);
  }

  TEST_CASE("adam single step matches the closed-form update") {
    Param<float> p("p", Tensor<float>::full({2}, 1.0f));
    Adam<float> opt({&p}, 0.1f, 0.9f, 0.999f, 1e-8f);
    p.grad[0] = 0.5f;
    p.grad[1] = -2.0f;
    opt.step();
    // After one step: mhat = g, vhat = g^2 (bias-corrected), so the update is
    // lr * g / (|g| + eps) = lr * sign(g) up to eps.
    CHECK(p.value[0] == doctest::Approx(1.0f - 0.1f * (0.5f / (0.5f + 1e-8f))));
    CHECK(p.value[1] == doctest::Approx(1.0f + 0.1f * (2.0f / (2.0f + 1e-8f))));
    CHECK(opt.step_count() == 1);
  }

  TEST_CASE("adam converges on a quadratic") {
    Param<double> p("p", Tensor<double>::full({3}, 4.0));
    Adam<double> opt({&p}, 0.05, 0.9, 0.999);
    for (int it = 0; it < 2000; ++it) {
      opt.zero_grad();
      for (int64_t i = 0; i < 3; ++i) p.grad[i] = 2.0 * (p.value[i] - 1.5);
      opt.step();
    }
    for (int64_t i = 0; i < 3; ++i) CHECK(p.value[i] == doctest::Approx(1.5).epsilon(1e-3));
  }
}
