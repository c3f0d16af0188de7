#include <doctest.h>

#include "gradcheck.hpp"
#include "movie/optim.hpp"
#include "movie/tensor.hpp"

using namespace movie;
using gradcheck::random_tensor;

namespace {

// Explicit-materialization broadcast oracle: expand both operands to the full
// output shape element by element, then combine.
std::vector<double> bcast_oracle(const Tensor<double>& a, const Tensor<double>& b,
                                 bool is_mul, Shape& out_shape) {
  auto plan = movie::detail::broadcast(a.shape(), b.shape());
  out_shape = plan.out;
  std::vector<double> out(numel(plan.out));
  movie::detail::for_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = is_mul ? a.data()[ia] * b.data()[ib] : a.data()[ia] + b.data()[ib];
  });
  return out;
}

// Naive quadruple-loop sliding-window convolution.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k,
                                std::size_t stride, std::size_t pad) {
  std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::size_t cout = k.dim(0), ks = k.dim(2);
  std::size_t ho = (h + 2 * pad - ks) / stride + 1;
  std::size_t wo = (w + 2 * pad - ks) / stride + 1;
  std::vector<double> out(cout * ho * wo, 0.0);
  for (std::size_t oc = 0; oc < cout; ++oc)
    for (std::size_t oi = 0; oi < ho; ++oi)
      for (std::size_t oj = 0; oj < wo; ++oj) {
        double acc = 0;
        for (std::size_t ic = 0; ic < cin; ++ic)
          for (std::size_t ki = 0; ki < ks; ++ki)
            for (std::size_t kj = 0; kj < ks; ++kj) {
              std::ptrdiff_t ii = std::ptrdiff_t(oi * stride + ki) - std::ptrdiff_t(pad);
              std::ptrdiff_t jj = std::ptrdiff_t(oj * stride + kj) - std::ptrdiff_t(pad);
              if (ii < 0 || jj < 0 || ii >= std::ptrdiff_t(h) || jj >= std::ptrdiff_t(w))
                continue;
              acc += x.data()[(ic * h + ii) * w + jj] *
                     k.data()[((oc * cin + ic) * ks + ki) * ks + kj];
            }
        out[(oc * ho + oi) * wo + oj] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("elementwise examples") {
  Tensor<double> v({2}, {3.0, -1.5});
  auto id = mul(v, Tensor<double>::ones({2}));
  CHECK(id.data() == std::vector<double>{3.0, -1.5});

  auto s = add(Tensor<double>({2}, {1, 2}), Tensor<double>({2}, {0.5, -2}));
  CHECK(s.data()[0] == doctest::Approx(1.5));
  CHECK(s.data()[1] == doctest::Approx(0.0));

  auto r = relu(Tensor<double>({3}, {-3, 0, 2}));
  CHECK(r.data() == std::vector<double>{0, 0, 2});

  CHECK_THROWS_AS(add(Tensor<double>::ones({3}), Tensor<double>::ones({2})), ShapeError);
  CHECK_THROWS_WITH_AS(add(Tensor<double>::ones({3}), Tensor<double>::ones({2})),
                       doctest::Contains("[3]"), ShapeError);
}

TEST_CASE("broadcast agrees with explicit materialization exactly") {
  Rng rng(11);
  std::vector<std::pair<Shape, Shape>> cases = {
      {{3}, {3}},       {{2, 3}, {3}},       {{3}, {2, 3}},
      {{4, 1, 3}, {1, 5, 3}}, {{5, 1}, {1, 4}}, {{2, 3, 4}, {1}},
      {{6, 1, 1}, {6, 2, 2}}};
  for (auto& [sa, sb] : cases) {
    auto a = random_tensor(sa, rng, false);
    auto b = random_tensor(sb, rng, false);
    for (bool is_mul : {false, true}) {
      Shape os;
      auto expect = bcast_oracle(a, b, is_mul, os);
      auto got = is_mul ? mul(a, b) : add(a, b);
      CHECK(got.shape() == os);
      CHECK(got.data() == expect);  // bit-exact
    }
  }
}

TEST_CASE("conv2d examples") {
  // 1x1 identity over channels
  Tensor<double> x({2, 3, 3}, std::vector<double>(18, 0.0));
  Rng rng(3);
  for (auto& v : x.data()) v = rng.uniform(-1, 1);
  std::vector<double> kd(2 * 2, 0.0);
  kd[0 * 2 + 0] = 1;
  kd[1 * 2 + 1] = 1;
  Tensor<double> k({2, 2, 1, 1}, kd);
  CHECK(conv2d(x, k).data() == x.data());

  // 3x3 ones over 3x3 ones -> [[9]]
  auto y = conv2d(Tensor<double>::ones({1, 3, 3}), Tensor<double>::ones({1, 1, 3, 3}));
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y.data()[0] == doctest::Approx(9.0));

  // all-zero kernel
  auto z = conv2d(x, Tensor<double>::zeros({4, 2, 3, 3}), 1, 1);
  CHECK(z.shape() == Shape{4, 3, 3});
  for (double v : z.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(conv2d(Tensor<double>::ones({1, 2, 2}), Tensor<double>::ones({1, 1, 3, 3})),
                  ShapeError);
}

TEST_CASE("conv2d matches naive sliding-window oracle") {
  Rng rng(42);
  int cases = 0;
  for (std::size_t k : {1u, 3u})
    for (std::size_t stride : {1u, 2u})
      for (std::size_t pad : {0u, 1u})
        for (int rep = 0; rep < 3; ++rep) {
          std::size_t cin = 1 + rng.index(4), cout = 1 + rng.index(4);
          std::size_t h = k + rng.index(8 - k + 1), w = k + rng.index(8 - k + 1);
          auto x = random_tensor({cin, h, w}, rng, false);
          auto kk = random_tensor({cout, cin, k, k}, rng, false);
          auto got = conv2d(x, kk, stride, pad);
          auto want = conv_oracle(x, kk, stride, pad);
          REQUIRE(got.data().size() == want.size());
          for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(got.data()[i] == doctest::Approx(want[i]).epsilon(1e-10));
          cases++;
        }
  CHECK(cases == 24);
}

TEST_CASE("affine examples") {
  Tensor<double> x({2}, {1, 2});
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  CHECK(affine(x, eye).data() == x.data());

  Tensor<double> b({2}, {3, 4});
  auto y = affine(x, eye, &b);
  CHECK(y.data()[0] == doctest::Approx(4));
  CHECK(y.data()[1] == doctest::Approx(6));

  Tensor<double> w({2, 1}, {2, 2});
  auto z = affine(Tensor<double>({2}, {1, -1}), w);
  CHECK(z.data()[0] == doctest::Approx(0));

  CHECK_THROWS_AS(affine(Tensor<double>::ones({3}), eye), ShapeError);
}

TEST_CASE("global_avg_pool examples") {
  auto c = global_avg_pool(Tensor<double>::full({3, 2, 2}, 2.5));
  CHECK(c.shape() == Shape{3});
  for (double v : c.data()) CHECK(v == doctest::Approx(2.5));

  Tensor<double> x({1, 2, 2}, {1, 3, 5, 7});
  CHECK(global_avg_pool(x).data()[0] == doctest::Approx(4));

  Tensor<double> one({2, 1, 1}, {9, -1});
  CHECK(global_avg_pool(one).data() == one.data());
}

TEST_CASE("channel_norm examples") {
  auto g = Tensor<double>::ones({1});
  auto b = Tensor<double>::zeros({1});
  auto y = channel_norm(Tensor<double>::full({1, 2, 2}, 3.0), g, b);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.0));

  Tensor<double> x({1, 1, 2}, {-1, 1});
  auto y2 = channel_norm(x, g, b, 1e-12);
  CHECK(y2.data()[0] == doctest::Approx(-1).epsilon(1e-5));
  CHECK(y2.data()[1] == doctest::Approx(1).epsilon(1e-5));

  auto y3 = channel_norm(x, Tensor<double>::zeros({1}), Tensor<double>::full({1}, 7.0));
  for (double v : y3.data()) CHECK(v == doctest::Approx(7.0));
}

TEST_CASE("softmax_cross_entropy examples") {
  auto l1 = softmax_cross_entropy(Tensor<double>::zeros({4}), 1);
  CHECK(l1.item() == doctest::Approx(std::log(4.0)));

  auto l2 = softmax_cross_entropy(Tensor<double>({2}, {10, -10}), 0);
  CHECK(l2.item() == doctest::Approx(2.061e-9).epsilon(1e-2));

  Tensor<double> base({3}, {0.3, -1.2, 2.0});
  Tensor<double> shifted({3}, {100.3, 98.8, 102.0});
  CHECK(std::abs(softmax_cross_entropy(base, 2).item() -
                 softmax_cross_entropy(shifted, 2).item()) < 1e-6);

  CHECK_THROWS_AS(softmax_cross_entropy(base, 3), ContractError);
}

TEST_CASE("softmax_cross_entropy gradient sums to zero") {
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    auto l = random_tensor({5}, rng, true, -3, 3);
    auto loss = softmax_cross_entropy(l, rng.index(5));
    backward(loss);
    double s = 0;
    for (double g : l.grad()) s += g;
    CHECK(std::abs(s) < 1e-8);
  }
}

TEST_CASE("backward examples") {
  Tensor<double> x({3}, {0.5, -2, 1}, true);
  backward(sum(x));
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  Tensor<double> x2({2}, {1, -2}, true);
  backward(sum(mul(x2, x2)));
  CHECK(x2.grad()[0] == doctest::Approx(2));
  CHECK(x2.grad()[1] == doctest::Approx(-4));

  CHECK_THROWS_AS(backward(Tensor<double>::ones({2}, true)), ContractError);
}

TEST_CASE("backward accumulates across calls; unreachable params stay zero") {
  Tensor<double> x({2}, {1, 2}, true);
  auto loss = sum(x);
  backward(loss);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2));  // documented accumulation

  Tensor<double> unused({2}, {1, 1}, true);
  unused.zero_grad();
  Tensor<double> y({2}, {3, 4}, true);
  backward(sum(y));
  CHECK(unused.grad() == std::vector<double>{0, 0});
}

// Gradient suite: every differentiable op against central finite differences
// on >= 20 random instances each.
TEST_CASE("finite-difference gradient suite") {
  Rng rng(77);
  auto run = [&](const char* name, auto make) {
    double worst = 0;
    for (int rep = 0; rep < 20; ++rep) {
      auto [fn, inputs] = make(rep);
      auto r = gradcheck::check(fn, inputs);
      worst = std::max(worst, r.max_rel_err);
    }
    CAPTURE(std::string(name));
    CHECK(worst < 1e-4);
  };

  using Fn = std::function<Tensor<double>()>;
  using Case = std::pair<Fn, std::vector<Tensor<double>>>;

  run("add-broadcast", [&](int) -> Case {
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({3}, rng);
    return {[=] { return sum(mul(add(a, b), add(a, b))); }, {a, b}};
  });
  run("mul-broadcast", [&](int) -> Case {
    auto a = random_tensor({2, 1, 3}, rng);
    auto b = random_tensor({2, 2, 3}, rng);
    return {[=] { return sum(mul(mul(a, b), b)); }, {a, b}};
  });
  run("relu", [&](int) -> Case {
    auto a = random_tensor({7}, rng, true, -2, 2);
    // keep away from the kink
    for (auto& v : a.data())
      if (std::abs(v) < 1e-3) v = 0.1;
    return {[=] { return sum(mul(relu(a), relu(a))); }, {a}};
  });
  run("sigmoid-tanh", [&](int) -> Case {
    auto a = random_tensor({5}, rng);
    return {[=] { return sum(mul(sigmoid(a), tanh_op(a))); }, {a}};
  });
  run("conv2d", [&](int rep) -> Case {
    std::size_t k = rep % 2 ? 3 : 1, stride = 1 + rep % 2, pad = rep % 2;
    auto x = random_tensor({2, 4, 5}, rng);
    auto kk = random_tensor({3, 2, k, k}, rng);
    return {[=] {
              auto y = conv2d(x, kk, stride, pad);
              return sum(mul(y, y));
            },
            {x, kk}};
  });
  run("affine", [&](int) -> Case {
    auto x = random_tensor({3, 4}, rng);
    auto w = random_tensor({4, 2}, rng);
    auto b = random_tensor({2}, rng);
    return {[=] {
              auto wc = w;
              auto bc = b;
              auto y = affine(x, wc, &bc);
              return sum(mul(y, y));
            },
            {x, w, b}};
  });
  run("global_avg_pool", [&](int) -> Case {
    auto x = random_tensor({3, 2, 4}, rng);
    return {[=] {
              auto y = global_avg_pool(x);
              return sum(mul(y, y));
            },
            {x}};
  });
  // the norm losses get a fixed random weighting: sum of squares of a
  // standardized group is nearly constant, which starves the check of signal
  run("channel_norm", [&](int) -> Case {
    auto x = random_tensor({2, 3, 3}, rng);
    auto g = random_tensor({2}, rng, true, 0.5, 1.5);
    auto b = random_tensor({2}, rng);
    auto c = random_tensor({2, 3, 3}, rng, false);
    return {[=] { return sum(mul(channel_norm(x, g, b), c)); }, {x, g, b}};
  });
  run("row_norm", [&](int) -> Case {
    auto x = random_tensor({3, 5}, rng);
    auto g = random_tensor({5}, rng, true, 0.5, 1.5);
    auto b = random_tensor({5}, rng);
    auto c = random_tensor({3, 5}, rng, false);
    return {[=] { return sum(mul(row_norm(x, g, b), c)); }, {x, g, b}};
  });
  run("softmax_cross_entropy", [&](int rep) -> Case {
    auto l = random_tensor({6}, rng, true, -2, 2);
    std::size_t t = rep % 6;
    return {[=] { return softmax_cross_entropy(l, t); }, {l}};
  });
  run("masked_softmax", [&](int) -> Case {
    auto x = random_tensor({2, 5}, rng);
    std::vector<char> mask = {1, 1, 0, 1, 0};
    return {[=] {
              auto y = masked_softmax(x, mask);
              return sum(mul(y, y));
            },
            {x}};
  });
  run("matmul-transpose-slice-concat", [&](int) -> Case {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    return {[=] {
              auto cat = concat_rows<double>({a, b});                // 6x4
              auto s = slice_rows(cat, 1, 4);                        // 4x4
              auto y = matmul(transpose(s), slice_cols(s, 0, 2));    // 4x2
              return sum(mul(y, y));
            },
            {a, b}};
  });
  run("embedding_rows", [&](int) -> Case {
    auto t = random_tensor({5, 3}, rng);
    std::vector<std::size_t> ids = {1, 4, 1};
    return {[=] {
              auto y = embedding_rows(t, ids);
              return sum(mul(y, y));
            },
            {t}};
  });
}

TEST_CASE("gradient flows to exactly one embedding row per lookup") {
  Tensor<double> table({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  backward(sum(embedding_rows(table, {2})));
  CHECK(table.grad() == std::vector<double>{0, 0, 0, 0, 1, 1, 0, 0});
}

TEST_CASE("adam examples") {
  // zero gradient leaves parameter unchanged
  Tensor<float> p({2}, {1.0f, -2.0f});
  AdamState<float> st(2);
  adam_update(p, {0.0f, 0.0f}, st, 0.1f);
  CHECK(p.data()[0] == 1.0f);
  CHECK(p.data()[1] == -2.0f);
  CHECK(st.step_count == 1);

  // one-step hand computation: bias correction gives mhat = vhat = g
  Tensor<double> q({1}, {0.0});
  AdamState<double> st2(1);
  adam_update(q, {1.0}, st2, 0.1);
  CHECK(q.data()[0] == doctest::Approx(-0.1).epsilon(1e-6));

  // determinism: identical runs are bit-exact
  auto run = [] {
    Tensor<double> r({3}, {0.5, -0.5, 2.0});
    AdamState<double> s(3);
    adam_update(r, {0.1, -0.2, 0.3}, s, 0.01);
    adam_update(r, {0.05, 0.2, -0.3}, s, 0.01);
    return r.data();
  };
  CHECK(run() == run());
}

TEST_CASE("lr schedule matches stated points") {
  LrSchedule s;  // defaults: base 1e-4, warmup from 2.5e-5 over 3, decay 0.1 at 10, 13 total
  CHECK(lr_at(0, s) == doctest::Approx(2.5e-5));
  CHECK(lr_at(5, s) == doctest::Approx(1e-4));
  CHECK(lr_at(11, s) == doctest::Approx(1e-5));
  CHECK(lr_at(3, s) == doctest::Approx(1e-4));
  // linear interpolation inside warmup
  CHECK(lr_at(1, s) == doctest::Approx(2.5e-5 + (1e-4 - 2.5e-5) / 3.0));
  CHECK_THROWS_AS(lr_at(13, s), ContractError);

  LrSchedule bad = s;
  bad.decay_epoch = 2;
  CHECK_THROWS_AS(lr_at(0, bad), ContractError);
}
