#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "movie/fusion.hpp"

using namespace movie;
using gradcheck::random_tensor;

namespace {

FusionConfig tiny_fusion_config() {
  FusionConfig cfg;
  cfg.movie.channels = 8;
  cfg.movie.n_blocks = 1;
  cfg.movie.input_size = 32;
  cfg.movie.answer_classes = 7;
  cfg.movie.encoder.dim = 8;
  cfg.movie.encoder.heads = 2;
  cfg.movie.encoder.embed_dim = 4;
  cfg.movie.encoder.max_len = 4;
  cfg.movie.encoder.layers = 1;
  cfg.vqa_channels = 6;
  return cfg;
}

synth::Query token_query(std::vector<std::size_t> tokens) {
  synth::Query q;
  q.is_tokens = true;
  q.tokens = std::move(tokens);
  return q;
}

}  // namespace

TEST_CASE("toy vqa tower shape and question dependence") {
  Rng rng(21);
  auto m = FusionModel<double>::make(tiny_fusion_config(), rng);
  auto img = random_tensor({3, 32, 32}, rng, false, 0, 1);

  auto out = toy_vqa_forward(m, img, token_query({1, 2, 3}));
  CHECK(out.i.shape() == Shape{6});
  CHECK(out.logits.shape() == Shape{7});

  // different questions give different representations
  auto out2 = toy_vqa_forward(m, img, token_query({15, 16}));
  CHECK(out.i.data() != out2.i.data());

  // zeroing the question rows of the combining FC makes the tower blind to q
  for (std::size_t r = 6; r < 6 + 8; ++r)
    for (std::size_t c = 0; c < 6; ++c) m.combine.w.data()[r * 6 + c] = 0;
  auto a = toy_vqa_forward(m, img, token_query({1, 2, 3}));
  auto b = toy_vqa_forward(m, img, token_query({15, 16}));
  synth::Query qc;
  qc.category_id = 2;
  auto c = toy_vqa_forward(m, img, qc);
  CHECK(a.logits.data() == b.logits.data());
  CHECK(a.logits.data() == c.logits.data());
}

TEST_CASE("three branch loss decomposes into the branch cross-entropies") {
  Rng rng(22);
  auto m = FusionModel<double>::make(tiny_fusion_config(), rng);
  auto img = random_tensor({3, 32, 32}, rng, false, 0, 1);
  auto q = token_query({1, 4, 2});

  for (std::size_t ans = 0; ans < 3; ++ans) {
    double total = three_branch_train_step(m, img, q, ans).item();

    auto vqa = toy_vqa_forward(m, img, q);
    auto feat = m.counter.features(img, m.counter.encode_query(q), 32);
    auto v = global_avg_pool(feat);
    double lj = softmax_cross_entropy(
                    m.joint_head(m.f_joint(add(vqa.i, m.project_v(v)))), ans)
                    .item();
    double li = softmax_cross_entropy(vqa.logits, ans).item();
    double lv = softmax_cross_entropy(m.counter.count_head(feat), ans).item();
    CHECK(total == doctest::Approx((lj + li + lv) / 3).epsilon(1e-12));

    // naive mode keeps the joint term only
    double naive = three_branch_train_step(m, img, q, ans, true).item();
    CHECK(naive == lj);  // bit-exact, same graph
  }

  CHECK_THROWS_AS(three_branch_train_step(m, img, q, 7), ContractError);
}

TEST_CASE("three branch gradients reach both towers") {
  Rng rng(23);
  auto m = FusionModel<double>::make(tiny_fusion_config(), rng);
  auto img = random_tensor({3, 32, 32}, rng, false, 0, 1);
  auto params = m.params();
  for (auto& [name, p] : params) p.zero_grad();
  backward(three_branch_train_step(m, img, token_query({1, 4, 2}), 2));

  auto grad_norm = [&](const std::string& name) {
    for (auto& [n, p] : params)
      if (n == name) {
        double s = 0;
        for (double g : p.grad()) s += g * g;
        return s;
      }
    FAIL("missing parameter ", name);
    return 0.0;
  };
  CHECK(grad_norm("counter.backbone.stage0.kernel") > 0);
  CHECK(grad_norm("counter.head2.w") > 0);
  CHECK(grad_norm("vqa.backbone.stage0.kernel") > 0);
  CHECK(grad_norm("vqa.head_i.w") > 0);
  CHECK(grad_norm("joint.project_v.w") > 0);
  CHECK(grad_norm("joint.head.w") > 0);
}

TEST_CASE("three branch finite difference spot check") {
  Rng rng(24);
  auto m = FusionModel<double>::make(tiny_fusion_config(), rng);
  auto img = random_tensor({3, 32, 32}, rng, false, 0, 1);
  auto q = token_query({2, 5});
  auto loss_fn = [&] { return three_branch_train_step(m, img, q, 4); };

  auto params = m.params();
  for (auto& [name, p] : params) p.zero_grad();
  backward(loss_fn());

  double worst = 0;
  // h = 1e-6: the stride-1 conv stack evaluates millions of relu
  // preactivations, so a wider window occasionally straddles a kink
  const double h = 1e-6;
  for (int s = 0; s < 30; ++s) {
    auto& [name, p] = params[rng.index(params.size())];
    std::size_t i = rng.index(p.size());
    double keep = p.data()[i];
    p.data()[i] = keep + h;
    double up = loss_fn().item();
    p.data()[i] = keep - h;
    double down = loss_fn().item();
    p.data()[i] = keep;
    double fd = (up - down) / (2 * h);
    double an = p.grad()[i];
    if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
    worst = std::max(worst, std::abs(fd - an) /
                                std::max({std::abs(fd), std::abs(an), 1e-8}));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("joint predictions ignore auxiliary parameters") {
  Rng rng(25);
  auto m = FusionModel<double>::make(tiny_fusion_config(), rng);
  std::vector<Tensor<double>> imgs;
  for (int k = 0; k < 4; ++k)
    imgs.push_back(random_tensor({3, 32, 32}, rng, false, 0, 1));
  auto q = token_query({1, 2, 3});

  std::vector<std::size_t> before;
  std::vector<std::vector<double>> logits_before;
  for (auto& img : imgs) {
    before.push_back(joint_predict(m, img, q));
    logits_before.push_back(joint_logits(m, img, q).data());
  }
  for (std::size_t p : before) CHECK(p < 7);

  // scramble every auxiliary-branch parameter
  for (auto& [name, p] : m.aux_params())
    for (auto& v : p.data()) v = rng.uniform(-10, 10);

  for (std::size_t k = 0; k < imgs.size(); ++k) {
    CHECK(joint_predict(m, imgs[k], q) == before[k]);
    CHECK(joint_logits(m, imgs[k], q).data() == logits_before[k]);  // bit-exact
  }
}

TEST_CASE("attribution probe") {
  Rng rng(26);
  auto cfg = tiny_fusion_config();
  auto m = FusionModel<double>::make(cfg, rng);
  auto q = token_query({1, 2, 3});

  // range and finiteness on random inputs
  for (int k = 0; k < 5; ++k) {
    auto img = random_tensor({3, 32, 32}, rng, false, 0, 1);
    auto r = branch_attribution(m, img, q);
    CHECK(std::isfinite(r.p_i));
    CHECK(std::isfinite(r.p_v));
    CHECK((r.score == 0 || r.score == 1));
  }

  // zero counting projection: o == o_{-v}, so p_i = |o|^2 >= p_v
  for (auto& v : m.project_v.w.data()) v = 0;
  for (auto& v : m.project_v.b.data()) v = 0;
  for (int k = 0; k < 10; ++k) {
    auto img = random_tensor({3, 32, 32}, rng, false, 0, 1);
    auto r = branch_attribution(m, img, q);
    CHECK(r.p_i >= r.p_v);
    double o2 = 0;
    auto i = toy_vqa_forward(m, img, q).i;
    auto o = m.f_joint(i);
    for (double x : o.data()) o2 += x * x;
    CHECK(r.p_i == doctest::Approx(o2).epsilon(1e-12));
  }
}

TEST_CASE("attribution rule flag flips the score") {
  Rng rng(27);
  auto cfg = tiny_fusion_config();
  auto paper = FusionModel<double>::make(cfg, rng);
  cfg.attribution_rule = "corrected";
  Rng rng2(27);
  auto corrected = FusionModel<double>::make(cfg, rng2);

  int flipped = 0;
  for (int k = 0; k < 10; ++k) {
    auto img = random_tensor({3, 32, 32}, rng, false, 0, 1);
    auto q = token_query({1, 2, 3});
    auto a = branch_attribution(paper, img, q);
    auto b = branch_attribution(corrected, img, q);
    CHECK(a.p_i == b.p_i);  // same weights, same probe values
    CHECK(a.p_v == b.p_v);
    if (a.p_i != a.p_v) {
      CHECK(a.score + b.score == 1);
      ++flipped;
    }
  }
  CHECK(flipped > 0);

  cfg.attribution_rule = "bogus";
  CHECK_THROWS_AS(FusionModel<double>::make(cfg, rng), ContractError);
}
