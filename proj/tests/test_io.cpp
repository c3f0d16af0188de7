#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "movie/checkpoint.hpp"
#include "movie/config.hpp"

using namespace movie;
using gradcheck::random_tensor;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

NetConfig small_net_config() {
  NetConfig cfg;
  cfg.channels = 8;
  cfg.n_blocks = 2;
  cfg.input_size = 32;
  cfg.answer_classes = 5;
  cfg.encoder.dim = 8;
  cfg.encoder.heads = 2;
  cfg.encoder.embed_dim = 4;
  cfg.encoder.max_len = 4;
  cfg.encoder.layers = 1;
  return cfg;
}

}  // namespace

TEST_CASE("checkpoint round trip is byte-identical") {
  Rng rng(31);
  auto m = MovieNet<float>::make(small_net_config(), rng);
  auto params = m.params();

  auto p1 = temp_path("ckpt_a.bin");
  auto p2 = temp_path("ckpt_b.bin");
  save_checkpoint(p1, params);

  Rng rng2(99);
  auto m2 = MovieNet<float>::make(small_net_config(), rng2);
  auto params2 = m2.params();
  load_checkpoint(p1, params2);
  save_checkpoint(p2, params2);
  CHECK(slurp(p1) == slurp(p2));

  // loaded model predicts identically
  std::vector<float> pix(3 * 32 * 32);
  for (auto& v : pix) v = float(rng.uniform(0, 1));
  Tensor<float> img({3, 32, 32}, pix, false);
  synth::Query q;
  q.is_tokens = true;
  q.tokens = {1, 2, 3};
  CHECK(m.forward(img, q).data() == m2.forward(img, q).data());

  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint format guards") {
  Rng rng(32);
  auto m = MovieNet<float>::make(small_net_config(), rng);
  auto params = m.params();
  auto path = temp_path("ckpt_guard.bin");
  save_checkpoint(path, params);

  // corrupted magic
  {
    auto bytes = slurp(path);
    bytes[0] = 'X';
    std::ofstream(temp_path("ckpt_bad.bin"), std::ios::binary) << bytes;
    auto bad = temp_path("ckpt_bad.bin");
    CHECK_THROWS_AS(read_checkpoint(bad), ContractError);
    std::remove(bad.c_str());
  }

  // shape mismatch against a differently sized model
  {
    auto cfg = small_net_config();
    cfg.channels = 16;
    Rng r2(33);
    auto other = MovieNet<float>::make(cfg, r2);
    auto op = other.params();
    CHECK_THROWS_AS(load_checkpoint(path, op), ContractError);
  }

  // dtype mismatch
  {
    Rng r3(34);
    auto d = MovieNet<double>::make(small_net_config(), r3);
    auto dp = d.params();
    CHECK_THROWS_AS(load_checkpoint(path, dp), ContractError);
  }

  // truncated data
  {
    auto bytes = slurp(path);
    std::ofstream(temp_path("ckpt_trunc.bin"), std::ios::binary)
        << bytes.substr(0, bytes.size() - 16);
    auto trunc = temp_path("ckpt_trunc.bin");
    CHECK_THROWS_AS(read_checkpoint(trunc), ContractError);
    std::remove(trunc.c_str());
  }

  CHECK_THROWS_AS(read_checkpoint(temp_path("ckpt_missing.bin")), IoError);
  std::remove(path.c_str());
}

TEST_CASE("config parsing") {
  auto kv = parse_config_text(
      "# a comment\n"
      "channels = 32   # trailing comment\n"
      "\n"
      "variant=movie+beta\n"
      "scales=32,48,64\n"
      "fixed_size=off\n");
  RunConfig cfg;
  cfg.apply(kv);
  CHECK(cfg.channels == 32);
  CHECK(cfg.variant == "movie+beta");
  CHECK(cfg.scales == std::vector<std::size_t>{32, 48, 64});
  CHECK(cfg.fixed_size == false);

  CHECK_THROWS_AS(parse_config_text("channels 32\n"), ContractError);
  CHECK_THROWS_AS(parse_config_text("a=1\na=2\n"), ContractError);
  CHECK_THROWS_AS(RunConfig{}.set("no_such_key", "1"), ContractError);
  CHECK_THROWS_AS(RunConfig{}.set("channels", "abc"), ContractError);
  CHECK_THROWS_AS(RunConfig{}.set("fixed_size", "maybe"), ContractError);

  RunConfig bad;
  bad.variant = "bogus";
  CHECK_THROWS_AS(bad.validate(), ContractError);
  RunConfig bad2;
  bad2.queries = "riddle";
  CHECK_THROWS_AS(bad2.validate(), ContractError);
  RunConfig bad3;
  bad3.scales = {128};  // above input_size
  CHECK_THROWS_AS(bad3.validate(), ContractError);
}

TEST_CASE("resolved config echo round trips") {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.variant = "movie+beta";
  cfg.scales = {32, 48, 64};
  cfg.fixed_size = false;
  cfg.attribution_rule = "corrected";

  RunConfig back;
  back.apply(parse_config_text(cfg.to_text()));
  CHECK(back.to_text() == cfg.to_text());
}

TEST_CASE("presets") {
  RunConfig desk;
  desk.apply_preset("desk");
  CHECK(desk.batch_size == 32);
  CHECK(desk.epochs == 20);
  CHECK(desk.warmup_epochs == 2);
  CHECK(desk.decay_epoch == 15);

  RunConfig paper;
  paper.apply_preset("paper");
  CHECK(paper.batch_size == 128);
  CHECK(paper.epochs == 13);
  CHECK(paper.base_lr == 1e-4);
  CHECK(paper.warmup_lr == 2.5e-5);
  CHECK(paper.warmup_epochs == 3);
  CHECK(paper.decay_epoch == 10);
  paper.validate();

  CHECK_THROWS_AS(RunConfig{}.apply_preset("napkin"), ContractError);
}

TEST_CASE("config to model builders") {
  RunConfig cfg;
  cfg.channels = 16;
  cfg.n_blocks = 2;
  cfg.encoder_d = 16;
  auto net = cfg.net_config();
  CHECK(net.channels == 16);
  CHECK(net.encoder.dim == 16);
  CHECK(net.encoder.vocab_size == synth::vocabulary().size());
  CHECK(net.n_categories == synth::categories().size());

  auto sched = cfg.lr_schedule();
  CHECK(sched.total_epochs == cfg.epochs);

  auto gen = cfg.gen_config(123);
  CHECK(gen.n_samples == 123);
  CHECK(gen.query_kind == synth::QueryKind::Question);
}
