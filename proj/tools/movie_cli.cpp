// Command-line front end: dataset generation, training, evaluation, ablation
// sweeps, activation/attention visualization, and attribution reports.
// Exit codes: 0 success, 2 validation error, 3 I/O error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "movie/checkpoint.hpp"
#include "movie/config.hpp"
#include "movie/train.hpp"

namespace fs = std::filesystem;
using namespace movie;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string preset = "desk";
  long long seed = -1;  // -1: keep config/preset value
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required) {
  cmd->add_option("--config", args.config_path, "key=value config file");
  cmd->add_option("--preset", args.preset, "desk|paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", args.seed, "seed override");
  auto* out = cmd->add_option("--out", args.out_dir, "output directory");
  if (out_required) out->required();
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg;
  cfg.apply_preset(args.preset);
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw IoError("cannot read config " + args.config_path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    cfg.apply(parse_config_text(text));
  } else {
    cfg.validate();
  }
  if (args.seed >= 0) cfg.seed = std::size_t(args.seed);
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

// resolved-config echo next to every artifact
void echo_config(const RunConfig& cfg, const std::string& dir) {
  write_file(dir + "/config.txt", cfg.to_text());
}

void check_dataset(const RunConfig& cfg, const synth::Dataset& ds,
                   const std::string& name) {
  if (ds.canvas_size != cfg.canvas_size)
    throw ContractError(name + ": canvas size " +
                        std::to_string(ds.canvas_size) +
                        " does not match config " +
                        std::to_string(cfg.canvas_size));
  std::size_t vocab = synth::vocabulary().size();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (ds.answer(i, cfg.count_classes()) >= cfg.answer_classes)
      throw ContractError(name + ": sample " + std::to_string(i) +
                          " answer outside answer_classes");
    const auto& q = ds.samples[i].query;
    if (q.is_tokens)
      for (std::size_t t : q.tokens)
        if (t >= vocab)
          throw ContractError(name + ": sample " + std::to_string(i) +
                              " token outside vocabulary");
  }
}

synth::Dataset load_split(const RunConfig& cfg, const std::string& dir,
                          const std::string& name) {
  auto ds = synth::load_dataset(dir);
  check_dataset(cfg, ds, name);
  return ds;
}

// ---- generate --------------------------------------------------------------

int cmd_generate(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  ensure_dir(args.out_dir);
  Rng base(cfg.seed);
  struct Split {
    const char* name;
    std::size_t n;
    std::uint64_t stream;
  };
  for (const Split& s : {Split{"train", cfg.n_train, 1},
                         Split{"val", cfg.n_val, 2},
                         Split{"test", cfg.n_test, 3}}) {
    auto ds = synth::generate(cfg.gen_config(s.n), base.fork(s.stream));
    std::string dir = args.out_dir + "/" + s.name;
    ensure_dir(dir);
    synth::save_dataset(ds, dir);
  }
  synth::save_vocabulary(args.out_dir + "/vocabulary.txt");
  echo_config(cfg, args.out_dir);
  return 0;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const CommonArgs& args, const std::string& data_dir,
              const std::string& arm_str) {
  RunConfig cfg = resolve_config(args);
  auto train = load_split(cfg, data_dir + "/train", "train split");
  auto val = load_split(cfg, data_dir + "/val", "val split");
  ensure_dir(args.out_dir);
  echo_config(cfg, args.out_dir);

  std::ofstream log(args.out_dir + "/log.csv", std::ios::binary);
  if (!log) throw IoError("cannot write " + args.out_dir + "/log.csv");

  Rng init(Rng(cfg.seed).fork(10).next_u64());
  Rng order = Rng(cfg.seed).fork(11);
  if (arm_str.empty()) {
    auto m = MovieNet<float>::make(cfg.net_config(), init);
    auto res = train_movie(cfg, m, train, val, order, &log);
    auto params = m.params();
    save_checkpoint(args.out_dir + "/checkpoint.bin", params);
    std::cout << "best_val_acc=" << res.best_val_acc
              << " best_epoch=" << res.best_epoch << "\n";
  } else {
    FusionArm arm = parse_fusion_arm(arm_str);
    auto m = FusionModel<float>::make(cfg.fusion_config(), init);
    auto res = train_fusion(cfg, m, arm, train, val, order, &log);
    auto params = m.params();
    save_checkpoint(args.out_dir + "/checkpoint.bin", params);
    std::cout << "best_val_acc=" << res.best_val_acc
              << " best_epoch=" << res.best_epoch << "\n";
  }
  return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const CommonArgs& args, const std::string& ckpt,
             const std::string& data_dir, long long test_size,
             const std::string& fixed_flag, const std::string& arm_str) {
  RunConfig cfg = resolve_config(args);
  auto ds = load_split(cfg, data_dir, "eval split");
  std::size_t size = test_size > 0 ? std::size_t(test_size) : cfg.input_size;
  bool fixed = fixed_flag.empty() ? cfg.fixed_size : fixed_flag == "on";

  Rng init(0);
  EvalResult r;
  if (arm_str.empty()) {
    auto m = MovieNet<float>::make(cfg.net_config(), init);
    auto params = m.params();
    load_checkpoint(ckpt, params);
    r = evaluate_movie(m, ds, size, fixed, cfg.count_classes());
  } else {
    FusionArm arm = parse_fusion_arm(arm_str);
    auto m = FusionModel<float>::make(cfg.fusion_config(), init);
    auto params = m.params();
    load_checkpoint(ckpt, params);
    r = evaluate_fusion(m, arm, ds, size, fixed, cfg.count_classes());
  }
  std::string csv = to_csv(r.counting);
  std::cout << csv << "\n";
  if (!args.out_dir.empty()) {
    ensure_dir(args.out_dir);
    echo_config(cfg, args.out_dir);
    write_file(args.out_dir + "/metrics.csv", csv + "\n");
  }
  return 0;
}

// ---- ablate ----------------------------------------------------------------

struct AblationRow {
  std::string arm;
  double acc;
  double rmse;
};

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "arm,acc,rmse\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", r.arm.c_str(), r.acc,
                  r.rmse);
    out += buf;
  }
  return out;
}

int cmd_ablate(const CommonArgs& args, const std::string& data_dir,
               const std::string& axis) {
  RunConfig base_cfg = resolve_config(args);
  auto train = load_split(base_cfg, data_dir + "/train", "train split");
  auto val = load_split(base_cfg, data_dir + "/val", "val split");
  auto test = load_split(base_cfg, data_dir + "/test", "test split");
  ensure_dir(args.out_dir);
  echo_config(base_cfg, args.out_dir);

  // all arms see identical data order: the sampler seed is shared
  auto train_counter = [&](const RunConfig& cfg) {
    Rng init(Rng(cfg.seed).fork(10).next_u64());
    Rng order = Rng(cfg.seed).fork(11);
    auto m = MovieNet<float>::make(cfg.net_config(), init);
    train_movie(cfg, m, train, val, order, nullptr);
    return m;
  };

  std::vector<AblationRow> rows;
  if (axis == "variant") {
    for (const char* v : {"film", "movie", "movie+beta", "movie-nores",
                          "movie+beta-nores"}) {
      RunConfig cfg = base_cfg;
      cfg.variant = v;
      auto m = train_counter(cfg);
      auto r = evaluate_movie(m, test, cfg.input_size, cfg.fixed_size,
                              cfg.count_classes());
      rows.push_back({v, r.overall_acc, r.counting.rmse});
    }
  } else if (axis == "n_blocks") {
    for (std::size_t n = 1; n <= 5; ++n) {
      RunConfig cfg = base_cfg;
      cfg.n_blocks = n;
      auto m = train_counter(cfg);
      auto r = evaluate_movie(m, test, cfg.input_size, cfg.fixed_size,
                              cfg.count_classes());
      rows.push_back({std::to_string(n), r.overall_acc, r.counting.rmse});
    }
  } else if (axis == "padding") {
    // one model, evaluated under both test-time padding policies
    auto m = train_counter(base_cfg);
    std::size_t small = base_cfg.input_size / 2;
    auto full = evaluate_movie(m, test, base_cfg.input_size, true,
                               base_cfg.count_classes());
    auto fixed32 =
        evaluate_movie(m, test, small, true, base_cfg.count_classes());
    auto batch32 =
        evaluate_movie(m, test, small, false, base_cfg.count_classes());
    rows.push_back({"full-" + std::to_string(base_cfg.input_size),
                    full.overall_acc, full.counting.rmse});
    rows.push_back({"fixed-" + std::to_string(small), fixed32.overall_acc,
                    fixed32.counting.rmse});
    rows.push_back({"batch-" + std::to_string(small), batch32.overall_acc,
                    batch32.counting.rmse});
  } else if (axis == "scales") {
    std::size_t small = base_cfg.input_size / 2;
    RunConfig single = base_cfg;
    single.scales = {base_cfg.input_size};
    RunConfig multi = base_cfg;
    multi.scales = {small, (small + base_cfg.input_size) / 2,
                    base_cfg.input_size};
    for (auto& [name, cfg] :
         std::vector<std::pair<std::string, RunConfig>>{{"single", single},
                                                        {"multi", multi}}) {
      auto m = train_counter(cfg);
      auto r = evaluate_movie(m, test, small, true, cfg.count_classes());
      rows.push_back({name + "-test" + std::to_string(small), r.overall_acc,
                      r.counting.rmse});
    }
  } else if (axis == "fusion") {
    for (auto arm : {FusionArm::MovieOnly, FusionArm::ToyVqaOnly,
                     FusionArm::Naive, FusionArm::ThreeBranch}) {
      RunConfig cfg = base_cfg;
      Rng init(Rng(cfg.seed).fork(10).next_u64());
      Rng order = Rng(cfg.seed).fork(11);
      auto m = FusionModel<float>::make(cfg.fusion_config(), init);
      train_fusion(cfg, m, arm, train, val, order, nullptr);
      auto r = evaluate_fusion(m, arm, test, cfg.input_size, cfg.fixed_size,
                               cfg.count_classes());
      rows.push_back({fusion_arm_name(arm), r.overall_acc, r.counting.rmse});
    }
  } else {
    throw ContractError("unknown ablation axis '" + axis + "'");
  }

  std::string csv = ablation_csv(rows);
  std::cout << csv;
  write_file(args.out_dir + "/ablate.csv", csv);
  return 0;
}

// ---- visualize -------------------------------------------------------------

void write_pgm(const std::string& path, const std::vector<unsigned char>& pix,
               std::size_t w, std::size_t h) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pix.data()),
            std::streamsize(pix.size()));
  if (!out) throw IoError("write failed for " + path);
}

int cmd_visualize(const CommonArgs& args, const std::string& ckpt,
                  const std::string& data_dir, std::size_t index) {
  RunConfig cfg = resolve_config(args);
  auto ds = load_split(cfg, data_dir, "dataset");
  if (index >= ds.samples.size())
    throw ContractError("sample index " + std::to_string(index) +
                        " outside dataset of size " +
                        std::to_string(ds.samples.size()));
  Rng init(0);
  auto m = MovieNet<float>::make(cfg.net_config(), init);
  auto params = m.params();
  load_checkpoint(ckpt, params);
  ensure_dir(args.out_dir);
  echo_config(cfg, args.out_dir);

  auto [img, size] = prepare_image(ds.image(index), ds.canvas_size,
                                   cfg.input_size, true, cfg.input_size);
  const auto& query = ds.samples[index].query;
  auto feat = m.features(img, m.encode_query(query), size);  // C x h x w
  std::size_t c = feat.dim(0), fh = feat.dim(1), fw = feat.dim(2);

  // per-location l2 norm, min-max normalized; constant maps go to zero
  std::vector<double> norm(fh * fw, 0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < fh * fw; ++p) {
      double v = feat.data()[ch * fh * fw + p];
      norm[p] += v * v;
    }
  for (auto& v : norm) v = std::sqrt(v);
  double lo = *std::min_element(norm.begin(), norm.end());
  double hi = *std::max_element(norm.begin(), norm.end());
  double span = hi - lo;
  std::vector<unsigned char> up(size * size, 0);
  if (span > 0) {
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        std::size_t sy = std::min(fh - 1, y * fh / size);
        std::size_t sx = std::min(fw - 1, x * fw / size);
        double v = (norm[sy * fw + sx] - lo) / span;
        up[y * size + x] = (unsigned char)(v * 255.0 + 0.5);
      }
  }
  write_pgm(args.out_dir + "/activation.pgm", up, size, size);

  // summary-attention weights per token
  std::string csv = "token,weight\n";
  char buf[96];
  if (query.is_tokens) {
    auto enc = m.encoder.encode(query.tokens);
    auto vocab = synth::vocabulary();
    auto ids = m.encoder.pad_tokens(query.tokens);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      std::snprintf(buf, sizeof buf, "%s,%.6f\n", vocab[ids[t]].c_str(),
                    double(enc.weights.data()[t]));
      csv += buf;
    }
  } else {
    std::snprintf(buf, sizeof buf, "%s,1.000000\n",
                  synth::categories()[query.category_id].c_str());
    csv += buf;
  }
  write_file(args.out_dir + "/attention.csv", csv);
  return 0;
}

// ---- attribute -------------------------------------------------------------

int cmd_attribute(const CommonArgs& args, const std::string& ckpt,
                  const std::string& data_dir) {
  RunConfig cfg = resolve_config(args);
  auto ds = load_split(cfg, data_dir, "dataset");
  Rng init(0);
  auto m = FusionModel<float>::make(cfg.fusion_config(), init);
  auto params = m.params();
  load_checkpoint(ckpt, params);

  std::map<std::string, std::pair<double, std::size_t>> by_type;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    auto [img, size] = prepare_image(ds.image(i), ds.canvas_size,
                                     cfg.input_size, true, cfg.input_size);
    auto r = branch_attribution(m, img, ds.samples[i].query);
    auto& [score_sum, n] = by_type[ds.samples[i].question_type];
    score_sum += r.score;
    n += 1;
  }
  std::string csv = "question_type,probability,count\n";
  char buf[128];
  for (const auto& [type, agg] : by_type) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%zu\n", type.c_str(),
                  agg.first / double(agg.second), agg.second);
    csv += buf;
  }
  std::cout << csv;
  if (!args.out_dir.empty()) {
    ensure_dir(args.out_dir);
    echo_config(cfg, args.out_dir);
    write_file(args.out_dir + "/attribution.csv", csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-modulated counting models"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, ablate_args, vis_args, attr_args;
  std::string train_data, eval_data, ablate_data, vis_data, attr_data;
  std::string train_arm, eval_arm, ablate_axis, eval_ckpt, vis_ckpt, attr_ckpt;
  std::string eval_fixed;
  long long eval_test_size = -1;
  std::size_t vis_index = 0;

  auto* gen = app.add_subcommand("generate", "write train/val/test datasets");
  add_common(gen, gen_args, true);

  auto* train = app.add_subcommand("train", "train a counting model");
  add_common(train, train_args, true);
  train->add_option("--data", train_data, "dataset directory (from generate)")
      ->required();
  train->add_option("--arm", train_arm,
                    "fusion arm instead of the plain counter")
      ->check(CLI::IsMember({"movie-only", "toy-vqa-only", "naive",
                             "three-branch"}));

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_args, false);
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset split directory")->required();
  eval->add_option("--test-size", eval_test_size, "evaluation image size");
  eval->add_option("--fixed-size", eval_fixed, "pad to the training size")
      ->check(CLI::IsMember({"on", "off"}));
  eval->add_option("--arm", eval_arm, "fusion arm for fusion checkpoints")
      ->check(CLI::IsMember({"movie-only", "toy-vqa-only", "naive",
                             "three-branch"}));

  auto* ablate = app.add_subcommand("ablate", "run an ablation sweep");
  add_common(ablate, ablate_args, true);
  ablate->add_option("--data", ablate_data, "dataset directory")->required();
  ablate->add_option("--axis", ablate_axis, "sweep axis")
      ->required()
      ->check(CLI::IsMember({"variant", "n_blocks", "padding", "scales",
                             "fusion"}));

  auto* vis = app.add_subcommand("visualize",
                                 "activation map and attention weights");
  add_common(vis, vis_args, true);
  vis->add_option("--ckpt", vis_ckpt, "checkpoint file")->required();
  vis->add_option("--data", vis_data, "dataset split directory")->required();
  vis->add_option("--index", vis_index, "sample index");

  auto* attr = app.add_subcommand("attribute", "branch attribution report");
  add_common(attr, attr_args, false);
  attr->add_option("--ckpt", attr_ckpt, "fusion checkpoint file")->required();
  attr->add_option("--data", attr_data, "dataset split directory")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_generate(gen_args);
    if (train->parsed()) return cmd_train(train_args, train_data, train_arm);
    if (eval->parsed())
      return cmd_eval(eval_args, eval_ckpt, eval_data, eval_test_size,
                      eval_fixed, eval_arm);
    if (ablate->parsed())
      return cmd_ablate(ablate_args, ablate_data, ablate_axis);
    if (vis->parsed())
      return cmd_visualize(vis_args, vis_ckpt, vis_data, vis_index);
    if (attr->parsed()) return cmd_attribute(attr_args, attr_ckpt, attr_data);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {  // Shape/Contract errors
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
