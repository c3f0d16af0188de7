#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "movie/fusion.hpp"
#include "movie/net.hpp"
#include "movie/optim.hpp"
#include "movie/synth.hpp"

namespace movie {

// Text configuration: UTF-8 key=value lines, '#' starts a comment, blank
// lines ignored. Unknown keys are rejected so typos fail loudly. The fully
// resolved configuration is echoed next to every artifact.

inline std::map<std::string, std::string> parse_config_text(
    const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(lineno) +
                          ": expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ContractError("config line " + std::to_string(lineno) +
                          ": empty key");
    if (kv.count(key))
      throw ContractError("config: duplicate key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

struct RunConfig {
  std::size_t seed = 0;

  // model
  std::size_t channels = 64;
  std::size_t n_blocks = 4;
  std::string variant = "movie";
  std::size_t answer_classes = 10;
  std::size_t input_size = 64;
  std::size_t reduction = 4;
  std::size_t encoder_l = 2;
  std::size_t encoder_h = 4;
  std::size_t encoder_d = 64;
  std::size_t encoder_e = 32;
  std::size_t encoder_max_len = 8;

  // training (desk defaults; the "paper" preset restores the published
  // schedule: batch 128, 13 epochs, 3 warmup epochs, decay at 10)
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  double base_lr = 1e-3;
  double warmup_lr = 2.5e-4;
  std::size_t warmup_epochs = 2;
  std::size_t decay_epoch = 15;
  double decay_factor = 0.1;
  // train-time flip/jitter augmentation; counteracts memorization of the
  // small fixed train split
  bool augment = true;

  // data
  std::size_t n_train = 5000;
  std::size_t n_val = 1000;
  std::size_t n_test = 1000;
  std::size_t max_objects = 9;
  std::size_t canvas_size = 64;
  std::string queries = "question";  // category | question | mixed
  std::vector<std::size_t> scales = {64};
  bool fixed_size = true;

  // fusion / attribution
  std::size_t vqa_channels = 32;
  std::string attribution_rule = "paper";

  void apply_preset(const std::string& preset) {
    if (preset == "desk") return;  // defaults above
    if (preset == "paper") {
      batch_size = 128;
      epochs = 13;
      base_lr = 1e-4;
      warmup_lr = 2.5e-5;
      warmup_epochs = 3;
      decay_epoch = 10;
      decay_factor = 0.1;
      return;
    }
    throw ContractError("unknown preset '" + preset + "'");
  }

  void set(const std::string& key, const std::string& value);
  void apply(const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) set(k, v);
    validate();
  }

  void validate() const {
    if (!is_valid_variant(variant))
      throw ContractError("unknown variant '" + variant + "'");
    if (!is_valid_attribution_rule(attribution_rule))
      throw ContractError("unknown attribution rule '" + attribution_rule +
                          "'");
    if (queries != "category" && queries != "question" && queries != "mixed")
      throw ContractError("queries must be category|question|mixed, got '" +
                          queries + "'");
    if (scales.empty()) throw ContractError("scales must be non-empty");
    for (std::size_t s : scales)
      if (s == 0 || s > input_size)
        throw ContractError("scale " + std::to_string(s) +
                            " outside (0, input_size]");
    if (batch_size == 0 || epochs == 0)
      throw ContractError("batch_size and epochs must be positive");
    lr_schedule().validate();
  }

  // count answers occupy [0, count_classes); the mixed question set appends
  // the three color answers after them
  std::size_t count_classes() const {
    return queries == "mixed" ? answer_classes - synth::kNumColors
                              : answer_classes;
  }

  EncoderConfig encoder_config() const {
    EncoderConfig e;
    e.vocab_size = synth::vocabulary().size();
    e.embed_dim = encoder_e;
    e.dim = encoder_d;
    e.layers = encoder_l;
    e.heads = encoder_h;
    e.max_len = encoder_max_len;
    return e;
  }

  NetConfig net_config() const {
    NetConfig n;
    n.channels = channels;
    n.n_blocks = n_blocks;
    n.variant = variant;
    n.answer_classes = answer_classes;
    n.input_size = input_size;
    n.reduction = reduction;
    n.n_categories = synth::categories().size();
    n.encoder = encoder_config();
    return n;
  }

  FusionConfig fusion_config() const {
    FusionConfig f;
    f.movie = net_config();
    f.vqa_channels = vqa_channels;
    f.attribution_rule = attribution_rule;
    return f;
  }

  LrSchedule lr_schedule() const {
    LrSchedule s;
    s.base_lr = base_lr;
    s.warmup_start_lr = warmup_lr;
    s.warmup_epochs = warmup_epochs;
    s.decay_epoch = decay_epoch;
    s.decay_factor = decay_factor;
    s.total_epochs = epochs;
    return s;
  }

  synth::GenConfig gen_config(std::size_t n_samples) const {
    synth::GenConfig g;
    g.n_samples = n_samples;
    g.max_objects = max_objects;
    g.geometry.canvas_size = canvas_size;
    g.query_kind = queries == "category"   ? synth::QueryKind::Category
                   : queries == "question" ? synth::QueryKind::Question
                                           : synth::QueryKind::Mixed;
    return g;
  }

  // resolved-config echo, parseable by parse_config_text
  std::string to_text() const;
};

namespace detail {
inline std::size_t parse_size(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return std::size_t(x);
  } catch (const std::exception&) {
    throw ContractError("config: " + k + " expects a non-negative integer, got '" +
                        v + "'");
  }
}
inline double parse_real(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ContractError("config: " + k + " expects a number, got '" + v + "'");
  }
}
inline bool parse_on_off(const std::string& k, const std::string& v) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw ContractError("config: " + k + " expects on|off, got '" + v + "'");
}
inline std::vector<std::size_t> parse_size_list(const std::string& k,
                                                const std::string& v) {
  std::vector<std::size_t> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ','))
    out.push_back(parse_size(k, item));
  if (out.empty()) throw ContractError("config: " + k + " expects a list");
  return out;
}
}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  using detail::parse_on_off;
  using detail::parse_real;
  using detail::parse_size;
  using detail::parse_size_list;
  if (key == "seed") seed = parse_size(key, value);
  else if (key == "channels") channels = parse_size(key, value);
  else if (key == "n_blocks") n_blocks = parse_size(key, value);
  else if (key == "variant") variant = value;
  else if (key == "answer_classes") answer_classes = parse_size(key, value);
  else if (key == "input_size") input_size = parse_size(key, value);
  else if (key == "reduction") reduction = parse_size(key, value);
  else if (key == "encoder.L") encoder_l = parse_size(key, value);
  else if (key == "encoder.h") encoder_h = parse_size(key, value);
  else if (key == "encoder.D") encoder_d = parse_size(key, value);
  else if (key == "encoder.E") encoder_e = parse_size(key, value);
  else if (key == "encoder.max_len") encoder_max_len = parse_size(key, value);
  else if (key == "train.batch") batch_size = parse_size(key, value);
  else if (key == "train.epochs") epochs = parse_size(key, value);
  else if (key == "train.base_lr") base_lr = parse_real(key, value);
  else if (key == "train.warmup_lr") warmup_lr = parse_real(key, value);
  else if (key == "train.warmup_epochs") warmup_epochs = parse_size(key, value);
  else if (key == "train.decay_epoch") decay_epoch = parse_size(key, value);
  else if (key == "train.decay_factor") decay_factor = parse_real(key, value);
  else if (key == "data.train") n_train = parse_size(key, value);
  else if (key == "data.val") n_val = parse_size(key, value);
  else if (key == "data.test") n_test = parse_size(key, value);
  else if (key == "data.max_objects") max_objects = parse_size(key, value);
  else if (key == "data.canvas") canvas_size = parse_size(key, value);
  else if (key == "data.queries") queries = value;
  else if (key == "scales") scales = parse_size_list(key, value);
  else if (key == "fixed_size") fixed_size = parse_on_off(key, value);
  else if (key == "train.augment") augment = parse_on_off(key, value);
  else if (key == "fusion.vqa_channels") vqa_channels = parse_size(key, value);
  else if (key == "attribution.rule") attribution_rule = value;
  else throw ContractError("config: unknown key '" + key + "'");
}

inline std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "seed=" << seed << '\n'
      << "channels=" << channels << '\n'
      << "n_blocks=" << n_blocks << '\n'
      << "variant=" << variant << '\n'
      << "answer_classes=" << answer_classes << '\n'
      << "input_size=" << input_size << '\n'
      << "reduction=" << reduction << '\n'
      << "encoder.L=" << encoder_l << '\n'
      << "encoder.h=" << encoder_h << '\n'
      << "encoder.D=" << encoder_d << '\n'
      << "encoder.E=" << encoder_e << '\n'
      << "encoder.max_len=" << encoder_max_len << '\n'
      << "train.batch=" << batch_size << '\n'
      << "train.epochs=" << epochs << '\n'
      << "train.base_lr=" << base_lr << '\n'
      << "train.warmup_lr=" << warmup_lr << '\n'
      << "train.warmup_epochs=" << warmup_epochs << '\n'
      << "train.decay_epoch=" << decay_epoch << '\n'
      << "train.decay_factor=" << decay_factor << '\n'
      << "data.train=" << n_train << '\n'
      << "data.val=" << n_val << '\n'
      << "data.test=" << n_test << '\n'
      << "data.max_objects=" << max_objects << '\n'
      << "data.canvas=" << canvas_size << '\n'
      << "data.queries=" << queries << '\n';
  out << "scales=";
  for (std::size_t i = 0; i < scales.size(); ++i)
    out << (i ? "," : "") << scales[i];
  out << '\n';
  out << "fixed_size=" << (fixed_size ? "on" : "off") << '\n'
      << "train.augment=" << (augment ? "on" : "off") << '\n'
      << "fusion.vqa_channels=" << vqa_channels << '\n'
      << "attribution.rule=" << attribution_rule << '\n';
  return out.str();
}

}  // namespace movie
