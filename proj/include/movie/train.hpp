#pragma once

#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "movie/checkpoint.hpp"
#include "movie/config.hpp"
#include "movie/fusion.hpp"
#include "movie/metrics.hpp"
#include "movie/net.hpp"
#include "movie/optim.hpp"
#include "movie/synth.hpp"

namespace movie {

// Resizes a canvas-size render to `scale`; with the fixed-size policy the
// result is zero-padded back up to `input_size`. Returns the tensor and the
// size the network should expect.
inline std::pair<Tensor<float>, std::size_t> prepare_image(
    const std::vector<float>& canvas_img, std::size_t canvas,
    std::size_t scale, bool fixed_size, std::size_t input_size) {
  std::vector<float> pix = synth::resize_nearest(canvas_img, canvas, scale);
  std::size_t size = scale;
  if (fixed_size) {
    pix = synth::pad_to_fixed(pix, scale, input_size);
    size = input_size;
  }
  return {Tensor<float>({3, size, size}, std::move(pix), false), size};
}

struct EvalResult {
  MetricsReport counting;      // counting questions only
  double overall_acc = 0;      // every question type
  double number_acc = 0;       // == counting.acc, kept for CSV convenience
  std::vector<std::size_t> predictions;
};

// Shared scoring loop: `predict` maps a sample index and prepared image to a
// predicted answer class.
inline EvalResult evaluate_predictions(
    const synth::Dataset& ds, std::size_t count_classes, std::size_t test_size,
    bool fixed_size, std::size_t input_size,
    const std::function<std::size_t(const Tensor<float>&, std::size_t,
                                    const synth::Query&)>& predict) {
  EvalResult r;
  std::vector<int> count_preds, count_gts;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    auto [img, size] = prepare_image(ds.image(i), ds.canvas_size, test_size,
                                     fixed_size, input_size);
    std::size_t pred = predict(img, size, ds.samples[i].query);
    r.predictions.push_back(pred);
    std::size_t truth = ds.answer(i, count_classes);
    hits += pred == truth;
    if (ds.samples[i].question_type != "what_color") {
      // clamp non-count answers to the top count so RMSE stays defined
      count_preds.push_back(int(std::min(pred, count_classes - 1)));
      count_gts.push_back(ds.samples[i].count);
    }
  }
  r.overall_acc = double(hits) / double(ds.samples.size());
  if (!count_preds.empty()) {
    r.counting = report(count_preds, count_gts);
    r.number_acc = accuracy(count_preds, count_gts);
  }
  return r;
}

inline EvalResult evaluate_movie(const MovieNet<float>& m,
                                 const synth::Dataset& ds,
                                 std::size_t test_size, bool fixed_size,
                                 std::size_t count_classes = 0) {
  if (count_classes == 0) count_classes = m.cfg.answer_classes;
  return evaluate_predictions(
      ds, count_classes, test_size, fixed_size, m.cfg.input_size,
      [&](const Tensor<float>& img, std::size_t size, const synth::Query& q) {
        Tensor<float> logits =
            m.count_head(m.features(img, m.encode_query(q), size));
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.size(); ++k)
          if (logits.data()[k] > logits.data()[best]) best = k;
        return best;
      });
}

struct TrainLogLine {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double val_acc = 0;
  double val_rmse = 0;
};

inline std::string format_log_line(const TrainLogLine& l) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.8g,%.6f,%.6f,%.6f", l.epoch,
                l.step, l.lr, l.loss, l.val_acc, l.val_rmse);
  return buf;
}

// Adam over a named parameter list, one moment buffer per tensor.
template <class S>
struct Optimizer {
  ParamList<S> params;
  std::vector<AdamState<S>> states;

  explicit Optimizer(ParamList<S> p) : params(std::move(p)) {
    for (auto& [name, t] : params) states.emplace_back(t.size());
  }
  void zero_grad() {
    for (auto& [name, t] : params) t.zero_grad();
  }
  void step(S lr) {
    for (std::size_t i = 0; i < params.size(); ++i)
      adam_update(params[i].second, params[i].second.grad(), states[i], lr);
  }
};

struct TrainResult {
  std::vector<TrainLogLine> log;
  double best_val_acc = -1;
  std::size_t best_epoch = 0;
  std::vector<std::vector<float>> best_params;  // data per tensor, ckpt order
};

// Generic epoch loop shared by the plain counter and the fusion arms.
// `sample_loss` builds the per-sample graph; `validate` scores the val set.
inline TrainResult run_training(
    const RunConfig& cfg, const synth::Dataset& train, Rng& rng,
    ParamList<float>& params,
    const std::function<Tensor<float>(const Tensor<float>&, std::size_t,
                                      const synth::Query&, std::size_t)>&
        sample_loss,
    const std::function<EvalResult()>& validate, std::ostream* log_out) {
  Optimizer<float> opt(params);
  LrSchedule sched = cfg.lr_schedule();
  std::size_t steps_per_epoch =
      std::max<std::size_t>(1, train.samples.size() / cfg.batch_size);
  TrainResult res;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_at(epoch, sched);
    double epoch_loss = 0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      auto batch = synth::balanced_batch(train, rng, cfg.batch_size);
      std::size_t scale_px = synth::sample_scale(rng, cfg.scales);
      opt.zero_grad();
      double batch_loss = 0;
      for (std::size_t idx : batch) {
        std::vector<float> pix = train.image(idx);
        if (cfg.augment)
          synth::augment_in_place(pix, train.canvas_size, rng);
        auto [img, size] = prepare_image(pix, train.canvas_size, scale_px,
                                         cfg.fixed_size, cfg.input_size);
        Tensor<float> loss =
            scale(sample_loss(img, size, train.samples[idx].query,
                              train.answer(idx, cfg.count_classes())),
                  1.0f / float(batch.size()));
        backward(loss);
        batch_loss += double(loss.item()) * double(batch.size());
      }
      opt.step(float(lr));
      epoch_loss += batch_loss / double(batch.size());
      ++global_step;
    }
    EvalResult val = validate();
    TrainLogLine line{epoch, global_step, lr, epoch_loss / steps_per_epoch,
                      val.overall_acc, val.counting.rmse};
    res.log.push_back(line);
    if (log_out) *log_out << format_log_line(line) << std::endl;
    if (val.overall_acc > res.best_val_acc) {
      res.best_val_acc = val.overall_acc;
      res.best_epoch = epoch;
      res.best_params.clear();
      for (auto& [name, p] : params) res.best_params.push_back(p.data());
    }
  }
  // restore the best-validation weights
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i].second.data() = res.best_params[i];
  return res;
}

inline TrainResult train_movie(const RunConfig& cfg, MovieNet<float>& m,
                               const synth::Dataset& train,
                               const synth::Dataset& val, Rng& rng,
                               std::ostream* log_out = nullptr) {
  auto params = m.params();
  return run_training(
      cfg, train, rng, params,
      [&](const Tensor<float>& img, std::size_t size, const synth::Query& q,
          std::size_t answer) {
        return softmax_cross_entropy(
            m.count_head(m.features(img, m.encode_query(q), size)), answer);
      },
      [&] {
        return evaluate_movie(m, val, cfg.input_size, cfg.fixed_size,
                              cfg.count_classes());
      },
      log_out);
}

// majority-class baseline over the answer labels
inline double majority_baseline_acc(const synth::Dataset& ds,
                                    std::size_t count_classes) {
  std::map<std::size_t, std::size_t> freq;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    ++freq[ds.answer(i, count_classes)];
  std::size_t best = 0;
  for (const auto& [ans, n] : freq) best = std::max(best, n);
  return double(best) / double(ds.samples.size());
}

// ---- fusion arms -----------------------------------------------------------

enum class FusionArm { MovieOnly, ToyVqaOnly, Naive, ThreeBranch };

inline FusionArm parse_fusion_arm(const std::string& s) {
  if (s == "movie-only") return FusionArm::MovieOnly;
  if (s == "toy-vqa-only") return FusionArm::ToyVqaOnly;
  if (s == "naive") return FusionArm::Naive;
  if (s == "three-branch") return FusionArm::ThreeBranch;
  throw ContractError("unknown fusion arm '" + s + "'");
}

inline std::string fusion_arm_name(FusionArm a) {
  switch (a) {
    case FusionArm::MovieOnly: return "movie-only";
    case FusionArm::ToyVqaOnly: return "toy-vqa-only";
    case FusionArm::Naive: return "naive";
    case FusionArm::ThreeBranch: return "three-branch";
  }
  return "?";
}

inline std::size_t argmax_index(const Tensor<float>& logits) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k)
    if (logits.data()[k] > logits.data()[best]) best = k;
  return best;
}

inline EvalResult evaluate_fusion(const FusionModel<float>& m, FusionArm arm,
                                  const synth::Dataset& ds,
                                  std::size_t test_size, bool fixed_size,
                                  std::size_t count_classes = 0) {
  if (count_classes == 0) count_classes = m.cfg.movie.answer_classes;
  return evaluate_predictions(
      ds, count_classes, test_size, fixed_size,
      m.cfg.movie.input_size,
      [&](const Tensor<float>& img, std::size_t size, const synth::Query& q) {
        switch (arm) {
          case FusionArm::MovieOnly:
            return argmax_index(m.counter.count_head(m.counter.features(
                img, m.counter.encode_query(q), size)));
          case FusionArm::ToyVqaOnly:
            return argmax_index(toy_vqa_forward(m, img, q).logits);
          default:
            return joint_predict(m, img, q);
        }
      });
}

inline TrainResult train_fusion(const RunConfig& cfg, FusionModel<float>& m,
                                FusionArm arm, const synth::Dataset& train,
                                const synth::Dataset& val, Rng& rng,
                                std::ostream* log_out = nullptr) {
  ParamList<float> params;
  switch (arm) {
    case FusionArm::MovieOnly: {
      auto cp = m.counter.params();
      for (auto& [name, p] : cp) params.emplace_back("counter." + name, p);
      break;
    }
    case FusionArm::ToyVqaOnly: {
      auto all = m.params();
      for (auto& [name, p] : all)
        if (name.rfind("vqa.", 0) == 0) params.emplace_back(name, p);
      break;
    }
    default:
      params = m.params();
  }
  return run_training(
      cfg, train, rng, params,
      [&](const Tensor<float>& img, std::size_t size, const synth::Query& q,
          std::size_t answer) -> Tensor<float> {
        // fixed-size policy keeps size == input_size for the fusion towers
        switch (arm) {
          case FusionArm::MovieOnly:
            return softmax_cross_entropy(
                m.counter.count_head(
                    m.counter.features(img, m.counter.encode_query(q), size)),
                answer);
          case FusionArm::ToyVqaOnly:
            return softmax_cross_entropy(toy_vqa_forward(m, img, q).logits,
                                         answer);
          case FusionArm::Naive:
            return three_branch_train_step(m, img, q, answer, true);
          case FusionArm::ThreeBranch:
            return three_branch_train_step(m, img, q, answer, false);
        }
        throw ContractError("unreachable fusion arm");
      },
      [&] {
        return evaluate_fusion(m, arm, val, cfg.input_size, cfg.fixed_size,
                               cfg.count_classes());
      },
      log_out);
}

}  // namespace movie
