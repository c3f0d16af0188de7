#pragma once

#include <string>
#include <utility>
#include <vector>

#include "movie/net.hpp"
#include "movie/tensor.hpp"

namespace movie {

// Counting module plugged into a generic answerer. The answerer is a toy
// global-fusion tower: pooled backbone features combined with the question
// through one FC. Three branches share the loss at training time; inference
// uses the joint branch only.

struct FusionConfig {
  NetConfig movie;                 // counting tower; answer_classes = full vocab
  std::size_t vqa_channels = 32;   // C', the answerer's representation width
  std::string attribution_rule = "paper";  // or "corrected"
};

inline bool is_valid_attribution_rule(const std::string& rule) {
  return rule == "paper" || rule == "corrected";
}

template <class S>
struct ToyVqaOut {
  Tensor<S> i;       // image-question representation, C'
  Tensor<S> logits;  // auxiliary image-branch classifier output
};

template <class S>
struct AttributionResult {
  double p_i = 0;
  double p_v = 0;
  int score = 0;  // 1 when the rule attributes the answer to the counter
};

template <class S>
struct FusionModel {
  FusionConfig cfg;
  MovieNet<S> counter;

  // answerer tower, parameters disjoint from the counter
  Backbone<S> vqa_backbone;
  QuestionEncoder<S> vqa_encoder;
  Tensor<S> vqa_category_table;  // n_categories x D
  layers::Fc<S> combine;         // (C' + D) -> C'
  layers::Fc<S> head_i;          // auxiliary image-branch classifier

  // joint branch
  layers::Fc<S> project_v;   // C -> C' ("one FC to match dimensions")
  layers::Fc<S> fuse;        // C' -> C', applied after the sum
  layers::Fc<S> joint_head;  // C' -> answers

  static FusionModel make(const FusionConfig& cfg, Rng& rng) {
    if (!is_valid_attribution_rule(cfg.attribution_rule))
      throw ContractError("unknown attribution rule '" + cfg.attribution_rule +
                          "'");
    FusionModel m;
    m.cfg = cfg;
    m.counter = MovieNet<S>::make(cfg.movie, rng);
    m.vqa_backbone = Backbone<S>::make(cfg.vqa_channels, rng);
    m.vqa_encoder = QuestionEncoder<S>::make(cfg.movie.encoder, rng);
    m.vqa_category_table = Tensor<S>::uniform_fan_in(
        {cfg.movie.n_categories, cfg.movie.encoder.dim}, cfg.movie.encoder.dim,
        rng);
    std::size_t cp = cfg.vqa_channels, d = cfg.movie.encoder.dim;
    std::size_t answers = cfg.movie.answer_classes;
    m.combine = layers::Fc<S>::make(cp + d, cp, rng);
    m.head_i = layers::Fc<S>::make(cp, answers, rng);
    m.project_v = layers::Fc<S>::make(cfg.movie.channels, cp, rng);
    m.fuse = layers::Fc<S>::make(cp, cp, rng);
    m.joint_head = layers::Fc<S>::make(cp, answers, rng);
    return m;
  }

  Tensor<S> encode_vqa_query(const synth::Query& query) const {
    if (query.is_tokens) return vqa_encoder.encode(query.tokens).q;
    if (query.category_id >= cfg.movie.n_categories)
      throw ContractError("category id " + std::to_string(query.category_id) +
                          " out of range [0, " +
                          std::to_string(cfg.movie.n_categories) + ")");
    return reshape(embedding_rows(vqa_category_table, {query.category_id}),
                   {cfg.movie.encoder.dim});
  }

  // pooled counting feature v, the quantity the joint branch taps
  Tensor<S> counting_feature(const Tensor<S>& image,
                             const synth::Query& query) const {
    return global_avg_pool(
        counter.features(image, counter.encode_query(query),
                         cfg.movie.input_size));
  }

  Tensor<S> f_joint(const Tensor<S>& x) const { return relu(fuse(x)); }

  ParamList<S> params() {
    ParamList<S> out;
    auto cp = counter.params();
    for (auto& [name, p] : cp) out.emplace_back("counter." + name, p);
    auto bp = vqa_backbone.params("vqa.backbone");
    out.insert(out.end(), bp.begin(), bp.end());
    auto ep = vqa_encoder.params("vqa.encoder");
    out.insert(out.end(), ep.begin(), ep.end());
    out.emplace_back("vqa.category_table", vqa_category_table);
    out.emplace_back("vqa.combine.w", combine.w);
    out.emplace_back("vqa.combine.b", combine.b);
    out.emplace_back("vqa.head_i.w", head_i.w);
    out.emplace_back("vqa.head_i.b", head_i.b);
    out.emplace_back("joint.project_v.w", project_v.w);
    out.emplace_back("joint.project_v.b", project_v.b);
    out.emplace_back("joint.fuse.w", fuse.w);
    out.emplace_back("joint.fuse.b", fuse.b);
    out.emplace_back("joint.head.w", joint_head.w);
    out.emplace_back("joint.head.b", joint_head.b);
    return out;
  }

  // parameters that only feed the auxiliary branches; joint predictions do
  // not read them
  ParamList<S> aux_params() {
    return {{"vqa.head_i.w", head_i.w},
            {"vqa.head_i.b", head_i.b},
            {"counter.head1.w", counter.head1.w},
            {"counter.head1.b", counter.head1.b},
            {"counter.head2.w", counter.head2.w},
            {"counter.head2.b", counter.head2.b}};
  }
};

template <class S>
ToyVqaOut<S> toy_vqa_forward(const FusionModel<S>& m, const Tensor<S>& image,
                             const synth::Query& query) {
  Tensor<S> f = global_avg_pool(m.vqa_backbone.forward(image));
  Tensor<S> qe = m.encode_vqa_query(query);
  Tensor<S> i = relu(m.combine(concat_vec<S>({f, qe})));
  return {i, m.head_i(i)};
}

template <class S>
Tensor<S> joint_logits(const FusionModel<S>& m, const Tensor<S>& image,
                       const synth::Query& query) {
  Tensor<S> i = toy_vqa_forward(m, image, query).i;
  Tensor<S> v = m.counting_feature(image, query);
  return m.joint_head(m.f_joint(add(i, m.project_v(v))));
}

// Equal-weight mean of the joint and two auxiliary cross-entropies. With
// naive = true only the joint branch contributes (naive fusion).
template <class S>
Tensor<S> three_branch_train_step(const FusionModel<S>& m,
                                  const Tensor<S>& image,
                                  const synth::Query& query,
                                  std::size_t answer, bool naive = false) {
  if (answer >= m.cfg.movie.answer_classes)
    throw ContractError("answer " + std::to_string(answer) +
                        " outside vocabulary of size " +
                        std::to_string(m.cfg.movie.answer_classes));
  ToyVqaOut<S> vqa = toy_vqa_forward(m, image, query);
  Tensor<S> feat = m.counter.features(image, m.counter.encode_query(query),
                                      m.cfg.movie.input_size);
  Tensor<S> v = global_avg_pool(feat);
  Tensor<S> a_j = m.joint_head(m.f_joint(add(vqa.i, m.project_v(v))));
  Tensor<S> loss_j = softmax_cross_entropy(a_j, answer);
  if (naive) return loss_j;
  Tensor<S> loss_i = softmax_cross_entropy(vqa.logits, answer);
  Tensor<S> loss_v = softmax_cross_entropy(m.counter.count_head(feat), answer);
  return scale(add(add(loss_j, loss_i), loss_v), S(1) / S(3));
}

template <class S>
std::size_t joint_predict(const FusionModel<S>& m, const Tensor<S>& image,
                          const synth::Query& query) {
  Tensor<S> logits = joint_logits(m, image, query);
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits.data()[i] > logits.data()[best]) best = i;  // ties -> smaller
  return best;
}

// Inner-product probe: compare the joint representation o against the
// reconstructions that drop one branch. The published rule credits the
// counter when p_i > p_v even though p_v is the similarity to the
// counter-only reconstruction; "corrected" flips the comparison.
template <class S>
AttributionResult<S> branch_attribution(const FusionModel<S>& m,
                                        const Tensor<S>& image,
                                        const synth::Query& query) {
  Tensor<S> i = toy_vqa_forward(m, image, query).i;
  Tensor<S> wv = m.project_v(m.counting_feature(image, query));
  Tensor<S> o = m.f_joint(add(i, wv));
  Tensor<S> o_mv = m.f_joint(i);
  Tensor<S> o_mi = m.f_joint(wv);
  AttributionResult<S> r;
  for (std::size_t k = 0; k < o.size(); ++k) {
    r.p_i += double(o.data()[k]) * double(o_mv.data()[k]);
    r.p_v += double(o.data()[k]) * double(o_mi.data()[k]);
  }
  bool paper = m.cfg.attribution_rule == "paper";
  r.score = (paper ? r.p_i > r.p_v : r.p_v > r.p_i) ? 1 : 0;
  return r;
}

}  // namespace movie
