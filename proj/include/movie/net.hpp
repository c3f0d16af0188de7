#pragma once

#include <string>
#include <utility>
#include <vector>

#include "movie/modulation.hpp"
#include "movie/synth.hpp"
#include "movie/tensor.hpp"

namespace movie {

template <class S>
using ParamList = std::vector<std::pair<std::string, Tensor<S>>>;

namespace layers {

template <class S>
struct Conv {
  Tensor<S> kernel;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv make(std::size_t cout, std::size_t cin, std::size_t k,
                   std::size_t stride, std::size_t padding, Rng& rng) {
    Conv c;
    c.kernel = Tensor<S>::uniform_fan_in({cout, cin, k, k}, cin * k * k, rng);
    c.stride = stride;
    c.padding = padding;
    return c;
  }
  Tensor<S> operator()(const Tensor<S>& x) const {
    return conv2d(x, kernel, stride, padding);
  }
};

// Per-channel trainable scaling. The conv stack is deliberately bias-free:
// the all-zero background then stays exactly zero through every stage, so
// global average pooling sums object evidence only.
template <class S>
struct Scale {
  Tensor<S> gain;
  static Scale make(std::size_t c) { return {Tensor<S>::ones({c}, true)}; }
  Tensor<S> operator()(const Tensor<S>& x) const {
    std::size_t c = gain.dim(0);
    return mul(x, reshape(gain, {c, 1, 1}));
  }
};

template <class S>
struct Fc {
  Tensor<S> w, b;
  static Fc make(std::size_t din, std::size_t dout, Rng& rng) {
    return {Tensor<S>::uniform_fan_in({din, dout}, din, rng),
            Tensor<S>::zeros({dout}, true)};
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return affine(x, w, &b); }
};

template <class S>
struct RowNorm {
  Tensor<S> gain, bias;
  static RowNorm make(std::size_t d) {
    return {Tensor<S>::ones({d}, true), Tensor<S>::zeros({d}, true)};
  }
  Tensor<S> operator()(const Tensor<S>& x) const {
    return row_norm(x, gain, bias);
  }
};

}  // namespace layers

// ---- backbone --------------------------------------------------------------

// 4 stages of [conv3x3, scale, relu, 2x2 mean pool]; output stride 16,
// channel schedule 16 -> 32 -> 48 -> C. Downsampling by averaging instead of
// strided convolution keeps per-object responses translation-stable, which
// matters a lot for counting.
template <class S>
struct Backbone {
  std::vector<layers::Conv<S>> convs;
  std::vector<layers::Scale<S>> scales;

  static Backbone make(std::size_t out_channels, Rng& rng) {
    Backbone b;
    std::vector<std::size_t> sched = {3, 16, 32, 48, out_channels};
    for (std::size_t i = 0; i + 1 < sched.size(); ++i) {
      b.convs.push_back(
          layers::Conv<S>::make(sched[i + 1], sched[i], 3, 1, 1, rng));
      b.scales.push_back(layers::Scale<S>::make(sched[i + 1]));
    }
    return b;
  }

  // depthwise 2x2 mean expressed as a fixed (non-trainable) conv
  static Tensor<S> mean_pool2(const Tensor<S>& x) {
    std::size_t c = x.dim(0);
    std::vector<S> kd(c * c * 4, S(0));
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t t = 0; t < 4; ++t) kd[(j * c + j) * 4 + t] = S(0.25);
    Tensor<S> k({c, c, 2, 2}, std::move(kd), false);
    return conv2d(x, k, 2, 0);
  }

  Tensor<S> forward(const Tensor<S>& image) const {
    if (image.ndim() != 3 || image.dim(0) != 3)
      throw ShapeError("backbone expects a 3xSxS image, got " +
                       shape_str(image.shape()));
    Tensor<S> x = image;
    for (std::size_t i = 0; i < convs.size(); ++i)
      x = mean_pool2(relu(scales[i](convs[i](x))));
    return x;
  }

  ParamList<S> params(const std::string& prefix) const {
    ParamList<S> out;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      auto base = prefix + ".stage" + std::to_string(i);
      out.emplace_back(base + ".kernel", convs[i].kernel);
      out.emplace_back(base + ".gain", scales[i].gain);
    }
    return out;
  }
};

// ---- modulated bottleneck --------------------------------------------------

// Residual bottleneck with a modulation block before the first convolution:
// y = x + expand(relu(spatial(relu(reduce(modulate(x, q)))))), a trainable
// per-channel scale after each conv.
template <class S>
struct Bottleneck {
  ModulationParams<S> modulation;
  layers::Conv<S> reduce, spatial, expand;
  layers::Scale<S> scale_reduce, scale_spatial, scale_expand;

  static Bottleneck make(const std::string& variant, std::size_t query_dim,
                         std::size_t channels, std::size_t reduction, Rng& rng) {
    std::size_t mid = std::max<std::size_t>(1, channels / reduction);
    Bottleneck b;
    b.modulation = make_modulation<S>(variant, query_dim, channels, rng);
    b.reduce = layers::Conv<S>::make(mid, channels, 1, 1, 0, rng);
    b.spatial = layers::Conv<S>::make(mid, mid, 3, 1, 1, rng);
    b.expand = layers::Conv<S>::make(channels, mid, 1, 1, 0, rng);
    b.scale_reduce = layers::Scale<S>::make(mid);
    b.scale_spatial = layers::Scale<S>::make(mid);
    b.scale_expand = layers::Scale<S>::make(channels);
    return b;
  }

  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& q) const {
    Tensor<S> m = modulate_map(x, q, modulation);
    Tensor<S> h = relu(scale_reduce(reduce(m)));
    h = relu(scale_spatial(spatial(h)));
    h = scale_expand(expand(h));
    return add(x, h);
  }

  ParamList<S> params(const std::string& prefix) {
    ParamList<S> out = modulation.params(prefix + ".mod");
    out.emplace_back(prefix + ".reduce.kernel", reduce.kernel);
    out.emplace_back(prefix + ".reduce.gain", scale_reduce.gain);
    out.emplace_back(prefix + ".spatial.kernel", spatial.kernel);
    out.emplace_back(prefix + ".spatial.gain", scale_spatial.gain);
    out.emplace_back(prefix + ".expand.kernel", expand.kernel);
    out.emplace_back(prefix + ".expand.gain", scale_expand.gain);
    return out;
  }
};

// ---- question encoder ------------------------------------------------------

template <class S>
struct LstmCell {
  Tensor<S> wx;  // E x 4D, gate order [input, forget, cell, output]
  Tensor<S> wh;  // D x 4D
  Tensor<S> b;   // 4D

  static LstmCell make(std::size_t e, std::size_t d, Rng& rng) {
    return {Tensor<S>::uniform_fan_in({e, 4 * d}, e, rng),
            Tensor<S>::uniform_fan_in({d, 4 * d}, d, rng),
            Tensor<S>::zeros({4 * d}, true)};
  }
};

template <class S>
struct SelfAttentionLayer {
  layers::Fc<S> wq, wk, wv, wo;
  layers::RowNorm<S> ln_attn, ln_ffn;
  layers::Fc<S> ffn1, ffn2;
  std::size_t heads;

  static SelfAttentionLayer make(std::size_t d, std::size_t h, Rng& rng) {
    if (d % h != 0)
      throw ContractError("encoder dim " + std::to_string(d) +
                          " not divisible by head count " + std::to_string(h));
    SelfAttentionLayer l;
    l.heads = h;
    l.wq = layers::Fc<S>::make(d, d, rng);
    l.wk = layers::Fc<S>::make(d, d, rng);
    l.wv = layers::Fc<S>::make(d, d, rng);
    l.wo = layers::Fc<S>::make(d, d, rng);
    l.ln_attn = layers::RowNorm<S>::make(d);
    l.ln_ffn = layers::RowNorm<S>::make(d);
    l.ffn1 = layers::Fc<S>::make(d, 2 * d, rng);
    l.ffn2 = layers::Fc<S>::make(2 * d, d, rng);
    return l;
  }

  // Multi-head attention with key-side padding mask, residual + layer norm,
  // then the feed-forward sublayer. No position embeddings.
  Tensor<S> forward(const Tensor<S>& x, const std::vector<char>& mask) const {
    std::size_t n = x.dim(0), d = x.dim(1), dk = d / heads;
    Tensor<S> q = wq(x), k = wk(x), v = wv(x);
    std::vector<Tensor<S>> head_outs;
    S inv_sqrt = S(1.0 / std::sqrt(double(dk)));
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<S> qh = slice_cols(q, h * dk, dk);
      Tensor<S> kh = slice_cols(k, h * dk, dk);
      Tensor<S> vh = slice_cols(v, h * dk, dk);
      Tensor<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);  // N x N
      Tensor<S> attn = masked_softmax(scores, mask);
      head_outs.push_back(matmul(attn, vh));  // N x dk
    }
    // reassemble head outputs column-wise via transpose of row concat
    std::vector<Tensor<S>> t;
    for (auto& ho : head_outs) t.push_back(transpose(ho));
    Tensor<S> merged = transpose(concat_rows(t));  // N x D
    Tensor<S> y = ln_attn(add(x, wo(merged)));
    Tensor<S> f = ffn2(relu(ffn1(y)));
    (void)n;
    return ln_ffn(add(y, f));
  }

  ParamList<S> params(const std::string& p) const {
    return {{p + ".wq.w", wq.w},     {p + ".wq.b", wq.b},
            {p + ".wk.w", wk.w},     {p + ".wk.b", wk.b},
            {p + ".wv.w", wv.w},     {p + ".wv.b", wv.b},
            {p + ".wo.w", wo.w},     {p + ".wo.b", wo.b},
            {p + ".ln1.gain", ln_attn.gain}, {p + ".ln1.bias", ln_attn.bias},
            {p + ".ffn1.w", ffn1.w}, {p + ".ffn1.b", ffn1.b},
            {p + ".ffn2.w", ffn2.w}, {p + ".ffn2.b", ffn2.b},
            {p + ".ln2.gain", ln_ffn.gain}, {p + ".ln2.bias", ln_ffn.bias}};
  }
};

template <class S>
struct SummaryAttentionOut {
  Tensor<S> q;        // D
  Tensor<S> weights;  // N, soft-maxed over unmasked positions
};

// Two-layer MLP scorer, soft-max over unmasked positions, weighted sum of
// word states. Weights are kept for the question-attention visualization.
template <class S>
SummaryAttentionOut<S> summary_attention(const Tensor<S>& word_states,
                                         const std::vector<char>& mask,
                                         const layers::Fc<S>& score1,
                                         const layers::Fc<S>& score2) {
  if (word_states.ndim() != 2)
    throw ShapeError("summary_attention expects NxD states, got " +
                     shape_str(word_states.shape()));
  std::size_t n = word_states.dim(0), d = word_states.dim(1);
  Tensor<S> s = score2(relu(score1(word_states)));  // N x 1
  Tensor<S> alpha = masked_softmax(reshape(s, {n}), mask);
  Tensor<S> q = reshape(matmul(transpose(word_states), reshape(alpha, {n, 1})), {d});
  return {q, alpha};
}

struct EncoderConfig {
  std::size_t vocab_size = 20;
  std::size_t embed_dim = 32;   // E (paper: 300-dim word vectors)
  std::size_t dim = 64;         // D (paper: 512)
  std::size_t layers = 2;       // L (paper: 4)
  std::size_t heads = 4;        // h (paper: 8)
  std::size_t max_len = 8;      // N, fixed question cap
};

template <class S>
struct QuestionEncoder {
  EncoderConfig cfg;
  Tensor<S> embedding;  // V x E
  LstmCell<S> lstm;
  std::vector<SelfAttentionLayer<S>> sa;
  layers::Fc<S> score1, score2;  // summary scorer D -> D -> 1

  static QuestionEncoder make(const EncoderConfig& cfg, Rng& rng) {
    QuestionEncoder e;
    e.cfg = cfg;
    e.embedding = Tensor<S>::uniform_fan_in({cfg.vocab_size, cfg.embed_dim},
                                            cfg.embed_dim, rng);
    e.lstm = LstmCell<S>::make(cfg.embed_dim, cfg.dim, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      e.sa.push_back(SelfAttentionLayer<S>::make(cfg.dim, cfg.heads, rng));
    e.score1 = layers::Fc<S>::make(cfg.dim, cfg.dim, rng);
    e.score2 = layers::Fc<S>::make(cfg.dim, 1, rng);
    return e;
  }

  // Pads/caps the token sequence to max_len; pad id 0 is masked out of
  // attention and the summary weights.
  std::vector<std::size_t> pad_tokens(const std::vector<std::size_t>& tokens) const {
    std::vector<std::size_t> ids(tokens.begin(),
                                 tokens.begin() +
                                     std::min(tokens.size(), cfg.max_len));
    ids.resize(cfg.max_len, 0);
    return ids;
  }

  SummaryAttentionOut<S> encode(const std::vector<std::size_t>& tokens) const {
    auto ids = pad_tokens(tokens);
    std::vector<char> mask(cfg.max_len);
    for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] != 0;

    Tensor<S> x = embedding_rows(embedding, ids);  // N x E
    // one-directional LSTM over all timesteps
    std::size_t d = cfg.dim;
    Tensor<S> h = Tensor<S>::zeros({1, d});
    Tensor<S> c = Tensor<S>::zeros({1, d});
    std::vector<Tensor<S>> states;
    for (std::size_t t = 0; t < cfg.max_len; ++t) {
      Tensor<S> xt = slice_rows(x, t, 1);  // 1 x E
      Tensor<S> gates = add(add(affine(xt, lstm.wx), affine(h, lstm.wh)),
                            reshape(lstm.b, {1, 4 * d}));
      Tensor<S> ig = sigmoid(slice_cols(gates, 0, d));
      Tensor<S> fg = sigmoid(slice_cols(gates, d, d));
      Tensor<S> gg = tanh_op(slice_cols(gates, 2 * d, d));
      Tensor<S> og = sigmoid(slice_cols(gates, 3 * d, d));
      c = add(mul(fg, c), mul(ig, gg));
      h = mul(og, tanh_op(c));
      states.push_back(h);
    }
    Tensor<S> seq = concat_rows(states);  // N x D
    for (const auto& layer : sa) seq = layer.forward(seq, mask);
    return summary_attention(seq, mask, score1, score2);
  }

  ParamList<S> params(const std::string& p) const {
    ParamList<S> out = {{p + ".embedding", embedding},
                        {p + ".lstm.wx", lstm.wx},
                        {p + ".lstm.wh", lstm.wh},
                        {p + ".lstm.b", lstm.b}};
    for (std::size_t l = 0; l < sa.size(); ++l) {
      auto lp = sa[l].params(p + ".sa" + std::to_string(l));
      out.insert(out.end(), lp.begin(), lp.end());
    }
    out.emplace_back(p + ".score1.w", score1.w);
    out.emplace_back(p + ".score1.b", score1.b);
    out.emplace_back(p + ".score2.w", score2.w);
    out.emplace_back(p + ".score2.b", score2.b);
    return out;
  }
};

// ---- full counting network -------------------------------------------------

struct NetConfig {
  std::size_t channels = 64;       // C
  std::size_t n_blocks = 4;
  std::string variant = "movie";
  std::size_t answer_classes = 10; // counts 0..9 (paper ranges 0..20 / 0..15)
  std::size_t input_size = 64;     // fixed global canvas S
  std::size_t reduction = 4;
  std::size_t n_categories = 6;
  EncoderConfig encoder;
};

template <class S>
struct MovieNet {
  NetConfig cfg;
  Backbone<S> backbone;
  std::vector<Bottleneck<S>> blocks;
  layers::Fc<S> head1, head2;      // two-layer MLP classifier, hidden 2C
  Tensor<S> category_table;        // n_categories x D
  QuestionEncoder<S> encoder;

  static MovieNet make(const NetConfig& cfg, Rng& rng) {
    MovieNet m;
    m.cfg = cfg;
    m.backbone = Backbone<S>::make(cfg.channels, rng);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i)
      m.blocks.push_back(Bottleneck<S>::make(cfg.variant, cfg.encoder.dim,
                                             cfg.channels, cfg.reduction, rng));
    m.head1 = layers::Fc<S>::make(cfg.channels, 2 * cfg.channels, rng);
    m.head2 = layers::Fc<S>::make(2 * cfg.channels, cfg.answer_classes, rng);
    m.category_table = Tensor<S>::uniform_fan_in(
        {cfg.n_categories, cfg.encoder.dim}, cfg.encoder.dim, rng);
    m.encoder = QuestionEncoder<S>::make(cfg.encoder, rng);
    return m;
  }

  Tensor<S> encode_category(std::size_t class_id) const {
    if (class_id >= cfg.n_categories)
      throw ContractError("category id " + std::to_string(class_id) +
                          " out of range [0, " +
                          std::to_string(cfg.n_categories) + ")");
    return reshape(embedding_rows(category_table, {class_id}), {cfg.encoder.dim});
  }

  Tensor<S> encode_query(const synth::Query& query) const {
    if (query.is_tokens) return encoder.encode(query.tokens).q;
    return encode_category(query.category_id);
  }

  // expected_size: the fixed-input-size policy; callers that evaluate with
  // batch-dependent padding pass the actual image size instead.
  Tensor<S> features(const Tensor<S>& image, const Tensor<S>& q,
                     std::size_t expected_size) const {
    if (image.ndim() != 3 || image.dim(1) != expected_size ||
        image.dim(2) != expected_size)
      throw ContractError("input image " + shape_str(image.shape()) +
                          " does not match configured size " +
                          std::to_string(expected_size));
    Tensor<S> x = backbone.forward(image);
    for (const auto& b : blocks) x = b.forward(x, q);
    return x;
  }

  Tensor<S> count_head(const Tensor<S>& feature_map) const {
    return head2(relu(head1(global_avg_pool(feature_map))));
  }

  Tensor<S> forward(const Tensor<S>& image, const synth::Query& query) const {
    return count_head(features(image, encode_query(query), cfg.input_size));
  }

  std::size_t predict(const Tensor<S>& image, const synth::Query& query) const {
    auto logits = forward(image, query);
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits.data()[i] > logits.data()[best]) best = i;  // ties -> smaller index
    return best;
  }

  ParamList<S> params() {
    ParamList<S> out = backbone.params("backbone");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto bp = blocks[i].params("block" + std::to_string(i));
      out.insert(out.end(), bp.begin(), bp.end());
    }
    out.emplace_back("head1.w", head1.w);
    out.emplace_back("head1.b", head1.b);
    out.emplace_back("head2.w", head2.w);
    out.emplace_back("head2.b", head2.b);
    out.emplace_back("category_table", category_table);
    auto ep = encoder.params("encoder");
    out.insert(out.end(), ep.begin(), ep.end());
    return out;
  }
};

}  // namespace movie
