#pragma once

#include <optional>
#include <string>

#include "movie/tensor.hpp"

namespace movie {

enum class ModulationKind { Film, Movie };

// Variant lattice over (beta on/off, residual on/off) on top of the two
// modulation forms. The FiLM form fixes beta+residual on and has no mixing
// matrix.
template <class S>
struct ModulationParams {
  ModulationKind kind = ModulationKind::Movie;
  bool use_beta = false;
  bool use_residual = true;
  Tensor<S> w_gamma;               // D x C
  std::optional<Tensor<S>> w_beta; // D x C, present iff use_beta
  std::optional<Tensor<S>> w;      // C x C, present for the MoVie form

  std::size_t query_dim() const { return w_gamma.dim(0); }
  std::size_t channels() const { return w_gamma.dim(1); }

  std::size_t param_count() const {
    std::size_t n = w_gamma.size();
    if (w_beta) n += w_beta->size();
    if (w) n += w->size();
    return n;
  }

  std::vector<std::pair<std::string, Tensor<S>>> params(const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back(prefix + ".w_gamma", w_gamma);
    if (w_beta) out.emplace_back(prefix + ".w_beta", *w_beta);
    if (w) out.emplace_back(prefix + ".w", *w);
    return out;
  }
};

inline bool is_valid_variant(const std::string& v) {
  return v == "film" || v == "movie" || v == "movie+beta" ||
         v == "movie-nores" || v == "movie+beta-nores";
}

// Query projections start at zero so every modulated network begins as its
// unmodulated counterpart; the mixing matrix W gets a normal fan-in init.
template <class S>
ModulationParams<S> make_modulation(const std::string& variant, std::size_t query_dim,
                                    std::size_t channels, Rng& rng) {
  if (!is_valid_variant(variant))
    throw ContractError("unknown modulation variant '" + variant + "'");
  ModulationParams<S> p;
  p.w_gamma = Tensor<S>::zeros({query_dim, channels}, true);
  if (variant == "film") {
    p.kind = ModulationKind::Film;
    p.use_beta = true;
    p.use_residual = true;
    p.w_beta = Tensor<S>::zeros({query_dim, channels}, true);
    return p;
  }
  p.kind = ModulationKind::Movie;
  p.use_beta = variant == "movie+beta" || variant == "movie+beta-nores";
  p.use_residual = variant == "movie" || variant == "movie+beta";
  if (p.use_beta) p.w_beta = Tensor<S>::zeros({query_dim, channels}, true);
  p.w = Tensor<S>::uniform_fan_in({channels, channels}, channels, rng);
  return p;
}

template <class S>
struct QueryProjection {
  Tensor<S> delta_gamma;           // C
  std::optional<Tensor<S>> beta;   // C, present iff use_beta
};

// delta_gamma = W_gamma^T q, beta = W_beta^T q (no bias terms).
template <class S>
QueryProjection<S> project_query(const Tensor<S>& q, const ModulationParams<S>& p) {
  if (q.ndim() != 1 || q.dim(0) != p.query_dim())
    throw ShapeError("project_query: q " + shape_str(q.shape()) +
                     " does not match W_gamma " + shape_str(p.w_gamma.shape()));
  std::size_t c = p.channels();
  Tensor<S> qr = reshape(q, {1, p.query_dim()});
  QueryProjection<S> out;
  out.delta_gamma = reshape(matmul(qr, p.w_gamma), {c});
  if (p.use_beta) {
    if (!p.w_beta) throw ContractError("project_query: use_beta without W_beta");
    out.beta = reshape(matmul(qr, *p.w_beta), {c});
  }
  return out;
}

// Eq. FiLM on one feature vector: (v (x) (1 (+) dg)) (+) beta.
template <class S>
Tensor<S> film(const Tensor<S>& v, const Tensor<S>& delta_gamma, const Tensor<S>& beta) {
  if (v.shape() != delta_gamma.shape() || v.shape() != beta.shape())
    throw ShapeError("film: length mismatch " + shape_str(v.shape()) + " / " +
                     shape_str(delta_gamma.shape()) + " / " + shape_str(beta.shape()));
  Tensor<S> gamma = add(Tensor<S>::ones(v.shape()), delta_gamma);
  return add(mul(v, gamma), beta);
}

// MoVie core on one feature vector: t = W^T (v (x) dg); the variant flags
// toggle beta (added to t) and the residual v.
template <class S>
Tensor<S> movie_vec(const Tensor<S>& v, const Tensor<S>& delta_gamma,
                    const Tensor<S>& w, bool use_residual = true,
                    const Tensor<S>* beta = nullptr) {
  if (v.shape() != delta_gamma.shape())
    throw ShapeError("movie: length mismatch " + shape_str(v.shape()) + " vs " +
                     shape_str(delta_gamma.shape()));
  std::size_t c = v.dim(0);
  if (w.ndim() != 2 || w.dim(0) != c || w.dim(1) != c)
    throw ShapeError("movie: W must be " + std::to_string(c) + "x" +
                     std::to_string(c) + ", got " + shape_str(w.shape()));
  Tensor<S> vmod = reshape(mul(v, delta_gamma), {1, c});
  Tensor<S> t = reshape(matmul(vmod, w), {c});  // row * W == W^T v
  if (beta) t = add(t, *beta);
  return use_residual ? add(v, t) : t;
}

// Applies the modulation identically at every location of a CxHxW map.
// The MoVie mixing W^T(.) runs as a 1x1 convolution.
template <class S>
Tensor<S> modulate_map(const Tensor<S>& feature, const Tensor<S>& q,
                       const ModulationParams<S>& p) {
  if (feature.ndim() != 3 || feature.dim(0) != p.channels())
    throw ShapeError("modulate_map: feature " + shape_str(feature.shape()) +
                     " does not match " + std::to_string(p.channels()) +
                     " channels");
  std::size_t c = p.channels();
  QueryProjection<S> proj = project_query(q, p);
  Tensor<S> dg = reshape(proj.delta_gamma, {c, 1, 1});

  if (p.kind == ModulationKind::Film) {
    Tensor<S> beta = reshape(*proj.beta, {c, 1, 1});
    return add(add(feature, mul(feature, dg)), beta);
  }
  Tensor<S> kernel = reshape(transpose(*p.w), {c, c, 1, 1});
  Tensor<S> t = conv2d(mul(feature, dg), kernel);
  if (p.use_beta) t = add(t, reshape(*proj.beta, {c, 1, 1}));
  return p.use_residual ? add(feature, t) : t;
}

// Parameter-count arithmetic behind the FiLM-vs-MoVie size comparison.
inline std::size_t movie_param_count(std::size_t query_dim, std::size_t channels) {
  return query_dim * channels + channels * channels;
}
inline std::size_t film_param_count(std::size_t query_dim, std::size_t channels) {
  return 2 * query_dim * channels;
}

}  // namespace movie
