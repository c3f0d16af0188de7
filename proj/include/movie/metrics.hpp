#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "movie/common.hpp"

namespace movie {

// ACC plus the four RMSE variants. The nz metrics are undefined when the
// batch has no nonzero ground truth; report() uses a sentinel, the
// standalone functions error.
struct MetricsReport {
  double acc = 0;
  double rmse = 0;
  std::optional<double> rmse_nz;
  double rel_rmse = 0;
  std::optional<double> rel_rmse_nz;
  std::size_t m = 0;
  std::size_t m_nz = 0;
};

namespace detail {
inline void check_pair(const std::vector<int>& preds, const std::vector<int>& gts) {
  if (preds.empty())
    throw ContractError("metrics: empty input");
  if (preds.size() != gts.size())
    throw ContractError("metrics: length mismatch " + std::to_string(preds.size()) +
                        " vs " + std::to_string(gts.size()));
}
}  // namespace detail

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& gts) {
  detail::check_pair(preds, gts);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == gts[i];
  return double(hits) / double(preds.size());
}

inline double rmse(const std::vector<int>& preds, const std::vector<int>& gts) {
  detail::check_pair(preds, gts);
  double s = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    double e = double(gts[i]) - double(preds[i]);
    s += e * e;
  }
  return std::sqrt(s / double(preds.size()));
}

// RMSE over {i | gt_i > 0}.
inline double rmse_nz(const std::vector<int>& preds, const std::vector<int>& gts) {
  detail::check_pair(preds, gts);
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (gts[i] > 0) {
      double e = double(gts[i]) - double(preds[i]);
      s += e * e;
      ++n;
    }
  if (n == 0)
    throw ContractError("rmse_nz: no nonzero ground truth in input");
  return std::sqrt(s / double(n));
}

// sqrt(mean of (gt - pred)^2 / (gt + 1)).
inline double rel_rmse(const std::vector<int>& preds, const std::vector<int>& gts) {
  detail::check_pair(preds, gts);
  double s = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    double e = double(gts[i]) - double(preds[i]);
    s += e * e / (double(gts[i]) + 1.0);
  }
  return std::sqrt(s / double(preds.size()));
}

inline double rel_rmse_nz(const std::vector<int>& preds, const std::vector<int>& gts) {
  detail::check_pair(preds, gts);
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (gts[i] > 0) {
      double e = double(gts[i]) - double(preds[i]);
      s += e * e / (double(gts[i]) + 1.0);
      ++n;
    }
  if (n == 0)
    throw ContractError("rel_rmse_nz: no nonzero ground truth in input");
  return std::sqrt(s / double(n));
}

inline MetricsReport report(const std::vector<int>& preds, const std::vector<int>& gts) {
  detail::check_pair(preds, gts);
  MetricsReport r;
  r.m = preds.size();
  for (int g : gts) r.m_nz += g > 0;
  r.acc = accuracy(preds, gts);
  r.rmse = rmse(preds, gts);
  r.rel_rmse = rel_rmse(preds, gts);
  if (r.m_nz > 0) {
    r.rmse_nz = rmse_nz(preds, gts);
    r.rel_rmse_nz = rel_rmse_nz(preds, gts);
  }
  return r;
}

// CSV: acc,rmse,rmse_nz,rel_rmse,rel_rmse_nz,m,m_nz (6 decimals; "nan" for
// the undefined sentinel).
inline std::string to_csv(const MetricsReport& r) {
  char buf[256];
  auto fmt = [](const std::optional<double>& v) {
    if (!v) return std::string("nan");
    char b[32];
    std::snprintf(b, sizeof b, "%.6f", *v);
    return std::string(b);
  };
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%s,%.6f,%s,%zu,%zu", r.acc, r.rmse,
                fmt(r.rmse_nz).c_str(), r.rel_rmse, fmt(r.rel_rmse_nz).c_str(),
                r.m, r.m_nz);
  return buf;
}

}  // namespace movie
