#pragma once

// Independent least-squares checker: builds X straight from record flags,
// inverts XᵀX by Gauss-Jordan elimination with partial pivoting, and forms
// (XᵀX)⁻¹Xᵀy. Also the synthetic record generator with planted effects.

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmfm/eval.hpp"
#include "mmfm/rng.hpp"

namespace ols_oracle {

struct Solution {
  std::vector<double> beta, se;
};

inline std::vector<double> row_of(const mmfm::EvalRecord& r, bool interactions) {
  const double s = r.flags.skip_pretrain, d = r.flags.dino_like, l = r.flags.large_lm;
  if (!interactions) return {1, s, d, l};
  return {1, s, d, l, s * d, s * l, d * l, s * d * l};
}

inline std::vector<std::vector<double>> invert(std::vector<std::vector<double>> a) {
  const std::size_t p = a.size();
  std::vector<std::vector<double>> inv(p, std::vector<double>(p, 0.0));
  for (std::size_t i = 0; i < p; ++i) inv[i][i] = 1;
  for (std::size_t c = 0; c < p; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < p; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    if (std::abs(a[piv][c]) < 1e-12) throw std::runtime_error("singular");
    std::swap(a[c], a[piv]);
    std::swap(inv[c], inv[piv]);
    const double h = a[c][c];
    for (std::size_t k = 0; k < p; ++k) {
      a[c][k] /= h;
      inv[c][k] /= h;
    }
    for (std::size_t r = 0; r < p; ++r) {
      if (r == c) continue;
      const double f = a[r][c];
      for (std::size_t k = 0; k < p; ++k) {
        a[r][k] -= f * a[c][k];
        inv[r][k] -= f * inv[c][k];
      }
    }
  }
  return inv;
}

inline Solution solve(const std::vector<mmfm::EvalRecord>& records, bool interactions = false) {
  const std::size_t p = interactions ? 8 : 4, n = records.size();
  std::vector<std::vector<double>> xtx(p, std::vector<double>(p, 0.0));
  std::vector<double> xty(p, 0.0);
  for (const auto& r : records) {
    const auto x = row_of(r, interactions);
    for (std::size_t i = 0; i < p; ++i) {
      xty[i] += x[i] * r.correct;
      for (std::size_t j = 0; j < p; ++j) xtx[i][j] += x[i] * x[j];
    }
  }
  const auto inv = invert(xtx);
  Solution s;
  s.beta.assign(p, 0.0);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) s.beta[i] += inv[i][j] * xty[j];
  double rss = 0;
  for (const auto& r : records) {
    const auto x = row_of(r, interactions);
    double yhat = 0;
    for (std::size_t i = 0; i < p; ++i) yhat += x[i] * s.beta[i];
    rss += (r.correct - yhat) * (r.correct - yhat);
  }
  const double sigma2 = rss / static_cast<double>(n - p);
  for (std::size_t i = 0; i < p; ++i) s.se.push_back(std::sqrt(sigma2 * inv[i][i]));
  return s;
}

/// n records with each flag a fair coin and P(correct) = base + Σ effect·flag.
inline std::vector<mmfm::EvalRecord> synthetic(std::size_t n, std::uint64_t seed, double base, double skip_effect,
                                               double dino_effect = 0, double large_effect = 0,
                                               const std::string& benchmark = "toy-pope") {
  mmfm::CounterRng rng(seed);
  std::vector<mmfm::EvalRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    mmfm::EvalRecord r;
    r.benchmark = benchmark;
    r.flags = {rng.uniform() < 0.5, rng.uniform() < 0.5, rng.uniform() < 0.5};
    const double p = base + skip_effect * r.flags.skip_pretrain + dino_effect * r.flags.dino_like +
                     large_effect * r.flags.large_lm;
    r.correct = rng.uniform() < p;
    char id[32];
    std::snprintf(id, sizeof id, "item-%06zu", i);
    r.item_id = id;
    r.run_id = "cell-" + std::to_string(r.flags.skip_pretrain) + std::to_string(r.flags.dino_like) +
               std::to_string(r.flags.large_lm);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ols_oracle
