#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "splitscene/core.hpp"

namespace splitscene {

/// betas[t-1] holds beta_t for t = 1..T.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  static NoiseSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw InputError("noise schedule needs at least one step");
    NoiseSchedule s;
    double bar = 1.0;
    for (double b : betas) {
      if (!(b > 0.0 && b < 1.0)) throw InputError("schedule betas must lie in (0, 1)");
      s.alphas.push_back(1.0 - b);
      bar *= 1.0 - b;
      s.alpha_bars.push_back(bar);
    }
    s.betas = std::move(betas);
    return s;
  }

  /// Evenly spaced betas from beta_1 to beta_T.
  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02) {
    if (steps < 1) throw InputError("noise schedule needs at least one step");
    std::vector<double> b(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i)
      b[static_cast<std::size_t>(i)] =
          steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
    return from_betas(std::move(b));
  }

  int steps() const { return static_cast<int>(betas.size()); }

  void check(int t) const {
    if (t < 1 || t > steps()) throw InputError("timestep " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
  }
  double beta(int t) const { return check(t), betas[static_cast<std::size_t>(t - 1)]; }
  double alpha(int t) const { return check(t), alphas[static_cast<std::size_t>(t - 1)]; }
  double alpha_bar(int t) const { return check(t), alpha_bars[static_cast<std::size_t>(t - 1)]; }
};

/// Arithmetic mean of noise predictions of one shape.
inline std::vector<double> average_noise(const std::vector<std::vector<double>>& predictions) {
  if (predictions.empty()) throw InputError("average_noise needs at least one prediction");
  std::vector<double> out(predictions.front().size(), 0.0);
  for (const auto& p : predictions) {
    if (p.size() != out.size()) throw InputError("noise predictions differ in shape");
    for (std::size_t i = 0; i < p.size(); ++i) out[i] += p[i];
  }
  const double inv = 1.0 / static_cast<double>(predictions.size());
  for (auto& v : out) v *= inv;
  return out;
}

/// Deterministic update x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t).
inline double ddpm_step(double x_t, double eps, int t, const NoiseSchedule& s) {
  const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  return (x_t - coef * eps) / std::sqrt(s.alpha(t));
}

inline std::vector<double> ddpm_step(const std::vector<double>& x_t, const std::vector<double>& eps, int t,
                                     const NoiseSchedule& s) {
  if (x_t.size() != eps.size()) throw InputError("ddpm_step: latent and noise differ in shape");
  const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  const double root = std::sqrt(s.alpha(t));
  std::vector<double> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = (x_t[i] - coef * eps[i]) / root;
  return out;
}

/// Forward process sample sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
inline double add_noise(double x0, double noise, int t, const NoiseSchedule& s) {
  const double ab = s.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

}  // namespace splitscene
