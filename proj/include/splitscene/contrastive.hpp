#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "splitscene/core.hpp"

namespace splitscene {

/// Features with one instance label each. Features are raw; the loss normalizes them.
struct LabeledBatch {
  std::vector<FeatureD> features;
  std::vector<int> labels;

  void add(const FeatureD& f, int label) {
    features.push_back(f);
    labels.push_back(label);
  }
  std::size_t size() const { return features.size(); }
};

/// Per-instance temperature: a constant with optional per-label overrides.
struct Temperature {
  double value = 0.3;
  std::map<int, double> per_instance;

  double operator()(int label) const {
    const auto it = per_instance.find(label);
    return it == per_instance.end() ? value : it->second;
  }
};

struct ContrastiveResult {
  double loss = 0.0;
  std::vector<FeatureD> grad;     // w.r.t. raw features, empty unless requested
  std::map<int, FeatureD> means;  // mean of normalized features per label
};

namespace detail {
constexpr double kNormFloor = 1e-12;
}

/// Contrastive loss over instance means with softmax temperatures:
///   L = -(1/N) sum_a log softmax_k(g_a . m_k / phi_k)[y_a],  g_a = f_a / |f_a|,
/// where m_k is the mean of g over samples labelled k and N the number of labels.
/// When fixed_means is given those means are used as constants instead.
inline ContrastiveResult contrastive(const LabeledBatch& batch, const Temperature& temp, bool want_grad = true,
                                     const std::map<int, FeatureD>* fixed_means = nullptr) {
  if (batch.features.size() != batch.labels.size()) throw InputError("batch features and labels differ in length");
  const std::size_t n = batch.size();
  std::vector<FeatureD> g(n);
  std::vector<double> norm(n);
  for (std::size_t a = 0; a < n; ++a) {
    if (!batch.features[a].allFinite()) throw TrainingError("non-finite feature in contrastive batch");
    norm[a] = std::max(batch.features[a].norm(), detail::kNormFloor);
    g[a] = batch.features[a] / norm[a];
  }

  // Dense label slots in ascending label order.
  std::map<int, std::size_t> slot;
  for (int l : batch.labels) slot.emplace(l, 0);
  if (slot.size() < 2) throw TrainingError("contrastive batch needs at least two distinct labels");
  std::vector<int> label_of;
  for (auto& [l, s] : slot) {
    s = label_of.size();
    label_of.push_back(l);
  }
  const std::size_t K = slot.size();
  std::vector<std::size_t> y(n);
  std::vector<double> count(K, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    y[a] = slot[batch.labels[a]];
    count[y[a]] += 1.0;
  }

  std::vector<FeatureD> m(K, FeatureD::Zero());
  std::vector<double> phi(K);
  for (std::size_t k = 0; k < K; ++k) {
    phi[k] = temp(label_of[k]);
    if (!(phi[k] > 0)) throw InputError("temperature must be positive");
  }
  if (fixed_means) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto it = fixed_means->find(label_of[k]);
      if (it == fixed_means->end()) throw TrainingError("no running mean for label " + std::to_string(label_of[k]));
      m[k] = it->second;
    }
  } else {
    for (std::size_t a = 0; a < n; ++a) m[y[a]] += g[a];
    for (std::size_t k = 0; k < K; ++k) m[k] /= count[k];
  }

  ContrastiveResult out;
  for (std::size_t k = 0; k < K; ++k) out.means[label_of[k]] = m[k];
  const double invN = 1.0 / static_cast<double>(K);
  std::vector<FeatureD> dg(want_grad ? n : 0, FeatureD::Zero());
  std::vector<FeatureD> dm(want_grad ? K : 0, FeatureD::Zero());
  std::vector<double> s(K), p(K);
  for (std::size_t a = 0; a < n; ++a) {
    double smax = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      s[k] = g[a].dot(m[k]) / phi[k];
      smax = std::max(smax, s[k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(s[k] - smax);
    const double lse = smax + std::log(z);
    out.loss -= invN * (s[y[a]] - lse);
    if (!want_grad) continue;
    for (std::size_t k = 0; k < K; ++k) p[k] = std::exp(s[k] - lse);
    for (std::size_t k = 0; k < K; ++k) {
      const double ds = -invN * ((k == y[a] ? 1.0 : 0.0) - p[k]);  // dL/ds_ak
      dg[a] += (ds / phi[k]) * m[k];
      dm[k] += (ds / phi[k]) * g[a];
    }
  }
  if (!want_grad) return out;
  if (!fixed_means)
    for (std::size_t a = 0; a < n; ++a) dg[a] += dm[y[a]] / count[y[a]];
  out.grad.resize(n);
  for (std::size_t a = 0; a < n; ++a) out.grad[a] = (dg[a] - g[a] * g[a].dot(dg[a])) / norm[a];
  return out;
}

inline double contrastive_loss(const LabeledBatch& batch, const Temperature& temp) {
  return contrastive(batch, temp, false).loss;
}

inline std::vector<FeatureD> contrastive_grad(const LabeledBatch& batch, const Temperature& temp) {
  return contrastive(batch, temp, true).grad;
}

}  // namespace splitscene
