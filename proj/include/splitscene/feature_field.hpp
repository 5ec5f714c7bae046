#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "splitscene/contrastive.hpp"
#include "splitscene/core.hpp"
#include "splitscene/rasterizer.hpp"
#include "splitscene/scene.hpp"
#include "splitscene/tracker.hpp"

namespace splitscene {

enum class MeanMode { BatchLocal, Global };

struct TrainingConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  int window_k = 2;
  Temperature temperature{0.3, {}};
  int samples_per_mask = 64;
  double lr = 5e-3;
  int iters = 2000;
  double tau_seg = 0.9;
  std::uint64_t seed = 0;
  MeanMode mean_mode = MeanMode::BatchLocal;
  double global_momentum = 0.9;  // running-mean decay when mean_mode is Global
  double cutoff = kDefaultCutoff;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw InputError("loss weights must be non-negative");
    if (!(temperature.value > 0)) throw InputError("temperature must be positive");
    for (const auto& [l, v] : temperature.per_instance)
      if (!(v > 0)) throw InputError("temperature must be positive");
    if (!(tau_seg > 0 && tau_seg <= 1)) throw InputError("tau_seg must lie in (0, 1]");
    if (window_k < 0) throw InputError("window_k must be non-negative");
    if (samples_per_mask < 1) throw InputError("samples_per_mask must be positive");
    if (iters < 0) throw InputError("iters must be non-negative");
    if (!(lr > 0)) throw InputError("lr must be positive");
  }
};

struct LossTerms {
  double single = 0.0;
  double cross = 0.0;
  double threed = 0.0;
  double total = 0.0;
};

struct TrainLogRow {
  int iter = 0;
  int frame = 0;
  LossTerms loss;
};

struct TrainResult {
  bool single_instance = false;
  std::vector<TrainLogRow> log;
};

inline FeatureD normalized(const FeatureD& f) { return f / std::max(f.norm(), 1e-12); }

inline double cosine(const FeatureD& a, const FeatureD& b) { return normalized(a).dot(normalized(b)); }

/// Per-frame state reused across iterations; geometry is frozen while features train.
struct FrameCache {
  int frame = 0;
  int width = 0;
  ContributionList contributions;                      // every pixel, row-major
  std::map<int, std::vector<std::uint32_t>> raw;       // mask id -> pixels
  std::map<int, std::vector<std::uint32_t>> clustered;  // instance id -> pixels
  std::map<int, std::vector<std::uint32_t>> visible;    // instance id -> gaussians contributing here
};

inline std::vector<FrameCache> build_frame_caches(const SplatScene& scene, const std::vector<InstanceRecord>& instances,
                                                  double cutoff = kDefaultCutoff) {
  std::map<MaskKey, int> mask_instance;
  for (const auto& inst : instances)
    for (const auto& k : inst.masks) mask_instance[k] = inst.id;
  const auto g_label = gaussian_labels(scene.gaussians.size(), instances);
  std::vector<FrameCache> caches(scene.frames.size());
  for (std::size_t fi = 0; fi < scene.frames.size(); ++fi) {
    const Frame& f = scene.frames[fi];
    FrameCache& c = caches[fi];
    c.frame = f.index;
    c.width = f.camera.width;
    c.contributions = Rasterizer(scene.gaussians, scene.sh_degree, f.camera, cutoff).contributions();
    std::set<std::uint32_t> seen;
    for (std::size_t p = 0; p < c.contributions.size(); ++p) {
      const auto list = c.contributions.at(p);
      for (const auto& e : list) seen.insert(e.gaussian);
      if (list.empty()) continue;  // nothing rendered: no feature to supervise
      const auto [x, y] = c.contributions.pixels[p];
      const int id = f.mask_map.at(x, y);
      if (id == 0) continue;
      c.raw[id].push_back(static_cast<std::uint32_t>(p));
      const auto it = mask_instance.find({f.index, id});
      if (it != mask_instance.end()) c.clustered[it->second].push_back(static_cast<std::uint32_t>(p));
    }
    for (auto g : seen)
      if (g_label[g] > 0) c.visible[g_label[g]].push_back(g);
  }
  return caches;
}

namespace detail {

/// One loss term's samples: either rendered pixels or gaussians, with a label each.
struct TermSamples {
  LabeledBatch batch;
  std::vector<std::pair<std::size_t, std::uint32_t>> pixels;  // (frame cache, pixel) per sample; gaussian when cache == npos
};

constexpr std::size_t kGaussianSample = static_cast<std::size_t>(-1);

inline FeatureD rendered_feature(const FrameCache& c, std::uint32_t p, const std::vector<FeatureD>& feats) {
  FeatureD f = FeatureD::Zero();
  for (const auto& e : c.contributions.at(p)) f += static_cast<double>(e.weight) * feats[e.gaussian];
  return f;
}

template <class Rng>
std::uint32_t pick(const std::vector<std::uint32_t>& v, Rng& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

template <class Rng>
void sample_pixels(TermSamples& t, const std::vector<FrameCache>& caches, std::size_t ci,
                   const std::map<int, std::vector<std::uint32_t>>& groups, int samples, const std::vector<FeatureD>& feats,
                   Rng& rng) {
  for (const auto& [label, px] : groups) {
    for (int s = 0; s < samples; ++s) {
      const auto p = pick(px, rng);
      t.batch.add(rendered_feature(caches[ci], p, feats), label);
      t.pixels.emplace_back(ci, p);
    }
  }
}

inline void backprop(const TermSamples& t, const std::vector<FeatureD>& grad, double weight,
                     const std::vector<FrameCache>& caches, std::vector<FeatureD>& out) {
  for (std::size_t a = 0; a < t.pixels.size(); ++a) {
    const auto [ci, p] = t.pixels[a];
    if (ci == kGaussianSample) {
      out[p] += weight * grad[a];
      continue;
    }
    for (const auto& e : caches[ci].contributions.at(p)) out[e.gaussian] += (weight * e.weight) * grad[a];
  }
}

inline std::size_t distinct_labels(const LabeledBatch& b) { return std::set<int>(b.labels.begin(), b.labels.end()).size(); }

}  // namespace detail

/// Stateful trainer so a single step can be inspected; train() drives it.
class FeatureTrainer {
 public:
  FeatureTrainer(SplatScene& scene, const std::vector<InstanceRecord>& instances, const TrainingConfig& cfg)
      : scene_(scene), instances_(instances), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    if (scene.frames.empty()) throw InputError("scene has no frames to train on");
    feats_.resize(scene.gaussians.size());
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t i = 0; i < feats_.size(); ++i) {
      feats_[i] = scene.gaussians[i].feature.cast<double>();
      if (feats_[i].norm() < 1e-8)
        for (int k = 0; k < kFeatureDim; ++k) feats_[i][k] = nd(rng_);
    }
    m_.assign(feats_.size(), FeatureD::Zero());
    v_.assign(feats_.size(), FeatureD::Zero());
    caches_ = build_frame_caches(scene_, instances_, cfg_.cutoff);
    // Index order so the adjacent-view window is well defined.
    std::stable_sort(caches_.begin(), caches_.end(), [](const FrameCache& a, const FrameCache& b) { return a.frame < b.frame; });
  }

  const std::vector<FeatureD>& features() const { return feats_; }
  const std::vector<FrameCache>& caches() const { return caches_; }

  /// Loss terms and per-gaussian gradient for frame position fi with the given sampling rng.
  LossTerms evaluate(std::size_t fi, std::mt19937_64& rng, std::vector<FeatureD>* grad) {
    LossTerms L;
    if (grad) grad->assign(feats_.size(), FeatureD::Zero());
    const int S = cfg_.samples_per_mask;
    if (cfg_.lambda1 > 0) {
      detail::TermSamples t;
      detail::sample_pixels(t, caches_, fi, caches_[fi].raw, S, feats_, rng);
      if (detail::distinct_labels(t.batch) >= 2) {
        const auto r = contrastive(t.batch, cfg_.temperature, grad != nullptr);
        L.single = r.loss;
        if (grad) detail::backprop(t, r.grad, cfg_.lambda1, caches_, *grad);
      }
    }
    if (cfg_.lambda2 > 0) {
      detail::TermSamples t;
      const std::size_t lo = fi >= static_cast<std::size_t>(cfg_.window_k) ? fi - static_cast<std::size_t>(cfg_.window_k) : 0;
      const std::size_t hi = std::min(caches_.size() - 1, fi + static_cast<std::size_t>(cfg_.window_k));
      for (std::size_t j = lo; j <= hi; ++j) detail::sample_pixels(t, caches_, j, caches_[j].clustered, S, feats_, rng);
      if (t.batch.size() == 0) log_warning("no instance visible around frame " + std::to_string(caches_[fi].frame));
      if (detail::distinct_labels(t.batch) >= 2) L.cross = term(t, cfg_.lambda2, grad);
    }
    if (cfg_.lambda3 > 0) {
      detail::TermSamples t;
      for (const auto& [label, gs] : caches_[fi].visible)
        for (int s = 0; s < S; ++s) {
          const auto g = detail::pick(gs, rng);
          t.batch.add(feats_[g], label);
          t.pixels.emplace_back(detail::kGaussianSample, g);
        }
      if (detail::distinct_labels(t.batch) >= 2) L.threed = term(t, cfg_.lambda3, grad);
    }
    L.total = cfg_.lambda1 * L.single + cfg_.lambda2 * L.cross + cfg_.lambda3 * L.threed;
    return L;
  }

  /// One sampled frame, one adaptive-moment update.
  TrainLogRow step() {
    const std::size_t fi = std::uniform_int_distribution<std::size_t>(0, caches_.size() - 1)(rng_);
    std::vector<FeatureD> grad;
    const LossTerms L = evaluate(fi, rng_, &grad);
    ++t_;
    if (!std::isfinite(L.total))
      throw TrainingError("loss diverged at iteration " + std::to_string(t_) + " (frame " + std::to_string(caches_[fi].frame) +
                          ", single " + std::to_string(L.single) + ", cross " + std::to_string(L.cross) + ", 3d " +
                          std::to_string(L.threed) + ")");
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    for (std::size_t i = 0; i < feats_.size(); ++i) {
      if (grad[i].isZero(0.0)) continue;
      m_[i] = b1 * m_[i] + (1 - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1 - b2) * grad[i].cwiseProduct(grad[i]);
      feats_[i] -= cfg_.lr * (m_[i] / c1).cwiseQuotient(((v_[i] / c2).cwiseSqrt().array() + eps).matrix());
      // Stored as float: anything past this cannot be written back.
      if (!(feats_[i].cwiseAbs().maxCoeff() < 1e30))
        throw TrainingError("features diverged at iteration " + std::to_string(t_) + " (gaussian " + std::to_string(i) +
                            "); lower training.lr");
    }
    return {t_, caches_[fi].frame, L};
  }

  /// Writes features back (only when a step ran) and fills each instance's normalized mean feature.
  void commit(std::vector<InstanceRecord>& instances) const {
    if (t_ > 0)
      for (std::size_t i = 0; i < feats_.size(); ++i) scene_.gaussians[i].feature = feats_[i].cast<float>();
    for (auto& inst : instances) {
      FeatureD mean = FeatureD::Zero();
      for (auto g : inst.gaussians) mean += normalized(feats_[g]);
      inst.mean_feature = normalized(mean);
    }
  }

 private:
  double term(const detail::TermSamples& t, double weight, std::vector<FeatureD>* grad) {
    if (cfg_.mean_mode == MeanMode::Global) {
      // Running means are updated from the batch, then held fixed for the gradient.
      const auto local = contrastive(t.batch, cfg_.temperature, false);
      for (const auto& [label, mean] : local.means) {
        auto it = running_.find(label);
        if (it == running_.end())
          running_[label] = mean;
        else
          it->second = cfg_.global_momentum * it->second + (1 - cfg_.global_momentum) * mean;
      }
      const auto r = contrastive(t.batch, cfg_.temperature, grad != nullptr, &running_);
      if (grad) detail::backprop(t, r.grad, weight, caches_, *grad);
      return r.loss;
    }
    const auto r = contrastive(t.batch, cfg_.temperature, grad != nullptr);
    if (grad) detail::backprop(t, r.grad, weight, caches_, *grad);
    return r.loss;
  }

  SplatScene& scene_;
  const std::vector<InstanceRecord>& instances_;
  TrainingConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<FeatureD> feats_, m_, v_;
  std::vector<FrameCache> caches_;
  std::map<int, FeatureD> running_;
  int t_ = 0;
};

/// Trains features in place and fills mean_feature. Fewer than two instances: nothing to
/// contrast, so the scene is flagged and features are left as they are.
inline TrainResult train(SplatScene& scene, std::vector<InstanceRecord>& instances, const TrainingConfig& cfg) {
  if (instances.empty()) throw InputError("no instances to train on");
  TrainResult res;
  FeatureTrainer trainer(scene, instances, cfg);
  if (instances.size() < 2) {
    log_warning("single-instance scene: contrastive training skipped");
    res.single_instance = true;
    trainer.commit(instances);
    return res;
  }
  for (int it = 0; it < cfg.iters; ++it) res.log.push_back(trainer.step());
  trainer.commit(instances);
  return res;
}

inline void write_training_log(const std::string& path, const std::vector<TrainLogRow>& log) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << "iter,frame,total,single_view,cross_view,gaussian_3d\n";
  out.precision(9);
  for (const auto& r : log)
    out << r.iter << ',' << r.frame << ',' << r.loss.total << ',' << r.loss.single << ',' << r.loss.cross << ','
        << r.loss.threed << '\n';
}

/// Gaussians whose feature cosine to the instance mean reaches tau.
inline std::vector<std::size_t> segment_instance(const SplatScene& scene, const InstanceRecord& inst, double tau = 0.9) {
  if (inst.mean_feature.isZero(0.0)) throw InputError("instance " + std::to_string(inst.id) + " has no mean feature");
  const FeatureD ref = normalized(inst.mean_feature);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scene.gaussians.size(); ++i)
    if (normalized(scene.gaussians[i].feature.cast<double>()).dot(ref) >= tau) out.push_back(i);
  if (out.empty())
    throw LookupError("no gaussian reaches similarity " + std::to_string(tau) + " for instance " + std::to_string(inst.id));
  return out;
}

/// Binary mask of pixels whose rendered feature matches ref with cosine >= tau and alpha > 0.5.
inline LabelMap similarity_mask(const RenderOutput& r, const FeatureD& ref, double tau, std::vector<float>* similarity = nullptr) {
  LabelMap m(r.width, r.height);
  const FeatureD q = normalized(ref);
  if (similarity) similarity->assign(static_cast<std::size_t>(r.width) * r.height, 0.f);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      const std::size_t p = r.pixel(x, y);
      const FeatureD f = r.feature_at(x, y);
      if (f.norm() < 1e-12) continue;
      const double c = normalized(f).dot(q);
      if (similarity && r.alpha[p] >= 0.1f) (*similarity)[p] = static_cast<float>(std::max(c, 0.0));
      if (c >= tau && r.alpha[p] > 0.5f) m.labels[p] = 1;
    }
  return m;
}

struct ClickResult {
  bool background = true;
  int instance = 0;
  double score = 0.0;
  std::vector<std::size_t> gaussians;
  LabelMap mask;                  // 1 inside the selected instance
  std::vector<float> similarity;  // soft mask, row-major
};

inline ClickResult query_click(const SplatScene& scene, const std::vector<InstanceRecord>& instances, const Camera& cam,
                               int px, int py, double tau = 0.9) {
  if (px < 0 || py < 0 || px >= cam.width || py >= cam.height) throw InputError("click outside the image");
  const RenderOutput r = render(scene, cam, kDefaultCutoff, true);
  ClickResult out;
  if (r.alpha[r.pixel(px, py)] < 0.1f) return out;
  const FeatureD f = normalized(r.feature_at(px, py));
  double best = -2.0;
  for (const auto& inst : instances) {
    const double c = f.dot(normalized(inst.mean_feature));
    if (c > best) {
      best = c;
      out.instance = inst.id;
    }
  }
  if (out.instance == 0) return out;
  out.background = false;
  out.score = best;
  const auto& inst = *std::find_if(instances.begin(), instances.end(), [&](const auto& i) { return i.id == out.instance; });
  out.gaussians = segment_instance(scene, inst, tau);
  out.mask = similarity_mask(r, inst.mean_feature, tau, &out.similarity);
  return out;
}

inline double mask_iou(const LabelMap& a, int la, const LabelMap& b, int lb, bool* empty_union = nullptr) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t p = 0; p < a.labels.size(); ++p) {
    const bool x = a.labels[p] == la, y = b.labels[p] == lb;
    inter += x && y;
    uni += x || y;
  }
  if (empty_union) *empty_union = uni == 0;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double set_iou(std::vector<std::size_t> a, std::vector<std::size_t> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::size_t> inter;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  const std::size_t uni = a.size() + b.size() - inter.size();
  return uni == 0 ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
}

struct MiouReport {
  double miou = 0.0;
  std::map<int, double> per_instance;
};

/// Reference-view protocol: each ground-truth instance's feature is the normalized mean of
/// rendered features over its mask in the reference frame; its mask in every other frame is
/// the cosine-thresholded render, scored by IoU against ground truth.
inline MiouReport evaluate_miou(const SplatScene& scene, const std::vector<LabelMap>& gt, std::size_t reference,
                                double tau = 0.9) {
  if (gt.size() != scene.frames.size()) throw InputError("ground truth needs one mask per frame");
  if (reference >= scene.frames.size()) throw InputError("reference frame out of range");
  std::vector<RenderOutput> renders(scene.frames.size());
  for (std::size_t f = 0; f < scene.frames.size(); ++f) renders[f] = render(scene, scene.frames[f].camera, kDefaultCutoff, true);
  const auto& ref = renders[reference];
  std::map<int, FeatureD> query;
  for (int y = 0; y < ref.height; ++y)
    for (int x = 0; x < ref.width; ++x) {
      const int id = gt[reference].at(x, y);
      const FeatureD f = ref.feature_at(x, y);
      if (id == 0 || f.norm() < 1e-12) continue;
      auto [it, fresh] = query.emplace(id, FeatureD::Zero());
      it->second += normalized(f);
    }
  MiouReport rep;
  for (const auto& [id, q] : query) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t f = 0; f < scene.frames.size(); ++f) {
      if (f == reference) continue;
      const LabelMap pred = similarity_mask(renders[f], q, tau);
      bool empty = false;
      const double iou = mask_iou(pred, 1, gt[f], id, &empty);
      if (empty) continue;
      sum += iou;
      ++n;
    }
    if (n > 0) rep.per_instance[id] = sum / n;
  }
  for (const auto& [id, v] : rep.per_instance) rep.miou += v;
  if (!rep.per_instance.empty()) rep.miou /= static_cast<double>(rep.per_instance.size());
  return rep;
}

}  // namespace splitscene
