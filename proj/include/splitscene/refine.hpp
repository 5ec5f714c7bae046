#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "splitscene/core.hpp"
#include "splitscene/rasterizer.hpp"
#include "splitscene/scene.hpp"

namespace splitscene {

/// One supervision view. The rendered image is average-pooled by `pool` before comparison;
/// `target` and `mask` live at the pooled resolution. An empty mask selects every cell.
struct RefineView {
  Camera camera;
  Image target;
  LabelMap mask;
  double weight = 1.0;
  int pool = 1;
  Vec3 background = Vec3::Zero();
};

struct RefineConfig {
  int iters = 200;
  double lr = 0.02;
  bool optimize_positions = false;
  double position_lr = 1e-3;
  int checkpoint_every = 10;
};

struct RefineResult {
  std::vector<Gaussian2D> gaussians;
  std::vector<double> checkpoints;  // best loss so far at each checkpoint
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
};

namespace detail {

struct RefineGrad {
  std::vector<double> sh;       // per gaussian, coefficient-major [coef][rgb]
  std::vector<double> opacity;  // per gaussian
  std::vector<Vec3> position;

  RefineGrad(std::size_t n, std::size_t shn) : sh(n * shn, 0.0), opacity(n, 0.0), position(n, Vec3::Zero()) {}
  void add(const RefineGrad& o) {
    for (std::size_t i = 0; i < sh.size(); ++i) sh[i] += o.sh[i];
    for (std::size_t i = 0; i < opacity.size(); ++i) opacity[i] += o.opacity[i];
    for (std::size_t i = 0; i < position.size(); ++i) position[i] += o.position[i];
  }
};

/// Weighted L1 loss of one view; accumulates gradients when grad is non-null.
inline double view_loss(const std::vector<Gaussian2D>& gs, int degree, const RefineView& v, RefineGrad* grad,
                        bool positions) {
  const int P = v.pool;
  const Camera& cam = v.camera;
  if (P < 1 || cam.width % P || cam.height % P) throw InputError("refine view size must be a multiple of its pool");
  const int W = cam.width / P, H = cam.height / P;
  if (v.target.width != W || v.target.height != H || v.target.channels < 3) throw InputError("refine target has the wrong size");
  const bool masked = !v.mask.empty();
  if (masked && (v.mask.width != W || v.mask.height != H)) throw InputError("refine mask has the wrong size");
  std::size_t count = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) count += !masked || v.mask.at(x, y);
  if (count == 0) return 0.0;

  const Rasterizer rast(gs, degree, cam);
  const Vec3 eye = cam.center();
  const std::size_t shn = static_cast<std::size_t>(sh_coefficient_count(degree));
  std::vector<Vec3> color(gs.size());
  std::vector<std::vector<double>> basis(gs.size());
  std::vector<Eigen::Vector3i> active(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const Vec3 dir = (gs[i].center.cast<double>() - eye).normalized();
    basis[i] = sh::basis(degree, dir);
    Vec3 raw(0.5, 0.5, 0.5);
    for (std::size_t k = 0; k < shn; ++k)
      for (int c = 0; c < 3; ++c) raw[c] += basis[i][k] * gs[i].sh[k * 3 + static_cast<std::size_t>(c)];
    for (int c = 0; c < 3; ++c) active[i][c] = raw[c] > 0.0;
    color[i] = raw.cwiseMax(0.0);
  }
  const double norm = v.weight / (3.0 * static_cast<double>(count));

  std::vector<double> row_loss(static_cast<std::size_t>(H), 0.0);
  std::vector<RefineGrad> row_grad;
  if (grad) row_grad.assign(static_cast<std::size_t>(H), RefineGrad(gs.size(), shn * 3));
  parallel_for(static_cast<std::size_t>(H), [&](std::size_t yy) {
    const int y = static_cast<int>(yy);
    struct Hit {
      std::uint32_t i;
      double G, T, a;
    };
    std::vector<Hit> hits;
    std::vector<std::vector<Hit>> block(static_cast<std::size_t>(P * P));
    for (int x = 0; x < W; ++x) {
      if (masked && !v.mask.at(x, y)) continue;
      Vec3 pooled = Vec3::Zero();
      for (int dy = 0; dy < P; ++dy)
        for (int dx = 0; dx < P; ++dx) {
          auto& h = block[static_cast<std::size_t>(dy * P + dx)];
          h.clear();
          double Tf = 1.0;
          rast.trace(x * P + dx, y * P + dy, [&](std::uint32_t i, double G, double, double T, double) {
            const double a = gs[i].opacity * G;
            h.push_back({i, G, T, a});
            Tf = T * (1.0 - a);
          });
          Vec3 c = Tf * v.background;
          for (const auto& e : h) c += e.a * e.T * color[e.i];
          pooled += c;
        }
      pooled /= static_cast<double>(P * P);
      Vec3 dC;
      for (int c = 0; c < 3; ++c) {
        const double diff = pooled[c] - v.target.at(x, y, c);
        row_loss[yy] += std::abs(diff);
        dC[c] = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
      }
      if (!grad) continue;
      dC *= norm / static_cast<double>(P * P);
      auto& g = row_grad[yy];
      for (int dy = 0; dy < P; ++dy)
        for (int dx = 0; dx < P; ++dx) {
          const auto& h = block[static_cast<std::size_t>(dy * P + dx)];
          Vec3 behind = v.background;  // normalized color composited behind the current hit
          const auto [origin, dir] = cam.ray(x * P + dx, y * P + dy);
          for (auto it = h.rbegin(); it != h.rend(); ++it) {
            const auto i = it->i;
            const double w = it->a * it->T;
            for (int c = 0; c < 3; ++c)
              if (active[i][c])
                for (std::size_t k = 0; k < shn; ++k) g.sh[i * shn * 3 + k * 3 + static_cast<std::size_t>(c)] += w * basis[i][k] * dC[c];
            const double dA = it->T * dC.dot(color[i] - behind);
            g.opacity[i] += it->G * dA;
            if (positions) {
              const double dG = gs[i].opacity * dA;
              const auto hit = intersect_disk(gs[i], origin, dir);
              if (hit) {
                const Vec3 tu = gs[i].tangent_u.cast<double>(), tv = gs[i].tangent_v.cast<double>();
                const Vec3 n = tu.cross(tv);
                const double nd = n.dot(dir);
                const Vec3 du = ((tu.dot(dir) / nd) * n - tu) / gs[i].scale_u;
                const Vec3 dv = ((tv.dot(dir) / nd) * n - tv) / gs[i].scale_v;
                g.position[i] += dG * it->G * (-hit->u * du - hit->v * dv);
              }
            }
            behind = it->a * color[i] + (1.0 - it->a) * behind;
          }
        }
    }
  });
  double loss = 0.0;
  for (double l : row_loss) loss += l;
  if (!grad) return loss * norm;
  RefineGrad vg(gs.size(), shn * 3);
  for (const auto& g : row_grad) vg.add(g);
  if (positions && degree > 0) {
    // Moving a center also turns its view direction and so its color.
    for (std::size_t i = 0; i < gs.size(); ++i) {
      const Vec3 off = gs[i].center.cast<double>() - eye;
      const Vec3 dir = off.normalized();
      const auto db = sh::basis_gradient(degree, dir);
      Vec3 gdir = Vec3::Zero();
      for (int c = 0; c < 3; ++c) {
        const double dc = vg.sh[i * shn * 3 + static_cast<std::size_t>(c)] / sh::kC0;
        if (dc == 0.0) continue;
        for (std::size_t k = 1; k < shn; ++k) gdir += dc * gs[i].sh[k * 3 + static_cast<std::size_t>(c)] * db[k];
      }
      vg.position[i] += (gdir - dir * dir.dot(gdir)) / off.norm();
    }
  }
  grad->add(vg);
  return loss * norm;
}

inline double total_loss(const std::vector<Gaussian2D>& gs, int degree, const std::vector<RefineView>& views,
                         RefineGrad* grad, bool positions) {
  double L = 0.0;
  for (const auto& v : views) L += view_loss(gs, degree, v, grad, positions);
  return L;
}

}  // namespace detail

/// Photometric refinement of color and opacity (optionally positions) against weighted L1
/// over all views. Checkpoints keep the best parameters; a worse checkpoint reverts and
/// halves the step size.
inline RefineResult joint_refine(const std::vector<Gaussian2D>& input, int degree, const std::vector<RefineView>& views,
                                 const RefineConfig& cfg = {}) {
  if (views.empty()) throw InputError("refinement needs at least one view");
  RefineResult res;
  res.gaussians = input;
  res.initial_loss = res.final_loss = detail::total_loss(input, degree, views, nullptr, false);
  if (!std::isfinite(res.initial_loss)) throw InputError("initial refinement loss is not finite");
  res.checkpoints.push_back(res.initial_loss);
  if (cfg.iters <= 0 || input.empty()) return res;

  const std::size_t n = input.size();
  const std::size_t shn = static_cast<std::size_t>(sh_coefficient_count(degree)) * 3;
  std::vector<Gaussian2D> cur = input, best = input;
  double best_loss = res.initial_loss;
  double lr = cfg.lr, plr = cfg.position_lr;
  const std::size_t per = shn + 1 + 3;
  std::vector<double> m(n * per, 0.0), s(n * per, 0.0);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto adam = [&](std::size_t slot, double g, int t) {
    m[slot] = b1 * m[slot] + (1 - b1) * g;
    s[slot] = b2 * s[slot] + (1 - b2) * g * g;
    return (m[slot] / (1 - std::pow(b1, t))) / (std::sqrt(s[slot] / (1 - std::pow(b2, t))) + eps);
  };
  for (int it = 1; it <= cfg.iters; ++it) {
    detail::RefineGrad g(n, shn);
    const double L = detail::total_loss(cur, degree, views, &g, cfg.optimize_positions);
    if (!std::isfinite(L)) {
      log_warning("refinement diverged; keeping the input gaussians");
      res.gaussians = input;
      res.final_loss = res.initial_loss;
      res.diverged = true;
      return res;
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < shn; ++k)
        if (g.sh[i * shn + k] != 0.0) cur[i].sh[k] -= static_cast<float>(lr * adam(i * per + k, g.sh[i * shn + k], it));
      if (g.opacity[i] != 0.0)
        cur[i].opacity = static_cast<float>(std::clamp(cur[i].opacity - lr * adam(i * per + shn, g.opacity[i], it), 0.0, 1.0));
      if (cfg.optimize_positions)
        for (int c = 0; c < 3; ++c)
          if (g.position[i][c] != 0.0)
            cur[i].center[c] -= static_cast<float>(plr * adam(i * per + shn + 1 + static_cast<std::size_t>(c), g.position[i][c], it));
    }
    if (it % std::max(1, cfg.checkpoint_every) == 0 || it == cfg.iters) {
      const double Lc = detail::total_loss(cur, degree, views, nullptr, false);
      if (std::isfinite(Lc) && Lc <= best_loss) {
        best_loss = Lc;
        best = cur;
      } else {
        cur = best;
        lr *= 0.5;
        plr *= 0.5;
      }
      res.checkpoints.push_back(best_loss);
    }
  }
  res.gaussians = best;
  res.final_loss = best_loss;
  return res;
}

/// Peak signal-to-noise ratio over RGB for images in [0, 1].
inline double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw InputError("psnr: image sizes differ");
  double se = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double d = a.at(x, y, c) - b.at(x, y, c);
        se += d * d;
        ++n;
      }
  const double mse = se / static_cast<double>(n);
  return mse <= 0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

}  // namespace splitscene
