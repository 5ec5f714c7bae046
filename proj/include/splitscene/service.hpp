#pragma once

#include <atomic>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "splitscene/pipeline.hpp"

namespace splitscene::service {

constexpr int kDefaultPort = 7878;

enum class JobStatus { Queued, Running, Done, Failed };

inline const char* to_string(JobStatus s) {
  switch (s) {
    case JobStatus::Queued: return "queued";
    case JobStatus::Running: return "running";
    case JobStatus::Done: return "done";
    case JobStatus::Failed: return "failed";
  }
  return "unknown";
}

struct Job {
  int id = 0;
  int instance = 0;
  JobStatus status = JobStatus::Queued;
  std::string message;
  std::vector<int> conditions, targets;
  std::vector<std::vector<std::uint8_t>> views;  // generated PNGs, in target order
  std::vector<std::uint8_t> splat;
};

struct OrbitParams {
  double yaw = 0.0;     // degrees
  double pitch = 20.0;  // degrees
  double radius = 0.0;  // 0 selects a radius that frames the scene
  int width = 256;
  int height = 256;
};

/// Camera on a sphere around `center`, looking at it with Z up.
inline Camera orbit_camera(const Vec3& center, const OrbitParams& p) {
  const double y = p.yaw * std::numbers::pi / 180.0, el = p.pitch * std::numbers::pi / 180.0;
  const Vec3 eye = center + p.radius * Vec3(std::cos(el) * std::cos(y), std::cos(el) * std::sin(y), std::sin(el));
  return Camera::look_at(eye, center, Vec3::UnitZ(), p.width, p.height, 50.0 * std::numbers::pi / 180.0);
}

/// Scene, instances and completion jobs behind the HTTP API.
class Session {
 public:
  Session(std::optional<SplatScene> scene, std::vector<InstanceRecord> instances, CompletionSettings settings)
      : scene_(std::move(scene)), instances_(std::move(instances)), settings_(std::move(settings)) {
    if (scene_) {
      center_ = centroid(scene_->gaussians);
      for (const auto& g : scene_->gaussians) extent_ = std::max(extent_, (g.center.cast<double>() - center_).norm());
    }
  }

  /// Loads the working scene and instances from a pipeline output directory when present.
  static std::unique_ptr<Session> from_config(const PipelineConfig& cfg) {
    std::optional<SplatScene> scene;
    if (fs::exists(pipeline::trained_path(cfg.output)) || (!cfg.scene.empty() && fs::exists(cfg.scene)))
      scene = pipeline::load_working_scene(cfg, false);
    std::vector<InstanceRecord> instances;
    if (fs::exists(pipeline::instances_path(cfg.output))) instances = pipeline::read_instances(cfg.output);
    return std::make_unique<Session>(std::move(scene), std::move(instances), cfg.completion);
  }

  ~Session() { wait(); }

  bool has_scene() const { return scene_.has_value(); }
  bool trained() const { return pipeline::trained(instances_); }
  const SplatScene& scene() const { return *scene_; }
  const std::vector<InstanceRecord>& instances() const { return instances_; }
  double tau_seg() const { return settings_.run.tau_seg; }

  OrbitParams defaults() const {
    OrbitParams p;
    p.radius = 2.5 * std::max(extent_, 1e-3);
    return p;
  }
  Camera camera(const OrbitParams& p) const { return orbit_camera(center_, p); }

  const InstanceRecord* find(int id) const {
    for (const auto& i : instances_)
      if (i.id == id) return &i;
    return nullptr;
  }

  /// Starts a completion job; nullopt when another mutating job is active.
  std::optional<int> start_completion(int instance) {
    std::lock_guard lock(mu_);
    if (busy_) return std::nullopt;
    busy_ = true;
    const int id = next_job_++;
    jobs_[id] = Job{id, instance};
    if (worker_.joinable()) worker_.join();
    worker_ = std::thread([this, id, instance] { run_job(id, instance); });
    return id;
  }

  std::optional<Job> job(int id) const {
    std::lock_guard lock(mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
  }

  void wait() {
    if (worker_.joinable()) worker_.join();
  }

  /// Digest of everything a request could mutate.
  std::size_t state_hash() const {
    std::lock_guard lock(mu_);
    std::string blob;
    if (scene_) {
      const auto bytes = io::encode_container(scene_->gaussians, scene_->sh_degree);
      blob.assign(bytes.begin(), bytes.end());
    }
    blob += pipeline::instances_json(instances_, nullptr, true).dump();
    for (const auto& [id, j] : jobs_) {
      blob += std::to_string(id) + to_string(j.status) + j.message + std::to_string(j.views.size()) +
              std::to_string(j.splat.size());
    }
    blob += std::to_string(next_job_) + (busy_ ? "1" : "0");
    return std::hash<std::string>{}(blob);
  }

 private:
  void run_job(int id, int instance) {
    {
      std::lock_guard lock(mu_);
      jobs_[id].status = JobStatus::Running;
    }
    Job result;
    {
      std::lock_guard lock(mu_);
      result = jobs_.at(id);
    }
    try {
      const auto out = pipeline::complete(*scene_, *find(instance), settings_);
      result.conditions = out.job.plan.conditions;
      result.targets = out.job.result.targets;
      for (const auto& img : out.job.result.images) result.views.push_back(png::encode_rgb(img));
      result.splat = io::encode_container(out.refined, scene_->sh_degree);
      result.status = JobStatus::Done;
      if (out.skipped) result.message = "completion skipped: instance is fully observed";
    } catch (const std::exception& e) {
      result.status = JobStatus::Failed;
      result.message = e.what();
    }
    std::lock_guard lock(mu_);
    jobs_[id] = std::move(result);
    busy_ = false;
  }

  std::optional<SplatScene> scene_;
  std::vector<InstanceRecord> instances_;
  CompletionSettings settings_;
  Vec3 center_ = Vec3::Zero();
  double extent_ = 0.0;

  mutable std::mutex mu_;
  std::map<int, Job> jobs_;
  int next_job_ = 1;
  bool busy_ = false;
  std::thread worker_;
};

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

inline std::optional<double> parse_number(const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Reads orbit parameters from a lookup; returns an error message on invalid input.
inline std::optional<std::string> read_orbit(const std::function<std::optional<std::string>(const char*)>& get,
                                             OrbitParams& p) {
  auto num = [&](const char* key, double& out) -> std::optional<std::string> {
    const auto s = get(key);
    if (!s) return std::nullopt;
    const auto v = parse_number(*s);
    if (!v) return std::string("parameter ") + key + " is not a number";
    out = *v;
    return std::nullopt;
  };
  double w = p.width, h = p.height;
  const std::initializer_list<std::pair<const char*, double*>> fields{
      {"yaw", &p.yaw}, {"pitch", &p.pitch}, {"radius", &p.radius}, {"w", &w}, {"h", &h}};
  for (auto [key, out] : fields)
    if (auto err = num(key, *out)) return err;
  if (w != std::floor(w) || h != std::floor(h) || w < 1 || h < 1 || w > 2048 || h > 2048)
    return std::string("w and h must be integers in [1, 2048]");
  if (!(p.radius > 0)) return std::string("radius must be positive");
  if (!(std::abs(p.pitch) < 90.0)) return std::string("pitch must lie in (-90, 90)");
  p.width = static_cast<int>(w);
  p.height = static_cast<int>(h);
  return std::nullopt;
}

/// Integer path segment; nullopt when it does not fit an int.
inline std::optional<int> parse_id(const std::string& s) {
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string job_url(int id) { return "/jobs/" + std::to_string(id); }

inline nlohmann::json job_json(const Job& j) {
  nlohmann::json out{{"id", j.id}, {"instance", j.instance}, {"status", to_string(j.status)}};
  if (!j.message.empty()) out["message"] = j.message;
  if (j.status == JobStatus::Done) {
    out["conditions"] = j.conditions;
    out["targets"] = j.targets;
    out["views"] = nlohmann::json::array();
    for (std::size_t n = 0; n < j.views.size(); ++n) out["views"].push_back(job_url(j.id) + "/views/" + std::to_string(n));
    out["splat"] = job_url(j.id) + "/splat";
  }
  return out;
}

inline std::string container_bytes(const std::vector<Gaussian2D>& gs, int degree) {
  const auto b = io::encode_container(gs, degree);
  return {b.begin(), b.end()};
}

}  // namespace detail

/// Registers every endpoint on `server`. `static_dir`, when non-empty, is served at "/".
inline void register_routes(httplib::Server& server, Session& s, const fs::path& static_dir = {}) {
  using httplib::Request;
  using httplib::Response;

  server.Get("/render", [&s](const Request& req, Response& res) {
    if (!s.has_scene()) return detail::send_error(res, 409, "no scene loaded");
    OrbitParams p = s.defaults();
    const auto err = detail::read_orbit(
        [&](const char* k) -> std::optional<std::string> {
          if (!req.has_param(k)) return std::nullopt;
          return req.get_param_value(k);
        },
        p);
    if (err) return detail::send_error(res, 400, *err);
    const auto img = render(s.scene(), s.camera(p), kDefaultCutoff, false).image();
    const auto bytes = png::encode_rgb(img);
    res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
  });

  server.Post("/select", [&s](const Request& req, Response& res) {
    if (!s.has_scene()) return detail::send_error(res, 409, "no scene loaded");
    if (!s.trained()) return detail::send_error(res, 409, "features are not trained; run fit first");
    const auto body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) return detail::send_error(res, 400, "body must be a JSON object");
    OrbitParams p = s.defaults();
    const auto err = detail::read_orbit(
        [&](const char* k) -> std::optional<std::string> {
          if (!body.contains(k)) return std::nullopt;
          return body[k].is_number() ? body[k].dump() : std::string("?");
        },
        p);
    if (err) return detail::send_error(res, 400, *err);
    if (!body.contains("x") || !body.contains("y") || !body["x"].is_number_integer() || !body["y"].is_number_integer())
      return detail::send_error(res, 400, "x and y must be integers");
    const int x = body["x"].get<int>(), y = body["y"].get<int>();
    if (x < 0 || y < 0 || x >= p.width || y >= p.height) return detail::send_error(res, 400, "pixel outside the image");
    const auto cam = s.camera(p);
    const auto click = query_click(s.scene(), s.instances(), cam, x, y, s.tau_seg());
    Image mask(p.width, p.height, 1);
    if (!click.mask.empty())
      for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = click.mask.labels[i] ? 1.f : 0.f;
    const auto png = png::encode_rgb(mask);
    detail::send_json(res, 200,
                      {{"instance_id", click.background ? 0 : click.instance},
                       {"mask_png_base64", httplib::detail::base64_encode(std::string(png.begin(), png.end()))},
                       {"gaussian_count", click.gaussians.size()}});
  });

  server.Get("/instances", [&s](const Request&, Response& res) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& i : s.instances())
      list.push_back({{"id", i.id}, {"gaussian_count", i.gaussians.size()}, {"frames", i.masks.size()}});
    detail::send_json(res, 200, {{"instances", list}, {"trained", s.trained()}});
  });

  server.Get(R"(/splat/(-?\d+))", [&s](const Request& req, Response& res) {
    if (!s.has_scene()) return detail::send_error(res, 409, "no scene loaded");
    const auto id = detail::parse_id(req.matches[1]);
    const auto* inst = id ? s.find(*id) : nullptr;
    if (!inst) return detail::send_error(res, 404, "unknown instance");
    try {
      const auto idx = s.trained() ? segment_instance(s.scene(), *inst, s.tau_seg()) : inst->gaussians;
      res.set_content(detail::container_bytes(subset(s.scene().gaussians, idx), s.scene().sh_degree),
                      "application/octet-stream");
    } catch (const LookupError& e) {
      detail::send_error(res, 404, e.what());
    }
  });

  server.Post(R"(/instances/(-?\d+)/complete)", [&s](const Request& req, Response& res) {
    if (!s.has_scene()) return detail::send_error(res, 409, "no scene loaded");
    const auto parsed = detail::parse_id(req.matches[1]);
    if (!parsed || !s.find(*parsed)) return detail::send_error(res, 404, "unknown instance " + req.matches[1].str());
    const int id = *parsed;
    if (!s.trained()) return detail::send_error(res, 409, "features are not trained; run fit first");
    const auto job = s.start_completion(id);
    if (!job) return detail::send_error(res, 409, "another job is running");
    detail::send_json(res, 202, {{"job_id", *job}, {"status_url", detail::job_url(*job)}});
  });

  server.Get(R"(/jobs/(\d+))", [&s](const Request& req, Response& res) {
    const auto id = detail::parse_id(req.matches[1]);
    const auto j = id ? s.job(*id) : std::nullopt;
    if (!j) return detail::send_error(res, 404, "unknown job");
    detail::send_json(res, 200, detail::job_json(*j));
  });

  server.Get(R"(/jobs/(\d+)/views/(\d+))", [&s](const Request& req, Response& res) {
    const auto id = detail::parse_id(req.matches[1]);
    const auto j = id ? s.job(*id) : std::nullopt;
    if (!j) return detail::send_error(res, 404, "unknown job");
    const auto n = detail::parse_id(req.matches[2]);
    if (j->status != JobStatus::Done || !n || static_cast<std::size_t>(*n) >= j->views.size()) return detail::send_error(res, 404, "no such view");
    const auto& v = j->views[static_cast<std::size_t>(*n)];
    res.set_content(std::string(v.begin(), v.end()), "image/png");
  });

  server.Get(R"(/jobs/(\d+)/splat)", [&s](const Request& req, Response& res) {
    const auto id = detail::parse_id(req.matches[1]);
    const auto j = id ? s.job(*id) : std::nullopt;
    if (!j) return detail::send_error(res, 404, "unknown job");
    if (j->status != JobStatus::Done) return detail::send_error(res, 404, "job has no result yet");
    res.set_content(std::string(j->splat.begin(), j->splat.end()), "application/octet-stream");
  });

  if (!static_dir.empty() && !server.set_mount_point("/", static_dir.string()))
    log_warning("static directory not found: " + static_dir.string());
}

}  // namespace splitscene::service
