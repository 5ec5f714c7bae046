#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "splitscene/png.hpp"
#include "splitscene/scene.hpp"

namespace splitscene::io {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace fs = std::filesystem;

constexpr char kMagic[4] = {'S', 'P', 'L', '2'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 1;

inline std::size_t record_floats(int sh_degree) {
  return 3 + 3 + 3 + 2 + 1 + static_cast<std::size_t>(sh_coefficient_count(sh_degree)) * 3 + kFeatureDim;
}

namespace detail {

class Writer {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put3(const Vec3f& v) {
    for (int i = 0; i < 3; ++i) put(v[i]);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw InputError("splat container truncated");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  Vec3f get3() {
    Vec3f v;
    for (int i = 0; i < 3; ++i) v[i] = get<float>();
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("short write to " + path.string());
}

}  // namespace detail

/// Serializes gaussians in the SPL2 container layout.
inline std::vector<std::uint8_t> encode_container(const std::vector<Gaussian2D>& gaussians, int sh_degree) {
  detail::Writer w;
  w.bytes.insert(w.bytes.end(), kMagic, kMagic + 4);
  w.put(kVersion);
  w.put(static_cast<std::uint64_t>(gaussians.size()));
  w.put(static_cast<std::uint8_t>(sh_degree));
  const std::size_t coeffs = static_cast<std::size_t>(sh_coefficient_count(sh_degree)) * 3;
  for (const auto& g : gaussians) {
    if (g.sh.size() != coeffs) throw InputError("gaussian color block does not match SH degree");
    w.put3(g.center);
    w.put3(g.tangent_u);
    w.put3(g.tangent_v);
    w.put(g.scale_u);
    w.put(g.scale_v);
    w.put(g.opacity);
    for (float c : g.sh) w.put(c);
    for (int k = 0; k < kFeatureDim; ++k) w.put(g.feature[k]);
  }
  return w.bytes;
}

/// Parses and validates a container; frames are left empty.
inline SplatScene decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw InputError("malformed header: missing SPL2 magic");
  detail::Reader r(bytes);
  for (int i = 0; i < 4; ++i) r.get<char>();
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw InputError("malformed header: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>();
  const int degree = r.get<std::uint8_t>();
  if (degree > 3) throw InputError("malformed header: SH degree " + std::to_string(degree) + " > 3");
  const std::size_t rec = record_floats(degree) * sizeof(float);
  if (count == 0 || r.remaining() != count * rec)
    throw InputError("payload size does not match " + std::to_string(count) +
                     " records with 16-dim features (SH degree " + std::to_string(degree) + ")");
  SplatScene s;
  s.sh_degree = degree;
  s.gaussians.resize(count);
  const std::size_t coeffs = static_cast<std::size_t>(sh_coefficient_count(degree)) * 3;
  for (auto& g : s.gaussians) {
    g.center = r.get3();
    g.tangent_u = r.get3();
    g.tangent_v = r.get3();
    g.scale_u = r.get<float>();
    g.scale_v = r.get<float>();
    g.opacity = r.get<float>();
    g.sh.resize(coeffs);
    for (auto& c : g.sh) c = r.get<float>();
    for (int k = 0; k < kFeatureDim; ++k) g.feature[k] = r.get<float>();
  }
  for (std::size_t i = 0; i < s.gaussians.size(); ++i) validate(s.gaussians[i], i, degree);
  s.scene_scale = compute_scene_scale(s);
  return s;
}

inline SplatScene load_scene(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("splat container not found: " + path.string());
  return decode_container(detail::read_bytes(path));
}

inline void save_scene(const SplatScene& scene, const fs::path& path) {
  detail::write_bytes(path, encode_container(scene.gaussians, scene.sh_degree));
}

inline void save_gaussians(const std::vector<Gaussian2D>& gs, int sh_degree, const fs::path& path) {
  detail::write_bytes(path, encode_container(gs, sh_degree));
}

// ---- cameras ----

inline nlohmann::json camera_to_json(int index, const Camera& c) {
  nlohmann::json j;
  j["index"] = index;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  j["width"] = c.width;
  j["height"] = c.height;
  std::vector<double> R(9);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) R[static_cast<std::size_t>(r * 3 + k)] = c.R(r, k);
  j["R"] = R;
  j["t"] = {c.t.x(), c.t.y(), c.t.z()};
  return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  try {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    const auto R = j.at("R").get<std::vector<double>>();
    const auto t = j.at("t").get<std::vector<double>>();
    if (R.size() != 9 || t.size() != 3) throw InputError("camera R needs 9 values and t needs 3");
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) c.R(r, k) = R[static_cast<std::size_t>(r * 3 + k)];
    c.t = Vec3(t[0], t[1], t[2]);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("camera entry: ") + e.what());
  }
  return c;
}

inline std::string cameras_to_json(const std::vector<Frame>& frames) {
  nlohmann::json doc;
  doc["frames"] = nlohmann::json::array();
  for (const auto& f : frames) doc["frames"].push_back(camera_to_json(f.index, f.camera));
  return doc.dump(2) + "\n";
}

/// Frames with cameras only (no images or masks).
inline std::vector<Frame> load_cameras(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("cameras file not found: " + path.string());
  std::ifstream in(path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("cameras file " + path.string() + ": " + e.what());
  }
  const nlohmann::json& entries = doc.is_array() ? doc : doc.at("frames");
  std::vector<Frame> frames;
  for (const auto& e : entries) {
    Frame f;
    f.index = e.at("index").get<int>();
    f.camera = camera_from_json(e);
    validate(f.camera, "frame " + std::to_string(f.index));
    frames.push_back(std::move(f));
  }
  return frames;
}

inline void save_cameras(const std::vector<Frame>& frames, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << cameras_to_json(frames);
}

inline fs::path mask_path(const fs::path& dir, int index) { return dir / (std::to_string(index) + ".png"); }
inline fs::path image_path(const fs::path& dir, int index) { return dir / (std::to_string(index) + ".png"); }

// ---- float grids ----

constexpr char kGridMagic[4] = {'F', 'G', 'R', 'D'};

/// Little-endian float grid: magic, height, width, channels (u32 each), then H*W*C f32.
inline void write_float_grid(const fs::path& path, int height, int width, int channels,
                             const std::vector<float>& data) {
  detail::Writer w;
  w.bytes.insert(w.bytes.end(), kGridMagic, kGridMagic + 4);
  w.put(static_cast<std::uint32_t>(height));
  w.put(static_cast<std::uint32_t>(width));
  w.put(static_cast<std::uint32_t>(channels));
  for (float v : data) w.put(v);
  detail::write_bytes(path, w.bytes);
}

inline Image read_float_grid(const fs::path& path) {
  const auto bytes = detail::read_bytes(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kGridMagic, 4) != 0)
    throw InputError("not a float grid: " + path.string());
  detail::Reader r(bytes);
  for (int i = 0; i < 4; ++i) r.get<char>();
  const int h = static_cast<int>(r.get<std::uint32_t>());
  const int w = static_cast<int>(r.get<std::uint32_t>());
  const int c = static_cast<int>(r.get<std::uint32_t>());
  Image img(w, h, c);
  if (r.remaining() != img.data.size() * sizeof(float)) throw InputError("float grid size mismatch");
  for (auto& v : img.data) v = r.get<float>();
  return img;
}

// ---- scene bundle ----

struct ScenePaths {
  fs::path scene;
  fs::path cameras;
  fs::path masks;
  fs::path images;  // optional
};

/// Loads the container, cameras, per-frame masks, and (when present) per-frame images.
inline SplatScene load_bundle(const ScenePaths& p) {
  SplatScene s = load_scene(p.scene);
  if (!p.cameras.empty()) {
    s.frames = load_cameras(p.cameras);
    if (!p.masks.empty()) {
      if (!fs::is_directory(p.masks)) throw InputError("masks directory not found: " + p.masks.string());
      for (auto& f : s.frames) {
        const auto mp = mask_path(p.masks, f.index);
        if (!fs::exists(mp)) throw InputError("mask missing for frame " + std::to_string(f.index) + ": " + mp.string());
        f.mask_map = png::read_labels(mp);
      }
    }
    if (!p.images.empty() && fs::is_directory(p.images))
      for (auto& f : s.frames) {
        const auto ip = image_path(p.images, f.index);
        if (fs::exists(ip)) f.image = png::read_rgb(ip);
      }
  }
  s.scene_scale = compute_scene_scale(s);
  validate(s);
  return s;
}

inline void save_bundle(const SplatScene& s, const ScenePaths& p) {
  save_scene(s, p.scene);
  if (!p.cameras.empty()) save_cameras(s.frames, p.cameras);
  if (!p.masks.empty()) {
    fs::create_directories(p.masks);
    for (const auto& f : s.frames)
      if (!f.mask_map.empty()) png::write_labels(mask_path(p.masks, f.index), f.mask_map);
  }
  if (!p.images.empty()) {
    fs::create_directories(p.images);
    for (const auto& f : s.frames)
      if (!f.image.empty()) png::write_rgb(image_path(p.images, f.index), f.image);
  }
}

}  // namespace splitscene::io
