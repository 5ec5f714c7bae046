#pragma once

#include <array>
#include <cmath>
#include <csignal>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "splitscene/core.hpp"
#include "splitscene/latent.hpp"

namespace splitscene {

struct DenoiseRequest {
  const LatentGrid* x_t = nullptr;
  const LatentGrid* condition = nullptr;
  Eigen::Matrix4d relative_pose = Eigen::Matrix4d::Identity();  // condition camera -> target camera
  int t = 0;
  double alpha_bar = 0.0;
  int target = 0;     // viewpoint index of x_t
  int condition_index = 0;
};

/// Noise predictor. Implementations that cannot take concurrent calls return false from concurrent().
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::vector<double> predict(const DenoiseRequest& req) = 0;
  virtual bool concurrent() const { return true; }
};

namespace detail {
inline std::vector<double> closed_form_noise(const LatentGrid& x, const LatentGrid& target, double alpha_bar) {
  if (!x.same_shape(target)) throw BackendError("mock denoiser: target latent has a different shape");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  std::vector<double> eps(x.data.size());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x.data[i] - a * target.data[i]) / b;
  return eps;
}
}  // namespace detail

/// Predicts exactly the noise that separates x_t from a fixed latent per target view.
class MockDenoiser : public Denoiser {
 public:
  explicit MockDenoiser(std::map<int, LatentGrid> targets) : targets_(std::move(targets)) {}
  std::vector<double> predict(const DenoiseRequest& req) override {
    const auto it = targets_.find(req.target);
    if (it == targets_.end()) throw BackendError("mock denoiser has no latent for view " + std::to_string(req.target));
    return detail::closed_form_noise(*req.x_t, it->second, req.alpha_bar);
  }

 private:
  std::map<int, LatentGrid> targets_;
};

/// Mock whose target is the condition latent itself.
class ConditionMockDenoiser : public Denoiser {
 public:
  std::vector<double> predict(const DenoiseRequest& req) override {
    return detail::closed_form_noise(*req.x_t, *req.condition, req.alpha_bar);
  }
};

/// Tensor framing over byte streams: 16-byte header (u32 rank, u32 dims[3], little endian)
/// followed by the float32 payload in row-major order.
namespace protocol {

struct Tensor {
  std::uint32_t rank = 0;
  std::array<std::uint32_t, 3> dims{0, 0, 0};
  std::vector<float> data;

  std::size_t elements() const {
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) n *= dims[i];
    return rank == 0 ? 0 : n;
  }
};

inline void put_u32(unsigned char* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline bool write_tensor(std::FILE* f, const Tensor& t) {
  unsigned char h[16];
  put_u32(h, t.rank);
  for (int i = 0; i < 3; ++i) put_u32(h + 4 + 4 * i, t.dims[static_cast<std::size_t>(i)]);
  if (std::fwrite(h, 1, 16, f) != 16) return false;
  std::vector<unsigned char> body(t.data.size() * 4);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &t.data[i], 4);
    put_u32(body.data() + 4 * i, bits);
  }
  if (!body.empty() && std::fwrite(body.data(), 1, body.size(), f) != body.size()) return false;
  return std::fflush(f) == 0;
}

/// Reads one tensor; false on clean end of stream, throws on malformed input.
inline bool read_tensor(std::FILE* f, Tensor& t) {
  unsigned char h[16];
  const std::size_t got = std::fread(h, 1, 16, f);
  if (got == 0) return false;
  if (got != 16) throw BackendError("truncated tensor header");
  t.rank = get_u32(h);
  if (t.rank > 3) throw BackendError("tensor rank " + std::to_string(t.rank) + " exceeds 3");
  for (int i = 0; i < 3; ++i) t.dims[static_cast<std::size_t>(i)] = get_u32(h + 4 + 4 * i);
  const std::size_t n = t.elements();
  if (n > (std::size_t{1} << 28)) throw BackendError("tensor too large");
  std::vector<unsigned char> body(n * 4);
  if (n && std::fread(body.data(), 1, body.size(), f) != body.size()) throw BackendError("truncated tensor payload");
  t.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = get_u32(body.data() + 4 * i);
    std::memcpy(&t.data[i], &bits, 4);
  }
  return true;
}

inline Tensor from_latent(const LatentGrid& g) {
  Tensor t{3, {static_cast<std::uint32_t>(g.height), static_cast<std::uint32_t>(g.width), static_cast<std::uint32_t>(g.channels)}, {}};
  t.data.assign(g.data.begin(), g.data.end());
  return t;
}

inline LatentGrid to_latent(const Tensor& t) {
  if (t.rank != 3) throw BackendError("expected a rank-3 latent tensor");
  LatentGrid g(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]), static_cast<int>(t.dims[2]));
  g.data.assign(t.data.begin(), t.data.end());
  return g;
}

inline Tensor from_pose(const Eigen::Matrix4d& m) {
  Tensor t{2, {4, 4, 0}, std::vector<float>(16)};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) t.data[static_cast<std::size_t>(r * 4 + c)] = static_cast<float>(m(r, c));
  return t;
}

inline Eigen::Matrix4d to_pose(const Tensor& t) {
  if (t.rank != 2 || t.dims[0] != 4 || t.dims[1] != 4) throw BackendError("expected a 4x4 pose tensor");
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = t.data[static_cast<std::size_t>(r * 4 + c)];
  return m;
}

inline Tensor handshake() { return Tensor{}; }

/// Request frames: x_t, condition, pose, then [t, alpha_bar, target].
inline bool write_request(std::FILE* f, const DenoiseRequest& req) {
  return write_tensor(f, from_latent(*req.x_t)) && write_tensor(f, from_latent(*req.condition)) &&
         write_tensor(f, from_pose(req.relative_pose)) &&
         write_tensor(f, Tensor{1, {3, 0, 0}, {static_cast<float>(req.t), static_cast<float>(req.alpha_bar), static_cast<float>(req.target)}});
}

/// Serves requests from `in` to `out` until end of stream. Returns the number served.
inline std::size_t serve(std::FILE* in, std::FILE* out, Denoiser& d) {
  Tensor t;
  if (!read_tensor(in, t)) return 0;
  if (t.rank != 0) throw BackendError("expected handshake");
  if (!write_tensor(out, handshake())) throw BackendError("cannot answer handshake");
  std::size_t served = 0;
  while (true) {
    Tensor x, c, pose, meta;
    if (!read_tensor(in, x)) return served;
    if (!read_tensor(in, c) || !read_tensor(in, pose) || !read_tensor(in, meta)) throw BackendError("incomplete request");
    if (meta.rank != 1 || meta.dims[0] != 3) throw BackendError("malformed request metadata");
    const LatentGrid xl = to_latent(x), cl = to_latent(c);
    DenoiseRequest req{&xl, &cl, to_pose(pose), static_cast<int>(meta.data[0]), meta.data[1], static_cast<int>(meta.data[2]), 0};
    const auto eps = d.predict(req);
    LatentGrid e = xl;
    e.data = eps;
    if (!write_tensor(out, from_latent(e))) throw BackendError("cannot write response");
    ++served;
  }
}

}  // namespace protocol

/// Denoiser running as a child process speaking the tensor protocol over stdin/stdout.
class SubprocessDenoiser : public Denoiser {
 public:
  explicit SubprocessDenoiser(const std::vector<std::string>& argv) {
    if (argv.empty()) throw BackendError("denoiser command is empty");
    std::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) throw BackendError("cannot create denoiser pipes");
    pid_ = fork();
    if (pid_ < 0) throw BackendError("cannot fork denoiser");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      std::vector<char*> args;
      for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
      args.push_back(nullptr);
      execvp(args[0], args.data());
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_ = fdopen(to_child[1], "wb");
    out_ = fdopen(from_child[0], "rb");
    protocol::Tensor ack;
    if (!protocol::write_tensor(in_, protocol::handshake()) || !protocol::read_tensor(out_, ack) || ack.rank != 0) {
      shutdown();
      throw BackendError("denoiser '" + argv[0] + "' failed the handshake");
    }
  }

  ~SubprocessDenoiser() override { shutdown(); }
  SubprocessDenoiser(const SubprocessDenoiser&) = delete;
  SubprocessDenoiser& operator=(const SubprocessDenoiser&) = delete;

  bool concurrent() const override { return false; }

  std::vector<double> predict(const DenoiseRequest& req) override {
    std::lock_guard lock(mu_);
    if (!in_) throw BackendError("denoiser process is not running");
    protocol::Tensor resp;
    bool ok = protocol::write_request(in_, req);
    try {
      ok = ok && protocol::read_tensor(out_, resp);
    } catch (const BackendError&) {
      ok = false;
    }
    if (!ok) throw BackendError("denoiser process stopped responding");
    if (resp.rank != 3 || resp.elements() != req.x_t->data.size())
      throw BackendError("denoiser returned a tensor of the wrong shape");
    std::vector<double> eps(resp.data.begin(), resp.data.end());
    for (double v : eps)
      if (!std::isfinite(v)) throw BackendError("denoiser returned non-finite noise");
    return eps;
  }

 private:
  void shutdown() {
    if (in_) std::fclose(in_);
    if (out_) std::fclose(out_);
    in_ = out_ = nullptr;
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  pid_t pid_ = -1;
  std::FILE* in_ = nullptr;
  std::FILE* out_ = nullptr;
  std::mutex mu_;
};

}  // namespace splitscene
