#include <gtest/gtest.h>

#include <chrono>

#include "splitscene/png.hpp"
#include "splitscene/service.hpp"
#include "splitscene/synth.hpp"

using namespace splitscene;
using namespace std::chrono_literals;

namespace {

// Server on an ephemeral port, running on its own thread for the life of the fixture.
struct Running {
  explicit Running(service::Session& s) {
    service::register_routes(server, s);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~Running() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(60, 0);
    return c;
  }

  httplib::Server server;
  int port = 0;
  std::thread thread;
};

std::unique_ptr<service::Session> occluded_session(bool trained = true) {
  const auto s = synth::occluded_fixture();
  auto instances = pipeline::instances_from_labels(s.scene, s.labels);
  if (!trained)
    for (auto& i : instances) i.mean_feature.setZero();
  CompletionSettings cs;
  cs.run.views.width = cs.run.views.height = 64;
  return std::make_unique<service::Session>(s.scene, std::move(instances), cs);
}

std::vector<std::uint8_t> bytes(const std::string& s) { return {s.begin(), s.end()}; }

std::string base64_decode(const std::string& in) {
  static const std::string abc = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  unsigned acc = 0;
  int bits = 0;
  for (char ch : in) {
    if (ch == '=') break;
    acc = (acc << 6) | static_cast<unsigned>(abc.find(ch));
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xff));
    }
  }
  return out;
}

nlohmann::json body_json(const httplib::Result& r) { return nlohmann::json::parse(r->body); }

}  // namespace

TEST(Service, RenderReturnsPng) {
  auto s = occluded_session();
  Running srv(*s);
  auto c = srv.client();
  const auto before = s->state_hash();

  auto r = c.Get("/render");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
  auto d = png::detail::decode(bytes(r->body));
  EXPECT_EQ(d.width, 256);
  EXPECT_EQ(d.height, 256);
  EXPECT_EQ(d.channels, 3);

  r = c.Get("/render?yaw=30&pitch=10&w=40&h=24");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  d = png::detail::decode(bytes(r->body));
  EXPECT_EQ(d.width, 40);
  EXPECT_EQ(d.height, 24);
  const auto again = c.Get("/render?yaw=30&pitch=10&w=40&h=24");
  EXPECT_EQ(again->body, r->body);

  for (const char* bad : {"/render?w=0", "/render?h=3000", "/render?w=1.5", "/render?radius=-1", "/render?pitch=90",
                          "/render?yaw=abc"}) {
    r = c.Get(bad);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400) << bad;
    EXPECT_TRUE(body_json(r).contains("error"));
  }
  EXPECT_EQ(s->state_hash(), before);
}

TEST(Service, SelectByClick) {
  auto s = occluded_session();
  Running srv(*s);
  auto c = srv.client();
  const auto before = s->state_hash();

  // The default orbit looks through the opening at azimuth 0, so the image center lands on the ball.
  auto r = c.Post("/select", R"({"x": 32, "y": 32, "w": 64, "h": 64})", "application/json");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  auto j = body_json(r);
  EXPECT_EQ(j["instance_id"], 1);
  EXPECT_GT(j["gaussian_count"].get<int>(), 300);
  const auto mask_bytes = bytes(base64_decode(j["mask_png_base64"].get<std::string>()));
  const auto mask = png::detail::decode(mask_bytes);
  EXPECT_EQ(mask.width, 64);
  EXPECT_EQ(mask.channels, 1);
  EXPECT_EQ(mask.raw[static_cast<std::size_t>(32 * 64 + 32)], 255);

  // A pixel the render leaves empty.
  service::OrbitParams p = s->defaults();
  p.width = p.height = 64;
  const auto out = render(s->scene(), s->camera(p), kDefaultCutoff, false);
  int empty = -1;
  for (std::size_t i = 0; i < out.alpha.size() && empty < 0; ++i)
    if (out.alpha[i] == 0.f) empty = static_cast<int>(i);
  ASSERT_GE(empty, 0);
  const nlohmann::json click{{"x", empty % 64}, {"y", empty / 64}, {"w", 64}, {"h", 64}};
  r = c.Post("/select", click.dump(), "application/json");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  j = body_json(r);
  EXPECT_EQ(j["instance_id"], 0);
  EXPECT_EQ(j["gaussian_count"], 0);

  for (const char* bad : {R"({"x": 64, "y": 0, "w": 64, "h": 64})", R"({"x": -1, "y": 0})", R"({"x": 1.5, "y": 0})",
                          R"({"y": 3})", "[1, 2]", "not json"}) {
    r = c.Post("/select", bad, "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400) << bad;
  }
  EXPECT_EQ(s->state_hash(), before);
}

TEST(Service, UntrainedAndEmptySessions) {
  auto s = occluded_session(false);
  Running srv(*s);
  auto c = srv.client();
  auto r = c.Post("/select", R"({"x": 1, "y": 1})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 409);
  r = c.Post("/instances/1/complete", "", "application/json");
  EXPECT_EQ(r->status, 409);
  r = c.Get("/instances");
  ASSERT_EQ(r->status, 200);
  EXPECT_FALSE(body_json(r)["trained"].get<bool>());
  EXPECT_EQ(body_json(r)["instances"].size(), 2u);
  r = c.Get("/splat/1");
  EXPECT_EQ(r->status, 200);

  service::Session none(std::nullopt, {}, CompletionSettings{});
  Running empty(none);
  auto e = empty.client();
  EXPECT_EQ(e.Get("/render")->status, 409);
  EXPECT_EQ(e.Post("/select", "{}", "application/json")->status, 409);
  EXPECT_EQ(e.Get("/splat/1")->status, 409);
  EXPECT_EQ(e.Post("/instances/1/complete", "", "application/json")->status, 409);
  r = e.Get("/instances");
  ASSERT_EQ(r->status, 200);
  EXPECT_TRUE(body_json(r)["instances"].empty());
}

TEST(Service, CompletionJob) {
  auto s = occluded_session();
  Running srv(*s);
  auto c = srv.client();

  EXPECT_EQ(c.Post("/instances/99/complete", "", "application/json")->status, 404);
  EXPECT_EQ(c.Post("/instances/99999999999999/complete", "", "application/json")->status, 404);
  EXPECT_EQ(c.Get("/jobs/1")->status, 404);

  auto r = c.Post("/instances/1/complete", "", "application/json");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 202) << r->body;
  const auto started = body_json(r);
  const int id = started["job_id"];
  EXPECT_EQ(started["status_url"], "/jobs/" + std::to_string(id));

  r = c.Post("/instances/2/complete", "", "application/json");
  EXPECT_EQ(r->status, 409);

  nlohmann::json job;
  const auto deadline = std::chrono::steady_clock::now() + 120s;
  do {
    std::this_thread::sleep_for(50ms);
    r = c.Get(started["status_url"].get<std::string>());
    ASSERT_EQ(r->status, 200);
    job = body_json(r);
  } while ((job["status"] == "queued" || job["status"] == "running") && std::chrono::steady_clock::now() < deadline);
  ASSERT_EQ(job["status"], "done") << job.dump();
  EXPECT_EQ(job["conditions"].size(), 2u);
  EXPECT_EQ(job["targets"].size(), 14u);
  ASSERT_EQ(job["views"].size(), 14u);

  r = c.Get(job["views"][0].get<std::string>());
  ASSERT_EQ(r->status, 200);
  const auto view = png::detail::decode(bytes(r->body));
  EXPECT_EQ(view.width, 64);
  EXPECT_EQ(c.Get("/jobs/" + std::to_string(id) + "/views/14")->status, 404);

  r = c.Get(job["splat"].get<std::string>());
  ASSERT_EQ(r->status, 200);
  EXPECT_FALSE(r->body.empty());

  const auto idle = s->state_hash();
  EXPECT_EQ(c.Get("/instances")->status, 200);
  EXPECT_EQ(c.Get("/splat/1")->status, 200);
  EXPECT_EQ(c.Get("/splat/99")->status, 404);
  EXPECT_EQ(s->state_hash(), idle);

  // The session is free again once the job finishes.
  r = c.Post("/instances/1/complete", "", "application/json");
  EXPECT_EQ(r->status, 202);
  s->wait();
}
