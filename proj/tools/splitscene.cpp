#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "splitscene/pipeline.hpp"
#include "splitscene/service.hpp"

namespace ss = splitscene;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  int instance = -1;
  int port = ss::service::kDefaultPort;
  std::string host = "127.0.0.1";
  std::string static_dir;
  std::string out;
  std::string layout = "cards";
  int synth_instances = 3;
  int synth_views = 12;
  double synth_noise = 0.2;
  std::uint64_t synth_seed = 1;
};

ss::PipelineConfig load(const Options& o) {
  auto overrides = o.overrides;
  if (o.seed >= 0) overrides.push_back("seed=" + std::to_string(o.seed));
  return ss::load_config(o.config, overrides);
}

int run_synth(const Options& o) {
  if (o.out.empty()) throw ss::InputError("--out is required");
  ss::synth::SynthResult s;
  if (o.layout == "cards") {
    ss::synth::LayoutSpec spec;
    spec.instances = o.synth_instances;
    spec.views = o.synth_views;
    spec.noise = o.synth_noise;
    spec.seed = o.synth_seed;
    s = ss::synth::synth_scene(spec);
  } else if (o.layout == "occluded") {
    s = ss::synth::occluded_fixture();
  } else {
    throw ss::InputError("unknown layout '" + o.layout + "' (cards or occluded)");
  }
  const auto cfg = ss::pipeline::write_synth_bundle(s, o.out, o.layout == "occluded");
  std::cout << "wrote " << s.scene.gaussians.size() << " gaussians, " << s.scene.frames.size() << " frames; config "
            << cfg.string() << '\n';
  return 0;
}

int run_serve(const Options& o) {
  const auto cfg = load(o);
  auto session = ss::service::Session::from_config(cfg);
  httplib::Server server;
  ss::service::register_routes(server, *session, o.static_dir);
  std::cout << "listening on http://" << o.host << ':' << o.port << std::endl;
  if (!server.listen(o.host, o.port)) throw ss::InputError("cannot listen on port " + std::to_string(o.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance decomposition and completion for 2D gaussian splatting scenes"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("-c,--config", o.config, "Pipeline config file");
  app.add_option("--seed", o.seed, "Override the config seed");
  app.add_option("--set", o.overrides, "Override a config key, e.g. training.iters=500");

  auto* cluster = app.add_subcommand("cluster", "Cluster per-frame masks into 3D instances");
  auto* fit = app.add_subcommand("fit", "Train the instance feature field");
  auto* extract = app.add_subcommand("extract", "Write one instance and the remainder as splat files");
  extract->add_option("-i,--instance", o.instance, "Instance id")->required();
  auto* complete = app.add_subcommand("complete", "Generate unseen views of an instance and refine it");
  complete->add_option("-i,--instance", o.instance, "Instance id")->required();
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--port", o.port, "Port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", o.host, "Bind address");
  serve->add_option("--static", o.static_dir, "Directory of static assets served at /");
  auto* synth = app.add_subcommand("synth", "Write a synthetic fixture bundle");
  synth->add_option("-o,--out", o.out, "Output directory")->required();
  synth->add_option("--layout", o.layout, "cards, or occluded (also writes ground-truth instances to out/)");
  synth->add_option("--instances", o.synth_instances, "Number of cards");
  synth->add_option("--views", o.synth_views, "Number of capture views");
  synth->add_option("--noise", o.synth_noise, "Share of frames with a corrupted mask");
  synth->add_option("--synth-seed", o.synth_seed, "Layout seed");

  CLI11_PARSE(app, argc, argv);

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (cluster->parsed()) return ss::pipeline::cmd_cluster(load(o));
    if (fit->parsed()) return ss::pipeline::cmd_fit(load(o));
    if (extract->parsed()) return ss::pipeline::cmd_extract(load(o), o.instance);
    if (complete->parsed()) return ss::pipeline::cmd_complete(load(o), o.instance);
    if (serve->parsed()) return run_serve(o);
    if (synth->parsed()) return run_synth(o);
  } catch (const ss::Error& e) {
    std::cerr << "splitscene " << stage << ": " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "splitscene " << stage << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
