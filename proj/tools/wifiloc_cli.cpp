#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "wifiloc/eval.hpp"

namespace fs = std::filesystem;
using namespace wifiloc;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return in;
}

template <class F>
void write_out(const fs::path& path, F&& writer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  writer(out);
  if (!out) throw Error("write failed for " + path.string());
}

/// Config file (when given) plus content hashes of the inputs, so the manifest
/// hash changes whenever anything the run depends on changes.
struct RunContext {
  std::string command;
  KeyValueConfig config;
  eval::Manifest manifest;
  fs::path out;

  void input(const std::string& name, const fs::path& path) {
    config.set("input." + name, hex64(fnv1a(read_text(path))));
  }
  void param(const std::string& name, const std::string& value) { config.set("param." + name, value); }
  void output(const std::string& name) { manifest.outputs.push_back(name); }
  void finish(std::uint64_t seed) {
    manifest.command = command;
    manifest.config_text = config.canonical();
    manifest.seed = seed;
    eval::write_manifest(manifest, out);
  }
};

eval::ExperimentConfig load_experiment(const std::string& path) {
  if (path.empty()) return eval::ExperimentConfig::from_config(KeyValueConfig{});
  return eval::ExperimentConfig::from_config(KeyValueConfig::load(path));
}

KeyValueConfig config_only(const std::string& path) {
  return path.empty() ? KeyValueConfig{} : KeyValueConfig::load(path);
}

void write_fused(std::span<const fusion::FilterEstimate> est, std::ostream& out) {
  out << "t,est_x,est_y,spread,n_eff\n";
  for (const auto& e : est)
    out << format_double(e.t) << ',' << format_double(e.location.x) << ',' << format_double(e.location.y) << ','
        << format_double(e.spread) << ',' << format_double(e.n_eff) << '\n';
}

void write_report(const std::string& label, const eval::ErrorReport& r, std::ostream& out) {
  out << "method,n,mean,median,max,p95\n"
      << label << ',' << r.errors.size() << ',' << format_double(r.mean) << ',' << format_double(r.median) << ','
      << format_double(r.max) << ',' << format_double(r.p95) << '\n';
}

// ---------------------------------------------------------------------------

void cmd_simulate(RunContext& ctx, const std::string& config_path, int trial) {
  const auto cfg = load_experiment(config_path);
  ctx.config = cfg.source;
  ctx.param("trial", std::to_string(trial));
  const sim::World world = sim::generate_world(cfg.scenario.world);
  sim::save_world(world, ctx.out / "world.json");
  ctx.output("world.json");
  const auto crowd = sim::crowdsource_radio_map(world, cfg.scenario.map, cfg.scenario.map_seed);
  save_radio_map(crowd.map, ctx.out / "radio_map.jsonl");
  ctx.output("radio_map.jsonl");
  const auto t = eval::make_trial(world, cfg.scenario, eval::trial_seed(cfg.seed, trial));
  write_out(ctx.out / "truth.csv", [&](std::ostream& o) { sim::write_trajectory_csv(t.trajectory, o); });
  ctx.output("truth.csv");
  write_out(ctx.out / "stream.csv", [&](std::ostream& o) { sim::write_stream_csv(t.events, o); });
  ctx.output("stream.csv");
  ctx.finish(cfg.seed);
}

void cmd_train(RunContext& ctx, const std::string& config_path, const fs::path& radio_map) {
  const auto cfg = load_experiment(config_path);
  ctx.config = cfg.source;
  ctx.input("radio_map", radio_map);
  const RadioMap map = load_radio_map(radio_map);
  auto lt = eval::train_localizer(cfg, map);
  nn::save_checkpoint({lt.result.model, map.mac_table(), lt.transform}, ctx.out / "localizer.json");
  ctx.output("localizer.json");
  write_out(ctx.out / "train_history.csv", [&](std::ostream& o) { nn::write_history_csv(lt.result.history, o); });
  ctx.output("train_history.csv");
  if (lt.result.diverged) ctx.manifest.failures.push_back("training diverged; kept the last good parameters");
  std::cout << "best_epoch=" << lt.result.best_epoch << " val_mean_err=" << format_double(lt.result.best_val_mean_err)
            << " mean_val_sigma=" << format_double(lt.mean_val_sigma) << '\n';
  ctx.finish(cfg.train.seed);
}

/// WiFi fixes from a checkpoint, or from WKNN when no checkpoint is given.
struct Source {
  std::optional<nn::WifiLocalizer> localizer;
  std::optional<WknnLocalizer> wknn;
  eval::MeasurementSource fn;
};

void make_source(Source& s, const RadioMap& map, const std::string& checkpoint, const WknnOptions& wknn,
                 const std::string& method = "") {
  if (method == "localizer" && checkpoint.empty()) throw ValidationError("--method localizer needs --checkpoint");
  if (!checkpoint.empty() && method != "wknn") {
    s.localizer.emplace(nn::make_localizer(nn::load_checkpoint(checkpoint), map));
    s.fn = eval::localizer_source(*s.localizer);
  } else {
    s.wknn.emplace(map, wknn);
    s.fn = eval::wknn_source(*s.wknn);
  }
}

void cmd_localize(RunContext& ctx, const std::string& config_path, const fs::path& radio_map,
                  const fs::path& stream, const std::string& checkpoint, const std::string& method) {
  const auto cfg = load_experiment(config_path);
  ctx.config = cfg.source;
  ctx.input("radio_map", radio_map);
  ctx.input("stream", stream);
  if (!checkpoint.empty()) ctx.input("checkpoint", checkpoint);
  if (!method.empty()) ctx.param("method", method);
  const RadioMap map = load_radio_map(radio_map);
  auto in = open_in(stream);
  const auto events = sim::read_stream_csv(in);
  Source src;
  make_source(src, map, checkpoint, cfg.wknn, method);
  write_out(ctx.out / "localizations.csv", [&](std::ostream& o) {
    o << "t,x,y,sigma\n";
    for (const auto& e : events) {
      if (e.kind != sim::EventKind::Wifi) continue;
      if (auto z = src.fn(e.fingerprint))
        o << format_double(e.t) << ',' << format_double(z->mu.x) << ',' << format_double(z->mu.y) << ','
          << format_double(z->sigma) << '\n';
    }
  });
  ctx.output("localizations.csv");
  ctx.finish(0);
}

struct PriorFlags {
  std::optional<double> bandwidth, beta, cell_size;
};

void cmd_prior(RunContext& ctx, const std::string& config_path, const fs::path& radio_map, const PriorFlags& flags) {
  auto cfg = load_experiment(config_path);
  ctx.config = cfg.source;
  ctx.input("radio_map", radio_map);
  if (flags.bandwidth) {
    cfg.prior.bandwidth = *flags.bandwidth;
    ctx.param("bandwidth", format_double(*flags.bandwidth));
  }
  if (flags.beta) {
    cfg.prior.beta = *flags.beta;
    ctx.param("beta", format_double(*flags.beta));
  }
  if (flags.cell_size) {
    cfg.prior.cell_size = *flags.cell_size;
    ctx.param("cell_size", format_double(*flags.cell_size));
  }
  const PriorMap prior = build_prior(load_radio_map(radio_map), cfg.prior);
  write_out(ctx.out / "prior.csv", [&](std::ostream& o) { prior.write_csv(o); });
  ctx.output("prior.csv");
  ctx.finish(0);
}

void cmd_fuse(RunContext& ctx, const std::string& config_path, const fs::path& radio_map, const fs::path& stream,
              const std::string& checkpoint, const std::string& method) {
  auto cfg = load_experiment(config_path);
  ctx.config = cfg.source;
  ctx.input("radio_map", radio_map);
  ctx.input("stream", stream);
  if (!checkpoint.empty()) ctx.input("checkpoint", checkpoint);
  if (!method.empty()) {
    cfg.filter.method = fusion::parse_method(method);
    ctx.param("method", method);
  }
  const RadioMap map = load_radio_map(radio_map);
  auto in = open_in(stream);
  const auto events = sim::read_stream_csv(in);
  Source src;
  make_source(src, map, checkpoint, cfg.wknn);
  const PriorMap prior = build_prior(map, cfg.prior);
  if (!cfg.filter.length_scale) cfg.filter.length_scale = CoordinateTransform::from_bounds(map.bounds()).mean_extent();
  const auto est = fusion::run_filter(eval::filter_events(events, src.fn), cfg.filter, &prior);
  write_out(ctx.out / "trajectory.csv", [&](std::ostream& o) { write_fused(est, o); });
  ctx.output("trajectory.csv");
  ctx.finish(cfg.filter.seed);
}

void cmd_eval(RunContext& ctx, const fs::path& estimates, const fs::path& truth, double warmup, double tolerance,
              const std::string& label) {
  ctx.input("estimates", estimates);
  ctx.input("truth", truth);
  ctx.param("warmup", format_double(warmup));
  ctx.param("tolerance", format_double(tolerance));
  auto ein = open_in(estimates);
  auto tin = open_in(truth);
  const auto est = eval::read_locations_csv(ein);
  const auto tru = eval::read_locations_csv(tin);
  const auto report = eval::compute_metrics(est, tru, warmup, tolerance);
  write_out(ctx.out / "report.csv", [&](std::ostream& o) { write_report(label, report, o); });
  ctx.output("report.csv");
  write_out(ctx.out / "cdf.csv", [&](std::ostream& o) { eval::write_cdf_csv(report, o); });
  ctx.output("cdf.csv");
  write_report(label, report, std::cout);
  ctx.finish(0);
}

void cmd_embeddings(RunContext& ctx, const fs::path& checkpoint, const fs::path& radio_map) {
  ctx.input("checkpoint", checkpoint);
  ctx.input("radio_map", radio_map);
  const auto loc = nn::make_localizer(nn::load_checkpoint(checkpoint), load_radio_map(radio_map));
  write_out(ctx.out / "embeddings.csv", [&](std::ostream& o) { nn::export_embeddings(loc.model(), loc.inputs(), o); });
  ctx.output("embeddings.csv");
  ctx.finish(0);
}

void cmd_experiment(const std::string& config_path, const fs::path& out, const std::string& checkpoint) {
  auto cfg = load_experiment(config_path);
  std::optional<fs::path> ckpt;
  if (!checkpoint.empty()) {
    ckpt = checkpoint;
    cfg.source.set("input.checkpoint", hex64(fnv1a(read_text(checkpoint))));
  }
  const auto result = eval::run_experiment(cfg, out, ckpt);
  for (const auto& m : result.methods) {
    std::cout << m.method << " mean=" << format_double(m.report.mean) << " median=" << format_double(m.report.median)
              << " p95=" << format_double(m.report.p95) << '\n';
  }
}

void fail(const std::string& command, const char* type, const std::string& message) {
  nlohmann::ordered_json j{{"status", "error"}, {"command", command}, {"type", type}, {"message", message}};
  std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crowdsourced WiFi localization with odometry fusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(eval::kVersion));

  std::string config, radio_map, stream, checkpoint, method, estimates, truth, out, label = "estimate";
  std::string loc_method;
  PriorFlags prior_flags;
  int trial = 0;
  double warmup = 60.0, tolerance = 0.2;

  auto* sim_cmd = app.add_subcommand("simulate", "World, crowdsourced radio map and one trial stream");
  sim_cmd->add_option("--config,--spec", config, "Config file")->check(CLI::ExistingFile);
  sim_cmd->add_option("--trial", trial, "Trial index")->check(CLI::NonNegativeNumber);

  auto* train_cmd = app.add_subcommand("train", "Train the fingerprint localizer");
  train_cmd->add_option("--config", config, "Config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--radio-map", radio_map)->required()->check(CLI::ExistingFile);

  auto* loc_cmd = app.add_subcommand("localize", "Localize every fingerprint of a stream");
  loc_cmd->add_option("--config", config, "Config file")->check(CLI::ExistingFile);
  loc_cmd->add_option("--radio-map", radio_map)->required()->check(CLI::ExistingFile);
  loc_cmd->add_option("--stream", stream)->required()->check(CLI::ExistingFile);
  loc_cmd->add_option("--checkpoint", checkpoint, "Localizer checkpoint; WKNN when omitted")
      ->check(CLI::ExistingFile);
  loc_cmd->add_option("--method", loc_method, "localizer or wknn")->check(CLI::IsMember({"localizer", "wknn"}));

  auto* prior_cmd = app.add_subcommand("prior-map", "Build the KDE prior map");
  prior_cmd->add_option("--config", config, "Config file")->check(CLI::ExistingFile);
  prior_cmd->add_option("--radio-map", radio_map)->required()->check(CLI::ExistingFile);
  prior_cmd->add_option("--bandwidth", prior_flags.bandwidth, "Kernel bandwidth, meters")->check(CLI::PositiveNumber);
  prior_cmd->add_option("--beta", prior_flags.beta, "Additive floor")->check(CLI::PositiveNumber);
  prior_cmd->add_option("--cell-size", prior_flags.cell_size, "Grid cell, meters")->check(CLI::PositiveNumber);

  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse odometry and WiFi fixes");
  fuse_cmd->add_option("--config", config, "Config file")->check(CLI::ExistingFile);
  fuse_cmd->add_option("--radio-map", radio_map)->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--stream", stream)->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--checkpoint", checkpoint, "Localizer checkpoint; WKNN when omitted")
      ->check(CLI::ExistingFile);
  fuse_cmd->add_option("--method", method, "ekpf, ekf or pf")->check(CLI::IsMember({"ekpf", "ekf", "pf"}));

  auto* eval_cmd = app.add_subcommand("eval", "Error metrics of estimates against ground truth");
  eval_cmd->add_option("--estimates", estimates)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--truth", truth)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--warmup", warmup, "Seconds excluded after the first truth sample")
      ->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--tolerance", tolerance, "Max time offset when pairing, seconds")
      ->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--label", label);

  auto* emb_cmd = app.add_subcommand("export-embeddings", "Per-MAC CNN embeddings of a checkpoint");
  emb_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  emb_cmd->add_option("--radio-map", radio_map)->required()->check(CLI::ExistingFile);

  auto* exp_cmd = app.add_subcommand("experiment", "Full benchmark: train once, run every method per trial");
  exp_cmd->add_option("--config", config, "Config file")->check(CLI::ExistingFile);
  exp_cmd->add_option("--checkpoint", checkpoint, "Skip training and load this localizer")->check(CLI::ExistingFile);

  for (auto* sub : app.get_subcommands({})) sub->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    fs::create_directories(out);
    RunContext ctx{name, {}, {}, out};
    if (sub == sim_cmd) {
      cmd_simulate(ctx, config, trial);
    } else if (sub == train_cmd) {
      cmd_train(ctx, config, radio_map);
    } else if (sub == loc_cmd) {
      cmd_localize(ctx, config, radio_map, stream, checkpoint, loc_method);
    } else if (sub == prior_cmd) {
      cmd_prior(ctx, config, radio_map, prior_flags);
    } else if (sub == fuse_cmd) {
      cmd_fuse(ctx, config, radio_map, stream, checkpoint, method);
    } else if (sub == eval_cmd) {
      cmd_eval(ctx, estimates, truth, warmup, tolerance, label);
    } else if (sub == emb_cmd) {
      cmd_embeddings(ctx, checkpoint, radio_map);
    } else {
      cmd_experiment(config, out, checkpoint);
    }
  } catch (const ValidationError& e) {
    fail(name, "validation", e.what());
    return 1;
  } catch (const ParseError& e) {
    fail(name, "parse", e.what());
    return 1;
  } catch (const NumericError& e) {
    fail(name, "numeric", e.what());
    return 1;
  } catch (const std::exception& e) {
    fail(name, "error", e.what());
    return 1;
  }
  return 0;
}
