// dcqfa: demos, device profiles, supernet training, distillation, search, evaluation, export.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dcqfa/io.hpp"

namespace fs = std::filesystem;
using namespace dcqfa;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> profiles;
  std::vector<std::string> sets;
};

struct Context {
  json config;
  std::uint64_t seed = 0;
  fs::path out;
  SearchSpace space;
  Architecture arch;
  PushBoxParams env;
};

Context make_context(const Options& o) {
  Context c;
  c.config = load_run_config(o.config_path);
  for (const auto& s : o.sets) apply_override(c.config, s);
  if (o.seed) c.config["seed"] = *o.seed;
  if (!o.out.empty()) c.config["out"] = o.out;
  if (!o.profiles.empty()) c.config["devices"]["profiles"] = o.profiles;
  c.seed = c.config.at("seed").get<std::uint64_t>();
  c.out = c.config.at("out").get<std::string>();
  c.space = space_from_json(c.config.at("space"));
  c.arch = architecture(c.config, c.space);
  c.env = env_params(c.config);
  return c;
}

std::string path_or(const Context& c, const char* section, const char* key, const char* fallback) {
  const std::string v = c.config.at(section).at(key).get<std::string>();
  return v.empty() ? (c.out / fallback).string() : v;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void write_json(const fs::path& p, const json& j) { write_file(p.string(), dump(j)); }

std::vector<DeviceProfile> device_profiles(const Context& c) {
  std::vector<DeviceProfile> out;
  for (const auto& p : c.config.at("devices").at("profiles")) out.push_back(load_profile(p.get<std::string>(), c.space));
  if (out.empty()) {
    for (const auto& d : c.config.at("devices").at("synthetic")) {
      out.push_back(synthesize_profile(synthetic_device(d), c.space, c.arch));
    }
  }
  if (out.empty()) throw UserError("no device profiles: pass --device-profile or configure devices.synthetic");
  std::map<std::string, int> seen;
  for (const auto& p : out) {
    if (seen[p.device_id]++) throw UserError("duplicate device id '" + p.device_id + "'");
  }
  return out;
}

std::vector<Trajectory> load_demos(const Context& c, bool validation) {
  const std::string p = validation ? path_or(c, "demos", "val_path", "val_demos.bin") : path_or(c, "demos", "path", "demos.bin");
  if (!fs::exists(p)) throw UserError("missing demo file '" + p + "' (run gen-demos first)");
  auto d = read_demos(p);
  if (d.empty()) throw UserError("demo file '" + p + "' is empty");
  return d;
}

/// distilled.ckpt when present, else supernet.ckpt, unless `checkpoint` is set.
std::string checkpoint_path(const Context& c) {
  const std::string set = c.config.at("checkpoint").get<std::string>();
  if (!set.empty()) return set;
  const fs::path distilled = c.out / "distilled.ckpt";
  return fs::exists(distilled) ? distilled.string() : (c.out / "supernet.ckpt").string();
}

SupernetCheckpoint load_supernet(const Context& c, const std::string& path) {
  if (!fs::exists(path)) throw UserError("missing checkpoint '" + path + "' (run train first)");
  SupernetCheckpoint ck = decode_supernet(read_file(path), &c.space);
  if (ck.net.arch().fingerprint() != c.arch.fingerprint()) throw UserError("checkpoint architecture differs from config");
  return ck;
}

// ---- commands ---------------------------------------------------------------------

int cmd_gen_demos(const Context& c) {
  const json& d = c.config.at("demos");
  const auto n = d.at("episodes").get<std::size_t>();
  const auto nv = d.at("val_episodes").get<std::size_t>();
  if (n == 0 || nv == 0) throw UserError("demos.episodes and demos.val_episodes must be positive");
  const double noise = d.at("action_noise").get<double>();
  Rng master(c.seed);
  const std::uint64_t train_seed = master.next(), val_seed = master.next();
  const auto train = generate_demos(c.env, n, train_seed, noise);
  const auto val = generate_demos(c.env, nv, val_seed, noise);
  const std::string p = path_or(c, "demos", "path", "demos.bin");
  const std::string pv = path_or(c, "demos", "val_path", "val_demos.bin");
  fs::create_directories(c.out);
  write_demos(train, p);
  write_demos(val, pv);
  std::size_t ok = 0, steps = 0;
  for (const auto& t : train) {
    ok += t.success ? 1 : 0;
    steps += t.length();
  }
  std::printf("gen-demos: %zu episodes (%zu successful, %zu steps) -> %s; %zu validation -> %s\n", n, ok, steps,
              p.c_str(), nv, pv.c_str());
  return 0;
}

int cmd_profile_synth(const Context& c) {
  const fs::path dir = c.out / "profiles";
  fs::create_directories(dir);
  for (const auto& d : c.config.at("devices").at("synthetic")) {
    const DeviceProfile p = synthesize_profile(synthetic_device(d), c.space, c.arch);
    save_profile(p, (dir / (p.device_id + ".json")).string());
    std::printf("profile-synth: %s latency budget %s ms, memory budget %llu bytes\n", p.device_id.c_str(),
                format_double(p.budget_latency_ms).c_str(), static_cast<unsigned long long>(p.budget_memory_bytes));
  }
  const PaperFixture f = orin_nx_paper_fixture();
  save_profile(f.profile, (dir / "orin-nx-paper.json").string());
  std::printf("profile-synth: orin-nx-paper fixture -> %s\n", (dir / "orin-nx-paper.json").string().c_str());
  return 0;
}

int cmd_train(const Context& c) {
  const auto devices = device_profiles(c);
  Dataset data(load_demos(c, false));
  Supernet net(c.arch, c.space, c.seed, c.config.at("model").at("act_decay").get<double>());
  const TrainConfig tc = train_config(c.config);
  Rng master(c.seed);
  master.next();
  Trainer trainer(net, devices, std::move(data), tc, master.next());
  std::string csv = metrics_header();
  if (tc.steps == 0) trainer.calibrate_initial();
  for (std::size_t s = 0; s < tc.steps; ++s) {
    for (const auto& r : trainer.step()) csv += metrics_row(r);
  }
  if (tc.steps <= tc.quant_warmup_steps) net.freeze_act_quantizers();
  fs::create_directories(c.out);
  write_file((c.out / "train_metrics.csv").string(), csv);
  write_file((c.out / "supernet.ckpt").string(), encode_supernet(net, capture_state(trainer, 0)));
  std::printf("train: %zu steps -> %s\n", tc.steps, (c.out / "supernet.ckpt").string().c_str());
  return 0;
}

int cmd_distill(const Context& c) {
  const auto devices = device_profiles(c);
  const auto demos = load_demos(c, false);
  SupernetCheckpoint ck = load_supernet(c, (c.out / "supernet.ckpt").string());
  const TrainConfig tc = train_config(c.config);
  const OpdConfig oc = opd_config(c.config);
  Trainer trainer(ck.net, devices, Dataset(demos), tc, 0);
  restore_state(trainer, ck.state);
  Distiller distiller(trainer, oc, c.env, start_states(demos));
  std::string csv = metrics_header();
  for (std::size_t s = 0; s < oc.steps; ++s) {
    for (const auto& r : distiller.step()) csv += metrics_row(r);
  }
  write_file((c.out / "distill_metrics.csv").string(), csv);
  write_file((c.out / "distilled.ckpt").string(),
             encode_supernet(ck.net, capture_state(trainer, static_cast<std::int64_t>(oc.steps))));
  std::printf("distill: %zu steps -> %s\n", oc.steps, (c.out / "distilled.ckpt").string().c_str());
  return 0;
}

int cmd_search(const Context& c) {
  const auto devices = device_profiles(c);
  const SupernetCheckpoint ck = load_supernet(c, checkpoint_path(c));
  const auto [vobs, vact] = Dataset(load_demos(c, true)).all();
  const SearchParams sp = search_params(c.config);
  const SelectionRule rule = selection_rule(c.config);
  const FitnessFn fitness = [&](const SubnetConfig& cfg) { return validation_loss(ck.net, cfg, vobs, vact); };
  Rng master(c.seed);
  for (const auto& d : devices) {
    const ParetoFront f = run_search(c.space, c.arch, d, fitness, sp, master.next());
    std::size_t selected = 0;
    if (f.feasible) selected = select_deployment_index(f, rule);
    write_file((c.out / ("front_" + d.device_id + ".csv")).string(), front_csv(f));
    write_json(c.out / ("front_" + d.device_id + ".json"), front_to_json(c.space, f, selected));
    if (f.feasible) {
      const Individual& m = f.members[selected];
      std::printf("search: %s front %zu members, selected %s (val_loss %s, %s ms)\n", d.device_id.c_str(),
                  f.members.size(), genome_string(m.genome).c_str(), format_double(m.objectives[0]).c_str(),
                  format_double(m.latency_ms).c_str());
    } else {
      std::printf("search: %s has no feasible configuration; least violation %s\n", d.device_id.c_str(),
                  format_double(f.min_violation->violation).c_str());
    }
  }
  return 0;
}

json load_front_json(const Context& c, const std::string& device_id) {
  const fs::path p = c.out / ("front_" + device_id + ".json");
  if (!fs::exists(p)) throw UserError("missing front '" + p.string() + "' (run search first)");
  json j = json::parse(read_file(p.string()), nullptr, false);
  if (j.is_discarded()) throw UserError("front '" + p.string() + "' is not valid JSON");
  return j;
}

SubnetConfig deployed_config(const Context& c, const std::string& device_id) {
  const json j = load_front_json(c, device_id);
  if (!j.at("feasible").get<bool>()) throw UserError("device '" + device_id + "' has no feasible configuration");
  const std::size_t i = j.at("selected").get<std::size_t>();
  return decode(c.space, parse_genome(j.at("members").at(i).at("genome").get<std::string>()));
}

int cmd_eval(const Context& c) {
  const json& e = c.config.at("eval");
  const auto n = e.at("episodes").get<std::size_t>();
  if (n == 0) throw UserError("eval.episodes must be positive");
  const auto seeds = episode_seeds(e.at("seed_base").get<std::uint64_t>(), n);
  const std::string name = e.at("config").get<std::string>();
  EvalResult r;
  json layers;
  if (name.rfind("subnet:", 0) == 0) {
    const Subnet s = decode_subnet(read_file(name.substr(7)));
    r = evaluate(s, c.env, seeds);
    layers = config_to_json(s.config());
  } else {
    const SupernetCheckpoint ck = load_supernet(c, checkpoint_path(c));
    SubnetConfig cfg;
    if (name == "teacher") {
      cfg = teacher_config(c.space);
    } else if (name == "largest") {
      cfg = largest_config(c.space);
    } else if (name == "smallest") {
      cfg = smallest_config(c.space);
    } else if (name.rfind("deployed:", 0) == 0) {
      cfg = deployed_config(c, name.substr(9));
    } else {
      cfg = decode(c.space, parse_genome(name));
    }
    r = evaluate(ck.net, cfg, c.env, seeds);
    layers = config_to_json(cfg);
  }
  const json out{{"config", name},
                 {"layers", layers},
                 {"episodes", r.episodes},
                 {"successes", r.successes},
                 {"success_rate", r.success_rate},
                 {"mean_length", r.mean_length}};
  write_json(c.out / "eval.json", out);
  std::printf("eval: %s success %zu/%zu mean length %s\n", name.c_str(), r.successes, r.episodes,
              format_double(r.mean_length).c_str());
  return 0;
}

int cmd_export(const Context& c) {
  const auto devices = device_profiles(c);
  const SupernetCheckpoint ck = load_supernet(c, checkpoint_path(c));
  for (const auto& d : devices) {
    const SubnetConfig cfg = deployed_config(c, d.device_id);
    const Subnet s = ck.net.extract(cfg);
    const fs::path ckpt = c.out / ("subnet_" + d.device_id + ".ckpt");
    write_file(ckpt.string(), encode_subnet(s));
    json report = deployment_report(d, c.arch, cfg);
    report["genome"] = genome_string(encode(c.space, cfg));
    report["checkpoint"] = ckpt.filename().string();
    write_json(c.out / ("deploy_" + d.device_id + ".json"), report);
    std::printf("export: %s latency %s/%s ms, memory %s/%llu bytes -> %s\n", d.device_id.c_str(),
                format_double(report["latency_ms"].get<double>()).c_str(), format_double(d.budget_latency_ms).c_str(),
                format_double(report["memory_bytes"].get<double>()).c_str(),
                static_cast<unsigned long long>(d.budget_memory_bytes), ckpt.string().c_str());
  }
  return 0;
}

int cmd_pareto_csv(const Context& c) {
  const auto devices = device_profiles(c);
  for (const auto& d : devices) {
    const ParetoFront f = front_from_json(load_front_json(c, d.device_id));
    const fs::path p = c.out / ("front_" + d.device_id + ".csv");
    write_file(p.string(), front_csv(f));
    std::printf("pareto-csv: %s\n", p.string().c_str());
  }
  return 0;
}

std::string escape(const std::string& s) { return json(s).dump(); }

void report_error(const std::string& command, const char* kind, const std::string& message) {
  std::fprintf(stderr, "{\"error\":\"%s\",\"command\":%s,\"message\":%s}\n", kind, escape(command).c_str(),
               escape(message).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Device-conditioned quantized supernet: training, distillation, search and export"};
  app.require_subcommand(1);
  Options opts;
  const std::map<std::string, int (*)(const Context&)> commands = {
      {"gen-demos", cmd_gen_demos}, {"profile-synth", cmd_profile_synth}, {"train", cmd_train},
      {"distill", cmd_distill},     {"search", cmd_search},               {"eval", cmd_eval},
      {"export", cmd_export},       {"pareto-csv", cmd_pareto_csv}};
  const std::map<std::string, std::string> help = {
      {"gen-demos", "Write expert demonstrations and a validation set"},
      {"profile-synth", "Write synthetic device LUTs and the orin-nx-paper fixture"},
      {"train", "Stage I supernet training"},
      {"distill", "Continue training with on-policy distillation"},
      {"search", "Per-device constrained NSGA-II search"},
      {"eval", "Closed-loop evaluation of a named config"},
      {"export", "Extract deployed subnets and write deployment reports"},
      {"pareto-csv", "Re-emit front CSVs from front JSON"}};
  for (const auto& [name, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("--config", opts.config_path, "Run configuration JSON");
    sub->add_option("--seed", opts.seed, "Seed override");
    sub->add_option("--out", opts.out, "Output directory override");
    sub->add_option("--device-profile", opts.profiles, "Device LUT JSON (repeatable)");
    sub->add_option("--set", opts.sets, "KEY=VALUE config override (repeatable)");
  }
  std::string command = argc > 1 ? argv[1] : "";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error(command, "usage", e.what());
    return 1;
  }
  for (CLI::App* sub : app.get_subcommands()) command = sub->get_name();
  try {
    const Context ctx = make_context(opts);
    return commands.at(command)(ctx);
  } catch (const UserError& e) {
    report_error(command, "user", e.what());
    return 1;
  } catch (const json::exception& e) {
    report_error(command, "user", e.what());
    return 1;
  } catch (const NumericError& e) {
    report_error(command, "numeric", e.what());
    return 2;
  } catch (const std::exception& e) {
    report_error(command, "internal", e.what());
    return 2;
  }
}
