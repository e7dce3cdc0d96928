// Command-line front end: data generation, pretraining, decomposition,
// incremental task registration/training, evaluation, analysis.
//
// Exit codes: 0 success, 1 usage, 2 validation or gate failure,
// 3 runtime failure (I/O, non-finite values).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <zlib.h>

#include "rcm/analysis.hpp"
#include "rcm/data.hpp"
#include "rcm/model_io.hpp"
#include "rcm/reparam.hpp"
#include "rcm/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Distinguishes bad inputs / failed gates (exit 2) from runtime faults
// (exit 3, via rcm::Error or anything else).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int read_thread_cap() {
  const char* env = std::getenv("RCM_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ValidationError("RCM_THREADS must be a positive integer");
  return static_cast<int>(v);
}

std::string git_describe() {
  FILE* p = popen("git describe --always --dirty 2>/dev/null", "r");
  if (!p) return "unknown";
  char buf[128] = {0};
  std::string out;
  while (fgets(buf, sizeof(buf), p)) out += buf;
  pclose(p);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

uint32_t bytes_crc(const std::string& s) {
  return static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError("bad JSON in " + path + ": " + e.what());
  }
}

struct ManifestScope {
  std::string command;
  uint64_t seed = 0;
  std::string config_text;  // hashed; empty when a command has no config file
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  // Manifest lands next to the first output (`<out>.run.json`, or
  // `run_manifest.json` inside directory outputs).
  void write() const {
    if (outputs.empty()) return;
    fs::path primary(outputs.front());
    fs::path dest = fs::is_directory(primary) ? primary / "run_manifest.json"
                                              : fs::path(outputs.front() + ".run.json");
    ordered_json m;
    m["command"] = command;
    m["config_hash"] = bytes_crc(config_text);
    m["seed"] = seed;
    m["git_describe"] = git_describe();
    m["outputs"] = outputs;
    m["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ofstream(dest) << m.dump(2) << "\n";
  }
};

void guard_overwrite(const std::string& path, bool force) {
  if (force) return;
  if (fs::exists(path))
    throw ValidationError("refusing to overwrite " + path + " (use --force)");
}

rcm::TrainConfig train_config_from_json(const json& j) {
  rcm::TrainConfig cfg;
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.poly_power = j.value("poly_power", cfg.poly_power);
  cfg.seed = j.value("seed", cfg.seed);
  try {
    cfg.validate();
  } catch (const rcm::Error& e) {
    throw ValidationError(e.what());
  }
  return cfg;
}

// --------------------------------------------------------------------------
// Subcommands
// --------------------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, int count,
                 bool force) {
  if (count < 1) throw ValidationError("--count must be >= 1");
  std::ifstream cf(config_path);
  if (!cf) throw ValidationError("cannot open " + config_path);
  std::string text((std::istreambuf_iterator<char>(cf)), std::istreambuf_iterator<char>());
  rcm::SceneConfig cfg;
  try {
    cfg = rcm::scene_config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ValidationError("bad JSON in " + config_path + ": " + e.what());
  }

  guard_overwrite((fs::path(out_dir) / "manifest.json").string(), force);
  ManifestScope man{"gen-data", cfg.seed, text};
  rcm::Dataset ds = rcm::generate_dataset(cfg, count);
  rcm::save_dataset(ds, out_dir);
  man.outputs.push_back(out_dir);
  man.write();
  std::cout << "wrote " << count << " samples to " << out_dir << "\n";
  return 0;
}

int cmd_pretrain(const std::string& data_dir, const std::string& arch_path,
                 const std::string& out_ckpt, const std::string& train_path, uint64_t seed,
                 bool factored, bool nff, bool force) {
  guard_overwrite(out_ckpt, force);
  json arch = read_json_file(arch_path);
  rcm::BackboneSpec spec = rcm::model_io::backbone_from_json(arch);
  rcm::TrainConfig cfg;
  std::string cfg_text = arch.dump();
  if (!train_path.empty()) {
    json tj = read_json_file(train_path);
    cfg = train_config_from_json(tj);
    cfg_text += tj.dump();
  }
  cfg.seed = cfg.seed ? cfg.seed : seed;

  ManifestScope man{"pretrain", seed, cfg_text};
  rcm::Dataset ds = rcm::load_dataset(data_dir);
  rcm::Model model(spec, seed, factored, nff);
  auto history = rcm::train_task(model, rcm::kPretrainTask, ds, cfg);
  for (const auto& s : history)
    std::cout << "epoch " << s.epoch << " loss " << s.loss << " acc " << s.metric << "\n";
  model.freeze_backbone();
  rcm::model_io::save(model, out_ckpt);
  man.outputs = {out_ckpt, out_ckpt + ".meta.json"};
  man.write();
  return 0;
}

int cmd_decompose(const std::string& in_ckpt, const std::string& probe_dir,
                  const std::string& out_ckpt, double tol, int rank, int locations,
                  uint64_t probe_seed, bool force) {
  if (tol <= 0) throw ValidationError("--tol must be positive");
  guard_overwrite(out_ckpt, force);

  ManifestScope man{"decompose", probe_seed, in_ckpt};
  rcm::Dataset probe_ds = rcm::load_dataset(probe_dir);
  auto original = rcm::model_io::load(in_ckpt);
  auto decomposed = rcm::model_io::load(in_ckpt);

  rcm::ProbeSet probe;
  for (const auto& s : probe_ds.samples) probe.samples.push_back(s.image);
  probe.locations_per_sample = locations;
  probe.seed = probe_seed;
  rcm::response_initialize(*decomposed, probe, rank);

  std::vector<rcm::Tensor> inputs;
  for (size_t i = 0; i < probe_ds.samples.size() && i < 16; ++i) {
    const rcm::Tensor& img = probe_ds.samples[i].image;
    rcm::Tensor b({1, img.dim(0), img.dim(1), img.dim(2)});
    b.data = img.data;
    inputs.push_back(std::move(b));
  }
  auto rep = rcm::verify_equivalence(*original, *decomposed, rcm::kPretrainTask, inputs, tol);
  std::cout << "max deviation " << rep.global_max_dev << " (tol " << tol << ")\n";
  if (!rep.pass) {
    std::cerr << "equivalence gate failed\n";
    return 2;
  }
  rcm::model_io::save(*decomposed, out_ckpt);
  man.outputs = {out_ckpt, out_ckpt + ".meta.json"};
  man.write();
  return 0;
}

int cmd_add_task(const std::string& ckpt, const std::string& task_path,
                 const std::string& mode_str) {
  json tj = read_json_file(task_path);
  rcm::TaskSpec spec;
  rcm::AdaptationMode mode;
  try {
    spec = rcm::model_io::task_spec_from_json(tj);
    mode = rcm::mode_from_name(mode_str);
  } catch (const rcm::Error& e) {
    throw ValidationError(e.what());
  }
  ManifestScope man{"add-task", 0, tj.dump()};
  auto model = rcm::model_io::load(ckpt);
  try {
    model->register_task(spec, mode);
  } catch (const rcm::Error& e) {
    throw ValidationError(e.what());
  }
  rcm::model_io::save(*model, ckpt);
  man.outputs = {ckpt, ckpt + ".meta.json"};
  man.write();
  std::cout << "registered task " << spec.id << " (" << mode_str << ")\n";
  return 0;
}

int cmd_train(const std::string& ckpt, const std::string& task, const std::string& train_path,
              const std::string& data_dir) {
  json tj = read_json_file(train_path);
  rcm::TrainConfig cfg = train_config_from_json(tj);
  ManifestScope man{"train", cfg.seed, tj.dump()};
  rcm::Dataset ds = rcm::load_dataset(data_dir);
  auto model = rcm::model_io::load(ckpt);
  if (!model->has_task(task)) throw ValidationError("unknown task " + task);
  auto history = rcm::train_task(*model, task, ds, cfg);
  for (const auto& s : history)
    std::cout << "epoch " << s.epoch << " loss " << s.loss << " metric " << s.metric << "\n";
  rcm::model_io::save(*model, ckpt);
  man.outputs = {ckpt, ckpt + ".meta.json"};
  man.write();
  return 0;
}

int cmd_eval(const std::string& ckpt, std::vector<std::string> tasks,
             const std::string& data_dir, const std::string& baseline_path,
             const std::string& out_path, bool force) {
  guard_overwrite(out_path, force);
  ManifestScope man{"eval", 0, ckpt};
  rcm::Dataset ds = rcm::load_dataset(data_dir);
  auto model = rcm::model_io::load(ckpt);
  if (tasks.empty())
    for (const auto& [id, e] : model->tasks())
      if (id != rcm::kPretrainTask) tasks.push_back(id);

  ordered_json report;
  std::map<rcm::TaskId, double> metrics;
  std::map<rcm::TaskId, bool> lower;
  for (const std::string& t : tasks) {
    if (!model->has_task(t)) throw ValidationError("unknown task " + t);
    metrics[t] = rcm::evaluate_task(*model, t, ds);
    lower[t] = model->task(t).spec.lower_better;
    report["metrics"][t] = metrics[t];
    std::cout << t << " " << metrics[t] << "\n";
  }

  if (!baseline_path.empty()) {
    json bj = read_json_file(baseline_path);
    std::map<rcm::TaskId, double> baseline;
    for (const std::string& t : tasks) {
      if (!bj.contains(t)) throw ValidationError("baseline missing task " + t);
      baseline[t] = bj.at(t).get<double>();
    }
    rcm::DropReport drop;
    try {
      drop = rcm::delta_m(metrics, baseline, lower);
    } catch (const rcm::Error& e) {
      throw ValidationError(e.what());
    }
    for (const auto& pt : drop.per_task)
      report["drop"][pt.task] = {{"model", pt.model_metric},
                                 {"baseline", pt.baseline_metric},
                                 {"lower_better", pt.lower_better},
                                 {"drop_percent", pt.drop_percent}};
    report["delta_m_percent"] = drop.delta_m_percent;
    std::cout << "delta_m " << drop.delta_m_percent << "%\n";
  }

  std::ofstream(out_path) << report.dump(2) << "\n";
  man.outputs = {out_path};
  man.write();
  return 0;
}

int cmd_rsa(const std::string& ckpt, const std::string& layer, const std::string& data_dir,
            int m, const std::string& out_path, int batch_size, bool force) {
  if (m < 2) throw ValidationError("--m must be >= 2");
  guard_overwrite(out_path, force);
  ManifestScope man{"rsa", 0, ckpt};
  rcm::Dataset ds = rcm::load_dataset(data_dir);
  auto model = rcm::model_io::load(ckpt);

  std::vector<rcm::GradientSampleSet> sets;
  for (const auto& [id, e] : model->tasks()) {
    if (id == rcm::kPretrainTask) continue;
    sets.push_back(rcm::capture_task_gradients(*model, id, layer, ds, m, batch_size));
  }
  if (sets.size() < 2) throw ValidationError("rsa needs at least two registered tasks");
  rcm::RSAMatrix rsa = rcm::rsa_correlation(sets);

  std::ofstream out(out_path);
  out << "task";
  for (const auto& t : rsa.tasks) out << "," << t;
  out << "\n";
  const int p = static_cast<int>(rsa.tasks.size());
  for (int i = 0; i < p; ++i) {
    out << rsa.tasks[i];
    for (int j = 0; j < p; ++j) out << "," << rsa.values.at2(i, j);
    out << "\n";
  }
  man.outputs = {out_path};
  man.write();
  return 0;
}

int cmd_params(const std::string& arch_path, const std::string& mode_str, int tasks) {
  if (tasks < 1) throw ValidationError("--tasks must be >= 1");
  rcm::BackboneSpec spec;
  if (arch_path.empty()) {
    // reference single-layer arch: 3x3 conv, 64 -> 64 channels
    rcm::LayerSpec l;
    l.in_ch = 64;
    l.out_ch = 64;
    spec.layers.push_back(l);
  } else {
    spec = rcm::model_io::backbone_from_json(read_json_file(arch_path));
  }
  std::vector<rcm::AdaptationMode> modes;
  if (mode_str == "all") {
    for (const char* m : {"freeze", "bn-only", "conv-only", "single", "rcm", "series-ra",
                          "parallel-ra"})
      modes.push_back(rcm::mode_from_name(m));
  } else {
    try {
      modes.push_back(rcm::mode_from_name(mode_str));
    } catch (const rcm::Error& e) {
      throw ValidationError(e.what());
    }
  }
  std::printf("%-12s %12s %12s %12s %14s %14s\n", "mode", "shared_w", "per_task_w",
              "weights_tot", "all_shared", "all_total");
  for (rcm::AdaptationMode mode : modes) {
    rcm::ParamCount pc = rcm::parameter_count(spec, tasks, mode);
    std::printf("%-12s %12lld %12lld %12lld %14lld %14lld\n", rcm::mode_name(mode),
                static_cast<long long>(pc.shared_weights),
                static_cast<long long>(pc.per_task_weights),
                static_cast<long long>(pc.weights_total(tasks)),
                static_cast<long long>(pc.shared()),
                static_cast<long long>(pc.total(tasks)));
  }
  return 0;
}

int cmd_verify(const std::string& a_path, const std::string& b_path, const std::string& task,
               double tol, const std::string& data_dir, int count, uint64_t seed) {
  if (tol <= 0) throw ValidationError("--tol must be positive");
  if (count < 1) throw ValidationError("--count must be >= 1");
  auto a = rcm::model_io::load(a_path);
  auto b = rcm::model_io::load(b_path);
  if (!a->has_task(task) || !b->has_task(task))
    throw ValidationError("task " + task + " not present in both checkpoints");

  std::vector<rcm::Tensor> inputs;
  if (!data_dir.empty()) {
    rcm::Dataset ds = rcm::load_dataset(data_dir);
    for (int i = 0; i < count && i < static_cast<int>(ds.samples.size()); ++i) {
      const rcm::Tensor& img = ds.samples[i].image;
      rcm::Tensor t({1, img.dim(0), img.dim(1), img.dim(2)});
      t.data = img.data;
      inputs.push_back(std::move(t));
    }
  } else {
    int s = a->spec().image_size;
    rcm::Rng rng(seed);
    for (int i = 0; i < count; ++i) {
      rcm::Tensor t({1, 3, s, s});
      for (float& v : t.data) v = static_cast<float>(rng.next_normal(0.0, 1.0));
      inputs.push_back(std::move(t));
    }
  }
  auto rep = rcm::verify_equivalence(*a, *b, task, inputs, tol);
  std::cout << "max deviation " << rep.global_max_dev << " (tol " << tol << ")\n";
  if (!rep.pass) {
    std::cerr << "verification failed\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reparameterized-convolution multi-task pipeline"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_config, gd_out;
  int gd_count = 0;
  bool gd_force = false;
  auto* gd = app.add_subcommand("gen-data", "generate a synthetic multi-task dataset");
  gd->add_option("--config", gd_config)->required();
  gd->add_option("--out", gd_out)->required();
  gd->add_option("--count", gd_count)->required();
  gd->add_flag("--force", gd_force);

  // pretrain
  std::string pt_data, pt_arch, pt_out, pt_train;
  uint64_t pt_seed = 1;
  bool pt_factored = false, pt_no_nff = false, pt_force = false;
  auto* pt = app.add_subcommand("pretrain", "pretrain the backbone on shape classification");
  pt->add_option("--data", pt_data)->required();
  pt->add_option("--arch", pt_arch)->required();
  pt->add_option("--out", pt_out)->required();
  pt->add_option("--train", pt_train);
  pt->add_option("--seed", pt_seed);
  pt->add_flag("--factored", pt_factored);
  pt->add_flag("--no-nff", pt_no_nff);
  pt->add_flag("--force", pt_force);

  // decompose
  std::string dc_in, dc_probe, dc_out;
  double dc_tol = 1e-4;
  int dc_rank = 0, dc_loc = 16;
  uint64_t dc_seed = 1;
  bool dc_force = false;
  auto* dc = app.add_subcommand("decompose", "response-initialize and gate on equivalence");
  dc->add_option("--ckpt", dc_in)->required();
  dc->add_option("--probe", dc_probe)->required();
  dc->add_option("--out", dc_out)->required();
  dc->add_option("--tol", dc_tol);
  dc->add_option("--rank", dc_rank);
  dc->add_option("--locations", dc_loc);
  dc->add_option("--probe-seed", dc_seed);
  dc->add_flag("--force", dc_force);

  // add-task
  std::string at_ckpt, at_task, at_mode;
  auto* at = app.add_subcommand("add-task", "register a task on a frozen backbone");
  at->add_option("--ckpt", at_ckpt)->required();
  at->add_option("--task", at_task)->required();
  at->add_option("--mode", at_mode)->required();

  // train
  std::string tr_ckpt, tr_task, tr_train, tr_data;
  auto* tr = app.add_subcommand("train", "train one task's parameters");
  tr->add_option("--ckpt", tr_ckpt)->required();
  tr->add_option("--task", tr_task)->required();
  tr->add_option("--train", tr_train)->required();
  tr->add_option("--data", tr_data)->required();

  // eval
  std::string ev_ckpt, ev_data, ev_baseline, ev_out;
  std::vector<std::string> ev_tasks;
  bool ev_force = false;
  auto* ev = app.add_subcommand("eval", "evaluate tasks, optionally against a baseline");
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--tasks", ev_tasks);
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--baseline", ev_baseline);
  ev->add_option("--out", ev_out)->required();
  ev->add_flag("--force", ev_force);

  // rsa
  std::string rs_ckpt, rs_layer, rs_data, rs_out;
  int rs_m = 16, rs_batch = 16;
  bool rs_force = false;
  auto* rs = app.add_subcommand("rsa", "gradient representation similarity analysis");
  rs->add_option("--ckpt", rs_ckpt)->required();
  rs->add_option("--layer", rs_layer)->required();
  rs->add_option("--data", rs_data)->required();
  rs->add_option("--m", rs_m);
  rs->add_option("--batch", rs_batch);
  rs->add_option("--out", rs_out)->required();
  rs->add_flag("--force", rs_force);

  // params
  std::string pa_arch, pa_mode = "all";
  int pa_tasks = 1;
  auto* pa = app.add_subcommand("params", "print the parameter-count table");
  pa->add_option("--arch", pa_arch);
  pa->add_option("--mode", pa_mode);
  pa->add_option("--tasks", pa_tasks);

  // verify
  std::string vf_a, vf_b, vf_task, vf_data;
  double vf_tol = 1e-4;
  int vf_count = 100;
  uint64_t vf_seed = 1;
  auto* vf = app.add_subcommand("verify", "check two checkpoints agree on a task");
  vf->add_option("--a", vf_a)->required();
  vf->add_option("--b", vf_b)->required();
  vf->add_option("--task", vf_task)->required();
  vf->add_option("--tol", vf_tol);
  vf->add_option("--data", vf_data);
  vf->add_option("--count", vf_count);
  vf->add_option("--seed", vf_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    (void)read_thread_cap();  // single-threaded kernels; validated for contract
    if (gd->parsed()) return cmd_gen_data(gd_config, gd_out, gd_count, gd_force);
    if (pt->parsed())
      return cmd_pretrain(pt_data, pt_arch, pt_out, pt_train, pt_seed, pt_factored,
                          !pt_no_nff, pt_force);
    if (dc->parsed())
      return cmd_decompose(dc_in, dc_probe, dc_out, dc_tol, dc_rank, dc_loc, dc_seed, dc_force);
    if (at->parsed()) return cmd_add_task(at_ckpt, at_task, at_mode);
    if (tr->parsed()) return cmd_train(tr_ckpt, tr_task, tr_train, tr_data);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_tasks, ev_data, ev_baseline, ev_out, ev_force);
    if (rs->parsed()) return cmd_rsa(rs_ckpt, rs_layer, rs_data, rs_m, rs_out, rs_batch, rs_force);
    if (pa->parsed()) return cmd_params(pa_arch, pa_mode, pa_tasks);
    if (vf->parsed())
      return cmd_verify(vf_a, vf_b, vf_task, vf_tol, vf_data, vf_count, vf_seed);
    std::cerr << "no subcommand\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
