#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "rcm/analysis.hpp"
#include "rcm/model_io.hpp"
#include "rcm/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exercises the installed binary; the build passes its location in.
const std::string kCli = RCM_CLI_PATH;

int run(const std::string& args, const std::string& log = "/dev/null") {
  std::string cmd = "\"" + kCli + "\" " + args + " > " + log + " 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void put(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("cli: end-to-end pipeline with task isolation") {
  fs::path d = fs::temp_directory_path() / "rcm_cli_e2e";
  fs::remove_all(d);
  fs::create_directories(d);

  put(d / "scene.json", R"({"image_size": 16, "seed": 7})");
  put(d / "arch.json", R"({"image_size": 16, "num_classes": 3, "layers": [
      {"in_ch": 3, "out_ch": 8}, {"in_ch": 8, "out_ch": 8}]})");
  put(d / "train.json", R"({"epochs": 1, "batch_size": 4, "base_lr": 0.01, "seed": 5})");
  put(d / "edge.json", R"({"id": "edge", "head_channels": 1, "loss": "weighted-bce",
      "loss_weight": 50.0, "metric": "f1_edge"})");
  put(d / "semseg.json", R"({"id": "semseg", "head_channels": 4, "loss": "cross-entropy",
      "metric": "miou"})");

  std::string data = (d / "data").string();
  std::string ckpt = (d / "model.rcmc").string();
  std::string deco = (d / "decomposed.rcmc").string();

  CHECK(run("gen-data --config " + (d / "scene.json").string() + " --out " + data +
            " --count 12") == 0);
  CHECK(fs::exists(d / "data" / "run_manifest.json"));

  CHECK(run("pretrain --data " + data + " --arch " + (d / "arch.json").string() +
            " --train " + (d / "train.json").string() + " --out " + ckpt) == 0);
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(ckpt + ".meta.json"));
  json man = json::parse(slurp(ckpt + ".run.json"));
  CHECK(man.at("command") == "pretrain");
  CHECK(man.at("outputs").size() == 2);
  CHECK(man.contains("config_hash"));
  CHECK(man.contains("wall_clock_seconds"));

  // decompose gates on pretrain-task equivalence, then the pair must verify
  CHECK(run("decompose --ckpt " + ckpt + " --probe " + data + " --out " + deco +
            " --tol 1e-4") == 0);
  CHECK(run("verify --a " + ckpt + " --b " + deco + " --task __pretrain__ --tol 1e-4"
            " --count 20") == 0);
  // a loose tolerance against a genuinely different model must fail -> exit 2
  {
    std::string other = (d / "other.rcmc").string();
    CHECK(run("pretrain --data " + data + " --arch " + (d / "arch.json").string() +
              " --seed 99 --out " + other) == 0);
    CHECK(run("verify --a " + ckpt + " --b " + other + " --task __pretrain__ --tol 1e-4") == 2);
  }

  CHECK(run("add-task --ckpt " + deco + " --task " + (d / "edge.json").string() +
            " --mode rcm") == 0);
  CHECK(run("add-task --ckpt " + deco + " --task " + (d / "semseg.json").string() +
            " --mode rcm") == 0);

  // training semseg must not move edge's evaluation at all
  std::string rep1 = (d / "rep1.json").string();
  std::string rep2 = (d / "rep2.json").string();
  CHECK(run("eval --ckpt " + deco + " --tasks edge --data " + data + " --out " + rep1) == 0);
  CHECK(run("train --ckpt " + deco + " --task semseg --train " + (d / "train.json").string() +
            " --data " + data) == 0);
  CHECK(run("eval --ckpt " + deco + " --tasks edge --data " + data + " --out " + rep2) == 0);
  double m1 = json::parse(slurp(rep1)).at("metrics").at("edge").get<double>();
  double m2 = json::parse(slurp(rep2)).at("metrics").at("edge").get<double>();
  CHECK(m1 == m2);

  // eval against a baseline produces a drop report
  put(d / "baseline.json", R"({"edge": 0.5, "semseg": 0.25})");
  std::string rep3 = (d / "rep3.json").string();
  CHECK(run("eval --ckpt " + deco + " --data " + data + " --baseline " +
            (d / "baseline.json").string() + " --out " + rep3) == 0);
  json r3 = json::parse(slurp(rep3));
  CHECK(r3.contains("delta_m_percent"));
  CHECK(r3.at("drop").size() == 2);
  CHECK(fs::exists(rep3 + ".run.json"));

  // rsa over both tasks: square csv, unit diagonal
  std::string csv = (d / "rsa.csv").string();
  CHECK(run("rsa --ckpt " + deco + " --layer layers.0 --data " + data +
            " --m 6 --batch 4 --out " + csv) == 0);
  std::ifstream cf(csv);
  std::string line;
  std::getline(cf, line);
  CHECK(line == "task,edge,semseg");
  std::getline(cf, line);
  CHECK(line.rfind("edge,1,", 0) == 0);
  std::getline(cf, line);
  CHECK(line.rfind("semseg,", 0) == 0);
  CHECK(line.substr(line.size() - 2) == ",1");
}

TEST_CASE("cli: params table matches closed forms") {
  fs::path d = fresh_dir("rcm_cli_params");
  std::string log = (d / "params.txt").string();
  // default arch: one 3x3 conv, 64 -> 64; rcm over 5 tasks
  CHECK(run("params --mode rcm --tasks 5", log) == 0);
  std::string out = slurp(log);
  CHECK(out.find("36864") != std::string::npos);   // shared bank 64*64*3*3
  CHECK(out.find("4096") != std::string::npos);    // per-task modulator 64*64
  CHECK(out.find("57344") != std::string::npos);   // 36864 + 5*4096

  CHECK(run("params --mode single --tasks 5", log) == 0);
  out = slurp(log);
  CHECK(out.find("184320") != std::string::npos);  // 5 * 36864

  CHECK(run("params", log) == 0);
  out = slurp(log);
  for (const char* m : {"freeze", "bn-only", "conv-only", "single", "rcm", "series-ra",
                        "parallel-ra"})
    CHECK(out.find(m) != std::string::npos);
}

TEST_CASE("cli: exit code taxonomy") {
  fs::path d = fresh_dir("rcm_cli_exits");
  // usage errors -> 1
  CHECK(run("no-such-command") == 1);
  CHECK(run("gen-data --config x.json") == 1);  // missing required flags
  CHECK(run("") == 1);

  // validation errors -> 2
  put(d / "scene.json", R"({"image_size": 16, "seed": 1})");
  std::string data = (d / "data").string();
  CHECK(run("gen-data --config " + (d / "scene.json").string() + " --out " + data +
            " --count 4") == 0);
  CHECK(run("gen-data --config " + (d / "scene.json").string() + " --out " + data +
            " --count 4") == 2);  // silent overwrite refused
  CHECK(run("gen-data --config " + (d / "scene.json").string() + " --out " + data +
            " --count 4 --force") == 0);
  CHECK(run("gen-data --config " + (d / "scene.json").string() + " --out " + data +
            " --count 0 --force") == 2);
  put(d / "bad.json", "{nope");
  CHECK(run("gen-data --config " + (d / "bad.json").string() + " --out " +
            (d / "d2").string() + " --count 4") == 2);
  CHECK(run("params --mode no-such-mode") == 2);
  CHECK(run("params --tasks 0") == 2);

  // runtime failures -> 3
  CHECK(run("pretrain --data " + (d / "missing").string() + " --arch " +
            (d / "missing.json").string() + " --out " + (d / "m.rcmc").string()) == 2);
  put(d / "arch.json", R"({"layers": [{"in_ch": 3, "out_ch": 4}]})");
  CHECK(run("pretrain --data " + (d / "missing").string() + " --arch " +
            (d / "arch.json").string() + " --out " + (d / "m.rcmc").string()) == 3);
  CHECK(run("eval --ckpt " + (d / "missing.rcmc").string() + " --data " + data +
            " --out " + (d / "r.json").string()) == 3);

  // RCM_THREADS is validated
  CHECK(std::system(("RCM_THREADS=abc \"" + kCli + "\" params > /dev/null 2>&1").c_str()) !=
        0);
  CHECK(WEXITSTATUS(std::system(
            ("RCM_THREADS=2 \"" + kCli + "\" params > /dev/null 2>&1").c_str())) == 0);
}

TEST_CASE("cli: model save/load round trip is bit-identical") {
  fs::path d = fresh_dir("rcm_cli_roundtrip");
  rcm::BackboneSpec spec;
  spec.image_size = 16;
  rcm::LayerSpec l;
  l.in_ch = 3;
  l.out_ch = 6;
  spec.layers.push_back(l);
  l.in_ch = 6;
  spec.layers.push_back(l);

  rcm::Model m(spec, 21);
  m.freeze_backbone();
  m.register_task(rcm::benchmark_task("edge"), rcm::AdaptationMode::RCM);
  m.register_task(rcm::benchmark_task("normals"), rcm::AdaptationMode::SeriesRA);

  std::string a = (d / "a.rcmc").string();
  std::string b = (d / "b.rcmc").string();
  rcm::model_io::save(m, a);
  auto loaded = rcm::model_io::load(a);
  CHECK(rcm::model_state_hash(*loaded) == rcm::model_state_hash(m));
  rcm::model_io::save(*loaded, b);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a + ".meta.json") == slurp(b + ".meta.json"));
}
