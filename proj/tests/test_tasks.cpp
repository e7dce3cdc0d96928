#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rcm/analysis.hpp"
#include "rcm/tasks.hpp"

using namespace rcm;

namespace {

BackboneSpec spec_of(std::vector<std::array<int, 3>> layers /* in, out, k */,
                     int image_size = 16) {
  BackboneSpec spec;
  spec.image_size = image_size;
  for (auto [in, out, k] : layers) {
    LayerSpec l;
    l.in_ch = in;
    l.out_ch = out;
    l.k = k;
    l.pad = k / 2;
    spec.layers.push_back(l);
  }
  return spec;
}

Model frozen_model(const BackboneSpec& spec, uint64_t seed) {
  Model m(spec, seed);
  m.freeze_backbone();
  return m;
}

Dataset tiny_dataset(uint64_t seed, int count = 8, int image_size = 16) {
  SceneConfig cfg;
  cfg.image_size = image_size;
  cfg.seed = seed;
  return generate_dataset(cfg, count);
}

Tensor eval_output(Model& m, const TaskId& t, const Tensor& x) {
  return m.forward(x, t, Mode::Eval)->value;
}

std::vector<AdaptationMode> all_modes() {
  return {AdaptationMode::FreezeEncoder, AdaptationMode::TaskSpecificBN,
          AdaptationMode::TaskSpecificConv, AdaptationMode::SingleTask,
          AdaptationMode::RCM, AdaptationMode::SeriesRA, AdaptationMode::ParallelRA};
}

}  // namespace

TEST_CASE("parameter_count: k=3, 64-channel, P=5 yields 57344 vs 184320 weights") {
  BackboneSpec spec = spec_of({{64, 64, 3}});
  ParamCount rcm = parameter_count(spec, 5, AdaptationMode::RCM);
  CHECK(rcm.shared_weights == 36864);
  CHECK(rcm.per_task_weights == 4096);
  CHECK(rcm.weights_total(5) == 57344);
  ParamCount single = parameter_count(spec, 5, AdaptationMode::SingleTask);
  CHECK(single.weights_total(5) == 184320);
}

TEST_CASE("parameter_count matches hand-derived forms on three architectures") {
  struct Arch {
    BackboneSpec spec;
  };
  std::vector<BackboneSpec> archs = {
      spec_of({{3, 8, 3}}),
      spec_of({{3, 8, 3}, {8, 16, 3}}),
      spec_of({{3, 4, 1}, {4, 8, 3}, {8, 8, 5}}),
  };
  for (const auto& spec : archs) {
    for (AdaptationMode mode : all_modes()) {
      int64_t sw = 0, sb = 0, sbn = 0, pw = 0, pb = 0, pbn = 0;
      for (const auto& l : spec.layers) {
        int64_t kw = static_cast<int64_t>(l.k) * l.k * l.in_ch * l.out_ch;
        int64_t c = l.out_ch;
        switch (mode) {
          case AdaptationMode::FreezeEncoder: sw += kw; sb += c; sbn += 2 * c; break;
          case AdaptationMode::TaskSpecificBN: sw += kw; sb += c; pbn += 2 * c; break;
          case AdaptationMode::TaskSpecificConv: pw += kw; pb += c; sbn += 2 * c; break;
          case AdaptationMode::SingleTask: pw += kw; pb += c; pbn += 2 * c; break;
          case AdaptationMode::RCM: sw += kw; pw += c * c; pb += c; pbn += 2 * c; break;
          case AdaptationMode::SeriesRA:
          case AdaptationMode::ParallelRA:
            sw += kw; sb += c; pw += c * c; pb += c; pbn += 2 * c; break;
        }
      }
      ParamCount pc = parameter_count(spec, 3, mode);
      CHECK(pc.shared_weights == sw);
      CHECK(pc.shared_bias == sb);
      CHECK(pc.shared_bn == sbn);
      CHECK(pc.per_task_weights == pw);
      CHECK(pc.per_task_bias == pb);
      CHECK(pc.per_task_bn == pbn);
    }
  }
}

TEST_CASE("parameter_count: total is affine in the task count") {
  BackboneSpec spec = spec_of({{3, 8, 3}, {8, 8, 3}});
  for (AdaptationMode mode : all_modes()) {
    ParamCount pc = parameter_count(spec, 1, mode);
    for (int p = 2; p <= 6; ++p) {
      CHECK(parameter_count(spec, p, mode).total(p) == pc.total(1) + (p - 1) * pc.per_task());
      CHECK(parameter_count(spec, p, mode).per_task() == pc.per_task());
    }
  }
}

TEST_CASE("trainable_parameters: exact name sets per mode on a 2-layer model") {
  BackboneSpec spec = spec_of({{3, 4, 3}, {4, 4, 3}});
  for (AdaptationMode mode : all_modes()) {
    Model m = frozen_model(spec, 17);
    TaskSpec t = benchmark_task("semseg");
    m.register_task(t, mode);
    std::set<std::string> names = trainable_parameters(m, "semseg", mode);

    std::set<std::string> expect = {"heads.semseg.weight", "heads.semseg.bias"};
    for (int i = 0; i < 2; ++i) {
      std::string base = "layers." + std::to_string(i);
      switch (mode) {
        case AdaptationMode::FreezeEncoder:
          break;
        case AdaptationMode::TaskSpecificBN:
          expect.insert({base + ".bn.semseg.gamma", base + ".bn.semseg.beta"});
          break;
        case AdaptationMode::TaskSpecificConv:
          expect.insert({base + ".task.semseg.weight", base + ".task.semseg.bias"});
          break;
        case AdaptationMode::SingleTask:
          expect.insert({base + ".task.semseg.weight", base + ".task.semseg.bias",
                         base + ".bn.semseg.gamma", base + ".bn.semseg.beta"});
          break;
        case AdaptationMode::RCM:
          expect.insert({base + ".rcm.task.semseg.v", base + ".rcm.task.semseg.g",
                         base + ".rcm.task.semseg.bias", base + ".bn.semseg.gamma",
                         base + ".bn.semseg.beta"});
          break;
        case AdaptationMode::SeriesRA:
          expect.insert({base + ".series.task.semseg.adapter",
                         base + ".series.task.semseg.adapter_bias",
                         base + ".bn.semseg.gamma", base + ".bn.semseg.beta"});
          break;
        case AdaptationMode::ParallelRA:
          expect.insert({base + ".parallel.task.semseg.adapter",
                         base + ".parallel.task.semseg.adapter_bias",
                         base + ".bn.semseg.gamma", base + ".bn.semseg.beta"});
          break;
      }
    }
    CHECK(names == expect);
    // never the shared bank or the pretrained weights
    for (const auto& n : names) {
      CHECK(n.find(".rcm.shared") == std::string::npos);
      CHECK(n.find("layers.0.weight") == std::string::npos);
    }
    // every listed name resolves to a real trainable parameter
    auto index = m.parameter_index();
    for (const auto& n : names) {
      REQUIRE(index.count(n));
      CHECK(index.at(n)->trainable);
    }
  }
}

TEST_CASE("register_task: demands a frozen backbone and unique ids") {
  BackboneSpec spec = spec_of({{3, 4, 3}});
  Model m(spec, 3);
  TaskSpec t = benchmark_task("edge");
  CHECK_THROWS_AS(m.register_task(t, AdaptationMode::RCM), Error);
  m.freeze_backbone();
  m.register_task(t, AdaptationMode::RCM);
  CHECK_THROWS_AS(m.register_task(t, AdaptationMode::RCM), Error);
  CHECK_THROWS_AS(m.forward(Tensor({1, 3, 16, 16}), "missing", Mode::Eval), Error);
}

TEST_CASE("task isolation: training B never perturbs A, in any mode") {
  Dataset ds = tiny_dataset(5, 6);
  Tensor probe({2, 3, 16, 16});
  Rng rng(9);
  for (float& v : probe.data) v = static_cast<float>(rng.next_uniform(0, 1));

  for (AdaptationMode mode : all_modes()) {
    BackboneSpec spec = spec_of({{3, 4, 3}, {4, 4, 3}});
    Model m = frozen_model(spec, 23);
    TaskSpec a = benchmark_task("edge");
    TaskSpec b = benchmark_task("semseg");
    m.register_task(a, mode);
    Tensor a_before = eval_output(m, "edge", probe);

    m.register_task(b, mode);
    CHECK(max_abs_diff(a_before, eval_output(m, "edge", probe)) == 0.0f);

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 3;
    cfg.seed = 31;
    train_task(m, "semseg", ds, cfg);
    CHECK(max_abs_diff(a_before, eval_output(m, "edge", probe)) == 0.0f);
  }
}

TEST_CASE("training an RCM task leaves the shared bank bit-identical") {
  BackboneSpec spec = spec_of({{3, 4, 3}});
  Model m = frozen_model(spec, 29);
  m.register_task(benchmark_task("saliency"), AdaptationMode::RCM);
  Tensor bank = m.layers()[0].rcm->shared().value;
  Tensor pretrained_w = m.layers()[0].weight.value;

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  Dataset ds = tiny_dataset(7, 8);
  train_task(m, "saliency", ds, cfg);
  CHECK(max_abs_diff(bank, m.layers()[0].rcm->shared().value) == 0.0f);
  CHECK(max_abs_diff(pretrained_w, m.layers()[0].weight.value) == 0.0f);
  // the modulator did move away from its identity initialization
  Tensor ident({4, 4});
  for (int i = 0; i < 4; ++i) ident.at2(i, i) = 1.0f;
  CHECK(max_abs_diff(m.layers()[0].rcm->fold_nff("saliency"), ident) > 0.0f);
}

TEST_CASE("train_task: deterministic given the seed, and the loss goes down") {
  BackboneSpec spec = spec_of({{3, 6, 3}});
  Dataset ds = tiny_dataset(11, 12);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.seed = 13;

  auto run = [&](uint32_t* hash_out) {
    Model m = frozen_model(spec, 37);
    m.register_task(benchmark_task("semseg"), AdaptationMode::RCM);
    auto hist = train_task(m, "semseg", ds, cfg);
    if (hash_out) *hash_out = model_state_hash(m);
    return hist;
  };
  uint32_t h1 = 0, h2 = 0;
  auto hist1 = run(&h1);
  auto hist2 = run(&h2);
  CHECK(h1 == h2);
  REQUIRE(hist1.size() == hist2.size());
  for (size_t i = 0; i < hist1.size(); ++i) CHECK(hist1[i].loss == hist2[i].loss);
  CHECK(hist1.back().loss < hist1.front().loss);
}

TEST_CASE("pretraining trains the shared path and classification improves") {
  BackboneSpec spec = spec_of({{3, 6, 3}, {6, 6, 3}});
  spec.layers[1].stride = 2;
  Dataset ds = tiny_dataset(17, 24);
  Model m(spec, 41);
  double acc_before = evaluate_task(m, kPretrainTask, ds);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.seed = 19;
  auto hist = train_task(m, kPretrainTask, ds, cfg);
  CHECK(hist.back().loss < hist.front().loss);
  CHECK(evaluate_task(m, kPretrainTask, ds) >= acc_before);
}

TEST_CASE("benchmark task dictionary: specs carry the documented recipe") {
  CHECK(benchmark_tasks().size() == 5);
  TaskSpec edge = benchmark_task("edge");
  CHECK(edge.loss == LossKind::WeightedBce);
  CHECK(edge.loss_weight == 50.0f);
  CHECK(edge.bce_pos_weight == doctest::Approx(0.95f));
  CHECK(edge.metric == MetricKind::F1Edge);
  CHECK_FALSE(edge.lower_better);

  TaskSpec normals = benchmark_task("normals");
  CHECK(normals.loss == LossKind::L1);
  CHECK(normals.loss_weight == 10.0f);
  CHECK(normals.lower_better);

  TaskSpec semseg = benchmark_task("semseg");
  CHECK(semseg.loss == LossKind::CrossEntropy);
  CHECK(semseg.head.out_channels == kSemsegClasses);
  CHECK_THROWS_AS(benchmark_task("unknown"), Error);
}

TEST_CASE("make_batch: layouts for classifier, class-map, and dense labels") {
  Dataset ds = tiny_dataset(23, 4);
  TaskSpec semseg = benchmark_task("semseg");
  Batch b = make_batch(ds, {0, 1, 2}, semseg);
  CHECK(b.images.shape == std::vector<int>({3, 3, 16, 16}));
  CHECK(b.labels.shape == std::vector<int>({3, 16, 16}));

  TaskSpec normals = benchmark_task("normals");
  Batch bn = make_batch(ds, {0, 1}, normals);
  CHECK(bn.labels.shape == std::vector<int>({2, 2, 16, 16}));

  TaskSpec edge = benchmark_task("edge");
  Batch be = make_batch(ds, {0}, edge);
  CHECK(be.labels.shape == std::vector<int>({1, 1, 16, 16}));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.base_lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  CHECK_NOTHROW(cfg.validate());
}
