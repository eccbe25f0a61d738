#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fb/config.hpp"
#include "fb/netpbm.hpp"
#include "fb/train.hpp"

using fb::index_t;
using nlohmann::ordered_json;

namespace {

const std::string kDir = "/tmp/fb_train_cli_test";

struct DirGuard {
  DirGuard() { (void)std::system(("rm -rf " + kDir + " && mkdir -p " + kDir).c_str()); }
} dir_guard;

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FREEBOOST_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

// Small enough to train in well under a second.
fb::ModelSpec tiny_spec() {
  fb::ModelSpec s;
  s.backbone.kind = fb::BackboneKind::vit2d;
  s.backbone.d_model = 16;
  s.backbone.depth = 1;
  s.backbone.n_heads = 2;
  s.backbone.patch = {7};
  s.backbone.input = {1, 28, 28};
  s.backbone.n_classes = 2;
  s.variant = fb::BoosterVariant::baseline;
  return s;
}

fb::TrainConfig tiny_train(int epochs) {
  fb::TrainConfig t;
  t.batch_size = 16;
  t.epochs = epochs;
  t.lr = 5e-4;
  t.seed = 3;
  return t;
}

ordered_json without_wall_clock(ordered_json j) {
  j.erase("wall_clock_s");
  return j;
}

ordered_json tiny_cli_config() {
  ordered_json j;
  j["model"] = {{"backbone",
                 {{"kind", "vit2d"},
                  {"d_model", 16},
                  {"depth", 1},
                  {"n_heads", 2},
                  {"patch", {7}},
                  {"input", {1, 28, 28}},
                  {"n_classes", 2}}},
                {"booster", {{"variant", "baseline"}}}};
  j["train"] = {{"batch_size", 16}, {"epochs", 2}, {"seed", 1}};
  j["data"] = {{"kind", "synthetic"}, {"synthetic", {{"kind", "blobs2d"}, {"n_per_class", 16}}}};
  return j;
}

void write_json(const std::string& path, const ordered_json& j) { fb::write_json_file(path, j); }

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

TEST_CASE("parse_run_config: defaults, presets, precedence") {
  // geometry has no default: it must come from a preset or explicit keys
  CHECK_THROWS_WITH_AS(fb::parse_run_config(ordered_json::object()),
                       doctest::Contains("input"), fb::ConfigError);

  // a minimal document with only geometry materialises every other default
  ordered_json minimal;
  minimal["model"] = {{"backbone", {{"patch", {4}}, {"input", {1, 28, 28}}}}};
  fb::RunConfig def = fb::parse_run_config(minimal);
  CHECK(def.model.backbone.kind == fb::BackboneKind::vit2d);
  CHECK(def.model.backbone.d_model == 64);
  CHECK(def.model.variant == fb::BoosterVariant::baseline);
  CHECK(def.train.lr == 5e-4);
  CHECK(def.output_dir == "run");

  // preset fills the model, explicit keys override it
  ordered_json doc;
  doc["model"] = {{"preset", "vit-tiny"}, {"backbone", {{"depth", 2}, {"n_classes", 4}}}};
  fb::RunConfig cfg = fb::parse_run_config(doc);
  CHECK(cfg.model.backbone.depth == 2);          // explicit wins
  CHECK(cfg.model.backbone.n_classes == 4);      // explicit wins
  CHECK(cfg.model.backbone.d_model == 64);       // from preset
  CHECK(cfg.model.llm.d_ffn == 172);             // from preset
  CHECK(cfg.model.backbone.patch == std::vector<index_t>{4});

  // 3D presets lower the default learning rate; explicit lr still wins
  ordered_json d3;
  d3["model"] = {{"preset", "vit3d-tiny"}};
  CHECK(fb::parse_run_config(d3).train.lr == 1e-5);
  d3["train"] = {{"lr", 7e-4}};
  CHECK(fb::parse_run_config(d3).train.lr == 7e-4);

  ordered_json vs;
  vs["model"] = {{"preset", "vit-s"}};
  fb::RunConfig svit = fb::parse_run_config(vs);
  CHECK(svit.model.backbone.d_model == 384);
  CHECK(svit.model.llm.d_llm == 4096);

  ordered_json bad;
  bad["model"] = {{"preset", "resnet"}};
  CHECK_THROWS_WITH_AS(fb::parse_run_config(bad), doctest::Contains("unknown preset"),
                       fb::ConfigError);
}

TEST_CASE("parse_run_config: unknown keys fail naming their dotted path") {
  ordered_json top;
  top["outputs"] = "x";
  CHECK_THROWS_WITH_AS(fb::parse_run_config(top), doctest::Contains("unknown key \"outputs\""),
                       fb::ConfigError);

  ordered_json tr;
  tr["train"] = {{"lrate", 0.1}};
  CHECK_THROWS_WITH_AS(fb::parse_run_config(tr), doctest::Contains("unknown key \"train.lrate\""),
                       fb::ConfigError);

  ordered_json bb;
  bb["model"] = {{"backbone", {{"dmodel", 32}}}};
  CHECK_THROWS_WITH_AS(fb::parse_run_config(bb),
                       doctest::Contains("unknown key \"model.backbone.dmodel\""),
                       fb::ConfigError);

  ordered_json ty;
  ty["train"] = {{"lr", "fast"}};
  CHECK_THROWS_WITH_AS(fb::parse_run_config(ty), doctest::Contains("train.lr"), fb::ConfigError);

  ordered_json be;
  be["model"] = {{"preset", "vit-tiny"}};
  be["train"] = {{"betas", {0.5}}};
  CHECK_THROWS_WITH_AS(fb::parse_run_config(be), doctest::Contains("train.betas"),
                       fb::ConfigError);
  be["train"] = {{"betas", {0.5, 0.7}}};
  fb::RunConfig ok = fb::parse_run_config(be);
  CHECK(ok.train.beta1 == 0.5);
  CHECK(ok.train.beta2 == 0.7);
}

TEST_CASE("parse_run_config: resolved echo reparses to itself") {
  ordered_json doc;
  doc["model"] = {{"preset", "vit-tiny"}, {"booster", {{"variant", "r-llm"}}}};
  doc["train"] = {{"epochs", 7}, {"schedule", "cosine"}, {"warmup_epochs", 2}};
  doc["data"] = {{"synthetic", {{"n_classes", 3}}}};
  doc["output_dir"] = kDir + "/echo";
  fb::RunConfig cfg = fb::parse_run_config(doc);
  fb::RunConfig again = fb::parse_run_config(cfg.resolved);
  CHECK(again.resolved == cfg.resolved);
  CHECK(again.model.variant == fb::BoosterVariant::r_llm);
  CHECK(again.train.epochs == 7);
}

TEST_CASE("apply_set_override: JSON values, string fallback, path building") {
  ordered_json root = ordered_json::object();
  fb::apply_set_override(root, "train.lr=0.001");
  CHECK(root["train"]["lr"] == 0.001);
  fb::apply_set_override(root, "data.kind=npz");
  CHECK(root["data"]["kind"] == "npz");  // not valid JSON, falls back to string
  fb::apply_set_override(root, "model.booster.variant=r-llm");
  CHECK(root["model"]["booster"]["variant"] == "r-llm");
  fb::apply_set_override(root, "model.backbone.patch=[4]");
  CHECK(root["model"]["backbone"]["patch"] == ordered_json::array({4}));
  fb::apply_set_override(root, "train.lr=0.01");  // later assignment wins
  CHECK(root["train"]["lr"] == 0.01);

  CHECK_THROWS_WITH_AS(fb::apply_set_override(root, "no_equals"),
                       doctest::Contains("path.to.key=value"), fb::ConfigError);
  CHECK_THROWS_WITH_AS(fb::apply_set_override(root, "a..b=1"),
                       doctest::Contains("empty segment"), fb::ConfigError);
  CHECK_THROWS_WITH_AS(fb::apply_set_override(root, "train.lr.deeper=1"),
                       doctest::Contains("non-object"), fb::ConfigError);
}

TEST_CASE("load_run_config: file plus overrides") {
  const std::string path = kDir + "/cfg_load.json";
  write_json(path, tiny_cli_config());
  fb::RunConfig cfg = fb::load_run_config(path, {"train.epochs=5", "output_dir=" + kDir + "/ovr"});
  CHECK(cfg.train.epochs == 5);
  CHECK(cfg.output_dir == kDir + "/ovr");

  CHECK_THROWS_WITH_AS(fb::load_run_config(kDir + "/nope.json", {}),
                       doctest::Contains("cannot open"), fb::ConfigError);
  const std::string broken = kDir + "/broken.json";
  std::ofstream(broken) << "{ not json";
  CHECK_THROWS_WITH_AS(fb::load_run_config(broken, {}), doctest::Contains("not valid JSON"),
                       fb::ConfigError);
}

TEST_CASE("dataset/model consistency checks fire on real mismatches") {
  fb::DataConfig dc;
  dc.n_per_class = 10;
  fb::DatasetBundle data = fb::load_dataset(dc);
  CHECK(data.train.images.shape() == fb::Shape{14, 28, 28});

  fb::ModelSpec ok = tiny_spec();
  CHECK_NOTHROW(fb::check_data_model_consistency(data, ok));

  fb::ModelSpec classes = tiny_spec();
  classes.backbone.n_classes = 5;
  CHECK_THROWS_WITH_AS(fb::check_data_model_consistency(data, classes),
                       doctest::Contains("n_classes"), fb::ConfigError);

  fb::ModelSpec shape = tiny_spec();
  shape.backbone.input = {1, 32, 32};
  CHECK_THROWS_WITH_AS(fb::check_data_model_consistency(data, shape),
                       doctest::Contains("input"), fb::ConfigError);

  fb::DataConfig d3;
  d3.synthetic_kind = "blobs3d";
  d3.n_per_class = 10;
  fb::DatasetBundle vol = fb::load_dataset(d3);
  CHECK_THROWS_WITH_AS(fb::check_data_model_consistency(vol, ok), doctest::Contains("3D"),
                       fb::ConfigError);

  // resize flows through load_dataset for 2D data only
  fb::DataConfig rz = dc;
  rz.resize = {32, 32};
  CHECK(fb::load_dataset(rz).train.images.shape() == fb::Shape{14, 32, 32});
  d3.resize = {32, 32};
  CHECK_THROWS_WITH_AS(fb::load_dataset(d3), doctest::Contains("2D"), fb::ConfigError);

  fb::DataConfig bad_kind;
  bad_kind.kind = "sql";
  CHECK_THROWS_AS(bad_kind.validate(), fb::ConfigError);
  fb::DataConfig no_path;
  no_path.kind = "npz";
  CHECK_THROWS_WITH_AS(no_path.validate(), doctest::Contains("path"), fb::ConfigError);
  fb::DataConfig bad_resize;
  bad_resize.resize = {1, 2, 3};
  CHECK_THROWS_AS(bad_resize.validate(), fb::ConfigError);
}

// ---------------------------------------------------------------------------
// train_model
// ---------------------------------------------------------------------------

TEST_CASE("train_model: report schema, checkpoints, reproducibility") {
  fb::DatasetBundle data = fb::gen_synthetic("blobs2d", 20, 2, 9);
  const fb::ModelSpec spec = tiny_spec();
  const fb::TrainConfig tcfg = tiny_train(3);
  const std::string out = kDir + "/train_lib";
  (void)std::system(("rm -rf " + out + " && mkdir -p " + out).c_str());

  ordered_json echo = {{"note", "unit"}};
  ordered_json report = fb::train_model<float>(spec, tcfg, data, out, echo, true);

  // schema: exactly these keys, in order
  std::vector<std::string> keys;
  for (auto it = report.begin(); it != report.end(); ++it) keys.push_back(it.key());
  CHECK(keys == std::vector<std::string>{"config", "param_counts", "epochs", "test",
                                         "wall_clock_s"});
  CHECK(report["config"] == echo);
  CHECK(report["param_counts"]["total"].get<index_t>() ==
        report["param_counts"]["trainable"].get<index_t>() +
            report["param_counts"]["frozen"].get<index_t>());
  REQUIRE(report["epochs"].size() == 3);
  for (const auto& row : report["epochs"]) {
    std::vector<std::string> rk;
    for (auto it = row.begin(); it != row.end(); ++it) rk.push_back(it.key());
    CHECK(rk == std::vector<std::string>{"epoch", "train_loss", "val_acc", "val_auc"});
  }
  CHECK(report["epochs"][0]["epoch"] == 0);
  CHECK(report["test"].contains("acc"));
  CHECK(report["test"].contains("auc"));
  CHECK(report["test"].contains("per_class_auc"));
  CHECK(report["wall_clock_s"].get<double>() > 0.0);

  // checkpoints land on disk and load
  fb::ParamStore<float> best = fb::load_checkpoint<float>(out + "/ckpt_best.rlbk");
  fb::ParamStore<float> last = fb::load_checkpoint<float>(out + "/ckpt_last.rlbk");
  CHECK(best.names() == last.names());
  CHECK(best.total_params() == report["param_counts"]["total"].get<index_t>());

  // the best checkpoint reproduces the reported test metrics
  fb::EvalResult<float> re = fb::evaluate_split(spec, best, data, data.test, tcfg.batch_size);
  CHECK(re.acc == report["test"]["acc"].get<double>());
  CHECK(re.auc.value == report["test"]["auc"].get<double>());

  // identical seeds give identical reports, wall clock aside
  ordered_json again = fb::train_model<float>(spec, tcfg, data, out, echo, true);
  CHECK(without_wall_clock(again) == without_wall_clock(report));

  // changing the seed changes the trajectory
  fb::TrainConfig other = tcfg;
  other.seed = 4;
  ordered_json moved = fb::train_model<float>(spec, other, data, out, echo, true);
  CHECK(without_wall_clock(moved) != without_wall_clock(report));
}

TEST_CASE("train_model: empty splits are configuration errors") {
  fb::DatasetBundle data = fb::gen_synthetic("blobs2d", 20, 2, 9);
  fb::DatasetBundle hollow = data;
  hollow.val = fb::DatasetSplit{};
  CHECK_THROWS_WITH_AS(
      fb::train_model<float>(tiny_spec(), tiny_train(1), hollow, kDir + "/x", {}, true),
      doctest::Contains("validation split is empty"), fb::ConfigError);

  CHECK_THROWS_WITH_AS(fb::evaluate_split(tiny_spec(), fb::build_model<float>(tiny_spec(), 0),
                                          data, fb::DatasetSplit{}, 8),
                       doctest::Contains("split is empty"), fb::Error);
}

// ---------------------------------------------------------------------------
// CLI binary
// ---------------------------------------------------------------------------

TEST_CASE("cli: exit codes for help, bad invocations, bad configs") {
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("train --help") == 0);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("") == 2);           // a subcommand is required
  CHECK(run_cli("train") == 2);      // config argument is required
  CHECK(run_cli("train /tmp/fb_no_such_config.json") == 2);

  const std::string bad = kDir + "/cli_bad.json";
  ordered_json j = tiny_cli_config();
  j["train"]["lrate"] = 0.1;
  write_json(bad, j);
  CHECK(run_cli("train " + bad) == 2);

  const std::string neg = kDir + "/cli_neg.json";
  ordered_json k = tiny_cli_config();
  k["train"]["epochs"] = 0;
  write_json(neg, k);
  CHECK(run_cli("train " + neg) == 2);
}

TEST_CASE("cli: train, eval, params, gradcam, gen-fixture round trip") {
  const std::string cfg_path = kDir + "/cli_cfg.json";
  const std::string out = kDir + "/cli_run";
  write_json(cfg_path, tiny_cli_config());

  REQUIRE(run_cli("train " + cfg_path + " --set output_dir=" + out) == 0);

  std::ifstream mf(out + "/metrics.json");
  REQUIRE(mf.good());
  ordered_json metrics = ordered_json::parse(mf);
  CHECK(metrics["epochs"].size() == 2);

  std::ifstream rf(out + "/resolved_config.json");
  REQUIRE(rf.good());
  ordered_json resolved = ordered_json::parse(rf);
  CHECK(resolved["model"]["backbone"]["kind"] == "vit2d");
  CHECK(resolved["output_dir"] == out);

  // eval of the best checkpoint reproduces the reported test block
  REQUIRE(run_cli("eval " + cfg_path + " --checkpoint " + out + "/ckpt_best.rlbk --set output_dir=" +
                  out) == 0);
  std::ifstream ef(out + "/eval_metrics.json");
  REQUIRE(ef.good());
  ordered_json eval = ordered_json::parse(ef);
  CHECK(eval["acc"] == metrics["test"]["acc"]);
  CHECK(eval["auc"] == metrics["test"]["auc"]);

  // eval against a config whose model does not match the checkpoint
  CHECK(run_cli("eval " + cfg_path + " --checkpoint " + out +
                "/ckpt_best.rlbk --set model.backbone.d_model=32") == 2);

  CHECK(run_cli("params " + cfg_path) == 0);

  // heatmap files parse back at the expected geometries
  REQUIRE(run_cli("gradcam " + cfg_path + " --checkpoint " + out +
                  "/ckpt_best.rlbk --index 1 --set output_dir=" + out) == 0);
  fb::PnmImage pgm = fb::read_pnm(out + "/heatmaps/cam_test_1.pgm");
  CHECK(pgm.channels == 1);
  CHECK(pgm.height == 4);  // 28 / patch 7
  CHECK(pgm.width == 4);
  fb::PnmImage ppm = fb::read_pnm(out + "/heatmaps/overlay_test_1.ppm");
  CHECK(ppm.channels == 3);
  CHECK(ppm.height == 28);
  CHECK(ppm.width == 28);

  // fixture generation in both formats, reloadable
  const std::string npz = kDir + "/cli_fix.npz";
  REQUIRE(run_cli("gen-fixture --kind blobs2d --n-per-class 12 --n-classes 3 --seed 5 --out " +
                  npz) == 0);
  fb::DatasetBundle fl = fb::load_npz(npz);
  CHECK(fl.n_classes == 3);
  CHECK(fl.train.size() == 24);  // 8 per class

  const std::string dirfix = kDir + "/cli_fix_dir";
  REQUIRE(run_cli("gen-fixture --kind blobs2d --n-per-class 12 --n-classes 3 --seed 5 --format dir --out " +
                  dirfix) == 0);
  fb::DatasetBundle fd = fb::load_array_dir(dirfix);
  CHECK(fd.train.images.vec() == fl.train.images.vec());

  CHECK(run_cli("gen-fixture --out /tmp/x.npz --format tar") == 2);

  // training straight off the generated npz file
  ordered_json npz_cfg = tiny_cli_config();
  npz_cfg["model"]["backbone"]["n_classes"] = 3;
  npz_cfg["data"] = {{"kind", "npz"}, {"path", npz}};
  const std::string npz_cfg_path = kDir + "/cli_npz_cfg.json";
  write_json(npz_cfg_path, npz_cfg);
  CHECK(run_cli("train " + npz_cfg_path + " --set output_dir=" + kDir + "/cli_npz_run") == 0);
}
