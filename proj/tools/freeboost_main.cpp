// freeboost: train and inspect vision transformers with a frozen
// language-model block spliced between backbone and classifier.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fb/config.hpp"
#include "fb/gradcam.hpp"
#include "fb/train.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
};

fb::RunConfig load_config(const CommonArgs& args) {
  return fb::load_run_config(args.config_path, args.sets);
}

// Register-only model build: enough for name/shape/flag queries without
// drawing any weights.
template <typename S>
fb::ParamStore<S> registered_store(const fb::ModelSpec& spec) {
  fb::ParamStore<S> store;
  fb::register_model(store, spec);
  return store;
}

// A checkpoint must carry exactly the tensors the configured model
// registers, with matching shapes.
template <typename S>
void check_checkpoint_matches(const fb::ParamStore<S>& loaded, const fb::ModelSpec& spec) {
  fb::ParamStore<S> want = registered_store<S>(spec);
  for (const std::string& name : want.names()) {
    if (!loaded.has(name)) {
      throw fb::ConfigError("checkpoint is missing tensor " + name + " required by the model config");
    }
    if (loaded.at(name).shape() != want.at(name).shape()) {
      throw fb::ConfigError("checkpoint tensor " + name + " has shape " +
                            fb::shape_str(loaded.at(name).shape()) + ", model config needs " +
                            fb::shape_str(want.at(name).shape()));
    }
  }
  for (const std::string& name : loaded.names()) {
    if (!want.has(name)) {
      throw fb::ConfigError("checkpoint tensor " + name + " does not belong to the model config");
    }
  }
}

template <typename S>
int do_train(const fb::RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  fb::write_json_file(cfg.output_dir + "/resolved_config.json", cfg.resolved);
  fb::DatasetBundle data = fb::load_dataset(cfg.data);
  fb::check_data_model_consistency(data, cfg.model);
  ordered_json report =
      fb::train_model<S>(cfg.model, cfg.train, data, cfg.output_dir, cfg.resolved);
  fb::write_json_file(cfg.output_dir + "/metrics.json", report);
  std::cout << "wrote " << cfg.output_dir << "/metrics.json\n";
  return 0;
}

template <typename S>
int do_eval(const fb::RunConfig& cfg, const std::string& ckpt, const std::string& split_name) {
  fb::DatasetBundle data = fb::load_dataset(cfg.data);
  fb::check_data_model_consistency(data, cfg.model);
  fb::ParamStore<S> store = fb::load_checkpoint<S>(ckpt);
  check_checkpoint_matches(store, cfg.model);
  const fb::DatasetSplit& split = data.split(split_name);
  fb::EvalResult<S> r = fb::evaluate_split(cfg.model, store, data, split, cfg.train.batch_size);
  ordered_json j;
  j["acc"] = r.acc;
  j["auc"] = r.auc.value;
  j["per_class_auc"] = fb::auc_json(r.auc);
  std::cout << j.dump(2) << "\n";
  fs::create_directories(cfg.output_dir);
  fb::write_json_file(cfg.output_dir + "/eval_metrics.json", j);
  return 0;
}

template <typename S>
int do_params(const fb::RunConfig& cfg) {
  fb::ParamStore<S> store = registered_store<S>(cfg.model);
  struct Row {
    std::string module;
    fb::index_t total = 0, trainable = 0;
  };
  std::vector<Row> rows;
  for (const std::string& name : store.names()) {
    const std::string module = name.substr(0, name.find('.'));
    if (rows.empty() || rows.back().module != module) rows.push_back({module, 0, 0});
    const fb::index_t n = store.at(name).numel();
    rows.back().total += n;
    if (store.trainable(name)) rows.back().trainable += n;
  }
  std::printf("%-12s %14s %14s %14s\n", "module", "total", "trainable", "frozen");
  for (const Row& r : rows) {
    std::printf("%-12s %14lld %14lld %14lld\n", r.module.c_str(),
                static_cast<long long>(r.total), static_cast<long long>(r.trainable),
                static_cast<long long>(r.total - r.trainable));
  }
  std::printf("%-12s %14lld %14lld %14lld\n", "total",
              static_cast<long long>(store.total_params()),
              static_cast<long long>(store.trainable_params()),
              static_cast<long long>(store.frozen_params()));
  return 0;
}

template <typename S>
int do_gradcam(const fb::RunConfig& cfg, const std::string& ckpt, const std::string& split_name,
               fb::index_t index, const std::string& layer, int target) {
  fb::DatasetBundle data = fb::load_dataset(cfg.data);
  fb::check_data_model_consistency(data, cfg.model);
  fb::ParamStore<S> store = fb::load_checkpoint<S>(ckpt);
  check_checkpoint_matches(store, cfg.model);
  const fb::DatasetSplit& split = data.split(split_name);
  if (index < 0 || index >= split.size()) {
    throw fb::ConfigError("gradcam: index " + std::to_string(index) + " out of range, split " +
                          split_name + " has " + std::to_string(split.size()) + " samples");
  }
  fb::Tensor<S> batch = fb::make_batch<S>(data, split, {index});
  fb::GradCamResult cam = fb::grad_cam(cfg.model, store, batch, layer, target);

  // Grayscale base for the overlay; RGB collapses to the channel mean.
  const fb::Shape& is = split.images.shape();
  const fb::index_t h = is[1], w = is[2];
  std::vector<float> gray(static_cast<std::size_t>(h * w));
  const float* src = split.images.data();
  if (data.rgb) {
    const float* px = src + index * h * w * 3;
    for (fb::index_t i = 0; i < h * w; ++i) {
      gray[static_cast<std::size_t>(i)] = (px[i * 3] + px[i * 3 + 1] + px[i * 3 + 2]) / 3.0f;
    }
  } else {
    const float* px = src + index * h * w;
    for (fb::index_t i = 0; i < h * w; ++i) gray[static_cast<std::size_t>(i)] = px[i];
  }

  const std::string dir = cfg.output_dir + "/heatmaps";
  fs::create_directories(dir);
  const std::string stem = split_name + "_" + std::to_string(index);
  const std::string pgm = dir + "/cam_" + stem + ".pgm";
  const std::string ppm = dir + "/overlay_" + stem + ".ppm";
  fb::write_pnm(pgm, fb::cam_to_pgm(cam.cam));
  fb::write_pnm(ppm, fb::overlay_cam(gray, h, w, cam.cam));
  std::cout << "layer " << cam.layer << ", target class " << cam.target << "\n"
            << "wrote " << pgm << "\n"
            << "wrote " << ppm << "\n";
  return 0;
}

int do_gen_fixture(const std::string& kind, std::uint64_t seed, fb::index_t n_per_class,
                   fb::index_t n_classes, const std::string& out, const std::string& format,
                   bool stored) {
  fb::DatasetBundle bundle = fb::gen_synthetic(kind, n_per_class, n_classes, seed);
  if (format == "npz") {
    if (const fs::path parent = fs::path(out).parent_path(); !parent.empty()) {
      fs::create_directories(parent);
    }
    fb::write_npz_fixture(out, bundle, stored);
  } else if (format == "dir") {
    fs::create_directories(out);
    fb::write_array_dir_fixture(out, bundle);
  } else {
    throw fb::ConfigError("gen-fixture: format must be npz or dir, got \"" + format + "\"");
  }
  std::cout << "wrote " << out << " (" << kind << ", " << n_classes << " classes, " << n_per_class
            << "/class, seed " << seed << ")\n";
  return 0;
}

template <typename F>
int dispatch_precision(const std::string& precision, F&& fn) {
  if (precision == "double") return fn(double{});
  return fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vision transformer classification with a frozen LLM-block booster"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, params_args, cam_args;
  std::string eval_ckpt, eval_split = "test";
  std::string cam_ckpt, cam_split = "test", cam_layer;
  fb::index_t cam_index = 0;
  int cam_target = -1;
  std::string gen_kind = "blobs2d", gen_out, gen_format = "npz";
  std::uint64_t gen_seed = 0;
  fb::index_t gen_npc = 100, gen_ncls = 2;
  bool gen_stored = false;

  CLI::App* c_train = app.add_subcommand("train", "train a model from a JSON run config");
  c_train->add_option("config", train_args.config_path, "run config JSON")->required();
  c_train->add_option("--set", train_args.sets, "override: path.to.key=value")->take_all();

  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  c_eval->add_option("config", eval_args.config_path, "run config JSON")->required();
  c_eval->add_option("--checkpoint", eval_ckpt, "checkpoint file (.rlbk)")->required();
  c_eval->add_option("--split", eval_split, "train, val, or test (default test)");
  c_eval->add_option("--set", eval_args.sets, "override: path.to.key=value")->take_all();

  CLI::App* c_params = app.add_subcommand("params", "print parameter accounting for a config");
  c_params->add_option("config", params_args.config_path, "run config JSON")->required();
  c_params->add_option("--set", params_args.sets, "override: path.to.key=value")->take_all();

  CLI::App* c_cam = app.add_subcommand("gradcam", "write Grad-CAM heatmap files for one sample");
  c_cam->add_option("config", cam_args.config_path, "run config JSON")->required();
  c_cam->add_option("--checkpoint", cam_ckpt, "checkpoint file (.rlbk)")->required();
  c_cam->add_option("--index", cam_index, "sample index within the split (default 0)");
  c_cam->add_option("--split", cam_split, "train, val, or test (default test)");
  c_cam->add_option("--layer", cam_layer, "backbone tap, e.g. blocks.3 (default: last block)");
  c_cam->add_option("--target", cam_target, "class index (default: predicted class)");
  c_cam->add_option("--set", cam_args.sets, "override: path.to.key=value")->take_all();

  CLI::App* c_gen = app.add_subcommand("gen-fixture", "generate a synthetic dataset on disk");
  c_gen->add_option("--kind", gen_kind, "blobs2d or blobs3d (default blobs2d)");
  c_gen->add_option("--seed", gen_seed, "generator seed (default 0)");
  c_gen->add_option("--n-per-class", gen_npc, "samples per class (default 100)");
  c_gen->add_option("--n-classes", gen_ncls, "class count (default 2)");
  c_gen->add_option("--out", gen_out, "output path (.npz file or directory)")->required();
  c_gen->add_option("--format", gen_format, "npz or dir (default npz)");
  c_gen->add_flag("--stored", gen_stored, "write npz members uncompressed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_train->parsed()) {
      const fb::RunConfig cfg = load_config(train_args);
      return dispatch_precision(cfg.train.precision, [&](auto s) { return do_train<decltype(s)>(cfg); });
    }
    if (c_eval->parsed()) {
      const fb::RunConfig cfg = load_config(eval_args);
      return dispatch_precision(cfg.train.precision,
                                [&](auto s) { return do_eval<decltype(s)>(cfg, eval_ckpt, eval_split); });
    }
    if (c_params->parsed()) {
      const fb::RunConfig cfg = load_config(params_args);
      return dispatch_precision(cfg.train.precision, [&](auto s) { return do_params<decltype(s)>(cfg); });
    }
    if (c_cam->parsed()) {
      const fb::RunConfig cfg = load_config(cam_args);
      return dispatch_precision(cfg.train.precision, [&](auto s) {
        return do_gradcam<decltype(s)>(cfg, cam_ckpt, cam_split, cam_index, cam_layer, cam_target);
      });
    }
    if (c_gen->parsed()) {
      return do_gen_fixture(gen_kind, gen_seed, gen_npc, gen_ncls, gen_out, gen_format, gen_stored);
    }
  } catch (const fb::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
