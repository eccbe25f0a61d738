#pragma once

// Training loop: seeded shuffling, AdamW with optional warmup and cosine
// decay, per-epoch validation, best-checkpoint selection on validation AUC,
// and a metrics report that is bitwise reproducible for a fixed seed (wall
// clock aside).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fb/booster.hpp"
#include "fb/data.hpp"
#include "fb/metrics.hpp"
#include "fb/optim.hpp"
#include "fb/rng.hpp"

namespace fb {

struct TrainConfig {
  int batch_size = 128;
  int epochs = 100;
  double lr = 5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::string schedule = "constant";  // constant | cosine
  int warmup_epochs = 0;
  double grad_clip = 0.0;  // 0 disables clipping
  int checkpoint_every = 0;  // extra periodic saves; 0 disables
  std::string precision = "single";  // single | double

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (lr <= 0) throw ConfigError("train: lr must be positive");
    if (schedule != "constant" && schedule != "cosine") {
      throw ConfigError("train: unknown schedule \"" + schedule + "\"");
    }
    if (warmup_epochs < 0 || (warmup_epochs != 0 && warmup_epochs >= epochs)) {
      throw ConfigError("train: warmup_epochs must be in [0, epochs)");
    }
    if (precision != "single" && precision != "double") {
      throw ConfigError("train: precision must be single or double");
    }
  }
};

// Linear warmup to the base rate, then constant or half-cosine decay.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < cfg.warmup_epochs) {
    return cfg.lr * static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
  }
  if (cfg.schedule == "cosine") {
    const int span = cfg.epochs - cfg.warmup_epochs;
    const double t = span <= 1 ? 0.0
                               : static_cast<double>(epoch - cfg.warmup_epochs) /
                                     static_cast<double>(span - 1);
    return cfg.lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
  }
  return cfg.lr;
}

template <typename S>
struct EvalResult {
  double loss = 0.0;
  double acc = 0.0;
  AucReport auc;
};

// Fixed-order pass over one split: batches of batch_size in index order,
// logits concatenated before the metrics so batch boundaries cannot affect
// them.
template <typename S>
EvalResult<S> evaluate_split(const ModelSpec& spec, const ParamStore<S>& store,
                             const DatasetBundle& data, const DatasetSplit& split,
                             int batch_size) {
  const index_t N = split.size();
  if (N == 0) throw Error("eval: split is empty");
  const index_t K = data.n_classes;
  std::vector<S> all_logits(static_cast<std::size_t>(N * K));
  double loss_sum = 0.0;
  for (index_t start = 0; start < N; start += batch_size) {
    const index_t stop = std::min<index_t>(N, start + batch_size);
    std::vector<index_t> idx(static_cast<std::size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor<S> batch = make_batch<S>(data, split, idx);
    Tensor<S> logits = full_forward(spec, store, batch);
    std::copy(logits.vec().begin(), logits.vec().end(),
              all_logits.begin() + static_cast<std::size_t>(start * K));
    loss_sum +=
        static_cast<double>(cross_entropy(logits, gather_labels(split, idx)).item()) *
        static_cast<double>(stop - start);
  }
  Tensor<S> logits({N, K}, std::move(all_logits));
  EvalResult<S> r;
  r.loss = loss_sum / static_cast<double>(N);
  r.acc = accuracy(logits, split.labels);
  r.auc = auc_from_logits(logits, split.labels);
  return r;
}

inline nlohmann::ordered_json param_counts_json(index_t total, index_t trainable, index_t frozen) {
  nlohmann::ordered_json j;
  j["total"] = total;
  j["trainable"] = trainable;
  j["frozen"] = frozen;
  return j;
}

inline nlohmann::ordered_json auc_json(const AucReport& auc) {
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& v : auc.per_class) {
    if (v.has_value()) {
      per.push_back(*v);
    } else {
      per.push_back(nullptr);
    }
  }
  return per;
}

// Runs the full loop and returns the metrics report. config_echo lands under
// "config" in the report so a run is self-describing.
template <typename S>
nlohmann::ordered_json train_model(const ModelSpec& spec, const TrainConfig& tcfg,
                                   const DatasetBundle& data, const std::string& output_dir,
                                   const nlohmann::ordered_json& config_echo,
                                   bool quiet = false) {
  tcfg.validate();
  if (data.val.size() == 0) throw ConfigError("train: validation split is empty");
  if (data.train.size() == 0) throw ConfigError("train: training split is empty");
  const auto t_start = std::chrono::steady_clock::now();

  ParamStore<S> store = build_model<S>(spec, tcfg.seed);
  AdamWConfig ocfg;
  ocfg.lr = tcfg.lr;
  ocfg.beta1 = tcfg.beta1;
  ocfg.beta2 = tcfg.beta2;
  ocfg.eps = tcfg.adam_eps;
  ocfg.weight_decay = tcfg.weight_decay;
  AdamW<S> opt(store, ocfg);

  Rng shuffle_rng(tcfg.seed ^ 0x9e3779b97f4a7c15ull);
  const index_t n_train = data.train.size();
  std::vector<index_t> order(static_cast<std::size_t>(n_train));

  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  double best_auc = -1.0;
  int best_epoch = -1;
  std::map<std::string, std::vector<S>> best_params;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(tcfg, epoch);
    std::iota(order.begin(), order.end(), index_t{0});
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    index_t hit_sum = 0;
    for (index_t start = 0; start < n_train; start += tcfg.batch_size) {
      const index_t stop = std::min<index_t>(n_train, start + tcfg.batch_size);
      const std::vector<index_t> idx(order.begin() + start, order.begin() + stop);
      Tensor<S> batch = make_batch<S>(data, data.train, idx);
      const std::vector<index_t> labels = gather_labels(data.train, idx);

      Tape<S> tape;
      Tensor<S> loss;
      Tensor<S> logits;
      {
        TapeScope<S> scope(tape);
        logits = full_forward(spec, store, batch);
        loss = cross_entropy(logits, labels);
      }
      tape.backward(loss);
      if (tcfg.grad_clip > 0.0) clip_global_norm(store, tcfg.grad_clip);
      opt.step(lr);
      store.zero_grads();

      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(stop - start);
      const S* lp = logits.data();
      const index_t K = logits.shape()[1];
      for (index_t b = 0; b < stop - start; ++b) {
        index_t arg = 0;
        for (index_t k = 1; k < K; ++k) {
          if (lp[b * K + k] > lp[b * K + arg]) arg = k;
        }
        if (arg == labels[static_cast<std::size_t>(b)]) ++hit_sum;
      }
    }

    EvalResult<S> val = evaluate_split(spec, store, data, data.val, tcfg.batch_size);
    const double train_loss = loss_sum / static_cast<double>(n_train);
    const double train_acc = static_cast<double>(hit_sum) / static_cast<double>(n_train);
    nlohmann::ordered_json row;
    row["epoch"] = epoch;
    row["train_loss"] = train_loss;
    row["val_acc"] = val.acc;
    row["val_auc"] = val.auc.value;
    epochs.push_back(row);
    if (!quiet) {
      std::cout << "epoch " << (epoch + 1) << "/" << tcfg.epochs << "  lr " << lr
                << "  train_loss " << train_loss << "  train_acc " << train_acc << "  val_acc "
                << val.acc << "  val_auc " << val.auc.value << "\n";
    }

    // >= so AUC ties resolve to the most recent epoch: ranking saturates
    // before the loss finishes calibrating the argmax.
    if (val.auc.value >= best_auc) {
      best_auc = val.auc.value;
      best_epoch = epoch;
      best_params.clear();
      for (const std::string& name : store.names()) best_params[name] = store.at(name).vec();
    }
    if (tcfg.checkpoint_every > 0 && (epoch + 1) % tcfg.checkpoint_every == 0) {
      save_checkpoint(store, output_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".rlbk");
    }
  }

  save_checkpoint(store, output_dir + "/ckpt_last.rlbk");
  for (auto& [name, values] : best_params) store.at(name).vec() = values;
  save_checkpoint(store, output_dir + "/ckpt_best.rlbk");

  EvalResult<S> test = evaluate_split(spec, store, data, data.test, tcfg.batch_size);
  const auto t_end = std::chrono::steady_clock::now();

  if (!quiet) {
    std::cout << "best epoch " << (best_epoch + 1) << " (val_auc " << best_auc << ")  test_acc "
              << test.acc << "  test_auc " << test.auc.value << "\n";
  }

  nlohmann::ordered_json report;
  report["config"] = config_echo;
  report["param_counts"] =
      param_counts_json(store.total_params(), store.trainable_params(), store.frozen_params());
  report["epochs"] = epochs;
  nlohmann::ordered_json tj;
  tj["acc"] = test.acc;
  tj["auc"] = test.auc.value;
  tj["per_class_auc"] = auc_json(test.auc);
  report["test"] = tj;
  report["wall_clock_s"] =
      std::chrono::duration_cast<std::chrono::duration<double>>(t_end - t_start).count();
  return report;
}

inline void write_json_file(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out.good()) throw IoError("write error on " + path);
}

}  // namespace fb
