#pragma once

// JSON run configuration: presets, strict unknown-key rejection, dotted-path
// overrides, and full default materialisation into a resolved echo.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fb/booster.hpp"
#include "fb/data.hpp"
#include "fb/train.hpp"

namespace fb {

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | npz | dir
  std::string path;                // npz file or array directory
  std::string synthetic_kind = "blobs2d";
  index_t n_per_class = 100;
  index_t n_classes = 2;
  std::uint64_t seed = 0;
  std::vector<index_t> resize;  // empty = keep; {H, W} for 2D data

  void validate() const;
};

struct RunConfig {
  ModelSpec model;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "run";
  nlohmann::ordered_json resolved;  // every field, defaults included
};

// Named model fragments; explicit config keys win over preset values.
nlohmann::ordered_json preset_fragment(const std::string& name);

// `path.to.key=value` applied to the raw document before parsing. Values
// parse as JSON when they can, else as strings.
void apply_set_override(nlohmann::ordered_json& root, const std::string& assignment);

// Strict parse: any key outside the schema fails, naming its JSON path.
RunConfig parse_run_config(const nlohmann::ordered_json& raw);

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

// Dispatch on data.kind, then the optional bilinear resize.
DatasetBundle load_dataset(const DataConfig& cfg);

// Dataset dims and class count must agree with the model config.
void check_data_model_consistency(const DatasetBundle& data, const ModelSpec& model);

}  // namespace fb
