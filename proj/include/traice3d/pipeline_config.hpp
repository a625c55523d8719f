#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "traice3d/losses.hpp"
#include "traice3d/model.hpp"
#include "traice3d/optim.hpp"
#include "traice3d/synth.hpp"

namespace traice3d {

struct TrainConfig {
  Stage stage = Stage::soma;
  int epochs = 200;
  int batch_size = 64;
  int accumulation = 2;
  double peak_lr = 1e-4;
  int warmup_epochs = 50;
  double final_lr = 1e-6;
  LossWeights soma_weights = traice3d::soma_weights;
  LossWeights branch_weights = traice3d::branch_weights;
  FocalParams focal{};
  SkeletonConfig skeleton{};
  AdamWConfig optimizer{};
  AugmentSet augment = AugmentSet::all();
  std::uint64_t seed = 0;
  /// Branch-stage crop extent; also used for per-soma crops at inference.
  Extent3 crop{16, 64, 64};
  /// Jitter of branch-stage crops as a fraction of the crop extent.
  double crop_jitter = 0.1;

  const LossWeights& weights() const { return stage == Stage::soma ? soma_weights : branch_weights; }
  void validate() const;
};

/// Desk-scale schedule: 60 epochs with 15 warmup, batch 4, accumulation 2.
TrainConfig desk_train_config(Stage stage);

struct DatasetConfig {
  int volumes = 200;
  /// Extra two-cell volumes with overlapping cells, generated after the rest.
  int overlap_volumes = 0;
  double train_fraction = 0.80, test_fraction = 0.15, validation_fraction = 0.05;
  /// 0 for a single split; k >= 2 enables k-fold cross-validation.
  int folds = 0;
  void validate() const;
};

struct InferenceConfig {
  double tile_overlap = 0.5;
  double threshold = 0.5;
  Index min_soma_size = 20;
  double match_radius = 5.0;
  void validate() const;
};

struct PipelineConfig {
  ModelConfig model{};
  SynthConfig data{};
  DatasetConfig dataset{};
  TrainConfig train = desk_train_config(Stage::soma);
  InferenceConfig inference{};
};

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const DatasetConfig& c);
nlohmann::json to_json(const InferenceConfig& c);
nlohmann::json to_json(const PipelineConfig& c);

// Missing fields keep their defaults. Errors are std::invalid_argument with a
// message that starts with the field path, e.g. "train.warmup_epochs: ...".
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base,
                                   const std::string& path = "train");
DatasetConfig dataset_config_from_json(const nlohmann::json& j, const std::string& path = "dataset");
InferenceConfig inference_config_from_json(const nlohmann::json& j, const std::string& path = "inference");
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

}  // namespace traice3d
