#include "traice3d/pipeline_config.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "traice3d/json_fields.hpp"

namespace traice3d {

using json_fields::field;

namespace {

void check(bool ok, const std::string& field_path, const std::string& what) {
  if (!ok) throw std::invalid_argument(field_path + ": " + what);
}

nlohmann::json weights_json(const LossWeights& w) {
  return {{"focal", w.focal}, {"dice", w.dice}, {"cldice", w.cldice}};
}

LossWeights weights_from_json(const nlohmann::json& j, LossWeights w, const std::string& path) {
  if (!j.is_object()) throw std::invalid_argument(path + ": expected an object");
  json_fields::reject_unknown(j, {"focal", "dice", "cldice"}, path);
  w.focal = field(j, "focal", w.focal, path);
  w.dice = field(j, "dice", w.dice, path);
  w.cldice = field(j, "cldice", w.cldice, path);
  return w;
}

}  // namespace

void TrainConfig::validate() const {
  check(epochs >= 1, "train.epochs", "must be >= 1");
  check(warmup_epochs >= 0 && warmup_epochs < epochs, "train.warmup_epochs",
        "must lie in [0, epochs) (" + std::to_string(warmup_epochs) + " vs epochs " +
            std::to_string(epochs) + ")");
  check(batch_size >= 1, "train.batch_size", "must be >= 1");
  check(accumulation >= 1, "train.accumulation", "must be >= 1");
  check(peak_lr > 0.0 && std::isfinite(peak_lr), "train.peak_lr", "must be positive");
  check(final_lr > 0.0 && std::isfinite(final_lr), "train.final_lr", "must be positive");
  check(final_lr <= peak_lr, "train.final_lr", "must not exceed peak_lr");
  for (const auto* w : {&soma_weights, &branch_weights})
    check(w->focal >= 0 && w->dice >= 0 && w->cldice >= 0 && w->focal + w->dice + w->cldice > 0,
          w == &soma_weights ? "train.soma_weights" : "train.branch_weights",
          "weights must be >= 0 and not all zero");
  try {
    focal.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("train.focal: ") + e.what());
  }
  check(skeleton.iterations >= 1, "train.skeleton_iterations", "must be >= 1");
  check(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1,
        "train.optimizer", "betas must lie in [0, 1)");
  check(optimizer.eps > 0 && optimizer.weight_decay >= 0, "train.optimizer",
        "eps must be positive and weight_decay >= 0");
  check(crop.d > 0 && crop.h > 0 && crop.w > 0, "train.crop", "extents must be positive");
  check(crop_jitter >= 0.0 && crop_jitter < 0.5, "train.crop_jitter", "must lie in [0, 0.5)");
}

TrainConfig desk_train_config(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  c.epochs = 60;
  c.warmup_epochs = 15;
  c.batch_size = 4;
  c.accumulation = 2;
  c.peak_lr = 1e-3;
  c.final_lr = 1e-5;
  return c;
}

void DatasetConfig::validate() const {
  check(volumes >= 1, "dataset.volumes", "must be >= 1");
  check(overlap_volumes >= 0, "dataset.overlap_volumes", "must be >= 0");
  check(train_fraction > 0 && test_fraction >= 0 && validation_fraction >= 0, "dataset.train_fraction",
        "fractions must be non-negative and train_fraction positive");
  check(std::abs(train_fraction + test_fraction + validation_fraction - 1.0) < 1e-9,
        "dataset.train_fraction", "fractions must sum to 1");
  check(folds == 0 || folds >= 2, "dataset.folds", "must be 0 or >= 2");
}

void InferenceConfig::validate() const {
  check(tile_overlap >= 0.0 && tile_overlap < 1.0, "inference.tile_overlap", "must lie in [0, 1)");
  check(threshold > 0.0 && threshold < 1.0, "inference.threshold", "must lie in (0, 1)");
  check(min_soma_size >= 1, "inference.min_soma_size", "must be >= 1");
  check(match_radius > 0.0, "inference.match_radius", "must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"stage", stage_name(c.stage)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"accumulation", c.accumulation},
          {"peak_lr", c.peak_lr},
          {"warmup_epochs", c.warmup_epochs},
          {"final_lr", c.final_lr},
          {"soma_weights", weights_json(c.soma_weights)},
          {"branch_weights", weights_json(c.branch_weights)},
          {"focal_alpha", c.focal.alpha},
          {"focal_gamma", c.focal.gamma},
          {"skeleton_iterations", c.skeleton.iterations},
          {"optimizer",
           {{"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"weight_decay", c.optimizer.weight_decay}}},
          {"augment", c.augment.names()},
          {"seed", c.seed},
          {"crop", json_fields::whd_json(c.crop)},
          {"crop_jitter", c.crop_jitter}};
}

nlohmann::json to_json(const DatasetConfig& c) {
  return {{"volumes", c.volumes},
          {"overlap_volumes", c.overlap_volumes},
          {"train_fraction", c.train_fraction},
          {"test_fraction", c.test_fraction},
          {"validation_fraction", c.validation_fraction},
          {"folds", c.folds}};
}

nlohmann::json to_json(const InferenceConfig& c) {
  return {{"tile_overlap", c.tile_overlap},
          {"threshold", c.threshold},
          {"min_soma_size", c.min_soma_size},
          {"match_radius", c.match_radius}};
}

nlohmann::json to_json(const PipelineConfig& c) {
  return {{"model", to_json(c.model)},
          {"data", to_json(c.data)},
          {"dataset", to_json(c.dataset)},
          {"train", to_json(c.train)},
          {"inference", to_json(c.inference)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base, const std::string& path) {
  if (!j.is_object()) throw std::invalid_argument(path + ": expected an object");
  json_fields::reject_unknown(j,
                              {"stage", "epochs", "batch_size", "accumulation", "peak_lr",
                               "warmup_epochs", "final_lr", "soma_weights", "branch_weights",
                               "focal_alpha", "focal_gamma", "skeleton_iterations", "optimizer",
                               "augment", "seed", "crop", "crop_jitter"},
                              path);
  TrainConfig c = base;
  if (j.contains("stage")) {
    try {
      c.stage = parse_stage(field<std::string>(j, "stage", "soma", path));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ".stage: " + e.what());
    }
  }
  c.epochs = field(j, "epochs", c.epochs, path);
  c.batch_size = field(j, "batch_size", c.batch_size, path);
  c.accumulation = field(j, "accumulation", c.accumulation, path);
  c.peak_lr = field(j, "peak_lr", c.peak_lr, path);
  c.warmup_epochs = field(j, "warmup_epochs", c.warmup_epochs, path);
  c.final_lr = field(j, "final_lr", c.final_lr, path);
  if (j.contains("soma_weights")) c.soma_weights = weights_from_json(j.at("soma_weights"), c.soma_weights, path + ".soma_weights");
  if (j.contains("branch_weights"))
    c.branch_weights = weights_from_json(j.at("branch_weights"), c.branch_weights, path + ".branch_weights");
  c.focal.alpha = field(j, "focal_alpha", c.focal.alpha, path);
  c.focal.gamma = field(j, "focal_gamma", c.focal.gamma, path);
  c.skeleton.iterations = field(j, "skeleton_iterations", c.skeleton.iterations, path);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    const std::string op = path + ".optimizer";
    if (!o.is_object()) throw std::invalid_argument(op + ": expected an object");
    json_fields::reject_unknown(o, {"beta1", "beta2", "eps", "weight_decay"}, op);
    c.optimizer.beta1 = field(o, "beta1", c.optimizer.beta1, op);
    c.optimizer.beta2 = field(o, "beta2", c.optimizer.beta2, op);
    c.optimizer.eps = field(o, "eps", c.optimizer.eps, op);
    c.optimizer.weight_decay = field(o, "weight_decay", c.optimizer.weight_decay, op);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    if (!a.is_array()) throw std::invalid_argument(path + ".augment: expected a list of names");
    std::vector<std::string> names;
    for (const auto& n : a) {
      if (!n.is_string()) throw std::invalid_argument(path + ".augment: expected a list of names");
      names.push_back(n.get<std::string>());
    }
    try {
      c.augment = AugmentSet::parse(names);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ".augment: " + e.what());
    }
  }
  c.seed = field(j, "seed", c.seed, path);
  if (j.contains("crop")) c.crop = json_fields::whd(j.at("crop"), path + ".crop");
  c.crop_jitter = field(j, "crop_jitter", c.crop_jitter, path);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    // validate() already prefixes "train."; rebase onto the caller's path.
    std::string msg = e.what();
    if (msg.rfind("train.", 0) == 0) msg = path + msg.substr(5);
    throw std::invalid_argument(msg);
  }
  return c;
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw std::invalid_argument(path + ": expected an object");
  json_fields::reject_unknown(
      j, {"volumes", "overlap_volumes", "train_fraction", "test_fraction", "validation_fraction", "folds"}, path);
  DatasetConfig c;
  c.volumes = field(j, "volumes", c.volumes, path);
  c.overlap_volumes = field(j, "overlap_volumes", c.overlap_volumes, path);
  c.train_fraction = field(j, "train_fraction", c.train_fraction, path);
  c.test_fraction = field(j, "test_fraction", c.test_fraction, path);
  c.validation_fraction = field(j, "validation_fraction", c.validation_fraction, path);
  c.folds = field(j, "folds", c.folds, path);
  c.validate();
  return c;
}

InferenceConfig inference_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw std::invalid_argument(path + ": expected an object");
  json_fields::reject_unknown(j, {"tile_overlap", "threshold", "min_soma_size", "match_radius"}, path);
  InferenceConfig c;
  c.tile_overlap = field(j, "tile_overlap", c.tile_overlap, path);
  c.threshold = field(j, "threshold", c.threshold, path);
  c.min_soma_size = field(j, "min_soma_size", c.min_soma_size, path);
  c.match_radius = field(j, "match_radius", c.match_radius, path);
  c.validate();
  return c;
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  json_fields::reject_unknown(j, {"model", "data", "dataset", "train", "inference"}, "config");
  PipelineConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), "model");
  if (j.contains("data")) c.data = synth_config_from_json(j.at("data"), "data");
  if (j.contains("dataset")) c.dataset = dataset_config_from_json(j.at("dataset"), "dataset");
  if (j.contains("train")) {
    // Stage-dependent defaults apply before the file's overrides.
    Stage stage = Stage::soma;
    if (j.at("train").is_object() && j.at("train").contains("stage") && j.at("train").at("stage").is_string()) {
      try {
        stage = parse_stage(j.at("train").at("stage").get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string("train.stage: ") + e.what());
      }
    }
    c.train = train_config_from_json(j.at("train"), desk_train_config(stage), "train");
  }
  if (j.contains("inference")) c.inference = inference_config_from_json(j.at("inference"), "inference");
  return c;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": malformed JSON (" + e.what() + ")");
  }
  return pipeline_config_from_json(j);
}

}  // namespace traice3d
