#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "traice3d/checkpoint.hpp"
#include "traice3d/metrics.hpp"
#include "traice3d/pipeline_config.hpp"

namespace traice3d {

// Datasets -------------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train, test, validation;
};

/// Deterministic shuffled split by volume. Train gets the remainder after
/// rounding the test and validation counts.
Split split_dataset(std::size_t n, const DatasetConfig& cfg, std::uint64_t seed);
/// k folds over a shuffled index list; fold i tests on the i-th part and
/// trains on the rest.
std::vector<Split> kfold_splits(std::size_t n, int folds, std::uint64_t seed);

struct Dataset {
  std::vector<std::string> names;
  std::vector<VolumeSample> volumes;
  Split split;
  nlohmann::json meta;

  std::vector<VolumeSample> subset(const std::vector<std::size_t>& indices) const;
};

/// Generates `volumes` standard volumes and `overlap_volumes` two-cell
/// overlap volumes under `dir`, one sub-directory each, plus dataset.json.
/// Volume k uses derive_seed(seed, k).
void generate_dataset(const std::filesystem::path& dir, const SynthConfig& data, const DatasetConfig& cfg,
                      std::uint64_t seed);
Dataset load_dataset(const std::filesystem::path& dir);

// Training -------------------------------------------------------------------

/// Linear warmup from final_lr to peak_lr over warmup_epochs, then a
/// half-cosine from peak_lr down to final_lr at `epochs`. Epoch k in
/// [1, epochs] trains with cosine_lr(k).
double cosine_lr(int epoch, const TrainConfig& cfg);

/// Model input: equalized image plus the stage's label and prompt.
struct TrainItem {
  Image image;
  Mask target;
  std::optional<Voxel> prompt;
  std::string source;
};

/// Soma stage: training-mode tiles of the model input size with the soma mask
/// as target. Branch stage: one jittered crop per cell with that cell's mask.
std::vector<TrainItem> make_items(const std::vector<VolumeSample>& volumes, Stage stage, Extent3 input,
                                  const TrainConfig& cfg, std::mt19937_64& rng);

/// Loss of one item under the model, evaluated with or without a graph.
Tensor item_loss(SegmentationModel& model, const TrainItem& item, const TrainConfig& cfg,
                 const ForwardMode& mode);

struct EpochRecord {
  int epoch = 0;
  double lr = 0, train_loss = 0;
  std::optional<double> validation_loss;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_loss = 0;
};

struct TrainOptions {
  /// When set, last.tr3d, best.tr3d and history.json are written each epoch.
  std::optional<std::filesystem::path> out_dir;
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-sample forward passes (batch statistics are per sample), losses scaled
/// by 1 / group size, one optimizer step per group of batch_size *
/// accumulation samples. Best checkpoint by validation loss when validation
/// volumes exist, else by training loss. Non-finite values raise
/// TrainingError naming the epoch and item.
TrainResult train_stage(SegmentationModel& model, const std::vector<VolumeSample>& train,
                        const std::vector<VolumeSample>& validation, const TrainConfig& cfg,
                        const TrainOptions& options = {});

nlohmann::json checkpoint_metadata(const SegmentationModel& model, int epoch,
                                   const std::vector<EpochRecord>& history);
Checkpoint model_checkpoint(const SegmentationModel& model, int epoch = 0,
                            const std::vector<EpochRecord>& history = {});
/// Rebuilds the model described by the checkpoint metadata and loads it.
SegmentationModel model_from_checkpoint(const Checkpoint& ckpt);

struct TransferManifest {
  std::vector<std::string> transferred, fresh;
};

/// Copies encoder.* and decoder.* tensors from a soma checkpoint into the
/// branch model; everything else keeps its fresh initialization. Throws on
/// missing names or shape mismatches (naming the tensor) and on model config
/// mismatches.
TransferManifest transfer_weights(const Checkpoint& soma, SegmentationModel& branch);

// Inference ------------------------------------------------------------------

/// Mean of overlapping tile predictions.
Image blend_tiles(Extent3 dims, const std::vector<std::pair<Extent3, Image>>& tiles);

/// Evaluation-mode forward of one equalized window.
Image predict_window(SegmentationModel& model, const Image& window, const std::optional<Voxel>& prompt = {});

/// Tiles of `tile` extent with fractional `overlap`, each equalized and
/// predicted, blended by arithmetic mean.
Image sliding_window_infer(SegmentationModel& model, const Image& volume, Extent3 tile, double overlap);

/// Threshold, 26-connected components of at least `min_size` voxels, rounded
/// mean coordinates.
std::vector<Voxel> extract_somas(const Image& prob, double threshold = 0.5, Index min_size = 20);

/// Branch-model mask of the cell prompted at `soma`, placed into a canvas of
/// the volume's extent.
Mask segment_cell(SegmentationModel& branch, const Image& volume, const Voxel& soma, Extent3 crop,
                  double threshold = 0.5);

// Evaluation -----------------------------------------------------------------

/// Per-sample metric values plus mean and population std per metric.
struct MetricReport {
  std::vector<std::string> metrics;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> values;  // values[sample][metric]

  void add(const std::string& id, const std::vector<double>& row);
  Summary aggregate(const std::string& metric) const;
  nlohmann::json to_json() const;
};

struct SomaPrediction {
  std::vector<Voxel> centroids;
  Mask mask;
};

/// Detection metrics of predicted vs true centroids and voxel Dice of the
/// soma masks, one row per volume.
MetricReport evaluate_soma_predictions(const std::vector<SomaPrediction>& predictions,
                                       const std::vector<VolumeSample>& truth, const InferenceConfig& cfg);
/// Dice, APLD and Hausdorff per cell. predictions[v][k] is the mask for cell k
/// of volume v. An empty prediction scores the volume diagonal as Hausdorff
/// distance.
MetricReport evaluate_branch_predictions(const std::vector<std::vector<Mask>>& predictions,
                                         const std::vector<VolumeSample>& truth);

SomaPrediction predict_somas(SegmentationModel& soma, const Image& volume, const InferenceConfig& cfg);
MetricReport evaluate_soma(SegmentationModel& soma, const std::vector<VolumeSample>& volumes,
                           const InferenceConfig& cfg);
/// Prompts with the true soma centroids.
MetricReport evaluate_branch(SegmentationModel& branch, const std::vector<VolumeSample>& volumes,
                             Extent3 crop, const InferenceConfig& cfg);

// Parameter counts ------------------------------------------------------------

struct ParameterCounts {
  Index encoder = 0, skips = 0, decoder = 0, prompt = 0, total = 0;
};

/// Trainable parameters grouped by name prefix (rcam* counts as skips).
ParameterCounts count_parameters(const SegmentationModel& model);

}  // namespace traice3d
