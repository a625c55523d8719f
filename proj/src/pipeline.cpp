#include "traice3d/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "traice3d/json_fields.hpp"

namespace traice3d {

// Datasets -------------------------------------------------------------------

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

std::string volume_name(const char* prefix, int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d", prefix, k);
  return buf;
}

nlohmann::json split_json(const Split& s) {
  return {{"train", s.train}, {"test", s.test}, {"validation", s.validation}};
}

Split split_from_json(const nlohmann::json& j) {
  Split s;
  s.train = j.at("train").get<std::vector<std::size_t>>();
  s.test = j.at("test").get<std::vector<std::size_t>>();
  s.validation = j.at("validation").get<std::vector<std::size_t>>();
  return s;
}

void append_offset(std::vector<std::size_t>& dst, const std::vector<std::size_t>& src, std::size_t offset) {
  for (std::size_t i : src) dst.push_back(i + offset);
}

}  // namespace

Split split_dataset(std::size_t n, const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::vector<std::size_t> idx = shuffled(n, seed);
  const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(n) * cfg.test_fraction));
  const auto n_val = std::min(n - n_test, static_cast<std::size_t>(std::lround(static_cast<double>(n) * cfg.validation_fraction)));
  Split s;
  s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test),
                      idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), idx.end());
  for (auto* v : {&s.train, &s.test, &s.validation}) std::sort(v->begin(), v->end());
  return s;
}

std::vector<Split> kfold_splits(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2 || static_cast<std::size_t>(folds) > n)
    throw std::invalid_argument("fold count must lie in [2, volume count]");
  const std::vector<std::size_t> idx = shuffled(n, seed);
  std::vector<Split> out(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t f = i % static_cast<std::size_t>(folds);
    for (std::size_t k = 0; k < out.size(); ++k) (k == f ? out[k].test : out[k].train).push_back(idx[i]);
  }
  for (Split& s : out) {
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
  }
  return out;
}

std::vector<VolumeSample> Dataset::subset(const std::vector<std::size_t>& indices) const {
  std::vector<VolumeSample> out;
  for (std::size_t i : indices) out.push_back(volumes.at(i));
  return out;
}

void generate_dataset(const std::filesystem::path& dir, const SynthConfig& data, const DatasetConfig& cfg,
                      std::uint64_t seed) {
  data.validate();
  cfg.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  // Volumes are independent given their derived seeds.
  const int total = cfg.volumes + cfg.overlap_volumes;
  for (int k = 0; k < total; ++k) {
    const bool overlap = k >= cfg.volumes;
    const std::uint64_t vs = derive_seed(seed, static_cast<std::uint64_t>(k));
    std::mt19937_64 rng(vs);
    VolumeSample s = overlap ? generate_overlap_volume(rng, data) : generate_volume(rng, data);
    s.seed = vs;
    const std::string name = overlap ? volume_name("ovl", k - cfg.volumes) : volume_name("vol", k);
    write_sample(dir / name, s);
    entries.push_back({{"name", name}, {"kind", overlap ? "overlap" : "standard"}});
  }
  // Standard and overlap volumes are split separately so both kinds reach
  // every partition.
  Split split = split_dataset(static_cast<std::size_t>(cfg.volumes), cfg, seed);
  if (cfg.overlap_volumes > 0) {
    const Split o = split_dataset(static_cast<std::size_t>(cfg.overlap_volumes), cfg, seed ^ 0x6f76);
    const auto off = static_cast<std::size_t>(cfg.volumes);
    append_offset(split.train, o.train, off);
    append_offset(split.test, o.test, off);
    append_offset(split.validation, o.validation, off);
  }
  nlohmann::json meta{{"seed", seed},
                      {"data", to_json(data)},
                      {"dataset", to_json(cfg)},
                      {"volumes", entries},
                      {"split", split_json(split)}};
  if (cfg.folds >= 2) {
    nlohmann::json folds = nlohmann::json::array();
    for (const Split& f : kfold_splits(static_cast<std::size_t>(total), cfg.folds, seed)) folds.push_back(split_json(f));
    meta["folds"] = folds;
  }
  std::ofstream os(dir / "dataset.json");
  os << meta.dump(2) << '\n';
  if (!os) throw std::runtime_error("failed writing " + (dir / "dataset.json").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "dataset.json");
  if (!is) throw std::runtime_error("cannot open " + (dir / "dataset.json").string());
  Dataset d;
  try {
    d.meta = nlohmann::json::parse(is);
    for (const auto& e : d.meta.at("volumes")) d.names.push_back(e.at("name").get<std::string>());
    d.split = split_from_json(d.meta.at("split"));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "dataset.json").string() + ": " + e.what());
  }
  for (const std::string& n : d.names) d.volumes.push_back(read_sample(dir / n));
  if (d.volumes.empty()) throw std::runtime_error(dir.string() + ": dataset has no volumes");
  return d;
}

// Training -------------------------------------------------------------------

double cosine_lr(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch > cfg.epochs)
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + "]");
  if (epoch <= cfg.warmup_epochs) {
    if (cfg.warmup_epochs == 0) return cfg.peak_lr;
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * epoch / cfg.warmup_epochs;
  }
  const double t = static_cast<double>(epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs);
  return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

std::vector<TrainItem> make_items(const std::vector<VolumeSample>& volumes, Stage stage, Extent3 input,
                                  const TrainConfig& cfg, std::mt19937_64& rng) {
  std::vector<TrainItem> items;
  for (std::size_t v = 0; v < volumes.size(); ++v) {
    const VolumeSample& s = volumes[v];
    if (stage == Stage::soma) {
      for (const Tile& t : tile_volume(s, input, 0.5, TileMode::training))
        items.push_back({histogram_equalize(t.sample.image), t.sample.soma_mask, std::nullopt,
                         "volume " + std::to_string(v) + " tile (" + std::to_string(t.offset.d) + "," +
                             std::to_string(t.offset.h) + "," + std::to_string(t.offset.w) + ")"});
    } else {
      for (std::size_t k = 0; k < s.cell_masks.size(); ++k) {
        CellCrop c = crop_around_cell(s, static_cast<int>(k), cfg.crop, rng, cfg.crop_jitter);
        items.push_back({histogram_equalize(c.image), std::move(c.target), c.prompt,
                         "volume " + std::to_string(v) + " cell " + std::to_string(k)});
      }
    }
  }
  return items;
}

namespace {

PromptSet prompt_set(const Voxel& p, Extent3 dims) {
  return {{Point3{static_cast<double>(p.w), static_cast<double>(p.h), static_cast<double>(p.d)}}, dims};
}

Tensor forward_item(SegmentationModel& model, const Image& image, const std::optional<Voxel>& prompt,
                    const ForwardMode& mode) {
  const Tensor x = to_tensor(image);
  if (model.stage() == Stage::branch) {
    if (!prompt) throw std::invalid_argument("branch model needs a prompt point");
    const std::vector<PromptSet> prompts{prompt_set(*prompt, image.dims)};
    return model.forward(x, mode, &prompts);
  }
  return model.forward(x, mode);
}

TrainItem augmented(const TrainItem& item, std::mt19937_64& rng, const AugmentSet& ops) {
  AugmentSample a{item.image, {item.target}, {}};
  if (item.prompt) a.points.push_back(*item.prompt);
  a = augment(a, rng, ops);
  TrainItem out{std::move(a.image), std::move(a.masks[0]), std::nullopt, item.source};
  if (item.prompt) out.prompt = a.points[0];
  return out;
}

void save_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

nlohmann::json history_json(const std::vector<EpochRecord>& history) {
  nlohmann::json h = nlohmann::json::array();
  for (const EpochRecord& r : history) {
    nlohmann::json e{{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss}};
    if (r.validation_loss) e["validation_loss"] = *r.validation_loss;
    h.push_back(e);
  }
  return h;
}

void save_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path);
  os << history_json(history).dump(2) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

Tensor item_loss(SegmentationModel& model, const TrainItem& item, const TrainConfig& cfg, const ForwardMode& mode) {
  const Tensor pred = forward_item(model, item.image, item.prompt, mode);
  return combined_loss(pred, to_tensor(item.target), cfg.weights(), cfg.focal, cfg.skeleton);
}

TrainResult train_stage(SegmentationModel& model, const std::vector<VolumeSample>& train,
                        const std::vector<VolumeSample>& validation, const TrainConfig& cfg,
                        const TrainOptions& options) {
  cfg.validate();
  if (cfg.stage != model.stage())
    throw std::invalid_argument("train config stage '" + stage_name(cfg.stage) + "' differs from the model stage '" +
                                stage_name(model.stage()) + "'");
  if (train.empty()) throw std::invalid_argument("training set is empty");
  for (const VolumeSample& s : train) {
    const Extent3 need = cfg.stage == Stage::soma ? model.config().input : cfg.crop;
    if (s.image.dims.d < need.d || s.image.dims.h < need.h || s.image.dims.w < need.w)
      throw std::invalid_argument("training volume smaller than the model window");
  }
  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);

  std::mt19937_64 data_rng(cfg.seed), dropout_rng(derive_seed(cfg.seed, 1)), val_rng(derive_seed(cfg.seed, 2));
  std::vector<Tensor> params = model.trainable_parameters();
  OptimizerState opt{cfg.optimizer, 0, {}, {}};
  std::vector<TrainItem> items;
  if (cfg.stage == Stage::soma) items = make_items(train, cfg.stage, model.config().input, cfg, data_rng);
  const std::vector<TrainItem> val_items = make_items(validation, cfg.stage, model.config().input, cfg, val_rng);

  TrainResult result;
  const std::size_t group = static_cast<std::size_t>(cfg.batch_size) * static_cast<std::size_t>(cfg.accumulation);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.stage == Stage::branch) items = make_items(train, cfg.stage, model.config().input, cfg, data_rng);
    if (items.empty()) throw std::invalid_argument("no training items (all tiles below the foreground threshold)");
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), data_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cosine_lr(epoch, cfg);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += group) {
      const std::size_t end = std::min(order.size(), start + group);
      const float scale_by = 1.0f / static_cast<float>(end - start);
      zero_grads(params);
      for (std::size_t i = start; i < end; ++i) {
        const TrainItem& base = items[order[i]];
        try {
          const TrainItem item = augmented(base, data_rng, cfg.augment);
          Graph graph;
          Tensor loss;
          {
            GraphScope scope(graph);
            loss = item_loss(model, item, cfg, ForwardMode{true, &dropout_rng});
          }
          if (!std::isfinite(loss.item())) throw NumericError("loss is not finite");
          total += loss.item();
          {
            GraphScope scope(graph);
            backward(scale(loss, scale_by), graph);
          }
        } catch (const NumericError& e) {
          throw TrainingError("non-finite value at epoch " + std::to_string(epoch) + ", " + base.source +
                              " (lr " + std::to_string(rec.lr) + "): " + e.what());
        }
      }
      adamw_step(params, opt, static_cast<float>(rec.lr));
      for (const Tensor& p : params)
        for (float v : p.values())
          if (!std::isfinite(v))
            throw TrainingError("non-finite parameter after the optimizer step at epoch " + std::to_string(epoch));
    }
    rec.train_loss = total / static_cast<double>(items.size());
    if (!val_items.empty()) {
      double v = 0.0;
      for (const TrainItem& it : val_items) v += item_loss(model, it, cfg, ForwardMode{}).item();
      rec.validation_loss = v / static_cast<double>(val_items.size());
    }
    result.history.push_back(rec);
    const double score = rec.validation_loss.value_or(rec.train_loss);
    const bool best = result.best_epoch == 0 || score < result.best_loss;
    if (best) {
      result.best_epoch = epoch;
      result.best_loss = score;
    }
    if (options.out_dir) {
      const Checkpoint ck = model_checkpoint(model, epoch, result.history);
      save_checkpoint(ck, *options.out_dir / "last.tr3d");
      if (best) save_checkpoint(ck, *options.out_dir / "best.tr3d");
      save_history(*options.out_dir / "history.json", result.history);
    }
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

nlohmann::json checkpoint_metadata(const SegmentationModel& model, int epoch, const std::vector<EpochRecord>& history) {
  return {{"format", "traice3d"},
          {"model", to_json(model.config())},
          {"stage", stage_name(model.stage())},
          {"epoch", epoch},
          {"history", history_json(history)}};
}

Checkpoint model_checkpoint(const SegmentationModel& model, int epoch, const std::vector<EpochRecord>& history) {
  return make_checkpoint(model.named_tensors(), checkpoint_metadata(model, epoch, history));
}

SegmentationModel model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("model") || !ckpt.metadata.contains("stage"))
    throw std::invalid_argument("checkpoint metadata lacks the model config or stage");
  SegmentationModel model(model_config_from_json(ckpt.metadata.at("model"), "checkpoint.model"),
                          parse_stage(ckpt.metadata.at("stage").get<std::string>()), 0);
  NamedTensors named = model.named_tensors();
  load_into(ckpt, named);
  return model;
}

TransferManifest transfer_weights(const Checkpoint& soma, SegmentationModel& branch) {
  TransferManifest manifest;
  std::vector<std::pair<Tensor, const Tensor*>> copies;
  for (const NamedTensor& nt : branch.named_tensors()) {
    const bool shared = nt.name.rfind("encoder.", 0) == 0 || nt.name.rfind("decoder.", 0) == 0;
    if (!shared) {
      manifest.fresh.push_back(nt.name);
      continue;
    }
    const Tensor* src = soma.find(nt.name);
    if (!src) throw std::invalid_argument("transfer: checkpoint lacks tensor '" + nt.name + "'");
    if (src->shape() != nt.tensor.shape())
      throw std::invalid_argument("transfer: tensor '" + nt.name + "' has shape " + shape_string(src->shape()) +
                                  " in the checkpoint but " + shape_string(nt.tensor.shape()) + " in the model");
    copies.emplace_back(nt.tensor, src);
    manifest.transferred.push_back(nt.name);
  }
  if (soma.metadata.contains("model")) {
    const nlohmann::json mine = to_json(branch.config());
    const nlohmann::json& theirs = soma.metadata.at("model");
    for (auto it = mine.begin(); it != mine.end(); ++it)
      if (!theirs.contains(it.key()) || theirs.at(it.key()) != it.value())
        throw std::invalid_argument("transfer: model config field '" + it.key() + "' differs (checkpoint " +
                                    (theirs.contains(it.key()) ? theirs.at(it.key()).dump() : "missing") +
                                    ", model " + it.value().dump() + ")");
  }
  for (auto& [dst, src] : copies) std::copy(src->data(), src->data() + src->numel(), dst.data());
  return manifest;
}

// Inference ------------------------------------------------------------------

Image blend_tiles(Extent3 dims, const std::vector<std::pair<Extent3, Image>>& tiles) {
  const auto n = static_cast<std::size_t>(dims.d * dims.h * dims.w);
  std::vector<double> acc(n, 0.0);
  std::vector<int> count(n, 0);
  Image shape(dims);
  for (const auto& [off, tile] : tiles)
    for (Index d = 0; d < tile.dims.d; ++d)
      for (Index h = 0; h < tile.dims.h; ++h)
        for (Index w = 0; w < tile.dims.w; ++w) {
          if (!shape.contains(off.d + d, off.h + h, off.w + w)) throw std::out_of_range("tile exceeds the volume");
          const auto i = static_cast<std::size_t>(shape.index(off.d + d, off.h + h, off.w + w));
          acc[i] += tile(d, h, w);
          ++count[i];
        }
  Image out(dims);
  for (std::size_t i = 0; i < n; ++i) {
    if (count[i] == 0) throw std::logic_error("tiles leave a voxel uncovered");
    out.data[i] = static_cast<float>(acc[i] / count[i]);
  }
  return out;
}

Image predict_window(SegmentationModel& model, const Image& window, const std::optional<Voxel>& prompt) {
  return image_from_tensor(forward_item(model, histogram_equalize(window), prompt, ForwardMode{}));
}

Image sliding_window_infer(SegmentationModel& model, const Image& volume, Extent3 tile, double overlap) {
  std::vector<std::pair<Extent3, Image>> tiles;
  for (const Extent3& off : tile_offsets(volume.dims, tile, overlap))
    tiles.emplace_back(off, predict_window(model, crop(volume, off, tile)));
  return blend_tiles(volume.dims, tiles);
}

std::vector<Voxel> extract_somas(const Image& prob, double threshold, Index min_size) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
  std::vector<Voxel> out;
  for (const auto& comp : connected_components(binarize(prob, threshold))) {
    if (static_cast<Index>(comp.size()) < min_size) continue;
    double d = 0, h = 0, w = 0;
    for (const Voxel& v : comp) {
      d += static_cast<double>(v.d);
      h += static_cast<double>(v.h);
      w += static_cast<double>(v.w);
    }
    const double n = static_cast<double>(comp.size());
    out.push_back({std::lround(d / n), std::lround(h / n), std::lround(w / n)});
  }
  return out;
}

Mask segment_cell(SegmentationModel& branch, const Image& volume, const Voxel& soma, Extent3 crop_dims,
                  double threshold) {
  if (!volume.contains(soma)) throw std::out_of_range("soma point lies outside the volume");
  const Extent3 off = centred_offset(soma, crop_dims, volume.dims);
  const Voxel prompt{soma.d - off.d, soma.h - off.h, soma.w - off.w};
  const Mask local = binarize(predict_window(branch, crop(volume, off, crop_dims), prompt), threshold);
  Mask out(volume.dims);
  for (Index d = 0; d < crop_dims.d; ++d)
    for (Index h = 0; h < crop_dims.h; ++h)
      for (Index w = 0; w < crop_dims.w; ++w) out(off.d + d, off.h + h, off.w + w) = local(d, h, w);
  return out;
}

// Evaluation -----------------------------------------------------------------

void MetricReport::add(const std::string& id, const std::vector<double>& row) {
  if (row.size() != metrics.size()) throw std::invalid_argument("metric row width differs from the metric list");
  ids.push_back(id);
  values.push_back(row);
}

Summary MetricReport::aggregate(const std::string& metric) const {
  const auto it = std::find(metrics.begin(), metrics.end(), metric);
  if (it == metrics.end()) throw std::invalid_argument("unknown metric '" + metric + "'");
  const auto col = static_cast<std::size_t>(it - metrics.begin());
  std::vector<double> v;
  for (const auto& row : values) v.push_back(row[col]);
  return summarize(v);
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    nlohmann::json row{{"id", ids[i]}};
    for (std::size_t m = 0; m < metrics.size(); ++m) row[metrics[m]] = values[i][m];
    per.push_back(row);
  }
  nlohmann::json agg = nlohmann::json::object();
  for (const std::string& m : metrics) {
    const Summary s = aggregate(m);
    agg[m] = {{"mean", s.mean}, {"std", s.std}};
  }
  return {{"per_sample", per}, {"aggregate", agg}};
}

MetricReport evaluate_soma_predictions(const std::vector<SomaPrediction>& predictions,
                                       const std::vector<VolumeSample>& truth, const InferenceConfig& cfg) {
  if (truth.empty()) throw std::invalid_argument("evaluation set is empty");
  if (predictions.size() != truth.size()) throw std::invalid_argument("one prediction per volume is required");
  MetricReport r{{"accuracy", "f1", "precision", "recall", "dice"}, {}, {}};
  for (std::size_t v = 0; v < truth.size(); ++v) {
    const DetectionMetrics m = detection_metrics(predictions[v].centroids, truth[v].soma_centroids, cfg.match_radius);
    r.add(std::to_string(v), {m.accuracy, m.f1, m.precision, m.recall, dice_score(predictions[v].mask, truth[v].soma_mask)});
  }
  return r;
}

MetricReport evaluate_branch_predictions(const std::vector<std::vector<Mask>>& predictions,
                                         const std::vector<VolumeSample>& truth) {
  if (truth.empty()) throw std::invalid_argument("evaluation set is empty");
  if (predictions.size() != truth.size()) throw std::invalid_argument("one prediction list per volume is required");
  MetricReport r{{"dice", "apld", "hausdorff"}, {}, {}};
  for (std::size_t v = 0; v < truth.size(); ++v) {
    const VolumeSample& s = truth[v];
    if (predictions[v].size() != s.cell_masks.size())
      throw std::invalid_argument("volume " + std::to_string(v) + ": one mask per cell is required");
    const Spacing sp = s.voxel_size;
    const Extent3 e = s.image.dims.d > 0 ? s.image.dims : s.soma_mask.dims;
    const double diagonal = std::sqrt(std::pow((e.w - 1) * sp.x, 2) + std::pow((e.h - 1) * sp.y, 2) +
                                      std::pow((e.d - 1) * sp.z, 2));
    for (std::size_t k = 0; k < s.cell_masks.size(); ++k) {
      const Mask& pred = predictions[v][k];
      const Mask& gt = s.cell_masks[k];
      const double hd = count_foreground(pred) == 0 ? diagonal : hausdorff(pred, gt, sp);
      r.add(std::to_string(v) + "/cell_" + std::to_string(k), {dice_score(pred, gt), apld(pred, gt, sp), hd});
    }
  }
  return r;
}

SomaPrediction predict_somas(SegmentationModel& soma, const Image& volume, const InferenceConfig& cfg) {
  const Image prob = sliding_window_infer(soma, volume, soma.config().input, cfg.tile_overlap);
  return {extract_somas(prob, cfg.threshold, cfg.min_soma_size), binarize(prob, cfg.threshold)};
}

MetricReport evaluate_soma(SegmentationModel& soma, const std::vector<VolumeSample>& volumes,
                           const InferenceConfig& cfg) {
  std::vector<SomaPrediction> preds;
  for (const VolumeSample& s : volumes) preds.push_back(predict_somas(soma, s.image, cfg));
  return evaluate_soma_predictions(preds, volumes, cfg);
}

MetricReport evaluate_branch(SegmentationModel& branch, const std::vector<VolumeSample>& volumes, Extent3 crop_dims,
                             const InferenceConfig& cfg) {
  std::vector<std::vector<Mask>> preds;
  for (const VolumeSample& s : volumes) {
    std::vector<Mask> cells;
    for (const Voxel& c : s.soma_centroids) cells.push_back(segment_cell(branch, s.image, c, crop_dims, cfg.threshold));
    preds.push_back(std::move(cells));
  }
  return evaluate_branch_predictions(preds, volumes);
}

ParameterCounts count_parameters(const SegmentationModel& model) {
  ParameterCounts c;
  for (const NamedTensor& nt : model.named_tensors()) {
    if (!nt.trainable) continue;
    const Index n = nt.tensor.numel();
    if (nt.name.rfind("encoder.", 0) == 0) c.encoder += n;
    else if (nt.name.rfind("rcam", 0) == 0) c.skips += n;
    else if (nt.name.rfind("decoder.", 0) == 0) c.decoder += n;
    else if (nt.name.rfind("prompt.", 0) == 0) c.prompt += n;
    else throw std::logic_error("parameter '" + nt.name + "' has no group");
    c.total += n;
  }
  return c;
}

}  // namespace traice3d
