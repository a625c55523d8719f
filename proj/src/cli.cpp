#include "traice3d/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <string>

#include "traice3d/pipeline.hpp"

namespace traice3d {

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Options {
  std::string config, out, stage, checkpoint, branch_checkpoint, variant, data, input, split = "test";
  std::optional<std::uint64_t> seed;
  bool json = false;
};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config " + path + ": malformed JSON (" + e.what() + ")");
  }
}

// Command-line flags are written into the JSON before parsing so that the
// stage- and variant-dependent defaults apply consistently.
PipelineConfig resolve_config(const Options& o) {
  nlohmann::json j = o.config.empty() ? nlohmann::json::object() : read_json_file(o.config);
  if (!j.is_object()) throw UsageError("config: expected a JSON object");
  if (!o.variant.empty()) {
    if (!j.contains("model")) j["model"] = nlohmann::json::object();
    j["model"]["variant"] = o.variant;
  }
  if (!o.stage.empty()) {
    if (!j.contains("train")) j["train"] = nlohmann::json::object();
    j["train"]["stage"] = o.stage;
  }
  if (o.seed) {
    if (!j.contains("train")) j["train"] = nlohmann::json::object();
    j["train"]["seed"] = *o.seed;
  }
  try {
    PipelineConfig c = pipeline_config_from_json(j);
    c.model.validate();
    c.data.validate();
    c.dataset.validate();
    c.train.validate();
    c.inference.validate();
    return c;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required flag ") + flag);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

const std::vector<std::size_t>& split_indices(const Dataset& d, const std::string& split,
                                              std::vector<std::size_t>& all) {
  if (split == "train") return d.split.train;
  if (split == "test") return d.split.test;
  if (split == "validation") return d.split.validation;
  if (split == "all") {
    all.resize(d.volumes.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  throw UsageError("--split must be train, test, validation or all");
}

int cmd_gen_data(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  const PipelineConfig c = resolve_config(o);
  const std::uint64_t seed = o.seed.value_or(0);
  generate_dataset(o.out, c.data, c.dataset, seed);
  out << "wrote " << c.dataset.volumes + c.dataset.overlap_volumes << " volumes to " << o.out << '\n';
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  require(o.data, "--data");
  require(o.out, "--out");
  const PipelineConfig c = resolve_config(o);
  const Dataset data = load_dataset(o.data);
  SegmentationModel model(c.model, c.train.stage, c.train.seed);
  if (!o.checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    if (c.train.stage == Stage::branch) {
      const TransferManifest m = transfer_weights(ck, model);
      write_json(std::filesystem::path(o.out) / "transfer.json",
                 {{"source", o.checkpoint}, {"transferred", m.transferred}, {"fresh", m.fresh}});
      out << "transferred " << m.transferred.size() << " tensors, " << m.fresh.size() << " fresh\n";
    } else {
      NamedTensors named = model.named_tensors();
      load_into(ck, named);
    }
  }
  write_json(std::filesystem::path(o.out) / "config.json", to_json(c));
  TrainOptions opts;
  opts.out_dir = o.out;
  opts.on_epoch = [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch << " lr " << std::setprecision(4) << r.lr << " train " << r.train_loss;
    if (r.validation_loss) out << " val " << *r.validation_loss;
    out << '\n' << std::flush;
  };
  const TrainResult res = train_stage(model, data.subset(data.split.train), data.subset(data.split.validation),
                                      c.train, opts);
  out << "best epoch " << res.best_epoch << " loss " << res.best_loss << '\n';
  return 0;
}

VolumeSample read_input(const std::filesystem::path& p) {
  if (std::filesystem::is_directory(p)) return read_sample(p);
  VolumeSample s;
  s.image = read_v3d_image(p);
  return s;
}

int cmd_infer(const Options& o, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  require(o.input, "--input");
  require(o.out, "--out");
  const PipelineConfig c = resolve_config(o);
  SegmentationModel soma = model_from_checkpoint(load_checkpoint(o.checkpoint));
  if (soma.stage() != Stage::soma) throw UsageError("--checkpoint must hold a soma-stage model");
  const VolumeSample input = read_input(o.input);
  const SomaPrediction pred = predict_somas(soma, input.image, c.inference);
  const std::filesystem::path dir = o.out;
  std::filesystem::create_directories(dir);
  write_v3d(dir / "soma.v3d", pred.mask);
  nlohmann::json somas = nlohmann::json::array();
  for (const Voxel& v : pred.centroids) somas.push_back({v.w, v.h, v.d});
  nlohmann::json result{{"somas_xyz", somas}};
  if (!o.branch_checkpoint.empty()) {
    SegmentationModel branch = model_from_checkpoint(load_checkpoint(o.branch_checkpoint));
    if (branch.stage() != Stage::branch) throw UsageError("--branch-checkpoint must hold a branch-stage model");
    for (std::size_t k = 0; k < pred.centroids.size(); ++k)
      write_v3d(dir / ("cell_" + std::to_string(k) + ".v3d"),
                segment_cell(branch, input.image, pred.centroids[k], c.train.crop, c.inference.threshold));
    result["cells"] = pred.centroids.size();
  }
  write_json(dir / "somas.json", result);
  out << pred.centroids.size() << " somas detected\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  require(o.data, "--data");
  const PipelineConfig c = resolve_config(o);
  SegmentationModel model = model_from_checkpoint(load_checkpoint(o.checkpoint));
  if (!o.stage.empty() && parse_stage(o.stage) != model.stage())
    throw UsageError("--stage " + o.stage + " differs from the checkpoint stage " + stage_name(model.stage()));
  const Dataset data = load_dataset(o.data);
  std::vector<std::size_t> all;
  const std::vector<VolumeSample> volumes = data.subset(split_indices(data, o.split, all));
  const MetricReport report = model.stage() == Stage::soma ? evaluate_soma(model, volumes, c.inference)
                                                           : evaluate_branch(model, volumes, c.train.crop, c.inference);
  nlohmann::json j = report.to_json();
  j["stage"] = stage_name(model.stage());
  j["split"] = o.split;
  if (!o.out.empty()) write_json(o.out, j);
  for (const std::string& m : report.metrics) {
    const Summary s = report.aggregate(m);
    out << std::left << std::setw(10) << m << std::fixed << std::setprecision(4) << s.mean << " +- " << s.std << '\n';
  }
  return 0;
}

int cmd_params(const Options& o, std::ostream& out) {
  const PipelineConfig c = resolve_config(o);
  const Stage stage = o.stage.empty() ? Stage::branch : parse_stage(o.stage);
  const SegmentationModel model(c.model, stage, 0);
  const ParameterCounts p = count_parameters(model);
  if (o.json) {
    out << nlohmann::json{{"variant", variant_name(c.model.variant)},
                          {"stage", stage_name(stage)},
                          {"encoder", p.encoder},
                          {"skips", p.skips},
                          {"decoder", p.decoder},
                          {"prompt", p.prompt},
                          {"total", p.total}}
               .dump(2)
        << '\n';
    return 0;
  }
  out << "variant " << variant_name(c.model.variant) << " (" << stage_name(stage) << " model)\n";
  const std::pair<const char*, Index> rows[] = {
      {"encoder", p.encoder}, {"skips", p.skips}, {"decoder", p.decoder}, {"prompt", p.prompt}, {"total", p.total}};
  for (const auto& [name, n] : rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-8s %12lld %9.2fM\n", name, static_cast<long long>(n), n / 1e6);
    out << buf;
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stage 3D cell segmentation: synthetic data, training, inference and evaluation", "traice3d"};
  app.require_subcommand(1);
  Options o;
  auto add_config = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--variant", o.variant, "Model variant")->check(CLI::IsMember({"tiny", "s", "m", "l"}));
  };
  auto add_seed = [&o](CLI::App* sub) { sub->add_option("--seed", o.seed, "Random seed"); };
  auto add_stage = [&o](CLI::App* sub) {
    sub->add_option("--stage", o.stage, "Training stage")->check(CLI::IsMember({"soma", "branch"}));
  };

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_config(gen);
  add_seed(gen);
  gen->add_option("--out", o.out, "Output directory");

  CLI::App* train = app.add_subcommand("train", "Train one stage");
  add_config(train);
  add_seed(train);
  add_stage(train);
  train->add_option("--data", o.data, "Dataset directory");
  train->add_option("--out", o.out, "Run directory for checkpoints and history");
  train->add_option("--checkpoint", o.checkpoint,
                    "Initial weights; for the branch stage, the soma checkpoint to transfer from");

  CLI::App* infer = app.add_subcommand("infer", "Detect somas and optionally segment each cell");
  add_config(infer);
  infer->add_option("--checkpoint", o.checkpoint, "Soma-stage checkpoint");
  infer->add_option("--branch-checkpoint", o.branch_checkpoint, "Branch-stage checkpoint");
  infer->add_option("--input", o.input, "V3D image or sample directory");
  infer->add_option("--out", o.out, "Output directory");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  add_config(eval);
  add_stage(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");
  eval->add_option("--data", o.data, "Dataset directory");
  eval->add_option("--split", o.split, "train, test, validation or all");
  eval->add_option("--out", o.out, "JSON report path");

  CLI::App* params = app.add_subcommand("params", "Print trainable parameter counts");
  add_config(params);
  add_stage(params);
  params->add_flag("--json", o.json, "Print JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (infer->parsed()) return cmd_infer(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    return cmd_params(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace traice3d
