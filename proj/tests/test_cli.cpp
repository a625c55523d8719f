#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "traice3d/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "traice3d");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = traice3d::cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("traice3d_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_config(const fs::path& dir, const nlohmann::json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump();
  return p.string();
}

std::string bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

const nlohmann::json small_config{
    {"model", {{"variant", "tiny"}}},
    {"dataset", {{"volumes", 6}, {"overlap_volumes", 2}, {"train_fraction", 0.5}, {"test_fraction", 0.25},
                 {"validation_fraction", 0.25}}},
    {"train", {{"epochs", 2}, {"warmup_epochs", 1}, {"batch_size", 2}, {"accumulation", 1}}}};

}  // namespace

TEST_CASE("params prints the parameter table") {
  const Run r = run({"params", "--variant", "s"});
  CHECK(r.code == 0);
  CHECK(r.out.find("variant s") != std::string::npos);
  for (const char* row : {"encoder", "skips", "decoder", "prompt", "total"}) CHECK(r.out.find(row) != std::string::npos);

  const Run j = run({"params", "--variant", "tiny", "--stage", "soma", "--json"});
  REQUIRE(j.code == 0);
  const nlohmann::json counts = nlohmann::json::parse(j.out);
  CHECK(counts["stage"] == "soma");
  CHECK(counts["skips"] == 0);
  CHECK(counts["total"].get<long long>() ==
        counts["encoder"].get<long long>() + counts["decoder"].get<long long>());
}

TEST_CASE("usage and configuration errors exit with code 2") {
  const fs::path dir = scratch("errors");
  const std::string bad = write_config(dir, {{"train", {{"epochs", 10}, {"warmup_epochs", 10}}}});
  Run r = run({"params", "--config", bad});
  CHECK(r.code == 2);
  CHECK(r.err.find("warmup_epochs") != std::string::npos);

  CHECK(run({"params", "--no-such-flag"}).code == 2);
  CHECK(run({}).code == 2);
  CHECK(run({"params", "--variant", "xl"}).code == 2);
  CHECK(run({"gen-data"}).err.find("--out") != std::string::npos);
  CHECK(run({"params", "--config", (dir / "missing.json").string()}).code == 2);

  std::ofstream(dir / "broken.json") << "{\"model\": ";
  r = run({"params", "--config", (dir / "broken.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("malformed") != std::string::npos);

  const std::string unknown = write_config(dir, {{"model", {{"widht", 3}}}});
  r = run({"params", "--config", unknown});
  CHECK(r.code == 2);
  CHECK(r.err.find("model.widht") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("gen-data is deterministic in the seed") {
  const fs::path dir = scratch("gen");
  const std::string cfg = write_config(dir, small_config);
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "7", "--out", (dir / "a").string()}).code == 0);
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "7", "--out", (dir / "b").string()}).code == 0);
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "8", "--out", (dir / "c").string()}).code == 0);
  std::size_t files = 0;
  bool any_differs = false;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path rel = fs::relative(e.path(), dir / "a");
    CHECK(bytes(e.path()) == bytes(dir / "b" / rel));
    if (fs::exists(dir / "c" / rel)) any_differs |= bytes(e.path()) != bytes(dir / "c" / rel);
  }
  CHECK(files > 8);
  CHECK(any_differs);
  fs::remove_all(dir);
}

TEST_CASE("train, eval and infer end to end") {
  const fs::path dir = scratch("e2e");
  const std::string cfg = write_config(dir, small_config);
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "3", "--out", (dir / "data").string()}).code == 0);

  Run r = run({"train", "--config", cfg, "--stage", "soma", "--data", (dir / "data").string(), "--out",
               (dir / "soma").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("epoch 2") != std::string::npos);
  CHECK(fs::exists(dir / "soma" / "best.tr3d"));

  r = run({"train", "--config", cfg, "--stage", "branch", "--data", (dir / "data").string(), "--out",
           (dir / "branch").string(), "--checkpoint", (dir / "soma" / "best.tr3d").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("transferred") != std::string::npos);
  const nlohmann::json manifest = nlohmann::json::parse(std::ifstream(dir / "branch" / "transfer.json"));
  CHECK_FALSE(manifest["fresh"].empty());

  r = run({"eval", "--config", cfg, "--checkpoint", (dir / "soma" / "best.tr3d").string(), "--data",
           (dir / "data").string(), "--out", (dir / "soma_eval.json").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const nlohmann::json report = nlohmann::json::parse(std::ifstream(dir / "soma_eval.json"));
  CHECK(report["stage"] == "soma");
  CHECK(report["aggregate"].contains("f1"));
  CHECK(report["aggregate"].contains("dice"));

  r = run({"eval", "--config", cfg, "--checkpoint", (dir / "branch" / "best.tr3d").string(), "--data",
           (dir / "data").string(), "--split", "all", "--out", (dir / "branch_eval.json").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const nlohmann::json branch_report = nlohmann::json::parse(std::ifstream(dir / "branch_eval.json"));
  CHECK(branch_report["aggregate"].contains("apld"));
  CHECK(branch_report["aggregate"].contains("hausdorff"));

  CHECK(run({"eval", "--checkpoint", (dir / "soma" / "best.tr3d").string(), "--data", (dir / "data").string(),
             "--stage", "branch"})
            .code == 2);
  CHECK(run({"eval", "--checkpoint", (dir / "soma" / "best.tr3d").string(), "--data", (dir / "data").string(),
             "--split", "holdout"})
            .code == 2);

  fs::path sample;
  for (const auto& e : fs::directory_iterator(dir / "data"))
    if (e.is_directory()) sample = e.path();
  REQUIRE_FALSE(sample.empty());
  r = run({"infer", "--config", cfg, "--checkpoint", (dir / "soma" / "best.tr3d").string(), "--branch-checkpoint",
           (dir / "branch" / "best.tr3d").string(), "--input", sample.string(), "--out", (dir / "infer").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir / "infer" / "soma.v3d"));
  const nlohmann::json somas = nlohmann::json::parse(std::ifstream(dir / "infer" / "somas.json"));
  CHECK(somas["cells"] == somas["somas_xyz"].size());

  CHECK(run({"infer", "--checkpoint", (dir / "branch" / "best.tr3d").string(), "--input", sample.string(), "--out",
             (dir / "x").string()})
            .code == 2);
  CHECK(run({"train", "--data", (dir / "missing").string(), "--out", (dir / "y").string()}).code == 1);
  fs::remove_all(dir);
}
