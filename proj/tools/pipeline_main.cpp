#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "zsr/audit.hpp"
#include "zsr/dhash.hpp"
#include "zsr/fixture.hpp"
#include "zsr/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = zsr::normalize_query(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> parse_class_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& item : split_csv(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw zsr::Error("--classes: \"" + item + "\" is not a class id");
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

int cmd_run(const std::string& config, const std::string& stage, bool force) {
  zsr::Pipeline p(zsr::load_config(config));
  if (!stage.empty()) {
    zsr::Stage s;
    try {
      s = zsr::parse_stage(stage);
    } catch (const zsr::Error& e) {
      throw zsr::ConfigError({e.what()});
    }
    const auto dir = p.run_stage(s, force);
    std::cout << dir.string() << "\n";
    return 0;
  }
  const auto summary = p.full_run(force);
  std::cout << (p.config().paths.work_dir / "summary.json").string() << "\n";
  auto show = [](const nlohmann::json& v) { return v.is_null() ? std::string("n/a") : v.dump(); };
  spdlog::info("zero-shot accuracy {} -> gated {}; uncertain {} ({}): {} -> {}", show(summary["zero_shot_accuracy"]),
               show(summary["gated_accuracy"]), summary["uncertain"]["count"].get<std::size_t>(),
               summary["uncertain"]["fraction"].get<double>(), show(summary["uncertain"]["zero_shot_accuracy"]),
               show(summary["uncertain"]["gated_accuracy"]));
  return 0;
}

int cmd_sweep(const std::string& config, const std::string& param, const std::string& values) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(zsr::read_file(config));
  } catch (const std::exception& e) {
    throw zsr::ConfigError({config + ": " + e.what()});
  }
  const auto results = zsr::run_sweep(doc, fs::absolute(config).parent_path(), param, split_csv(values));
  for (const auto& r : results) {
    const auto& s = r["summary"];
    std::cout << param << "=" << r["value"].get<std::string>() << "\tuncertain=" << s["uncertain"]["count"]
              << "\tzero_shot=" << s["zero_shot_accuracy"] << "\tgated=" << s["gated_accuracy"] << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zero-shot retrieval pipeline"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");

  // run
  auto* run = app.add_subcommand("run", "run the pipeline, or one stage of it");
  std::string config, stage;
  bool force = false;
  run->add_option("--config", config, "pipeline config (JSON)")->required();
  run->add_option("--stage", stage, "predict|select|plan|fetch|embed-check|refine|train|infer|audit");
  run->add_flag("--force", force, "ignore cached artifacts");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "full run per parameter value");
  std::string param, values;
  sweep->add_option("--config", config, "pipeline config (JSON)")->required();
  sweep->add_option("--param", param, "tau_r|tau_h|images_per_class_cap|k|temperature")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();

  // fetch
  auto* fetch = app.add_subcommand("fetch", "execute a query plan against a provider");
  std::string plan_path, dest, provider_kind = "mock", mock_root, endpoint;
  std::size_t max_parallel = zsr::kDefaultMaxParallel;
  int rate_ms = zsr::kDefaultRateMs;
  fetch->add_option("--plan", plan_path, "plan.jsonl")->required();
  fetch->add_option("--dest", dest, "output directory")->required();
  fetch->add_option("--provider", provider_kind, "mock|http");
  fetch->add_option("--mock-root", mock_root, "mock provider root");
  fetch->add_option("--endpoint-template", endpoint, "http endpoint, with {query} and {n}");
  fetch->add_option("--max-parallel", max_parallel);
  fetch->add_option("--rate-ms", rate_ms, "minimum gap between requests to one host");

  // train
  auto* train = app.add_subcommand("train", "train a linear probe on refined embeddings");
  std::string refined, mask_path, classes, out;
  zsr::ProbeTrainConfig tc;
  train->add_option("--refined", refined, "EMB1 file whose manifest carries labels")->required();
  train->add_option("--mask", mask_path, "mask.jsonl aligned with --refined; rows with keep=false are dropped");
  train->add_option("--classes", classes, "comma-separated class ids (default: labels present)");
  train->add_option("--lambda", tc.lambda);
  train->add_option("--lr", tc.lr);
  train->add_option("--epochs", tc.epochs);
  train->add_option("--seed", tc.seed);
  train->add_option("--out", out, "output base path (writes <out>.emb and <out>.json)")->required();

  // infer
  auto* infer = app.add_subcommand("infer", "gated prediction");
  std::string pre, probe_base, images;
  double tau_h = 0.9;
  bool restrict_pre = false;
  infer->add_option("--pre", pre, "zero-shot predictions.json")->required();
  infer->add_option("--probe", probe_base, "probe base path")->required();
  infer->add_option("--images", images, "target EMB1 file")->required();
  infer->add_option("--tau-h", tau_h)->required();
  infer->add_flag("--restrict-pre-entropy", restrict_pre);
  infer->add_option("--out", out, "output directory")->required();

  // make-fixture
  auto* fixture = app.add_subcommand("make-fixture", "write the synthetic end-to-end fixture");
  std::string fixture_dir;
  zsr::FixtureOptions fopt;
  fixture->add_option("--dir", fixture_dir)->required();
  fixture->add_option("--seed", fopt.seed);
  fixture->add_option("--classes", fopt.classes);
  fixture->add_option("--dim", fopt.dim);
  fixture->add_option("--per-class", fopt.per_class);

  // dhash
  auto* dh = app.add_subcommand("dhash", "print the difference hash of image files");
  std::vector<std::string> files;
  dh->add_option("files", files)->required();

  // export-csv
  auto* csv = app.add_subcommand("export-csv", "write embeddings as id,x0,x1,... CSV");
  std::string csv_in, csv_out;
  csv->add_option("--in", csv_in, "EMB1 file")->required();
  csv->add_option("--out", csv_out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%l] %v");

  try {
    if (*run) return cmd_run(config, stage, force);
    if (*sweep) return cmd_sweep(config, param, values);
    if (*fetch) {
      std::unique_ptr<zsr::RetrievalProvider> provider;
      if (provider_kind == "mock") {
        if (mock_root.empty()) throw zsr::ConfigError({"--mock-root is required for the mock provider"});
        provider = std::make_unique<zsr::MockDirectoryProvider>(mock_root);
      } else if (provider_kind == "http") {
        if (endpoint.empty()) throw zsr::ConfigError({"--endpoint-template is required for the http provider"});
        zsr::HttpProviderOptions opt;
        opt.endpoint_template = endpoint;
        opt.rate_ms = rate_ms;
        provider = std::make_unique<zsr::HttpProvider>(opt);
      } else {
        throw zsr::ConfigError({"--provider must be mock or http"});
      }
      const auto plan = zsr::plan_from_jsonl(zsr::read_file(plan_path));
      const auto m = zsr::execute_plan(plan, *provider, dest, max_parallel);
      const auto c = zsr::count_status(m);
      std::cout << "ok=" << c.ok << " skipped=" << c.skipped << " failed=" << c.failed
                << " shortfalls=" << m.shortfalls.size() << "\n";
      return 0;
    }
    if (*train) {
      auto [matrix, manifest] = zsr::read_embeddings(refined);
      if (!manifest.labels) throw zsr::Error(refined + ": manifest has no labels");
      std::vector<int> labels = *manifest.labels;
      if (!mask_path.empty()) {
        std::istringstream in(zsr::read_file(mask_path));
        std::string line;
        std::vector<std::size_t> keep;
        std::size_t j = 0;
        while (std::getline(in, line)) {
          if (zsr::normalize_query(line).empty()) continue;
          const auto rec = nlohmann::json::parse(line);
          if (j >= manifest.ids.size() || rec.at("id").get<std::string>() != manifest.ids[j]) {
            throw zsr::Error("mask line " + std::to_string(j + 1) + " is not aligned with " + refined);
          }
          if (rec.at("keep").get<bool>()) keep.push_back(j);
          ++j;
        }
        if (j != manifest.ids.size()) throw zsr::Error("mask length does not match " + refined);
        std::vector<int> kept_labels;
        for (std::size_t i : keep) kept_labels.push_back(labels[i]);
        matrix = zsr::select_rows(matrix, keep);
        labels = std::move(kept_labels);
      }
      std::vector<int> class_ids = classes.empty() ? std::vector<int>{} : parse_class_list(classes);
      if (class_ids.empty()) {
        class_ids = labels;
        std::sort(class_ids.begin(), class_ids.end());
        class_ids.erase(std::unique(class_ids.begin(), class_ids.end()), class_ids.end());
      }
      const auto model = zsr::train_probe(matrix, labels, class_ids, tc);
      zsr::save_probe(model, out);
      std::cout << "classes=" << model.num_classes() << " final_train_loss=" << model.final_train_loss << "\n";
      return 0;
    }
    if (*infer) {
      const auto table = zsr::prediction_table_from_json(nlohmann::json::parse(zsr::read_file(pre)));
      const auto probe = zsr::load_probe(probe_base);
      const auto [matrix, manifest] = zsr::read_embeddings(images);
      zsr::GateOptions opt;
      opt.restrict_pre_entropy = restrict_pre;
      const auto result = zsr::gated_predict(table, probe, matrix, tau_h, opt);
      zsr::write_file_atomic(fs::path(out) / "gate_trace.jsonl", zsr::gate_trace_to_jsonl(result.trace));
      std::vector<std::string> ids;
      for (const auto& r : table.rows) ids.push_back(r.id);
      zsr::write_file_atomic(fs::path(out) / "final.json",
                             nlohmann::json{{"ids", ids}, {"final", result.predictions}}.dump() + "\n");
      std::size_t switched = 0;
      for (const auto& g : result.trace) switched += g.chosen == zsr::GateChoice::probe;
      std::cout << "rows=" << result.trace.size() << " probe=" << switched << "\n";
      return 0;
    }
    if (*fixture) {
      const auto s = zsr::write_fixture(fixture_dir, fopt);
      std::cout << s.config.string() << "\n";
      return 0;
    }
    if (*dh) {
      int rc = 0;
      for (const auto& f : files) {
        try {
          std::cout << zsr::to_hex(zsr::dhash(zsr::read_file(f))) << "  " << f << "\n";
        } catch (const zsr::Error& e) {
          std::cerr << f << ": " << e.what() << "\n";
          rc = kExitStage;
        }
      }
      return rc;
    }
    if (*csv) {
      const auto [matrix, manifest] = zsr::read_embeddings(csv_in);
      zsr::write_file_atomic(csv_out, zsr::embeddings_to_csv(matrix, manifest));
      return 0;
    }
  } catch (const zsr::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return 0;
}
