// Command-line front end: one subcommand per pipeline stage.

#include "sdc/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

namespace {

using nlohmann::json;

struct CommonFlags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int threads = 0;
  bool strict = false;
  CLI::Option* out_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  f.out_opt = app->add_option("--out", f.out, "Output directory");
  f.seed_opt = app->add_option("--seed", f.seed, "Global seed");
  f.threads_opt = app->add_option("--threads", f.threads, "Worker threads (default: SDC_THREADS or all cores)");
  app->add_flag("--strict", f.strict, "Single-threaded deterministic mode");
}

json base_config(const CommonFlags& f) {
  json j = json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw sdc::Error(sdc::ErrorKind::Config, f.config + ": " + e.what());
    }
  }
  if (f.out_opt->count() > 0) j["out"] = f.out;
  if (f.seed_opt->count() > 0) j["seed"] = f.seed;
  if (f.threads_opt->count() > 0) j["threads"] = f.threads;
  if (f.strict) j["strict"] = true;
  return j;
}

void report_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shared decodable concept discovery pipeline"};
  app.require_subcommand(1);
  CommonFlags flags;
  add_common(&app, flags);

  std::map<std::string, json> overrides;
  std::vector<std::size_t> eval_k;
  double threshold = -1.0, alpha = -1.0;
  int concepts = 0, iters = -1;
  long val_size = -1, test_size = -1;

  struct Stage {
    const char* name;
    const char* help;
  };
  const std::vector<Stage> stages{{"synth", "Generate a synthetic dataset with planted concepts"},
                                  {"split", "Stimulus-level train/val/test splits"},
                                  {"noise-ceiling", "Per-voxel noise ceilings and voxel selection"},
                                  {"train-decoder", "Train MLP and ridge decoders"},
                                  {"eval-topk", "Top-k retrieval accuracy on the test fold"},
                                  {"fit-things", "Fit the behavioural projection head"},
                                  {"fit-sdc", "Learn the shared concept projection"},
                                  {"fit-masks", "LASSO voxel masks per participant and concept"},
                                  {"specificity", "Mask/concept specificity matrices"},
                                  {"consistency", "ROI-fraction consistency across participants"},
                                  {"report", "Top images, t-SNE layout and manifest"},
                                  {"pipeline", "Run every stage in order"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& s : stages) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->fallthrough();
    subs[s.name] = sub;
  }
  subs["split"]->add_option("--val-size", val_size, "Validation stimuli");
  subs["split"]->add_option("--test-size", test_size, "Test stimuli");
  subs["noise-ceiling"]->add_option("--threshold", threshold, "Noise-ceiling threshold in percent");
  subs["eval-topk"]->add_option("--k", eval_k, "k values")->delimiter(',');
  subs["fit-sdc"]->add_option("--concepts", concepts, "Number of concepts");
  subs["fit-sdc"]->add_option("--iters", iters, "Optimizer iterations");
  subs["fit-masks"]->add_option("--alpha", alpha, "LASSO penalty");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  try {
    json j = base_config(flags);
    if (val_size >= 0) j["split"]["val_size"] = val_size;
    if (test_size >= 0) j["split"]["test_size"] = test_size;
    if (threshold >= 0.0) j["noise_ceiling"]["threshold"] = threshold;
    if (concepts > 0) j["sdc"]["concepts"] = concepts;
    if (iters >= 0) j["sdc"]["iters"] = iters;
    if (alpha > 0.0) j["lasso"]["alpha"] = alpha;

    sdc::Pipeline p(sdc::PipelineConfig::from_json(j));
    if (name == "synth") p.synth();
    else if (name == "split") p.split();
    else if (name == "noise-ceiling") p.noise_ceiling();
    else if (name == "train-decoder") p.train_decoder();
    else if (name == "eval-topk") p.eval_topk(eval_k.empty() ? p.config().eval_k : eval_k);
    else if (name == "fit-things") p.fit_things();
    else if (name == "fit-sdc") p.fit_sdc();
    else if (name == "fit-masks") p.fit_masks();
    else if (name == "specificity") p.specificity();
    else if (name == "consistency") p.consistency();
    else if (name == "report") {
      p.verify_truth();
      p.report();
    } else if (name == "pipeline") p.run_all();
    p.save_manifest();
  } catch (const sdc::Error& e) {
    report_error(std::string(e.kind_name()), e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("InternalError", e.what());
    return 1;
  }
  return 0;
}
