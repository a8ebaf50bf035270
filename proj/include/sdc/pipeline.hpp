#pragma once

#include "sdc/concept_spaces.hpp"
#include "sdc/consistency.hpp"
#include "sdc/dataio.hpp"
#include "sdc/decoder.hpp"
#include "sdc/mask_finder.hpp"
#include "sdc/reporter.hpp"
#include "sdc/synthlab.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace sdc {

struct PipelineConfig {
  std::filesystem::path out = "out";
  // dataset.json describing inputs; defaults to <out>/data/dataset.json.
  std::filesystem::path dataset;
  std::uint64_t seed = 0;
  int threads = 0;  // 0: hardware concurrency
  bool strict = false;

  SynthSpec synth;
  double synth_target_nc = 30.0;  // <= 0 keeps synth.noise_sigma
  int things_classes = 400;
  int things_dims = 12;

  std::size_t val_size = 400;
  std::size_t test_size = 200;
  std::uint64_t split_seed = 0;
  double nc_threshold = 5.0;

  TrainConfig decoder;
  int hidden = 256;
  std::vector<double> ridge_grid = default_ridge_grid();
  std::vector<std::size_t> eval_k{1, 5, 10};

  double things_alpha = 1.0;
  int things_finetune_steps = 500;
  double things_finetune_lr = 1e-3;

  SdcConfig sdc;

  double lasso_alpha = 1e-3;
  double lasso_tol = 1e-7;
  int lasso_max_sweeps = 10000;

  std::size_t top_m = 7;
  LocalizerGroups localizer_groups = default_localizer_groups();  // 1-based labels

  std::size_t top_k_images = kMosaicImages;
  std::size_t tsne_images = kTsneImages;
  std::size_t tsne_concepts = 1;
  TsneConfig tsne;

  // Missing fields keep their defaults; stage seeds default to values derived
  // from the global seed.
  static PipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;

  std::filesystem::path dataset_path() const;
  int worker_threads() const;
};

PipelineConfig load_config(const std::filesystem::path& path);

// Paths of one dataset, resolved against the dataset.json directory.
struct DatasetParticipant {
  std::string id;
  std::filesystem::path responses;
  std::filesystem::path atlas;
  std::filesystem::path localizer;  // optional
};

struct DatasetPaths {
  std::vector<DatasetParticipant> participants;
  std::filesystem::path embeddings;
  std::filesystem::path trials;
  std::filesystem::path things_u_avg;    // optional
  std::filesystem::path things_targets;  // optional
  std::filesystem::path truth;           // optional
  std::vector<std::string> localizer_regions;
  int roi_count = 360;
  int localizer_region_count = 0;
};

DatasetPaths read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const DatasetPaths& paths);

// Runs fn(0..count-1) on up to `threads` workers. Every index writes only its
// own outputs, so results do not depend on scheduling. Rethrows the
// lowest-index failure.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn);

// Stage context: configuration, manifest and the output root.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg);

  const PipelineConfig& config() const { return cfg_; }
  Manifest& manifest() { return manifest_; }

  void synth();
  void split();
  void noise_ceiling();
  void train_decoder();
  void eval_topk(const std::vector<std::size_t>& ks);
  void fit_things();
  void fit_sdc();
  void fit_masks();
  void specificity();
  void consistency();
  void report();
  // Compares learned artifacts with the planted truth when the dataset has one.
  void verify_truth();
  void run_all();

  // Writes summary.json; every stage calls this before returning.
  void save_manifest();

 private:
  void record(const std::filesystem::path& file);
  std::filesystem::path path(const std::string& rel) const;
  DatasetPaths dataset() const;

  PipelineConfig cfg_;
  Manifest manifest_;
};

// One-to-one assignment of learned rows to planted rows maximizing the summed
// cosine similarity; exhaustive for equal counts up to 9, greedy otherwise.
// Entry k is the planted row matched to learned row k, or -1.
std::vector<int> match_concepts(const Matrix& learned, const Matrix& planted);

}  // namespace sdc
