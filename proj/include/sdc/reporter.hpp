#pragma once

#include "sdc/concept_spaces.hpp"
#include "sdc/consistency.hpp"
#include "sdc/dataio.hpp"
#include "sdc/mask_finder.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sdc {

struct RankedStimulus {
  std::string stimulus_id;
  double score = 0.0;
};

struct ConceptImageReport {
  int concept_index = 0;
  std::size_t k = 0;
  std::vector<RankedStimulus> ranked;
};

inline constexpr std::size_t kMosaicImages = 10;
inline constexpr std::size_t kTsneImages = 250;

// Stimuli ranked by the inference-activated score on one concept; ties by id.
ConceptImageReport top_images(const ProjectionHead& head, const EmbeddingMatrix& embeddings, int concept_index,
                              std::size_t k);

void write_top_images_csv(const std::filesystem::path& path, const std::vector<ConceptImageReport>& reports);

// Exact t-SNE ----------------------------------------------------------------

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  std::uint64_t seed = 0;
  // Per-point initial positions keyed by a hash of the row's values instead
  // of its index, making the layout follow rows under permutation.
  bool content_keyed = false;
  int exaggeration_iters = 250;
  double exaggeration = 12.0;
  double learning_rate = 200.0;
  double momentum_initial = 0.5;
  double momentum_final = 0.8;
  double init_std = 1e-4;
};

struct TsneLayout {
  Matrix points;  // m x 2
  double perplexity = 0.0;
  int iterations = 0;
  double final_kl = 0.0;
  // KL(P || Q) of the unexaggerated affinities at the start of each iteration.
  std::vector<double> kl_history;
};

inline constexpr std::size_t kTsneMaxPoints = 5000;

// Symmetrized joint affinities with per-point bandwidths matched to the
// perplexity by bisection.
Matrix tsne_affinities(const Matrix& x, double perplexity);

double tsne_kl(const Matrix& p, const Matrix& points);

TsneLayout tsne(const Matrix& x, const TsneConfig& cfg);

void write_tsne_csv(const std::filesystem::path& path, const TsneLayout& layout,
                    const std::vector<std::string>& stimulus_ids, const std::vector<int>& concept_indices);

// Manifest -------------------------------------------------------------------

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);
// Hash of the canonical (key-sorted, compact) serialization.
std::string config_hash(const nlohmann::json& config);

struct Manifest {
  std::string config_hash;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> versions;
  std::vector<std::string> stages;
  std::map<std::string, std::string> artifacts;  // path relative to the output root -> sha256
  nlohmann::json notes = nlohmann::json::object();

  void add_stage(const std::string& stage);
  void record(const std::filesystem::path& root, const std::filesystem::path& file);
};

std::map<std::string, std::string> library_versions();

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct ReportBundle {
  std::vector<ConceptImageReport> top_images;
  std::optional<TsneLayout> tsne;
  std::vector<std::string> tsne_ids;
  std::vector<int> tsne_concepts;
  std::optional<ConsistencyReport> consistency;
  std::optional<LocalizerOverlap> localizer;
  std::vector<SpecificityMatrix> specificity;
};

// Writes the bundle's tables under `root`, records them in the manifest and
// rewrites root/summary.json.
void emit_report(const ReportBundle& bundle, const std::filesystem::path& root, Manifest& manifest);

}  // namespace sdc
