#pragma once

#include "sdc/dataio.hpp"

#include <filesystem>
#include <vector>

namespace sdc {

enum class ConsistencyMode { Consistent, Shuffled };
enum class VoxelNonlinearity { None, Tanh };

// Synthetic multi-participant dataset with planted concept directions and
// known voxel supports.
struct SynthSpec {
  int participants = 8;
  int stimuli = 1500;
  int reps = 3;
  int embed_dim = 64;
  int true_concepts = 8;
  int support_size = 25;
  int extra_voxels = 400;
  double noise_sigma = 1.0;
  ConsistencyMode consistency = ConsistencyMode::Consistent;
  VoxelNonlinearity nonlinearity = VoxelNonlinearity::None;
  // Voxel signal is tanh(gain * drive) / gain when the nonlinearity is on.
  double tanh_gain = 12.0;
  // Stimuli flagged shared; the rest are participant-unique in name only.
  int shared_stimuli = -1;  // -1: all
  // Stimuli whose final repetition is missing for every participant.
  int incomplete_stimuli = 0;
  // Non-coding voxels are spread over this many extra ROIs.
  int noise_rois = 8;
  std::uint64_t seed = 0;

  int voxels() const { return true_concepts * support_size + extra_voxels; }
  int roi_count() const { return true_concepts + noise_rois; }
  void validate() const;
};

struct SynthTruth {
  Matrix true_projection;  // c* x d, orthonormal rows
  // supports[s][i]: sorted native voxel ids of concept i in participant s.
  std::vector<std::vector<std::vector<std::int64_t>>> supports;
  // support_roi[s][i]: ROI id holding concept i's support in participant s.
  std::vector<std::vector<int>> support_roi;
  std::vector<RoiAtlas> atlases;
  std::vector<std::string> participant_ids;
};

struct SynthData {
  std::vector<ResponseMatrix> responses;
  EmbeddingMatrix embeddings;
  TrialTable trials;
  SynthTruth truth;
};

SynthData generate(const SynthSpec& spec);

// Noise sigma giving coding voxels the requested mean noise ceiling (percent)
// under the spec's repetition count, from the noiseless voxel signals.
double calibrate_noise_sigma(const SynthSpec& spec, double target_nc_percent);

// |a ∩ b| / |a ∪ b|; 1 when both are empty.
double jaccard(std::vector<std::int64_t> a, std::vector<std::int64_t> b);

// Averaged class embeddings and nonnegative behavioural-style targets for
// exercising the THINGS-map fit without external data.
struct ThingsLike {
  EmbeddingMatrix u_avg;
  EmbeddingMatrix targets;
  Matrix true_map;
};

ThingsLike generate_things_like(int classes, int embed_dim, int dims, std::uint64_t seed);

void write_truth_json(const std::filesystem::path& path, const SynthSpec& spec, const SynthTruth& truth,
                      const std::filesystem::path& projection_path,
                      const std::vector<std::filesystem::path>& atlas_paths);

}  // namespace sdc
