#pragma once

#include "sdc/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace sdc {

enum class SpaceTag { Clip, Things, Sdc, Other };

std::string_view space_tag_name(SpaceTag tag);
SpaceTag parse_space_tag(std::string_view name);

struct EmbeddingMatrix {
  Matrix values;
  SpaceTag space = SpaceTag::Other;
  std::vector<std::string> stimulus_ids;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }

  // Throws Data on non-finite entries, duplicate ids or an id/row mismatch.
  void validate() const;
  // Row index per stimulus id.
  std::map<std::string, Eigen::Index> index() const;
};

struct ResponseMatrix {
  Matrix values;
  std::string participant_id;
  std::vector<std::int64_t> voxel_ids;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }

  void validate() const;
};

struct TrialRecord {
  std::size_t trial_row = 0;
  std::string stimulus_id;
  std::string participant_id;
  int session = 0;
  int repetition = 1;
  bool shared = false;
};

struct TrialTable {
  std::vector<TrialRecord> records;

  // Checks unique (stimulus, participant, repetition) triples and gap-free
  // repetition numbering 1..r per (participant, stimulus).
  void validate() const;
  TrialTable for_participant(const std::string& participant_id) const;
  std::vector<std::string> participants() const;
};

struct DatasetSplit {
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;
  std::vector<std::size_t> test_rows;
  std::uint64_t seed = 0;
};

inline constexpr int kUnassignedRoi = -1;

struct RoiAtlas {
  std::map<std::int64_t, int> voxel_to_roi;
  int roi_count = 360;

  // Throws Atlas for a voxel missing from the map.
  int roi_of(std::int64_t voxel) const;
};

// Binary container -----------------------------------------------------------

struct MatrixMeta {
  std::optional<SpaceTag> space;
  std::optional<std::string> participant_id;
  std::optional<std::vector<std::string>> stimulus_ids;
  std::optional<std::vector<std::int64_t>> voxel_ids;
};

struct MatrixFile {
  Matrix values;
  std::optional<MatrixMeta> meta;
};

std::filesystem::path sidecar_path(const std::filesystem::path& path);

MatrixFile read_matrix_file(const std::filesystem::path& path);
void write_matrix_file(const std::filesystem::path& path, const Matrix& values,
                       const std::optional<MatrixMeta>& meta = std::nullopt);

// A sidecar carrying participant_id or voxel_ids yields a ResponseMatrix;
// anything else yields an EmbeddingMatrix (ids default to row numbers).
std::variant<EmbeddingMatrix, ResponseMatrix> load_matrix(const std::filesystem::path& path);
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
ResponseMatrix load_responses(const std::filesystem::path& path);
void save_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& m);
void save_responses(const std::filesystem::path& path, const ResponseMatrix& m);

// CSV tables -----------------------------------------------------------------

TrialTable read_trials(const std::filesystem::path& path);
void write_trials(const std::filesystem::path& path, const TrialTable& trials);
RoiAtlas read_atlas(const std::filesystem::path& path, int roi_count = 360);
void write_atlas(const std::filesystem::path& path, const RoiAtlas& atlas);

// Splits and voxel selection -------------------------------------------------

// Stimulus-level split of one participant's trials. Stimuli with fewer than
// the maximum repetition count always land in train; test draws only from
// shared, fully repeated stimuli.
DatasetSplit make_split(const TrialTable& trials, std::size_t val_size, std::size_t test_size,
                        std::uint64_t seed);

// Per-voxel noise ceiling (percent of variance explainable by the stimulus)
// from repeated presentations within `train_rows`.
std::vector<double> noise_ceiling(const ResponseMatrix& responses, const TrialTable& trials,
                                  const std::vector<std::size_t>& train_rows);

double noise_ceiling_from_variances(double signal_var, double noise_var, double mean_reps);

// Strictly greater than `threshold`, ascending. Throws EmptySelection.
std::vector<std::size_t> select_voxels(const std::vector<double>& nc, double threshold);

ResponseMatrix select_columns(const ResponseMatrix& responses, const std::vector<std::size_t>& columns);

// Per-voxel standardization using statistics from a subset of rows.
struct ZScore {
  RowVector mean;
  RowVector scale;

  static ZScore fit(const Matrix& x, const std::vector<std::size_t>& rows);
  Matrix apply(const Matrix& x) const;
};

// Averages the given trial rows per stimulus. Stimulus order follows first
// appearance in `rows`.
struct StimulusAverages {
  Matrix values;
  std::vector<std::string> stimulus_ids;
};

StimulusAverages average_by_stimulus(const Matrix& x, const TrialTable& trials,
                                     const std::vector<std::size_t>& rows);

// Gathers embedding rows for a list of stimulus ids. Throws Data on an unknown id.
Matrix gather_embeddings(const EmbeddingMatrix& embeddings, const std::vector<std::string>& ids);

// Row-aligned embeddings for individual trial rows.
Matrix trial_embeddings(const EmbeddingMatrix& embeddings, const TrialTable& trials,
                        const std::vector<std::size_t>& rows);

Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& rows);

}  // namespace sdc
