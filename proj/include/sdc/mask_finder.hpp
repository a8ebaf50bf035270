#pragma once

#include "sdc/concept_spaces.hpp"
#include "sdc/decoder.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace sdc {

// All LASSO routines center y and leave X as given; the objective is
// (1/2n)||X m - y_c||^2 + alpha ||m||_1.

struct LassoOptions {
  double tol = 1e-7;
  int max_sweeps = 10000;
  const Vector* warm_start = nullptr;
  // Called after every sweep with the 1-based sweep number and the objective.
  std::function<void(int, double)> on_sweep;
};

struct LassoResult {
  Vector coef;
  int sweeps = 0;
  double max_change = 0.0;
  bool converged = false;
};

LassoResult lasso_cd(const Matrix& x, const Vector& y, double alpha, const LassoOptions& opts = {});

double lasso_objective(const Matrix& x, const Vector& y, const Vector& coef, double alpha);

// Smallest alpha giving the all-zero solution: ||X^T y_c||_inf / n.
double lasso_alpha_max(const Matrix& x, const Vector& y);

struct ConceptMask {
  std::string participant_id;
  int concept_index = 0;
  std::vector<std::int64_t> voxel_ids;  // native id of each weight
  Vector lasso_weights;
  double alpha = 0.0;
  int sweeps = 0;
  double achieved_tol = 0.0;
  bool converged = true;

  std::vector<std::uint8_t> binary() const;
  std::vector<std::size_t> support() const;              // column positions
  std::vector<std::int64_t> support_voxels() const;      // native ids, ascending
};

ConceptMask fit_lasso_mask(const Matrix& x, const Vector& y, double alpha, const LassoOptions& opts = {});

double kkt_check(const Matrix& x, const Vector& y, const ConceptMask& mask);

// Re-expresses a mask over another voxel id list; ids absent from the mask
// get weight 0. Throws Atlas when a mask voxel is not in `voxel_ids`.
ConceptMask expand_mask(const ConceptMask& mask, const std::vector<std::int64_t>& voxel_ids);

// Undefined entries are NaN.
struct SpecificityMatrix {
  Matrix values;
  std::string participant_id;
  bool averaged = false;

  bool defined(Eigen::Index i, Eigen::Index j) const { return std::isfinite(values(i, j)); }
};

inline constexpr double kSpecificityMinDenominator = 1e-6;

using DecodeFn = std::function<Matrix(const Matrix&)>;

// D(i, j): Pearson of concept-i scores between true embeddings and decodes
// from inputs restricted to mask j, over the same Pearson with unmasked inputs.
SpecificityMatrix specificity_matrix(const DecodeFn& decode_fn, const std::vector<ConceptMask>& masks,
                                     const Matrix& x_test, const Matrix& y_test_clip, const ProjectionHead& head);
SpecificityMatrix specificity_matrix(const DecoderMLP& model, const std::vector<ConceptMask>& masks,
                                     const Matrix& x_test, const Matrix& y_test_clip, const ProjectionHead& head);

// Entrywise mean over defined entries.
SpecificityMatrix average_specificity(const std::vector<SpecificityMatrix>& list);

Matrix apply_mask(const Matrix& x, const ConceptMask& mask);

// `participant_id,concept_index,voxel_index,weight`, nonzero weights only.
void write_masks_csv(const std::filesystem::path& path, const std::vector<ConceptMask>& masks);
// Masks come back in compact form: voxel_ids hold only the support.
std::vector<ConceptMask> read_masks_csv(const std::filesystem::path& path, double alpha);

void write_specificity_csv(const std::filesystem::path& path, const SpecificityMatrix& d);
SpecificityMatrix read_specificity_csv(const std::filesystem::path& path);

}  // namespace sdc
