#pragma once

#include "sdc/dataio.hpp"
#include "sdc/decoder.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sdc {

// c x d linear map into an interpretable space. ReLU at inference; leaky ReLU
// with `train_leaky_slope` while training.
struct ProjectionHead {
  Matrix w;
  double train_leaky_slope = 0.05;
  SpaceTag space = SpaceTag::Other;
  std::map<std::string, double> training;  // free-form fit metadata

  Eigen::Index concepts() const { return w.rows(); }
  Eigen::Index dims() const { return w.cols(); }
};

enum class HeadMode { Inference, Train };

Matrix apply_head(const ProjectionHead& head, const Matrix& y, HeadMode mode);

// Ridge map from averaged embeddings to behavioural dimensions, no intercept.
ProjectionHead fit_things_map(const Matrix& u_avg, const Matrix& targets, double alpha);

// Mean over rows of the squared error ||ReLU(U W^T) - T||^2; fills the W gradient when asked.
double relu_head_loss(const Matrix& w, const Matrix& u, const Matrix& targets, Matrix* grad);

struct FinetuneResult {
  ProjectionHead head;
  double loss_before = 0.0;
  double loss_after = 0.0;
  int best_step = 0;
};

// Full-batch gradient descent on the ReLU loss starting from `head`. Returns
// the lowest-loss iterate seen, so loss_after <= loss_before.
FinetuneResult finetune_relu_head(const ProjectionHead& head, const Matrix& u, const Matrix& targets, int steps,
                                  double lr);

struct PooledValSet {
  Matrix y_clip;
  Matrix y_brain;
  std::vector<std::string> participant_of_row;

  void validate() const;
};

struct SdcConfig {
  int concepts = 32;
  int iters = 10000;
  int batch = 3000;
  double lr = 2e-4;
  double slope = 0.05;
  double tau = 1.0;
  bool symmetric = false;
  int probe_every = 500;
  std::uint64_t seed = 0;
  TrainConfig adam;  // only the beta/eps fields are used

  void validate() const;
};

// Contrastive objective on one batch with CLIP-side queries and brain-side
// keys, both passed through leaky ReLU(Y W^T).
double sdc_loss(const Matrix& w, const Matrix& y_clip, const Matrix& y_brain, double slope, double tau,
                bool symmetric, Matrix* grad);

struct SdcFit {
  ProjectionHead head;
  std::vector<int> probe_iters;
  std::vector<double> probe_losses;
};

SdcFit fit_sdc(const PooledValSet& pooled, const SdcConfig& cfg);

// Top-k retrieval after mapping both matrices through the head's inference
// activation.
double space_topk(const ProjectionHead& head, const Matrix& y_true, const Matrix& y_pred, std::size_t k);

void save_head(const std::filesystem::path& dir, const ProjectionHead& head);
ProjectionHead load_head(const std::filesystem::path& dir);

}  // namespace sdc
