#pragma once

#include "sdc/common.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sdc {

// InfoNCE over an in-batch similarity matrix: row i of `keys` is the positive
// for row i of `queries`, every other key row is a negative.
struct ContrastiveResult {
  double loss = 0.0;
  Matrix grad_queries;
  Matrix grad_keys;
};

ContrastiveResult infonce_loss(const Matrix& queries, const Matrix& keys, double tau);

// Mean of both directions when `symmetric` is set.
ContrastiveResult contrastive_loss(const Matrix& queries, const Matrix& keys, double tau, bool symmetric);

struct TrainConfig {
  int epochs = 12;
  int batch_size = 128;
  double lr_init = 1e-4;
  std::vector<int> lr_drop_epochs{3, 6, 9};
  double lr_drop_factor = 10.0;
  double tau = 1.0;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool normalize_embeddings = false;

  void validate() const;
  // `epoch` is 1-based; the rate drops after each listed epoch completes.
  double learning_rate(int epoch) const;
};

struct AdamMoments {
  Matrix m;
  Matrix v;
};

// One bias-corrected Adam update of `param` in place. `step` is 1-based.
void adam_update(Eigen::Ref<Matrix> param, const Matrix& grad, AdamMoments& moments, long step, double lr,
                 const TrainConfig& cfg);

struct DecoderMLP {
  Matrix w1;  // hidden x voxels
  Matrix b1;  // 1 x hidden
  Matrix w2;  // dims x hidden
  Matrix b2;  // 1 x dims
  double leaky_slope = 0.01;

  Eigen::Index inputs() const { return w1.cols(); }
  Eigen::Index hidden() const { return w1.rows(); }
  Eigen::Index outputs() const { return w2.rows(); }
  void validate() const;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
DecoderMLP init_mlp(Eigen::Index inputs, Eigen::Index hidden, Eigen::Index outputs, std::uint64_t seed,
                    double leaky_slope = 0.01);

struct MlpActivations {
  Matrix pre;     // n x hidden
  Matrix hidden;  // leaky ReLU of pre
  Matrix out;     // n x dims
};

struct MlpGradients {
  Matrix w1, b1, w2, b2;
};

MlpActivations mlp_forward(const DecoderMLP& model, const Matrix& x);
MlpGradients mlp_backward(const DecoderMLP& model, const Matrix& x, const MlpActivations& act,
                          const Matrix& grad_out);

// Contrastive loss of the MLP on one batch and its parameter gradients.
double mlp_batch_loss(const DecoderMLP& model, const Matrix& x, const Matrix& y, const TrainConfig& cfg,
                      MlpGradients* grads);

class MlpTrainer {
 public:
  MlpTrainer(DecoderMLP model, TrainConfig cfg);

  // One Adam step on a batch; returns the pre-update batch loss.
  double step(const Matrix& x, const Matrix& y, double lr);

  const DecoderMLP& model() const { return model_; }
  long steps() const { return step_; }

 private:
  DecoderMLP model_;
  TrainConfig cfg_;
  AdamMoments mw1_, mb1_, mw2_, mb2_;
  long step_ = 0;
};

struct TrainRecord {
  std::vector<double> epoch_losses;
  std::vector<double> epoch_learning_rates;
  double final_loss = 0.0;
  long steps = 0;
};

struct TrainedDecoder {
  DecoderMLP model;
  TrainRecord record;
};

// Adam on InfoNCE(MLP(X batch), Y batch) with per-epoch shuffling. Throws
// TrainingDiverged on a non-finite loss.
TrainedDecoder train_mlp(const Matrix& x, const Matrix& y, const TrainConfig& cfg, Eigen::Index hidden);

Matrix decode(const DecoderMLP& model, const Matrix& x);

void save_decoder(const std::filesystem::path& dir, const TrainedDecoder& decoder, const TrainConfig& cfg);
DecoderMLP load_decoder(const std::filesystem::path& dir);

// Ridge baseline ---------------------------------------------------------------

struct RidgeModel {
  Matrix w;  // dims x voxels
  Matrix b;  // 1 x dims
  double lambda = 0.0;
};

struct RidgeSelection {
  std::vector<double> grid;
  std::vector<double> val_top1;
  double best_lambda = 0.0;
};

struct RidgeFit {
  RidgeModel model;
  RidgeSelection selection;
};

std::vector<double> default_ridge_grid();

// Closed form with intercept via column centering.
RidgeModel fit_ridge(const Matrix& x, const Matrix& y, double lambda);
// Fits every lambda on (x, y) and keeps the one with the best validation
// top-1 accuracy (first in grid order on ties).
RidgeFit train_ridge(const Matrix& x, const Matrix& y, const std::vector<double>& grid, const Matrix& x_val,
                     const Matrix& y_val);
Matrix predict(const RidgeModel& model, const Matrix& x);

// Retrieval --------------------------------------------------------------------

// Rank (0-based) of true row i among all true rows by cosine similarity to
// predicted row i; ties go to the lower row index. Throws ZeroVector.
std::vector<std::size_t> retrieval_ranks(const Matrix& y_true, const Matrix& y_pred);

double topk_accuracy(const Matrix& y_true, const Matrix& y_pred, std::size_t k);

inline double chance_topk(std::size_t k, std::size_t n) { return 100.0 * static_cast<double>(k) / static_cast<double>(n); }

}  // namespace sdc
