#include "sdc/decoder.hpp"

#include "sdc/dataio.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace sdc {

namespace fs = std::filesystem;

namespace {

Matrix normalize_rows(const Matrix& m, const char* what) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0)) fail(ErrorKind::ZeroVector, std::string(what) + " row " + std::to_string(i) + " has zero norm");
    out.row(i) /= n;
  }
  return out;
}

// Gradient of f(q / |q|) given g = df/d(q/|q|), row-wise.
Matrix normalize_backward(const Matrix& raw, const Matrix& unit, const Matrix& g) {
  Matrix out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double n = raw.row(i).norm();
    out.row(i) = (g.row(i) - unit.row(i) * unit.row(i).dot(g.row(i))) / n;
  }
  return out;
}

void apply_leaky(Matrix& m, double slope) {
  m = m.unaryExpr([slope](double x) { return leaky_relu(x, slope); });
}

}  // namespace

ContrastiveResult infonce_loss(const Matrix& queries, const Matrix& keys, double tau) {
  const Eigen::Index m = queries.rows();
  require_shape(keys.rows() == m && keys.cols() == queries.cols(), "infonce: queries and keys differ in shape");
  if (m < 2) fail(ErrorKind::InputValidation, "infonce: batch needs at least 2 rows");
  if (!(tau > 0.0)) fail(ErrorKind::InputValidation, "infonce: tau must be positive");
  require_finite(queries, ErrorKind::Numerics, "infonce queries");
  require_finite(keys, ErrorKind::Numerics, "infonce keys");

  Matrix logits = queries * keys.transpose() / tau;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    auto row = logits.row(i);
    const double mx = row.maxCoeff();
    const double diag = row(i);
    row = (row.array() - mx).exp().matrix();
    const double z = row.sum();
    loss += mx + std::log(z) - diag;
    row /= z;  // softmax probabilities
  }
  loss /= static_cast<double>(m);
  if (!std::isfinite(loss)) fail(ErrorKind::Numerics, "infonce: non-finite loss");

  // d loss / d logits = (P - I) / m
  logits.diagonal().array() -= 1.0;
  logits /= static_cast<double>(m);
  ContrastiveResult r;
  r.loss = loss;
  r.grad_queries = logits * keys / tau;
  r.grad_keys = logits.transpose() * queries / tau;
  return r;
}

ContrastiveResult contrastive_loss(const Matrix& queries, const Matrix& keys, double tau, bool symmetric) {
  ContrastiveResult fwd = infonce_loss(queries, keys, tau);
  if (!symmetric) return fwd;
  const ContrastiveResult bwd = infonce_loss(keys, queries, tau);
  fwd.loss = 0.5 * (fwd.loss + bwd.loss);
  fwd.grad_queries = 0.5 * (fwd.grad_queries + bwd.grad_keys);
  fwd.grad_keys = 0.5 * (fwd.grad_keys + bwd.grad_queries);
  return fwd;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::Config, "train config: " + m); };
  if (epochs < 0) bad("epochs must be >= 0");
  if (batch_size < 2) bad("batch_size must be >= 2");
  if (!(lr_init > 0.0)) bad("lr_init must be positive");
  if (!(lr_drop_factor > 0.0)) bad("lr_drop_factor must be positive");
  if (!(tau > 0.0)) bad("tau must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) bad("adam betas in [0,1)");
  if (!(adam_eps > 0.0)) bad("adam_eps must be positive");
}

double TrainConfig::learning_rate(int epoch) const {
  double lr = lr_init;
  for (int drop : lr_drop_epochs) {
    if (epoch > drop) lr /= lr_drop_factor;
  }
  return lr;
}

void adam_update(Eigen::Ref<Matrix> param, const Matrix& grad, AdamMoments& moments, long step, double lr,
                 const TrainConfig& cfg) {
  if (moments.m.size() == 0) {
    moments.m = Matrix::Zero(param.rows(), param.cols());
    moments.v = Matrix::Zero(param.rows(), param.cols());
  }
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  moments.m = b1 * moments.m + (1.0 - b1) * grad;
  moments.v = b2 * moments.v + (1.0 - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  const auto m_hat = moments.m.array() / c1;
  const auto v_hat = moments.v.array() / c2;
  param.array() -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
}

void DecoderMLP::validate() const {
  require_shape(b1.rows() == 1 && b1.cols() == w1.rows(), "decoder: b1 shape");
  require_shape(w2.cols() == w1.rows(), "decoder: w2 columns must equal hidden size");
  require_shape(b2.rows() == 1 && b2.cols() == w2.rows(), "decoder: b2 shape");
  if (!(w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite())) {
    fail(ErrorKind::Numerics, "decoder: non-finite parameter");
  }
}

DecoderMLP init_mlp(Eigen::Index inputs, Eigen::Index hidden, Eigen::Index outputs, std::uint64_t seed,
                    double leaky_slope) {
  if (inputs <= 0 || hidden <= 0 || outputs <= 0) fail(ErrorKind::Shape, "init_mlp: sizes must be positive");
  std::uint64_t state = seed;
  auto uniform = [&state](Eigen::Index r, Eigen::Index c, double bound) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * next_uniform(state) - 1.0) * bound;
    return m;
  };
  DecoderMLP model;
  const double bound1 = 1.0 / std::sqrt(static_cast<double>(inputs));
  const double bound2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  model.w1 = uniform(hidden, inputs, bound1);
  model.b1 = uniform(1, hidden, bound1);
  model.w2 = uniform(outputs, hidden, bound2);
  model.b2 = uniform(1, outputs, bound2);
  model.leaky_slope = leaky_slope;
  return model;
}

MlpActivations mlp_forward(const DecoderMLP& model, const Matrix& x) {
  require_shape(x.cols() == model.inputs(), "decoder: input has " + std::to_string(x.cols()) + " columns, model expects " +
                                                std::to_string(model.inputs()));
  MlpActivations a;
  a.pre = x * model.w1.transpose();
  a.pre.rowwise() += model.b1.row(0);
  a.hidden = a.pre;
  apply_leaky(a.hidden, model.leaky_slope);
  a.out = a.hidden * model.w2.transpose();
  a.out.rowwise() += model.b2.row(0);
  return a;
}

MlpGradients mlp_backward(const DecoderMLP& model, const Matrix& x, const MlpActivations& act,
                          const Matrix& grad_out) {
  MlpGradients g;
  g.w2 = grad_out.transpose() * act.hidden;
  g.b2 = grad_out.colwise().sum();
  Matrix d_hidden = grad_out * model.w2;
  const double slope = model.leaky_slope;
  d_hidden.array() *= act.pre.unaryExpr([slope](double v) { return leaky_relu_grad(v, slope); }).array();
  g.w1 = d_hidden.transpose() * x;
  g.b1 = d_hidden.colwise().sum();
  return g;
}

double mlp_batch_loss(const DecoderMLP& model, const Matrix& x, const Matrix& y, const TrainConfig& cfg,
                      MlpGradients* grads) {
  require_shape(x.rows() == y.rows(), "decoder: X and Y row counts differ");
  require_shape(y.cols() == model.outputs(), "decoder: Y columns differ from model outputs");
  const MlpActivations act = mlp_forward(model, x);
  double loss = 0.0;
  Matrix grad_out;
  if (cfg.normalize_embeddings) {
    const Matrix q = normalize_rows(act.out, "decoded");
    const Matrix k = normalize_rows(y, "target");
    const ContrastiveResult r = infonce_loss(q, k, cfg.tau);
    loss = r.loss;
    if (grads) grad_out = normalize_backward(act.out, q, r.grad_queries);
  } else {
    const ContrastiveResult r = infonce_loss(act.out, y, cfg.tau);
    loss = r.loss;
    if (grads) grad_out = r.grad_queries;
  }
  if (grads) *grads = mlp_backward(model, x, act, grad_out);
  return loss;
}

MlpTrainer::MlpTrainer(DecoderMLP model, TrainConfig cfg) : model_(std::move(model)), cfg_(std::move(cfg)) {
  cfg_.validate();
  model_.validate();
}

double MlpTrainer::step(const Matrix& x, const Matrix& y, double lr) {
  MlpGradients g;
  const double loss = mlp_batch_loss(model_, x, y, cfg_, &g);
  if (!std::isfinite(loss)) fail(ErrorKind::TrainingDiverged, "decoder loss became non-finite");
  ++step_;
  adam_update(model_.w1, g.w1, mw1_, step_, lr, cfg_);
  adam_update(model_.b1, g.b1, mb1_, step_, lr, cfg_);
  adam_update(model_.w2, g.w2, mw2_, step_, lr, cfg_);
  adam_update(model_.b2, g.b2, mb2_, step_, lr, cfg_);
  return loss;
}

TrainedDecoder train_mlp(const Matrix& x, const Matrix& y, const TrainConfig& cfg, Eigen::Index hidden) {
  cfg.validate();
  require_shape(x.rows() == y.rows(), "train_mlp: X and Y row counts differ");
  if (x.rows() < 2) fail(ErrorKind::InputValidation, "train_mlp: need at least 2 rows");
  require_finite(x, ErrorKind::Data, "train_mlp X");
  require_finite(y, ErrorKind::Data, "train_mlp Y");

  MlpTrainer trainer(init_mlp(x.cols(), hidden, y.cols(), derive_seed(cfg.seed, "mlp-init")), cfg);
  std::uint64_t shuffle_state = derive_seed(cfg.seed, "mlp-shuffle");
  const auto n = static_cast<std::size_t>(x.rows());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  TrainRecord record;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate(epoch);
    const auto order = random_permutation(n, shuffle_state);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t stop = std::min(n, start + bs);
      if (stop - start < 2) break;
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
      total += trainer.step(take_rows(x, idx), take_rows(y, idx), lr);
      ++batches;
    }
    const double mean = batches > 0 ? total / batches : 0.0;
    if (!std::isfinite(mean)) fail(ErrorKind::TrainingDiverged, "decoder epoch loss is non-finite");
    record.epoch_losses.push_back(mean);
    record.epoch_learning_rates.push_back(lr);
  }
  record.final_loss = record.epoch_losses.empty() ? 0.0 : record.epoch_losses.back();
  record.steps = trainer.steps();
  return {trainer.model(), std::move(record)};
}

Matrix decode(const DecoderMLP& model, const Matrix& x) { return mlp_forward(model, x).out; }

void save_decoder(const fs::path& dir, const TrainedDecoder& decoder, const TrainConfig& cfg) {
  fs::create_directories(dir);
  const auto& m = decoder.model;
  write_matrix_file(dir / "W1.sdcm", m.w1);
  write_matrix_file(dir / "b1.sdcm", m.b1);
  write_matrix_file(dir / "W2.sdcm", m.w2);
  write_matrix_file(dir / "b2.sdcm", m.b2);
  nlohmann::json j;
  j["hidden"] = m.hidden();
  j["dims"] = {{"inputs", m.inputs()}, {"outputs", m.outputs()}};
  j["slope"] = m.leaky_slope;
  j["train_config"] = {{"epochs", cfg.epochs},
                       {"batch_size", cfg.batch_size},
                       {"lr_init", cfg.lr_init},
                       {"lr_drop_epochs", cfg.lr_drop_epochs},
                       {"lr_drop_factor", cfg.lr_drop_factor},
                       {"tau", cfg.tau},
                       {"seed", cfg.seed},
                       {"adam_beta1", cfg.adam_beta1},
                       {"adam_beta2", cfg.adam_beta2},
                       {"adam_eps", cfg.adam_eps},
                       {"normalize_embeddings", cfg.normalize_embeddings}};
  j["final_loss"] = decoder.record.final_loss;
  j["epoch_losses"] = decoder.record.epoch_losses;
  std::ofstream out(dir / "model.json");
  if (!out) fail(ErrorKind::Io, "cannot write " + (dir / "model.json").string());
  out << j.dump(1) << '\n';
}

DecoderMLP load_decoder(const fs::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) fail(ErrorKind::Io, "cannot open " + (dir / "model.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, (dir / "model.json").string() + ": " + e.what());
  }
  DecoderMLP m;
  m.w1 = read_matrix_file(dir / "W1.sdcm").values;
  m.b1 = read_matrix_file(dir / "b1.sdcm").values;
  m.w2 = read_matrix_file(dir / "W2.sdcm").values;
  m.b2 = read_matrix_file(dir / "b2.sdcm").values;
  m.leaky_slope = j.value("slope", 0.01);
  m.validate();
  return m;
}

std::vector<double> default_ridge_grid() { return {0.1, 1, 10, 100, 1000, 10000, 100000}; }

namespace {

struct Centered {
  Matrix x, y;
  RowVector x_mean, y_mean;
};

Centered center(const Matrix& x, const Matrix& y) {
  Centered c;
  c.x_mean = x.colwise().mean();
  c.y_mean = y.colwise().mean();
  c.x = x.rowwise() - c.x_mean;
  c.y = y.rowwise() - c.y_mean;
  return c;
}

RidgeModel assemble(const Matrix& coef, const Centered& c, double lambda) {
  RidgeModel m;
  m.w = coef.transpose();
  m.b = c.y_mean - c.x_mean * coef;
  m.lambda = lambda;
  return m;
}

}  // namespace

RidgeModel fit_ridge(const Matrix& x, const Matrix& y, double lambda) {
  require_shape(x.rows() == y.rows(), "ridge: X and Y row counts differ");
  const Centered c = center(x, y);
  return assemble(ridge_solve(c.x, c.y, lambda), c, lambda);
}

RidgeFit train_ridge(const Matrix& x, const Matrix& y, const std::vector<double>& grid, const Matrix& x_val,
                     const Matrix& y_val) {
  if (grid.empty()) fail(ErrorKind::InputValidation, "ridge: lambda grid is empty");
  require_shape(x.rows() == y.rows(), "ridge: X and Y row counts differ");
  require_shape(x_val.cols() == x.cols() && y_val.cols() == y.cols() && x_val.rows() == y_val.rows(),
                "ridge: validation shapes differ from training");
  const Centered c = center(x, y);
  const RidgeSolver solver(c.x);
  RidgeFit fit;
  fit.selection.grid = grid;
  double best = -1.0;
  for (double lambda : grid) {
    RidgeModel m = assemble(solver.solve(c.y, lambda), c, lambda);
    const double acc = topk_accuracy(y_val, predict(m, x_val), 1);
    fit.selection.val_top1.push_back(acc);
    if (acc > best) {
      best = acc;
      fit.model = std::move(m);
      fit.selection.best_lambda = lambda;
    }
  }
  return fit;
}

Matrix predict(const RidgeModel& model, const Matrix& x) {
  require_shape(x.cols() == model.w.cols(), "ridge: input column count differs from model");
  Matrix out = x * model.w.transpose();
  out.rowwise() += model.b.row(0);
  return out;
}

std::vector<std::size_t> retrieval_ranks(const Matrix& y_true, const Matrix& y_pred) {
  require_shape(y_true.rows() == y_pred.rows() && y_true.cols() == y_pred.cols(),
                "retrieval: true and predicted matrices differ in shape");
  const Matrix t = normalize_rows(y_true, "true");
  const Matrix p = normalize_rows(y_pred, "predicted");
  const Matrix sim = p * t.transpose();
  const Eigen::Index n = y_true.rows();
  std::vector<std::size_t> ranks(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double own = sim(i, i);
    std::size_t rank = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double s = sim(i, j);
      if (s > own || (s == own && j < i)) ++rank;
    }
    ranks[static_cast<std::size_t>(i)] = rank;
  }
  return ranks;
}

double topk_accuracy(const Matrix& y_true, const Matrix& y_pred, std::size_t k) {
  const auto n = static_cast<std::size_t>(y_true.rows());
  if (k < 1 || k > n) {
    fail(ErrorKind::InputValidation, "top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  const auto ranks = retrieval_ranks(y_true, y_pred);
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r < k; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace sdc
