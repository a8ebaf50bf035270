#include "sdc/concept_spaces.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>

namespace sdc {

namespace fs = std::filesystem;

namespace {

Matrix leaky(const Matrix& m, double slope) {
  return m.unaryExpr([slope](double x) { return leaky_relu(x, slope); });
}

Matrix leaky_grad(const Matrix& m, double slope) {
  return m.unaryExpr([slope](double x) { return leaky_relu_grad(x, slope); });
}

// Draws `count` distinct indices from 0..n-1 by a partial Fisher-Yates pass
// over a persistent pool.
std::vector<std::size_t> draw_batch(std::vector<std::size_t>& pool, std::size_t count, std::uint64_t& state) {
  const std::size_t n = pool.size();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(next_random(state) % (n - i));
    std::swap(pool[i], pool[j]);
  }
  return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count)};
}

}  // namespace

Matrix apply_head(const ProjectionHead& head, const Matrix& y, HeadMode mode) {
  require_shape(y.cols() == head.dims(), "head: input has " + std::to_string(y.cols()) + " columns, head expects " +
                                             std::to_string(head.dims()));
  const Matrix pre = y * head.w.transpose();
  return leaky(pre, mode == HeadMode::Inference ? 0.0 : head.train_leaky_slope);
}

ProjectionHead fit_things_map(const Matrix& u_avg, const Matrix& targets, double alpha) {
  require_shape(u_avg.rows() == targets.rows(), "things map: U and T row counts differ");
  if (!(alpha > 0.0)) fail(ErrorKind::InputValidation, "things map: alpha must be positive");
  require_finite(u_avg, ErrorKind::Data, "things map U");
  require_finite(targets, ErrorKind::Data, "things map T");
  ProjectionHead head;
  head.w = ridge_solve(u_avg, targets, alpha).transpose();
  head.train_leaky_slope = 0.0;
  head.space = SpaceTag::Things;
  head.training["alpha"] = alpha;
  return head;
}

double relu_head_loss(const Matrix& w, const Matrix& u, const Matrix& targets, Matrix* grad) {
  require_shape(u.cols() == w.cols() && targets.cols() == w.rows() && u.rows() == targets.rows(),
                "relu head loss: shape mismatch");
  const Matrix pre = u * w.transpose();
  Matrix resid = pre.cwiseMax(0.0) - targets;
  const double n = static_cast<double>(u.rows());
  const double loss = resid.squaredNorm() / n;
  if (grad) {
    resid.array() *= (pre.array() > 0.0).cast<double>();
    *grad = (2.0 / n) * resid.transpose() * u;
  }
  return loss;
}

FinetuneResult finetune_relu_head(const ProjectionHead& head, const Matrix& u, const Matrix& targets, int steps,
                                  double lr) {
  if (steps < 0) fail(ErrorKind::InputValidation, "finetune: steps must be >= 0");
  if (!(lr > 0.0)) fail(ErrorKind::InputValidation, "finetune: lr must be positive");
  FinetuneResult r;
  r.head = head;
  Matrix w = head.w;
  Matrix grad;
  double loss = relu_head_loss(w, u, targets, &grad);
  r.loss_before = loss;
  r.loss_after = loss;
  for (int step = 1; step <= steps; ++step) {
    w -= lr * grad;
    loss = relu_head_loss(w, u, targets, &grad);
    if (!std::isfinite(loss)) fail(ErrorKind::TrainingDiverged, "finetune: loss became non-finite");
    if (loss < r.loss_after) {
      r.loss_after = loss;
      r.head.w = w;
      r.best_step = step;
    }
  }
  r.head.training["finetune_steps"] = steps;
  r.head.training["finetune_lr"] = lr;
  r.head.training["loss_before"] = r.loss_before;
  r.head.training["loss_after"] = r.loss_after;
  return r;
}

void PooledValSet::validate() const {
  require_shape(y_clip.rows() == y_brain.rows() && y_clip.cols() == y_brain.cols(),
                "pooled set: clip and brain matrices differ in shape");
  require_shape(participant_of_row.empty() || participant_of_row.size() == static_cast<std::size_t>(y_clip.rows()),
                "pooled set: participant labels do not match row count");
  require_finite(y_clip, ErrorKind::Data, "pooled clip embeddings");
  require_finite(y_brain, ErrorKind::Data, "pooled brain embeddings");
}

void SdcConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::Config, "sdc config: " + m); };
  if (concepts < 1) bad("concepts must be >= 1");
  if (iters < 0) bad("iters must be >= 0");
  if (batch < 2) bad("batch must be >= 2");
  if (!(lr > 0.0)) bad("lr must be positive");
  if (!(slope >= 0.0)) bad("slope must be >= 0");
  if (!(tau > 0.0)) bad("tau must be positive");
  if (probe_every < 1) bad("probe_every must be >= 1");
}

double sdc_loss(const Matrix& w, const Matrix& y_clip, const Matrix& y_brain, double slope, double tau,
                bool symmetric, Matrix* grad) {
  require_shape(y_clip.cols() == w.cols() && y_brain.cols() == w.cols(), "sdc loss: embedding width differs from W");
  const Matrix pre_q = y_clip * w.transpose();
  const Matrix pre_k = y_brain * w.transpose();
  const ContrastiveResult r = contrastive_loss(leaky(pre_q, slope), leaky(pre_k, slope), tau, symmetric);
  if (grad) {
    const Matrix dq = r.grad_queries.cwiseProduct(leaky_grad(pre_q, slope));
    const Matrix dk = r.grad_keys.cwiseProduct(leaky_grad(pre_k, slope));
    *grad = dq.transpose() * y_clip + dk.transpose() * y_brain;
  }
  return r.loss;
}

SdcFit fit_sdc(const PooledValSet& pooled, const SdcConfig& cfg) {
  cfg.validate();
  pooled.validate();
  const auto rows = static_cast<std::size_t>(pooled.y_clip.rows());
  const auto batch = static_cast<std::size_t>(cfg.batch);
  if (rows < batch) {
    fail(ErrorKind::InputValidation,
         "fit_sdc: pooled set has " + std::to_string(rows) + " rows, fewer than batch " + std::to_string(batch));
  }
  const Eigen::Index d = pooled.y_clip.cols();

  std::uint64_t init_state = derive_seed(cfg.seed, "sdc-init");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix w(cfg.concepts, d);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = scale * next_normal(init_state);

  std::vector<std::size_t> pool(rows);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::uint64_t probe_state = derive_seed(cfg.seed, "sdc-probe");
  const auto probe_rows = draw_batch(pool, batch, probe_state);
  const Matrix probe_clip = take_rows(pooled.y_clip, probe_rows);
  const Matrix probe_brain = take_rows(pooled.y_brain, probe_rows);

  SdcFit fit;
  auto probe = [&](int iter) {
    const double l = sdc_loss(w, probe_clip, probe_brain, cfg.slope, cfg.tau, cfg.symmetric, nullptr);
    fit.probe_iters.push_back(iter);
    fit.probe_losses.push_back(l);
  };
  probe(0);

  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::uint64_t batch_state = derive_seed(cfg.seed, "sdc-batches");
  AdamMoments moments;
  Matrix grad;
  for (int it = 1; it <= cfg.iters; ++it) {
    const auto idx = draw_batch(pool, batch, batch_state);
    const double loss = sdc_loss(w, take_rows(pooled.y_clip, idx), take_rows(pooled.y_brain, idx), cfg.slope,
                                 cfg.tau, cfg.symmetric, &grad);
    if (!std::isfinite(loss)) fail(ErrorKind::TrainingDiverged, "fit_sdc: loss became non-finite");
    adam_update(w, grad, moments, it, cfg.lr, cfg.adam);
    if (it % cfg.probe_every == 0 || it == cfg.iters) probe(it);
  }

  fit.head.w = std::move(w);
  fit.head.train_leaky_slope = cfg.slope;
  fit.head.space = SpaceTag::Sdc;
  fit.head.training = {{"iters", cfg.iters},
                       {"batch", cfg.batch},
                       {"lr", cfg.lr},
                       {"tau", cfg.tau},
                       {"symmetric", cfg.symmetric ? 1.0 : 0.0},
                       {"seed", static_cast<double>(cfg.seed)},
                       {"final_probe_loss", fit.probe_losses.back()}};
  return fit;
}

double space_topk(const ProjectionHead& head, const Matrix& y_true, const Matrix& y_pred, std::size_t k) {
  return topk_accuracy(apply_head(head, y_true, HeadMode::Inference), apply_head(head, y_pred, HeadMode::Inference),
                       k);
}

void save_head(const fs::path& dir, const ProjectionHead& head) {
  fs::create_directories(dir);
  write_matrix_file(dir / "W.sdcm", head.w);
  nlohmann::json j;
  j["c"] = head.concepts();
  j["d"] = head.dims();
  j["slope"] = head.train_leaky_slope;
  j["space_tag"] = std::string(space_tag_name(head.space));
  j["training"] = head.training;
  std::ofstream out(dir / "head.json");
  if (!out) fail(ErrorKind::Io, "cannot write " + (dir / "head.json").string());
  out << j.dump(1) << '\n';
}

ProjectionHead load_head(const fs::path& dir) {
  std::ifstream in(dir / "head.json");
  if (!in) fail(ErrorKind::Io, "cannot open " + (dir / "head.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, (dir / "head.json").string() + ": " + e.what());
  }
  ProjectionHead head;
  head.w = read_matrix_file(dir / "W.sdcm").values;
  head.train_leaky_slope = j.value("slope", 0.05);
  head.space = parse_space_tag(j.value("space_tag", std::string("other")));
  if (j.contains("training")) head.training = j["training"].get<std::map<std::string, double>>();
  require_finite(head.w, ErrorKind::Data, "head weights");
  return head;
}

}  // namespace sdc
