#include "sdc/concept_spaces.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <functional>

using namespace sdc;
using testutil::gaussian;

namespace {

Matrix numeric_grad(Matrix& p, const std::function<double()>& f, double h = 1e-6) {
  Matrix g(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double keep = p.data()[i];
    p.data()[i] = keep + h;
    const double up = f();
    p.data()[i] = keep - h;
    const double down = f();
    p.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double relu_loss_oracle(const Matrix& w, const Matrix& u, const Matrix& t) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < u.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.rows(); ++c) {
      const double p = std::max(0.0, u.row(r).dot(w.row(c)));
      total += (p - t(r, c)) * (p - t(r, c));
    }
  }
  return total / static_cast<double>(u.rows());
}

}  // namespace

TEST_CASE("apply_head activations") {
  ProjectionHead h;
  h.w = Matrix::Identity(2, 2);
  h.train_leaky_slope = 0.05;
  CHECK(apply_head(h, Matrix::Zero(3, 2), HeadMode::Inference).cwiseAbs().maxCoeff() == 0.0);
  CHECK(apply_head(h, Matrix::Zero(3, 2), HeadMode::Train).cwiseAbs().maxCoeff() == 0.0);
  Matrix y(1, 2);
  y << -2.0, 3.0;
  const Matrix tr = apply_head(h, y, HeadMode::Train);
  CHECK(tr(0, 0) == doctest::Approx(-0.1));
  CHECK(tr(0, 1) == 3.0);
  const Matrix inf = apply_head(h, y, HeadMode::Inference);
  CHECK(inf(0, 0) == 0.0);
  CHECK(inf(0, 1) == 3.0);
  CHECK_THROWS_AS(apply_head(h, Matrix::Zero(2, 3), HeadMode::Inference), Error);
}

TEST_CASE("apply_head property: inference nonnegative, agrees with train on nonnegative pre-activations") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    ProjectionHead h;
    h.w = gaussian(5, 7, rng);
    const Matrix y = gaussian(30, 7, rng);
    const Matrix pre = y * h.w.transpose();
    const Matrix inf = apply_head(h, y, HeadMode::Inference);
    const Matrix tr = apply_head(h, y, HeadMode::Train);
    CHECK(inf.minCoeff() >= 0.0);
    for (Eigen::Index i = 0; i < pre.size(); ++i) {
      if (pre.data()[i] >= 0.0) CHECK(inf.data()[i] == tr.data()[i]);
    }
  }
}

TEST_CASE("things map: shape, exact recovery and normal equations") {
  std::mt19937_64 rng(2);
  // Orthonormal rows as inputs.
  const Matrix g = gaussian(12, 12, rng);
  const Matrix q = Eigen::HouseholderQR<ColMatrix>(ColMatrix(g)).householderQ();
  const Matrix t = gaussian(12, 4, rng).cwiseAbs();
  const ProjectionHead exact = fit_things_map(q, t, 1e-12);
  CHECK((q * exact.w.transpose() - t).cwiseAbs().maxCoeff() <= 1e-8);

  const Matrix u = gaussian(200, 64, rng);
  const Matrix tt = gaussian(200, 49, rng);
  const double alpha = 0.7;
  const ProjectionHead h = fit_things_map(u, tt, alpha);
  CHECK(h.w.rows() == 49);
  CHECK(h.w.cols() == 64);
  const Matrix lhs = (u.transpose() * u + alpha * Matrix::Identity(64, 64)) * h.w.transpose();
  CHECK((lhs - u.transpose() * tt).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK_THROWS_AS(fit_things_map(u, Matrix::Zero(10, 3), 1.0), Error);
}

TEST_CASE("relu head loss and gradient") {
  std::mt19937_64 rng(3);
  Matrix w = gaussian(3, 5, rng);
  const Matrix u = gaussian(20, 5, rng);
  const Matrix t = gaussian(20, 3, rng).cwiseAbs();
  Matrix grad;
  const double loss = relu_head_loss(w, u, t, &grad);
  CHECK(loss == doctest::Approx(relu_loss_oracle(w, u, t)).epsilon(1e-12));
  const Matrix num = numeric_grad(w, [&] { return relu_head_loss(w, u, t, nullptr); });
  CHECK(testutil::max_rel_err(grad, num) <= 1e-4);
}

TEST_CASE("fine-tuning: no-op cases and monitored descent") {
  std::mt19937_64 rng(4);
  const Matrix u = gaussian(40, 6, rng);

  // Targets produced by a head whose predictions are already nonnegative on u.
  ProjectionHead pos;
  pos.w = Matrix::Zero(2, 6);
  const Matrix u_pos = u.cwiseAbs();
  pos.w(0, 0) = 1.0;
  pos.w(1, 2) = 0.5;
  const Matrix t_pos = u_pos * pos.w.transpose();
  const FinetuneResult same = finetune_relu_head(pos, u_pos, t_pos, 100, 1e-2);
  CHECK(std::abs(same.loss_after - same.loss_before) <= 1e-10);

  ProjectionHead h;
  h.w = gaussian(3, 6, rng);
  const Matrix t = gaussian(40, 3, rng).cwiseAbs();
  const FinetuneResult zero = finetune_relu_head(h, u, t, 0, 1e-2);
  CHECK(zero.head.w == h.w);

  const ProjectionHead ridge = fit_things_map(u, t, 1.0);
  REQUIRE((u * ridge.w.transpose()).minCoeff() < 0.0);
  const FinetuneResult tuned = finetune_relu_head(ridge, u, t, 500, 1e-2);
  CHECK(tuned.loss_after < tuned.loss_before);
  CHECK(tuned.loss_after == doctest::Approx(relu_head_loss(tuned.head.w, u, t, nullptr)));
}

TEST_CASE("SDC objective gradient matches central differences") {
  std::mt19937_64 rng(5);
  for (bool symmetric : {false, true}) {
    Matrix w = gaussian(3, 4, rng);
    const Matrix yc = gaussian(6, 4, rng);
    const Matrix yb = gaussian(6, 4, rng);
    Matrix grad;
    sdc_loss(w, yc, yb, 0.05, 1.0, symmetric, &grad);
    const Matrix num = numeric_grad(w, [&] { return sdc_loss(w, yc, yb, 0.05, 1.0, symmetric, nullptr); });
    CHECK(testutil::max_rel_err(grad, num) <= 1e-4);
  }
}

TEST_CASE("SDC config validation and pooled set checks") {
  SdcConfig cfg;
  cfg.concepts = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = SdcConfig{};
  cfg.batch = 1;
  CHECK_THROWS_AS(cfg.validate(), Error);

  PooledValSet p;
  p.y_clip = Matrix::Zero(4, 3);
  p.y_brain = Matrix::Zero(3, 3);
  p.participant_of_row = {"a", "a", "b", "b"};
  CHECK_THROWS_AS(p.validate(), Error);

  PooledValSet small;
  small.y_clip = Matrix::Ones(10, 3);
  small.y_brain = Matrix::Ones(10, 3);
  small.participant_of_row.assign(10, "a");
  SdcConfig c2;
  c2.batch = 20;
  c2.concepts = 2;
  CHECK_THROWS_AS(fit_sdc(small, c2), Error);
}

TEST_CASE("SDC fit with identical views retrieves every pooled row") {
  std::mt19937_64 rng(6);
  PooledValSet p;
  p.y_clip = gaussian(200, 6, rng);
  p.y_brain = p.y_clip;
  for (int i = 0; i < 200; ++i) p.participant_of_row.push_back(i < 100 ? "A" : "B");
  SdcConfig cfg;
  cfg.concepts = 12;
  cfg.iters = 400;
  cfg.batch = 100;
  cfg.lr = 2e-2;
  cfg.probe_every = 100;
  cfg.seed = 3;
  const SdcFit fit = fit_sdc(p, cfg);
  CHECK(fit.head.space == SpaceTag::Sdc);
  CHECK(fit.head.w.rows() == 12);
  CHECK(space_topk(fit.head, p.y_clip, p.y_brain, 1) == 100.0);
  // Frozen probe batch: loss at the end is below the start.
  REQUIRE(fit.probe_iters.front() == 0);
  REQUIRE(fit.probe_iters.back() == 400);
  CHECK(fit.probe_losses.back() < fit.probe_losses.front() - 0.1);

  const SdcFit again = fit_sdc(p, cfg);
  CHECK(again.head.w == fit.head.w);
}

TEST_CASE("space_topk reduces to plain top-k under an identity head and matches brute force") {
  std::mt19937_64 rng(7);
  ProjectionHead id;
  id.w = Matrix::Identity(5, 5);
  const Matrix yt = gaussian(30, 5, rng).cwiseAbs() + Matrix::Constant(30, 5, 0.01);
  const Matrix yp = (yt + gaussian(30, 5, rng, 0.5)).cwiseAbs() + Matrix::Constant(30, 5, 0.01);
  for (std::size_t k : {1, 2, 5, 30}) CHECK(space_topk(id, yt, yp, k) == topk_accuracy(yt, yp, k));
  CHECK(space_topk(id, yt, yp, 30) == 100.0);

  ProjectionHead h;
  h.w = gaussian(4, 5, rng);
  const Matrix zt = gaussian(20, 5, rng);
  const Matrix zp = zt + gaussian(20, 5, rng, 0.3);
  const Matrix tt = apply_head(h, zt, HeadMode::Inference);
  const Matrix tp = apply_head(h, zp, HeadMode::Inference);
  bool any_zero = false;
  for (Eigen::Index r = 0; r < 20; ++r) any_zero = any_zero || tt.row(r).norm() == 0.0 || tp.row(r).norm() == 0.0;
  if (any_zero) {
    CHECK_THROWS_AS(space_topk(h, zt, zp, 1), Error);
  } else {
    CHECK(space_topk(h, zt, zp, 1) == topk_accuracy(tt, tp, 1));
  }

  ProjectionHead neg;
  neg.w = -Matrix::Identity(2, 2);
  try {
    space_topk(neg, Matrix::Ones(3, 2), Matrix::Ones(3, 2), 1);
    FAIL("expected ZeroVectorError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ZeroVector);
  }
}

TEST_CASE("head save/load round trip") {
  testutil::TempDir dir("head_io");
  std::mt19937_64 rng(8);
  ProjectionHead h;
  h.w = testutil::float_exact(4, 6, rng);
  h.train_leaky_slope = 0.05;
  h.space = SpaceTag::Things;
  h.training = {{"alpha", 1.0}};
  save_head(dir.path(), h);
  const ProjectionHead back = load_head(dir.path());
  CHECK(back.w == h.w);
  CHECK(back.space == SpaceTag::Things);
  CHECK(back.train_leaky_slope == 0.05);
  CHECK(back.training.at("alpha") == 1.0);
}
