#include "sdc/decoder.hpp"
#include "sdc/synthlab.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>

using namespace sdc;
using testutil::gaussian;

namespace {

// Central differences of f with respect to every entry of p.
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

// Direct evaluation of the InfoNCE definition, no stabilization tricks
// beyond what small random inputs need.
double infonce_oracle(const Matrix& q, const Matrix& k, double tau) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    long double denom = 0.0L;
    for (Eigen::Index j = 0; j < k.rows(); ++j) denom += std::exp(static_cast<long double>(q.row(i).dot(k.row(j)) / tau));
    total += -static_cast<double>(std::log(std::exp(static_cast<long double>(q.row(i).dot(k.row(i)) / tau)) / denom));
  }
  return total / static_cast<double>(q.rows());
}

// Brute-force top-k: count rows strictly closer, or equally close with a
// lower index, than the true row.
double topk_bruteforce(const Matrix& yt, const Matrix& yp, std::size_t k) {
  const auto n = yt.rows();
  int hits = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto cosine = [&](Eigen::Index j) { return yp.row(i).dot(yt.row(j)) / (yp.row(i).norm() * yt.row(j).norm()); };
    const double own = cosine(i);
    std::size_t better = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double c = cosine(j);
      if (c > own || (c == own && j < i)) ++better;
    }
    if (better < k) ++hits;
  }
  return 100.0 * hits / static_cast<double>(n);
}

}  // namespace

TEST_CASE("InfoNCE: uniform similarities give ln m") {
  const Matrix q = Matrix::Zero(128, 4);
  const Matrix k = Matrix::Ones(128, 4);
  const auto r = infonce_loss(q, k, 1.0);
  CHECK(r.loss == doctest::Approx(std::log(128.0)).epsilon(1e-12));
  CHECK(r.loss == doctest::Approx(4.8520).epsilon(1e-4));
}

TEST_CASE("InfoNCE: saturated positives give zero loss") {
  const Matrix q = 50.0 * Matrix::Identity(6, 6);
  const auto r = infonce_loss(q, q, 1.0);
  CHECK(r.loss >= 0.0);
  CHECK(r.loss < 1e-9);
}

TEST_CASE("InfoNCE: matches direct definition, nonnegative, permutation invariant") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    const Eigen::Index m = 2 + static_cast<Eigen::Index>(rng() % 14);
    const Matrix q = gaussian(m, 5, rng);
    const Matrix k = gaussian(m, 5, rng);
    const double tau = 0.5 + static_cast<double>(rng() % 4) * 0.25;
    const auto r = infonce_loss(q, k, tau);
    CHECK(r.loss == doctest::Approx(infonce_oracle(q, k, tau)).epsilon(1e-10));
    CHECK(r.loss >= 0.0);

    std::vector<std::size_t> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix qp(m, 5), kp(m, 5);
    for (Eigen::Index i = 0; i < m; ++i) {
      qp.row(i) = q.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]));
      kp.row(i) = k.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]));
    }
    CHECK(infonce_loss(qp, kp, tau).loss == doctest::Approx(r.loss).epsilon(1e-12));
  }
  // Large logits stay finite through max-subtraction.
  const Matrix big = 1e3 * Matrix::Identity(4, 4);
  CHECK(std::isfinite(infonce_loss(big, big, 1.0).loss));
}

TEST_CASE("InfoNCE: errors") {
  CHECK_THROWS_AS(infonce_loss(Matrix::Zero(1, 3), Matrix::Zero(1, 3), 1.0), Error);
  CHECK_THROWS_AS(infonce_loss(Matrix::Zero(3, 3), Matrix::Zero(3, 3), 0.0), Error);
  Matrix bad = Matrix::Zero(3, 2);
  bad(1, 1) = std::nan("");
  try {
    infonce_loss(bad, Matrix::Zero(3, 2), 1.0);
    FAIL("expected NumericsError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numerics);
  }
}

TEST_CASE("InfoNCE gradients match central differences (m=8, d=4)") {
  std::mt19937_64 rng(21);
  for (bool symmetric : {false, true}) {
    for (int t = 0; t < 5; ++t) {
      Matrix q = gaussian(8, 4, rng);
      Matrix k = gaussian(8, 4, rng);
      const auto r = contrastive_loss(q, k, 1.0, symmetric);
      const Matrix gq = numeric_grad(q, [&] { return contrastive_loss(q, k, 1.0, symmetric).loss; });
      const Matrix gk = numeric_grad(k, [&] { return contrastive_loss(q, k, 1.0, symmetric).loss; });
      CHECK(testutil::max_rel_err(r.grad_queries, gq) <= 1e-5);
      CHECK(testutil::max_rel_err(r.grad_keys, gk) <= 1e-5);
    }
  }
}

TEST_CASE("MLP backward matches central differences on every tensor") {
  std::mt19937_64 rng(5);
  for (bool normalize : {false, true}) {
    TrainConfig cfg;
    cfg.normalize_embeddings = normalize;
    cfg.tau = 0.7;
    DecoderMLP model = init_mlp(7, 6, 3, 13);
    const Matrix x = gaussian(5, 7, rng);
    const Matrix y = gaussian(5, 3, rng);
    MlpGradients g;
    mlp_batch_loss(model, x, y, cfg, &g);
    auto f = [&] { return mlp_batch_loss(model, x, y, cfg, nullptr); };
    CHECK(testutil::max_rel_err(g.w1, numeric_grad(model.w1, f)) <= 1e-4);
    CHECK(testutil::max_rel_err(g.b1, numeric_grad(model.b1, f)) <= 1e-4);
    CHECK(testutil::max_rel_err(g.w2, numeric_grad(model.w2, f)) <= 1e-4);
    CHECK(testutil::max_rel_err(g.b2, numeric_grad(model.b2, f)) <= 1e-4);
  }
}

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  CHECK(cfg.learning_rate(1) == doctest::Approx(1e-4));
  CHECK(cfg.learning_rate(3) == doctest::Approx(1e-4));
  CHECK(cfg.learning_rate(4) == doctest::Approx(1e-5));
  CHECK(cfg.learning_rate(7) == doctest::Approx(1e-6));
  CHECK(cfg.learning_rate(12) == doctest::Approx(1e-7));
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.tau = -1;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("first Adam step from zero moments equals the closed form") {
  TrainConfig cfg;
  Matrix p(2, 2);
  p << 0.5, -1.0, 2.0, 0.0;
  Matrix g(2, 2);
  g << 0.3, -2.0, 1e-3, 0.0;
  const Matrix start = p;
  AdamMoments mom;
  const double lr = 1e-2;
  adam_update(p, g, mom, 1, lr, cfg);
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double gi = g.data()[i];
    const double m_hat = ((1.0 - cfg.adam_beta1) * gi) / (1.0 - cfg.adam_beta1);
    const double v_hat = ((1.0 - cfg.adam_beta2) * gi * gi) / (1.0 - cfg.adam_beta2);
    const double expected = start.data()[i] - lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    CHECK(p.data()[i] == expected);
  }
  // The first step moves every nonzero-gradient entry by about lr.
  CHECK(std::abs(p(0, 0) - start(0, 0)) == doctest::Approx(lr).epsilon(1e-6));
}

TEST_CASE("decode: zero model, masking, batch vs row-by-row") {
  DecoderMLP zero = init_mlp(5, 4, 3, 1);
  zero.w1.setZero();
  zero.b1.setZero();
  zero.w2.setZero();
  zero.b2.setZero();
  std::mt19937_64 rng(2);
  const Matrix x = gaussian(9, 5, rng);
  CHECK(decode(zero, x).cwiseAbs().maxCoeff() == 0.0);

  const DecoderMLP model = init_mlp(5, 4, 3, 7);
  Matrix masked = x;
  masked.col(1).setZero();
  masked.col(3).setZero();
  Matrix by_mask = x;
  const RowVector mask = (RowVector(5) << 1, 0, 1, 0, 1).finished();
  for (Eigen::Index r = 0; r < x.rows(); ++r) by_mask.row(r) = by_mask.row(r).cwiseProduct(mask);
  CHECK(decode(model, by_mask) == decode(model, masked));

  const Matrix batch = decode(model, x);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Matrix one = decode(model, x.row(r));
    CHECK((one - batch.row(r)).cwiseAbs().maxCoeff() <= 1e-6);
  }
  CHECK_THROWS_AS(decode(model, Matrix::Zero(2, 4)), Error);
}

TEST_CASE("decode is the documented forward formula") {
  const DecoderMLP m = init_mlp(4, 3, 2, 31);
  std::mt19937_64 rng(3);
  const Matrix x = gaussian(6, 4, rng);
  const Matrix y = decode(m, x);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Vector h = m.w1 * x.row(r).transpose() + m.b1.transpose();
    for (Eigen::Index j = 0; j < h.size(); ++j) h[j] = h[j] > 0 ? h[j] : 0.01 * h[j];
    const Vector out = m.w2 * h + m.b2.transpose();
    CHECK((out.transpose() - y.row(r)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("init is uniform within the fan-in bound and seed-driven") {
  const DecoderMLP a = init_mlp(100, 20, 5, 4);
  const DecoderMLP b = init_mlp(100, 20, 5, 4);
  CHECK(a.w1 == b.w1);
  CHECK(a.w1.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(100.0));
  CHECK(a.w2.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(20.0));
  CHECK(init_mlp(100, 20, 5, 5).w1 != a.w1);
}

TEST_CASE("training on synthetic data: epoch loss decreases over the first 3 epochs and is reproducible") {
  SynthSpec spec;
  spec.participants = 1;
  spec.stimuli = 2000;
  spec.reps = 1;
  spec.embed_dim = 16;
  spec.true_concepts = 4;
  spec.support_size = 10;
  spec.extra_voxels = 80;
  spec.noise_sigma = 0.05;
  spec.nonlinearity = VoxelNonlinearity::Tanh;
  spec.seed = 12;
  const SynthData d = generate(spec);
  REQUIRE(d.responses[0].cols() == 120);
  std::vector<std::size_t> rows(2000);
  std::iota(rows.begin(), rows.end(), 0);
  const Matrix x = ZScore::fit(d.responses[0].values, rows).apply(d.responses[0].values);
  const Matrix y = trial_embeddings(d.embeddings, d.trials, rows);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr_init = 1e-3;
  cfg.seed = 77;
  const TrainedDecoder a = train_mlp(x, y, cfg, 32);
  REQUIRE(a.record.epoch_losses.size() == 3);
  CHECK(a.record.epoch_losses[1] < a.record.epoch_losses[0]);
  CHECK(a.record.epoch_losses[2] < a.record.epoch_losses[1]);
  const TrainedDecoder b = train_mlp(x, y, cfg, 32);
  CHECK(a.model.w1 == b.model.w1);
  CHECK(a.record.epoch_losses == b.record.epoch_losses);
}

TEST_CASE("decoder save/load round trip") {
  testutil::TempDir dir("decoder_io");
  TrainedDecoder t{init_mlp(6, 5, 4, 3), {}};
  for (Matrix* m : {&t.model.w1, &t.model.b1, &t.model.w2, &t.model.b2}) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<float>(m->data()[i]);
  }
  save_decoder(dir.path(), t, TrainConfig{});
  const DecoderMLP back = load_decoder(dir.path());
  CHECK(back.w1 == t.model.w1);
  CHECK(back.b2 == t.model.b2);
  CHECK(back.leaky_slope == t.model.leaky_slope);
}

TEST_CASE("ridge: normal equations on random 200x50 problems") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 10; ++t) {
    const Matrix x = gaussian(200, 50, rng);
    const Matrix y = gaussian(200, 8, rng);
    for (double lambda : {0.1, 10.0, 1e4}) {
      const RidgeModel m = fit_ridge(x, y, lambda);
      const Matrix xc = x.rowwise() - x.colwise().mean();
      const Matrix yc = y.rowwise() - y.colwise().mean();
      const Matrix lhs = (xc.transpose() * xc + lambda * Matrix::Identity(50, 50)) * m.w.transpose();
      const Matrix rhs = xc.transpose() * yc;
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-6);
      // Intercept makes mean prediction match mean target.
      CHECK((predict(m, x).colwise().mean() - y.colwise().mean()).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("ridge: interpolation and shrinkage limits") {
  std::mt19937_64 rng(4);
  const Matrix x = gaussian(30, 30, rng);
  const Matrix y = gaussian(30, 3, rng);
  // Centering removes one degree of freedom; use a 31-row design with intercept.
  Matrix xa = gaussian(31, 30, rng);
  const Matrix ya = gaussian(31, 3, rng);
  const RidgeModel interp = fit_ridge(xa, ya, 1e-12);
  CHECK((predict(interp, xa) - ya).cwiseAbs().maxCoeff() <= 1e-8);

  const RidgeModel small = fit_ridge(x, y, 0.1);
  const RidgeModel huge = fit_ridge(x, y, 1e12);
  CHECK(huge.w.norm() <= 1e-6 * small.w.norm());
}

TEST_CASE("ridge: grid selection maximizes validation top-1") {
  std::mt19937_64 rng(9);
  const Matrix w = gaussian(6, 40, rng);
  for (int t = 0; t < 5; ++t) {
    const Matrix x = gaussian(120, 40, rng);
    const Matrix y = x * w.transpose() + 3.0 * gaussian(120, 6, rng);
    const Matrix xv = gaussian(60, 40, rng);
    const Matrix yv = xv * w.transpose() + 3.0 * gaussian(60, 6, rng);
    const auto grid = default_ridge_grid();
    CHECK(grid == std::vector<double>{0.1, 1, 10, 100, 1000, 10000, 100000});
    const RidgeFit fit = train_ridge(x, y, grid, xv, yv);
    double best = -1.0, best_lambda = 0.0;
    for (double lambda : grid) {
      const double acc = topk_bruteforce(yv, predict(fit_ridge(x, y, lambda), xv), 1);
      if (acc > best) best = acc, best_lambda = lambda;
    }
    CHECK(fit.selection.best_lambda == best_lambda);
    CHECK(fit.model.lambda == best_lambda);
  }
  CHECK_THROWS_AS(train_ridge(Matrix::Zero(3, 2), Matrix::Zero(3, 2), {}, Matrix::Zero(3, 2), Matrix::Zero(3, 2)),
                  Error);
}

TEST_CASE("ridge: singular system at lambda 0 fails") {
  Matrix x = Matrix::Zero(10, 3);
  x.col(0).setLinSpaced(10, 0.0, 1.0);
  x.col(1) = x.col(0);
  try {
    fit_ridge(x, Matrix::Ones(10, 2), 0.0);
    FAIL("expected SolverError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Solver);
  }
}

TEST_CASE("top-k equals brute force on random instances") {
  std::mt19937_64 rng(123);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 63);
    const Matrix yt = gaussian(n, 4, rng);
    Matrix yp = yt + gaussian(n, 4, rng, 1.5);
    if (t % 10 == 0) yp.row(0) = yt.row(1);  // force a tie-relevant pattern
    for (std::size_t k = 1; k <= static_cast<std::size_t>(n); ++k) {
      CHECK(topk_accuracy(yt, yp, k) == topk_bruteforce(yt, yp, k));
    }
  }
}

TEST_CASE("top-k properties") {
  std::mt19937_64 rng(55);
  const Matrix yt = gaussian(40, 6, rng);
  CHECK(topk_accuracy(yt, yt, 1) == 100.0);
  const Matrix yp = yt + gaussian(40, 6, rng, 2.0);
  Matrix scaled = yp;
  for (Eigen::Index r = 0; r < scaled.rows(); ++r) scaled.row(r) *= 0.1 + static_cast<double>(r);
  for (std::size_t k : {1, 3, 10}) CHECK(topk_accuracy(yt, scaled, k) == topk_accuracy(yt, yp, k));
  CHECK(topk_accuracy(yt, yp, 40) == 100.0);
  CHECK_THROWS_AS(topk_accuracy(yt, yp, 0), Error);
  CHECK_THROWS_AS(topk_accuracy(yt, yp, 41), Error);
  Matrix z = yp;
  z.row(3).setZero();
  try {
    topk_accuracy(yt, z, 1);
    FAIL("expected ZeroVectorError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ZeroVector);
  }
  // Exact ties resolve toward the lower row index.
  Matrix same = Matrix::Ones(3, 2);
  CHECK(retrieval_ranks(same, same) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("chance level: empirical top-5 at n=1000 near 0.5%") {
  CHECK(chance_topk(5, 1000) == doctest::Approx(0.5));
  std::mt19937_64 rng(77);
  double sum = 0.0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) sum += topk_accuracy(gaussian(1000, 8, rng), gaussian(1000, 8, rng), 5);
  const double mean = sum / trials;
  CHECK(mean >= 0.25);
  CHECK(mean <= 0.75);
}
