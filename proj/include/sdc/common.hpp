#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sdc {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMatrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class ErrorKind {
  Format,
  CorruptFile,
  Data,
  Split,
  NoiseCeiling,
  EmptySelection,
  Spec,
  Numerics,
  TrainingDiverged,
  Shape,
  Solver,
  ZeroVector,
  EmptyMask,
  Atlas,
  Consistency,
  Group,
  DegenerateInput,
  Io,
  Config,
  InputValidation,
};

std::string_view error_kind_name(ErrorKind kind);

// All module failures surface as sdc::Error; `kind` maps onto the error
// names used in machine-readable CLI output.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::string_view kind_name() const { return error_kind_name(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

void require_shape(bool ok, const std::string& what);
void require_finite(const Matrix& m, ErrorKind kind, const std::string& what);

// splitmix64 finalizer; stable across platforms.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t derive_seed(std::uint64_t base, std::string_view stage, std::uint64_t index = 0);

// Fisher-Yates permutation of 0..n-1 drawn from `rng`; independent of the
// standard library's distribution implementations.
std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t& state);
std::uint64_t next_random(std::uint64_t& state);
// Uniform in [0, 1).
double next_uniform(std::uint64_t& state);
// Standard normal via Box-Muller on next_uniform.
double next_normal(std::uint64_t& state);

double leaky_relu(double x, double slope) noexcept;
double leaky_relu_grad(double x, double slope) noexcept;

// NaN when either input has zero variance.
double pearson(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b);

double median(std::vector<double> values);

// Closed-form ridge solutions of (X^T X + lambda I) B = X^T Y for many lambdas
// from one eigendecomposition. Uses the n x n dual Gram matrix when X has more
// columns than rows. Spectral components below 1e-12 of the largest
// eigenvalue are treated as exact zeros.
class RidgeSolver {
 public:
  explicit RidgeSolver(const Matrix& x);

  // Throws Solver when the primal system is singular at this lambda.
  Matrix solve(const Matrix& y, double lambda) const;

  bool dual() const { return dual_; }

 private:
  Matrix x_;
  bool dual_ = false;
  Vector eigenvalues_;
  ColMatrix eigenvectors_;
};

Matrix ridge_solve(const Matrix& x, const Matrix& y, double lambda);

}  // namespace sdc
