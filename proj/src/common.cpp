#include "sdc/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace sdc {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::CorruptFile: return "CorruptFile";
    case ErrorKind::Data: return "DataError";
    case ErrorKind::Split: return "SplitError";
    case ErrorKind::NoiseCeiling: return "NoiseCeilingError";
    case ErrorKind::EmptySelection: return "EmptySelection";
    case ErrorKind::Spec: return "SpecError";
    case ErrorKind::Numerics: return "NumericsError";
    case ErrorKind::TrainingDiverged: return "TrainingDiverged";
    case ErrorKind::Shape: return "ShapeError";
    case ErrorKind::Solver: return "SolverError";
    case ErrorKind::ZeroVector: return "ZeroVectorError";
    case ErrorKind::EmptyMask: return "EmptyMaskError";
    case ErrorKind::Atlas: return "AtlasError";
    case ErrorKind::Consistency: return "ConsistencyError";
    case ErrorKind::Group: return "GroupError";
    case ErrorKind::DegenerateInput: return "DegenerateInputError";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::InputValidation: return "InputValidationError";
  }
  return "Error";
}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

void require_shape(bool ok, const std::string& what) {
  if (!ok) fail(ErrorKind::Shape, what);
}

void require_finite(const Matrix& m, ErrorKind kind, const std::string& what) {
  if (!m.allFinite()) fail(kind, what + ": non-finite value");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view stage, std::uint64_t index) {
  // FNV-1a over the stage tag, then mixed with the base seed and index.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix_seed(mix_seed(base, h), index);
}

std::uint64_t next_random(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  return mix_seed(state, 0);
}

double next_uniform(std::uint64_t& state) {
  return static_cast<double>(next_random(state) >> 11) * 0x1.0p-53;
}

double next_normal(std::uint64_t& state) {
  double u1 = next_uniform(state);
  while (u1 <= 0.0) u1 = next_uniform(state);
  const double u2 = next_uniform(state);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t& state) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(next_random(state) % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

double leaky_relu(double x, double slope) noexcept { return x > 0.0 ? x : slope * x; }

double leaky_relu_grad(double x, double slope) noexcept { return x > 0.0 ? 1.0 : slope; }

double pearson(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  require_shape(a.size() == b.size() && a.size() >= 2, "pearson: size mismatch or fewer than 2 samples");
  const double ma = a.mean();
  const double mb = b.mean();
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

RidgeSolver::RidgeSolver(const Matrix& x) : x_(x), dual_(x.cols() > x.rows()) {
  require_finite(x, ErrorKind::Numerics, "ridge design matrix");
  const ColMatrix gram = dual_ ? ColMatrix(x * x.transpose()) : ColMatrix(x.transpose() * x);
  Eigen::SelfAdjointEigenSolver<ColMatrix> eig(gram);
  if (eig.info() != Eigen::Success) fail(ErrorKind::Solver, "ridge: eigendecomposition failed");
  eigenvalues_ = eig.eigenvalues();
  eigenvectors_ = eig.eigenvectors();
}

Matrix RidgeSolver::solve(const Matrix& y, double lambda) const {
  require_shape(y.rows() == x_.rows(), "ridge: row count of targets differs from design");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail(ErrorKind::Solver, "ridge: lambda must be finite and >= 0");
  const double top = eigenvalues_.size() > 0 ? eigenvalues_.maxCoeff() : 0.0;
  const double cutoff = 1e-12 * std::max(top, 0.0);
  if (lambda == 0.0) {
    const bool rank_deficient = dual_ || eigenvalues_.size() == 0 || eigenvalues_.minCoeff() <= cutoff;
    if (rank_deficient) fail(ErrorKind::Solver, "ridge: singular system with lambda = 0");
  }
  Vector inv(eigenvalues_.size());
  for (Eigen::Index i = 0; i < inv.size(); ++i) {
    const double e = eigenvalues_[i];
    if (e > cutoff) {
      inv[i] = 1.0 / (e + lambda);
    } else {
      // Null-space directions carry only rounding noise in X^T Y; amplifying
      // them by 1/lambda for a vanishing lambda would swamp the solution.
      inv[i] = lambda > cutoff ? 1.0 / (std::max(e, 0.0) + lambda) : 0.0;
    }
  }
  if (dual_) {
    // B = X^T U diag(1/(e+lambda)) U^T Y
    const ColMatrix uty = eigenvectors_.transpose() * y;
    const ColMatrix scaled = inv.asDiagonal() * uty;
    return x_.transpose() * (eigenvectors_ * scaled);
  }
  const ColMatrix xty = x_.transpose() * y;
  const ColMatrix vtx = eigenvectors_.transpose() * xty;
  const ColMatrix scaled = inv.asDiagonal() * vtx;
  return eigenvectors_ * scaled;
}

Matrix ridge_solve(const Matrix& x, const Matrix& y, double lambda) {
  return RidgeSolver(x).solve(y, lambda);
}

}  // namespace sdc
