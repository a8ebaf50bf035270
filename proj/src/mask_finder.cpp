#include "sdc/mask_finder.hpp"

#include "csv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace sdc {

namespace fs = std::filesystem;

namespace {

Vector centered(const Vector& y) { return y.array() - y.mean(); }

void check_problem(const Matrix& x, const Vector& y, double alpha) {
  require_shape(x.rows() == y.size(), "lasso: X rows and y length differ");
  if (x.rows() < 2) fail(ErrorKind::InputValidation, "lasso: need at least 2 rows");
  if (!(alpha > 0.0)) fail(ErrorKind::InputValidation, "lasso: alpha must be positive");
  require_finite(x, ErrorKind::Data, "lasso X");
  if (!y.allFinite()) fail(ErrorKind::Data, "lasso y: non-finite entry");
}

double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

}  // namespace

double lasso_objective(const Matrix& x, const Vector& y, const Vector& coef, double alpha) {
  const Vector r = x * coef - centered(y);
  return r.squaredNorm() / (2.0 * static_cast<double>(x.rows())) + alpha * coef.lpNorm<1>();
}

double lasso_alpha_max(const Matrix& x, const Vector& y) {
  require_shape(x.rows() == y.size(), "lasso: X rows and y length differ");
  return (x.transpose() * centered(y)).lpNorm<Eigen::Infinity>() / static_cast<double>(x.rows());
}

LassoResult lasso_cd(const Matrix& x_in, const Vector& y_in, double alpha, const LassoOptions& opts) {
  check_problem(x_in, y_in, alpha);
  if (!(opts.tol > 0.0) || opts.max_sweeps < 1) fail(ErrorKind::InputValidation, "lasso: bad tolerance or sweep cap");
  const ColMatrix x = x_in;
  const Eigen::Index n = x.rows();
  const Eigen::Index v = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  LassoResult res;
  res.coef = Vector::Zero(v);
  if (alpha >= lasso_alpha_max(x_in, y_in)) {
    res.converged = true;
    return res;
  }
  if (opts.warm_start) {
    require_shape(opts.warm_start->size() == v, "lasso: warm start length differs from column count");
    res.coef = *opts.warm_start;
  }

  Vector col_sq(v);
  std::vector<bool> active(static_cast<std::size_t>(v));
  for (Eigen::Index j = 0; j < v; ++j) {
    const auto col = x.col(j);
    const double mean_sq = col.squaredNorm() * inv_n;
    const double mean = col.mean();
    const double var = mean_sq - mean * mean;
    col_sq(j) = mean_sq;
    active[static_cast<std::size_t>(j)] = mean_sq > 0.0 && var > 1e-14 * mean_sq;
    if (!active[static_cast<std::size_t>(j)]) res.coef(j) = 0.0;
  }

  Vector resid = centered(y_in) - x * res.coef;
  for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < v; ++j) {
      if (!active[static_cast<std::size_t>(j)]) continue;
      const double old = res.coef(j);
      const double rho = x.col(j).dot(resid) * inv_n + col_sq(j) * old;
      const double updated = soft_threshold(rho, alpha) / col_sq(j);
      const double delta = updated - old;
      if (delta != 0.0) {
        resid.noalias() -= delta * x.col(j);
        res.coef(j) = updated;
        max_change = std::max(max_change, std::abs(delta));
      }
    }
    res.sweeps = sweep;
    res.max_change = max_change;
    if (opts.on_sweep) {
      opts.on_sweep(sweep, resid.squaredNorm() * 0.5 * inv_n + alpha * res.coef.lpNorm<1>());
    }
    if (max_change < opts.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

std::vector<std::uint8_t> ConceptMask::binary() const {
  std::vector<std::uint8_t> b(static_cast<std::size_t>(lasso_weights.size()));
  for (Eigen::Index j = 0; j < lasso_weights.size(); ++j) b[static_cast<std::size_t>(j)] = lasso_weights(j) != 0.0;
  return b;
}

std::vector<std::size_t> ConceptMask::support() const {
  std::vector<std::size_t> s;
  for (Eigen::Index j = 0; j < lasso_weights.size(); ++j) {
    if (lasso_weights(j) != 0.0) s.push_back(static_cast<std::size_t>(j));
  }
  return s;
}

std::vector<std::int64_t> ConceptMask::support_voxels() const {
  std::vector<std::int64_t> s;
  for (std::size_t j : support()) s.push_back(voxel_ids.empty() ? static_cast<std::int64_t>(j) : voxel_ids[j]);
  std::sort(s.begin(), s.end());
  return s;
}

ConceptMask fit_lasso_mask(const Matrix& x, const Vector& y, double alpha, const LassoOptions& opts) {
  const LassoResult r = lasso_cd(x, y, alpha, opts);
  ConceptMask m;
  m.lasso_weights = r.coef;
  m.alpha = alpha;
  m.sweeps = r.sweeps;
  m.achieved_tol = r.max_change;
  m.converged = r.converged;
  m.voxel_ids.resize(static_cast<std::size_t>(x.cols()));
  for (std::size_t j = 0; j < m.voxel_ids.size(); ++j) m.voxel_ids[j] = static_cast<std::int64_t>(j);
  return m;
}

double kkt_check(const Matrix& x, const Vector& y, const ConceptMask& mask) {
  require_shape(mask.lasso_weights.size() == x.cols(), "kkt: mask length differs from column count");
  const Vector& m = mask.lasso_weights;
  const Vector g = x.transpose() * (x * m - centered(y)) / static_cast<double>(x.rows());
  double worst = 0.0;
  for (Eigen::Index j = 0; j < m.size(); ++j) {
    const double v = m(j) != 0.0 ? std::abs(g(j) + mask.alpha * (m(j) > 0.0 ? 1.0 : -1.0))
                                 : std::max(0.0, std::abs(g(j)) - mask.alpha);
    worst = std::max(worst, v);
  }
  return worst;
}

ConceptMask expand_mask(const ConceptMask& mask, const std::vector<std::int64_t>& voxel_ids) {
  std::map<std::int64_t, std::size_t> pos;
  for (std::size_t j = 0; j < voxel_ids.size(); ++j) pos[voxel_ids[j]] = j;
  ConceptMask out = mask;
  out.voxel_ids = voxel_ids;
  out.lasso_weights = Vector::Zero(static_cast<Eigen::Index>(voxel_ids.size()));
  for (Eigen::Index j = 0; j < mask.lasso_weights.size(); ++j) {
    if (mask.lasso_weights(j) == 0.0) continue;
    const auto id = mask.voxel_ids[static_cast<std::size_t>(j)];
    const auto it = pos.find(id);
    if (it == pos.end()) fail(ErrorKind::Atlas, "mask voxel " + std::to_string(id) + " not in target voxel list");
    out.lasso_weights(static_cast<Eigen::Index>(it->second)) = mask.lasso_weights(j);
  }
  return out;
}

Matrix apply_mask(const Matrix& x, const ConceptMask& mask) {
  require_shape(mask.lasso_weights.size() == x.cols(), "mask length differs from input column count");
  Matrix out = x;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (mask.lasso_weights(j) == 0.0) out.col(j).setZero();
  }
  return out;
}

SpecificityMatrix specificity_matrix(const DecodeFn& decode_fn, const std::vector<ConceptMask>& masks,
                                     const Matrix& x_test, const Matrix& y_test_clip, const ProjectionHead& head) {
  const Eigen::Index c = head.concepts();
  require_shape(static_cast<Eigen::Index>(masks.size()) == c, "specificity: need one mask per concept");
  for (Eigen::Index j = 0; j < c; ++j) {
    if (masks[static_cast<std::size_t>(j)].concept_index != j) {
      fail(ErrorKind::InputValidation, "specificity: masks must be ordered by concept index");
    }
  }
  require_shape(x_test.rows() == y_test_clip.rows(), "specificity: X and Y row counts differ");
  const Matrix true_scores = y_test_clip * head.w.transpose();
  const Matrix full_scores = decode_fn(x_test) * head.w.transpose();

  SpecificityMatrix d;
  d.values = Matrix::Constant(c, c, std::numeric_limits<double>::quiet_NaN());
  if (!masks.empty()) d.participant_id = masks.front().participant_id;
  std::vector<double> denom(static_cast<std::size_t>(c));
  for (Eigen::Index i = 0; i < c; ++i) denom[static_cast<std::size_t>(i)] = pearson(true_scores.col(i), full_scores.col(i));

  for (Eigen::Index j = 0; j < c; ++j) {
    const Matrix masked_scores = decode_fn(apply_mask(x_test, masks[static_cast<std::size_t>(j)])) * head.w.transpose();
    for (Eigen::Index i = 0; i < c; ++i) {
      const double den = denom[static_cast<std::size_t>(i)];
      if (!std::isfinite(den) || std::abs(den) < kSpecificityMinDenominator) continue;
      double num = pearson(true_scores.col(i), masked_scores.col(i));
      if (!std::isfinite(num)) num = 0.0;  // constant masked decode carries no signal
      d.values(i, j) = num / den;
    }
  }
  return d;
}

SpecificityMatrix specificity_matrix(const DecoderMLP& model, const std::vector<ConceptMask>& masks,
                                     const Matrix& x_test, const Matrix& y_test_clip, const ProjectionHead& head) {
  return specificity_matrix([&model](const Matrix& x) { return decode(model, x); }, masks, x_test, y_test_clip, head);
}

SpecificityMatrix average_specificity(const std::vector<SpecificityMatrix>& list) {
  if (list.empty()) fail(ErrorKind::InputValidation, "average_specificity: empty list");
  const Eigen::Index r = list.front().values.rows();
  const Eigen::Index c = list.front().values.cols();
  for (const auto& m : list) require_shape(m.values.rows() == r && m.values.cols() == c, "average_specificity: shapes differ");
  SpecificityMatrix out;
  out.averaged = true;
  out.participant_id = "AVERAGED";
  out.values = Matrix::Constant(r, c, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> vals;
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) {
      vals.clear();
      for (const auto& m : list) {
        if (m.defined(i, j)) vals.push_back(m.values(i, j));
      }
      if (vals.empty()) continue;
      std::sort(vals.begin(), vals.end());
      double sum = 0.0;
      for (double v : vals) sum += v;
      out.values(i, j) = sum / static_cast<double>(vals.size());
    }
  }
  return out;
}

void write_masks_csv(const fs::path& path, const std::vector<ConceptMask>& masks) {
  auto out = csv::open_out(path);
  out << "participant_id,concept_index,voxel_index,weight\n";
  for (const auto& m : masks) {
    for (std::size_t j : m.support()) {
      const auto id = m.voxel_ids.empty() ? static_cast<std::int64_t>(j) : m.voxel_ids[j];
      out << m.participant_id << ',' << m.concept_index << ',' << id << ','
          << csv::format_double(m.lasso_weights(static_cast<Eigen::Index>(j))) << '\n';
    }
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

std::vector<ConceptMask> read_masks_csv(const fs::path& path, double alpha) {
  const auto t = csv::read(path, {"participant_id", "concept_index", "voxel_index", "weight"});
  std::map<std::pair<std::string, int>, std::vector<std::pair<std::int64_t, double>>> groups;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = path.string() + ":" + std::to_string(t.line_numbers[r]);
    const int concept_index = csv::parse_int<int>(row[1], where);
    const auto voxel = csv::parse_int<std::int64_t>(row[2], where);
    const double w = csv::parse_double(row[3], where);
    groups[{row[0], concept_index}].emplace_back(voxel, w);
  }
  std::vector<ConceptMask> masks;
  for (auto& [key, entries] : groups) {
    std::sort(entries.begin(), entries.end());
    ConceptMask m;
    m.participant_id = key.first;
    m.concept_index = key.second;
    m.alpha = alpha;
    m.lasso_weights.resize(static_cast<Eigen::Index>(entries.size()));
    for (std::size_t k = 0; k < entries.size(); ++k) {
      m.voxel_ids.push_back(entries[k].first);
      m.lasso_weights(static_cast<Eigen::Index>(k)) = entries[k].second;
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

void write_specificity_csv(const fs::path& path, const SpecificityMatrix& d) {
  auto out = csv::open_out(path);
  out << "concept";
  for (Eigen::Index j = 0; j < d.values.cols(); ++j) out << ',' << j;
  out << '\n';
  for (Eigen::Index i = 0; i < d.values.rows(); ++i) {
    out << i;
    for (Eigen::Index j = 0; j < d.values.cols(); ++j) {
      out << ',';
      if (d.defined(i, j)) out << csv::format_double(d.values(i, j));
      else out << "nan";
    }
    out << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

SpecificityMatrix read_specificity_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Format, path.string() + ": missing header");
  const auto header = csv::split(line);
  if (header.empty() || header[0] != "concept") fail(ErrorKind::Format, path.string() + ": expected 'concept' header");
  const auto c = static_cast<Eigen::Index>(header.size() - 1);
  SpecificityMatrix d;
  d.values = Matrix::Constant(c, c, std::numeric_limits<double>::quiet_NaN());
  Eigen::Index i = 0;
  while (std::getline(in, line)) {
    if (csv::trim(line).empty()) continue;
    const auto cells = csv::split(line);
    const std::string where = path.string() + ": row " + std::to_string(i);
    if (i >= c || static_cast<Eigen::Index>(cells.size()) != c + 1) fail(ErrorKind::Data, where + ": wrong shape");
    for (Eigen::Index j = 0; j < c; ++j) {
      const auto& cell = cells[static_cast<std::size_t>(j + 1)];
      if (cell != "nan") d.values(i, j) = csv::parse_double(cell, where);
    }
    ++i;
  }
  if (i != c) fail(ErrorKind::Data, path.string() + ": expected " + std::to_string(c) + " rows");
  return d;
}

}  // namespace sdc
