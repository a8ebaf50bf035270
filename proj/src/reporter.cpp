#include "sdc/reporter.hpp"

#include "csv.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace sdc {

namespace fs = std::filesystem;

ConceptImageReport top_images(const ProjectionHead& head, const EmbeddingMatrix& embeddings, int concept_index,
                              std::size_t k) {
  if (concept_index < 0 || concept_index >= head.concepts()) {
    fail(ErrorKind::InputValidation, "top_images: concept " + std::to_string(concept_index) + " out of range");
  }
  const auto n = static_cast<std::size_t>(embeddings.rows());
  if (k > n) fail(ErrorKind::InputValidation, "top_images: k exceeds stimulus count");
  require_shape(embeddings.stimulus_ids.size() == n, "top_images: stimulus ids do not match rows");
  const Matrix scores = apply_head(head, embeddings.values, HeadMode::Inference);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto col = scores.col(concept_index);
  auto better = [&](std::size_t a, std::size_t b) {
    const double sa = col(static_cast<Eigen::Index>(a));
    const double sb = col(static_cast<Eigen::Index>(b));
    if (sa != sb) return sa > sb;
    return embeddings.stimulus_ids[a] < embeddings.stimulus_ids[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  ConceptImageReport r;
  r.concept_index = concept_index;
  r.k = k;
  for (std::size_t i = 0; i < k; ++i) {
    r.ranked.push_back({embeddings.stimulus_ids[order[i]], col(static_cast<Eigen::Index>(order[i]))});
  }
  return r;
}

void write_top_images_csv(const fs::path& path, const std::vector<ConceptImageReport>& reports) {
  auto out = csv::open_out(path);
  out << "concept_index,rank,stimulus_id,score\n";
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.ranked.size(); ++i) {
      out << r.concept_index << ',' << i + 1 << ',' << r.ranked[i].stimulus_id << ','
          << csv::format_double(r.ranked[i].score) << '\n';
    }
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

namespace {

Matrix squared_distances(const Matrix& x) {
  const Vector sq = x.rowwise().squaredNorm();
  Matrix d = (-2.0 * x * x.transpose()).colwise() + sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

// Conditional row distribution for bandwidth beta; returns its entropy.
double row_affinities(const Matrix& d, Eigen::Index i, double beta, double shift, RowVector& p) {
  const Eigen::Index m = d.cols();
  double sum = 0.0;
  double weighted = 0.0;
  for (Eigen::Index j = 0; j < m; ++j) {
    if (j == i) {
      p(j) = 0.0;
      continue;
    }
    const double dj = d(i, j) - shift;
    p(j) = std::exp(-dj * beta);
    sum += p(j);
    weighted += dj * p(j);
  }
  p /= sum;
  return std::log(sum) + beta * weighted / sum;
}

std::uint64_t row_key(const Matrix& x, Eigen::Index i, std::uint64_t seed) {
  std::uint64_t h = mix_seed(seed, 0x7453u);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    std::uint64_t bits = 0;
    const double v = x(i, j) == 0.0 ? 0.0 : x(i, j);  // fold -0 onto +0
    std::memcpy(&bits, &v, sizeof bits);
    h = mix_seed(h, bits);
  }
  return h;
}

}  // namespace

Matrix tsne_affinities(const Matrix& x, double perplexity) {
  const Eigen::Index m = x.rows();
  if (m < 2) fail(ErrorKind::InputValidation, "tsne: need at least 2 points");
  if (!(perplexity > 0.0)) fail(ErrorKind::InputValidation, "tsne: perplexity must be positive");
  require_finite(x, ErrorKind::Data, "tsne input");
  const Matrix d = squared_distances(x);
  if (d.maxCoeff() <= 0.0) fail(ErrorKind::DegenerateInput, "tsne: all points coincide");

  const double target = std::log(perplexity);
  Matrix p(m, m);
  RowVector row(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    double shift = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j != i) shift = std::min(shift, d(i, j));
    }
    double beta = 1.0;
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double h = row_affinities(d, i, beta, shift, row);
      if (!std::isfinite(h)) break;
      const double diff = h - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    row_affinities(d, i, beta, shift, row);
    p.row(i) = row;
  }
  Matrix joint = (p + p.transpose()) / (2.0 * static_cast<double>(m));
  joint = joint.cwiseMax(1e-12);
  joint.diagonal().setZero();
  joint /= joint.sum();
  if (!joint.allFinite()) fail(ErrorKind::DegenerateInput, "tsne: affinities are not finite");
  return joint;
}

namespace {

// Student-t kernel matrix (zero diagonal) and its sum.
double student_kernel(const Matrix& points, Matrix& num) {
  num = (1.0 + squared_distances(points).array()).inverse().matrix();
  num.diagonal().setZero();
  return num.sum();
}

double kl_from_kernel(const Matrix& p, const Matrix& num, double sum) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      const double pij = p(i, j);
      if (i == j || pij <= 0.0) continue;
      kl += pij * (std::log(pij) - std::log(num(i, j) / sum));
    }
  }
  return kl;
}

}  // namespace

double tsne_kl(const Matrix& p, const Matrix& points) {
  require_shape(p.rows() == points.rows() && p.cols() == points.rows(), "tsne_kl: shape mismatch");
  Matrix num;
  const double sum = student_kernel(points, num);
  return kl_from_kernel(p, num, sum);
}

namespace {
TsneLayout tsne_optimize(const Matrix& x, const TsneConfig& cfg, const std::vector<std::uint64_t>& init_states);
}  // namespace

TsneLayout tsne(const Matrix& x, const TsneConfig& cfg) {
  const Eigen::Index m = x.rows();
  if (static_cast<std::size_t>(m) > kTsneMaxPoints) {
    fail(ErrorKind::InputValidation, "tsne: at most " + std::to_string(kTsneMaxPoints) + " points");
  }
  if (3.0 * cfg.perplexity > static_cast<double>(m)) {
    fail(ErrorKind::InputValidation, "tsne: perplexity " + csv::format_double(cfg.perplexity) + " too large for " +
                                         std::to_string(m) + " points");
  }
  if (cfg.iterations < 0) fail(ErrorKind::InputValidation, "tsne: iterations must be >= 0");
  if (cfg.content_keyed) {
    // Optimize in content order so that summation order, and hence the layout, follows the rows.
    std::vector<std::uint64_t> keys(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) keys[static_cast<std::size_t>(i)] = row_key(x, i, cfg.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      const auto ka = keys[static_cast<std::size_t>(a)], kb = keys[static_cast<std::size_t>(b)];
      if (ka != kb) return ka < kb;
      return std::lexicographical_compare(x.row(a).begin(), x.row(a).end(), x.row(b).begin(), x.row(b).end());
    });
    Matrix xs(m, x.cols());
    std::vector<std::uint64_t> sorted_keys(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) {
      xs.row(i) = x.row(order[static_cast<std::size_t>(i)]);
      sorted_keys[static_cast<std::size_t>(i)] = keys[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    }
    TsneLayout layout = tsne_optimize(xs, cfg, sorted_keys);
    Matrix back(m, 2);
    for (Eigen::Index i = 0; i < m; ++i) back.row(order[static_cast<std::size_t>(i)]) = layout.points.row(i);
    layout.points = std::move(back);
    return layout;
  }
  std::vector<std::uint64_t> states(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    states[static_cast<std::size_t>(i)] = derive_seed(cfg.seed, "tsne-point", static_cast<std::uint64_t>(i));
  }
  return tsne_optimize(x, cfg, states);
}

namespace {

TsneLayout tsne_optimize(const Matrix& x, const TsneConfig& cfg, const std::vector<std::uint64_t>& init_states) {
  const Eigen::Index m = x.rows();
  const Matrix p = tsne_affinities(x, cfg.perplexity);

  Matrix y(m, 2);
  for (Eigen::Index i = 0; i < m; ++i) {
    std::uint64_t state = init_states[static_cast<std::size_t>(i)];
    y(i, 0) = cfg.init_std * next_normal(state);
    y(i, 1) = cfg.init_std * next_normal(state);
  }

  TsneLayout layout;
  layout.perplexity = cfg.perplexity;
  layout.iterations = cfg.iterations;
  Matrix update = Matrix::Zero(m, 2);
  Matrix gains = Matrix::Ones(m, 2);
  Matrix num;
  for (int it = 0; it < cfg.iterations; ++it) {
    const double sum = student_kernel(y, num);
    layout.kl_history.push_back(kl_from_kernel(p, num, sum));
    const double exag = it < cfg.exaggeration_iters ? cfg.exaggeration : 1.0;
    // grad_i = 4 sum_j (exag P_ij - Q_ij) num_ij (y_i - y_j)
    const Matrix w = ((exag * p).array() - num.array() / sum).matrix().cwiseProduct(num);
    const Vector row_sum = w.rowwise().sum();
    const Matrix grad = 4.0 * (row_sum.asDiagonal() * y - w * y);
    for (Eigen::Index k = 0; k < grad.size(); ++k) {
      double& g = gains.data()[k];
      const bool same_sign = (grad.data()[k] > 0.0) == (update.data()[k] > 0.0);
      g = same_sign ? g * 0.8 : g + 0.2;
      g = std::max(g, 0.01);
    }
    const double momentum = it < cfg.exaggeration_iters ? cfg.momentum_initial : cfg.momentum_final;
    update = momentum * update - cfg.learning_rate * gains.cwiseProduct(grad);
    y += update;
    y.rowwise() -= y.colwise().mean();
    if (!y.allFinite()) fail(ErrorKind::Numerics, "tsne: layout became non-finite");
  }
  layout.final_kl = tsne_kl(p, y);
  layout.points = std::move(y);
  return layout;
}

}  // namespace

void write_tsne_csv(const fs::path& path, const TsneLayout& layout, const std::vector<std::string>& stimulus_ids,
                    const std::vector<int>& concept_indices) {
  const auto m = static_cast<std::size_t>(layout.points.rows());
  require_shape(stimulus_ids.size() == m && concept_indices.size() == m, "tsne csv: labels do not match points");
  auto out = csv::open_out(path);
  out << "stimulus_id,x,y,concept_index\n";
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out << stimulus_ids[i] << ',' << csv::format_double(layout.points(r, 0)) << ','
        << csv::format_double(layout.points(r, 1)) << ',' << concept_indices[i] << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::Io, "sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

std::string config_hash(const nlohmann::json& config) { return sha256_hex(config.dump()); }

void Manifest::add_stage(const std::string& stage) {
  if (std::find(stages.begin(), stages.end(), stage) == stages.end()) stages.push_back(stage);
}

void Manifest::record(const fs::path& root, const fs::path& file) {
  const fs::path rel = fs::relative(file, root);
  artifacts[rel.generic_string()] = sha256_file(file);
}

std::map<std::string, std::string> library_versions() {
  return {{"sdc", "0.1.0"},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"matrix_format", "1"}};
}

Manifest read_manifest(const fs::path& path) {
  Manifest m;
  if (!fs::exists(path)) return m;
  std::ifstream in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    m.config_hash = j.value("config_hash", "");
    if (j.contains("seeds")) m.seeds = j["seeds"].get<std::map<std::string, std::uint64_t>>();
    if (j.contains("versions")) m.versions = j["versions"].get<std::map<std::string, std::string>>();
    if (j.contains("stages")) m.stages = j["stages"].get<std::vector<std::string>>();
    if (j.contains("artifacts")) m.artifacts = j["artifacts"].get<std::map<std::string, std::string>>();
    if (j.contains("notes")) m.notes = j["notes"];
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  nlohmann::json j;
  j["config_hash"] = manifest.config_hash;
  j["seeds"] = manifest.seeds;
  j["versions"] = manifest.versions;
  j["stages"] = manifest.stages;
  j["artifacts"] = manifest.artifacts;
  j["notes"] = manifest.notes;
  auto out = csv::open_out(path);
  out << j.dump(1) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

void emit_report(const ReportBundle& bundle, const fs::path& root, Manifest& manifest) {
  const fs::path dir = root / "report";
  auto written = [&](const fs::path& file) { manifest.record(root, file); };
  if (!bundle.top_images.empty()) {
    write_top_images_csv(dir / "top_images.csv", bundle.top_images);
    written(dir / "top_images.csv");
  }
  if (bundle.tsne) {
    write_tsne_csv(dir / "tsne.csv", *bundle.tsne, bundle.tsne_ids, bundle.tsne_concepts);
    written(dir / "tsne.csv");
    manifest.notes["tsne_final_kl"] = bundle.tsne->final_kl;
  }
  if (bundle.consistency) {
    write_consistency_json(dir / "consistency.json", *bundle.consistency);
    write_consistency_csv(dir / "green_red.csv", *bundle.consistency);
    written(dir / "consistency.json");
    written(dir / "green_red.csv");
  }
  if (bundle.localizer) {
    write_localizer_csv(dir / "localizer.csv", *bundle.localizer);
    written(dir / "localizer.csv");
  }
  for (const auto& d : bundle.specificity) {
    const fs::path file = dir / ("specificity_" + (d.averaged ? std::string("averaged") : d.participant_id) + ".csv");
    write_specificity_csv(file, d);
    written(file);
  }
  if (manifest.versions.empty()) manifest.versions = library_versions();
  manifest.add_stage("report");
  write_manifest(root / "summary.json", manifest);
}

}  // namespace sdc
