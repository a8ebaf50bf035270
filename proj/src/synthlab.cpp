#include "sdc/synthlab.hpp"

#include "csv.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace sdc {

namespace {

Matrix unit_rows(Matrix m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0.0) m.row(i) /= n;
  }
  return m;
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t& state) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = next_normal(state);
  return m;
}

std::string participant_name(int s) { return "P" + std::to_string(s + 1); }
std::string stimulus_name(int i) {
  std::string digits = std::to_string(i);
  return "stim" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}

struct Layout {
  std::vector<std::vector<std::int64_t>> supports;  // per concept
  std::vector<int> support_roi;
  std::vector<double> loadings;  // per voxel id; 0 for non-coding
  std::vector<int> concept_of;   // per voxel id; -1 for non-coding
  RoiAtlas atlas;
};

Layout make_layout(const SynthSpec& spec, int participant) {
  std::uint64_t state = derive_seed(spec.seed, "layout", static_cast<std::uint64_t>(participant));
  const int v = spec.voxels();
  const int c = spec.true_concepts;
  const auto perm = random_permutation(static_cast<std::size_t>(v), state);

  std::vector<int> roi_for_concept(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) roi_for_concept[static_cast<std::size_t>(i)] = i;
  if (spec.consistency == ConsistencyMode::Shuffled) {
    const auto p = random_permutation(static_cast<std::size_t>(c), state);
    for (int i = 0; i < c; ++i) roi_for_concept[static_cast<std::size_t>(i)] = static_cast<int>(p[static_cast<std::size_t>(i)]);
  }

  Layout out;
  out.supports.resize(static_cast<std::size_t>(c));
  out.support_roi = roi_for_concept;
  out.loadings.assign(static_cast<std::size_t>(v), 0.0);
  out.concept_of.assign(static_cast<std::size_t>(v), -1);
  out.atlas.roi_count = spec.roi_count();

  // ROI block k occupies perm[k*support, (k+1)*support).
  for (int i = 0; i < c; ++i) {
    const int roi = roi_for_concept[static_cast<std::size_t>(i)];
    const double sign = next_uniform(state) < 0.5 ? -1.0 : 1.0;
    for (int k = 0; k < spec.support_size; ++k) {
      const auto voxel = static_cast<std::int64_t>(perm[static_cast<std::size_t>(roi * spec.support_size + k)]);
      out.supports[static_cast<std::size_t>(i)].push_back(voxel);
      out.loadings[static_cast<std::size_t>(voxel)] = sign * (0.5 + next_uniform(state));
      out.concept_of[static_cast<std::size_t>(voxel)] = i;
      out.atlas.voxel_to_roi[voxel] = roi;
    }
    std::sort(out.supports[static_cast<std::size_t>(i)].begin(), out.supports[static_cast<std::size_t>(i)].end());
  }
  for (int k = c * spec.support_size; k < v; ++k) {
    const auto voxel = static_cast<std::int64_t>(perm[static_cast<std::size_t>(k)]);
    const int extra = k - c * spec.support_size;
    out.atlas.voxel_to_roi[voxel] = spec.noise_rois > 0 ? c + extra % spec.noise_rois : kUnassignedRoi;
  }
  return out;
}

// Noiseless stimulus x voxel signal for one participant.
Matrix voxel_signal(const SynthSpec& spec, const Matrix& scores, const Layout& layout) {
  const int v = spec.voxels();
  Matrix sig = Matrix::Zero(scores.rows(), v);
  for (int j = 0; j < v; ++j) {
    const int i = layout.concept_of[static_cast<std::size_t>(j)];
    if (i < 0) continue;
    const double a = layout.loadings[static_cast<std::size_t>(j)];
    for (Eigen::Index s = 0; s < scores.rows(); ++s) {
      const double drive = a * scores(s, i);
      sig(s, j) = spec.nonlinearity == VoxelNonlinearity::Tanh ? std::tanh(spec.tanh_gain * drive) / spec.tanh_gain
                                                                : drive;
    }
  }
  return sig;
}

struct Shared {
  EmbeddingMatrix embeddings;
  Matrix projection;
  Matrix scores;
};

Shared make_shared(const SynthSpec& spec) {
  std::uint64_t state = derive_seed(spec.seed, "embeddings");
  Shared sh;
  sh.embeddings.space = SpaceTag::Clip;
  sh.embeddings.values = unit_rows(gaussian(spec.stimuli, spec.embed_dim, state));
  for (int i = 0; i < spec.stimuli; ++i) sh.embeddings.stimulus_ids.push_back(stimulus_name(i));

  std::uint64_t pstate = derive_seed(spec.seed, "projection");
  const ColMatrix g = gaussian(spec.embed_dim, spec.true_concepts, pstate);
  Eigen::HouseholderQR<ColMatrix> qr(g);
  const ColMatrix q = qr.householderQ() * ColMatrix::Identity(spec.embed_dim, spec.true_concepts);
  sh.projection = q.transpose();
  sh.scores = (sh.embeddings.values * sh.projection.transpose()).cwiseMax(0.0);
  return sh;
}

}  // namespace

void SynthSpec::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::Spec, "synth spec: " + m); };
  if (participants <= 0 || stimuli <= 0 || reps <= 0 || embed_dim <= 0 || true_concepts <= 0 || support_size <= 0) {
    bad("all counts must be positive");
  }
  if (extra_voxels < 0 || noise_rois < 0) bad("extra_voxels and noise_rois must be >= 0");
  if (true_concepts > embed_dim) bad("true_concepts cannot exceed embed_dim");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) bad("noise_sigma must be finite and >= 0");
  if (!(tanh_gain > 0.0)) bad("tanh_gain must be positive");
  if (shared_stimuli > stimuli) bad("shared_stimuli exceeds stimuli");
  if (incomplete_stimuli < 0 || incomplete_stimuli > stimuli) bad("incomplete_stimuli out of range");
  if (incomplete_stimuli > 0 && reps < 2) bad("incomplete stimuli need reps >= 2");
}

SynthData generate(const SynthSpec& spec) {
  spec.validate();
  const Shared sh = make_shared(spec);
  const int v = spec.voxels();
  const int shared_count = spec.shared_stimuli < 0 ? spec.stimuli : spec.shared_stimuli;

  SynthData out;
  out.embeddings = sh.embeddings;
  out.truth.true_projection = sh.projection;

  for (int s = 0; s < spec.participants; ++s) {
    const Layout layout = make_layout(spec, s);
    const Matrix signal = voxel_signal(spec, sh.scores, layout);
    const std::string pid = participant_name(s);

    // Trial order: repetition-major, stimuli shuffled within each repetition.
    std::uint64_t order_state = derive_seed(spec.seed, "order", static_cast<std::uint64_t>(s));
    std::uint64_t noise_state = derive_seed(spec.seed, "noise", static_cast<std::uint64_t>(s));
    std::vector<std::pair<int, int>> trial_order;  // (stimulus, repetition)
    for (int r = 1; r <= spec.reps; ++r) {
      const auto perm = random_permutation(static_cast<std::size_t>(spec.stimuli), order_state);
      for (std::size_t k = 0; k < perm.size(); ++k) {
        const int stim = static_cast<int>(perm[k]);
        // The first `incomplete_stimuli` stimuli miss their last repetition.
        if (r == spec.reps && stim < spec.incomplete_stimuli) continue;
        trial_order.emplace_back(stim, r);
      }
    }

    ResponseMatrix resp;
    resp.participant_id = pid;
    resp.values.resize(static_cast<Eigen::Index>(trial_order.size()), v);
    for (int j = 0; j < v; ++j) resp.voxel_ids.push_back(j);
    for (std::size_t t = 0; t < trial_order.size(); ++t) {
      const auto [stim, rep] = trial_order[t];
      for (int j = 0; j < v; ++j) {
        resp.values(static_cast<Eigen::Index>(t), j) = signal(stim, j) + spec.noise_sigma * next_normal(noise_state);
      }
      TrialRecord rec;
      rec.trial_row = t;
      rec.stimulus_id = sh.embeddings.stimulus_ids[static_cast<std::size_t>(stim)];
      rec.participant_id = pid;
      rec.session = rep;
      rec.repetition = rep;
      rec.shared = stim < shared_count;
      out.trials.records.push_back(std::move(rec));
    }
    out.responses.push_back(std::move(resp));
    out.truth.supports.push_back(layout.supports);
    out.truth.support_roi.push_back(layout.support_roi);
    out.truth.atlases.push_back(layout.atlas);
    out.truth.participant_ids.push_back(pid);
  }
  return out;
}

double calibrate_noise_sigma(const SynthSpec& spec, double target_nc_percent) {
  spec.validate();
  if (!(target_nc_percent > 0.0 && target_nc_percent < 100.0)) {
    fail(ErrorKind::Spec, "target noise ceiling must lie in (0, 100)");
  }
  const Shared sh = make_shared(spec);
  double total = 0.0;
  int count = 0;
  for (int s = 0; s < spec.participants; ++s) {
    const Layout layout = make_layout(spec, s);
    const Matrix signal = voxel_signal(spec, sh.scores, layout);
    for (int j = 0; j < spec.voxels(); ++j) {
      if (layout.concept_of[static_cast<std::size_t>(j)] < 0) continue;
      const auto col = signal.col(j);
      const double mean = col.mean();
      total += (col.array() - mean).square().sum() / static_cast<double>(col.size() - 1);
      ++count;
    }
  }
  const double signal_var = total / count;
  const double p = target_nc_percent / 100.0;
  // NC = s / (s + n / r)  =>  n = r s (1 - p) / p
  return std::sqrt(spec.reps * signal_var * (1.0 - p) / p);
}

double jaccard(std::vector<std::int64_t> a, std::vector<std::int64_t> b) {
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  if (a.empty() && b.empty()) return 1.0;
  std::vector<std::int64_t> inter;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  const double uni = static_cast<double>(a.size() + b.size() - inter.size());
  return static_cast<double>(inter.size()) / uni;
}

ThingsLike generate_things_like(int classes, int embed_dim, int dims, std::uint64_t seed) {
  if (classes <= 0 || embed_dim <= 0 || dims <= 0) fail(ErrorKind::Spec, "things-like sizes must be positive");
  std::uint64_t state = derive_seed(seed, "things");
  ThingsLike t;
  t.u_avg.space = SpaceTag::Clip;
  t.u_avg.values = unit_rows(gaussian(classes, embed_dim, state));
  t.true_map = gaussian(dims, embed_dim, state);
  t.targets.space = SpaceTag::Things;
  t.targets.values = (t.u_avg.values * t.true_map.transpose()).cwiseMax(0.0);
  for (int i = 0; i < classes; ++i) {
    const std::string id = "class" + std::to_string(i);
    t.u_avg.stimulus_ids.push_back(id);
    t.targets.stimulus_ids.push_back(id);
  }
  return t;
}

void write_truth_json(const std::filesystem::path& path, const SynthSpec& spec, const SynthTruth& truth,
                      const std::filesystem::path& projection_path,
                      const std::vector<std::filesystem::path>& atlas_paths) {
  nlohmann::json j;
  j["true_projection"] = projection_path.generic_string();
  j["true_concepts"] = spec.true_concepts;
  j["support_size"] = spec.support_size;
  j["roi_count"] = spec.roi_count();
  j["consistency_mode"] = spec.consistency == ConsistencyMode::Consistent ? "consistent" : "shuffled";
  j["noise_sigma"] = spec.noise_sigma;
  nlohmann::json parts = nlohmann::json::array();
  for (std::size_t s = 0; s < truth.participant_ids.size(); ++s) {
    nlohmann::json p;
    p["participant_id"] = truth.participant_ids[s];
    p["supports"] = truth.supports[s];
    p["support_roi"] = truth.support_roi[s];
    if (s < atlas_paths.size()) p["atlas"] = atlas_paths[s].generic_string();
    parts.push_back(std::move(p));
  }
  j["participants"] = std::move(parts);
  auto out = csv::open_out(path);
  out << j.dump(1) << '\n';
}

}  // namespace sdc
