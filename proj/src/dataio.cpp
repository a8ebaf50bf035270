#include "sdc/dataio.hpp"

#include "csv.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <unordered_map>

namespace sdc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 4> kMagic = {'S', 'D', 'C', 'M'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kDtypeFloat32 = 0;
constexpr std::uint8_t kOrderRowMajor = 0;
constexpr std::size_t kHeaderBytes = 4 + 2 + 1 + 1 + 8 + 8;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_all(const fs::path& path, const std::string& bytes) {
  auto out = csv::open_out(path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

MatrixMeta meta_from_json(const json& j, const fs::path& where) {
  MatrixMeta m;
  try {
    if (j.contains("space_tag")) m.space = parse_space_tag(j.at("space_tag").get<std::string>());
    if (j.contains("participant_id")) m.participant_id = j.at("participant_id").get<std::string>();
    if (j.contains("stimulus_ids")) m.stimulus_ids = j.at("stimulus_ids").get<std::vector<std::string>>();
    if (j.contains("voxel_ids")) m.voxel_ids = j.at("voxel_ids").get<std::vector<std::int64_t>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, where.string() + ": bad sidecar: " + e.what());
  }
  return m;
}

json meta_to_json(const MatrixMeta& m) {
  json j = json::object();
  if (m.space) j["space_tag"] = std::string(space_tag_name(*m.space));
  if (m.participant_id) j["participant_id"] = *m.participant_id;
  if (m.stimulus_ids) j["stimulus_ids"] = *m.stimulus_ids;
  if (m.voxel_ids) j["voxel_ids"] = *m.voxel_ids;
  return j;
}

std::unordered_map<std::size_t, const TrialRecord*> by_trial_row(const TrialTable& trials) {
  std::unordered_map<std::size_t, const TrialRecord*> out;
  out.reserve(trials.records.size());
  for (const auto& r : trials.records) {
    if (!out.emplace(r.trial_row, &r).second) {
      fail(ErrorKind::Data, "duplicate trial_row " + std::to_string(r.trial_row));
    }
  }
  return out;
}

const TrialRecord& lookup_row(const std::unordered_map<std::size_t, const TrialRecord*>& index,
                              std::size_t row) {
  auto it = index.find(row);
  if (it == index.end()) fail(ErrorKind::Data, "row " + std::to_string(row) + " missing from trial table");
  return *it->second;
}

}  // namespace

std::string_view space_tag_name(SpaceTag tag) {
  switch (tag) {
    case SpaceTag::Clip: return "clip";
    case SpaceTag::Things: return "things";
    case SpaceTag::Sdc: return "sdc";
    case SpaceTag::Other: return "other";
  }
  return "other";
}

SpaceTag parse_space_tag(std::string_view name) {
  if (name == "clip") return SpaceTag::Clip;
  if (name == "things") return SpaceTag::Things;
  if (name == "sdc") return SpaceTag::Sdc;
  if (name == "other") return SpaceTag::Other;
  fail(ErrorKind::Format, "unknown space_tag '" + std::string(name) + "'");
}

void EmbeddingMatrix::validate() const {
  if (values.cols() <= 0) fail(ErrorKind::Data, "embedding matrix has no columns");
  require_finite(values, ErrorKind::Data, "embedding matrix");
  if (static_cast<Eigen::Index>(stimulus_ids.size()) != values.rows()) {
    fail(ErrorKind::Data, "stimulus_ids count differs from row count");
  }
  std::set<std::string> seen(stimulus_ids.begin(), stimulus_ids.end());
  if (seen.size() != stimulus_ids.size()) fail(ErrorKind::Data, "duplicate stimulus id");
}

std::map<std::string, Eigen::Index> EmbeddingMatrix::index() const {
  std::map<std::string, Eigen::Index> out;
  for (std::size_t i = 0; i < stimulus_ids.size(); ++i) out.emplace(stimulus_ids[i], static_cast<Eigen::Index>(i));
  return out;
}

void ResponseMatrix::validate() const {
  require_finite(values, ErrorKind::Data, "response matrix");
  if (static_cast<Eigen::Index>(voxel_ids.size()) != values.cols()) {
    fail(ErrorKind::Data, "voxel_ids count differs from column count");
  }
  std::set<std::int64_t> seen(voxel_ids.begin(), voxel_ids.end());
  if (seen.size() != voxel_ids.size()) fail(ErrorKind::Data, "duplicate voxel id");
}

void TrialTable::validate() const {
  std::map<std::pair<std::string, std::string>, std::vector<int>> reps;
  // trial_row indexes the participant's own response matrix.
  std::set<std::pair<std::string, std::size_t>> rows;
  for (const auto& r : records) {
    if (r.repetition < 1) fail(ErrorKind::Data, "repetition must be >= 1 for stimulus " + r.stimulus_id);
    if (!rows.insert({r.participant_id, r.trial_row}).second) {
      fail(ErrorKind::Data, "duplicate trial_row " + std::to_string(r.trial_row) + " for participant " + r.participant_id);
    }
    reps[{r.participant_id, r.stimulus_id}].push_back(r.repetition);
  }
  for (auto& [key, list] : reps) {
    std::sort(list.begin(), list.end());
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i] != static_cast<int>(i) + 1) {
        fail(ErrorKind::Data, "repetitions for stimulus " + key.second + " of participant " + key.first +
                                  " are duplicated or not 1..r");
      }
    }
  }
}

TrialTable TrialTable::for_participant(const std::string& participant_id) const {
  TrialTable out;
  for (const auto& r : records) {
    if (r.participant_id == participant_id) out.records.push_back(r);
  }
  return out;
}

std::vector<std::string> TrialTable::participants() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (seen.insert(r.participant_id).second) out.push_back(r.participant_id);
  }
  return out;
}

int RoiAtlas::roi_of(std::int64_t voxel) const {
  auto it = voxel_to_roi.find(voxel);
  if (it == voxel_to_roi.end()) fail(ErrorKind::Atlas, "voxel " + std::to_string(voxel) + " not in atlas");
  return it->second;
}

fs::path sidecar_path(const fs::path& path) { return fs::path(path.string() + ".meta.json"); }

MatrixFile read_matrix_file(const fs::path& path) {
  const std::string bytes = read_all(path);
  if (bytes.size() < kHeaderBytes) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic.data(), 4) != 0) {
      fail(ErrorKind::Format, path.string() + ": bad magic");
    }
    fail(ErrorKind::CorruptFile, path.string() + ": truncated header");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, kMagic.data(), 4) != 0) fail(ErrorKind::Format, path.string() + ": bad magic");
  const auto version = get_le<std::uint16_t>(p + 4);
  if (version != kVersion) fail(ErrorKind::Format, path.string() + ": unsupported version " + std::to_string(version));
  if (p[6] != kDtypeFloat32) fail(ErrorKind::Format, path.string() + ": unsupported dtype code");
  if (p[7] != kOrderRowMajor) fail(ErrorKind::Format, path.string() + ": unsupported order code");
  const auto rows = get_le<std::uint64_t>(p + 8);
  const auto cols = get_le<std::uint64_t>(p + 16);
  const std::uint64_t count = rows * cols;
  if (cols != 0 && count / cols != rows) fail(ErrorKind::CorruptFile, path.string() + ": dimension overflow");
  if (bytes.size() - kHeaderBytes != count * 4) {
    fail(ErrorKind::CorruptFile, path.string() + ": payload size does not match " + std::to_string(rows) + "x" +
                                     std::to_string(cols));
  }
  MatrixFile f;
  f.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const unsigned char* payload = p + kHeaderBytes;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto bitsv = get_le<std::uint32_t>(payload + 4 * i);
    const float v = std::bit_cast<float>(bitsv);
    if (!std::isfinite(v)) fail(ErrorKind::Data, path.string() + ": non-finite value at index " + std::to_string(i));
    f.values.data()[i] = static_cast<double>(v);
  }
  const fs::path side = sidecar_path(path);
  if (fs::exists(side)) {
    json j;
    try {
      j = json::parse(read_all(side));
    } catch (const json::exception& e) {
      fail(ErrorKind::Format, side.string() + ": " + e.what());
    }
    f.meta = meta_from_json(j, side);
  }
  return f;
}

void write_matrix_file(const fs::path& path, const Matrix& values, const std::optional<MatrixMeta>& meta) {
  std::string bytes;
  const std::size_t count = static_cast<std::size_t>(values.size());
  bytes.reserve(kHeaderBytes + 4 * count);
  bytes.append(kMagic.data(), kMagic.size());
  put_le<std::uint16_t>(bytes, kVersion);
  put_le<std::uint8_t>(bytes, kDtypeFloat32);
  put_le<std::uint8_t>(bytes, kOrderRowMajor);
  put_le<std::uint64_t>(bytes, static_cast<std::uint64_t>(values.rows()));
  put_le<std::uint64_t>(bytes, static_cast<std::uint64_t>(values.cols()));
  for (std::size_t i = 0; i < count; ++i) {
    const float v = static_cast<float>(values.data()[i]);
    if (!std::isfinite(v)) fail(ErrorKind::Data, path.string() + ": refusing to write non-finite value");
    put_le<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(v));
  }
  write_all(path, bytes);
  const fs::path side = sidecar_path(path);
  if (meta) {
    write_all(side, meta_to_json(*meta).dump(1) + "\n");
  } else if (fs::exists(side)) {
    fs::remove(side);
  }
}

std::variant<EmbeddingMatrix, ResponseMatrix> load_matrix(const fs::path& path) {
  MatrixFile f = read_matrix_file(path);
  const bool response = f.meta && (f.meta->participant_id || f.meta->voxel_ids);
  if (response) {
    ResponseMatrix r;
    r.participant_id = f.meta->participant_id.value_or("");
    if (f.meta->voxel_ids) {
      r.voxel_ids = *f.meta->voxel_ids;
    } else {
      for (Eigen::Index j = 0; j < f.values.cols(); ++j) r.voxel_ids.push_back(j);
    }
    r.values = std::move(f.values);
    r.validate();
    return r;
  }
  EmbeddingMatrix e;
  if (f.meta && f.meta->space) e.space = *f.meta->space;
  if (f.meta && f.meta->stimulus_ids) {
    e.stimulus_ids = *f.meta->stimulus_ids;
  } else {
    for (Eigen::Index i = 0; i < f.values.rows(); ++i) e.stimulus_ids.push_back(std::to_string(i));
  }
  e.values = std::move(f.values);
  e.validate();
  return e;
}

EmbeddingMatrix load_embeddings(const fs::path& path) {
  auto v = load_matrix(path);
  if (auto* e = std::get_if<EmbeddingMatrix>(&v)) return std::move(*e);
  fail(ErrorKind::Format, path.string() + ": expected an embedding matrix, found responses");
}

ResponseMatrix load_responses(const fs::path& path) {
  auto v = load_matrix(path);
  if (auto* r = std::get_if<ResponseMatrix>(&v)) return std::move(*r);
  // A bare matrix without sidecar is accepted as responses with positional voxel ids.
  auto& e = std::get<EmbeddingMatrix>(v);
  ResponseMatrix r;
  r.values = std::move(e.values);
  for (Eigen::Index j = 0; j < r.values.cols(); ++j) r.voxel_ids.push_back(j);
  return r;
}

void save_embeddings(const fs::path& path, const EmbeddingMatrix& m) {
  m.validate();
  MatrixMeta meta;
  meta.space = m.space;
  meta.stimulus_ids = m.stimulus_ids;
  write_matrix_file(path, m.values, meta);
}

void save_responses(const fs::path& path, const ResponseMatrix& m) {
  m.validate();
  MatrixMeta meta;
  meta.participant_id = m.participant_id;
  meta.voxel_ids = m.voxel_ids;
  write_matrix_file(path, m.values, meta);
}

TrialTable read_trials(const fs::path& path) {
  const auto t = csv::read(path, {"trial_row", "stimulus_id", "participant_id", "session", "repetition", "shared"});
  TrialTable out;
  out.records.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& c = t.rows[i];
    const std::string where = path.string() + ":" + std::to_string(t.line_numbers[i]);
    TrialRecord r;
    r.trial_row = csv::parse_int<std::size_t>(c[0], where);
    r.stimulus_id = c[1];
    r.participant_id = c[2];
    if (r.stimulus_id.empty() || r.participant_id.empty()) fail(ErrorKind::Data, where + ": empty id");
    r.session = csv::parse_int<int>(c[3], where);
    r.repetition = csv::parse_int<int>(c[4], where);
    if (c[5] == "1" || c[5] == "true") {
      r.shared = true;
    } else if (c[5] == "0" || c[5] == "false") {
      r.shared = false;
    } else {
      fail(ErrorKind::Data, where + ": shared must be 0/1/true/false");
    }
    out.records.push_back(std::move(r));
  }
  out.validate();
  return out;
}

void write_trials(const fs::path& path, const TrialTable& trials) {
  auto out = csv::open_out(path);
  out << "trial_row,stimulus_id,participant_id,session,repetition,shared\n";
  for (const auto& r : trials.records) {
    out << r.trial_row << ',' << r.stimulus_id << ',' << r.participant_id << ',' << r.session << ','
        << r.repetition << ',' << (r.shared ? 1 : 0) << '\n';
  }
}

RoiAtlas read_atlas(const fs::path& path, int roi_count) {
  if (roi_count <= 0) fail(ErrorKind::Atlas, "roi count must be positive");
  const auto t = csv::read(path, {"voxel_index", "roi_id"});
  RoiAtlas atlas;
  atlas.roi_count = roi_count;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::string where = path.string() + ":" + std::to_string(t.line_numbers[i]);
    const auto voxel = csv::parse_int<std::int64_t>(t.rows[i][0], where);
    const auto roi = csv::parse_int<int>(t.rows[i][1], where);
    if (roi != kUnassignedRoi && (roi < 0 || roi >= roi_count)) {
      fail(ErrorKind::Atlas, where + ": roi_id out of range");
    }
    if (!atlas.voxel_to_roi.emplace(voxel, roi).second) fail(ErrorKind::Atlas, where + ": duplicate voxel");
  }
  return atlas;
}

void write_atlas(const fs::path& path, const RoiAtlas& atlas) {
  auto out = csv::open_out(path);
  out << "voxel_index,roi_id\n";
  for (const auto& [voxel, roi] : atlas.voxel_to_roi) out << voxel << ',' << roi << '\n';
}

DatasetSplit make_split(const TrialTable& trials, std::size_t val_size, std::size_t test_size, std::uint64_t seed) {
  if (trials.participants().size() > 1) fail(ErrorKind::Split, "make_split expects one participant's trials");

  struct Stim {
    std::vector<std::size_t> rows;
    bool shared = true;
  };
  std::map<std::string, Stim> stims;
  for (const auto& r : trials.records) {
    auto& s = stims[r.stimulus_id];
    s.rows.push_back(r.trial_row);
    s.shared = s.shared && r.shared;
  }
  std::size_t max_reps = 0;
  for (const auto& [id, s] : stims) max_reps = std::max(max_reps, s.rows.size());

  std::vector<std::string> full, test_pool;
  for (const auto& [id, s] : stims) {
    if (s.rows.size() != max_reps) continue;
    full.push_back(id);
    if (s.shared) test_pool.push_back(id);
  }
  if (val_size + test_size > full.size()) {
    fail(ErrorKind::Split, "requested " + std::to_string(val_size + test_size) + " held-out stimuli but only " +
                               std::to_string(full.size()) + " are fully repeated");
  }
  if (test_size > test_pool.size()) {
    fail(ErrorKind::Split, "requested " + std::to_string(test_size) + " test stimuli but only " +
                               std::to_string(test_pool.size()) + " are shared and fully repeated");
  }

  std::uint64_t state = seed;
  std::set<std::string> test_ids, val_ids;
  const auto test_perm = random_permutation(test_pool.size(), state);
  for (std::size_t i = 0; i < test_size; ++i) test_ids.insert(test_pool[test_perm[i]]);

  std::vector<std::string> val_pool;
  for (const auto& id : full) {
    if (!test_ids.count(id)) val_pool.push_back(id);
  }
  if (val_size > val_pool.size()) fail(ErrorKind::Split, "not enough fully repeated stimuli left for validation");
  const auto val_perm = random_permutation(val_pool.size(), state);
  for (std::size_t i = 0; i < val_size; ++i) val_ids.insert(val_pool[val_perm[i]]);

  DatasetSplit split;
  split.seed = seed;
  for (const auto& [id, s] : stims) {
    auto& dst = test_ids.count(id) ? split.test_rows : val_ids.count(id) ? split.val_rows : split.train_rows;
    dst.insert(dst.end(), s.rows.begin(), s.rows.end());
  }
  std::sort(split.train_rows.begin(), split.train_rows.end());
  std::sort(split.val_rows.begin(), split.val_rows.end());
  std::sort(split.test_rows.begin(), split.test_rows.end());
  return split;
}

double noise_ceiling_from_variances(double signal_var, double noise_var, double mean_reps) {
  const double noise_term = noise_var / mean_reps;
  const double denom = signal_var + noise_term;
  if (!(denom > 0.0)) return 0.0;
  return std::clamp(100.0 * signal_var / denom, 0.0, 100.0);
}

std::vector<double> noise_ceiling(const ResponseMatrix& responses, const TrialTable& trials,
                                  const std::vector<std::size_t>& train_rows) {
  const auto index = by_trial_row(trials);
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t row : train_rows) {
    if (row >= static_cast<std::size_t>(responses.rows())) fail(ErrorKind::Data, "train row out of range");
    groups[lookup_row(index, row).stimulus_id].push_back(row);
  }
  std::vector<const std::vector<std::size_t>*> repeated;
  double rep_total = 0.0;
  for (const auto& [id, rows] : groups) {
    if (rows.size() >= 2) {
      repeated.push_back(&rows);
      rep_total += static_cast<double>(rows.size());
    }
  }
  if (repeated.empty()) fail(ErrorKind::NoiseCeiling, "no stimulus is repeated within the training rows");
  const double mean_reps = rep_total / static_cast<double>(repeated.size());

  const Eigen::Index v = responses.cols();
  Matrix means(static_cast<Eigen::Index>(repeated.size()), v);
  RowVector within = RowVector::Zero(v);
  for (std::size_t s = 0; s < repeated.size(); ++s) {
    const auto& rows = *repeated[s];
    RowVector m = RowVector::Zero(v);
    for (std::size_t r : rows) m += responses.values.row(static_cast<Eigen::Index>(r));
    m /= static_cast<double>(rows.size());
    RowVector ss = RowVector::Zero(v);
    for (std::size_t r : rows) ss += (responses.values.row(static_cast<Eigen::Index>(r)) - m).array().square().matrix();
    within += ss / static_cast<double>(rows.size() - 1);
    means.row(static_cast<Eigen::Index>(s)) = m;
  }
  within /= static_cast<double>(repeated.size());

  RowVector between = RowVector::Zero(v);
  if (repeated.size() >= 2) {
    const RowVector grand = means.colwise().mean();
    between = (means.rowwise() - grand).array().square().colwise().sum().matrix() /
              static_cast<double>(repeated.size() - 1);
  }

  std::vector<double> nc(static_cast<std::size_t>(v));
  for (Eigen::Index j = 0; j < v; ++j) {
    const double noise_var = within[j];
    const double signal_var = std::max(0.0, between[j] - noise_var / mean_reps);
    nc[static_cast<std::size_t>(j)] = noise_ceiling_from_variances(signal_var, noise_var, mean_reps);
  }
  return nc;
}

std::vector<std::size_t> select_voxels(const std::vector<double>& nc, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 100.0)) fail(ErrorKind::InputValidation, "threshold must lie in [0,100]");
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < nc.size(); ++j) {
    if (nc[j] > threshold) out.push_back(j);
  }
  if (out.empty()) fail(ErrorKind::EmptySelection, "no voxel exceeds noise ceiling " + csv::format_double(threshold));
  return out;
}

ResponseMatrix select_columns(const ResponseMatrix& responses, const std::vector<std::size_t>& columns) {
  ResponseMatrix out;
  out.participant_id = responses.participant_id;
  out.values.resize(responses.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t k = 0; k < columns.size(); ++k) {
    const auto j = static_cast<Eigen::Index>(columns[k]);
    require_shape(j < responses.cols(), "select_columns: column out of range");
    out.values.col(static_cast<Eigen::Index>(k)) = responses.values.col(j);
    out.voxel_ids.push_back(responses.voxel_ids[columns[k]]);
  }
  return out;
}

ZScore ZScore::fit(const Matrix& x, const std::vector<std::size_t>& rows) {
  if (rows.empty()) fail(ErrorKind::Data, "z-score fit needs at least one row");
  const Matrix sub = take_rows(x, rows);
  ZScore z;
  z.mean = sub.colwise().mean();
  const RowVector var = (sub.rowwise() - z.mean).array().square().colwise().mean().matrix();
  z.scale = var.array().sqrt().matrix();
  for (Eigen::Index j = 0; j < z.scale.size(); ++j) {
    if (!(z.scale[j] > 0.0)) z.scale[j] = 1.0;
  }
  return z;
}

Matrix ZScore::apply(const Matrix& x) const {
  require_shape(x.cols() == mean.size(), "z-score: column count mismatch");
  return ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

StimulusAverages average_by_stimulus(const Matrix& x, const TrialTable& trials, const std::vector<std::size_t>& rows) {
  const auto index = by_trial_row(trials);
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r : rows) {
    const auto& rec = lookup_row(index, r);
    auto [it, inserted] = groups.try_emplace(rec.stimulus_id);
    if (inserted) order.push_back(rec.stimulus_id);
    it->second.push_back(r);
  }
  StimulusAverages out;
  out.values = Matrix::Zero(static_cast<Eigen::Index>(order.size()), x.cols());
  for (std::size_t s = 0; s < order.size(); ++s) {
    const auto& g = groups[order[s]];
    for (std::size_t r : g) {
      require_shape(r < static_cast<std::size_t>(x.rows()), "average_by_stimulus: row out of range");
      out.values.row(static_cast<Eigen::Index>(s)) += x.row(static_cast<Eigen::Index>(r));
    }
    out.values.row(static_cast<Eigen::Index>(s)) /= static_cast<double>(g.size());
  }
  out.stimulus_ids = std::move(order);
  return out;
}

Matrix gather_embeddings(const EmbeddingMatrix& embeddings, const std::vector<std::string>& ids) {
  const auto idx = embeddings.index();
  Matrix out(static_cast<Eigen::Index>(ids.size()), embeddings.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = idx.find(ids[i]);
    if (it == idx.end()) fail(ErrorKind::Data, "stimulus '" + ids[i] + "' has no embedding");
    out.row(static_cast<Eigen::Index>(i)) = embeddings.values.row(it->second);
  }
  return out;
}

Matrix trial_embeddings(const EmbeddingMatrix& embeddings, const TrialTable& trials,
                        const std::vector<std::size_t>& rows) {
  const auto index = by_trial_row(trials);
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (std::size_t r : rows) ids.push_back(lookup_row(index, r).stimulus_id);
  return gather_embeddings(embeddings, ids);
}

Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require_shape(rows[i] < static_cast<std::size_t>(x.rows()), "take_rows: row out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

}  // namespace sdc
