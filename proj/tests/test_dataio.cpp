#include "sdc/dataio.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>
#include <cstring>
#include <limits>
#include <set>

using namespace sdc;
using testutil::TempDir;

namespace {

// stimuli x reps trials for one participant, rows ordered stimulus-major.
TrialTable grid_trials(int stimuli, int reps, const std::string& pid = "P1", bool shared = true) {
  TrialTable t;
  std::size_t row = 0;
  for (int s = 0; s < stimuli; ++s) {
    for (int r = 1; r <= reps; ++r) {
      t.records.push_back({row++, "s" + std::to_string(s), pid, 1, r, shared});
    }
  }
  return t;
}

std::vector<std::size_t> all_rows(const TrialTable& t) {
  std::vector<std::size_t> rows;
  for (const auto& r : t.records) rows.push_back(r.trial_row);
  return rows;
}

// Independent one-way random-effects noise ceiling for one voxel, straight
// from the defining sums.
double nc_oracle(const std::vector<std::vector<double>>& groups) {
  double within = 0.0, reps = 0.0;
  std::vector<double> means;
  for (const auto& g : groups) {
    double m = 0.0;
    for (double x : g) m += x;
    m /= static_cast<double>(g.size());
    double ss = 0.0;
    for (double x : g) ss += (x - m) * (x - m);
    within += ss / static_cast<double>(g.size() - 1);
    reps += static_cast<double>(g.size());
    means.push_back(m);
  }
  const double k = static_cast<double>(groups.size());
  within /= k;
  reps /= k;
  double grand = 0.0;
  for (double m : means) grand += m;
  grand /= k;
  double between = 0.0;
  for (double m : means) between += (m - grand) * (m - grand);
  between /= (k - 1.0);
  const double signal = std::max(0.0, between - within / reps);
  const double denom = signal + within / reps;
  if (denom <= 0.0) return 0.0;
  return std::clamp(100.0 * signal / denom, 0.0, 100.0);
}

ResponseMatrix responses_for(const Matrix& values, const std::string& pid = "P1") {
  ResponseMatrix r;
  r.values = values;
  r.participant_id = pid;
  for (Eigen::Index j = 0; j < values.cols(); ++j) r.voxel_ids.push_back(j);
  return r;
}

}  // namespace

TEST_CASE("matrix container round trip keeps values and bytes") {
  TempDir dir("dataio_rt");
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix m = testutil::float_exact(1 + static_cast<Eigen::Index>(rng() % 17),
                                           1 + static_cast<Eigen::Index>(rng() % 13), rng);
    const auto a = dir / "a.sdcm";
    const auto b = dir / "b.sdcm";
    write_matrix_file(a, m);
    const MatrixFile loaded = read_matrix_file(a);
    CHECK(loaded.values == m);
    write_matrix_file(b, loaded.values);
    CHECK(testutil::slurp(a) == testutil::slurp(b));
  }
}

TEST_CASE("matrix container 2x3 example and header layout") {
  TempDir dir("dataio_hdr");
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  write_matrix_file(dir / "m.sdcm", m);
  const std::string bytes = testutil::slurp(dir / "m.sdcm");
  REQUIRE(bytes.size() == 4 + 2 + 1 + 1 + 8 + 8 + 6 * 4);
  CHECK(bytes.substr(0, 4) == "SDCM");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(static_cast<unsigned char>(bytes[5]) == 0);
  CHECK(static_cast<unsigned char>(bytes[6]) == 0);
  CHECK(static_cast<unsigned char>(bytes[7]) == 0);
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(static_cast<unsigned char>(bytes[16]) == 3);
  const auto loaded = read_matrix_file(dir / "m.sdcm");
  CHECK(loaded.values.rows() == 2);
  CHECK(loaded.values.cols() == 3);
  CHECK(loaded.values == m);
}

TEST_CASE("matrix container errors") {
  TempDir dir("dataio_err");
  Matrix m = Matrix::Constant(4, 4, 0.5);
  write_matrix_file(dir / "m.sdcm", m);
  const std::string bytes = testutil::slurp(dir / "m.sdcm");

  auto kind_of = [&](const std::string& content) {
    testutil::write_text(dir / "x.sdcm", content);
    try {
      read_matrix_file(dir / "x.sdcm");
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  SUBCASE("truncated payload") { CHECK(kind_of(bytes.substr(0, bytes.size() - 3)) == ErrorKind::CorruptFile); }
  SUBCASE("bad magic") {
    std::string b = bytes;
    b[0] = 'X';
    CHECK(kind_of(b) == ErrorKind::Format);
  }
  SUBCASE("bad version") {
    std::string b = bytes;
    b[4] = 9;
    CHECK(kind_of(b) == ErrorKind::Format);
  }
  SUBCASE("non-finite value") {
    std::string b = bytes;
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(&b[24], &nan, sizeof(float));
    CHECK(kind_of(b) == ErrorKind::Data);
  }
}

TEST_CASE("sidecar decides matrix kind") {
  TempDir dir("dataio_kind");
  EmbeddingMatrix e;
  e.values = Matrix::Identity(3, 2);
  e.space = SpaceTag::Things;
  e.stimulus_ids = {"a", "b", "c"};
  save_embeddings(dir / "e.sdcm", e);
  ResponseMatrix r = responses_for(Matrix::Ones(2, 3), "P7");
  r.voxel_ids = {10, 20, 30};
  save_responses(dir / "r.sdcm", r);

  const auto le = load_matrix(dir / "e.sdcm");
  REQUIRE(std::holds_alternative<EmbeddingMatrix>(le));
  CHECK(std::get<EmbeddingMatrix>(le).space == SpaceTag::Things);
  CHECK(std::get<EmbeddingMatrix>(le).stimulus_ids == e.stimulus_ids);
  const auto lr = load_matrix(dir / "r.sdcm");
  REQUIRE(std::holds_alternative<ResponseMatrix>(lr));
  CHECK(std::get<ResponseMatrix>(lr).participant_id == "P7");
  CHECK(std::get<ResponseMatrix>(lr).voxel_ids == r.voxel_ids);
}

TEST_CASE("embedding and trial invariants") {
  EmbeddingMatrix e;
  e.values = Matrix::Zero(2, 2);
  e.stimulus_ids = {"a", "a"};
  CHECK_THROWS_AS(e.validate(), Error);

  TrialTable dup = grid_trials(2, 2);
  dup.records[1].repetition = 1;
  CHECK_THROWS_AS(dup.validate(), Error);

  TrialTable gap = grid_trials(2, 2);
  gap.records[1].repetition = 3;
  CHECK_THROWS_AS(gap.validate(), Error);

  CHECK_NOTHROW(grid_trials(3, 3).validate());
}

TEST_CASE("trial and atlas CSV round trip") {
  TempDir dir("dataio_csv");
  TrialTable t = grid_trials(4, 2);
  t.records[3].shared = false;
  t.records[3].session = 5;
  write_trials(dir / "t.csv", t);
  const TrialTable back = read_trials(dir / "t.csv");
  REQUIRE(back.records.size() == t.records.size());
  for (std::size_t i = 0; i < t.records.size(); ++i) {
    CHECK(back.records[i].stimulus_id == t.records[i].stimulus_id);
    CHECK(back.records[i].repetition == t.records[i].repetition);
    CHECK(back.records[i].shared == t.records[i].shared);
    CHECK(back.records[i].session == t.records[i].session);
  }
  CHECK(testutil::slurp(dir / "t.csv").rfind("trial_row,stimulus_id,participant_id,session,repetition,shared", 0) == 0);

  RoiAtlas a;
  a.voxel_to_roi = {{0, 3}, {5, kUnassignedRoi}, {9, 359}};
  write_atlas(dir / "a.csv", a);
  const RoiAtlas b = read_atlas(dir / "a.csv");
  CHECK(b.voxel_to_roi == a.voxel_to_roi);
  CHECK(b.roi_of(5) == kUnassignedRoi);
  CHECK_THROWS_AS(b.roi_of(6), Error);

  testutil::write_text(dir / "bad.csv", "trial_row,stimulus_id,participant_id,session,repetition,shared\n0,s,P,1,x,1\n");
  CHECK_THROWS_AS(read_trials(dir / "bad.csv"), Error);
}

TEST_CASE("make_split sizes and forced-train rule") {
  TrialTable t = grid_trials(30, 3);
  // Stimulus s29 has only one of three repetitions.
  t.records.erase(t.records.end() - 2, t.records.end());
  const DatasetSplit s = make_split(t, 5, 7, 3);
  std::map<std::string, int> fold;
  auto mark = [&](const std::vector<std::size_t>& rows, int f) {
    for (auto r : rows) fold[t.records[r].stimulus_id] = f;
  };
  mark(s.train_rows, 0);
  mark(s.val_rows, 1);
  mark(s.test_rows, 2);
  CHECK(s.val_rows.size() == 5 * 3);
  CHECK(s.test_rows.size() == 7 * 3);
  CHECK(fold["s29"] == 0);

  const DatasetSplit whole = make_split(grid_trials(10, 2), 0, 10, 1);
  CHECK(whole.test_rows.size() == 20);
  CHECK(whole.train_rows.empty());
  CHECK(whole.val_rows.empty());

  CHECK_THROWS_AS(make_split(grid_trials(10, 2), 6, 5, 1), Error);
}

TEST_CASE("make_split draws test only from shared stimuli") {
  TrialTable t = grid_trials(20, 2);
  for (auto& r : t.records) r.shared = (r.stimulus_id < "s15");
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DatasetSplit s = make_split(t, 3, 4, seed);
    for (auto r : s.test_rows) CHECK(t.records[r].shared);
  }
}

TEST_CASE("make_split property: disjoint, stimulus-coherent, deterministic over 100 seeds") {
  TrialTable t = grid_trials(40, 3);
  for (std::size_t i = 0; i < 6; ++i) t.records.pop_back();  // two partial stimuli
  const auto n = t.records.size();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const DatasetSplit s = make_split(t, 8, 6, seed);
    const DatasetSplit again = make_split(t, 8, 6, seed);
    CHECK(s.train_rows == again.train_rows);
    CHECK(s.val_rows == again.val_rows);
    CHECK(s.test_rows == again.test_rows);

    std::vector<int> seen(n, 0);
    std::map<std::string, std::set<int>> folds;
    int f = 0;
    for (const auto* rows : {&s.train_rows, &s.val_rows, &s.test_rows}) {
      for (auto r : *rows) {
        ++seen[r];
        folds[t.records[r].stimulus_id].insert(f);
      }
      ++f;
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
    for (const auto& [id, fs] : folds) CHECK(fs.size() == 1);
  }
}

TEST_CASE("noise ceiling: analytic cases") {
  CHECK(noise_ceiling_from_variances(1.0, 1.0, 3.0) == doctest::Approx(75.0).epsilon(1e-12));
  CHECK(std::abs(noise_ceiling_from_variances(2.5, 2.5, 3.0) - 75.0) <= 1e-9);
  CHECK(noise_ceiling_from_variances(0.0, 1.0, 3.0) == 0.0);
  CHECK(noise_ceiling_from_variances(1.0, 0.0, 3.0) == 100.0);

  // Zero noise: identical repetitions give 100 for every voxel.
  const TrialTable t = grid_trials(50, 3);
  std::mt19937_64 rng(5);
  const Matrix stim = testutil::gaussian(50, 6, rng);
  Matrix x(150, 6);
  for (Eigen::Index r = 0; r < 150; ++r) x.row(r) = stim.row(r / 3);
  for (double v : noise_ceiling(responses_for(x), t, all_rows(t))) CHECK(v == 100.0);
}

TEST_CASE("noise ceiling matches the independent oracle and ignores repetition order") {
  std::mt19937_64 rng(17);
  TrialTable t = grid_trials(60, 3);
  // Some stimuli get 2 repetitions in the rows passed in.
  std::vector<std::size_t> rows = all_rows(t);
  rows.erase(std::remove_if(rows.begin(), rows.end(), [](std::size_t r) { return r % 3 == 2 && r < 30; }), rows.end());
  const Matrix signal = testutil::gaussian(60, 5, rng);
  Matrix x = testutil::gaussian(180, 5, rng);
  for (Eigen::Index r = 0; r < 180; ++r) x.row(r) += 0.7 * signal.row(r / 3);

  const auto nc = noise_ceiling(responses_for(x), t, rows);
  for (Eigen::Index j = 0; j < 5; ++j) {
    std::map<std::string, std::vector<double>> g;
    for (auto r : rows) g[t.records[r].stimulus_id].push_back(x(static_cast<Eigen::Index>(r), j));
    std::vector<std::vector<double>> groups;
    for (auto& [id, v] : g) groups.push_back(v);
    CHECK(nc[static_cast<std::size_t>(j)] == doctest::Approx(nc_oracle(groups)).epsilon(1e-10));
  }

  // Swap responses between repetitions of each stimulus.
  Matrix y = x;
  for (Eigen::Index s = 0; s < 60; ++s) y.row(3 * s).swap(y.row(3 * s + 1));
  const auto nc2 = noise_ceiling(responses_for(y), t, rows);
  for (std::size_t j = 0; j < nc.size(); ++j) CHECK(nc2[j] == doctest::Approx(nc[j]).epsilon(1e-12));

  CHECK_THROWS_AS(noise_ceiling(responses_for(x), grid_trials(60, 3), std::vector<std::size_t>{0, 3, 6}), Error);
}

TEST_CASE("noise ceiling: pure-noise Monte-Carlo rate matches the frozen oracle rate") {
  // Oracle measurement (independent implementation, 1000 draws of 500 x 3):
  // about 91% of pure-noise voxels fall at or below NC 10.
  const TrialTable t = grid_trials(500, 3);
  const auto rows = all_rows(t);
  std::mt19937_64 rng(2024);
  int below = 0;
  const int sims = 1000;
  Matrix x(1500, 1);
  for (int k = 0; k < sims; ++k) {
    x = testutil::gaussian(1500, 1, rng);
    if (noise_ceiling(responses_for(x), t, rows)[0] <= 10.0) ++below;
  }
  const double rate = static_cast<double>(below) / sims;
  MESSAGE("pure-noise NC<=10 rate: " << rate);
  CHECK(rate == doctest::Approx(0.91).epsilon(0.04));
}

TEST_CASE("select_voxels strictness, order and monotonicity") {
  CHECK(select_voxels({4.9, 5.0, 5.1}, 5.0) == std::vector<std::size_t>{2});
  CHECK(select_voxels({1.0, 2.0, 3.0}, 0.0) == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(select_voxels({1.0, 2.0}, 50.0), Error);
  try {
    select_voxels({1.0}, 10.0);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptySelection);
  }
  CHECK_THROWS_AS(select_voxels({1.0}, 120.0), Error);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  std::vector<double> nc(200);
  for (auto& v : nc) v = u(rng);
  for (double lo = 0.0; lo < 90.0; lo += 7.5) {
    const auto a = select_voxels(nc, lo);
    const auto b = select_voxels(nc, lo + 5.0);
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
    CHECK(std::includes(a.begin(), a.end(), b.begin(), b.end()));
  }
}

TEST_CASE("z-score uses only the fitting rows") {
  Matrix x(4, 2);
  x << 1, 10, 3, 10, 100, -5, 7, 0;
  const ZScore z = ZScore::fit(x, {0, 1});
  CHECK(z.mean[0] == 2.0);
  CHECK(z.scale[0] == 1.0);
  CHECK(z.scale[1] == 1.0);  // constant column keeps unit scale
  const Matrix y = z.apply(x);
  CHECK(y(2, 0) == 98.0);
  CHECK(y(0, 1) == 0.0);
}

TEST_CASE("stimulus averaging and embedding gathering") {
  const TrialTable t = grid_trials(3, 2);
  Matrix x(6, 1);
  x << 1, 3, 10, 20, 5, 5;
  const auto avg = average_by_stimulus(x, t, {2, 3, 0, 1});
  CHECK(avg.stimulus_ids == std::vector<std::string>{"s1", "s0"});
  CHECK(avg.values(0, 0) == 15.0);
  CHECK(avg.values(1, 0) == 2.0);

  EmbeddingMatrix e;
  e.values = Matrix::Identity(3, 3);
  e.stimulus_ids = {"s0", "s1", "s2"};
  const Matrix g = gather_embeddings(e, {"s2", "s0"});
  CHECK(g(0, 2) == 1.0);
  CHECK(g(1, 0) == 1.0);
  CHECK_THROWS_AS(gather_embeddings(e, {"zz"}), Error);
  const Matrix te = trial_embeddings(e, t, {5, 0});
  CHECK(te(0, 2) == 1.0);
  CHECK(te(1, 0) == 1.0);
}
