#include "sdc/pipeline.hpp"

#include "csv.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <set>
#include <thread>

namespace sdc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::Config, where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      fail(ErrorKind::Config, where + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, where + "." + key + ": " + e.what());
  }
}

const json& section(const json& j, const char* key) {
  static const json empty = json::object();
  return j.contains(key) ? j.at(key) : empty;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  auto out = csv::open_out(path);
  out << j.dump(1) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

// Config ------------------------------------------------------------------------

PipelineConfig PipelineConfig::from_json(const json& j) {
  check_keys(j,
             {"out", "dataset", "seed", "threads", "strict", "synth", "split", "noise_ceiling", "decoder", "ridge", "eval",
              "things", "sdc", "lasso", "consistency", "report"},
             "config");
  PipelineConfig c;
  std::string out = c.out.string();
  std::string dataset;
  read_field(j, "out", out, "config");
  read_field(j, "dataset", dataset, "config");
  c.out = out;
  c.dataset = dataset;
  read_field(j, "seed", c.seed, "config");
  read_field(j, "threads", c.threads, "config");
  read_field(j, "strict", c.strict, "config");

  c.synth.seed = derive_seed(c.seed, "synth");
  c.split_seed = derive_seed(c.seed, "split");
  c.decoder.seed = derive_seed(c.seed, "decoder");
  c.sdc.seed = derive_seed(c.seed, "sdc");
  c.tsne.seed = derive_seed(c.seed, "tsne");

  {
    const json& s = section(j, "synth");
    const std::string w = "synth";
    check_keys(s,
               {"participants", "stimuli", "reps", "embed_dim", "true_concepts", "support_size", "extra_voxels",
                "noise_sigma", "target_nc", "consistency", "nonlinearity", "tanh_gain", "shared_stimuli",
                "incomplete_stimuli", "noise_rois", "seed", "things_classes", "things_dims"},
               w);
    read_field(s, "participants", c.synth.participants, w);
    read_field(s, "stimuli", c.synth.stimuli, w);
    read_field(s, "reps", c.synth.reps, w);
    read_field(s, "embed_dim", c.synth.embed_dim, w);
    read_field(s, "true_concepts", c.synth.true_concepts, w);
    read_field(s, "support_size", c.synth.support_size, w);
    read_field(s, "extra_voxels", c.synth.extra_voxels, w);
    read_field(s, "noise_sigma", c.synth.noise_sigma, w);
    read_field(s, "target_nc", c.synth_target_nc, w);
    read_field(s, "tanh_gain", c.synth.tanh_gain, w);
    read_field(s, "shared_stimuli", c.synth.shared_stimuli, w);
    read_field(s, "incomplete_stimuli", c.synth.incomplete_stimuli, w);
    read_field(s, "noise_rois", c.synth.noise_rois, w);
    read_field(s, "seed", c.synth.seed, w);
    read_field(s, "things_classes", c.things_classes, w);
    read_field(s, "things_dims", c.things_dims, w);
    std::string mode = "consistent", nonlin = "tanh";
    read_field(s, "consistency", mode, w);
    read_field(s, "nonlinearity", nonlin, w);
    if (mode == "consistent") c.synth.consistency = ConsistencyMode::Consistent;
    else if (mode == "shuffled") c.synth.consistency = ConsistencyMode::Shuffled;
    else fail(ErrorKind::Config, "synth.consistency must be 'consistent' or 'shuffled'");
    if (nonlin == "tanh") c.synth.nonlinearity = VoxelNonlinearity::Tanh;
    else if (nonlin == "none") c.synth.nonlinearity = VoxelNonlinearity::None;
    else fail(ErrorKind::Config, "synth.nonlinearity must be 'tanh' or 'none'");
  }
  {
    const json& s = section(j, "split");
    check_keys(s, {"val_size", "test_size", "seed"}, "split");
    read_field(s, "val_size", c.val_size, "split");
    read_field(s, "test_size", c.test_size, "split");
    read_field(s, "seed", c.split_seed, "split");
  }
  {
    const json& s = section(j, "noise_ceiling");
    check_keys(s, {"threshold"}, "noise_ceiling");
    read_field(s, "threshold", c.nc_threshold, "noise_ceiling");
  }
  {
    const json& s = section(j, "decoder");
    const std::string w = "decoder";
    check_keys(s,
               {"hidden", "epochs", "batch_size", "lr_init", "lr_drop_epochs", "lr_drop_factor", "tau", "seed",
                "adam_beta1", "adam_beta2", "adam_eps", "normalize_embeddings"},
               w);
    read_field(s, "hidden", c.hidden, w);
    read_field(s, "epochs", c.decoder.epochs, w);
    read_field(s, "batch_size", c.decoder.batch_size, w);
    read_field(s, "lr_init", c.decoder.lr_init, w);
    read_field(s, "lr_drop_epochs", c.decoder.lr_drop_epochs, w);
    read_field(s, "lr_drop_factor", c.decoder.lr_drop_factor, w);
    read_field(s, "tau", c.decoder.tau, w);
    read_field(s, "seed", c.decoder.seed, w);
    read_field(s, "adam_beta1", c.decoder.adam_beta1, w);
    read_field(s, "adam_beta2", c.decoder.adam_beta2, w);
    read_field(s, "adam_eps", c.decoder.adam_eps, w);
    read_field(s, "normalize_embeddings", c.decoder.normalize_embeddings, w);
  }
  {
    const json& s = section(j, "ridge");
    check_keys(s, {"grid"}, "ridge");
    read_field(s, "grid", c.ridge_grid, "ridge");
  }
  {
    const json& s = section(j, "eval");
    check_keys(s, {"k"}, "eval");
    read_field(s, "k", c.eval_k, "eval");
  }
  {
    const json& s = section(j, "things");
    check_keys(s, {"alpha", "finetune_steps", "finetune_lr"}, "things");
    read_field(s, "alpha", c.things_alpha, "things");
    read_field(s, "finetune_steps", c.things_finetune_steps, "things");
    read_field(s, "finetune_lr", c.things_finetune_lr, "things");
  }
  {
    const json& s = section(j, "sdc");
    const std::string w = "sdc";
    check_keys(s, {"concepts", "iters", "batch", "lr", "slope", "tau", "symmetric", "probe_every", "seed"}, w);
    read_field(s, "concepts", c.sdc.concepts, w);
    read_field(s, "iters", c.sdc.iters, w);
    read_field(s, "batch", c.sdc.batch, w);
    read_field(s, "lr", c.sdc.lr, w);
    read_field(s, "slope", c.sdc.slope, w);
    read_field(s, "tau", c.sdc.tau, w);
    read_field(s, "symmetric", c.sdc.symmetric, w);
    read_field(s, "probe_every", c.sdc.probe_every, w);
    read_field(s, "seed", c.sdc.seed, w);
  }
  {
    const json& s = section(j, "lasso");
    check_keys(s, {"alpha", "tol", "max_sweeps"}, "lasso");
    read_field(s, "alpha", c.lasso_alpha, "lasso");
    read_field(s, "tol", c.lasso_tol, "lasso");
    read_field(s, "max_sweeps", c.lasso_max_sweeps, "lasso");
  }
  {
    const json& s = section(j, "consistency");
    check_keys(s, {"top_m", "localizer_groups"}, "consistency");
    read_field(s, "top_m", c.top_m, "consistency");
    read_field(s, "localizer_groups", c.localizer_groups, "consistency");
  }
  {
    const json& s = section(j, "report");
    const std::string w = "report";
    check_keys(s, {"top_k", "tsne_images", "tsne_concepts", "perplexity", "iterations", "seed"}, w);
    read_field(s, "top_k", c.top_k_images, w);
    read_field(s, "tsne_images", c.tsne_images, w);
    read_field(s, "tsne_concepts", c.tsne_concepts, w);
    read_field(s, "perplexity", c.tsne.perplexity, w);
    read_field(s, "iterations", c.tsne.iterations, w);
    read_field(s, "seed", c.tsne.seed, w);
  }
  c.sdc.adam = c.decoder;
  return c;
}

json PipelineConfig::to_json() const {
  json j;
  if (!dataset.empty()) j["dataset"] = dataset.generic_string();
  j["seed"] = seed;
  j["strict"] = strict;
  j["synth"] = {{"participants", synth.participants},
                {"stimuli", synth.stimuli},
                {"reps", synth.reps},
                {"embed_dim", synth.embed_dim},
                {"true_concepts", synth.true_concepts},
                {"support_size", synth.support_size},
                {"extra_voxels", synth.extra_voxels},
                {"noise_sigma", synth.noise_sigma},
                {"target_nc", synth_target_nc},
                {"consistency", synth.consistency == ConsistencyMode::Consistent ? "consistent" : "shuffled"},
                {"nonlinearity", synth.nonlinearity == VoxelNonlinearity::Tanh ? "tanh" : "none"},
                {"tanh_gain", synth.tanh_gain},
                {"shared_stimuli", synth.shared_stimuli},
                {"incomplete_stimuli", synth.incomplete_stimuli},
                {"noise_rois", synth.noise_rois},
                {"seed", synth.seed},
                {"things_classes", things_classes},
                {"things_dims", things_dims}};
  j["split"] = {{"val_size", val_size}, {"test_size", test_size}, {"seed", split_seed}};
  j["noise_ceiling"] = {{"threshold", nc_threshold}};
  j["decoder"] = {{"hidden", hidden},
                  {"epochs", decoder.epochs},
                  {"batch_size", decoder.batch_size},
                  {"lr_init", decoder.lr_init},
                  {"lr_drop_epochs", decoder.lr_drop_epochs},
                  {"lr_drop_factor", decoder.lr_drop_factor},
                  {"tau", decoder.tau},
                  {"seed", decoder.seed},
                  {"adam_beta1", decoder.adam_beta1},
                  {"adam_beta2", decoder.adam_beta2},
                  {"adam_eps", decoder.adam_eps},
                  {"normalize_embeddings", decoder.normalize_embeddings}};
  j["ridge"] = {{"grid", ridge_grid}};
  j["eval"] = {{"k", eval_k}};
  j["things"] = {{"alpha", things_alpha}, {"finetune_steps", things_finetune_steps}, {"finetune_lr", things_finetune_lr}};
  j["sdc"] = {{"concepts", sdc.concepts}, {"iters", sdc.iters}, {"batch", sdc.batch},
              {"lr", sdc.lr},             {"slope", sdc.slope}, {"tau", sdc.tau},
              {"symmetric", sdc.symmetric}, {"probe_every", sdc.probe_every}, {"seed", sdc.seed}};
  j["lasso"] = {{"alpha", lasso_alpha}, {"tol", lasso_tol}, {"max_sweeps", lasso_max_sweeps}};
  j["consistency"] = {{"top_m", top_m}, {"localizer_groups", localizer_groups}};
  j["report"] = {{"top_k", top_k_images},         {"tsne_images", tsne_images},
                 {"tsne_concepts", tsne_concepts}, {"perplexity", tsne.perplexity},
                 {"iterations", tsne.iterations},  {"seed", tsne.seed}};
  return j;
}

void PipelineConfig::validate() const {
  synth.validate();
  decoder.validate();
  sdc.validate();
  if (hidden < 1) fail(ErrorKind::Config, "decoder.hidden must be >= 1");
  if (!(nc_threshold >= 0.0 && nc_threshold <= 100.0)) fail(ErrorKind::Config, "noise_ceiling.threshold outside [0, 100]");
  if (ridge_grid.empty()) fail(ErrorKind::Config, "ridge.grid is empty");
  for (double l : ridge_grid) {
    if (!(l >= 0.0)) fail(ErrorKind::Config, "ridge.grid entries must be >= 0");
  }
  if (!(lasso_alpha > 0.0)) fail(ErrorKind::Config, "lasso.alpha must be positive");
  if (!(things_alpha > 0.0)) fail(ErrorKind::Config, "things.alpha must be positive");
  if (eval_k.empty()) fail(ErrorKind::Config, "eval.k is empty");
}

fs::path PipelineConfig::dataset_path() const { return dataset.empty() ? out / "data" / "dataset.json" : dataset; }

int PipelineConfig::worker_threads() const {
  if (strict) return 1;
  if (threads > 0) return threads;
  if (const char* env = std::getenv("SDC_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

PipelineConfig load_config(const fs::path& path) { return PipelineConfig::from_json(read_json(path)); }

// Dataset description ----------------------------------------------------------

DatasetPaths read_dataset(const fs::path& path) {
  const json j = read_json(path);
  const fs::path base = path.parent_path();
  DatasetPaths d;
  try {
    for (const auto& p : j.at("participants")) {
      DatasetParticipant dp;
      dp.id = p.at("id").get<std::string>();
      dp.responses = resolve(base, p.at("responses").get<std::string>());
      dp.atlas = resolve(base, p.value("atlas", std::string()));
      dp.localizer = resolve(base, p.value("localizer", std::string()));
      d.participants.push_back(std::move(dp));
    }
    d.embeddings = resolve(base, j.at("embeddings").get<std::string>());
    d.trials = resolve(base, j.at("trials").get<std::string>());
    if (j.contains("things")) {
      d.things_u_avg = resolve(base, j["things"].at("u_avg").get<std::string>());
      d.things_targets = resolve(base, j["things"].at("targets").get<std::string>());
    }
    d.truth = resolve(base, j.value("truth", std::string()));
    d.roi_count = j.value("roi_count", 360);
    d.localizer_regions = j.value("localizer_regions", std::vector<std::string>{});
    d.localizer_region_count = j.value("localizer_region_count", static_cast<int>(d.localizer_regions.size()));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  if (d.participants.empty()) fail(ErrorKind::Data, path.string() + ": no participants");
  return d;
}

void write_dataset(const fs::path& path, const DatasetPaths& d) {
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) { return p.empty() ? std::string() : fs::relative(p, base).generic_string(); };
  json j;
  j["participants"] = json::array();
  for (const auto& p : d.participants) {
    json e = {{"id", p.id}, {"responses", rel(p.responses)}};
    if (!p.atlas.empty()) e["atlas"] = rel(p.atlas);
    if (!p.localizer.empty()) e["localizer"] = rel(p.localizer);
    j["participants"].push_back(std::move(e));
  }
  j["embeddings"] = rel(d.embeddings);
  j["trials"] = rel(d.trials);
  if (!d.things_u_avg.empty()) j["things"] = {{"u_avg", rel(d.things_u_avg)}, {"targets", rel(d.things_targets)}};
  if (!d.truth.empty()) j["truth"] = rel(d.truth);
  j["roi_count"] = d.roi_count;
  if (!d.localizer_regions.empty()) j["localizer_regions"] = d.localizer_regions;
  if (d.localizer_region_count > 0) j["localizer_region_count"] = d.localizer_region_count;
  write_json(path, j);
}

void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<int> match_concepts(const Matrix& learned, const Matrix& planted) {
  require_shape(learned.cols() == planted.cols(), "match_concepts: widths differ");
  const Eigen::Index a = learned.rows();
  const Eigen::Index b = planted.rows();
  Matrix sim(a, b);
  for (Eigen::Index i = 0; i < a; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      const double den = learned.row(i).norm() * planted.row(j).norm();
      sim(i, j) = den > 0.0 ? learned.row(i).dot(planted.row(j)) / den : 0.0;
    }
  }
  std::vector<int> match(static_cast<std::size_t>(a), -1);
  if (a == b && a <= 9) {
    std::vector<int> perm(static_cast<std::size_t>(a));
    std::iota(perm.begin(), perm.end(), 0);
    double best = -std::numeric_limits<double>::infinity();
    do {
      double total = 0.0;
      for (Eigen::Index i = 0; i < a; ++i) total += sim(i, perm[static_cast<std::size_t>(i)]);
      if (total > best) {
        best = total;
        match = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return match;
  }
  std::vector<bool> used_a(static_cast<std::size_t>(a)), used_b(static_cast<std::size_t>(b));
  for (Eigen::Index round = 0; round < std::min(a, b); ++round) {
    double best = -std::numeric_limits<double>::infinity();
    Eigen::Index bi = -1, bj = -1;
    for (Eigen::Index i = 0; i < a; ++i) {
      if (used_a[static_cast<std::size_t>(i)]) continue;
      for (Eigen::Index j = 0; j < b; ++j) {
        if (!used_b[static_cast<std::size_t>(j)] && sim(i, j) > best) {
          best = sim(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    used_a[static_cast<std::size_t>(bi)] = true;
    used_b[static_cast<std::size_t>(bj)] = true;
    match[static_cast<std::size_t>(bi)] = static_cast<int>(bj);
  }
  return match;
}

// Stage helpers -----------------------------------------------------------------

namespace {

void write_split_json(const fs::path& path, const std::string& pid, const DatasetSplit& s) {
  write_json(path, {{"participant_id", pid},
                    {"seed", s.seed},
                    {"train_rows", s.train_rows},
                    {"val_rows", s.val_rows},
                    {"test_rows", s.test_rows}});
}

DatasetSplit read_split_json(const fs::path& path) {
  const json j = read_json(path);
  DatasetSplit s;
  try {
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train_rows = j.at("train_rows").get<std::vector<std::size_t>>();
    s.val_rows = j.at("val_rows").get<std::vector<std::size_t>>();
    s.test_rows = j.at("test_rows").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  return s;
}

struct VoxelSelection {
  std::vector<std::int64_t> ids;       // all voxel ids, file order
  std::vector<double> nc;
  std::vector<std::size_t> selected;   // column positions
};

void write_voxels_csv(const fs::path& path, const std::vector<std::int64_t>& ids, const std::vector<double>& nc,
                      const std::vector<std::size_t>& selected) {
  std::vector<bool> keep(ids.size());
  for (auto s : selected) keep[s] = true;
  auto out = csv::open_out(path);
  out << "voxel_index,nc,selected\n";
  for (std::size_t j = 0; j < ids.size(); ++j) {
    out << ids[j] << ',' << csv::format_double(nc[j]) << ',' << (keep[j] ? 1 : 0) << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

VoxelSelection read_voxels_csv(const fs::path& path) {
  const auto t = csv::read(path, {"voxel_index", "nc", "selected"});
  VoxelSelection v;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string where = path.string() + ":" + std::to_string(t.line_numbers[r]);
    v.ids.push_back(csv::parse_int<std::int64_t>(t.rows[r][0], where));
    v.nc.push_back(csv::parse_double(t.rows[r][1], where));
    if (csv::parse_int<int>(t.rows[r][2], where) != 0) v.selected.push_back(r);
  }
  return v;
}

std::vector<std::int64_t> selected_ids(const VoxelSelection& v) {
  std::vector<std::int64_t> out;
  for (auto s : v.selected) out.push_back(v.ids[s]);
  return out;
}

EmbeddingMatrix as_embedding(Matrix values, std::vector<std::string> ids, SpaceTag tag) {
  EmbeddingMatrix e;
  e.values = std::move(values);
  e.stimulus_ids = std::move(ids);
  e.space = tag;
  return e;
}

struct EvalPair {
  Matrix truth;
  Matrix pred;
};

}  // namespace

// Pipeline ----------------------------------------------------------------------

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  manifest_ = read_manifest(cfg_.out / "summary.json");
  manifest_.config_hash = config_hash(cfg_.to_json());
  manifest_.seeds = {{"global", cfg_.seed},   {"synth", cfg_.synth.seed}, {"split", cfg_.split_seed},
                     {"decoder", cfg_.decoder.seed}, {"sdc", cfg_.sdc.seed},     {"tsne", cfg_.tsne.seed}};
  manifest_.versions = library_versions();
}

fs::path Pipeline::path(const std::string& rel) const { return cfg_.out / rel; }

void Pipeline::record(const fs::path& file) { manifest_.record(cfg_.out, file); }

DatasetPaths Pipeline::dataset() const { return read_dataset(cfg_.dataset_path()); }

void Pipeline::save_manifest() { write_manifest(path("summary.json"), manifest_); }

void Pipeline::synth() {
  SynthSpec spec = cfg_.synth;
  if (cfg_.synth_target_nc > 0.0) spec.noise_sigma = calibrate_noise_sigma(spec, cfg_.synth_target_nc);
  const SynthData data = generate(spec);
  const fs::path dir = cfg_.dataset_path().parent_path();
  fs::create_directories(dir);

  DatasetPaths d;
  d.roi_count = spec.roi_count();
  std::vector<fs::path> atlas_paths;
  for (std::size_t s = 0; s < data.responses.size(); ++s) {
    const auto& pid = data.truth.participant_ids[s];
    DatasetParticipant p{pid, dir / (pid + "_responses.sdcm"), dir / (pid + "_atlas.csv"), {}};
    save_responses(p.responses, data.responses[s]);
    write_atlas(p.atlas, data.truth.atlases[s]);
    atlas_paths.push_back(p.atlas.filename());
    d.participants.push_back(std::move(p));
  }
  d.embeddings = dir / "embeddings.sdcm";
  EmbeddingMatrix emb = data.embeddings;
  emb.space = SpaceTag::Clip;
  save_embeddings(d.embeddings, emb);
  d.trials = dir / "trials.csv";
  write_trials(d.trials, data.trials);

  const ThingsLike things = generate_things_like(cfg_.things_classes, spec.embed_dim, cfg_.things_dims, spec.seed);
  d.things_u_avg = dir / "things_u_avg.sdcm";
  d.things_targets = dir / "things_targets.sdcm";
  save_embeddings(d.things_u_avg, things.u_avg);
  save_embeddings(d.things_targets, things.targets);

  write_matrix_file(dir / "true_projection.sdcm", data.truth.true_projection);
  d.truth = dir / "truth.json";
  write_truth_json(d.truth, spec, data.truth, "true_projection.sdcm", atlas_paths);
  write_dataset(cfg_.dataset_path(), d);

  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) record(entry.path());
  }
  manifest_.notes["synth_noise_sigma"] = spec.noise_sigma;
  manifest_.add_stage("synth");
}

void Pipeline::split() {
  const DatasetPaths d = dataset();
  const TrialTable trials = read_trials(d.trials);
  for (const auto& p : d.participants) {
    const DatasetSplit s = make_split(trials.for_participant(p.id), cfg_.val_size, cfg_.test_size, cfg_.split_seed);
    const fs::path file = path("splits/" + p.id + ".json");
    write_split_json(file, p.id, s);
    record(file);
  }
  manifest_.add_stage("split");
}

void Pipeline::noise_ceiling() {
  const DatasetPaths d = dataset();
  const TrialTable trials = read_trials(d.trials);
  const std::size_t n = d.participants.size();
  std::vector<std::size_t> kept(n);
  parallel_for(n, cfg_.worker_threads(), [&](std::size_t i) {
    const auto& p = d.participants[i];
    const ResponseMatrix resp = load_responses(p.responses);
    const DatasetSplit s = read_split_json(path("splits/" + p.id + ".json"));
    const auto nc = sdc::noise_ceiling(resp, trials.for_participant(p.id), s.train_rows);
    const auto selected = select_voxels(nc, cfg_.nc_threshold);
    write_voxels_csv(path("voxels/" + p.id + ".csv"), resp.voxel_ids, nc, selected);
    kept[i] = selected.size();
  });
  for (std::size_t i = 0; i < n; ++i) {
    record(path("voxels/" + d.participants[i].id + ".csv"));
    manifest_.notes["selected_voxels"][d.participants[i].id] = kept[i];
  }
  manifest_.add_stage("noise-ceiling");
}

void Pipeline::train_decoder() {
  const DatasetPaths d = dataset();
  const TrialTable trials = read_trials(d.trials);
  const EmbeddingMatrix emb = load_embeddings(d.embeddings);
  const std::size_t n = d.participants.size();
  std::vector<TrainRecord> records(n);
  std::vector<RidgeSelection> selections(n);

  parallel_for(n, cfg_.worker_threads(), [&](std::size_t i) {
    const auto& p = d.participants[i];
    const TrialTable tp = trials.for_participant(p.id);
    const DatasetSplit s = read_split_json(path("splits/" + p.id + ".json"));
    const VoxelSelection vox = read_voxels_csv(path("voxels/" + p.id + ".csv"));
    const ResponseMatrix resp = select_columns(load_responses(p.responses), vox.selected);

    const ZScore z = ZScore::fit(resp.values, s.train_rows);
    const Matrix xz = z.apply(resp.values);
    const Matrix x_train = take_rows(xz, s.train_rows);
    const Matrix y_train = trial_embeddings(emb, tp, s.train_rows);
    const StimulusAverages val = average_by_stimulus(xz, tp, s.val_rows);
    const StimulusAverages test = average_by_stimulus(xz, tp, s.test_rows);

    const fs::path fdir = path("features/" + p.id);
    Matrix zstats(2, z.mean.size());
    zstats.row(0) = z.mean;
    zstats.row(1) = z.scale;
    write_matrix_file(fdir / "zscore.sdcm", zstats);
    save_embeddings(fdir / "val.sdcm", as_embedding(val.values, val.stimulus_ids, SpaceTag::Other));
    save_embeddings(fdir / "test.sdcm", as_embedding(test.values, test.stimulus_ids, SpaceTag::Other));

    TrainConfig tc = cfg_.decoder;
    tc.seed = derive_seed(cfg_.decoder.seed, "participant", i);
    const TrainedDecoder mlp = train_mlp(x_train, y_train, tc, cfg_.hidden);
    const fs::path ddir = path("decoders/" + p.id);
    save_decoder(ddir / "mlp", mlp, tc);
    records[i] = mlp.record;

    const Matrix y_val = gather_embeddings(emb, val.stimulus_ids);
    const RidgeFit ridge = train_ridge(x_train, y_train, cfg_.ridge_grid, val.values, y_val);
    write_matrix_file(ddir / "ridge" / "W.sdcm", ridge.model.w);
    write_matrix_file(ddir / "ridge" / "b.sdcm", ridge.model.b);
    write_json(ddir / "ridge" / "ridge.json", {{"lambda", ridge.model.lambda},
                                               {"grid", ridge.selection.grid},
                                               {"val_top1", ridge.selection.val_top1}});
    selections[i] = ridge.selection;

    // Decode from the stored artifacts so later stages see the same values.
    const DecoderMLP model = load_decoder(ddir / "mlp");
    RidgeModel rm;
    rm.w = read_matrix_file(ddir / "ridge" / "W.sdcm").values;
    rm.b = read_matrix_file(ddir / "ridge" / "b.sdcm").values;
    const EmbeddingMatrix fv = load_embeddings(fdir / "val.sdcm");
    const EmbeddingMatrix ft = load_embeddings(fdir / "test.sdcm");
    const fs::path odir = path("decoded/" + p.id);
    save_embeddings(odir / "val_mlp.sdcm", as_embedding(decode(model, fv.values), fv.stimulus_ids, SpaceTag::Clip));
    save_embeddings(odir / "test_mlp.sdcm", as_embedding(decode(model, ft.values), ft.stimulus_ids, SpaceTag::Clip));
    save_embeddings(odir / "val_ridge.sdcm", as_embedding(predict(rm, fv.values), fv.stimulus_ids, SpaceTag::Clip));
    save_embeddings(odir / "test_ridge.sdcm", as_embedding(predict(rm, ft.values), ft.stimulus_ids, SpaceTag::Clip));
  });

  for (std::size_t i = 0; i < n; ++i) {
    const auto& id = d.participants[i].id;
    for (const char* f : {"zscore.sdcm", "val.sdcm", "val.sdcm.meta.json", "test.sdcm", "test.sdcm.meta.json"}) {
      record(path("features/" + id + "/" + f));
    }
    for (const char* f : {"mlp/W1.sdcm", "mlp/b1.sdcm", "mlp/W2.sdcm", "mlp/b2.sdcm", "mlp/model.json",
                          "ridge/W.sdcm", "ridge/b.sdcm", "ridge/ridge.json"}) {
      record(path("decoders/" + id + "/" + f));
    }
    for (const char* f : {"val_mlp", "test_mlp", "val_ridge", "test_ridge"}) {
      record(path("decoded/" + id + "/" + f + ".sdcm"));
      record(path("decoded/" + id + "/" + f + ".sdcm.meta.json"));
    }
    manifest_.notes["decoder_final_loss"][id] = records[i].final_loss;
    manifest_.notes["ridge_lambda"][id] = selections[i].best_lambda;
  }
  manifest_.add_stage("train-decoder");
}

void Pipeline::eval_topk(const std::vector<std::size_t>& ks) {
  const DatasetPaths d = dataset();
  const EmbeddingMatrix emb = load_embeddings(d.embeddings);
  const fs::path file = path("eval/topk.csv");
  std::ostringstream body;
  body << "participant_id,model,k,n,accuracy,chance\n";
  for (const auto& p : d.participants) {
    for (const char* model : {"mlp", "ridge"}) {
      const EmbeddingMatrix pred = load_embeddings(path("decoded/" + p.id + "/test_" + model + ".sdcm"));
      const Matrix truth = gather_embeddings(emb, pred.stimulus_ids);
      const auto n = static_cast<std::size_t>(pred.rows());
      for (std::size_t k : ks) {
        const double acc = topk_accuracy(truth, pred.values, k);
        body << p.id << ',' << model << ',' << k << ',' << n << ',' << csv::format_double(acc) << ','
             << csv::format_double(chance_topk(k, n)) << '\n';
      }
    }
  }
  auto out = csv::open_out(file);
  out << body.str();
  out.close();
  record(file);
  manifest_.add_stage("eval-topk");
}

void Pipeline::fit_things() {
  const DatasetPaths d = dataset();
  if (d.things_u_avg.empty()) {
    manifest_.notes["fit_things"] = "skipped: dataset has no behavioural targets";
    manifest_.add_stage("fit-things");
    return;
  }
  const EmbeddingMatrix u = load_embeddings(d.things_u_avg);
  const EmbeddingMatrix t = load_embeddings(d.things_targets);
  if (u.stimulus_ids != t.stimulus_ids) fail(ErrorKind::Data, "things: U and T rows are not aligned by id");
  const ProjectionHead ridge = fit_things_map(u.values, t.values, cfg_.things_alpha);
  const FinetuneResult tuned = finetune_relu_head(ridge, u.values, t.values, cfg_.things_finetune_steps,
                                                  cfg_.things_finetune_lr);
  save_head(path("heads/things"), tuned.head);
  record(path("heads/things/W.sdcm"));
  record(path("heads/things/head.json"));
  manifest_.add_stage("fit-things");
}

void Pipeline::fit_sdc() {
  const DatasetPaths d = dataset();
  const EmbeddingMatrix emb = load_embeddings(d.embeddings);
  PooledValSet pooled;
  std::vector<Matrix> clips, brains;
  Eigen::Index rows = 0;
  for (const auto& p : d.participants) {
    const EmbeddingMatrix dec = load_embeddings(path("decoded/" + p.id + "/val_mlp.sdcm"));
    clips.push_back(gather_embeddings(emb, dec.stimulus_ids));
    brains.push_back(dec.values);
    for (Eigen::Index r = 0; r < dec.rows(); ++r) pooled.participant_of_row.push_back(p.id);
    rows += dec.rows();
  }
  pooled.y_clip.resize(rows, emb.cols());
  pooled.y_brain.resize(rows, emb.cols());
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    pooled.y_clip.middleRows(at, clips[i].rows()) = clips[i];
    pooled.y_brain.middleRows(at, brains[i].rows()) = brains[i];
    at += clips[i].rows();
  }

  const SdcFit fit = sdc::fit_sdc(pooled, cfg_.sdc);
  save_head(path("heads/sdc"), fit.head);
  record(path("heads/sdc/W.sdcm"));
  record(path("heads/sdc/head.json"));
  {
    auto out = csv::open_out(path("eval/sdc_probe.csv"));
    out << "iteration,loss\n";
    for (std::size_t i = 0; i < fit.probe_iters.size(); ++i) {
      out << fit.probe_iters[i] << ',' << csv::format_double(fit.probe_losses[i]) << '\n';
    }
  }
  record(path("eval/sdc_probe.csv"));

  // Paired raw vs concept-space retrieval on test rows whose transforms are nonzero in both matrices.
  const ProjectionHead head = load_head(path("heads/sdc"));
  std::ostringstream body;
  body << "participant_id,k,rows,excluded,raw,sdc\n";
  for (const auto& p : d.participants) {
    const EmbeddingMatrix dec = load_embeddings(path("decoded/" + p.id + "/test_mlp.sdcm"));
    const Matrix truth = gather_embeddings(emb, dec.stimulus_ids);
    const Matrix st = apply_head(head, truth, HeadMode::Inference);
    const Matrix sp = apply_head(head, dec.values, HeadMode::Inference);
    std::vector<std::size_t> keep;
    for (Eigen::Index r = 0; r < truth.rows(); ++r) {
      if (st.row(r).norm() > 0.0 && sp.row(r).norm() > 0.0) keep.push_back(static_cast<std::size_t>(r));
    }
    const Matrix t_keep = take_rows(truth, keep);
    const Matrix p_keep = take_rows(dec.values, keep);
    for (std::size_t k : cfg_.eval_k) {
      if (k > keep.size()) continue;
      body << p.id << ',' << k << ',' << keep.size() << ',' << truth.rows() - static_cast<Eigen::Index>(keep.size())
           << ',' << csv::format_double(topk_accuracy(t_keep, p_keep, k)) << ','
           << csv::format_double(space_topk(head, t_keep, p_keep, k)) << '\n';
    }
  }
  {
    auto out = csv::open_out(path("eval/sdc_topk.csv"));
    out << body.str();
  }
  record(path("eval/sdc_topk.csv"));
  manifest_.add_stage("fit-sdc");
}

void Pipeline::fit_masks() {
  const DatasetPaths d = dataset();
  const EmbeddingMatrix emb = load_embeddings(d.embeddings);
  const ProjectionHead head = load_head(path("heads/sdc"));
  const auto c = static_cast<std::size_t>(head.concepts());
  const std::size_t n = d.participants.size();

  std::vector<Matrix> x_val(n), y_val(n);
  std::vector<std::vector<std::int64_t>> ids(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& p = d.participants[s];
    const EmbeddingMatrix f = load_embeddings(path("features/" + p.id + "/val.sdcm"));
    x_val[s] = f.values;
    y_val[s] = gather_embeddings(emb, f.stimulus_ids);
    ids[s] = selected_ids(read_voxels_csv(path("voxels/" + p.id + ".csv")));
    require_shape(static_cast<std::size_t>(f.cols()) == ids[s].size(), "fit-masks: features and voxel list differ");
  }

  LassoOptions opts;
  opts.tol = cfg_.lasso_tol;
  opts.max_sweeps = cfg_.lasso_max_sweeps;
  std::vector<ConceptMask> masks(n * c);
  parallel_for(n * c, cfg_.worker_threads(), [&](std::size_t k) {
    const std::size_t s = k / c;
    const auto i = static_cast<Eigen::Index>(k % c);
    const Vector y = y_val[s] * head.w.row(i).transpose();
    ConceptMask m = fit_lasso_mask(x_val[s], y, cfg_.lasso_alpha, opts);
    m.participant_id = d.participants[s].id;
    m.concept_index = static_cast<int>(i);
    m.voxel_ids = ids[s];
    masks[k] = std::move(m);
  });

  json summary;
  summary["alpha"] = cfg_.lasso_alpha;
  summary["fits"] = json::array();
  for (const auto& m : masks) {
    if (!m.converged) {
      std::cerr << "warning: mask " << m.participant_id << ":" << m.concept_index << " stopped after " << m.sweeps
                << " sweeps with max change " << m.achieved_tol << '\n';
    }
    summary["fits"].push_back({{"participant_id", m.participant_id},
                               {"concept_index", m.concept_index},
                               {"support_size", m.support().size()},
                               {"sweeps", m.sweeps},
                               {"converged", m.converged},
                               {"achieved_tol", m.achieved_tol}});
  }
  write_masks_csv(path("masks/masks.csv"), masks);
  write_json(path("masks/masks.json"), summary);
  record(path("masks/masks.csv"));
  record(path("masks/masks.json"));
  manifest_.add_stage("fit-masks");
}

namespace {

std::map<std::string, std::map<int, ConceptMask>> masks_by_participant(const std::vector<ConceptMask>& masks) {
  std::map<std::string, std::map<int, ConceptMask>> out;
  for (const auto& m : masks) out[m.participant_id][m.concept_index] = m;
  return out;
}

ConceptMask empty_mask(const std::string& pid, int concept_index, double alpha) {
  ConceptMask m;
  m.participant_id = pid;
  m.concept_index = concept_index;
  m.alpha = alpha;
  return m;
}

}  // namespace

void Pipeline::specificity() {
  const DatasetPaths d = dataset();
  const EmbeddingMatrix emb = load_embeddings(d.embeddings);
  const ProjectionHead head = load_head(path("heads/sdc"));
  const auto grouped = masks_by_participant(read_masks_csv(path("masks/masks.csv"), cfg_.lasso_alpha));
  const std::size_t n = d.participants.size();
  std::vector<SpecificityMatrix> mats(n);

  parallel_for(n, cfg_.worker_threads(), [&](std::size_t s) {
    const auto& p = d.participants[s];
    const auto ids = selected_ids(read_voxels_csv(path("voxels/" + p.id + ".csv")));
    const auto found = grouped.find(p.id);
    std::vector<ConceptMask> masks;
    for (int i = 0; i < head.concepts(); ++i) {
      ConceptMask m = empty_mask(p.id, i, cfg_.lasso_alpha);
      if (found != grouped.end()) {
        const auto it = found->second.find(i);
        if (it != found->second.end()) m = it->second;
      }
      masks.push_back(expand_mask(m, ids));
    }
    const DecoderMLP model = load_decoder(path("decoders/" + p.id + "/mlp"));
    const EmbeddingMatrix f = load_embeddings(path("features/" + p.id + "/test.sdcm"));
    mats[s] = specificity_matrix(model, masks, f.values, gather_embeddings(emb, f.stimulus_ids), head);
    mats[s].participant_id = p.id;
  });
  for (std::size_t s = 0; s < n; ++s) {
    const fs::path file = path("specificity/" + d.participants[s].id + ".csv");
    write_specificity_csv(file, mats[s]);
    record(file);
  }
  write_specificity_csv(path("specificity/averaged.csv"), average_specificity(mats));
  record(path("specificity/averaged.csv"));
  manifest_.add_stage("specificity");
}

void Pipeline::consistency() {
  const DatasetPaths d = dataset();
  const auto masks = read_masks_csv(path("masks/masks.csv"), cfg_.lasso_alpha);
  std::map<std::string, RoiAtlas> atlases;
  std::map<std::string, RoiAtlas> localizers;
  for (const auto& p : d.participants) {
    if (p.atlas.empty()) fail(ErrorKind::Atlas, "participant " + p.id + " has no atlas");
    atlases[p.id] = read_atlas(p.atlas, d.roi_count);
    if (!p.localizer.empty()) localizers[p.id] = read_atlas(p.localizer, d.localizer_region_count);
  }
  std::vector<RoiFractionVector> fractions;
  for (const auto& m : masks) {
    if (m.support().empty()) continue;
    fractions.push_back(roi_fractions(m, atlases.at(m.participant_id)));
  }
  const ConsistencyReport report = green_red(fractions);
  if (!report.missing.empty()) {
    std::cerr << "warning: " << report.missing.size() << " participant/concept masks are empty or missing\n";
  }
  write_consistency_json(path("consistency/report.json"), report);
  write_consistency_csv(path("consistency/green_red.csv"), report);
  write_json(path("consistency/top.json"), {{"top_m", cfg_.top_m}, {"concepts", top_consistent(report, cfg_.top_m)}});
  record(path("consistency/report.json"));
  record(path("consistency/green_red.csv"));
  record(path("consistency/top.json"));

  if (!localizers.empty()) {
    const auto overlap = localizer_overlap(masks, to_zero_based(cfg_.localizer_groups), localizers,
                                           d.localizer_regions);
    write_localizer_csv(path("consistency/localizer.csv"), overlap);
    record(path("consistency/localizer.csv"));
  }
  manifest_.add_stage("consistency");
}

void Pipeline::report() {
  const DatasetPaths d = dataset();
  const EmbeddingMatrix emb = load_embeddings(d.embeddings);
  const ProjectionHead head = load_head(path("heads/sdc"));
  ReportBundle bundle;
  const std::size_t k = std::min<std::size_t>(cfg_.top_k_images, static_cast<std::size_t>(emb.rows()));
  for (int i = 0; i < head.concepts(); ++i) bundle.top_images.push_back(top_images(head, emb, i, k));

  std::vector<int> order;
  if (fs::exists(path("consistency/report.json"))) {
    order = read_json(path("consistency/report.json")).at("ranking").get<std::vector<int>>();
  } else {
    for (int i = 0; i < head.concepts(); ++i) order.push_back(i);
  }
  if (cfg_.tsne_concepts > 0 && cfg_.tsne.iterations > 0) {
    std::set<std::string> used;
    std::vector<std::size_t> rows;
    const auto index = emb.index();
    const std::size_t per = std::min<std::size_t>(cfg_.tsne_images, static_cast<std::size_t>(emb.rows()));
    for (std::size_t c = 0; c < std::min(cfg_.tsne_concepts, order.size()); ++c) {
      for (const auto& r : top_images(head, emb, order[c], per).ranked) {
        if (!used.insert(r.stimulus_id).second) continue;
        rows.push_back(static_cast<std::size_t>(index.at(r.stimulus_id)));
        bundle.tsne_ids.push_back(r.stimulus_id);
        bundle.tsne_concepts.push_back(order[c]);
      }
    }
    bundle.tsne = tsne(take_rows(emb.values, rows), cfg_.tsne);
  }
  manifest_.add_stage("report");
  emit_report(bundle, cfg_.out, manifest_);
}

void Pipeline::verify_truth() {
  const DatasetPaths d = dataset();
  if (d.truth.empty()) {
    manifest_.notes["verify_truth"] = "skipped: dataset has no planted truth";
    return;
  }
  const json truth = read_json(d.truth);
  const Matrix planted = read_matrix_file(d.truth.parent_path() / truth.at("true_projection").get<std::string>()).values;
  const ProjectionHead head = load_head(path("heads/sdc"));
  const auto match = match_concepts(head.w, planted);
  const auto masks = masks_by_participant(read_masks_csv(path("masks/masks.csv"), cfg_.lasso_alpha));

  json out;
  out["match"] = match;
  std::vector<double> cosines;
  for (std::size_t k = 0; k < match.size(); ++k) {
    if (match[k] < 0) continue;
    const auto a = head.w.row(static_cast<Eigen::Index>(k));
    const auto b = planted.row(match[k]);
    cosines.push_back(a.dot(b) / (a.norm() * b.norm()));
  }
  out["match_cosine"] = cosines;

  // Mask recovery against planted supports.
  std::vector<double> jac;
  json per = json::array();
  for (const auto& p : truth.at("participants")) {
    const auto pid = p.at("participant_id").get<std::string>();
    const auto supports = p.at("supports").get<std::vector<std::vector<std::int64_t>>>();
    for (std::size_t k = 0; k < match.size(); ++k) {
      if (match[k] < 0) continue;
      std::vector<std::int64_t> got;
      const auto pm = masks.find(pid);
      if (pm != masks.end()) {
        const auto it = pm->second.find(static_cast<int>(k));
        if (it != pm->second.end()) got = it->second.support_voxels();
      }
      const double j = jaccard(got, supports[static_cast<std::size_t>(match[k])]);
      jac.push_back(j);
      per.push_back({{"participant_id", pid}, {"concept_index", k}, {"planted", match[k]}, {"jaccard", j}});
    }
  }
  out["jaccard"] = per;
  out["mean_jaccard"] = jac.empty() ? 0.0 : std::accumulate(jac.begin(), jac.end(), 0.0) / static_cast<double>(jac.size());

  const SpecificityMatrix avg = read_specificity_csv(path("specificity/averaged.csv"));
  double diag = 0.0, off = 0.0;
  int nd = 0, no = 0;
  for (Eigen::Index i = 0; i < avg.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < avg.values.cols(); ++j) {
      if (!avg.defined(i, j)) continue;
      if (i == j) diag += avg.values(i, j), ++nd;
      else off += avg.values(i, j), ++no;
    }
  }
  out["specificity_diag_mean"] = nd ? diag / nd : 0.0;
  out["specificity_offdiag_mean"] = no ? off / no : 0.0;

  const json cons = read_json(path("consistency/report.json"));
  json gaps = json::array();
  json matched_gaps = json::array();
  for (const auto& c : cons.at("concepts")) {
    gaps.push_back(c.at("score"));
    const auto k = c.at("index").get<std::size_t>();
    if (k < match.size() && match[k] >= 0) matched_gaps.push_back(c.at("score"));
  }
  out["consistency_scores"] = gaps;
  // Gaps of the learned concepts paired with a planted one.
  out["matched_consistency_scores"] = matched_gaps;
  out["consistency_mode"] = truth.value("consistency_mode", "");

  // Retrieval summaries from the evaluation tables.
  auto mean_of = [&](const fs::path& file, const std::vector<std::string>& header, auto pick) {
    const auto t = csv::read(file, header);
    double sum = 0.0;
    int count = 0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      double v = 0.0;
      if (pick(t.rows[r], v)) sum += v, ++count;
    }
    return count ? sum / count : 0.0;
  };
  const std::vector<std::string> topk_header{"participant_id", "model", "k", "n", "accuracy", "chance"};
  if (fs::exists(path("eval/topk.csv"))) {
    for (const char* model : {"mlp", "ridge"}) {
      out[std::string(model) + "_top1"] = mean_of(path("eval/topk.csv"), topk_header, [&](const auto& row, double& v) {
        if (row[1] != model || row[2] != "1") return false;
        v = csv::parse_double(row[4], "topk");
        return true;
      });
    }
    out["chance_top1"] = mean_of(path("eval/topk.csv"), topk_header, [&](const auto& row, double& v) {
      if (row[1] != "mlp" || row[2] != "1") return false;
      v = csv::parse_double(row[5], "topk");
      return true;
    });
  }
  const std::vector<std::string> sdc_header{"participant_id", "k", "rows", "excluded", "raw", "sdc"};
  for (const char* col : {"raw", "sdc"}) {
    const std::size_t idx = std::string(col) == "raw" ? 4 : 5;
    out[std::string(col) + "_space_top1"] = mean_of(path("eval/sdc_topk.csv"), sdc_header, [&](const auto& row, double& v) {
      if (row[1] != "1") return false;
      v = csv::parse_double(row[idx], "sdc_topk");
      return true;
    });
  }
  write_json(path("eval/truth_checks.json"), out);
  record(path("eval/truth_checks.json"));
  manifest_.add_stage("verify-truth");
}

void Pipeline::run_all() {
  if (!fs::exists(cfg_.dataset_path())) {
    synth();
    save_manifest();
  }
  split();
  noise_ceiling();
  train_decoder();
  eval_topk(cfg_.eval_k);
  fit_things();
  fit_sdc();
  fit_masks();
  specificity();
  consistency();
  verify_truth();
  report();
  save_manifest();
}

}  // namespace sdc
