#include "sdc/consistency.hpp"

#include "csv.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

namespace sdc {

namespace fs = std::filesystem;

RoiFractionVector roi_fractions(const std::vector<std::int64_t>& support, const RoiAtlas& atlas) {
  if (support.empty()) fail(ErrorKind::EmptyMask, "roi_fractions: mask has no voxels");
  if (atlas.roi_count <= 0) fail(ErrorKind::Atlas, "roi_fractions: atlas has no ROIs");
  RoiFractionVector f;
  f.values = Vector::Zero(atlas.roi_count);
  for (auto voxel : support) {
    const int roi = atlas.roi_of(voxel);
    if (roi == kUnassignedRoi) continue;
    if (roi < 0 || roi >= atlas.roi_count) {
      fail(ErrorKind::Atlas, "voxel " + std::to_string(voxel) + " maps to out-of-range ROI " + std::to_string(roi));
    }
    f.values(roi) += 1.0;
  }
  f.values /= static_cast<double>(support.size());
  return f;
}

RoiFractionVector roi_fractions(const ConceptMask& mask, const RoiAtlas& atlas) {
  RoiFractionVector f = roi_fractions(mask.support_voxels(), atlas);
  f.participant_id = mask.participant_id;
  f.concept_index = mask.concept_index;
  return f;
}

double cosine_sim(const RoiFractionVector& a, const RoiFractionVector& b) {
  require_shape(a.values.size() == b.values.size(), "cosine_sim: vectors differ in length");
  const double na = a.values.norm();
  const double nb = b.values.norm();
  if (!(na > 0.0) || !(nb > 0.0)) fail(ErrorKind::ZeroVector, "cosine_sim: zero ROI fraction vector");
  return std::min(1.0, a.values.dot(b.values) / (na * nb));
}

ConsistencyReport green_red(const std::vector<RoiFractionVector>& fractions) {
  std::set<std::string> ids;
  int concepts = 0;
  for (const auto& f : fractions) {
    ids.insert(f.participant_id);
    if (f.concept_index < 0) fail(ErrorKind::InputValidation, "green_red: negative concept index");
    concepts = std::max(concepts, f.concept_index + 1);
    require_shape(f.values.size() == fractions.front().values.size(), "green_red: ROI counts differ");
  }
  if (ids.size() < 2) fail(ErrorKind::Consistency, "green_red: need at least 2 participants");
  const std::vector<std::string> parts(ids.begin(), ids.end());
  const std::size_t s_count = parts.size();

  // table[i][s] -> fraction or null
  std::vector<std::vector<const RoiFractionVector*>> table(static_cast<std::size_t>(concepts),
                                                           std::vector<const RoiFractionVector*>(s_count, nullptr));
  for (const auto& f : fractions) {
    const auto s = static_cast<std::size_t>(std::lower_bound(parts.begin(), parts.end(), f.participant_id) - parts.begin());
    auto& slot = table[static_cast<std::size_t>(f.concept_index)][s];
    if (slot) fail(ErrorKind::InputValidation, "green_red: duplicate entry for " + f.participant_id + ":" +
                                                   std::to_string(f.concept_index));
    slot = &f;
  }

  ConsistencyReport report;
  report.participants = static_cast<int>(s_count);
  for (int i = 0; i < concepts; ++i) {
    for (std::size_t s = 0; s < s_count; ++s) {
      if (!table[static_cast<std::size_t>(i)][s]) report.missing.push_back(parts[s] + ":" + std::to_string(i));
    }
  }

  for (int i = 0; i < concepts; ++i) {
    const auto& row_i = table[static_cast<std::size_t>(i)];
    ConceptConsistency cc;
    cc.index = i;
    for (std::size_t s = 0; s < s_count; ++s) {
      for (std::size_t t = s + 1; t < s_count; ++t) {
        if (row_i[s] && row_i[t]) cc.green.push_back(cosine_sim(*row_i[s], *row_i[t]));
      }
    }
    for (int j = 0; j < concepts; ++j) {
      if (j == i) continue;
      const auto& row_j = table[static_cast<std::size_t>(j)];
      for (std::size_t s = 0; s < s_count; ++s) {
        for (std::size_t t = 0; t < s_count; ++t) {
          if (s != t && row_i[s] && row_j[t]) cc.red.push_back(cosine_sim(*row_i[s], *row_j[t]));
        }
      }
    }
    cc.median_green = median(cc.green);
    cc.median_red = median(cc.red);
    cc.score = cc.median_green - cc.median_red;
    report.concepts.push_back(std::move(cc));
  }

  report.ranking.resize(static_cast<std::size_t>(concepts));
  for (int i = 0; i < concepts; ++i) report.ranking[static_cast<std::size_t>(i)] = i;
  std::stable_sort(report.ranking.begin(), report.ranking.end(), [&](int a, int b) {
    const double sa = report.concepts[static_cast<std::size_t>(a)].score;
    const double sb = report.concepts[static_cast<std::size_t>(b)].score;
    if (std::isnan(sa) != std::isnan(sb)) return std::isnan(sb);
    return sa > sb;
  });
  return report;
}

std::vector<int> top_consistent(const ConsistencyReport& report, std::size_t m) {
  std::vector<int> out;
  for (int i : report.ranking) {
    if (out.size() >= m) break;
    if (!std::isnan(report.concepts[static_cast<std::size_t>(i)].score)) out.push_back(i);
  }
  return out;
}

LocalizerGroups default_localizer_groups() {
  return {{"body", {2, 15, 16, 18, 24}}, {"face", {4, 5}}, {"place", {8, 9, 10, 14, 32}}};
}

LocalizerGroups to_zero_based(const LocalizerGroups& groups) {
  LocalizerGroups out;
  for (const auto& [name, idx] : groups) {
    auto& v = out[name];
    for (int i : idx) {
      if (i < 1) fail(ErrorKind::Group, "group '" + name + "': labels are 1-based");
      v.push_back(i - 1);
    }
  }
  return out;
}

namespace {

LocalizerOverlap overlap_impl(const std::vector<ConceptMask>& masks, const LocalizerGroups& groups,
                              const std::function<const RoiAtlas&(const std::string&)>& atlas_for, int regions,
                              std::vector<std::string> region_names) {
  if (groups.empty()) fail(ErrorKind::Group, "localizer: no groups");
  int concepts = 0;
  std::set<std::string> ids;
  for (const auto& m : masks) {
    concepts = std::max(concepts, m.concept_index + 1);
    ids.insert(m.participant_id);
  }
  for (const auto& [name, idx] : groups) {
    if (idx.empty()) fail(ErrorKind::Group, "localizer: group '" + name + "' is empty");
    for (int i : idx) {
      if (i < 0 || i >= concepts) {
        fail(ErrorKind::Group, "localizer: group '" + name + "' references concept " + std::to_string(i) +
                                   " outside 0.." + std::to_string(concepts - 1));
      }
    }
  }
  if (region_names.empty()) {
    for (int r = 0; r < regions; ++r) region_names.push_back(std::to_string(r));
  }
  require_shape(static_cast<int>(region_names.size()) == regions, "localizer: region name count differs from regions");

  LocalizerOverlap out;
  out.regions = std::move(region_names);
  out.participants.assign(ids.begin(), ids.end());
  for (const auto& [name, idx] : groups) out.categories.push_back(name);
  const auto n_cat = static_cast<Eigen::Index>(out.categories.size());

  for (const auto& pid : out.participants) {
    const RoiAtlas& atlas = atlas_for(pid);
    Matrix counts = Matrix::Zero(n_cat, regions);
    Eigen::Index k = 0;
    for (const auto& [name, idx] : groups) {
      std::set<std::int64_t> pooled;
      for (const auto& m : masks) {
        if (m.participant_id != pid) continue;
        if (std::find(idx.begin(), idx.end(), m.concept_index) == idx.end()) continue;
        for (auto v : m.support_voxels()) pooled.insert(v);
      }
      for (auto v : pooled) {
        const auto it = atlas.voxel_to_roi.find(v);
        if (it == atlas.voxel_to_roi.end() || it->second == kUnassignedRoi) continue;
        if (it->second < 0 || it->second >= regions) fail(ErrorKind::Atlas, "localizer region id out of range");
        counts(k, it->second) += 1.0;
      }
      ++k;
    }
    out.counts.push_back(std::move(counts));
  }

  const auto p = static_cast<double>(out.counts.size());
  out.mean = Matrix::Zero(n_cat, regions);
  out.sem = Matrix::Zero(n_cat, regions);
  if (out.counts.empty()) return out;
  for (const auto& c : out.counts) out.mean += c;
  out.mean /= p;
  if (out.counts.size() >= 2) {
    Matrix ss = Matrix::Zero(n_cat, regions);
    for (const auto& c : out.counts) ss.array() += (c - out.mean).array().square();
    out.sem = (ss.array() / (p - 1.0)).sqrt() / std::sqrt(p);
  }
  return out;
}

}  // namespace

LocalizerOverlap localizer_overlap(const std::vector<ConceptMask>& masks, const LocalizerGroups& groups,
                                   const RoiAtlas& localizer, std::vector<std::string> region_names) {
  return overlap_impl(
      masks, groups, [&localizer](const std::string&) -> const RoiAtlas& { return localizer; }, localizer.roi_count,
      std::move(region_names));
}

LocalizerOverlap localizer_overlap(const std::vector<ConceptMask>& masks, const LocalizerGroups& groups,
                                   const std::map<std::string, RoiAtlas>& localizers,
                                   std::vector<std::string> region_names) {
  if (localizers.empty()) fail(ErrorKind::Atlas, "localizer: no localizer maps");
  const int regions = localizers.begin()->second.roi_count;
  for (const auto& [pid, a] : localizers) {
    if (a.roi_count != regions) fail(ErrorKind::Atlas, "localizer: region counts differ across participants");
  }
  return overlap_impl(
      masks, groups,
      [&localizers](const std::string& pid) -> const RoiAtlas& {
        const auto it = localizers.find(pid);
        if (it == localizers.end()) fail(ErrorKind::Atlas, "localizer: no map for participant " + pid);
        return it->second;
      },
      regions, std::move(region_names));
}

void write_consistency_json(const fs::path& path, const ConsistencyReport& report) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["participants"] = report.participants;
  const int c = static_cast<int>(report.concepts.size());
  j["counts"] = {{"green_per_concept", ConsistencyReport::green_count(report.participants)},
                 {"red_per_concept", c > 0 ? ConsistencyReport::red_count(report.participants, c) : 0},
                 {"green_formula", "S(S-1)/2"},
                 {"red_formula", "(c-1)S(S-1)"}};
  j["concepts"] = nlohmann::json::array();
  for (const auto& cc : report.concepts) {
    j["concepts"].push_back({{"index", cc.index},
                             {"green", cc.green},
                             {"red", cc.red},
                             {"median_green", num(cc.median_green)},
                             {"median_red", num(cc.median_red)},
                             {"score", num(cc.score)}});
  }
  j["ranking"] = report.ranking;
  j["missing"] = report.missing;
  auto out = csv::open_out(path);
  out << j.dump(1) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

void write_consistency_csv(const fs::path& path, const ConsistencyReport& report) {
  auto out = csv::open_out(path);
  out << "concept_index,set,value\n";
  for (const auto& cc : report.concepts) {
    for (double v : cc.green) out << cc.index << ",green," << csv::format_double(v) << '\n';
    for (double v : cc.red) out << cc.index << ",red," << csv::format_double(v) << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

void write_localizer_csv(const fs::path& path, const LocalizerOverlap& overlap) {
  auto out = csv::open_out(path);
  out << "category,region,mean_count,sem\n";
  for (std::size_t c = 0; c < overlap.categories.size(); ++c) {
    for (std::size_t r = 0; r < overlap.regions.size(); ++r) {
      const auto ci = static_cast<Eigen::Index>(c);
      const auto ri = static_cast<Eigen::Index>(r);
      out << overlap.categories[c] << ',' << overlap.regions[r] << ',' << csv::format_double(overlap.mean(ci, ri))
          << ',' << csv::format_double(overlap.sem(ci, ri)) << '\n';
    }
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

}  // namespace sdc
