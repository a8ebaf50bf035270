#pragma once

#include "sdc/dataio.hpp"
#include "sdc/mask_finder.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sdc {

struct RoiFractionVector {
  Vector values;
  std::string participant_id;
  int concept_index = 0;
};

// Share of a mask's voxels per atlas ROI. Unassigned voxels count towards the
// total but land in no bin.
RoiFractionVector roi_fractions(const std::vector<std::int64_t>& support, const RoiAtlas& atlas);
RoiFractionVector roi_fractions(const ConceptMask& mask, const RoiAtlas& atlas);

double cosine_sim(const RoiFractionVector& a, const RoiFractionVector& b);

struct ConceptConsistency {
  int index = 0;
  std::vector<double> green;  // same concept, participant pairs s < t
  std::vector<double> red;    // other concepts j != i, ordered participant pairs s != t
  double median_green = 0.0;
  double median_red = 0.0;
  double score = 0.0;  // median_green - median_red; NaN when either set is empty
};

struct ConsistencyReport {
  std::vector<ConceptConsistency> concepts;
  std::vector<int> ranking;  // by score descending, NaN scores last, ties by index
  int participants = 0;
  std::vector<std::string> missing;  // "participant:concept" entries absent from the input

  // Set sizes with nothing missing.
  static std::size_t green_count(int participants) {
    return static_cast<std::size_t>(participants) * static_cast<std::size_t>(participants - 1) / 2;
  }
  static std::size_t red_count(int participants, int concepts) {
    return static_cast<std::size_t>(concepts - 1) * static_cast<std::size_t>(participants) *
           static_cast<std::size_t>(participants - 1);
  }
};

ConsistencyReport green_red(const std::vector<RoiFractionVector>& fractions);

std::vector<int> top_consistent(const ConsistencyReport& report, std::size_t m);

// Category -> concept indices.
using LocalizerGroups = std::map<std::string, std::vector<int>>;

// Face, place and body groupings with 1-based concept labels.
LocalizerGroups default_localizer_groups();
LocalizerGroups to_zero_based(const LocalizerGroups& groups);

struct LocalizerOverlap {
  std::vector<std::string> categories;
  std::vector<std::string> regions;
  std::vector<std::string> participants;
  // counts[p](category, region)
  std::vector<Matrix> counts;
  Matrix mean;
  Matrix sem;
};

// Per participant, pools the supports of each category's concepts and counts
// pooled voxels inside every localizer region. Voxels absent from the
// localizer map lie outside every region.
LocalizerOverlap localizer_overlap(const std::vector<ConceptMask>& masks, const LocalizerGroups& groups,
                                   const RoiAtlas& localizer, std::vector<std::string> region_names = {});

// Per-participant localizer maps keyed by participant id.
LocalizerOverlap localizer_overlap(const std::vector<ConceptMask>& masks, const LocalizerGroups& groups,
                                   const std::map<std::string, RoiAtlas>& localizers,
                                   std::vector<std::string> region_names = {});

void write_consistency_json(const std::filesystem::path& path, const ConsistencyReport& report);
// Long format for box plots: `concept_index,set,value`.
void write_consistency_csv(const std::filesystem::path& path, const ConsistencyReport& report);
void write_localizer_csv(const std::filesystem::path& path, const LocalizerOverlap& overlap);

}  // namespace sdc
