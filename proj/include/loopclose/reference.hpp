#pragma once

// Single-threaded reference versions of the search kernels: linear scans in
// place of the grid index and plain loops in place of batches. Tests and
// benchmarks compare the parallel kernels against these.

#include "loopclose/matching.hpp"

namespace loopclose::reference {

std::vector<std::uint32_t> features_in_radius(const KeyFrameSnapshot& snap, double u, double v,
                                              double radius, int min_octave, int max_octave);

std::vector<MatchResult> projection_search(const KeyFrameSnapshot& snap, const Sim3& pose,
                                           std::span<const PointRecord> points,
                                           const ProjectionSearchParams& params);

/// Shared-word scores for every keyframe, then the same grouping and ranking
/// rules as detect_candidates, computed by exhaustive pairwise comparison.
std::vector<KeyFrameId> detect_candidates(const Map& map, KeyFrameId query,
                                          const std::vector<WordId>& query_words, int n,
                                          const std::set<KeyFrameId>& exclusion);

}  // namespace loopclose::reference
