#pragma once

// Weakly supervised grounding evaluation: [IMG] attention maps, region
// detection, overlap/IOU precision-recall, pointing game, rank correlation,
// threshold sweeps, per-head tables and capsule activation grouping.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "capsvl/box.hpp"
#include "capsvl/capsule.hpp"
#include "capsvl/cross.hpp"
#include "capsvl/data.hpp"
#include "capsvl/raster.hpp"

namespace capsvl {
class CapsVLModel;
}

namespace capsvl::grounding {

/// Non-negative h x w scores, row-major.
struct AttentionMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;
  std::size_t layer = 0;
  std::optional<std::size_t> head;  // nullopt = mean over heads
  std::string query = "[IMG]";

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  double max() const;
};

/// [IMG]-query row of the visual self-attention in cross layer `layer`
/// (1-based) for batch row `b`, the [IMG] -> [IMG] score dropped.
/// Throws InputError for an out-of-range layer, head or batch row.
AttentionMap extract_attention(const cross::CrossModalFeatures& features, std::size_t layer,
                               std::optional<std::size_t> head, std::size_t b, std::size_t grid_h,
                               std::size_t grid_w);

/// Divides by the maximum; all-zero maps pass through.
AttentionMap normalize_map(const AttentionMap& map);

enum class Connectivity { Four = 4, Eight = 8 };

/// Connected super-threshold cells, listed row-major, with their tight box
/// in cell units.
struct Region {
  std::vector<std::size_t> cells;
  BoundingBox box;
};

struct RegionSet {
  std::size_t height = 0, width = 0;
  double threshold = 0.5;
  std::vector<Region> regions;
};

/// Components of {score >= threshold}, ordered by their first cell.
RegionSet detect_regions(const AttentionMap& map, double threshold = 0.5,
                         Connectivity connectivity = Connectivity::Four);

/// Cell mask of a box given in grid units: cells covered >= 50%, or the
/// single most-covered cell when none reaches half.
std::vector<std::uint8_t> box_to_cells(const BoundingBox& box, std::size_t grid_h, std::size_t grid_w);

enum class MatchMode { Overlap, Iou };

struct PRF {
  double precision = 0, recall = 0, f1 = 0;
};

/// 2PR / (P + R), 0 when P + R = 0. Works on any common scale.
double f1_score(double precision, double recall);

/// Raw matching counts for one sample.
struct MatchCounts {
  std::size_t true_detections = 0, detections = 0;
  std::size_t covered_gts = 0, gts = 0;

  MatchCounts& operator+=(const MatchCounts& o);
  PRF prf() const;
};

/// Detection d is a true positive if max_g score(d, g) > accept; gt g is
/// recalled if max_d score(d, g) > accept. Overlap scores |d n g| / |d| for
/// precision and |d n g| / |g| for recall; IOU scores |d n g| / |d u g| on
/// both sides. Boxes are in grid units.
MatchCounts match_counts(const RegionSet& dets, const std::vector<BoundingBox>& gts, MatchMode mode,
                         double accept = 0.5);
PRF match_metrics(const RegionSet& dets, const std::vector<BoundingBox>& gts, MatchMode mode, double accept = 0.5);

enum class PointingOutcome { Hit, Miss, Skipped };

/// Lowest row-major index of the maximum.
std::size_t argmax_cell(const AttentionMap& map);
/// Every cell attaining the maximum, in row-major order.
std::vector<std::size_t> max_cells(const AttentionMap& map);
/// Centroid (k = 1 cluster centre) of the given points.
std::pair<double, double> centroid(const std::vector<std::pair<double, double>>& points);
/// Hit iff the centroid lies in any box (half-open); Skipped without boxes.
PointingOutcome pointing_game_points(const std::vector<std::pair<double, double>>& points,
                                     const std::vector<BoundingBox>& gts);
/// Clusters the centres (c + 0.5, r + 0.5) of every maximal cell of every head.
/// Tied maxima all count, so a uniform map points at the grid centre.
PointingOutcome pointing_game(const std::vector<AttentionMap>& per_head_maps, const std::vector<BoundingBox>& gts);

/// Bilinear resampling (half-pixel centres, edge clamped).
std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t src_h, std::size_t src_w,
                                    std::size_t dst_h, std::size_t dst_w);
/// Ranks 1..n with ties sharing their average rank.
std::vector<double> average_ranks(const std::vector<double>& v);
/// Spearman correlation of two equally long vectors; 0 (and *degenerate set)
/// when either has zero rank variance.
double spearman(const std::vector<double>& a, const std::vector<double>& b, bool* degenerate = nullptr);

inline constexpr std::size_t kRankResolution = 14;

/// Mean Spearman correlation between the system map and each human map,
/// all resized to 14 x 14. Warns on stderr for constant maps.
double rank_correlation(const AttentionMap& system, const std::vector<AttentionMap>& human);

/// Acceptance thresholds 0.05, 0.10, ..., 0.95.
std::vector<double> sweep_thresholds();

/// Detections and grid-unit ground truth of one evaluated sample.
struct CachedSample {
  std::string sample_id;
  RegionSet detections;
  std::vector<BoundingBox> gts;
};

enum class Averaging { Micro, Macro };

PRF aggregate(const std::vector<CachedSample>& samples, MatchMode mode, double accept, Averaging avg);

struct SweepRow {
  double threshold = 0;
  PRF overlap, iou;
};

std::vector<SweepRow> threshold_sweep(const std::vector<CachedSample>& samples, Averaging avg = Averaging::Micro);

/// Attention of one evaluated sample: per-head maps of a cross layer.
struct SampleAttention {
  std::string sample_id;
  std::vector<AttentionMap> heads;

  AttentionMap mean() const;
};

enum class Target { Answer, Question };
Target parse_target(const std::string& s);
std::string to_string(Target t);

struct EvalOptions {
  std::optional<std::size_t> head;  // nullopt = mean over heads
  double detection_threshold = 0.5;
  double accept = 0.5;
  Target target = Target::Answer;
  Connectivity connectivity = Connectivity::Four;
  Averaging averaging = Averaging::Micro;
  bool sweep = false;
  bool per_head = false;
};

struct HeadRow {
  std::size_t head = 0;
  PRF overlap, iou;
  double pointing = 0;
};

struct MetricsReport {
  PRF overlap, iou;
  double pointing_accuracy = 0;
  std::size_t pointing_hits = 0, pointing_evaluated = 0;
  std::size_t samples = 0, samples_with_gt = 0;
  std::string target = "answer";
  std::vector<SweepRow> sweep;
  std::vector<HeadRow> heads;
  std::optional<double> answer_accuracy;
  std::optional<double> rank_correlation_mean, rank_correlation_std;

  std::string text() const;
  nlohmann::json json() const;
};

/// Ground-truth boxes of a sample for the target, scaled to grid units.
std::vector<BoundingBox> grid_boxes(const data::Sample& s, Target target, std::size_t grid_h, std::size_t grid_w);

/// Detections of every sample with ground truth (others are skipped).
std::vector<CachedSample> cache_detections(const std::vector<SampleAttention>& attention, const data::Dataset& ds,
                                           const EvalOptions& opt, std::size_t grid_h, std::size_t grid_w);

/// Metrics over a dataset from cached attention (same order as ds.samples).
MetricsReport evaluate_grounding(const std::vector<SampleAttention>& attention, const data::Dataset& ds,
                                 const EvalOptions& opt, std::size_t grid_h, std::size_t grid_w);

/// Runs the model in eval mode and keeps every head of cross layer `layer`
/// (1-based; 0 = last). Optionally returns answer predictions.
std::vector<SampleAttention> collect_attention(const CapsVLModel& model, const data::Dataset& ds,
                                               const encoder::Vocabulary& vocab, std::size_t layer,
                                               std::vector<int>* predictions = nullptr, std::size_t batch_size = 64);

/// Per-image mean activation per capsule, and the argmax group.
struct CapsuleSummary {
  std::vector<std::vector<double>> vectors;  // [images][C]
  std::vector<std::size_t> groups;
};

CapsuleSummary capsule_activation_summary(const capsule::CapsuleGrid& grid);

/// Grayscale map image scaled by `scale` (nearest neighbour).
Raster map_image(const AttentionMap& map, std::size_t scale);
/// Map image with gt boxes (green), detections (red) and the pointing
/// centroid (blue) drawn on top.
Raster overlay_image(const AttentionMap& map, const RegionSet& dets, const std::vector<BoundingBox>& gts,
                     std::optional<std::pair<double, double>> point, std::size_t scale);

}  // namespace capsvl::grounding
