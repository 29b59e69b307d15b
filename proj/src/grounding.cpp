#include "capsvl/grounding.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "capsvl/errors.hpp"
#include "capsvl/model.hpp"

namespace capsvl::grounding {

double AttentionMap::max() const {
  return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
}

AttentionMap extract_attention(const cross::CrossModalFeatures& features, std::size_t layer,
                               std::optional<std::size_t> head, std::size_t b, std::size_t grid_h,
                               std::size_t grid_w) {
  if (layer < 1 || layer > features.records.size())
    throw InputError("cross layer " + std::to_string(layer) + " out of range 1.." +
                     std::to_string(features.records.size()));
  const auto& probs = features.records[layer - 1].visual_self;
  const std::size_t B = probs.dim(0), H = probs.dim(1), T = probs.dim(2);
  if (b >= B) throw InputError("batch row " + std::to_string(b) + " out of range");
  if (head && *head >= H) throw InputError("head " + std::to_string(*head) + " out of range 0.." + std::to_string(H - 1));
  if (T != grid_h * grid_w + 1)
    throw InputError("attention over " + std::to_string(T) + " tokens does not fit a " + std::to_string(grid_h) + "x" +
                     std::to_string(grid_w) + " grid");
  AttentionMap m;
  m.height = grid_h;
  m.width = grid_w;
  m.layer = layer;
  m.head = head;
  m.values.assign(grid_h * grid_w, 0.0);
  const auto p = probs.data();
  const std::size_t first = head ? *head : 0, last = head ? *head + 1 : H;
  for (std::size_t h = first; h < last; ++h) {
    const std::size_t row = ((b * H + h) * T + 0) * T;
    for (std::size_t j = 1; j < T; ++j) m.values[j - 1] += p[row + j];
  }
  if (!head)
    for (double& v : m.values) v /= static_cast<double>(H);
  return m;
}

AttentionMap normalize_map(const AttentionMap& map) {
  AttentionMap out = map;
  const double mx = map.max();
  if (mx > 0)
    for (double& v : out.values) v /= mx;
  return out;
}

RegionSet detect_regions(const AttentionMap& map, double threshold, Connectivity connectivity) {
  RegionSet rs;
  rs.height = map.height;
  rs.width = map.width;
  rs.threshold = threshold;
  const std::size_t n = map.height * map.width;
  std::vector<int> label(n, -1);
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (label[seed] >= 0 || !(map.values[seed] >= threshold)) continue;
    Region reg;
    const int id = static_cast<int>(rs.regions.size());
    label[seed] = id;
    stack.assign(1, seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      reg.cells.push_back(cur);
      const auto r = static_cast<long>(cur / map.width), c = static_cast<long>(cur % map.width);
      for (long dr = -1; dr <= 1; ++dr)
        for (long dc = -1; dc <= 1; ++dc) {
          if ((dr == 0 && dc == 0) || (connectivity == Connectivity::Four && dr != 0 && dc != 0)) continue;
          const long nr = r + dr, nc = c + dc;
          if (nr < 0 || nc < 0 || nr >= static_cast<long>(map.height) || nc >= static_cast<long>(map.width)) continue;
          const auto k = static_cast<std::size_t>(nr) * map.width + static_cast<std::size_t>(nc);
          if (label[k] < 0 && map.values[k] >= threshold) {
            label[k] = id;
            stack.push_back(k);
          }
        }
    }
    std::sort(reg.cells.begin(), reg.cells.end());
    double x0 = 1e300, y0 = 1e300, x1 = -1, y1 = -1;
    for (auto k : reg.cells) {
      const auto r = static_cast<double>(k / map.width), c = static_cast<double>(k % map.width);
      x0 = std::min(x0, c);
      y0 = std::min(y0, r);
      x1 = std::max(x1, c + 1);
      y1 = std::max(y1, r + 1);
    }
    reg.box = {x0, y0, x1, y1};
    rs.regions.push_back(std::move(reg));
  }
  return rs;
}

std::vector<std::uint8_t> box_to_cells(const BoundingBox& box, std::size_t grid_h, std::size_t grid_w) {
  std::vector<std::uint8_t> mask(grid_h * grid_w, 0);
  double best = 0.0;
  std::size_t best_cell = 0;
  bool any = false;
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) {
      const BoundingBox cell{static_cast<double>(c), static_cast<double>(r), static_cast<double>(c + 1),
                             static_cast<double>(r + 1)};
      const double cover = intersection_area(cell, box);
      if (cover >= 0.5) {
        mask[r * grid_w + c] = 1;
        any = true;
      }
      if (cover > best) {
        best = cover;
        best_cell = r * grid_w + c;
      }
    }
  if (!any && best > 0.0) mask[best_cell] = 1;
  return mask;
}

double f1_score(double precision, double recall) {
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

MatchCounts& MatchCounts::operator+=(const MatchCounts& o) {
  true_detections += o.true_detections;
  detections += o.detections;
  covered_gts += o.covered_gts;
  gts += o.gts;
  return *this;
}

PRF MatchCounts::prf() const {
  PRF r;
  r.precision = detections ? static_cast<double>(true_detections) / static_cast<double>(detections) : 0.0;
  r.recall = gts ? static_cast<double>(covered_gts) / static_cast<double>(gts) : 0.0;
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

MatchCounts match_counts(const RegionSet& dets, const std::vector<BoundingBox>& gts, MatchMode mode, double accept) {
  MatchCounts m;
  m.detections = dets.regions.size();
  m.gts = gts.size();
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<std::size_t> gt_area;
  for (const auto& g : gts) {
    masks.push_back(box_to_cells(g, dets.height, dets.width));
    gt_area.push_back(static_cast<std::size_t>(std::count(masks.back().begin(), masks.back().end(), 1)));
  }
  // inter[d][g]
  std::vector<std::vector<std::size_t>> inter(dets.regions.size(), std::vector<std::size_t>(gts.size(), 0));
  for (std::size_t d = 0; d < dets.regions.size(); ++d)
    for (std::size_t g = 0; g < gts.size(); ++g)
      for (auto k : dets.regions[d].cells) inter[d][g] += masks[g][k];
  auto score = [&](std::size_t d, std::size_t g, bool for_precision) {
    const auto i = static_cast<double>(inter[d][g]);
    const auto da = static_cast<double>(dets.regions[d].cells.size());
    const auto ga = static_cast<double>(gt_area[g]);
    if (mode == MatchMode::Iou) return i / (da + ga - i);
    return for_precision ? i / da : (ga > 0 ? i / ga : 0.0);
  };
  for (std::size_t d = 0; d < dets.regions.size(); ++d) {
    bool tp = false;
    for (std::size_t g = 0; g < gts.size() && !tp; ++g) tp = score(d, g, true) > accept;
    m.true_detections += tp;
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    bool hit = false;
    for (std::size_t d = 0; d < dets.regions.size() && !hit; ++d) hit = score(d, g, false) > accept;
    m.covered_gts += hit;
  }
  return m;
}

PRF match_metrics(const RegionSet& dets, const std::vector<BoundingBox>& gts, MatchMode mode, double accept) {
  return match_counts(dets, gts, mode, accept).prf();
}

std::size_t argmax_cell(const AttentionMap& map) {
  if (map.values.empty()) throw InputError("argmax of an empty attention map");
  return static_cast<std::size_t>(std::max_element(map.values.begin(), map.values.end()) - map.values.begin());
}

std::vector<std::size_t> max_cells(const AttentionMap& map) {
  const auto top = map.values[argmax_cell(map)];
  std::vector<std::size_t> cells;
  for (std::size_t k = 0; k < map.values.size(); ++k)
    if (map.values[k] == top) cells.push_back(k);
  return cells;
}

std::pair<double, double> centroid(const std::vector<std::pair<double, double>>& points) {
  double x = 0, y = 0;
  for (const auto& [px, py] : points) {
    x += px;
    y += py;
  }
  const auto n = static_cast<double>(points.size());
  return {x / n, y / n};
}

PointingOutcome pointing_game_points(const std::vector<std::pair<double, double>>& points,
                                     const std::vector<BoundingBox>& gts) {
  if (gts.empty()) return PointingOutcome::Skipped;
  if (points.empty()) throw InputError("pointing game needs at least one point");
  const auto [x, y] = centroid(points);
  for (const auto& g : gts)
    if (g.contains(x, y)) return PointingOutcome::Hit;
  return PointingOutcome::Miss;
}

PointingOutcome pointing_game(const std::vector<AttentionMap>& per_head_maps, const std::vector<BoundingBox>& gts) {
  std::vector<std::pair<double, double>> points;
  for (const auto& m : per_head_maps) {
    for (const auto k : max_cells(m))
      points.emplace_back(static_cast<double>(k % m.width) + 0.5, static_cast<double>(k / m.width) + 0.5);
  }
  return pointing_game_points(points, gts);
}

std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t src_h, std::size_t src_w,
                                    std::size_t dst_h, std::size_t dst_w) {
  if (src.size() != src_h * src_w || src.empty()) throw InputError("resize: map size does not match its shape");
  std::vector<double> out(dst_h * dst_w);
  auto coord = [](std::size_t i, std::size_t src_n, std::size_t dst_n, std::size_t& lo, std::size_t& hi,
                  double& frac) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(src_n) / static_cast<double>(dst_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_n - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, src_n - 1);
    frac = s - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < dst_h; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, src_h, dst_h, y0, y1, fy);
    for (std::size_t x = 0; x < dst_w; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, src_w, dst_w, x0, x1, fx);
      const double top = src[y0 * src_w + x0] * (1 - fx) + src[y0 * src_w + x1] * fx;
      const double bot = src[y1 * src_w + x0] * (1 - fx) + src[y1 * src_w + x1] * fx;
      out[y * dst_w + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b, bool* degenerate) {
  if (a.size() != b.size() || a.empty()) throw InputError("rank correlation needs two equally sized maps");
  if (degenerate) *degenerate = false;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const auto n = static_cast<double>(a.size());
  auto has_ties = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) != v.end();
  };
  const bool ties = has_ties(a) || has_ties(b);
  if (!ties && a.size() > 1) {
    // Distinct integer ranks: the classical closed form is exact here.
    double d2 = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  }
  const double mean = (n + 1.0) / 2.0;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0 || sbb == 0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (ra == rb) return 1.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double rank_correlation(const AttentionMap& system, const std::vector<AttentionMap>& human) {
  if (human.empty()) throw InputError("rank correlation needs at least one human map");
  const auto s = resize_bilinear(system.values, system.height, system.width, kRankResolution, kRankResolution);
  double total = 0;
  for (const auto& h : human) {
    bool degenerate = false;
    total += spearman(s, resize_bilinear(h.values, h.height, h.width, kRankResolution, kRankResolution), &degenerate);
    if (degenerate) std::cerr << "warning: constant attention map, rank correlation taken as 0\n";
  }
  return total / static_cast<double>(human.size());
}

std::vector<double> sweep_thresholds() {
  std::vector<double> t;
  for (int k = 1; k <= 19; ++k) t.push_back(static_cast<double>(k) / 20.0);
  return t;
}

PRF aggregate(const std::vector<CachedSample>& samples, MatchMode mode, double accept, Averaging avg) {
  if (avg == Averaging::Micro) {
    MatchCounts total;
    for (const auto& s : samples) total += match_counts(s.detections, s.gts, mode, accept);
    return total.prf();
  }
  PRF r;
  std::size_t n = 0;
  for (const auto& s : samples) {
    const auto p = match_counts(s.detections, s.gts, mode, accept).prf();
    r.precision += p.precision;
    r.recall += p.recall;
    ++n;
  }
  if (n > 0) {
    r.precision /= static_cast<double>(n);
    r.recall /= static_cast<double>(n);
  }
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

std::vector<SweepRow> threshold_sweep(const std::vector<CachedSample>& samples, Averaging avg) {
  std::vector<SweepRow> rows;
  for (double t : sweep_thresholds())
    rows.push_back({t, aggregate(samples, MatchMode::Overlap, t, avg), aggregate(samples, MatchMode::Iou, t, avg)});
  return rows;
}

AttentionMap SampleAttention::mean() const {
  if (heads.empty()) throw InputError("sample " + sample_id + " has no attention heads");
  AttentionMap m = heads.front();
  m.head.reset();
  for (std::size_t h = 1; h < heads.size(); ++h)
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] += heads[h].values[i];
  for (double& v : m.values) v /= static_cast<double>(heads.size());
  return m;
}

Target parse_target(const std::string& s) {
  if (s == "answer") return Target::Answer;
  if (s == "question") return Target::Question;
  throw ConfigError("unknown grounding target '" + s + "' (expected answer or question)");
}

std::string to_string(Target t) { return t == Target::Answer ? "answer" : "question"; }

std::vector<BoundingBox> grid_boxes(const data::Sample& s, Target target, std::size_t grid_h, std::size_t grid_w) {
  const auto& src = target == Target::Answer ? s.answer_boxes : s.question_boxes;
  std::vector<BoundingBox> out;
  const double sx = static_cast<double>(grid_w) / static_cast<double>(s.image_width);
  const double sy = static_cast<double>(grid_h) / static_cast<double>(s.image_height);
  for (const auto& b : src) out.push_back(b.scaled(sx, sy));
  return out;
}

namespace {

AttentionMap selected_map(const SampleAttention& a, const EvalOptions& opt) {
  if (!opt.head) return a.mean();
  if (*opt.head >= a.heads.size())
    throw InputError("head " + std::to_string(*opt.head) + " out of range 0.." + std::to_string(a.heads.size() - 1));
  return a.heads[*opt.head];
}

void check_alignment(const std::vector<SampleAttention>& attention, const data::Dataset& ds) {
  if (attention.size() != ds.samples.size())
    throw InputError("attention for " + std::to_string(attention.size()) + " samples, dataset has " +
                     std::to_string(ds.samples.size()));
}

}  // namespace

std::vector<CachedSample> cache_detections(const std::vector<SampleAttention>& attention, const data::Dataset& ds,
                                           const EvalOptions& opt, std::size_t grid_h, std::size_t grid_w) {
  check_alignment(attention, ds);
  std::vector<CachedSample> out;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    auto gts = grid_boxes(ds.samples[i], opt.target, grid_h, grid_w);
    if (gts.empty()) continue;
    out.push_back({ds.samples[i].sample_id,
                   detect_regions(normalize_map(selected_map(attention[i], opt)), opt.detection_threshold,
                                  opt.connectivity),
                   std::move(gts)});
  }
  return out;
}

MetricsReport evaluate_grounding(const std::vector<SampleAttention>& attention, const data::Dataset& ds,
                                 const EvalOptions& opt, std::size_t grid_h, std::size_t grid_w) {
  MetricsReport rep;
  rep.target = to_string(opt.target);
  rep.samples = ds.samples.size();
  const auto cached = cache_detections(attention, ds, opt, grid_h, grid_w);
  rep.samples_with_gt = cached.size();
  rep.overlap = aggregate(cached, MatchMode::Overlap, opt.accept, opt.averaging);
  rep.iou = aggregate(cached, MatchMode::Iou, opt.accept, opt.averaging);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto gts = grid_boxes(ds.samples[i], opt.target, grid_h, grid_w);
    std::vector<AttentionMap> maps = attention[i].heads;
    if (opt.head) maps = {selected_map(attention[i], opt)};
    const auto outcome = pointing_game(maps, gts);
    if (outcome == PointingOutcome::Skipped) continue;
    ++rep.pointing_evaluated;
    rep.pointing_hits += outcome == PointingOutcome::Hit;
  }
  rep.pointing_accuracy = rep.pointing_evaluated
                              ? static_cast<double>(rep.pointing_hits) / static_cast<double>(rep.pointing_evaluated)
                              : 0.0;
  if (opt.sweep) rep.sweep = threshold_sweep(cached, opt.averaging);
  if (opt.per_head && !attention.empty()) {
    const std::size_t H = attention.front().heads.size();
    for (std::size_t h = 0; h < H; ++h) {
      EvalOptions one = opt;
      one.head = h;
      one.sweep = one.per_head = false;
      const auto r = evaluate_grounding(attention, ds, one, grid_h, grid_w);
      rep.heads.push_back({h, r.overlap, r.iou, r.pointing_accuracy});
    }
  }
  return rep;
}

std::vector<SampleAttention> collect_attention(const CapsVLModel& model, const data::Dataset& ds,
                                               const encoder::Vocabulary& vocab, std::size_t layer,
                                               std::vector<int>* predictions, std::size_t batch_size) {
  const auto& cfg = model.config();
  if (layer == 0) layer = cfg.cross_layers;
  if (layer > cfg.cross_layers)
    throw InputError("cross layer " + std::to_string(layer) + " out of range 1.." + std::to_string(cfg.cross_layers));
  ag::NoGradGuard guard;
  const nn::ForwardContext ctx;
  std::vector<SampleAttention> out;
  if (predictions) predictions->clear();
  for (const auto& idx : data::batch_indices(ds.samples.size(), batch_size, false, 0)) {
    const auto batch = data::make_batch(ds, idx, vocab, cfg.stem);
    const auto fwd = model.forward(batch.images, batch.text, Stage::Finetune, ctx);
    const std::size_t H = cfg.encoder.heads;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      SampleAttention sa;
      sa.sample_id = ds.samples[idx[b]].sample_id;
      for (std::size_t h = 0; h < H; ++h)
        sa.heads.push_back(extract_attention(*fwd.cross, layer, h, b, cfg.grid_h, cfg.grid_w));
      out.push_back(std::move(sa));
    }
    if (predictions) {
      const auto logits = model.vqa_head()(fwd.pooled);
      const std::size_t A = logits.dim(1);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto row = logits.data().subspan(b * A, A);
        predictions->push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
      }
    }
  }
  return out;
}

CapsuleSummary capsule_activation_summary(const capsule::CapsuleGrid& grid) {
  const std::size_t B = grid.batch(), cells = grid.cells(), C = grid.capsules();
  const auto a = grid.activations.data();
  CapsuleSummary s;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> v(C, 0.0);
    for (std::size_t k = 0; k < cells; ++k)
      for (std::size_t c = 0; c < C; ++c) v[c] += a[(b * cells + k) * C + c];
    for (double& x : v) x /= static_cast<double>(cells);
    s.groups.push_back(static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin()));
    s.vectors.push_back(std::move(v));
  }
  return s;
}

Raster map_image(const AttentionMap& map, std::size_t scale) {
  std::vector<double> up(map.height * scale * map.width * scale);
  for (std::size_t y = 0; y < map.height * scale; ++y)
    for (std::size_t x = 0; x < map.width * scale; ++x) up[y * map.width * scale + x] = map.at(y / scale, x / scale);
  return map_to_gray(up, map.width * scale, map.height * scale);
}

namespace {

void draw_rect(Raster& img, const BoundingBox& b, double scale, std::array<std::uint8_t, 3> rgb) {
  const auto clampi = [&](double v, std::size_t n) {
    return static_cast<long>(std::clamp(std::floor(v * scale), 0.0, static_cast<double>(n - 1)));
  };
  const long x0 = clampi(b.x0, img.width), x1 = clampi(b.x1 - 1.0 / scale, img.width);
  const long y0 = clampi(b.y0, img.height), y1 = clampi(b.y1 - 1.0 / scale, img.height);
  auto put = [&](long x, long y) {
    for (std::size_t c = 0; c < 3; ++c) img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = rgb[c];
  };
  for (long x = x0; x <= x1; ++x) {
    put(x, y0);
    put(x, y1);
  }
  for (long y = y0; y <= y1; ++y) {
    put(x0, y);
    put(x1, y);
  }
}

}  // namespace

Raster overlay_image(const AttentionMap& map, const RegionSet& dets, const std::vector<BoundingBox>& gts,
                     std::optional<std::pair<double, double>> point, std::size_t scale) {
  const Raster gray = map_image(map, scale);
  Raster img(gray.width, gray.height, 3);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = gray.pixels[i];
  const auto s = static_cast<double>(scale);
  for (const auto& g : gts) draw_rect(img, g, s, {40, 220, 60});
  for (const auto& r : dets.regions) draw_rect(img, r.box, s, {230, 40, 40});
  if (point) {
    const double half = 1.0 / s;
    draw_rect(img, {point->first - half, point->second - half, point->first + 2 * half, point->second + 2 * half}, s,
              {50, 90, 240});
  }
  return img;
}

namespace {

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

nlohmann::json prf_json(const PRF& p) { return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}}; }

}  // namespace

std::string MetricsReport::text() const {
  std::ostringstream os;
  os << "grounding target: " << target << "\n";
  os << "samples: " << samples << " (with ground truth: " << samples_with_gt << ")\n";
  if (answer_accuracy) os << "answer accuracy: " << pct(*answer_accuracy) << "\n";
  os << "overlap  P " << pct(overlap.precision) << "  R " << pct(overlap.recall) << "  F1 " << pct(overlap.f1) << "\n";
  os << "IOU      P " << pct(iou.precision) << "  R " << pct(iou.recall) << "  F1 " << pct(iou.f1) << "\n";
  os << "pointing game: " << pct(pointing_accuracy) << " (" << pointing_hits << "/" << pointing_evaluated << ")\n";
  if (rank_correlation_mean)
    os << "rank correlation: " << std::fixed << std::setprecision(3) << *rank_correlation_mean << " +- "
       << std::setprecision(4) << rank_correlation_std.value_or(0.0) << "\n";
  if (!sweep.empty()) {
    os << "threshold  ovP     ovR     ovF1    iouP    iouR    iouF1\n";
    for (const auto& r : sweep)
      os << std::fixed << std::setprecision(2) << r.threshold << "       " << pct(r.overlap.precision) << "  "
         << pct(r.overlap.recall) << "  " << pct(r.overlap.f1) << "  " << pct(r.iou.precision) << "  "
         << pct(r.iou.recall) << "  " << pct(r.iou.f1) << "\n";
  }
  if (!heads.empty()) {
    os << "head  ovP     ovR     ovF1    iouF1   pointing\n";
    for (const auto& h : heads)
      os << std::setw(4) << h.head << "  " << pct(h.overlap.precision) << "  " << pct(h.overlap.recall) << "  "
         << pct(h.overlap.f1) << "  " << pct(h.iou.f1) << "  " << pct(h.pointing) << "\n";
    os << "clustered pointing: " << pct(pointing_accuracy) << "\n";
  }
  return os.str();
}

nlohmann::json MetricsReport::json() const {
  nlohmann::json j{{"target", target},
                   {"samples", samples},
                   {"samples_with_gt", samples_with_gt},
                   {"overlap", prf_json(overlap)},
                   {"iou", prf_json(iou)},
                   {"pointing_game", {{"accuracy", pointing_accuracy}, {"hits", pointing_hits}, {"evaluated", pointing_evaluated}}}};
  if (answer_accuracy) j["answer_accuracy"] = *answer_accuracy;
  if (rank_correlation_mean) j["rank_correlation"] = {{"mean", *rank_correlation_mean}, {"std", rank_correlation_std.value_or(0.0)}};
  if (!sweep.empty()) {
    auto rows = nlohmann::json::array();
    for (const auto& r : sweep) rows.push_back({{"threshold", r.threshold}, {"overlap", prf_json(r.overlap)}, {"iou", prf_json(r.iou)}});
    j["sweep"] = rows;
  }
  if (!heads.empty()) {
    auto rows = nlohmann::json::array();
    for (const auto& h : heads)
      rows.push_back({{"head", h.head}, {"overlap", prf_json(h.overlap)}, {"iou", prf_json(h.iou)}, {"pointing_game", h.pointing}});
    j["per_head"] = rows;
    j["clustered_pointing_game"] = pointing_accuracy;
  }
  return j;
}

}  // namespace capsvl::grounding
