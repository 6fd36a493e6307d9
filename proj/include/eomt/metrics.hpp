// Panoptic fusion of per-query predictions plus the two evaluation metrics:
// Panoptic Quality and mean IoU.
#pragma once

#include "eomt/eomt.hpp"
#include "eomt/resample.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace eomt {

// Per-pixel (class id, segment id); segment id 0 is void. Stuff classes carry
// one segment per class, thing segments one per instance.
struct PanopticMap {
  int h = 0, w = 0;
  std::vector<std::int32_t> class_id;
  std::vector<std::int32_t> segment_id;

  PanopticMap() = default;
  PanopticMap(int height, int width)
      : h(height),
        w(width),
        class_id(static_cast<std::size_t>(height) * width, -1),
        segment_id(static_cast<std::size_t>(height) * width, 0) {}

  std::int64_t numel() const { return static_cast<std::int64_t>(class_id.size()); }
  std::int32_t cls(int y, int x) const { return class_id[static_cast<std::size_t>(y) * w + x]; }
  std::int32_t seg(int y, int x) const { return segment_id[static_cast<std::size_t>(y) * w + x]; }
};

// Throws when a segment id maps to more than one class.
inline std::map<std::int32_t, std::pair<std::int32_t, std::int64_t>> collect_segments(
    const PanopticMap& pm) {
  std::map<std::int32_t, std::pair<std::int32_t, std::int64_t>> segments;  // id -> (class, area)
  for (std::int64_t i = 0; i < pm.numel(); ++i) {
    const std::int32_t sid = pm.segment_id[static_cast<std::size_t>(i)];
    if (sid == 0) continue;
    const std::int32_t cls = pm.class_id[static_cast<std::size_t>(i)];
    check(cls >= 0, "panoptic map: segment pixel without a class");
    auto it = segments.find(sid);
    if (it == segments.end()) {
      segments.emplace(sid, std::make_pair(cls, std::int64_t(1)));
    } else {
      check(it->second.first == cls, "panoptic map: segment id spans multiple classes");
      ++it->second.second;
    }
  }
  return segments;
}

struct PqStats {
  double iou_sum = 0;
  int tp = 0, fp = 0, fn = 0;
};

struct PqReport {
  double pq_all = 0, pq_things = 0, pq_stuff = 0;
  std::map<int, PqStats> per_class;

  std::string to_kv() const {
    std::ostringstream os;
    os.precision(10);
    os << "pq_all=" << pq_all << "\npq_things=" << pq_things << "\npq_stuff=" << pq_stuff << "\n";
    for (const auto& [cls, st] : per_class)
      os << "class_" << cls << "_iou_sum=" << st.iou_sum << "\nclass_" << cls << "_tp=" << st.tp
         << "\nclass_" << cls << "_fp=" << st.fp << "\nclass_" << cls << "_fn=" << st.fn << "\n";
    return os.str();
  }
};

inline void accumulate_pq(const PanopticMap& pred, const PanopticMap& gt,
                          std::map<int, PqStats>& stats) {
  check(pred.h == gt.h && pred.w == gt.w, "panoptic_quality: shape mismatch");
  auto pred_segments = collect_segments(pred);
  auto gt_segments = collect_segments(gt);

  std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> inter;  // (pred,gt) -> count
  std::map<std::int32_t, std::int64_t> pred_on_void;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const std::int32_t ps = pred.segment_id[static_cast<std::size_t>(i)];
    const std::int32_t gs = gt.segment_id[static_cast<std::size_t>(i)];
    if (ps != 0 && gs != 0) ++inter[{ps, gs}];
    if (ps != 0 && gs == 0) ++pred_on_void[ps];
  }

  std::map<std::int32_t, std::int32_t> gt_match, pred_match;
  for (const auto& [key, count] : inter) {
    const auto& [ps, gs] = key;
    const auto& pseg = pred_segments.at(ps);
    const auto& gseg = gt_segments.at(gs);
    if (pseg.first != gseg.first) continue;
    const auto void_overlap = pred_on_void.count(ps) ? pred_on_void.at(ps) : 0;
    const double union_area =
        static_cast<double>(pseg.second + gseg.second - count - void_overlap);
    const double iou = static_cast<double>(count) / union_area;
    if (iou > 0.5) {
      stats[pseg.first].iou_sum += iou;
      stats[pseg.first].tp += 1;
      gt_match[gs] = ps;
      pred_match[ps] = gs;
    }
  }
  for (const auto& [gs, seg] : gt_segments)
    if (!gt_match.count(gs)) stats[seg.first].fn += 1;
  for (const auto& [ps, seg] : pred_segments) {
    if (pred_match.count(ps)) continue;
    const auto void_overlap = pred_on_void.count(ps) ? pred_on_void.at(ps) : 0;
    // predictions mostly covering ground-truth void are ignored, not penalized
    if (static_cast<double>(void_overlap) / static_cast<double>(seg.second) > 0.5) continue;
    stats[seg.first].fp += 1;
  }
}

inline PqReport pq_from_stats(const std::map<int, PqStats>& stats,
                              const std::vector<std::uint8_t>& thing_class) {
  PqReport rep;
  rep.per_class = stats;
  double sum_all = 0, sum_things = 0, sum_stuff = 0;
  int n_all = 0, n_things = 0, n_stuff = 0;
  for (const auto& [cls, st] : stats) {
    if (st.tp + st.fp + st.fn == 0) continue;
    const double pq = st.iou_sum / (st.tp + 0.5 * st.fp + 0.5 * st.fn);
    sum_all += pq;
    ++n_all;
    const bool thing =
        cls >= 0 && cls < static_cast<int>(thing_class.size()) && thing_class[static_cast<std::size_t>(cls)];
    if (thing) {
      sum_things += pq;
      ++n_things;
    } else {
      sum_stuff += pq;
      ++n_stuff;
    }
  }
  rep.pq_all = n_all ? sum_all / n_all : 0.0;
  rep.pq_things = n_things ? sum_things / n_things : 0.0;
  rep.pq_stuff = n_stuff ? sum_stuff / n_stuff : 0.0;
  return rep;
}

// Segments match iff same class and IoU > 0.5, IoU ignoring ground-truth void.
inline PqReport panoptic_quality(const PanopticMap& pred, const PanopticMap& gt,
                                 const std::vector<std::uint8_t>& thing_class) {
  std::map<int, PqStats> stats;
  accumulate_pq(pred, gt, stats);
  return pq_from_stats(stats, thing_class);
}

struct FuseThresholds {
  double confidence = 0.25;   // minimum best real-class probability
  double mask_bin = 0.5;      // sigmoid binarization threshold
  double overlap = 0.8;       // surviving-area fraction to keep a segment
};

// One surviving query's evidence at target resolution.
struct QueryEvidence {
  int cls = 0;
  double score = 0;
  Tensor<double> prob;  // [H x W] mask probabilities
};

inline PanopticMap fuse_from_evidence(const std::vector<QueryEvidence>& queries, int h, int w,
                                      const FuseThresholds& th,
                                      const std::vector<std::uint8_t>& thing_class) {
  PanopticMap out(h, w);
  if (queries.empty()) return out;
  const std::int64_t n = static_cast<std::int64_t>(h) * w;

  std::vector<int> winner(static_cast<std::size_t>(n), -1);
  std::vector<double> best(static_cast<std::size_t>(n), 0.0);
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    for (std::int64_t i = 0; i < n; ++i) {
      const double v = q.score * q.prob[i];
      if (winner[static_cast<std::size_t>(i)] < 0 || v > best[static_cast<std::size_t>(i)]) {
        winner[static_cast<std::size_t>(i)] = static_cast<int>(qi);
        best[static_cast<std::size_t>(i)] = v;
      }
    }
  }

  std::map<int, std::int32_t> stuff_ids;
  std::int32_t next_id = 1;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    std::int64_t binarized_area = 0, surviving = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const bool bin = q.prob[i] >= th.mask_bin;
      binarized_area += bin;
      surviving += bin && winner[static_cast<std::size_t>(i)] == static_cast<int>(qi);
    }
    if (surviving == 0 || binarized_area == 0) continue;
    if (static_cast<double>(surviving) < th.overlap * static_cast<double>(binarized_area))
      continue;
    const bool thing = q.cls >= 0 && q.cls < static_cast<int>(thing_class.size()) &&
                       thing_class[static_cast<std::size_t>(q.cls)];
    std::int32_t sid;
    if (thing) {
      sid = next_id++;
    } else {
      auto it = stuff_ids.find(q.cls);
      if (it == stuff_ids.end()) it = stuff_ids.emplace(q.cls, next_id++).first;
      sid = it->second;
    }
    for (std::int64_t i = 0; i < n; ++i)
      if (q.prob[i] >= th.mask_bin && winner[static_cast<std::size_t>(i)] == static_cast<int>(qi)) {
        out.class_id[static_cast<std::size_t>(i)] = q.cls;
        out.segment_id[static_cast<std::size_t>(i)] = sid;
      }
  }
  return out;
}

// Converts raw prediction logits into per-query evidence: softmax class
// probabilities, confidence/no-object filtering, bilinear mask upsampling.
template <typename S>
std::vector<QueryEvidence> evidence_from_prediction(const Tensor<S>& class_logits,
                                                    const Tensor<S>& mask_logits, int h, int w,
                                                    const FuseThresholds& th) {
  const int k = class_logits.dim(0), c1 = class_logits.dim(1);
  std::vector<QueryEvidence> out;
  for (int i = 0; i < k; ++i) {
    double mx = class_logits.at(i, 0);
    for (int j = 1; j < c1; ++j) mx = std::max(mx, static_cast<double>(class_logits.at(i, j)));
    std::vector<double> probs(static_cast<std::size_t>(c1));
    double denom = 0;
    for (int j = 0; j < c1; ++j) {
      probs[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(class_logits.at(i, j)) - mx);
      denom += probs[static_cast<std::size_t>(j)];
    }
    int arg = 0;
    for (int j = 0; j < c1; ++j) {
      probs[static_cast<std::size_t>(j)] /= denom;
      if (probs[static_cast<std::size_t>(j)] > probs[static_cast<std::size_t>(arg)]) arg = j;
    }
    if (arg == c1 - 1) continue;  // no-object
    if (probs[static_cast<std::size_t>(arg)] < th.confidence) continue;

    QueryEvidence ev;
    ev.cls = arg;
    ev.score = probs[static_cast<std::size_t>(arg)];
    Tensor<S> plane(Shape{mask_logits.dim(1), mask_logits.dim(2)});
    for (int y = 0; y < plane.dim(0); ++y)
      for (int x = 0; x < plane.dim(1); ++x) plane.at(y, x) = mask_logits.at(i, y, x);
    Tensor<S> up = bilinear_resize_plane(plane, h, w);
    ev.prob = Tensor<double>(Shape{h, w});
    for (std::int64_t p = 0; p < ev.prob.numel(); ++p)
      ev.prob[p] = 1.0 / (1.0 + std::exp(-static_cast<double>(up[p])));
    out.push_back(std::move(ev));
  }
  return out;
}

// Final-prediction fusion: mask logits are bilinearly upsampled to the target
// size when their resolution differs.
template <typename S>
PanopticMap fuse_panoptic(const Tensor<S>& class_logits, const Tensor<S>& mask_logits, int h,
                          int w, const FuseThresholds& th,
                          const std::vector<std::uint8_t>& thing_class) {
  check(mask_logits.rank() == 3 && class_logits.rank() == 2, "fuse_panoptic: bad prediction");
  auto ev = evidence_from_prediction(class_logits, mask_logits, h, w, th);
  return fuse_from_evidence(ev, h, w, th, thing_class);
}

// Per-pixel class = argmax_c sum_i softmax(class_i)[c] * sigmoid(mask_i),
// over real classes only; ties resolve to the lowest class id.
template <typename S>
std::vector<std::int32_t> semantic_from_queries(const Tensor<S>& class_logits,
                                                const Tensor<S>& mask_logits, int h, int w) {
  const int k = class_logits.dim(0), c1 = class_logits.dim(1);
  const int c = c1 - 1;
  const std::int64_t n = static_cast<std::int64_t>(h) * w;
  std::vector<double> evidence(static_cast<std::size_t>(n) * c, 0.0);
  for (int i = 0; i < k; ++i) {
    double mx = class_logits.at(i, 0);
    for (int j = 1; j < c1; ++j) mx = std::max(mx, static_cast<double>(class_logits.at(i, j)));
    std::vector<double> probs(static_cast<std::size_t>(c1));
    double denom = 0;
    for (int j = 0; j < c1; ++j) {
      probs[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(class_logits.at(i, j)) - mx);
      denom += probs[static_cast<std::size_t>(j)];
    }
    Tensor<S> plane(Shape{mask_logits.dim(1), mask_logits.dim(2)});
    for (int y = 0; y < plane.dim(0); ++y)
      for (int x = 0; x < plane.dim(1); ++x) plane.at(y, x) = mask_logits.at(i, y, x);
    Tensor<S> up = bilinear_resize_plane(plane, h, w);
    for (std::int64_t p = 0; p < n; ++p) {
      const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(up[p])));
      for (int cc = 0; cc < c; ++cc)
        evidence[static_cast<std::size_t>(p) * c + cc] += probs[static_cast<std::size_t>(cc)] / denom * s;
    }
  }
  std::vector<std::int32_t> out(static_cast<std::size_t>(n), 0);
  for (std::int64_t p = 0; p < n; ++p) {
    int arg = 0;
    for (int cc = 1; cc < c; ++cc)
      if (evidence[static_cast<std::size_t>(p) * c + cc] >
          evidence[static_cast<std::size_t>(p) * c + arg])
        arg = cc;
    out[static_cast<std::size_t>(p)] = arg;
  }
  return out;
}

// Per-class IoU over non-ignored pixels, averaged over classes present in
// either map.
inline double mean_iou(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
                       std::int32_t ignore_id = 255) {
  check(pred.size() == gt.size(), "mean_iou: size mismatch");
  std::map<std::int32_t, std::int64_t> inter, pred_area, gt_area;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == ignore_id || pred[i] == ignore_id) continue;
    ++pred_area[pred[i]];
    ++gt_area[gt[i]];
    if (pred[i] == gt[i]) ++inter[gt[i]];
  }
  std::map<std::int32_t, char> classes;
  for (const auto& [c, a] : pred_area) classes[c] = 1;
  for (const auto& [c, a] : gt_area) classes[c] = 1;
  if (classes.empty()) return 0.0;
  double acc = 0;
  for (const auto& [c, unused] : classes) {
    const std::int64_t in = inter.count(c) ? inter.at(c) : 0;
    const std::int64_t un = (pred_area.count(c) ? pred_area.at(c) : 0) +
                            (gt_area.count(c) ? gt_area.at(c) : 0) - in;
    acc += un > 0 ? static_cast<double>(in) / static_cast<double>(un) : 0.0;
  }
  return acc / static_cast<double>(classes.size());
}

}  // namespace eomt
