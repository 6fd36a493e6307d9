// Bipartite query-to-segment assignment and the weighted BCE + Dice + CE
// objective, applied independently to every prediction of a training forward.
#pragma once

#include "eomt/eomt.hpp"
#include "eomt/resample.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

namespace eomt {

template <typename S>
struct GtSegment {
  int class_id = 0;
  Tensor<S> mask;  // binary [H x W]
  bool is_thing = false;
};

template <typename S>
using GroundTruthSegments = std::vector<GtSegment<S>>;

struct LossWeights {
  double bce = 5.0;
  double dice = 5.0;
  double ce = 2.0;
  double no_object = 0.1;  // CE down-weight for the no-object class
};

// ---- value-level mask losses (matching cost path, no tape) ----

template <typename S>
std::pair<double, double> mask_loss_values(const Tensor<S>& logits, const Tensor<S>& gt,
                                           const Tensor<S>& weight) {
  check(logits.same_shape(gt), "mask_loss_values: shape mismatch");
  const bool weighted = weight.numel() != 0;
  double bce = 0, wsum = 0;
  double inter = 0, s_sum = 0, y_sum = 0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const double w = weighted ? static_cast<double>(weight[i]) : 1.0;
    const double x = static_cast<double>(logits[i]);
    const double y = static_cast<double>(gt[i]);
    bce += w * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
    wsum += w;
    const double s = 1.0 / (1.0 + std::exp(-x));
    inter += w * s * y;
    s_sum += w * s;
    y_sum += w * y;
  }
  check(wsum > 0, "mask_loss_values: zero total weight");
  const double dice = 1.0 - (2.0 * inter + 1.0) / (s_sum + y_sum + 1.0);
  return {bce / wsum, dice};
}

// ---- tape-recorded mask losses for matched pairs ----

template <typename S>
std::pair<Var<S>, Var<S>> mask_losses(const Var<S>& mask_logits, const Tensor<S>& gt,
                                      const Tensor<S>& weight) {
  check(mask_logits.value().same_shape(gt), "mask_losses: shape mismatch");
  const int m = static_cast<int>(mask_logits.numel());
  auto x = reshape(mask_logits, Shape{1, m});
  Tensor<S> y = gt.reshaped(Shape{1, m});
  Tensor<S> w = weight.numel() ? weight.reshaped(Shape{1, m}) : Tensor<S>();

  Var<S> bce = bce_with_logits_mean(x, y, w);

  Tensor<S> yw(Shape{1, m});
  S y_sum = S(0);
  for (int i = 0; i < m; ++i) {
    const S wi = w.numel() ? w[i] : S(1);
    yw[i] = y[i] * wi;
    y_sum += yw[i];
  }
  auto s = sigmoid(x);
  auto inter = sum(mul(s, Var<S>(yw)));
  auto s_sum = w.numel() ? sum(mul(s, Var<S>(w))) : sum(s);
  auto num = add_const(scale(inter, S(2)), S(1));
  auto den = add_const(s_sum, y_sum + S(1));
  Var<S> dice = add_const(scale(div(num, den), S(-1)), S(1));
  return {bce, dice};
}

// ---- matching ----

// cost[i,g] = ce_w * (-softmax(class_i)[class_g]) + bce_w * BCE + dice_w * Dice,
// with ground truth already pooled to the mask-logit resolution.
template <typename S>
Tensor<double> matching_cost(const SegPrediction<S>& pred,
                             const std::vector<Tensor<S>>& gt_masks_quarter,
                             const std::vector<int>& gt_classes, const LossWeights& w,
                             const Tensor<S>& valid_quarter) {
  const int k = pred.class_logits.dim(0);
  const int c1 = pred.class_logits.dim(1);
  const int g = static_cast<int>(gt_masks_quarter.size());
  check(g >= 1, "matching_cost: at least one segment required");
  const int mh = pred.mask_logits.dim(1), mw = pred.mask_logits.dim(2);

  Tensor<double> probs(Shape{k, c1});
  for (int i = 0; i < k; ++i) {
    double mx = pred.class_logits.value().at(i, 0);
    for (int j = 1; j < c1; ++j)
      mx = std::max(mx, static_cast<double>(pred.class_logits.value().at(i, j)));
    double denom = 0;
    for (int j = 0; j < c1; ++j) {
      probs.at(i, j) = std::exp(pred.class_logits.value().at(i, j) - mx);
      denom += probs.at(i, j);
    }
    for (int j = 0; j < c1; ++j) probs.at(i, j) /= denom;
  }

  Tensor<double> cost(Shape{k, g});
  for (int i = 0; i < k; ++i) {
    Tensor<S> plane(Shape{mh, mw});
    for (int y = 0; y < mh; ++y)
      for (int x = 0; x < mw; ++x) plane.at(y, x) = pred.mask_logits.value().at(i, y, x);
    for (int gi = 0; gi < g; ++gi) {
      check(gt_classes[static_cast<std::size_t>(gi)] >= 0 &&
                gt_classes[static_cast<std::size_t>(gi)] < c1 - 1,
            "matching_cost: ground-truth class out of range");
      auto [bce, dice] = mask_loss_values(plane, gt_masks_quarter[static_cast<std::size_t>(gi)],
                                          valid_quarter);
      cost.at(i, gi) = w.ce * -probs.at(i, gt_classes[static_cast<std::size_t>(gi)]) +
                       w.bce * bce + w.dice * dice;
    }
  }
  return cost;
}

using Assignment = std::vector<std::pair<int, int>>;  // (query, segment), injective

// Minimum-total-cost injective assignment covering all G segments (G <= K).
// Jonker-Volgenant shortest augmenting paths; ties resolve to the lowest
// query index because columns are scanned in ascending order.
inline Assignment hungarian_assign(const Tensor<double>& cost) {
  check(cost.rank() == 2, "hungarian_assign: rank-2 cost");
  const int k = cost.dim(0), g = cost.dim(1);
  check(g <= k, "hungarian_assign: more segments than queries");
  for (std::int64_t i = 0; i < cost.numel(); ++i)
    check(std::isfinite(cost[i]), "hungarian_assign: non-finite cost");

  const double inf = std::numeric_limits<double>::infinity();
  // segments play the row role so every segment ends up assigned
  std::vector<double> u(static_cast<std::size_t>(g) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(k) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(k) + 1, 0);  // query -> segment (1-based)
  std::vector<int> way(static_cast<std::size_t>(k) + 1, 0);
  for (int seg = 1; seg <= g; ++seg) {
    match[0] = seg;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(k) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(k) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = match[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= k; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost.at(j - 1, i0 - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= k; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }

  Assignment out;
  out.reserve(static_cast<std::size_t>(g));
  for (int j = 1; j <= k; ++j)
    if (match[static_cast<std::size_t>(j)] != 0)
      out.emplace_back(j - 1, match[static_cast<std::size_t>(j)] - 1);
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  return out;
}

// CE over all K queries: matched queries target their segment's class,
// unmatched target no-object (down-weighted).
template <typename S>
Var<S> class_loss(const Var<S>& class_logits, const Assignment& assignment,
                  const std::vector<int>& gt_classes, const LossWeights& w) {
  const int k = class_logits.dim(0);
  const int c1 = class_logits.dim(1);
  std::vector<int> targets(static_cast<std::size_t>(k), c1 - 1);
  for (const auto& [q, g] : assignment)
    targets[static_cast<std::size_t>(q)] = gt_classes[static_cast<std::size_t>(g)];
  std::vector<S> class_weights(static_cast<std::size_t>(c1), S(1));
  class_weights[static_cast<std::size_t>(c1 - 1)] = static_cast<S>(w.no_object);
  return cross_entropy_rows(class_logits, targets, class_weights);
}

template <typename S>
struct LossTerms {
  Var<S> total;
  double bce = 0, dice = 0, ce = 0;  // accumulated raw term values for logging
};

// Ground truth pooled once to the mask-logit (quarter) resolution.
template <typename S>
struct PooledGt {
  std::vector<Tensor<S>> masks;
  std::vector<int> classes;
  Tensor<S> valid;  // fractional validity weights, empty when fully valid
};

template <typename S>
PooledGt<S> pool_gt_quarter(const GroundTruthSegments<S>& gt, const Tensor<S>& valid_full) {
  PooledGt<S> out;
  for (const auto& seg : gt) {
    out.masks.push_back(majority_downsample(seg.mask, 4));
    out.classes.push_back(seg.class_id);
  }
  if (valid_full.numel() != 0) out.valid = mean_downsample(valid_full, 4);
  return out;
}

// Deep supervision: every prediction is matched and scored independently;
// the total is the sum over the prediction list. Mask terms average over
// matched pairs; with no segments only the no-object class loss remains.
template <typename S>
LossTerms<S> total_loss(const std::vector<SegPrediction<S>>& preds,
                        const GroundTruthSegments<S>& gt, const LossWeights& w,
                        const Tensor<S>& valid_full = Tensor<S>()) {
  check(!preds.empty(), "total_loss: empty prediction list");
  PooledGt<S> pooled = pool_gt_quarter(gt, valid_full);
  const int g = static_cast<int>(gt.size());

  LossTerms<S> terms;
  std::vector<Var<S>> contributions;
  for (const auto& pred : preds) {
    Assignment assignment;
    if (g > 0) {
      Tensor<double> cost = matching_cost(pred, pooled.masks, pooled.classes, w, pooled.valid);
      assignment = hungarian_assign(cost);
      const int mh = pred.mask_logits.dim(1), mw = pred.mask_logits.dim(2);
      const int m = mh * mw;
      auto flat = reshape(pred.mask_logits, Shape{pred.mask_logits.dim(0), m});
      std::vector<Var<S>> bces, dices;
      for (const auto& [qi, gi] : assignment) {
        auto plane = reshape(slice_rows(flat, qi, qi + 1), Shape{mh, mw});
        auto [bce, dice] =
            mask_losses(plane, pooled.masks[static_cast<std::size_t>(gi)], pooled.valid);
        bces.push_back(bce);
        dices.push_back(dice);
      }
      Var<S> bce_mean = bces[0], dice_mean = dices[0];
      for (std::size_t i = 1; i < bces.size(); ++i) {
        bce_mean = add(bce_mean, bces[i]);
        dice_mean = add(dice_mean, dices[i]);
      }
      bce_mean = scale(bce_mean, S(1) / static_cast<S>(g));
      dice_mean = scale(dice_mean, S(1) / static_cast<S>(g));
      terms.bce += bce_mean.value()[0];
      terms.dice += dice_mean.value()[0];
      contributions.push_back(scale(bce_mean, static_cast<S>(w.bce)));
      contributions.push_back(scale(dice_mean, static_cast<S>(w.dice)));
    }
    Var<S> ce = class_loss(pred.class_logits, assignment, pooled.classes, w);
    terms.ce += ce.value()[0];
    contributions.push_back(scale(ce, static_cast<S>(w.ce)));
  }
  terms.total = contributions[0];
  for (std::size_t i = 1; i < contributions.size(); ++i)
    terms.total = add(terms.total, contributions[i]);
  return terms;
}

}  // namespace eomt
