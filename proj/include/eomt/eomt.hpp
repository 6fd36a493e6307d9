// EoMT: learnable queries concatenated to the patch tokens after the first
// L1 blocks, joint processing in the last L2 blocks with optional masked
// self-attention, and a shared mask module predicting class and mask logits.
#pragma once

#include "eomt/resample.hpp"
#include "eomt/vit.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace eomt {

struct EomtConfig {
  VitConfig vit;
  int num_queries = 16;
  int num_classes = 3;  // real classes; the class head adds a no-object slot
  int num_stuff = 2;    // class ids [0, num_stuff) are stuff, the rest things

  int mask_h() const { return vit.image_size / 4; }
  int mask_w() const { return vit.image_size / 4; }
  int upscale_stages() const {
    int stages = 0, r = vit.patch_size / 4;
    while (r > 1) {
      r /= 2;
      ++stages;
    }
    return stages;
  }
  bool is_thing(int class_id) const { return class_id >= num_stuff; }

  void validate() const {
    vit.validate();
    check(num_queries >= 1, "config: at least one query");
    check(num_classes >= 1 && num_stuff >= 0 && num_stuff <= num_classes,
          "config: invalid class split");
    int r = vit.patch_size / 4;
    check(r >= 1 && vit.patch_size % 4 == 0 && (r & (r - 1)) == 0,
          "config: patch size / 4 must be a power of two");
    check(vit.image_size % 4 == 0, "config: image size must be a multiple of 4");
  }
};

template <typename S>
struct UpscaleStage {
  Var<S> tconv_w, tconv_b;  // [D x D x 2 x 2], [D]
  Var<S> dw_w, dw_b;        // [D x 3 x 3], [D]
  Var<S> norm_g, norm_b;    // [D]

  void init(int dim, Rng& rng) {
    auto tn = [&rng](Shape shape) {
      Tensor<S> t(std::move(shape));
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(rng.trunc_normal(0.02));
      return t;
    };
    tconv_w = Var<S>(tn({dim, dim, 2, 2}));
    tconv_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
    dw_w = Var<S>(tn({dim, 3, 3}));
    dw_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
    norm_g = Var<S>(Tensor<S>(Shape{dim}, S(1)));
    norm_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".tconv.weight", tconv_w);
    f(prefix + ".tconv.bias", tconv_b);
    f(prefix + ".dwconv.weight", dw_w);
    f(prefix + ".dwconv.bias", dw_b);
    f(prefix + ".norm.gamma", norm_g);
    f(prefix + ".norm.beta", norm_b);
  }
};

template <typename S>
struct MaskModuleParams {
  Var<S> class_w, class_b;  // [D x (C+1)], [C+1]
  Var<S> mlp1_w, mlp1_b, mlp2_w, mlp2_b, mlp3_w, mlp3_b;

  void init(int dim, int num_classes, Rng& rng) {
    auto tn = [&rng](Shape shape) {
      Tensor<S> t(std::move(shape));
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(rng.trunc_normal(0.02));
      return t;
    };
    class_w = Var<S>(tn({dim, num_classes + 1}));
    class_b = Var<S>(Tensor<S>(Shape{num_classes + 1}, S(0)));
    mlp1_w = Var<S>(tn({dim, dim}));
    mlp1_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
    mlp2_w = Var<S>(tn({dim, dim}));
    mlp2_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
    mlp3_w = Var<S>(tn({dim, dim}));
    mlp3_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".class.weight", class_w);
    f(prefix + ".class.bias", class_b);
    f(prefix + ".mlp1.weight", mlp1_w);
    f(prefix + ".mlp1.bias", mlp1_b);
    f(prefix + ".mlp2.weight", mlp2_w);
    f(prefix + ".mlp2.bias", mlp2_b);
    f(prefix + ".mlp3.weight", mlp3_w);
    f(prefix + ".mlp3.bias", mlp3_b);
  }
};

template <typename S>
struct SegPrediction {
  Var<S> class_logits;  // [K x (C+1)]
  Var<S> mask_logits;   // [K x H/4 x W/4]
};

// Per-block masking probability: flat 1 before the block's window, a
// polynomial decay inside it, 0 after. Windows partition [0, T] equally in
// block order, so earlier joint blocks anneal away first.
struct AnnealState {
  std::int64_t step = 0;
  std::int64_t total_steps = 1;
  double power = 0.9;
  int num_blocks = 1;  // L2

  double window_start(int block_j) const {
    return static_cast<double>(block_j - 1) * total_steps / num_blocks;
  }
  double window_end(int block_j) const {
    return static_cast<double>(block_j) * total_steps / num_blocks;
  }
};

inline double anneal_probability(const AnnealState& state, int block_j) {
  check(1 <= block_j && block_j <= state.num_blocks, "anneal_probability: block out of range");
  const double t = static_cast<double>(state.step);
  const double s = state.window_start(block_j);
  const double e = state.window_end(block_j);
  if (t <= s) return 1.0;
  if (t >= e) return 0.0;
  return std::pow(1.0 - (t - s) / (e - s), state.power);
}

// Queries occupy rows [0, K), patches [K, K+N) -- the fixed layout contract.
template <typename S>
Var<S> inject_queries(const Var<S>& patch_tokens, const Var<S>& queries) {
  if (!queries.defined() || queries.numel() == 0) return patch_tokens;
  check(patch_tokens.dim(1) == queries.dim(1), "inject_queries: embed dim mismatch");
  return concat_rows<S>({queries, patch_tokens});
}

struct AttentionMaskResult {
  bool any_masked = false;          // at least one -inf entry was written
  std::vector<char> fallback;       // per query: binarized mask was empty
};

// Additive {0, -inf} mask over the joint token sequence. Only the
// query-row x patch-column sub-block may be masked: entry (i, K+j) is -inf
// iff keep[i] and the query's resized mask logit at token j has
// sigmoid < 0.5. A kept query whose binarized mask selects no patch falls
// back to an all-zero row (full attention).
template <typename S>
AttentionMaskResult build_attention_mask(const Tensor<S>& mask_logits, int grid_h, int grid_w,
                                         const std::vector<char>& keep, Tensor<S>& out) {
  check(mask_logits.rank() == 3, "build_attention_mask: [K x H/4 x W/4] logits required");
  const int k = mask_logits.dim(0), mh = mask_logits.dim(1), mw = mask_logits.dim(2);
  check(static_cast<int>(keep.size()) == k, "build_attention_mask: keep size mismatch");
  const int n = grid_h * grid_w;
  const int t = k + n;
  out = Tensor<S>(Shape{t, t}, S(0));
  AttentionMaskResult res;
  res.fallback.assign(static_cast<std::size_t>(k), 0);
  for (int i = 0; i < k; ++i) {
    if (!keep[static_cast<std::size_t>(i)]) continue;
    Tensor<S> plane(Shape{mh, mw});
    for (int y = 0; y < mh; ++y)
      for (int x = 0; x < mw; ++x) plane.at(y, x) = mask_logits.at(i, y, x);
    Tensor<S> resized = bilinear_resize_plane(plane, grid_h, grid_w);
    int selected = 0;
    for (std::int64_t j = 0; j < n; ++j)
      if (resized[j] >= S(0)) ++selected;  // sigmoid(x) >= 0.5  <=>  x >= 0
    if (selected == 0) {
      res.fallback[static_cast<std::size_t>(i)] = 1;
      continue;
    }
    for (int j = 0; j < n; ++j)
      if (resized[j] < S(0)) {
        out.at(i, k + j) = neg_inf<S>();
        res.any_masked = true;
      }
  }
  return res;
}

enum class Masking { none, always, anneal };

struct ForwardOptions {
  bool training = false;    // emit intermediate predictions for supervision
  Masking masking = Masking::none;
  AnnealState anneal;       // consulted when masking == Masking::anneal
  Rng* rng = nullptr;       // Bernoulli stream for annealed keep decisions
};

struct ForwardStats {
  int intermediate_mask_modules = 0;  // mask-module runs feeding attention/supervision
  int masked_attention_blocks = 0;    // attention-mask constructions actually applied
};

template <typename S>
struct ForwardTrace {
  struct JointBlock {
    std::vector<char> keep;
    std::vector<char> fallback;
    bool mask_applied = false;
    Tensor<S> attn_mask;  // [T x T], empty when no mask was applied
    Tensor<S> attention;  // [h*T x T]
  };
  std::vector<JointBlock> joint;
};

template <typename S>
struct EomtModel {
  EomtConfig cfg;
  VitEncoder<S> vit;
  Var<S> queries;  // [K x D]
  MaskModuleParams<S> mask_module;
  std::vector<UpscaleStage<S>> upscaler;

  void init(Rng& rng) {
    cfg.validate();
    vit.cfg = cfg.vit;
    vit.init(rng);
    Tensor<S> q(Shape{cfg.num_queries, cfg.vit.embed_dim});
    for (std::int64_t i = 0; i < q.numel(); ++i)
      q[i] = static_cast<S>(rng.trunc_normal(0.02));
    queries = Var<S>(std::move(q));
    mask_module.init(cfg.vit.embed_dim, cfg.num_classes, rng);
    upscaler.resize(static_cast<std::size_t>(cfg.upscale_stages()));
    for (auto& s : upscaler) s.init(cfg.vit.embed_dim, rng);
  }

  // log2(p/4) stages of (transposed 2x2 stride-2 conv, GELU, depthwise 3x3,
  // channel layer norm); the p=4 configuration has zero stages.
  Var<S> upscale_features(const Var<S>& patch_tokens) const {
    const int d = cfg.vit.embed_dim;
    const int g = cfg.vit.tokens_per_side();
    auto x = reshape(transpose(patch_tokens), Shape{d, g, g});
    int side = g;
    for (const auto& st : upscaler) {
      x = conv_transpose2d(x, st.tconv_w, st.tconv_b, 2);
      side *= 2;
      x = gelu(x);
      x = conv_depthwise(x, st.dw_w, st.dw_b, 1);
      // layer norm over the channel axis at each spatial position
      auto rows = transpose(reshape(x, Shape{d, side * side}));
      rows = layer_norm(rows, st.norm_g, st.norm_b);
      x = reshape(transpose(rows), Shape{d, side, side});
    }
    return x;
  }

  SegPrediction<S> predict_masks(const Var<S>& tokens) const {
    const int k = cfg.num_queries;
    const int n = cfg.vit.num_patches();
    check(tokens.dim(0) == k + n, "predict_masks: token layout mismatch");
    auto q = slice_rows(tokens, 0, k);
    auto patches = slice_rows(tokens, k, k + n);

    SegPrediction<S> pred;
    pred.class_logits = add_rowvec(matmul(q, mask_module.class_w), mask_module.class_b);

    auto e = gelu(add_rowvec(matmul(q, mask_module.mlp1_w), mask_module.mlp1_b));
    e = gelu(add_rowvec(matmul(e, mask_module.mlp2_w), mask_module.mlp2_b));
    e = add_rowvec(matmul(e, mask_module.mlp3_w), mask_module.mlp3_b);

    auto feats = upscale_features(patches);  // [D x H/4 x W/4]
    const int mh = feats.dim(1), mw = feats.dim(2);
    auto feats2d = reshape(feats, Shape{cfg.vit.embed_dim, mh * mw});
    pred.mask_logits = reshape(matmul(e, feats2d), Shape{k, mh, mw});
    return pred;
  }

  // Train mode returns L2+1 predictions (one before each joint block plus the
  // final one); inference returns only the final prediction.
  std::vector<SegPrediction<S>> forward(const Tensor<S>& image, const ForwardOptions& opts,
                                        ForwardStats* stats = nullptr,
                                        ForwardTrace<S>* trace = nullptr) const {
    const int k = cfg.num_queries;
    const int l1 = cfg.vit.depth_unmasked;
    const int l2 = cfg.vit.depth_joint;
    if (opts.masking == Masking::anneal)
      check(opts.rng != nullptr, "forward: annealed masking needs a random stream");

    auto x = inject_queries(vit.encode(image), queries);
    std::vector<SegPrediction<S>> preds;
    if (trace != nullptr) trace->joint.assign(static_cast<std::size_t>(l2), {});

    for (int j = 1; j <= l2; ++j) {
      const auto& block = vit.blocks[static_cast<std::size_t>(l1 + j - 1)];
      typename ForwardTrace<S>::JointBlock* tb =
          trace ? &trace->joint[static_cast<std::size_t>(j - 1)] : nullptr;

      Var<S> mask_var;
      bool have_mask = false;
      if (opts.masking != Masking::none) {
        SegPrediction<S> inter = predict_masks(x);
        if (stats != nullptr) ++stats->intermediate_mask_modules;
        if (opts.training) preds.push_back(inter);

        std::vector<char> keep(static_cast<std::size_t>(k), 1);
        if (opts.masking == Masking::anneal) {
          const double p = anneal_probability(opts.anneal, j);
          for (int i = 0; i < k; ++i)
            keep[static_cast<std::size_t>(i)] = opts.rng->bernoulli(p) ? 1 : 0;
        }
        bool any_keep = false;
        for (char c : keep) any_keep |= (c != 0);
        if (any_keep) {
          Tensor<S> m;
          AttentionMaskResult res = build_attention_mask(
              inter.mask_logits.value(), cfg.vit.tokens_per_side(), cfg.vit.tokens_per_side(),
              keep, m);
          if (res.any_masked) {
            mask_var = Var<S>(std::move(m));
            have_mask = true;
            if (stats != nullptr) ++stats->masked_attention_blocks;
          }
          if (tb != nullptr) {
            tb->fallback = res.fallback;
            if (res.any_masked) tb->attn_mask = mask_var.value();
          }
        }
        if (tb != nullptr) tb->keep = keep;
      }

      if (tb != nullptr) tb->mask_applied = have_mask;
      x = encoder_block(x, block, cfg.vit.num_heads, have_mask ? &mask_var : nullptr,
                        tb ? &tb->attention : nullptr);
    }
    preds.push_back(predict_masks(x));
    return preds;
  }

  template <typename F>
  void visit(F&& f) {
    vit.visit(f);
    f(std::string("queries"), queries);
    mask_module.visit("mask_module", f);
    for (std::size_t i = 0; i < upscaler.size(); ++i)
      upscaler[i].visit("upscaler." + std::to_string(i), f);
  }

  // queries + mask module + upscaler, the randomly initialized "new" group
  template <typename F>
  void visit_new_params(F&& f) {
    f(std::string("queries"), queries);
    mask_module.visit("mask_module", f);
    for (std::size_t i = 0; i < upscaler.size(); ++i)
      upscaler[i].visit("upscaler." + std::to_string(i), f);
  }
};

}  // namespace eomt
