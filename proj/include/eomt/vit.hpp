// Plain ViT: patch embedding, learned positional embeddings, and a stack of
// pre-norm Transformer blocks; blocks accept an optional additive attention
// mask used by the joint query/patch stages.
#pragma once

#include "eomt/nn_ops.hpp"
#include "eomt/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace eomt {

struct VitConfig {
  int image_size = 16;  // H == W, multiple of patch_size
  int patch_size = 4;
  int embed_dim = 16;
  int num_heads = 2;
  int depth_unmasked = 2;  // blocks that see only patch tokens
  int depth_joint = 2;     // blocks that also process queries
  int mlp_ratio = 4;

  int depth() const { return depth_unmasked + depth_joint; }
  int tokens_per_side() const { return image_size / patch_size; }
  int num_patches() const { return tokens_per_side() * tokens_per_side(); }

  void validate() const {
    check(image_size >= 1 && patch_size >= 1, "config: positive extents required");
    check(image_size % patch_size == 0, "config: image size must be a multiple of patch size");
    check(embed_dim % num_heads == 0, "config: embed dim must be divisible by heads");
    check(depth_unmasked >= 1 && depth_joint >= 1, "config: both depths must be at least 1");
    check(mlp_ratio >= 1, "config: mlp ratio must be at least 1");
  }
};

template <typename S>
struct BlockParams {
  Var<S> norm1_g, norm1_b;
  Var<S> qkv_w, qkv_b;  // [D x 3D], [3D]
  Var<S> proj_w, proj_b;
  Var<S> norm2_g, norm2_b;
  Var<S> fc1_w, fc1_b;  // [D x rD], [rD]
  Var<S> fc2_w, fc2_b;

  void init(int dim, int mlp_ratio, Rng& rng) {
    auto tn = [&rng](Shape shape) {
      Tensor<S> t(std::move(shape));
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(rng.trunc_normal(0.02));
      return t;
    };
    const int hidden = dim * mlp_ratio;
    norm1_g = Var<S>(Tensor<S>(Shape{dim}, S(1)));
    norm1_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
    qkv_w = Var<S>(tn({dim, 3 * dim}));
    qkv_b = Var<S>(Tensor<S>(Shape{3 * dim}, S(0)));
    proj_w = Var<S>(tn({dim, dim}));
    proj_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
    norm2_g = Var<S>(Tensor<S>(Shape{dim}, S(1)));
    norm2_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
    fc1_w = Var<S>(tn({dim, hidden}));
    fc1_b = Var<S>(Tensor<S>(Shape{hidden}, S(0)));
    fc2_w = Var<S>(tn({hidden, dim}));
    fc2_b = Var<S>(Tensor<S>(Shape{dim}, S(0)));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".norm1.gamma", norm1_g);
    f(prefix + ".norm1.beta", norm1_b);
    f(prefix + ".qkv.weight", qkv_w);
    f(prefix + ".qkv.bias", qkv_b);
    f(prefix + ".proj.weight", proj_w);
    f(prefix + ".proj.bias", proj_b);
    f(prefix + ".norm2.gamma", norm2_g);
    f(prefix + ".norm2.beta", norm2_b);
    f(prefix + ".mlp.fc1.weight", fc1_w);
    f(prefix + ".mlp.fc1.bias", fc1_b);
    f(prefix + ".mlp.fc2.weight", fc2_w);
    f(prefix + ".mlp.fc2.bias", fc2_b);
  }
};

// Row-major patch extraction: one row per patch, (channel, dy, dx) order.
template <typename S>
Tensor<S> patchify(const Tensor<S>& image, int patch) {
  check(image.rank() == 3, "patchify: [3 x H x W] image required");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  check(h % patch == 0 && w % patch == 0, "patchify: extents not divisible by patch size");
  const int gh = h / patch, gw = w / patch;
  Tensor<S> out(Shape{gh * gw, c * patch * patch});
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px) {
      const int row = py * gw + px;
      int col = 0;
      for (int ci = 0; ci < c; ++ci)
        for (int dy = 0; dy < patch; ++dy)
          for (int dx = 0; dx < patch; ++dx)
            out.at(row, col++) = image.at(ci, py * patch + dy, px * patch + dx);
    }
  return out;
}

template <typename S>
Var<S> patchify_embed(const Tensor<S>& image, int patch, const Var<S>& proj, const Var<S>& bias) {
  Var<S> patches(patchify(image, patch));
  return add_rowvec(matmul(patches, proj), bias);
}

template <typename S>
Var<S> add_positional(const Var<S>& tokens, const Var<S>& pos) {
  return add(tokens, pos);
}

// Pre-norm block: x + MHSA(Norm(x)), then + MLP(Norm(.)). The optional mask is
// added to the pre-softmax logits of every head; attn_out, when given, receives
// the per-head attention rows stacked as [h*T x T].
template <typename S>
Var<S> encoder_block(const Var<S>& x, const BlockParams<S>& p, int num_heads,
                     const Var<S>* attn_mask = nullptr, Tensor<S>* attn_out = nullptr) {
  const int t = x.dim(0), d = x.dim(1);
  check(d % num_heads == 0, "encoder_block: dim not divisible by heads");
  const int dh = d / num_heads;
  if (attn_mask != nullptr)
    check(attn_mask->value().rank() == 2 && attn_mask->dim(0) == t && attn_mask->dim(1) == t,
          "encoder_block: attention mask must be [T x T]");

  auto normed = layer_norm(x, p.norm1_g, p.norm1_b);
  auto qkv = add_rowvec(matmul(normed, p.qkv_w), p.qkv_b);
  if (attn_out != nullptr) *attn_out = Tensor<S>(Shape{num_heads * t, t});

  std::vector<Var<S>> heads;
  heads.reserve(num_heads);
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  for (int hI = 0; hI < num_heads; ++hI) {
    auto q = slice_cols(qkv, hI * dh, (hI + 1) * dh);
    auto k = slice_cols(qkv, d + hI * dh, d + (hI + 1) * dh);
    auto v = slice_cols(qkv, 2 * d + hI * dh, 2 * d + (hI + 1) * dh);
    auto scores = scale(matmul(q, transpose(k)), inv_sqrt);
    if (attn_mask != nullptr) scores = add(scores, *attn_mask);
    auto attn = softmax_lastdim(scores);
    if (attn_out != nullptr)
      attn_out->mat().middleRows(hI * t, t) = attn.value().mat();
    heads.push_back(matmul(attn, v));
  }
  auto merged = num_heads == 1 ? heads[0] : concat_cols(heads);
  auto attended = add_rowvec(matmul(merged, p.proj_w), p.proj_b);
  auto z = add(x, attended);

  auto normed2 = layer_norm(z, p.norm2_g, p.norm2_b);
  auto hidden = gelu(add_rowvec(matmul(normed2, p.fc1_w), p.fc1_b));
  auto mlp = add_rowvec(matmul(hidden, p.fc2_w), p.fc2_b);
  return add(z, mlp);
}

template <typename S>
struct VitEncoder {
  VitConfig cfg;
  Var<S> patch_w;  // [(3 p^2) x D]
  Var<S> patch_b;  // [D]
  Var<S> pos_emb;  // [N x D]
  std::vector<BlockParams<S>> blocks;

  void init(Rng& rng) {
    cfg.validate();
    const int in_dim = 3 * cfg.patch_size * cfg.patch_size;
    Tensor<S> w(Shape{in_dim, cfg.embed_dim});
    for (std::int64_t i = 0; i < w.numel(); ++i)
      w[i] = static_cast<S>(rng.trunc_normal(0.02));
    patch_w = Var<S>(std::move(w));
    patch_b = Var<S>(Tensor<S>(Shape{cfg.embed_dim}, S(0)));
    Tensor<S> pos(Shape{cfg.num_patches(), cfg.embed_dim});
    for (std::int64_t i = 0; i < pos.numel(); ++i)
      pos[i] = static_cast<S>(rng.trunc_normal(0.02));
    pos_emb = Var<S>(std::move(pos));
    blocks.resize(static_cast<std::size_t>(cfg.depth()));
    for (auto& b : blocks) b.init(cfg.embed_dim, cfg.mlp_ratio, rng);
  }

  // Embedding plus the first depth_unmasked blocks (no queries, no mask).
  Var<S> encode(const Tensor<S>& image) const {
    auto tokens = add_positional(patchify_embed(image, cfg.patch_size, patch_w, patch_b), pos_emb);
    for (int i = 0; i < cfg.depth_unmasked; ++i)
      tokens = encoder_block(tokens, blocks[static_cast<std::size_t>(i)], cfg.num_heads);
    return tokens;
  }

  template <typename F>
  void visit(F&& f) {
    f("patch_embed.weight", patch_w);
    f("patch_embed.bias", patch_b);
    f("pos_embed", pos_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit("blocks." + std::to_string(i), f);
  }
};

}  // namespace eomt
