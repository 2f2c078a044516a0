#pragma once

// Vision-transformer backbone shared by teacher and student: patch
// embedding, class token, learned positional embeddings and pre-norm
// multi-head self-attention blocks. The student threads the sparsification
// hooks through the same forward.

#include <cmath>
#include <cstdint>
#include <optional>
#include <type_traits>
#include <random>
#include <string>
#include <vector>

#include "sureid/errors.hpp"
#include "sureid/hts.hpp"
#include "sureid/tensor.hpp"

namespace sureid::vit {

struct PatchConfig {
  int image_height = 64;
  int image_width = 32;
  int channels = 3;
  int patch = 16;

  int grid_rows() const { return image_height / patch; }
  int grid_cols() const { return image_width / patch; }
  /// N = (H * W) / P^2
  int num_tokens() const { return (image_height * image_width) / (patch * patch); }

  void validate() const {
    if (patch <= 0 || image_height % patch != 0 || image_width % patch != 0)
      throw ConfigError("patch config: stride " + std::to_string(patch) +
                        " must divide image " + std::to_string(image_height) + "x" +
                        std::to_string(image_width));
  }
};

struct ModelConfig {
  int dim = 32;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int num_classes = 1;
  std::optional<hts::SparsifySchedule> sparsify;

  void validate() const {
    if (dim <= 0 || depth <= 0 || heads <= 0 || dim % heads != 0)
      throw ConfigError("model config: embed dim " + std::to_string(dim) +
                        " must be divisible by " + std::to_string(heads) + " heads");
    if (sparsify) sparsify->validate(depth);
  }
};

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

  static BlockWeights init(int64_t dim, int64_t mlp_ratio, std::mt19937_64& rng) {
    BlockWeights b;
    const T sd = T(0.02);
    b.ln1_g = Tensor<T>::full({dim}, T(1)).to_param();
    b.ln1_b = Tensor<T>::param({dim});
    b.wq = Tensor<T>::trunc_normal({dim, dim}, rng, sd).to_param();
    b.bq = Tensor<T>::param({dim});
    b.wk = Tensor<T>::trunc_normal({dim, dim}, rng, sd).to_param();
    b.bk = Tensor<T>::param({dim});
    b.wv = Tensor<T>::trunc_normal({dim, dim}, rng, sd).to_param();
    b.bv = Tensor<T>::param({dim});
    b.wo = Tensor<T>::trunc_normal({dim, dim}, rng, sd).to_param();
    b.bo = Tensor<T>::param({dim});
    b.ln2_g = Tensor<T>::full({dim}, T(1)).to_param();
    b.ln2_b = Tensor<T>::param({dim});
    b.fc1_w = Tensor<T>::trunc_normal({dim, dim * mlp_ratio}, rng, sd).to_param();
    b.fc1_b = Tensor<T>::param({dim * mlp_ratio});
    b.fc2_w = Tensor<T>::trunc_normal({dim * mlp_ratio, dim}, rng, sd).to_param();
    b.fc2_b = Tensor<T>::param({dim});
    return b;
  }
};

template <typename T>
struct VitWeights {
  Tensor<T> patch_w, patch_b;  // [P*P*d, C], [C]
  Tensor<T> cls;               // [C], zero init
  Tensor<T> pos;               // [N+1, C], zero init
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> lnf_g, lnf_b;

  static VitWeights init(const PatchConfig& pc, const ModelConfig& mc, std::mt19937_64& rng) {
    VitWeights w;
    const int64_t dim = mc.dim;
    const int64_t pvec = static_cast<int64_t>(pc.patch) * pc.patch * pc.channels;
    w.patch_w = Tensor<T>::trunc_normal({pvec, dim}, rng, T(0.02)).to_param();
    w.patch_b = Tensor<T>::param({dim});
    w.cls = Tensor<T>::param({dim});
    w.pos = Tensor<T>::param({pc.num_tokens() + 1, dim});
    for (int l = 0; l < mc.depth; ++l) w.blocks.push_back(BlockWeights<T>::init(dim, mc.mlp_ratio, rng));
    w.lnf_g = Tensor<T>::full({dim}, T(1)).to_param();
    w.lnf_b = Tensor<T>::param({dim});
    return w;
  }
};

/// Token sequence plus the optional sparsification decision state. The class
/// token sits at index 0; a decision mask, when present, covers the image
/// tokens only.
template <typename T>
struct TokenBatch {
  Tensor<T> tokens;  // [B, 1 + N, C]
  hts::DecisionState<T>* decision = nullptr;
};

/// Rearranges images [B, d, H, W] into patch rows [B*N, P*P*d].
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, const PatchConfig& pc) {
  if (images.rank() != 4 || images.dim(1) != pc.channels || images.dim(2) != pc.image_height ||
      images.dim(3) != pc.image_width)
    throw ConfigError("patch_embed: image batch " + shape_str(images.shape()) +
                      " does not match configured " + std::to_string(pc.channels) + "x" +
                      std::to_string(pc.image_height) + "x" + std::to_string(pc.image_width));
  const int64_t b = images.dim(0), p = pc.patch;
  const int64_t gr = pc.grid_rows(), gc = pc.grid_cols();
  const int64_t pvec = p * p * pc.channels;
  Tensor<T> out = Tensor<T>::zeros({b * gr * gc, pvec});
  const int64_t h = pc.image_height, w = pc.image_width;
  for (int64_t i = 0; i < b; ++i)
    for (int64_t ty = 0; ty < gr; ++ty)
      for (int64_t tx = 0; tx < gc; ++tx) {
        T* dst = out.data() + ((i * gr + ty) * gc + tx) * pvec;
        for (int64_t c = 0; c < pc.channels; ++c)
          for (int64_t y = 0; y < p; ++y)
            for (int64_t x = 0; x < p; ++x)
              *dst++ = images.data()[((i * pc.channels + c) * h + ty * p + y) * w + tx * p + x];
      }
  return out;
}

/// Linear patch projection, prepended class token, learned positional
/// embeddings: images [B, d, H, W] -> tokens [B, N+1, C].
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const PatchConfig& pc, const VitWeights<T>& w,
                      Tape<T>* tape = nullptr) {
  const int64_t b = images.dim(0);
  const int64_t n = pc.num_tokens();
  auto patches = extract_patches(images, pc);
  auto proj = add_bias(matmul(patches, w.patch_w, tape), w.patch_b, tape);
  auto tokens = prepend_token(proj.reshaped({b, n, w.patch_w.dim(1)}), w.cls, tape);
  return add_pos(tokens, w.pos, tape);
}

/// Head-averaged class-token attention row: probs [B, H, S, S] -> [B, S].
template <typename T>
Tensor<T> cls_attn_from_probs(const Tensor<T>& probs, Tape<T>* tape = nullptr) {
  if (probs.rank() != 4) throw ShapeError("cls_attn_from_probs: expected [B,H,S,S]");
  const int64_t b = probs.dim(0), h = probs.dim(1), s = probs.dim(2);
  const bool rec = sureid::detail::recording(tape, {probs.requires_grad()});
  Tensor<T> out = sureid::detail::op_output<T>({b, s}, rec, tape);
  const T invh = T(1) / static_cast<T>(h);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < s; ++j) {
      T acc = T(0);
      for (int64_t hh = 0; hh < h; ++hh) acc += probs.data()[((i * h + hh) * s + 0) * s + j];
      out.data()[i * s + j] = acc * invh;
    }
  if (rec) {
    auto pg = probs.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!pg) return;
      const T invh2 = T(1) / static_cast<T>(h);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < s; ++j) {
          const T g = (*og)[i * s + j] * invh2;
          for (int64_t hh = 0; hh < h; ++hh) (*pg)[((i * h + hh) * s + 0) * s + j] += g;
        }
    });
  }
  return out;
}

template <typename T>
struct BlockResult {
  Tensor<T> tokens;
  Tensor<T> attn_cls;  // defined only when requested
};

/// Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x)). When a decision
/// mask is present the attention rows are renormalized through the
/// decision-masked softmax; with an all-ones mask the output is bit-identical
/// to the unmasked path.
template <typename T>
BlockResult<T> encoder_block(const Tensor<T>& x, const BlockWeights<T>& w, int64_t heads,
                             std::type_identity_t<const Tensor<T>*> keep_mask_full,
                             bool want_attn_cls = false,
                             Tape<T>* tape = nullptr) {
  constexpr T kLnEps = T(1e-6);
  const int64_t dh = x.dim(2) / heads;
  auto h = layer_norm(x, w.ln1_g, w.ln1_b, kLnEps, tape);
  auto q = split_heads(add_bias(matmul(h, w.wq, tape), w.bq, tape), heads, tape);
  auto k = split_heads(add_bias(matmul(h, w.wk, tape), w.bk, tape), heads, tape);
  auto v = split_heads(add_bias(matmul(h, w.wv, tape), w.bv, tape), heads, tape);
  auto scores = bmm(q, k, /*trans_b=*/true, T(1) / std::sqrt(static_cast<T>(dh)), tape);
  auto probs = keep_mask_full ? masked_softmax_rows(scores, *keep_mask_full, tape)
                              : softmax_rows(scores, tape);
  auto ctx = merge_heads(bmm(probs, v, false, T(1), tape), tape);
  auto attn_out = add_bias(matmul(ctx, w.wo, tape), w.bo, tape);
  auto x1 = add(x, attn_out, tape);
  auto h2 = layer_norm(x1, w.ln2_g, w.ln2_b, kLnEps, tape);
  auto mlp = add_bias(
      matmul(gelu(add_bias(matmul(h2, w.fc1_w, tape), w.fc1_b, tape), tape), w.fc2_w, tape),
      w.fc2_b, tape);
  BlockResult<T> res;
  res.tokens = add(x1, mlp, tape);
  if (want_attn_cls) res.attn_cls = cls_attn_from_probs(probs, tape);
  return res;
}

enum class Mode { kTrain, kInfer };

template <typename T>
struct ForwardOptions {
  Mode mode = Mode::kInfer;
  std::mt19937_64* rng = nullptr;  // Gumbel noise source (train mode)
  hts::GumbelMode gumbel = hts::GumbelMode::kHardStraightThrough;
  T gumbel_tau = T(1);
  /// Overrides sampling (train) or top-k selection (infer): one cumulative
  /// binary mask per stage over the original image-token grid.
  const std::vector<Tensor<T>>* forced_stage_masks = nullptr;
  bool want_attn_cls = false;
  /// Final-layer class-attention reweight (training phase only).
  const Tensor<T>* reweight_lambda = nullptr;
};

template <typename T>
struct ForwardResult {
  Tensor<T> feature;  // [B, C] class token after the final norm
  hts::DecisionState<T> decision;
  Tensor<T> attn_cls;
  /// Infer mode: per stage, per image, kept indices on the original grid.
  std::vector<std::vector<std::vector<int64_t>>> kept_per_stage;
  /// Infer mode: image-token count after each stage.
  std::vector<int64_t> tokens_per_stage;
  bool prune_clamped = false;
};

/// The shared backbone forward. In train mode every token participates and
/// sparsification acts through attention masking; in infer mode tokens are
/// physically pruned at each stage.
template <typename T>
ForwardResult<T> forward_features(const Tensor<T>& images, const PatchConfig& pc,
                                  const ModelConfig& mc, const VitWeights<T>& w,
                                  std::type_identity_t<const hts::PredictorWeights<T>*> predictor,
                                  const ForwardOptions<T>& opt, Tape<T>* tape = nullptr) {
  pc.validate();
  mc.validate();
  const int64_t batch = images.dim(0);
  const int64_t n = pc.num_tokens();
  const bool sparsify = mc.sparsify.has_value() && mc.sparsify->num_stages() > 0;
  if (sparsify && !predictor)
    throw ConfigError("forward: sparsify schedule without predictor weights");

  // Forced masks may keep a different number of tokens per image; physical
  // pruning then yields ragged sequences, so such batches run image by image.
  if (opt.mode == Mode::kInfer && sparsify && opt.forced_stage_masks && batch > 1) {
    ForwardResult<T> res;
    res.kept_per_stage.resize(opt.forced_stage_masks->size());
    const int64_t img_elems = images.numel() / batch;
    for (int64_t i = 0; i < batch; ++i) {
      auto one = Tensor<T>::from(
          {1, images.dim(1), images.dim(2), images.dim(3)},
          std::vector<T>(images.data() + i * img_elems, images.data() + (i + 1) * img_elems));
      std::vector<Tensor<T>> masks;
      for (const auto& fm : *opt.forced_stage_masks)
        masks.push_back(
            Tensor<T>::from({1, n}, std::vector<T>(fm.data() + i * n, fm.data() + (i + 1) * n)));
      ForwardOptions<T> sub = opt;
      sub.forced_stage_masks = &masks;
      auto r = forward_features(one, pc, mc, w, predictor, sub, tape);
      if (!res.feature.defined()) res.feature = Tensor<T>::zeros({batch, r.feature.dim(1)});
      std::copy(r.feature.data(), r.feature.data() + r.feature.numel(),
                res.feature.data() + i * r.feature.dim(1));
      for (size_t s = 0; s < r.kept_per_stage.size(); ++s)
        res.kept_per_stage[s].push_back(r.kept_per_stage[s][0]);
      res.tokens_per_stage = r.tokens_per_stage;
    }
    return res;
  }

  ForwardResult<T> res;
  Tensor<T> x = patch_embed(images, pc, w, tape);

  // train-mode mask state
  Tensor<T> cum_mask;       // [B, N] straight-through values
  Tensor<T> cum_mask_full;  // [B, 1 + N], class column fixed at 1
  // infer-mode bookkeeping
  std::vector<std::vector<int64_t>> cur_to_orig;
  if (opt.mode == Mode::kInfer && sparsify) {
    cur_to_orig.assign(static_cast<size_t>(batch), {});
    for (auto& v : cur_to_orig) {
      v.resize(static_cast<size_t>(n));
      std::iota(v.begin(), v.end(), 0);
    }
  }

  int stage = 0;
  for (int layer = 0; layer < mc.depth; ++layer) {
    const bool fires = sparsify && stage < mc.sparsify->num_stages() &&
                       mc.sparsify->stage_layers[static_cast<size_t>(stage)] == layer;
    if (fires) {
      const double ratio = mc.sparsify->stage_ratio(stage);
      if (opt.mode == Mode::kTrain) {
        auto image_tokens = slice_tokens(x, 1, x.dim(1), tape);
        auto pred = hts::predict_keep(image_tokens, cum_mask, *predictor, tape);
        Tensor<T> decision;
        if (opt.forced_stage_masks) {
          decision = (*opt.forced_stage_masks)[static_cast<size_t>(stage)];
        } else {
          if (!opt.rng) throw ContractError("forward: train-mode sparsify needs an rng");
          auto noise = hts::gumbel_noise<T>(pred.logits.shape(), *opt.rng);
          decision = hts::gumbel_sample_from_logits(pred.logits, opt.gumbel_tau, noise,
                                                    opt.gumbel, tape);
        }
        cum_mask = cum_mask.defined() ? hts::update_mask(cum_mask, decision, tape) : decision;
        cum_mask_full = hts::prepend_const_col(cum_mask, T(1), tape);
        res.decision.stage_pi.push_back(pred.pi);
        res.decision.stage_mask.push_back(cum_mask);
      } else {
        // physical pruning among the survivors
        Tensor<T> keep_probs;
        std::vector<std::vector<int64_t>> keep_sets;
        if (opt.forced_stage_masks) {
          const auto& fm = (*opt.forced_stage_masks)[static_cast<size_t>(stage)];
          keep_sets.resize(static_cast<size_t>(batch));
          for (int64_t i = 0; i < batch; ++i)
            for (size_t cpos = 0; cpos < cur_to_orig[static_cast<size_t>(i)].size(); ++cpos)
              if (fm.data()[i * n + cur_to_orig[static_cast<size_t>(i)][cpos]] != T(0))
                keep_sets[static_cast<size_t>(i)].push_back(static_cast<int64_t>(cpos));
          std::vector<std::vector<int64_t>> gather_idx(static_cast<size_t>(batch));
          std::vector<std::vector<int64_t>> new_map(static_cast<size_t>(batch));
          std::vector<std::vector<int64_t>> kept_orig(static_cast<size_t>(batch));
          for (int64_t i = 0; i < batch; ++i) {
            gather_idx[static_cast<size_t>(i)].push_back(0);
            for (int64_t cpos : keep_sets[static_cast<size_t>(i)]) {
              gather_idx[static_cast<size_t>(i)].push_back(cpos + 1);
              const int64_t orig = cur_to_orig[static_cast<size_t>(i)][static_cast<size_t>(cpos)];
              new_map[static_cast<size_t>(i)].push_back(orig);
              kept_orig[static_cast<size_t>(i)].push_back(orig);
            }
          }
          x = gather_tokens(x, gather_idx);
          cur_to_orig = std::move(new_map);
          res.kept_per_stage.push_back(std::move(kept_orig));
        } else {
          auto image_tokens = slice_tokens(x, 1, x.dim(1));
          auto pi = hts::predict_keep_probs(image_tokens, Tensor<T>(), *predictor);
          auto pruned = hts::prune_for_inference(x, pi, ratio, n, &cur_to_orig);
          res.prune_clamped = res.prune_clamped || pruned.clamped;
          x = pruned.tokens;
          cur_to_orig = pruned.kept;
          res.kept_per_stage.push_back(pruned.kept);
        }
        res.tokens_per_stage.push_back(x.dim(1) - 1);
      }
      ++stage;
    }

    const bool want_cls = opt.want_attn_cls && layer == mc.depth - 1;
    const Tensor<T>* mask_ptr =
        (opt.mode == Mode::kTrain && cum_mask_full.defined()) ? &cum_mask_full : nullptr;
    auto block = encoder_block(x, w.blocks[static_cast<size_t>(layer)], mc.heads, mask_ptr,
                               want_cls, tape);
    x = block.tokens;
    if (want_cls) res.attn_cls = block.attn_cls;
  }

  if (opt.reweight_lambda && opt.mode == Mode::kTrain) {
    if (!res.attn_cls.defined())
      throw ContractError("forward: reweight requested without want_attn_cls");
    x = hts::class_attn_reweight(x, res.attn_cls, *opt.reweight_lambda, tape);
  }

  auto normed = layer_norm(x, w.lnf_g, w.lnf_b, T(1e-6), tape);
  res.feature = select_token(normed, 0, tape);
  if (cum_mask.defined()) res.decision.mask = cum_mask;
  return res;
}

}  // namespace sureid::vit
