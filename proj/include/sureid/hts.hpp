#pragma once

// Hierarchical token sparsification: keep/drop prediction, differentiable
// Gumbel sampling, cumulative decision masks, masked attention, class-token
// reweighting, ratio supervision and inference-time hard pruning.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "sureid/errors.hpp"
#include "sureid/tensor.hpp"

namespace sureid::hts {

/// Stage placement and cumulative keep targets p, p^2, p^3, ...
struct SparsifySchedule {
  std::vector<int> stage_layers;  // 0-based encoder layer indices
  double base_ratio = 0.7;

  int num_stages() const { return static_cast<int>(stage_layers.size()); }
  double stage_ratio(int stage) const { return std::pow(base_ratio, stage + 1); }

  void validate(int depth) const {
    if (base_ratio <= 0.0 || base_ratio > 1.0)
      throw ConfigError("sparsify: base ratio must lie in (0, 1]");
    for (size_t i = 0; i < stage_layers.size(); ++i) {
      if (stage_layers[i] < 0 || stage_layers[i] >= depth)
        throw ConfigError("sparsify: stage layer " + std::to_string(stage_layers[i]) +
                          " outside depth " + std::to_string(depth));
      if (i > 0 && stage_layers[i] <= stage_layers[i - 1])
        throw ConfigError("sparsify: stage layers must be strictly increasing");
    }
  }
};

/// Keep/drop predictor: per-token MLP C -> C/2 (GELU) -> 2 with softmax.
template <typename T>
struct PredictorWeights {
  Tensor<T> w1, b1, w2, b2;

  static PredictorWeights init(int64_t dim, std::mt19937_64& rng) {
    PredictorWeights p;
    const int64_t hidden = dim / 2;
    p.w1 = Tensor<T>::trunc_normal({dim, hidden}, rng, T(0.02)).to_param();
    p.b1 = Tensor<T>::param({hidden});
    p.w2 = Tensor<T>::trunc_normal({hidden, 2}, rng, T(0.02)).to_param();
    p.b2 = Tensor<T>::param({2});
    return p;
  }
};

/// Learnable class-attention reweight scalar (Eq. of the final-layer
/// residual), initialized to 0.5.
template <typename T>
struct ReweightParams {
  Tensor<T> lambda = Tensor<T>::param_from({1}, {T(0.5)});
};

/// Per-stage keep probabilities and the cumulative binary decision mask.
/// The mask is elementwise non-increasing across stages: once a token is
/// dropped it never revives.
template <typename T>
struct DecisionState {
  Tensor<T> mask;                     // cumulative [B, N]
  std::vector<Tensor<T>> stage_pi;    // [B, N, 2] per fired stage
  std::vector<Tensor<T>> stage_mask;  // cumulative mask per fired stage
};

/// keep probabilities pi = softmax(MLP(mask * tokens)); column 1 is "keep".
/// Returns both the pre-softmax logits (numerically convenient for Gumbel
/// sampling) and pi itself.
template <typename T>
struct KeepPrediction {
  Tensor<T> logits;  // [B, N, 2]
  Tensor<T> pi;      // [B, N, 2]
};

template <typename T>
KeepPrediction<T> predict_keep(const Tensor<T>& image_tokens, const Tensor<T>& mask,
                               const PredictorWeights<T>& w, Tape<T>* tape = nullptr) {
  Tensor<T> in = mask.defined() ? scale_rows(image_tokens, mask, tape) : image_tokens;
  auto h = gelu(add_bias(matmul(in, w.w1, tape), w.b1, tape), tape);
  auto logits = add_bias(matmul(h, w.w2, tape), w.b2, tape);
  return {logits, softmax_rows(logits, tape)};
}

template <typename T>
Tensor<T> predict_keep_probs(const Tensor<T>& image_tokens, const Tensor<T>& mask,
                             const PredictorWeights<T>& w, Tape<T>* tape = nullptr) {
  return predict_keep(image_tokens, mask, w, tape).pi;
}

/// Standard Gumbel(0,1) noise tensor.
template <typename T>
Tensor<T> gumbel_noise(Shape shape, std::mt19937_64& rng) {
  auto t = Tensor<T>::zeros(std::move(shape));
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double u = std::max(d(rng), 1e-12);
    t.data()[i] = static_cast<T>(-std::log(-std::log(u)));
  }
  return t;
}

enum class GumbelMode {
  kHardStraightThrough,  // forward: one-hot sample; backward: soft relaxation
  kSoft,                 // forward and backward both use the soft relaxation
};

namespace detail_hts {

// Core of the keep/drop sampler, operating in log space (log pi or raw
// predictor logits give identical samples; softmax is shift invariant).
template <typename T>
Tensor<T> gumbel_keep_from_log(const Tensor<T>& log_scores, const Tensor<T>& noise, T tau,
                               GumbelMode mode, Tape<T>* tape) {
  if (tau <= T(0)) throw ContractError("gumbel sample: temperature must be positive");
  if (log_scores.shape() != noise.shape())
    throw ShapeError("gumbel sample: noise shape " + shape_str(noise.shape()) +
                     " vs scores " + shape_str(log_scores.shape()));
  if (log_scores.dim(-1) != 2)
    throw ShapeError("gumbel sample: trailing dim must be 2 (drop/keep)");
  auto perturbed = scale(add(log_scores, noise, tape), T(1) / tau, tape);
  auto soft = select_lastdim(softmax_rows(perturbed, tape), 1, tape);
  if (mode == GumbelMode::kSoft) return soft;
  const int64_t rows = soft.numel();
  std::vector<T> hard(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T z0 = log_scores.data()[2 * r] + noise.data()[2 * r];
    const T z1 = log_scores.data()[2 * r + 1] + noise.data()[2 * r + 1];
    hard[static_cast<size_t>(r)] = z1 >= z0 ? T(1) : T(0);
  }
  return straight_through(soft, hard, tape);
}

}  // namespace detail_hts

/// Hard one-hot keep decision D sampled from pi with the Gumbel
/// reparameterization; the expectation of D equals pi[..,1] exactly.
/// Straight-through gradients flow through the soft relaxation.
template <typename T>
Tensor<T> gumbel_sample(const Tensor<T>& pi, T tau, const Tensor<T>& noise,
                        GumbelMode mode = GumbelMode::kHardStraightThrough,
                        Tape<T>* tape = nullptr) {
  return detail_hts::gumbel_keep_from_log(log_elem(pi, tape), noise, tau, mode, tape);
}

/// Same sampler fed with pre-softmax predictor logits (numerically stable
/// and differentiable everywhere; the sample distribution is identical).
template <typename T>
Tensor<T> gumbel_sample_from_logits(const Tensor<T>& logits, T tau, const Tensor<T>& noise,
                                    GumbelMode mode = GumbelMode::kHardStraightThrough,
                                    Tape<T>* tape = nullptr) {
  return detail_hts::gumbel_keep_from_log(logits, noise, tau, mode, tape);
}

/// Cumulative mask update: once dropped, never revived.
template <typename T>
Tensor<T> update_mask(const Tensor<T>& cumulative, const Tensor<T>& decision,
                      Tape<T>* tape = nullptr) {
  return mul(cumulative, decision, tape);
}

/// mask[..., N] -> [..., 1 + N] with a constant column prepended (the class
/// token's decision, always kept).
template <typename T>
Tensor<T> prepend_const_col(const Tensor<T>& m, T value, Tape<T>* tape = nullptr) {
  const int64_t n = m.dim(-1);
  const int64_t rows = m.numel() / n;
  Shape out_shape = m.shape();
  out_shape.back() = n + 1;
  const bool rec = sureid::detail::recording(tape, {m.requires_grad()});
  Tensor<T> out = sureid::detail::op_output<T>(std::move(out_shape), rec, tape);
  for (int64_t r = 0; r < rows; ++r) {
    out.data()[r * (n + 1)] = value;
    std::copy(m.data() + r * n, m.data() + (r + 1) * n, out.data() + r * (n + 1) + 1);
  }
  if (rec) {
    auto mg = m.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!mg) return;
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j) (*mg)[r * n + j] += (*og)[r * (n + 1) + 1 + j];
    });
  }
  return out;
}

/// Decision-masked attention over one sequence: the keep mask covers image
/// tokens only; the class token (position 0) is implicitly kept. Computes
/// A = Q K^T / sqrt(d), renormalizes rows with dropped columns removed
/// (diagonal always kept) and applies the result to V.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Tensor<T>& keep_image, Tape<T>* tape = nullptr) {
  if (q.rank() < 2) throw ShapeError("masked_attention: rank >= 2 expected");
  const int64_t s = q.dim(-2);
  if (keep_image.dim(-1) != s - 1)
    throw ShapeError("masked_attention: keep mask " + shape_str(keep_image.shape()) +
                     " must cover the " + std::to_string(s - 1) + " image tokens");
  const T alpha = T(1) / std::sqrt(static_cast<T>(q.dim(-1)));
  auto scores = bmm(q, k, /*trans_b=*/true, alpha, tape);
  auto m = prepend_const_col(keep_image, T(1), tape);
  auto probs = masked_softmax_rows(scores, m, tape);
  return bmm(probs, v, false, T(1), tape);
}

/// x[B, S, C] scaled per token by r[B, S] except position 0, which maps to
/// zero (used for the residual reweight term where the class token passes
/// through unchanged).
template <typename T>
Tensor<T> scale_rows_skip_first(const Tensor<T>& x, const Tensor<T>& r, Tape<T>* tape = nullptr) {
  if (x.rank() != 3 || r.numel() != x.dim(0) * x.dim(1))
    throw ContractError("scale_rows_skip_first: attention length " + shape_str(r.shape()) +
                        " does not match tokens " + shape_str(x.shape()));
  const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
  const bool rec = sureid::detail::recording(tape, {x.requires_grad(), r.requires_grad()});
  Tensor<T> out = sureid::detail::op_output<T>(x.shape(), rec, tape);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t t = 1; t < s; ++t) {
      const T sc = r.data()[i * s + t];
      for (int64_t j = 0; j < c; ++j)
        out.data()[(i * s + t) * c + j] = x.data()[(i * s + t) * c + j] * sc;
    }
  if (rec) {
    auto xd = x.data_ptr(); auto xg = x.grad_ptr();
    auto rd = r.data_ptr(); auto rg = r.grad_ptr();
    auto og = out.grad_ptr();
    tape->record([=]() {
      for (int64_t i = 0; i < b; ++i)
        for (int64_t t = 1; t < s; ++t) {
          const T sc = (*rd)[i * s + t];
          const int64_t base = (i * s + t) * c;
          if (xg)
            for (int64_t j = 0; j < c; ++j) (*xg)[base + j] += (*og)[base + j] * sc;
          if (rg) {
            T acc = T(0);
            for (int64_t j = 0; j < c; ++j) acc += (*og)[base + j] * (*xd)[base + j];
            (*rg)[i * s + t] += acc;
          }
        }
    });
  }
  return out;
}

/// Final-layer residual reweight: image tokens are scaled by their class
/// attention score, the class token passes through unchanged, and the scaled
/// sequence is added back through the learnable lambda. Training phase only.
template <typename T>
Tensor<T> class_attn_reweight(const Tensor<T>& x, const Tensor<T>& attn_cls,
                              const Tensor<T>& lambda, Tape<T>* tape = nullptr) {
  auto scaled = scale_rows_skip_first(x, attn_cls, tape);
  return add(x, scale_tensor(scaled, lambda, tape), tape);
}

/// Keep-ratio supervision: L = (1/B) sum_b sum_j (p^j - mean_i mask_i)^2
/// over the fired stages, with targets taken from the schedule.
template <typename T>
Tensor<T> ratio_loss(const std::vector<Tensor<T>>& stage_masks, const SparsifySchedule& schedule,
                     Tape<T>* tape = nullptr) {
  if (stage_masks.empty()) throw ContractError("ratio_loss: no stage masks");
  if (static_cast<int>(stage_masks.size()) != schedule.num_stages())
    throw ContractError("ratio_loss: " + std::to_string(stage_masks.size()) + " masks vs " +
                        std::to_string(schedule.num_stages()) + " schedule stages");
  const int64_t batch = stage_masks[0].dim(0);
  Tensor<T> acc;
  for (int s = 0; s < schedule.num_stages(); ++s) {
    auto per_image = mean_lastdim(stage_masks[static_cast<size_t>(s)], tape);
    auto diff = add_scalar(per_image, -static_cast<T>(schedule.stage_ratio(s)), tape);
    auto ss = sum_all(mul(diff, diff, tape), tape);
    acc = acc.defined() ? add(acc, ss, tape) : ss;
  }
  return scale(acc, T(1) / static_cast<T>(batch), tape);
}

/// Inference-time hard pruning: keeps exactly ceil(stage_ratio * n_original)
/// image tokens with the largest keep probability among the survivors (ties
/// broken toward the lower index), plus the class token. Sequence order is
/// preserved. Returns the packed tokens and, per image, the kept indices in
/// the coordinate system given by `current_to_orig` (or current positions
/// when that map is null).
template <typename T>
struct PruneResult {
  Tensor<T> tokens;                               // [B, 1 + kept, C]
  std::vector<std::vector<int64_t>> kept;         // per image, ascending
  bool clamped = false;                           // requested more than survived
};

template <typename T>
PruneResult<T> prune_for_inference(const Tensor<T>& tokens, const Tensor<T>& pi,
                                   double stage_ratio, int64_t n_original,
                                   const std::vector<std::vector<int64_t>>* current_to_orig =
                                       nullptr) {
  if (tokens.rank() != 3) throw ShapeError("prune: tokens must be [B,S,C]");
  const int64_t b = tokens.dim(0);
  const int64_t n_cur = tokens.dim(1) - 1;  // minus class token
  if (pi.rank() != 3 || pi.dim(0) != b || pi.dim(1) != n_cur || pi.dim(2) != 2)
    throw ShapeError("prune: pi " + shape_str(pi.shape()) + " vs tokens " +
                     shape_str(tokens.shape()));
  int64_t keep_count =
      static_cast<int64_t>(std::ceil(stage_ratio * static_cast<double>(n_original)));
  PruneResult<T> res;
  if (keep_count > n_cur) {
    keep_count = n_cur;
    res.clamped = true;
  }
  std::vector<std::vector<int64_t>> gather_idx(static_cast<size_t>(b));
  res.kept.resize(static_cast<size_t>(b));
  std::vector<int64_t> order(static_cast<size_t>(n_cur));
  for (int64_t i = 0; i < b; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const T* keep_p = pi.data() + i * n_cur * 2;
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t c) {
      return keep_p[2 * a + 1] > keep_p[2 * c + 1];  // stable: ties keep lower index first
    });
    std::vector<int64_t> sel(order.begin(), order.begin() + keep_count);
    std::sort(sel.begin(), sel.end());
    auto& gi = gather_idx[static_cast<size_t>(i)];
    gi.push_back(0);  // class token
    auto& kept = res.kept[static_cast<size_t>(i)];
    for (int64_t t : sel) {
      gi.push_back(t + 1);
      kept.push_back(current_to_orig ? (*current_to_orig)[static_cast<size_t>(i)]
                                                         [static_cast<size_t>(t)]
                                     : t);
    }
  }
  res.tokens = gather_tokens(tokens, gather_idx);
  return res;
}

}  // namespace sureid::hts
