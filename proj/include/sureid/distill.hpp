#pragma once

// NPKD losses and the full training objective: BN-neck classifier logits,
// temperature KL, non-parametric interpolation feature alignment, ReID
// classification / triplet losses and their weighted sum.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sureid/errors.hpp"
#include "sureid/tensor.hpp"

namespace sureid::distill {

/// Loss-term weights. alpha scales the distillation block, beta the ReID
/// block; the small-dataset profile uses alpha=2, beta=1.
template <typename T>
struct LossWeights {
  T alpha = T(1);
  T beta = T(1);
  T lambda_ratio = T(2);
  T kd_lambda = T(0.1);
  T temperature = T(1);
};

enum class AlignMethod { kInterpolation, kLinear };
enum class AlignDirection { kTeacherToStudent, kStudentToTeacher };
enum class KlOrder { kStudentFirst, kTeacherFirst };

/// BN-neck classifier head: triplet loss runs on the raw feature, the
/// classifier (and retrieval) on the post-BN feature. The projection has no
/// bias. Teacher logits at distillation time skip the BN.
template <typename T>
struct ClassifierHead {
  Tensor<T> bn_gamma, bn_beta;
  BatchNormState<T> bn_state;
  Tensor<T> w;  // [C, K]

  static ClassifierHead init(int64_t dim, int64_t num_classes, std::mt19937_64& rng) {
    ClassifierHead h;
    h.bn_gamma = Tensor<T>::full({dim}, T(1)).to_param();
    h.bn_beta = Tensor<T>::param({dim});
    h.bn_state = {Tensor<T>::zeros({dim}), Tensor<T>::full({dim}, T(1))};
    h.w = Tensor<T>::trunc_normal({dim, num_classes}, rng, T(0.02)).to_param();
    return h;
  }

  /// Post-BN feature (training mode updates running statistics).
  Tensor<T> neck(const Tensor<T>& f, bool training, Tape<T>* tape = nullptr) {
    return batch_norm(f, bn_gamma, bn_beta, bn_state, training, T(0.1), T(1e-5), tape);
  }

  /// Student-style logits g = W * BN(f).
  Tensor<T> logits(const Tensor<T>& f, bool training, Tape<T>* tape = nullptr) {
    return matmul(neck(f, training, tape), w, tape);
  }

  /// Teacher-style distillation logits, no BN.
  Tensor<T> logits_no_bn(const Tensor<T>& f, Tape<T>* tape = nullptr) const {
    return matmul(f, w, tape);
  }
};

/// Treats the C_from values of each row as samples at equispaced positions
/// on [0,1] and linearly resamples them at C_to positions. Exactly linear in
/// its input; the identity when C_from == C_to; constant extension for
/// C_from == 1.
template <typename T>
Tensor<T> align_features(const Tensor<T>& x, int64_t c_to, Tape<T>* tape = nullptr) {
  if (x.rank() != 2 || c_to < 1)
    throw ShapeError("align_features: expected [B,C] and C_to >= 1, got " +
                     shape_str(x.shape()));
  const int64_t b = x.dim(0), c_from = x.dim(1);
  const bool rec = sureid::detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = sureid::detail::op_output<T>({b, c_to}, rec, tape);

  // resample weights shared across rows: out_k = (1-w_k) x[j_k] + w_k x[j_k+1]
  std::vector<int64_t> j0(static_cast<size_t>(c_to));
  std::vector<T> w(static_cast<size_t>(c_to));
  for (int64_t k = 0; k < c_to; ++k) {
    double pos = 0.0;
    if (c_from > 1 && c_to > 1)
      pos = static_cast<double>(k) * static_cast<double>(c_from - 1) /
            static_cast<double>(c_to - 1);
    int64_t j = static_cast<int64_t>(pos);
    if (j >= c_from - 1) j = c_from > 1 ? c_from - 2 : 0;
    j0[static_cast<size_t>(k)] = j;
    w[static_cast<size_t>(k)] = c_from > 1 ? static_cast<T>(pos - static_cast<double>(j)) : T(0);
  }
  for (int64_t i = 0; i < b; ++i) {
    const T* row = x.data() + i * c_from;
    T* orow = out.data() + i * c_to;
    for (int64_t k = 0; k < c_to; ++k) {
      const int64_t j = j0[static_cast<size_t>(k)];
      const T wk = w[static_cast<size_t>(k)];
      orow[k] = wk == T(0) ? row[j] : (T(1) - wk) * row[j] + wk * row[j + 1];
    }
  }
  if (rec) {
    auto xg = x.grad_ptr(); auto og = out.grad_ptr();
    auto j0s = std::make_shared<std::vector<int64_t>>(std::move(j0));
    auto ws = std::make_shared<std::vector<T>>(std::move(w));
    tape->record([=]() {
      if (!xg) return;
      for (int64_t i = 0; i < b; ++i) {
        const T* g = og->data() + i * c_to;
        T* gx = xg->data() + i * c_from;
        for (int64_t k = 0; k < c_to; ++k) {
          const int64_t j = (*j0s)[static_cast<size_t>(k)];
          const T wk = (*ws)[static_cast<size_t>(k)];
          gx[j] += g[k] * (T(1) - wk);
          if (wk != T(0)) gx[j + 1] += g[k] * wk;
        }
      }
    });
  }
  return out;
}

/// KL(softmax(a/T) || softmax(b/T)), mean over the batch. Gradients flow to
/// both arguments when they carry them (the frozen teacher side never does).
template <typename T>
Tensor<T> kl_softened(const Tensor<T>& a, const Tensor<T>& b, T temp, Tape<T>* tape = nullptr) {
  if (a.shape() != b.shape() || a.rank() != 2)
    throw ShapeError("kl_softened: logits shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int64_t batch = a.dim(0), k = a.dim(1);
  const bool rec = sureid::detail::recording(tape, {a.requires_grad(), b.requires_grad()});
  Tensor<T> out = sureid::detail::op_output<T>({1}, rec, tape);

  auto log_softmax_row = [k, temp](const T* row, T* dst) {
    T mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (int64_t j = 0; j < k; ++j) denom += std::exp((row[j] - mx) / temp);
    const T lse = std::log(denom);
    for (int64_t j = 0; j < k; ++j) dst[j] = (row[j] - mx) / temp - lse;
  };

  auto log_p = std::make_shared<std::vector<T>>(static_cast<size_t>(batch * k));
  auto log_q = std::make_shared<std::vector<T>>(static_cast<size_t>(batch * k));
  auto row_kl = std::make_shared<std::vector<T>>(static_cast<size_t>(batch));
  T acc = T(0);
  for (int64_t i = 0; i < batch; ++i) {
    log_softmax_row(a.data() + i * k, log_p->data() + i * k);
    log_softmax_row(b.data() + i * k, log_q->data() + i * k);
    T kl = T(0);
    for (int64_t j = 0; j < k; ++j) {
      const T lp = (*log_p)[i * k + j];
      kl += std::exp(lp) * (lp - (*log_q)[i * k + j]);
    }
    (*row_kl)[static_cast<size_t>(i)] = kl;
    acc += kl;
  }
  out.data()[0] = acc / static_cast<T>(batch);

  if (rec) {
    auto ag = a.grad_ptr(); auto bg = b.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      const T go = (*og)[0] / (static_cast<T>(batch) * temp);
      for (int64_t i = 0; i < batch; ++i) {
        const T kl = (*row_kl)[static_cast<size_t>(i)];
        for (int64_t j = 0; j < k; ++j) {
          const T p = std::exp((*log_p)[i * k + j]);
          if (ag) (*ag)[i * k + j] += go * p * (((*log_p)[i * k + j] - (*log_q)[i * k + j]) - kl);
          if (bg) (*bg)[i * k + j] += go * (std::exp((*log_q)[i * k + j]) - p);
        }
      }
    });
  }
  return out;
}

/// Logits distillation term with a configurable argument order; the default
/// puts the student first with the (frozen) teacher as target.
template <typename T>
Tensor<T> kl_logits_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, T temp,
                         KlOrder order = KlOrder::kStudentFirst, Tape<T>* tape = nullptr) {
  return order == KlOrder::kStudentFirst
             ? kl_softened(student_logits, teacher_logits, temp, tape)
             : kl_softened(teacher_logits, student_logits, temp, tape);
}

/// Alignment configuration of the feature-distillation term. The linear
/// variants carry a learnable projector trained jointly on the student side.
template <typename T>
struct AlignSpec {
  AlignMethod method = AlignMethod::kInterpolation;
  AlignDirection direction = AlignDirection::kTeacherToStudent;
  Tensor<T> proj_w, proj_b;  // defined only for kLinear

  static AlignSpec make(AlignMethod method, AlignDirection direction, int64_t c_student,
                        int64_t c_teacher, std::mt19937_64& rng) {
    AlignSpec a;
    a.method = method;
    a.direction = direction;
    if (method == AlignMethod::kLinear) {
      const int64_t from = direction == AlignDirection::kTeacherToStudent ? c_teacher : c_student;
      const int64_t to = direction == AlignDirection::kTeacherToStudent ? c_student : c_teacher;
      a.proj_w = Tensor<T>::trunc_normal({from, to}, rng, T(0.02)).to_param();
      a.proj_b = Tensor<T>::param({to});
    }
    return a;
  }
};

/// Mean squared feature gap || f_s' - f_t' ||^2 after alignment (per sample,
/// batch mean). The teacher feature must arrive detached.
template <typename T>
Tensor<T> feature_alignment_gap(const Tensor<T>& f_student, const Tensor<T>& f_teacher,
                                AlignSpec<T>& align, Tape<T>* tape = nullptr) {
  const int64_t batch = f_student.dim(0);
  Tensor<T> lhs, rhs;
  if (align.direction == AlignDirection::kTeacherToStudent) {
    lhs = f_student;
    rhs = align.method == AlignMethod::kInterpolation
              ? align_features(f_teacher, f_student.dim(1), tape)
              : add_bias(matmul(f_teacher, align.proj_w, tape), align.proj_b, tape);
  } else {
    lhs = align.method == AlignMethod::kInterpolation
              ? align_features(f_student, f_teacher.dim(1), tape)
              : add_bias(matmul(f_student, align.proj_w, tape), align.proj_b, tape);
    rhs = f_teacher;
  }
  auto d = sub(lhs, rhs, tape);
  return scale(sum_all(mul(d, d, tape), tape), T(1) / static_cast<T>(batch), tape);
}

/// Eq-style NPKD loss: kd_lambda * KL + feature alignment gap.
template <typename T>
Tensor<T> npkd_loss(const Tensor<T>& f_student, const Tensor<T>& f_teacher,
                    const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                    const LossWeights<T>& w, AlignSpec<T>& align,
                    KlOrder order = KlOrder::kStudentFirst, Tape<T>* tape = nullptr) {
  auto kl = kl_logits_loss(student_logits, teacher_logits, w.temperature, order, tape);
  auto feat = feature_alignment_gap(f_student, f_teacher, align, tape);
  return add(scale(kl, w.kd_lambda, tape), feat, tape);
}

/// Cross entropy with label smoothing (epsilon spread uniformly).
template <typename T>
Tensor<T> cls_loss(const Tensor<T>& logits, const std::vector<int>& labels, T epsilon = T(0.1),
                   Tape<T>* tape = nullptr) {
  if (logits.rank() != 2 || static_cast<int64_t>(labels.size()) != logits.dim(0))
    throw ShapeError("cls_loss: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const int64_t batch = logits.dim(0), k = logits.dim(1);
  for (int y : labels)
    if (y < 0 || y >= k)
      throw ContractError("cls_loss: label " + std::to_string(y) + " outside [0," +
                          std::to_string(k) + ")");
  const bool rec = sureid::detail::recording(tape, {logits.requires_grad()});
  Tensor<T> out = sureid::detail::op_output<T>({1}, rec, tape);
  auto log_p = std::make_shared<std::vector<T>>(static_cast<size_t>(batch * k));
  T acc = T(0);
  for (int64_t i = 0; i < batch; ++i) {
    const T* row = logits.data() + i * k;
    T mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (int64_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const T lse = std::log(denom);
    T row_loss = T(0);
    for (int64_t j = 0; j < k; ++j) {
      const T lp = row[j] - mx - lse;
      (*log_p)[i * k + j] = lp;
      const T q = epsilon / static_cast<T>(k) +
                  (j == labels[static_cast<size_t>(i)] ? T(1) - epsilon : T(0));
      row_loss -= q * lp;
    }
    acc += row_loss;
  }
  out.data()[0] = acc / static_cast<T>(batch);
  if (rec) {
    auto lg = logits.grad_ptr(); auto og = out.grad_ptr();
    auto lbl = std::make_shared<std::vector<int>>(labels);
    tape->record([=]() {
      if (!lg) return;
      const T go = (*og)[0] / static_cast<T>(batch);
      for (int64_t i = 0; i < batch; ++i)
        for (int64_t j = 0; j < k; ++j) {
          const T q = epsilon / static_cast<T>(k) +
                      (j == (*lbl)[static_cast<size_t>(i)] ? T(1) - epsilon : T(0));
          (*lg)[i * k + j] += go * (std::exp((*log_p)[i * k + j]) - q);
        }
    });
  }
  return out;
}

/// Batch-hard triplet loss with Euclidean distances: per anchor, hardest
/// positive minus hardest negative plus margin, hinged at zero, mean over
/// anchors that have at least one positive. A batch with a single identity
/// has no negatives and is rejected.
template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& features, const std::vector<int>& labels,
                       T margin = T(0.3), Tape<T>* tape = nullptr) {
  if (features.rank() != 2 || static_cast<int64_t>(labels.size()) != features.dim(0))
    throw ShapeError("triplet_loss: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const int64_t b = features.dim(0), c = features.dim(1);
  bool has_negative = false;
  for (size_t i = 1; i < labels.size(); ++i)
    if (labels[i] != labels[0]) has_negative = true;
  if (!has_negative)
    throw ContractError("triplet_loss: batch holds a single identity, no negatives exist");

  constexpr T kEps = T(1e-12);
  std::vector<T> dist(static_cast<size_t>(b * b), T(0));
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = i + 1; j < b; ++j) {
      T acc = T(0);
      for (int64_t l = 0; l < c; ++l) {
        const T d = features.data()[i * c + l] - features.data()[j * c + l];
        acc += d * d;
      }
      const T d = std::sqrt(acc + kEps);
      dist[static_cast<size_t>(i * b + j)] = d;
      dist[static_cast<size_t>(j * b + i)] = d;
    }

  struct AnchorPick {
    int64_t pos = -1, neg = -1;
    bool active = false;  // hinge engaged
  };
  std::vector<AnchorPick> picks(static_cast<size_t>(b));
  T acc = T(0);
  int64_t counted = 0;
  for (int64_t i = 0; i < b; ++i) {
    T hardest_pos = T(-1), hardest_neg = T(0);
    int64_t pos = -1, neg = -1;
    for (int64_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const T d = dist[static_cast<size_t>(i * b + j)];
      if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
        if (d > hardest_pos) {
          hardest_pos = d;
          pos = j;
        }
      } else if (neg < 0 || d < hardest_neg) {
        hardest_neg = d;
        neg = j;
      }
    }
    if (pos < 0) continue;  // anchor has no positive in this batch
    ++counted;
    const T h = hardest_pos - hardest_neg + margin;
    picks[static_cast<size_t>(i)] = {pos, neg, h > T(0)};
    if (h > T(0)) acc += h;
  }
  if (counted == 0) throw ContractError("triplet_loss: no anchor has a positive pair");

  const bool rec = sureid::detail::recording(tape, {features.requires_grad()});
  Tensor<T> out = sureid::detail::op_output<T>({1}, rec, tape);
  out.data()[0] = acc / static_cast<T>(counted);
  if (rec) {
    auto fd = features.data_ptr(); auto fg = features.grad_ptr(); auto og = out.grad_ptr();
    auto pk = std::make_shared<std::vector<AnchorPick>>(std::move(picks));
    auto dm = std::make_shared<std::vector<T>>(std::move(dist));
    tape->record([=]() {
      if (!fg) return;
      const T go = (*og)[0] / static_cast<T>(counted);
      auto add_pair_grad = [&](int64_t i, int64_t j, T sign) {
        // d ||f_i - f_j|| / d f = (f_i - f_j) / d, symmetric for f_j
        const T d = (*dm)[static_cast<size_t>(i * b + j)];
        const T s = sign * go / d;
        for (int64_t l = 0; l < c; ++l) {
          const T diff = (*fd)[i * c + l] - (*fd)[j * c + l];
          (*fg)[i * c + l] += s * diff;
          (*fg)[j * c + l] -= s * diff;
        }
      };
      for (int64_t i = 0; i < b; ++i) {
        const auto& p = (*pk)[static_cast<size_t>(i)];
        if (!p.active) continue;
        add_pair_grad(i, p.pos, T(1));
        add_pair_grad(i, p.neg, T(-1));
      }
    });
  }
  return out;
}

/// The weighted total: alpha * (L_KD + lambda_ratio * L_ratio)
///                     + beta * (L_cls + L_tri).
/// Undefined parts are treated as zero so ablation subsets compose.
template <typename T>
struct LossParts {
  Tensor<T> kd, ratio, cls, tri;
};

template <typename T>
Tensor<T> total_loss(const LossParts<T>& parts, const LossWeights<T>& w, Tape<T>* tape = nullptr) {
  Tensor<T> kd_block;
  if (parts.kd.defined()) kd_block = parts.kd;
  if (parts.ratio.defined()) {
    auto r = scale(parts.ratio, w.lambda_ratio, tape);
    kd_block = kd_block.defined() ? add(kd_block, r, tape) : r;
  }
  Tensor<T> id_block;
  if (parts.cls.defined()) id_block = parts.cls;
  if (parts.tri.defined())
    id_block = id_block.defined() ? add(id_block, parts.tri, tape) : parts.tri;

  Tensor<T> total;
  if (kd_block.defined()) total = scale(kd_block, w.alpha, tape);
  if (id_block.defined()) {
    auto ib = scale(id_block, w.beta, tape);
    total = total.defined() ? add(total, ib, tape) : ib;
  }
  if (!total.defined()) throw ContractError("total_loss: no loss parts provided");
  return total;
}

}  // namespace sureid::distill
