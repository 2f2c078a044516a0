#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sureid/distill.hpp"
#include "support.hpp"

using namespace sureid;
using namespace sureid::distill;
using testing_support::grad_check;
using testing_support::random_param;
using testing_support::random_tensor;

namespace {

// Hand KL oracle: sum p ln(p/q) over rows, batch mean.
double kl_oracle(const Tensor<double>& p, const Tensor<double>& q) {
  double acc = 0;
  for (int64_t i = 0; i < p.dim(0); ++i)
    for (int64_t j = 0; j < p.dim(1); ++j)
      acc += p.at({i, j}) * std::log(p.at({i, j}) / q.at({i, j}));
  return acc / static_cast<double>(p.dim(0));
}

// Brute-force batch-hard oracle, independent of the library implementation.
double triplet_oracle(const Tensor<double>& f, const std::vector<int>& labels, double margin) {
  const int64_t b = f.dim(0), c = f.dim(1);
  auto dist = [&](int64_t i, int64_t j) {
    double acc = 0;
    for (int64_t l = 0; l < c; ++l) {
      const double d = f.at({i, l}) - f.at({j, l});
      acc += d * d;
    }
    return std::sqrt(acc);
  };
  double total = 0;
  int64_t count = 0;
  for (int64_t i = 0; i < b; ++i) {
    double hp = -1, hn = 1e300;
    for (int64_t j = 0; j < b; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i])
        hp = std::max(hp, dist(i, j));
      else
        hn = std::min(hn, dist(i, j));
    }
    if (hp < 0) continue;
    total += std::max(0.0, hp - hn + margin);
    ++count;
  }
  return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("align_features identity, resample and constant cases") {
  auto x = Tensor<double>::from({1, 4}, {0, 1, 2, 3});
  auto same = align_features(x, 4);
  for (int64_t j = 0; j < 4; ++j) REQUIRE(same.at({0, j}) == x.at({0, j}));

  auto two = align_features(x, 2);
  REQUIRE(two.at({0, 0}) == 0.0);
  REQUIRE(two.at({0, 1}) == 3.0);

  auto c = Tensor<double>::from({1, 3}, {2.5, 2.5, 2.5});
  auto up = align_features(c, 7);
  for (int64_t j = 0; j < 7; ++j) REQUIRE_THAT(up.at({0, j}), Catch::Matchers::WithinAbs(2.5, 1e-12));

  auto single = Tensor<double>::from({1, 1}, {1.25});
  auto ext = align_features(single, 5);
  for (int64_t j = 0; j < 5; ++j) REQUIRE(ext.at({0, j}) == 1.25);
}

TEST_CASE("align_features is exactly linear and preserves monotone sequences") {
  auto g = testing_support::rng(11);
  auto f = random_tensor<double>({2, 9}, g);
  auto h = random_tensor<double>({2, 9}, g);
  const double a = 1.7, b = -0.6;
  auto combo = add(scale(f, a), scale(h, b));
  auto lhs = align_features(combo, 5);
  auto rhs = add(scale(align_features(f, 5), a), scale(align_features(h, 5), b));
  for (int64_t i = 0; i < lhs.numel(); ++i)
    REQUIRE_THAT(lhs.data()[i], Catch::Matchers::WithinAbs(rhs.data()[i], 1e-12));

  auto mono = Tensor<double>::zeros({1, 11});
  double v = -3;
  for (int64_t j = 0; j < 11; ++j) {
    v += std::abs(std::sin(static_cast<double>(j))) + 0.01;
    mono.at({0, j}) = v;
  }
  for (int64_t ct : {3, 7, 15, 40}) {
    auto r = align_features(mono, ct);
    for (int64_t j = 1; j < ct; ++j) REQUIRE(r.at({0, j}) >= r.at({0, j - 1}));
  }
}

TEST_CASE("align_features gradient flows (student-to-teacher path)") {
  auto g = testing_support::rng(13);
  auto x = random_param<double>({3, 6}, g);
  auto w = random_tensor<double>({3, 10}, g);
  auto rep = grad_check(
      {&x},
      [&](Tape<double>* tape) {
        return mean_all(mul(align_features(x, 10, tape), w, tape), tape);
      },
      80, g);
  REQUIRE(rep.max_err <= 1e-4);
}

TEST_CASE("kl loss: zero at equality, nonnegative, matches hand oracle") {
  auto g = testing_support::rng(17);
  auto gs = random_tensor<double>({4, 6}, g);
  REQUIRE_THAT(kl_softened(gs, gs, 1.0).item(), Catch::Matchers::WithinAbs(0.0, 1e-12));

  for (int rep = 0; rep < 20; ++rep) {
    auto a = random_tensor<double>({3, 5}, g, -3.0, 3.0);
    auto b = random_tensor<double>({3, 5}, g, -3.0, 3.0);
    REQUIRE(kl_softened(a, b, 1.0).item() >= 0.0);
  }

  // sigma(gs) = [0.5, 0.5], sigma(gt) = [0.25, 0.75]
  auto s = Tensor<double>::from({1, 2}, {0.0, 0.0});
  auto t = Tensor<double>::from({1, 2}, {0.0, std::log(3.0)});
  auto ps = softmax_rows(s);
  auto pt = softmax_rows(t);
  REQUIRE_THAT(kl_softened(s, t, 1.0).item(),
               Catch::Matchers::WithinAbs(kl_oracle(ps, pt), 1e-12));

  // order switch flips the arguments
  REQUIRE_THAT(kl_logits_loss(s, t, 1.0, KlOrder::kTeacherFirst).item(),
               Catch::Matchers::WithinAbs(kl_oracle(pt, ps), 1e-12));
}

TEST_CASE("kl loss gradient vs finite differences, both argument positions") {
  auto g = testing_support::rng(19);
  auto a = random_param<double>({3, 5}, g);
  auto b = random_param<double>({3, 5}, g);
  auto rep = grad_check(
      {&a, &b},
      [&](Tape<double>* tape) { return kl_softened(a, b, 1.7, tape); }, 100, g);
  REQUIRE(rep.max_err <= 1e-4);
}

TEST_CASE("cls_loss values: uniform logits give ln K, smoothed floor is H(q)") {
  const int64_t k = 7;
  auto logits = Tensor<double>::zeros({1, k});
  std::vector<int> label = {3};
  REQUIRE_THAT(cls_loss(logits, label, 0.1).item(),
               Catch::Matchers::WithinAbs(std::log(static_cast<double>(k)), 1e-12));

  auto l2 = Tensor<double>::zeros({1, 2});
  REQUIRE_THAT(cls_loss(l2, std::vector<int>{0}, 0.1).item(),
               Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));

  // analytic minimum of the smoothed cross entropy: logits = ln q gives H(q),
  // and no logits go below it (oracle: direct entropy computation)
  const double eps = 0.1;
  const double q_t = 1.0 - eps + eps / k;
  const double q_o = eps / k;
  const double floor = -(q_t * std::log(q_t) + (k - 1) * q_o * std::log(q_o));
  auto opt = Tensor<double>::zeros({1, k});
  for (int64_t j = 0; j < k; ++j) opt.at({0, j}) = std::log(j == 3 ? q_t : q_o);
  REQUIRE_THAT(cls_loss(opt, label, eps).item(), Catch::Matchers::WithinAbs(floor, 1e-12));

  auto g = testing_support::rng(23);
  for (int rep = 0; rep < 30; ++rep) {
    auto r = random_tensor<double>({1, k}, g, -8.0, 8.0);
    REQUIRE(cls_loss(r, label, eps).item() >= floor - 1e-12);
  }

  REQUIRE_THROWS_AS(cls_loss(logits, std::vector<int>{9}, 0.1), ContractError);
}

TEST_CASE("cls_loss gradient vs finite differences") {
  auto g = testing_support::rng(29);
  auto logits = random_param<double>({6, 5}, g);
  std::vector<int> labels = {0, 3, 2, 4, 1, 2};
  auto rep = grad_check(
      {&logits},
      [&](Tape<double>* tape) { return cls_loss(logits, labels, 0.1, tape); }, 100, g);
  REQUIRE(rep.max_err <= 1e-4);
}

TEST_CASE("triplet loss trivial cases") {
  auto identical = Tensor<double>::full({4, 3}, 0.5);
  std::vector<int> labels = {0, 0, 1, 1};
  REQUIRE_THAT(triplet_loss(identical, labels, 0.3).item(),
               Catch::Matchers::WithinAbs(0.3, 1e-9));

  // perfectly separated clusters with gap > margin
  auto sep = Tensor<double>::zeros({4, 2});
  sep.at({0, 0}) = 0.0;
  sep.at({1, 0}) = 0.01;
  sep.at({2, 0}) = 10.0;
  sep.at({3, 0}) = 10.01;
  REQUIRE(triplet_loss(sep, labels, 0.3).item() == 0.0);

  std::vector<int> one_id = {5, 5, 5, 5};
  REQUIRE_THROWS_AS(triplet_loss(identical, one_id, 0.3), ContractError);
}

TEST_CASE("triplet loss equals brute-force batch-hard oracle") {
  auto g = testing_support::rng(31);
  std::vector<int> labels = {0, 0, 1, 1, 2, 2, 3, 3};
  for (int rep = 0; rep < 25; ++rep) {
    auto f = random_tensor<double>({8, 5}, g);
    REQUIRE_THAT(triplet_loss(f, labels, 0.3).item(),
                 Catch::Matchers::WithinAbs(triplet_oracle(f, labels, 0.3), 1e-9));
  }
}

TEST_CASE("triplet loss gradient vs finite differences") {
  auto g = testing_support::rng(37);
  auto f = random_param<double>({8, 4}, g);
  std::vector<int> labels = {0, 0, 1, 1, 2, 2, 3, 3};
  auto rep = grad_check(
      {&f},
      [&](Tape<double>* tape) { return triplet_loss(f, labels, 0.3, tape); }, 100, g);
  REQUIRE(rep.max_err <= 1e-3);
}

TEST_CASE("npkd loss vanishes when features and logits already align") {
  auto g = testing_support::rng(41);
  LossWeights<double> w;
  REQUIRE(w.kd_lambda == 0.1);
  auto ft = random_tensor<double>({3, 8}, g);
  auto fs = align_features(ft, 4);  // student equals the aligned teacher
  auto gs = random_tensor<double>({3, 5}, g);
  auto spec = AlignSpec<double>::make(AlignMethod::kInterpolation,
                                      AlignDirection::kTeacherToStudent, 4, 8, g);
  REQUIRE_THAT(npkd_loss(fs, ft, gs, gs, w, spec).item(),
               Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("npkd feature term is quadratic in the gap") {
  auto g = testing_support::rng(43);
  auto ft = random_tensor<double>({2, 6}, g);
  auto base = align_features(ft, 6);
  auto gap = random_tensor<double>({2, 6}, g);
  auto spec = AlignSpec<double>::make(AlignMethod::kInterpolation,
                                      AlignDirection::kTeacherToStudent, 6, 6, g);
  auto f1 = add(base, gap);
  auto f2 = add(base, scale(gap, 2.0));
  const double t1 = feature_alignment_gap(f1, ft, spec).item();
  const double t2 = feature_alignment_gap(f2, ft, spec).item();
  REQUIRE_THAT(t2, Catch::Matchers::WithinRel(4.0 * t1, 1e-9));
}

TEST_CASE("npkd gradient flows through every alignment variant") {
  auto g = testing_support::rng(47);
  LossWeights<double> w;
  for (auto method : {AlignMethod::kInterpolation, AlignMethod::kLinear})
    for (auto dir : {AlignDirection::kTeacherToStudent, AlignDirection::kStudentToTeacher}) {
      auto fs = random_param<double>({4, 6}, g);
      auto gs = random_param<double>({4, 5}, g);
      auto ft = random_tensor<double>({4, 10}, g);
      auto gt = random_tensor<double>({4, 5}, g);
      auto spec = AlignSpec<double>::make(method, dir, 6, 10, g);
      std::vector<Tensor<double>*> params = {&fs, &gs};
      if (method == AlignMethod::kLinear) {
        params.push_back(&spec.proj_w);
        params.push_back(&spec.proj_b);
      }
      auto rep = grad_check(
          params,
          [&](Tape<double>* tape) {
            return npkd_loss(fs, ft, gs, gt, w, spec, KlOrder::kStudentFirst, tape);
          },
          100, g);
      REQUIRE(rep.max_err <= 1e-3);
    }
}

TEST_CASE("total loss arithmetic and ablation composition") {
  LossWeights<double> w;  // alpha=1 beta=1 lambda_ratio=2
  LossParts<double> parts;
  parts.kd = Tensor<double>::from({1}, {0.5});
  parts.ratio = Tensor<double>::from({1}, {0.1});
  parts.cls = Tensor<double>::from({1}, {1.0});
  parts.tri = Tensor<double>::from({1}, {0.3});
  REQUIRE_THAT(total_loss(parts, w).item(), Catch::Matchers::WithinAbs(2.0, 1e-12));

  LossParts<double> zeros;
  zeros.kd = Tensor<double>::from({1}, {0.0});
  zeros.ratio = Tensor<double>::from({1}, {0.0});
  zeros.cls = Tensor<double>::from({1}, {0.0});
  zeros.tri = Tensor<double>::from({1}, {0.0});
  REQUIRE(total_loss(zeros, w).item() == 0.0);

  // small-dataset profile
  LossWeights<double> prof;
  prof.alpha = 2.0;
  REQUIRE_THAT(total_loss(parts, prof).item(), Catch::Matchers::WithinAbs(2.7, 1e-12));

  // ablation subsets compose: id-only and kd-only both work
  LossParts<double> id_only;
  id_only.cls = parts.cls;
  id_only.tri = parts.tri;
  REQUIRE_THAT(total_loss(id_only, w).item(), Catch::Matchers::WithinAbs(1.3, 1e-12));
  LossParts<double> none;
  REQUIRE_THROWS_AS(total_loss(none, w), ContractError);
}

TEST_CASE("classifier head follows the BN-neck contract") {
  auto g = testing_support::rng(53);
  auto head = ClassifierHead<double>::init(6, 4, g);
  auto f = random_tensor<double>({8, 6}, g);
  // teacher-style logits bypass BN entirely
  auto no_bn = head.logits_no_bn(f);
  auto manual = matmul(f, head.w);
  for (int64_t i = 0; i < no_bn.numel(); ++i) REQUIRE(no_bn.data()[i] == manual.data()[i]);
  // student-style logits go through the neck
  auto with_bn = head.logits(f, /*training=*/true);
  bool differs = false;
  for (int64_t i = 0; i < with_bn.numel(); ++i)
    if (with_bn.data()[i] != manual.data()[i]) differs = true;
  REQUIRE(differs);
}
