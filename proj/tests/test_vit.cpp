#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sureid/model.hpp"
#include "sureid/vit.hpp"
#include "support.hpp"

using namespace sureid;
using testing_support::grad_check;
using testing_support::random_tensor;

namespace {

vit::PatchConfig small_patch() {
  vit::PatchConfig pc;
  pc.image_height = 64;
  pc.image_width = 32;
  pc.patch = 16;
  return pc;
}

vit::ModelConfig small_model(bool sparsify) {
  vit::ModelConfig mc;
  mc.dim = 16;
  mc.depth = 4;
  mc.heads = 4;
  mc.mlp_ratio = 2;
  mc.num_classes = 5;
  if (sparsify) mc.sparsify = hts::SparsifySchedule{{2, 3}, 0.7};
  return mc;
}

}  // namespace

TEST_CASE("token count formula") {
  vit::PatchConfig pc;
  pc.image_height = 256;
  pc.image_width = 128;
  pc.patch = 16;
  REQUIRE(pc.num_tokens() == 128);

  REQUIRE(small_patch().num_tokens() == 8);

  vit::PatchConfig bad = small_patch();
  bad.patch = 24;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("patch_embed with zero image and zero projection yields positional embeddings") {
  auto pc = small_patch();
  auto g = testing_support::rng(3);
  vit::ModelConfig mc = small_model(false);
  auto w = vit::VitWeights<double>::init(pc, mc, g);
  w.patch_w.fill(0.0);
  w.patch_b.fill(0.0);
  // give pos and cls recognizable values
  for (int64_t i = 0; i < w.pos.numel(); ++i) w.pos.data()[i] = 0.01 * static_cast<double>(i);
  for (int64_t i = 0; i < w.cls.numel(); ++i) w.cls.data()[i] = -1.0;

  auto images = Tensor<double>::zeros({2, 3, 64, 32});
  auto tokens = vit::patch_embed(images, pc, w);
  REQUIRE(tokens.shape() == Shape{2, 9, 16});
  for (int64_t b = 0; b < 2; ++b) {
    for (int64_t c = 0; c < 16; ++c)
      REQUIRE(tokens.at({b, 0, c}) == -1.0 + w.pos.at({0, c}));
    for (int64_t t = 1; t < 9; ++t)
      for (int64_t c = 0; c < 16; ++c) REQUIRE(tokens.at({b, t, c}) == w.pos.at({t, c}));
  }
}

TEST_CASE("encoder block with all-ones decision mask is bit-identical to unmasked") {
  auto g = testing_support::rng(5);
  auto bw = vit::BlockWeights<double>::init(16, 2, g);
  auto x = random_tensor<double>({2, 9, 16}, g);
  auto ones = Tensor<double>::full({2, 9}, 1.0);
  auto masked = vit::encoder_block(x, bw, 4, &ones);
  auto plain = vit::encoder_block(x, bw, 4, nullptr);
  for (int64_t i = 0; i < masked.tokens.numel(); ++i)
    REQUIRE(masked.tokens.data()[i] == plain.tokens.data()[i]);
}

TEST_CASE("single-token sequence: attention over one key is the identity mixing") {
  auto g = testing_support::rng(7);
  auto bw = vit::BlockWeights<double>::init(16, 2, g);
  auto x = random_tensor<double>({1, 1, 16}, g);
  auto res = vit::encoder_block(x, bw, 4, nullptr, /*want_attn_cls=*/true);
  REQUIRE(res.attn_cls.numel() == 1);
  REQUIRE(res.attn_cls.data()[0] == 1.0);
}

TEST_CASE("attn_cls sums to one over the keys") {
  auto g = testing_support::rng(9);
  auto bw = vit::BlockWeights<double>::init(16, 2, g);
  auto x = random_tensor<double>({2, 9, 16}, g);
  auto res = vit::encoder_block(x, bw, 4, nullptr, true);
  for (int64_t b = 0; b < 2; ++b) {
    double s = 0;
    for (int64_t j = 0; j < 9; ++j) s += res.attn_cls.at({b, j});
    REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-9));
  }
}

TEST_CASE("gradient through one encoder block vs finite differences") {
  auto g = testing_support::rng(11);
  auto bw = vit::BlockWeights<double>::init(8, 2, g);
  auto x = testing_support::random_param<double>({1, 4, 8}, g);
  auto w = random_tensor<double>({1, 4, 8}, g);
  std::vector<Tensor<double>*> params = {&x, &bw.wq, &bw.bq, &bw.wo, &bw.fc1_w, &bw.ln1_g};
  auto rep = grad_check(
      params,
      [&](Tape<double>* tape) {
        auto out = vit::encoder_block(x, bw, 2, nullptr, false, tape);
        return mean_all(mul(out.tokens, w, tape), tape);
      },
      150, g);
  REQUIRE(rep.max_err <= 1e-3);
}

TEST_CASE("forward without schedule: train and infer agree exactly") {
  auto pc = small_patch();
  auto mc = small_model(false);
  auto m = ReidModel<double>::init(pc, mc, 99);
  auto g = testing_support::rng(13);
  auto images = random_tensor<double>({2, 3, 64, 32}, g, 0.0, 1.0);

  vit::ForwardOptions<double> train_opt;
  train_opt.mode = vit::Mode::kTrain;
  auto a = vit::forward_features(images, pc, mc, m.backbone, nullptr, train_opt);

  vit::ForwardOptions<double> infer_opt;
  auto b = vit::forward_features(images, pc, mc, m.backbone, nullptr, infer_opt);

  REQUIRE(a.feature.shape() == Shape{2, 16});
  for (int64_t i = 0; i < a.feature.numel(); ++i)
    REQUIRE(a.feature.data()[i] == b.feature.data()[i]);
}

TEST_CASE("infer-mode token counts follow the ceil schedule") {
  auto pc = small_patch();
  auto mc = small_model(true);  // stages at layers 2,3 with p=0.7, N=8
  auto m = ReidModel<double>::init(pc, mc, 7);
  auto g = testing_support::rng(17);
  auto images = random_tensor<double>({3, 3, 64, 32}, g, 0.0, 1.0);
  vit::ForwardOptions<double> opt;
  auto r = vit::forward_features(images, pc, mc, m.backbone, &m.predictor, opt);
  REQUIRE(r.tokens_per_stage == std::vector<int64_t>{6, 4});
  REQUIRE(r.kept_per_stage.size() == 2);
  for (const auto& per_image : r.kept_per_stage[1]) {
    REQUIRE(per_image.size() == 4);
    // kept indices live on the original grid and are sorted
    for (size_t i = 0; i < per_image.size(); ++i) {
      REQUIRE(per_image[i] >= 0);
      REQUIRE(per_image[i] < 8);
      if (i > 0) REQUIRE(per_image[i] > per_image[i - 1]);
    }
  }
  // stage-2 survivors are a subset of stage-1 survivors (monotone masks)
  for (int64_t img = 0; img < 3; ++img) {
    const auto& s1 = r.kept_per_stage[0][static_cast<size_t>(img)];
    for (int64_t idx : r.kept_per_stage[1][static_cast<size_t>(img)])
      REQUIRE(std::find(s1.begin(), s1.end(), idx) != s1.end());
  }
}

TEST_CASE("train-mode soft masking equals infer-mode physical pruning on the same mask") {
  auto pc = small_patch();
  auto mc = small_model(true);
  auto g = testing_support::rng(19);
  std::uniform_int_distribution<int> bit(0, 1);
  for (int rep = 0; rep < 10; ++rep) {
    auto m = ReidModel<double>::init(pc, mc, 1000 + rep);
    auto images = random_tensor<double>({2, 3, 64, 32}, g, 0.0, 1.0);
    // nested masks over the 8 image tokens
    auto m1 = Tensor<double>::zeros({2, 8});
    auto m2 = Tensor<double>::zeros({2, 8});
    for (int64_t i = 0; i < 2; ++i) {
      int kept = 0;
      for (int64_t t = 0; t < 8; ++t) {
        const int b1 = bit(g);
        m1.at({i, t}) = b1;
        const int b2 = b1 == 1 ? bit(g) : 0;
        m2.at({i, t}) = b2;
        kept += b2;
      }
      if (kept == 0) {  // keep at least one token alive per stage
        m1.at({i, 0}) = 1;
        m2.at({i, 0}) = 1;
      }
    }
    std::vector<Tensor<double>> forced = {m1, m2};

    vit::ForwardOptions<double> train_opt;
    train_opt.mode = vit::Mode::kTrain;
    train_opt.forced_stage_masks = &forced;
    train_opt.want_attn_cls = true;
    train_opt.reweight_lambda = &m.reweight.lambda;
    auto a = vit::forward_features(images, pc, mc, m.backbone, &m.predictor, train_opt);

    vit::ForwardOptions<double> infer_opt;
    infer_opt.forced_stage_masks = &forced;
    auto b = vit::forward_features(images, pc, mc, m.backbone, &m.predictor, infer_opt);

    for (int64_t i = 0; i < a.feature.numel(); ++i)
      REQUIRE_THAT(a.feature.data()[i],
                   Catch::Matchers::WithinAbs(b.feature.data()[i], 1e-5));
  }
}

TEST_CASE("same seed and config give bit-identical weights and outputs") {
  auto pc = small_patch();
  auto mc = small_model(true);
  auto m1 = ReidModel<double>::init(pc, mc, 123);
  auto m2 = ReidModel<double>::init(pc, mc, 123);
  bool equal = true;
  m1.for_each_param([&](const std::string& name, Tensor<double>& t) {
    auto g = testing_support::rng(0);
    (void)g;
    Tensor<double>* other = nullptr;
    m2.for_each_param([&](const std::string& n2, Tensor<double>& t2) {
      if (n2 == name) other = &t2;
    });
    REQUIRE(other != nullptr);
    for (int64_t i = 0; i < t.numel(); ++i)
      if (t.data()[i] != other->data()[i]) equal = false;
  });
  REQUIRE(equal);

  auto g = testing_support::rng(21);
  auto images = random_tensor<double>({2, 3, 64, 32}, g, 0.0, 1.0);
  vit::ForwardOptions<double> opt;
  auto a = vit::forward_features(images, pc, mc, m1.backbone, &m1.predictor, opt);
  auto b = vit::forward_features(images, pc, mc, m2.backbone, &m2.predictor, opt);
  for (int64_t i = 0; i < a.feature.numel(); ++i)
    REQUIRE(a.feature.data()[i] == b.feature.data()[i]);
}

TEST_CASE("model checkpoint round-trips bit-exactly") {
  auto pc = small_patch();
  auto mc = small_model(true);
  auto m = ReidModel<float>::init(pc, mc, 55);
  // make running stats non-trivial
  m.head.bn_state.running_mean.data()[0] = 0.25f;
  auto ck = model_to_checkpoint(m);
  const std::string path = "/tmp/sureid_test_ckpt.surd";
  save_checkpoint(path, ck);
  auto loaded_ck = load_checkpoint(path);
  auto m2 = model_from_checkpoint<float>(loaded_ck);
  REQUIRE(m2.model_cfg.sparsify.has_value());
  REQUIRE(m2.model_cfg.sparsify->stage_layers == std::vector<int>{2, 3});
  bool equal = true;
  m.for_each_param([&](const std::string& name, Tensor<float>& t) {
    m2.for_each_param([&](const std::string& n2, Tensor<float>& t2) {
      if (n2 != name) return;
      for (int64_t i = 0; i < t.numel(); ++i)
        if (t.data()[i] != t2.data()[i]) equal = false;
    });
  });
  REQUIRE(equal);
  REQUIRE(m2.head.bn_state.running_mean.data()[0] == 0.25f);
}

TEST_CASE("checkpoint rejects bad magic, version and truncation") {
  const std::string path = "/tmp/sureid_test_bad.surd";
  {
    std::ofstream out(path, std::ios::binary);
    out << "JUNKxxxxxxxxxxxxxxxx";
  }
  REQUIRE_THROWS_AS(load_checkpoint(path), CheckpointError);

  // valid file truncated mid-tensor
  auto pc = small_patch();
  auto mc = small_model(false);
  auto m = ReidModel<float>::init(pc, mc, 55);
  const std::string good = "/tmp/sureid_test_good.surd";
  save_checkpoint(good, model_to_checkpoint(m));
  std::ifstream in(good, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  REQUIRE_THROWS_AS(load_checkpoint(path), CheckpointError);
}
