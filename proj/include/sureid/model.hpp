#pragma once

// Full ReID model: backbone + keep/drop predictor + class-attention
// reweight + BN-neck classifier head, with named parameter traversal used
// by the optimizer and the checkpoint writer.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sureid/checkpoint.hpp"
#include "sureid/distill.hpp"
#include "sureid/hts.hpp"
#include "sureid/image.hpp"
#include "sureid/rng.hpp"
#include "sureid/tensor.hpp"
#include "sureid/vit.hpp"

namespace sureid {

template <typename T>
struct ReidModel {
  vit::PatchConfig patch_cfg;
  vit::ModelConfig model_cfg;
  vit::VitWeights<T> backbone;
  hts::PredictorWeights<T> predictor;  // defined iff sparsify
  hts::ReweightParams<T> reweight;
  distill::ClassifierHead<T> head;

  bool sparsified() const {
    return model_cfg.sparsify.has_value() && model_cfg.sparsify->num_stages() > 0;
  }

  static ReidModel init(const vit::PatchConfig& pc, const vit::ModelConfig& mc, uint64_t seed) {
    pc.validate();
    mc.validate();
    ReidModel m;
    m.patch_cfg = pc;
    m.model_cfg = mc;
    auto wrng = make_stream(seed, "weights");
    m.backbone = vit::VitWeights<T>::init(pc, mc, wrng);
    if (m.sparsified()) m.predictor = hts::PredictorWeights<T>::init(mc.dim, wrng);
    m.head = distill::ClassifierHead<T>::init(mc.dim, mc.num_classes, wrng);
    return m;
  }

  /// Visits every trainable parameter with a stable name.
  void for_each_param(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn("patch/w", backbone.patch_w);
    fn("patch/b", backbone.patch_b);
    fn("cls", backbone.cls);
    fn("pos", backbone.pos);
    for (size_t l = 0; l < backbone.blocks.size(); ++l) {
      auto& b = backbone.blocks[l];
      const std::string p = "block" + std::to_string(l) + "/";
      fn(p + "ln1.g", b.ln1_g); fn(p + "ln1.b", b.ln1_b);
      fn(p + "wq", b.wq); fn(p + "bq", b.bq);
      fn(p + "wk", b.wk); fn(p + "bk", b.bk);
      fn(p + "wv", b.wv); fn(p + "bv", b.bv);
      fn(p + "wo", b.wo); fn(p + "bo", b.bo);
      fn(p + "ln2.g", b.ln2_g); fn(p + "ln2.b", b.ln2_b);
      fn(p + "fc1.w", b.fc1_w); fn(p + "fc1.b", b.fc1_b);
      fn(p + "fc2.w", b.fc2_w); fn(p + "fc2.b", b.fc2_b);
    }
    fn("lnf.g", backbone.lnf_g);
    fn("lnf.b", backbone.lnf_b);
    if (sparsified()) {
      fn("hts/w1", predictor.w1); fn("hts/b1", predictor.b1);
      fn("hts/w2", predictor.w2); fn("hts/b2", predictor.b2);
      fn("hts/lambda", reweight.lambda);
    }
    fn("head/bn.g", head.bn_gamma);
    fn("head/bn.b", head.bn_beta);
    fn("head/w", head.w);
  }

  /// Non-trainable buffers (batch-norm running statistics).
  void for_each_buffer(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn("head/bn.mean", head.bn_state.running_mean);
    fn("head/bn.var", head.bn_state.running_var);
  }

  void zero_grads() {
    for_each_param([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }

  int64_t num_params() {
    int64_t n = 0;
    for_each_param([&n](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }
};

/// [B] images -> [B, 3, H, W] tensor in the model precision.
template <typename T>
Tensor<T> images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw ContractError("images_to_tensor: empty batch");
  const int64_t h = images[0].height, w = images[0].width;
  auto out = Tensor<T>::zeros({static_cast<int64_t>(images.size()), 3, h, w});
  T* dst = out.data();
  for (const auto& img : images) {
    if (img.height != h || img.width != w)
      throw ContractError("images_to_tensor: batch mixes image sizes");
    for (float v : img.data) *dst++ = static_cast<T>(v);
  }
  return out;
}

// --------------------------------------------------------------------------
// Checkpoint mapping (f32 payload per the wire format)
// --------------------------------------------------------------------------

namespace detail_model {

inline Tensor<float> to_f32(const Tensor<float>& t) { return t.clone_values(); }
inline Tensor<float> to_f32(const Tensor<double>& t) {
  auto out = Tensor<float>::zeros(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) out.data()[i] = static_cast<float>(t.data()[i]);
  return out;
}

template <typename T>
void from_f32(const Tensor<float>& src, Tensor<T>& dst, const std::string& name) {
  if (src.shape() != dst.shape())
    throw CheckpointError("checkpoint: tensor '" + name + "' has shape " +
                          shape_str(src.shape()) + ", model expects " + shape_str(dst.shape()));
  for (int64_t i = 0; i < src.numel(); ++i) dst.data()[i] = static_cast<T>(src.data()[i]);
}

}  // namespace detail_model

template <typename T>
Checkpoint model_to_checkpoint(ReidModel<T>& m) {
  Checkpoint ck;
  std::vector<float> meta = {
      static_cast<float>(m.patch_cfg.image_height), static_cast<float>(m.patch_cfg.image_width),
      static_cast<float>(m.patch_cfg.channels),     static_cast<float>(m.patch_cfg.patch),
      static_cast<float>(m.model_cfg.dim),          static_cast<float>(m.model_cfg.depth),
      static_cast<float>(m.model_cfg.heads),        static_cast<float>(m.model_cfg.mlp_ratio),
      static_cast<float>(m.model_cfg.num_classes),
      m.model_cfg.sparsify ? 1.f : 0.f,
      m.model_cfg.sparsify ? static_cast<float>(m.model_cfg.sparsify->base_ratio) : 0.f,
      m.model_cfg.sparsify ? static_cast<float>(m.model_cfg.sparsify->num_stages()) : 0.f};
  if (m.model_cfg.sparsify)
    for (int l : m.model_cfg.sparsify->stage_layers) meta.push_back(static_cast<float>(l));
  ck.put("__meta__", Tensor<float>::from({static_cast<int64_t>(meta.size())}, meta));
  m.for_each_param([&ck](const std::string& name, Tensor<T>& t) {
    ck.put(name, detail_model::to_f32(t));
  });
  m.for_each_buffer([&ck](const std::string& name, Tensor<T>& t) {
    ck.put(name, detail_model::to_f32(t));
  });
  return ck;
}

template <typename T>
ReidModel<T> model_from_checkpoint(const Checkpoint& ck) {
  const auto& meta = ck.get("__meta__");
  if (meta.numel() < 12) throw CheckpointError("checkpoint: malformed __meta__ record");
  vit::PatchConfig pc;
  pc.image_height = static_cast<int>(meta.data()[0]);
  pc.image_width = static_cast<int>(meta.data()[1]);
  pc.channels = static_cast<int>(meta.data()[2]);
  pc.patch = static_cast<int>(meta.data()[3]);
  vit::ModelConfig mc;
  mc.dim = static_cast<int>(meta.data()[4]);
  mc.depth = static_cast<int>(meta.data()[5]);
  mc.heads = static_cast<int>(meta.data()[6]);
  mc.mlp_ratio = static_cast<int>(meta.data()[7]);
  mc.num_classes = static_cast<int>(meta.data()[8]);
  if (meta.data()[9] != 0.f) {
    hts::SparsifySchedule s;
    s.base_ratio = static_cast<double>(meta.data()[10]);
    const int stages = static_cast<int>(meta.data()[11]);
    if (meta.numel() != 12 + stages) throw CheckpointError("checkpoint: malformed __meta__ record");
    for (int i = 0; i < stages; ++i) s.stage_layers.push_back(static_cast<int>(meta.data()[12 + i]));
    mc.sparsify = s;
  }
  auto m = ReidModel<T>::init(pc, mc, /*seed=*/0);
  m.for_each_param([&ck](const std::string& name, Tensor<T>& t) {
    detail_model::from_f32(ck.get(name), t, name);
  });
  m.for_each_buffer([&ck](const std::string& name, Tensor<T>& t) {
    detail_model::from_f32(ck.get(name), t, name);
  });
  return m;
}

}  // namespace sureid
