#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "krrmix/autograd.hpp"
#include "krrmix/mixers.hpp"
#include "krrmix/params.hpp"

namespace krrmix::model {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t layers = 4;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t max_seq_len = 256;
  mixers::MixerConfig mixer;  // hidden/heads are taken from the fields above
  double init_std = 0.02;
  std::uint64_t seed = 0;
  bool tied_head = false;

  /// The mixer config with hidden/heads synchronized to the model.
  mixers::MixerConfig mixer_config() const;
  void validate() const;
  /// Stable key=value rendering; its hash is the checkpoint digest.
  std::string canonical() const;
  std::uint64_t digest() const;
};

/// Pre-norm decoder block: h + W_O Mixer(LN(h)), then h + FFN(LN(h)).
template <typename P>
struct BlockParamsT {
  P ln1_gain;
  P ln1_bias;
  mixers::MixerParamsT<P> mixer;
  P w_o;
  P ln2_gain;
  P ln2_bias;
  P ffn_w1;
  P ffn_b1;
  P ffn_w2;
  P ffn_b2;

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "ln1_gain", ln1_gain);
    f(prefix + "ln1_bias", ln1_bias);
    mixer.for_each([&](const char* name, P& p) { f(prefix + "mixer." + name, p); });
    f(prefix + "w_o", w_o);
    f(prefix + "ln2_gain", ln2_gain);
    f(prefix + "ln2_bias", ln2_bias);
    f(prefix + "ffn_w1", ffn_w1);
    f(prefix + "ffn_b1", ffn_b1);
    f(prefix + "ffn_w2", ffn_w2);
    f(prefix + "ffn_b2", ffn_b2);
  }
};

template <typename P>
struct ModelParamsT {
  P embedding;  // [V, D]
  std::vector<BlockParamsT<P>> blocks;
  P lnf_gain;
  P lnf_bias;
  std::optional<P> head;  // [D, V]; absent when tied to the embedding

  /// Visits every tensor in a fixed order with its dotted name.
  template <typename F>
  void for_each(F&& f) {
    f(std::string("embedding"), embedding);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].for_each("blocks." + std::to_string(i) + ".", f);
    }
    f(std::string("lnf_gain"), lnf_gain);
    f(std::string("lnf_bias"), lnf_bias);
    if (head) f(std::string("head"), *head);
  }
};

template <typename T>
using ModelWeights = ModelParamsT<Tensor<T>>;
template <typename T>
using ModelVars = ModelParamsT<autograd::Var<T>>;

/// Full-size reference shapes with the GPT-2 vocabulary (50257) and 1024 context:
/// 125M is D=768, L=12, H=12 and 350M is D=1024, L=24, H=16.
ModelConfig config_125m(mixers::Variant variant);
ModelConfig config_350m(mixers::Variant variant);

ModelParamsT<ParamSpec> model_param_specs(const ModelConfig& cfg);

/// Total learnable scalars, computed from the specs without allocating.
std::size_t count_parameters(const ModelConfig& cfg);

template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg);

template <typename T>
ModelVars<T> bind(autograd::Tape<T>& tape, ModelWeights<T>& w);

/// One block on h [B, N, D].
template <typename T>
autograd::Var<T> block_forward(autograd::Var<T> h, const BlockParamsT<autograd::Var<T>>& w,
                               const ModelConfig& cfg);

/// Next-token logits [B*N, V] for row-major token ids [B, N].
template <typename T>
autograd::Var<T> forward_logits(autograd::Tape<T>& tape, const ModelVars<T>& w,
                                const ModelConfig& cfg, std::span<const std::int32_t> tokens,
                                std::size_t batch, std::size_t seq_len);

/// Weighted mean cross-entropy; empty weights mean all ones.
template <typename T>
autograd::Var<T> lm_loss(autograd::Var<T> logits, std::span<const std::int32_t> targets,
                         std::span<const T> weights = {});

template <typename T>
T lm_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets);

struct AdamConfig {
  double lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

/// Adam with bias correction, no weight decay, constant learning rate.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// params[i] -= lr * m_hat / (sqrt(v_hat) + eps). Moments are allocated on
  /// the first call and must keep matching shapes afterwards.
  void step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads);

  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::size_t step_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

}  // namespace krrmix::model
