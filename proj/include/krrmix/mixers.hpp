#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "krrmix/autograd.hpp"
#include "krrmix/linalg.hpp"
#include "krrmix/params.hpp"
#include "krrmix/tensor.hpp"

namespace krrmix::mixers {

enum class Variant { NW, KRR, KRRShare, KRRNoLRR, LLR };

std::string_view variant_name(Variant v);
/// Accepts NW, KRR, KRR-Share, KRR-NoLRR, LLR (case-insensitive).
std::optional<Variant> parse_variant(std::string_view s);

inline bool is_krr(Variant v) {
  return v == Variant::KRR || v == Variant::KRRShare || v == Variant::KRRNoLRR;
}
inline bool has_reference_proj(Variant v) {
  return v == Variant::KRR || v == Variant::KRRNoLRR;
}
inline bool has_lrr(Variant v) { return v == Variant::KRR || v == Variant::KRRShare; }

/// Test hook: Identity forces Sigma^-1 := I and s_hat := 1 in the KRR path.
enum class Bypass { None, Identity };

struct MixerConfig {
  std::size_t hidden = 128;
  std::size_t heads = 4;
  Variant variant = Variant::KRR;
  bool causal = true;
  double lrr_lower = 0.5;
  double lrr_upper = 2.0;
  double lambda_init = 1e-10;
  double llr_reg = 1.0;
  bool learnable_temperature = false;
  bool rope = true;
  Bypass bypass = Bypass::None;
  /// Benchmark hook: route the causal Sigma solve through LU instead of the
  /// triangular solve.
  bool force_general_solve = false;

  std::size_t head_dim() const { return hidden / heads; }
  double score_scale() const;
  /// Throws ConfigError on a violated invariant.
  void validate() const;
};

/// Learnable tensors of one mixer, generic over storage: ParamSpec (shapes
/// only), Tensor (weights) or Var (bound to a tape). Optional members exist
/// only for the variants that use them.
template <typename P>
struct MixerParamsT {
  P w_q;
  P w_k;
  P w_v;
  std::optional<P> w_r;          // [D, D], absent when R is tied to K
  std::optional<P> w_s;          // [D, H] rescale logits
  std::optional<P> lrr_lower;    // [H]
  std::optional<P> lrr_range;    // [H], unconstrained; softplus at use
  std::optional<P> ref_scale;    // [H], scale of the normalized reference
  std::optional<P> log_lambda;   // [H]
  std::optional<P> temperature;  // [H], only with learnable_temperature

  template <typename F>
  void for_each(F&& f) {
    f("w_q", w_q);
    f("w_k", w_k);
    f("w_v", w_v);
    auto opt = [&](const char* name, std::optional<P>& p) {
      if (p) f(name, *p);
    };
    opt("w_r", w_r);
    opt("w_s", w_s);
    opt("lrr_lower", lrr_lower);
    opt("lrr_range", lrr_range);
    opt("ref_scale", ref_scale);
    opt("log_lambda", log_lambda);
    opt("temperature", temperature);
  }
};

template <typename T>
using MixerWeights = MixerParamsT<Tensor<T>>;
template <typename T>
using MixerVars = MixerParamsT<autograd::Var<T>>;

/// Softplus preimage, so that softplus(raw) == range.
double range_raw_for(double range);

MixerParamsT<ParamSpec> mixer_param_specs(const MixerConfig& cfg, double init_std);

template <typename T>
MixerWeights<T> init_mixer_weights(const MixerConfig& cfg, double init_std,
                                   std::uint64_t seed, const std::string& prefix = "mixer.");

template <typename T>
MixerVars<T> bind(autograd::Tape<T>& tape, const MixerWeights<T>& w, bool trainable = true);

// --- differentiable forms ----------------------------------------------------

/// Z = masked_softmax(scale * Q K^T, mask) V over the trailing [N, d] axes.
template <typename T>
autograd::Var<T> nw_attention(autograd::Var<T> q, autograd::Var<T> k, autograd::Var<T> v,
                              const std::optional<linalg::Mask>& mask, T score_scale);

/// s_hat = lower + softplus(range_raw) * sigmoid(x W_s) for x [B, N, D];
/// returns [B, H, N, 1].
template <typename T>
autograd::Var<T> lrr_scale(autograd::Var<T> x, autograd::Var<T> w_s,
                           autograd::Var<T> lower, autograd::Var<T> range_raw);

/// Sigma^-1 = masked_softmax(R (c * l2norm(R))^T, mask) + exp(log_lambda) I.
/// `c` and `log_lambda` hold one value per slice along axis -3 (shape [H]).
template <typename T>
autograd::Var<T> krr_sigma_inverse(autograd::Var<T> r, autograd::Var<T> c,
                                   autograd::Var<T> log_lambda,
                                   const std::optional<linalg::Mask>& mask);

/// Solves Sigma^-1 O = V_scaled; triangular when `causal`, LU otherwise.
template <typename T>
autograd::Var<T> krr_normalize(autograd::Var<T> r, autograd::Var<T> v_scaled,
                               autograd::Var<T> c, autograd::Var<T> log_lambda,
                               const std::optional<linalg::Mask>& mask, bool causal,
                               bool force_general = false);

/// Local linear regression mixer: per query a kernel-weighted affine fit on
/// [1 | K] with the intercept left unregularized; evaluated at [1 | Q_i].
template <typename T>
autograd::Var<T> llr_forward(autograd::Var<T> q, autograd::Var<T> k, autograd::Var<T> v,
                             const std::optional<linalg::Mask>& mask, T reg, T score_scale);

/// KRR mixer on x [B, N, D] -> [B, N, D] (concatenated heads).
template <typename T>
autograd::Var<T> cubit_forward(autograd::Var<T> x, const MixerVars<T>& w,
                               const MixerConfig& cfg);

/// Dispatches on cfg.variant. x [B, N, D] -> [B, N, D].
template <typename T>
autograd::Var<T> mixer_forward(autograd::Var<T> x, const MixerVars<T>& w,
                               const MixerConfig& cfg);

// --- plain-tensor forms (no gradients) ---------------------------------------

template <typename T>
Tensor<T> nw_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                       const std::optional<linalg::Mask>& mask, T score_scale);

/// x [N, D] -> [H, N].
template <typename T>
Tensor<T> lrr_scale(const Tensor<T>& x, const Tensor<T>& w_s, const Tensor<T>& lower,
                    const Tensor<T>& range_raw);

template <typename T>
Tensor<T> krr_normalize(const Tensor<T>& r, const Tensor<T>& v_scaled, const Tensor<T>& c,
                        const Tensor<T>& log_lambda, const std::optional<linalg::Mask>& mask,
                        bool causal, bool force_general = false);

template <typename T>
Tensor<T> llr_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                      const std::optional<linalg::Mask>& mask, T reg, T score_scale);

/// x [N, D] or [B, N, D]; output has the same shape.
template <typename T>
Tensor<T> cubit_forward(const Tensor<T>& x, const MixerWeights<T>& w, const MixerConfig& cfg);

template <typename T>
Tensor<T> mixer_forward(const Tensor<T>& x, const MixerWeights<T>& w, const MixerConfig& cfg);

}  // namespace krrmix::mixers
