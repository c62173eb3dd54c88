#include "krrmix/mixers.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace krrmix::mixers {

using autograd::Tape;
using autograd::Var;

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::NW: return "NW";
    case Variant::KRR: return "KRR";
    case Variant::KRRShare: return "KRR-Share";
    case Variant::KRRNoLRR: return "KRR-NoLRR";
    case Variant::LLR: return "LLR";
  }
  return "?";
}

std::optional<Variant> parse_variant(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "nw") return Variant::NW;
  if (lower == "krr") return Variant::KRR;
  if (lower == "krr-share") return Variant::KRRShare;
  if (lower == "krr-nolrr") return Variant::KRRNoLRR;
  if (lower == "llr") return Variant::LLR;
  return std::nullopt;
}

double MixerConfig::score_scale() const {
  return 1.0 / std::sqrt(static_cast<double>(head_dim()));
}

void MixerConfig::validate() const {
  if (heads == 0 || hidden == 0 || hidden % heads != 0) {
    throw ConfigError("heads (" + std::to_string(heads) + ") must divide hidden (" +
                          std::to_string(hidden) + ")",
                      0, "heads");
  }
  if (!(lrr_lower > 0.0 && lrr_lower < lrr_upper)) {
    throw ConfigError("need 0 < lrr_lower < lrr_upper", 0, "lrr_lower");
  }
  if (!(lambda_init > 0.0)) throw ConfigError("lambda_init must be > 0", 0, "lambda_init");
  if (!(llr_reg >= 0.0)) throw ConfigError("llr_reg must be >= 0", 0, "llr_reg");
  if (rope && head_dim() % 2 != 0) {
    throw ConfigError("rotary encoding needs an even head dim", 0, "heads");
  }
}

double range_raw_for(double range) { return std::log(std::expm1(range)); }

MixerParamsT<ParamSpec> mixer_param_specs(const MixerConfig& cfg, double init_std) {
  const std::size_t d = cfg.hidden;
  const std::size_t h = cfg.heads;
  MixerParamsT<ParamSpec> s{ParamSpec::normal({d, d}, init_std),
                            ParamSpec::normal({d, d}, init_std),
                            ParamSpec::normal({d, d}, init_std)};
  if (has_reference_proj(cfg.variant)) s.w_r = ParamSpec::normal({d, d}, init_std);
  if (has_lrr(cfg.variant)) {
    s.w_s = ParamSpec::normal({d, h}, init_std);
    s.lrr_lower = ParamSpec::constant({h}, cfg.lrr_lower);
    s.lrr_range = ParamSpec::constant({h}, range_raw_for(cfg.lrr_upper - cfg.lrr_lower));
  }
  if (is_krr(cfg.variant)) {
    s.ref_scale = ParamSpec::constant({h}, 1.0);
    s.log_lambda = ParamSpec::constant({h}, std::log(cfg.lambda_init));
  }
  if (cfg.learnable_temperature) s.temperature = ParamSpec::constant({h}, cfg.score_scale());
  return s;
}

template <typename T>
MixerWeights<T> init_mixer_weights(const MixerConfig& cfg, double init_std,
                                   std::uint64_t seed, const std::string& prefix) {
  auto specs = mixer_param_specs(cfg, init_std);
  MixerWeights<T> w;
  auto make = [&](const char* name, const ParamSpec& s) {
    return materialize<T>(s, prefix + name, seed);
  };
  w.w_q = make("w_q", specs.w_q);
  w.w_k = make("w_k", specs.w_k);
  w.w_v = make("w_v", specs.w_v);
  auto opt = [&](const char* name, const std::optional<ParamSpec>& s,
                 std::optional<Tensor<T>>& out) {
    if (s) out = make(name, *s);
  };
  opt("w_r", specs.w_r, w.w_r);
  opt("w_s", specs.w_s, w.w_s);
  opt("lrr_lower", specs.lrr_lower, w.lrr_lower);
  opt("lrr_range", specs.lrr_range, w.lrr_range);
  opt("ref_scale", specs.ref_scale, w.ref_scale);
  opt("log_lambda", specs.log_lambda, w.log_lambda);
  opt("temperature", specs.temperature, w.temperature);
  return w;
}

template <typename T>
MixerVars<T> bind(Tape<T>& tape, const MixerWeights<T>& w, bool trainable) {
  auto put = [&](const Tensor<T>& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  MixerVars<T> v{put(w.w_q), put(w.w_k), put(w.w_v)};
  auto opt = [&](const std::optional<Tensor<T>>& t, std::optional<Var<T>>& out) {
    if (t) out = put(*t);
  };
  opt(w.w_r, v.w_r);
  opt(w.w_s, v.w_s);
  opt(w.lrr_lower, v.lrr_lower);
  opt(w.lrr_range, v.lrr_range);
  opt(w.ref_scale, v.ref_scale);
  opt(w.log_lambda, v.log_lambda);
  opt(w.temperature, v.temperature);
  return v;
}

namespace {

// [B, N, D] -> [B, H, N, D/H]
template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
  const Shape& s = x.shape();
  const std::size_t b = s[0], n = s[1], d = s[2];
  return autograd::permute(autograd::reshape(x, {b, n, heads, d / heads}), {0, 2, 1, 3});
}

// [B, H, N, dh] -> [B, N, H*dh]
template <typename T>
Var<T> merge_heads(Var<T> z) {
  const Shape& s = z.shape();
  const std::size_t b = s[0], h = s[1], n = s[2], dh = s[3];
  return autograd::reshape(autograd::permute(z, {0, 2, 1, 3}), {b, n, h * dh});
}

// A per-head vector [H] shaped to broadcast against [..., H, N, *].
template <typename T>
Var<T> per_head(Var<T> p, std::size_t rank) {
  const std::size_t h = p.value().size();
  if (rank >= 3) return autograd::reshape(p, {h, 1, 1});
  if (h != 1) throw ShapeMismatch("per-head parameter with " + std::to_string(h) +
                                  " heads on an unbatched input");
  return autograd::reshape(p, {1, 1});
}

template <typename T>
Var<T> require(const std::optional<Var<T>>& v, const char* name) {
  if (!v) throw ShapeMismatch(std::string("mixer weight '") + name + "' missing for variant");
  return *v;
}

std::optional<linalg::Mask> mask_for(const MixerConfig& cfg, std::size_t n) {
  if (cfg.causal) return linalg::Mask::causal(n);
  return std::nullopt;
}

template <typename T>
Var<T> attention_scores(Var<T> q, Var<T> k, const MixerVars<T>& w, const MixerConfig& cfg) {
  Var<T> raw = autograd::matmul(q, k, false, true);
  if (w.temperature) return autograd::mul(raw, per_head(*w.temperature, raw.value().rank()));
  return autograd::scale(raw, static_cast<T>(cfg.score_scale()));
}

// Sigma^-1 from an already positioned reference and its scaled normalization.
template <typename T>
Var<T> sigma_inverse_from(Var<T> r, Var<T> norm_r, Var<T> log_lambda,
                          const std::optional<linalg::Mask>& mask) {
  Tape<T>& tape = *r.tape;
  const std::size_t n = r.value().dim(-2);
  Var<T> sim = autograd::masked_softmax(autograd::matmul(r, norm_r, false, true), mask);
  Var<T> lam = autograd::exp(per_head(log_lambda, r.value().rank()));
  Var<T> eye = tape.constant(Tensor<T>::identity(n));
  return autograd::add(sim, autograd::mul(lam, eye));
}

template <typename T>
Var<T> solve_sigma(Var<T> sigma_inv, Var<T> rhs, bool causal, bool force_general) {
  if (causal && !force_general) return autograd::solve_lower_triangular(sigma_inv, rhs);
  return autograd::solve_general(sigma_inv, rhs);
}

template <typename T>
Tensor<T> add_batch_axis(const Tensor<T>& x) {
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  return x.reshaped(std::move(s));
}

}  // namespace

template <typename T>
Var<T> nw_attention(Var<T> q, Var<T> k, Var<T> v, const std::optional<linalg::Mask>& mask,
                    T score_scale) {
  Var<T> a = autograd::masked_softmax(autograd::scale(autograd::matmul(q, k, false, true),
                                                      score_scale),
                                      mask);
  return autograd::matmul(a, v);
}

template <typename T>
Var<T> lrr_scale(Var<T> x, Var<T> w_s, Var<T> lower, Var<T> range_raw) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeMismatch("lrr_scale expects x [B, N, D]");
  const std::size_t b = s[0], n = s[1];
  const std::size_t h = w_s.value().dim(-1);
  Var<T> logits = autograd::matmul(x, w_s);  // [B, N, H]
  logits = autograd::reshape(autograd::permute(logits, {0, 2, 1}), {b, h, n, 1});
  Var<T> lo = autograd::reshape(lower, {h, 1, 1});
  Var<T> range = autograd::reshape(autograd::softplus(range_raw), {h, 1, 1});
  return autograd::add(lo, autograd::mul(range, autograd::sigmoid(logits)));
}

template <typename T>
Var<T> krr_sigma_inverse(Var<T> r, Var<T> c, Var<T> log_lambda,
                         const std::optional<linalg::Mask>& mask) {
  Var<T> norm_r = autograd::mul(autograd::l2_normalize_rows(r), per_head(c, r.value().rank()));
  return sigma_inverse_from(r, norm_r, log_lambda, mask);
}

template <typename T>
Var<T> krr_normalize(Var<T> r, Var<T> v_scaled, Var<T> c, Var<T> log_lambda,
                     const std::optional<linalg::Mask>& mask, bool causal, bool force_general) {
  return solve_sigma(krr_sigma_inverse(r, c, log_lambda, mask), v_scaled, causal,
                     force_general);
}

template <typename T>
Var<T> llr_forward(Var<T> q, Var<T> k, Var<T> v, const std::optional<linalg::Mask>& mask,
                   T reg, T score_scale) {
  Tape<T>& tape = *q.tape;
  const Shape out_shape = q.shape();
  const std::size_t n = q.value().dim(-2);
  const std::size_t d = q.value().dim(-1);
  const std::size_t dv = v.value().dim(-1);
  const std::size_t slices = q.value().batch_count(2);
  const std::size_t p = d + 1;

  Var<T> q3 = autograd::reshape(q, {slices, n, d});
  Var<T> k3 = autograd::reshape(k, {slices, n, d});
  Var<T> v3 = autograd::reshape(v, {slices, n, dv});

  // Kernel weights; zero outside the mask, so each fit only sees its prefix.
  Var<T> w = autograd::masked_softmax(
      autograd::scale(autograd::matmul(q3, k3, false, true), score_scale), mask);

  Var<T> ones = tape.constant(Tensor<T>({slices, n, 1}, T(1)));
  Var<T> design = autograd::concat_last(ones, k3);  // M = [1 | K]

  // H_i = M^T diag(W_i) M + reg * diag(0, 1, ..., 1), stacked over queries i.
  Var<T> gram = autograd::reshape(autograd::matmul(w, autograd::row_outer(design, design)),
                                  {slices, n, p, p});
  Tensor<T> ridge({p, p});
  for (std::size_t i = 1; i < p; ++i) ridge[i * p + i] = reg;
  gram = autograd::add(gram, tape.constant(std::move(ridge)));

  // G_i = M^T diag(W_i) V
  Var<T> moment = autograd::reshape(autograd::matmul(w, autograd::row_outer(design, v3)),
                                    {slices, n, p, dv});
  Var<T> theta = autograd::solve_general(gram, moment);  // [S, N, p, dv]

  // z_i = theta_i[0] + Q_i theta_i[1:]
  Var<T> query = autograd::reshape(autograd::concat_last(ones, q3), {slices, n, 1, p});
  Var<T> z = autograd::matmul(query, theta);  // [S, N, 1, dv]
  Shape z_shape = out_shape;
  z_shape.back() = dv;
  return autograd::reshape(z, z_shape);
}

template <typename T>
Var<T> cubit_forward(Var<T> x, const MixerVars<T>& w, const MixerConfig& cfg) {
  if (!is_krr(cfg.variant)) throw ShapeMismatch("cubit_forward needs a KRR variant");
  const std::size_t n = x.value().dim(1);
  const auto mask = mask_for(cfg, n);
  const bool bypass = cfg.bypass == Bypass::Identity;

  Var<T> q = split_heads(autograd::matmul(x, w.w_q), cfg.heads);
  Var<T> k = split_heads(autograd::matmul(x, w.w_k), cfg.heads);
  Var<T> v = split_heads(autograd::matmul(x, w.w_v), cfg.heads);

  Var<T> o = v;
  if (!bypass) {
    Var<T> r = cfg.variant == Variant::KRRShare
                   ? k
                   : split_heads(autograd::matmul(x, require(w.w_r, "w_r")), cfg.heads);
    Var<T> rhs = v;
    if (has_lrr(cfg.variant)) {
      Var<T> s_hat = lrr_scale(x, require(w.w_s, "w_s"), require(w.lrr_lower, "lrr_lower"),
                               require(w.lrr_range, "lrr_range"));
      rhs = autograd::mul(s_hat, v);
    }
    Var<T> norm_r = autograd::mul(autograd::l2_normalize_rows(r),
                                  per_head(require(w.ref_scale, "ref_scale"), 4));
    if (cfg.rope) {
      q = autograd::rope(q);
      k = autograd::rope(k);
      r = autograd::rope(r);
      norm_r = autograd::rope(norm_r);
    }
    Var<T> sigma_inv =
        sigma_inverse_from(r, norm_r, require(w.log_lambda, "log_lambda"), mask);
    o = solve_sigma(sigma_inv, rhs, cfg.causal, cfg.force_general_solve);
  } else if (cfg.rope) {
    q = autograd::rope(q);
    k = autograd::rope(k);
  }

  Var<T> a = autograd::masked_softmax(attention_scores(q, k, w, cfg), mask);
  return merge_heads(autograd::matmul(a, o));
}

template <typename T>
Var<T> mixer_forward(Var<T> x, const MixerVars<T>& w, const MixerConfig& cfg) {
  if (is_krr(cfg.variant)) return cubit_forward(x, w, cfg);
  const std::size_t n = x.value().dim(1);
  const auto mask = mask_for(cfg, n);
  Var<T> q = split_heads(autograd::matmul(x, w.w_q), cfg.heads);
  Var<T> k = split_heads(autograd::matmul(x, w.w_k), cfg.heads);
  Var<T> v = split_heads(autograd::matmul(x, w.w_v), cfg.heads);
  if (cfg.rope) {
    q = autograd::rope(q);
    k = autograd::rope(k);
  }
  if (cfg.variant == Variant::NW) {
    Var<T> a = autograd::masked_softmax(attention_scores(q, k, w, cfg), mask);
    return merge_heads(autograd::matmul(a, v));
  }
  // LLR; a learnable temperature rescales the queries' scores the same way.
  if (w.temperature) {
    q = autograd::mul(q, per_head(*w.temperature, 4));
    return merge_heads(llr_forward(q, k, v, mask, static_cast<T>(cfg.llr_reg), T(1)));
  }
  return merge_heads(llr_forward(q, k, v, mask, static_cast<T>(cfg.llr_reg),
                                 static_cast<T>(cfg.score_scale())));
}

// --- plain-tensor forms ------------------------------------------------------

template <typename T>
Tensor<T> nw_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                       const std::optional<linalg::Mask>& mask, T score_scale) {
  Tape<T> tape;
  return nw_attention(tape.constant(q), tape.constant(k), tape.constant(v), mask, score_scale)
      .value();
}

template <typename T>
Tensor<T> lrr_scale(const Tensor<T>& x, const Tensor<T>& w_s, const Tensor<T>& lower,
                    const Tensor<T>& range_raw) {
  Tape<T> tape;
  const Tensor<T> xb = x.rank() == 2 ? add_batch_axis(x) : x;
  Tensor<T> s = lrr_scale(tape.constant(xb), tape.constant(w_s), tape.constant(lower),
                          tape.constant(range_raw))
                    .value();
  if (x.rank() == 2) return std::move(s).reshaped({s.dim(1), s.dim(2)});
  return std::move(s).reshaped({s.dim(0), s.dim(1), s.dim(2)});
}

template <typename T>
Tensor<T> krr_normalize(const Tensor<T>& r, const Tensor<T>& v_scaled, const Tensor<T>& c,
                        const Tensor<T>& log_lambda, const std::optional<linalg::Mask>& mask,
                        bool causal, bool force_general) {
  Tape<T> tape;
  return krr_normalize(tape.constant(r), tape.constant(v_scaled), tape.constant(c),
                       tape.constant(log_lambda), mask, causal, force_general)
      .value();
}

template <typename T>
Tensor<T> llr_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                      const std::optional<linalg::Mask>& mask, T reg, T score_scale) {
  Tape<T> tape;
  return llr_forward(tape.constant(q), tape.constant(k), tape.constant(v), mask, reg,
                     score_scale)
      .value();
}

template <typename T>
Tensor<T> cubit_forward(const Tensor<T>& x, const MixerWeights<T>& w, const MixerConfig& cfg) {
  Tape<T> tape;
  const Tensor<T> xb = x.rank() == 2 ? add_batch_axis(x) : x;
  Tensor<T> out = cubit_forward(tape.constant(xb), bind(tape, w, false), cfg).value();
  return std::move(out).reshaped(x.shape());
}

template <typename T>
Tensor<T> mixer_forward(const Tensor<T>& x, const MixerWeights<T>& w, const MixerConfig& cfg) {
  Tape<T> tape;
  const Tensor<T> xb = x.rank() == 2 ? add_batch_axis(x) : x;
  Tensor<T> out = mixer_forward(tape.constant(xb), bind(tape, w, false), cfg).value();
  return std::move(out).reshaped(x.shape());
}

#define KRRMIX_INSTANTIATE(T)                                                              \
  template MixerWeights<T> init_mixer_weights(const MixerConfig&, double, std::uint64_t,   \
                                              const std::string&);                         \
  template MixerVars<T> bind(Tape<T>&, const MixerWeights<T>&, bool);                      \
  template Var<T> nw_attention(Var<T>, Var<T>, Var<T>, const std::optional<linalg::Mask>&, \
                               T);                                                         \
  template Var<T> lrr_scale(Var<T>, Var<T>, Var<T>, Var<T>);                               \
  template Var<T> krr_sigma_inverse(Var<T>, Var<T>, Var<T>,                                \
                                    const std::optional<linalg::Mask>&);                   \
  template Var<T> krr_normalize(Var<T>, Var<T>, Var<T>, Var<T>,                            \
                                const std::optional<linalg::Mask>&, bool, bool);           \
  template Var<T> llr_forward(Var<T>, Var<T>, Var<T>, const std::optional<linalg::Mask>&,  \
                              T, T);                                                       \
  template Var<T> cubit_forward(Var<T>, const MixerVars<T>&, const MixerConfig&);          \
  template Var<T> mixer_forward(Var<T>, const MixerVars<T>&, const MixerConfig&);          \
  template Tensor<T> nw_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                  const std::optional<linalg::Mask>&, T);                  \
  template Tensor<T> lrr_scale(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                               const Tensor<T>&);                                          \
  template Tensor<T> krr_normalize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                   const Tensor<T>&, const std::optional<linalg::Mask>&,   \
                                   bool, bool);                                            \
  template Tensor<T> llr_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                 const std::optional<linalg::Mask>&, T, T);                \
  template Tensor<T> cubit_forward(const Tensor<T>&, const MixerWeights<T>&,               \
                                   const MixerConfig&);                                    \
  template Tensor<T> mixer_forward(const Tensor<T>&, const MixerWeights<T>&,               \
                                   const MixerConfig&);

KRRMIX_INSTANTIATE(float)
KRRMIX_INSTANTIATE(double)

#undef KRRMIX_INSTANTIATE

}  // namespace krrmix::mixers
