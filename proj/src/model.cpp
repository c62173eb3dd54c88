#include "krrmix/model.hpp"

#include <cmath>
#include <sstream>

#include "krrmix/rng.hpp"

namespace krrmix::model {

using autograd::Tape;
using autograd::Var;

mixers::MixerConfig ModelConfig::mixer_config() const {
  mixers::MixerConfig m = mixer;
  m.hidden = hidden;
  m.heads = heads;
  return m;
}

void ModelConfig::validate() const {
  if (vocab_size == 0) throw ConfigError("vocab_size must be >= 1", 0, "vocab_size");
  if (layers == 0) throw ConfigError("layers must be >= 1", 0, "layers");
  if (max_seq_len == 0) throw ConfigError("max_seq_len must be >= 1", 0, "max_seq_len");
  if (ffn_mult == 0) throw ConfigError("ffn_mult must be >= 1", 0, "ffn_mult");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be > 0", 0, "init_std");
  mixer_config().validate();
}

std::string ModelConfig::canonical() const {
  const auto m = mixer_config();
  std::ostringstream os;
  os.precision(17);
  os << "vocab_size=" << vocab_size << "\nlayers=" << layers << "\nhidden=" << hidden
     << "\nheads=" << heads << "\nffn_mult=" << ffn_mult << "\nmax_seq_len=" << max_seq_len
     << "\ninit_std=" << init_std << "\nseed=" << seed << "\ntied_head=" << tied_head
     << "\nvariant=" << mixers::variant_name(m.variant) << "\ncausal=" << m.causal
     << "\nlrr_lower=" << m.lrr_lower << "\nlrr_upper=" << m.lrr_upper
     << "\nlambda_init=" << m.lambda_init << "\nllr_reg=" << m.llr_reg
     << "\nlearnable_temperature=" << m.learnable_temperature << "\nrope=" << m.rope
     << "\nbypass=" << (m.bypass == mixers::Bypass::Identity ? "identity" : "none") << "\n";
  return os.str();
}

std::uint64_t ModelConfig::digest() const { return fnv1a64(canonical()); }

namespace {

ModelConfig reference_config(std::size_t d, std::size_t l, std::size_t h, mixers::Variant v) {
  ModelConfig c;
  c.vocab_size = 50257;
  c.hidden = d;
  c.layers = l;
  c.heads = h;
  c.max_seq_len = 1024;
  c.mixer.variant = v;
  return c;
}

}  // namespace

ModelConfig config_125m(mixers::Variant variant) { return reference_config(768, 12, 12, variant); }
ModelConfig config_350m(mixers::Variant variant) { return reference_config(1024, 24, 16, variant); }

ModelParamsT<ParamSpec> model_param_specs(const ModelConfig& cfg) {
  const std::size_t d = cfg.hidden;
  const std::size_t f = cfg.ffn_mult * d;
  const double s = cfg.init_std;
  ModelParamsT<ParamSpec> p;
  p.embedding = ParamSpec::normal({cfg.vocab_size, d}, s);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    p.blocks.push_back(BlockParamsT<ParamSpec>{
        ParamSpec::constant({d}, 1.0),
        ParamSpec::constant({d}, 0.0),
        mixers::mixer_param_specs(cfg.mixer_config(), s),
        ParamSpec::normal({d, d}, s),
        ParamSpec::constant({d}, 1.0),
        ParamSpec::constant({d}, 0.0),
        ParamSpec::normal({d, f}, s),
        ParamSpec::constant({f}, 0.0),
        ParamSpec::normal({f, d}, s),
        ParamSpec::constant({d}, 0.0),
    });
  }
  p.lnf_gain = ParamSpec::constant({d}, 1.0);
  p.lnf_bias = ParamSpec::constant({d}, 0.0);
  if (!cfg.tied_head) p.head = ParamSpec::normal({d, cfg.vocab_size}, s);
  return p;
}

std::size_t count_parameters(const ModelConfig& cfg) {
  auto specs = model_param_specs(cfg);
  std::size_t total = 0;
  specs.for_each([&](const std::string&, ParamSpec& s) { total += s.count(); });
  return total;
}

namespace {

// Structure-preserving map over the parameter tree. `f(name, const P&) -> Q`.
template <typename Q, typename P, typename F>
std::optional<Q> map_opt(const std::string& name, const std::optional<P>& p, F& f) {
  if (!p) return std::nullopt;
  return f(name, *p);
}

template <typename Q, typename P, typename F>
mixers::MixerParamsT<Q> map_mixer(const std::string& prefix, const mixers::MixerParamsT<P>& m,
                                  F& f) {
  mixers::MixerParamsT<Q> out{f(prefix + "w_q", m.w_q), f(prefix + "w_k", m.w_k),
                              f(prefix + "w_v", m.w_v)};
  out.w_r = map_opt<Q>(prefix + "w_r", m.w_r, f);
  out.w_s = map_opt<Q>(prefix + "w_s", m.w_s, f);
  out.lrr_lower = map_opt<Q>(prefix + "lrr_lower", m.lrr_lower, f);
  out.lrr_range = map_opt<Q>(prefix + "lrr_range", m.lrr_range, f);
  out.ref_scale = map_opt<Q>(prefix + "ref_scale", m.ref_scale, f);
  out.log_lambda = map_opt<Q>(prefix + "log_lambda", m.log_lambda, f);
  out.temperature = map_opt<Q>(prefix + "temperature", m.temperature, f);
  return out;
}

template <typename Q, typename P, typename F>
ModelParamsT<Q> map_model(const ModelParamsT<P>& p, F f) {
  ModelParamsT<Q> out;
  out.embedding = f("embedding", p.embedding);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    out.blocks.push_back(BlockParamsT<Q>{
        f(pre + "ln1_gain", b.ln1_gain),
        f(pre + "ln1_bias", b.ln1_bias),
        map_mixer<Q>(pre + "mixer.", b.mixer, f),
        f(pre + "w_o", b.w_o),
        f(pre + "ln2_gain", b.ln2_gain),
        f(pre + "ln2_bias", b.ln2_bias),
        f(pre + "ffn_w1", b.ffn_w1),
        f(pre + "ffn_b1", b.ffn_b1),
        f(pre + "ffn_w2", b.ffn_w2),
        f(pre + "ffn_b2", b.ffn_b2),
    });
  }
  out.lnf_gain = f("lnf_gain", p.lnf_gain);
  out.lnf_bias = f("lnf_bias", p.lnf_bias);
  out.head = map_opt<Q>("head", p.head, f);
  return out;
}

}  // namespace

template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg) {
  cfg.validate();
  const auto specs = model_param_specs(cfg);
  return map_model<Tensor<T>>(specs, [&](const std::string& name, const ParamSpec& s) {
    return materialize<T>(s, name, cfg.seed);
  });
}

template <typename T>
ModelVars<T> bind(Tape<T>& tape, ModelWeights<T>& w) {
  return map_model<Var<T>>(w, [&](const std::string&, const Tensor<T>& t) {
    return tape.leaf(t);
  });
}

template <typename T>
Var<T> block_forward(Var<T> h, const BlockParamsT<Var<T>>& w, const ModelConfig& cfg) {
  const auto mcfg = cfg.mixer_config();
  Var<T> a = autograd::layer_norm(h, w.ln1_gain, w.ln1_bias);
  Var<T> m = mixers::mixer_forward(a, w.mixer, mcfg);
  h = autograd::add(h, autograd::matmul(m, w.w_o));
  Var<T> f = autograd::layer_norm(h, w.ln2_gain, w.ln2_bias);
  f = autograd::gelu(autograd::add(autograd::matmul(f, w.ffn_w1), w.ffn_b1));
  f = autograd::add(autograd::matmul(f, w.ffn_w2), w.ffn_b2);
  return autograd::add(h, f);
}

template <typename T>
Var<T> forward_logits(Tape<T>& tape, const ModelVars<T>& w, const ModelConfig& cfg,
                      std::span<const std::int32_t> tokens, std::size_t batch,
                      std::size_t seq_len) {
  (void)tape;
  if (tokens.size() != batch * seq_len) {
    throw ShapeMismatch("token count " + std::to_string(tokens.size()) + " != " +
                        std::to_string(batch) + "x" + std::to_string(seq_len));
  }
  if (seq_len > cfg.max_seq_len) {
    throw ShapeMismatch("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  Var<T> h = autograd::gather_rows(w.embedding,
                                   std::vector<std::int32_t>(tokens.begin(), tokens.end()));
  h = autograd::reshape(h, {batch, seq_len, cfg.hidden});
  for (const auto& block : w.blocks) h = block_forward(h, block, cfg);
  h = autograd::layer_norm(h, w.lnf_gain, w.lnf_bias);
  Var<T> logits = w.head ? autograd::matmul(h, *w.head)
                         : autograd::matmul(h, w.embedding, false, true);
  return autograd::reshape(logits, {batch * seq_len, cfg.vocab_size});
}

template <typename T>
Var<T> lm_loss(Var<T> logits, std::span<const std::int32_t> targets, std::span<const T> weights) {
  return autograd::cross_entropy(logits, std::vector<std::int32_t>(targets.begin(), targets.end()),
                                 std::vector<T>(weights.begin(), weights.end()));
}

template <typename T>
T lm_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  Tape<T> tape;
  return lm_loss<T>(tape.constant(logits), targets).value().item();
}

template <typename T>
void Adam<T>::step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads) {
  if (params.size() != grads.size()) throw ShapeMismatch("adam: params/grads count differ");
  if (m_.empty()) {
    for (const Tensor<T>* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }
  if (m_.size() != params.size()) throw ShapeMismatch("adam: parameter list changed");
  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = grads[i];
    if (p.shape() != g.shape() || m_[i].shape() != p.shape()) {
      throw ShapeMismatch("adam: shape mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double m = b1 * m_[i][j] + (1.0 - b1) * gj;
      const double v = b2 * v_[i][j] + (1.0 - b2) * gj * gj;
      m_[i][j] = static_cast<T>(m);
      v_[i][j] = static_cast<T>(v);
      const double update = cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      p[j] = static_cast<T>(p[j] - update);
    }
  }
}

#define KRRMIX_INSTANTIATE(T)                                                                 \
  template ModelWeights<T> init_weights(const ModelConfig&);                                  \
  template ModelVars<T> bind(Tape<T>&, ModelWeights<T>&);                                     \
  template Var<T> block_forward(Var<T>, const BlockParamsT<Var<T>>&, const ModelConfig&);     \
  template Var<T> forward_logits(Tape<T>&, const ModelVars<T>&, const ModelConfig&,           \
                                 std::span<const std::int32_t>, std::size_t, std::size_t);    \
  template Var<T> lm_loss(Var<T>, std::span<const std::int32_t>, std::span<const T>);         \
  template T lm_loss(const Tensor<T>&, std::span<const std::int32_t>);                        \
  template class Adam<T>;

KRRMIX_INSTANTIATE(float)
KRRMIX_INSTANTIATE(double)

#undef KRRMIX_INSTANTIATE

}  // namespace krrmix::model
