#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "krrmix/checkpoint.hpp"
#include "krrmix/errors.hpp"
#include "krrmix/model.hpp"
#include "krrmix/rng.hpp"
#include "krrmix/rope.hpp"

using namespace krrmix;
using namespace krrmix::model;

namespace {

using M = Tensor<double>;
using Mat = std::vector<std::vector<double>>;

ModelConfig tiny(mixers::Variant v, std::size_t layers = 2, std::size_t d = 8, std::size_t h = 2) {
  ModelConfig c;
  c.vocab_size = 11;
  c.layers = layers;
  c.hidden = d;
  c.heads = h;
  c.ffn_mult = 2;
  c.max_seq_len = 16;
  c.init_std = 0.3;
  c.seed = 5;
  c.mixer.variant = v;
  c.mixer.lambda_init = 0.1;
  return c;
}

std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = static_cast<std::int32_t>(rng.below(vocab));
  return t;
}

M logits_of(ModelWeights<double>& w, const ModelConfig& cfg, const std::vector<std::int32_t>& tok,
            std::size_t batch) {
  autograd::Tape<double> tape;
  auto vars = bind(tape, w);
  return forward_logits(tape, vars, cfg, tok, batch, tok.size() / batch).value();
}

// --- straight-line reference: scalar loops on nested vectors -----------------

Mat mm(const Mat& a, const M& b) {
  const std::size_t k = b.dim(0), m = b.dim(1);
  Mat c(a.size(), std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < m; ++j) c[i][j] += a[i][p] * b[p * m + j];
  return c;
}

Mat layer_norm(const Mat& x, const M& g, const M& b) {
  Mat y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= row.size();
    for (double v : row) var += (v - mu) * (v - mu);
    var /= row.size();
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

void rotate(std::vector<double>& x, std::size_t pos) {
  const std::size_t d = x.size();
  for (std::size_t j = 0; j < d / 2; ++j) {
    const double theta = pos * std::pow(10000.0, -2.0 * j / d);
    const double a = x[2 * j], b = x[2 * j + 1];
    x[2 * j] = a * std::cos(theta) - b * std::sin(theta);
    x[2 * j + 1] = a * std::sin(theta) + b * std::cos(theta);
  }
}

Mat nw_mixer(const Mat& x, const mixers::MixerWeights<double>& w, std::size_t heads) {
  const std::size_t n = x.size(), d = x[0].size(), dh = d / heads;
  Mat q = mm(x, w.w_q), k = mm(x, w.w_k), v = mm(x, w.w_v);
  Mat out(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<std::vector<double>> qh(n), kh(n);
    for (std::size_t i = 0; i < n; ++i) {
      qh[i].assign(q[i].begin() + h * dh, q[i].begin() + (h + 1) * dh);
      kh[i].assign(k[i].begin() + h * dh, k[i].begin() + (h + 1) * dh);
      rotate(qh[i], i);
      rotate(kh[i], i);
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300, z = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0;
        for (std::size_t t = 0; t < dh; ++t) dot += qh[i][t] * kh[j][t];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t t = 0; t < dh; ++t) out[i][h * dh + t] += s[j] / z * v[j][h * dh + t];
    }
  }
  return out;
}

double gelu(double x) {
  return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
}

Mat reference_logits(ModelWeights<double>& w, const ModelConfig& cfg,
                     const std::vector<std::int32_t>& tok) {
  const std::size_t d = cfg.hidden;
  Mat h(tok.size(), std::vector<double>(d));
  for (std::size_t i = 0; i < tok.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) h[i][j] = w.embedding[tok[i] * d + j];
  for (auto& b : w.blocks) {
    Mat m = mm(nw_mixer(layer_norm(h, b.ln1_gain, b.ln1_bias), b.mixer, cfg.heads), b.w_o);
    for (std::size_t i = 0; i < h.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) h[i][j] += m[i][j];
    Mat f = mm(layer_norm(h, b.ln2_gain, b.ln2_bias), b.ffn_w1);
    for (auto& row : f)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = gelu(row[j] + b.ffn_b1[j]);
    f = mm(f, b.ffn_w2);
    for (std::size_t i = 0; i < h.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) h[i][j] += f[i][j] + b.ffn_b2[j];
  }
  return mm(layer_norm(h, w.lnf_gain, w.lnf_bias), *w.head);
}

}  // namespace

TEST(Block, ZeroOutputProjectionsGiveIdentity) {
  for (auto v : {mixers::Variant::NW, mixers::Variant::KRR, mixers::Variant::LLR}) {
    auto cfg = tiny(v);
    auto w = init_weights<double>(cfg);
    auto& b = w.blocks[0];
    for (auto* t : {&b.w_o, &b.ffn_w2, &b.ffn_b2}) std::fill(t->storage().begin(), t->storage().end(), 0.0);
    Rng rng(1);
    M x({1, 5, 8});
    for (auto& e : x.storage()) e = rng.normal();
    autograd::Tape<double> tape;
    auto vars = bind(tape, w);
    auto out = block_forward(tape.constant(x), vars.blocks[0], cfg);
    EXPECT_EQ(out.value().storage(), x.storage()) << mixers::variant_name(v);
  }
}

TEST(Model, SingleTokenKrrIsFinite) {
  auto cfg = tiny(mixers::Variant::KRR);
  auto w = init_weights<double>(cfg);
  M logits = logits_of(w, cfg, {3}, 1);
  EXPECT_EQ(logits.shape(), (Shape{1, 11}));
  EXPECT_TRUE(logits.all_finite());
}

TEST(Model, MatchesStraightLineReference) {
  auto cfg = tiny(mixers::Variant::NW);
  auto w = init_weights<double>(cfg);
  const auto tok = random_tokens(7, cfg.vocab_size, 2);
  M got = logits_of(w, cfg, tok, 1);
  Mat want = reference_logits(w, cfg, tok);
  for (std::size_t i = 0; i < tok.size(); ++i)
    for (std::size_t j = 0; j < cfg.vocab_size; ++j)
      EXPECT_NEAR(got[i * cfg.vocab_size + j], want[i][j], 1e-10);
}

TEST(Model, BatchRowsAreIndependent) {
  auto cfg = tiny(mixers::Variant::KRR);
  auto w = init_weights<double>(cfg);
  const auto a = random_tokens(6, cfg.vocab_size, 3), b = random_tokens(6, cfg.vocab_size, 4);
  std::vector<std::int32_t> both(a);
  both.insert(both.end(), b.begin(), b.end());
  M joint = logits_of(w, cfg, both, 2);
  M second = logits_of(w, cfg, b, 1);
  for (std::size_t i = 0; i < second.size(); ++i)
    EXPECT_NEAR(joint[second.size() + i], second[i], 1e-12);
}

TEST(Model, TiedHeadUsesEmbedding) {
  auto cfg = tiny(mixers::Variant::NW);
  cfg.tied_head = true;
  auto w = init_weights<double>(cfg);
  EXPECT_FALSE(w.head.has_value());
  EXPECT_TRUE(logits_of(w, cfg, {1, 2, 3}, 1).all_finite());
}

TEST(Model, RejectsOverlongSequence) {
  auto cfg = tiny(mixers::Variant::NW);
  auto w = init_weights<double>(cfg);
  EXPECT_THROW(logits_of(w, cfg, std::vector<std::int32_t>(17, 1), 1), ShapeMismatch);
}

TEST(Model, ParameterCountMatchesMaterializedWeights) {
  for (auto v : {mixers::Variant::NW, mixers::Variant::KRR, mixers::Variant::KRRShare,
                 mixers::Variant::KRRNoLRR, mixers::Variant::LLR}) {
    auto cfg = tiny(v);
    auto w = init_weights<double>(cfg);
    std::size_t n = 0;
    w.for_each([&](const std::string&, M& t) { n += t.size(); });
    EXPECT_EQ(count_parameters(cfg), n) << mixers::variant_name(v);
  }
}

TEST(Model, FullSizeParameterCounts) {
  // Per layer: two layer norms (4D), Q/K/V (3D^2), W_O (D^2), FFN (2fD + f + D)
  // with f = 4D; plus embeddings, final norm and an untied head.
  auto transformer = [](std::size_t d, std::size_t layers) {
    const std::size_t v = 50257, f = 4 * d;
    return v * d + layers * (4 * d + 4 * d * d + 2 * f * d + f + d) + 2 * d + d * v;
  };
  EXPECT_EQ(count_parameters(config_125m(mixers::Variant::NW)), transformer(768, 12));
  EXPECT_EQ(count_parameters(config_350m(mixers::Variant::NW)), transformer(1024, 24));
  // KRR adds W_R (D^2), W_s (DH) and four per-head scalars per layer.
  auto extra = [](std::size_t d, std::size_t h, std::size_t layers) {
    return layers * (d * d + d * h + 4 * h);
  };
  EXPECT_EQ(count_parameters(config_125m(mixers::Variant::KRR)),
            transformer(768, 12) + extra(768, 12, 12));
  EXPECT_EQ(count_parameters(config_350m(mixers::Variant::KRR)),
            transformer(1024, 24) + extra(1024, 16, 24));
}

TEST(LmLoss, UniformLogits) {
  M logits({3, 7}, 0.25);
  EXPECT_NEAR(lm_loss<double>(logits, std::vector<std::int32_t>{0, 3, 6}), std::log(7.0), 1e-14);
}

TEST(LmLoss, SaturatedCorrectLogit) {
  M logits({2, 4}, 0.0);
  logits[1] = 1e4;
  logits[4 + 2] = 1e4;
  EXPECT_NEAR(lm_loss<double>(logits, std::vector<std::int32_t>{1, 2}), 0.0, 1e-12);
}

TEST(LmLoss, HandComputed) {
  M logits = M::matrix({{1.0, 2.0, 0.5}, {-1.0, 0.0, 3.0}});
  const double l0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)) - 1.0;
  const double l1 = std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0)) - 3.0;
  EXPECT_NEAR(lm_loss<double>(logits, std::vector<std::int32_t>{0, 2}), (l0 + l1) / 2, 1e-14);
}

TEST(LmLoss, WeightsSelectPositions) {
  M logits = M::matrix({{1.0, 2.0, 0.5}, {-1.0, 0.0, 3.0}});
  autograd::Tape<double> tape;
  const std::vector<std::int32_t> targets = {0, 2};
  const std::vector<double> weights = {0.0, 1.0};
  const double l1 = std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0)) - 3.0;
  EXPECT_NEAR(lm_loss<double>(tape.constant(logits), targets, weights).value().item(), l1, 1e-14);
}

TEST(Adam, ZeroGradientLeavesParams) {
  M p = M::matrix({{1.0, -2.0}});
  Adam<double> opt;
  std::vector<M*> params = {&p};
  std::vector<M> grads = {M({1, 2}, 0.0)};
  opt.step(params, grads);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -2.0);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  M p = M::matrix({{1.0, 1.0}});
  Adam<double> opt(AdamConfig{0.01, 0.8, 0.99, 1e-12});
  std::vector<M*> params = {&p};
  std::vector<M> grads = {M::matrix({{3.0, -0.002}})};
  opt.step(params, grads);
  EXPECT_NEAR(p[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p[1], 1.0 + 0.01, 1e-9);
}

TEST(Adam, ThreeStepScalarTrace) {
  const AdamConfig c{0.1, 0.9, 0.999, 1e-8};
  M p = M::scalar(0.5);
  Adam<double> opt(c);
  std::vector<M*> params = {&p};
  double x = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    std::vector<M> grads = {M::scalar(1.0)};
    opt.step(params, grads);
    m = c.beta1 * m + (1 - c.beta1);
    v = c.beta2 * v + (1 - c.beta2);
    const double mh = m / (1 - std::pow(c.beta1, t)), vh = v / (1 - std::pow(c.beta2, t));
    x -= c.lr * mh / (std::sqrt(vh) + c.eps);
    EXPECT_NEAR(p.item(), x, 1e-14) << "step " << t;
  }
}

TEST(Rope, PositionZeroIsIdentity) {
  Rng rng(1);
  M x({1, 6});
  for (auto& e : x.storage()) e = rng.normal();
  EXPECT_EQ(rope_apply(x).storage(), x.storage());
}

TEST(Rope, PreservesNorms) {
  Rng rng(2);
  M x({9, 8});
  for (auto& e : x.storage()) e = rng.normal();
  M y = rope_apply(x);
  for (std::size_t i = 0; i < 9; ++i) {
    double a = 0, b = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      a += x[i * 8 + j] * x[i * 8 + j];
      b += y[i * 8 + j] * y[i * 8 + j];
    }
    EXPECT_NEAR(std::sqrt(a), std::sqrt(b), 1e-12);
  }
}

TEST(Rope, DotProductDependsOnlyOnOffset) {
  Rng rng(3);
  M q({1, 4}), k({1, 4});
  for (auto& e : q.storage()) e = rng.normal();
  for (auto& e : k.storage()) e = rng.normal();
  auto dot_at = [&](std::size_t i, std::size_t j) {
    M qi = rope_apply(q, i), kj = rope_apply(k, j);
    double s = 0;
    for (std::size_t t = 0; t < 4; ++t) s += qi[t] * kj[t];
    return s;
  };
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j <= i; ++j) EXPECT_NEAR(dot_at(i, j), dot_at(i - j, 0), 1e-11);
}

TEST(Rope, InverseUndoesRotation) {
  Rng rng(4);
  M x({5, 4});
  for (auto& e : x.storage()) e = rng.normal();
  M back = rope_apply(rope_apply(x), 0, true);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-14);
}

TEST(Checkpoint, RoundTrip) {
  auto cfg = tiny(mixers::Variant::KRR);
  auto w = init_weights<double>(cfg);
  const auto path = std::filesystem::temp_directory_path() / "krrmix_test_ckpt.bin";
  save_checkpoint(path, cfg, w);
  auto back = load_checkpoint<double>(path, cfg);
  std::vector<std::vector<double>> a, b;
  w.for_each([&](const std::string&, M& t) { a.push_back(t.storage()); });
  back.for_each([&](const std::string&, M& t) { b.push_back(t.storage()); });
  EXPECT_EQ(a, b);
  auto as_float = load_checkpoint<float>(path, cfg);
  EXPECT_FLOAT_EQ(as_float.embedding[0], static_cast<float>(w.embedding[0]));
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsOtherConfig) {
  auto cfg = tiny(mixers::Variant::KRR);
  auto w = init_weights<double>(cfg);
  const auto path = std::filesystem::temp_directory_path() / "krrmix_test_ckpt2.bin";
  save_checkpoint(path, cfg, w);
  EXPECT_THROW(load_checkpoint<double>(path, tiny(mixers::Variant::NW)), CheckpointError);
  EXPECT_THROW(load_checkpoint<double>(path.string() + ".missing", cfg), CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsTruncatedFile) {
  auto cfg = tiny(mixers::Variant::NW);
  auto w = init_weights<double>(cfg);
  const auto path = std::filesystem::temp_directory_path() / "krrmix_test_ckpt3.bin";
  save_checkpoint(path, cfg, w);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(load_checkpoint<double>(path, cfg), CheckpointError);
  std::filesystem::remove(path);
}
