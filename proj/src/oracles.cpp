#include "krrmix/oracles.hpp"

#include <cmath>
#include <vector>

#include "krrmix/linalg.hpp"
#include "krrmix/rope.hpp"

namespace krrmix::oracles {

namespace {

template <typename T>
using Mat = std::vector<std::vector<T>>;

template <typename T>
Mat<T> to_mat(const Tensor<T>& t) {
  Mat<T> m(t.dim(0), std::vector<T>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
  return m;
}

template <typename T>
Tensor<T> to_tensor(const Mat<T>& m) {
  const std::size_t r = m.size();
  const std::size_t c = r ? m[0].size() : 0;
  Tensor<T> t({r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[i * c + j] = m[i][j];
  return t;
}

template <typename T>
Mat<T> mat_mul(const Mat<T>& a, const Mat<T>& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Mat<T> c(n, std::vector<T>(m, T(0)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      T acc = 0;
      for (std::size_t l = 0; l < k; ++l) acc += a[i][l] * b[l][j];
      c[i][j] = acc;
    }
  return c;
}

template <typename T>
Mat<T> inverse(const Mat<T>& a) {
  return to_mat(linalg::explicit_inverse(to_tensor(a)));
}

// Row softmax with entries j > i excluded when causal.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& s, bool causal) {
  Mat<T> out(s.size(), std::vector<T>(s[0].size(), T(0)));
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t end = causal ? i + 1 : s[i].size();
    T mx = s[i][0];
    for (std::size_t j = 0; j < end; ++j) mx = std::max(mx, s[i][j]);
    T z = 0;
    for (std::size_t j = 0; j < end; ++j) z += std::exp(s[i][j] - mx);
    for (std::size_t j = 0; j < end; ++j) out[i][j] = std::exp(s[i][j] - mx) / z;
  }
  return out;
}

// Columns [h*dh, (h+1)*dh) of x W.
template <typename T>
Mat<T> project_head(const Tensor<T>& x, const Tensor<T>& w, std::size_t h, std::size_t dh) {
  const std::size_t n = x.dim(0), d = x.dim(1), out_cols = w.dim(1);
  Mat<T> m(n, std::vector<T>(dh, T(0)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < dh; ++c) {
      T acc = 0;
      for (std::size_t l = 0; l < d; ++l) acc += x[i * d + l] * w[l * out_cols + h * dh + c];
      m[i][c] = acc;
    }
  return m;
}

template <typename T>
Mat<T> rotate(const Mat<T>& m) {
  return to_mat(rope_apply(to_tensor(m)));
}

}  // namespace

template <typename T>
Tensor<T> krr_predict_oracle(const Tensor<T>& train_x, const Tensor<T>& train_y,
                             std::span<const T> query_x, const Kernel<T>& kernel, T lambda) {
  const std::size_t n = train_x.dim(0), d = train_x.dim(1), m = train_y.dim(1);
  auto row = [&](std::size_t i) { return std::span<const T>(train_x.data().subspan(i * d, d)); };
  Mat<T> gram(n, std::vector<T>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) gram[i][j] = kernel(row(i), row(j)) + (i == j ? lambda : T(0));
  const Mat<T> inv = inverse(gram);
  Mat<T> kx(1, std::vector<T>(n));
  for (std::size_t j = 0; j < n; ++j) kx[0][j] = kernel(query_x, row(j));
  const Mat<T> f = mat_mul(mat_mul(kx, inv), to_mat(train_y));
  Tensor<T> out({m});
  for (std::size_t c = 0; c < m; ++c) out[c] = f[0][c];
  return out;
}

template <typename T>
Tensor<T> ridge_primal_predict(const Tensor<T>& train_x, const Tensor<T>& train_y,
                               std::span<const T> query_x, T lambda) {
  const Mat<T> x = to_mat(train_x);
  const std::size_t n = x.size(), d = x[0].size(), m = train_y.dim(1);
  Mat<T> xt(d, std::vector<T>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) xt[j][i] = x[i][j];
  Mat<T> normal = mat_mul(xt, x);
  for (std::size_t j = 0; j < d; ++j) normal[j][j] += lambda;
  const Mat<T> weights = mat_mul(mat_mul(inverse(normal), xt), to_mat(train_y));
  Tensor<T> out({m});
  for (std::size_t c = 0; c < m; ++c) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += query_x[j] * weights[j][c];
    out[c] = acc;
  }
  return out;
}

template <typename T>
Tensor<T> cubit_composition_oracle(const Tensor<T>& x, const mixers::MixerWeights<T>& w,
                                   const mixers::MixerConfig& cfg) {
  using mixers::Variant;
  const std::size_t n = x.dim(0), d = x.dim(1), heads = cfg.heads, dh = cfg.head_dim();
  const bool bypass = cfg.bypass == mixers::Bypass::Identity;
  const T score_scale = static_cast<T>(cfg.score_scale());
  Tensor<T> out({n, d});

  for (std::size_t h = 0; h < heads; ++h) {
    Mat<T> q = project_head(x, w.w_q, h, dh);
    Mat<T> k = project_head(x, w.w_k, h, dh);
    const Mat<T> v = project_head(x, w.w_v, h, dh);
    Mat<T> r = cfg.variant == Variant::KRRShare ? k : project_head(x, *w.w_r, h, dh);

    std::vector<T> s_hat(n, T(1));
    if (mixers::has_lrr(cfg.variant) && !bypass) {
      const T lower = (*w.lrr_lower)[h];
      const T raw = (*w.lrr_range)[h];
      const T range = std::log1p(std::exp(raw));
      for (std::size_t i = 0; i < n; ++i) {
        T logit = 0;
        for (std::size_t l = 0; l < d; ++l) logit += x[i * d + l] * (*w.w_s)[l * heads + h];
        s_hat[i] = lower + range / (T(1) + std::exp(-logit));
      }
    }

    const T c = (*w.ref_scale)[h];
    Mat<T> norm_r = r;
    for (auto& row : norm_r) {
      T sq = 0;
      for (T e : row) sq += e * e;
      const T nrm = std::max(std::sqrt(sq), T(linalg::kNormFloor));
      for (T& e : row) e = c * e / nrm;
    }
    if (cfg.rope) {
      q = rotate(q);
      k = rotate(k);
      r = rotate(r);
      norm_r = rotate(norm_r);
    }

    Mat<T> attn(n, std::vector<T>(n));
    Mat<T> sim(n, std::vector<T>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T qk = 0, rr = 0;
        for (std::size_t l = 0; l < dh; ++l) {
          qk += q[i][l] * k[j][l];
          rr += r[i][l] * norm_r[j][l];
        }
        attn[i][j] = score_scale * qk;
        sim[i][j] = rr;
      }
    attn = softmax_rows(attn, cfg.causal);

    Mat<T> sigma(n, std::vector<T>(n, T(0)));
    if (bypass) {
      for (std::size_t i = 0; i < n; ++i) sigma[i][i] = T(1);
    } else {
      Mat<T> sigma_inv = softmax_rows(sim, cfg.causal);
      const T lambda = std::exp((*w.log_lambda)[h]);
      for (std::size_t i = 0; i < n; ++i) sigma_inv[i][i] += lambda;
      sigma = inverse(sigma_inv);
    }

    Mat<T> scaled_v = v;
    for (std::size_t i = 0; i < n; ++i)
      for (T& e : scaled_v[i]) e *= s_hat[i];
    const Mat<T> z = mat_mul(attn, mat_mul(sigma, scaled_v));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < dh; ++l) out[i * d + h * dh + l] = z[i][l];
  }
  return out;
}

template <typename T>
Tensor<T> llr_normal_equations_oracle(const Tensor<T>& q, const Tensor<T>& k,
                                      const Tensor<T>& v, bool causal, T reg, T score_scale) {
  const std::size_t n = q.dim(0), d = q.dim(1), dv = v.dim(1), p = d + 1;
  Mat<T> scores(n, std::vector<T>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t l = 0; l < d; ++l) acc += q[i * d + l] * k[j * d + l];
      scores[i][j] = score_scale * acc;
    }
  const Mat<T> weights = softmax_rows(scores, causal);

  Tensor<T> out({n, dv});
  for (std::size_t i = 0; i < n; ++i) {
    // X^T W X and X^T W V with design rows [1, k_j].
    Mat<T> normal(p, std::vector<T>(p, T(0)));
    Mat<T> rhs(p, std::vector<T>(dv, T(0)));
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<T> row(p);
      row[0] = T(1);
      for (std::size_t l = 0; l < d; ++l) row[l + 1] = k[j * d + l];
      for (std::size_t a = 0; a < p; ++a) {
        for (std::size_t b = 0; b < p; ++b) normal[a][b] += weights[i][j] * row[a] * row[b];
        for (std::size_t c = 0; c < dv; ++c) rhs[a][c] += weights[i][j] * row[a] * v[j * dv + c];
      }
    }
    for (std::size_t a = 1; a < p; ++a) normal[a][a] += reg;
    const Mat<T> theta = mat_mul(inverse(normal), rhs);
    for (std::size_t c = 0; c < dv; ++c) {
      T acc = theta[0][c];
      for (std::size_t l = 0; l < d; ++l) acc += q[i * d + l] * theta[l + 1][c];
      out[i * dv + c] = acc;
    }
  }
  return out;
}

#define KRRMIX_INSTANTIATE(T)                                                             \
  template Tensor<T> krr_predict_oracle(const Tensor<T>&, const Tensor<T>&,               \
                                        std::span<const T>, const Kernel<T>&, T);         \
  template Tensor<T> ridge_primal_predict(const Tensor<T>&, const Tensor<T>&,             \
                                          std::span<const T>, T);                         \
  template Tensor<T> cubit_composition_oracle(const Tensor<T>&,                           \
                                              const mixers::MixerWeights<T>&,             \
                                              const mixers::MixerConfig&);                \
  template Tensor<T> llr_normal_equations_oracle(const Tensor<T>&, const Tensor<T>&,      \
                                                 const Tensor<T>&, bool, T, T);

KRRMIX_INSTANTIATE(float)
KRRMIX_INSTANTIATE(double)

#undef KRRMIX_INSTANTIATE

}  // namespace krrmix::oracles
