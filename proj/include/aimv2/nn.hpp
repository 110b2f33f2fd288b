#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "aimv2/masks.hpp"
#include "aimv2/rng.hpp"
#include "aimv2/tensor.hpp"

namespace aimv2 {

// A trainable tensor paired with its gradient accumulator.
struct Param {
    Tensor w;
    Tensor g;

    Param() = default;
    explicit Param(std::vector<int64_t> shape) : w(shape), g(std::move(shape)) {}
};

// Non-owning registry of named parameters. The registration order is the
// canonical order for optimizer state, checkpoints, checksums and the
// gradient checker.
class ParamSet {
public:
    struct Entry {
        std::string name;
        Param* param;
    };

    void add(std::string name, Param& p) {
        if (!p.w.same_shape(p.g)) {
            throw std::invalid_argument("ParamSet: gradient shape differs for " + name);
        }
        for (const auto& e : entries_) {
            if (e.name == name) {
                throw std::invalid_argument("ParamSet: duplicate name " + name);
            }
        }
        entries_.push_back({std::move(name), &p});
    }

    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& e : entries_) {
            n += e.param->w.numel();
        }
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) {
            e.param->g.zero();
        }
    }

    double grad_norm() const {
        double sq = 0.0;
        for (const auto& e : entries_) {
            const Tensor& g = e.param->g;
            for (int64_t i = 0; i < g.numel(); ++i) {
                sq += g[i] * g[i];
            }
        }
        return std::sqrt(sq);
    }

private:
    std::vector<Entry> entries_;
};

inline real silu(real z) {
    const real s = 1.0 / (1.0 + std::exp(-z));
    return z * s;
}

inline real silu_grad(real z) {
    const real s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

// ---------------------------------------------------------------------
// RMSNorm: y = gain * x / sqrt(mean(x^2) + eps), mean over the last dim.
// ---------------------------------------------------------------------

struct RmsNormCache {
    Tensor x;
    std::vector<real> inv_rms; // per row
    double eps = 0.0;
};

inline Tensor rms_norm_fwd(const Tensor& x, const Tensor& gain, double eps,
                           RmsNormCache* cache = nullptr) {
    const int64_t d = x.cols();
    if (d <= 0 || gain.numel() != d) {
        throw std::invalid_argument("rms_norm: gain does not match last dimension");
    }
    const int64_t n = x.rows();
    Tensor y(x.shape());
    if (cache) {
        cache->x = x;
        cache->inv_rms.assign(static_cast<size_t>(n), 0.0);
        cache->eps = eps;
    }
    for (int64_t i = 0; i < n; ++i) {
        const real* xr = x.data() + i * d;
        real* yr = y.data() + i * d;
        real sq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            sq += xr[j] * xr[j];
        }
        const real inv = 1.0 / std::sqrt(sq / static_cast<real>(d) + eps);
        if (cache) {
            cache->inv_rms[static_cast<size_t>(i)] = inv;
        }
        for (int64_t j = 0; j < d; ++j) {
            yr[j] = gain[j] * xr[j] * inv;
        }
    }
    return y;
}

inline Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    return rms_norm_fwd(x, gain, eps);
}

inline void rms_norm_bwd(const Tensor& dy, const Tensor& gain, const RmsNormCache& cache,
                         Tensor& dx, Tensor& dgain) {
    const int64_t n = cache.x.rows(), d = cache.x.cols();
    for (int64_t i = 0; i < n; ++i) {
        const real* xr = cache.x.data() + i * d;
        const real* dyr = dy.data() + i * d;
        real* dxr = dx.data() + i * d;
        const real inv = cache.inv_rms[static_cast<size_t>(i)];
        real dot = 0.0; // sum_j dy_j * gain_j * x_j
        for (int64_t j = 0; j < d; ++j) {
            dot += dyr[j] * gain[j] * xr[j];
            dgain[j] += dyr[j] * xr[j] * inv;
        }
        const real scale = dot * inv * inv * inv / static_cast<real>(d);
        for (int64_t j = 0; j < d; ++j) {
            dxr[j] += dyr[j] * gain[j] * inv - xr[j] * scale;
        }
    }
}

// ---------------------------------------------------------------------
// SwiGLU FFN: y = (silu(x Wg) .* (x Wi)) Wo   (no biases)
// ---------------------------------------------------------------------

struct SwigluCache {
    Tensor x;
    Tensor u; // x Wg
    Tensor v; // x Wi
    Tensor h; // silu(u) .* v
};

inline Tensor swiglu_ffn_fwd(const Tensor& x, const Tensor& w_gate, const Tensor& w_in,
                             const Tensor& w_out, SwigluCache* cache = nullptr) {
    const int64_t n = x.rows(), d = x.cols(), h = w_gate.cols();
    if (w_gate.rows() != d || w_in.rows() != d || w_in.cols() != h ||
        w_out.rows() != h || w_out.cols() != d) {
        throw std::invalid_argument("swiglu_ffn: weight shapes inconsistent");
    }
    Tensor u({n, h}), v({n, h}), hid({n, h});
    matmul(x, w_gate, u);
    matmul(x, w_in, v);
    for (int64_t i = 0; i < n * h; ++i) {
        hid[i] = silu(u[i]) * v[i];
    }
    Tensor y(x.shape());
    matmul(hid, w_out, y);
    if (cache) {
        cache->x = x;
        cache->u = std::move(u);
        cache->v = std::move(v);
        cache->h = std::move(hid);
    }
    return y;
}

inline Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_in,
                         const Tensor& w_out) {
    return swiglu_ffn_fwd(x, w_gate, w_in, w_out);
}

inline void swiglu_ffn_bwd(const Tensor& dy, const Tensor& w_gate, const Tensor& w_in,
                           const Tensor& w_out, const SwigluCache& cache, Tensor& dx,
                           Tensor& dw_gate, Tensor& dw_in, Tensor& dw_out) {
    const int64_t n = cache.x.rows(), h = cache.u.cols();
    Tensor dh({n, h});
    matmul_nt(dy, w_out, dh);          // dh = dy Wo^T
    matmul_tn(cache.h, dy, dw_out, true); // dWo += h^T dy

    Tensor du({n, h}), dv({n, h});
    for (int64_t i = 0; i < n * h; ++i) {
        du[i] = dh[i] * cache.v[i] * silu_grad(cache.u[i]);
        dv[i] = dh[i] * silu(cache.u[i]);
    }
    matmul_nt(du, w_gate, dx, true); // dx += du Wg^T
    matmul_nt(dv, w_in, dx, true);   // dx += dv Wi^T
    matmul_tn(cache.x, du, dw_gate, true);
    matmul_tn(cache.x, dv, dw_in, true);
}

// ---------------------------------------------------------------------
// Masked multi-head attention over already-projected q/k/v.
// Forbidden columns are skipped entirely: they receive exactly zero
// weight and never influence the output, bit for bit.
// ---------------------------------------------------------------------

struct MhaCache {
    Tensor q, k, v;
    Tensor attn; // [heads, L, L], zero at forbidden entries
    int64_t heads = 0;
};

inline Tensor masked_mha_fwd(const Tensor& q, const Tensor& k, const Tensor& v,
                             const AttentionMask& mask, int64_t heads,
                             MhaCache* cache = nullptr) {
    const int64_t len = q.rows(), d = q.cols();
    if (!q.same_shape(k) || !q.same_shape(v)) {
        throw std::invalid_argument("masked_mha: q/k/v shapes differ");
    }
    if (mask.size != len) {
        throw std::invalid_argument("masked_mha: mask size does not match sequence");
    }
    if (heads <= 0 || d % heads != 0) {
        throw std::invalid_argument("masked_mha: head count does not divide width");
    }
    const int64_t hd = d / heads;
    const real scale = 1.0 / std::sqrt(static_cast<real>(hd));

    Tensor out({len, d});
    Tensor attn({heads, len, len});
    std::vector<real> scores(static_cast<size_t>(len));

    for (int64_t h = 0; h < heads; ++h) {
        const int64_t off = h * hd;
        real* attn_h = attn.data() + h * len * len;
        for (int64_t i = 0; i < len; ++i) {
            real max_score = 0.0;
            bool any = false;
            for (int64_t j = 0; j < len; ++j) {
                if (!mask.allowed(i, j)) {
                    continue;
                }
                real s = 0.0;
                const real* qi = q.data() + i * d + off;
                const real* kj = k.data() + j * d + off;
                for (int64_t c = 0; c < hd; ++c) {
                    s += qi[c] * kj[c];
                }
                s *= scale;
                scores[static_cast<size_t>(j)] = s;
                if (!any || s > max_score) {
                    max_score = s;
                    any = true;
                }
            }
            if (!any) {
                throw std::invalid_argument("masked_mha: row with all columns forbidden");
            }
            real denom = 0.0;
            for (int64_t j = 0; j < len; ++j) {
                if (mask.allowed(i, j)) {
                    const real e = std::exp(scores[static_cast<size_t>(j)] - max_score);
                    attn_h[i * len + j] = e;
                    denom += e;
                }
            }
            const real inv = 1.0 / denom;
            real* orow = out.data() + i * d + off;
            for (int64_t j = 0; j < len; ++j) {
                if (!mask.allowed(i, j)) {
                    continue;
                }
                const real a = attn_h[i * len + j] * inv;
                attn_h[i * len + j] = a;
                const real* vj = v.data() + j * d + off;
                for (int64_t c = 0; c < hd; ++c) {
                    orow[c] += a * vj[c];
                }
            }
        }
    }
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->attn = std::move(attn);
        cache->heads = heads;
    }
    return out;
}

inline Tensor masked_mha(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttentionMask& mask, int64_t heads) {
    return masked_mha_fwd(q, k, v, mask, heads);
}

inline void masked_mha_bwd(const Tensor& dout, const AttentionMask& mask, const MhaCache& cache,
                           Tensor& dq, Tensor& dk, Tensor& dv) {
    const int64_t len = cache.q.rows(), d = cache.q.cols();
    const int64_t heads = cache.heads, hd = d / heads;
    const real scale = 1.0 / std::sqrt(static_cast<real>(hd));
    std::vector<real> da(static_cast<size_t>(len));

    for (int64_t h = 0; h < heads; ++h) {
        const int64_t off = h * hd;
        const real* attn_h = cache.attn.data() + h * len * len;
        for (int64_t i = 0; i < len; ++i) {
            const real* drow = dout.data() + i * d + off;
            real inner = 0.0; // sum_j a_ij * da_ij
            for (int64_t j = 0; j < len; ++j) {
                if (!mask.allowed(i, j)) {
                    continue;
                }
                const real* vj = cache.v.data() + j * d + off;
                real g = 0.0;
                for (int64_t c = 0; c < hd; ++c) {
                    g += drow[c] * vj[c];
                }
                da[static_cast<size_t>(j)] = g;
                inner += attn_h[i * len + j] * g;
            }
            for (int64_t j = 0; j < len; ++j) {
                if (!mask.allowed(i, j)) {
                    continue;
                }
                const real a = attn_h[i * len + j];
                // dv_j += a * dout_i
                real* dvj = dv.data() + j * d + off;
                for (int64_t c = 0; c < hd; ++c) {
                    dvj[c] += a * drow[c];
                }
                const real ds = a * (da[static_cast<size_t>(j)] - inner) * scale;
                const real* kj = cache.k.data() + j * d + off;
                const real* qi = cache.q.data() + i * d + off;
                real* dqi = dq.data() + i * d + off;
                real* dkj = dk.data() + j * d + off;
                for (int64_t c = 0; c < hd; ++c) {
                    dqi[c] += ds * kj[c];
                    dkj[c] += ds * qi[c];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------
// Attention layer (projections around masked MHA) and pre-norm block.
// ---------------------------------------------------------------------

struct AttentionParams {
    Param wq, wk, wv, wo;
    Param bq, bk, bv, bo;
    bool use_bias = true;
    int64_t heads = 1;

    void init(int64_t d, int64_t n_heads, bool bias, Rng& rng, double std_dev = 0.02) {
        heads = n_heads;
        use_bias = bias;
        for (Param* p : {&wq, &wk, &wv, &wo}) {
            *p = Param({d, d});
            for (int64_t i = 0; i < p->w.numel(); ++i) {
                p->w[i] = rng.normal() * std_dev;
            }
        }
        for (Param* p : {&bq, &bk, &bv, &bo}) {
            *p = Param({d});
        }
    }

    void register_params(ParamSet& ps, const std::string& prefix) {
        ps.add(prefix + ".wq", wq);
        ps.add(prefix + ".wk", wk);
        ps.add(prefix + ".wv", wv);
        ps.add(prefix + ".wo", wo);
        if (use_bias) {
            ps.add(prefix + ".bq", bq);
            ps.add(prefix + ".bk", bk);
            ps.add(prefix + ".bv", bv);
            ps.add(prefix + ".bo", bo);
        }
    }
};

struct AttentionCache {
    Tensor x;
    Tensor q, k, v;
    Tensor mha_out;
    MhaCache mha;
};

inline Tensor attention_fwd(const Tensor& x, const AttentionParams& p, const AttentionMask& mask,
                            AttentionCache* cache = nullptr) {
    const int64_t n = x.rows(), d = x.cols();
    Tensor q({n, d}), k({n, d}), v({n, d});
    matmul(x, p.wq.w, q);
    matmul(x, p.wk.w, k);
    matmul(x, p.wv.w, v);
    if (p.use_bias) {
        add_row_bias(q, p.bq.w);
        add_row_bias(k, p.bk.w);
        add_row_bias(v, p.bv.w);
    }
    Tensor o = masked_mha_fwd(q, k, v, mask, p.heads, cache ? &cache->mha : nullptr);
    Tensor y({n, d});
    matmul(o, p.wo.w, y);
    if (p.use_bias) {
        add_row_bias(y, p.bo.w);
    }
    if (cache) {
        cache->x = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->mha_out = std::move(o);
    }
    return y;
}

inline void attention_bwd(const Tensor& dy, AttentionParams& p, const AttentionMask& mask,
                          const AttentionCache& cache, Tensor& dx) {
    const int64_t n = cache.x.rows(), d = cache.x.cols();
    Tensor dmha({n, d});
    matmul_nt(dy, p.wo.w, dmha);
    matmul_tn(cache.mha_out, dy, p.wo.g, true);
    if (p.use_bias) {
        accumulate_bias_grad(dy, p.bo.g);
    }

    Tensor dq({n, d}), dk({n, d}), dv({n, d});
    masked_mha_bwd(dmha, mask, cache.mha, dq, dk, dv);

    matmul_nt(dq, p.wq.w, dx, true);
    matmul_nt(dk, p.wk.w, dx, true);
    matmul_nt(dv, p.wv.w, dx, true);
    matmul_tn(cache.x, dq, p.wq.g, true);
    matmul_tn(cache.x, dk, p.wk.g, true);
    matmul_tn(cache.x, dv, p.wv.g, true);
    if (p.use_bias) {
        accumulate_bias_grad(dq, p.bq.g);
        accumulate_bias_grad(dk, p.bk.g);
        accumulate_bias_grad(dv, p.bv.g);
    }
}

// Pre-norm residual block: x + Attn(RMSNorm(x)), then + SwiGLU(RMSNorm(.)).
struct BlockParams {
    Param norm1_gain, norm2_gain;
    AttentionParams attn;
    Param w_gate, w_in, w_out;

    void init(int64_t d, int64_t heads, int64_t hidden, bool bias, Rng& rng,
              double std_dev = 0.02) {
        norm1_gain = Param({d});
        norm1_gain.w.fill(1.0);
        norm2_gain = Param({d});
        norm2_gain.w.fill(1.0);
        attn.init(d, heads, bias, rng, std_dev);
        w_gate = Param({d, hidden});
        w_in = Param({d, hidden});
        w_out = Param({hidden, d});
        for (Param* p : {&w_gate, &w_in, &w_out}) {
            for (int64_t i = 0; i < p->w.numel(); ++i) {
                p->w[i] = rng.normal() * std_dev;
            }
        }
    }

    void register_params(ParamSet& ps, const std::string& prefix) {
        ps.add(prefix + ".norm1", norm1_gain);
        attn.register_params(ps, prefix + ".attn");
        ps.add(prefix + ".norm2", norm2_gain);
        ps.add(prefix + ".ffn.w_gate", w_gate);
        ps.add(prefix + ".ffn.w_in", w_in);
        ps.add(prefix + ".ffn.w_out", w_out);
    }
};

constexpr double rms_norm_eps = 1e-6;

struct BlockCache {
    RmsNormCache norm1;
    AttentionCache attn;
    Tensor x1; // after attention residual
    RmsNormCache norm2;
    SwigluCache ffn;
};

inline Tensor transformer_block_fwd(const Tensor& x, const BlockParams& p,
                                    const AttentionMask& mask, BlockCache* cache = nullptr) {
    Tensor n1 = rms_norm_fwd(x, p.norm1_gain.w, rms_norm_eps, cache ? &cache->norm1 : nullptr);
    Tensor a = attention_fwd(n1, p.attn, mask, cache ? &cache->attn : nullptr);
    a.add_(x);
    Tensor n2 = rms_norm_fwd(a, p.norm2_gain.w, rms_norm_eps, cache ? &cache->norm2 : nullptr);
    Tensor f = swiglu_ffn_fwd(n2, p.w_gate.w, p.w_in.w, p.w_out.w, cache ? &cache->ffn : nullptr);
    f.add_(a);
    if (cache) {
        cache->x1 = std::move(a);
    }
    return f;
}

inline Tensor transformer_block(const Tensor& x, const BlockParams& p, const AttentionMask& mask) {
    return transformer_block_fwd(x, p, mask);
}

inline void transformer_block_bwd(const Tensor& dy, BlockParams& p, const AttentionMask& mask,
                                  const BlockCache& cache, Tensor& dx) {
    const auto shape = cache.x1.shape();
    Tensor dx1 = dy; // residual path
    Tensor dn2(shape);
    swiglu_ffn_bwd(dy, p.w_gate.w, p.w_in.w, p.w_out.w, cache.ffn, dn2, p.w_gate.g, p.w_in.g,
                   p.w_out.g);
    rms_norm_bwd(dn2, p.norm2_gain.w, cache.norm2, dx1, p.norm2_gain.g);

    Tensor dn1(shape);
    attention_bwd(dx1, p.attn, mask, cache.attn, dn1);
    dx.add_(dx1); // residual path into x
    rms_norm_bwd(dn1, p.norm1_gain.w, cache.norm1, dx, p.norm1_gain.g);
}

} // namespace aimv2
