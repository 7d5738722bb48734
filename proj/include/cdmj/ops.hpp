// Recorded tensor operations: elementwise math, reductions, dense/conv
// layers, group norm, and the layout ops the networks are built from.
// Every op computes the forward value; when a tape is supplied and any
// operand is recorded, it also emits a pull closure for the reverse sweep.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cdmj/tape.hpp"
#include "cdmj/tensor.hpp"

namespace cdmj {
namespace ops {

namespace detail {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// C[M,N] += A[M,K] * B[K,N]
template <class S>
void gemm_nn(int M, int N, int K, const S* A, const S* B, S* C) {
    for (int m = 0; m < M; ++m) {
        S* c = C + static_cast<std::size_t>(m) * N;
        const S* a = A + static_cast<std::size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const S av = a[k];
            if (av == S(0)) continue;
            const S* b = B + static_cast<std::size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class S>
void gemm_nt(int M, int N, int K, const S* A, const S* B, S* C) {
    for (int m = 0; m < M; ++m) {
        const S* a = A + static_cast<std::size_t>(m) * K;
        S* c = C + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const S* b = B + static_cast<std::size_t>(n) * K;
            S acc = S(0);
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[n] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class S>
void gemm_tn(int M, int N, int K, const S* A, const S* B, S* C) {
    for (int k = 0; k < K; ++k) {
        const S* a = A + static_cast<std::size_t>(k) * M;
        const S* b = B + static_cast<std::size_t>(k) * N;
        for (int m = 0; m < M; ++m) {
            const S av = a[m];
            if (av == S(0)) continue;
            S* c = C + static_cast<std::size_t>(m) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

// 3x3 patches with zero padding 1; col is [Cin*9, Ho*Wo].
template <class S>
void im2col3x3(const S* x, int C, int H, int W, int stride, int Ho, int Wo, S* col) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                S* dst = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * (static_cast<std::size_t>(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    S* row = dst + static_cast<std::size_t>(oy) * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(row, row + Wo, S(0));
                        continue;
                    }
                    const S* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        row[ox] = (ix < 0 || ix >= W) ? S(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <class S>
void col2im3x3(const S* col, int C, int H, int W, int stride, int Ho, int Wo, S* x) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const S* src = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * (static_cast<std::size_t>(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H) continue;
                    S* dst = x + (static_cast<std::size_t>(c) * H + iy) * W;
                    const S* row = src + static_cast<std::size_t>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < W) dst[ix] += row[ox];
                    }
                }
            }
        }
    }
}

template <class S>
bool rec(Tape<S>* tape, std::initializer_list<int> nodes) {
    if (!tape) return false;
    for (int n : nodes)
        if (n >= 0) return true;
    return false;
}

template <class S>
void accum(Tape<S>& t, int node, const std::vector<S>& g) {
    auto& buf = t.grad_buf(node);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

// ---- elementwise binary ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
    check_same_shape(a, b, "add");
    Tensor<S> out(a.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    if (detail::rec(tape, {a.node, b.node})) {
        const int pa = a.node, pb = b.node;
        out.node = tape->emit(out.size(), [pa, pb](Tape<S>& t, const std::vector<S>& g) {
            if (pa >= 0) detail::accum(t, pa, g);
            if (pb >= 0) detail::accum(t, pb, g);
        });
    }
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
    check_same_shape(a, b, "sub");
    Tensor<S> out(a.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    if (detail::rec(tape, {a.node, b.node})) {
        const int pa = a.node, pb = b.node;
        out.node = tape->emit(out.size(), [pa, pb](Tape<S>& t, const std::vector<S>& g) {
            if (pa >= 0) detail::accum(t, pa, g);
            if (pb >= 0) {
                auto& buf = t.grad_buf(pb);
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] -= g[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
    check_same_shape(a, b, "mul");
    Tensor<S> out(a.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    if (detail::rec(tape, {a.node, b.node})) {
        const int pa = a.node, pb = b.node;
        std::vector<S> ad = a.data, bd = b.data;
        out.node = tape->emit(out.size(), [pa, pb, ad, bd](Tape<S>& t, const std::vector<S>& g) {
            if (pa >= 0) {
                auto& buf = t.grad_buf(pa);
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * bd[i];
            }
            if (pb >= 0) {
                auto& buf = t.grad_buf(pb);
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * ad[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
    check_same_shape(a, b, "div");
    Tensor<S> out(a.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] / b.data[i];
    if (detail::rec(tape, {a.node, b.node})) {
        const int pa = a.node, pb = b.node;
        std::vector<S> ad = a.data, bd = b.data;
        out.node = tape->emit(out.size(), [pa, pb, ad, bd](Tape<S>& t, const std::vector<S>& g) {
            if (pa >= 0) {
                auto& buf = t.grad_buf(pa);
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] / bd[i];
            }
            if (pb >= 0) {
                auto& buf = t.grad_buf(pb);
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
            }
        });
    }
    return out;
}

// out = a * s where s is a scalar tensor (shape [1]).
template <class S>
Tensor<S> mul_scalar_t(const Tensor<S>& a, const Tensor<S>& s, Tape<S>* tape) {
    if (s.size() != 1) throw std::invalid_argument("mul_scalar_t: scalar operand must have one element");
    Tensor<S> out(a.shape);
    const S sv = s.data[0];
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] * sv;
    if (detail::rec(tape, {a.node, s.node})) {
        const int pa = a.node, ps = s.node;
        std::vector<S> ad = a.data;
        out.node = tape->emit(out.size(), [pa, ps, ad, sv](Tape<S>& t, const std::vector<S>& g) {
            if (pa >= 0) {
                auto& buf = t.grad_buf(pa);
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * sv;
            }
            if (ps >= 0) {
                S acc = S(0);
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * ad[i];
                t.grad_buf(ps)[0] += acc;
            }
        });
    }
    return out;
}

// ---- elementwise unary ----

namespace detail {
template <class S, class F, class D>
Tensor<S> unary(const Tensor<S>& x, Tape<S>* tape, F fwd, D dfdx) {
    Tensor<S> out(x.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = fwd(x.data[i]);
    if (rec(tape, {x.node})) {
        const int px = x.node;
        std::vector<S> xd = x.data;
        out.node = tape->emit(out.size(), [px, xd, dfdx](Tape<S>& t, const std::vector<S>& g) {
            auto& buf = t.grad_buf(px);
            for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * dfdx(xd[i]);
        });
    }
    return out;
}
}  // namespace detail

template <class S>
Tensor<S> relu(const Tensor<S>& x, Tape<S>* tape) {
    return detail::unary(
        x, tape, [](S v) { return v > S(0) ? v : S(0); }, [](S v) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> softplus(const Tensor<S>& x, Tape<S>* tape) {
    auto f = [](S v) {
        const double d = static_cast<double>(v);
        return static_cast<S>(d > 30.0 ? d : std::log1p(std::exp(d)));
    };
    auto df = [](S v) { return static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); };
    return detail::unary(x, tape, f, df);
}

template <class S>
Tensor<S> nlog(const Tensor<S>& x, Tape<S>* tape) {
    return detail::unary(
        x, tape, [](S v) { return static_cast<S>(std::log(static_cast<double>(v))); },
        [](S v) { return S(1) / v; });
}

template <class S>
Tensor<S> sqrt_ew(const Tensor<S>& x, Tape<S>* tape) {
    return detail::unary(
        x, tape, [](S v) { return static_cast<S>(std::sqrt(static_cast<double>(v))); },
        [](S v) { return static_cast<S>(0.5 / std::sqrt(static_cast<double>(v))); });
}

// Standard normal CDF with analytic density as the derivative.
template <class S>
Tensor<S> normal_cdf(const Tensor<S>& x, Tape<S>* tape) {
    auto f = [](S v) { return static_cast<S>(0.5 * std::erfc(-static_cast<double>(v) * detail::kInvSqrt2)); };
    auto df = [](S v) {
        const double d = static_cast<double>(v);
        return static_cast<S>(detail::kInvSqrt2Pi * std::exp(-0.5 * d * d));
    };
    return detail::unary(x, tape, f, df);
}

template <class S>
Tensor<S> clamp_min(const Tensor<S>& x, double lo, Tape<S>* tape) {
    const S l = static_cast<S>(lo);
    return detail::unary(
        x, tape, [l](S v) { return v > l ? v : l; }, [l](S v) { return v > l ? S(1) : S(0); });
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, double c, Tape<S>* tape) {
    const S cv = static_cast<S>(c);
    return detail::unary(
        x, tape, [cv](S v) { return v * cv; }, [cv](S) { return cv; });
}

template <class S>
Tensor<S> shift(const Tensor<S>& x, double c, Tape<S>* tape) {
    const S cv = static_cast<S>(c);
    return detail::unary(
        x, tape, [cv](S v) { return v + cv; }, [](S) { return S(1); });
}

// Nearest integer, ties to even; gradient passes straight through.
template <class S>
Tensor<S> round_ste(const Tensor<S>& x, Tape<S>* tape) {
    return detail::unary(
        x, tape, [](S v) { return static_cast<S>(std::nearbyint(static_cast<double>(v))); },
        [](S) { return S(1); });
}

// ---- reductions ----

template <class S>
Tensor<S> sum_all(const Tensor<S>& x, Tape<S>* tape) {
    S acc = S(0);
    for (S v : x.data) acc += v;
    Tensor<S> out = Tensor<S>::scalar(acc);
    if (detail::rec(tape, {x.node})) {
        const int px = x.node;
        const std::size_t n = x.size();
        out.node = tape->emit(1, [px, n](Tape<S>& t, const std::vector<S>& g) {
            auto& buf = t.grad_buf(px);
            for (std::size_t i = 0; i < n; ++i) buf[i] += g[0];
        });
    }
    return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x, Tape<S>* tape) {
    return scale(sum_all(x, tape), 1.0 / static_cast<double>(x.size()), tape);
}

// ---- dense ----

// x: [N] or [R,N]; w: [M,N]; b: [M].
template <class S>
Tensor<S> dense(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, Tape<S>* tape) {
    if (w.shape.size() != 2) throw std::invalid_argument("dense: weight must be rank 2, got " + shape_str(w.shape));
    const int M = w.shape[0], N = w.shape[1];
    if (b.shape != Shape{M}) throw std::invalid_argument("dense: bias shape " + shape_str(b.shape) + " != [" + std::to_string(M) + "]");
    int R = 1;
    bool batched = false;
    if (x.shape.size() == 1) {
        if (x.shape[0] != N) throw std::invalid_argument("dense: input width " + std::to_string(x.shape[0]) + " != weight in-dim " + std::to_string(N));
    } else if (x.shape.size() == 2) {
        if (x.shape[1] != N) throw std::invalid_argument("dense: input width " + std::to_string(x.shape[1]) + " != weight in-dim " + std::to_string(N));
        R = x.shape[0];
        batched = true;
    } else {
        throw std::invalid_argument("dense: input must be rank 1 or 2, got " + shape_str(x.shape));
    }
    Tensor<S> out(batched ? Shape{R, M} : Shape{M});
    for (int r = 0; r < R; ++r)
        for (int m = 0; m < M; ++m) out.data[static_cast<std::size_t>(r) * M + m] = b.data[m];
    detail::gemm_nt(R, M, N, x.data.data(), w.data.data(), out.data.data());
    if (detail::rec(tape, {x.node, w.node, b.node})) {
        const int px = x.node, pw = w.node, pb = b.node;
        std::vector<S> xd = x.data, wd = w.data;
        out.node = tape->emit(out.size(), [px, pw, pb, xd, wd, R, M, N](Tape<S>& t, const std::vector<S>& g) {
            if (px >= 0) detail::gemm_nn(R, N, M, g.data(), wd.data(), t.grad_buf(px).data());
            if (pw >= 0) detail::gemm_tn(M, N, R, g.data(), xd.data(), t.grad_buf(pw).data());
            if (pb >= 0) {
                auto& buf = t.grad_buf(pb);
                for (int r = 0; r < R; ++r)
                    for (int m = 0; m < M; ++m) buf[m] += g[static_cast<std::size_t>(r) * M + m];
            }
        });
    }
    return out;
}

// ---- conv 3x3, zero padding 1, stride 1 or 2 ----

// x: [Cin,H,W]; w: [Cout,Cin,3,3]; b: [Cout].
template <class S>
Tensor<S> conv3x3(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride, Tape<S>* tape) {
    if (x.shape.size() != 3) throw std::invalid_argument("conv3x3: input must be [C,H,W], got " + shape_str(x.shape));
    if (w.shape.size() != 4 || w.shape[2] != 3 || w.shape[3] != 3)
        throw std::invalid_argument("conv3x3: weight must be [Cout,Cin,3,3], got " + shape_str(w.shape));
    const int Cin = x.shape[0], H = x.shape[1], W = x.shape[2];
    const int Cout = w.shape[0];
    if (w.shape[1] != Cin)
        throw std::invalid_argument("conv3x3: input channels " + std::to_string(Cin) + " != weight in-channels " + std::to_string(w.shape[1]));
    if (b.shape != Shape{Cout}) throw std::invalid_argument("conv3x3: bias shape " + shape_str(b.shape) + " != [" + std::to_string(Cout) + "]");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv3x3: stride must be 1 or 2");
    if (stride == 2 && (H % 2 != 0 || W % 2 != 0))
        throw std::invalid_argument("conv3x3: stride-2 requires even spatial dims, got " + shape_str(x.shape));
    const int Ho = (stride == 1) ? H : H / 2;
    const int Wo = (stride == 1) ? W : W / 2;
    const int P = Ho * Wo, K = Cin * 9;

    std::vector<S> col(static_cast<std::size_t>(K) * P);
    detail::im2col3x3(x.data.data(), Cin, H, W, stride, Ho, Wo, col.data());
    Tensor<S> out(Shape{Cout, Ho, Wo});
    for (int oc = 0; oc < Cout; ++oc)
        std::fill_n(out.data.begin() + static_cast<std::size_t>(oc) * P, P, b.data[oc]);
    detail::gemm_nn(Cout, P, K, w.data.data(), col.data(), out.data.data());

    if (detail::rec(tape, {x.node, w.node, b.node})) {
        const int px = x.node, pw = w.node, pb = b.node;
        std::vector<S> xd = x.data, wd = w.data;
        out.node = tape->emit(out.size(), [px, pw, pb, xd, wd, Cin, H, W, Cout, Ho, Wo, P, K,
                                           stride](Tape<S>& t, const std::vector<S>& g) {
            if (pw >= 0 || px >= 0) {
                std::vector<S> col(static_cast<std::size_t>(K) * P);
                if (pw >= 0) {
                    detail::im2col3x3(xd.data(), Cin, H, W, stride, Ho, Wo, col.data());
                    detail::gemm_nt(Cout, K, P, g.data(), col.data(), t.grad_buf(pw).data());
                }
                if (px >= 0) {
                    std::fill(col.begin(), col.end(), S(0));
                    detail::gemm_tn(K, P, Cout, wd.data(), g.data(), col.data());
                    detail::col2im3x3(col.data(), Cin, H, W, stride, Ho, Wo, t.grad_buf(px).data());
                }
            }
            if (pb >= 0) {
                auto& buf = t.grad_buf(pb);
                for (int oc = 0; oc < Cout; ++oc) {
                    S acc = S(0);
                    const S* go = g.data() + static_cast<std::size_t>(oc) * P;
                    for (int p = 0; p < P; ++p) acc += go[p];
                    buf[oc] += acc;
                }
            }
        });
    }
    return out;
}

// ---- nearest-neighbor 2x upsample ----

template <class S>
Tensor<S> upsample2x(const Tensor<S>& x, Tape<S>* tape) {
    if (x.shape.size() != 3) throw std::invalid_argument("upsample2x: input must be [C,H,W], got " + shape_str(x.shape));
    const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    Tensor<S> out(Shape{C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                const S v = x.data[(static_cast<std::size_t>(c) * H + y) * W + xx];
                S* o = out.data.data() + (static_cast<std::size_t>(c) * 2 * H + 2 * y) * 2 * W + 2 * xx;
                o[0] = v;
                o[1] = v;
                o[2 * W] = v;
                o[2 * W + 1] = v;
            }
    if (detail::rec(tape, {x.node})) {
        const int px = x.node;
        out.node = tape->emit(out.size(), [px, C, H, W](Tape<S>& t, const std::vector<S>& g) {
            auto& buf = t.grad_buf(px);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        const S* go = g.data() + (static_cast<std::size_t>(c) * 2 * H + 2 * y) * 2 * W + 2 * xx;
                        buf[(static_cast<std::size_t>(c) * H + y) * W + xx] += go[0] + go[1] + go[2 * W] + go[2 * W + 1];
                    }
        });
    }
    return out;
}

// ---- group norm with per-channel scale/shift ----

template <class S>
Tensor<S> group_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, int groups, Tape<S>* tape,
                     double eps = 1e-5) {
    if (x.shape.size() != 3) throw std::invalid_argument("group_norm: input must be [C,H,W], got " + shape_str(x.shape));
    const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    if (groups <= 0 || C % groups != 0)
        throw std::invalid_argument("group_norm: channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
    if (gamma.shape != Shape{C} || beta.shape != Shape{C})
        throw std::invalid_argument("group_norm: scale/shift must be [C]");
    const int cg = C / groups;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const std::size_t m = static_cast<std::size_t>(cg) * hw;

    std::vector<S> xhat(x.size());
    std::vector<S> inv_std(static_cast<std::size_t>(groups));
    for (int gidx = 0; gidx < groups; ++gidx) {
        const S* base = x.data.data() + static_cast<std::size_t>(gidx) * m;
        double mean = 0.0;
        for (std::size_t i = 0; i < m; ++i) mean += static_cast<double>(base[i]);
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double d = static_cast<double>(base[i]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(m);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(gidx)] = static_cast<S>(is);
        S* xh = xhat.data() + static_cast<std::size_t>(gidx) * m;
        for (std::size_t i = 0; i < m; ++i) xh[i] = static_cast<S>((static_cast<double>(base[i]) - mean) * is);
    }
    Tensor<S> out(x.shape);
    for (int c = 0; c < C; ++c) {
        const S gc = gamma.data[c], bc = beta.data[c];
        const S* xh = xhat.data() + static_cast<std::size_t>(c) * hw;
        S* o = out.data.data() + static_cast<std::size_t>(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) o[i] = gc * xh[i] + bc;
    }

    if (detail::rec(tape, {x.node, gamma.node, beta.node})) {
        const int px = x.node, pg = gamma.node, pb = beta.node;
        std::vector<S> gam = gamma.data;
        out.node = tape->emit(out.size(), [px, pg, pb, xhat, inv_std, gam, C, cg, hw, m, groups](
                                              Tape<S>& t, const std::vector<S>& g) {
            if (pb >= 0) {
                auto& buf = t.grad_buf(pb);
                for (int c = 0; c < C; ++c) {
                    S acc = S(0);
                    const S* go = g.data() + static_cast<std::size_t>(c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) acc += go[i];
                    buf[c] += acc;
                }
            }
            if (pg >= 0) {
                auto& buf = t.grad_buf(pg);
                for (int c = 0; c < C; ++c) {
                    S acc = S(0);
                    const S* go = g.data() + static_cast<std::size_t>(c) * hw;
                    const S* xh = xhat.data() + static_cast<std::size_t>(c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) acc += go[i] * xh[i];
                    buf[c] += acc;
                }
            }
            if (px >= 0) {
                auto& buf = t.grad_buf(px);
                for (int gidx = 0; gidx < groups; ++gidx) {
                    const std::size_t off = static_cast<std::size_t>(gidx) * m;
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int cc = 0; cc < cg; ++cc) {
                        const int c = gidx * cg + cc;
                        const S* go = g.data() + static_cast<std::size_t>(c) * hw;
                        const S* xh = xhat.data() + static_cast<std::size_t>(c) * hw;
                        const double gc = static_cast<double>(gam[c]);
                        for (std::size_t i = 0; i < hw; ++i) {
                            const double dxh = static_cast<double>(go[i]) * gc;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * static_cast<double>(xh[i]);
                        }
                    }
                    const double mean_dxh = sum_dxh / static_cast<double>(m);
                    const double mean_dxh_xh = sum_dxh_xh / static_cast<double>(m);
                    const double is = static_cast<double>(inv_std[static_cast<std::size_t>(gidx)]);
                    for (int cc = 0; cc < cg; ++cc) {
                        const int c = gidx * cg + cc;
                        const S* go = g.data() + static_cast<std::size_t>(c) * hw;
                        const S* xh = xhat.data() + static_cast<std::size_t>(c) * hw;
                        const double gc = static_cast<double>(gam[c]);
                        S* b = buf.data() + off + static_cast<std::size_t>(cc) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            const double dxh = static_cast<double>(go[i]) * gc;
                            b[i] += static_cast<S>(is * (dxh - mean_dxh - static_cast<double>(xh[i]) * mean_dxh_xh));
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- layout ops ----

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape, Tape<S>* tape) {
    if (numel(shape) != x.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(shape));
    Tensor<S> out(std::move(shape), x.data);
    if (detail::rec(tape, {x.node})) {
        const int px = x.node;
        out.node = tape->emit(out.size(), [px](Tape<S>& t, const std::vector<S>& g) { detail::accum(t, px, g); });
    }
    return out;
}

template <class S>
Tensor<S> concat_ch(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
    if (a.shape.size() != 3 || b.shape.size() != 3 || a.shape[1] != b.shape[1] || a.shape[2] != b.shape[2])
        throw std::invalid_argument("concat_ch: incompatible shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const int Ca = a.shape[0], Cb = b.shape[0];
    Tensor<S> out(Shape{Ca + Cb, a.shape[1], a.shape[2]});
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
    if (detail::rec(tape, {a.node, b.node})) {
        const int pa = a.node, pb = b.node;
        const std::size_t na = a.size(), nb = b.size();
        out.node = tape->emit(out.size(), [pa, pb, na, nb](Tape<S>& t, const std::vector<S>& g) {
            if (pa >= 0) {
                auto& buf = t.grad_buf(pa);
                for (std::size_t i = 0; i < na; ++i) buf[i] += g[i];
            }
            if (pb >= 0) {
                auto& buf = t.grad_buf(pb);
                for (std::size_t i = 0; i < nb; ++i) buf[i] += g[na + i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> slice_ch(const Tensor<S>& x, int c0, int c1, Tape<S>* tape) {
    if (x.shape.size() != 3 || c0 < 0 || c1 > x.shape[0] || c0 >= c1)
        throw std::invalid_argument("slice_ch: bad channel range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                    ") for " + shape_str(x.shape));
    const std::size_t hw = static_cast<std::size_t>(x.shape[1]) * x.shape[2];
    Tensor<S> out(Shape{c1 - c0, x.shape[1], x.shape[2]});
    std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(c0 * hw), x.data.begin() + static_cast<std::ptrdiff_t>(c1 * hw),
              out.data.begin());
    if (detail::rec(tape, {x.node})) {
        const int px = x.node;
        const std::size_t off = static_cast<std::size_t>(c0) * hw, n = out.size();
        out.node = tape->emit(out.size(), [px, off, n](Tape<S>& t, const std::vector<S>& g) {
            auto& buf = t.grad_buf(px);
            for (std::size_t i = 0; i < n; ++i) buf[off + i] += g[i];
        });
    }
    return out;
}

// x[C,H,W] + bias[C] broadcast over spatial dims.
template <class S>
Tensor<S> add_chbias(const Tensor<S>& x, const Tensor<S>& bias, Tape<S>* tape) {
    if (x.shape.size() != 3 || bias.shape != Shape{x.shape[0]})
        throw std::invalid_argument("add_chbias: bias " + shape_str(bias.shape) + " does not match " + shape_str(x.shape));
    const int C = x.shape[0];
    const std::size_t hw = static_cast<std::size_t>(x.shape[1]) * x.shape[2];
    Tensor<S> out(x.shape);
    for (int c = 0; c < C; ++c) {
        const S bv = bias.data[c];
        const S* xi = x.data.data() + static_cast<std::size_t>(c) * hw;
        S* o = out.data.data() + static_cast<std::size_t>(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) o[i] = xi[i] + bv;
    }
    if (detail::rec(tape, {x.node, bias.node})) {
        const int px = x.node, pb = bias.node;
        out.node = tape->emit(out.size(), [px, pb, C, hw](Tape<S>& t, const std::vector<S>& g) {
            if (px >= 0) detail::accum(t, px, g);
            if (pb >= 0) {
                auto& buf = t.grad_buf(pb);
                for (int c = 0; c < C; ++c) {
                    S acc = S(0);
                    const S* go = g.data() + static_cast<std::size_t>(c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) acc += go[i];
                    buf[c] += acc;
                }
            }
        });
    }
    return out;
}

// v[C] tiled to [C,H,W].
template <class S>
Tensor<S> tile_ch(const Tensor<S>& v, int H, int W, Tape<S>* tape) {
    if (v.shape.size() != 1) throw std::invalid_argument("tile_ch: input must be rank 1, got " + shape_str(v.shape));
    const int C = v.shape[0];
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor<S> out(Shape{C, H, W});
    for (int c = 0; c < C; ++c)
        std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(c * hw), hw, v.data[static_cast<std::size_t>(c)]);
    if (detail::rec(tape, {v.node})) {
        const int pv = v.node;
        out.node = tape->emit(out.size(), [pv, C, hw](Tape<S>& t, const std::vector<S>& g) {
            auto& buf = t.grad_buf(pv);
            for (int c = 0; c < C; ++c) {
                S acc = S(0);
                const S* go = g.data() + static_cast<std::size_t>(c) * hw;
                for (std::size_t i = 0; i < hw; ++i) acc += go[i];
                buf[c] += acc;
            }
        });
    }
    return out;
}

// [C,H,W] -> [L,C] with L = H*W raster positions as rows.
template <class S>
Tensor<S> chw_to_lc(const Tensor<S>& x, Tape<S>* tape) {
    if (x.shape.size() != 3) throw std::invalid_argument("chw_to_lc: input must be [C,H,W], got " + shape_str(x.shape));
    const int C = x.shape[0];
    const std::size_t L = static_cast<std::size_t>(x.shape[1]) * x.shape[2];
    Tensor<S> out(Shape{static_cast<int>(L), C});
    for (int c = 0; c < C; ++c)
        for (std::size_t l = 0; l < L; ++l) out.data[l * C + c] = x.data[static_cast<std::size_t>(c) * L + l];
    if (detail::rec(tape, {x.node})) {
        const int px = x.node;
        out.node = tape->emit(out.size(), [px, C, L](Tape<S>& t, const std::vector<S>& g) {
            auto& buf = t.grad_buf(px);
            for (int c = 0; c < C; ++c)
                for (std::size_t l = 0; l < L; ++l) buf[static_cast<std::size_t>(c) * L + l] += g[l * C + c];
        });
    }
    return out;
}

template <class S>
Tensor<S> lc_to_chw(const Tensor<S>& x, int H, int W, Tape<S>* tape) {
    if (x.shape.size() != 2 || x.shape[0] != H * W)
        throw std::invalid_argument("lc_to_chw: input " + shape_str(x.shape) + " does not match " + std::to_string(H) + "x" + std::to_string(W));
    const int C = x.shape[1];
    const std::size_t L = static_cast<std::size_t>(H) * W;
    Tensor<S> out(Shape{C, H, W});
    for (std::size_t l = 0; l < L; ++l)
        for (int c = 0; c < C; ++c) out.data[static_cast<std::size_t>(c) * L + l] = x.data[l * C + c];
    if (detail::rec(tape, {x.node})) {
        const int px = x.node;
        out.node = tape->emit(out.size(), [px, C, L](Tape<S>& t, const std::vector<S>& g) {
            auto& buf = t.grad_buf(px);
            for (std::size_t l = 0; l < L; ++l)
                for (int c = 0; c < C; ++c) buf[l * C + c] += g[static_cast<std::size_t>(c) * L + l];
        });
    }
    return out;
}

}  // namespace ops
}  // namespace cdmj
