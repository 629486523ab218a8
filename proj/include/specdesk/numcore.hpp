#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace specdesk::numcore {

// Dense row-major tensor. Scalar type is a template parameter: production
// code runs float with double accumulation in reductions; the finite
// difference oracles instantiate the same code with double.
template <typename S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;        // same length as data once allocated
    bool requires_grad = false; // trainable leaf
    bool needs_grad = false;    // on a path to a trainable leaf

    size_t numel() const { return data.size(); }

    int rows() const { return shape.empty() ? 1 : static_cast<int>(numel()) / shape.back(); }
    int cols() const { return shape.empty() ? 1 : shape.back(); }

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), S(0));
        }
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

template <typename S>
using TensorPtrT = std::shared_ptr<TensorT<S>>;

inline size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        n *= static_cast<size_t>(d);
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        os << shape[i] << (i + 1 < shape.size() ? "x" : "");
    }
    os << ")";
    return os.str();
}

template <typename S>
TensorPtrT<S> make_tensor(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<TensorT<S>>();
    t->shape = std::move(shape);
    t->data.assign(shape_numel(t->shape), S(0));
    t->requires_grad = requires_grad;
    t->needs_grad = requires_grad;
    return t;
}

template <typename S>
TensorPtrT<S> make_tensor(std::vector<int> shape, std::vector<S> values, bool requires_grad = false) {
    auto t = make_tensor<S>(std::move(shape), requires_grad);
    if (values.size() != t->data.size()) {
        throw std::invalid_argument("make_tensor: value count does not match shape " + shape_str(t->shape));
    }
    t->data = std::move(values);
    return t;
}

// ---------------------------------------------------------------------------
// Standalone row kernels, shared by graph ops and forward-only callers.
// ---------------------------------------------------------------------------

// softmax of one row, max-subtracted, sums accumulated in double
template <typename S>
inline void softmax_row(const S* x, S* out, int n, int stride = 1) {
    S mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = std::max(mx, x[i * stride]);
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double e = std::exp(static_cast<double>(x[i * stride] - mx));
        out[i * stride] = static_cast<S>(e);
        sum += e;
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) {
        out[i * stride] = static_cast<S>(out[i * stride] * inv);
    }
}

template <typename S>
inline void log_softmax_row(const S* x, S* out, int n, int stride = 1) {
    S mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = std::max(mx, x[i * stride]);
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        sum += std::exp(static_cast<double>(x[i * stride] - mx));
    }
    const double lse = std::log(sum) + static_cast<double>(mx);
    for (int i = 0; i < n; ++i) {
        out[i * stride] = static_cast<S>(static_cast<double>(x[i * stride]) - lse);
    }
}

template <typename S>
inline double logsumexp_row(const S* x, int n) {
    S mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = std::max(mx, x[i]);
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        sum += std::exp(static_cast<double>(x[i] - mx));
    }
    return std::log(sum) + static_cast<double>(mx);
}

// argmax with ties broken toward the lowest index
template <typename S>
inline int argmax_lowest(const S* x, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i) {
        if (x[i] > x[best]) {
            best = i;
        }
    }
    return best;
}

enum class Divergence { forward_kl, reverse_kl, tvd };

inline const char* divergence_name(Divergence d) {
    switch (d) {
        case Divergence::forward_kl: return "forward_kl";
        case Divergence::reverse_kl: return "reverse_kl";
        case Divergence::tvd: return "tvd";
    }
    return "?";
}

// per-token divergence of one row given teacher log-probs and student log-probs
template <typename S>
inline double divergence_row(const S* teacher_logp, const S* student_logq, int n, Divergence kind) {
    double acc = 0.0;
    switch (kind) {
        case Divergence::forward_kl:
            for (int i = 0; i < n; ++i) {
                const double lp = static_cast<double>(teacher_logp[i]);
                acc += std::exp(lp) * (lp - static_cast<double>(student_logq[i]));
            }
            break;
        case Divergence::reverse_kl:
            for (int i = 0; i < n; ++i) {
                const double lq = static_cast<double>(student_logq[i]);
                acc += std::exp(lq) * (lq - static_cast<double>(teacher_logp[i]));
            }
            break;
        case Divergence::tvd:
            for (int i = 0; i < n; ++i) {
                acc += std::abs(std::exp(static_cast<double>(teacher_logp[i])) -
                                std::exp(static_cast<double>(student_logq[i])));
            }
            acc *= 0.5;
            break;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Compute graph: eager ops recorded on a tape, reverse-mode backward.
// ---------------------------------------------------------------------------

template <typename S>
class GraphT {
  public:
    using Tensor = TensorT<S>;
    using TensorPtr = TensorPtrT<S>;

    // out = a + b, same shape
    TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
        if (a->shape != b->shape) {
            throw std::invalid_argument("add: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
        }
        auto out = result({a, b}, a->shape);
        const size_t n = out->numel();
        for (size_t i = 0; i < n; ++i) {
            out->data[i] = a->data[i] + b->data[i];
        }
        record(out, [a, b, out] {
            const size_t n = out->numel();
            if (a->needs_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
            }
        });
        return out;
    }

    // out = a * b elementwise
    TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
        if (a->shape != b->shape) {
            throw std::invalid_argument("mul: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
        }
        auto out = result({a, b}, a->shape);
        const size_t n = out->numel();
        for (size_t i = 0; i < n; ++i) {
            out->data[i] = a->data[i] * b->data[i];
        }
        record(out, [a, b, out] {
            const size_t n = out->numel();
            if (a->needs_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->data[i];
            }
        });
        return out;
    }

    TensorPtr scale(const TensorPtr& a, S c) {
        auto out = result({a}, a->shape);
        const size_t n = out->numel();
        for (size_t i = 0; i < n; ++i) {
            out->data[i] = a->data[i] * c;
        }
        record(out, [a, out, c] {
            if (!a->needs_grad) return;
            a->ensure_grad();
            const size_t n = out->numel();
            for (size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * c;
        });
        return out;
    }

    // x: (N,M), bias: (M)
    TensorPtr add_bias(const TensorPtr& x, const TensorPtr& bias) {
        const int N = x->rows(), M = x->cols();
        if (static_cast<int>(bias->numel()) != M) {
            throw std::invalid_argument("add_bias: bias length " + shape_str(bias->shape) +
                                        " does not match row width " + shape_str(x->shape));
        }
        auto out = result({x, bias}, x->shape);
        for (int i = 0; i < N; ++i) {
            const S* xr = x->data.data() + static_cast<size_t>(i) * M;
            S* or_ = out->data.data() + static_cast<size_t>(i) * M;
            for (int j = 0; j < M; ++j) {
                or_[j] = xr[j] + bias->data[j];
            }
        }
        record(out, [x, bias, out, N, M] {
            if (x->needs_grad) {
                x->ensure_grad();
                const size_t n = out->numel();
                for (size_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
            }
            if (bias->needs_grad) {
                bias->ensure_grad();
                std::vector<double> acc(M, 0.0);
                for (int i = 0; i < N; ++i) {
                    const S* g = out->grad.data() + static_cast<size_t>(i) * M;
                    for (int j = 0; j < M; ++j) acc[j] += static_cast<double>(g[j]);
                }
                for (int j = 0; j < M; ++j) bias->grad[j] += static_cast<S>(acc[j]);
            }
        });
        return out;
    }

    // (N,K) x (K,M) -> (N,M)
    TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
        check_2d(a, "matmul lhs");
        check_2d(b, "matmul rhs");
        const int N = a->shape[0], K = a->shape[1];
        if (b->shape[0] != K) {
            throw std::invalid_argument("matmul: inner dimensions differ: " + shape_str(a->shape) + " vs " +
                                        shape_str(b->shape));
        }
        const int M = b->shape[1];
        auto out = result({a, b}, {N, M});
        matmul_nn_kernel(a->data.data(), b->data.data(), out->data.data(), N, K, M);
        record(out, [a, b, out, N, K, M] {
            if (a->needs_grad) {
                // dA = dC * B^T; B transposed once so the inner loop is a saxpy
                a->ensure_grad();
                std::vector<S> bt(static_cast<size_t>(M) * K);
                for (int k = 0; k < K; ++k) {
                    const S* br = b->data.data() + static_cast<size_t>(k) * M;
                    for (int m = 0; m < M; ++m) {
                        bt[static_cast<size_t>(m) * K + k] = br[m];
                    }
                }
                for (int i = 0; i < N; ++i) {
                    const S* gr = out->grad.data() + static_cast<size_t>(i) * M;
                    S* ga = a->grad.data() + static_cast<size_t>(i) * K;
                    for (int m = 0; m < M; ++m) {
                        const S g = gr[m];
                        if (g == S(0)) continue;
                        const S* btr = bt.data() + static_cast<size_t>(m) * K;
                        for (int k = 0; k < K; ++k) ga[k] += g * btr[k];
                    }
                }
            }
            if (b->needs_grad) {
                // dB[k,m] = sum_i A[i,k] * dC[i,m]
                b->ensure_grad();
                for (int i = 0; i < N; ++i) {
                    const S* ar = a->data.data() + static_cast<size_t>(i) * K;
                    const S* gr = out->grad.data() + static_cast<size_t>(i) * M;
                    for (int k = 0; k < K; ++k) {
                        const S aik = ar[k];
                        S* gb = b->grad.data() + static_cast<size_t>(k) * M;
                        for (int m = 0; m < M; ++m) gb[m] += aik * gr[m];
                    }
                }
            }
        });
        return out;
    }

    // (N,K) x (M,K)^T -> (N,M); used for the tied output head
    TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
        check_2d(a, "matmul_nt lhs");
        check_2d(b, "matmul_nt rhs");
        const int N = a->shape[0], K = a->shape[1];
        if (b->shape[1] != K) {
            throw std::invalid_argument("matmul_nt: inner dimensions differ: " + shape_str(a->shape) + " vs " +
                                        shape_str(b->shape));
        }
        const int M = b->shape[0];
        auto out = result({a, b}, {N, M});
        {
            // run as A * B^T-transposed so the hot loop is fma over rows
            std::vector<S> bt(static_cast<size_t>(K) * M);
            for (int m = 0; m < M; ++m) {
                const S* br = b->data.data() + static_cast<size_t>(m) * K;
                for (int k = 0; k < K; ++k) {
                    bt[static_cast<size_t>(k) * M + m] = br[k];
                }
            }
            matmul_nn_kernel(a->data.data(), bt.data(), out->data.data(), N, K, M);
        }
        record(out, [a, b, out, N, K, M] {
            if (a->needs_grad) {
                // dA[i,k] = sum_m dC[i,m] * B[m,k]
                a->ensure_grad();
                for (int i = 0; i < N; ++i) {
                    const S* gr = out->grad.data() + static_cast<size_t>(i) * M;
                    S* ga = a->grad.data() + static_cast<size_t>(i) * K;
                    for (int m = 0; m < M; ++m) {
                        const S g = gr[m];
                        if (g == S(0)) continue;
                        const S* br = b->data.data() + static_cast<size_t>(m) * K;
                        for (int k = 0; k < K; ++k) ga[k] += g * br[k];
                    }
                }
            }
            if (b->needs_grad) {
                // dB[m,k] = sum_i dC[i,m] * A[i,k]
                b->ensure_grad();
                for (int i = 0; i < N; ++i) {
                    const S* gr = out->grad.data() + static_cast<size_t>(i) * M;
                    const S* ar = a->data.data() + static_cast<size_t>(i) * K;
                    for (int m = 0; m < M; ++m) {
                        const S g = gr[m];
                        if (g == S(0)) continue;
                        S* gb = b->grad.data() + static_cast<size_t>(m) * K;
                        for (int k = 0; k < K; ++k) gb[k] += g * ar[k];
                    }
                }
            }
        });
        return out;
    }

    // table: (V,d), ids in [0,V) -> (N,d)
    TensorPtr embedding(const TensorPtr& table, const std::vector<int32_t>& ids) {
        check_2d(table, "embedding table");
        const int V = table->shape[0], D = table->shape[1];
        const int N = static_cast<int>(ids.size());
        for (int32_t id : ids) {
            if (id < 0 || id >= V) {
                throw std::invalid_argument("embedding: id " + std::to_string(id) + " outside table " +
                                            shape_str(table->shape));
            }
        }
        auto out = result({table}, {N, D});
        for (int i = 0; i < N; ++i) {
            const S* src = table->data.data() + static_cast<size_t>(ids[i]) * D;
            std::copy(src, src + D, out->data.data() + static_cast<size_t>(i) * D);
        }
        record(out, [table, out, ids, N, D] {
            if (!table->needs_grad) return;
            table->ensure_grad();
            for (int i = 0; i < N; ++i) {
                const S* g = out->grad.data() + static_cast<size_t>(i) * D;
                S* dst = table->grad.data() + static_cast<size_t>(ids[i]) * D;
                for (int j = 0; j < D; ++j) dst[j] += g[j];
            }
        });
        return out;
    }

    // select rows of x by index; backward scatter-adds
    TensorPtr gather_rows(const TensorPtr& x, const std::vector<int32_t>& idx) {
        const int N = x->rows(), M = x->cols();
        for (int32_t i : idx) {
            if (i < 0 || i >= N) {
                throw std::invalid_argument("gather_rows: row " + std::to_string(i) + " outside " +
                                            shape_str(x->shape));
            }
        }
        const int R = static_cast<int>(idx.size());
        auto out = result({x}, {R, M});
        for (int r = 0; r < R; ++r) {
            const S* src = x->data.data() + static_cast<size_t>(idx[r]) * M;
            std::copy(src, src + M, out->data.data() + static_cast<size_t>(r) * M);
        }
        record(out, [x, out, idx, R, M] {
            if (!x->needs_grad) return;
            x->ensure_grad();
            for (int r = 0; r < R; ++r) {
                const S* g = out->grad.data() + static_cast<size_t>(r) * M;
                S* dst = x->grad.data() + static_cast<size_t>(idx[r]) * M;
                for (int j = 0; j < M; ++j) dst[j] += g[j];
            }
        });
        return out;
    }

    // pre-norm layernorm with gain and bias over the last axis
    TensorPtr layernorm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias) {
        const int N = x->rows(), M = x->cols();
        if (static_cast<int>(gain->numel()) != M || static_cast<int>(bias->numel()) != M) {
            throw std::invalid_argument("layernorm: gain/bias width does not match " + shape_str(x->shape));
        }
        auto out = result({x, gain, bias}, x->shape);
        auto xhat = std::make_shared<std::vector<S>>(x->numel());
        auto rstd = std::make_shared<std::vector<S>>(N);
        constexpr double eps = 1e-5;
        for (int i = 0; i < N; ++i) {
            const S* xr = x->data.data() + static_cast<size_t>(i) * M;
            double mean = 0.0;
            for (int j = 0; j < M; ++j) mean += static_cast<double>(xr[j]);
            mean /= M;
            double var = 0.0;
            for (int j = 0; j < M; ++j) {
                const double d = static_cast<double>(xr[j]) - mean;
                var += d * d;
            }
            var /= M;
            const double inv = 1.0 / std::sqrt(var + eps);
            (*rstd)[i] = static_cast<S>(inv);
            S* hr = xhat->data() + static_cast<size_t>(i) * M;
            S* or_ = out->data.data() + static_cast<size_t>(i) * M;
            for (int j = 0; j < M; ++j) {
                hr[j] = static_cast<S>((static_cast<double>(xr[j]) - mean) * inv);
                or_[j] = hr[j] * gain->data[j] + bias->data[j];
            }
        }
        record(out, [x, gain, bias, out, xhat, rstd, N, M] {
            if (gain->needs_grad || bias->needs_grad) {
                std::vector<double> gacc(M, 0.0), bacc(M, 0.0);
                for (int i = 0; i < N; ++i) {
                    const S* g = out->grad.data() + static_cast<size_t>(i) * M;
                    const S* hr = xhat->data() + static_cast<size_t>(i) * M;
                    for (int j = 0; j < M; ++j) {
                        gacc[j] += static_cast<double>(g[j]) * static_cast<double>(hr[j]);
                        bacc[j] += static_cast<double>(g[j]);
                    }
                }
                if (gain->needs_grad) {
                    gain->ensure_grad();
                    for (int j = 0; j < M; ++j) gain->grad[j] += static_cast<S>(gacc[j]);
                }
                if (bias->needs_grad) {
                    bias->ensure_grad();
                    for (int j = 0; j < M; ++j) bias->grad[j] += static_cast<S>(bacc[j]);
                }
            }
            if (x->needs_grad) {
                x->ensure_grad();
                for (int i = 0; i < N; ++i) {
                    const S* g = out->grad.data() + static_cast<size_t>(i) * M;
                    const S* hr = xhat->data() + static_cast<size_t>(i) * M;
                    S* gx = x->grad.data() + static_cast<size_t>(i) * M;
                    double mean_dy = 0.0, mean_dyh = 0.0;
                    for (int j = 0; j < M; ++j) {
                        const double dy = static_cast<double>(g[j]) * static_cast<double>(gain->data[j]);
                        mean_dy += dy;
                        mean_dyh += dy * static_cast<double>(hr[j]);
                    }
                    mean_dy /= M;
                    mean_dyh /= M;
                    const double inv = static_cast<double>((*rstd)[i]);
                    for (int j = 0; j < M; ++j) {
                        const double dy = static_cast<double>(g[j]) * static_cast<double>(gain->data[j]);
                        gx[j] += static_cast<S>((dy - mean_dy - static_cast<double>(hr[j]) * mean_dyh) * inv);
                    }
                }
            }
        });
        return out;
    }

    TensorPtr gelu(const TensorPtr& x) {
        auto out = result({x}, x->shape);
        const size_t n = x->numel();
        const S s = static_cast<S>(std::sqrt(2.0 / 3.14159265358979323846));
        auto th_cache = std::make_shared<std::vector<S>>(n);
        S* th = th_cache->data();
        for (size_t i = 0; i < n; ++i) {
            const S v = x->data[i];
            const S cube = static_cast<S>(0.044715) * v * v * v;
            th[i] = std::tanh(s * (v + cube));
            out->data[i] = static_cast<S>(0.5) * v * (S(1) + th[i]);
        }
        record(out, [x, out, th_cache, s] {
            if (!x->needs_grad) return;
            x->ensure_grad();
            const size_t n = x->numel();
            const S* th = th_cache->data();
            for (size_t i = 0; i < n; ++i) {
                const S v = x->data[i];
                const S sech2 = S(1) - th[i] * th[i];
                const S local = static_cast<S>(0.5) * (S(1) + th[i]) +
                                static_cast<S>(0.5) * v * sech2 * s *
                                    (S(1) + S(3) * static_cast<S>(0.044715) * v * v);
                x->grad[i] += local * out->grad[i];
            }
        });
        return out;
    }

    // softmax along an axis; rejects NaN input
    TensorPtr softmax(const TensorPtr& x, int axis = -1) {
        auto out = result({x}, x->shape);
        apply_axis(x, out, axis, /*log_form=*/false);
        const int ax = normalize_axis(x, axis);
        record(out, [x, out, ax] {
            if (!x->needs_grad) return;
            x->ensure_grad();
            for_each_lane(x->shape, ax, [&](size_t base, size_t stride, int len) {
                double dot = 0.0;
                for (int i = 0; i < len; ++i) {
                    dot += static_cast<double>(out->grad[base + i * stride]) *
                           static_cast<double>(out->data[base + i * stride]);
                }
                for (int i = 0; i < len; ++i) {
                    const size_t k = base + i * stride;
                    x->grad[k] += static_cast<S>(static_cast<double>(out->data[k]) *
                                                 (static_cast<double>(out->grad[k]) - dot));
                }
            });
        });
        return out;
    }

    TensorPtr log_softmax(const TensorPtr& x, int axis = -1) {
        auto out = result({x}, x->shape);
        apply_axis(x, out, axis, /*log_form=*/true);
        const int ax = normalize_axis(x, axis);
        record(out, [x, out, ax] {
            if (!x->needs_grad) return;
            x->ensure_grad();
            for_each_lane(x->shape, ax, [&](size_t base, size_t stride, int len) {
                double gsum = 0.0;
                for (int i = 0; i < len; ++i) {
                    gsum += static_cast<double>(out->grad[base + i * stride]);
                }
                for (int i = 0; i < len; ++i) {
                    const size_t k = base + i * stride;
                    x->grad[k] += static_cast<S>(static_cast<double>(out->grad[k]) -
                                                 std::exp(static_cast<double>(out->data[k])) * gsum);
                }
            });
        });
        return out;
    }

    // fused causal multi-head self attention
    // qkv: (B*L, 3C) rows laid out [q | k | v]; returns (B*L, C)
    TensorPtr causal_attention(const TensorPtr& qkv, int B, int L, int n_heads) {
        const int threeC = qkv->cols();
        if (threeC % 3 != 0 || qkv->rows() != B * L) {
            throw std::invalid_argument("causal_attention: qkv shape " + shape_str(qkv->shape) +
                                        " does not match B=" + std::to_string(B) + " L=" + std::to_string(L));
        }
        const int C = threeC / 3;
        if (C % n_heads != 0) {
            throw std::invalid_argument("causal_attention: width " + std::to_string(C) +
                                        " not divisible by heads " + std::to_string(n_heads));
        }
        const int hd = C / n_heads;
        const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
        auto out = result({qkv}, {B * L, C});
        // attention probabilities kept for backward: (B, H, L, L) row-major
        auto att = std::make_shared<std::vector<S>>(static_cast<size_t>(B) * n_heads * L * L, S(0));
        std::vector<double> scores(L);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < n_heads; ++h) {
                S* att_bh = att->data() + (static_cast<size_t>(b) * n_heads + h) * L * L;
                for (int i = 0; i < L; ++i) {
                    const S* q = qkv->data.data() + static_cast<size_t>(b * L + i) * threeC + h * hd;
                    double mx = -1e300;
                    for (int j = 0; j <= i; ++j) {
                        const S* k = qkv->data.data() + static_cast<size_t>(b * L + j) * threeC + C + h * hd;
                        S dot = S(0);
                        for (int d = 0; d < hd; ++d) dot += q[d] * k[d];
                        scores[j] = static_cast<double>(dot) * inv_scale;
                        mx = std::max(mx, scores[j]);
                    }
                    double sum = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        scores[j] = std::exp(scores[j] - mx);
                        sum += scores[j];
                    }
                    S* att_row = att_bh + static_cast<size_t>(i) * L;
                    const double inv = 1.0 / sum;
                    for (int j = 0; j <= i; ++j) {
                        att_row[j] = static_cast<S>(scores[j] * inv);
                    }
                    S* o = out->data.data() + static_cast<size_t>(b * L + i) * C + h * hd;
                    std::fill(o, o + hd, S(0));
                    for (int j = 0; j <= i; ++j) {
                        const S* v = qkv->data.data() + static_cast<size_t>(b * L + j) * threeC + 2 * C + h * hd;
                        const S p = att_row[j];
                        for (int d = 0; d < hd; ++d) o[d] += p * v[d];
                    }
                }
            }
        }
        record(out, [qkv, out, att, B, L, n_heads, C, hd, inv_scale, threeC] {
            if (!qkv->needs_grad) return;
            qkv->ensure_grad();
            std::vector<double> datt(L);
            for (int b = 0; b < B; ++b) {
                for (int h = 0; h < n_heads; ++h) {
                    const S* att_bh = att->data() + (static_cast<size_t>(b) * n_heads + h) * L * L;
                    for (int i = 0; i < L; ++i) {
                        const S* go = out->grad.data() + static_cast<size_t>(b * L + i) * C + h * hd;
                        const S* att_row = att_bh + static_cast<size_t>(i) * L;
                        // dV and datt
                        double dot = 0.0;
                        for (int j = 0; j <= i; ++j) {
                            const S* v = qkv->data.data() + static_cast<size_t>(b * L + j) * threeC + 2 * C + h * hd;
                            S* gv = qkv->grad.data() + static_cast<size_t>(b * L + j) * threeC + 2 * C + h * hd;
                            S da = S(0);
                            const S p = att_row[j];
                            for (int d = 0; d < hd; ++d) {
                                const S g = go[d];
                                da += g * v[d];
                                gv[d] += p * g;
                            }
                            datt[j] = static_cast<double>(da);
                            dot += static_cast<double>(da) * static_cast<double>(p);
                        }
                        // softmax backward, then into q and k
                        const S* q = qkv->data.data() + static_cast<size_t>(b * L + i) * threeC + h * hd;
                        S* gq = qkv->grad.data() + static_cast<size_t>(b * L + i) * threeC + h * hd;
                        for (int j = 0; j <= i; ++j) {
                            const S ds =
                                static_cast<S>(static_cast<double>(att_row[j]) * (datt[j] - dot) * inv_scale);
                            const S* k = qkv->data.data() + static_cast<size_t>(b * L + j) * threeC + C + h * hd;
                            S* gk = qkv->grad.data() + static_cast<size_t>(b * L + j) * threeC + C + h * hd;
                            for (int d = 0; d < hd; ++d) {
                                gq[d] += ds * k[d];
                                gk[d] += ds * q[d];
                            }
                        }
                    }
                }
            }
        });
        return out;
    }

    // per-row next-token cross entropy; rows whose target is ignore_label get 0 loss and 0 grad
    TensorPtr cross_entropy_rows(const TensorPtr& logits, const std::vector<int32_t>& targets,
                                 int32_t ignore_label) {
        const int N = logits->rows(), V = logits->cols();
        if (static_cast<int>(targets.size()) != N) {
            throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) +
                                        " targets for " + std::to_string(N) + " rows");
        }
        auto out = result({logits}, {N});
        auto lse = std::make_shared<std::vector<double>>(N, 0.0);
        for (int i = 0; i < N; ++i) {
            if (targets[i] == ignore_label) continue;
            if (targets[i] < 0 || targets[i] >= V) {
                throw std::invalid_argument("cross_entropy_rows: target id " + std::to_string(targets[i]) +
                                            " outside vocab " + std::to_string(V));
            }
            const S* row = logits->data.data() + static_cast<size_t>(i) * V;
            (*lse)[i] = logsumexp_row(row, V);
            out->data[i] = static_cast<S>((*lse)[i] - static_cast<double>(row[targets[i]]));
        }
        record(out, [logits, out, targets, ignore_label, lse, N, V] {
            if (!logits->needs_grad) return;
            logits->ensure_grad();
            for (int i = 0; i < N; ++i) {
                if (targets[i] == ignore_label) continue;
                const double g = static_cast<double>(out->grad[i]);
                if (g == 0.0) continue;
                const S* row = logits->data.data() + static_cast<size_t>(i) * V;
                S* gr = logits->grad.data() + static_cast<size_t>(i) * V;
                for (int v = 0; v < V; ++v) {
                    double p = std::exp(static_cast<double>(row[v]) - (*lse)[i]);
                    if (v == targets[i]) p -= 1.0;
                    gr[v] += static_cast<S>(p * g);
                }
            }
        });
        return out;
    }

    // per-row divergence between a frozen teacher (log-probs) and student logits;
    // gradients flow to the student only
    TensorPtr divergence_rows(const TensorPtr& teacher_logp, const TensorPtr& student_logits, Divergence kind) {
        if (teacher_logp->shape != student_logits->shape) {
            throw std::invalid_argument("divergence_rows: shape mismatch " + shape_str(teacher_logp->shape) +
                                        " vs " + shape_str(student_logits->shape));
        }
        if (teacher_logp->needs_grad) {
            throw std::invalid_argument("divergence_rows: teacher distribution must be frozen");
        }
        const int N = student_logits->rows(), V = student_logits->cols();
        auto out = result({student_logits}, {N});
        auto logq = std::make_shared<std::vector<S>>(student_logits->numel());
        for (int i = 0; i < N; ++i) {
            const S* srow = student_logits->data.data() + static_cast<size_t>(i) * V;
            S* qrow = logq->data() + static_cast<size_t>(i) * V;
            log_softmax_row(srow, qrow, V);
            out->data[i] = static_cast<S>(
                divergence_row(teacher_logp->data.data() + static_cast<size_t>(i) * V, qrow, V, kind));
        }
        record(out, [teacher_logp, student_logits, out, logq, kind, N, V] {
            if (!student_logits->needs_grad) return;
            student_logits->ensure_grad();
            for (int i = 0; i < N; ++i) {
                const double g = static_cast<double>(out->grad[i]);
                if (g == 0.0) continue;
                const S* lp = teacher_logp->data.data() + static_cast<size_t>(i) * V;
                const S* lq = logq->data() + static_cast<size_t>(i) * V;
                S* gr = student_logits->grad.data() + static_cast<size_t>(i) * V;
                switch (kind) {
                    case Divergence::forward_kl:
                        for (int v = 0; v < V; ++v) {
                            const double q = std::exp(static_cast<double>(lq[v]));
                            const double p = std::exp(static_cast<double>(lp[v]));
                            gr[v] += static_cast<S>((q - p) * g);
                        }
                        break;
                    case Divergence::reverse_kl: {
                        const double total = static_cast<double>(out->data[i]);
                        for (int v = 0; v < V; ++v) {
                            const double q = std::exp(static_cast<double>(lq[v]));
                            const double r = static_cast<double>(lq[v]) - static_cast<double>(lp[v]);
                            gr[v] += static_cast<S>(q * (r - total) * g);
                        }
                        break;
                    }
                    case Divergence::tvd: {
                        double dot = 0.0;
                        // gv = d(tvd)/dq_v = 0.5*sign(q_v - p_v); then softmax backward
                        std::vector<double> gv(V);
                        for (int v = 0; v < V; ++v) {
                            const double q = std::exp(static_cast<double>(lq[v]));
                            const double p = std::exp(static_cast<double>(lp[v]));
                            gv[v] = q > p ? 0.5 : (q < p ? -0.5 : 0.0);
                            dot += gv[v] * q;
                        }
                        for (int v = 0; v < V; ++v) {
                            const double q = std::exp(static_cast<double>(lq[v]));
                            gr[v] += static_cast<S>(q * (gv[v] - dot) * g);
                        }
                        break;
                    }
                }
            }
        });
        return out;
    }

    // scalar = sum_i w[i] * x[i] with constant weights
    TensorPtr weighted_sum(const TensorPtr& x, const std::vector<double>& weights) {
        if (weights.size() != x->numel()) {
            throw std::invalid_argument("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                                        shape_str(x->shape));
        }
        auto out = result({x}, {1});
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i] * static_cast<double>(x->data[i]);
        }
        out->data[0] = static_cast<S>(acc);
        record(out, [x, out, weights] {
            if (!x->needs_grad) return;
            x->ensure_grad();
            const double g = static_cast<double>(out->grad[0]);
            for (size_t i = 0; i < weights.size(); ++i) {
                x->grad[i] += static_cast<S>(weights[i] * g);
            }
        });
        return out;
    }

    TensorPtr sum(const TensorPtr& x) {
        auto out = result({x}, {1});
        double acc = 0.0;
        for (const S v : x->data) acc += static_cast<double>(v);
        out->data[0] = static_cast<S>(acc);
        record(out, [x, out] {
            if (!x->needs_grad) return;
            x->ensure_grad();
            const S g = out->grad[0];
            for (size_t i = 0; i < x->numel(); ++i) x->grad[i] += g;
        });
        return out;
    }

    // reverse-mode sweep from a scalar loss; each tape node visited once
    void backward(const TensorPtr& loss) {
        if (loss->numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss->shape));
        }
        loss->ensure_grad();
        loss->grad[0] = S(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
            if (!it->out->grad.empty() && it->backprop) {
                it->backprop();
            }
        }
    }

    size_t size() const { return tape_.size(); }

  private:
    struct Node {
        TensorPtr out;
        std::function<void()> backprop;
    };

    std::vector<Node> tape_;

    TensorPtr result(std::initializer_list<TensorPtr> inputs, std::vector<int> shape) {
        auto out = make_tensor<S>(std::move(shape));
        for (const auto& in : inputs) {
            out->needs_grad = out->needs_grad || in->needs_grad;
        }
        return out;
    }

    void record(const TensorPtr& out, std::function<void()> fn) {
        if (out->needs_grad) {
            tape_.push_back({out, std::move(fn)});
        }
    }

    static void check_2d(const TensorPtr& t, const char* what) {
        if (t->shape.size() != 2) {
            throw std::invalid_argument(std::string(what) + ": expected 2-d tensor, got " + shape_str(t->shape));
        }
    }

    static int normalize_axis(const TensorPtr& x, int axis) {
        const int nd = static_cast<int>(x->shape.size());
        int ax = axis < 0 ? axis + nd : axis;
        if (ax < 0 || ax >= nd) {
            throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                        shape_str(x->shape));
        }
        return ax;
    }

    template <typename F>
    static void for_each_lane(const std::vector<int>& shape, int axis, F&& fn) {
        size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= shape[i];
        for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
        const int len = shape[axis];
        for (size_t o = 0; o < outer; ++o) {
            for (size_t in = 0; in < inner; ++in) {
                fn(o * len * inner + in, inner, len);
            }
        }
    }

    void apply_axis(const TensorPtr& x, const TensorPtr& out, int axis, bool log_form) {
        for (const S v : x->data) {
            if (std::isnan(static_cast<double>(v))) {
                throw std::invalid_argument("softmax: NaN in input");
            }
        }
        const int ax = normalize_axis(x, axis);
        for_each_lane(x->shape, ax, [&](size_t base, size_t stride, int len) {
            if (log_form) {
                log_softmax_row(x->data.data() + base, out->data.data() + base, len, static_cast<int>(stride));
            } else {
                softmax_row(x->data.data() + base, out->data.data() + base, len, static_cast<int>(stride));
            }
        });
    }

    // C = A * B, FMA-accumulated in the working precision (sgemm style)
    static void matmul_nn_kernel(const S* a, const S* b, S* c, int N, int K, int M) {
        for (int i = 0; i < N; ++i) {
            const S* ar = a + static_cast<size_t>(i) * K;
            S* cr = c + static_cast<size_t>(i) * M;
            std::fill(cr, cr + M, S(0));
            for (int k = 0; k < K; ++k) {
                const S aik = ar[k];
                const S* br = b + static_cast<size_t>(k) * M;
                for (int m = 0; m < M; ++m) {
                    cr[m] += aik * br[m];
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Adam with bias correction; state owned by the trainer.
// ---------------------------------------------------------------------------

template <typename S>
struct AdamStateT {
    std::vector<std::vector<double>> m, v;
    int64_t step = 0;
};

template <typename S>
void adam_step(const std::vector<TensorPtrT<S>>& params, AdamStateT<S>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
    if (lr <= 0.0) {
        throw std::invalid_argument("adam_step: learning rate must be positive, got " + std::to_string(lr));
    }
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->numel(), 0.0);
            state.v[i].assign(params[i]->numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw std::invalid_argument("adam_step: state does not match parameter list");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        auto& t = *params[p];
        if (t.grad.empty()) {
            continue; // parameter untouched this step
        }
        auto& m = state.m[p];
        auto& v = state.v[p];
        for (size_t i = 0; i < t.numel(); ++i) {
            const double g = static_cast<double>(t.grad[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            t.data[i] = static_cast<S>(static_cast<double>(t.data[i]) - lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

using Tensor = TensorT<float>;
using TensorPtr = TensorPtrT<float>;
using Graph = GraphT<float>;
using AdamState = AdamStateT<float>;

}  // namespace specdesk::numcore
