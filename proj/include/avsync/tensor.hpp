#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "avsync/common.hpp"

namespace avsync {

// Dense row-major double tensor with shared storage. Gradients live next to
// the values and are allocated lazily the first time backward reaches them.
class Tensor {
    struct Impl {
        Shape shape;
        mutable std::vector<double> values;
        mutable std::vector<double> grad;
        bool requires_grad = false;
        mutable bool from_op = false;  // produced by a taped op
    };

public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->values.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
    }

    static Tensor from_values(Shape shape, std::vector<double> values) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        t.impl_->shape = std::move(shape);
        t.impl_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from_values({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.data()) v = rng.normal() * stddev;
        return t;
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& v : t.data()) v = rng.uniform(lo, hi);
        return t;
    }

    // Tensor is a handle onto shared storage: const methods hand out mutable
    // views of the impl, the way shared-pointer-like tensor types usually do.
    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->values.size()); }

    std::vector<double>& data() const { return impl_->values; }
    double& operator[](int64_t i) const { return impl_->values[static_cast<size_t>(i)]; }

    double scalar_value() const {
        if (numel() != 1) throw ContractError("scalar_value on tensor of shape " + shape_str(shape()));
        return impl_->values[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }
    bool from_op() const { return impl_->from_op; }
    void mark_from_op() const { impl_->from_op = true; }

    // true if backward should deposit gradient here
    bool wants_grad() const { return impl_->requires_grad || impl_->from_op; }

    std::vector<double>& grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
        return impl_->grad;
    }
    bool grad_allocated() const { return !impl_->grad.empty(); }
    void zero_grad() const {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

    bool all_finite() const {
        for (double v : impl_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::shared_ptr<Impl> impl_;
};

// Ordered record of executed differentiable ops. Forward ops append nodes;
// backward replays them once, in reverse. Calling backward twice without
// zeroing leaf grads accumulates, matching the usual autograd convention.
class Tape {
    struct Node {
        Tensor output;
        std::function<void()> pull;  // reads output grad, accumulates into inputs
    };

public:
    void record(Tensor output, std::function<void()> pull) {
        output.mark_from_op();
        nodes_.push_back({std::move(output), std::move(pull)});
    }

    size_t size() const { return nodes_.size(); }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        bool found = false;
        for (auto& n : nodes_) {
            n.output.zero_grad();
            if (n.output.same_impl(loss)) found = true;
        }
        if (!found) throw ContractError("backward: loss tensor is not on the tape");
        Tensor seed = loss;
        seed.grad()[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->pull();
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void accumulate(Tensor t, const std::vector<double>& g) {
    auto& dst = t.grad();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// ---- elementwise --------------------------------------------------------

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (tape)
        tape->record(out, [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.wants_grad()) detail::accumulate(a, g);
            if (b.wants_grad()) detail::accumulate(b, g);
        });
    return out;
}

inline Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (tape)
        tape->record(out, [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.wants_grad()) detail::accumulate(a, g);
            if (b.wants_grad()) {
                auto& bg = b.grad();
                for (size_t i = 0; i < bg.size(); ++i) bg[i] -= g[i];
            }
        });
    return out;
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (tape)
        tape->record(out, [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.wants_grad()) {
                auto& ag = a.grad();
                const auto& bv2 = b.data();
                for (size_t i = 0; i < ag.size(); ++i) ag[i] += g[i] * bv2[i];
            }
            if (b.wants_grad()) {
                auto& bg = b.grad();
                const auto& av2 = a.data();
                for (size_t i = 0; i < bg.size(); ++i) bg[i] += g[i] * av2[i];
            }
        });
    return out;
}

inline Tensor scale(Tape* tape, const Tensor& a, double c) {
    Tensor out(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (tape)
        tape->record(out, [a, out, c]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (size_t i = 0; i < ag.size(); ++i) ag[i] += g[i] * c;
        });
    return out;
}

inline Tensor add_scalar(Tape* tape, const Tensor& a, double c) {
    Tensor out(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
    if (tape)
        tape->record(out, [a, out]() mutable {
            if (a.wants_grad()) detail::accumulate(a, out.grad());
        });
    return out;
}

inline Tensor relu(Tape* tape, const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
    if (tape)
        tape->record(out, [a, out]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            const auto& av2 = a.data();
            auto& ag = a.grad();
            for (size_t i = 0; i < ag.size(); ++i)
                if (av2[i] > 0.0) ag[i] += g[i];
        });
    return out;
}

inline Tensor leaky_relu(Tape* tape, const Tensor& a, double slope = 0.01) {
    Tensor out(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : slope * av[i];
    if (tape)
        tape->record(out, [a, out, slope]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            const auto& av2 = a.data();
            auto& ag = a.grad();
            for (size_t i = 0; i < ag.size(); ++i) ag[i] += av2[i] > 0.0 ? g[i] : slope * g[i];
        });
    return out;
}

inline Tensor elem_exp(Tape* tape, const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
    if (tape)
        tape->record(out, [a, out]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            const auto& ov2 = out.data();
            auto& ag = a.grad();
            for (size_t i = 0; i < ag.size(); ++i) ag[i] += g[i] * ov2[i];
        });
    return out;
}

inline Tensor elem_log(Tape* tape, const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
    if (tape)
        tape->record(out, [a, out]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            const auto& av2 = a.data();
            auto& ag = a.grad();
            for (size_t i = 0; i < ag.size(); ++i) ag[i] += g[i] / av2[i];
        });
    return out;
}

// ---- matrix ops ---------------------------------------------------------

inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    double* op = out.data().data();
    for (int i = 0; i < m; ++i) {
        double* orow = op + static_cast<size_t>(i) * n;
        const double* arow = ap + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = bp + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (tape)
        tape->record(out, [a, b, out, m, k, n]() mutable {
            const double* g = out.grad().data();
            if (a.wants_grad()) {
                // dA = dOut * B^T
                double* ag = a.grad().data();
                const double* bp2 = b.data().data();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const double* grow = g + static_cast<size_t>(i) * n;
                        const double* brow = bp2 + static_cast<size_t>(p) * n;
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ag[static_cast<size_t>(i) * k + p] += s;
                    }
            }
            if (b.wants_grad()) {
                // dB = A^T * dOut
                double* bg = b.grad().data();
                const double* ap2 = a.data().data();
                for (int p = 0; p < k; ++p) {
                    double* bgrow = bg + static_cast<size_t>(p) * n;
                    for (int i = 0; i < m; ++i) {
                        const double av = ap2[static_cast<size_t>(i) * k + p];
                        const double* grow = g + static_cast<size_t>(i) * n;
                        for (int j = 0; j < n; ++j) bgrow[j] += av * grow[j];
                    }
                }
            }
        });
    return out;
}

inline Tensor transpose(Tape* tape, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects rank-2, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    const auto& av = a.data();
    auto& ov = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ov[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
    if (tape)
        tape->record(out, [a, out, m, n]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ag[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
        });
    return out;
}

// ---- reductions ---------------------------------------------------------

inline Tensor sum_all(Tape* tape, const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (tape)
        tape->record(out, [a, out]() mutable {
            if (!a.wants_grad()) return;
            const double g = out.grad()[0];
            auto& ag = a.grad();
            for (double& v : ag) v += g;
        });
    return out;
}

inline Tensor mean_all(Tape* tape, const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s * inv);
    if (tape)
        tape->record(out, [a, out, inv]() mutable {
            if (!a.wants_grad()) return;
            const double g = out.grad()[0] * inv;
            auto& ag = a.grad();
            for (double& v : ag) v += g;
        });
    return out;
}

// mean over one axis, axis dropped from the output shape
inline Tensor mean_axis(Tape* tape, const Tensor& a, int axis) {
    if (axis < 0 || axis >= a.rank()) throw ShapeError("mean_axis: axis out of range for " + shape_str(a.shape()));
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.rank(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t n = s[static_cast<size_t>(axis)];
    Shape out_shape;
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis) out_shape.push_back(s[static_cast<size_t>(i)]);
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out(out_shape);
    const auto& av = a.data();
    auto& ov = out.data();
    const double inv = 1.0 / static_cast<double>(n);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t i = 0; i < inner; ++i) ov[static_cast<size_t>(o * inner + i)] += av[static_cast<size_t>((o * n + j) * inner + i)] * inv;
    if (tape)
        tape->record(out, [a, out, outer, inner, n, inv]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < n; ++j)
                    for (int64_t i = 0; i < inner; ++i)
                        ag[static_cast<size_t>((o * n + j) * inner + i)] += g[static_cast<size_t>(o * inner + i)] * inv;
        });
    return out;
}

// ---- softmax / layer norm ----------------------------------------------

// numerically stabilised by max-subtraction along the chosen axis
inline Tensor softmax(Tape* tape, const Tensor& a, int axis) {
    if (axis < 0 || axis >= a.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(a.shape()));
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.rank(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t n = s[static_cast<size_t>(axis)];
    Tensor out(s);
    const auto& av = a.data();
    auto& ov = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            const auto at = [&](int64_t j) { return static_cast<size_t>((o * n + j) * inner + i); };
            double mx = av[at(0)];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, av[at(j)]);
            double denom = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double e = std::exp(av[at(j)] - mx);
                ov[at(j)] = e;
                denom += e;
            }
            for (int64_t j = 0; j < n; ++j) ov[at(j)] /= denom;
        }
    if (tape)
        tape->record(out, [a, out, outer, inner, n]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            const auto& ov2 = out.data();
            auto& ag = a.grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    const auto at = [&](int64_t j) { return static_cast<size_t>((o * n + j) * inner + i); };
                    double dot = 0.0;
                    for (int64_t j = 0; j < n; ++j) dot += g[at(j)] * ov2[at(j)];
                    for (int64_t j = 0; j < n; ++j) ag[at(j)] += ov2[at(j)] * (g[at(j)] - dot);
                }
        });
    return out;
}

// normalises over the last axis, then affine-scales with gamma/beta
inline Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    const int c = x.dim(x.rank() - 1);
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("layer_norm: gamma/beta length must match last axis of " + shape_str(x.shape()));
    const int64_t rows = x.numel() / c;
    Tensor out(x.shape());
    std::vector<double> inv_std(static_cast<size_t>(rows));
    std::vector<double> xhat(x.data().size());
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xv[base + j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = xv[base + j] - mean;
            var += d * d;
        }
        var /= c;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = istd;
        for (int j = 0; j < c; ++j) {
            const double h = (xv[base + j] - mean) * istd;
            xhat[base + j] = h;
            ov[base + j] = h * gv[static_cast<size_t>(j)] + bv[static_cast<size_t>(j)];
        }
    }
    if (tape)
        tape->record(out, [x, gamma, beta, out, rows, c, inv_std = std::move(inv_std), xhat = std::move(xhat)]() mutable {
            const auto& g = out.grad();
            const auto& gv2 = gamma.data();
            if (gamma.wants_grad()) {
                auto& gg = gamma.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const size_t base = static_cast<size_t>(r) * c;
                    for (int j = 0; j < c; ++j) gg[static_cast<size_t>(j)] += g[base + j] * xhat[base + j];
                }
            }
            if (beta.wants_grad()) {
                auto& bg = beta.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const size_t base = static_cast<size_t>(r) * c;
                    for (int j = 0; j < c; ++j) bg[static_cast<size_t>(j)] += g[base + j];
                }
            }
            if (x.wants_grad()) {
                auto& xg = x.grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const size_t base = static_cast<size_t>(r) * c;
                    const double istd = inv_std[static_cast<size_t>(r)];
                    double sum_gy = 0.0, sum_gy_xhat = 0.0;
                    for (int j = 0; j < c; ++j) {
                        const double gy = g[base + j] * gv2[static_cast<size_t>(j)];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat[base + j];
                    }
                    for (int j = 0; j < c; ++j) {
                        const double gy = g[base + j] * gv2[static_cast<size_t>(j)];
                        xg[base + j] += istd * (gy - (sum_gy + xhat[base + j] * sum_gy_xhat) / c);
                    }
                }
            }
        });
    return out;
}

// ---- shape / gather ops --------------------------------------------------

inline Tensor reshape(Tape* tape, const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    Tensor out = Tensor::from_values(std::move(new_shape), a.data());
    if (tape)
        tape->record(out, [a, out]() mutable {
            if (a.wants_grad()) detail::accumulate(a, out.grad());
        });
    return out;
}

inline Tensor concat_rows(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const int c = parts[0].dim(1);
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != c)
            throw ShapeError("concat_rows: incompatible part shape " + shape_str(p.shape()));
        total += p.dim(0);
    }
    Tensor out({total, c});
    auto& ov = out.data();
    size_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(ov.data() + off, p.data().data(), p.data().size() * sizeof(double));
        off += p.data().size();
    }
    if (tape)
        tape->record(out, [parts, out]() mutable {
            const auto& g = out.grad();
            size_t off2 = 0;
            for (auto& p : parts) {
                if (p.wants_grad()) {
                    auto& pg = p.grad();
                    for (size_t i = 0; i < pg.size(); ++i) pg[i] += g[off2 + i];
                }
                off2 += p.data().size();
            }
        });
    return out;
}

inline Tensor take_rows(Tape* tape, const Tensor& a, int start, int count) {
    if (a.rank() != 2 || start < 0 || count < 1 || start + count > a.dim(0))
        throw ShapeError("take_rows: rows [" + std::to_string(start) + "," + std::to_string(start + count) +
                         ") out of range for " + shape_str(a.shape()));
    const int c = a.dim(1);
    Tensor out({count, c});
    std::memcpy(out.data().data(), a.data().data() + static_cast<size_t>(start) * c,
                static_cast<size_t>(count) * c * sizeof(double));
    if (tape)
        tape->record(out, [a, out, start, c]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            const size_t base = static_cast<size_t>(start) * c;
            for (size_t i = 0; i < g.size(); ++i) ag[base + i] += g[i];
        });
    return out;
}

inline Tensor take_cols(Tape* tape, const Tensor& a, int start, int count) {
    if (a.rank() != 2 || start < 0 || count < 1 || start + count > a.dim(1))
        throw ShapeError("take_cols: cols [" + std::to_string(start) + "," + std::to_string(start + count) +
                         ") out of range for " + shape_str(a.shape()));
    const int rows = a.dim(0), c = a.dim(1);
    Tensor out({rows, count});
    const auto& av = a.data();
    auto& ov = out.data();
    for (int r = 0; r < rows; ++r)
        std::memcpy(ov.data() + static_cast<size_t>(r) * count, av.data() + static_cast<size_t>(r) * c + start,
                    static_cast<size_t>(count) * sizeof(double));
    if (tape)
        tape->record(out, [a, out, start, count, rows, c]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < count; ++j)
                    ag[static_cast<size_t>(r) * c + start + j] += g[static_cast<size_t>(r) * count + j];
        });
    return out;
}

inline Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const int rows = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows)
            throw ShapeError("concat_cols: incompatible part shape " + shape_str(p.shape()));
        total += p.dim(1);
    }
    Tensor out({rows, total});
    auto& ov = out.data();
    int coff = 0;
    for (const auto& p : parts) {
        const int pc = p.dim(1);
        const auto& pv = p.data();
        for (int r = 0; r < rows; ++r)
            std::memcpy(ov.data() + static_cast<size_t>(r) * total + coff, pv.data() + static_cast<size_t>(r) * pc,
                        static_cast<size_t>(pc) * sizeof(double));
        coff += pc;
    }
    if (tape)
        tape->record(out, [parts, out, rows, total]() mutable {
            const auto& g = out.grad();
            int coff2 = 0;
            for (auto& p : parts) {
                const int pc = p.dim(1);
                if (p.wants_grad()) {
                    auto& pg = p.grad();
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < pc; ++j)
                            pg[static_cast<size_t>(r) * pc + j] += g[static_cast<size_t>(r) * total + coff2 + j];
                }
                coff2 += pc;
            }
        });
    return out;
}

// embedding-row lookup: out[i, :] = table[indices[i], :]
inline Tensor embed_rows(Tape* tape, const Tensor& table, const std::vector<int>& indices) {
    if (table.rank() != 2) throw ShapeError("embed_rows: table must be rank-2, got " + shape_str(table.shape()));
    const int n = table.dim(0), c = table.dim(1);
    for (int idx : indices)
        if (idx < 0 || idx >= n)
            throw ShapeError("embed_rows: index " + std::to_string(idx) + " out of range for table " + shape_str(table.shape()));
    Tensor out({static_cast<int>(indices.size()), c});
    auto& ov = out.data();
    const auto& tv = table.data();
    for (size_t i = 0; i < indices.size(); ++i)
        std::memcpy(ov.data() + i * c, tv.data() + static_cast<size_t>(indices[i]) * c, static_cast<size_t>(c) * sizeof(double));
    if (tape)
        tape->record(out, [table, out, indices, c]() mutable {
            if (!table.wants_grad()) return;
            const auto& g = out.grad();
            auto& tg = table.grad();
            for (size_t i = 0; i < indices.size(); ++i)
                for (int j = 0; j < c; ++j)
                    tg[static_cast<size_t>(indices[i]) * c + j] += g[i * c + j];
        });
    return out;
}

// each row repeated `times` consecutively: [r0,r0,..,r1,r1,..]
inline Tensor repeat_rows(Tape* tape, const Tensor& a, int times) {
    if (a.rank() != 2 || times < 1) throw ShapeError("repeat_rows: bad arguments for " + shape_str(a.shape()));
    const int rows = a.dim(0), c = a.dim(1);
    Tensor out({rows * times, c});
    auto& ov = out.data();
    const auto& av = a.data();
    for (int r = 0; r < rows; ++r)
        for (int t = 0; t < times; ++t)
            std::memcpy(ov.data() + (static_cast<size_t>(r) * times + t) * c, av.data() + static_cast<size_t>(r) * c,
                        static_cast<size_t>(c) * sizeof(double));
    if (tape)
        tape->record(out, [a, out, rows, c, times]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (int r = 0; r < rows; ++r)
                for (int t = 0; t < times; ++t)
                    for (int j = 0; j < c; ++j)
                        ag[static_cast<size_t>(r) * c + j] += g[(static_cast<size_t>(r) * times + t) * c + j];
        });
    return out;
}

// whole block repeated `times`: [r0,..,rN, r0,..,rN, ...]
inline Tensor tile_rows(Tape* tape, const Tensor& a, int times) {
    if (a.rank() != 2 || times < 1) throw ShapeError("tile_rows: bad arguments for " + shape_str(a.shape()));
    const int rows = a.dim(0), c = a.dim(1);
    Tensor out({rows * times, c});
    auto& ov = out.data();
    const auto& av = a.data();
    for (int t = 0; t < times; ++t)
        std::memcpy(ov.data() + static_cast<size_t>(t) * rows * c, av.data(), av.size() * sizeof(double));
    if (tape)
        tape->record(out, [a, out, rows, c, times]() mutable {
            if (!a.wants_grad()) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (int t = 0; t < times; ++t)
                for (size_t i = 0; i < ag.size(); ++i) ag[i] += g[static_cast<size_t>(t) * rows * c + i];
        });
    return out;
}

// adds a length-c vector to every row of [L, c]
inline Tensor add_row_broadcast(Tape* tape, const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.numel() != x.dim(1))
        throw ShapeError("add_row_broadcast: bias " + shape_str(bias.shape()) + " vs " + shape_str(x.shape()));
    const int rows = x.dim(0), c = x.dim(1);
    Tensor out(x.shape());
    const auto& xv = x.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) ov[static_cast<size_t>(r) * c + j] = xv[static_cast<size_t>(r) * c + j] + bv[static_cast<size_t>(j)];
    if (tape)
        tape->record(out, [x, bias, out, rows, c]() mutable {
            const auto& g = out.grad();
            if (x.wants_grad()) detail::accumulate(x, g);
            if (bias.wants_grad()) {
                auto& bg = bias.grad();
                for (int r = 0; r < rows; ++r)
                    for (int j = 0; j < c; ++j) bg[static_cast<size_t>(j)] += g[static_cast<size_t>(r) * c + j];
            }
        });
    return out;
}

// packs scalars into a tensor of the given shape, in row-major order
inline Tensor stack_scalars(Tape* tape, const std::vector<Tensor>& scalars, Shape shape) {
    if (shape_numel(shape) != static_cast<int64_t>(scalars.size()))
        throw ShapeError("stack_scalars: " + std::to_string(scalars.size()) + " scalars cannot fill " + shape_str(shape));
    Tensor out(std::move(shape));
    auto& ov = out.data();
    for (size_t i = 0; i < scalars.size(); ++i) ov[i] = scalars[i].scalar_value();
    if (tape)
        tape->record(out, [scalars, out]() mutable {
            const auto& g = out.grad();
            for (size_t i = 0; i < scalars.size(); ++i)
                if (scalars[i].wants_grad()) scalars[i].grad()[0] += g[i];
        });
    return out;
}

// [c, t, h, w] -> token matrix [(t*h*w), c]; token order is t-major then
// row-major over the spatial grid
inline Tensor flatten_tokens(Tape* tape, const Tensor& v) {
    if (v.rank() != 4) throw ShapeError("flatten_tokens expects rank-4, got " + shape_str(v.shape()));
    const int c = v.dim(0), t = v.dim(1), h = v.dim(2), w = v.dim(3);
    const int hw = h * w;
    Tensor out({t * hw, c});
    const auto& vv = v.data();
    auto& ov = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int f = 0; f < t; ++f)
            for (int s = 0; s < hw; ++s)
                ov[(static_cast<size_t>(f) * hw + s) * c + ch] = vv[(static_cast<size_t>(ch) * t + f) * hw + s];
    if (tape)
        tape->record(out, [v, out, c, t, hw]() mutable {
            if (!v.wants_grad()) return;
            const auto& g = out.grad();
            auto& vg = v.grad();
            for (int ch = 0; ch < c; ++ch)
                for (int f = 0; f < t; ++f)
                    for (int s = 0; s < hw; ++s)
                        vg[(static_cast<size_t>(ch) * t + f) * hw + s] += g[(static_cast<size_t>(f) * hw + s) * c + ch];
        });
    return out;
}

// ---- convolutions --------------------------------------------------------

// 2-D convolution applied independently per time step.
// x: [cin, T, H, W], w: [cout, cin, kh, kw], bias: [cout] or undefined.
inline Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride_h, int stride_w, int pad_h, int pad_w) {
    if (x.rank() != 4 || w.rank() != 4 || x.dim(0) != w.dim(1))
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
    const int cin = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int HO = (H + 2 * pad_h - kh) / stride_h + 1;
    const int WO = (W + 2 * pad_w - kw) / stride_w + 1;
    if (HO < 1 || WO < 1) throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " too large for " + shape_str(x.shape()));
    if (bias.defined() && bias.numel() != cout) throw ShapeError("conv2d: bias length must equal out channels");
    Tensor out({cout, T, HO, WO});
    const auto& xv = x.data();
    const auto& wv = w.data();
    auto& ov = out.data();
    const auto xat = [T, H, W](int ci, int f, int i, int j) { return ((static_cast<size_t>(ci) * T + f) * H + i) * W + j; };
    const auto wat = [cin, kh, kw](int co, int ci, int i, int j) { return ((static_cast<size_t>(co) * cin + ci) * kh + i) * kw + j; };
    const auto oat = [T, HO, WO](int co, int f, int i, int j) { return ((static_cast<size_t>(co) * T + f) * HO + i) * WO + j; };
    for (int co = 0; co < cout; ++co) {
        const double b = bias.defined() ? bias[co] : 0.0;
        for (int f = 0; f < T; ++f)
            for (int oi = 0; oi < HO; ++oi)
                for (int oj = 0; oj < WO; ++oj) {
                    double acc = b;
                    const int i0 = oi * stride_h - pad_h, j0 = oj * stride_w - pad_w;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int di = 0; di < kh; ++di) {
                            const int ii = i0 + di;
                            if (ii < 0 || ii >= H) continue;
                            for (int dj = 0; dj < kw; ++dj) {
                                const int jj = j0 + dj;
                                if (jj < 0 || jj >= W) continue;
                                acc += xv[xat(ci, f, ii, jj)] * wv[wat(co, ci, di, dj)];
                            }
                        }
                    ov[oat(co, f, oi, oj)] = acc;
                }
    }
    if (tape)
        tape->record(out, [x, w, bias, out, cin, T, H, W, cout, kh, kw, HO, WO, stride_h, stride_w, pad_h, pad_w,
                           xat, wat, oat]() mutable {
            const auto& g = out.grad();
            const bool gx = x.wants_grad(), gw = w.wants_grad(), gb = bias.defined() && bias.wants_grad();
            if (!gx && !gw && !gb) return;
            const auto& xv2 = x.data();
            const auto& wv2 = w.data();
            for (int co = 0; co < cout; ++co)
                for (int f = 0; f < T; ++f)
                    for (int oi = 0; oi < HO; ++oi)
                        for (int oj = 0; oj < WO; ++oj) {
                            const double go = g[oat(co, f, oi, oj)];
                            if (go == 0.0) continue;
                            if (gb) bias.grad()[static_cast<size_t>(co)] += go;
                            const int i0 = oi * stride_h - pad_h, j0 = oj * stride_w - pad_w;
                            for (int ci = 0; ci < cin; ++ci)
                                for (int di = 0; di < kh; ++di) {
                                    const int ii = i0 + di;
                                    if (ii < 0 || ii >= H) continue;
                                    for (int dj = 0; dj < kw; ++dj) {
                                        const int jj = j0 + dj;
                                        if (jj < 0 || jj >= W) continue;
                                        if (gw) w.grad()[wat(co, ci, di, dj)] += go * xv2[xat(ci, f, ii, jj)];
                                        if (gx) x.grad()[xat(ci, f, ii, jj)] += go * wv2[wat(co, ci, di, dj)];
                                    }
                                }
                        }
        });
    return out;
}

// 3-D convolution over (t, h, w) with stride 1 and explicit padding.
// x: [cin, T, H, W], w: [cout, cin, kt, kh, kw].
inline Tensor conv3d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias,
                     int pad_t, int pad_h, int pad_w) {
    if (x.rank() != 4 || w.rank() != 5 || x.dim(0) != w.dim(1))
        throw ShapeError("conv3d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
    const int cin = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int cout = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
    const int TO = T + 2 * pad_t - kt + 1;
    const int HO = H + 2 * pad_h - kh + 1;
    const int WO = W + 2 * pad_w - kw + 1;
    if (TO < 1 || HO < 1 || WO < 1) throw ShapeError("conv3d: kernel " + shape_str(w.shape()) + " too large for " + shape_str(x.shape()));
    if (bias.defined() && bias.numel() != cout) throw ShapeError("conv3d: bias length must equal out channels");
    Tensor out({cout, TO, HO, WO});
    const auto& xv = x.data();
    const auto& wv = w.data();
    auto& ov = out.data();
    const auto xat = [T, H, W](int ci, int f, int i, int j) { return ((static_cast<size_t>(ci) * T + f) * H + i) * W + j; };
    const auto wat = [cin, kt, kh, kw](int co, int ci, int ft, int i, int j) {
        return (((static_cast<size_t>(co) * cin + ci) * kt + ft) * kh + i) * kw + j;
    };
    const auto oat = [TO, HO, WO](int co, int f, int i, int j) { return ((static_cast<size_t>(co) * TO + f) * HO + i) * WO + j; };
    for (int co = 0; co < cout; ++co) {
        const double b = bias.defined() ? bias[co] : 0.0;
        for (int of = 0; of < TO; ++of)
            for (int oi = 0; oi < HO; ++oi)
                for (int oj = 0; oj < WO; ++oj) {
                    double acc = b;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int dt = 0; dt < kt; ++dt) {
                            const int ff = of - pad_t + dt;
                            if (ff < 0 || ff >= T) continue;
                            for (int di = 0; di < kh; ++di) {
                                const int ii = oi - pad_h + di;
                                if (ii < 0 || ii >= H) continue;
                                for (int dj = 0; dj < kw; ++dj) {
                                    const int jj = oj - pad_w + dj;
                                    if (jj < 0 || jj >= W) continue;
                                    acc += xv[xat(ci, ff, ii, jj)] * wv[wat(co, ci, dt, di, dj)];
                                }
                            }
                        }
                    ov[oat(co, of, oi, oj)] = acc;
                }
    }
    if (tape)
        tape->record(out, [x, w, bias, out, cin, T, H, W, cout, kt, kh, kw, TO, HO, WO, pad_t, pad_h, pad_w,
                           xat, wat, oat]() mutable {
            const auto& g = out.grad();
            const bool gx = x.wants_grad(), gw = w.wants_grad(), gb = bias.defined() && bias.wants_grad();
            if (!gx && !gw && !gb) return;
            const auto& xv2 = x.data();
            const auto& wv2 = w.data();
            for (int co = 0; co < cout; ++co)
                for (int of = 0; of < TO; ++of)
                    for (int oi = 0; oi < HO; ++oi)
                        for (int oj = 0; oj < WO; ++oj) {
                            const double go = g[oat(co, of, oi, oj)];
                            if (go == 0.0) continue;
                            if (gb) bias.grad()[static_cast<size_t>(co)] += go;
                            for (int ci = 0; ci < cin; ++ci)
                                for (int dt = 0; dt < kt; ++dt) {
                                    const int ff = of - pad_t + dt;
                                    if (ff < 0 || ff >= T) continue;
                                    for (int di = 0; di < kh; ++di) {
                                        const int ii = oi - pad_h + di;
                                        if (ii < 0 || ii >= H) continue;
                                        for (int dj = 0; dj < kw; ++dj) {
                                            const int jj = oj - pad_w + dj;
                                            if (jj < 0 || jj >= W) continue;
                                            if (gw) w.grad()[wat(co, ci, dt, di, dj)] += go * xv2[xat(ci, ff, ii, jj)];
                                            if (gx) x.grad()[xat(ci, ff, ii, jj)] += go * wv2[wat(co, ci, dt, di, dj)];
                                        }
                                    }
                                }
                        }
        });
    return out;
}

// [c, t, h, w] -> [c, t]; gradient routes to a single argmax cell per (c, t),
// first index in row-major order on ties
inline Tensor global_max_pool_spatial(Tape* tape, const Tensor& v) {
    if (v.rank() != 4) throw ShapeError("global_max_pool_spatial expects rank-4, got " + shape_str(v.shape()));
    const int c = v.dim(0), t = v.dim(1), hw = v.dim(2) * v.dim(3);
    Tensor out({c, t});
    std::vector<int> argmax(static_cast<size_t>(c) * t);
    const auto& vv = v.data();
    auto& ov = out.data();
    for (int ch = 0; ch < c; ++ch)
        for (int f = 0; f < t; ++f) {
            const size_t base = (static_cast<size_t>(ch) * t + f) * hw;
            double best = vv[base];
            int best_i = 0;
            for (int s = 1; s < hw; ++s)
                if (vv[base + s] > best) {
                    best = vv[base + s];
                    best_i = s;
                }
            ov[static_cast<size_t>(ch) * t + f] = best;
            argmax[static_cast<size_t>(ch) * t + f] = best_i;
        }
    if (tape)
        tape->record(out, [v, out, c, t, hw, argmax = std::move(argmax)]() mutable {
            if (!v.wants_grad()) return;
            const auto& g = out.grad();
            auto& vg = v.grad();
            for (int ch = 0; ch < c; ++ch)
                for (int f = 0; f < t; ++f) {
                    const size_t ot = static_cast<size_t>(ch) * t + f;
                    vg[ot * hw + argmax[ot]] += g[ot];
                }
        });
    return out;
}

}  // namespace avsync
