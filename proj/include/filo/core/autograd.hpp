#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "filo/core/error.hpp"
#include "filo/core/tensor.hpp"

// Reverse-mode automatic differentiation over filo::Tensor. The graph is a
// DAG of shared_ptr nodes; ops record a closure that scatters gradients to
// their parents. Everything is sequential and double precision, so forward
// and backward passes are bit-deterministic for a fixed input.
namespace filo::ad {

struct Node {
    Tensor val;
    Tensor grad; // allocated lazily on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (!grad.defined()) grad = Tensor(val.shape, 0.0);
        return grad;
    }
};

class Var {
public:
    Var() = default;

    static Var leaf(Tensor t, bool requires_grad = true) {
        Var v;
        v.node_ = std::make_shared<Node>();
        v.node_->val = std::move(t);
        v.node_->requires_grad = requires_grad;
        return v;
    }

    static Var constant(Tensor t) { return leaf(std::move(t), false); }
    static Var scalar(double x) { return constant(Tensor::scalar(x)); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& val() const { return node_->val; }
    Tensor& mutable_val() { return node_->val; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void zero_grad() {
        if (node_ && node_->grad.defined())
            std::fill(node_->grad.v.begin(), node_->grad.v.end(), 0.0);
    }
    double item() const {
        require(node_ && node_->val.size() == 1, ErrorKind::shape,
                "item() requires a 1-element tensor");
        return node_->val[0];
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(Tensor val, std::vector<Var> parents,
                   std::function<void(Node&)> backward_fn) {
    Var out = Var::leaf(std::move(val), false);
    Node& n = *out.node();
    for (const Var& p : parents) {
        require(p.defined(), ErrorKind::internal, "op on undefined Var");
        n.parents.push_back(p.node());
        if (p.node()->requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward_fn = std::move(backward_fn);
    return out;
}

inline bool scalar_like(const Tensor& t) { return t.size() == 1; }

} // namespace detail

// --- elementwise binary ops (same shape, or one side a 1-element scalar) ---

namespace detail {

template <class FwdFn, class BwdFn>
Var binary_broadcast(const Var& a, const Var& b, FwdFn fwd, BwdFn bwd) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    const bool a_scalar = scalar_like(av);
    const bool b_scalar = scalar_like(bv);
    require(av.same_shape(bv) || a_scalar || b_scalar, ErrorKind::shape,
            "binary op shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    const Tensor& big = a_scalar && !b_scalar ? bv : av;
    Tensor out(big.shape);
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        out[i] = fwd(x, y);
    }
    return make_op(std::move(out), {a, b}, [a_scalar, b_scalar, bwd](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        for (std::int64_t i = 0; i < n.val.size(); ++i) {
            const double x = pa.val[a_scalar ? 0 : i];
            const double y = pb.val[b_scalar ? 0 : i];
            const double go = n.grad[i];
            double gx = 0.0, gy = 0.0;
            bwd(x, y, go, gx, gy);
            if (pa.requires_grad) pa.ensure_grad()[a_scalar ? 0 : i] += gx;
            if (pb.requires_grad) pb.ensure_grad()[b_scalar ? 0 : i] += gy;
        }
    });
}

} // namespace detail

inline Var add(const Var& a, const Var& b) {
    return detail::binary_broadcast(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double go, double& gx, double& gy) {
            gx = go;
            gy = go;
        });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary_broadcast(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double go, double& gx, double& gy) {
            gx = go;
            gy = -go;
        });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary_broadcast(
        a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double go, double& gx, double& gy) {
            gx = go * y;
            gy = go * x;
        });
}

inline Var div(const Var& a, const Var& b) {
    return detail::binary_broadcast(
        a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double go, double& gx, double& gy) {
            gx = go / y;
            gy = -go * x / (y * y);
        });
}

// --- elementwise unary ops ---

namespace detail {

template <class FwdFn, class BwdFn>
Var unary(const Var& a, FwdFn fwd, BwdFn bwd) {
    Tensor out(a.val().shape);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = fwd(a.val()[i]);
    return make_op(std::move(out), {a}, [bwd](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        Tensor& g = pa.ensure_grad();
        for (std::int64_t i = 0; i < n.val.size(); ++i)
            g[i] += n.grad[i] * bwd(pa.val[i], n.val[i]);
    });
}

} // namespace detail

inline Var neg(const Var& a) {
    return detail::unary(a, [](double x) { return -x; },
                         [](double, double) { return -1.0; });
}

inline Var add_const(const Var& a, double c) {
    return detail::unary(a, [c](double x) { return x + c; },
                         [](double, double) { return 1.0; });
}

inline Var mul_const(const Var& a, double c) {
    return detail::unary(a, [c](double x) { return x * c; },
                         [c](double, double) { return c; });
}

inline Var relu(const Var& a) {
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var silu(const Var& a) {
    return detail::unary(
        a,
        [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Var tanh(const Var& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
    return detail::unary(
        a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var log(const Var& a) {
    return detail::unary(a, [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
}

inline Var pow_const(const Var& a, double p) {
    return detail::unary(
        a, [p](double x) { return std::pow(x, p); },
        [p](double x, double) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

// Clamp passes gradient through inside the range and blocks it outside.
inline Var clamp(const Var& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// Elementwise multiply by a constant tensor (e.g. binary masks).
inline Var mul_mask(const Var& a, const Tensor& mask) {
    require(a.val().same_shape(mask), ErrorKind::shape, "mul_mask shape mismatch");
    Tensor out(a.val().shape);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] * mask[i];
    Tensor m = mask;
    return detail::make_op(std::move(out), {a}, [m](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        Tensor& g = pa.ensure_grad();
        for (std::int64_t i = 0; i < n.val.size(); ++i) g[i] += n.grad[i] * m[i];
    });
}

// --- reductions ---

inline Var sum(const Var& a) {
    Tensor out = Tensor::scalar(a.val().sum());
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        Tensor& g = pa.ensure_grad();
        const double go = n.grad[0];
        for (std::int64_t i = 0; i < pa.val.size(); ++i) g[i] += go;
    });
}

inline Var mean(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a.val().size());
    Tensor out = Tensor::scalar(a.val().sum() * inv);
    return detail::make_op(std::move(out), {a}, [inv](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        Tensor& g = pa.ensure_grad();
        const double go = n.grad[0] * inv;
        for (std::int64_t i = 0; i < pa.val.size(); ++i) g[i] += go;
    });
}

// Max over all elements; subgradient goes to the first argmax.
inline Var max_all(const Var& a) {
    std::int64_t argmax = 0;
    for (std::int64_t i = 1; i < a.val().size(); ++i)
        if (a.val()[i] > a.val()[argmax]) argmax = i;
    Tensor out = Tensor::scalar(a.val()[argmax]);
    return detail::make_op(std::move(out), {a}, [argmax](Node& n) {
        Node& pa = *n.parents[0];
        if (pa.requires_grad) pa.ensure_grad()[argmax] += n.grad[0];
    });
}

// --- linear algebra ---

inline Var dot(const Var& a, const Var& b) {
    require(a.val().same_shape(b.val()), ErrorKind::shape, "dot shape mismatch");
    double s = 0.0;
    for (std::int64_t i = 0; i < a.val().size(); ++i) s += a.val()[i] * b.val()[i];
    return detail::make_op(Tensor::scalar(s), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        const double go = n.grad[0];
        if (pa.requires_grad) {
            Tensor& g = pa.ensure_grad();
            for (std::int64_t i = 0; i < pa.val.size(); ++i) g[i] += go * pb.val[i];
        }
        if (pb.requires_grad) {
            Tensor& g = pb.ensure_grad();
            for (std::int64_t i = 0; i < pb.val.size(); ++i) g[i] += go * pa.val[i];
        }
    });
}

// y = W x, with W [out, in] and x [in].
inline Var matvec(const Var& w, const Var& x) {
    const Tensor& wv = w.val();
    const Tensor& xv = x.val();
    require(wv.ndim() == 2 && xv.ndim() == 1 && wv.dim(1) == xv.dim(0),
            ErrorKind::shape, "matvec shape mismatch");
    const int out_n = wv.dim(0), in_n = wv.dim(1);
    Tensor out(std::vector<int>{out_n});
    for (int o = 0; o < out_n; ++o) {
        double s = 0.0;
        for (int i = 0; i < in_n; ++i) s += wv.at2(o, i) * xv[i];
        out[o] = s;
    }
    return detail::make_op(std::move(out), {w, x}, [out_n, in_n](Node& n) {
        Node& pw = *n.parents[0];
        Node& px = *n.parents[1];
        if (pw.requires_grad) {
            Tensor& g = pw.ensure_grad();
            for (int o = 0; o < out_n; ++o)
                for (int i = 0; i < in_n; ++i)
                    g.at2(o, i) += n.grad[o] * px.val[i];
        }
        if (px.requires_grad) {
            Tensor& g = px.ensure_grad();
            for (int o = 0; o < out_n; ++o)
                for (int i = 0; i < in_n; ++i)
                    g[i] += n.grad[o] * pw.val.at2(o, i);
        }
    });
}

inline Var linear(const Var& x, const Var& w, const Var& b) {
    return add(matvec(w, x), b);
}

// y = W^T x, with W [out, in] and x [out], giving y [in].
inline Var matvec_transposed(const Var& w, const Var& x) {
    const Tensor& wv = w.val();
    const Tensor& xv = x.val();
    require(wv.ndim() == 2 && xv.ndim() == 1 && wv.dim(0) == xv.dim(0),
            ErrorKind::shape, "matvec_transposed shape mismatch");
    const int out_n = wv.dim(0), in_n = wv.dim(1);
    Tensor out(std::vector<int>{in_n});
    for (int o = 0; o < out_n; ++o) {
        const double xo = xv[o];
        for (int i = 0; i < in_n; ++i) out[i] += wv.at2(o, i) * xo;
    }
    return detail::make_op(std::move(out), {w, x}, [out_n, in_n](Node& n) {
        Node& pw = *n.parents[0];
        Node& px = *n.parents[1];
        if (pw.requires_grad) {
            Tensor& g = pw.ensure_grad();
            for (int o = 0; o < out_n; ++o)
                for (int i = 0; i < in_n; ++i)
                    g.at2(o, i) += n.grad[i] * px.val[o];
        }
        if (px.requires_grad) {
            Tensor& g = px.ensure_grad();
            for (int o = 0; o < out_n; ++o) {
                double acc = 0.0;
                for (int i = 0; i < in_n; ++i) acc += n.grad[i] * pw.val.at2(o, i);
                g[o] += acc;
            }
        }
    });
}

// Row i of a [n, c] tensor as a [c] vector. Gradient scatters back to the row.
inline Var row(const Var& a, int i) {
    const Tensor& av = a.val();
    require(av.ndim() == 2 && i >= 0 && i < av.dim(0), ErrorKind::shape,
            "row index out of range");
    const int c = av.dim(1);
    Tensor out(std::vector<int>{c});
    for (int j = 0; j < c; ++j) out[j] = av.at2(i, j);
    return detail::make_op(std::move(out), {a}, [i, c](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        Tensor& g = pa.ensure_grad();
        for (int j = 0; j < c; ++j) g.at2(i, j) += n.grad[j];
    });
}

// y = x / ||x||2. The norm must be nonzero.
inline Var l2_normalize(const Var& x) {
    const double nrm = x.val().norm2();
    require(nrm > 0.0, ErrorKind::shape, "l2_normalize: zero vector");
    Tensor out(x.val().shape);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = x.val()[i] / nrm;
    return detail::make_op(std::move(out), {x}, [nrm](Node& n) {
        Node& px = *n.parents[0];
        if (!px.requires_grad) return;
        double gy_dot_y = 0.0;
        for (std::int64_t i = 0; i < n.val.size(); ++i) gy_dot_y += n.grad[i] * n.val[i];
        Tensor& g = px.ensure_grad();
        for (std::int64_t i = 0; i < n.val.size(); ++i)
            g[i] += (n.grad[i] - n.val[i] * gy_dot_y) / nrm;
    });
}

// --- spatial ops on [H, W] maps and [H, W, C] grids ---

// "same"-padded 2-D convolution: input [H, W, Cin], kernel [kh, kw, Cin, Cout];
// kh and kw must be odd so the grid shape is preserved. Padding clamps to the
// edge, so constant grids stay constant through any kernel (no border bias
// for min-max normalization to amplify).
inline Var conv2d_same(const Var& input, const Var& kernel) {
    const Tensor& in = input.val();
    const Tensor& k = kernel.val();
    require(in.ndim() == 3 && k.ndim() == 4, ErrorKind::shape,
            "conv2d_same expects [H,W,Cin] input and [kh,kw,Cin,Cout] kernel");
    require(k.dim(0) % 2 == 1 && k.dim(1) % 2 == 1, ErrorKind::config,
            "conv kernel dims must be odd");
    require(k.dim(2) == in.dim(2), ErrorKind::config,
            "conv kernel channel width mismatch: kernel " + k.shape_str() +
                " vs input " + in.shape_str());
    const int h = in.dim(0), w = in.dim(1), cin = in.dim(2);
    const int kh = k.dim(0), kw = k.dim(1), cout = k.dim(3);
    const int ph = kh / 2, pw = kw / 2;
    Tensor out(std::vector<int>{h, w, cout});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int dy = 0; dy < kh; ++dy) {
                const int sy = std::clamp(y + dy - ph, 0, h - 1);
                for (int dx = 0; dx < kw; ++dx) {
                    const int sx = std::clamp(x + dx - pw, 0, w - 1);
                    for (int ci = 0; ci < cin; ++ci) {
                        const double xv = in.at3(sy, sx, ci);
                        if (xv == 0.0) continue;
                        const std::int64_t kbase = k.idx4(dy, dx, ci, 0);
                        const std::int64_t obase = out.idx3(y, x, 0);
                        for (int co = 0; co < cout; ++co)
                            out[obase + co] += xv * k[kbase + co];
                    }
                }
            }
        }
    }
    return detail::make_op(
        std::move(out), {input, kernel}, [h, w, cin, kh, kw, cout, ph, pw](Node& n) {
            Node& pin = *n.parents[0];
            Node& pk = *n.parents[1];
            Tensor* gin = pin.requires_grad ? &pin.ensure_grad() : nullptr;
            Tensor* gk = pk.requires_grad ? &pk.ensure_grad() : nullptr;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    for (int dy = 0; dy < kh; ++dy) {
                        const int sy = std::clamp(y + dy - ph, 0, h - 1);
                        for (int dx = 0; dx < kw; ++dx) {
                            const int sx = std::clamp(x + dx - pw, 0, w - 1);
                            for (int ci = 0; ci < cin; ++ci) {
                                const double xv = pin.val.at3(sy, sx, ci);
                                const std::int64_t kbase = pk.val.idx4(dy, dx, ci, 0);
                                const std::int64_t obase = n.grad.idx3(y, x, 0);
                                double gin_acc = 0.0;
                                for (int co = 0; co < cout; ++co) {
                                    const double go = n.grad[obase + co];
                                    if (gk) (*gk)[kbase + co] += go * xv;
                                    gin_acc += go * pk.val[kbase + co];
                                }
                                if (gin) (*gin)[pin.val.idx3(sy, sx, ci)] += gin_acc;
                            }
                        }
                    }
                }
            }
        });
}

// Per-position dot product of a [H, W, C] grid with a [C] vector -> [H, W].
inline Var channel_dot(const Var& grid, const Var& vec) {
    const Tensor& g = grid.val();
    const Tensor& t = vec.val();
    require(g.ndim() == 3 && t.ndim() == 1 && g.dim(2) == t.dim(0), ErrorKind::config,
            "channel_dot width mismatch: grid " + g.shape_str() + " vs vec " +
                t.shape_str());
    const int h = g.dim(0), w = g.dim(1), c = g.dim(2);
    Tensor out(std::vector<int>{h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            const std::int64_t base = g.idx3(y, x, 0);
            for (int i = 0; i < c; ++i) s += g[base + i] * t[i];
            out.at2(y, x) = s;
        }
    return detail::make_op(std::move(out), {grid, vec}, [h, w, c](Node& n) {
        Node& pg = *n.parents[0];
        Node& pv = *n.parents[1];
        Tensor* gg = pg.requires_grad ? &pg.ensure_grad() : nullptr;
        Tensor* gv = pv.requires_grad ? &pv.ensure_grad() : nullptr;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double go = n.grad.at2(y, x);
                const std::int64_t base = pg.val.idx3(y, x, 0);
                for (int i = 0; i < c; ++i) {
                    if (gg) (*gg)[base + i] += go * pv.val[i];
                    if (gv) (*gv)[i] += go * pg.val[base + i];
                }
            }
    });
}

// Min-max normalization of a map to [0, 1]. A constant map maps to all
// zeros (degenerate rule, relied on by the map pipeline). Subgradients are
// taken at the first argmin/argmax.
inline Var minmax_norm(const Var& a) {
    const Tensor& av = a.val();
    std::int64_t imin = 0, imax = 0;
    for (std::int64_t i = 1; i < av.size(); ++i) {
        if (av[i] < av[imin]) imin = i;
        if (av[i] > av[imax]) imax = i;
    }
    const double lo = av[imin], hi = av[imax];
    Tensor out(av.shape);
    if (hi == lo) {
        return detail::make_op(std::move(out), {a}, [](Node&) {});
    }
    // Division (not reciprocal multiply) so the argmax lands exactly on 1.
    const double range = hi - lo;
    const double inv = 1.0 / range;
    for (std::int64_t i = 0; i < av.size(); ++i) out[i] = (av[i] - lo) / range;
    return detail::make_op(std::move(out), {a}, [imin, imax, inv](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        double s0 = 0.0, s1 = 0.0; // sum(go), sum(go * y)
        for (std::int64_t i = 0; i < n.val.size(); ++i) {
            s0 += n.grad[i];
            s1 += n.grad[i] * n.val[i];
        }
        Tensor& g = pa.ensure_grad();
        for (std::int64_t i = 0; i < n.val.size(); ++i) g[i] += n.grad[i] * inv;
        g[imin] += (s1 - s0) * inv;
        g[imax] -= s1 * inv;
    });
}

// Bilinear upsampling of a [H, W] map to [out_h, out_w] with corner-aligned
// sampling, so values stay within the input range.
inline Var upsample_bilinear(const Var& a, int out_h, int out_w) {
    const Tensor& av = a.val();
    require(av.ndim() == 2, ErrorKind::shape, "upsample expects a [H,W] map");
    require(out_h >= 1 && out_w >= 1, ErrorKind::shape, "bad upsample target");
    const int h = av.dim(0), w = av.dim(1);
    const double sy = (h == 1 || out_h == 1) ? 0.0
                                             : static_cast<double>(h - 1) / (out_h - 1);
    const double sx = (w == 1 || out_w == 1) ? 0.0
                                             : static_cast<double>(w - 1) / (out_w - 1);
    Tensor out(std::vector<int>{out_h, out_w});
    for (int y = 0; y < out_h; ++y) {
        const double fy = y * sy;
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = x * sx;
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            out.at2(y, x) = (1 - wy) * ((1 - wx) * av.at2(y0, x0) + wx * av.at2(y0, x1)) +
                            wy * ((1 - wx) * av.at2(y1, x0) + wx * av.at2(y1, x1));
        }
    }
    return detail::make_op(std::move(out), {a}, [h, w, out_h, out_w, sy, sx](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        Tensor& g = pa.ensure_grad();
        for (int y = 0; y < out_h; ++y) {
            const double fy = y * sy;
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - y0;
            for (int x = 0; x < out_w; ++x) {
                const double fx = x * sx;
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, w - 1);
                const double wx = fx - x0;
                const double go = n.grad.at2(y, x);
                g.at2(y0, x0) += go * (1 - wy) * (1 - wx);
                g.at2(y0, x1) += go * (1 - wy) * wx;
                g.at2(y1, x0) += go * wy * (1 - wx);
                g.at2(y1, x1) += go * wy * wx;
            }
        }
    });
}

namespace detail {

// Reflected index without edge repetition ("abc" -> ...cb|abc|ba...).
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

inline std::vector<double> gaussian_kernel_1d(double sigma, int radius) {
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double x = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = x;
        total += x;
    }
    for (double& x : k) x /= total;
    return k;
}

} // namespace detail

// Separable Gaussian blur with reflect padding. The truncated kernel is
// renormalized to sum to one, so constants are preserved exactly.
inline Var gaussian_blur(const Var& a, double sigma) {
    const Tensor& av = a.val();
    require(av.ndim() == 2, ErrorKind::shape, "gaussian_blur expects a [H,W] map");
    require(sigma > 0.0, ErrorKind::config, "gaussian sigma must be positive");
    const int h = av.dim(0), w = av.dim(1);
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    const std::vector<double> k = detail::gaussian_kernel_1d(sigma, radius);

    Tensor rows(std::vector<int>{h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int d = -radius; d <= radius; ++d)
                s += k[static_cast<std::size_t>(d + radius)] *
                     av.at2(y, detail::reflect_index(x + d, w));
            rows.at2(y, x) = s;
        }
    Tensor out(std::vector<int>{h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int d = -radius; d <= radius; ++d)
                s += k[static_cast<std::size_t>(d + radius)] *
                     rows.at2(detail::reflect_index(y + d, h), x);
            out.at2(y, x) = s;
        }

    return detail::make_op(std::move(out), {a}, [h, w, radius, k](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        // Adjoint of the column pass, then of the row pass.
        Tensor gcols(std::vector<int>{h, w});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double go = n.grad.at2(y, x);
                if (go == 0.0) continue;
                for (int d = -radius; d <= radius; ++d)
                    gcols.at2(detail::reflect_index(y + d, h), x) +=
                        go * k[static_cast<std::size_t>(d + radius)];
            }
        Tensor& g = pa.ensure_grad();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double go = gcols.at2(y, x);
                if (go == 0.0) continue;
                for (int d = -radius; d <= radius; ++d)
                    g.at2(y, detail::reflect_index(x + d, w)) +=
                        go * k[static_cast<std::size_t>(d + radius)];
            }
    });
}

// --- backward driver ---

inline void backward(const Var& root) {
    require(root.defined() && root.val().size() == 1, ErrorKind::internal,
            "backward() expects a scalar root");
    if (!root.node()->requires_grad) return;

    // Iterative post-order DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({root.node().get(), 0});
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.push_back({parent, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
    }
}

} // namespace filo::ad
