// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace beamgraph::tk {

const DenseArray& Var::value() const { return tape_->value(id_); }
const DenseArray& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(DenseArray value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::variable(DenseArray value) {
    DenseArray g = DenseArray::zeros_like(value);
    nodes_.push_back(Node{std::move(value), std::move(g), {}, nullptr, true});
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(Param& p) {
    Var v = variable(p.value);
    nodes_.back().sink = &p;
    return v;
}

Var Tape::record(DenseArray value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
        require(in.tape_ == this, "autodiff: input recorded on a different tape");
        needs = needs || nodes_[in.id_].requires_grad;
    }
    Node node;
    node.value = std::move(value);
    node.requires_grad = needs;
    if (needs) {
        node.grad = DenseArray::zeros_like(node.value);
        node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
    require(loss.tape_ == this, "backward: loss belongs to another tape");
    require(loss.value().size() == 1, "backward: loss must be a scalar, got " + shape_string(loss.shape()));
    backward({{loss, DenseArray::scalar(1.0)}});
}

void Tape::backward(const std::vector<std::pair<Var, DenseArray>>& seeds) {
    for (const auto& [v, g] : seeds) {
        require(v.tape_ == this, "backward: seed belongs to another tape");
        if (!nodes_[v.id_].requires_grad)
            continue;
        require(g.size() == nodes_[v.id_].value.size(), "backward: seed gradient shape mismatch");
        auto& dst = nodes_[v.id_].grad;
        for (std::size_t i = 0; i < g.size(); ++i)
            dst[i] += g[i];
    }
    sweep();
}

void Tape::sweep() {
    for (std::size_t id = nodes_.size(); id-- > 0;) {
        auto& node = nodes_[id];
        if (!node.requires_grad)
            continue;
        if (node.backward)
            node.backward(*this, id);
        if (node.sink != nullptr)
            node.sink->grad += node.grad;
    }
}

Var Binder::operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end())
        return it->second;
    Param& p = store_.at(name);
    Var v = frozen_ ? tape_.constant(p.value) : tape_.param(p);
    bound_.emplace(name, v);
    return v;
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
    require(a.value().same_shape(b.value()), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                                 " vs " + shape_string(b.shape()));
}

// Accumulate `g` into the gradient of `v` when that node tracks one.
void accumulate(Tape& t, std::size_t id, const DenseArray& g) {
    if (t.requires_grad(id))
        t.grad(id) += g;
}

template <class F>
Var unary(Var x, DenseArray out, F&& local_derivative) {
    const std::size_t xi = x.id();
    return x.tape().record(std::move(out), {x}, [xi, d = std::forward<F>(local_derivative)](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        const auto& xv = t.value(xi);
        const auto& yv = t.value(self);
        auto& gx = t.grad(xi);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i] * d(xv[i], yv[i]);
    });
}

}  // namespace

Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    DenseArray out = a.value();
    out += b.value();
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
        accumulate(t, ai, t.grad(self));
        accumulate(t, bi, t.grad(self));
    });
}

Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    DenseArray out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] -= b.value()[i];
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
        accumulate(t, ai, t.grad(self));
        if (t.requires_grad(bi)) {
            const auto& g = t.grad(self);
            auto& gb = t.grad(bi);
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    DenseArray out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] *= b.value()[i];
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ai)) {
            auto& ga = t.grad(ai);
            const auto& bv = t.value(bi);
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(bi)) {
            auto& gb = t.grad(bi);
            const auto& av = t.value(ai);
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var x, double c) {
    DenseArray out = x.value();
    for (auto& v : out.values())
        v *= c;
    return unary(x, std::move(out), [c](double, double) { return c; });
}

Var add_scalar(Var x, double c) {
    DenseArray out = x.value();
    for (auto& v : out.values())
        v += c;
    return unary(x, std::move(out), [](double, double) { return 1.0; });
}

Var affine(Var x, Var weight, Var bias) {
    const auto& W = weight.value();
    const auto& b = bias.value();
    const auto& X = x.value();
    require(W.rank() == 2, "affine: weight must be a matrix, got " + shape_string(W.shape()));
    const std::size_t m = W.rows(), n = W.cols();
    require(b.rank() == 1 && b.size() == m, "affine: bias " + shape_string(b.shape()) + " does not match weight " +
                                                shape_string(W.shape()));
    require(X.cols() == n, "affine: input " + shape_string(X.shape()) + " does not match weight " +
                               shape_string(W.shape()));
    const std::size_t B = X.rows();
    DenseArray out = X.rank() == 1 ? DenseArray({m}) : DenseArray({B, m});
    for (std::size_t r = 0; r < B; ++r) {
        const double* xr = X.values().data() + r * n;
        double* yr = out.values().data() + r * m;
        for (std::size_t i = 0; i < m; ++i) {
            const double* wi = W.values().data() + i * n;
            double acc = b[i];
            for (std::size_t j = 0; j < n; ++j)
                acc += wi[j] * xr[j];
            yr[i] = acc;
        }
    }
    const auto xi = x.id(), wi_ = weight.id(), bi = bias.id();
    return x.tape().record(std::move(out), {x, weight, bias}, [xi, wi_, bi, B, m, n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& Xv = t.value(xi);
        const auto& Wv = t.value(wi_);
        if (t.requires_grad(xi)) {
            auto& gx = t.grad(xi);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[r * m + i];
                    if (gi == 0.0)
                        continue;
                    for (std::size_t j = 0; j < n; ++j)
                        gx[r * n + j] += gi * Wv[i * n + j];
                }
        }
        if (t.requires_grad(wi_)) {
            auto& gw = t.grad(wi_);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[r * m + i];
                    if (gi == 0.0)
                        continue;
                    for (std::size_t j = 0; j < n; ++j)
                        gw[i * n + j] += gi * Xv[r * n + j];
                }
        }
        if (t.requires_grad(bi)) {
            auto& gb = t.grad(bi);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t i = 0; i < m; ++i)
                    gb[i] += g[r * m + i];
        }
    });
}

Var matmul(Var a, Var b) {
    const auto& A = a.value();
    const auto& Bm = b.value();
    require(A.rank() == 2 && Bm.rank() == 2 && A.cols() == Bm.rows(),
            "matmul: incompatible " + shape_string(A.shape()) + " x " + shape_string(Bm.shape()));
    const std::size_t n = A.rows(), k = A.cols(), m = Bm.cols();
    DenseArray out({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A(i, p);
            for (std::size_t j = 0; j < m; ++j)
                out(i, j) += aip * Bm(p, j);
        }
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {a, b}, [ai, bi, n, k, m](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& Av = t.value(ai);
        const auto& Bv = t.value(bi);
        if (t.requires_grad(ai)) {
            auto& ga = t.grad(ai);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j)
                        acc += g(i, j) * Bv(p, j);
                    ga(i, p) += acc;
                }
        }
        if (t.requires_grad(bi)) {
            auto& gb = t.grad(bi);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = Av(i, p);
                    for (std::size_t j = 0; j < m; ++j)
                        gb(p, j) += aip * g(i, j);
                }
        }
    });
}

Var transpose(Var a) {
    const auto& A = a.value();
    require(A.rank() == 2, "transpose: expects a matrix");
    const std::size_t n = A.rows(), m = A.cols();
    DenseArray out({m, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            out(j, i) = A(i, j);
    const auto ai = a.id();
    return a.tape().record(std::move(out), {a}, [ai, n, m](Tape& t, std::size_t self) {
        if (!t.requires_grad(ai))
            return;
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                ga(i, j) += g(j, i);
    });
}

Var reshape(Var x, Shape shape) {
    require(element_count(shape) == x.value().size(),
            "reshape: " + shape_string(x.shape()) + " cannot become " + shape_string(shape));
    DenseArray out(std::move(shape), x.value().storage());
    const auto xi = x.id();
    return x.tape().record(std::move(out), {x}, [xi](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        auto& gx = t.grad(xi);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i];
    });
}

Var relu(Var x) {
    DenseArray out = x.value();
    for (auto& v : out.values())
        v = v > 0.0 ? v : 0.0;
    return unary(x, std::move(out), [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
    DenseArray out = x.value();
    for (auto& v : out.values()) {
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        v = std::clamp(s, kProbFloor, 1.0 - kProbFloor);
    }
    return unary(x, std::move(out), [](double xv, double yv) {
        if (yv <= kProbFloor || yv >= 1.0 - kProbFloor)
            return 0.0;
        const double s = xv >= 0.0 ? 1.0 / (1.0 + std::exp(-xv)) : std::exp(xv) / (1.0 + std::exp(xv));
        return s * (1.0 - s);
    });
}

Var square(Var x) {
    DenseArray out = x.value();
    for (auto& v : out.values())
        v = v * v;
    return unary(x, std::move(out), [](double xv, double) { return 2.0 * xv; });
}

Var sqrt(Var x) {
    DenseArray out = x.value();
    for (auto& v : out.values()) {
        require(v >= 0.0, "sqrt: negative input");
        v = std::sqrt(v);
    }
    // The derivative at 0 is taken as 0 so norms of zero vectors stay finite.
    return unary(x, std::move(out), [](double, double yv) { return yv > 0.0 ? 0.5 / yv : 0.0; });
}

Var abs(Var x) {
    DenseArray out = x.value();
    for (auto& v : out.values())
        v = std::abs(v);
    return unary(x, std::move(out), [](double xv, double) { return xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0); });
}

Var pow_scalar(Var x, double exponent) {
    DenseArray out = x.value();
    for (auto& v : out.values()) {
        require(v > 0.0 || exponent >= 1.0, "pow_scalar: non-positive base");
        v = std::pow(v, exponent);
    }
    return unary(x, std::move(out),
                 [exponent](double xv, double) { return exponent * std::pow(xv, exponent - 1.0); });
}

Var softmax_t(Var z, double tau) {
    require(tau > 0.0, "softmax_t: temperature must be positive");
    const auto& Z = z.value();
    require(Z.all_finite(), "softmax_t: non-finite input");
    DenseArray out = Z;
    const std::size_t R = Z.rows(), C = Z.cols();
    for (std::size_t r = 0; r < R; ++r) {
        auto row = out.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (auto& v : row) {
            v = std::exp((v - mx) / tau);
            total += v;
        }
        for (auto& v : row)
            v /= total;
    }
    const auto zi = z.id();
    return z.tape().record(std::move(out), {z}, [zi, R, C, tau](Tape& t, std::size_t self) {
        if (!t.requires_grad(zi))
            return;
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto& gz = t.grad(zi);
        for (std::size_t r = 0; r < R; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c)
                dot += g[r * C + c] * y[r * C + c];
            for (std::size_t c = 0; c < C; ++c)
                gz[r * C + c] += y[r * C + c] * (g[r * C + c] - dot) / tau;
        }
    });
}

Var straight_through_mix(Var hard, Var soft) {
    check_same_shape(hard, soft, "straight_through_mix");
    const auto si = soft.id();
    // (hard - soft).detach() + soft evaluates to `hard` up to rounding; the
    // forward value is taken from `hard` directly so it matches bit for bit.
    return soft.tape().record(hard.value(), {soft}, [si](Tape& t, std::size_t self) {
        accumulate(t, si, t.grad(self));
    });
}

Var concat(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat: no inputs");
    std::vector<double> values;
    std::vector<std::size_t> ids, sizes;
    for (const auto& p : parts) {
        require(p.value().rank() == 1, "concat: expects vectors, got " + shape_string(p.shape()));
        values.insert(values.end(), p.value().values().begin(), p.value().values().end());
        ids.push_back(p.id());
        sizes.push_back(p.value().size());
    }
    return parts.front().tape().record(DenseArray::vector(std::move(values)), parts,
                                       [ids, sizes](Tape& t, std::size_t self) {
                                           const auto& g = t.grad(self);
                                           std::size_t off = 0;
                                           for (std::size_t k = 0; k < ids.size(); ++k) {
                                               if (t.requires_grad(ids[k])) {
                                                   auto& gk = t.grad(ids[k]);
                                                   for (std::size_t i = 0; i < sizes[k]; ++i)
                                                       gk[i] += g[off + i];
                                               }
                                               off += sizes[k];
                                           }
                                       });
}

Var concat_cols(Var a, Var b) {
    const auto& A = a.value();
    const auto& B = b.value();
    require(A.rank() == 2 && B.rank() == 2 && A.rows() == B.rows(),
            "concat_cols: incompatible " + shape_string(A.shape()) + " and " + shape_string(B.shape()));
    const std::size_t R = A.rows(), ca = A.cols(), cb = B.cols();
    DenseArray out({R, ca + cb});
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < ca; ++c)
            out(r, c) = A(r, c);
        for (std::size_t c = 0; c < cb; ++c)
            out(r, ca + c) = B(r, c);
    }
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {a, b}, [ai, bi, R, ca, cb](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ai)) {
            auto& ga = t.grad(ai);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < ca; ++c)
                    ga(r, c) += g(r, c);
        }
        if (t.requires_grad(bi)) {
            auto& gb = t.grad(bi);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < cb; ++c)
                    gb(r, c) += g(r, ca + c);
        }
    });
}

Var gather(Var x, const std::vector<std::size_t>& index) {
    const auto& X = x.value();
    require(X.rank() == 1, "gather: expects a vector");
    std::vector<double> values;
    values.reserve(index.size());
    for (auto i : index) {
        require(i < X.size(), "gather: index out of range");
        values.push_back(X[i]);
    }
    const auto xi = x.id();
    return x.tape().record(DenseArray::vector(std::move(values)), {x}, [xi, index](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        auto& gx = t.grad(xi);
        for (std::size_t k = 0; k < index.size(); ++k)
            gx[index[k]] += g[k];
    });
}

Var gather_rows(Var x, const std::vector<std::size_t>& rows) {
    const auto& X = x.value();
    require(X.rank() == 2, "gather_rows: expects a matrix");
    const std::size_t C = X.cols();
    DenseArray out({rows.size(), C});
    for (std::size_t k = 0; k < rows.size(); ++k) {
        require(rows[k] < X.rows(), "gather_rows: row index out of range");
        std::copy_n(X.row(rows[k]).begin(), C, out.row(k).begin());
    }
    const auto xi = x.id();
    return x.tape().record(std::move(out), {x}, [xi, rows, C](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        auto& gx = t.grad(xi);
        for (std::size_t k = 0; k < rows.size(); ++k)
            for (std::size_t c = 0; c < C; ++c)
                gx(rows[k], c) += g(k, c);
    });
}

Var scatter_rows(Var x, const std::vector<std::size_t>& rows, std::size_t total_rows) {
    const auto& X = x.value();
    require(X.rank() == 2 && X.rows() == rows.size(), "scatter_rows: row count mismatch");
    const std::size_t C = X.cols();
    DenseArray out({total_rows, C});
    for (std::size_t k = 0; k < rows.size(); ++k) {
        require(rows[k] < total_rows, "scatter_rows: row index out of range");
        for (std::size_t c = 0; c < C; ++c)
            out(rows[k], c) += X(k, c);
    }
    const auto xi = x.id();
    return x.tape().record(std::move(out), {x}, [xi, rows, C](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        auto& gx = t.grad(xi);
        for (std::size_t k = 0; k < rows.size(); ++k)
            for (std::size_t c = 0; c < C; ++c)
                gx(k, c) += g(rows[k], c);
    });
}

Var segment_mean(Var x, const std::vector<std::size_t>& segment, std::size_t segments) {
    const auto& X = x.value();
    require(X.rank() == 2 && X.rows() == segment.size(), "segment_mean: one segment id per row required");
    const std::size_t C = X.cols();
    std::vector<std::size_t> counts(segments, 0);
    for (auto s : segment) {
        require(s < segments, "segment_mean: segment id out of range");
        ++counts[s];
    }
    DenseArray out({segments, C});
    for (std::size_t r = 0; r < segment.size(); ++r)
        for (std::size_t c = 0; c < C; ++c)
            out(segment[r], c) += X(r, c);
    for (std::size_t s = 0; s < segments; ++s)
        if (counts[s] > 0)
            for (std::size_t c = 0; c < C; ++c)
                out(s, c) /= static_cast<double>(counts[s]);
    const auto xi = x.id();
    return x.tape().record(std::move(out), {x}, [xi, segment, counts, C](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        auto& gx = t.grad(xi);
        for (std::size_t r = 0; r < segment.size(); ++r) {
            const double inv = 1.0 / static_cast<double>(counts[segment[r]]);
            for (std::size_t c = 0; c < C; ++c)
                gx(r, c) += g(segment[r], c) * inv;
        }
    });
}

Var mean_rows(Var x) {
    const auto& X = x.value();
    require(X.rank() == 2 && X.rows() > 0, "mean_rows: expects a non-empty matrix");
    const std::size_t R = X.rows(), C = X.cols();
    DenseArray out({C});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
            out[c] += X(r, c);
    for (auto& v : out.values())
        v /= static_cast<double>(R);
    const auto xi = x.id();
    return x.tape().record(std::move(out), {x}, [xi, R, C](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        auto& gx = t.grad(xi);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                gx(r, c) += g[c] / static_cast<double>(R);
    });
}

Var sum(Var x) {
    const auto xi = x.id();
    return x.tape().record(DenseArray::scalar(x.value().sum()), {x}, [xi](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const double g = t.grad(self)[0];
        for (auto& v : t.grad(xi).values())
            v += g;
    });
}

Var row_sum(Var x) {
    const auto& X = x.value();
    const std::size_t R = X.rows(), C = X.cols();
    DenseArray out({R});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
            out[r] += X[r * C + c];
    const auto xi = x.id();
    return x.tape().record(std::move(out), {x}, [xi, R, C](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        auto& gx = t.grad(xi);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                gx[r * C + c] += g[r];
    });
}

Var column_mean(Var x) { return mean_rows(x); }

Var column_var(Var x) {
    const auto& X = x.value();
    require(X.rank() == 2 && X.rows() >= 2, "column_var: needs at least two rows");
    const std::size_t R = X.rows(), C = X.cols();
    DenseArray mean({C});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
            mean[c] += X(r, c);
    for (auto& v : mean.values())
        v /= static_cast<double>(R);
    DenseArray out({C});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) {
            const double d = X(r, c) - mean[c];
            out[c] += d * d;
        }
    for (auto& v : out.values())
        v /= static_cast<double>(R - 1);
    const auto xi = x.id();
    return x.tape().record(std::move(out), {x}, [xi, R, C, mean](Tape& t, std::size_t self) {
        if (!t.requires_grad(xi))
            return;
        const auto& g = t.grad(self);
        const auto& Xv = t.value(xi);
        auto& gx = t.grad(xi);
        const double k = 2.0 / static_cast<double>(R - 1);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                gx(r, c) += g[c] * k * (Xv(r, c) - mean[c]);
    });
}

Var mul_scalar(Var x, Var s) {
    require(s.value().size() == 1, "mul_scalar: scale must hold one value");
    const double sv = s.value()[0];
    DenseArray out = x.value();
    for (auto& v : out.values())
        v *= sv;
    const auto xi = x.id(), si = s.id();
    return x.tape().record(std::move(out), {x, s}, [xi, si](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(xi)) {
            const double sv = t.value(si)[0];
            auto& gx = t.grad(xi);
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] * sv;
        }
        if (t.requires_grad(si)) {
            const auto& Xv = t.value(xi);
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i)
                acc += g[i] * Xv[i];
            t.grad(si)[0] += acc;
        }
    });
}

Var mul_rows(Var x, Var s) {
    const auto& X = x.value();
    const std::size_t R = X.rows(), C = X.cols();
    require(s.value().rank() == 1 && s.value().size() == R, "mul_rows: one scale per row required");
    DenseArray out = X;
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
            out[r * C + c] *= s.value()[r];
    const auto xi = x.id(), si = s.id();
    return x.tape().record(std::move(out), {x, s}, [xi, si, R, C](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(xi)) {
            const auto& sv = t.value(si);
            auto& gx = t.grad(xi);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c)
                    gx[r * C + c] += g[r * C + c] * sv[r];
        }
        if (t.requires_grad(si)) {
            const auto& Xv = t.value(xi);
            auto& gs = t.grad(si);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c)
                    gs[r] += g[r * C + c] * Xv[r * C + c];
        }
    });
}

Var bce(const DenseArray& target, Var prob) {
    const auto& P = prob.value();
    require(target.size() == P.size(), "bce: target " + shape_string(target.shape()) + " vs prediction " +
                                           shape_string(P.shape()));
    const std::size_t rows = P.rows();
    double loss = 0.0;
    for (std::size_t i = 0; i < P.size(); ++i) {
        const double p = std::clamp(P[i], kProbFloor, 1.0 - kProbFloor);
        loss -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
    }
    loss /= static_cast<double>(rows);
    const auto pi = prob.id();
    return prob.tape().record(DenseArray::scalar(loss), {prob}, [pi, target, rows](Tape& t, std::size_t self) {
        if (!t.requires_grad(pi))
            return;
        const double g = t.grad(self)[0] / static_cast<double>(rows);
        const auto& Pv = t.value(pi);
        auto& gp = t.grad(pi);
        for (std::size_t i = 0; i < Pv.size(); ++i) {
            const double p = std::clamp(Pv[i], kProbFloor, 1.0 - kProbFloor);
            gp[i] += g * (-target[i] / p + (1.0 - target[i]) / (1.0 - p));
        }
    });
}

BatchNormState BatchNormState::identity(std::size_t channels, double momentum, double epsilon) {
    BatchNormState s;
    s.gamma = DenseArray({channels}, 1.0);
    s.beta = DenseArray({channels}, 0.0);
    s.running_mean = DenseArray({channels}, 0.0);
    s.running_var = DenseArray({channels}, 1.0);
    s.momentum = momentum;
    s.epsilon = epsilon;
    return s;
}

void BatchNormState::validate() const {
    const auto c = gamma.size();
    require(beta.size() == c && running_mean.size() == c && running_var.size() == c,
            "BatchNormState: channel counts differ");
    require(momentum > 0.0 && momentum <= 1.0, "BatchNormState: momentum must lie in (0, 1]");
    require(epsilon > 0.0, "BatchNormState: epsilon must be positive");
    for (double v : running_var.values())
        require(v >= 0.0, "BatchNormState: negative running variance");
}

Var batch_norm(Var x, Var gamma, Var beta, DenseArray& running_mean, DenseArray& running_var, double momentum,
               double epsilon, BnMode mode) {
    const auto& X = x.value();
    require(X.rank() == 2 && X.rows() >= 1, "batch_norm: expects a [B x C] batch with B >= 1");
    const std::size_t B = X.rows(), C = X.cols();
    require(gamma.value().size() == C && beta.value().size() == C && running_mean.size() == C &&
                running_var.size() == C,
            "batch_norm: channel count mismatch");
    const auto& g = gamma.value();
    const auto& b = beta.value();

    DenseArray xhat({B, C});
    DenseArray inv_std({C});
    if (mode == BnMode::train) {
        require(B >= 2, "batch_norm: train mode needs a batch of at least 2 (batch variance undefined)");
        DenseArray mean({C}), var({C});
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t c = 0; c < C; ++c)
                mean[c] += X(r, c);
        for (auto& v : mean.values())
            v /= static_cast<double>(B);
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double d = X(r, c) - mean[c];
                var[c] += d * d;
            }
        for (std::size_t c = 0; c < C; ++c) {
            const double biased = var[c] / static_cast<double>(B);
            inv_std[c] = 1.0 / std::sqrt(biased + epsilon);
            const double unbiased = var[c] / static_cast<double>(B - 1);
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
            for (std::size_t r = 0; r < B; ++r)
                xhat(r, c) = (X(r, c) - mean[c]) * inv_std[c];
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            inv_std[c] = 1.0 / std::sqrt(running_var[c] + epsilon);
            for (std::size_t r = 0; r < B; ++r)
                xhat(r, c) = (X(r, c) - running_mean[c]) * inv_std[c];
        }
    }
    DenseArray out({B, C});
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < C; ++c)
            out(r, c) = g[c] * xhat(r, c) + b[c];

    const auto xi = x.id(), gi = gamma.id(), bi = beta.id();
    const bool train = mode == BnMode::train;
    return x.tape().record(
        std::move(out), {x, gamma, beta},
        [xi, gi, bi, B, C, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
            const auto& dy = t.grad(self);
            const auto& gv = t.value(gi);
            if (t.requires_grad(gi)) {
                auto& gg = t.grad(gi);
                for (std::size_t r = 0; r < B; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        gg[c] += dy(r, c) * xhat(r, c);
            }
            if (t.requires_grad(bi)) {
                auto& gb = t.grad(bi);
                for (std::size_t r = 0; r < B; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        gb[c] += dy(r, c);
            }
            if (!t.requires_grad(xi))
                return;
            auto& gx = t.grad(xi);
            for (std::size_t c = 0; c < C; ++c) {
                if (!train) {
                    for (std::size_t r = 0; r < B; ++r)
                        gx(r, c) += dy(r, c) * gv[c] * inv_std[c];
                    continue;
                }
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t r = 0; r < B; ++r) {
                    const double dxh = dy(r, c) * gv[c];
                    s1 += dxh;
                    s2 += dxh * xhat(r, c);
                }
                const double inv_b = 1.0 / static_cast<double>(B);
                for (std::size_t r = 0; r < B; ++r) {
                    const double dxh = dy(r, c) * gv[c];
                    gx(r, c) += inv_std[c] * (dxh - inv_b * s1 - xhat(r, c) * inv_b * s2);
                }
            }
        });
}

Var batch_norm(Var x, BatchNormState& state, BnMode mode) {
    state.validate();
    Tape& t = x.tape();
    Var g = t.constant(state.gamma);
    Var b = t.constant(state.beta);
    return batch_norm(x, g, b, state.running_mean, state.running_var, state.momentum, state.epsilon, mode);
}

}  // namespace beamgraph::tk
