#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A forward pass builds a graph of Nodes; backward() walks it in reverse
// topological order. Parameters enter the graph as leaves that add their
// gradient into Parameter::grad. A leaf for a frozen parameter does not
// require a gradient, so no gradient is ever computed for it.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "aerolite/error.hpp"

namespace aerolite::ag {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

template <class T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    Matrix<T> grad;
    bool trainable = true;

    void zero_grad() { grad = Matrix<T>::Zero(value.rows(), value.cols()); }
};

template <class T>
struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    template <class Expr>
    void accumulate(const Expr& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    const Matrix<T>& value() const { return node_->value; }
    const Matrix<T>& grad() const { return node_->grad; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }
    T scalar() const { return node_->value(0, 0); }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T, class F>
Var<T> make_var(Matrix<T> value, std::initializer_list<Var<T>> inputs, F&& backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    if (rg) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::forward<F>(backward);
    }
    return Var<T>(std::move(node));
}

template <class T, class F>
Var<T> make_var_n(Matrix<T> value, std::span<const Var<T>> inputs, F&& backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    if (rg) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::forward<F>(backward);
    }
    return Var<T>(std::move(node));
}

template <class T>
bool wants(const std::shared_ptr<Node<T>>& n) {
    return n->requires_grad;
}

inline void check(bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("shape mismatch in ") + what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Leaves

template <class T>
Var<T> constant(Matrix<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var<T>(std::move(node));
}

template <class T>
Var<T> leaf(Parameter<T>& p) {
    auto node = std::make_shared<Node<T>>();
    node->value = p.value;
    if (p.trainable) {
        node->requires_grad = true;
        Parameter<T>* target = &p;
        node->backward = [target](Node<T>& self) {
            if (target->grad.size() == 0) target->zero_grad();
            target->grad += self.grad;
        };
    }
    return Var<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a * b
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::check(a.cols() == b.rows(), "matmul");
    Matrix<T> out = a.value() * b.value();
    return detail::make_var<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& a = self.inputs[0];
        auto& b = self.inputs[1];
        if (a->requires_grad) a->accumulate(self.grad * b->value.transpose());
        if (b->requires_grad) b->accumulate(a->value.transpose() * self.grad);
    });
}

/// a * b^T, the shape of a linear layer applied to row vectors.
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    detail::check(a.cols() == b.cols(), "matmul_nt");
    Matrix<T> out = a.value() * b.value().transpose();
    return detail::make_var<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& a = self.inputs[0];
        auto& b = self.inputs[1];
        if (a->requires_grad) a->accumulate(self.grad * b->value);
        if (b->requires_grad) b->accumulate(self.grad.transpose() * a->value);
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add");
    Matrix<T> out = a.value() + b.value();
    return detail::make_var<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& in : self.inputs) {
            if (in->requires_grad) in->accumulate(self.grad);
        }
    });
}

/// Adds the 1 x n row `r` to every row of `a`.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& r) {
    detail::check(r.rows() == 1 && r.cols() == a.cols(), "add_row");
    Matrix<T> out = a.value().rowwise() + r.value().row(0);
    return detail::make_var<T>(std::move(out), {a, r}, [](Node<T>& self) {
        auto& a = self.inputs[0];
        auto& r = self.inputs[1];
        if (a->requires_grad) a->accumulate(self.grad);
        if (r->requires_grad) r->accumulate(self.grad.colwise().sum());
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Matrix<T> out = a.value() * s;
    return detail::make_var<T>(std::move(out), {a}, [s](Node<T>& self) {
        self.inputs[0]->accumulate(self.grad * s);
    });
}

template <class T>
Var<T> relu(const Var<T>& a) {
    Matrix<T> out = a.value().cwiseMax(T(0));
    return detail::make_var<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& a = self.inputs[0];
        a->accumulate(self.grad.cwiseProduct((a->value.array() > T(0)).template cast<T>().matrix()));
    });
}

/// tanh approximation of GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    const T k = T(0.044715);
    Matrix<T> out = a.value().unaryExpr([=](T x) {
        return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
    });
    return detail::make_var<T>(std::move(out), {a}, [=](Node<T>& self) {
        auto& a = self.inputs[0];
        Matrix<T> d = a->value.unaryExpr([=](T x) {
            T u = c * (x + k * x * x * x);
            T t = std::tanh(u);
            T du = c * (T(1) + T(3) * k * x * x);
            return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
        });
        a->accumulate(self.grad.cwiseProduct(d));
    });
}

/// Row-wise layer normalization with gain and bias rows of width cols(x).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
    detail::check(gain.rows() == 1 && gain.cols() == x.cols() && bias.cols() == x.cols(), "layer_norm");
    const Index n = x.rows();
    const Index d = x.cols();
    Matrix<T> xhat(n, d);
    Matrix<T> inv_std(n, 1);
    for (Index i = 0; i < n; ++i) {
        auto row = x.value().row(i);
        T mean = row.mean();
        T var = (row.array() - mean).square().mean();
        inv_std(i, 0) = T(1) / std::sqrt(var + eps);
        xhat.row(i) = (row.array() - mean) * inv_std(i, 0);
    }
    Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
    return detail::make_var<T>(std::move(out), {x, gain, bias},
                               [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                                   auto& x = self.inputs[0];
                                   auto& gain = self.inputs[1];
                                   auto& bias = self.inputs[2];
                                   const auto& g = self.grad;
                                   if (gain->requires_grad) gain->accumulate(g.cwiseProduct(xhat).colwise().sum());
                                   if (bias->requires_grad) bias->accumulate(g.colwise().sum());
                                   if (x->requires_grad) {
                                       Matrix<T> dxhat = g.array().rowwise() * gain->value.row(0).array();
                                       const T inv_d = T(1) / static_cast<T>(g.cols());
                                       Matrix<T> dx(g.rows(), g.cols());
                                       for (Index i = 0; i < g.rows(); ++i) {
                                           T m1 = dxhat.row(i).sum() * inv_d;
                                           T m2 = dxhat.row(i).dot(xhat.row(i)) * inv_d;
                                           dx.row(i) = ((dxhat.row(i).array() - m1) - xhat.row(i).array() * m2) *
                                                       inv_std(i, 0);
                                       }
                                       x->accumulate(dx);
                                   }
                               });
}

/// Softmax of each row i over columns 0..i (causal mask); masked entries are 0.
template <class T>
Var<T> causal_softmax(const Var<T>& s) {
    detail::check(s.rows() == s.cols(), "causal_softmax");
    const Index n = s.rows();
    Matrix<T> p = Matrix<T>::Zero(n, n);
    for (Index i = 0; i < n; ++i) {
        auto row = s.value().row(i).head(i + 1);
        T mx = row.maxCoeff();
        auto e = (row.array() - mx).exp();
        p.row(i).head(i + 1) = e / e.sum();
    }
    return detail::make_var<T>(Matrix<T>(p), {s}, [p](Node<T>& self) {
        Matrix<T> gp = self.grad.cwiseProduct(p);
        Matrix<T> ds = gp - (p.array().colwise() * gp.rowwise().sum().array()).matrix();
        self.inputs[0]->accumulate(ds);
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count) {
    detail::check(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols");
    Matrix<T> out = a.value().middleCols(start, count);
    return detail::make_var<T>(std::move(out), {a}, [start, count](Node<T>& self) {
        auto& a = self.inputs[0];
        Matrix<T> g = Matrix<T>::Zero(a->value.rows(), a->value.cols());
        g.middleCols(start, count) = self.grad;
        a->accumulate(g);
    });
}

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
    Index rows = parts.empty() ? 0 : parts.front().rows();
    Index cols = 0;
    for (const auto& p : parts) {
        detail::check(p.rows() == rows, "concat_cols");
        cols += p.cols();
    }
    Matrix<T> out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return detail::make_var_n<T>(std::move(out), parts, [](Node<T>& self) {
        Index at = 0;
        for (auto& in : self.inputs) {
            const Index c = in->value.cols();
            if (in->requires_grad) in->accumulate(self.grad.middleCols(at, c));
            at += c;
        }
    });
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    Index cols = parts.empty() ? 0 : parts.front().cols();
    Index rows = 0;
    for (const auto& p : parts) {
        detail::check(p.cols() == cols, "concat_rows");
        rows += p.rows();
    }
    Matrix<T> out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return detail::make_var_n<T>(std::move(out), parts, [](Node<T>& self) {
        Index at = 0;
        for (auto& in : self.inputs) {
            const Index r = in->value.rows();
            if (in->requires_grad) in->accumulate(self.grad.middleRows(at, r));
            at += r;
        }
    });
}

/// Rows of `table` selected by `ids`.
template <class T>
Var<T> gather_rows(const Var<T>& table, std::vector<int> ids) {
    Matrix<T> out(static_cast<Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows()) throw ValidationError("token id out of range");
        out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
    }
    return detail::make_var<T>(std::move(out), {table}, [ids = std::move(ids)](Node<T>& self) {
        auto& t = self.inputs[0];
        Matrix<T> g = Matrix<T>::Zero(t->value.rows(), t->value.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += self.grad.row(static_cast<Index>(i));
        t->accumulate(g);
    });
}

/// Sum of 1x1 scalars.
template <class T>
Var<T> sum_scalars(std::span<const Var<T>> parts) {
    T total = T(0);
    for (const auto& p : parts) {
        detail::check(p.rows() == 1 && p.cols() == 1, "sum_scalars");
        total += p.scalar();
    }
    Matrix<T> out(1, 1);
    out(0, 0) = total;
    return detail::make_var_n<T>(std::move(out), parts, [](Node<T>& self) {
        for (auto& in : self.inputs) {
            if (in->requires_grad) in->accumulate(self.grad);
        }
    });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean token cross-entropy of logits rows against `targets`; rows whose
/// target is negative are ignored.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& targets) {
    detail::check(static_cast<Index>(targets.size()) == logits.rows(), "cross_entropy");
    const Index n = logits.rows();
    const Index v = logits.cols();
    Matrix<T> probs = Matrix<T>::Zero(n, v);
    T total = T(0);
    std::size_t counted = 0;
    for (Index i = 0; i < n; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t < 0) continue;
        if (t >= v) throw ValidationError("target id out of range");
        auto row = logits.value().row(i);
        T mx = row.maxCoeff();
        auto e = (row.array() - mx).exp();
        T z = e.sum();
        probs.row(i) = e / z;
        total += -(row(t) - mx - std::log(z));
        ++counted;
    }
    if (counted == 0) throw ValidationError("cross_entropy without target positions");
    const T inv = T(1) / static_cast<T>(counted);
    Matrix<T> out(1, 1);
    out(0, 0) = total * inv;
    return detail::make_var<T>(std::move(out), {logits}, [probs = std::move(probs), targets, inv](Node<T>& self) {
        Matrix<T> g = probs;
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (targets[i] >= 0) g(static_cast<Index>(i), targets[i]) -= T(1);
        }
        self.inputs[0]->accumulate(g * (self.grad(0, 0) * inv));
    });
}

/// Probability clamp used by the tag loss.
inline constexpr double kProbabilityEpsilon = 1e-7;

/// Summed binary cross-entropy of sigmoid(logits) against binary targets,
/// probabilities clamped to [eps, 1-eps]. The gradient w.r.t. each logit is
/// p - y.
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Matrix<T>& targets) {
    detail::check(logits.rows() == targets.rows() && logits.cols() == targets.cols(), "bce_with_logits");
    const T eps = static_cast<T>(kProbabilityEpsilon);
    Matrix<T> p = logits.value().unaryExpr([](T z) { return T(1) / (T(1) + std::exp(-z)); });
    T total = T(0);
    for (Index i = 0; i < p.size(); ++i) {
        T pk = std::clamp(p.data()[i], eps, T(1) - eps);
        T yk = targets.data()[i];
        total -= yk * std::log(pk) + (T(1) - yk) * std::log(T(1) - pk);
    }
    Matrix<T> out(1, 1);
    out(0, 0) = total;
    return detail::make_var<T>(std::move(out), {logits}, [p = std::move(p), targets](Node<T>& self) {
        self.inputs[0]->accumulate((p - targets) * self.grad(0, 0));
    });
}

// ---------------------------------------------------------------------------

/// Back-propagates from a 1x1 `loss`. Parameter leaves add into their
/// Parameter::grad.
template <class T>
void backward(const Var<T>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw ValidationError("backward needs a scalar loss");
    if (!loss.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad = Matrix<T>::Ones(1, 1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward && node->grad.size() != 0) node->backward(*node);
    }
}

}  // namespace aerolite::ag
