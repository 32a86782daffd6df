#pragma once

// Reverse-mode autodiff over dense row-major tensors. Single-sample graphs
// are built per forward pass; gradients live in a GradMap owned by the
// backward() call, so shared parameter leaves are read-only and graphs can
// be built and differentiated from several threads at once.

#include "a2i/common.hpp"

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace a2i {

template <class S>
struct TTensor;

template <class S>
using TPtr = std::shared_ptr<TTensor<S>>;

template <class S>
class GradMap {
public:
    std::vector<S>& at(const TTensor<S>* t);
    bool has(const TTensor<S>* t) const { return grads_.count(t) != 0; }

private:
    std::unordered_map<const TTensor<S>*, std::vector<S>> grads_;
};

template <class S>
struct TTensor {
    std::vector<int> shape;
    std::vector<S> v;
    bool needs_grad = false;
    std::vector<TPtr<S>> parents;
    // pulls this node's gradient from g and accumulates into parents
    std::function<void(TTensor<S>&, GradMap<S>&)> backprop;

    int64_t size() const { return (int64_t)v.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : (int)(size() / shape[0]); }
};

template <class S>
std::vector<S>& GradMap<S>::at(const TTensor<S>* t) {
    auto it = grads_.find(t);
    if (it == grads_.end()) it = grads_.emplace(t, std::vector<S>(t->v.size(), S(0))).first;
    return it->second;
}

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

template <class S>
EMap<S> as_mat(TTensor<S>& t, int r, int c) {
    return EMap<S>(t.v.data(), r, c);
}
template <class S>
ECMap<S> as_mat(const TTensor<S>& t, int r, int c) {
    return ECMap<S>(t.v.data(), r, c);
}
template <class S>
EMap<S> as_mat(std::vector<S>& v, int r, int c) {
    return EMap<S>(v.data(), r, c);
}
template <class S>
ECMap<S> as_mat(const std::vector<S>& v, int r, int c) {
    return ECMap<S>(v.data(), r, c);
}

// ---------------------------------------------------------------- creation

template <class S>
TPtr<S> make_tensor(std::vector<int> shape) {
    auto t = std::make_shared<TTensor<S>>();
    t->shape = std::move(shape);
    t->v.assign(numel(t->shape), S(0));
    return t;
}

template <class S>
TPtr<S> constant(std::vector<int> shape, std::vector<S> data) {
    auto t = make_tensor<S>(std::move(shape));
    check_arg((int64_t)data.size() == t->size(), "constant: data size mismatch");
    t->v = std::move(data);
    return t;
}

template <class S>
TPtr<S> scalar(S value) {
    auto t = make_tensor<S>({1});
    t->v[0] = value;
    return t;
}

template <class S>
TPtr<S> param(std::vector<int> shape) {
    auto t = make_tensor<S>(std::move(shape));
    t->needs_grad = true;
    return t;
}

template <class S>
TPtr<S> detach(const TPtr<S>& x) {
    auto t = make_tensor<S>(x->shape);
    t->v = x->v;
    return t;
}

namespace detail {

template <class S>
TPtr<S> node(std::vector<int> shape, std::vector<TPtr<S>> parents,
             std::function<void(TTensor<S>&, GradMap<S>&)> bp) {
    auto t = make_tensor<S>(std::move(shape));
    for (auto& p : parents)
        if (p->needs_grad) t->needs_grad = true;
    if (t->needs_grad) {
        t->parents = std::move(parents);
        t->backprop = std::move(bp);
    }
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------- backward

template <class S>
void backward(const TPtr<S>& root, GradMap<S>& g) {
    check_arg(root->size() == 1, "backward: root must be scalar");
    if (!root->needs_grad) return;
    // iterative post-order topo sort over the needs_grad subgraph
    std::vector<TTensor<S>*> topo;
    std::unordered_set<TTensor<S>*> done;
    std::vector<std::pair<TTensor<S>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            TTensor<S>* p = n->parents[idx].get();
            ++idx;
            if (p->needs_grad && !done.count(p)) stack.push_back({p, 0});
        } else {
            if (!done.count(n)) {
                done.insert(n);
                topo.push_back(n);
            }
            stack.pop_back();
        }
    }
    g.at(root.get())[0] = S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TTensor<S>* n = *it;
        if (n->backprop && g.has(n)) n->backprop(*n, g);
    }
}

// ------------------------------------------------------------- elementwise

template <class S>
TPtr<S> add(const TPtr<S>& a, const TPtr<S>& b) {
    check_arg(a->v.size() == b->v.size(), "add: size mismatch");
    auto t = detail::node<S>(a->shape, {a, b}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        for (int k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!p->needs_grad) continue;
            auto& dp = g.at(p.get());
            for (size_t i = 0; i < dy.size(); ++i) dp[i] += dy[i];
        }
    });
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = a->v[i] + b->v[i];
    return t;
}

template <class S>
TPtr<S> sub(const TPtr<S>& a, const TPtr<S>& b) {
    check_arg(a->v.size() == b->v.size(), "sub: size mismatch");
    auto t = detail::node<S>(a->shape, {a, b}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        if (self.parents[0]->needs_grad) {
            auto& da = g.at(self.parents[0].get());
            for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
        if (self.parents[1]->needs_grad) {
            auto& db = g.at(self.parents[1].get());
            for (size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
        }
    });
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = a->v[i] - b->v[i];
    return t;
}

template <class S>
TPtr<S> mul(const TPtr<S>& a, const TPtr<S>& b) {
    check_arg(a->v.size() == b->v.size(), "mul: size mismatch");
    auto t = detail::node<S>(a->shape, {a, b}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& a_ = self.parents[0];
        auto& b_ = self.parents[1];
        if (a_->needs_grad) {
            auto& da = g.at(a_.get());
            for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b_->v[i];
        }
        if (b_->needs_grad) {
            auto& db = g.at(b_.get());
            for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a_->v[i];
        }
    });
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = a->v[i] * b->v[i];
    return t;
}

template <class S>
TPtr<S> scale(const TPtr<S>& a, double c) {
    auto t = detail::node<S>(a->shape, {a}, [c](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (size_t i = 0; i < dy.size(); ++i) da[i] += S(c) * dy[i];
    });
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = S(c) * a->v[i];
    return t;
}

template <class S>
TPtr<S> add_scalar(const TPtr<S>& a, double c) {
    auto t = detail::node<S>(a->shape, {a}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    });
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = a->v[i] + S(c);
    return t;
}

// multiply every entry of x by a 1-element tensor (trainable gate etc.)
template <class S>
TPtr<S> mul_scalar_node(const TPtr<S>& x, const TPtr<S>& s) {
    check_arg(s->size() == 1, "mul_scalar_node: s must be scalar");
    auto t = detail::node<S>(x->shape, {x, s}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& x_ = self.parents[0];
        auto& s_ = self.parents[1];
        if (x_->needs_grad) {
            auto& dx = g.at(x_.get());
            S sv = s_->v[0];
            for (size_t i = 0; i < dy.size(); ++i) dx[i] += sv * dy[i];
        }
        if (s_->needs_grad) {
            S acc = 0;
            for (size_t i = 0; i < dy.size(); ++i) acc += dy[i] * x_->v[i];
            g.at(s_.get())[0] += acc;
        }
    });
    S sv = s->v[0];
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = sv * x->v[i];
    return t;
}

template <class S>
TPtr<S> exp_op(const TPtr<S>& a) {
    auto t = detail::node<S>(a->shape, {a}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * self.v[i];
    });
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = std::exp(a->v[i]);
    return t;
}

template <class S>
TPtr<S> log_op(const TPtr<S>& a) {
    auto t = detail::node<S>(a->shape, {a}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& a_ = self.parents[0];
        auto& da = g.at(a_.get());
        for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] / a_->v[i];
    });
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = std::log(a->v[i]);
    return t;
}

template <class S>
TPtr<S> tanh_op(const TPtr<S>& a) {
    auto t = detail::node<S>(a->shape, {a}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * (S(1) - self.v[i] * self.v[i]);
    });
    for (size_t i = 0; i < t->v.size(); ++i) t->v[i] = std::tanh(a->v[i]);
    return t;
}

template <class S>
TPtr<S> silu(const TPtr<S>& a) {
    auto t = detail::node<S>(a->shape, {a}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& a_ = self.parents[0];
        auto& da = g.at(a_.get());
        for (size_t i = 0; i < dy.size(); ++i) {
            S x = a_->v[i];
            S sg = S(1) / (S(1) + std::exp(-x));
            da[i] += dy[i] * (sg + x * sg * (S(1) - sg));
        }
    });
    for (size_t i = 0; i < t->v.size(); ++i) {
        S x = a->v[i];
        t->v[i] = x / (S(1) + std::exp(-x));
    }
    return t;
}

// ----------------------------------------------------------- linear algebra

template <class S>
TPtr<S> matmul(const TPtr<S>& a, const TPtr<S>& b) {
    check_arg(a->shape.size() == 2 && b->shape.size() == 2, "matmul: need 2-D operands");
    int m = a->shape[0], k = a->shape[1];
    check_arg(b->shape[0] == k, "matmul: inner dim mismatch " + shape_str(a->shape) + " x " + shape_str(b->shape));
    int n = b->shape[1];
    auto t = detail::node<S>({m, n}, {a, b}, [m, k, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& a_ = self.parents[0];
        auto& b_ = self.parents[1];
        auto dY = as_mat(dy, m, n);
        if (a_->needs_grad) {
            auto dA = as_mat(g.at(a_.get()), m, k);
            dA.noalias() += dY * as_mat(b_->v, k, n).transpose();
        }
        if (b_->needs_grad) {
            auto dB = as_mat(g.at(b_.get()), k, n);
            dB.noalias() += as_mat(a_->v, m, k).transpose() * dY;
        }
    });
    as_mat(t->v, m, n).noalias() = as_mat(a->v, m, k) * as_mat(b->v, k, n);
    return t;
}

template <class S>
TPtr<S> transpose(const TPtr<S>& a) {
    check_arg(a->shape.size() == 2, "transpose: need 2-D operand");
    int m = a->shape[0], n = a->shape[1];
    auto t = detail::node<S>({n, m}, {a}, [m, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto dA = as_mat(g.at(self.parents[0].get()), m, n);
        dA += as_mat(dy, n, m).transpose();
    });
    as_mat(t->v, n, m) = as_mat(a->v, m, n).transpose();
    return t;
}

template <class S>
TPtr<S> reshape(const TPtr<S>& a, std::vector<int> shape) {
    check_arg(numel(shape) == a->size(), "reshape: size mismatch");
    auto t = detail::node<S>(std::move(shape), {a}, [](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    });
    t->v = a->v;
    return t;
}

// ------------------------------------------------------------- reductions

template <class S>
TPtr<S> sum(const TPtr<S>& a) {
    auto t = detail::node<S>({1}, {a}, [](TTensor<S>& self, GradMap<S>& g) {
        S dy = g.at(&self)[0];
        auto& da = g.at(self.parents[0].get());
        for (size_t i = 0; i < da.size(); ++i) da[i] += dy;
    });
    S acc = 0;
    for (S x : a->v) acc += x;
    t->v[0] = acc;
    return t;
}

template <class S>
TPtr<S> mean(const TPtr<S>& a) {
    int64_t n = a->size();
    auto t = detail::node<S>({1}, {a}, [n](TTensor<S>& self, GradMap<S>& g) {
        S dy = g.at(&self)[0] / S(n);
        auto& da = g.at(self.parents[0].get());
        for (size_t i = 0; i < da.size(); ++i) da[i] += dy;
    });
    S acc = 0;
    for (S x : a->v) acc += x;
    t->v[0] = acc / S(n);
    return t;
}

// per-row sum of a [m,n] matrix -> {m}
template <class S>
TPtr<S> rowsum(const TPtr<S>& a) {
    check_arg(a->shape.size() == 2, "rowsum: need 2-D operand");
    int m = a->shape[0], n = a->shape[1];
    auto t = detail::node<S>({m}, {a}, [m, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) da[(size_t)i * n + j] += dy[i];
    });
    for (int i = 0; i < m; ++i) {
        S acc = 0;
        for (int j = 0; j < n; ++j) acc += a->v[(size_t)i * n + j];
        t->v[i] = acc;
    }
    return t;
}

// ---------------------------------------------------------- rows/cols ops

template <class S>
TPtr<S> add_rowvec(const TPtr<S>& x, const TPtr<S>& b) {
    check_arg(x->shape.size() == 2 && b->size() == x->shape[1], "add_rowvec: shape mismatch");
    int m = x->shape[0], n = x->shape[1];
    auto t = detail::node<S>(x->shape, {x, b}, [m, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        if (self.parents[0]->needs_grad) {
            auto& dx = g.at(self.parents[0].get());
            for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        }
        if (self.parents[1]->needs_grad) {
            auto& db = g.at(self.parents[1].get());
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) db[j] += dy[(size_t)i * n + j];
        }
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) t->v[(size_t)i * n + j] = x->v[(size_t)i * n + j] + b->v[j];
    return t;
}

template <class S>
TPtr<S> slice_rows(const TPtr<S>& a, int r0, int r1) {
    check_arg(a->shape.size() == 2 && r0 >= 0 && r1 <= a->shape[0] && r0 < r1, "slice_rows: bad range");
    int n = a->shape[1];
    auto t = detail::node<S>({r1 - r0, n}, {a}, [r0, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (size_t i = 0; i < dy.size(); ++i) da[(size_t)r0 * n + i] += dy[i];
    });
    std::copy(a->v.begin() + (size_t)r0 * n, a->v.begin() + (size_t)r1 * n, t->v.begin());
    return t;
}

template <class S>
TPtr<S> concat_rows(const TPtr<S>& a, const TPtr<S>& b) {
    check_arg(a->shape.size() == 2 && b->shape.size() == 2 && a->shape[1] == b->shape[1],
              "concat_rows: col mismatch");
    int n = a->shape[1];
    int ra = a->shape[0], rb = b->shape[0];
    auto t = detail::node<S>({ra + rb, n}, {a, b}, [ra, rb, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        if (self.parents[0]->needs_grad) {
            auto& da = g.at(self.parents[0].get());
            for (size_t i = 0; i < (size_t)ra * n; ++i) da[i] += dy[i];
        }
        if (self.parents[1]->needs_grad) {
            auto& db = g.at(self.parents[1].get());
            for (size_t i = 0; i < (size_t)rb * n; ++i) db[i] += dy[(size_t)ra * n + i];
        }
    });
    std::copy(a->v.begin(), a->v.end(), t->v.begin());
    std::copy(b->v.begin(), b->v.end(), t->v.begin() + (size_t)ra * n);
    return t;
}

// stack {m}-vectors as columns of a [m, count] matrix
template <class S>
TPtr<S> stack_cols(const std::vector<TPtr<S>>& cols) {
    check_arg(!cols.empty(), "stack_cols: empty input");
    int m = (int)cols[0]->size();
    int n = (int)cols.size();
    for (auto& c : cols) check_arg((int)c->size() == m, "stack_cols: length mismatch");
    auto t = detail::node<S>({m, n}, cols, [m, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        for (int j = 0; j < n; ++j) {
            auto& p = self.parents[j];
            if (!p->needs_grad) continue;
            auto& dp = g.at(p.get());
            for (int i = 0; i < m; ++i) dp[i] += dy[(size_t)i * n + j];
        }
    });
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) t->v[(size_t)i * n + j] = cols[j]->v[i];
    return t;
}

template <class S>
TPtr<S> slice_col(const TPtr<S>& a, int j) {
    check_arg(a->shape.size() == 2 && j >= 0 && j < a->shape[1], "slice_col: bad index");
    int m = a->shape[0], n = a->shape[1];
    auto t = detail::node<S>({m}, {a}, [j, m, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (int i = 0; i < m; ++i) da[(size_t)i * n + j] += dy[i];
    });
    for (int i = 0; i < m; ++i) t->v[i] = a->v[(size_t)i * n + j];
    return t;
}

// --------------------------------------------------------------- softmaxes

template <class S>
TPtr<S> softmax_rows(const TPtr<S>& a) {
    check_arg(a->shape.size() == 2, "softmax_rows: need 2-D operand");
    int m = a->shape[0], n = a->shape[1];
    auto t = detail::node<S>(a->shape, {a}, [m, n](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (int i = 0; i < m; ++i) {
            const S* y = self.v.data() + (size_t)i * n;
            const S* d = dy.data() + (size_t)i * n;
            S dot = 0;
            for (int j = 0; j < n; ++j) dot += d[j] * y[j];
            S* out = da.data() + (size_t)i * n;
            for (int j = 0; j < n; ++j) out[j] += (d[j] - dot) * y[j];
        }
    });
    for (int i = 0; i < m; ++i) {
        const S* x = a->v.data() + (size_t)i * n;
        S* y = t->v.data() + (size_t)i * n;
        S mx = x[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        S acc = 0;
        for (int j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            acc += y[j];
        }
        for (int j = 0; j < n; ++j) y[j] /= acc;
    }
    return t;
}

// per-row log-sum-exp of [m,n] -> {m}
template <class S>
TPtr<S> logsumexp_rows(const TPtr<S>& a) {
    check_arg(a->shape.size() == 2, "logsumexp_rows: need 2-D operand");
    int m = a->shape[0], n = a->shape[1];
    // save row softmax for the backward pass
    auto probs = std::make_shared<std::vector<S>>((size_t)m * n);
    auto t = detail::node<S>({m}, {a}, [m, n, probs](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& da = g.at(self.parents[0].get());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) da[(size_t)i * n + j] += dy[i] * (*probs)[(size_t)i * n + j];
    });
    for (int i = 0; i < m; ++i) {
        const S* x = a->v.data() + (size_t)i * n;
        S mx = x[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        S acc = 0;
        for (int j = 0; j < n; ++j) acc += std::exp(x[j] - mx);
        t->v[i] = mx + std::log(acc);
        for (int j = 0; j < n; ++j) (*probs)[(size_t)i * n + j] = std::exp(x[j] - mx) / acc;
    }
    return t;
}

// -------------------------------------------------------------- embeddings

template <class S>
TPtr<S> embedding(const TPtr<S>& table, const std::vector<int>& ids) {
    check_arg(table->shape.size() == 2, "embedding: table must be 2-D");
    int V = table->shape[0], C = table->shape[1];
    for (int id : ids) check_arg(id >= 0 && id < V, "embedding: id out of range");
    auto ids_copy = ids;
    auto t = detail::node<S>({(int)ids.size(), C}, {table},
                             [ids_copy, C](TTensor<S>& self, GradMap<S>& g) {
                                 auto& dy = g.at(&self);
                                 auto& dt = g.at(self.parents[0].get());
                                 for (size_t i = 0; i < ids_copy.size(); ++i)
                                     for (int j = 0; j < C; ++j)
                                         dt[(size_t)ids_copy[i] * C + j] += dy[i * C + j];
                             });
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table->v.begin() + (size_t)ids[i] * C, table->v.begin() + (size_t)(ids[i] + 1) * C,
                  t->v.begin() + i * C);
    return t;
}

// ------------------------------------------------------------ norm layers

// LayerNorm over the last dim of [N, C] with per-channel affine
template <class S>
TPtr<S> layer_norm(const TPtr<S>& x, const TPtr<S>& gamma, const TPtr<S>& beta, double eps = 1e-5) {
    check_arg(x->shape.size() == 2, "layer_norm: need 2-D input");
    int N = x->shape[0], C = x->shape[1];
    check_arg(gamma->size() == C && beta->size() == C, "layer_norm: affine size mismatch");
    auto xhat = std::make_shared<std::vector<S>>((size_t)N * C);
    auto istd = std::make_shared<std::vector<S>>(N);
    auto t = detail::node<S>(x->shape, {x, gamma, beta},
                             [N, C, xhat, istd](TTensor<S>& self, GradMap<S>& g) {
                                 auto& dy = g.at(&self);
                                 auto& x_ = self.parents[0];
                                 auto& gm = self.parents[1];
                                 for (int i = 0; i < N; ++i) {
                                     const S* d = dy.data() + (size_t)i * C;
                                     const S* xh = xhat->data() + (size_t)i * C;
                                     if (gm->needs_grad) {
                                         auto& dg = g.at(gm.get());
                                         for (int j = 0; j < C; ++j) dg[j] += d[j] * xh[j];
                                     }
                                     if (self.parents[2]->needs_grad) {
                                         auto& db = g.at(self.parents[2].get());
                                         for (int j = 0; j < C; ++j) db[j] += d[j];
                                     }
                                     if (x_->needs_grad) {
                                         auto& dx = g.at(x_.get());
                                         S m1 = 0, m2 = 0;
                                         for (int j = 0; j < C; ++j) {
                                             S dh = d[j] * gm->v[j];
                                             m1 += dh;
                                             m2 += dh * xh[j];
                                         }
                                         m1 /= S(C);
                                         m2 /= S(C);
                                         S is = (*istd)[i];
                                         S* out = dx.data() + (size_t)i * C;
                                         for (int j = 0; j < C; ++j) {
                                             S dh = d[j] * gm->v[j];
                                             out[j] += is * (dh - m1 - xh[j] * m2);
                                         }
                                     }
                                 }
                             });
    for (int i = 0; i < N; ++i) {
        const S* xin = x->v.data() + (size_t)i * C;
        S mu = 0;
        for (int j = 0; j < C; ++j) mu += xin[j];
        mu /= S(C);
        S var = 0;
        for (int j = 0; j < C; ++j) var += (xin[j] - mu) * (xin[j] - mu);
        var /= S(C);
        S is = S(1) / std::sqrt(var + S(eps));
        (*istd)[i] = is;
        S* xh = xhat->data() + (size_t)i * C;
        S* y = t->v.data() + (size_t)i * C;
        for (int j = 0; j < C; ++j) {
            xh[j] = (xin[j] - mu) * is;
            y[j] = gamma->v[j] * xh[j] + beta->v[j];
        }
    }
    return t;
}

// GroupNorm over [C, H, W] with per-channel affine
template <class S>
TPtr<S> group_norm(const TPtr<S>& x, int groups, const TPtr<S>& gamma, const TPtr<S>& beta,
                   double eps = 1e-5) {
    check_arg(x->shape.size() == 3, "group_norm: need [C,H,W] input");
    int C = x->shape[0], HW = x->shape[1] * x->shape[2];
    check_arg(C % groups == 0, "group_norm: channels not divisible by groups");
    check_arg(gamma->size() == C && beta->size() == C, "group_norm: affine size mismatch");
    int cg = C / groups;
    int64_t gs = (int64_t)cg * HW;  // elements per group
    auto xhat = std::make_shared<std::vector<S>>(x->v.size());
    auto istd = std::make_shared<std::vector<S>>(groups);
    auto t = detail::node<S>(
        x->shape, {x, gamma, beta},
        [C, HW, groups, cg, gs, xhat, istd](TTensor<S>& self, GradMap<S>& g) {
            auto& dy = g.at(&self);
            auto& x_ = self.parents[0];
            auto& gm = self.parents[1];
            if (gm->needs_grad) {
                auto& dg = g.at(gm.get());
                for (int c = 0; c < C; ++c) {
                    S acc = 0;
                    for (int k = 0; k < HW; ++k)
                        acc += dy[(size_t)c * HW + k] * (*xhat)[(size_t)c * HW + k];
                    dg[c] += acc;
                }
            }
            if (self.parents[2]->needs_grad) {
                auto& db = g.at(self.parents[2].get());
                for (int c = 0; c < C; ++c) {
                    S acc = 0;
                    for (int k = 0; k < HW; ++k) acc += dy[(size_t)c * HW + k];
                    db[c] += acc;
                }
            }
            if (x_->needs_grad) {
                auto& dx = g.at(x_.get());
                for (int grp = 0; grp < groups; ++grp) {
                    int64_t base = (int64_t)grp * gs;
                    S m1 = 0, m2 = 0;
                    for (int64_t k = 0; k < gs; ++k) {
                        int c = grp * cg + (int)(k / HW);
                        S dh = dy[base + k] * gm->v[c];
                        m1 += dh;
                        m2 += dh * (*xhat)[base + k];
                    }
                    m1 /= S(gs);
                    m2 /= S(gs);
                    S is = (*istd)[grp];
                    for (int64_t k = 0; k < gs; ++k) {
                        int c = grp * cg + (int)(k / HW);
                        S dh = dy[base + k] * gm->v[c];
                        dx[base + k] += is * (dh - m1 - (*xhat)[base + k] * m2);
                    }
                }
            }
        });
    for (int grp = 0; grp < groups; ++grp) {
        int64_t base = (int64_t)grp * gs;
        S mu = 0;
        for (int64_t k = 0; k < gs; ++k) mu += x->v[base + k];
        mu /= S(gs);
        S var = 0;
        for (int64_t k = 0; k < gs; ++k) var += (x->v[base + k] - mu) * (x->v[base + k] - mu);
        var /= S(gs);
        S is = S(1) / std::sqrt(var + S(eps));
        (*istd)[grp] = is;
        for (int64_t k = 0; k < gs; ++k) {
            int c = grp * cg + (int)(k / HW);
            S xh = (x->v[base + k] - mu) * is;
            (*xhat)[base + k] = xh;
            t->v[base + k] = gamma->v[c] * xh + beta->v[c];
        }
    }
    return t;
}

// ------------------------------------------------------------ convolutions

namespace detail {

// im2col for [Cin, H, W] -> [Ho*Wo, Cin*k*k]
template <class S>
void im2col(const S* x, int Cin, int H, int W, int k, int stride, int pad, std::vector<S>& col,
            int Ho, int Wo) {
    col.assign((size_t)Ho * Wo * Cin * k * k, S(0));
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            S* dst = col.data() + ((size_t)oy * Wo + ox) * Cin * k * k;
            for (int c = 0; c < Cin; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    int iy = oy * stride + ky - pad;
                    for (int kx = 0; kx < k; ++kx) {
                        int ix = ox * stride + kx - pad;
                        S val = 0;
                        if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                            val = x[((size_t)c * H + iy) * W + ix];
                        dst[(c * k + ky) * k + kx] = val;
                    }
                }
            }
        }
    }
}

template <class S>
void col2im(const S* col, int Cin, int H, int W, int k, int stride, int pad, S* dx, int Ho,
            int Wo) {
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            const S* src = col + ((size_t)oy * Wo + ox) * Cin * k * k;
            for (int c = 0; c < Cin; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        dx[((size_t)c * H + iy) * W + ix] += src[(c * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// 2-D convolution: x [Cin,H,W], W [Cout, Cin*k*k], b [Cout]
template <class S>
TPtr<S> conv2d(const TPtr<S>& x, const TPtr<S>& w, const TPtr<S>& b, int k, int stride, int pad) {
    check_arg(x->shape.size() == 3, "conv2d: need [C,H,W] input");
    int Cin = x->shape[0], H = x->shape[1], W = x->shape[2];
    int Cout = w->shape[0];
    check_arg(w->shape.size() == 2 && w->shape[1] == Cin * k * k, "conv2d: weight shape mismatch");
    check_arg(b->size() == Cout, "conv2d: bias size mismatch");
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    auto col = std::make_shared<std::vector<S>>();
    detail::im2col(x->v.data(), Cin, H, W, k, stride, pad, *col, Ho, Wo);
    int colw = Cin * k * k;
    auto t = detail::node<S>(
        {Cout, Ho, Wo}, {x, w, b},
        [=](TTensor<S>& self, GradMap<S>& g) {
            auto& dy = g.at(&self);  // [Cout, Ho*Wo] laid out row-major
            auto dY = as_mat(dy, Cout, Ho * Wo);
            auto& x_ = self.parents[0];
            auto& w_ = self.parents[1];
            auto& b_ = self.parents[2];
            if (b_->needs_grad) {
                auto& db = g.at(b_.get());
                for (int c = 0; c < Cout; ++c) db[c] += dY.row(c).sum();
            }
            if (w_->needs_grad) {
                // dW [Cout, colw] += dY [Cout, HoWo] * col [HoWo, colw]
                auto dW = as_mat(g.at(w_.get()), Cout, colw);
                dW.noalias() += dY * as_mat(*col, Ho * Wo, colw);
            }
            if (x_->needs_grad) {
                // dcol [HoWo, colw] = dY^T * W
                std::vector<S> dcol((size_t)Ho * Wo * colw);
                as_mat(dcol, Ho * Wo, colw).noalias() =
                    dY.transpose() * as_mat(w_->v, Cout, colw);
                detail::col2im(dcol.data(), Cin, H, W, k, stride, pad, g.at(x_.get()).data(), Ho,
                               Wo);
            }
        });
    // out [Cout, HoWo] = W [Cout, colw] * col^T
    as_mat(t->v, Cout, Ho * Wo).noalias() =
        as_mat(w->v, Cout, colw) * as_mat(*col, Ho * Wo, colw).transpose();
    for (int c = 0; c < Cout; ++c)
        for (int i = 0; i < Ho * Wo; ++i) t->v[(size_t)c * Ho * Wo + i] += b->v[c];
    return t;
}

template <class S>
TPtr<S> upsample_nearest2x(const TPtr<S>& x) {
    check_arg(x->shape.size() == 3, "upsample: need [C,H,W] input");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    auto t = detail::node<S>({C, 2 * H, 2 * W}, {x}, [C, H, W](TTensor<S>& self, GradMap<S>& g) {
        auto& dy = g.at(&self);
        auto& dx = g.at(self.parents[0].get());
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx)
                    dx[((size_t)c * H + y / 2) * W + xx / 2] +=
                        dy[((size_t)c * 2 * H + y) * 2 * W + xx];
    });
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx)
                t->v[((size_t)c * 2 * H + y) * 2 * W + xx] = x->v[((size_t)c * H + y / 2) * W + xx / 2];
    return t;
}

// 1-D convolution: x [Cin, L], W [Cout, Cin*k], b [Cout]; 'same' padding
template <class S>
TPtr<S> conv1d(const TPtr<S>& x, const TPtr<S>& w, const TPtr<S>& b, int k, int pad) {
    check_arg(x->shape.size() == 2, "conv1d: need [C,L] input");
    int Cin = x->shape[0], L = x->shape[1];
    int Cout = w->shape[0];
    check_arg(w->shape[1] == Cin * k, "conv1d: weight shape mismatch");
    int Lo = L + 2 * pad - k + 1;
    check_arg(Lo >= 1, "conv1d: input too short");
    auto t = detail::node<S>(
        {Cout, Lo}, {x, w, b}, [=](TTensor<S>& self, GradMap<S>& g) {
            auto& dy = g.at(&self);
            auto& x_ = self.parents[0];
            auto& w_ = self.parents[1];
            auto& b_ = self.parents[2];
            for (int co = 0; co < Cout; ++co) {
                for (int o = 0; o < Lo; ++o) {
                    S d = dy[(size_t)co * Lo + o];
                    if (b_->needs_grad) g.at(b_.get())[co] += d;
                    for (int ci = 0; ci < Cin; ++ci) {
                        for (int kk = 0; kk < k; ++kk) {
                            int i = o + kk - pad;
                            if (i < 0 || i >= L) continue;
                            if (w_->needs_grad)
                                g.at(w_.get())[(size_t)co * Cin * k + ci * k + kk] +=
                                    d * x_->v[(size_t)ci * L + i];
                            if (x_->needs_grad)
                                g.at(x_.get())[(size_t)ci * L + i] +=
                                    d * w_->v[(size_t)co * Cin * k + ci * k + kk];
                        }
                    }
                }
            }
        });
    for (int co = 0; co < Cout; ++co) {
        for (int o = 0; o < Lo; ++o) {
            S acc = b->v[co];
            for (int ci = 0; ci < Cin; ++ci)
                for (int kk = 0; kk < k; ++kk) {
                    int i = o + kk - pad;
                    if (i >= 0 && i < L) acc += x->v[(size_t)ci * L + i] * w->v[(size_t)co * Cin * k + ci * k + kk];
                }
            t->v[(size_t)co * Lo + o] = acc;
        }
    }
    return t;
}

// transposed 1-D convolution, stride 2, kernel k, padding p: L -> 2L for k=4,p=1
template <class S>
TPtr<S> conv_transpose1d(const TPtr<S>& x, const TPtr<S>& w, const TPtr<S>& b, int k, int pad) {
    check_arg(x->shape.size() == 2, "conv_transpose1d: need [C,L] input");
    const int stride = 2;
    int Cin = x->shape[0], L = x->shape[1];
    int Cout = w->shape[0];
    check_arg(w->shape[1] == Cin * k, "conv_transpose1d: weight shape mismatch");
    int Lo = (L - 1) * stride - 2 * pad + k;
    auto t = detail::node<S>(
        {Cout, Lo}, {x, w, b}, [=](TTensor<S>& self, GradMap<S>& g) {
            auto& dy = g.at(&self);
            auto& x_ = self.parents[0];
            auto& w_ = self.parents[1];
            auto& b_ = self.parents[2];
            if (b_->needs_grad) {
                auto& db = g.at(b_.get());
                for (int co = 0; co < Cout; ++co)
                    for (int o = 0; o < Lo; ++o) db[co] += dy[(size_t)co * Lo + o];
            }
            for (int co = 0; co < Cout; ++co)
                for (int i = 0; i < L; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        int o = i * stride + kk - pad;
                        if (o < 0 || o >= Lo) continue;
                        S d = dy[(size_t)co * Lo + o];
                        for (int ci = 0; ci < Cin; ++ci) {
                            if (w_->needs_grad)
                                g.at(w_.get())[(size_t)co * Cin * k + ci * k + kk] +=
                                    d * x_->v[(size_t)ci * L + i];
                            if (x_->needs_grad)
                                g.at(x_.get())[(size_t)ci * L + i] +=
                                    d * w_->v[(size_t)co * Cin * k + ci * k + kk];
                        }
                    }
        });
    for (int co = 0; co < Cout; ++co) {
        for (int o = 0; o < Lo; ++o) t->v[(size_t)co * Lo + o] = b->v[co];
        for (int i = 0; i < L; ++i)
            for (int kk = 0; kk < k; ++kk) {
                int o = i * stride + kk - pad;
                if (o < 0 || o >= Lo) continue;
                for (int ci = 0; ci < Cin; ++ci)
                    t->v[(size_t)co * Lo + o] +=
                        x->v[(size_t)ci * L + i] * w->v[(size_t)co * Cin * k + ci * k + kk];
            }
    }
    return t;
}

}  // namespace a2i
