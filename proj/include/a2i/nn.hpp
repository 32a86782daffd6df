#pragma once

// Parameter registry, layers, and the AdamW optimizer used by every
// trainable module. Layers are thin structs that own named parameter
// leaves and build graph nodes in forward().

#include "a2i/tensor.hpp"

#include <cstring>
#include <map>
#include <string>

namespace a2i {

template <class S>
class ParamStore {
public:
    explicit ParamStore(std::string group = "") : group_(std::move(group)) {}

    TPtr<S> add(const std::string& name, std::vector<int> shape) {
        check_arg(!by_name_.count(name), "duplicate parameter: " + name);
        auto p = param<S>(std::move(shape));
        p->needs_grad = trainable_;
        by_name_[name] = p;
        order_.push_back(name);
        return p;
    }

    TPtr<S> get(const std::string& name) const {
        auto it = by_name_.find(name);
        check_arg(it != by_name_.end(), "unknown parameter: " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return by_name_.count(name) != 0; }

    const std::vector<std::string>& names() const { return order_; }
    const std::string& group() const { return group_; }

    int64_t param_count() const {
        int64_t n = 0;
        for (auto& name : order_) n += by_name_.at(name)->size();
        return n;
    }

    bool trainable() const { return trainable_; }
    void set_trainable(bool t) {
        trainable_ = t;
        for (auto& [k, p] : by_name_) p->needs_grad = t;
    }

    template <class F>
    void for_each(F&& f) const {
        for (auto& name : order_) f(name, by_name_.at(name));
    }

private:
    std::string group_;
    std::map<std::string, TPtr<S>> by_name_;
    std::vector<std::string> order_;
    bool trainable_ = true;
};

// -------------------------------------------------------------------- init

template <class S>
void fill_normal(const TPtr<S>& t, Rng& rng, double std_dev) {
    for (auto& x : t->v) x = S(rng.normal() * std_dev);
}

template <class S>
void fill_uniform(const TPtr<S>& t, Rng& rng, double lo, double hi) {
    for (auto& x : t->v) x = S(rng.uniform(lo, hi));
}

template <class S>
void fill_const(const TPtr<S>& t, double c) {
    for (auto& x : t->v) x = S(c);
}

// Kaiming-style fan-in scaling for weight matrices [*, fan_in-last]
template <class S>
void fill_kaiming(const TPtr<S>& t, Rng& rng, int fan_in) {
    fill_normal(t, rng, std::sqrt(2.0 / fan_in));
}

// ------------------------------------------------------------------ layers

template <class S>
struct Linear {
    TPtr<S> W, b;  // W [in, out]

    Linear() = default;
    Linear(ParamStore<S>& ps, const std::string& name, int in, int out, Rng& rng,
           double w_scale = -1.0) {
        W = ps.add(name + ".W", {in, out});
        b = ps.add(name + ".b", {out});
        fill_normal(W, rng, w_scale > 0 ? w_scale : std::sqrt(1.0 / in));
        fill_const(b, 0.0);
    }

    TPtr<S> forward(const TPtr<S>& x) const { return add_rowvec(matmul(x, W), b); }
};

template <class S>
struct Conv2dLayer {
    TPtr<S> W, b;
    int k = 3, stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<S>& ps, const std::string& name, int cin, int cout, Rng& rng,
                int k_ = 3, int stride_ = 1, int pad_ = 1)
        : k(k_), stride(stride_), pad(pad_) {
        W = ps.add(name + ".W", {cout, cin * k * k});
        b = ps.add(name + ".b", {cout});
        fill_normal(W, rng, std::sqrt(2.0 / (cin * k * k)));
        fill_const(b, 0.0);
    }

    TPtr<S> forward(const TPtr<S>& x) const { return conv2d(x, W, b, k, stride, pad); }
};

template <class S>
struct Conv1dLayer {
    TPtr<S> W, b;
    int k = 3, pad = 1;

    Conv1dLayer() = default;
    Conv1dLayer(ParamStore<S>& ps, const std::string& name, int cin, int cout, Rng& rng, int k_ = 3,
                int pad_ = 1)
        : k(k_), pad(pad_) {
        W = ps.add(name + ".W", {cout, cin * k});
        b = ps.add(name + ".b", {cout});
        fill_normal(W, rng, std::sqrt(2.0 / (cin * k)));
        fill_const(b, 0.0);
    }

    TPtr<S> forward(const TPtr<S>& x) const { return conv1d(x, W, b, k, pad); }
};

template <class S>
struct ConvT1dLayer {
    TPtr<S> W, b;
    int k = 4, pad = 1;  // stride fixed at 2: doubles sequence length

    ConvT1dLayer() = default;
    ConvT1dLayer(ParamStore<S>& ps, const std::string& name, int cin, int cout, Rng& rng)
        : k(4), pad(1) {
        W = ps.add(name + ".W", {cout, cin * k});
        b = ps.add(name + ".b", {cout});
        fill_normal(W, rng, std::sqrt(2.0 / (cin * k)));
        fill_const(b, 0.0);
    }

    TPtr<S> forward(const TPtr<S>& x) const { return conv_transpose1d(x, W, b, k, pad); }
};

template <class S>
struct LayerNormLayer {
    TPtr<S> gamma, beta;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<S>& ps, const std::string& name, int c) {
        gamma = ps.add(name + ".g", {c});
        beta = ps.add(name + ".b", {c});
        fill_const(gamma, 1.0);
        fill_const(beta, 0.0);
    }

    TPtr<S> forward(const TPtr<S>& x) const { return layer_norm(x, gamma, beta); }
};

template <class S>
struct GroupNormLayer {
    TPtr<S> gamma, beta;
    int groups = 8;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore<S>& ps, const std::string& name, int c, int groups_ = 8)
        : groups(groups_) {
        gamma = ps.add(name + ".g", {c});
        beta = ps.add(name + ".b", {c});
        fill_const(gamma, 1.0);
        fill_const(beta, 0.0);
    }

    TPtr<S> forward(const TPtr<S>& x) const { return group_norm(x, groups, gamma, beta); }
};

// Optional per-call taps into an attention layer: record the row-softmaxed
// map, or override it with a previously recorded one.
template <class S>
struct AttnHooks {
    const std::vector<S>* inject_map = nullptr;
    std::vector<S>* record_map = nullptr;
};

// Single-head attention. Queries come from q_in [Nq, Cq]; keys/values from
// kv [Nk, Ckv]; output is [Nq, Cout].
template <class S>
struct Attention {
    TPtr<S> Wq, Wk, Wv, Wo;
    int dim = 0;

    Attention() = default;
    Attention(ParamStore<S>& ps, const std::string& name, int cq, int ckv, int d, int cout,
              Rng& rng)
        : dim(d) {
        Wq = ps.add(name + ".Wq", {cq, d});
        Wk = ps.add(name + ".Wk", {ckv, d});
        Wv = ps.add(name + ".Wv", {ckv, d});
        Wo = ps.add(name + ".Wo", {d, cout});
        fill_normal(Wq, rng, std::sqrt(1.0 / cq));
        fill_normal(Wk, rng, std::sqrt(1.0 / ckv));
        fill_normal(Wv, rng, std::sqrt(1.0 / ckv));
        fill_normal(Wo, rng, std::sqrt(1.0 / d));
    }

    TPtr<S> forward(const TPtr<S>& q_in, const TPtr<S>& kv, const AttnHooks<S>* hooks = nullptr) const {
        auto q = matmul(q_in, Wq);
        auto k = matmul(kv, Wk);
        auto v = matmul(kv, Wv);
        auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt((double)dim));
        TPtr<S> attn_map;
        if (hooks && hooks->inject_map) {
            check_arg((int64_t)hooks->inject_map->size() == (int64_t)q_in->shape[0] * kv->shape[0],
                      "attention: injected map size mismatch");
            attn_map = constant<S>({q_in->shape[0], kv->shape[0]}, *hooks->inject_map);
        } else {
            attn_map = softmax_rows(scores);
        }
        if (hooks && hooks->record_map) *hooks->record_map = attn_map->v;
        return matmul(matmul(attn_map, v), Wo);
    }
};

template <class S>
struct FeedForward {
    Linear<S> in, out;

    FeedForward() = default;
    FeedForward(ParamStore<S>& ps, const std::string& name, int c, int hidden, Rng& rng)
        : in(ps, name + ".in", c, hidden, rng), out(ps, name + ".out", hidden, c, rng) {}

    TPtr<S> forward(const TPtr<S>& x) const { return out.forward(silu(in.forward(x))); }
};

// Pre-norm transformer block: x += attn(LN(x)); x += ff(LN(x))
template <class S>
struct SelfAttentionBlock {
    LayerNormLayer<S> ln1, ln2;
    Attention<S> attn;
    FeedForward<S> ff;

    SelfAttentionBlock() = default;
    SelfAttentionBlock(ParamStore<S>& ps, const std::string& name, int c, int d, int ff_hidden,
                       Rng& rng)
        : ln1(ps, name + ".ln1", c),
          ln2(ps, name + ".ln2", c),
          attn(ps, name + ".attn", c, c, d, c, rng),
          ff(ps, name + ".ff", c, ff_hidden, rng) {}

    TPtr<S> forward(TPtr<S> x) const {
        auto h = ln1.forward(x);
        x = add(x, attn.forward(h, h));
        x = add(x, ff.forward(ln2.forward(x)));
        return x;
    }
};

// ------------------------------------------------------------------- AdamW

// Decoupled weight decay Adam. Moment buffers are keyed by qualified
// parameter name so they can round-trip through checkpoints.
template <class S>
class AdamW {
public:
    struct Group {
        ParamStore<S>* store;
        double lr;
    };

    AdamW(std::vector<Group> groups, double weight_decay = 1e-2, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : groups_(std::move(groups)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    // grads: accumulated gradient map (already averaged over the batch)
    void step(GradMap<S>& grads) {
        ++t_;
        double bc1 = 1.0 - std::pow(b1_, t_);
        double bc2 = 1.0 - std::pow(b2_, t_);
        for (auto& grp : groups_) {
            if (!grp.store->trainable()) continue;
            grp.store->for_each([&](const std::string& name, const TPtr<S>& p) {
                if (!grads.has(p.get())) return;
                auto& g = grads.at(p.get());
                std::string key = grp.store->group() + "/" + name;
                auto& st = state_[key];
                if (st.m.empty()) {
                    st.m.assign(p->v.size(), S(0));
                    st.v.assign(p->v.size(), S(0));
                }
                for (size_t i = 0; i < p->v.size(); ++i) {
                    S gi = g[i];
                    st.m[i] = S(b1_) * st.m[i] + S(1.0 - b1_) * gi;
                    st.v[i] = S(b2_) * st.v[i] + S(1.0 - b2_) * gi * gi;
                    double mhat = st.m[i] / bc1;
                    double vhat = st.v[i] / bc2;
                    p->v[i] -= S(grp.lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p->v[i]));
                }
            });
        }
    }

    int64_t step_count() const { return t_; }
    void set_step_count(int64_t t) { t_ = t; }

    struct MomentState {
        std::vector<S> m, v;
    };
    std::map<std::string, MomentState>& state() { return state_; }

private:
    std::vector<Group> groups_;
    double wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, MomentState> state_;
};

// Rescale all gradients in-place so the global L2 norm is at most max_norm.
template <class S>
double clip_grad_norm(const std::vector<ParamStore<S>*>& stores, GradMap<S>& grads,
                      double max_norm) {
    double total = 0;
    for (auto* ps : stores) {
        ps->for_each([&](const std::string&, const TPtr<S>& p) {
            if (!grads.has(p.get())) return;
            for (S g : grads.at(p.get())) total += double(g) * double(g);
        });
    }
    total = std::sqrt(total);
    if (max_norm > 0 && total > max_norm) {
        S sc = S(max_norm / total);
        for (auto* ps : stores) {
            ps->for_each([&](const std::string&, const TPtr<S>& p) {
                if (!grads.has(p.get())) return;
                for (S& g : grads.at(p.get())) g *= sc;
            });
        }
    }
    return total;
}

}  // namespace a2i
