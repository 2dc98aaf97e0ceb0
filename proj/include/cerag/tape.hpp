#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "cerag/errors.hpp"

namespace cerag {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

// Reverse-mode autodiff tape over dense matrices. Nodes are append-only, so
// every node's parents have smaller ids and backward() is a single reverse
// sweep. One tape builds one computation graph; clear() recycles the storage.
template <typename S>
class Tape {
  public:
    struct Node {
        Mat<S> value;
        Mat<S> grad;  // empty until touched by backward
        std::function<void(Tape&, int)> backward;
        bool needs_grad = false;
    };

    int add(Mat<S> value, bool needs_grad, std::function<void(Tape&, int)> backward = {}) {
        if (!needs_grad) backward = nullptr;
        nodes_.push_back({std::move(value), {}, std::move(backward), needs_grad});
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Mat<S>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // Gradient accumulator for a node, zero-initialized to the value's shape.
    Mat<S>& grad_ref(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    const Mat<S>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    // Seeds d(root)/d(root) = 1 and sweeps the graph in reverse creation
    // order. The root must be scalar (1x1).
    void backward(int root) {
        if (value(root).size() != 1) {
            throw std::logic_error("backward root must be a scalar node");
        }
        for (Node& n : nodes_) n.grad.resize(0, 0);
        grad_ref(root)(0, 0) = S(1);
        for (int id = root; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.size() == 0 || !n.backward) continue;
            n.backward(*this, id);
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
};

// Handle to a tape node.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    const Mat<S>& value() const { return tape->value(id); }
    bool needs_grad() const { return tape->needs_grad(id); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

template <typename S>
Var<S> constant(Tape<S>& tape, Mat<S> value) {
    return {&tape, tape.add(std::move(value), false)};
}

// Leaf whose gradient is flushed into *grad_sink (accumulated across calls).
// A null sink marks the leaf frozen: nothing downstream accumulates into it.
template <typename S>
Var<S> param(Tape<S>& tape, const Mat<S>& value, Mat<S>* grad_sink) {
    if (grad_sink == nullptr) return {&tape, tape.add(value, false)};
    auto backward = [grad_sink](Tape<S>& t, int self) {
        if (grad_sink->size() == 0) {
            *grad_sink = t.grad(self);
        } else {
            *grad_sink += t.grad(self);
        }
    };
    return {&tape, tape.add(value, true, backward)};
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    Tape<S>& tape = *a.tape;
    if (a.cols() != b.rows()) throw std::logic_error("matmul shape mismatch");
    Mat<S> value = a.value() * b.value();
    const bool needs = a.needs_grad() || b.needs_grad();
    auto backward = [a = a.id, b = b.id](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        if (t.needs_grad(a)) t.grad_ref(a).noalias() += g * t.value(b).transpose();
        if (t.needs_grad(b)) t.grad_ref(b).noalias() += t.value(a).transpose() * g;
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    Tape<S>& tape = *a.tape;
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::logic_error("add shape mismatch");
    Mat<S> value = a.value() + b.value();
    const bool needs = a.needs_grad() || b.needs_grad();
    auto backward = [a = a.id, b = b.id](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        if (t.needs_grad(a)) t.grad_ref(a) += g;
        if (t.needs_grad(b)) t.grad_ref(b) += g;
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

// Adds a 1xm bias row to every row of a.
template <typename S>
Var<S> add_bias(Var<S> a, Var<S> bias) {
    Tape<S>& tape = *a.tape;
    if (bias.rows() != 1 || bias.cols() != a.cols()) throw std::logic_error("bias shape mismatch");
    Mat<S> value = a.value().rowwise() + RowVec<S>(bias.value());
    const bool needs = a.needs_grad() || bias.needs_grad();
    auto backward = [a = a.id, bias = bias.id](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        if (t.needs_grad(a)) t.grad_ref(a) += g;
        if (t.needs_grad(bias)) t.grad_ref(bias) += g.colwise().sum();
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
    Tape<S>& tape = *a.tape;
    Mat<S> value = a.value() * factor;
    const bool needs = a.needs_grad();
    auto backward = [a = a.id, factor](Tape<S>& t, int self) {
        t.grad_ref(a) += t.grad(self) * factor;
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

// Row lookup: out.row(i) = table.row(ids[i]). Duplicate ids accumulate.
template <typename S>
Var<S> gather_rows(Var<S> table, std::vector<int> ids) {
    Tape<S>& tape = *table.tape;
    Mat<S> value(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows()) throw std::logic_error("gather id out of range");
        value.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
    }
    const bool needs = table.needs_grad();
    auto backward = [table = table.id, ids = std::move(ids)](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        Mat<S>& gt = t.grad_ref(table);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
        }
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

// Stacks parts vertically; all parts share a column count.
template <typename S>
Var<S> vconcat(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw std::logic_error("vconcat of zero parts");
    Tape<S>& tape = *parts.front().tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const Var<S>& p : parts) {
        if (p.cols() != cols) throw std::logic_error("vconcat column mismatch");
        rows += p.rows();
    }
    Mat<S> value(rows, cols);
    bool needs = false;
    std::vector<int> ids;
    ids.reserve(parts.size());
    Eigen::Index at = 0;
    for (const Var<S>& p : parts) {
        value.middleRows(at, p.rows()) = p.value();
        at += p.rows();
        needs = needs || p.needs_grad();
        ids.push_back(p.id);
    }
    auto backward = [ids](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        Eigen::Index at = 0;
        for (int pid : ids) {
            const Eigen::Index n = t.value(pid).rows();
            if (t.needs_grad(pid)) t.grad_ref(pid) += g.middleRows(at, n);
            at += n;
        }
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

template <typename S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
    Tape<S>& tape = *a.tape;
    if (start < 0 || count < 0 || start + count > a.rows()) {
        throw std::logic_error("slice_rows out of range");
    }
    Mat<S> value = a.value().middleRows(start, count);
    const bool needs = a.needs_grad();
    auto backward = [a = a.id, start, count](Tape<S>& t, int self) {
        t.grad_ref(a).middleRows(start, count) += t.grad(self);
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

// Row-wise layer normalization with learned gain/bias (each 1xd).
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
    Tape<S>& tape = *x.tape;
    const Eigen::Index n = x.rows(), d = x.cols();
    if (gain.cols() != d || bias.cols() != d) throw std::logic_error("layer_norm shape mismatch");
    auto saved = std::make_shared<std::pair<Mat<S>, Mat<S>>>();  // (xhat, rstd column)
    Mat<S>& xhat = saved->first;
    Mat<S>& rstd = saved->second;
    xhat.resize(n, d);
    rstd.resize(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const S mean = x.value().row(i).mean();
        const S var = (x.value().row(i).array() - mean).square().mean();
        rstd(i, 0) = S(1) / std::sqrt(var + eps);
        xhat.row(i) = (x.value().row(i).array() - mean) * rstd(i, 0);
    }
    Mat<S> value(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        value.row(i) = xhat.row(i).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
    }
    const bool needs = x.needs_grad() || gain.needs_grad() || bias.needs_grad();
    auto backward = [x = x.id, gain = gain.id, bias = bias.id, saved](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        const Mat<S>& xhat = saved->first;
        const Mat<S>& rstd = saved->second;
        if (t.needs_grad(bias)) t.grad_ref(bias) += g.colwise().sum();
        if (t.needs_grad(gain)) t.grad_ref(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
        if (t.needs_grad(x)) {
            Mat<S> dxhat = g.cwiseProduct(t.value(gain).row(0).replicate(g.rows(), 1));
            Mat<S>& gx = t.grad_ref(x);
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                const S m1 = dxhat.row(i).mean();
                const S m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
                gx.row(i) +=
                    (rstd(i, 0) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2)).matrix();
            }
        }
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

// Exact (erf-based) GELU, applied elementwise.
template <typename S>
Var<S> gelu(Var<S> x) {
    Tape<S>& tape = *x.tape;
    const S inv_sqrt2 = S(1) / std::sqrt(S(2));
    Mat<S> value =
        x.value().unaryExpr([inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
    const bool needs = x.needs_grad();
    auto backward = [x = x.id, inv_sqrt2](Tape<S>& t, int self) {
        const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
        const Mat<S>& xv = t.value(x);
        Mat<S> dydx = xv.unaryExpr([inv_sqrt2, inv_sqrt_2pi](S v) {
            const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
            const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
            return cdf + v * pdf;
        });
        t.grad_ref(x).array() += t.grad(self).array() * dydx.array();
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

// Multi-head scaled dot-product attention over already-projected q, k, v
// (each n x d, d divisible by n_heads). With causal=true position i attends
// to positions <= i only.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, int n_heads, bool causal) {
    Tape<S>& tape = *q.tape;
    const Eigen::Index n = q.rows(), d = q.cols();
    if (k.rows() != n || v.rows() != n || k.cols() != d || v.cols() != d) {
        throw std::logic_error("attention shape mismatch");
    }
    if (n_heads < 1 || d % n_heads != 0) throw std::logic_error("attention head count invalid");
    const Eigen::Index dh = d / n_heads;
    const S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));
    const bool needs = q.needs_grad() || k.needs_grad() || v.needs_grad();

    auto weights = std::make_shared<std::vector<Mat<S>>>();  // softmax rows per head
    Mat<S> value(n, d);
    for (int h = 0; h < n_heads; ++h) {
        auto qh = q.value().middleCols(h * dh, dh);
        auto kh = k.value().middleCols(h * dh, dh);
        auto vh = v.value().middleCols(h * dh, dh);
        Mat<S> scores = qh * kh.transpose() * inv_scale;
        if (causal) {
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index j = i + 1; j < n; ++j) {
                    scores(i, j) = -std::numeric_limits<S>::infinity();
                }
            }
        }
        Mat<S> attn(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const S mx = scores.row(i).maxCoeff();
            attn.row(i) = (scores.row(i).array() - mx).exp();
            attn.row(i) /= attn.row(i).sum();
        }
        value.middleCols(h * dh, dh).noalias() = attn * vh;
        if (needs) weights->push_back(std::move(attn));
    }

    auto backward = [q = q.id, k = k.id, v = v.id, n_heads, dh, inv_scale, weights](Tape<S>& t,
                                                                                    int self) {
        const Mat<S>& g = t.grad(self);
        for (int h = 0; h < n_heads; ++h) {
            const Mat<S>& attn = (*weights)[static_cast<std::size_t>(h)];
            auto gh = g.middleCols(h * dh, dh);
            auto qh = t.value(q).middleCols(h * dh, dh);
            auto kh = t.value(k).middleCols(h * dh, dh);
            auto vh = t.value(v).middleCols(h * dh, dh);
            if (t.needs_grad(v)) {
                t.grad_ref(v).middleCols(h * dh, dh).noalias() += attn.transpose() * gh;
            }
            if (t.needs_grad(q) || t.needs_grad(k)) {
                Mat<S> dattn = gh * vh.transpose();
                Mat<S> dscores =
                    attn.array() * (dattn.array().colwise() -
                                    (dattn.array() * attn.array()).rowwise().sum());
                if (t.needs_grad(q)) {
                    t.grad_ref(q).middleCols(h * dh, dh).noalias() += dscores * kh * inv_scale;
                }
                if (t.needs_grad(k)) {
                    t.grad_ref(k).middleCols(h * dh, dh).noalias() +=
                        dscores.transpose() * qh * inv_scale;
                }
            }
        }
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

// Regroups an n x b matrix into out_blocks rows of block_rows*b columns:
// output row j is the concatenation of input rows [j*block_rows, (j+1)*block_rows),
// zero-filled where those rows run past n.
template <typename S>
Var<S> block_flatten(Var<S> h, Eigen::Index block_rows, Eigen::Index out_blocks) {
    Tape<S>& tape = *h.tape;
    const Eigen::Index n = h.rows(), b = h.cols();
    if (block_rows < 1 || out_blocks < 1) throw std::logic_error("block_flatten bad shape");
    Mat<S> value = Mat<S>::Zero(out_blocks, block_rows * b);
    for (Eigen::Index j = 0; j < out_blocks; ++j) {
        for (Eigen::Index r = 0; r < block_rows; ++r) {
            const Eigen::Index src = j * block_rows + r;
            if (src < n) value.block(j, r * b, 1, b) = h.value().row(src);
        }
    }
    const bool needs = h.needs_grad();
    auto backward = [h = h.id, block_rows, out_blocks, n, b](Tape<S>& t, int self) {
        const Mat<S>& g = t.grad(self);
        Mat<S>& gh = t.grad_ref(h);
        for (Eigen::Index j = 0; j < out_blocks; ++j) {
            for (Eigen::Index r = 0; r < block_rows; ++r) {
                const Eigen::Index src = j * block_rows + r;
                if (src < n) gh.row(src) += g.block(j, r * b, 1, b);
            }
        }
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

// Mean negative log-likelihood over the positions where mask is nonzero;
// logits row i scores the prediction of targets[i]. Returns a 1x1 node.
template <typename S>
Var<S> masked_cross_entropy(Var<S> logits, std::vector<int> targets, std::vector<std::uint8_t> mask) {
    Tape<S>& tape = *logits.tape;
    const Eigen::Index n = logits.rows(), vocab = logits.cols();
    if (static_cast<Eigen::Index>(targets.size()) != n ||
        static_cast<Eigen::Index>(mask.size()) != n) {
        throw std::logic_error("cross entropy target/mask length mismatch");
    }
    std::vector<int> rows;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (mask[static_cast<std::size_t>(i)]) rows.push_back(static_cast<int>(i));
    }
    if (rows.empty()) throw ConfigError("loss has zero supervised positions");
    auto probs = std::make_shared<Mat<S>>(static_cast<Eigen::Index>(rows.size()), vocab);
    S total = S(0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const int i = rows[r];
        const int target = targets[static_cast<std::size_t>(i)];
        if (target < 0 || target >= vocab) throw std::logic_error("cross entropy target out of range");
        const auto row = logits.value().row(i);
        const S mx = row.maxCoeff();
        RowVec<S> ex = (row.array() - mx).exp();
        const S denom = ex.sum();
        probs->row(static_cast<Eigen::Index>(r)) = ex / denom;
        total += mx + std::log(denom) - row(target);
    }
    Mat<S> value(1, 1);
    value(0, 0) = total / static_cast<S>(rows.size());
    const bool needs = logits.needs_grad();
    auto backward = [logits = logits.id, targets = std::move(targets), rows, probs](Tape<S>& t,
                                                                                    int self) {
        const S g = t.grad(self)(0, 0) / static_cast<S>(rows.size());
        Mat<S>& gl = t.grad_ref(logits);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const int i = rows[r];
            gl.row(i) += probs->row(static_cast<Eigen::Index>(r)) * g;
            gl(i, targets[static_cast<std::size_t>(i)]) -= g;
        }
    };
    return {&tape, tape.add(std::move(value), needs, backward)};
}

}  // namespace cerag
