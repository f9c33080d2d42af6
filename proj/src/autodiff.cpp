#include "kiim/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace kiim::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;

Var make_node(Tensor val, std::vector<Var> inputs, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->shape()) + " vs " +
                                    shape_str(b->shape()));
}

void accum(const Var& in, const Tensor& g) {
    in->ensure_grad();
    const int64_t n = g.size();
    for (int64_t i = 0; i < n; ++i) in->grad[i] += g[i];
}

}  // namespace

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    return n;
}

Var leaf(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = true;
    return n;
}

void backward(const Var& root) {
    if (root->val.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    // iterative post-order DFS; reversed it yields consumers before producers
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* in = node->inputs[next++].get();
            if (visited.insert(in).second) stack.emplace_back(in, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->requires_grad && n->backprop && !n->grad.empty()) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += b->val[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.inputs[0]->requires_grad) accum(n.inputs[0], n.grad);
        if (n.inputs[1]->requires_grad) accum(n.inputs[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= b->val[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.inputs[0]->requires_grad) accum(n.inputs[0], n.grad);
        if (n.inputs[1]->requires_grad) {
            n.inputs[1]->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.inputs[1]->grad[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b->val[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        const Tensor& av = n.inputs[0]->val;
        const Tensor& bv = n.inputs[1]->val;
        if (n.inputs[0]->requires_grad) {
            n.inputs[0]->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += n.grad[i] * bv[i];
        }
        if (n.inputs[1]->requires_grad) {
            n.inputs[1]->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.inputs[1]->grad[i] += n.grad[i] * av[i];
        }
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += c;
    return make_node(std::move(out), {a}, [](Node& n) { accum(n.inputs[0], n.grad); });
}

Var mul_scalar(const Var& a, double c) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= c;
    return make_node(std::move(out), {a}, [c](Node& n) {
        n.inputs[0]->ensure_grad();
        for (int64_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += c * n.grad[i];
    });
}

Var relu(const Var& a) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i)
        if (out[i] < 0.0) out[i] = 0.0;
    return make_node(std::move(out), {a}, [](Node& n) {
        n.inputs[0]->ensure_grad();
        const Tensor& x = n.inputs[0]->val;
        for (int64_t i = 0; i < n.grad.size(); ++i)
            if (x[i] > 0.0) n.inputs[0]->grad[i] += n.grad[i];
    });
}

Var gelu(const Var& a) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) {
        double x = out[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    return make_node(std::move(out), {a}, [](Node& n) {
        n.inputs[0]->ensure_grad();
        const Tensor& x = n.inputs[0]->val;
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            double xi = x[i];
            double cdf = 0.5 * (1.0 + std::erf(xi * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * xi * xi);
            n.inputs[0]->grad[i] += n.grad[i] * (cdf + xi * pdf);
        }
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    return make_node(std::move(out), {a}, [](Node& n) {
        n.inputs[0]->ensure_grad();
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            double s = n.val[i];
            n.inputs[0]->grad[i] += n.grad[i] * s * (1.0 - s);
        }
    });
}

Var blend(const Var& a, const Var& b, const Var& alpha) {
    check_same_shape(a, b, "blend");
    if (alpha->val.size() != 1) throw std::invalid_argument("blend: alpha must be scalar");
    const double al = alpha->val[0];
    Tensor out = a->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = al * out[i] + (1.0 - al) * b->val[i];
    return make_node(std::move(out), {a, b, alpha}, [al](Node& n) {
        const Tensor& av = n.inputs[0]->val;
        const Tensor& bv = n.inputs[1]->val;
        if (n.inputs[0]->requires_grad) {
            n.inputs[0]->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += al * n.grad[i];
        }
        if (n.inputs[1]->requires_grad) {
            n.inputs[1]->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.inputs[1]->grad[i] += (1.0 - al) * n.grad[i];
        }
        if (n.inputs[2]->requires_grad) {
            n.inputs[2]->ensure_grad();
            double s = 0.0;
            for (int64_t i = 0; i < n.grad.size(); ++i) s += n.grad[i] * (av[i] - bv[i]);
            n.inputs[2]->grad[0] += s;
        }
    });
}

Var scale_by(const Var& x, const Var& s) {
    if (s->val.size() != 1) throw std::invalid_argument("scale_by: s must be scalar");
    const double sv = s->val[0];
    Tensor out = x->val;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= sv;
    return make_node(std::move(out), {x, s}, [sv](Node& n) {
        const Tensor& xv = n.inputs[0]->val;
        if (n.inputs[0]->requires_grad) {
            n.inputs[0]->ensure_grad();
            for (int64_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += sv * n.grad[i];
        }
        if (n.inputs[1]->requires_grad) {
            n.inputs[1]->ensure_grad();
            double acc = 0.0;
            for (int64_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * xv[i];
            n.inputs[1]->grad[0] += acc;
        }
    });
}

// ---------------------------------------------------------------------------
// reductions / vectors
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a->val.size(); ++i) s += a->val[i];
    return make_node(Tensor::scalar(s), {a}, [](Node& n) {
        n.inputs[0]->ensure_grad();
        double g = n.grad[0];
        for (int64_t i = 0; i < n.inputs[0]->grad.size(); ++i) n.inputs[0]->grad[i] += g;
    });
}

Var mean(const Var& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a->val.size())); }

Var at_index(const Var& v, int i) {
    if (i < 0 || i >= v->val.size()) throw std::out_of_range("at_index");
    return make_node(Tensor::scalar(v->val[i]), {v}, [i](Node& n) {
        n.inputs[0]->ensure_grad();
        n.inputs[0]->grad[i] += n.grad[0];
    });
}

Var softmax_vec(const Var& v) {
    Tensor out = v->val;
    double mx = out[0];
    for (int64_t i = 1; i < out.size(); ++i) mx = std::max(mx, out[i]);
    double z = 0.0;
    for (int64_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(out[i] - mx);
        z += out[i];
    }
    for (int64_t i = 0; i < out.size(); ++i) out[i] /= z;
    return make_node(std::move(out), {v}, [](Node& n) {
        n.inputs[0]->ensure_grad();
        double dot = 0.0;
        for (int64_t i = 0; i < n.grad.size(); ++i) dot += n.grad[i] * n.val[i];
        for (int64_t i = 0; i < n.grad.size(); ++i) n.inputs[0]->grad[i] += n.val[i] * (n.grad[i] - dot);
    });
}

// ---------------------------------------------------------------------------
// matrix / token ops
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.dim(1) != b->val.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes");
    const int m = a->val.dim(0), k = a->val.dim(1), n2 = b->val.dim(1);
    Tensor out({m, n2});
    MatMap(out.data(), m, n2) = CMatMap(a->val.data(), m, k) * CMatMap(b->val.data(), k, n2);
    return make_node(std::move(out), {a, b}, [m, k, n2](Node& n) {
        CMatMap g(n.grad.data(), m, n2);
        if (n.inputs[0]->requires_grad) {
            n.inputs[0]->ensure_grad();
            MatMap(n.inputs[0]->grad.data(), m, k) += g * CMatMap(n.inputs[1]->val.data(), k, n2).transpose();
        }
        if (n.inputs[1]->requires_grad) {
            n.inputs[1]->ensure_grad();
            MatMap(n.inputs[1]->grad.data(), k, n2) += CMatMap(n.inputs[0]->val.data(), m, k).transpose() * g;
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const int n = x->val.dim(0), ci = x->val.dim(1);
    if (w->val.ndim() != 2 || w->val.dim(0) != ci) throw std::invalid_argument("linear: weight shape");
    const int co = w->val.dim(1);
    if (b->val.size() != co) throw std::invalid_argument("linear: bias shape");
    Tensor out({n, co});
    MatMap om(out.data(), n, co);
    om = CMatMap(x->val.data(), n, ci) * CMatMap(w->val.data(), ci, co);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < co; ++c) out.at2(r, c) += b->val[c];
    return make_node(std::move(out), {x, w, b}, [n, ci, co](Node& nd) {
        CMatMap g(nd.grad.data(), n, co);
        if (nd.inputs[0]->requires_grad) {
            nd.inputs[0]->ensure_grad();
            MatMap(nd.inputs[0]->grad.data(), n, ci) += g * CMatMap(nd.inputs[1]->val.data(), ci, co).transpose();
        }
        if (nd.inputs[1]->requires_grad) {
            nd.inputs[1]->ensure_grad();
            MatMap(nd.inputs[1]->grad.data(), ci, co) += CMatMap(nd.inputs[0]->val.data(), n, ci).transpose() * g;
        }
        if (nd.inputs[2]->requires_grad) {
            nd.inputs[2]->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < co; ++c) nd.inputs[2]->grad[c] += nd.grad[static_cast<int64_t>(r) * co + c];
        }
    });
}

namespace {
void softmax_row_inplace(double* row, int m) {
    double mx = row[0];
    for (int i = 1; i < m; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < m; ++i) {
        row[i] = std::exp(row[i] - mx);
        z += row[i];
    }
    for (int i = 0; i < m; ++i) row[i] /= z;
}
}  // namespace

Var softmax_rows(const Var& x) {
    const int n = x->val.dim(0), m = x->val.dim(1);
    Tensor out = x->val;
    for (int r = 0; r < n; ++r) softmax_row_inplace(out.data() + static_cast<int64_t>(r) * m, m);
    return make_node(std::move(out), {x}, [n, m](Node& nd) {
        nd.inputs[0]->ensure_grad();
        for (int r = 0; r < n; ++r) {
            const double* y = nd.val.data() + static_cast<int64_t>(r) * m;
            const double* g = nd.grad.data() + static_cast<int64_t>(r) * m;
            double* dx = nd.inputs[0]->grad.data() + static_cast<int64_t>(r) * m;
            double dot = 0.0;
            for (int i = 0; i < m; ++i) dot += g[i] * y[i];
            for (int i = 0; i < m; ++i) dx[i] += y[i] * (g[i] - dot);
        }
    });
}

Var log_softmax_rows(const Var& x) {
    const int n = x->val.dim(0), m = x->val.dim(1);
    Tensor out = x->val;
    for (int r = 0; r < n; ++r) {
        double* row = out.data() + static_cast<int64_t>(r) * m;
        double mx = row[0];
        for (int i = 1; i < m; ++i) mx = std::max(mx, row[i]);
        double z = 0.0;
        for (int i = 0; i < m; ++i) z += std::exp(row[i] - mx);
        double lse = mx + std::log(z);
        for (int i = 0; i < m; ++i) row[i] -= lse;
    }
    return make_node(std::move(out), {x}, [n, m](Node& nd) {
        nd.inputs[0]->ensure_grad();
        for (int r = 0; r < n; ++r) {
            const double* y = nd.val.data() + static_cast<int64_t>(r) * m;
            const double* g = nd.grad.data() + static_cast<int64_t>(r) * m;
            double* dx = nd.inputs[0]->grad.data() + static_cast<int64_t>(r) * m;
            double gs = 0.0;
            for (int i = 0; i < m; ++i) gs += g[i];
            for (int i = 0; i < m; ++i) dx[i] += g[i] - std::exp(y[i]) * gs;
        }
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    const int n = x->val.dim(0), m = x->val.dim(1);
    if (gain->val.size() != m || bias->val.size() != m) throw std::invalid_argument("layer_norm: param shape");
    Tensor out({n, m});
    Tensor xhat({n, m});
    std::vector<double> inv_sigma(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        const double* row = x->val.data() + static_cast<int64_t>(r) * m;
        double mu = 0.0;
        for (int i = 0; i < m; ++i) mu += row[i];
        mu /= m;
        double var = 0.0;
        for (int i = 0; i < m; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= m;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(r)] = is;
        for (int i = 0; i < m; ++i) {
            double xh = (row[i] - mu) * is;
            xhat.at2(r, i) = xh;
            out.at2(r, i) = gain->val[i] * xh + bias->val[i];
        }
    }
    return make_node(std::move(out), {x, gain, bias},
                     [n, m, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node& nd) {
                         const Tensor& gv = nd.inputs[1]->val;
                         if (nd.inputs[0]->requires_grad) {
                             nd.inputs[0]->ensure_grad();
                             for (int r = 0; r < n; ++r) {
                                 const double* g = nd.grad.data() + static_cast<int64_t>(r) * m;
                                 const double* xh = xhat.data() + static_cast<int64_t>(r) * m;
                                 double* dx = nd.inputs[0]->grad.data() + static_cast<int64_t>(r) * m;
                                 double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                                 for (int i = 0; i < m; ++i) {
                                     double dxh = g[i] * gv[i];
                                     mean_dxh += dxh;
                                     mean_dxh_xh += dxh * xh[i];
                                 }
                                 mean_dxh /= m;
                                 mean_dxh_xh /= m;
                                 double is = inv_sigma[static_cast<size_t>(r)];
                                 for (int i = 0; i < m; ++i) {
                                     double dxh = g[i] * gv[i];
                                     dx[i] += is * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                                 }
                             }
                         }
                         if (nd.inputs[1]->requires_grad) {
                             nd.inputs[1]->ensure_grad();
                             for (int r = 0; r < n; ++r)
                                 for (int i = 0; i < m; ++i)
                                     nd.inputs[1]->grad[i] +=
                                         nd.grad[static_cast<int64_t>(r) * m + i] * xhat.at2(r, i);
                         }
                         if (nd.inputs[2]->requires_grad) {
                             nd.inputs[2]->ensure_grad();
                             for (int r = 0; r < n; ++r)
                                 for (int i = 0; i < m; ++i)
                                     nd.inputs[2]->grad[i] += nd.grad[static_cast<int64_t>(r) * m + i];
                         }
                     });
}

Var gather_rows(const Var& x, std::vector<int> idx) {
    const int m = x->val.dim(1);
    Tensor out({static_cast<int>(idx.size()), m});
    for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < m; ++c) out.at2(static_cast<int>(r), c) = x->val.at2(idx[r], c);
    return make_node(std::move(out), {x}, [idx = std::move(idx), m](Node& nd) {
        nd.inputs[0]->ensure_grad();
        for (size_t r = 0; r < idx.size(); ++r)
            for (int c = 0; c < m; ++c)
                nd.inputs[0]->grad.at2(idx[r], c) += nd.grad[static_cast<int64_t>(r) * m + c];
    });
}

Var reshape(const Var& x, std::vector<int> shape) {
    if (shape_size(shape) != x->val.size()) throw std::invalid_argument("reshape: size mismatch");
    Tensor out(shape, x->val.raw());
    return make_node(std::move(out), {x}, [](Node& nd) {
        nd.inputs[0]->ensure_grad();
        for (int64_t i = 0; i < nd.grad.size(); ++i) nd.inputs[0]->grad[i] += nd.grad[i];
    });
}

Var attention_blocks(const Var& q, const Var& k, const Var& v, int block_size, int heads, double scale) {
    check_same_shape(q, k, "attention_blocks");
    check_same_shape(q, v, "attention_blocks");
    const int n = q->val.dim(0), c = q->val.dim(1);
    if (n % block_size != 0) throw std::invalid_argument("attention_blocks: rows not divisible by block");
    if (c % heads != 0) throw std::invalid_argument("attention_blocks: channels not divisible by heads");
    const int nb = n / block_size, dh = c / heads, bs = block_size;

    Tensor out({n, c});
    // keep softmax probabilities for the backward pass
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(nb) * heads * bs * bs);

    auto seg = [c, bs, dh](const Tensor& t, int b, int h) {
        return Eigen::Map<const RowMat, 0, StrideT>(t.data() + static_cast<int64_t>(b) * bs * c + h * dh, bs, dh,
                                                    StrideT(c, 1));
    };
    auto seg_mut = [c, bs, dh](Tensor& t, int b, int h) {
        return Eigen::Map<RowMat, 0, StrideT>(t.data() + static_cast<int64_t>(b) * bs * c + h * dh, bs, dh,
                                              StrideT(c, 1));
    };

    for (int b = 0; b < nb; ++b) {
        for (int h = 0; h < heads; ++h) {
            RowMat s = scale * (seg(q->val, b, h) * seg(k->val, b, h).transpose());
            for (int r = 0; r < bs; ++r) softmax_row_inplace(s.data() + static_cast<int64_t>(r) * bs, bs);
            std::copy(s.data(), s.data() + static_cast<int64_t>(bs) * bs,
                      probs->data() + (static_cast<int64_t>(b) * heads + h) * bs * bs);
            seg_mut(out, b, h) = s * seg(v->val, b, h);
        }
    }

    return make_node(std::move(out), {q, k, v}, [nb, heads, bs, dh, c, scale, probs, seg, seg_mut](Node& nd) {
        for (auto& in : nd.inputs)
            if (in->requires_grad) in->ensure_grad();
        for (int b = 0; b < nb; ++b) {
            for (int h = 0; h < heads; ++h) {
                CMatMap p(probs->data() + (static_cast<int64_t>(b) * heads + h) * bs * bs, bs, bs);
                auto go = seg(nd.grad, b, h);
                auto vv = seg(nd.inputs[2]->val, b, h);
                if (nd.inputs[2]->requires_grad) seg_mut(nd.inputs[2]->grad, b, h) += p.transpose() * go;
                RowMat dp = go * vv.transpose();
                RowMat ds(bs, bs);
                for (int r = 0; r < bs; ++r) {
                    double dot = 0.0;
                    for (int i = 0; i < bs; ++i) dot += dp(r, i) * p(r, i);
                    for (int i = 0; i < bs; ++i) ds(r, i) = p(r, i) * (dp(r, i) - dot);
                }
                if (nd.inputs[0]->requires_grad)
                    seg_mut(nd.inputs[0]->grad, b, h) += scale * (ds * seg(nd.inputs[1]->val, b, h));
                if (nd.inputs[1]->requires_grad)
                    seg_mut(nd.inputs[1]->grad, b, h) += scale * (ds.transpose() * seg(nd.inputs[0]->val, b, h));
            }
        }
    });
}

Var custom_scalar(const Var& x, double value, Tensor grad_x) {
    if (!grad_x.same_shape(x->val)) throw std::invalid_argument("custom_scalar: gradient shape mismatch");
    return make_node(Tensor::scalar(value), {x}, [gx = std::move(grad_x)](Node& n) {
        n.inputs[0]->ensure_grad();
        const double g = n.grad[0];
        for (int64_t i = 0; i < gx.size(); ++i) n.inputs[0]->grad[i] += g * gx[i];
    });
}

// ---------------------------------------------------------------------------
// spatial ops
// ---------------------------------------------------------------------------

namespace {
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int ho, int wo, double* cols) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int64_t span = static_cast<int64_t>(ho) * wo;
    for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                double* row = cols + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) * span;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        row[static_cast<int64_t>(oy) * wo + ox] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at3(c, iy, ix) : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accum(const double* cols, int ci, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo,
                  Tensor& dx) {
    const int64_t span = static_cast<int64_t>(ho) * wo;
    for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const double* row = cols + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) * span;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        dx.at3(c, iy, ix) += row[static_cast<int64_t>(oy) * wo + ox];
                    }
                }
            }
        }
    }
}
}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    if (x->val.ndim() != 3 || w->val.ndim() != 4) throw std::invalid_argument("conv2d: rank");
    const int ci = x->val.dim(0), h = x->val.dim(1), wd = x->val.dim(2);
    const int co = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
    if (w->val.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
    if (b->val.size() != co) throw std::invalid_argument("conv2d: bias size");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");

    const int ck = ci * kh * kw;
    const int64_t span = static_cast<int64_t>(ho) * wo;
    std::vector<double> cols(static_cast<size_t>(ck) * span);
    im2col(x->val, kh, kw, stride, pad, ho, wo, cols.data());

    Tensor out({co, ho, wo});
    MatMap(out.data(), co, static_cast<int>(span)) =
        CMatMap(w->val.data(), co, ck) * CMatMap(cols.data(), ck, static_cast<int>(span));
    for (int c = 0; c < co; ++c) {
        double bias = b->val[c];
        double* p = out.data() + c * span;
        for (int64_t i = 0; i < span; ++i) p[i] += bias;
    }

    // cols is recomputed in the backward pass; cheaper than holding it alive
    return make_node(std::move(out), {x, w, b}, [ci, h, wd, co, kh, kw, stride, pad, ho, wo, ck, span](Node& nd) {
        CMatMap g(nd.grad.data(), co, static_cast<int>(span));
        if (nd.inputs[2]->requires_grad) {
            nd.inputs[2]->ensure_grad();
            for (int c = 0; c < co; ++c) {
                const double* p = nd.grad.data() + c * span;
                double s = 0.0;
                for (int64_t i = 0; i < span; ++i) s += p[i];
                nd.inputs[2]->grad[c] += s;
            }
        }
        const bool need_dw = nd.inputs[1]->requires_grad;
        const bool need_dx = nd.inputs[0]->requires_grad;
        if (need_dw) {
            std::vector<double> cols(static_cast<size_t>(ck) * span);
            im2col(nd.inputs[0]->val, kh, kw, stride, pad, ho, wo, cols.data());
            nd.inputs[1]->ensure_grad();
            MatMap(nd.inputs[1]->grad.data(), co, ck) +=
                g * CMatMap(cols.data(), ck, static_cast<int>(span)).transpose();
        }
        if (need_dx) {
            nd.inputs[0]->ensure_grad();
            std::vector<double> dcols(static_cast<size_t>(ck) * span);
            MatMap(dcols.data(), ck, static_cast<int>(span)) =
                CMatMap(nd.inputs[1]->val.data(), co, ck).transpose() * g;
            col2im_accum(dcols.data(), ci, h, wd, kh, kw, stride, pad, ho, wo, nd.inputs[0]->grad);
        }
    });
}

Var upsample_nearest2(const Var& x) {
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                double v = x->val.at3(ch, y, xx);
                out.at3(ch, 2 * y, 2 * xx) = v;
                out.at3(ch, 2 * y, 2 * xx + 1) = v;
                out.at3(ch, 2 * y + 1, 2 * xx) = v;
                out.at3(ch, 2 * y + 1, 2 * xx + 1) = v;
            }
    return make_node(std::move(out), {x}, [c, h, w](Node& nd) {
        nd.inputs[0]->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    nd.inputs[0]->grad.at3(ch, y, xx) += nd.grad.at3(ch, 2 * y, 2 * xx) +
                                                         nd.grad.at3(ch, 2 * y, 2 * xx + 1) +
                                                         nd.grad.at3(ch, 2 * y + 1, 2 * xx) +
                                                         nd.grad.at3(ch, 2 * y + 1, 2 * xx + 1);
    });
}

Var concat_channels(const Var& a, const Var& b) {
    if (a->val.dim(1) != b->val.dim(1) || a->val.dim(2) != b->val.dim(2))
        throw std::invalid_argument("concat_channels: spatial mismatch");
    const int ca = a->val.dim(0), cb = b->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
    Tensor out({ca + cb, h, w});
    std::copy(a->val.data(), a->val.data() + a->val.size(), out.data());
    std::copy(b->val.data(), b->val.data() + b->val.size(), out.data() + a->val.size());
    return make_node(std::move(out), {a, b}, [](Node& nd) {
        const int64_t na = nd.inputs[0]->val.size();
        if (nd.inputs[0]->requires_grad) {
            nd.inputs[0]->ensure_grad();
            for (int64_t i = 0; i < na; ++i) nd.inputs[0]->grad[i] += nd.grad[i];
        }
        if (nd.inputs[1]->requires_grad) {
            nd.inputs[1]->ensure_grad();
            for (int64_t i = 0; i < nd.inputs[1]->val.size(); ++i) nd.inputs[1]->grad[i] += nd.grad[na + i];
        }
    });
}

Var mul_channel_broadcast(const Var& x, const Var& a) {
    if (a->val.dim(0) != 1 || a->val.dim(1) != x->val.dim(1) || a->val.dim(2) != x->val.dim(2))
        throw std::invalid_argument("mul_channel_broadcast: map shape");
    const int c = x->val.dim(0);
    const int64_t hw = static_cast<int64_t>(x->val.dim(1)) * x->val.dim(2);
    Tensor out = x->val;
    for (int ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hw; ++i) out[ch * hw + i] *= a->val[i];
    return make_node(std::move(out), {x, a}, [c, hw](Node& nd) {
        const Tensor& xv = nd.inputs[0]->val;
        const Tensor& av = nd.inputs[1]->val;
        if (nd.inputs[0]->requires_grad) {
            nd.inputs[0]->ensure_grad();
            for (int ch = 0; ch < c; ++ch)
                for (int64_t i = 0; i < hw; ++i) nd.inputs[0]->grad[ch * hw + i] += nd.grad[ch * hw + i] * av[i];
        }
        if (nd.inputs[1]->requires_grad) {
            nd.inputs[1]->ensure_grad();
            for (int ch = 0; ch < c; ++ch)
                for (int64_t i = 0; i < hw; ++i) nd.inputs[1]->grad[i] += nd.grad[ch * hw + i] * xv[ch * hw + i];
        }
    });
}

Var chw_to_rows(const Var& x) {
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor out({static_cast<int>(hw), c});
    for (int ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < hw; ++p) out[p * c + ch] = x->val[ch * hw + p];
    return make_node(std::move(out), {x}, [c, hw](Node& nd) {
        nd.inputs[0]->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int64_t p = 0; p < hw; ++p) nd.inputs[0]->grad[ch * hw + p] += nd.grad[p * c + ch];
    });
}

Var rows_to_chw(const Var& x, int c, int h, int w) {
    const int64_t hw = static_cast<int64_t>(h) * w;
    if (x->val.dim(0) != hw || x->val.dim(1) != c) throw std::invalid_argument("rows_to_chw: shape");
    Tensor out({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < hw; ++p) out[ch * hw + p] = x->val[p * c + ch];
    return make_node(std::move(out), {x}, [c, hw](Node& nd) {
        nd.inputs[0]->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int64_t p = 0; p < hw; ++p) nd.inputs[0]->grad[p * c + ch] += nd.grad[ch * hw + p];
    });
}

}  // namespace kiim::nn
