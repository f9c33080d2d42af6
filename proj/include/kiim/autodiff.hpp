#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "kiim/tensor.hpp"

namespace kiim::nn {

// Reverse-mode autodiff over dynamically built graphs. Nodes own their value;
// gradients are allocated during backward(). Graphs are per-forward-pass and
// freed when the last Var handle goes out of scope.
struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backprop;  // accumulates node.grad into inputs' grads

    const std::vector<int>& shape() const { return val.shape(); }
    void ensure_grad() {
        if (grad.empty()) grad = Tensor::zeros(val.shape());
    }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor v);
Var leaf(Tensor v);  // trainable leaf (requires_grad)

// Seeds d(root)/d(root) = 1 and runs reverse topological accumulation.
// root must be scalar (size 1).
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);

// out = alpha*a + (1-alpha)*b, alpha a scalar node (learnable fusion weight)
Var blend(const Var& a, const Var& b, const Var& alpha);
// out = s * x, s a scalar node
Var scale_by(const Var& x, const Var& s);

// ---- reductions / vectors ----
Var sum(const Var& a);
Var mean(const Var& a);
Var at_index(const Var& v, int i);   // scalar from flat index
Var softmax_vec(const Var& v);       // softmax over a flat vector

// ---- matrix / token ops, layout [N,C] ----
Var matmul(const Var& a, const Var& b);
Var linear(const Var& x, const Var& w, const Var& b);  // x[N,Ci] w[Ci,Co] b[Co]
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var gather_rows(const Var& x, std::vector<int> idx);
Var reshape(const Var& x, std::vector<int> shape);

// Block-diagonal multi-head scaled dot-product attention over rows.
// q,k,v: [N,C]; rows are grouped into consecutive blocks of block_size and
// attention runs independently per block and head. scale multiplies Q·K^T
// (pass 1/sqrt(C) for whole-feature scaling, 1/sqrt(C/heads) for per-head).
Var attention_blocks(const Var& q, const Var& k, const Var& v, int block_size, int heads, double scale);

// Scalar-valued op with an eagerly computed gradient w.r.t. x; lets modules
// plug closed-form losses into the graph.
Var custom_scalar(const Var& x, double value, Tensor grad_x);

// ---- spatial ops, layout [C,H,W] ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);  // w[Co,Ci,kh,kw]
Var upsample_nearest2(const Var& x);
Var concat_channels(const Var& a, const Var& b);
Var mul_channel_broadcast(const Var& x, const Var& a);  // a: [1,H,W]
Var chw_to_rows(const Var& x);                          // [C,H,W] -> [H*W,C]
Var rows_to_chw(const Var& x, int c, int h, int w);     // [H*W,C] -> [C,H,W]

}  // namespace kiim::nn
