#pragma once

#include <array>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qsci/tensor.hpp"

namespace qsci {

/// A trainable tensor owned by a model. `grad` accumulates across backward
/// passes until the caller zeroes it.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad() { grad = Tensor::zeros(value.shape()); }
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const { return *tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

/// Reverse-mode tape. Nodes are appended in forward order, which is a valid
/// topological order; backward() walks them once in reverse and then the tape
/// is consumed.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var leaf(Tensor value);
    /// Binds a model parameter; repeated calls return the same node.
    Var param(Parameter& p);

    /// Records an op result. Throws NumericError on non-finite values.
    Var record(Tensor value, std::vector<int> parents, BackwardFn backward);

    void backward(Var loss);
    bool consumed() const noexcept { return consumed_; }
    bool grad_enabled() const noexcept { return grad_enabled_; }

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    /// Gradient accumulated on a node during backward (empty if none reached it).
    const Tensor& grad(Var v) const { return nodes_[static_cast<size_t>(v.id())].grad; }

    /// Used by backward rules: adds `g` into the gradient of node `id`.
    void accumulate(int id, const Tensor& g);
    void accumulate(int id, Tensor&& g);

    size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool has_grad = false;
        Parameter* param = nullptr;
    };

    std::deque<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_ids_;
    bool grad_enabled_;
    bool consumed_ = false;
};

struct ConvGeom {
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> padding{0, 0, 0};
};

// Elementwise and structural ops. Binary elementwise ops require equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, float s);
Var leaky_relu(Var a, float slope = 0.01f);
Var gelu(Var a);
/// Clamp to [lo, hi]; gradient passes only where lo < x < hi.
Var clamp(Var a, float lo, float hi);
Var reshape(Var a, Shape shape);
/// General axis permutation: output axis i is input axis perm[i].
Var transpose(Var a, const std::vector<int>& perm);
Var concat(const std::vector<Var>& parts, int axis);
Var mean(Var a);
Var sum(Var a);
Var softmax(Var a, int axis);
/// Batched matmul over leading dims; b may also be a plain 2-D matrix.
Var matmul(Var a, Var b);
/// Adds a per-channel vector [C] to a tensor [N, C, ...].
Var add_channel(Var x, Var bias);

/// Cross-correlation of x[N,C,T,H,W] with w[O,C,kt,kh,kw].
Var conv3d(Var x, Var w, const Var* bias, const ConvGeom& geom);

/// [N, C*r*r, T, H, W] -> [N, C, T, H*r, W*r]
Var pixel_shuffle_spatial(Var x, int r);
/// Inverse of pixel_shuffle_spatial.
Var pixel_unshuffle_spatial(Var x, int r);

/// Temporal self-attention pieces. q, k, v are [N, C, T, H, W] with C split
/// into `heads` groups; scores are [N, heads, T, T, H, W] (query, key).
Var temporal_scores(Var q, Var k, int heads, float scale);
Var temporal_mix(Var probs, Var v, int heads);

// Raw (tape-free) helpers shared with the integer path.
Tensor pixel_shuffle_raw(const Tensor& x, int r);
Tensor pixel_unshuffle_raw(const Tensor& x, int r);
Tensor softmax_raw(const Tensor& x, int axis);
Tensor temporal_scores_raw(const Tensor& q, const Tensor& k, int heads, float scale);
Tensor temporal_mix_raw(const Tensor& p, const Tensor& v, int heads);
float gelu_value(float x);

}  // namespace qsci
