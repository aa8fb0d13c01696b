#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "mcnet/tensor.hpp"

namespace mcnet {

template <class S>
class Tape;

// Handle into a tape. Only meaningful together with the tape that issued it.
template <class S>
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Each recorded node owns its forward value and a pull
// closure that routes the node's output gradient to its inputs. The closure
// receives its own Var so it can read the node's value and gradient off the
// tape without capturing copies. Gradients accumulate additively, so fan-out
// needs no special casing. A fresh backward() pass clears every gradient
// buffer before seeding, which makes repeated replays of the same tape
// bit-identical.
template <class S>
class Tape {
public:
    using Pull = std::function<void(Tape&, Var<S>)>;

    Var<S> leaf(Tensor<S> value) {
        bool rg = value.grad_flag();
        return leaf(std::move(value), rg);
    }

    Var<S> leaf(Tensor<S> value, bool requires_grad) {
        if (!value.all_finite()) throw NumericError("leaf: non-finite value");
        nodes_.push_back(Node{std::move(value), Tensor<S>{}, requires_grad, nullptr, "leaf"});
        return Var<S>{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    Var<S> constant(Tensor<S> value) { return leaf(std::move(value), false); }

    Var<S> emplace(const char* op, Tensor<S> value, std::initializer_list<Var<S>> inputs,
                   Pull pull) {
        bool rg = false;
        for (Var<S> in : inputs) rg = rg || node(in).requires_grad;
        return emplace_rg(op, std::move(value), rg, std::move(pull));
    }

    Var<S> emplace(const char* op, Tensor<S> value, const std::vector<Var<S>>& inputs, Pull pull) {
        bool rg = false;
        for (Var<S> in : inputs) rg = rg || node(in).requires_grad;
        return emplace_rg(op, std::move(value), rg, std::move(pull));
    }

    const Tensor<S>& val(Var<S> v) const { return node(v).value; }

    bool requires_grad(Var<S> v) const { return node(v).requires_grad; }

    // Gradient of v after backward(). Zero tensor if nothing flowed into it.
    const Tensor<S>& grad(Var<S> v) {
        Node& n = node(v);
        if (n.grad.empty()) n.grad = Tensor<S>{n.value.shape()};
        return n.grad;
    }

    // Writable gradient buffer for v, or nullptr when v does not need one.
    // Pull closures scatter-add into this directly.
    Tensor<S>* grad_buf(Var<S> v) {
        Node& n = node(v);
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad = Tensor<S>{n.value.shape()};
        return &n.grad;
    }

    void accumulate(Var<S> v, const Tensor<S>& g) {
        Tensor<S>* buf = grad_buf(v);
        if (!buf) return;
        if (!buf->same_shape(g))
            throw DataError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                            shape_str(buf->shape()));
        buf->vec() += g.vec();
    }

    void backward(Var<S> loss) {
        Node& ln = node(loss);
        if (ln.value.numel() != 1) throw DataError("backward: loss must be a scalar");
        for (Node& n : nodes_) n.grad = Tensor<S>{};
        ln.grad = Tensor<S>::scalar(S(1));
        for (std::int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.pull && !n.grad.empty()) n.pull(*this, Var<S>{i});
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        bool requires_grad = false;
        Pull pull;
        const char* op = "";
    };

    Var<S> emplace_rg(const char* op, Tensor<S> value, bool rg, Pull pull) {
        if (!value.all_finite())
            throw NumericError(std::string(op) + ": produced a non-finite value");
        nodes_.push_back(
            Node{std::move(value), Tensor<S>{}, rg, rg ? std::move(pull) : Pull{}, op});
        return Var<S>{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    Node& node(Var<S> v) { return nodes_[static_cast<std::size_t>(v.id)]; }
    const Node& node(Var<S> v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

    // Deque keeps references from val()/grad() stable while new nodes are
    // recorded mid-expression.
    std::deque<Node> nodes_;
};

}  // namespace mcnet
