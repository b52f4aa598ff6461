#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualrc/ndarray.hpp"

namespace dualrc {

class Tensor;

// Receives the output gradient and accumulates into the parents' gradient
// buffers. A null buffer means that parent does not need a gradient.
using BackwardFn = std::function<void(const NdArray& grad_out, std::vector<NdArray*>& grad_in)>;

namespace detail {
struct Node {
    NdArray value;
    bool requires_grad = false;
    std::optional<NdArray> grad;  // leaf accumulator
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;
    const char* op = "leaf";
};
} // namespace detail

// Handle onto a value in the recorded computation. Copies share the node, as
// with framework tensors; use value() to get an independent NdArray.
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    explicit Tensor(NdArray value, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    const NdArray& value() const { return node_->value; }
    const Dims& dims() const { return node_->value.dims(); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return !node_->backward; }
    const char* op() const { return node_->op; }
    double item() const { return node_->value.item(); }

    // In-place update of a leaf (optimizer steps, finite-difference probes).
    NdArray& leaf_value() {
        if (!is_leaf()) throw GraphError("Tensor::leaf_value: tensor is not a leaf");
        return node_->value;
    }

    bool has_grad() const { return node_->grad.has_value(); }
    const NdArray& grad() const {
        if (!node_->grad) throw GraphError("Tensor::grad: no gradient accumulated");
        return *node_->grad;
    }
    void zero_grad() {
        if (node_->requires_grad) node_->grad = NdArray(node_->value.dims(), 0.0);
    }

    // Result of an op over `inputs`. The node is only linked into the graph
    // when at least one input requires a gradient.
    static Tensor from_op(NdArray value, const char* op, std::vector<Tensor> inputs,
                          BackwardFn backward) {
        Tensor out(std::move(value));
        bool needs = false;
        for (const auto& in : inputs) needs = needs || in.requires_grad();
        if (!needs) return out;
        out.node_->requires_grad = true;
        out.node_->op = op;
        out.node_->backward = std::move(backward);
        for (auto& in : inputs) out.node_->parents.push_back(in.node_);
        return out;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    friend void backward(const Tensor& loss, class ParamStore& params);
    std::shared_ptr<detail::Node> node_;
};

// Named trainable tensors in insertion order.
class ParamStore {
public:
    Tensor& add(const std::string& name, NdArray value) {
        if (index_.count(name)) throw ParamError("ParamStore::add: duplicate name '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.emplace_back(name, Tensor(std::move(value), true));
        return entries_.back().second;
    }

    // Insert or overwrite the value of `name`.
    void set(const std::string& name, NdArray value) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            add(name, std::move(value));
            return;
        }
        entries_[it->second].second = Tensor(std::move(value), true);
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ParamError("ParamStore: missing parameter '" + name + "'");
        return entries_[it->second].second;
    }
    Tensor& get(const std::string& name) {
        return const_cast<Tensor&>(std::as_const(*this).get(name));
    }

    std::size_t size() const { return entries_.size(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : entries_) t.zero_grad();
    }

    // Deep copy: fresh leaves holding copies of the current values.
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [name, t] : entries_) out.add(name, t.value());
        return out;
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable leaf that requires one (in particular the entries of `params`).
inline void backward(const Tensor& loss, ParamStore& params) {
    using detail::Node;
    if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!loss.requires_grad())
        throw GraphError("backward: loss is not connected to any trainable tensor");

    // Deterministic post-order over the requires-grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node_.get(), 0}};
    seen.insert(loss.node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    bool reaches_param = false;
    for (const auto& [name, t] : params)
        reaches_param = reaches_param || seen.count(t.node_.get()) > 0;
    if (!reaches_param)
        throw GraphError("backward: loss does not depend on any entry of the parameter store");

    std::unordered_map<Node*, NdArray> grads;
    grads.emplace(loss.node_.get(), NdArray(loss.dims(), 1.0));
    std::vector<NdArray*> slots;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        auto g = grads.find(node);
        if (g == grads.end()) continue;
        if (!node->backward) {
            if (!node->grad) node->grad = NdArray(node->value.dims(), 0.0);
            auto& acc = *node->grad;
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g->second[i];
            continue;
        }
        slots.assign(node->parents.size(), nullptr);
        for (std::size_t p = 0; p < node->parents.size(); ++p) {
            Node* parent = node->parents[p].get();
            if (!parent->requires_grad) continue;
            auto [slot, fresh] = grads.try_emplace(parent);
            if (fresh) slot->second = NdArray(parent->value.dims(), 0.0);
            slots[p] = &slot->second;
        }
        NdArray grad_out = std::move(g->second);
        grads.erase(g);
        node->backward(grad_out, slots);
    }
}

} // namespace dualrc
