// Reverse-mode tape over whole-tensor operations, trainable parameters, and
// the adaptive-moment optimizer step.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdmj/tensor.hpp"

namespace cdmj {

template <class S>
struct Parameter {
    std::string name;
    Tensor<S> value;
    std::vector<S> grad;  // empty when absent
    std::vector<S> moment1;
    std::vector<S> moment2;
    std::int64_t step_count = 0;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<S> v)
        : name(std::move(n)),
          value(std::move(v)),
          moment1(value.size(), S(0)),
          moment2(value.size(), S(0)) {}
};

// Records one forward pass; node i's pull closure scatters the node's
// incoming gradient onto its parents. Nodes are created in topological
// order, so a single reverse sweep is a valid backward pass.
template <class S>
class Tape {
  public:
    using Pull = std::function<void(Tape&, const std::vector<S>&)>;

    int emit(std::size_t value_size, Pull pull) {
        nodes_.push_back(NodeRec{value_size, std::move(pull)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int leaf(std::size_t value_size) { return emit(value_size, Pull{}); }

    // Marks a parameter as a graph input; repeated calls return the same node.
    Tensor<S> watch(Parameter<S>& p) {
        auto it = watched_.find(&p);
        int node;
        if (it != watched_.end()) {
            node = it->second;
        } else {
            node = leaf(p.value.size());
            watched_.emplace(&p, node);
        }
        Tensor<S> t = p.value;
        t.node = node;
        return t;
    }

    std::vector<S>& grad_buf(int node) {
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].size, S(0));
        touched_[static_cast<std::size_t>(node)] = 1;
        return g;
    }

    // Reverse sweep from a recorded scalar; fills `grad` on every watched
    // parameter (zeros when the parameter does not reach the root).
    void backward(const Tensor<S>& root) {
        if (root.size() != 1) throw std::invalid_argument("backward: loss root must be scalar, got " + shape_str(root.shape));
        if (root.node < 0) throw std::invalid_argument("backward: loss root was not recorded on a tape");
        grads_.assign(nodes_.size(), {});
        touched_.assign(nodes_.size(), 0);
        grad_buf(root.node)[0] = S(1);
        for (int i = root.node; i >= 0; --i) {
            auto idx = static_cast<std::size_t>(i);
            if (!touched_[idx] || !nodes_[idx].pull) continue;
            nodes_[idx].pull(*this, grads_[idx]);
        }
        for (auto& [param, node] : watched_) {
            auto idx = static_cast<std::size_t>(node);
            if (touched_[idx])
                param->grad = grads_[idx];
            else
                param->grad.assign(param->value.size(), S(0));
        }
        grads_.clear();
        touched_.clear();
    }

    std::size_t node_count() const { return nodes_.size(); }

  private:
    struct NodeRec {
        std::size_t size;
        Pull pull;
    };
    std::vector<NodeRec> nodes_;
    std::vector<std::vector<S>> grads_;
    std::vector<char> touched_;
    std::unordered_map<Parameter<S>*, int> watched_;
};

// Standard bias-corrected adaptive-moment update; clears gradients afterward.
template <class S>
void adam_step(std::vector<Parameter<S>*>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw std::invalid_argument("adam_step: betas must lie in [0, 1)");
    for (Parameter<S>* p : params) {
        if (p->grad.size() != p->value.size())
            throw std::invalid_argument("adam_step: missing gradient for parameter " + p->name);
        for (S g : p->grad)
            if (!std::isfinite(static_cast<double>(g)))
                throw std::invalid_argument("adam_step: non-finite gradient in parameter " + p->name);
    }
    for (Parameter<S>* p : params) {
        p->step_count += 1;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(p->step_count));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(p->step_count));
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double g = static_cast<double>(p->grad[i]);
            const double m = beta1 * static_cast<double>(p->moment1[i]) + (1.0 - beta1) * g;
            const double v = beta2 * static_cast<double>(p->moment2[i]) + (1.0 - beta2) * g * g;
            p->moment1[i] = static_cast<S>(m);
            p->moment2[i] = static_cast<S>(v);
            const double mhat = m / c1;
            const double vhat = v / c2;
            p->value.data[i] = static_cast<S>(static_cast<double>(p->value.data[i]) - lr * mhat / (std::sqrt(vhat) + eps));
        }
        p->grad.clear();
    }
}

// Owns parameters with stable addresses; lookup by unique name path.
template <class S>
class ParamStore {
  public:
    Parameter<S>& create(const std::string& name, Tensor<S> init) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
        params_.push_back(std::make_unique<Parameter<S>>(name, std::move(init)));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    Parameter<S>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    std::vector<Parameter<S>*> all() {
        std::vector<Parameter<S>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::vector<Parameter<S>*> trainable() {
        std::vector<Parameter<S>*> out;
        for (auto& p : params_)
            if (p->trainable) out.push_back(p.get());
        return out;
    }

    void set_trainable_prefix(const std::string& prefix, bool flag) {
        for (auto& p : params_)
            if (p->name.rfind(prefix, 0) == 0) p->trainable = flag;
    }

    void set_all_trainable(bool flag) {
        for (auto& p : params_) p->trainable = flag;
    }

    std::size_t size() const { return params_.size(); }

  private:
    std::vector<std::unique_ptr<Parameter<S>>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace cdmj
