// Named parameter storage and per-tape binding.
#pragma once

#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "autodiff.hpp"

namespace pointmamba {

// Insertion-ordered name -> Tensor table. Order is the checkpoint order.
class ParamStore {
public:
    void add(const std::string& name, Tensor value)
    {
        if (index_.count(name)) throw Error("ParamStore: duplicate parameter '" + name + "'");
        index_.emplace(name, values_.size());
        names_.push_back(name);
        values_.push_back(std::move(value));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t index(const std::string& name) const
    {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }

    const Tensor& at(const std::string& name) const { return values_[index(name)]; }
    Tensor& at(const std::string& name) { return values_[index(name)]; }

    std::size_t size() const { return values_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<Tensor>& values() const { return values_; }
    std::vector<Tensor>& values() { return values_; }

    std::size_t total_elements() const
    {
        std::size_t n = 0;
        for (const auto& v : values_) n += v.numel();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Places parameters on a tape on first use, so only the parameters a forward
// pass touches become leaves.
class Bound {
public:
    Bound(Tape& tape, const ParamStore& store, bool requires_grad = true)
        : tape_(&tape), store_(&store), requires_grad_(requires_grad), vars_(store.size())
    {
    }

    // Binds to leaves already on the tape, one per parameter in store order.
    Bound(Tape& tape, const ParamStore& store, std::span<const Var> leaves)
        : tape_(&tape), store_(&store), requires_grad_(false), vars_(leaves.begin(), leaves.end())
    {
        if (leaves.size() != store.size()) throw Error("Bound: one leaf per parameter required");
    }

    Var operator()(const std::string& name)
    {
        const std::size_t i = store_->index(name);
        if (!vars_[i]) vars_[i] = tape_->leaf(store_->values()[i], requires_grad_);
        return *vars_[i];
    }

    Tape& tape() { return *tape_; }
    const ParamStore& store() const { return *store_; }

    // Gradient per parameter, zero for parameters the loss did not reach.
    std::vector<Tensor> gradients() const
    {
        std::vector<Tensor> out;
        out.reserve(vars_.size());
        for (std::size_t i = 0; i < vars_.size(); ++i) {
            if (vars_[i] && vars_[i]->requires_grad()) {
                out.push_back(tape_->grad_slot(vars_[i]->id()) ? *tape_->grad_slot(vars_[i]->id())
                                                                : Tensor::zeros(store_->values()[i].shape()));
            } else {
                out.push_back(Tensor::zeros(store_->values()[i].shape()));
            }
        }
        return out;
    }

private:
    Tape* tape_;
    const ParamStore* store_;
    bool requires_grad_;
    std::vector<std::optional<Var>> vars_;
};

inline Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

// Weight for a (fan_in, fan_out) projection, uniform in +-1/sqrt(fan_in).
inline Tensor linear_init(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng)
{
    return uniform_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace pointmamba
