#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsc/rng.hpp"
#include "hsc/tape.hpp"
#include "hsc/tensor.hpp"

namespace hsc {

// Owns every Parameter of a model. Layers keep stable pointers into the
// registry; the optimizer and the serializer walk `list()` in creation
// order, which is deterministic because model construction order is fixed.
template <typename R>
class ParamRegistryT {
 public:
  ParameterT<R>& create(std::string name, TensorT<R> init) {
    if (by_name_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    storage_.emplace_back(std::move(name), std::move(init));
    ParameterT<R>& p = storage_.back();
    by_name_[p.name] = &p;
    order_.push_back(&p);
    return p;
  }

  const std::vector<ParameterT<R>*>& list() const { return order_; }

  ParameterT<R>* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  std::size_t size() const { return order_.size(); }

  void zero_grads() {
    for (auto* p : order_) p->zero_grad();
  }

 private:
  std::deque<ParameterT<R>> storage_;  // stable addresses
  std::map<std::string, ParameterT<R>*> by_name_;
  std::vector<ParameterT<R>*> order_;
};

template <typename R>
TensorT<R> glorot_uniform(Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return TensorT<R>::uniform(std::move(shape), rng, -limit, limit);
}

}  // namespace hsc
