#include "voxelrcnn/optim.hpp"

#include "voxelrcnn/errors.hpp"

namespace voxelrcnn {

void zero_grad(ParameterList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

SgdState::SgdState(double lr_, double momentum_) : lr(lr_), momentum(momentum_) {
  if (!(lr > 0.0)) throw ArgumentError("sgd: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ArgumentError("sgd: momentum must be in [0, 1)");
}

void sgd_step(SgdState& state, ParameterList& params) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) {
      throw ContractError("sgd_step: parameter '" + p.name + "' has no gradient");
    }
  }
  for (auto& p : params) {
    auto& v = state.velocity[p.name];
    auto data = p.tensor.mutable_data();
    auto grad = p.tensor.grad();
    if (v.size() != data.size()) v.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      v[i] = state.momentum * v[i] - state.lr * grad[i];
      data[i] += v[i];
    }
  }
}

double plateau_update(SgdState& state, double metric) {
  auto& m = state.plateau;
  if (metric < m.best - m.min_delta) {
    m.best = metric;
    m.bad_epochs = 0;
  } else if (++m.bad_epochs >= m.patience) {
    state.lr *= m.factor;
    m.bad_epochs = 0;
  }
  return state.lr;
}

}  // namespace voxelrcnn
