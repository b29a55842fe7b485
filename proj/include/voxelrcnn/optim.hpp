#pragma once

#include <limits>
#include <map>
#include <string>
#include <vector>

#include "voxelrcnn/tensor.hpp"

namespace voxelrcnn {

struct Parameter {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<Parameter>;

void zero_grad(ParameterList& params);

// Halves the learning rate once the monitored metric has failed to improve
// by more than min_delta for `patience` consecutive epochs.
struct PlateauMonitor {
  int patience = 5;
  double min_delta = 1e-4;
  double factor = 0.5;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
};

struct SgdState {
  double lr = 0.01;
  double momentum = 0.9;
  std::map<std::string, std::vector<double>> velocity;
  PlateauMonitor plateau;

  SgdState() = default;
  SgdState(double lr, double momentum);
};

// v <- momentum * v - lr * g;  p <- p + v
void sgd_step(SgdState& state, ParameterList& params);

// Call once per epoch with the validation metric (lower is better).
// Returns the learning rate to use from now on.
double plateau_update(SgdState& state, double metric);

}  // namespace voxelrcnn
