#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fectek/autograd.hpp"

namespace fectek {

struct NamedParameter {
  std::string name;
  ag::Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

// Prefix of a parameter name up to the first '.', e.g. "encoder".
std::string parameter_group(const std::string& name);

// Affine map x * weight + bias with weight stored (in x out).
struct Linear {
  ag::Tensor weight;
  ag::Tensor bias;

  ag::Tensor operator()(const ag::Tensor& x) const;
};

// Normal(0, std) weights, zero bias.
Linear make_linear(std::size_t in, std::size_t out, double std, std::mt19937_64& rng);
ag::Tensor normal_tensor(ag::Shape shape, double std, std::mt19937_64& rng);

}  // namespace fectek
