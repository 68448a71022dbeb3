#include "fectek/parameters.hpp"

namespace fectek {

std::string parameter_group(const std::string& name) {
  return name.substr(0, name.find('.'));
}

ag::Tensor Linear::operator()(const ag::Tensor& x) const {
  return ag::add(ag::matmul(x, weight), bias);
}

ag::Tensor normal_tensor(ag::Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<double> values(ag::numel(shape));
  for (double& v : values) v = dist(rng);
  return ag::Tensor::from(std::move(shape), std::move(values), true);
}

Linear make_linear(std::size_t in, std::size_t out, double std, std::mt19937_64& rng) {
  return Linear{normal_tensor({in, out}, std, rng), ag::Tensor::zeros({out}, true)};
}

}  // namespace fectek
