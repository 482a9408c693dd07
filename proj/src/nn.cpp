#include "gcd/nn.hpp"

#include <cmath>

namespace gcd::nn {

ad::Var parameter(ad::Mat value) { return ad::Var(std::move(value), true); }

ad::Mat gaussian(ad::Index rows, ad::Index cols, double stddev, Rng& rng) {
  ad::Mat m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
  return m;
}

ad::Mat xavier(ad::Index fan_in, ad::Index fan_out, Rng& rng) {
  return gaussian(fan_in, fan_out, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)), rng);
}

Linear::Linear(ad::Index in, ad::Index out, Rng& rng)
    : weight(parameter(xavier(in, out, rng))), bias(parameter(ad::Mat::Zero(1, out))) {}

ad::Var Linear::operator()(const ad::Var& x) const { return ad::add_row(ad::matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(ad::Index dim)
    : gamma(parameter(ad::Mat::Ones(1, dim))), beta(parameter(ad::Mat::Zero(1, dim))) {}

ad::Var LayerNorm::operator()(const ad::Var& x) const {
  return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), gamma), beta);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

Mlp3::Mlp3(ad::Index in, ad::Index hidden, ad::Index out, Rng& rng)
    : fc1(in, hidden, rng), fc2(hidden, hidden, rng), fc3(hidden, out, rng) {}

ad::Var Mlp3::operator()(const ad::Var& x) const { return fc3(ad::gelu(fc2(ad::gelu(fc1(x))))); }

void Mlp3::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
  fc3.collect(prefix + ".fc3", out);
}

}  // namespace gcd::nn
