#pragma once

#include <string>
#include <vector>

#include "gcd/autograd.hpp"
#include "gcd/rng.hpp"

namespace gcd::nn {

struct NamedParam {
  std::string name;
  ad::Var var;
};
using ParamList = std::vector<NamedParam>;

// Leaf Var with requires_grad set.
ad::Var parameter(ad::Mat value);
ad::Mat gaussian(ad::Index rows, ad::Index cols, double stddev, Rng& rng);
ad::Mat xavier(ad::Index fan_in, ad::Index fan_out, Rng& rng);

struct Linear {
  ad::Var weight;  // [in, out]
  ad::Var bias;    // [1, out]

  Linear() = default;
  Linear(ad::Index in, ad::Index out, Rng& rng);

  ad::Var operator()(const ad::Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  ad::Var gamma;
  ad::Var beta;

  LayerNorm() = default;
  explicit LayerNorm(ad::Index dim);

  ad::Var operator()(const ad::Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Linear -> GELU -> Linear -> GELU -> Linear
struct Mlp3 {
  Linear fc1, fc2, fc3;

  Mlp3() = default;
  Mlp3(ad::Index in, ad::Index hidden, ad::Index out, Rng& rng);

  ad::Var operator()(const ad::Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace gcd::nn
