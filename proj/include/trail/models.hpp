#pragma once

#include <span>
#include <vector>

#include "trail/datasets.hpp"
#include "trail/rng.hpp"

namespace trail::fedsim {

enum class ModelKind { Logistic, Mlp };

// Flat parameter vector with shape metadata. Logistic layout: W (C x d) then
// bias (C). MLP layout: W1 (h x d), b1 (h), W2 (C x h), b2 (C), ReLU hidden.
struct ModelVector {
  ModelKind kind = ModelKind::Logistic;
  int input_dim = 0;
  int num_classes = 0;
  int hidden = 0;  // ignored for logistic
  std::vector<double> w;

  std::size_t expected_size() const;
  void validate() const;
};

ModelVector zero_model(ModelKind kind, int input_dim, int num_classes, int hidden);

// Small-normal init (MLP needs symmetry breaking; logistic stays at zero).
ModelVector init_model(ModelKind kind, int input_dim, int num_classes, int hidden, Rng& rng);

// Mean cross-entropy over the given sample indices (true labels).
double mean_loss(const ModelVector& m, const data::Dataset& ds, std::span<const int> idx);

double accuracy(const ModelVector& m, const data::Dataset& ds, std::span<const int> idx);

// Gradient of the mean cross-entropy over the batch; labels[k] overrides the
// dataset label of idx[k] (used for label-noise injection). grad is resized
// and overwritten.
void gradient(const ModelVector& m, const data::Dataset& ds, std::span<const int> idx,
              std::span<const int> labels, std::vector<double>& grad);

}  // namespace trail::fedsim
