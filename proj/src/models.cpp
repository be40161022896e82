#include "trail/models.hpp"

#include <algorithm>
#include <cmath>

#include "trail/errors.hpp"

namespace trail::fedsim {

std::size_t ModelVector::expected_size() const {
  if (kind == ModelKind::Logistic) {
    return static_cast<std::size_t>(num_classes) * input_dim + num_classes;
  }
  return static_cast<std::size_t>(hidden) * input_dim + hidden +
         static_cast<std::size_t>(num_classes) * hidden + num_classes;
}

void ModelVector::validate() const {
  if (input_dim < 1 || num_classes < 2) throw InvalidInputError("model vector: bad shape metadata");
  if (kind == ModelKind::Mlp && hidden < 1) throw InvalidInputError("model vector: MLP needs hidden >= 1");
  if (w.size() != expected_size()) throw InvalidInputError("model vector: parameter count mismatch");
  for (double v : w) {
    if (!std::isfinite(v)) throw InvalidInputError("model vector: non-finite parameter");
  }
}

ModelVector zero_model(ModelKind kind, int input_dim, int num_classes, int hidden) {
  ModelVector m;
  m.kind = kind;
  m.input_dim = input_dim;
  m.num_classes = num_classes;
  m.hidden = kind == ModelKind::Mlp ? hidden : 0;
  m.w.assign(m.expected_size(), 0.0);
  m.validate();
  return m;
}

ModelVector init_model(ModelKind kind, int input_dim, int num_classes, int hidden, Rng& rng) {
  ModelVector m = zero_model(kind, input_dim, num_classes, hidden);
  if (kind == ModelKind::Mlp) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (std::size_t k = 0; k < static_cast<std::size_t>(hidden) * input_dim; ++k) {
      m.w[k] = scale * rng.normal();
    }
    const std::size_t w2 = static_cast<std::size_t>(hidden) * input_dim + hidden;
    const double scale2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (std::size_t k = 0; k < static_cast<std::size_t>(num_classes) * hidden; ++k) {
      m.w[w2 + k] = scale2 * rng.normal();
    }
  }
  return m;
}

namespace {

// Logits for one sample; scratch holds the hidden activations for the MLP.
void forward_logits(const ModelVector& m, const double* x, std::vector<double>& hidden_act,
                    std::vector<double>& logits) {
  const int d = m.input_dim;
  const int C = m.num_classes;
  logits.assign(C, 0.0);
  if (m.kind == ModelKind::Logistic) {
    const double* W = m.w.data();
    const double* b = m.w.data() + static_cast<std::size_t>(C) * d;
    for (int c = 0; c < C; ++c) {
      double z = b[c];
      const double* row = W + static_cast<std::size_t>(c) * d;
      for (int k = 0; k < d; ++k) z += row[k] * x[k];
      logits[c] = z;
    }
    return;
  }
  const int h = m.hidden;
  const double* W1 = m.w.data();
  const double* b1 = m.w.data() + static_cast<std::size_t>(h) * d;
  const double* W2 = b1 + h;
  const double* b2 = W2 + static_cast<std::size_t>(C) * h;
  hidden_act.assign(h, 0.0);
  for (int u = 0; u < h; ++u) {
    double z = b1[u];
    const double* row = W1 + static_cast<std::size_t>(u) * d;
    for (int k = 0; k < d; ++k) z += row[k] * x[k];
    hidden_act[u] = z > 0 ? z : 0.0;
  }
  for (int c = 0; c < C; ++c) {
    double z = b2[c];
    const double* row = W2 + static_cast<std::size_t>(c) * h;
    for (int u = 0; u < h; ++u) z += row[u] * hidden_act[u];
    logits[c] = z;
  }
}

double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double z : v) s += std::exp(z - mx);
  return mx + std::log(s);
}

}  // namespace

double mean_loss(const ModelVector& m, const data::Dataset& ds, std::span<const int> idx) {
  m.validate();
  if (ds.dim != m.input_dim || ds.num_classes > m.num_classes) {
    throw InvalidInputError("mean_loss: dataset/model shape mismatch");
  }
  if (idx.empty()) throw InvalidInputError("mean_loss: empty sample set");
  std::vector<double> hidden_act, logits;
  double total = 0.0;
  for (int i : idx) {
    forward_logits(m, ds.row(i), hidden_act, logits);
    total += log_sum_exp(logits) - logits[ds.labels[i]];
  }
  return total / static_cast<double>(idx.size());
}

double accuracy(const ModelVector& m, const data::Dataset& ds, std::span<const int> idx) {
  m.validate();
  if (idx.empty()) throw InvalidInputError("accuracy: empty sample set");
  std::vector<double> hidden_act, logits;
  int hits = 0;
  for (int i : idx) {
    forward_logits(m, ds.row(i), hidden_act, logits);
    int arg = 0;
    for (int c = 1; c < m.num_classes; ++c) {
      if (logits[c] > logits[arg]) arg = c;
    }
    if (arg == ds.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

void gradient(const ModelVector& m, const data::Dataset& ds, std::span<const int> idx,
              std::span<const int> labels, std::vector<double>& grad) {
  if (idx.size() != labels.size() || idx.empty()) {
    throw InvalidInputError("gradient: idx/labels length mismatch or empty batch");
  }
  const int d = m.input_dim;
  const int C = m.num_classes;
  grad.assign(m.w.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(idx.size());
  std::vector<double> hidden_act, logits, p(C);

  if (m.kind == ModelKind::Logistic) {
    double* gW = grad.data();
    double* gb = grad.data() + static_cast<std::size_t>(C) * d;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double* x = ds.row(idx[k]);
      forward_logits(m, x, hidden_act, logits);
      const double lse = log_sum_exp(logits);
      for (int c = 0; c < C; ++c) {
        p[c] = std::exp(logits[c] - lse);
        const double delta = (p[c] - (c == labels[k] ? 1.0 : 0.0)) * inv;
        gb[c] += delta;
        double* row = gW + static_cast<std::size_t>(c) * d;
        for (int q = 0; q < d; ++q) row[q] += delta * x[q];
      }
    }
    return;
  }

  const int h = m.hidden;
  const double* W2 = m.w.data() + static_cast<std::size_t>(h) * d + h;
  double* gW1 = grad.data();
  double* gb1 = grad.data() + static_cast<std::size_t>(h) * d;
  double* gW2 = gb1 + h;
  double* gb2 = gW2 + static_cast<std::size_t>(C) * h;
  std::vector<double> dhidden(h);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double* x = ds.row(idx[k]);
    forward_logits(m, x, hidden_act, logits);
    const double lse = log_sum_exp(logits);
    std::fill(dhidden.begin(), dhidden.end(), 0.0);
    for (int c = 0; c < C; ++c) {
      p[c] = std::exp(logits[c] - lse);
      const double delta = (p[c] - (c == labels[k] ? 1.0 : 0.0)) * inv;
      gb2[c] += delta;
      double* row = gW2 + static_cast<std::size_t>(c) * h;
      const double* wrow = W2 + static_cast<std::size_t>(c) * h;
      for (int u = 0; u < h; ++u) {
        row[u] += delta * hidden_act[u];
        dhidden[u] += delta * wrow[u];
      }
    }
    for (int u = 0; u < h; ++u) {
      if (hidden_act[u] <= 0.0) continue;  // ReLU gate
      gb1[u] += dhidden[u];
      double* row = gW1 + static_cast<std::size_t>(u) * d;
      for (int q = 0; q < d; ++q) row[q] += dhidden[u] * x[q];
    }
  }
}

}  // namespace trail::fedsim
