#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace trail::data {

// Immutable labeled dataset. Features are stored row-major (count x dim).
struct Dataset {
  int dim = 0;
  int num_classes = 0;
  std::vector<double> features;
  std::vector<int> labels;
  std::string provenance;  // "synthetic" | "idx-file"

  int count() const { return static_cast<int>(labels.size()); }
  const double* row(int i) const { return features.data() + static_cast<std::size_t>(i) * dim; }
  void validate() const;
};

enum class PartitionPolicy { Iid, LabelSkew };

struct PartitionPlan {
  PartitionPolicy policy = PartitionPolicy::Iid;
  std::vector<int> sizes;      // n_i per client
  double concentration = 1.0;  // label-skew Dirichlet parameter
  std::uint64_t seed = 0;
};

// Gaussian class clusters with seeded means; classes balanced within +/-1.
Dataset gen_synthetic(int classes, int dim, int count, double cluster_spread, std::uint64_t seed);

// IDX loader (the MNIST/EMNIST distribution format): big-endian, magic
// 0x00000803 for images and 0x00000801 for labels. Pixels scaled to [0,1].
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// Versioned binary container: magic "TRLD", u32 version/count/dim/classes,
// then row-major little-endian float32 features and int32 labels.
void save_trld(const Dataset& ds, const std::filesystem::path& path);
Dataset load_trld(const std::filesystem::path& path);

// Disjoint client shards (index lists into ds). IID samples uniformly without
// replacement; label-skew draws per-client class proportions from a symmetric
// Dirichlet with the plan's concentration parameter.
std::vector<std::vector<int>> partition(const Dataset& ds, const PartitionPlan& plan, int num_clients);

}  // namespace trail::data
