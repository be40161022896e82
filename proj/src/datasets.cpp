#include "trail/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "trail/errors.hpp"
#include "trail/rng.hpp"

namespace trail::data {

void Dataset::validate() const {
  if (count() < 1) throw InvalidInputError("dataset: count must be >= 1");
  if (dim < 1) throw InvalidInputError("dataset: dim must be >= 1");
  if (num_classes < 2) throw InvalidInputError("dataset: need at least 2 classes");
  if (features.size() != static_cast<std::size_t>(count()) * dim) {
    throw InvalidInputError("dataset: feature matrix shape mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw InvalidInputError("dataset: label out of [0, C)");
  }
  for (double f : features) {
    if (!std::isfinite(f)) throw InvalidInputError("dataset: non-finite feature");
  }
}

Dataset gen_synthetic(int classes, int dim, int count, double cluster_spread, std::uint64_t seed) {
  if (classes < 2) throw InvalidInputError("gen_synthetic: classes must be >= 2");
  if (dim < 1) throw InvalidInputError("gen_synthetic: dim must be >= 1");
  if (count < classes) throw InvalidInputError("gen_synthetic: count must be >= classes");
  if (cluster_spread < 0) throw InvalidInputError("gen_synthetic: cluster_spread must be >= 0");

  Rng rng(Rng::derive(seed, {kStreamDataset}));
  std::vector<double> means(static_cast<std::size_t>(classes) * dim);
  for (double& m : means) m = 2.0 * rng.normal();

  Dataset ds;
  ds.dim = dim;
  ds.num_classes = classes;
  ds.provenance = "synthetic";
  ds.features.resize(static_cast<std::size_t>(count) * dim);
  ds.labels.resize(count);

  // Balanced labels (sizes differ by at most one), then a seeded shuffle so
  // sequential shard slicing still looks like an IID draw.
  for (int i = 0; i < count; ++i) ds.labels[i] = i % classes;
  for (int i = count - 1; i > 0; --i) {
    int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(ds.labels[i], ds.labels[j]);
  }
  for (int i = 0; i < count; ++i) {
    const double* mu = means.data() + static_cast<std::size_t>(ds.labels[i]) * dim;
    double* x = ds.features.data() + static_cast<std::size_t>(i) * dim;
    for (int k = 0; k < dim; ++k) x[k] = mu[k] + cluster_spread * rng.normal();
  }
  return ds;
}

namespace {

std::uint32_t read_be_u32(std::ifstream& in, const std::filesystem::path& path, std::streamoff offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) {
    throw FormatError("truncated IDX file " + path.string() + " at offset " +
                      std::to_string(offset));
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw FormatError("cannot open IDX image file: " + images_path.string());
  std::ifstream lbl(labels_path, std::ios::binary);
  if (!lbl) throw FormatError("cannot open IDX label file: " + labels_path.string());

  const std::uint32_t img_magic = read_be_u32(img, images_path, 0);
  if (img_magic != 0x00000803u) {
    throw FormatError("bad IDX image magic at offset 0 in " + images_path.string() +
                      " (expected 0x00000803)");
  }
  const std::uint32_t lbl_magic = read_be_u32(lbl, labels_path, 0);
  if (lbl_magic != 0x00000801u) {
    throw FormatError("bad IDX label magic at offset 0 in " + labels_path.string() +
                      " (expected 0x00000801)");
  }
  const std::uint32_t img_count = read_be_u32(img, images_path, 4);
  const std::uint32_t rows = read_be_u32(img, images_path, 8);
  const std::uint32_t cols = read_be_u32(img, images_path, 12);
  const std::uint32_t lbl_count = read_be_u32(lbl, labels_path, 4);
  if (img_count != lbl_count) {
    throw FormatError("IDX count mismatch: " + std::to_string(img_count) + " images at offset 4 of " +
                      images_path.string() + " vs " + std::to_string(lbl_count) + " labels");
  }
  if (img_count == 0) throw FormatError("IDX file has zero items: " + images_path.string());

  const std::size_t pixels = static_cast<std::size_t>(img_count) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
  if (!img || static_cast<std::size_t>(img.gcount()) != pixels) {
    throw FormatError("truncated IDX image data in " + images_path.string() + " at offset " +
                      std::to_string(16 + img.gcount()));
  }
  std::vector<unsigned char> raw_labels(img_count);
  lbl.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(img_count));
  if (!lbl || static_cast<std::size_t>(lbl.gcount()) != img_count) {
    throw FormatError("truncated IDX label data in " + labels_path.string() + " at offset " +
                      std::to_string(8 + lbl.gcount()));
  }

  Dataset ds;
  ds.dim = static_cast<int>(rows * cols);
  ds.provenance = "idx-file";
  ds.features.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i) ds.features[i] = raw[i] / 255.0;
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  int max_label = *std::max_element(ds.labels.begin(), ds.labels.end());
  ds.num_classes = std::max(2, max_label + 1);
  ds.validate();
  return ds;
}

namespace {

void put_le_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_le_u32(const std::string& s, std::size_t off) {
  return static_cast<std::uint8_t>(s[off]) | (static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[off + 1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[off + 2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[off + 3])) << 24);
}

constexpr std::uint32_t kTrldVersion = 1;

}  // namespace

void save_trld(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::string out;
  out.reserve(20 + ds.features.size() * 4 + ds.labels.size() * 4);
  out += "TRLD";
  put_le_u32(out, kTrldVersion);
  put_le_u32(out, static_cast<std::uint32_t>(ds.count()));
  put_le_u32(out, static_cast<std::uint32_t>(ds.dim));
  put_le_u32(out, static_cast<std::uint32_t>(ds.num_classes));
  for (double f : ds.features) {
    float v = static_cast<float>(f);
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_le_u32(out, bits);
  }
  for (int y : ds.labels) put_le_u32(out, static_cast<std::uint32_t>(y));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Dataset load_trld(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path.string());
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (s.size() < 20 || s.compare(0, 4, "TRLD") != 0) {
    throw FormatError("bad TRLD magic at offset 0 in " + path.string());
  }
  const std::uint32_t version = get_le_u32(s, 4);
  if (version != kTrldVersion) {
    throw FormatError("unsupported TRLD version " + std::to_string(version) + " in " + path.string());
  }
  const std::uint32_t count = get_le_u32(s, 8);
  const std::uint32_t dim = get_le_u32(s, 12);
  const std::uint32_t classes = get_le_u32(s, 16);
  const std::size_t need = 20 + static_cast<std::size_t>(count) * dim * 4 + static_cast<std::size_t>(count) * 4;
  if (s.size() != need) {
    throw FormatError("TRLD size mismatch in " + path.string() + ": expected " + std::to_string(need) +
                      " bytes, got " + std::to_string(s.size()));
  }
  Dataset ds;
  ds.dim = static_cast<int>(dim);
  ds.num_classes = static_cast<int>(classes);
  ds.provenance = "synthetic";
  ds.features.resize(static_cast<std::size_t>(count) * dim);
  std::size_t off = 20;
  for (std::size_t i = 0; i < ds.features.size(); ++i, off += 4) {
    std::uint32_t bits = get_le_u32(s, off);
    float v;
    std::memcpy(&v, &bits, 4);
    ds.features[i] = v;
  }
  ds.labels.resize(count);
  for (std::uint32_t i = 0; i < count; ++i, off += 4) {
    ds.labels[i] = static_cast<int>(get_le_u32(s, off));
  }
  ds.validate();
  return ds;
}

std::vector<std::vector<int>> partition(const Dataset& ds, const PartitionPlan& plan, int num_clients) {
  ds.validate();
  if (num_clients < 1) throw InvalidInputError("partition: num_clients must be >= 1");
  if (static_cast<int>(plan.sizes.size()) != num_clients) {
    throw InvalidInputError("partition: plan.sizes must have one entry per client");
  }
  long total = 0;
  for (int n : plan.sizes) {
    if (n < 0) throw InvalidInputError("partition: negative shard size");
    total += n;
  }
  if (total > ds.count()) {
    throw InvalidInputError("partition: shard sizes sum to " + std::to_string(total) +
                            " but dataset has " + std::to_string(ds.count()) + " samples");
  }

  Rng rng(Rng::derive(plan.seed, {kStreamPartition}));
  std::vector<std::vector<int>> shards(num_clients);

  if (plan.policy == PartitionPolicy::Iid) {
    std::vector<int> order(ds.count());
    std::iota(order.begin(), order.end(), 0);
    for (int i = ds.count() - 1; i > 0; --i) {
      int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
      std::swap(order[i], order[j]);
    }
    std::size_t pos = 0;
    for (int c = 0; c < num_clients; ++c) {
      shards[c].assign(order.begin() + pos, order.begin() + pos + plan.sizes[c]);
      pos += plan.sizes[c];
    }
    return shards;
  }

  // Label skew: per-client class proportions from a symmetric Dirichlet, then
  // sampling without replacement from per-class pools (falling back to the
  // global pool when a class runs dry, so sizes stay exact and disjoint).
  if (plan.concentration <= 0) {
    throw InvalidInputError("partition: concentration must be > 0");
  }
  const int C = ds.num_classes;
  std::vector<std::vector<int>> pools(C);
  for (int i = 0; i < ds.count(); ++i) pools[ds.labels[i]].push_back(i);
  for (auto& p : pools) {
    for (int i = static_cast<int>(p.size()) - 1; i > 0; --i) {
      int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
      std::swap(p[i], p[j]);
    }
  }
  std::vector<std::size_t> pool_pos(C, 0);

  // Marsaglia-Tsang gamma sampling would need rejection loops; for Dirichlet
  // weights the simpler sum-of-exponentials trick suffices when the
  // concentration is integral, but it is not in general, so use the
  // Johnk/Best-free approach: Gamma(a) via Marsaglia-Tsang for a >= 1 and
  // boosting for a < 1. Deterministic per seed.
  auto gamma_draw = [&rng](double a) {
    double boost = 1.0;
    if (a < 1.0) {
      boost = std::pow(1.0 - rng.uniform(), 1.0 / a);
      a += 1.0;
    }
    const double d = a - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = rng.normal();
      double v = 1.0 + c * x;
      if (v <= 0) continue;
      v = v * v * v;
      double u = rng.uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return boost * d * v;
      if (u > 0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return boost * d * v;
    }
  };

  for (int c = 0; c < num_clients; ++c) {
    std::vector<double> w(C);
    double wsum = 0;
    for (int k = 0; k < C; ++k) {
      w[k] = gamma_draw(plan.concentration);
      wsum += w[k];
    }
    std::vector<int> want(C, 0);
    int assigned = 0;
    for (int k = 0; k < C; ++k) {
      want[k] = static_cast<int>(std::floor(plan.sizes[c] * w[k] / wsum));
      assigned += want[k];
    }
    for (int k = 0; assigned < plan.sizes[c]; k = (k + 1) % C) {
      ++want[k];
      ++assigned;
    }
    auto& shard = shards[c];
    shard.reserve(plan.sizes[c]);
    for (int k = 0; k < C; ++k) {
      int take = std::min<int>(want[k], static_cast<int>(pools[k].size() - pool_pos[k]));
      for (int m = 0; m < take; ++m) shard.push_back(pools[k][pool_pos[k]++]);
    }
    // Fill any shortfall from whichever classes still have samples.
    for (int k = 0; static_cast<int>(shard.size()) < plan.sizes[c] && k < C; ++k) {
      while (pool_pos[k] < pools[k].size() && static_cast<int>(shard.size()) < plan.sizes[c]) {
        shard.push_back(pools[k][pool_pos[k]++]);
      }
    }
  }
  return shards;
}

}  // namespace trail::data
