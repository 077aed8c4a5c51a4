#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/random.hpp"
#include "fedmoe/tensor.hpp"

namespace fedmoe {

/// Images [N x C x S x S] in [0,1] with integer labels in [0, classes).
struct LabeledDataset {
  Tensor features;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return features.dim(1); }
  std::size_t side() const { return features.dim(2); }
  std::size_t example_numel() const { return features.numel() / size(); }

  /// Per-class example counts.
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }
};

struct Batch {
  Tensor x;
  std::vector<int> y;
};

/// Copies the examples at `indices` (in order) into a batch.
inline Batch gather(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("gather: empty index list");
  const std::size_t stride = ds.example_numel();
  Shape shape = ds.features.shape();
  shape[0] = indices.size();
  std::vector<double> data(indices.size() * stride);
  std::vector<int> y(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= ds.size()) throw InputError("gather: index " + std::to_string(src) + " out of range");
    std::copy_n(ds.features.data().begin() + static_cast<std::ptrdiff_t>(src * stride), stride,
                data.begin() + static_cast<std::ptrdiff_t>(i * stride));
    y[i] = ds.labels[src];
  }
  return Batch{Tensor(std::move(shape), std::move(data)), std::move(y)};
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

// ------------------------------------------------------------ partition ---

struct PartitionSpec {
  std::size_t clients = 100;
  double concentration = 0.5;
  std::uint64_t seed = 0;

  void validate(const std::string& path = "partition") const {
    if (clients < 1) throw ConfigError(path + ".clients must be >= 1");
    if (!(concentration > 0.0) || !std::isfinite(concentration)) {
      throw ConfigError(path + ".concentration must be > 0");
    }
  }
};

/// Per-client example indices (each list sorted ascending).
struct ClientPartition {
  std::vector<std::vector<std::size_t>> clients;

  std::size_t client_count() const noexcept { return clients.size(); }
  friend bool operator==(const ClientPartition&, const ClientPartition&) = default;
};

namespace detail {

/// Splits `total` items into integer shares proportional to `p` (which sums
/// to 1). Leftover units go to the largest fractional parts, lowest index
/// first on ties, so the shares always add up to `total`.
inline std::vector<std::size_t> largest_remainder(std::span<const double> p, std::size_t total) {
  std::vector<std::size_t> share(p.size());
  std::vector<double> frac(p.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double exact = p[i] * static_cast<double>(total);
    share[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(share[i]);
    assigned += share[i];
  }
  // Floating error can push the floor sum past the total; trim from the end.
  for (std::size_t i = p.size(); assigned > total && i-- > 0;) {
    const std::size_t take = std::min(share[i], assigned - total);
    share[i] -= take;
    assigned -= take;
  }
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&frac](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < total; k = (k + 1) % order.size()) {
    ++share[order[k]];
    ++assigned;
  }
  return share;
}

inline std::vector<double> sample_dirichlet(Rng& rng, std::size_t n, double concentration) {
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& v : p) {
    v = gamma(rng);
    sum += v;
  }
  if (!(sum > 0.0)) {
    // Every draw underflowed (tiny concentration): all mass on one client.
    std::fill(p.begin(), p.end(), 0.0);
    p[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = 1.0;
    return p;
  }
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace detail

/// Dirichlet non-IID allocation: for every class, client shares are drawn
/// from Dir(concentration * 1_N) and the class's examples dealt out in those
/// proportions. Clients left empty by rounding take one example from the
/// current largest client.
inline ClientPartition dirichlet_partition(const LabeledDataset& ds, const PartitionSpec& spec) {
  spec.validate();
  if (ds.size() == 0) throw ConfigError("partition: dataset is empty");
  if (spec.clients > ds.size()) {
    throw ConfigError("partition.clients (" + std::to_string(spec.clients) +
                      ") exceeds dataset size (" + std::to_string(ds.size()) + ")");
  }
  Rng rng(derive_seed(spec.seed, {stream::partition}));
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  ClientPartition part;
  part.clients.resize(spec.clients);
  for (auto& members : by_class) {
    if (members.empty()) continue;
    const std::vector<double> p = detail::sample_dirichlet(rng, spec.clients, spec.concentration);
    const std::vector<std::size_t> share = detail::largest_remainder(p, members.size());
    std::shuffle(members.begin(), members.end(), rng);
    std::size_t pos = 0;
    for (std::size_t c = 0; c < spec.clients; ++c) {
      auto& dst = part.clients[c];
      dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                 members.begin() + static_cast<std::ptrdiff_t>(pos + share[c]));
      pos += share[c];
    }
  }

  for (auto& client : part.clients) std::sort(client.begin(), client.end());
  for (auto& client : part.clients) {
    if (!client.empty()) continue;
    auto largest = std::max_element(part.clients.begin(), part.clients.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    client.push_back(largest->back());
    largest->pop_back();
  }
  return part;
}

// ---------------------------------------------------------------- split ---

/// A client's examples divided into an adaptation subset and a gate subset.
struct ClientSplit {
  std::vector<std::size_t> per_indices;
  std::vector<std::size_t> gate_indices;
  double split_ratio = 0.8;
};

/// Seeded shuffle, then the first ceil(ratio * n) go to the adaptation set.
/// Both halves are kept nonempty.
inline ClientSplit split_per_gate(std::span<const std::size_t> indices, double ratio,
                                  std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("personalize.split_ratio must be in (0,1)");
  if (indices.size() < 2) {
    throw DegenerateClientError("client has " + std::to_string(indices.size()) +
                                " example(s); at least 2 are needed for an adaptation/gate split");
  }
  std::vector<std::size_t> shuffled(indices.begin(), indices.end());
  Rng rng(derive_seed(seed, {stream::split}));
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const std::size_t n = shuffled.size();
  auto per = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  per = std::clamp<std::size_t>(per, 1, n - 1);
  ClientSplit s;
  s.per_indices.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(per));
  s.gate_indices.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(per), shuffled.end());
  s.split_ratio = ratio;
  return s;
}

// ------------------------------------------------------------------ IDX ---

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                               const std::filesystem::path& path) {
  if (offset + 4 > buf.size()) {
    throw FormatError(path.string() + ": truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

inline void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace detail

/// Reads an IDX image/label file pair (MNIST family). Pixels are scaled by 1/255.
/// `classes` = 0 infers the class count as max label + 1.
inline LabeledDataset load_idx(const std::filesystem::path& images_path,
                               const std::filesystem::path& labels_path, std::size_t classes = 0) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  if (const auto magic = detail::read_be32(img, 0, images_path); magic != kIdxImageMagic) {
    throw FormatError(images_path.string() + ": bad magic " + std::to_string(magic) +
                      " at offset 0 (expected 0x00000803)");
  }
  if (const auto magic = detail::read_be32(lab, 0, labels_path); magic != kIdxLabelMagic) {
    throw FormatError(labels_path.string() + ": bad magic " + std::to_string(magic) +
                      " at offset 0 (expected 0x00000801)");
  }
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw FormatError("image count " + std::to_string(n) + " (" + images_path.string() +
                      ") does not match label count " + std::to_string(n_labels) + " (" +
                      labels_path.string() + ")");
  }
  if (n == 0 || rows == 0 || cols == 0) throw FormatError(images_path.string() + ": empty image set");
  constexpr std::size_t img_header = 16, lab_header = 8;
  const std::size_t pixels = n * rows * cols;
  if (img.size() < img_header + pixels) {
    throw FormatError(images_path.string() + ": truncated pixel data at offset " +
                      std::to_string(img.size()) + " (need " + std::to_string(img_header + pixels) +
                      " bytes)");
  }
  if (lab.size() < lab_header + n) {
    throw FormatError(labels_path.string() + ": truncated label data at offset " +
                      std::to_string(lab.size()) + " (need " + std::to_string(lab_header + n) +
                      " bytes)");
  }

  LabeledDataset ds;
  std::vector<double> data(pixels);
  for (std::size_t i = 0; i < pixels; ++i) data[i] = static_cast<double>(img[img_header + i]) / 255.0;
  ds.features = Tensor({n, 1, rows, cols}, std::move(data));
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[lab_header + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = classes ? classes : static_cast<std::size_t>(max_label) + 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (static_cast<std::size_t>(ds.labels[i]) >= ds.classes) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(ds.labels[i]) +
                        " at offset " + std::to_string(lab_header + i) + " exceeds class count");
    }
  }
  return ds;
}

/// Writes a single-channel dataset as an IDX pair (pixels rounded to bytes).
inline void write_idx(const LabeledDataset& ds, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  if (ds.channels() != 1) throw InputError("write_idx: IDX images are single-channel");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw FormatError("cannot create IDX files at " + images_path.string());
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.features.dim(2)));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.features.dim(3)));
  for (double v : ds.features.data()) {
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lab.put(static_cast<char>(y));
}

/// Zero-pads 28x28 images to 32x32 (two pixels per side). 32x32 input is
/// returned unchanged.
inline LabeledDataset pad_to_32(const LabeledDataset& ds) {
  const std::size_t side = ds.side();
  if (side == 32 && ds.features.dim(3) == 32) return ds;
  if (side != 28 || ds.features.dim(3) != 28) {
    throw DimensionError("pad_to_32: unsupported input side " + shape_str(ds.features.shape()));
  }
  const std::size_t n = ds.size(), c = ds.channels();
  Tensor out({n, c, 32, 32});
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t y = 0; y < 28; ++y) {
      for (std::size_t x = 0; x < 28; ++x) {
        out[p * 1024 + (y + 2) * 32 + (x + 2)] = ds.features[p * 784 + y * 28 + x];
      }
    }
  }
  return LabeledDataset{std::move(out), ds.labels, ds.classes};
}

// ------------------------------------------------------------ synthetic ---

/// Each class owns one Gaussian blob per channel at a seeded position;
/// examples are the class pattern plus i.i.d. pixel noise, clamped to [0,1].
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t channels = 1;
  std::size_t side = 32;
  double noise = 0.1;
  double blob_sigma = 3.0;
  std::uint64_t seed = 0;

  void validate(const std::string& path = "data") const {
    if (classes < 2) throw ConfigError(path + ".classes must be >= 2");
    if (per_class < 1) throw ConfigError(path + ".per_class must be >= 1");
    if (channels < 1) throw ConfigError(path + ".channels must be >= 1");
    if (side < 8) throw ConfigError(path + ".side must be >= 8");
    if (!(noise >= 0.0)) throw ConfigError(path + ".noise must be >= 0");
    if (!(blob_sigma > 0.0)) throw ConfigError(path + ".blob_sigma must be > 0");
  }
};

/// Class mean images [K x C x S x S]; a function of spec.seed only.
inline Tensor synthetic_patterns(const SyntheticSpec& spec) {
  Rng rng(derive_seed(spec.seed, {stream::synthetic, 0}));
  const double lo = static_cast<double>(spec.side) * 0.2, hi = static_cast<double>(spec.side) * 0.8;
  std::uniform_real_distribution<double> pos(lo, hi);
  const std::size_t s = spec.side;
  Tensor pat({spec.classes, spec.channels, s, s});
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (std::size_t c = 0; c < spec.channels; ++c) {
      const double cy = pos(rng), cx = pos(rng);
      double* plane = &pat[(k * spec.channels + c) * s * s];
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          plane[y * s + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * spec.blob_sigma * spec.blob_sigma));
        }
      }
    }
  }
  return pat;
}

/// Balanced dataset of spec.per_class examples per class (labels cycle
/// 0..K-1). Different `sample_stream` values draw independent samples of the
/// same class patterns, e.g. 0 for training and 1 for a test set.
inline LabeledDataset make_synthetic(const SyntheticSpec& spec, std::uint64_t sample_stream = 0) {
  spec.validate();
  const Tensor pat = synthetic_patterns(spec);
  const std::size_t n = spec.classes * spec.per_class;
  const std::size_t stride = spec.channels * spec.side * spec.side;
  Rng rng(derive_seed(spec.seed, {stream::synthetic, 1 + sample_stream}));
  std::normal_distribution<double> noise(0.0, 1.0);
  LabeledDataset ds;
  ds.classes = spec.classes;
  ds.labels.resize(n);
  std::vector<double> data(n * stride);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % spec.classes;
    ds.labels[i] = static_cast<int>(k);
    for (std::size_t j = 0; j < stride; ++j) {
      const double v = pat[k * stride + j] + spec.noise * noise(rng);
      data[i * stride + j] = std::clamp(v, 0.0, 1.0);
    }
  }
  ds.features = Tensor({n, spec.channels, spec.side, spec.side}, std::move(data));
  return ds;
}

}  // namespace fedmoe
