#pragma once

// On-disk formats: named-tensor checkpoints, partition files, metrics CSV and
// JSON-lines.
//
// Checkpoint layout (all integers little-endian):
//   "FMOECKPT"  8-byte magic
//   u8          format version (1)
//   u64         manifest length L, then L bytes of JSON
//   u32         tensor count
//   per tensor: u32 name length, name bytes, u32 rank, rank x u64 dims,
//               numel x f64 (IEEE-754 binary64)

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmoe/data.hpp"
#include "fedmoe/evaluation.hpp"
#include "fedmoe/models.hpp"
#include "fedmoe/personalization.hpp"

namespace fedmoe {

using json = nlohmann::json;

inline constexpr std::string_view kCheckpointMagic = "FMOECKPT";
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  json manifest = json::object();
  std::vector<NamedTensor> tensors;
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <class T>
  T le() {
    need(sizeof(T), "integer");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(source_ + ": " + msg + " at offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }

  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic);
  out.push_back(static_cast<char>(kCheckpointVersion));
  json manifest = ckpt.manifest;
  json shapes = json::array();
  for (const auto& t : ckpt.tensors) shapes.push_back({{"name", t.name}, {"shape", t.value.shape()}});
  manifest["tensors"] = shapes;
  const std::string text = manifest.dump();
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.value.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "checkpoint") {
  detail::ByteReader in(bytes, source);
  if (in.take(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw FormatError(source + ": bad magic at offset 0 (not a checkpoint)");
  }
  const auto version = static_cast<std::uint8_t>(in.take(1, "version")[0]);
  if (version != kCheckpointVersion) in.fail("unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  const auto mlen = in.le<std::uint64_t>();
  try {
    ckpt.manifest = json::parse(in.take(mlen, "manifest"));
  } catch (const json::exception& e) {
    in.fail(std::string("invalid manifest JSON (") + e.what() + ")");
  }
  const auto count = in.le<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = std::string(in.take(in.le<std::uint32_t>(), "tensor name"));
    const auto rank = in.le<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) {
      d = in.le<std::uint64_t>();
      if (d == 0) in.fail("zero dimension in tensor " + t.name);
    }
    const std::size_t n = shape_numel(shape);
    if (n > bytes.size()) in.fail("implausible size for tensor " + t.name);
    std::vector<double> data(n);
    for (double& v : data) v = std::bit_cast<double>(in.le<std::uint64_t>());
    t.value = Tensor(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) in.fail("trailing bytes");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  detail::write_text(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_text(path), path.string());
}

// ----------------------------------------------------------- model JSON ---

inline json to_json(const ModelSpec& spec) {
  return {{"arch", to_string(spec.arch)}, {"channels", spec.channels}, {"side", spec.side},
          {"classes", spec.classes},      {"hidden", spec.hidden}};
}

inline ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  s.arch = parse_architecture(j.at("arch").get<std::string>());
  s.channels = j.at("channels").get<std::size_t>();
  s.side = j.at("side").get<std::size_t>();
  s.classes = j.at("classes").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  return s;
}

/// Checkpoint for a full model, a classifier, or a personalized client.
inline Checkpoint model_checkpoint(const ModelSpec& spec, const ModelParams& params, json extra = json::object()) {
  Checkpoint c;
  c.manifest = std::move(extra);
  c.manifest["spec"] = to_json(spec);
  c.tensors = params.tensors;
  return c;
}

inline Checkpoint client_checkpoint(const ModelSpec& spec, const PersonalizedClient& client, json extra = json::object()) {
  Checkpoint c = model_checkpoint(spec, client.personalized, std::move(extra));
  c.manifest["algorithm"] = to_string(client.algorithm);
  c.manifest["client_id"] = client.client_id;
  if (client.gate) {
    c.manifest["gate_mode"] = to_string(client.gate->mode);
    c.tensors.push_back({"gate.weight", client.gate->weights});
    c.tensors.push_back({"gate.bias", Tensor::scalar(client.gate->bias)});
  }
  if (client.mean_g) c.manifest["mean_g"] = *client.mean_g;
  return c;
}

/// Rebuilds a personalized client from its checkpoint; `global` is reattached.
inline PersonalizedClient client_from_checkpoint(const Checkpoint& c, std::shared_ptr<const SplitModel> global) {
  PersonalizedClient p;
  p.algorithm = parse_algorithm(c.manifest.at("algorithm").get<std::string>());
  p.client_id = c.manifest.at("client_id").get<std::size_t>();
  for (const auto& t : c.tensors) {
    if (t.name == "gate.weight" || t.name == "gate.bias") continue;
    p.personalized.tensors.push_back(t);
  }
  if (c.manifest.contains("gate_mode")) {
    GatingParams g;
    g.mode = c.manifest.at("gate_mode").get<std::string>() == "feature" ? GateInput::feature : GateInput::raw;
    for (const auto& t : c.tensors) {
      if (t.name == "gate.weight") g.weights = t.value;
      if (t.name == "gate.bias") g.bias = t.value[0];
    }
    if (g.weights.empty()) throw FormatError("client checkpoint has gate_mode but no gate.weight");
    p.gate = std::move(g);
  }
  if (c.manifest.contains("mean_g")) p.mean_g = c.manifest.at("mean_g").get<double>();
  p.global = std::move(global);
  return p;
}

// ------------------------------------------------------------ partition ---

inline json partition_to_json(const ClientPartition& part, const PartitionSpec& spec, std::size_t dataset_size) {
  return {{"clients", part.client_count()},
          {"concentration", spec.concentration},
          {"seed", spec.seed},
          {"dataset_size", dataset_size},
          {"partition", part.clients}};
}

/// Parses a partition file and checks it is a disjoint cover of [0, dataset_size).
inline ClientPartition partition_from_json(const json& j, std::size_t dataset_size) {
  ClientPartition p;
  try {
    p.clients = j.at("partition").get<std::vector<std::vector<std::size_t>>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("partition file: ") + e.what());
  }
  std::vector<bool> seen(dataset_size, false);
  std::size_t covered = 0;
  for (std::size_t c = 0; c < p.clients.size(); ++c) {
    if (p.clients[c].empty()) throw FormatError("partition file: client " + std::to_string(c) + " is empty");
    for (std::size_t i : p.clients[c]) {
      if (i >= dataset_size || seen[i]) {
        throw FormatError("partition file: index " + std::to_string(i) + " of client " + std::to_string(c) +
                          " is out of range or duplicated (dataset has " + std::to_string(dataset_size) +
                          " examples)");
      }
      seen[i] = true;
      ++covered;
    }
  }
  if (covered != dataset_size) {
    throw FormatError("partition file covers " + std::to_string(covered) + " of " +
                      std::to_string(dataset_size) + " examples; was it built for another dataset?");
  }
  return p;
}

/// client_id,n,class_0,...,class_{K-1}
inline std::string partition_histogram_csv(const ClientPartition& part, const LabeledDataset& ds) {
  std::ostringstream os;
  os << "client_id,n";
  for (std::size_t k = 0; k < ds.classes; ++k) os << ",class_" << k;
  os << '\n';
  for (std::size_t c = 0; c < part.client_count(); ++c) {
    std::vector<std::size_t> h(ds.classes, 0);
    for (std::size_t i : part.clients[c]) ++h[static_cast<std::size_t>(ds.labels[i])];
    os << c << ',' << part.clients[c].size();
    for (std::size_t v : h) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

// -------------------------------------------------------------- metrics ---

/// Shortest decimal text that round-trips to the same double.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw FormatError("cannot format number");
  return std::string(buf.data(), end);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw FormatError(where + ": not a number '" + std::string(s) + "'");
  return v;
}

inline const std::vector<std::string>& metrics_base_columns() {
  static const std::vector<std::string> cols{"run_id", "algorithm", "client_id", "local_acc", "global_acc", "seed"};
  return cols;
}

/// Fixed leading columns, then n_train when known and mean_g for gated runs.
inline std::string metrics_csv(std::span<const MetricsRecord> records) {
  const bool sized = !records.empty() && std::all_of(records.begin(), records.end(), [](const auto& r) { return r.n_train.has_value(); });
  const bool gated = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.mean_g.has_value(); });
  std::ostringstream os;
  const auto& base = metrics_base_columns();
  for (std::size_t i = 0; i < base.size(); ++i) os << (i ? "," : "") << base[i];
  if (sized) os << ",n_train";
  if (gated) os << ",mean_g";
  os << '\n';
  for (const auto& r : records) {
    os << r.run_id << ',' << r.algorithm << ',' << r.client_id << ',' << format_double(r.local_acc) << ','
       << format_double(r.global_acc) << ',' << r.seed;
    if (sized) os << ',' << *r.n_train;
    if (gated) os << ',' << (r.mean_g ? format_double(*r.mean_g) : "");
    os << '\n';
  }
  return os.str();
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}
}  // namespace detail

inline std::vector<MetricsRecord> parse_metrics_csv(const std::string& text, const std::string& source = "metrics") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(source + ": empty metrics file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const auto& name : metrics_base_columns()) {
    if (!col.count(name)) throw FormatError(source + ": schema mismatch, missing column '" + name + "'");
  }
  std::vector<MetricsRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = source + ":" + std::to_string(lineno);
    if (cells.size() != header.size()) {
      throw FormatError(where + ": expected " + std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    MetricsRecord r;
    r.run_id = cells[col["run_id"]];
    r.algorithm = cells[col["algorithm"]];
    r.client_id = static_cast<long>(parse_double(cells[col["client_id"]], where));
    r.local_acc = parse_double(cells[col["local_acc"]], where);
    r.global_acc = parse_double(cells[col["global_acc"]], where);
    r.seed = std::stoull(cells[col["seed"]]);
    if (col.count("n_train") && !cells[col["n_train"]].empty()) {
      r.n_train = static_cast<std::size_t>(parse_double(cells[col["n_train"]], where));
    }
    if (col.count("mean_g") && !cells[col["mean_g"]].empty()) r.mean_g = parse_double(cells[col["mean_g"]], where);
    out.push_back(std::move(r));
  }
  return out;
}

inline json to_json(const MetricsRecord& r) {
  json j = {{"run_id", r.run_id},       {"algorithm", r.algorithm},   {"client_id", r.client_id},
            {"local_acc", r.local_acc}, {"global_acc", r.global_acc}, {"seed", r.seed}};
  if (r.n_train) j["n_train"] = *r.n_train;
  if (r.mean_g) j["mean_g"] = *r.mean_g;
  if (!r.timestamp.empty()) j["timestamp"] = r.timestamp;
  return j;
}

inline std::string metrics_jsonl(std::span<const MetricsRecord> records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + '\n';
  return out;
}

}  // namespace fedmoe
