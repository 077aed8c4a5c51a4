#pragma once

// INI experiment configuration for the fedmoe CLI.
//
//   [run]                seed workers out run_id
//   [data]               source=synthetic: classes per_class test_per_class channels side noise blob_sigma
//                        source=idx: train_images train_labels test_images test_labels classes pad
//   [model]              arch hidden
//   [partition]          clients concentration
//   [fedavg]             rounds participation local_epochs batch learning_rate momentum weight_decay
//                        lr_decay_factor lr_decay_every weighting eval_every
//   [personalize]        algorithm epochs batch split_ratio
//   [personalize.adapt]  learning_rate momentum weight_decay
//   [personalize.gate]   learning_rate momentum weight_decay
//   [local]              epochs batch learning_rate momentum weight_decay lr_decay_factor lr_decay_every

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fedmoe/fedmoe.hpp"

namespace fedmoe::cli {

enum class DataSource { synthetic, idx };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  SyntheticSpec synthetic;
  std::size_t test_per_class = 20;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t idx_classes = 10;
  bool pad = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::filesystem::path out = "runs/default";
  std::string run_id = "run";
  DataConfig data;
  Architecture arch = Architecture::lenet5;
  std::vector<std::size_t> hidden{64};
  PartitionSpec partition;
  FedConfig fedavg;
  PersonalizationConfig personalize;

  ExperimentConfig() {
    fedavg.rounds = 1000;
    personalize.algorithm = Algorithm::pfl_mf;
  }

  std::size_t classes() const {
    return data.source == DataSource::synthetic ? data.synthetic.classes : data.idx_classes;
  }

  /// Model spec for inputs of the given geometry.
  ModelSpec model_spec(std::size_t channels, std::size_t side) const {
    return ModelSpec{arch, channels, side, classes(), arch == Architecture::mlp ? hidden : std::vector<std::size_t>{}};
  }
};

namespace detail {

inline std::uint64_t parse_u64(const std::string& s, const std::string& path) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) {
    throw ConfigError(path + ": expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline double parse_real(const std::string& s, const std::string& path) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(path + ": expected a finite number, got '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& path) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(path + ": expected true or false, got '" + s + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& s, const std::string& path) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(' ');
    const auto last = item.find_last_not_of(' ');
    out.push_back(parse_u64(first == std::string::npos ? "" : item.substr(first, last - first + 1), path));
  }
  if (out.empty()) throw ConfigError(path + ": expected a comma-separated list of sizes");
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& value, const std::string& path)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  std::string section;
  std::string key;
  Setter set;
  Getter get;
};

template <class Proj>
Field size_field(std::string section, std::string key, Proj proj) {
  return {section, key,
          [proj](ExperimentConfig& c, const std::string& v, const std::string& p) { proj(c) = parse_u64(v, p); },
          [proj](const ExperimentConfig& c) { return std::to_string(proj(c)); }};
}

template <class Proj>
Field real_field(std::string section, std::string key, Proj proj) {
  return {section, key,
          [proj](ExperimentConfig& c, const std::string& v, const std::string& p) { proj(c) = parse_real(v, p); },
          [proj](const ExperimentConfig& c) { return format_double(proj(c)); }};
}

template <class Proj>
void sgd_fields(std::vector<Field>& out, const std::string& section, Proj sgd, bool with_decay) {
  out.push_back(real_field(section, "learning_rate", [sgd](auto& c) -> auto& { return sgd(c).learning_rate; }));
  out.push_back(real_field(section, "momentum", [sgd](auto& c) -> auto& { return sgd(c).momentum; }));
  out.push_back(real_field(section, "weight_decay", [sgd](auto& c) -> auto& { return sgd(c).weight_decay; }));
  if (with_decay) {
    out.push_back(
        real_field(section, "lr_decay_factor", [sgd](auto& c) -> auto& { return sgd(c).lr_decay_factor; }));
    out.push_back(size_field(section, "lr_decay_every",
                             [sgd](auto& c) -> auto& { return sgd(c).lr_decay_every; }));
  }
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(size_field("run", "seed", [](auto& c) -> auto& { return c.seed; }));
    f.push_back(size_field("run", "workers", [](auto& c) -> auto& { return c.workers; }));
    f.push_back({"run", "out", [](ExperimentConfig& c, const std::string& v, const std::string&) { c.out = v; },
                 [](const ExperimentConfig& c) { return c.out.string(); }});
    f.push_back({"run", "run_id", [](ExperimentConfig& c, const std::string& v, const std::string&) { c.run_id = v; },
                 [](const ExperimentConfig& c) { return c.run_id; }});

    f.push_back({"data", "source",
                 [](ExperimentConfig& c, const std::string& v, const std::string& p) {
                   if (v == "synthetic") {
                     c.data.source = DataSource::synthetic;
                   } else if (v == "idx") {
                     c.data.source = DataSource::idx;
                   } else {
                     throw ConfigError(p + ": expected synthetic or idx, got '" + v + "'");
                   }
                 },
                 [](const ExperimentConfig& c) { return c.data.source == DataSource::idx ? "idx" : "synthetic"; }});
    f.push_back({"data", "classes",
                 [](ExperimentConfig& c, const std::string& v, const std::string& p) {
                   c.data.synthetic.classes = c.data.idx_classes = parse_u64(v, p);
                 },
                 [](const ExperimentConfig& c) { return std::to_string(c.classes()); }});
    f.push_back(size_field("data", "per_class", [](auto& c) -> auto& { return c.data.synthetic.per_class; }));
    f.push_back(size_field("data", "test_per_class", [](auto& c) -> auto& { return c.data.test_per_class; }));
    f.push_back(size_field("data", "channels", [](auto& c) -> auto& { return c.data.synthetic.channels; }));
    f.push_back(size_field("data", "side", [](auto& c) -> auto& { return c.data.synthetic.side; }));
    f.push_back(real_field("data", "noise", [](auto& c) -> auto& { return c.data.synthetic.noise; }));
    f.push_back(real_field("data", "blob_sigma", [](auto& c) -> auto& { return c.data.synthetic.blob_sigma; }));
    for (auto [key, member] : {std::pair{"train_images", &DataConfig::train_images},
                               std::pair{"train_labels", &DataConfig::train_labels},
                               std::pair{"test_images", &DataConfig::test_images},
                               std::pair{"test_labels", &DataConfig::test_labels}}) {
      f.push_back({"data", key,
                   [member](ExperimentConfig& c, const std::string& v, const std::string&) { c.data.*member = v; },
                   [member](const ExperimentConfig& c) { return (c.data.*member).string(); }});
    }
    f.push_back({"data", "pad",
                 [](ExperimentConfig& c, const std::string& v, const std::string& p) { c.data.pad = parse_bool(v, p); },
                 [](const ExperimentConfig& c) { return std::string(c.data.pad ? "true" : "false"); }});

    f.push_back({"model", "arch",
                 [](ExperimentConfig& c, const std::string& v, const std::string& p) {
                   try {
                     c.arch = parse_architecture(v);
                   } catch (const Error& e) {
                     throw ConfigError(p + ": " + e.what());
                   }
                 },
                 [](const ExperimentConfig& c) { return to_string(c.arch); }});
    f.push_back({"model", "hidden",
                 [](ExperimentConfig& c, const std::string& v, const std::string& p) { c.hidden = parse_sizes(v, p); },
                 [](const ExperimentConfig& c) { return join(c.hidden); }});

    f.push_back(size_field("partition", "clients", [](auto& c) -> auto& { return c.partition.clients; }));
    f.push_back(
        real_field("partition", "concentration", [](auto& c) -> auto& { return c.partition.concentration; }));

    f.push_back(size_field("fedavg", "rounds", [](auto& c) -> auto& { return c.fedavg.rounds; }));
    f.push_back(real_field("fedavg", "participation", [](auto& c) -> auto& { return c.fedavg.participation; }));
    f.push_back(size_field("fedavg", "local_epochs", [](auto& c) -> auto& { return c.fedavg.local_epochs; }));
    f.push_back(size_field("fedavg", "batch", [](auto& c) -> auto& { return c.fedavg.local_batch; }));
    sgd_fields(f, "fedavg", [](auto& c) -> auto& { return c.fedavg.client_sgd; }, true);
    f.push_back({"fedavg", "weighting",
                 [](ExperimentConfig& c, const std::string& v, const std::string& p) {
                   try {
                     c.fedavg.weighting = parse_weighting(v);
                   } catch (const Error& e) {
                     throw ConfigError(p + ": " + e.what());
                   }
                 },
                 [](const ExperimentConfig& c) { return to_string(c.fedavg.weighting); }});
    f.push_back(size_field("fedavg", "eval_every", [](auto& c) -> auto& { return c.fedavg.eval_every; }));

    f.push_back({"personalize", "algorithm",
                 [](ExperimentConfig& c, const std::string& v, const std::string& p) {
                   try {
                     c.personalize.algorithm = parse_algorithm(v);
                   } catch (const Error& e) {
                     throw ConfigError(p + ": " + e.what());
                   }
                 },
                 [](const ExperimentConfig& c) { return to_string(c.personalize.algorithm); }});
    f.push_back(size_field("personalize", "epochs", [](auto& c) -> auto& { return c.personalize.epochs; }));
    f.push_back(size_field("personalize", "batch", [](auto& c) -> auto& { return c.personalize.batch; }));
    f.push_back(
        real_field("personalize", "split_ratio", [](auto& c) -> auto& { return c.personalize.split_ratio; }));
    sgd_fields(f, "personalize.adapt", [](auto& c) -> auto& { return c.personalize.adapt; }, false);
    sgd_fields(f, "personalize.gate", [](auto& c) -> auto& { return c.personalize.gate; }, false);

    f.push_back(size_field("local", "epochs", [](auto& c) -> auto& { return c.personalize.local.epochs; }));
    f.push_back(size_field("local", "batch", [](auto& c) -> auto& { return c.personalize.local.batch; }));
    sgd_fields(f, "local", [](auto& c) -> auto& { return c.personalize.local.sgd; }, true);
    return f;
  }();
  return all;
}

}  // namespace detail

/// Checks every nested invariant that does not need the data on disk.
inline void validate(const ExperimentConfig& c) {
  if (c.workers < 1) throw ConfigError("run.workers must be >= 1");
  if (c.run_id.empty() || c.run_id.find_first_of(",\n\r") != std::string::npos) {
    throw ConfigError("run.run_id must be nonempty and free of commas and newlines");
  }
  if (c.data.source == DataSource::synthetic) {
    c.data.synthetic.validate("data");
    if (c.data.test_per_class < 1) throw ConfigError("data.test_per_class must be >= 1");
    c.model_spec(c.data.synthetic.channels, c.data.synthetic.side).validate("model");
  } else {
    for (const auto* p : {&c.data.train_images, &c.data.train_labels, &c.data.test_images, &c.data.test_labels}) {
      if (p->empty()) throw ConfigError("data: source=idx needs train_images, train_labels, test_images and test_labels");
    }
    if (c.data.idx_classes < 2) throw ConfigError("data.classes must be >= 2");
    c.model_spec(1, c.data.pad ? 32 : 28).validate("model");
  }
  c.partition.validate("partition");
  c.fedavg.validate(c.partition.clients, "fedavg");
  c.personalize.validate("personalize");
}

/// Parses INI text over the default configuration. Unknown sections and
/// keys are errors, so typos cannot silently fall back to defaults.
inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "config") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ": line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::string, const detail::Field*> index;
  for (const auto& f : detail::fields()) index[f.section + "." + f.key] = &f;
  ExperimentConfig c;
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty()) throw ConfigError(source + ": key '" + section + "' is outside any section");
    for (const auto& [key, value] : keys) {
      const std::string path = section + "." + key;
      const auto it = index.find(path);
      if (it == index.end()) throw ConfigError(source + ": unknown key " + path);
      it->second->set(c, value.data(), path);
    }
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// Every key with its resolved value; parse_config(to_ini(c)) reproduces c.
inline std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
  return os.str();
}

inline json to_json(const ExperimentConfig& c) {
  json j = json::object();
  for (const auto& f : detail::fields()) j[f.section][f.key] = f.get(c);
  return j;
}

}  // namespace fedmoe::cli
