#include "trail/config.hpp"

#include <cmath>
#include <map>
#include <set>

#include <json.hpp>

#include "trail/errors.hpp"
#include "trail/io.hpp"

namespace trail::cfg {

int ExperimentConfig::resolved_capacity() const {
  if (capacity > 0) return capacity;
  return 2 * ((clients + servers - 1) / servers);
}

double ExperimentConfig::resolved_t_life() const {
  return t_life > 0 ? t_life : static_cast<double>(total_rounds());
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw InvalidInputError("config: " + field + " " + why);
  };
  if (clients < 1) fail("experiment.clients", "must be >= 1");
  if (servers < 1) fail("experiment.servers", "must be >= 1");
  if (capacity < 0) fail("experiment.capacity", "must be >= 0");
  if (horizon_blocks < 1) fail("experiment.horizon_blocks", "must be >= 1");
  if (t1 < 0) fail("experiment.t1", "must be >= 0");
  if (t2 < 1) fail("experiment.t2", "must be >= 1");
  if (dataset_kind != "synthetic" && dataset_kind != "idx") {
    fail("dataset.kind", "must be 'synthetic' or 'idx'");
  }
  if (dataset_kind == "synthetic") {
    if (classes < 2) fail("dataset.classes", "must be >= 2");
    if (dim < 1) fail("dataset.dim", "must be >= 1");
    if (spread < 0) fail("dataset.spread", "must be >= 0");
    if (test_count < 1) fail("dataset.test_count", "must be >= 1");
  } else {
    if (idx_images.empty()) fail("dataset.images", "is required for kind = idx");
    if (idx_labels.empty()) fail("dataset.labels", "is required for kind = idx");
    if (!std::filesystem::exists(idx_images)) fail("dataset.images", "path does not exist: " + idx_images);
    if (!std::filesystem::exists(idx_labels)) fail("dataset.labels", "path does not exist: " + idx_labels);
    if (!idx_test_images.empty() && !std::filesystem::exists(idx_test_images)) {
      fail("dataset.test_images", "path does not exist: " + idx_test_images);
    }
    if (!idx_test_labels.empty() && !std::filesystem::exists(idx_test_labels)) {
      fail("dataset.test_labels", "path does not exist: " + idx_test_labels);
    }
  }
  if (partition_policy != "iid" && partition_policy != "label_skew") {
    fail("partition.policy", "must be 'iid' or 'label_skew'");
  }
  if (concentration <= 0) fail("partition.concentration", "must be > 0");
  if (shard_size < 1) fail("partition.shard_size", "must be >= 1");
  if (model_kind != "logistic" && model_kind != "mlp") {
    fail("model.kind", "must be 'logistic' or 'mlp'");
  }
  if (model_kind == "mlp" && hidden < 1) fail("model.hidden", "must be >= 1");
  if (!(lr > 0)) fail("train.lr", "must be > 0");
  if (momentum < 0 || momentum >= 1) fail("train.momentum", "must be in [0, 1)");
  if (batch < 1) fail("train.batch", "must be >= 1");
  if (degraded_fraction < 0 || degraded_fraction > 1) {
    fail("degradation.fraction", "must be in [0, 1]");
  }
  if (onset < 0) fail("degradation.onset", "must be >= 0");
  for (auto [name, v] : {std::pair<const char*, double>{"degradation.noise_start", noise_start},
                         {"degradation.noise_end", noise_end},
                         {"degradation.loss_start", loss_start},
                         {"degradation.loss_end", loss_end}}) {
    if (v < 0 || v > 1) fail(name, "must be a probability in [0, 1]");
  }
  if (noise_slope < 0) fail("degradation.noise_slope", "must be >= 0");
  if (noise_kind != "uniform" && noise_kind != "shift") {
    fail("degradation.noise_kind", "must be 'uniform' or 'shift'");
  }
  if (loss_slope < 0) fail("degradation.loss_slope", "must be >= 0");
  if (noise_end < noise_start) fail("degradation.noise_end", "must be >= noise_start");
  if (loss_end < loss_start) fail("degradation.loss_end", "must be >= loss_start");
  if (states < 2) fail("ahsmm.states", "must be >= 2");
  if (max_duration < 1) fail("ahsmm.max_duration", "must be >= 1");
  if (fit_cadence < 1) fail("ahsmm.fit_cadence", "must be >= 1");
  if (fit_iters < 1) fail("ahsmm.fit_iters", "must be >= 1");
  if (!(fit_tol > 0)) fail("ahsmm.fit_tol", "must be > 0");
  if (min_history < 1) fail("ahsmm.min_history", "must be >= 1");
  if (delivery_window < 1) fail("ahsmm.delivery_window", "must be >= 1");
  if (obs_warmup < 0) fail("ahsmm.obs_warmup", "must be >= 0");
  if (t_life < 0) fail("trust.t_life", "must be >= 0");
  if (scheduler != "trail" && scheduler != "random" && scheduler != "trust_only" &&
      scheduler != "exhaustive") {
    fail("scheduler.kind", "must be trail | random | trust_only | exhaustive");
  }
  if (order != "desc" && order != "asc") fail("scheduler.order", "must be 'desc' or 'asc'");
  if (resched_cadence < 1) fail("scheduler.resched_cadence", "must be >= 1");
  if (out_dir.empty()) fail("output.dir", "must not be empty");
}

namespace {

struct IniData {
  std::map<std::string, std::string> values;  // "section.key" -> value
};

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

IniData parse_ini(const std::string& text) {
  IniData ini;
  std::string section;
  int lineno = 0;
  for (const auto& raw : io::split_lines(text)) {
    ++lineno;
    std::string line = raw;
    const std::size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw FormatError("config line " + std::to_string(lineno) + ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw FormatError("config line " + std::to_string(lineno) + ": empty key");
    }
    ini.values[section + "." + key] = value;
  }
  return ini;
}

class IniReader {
 public:
  explicit IniReader(IniData data) : data_(std::move(data)) {}

  bool has(const std::string& key) const { return data_.values.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) {
    auto it = data_.values.find(key);
    if (it == data_.values.end()) return fallback;
    seen_.insert(key);
    return it->second;
  }
  long integer(const std::string& key, long fallback) {
    auto it = data_.values.find(key);
    if (it == data_.values.end()) return fallback;
    seen_.insert(key);
    return io::parse_long(it->second, "config field " + key);
  }
  double real(const std::string& key, double fallback) {
    auto it = data_.values.find(key);
    if (it == data_.values.end()) return fallback;
    seen_.insert(key);
    return io::parse_double(it->second, "config field " + key);
  }
  bool boolean(const std::string& key, bool fallback) {
    auto it = data_.values.find(key);
    if (it == data_.values.end()) return fallback;
    seen_.insert(key);
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw FormatError("config field " + key + ": expected true/false");
  }
  void check_unknown() const {
    for (const auto& [key, value] : data_.values) {
      if (!seen_.count(key)) {
        throw FormatError("config: unknown field '" + key + "'");
      }
    }
  }

 private:
  IniData data_;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  IniReader r(parse_ini(text));
  ExperimentConfig c;
  c.seed = static_cast<std::uint64_t>(r.integer("experiment.seed", static_cast<long>(c.seed)));
  c.clients = static_cast<int>(r.integer("experiment.clients", c.clients));
  c.servers = static_cast<int>(r.integer("experiment.servers", c.servers));
  c.capacity = static_cast<int>(r.integer("experiment.capacity", c.capacity));
  c.horizon_blocks = static_cast<int>(r.integer("experiment.horizon_blocks", c.horizon_blocks));
  c.t1 = static_cast<int>(r.integer("experiment.t1", c.t1));
  c.t2 = static_cast<int>(r.integer("experiment.t2", c.t2));
  c.parallel = r.boolean("experiment.parallel", c.parallel);

  c.dataset_kind = r.str("dataset.kind", c.dataset_kind);
  c.classes = static_cast<int>(r.integer("dataset.classes", c.classes));
  c.dim = static_cast<int>(r.integer("dataset.dim", c.dim));
  c.spread = r.real("dataset.spread", c.spread);
  c.test_count = static_cast<int>(r.integer("dataset.test_count", c.test_count));
  c.idx_images = r.str("dataset.images", c.idx_images);
  c.idx_labels = r.str("dataset.labels", c.idx_labels);
  c.idx_test_images = r.str("dataset.test_images", c.idx_test_images);
  c.idx_test_labels = r.str("dataset.test_labels", c.idx_test_labels);

  c.partition_policy = r.str("partition.policy", c.partition_policy);
  c.concentration = r.real("partition.concentration", c.concentration);
  c.shard_size = static_cast<int>(r.integer("partition.shard_size", c.shard_size));

  c.model_kind = r.str("model.kind", c.model_kind);
  c.hidden = static_cast<int>(r.integer("model.hidden", c.hidden));

  c.lr = r.real("train.lr", c.lr);
  c.momentum = r.real("train.momentum", c.momentum);
  c.batch = static_cast<int>(r.integer("train.batch", c.batch));

  c.degraded_fraction = r.real("degradation.fraction", c.degraded_fraction);
  c.onset = static_cast<int>(r.integer("degradation.onset", c.onset));
  c.noise_start = r.real("degradation.noise_start", c.noise_start);
  c.noise_end = r.real("degradation.noise_end", c.noise_end);
  c.noise_slope = r.real("degradation.noise_slope", c.noise_slope);
  c.noise_kind = r.str("degradation.noise_kind", c.noise_kind);
  c.loss_start = r.real("degradation.loss_start", c.loss_start);
  c.loss_end = r.real("degradation.loss_end", c.loss_end);
  c.loss_slope = r.real("degradation.loss_slope", c.loss_slope);

  c.states = static_cast<int>(r.integer("ahsmm.states", c.states));
  c.max_duration = static_cast<int>(r.integer("ahsmm.max_duration", c.max_duration));
  c.fit_cadence = static_cast<int>(r.integer("ahsmm.fit_cadence", c.fit_cadence));
  c.fit_iters = static_cast<int>(r.integer("ahsmm.fit_iters", c.fit_iters));
  c.fit_tol = r.real("ahsmm.fit_tol", c.fit_tol);
  c.min_history = static_cast<int>(r.integer("ahsmm.min_history", c.min_history));
  c.delivery_window = static_cast<int>(r.integer("ahsmm.delivery_window", c.delivery_window));
  c.obs_warmup = static_cast<int>(r.integer("ahsmm.obs_warmup", c.obs_warmup));

  c.theta = r.real("trust.theta", c.theta);
  c.t_life = r.real("trust.t_life", c.t_life);

  c.scheduler = r.str("scheduler.kind", c.scheduler);
  c.order = r.str("scheduler.order", c.order);
  c.resched_cadence = static_cast<int>(r.integer("scheduler.resched_cadence", c.resched_cadence));

  c.out_dir = r.str("output.dir", c.out_dir);

  r.check_unknown();
  c.validate();
  return c;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw InvalidInputError("config: file does not exist: " + path.string());
  }
  return parse_config_text(io::read_file(path));
}

std::string config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["experiment"] = {{"seed", c.seed},       {"clients", c.clients},
                     {"servers", c.servers}, {"capacity", c.capacity},
                     {"horizon_blocks", c.horizon_blocks}, {"t1", c.t1},
                     {"t2", c.t2},           {"parallel", c.parallel}};
  j["dataset"] = {{"kind", c.dataset_kind},   {"classes", c.classes},
                  {"dim", c.dim},             {"spread", c.spread},
                  {"test_count", c.test_count}, {"images", c.idx_images},
                  {"labels", c.idx_labels},   {"test_images", c.idx_test_images},
                  {"test_labels", c.idx_test_labels}};
  j["partition"] = {{"policy", c.partition_policy},
                    {"concentration", c.concentration},
                    {"shard_size", c.shard_size}};
  j["model"] = {{"kind", c.model_kind}, {"hidden", c.hidden}};
  j["train"] = {{"lr", c.lr}, {"momentum", c.momentum}, {"batch", c.batch}};
  j["degradation"] = {{"fraction", c.degraded_fraction}, {"onset", c.onset},
                      {"noise_start", c.noise_start},    {"noise_end", c.noise_end},
                      {"noise_slope", c.noise_slope},    {"noise_kind", c.noise_kind},
                      {"loss_start", c.loss_start},
                      {"loss_end", c.loss_end},          {"loss_slope", c.loss_slope}};
  j["ahsmm"] = {{"states", c.states},           {"max_duration", c.max_duration},
                {"fit_cadence", c.fit_cadence}, {"fit_iters", c.fit_iters},
                {"fit_tol", c.fit_tol},         {"min_history", c.min_history},
                {"delivery_window", c.delivery_window},
                {"obs_warmup", c.obs_warmup}};
  j["trust"] = {{"theta", c.theta}, {"t_life", c.t_life}};
  j["scheduler"] = {{"kind", c.scheduler},
                    {"order", c.order},
                    {"resched_cadence", c.resched_cadence}};
  j["output"] = {{"dir", c.out_dir}};
  return j.dump(2);
}

ExperimentConfig config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("config JSON parse error: ") + e.what());
  }
  try {
    ExperimentConfig c;
    const auto& ex = j.at("experiment");
    c.seed = ex.at("seed").get<std::uint64_t>();
    c.clients = ex.at("clients").get<int>();
    c.servers = ex.at("servers").get<int>();
    c.capacity = ex.at("capacity").get<int>();
    c.horizon_blocks = ex.at("horizon_blocks").get<int>();
    c.t1 = ex.at("t1").get<int>();
    c.t2 = ex.at("t2").get<int>();
    c.parallel = ex.at("parallel").get<bool>();
    const auto& ds = j.at("dataset");
    c.dataset_kind = ds.at("kind").get<std::string>();
    c.classes = ds.at("classes").get<int>();
    c.dim = ds.at("dim").get<int>();
    c.spread = ds.at("spread").get<double>();
    c.test_count = ds.at("test_count").get<int>();
    c.idx_images = ds.at("images").get<std::string>();
    c.idx_labels = ds.at("labels").get<std::string>();
    c.idx_test_images = ds.at("test_images").get<std::string>();
    c.idx_test_labels = ds.at("test_labels").get<std::string>();
    const auto& pt = j.at("partition");
    c.partition_policy = pt.at("policy").get<std::string>();
    c.concentration = pt.at("concentration").get<double>();
    c.shard_size = pt.at("shard_size").get<int>();
    const auto& mo = j.at("model");
    c.model_kind = mo.at("kind").get<std::string>();
    c.hidden = mo.at("hidden").get<int>();
    const auto& tr = j.at("train");
    c.lr = tr.at("lr").get<double>();
    c.momentum = tr.at("momentum").get<double>();
    c.batch = tr.at("batch").get<int>();
    const auto& dg = j.at("degradation");
    c.degraded_fraction = dg.at("fraction").get<double>();
    c.onset = dg.at("onset").get<int>();
    c.noise_start = dg.at("noise_start").get<double>();
    c.noise_end = dg.at("noise_end").get<double>();
    c.noise_slope = dg.at("noise_slope").get<double>();
    c.noise_kind = dg.at("noise_kind").get<std::string>();
    c.loss_start = dg.at("loss_start").get<double>();
    c.loss_end = dg.at("loss_end").get<double>();
    c.loss_slope = dg.at("loss_slope").get<double>();
    const auto& ah = j.at("ahsmm");
    c.states = ah.at("states").get<int>();
    c.max_duration = ah.at("max_duration").get<int>();
    c.fit_cadence = ah.at("fit_cadence").get<int>();
    c.fit_iters = ah.at("fit_iters").get<int>();
    c.fit_tol = ah.at("fit_tol").get<double>();
    c.min_history = ah.at("min_history").get<int>();
    c.delivery_window = ah.at("delivery_window").get<int>();
    c.obs_warmup = ah.at("obs_warmup").get<int>();
    const auto& tu = j.at("trust");
    c.theta = tu.at("theta").get<double>();
    c.t_life = tu.at("t_life").get<double>();
    const auto& sc = j.at("scheduler");
    c.scheduler = sc.at("kind").get<std::string>();
    c.order = sc.at("order").get<std::string>();
    c.resched_cadence = sc.at("resched_cadence").get<int>();
    c.out_dir = j.at("output").at("dir").get<std::string>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config JSON: ") + e.what());
  }
}

bool config_equivalent(const ExperimentConfig& a, const ExperimentConfig& b) {
  return config_to_json(a) == config_to_json(b);
}

}  // namespace trail::cfg
