#include "distnet/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "distnet/error.hpp"

namespace distnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) fail(ErrorKind::Config, key + ": cannot parse '" + text + "'");
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  fail(ErrorKind::Config, key + ": expected true or false, got '" + text + "'");
}

std::vector<std::uint64_t> parse_seeds(const std::string& key, const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) seeds.push_back(parse_number<std::uint64_t>(key, trim(item)));
  return seeds;
}

template <typename T>
std::string shortest(T value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return shortest(c.*member);
            else return std::to_string(c.*member);
          }};
}

template <typename S, typename T>
Field nested_number(S RunConfig::*outer, T S::*member) {
  return {[outer, member](RunConfig& c, const std::string& k, const std::string& v) {
            (c.*outer).*member = parse_number<T>(k, v);
          },
          [outer, member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return shortest((c.*outer).*member);
            else return std::to_string((c.*outer).*member);
          }};
}

Field bool_field(bool RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_bool(k, v); },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

Field string_field(std::string RunConfig::*member) {
  return {[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"data", string_field(&RunConfig::data)},
      {"test_data", string_field(&RunConfig::test_data)},
      {"test_fraction", number_field(&RunConfig::test_fraction)},
      {"nodes", number_field(&RunConfig::nodes)},
      {"compression", number_field(&RunConfig::compression)},
      {"temporal_filters", number_field(&RunConfig::temporal_filters)},
      {"spatial_filters", number_field(&RunConfig::spatial_filters)},
      {"fusion_hidden", number_field(&RunConfig::fusion_hidden)},
      {"seeds",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.seeds = parse_seeds(k, v); },
        [](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
          return s;
        }}},
      {"sweep_step", number_field(&RunConfig::sweep_step)},
      {"ae_pretrain", bool_field(&RunConfig::ae_pretrain)},
      {"from_scratch", bool_field(&RunConfig::from_scratch)},
      {"subject_finetune", number_field(&RunConfig::subject_finetune)},
      {"workers", number_field(&RunConfig::workers)},
      {"output", string_field(&RunConfig::output)},
      {"train.lr_fresh", nested_number(&RunConfig::train, &TrainConfig::lr_fresh)},
      {"train.lr_finetune", nested_number(&RunConfig::train, &TrainConfig::lr_finetune)},
      {"train.batch_size", nested_number(&RunConfig::train, &TrainConfig::batch_size)},
      {"train.max_epochs", nested_number(&RunConfig::train, &TrainConfig::max_epochs)},
      {"train.patience", nested_number(&RunConfig::train, &TrainConfig::patience)},
      {"train.validation_fraction", nested_number(&RunConfig::train, &TrainConfig::validation_fraction)},
      {"synthetic.grid_rows", nested_number(&RunConfig::synthetic, &SyntheticConfig::grid_rows)},
      {"synthetic.grid_cols", nested_number(&RunConfig::synthetic, &SyntheticConfig::grid_cols)},
      {"synthetic.spacing_cm", nested_number(&RunConfig::synthetic, &SyntheticConfig::spacing_cm)},
      {"synthetic.num_classes", nested_number(&RunConfig::synthetic, &SyntheticConfig::num_classes)},
      {"synthetic.trials_per_class", nested_number(&RunConfig::synthetic, &SyntheticConfig::trials_per_class)},
      {"synthetic.window_len", nested_number(&RunConfig::synthetic, &SyntheticConfig::window_len)},
      {"synthetic.sample_rate", nested_number(&RunConfig::synthetic, &SyntheticConfig::sample_rate)},
      {"synthetic.snr_db", nested_number(&RunConfig::synthetic, &SyntheticConfig::snr_db)},
      {"synthetic.background_gain", nested_number(&RunConfig::synthetic, &SyntheticConfig::background_gain)},
      {"synthetic.reference_gain", nested_number(&RunConfig::synthetic, &SyntheticConfig::reference_gain)},
      {"synthetic.source_depth_cm", nested_number(&RunConfig::synthetic, &SyntheticConfig::source_depth_cm)},
      {"synthetic.subjects", nested_number(&RunConfig::synthetic, &SyntheticConfig::subjects)},
      {"synthetic.seed", nested_number(&RunConfig::synthetic, &SyntheticConfig::seed)},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  if (seeds.empty()) fail(ErrorKind::Config, "seeds must list at least one seed");
  if (nodes < 1) fail(ErrorKind::Config, "nodes must be >= 1");
  if (compression < 1) fail(ErrorKind::Config, "compression must be >= 1");
  if (!(sweep_step > 0.0 && sweep_step <= 1.0)) fail(ErrorKind::Config, "sweep_step must be in (0, 1]");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail(ErrorKind::Config, "test_fraction must be in (0, 1)");
  if (workers < 1) fail(ErrorKind::Config, "workers must be >= 1");
  if (from_scratch && ae_pretrain) fail(ErrorKind::Config, "from_scratch and ae_pretrain are mutually exclusive");
  train.validate();
  if (data == "synthetic") {
    synthetic.validate();
  } else if (!std::filesystem::exists(data)) {
    fail(ErrorKind::Io, "data file not found: " + data);
  }
  if (!test_data.empty() && !std::filesystem::exists(test_data)) {
    fail(ErrorKind::Io, "test data file not found: " + test_data);
  }
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) fail(ErrorKind::Config, "unknown setting '" + key + "'");
  it->second.set(config, key, value);
}

RunConfig parse_run_config(std::istream& in, const std::string& source) {
  RunConfig config;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) fail(ErrorKind::Config, where + "expected 'key = value'");
    try {
      apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(e.kind(), where + e.what());
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open run config " + path.string());
  return parse_run_config(in, path.string());
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(config) + "\n";
  return out;
}

}  // namespace distnet
