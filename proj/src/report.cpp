#include "distnet/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "distnet/error.hpp"

namespace distnet {

using nlohmann::json;

std::string format_number(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

namespace {

// Rounds to 9 significant digits so the JSON writer's shortest round-trip
// form prints at most that many.
json number(double value) {
  if (!std::isfinite(value)) return nullptr;
  return std::stod(format_number(value));
}

double from_json(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

json to_json(const StageReport& r) {
  json j;
  j["stage"] = r.stage;
  j["epochs_run"] = r.epochs_run;
  j["best_val_loss"] = number(r.best_val_loss);
  json losses = json::array();
  for (double v : r.val_losses) losses.push_back(number(v));
  j["val_losses"] = losses;
  j["train_accuracy"] = number(r.train_accuracy);
  j["val_accuracy"] = number(r.val_accuracy);
  j["test_accuracy"] = number(r.test_accuracy);
  j["wall_seconds"] = number(r.wall_seconds);
  json groups = json::array();
  for (const auto& g : r.lr_groups) groups.push_back({{"name", g.name}, {"lr", number(g.lr)}, {"params", g.params}});
  j["lr_groups"] = groups;
  j["frozen"] = r.frozen;
  json parts = json::array();
  for (const auto& p : r.parts) parts.push_back(to_json(p));
  j["parts"] = parts;
  return j;
}

StageReport stage_from_json(const json& j) {
  StageReport r;
  r.stage = j.at("stage").get<std::string>();
  r.epochs_run = j.at("epochs_run").get<std::size_t>();
  r.best_val_loss = from_json(j.at("best_val_loss"));
  for (const auto& v : j.at("val_losses")) r.val_losses.push_back(from_json(v));
  r.train_accuracy = from_json(j.at("train_accuracy"));
  r.val_accuracy = from_json(j.at("val_accuracy"));
  r.test_accuracy = from_json(j.at("test_accuracy"));
  r.wall_seconds = from_json(j.at("wall_seconds"));
  for (const auto& g : j.at("lr_groups")) {
    r.lr_groups.push_back({g.at("name").get<std::string>(), static_cast<float>(from_json(g.at("lr"))),
                           g.at("params").get<std::vector<std::string>>()});
  }
  r.frozen = j.at("frozen").get<std::vector<std::string>>();
  for (const auto& p : j.at("parts")) r.parts.push_back(stage_from_json(p));
  return r;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  return out;
}

}  // namespace

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "threshold,lambda,bandwidth,accuracy\n";
  for (const auto& p : points) {
    out << format_number(p.threshold) << ',' << format_number(p.lambda) << ',' << format_number(p.bandwidth) << ','
        << format_number(p.accuracy) << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

std::vector<SweepPoint> read_sweep_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "threshold,lambda,bandwidth,accuracy") {
    fail(ErrorKind::Format, path.string() + ": expected header 'threshold,lambda,bandwidth,accuracy'");
  }
  std::vector<SweepPoint> points;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    SweepPoint p;
    char extra = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf%c", &p.threshold, &p.lambda, &p.bandwidth, &p.accuracy, &extra) != 4) {
      fail(ErrorKind::Format, path.string() + ":" + std::to_string(line_no) + ": expected 4 numbers");
    }
    points.push_back(p);
  }
  return points;
}

std::string stage_reports_json(const std::vector<StageReport>& stages) {
  json j = json::object();
  json list = json::array();
  for (const auto& s : stages) list.push_back(to_json(s));
  j["stages"] = list;
  return j.dump(2) + "\n";
}

void write_stage_reports(const std::vector<StageReport>& stages, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << stage_reports_json(stages);
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

std::vector<StageReport> read_stage_reports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  try {
    json j = json::parse(in);
    std::vector<StageReport> out;
    for (const auto& s : j.at("stages")) out.push_back(stage_from_json(s));
    return out;
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
}

void emit_report(const std::vector<SweepPoint>& points, const std::vector<StageReport>& stages,
                 const std::filesystem::path& directory) {
  if (points.empty()) fail(ErrorKind::Config, "report needs at least one sweep point");
  if (stages.empty()) fail(ErrorKind::Config, "report needs at least one stage report");
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + directory.string() + ": " + ec.message());
  write_sweep_csv(points, directory / "sweep.csv");
  write_sweep_csv(pareto_front(points), directory / "pareto.csv");
  write_stage_reports(stages, directory / "stages.json");
}

}  // namespace distnet
