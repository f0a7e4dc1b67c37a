#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "distnet/exit_runtime.hpp"
#include "distnet/training.hpp"

namespace distnet {

/// printf("%.9g"); NaN prints as "nan".
std::string format_number(double value);

/// Writes sweep.csv (`threshold,lambda,bandwidth,accuracy`), pareto.csv
/// (same columns, front only) and stages.json into `directory`, creating it
/// if needed.
void emit_report(const std::vector<SweepPoint>& points, const std::vector<StageReport>& stages,
                 const std::filesystem::path& directory);

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path);
std::vector<SweepPoint> read_sweep_csv(const std::filesystem::path& path);

std::string stage_reports_json(const std::vector<StageReport>& stages);
void write_stage_reports(const std::vector<StageReport>& stages, const std::filesystem::path& path);
std::vector<StageReport> read_stage_reports(const std::filesystem::path& path);

}  // namespace distnet
