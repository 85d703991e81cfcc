// Subcommands of the pcpetl executable and the helpers behind them.
#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "pcpetl/config.hpp"
#include "pcpetl/gradcheck.hpp"

namespace pcpetl {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

// Runs one command line; never throws. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// <dir>/{train,test}/NNNNN.pcb, manifest.txt and spec.cfg.
void write_dataset_dir(const std::filesystem::path& dir, const Dataset& data, const RunConfig& cfg);
Dataset load_dataset_dir(const std::filesystem::path& dir);

// Finite-difference checks of every differentiable op and of a complete
// model (L=2, d=16, h=2, r=4, N=8) under DAPT and full fine-tuning.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed = 0, double tolerance = 1e-4);

// Rows `batch,layer,mean_scale,adjusted_ratio` (layers 1-based).
std::string scale_stats_csv(const std::vector<std::vector<ScaleRecord>>& batches);

}  // namespace pcpetl
