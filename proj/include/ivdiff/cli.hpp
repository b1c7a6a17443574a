#pragma once

// Command-line front end. Subcommands:
//
//   gen-data    synthetic surfaces and market series
//   preprocess  quotes or surfaces + market -> prepared dataset (JSON)
//   train       prepared dataset -> checkpoint + loss curve
//   sample      checkpoint + dataset -> generated surfaces per date
//   evaluate    truth surfaces + samples -> metrics CSVs and summary
//   arb-audit   surfaces -> per-date penalty CSV
//
// Exit codes: 0 success, 1 internal error (including training divergence),
// 2 invalid input or usage. The run-config path comes from --config, falling
// back to the IVDIFF_CONFIG environment variable.

#include "ivdiff/arbitrage.hpp"
#include "ivdiff/dataprep.hpp"
#include "ivdiff/evaluation.hpp"
#include "ivdiff/model.hpp"
#include "ivdiff/synthetic.hpp"
#include "ivdiff/training.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace ivdiff {

inline constexpr const char* kConfigEnvVar = "IVDIFF_CONFIG";

struct RunConfig {
    SmoothingConfig smoothing;
    ConditioningConfig conditioning;
    PricingContext pricing;
    UNetConfig unet;
    TrainConfig train;
    SyntheticConfig synthetic;
    std::vector<SliceSpec> slices = default_slices();
    double ci_level = 0.90;
};

/// Parses a run-config document; absent sections keep their defaults and
/// unknown keys are rejected.
RunConfig run_config_from_json_text(const std::string& text, const std::string& source);
/// Loads `path`, or the IVDIFF_CONFIG file when `path` is empty, or defaults.
RunConfig load_run_config(const std::string& path);

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace ivdiff
