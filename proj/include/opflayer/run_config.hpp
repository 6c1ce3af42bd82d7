#pragma once

// JSON run configuration shared by the command-line subcommands.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "opflayer/case_io.hpp"
#include "opflayer/eval.hpp"
#include "opflayer/train.hpp"

namespace opflayer {

/// Invalid or incomplete configuration; reported as a usage error.
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct DatasetSpec {
    std::size_t count = 1000;
    double low = 0.8;
    double high = 1.2;
    double split = 0.8;
    std::uint64_t seed = 42;
    std::optional<std::filesystem::path> path;  // read instead of generating
};

struct ConstantsSpec {
    std::size_t samples = 20;
    std::vector<int> k_r{1, 2, 4, 8};
    StencilConfig stencil;
};

/// Relative paths are resolved against the directory of the config file.
struct RunConfig {
    std::filesystem::path case_path;
    std::optional<std::filesystem::path> output_dir;
    std::optional<std::filesystem::path> references;
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> duals;
    DatasetSpec dataset;
    TrainConfig train;
    ConstantsSpec constants;
};

RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

nlohmann::json solver_to_json(const SolverConfig& s);
SolverConfig solver_from_json(const nlohmann::json& j);

/// Reads dataset.path when set, generates otherwise.
LoadDataset make_dataset(const RunConfig& cfg, const RawCase& rc);

void save_duals(const DualState& duals, const std::filesystem::path& path);
DualState load_duals(const std::filesystem::path& path, const GridModel& grid);

}  // namespace opflayer
