#pragma once

#include <string>

#include <json.hpp>

#include "sprune/trainer.hpp"

namespace sprune {

// reads a big-endian IDX image/label file pair into a dataset with pixels in
// [0,1] and labels one-hot over 10 classes
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);

// directory searched for the IDX files by the CLI when no explicit path is
// given; read from this environment variable
inline constexpr const char* kDataDirEnv = "SPRUNE_DATA_DIR";

// isotropic unit-variance Gaussian clusters at seeded random centers;
// n_per_class samples each, classes interleaved
Dataset synth_blobs(int classes, int dim, int n_per_class, std::uint64_t seed);

void save_checkpoint(const std::string& path, const Trainer& trainer);

// rebuilds a trainer mid-run; the stored config echo is used verbatim
Trainer load_checkpoint(const std::string& path);

// read the config echo only
TrainConfig checkpoint_config(const std::string& path);

void emit_metrics(const std::string& path, const std::vector<MetricsRow>& rows);

// epoch-by-epoch gate parameters on a fixed unit grid; pruned units read 0
void emit_theta_trajectory(
    const std::string& path,
    const std::vector<std::vector<std::pair<UnitId, double>>>& snapshots,
    const std::vector<UnitId>& units);

nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);

}  // namespace sprune
