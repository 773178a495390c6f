#pragma once

// Run configuration: an INI file of [section] key = value pairs covering data,
// synthetic generation, model, context, training, losses and evaluation.

#include "hydrofusion/data_pipeline.hpp"
#include "hydrofusion/training.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

namespace hydrofusion {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::optional<std::filesystem::path> csv;  // empty: generate synthetic data
    double train_fraction = 0.7;
    double validation_fraction = 0.15;
    SyntheticConfig synthetic;
    ContextConfig context;
    ModelConfig model;
    TrainConfig train;
    bool physical_units = false;
    std::uint64_t seed = 1;

    RunConfig() { apply_seed(seed); }

    // Unknown sections or keys and malformed values raise ConfigError naming the key.
    static RunConfig load(const std::filesystem::path& path);
    static RunConfig parse(const std::string& text);
    void set(const std::string& section, const std::string& key, const std::string& value);

    // Model, trainer and synthetic seeds all derive from `seed`.
    void apply_seed(std::uint64_t seed);
    void validate() const;

    // Every key with its resolved value, sections in a fixed order.
    std::string to_ini() const;
    // FNV-1a of to_ini(), 16 hex digits.
    std::string hash() const;

    WindowConfig window_config() const;
};

std::string fnv1a_hex(std::string_view bytes);

// Loads the CSV or generates the synthetic series, then splits and windows it.
Dataset build_dataset(const RunConfig& config);

// JSON with the config hash, seeds, command and library/compiler versions.
std::string run_manifest(const RunConfig& config, const std::string& command);

}  // namespace hydrofusion
