#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include "trifusion/captioner.hpp"
#include "trifusion/data_io.hpp"

namespace trifusion {

using ConfigMap = std::map<std::string, std::string>;

// Everything a command needs, settable through key=value pairs.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    std::string dataset = "synthetic";  // synthetic | files
    std::size_t synthetic_n = 8;
    std::size_t synthetic_grid = 2;
    std::uint64_t synthetic_seed = 7;
    std::filesystem::path image_dir;
    std::filesystem::path captions;
    SplitRatios split;
    Split eval_split = Split::test;
    std::size_t min_freq = 1;
    // External normalization constants; computed from the training split when empty.
    std::vector<double> norm_mean;
    std::vector<double> norm_std;
    std::filesystem::path out = "runs";

    // Unknown keys and unparsable values raise ConfigError naming the key.
    void set(const std::string& key, const std::string& value);
    void validate() const;
    ConfigMap to_map() const;

    static RunConfig from_map(const ConfigMap& values);
    static const std::vector<std::string>& keys();
    // Keys that fix tensor shapes; a checkpoint pins them.
    static bool is_architecture_key(const std::string& key);
};

// key=value lines; '#' starts a comment, blank lines are ignored, repeated
// keys are errors.
ConfigMap parse_config(std::istream& in, const std::string& source);
ConfigMap read_config_file(const std::filesystem::path& path);

// Splits "key=value" into its halves.
std::pair<std::string, std::string> split_assignment(const std::string& text);

}  // namespace trifusion
