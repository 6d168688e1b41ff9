#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "trifusion/captioner.hpp"
#include "trifusion/config.hpp"
#include "trifusion/params.hpp"

namespace trifusion {

// File layout: "TFN1", u64 little-endian header length, JSON header
// {config, vocab, step, tensors: [{name, shape, offset}]}, then the tensors
// as little-endian float64, offsets counted in bytes from the payload start.
struct CheckpointData {
    ConfigMap config;
    std::vector<std::string> vocab;
    std::uint64_t step = 0;
    NamedTensors tensors;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
// Bad magic, truncated payloads or an inconsistent manifest raise IntegrityError.
CheckpointData read_checkpoint(const std::filesystem::path& path);

struct LoadedModel {
    RunConfig config;
    CaptionModel model;
    AdamState adam;
};

// Parameters under their canonical names, Adam moments under "adam.m/<name>"
// and "adam.v/<name>", normalization under "normalization.mean|std".
void save_model(const std::filesystem::path& path, const RunConfig& config, const CaptionModel& model,
                const AdamState& adam);
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace trifusion
