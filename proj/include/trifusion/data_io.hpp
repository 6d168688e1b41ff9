#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "trifusion/tensor.hpp"
#include "trifusion/vision_encoder.hpp"

namespace trifusion {

// Binary netpbm: P5 decodes to [H x W x 1], P6 to [H x W x 3], values in [0,1].
// Only 8-bit files (maxval <= 255) are accepted.
Tensor read_netpbm(const std::filesystem::path& path);
// Writes P5 for one channel ([H x W] or [H x W x 1]) and P6 for three.
// Samples are round(255 v) after clamping to [0,1].
void write_netpbm(const std::filesystem::path& path, const Tensor& image);

enum class Split { train, val, test };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;

    void validate() const;
};

// Ranks names by 64-bit FNV-1a hash (name breaks ties) and hands out exact
// quotas: floor(n * ratio) each, leftovers by largest remainder.
std::vector<Split> assign_splits(const std::vector<std::string>& names, const SplitRatios& ratios);

std::uint64_t fnv1a(const std::string& text);

struct CaptionRecord {
    std::string name;  // file name relative to the image directory
    Tensor image;      // H x W x ch in [0,1]
    std::vector<std::string> captions;
    Split split = Split::train;
};

struct CaptionDataset {
    std::vector<CaptionRecord> records;  // sorted by name

    std::vector<std::size_t> indices(Split split) const;
    std::size_t count(Split split) const { return indices(split).size(); }
};

// Captions file lines are "filename<TAB>caption". A Flickr8k-style "#n"
// suffix on the file name is dropped. Blank lines are skipped.
CaptionDataset load_dataset(const std::filesystem::path& image_dir,
                            const std::filesystem::path& captions, const SplitRatios& ratios);

struct DatasetStats {
    NormStats stats;
    std::vector<bool> zero_variance;  // per channel; those stddevs are clamped to 1
};

// Population mean and std per channel over every training pixel. Writes one
// warning line per zero-variance channel to `warnings` when given.
DatasetStats compute_stats(const CaptionDataset& ds, std::ostream* warnings = nullptr);

struct SyntheticScene {
    std::size_t color = 0;
    std::size_t shape = 0;
    std::size_t row = 0;
    std::size_t col = 0;

    bool operator==(const SyntheticScene&) const = default;
};

inline constexpr std::size_t kSyntheticCell = 8;

const std::vector<std::string>& synthetic_colors();
const std::vector<std::string>& synthetic_shapes();
// RGB of each synthetic color, components 0 or 1.
const std::vector<std::array<double, 3>>& synthetic_palette();

std::string position_name(std::size_t row, std::size_t col, std::size_t grid);
std::string scene_caption(const SyntheticScene& scene, std::size_t grid);
std::optional<SyntheticScene> parse_scene_caption(const std::string& caption, std::size_t grid);
// (grid * 8) x (grid * 8) x 3 image, black background, one shape in one cell.
Tensor render_scene(const SyntheticScene& scene, std::size_t grid);

// n scenes drawn without replacement from the seeded shuffle of every
// (color, shape, cell) combination, repeating the cycle past that count.
// Record names are "synthetic_000.ppm", ... and all records go to `ratios`
// splits the same way loaded datasets do.
CaptionDataset make_synthetic(std::size_t n, std::size_t grid, std::uint64_t seed,
                              const SplitRatios& ratios = {1.0, 0.0, 0.0});

}  // namespace trifusion
