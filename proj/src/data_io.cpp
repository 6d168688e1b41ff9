#include "trifusion/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "trifusion/error.hpp"
#include "trifusion/text_decoder.hpp"

namespace trifusion {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in, const std::string& where) {
    std::string token;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!token.empty()) return token;
            continue;
        }
        token.push_back(static_cast<char>(c));
    }
    if (token.empty()) throw DataError(where + ": truncated netpbm header");
    return token;
}

std::size_t header_number(std::istream& in, const std::string& where) {
    const std::string t = header_token(in, where);
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
        throw DataError(where + ": bad netpbm header field '" + t + "'");
    }
    return std::stoul(t);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

bool is_netpbm(const std::filesystem::path& p) {
    const auto ext = p.extension().string();
    return ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

}  // namespace

Tensor read_netpbm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    const std::string where = path.string();
    if (!in) throw DataError("cannot open image " + where);
    const std::string magic = header_token(in, where);
    std::size_t channels = 0;
    if (magic == "P5") {
        channels = 1;
    } else if (magic == "P6") {
        channels = 3;
    } else {
        throw DataError(where + ": unsupported netpbm magic '" + magic + "' (need P5 or P6)");
    }
    const std::size_t width = header_number(in, where);
    const std::size_t height = header_number(in, where);
    const std::size_t maxval = header_number(in, where);
    if (width == 0 || height == 0) throw DataError(where + ": empty image");
    if (maxval == 0 || maxval > 255) {
        throw DataError(where + ": maxval " + std::to_string(maxval) + " is not 8-bit");
    }
    // header_token consumed the single whitespace byte after maxval.
    std::vector<unsigned char> raw(width * height * channels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw DataError(where + ": pixel data truncated");
    }
    std::vector<double> values(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        values[i] = static_cast<double>(raw[i]) / static_cast<double>(maxval);
    }
    return Tensor::from({height, width, channels}, std::move(values));
}

void write_netpbm(const std::filesystem::path& path, const Tensor& image) {
    std::size_t channels = 1;
    if (image.rank() == 3) {
        channels = image.dim(2);
    } else if (image.rank() != 2) {
        throw ShapeError("write_netpbm: expected H x W or H x W x ch, got " + shape_string(image.shape()));
    }
    if (channels != 1 && channels != 3) {
        throw ShapeError("write_netpbm: " + std::to_string(channels) + " channels (need 1 or 3)");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image " + path.string());
    out << (channels == 1 ? "P5" : "P6") << '\n' << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
    std::vector<unsigned char> raw(image.size());
    const auto data = image.data();
    for (std::size_t i = 0; i < raw.size(); ++i) {
        raw[i] = static_cast<unsigned char>(std::lround(255.0 * std::clamp(data[i], 0.0, 1.0)));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

std::string to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "val") return Split::val;
    if (text == "test") return Split::test;
    throw ConfigError("unknown split '" + text + "'");
}

void SplitRatios::validate() const {
    for (double r : {train, val, test}) {
        if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("split ratios must be finite and >= 0");
    }
    if (!(train + val + test > 0.0)) throw ConfigError("split ratios sum to zero");
}

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::vector<Split> assign_splits(const std::vector<std::string>& names, const SplitRatios& ratios) {
    ratios.validate();
    const std::size_t n = names.size();
    const double total = ratios.train + ratios.val + ratios.test;
    const std::array<double, 3> share{ratios.train / total, ratios.val / total, ratios.test / total};
    std::array<std::size_t, 3> quota{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        const double exact = share[s] * static_cast<double>(n);
        quota[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        remainder[s] = exact - static_cast<double>(quota[s]);
        assigned += quota[s];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t i = 0; assigned < n; i = (i + 1) % 3, ++assigned) ++quota[order[i]];

    std::vector<std::size_t> rank(n);
    std::iota(rank.begin(), rank.end(), 0);
    std::sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
        const auto ha = fnv1a(names[a]), hb = fnv1a(names[b]);
        return ha != hb ? ha < hb : names[a] < names[b];
    });
    std::vector<Split> splits(n, Split::train);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t k = 0; k < quota[s]; ++k) splits[rank[pos++]] = static_cast<Split>(s);
    }
    return splits;
}

std::vector<std::size_t> CaptionDataset::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].split == split) out.push_back(i);
    }
    return out;
}

CaptionDataset load_dataset(const std::filesystem::path& image_dir,
                            const std::filesystem::path& captions, const SplitRatios& ratios) {
    std::ifstream in(captions, std::ios::binary);
    if (!in) throw DataError("cannot read captions file " + captions.string());
    std::map<std::string, std::vector<std::string>> grouped;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto tab = line.find('\t');
        const std::string where = captions.string() + ":" + std::to_string(line_no);
        if (tab == std::string::npos) throw DataError(where + ": expected filename<TAB>caption");
        std::string name = trim(line.substr(0, tab));
        const std::string caption = trim(line.substr(tab + 1));
        if (const auto hash = name.rfind('#'); hash != std::string::npos && hash + 1 < name.size() &&
            std::all_of(name.begin() + static_cast<std::ptrdiff_t>(hash) + 1, name.end(),
                        [](char c) { return c >= '0' && c <= '9'; })) {
            name.resize(hash);
        }
        if (name.empty()) throw DataError(where + ": empty file name");
        if (tokenize(caption).empty()) throw DataError(where + ": empty caption");
        grouped[name].push_back(caption);
    }
    if (grouped.empty()) throw DataError("captions file " + captions.string() + " has no entries");

    CaptionDataset ds;
    std::vector<std::string> names;
    for (auto& [name, caps] : grouped) {
        const auto path = image_dir / name;
        if (!std::filesystem::is_regular_file(path)) {
            throw DataError("missing image file " + path.string());
        }
        if (!is_netpbm(path)) {
            throw DataError(path.string() + ": only PGM/PPM images are supported; convert first");
        }
        ds.records.push_back({name, read_netpbm(path), std::move(caps), Split::train});
        names.push_back(name);
    }
    const auto splits = assign_splits(names, ratios);
    for (std::size_t i = 0; i < splits.size(); ++i) ds.records[i].split = splits[i];
    return ds;
}

DatasetStats compute_stats(const CaptionDataset& ds, std::ostream* warnings) {
    const auto train = ds.indices(Split::train);
    if (train.empty()) throw DataError("compute_stats: training split is empty");
    const std::size_t ch = ds.records[train.front()].image.dim(2);
    std::vector<double> sum(ch, 0.0);
    std::size_t count = 0;
    for (std::size_t i : train) {
        const auto& img = ds.records[i].image;
        if (img.rank() != 3 || img.dim(2) != ch) {
            throw DataError("compute_stats: image " + ds.records[i].name + " has shape " +
                            shape_string(img.shape()) + ", other images have " + std::to_string(ch) +
                            " channels");
        }
        const auto d = img.data();
        for (std::size_t k = 0; k < d.size(); ++k) sum[k % ch] += d[k];
        count += d.size() / ch;
    }
    DatasetStats out;
    out.stats.mean.resize(ch);
    for (std::size_t c = 0; c < ch; ++c) out.stats.mean[c] = sum[c] / static_cast<double>(count);
    std::vector<double> sq(ch, 0.0);
    for (std::size_t i : train) {
        const auto d = ds.records[i].image.data();
        for (std::size_t k = 0; k < d.size(); ++k) {
            const double dev = d[k] - out.stats.mean[k % ch];
            sq[k % ch] += dev * dev;
        }
    }
    out.stats.stddev.resize(ch);
    out.zero_variance.resize(ch);
    for (std::size_t c = 0; c < ch; ++c) {
        const double sd = std::sqrt(sq[c] / static_cast<double>(count));
        out.zero_variance[c] = sd == 0.0;
        out.stats.stddev[c] = sd == 0.0 ? 1.0 : sd;
        if (out.zero_variance[c] && warnings) {
            *warnings << "warning: channel " << c << " has zero variance; std clamped to 1\n";
        }
    }
    return out;
}

const std::vector<std::string>& synthetic_colors() {
    static const std::vector<std::string> colors{"red", "green", "blue", "yellow", "cyan", "magenta"};
    return colors;
}

const std::vector<std::string>& synthetic_shapes() {
    static const std::vector<std::string> shapes{"square", "frame", "cross", "bar"};
    return shapes;
}

const std::vector<std::array<double, 3>>& synthetic_palette() {
    static const std::vector<std::array<double, 3>> palette{
        {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {0, 1, 1}, {1, 0, 1}};
    return palette;
}

std::string position_name(std::size_t row, std::size_t col, std::size_t grid) {
    if (grid == 1) return "center";
    if (grid == 2) return std::string(row == 0 ? "top" : "bottom") + " " + (col == 0 ? "left" : "right");
    if (grid == 3) {
        static const char* rows[] = {"top", "middle", "bottom"};
        static const char* cols[] = {"left", "center", "right"};
        return std::string(rows[row]) + " " + cols[col];
    }
    return "row " + std::to_string(row) + " column " + std::to_string(col);
}

std::string scene_caption(const SyntheticScene& scene, std::size_t grid) {
    return "a " + synthetic_colors().at(scene.color) + " " + synthetic_shapes().at(scene.shape) + " at " +
           position_name(scene.row, scene.col, grid);
}

std::optional<SyntheticScene> parse_scene_caption(const std::string& caption, std::size_t grid) {
    const auto words = tokenize(caption);
    if (words.size() < 5 || words[0] != "a" || words[3] != "at") return std::nullopt;
    const auto& colors = synthetic_colors();
    const auto& shapes = synthetic_shapes();
    const auto ci = std::find(colors.begin(), colors.end(), words[1]);
    const auto si = std::find(shapes.begin(), shapes.end(), words[2]);
    if (ci == colors.end() || si == shapes.end()) return std::nullopt;
    std::string where;
    for (std::size_t i = 4; i < words.size(); ++i) where += (i > 4 ? " " : "") + words[i];
    for (std::size_t r = 0; r < grid; ++r) {
        for (std::size_t c = 0; c < grid; ++c) {
            if (position_name(r, c, grid) == where) {
                return SyntheticScene{static_cast<std::size_t>(ci - colors.begin()),
                                      static_cast<std::size_t>(si - shapes.begin()), r, c};
            }
        }
    }
    return std::nullopt;
}

Tensor render_scene(const SyntheticScene& scene, std::size_t grid) {
    const std::size_t side = grid * kSyntheticCell;
    std::vector<double> px(side * side * 3, 0.0);
    const auto& rgb = synthetic_palette().at(scene.color);
    // Shapes live in the 6x6 interior (offsets 1..6) of an 8x8 cell.
    auto inside = [&](std::size_t y, std::size_t x) {
        const bool interior = y >= 1 && y <= 6 && x >= 1 && x <= 6;
        if (!interior) return false;
        switch (scene.shape) {
            case 0: return true;
            case 1: return y == 1 || y == 6 || x == 1 || x == 6;
            case 2: return y == 3 || y == 4 || x == 3 || x == 4;
            default: return y == 3 || y == 4;
        }
    };
    for (std::size_t y = 0; y < kSyntheticCell; ++y) {
        for (std::size_t x = 0; x < kSyntheticCell; ++x) {
            if (!inside(y, x)) continue;
            const std::size_t py = scene.row * kSyntheticCell + y;
            const std::size_t pxl = scene.col * kSyntheticCell + x;
            for (std::size_t c = 0; c < 3; ++c) px[(py * side + pxl) * 3 + c] = rgb[c];
        }
    }
    return Tensor::from({side, side, 3}, std::move(px));
}

CaptionDataset make_synthetic(std::size_t n, std::size_t grid, std::uint64_t seed,
                              const SplitRatios& ratios) {
    if (n < 2) throw ContractError("make_synthetic: need at least 2 images, got " + std::to_string(n));
    if (grid == 0) throw ContractError("make_synthetic: grid must be positive");
    std::vector<SyntheticScene> combos;
    for (std::size_t c = 0; c < synthetic_colors().size(); ++c)
        for (std::size_t s = 0; s < synthetic_shapes().size(); ++s)
            for (std::size_t r = 0; r < grid; ++r)
                for (std::size_t k = 0; k < grid; ++k) combos.push_back({c, s, r, k});
    Rng rng(seed);
    // Fisher-Yates with explicit draws; std::shuffle's output is not portable.
    for (std::size_t i = combos.size(); i > 1; --i) {
        std::swap(combos[i - 1], combos[rng() % i]);
    }
    CaptionDataset ds;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& scene = combos[i % combos.size()];
        char name[32];
        std::snprintf(name, sizeof name, "synthetic_%03zu.ppm", i);
        ds.records.push_back({name, render_scene(scene, grid), {scene_caption(scene, grid)}, Split::train});
        names.emplace_back(name);
    }
    const auto splits = assign_splits(names, ratios);
    for (std::size_t i = 0; i < n; ++i) ds.records[i].split = splits[i];
    return ds;
}

}  // namespace trifusion
