#include "trifusion/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>

#include "trifusion/error.hpp"

namespace trifusion {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
    return out;
}

std::vector<double> to_doubles(const std::string& key, const std::string& v) {
    std::vector<double> out;
    if (trim(v).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto comma = v.find(',', start);
        out.push_back(to_double(key, trim(v.substr(start, comma - start))));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt(const std::vector<double>& vs) {
    std::string s;
    for (double v : vs) s += (s.empty() ? "" : ",") + fmt(v);
    return s;
}

struct Field {
    bool architecture;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
};

template <typename Get, typename Put>
Field size_field(bool arch, Get get, Put put) {
    return {arch, [get](const RunConfig& c) { return std::to_string(get(c)); },
            [put](RunConfig& c, const std::string& k, const std::string& v) { put(c, to_size(k, v)); }};
}

template <typename Get, typename Put>
Field double_field(Get get, Put put) {
    return {false, [get](const RunConfig& c) { return fmt(get(c)); },
            [put](RunConfig& c, const std::string& k, const std::string& v) { put(c, to_double(k, v)); }};
}

const std::map<std::string, Field>& fields() {
    using C = RunConfig;
    static const std::map<std::string, Field> table{
        {"image_size", size_field(true, [](const C& c) { return c.model.encoder.image_size; },
                                  [](C& c, std::size_t v) { c.model.encoder.image_size = v; })},
        {"patch_size", size_field(true, [](const C& c) { return c.model.encoder.patch_size; },
                                  [](C& c, std::size_t v) { c.model.encoder.patch_size = v; })},
        {"image_channels", size_field(true, [](const C& c) { return c.model.encoder.image_channels; },
                                      [](C& c, std::size_t v) { c.model.encoder.image_channels = v; })},
        {"channels", size_field(true, [](const C& c) { return c.model.encoder.channels; },
                                [](C& c, std::size_t v) {
                                    c.model.encoder.channels = v;
                                    c.model.decoder.channels = v;
                                })},
        {"heads", size_field(true, [](const C& c) { return c.model.encoder.heads; },
                             [](C& c, std::size_t v) { c.model.encoder.heads = v; })},
        {"windows", size_field(true, [](const C& c) { return c.model.encoder.windows; },
                               [](C& c, std::size_t v) { c.model.encoder.windows = v; })},
        {"groups", size_field(true, [](const C& c) { return c.model.encoder.groups; },
                              [](C& c, std::size_t v) { c.model.encoder.groups = v; })},
        {"depth", size_field(true, [](const C& c) { return c.model.encoder.depth; },
                             [](C& c, std::size_t v) { c.model.encoder.depth = v; })},
        {"ffn_mult", size_field(true, [](const C& c) { return c.model.encoder.ffn_mult; },
                                [](C& c, std::size_t v) {
                                    c.model.encoder.ffn_mult = v;
                                    c.model.decoder.ffn_mult = v;
                                })},
        {"attention",
         {true, [](const C& c) { return to_string(c.model.encoder.mode); },
          [](C& c, const std::string&, const std::string& v) { c.model.encoder.mode = parse_attention_mode(v); }}},
        {"window_layout",
         {true, [](const C& c) { return to_string(c.model.encoder.window_layout); },
          [](C& c, const std::string&, const std::string& v) {
              c.model.encoder.window_layout = parse_window_layout(v);
          }}},
        {"positional",
         {true, [](const C& c) { return to_string(c.model.encoder.positional); },
          [](C& c, const std::string&, const std::string& v) {
              c.model.encoder.positional = parse_positional_encoding(v);
          }}},
        {"block_arrangement",
         {true, [](const C& c) { return to_string(c.model.encoder.arrangement); },
          [](C& c, const std::string&, const std::string& v) {
              c.model.encoder.arrangement = parse_block_arrangement(v);
          }}},
        {"decoder_layers", size_field(true, [](const C& c) { return c.model.decoder.layers; },
                                      [](C& c, std::size_t v) { c.model.decoder.layers = v; })},
        {"decoder_heads", size_field(true, [](const C& c) { return c.model.decoder.heads; },
                                     [](C& c, std::size_t v) { c.model.decoder.heads = v; })},
        {"max_positions", size_field(true, [](const C& c) { return c.model.decoder.max_positions; },
                                     [](C& c, std::size_t v) { c.model.decoder.max_positions = v; })},
        {"embed_dim", size_field(true, [](const C& c) { return c.model.embed_dim; },
                                 [](C& c, std::size_t v) { c.model.embed_dim = v; })},
        {"epochs", size_field(false, [](const C& c) { return c.train.epochs; },
                              [](C& c, std::size_t v) { c.train.epochs = v; })},
        {"batch_size", size_field(false, [](const C& c) { return c.train.batch_size; },
                                  [](C& c, std::size_t v) { c.train.batch_size = v; })},
        {"lr", double_field([](const C& c) { return c.train.lr; }, [](C& c, double v) { c.train.lr = v; })},
        {"beta1",
         double_field([](const C& c) { return c.train.beta1; }, [](C& c, double v) { c.train.beta1 = v; })},
        {"beta2",
         double_field([](const C& c) { return c.train.beta2; }, [](C& c, double v) { c.train.beta2 = v; })},
        {"adam_eps", double_field([](const C& c) { return c.train.adam_eps; },
                                  [](C& c, double v) { c.train.adam_eps = v; })},
        {"contrastive_weight", double_field([](const C& c) { return c.train.contrastive_weight; },
                                            [](C& c, double v) { c.train.contrastive_weight = v; })},
        {"temperature", double_field([](const C& c) { return c.train.temperature; },
                                     [](C& c, double v) { c.train.temperature = v; })},
        {"seed",
         {false, [](const C& c) { return std::to_string(c.train.seed); },
          [](C& c, const std::string& k, const std::string& v) { c.train.seed = to_u64(k, v); }}},
        {"beam_width", size_field(false, [](const C& c) { return c.train.beam_width; },
                                  [](C& c, std::size_t v) { c.train.beam_width = v; })},
        {"max_len", size_field(false, [](const C& c) { return c.train.max_len; },
                               [](C& c, std::size_t v) { c.train.max_len = v; })},
        {"length_penalty", double_field([](const C& c) { return c.train.length_penalty; },
                                        [](C& c, double v) { c.train.length_penalty = v; })},
        {"dataset",
         {false, [](const C& c) { return c.dataset; },
          [](C& c, const std::string& k, const std::string& v) {
              if (v != "synthetic" && v != "files") {
                  throw ConfigError("config key '" + k + "': expected synthetic or files, got '" + v + "'");
              }
              c.dataset = v;
          }}},
        {"synthetic_n", size_field(false, [](const C& c) { return c.synthetic_n; },
                                   [](C& c, std::size_t v) { c.synthetic_n = v; })},
        {"synthetic_grid", size_field(false, [](const C& c) { return c.synthetic_grid; },
                                      [](C& c, std::size_t v) { c.synthetic_grid = v; })},
        {"synthetic_seed",
         {false, [](const C& c) { return std::to_string(c.synthetic_seed); },
          [](C& c, const std::string& k, const std::string& v) { c.synthetic_seed = to_u64(k, v); }}},
        {"image_dir",
         {false, [](const C& c) { return c.image_dir.string(); },
          [](C& c, const std::string&, const std::string& v) { c.image_dir = v; }}},
        {"captions",
         {false, [](const C& c) { return c.captions.string(); },
          [](C& c, const std::string&, const std::string& v) { c.captions = v; }}},
        {"split_train", double_field([](const C& c) { return c.split.train; },
                                     [](C& c, double v) { c.split.train = v; })},
        {"split_val", double_field([](const C& c) { return c.split.val; },
                                   [](C& c, double v) { c.split.val = v; })},
        {"split_test", double_field([](const C& c) { return c.split.test; },
                                    [](C& c, double v) { c.split.test = v; })},
        {"eval_split",
         {false, [](const C& c) { return to_string(c.eval_split); },
          [](C& c, const std::string&, const std::string& v) { c.eval_split = parse_split(v); }}},
        {"min_freq", size_field(false, [](const C& c) { return c.min_freq; },
                                [](C& c, std::size_t v) { c.min_freq = v; })},
        {"norm_mean",
         {false, [](const C& c) { return fmt(c.norm_mean); },
          [](C& c, const std::string& k, const std::string& v) { c.norm_mean = to_doubles(k, v); }}},
        {"norm_std",
         {false, [](const C& c) { return fmt(c.norm_std); },
          [](C& c, const std::string& k, const std::string& v) { c.norm_std = to_doubles(k, v); }}},
        {"out",
         {false, [](const C& c) { return c.out.string(); },
          [](C& c, const std::string&, const std::string& v) { c.out = v; }}},
    };
    return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto& table = fields();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
        it->second.set(*this, key, trim(value));
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        if (msg.find("'" + key + "'") != std::string::npos) throw;
        throw ConfigError("config key '" + key + "': " + msg);
    }
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    split.validate();
    if (train.max_len + 2 > model.decoder.max_positions) {
        throw ConfigError("max_len " + std::to_string(train.max_len) + " needs max_positions >= " +
                          std::to_string(train.max_len + 2));
    }
    if (dataset == "synthetic") {
        if (synthetic_n < 2) throw ConfigError("synthetic_n must be at least 2");
        if (synthetic_grid == 0) throw ConfigError("synthetic_grid must be positive");
        if (synthetic_grid * kSyntheticCell != model.encoder.image_size) {
            throw ConfigError("synthetic_grid " + std::to_string(synthetic_grid) + " renders " +
                              std::to_string(synthetic_grid * kSyntheticCell) + "px images but image_size is " +
                              std::to_string(model.encoder.image_size));
        }
        if (model.encoder.image_channels != 3) {
            throw ConfigError("image_channels must be 3 for the synthetic dataset");
        }
    } else {
        if (image_dir.empty()) throw ConfigError("image_dir is required when dataset=files");
        if (captions.empty()) throw ConfigError("captions is required when dataset=files");
    }
    if (norm_mean.size() != norm_std.size()) {
        throw ConfigError("norm_mean and norm_std must list the same number of channels");
    }
    if (!norm_mean.empty() && norm_mean.size() != model.encoder.image_channels) {
        throw ConfigError("norm_mean lists " + std::to_string(norm_mean.size()) + " channels, image_channels is " +
                          std::to_string(model.encoder.image_channels));
    }
    for (double s : norm_std) {
        if (!(s > 0.0)) throw ConfigError("norm_std entries must be positive");
    }
    if (min_freq == 0) throw ConfigError("min_freq must be at least 1");
    if (out.empty()) throw ConfigError("out must name a directory");
}

ConfigMap RunConfig::to_map() const {
    ConfigMap m;
    for (const auto& [key, field] : fields()) m[key] = field.get(*this);
    return m;
}

RunConfig RunConfig::from_map(const ConfigMap& values) {
    RunConfig c;
    for (const auto& [k, v] : values) c.set(k, v);
    c.validate();
    return c;
}

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [key, field] : fields()) out.push_back(key);
        return out;
    }();
    return names;
}

bool RunConfig::is_architecture_key(const std::string& key) {
    auto it = fields().find(key);
    return it != fields().end() && it->second.architecture;
}

std::pair<std::string, std::string> split_assignment(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + text + "'");
    std::string key = trim(text.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key in '" + text + "'");
    return {key, trim(text.substr(eq + 1))};
}

ConfigMap parse_config(std::istream& in, const std::string& source) {
    ConfigMap out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        if (trim(line).empty()) continue;
        std::pair<std::string, std::string> kv;
        try {
            kv = split_assignment(line);
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!out.emplace(kv.first, kv.second).second) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": key '" + kv.first + "' repeated");
        }
    }
    return out;
}

ConfigMap read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    return parse_config(in, path.string());
}

}  // namespace trifusion
