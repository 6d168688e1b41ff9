#include "trifusion/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "trifusion/error.hpp"

namespace trifusion {

namespace {

constexpr char kMagic[4] = {'T', 'F', 'N', '1'};

std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
        return r;
    }
    return v;
}

void put_u64(std::string& out, std::uint64_t v) {
    v = to_little(v);
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

std::uint64_t get_u64(const char* p) {
    std::uint64_t v;
    std::memcpy(&v, p, 8);
    return to_little(v);
}

std::vector<double> as_vector(const Tensor& t) {
    const auto d = t.data();
    return {d.begin(), d.end()};
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
    nlohmann::json header;
    header["config"] = data.config;
    header["vocab"] = data.vocab;
    header["step"] = data.step;
    header["tensors"] = nlohmann::json::array();
    std::string payload;
    for (const auto& [name, t] : data.tensors) {
        header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
        for (double v : t.data()) put_u64(payload, std::bit_cast<std::uint64_t>(v));
    }
    const std::string text = header.dump();
    std::string blob(kMagic, 4);
    put_u64(blob, text.size());
    blob += text;
    blob += payload;

    // Write beside the target, then rename, so a crash never leaves half a file.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint " + tmp.string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) throw DataError("short write on checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint " + path.string());
    const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string where = "checkpoint " + path.string();
    if (blob.size() < 12 || std::memcmp(blob.data(), kMagic, 4) != 0) {
        throw IntegrityError(where + ": bad magic (not a TFN1 file)");
    }
    const std::uint64_t header_len = get_u64(blob.data() + 4);
    if (header_len > blob.size() - 12) throw IntegrityError(where + ": header length exceeds file size");
    const char* payload = blob.data() + 12 + header_len;
    const std::size_t payload_len = blob.size() - 12 - header_len;

    CheckpointData data;
    try {
        const auto header = nlohmann::json::parse(blob.begin() + 12,
                                                  blob.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
        data.config = header.at("config").get<ConfigMap>();
        data.vocab = header.at("vocab").get<std::vector<std::string>>();
        data.step = header.at("step").get<std::uint64_t>();
        std::size_t expected = 0;
        for (const auto& entry : header.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::size_t>();
            if (shape.empty() || shape_size(shape) == 0) throw IntegrityError(where + ": tensor " + name + " is empty");
            const std::size_t bytes = shape_size(shape) * 8;
            if (offset != expected || offset + bytes > payload_len) {
                throw IntegrityError(where + ": tensor " + name + " lies outside the payload");
            }
            std::vector<double> values(shape_size(shape));
            for (std::size_t i = 0; i < values.size(); ++i) {
                values[i] = std::bit_cast<double>(get_u64(payload + offset + 8 * i));
            }
            data.tensors.emplace_back(name, Tensor::from(shape, std::move(values)));
            expected = offset + bytes;
        }
        if (expected != payload_len) throw IntegrityError(where + ": trailing bytes after the last tensor");
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(where + ": malformed header: " + e.what());
    }
    return data;
}

void save_model(const std::filesystem::path& path, const RunConfig& config, const CaptionModel& model,
                const AdamState& adam) {
    CheckpointData data;
    data.config = config.to_map();
    data.vocab = model.vocab.tokens();
    data.step = adam.step;
    const auto params = model.parameters();
    for (const auto& p : params) data.tensors.push_back(p);
    if (adam.m.size() == params.size()) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            data.tensors.emplace_back("adam.m/" + params[i].first,
                                      Tensor::from(params[i].second.shape(), adam.m[i]));
            data.tensors.emplace_back("adam.v/" + params[i].first,
                                      Tensor::from(params[i].second.shape(), adam.v[i]));
        }
    }
    const auto& norm = model.encoder.normalization;
    if (!norm.mean.empty()) {
        data.tensors.emplace_back("normalization.mean", Tensor::from({norm.mean.size()}, norm.mean));
        data.tensors.emplace_back("normalization.std", Tensor::from({norm.stddev.size()}, norm.stddev));
    }
    write_checkpoint(path, data);
}

LoadedModel load_model(const std::filesystem::path& path) {
    CheckpointData data = read_checkpoint(path);
    const std::string where = "checkpoint " + path.string();
    std::map<std::string, Tensor> stored;
    for (auto& [name, t] : data.tensors) {
        if (!stored.emplace(name, t).second) throw IntegrityError(where + ": duplicate tensor " + name);
    }
    LoadedModel out;
    try {
        out.config = RunConfig::from_map(data.config);
        out.model = init_model(out.config.model, Vocabulary(data.vocab), out.config.train.temperature,
                               out.config.train.seed);
    } catch (const IntegrityError&) {
        throw;
    } catch (const Error& e) {
        throw IntegrityError(where + ": stored config or vocabulary rejected: " + e.what());
    }
    auto take = [&](const std::string& name, const Shape& shape) -> const Tensor* {
        auto it = stored.find(name);
        if (it == stored.end()) return nullptr;
        if (it->second.shape() != shape) {
            throw IntegrityError(where + ": tensor " + name + " has shape " + shape_string(it->second.shape()) +
                                 ", model expects " + shape_string(shape));
        }
        return &it->second;
    };
    const auto params = out.model.parameters();
    out.adam = AdamState::for_params(params);
    out.adam.step = data.step;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = params[i];
        const Tensor* src = take(name, t.shape());
        if (!src) throw IntegrityError(where + ": missing tensor " + name);
        Tensor dst = t;
        std::ranges::copy(src->data(), dst.mutable_data().begin());
        if (const Tensor* m = take("adam.m/" + name, t.shape())) std::ranges::copy(m->data(), out.adam.m[i].begin());
        if (const Tensor* v = take("adam.v/" + name, t.shape())) std::ranges::copy(v->data(), out.adam.v[i].begin());
    }
    auto& norm = out.model.encoder.normalization;
    const Shape channels{out.config.model.encoder.image_channels};
    const Tensor* mean = take("normalization.mean", channels);
    const Tensor* stddev = take("normalization.std", channels);
    if (static_cast<bool>(mean) != static_cast<bool>(stddev)) {
        throw IntegrityError(where + ": normalization needs both mean and std");
    }
    if (mean) {
        norm.mean = as_vector(*mean);
        norm.stddev = as_vector(*stddev);
    }
    return out;
}

}  // namespace trifusion
