#include <doctest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

#include "support/toy_model.hpp"
#include "trifusion/checkpoint.hpp"
#include "trifusion/error.hpp"

using namespace trifusion;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("trifusion_ckpt_" + std::to_string(std::random_device{}()) + "_" + name);
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    return true;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

RunConfig tiny_run_config() {
    RunConfig c;
    c.model = fixture::tiny_model();
    c.synthetic_grid = 1;
    c.train.max_len = 8;
    c.train.seed = 11;
    return c;
}

}  // namespace

TEST_CASE("raw checkpoints preserve every bit") {
    CheckpointData d;
    d.config = {{"lr", "0.001"}, {"note", "tab\there"}};
    d.vocab = {"<pad>", "<bos>", "<eos>", "<unk>", "red"};
    d.step = 123456789012ull;
    d.tensors.emplace_back("a", Tensor::from({2, 3}, {-0.0, 1e-310, std::numeric_limits<double>::max(), M_PI,
                                                      -1.0 / 3.0, std::numeric_limits<double>::infinity()}));
    d.tensors.emplace_back("b/c", Tensor::scalar(std::nan("")));
    const auto p = temp_file("raw.tfn");
    write_checkpoint(p, d);
    const auto back = read_checkpoint(p);
    CHECK(back.config == d.config);
    CHECK(back.vocab == d.vocab);
    CHECK(back.step == d.step);
    REQUIRE(back.tensors.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back.tensors[i].first == d.tensors[i].first);
        CHECK(back.tensors[i].second.shape() == d.tensors[i].second.shape());
        CHECK(same_bits(back.tensors[i].second.data(), d.tensors[i].second.data()));
    }
    CHECK(slurp(p).substr(0, 4) == "TFN1");
    CHECK_FALSE(fs::exists(p.string() + ".tmp"));
    fs::remove(p);
}

TEST_CASE("damaged checkpoints raise integrity errors") {
    CheckpointData d;
    d.tensors.emplace_back("w", Tensor::from({4}, {1, 2, 3, 4}));
    const auto p = temp_file("bad.tfn");
    write_checkpoint(p, d);
    const std::string good = slurp(p);

    spit(p, "XFN1" + good.substr(4));
    CHECK_THROWS_AS(read_checkpoint(p), IntegrityError);
    spit(p, good.substr(0, good.size() - 3));
    CHECK_THROWS_AS(read_checkpoint(p), IntegrityError);
    spit(p, good + "extra");
    CHECK_THROWS_AS(read_checkpoint(p), IntegrityError);
    spit(p, good.substr(0, 20));
    CHECK_THROWS_AS(read_checkpoint(p), IntegrityError);
    std::string bad_json = good;
    bad_json[12] = '[';
    spit(p, bad_json);
    CHECK_THROWS_AS(read_checkpoint(p), IntegrityError);
    fs::remove(p);
    CHECK_THROWS_AS(read_checkpoint(p), DataError);
}

TEST_CASE("model checkpoints restore parameters, moments and captions") {
    const RunConfig cfg = tiny_run_config();
    auto s = fixture::synthetic_set(4, 1, 3);
    CaptionModel model = init_model(cfg.model, s.vocab, cfg.train.temperature, cfg.train.seed);
    model.encoder.normalization = s.stats.stats;
    AdamState adam = AdamState::for_params(model.parameters());
    TrainConfig tc = cfg.train;
    tc.lr = 1e-2;
    for (int i = 0; i < 3; ++i) train_step(model, adam, s.examples, tc);

    const auto p = temp_file("model.tfn");
    save_model(p, cfg, model, adam);
    const auto loaded = load_model(p);
    CHECK(loaded.config.to_map() == cfg.to_map());
    CHECK(loaded.model.vocab.tokens() == model.vocab.tokens());
    CHECK(loaded.adam.step == 3);
    const auto a = model.parameters();
    const auto b = loaded.model.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CAPTURE(a[i].first);
        CHECK(a[i].first == b[i].first);
        CHECK(same_bits(a[i].second.data(), b[i].second.data()));
        CHECK(same_bits(adam.m[i], loaded.adam.m[i]));
        CHECK(same_bits(adam.v[i], loaded.adam.v[i]));
    }
    CHECK(same_bits(loaded.model.encoder.normalization.mean, model.encoder.normalization.mean));
    CHECK(same_bits(loaded.model.encoder.normalization.stddev, model.encoder.normalization.stddev));

    GenerateOptions opt{2, 6, 0.7};
    for (const auto& e : s.examples) {
        const auto g1 = generate(model, e.image, opt);
        const auto g2 = generate(loaded.model, e.image, opt);
        CHECK(g1.tokens.ids == g2.tokens.ids);
        CHECK(std::bit_cast<std::uint64_t>(g1.log_prob) == std::bit_cast<std::uint64_t>(g2.log_prob));
    }

    // Saving the loaded model reproduces the file byte for byte.
    const auto p2 = temp_file("model2.tfn");
    save_model(p2, loaded.config, loaded.model, loaded.adam);
    CHECK(slurp(p) == slurp(p2));
    fs::remove(p);
    fs::remove(p2);
}

TEST_CASE("model checkpoints reject inconsistent contents") {
    const RunConfig cfg = tiny_run_config();
    auto s = fixture::synthetic_set(4, 1, 3);
    CaptionModel model = init_model(cfg.model, s.vocab, cfg.train.temperature, 0);
    const auto p = temp_file("incons.tfn");
    save_model(p, cfg, model, AdamState{});

    auto data = read_checkpoint(p);
    data.tensors.pop_back();
    write_checkpoint(p, data);
    CHECK_THROWS_AS(load_model(p), IntegrityError);

    data = read_checkpoint(p);
    data.config["channels"] = "16";
    write_checkpoint(p, data);
    CHECK_THROWS_AS(load_model(p), IntegrityError);

    data.config["channels"] = "banana";
    write_checkpoint(p, data);
    CHECK_THROWS_AS(load_model(p), IntegrityError);
    fs::remove(p);
}
