#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "trifusion/checkpoint.hpp"
#include "trifusion/cli.hpp"
#include "trifusion/data_io.hpp"
#include "trifusion/metrics.hpp"

using namespace trifusion;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("trifusion_int_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

int run(const std::vector<std::string>& args, std::string* out = nullptr) {
    std::ostringstream o, e;
    const int code = cli::run(args, o, e);
    if (out) *out = o.str();
    if (code != 0) MESSAGE(e.str());
    return code;
}

double report_value(const std::string& text, const std::string& key) {
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);)
        if (line.rfind(key + "=", 0) == 0) return std::stod(line.substr(key.size() + 1));
    return -1;
}

// Writes the synthetic set as PPM files plus a Flickr-style captions file.
void export_synthetic(const CaptionDataset& ds, const fs::path& dir) {
    fs::create_directories(dir / "images");
    std::ofstream caps(dir / "captions.txt");
    for (const auto& r : ds.records) {
        write_netpbm(dir / "images" / r.name, r.image);
        caps << r.name << "#0\t" << r.captions.front() << "\n";
    }
}

}  // namespace

TEST_CASE("a dataset on disk trains exactly like the in-memory synthetic set") {
    TempDir d;
    export_synthetic(make_synthetic(8, 2, 7), d.path);
    const std::vector<std::string> common{"--set", "epochs=20", "--set", "channels=16", "--set", "embed_dim=8"};
    auto with = [&](std::vector<std::string> args) {
        args.insert(args.end(), common.begin(), common.end());
        return args;
    };
    REQUIRE(run(with({"train", "--out", d / "mem"})) == 0);
    REQUIRE(run(with({"train", "--out", d / "disk", "--set", "dataset=files", "--set", "image_dir=" + (d / "images"),
                      "--set", "captions=" + (d / "captions.txt")})) == 0);
    const std::string log = slurp(d.path / "mem" / "loss_log.tsv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 21);
    CHECK(log == slurp(d.path / "disk" / "loss_log.tsv"));

    const auto a = load_model(d.path / "mem" / "checkpoint.tfn");
    const auto b = load_model(d.path / "disk" / "checkpoint.tfn");
    const auto pa = a.model.parameters(), pb = b.model.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto x = pa[i].second.data(), y = pb[i].second.data();
        CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
    }
    CHECK(a.model.encoder.normalization.mean == b.model.encoder.normalization.mean);
}

TEST_CASE("train, caption, heatmap and evaluate on the training images") {
    TempDir d;
    const auto ds = make_synthetic(8, 2, 7);
    export_synthetic(ds, d.path);
    const std::vector<std::string> all_train{
        "--set", "dataset=files",   "--set", "image_dir=" + (d / "images"), "--set", "captions=" + (d / "captions.txt"),
        "--set", "split_train=1",   "--set", "split_val=0",                 "--set", "split_test=0",
        "--set", "eval_split=train"};
    std::vector<std::string> train{"train", "--out", d / "run"};
    train.insert(train.end(), all_train.begin(), all_train.end());
    std::string summary;
    REQUIRE(run(train, &summary) == 0);
    CHECK(summary.find("examples 8") != std::string::npos);
    CHECK(summary.find("steps 300") != std::string::npos);

    // Loss falls by at least 90% between the first and last step.
    std::istringstream log(slurp(d.path / "run" / "loss_log.tsv"));
    std::vector<std::string> rows;
    for (std::string line; std::getline(log, line);) rows.push_back(line);
    REQUIRE(rows.size() == 301);
    const std::string first = rows[1], last = rows.back();
    auto total = [](const std::string& row) { return std::stod(row.substr(row.rfind('\t') + 1)); };
    CHECK(total(last) <= 0.1 * total(first));

    const std::string ckpt = d / "run/checkpoint.tfn";
    std::size_t exact = 0;
    for (const auto& r : ds.records) {
        std::string caption;
        REQUIRE(run({"caption", "--checkpoint", ckpt, (d.path / "images" / r.name).string()}, &caption) == 0);
        exact += caption == r.captions.front() + "\n";
    }
    CHECK(exact >= 6);

    std::string maps;
    REQUIRE(run({"heatmap", "--checkpoint", ckpt, (d.path / "images" / ds.records[0].name).string(), "--out",
                 d / "maps"},
                &maps) == 0);
    CHECK(fs::exists(d.path / "maps" / "heatmap_block0.pgm"));

    std::string report;
    std::vector<std::string> eval{"eval", "--checkpoint", ckpt, "--out", d / "eval"};
    REQUIRE(run(eval, &report) == 0);
    CHECK(report_value(report, "B-1") >= 0.75);
    CHECK(report_value(report, "R-L") >= 0.75);
    CHECK(report_value(report, "C") >= 0.0);
    const auto candidates = read_corpus_tsv(d.path / "eval" / "candidates.tsv");
    CHECK(candidates.images.size() == 8);
}
