#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>

#include "trifusion/checkpoint.hpp"
#include "trifusion/cli.hpp"
#include "trifusion/data_io.hpp"
#include "trifusion/metrics.hpp"

using namespace trifusion;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("trifusion_cli_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

ScoreReport report_from(const std::string& text) {
    std::string kv;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);)
        if (line.find('=') != std::string::npos) kv += line + "\n";
    std::istringstream s(kv);
    return parse_report(s);
}

// Small default-synthetic run, shared by several cases.
std::vector<std::string> train_args(const std::string& out, const std::string& epochs) {
    return {"train", "--out", out, "--set", "epochs=" + epochs, "--set", "channels=16", "--set", "embed_dim=8",
            "--seed", "3"};
}

}  // namespace

TEST_CASE("usage errors exit 1") {
    CHECK(run_cli({}).code == cli::kUsage);
    CHECK(run_cli({"frobnicate"}).code == cli::kUsage);
    TempDir d;
    auto r = run_cli({"train", "--out", d / "x", "--set", "colour=red"});
    CHECK(r.code == cli::kUsage);
    CHECK(r.err.find("colour") != std::string::npos);
    CHECK(run_cli({"train", "--out", d / "x", "--set", "max_len=80"}).code == cli::kUsage);
    CHECK(run_cli({"eval", "--out", d / "x"}).code == cli::kUsage);
    CHECK(run_cli({"caption", "img.ppm"}).code == cli::kUsage);
    CHECK(run_cli({"eval", "--checkpoint", "a", "--corpus", "b"}).code == cli::kUsage);
    CHECK(run_cli({"train", "--config", d / "missing.cfg"}).code == cli::kUsage);
    CHECK(run_cli({"train", "--help"}).code == cli::kOk);
}

TEST_CASE("data and integrity errors") {
    TempDir d;
    std::ofstream(d / "junk.tfn") << "not a checkpoint";
    std::ofstream(d / "img.pgm") << "P5\n1 1\n255\n";
    auto r = run_cli({"caption", "--checkpoint", d / "junk.tfn", d / "img.pgm"});
    CHECK(r.code == cli::kIntegrity);
    CHECK(r.err.find("magic") != std::string::npos);

    r = run_cli({"eval", "--corpus", d / "none.tsv", "--out", d / "o"});
    CHECK(r.code == cli::kData);
    std::ofstream(d / "c.txt") << "absent.ppm\ta caption\n";
    r = run_cli({"train", "--out", d / "o", "--set", "dataset=files", "--set", "image_dir=" + d.path.string(), "--set",
             "captions=" + (d / "c.txt")});
    CHECK(r.code == cli::kData);
    CHECK(r.err.find("missing image") != std::string::npos);
}

TEST_CASE("zero epochs writes only the initial checkpoint") {
    TempDir d;
    auto r = run_cli(train_args(d / "run", "0"));
    REQUIRE(r.code == cli::kOk);
    CHECK(slurp(d.path / "run" / "loss_log.tsv") == "step\tce\tcontrastive\ttotal\n");
    const auto loaded = load_model(d.path / "run" / "checkpoint.tfn");
    CHECK(loaded.adam.step == 0);
    CHECK(loaded.config.train.epochs == 0);
    CHECK(loaded.config.train.seed == 3);
    CHECK(loaded.config.model.encoder.channels == 16);
}

TEST_CASE("training, captioning and evaluation are deterministic and consistent") {
    TempDir d;
    REQUIRE(run_cli(train_args(d / "a", "3")).code == cli::kOk);
    REQUIRE(run_cli(train_args(d / "b", "3")).code == cli::kOk);
    const std::string log = slurp(d.path / "a" / "loss_log.tsv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 4);  // header + one step per epoch for 6 examples
    CHECK(log == slurp(d.path / "b" / "loss_log.tsv"));
    // Checkpoints match except for the stored output directory.
    auto ca = read_checkpoint(d.path / "a" / "checkpoint.tfn");
    auto cb = read_checkpoint(d.path / "b" / "checkpoint.tfn");
    CHECK(ca.config.at("out") != cb.config.at("out"));
    ca.config.erase("out");
    cb.config.erase("out");
    CHECK(ca.config == cb.config);
    CHECK(ca.step == 3);
    REQUIRE(ca.tensors.size() == cb.tensors.size());
    for (std::size_t i = 0; i < ca.tensors.size(); ++i) {
        const auto x = ca.tensors[i].second.data(), y = cb.tensors[i].second.data();
        CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
    }

    const auto ds = make_synthetic(8, 2, 7);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto img = d / ("img" + std::to_string(i) + ".ppm");
        write_netpbm(img, ds.records[i].image);
        const auto ca = run_cli({"caption", "--checkpoint", d / "a/checkpoint.tfn", img});
        const auto cb = run_cli({"caption", "--checkpoint", d / "b/checkpoint.tfn", img, "--set", "beam_width=1"});
        REQUIRE(ca.code == cli::kOk);
        CHECK(ca.out == cb.out);
        CHECK(ca.out.back() == '\n');
        const auto beam = run_cli({"caption", "--checkpoint", d / "a/checkpoint.tfn", img, "--set", "beam_width=3"});
        CHECK(beam.code == cli::kOk);
    }
    // Architecture keys are pinned by the checkpoint.
    auto pinned = run_cli({"caption", "--checkpoint", d / "a/checkpoint.tfn", d / "img0.ppm", "--set", "channels=8"});
    CHECK(pinned.code == cli::kUsage);
    CHECK(pinned.err.find("fixed by the checkpoint") != std::string::npos);

    // The two evaluation paths agree.
    auto via_model = run_cli({"eval", "--checkpoint", d / "a/checkpoint.tfn", "--out", d / "eval"});
    REQUIRE(via_model.code == cli::kOk);
    auto via_corpus = run_cli({"eval", "--corpus", d / "eval/candidates.tsv", "--out", d / "eval2"});
    REQUIRE(via_corpus.code == cli::kOk);
    const auto r1 = report_from(via_model.out), r2 = report_from(via_corpus.out);
    for (std::size_t i = 0; i < 7; ++i)
        CHECK(std::abs(r1.entries()[i].second - r2.entries()[i].second) <= 1e-12);
    CHECK(slurp(d.path / "eval" / "report.txt") == via_model.out);
    // One test image under the default split: the degenerate-IDF warning fires.
    CHECK(via_model.err.find("CIDEr") != std::string::npos);
}

TEST_CASE("evaluating references against themselves") {
    TempDir d;
    {
        std::ofstream c(d / "c.tsv");
        c << "i1\tcand\ta red square at top left\ni1\tref\ta red square at top left\n"
          << "i2\tcand\ta blue bar at bottom right\ni2\tref\ta blue bar at bottom right\n"
          << "i2\tref\ta blue bar\n";
    }
    auto r = run_cli({"eval", "--corpus", d / "c.tsv", "--out", d / "o"});
    REQUIRE(r.code == cli::kOk);
    const auto rep = report_from(r.out);
    CHECK(rep.entries().size() == 7);
    CHECK(rep.entries()[0].first == "B-1");
    CHECK(rep.entries()[0].second == doctest::Approx(1.0).epsilon(1e-15));
    for (const auto& [k, v] : rep.entries())
        if (k == "R-L") CHECK(v == 1.0);
    std::size_t kv_lines = 0;
    std::istringstream in(slurp(d.path / "o" / "report.txt"));
    for (std::string line; std::getline(in, line);) kv_lines += line.find('=') != std::string::npos;
    CHECK(kv_lines == 7);
}

TEST_CASE("an EOS-forcing head prints an empty caption") {
    TempDir d;
    REQUIRE(run_cli(train_args(d / "run", "1")).code == cli::kOk);
    auto loaded = load_model(d.path / "run" / "checkpoint.tfn");
    auto& layer = loaded.model.decoder.layers.back();
    const std::size_t c = loaded.config.model.decoder.channels;
    std::vector<double> b(c);
    for (std::size_t i = 0; i < c; ++i) b[i] = (i % 2 ? 0.5 : -0.5);
    std::ranges::fill(layer.norm3_gain.mutable_data(), 0.0);
    std::ranges::copy(b, layer.norm3_bias.mutable_data().begin());
    auto table = loaded.model.decoder.embedding.mutable_data();
    for (std::size_t i = 0; i < c; ++i) table[kEosId * c + i] = 100.0 * b[i];
    save_model(d.path / "eos.tfn", loaded.config, loaded.model, loaded.adam);

    write_netpbm(d / "img.ppm", make_synthetic(2, 2, 1).records[0].image);
    for (const char* width : {"beam_width=1", "beam_width=4"}) {
        auto r = run_cli({"caption", "--checkpoint", d / "eos.tfn", d / "img.ppm", "--set", width});
        REQUIRE(r.code == cli::kOk);
        CHECK(r.out == "\n");
    }
}

TEST_CASE("heatmap command") {
    TempDir d;
    REQUIRE(run_cli(train_args(d / "run", "0")).code == cli::kOk);
    write_netpbm(d / "img.ppm", make_synthetic(2, 2, 1).records[0].image);
    auto r = run_cli({"heatmap", "--checkpoint", d / "run/checkpoint.tfn", d / "img.ppm", "--out", d / "maps"});
    REQUIRE(r.code == cli::kOk);
    std::istringstream lines(r.out);
    std::size_t count = 0;
    for (std::string p; std::getline(lines, p); ++count) {
        const auto map = read_netpbm(p);
        CHECK(map.shape().size() == 3);
        double hi = 0;
        for (double v : map.data()) hi = std::max(hi, v);
        CHECK((hi == 1.0 || hi == 0.0));
    }
    CHECK(count == 1);  // default depth 1, dual block

    REQUIRE(run_cli({"train", "--out", d / "g", "--set", "epochs=0", "--set", "attention=global"}).code == cli::kOk);
    r = run_cli({"heatmap", "--checkpoint", d / "g/checkpoint.tfn", d / "img.ppm", "--out", d / "maps2"});
    CHECK(r.code == cli::kUsage);
}

TEST_CASE("bench and ablate commands") {
    TempDir d;
    auto r = run_cli({"bench", "--repeats", "1", "--out", d / "b"});
    REQUIRE(r.code == cli::kOk);
    std::istringstream in(r.out);
    std::string line;
    std::getline(in, line);
    CHECK(line.find("attn_macs") != std::string::npos);
    std::size_t rows = 0;
    while (std::getline(in, line) && !line.empty()) ++rows;
    CHECK(rows == 12);
    CHECK(slurp(d.path / "b" / "bench.txt") == r.out);

    r = run_cli({"ablate", "--variants", "dual,global-noclip", "--out", d / "a", "--set", "epochs=1", "--set",
             "channels=8", "--set", "embed_dim=4"});
    REQUIRE(r.code == cli::kOk);
    CHECK(r.out.find("dual") != std::string::npos);
    CHECK(r.out.find("global-noclip") != std::string::npos);
    const std::string saved = slurp(d.path / "a" / "ablation.txt");
    CHECK(std::count(saved.begin(), saved.end(), '=') == 14);
    CHECK(run_cli({"ablate", "--variants", "dual,fancy", "--out", d / "a"}).code == cli::kUsage);
}

TEST_CASE("commands leave their inputs alone and write only under --out") {
    TempDir d;
    REQUIRE(run_cli(train_args(d / "run", "1")).code == cli::kOk);
    write_netpbm(d / "img.ppm", make_synthetic(2, 2, 1).records[0].image);
    std::ofstream(d / "c.tsv") << "i\tcand\ta red bar\ni\tref\ta red bar\nj\tcand\tx\nj\tref\ty\n";

    auto snapshot = [&] {
        std::map<std::string, std::string> files;
        for (const auto& e : fs::recursive_directory_iterator(d.path))
            if (e.is_regular_file()) files[fs::relative(e.path(), d.path).string()] = slurp(e.path());
        return files;
    };
    const std::string ckpt = d / "run/checkpoint.tfn";
    const std::vector<std::vector<std::string>> commands{
        {"caption", "--checkpoint", ckpt, d / "img.ppm", "--out", d / "o1"},
        {"heatmap", "--checkpoint", ckpt, d / "img.ppm", "--out", d / "o2"},
        {"eval", "--checkpoint", ckpt, "--out", d / "o3"},
        {"eval", "--corpus", d / "c.tsv", "--out", d / "o4"},
    };
    for (std::size_t i = 0; i < commands.size(); ++i) {
        const auto before = snapshot();
        REQUIRE(run_cli(commands[i]).code == cli::kOk);
        const auto after = snapshot();
        const std::string prefix = "o" + std::to_string(i + 1);
        for (const auto& [name, bytes] : before) {
            REQUIRE(after.count(name));
            CHECK(after.at(name) == bytes);
        }
        for (const auto& [name, bytes] : after)
            if (!before.count(name)) CHECK(name.rfind(prefix, 0) == 0);
    }
}
