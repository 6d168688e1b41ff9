#include "trifusion/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "trifusion/captioner.hpp"
#include "trifusion/checkpoint.hpp"
#include "trifusion/config.hpp"
#include "trifusion/data_io.hpp"
#include "trifusion/error.hpp"
#include "trifusion/metrics.hpp"
#include "trifusion/scaling.hpp"

namespace trifusion::cli {

namespace {

namespace fs = std::filesystem;

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

void apply_flags(RunConfig& cfg, const CommonFlags& flags) {
    if (!flags.config.empty()) {
        for (const auto& [k, v] : read_config_file(flags.config)) cfg.set(k, v);
    }
    for (const auto& o : flags.overrides) {
        const auto [k, v] = split_assignment(o);
        cfg.set(k, v);
    }
    if (flags.seed) cfg.train.seed = *flags.seed;
    if (!flags.out.empty()) cfg.out = flags.out;
}

RunConfig resolve_config(const CommonFlags& flags) {
    RunConfig cfg;
    apply_flags(cfg, flags);
    cfg.validate();
    return cfg;
}

// Checkpoint config plus command-line changes, which may not touch the architecture.
RunConfig resolve_with_checkpoint(const RunConfig& stored, const CommonFlags& flags) {
    RunConfig cfg = stored;
    apply_flags(cfg, flags);
    const auto before = stored.to_map();
    const auto after = cfg.to_map();
    for (const auto& [k, v] : after) {
        if (RunConfig::is_architecture_key(k) && before.at(k) != v) {
            throw ConfigError("config key '" + k + "' is fixed by the checkpoint (" + before.at(k) + ")");
        }
    }
    cfg.validate();
    return cfg;
}

fs::path output_dir(const RunConfig& cfg) {
    fs::create_directories(cfg.out);
    return cfg.out;
}

CaptionDataset load_data(const RunConfig& cfg) {
    if (cfg.dataset == "synthetic") {
        return make_synthetic(cfg.synthetic_n, cfg.synthetic_grid, cfg.synthetic_seed, cfg.split);
    }
    return load_dataset(cfg.image_dir, cfg.captions, cfg.split);
}

NormStats resolve_stats(const RunConfig& cfg, const CaptionDataset& ds, std::ostream& err) {
    if (!cfg.norm_mean.empty()) return {cfg.norm_mean, cfg.norm_std};
    return compute_stats(ds, &err).stats;
}

Vocabulary train_vocab(const RunConfig& cfg, const CaptionDataset& ds) {
    std::vector<std::string> captions;
    for (std::size_t i : ds.indices(Split::train))
        for (const auto& c : ds.records[i].captions) captions.push_back(c);
    return build_vocab(captions, cfg.min_freq);
}

std::vector<Example> train_examples(const CaptionDataset& ds, const Vocabulary& vocab) {
    std::vector<Example> out;
    for (std::size_t i : ds.indices(Split::train))
        for (const auto& c : ds.records[i].captions) out.push_back({ds.records[i].image, vocab.encode(c)});
    return out;
}

GenerateOptions generate_options(const RunConfig& cfg) {
    return {cfg.train.beam_width, cfg.train.max_len, cfg.train.length_penalty};
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path.string());
    f << text;
}

int cmd_train(const CommonFlags& flags, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = resolve_config(flags);
    const auto dir = output_dir(cfg);
    const CaptionDataset ds = load_data(cfg);
    if (ds.count(Split::train) == 0) throw DataError("training split is empty");
    const NormStats stats = resolve_stats(cfg, ds, err);
    Vocabulary vocab = train_vocab(cfg, ds);
    const auto examples = train_examples(ds, vocab);

    CaptionModel model = init_model(cfg.model, vocab, cfg.train.temperature, cfg.train.seed);
    model.encoder.normalization = stats;
    AdamState adam = AdamState::for_params(model.parameters());
    const fs::path ckpt = dir / "checkpoint.tfn";
    const fs::path log_path = dir / "loss_log.tsv";

    std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
    if (!log) throw DataError("cannot write " + log_path.string());
    log << "step\tce\tcontrastive\ttotal\n";
    std::optional<StepLosses> first, last;
    save_model(ckpt, cfg, model, adam);
    train(
        model, adam, examples, cfg.train,
        [&](std::uint64_t step, const StepLosses& l) {
            if (!first) first = l;
            last = l;
            log << step << '\t' << fmt(l.ce) << '\t' << fmt(l.contrastive) << '\t' << fmt(l.total) << '\n';
            log.flush();
        },
        [&](std::size_t) { save_model(ckpt, cfg, model, adam); });

    out << "examples " << examples.size() << ", vocabulary " << vocab.size() << ", steps " << adam.step
        << '\n';
    if (first && last) {
        out << "total loss " << fmt(first->total) << " -> " << fmt(last->total) << '\n';
    }
    out << "checkpoint " << ckpt.string() << '\n' << "loss log " << log_path.string() << '\n';
    return kOk;
}

int cmd_caption(const CommonFlags& flags, const std::string& checkpoint, const std::string& image,
                std::ostream& out) {
    LoadedModel loaded = load_model(checkpoint);
    const RunConfig cfg = resolve_with_checkpoint(loaded.config, flags);
    const Tensor pixels = read_netpbm(image);
    out << generate(loaded.model, pixels, generate_options(cfg)).text << '\n';
    return kOk;
}

std::string report_text(const ScoreReport& report, const std::string& label) {
    return report.to_table(label) + "\n" + report.to_key_values();
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint, const std::string& corpus_path,
             std::ostream& out, std::ostream& err) {
    ScoredCorpus corpus;
    RunConfig cfg;
    if (!corpus_path.empty()) {
        cfg = resolve_config(flags);
        corpus = read_corpus_tsv(fs::path(corpus_path));
        if (corpus.images.empty()) throw DataError("corpus " + corpus_path + " is empty");
    } else {
        LoadedModel loaded = load_model(checkpoint);
        cfg = resolve_with_checkpoint(loaded.config, flags);
        const CaptionDataset ds = load_data(cfg);
        const auto idx = ds.indices(cfg.eval_split);
        if (idx.empty()) throw DataError("evaluation split '" + to_string(cfg.eval_split) + "' is empty");
        const auto opts = generate_options(cfg);
        for (std::size_t i : idx) {
            const auto& rec = ds.records[i];
            ScoredImage img;
            img.image_id = rec.name;
            img.candidate = tokenize(generate(loaded.model, rec.image, opts).text);
            for (const auto& c : rec.captions) img.references.push_back(tokenize(c));
            corpus.images.push_back(std::move(img));
        }
    }
    const auto dir = output_dir(cfg);
    if (corpus.images.size() < 2) err << "warning: fewer than two images; CIDEr IDF is degenerate\n";
    if (corpus_path.empty()) write_corpus_tsv(dir / "candidates.tsv", corpus);
    const ScoreReport report = score_corpus(corpus);
    const std::string text = report_text(report, "model");
    write_text(dir / "report.txt", text);
    out << text;
    return kOk;
}

int cmd_heatmap(const CommonFlags& flags, const std::string& checkpoint, const std::string& image,
                std::ostream& out) {
    LoadedModel loaded = load_model(checkpoint);
    const RunConfig cfg = resolve_with_checkpoint(loaded.config, flags);
    const auto dir = output_dir(cfg);
    const Tensor pixels = read_netpbm(image);
    NoGradGuard no_grad;
    const auto& ecfg = loaded.model.config.encoder;
    const EncoderOutput enc = encode(pixels, ecfg, loaded.model.encoder);
    std::size_t written = 0;
    for (std::size_t b = 0; b < enc.attn_spatial.size(); ++b) {
        if (!enc.attn_spatial[b].defined()) continue;
        const fs::path p = dir / ("heatmap_block" + std::to_string(b) + ".pgm");
        write_netpbm(p, heatmap(enc, b, ecfg));
        out << p.string() << '\n';
        ++written;
    }
    if (written == 0) throw ConfigError("no encoder block has spatial window attention (attention=" +
                                        to_string(ecfg.mode) + ")");
    return kOk;
}

int cmd_ablate(const CommonFlags& flags, const std::string& variants, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = resolve_config(flags);
    std::vector<AblationVariant> chosen;
    if (variants.empty()) {
        chosen = ablation_variants();
    } else {
        std::stringstream ss(variants);
        std::string name;
        while (std::getline(ss, name, ',')) chosen.push_back(parse_ablation_variant(name));
    }
    const auto dir = output_dir(cfg);
    const CaptionDataset ds = load_data(cfg);
    if (ds.count(Split::train) == 0) throw DataError("training split is empty");
    const NormStats stats = resolve_stats(cfg, ds, err);
    const Vocabulary vocab = train_vocab(cfg, ds);
    const auto examples = train_examples(ds, vocab);
    std::vector<Tensor> images;
    std::vector<std::vector<std::string>> refs;
    for (std::size_t i : ds.indices(cfg.eval_split)) {
        images.push_back(ds.records[i].image);
        refs.push_back(ds.records[i].captions);
    }
    if (images.empty()) throw DataError("evaluation split '" + to_string(cfg.eval_split) + "' is empty");

    std::vector<std::pair<std::string, ScoreReport>> rows;
    std::string kv;
    for (const auto& v : chosen) {
        const AblationResult r = ablate(v, cfg.model, cfg.train, vocab, examples, images, refs, stats);
        rows.emplace_back(v.name(), r.report);
        for (const auto& [k, val] : r.report.entries()) kv += v.name() + "." + k + "=" + fmt(val) + "\n";
    }
    const std::string table = format_report_table(rows);
    write_text(dir / "ablation.txt", table + "\n" + kv);
    out << table;
    return kOk;
}

int cmd_bench(const CommonFlags& flags, int repeats, std::ostream& out) {
    const RunConfig cfg = resolve_config(flags);
    ScalingOptions opts;
    opts.repeats = repeats;
    opts.seed = cfg.train.seed;
    const std::string table = format_scaling_report(run_scaling_bench(opts));
    write_text(output_dir(cfg) / "bench.txt", table);
    out << table;
    return kOk;
}

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config, "key=value config file");
    cmd->add_option("--seed", flags.seed, "random seed (overrides the config)");
    cmd->add_option("--out", flags.out, "output directory (overrides the config)");
    cmd->add_option("--set", flags.overrides, "config override KEY=VALUE, repeatable");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Image captioning with dual-attention encoder and contrastive alignment", "trifusion"};
    app.require_subcommand(1);
    CommonFlags flags;
    std::string checkpoint, image, corpus, variants;
    int repeats = 5;

    auto* train_cmd = app.add_subcommand("train", "train on the configured dataset");
    add_common(train_cmd, flags);

    auto* caption_cmd = app.add_subcommand("caption", "print a caption for IMAGE");
    add_common(caption_cmd, flags);
    caption_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    caption_cmd->add_option("image", image, "PGM/PPM image")->required();

    auto* eval_cmd = app.add_subcommand("eval", "score captions for the eval split, or a corpus TSV");
    add_common(eval_cmd, flags);
    auto* ck_opt = eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
    auto* corpus_opt = eval_cmd->add_option("--corpus", corpus, "TSV of image_id, cand|ref, text");
    ck_opt->excludes(corpus_opt);
    corpus_opt->excludes(ck_opt);

    auto* heat_cmd = app.add_subcommand("heatmap", "write per-block attention heatmaps for IMAGE");
    add_common(heat_cmd, flags);
    heat_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    heat_cmd->add_option("image", image, "PGM/PPM image")->required();

    auto* ablate_cmd = app.add_subcommand("ablate", "train and score attention/contrastive variants");
    add_common(ablate_cmd, flags);
    ablate_cmd->add_option("--variants", variants, "comma list, e.g. dual,dual-noclip (default: all 8)");

    auto* bench_cmd = app.add_subcommand("bench", "time global, windowed and channel attention");
    add_common(bench_cmd, flags);
    bench_cmd->add_option("--repeats", repeats, "timing repeats per cell (best is kept)")
        ->check(CLI::PositiveNumber);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(flags, out, err);
        if (caption_cmd->parsed()) return cmd_caption(flags, checkpoint, image, out);
        if (eval_cmd->parsed()) {
            if (checkpoint.empty() && corpus.empty()) {
                throw ConfigError("eval needs --checkpoint or --corpus");
            }
            return cmd_eval(flags, checkpoint, corpus, out, err);
        }
        if (heat_cmd->parsed()) return cmd_heatmap(flags, checkpoint, image, out);
        if (ablate_cmd->parsed()) return cmd_ablate(flags, variants, out, err);
        if (bench_cmd->parsed()) return cmd_bench(flags, repeats, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const IntegrityError& e) {
        err << "integrity error: " << e.what() << '\n';
        return kIntegrity;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const ShapeError& e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    }
    return kUsage;
}

}  // namespace trifusion::cli
