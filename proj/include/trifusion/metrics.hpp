#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <string>
#include <vector>

namespace trifusion {

using Tokens = std::vector<std::string>;

struct ScoredImage {
    std::string image_id;
    Tokens candidate;
    std::vector<Tokens> references;  // at least one
};

struct ScoredCorpus {
    std::vector<ScoredImage> images;

    // Checks the one-reference-per-image invariant.
    void validate() const;
};

// Corpus TSV: image_id <TAB> cand|ref <TAB> text. One cand line per image.
// Text goes through the decoder tokenizer. Images keep first-seen order.
ScoredCorpus read_corpus_tsv(std::istream& in);
ScoredCorpus read_corpus_tsv(const std::filesystem::path& path);
void write_corpus_tsv(const std::filesystem::path& path, const ScoredCorpus& corpus);

struct BleuOptions {
    // Add-epsilon smoothing on the k >= 2 precisions (numerator and denominator).
    bool smoothing = false;
    double epsilon = 1.0;
};

// Corpus BLEU up to order n: geometric mean of clipped precisions times
// min(1, exp(1 - r/c)), r summing each image's closest reference length.
double bleu(const ScoredCorpus& corpus, int n, const BleuOptions& options = {});

inline constexpr double kRougeBeta = 1.2;

std::size_t lcs_length(const Tokens& a, const Tokens& b);
// Max LCS F-measure over references for one image.
double rouge_l_sentence(const Tokens& candidate, const std::vector<Tokens>& references);
double rouge_l(const ScoredCorpus& corpus);

struct MeteorAlignment {
    std::size_t matches = 0;
    std::size_t chunks = 0;
};

// Exact-match alignment with the most matches and, among those, the fewest chunks.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);
double meteor_sentence(const Tokens& candidate, const std::vector<Tokens>& references);
double meteor(const ScoredCorpus& corpus);

struct CiderResult {
    double score = 0.0;
    std::vector<double> per_image;
    bool degenerate_idf = false;  // fewer than two images
};

// Plain CIDEr over n = 1..4, scaled by 10.
CiderResult cider(const ScoredCorpus& corpus);

struct ScoreReport {
    double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
    double cider = 0.0, meteor = 0.0, rouge_l = 0.0;

    // (key, value) in table column order: B-1 B-2 B-3 B-4 C M R-L.
    std::vector<std::pair<std::string, double>> entries() const;
    std::string to_table(const std::string& row_label = "model") const;
    std::string to_key_values() const;
};

ScoreReport score_corpus(const ScoredCorpus& corpus, const BleuOptions& options = {});

// Parses the key=value lines written by ScoreReport::to_key_values.
ScoreReport parse_report(std::istream& in);

std::string format_report_table(const std::vector<std::pair<std::string, ScoreReport>>& rows);

}  // namespace trifusion
