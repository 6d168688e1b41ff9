#include "trifusion/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "trifusion/error.hpp"
#include "trifusion/text_decoder.hpp"

namespace trifusion {

namespace {

using NGramCounts = std::map<Tokens, std::size_t>;

NGramCounts ngram_counts(const Tokens& tokens, std::size_t n) {
    NGramCounts counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                        tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return counts;
}

void require_images(const ScoredCorpus& corpus, const char* metric) {
    if (corpus.images.empty()) throw ContractError(std::string(metric) + ": empty corpus");
    corpus.validate();
}

// Minimum chunk count over maximum-match alignments, memoized on
// (candidate position, reference slot of the previous match, used slots).
class ChunkSearch {
public:
    ChunkSearch(const Tokens& cand, const Tokens& ref) : cand_(cand), ref_(ref) {
        std::map<std::string, std::size_t> cc, rc;
        for (const auto& w : cand) ++cc[w];
        for (const auto& w : ref) ++rc[w];
        for (const auto& [w, n] : cc) {
            auto it = rc.find(w);
            if (it != rc.end()) {
                quota_[w] = std::min(n, it->second);
                matches_ += quota_[w];
            }
        }
        remaining_.resize(cand.size() + 1);
        std::map<std::string, std::size_t> tail;
        for (std::size_t i = cand.size(); i-- > 0;) {
            ++tail[cand[i]];
            remaining_[i] = tail[cand[i]];
        }
    }

    std::size_t matches() const { return matches_; }

    std::size_t min_chunks() {
        if (matches_ == 0) return 0;
        std::string used(ref_.size(), '0');
        std::map<std::string, std::size_t> matched;
        return search(0, kNone, used, matched);
    }

private:
    static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
    static constexpr std::size_t kInf = static_cast<std::size_t>(-1) / 4;

    std::size_t search(std::size_t i, std::size_t prev, std::string& used,
                       std::map<std::string, std::size_t>& matched) {
        if (i == cand_.size()) return 0;
        std::string key = std::to_string(i) + ':' + std::to_string(prev) + ':' + used;
        if (auto it = memo_.find(key); it != memo_.end()) return it->second;

        const std::string& w = cand_[i];
        auto q = quota_.find(w);
        const std::size_t need = q == quota_.end() ? 0 : q->second - matched[w];
        std::size_t best = kInf;
        // Leave position i unmatched if the word's quota is still reachable.
        if (remaining_[i] - 1 >= need) best = search(i + 1, kNone, used, matched);
        if (need > 0) {
            for (std::size_t j = 0; j < ref_.size(); ++j) {
                if (used[j] == '1' || ref_[j] != w) continue;
                used[j] = '1';
                ++matched[w];
                const std::size_t opens = (prev != kNone && j == prev + 1) ? 0 : 1;
                best = std::min(best, opens + search(i + 1, j, used, matched));
                --matched[w];
                used[j] = '0';
            }
        }
        memo_.emplace(std::move(key), best);
        return best;
    }

    const Tokens& cand_;
    const Tokens& ref_;
    std::map<std::string, std::size_t> quota_;
    std::vector<std::size_t> remaining_;
    std::size_t matches_ = 0;
    std::unordered_map<std::string, std::size_t> memo_;
};

double meteor_score(const Tokens& cand, const Tokens& ref) {
    const auto a = meteor_align(cand, ref);
    if (a.matches == 0) return 0.0;
    const double m = static_cast<double>(a.matches);
    const double p = m / static_cast<double>(cand.size());
    const double r = m / static_cast<double>(ref.size());
    const double fmean = 10.0 * p * r / (r + 9.0 * p);
    const double frag = static_cast<double>(a.chunks) / m;
    return fmean * (1.0 - 0.5 * frag * frag * frag);
}

std::string trim_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

}  // namespace

void ScoredCorpus::validate() const {
    for (const auto& img : images) {
        if (img.references.empty()) {
            throw DataError("image '" + img.image_id + "' has no reference captions");
        }
    }
}

ScoredCorpus read_corpus_tsv(std::istream& in) {
    ScoredCorpus corpus;
    std::map<std::string, std::size_t> index;
    std::vector<bool> has_candidate;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim_cr(line);
        if (line.empty()) continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) {
            throw DataError("corpus line " + std::to_string(line_no) +
                            ": expected image_id<TAB>kind<TAB>text");
        }
        const std::string id = line.substr(0, t1);
        const std::string kind = line.substr(t1 + 1, t2 - t1 - 1);
        const std::string text = line.substr(t2 + 1);
        if (id.empty()) throw DataError("corpus line " + std::to_string(line_no) + ": empty image_id");
        auto [it, inserted] = index.emplace(id, corpus.images.size());
        if (inserted) {
            corpus.images.push_back({id, {}, {}});
            has_candidate.push_back(false);
        }
        auto& img = corpus.images[it->second];
        if (kind == "cand") {
            if (has_candidate[it->second]) {
                throw DataError("corpus line " + std::to_string(line_no) + ": second candidate for '" +
                                id + "'");
            }
            has_candidate[it->second] = true;
            img.candidate = tokenize(text);
        } else if (kind == "ref") {
            img.references.push_back(tokenize(text));
        } else {
            throw DataError("corpus line " + std::to_string(line_no) + ": kind must be cand or ref, got '" +
                            kind + "'");
        }
    }
    for (std::size_t i = 0; i < corpus.images.size(); ++i) {
        if (!has_candidate[i]) {
            throw DataError("corpus image '" + corpus.images[i].image_id + "' has no cand line");
        }
    }
    corpus.validate();
    return corpus;
}

ScoredCorpus read_corpus_tsv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read corpus file " + path.string());
    return read_corpus_tsv(in);
}

void write_corpus_tsv(const std::filesystem::path& path, const ScoredCorpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write corpus file " + path.string());
    auto join = [](const Tokens& t) {
        std::string s;
        for (const auto& w : t) {
            if (!s.empty()) s.push_back(' ');
            s += w;
        }
        return s;
    };
    for (const auto& img : corpus.images) {
        out << img.image_id << "\tcand\t" << join(img.candidate) << '\n';
        for (const auto& r : img.references) out << img.image_id << "\tref\t" << join(r) << '\n';
    }
}

double bleu(const ScoredCorpus& corpus, int n, const BleuOptions& options) {
    if (n < 1 || n > 4) throw ContractError("bleu: order must be in 1..4, got " + std::to_string(n));
    require_images(corpus, "bleu");
    std::vector<double> matched(n, 0.0), total(n, 0.0);
    double cand_len = 0.0, ref_len = 0.0;
    for (const auto& img : corpus.images) {
        const std::size_t c = img.candidate.size();
        cand_len += static_cast<double>(c);
        std::size_t closest = img.references.front().size();
        for (const auto& r : img.references) {
            const auto d = [c](std::size_t len) { return len > c ? len - c : c - len; };
            if (d(r.size()) < d(closest) || (d(r.size()) == d(closest) && r.size() < closest)) {
                closest = r.size();
            }
        }
        ref_len += static_cast<double>(closest);
        for (int k = 1; k <= n; ++k) {
            const auto cand = ngram_counts(img.candidate, static_cast<std::size_t>(k));
            std::map<Tokens, std::size_t> max_ref;
            for (const auto& r : img.references) {
                for (const auto& [g, cnt] : ngram_counts(r, static_cast<std::size_t>(k))) {
                    max_ref[g] = std::max(max_ref[g], cnt);
                }
            }
            for (const auto& [g, cnt] : cand) {
                auto it = max_ref.find(g);
                if (it != max_ref.end()) matched[k - 1] += static_cast<double>(std::min(cnt, it->second));
                total[k - 1] += static_cast<double>(cnt);
            }
        }
    }
    if (cand_len == 0.0) throw ContractError("bleu: candidate corpus is empty, score undefined");
    double log_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        double num = matched[k], den = total[k];
        if (options.smoothing && k >= 1) {
            num += options.epsilon;
            den += options.epsilon;
        }
        if (num == 0.0 || den == 0.0) return 0.0;
        log_sum += std::log(num / den);
    }
    const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return bp * std::exp(log_sum / n);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l_sentence(const Tokens& candidate, const std::vector<Tokens>& references) {
    double best = 0.0;
    if (candidate.empty()) return 0.0;
    const double beta2 = kRougeBeta * kRougeBeta;
    for (const auto& ref : references) {
        const auto l = static_cast<double>(lcs_length(candidate, ref));
        if (l == 0.0 || ref.empty()) continue;
        const double p = l / static_cast<double>(candidate.size());
        const double r = l / static_cast<double>(ref.size());
        best = std::max(best, (1.0 + beta2) * p * r / (r + beta2 * p));
    }
    return best;
}

double rouge_l(const ScoredCorpus& corpus) {
    require_images(corpus, "rouge_l");
    double total = 0.0;
    for (const auto& img : corpus.images) total += rouge_l_sentence(img.candidate, img.references);
    return total / static_cast<double>(corpus.images.size());
}

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
    ChunkSearch search(candidate, reference);
    return {search.matches(), search.min_chunks()};
}

double meteor_sentence(const Tokens& candidate, const std::vector<Tokens>& references) {
    double best = 0.0;
    for (const auto& ref : references) best = std::max(best, meteor_score(candidate, ref));
    return best;
}

double meteor(const ScoredCorpus& corpus) {
    require_images(corpus, "meteor");
    double total = 0.0;
    for (const auto& img : corpus.images) total += meteor_sentence(img.candidate, img.references);
    return total / static_cast<double>(corpus.images.size());
}

CiderResult cider(const ScoredCorpus& corpus) {
    require_images(corpus, "cider");
    constexpr std::size_t kMaxN = 4;
    const double images = static_cast<double>(corpus.images.size());
    CiderResult result;
    result.degenerate_idf = corpus.images.size() < 2;
    result.per_image.assign(corpus.images.size(), 0.0);

    for (std::size_t n = 1; n <= kMaxN; ++n) {
        std::map<Tokens, double> df;
        for (const auto& img : corpus.images) {
            std::set<Tokens> seen;
            for (const auto& r : img.references)
                for (const auto& [g, cnt] : ngram_counts(r, n)) seen.insert(g);
            for (const auto& g : seen) df[g] += 1.0;
        }
        auto tfidf = [&](const Tokens& t) {
            std::map<Tokens, double> vec;
            for (const auto& [g, cnt] : ngram_counts(t, n)) {
                auto it = df.find(g);
                const double d = it == df.end() ? 1.0 : std::max(1.0, it->second);
                vec[g] = static_cast<double>(cnt) * std::log(images / d);
            }
            return vec;
        };
        auto norm = [](const std::map<Tokens, double>& v) {
            double ss = 0.0;
            for (const auto& [g, x] : v) ss += x * x;
            return std::sqrt(ss);
        };
        for (std::size_t i = 0; i < corpus.images.size(); ++i) {
            const auto& img = corpus.images[i];
            const auto cv = tfidf(img.candidate);
            const double cn = norm(cv);
            double sum = 0.0;
            for (const auto& r : img.references) {
                const auto rv = tfidf(r);
                const double rn = norm(rv);
                if (cn == 0.0 || rn == 0.0) continue;
                double dot = 0.0;
                for (const auto& [g, x] : cv) {
                    auto it = rv.find(g);
                    if (it != rv.end()) dot += x * it->second;
                }
                sum += dot / (cn * rn);
            }
            result.per_image[i] += sum / static_cast<double>(img.references.size());
        }
    }
    double total = 0.0;
    for (double& s : result.per_image) {
        s = 10.0 * s / static_cast<double>(kMaxN);
        total += s;
    }
    result.score = total / images;
    return result;
}

std::vector<std::pair<std::string, double>> ScoreReport::entries() const {
    return {{"B-1", bleu1}, {"B-2", bleu2}, {"B-3", bleu3}, {"B-4", bleu4},
            {"C", cider},   {"M", meteor},  {"R-L", rouge_l}};
}

std::string ScoreReport::to_table(const std::string& row_label) const {
    return format_report_table({{row_label, *this}});
}

std::string ScoreReport::to_key_values() const {
    std::string out;
    char buf[64];
    for (const auto& [k, v] : entries()) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out += k + "=" + buf + "\n";
    }
    return out;
}

ScoreReport score_corpus(const ScoredCorpus& corpus, const BleuOptions& options) {
    require_images(corpus, "score_corpus");
    ScoreReport r;
    const bool any_words = std::any_of(corpus.images.begin(), corpus.images.end(),
                                       [](const ScoredImage& img) { return !img.candidate.empty(); });
    // A report still gets written when every caption came out empty; BLEU reads 0 there.
    if (any_words) {
        r.bleu1 = bleu(corpus, 1, options);
        r.bleu2 = bleu(corpus, 2, options);
        r.bleu3 = bleu(corpus, 3, options);
        r.bleu4 = bleu(corpus, 4, options);
    }
    r.cider = cider(corpus).score;
    r.meteor = meteor(corpus);
    r.rouge_l = rouge_l(corpus);
    return r;
}

ScoreReport parse_report(std::istream& in) {
    std::map<std::string, double> values;
    std::string line;
    while (std::getline(in, line)) {
        line = trim_cr(line);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        try {
            values[line.substr(0, eq)] = std::stod(line.substr(eq + 1));
        } catch (const std::exception&) {
            throw DataError("report line '" + line + "' does not hold a number");
        }
    }
    ScoreReport r;
    auto take = [&](const char* key, double& slot) {
        auto it = values.find(key);
        if (it == values.end()) throw DataError(std::string("report is missing key ") + key);
        slot = it->second;
    };
    take("B-1", r.bleu1);
    take("B-2", r.bleu2);
    take("B-3", r.bleu3);
    take("B-4", r.bleu4);
    take("C", r.cider);
    take("M", r.meteor);
    take("R-L", r.rouge_l);
    return r;
}

std::string format_report_table(const std::vector<std::pair<std::string, ScoreReport>>& rows) {
    std::size_t label_width = 5;
    for (const auto& [label, r] : rows) label_width = std::max(label_width, label.size());
    std::ostringstream os;
    char buf[32];
    os << std::string(label_width, ' ');
    for (const auto& [k, v] : ScoreReport{}.entries()) {
        std::snprintf(buf, sizeof buf, " %8s", k.c_str());
        os << buf;
    }
    os << '\n';
    for (const auto& [label, r] : rows) {
        os << label << std::string(label_width - label.size(), ' ');
        for (const auto& [k, v] : r.entries()) {
            std::snprintf(buf, sizeof buf, " %8.4f", v);
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace trifusion
