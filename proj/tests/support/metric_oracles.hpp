#pragma once

// Brute-force caption metrics written independently of src/metrics.cpp:
// string-keyed n-grams, recursive LCS, exhaustive METEOR alignments and
// dense CIDEr vectors over the whole corpus vocabulary of n-grams.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "trifusion/metrics.hpp"

namespace oracle {

using trifusion::ScoredCorpus;
using trifusion::Tokens;

inline std::vector<std::string> grams(const Tokens& t, std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
        std::string g;
        for (std::size_t k = 0; k < n; ++k) g += t[i + k] + "\x1f";
        out.push_back(g);
    }
    return out;
}

inline std::map<std::string, int> histogram(const std::vector<std::string>& items) {
    std::map<std::string, int> h;
    for (const auto& s : items) h[s] += 1;
    return h;
}

// `eps` > 0 adds eps to both sides of every precision of order 2 and up.
inline double bleu(const ScoredCorpus& corpus, int n, double eps = 0.0) {
    double c = 0, r = 0;
    std::vector<double> hit(n + 1, 0), tot(n + 1, 0);
    for (const auto& img : corpus.images) {
        c += img.candidate.size();
        long best = -1;
        for (const auto& ref : img.references) {
            const long len = static_cast<long>(ref.size());
            const long cl = static_cast<long>(img.candidate.size());
            if (best < 0 || std::labs(len - cl) < std::labs(best - cl) ||
                (std::labs(len - cl) == std::labs(best - cl) && len < best)) {
                best = len;
            }
        }
        r += best;
        for (int k = 1; k <= n; ++k) {
            auto cand = histogram(grams(img.candidate, k));
            for (const auto& [g, cnt] : cand) {
                int clip = 0;
                for (const auto& ref : img.references) clip = std::max(clip, histogram(grams(ref, k))[g]);
                hit[k] += std::min(cnt, clip);
                tot[k] += cnt;
            }
        }
    }
    double logp = 0;
    for (int k = 1; k <= n; ++k) {
        const double h = hit[k] + (k >= 2 ? eps : 0.0), t = tot[k] + (k >= 2 ? eps : 0.0);
        if (h == 0) return 0.0;
        logp += std::log(h / t) / n;
    }
    const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
    return bp * std::exp(logp);
}

inline std::size_t lcs(const Tokens& a, const Tokens& b) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
    std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
        if (i == a.size() || j == b.size()) return 0;
        auto key = std::make_pair(i, j);
        if (auto it = memo.find(key); it != memo.end()) return it->second;
        std::size_t v = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
        memo[key] = v;
        return v;
    };
    return go(0, 0);
}

inline double rouge_l(const ScoredCorpus& corpus) {
    double total = 0;
    for (const auto& img : corpus.images) {
        double best = 0;
        for (const auto& ref : img.references) {
            const double l = static_cast<double>(lcs(img.candidate, ref));
            if (l == 0) continue;
            const double p = l / img.candidate.size(), rc = l / ref.size(), b2 = 1.2 * 1.2;
            best = std::max(best, (1 + b2) * p * rc / (rc + b2 * p));
        }
        total += best;
    }
    return total / corpus.images.size();
}

// Every partial injective mapping of candidate positions onto equal reference
// words; keeps the one with most matches, then fewest chunks.
inline std::pair<std::size_t, std::size_t> meteor_alignment(const Tokens& cand, const Tokens& ref) {
    std::size_t best_m = 0, best_ch = std::numeric_limits<std::size_t>::max();
    std::vector<long> map(cand.size(), -1);
    std::vector<bool> used(ref.size(), false);
    std::function<void(std::size_t)> go = [&](std::size_t i) {
        if (i == cand.size()) {
            std::size_t m = 0, ch = 0;
            for (std::size_t k = 0; k < cand.size(); ++k) {
                if (map[k] < 0) continue;
                ++m;
                if (!(k > 0 && map[k - 1] >= 0 && map[k - 1] + 1 == map[k])) ++ch;
            }
            if (m > best_m || (m == best_m && ch < best_ch)) {
                best_m = m;
                best_ch = ch;
            }
            return;
        }
        map[i] = -1;
        go(i + 1);
        for (std::size_t j = 0; j < ref.size(); ++j) {
            if (used[j] || ref[j] != cand[i]) continue;
            used[j] = true;
            map[i] = static_cast<long>(j);
            go(i + 1);
            map[i] = -1;
            used[j] = false;
        }
    };
    go(0);
    return {best_m, best_m == 0 ? 0 : best_ch};
}

inline double meteor(const ScoredCorpus& corpus) {
    double total = 0;
    for (const auto& img : corpus.images) {
        double best = 0;
        for (const auto& ref : img.references) {
            auto [m, ch] = meteor_alignment(img.candidate, ref);
            if (m == 0) continue;
            const double p = double(m) / img.candidate.size(), r = double(m) / ref.size();
            const double f = 10 * p * r / (r + 9 * p);
            best = std::max(best, f * (1 - 0.5 * std::pow(double(ch) / m, 3)));
        }
        total += best;
    }
    return total / corpus.images.size();
}

inline double cider(const ScoredCorpus& corpus) {
    const double N = corpus.images.size();
    std::vector<double> per_image(corpus.images.size(), 0.0);
    for (std::size_t n = 1; n <= 4; ++n) {
        // Dense axis over every n-gram appearing anywhere in the corpus.
        std::vector<std::string> axis;
        for (const auto& img : corpus.images) {
            for (const auto& g : grams(img.candidate, n)) axis.push_back(g);
            for (const auto& ref : img.references)
                for (const auto& g : grams(ref, n)) axis.push_back(g);
        }
        std::sort(axis.begin(), axis.end());
        axis.erase(std::unique(axis.begin(), axis.end()), axis.end());
        std::vector<double> idf(axis.size());
        for (std::size_t a = 0; a < axis.size(); ++a) {
            double df = 0;
            for (const auto& img : corpus.images) {
                bool found = false;
                for (const auto& ref : img.references) {
                    const auto gs = grams(ref, n);
                    if (std::find(gs.begin(), gs.end(), axis[a]) != gs.end()) found = true;
                }
                df += found ? 1 : 0;
            }
            idf[a] = std::log(N / std::max(1.0, df));
        }
        auto vec = [&](const Tokens& t) {
            std::vector<double> v(axis.size(), 0.0);
            for (const auto& g : grams(t, n)) {
                const auto a = std::lower_bound(axis.begin(), axis.end(), g) - axis.begin();
                v[a] += 1.0;
            }
            for (std::size_t a = 0; a < v.size(); ++a) v[a] *= idf[a];
            return v;
        };
        for (std::size_t i = 0; i < corpus.images.size(); ++i) {
            const auto c = vec(corpus.images[i].candidate);
            double acc = 0;
            for (const auto& ref : corpus.images[i].references) {
                const auto r = vec(ref);
                double dot = 0, nc = 0, nr = 0;
                for (std::size_t a = 0; a < c.size(); ++a) {
                    dot += c[a] * r[a];
                    nc += c[a] * c[a];
                    nr += r[a] * r[a];
                }
                acc += (nc > 0 && nr > 0) ? dot / std::sqrt(nc * nr) : 0.0;
            }
            per_image[i] += acc / corpus.images[i].references.size();
        }
    }
    double total = 0;
    for (double s : per_image) total += 10.0 * s / 4.0;
    return total / N;
}

// Small corpus over a 5-word vocabulary so n-gram collisions are common.
// At least one candidate is non-empty, keeping BLEU defined.
inline ScoredCorpus random_corpus(std::mt19937_64& rng, std::size_t min_images = 1) {
    static const std::vector<std::string> words{"a", "b", "c", "d", "e"};
    auto pick = [&](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    auto sentence = [&](std::size_t lo, std::size_t hi) {
        Tokens t(pick(lo, hi));
        for (auto& w : t) w = words[pick(0, words.size() - 1)];
        return t;
    };
    ScoredCorpus c;
    const std::size_t n = pick(min_images, 4);
    for (std::size_t i = 0; i < n; ++i) {
        trifusion::ScoredImage img;
        img.image_id = "img" + std::to_string(i);
        img.candidate = sentence(i == 0 ? 1 : 0, 6);
        const std::size_t refs = pick(1, 3);
        for (std::size_t r = 0; r < refs; ++r) img.references.push_back(sentence(1, 6));
        c.images.push_back(std::move(img));
    }
    return c;
}

}  // namespace oracle
