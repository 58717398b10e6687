#pragma once
#include <string>
#include <vector>

#include "heterodiff/layout.hpp"
#include "heterodiff/rng.hpp"
#include "heterodiff/vocab.hpp"

namespace hd {

struct Corpus {
    std::vector<Layout> train, val, test;
    std::vector<double> count_prior;  // index n-1, sums to 1 over train
    double canvas_w = 1.0, canvas_h = 1.0;
};

struct CorpusError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Parse the corpus JSON ({"canvas":{...},"layouts":[...]}), drop over-length
// layouts, shuffle under split_seed, split 90/5/5, compute the count prior.
Corpus load_corpus(const std::string& path, const Vocabulary& vocab, int n_max,
                   uint64_t split_seed);

// Same, from an already-parsed list (used by synth + tests)
Corpus split_corpus(std::vector<Layout> layouts, int n_max, uint64_t split_seed,
                    double canvas_w, double canvas_h);

// type names appearing in a corpus file (for building a vocabulary before loading)
std::vector<std::string> scan_type_names(const std::string& path);

struct SynthSpec {
    int n_layouts = 2000;
    int K = 32;
    std::vector<std::string> type_names;  // defaults to the built-in four
    int n_max = 8;
    std::vector<double> style_mix;        // per-template weights; defaults to equal
    double canvas_w = 360, canvas_h = 640;
};

// Parametric templates (column stacks, aligned grids, toolbar+list, hero) with all
// coordinates on bin centers, exact edge alignment, zero overlap. Deterministic
// under seed.
Corpus synth_corpus(const SynthSpec& spec, uint64_t seed);

// Gaussian noise with the given std added to each continuous coordinate,
// re-discretized; inverted pairs swapped; types and count preserved.
Layout perturb(const Layout& layout, double std, int K, Rng& rng);

int count_prior_sample(const Corpus& corpus, Rng& rng);

// corpus-format JSON string for a list of layouts (coordinates at bin centers)
std::string corpus_to_json(const std::vector<Layout>& layouts, const Vocabulary& vocab,
                           double canvas_w, double canvas_h);
void write_corpus(const std::string& path, const std::vector<Layout>& layouts,
                  const Vocabulary& vocab, double canvas_w, double canvas_h);
// plain layout list from a corpus file (no splitting), e.g. generated samples
std::vector<Layout> read_layouts(const std::string& path, const Vocabulary& vocab, int n_max);

}  // namespace hd
