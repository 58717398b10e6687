#include "heterodiff/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "heterodiff/tokenseq.hpp"

using json = nlohmann::json;

namespace hd {

static json parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw CorpusError("malformed JSON in '" + path + "': " + e.what());
    }
}

static std::vector<ContinuousBox> parse_layout(const json& jl, const std::string& where) {
    if (!jl.is_object() || !jl.contains("elements") || !jl["elements"].is_array())
        throw CorpusError(where + ": layout must be an object with an \"elements\" array");
    std::vector<ContinuousBox> boxes;
    for (const auto& je : jl["elements"]) {
        ContinuousBox b;
        try {
            b.type_name = je.at("type").get<std::string>();
            b.l = je.at("l").get<double>();
            b.t = je.at("t").get<double>();
            b.r = je.at("r").get<double>();
            b.b = je.at("b").get<double>();
        } catch (const json::exception& e) {
            throw CorpusError(where + ": bad element: " + e.what());
        }
        for (double v : {b.l, b.t, b.r, b.b})
            if (!(v >= 0.0 && v <= 1.0))
                throw CorpusError(where + ": coordinate " + std::to_string(v) + " outside [0,1]");
        if (b.l > b.r || b.t > b.b) throw CorpusError(where + ": inverted box");
        boxes.push_back(std::move(b));
    }
    return boxes;
}

std::vector<std::string> scan_type_names(const std::string& path) {
    json j = parse_file(path);
    if (!j.contains("layouts") || !j["layouts"].is_array())
        throw CorpusError("'" + path + "': missing \"layouts\" array");
    std::set<std::string> names;
    for (const auto& jl : j["layouts"])
        if (jl.is_object() && jl.contains("elements") && jl["elements"].is_array())
            for (const auto& je : jl["elements"])
                if (je.is_object() && je.contains("type") && je["type"].is_string())
                    names.insert(je["type"].get<std::string>());
    return {names.begin(), names.end()};
}

static std::vector<double> compute_count_prior(const std::vector<Layout>& train, int n_max) {
    std::vector<double> prior(n_max, 0.0);
    for (const auto& l : train) prior[l.n() - 1] += 1.0;
    double total = 0;
    for (double v : prior) total += v;
    if (total > 0)
        for (double& v : prior) v /= total;
    return prior;
}

Corpus split_corpus(std::vector<Layout> layouts, int n_max, uint64_t split_seed,
                    double canvas_w, double canvas_h) {
    std::erase_if(layouts, [&](const Layout& l) { return l.n() == 0 || l.n() > n_max; });
    if (layouts.empty()) throw CorpusError("corpus empty after filtering");
    // Fisher-Yates with our own rng so the split is pinned across platforms
    Rng rng(split_seed);
    for (int i = int(layouts.size()) - 1; i > 0; --i)
        std::swap(layouts[i], layouts[rng.uniform_int(i + 1)]);
    size_t n = layouts.size();
    size_t n_train = size_t(std::lround(0.9 * double(n)));
    size_t n_val = size_t(std::lround(0.05 * double(n)));
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);
    Corpus c;
    c.canvas_w = canvas_w;
    c.canvas_h = canvas_h;
    c.train.assign(layouts.begin(), layouts.begin() + n_train);
    c.val.assign(layouts.begin() + n_train, layouts.begin() + n_train + n_val);
    c.test.assign(layouts.begin() + n_train + n_val, layouts.end());
    c.count_prior = compute_count_prior(c.train, n_max);
    return c;
}

Corpus load_corpus(const std::string& path, const Vocabulary& vocab, int n_max,
                   uint64_t split_seed) {
    json j = parse_file(path);
    if (!j.contains("layouts") || !j["layouts"].is_array())
        throw CorpusError("'" + path + "': missing \"layouts\" array");
    double cw = 1, ch = 1;
    if (j.contains("canvas")) {
        cw = j["canvas"].value("w", 1.0);
        ch = j["canvas"].value("h", 1.0);
        if (!(cw > 0) || !(ch > 0)) throw CorpusError("'" + path + "': canvas must be positive");
    }
    std::vector<Layout> layouts;
    size_t idx = 0;
    for (const auto& jl : j["layouts"]) {
        auto boxes = parse_layout(jl, "layout " + std::to_string(idx));
        ++idx;
        if (boxes.empty() || int(boxes.size()) > n_max) continue;  // filtered, not an error
        Layout l = discretize(boxes, vocab);
        l.canvas_w = cw;
        l.canvas_h = ch;
        layouts.push_back(std::move(l));
    }
    return split_corpus(std::move(layouts), n_max, split_seed, cw, ch);
}

std::vector<Layout> read_layouts(const std::string& path, const Vocabulary& vocab, int n_max) {
    json j = parse_file(path);
    if (!j.contains("layouts") || !j["layouts"].is_array())
        throw CorpusError("'" + path + "': missing \"layouts\" array");
    std::vector<Layout> out;
    size_t idx = 0;
    for (const auto& jl : j["layouts"]) {
        auto boxes = parse_layout(jl, "layout " + std::to_string(idx));
        ++idx;
        if (boxes.empty()) throw CorpusError("layout " + std::to_string(idx - 1) + " is empty");
        if (int(boxes.size()) > n_max)
            throw CorpusError("layout " + std::to_string(idx - 1) + " exceeds N_max");
        out.push_back(discretize(boxes, vocab));
    }
    return out;
}

std::string corpus_to_json(const std::vector<Layout>& layouts, const Vocabulary& vocab,
                           double canvas_w, double canvas_h) {
    json j;
    j["canvas"] = {{"w", canvas_w}, {"h", canvas_h}};
    j["layouts"] = json::array();
    for (const auto& l : layouts) {
        json jl;
        jl["elements"] = json::array();
        for (const auto& e : l.elements) {
            jl["elements"].push_back({{"type", vocab.type_names[e.type]},
                                      {"l", bin_center(e.l, vocab.K)},
                                      {"t", bin_center(e.t, vocab.K)},
                                      {"r", bin_center(e.r, vocab.K)},
                                      {"b", bin_center(e.b, vocab.K)}});
        }
        j["layouts"].push_back(std::move(jl));
    }
    return j.dump(1);
}

void write_corpus(const std::string& path, const std::vector<Layout>& layouts,
                  const Vocabulary& vocab, double canvas_w, double canvas_h) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path);
    if (!out) throw CorpusError("cannot write '" + path + "'");
    out << corpus_to_json(layouts, vocab, canvas_w, canvas_h) << '\n';
}

// ---- synthetic corpus ----------------------------------------------------------
//
// All templates place boxes directly on integer bins with >= 1 bin of clearance, so
// overlap is exactly zero and every element shares an edge mode with a neighbour
// (alignment exactly zero). Written back out as bin centers, they re-discretize to
// the same bins.

namespace {

struct TemplateCtx {
    int K;
    int n_max;
    std::vector<int> role_type;  // role index (button/image/text/toolbar) -> type id
    Rng* rng;
};

int role(const TemplateCtx& c, int r) { return c.role_type[size_t(r) % c.role_type.size()]; }
// roles
constexpr int KButton = 0, KImage = 1, KText = 2, KToolbar = 3;

// stack of same-width blocks below an optional toolbar
Layout tmpl_column(const TemplateCtx& c) {
    Rng& rng = *c.rng;
    int K = c.K;
    int m = 1 + rng.uniform_int(std::max(1, K / 8));            // margin
    int th = 2 + rng.uniform_int(std::max(1, K / 10));          // toolbar height
    int gap = 1 + rng.uniform_int(2);
    int bh = 2 + rng.uniform_int(std::max(1, K / 8));           // block height
    Layout l;
    l.elements.push_back({role(c, KToolbar), m, m, K - 1 - m, m + th - 1});
    int want = 2 + rng.uniform_int(std::min(4, c.n_max - 2) + 1);
    int y = m + th - 1 + 1 + gap;
    for (int i = 0; i < want && y + bh - 1 <= K - 1 - m && l.n() < c.n_max; ++i) {
        l.elements.push_back({role(c, KText), m, y, K - 1 - m, y + bh - 1});
        y += bh + gap;
    }
    canonicalize(l);
    return l;
}

// r x c grid of image cells, all edges shared along rows/columns
Layout tmpl_grid(const TemplateCtx& c) {
    Rng& rng = *c.rng;
    int K = c.K;
    int rows = 2 + rng.uniform_int(2);
    int cols = 2 + rng.uniform_int(2);
    while (rows * cols > c.n_max) (rows > cols ? rows : cols)--;
    int m = 1 + rng.uniform_int(std::max(1, K / 10));
    int gap = 1 + rng.uniform_int(2);
    int cw = (K - 2 * m - (cols - 1) * gap) / cols;
    int chh = (K - 2 * m - (rows - 1) * gap) / rows;
    cw = std::max(cw, 1);
    chh = std::max(chh, 1);
    Layout l;
    for (int r = 0; r < rows; ++r)
        for (int cc = 0; cc < cols; ++cc) {
            int x = m + cc * (cw + gap);
            int y = m + r * (chh + gap);
            l.elements.push_back({role(c, KImage), x, y, x + cw - 1, y + chh - 1});
        }
    canonicalize(l);
    return l;
}

// toolbar on top, text rows, right-aligned button at the bottom
Layout tmpl_toolbar_list(const TemplateCtx& c) {
    Rng& rng = *c.rng;
    int K = c.K;
    int m = 1 + rng.uniform_int(std::max(1, K / 8));
    int th = 2 + rng.uniform_int(2);
    int gap = 1 + rng.uniform_int(2);
    int rh = 1 + rng.uniform_int(std::max(1, K / 12));
    int bh = 2 + rng.uniform_int(2);
    int bw = std::max(2, K / 4);
    Layout l;
    l.elements.push_back({role(c, KToolbar), m, m, K - 1 - m, m + th - 1});
    int bottom_y = K - 1 - m;                       // button row at the bottom margin
    int y = m + th + gap;
    int limit = bottom_y - bh - gap;
    int want = 1 + rng.uniform_int(std::max(1, c.n_max - 3) + 1);
    for (int i = 0; i < want && y + rh - 1 <= limit && l.n() < c.n_max - 1; ++i) {
        l.elements.push_back({role(c, KText), m, y, K - 1 - m, y + rh - 1});
        y += rh + gap;
    }
    // right edge shared with the list rows
    l.elements.push_back({role(c, KButton), K - 1 - m - (bw - 1), bottom_y - bh + 1, K - 1 - m, bottom_y});
    canonicalize(l);
    return l;
}

// two columns with a shared top edge
Layout tmpl_double_column(const TemplateCtx& c) {
    Rng& rng = *c.rng;
    int K = c.K;
    int m = 1 + rng.uniform_int(std::max(1, K / 10));
    int gap = 1 + rng.uniform_int(2);
    int colw = (K - 2 * m - gap) / 2;
    int h1 = 2 + rng.uniform_int(std::max(1, K / 6));
    int h2 = 2 + rng.uniform_int(std::max(1, K / 6));
    Layout l;
    int cap = c.n_max;
    int k1 = 2, k2 = 2;
    while (k1 + k2 < cap && rng.u01() < 0.5) (rng.u01() < 0.5 ? k1 : k2)++;
    int x0 = m, x1 = m + colw + gap;
    int y = m;
    for (int i = 0; i < k1 && y + h1 - 1 <= K - 1 - m; ++i, y += h1 + gap)
        l.elements.push_back({role(c, KImage), x0, y, x0 + colw - 1, y + h1 - 1});
    y = m;
    for (int i = 0; i < k2 && y + h2 - 1 <= K - 1 - m; ++i, y += h2 + gap)
        l.elements.push_back({role(c, KText), x1, y, x1 + colw - 1, y + h2 - 1});
    canonicalize(l);
    return l;
}

// one hero image (n = 1; alignment trivially zero)
Layout tmpl_hero(const TemplateCtx& c) {
    Rng& rng = *c.rng;
    int K = c.K;
    int m = 1 + rng.uniform_int(std::max(1, K / 6));
    int mv = 1 + rng.uniform_int(std::max(1, K / 6));
    Layout l;
    l.elements.push_back({role(c, KImage), m, mv, K - 1 - m, K - 1 - mv});
    return l;
}

}  // namespace

Corpus synth_corpus(const SynthSpec& spec, uint64_t seed) {
    if (spec.n_layouts < 20) throw std::invalid_argument("synth_corpus: need n_layouts >= 20");
    std::vector<std::string> names =
        spec.type_names.empty()
            ? std::vector<std::string>{"button", "image", "text", "toolbar"}
            : spec.type_names;
    Vocabulary vocab(spec.K, names);

    TemplateCtx ctx;
    ctx.K = spec.K;
    ctx.n_max = spec.n_max;
    // role ids under the builtin (sorted) names; arbitrary vocabularies wrap around
    for (int r = 0; r < 4; ++r) {
        const char* builtin[] = {"button", "image", "text", "toolbar"};
        int id = vocab.type_id_by_name(builtin[r]);
        ctx.role_type.push_back(id >= 0 ? id : r % vocab.C());
    }

    using TemplateFn = Layout (*)(const TemplateCtx&);
    const TemplateFn templates[] = {tmpl_column, tmpl_grid, tmpl_toolbar_list,
                                    tmpl_double_column, tmpl_hero};
    std::vector<double> mix = spec.style_mix;
    if (mix.empty()) mix = {1.0, 1.0, 1.0, 1.0, 0.4};
    mix.resize(std::size(templates), 0.0);

    Rng rng(seed);
    ctx.rng = &rng;
    std::vector<Layout> layouts;
    layouts.reserve(spec.n_layouts);
    long attempts = 0, max_attempts = 1000L * spec.n_layouts;
    while (int(layouts.size()) < spec.n_layouts) {
        if (++attempts > max_attempts)
            throw std::runtime_error("synth_corpus: templates cannot satisfy spec (K too small?)");
        int which = rng.categorical<double>(mix);
        Layout l = templates[which](ctx);
        if (l.n() < 1 || l.n() > spec.n_max) continue;
        bool ok = true;
        for (const auto& e : l.elements) ok = ok && element_valid(e, vocab);
        if (!ok) continue;  // a template overflowed the bin range (tiny K)
        l.canvas_w = spec.canvas_w;
        l.canvas_h = spec.canvas_h;
        layouts.push_back(std::move(l));
    }
    // split under the same seed; synth is one-shot deterministic
    return split_corpus(std::move(layouts), spec.n_max, seed, spec.canvas_w, spec.canvas_h);
}

Layout perturb(const Layout& layout, double std, int K, Rng& rng) {
    if (std < 0) throw std::invalid_argument("perturb: std must be >= 0");
    Layout out = layout;
    for (auto& e : out.elements) {
        auto jitter = [&](int bin) {
            double v = bin_center(bin, K) + rng.normal(0.0, std);
            return discretize_coord(v, K);
        };
        e.l = jitter(e.l);
        e.t = jitter(e.t);
        e.r = jitter(e.r);
        e.b = jitter(e.b);
        if (e.l > e.r) std::swap(e.l, e.r);
        if (e.t > e.b) std::swap(e.t, e.b);
    }
    canonicalize(out);
    return out;
}

int count_prior_sample(const Corpus& corpus, Rng& rng) {
    if (corpus.count_prior.empty()) throw CorpusError("count_prior_sample: empty corpus");
    return rng.categorical<double>(corpus.count_prior) + 1;
}

}  // namespace hd
