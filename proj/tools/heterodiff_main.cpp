#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "heterodiff/config.hpp"
#include "heterodiff/corpus.hpp"
#include "heterodiff/denoiser.hpp"
#include "heterodiff/kernels.hpp"
#include "heterodiff/metrics.hpp"
#include "heterodiff/sampler.hpp"
#include "heterodiff/svg.hpp"
#include "heterodiff/tokenseq.hpp"
#include "heterodiff/transition.hpp"

namespace fs = std::filesystem;
using namespace hd;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

struct GlobalOpts {
    std::string config_path;
    std::string profile = "desk";
    bool profile_set = false;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string kernels;
    bool deterministic = false;  // accepted for script compatibility; single-process anyway
};

// precedence: profile defaults < HETERODIFF_SEED < config file < flags
RunConfig build_config(const GlobalOpts& g) {
    RunConfig cfg = profile_defaults(g.profile_set ? g.profile : "desk");
    if (const char* env = std::getenv("HETERODIFF_SEED")) {
        uint64_t v = std::strtoull(env, nullptr, 10);
        cfg.seed = cfg.train.seed = cfg.gen.seed = v;
    }
    if (!g.config_path.empty()) {
        std::string text = read_file(g.config_path);
        if (g.profile_set) {  // the flag wins over a profile named in the file
            auto j = nlohmann::json::parse(text);
            j.erase("profile");
            text = j.dump();
        }
        merge_config_json(cfg, text);
    }
    if (g.seed_set) cfg.seed = cfg.train.seed = cfg.gen.seed = g.seed;
    cfg.validate();
    return cfg;
}

Vocabulary vocab_for_file(const RunConfig& cfg, const std::string& corpus_path) {
    if (!cfg.type_names.empty()) return Vocabulary(cfg.K, cfg.type_names);
    auto names = scan_type_names(corpus_path);
    if (names.empty()) names = kBuiltinTypeNames;
    return Vocabulary(cfg.K, names);
}

// token state -> renderable frame; MASK types map to -1, PAD blocks are skipped
Frame frame_from_seq(const TokenSeq& seq, const Vocabulary& vocab, int t) {
    Frame f;
    f.t = t;
    for (int b = 0; b < seq.n_max; ++b) {
        int base = 1 + 6 * b;
        int tok = seq.tokens[size_t(base)];
        if (tok == vocab.pad()) continue;
        FrameElement e;
        e.type = tok == vocab.mask() ? -1 : vocab.type_id(tok);
        e.l = seq.tokens[size_t(base + 1)];
        e.t = seq.tokens[size_t(base + 2)];
        e.r = seq.tokens[size_t(base + 3)];
        e.b = seq.tokens[size_t(base + 4)];
        f.elements.push_back(e);
    }
    return f;
}

std::vector<Layout> all_layouts(const Corpus& c) {
    std::vector<Layout> all = c.train;
    all.insert(all.end(), c.val.begin(), c.val.end());
    all.insert(all.end(), c.test.begin(), c.test.end());
    return all;
}

TransitionSet transitions_for(const CheckpointMeta& meta) {
    return TransitionSet(meta.denoiser.vocab, meta.sched, meta.coord_kind, meta.type_kind);
}

std::vector<std::string> split_csv_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void write_trace_svgs(const std::map<int, std::vector<Frame>>& traces, const Vocabulary& vocab,
                      double cw, double ch, const std::string& dir) {
    double sw = 120, sh = ch / cw * 120;  // thumbnails, canvas aspect preserved
    for (const auto& [idx, frames] : traces) {
        for (const auto& fr : frames)
            write_file(dir + "/s" + std::to_string(idx) + "_t" + std::to_string(fr.t) + ".svg",
                       render_frame_svg(fr, vocab, sw, sh));
        write_file(dir + "/s" + std::to_string(idx) + "_strip.svg",
                   render_strip_svg(frames, vocab, sw, sh));
    }
}

// ---- subcommand bodies ----------------------------------------------------

void cmd_synth(const GlobalOpts& g, int n, const std::string& out) {
    RunConfig cfg = build_config(g);
    SynthSpec ss;
    ss.n_layouts = n;
    ss.K = cfg.K;
    ss.type_names = cfg.type_names;
    ss.n_max = cfg.n_max;
    ss.canvas_w = cfg.canvas_w;
    ss.canvas_h = cfg.canvas_h;
    Corpus c = synth_corpus(ss, cfg.seed);
    Vocabulary vocab = make_vocab(cfg);
    auto layouts = all_layouts(c);
    write_corpus(out, layouts, vocab, c.canvas_w, c.canvas_h);
    std::cout << "wrote " << layouts.size() << " layouts to " << out << "\n";
}

void cmd_ingest(const GlobalOpts& g, const std::string& in, const std::string& out_dir) {
    RunConfig cfg = build_config(g);
    Vocabulary vocab = vocab_for_file(cfg, in);
    Corpus c = load_corpus(in, vocab, cfg.n_max, cfg.seed);
    write_corpus(out_dir + "/train.json", c.train, vocab, c.canvas_w, c.canvas_h);
    write_corpus(out_dir + "/val.json", c.val, vocab, c.canvas_w, c.canvas_h);
    write_corpus(out_dir + "/test.json", c.test, vocab, c.canvas_w, c.canvas_h);
    std::cout << "split train=" << c.train.size() << " val=" << c.val.size()
              << " test=" << c.test.size() << "\n";
}

void cmd_train(const GlobalOpts& g, const std::string& corpus_path, const std::string& out_dir,
               int steps_override, const std::string& resume_path, int log_every) {
    RunConfig cfg = build_config(g);
    if (steps_override > 0) cfg.train.total_steps = steps_override;

    std::unique_ptr<Denoiser<float>> model;
    std::unique_ptr<Trainer> trainer;
    CheckpointMeta meta;
    std::unique_ptr<TransitionSet> ts;
    Vocabulary vocab(cfg.K, kBuiltinTypeNames);

    if (!resume_path.empty()) {
        LoadedCheckpoint ck = load_checkpoint(resume_path);
        meta = ck.meta;
        if (steps_override > 0) meta.train.total_steps = steps_override;
        vocab = meta.denoiser.vocab;
        ts = std::make_unique<TransitionSet>(transitions_for(meta));
        model = std::move(ck.model);
        ck.meta.train.total_steps = meta.train.total_steps;
        trainer = resume_trainer(*model, *ts, ck);
    } else {
        vocab = vocab_for_file(cfg, corpus_path);
        cfg.type_names = vocab.type_names;
        meta.denoiser = make_denoiser_config(cfg);
        meta.sched = cfg.sched;
        meta.coord_kind = cfg.coord_matrix;
        meta.type_kind = cfg.type_matrix;
        meta.train = cfg.train;
        meta.canvas_w = cfg.canvas_w;
        meta.canvas_h = cfg.canvas_h;
        ts = std::make_unique<TransitionSet>(vocab, cfg.sched, cfg.coord_matrix,
                                             cfg.type_matrix);
        model = std::make_unique<Denoiser<float>>(meta.denoiser);
        Rng init_rng(mix64(cfg.seed, 0x696e6974));
        model->init_params(init_rng);
        trainer = std::make_unique<Trainer>(*model, *ts, cfg.train);
    }

    Corpus corpus = load_corpus(corpus_path, vocab, meta.denoiser.n_max, cfg.seed);
    meta.count_prior = corpus.count_prior;
    meta.canvas_w = corpus.canvas_w;
    meta.canvas_h = corpus.canvas_h;

    fs::create_directories(out_dir);
    std::string csv_path = out_dir + "/loss.csv";
    bool fresh = resume_path.empty() || !fs::exists(csv_path);
    std::ofstream csv(csv_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    if (fresh) csv << "step,total,vlb,aux,prior,mean_t,ms\n";

    int total = trainer->config().total_steps;
    while (model->step < total) {
        TrainLogRow row = trainer->step(corpus);
        csv << row.step << ',' << row.total << ',' << row.vlb << ',' << row.aux << ','
            << row.prior << ',' << row.mean_t << ',' << row.ms << '\n';
        if (log_every > 0 && (row.step % log_every == 0 || row.step == total))
            std::cout << "step " << row.step << "/" << total << " total=" << row.total
                      << " vlb=" << row.vlb << " aux=" << row.aux << "\n";
    }
    csv.flush();

    meta.step = model->step;
    std::string ckpt = out_dir + "/model.ckpt";
    save_checkpoint(ckpt, meta, *model, trainer.get());
    std::cout << "saved " << ckpt << " at step " << meta.step << "\n";
}

void cmd_sample(const GlobalOpts& g, const std::string& mode, const std::string& ckpt_path,
                int samples, const std::string& out, const std::string& types_arg,
                const std::string& in_path, int t_refine, const std::string& trace_dir,
                bool greedy_final, bool use_ema, int retry_budget) {
    RunConfig cfg = build_config(g);
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    const Vocabulary& vocab = ck.meta.denoiser.vocab;
    TransitionSet ts = transitions_for(ck.meta);

    GenerationConfig gen = cfg.gen;
    gen.n_max = ck.meta.denoiser.n_max;
    if (samples > 0) gen.samples = samples;
    if (t_refine >= 0) gen.T_refine = t_refine;
    if (greedy_final) gen.greedy_final = true;
    if (retry_budget >= 0) gen.retry_budget = retry_budget;
    if (gen.T_ugen > ts.T()) gen.T_ugen = ts.T();
    if (gen.T_gentype > ts.T()) gen.T_gentype = ts.T();
    if (gen.T_refine > ts.T())
        throw std::runtime_error("T_refine exceeds the checkpoint's T=" +
                                 std::to_string(ts.T()));

    PredictFn predict = predictor(*ck.model, use_ema);

    std::map<int, std::vector<Frame>> traces;
    TraceFn trace = nullptr;
    int t_start = mode == "ugen" ? gen.T_ugen : mode == "gentype" ? gen.T_gentype : gen.T_refine;
    if (!trace_dir.empty())
        trace = [&](int idx, int t, const TokenSeq& seq) {
            if (t < t_start)  // one frame per reverse step; the start state is implied
                traces[idx].push_back(frame_from_seq(seq, vocab, t));
        };

    SampleStats stats;
    std::vector<Layout> layouts;
    if (mode == "ugen") {
        Corpus prior;
        prior.count_prior = ck.meta.count_prior;
        if (prior.count_prior.empty())
            throw std::runtime_error("checkpoint carries no element-count prior");
        layouts = generate_unconditional(predict, prior, ts, gen, &stats, trace);
    } else if (mode == "gentype") {
        if (types_arg.empty()) throw std::runtime_error("gentype needs --types a,b,c");
        std::vector<int> ids;
        for (const auto& name : split_csv_list(types_arg)) ids.push_back(vocab.type_id_by_name(name));
        layouts = generate_conditioned_types(predict, ids, ts, gen, &stats, trace);
    } else if (mode == "refine") {
        if (in_path.empty()) throw std::runtime_error("refine needs --in layouts.json");
        auto flawed = read_layouts(in_path, vocab, gen.n_max);
        layouts = refine_batch(predict, flawed, ts, gen, trace);
    } else {
        throw std::runtime_error("unknown mode '" + mode + "' (ugen|gentype|refine)");
    }

    write_corpus(out, layouts, vocab, ck.meta.canvas_w, ck.meta.canvas_h);
    if (!trace_dir.empty())
        write_trace_svgs(traces, vocab, ck.meta.canvas_w, ck.meta.canvas_h, trace_dir);
    std::cout << "wrote " << layouts.size() << " layouts to " << out << " (retries "
              << stats.retries << ", abandoned " << stats.masked_failures << ")\n";
}

void cmd_corrupt(const GlobalOpts& g, const std::string& in, int index, const std::string& out_dir,
                 bool all_steps, bool dump_matrices) {
    RunConfig cfg = build_config(g);
    Vocabulary vocab = vocab_for_file(cfg, in);
    auto layouts = read_layouts(in, vocab, cfg.n_max);
    if (index < 0 || size_t(index) >= layouts.size())
        throw std::runtime_error("--index out of range (file has " +
                                 std::to_string(layouts.size()) + " layouts)");
    TransitionSet ts(vocab, cfg.sched, cfg.coord_matrix, cfg.type_matrix);
    if (dump_matrices) {
        fs::create_directories(out_dir);
        ts.dump_csv(out_dir);
    }
    TokenSeq x0 = tokenize(layouts[size_t(index)], vocab, cfg.n_max);

    std::vector<int> points;
    if (all_steps) {
        for (int t = 0; t <= ts.T(); ++t) points.push_back(t);
    } else {
        for (int j = 0; j <= 6; ++j)  // t at 0, T/6, ..., T
            points.push_back(int(std::llround(double(ts.T()) * j / 6.0)));
    }

    Rng rng(cfg.seed);
    std::vector<Frame> frames;
    for (int t : points) {
        TokenSeq xt = ts.corrupt_sequence(x0, t, rng);
        frames.push_back(frame_from_seq(xt, vocab, t));
    }
    double sw = 160, sh = cfg.canvas_h / cfg.canvas_w * 160;
    for (const auto& fr : frames)
        write_file(out_dir + "/frame_t" + std::to_string(fr.t) + ".svg",
                   render_frame_svg(fr, vocab, sw, sh));
    write_file(out_dir + "/strip.svg", render_strip_svg(frames, vocab, sw, sh));
    std::cout << "wrote " << frames.size() << " frames + strip to " << out_dir << "\n";
}

void cmd_eval(const GlobalOpts& g, const std::string& generated, const std::string& reference,
              const std::string& out) {
    RunConfig cfg = build_config(g);
    std::vector<std::string> names = cfg.type_names;
    if (names.empty()) {
        names = scan_type_names(generated);
        for (auto& n : scan_type_names(reference)) names.push_back(n);
        if (names.empty()) names = kBuiltinTypeNames;
    }
    Vocabulary vocab(cfg.K, names);
    auto gen = read_layouts(generated, vocab, cfg.n_max);
    auto ref = read_layouts(reference, vocab, cfg.n_max);
    MetricsReport rep = eval_report(gen, ref, cfg.K, ignore_type_ids(cfg, vocab));
    std::string json = rep.to_json();
    if (out.empty())
        std::cout << json << "\n";
    else {
        write_file(out, json + "\n");
        std::cout << "wrote " << out << "\n";
    }
}

void cmd_render(const GlobalOpts& g, const std::string& in, const std::string& out_dir) {
    RunConfig cfg = build_config(g);
    Vocabulary vocab = vocab_for_file(cfg, in);
    auto layouts = read_layouts(in, vocab, cfg.n_max);
    for (size_t i = 0; i < layouts.size(); ++i)
        write_file(out_dir + "/layout_" + std::to_string(i) + ".svg",
                   render_layout_svg(layouts[i], vocab, cfg.canvas_w, cfg.canvas_h));
    std::cout << "wrote " << layouts.size() << " SVGs to " << out_dir << "\n";
}

void cmd_plot(const GlobalOpts& g, const std::string& csv_path, bool schedules, bool log_y,
              const std::string& out) {
    RunConfig cfg = build_config(g);
    std::vector<std::pair<std::string, std::vector<double>>> series;
    std::string x_label, y_label;
    if (schedules) {
        ScheduleParams power = cfg.sched, linear = cfg.sched;
        power.coord_kind = CoordScheduleKind::power_law;
        linear.coord_kind = CoordScheduleKind::linear;
        series.emplace_back("power_law", cumulative_std_curve(power, cfg.K));
        series.emplace_back("linear", cumulative_std_curve(linear, cfg.K));
        x_label = "t";
        y_label = "entry std of cumulative coordinate matrix";
    } else if (!csv_path.empty()) {
        std::ifstream in(csv_path);
        if (!in) throw std::runtime_error("cannot open " + csv_path);
        std::string line;
        if (!std::getline(in, line)) throw std::runtime_error("empty csv " + csv_path);
        auto headers = split_csv_list(line);
        std::vector<size_t> keep;
        for (size_t i = 0; i < headers.size(); ++i)
            if (headers[i] == "total" || headers[i] == "vlb" || headers[i] == "aux") {
                keep.push_back(i);
                series.emplace_back(headers[i], std::vector<double>{});
            }
        if (keep.empty()) throw std::runtime_error("csv has no total/vlb/aux columns");
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto cells = split_csv_list(line);
            for (size_t k = 0; k < keep.size(); ++k)
                if (keep[k] < cells.size()) series[k].second.push_back(std::stod(cells[keep[k]]));
        }
        x_label = "step";
        y_label = "loss";
    } else {
        throw std::runtime_error("plot needs --csv loss.csv or --schedules");
    }
    write_file(out, render_chart_svg(series, x_label, y_label, log_y));
    std::cout << "wrote " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"discrete denoising diffusion for layout token sequences"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    auto* opt_config = app.add_option("--config", g.config_path, "JSON config file");
    auto* opt_profile = app.add_option("--profile", g.profile, "preset: desk or paper")
                            ->check(CLI::IsMember({"desk", "paper"}));
    auto* opt_seed = app.add_option("--seed", g.seed, "global seed (also HETERODIFF_SEED)");
    app.add_option("--kernels", g.kernels, "compute backend: auto, scalar, simd")
        ->check(CLI::IsMember({"auto", "scalar", "simd"}));
    app.add_flag("--deterministic", g.deterministic, "force serial execution");

    // synth
    int synth_n = 2000;
    std::string synth_out = "corpus.json";
    auto* synth = app.add_subcommand("synth", "generate a synthetic layout corpus");
    synth->add_option("--n", synth_n, "number of layouts");
    synth->add_option("--out", synth_out, "output corpus JSON");

    // ingest
    std::string ingest_in, ingest_out = "data";
    auto* ingest = app.add_subcommand("ingest", "split a corpus JSON into train/val/test");
    ingest->add_option("--in", ingest_in, "corpus JSON")->required();
    ingest->add_option("--out", ingest_out, "output directory");

    // train
    std::string train_corpus, train_out = "run", train_resume;
    int train_steps = 0, train_log_every = 50;
    auto* train = app.add_subcommand("train", "train the denoiser");
    train->add_option("--corpus", train_corpus, "corpus JSON")->required();
    train->add_option("--out", train_out, "output directory (checkpoint + loss.csv)");
    train->add_option("--steps", train_steps, "override total steps");
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    train->add_option("--log-every", train_log_every, "console log cadence (0 = quiet)");

    // sample
    std::string sample_mode = "ugen", sample_ckpt, sample_out = "samples.json";
    std::string sample_types, sample_in, sample_trace;
    int sample_n = 0, sample_t_refine = -1, sample_retry = -1;
    bool sample_greedy = false, sample_ema = true;
    auto* sample = app.add_subcommand("sample", "generate layouts from a checkpoint");
    sample->add_option("--mode", sample_mode, "ugen, gentype, or refine")
        ->check(CLI::IsMember({"ugen", "gentype", "refine"}));
    sample->add_option("--ckpt", sample_ckpt, "model checkpoint")->required();
    sample->add_option("--samples", sample_n, "number of samples");
    sample->add_option("--out", sample_out, "output layouts JSON");
    sample->add_option("--types", sample_types, "comma-separated type names (gentype)");
    sample->add_option("--in", sample_in, "layouts to refine (refine)");
    sample->add_option("--t-refine", sample_t_refine, "refinement injection step");
    sample->add_option("--trace", sample_trace, "directory for per-step SVG frames");
    sample->add_flag("--greedy-final", sample_greedy, "argmax instead of sampling at t=1");
    sample->add_flag("--ema,!--no-ema", sample_ema, "use EMA weights (default on)");
    sample->add_option("--retry-budget", sample_retry, "masked-type retries per call");

    // corrupt
    std::string corrupt_in, corrupt_out = "corrupt";
    int corrupt_index = 0;
    bool corrupt_all = false, corrupt_dump = false;
    auto* corrupt = app.add_subcommand("corrupt", "forward-corruption strip for one layout");
    corrupt->add_option("--in", corrupt_in, "layouts JSON")->required();
    corrupt->add_option("--index", corrupt_index, "layout index in the file");
    corrupt->add_option("--out", corrupt_out, "output directory");
    corrupt->add_flag("--all-steps", corrupt_all, "every t instead of 7 evenly spaced points");
    corrupt->add_flag("--dump-matrices", corrupt_dump, "write transition matrices as CSV");

    // eval
    std::string eval_gen, eval_ref, eval_out;
    auto* eval = app.add_subcommand("eval", "metric report: generated vs reference");
    eval->add_option("--generated", eval_gen, "generated layouts JSON")->required();
    eval->add_option("--reference", eval_ref, "reference layouts JSON")->required();
    eval->add_option("--out", eval_out, "report path (default: stdout)");

    // render
    std::string render_in, render_out = "render";
    auto* render = app.add_subcommand("render", "SVG per layout");
    render->add_option("--in", render_in, "layouts JSON")->required();
    render->add_option("--out", render_out, "output directory");

    // plot
    std::string plot_csv, plot_out = "plot.svg";
    bool plot_sched = false, plot_logy = false;
    auto* plot = app.add_subcommand("plot", "chart a loss CSV or the schedule comparison");
    plot->add_option("--csv", plot_csv, "training loss CSV");
    plot->add_flag("--schedules", plot_sched, "cumulative-std curves, power-law vs linear");
    plot->add_flag("--log-y", plot_logy, "logarithmic y axis");
    plot->add_option("--out", plot_out, "output SVG");

    (void)opt_config;
    try {
        app.parse(argc, argv);
        g.profile_set = opt_profile->count() > 0;
        g.seed_set = opt_seed->count() > 0;
        if (!g.kernels.empty()) kernels::set_backend_by_name(g.kernels);

        if (synth->parsed()) cmd_synth(g, synth_n, synth_out);
        if (ingest->parsed()) cmd_ingest(g, ingest_in, ingest_out);
        if (train->parsed())
            cmd_train(g, train_corpus, train_out, train_steps, train_resume, train_log_every);
        if (sample->parsed())
            cmd_sample(g, sample_mode, sample_ckpt, sample_n, sample_out, sample_types,
                       sample_in, sample_t_refine, sample_trace, sample_greedy, sample_ema,
                       sample_retry);
        if (corrupt->parsed())
            cmd_corrupt(g, corrupt_in, corrupt_index, corrupt_out, corrupt_all, corrupt_dump);
        if (eval->parsed()) cmd_eval(g, eval_gen, eval_ref, eval_out);
        if (render->parsed()) cmd_render(g, render_in, render_out);
        if (plot->parsed()) cmd_plot(g, plot_csv, plot_sched, plot_logy, plot_out);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);  // prints help/errors itself; 0 for --help
        return code == 0 ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
