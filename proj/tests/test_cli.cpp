#include <doctest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int code = -1;
    std::string out;  // stdout + stderr interleaved
};

const std::string& workdir() {
    static std::string dir = [] {
        std::string d = "/tmp/hd_cli_" + std::to_string(::getpid());
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

CmdResult run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    std::string capture = workdir() + "/out_" + std::to_string(counter++) + ".txt";
    std::string cmd = env + (env.empty() ? "" : " ") + std::string(HD_CLI_BINARY) + " " + args +
                      " > " + capture + " 2>&1";
    int rc = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    std::ifstream in(capture);
    std::ostringstream os;
    os << in.rdbuf();
    r.out = os.str();
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// tiny-but-real configuration so train/sample finish in milliseconds
const std::string& small_config() {
    static std::string path = [] {
        std::string p = workdir() + "/small.json";
        std::ofstream out(p);
        out << R"({
  "K": 16, "n_max": 4,
  "schedule": {"T": 12, "T_tilde": 10, "g": 10.0, "h": 3.0},
  "layers": 1, "heads": 2, "model_dim": 32, "ff_dim": 64, "dropout": 0.0,
  "train": {"batch_size": 8, "total_steps": 8, "lr": 0.003},
  "gen": {"T_ugen": 12, "T_gentype": 10, "T_refine": 4, "samples": 4}
})";
        return p;
    }();
    return path;
}

std::string cfg_args() { return "--config " + small_config(); }

// one shared synth corpus + one shared trained checkpoint for the suite
const std::string& corpus_path() {
    static std::string path = [] {
        std::string p = workdir() + "/corpus.json";
        CmdResult r = run_cli(cfg_args() + " --seed 5 synth --n 60 --out " + p);
        REQUIRE(r.code == 0);
        return p;
    }();
    return path;
}

const std::string& run_dir() {
    static std::string dir = [] {
        std::string d = workdir() + "/run_a";
        CmdResult r = run_cli(cfg_args() + " --seed 3 train --corpus " + corpus_path() +
                              " --out " + d + " --steps 8 --log-every 0");
        REQUIRE(r.code == 0);
        return d;
    }();
    return dir;
}

std::vector<std::string> csv_rows_without_ms(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::vector<std::string> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cut = line.rfind(',');
        rows.push_back(line.substr(0, cut));
    }
    return rows;
}

std::multiset<std::string> layout_types(const nlohmann::json& layout) {
    std::multiset<std::string> m;
    for (const auto& e : layout.at("elements")) m.insert(e.at("type").get<std::string>());
    return m;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("help and argument errors use the documented exit codes") {
    CHECK(run_cli("--help").code == 0);
    CHECK(run_cli("synth --help").code == 0);
    CHECK(run_cli("").code == 2);             // a subcommand is required
    CHECK(run_cli("frobnicate").code == 2);   // unknown subcommand
    CHECK(run_cli("synth --bogus 1").code == 2);
    CHECK(run_cli("--profile bogus synth").code == 2);
    CHECK(run_cli("--kernels bogus synth").code == 2);
    CHECK(run_cli("eval --generated only.json").code == 2);  // missing required option
}

TEST_CASE("synth is deterministic under a seed and reports its output") {
    std::string a = workdir() + "/synth_a.json";
    std::string b = workdir() + "/synth_b.json";
    std::string c = workdir() + "/synth_c.json";

    CmdResult r1 = run_cli(cfg_args() + " --seed 11 synth --n 40 --out " + a);
    CHECK(r1.code == 0);
    CHECK(r1.out.find("wrote 40 layouts") != std::string::npos);
    CmdResult r2 = run_cli(cfg_args() + " --seed 11 synth --n 40 --out " + b);
    CHECK(r2.code == 0);
    CHECK(slurp(a) == slurp(b));

    CmdResult r3 = run_cli(cfg_args() + " --seed 12 synth --n 40 --out " + c);
    CHECK(r3.code == 0);
    CHECK(slurp(a) != slurp(c));

    // the seed can come from the environment instead of the flag
    std::string d = workdir() + "/synth_d.json";
    CmdResult r4 = run_cli(cfg_args() + " synth --n 40 --out " + d, "HETERODIFF_SEED=11");
    CHECK(r4.code == 0);
    CHECK(slurp(a) == slurp(d));

    nlohmann::json j = nlohmann::json::parse(slurp(a));
    CHECK(j.at("layouts").size() == 40);
    CHECK(j.at("canvas").at("w").get<double>() == 360.0);
}

TEST_CASE("ingest splits a corpus and rejects broken input") {
    std::string dir = workdir() + "/data";
    CmdResult r = run_cli(cfg_args() + " --seed 7 ingest --in " + corpus_path() + " --out " + dir);
    CHECK(r.code == 0);
    CHECK(r.out.find("split train=54 val=3 test=3") != std::string::npos);
    for (const char* f : {"/train.json", "/val.json", "/test.json"}) {
        nlohmann::json j = nlohmann::json::parse(slurp(dir + f));
        CHECK(j.contains("layouts"));
    }
    CHECK(nlohmann::json::parse(slurp(dir + "/train.json")).at("layouts").size() == 54);

    std::string broken = workdir() + "/broken.json";
    std::ofstream(broken) << "{ not json";
    CmdResult bad = run_cli(cfg_args() + " ingest --in " + broken);
    CHECK(bad.code == 2);
    CHECK(bad.out.find("error:") != std::string::npos);

    CHECK(run_cli(cfg_args() + " ingest --in /nonexistent/x.json").code == 2);
}

TEST_CASE("training writes the loss CSV and checkpoint it promises") {
    CHECK(fs::exists(run_dir() + "/model.ckpt"));
    std::string csv = slurp(run_dir() + "/loss.csv");
    CHECK(csv.rfind("step,total,vlb,aux,prior,mean_t,ms\n", 0) == 0);
    auto rows = csv_rows_without_ms(run_dir() + "/loss.csv");
    REQUIRE(rows.size() == 9);  // header + 8 steps
    CHECK(rows[1].rfind("1,", 0) == 0);
    CHECK(rows[8].rfind("8,", 0) == 0);
}

TEST_CASE("an interrupted training run resumes to the exact same losses") {
    std::string dir = workdir() + "/run_b";
    CmdResult first = run_cli(cfg_args() + " --seed 3 train --corpus " + corpus_path() +
                              " --out " + dir + " --steps 4 --log-every 0");
    CHECK(first.code == 0);
    CHECK(first.out.find("saved " + dir + "/model.ckpt at step 4") != std::string::npos);

    CmdResult second = run_cli(cfg_args() + " --seed 3 train --corpus " + corpus_path() +
                               " --out " + dir + " --steps 8 --resume " + dir +
                               "/model.ckpt --log-every 0");
    CHECK(second.code == 0);
    CHECK(second.out.find("at step 8") != std::string::npos);

    // identical numbers, timing column aside
    CHECK(csv_rows_without_ms(dir + "/loss.csv") == csv_rows_without_ms(run_dir() + "/loss.csv"));
}

TEST_CASE("unconditional sampling is reproducible and well-formed") {
    std::string a = workdir() + "/samples_a.json";
    std::string b = workdir() + "/samples_b.json";
    std::string base = cfg_args() + " --seed 9 sample --mode ugen --ckpt " + run_dir() +
                       "/model.ckpt --samples 5 --out ";
    CmdResult r1 = run_cli(base + a);
    CHECK(r1.code == 0);
    CHECK(r1.out.find("wrote 5 layouts") != std::string::npos);
    CHECK(r1.out.find("(retries 0, abandoned 0)") != std::string::npos);
    CmdResult r2 = run_cli(base + b);
    CHECK(r2.code == 0);
    CHECK(slurp(a) == slurp(b));

    nlohmann::json j = nlohmann::json::parse(slurp(a));
    REQUIRE(j.at("layouts").size() == 5);
    for (const auto& l : j.at("layouts")) {
        CHECK(l.at("elements").size() >= 1);
        CHECK(l.at("elements").size() <= 4);
        for (const auto& e : l.at("elements")) {
            double bl = e.at("l"), bt = e.at("t"), br = e.at("r"), bb = e.at("b");
            CHECK(bl <= br);
            CHECK(bt <= bb);
            CHECK(bl >= 0.0);
            CHECK(bb <= 1.0);
        }
    }

    CHECK(run_cli(cfg_args() + " sample --mode ugen --ckpt /nonexistent.ckpt").code == 2);
}

TEST_CASE("type-conditioned sampling delivers the requested multiset") {
    std::string out = workdir() + "/gentype.json";
    CmdResult r = run_cli(cfg_args() + " --seed 13 sample --mode gentype --types text,button" +
                          " --ckpt " + run_dir() + "/model.ckpt --samples 4 --out " + out);
    CHECK(r.code == 0);
    nlohmann::json j = nlohmann::json::parse(slurp(out));
    REQUIRE(j.at("layouts").size() == 4);
    std::multiset<std::string> want = {"button", "text"};
    for (const auto& l : j.at("layouts")) CHECK(layout_types(l) == want);

    // unknown type name and missing --types are hard errors
    CHECK(run_cli(cfg_args() + " sample --mode gentype --types zeppelin --ckpt " + run_dir() +
                  "/model.ckpt").code == 2);
    CHECK(run_cli(cfg_args() + " sample --mode gentype --ckpt " + run_dir() + "/model.ckpt")
              .code == 2);
}

TEST_CASE("refinement at depth zero is the identity on a canonical corpus") {
    std::string small = workdir() + "/refine_in.json";
    CmdResult mk = run_cli(cfg_args() + " --seed 21 synth --n 20 --out " + small);
    CHECK(mk.code == 0);

    std::string out = workdir() + "/refine_out.json";
    CmdResult r = run_cli(cfg_args() + " --seed 23 sample --mode refine --in " + small +
                          " --t-refine 0 --ckpt " + run_dir() + "/model.ckpt --out " + out);
    CHECK(r.code == 0);
    CHECK(slurp(out) == slurp(small));

    // a real depth keeps counts and types
    std::string deep = workdir() + "/refine_deep.json";
    CmdResult r2 = run_cli(cfg_args() + " --seed 23 sample --mode refine --in " + small +
                           " --t-refine 4 --ckpt " + run_dir() + "/model.ckpt --out " + deep);
    CHECK(r2.code == 0);
    nlohmann::json ji = nlohmann::json::parse(slurp(small));
    nlohmann::json jo = nlohmann::json::parse(slurp(deep));
    REQUIRE(jo.at("layouts").size() == ji.at("layouts").size());
    for (size_t i = 0; i < jo.at("layouts").size(); ++i)
        CHECK(layout_types(jo.at("layouts")[i]) == layout_types(ji.at("layouts")[i]));

    // depth beyond the checkpoint horizon is rejected
    CHECK(run_cli(cfg_args() + " sample --mode refine --in " + small + " --t-refine 99 --ckpt " +
                  run_dir() + "/model.ckpt").code == 2);
    // refine without --in is rejected
    CHECK(run_cli(cfg_args() + " sample --mode refine --ckpt " + run_dir() + "/model.ckpt")
              .code == 2);
}

TEST_CASE("sampling can trace every reverse step to SVG frames") {
    std::string dir = workdir() + "/trace";
    CmdResult r = run_cli(cfg_args() + " --seed 25 sample --mode ugen --ckpt " + run_dir() +
                          "/model.ckpt --samples 2 --out " + workdir() + "/traced.json" +
                          " --trace " + dir);
    CHECK(r.code == 0);
    // 12 reverse steps -> frames t = 11..0 plus one strip, per sample
    int frames = 0, strips = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        std::string name = entry.path().filename().string();
        if (name.find("strip") != std::string::npos) ++strips;
        else ++frames;
    }
    CHECK(frames == 24);
    CHECK(strips == 2);
    CHECK(fs::exists(dir + "/s0_t0.svg"));
    CHECK(fs::exists(dir + "/s1_t11.svg"));
    CHECK(slurp(dir + "/s0_strip.svg").find("<svg") != std::string::npos);
}

TEST_CASE("the corruption strip covers the full schedule") {
    std::string dir = workdir() + "/corrupt";
    CmdResult r = run_cli(cfg_args() + " --seed 27 corrupt --in " + corpus_path() +
                          " --index 0 --out " + dir + " --dump-matrices");
    CHECK(r.code == 0);
    CHECK(r.out.find("wrote 7 frames + strip") != std::string::npos);
    // T = 12: evenly spaced points 0, 2, 4, 6, 8, 10, 12
    for (int t : {0, 2, 4, 6, 8, 10, 12}) CHECK(fs::exists(dir + "/frame_t" + std::to_string(t) + ".svg"));
    CHECK(fs::exists(dir + "/strip.svg"));
    CHECK(fs::exists(dir + "/q_coord_t1.csv"));
    CHECK(fs::exists(dir + "/qbar_type_t12.csv"));

    CHECK(run_cli(cfg_args() + " corrupt --in " + corpus_path() + " --index 999 --out " + dir)
              .code == 2);

    std::string all_dir = workdir() + "/corrupt_all";
    CmdResult r2 = run_cli(cfg_args() + " --seed 27 corrupt --in " + corpus_path() +
                           " --index 1 --all-steps --out " + all_dir);
    CHECK(r2.code == 0);
    CHECK(r2.out.find("wrote 13 frames + strip") != std::string::npos);
}

TEST_CASE("eval produces a deterministic JSON report") {
    std::string rep = workdir() + "/report.json";
    std::string args = cfg_args() + " eval --generated " + workdir() + "/samples_a.json" +
                       " --reference " + corpus_path() + " --out " + rep;
    CmdResult r1 = run_cli(args);
    CHECK(r1.code == 0);
    std::string first = slurp(rep);
    CmdResult r2 = run_cli(args);
    CHECK(r2.code == 0);
    CHECK(slurp(rep) == first);

    nlohmann::json j = nlohmann::json::parse(first);
    for (const char* k : {"miou", "align", "overlap", "selfsim", "reference"})
        CHECK(j.contains(k));
    CHECK(j.at("n_generated").get<int>() == 5);
    CHECK(j.at("n_reference").get<int>() == 60);

    // without --out the report goes to stdout
    CmdResult r3 = run_cli(cfg_args() + " eval --generated " + workdir() + "/samples_a.json" +
                           " --reference " + corpus_path());
    CHECK(r3.code == 0);
    CHECK(nlohmann::json::parse(r3.out).contains("miou"));

    CHECK(run_cli(cfg_args() + " eval --generated /nope.json --reference " + corpus_path())
              .code == 2);
}

TEST_CASE("render writes one SVG per layout") {
    std::string dir = workdir() + "/render";
    CmdResult r = run_cli(cfg_args() + " render --in " + workdir() + "/samples_a.json --out " + dir);
    CHECK(r.code == 0);
    CHECK(r.out.find("wrote 5 SVGs") != std::string::npos);
    for (int i = 0; i < 5; ++i) {
        std::string svg = slurp(dir + "/layout_" + std::to_string(i) + ".svg");
        CHECK(svg.find("<svg") != std::string::npos);
        CHECK(svg.find("</svg>") != std::string::npos);
    }
}

TEST_CASE("plot charts both loss CSVs and schedule curves") {
    std::string loss_svg = workdir() + "/loss.svg";
    CmdResult r1 = run_cli(cfg_args() + " plot --csv " + run_dir() + "/loss.csv --out " + loss_svg);
    CHECK(r1.code == 0);
    std::string svg = slurp(loss_svg);
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("total") != std::string::npos);

    std::string sched_svg = workdir() + "/sched.svg";
    CmdResult r2 = run_cli(cfg_args() + " plot --schedules --log-y --out " + sched_svg);
    CHECK(r2.code == 0);
    std::string svg2 = slurp(sched_svg);
    CHECK(svg2.find("power_law") != std::string::npos);
    CHECK(svg2.find("linear") != std::string::npos);

    CHECK(run_cli(cfg_args() + " plot --out x.svg").code == 2);
    CHECK(run_cli(cfg_args() + " plot --csv /nonexistent.csv --out x.svg").code == 2);
}

TEST_CASE("kernel backend selection is accepted end to end") {
    std::string a = workdir() + "/kern_scalar.json";
    std::string b = workdir() + "/kern_auto.json";
    CmdResult r1 = run_cli(cfg_args() + " --kernels scalar --seed 31 synth --n 25 --out " + a);
    CHECK(r1.code == 0);
    CmdResult r2 = run_cli(cfg_args() + " --kernels auto --seed 31 synth --n 25 --out " + b);
    CHECK(r2.code == 0);
    CHECK(slurp(a) == slurp(b));
}

TEST_CASE("config files are validated eagerly") {
    std::string bad = workdir() + "/bad_config.json";
    std::ofstream(bad) << R"({"bogus_key": 1})";
    CmdResult r = run_cli("--config " + bad + " synth --n 5 --out " + workdir() + "/x.json");
    CHECK(r.code == 2);
    CHECK(r.out.find("unknown config key") != std::string::npos);

    std::string bad2 = workdir() + "/bad_sched.json";
    std::ofstream(bad2) << R"({"schedule": {"T_tilde": 99}})";
    CHECK(run_cli("--config " + bad2 + " synth").code == 2);
}

}  // TEST_SUITE
