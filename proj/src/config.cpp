#include "heterodiff/config.hpp"

#include <json.hpp>
#include <set>
#include <stdexcept>

namespace hd {

using nlohmann::json;

const std::vector<std::string> kBuiltinTypeNames = {"button", "image", "text", "toolbar"};

RunConfig profile_defaults(const std::string& profile) {
    RunConfig cfg;  // struct defaults are the desk profile
    cfg.profile = profile;
    cfg.overlap_ignore = {"background", "image"};
    if (profile == "desk") return cfg;
    cfg.overlap_ignore.clear();
    if (profile == "paper") {
        cfg.K = 128;
        cfg.n_max = 20;
        cfg.sched.T = 200;
        cfg.sched.T_tilde = 160;
        cfg.sched.g = 12.4;
        cfg.sched.h = 2.48;
        cfg.layers = 12;
        cfg.heads = 12;
        cfg.model_dim = 768;
        cfg.ff_dim = 3072;
        cfg.train.lr = 4e-5;
        cfg.train.batch_size = 64;
        cfg.train.total_steps = 100000;
        cfg.train.ema_rate = 0.9999;
        cfg.gen.T_ugen = 200;
        cfg.gen.T_gentype = 160;
        cfg.gen.T_refine = 40;
        cfg.gen.n_max = 20;
        return cfg;
    }
    throw std::invalid_argument("unknown profile '" + profile + "' (expected desk or paper)");
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::invalid_argument("unknown config key '" + scope + it.key() + "'");
}

void merge_sched(ScheduleParams& s, const json& j) {
    check_keys(j,
               {"T", "T_tilde", "g", "h", "eps", "type_kind", "coord_kind", "T_coord",
                "linear_slope"},
               "schedule.");
    if (j.contains("T")) s.T = j.at("T").get<int>();
    if (j.contains("T_tilde")) s.T_tilde = j.at("T_tilde").get<int>();
    if (j.contains("g")) s.g = j.at("g").get<double>();
    if (j.contains("h")) s.h = j.at("h").get<double>();
    if (j.contains("eps")) s.eps = j.at("eps").get<double>();
    if (j.contains("type_kind")) s.type_kind = type_kind_from_name(j.at("type_kind"));
    if (j.contains("coord_kind")) s.coord_kind = coord_kind_from_name(j.at("coord_kind"));
    if (j.contains("T_coord")) s.T_coord = j.at("T_coord").get<int>();
    if (j.contains("linear_slope")) s.linear_slope = j.at("linear_slope").get<double>();
}

void merge_train(TrainConfig& t, const json& j) {
    check_keys(j,
               {"lr", "beta1", "beta2", "weight_decay", "grad_clip", "batch_size", "total_steps",
                "ema_rate", "timestep_sampling", "lambda", "seed"},
               "train.");
    if (j.contains("lr")) t.lr = j.at("lr").get<double>();
    if (j.contains("beta1")) t.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) t.beta2 = j.at("beta2").get<double>();
    if (j.contains("weight_decay")) t.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("grad_clip")) t.grad_clip = j.at("grad_clip").get<double>();
    if (j.contains("batch_size")) t.batch_size = j.at("batch_size").get<int>();
    if (j.contains("total_steps")) t.total_steps = j.at("total_steps").get<int>();
    if (j.contains("ema_rate")) t.ema_rate = j.at("ema_rate").get<double>();
    if (j.contains("timestep_sampling")) {
        std::string v = j.at("timestep_sampling");
        if (v == "importance")
            t.timestep_sampling = TimestepSampling::importance;
        else if (v == "uniform")
            t.timestep_sampling = TimestepSampling::uniform;
        else
            throw std::invalid_argument("train.timestep_sampling: '" + v + "'");
    }
    if (j.contains("lambda")) t.lambda = j.at("lambda").get<double>();
    if (j.contains("seed")) t.seed = j.at("seed").get<uint64_t>();
}

void merge_gen(GenerationConfig& g, const json& j) {
    check_keys(j,
               {"T_ugen", "T_gentype", "T_refine", "samples", "greedy_final", "retry_budget",
                "seed"},
               "gen.");
    if (j.contains("T_ugen")) g.T_ugen = j.at("T_ugen").get<int>();
    if (j.contains("T_gentype")) g.T_gentype = j.at("T_gentype").get<int>();
    if (j.contains("T_refine")) g.T_refine = j.at("T_refine").get<int>();
    if (j.contains("samples")) g.samples = j.at("samples").get<int>();
    if (j.contains("greedy_final")) g.greedy_final = j.at("greedy_final").get<bool>();
    if (j.contains("retry_budget")) g.retry_budget = j.at("retry_budget").get<int>();
    if (j.contains("seed")) g.seed = j.at("seed").get<uint64_t>();
}

}  // namespace

void merge_config_json(RunConfig& cfg, const std::string& json_text) {
    json j = json::parse(json_text);
    if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
    check_keys(j,
               {"profile", "K", "type_names", "n_max", "schedule", "coord_matrix", "type_matrix",
                "layers", "heads", "model_dim", "ff_dim", "dropout", "train", "gen",
                "overlap_ignore", "canvas_w", "canvas_h", "seed"},
               "");
    // profile first: it resets everything else to that profile's defaults
    if (j.contains("profile")) cfg = profile_defaults(j.at("profile").get<std::string>());
    if (j.contains("K")) cfg.K = j.at("K").get<int>();
    if (j.contains("type_names"))
        cfg.type_names = j.at("type_names").get<std::vector<std::string>>();
    if (j.contains("n_max")) {
        cfg.n_max = j.at("n_max").get<int>();
        cfg.gen.n_max = cfg.n_max;
    }
    if (j.contains("schedule")) merge_sched(cfg.sched, j.at("schedule"));
    if (j.contains("coord_matrix"))
        cfg.coord_matrix = coord_matrix_kind_from_name(j.at("coord_matrix"));
    if (j.contains("type_matrix"))
        cfg.type_matrix = type_matrix_kind_from_name(j.at("type_matrix"));
    if (j.contains("layers")) cfg.layers = j.at("layers").get<int>();
    if (j.contains("heads")) cfg.heads = j.at("heads").get<int>();
    if (j.contains("model_dim")) cfg.model_dim = j.at("model_dim").get<int>();
    if (j.contains("ff_dim")) cfg.ff_dim = j.at("ff_dim").get<int>();
    if (j.contains("dropout")) cfg.dropout = j.at("dropout").get<double>();
    if (j.contains("seed")) {  // top-level seed feeds both loops unless they override below
        cfg.seed = j.at("seed").get<uint64_t>();
        cfg.train.seed = cfg.seed;
        cfg.gen.seed = cfg.seed;
    }
    if (j.contains("train")) merge_train(cfg.train, j.at("train"));
    if (j.contains("gen")) merge_gen(cfg.gen, j.at("gen"));
    if (j.contains("overlap_ignore"))
        cfg.overlap_ignore = j.at("overlap_ignore").get<std::vector<std::string>>();
    if (j.contains("canvas_w")) cfg.canvas_w = j.at("canvas_w").get<double>();
    if (j.contains("canvas_h")) cfg.canvas_h = j.at("canvas_h").get<double>();
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j{
        {"profile", cfg.profile},
        {"K", cfg.K},
        {"type_names", cfg.type_names},
        {"n_max", cfg.n_max},
        {"schedule",
         {{"T", cfg.sched.T},
          {"T_tilde", cfg.sched.T_tilde},
          {"g", cfg.sched.g},
          {"h", cfg.sched.h},
          {"eps", cfg.sched.eps},
          {"type_kind", name(cfg.sched.type_kind)},
          {"coord_kind", name(cfg.sched.coord_kind)},
          {"T_coord", cfg.sched.T_coord},
          {"linear_slope", cfg.sched.linear_slope}}},
        {"coord_matrix", name(cfg.coord_matrix)},
        {"type_matrix", name(cfg.type_matrix)},
        {"layers", cfg.layers},
        {"heads", cfg.heads},
        {"model_dim", cfg.model_dim},
        {"ff_dim", cfg.ff_dim},
        {"dropout", cfg.dropout},
        {"train",
         {{"lr", cfg.train.lr},
          {"beta1", cfg.train.beta1},
          {"beta2", cfg.train.beta2},
          {"weight_decay", cfg.train.weight_decay},
          {"grad_clip", cfg.train.grad_clip},
          {"batch_size", cfg.train.batch_size},
          {"total_steps", cfg.train.total_steps},
          {"ema_rate", cfg.train.ema_rate},
          {"timestep_sampling",
           cfg.train.timestep_sampling == TimestepSampling::importance ? "importance" : "uniform"},
          {"lambda", cfg.train.lambda},
          {"seed", cfg.train.seed}}},
        {"gen",
         {{"T_ugen", cfg.gen.T_ugen},
          {"T_gentype", cfg.gen.T_gentype},
          {"T_refine", cfg.gen.T_refine},
          {"samples", cfg.gen.samples},
          {"greedy_final", cfg.gen.greedy_final},
          {"retry_budget", cfg.gen.retry_budget},
          {"seed", cfg.gen.seed}}},
        {"overlap_ignore", cfg.overlap_ignore},
        {"canvas_w", cfg.canvas_w},
        {"canvas_h", cfg.canvas_h},
        {"seed", cfg.seed},
    };
    return j.dump(2);
}

void RunConfig::validate() const {
    if (K < 2) throw std::invalid_argument("config: K must be >= 2");
    if (n_max < 1) throw std::invalid_argument("config: n_max must be >= 1");
    sched.validate();
    if (layers < 1 || heads < 1 || model_dim < 1 || ff_dim < 1)
        throw std::invalid_argument("config: layers/heads/model_dim/ff_dim must be positive");
    if (model_dim % heads != 0)
        throw std::invalid_argument("config: model_dim must be divisible by heads");
    if (dropout < 0 || dropout >= 1)
        throw std::invalid_argument("config: dropout must be in [0, 1)");
    if (train.batch_size < 1 || train.total_steps < 0 || !(train.lr > 0))
        throw std::invalid_argument("config: bad train settings");
    if (train.ema_rate < 0 || train.ema_rate >= 1)
        throw std::invalid_argument("config: ema_rate must be in [0, 1)");
    if (gen.n_max != n_max)
        throw std::invalid_argument("config: gen.n_max out of sync with n_max");
    auto horizon_ok = [&](int t) { return t >= 1 && t <= sched.T; };
    if (!horizon_ok(gen.T_ugen) || !horizon_ok(gen.T_gentype))
        throw std::invalid_argument("config: generation horizons must be in [1, T]");
    // T_refine = 0 is legal and means identity refinement
    if (gen.T_refine < 0 || gen.T_refine > sched.T)
        throw std::invalid_argument("config: T_refine must be in [0, T]");
    if (gen.T_ugen <= sched.T_tilde && sched.type_kind == TypeScheduleKind::late_absorb)
        throw std::invalid_argument(
            "config: T_ugen must exceed T_tilde or no type is ever absorbed/resolved");
    if (canvas_w <= 0 || canvas_h <= 0)
        throw std::invalid_argument("config: canvas dimensions must be positive");
}

Vocabulary make_vocab(const RunConfig& cfg) {
    return Vocabulary(cfg.K, cfg.type_names.empty() ? kBuiltinTypeNames : cfg.type_names);
}

DenoiserConfig make_denoiser_config(const RunConfig& cfg) {
    DenoiserConfig dc;
    dc.layers = cfg.layers;
    dc.heads = cfg.heads;
    dc.model_dim = cfg.model_dim;
    dc.ff_dim = cfg.ff_dim;
    dc.dropout = cfg.dropout;
    dc.vocab = make_vocab(cfg);
    dc.n_max = cfg.n_max;
    dc.T = cfg.sched.T;
    return dc;
}

std::vector<int> ignore_type_ids(const RunConfig& cfg, const Vocabulary& vocab) {
    // names absent from the vocabulary are skipped so the default ignore list
    // works no matter which corpus the vocabulary came from
    std::vector<int> ids;
    for (const auto& name : cfg.overlap_ignore)
        for (int c = 0; c < vocab.C(); ++c)
            if (vocab.type_names[size_t(c)] == name) ids.push_back(c);
    return ids;
}

}  // namespace hd
