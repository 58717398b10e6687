#pragma once
#include <string>
#include <vector>

#include "heterodiff/denoiser.hpp"
#include "heterodiff/sampler.hpp"
#include "heterodiff/schedule.hpp"
#include "heterodiff/transition.hpp"

namespace hd {

// Full run configuration: profile defaults, optionally overlaid by a JSON config
// file, then by CLI flags (flags win).
struct RunConfig {
    std::string profile = "desk";

    // vocabulary / sequence shape
    int K = 32;
    std::vector<std::string> type_names;  // empty = take from corpus (ingest) or builtin (synth)
    int n_max = 8;

    ScheduleParams sched;
    CoordMatrixKind coord_matrix = CoordMatrixKind::gaussian;
    TypeMatrixKind type_matrix = TypeMatrixKind::absorbing;

    // denoiser architecture
    int layers = 4, heads = 4, model_dim = 128, ff_dim = 512;
    double dropout = 0.1;

    TrainConfig train;
    GenerationConfig gen;

    std::vector<std::string> overlap_ignore;  // type names excluded from overlap pairs

    double canvas_w = 360, canvas_h = 640;
    uint64_t seed = 0;

    void validate() const;
};

extern const std::vector<std::string> kBuiltinTypeNames;  // button, image, text, toolbar

RunConfig profile_defaults(const std::string& profile);  // "paper" or "desk"
// overlay settings from a config-file JSON text; unknown keys are an error
void merge_config_json(RunConfig& cfg, const std::string& json_text);
std::string run_config_to_json(const RunConfig& cfg);

Vocabulary make_vocab(const RunConfig& cfg);
DenoiserConfig make_denoiser_config(const RunConfig& cfg);
std::vector<int> ignore_type_ids(const RunConfig& cfg, const Vocabulary& vocab);

}  // namespace hd
