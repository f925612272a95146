#include <cstdio>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "onset/pipeline.hpp"

namespace {

using onset::PipelineConfig;

struct StageDef {
    const char* name;
    const char* help;
    std::function<std::string(const PipelineConfig&)> run;
};

const std::vector<StageDef>& stages() {
    static const std::vector<StageDef> defs = {
        {"generate", "synthesize a clinical corpus", onset::stage_generate},
        {"cohort", "window, label, mask and split the corpus", onset::stage_cohort},
        {"preprocess", "build vocabulary and token features", onset::stage_preprocess},
        {"extract-values", "extract lab/vital values into features",
         onset::stage_extract_values},
        {"train-embeddings", "train (or load) word embeddings", onset::stage_train_embeddings},
        {"train", "fit the configured model", onset::stage_train},
        {"evaluate", "score the test split and write metrics", onset::stage_evaluate},
        {"explain", "write attribution reports", onset::stage_explain},
        {"stats", "summarize the corpus", onset::stage_stats},
    };
    return defs;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chronic disease onset prediction pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    int threads = -1;
    long long seed = -1;

    app.add_option("--config", config_path, "pipeline config file (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--set", overrides, "override a config key, e.g. --set train.lr=0.01")
        ->take_all();
    app.add_option("--threads", threads, "worker threads (1 = bit-reproducible)");
    app.add_option("--seed", seed, "top-level seed");

    std::string chosen;
    for (const StageDef& def : stages()) {
        CLI::App* sub = app.add_subcommand(def.name, def.help);
        sub->fallthrough();
        sub->callback([&chosen, &def] { chosen = def.name; });
    }

    CLI11_PARSE(app, argc, argv);

    if (threads >= 0) overrides.push_back("threads=" + std::to_string(threads));
    if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));

    try {
        PipelineConfig cfg = PipelineConfig::load(config_path, overrides);
        for (const StageDef& def : stages())
            if (chosen == def.name) {
                std::cout << def.run(cfg) << "\n";
                return 0;
            }
        std::cerr << "onset: unknown subcommand '" << chosen << "'\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "onset " << chosen << ": " << e.what() << "\n";
        return 1;
    }
}
