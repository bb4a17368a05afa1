#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ebcl/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"ebclkit - event-based contrastive learning for irregular event streams"};
    app.require_subcommand(1);

    std::string config_path;
    long long seed_override = -1;
    bool force = false;
    app.add_option("--config", config_path, "pipeline config JSON")->envname("EBCLKIT_CONFIG");
    app.add_option("--seed", seed_override, "override the config seed");
    app.add_flag("--force", force, "overwrite existing artifacts");

    const char* stages[] = {"generate", "preprocess", "pretrain", "finetune", "probe", "knn", "cluster", "report"};
    for (const char* name : stages) app.add_subcommand(name)->ignore_case();

    auto* config_cmd = app.add_subcommand("config", "config utilities");
    auto* print_defaults = config_cmd->add_subcommand("print-defaults", "print the default config JSON");

    CLI11_PARSE(app, argc, argv);

    try {
        if (config_cmd->parsed()) {
            if (print_defaults->parsed()) {
                std::cout << ebcl::pipeline::Config::defaults().to_json_text() << "\n";
                return 0;
            }
            std::cerr << "config: expected a sub-subcommand (print-defaults)\n";
            return 2;
        }

        ebcl::pipeline::Config config =
            config_path.empty() ? ebcl::pipeline::Config::defaults() : ebcl::pipeline::Config::load(config_path);
        if (const char* wd = std::getenv("EBCLKIT_WORKDIR"); wd && config.workdir == "ebcl-work")
            config.workdir = wd;
        if (seed_override >= 0) {
            config.seed = static_cast<uint64_t>(seed_override);
            config.generator.seed = config.seed;
        }

        for (const char* name : stages) {
            if (app.get_subcommand(name)->parsed()) return ebcl::pipeline::run_stage(name, config, force);
        }
        std::cerr << "no subcommand selected\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
