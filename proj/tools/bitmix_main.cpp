#include <cstdio>
#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "bitmix/kernels.hpp"
#include "bitmix/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    std::string kernels;
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config,
                    "key=value config file with [section] headers");
    cmd->add_option("-s,--set", args.sets,
                    "override, e.g. --set train.seed=3 (repeatable)");
    cmd->add_option("-o,--out", args.out, "output directory (out.dir)");
    cmd->add_option("--seed", args.seed, "random seed (train.seed)");
    cmd->add_option("--kernels", args.kernels,
                    "kernel variant: auto|scalar|avx2");
}

bitmix::RunConfig make_config(const CommonArgs& args) {
    auto overrides = args.sets;
    if (!args.out.empty()) overrides.push_back("out.dir=" + args.out);
    if (args.seed >= 0)
        overrides.push_back("train.seed=" + std::to_string(args.seed));
    if (!args.kernels.empty())
        overrides.push_back("out.kernels=" + args.kernels);
    return bitmix::RunConfig::load(args.config, overrides);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "bitmix: mixed-precision bit-width search and quantization-aware "
        "training at desk scale"};
    app.require_subcommand(1);

    CommonArgs pretrain_args, search_args, finetune_args, analyze_args,
        report_args;
    auto* pretrain = app.add_subcommand(
        "pretrain", "train the full-precision baseline checkpoint");
    add_common(pretrain, pretrain_args);
    auto* search = app.add_subcommand(
        "search", "run bit selection (bit-meta + bit-search) from fp.ckpt");
    add_common(search, search_args);
    auto* finetune = app.add_subcommand(
        "finetune", "fixed-bit weight training from the selected assignment");
    add_common(finetune, finetune_args);
    auto* analyze = app.add_subcommand(
        "analyze", "emit BN traces, activation histograms, quantized-Gaussian "
                   "variances and Hessian-per-op CSVs");
    add_common(analyze, analyze_args);
    auto* report =
        app.add_subcommand("report", "print a summary of all artifacts");
    add_common(report, report_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->parsed()) {
            const auto out = bitmix::cmd_pretrain(make_config(pretrain_args));
            std::printf("pretrain done: train_acc=%.4f test_acc=%.4f (%.1fs)\n",
                        double(out.train_accuracy), double(out.test_accuracy),
                        out.wall_seconds);
            std::printf("checkpoint: %s\n", out.checkpoint.c_str());
        } else if (search->parsed()) {
            const auto out = bitmix::cmd_search(make_config(search_args));
            std::printf("search done: bops=%lld target=%.0f (%.1fs)\n",
                        static_cast<long long>(out.assignment_bops),
                        double(out.t_bops), out.wall_seconds);
            for (const auto& e : out.assignment.entries)
                std::printf("  %-20s -> %d-bit\n", e.layer_name.c_str(),
                            e.bits);
            std::printf("assignment: %s\n", out.assignment_path.c_str());
        } else if (finetune->parsed()) {
            const auto out = bitmix::cmd_finetune(make_config(finetune_args));
            std::printf("finetune done: test_acc=%.4f bops=%lld (%.1fs)\n",
                        double(out.result.test_accuracy),
                        static_cast<long long>(out.result.model_bops),
                        out.wall_seconds);
            std::printf("report: %s\n", out.report_path.c_str());
        } else if (analyze->parsed()) {
            bitmix::cmd_analyze(make_config(analyze_args));
            std::printf("analyze done\n");
        } else if (report->parsed()) {
            std::cout << bitmix::cmd_report(make_config(report_args))
                      << std::endl;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
