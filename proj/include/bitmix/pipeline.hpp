#pragma once

#include "bitmix/config.hpp"
#include "bitmix/costmodel.hpp"
#include "bitmix/data.hpp"
#include "bitmix/instrument.hpp"
#include "bitmix/model.hpp"
#include "bitmix/trainer.hpp"

namespace bitmix {

// In-memory train/test pair assembled per the [data] section.
struct DataBundle {
    Dataset train;
    Dataset test;
};

DataBundle load_data(const RunConfig& cfg);
ModelSpec model_spec_for(const RunConfig& cfg);
QuantSetup quant_setup_for(const RunConfig& cfg);
Model build_model(const RunConfig& cfg);
PhasePlan phase_plan_for(const RunConfig& cfg);
real_t resolve_t_bops(const RunConfig& cfg, const CostTable& ct);
BitAssignment uniform_assignment(const Model& model, int bits);

struct PretrainOutcome {
    real_t train_accuracy = 0;
    real_t test_accuracy = 0;
    double wall_seconds = 0;
    std::string checkpoint;
};

struct SearchOutcome {
    BitAssignment assignment;
    i64 assignment_bops = 0;
    real_t t_bops = 0;
    double wall_seconds = 0;
    std::string assignment_path;
    std::string checkpoint;
};

struct FinetuneOutcome {
    FinetuneResult result;
    double wall_seconds = 0;
    std::string report_path;
    std::string checkpoint;
};

// Pipeline commands; each reads its predecessors' artifacts from
// cfg.out_dir and writes its own there.
PretrainOutcome cmd_pretrain(const RunConfig& cfg);
SearchOutcome cmd_search(const RunConfig& cfg);
FinetuneOutcome cmd_finetune(const RunConfig& cfg);
void cmd_analyze(const RunConfig& cfg);
std::string cmd_report(const RunConfig& cfg);

}  // namespace bitmix
