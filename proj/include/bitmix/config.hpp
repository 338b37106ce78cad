#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bitmix/common.hpp"

namespace bitmix {

// Everything a pipeline command needs, assembled from a key=value config
// file with [section] headers plus command-line overrides. Unknown keys are
// rejected up front.
struct RunConfig {
    // [model]
    std::string arch = "toy_mobilenet";  // toy_mobilenet|toy_resnet|tiny_net
    int width = 16;
    int depth = 8;
    int classes = 10;

    // [data]
    std::string data_kind = "synthetic";  // synthetic|blobs|cifar10|idx
    std::string data_path;
    i64 train_n = 4096;
    i64 test_n = 1024;
    real_t noise = real_t(0.15);
    i64 batch = 64;
    bool augment = false;

    // [quant]
    std::vector<int> candidates;  // empty = per-arch default
    int weight_bits = 4;
    bool lsq_scale = true;
    bool pair_mode = false;
    std::vector<std::pair<int, int>> pair_candidates;

    // [search]
    std::string t_bops = "ratio:0.6";  // "ratio:<r>" of all-max-bits, or absolute
    real_t lambda_r = -1;              // negative = per-arch default (1 / 0.4)
    int bit_meta_epochs = 1;
    int alternate_epochs = 1;
    int meta_iters = 1;
    int search_iters = 1;
    int uniform_bits = 0;  // >0: skip search, use a uniform assignment

    // [train]
    int pretrain_epochs = 20;
    int finetune_epochs = 20;
    real_t lr_weights = real_t(0.05);
    real_t lr_steps = real_t(0.01);
    real_t lr_alphas = real_t(0.05);
    real_t momentum = real_t(0.9);
    real_t alpha_momentum = 0;
    real_t weight_decay = 0;
    bool cosine = true;
    std::string init_from = "meta";  // finetune start: meta|fp
    std::uint64_t seed = 0;

    // [analyze]
    int analyze_epochs = 3;
    int record_every = 5;
    int hessian_probes = 12;
    std::string bn_selector = "dw";

    // [out]
    std::string out_dir = "out";
    std::string kernels = "auto";

    void validate() const;
    std::vector<int> effective_candidates() const;
    real_t effective_lambda() const;

    // overrides are "section.key=value" strings; they win over the file.
    static RunConfig load(const std::string& config_path,
                          const std::vector<std::string>& overrides);
    static RunConfig from_pairs(
        const std::map<std::string, std::string>& pairs);
};

}  // namespace bitmix
