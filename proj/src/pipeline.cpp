#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bitmix/kernels.hpp"
#include "bitmix/pipeline.hpp"
#include "bitmix/serialize.hpp"

namespace bitmix {
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out_dir) / name).string();
}

void ensure_out_dir(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    kern::select(cfg.kernels);
}

std::pair<Dataset, Dataset> split_by_class(const Dataset& all, i64 train_n,
                                           i64 test_n, int classes) {
    // `all` is grouped by class; take the leading share of each class block
    // for training, the rest for test.
    const i64 per_class = all.n / classes;
    const i64 train_pc = train_n / classes;
    const i64 test_pc = std::min<i64>(test_n / classes, per_class - train_pc);
    check(train_pc >= 1 && test_pc >= 1,
          "data: synthetic sizes too small for the class count");
    const i64 dim = i64(all.c) * all.h * all.w;
    Dataset train, test;
    train.c = test.c = all.c;
    train.h = test.h = all.h;
    train.w = test.w = all.w;
    for (int k = 0; k < classes; ++k) {
        const i64 base = k * per_class;
        for (i64 i = 0; i < train_pc; ++i) {
            const i64 src = base + i;
            train.images.insert(train.images.end(),
                                all.images.begin() + src * dim,
                                all.images.begin() + (src + 1) * dim);
            train.labels.push_back(all.labels[static_cast<size_t>(src)]);
        }
        for (i64 i = 0; i < test_pc; ++i) {
            const i64 src = base + train_pc + i;
            test.images.insert(test.images.end(),
                               all.images.begin() + src * dim,
                               all.images.begin() + (src + 1) * dim);
            test.labels.push_back(all.labels[static_cast<size_t>(src)]);
        }
    }
    train.n = static_cast<i64>(train.labels.size());
    test.n = static_cast<i64>(test.labels.size());
    return {std::move(train), std::move(test)};
}

}  // namespace

DataBundle load_data(const RunConfig& cfg) {
    const ModelSpec spec = model_spec_for(cfg);
    DataBundle out;
    if (cfg.data_kind == "synthetic" || cfg.data_kind == "blobs") {
        const i64 per_class = (cfg.train_n + cfg.test_n) / cfg.classes + 1;
        Dataset all =
            cfg.data_kind == "synthetic"
                ? make_synthetic_images(cfg.classes, per_class, spec.input_ch,
                                        spec.input_h, spec.input_w, cfg.seed,
                                        cfg.noise)
                : make_blobs(cfg.classes, per_class, spec.input_ch,
                             spec.input_h, spec.input_w, 10, cfg.seed);
        auto [train, test] =
            split_by_class(all, cfg.train_n, cfg.test_n, cfg.classes);
        out.train = std::move(train);
        out.test = std::move(test);
    } else if (cfg.data_kind == "cifar10") {
        std::vector<std::string> train_files;
        for (int i = 1; i <= 5; ++i) {
            const auto p = fs::path(cfg.data_path) /
                           ("data_batch_" + std::to_string(i) + ".bin");
            if (fs::exists(p)) train_files.push_back(p.string());
        }
        check(!train_files.empty(), "data: no data_batch_*.bin under '" +
                                        cfg.data_path + "'");
        out.train = load_cifar10(train_files);
        const auto test_p = fs::path(cfg.data_path) / "test_batch.bin";
        check(fs::exists(test_p), "data: missing test_batch.bin under '" +
                                      cfg.data_path + "'");
        out.test = load_cifar10({test_p.string()});
    } else {  // idx
        const auto dir = fs::path(cfg.data_path);
        out.train = load_idx((dir / "train-images-idx3-ubyte").string(),
                             (dir / "train-labels-idx1-ubyte").string());
        out.test = load_idx((dir / "t10k-images-idx3-ubyte").string(),
                            (dir / "t10k-labels-idx1-ubyte").string());
    }
    if (cfg.train_n > 0 && out.train.n > cfg.train_n) {
        const i64 dim = i64(out.train.c) * out.train.h * out.train.w;
        out.train.n = cfg.train_n;
        out.train.images.resize(static_cast<size_t>(cfg.train_n * dim));
        out.train.labels.resize(static_cast<size_t>(cfg.train_n));
    }
    if (cfg.test_n > 0 && out.test.n > cfg.test_n) {
        const i64 dim = i64(out.test.c) * out.test.h * out.test.w;
        out.test.n = cfg.test_n;
        out.test.images.resize(static_cast<size_t>(cfg.test_n * dim));
        out.test.labels.resize(static_cast<size_t>(cfg.test_n));
    }
    out.train = fit_dataset(out.train, spec.input_ch, spec.input_h,
                            spec.input_w);
    out.test = fit_dataset(out.test, spec.input_ch, spec.input_h,
                           spec.input_w);
    return out;
}

ModelSpec model_spec_for(const RunConfig& cfg) {
    if (cfg.arch == "toy_mobilenet")
        return build_toy_mobilenet(cfg.width, cfg.classes);
    if (cfg.arch == "toy_resnet")
        return build_toy_resnet(cfg.depth, cfg.classes, cfg.width);
    return build_tiny_net(cfg.width, cfg.classes);
}

QuantSetup quant_setup_for(const RunConfig& cfg) {
    QuantSetup q;
    q.candidates = cfg.effective_candidates();
    q.weight_bits = cfg.weight_bits;
    q.lsq_grad_scale = cfg.lsq_scale;
    q.pair_mode = cfg.pair_mode;
    q.pair_candidates = cfg.pair_candidates;
    return q;
}

Model build_model(const RunConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    return Model::build(model_spec_for(cfg), quant_setup_for(cfg), rng);
}

PhasePlan phase_plan_for(const RunConfig& cfg) {
    PhasePlan p;
    p.bit_meta_epochs = cfg.bit_meta_epochs;
    p.alternate_epochs = cfg.alternate_epochs;
    p.finetune_epochs = cfg.finetune_epochs;
    p.meta_iters = cfg.meta_iters;
    p.search_iters = cfg.search_iters;
    p.lr_weights = cfg.lr_weights;
    p.lr_steps = cfg.lr_steps;
    p.lr_alphas = cfg.lr_alphas;
    p.momentum = cfg.momentum;
    p.alpha_momentum = cfg.alpha_momentum;
    p.weight_decay = cfg.weight_decay;
    p.cosine_finetune = cfg.cosine;
    p.batch_size = cfg.batch;
    p.augment = cfg.augment;
    return p;
}

real_t resolve_t_bops(const RunConfig& cfg, const CostTable& ct) {
    if (cfg.t_bops.rfind("ratio:", 0) == 0) {
        const real_t r = static_cast<real_t>(std::stod(cfg.t_bops.substr(6)));
        int max_bits = 0;
        for (int b : cfg.effective_candidates()) max_bits = std::max(max_bits, b);
        return r * static_cast<real_t>(uniform_bops(ct, max_bits));
    }
    return static_cast<real_t>(std::stod(cfg.t_bops));
}

BitAssignment uniform_assignment(const Model& model, int bits) {
    BitAssignment a;
    for (size_t s = 0; s < model.branches.size(); ++s) {
        AssignmentEntry e;
        e.layer_name = model.spec.layers[model.searched[s]].name;
        e.bits = bits;
        if (model.branches[s].pair_mode())
            e.weight_bits = model.setup.weight_bits;
        a.entries.push_back(e);
    }
    return a;
}

PretrainOutcome cmd_pretrain(const RunConfig& cfg) {
    cfg.validate();
    ensure_out_dir(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    auto data = load_data(cfg);
    Model model = build_model(cfg);
    MetricsWriter metrics(out_path(cfg, "metrics.csv"));
    Trainer trainer(model, data.train, data.test, phase_plan_for(cfg),
                    cfg.seed);
    trainer.set_metrics(&metrics);
    trainer.pretrain(cfg.pretrain_epochs);

    PretrainOutcome out;
    ForwardCfg fp;
    out.train_accuracy = trainer.accuracy(data.train, fp);
    out.test_accuracy = trainer.accuracy(data.test, fp);
    out.wall_seconds = seconds_since(t0);
    out.checkpoint = out_path(cfg, "fp.ckpt");
    nlohmann::json meta{{"phase", "pretrain"},
                        {"epoch", trainer.state().epoch},
                        {"iter", trainer.state().iter},
                        {"seed", cfg.seed},
                        {"arch", cfg.arch},
                        {"test_accuracy", out.test_accuracy}};
    save_checkpoint(out.checkpoint, model.named_parameters(), meta.dump());
    atomic_write_file(out_path(cfg, "pretrain_report.json"),
                      nlohmann::json{{"train_accuracy", out.train_accuracy},
                                     {"test_accuracy", out.test_accuracy},
                                     {"wall_seconds", out.wall_seconds}}
                          .dump(2));
    return out;
}

SearchOutcome cmd_search(const RunConfig& cfg) {
    cfg.validate();
    ensure_out_dir(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    auto data = load_data(cfg);
    Model model = build_model(cfg);
    load_checkpoint(out_path(cfg, "fp.ckpt"), model.named_parameters());

    const CostTable ct = count_ops(model.spec, cfg.weight_bits);
    RegularizerCfg reg;
    reg.t_bops = resolve_t_bops(cfg, ct);
    reg.lambda_r = cfg.effective_lambda();

    MetricsWriter metrics(out_path(cfg, "metrics.csv"));
    Trainer trainer(model, data.train, data.test, phase_plan_for(cfg),
                    cfg.seed);
    trainer.set_metrics(&metrics);
    trainer.set_cost(&ct, reg);
    trainer.set_alpha_trace(out_path(cfg, "alpha_trace.csv"));

    SearchOutcome out;
    out.assignment = trainer.run_bit_selection();
    out.t_bops = reg.t_bops;
    out.assignment_bops = bops(ct, out.assignment);
    out.wall_seconds = seconds_since(t0);
    out.assignment_path = out_path(cfg, "assignment.json");
    out.checkpoint = out_path(cfg, "meta.ckpt");

    atomic_write_file(out.assignment_path, out.assignment.to_json());
    atomic_write_file(out_path(cfg, "cost_report.json"),
                      cost_report_json(ct, out.assignment));
    nlohmann::json meta{{"phase", "search"},
                        {"epoch", trainer.state().epoch},
                        {"iter", trainer.state().iter},
                        {"seed", cfg.seed},
                        {"arch", cfg.arch}};
    save_checkpoint(out.checkpoint, model.named_parameters(), meta.dump());
    atomic_write_file(
        out_path(cfg, "search_report.json"),
        nlohmann::json{{"t_bops", out.t_bops},
                       {"assignment_bops", out.assignment_bops},
                       {"wall_seconds", out.wall_seconds}}
            .dump(2));
    return out;
}

FinetuneOutcome cmd_finetune(const RunConfig& cfg) {
    cfg.validate();
    ensure_out_dir(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    auto data = load_data(cfg);
    Model model = build_model(cfg);

    BitAssignment assignment;
    std::string assignment_source;
    if (cfg.uniform_bits > 0) {
        assignment = uniform_assignment(model, cfg.uniform_bits);
        assignment_source = "uniform:" + std::to_string(cfg.uniform_bits);
    } else {
        std::ifstream in(out_path(cfg, "assignment.json"));
        check(in.good(), "finetune: missing assignment.json under '" +
                             cfg.out_dir + "' (run search first)");
        std::stringstream ss;
        ss << in.rdbuf();
        assignment = BitAssignment::from_json(ss.str());
        assignment_source = "assignment.json";
    }

    const std::string init_ckpt =
        cfg.init_from == "meta" ? out_path(cfg, "meta.ckpt")
                                : out_path(cfg, "fp.ckpt");
    load_checkpoint(init_ckpt, model.named_parameters());

    const CostTable ct = count_ops(model.spec, cfg.weight_bits);
    MetricsWriter metrics(out_path(cfg, "metrics.csv"));
    Trainer trainer(model, data.train, data.test, phase_plan_for(cfg),
                    cfg.seed);
    trainer.set_metrics(&metrics);
    RegularizerCfg reg;
    reg.t_bops = resolve_t_bops(cfg, ct);
    reg.lambda_r = cfg.effective_lambda();
    trainer.set_cost(&ct, reg);

    FinetuneOutcome out;
    out.result = trainer.run_weight_training(assignment);
    out.wall_seconds = seconds_since(t0);
    out.checkpoint = out_path(cfg, "final.ckpt");
    out.report_path = out_path(cfg, "report.json");

    nlohmann::json meta{{"phase", "finetune"},
                        {"epoch", trainer.state().epoch},
                        {"iter", trainer.state().iter},
                        {"seed", cfg.seed},
                        {"arch", cfg.arch}};
    save_checkpoint(out.checkpoint, model.named_parameters(), meta.dump());
    atomic_write_file(
        out.report_path,
        nlohmann::json{{"test_accuracy", out.result.test_accuracy},
                       {"bops", out.result.model_bops},
                       {"assignment_source", assignment_source},
                       {"init_from", cfg.init_from},
                       {"per_epoch_accuracy", out.result.per_epoch_accuracy},
                       {"wall_seconds", out.wall_seconds}}
            .dump(2));
    return out;
}

void cmd_analyze(const RunConfig& cfg) {
    cfg.validate();
    ensure_out_dir(cfg);
    auto data = load_data(cfg);

    // Quantized-Gaussian variance study; independent of any checkpoint.
    auto qrows = quantized_gaussian_variance({8, 4, 3, 2}, 1000000, cfg.seed);
    atomic_write_file(out_path(cfg, "qgauss_var.csv"), qgauss_to_csv(qrows));

    // Pick the latest checkpoint for the model-dependent diagnostics.
    std::string ckpt;
    for (const char* name : {"final.ckpt", "meta.ckpt", "fp.ckpt"})
        if (fs::exists(out_path(cfg, name)) && ckpt.empty())
            ckpt = out_path(cfg, name);
    check(!ckpt.empty(), "analyze: no checkpoint under '" + cfg.out_dir +
                             "' (run pretrain first)");

    auto fresh_model = [&] {
        Model m = build_model(cfg);
        load_checkpoint(ckpt, m.named_parameters());
        return m;
    };

    // BN running-variance traces under the three regimes.
    {
        std::ostringstream os;
        os << "regime,iteration,layer,statistic,value\n";
        const std::pair<BNRegime, const char*> regimes[] = {
            {BNRegime::RandomBitFP, "random_bit_fp"},
            {BNRegime::RandomBitQ4, "random_bit_w4"},
            {BNRegime::BitMeta, "bit_meta"}};
        for (const auto& [regime, name] : regimes) {
            Model m = fresh_model();
            Trainer t(m, data.train, data.test, phase_plan_for(cfg), cfg.seed);
            t.calibrate_act_steps();
            if (regime == BNRegime::RandomBitQ4) t.init_weight_steps();
            BNTraceCfg bc;
            bc.regime = regime;
            bc.epochs = cfg.analyze_epochs;
            bc.record_every = cfg.record_every;
            bc.seed = cfg.seed;
            auto trace = trace_bn(t, cfg.bn_selector, bc);
            for (const auto& r : trace.records)
                os << name << ',' << r.iteration << ',' << r.layer << ','
                   << r.statistic << ',' << r.value << '\n';
        }
        atomic_write_file(out_path(cfg, "bn_trace.csv"), os.str());
    }

    // Pre-quantizer histograms across uniform bit configs (0 = FP).
    {
        Model m = fresh_model();
        std::vector<std::string> monitored;
        for (const auto& l : m.spec.layers)
            if (l.quant == QuantRole::Searched &&
                l.name.find(cfg.bn_selector) != std::string::npos)
                monitored.push_back(l.name);
        if (monitored.empty() && !m.searched.empty())
            monitored.push_back(m.spec.layers[m.searched[0]].name);
        std::vector<int> bit_configs{0};
        for (int b : cfg.effective_candidates()) bit_configs.push_back(b);
        for (const auto& layer : monitored) {
            for (int b : bit_configs) {
                auto h = act_histogram(m, layer, b, data.test);
                atomic_write_file(
                    out_path(cfg, "act_hist_" + layer + "_" +
                                      std::to_string(b) + ".csv"),
                    h.to_csv());
            }
        }
    }

    // Hessian trace per op, plus its rank correlation with assigned bits
    // when an assignment exists.
    {
        Model m = fresh_model();
        const CostTable ct = count_ops(m.spec, cfg.weight_bits);
        auto rows = hessian_trace_per_op(m, ct, data.train, cfg.batch,
                                         cfg.hessian_probes, cfg.seed);
        atomic_write_file(out_path(cfg, "hessian_per_op.csv"),
                          hessian_to_csv(rows));
        nlohmann::json summary{{"checkpoint", ckpt}};
        if (fs::exists(out_path(cfg, "assignment.json"))) {
            std::ifstream in(out_path(cfg, "assignment.json"));
            std::stringstream ss;
            ss << in.rdbuf();
            const auto assignment = BitAssignment::from_json(ss.str());
            std::vector<real_t> tpo, bits;
            for (const auto& r : rows) {
                if (const auto* e = assignment.find(r.layer)) {
                    tpo.push_back(r.trace_per_op);
                    bits.push_back(static_cast<real_t>(e->bits));
                }
            }
            const bool varied =
                tpo.size() >= 2 &&
                *std::min_element(bits.begin(), bits.end()) !=
                    *std::max_element(bits.begin(), bits.end());
            if (varied)
                summary["trace_per_op_vs_bits_rank_correlation"] =
                    rank_correlation(tpo, bits);
        }
        atomic_write_file(out_path(cfg, "analyze_summary.json"),
                          summary.dump(2));
    }
}

std::string cmd_report(const RunConfig& cfg) {
    cfg.validate();
    nlohmann::json report;
    for (const char* name :
         {"pretrain_report.json", "search_report.json", "report.json",
          "cost_report.json", "analyze_summary.json"}) {
        const auto p = out_path(cfg, name);
        if (!fs::exists(p)) continue;
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        report[name] = nlohmann::json::parse(ss.str());
    }
    check(!report.empty(),
          "report: no artifacts under '" + cfg.out_dir + "' yet");
    return report.dump(2);
}

}  // namespace bitmix
