#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bitmix/pipeline.hpp"
#include "bitmix/serialize.hpp"
#include "testutil.hpp"

using namespace bitmix;
namespace fs = std::filesystem;

namespace {

struct OutDir {
    fs::path path;
    explicit OutDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("bitmix_pipe_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~OutDir() { fs::remove_all(path); }
};

RunConfig tiny_config(const std::string& out_dir) {
    return RunConfig::load(
        "", {"model.arch=tiny_net", "model.width=8", "model.classes=4",
             "data.kind=synthetic", "data.train_n=240", "data.test_n=80",
             "data.batch=24", "train.pretrain_epochs=2",
             "train.finetune_epochs=1", "train.seed=5",
             "search.alternate_epochs=2", "search.lambda_r=1e6",
             "train.lr_alphas=0.1", "out.dir=" + out_dir});
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return nlohmann::json::parse(ss.str());
}

}  // namespace

TEST_CASE("pipeline: pretrain smoke run writes artifacts and reloading the "
          "checkpoint reproduces eval accuracy exactly") {
    OutDir out("pretrain");
    auto cfg = tiny_config(out.path.string());
    const auto result = cmd_pretrain(cfg);
    CHECK(fs::exists(out.path / "fp.ckpt"));
    CHECK(fs::exists(out.path / "metrics.csv"));
    CHECK(fs::exists(out.path / "pretrain_report.json"));
    CHECK(!fs::exists(out.path / "fp.ckpt.tmp"));  // atomic rename happened
    CHECK(result.test_accuracy > real_t(0.25));    // better than chance

    // Reload and re-evaluate: accuracy must match exactly.
    auto data = load_data(cfg);
    Model m = build_model(cfg);
    load_checkpoint((out.path / "fp.ckpt").string(), m.named_parameters());
    Trainer t(m, data.train, data.test, phase_plan_for(cfg), cfg.seed);
    ForwardCfg fp;
    CHECK(t.accuracy(data.test, fp) == result.test_accuracy);
}

TEST_CASE("pipeline: search with t_bops at the all-max cost keeps the "
          "all-max assignment") {
    OutDir out("searchmax");
    auto cfg = tiny_config(out.path.string());
    cfg.t_bops = "ratio:1.0";
    cmd_pretrain(cfg);
    const auto result = cmd_search(cfg);
    for (const auto& e : result.assignment.entries) CHECK(e.bits == 8);
    CHECK(fs::exists(out.path / "assignment.json"));
    CHECK(fs::exists(out.path / "cost_report.json"));
    CHECK(fs::exists(out.path / "meta.ckpt"));
    CHECK(fs::exists(out.path / "alpha_trace.csv"));

    // Schema: every entry carries layer_name, bits and the softmax snapshot.
    const auto j = read_json(out.path / "assignment.json");
    REQUIRE(j.contains("assignment"));
    for (const auto& e : j["assignment"]) {
        CHECK(e.contains("layer_name"));
        CHECK(e.contains("bits"));
        CHECK(e["alpha_softmax"].size() == 3);
    }
}

TEST_CASE("pipeline: search with t_bops at the all-min cost returns the "
          "all-min assignment") {
    OutDir out("searchmin");
    auto cfg = tiny_config(out.path.string());
    cmd_pretrain(cfg);
    const CostTable ct = count_ops(model_spec_for(cfg), cfg.weight_bits);
    cfg.t_bops = std::to_string(uniform_bops(ct, 3));
    const auto result = cmd_search(cfg);
    for (const auto& e : result.assignment.entries) CHECK(e.bits == 3);
    CHECK(result.assignment_bops == uniform_bops(ct, 3));
}

TEST_CASE("pipeline: finetune consumes search artifacts; reports exact BOPs; "
          "rerun is bit-deterministic") {
    OutDir out("finetune");
    auto cfg = tiny_config(out.path.string());
    cmd_pretrain(cfg);
    cmd_search(cfg);
    const auto r1 = cmd_finetune(cfg);
    const auto report = read_json(out.path / "report.json");
    const auto cost = read_json(out.path / "cost_report.json");
    CHECK(report["bops"].get<i64>() == cost["total_bops"].get<i64>());
    CHECK(report["assignment_source"] == "assignment.json");
    CHECK(fs::exists(out.path / "final.ckpt"));

    const auto r2 = cmd_finetune(cfg);
    CHECK(r1.result.test_accuracy == r2.result.test_accuracy);
    CHECK(r1.result.per_epoch_accuracy == r2.result.per_epoch_accuracy);
}

TEST_CASE("pipeline: finetune can run a uniform baseline directly from the "
          "FP checkpoint") {
    OutDir out("uniform");
    auto cfg = tiny_config(out.path.string());
    cmd_pretrain(cfg);
    cfg.uniform_bits = 4;
    cfg.init_from = "fp";
    const auto r = cmd_finetune(cfg);
    const CostTable ct = count_ops(model_spec_for(cfg), cfg.weight_bits);
    CHECK(r.result.model_bops == uniform_bops(ct, 4));
    const auto report = read_json(out.path / "report.json");
    CHECK(report["assignment_source"] == "uniform:4");
}

TEST_CASE("pipeline: finetune without artifacts fails with a clear message") {
    OutDir out("missing");
    auto cfg = tiny_config(out.path.string());
    CHECK_THROWS_WITH_AS(cmd_finetune(cfg), doctest::Contains("assignment"),
                         std::runtime_error);
}

TEST_CASE("pipeline: analyze emits the documented CSVs") {
    OutDir out("analyze");
    auto cfg = tiny_config(out.path.string());
    cfg.analyze_epochs = 1;
    cfg.record_every = 3;
    cfg.bn_selector = "conv3";
    cmd_pretrain(cfg);
    cmd_search(cfg);
    cmd_analyze(cfg);

    CHECK(fs::exists(out.path / "qgauss_var.csv"));
    CHECK(fs::exists(out.path / "bn_trace.csv"));
    CHECK(fs::exists(out.path / "hessian_per_op.csv"));
    CHECK(fs::exists(out.path / "analyze_summary.json"));

    std::ifstream q(out.path / "qgauss_var.csv");
    std::string header;
    std::getline(q, header);
    CHECK(header == "bits,step,variance");
    // Ordering: variance strictly decreasing in bits over {2,3,4,8}.
    std::map<int, double> var;
    std::string line;
    while (std::getline(q, line)) {
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream is(line);
        int bits;
        double step, v;
        is >> bits >> step >> v;
        var[bits] = v;
    }
    CHECK(var[2] > var[3]);
    CHECK(var[3] > var[4]);
    CHECK(var[4] > var[8]);
    CHECK(std::abs(var[0] - 1.0) < 0.01);

    std::ifstream b(out.path / "bn_trace.csv");
    std::getline(b, header);
    CHECK(header == "regime,iteration,layer,statistic,value");
    std::set<std::string> regimes;
    while (std::getline(b, line))
        regimes.insert(line.substr(0, line.find(',')));
    CHECK(regimes ==
          std::set<std::string>{"random_bit_fp", "random_bit_w4", "bit_meta"});

    std::ifstream h(out.path / "hessian_per_op.csv");
    std::getline(h, header);
    CHECK(header == "layer,ops,trace,trace_per_op");
    int hrows = 0;
    while (std::getline(h, line)) ++hrows;
    CHECK(hrows == 6);  // stem + conv1..4 + classifier

    bool found_hist = false;
    for (const auto& entry : fs::directory_iterator(out.path))
        if (entry.path().filename().string().rfind("act_hist_", 0) == 0)
            found_hist = true;
    CHECK(found_hist);
}

TEST_CASE("pipeline: report merges whatever artifacts exist") {
    OutDir out("report");
    auto cfg = tiny_config(out.path.string());
    CHECK_THROWS(cmd_report(cfg));
    cmd_pretrain(cfg);
    const auto text = cmd_report(cfg);
    const auto j = nlohmann::json::parse(text);
    CHECK(j.contains("pretrain_report.json"));
}

TEST_CASE("pipeline: cifar-format synthetic files round through the real "
          "loader") {
    OutDir out("cifar");
    // Emit CIFAR-10 binary batches, then run the pipeline on them.
    Dataset ds = make_synthetic_images(4, 40, 3, 32, 32, 77);
    Dataset train{ds};
    write_cifar10((out.path / "data_batch_1.bin").string(), train);
    write_cifar10((out.path / "test_batch.bin").string(), train);
    auto cfg = tiny_config(out.path.string());
    cfg.data_kind = "cifar10";
    cfg.data_path = out.path.string();
    cfg.train_n = 0;  // take everything
    cfg.test_n = 0;
    auto data = load_data(cfg);
    CHECK(data.train.n == 160);
    // tiny_net runs at 8x8: the loader output is center-cropped to fit.
    CHECK(data.train.h == 8);
    CHECK(data.train.w == 8);
    CHECK(data.train.c == 3);
}

TEST_CASE("pipeline: fit_dataset pads, crops and replicates channels") {
    Dataset ds = make_synthetic_images(2, 3, 1, 6, 6, 5);
    const auto padded = fit_dataset(ds, 3, 8, 8);
    CHECK(padded.c == 3);
    CHECK(padded.h == 8);
    // Center placement: original pixel (0,0) lands at (1,1).
    CHECK(padded.images[(0 * 8 + 1) * 8 + 1] == ds.images[0]);
    // Channel replication.
    CHECK(padded.images[((0 * 3 + 2) * 8 + 1) * 8 + 1] == ds.images[0]);
    const auto cropped = fit_dataset(padded, 3, 4, 4);
    CHECK(cropped.h == 4);
    CHECK_THROWS(fit_dataset(padded, 2, 8, 8));
}
