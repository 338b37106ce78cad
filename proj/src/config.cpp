#include <fstream>
#include <sstream>

#include "bitmix/config.hpp"

namespace bitmix {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stoi(trim(tok)));
    return out;
}

std::vector<std::pair<int, int>> parse_pairs(const std::string& s) {
    // "8:4,4:4,2:2"
    std::vector<std::pair<int, int>> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        const auto colon = tok.find(':');
        check(colon != std::string::npos,
              "config: pair candidates must look like a:w, got '" + tok + "'");
        out.emplace_back(std::stoi(trim(tok.substr(0, colon))),
                         std::stoi(trim(tok.substr(colon + 1))));
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

}  // namespace

void RunConfig::validate() const {
    check(arch == "toy_mobilenet" || arch == "toy_resnet" || arch == "tiny_net",
          "config: unknown arch '" + arch + "'");
    check(data_kind == "synthetic" || data_kind == "blobs" ||
              data_kind == "cifar10" || data_kind == "idx",
          "config: unknown data kind '" + data_kind + "'");
    if (data_kind == "cifar10" || data_kind == "idx")
        check(!data_path.empty(),
              "config: data.path required for kind '" + data_kind + "'");
    check(batch >= 1 && train_n >= 0 && test_n >= 0, "config: bad data sizes");
    for (int b : effective_candidates())
        check(b >= 2 && b <= 16, "config: candidate bits out of range");
    check(effective_candidates().size() >= 2,
          "config: need at least 2 candidate bit-widths");
    check(weight_bits >= 2 && weight_bits <= 16, "config: bad weight bits");
    if (pair_mode)
        check(!pair_candidates.empty(),
              "config: pair mode needs quant.pair_candidates");
    check(t_bops.rfind("ratio:", 0) == 0 || std::stod(t_bops) > 0,
          "config: t_bops must be positive or ratio:<r>");
    if (t_bops.rfind("ratio:", 0) == 0) {
        const double r = std::stod(t_bops.substr(6));
        check(r > 0 && r <= 1, "config: t_bops ratio must be in (0,1]");
    }
    check(bit_meta_epochs >= 0 && alternate_epochs >= 0 &&
              meta_iters >= 1 && search_iters >= 1,
          "config: bad search schedule");
    check(pretrain_epochs >= 0 && finetune_epochs >= 0,
          "config: bad train schedule");
    check(lr_weights > 0 && lr_steps > 0 && lr_alphas > 0,
          "config: learning rates must be positive");
    check(init_from == "meta" || init_from == "fp",
          "config: train.init_from must be meta or fp");
    check(!out_dir.empty(), "config: out.dir required");
    check(kernels == "auto" || kernels == "scalar" || kernels == "avx2",
          "config: kernels must be auto|scalar|avx2");
    check(hessian_probes >= 10, "config: analyze.hessian_probes must be >= 10");
}

std::vector<int> RunConfig::effective_candidates() const {
    if (!candidates.empty()) return candidates;
    if (arch == "toy_resnet") return {8, 4, 2};
    return {8, 4, 3};
}

real_t RunConfig::effective_lambda() const {
    if (lambda_r >= 0) return lambda_r;
    return arch == "toy_resnet" ? real_t(0.4) : real_t(1);
}

RunConfig RunConfig::from_pairs(
    const std::map<std::string, std::string>& pairs) {
    RunConfig c;
    for (const auto& [key, v] : pairs) {
        if (key == "model.arch") c.arch = v;
        else if (key == "model.width") c.width = std::stoi(v);
        else if (key == "model.depth") c.depth = std::stoi(v);
        else if (key == "model.classes") c.classes = std::stoi(v);
        else if (key == "data.kind") c.data_kind = v;
        else if (key == "data.path") c.data_path = v;
        else if (key == "data.train_n") c.train_n = std::stoll(v);
        else if (key == "data.test_n") c.test_n = std::stoll(v);
        else if (key == "data.noise") c.noise = static_cast<real_t>(std::stod(v));
        else if (key == "data.batch") c.batch = std::stoll(v);
        else if (key == "data.augment") c.augment = parse_bool(key, v);
        else if (key == "quant.candidates") c.candidates = parse_int_list(v);
        else if (key == "quant.weight_bits") c.weight_bits = std::stoi(v);
        else if (key == "quant.lsq_scale") c.lsq_scale = parse_bool(key, v);
        else if (key == "quant.pair_mode") c.pair_mode = parse_bool(key, v);
        else if (key == "quant.pair_candidates") c.pair_candidates = parse_pairs(v);
        else if (key == "search.t_bops") c.t_bops = v;
        else if (key == "search.lambda_r") c.lambda_r = static_cast<real_t>(std::stod(v));
        else if (key == "search.bit_meta_epochs") c.bit_meta_epochs = std::stoi(v);
        else if (key == "search.alternate_epochs") c.alternate_epochs = std::stoi(v);
        else if (key == "search.meta_iters") c.meta_iters = std::stoi(v);
        else if (key == "search.search_iters") c.search_iters = std::stoi(v);
        else if (key == "search.uniform_bits") c.uniform_bits = std::stoi(v);
        else if (key == "train.pretrain_epochs") c.pretrain_epochs = std::stoi(v);
        else if (key == "train.finetune_epochs") c.finetune_epochs = std::stoi(v);
        else if (key == "train.lr_weights") c.lr_weights = static_cast<real_t>(std::stod(v));
        else if (key == "train.lr_steps") c.lr_steps = static_cast<real_t>(std::stod(v));
        else if (key == "train.lr_alphas") c.lr_alphas = static_cast<real_t>(std::stod(v));
        else if (key == "train.momentum") c.momentum = static_cast<real_t>(std::stod(v));
        else if (key == "train.alpha_momentum") c.alpha_momentum = static_cast<real_t>(std::stod(v));
        else if (key == "train.weight_decay") c.weight_decay = static_cast<real_t>(std::stod(v));
        else if (key == "train.cosine") c.cosine = parse_bool(key, v);
        else if (key == "train.init_from") c.init_from = v;
        else if (key == "train.seed") c.seed = std::stoull(v);
        else if (key == "analyze.epochs") c.analyze_epochs = std::stoi(v);
        else if (key == "analyze.record_every") c.record_every = std::stoi(v);
        else if (key == "analyze.hessian_probes") c.hessian_probes = std::stoi(v);
        else if (key == "analyze.bn_selector") c.bn_selector = v;
        else if (key == "out.dir") c.out_dir = v;
        else if (key == "out.kernels") c.kernels = v;
        else fail("config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
    std::map<std::string, std::string> pairs;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        check(in.good(), "config: cannot open '" + config_path + "'");
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[' && line.back() == ']') {
                section = trim(line.substr(1, line.size() - 2));
                check(!section.empty(), "config: empty section header at line " +
                                            std::to_string(lineno));
                continue;
            }
            const auto eq = line.find('=');
            check(eq != std::string::npos, "config: expected key=value at line " +
                                               std::to_string(lineno));
            check(!section.empty(), "config: key before any [section] at line " +
                                        std::to_string(lineno));
            pairs[section + "." + trim(line.substr(0, eq))] =
                trim(line.substr(eq + 1));
        }
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        check(eq != std::string::npos,
              "config: override must be section.key=value, got '" + ov + "'");
        pairs[trim(ov.substr(0, eq))] = trim(ov.substr(eq + 1));
    }
    return from_pairs(pairs);
}

}  // namespace bitmix
