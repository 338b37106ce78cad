#include <map>
#include <sstream>

#include "bitmix/zoo.hpp"

namespace bitmix {
namespace {

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Linear: return "linear";
        case LayerKind::Add: return "add";
        case LayerKind::GlobalAvgPool: return "gap";
    }
    return "?";
}

LayerKind kind_from(const std::string& s) {
    if (s == "conv") return LayerKind::Conv;
    if (s == "linear") return LayerKind::Linear;
    if (s == "add") return LayerKind::Add;
    if (s == "gap") return LayerKind::GlobalAvgPool;
    fail("model spec: unknown layer kind '" + s + "'");
}

const char* act_name(Act a) {
    switch (a) {
        case Act::None: return "none";
        case Act::ReLU: return "relu";
        case Act::ReLU6: return "relu6";
    }
    return "?";
}

Act act_from(const std::string& s) {
    if (s == "none") return Act::None;
    if (s == "relu") return Act::ReLU;
    if (s == "relu6") return Act::ReLU6;
    fail("model spec: unknown activation '" + s + "'");
}

const char* quant_name(QuantRole q) {
    switch (q) {
        case QuantRole::None: return "none";
        case QuantRole::FixedFirst: return "first8";
        case QuantRole::FixedLast: return "last8";
        case QuantRole::Searched: return "searched";
    }
    return "?";
}

QuantRole quant_from(const std::string& s) {
    if (s == "none") return QuantRole::None;
    if (s == "first8") return QuantRole::FixedFirst;
    if (s == "last8") return QuantRole::FixedLast;
    if (s == "searched") return QuantRole::Searched;
    fail("model spec: unknown quant role '" + s + "'");
}

}  // namespace

void ModelSpec::validate() const {
    check(!layers.empty(), "model spec: no layers");
    check(input_ch > 0 && input_h > 0 && input_w > 0 && classes > 1,
          "model spec: bad input/class dimensions");
    int firsts = 0, lasts = 0;
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        check(!l.name.empty(), "model spec: unnamed layer");
        if (l.quant == QuantRole::FixedFirst) ++firsts;
        if (l.quant == QuantRole::FixedLast) ++lasts;
        check(l.in0 < static_cast<int>(i) && l.in1 < static_cast<int>(i),
              "model spec: layer '" + l.name + "' consumes a later layer");
        if (l.kind == LayerKind::Add)
            check(l.in1 >= 0, "model spec: add layer '" + l.name +
                                  "' needs two inputs");
        if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear)
            check(l.in_ch > 0 && l.out_ch > 0,
                  "model spec: layer '" + l.name + "' has unresolved shape");
        if (l.kind == LayerKind::Conv)
            check(l.in_ch % l.groups == 0 && l.out_ch % l.groups == 0,
                  "model spec: layer '" + l.name +
                      "' channels not divisible by groups");
    }
    check(firsts == 1, "model spec: exactly one first-layer marker required");
    check(lasts == 1, "model spec: exactly one last-layer marker required");
    for (size_t i = 0; i < layers.size(); ++i) {
        for (size_t j = i + 1; j < layers.size(); ++j)
            check(layers[i].name != layers[j].name,
                  "model spec: duplicate layer name '" + layers[i].name + "'");
    }
}

std::vector<int> ModelSpec::searched_layers() const {
    std::vector<int> out;
    for (size_t i = 0; i < layers.size(); ++i)
        if (layers[i].quant == QuantRole::Searched)
            out.push_back(static_cast<int>(i));
    return out;
}

std::string ModelSpec::to_text() const {
    std::ostringstream os;
    os << "arch " << arch << "\n";
    os << "input " << input_ch << " " << input_h << " " << input_w << "\n";
    os << "classes " << classes << "\n";
    for (const auto& l : layers) {
        os << "layer " << kind_name(l.kind) << " " << l.name << " in0=" << l.in0
           << " in1=" << l.in1;
        if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear)
            os << " ch=" << l.in_ch << ":" << l.out_ch << " k=" << l.k
               << " s=" << l.stride << " p=" << l.pad << " g=" << l.groups;
        os << " bn=" << (l.bn ? 1 : 0) << " act=" << act_name(l.act)
           << " quant=" << quant_name(l.quant)
           << " dw=" << (l.depthwise ? 1 : 0) << "\n";
    }
    return os.str();
}

ModelSpec ModelSpec::from_text(const std::string& text) {
    ModelSpec spec;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "arch") {
            ls >> spec.arch;
        } else if (tag == "input") {
            ls >> spec.input_ch >> spec.input_h >> spec.input_w;
        } else if (tag == "classes") {
            ls >> spec.classes;
        } else if (tag == "layer") {
            LayerSpec l;
            std::string kind;
            ls >> kind >> l.name;
            l.kind = kind_from(kind);
            std::string kv;
            while (ls >> kv) {
                const auto eq = kv.find('=');
                check(eq != std::string::npos,
                      "model spec: malformed field '" + kv + "'");
                const std::string key = kv.substr(0, eq);
                const std::string val = kv.substr(eq + 1);
                if (key == "in0") l.in0 = std::stoi(val);
                else if (key == "in1") l.in1 = std::stoi(val);
                else if (key == "ch") {
                    const auto colon = val.find(':');
                    check(colon != std::string::npos,
                          "model spec: malformed ch field");
                    l.in_ch = std::stoi(val.substr(0, colon));
                    l.out_ch = std::stoi(val.substr(colon + 1));
                } else if (key == "k") l.k = std::stoi(val);
                else if (key == "s") l.stride = std::stoi(val);
                else if (key == "p") l.pad = std::stoi(val);
                else if (key == "g") l.groups = std::stoi(val);
                else if (key == "bn") l.bn = val == "1";
                else if (key == "act") l.act = act_from(val);
                else if (key == "quant") l.quant = quant_from(val);
                else if (key == "dw") l.depthwise = val == "1";
                else fail("model spec: unknown field '" + key + "'");
            }
            spec.layers.push_back(std::move(l));
        } else {
            fail("model spec: unknown line tag '" + tag + "'");
        }
    }
    spec.validate();
    return spec;
}

namespace {

int add_conv(ModelSpec& spec, const std::string& name, int in0, int in_ch,
             int out_ch, int k, int stride, int groups, QuantRole quant,
             bool depthwise = false) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.name = name;
    l.in0 = in0;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.k = k;
    l.stride = stride;
    l.pad = k / 2;
    l.groups = groups;
    l.bn = true;
    l.act = Act::ReLU6;
    l.quant = quant;
    l.depthwise = depthwise;
    spec.layers.push_back(std::move(l));
    return static_cast<int>(spec.layers.size()) - 1;
}

}  // namespace

ModelSpec build_toy_mobilenet(int width, int num_classes) {
    check(width >= 8, "toy mobilenet: width must be >= 8");
    check(num_classes > 1, "toy mobilenet: needs at least 2 classes");
    ModelSpec spec;
    spec.arch = "toy_mobilenet";
    spec.classes = num_classes;
    const int expand = 2;

    int prev = add_conv(spec, "stem", -1, 3, width, 3, 1, 1,
                        QuantRole::FixedFirst);

    struct BlockCfg { int in, out, stride; };
    const std::vector<BlockCfg> blocks = {
        {width, width, 1},     {width, 2 * width, 2}, {2 * width, 2 * width, 1},
        {2 * width, 4 * width, 2}, {4 * width, 4 * width, 1}};
    for (size_t b = 0; b < blocks.size(); ++b) {
        const auto [in, out, stride] = blocks[b];
        const int mid = in * expand;
        const std::string base = "block" + std::to_string(b + 1);
        const int skip = prev;
        int cur = add_conv(spec, base + ".expand", prev, in, mid, 1, 1, 1,
                           QuantRole::Searched);
        cur = add_conv(spec, base + ".dw", cur, mid, mid, 3, stride, mid,
                       QuantRole::Searched, /*depthwise=*/true);
        cur = add_conv(spec, base + ".project", cur, mid, out, 1, 1, 1,
                       QuantRole::Searched);
        if (in == out && stride == 1) {
            LayerSpec addl;
            addl.kind = LayerKind::Add;
            addl.name = base + ".add";
            addl.in0 = cur;
            addl.in1 = skip;
            spec.layers.push_back(std::move(addl));
            cur = static_cast<int>(spec.layers.size()) - 1;
        }
        prev = cur;
    }

    LayerSpec gap;
    gap.kind = LayerKind::GlobalAvgPool;
    gap.name = "gap";
    gap.in0 = prev;
    spec.layers.push_back(std::move(gap));

    LayerSpec fc;
    fc.kind = LayerKind::Linear;
    fc.name = "classifier";
    fc.in0 = static_cast<int>(spec.layers.size()) - 1;
    fc.in_ch = 4 * width;
    fc.out_ch = num_classes;
    fc.quant = QuantRole::FixedLast;
    spec.layers.push_back(std::move(fc));

    spec.validate();
    return spec;
}

ModelSpec build_toy_resnet(int depth, int num_classes, int width) {
    check(depth >= 8 && (depth - 2) % 6 == 0,
          "toy resnet: depth must be 6n+2 with n >= 1");
    check(num_classes > 1, "toy resnet: needs at least 2 classes");
    const int n = (depth - 2) / 6;
    ModelSpec spec;
    spec.arch = "toy_resnet";
    spec.classes = num_classes;

    int prev = add_conv(spec, "stem", -1, 3, width, 3, 1, 1,
                        QuantRole::FixedFirst);
    // ReLU (not ReLU6) is the usual choice here; keep ReLU6 uniform so all
    // searched quantizer inputs share the same bounded-nonnegative contract.
    int ch = width;
    for (int stage = 0; stage < 3; ++stage) {
        const int out = width << stage;
        for (int blk = 0; blk < n; ++blk) {
            const int stride = (stage > 0 && blk == 0) ? 2 : 1;
            const std::string base =
                "stage" + std::to_string(stage + 1) + ".block" +
                std::to_string(blk + 1);
            const int skip_src = prev;
            int cur = add_conv(spec, base + ".conv1", prev, ch, out, 3, stride,
                               1, QuantRole::Searched);
            cur = add_conv(spec, base + ".conv2", cur, out, out, 3, 1, 1,
                           QuantRole::Searched);
            int skip = skip_src;
            if (ch != out || stride != 1) {
                skip = add_conv(spec, base + ".down", skip_src, ch, out, 1,
                                stride, 1, QuantRole::Searched);
            }
            LayerSpec addl;
            addl.kind = LayerKind::Add;
            addl.name = base + ".add";
            addl.in0 = cur;
            addl.in1 = skip;
            spec.layers.push_back(std::move(addl));
            prev = static_cast<int>(spec.layers.size()) - 1;
            ch = out;
        }
    }

    LayerSpec gap;
    gap.kind = LayerKind::GlobalAvgPool;
    gap.name = "gap";
    gap.in0 = prev;
    spec.layers.push_back(std::move(gap));

    LayerSpec fc;
    fc.kind = LayerKind::Linear;
    fc.name = "classifier";
    fc.in0 = static_cast<int>(spec.layers.size()) - 1;
    fc.in_ch = ch;
    fc.out_ch = num_classes;
    fc.quant = QuantRole::FixedLast;
    spec.layers.push_back(std::move(fc));

    spec.validate();
    return spec;
}

ModelSpec build_tiny_net(int width, int num_classes) {
    check(width >= 4, "tiny net: width must be >= 4");
    ModelSpec spec;
    spec.arch = "tiny_net";
    spec.classes = num_classes;
    spec.input_h = 8;
    spec.input_w = 8;
    int prev = add_conv(spec, "stem", -1, 3, width, 3, 1, 1,
                        QuantRole::FixedFirst);
    prev = add_conv(spec, "conv1", prev, width, width, 3, 1, 1,
                    QuantRole::Searched);
    prev = add_conv(spec, "conv2", prev, width, width, 3, 2, 1,
                    QuantRole::Searched);
    prev = add_conv(spec, "conv3", prev, width, width, 3, 1, width,
                    QuantRole::Searched, /*depthwise=*/true);
    prev = add_conv(spec, "conv4", prev, width, 2 * width, 3, 1, 1,
                    QuantRole::Searched);

    LayerSpec gap;
    gap.kind = LayerKind::GlobalAvgPool;
    gap.name = "gap";
    gap.in0 = prev;
    spec.layers.push_back(std::move(gap));

    LayerSpec fc;
    fc.kind = LayerKind::Linear;
    fc.name = "classifier";
    fc.in0 = static_cast<int>(spec.layers.size()) - 1;
    fc.in_ch = 2 * width;
    fc.out_ch = num_classes;
    fc.quant = QuantRole::FixedLast;
    spec.layers.push_back(std::move(fc));

    spec.validate();
    return spec;
}

}  // namespace bitmix
