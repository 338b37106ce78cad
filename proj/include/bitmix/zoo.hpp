#pragma once

#include <string>
#include <vector>

#include "bitmix/common.hpp"

namespace bitmix {

enum class Act { None, ReLU, ReLU6 };
enum class LayerKind { Conv, Linear, Add, GlobalAvgPool };

// Which activation quantizer a quantizable layer's input gets. First and
// last layers are pinned to 8-bit (weights too) and excluded from search.
enum class QuantRole { None, FixedFirst, FixedLast, Searched };

struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    std::string name;
    int in0 = -1;  // producing layer index; -1 = previous layer (model input
                   // for layer 0)
    int in1 = -1;  // second input, Add only
    int in_ch = 0, out_ch = 0, k = 1, stride = 1, pad = 0, groups = 1;
    bool bn = false;
    Act act = Act::None;
    QuantRole quant = QuantRole::None;
    bool depthwise = false;  // instrumentation label

    bool quantizable() const { return quant != QuantRole::None; }
};

struct ModelSpec {
    std::string arch;
    int input_ch = 3, input_h = 32, input_w = 32;
    int classes = 10;
    std::vector<LayerSpec> layers;

    void validate() const;
    std::vector<int> searched_layers() const;

    std::string to_text() const;
    static ModelSpec from_text(const std::string& text);
};

// Stem conv + inverted-residual blocks (pointwise expand -> depthwise 3x3 ->
// pointwise project, each BN+ReLU6, residual when shapes match) + classifier.
ModelSpec build_toy_mobilenet(int width, int num_classes);

// Basic-block residual net, depth = 6n+2 (stem + 3 stages of n blocks + fc).
ModelSpec build_toy_resnet(int depth, int num_classes, int width = 16);

// 4 searched conv layers + classifier; small enough for exhaustive
// assignment enumeration in tests.
ModelSpec build_tiny_net(int width, int num_classes);

}  // namespace bitmix
