#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

// Minimal dense-network substrate: forward with optional per-layer activation
// masks and per-layer weight masks, exact reverse-mode gradients including the
// input gradient, and plain SGD with a gradient-modification hook. 64-bit
// floats throughout so frozen-parameter checks can be bit-exact.

namespace owcl::nn {

using Vec = std::vector<double>;

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, fill) {}
  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return a.size(); }
};

enum class Act : std::uint8_t { kIdentity = 0, kRelu = 1 };

struct Layer {
  Matrix w;  // rows = out, cols = in
  Vec b;
  Act act = Act::kIdentity;
};

struct DenseNet {
  std::vector<Layer> layers;

  int input_dim() const { return layers.empty() ? 0 : layers.front().w.cols; }
  int output_dim() const { return layers.empty() ? 0 : layers.back().w.rows; }
  int depth() const { return static_cast<int>(layers.size()); }
};

// Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
// acts has dims.size()-1 entries.
DenseNet make_dense(const std::vector<int>& dims, const std::vector<Act>& acts,
                    std::uint64_t seed);

// Per-layer element-wise masks. act_masks[l] multiplies layer l's
// post-activation output; an empty vector leaves that layer unmasked (a
// trunk masks every layer including its feature output, while a standalone
// network's output layer stays bare). Weight masks multiply W entry-wise.
struct ForwardOpts {
  const std::vector<Vec>* act_masks = nullptr;
  const std::vector<Matrix>* weight_masks = nullptr;
};

struct Tape {
  Vec input;
  std::vector<Vec> pre;     // pre-activation per layer
  std::vector<Vec> post;    // post-activation, post-mask per layer
  std::vector<Vec> act_masks;       // copies of the masks in effect
  std::vector<Matrix> weight_masks;
  bool has_act_masks = false;
  bool has_weight_masks = false;
};

// Returns final-layer pre-softmax outputs; fills the tape when given.
// Throws std::invalid_argument on dimension mismatch.
Vec forward(const DenseNet& net, std::span<const double> x,
            const ForwardOpts& opts = {}, Tape* tape = nullptr);

struct Grads {
  std::vector<Matrix> dw;  // gradient w.r.t. the effective (masked) weights
  std::vector<Vec> db;
  std::vector<Vec> dmask;  // d loss / d activation-mask entries, when masks used
  Vec dx;                  // input gradient
};

// Reverse-mode gradients of a scalar loss given d loss / d logits. With weight
// masks in effect, dw is the gradient w.r.t. the effective product; multiply
// by the mask for d/dW or by W for the straight-through score gradient.
Grads backward(const DenseNet& net, const Tape& tape,
               std::span<const double> dlogits);

void accumulate(Grads& into, const Grads& g);
void scale(Grads& g, double s);

// Hook applied before the update; layer index, then mutable dw/db.
using GradMod = std::function<void(int layer, Matrix& dw, Vec& db)>;

// W <- W - lr * modified grads. Zero entries are skipped so protected
// parameters stay bit-identical. Returns false (and leaves the net untouched)
// when any modified gradient is non-finite.
bool sgd_step(DenseNet& net, Grads grads, double lr, const GradMod& mod = {});

Vec softmax(std::span<const double> logits, double temperature = 1.0);
// d loss / d logits for softmax + cross-entropy at a one-hot target.
Vec softmax_ce_grad(const Vec& probs, int target);

// Versioned binary checkpoint; round-trips bit-exactly.
void save_net(const DenseNet& net, const std::filesystem::path& path);
DenseNet load_net(const std::filesystem::path& path);

// Stream-level payload used by the checkpoint format and by composite model
// serialization.
void write_net(std::ostream& os, const DenseNet& net);
DenseNet read_net(std::istream& is);

}  // namespace owcl::nn
