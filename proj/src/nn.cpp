#include "owcl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace owcl::nn {

DenseNet make_dense(const std::vector<int>& dims, const std::vector<Act>& acts,
                    std::uint64_t seed) {
  if (dims.size() < 2 || acts.size() != dims.size() - 1)
    throw std::invalid_argument("make_dense: dims/acts mismatch");
  std::mt19937_64 rng(seed);
  DenseNet net;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Layer layer;
    layer.w = Matrix(dims[l + 1], dims[l]);
    layer.b.assign(dims[l + 1], 0.0);
    layer.act = acts[l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& w : layer.w.a) w = u(rng);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

namespace {

double apply_act(Act act, double v) {
  return act == Act::kRelu ? (v > 0.0 ? v : 0.0) : v;
}

double act_grad(Act act, double pre) {
  return act == Act::kRelu ? (pre > 0.0 ? 1.0 : 0.0) : 1.0;
}

}  // namespace

Vec forward(const DenseNet& net, std::span<const double> x,
            const ForwardOpts& opts, Tape* tape) {
  if (static_cast<int>(x.size()) != net.input_dim())
    throw std::invalid_argument("forward: input dim mismatch");
  if (opts.act_masks &&
      static_cast<int>(opts.act_masks->size()) != net.depth())
    throw std::invalid_argument("forward: act mask count mismatch");
  if (opts.weight_masks &&
      static_cast<int>(opts.weight_masks->size()) != net.depth())
    throw std::invalid_argument("forward: weight mask count mismatch");

  Vec h(x.begin(), x.end());
  if (tape) {
    tape->input = h;
    tape->pre.clear();
    tape->post.clear();
    tape->act_masks.clear();
    tape->weight_masks.clear();
    tape->has_act_masks = opts.act_masks != nullptr;
    tape->has_weight_masks = opts.weight_masks != nullptr;
  }
  for (int l = 0; l < net.depth(); ++l) {
    const Layer& layer = net.layers[l];
    if (static_cast<int>(h.size()) != layer.w.cols)
      throw std::invalid_argument("forward: layer dim mismatch");
    const Matrix* wm = opts.weight_masks ? &(*opts.weight_masks)[l] : nullptr;
    if (wm && (wm->rows != layer.w.rows || wm->cols != layer.w.cols))
      throw std::invalid_argument("forward: weight mask shape mismatch");
    Vec pre(layer.w.rows);
    for (int i = 0; i < layer.w.rows; ++i) {
      double acc = layer.b[i];
      const double* wrow = &layer.w.a[static_cast<std::size_t>(i) * layer.w.cols];
      if (wm) {
        const double* mrow = &wm->a[static_cast<std::size_t>(i) * wm->cols];
        for (int j = 0; j < layer.w.cols; ++j) acc += wrow[j] * mrow[j] * h[j];
      } else {
        for (int j = 0; j < layer.w.cols; ++j) acc += wrow[j] * h[j];
      }
      pre[i] = acc;
    }
    Vec post(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i)
      post[i] = apply_act(layer.act, pre[i]);
    const bool mask_this_layer =
        opts.act_masks && !(*opts.act_masks)[l].empty();
    if (mask_this_layer) {
      const Vec& m = (*opts.act_masks)[l];
      if (m.size() != post.size())
        throw std::invalid_argument("forward: act mask size mismatch");
      for (std::size_t i = 0; i < post.size(); ++i) post[i] *= m[i];
    }
    if (tape) {
      tape->pre.push_back(pre);
      tape->post.push_back(post);
      if (opts.act_masks) tape->act_masks.push_back((*opts.act_masks)[l]);
      if (opts.weight_masks) tape->weight_masks.push_back((*opts.weight_masks)[l]);
    }
    h = std::move(post);
  }
  return h;
}

Grads backward(const DenseNet& net, const Tape& tape,
               std::span<const double> dlogits) {
  if (tape.pre.size() != static_cast<std::size_t>(net.depth()))
    throw std::invalid_argument("backward: tape does not match net (missing forward?)");
  Grads g;
  g.dw.resize(net.depth());
  g.db.resize(net.depth());
  if (tape.has_act_masks) g.dmask.resize(net.depth());
  Vec delta(dlogits.begin(), dlogits.end());  // d loss / d post of layer l
  for (int l = net.depth() - 1; l >= 0; --l) {
    const Layer& layer = net.layers[l];
    if (delta.size() != static_cast<std::size_t>(layer.w.rows))
      throw std::invalid_argument("backward: dlogits dim mismatch");
    const bool masked = tape.has_act_masks && !tape.act_masks[l].empty();
    Vec dpre(layer.w.rows);
    if (masked) {
      const Vec& m = tape.act_masks[l];
      if (g.dmask.size() > static_cast<std::size_t>(l)) {
        Vec dm(layer.w.rows);
        for (int i = 0; i < layer.w.rows; ++i)
          dm[i] = delta[i] * apply_act(layer.act, tape.pre[l][i]);
        g.dmask[l] = std::move(dm);
      }
      for (int i = 0; i < layer.w.rows; ++i)
        dpre[i] = delta[i] * m[i] * act_grad(layer.act, tape.pre[l][i]);
    } else {
      for (int i = 0; i < layer.w.rows; ++i)
        dpre[i] = delta[i] * act_grad(layer.act, tape.pre[l][i]);
    }
    const Vec& below = l == 0 ? tape.input : tape.post[l - 1];
    Matrix dw(layer.w.rows, layer.w.cols);
    for (int i = 0; i < layer.w.rows; ++i) {
      double* drow = &dw.a[static_cast<std::size_t>(i) * dw.cols];
      for (int j = 0; j < layer.w.cols; ++j) drow[j] = dpre[i] * below[j];
    }
    g.dw[l] = std::move(dw);
    g.db[l] = dpre;
    // Propagate through the (masked) weights to the layer below.
    Vec dnext(layer.w.cols, 0.0);
    const Matrix* wm = tape.has_weight_masks ? &tape.weight_masks[l] : nullptr;
    for (int i = 0; i < layer.w.rows; ++i) {
      const double* wrow = &layer.w.a[static_cast<std::size_t>(i) * layer.w.cols];
      if (wm) {
        const double* mrow = &wm->a[static_cast<std::size_t>(i) * wm->cols];
        for (int j = 0; j < layer.w.cols; ++j)
          dnext[j] += dpre[i] * wrow[j] * mrow[j];
      } else {
        for (int j = 0; j < layer.w.cols; ++j) dnext[j] += dpre[i] * wrow[j];
      }
    }
    delta = std::move(dnext);
  }
  g.dx = std::move(delta);
  return g;
}

void accumulate(Grads& into, const Grads& g) {
  if (into.dw.empty()) {
    into = g;
    return;
  }
  for (std::size_t l = 0; l < g.dw.size(); ++l) {
    for (std::size_t i = 0; i < g.dw[l].a.size(); ++i)
      into.dw[l].a[i] += g.dw[l].a[i];
    for (std::size_t i = 0; i < g.db[l].size(); ++i)
      into.db[l][i] += g.db[l][i];
  }
  for (std::size_t l = 0; l < g.dmask.size(); ++l)
    for (std::size_t i = 0; i < g.dmask[l].size(); ++i)
      into.dmask[l][i] += g.dmask[l][i];
  for (std::size_t i = 0; i < g.dx.size(); ++i) into.dx[i] += g.dx[i];
}

void scale(Grads& g, double s) {
  for (auto& m : g.dw)
    for (double& v : m.a) v *= s;
  for (auto& v : g.db)
    for (double& x : v) x *= s;
  for (auto& v : g.dmask)
    for (double& x : v) x *= s;
  for (double& x : g.dx) x *= s;
}

bool sgd_step(DenseNet& net, Grads grads, double lr, const GradMod& mod) {
  if (grads.dw.size() != static_cast<std::size_t>(net.depth()))
    throw std::invalid_argument("sgd_step: grads/net mismatch");
  if (mod)
    for (int l = 0; l < net.depth(); ++l) mod(l, grads.dw[l], grads.db[l]);
  for (int l = 0; l < net.depth(); ++l) {
    for (double v : grads.dw[l].a)
      if (!std::isfinite(v)) return false;
    for (double v : grads.db[l])
      if (!std::isfinite(v)) return false;
  }
  for (int l = 0; l < net.depth(); ++l) {
    Layer& layer = net.layers[l];
    for (std::size_t i = 0; i < layer.w.a.size(); ++i) {
      const double g = grads.dw[l].a[i];
      if (g != 0.0) layer.w.a[i] -= lr * g;
    }
    for (std::size_t i = 0; i < layer.b.size(); ++i) {
      const double g = grads.db[l][i];
      if (g != 0.0) layer.b[i] -= lr * g;
    }
  }
  return true;
}

Vec softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("softmax: nonpositive temperature");
  Vec p(logits.begin(), logits.end());
  double mx = p[0];
  for (double v : p) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp((v - mx) / temperature);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

Vec softmax_ce_grad(const Vec& probs, int target) {
  Vec g = probs;
  g[target] -= 1.0;
  return g;
}

namespace {
constexpr char kMagic[8] = {'O', 'W', 'C', 'L', 'N', 'E', 'T', '1'};

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_raw(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace

void write_net(std::ostream& os, const DenseNet& net) {
  os.write(kMagic, sizeof(kMagic));
  const std::uint32_t depth = net.depth();
  write_raw(os, depth);
  for (const Layer& layer : net.layers) {
    const std::uint32_t r = layer.w.rows, c = layer.w.cols;
    const std::uint8_t act = static_cast<std::uint8_t>(layer.act);
    write_raw(os, r);
    write_raw(os, c);
    write_raw(os, act);
    os.write(reinterpret_cast<const char*>(layer.w.a.data()),
             static_cast<std::streamsize>(layer.w.a.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(layer.b.data()),
             static_cast<std::streamsize>(layer.b.size() * sizeof(double)));
  }
}

DenseNet read_net(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("read_net: bad magic");
  std::uint32_t depth = 0;
  read_raw(is, depth);
  DenseNet net;
  for (std::uint32_t l = 0; l < depth; ++l) {
    std::uint32_t r = 0, c = 0;
    std::uint8_t act = 0;
    read_raw(is, r);
    read_raw(is, c);
    read_raw(is, act);
    if (!is || r == 0 || c == 0 || act > 1)
      throw std::runtime_error("read_net: corrupt layer header");
    Layer layer;
    layer.w = Matrix(static_cast<int>(r), static_cast<int>(c));
    layer.b.assign(r, 0.0);
    layer.act = static_cast<Act>(act);
    is.read(reinterpret_cast<char*>(layer.w.a.data()),
            static_cast<std::streamsize>(layer.w.a.size() * sizeof(double)));
    is.read(reinterpret_cast<char*>(layer.b.data()),
            static_cast<std::streamsize>(layer.b.size() * sizeof(double)));
    if (!is) throw std::runtime_error("read_net: truncated stream");
    net.layers.push_back(std::move(layer));
  }
  return net;
}

void save_net(const DenseNet& net, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_net: cannot open " + path.string());
  write_net(os, net);
  if (!os) throw std::runtime_error("save_net: write failed for " + path.string());
}

DenseNet load_net(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_net: cannot open " + path.string());
  return read_net(is);
}

}  // namespace owcl::nn
