#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vseg/ops.hpp"
#include "vseg/rng.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

// Architecture hyperparameters. Defaults are the desk-scale configuration:
// two modalities in, four tissue classes out, three stride-2 downsamplings
// (32^3 patches reach a 4^3 bottleneck), dual attention on the bottleneck.
// enable_attention=false is the Model-1 ablation, enable_dcp=false the
// Model-2 ablation, both false the plain U-shaped baseline.
struct SegNetConfig {
  std::size_t in_modalities = 2;
  std::size_t num_classes = 4;
  std::size_t base_channels = 16;
  std::size_t depth = 3;
  bool enable_attention = true;
  bool enable_dcp = true;
  std::size_t attention_decoder_stages = 0;  // dual attention after the first n decoder stages
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
};

// Named tensors in fixed construction order. The name set is a function of
// the config alone; non-learnable entries are batch-norm running statistics.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool learnable;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> t, bool learnable) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    if (learnable) t.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{name, std::move(t), learnable});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].tensor;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].tensor;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  std::size_t learnable_elements() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.learnable) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct ConvParams {
  Tensor<T> w;
  Tensor<T> b;  // undefined for convs feeding straight into a norm
};

template <class T>
struct BatchNormParams {
  Tensor<T> gamma, beta, running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
};

// Pre-activation norm, then four parallel branches: 3x3x3 at dilation 1, 2,
// 4 (padding = dilation) and a 1x1x1, concatenated in that order.
template <class T>
struct DilaBlockParams {
  BatchNormParams<T> norm;
  ConvParams<T> d1, d2, d4, p1;
};

// Residual stride-2 downsampling: 1x1x1 stride-2 projection on the left,
// dila-block plus activated 3x3x3 stride-2 conv on the right, summed.
template <class T>
struct DCPDownParams {
  ConvParams<T> left;
  DilaBlockParams<T> dila;
  ConvParams<T> down;
};

template <class T>
struct PositionAttentionParams {
  ConvParams<T> query, key, value, out;
  Tensor<T> gamma;  // residual scale, initialized 0
};

template <class T>
struct ChannelAttentionParams {
  Tensor<T> gamma;
};

template <class T>
Tensor<T> dila_block_forward(const Tensor<T>& x, const DilaBlockParams<T>& p, bool training,
                             Tape<T>* tape) {
  BatchNormParams<T> n = p.norm;
  Tensor<T> h = ops::relu(
      ops::batch_norm(x, n.gamma, n.beta, n.running_mean, n.running_var, training, tape, n.eps, n.momentum),
      tape);
  Tensor<T> b1 = ops::conv3d(h, p.d1.w, p.d1.b, ConvSpec{3, 1, 1, 1}, tape);
  Tensor<T> b2 = ops::conv3d(h, p.d2.w, p.d2.b, ConvSpec{3, 1, 2, 2}, tape);
  Tensor<T> b3 = ops::conv3d(h, p.d4.w, p.d4.b, ConvSpec{3, 1, 4, 4}, tape);
  Tensor<T> b4 = ops::conv3d(h, p.p1.w, p.p1.b, ConvSpec{1, 1, 0, 1}, tape);
  return ops::concat<T>({b1, b2, b3, b4}, 1, tape);
}

template <class T>
Tensor<T> dcp_down_forward(const Tensor<T>& x, const DCPDownParams<T>& p, bool training,
                           Tape<T>* tape) {
  for (std::size_t i = 2; i < 5; ++i)
    if (x.dim(i) % 2 != 0)
      throw std::invalid_argument("dcp_down: odd spatial extent " + std::to_string(x.dim(i)));
  Tensor<T> left = ops::conv3d(x, p.left.w, p.left.b, ConvSpec{1, 2, 0, 1}, tape);
  Tensor<T> right = ops::relu(
      ops::conv3d(dila_block_forward(x, p.dila, training, tape), p.down.w, p.down.b,
                  ConvSpec{3, 2, 1, 1}, tape),
      tape);
  return ops::add(left, right, tape);
}

// Self-attention over the D*H*W positions of a single feature map:
// F = softmax(B C^T / sqrt(C_E)) row-wise, attended = F * value rows,
// restored through a 1x1x1 conv and added back under the learnable gamma.
template <class T>
Tensor<T> position_attention_forward(const Tensor<T>& x, const PositionAttentionParams<T>& p,
                                     Tape<T>* tape) {
  if (x.ndim() != 5 || x.dim(0) != 1)
    throw std::invalid_argument("position_attention: expects a single [1,C,D,H,W] map, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  const std::size_t n = x.dim(2) * x.dim(3) * x.dim(4);
  const std::size_t ce = p.query.w.dim(0);

  Tensor<T> q = ops::conv3d(x, p.query.w, p.query.b, ConvSpec{1, 1, 0, 1}, tape);
  Tensor<T> k = ops::conv3d(x, p.key.w, p.key.b, ConvSpec{1, 1, 0, 1}, tape);
  Tensor<T> v = ops::conv3d(x, p.value.w, p.value.b, ConvSpec{1, 1, 0, 1}, tape);

  Tensor<T> qn = ops::transpose2d(ops::reshape(q, {ce, n}, tape), tape);  // [N,CE]
  Tensor<T> kf = ops::reshape(k, {ce, n}, tape);                          // [CE,N]
  Tensor<T> scores = ops::scale(ops::matmul(qn, kf, tape), T(1) / std::sqrt(static_cast<T>(ce)), tape);
  Tensor<T> f = ops::softmax(scores, 1, tape);  // rows sum to 1

  Tensor<T> vn = ops::transpose2d(ops::reshape(v, {c, n}, tape), tape);  // [N,C]
  Tensor<T> attended = ops::matmul(f, vn, tape);                         // [N,C]
  Tensor<T> restored = ops::reshape(ops::transpose2d(attended, tape), x.shape(), tape);
  Tensor<T> o = ops::conv3d(restored, p.out.w, p.out.b, ConvSpec{1, 1, 0, 1}, tape);
  return ops::add(x, ops::scale_by(o, p.gamma, tape), tape);
}

// Channel affinity F_C = softmax(Q_A^T Q_A / sqrt(D*H*W)) row-wise;
// K_C = Q_A F_C^T, restored and added back under gamma.
template <class T>
Tensor<T> channel_attention_forward(const Tensor<T>& x, const ChannelAttentionParams<T>& p,
                                    Tape<T>* tape) {
  if (x.ndim() != 5 || x.dim(0) != 1)
    throw std::invalid_argument("channel_attention: expects a single [1,C,D,H,W] map, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  const std::size_t n = x.dim(2) * x.dim(3) * x.dim(4);

  Tensor<T> xf = ops::reshape(x, {c, n}, tape);          // [C,N]
  Tensor<T> qa = ops::transpose2d(xf, tape);             // [N,C] = Q_A
  Tensor<T> gram = ops::matmul(xf, qa, tape);            // Q_A^T Q_A, [C,C]
  Tensor<T> fc = ops::softmax(ops::scale(gram, T(1) / std::sqrt(static_cast<T>(n)), tape), 1, tape);
  Tensor<T> kc = ops::matmul(qa, ops::transpose2d(fc, tape), tape);  // [N,C]
  Tensor<T> restored = ops::reshape(ops::transpose2d(kc, tape), x.shape(), tape);
  return ops::add(x, ops::scale_by(restored, p.gamma, tape), tape);
}

// Both branches on the same map, concatenated on channels and fused back to
// C channels by a 1x1x1 conv.
template <class T>
Tensor<T> dual_attention_forward(const Tensor<T>& x, const PositionAttentionParams<T>& pos,
                                 const ChannelAttentionParams<T>& chan,
                                 const ConvParams<T>& fuse, Tape<T>* tape) {
  Tensor<T> po = position_attention_forward(x, pos, tape);
  Tensor<T> co = channel_attention_forward(x, chan, tape);
  Tensor<T> cat = ops::concat<T>({po, co}, 1, tape);
  return ops::conv3d(cat, fuse.w, fuse.b, ConvSpec{1, 1, 0, 1}, tape);
}

namespace detail {

template <class T>
void add_conv(ParamSet<T>& ps, Rng* rng, const std::string& base, std::size_t co, std::size_t ci,
              std::size_t k, bool bias) {
  Tensor<T> w({co, ci, k, k, k});
  if (rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(ci * k * k * k));
    for (auto& v : w.values()) v = static_cast<T>(rng->normal() * stddev);
  }
  ps.add(base + ".w", std::move(w), true);
  if (bias) ps.add(base + ".b", Tensor<T>({co}), true);
}

template <class T>
void add_conv_transpose(ParamSet<T>& ps, Rng* rng, const std::string& base, std::size_t ci,
                        std::size_t co, std::size_t k) {
  Tensor<T> w({ci, co, k, k, k});
  if (rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(ci * k * k * k));
    for (auto& v : w.values()) v = static_cast<T>(rng->normal() * stddev);
  }
  ps.add(base + ".w", std::move(w), true);
  ps.add(base + ".b", Tensor<T>({co}), true);
}

template <class T>
void add_norm(ParamSet<T>& ps, const std::string& base, std::size_t c) {
  ps.add(base + ".gamma", Tensor<T>::full({c}, T(1)), true);
  ps.add(base + ".beta", Tensor<T>({c}), true);
  ps.add(base + ".running_mean", Tensor<T>({c}), false);
  ps.add(base + ".running_var", Tensor<T>::full({c}, T(1)), false);
}

template <class T>
void add_dual_attention(ParamSet<T>& ps, Rng* rng, const std::string& base, std::size_t c) {
  const std::size_t ce = std::max<std::size_t>(c / 8, 1);
  add_conv(ps, rng, base + ".pos.query", ce, c, 1, true);
  add_conv(ps, rng, base + ".pos.key", ce, c, 1, true);
  add_conv(ps, rng, base + ".pos.value", c, c, 1, true);
  add_conv(ps, rng, base + ".pos.out", c, c, 1, true);
  ps.add(base + ".pos.gamma", Tensor<T>({1}), true);  // zero: identity at init
  ps.add(base + ".chan.gamma", Tensor<T>({1}), true);
  add_conv(ps, rng, base + ".fuse", c, 2 * c, 1, true);
}

// One builder used by both init (rng != nullptr) and name-set queries, so
// the layout is a function of the config alone.
template <class T>
void build_params(const SegNetConfig& cfg, ParamSet<T>& ps, Rng* rng) {
  const std::size_t l = cfg.depth;
  add_conv(ps, rng, "stem", cfg.channels_at(0), cfg.in_modalities, 3, true);
  for (std::size_t i = 1; i <= l; ++i) {
    const std::string enc = "enc" + std::to_string(i);
    const std::size_t cin = cfg.channels_at(i - 1), cout = cfg.channels_at(i);
    if (cfg.enable_dcp) {
      const std::size_t cbr = std::max<std::size_t>(cout / 4, 1);
      add_norm(ps, enc + ".dcp.norm", cin);
      add_conv(ps, rng, enc + ".dcp.d1", cbr, cin, 3, true);
      add_conv(ps, rng, enc + ".dcp.d2", cbr, cin, 3, true);
      add_conv(ps, rng, enc + ".dcp.d4", cbr, cin, 3, true);
      add_conv(ps, rng, enc + ".dcp.p1", cbr, cin, 1, true);
      add_conv(ps, rng, enc + ".dcp.down", cout, 4 * cbr, 3, true);
      add_conv(ps, rng, enc + ".dcp.left", cout, cin, 1, true);
    } else {
      add_conv(ps, rng, enc + ".plain.conv", cout, cin, 3, false);
      add_norm(ps, enc + ".plain.norm", cout);
    }
  }
  if (cfg.enable_attention) add_dual_attention(ps, rng, "att", cfg.channels_at(l));
  for (std::size_t j = 1; j <= l; ++j) {
    const std::string dec = "dec" + std::to_string(j);
    const std::size_t chi = cfg.channels_at(l - j + 1), clo = cfg.channels_at(l - j);
    add_conv_transpose(ps, rng, dec + ".up", chi, clo, 2);
    add_conv(ps, rng, dec + ".conv1", clo, 2 * clo, 3, false);
    add_norm(ps, dec + ".norm1", clo);
    add_conv(ps, rng, dec + ".conv2", clo, clo, 3, false);
    add_norm(ps, dec + ".norm2", clo);
    if (cfg.enable_attention && j <= cfg.attention_decoder_stages)
      add_dual_attention(ps, rng, dec + ".att", clo);
  }
  add_conv(ps, rng, "head", cfg.num_classes, cfg.channels_at(0), 1, true);
}

template <class T>
ConvParams<T> conv_at(ParamSet<T>& ps, const std::string& base) {
  ConvParams<T> p;
  p.w = ps.at(base + ".w");
  if (ps.contains(base + ".b")) p.b = ps.at(base + ".b");
  return p;
}

template <class T>
BatchNormParams<T> norm_at(ParamSet<T>& ps, const std::string& base, const SegNetConfig& cfg) {
  return BatchNormParams<T>{ps.at(base + ".gamma"), ps.at(base + ".beta"),
                            ps.at(base + ".running_mean"), ps.at(base + ".running_var"),
                            static_cast<T>(cfg.bn_eps), static_cast<T>(cfg.bn_momentum)};
}

template <class T>
Tensor<T> dual_attention_at(ParamSet<T>& ps, const std::string& base, const Tensor<T>& x,
                            Tape<T>* tape) {
  PositionAttentionParams<T> pos{conv_at(ps, base + ".pos.query"), conv_at(ps, base + ".pos.key"),
                                 conv_at(ps, base + ".pos.value"), conv_at(ps, base + ".pos.out"),
                                 ps.at(base + ".pos.gamma")};
  ChannelAttentionParams<T> chan{ps.at(base + ".chan.gamma")};
  ConvParams<T> fuse = conv_at(ps, base + ".fuse");
  if (x.dim(0) == 1) return dual_attention_forward(x, pos, chan, fuse, tape);
  std::vector<Tensor<T>> outs;
  for (std::size_t b = 0; b < x.dim(0); ++b)
    outs.push_back(dual_attention_forward(ops::narrow(x, 0, b, 1, tape), pos, chan, fuse, tape));
  return ops::concat(outs, 0, tape);
}

}  // namespace detail

// He-initialized parameters; gammas of the attention residuals start at zero
// so both attention branches are identities at initialization.
template <class T>
ParamSet<T> init_params(const SegNetConfig& cfg, std::uint64_t seed) {
  ParamSet<T> ps;
  Rng rng(seed);
  detail::build_params(cfg, ps, &rng);
  return ps;
}

// Parameter names for a config without materializing weights.
inline std::vector<std::string> param_names(const SegNetConfig& cfg) {
  ParamSet<float> ps;
  detail::build_params<float>(cfg, ps, nullptr);
  return ps.names();
}

template <class T>
Tensor<T> model_forward(const Tensor<T>& x, ParamSet<T>& ps, const SegNetConfig& cfg,
                        bool training, Tape<T>* tape) {
  if (x.ndim() != 5)
    throw std::invalid_argument("model_forward: input must be [B,M,D,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) != cfg.in_modalities)
    throw std::invalid_argument("model_forward: expected " + std::to_string(cfg.in_modalities) +
                                " modalities, got " + std::to_string(x.dim(1)));
  const std::size_t div = std::size_t(1) << cfg.depth;
  for (std::size_t i = 2; i < 5; ++i)
    if (x.dim(i) % div != 0)
      throw std::invalid_argument("model_forward: extent " + std::to_string(x.dim(i)) +
                                  " not divisible by " + std::to_string(div));

  using namespace detail;
  Tensor<T> cur = ops::conv3d(x, ps.at("stem.w"), ps.at("stem.b"), ConvSpec{3, 1, 1, 1}, tape);
  std::vector<Tensor<T>> skips{cur};
  for (std::size_t i = 1; i <= cfg.depth; ++i) {
    const std::string enc = "enc" + std::to_string(i);
    if (cfg.enable_dcp) {
      DCPDownParams<T> p{conv_at(ps, enc + ".dcp.left"),
                         DilaBlockParams<T>{norm_at(ps, enc + ".dcp.norm", cfg),
                                            conv_at(ps, enc + ".dcp.d1"), conv_at(ps, enc + ".dcp.d2"),
                                            conv_at(ps, enc + ".dcp.d4"), conv_at(ps, enc + ".dcp.p1")},
                         conv_at(ps, enc + ".dcp.down")};
      cur = dcp_down_forward(cur, p, training, tape);
    } else {
      ConvParams<T> c = conv_at(ps, enc + ".plain.conv");
      BatchNormParams<T> n = norm_at(ps, enc + ".plain.norm", cfg);
      cur = ops::relu(ops::batch_norm(ops::conv3d(cur, c.w, c.b, ConvSpec{3, 2, 1, 1}, tape),
                                      n.gamma, n.beta, n.running_mean, n.running_var, training,
                                      tape, n.eps, n.momentum),
                      tape);
    }
    if (i < cfg.depth) skips.push_back(cur);
  }
  if (cfg.enable_attention) cur = dual_attention_at(ps, "att", cur, tape);
  for (std::size_t j = 1; j <= cfg.depth; ++j) {
    const std::string dec = "dec" + std::to_string(j);
    Tensor<T> up = ops::conv_transpose3d(cur, ps.at(dec + ".up.w"), ps.at(dec + ".up.b"), 2, 0, tape);
    Tensor<T> cat = ops::concat<T>({up, skips[cfg.depth - j]}, 1, tape);
    ConvParams<T> c1 = conv_at(ps, dec + ".conv1");
    BatchNormParams<T> n1 = norm_at(ps, dec + ".norm1", cfg);
    cur = ops::relu(ops::batch_norm(ops::conv3d(cat, c1.w, c1.b, ConvSpec{3, 1, 1, 1}, tape),
                                    n1.gamma, n1.beta, n1.running_mean, n1.running_var, training,
                                    tape, n1.eps, n1.momentum),
                    tape);
    ConvParams<T> c2 = conv_at(ps, dec + ".conv2");
    BatchNormParams<T> n2 = norm_at(ps, dec + ".norm2", cfg);
    cur = ops::relu(ops::batch_norm(ops::conv3d(cur, c2.w, c2.b, ConvSpec{3, 1, 1, 1}, tape),
                                    n2.gamma, n2.beta, n2.running_mean, n2.running_var, training,
                                    tape, n2.eps, n2.momentum),
                    tape);
    if (cfg.enable_attention && j <= cfg.attention_decoder_stages)
      cur = dual_attention_at(ps, dec + ".att", cur, tape);
  }
  return ops::conv3d(cur, ps.at("head.w"), ps.at("head.b"), ConvSpec{1, 1, 0, 1}, tape);
}

}  // namespace vseg
