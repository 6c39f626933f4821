#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rcnf/autodiff.hpp"
#include "rcnf/error.hpp"

namespace rcnf::nn {

using ad::Index;
using ad::Mat;
using ad::Var;

/// Named trainable tensors in registration order.
class ParamSet {
 public:
  Var add(const std::string& path, Mat init) {
    require(index_.find(path) == index_.end(), Errc::invalid_argument, "duplicate parameter " + path);
    index_[path] = entries_.size();
    entries_.emplace_back(path, Var::param(std::move(init)));
    return entries_.back().second;
  }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Var>>& entries() { return entries_; }

  Var get(const std::string& path) const {
    auto it = index_.find(path);
    require(it != index_.end(), Errc::invalid_argument, "no parameter " + path);
    return entries_[it->second].second;
  }

  bool contains(const std::string& path) const { return index_.count(path) != 0; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += static_cast<std::size_t>(v.value().size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline Mat uniform_init(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

struct Linear {
  Var weight;  // (out, in)
  Var bias;    // (1, out)

  Linear() = default;
  Linear(ParamSet& ps, const std::string& path, Index in, Index out, std::mt19937_64& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = ps.add(path + ".weight", uniform_init(out, in, bound, rng));
    if (with_bias) bias = ps.add(path + ".bias", uniform_init(1, out, bound, rng));
  }

  Var operator()(const Var& x) const { return bias.defined() ? ad::linear(x, weight, bias) : ad::linear(x, weight); }

  void zero() {
    weight.mutable_value().setZero();
    if (bias.defined()) bias.mutable_value().setZero();
  }
};

struct LayerNorm {
  Var gain, bias;

  LayerNorm() = default;
  LayerNorm(ParamSet& ps, const std::string& path, Index width) {
    gain = ps.add(path + ".gain", Mat::Ones(1, width));
    bias = ps.add(path + ".bias", Mat::Zero(1, width));
  }

  Var operator()(const Var& x) const { return ad::layer_norm(x, gain, bias); }
};

/// Single-layer GRU (PyTorch gate convention) over a batch of sequences laid
/// out window-major: row b*steps + t holds step t of sequence b.
struct Gru {
  Linear input, hidden;
  Index width = 0;

  Gru() = default;
  Gru(ParamSet& ps, const std::string& path, Index in, Index hid, std::mt19937_64& rng)
      : input(ps, path + ".ih", in, 3 * hid, rng), hidden(ps, path + ".hh", hid, 3 * hid, rng), width(hid) {}

  Var operator()(const Var& seq, Index batch, Index steps) const {
    const Var gx = input(seq);
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(steps));
    Var h(Mat::Zero(batch, width));
    for (Index t = 0; t < steps; ++t) {
      std::vector<Index> rows(static_cast<std::size_t>(batch));
      for (Index b = 0; b < batch; ++b) rows[static_cast<std::size_t>(b)] = b * steps + t;
      const Var xt = ad::gather_rows(gx, rows);
      const Var ht = hidden(h);
      const Var r = ad::sigmoid(ad::add(ad::slice_cols(xt, 0, width), ad::slice_cols(ht, 0, width)));
      const Var z = ad::sigmoid(ad::add(ad::slice_cols(xt, width, width), ad::slice_cols(ht, width, width)));
      const Var n = ad::tanh(ad::add(ad::slice_cols(xt, 2 * width, width), ad::mul(r, ad::slice_cols(ht, 2 * width, width))));
      // h' = n + z * (h - n)
      h = ad::add(n, ad::mul(z, ad::sub(h, n)));
      outs.push_back(h);
    }
    // outs are step-major; reorder to window-major
    const Var stacked = ad::concat_rows(outs);
    std::vector<Index> order(static_cast<std::size_t>(batch * steps));
    for (Index b = 0; b < batch; ++b)
      for (Index t = 0; t < steps; ++t) order[static_cast<std::size_t>(b * steps + t)] = t * batch + b;
    return ad::gather_rows(stacked, std::move(order));
  }
};

struct MultiHeadAttention {
  Linear q, k, v, out;
  Index heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamSet& ps, const std::string& path, Index width, Index num_heads, std::mt19937_64& rng)
      : q(ps, path + ".q", width, width, rng),
        k(ps, path + ".k", width, width, rng, false),  // a key bias cannot change the softmax
        v(ps, path + ".v", width, width, rng),
        out(ps, path + ".out", width, width, rng),
        heads(num_heads) {}

  Var operator()(const Var& query, const Var& memory, Index batch, Index lq, Index lk) const {
    return out(ad::attention(q(query), k(memory), v(memory), batch, lq, lk, heads));
  }
};

/// Post-norm transformer layer. With memory == query it is a self-attention
/// encoder layer; otherwise queries attend to the memory tokens.
struct TransformerLayer {
  MultiHeadAttention attn;
  LayerNorm norm1, norm2;
  Linear ff1, ff2;
  double dropout = 0.0;

  TransformerLayer() = default;
  TransformerLayer(ParamSet& ps, const std::string& path, Index width, Index heads, Index hidden, double drop,
                   std::mt19937_64& rng)
      : attn(ps, path + ".attn", width, heads, rng),
        norm1(ps, path + ".norm1", width),
        norm2(ps, path + ".norm2", width),
        ff1(ps, path + ".ff1", width, hidden, rng),
        ff2(ps, path + ".ff2", hidden, width, rng),
        dropout(drop) {}

  Var operator()(const Var& query, const Var& memory, Index batch, Index lq, Index lk,
                 std::mt19937_64* rng = nullptr) const {
    auto drop = [&](const Var& x) { return rng ? ad::dropout(x, dropout, *rng) : x; };
    Var x = norm1(ad::add(query, drop(attn(query, memory, batch, lq, lk))));
    return norm2(ad::add(x, drop(ff2(ad::gelu(ff1(x))))));
  }
};

}  // namespace rcnf::nn
