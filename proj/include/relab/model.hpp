#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "relab/numerics.hpp"

namespace relab {

struct ModelDims {
  std::size_t feat = 0;     // D: input feature dimension
  std::size_t dense = 0;    // H1: units of the ReLU layer
  std::size_t hidden = 0;   // H2: LSTM units per direction
  std::size_t classes = 0;  // C

  bool operator==(const ModelDims&) const = default;
};

// All classifier parameters in one flat buffer. Order (also the checkpoint
// tensor order): W1, b1, fwd.Wx, fwd.Wh, fwd.b, bwd.Wx, bwd.Wh, bwd.b, u,
// Wo, bo. LSTM gate blocks are stacked i,f,g,o.
struct ModelParams {
  ModelDims dims;
  std::vector<double> flat;

  ModelParams() = default;
  explicit ModelParams(ModelDims d) : dims(d), flat(total_size(d), 0.0) {}

  static std::size_t total_size(const ModelDims& d) {
    const std::size_t g = 4 * d.hidden;
    return d.dense * d.feat + d.dense                      // W1, b1
           + 2 * (g * d.dense + g * d.hidden + g)          // two LSTM directions
           + 2 * d.hidden                                  // u
           + d.classes * 2 * d.hidden + d.classes;         // Wo, bo
  }

  // Offsets into flat.
  std::size_t off_w1() const { return 0; }
  std::size_t off_b1() const { return dims.dense * dims.feat; }
  std::size_t off_lstm(int dir) const {  // dir 0 = forward, 1 = backward
    const std::size_t g = 4 * dims.hidden;
    return off_b1() + dims.dense +
           static_cast<std::size_t>(dir) * (g * dims.dense + g * dims.hidden + g);
  }
  std::size_t off_wx(int dir) const { return off_lstm(dir); }
  std::size_t off_wh(int dir) const { return off_wx(dir) + 4 * dims.hidden * dims.dense; }
  std::size_t off_bg(int dir) const { return off_wh(dir) + 4 * dims.hidden * dims.hidden; }
  std::size_t off_u() const { return off_lstm(2); }
  std::size_t off_wo() const { return off_u() + 2 * dims.hidden; }
  std::size_t off_bo() const { return off_wo() + dims.classes * 2 * dims.hidden; }

  std::span<double> w1() { return {flat.data() + off_w1(), dims.dense * dims.feat}; }
  std::span<double> b1() { return {flat.data() + off_b1(), dims.dense}; }
  std::span<double> wx(int dir) { return {flat.data() + off_wx(dir), 4 * dims.hidden * dims.dense}; }
  std::span<double> wh(int dir) { return {flat.data() + off_wh(dir), 4 * dims.hidden * dims.hidden}; }
  std::span<double> bg(int dir) { return {flat.data() + off_bg(dir), 4 * dims.hidden}; }
  std::span<double> u() { return {flat.data() + off_u(), 2 * dims.hidden}; }
  std::span<double> wo() { return {flat.data() + off_wo(), dims.classes * 2 * dims.hidden}; }
  std::span<double> bo() { return {flat.data() + off_bo(), dims.classes}; }

  std::span<const double> w1() const { return {flat.data() + off_w1(), dims.dense * dims.feat}; }
  std::span<const double> b1() const { return {flat.data() + off_b1(), dims.dense}; }
  std::span<const double> wx(int dir) const {
    return {flat.data() + off_wx(dir), 4 * dims.hidden * dims.dense};
  }
  std::span<const double> wh(int dir) const {
    return {flat.data() + off_wh(dir), 4 * dims.hidden * dims.hidden};
  }
  std::span<const double> bg(int dir) const { return {flat.data() + off_bg(dir), 4 * dims.hidden}; }
  std::span<const double> u() const { return {flat.data() + off_u(), 2 * dims.hidden}; }
  std::span<const double> wo() const {
    return {flat.data() + off_wo(), dims.classes * 2 * dims.hidden};
  }
  std::span<const double> bo() const { return {flat.data() + off_bo(), dims.classes}; }

  // Uniform +-1/sqrt(fan_in) weights, zero biases, zero attention vector
  // (uniform initial pooling).
  static ModelParams init(ModelDims d, Rng& rng) {
    ModelParams p(d);
    auto fill = [&rng](std::span<double> w, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& x : w) x = (2.0 * rng.uniform() - 1.0) * bound;
    };
    fill(p.w1(), d.feat);
    for (int dir = 0; dir < 2; ++dir) {
      fill(p.wx(dir), d.dense);
      fill(p.wh(dir), d.hidden);
    }
    fill(p.wo(), 2 * d.hidden);
    return p;
  }
};

// Padded mini-batch. Valid frames form a contiguous prefix of each row.
struct Batch {
  std::size_t size = 0;
  std::size_t t_max = 0;
  std::size_t feat = 0;
  std::vector<double> features;            // size * t_max * feat, row-major
  std::vector<std::size_t> lengths;        // valid prefix length per sample, >= 1
  std::vector<std::size_t> sample_indices; // indices into the source dataset

  std::span<const double> frame(std::size_t b, std::size_t t) const {
    return {features.data() + (b * t_max + t) * feat, feat};
  }
  std::span<double> frame(std::size_t b, std::size_t t) {
    return {features.data() + (b * t_max + t) * feat, feat};
  }
  bool mask(std::size_t b, std::size_t t) const { return t < lengths[b]; }
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// out = W x (+ optional bias), W is rows x cols row-major.
inline void matvec(std::span<const double> w, std::size_t rows, std::size_t cols,
                   std::span<const double> x, std::span<double> out, bool accumulate = false) {
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = accumulate ? out[r] : 0.0;
    const double* wr = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    out[r] = acc;
  }
}

// out += W^T y
inline void matvec_t(std::span<const double> w, std::size_t rows, std::size_t cols,
                     std::span<const double> y, std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w.data() + r * cols;
    const double yr = y[r];
    for (std::size_t c = 0; c < cols; ++c) out[c] += wr[c] * yr;
  }
}

// W += y x^T (outer product accumulation)
inline void outer_acc(std::span<double> w, std::size_t rows, std::size_t cols,
                      std::span<const double> y, std::span<const double> x) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* wr = w.data() + r * cols;
    const double yr = y[r];
    for (std::size_t c = 0; c < cols; ++c) wr[c] += yr * x[c];
  }
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

// Attention weights over unmasked frames: softmax of h_t . u, exactly zero at
// masked positions.
inline std::vector<double> attention_weights(const Matrix& h, std::span<const double> u,
                                             const std::vector<bool>& mask) {
  if (h.cols != u.size() || h.rows != mask.size()) {
    throw std::invalid_argument("attention_weights: shape mismatch");
  }
  std::vector<std::size_t> valid;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) valid.push_back(t);
  }
  if (valid.empty()) throw std::invalid_argument("attention_weights: fully masked sequence");
  std::vector<double> logits(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) logits[i] = detail::dot(h.row(valid[i]), u);
  const std::vector<double> p = softmax(logits);
  std::vector<double> alpha(h.rows, 0.0);
  for (std::size_t i = 0; i < valid.size(); ++i) alpha[valid[i]] = p[i];
  return alpha;
}

// h' = sum_t alpha_t h_t
inline std::vector<double> attention_pool(const Matrix& h, std::span<const double> alpha) {
  if (h.rows != alpha.size()) throw std::invalid_argument("attention_pool: shape mismatch");
  std::vector<double> out(h.cols, 0.0);
  for (std::size_t t = 0; t < h.rows; ++t) detail::axpy(alpha[t], h.row(t), out);
  return out;
}

// Everything the backward pass needs from one sample's forward pass.
struct SampleCache {
  std::size_t len = 0;
  std::vector<double> x;          // T x D input frames (valid prefix only)
  std::vector<double> a_relu;     // T x H1, after ReLU, before dropout
  std::vector<double> drop1;      // T x H1 dropout scales (0 or 1/(1-p)); empty = no dropout
  std::vector<double> gates[2];   // per direction: T x 4H2 activated gates (i,f,g,o)
  std::vector<double> cell[2];    // per direction: T x H2 cell states
  std::vector<double> hcat;       // T x 2H2 concatenated hidden states, after dropout
  std::vector<double> drop2;      // T x 2H2 dropout scales; empty = no dropout
  std::vector<double> alpha;      // T attention weights
  std::vector<double> pooled;     // 2H2
  std::vector<double> y;          // C
};

struct ForwardCache {
  ModelDims dims;
  std::vector<SampleCache> samples;
};

// Forward pass over a padded batch. Inverted dropout: eval mode applies no
// scaling. With train_mode and dropout_rate > 0 an Rng must be supplied.
inline std::pair<Matrix, ForwardCache> forward(const ModelParams& params, const Batch& batch,
                                               double dropout_rate = 0.0, Rng* rng = nullptr,
                                               bool train_mode = false) {
  const ModelDims& d = params.dims;
  if (batch.feat != d.feat) throw std::invalid_argument("forward: feature dimension mismatch");
  if (batch.size != batch.lengths.size()) throw std::invalid_argument("forward: bad batch");
  const bool dropout = train_mode && dropout_rate > 0.0;
  if (dropout && rng == nullptr) {
    throw std::invalid_argument("forward: dropout in train mode requires an Rng");
  }
  const double keep = 1.0 - dropout_rate;
  const std::size_t h1 = d.dense, h2 = d.hidden, g4 = 4 * h2;

  Matrix y(batch.size, d.classes);
  ForwardCache cache;
  cache.dims = d;
  cache.samples.resize(batch.size);

  for (std::size_t b = 0; b < batch.size; ++b) {
    SampleCache& sc = cache.samples[b];
    const std::size_t len = batch.lengths[b];
    if (len == 0 || len > batch.t_max) throw std::invalid_argument("forward: bad sequence length");
    sc.len = len;
    sc.x.assign(len * d.feat, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      const auto fr = batch.frame(b, t);
      std::copy(fr.begin(), fr.end(), sc.x.begin() + static_cast<long>(t * d.feat));
    }
    sc.a_relu.assign(len * h1, 0.0);
    sc.hcat.assign(len * 2 * h2, 0.0);
    if (dropout) sc.drop1.assign(len * h1, 0.0);

    // Dense ReLU layer, then dropout.
    std::vector<double> a_in(len * h1, 0.0);  // LSTM input (post dropout)
    for (std::size_t t = 0; t < len; ++t) {
      std::span<double> a(sc.a_relu.data() + t * h1, h1);
      detail::matvec(params.w1(), h1, d.feat, batch.frame(b, t), a);
      for (std::size_t j = 0; j < h1; ++j) {
        a[j] = std::max(a[j] + params.b1()[j], 0.0);
        double scale = 1.0;
        if (dropout) {
          scale = (rng->uniform() >= dropout_rate) ? 1.0 / keep : 0.0;
          sc.drop1[t * h1 + j] = scale;
        }
        a_in[t * h1 + j] = a[j] * scale;
      }
    }

    // Both LSTM directions. dir 0 walks t=0..len-1, dir 1 walks len-1..0;
    // states are stored at the frame they belong to.
    for (int dir = 0; dir < 2; ++dir) {
      sc.gates[dir].assign(len * g4, 0.0);
      sc.cell[dir].assign(len * h2, 0.0);
      std::vector<double> h_prev(h2, 0.0), c_prev(h2, 0.0);
      for (std::size_t step = 0; step < len; ++step) {
        const std::size_t t = (dir == 0) ? step : len - 1 - step;
        std::span<double> z(sc.gates[dir].data() + t * g4, g4);
        detail::matvec(params.wx(dir), g4, h1, {a_in.data() + t * h1, h1}, z);
        detail::matvec(params.wh(dir), g4, h2, h_prev, z, /*accumulate=*/true);
        for (std::size_t j = 0; j < g4; ++j) z[j] += params.bg(dir)[j];
        std::span<double> c(sc.cell[dir].data() + t * h2, h2);
        for (std::size_t j = 0; j < h2; ++j) {
          const double i_g = detail::sigmoid(z[j]);
          const double f_g = detail::sigmoid(z[h2 + j]);
          const double g_g = std::tanh(z[2 * h2 + j]);
          const double o_g = detail::sigmoid(z[3 * h2 + j]);
          z[j] = i_g;
          z[h2 + j] = f_g;
          z[2 * h2 + j] = g_g;
          z[3 * h2 + j] = o_g;
          c[j] = f_g * c_prev[j] + i_g * g_g;
          h_prev[j] = o_g * std::tanh(c[j]);
        }
        c_prev.assign(c.begin(), c.end());
        for (std::size_t j = 0; j < h2; ++j) {
          sc.hcat[t * 2 * h2 + static_cast<std::size_t>(dir) * h2 + j] = h_prev[j];
        }
      }
    }

    // Dropout on the concatenated hidden states before attention.
    if (dropout) {
      sc.drop2.assign(len * 2 * h2, 0.0);
      for (std::size_t k = 0; k < len * 2 * h2; ++k) {
        const double scale = (rng->uniform() >= dropout_rate) ? 1.0 / keep : 0.0;
        sc.drop2[k] = scale;
        sc.hcat[k] *= scale;
      }
    }

    // Attention pooling and output layer.
    Matrix hmat(len, 2 * h2, sc.hcat);
    sc.alpha = attention_weights(hmat, params.u(), std::vector<bool>(len, true));
    sc.pooled = attention_pool(hmat, sc.alpha);
    std::vector<double> logits(d.classes, 0.0);
    detail::matvec(params.wo(), d.classes, 2 * h2, sc.pooled, logits);
    for (std::size_t c = 0; c < d.classes; ++c) logits[c] += params.bo()[c];
    sc.y = softmax(logits);
    for (std::size_t c = 0; c < d.classes; ++c) y.at(b, c) = sc.y[c];
  }
  return {std::move(y), std::move(cache)};
}

struct BackwardResult {
  ModelParams grads;                             // same shape as the parameters
  std::vector<std::vector<double>> pooled_grad;  // dLoss/dh' per sample
};

// Backprop through output layer, attention, both LSTM directions and the
// dense layer, given dLoss/dlogits per sample.
inline BackwardResult backward(const ModelParams& params, const ForwardCache& cache,
                               const Matrix& dlogits) {
  const ModelDims& d = params.dims;
  if (!(cache.dims == d)) throw std::invalid_argument("backward: cache/params mismatch");
  if (dlogits.rows != cache.samples.size() || dlogits.cols != d.classes) {
    throw std::invalid_argument("backward: dlogits shape mismatch");
  }
  const std::size_t h1 = d.dense, h2 = d.hidden, g4 = 4 * h2;

  BackwardResult res;
  res.grads = ModelParams(d);
  res.pooled_grad.resize(cache.samples.size());
  ModelParams& g = res.grads;

  for (std::size_t b = 0; b < cache.samples.size(); ++b) {
    const SampleCache& sc = cache.samples[b];
    const std::size_t len = sc.len;
    const std::span<const double> dlog = dlogits.row(b);

    // Output layer.
    std::vector<double> dpool(2 * h2, 0.0);
    detail::outer_acc(g.wo(), d.classes, 2 * h2, dlog, sc.pooled);
    for (std::size_t c = 0; c < d.classes; ++c) g.bo()[c] += dlog[c];
    detail::matvec_t(params.wo(), d.classes, 2 * h2, dlog, dpool);
    res.pooled_grad[b] = dpool;

    // Attention: h' = sum_t alpha_t h_t, alpha = softmax(h . u).
    std::vector<double> dh(len * 2 * h2, 0.0);   // grad w.r.t. post-dropout hcat
    std::vector<double> dalpha(len, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      std::span<const double> ht(sc.hcat.data() + t * 2 * h2, 2 * h2);
      dalpha[t] = detail::dot(dpool, ht);
      detail::axpy(sc.alpha[t], dpool, {dh.data() + t * 2 * h2, 2 * h2});
    }
    double alpha_dot = 0.0;
    for (std::size_t t = 0; t < len; ++t) alpha_dot += sc.alpha[t] * dalpha[t];
    for (std::size_t t = 0; t < len; ++t) {
      const double de = sc.alpha[t] * (dalpha[t] - alpha_dot);
      std::span<const double> ht(sc.hcat.data() + t * 2 * h2, 2 * h2);
      detail::axpy(de, ht, g.u());
      detail::axpy(de, params.u(), {dh.data() + t * 2 * h2, 2 * h2});
    }

    // Undo the attention-side dropout.
    if (!sc.drop2.empty()) {
      for (std::size_t k = 0; k < dh.size(); ++k) dh[k] *= sc.drop2[k];
    }

    // Reconstruct the LSTM input (post-dropout dense activations).
    std::vector<double> a_in(sc.a_relu);
    if (!sc.drop1.empty()) {
      for (std::size_t k = 0; k < a_in.size(); ++k) a_in[k] *= sc.drop1[k];
    }

    // BPTT per direction.
    std::vector<double> da(len * h1, 0.0);  // grad w.r.t. a_in
    for (int dir = 0; dir < 2; ++dir) {
      std::vector<double> dh_rec(h2, 0.0), dc(h2, 0.0), dz(g4, 0.0);
      for (std::size_t step = 0; step < len; ++step) {
        // Walk in reverse order of the forward recurrence.
        const std::size_t t = (dir == 0) ? len - 1 - step : step;
        const bool has_prev = (dir == 0) ? (t > 0) : (t + 1 < len);
        const std::size_t t_prev = (dir == 0) ? t - 1 : t + 1;
        const double* gate = sc.gates[dir].data() + t * g4;
        const double* c_t = sc.cell[dir].data() + t * h2;
        const double* c_prev = has_prev ? sc.cell[dir].data() + t_prev * h2 : nullptr;

        for (std::size_t j = 0; j < h2; ++j) {
          const double i_g = gate[j], f_g = gate[h2 + j], g_g = gate[2 * h2 + j],
                       o_g = gate[3 * h2 + j];
          const double tc = std::tanh(c_t[j]);
          const double dhj =
              dh_rec[j] + dh[t * 2 * h2 + static_cast<std::size_t>(dir) * h2 + j];
          const double dcj = dc[j] + dhj * o_g * (1.0 - tc * tc);
          const double cp = has_prev ? c_prev[j] : 0.0;
          dz[j] = dcj * g_g * i_g * (1.0 - i_g);
          dz[h2 + j] = dcj * cp * f_g * (1.0 - f_g);
          dz[2 * h2 + j] = dcj * i_g * (1.0 - g_g * g_g);
          dz[3 * h2 + j] = dhj * tc * o_g * (1.0 - o_g);
          dc[j] = dcj * f_g;
        }
        detail::outer_acc(g.wx(dir), g4, h1, dz, {a_in.data() + t * h1, h1});
        for (std::size_t j = 0; j < g4; ++j) g.bg(dir)[j] += dz[j];
        detail::matvec_t(params.wx(dir), g4, h1, dz, {da.data() + t * h1, h1});
        std::fill(dh_rec.begin(), dh_rec.end(), 0.0);
        if (has_prev) {
          const std::vector<double> h_prev(
              sc.hcat.begin() + static_cast<long>(t_prev * 2 * h2 +
                                                  static_cast<std::size_t>(dir) * h2),
              sc.hcat.begin() + static_cast<long>(t_prev * 2 * h2 +
                                                  static_cast<std::size_t>(dir) * h2 + h2));
          // hcat may carry dropout; recover the raw hidden state.
          std::vector<double> h_raw = h_prev;
          if (!sc.drop2.empty()) {
            for (std::size_t j = 0; j < h2; ++j) {
              const double s =
                  sc.drop2[t_prev * 2 * h2 + static_cast<std::size_t>(dir) * h2 + j];
              // scale 0 means the raw value was dropped; the recurrent path
              // still saw it, so it must be recomputed.
              if (s != 0.0) {
                h_raw[j] = h_prev[j] / s;
              } else {
                const double o_g = sc.gates[dir][t_prev * g4 + 3 * h2 + j];
                h_raw[j] = o_g * std::tanh(sc.cell[dir][t_prev * h2 + j]);
              }
            }
          }
          detail::outer_acc(g.wh(dir), g4, h2, dz, h_raw);
          detail::matvec_t(params.wh(dir), g4, h2, dz, dh_rec);
        } else {
          std::fill(dc.begin(), dc.end(), 0.0);
        }
      }
    }

    // Dense layer (through dropout and ReLU).
    for (std::size_t t = 0; t < len; ++t) {
      std::vector<double> dpre(h1, 0.0);
      for (std::size_t j = 0; j < h1; ++j) {
        double grad = da[t * h1 + j];
        if (!sc.drop1.empty()) grad *= sc.drop1[t * h1 + j];
        dpre[j] = (sc.a_relu[t * h1 + j] > 0.0) ? grad : 0.0;
        g.b1()[j] += dpre[j];
      }
      detail::outer_acc(g.w1(), h1, d.feat, dpre, {sc.x.data() + t * d.feat, d.feat});
    }
  }
  return res;
}

// Argmax prediction, ties toward the lowest class index.
inline std::vector<std::size_t> predict(const ModelParams& params, const Batch& batch) {
  auto [y, cache] = forward(params, batch);
  std::vector<std::size_t> out(batch.size, 0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto row = y.row(b);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[b] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "RLT1", little-endian u32 dims (D, H1, H2, C), then the
// flat parameter buffer as little-endian 32-bit floats in layout order.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("RLT1", 4);
  const std::uint32_t dims[4] = {
      static_cast<std::uint32_t>(params.dims.feat), static_cast<std::uint32_t>(params.dims.dense),
      static_cast<std::uint32_t>(params.dims.hidden),
      static_cast<std::uint32_t>(params.dims.classes)};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  std::vector<float> buf(params.flat.begin(), params.flat.end());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RLT1", 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  std::uint32_t dims[4];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);
  ModelParams params(ModelDims{dims[0], dims[1], dims[2], dims[3]});
  std::vector<float> buf(params.flat.size());
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw std::runtime_error("load_checkpoint: truncated tensors in " + path);
  std::copy(buf.begin(), buf.end(), params.flat.begin());
  return params;
}

}  // namespace relab
