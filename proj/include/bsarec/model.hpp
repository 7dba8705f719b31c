#pragma once

// The BSARec encoder: item/position embeddings, stacked blocks mixing causal
// multi-head self-attention with a frequency-rescaler branch, position-wise
// feed-forward sublayers, and tied-embedding scoring. Forward passes record a
// trace from which `Encoder::backward` accumulates exact gradients for every
// parameter tensor (verified against central finite differences).

#include "bsarec/data.hpp"
#include "bsarec/random.hpp"
#include "bsarec/signal.hpp"

#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace bsarec {

struct ModelConfig {
  Index hidden_size = 64;
  Index num_layers = 2;
  Index num_heads = 1;
  double alpha = 0.7;  // rescaler weight in the branch mix, in [0, 1]
  Index cutoff = 5;
  SpectralBackend backend = SpectralBackend::Fourier;
  PaddingMode padding = PaddingMode::Zero;
  Index max_len = 50;
  double dropout_rate = 0.5;
  Index ffn_multiplier = 4;
  Index wavelet_levels = 0;      // 0 = floor(log2(max_len)) capped at 3
  bool rescaler_enabled = true;  // false removes the branch entirely

  void validate() const {
    if (hidden_size < 1) throw std::invalid_argument("hidden_size must be >= 1");
    if (num_layers < 0) throw std::invalid_argument("num_layers must be >= 0");
    if (num_heads < 1 || hidden_size % num_heads != 0)
      throw std::invalid_argument("hidden_size must be divisible by num_heads");
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw std::invalid_argument("alpha must lie in [0, 1]");
    if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
    if (backend != SpectralBackend::Residual &&
        (cutoff < 1 || cutoff > max_cutoff(max_len, backend)))
      throw std::invalid_argument("cutoff out of range for backend and max_len");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw std::invalid_argument("dropout_rate must lie in [0, 1)");
    if (ffn_multiplier < 1) throw std::invalid_argument("ffn_multiplier must be >= 1");
    if (wavelet_levels < 0 ||
        (wavelet_levels > 0 && wavelet_levels > max_haar_levels(max_len)))
      throw std::invalid_argument("wavelet_levels too deep for max_len");
  }
};

template <typename Scalar>
struct LayerParams {
  MatrixX<Scalar> w_query, w_key, w_value, w_output;  // hidden x hidden
  MatrixX<Scalar> b_query, b_key, b_value, b_output;  // 1 x hidden
  MatrixX<Scalar> ln_mix_gain, ln_mix_bias;
  MatrixX<Scalar> w_ffn_in, b_ffn_in;    // hidden x ffn, 1 x ffn
  MatrixX<Scalar> w_ffn_out, b_ffn_out;  // ffn x hidden, 1 x hidden
  MatrixX<Scalar> ln_ffn_gain, ln_ffn_bias;
  MatrixX<Scalar> ln_rescale_gain, ln_rescale_bias;
  MatrixX<Scalar> beta;  // 1 x hidden, elementwise >= 0
};

template <typename Scalar>
struct ParameterSet {
  MatrixX<Scalar> item_embeddings;        // (vocab+1) x hidden, row 0 = pad
  MatrixX<Scalar> positional_embeddings;  // max_len x hidden
  MatrixX<Scalar> embed_ln_gain, embed_ln_bias;
  std::vector<LayerParams<Scalar>> layers;

  Index vocab_size() const { return item_embeddings.rows() - 1; }
  Index hidden_size() const { return item_embeddings.cols(); }

  template <typename F>
  void for_each_tensor(F&& f) {
    f("item_embeddings", item_embeddings);
    f("positional_embeddings", positional_embeddings);
    f("embed_ln_gain", embed_ln_gain);
    f("embed_ln_bias", embed_ln_bias);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      LayerParams<Scalar>& l = layers[i];
      f(p + "w_query", l.w_query);
      f(p + "w_key", l.w_key);
      f(p + "w_value", l.w_value);
      f(p + "w_output", l.w_output);
      f(p + "b_query", l.b_query);
      f(p + "b_key", l.b_key);
      f(p + "b_value", l.b_value);
      f(p + "b_output", l.b_output);
      f(p + "ln_mix_gain", l.ln_mix_gain);
      f(p + "ln_mix_bias", l.ln_mix_bias);
      f(p + "w_ffn_in", l.w_ffn_in);
      f(p + "b_ffn_in", l.b_ffn_in);
      f(p + "w_ffn_out", l.w_ffn_out);
      f(p + "b_ffn_out", l.b_ffn_out);
      f(p + "ln_ffn_gain", l.ln_ffn_gain);
      f(p + "ln_ffn_bias", l.ln_ffn_bias);
      f(p + "ln_rescale_gain", l.ln_rescale_gain);
      f(p + "ln_rescale_bias", l.ln_rescale_bias);
      f(p + "beta", l.beta);
    }
  }

  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<ParameterSet*>(this)->for_each_tensor(
        [&f](const std::string& name, MatrixX<Scalar>& t) {
          f(name, static_cast<const MatrixX<Scalar>&>(t));
        });
  }

  static ParameterSet random_init(const ModelConfig& config, Index vocab_size,
                                  std::uint64_t seed) {
    config.validate();
    const Index h = config.hidden_size;
    const Index f = config.ffn_multiplier * h;
    Rng rng(mix_seed(seed, 0x9082f1c5u));
    const auto normal = [&rng](Index rows, Index cols) {
      MatrixX<Scalar> m(rows, cols);
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c)
          m(r, c) = static_cast<Scalar>(rng.normal(0.0, 0.02));
      return m;
    };
    const auto ones = [h](Index cols) { return MatrixX<Scalar>::Ones(1, cols).eval(); };
    const auto zeros = [](Index cols) { return MatrixX<Scalar>::Zero(1, cols).eval(); };

    ParameterSet params;
    params.item_embeddings = normal(vocab_size + 1, h);
    params.positional_embeddings = normal(config.max_len, h);
    params.embed_ln_gain = ones(h);
    params.embed_ln_bias = zeros(h);
    params.layers.resize(static_cast<std::size_t>(config.num_layers));
    for (LayerParams<Scalar>& l : params.layers) {
      l.w_query = normal(h, h);
      l.w_key = normal(h, h);
      l.w_value = normal(h, h);
      l.w_output = normal(h, h);
      l.b_query = zeros(h);
      l.b_key = zeros(h);
      l.b_value = zeros(h);
      l.b_output = zeros(h);
      l.ln_mix_gain = ones(h);
      l.ln_mix_bias = zeros(h);
      l.w_ffn_in = normal(h, f);
      l.b_ffn_in = zeros(f);
      l.w_ffn_out = normal(f, h);
      l.b_ffn_out = zeros(h);
      l.ln_ffn_gain = ones(h);
      l.ln_ffn_bias = zeros(h);
      l.ln_rescale_gain = ones(h);
      l.ln_rescale_bias = zeros(h);
      l.beta = ones(h);  // rescale starts as the identity
    }
    return params;
  }

  static ParameterSet zeros_like(const ParameterSet& other) {
    ParameterSet z = other;
    z.for_each_tensor([](const std::string&, MatrixX<Scalar>& t) { t.setZero(); });
    return z;
  }

  void project_nonnegative_betas() {
    for (LayerParams<Scalar>& l : layers)
      l.beta = l.beta.cwiseMax(MatrixX<Scalar>::Zero(1, l.beta.cols()));
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&ok](const std::string&, const MatrixX<Scalar>& t) {
      ok = ok && t.allFinite();
    });
    return ok;
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    out.item_embeddings = item_embeddings.template cast<Other>();
    out.positional_embeddings = positional_embeddings.template cast<Other>();
    out.embed_ln_gain = embed_ln_gain.template cast<Other>();
    out.embed_ln_bias = embed_ln_bias.template cast<Other>();
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerParams<Scalar>& src = layers[i];
      LayerParams<Other>& dst = out.layers[i];
      dst.w_query = src.w_query.template cast<Other>();
      dst.w_key = src.w_key.template cast<Other>();
      dst.w_value = src.w_value.template cast<Other>();
      dst.w_output = src.w_output.template cast<Other>();
      dst.b_query = src.b_query.template cast<Other>();
      dst.b_key = src.b_key.template cast<Other>();
      dst.b_value = src.b_value.template cast<Other>();
      dst.b_output = src.b_output.template cast<Other>();
      dst.ln_mix_gain = src.ln_mix_gain.template cast<Other>();
      dst.ln_mix_bias = src.ln_mix_bias.template cast<Other>();
      dst.w_ffn_in = src.w_ffn_in.template cast<Other>();
      dst.b_ffn_in = src.b_ffn_in.template cast<Other>();
      dst.w_ffn_out = src.w_ffn_out.template cast<Other>();
      dst.b_ffn_out = src.b_ffn_out.template cast<Other>();
      dst.ln_ffn_gain = src.ln_ffn_gain.template cast<Other>();
      dst.ln_ffn_bias = src.ln_ffn_bias.template cast<Other>();
      dst.ln_rescale_gain = src.ln_rescale_gain.template cast<Other>();
      dst.ln_rescale_bias = src.ln_rescale_bias.template cast<Other>();
      dst.beta = src.beta.template cast<Other>();
    }
    return out;
  }
};

template <typename Scalar>
struct LayerNormTrace {
  MatrixX<Scalar> xhat;
  VectorX<Scalar> inv_std;
};

// Row-wise layer norm y = gain .* (x - mean) / sqrt(var + eps) + bias.
template <typename Scalar>
MatrixX<Scalar> layer_norm(const MatrixX<Scalar>& x, const MatrixX<Scalar>& gain,
                           const MatrixX<Scalar>& bias,
                           LayerNormTrace<Scalar>* trace) {
  constexpr double kEps = 1e-12;
  const Index rows = x.rows(), cols = x.cols();
  MatrixX<Scalar> xhat(rows, cols);
  VectorX<Scalar> inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().mean();
    const Scalar istd =
        Scalar(1) / static_cast<Scalar>(std::sqrt(static_cast<double>(var) + kEps));
    xhat.row(r) = centered * istd;
    inv_std(r) = istd;
  }
  MatrixX<Scalar> y =
      (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (trace) {
    trace->xhat = std::move(xhat);
    trace->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename Scalar>
MatrixX<Scalar> layer_norm_backward(const MatrixX<Scalar>& dy,
                                    const MatrixX<Scalar>& gain,
                                    const LayerNormTrace<Scalar>& trace,
                                    MatrixX<Scalar>& dgain, MatrixX<Scalar>& dbias) {
  dgain += (dy.array() * trace.xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();

  const MatrixX<Scalar> dxhat = dy.array().rowwise() * gain.row(0).array();
  const Index cols = dy.cols();
  MatrixX<Scalar> dx(dy.rows(), cols);
  for (Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_dxhat = dxhat.row(r).mean();
    const Scalar mean_proj =
        (dxhat.row(r).array() * trace.xhat.row(r).array()).mean();
    dx.row(r) = ((dxhat.row(r).array() - mean_dxhat) -
                 trace.xhat.row(r).array() * mean_proj) *
                trace.inv_std(r);
  }
  return dx;
}

namespace detail {

template <typename Scalar>
Scalar gelu(Scalar x) {
  const double xd = static_cast<double>(x);
  return static_cast<Scalar>(0.5 * xd * (1.0 + std::erf(xd * M_SQRT1_2)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const double xd = static_cast<double>(x);
  const double cdf = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
  return static_cast<Scalar>(cdf + xd * pdf);
}

// Inverted-dropout mask with values 0 or 1/(1-rate); empty means identity.
template <typename Scalar>
MatrixX<Scalar> sample_dropout_mask(Index rows, Index cols, double rate, Rng* rng) {
  if (!rng || rate <= 0.0) return MatrixX<Scalar>();
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - rate));
  MatrixX<Scalar> mask(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c)
      mask(r, c) = rng->uniform() >= rate ? keep_scale : Scalar{0};
  return mask;
}

template <typename Scalar>
void apply_mask(MatrixX<Scalar>& x, const MatrixX<Scalar>& mask) {
  if (mask.size() > 0) x.array() *= mask.array();
}

}  // namespace detail

template <typename Scalar>
struct LayerTrace {
  MatrixX<Scalar> input;
  MatrixX<Scalar> q, k, v;
  std::vector<MatrixX<Scalar>> attn_probs;  // per head, causal rows
  MatrixX<Scalar> attn_concat;
  MatrixX<Scalar> attn_out;
  MatrixX<Scalar> rescale_high;  // X - L X, kept for the beta gradient
  LayerNormTrace<Scalar> rescale_ln;
  MatrixX<Scalar> rescale_out;
  MatrixX<Scalar> mix;
  MatrixX<Scalar> drop_mix;
  LayerNormTrace<Scalar> ln_mix;
  MatrixX<Scalar> midpoint;  // input to the FFN sublayer
  MatrixX<Scalar> ffn_pre;
  MatrixX<Scalar> ffn_act;
  MatrixX<Scalar> drop_ffn;
  LayerNormTrace<Scalar> ln_ffn;
};

template <typename Scalar>
struct Trace {
  std::vector<ItemId> ids;
  LayerNormTrace<Scalar> embed_ln;
  MatrixX<Scalar> drop_embed;
  MatrixX<Scalar> encoder_input;
  std::vector<LayerTrace<Scalar>> layers;
  MatrixX<Scalar> states;
};

template <typename Scalar>
class Encoder {
 public:
  explicit Encoder(const ModelConfig& config) : config_(config) {
    config.validate();
    if (config.backend != SpectralBackend::Residual)
      lfc_ = lfc_operator_matrix<Scalar>(config.max_len, config.cutoff,
                                         config.backend, config.wavelet_levels);
  }

  const ModelConfig& config() const { return config_; }

  // Low-pass projection along the temporal axis (identity for Residual).
  MatrixX<Scalar> low_pass(const MatrixX<Scalar>& x) const {
    if (config_.backend == SpectralBackend::Residual) return x;
    return lfc_ * x;
  }

  // Item + position embedding, layer norm, dropout. Pad positions index
  // embedding row 0 under Zero padding; other modes index real items.
  MatrixX<Scalar> embed(const ParameterSet<Scalar>& params,
                        const std::vector<ItemId>& window, Rng* dropout_rng,
                        Trace<Scalar>* trace) const {
    const Index len = config_.max_len;
    if (static_cast<Index>(window.size()) != len)
      throw std::invalid_argument("embed: window length must equal max_len");

    MatrixX<Scalar> sum(len, params.hidden_size());
    for (Index t = 0; t < len; ++t) {
      const ItemId id = window[static_cast<std::size_t>(t)];
      if (id < 0 || id >= params.item_embeddings.rows())
        throw std::invalid_argument("embed: item id out of vocabulary");
      sum.row(t) = params.item_embeddings.row(id) + params.positional_embeddings.row(t);
    }
    LayerNormTrace<Scalar> ln;
    MatrixX<Scalar> x = layer_norm(sum, params.embed_ln_gain, params.embed_ln_bias,
                                   trace ? &trace->embed_ln : &ln);
    MatrixX<Scalar> mask = detail::sample_dropout_mask<Scalar>(
        len, x.cols(), config_.dropout_rate, dropout_rng);
    detail::apply_mask(x, mask);
    if (trace) {
      trace->ids = window;
      trace->drop_embed = std::move(mask);
    }
    return x;
  }

  MatrixX<Scalar> forward(const ParameterSet<Scalar>& params,
                          const std::vector<ItemId>& window, Rng* dropout_rng,
                          Trace<Scalar>* trace) const {
    Trace<Scalar> scratch;
    Trace<Scalar>& tr = trace ? *trace : scratch;
    tr.layers.assign(static_cast<std::size_t>(config_.num_layers), {});

    MatrixX<Scalar> x = embed(params, window, dropout_rng, &tr);
    tr.encoder_input = x;
    for (Index i = 0; i < config_.num_layers; ++i)
      x = block_forward(params.layers[static_cast<std::size_t>(i)], x, dropout_rng,
                        tr.layers[static_cast<std::size_t>(i)]);
    tr.states = x;
    return x;
  }

  // Accumulates gradients of a scalar objective into `grads` given the
  // gradient w.r.t. the final states. `grads` must be zeros_like-shaped.
  void backward(const ParameterSet<Scalar>& params, const Trace<Scalar>& trace,
                const MatrixX<Scalar>& d_states, ParameterSet<Scalar>& grads) const {
    MatrixX<Scalar> dx = d_states;
    for (Index i = config_.num_layers - 1; i >= 0; --i)
      dx = block_backward(params.layers[static_cast<std::size_t>(i)],
                          trace.layers[static_cast<std::size_t>(i)], dx,
                          grads.layers[static_cast<std::size_t>(i)]);

    detail::apply_mask(dx, trace.drop_embed);
    MatrixX<Scalar> d_sum = layer_norm_backward(dx, params.embed_ln_gain,
                                                trace.embed_ln, grads.embed_ln_gain,
                                                grads.embed_ln_bias);
    grads.positional_embeddings += d_sum;
    for (Index t = 0; t < config_.max_len; ++t)
      grads.item_embeddings.row(trace.ids[static_cast<std::size_t>(t)]) +=
          d_sum.row(t);
  }

 private:
  bool attention_active() const { return config_.alpha < 1.0; }
  bool rescaler_active() const {
    return config_.rescaler_enabled && config_.alpha > 0.0;
  }

  MatrixX<Scalar> block_forward(const LayerParams<Scalar>& layer,
                                const MatrixX<Scalar>& x, Rng* dropout_rng,
                                LayerTrace<Scalar>& tr) const {
    const Index len = x.rows(), h = x.cols();
    const Scalar alpha = static_cast<Scalar>(config_.alpha);
    tr.input = x;

    MatrixX<Scalar> mix;
    if (attention_active()) {
      attention_forward(layer, x, tr);
      mix = rescaler_active() ? ((Scalar(1) - alpha) * tr.attn_out).eval()
                              : tr.attn_out;
    }
    if (rescaler_active()) {
      rescaler_forward(layer, x, tr);
      if (attention_active())
        mix += alpha * tr.rescale_out;
      else
        mix = tr.rescale_out;
    }
    tr.mix = mix;

    MatrixX<Scalar> residual = x + mix;
    tr.drop_mix = detail::sample_dropout_mask<Scalar>(len, h, config_.dropout_rate,
                                                      dropout_rng);
    detail::apply_mask(residual, tr.drop_mix);
    tr.midpoint = layer_norm(residual, layer.ln_mix_gain, layer.ln_mix_bias, &tr.ln_mix);

    tr.ffn_pre = (tr.midpoint * layer.w_ffn_in).rowwise() + layer.b_ffn_in.row(0);
    tr.ffn_act = tr.ffn_pre.unaryExpr([](Scalar v) { return detail::gelu(v); });
    MatrixX<Scalar> ffn_out =
        (tr.ffn_act * layer.w_ffn_out).rowwise() + layer.b_ffn_out.row(0);

    MatrixX<Scalar> residual2 = tr.midpoint + ffn_out;
    tr.drop_ffn = detail::sample_dropout_mask<Scalar>(len, h, config_.dropout_rate,
                                                      dropout_rng);
    detail::apply_mask(residual2, tr.drop_ffn);
    return layer_norm(residual2, layer.ln_ffn_gain, layer.ln_ffn_bias, &tr.ln_ffn);
  }

  MatrixX<Scalar> block_backward(const LayerParams<Scalar>& layer,
                                 const LayerTrace<Scalar>& tr,
                                 const MatrixX<Scalar>& d_out,
                                 LayerParams<Scalar>& g) const {
    const Scalar alpha = static_cast<Scalar>(config_.alpha);

    MatrixX<Scalar> d_res2 = layer_norm_backward(d_out, layer.ln_ffn_gain, tr.ln_ffn,
                                                 g.ln_ffn_gain, g.ln_ffn_bias);
    detail::apply_mask(d_res2, tr.drop_ffn);

    // FFN sublayer
    MatrixX<Scalar> d_mid = d_res2;
    g.w_ffn_out += tr.ffn_act.transpose() * d_res2;
    g.b_ffn_out += d_res2.colwise().sum();
    MatrixX<Scalar> d_act = d_res2 * layer.w_ffn_out.transpose();
    MatrixX<Scalar> d_pre =
        d_act.array() *
        tr.ffn_pre.unaryExpr([](Scalar v) { return detail::gelu_derivative(v); })
            .array();
    g.w_ffn_in += tr.midpoint.transpose() * d_pre;
    g.b_ffn_in += d_pre.colwise().sum();
    d_mid += d_pre * layer.w_ffn_in.transpose();

    MatrixX<Scalar> d_res1 = layer_norm_backward(d_mid, layer.ln_mix_gain, tr.ln_mix,
                                                 g.ln_mix_gain, g.ln_mix_bias);
    detail::apply_mask(d_res1, tr.drop_mix);

    MatrixX<Scalar> dx = d_res1;
    if (attention_active()) {
      const MatrixX<Scalar> d_attn =
          rescaler_active() ? ((Scalar(1) - alpha) * d_res1).eval() : d_res1;
      attention_backward(layer, tr, d_attn, g, dx);
    }
    if (rescaler_active()) {
      const MatrixX<Scalar> d_resc =
          attention_active() ? (alpha * d_res1).eval() : d_res1;
      rescaler_backward(layer, tr, d_resc, g, dx);
    }
    return dx;
  }

  void attention_forward(const LayerParams<Scalar>& layer, const MatrixX<Scalar>& x,
                         LayerTrace<Scalar>& tr) const {
    const Index len = x.rows();
    const Index heads = config_.num_heads;
    const Index dh = config_.hidden_size / heads;
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));

    tr.q = (x * layer.w_query).rowwise() + layer.b_query.row(0);
    tr.k = (x * layer.w_key).rowwise() + layer.b_key.row(0);
    tr.v = (x * layer.w_value).rowwise() + layer.b_value.row(0);

    tr.attn_probs.assign(static_cast<std::size_t>(heads), MatrixX<Scalar>());
    tr.attn_concat.resize(len, config_.hidden_size);
    for (Index a = 0; a < heads; ++a) {
      const auto qh = tr.q.middleCols(a * dh, dh);
      const auto kh = tr.k.middleCols(a * dh, dh);
      const auto vh = tr.v.middleCols(a * dh, dh);
      MatrixX<Scalar> scores = (qh * kh.transpose()) * scale;

      MatrixX<Scalar> probs = MatrixX<Scalar>::Zero(len, len);
      for (Index t = 0; t < len; ++t) {
        // causal: position t attends to positions <= t
        auto row = scores.row(t).head(t + 1);
        const Scalar mx = row.maxCoeff();
        Eigen::Array<Scalar, 1, Eigen::Dynamic> e = (row.array() - mx).exp();
        probs.row(t).head(t + 1) = (e / e.sum()).matrix();
      }
      tr.attn_concat.middleCols(a * dh, dh) = probs * vh;
      tr.attn_probs[static_cast<std::size_t>(a)] = std::move(probs);
    }
    tr.attn_out = (tr.attn_concat * layer.w_output).rowwise() + layer.b_output.row(0);
  }

  void attention_backward(const LayerParams<Scalar>& layer,
                          const LayerTrace<Scalar>& tr, const MatrixX<Scalar>& d_attn,
                          LayerParams<Scalar>& g, MatrixX<Scalar>& dx) const {
    const Index heads = config_.num_heads;
    const Index dh = config_.hidden_size / heads;
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));

    g.w_output += tr.attn_concat.transpose() * d_attn;
    g.b_output += d_attn.colwise().sum();
    const MatrixX<Scalar> d_concat = d_attn * layer.w_output.transpose();

    MatrixX<Scalar> dq(tr.q.rows(), tr.q.cols());
    MatrixX<Scalar> dk(tr.k.rows(), tr.k.cols());
    MatrixX<Scalar> dv(tr.v.rows(), tr.v.cols());
    for (Index a = 0; a < heads; ++a) {
      const auto vh = tr.v.middleCols(a * dh, dh);
      const auto qh = tr.q.middleCols(a * dh, dh);
      const auto kh = tr.k.middleCols(a * dh, dh);
      const MatrixX<Scalar>& probs = tr.attn_probs[static_cast<std::size_t>(a)];
      const auto d_head = d_concat.middleCols(a * dh, dh);

      dv.middleCols(a * dh, dh) = probs.transpose() * d_head;
      const MatrixX<Scalar> d_probs = d_head * vh.transpose();
      // softmax rows: dS = P .* (dP - rowsum(dP .* P))
      const VectorX<Scalar> row_dot =
          (d_probs.array() * probs.array()).rowwise().sum().matrix();
      const MatrixX<Scalar> d_scores =
          (probs.array() * (d_probs.array().colwise() - row_dot.array())) * scale;
      dq.middleCols(a * dh, dh) = d_scores * kh;
      dk.middleCols(a * dh, dh) = d_scores.transpose() * qh;
    }

    g.w_query += tr.input.transpose() * dq;
    g.b_query += dq.colwise().sum();
    g.w_key += tr.input.transpose() * dk;
    g.b_key += dk.colwise().sum();
    g.w_value += tr.input.transpose() * dv;
    g.b_value += dv.colwise().sum();
    dx += dq * layer.w_query.transpose() + dk * layer.w_key.transpose() +
          dv * layer.w_value.transpose();
  }

  void rescaler_forward(const LayerParams<Scalar>& layer, const MatrixX<Scalar>& x,
                        LayerTrace<Scalar>& tr) const {
    MatrixX<Scalar> low = low_pass(x);
    tr.rescale_high = x - low;
    const MatrixX<Scalar> rescaled =
        low + (tr.rescale_high.array().rowwise() * layer.beta.row(0).array()).matrix();
    tr.rescale_out = layer_norm(rescaled, layer.ln_rescale_gain, layer.ln_rescale_bias,
                                &tr.rescale_ln);
  }

  void rescaler_backward(const LayerParams<Scalar>& layer,
                         const LayerTrace<Scalar>& tr, const MatrixX<Scalar>& d_resc,
                         LayerParams<Scalar>& g, MatrixX<Scalar>& dx) const {
    MatrixX<Scalar> d_pre =
        layer_norm_backward(d_resc, layer.ln_rescale_gain, tr.rescale_ln,
                            g.ln_rescale_gain, g.ln_rescale_bias);
    g.beta += (tr.rescale_high.array() * d_pre.array()).colwise().sum().matrix();
    // y = L x + (x - L x) diag(beta)  =>  dx = L^T (d - d beta) + d beta
    const MatrixX<Scalar> d_high =
        (d_pre.array().rowwise() * layer.beta.row(0).array()).matrix();
    if (config_.backend == SpectralBackend::Residual)
      dx += d_pre;  // low pass is the identity
    else
      dx += lfc_.transpose() * (d_pre - d_high) + d_high;
  }

  ModelConfig config_;
  MatrixX<Scalar> lfc_;
};

// Tied-embedding logits for the given state rows; the pad column is -inf so
// the pad item is never ranked and never receives probability mass.
template <typename Scalar>
MatrixX<Scalar> score_items(const MatrixX<Scalar>& states,
                            const MatrixX<Scalar>& item_embeddings) {
  MatrixX<Scalar> logits = states * item_embeddings.transpose();
  logits.col(0).setConstant(-std::numeric_limits<Scalar>::infinity());
  return logits;
}

// Mean cross-entropy over masked positions of a full ranking softmax. If
// `d_logits` is non-null it receives softmax-minus-onehot rows scaled by
// `grad_scale` (masked-out rows zero).
template <typename Scalar>
double sequence_loss(const MatrixX<Scalar>& logits,
                     const std::vector<ItemId>& targets,
                     const std::vector<std::uint8_t>& position_mask,
                     MatrixX<Scalar>* d_logits = nullptr,
                     double grad_scale = 0.0) {
  const Index len = logits.rows();
  if (static_cast<Index>(targets.size()) != len ||
      static_cast<Index>(position_mask.size()) != len)
    throw std::invalid_argument("sequence_loss: targets/mask misaligned with logits");

  if (d_logits) d_logits->setZero(logits.rows(), logits.cols());

  double total = 0.0;
  Index positions = 0;
  for (Index t = 0; t < len; ++t) {
    if (!position_mask[static_cast<std::size_t>(t)]) continue;
    const ItemId target = targets[static_cast<std::size_t>(t)];
    if (target <= 0 || target >= logits.cols())
      throw std::invalid_argument("sequence_loss: target outside vocabulary");
    ++positions;

    const auto row = logits.row(t);
    Scalar mx = row(1);
    for (Index i = 2; i < logits.cols(); ++i) mx = std::max(mx, row(i));
    double denom = 0.0;
    for (Index i = 1; i < logits.cols(); ++i)
      denom += std::exp(static_cast<double>(row(i) - mx));
    const double log_denom = std::log(denom);
    total += log_denom - static_cast<double>(row(target) - mx);

    if (d_logits) {
      for (Index i = 1; i < logits.cols(); ++i)
        (*d_logits)(t, i) = static_cast<Scalar>(
            std::exp(static_cast<double>(row(i) - mx)) / denom * grad_scale);
      (*d_logits)(t, target) -= static_cast<Scalar>(grad_scale);
    }
  }
  if (positions == 0)
    throw std::invalid_argument("sequence_loss: no supervised positions");
  return total / static_cast<double>(positions);
}

// Dense next-item targets for a training window: each non-pad position
// predicts the following window element; the final position predicts the
// stored target.
inline std::vector<ItemId> dense_targets(const SplitExample& example) {
  const std::size_t len = example.input_window.size();
  std::vector<ItemId> targets(len, kPadItem);
  for (std::size_t t = 0; t < len; ++t) {
    if (!example.position_mask[t]) continue;
    targets[t] = (t + 1 < len) ? example.input_window[t + 1] : example.target;
  }
  return targets;
}

}  // namespace bsarec
