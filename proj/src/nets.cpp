#include "uqaug/nets.hpp"

#include "uqaug/binio.hpp"
#include "uqaug/rng.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace uqaug {

std::string to_string(Task task) {
  return task == Task::Reconstruction ? "reconstruction" : "segmentation";
}

Task parse_task(const std::string& s) {
  if (s == "reconstruction") return Task::Reconstruction;
  if (s == "segmentation") return Task::Segmentation;
  throw ConfigError("unknown task '" + s + "'");
}

BackboneConfig BackboneConfig::reconstruction() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::segmentation(int k) {
  BackboneConfig c;
  c.task = Task::Segmentation;
  c.out_channels_pred = k;
  c.out_channels_scale = k;
  return c;
}

void BackboneConfig::validate() const {
  if (depth < 1) throw ConfigError("backbone: depth must be >= 1");
  if (base_channels < 4) throw ConfigError("backbone: base_channels must be >= 4");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("backbone: dropout_p must be in [0, 1)");
  if (in_channels < 1) throw ConfigError("backbone: in_channels must be >= 1");
  if (!(log_scale_min < log_scale_max)) throw ConfigError("backbone: empty log-scale clamp range");
  if (task == Task::Reconstruction && (out_channels_pred != 1 || out_channels_scale != 1)) {
    throw ConfigError("backbone: reconstruction heads must have one channel each");
  }
  if (task == Task::Segmentation &&
      (out_channels_pred < 2 || out_channels_scale != out_channels_pred)) {
    throw ConfigError("backbone: segmentation heads must both have k >= 2 channels");
  }
}

void BackboneConfig::validate_input(int height, int width) const {
  const int m = 1 << depth;
  if (height <= 0 || width <= 0 || height % m != 0 || width % m != 0) {
    throw ConfigError("backbone: input " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by 2^depth = " + std::to_string(m));
  }
}

template <typename Scalar>
Map2<Scalar> StochasticForwardOutput<Scalar>::pred_map(int c) const {
  return Eigen::Map<const Map2<Scalar>>(pred.row(c).data(), height, width);
}

template <typename Scalar>
Map2<Scalar> StochasticForwardOutput<Scalar>::log_scale_map(int c) const {
  return Eigen::Map<const Map2<Scalar>>(log_scale.row(c).data(), height, width);
}

namespace {

template <typename Scalar>
void im2col3(const Tensor<Scalar>& in, int h, int w, Tensor<Scalar>& col) {
  const auto channels = in.rows();
  col.resize(channels * 9, static_cast<Eigen::Index>(h) * w);
  for (Eigen::Index c = 0; c < channels; ++c) {
    const Scalar* src = in.row(c).data();
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Scalar* dst = col.row(c * 9 + ky * 3 + kx).data();
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          Scalar* row = dst + static_cast<std::ptrdiff_t>(y) * w;
          const int yy = y + dy;
          if (yy < 0 || yy >= h) {
            std::fill(row, row + w, Scalar(0));
            continue;
          }
          if (x0 > 0) row[0] = Scalar(0);
          if (x1 < w) row[w - 1] = Scalar(0);
          const Scalar* s = src + static_cast<std::ptrdiff_t>(yy) * w + dx;
          std::copy(s + x0, s + x1, row + x0);
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> col2im3(const Tensor<Scalar>& col, int h, int w) {
  const auto channels = col.rows() / 9;
  Tensor<Scalar> out = Tensor<Scalar>::Zero(channels, static_cast<Eigen::Index>(h) * w);
  for (Eigen::Index c = 0; c < channels; ++c) {
    Scalar* dst = out.row(c).data();
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Scalar* src = col.row(c * 9 + ky * 3 + kx).data();
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          const Scalar* s = src + static_cast<std::ptrdiff_t>(y) * w;
          Scalar* d = dst + static_cast<std::ptrdiff_t>(yy) * w + dx;
          for (int x = x0; x < x1; ++x) d[x] += s[x];
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> maxpool2(const Tensor<Scalar>& in, int h, int w, std::vector<std::int32_t>* argmax) {
  const int oh = h / 2, ow = w / 2;
  Tensor<Scalar> out(in.rows(), static_cast<Eigen::Index>(oh) * ow);
  if (argmax) argmax->resize(static_cast<std::size_t>(out.size()));
  for (Eigen::Index c = 0; c < in.rows(); ++c) {
    const Scalar* s = in.row(c).data();
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        std::int32_t best = (2 * y) * w + 2 * x;
        for (std::int32_t cand : {best + 1, best + w, best + w + 1}) {
          if (s[cand] > s[best]) best = cand;
        }
        const auto o = static_cast<Eigen::Index>(y) * ow + x;
        out(c, o) = s[best];
        if (argmax) (*argmax)[static_cast<std::size_t>(c * out.cols() + o)] = best;
      }
    }
  }
  return out;
}

}  // namespace

template <typename Scalar>
Eigen::Index UNet<Scalar>::layout() {
  Eigen::Index offset = 0;
  auto conv = [&](int in, int out, int kernel) {
    ConvLayer l{in, out, kernel, offset, 0};
    offset += static_cast<Eigen::Index>(out) * in * kernel * kernel;
    l.bias_offset = offset;
    offset += out;
    return l;
  };
  encoder_.clear();
  decoder_.assign(static_cast<std::size_t>(2 * config_.depth), ConvLayer{});
  up_.assign(static_cast<std::size_t>(config_.depth), UpLayer{});
  bottleneck_.clear();
  for (int l = 0; l < config_.depth; ++l) {
    const int in = l == 0 ? config_.in_channels : config_.channels(l - 1);
    encoder_.push_back(conv(in, config_.channels(l), 3));
    encoder_.push_back(conv(config_.channels(l), config_.channels(l), 3));
  }
  bottleneck_.push_back(conv(config_.channels(config_.depth - 1), config_.channels(config_.depth), 3));
  bottleneck_.push_back(conv(config_.channels(config_.depth), config_.channels(config_.depth), 3));
  for (int l = config_.depth - 1; l >= 0; --l) {
    UpLayer u{config_.channels(l + 1), config_.channels(l), offset, 0};
    offset += 4 * static_cast<Eigen::Index>(u.out) * u.in;
    u.bias_offset = offset;
    offset += u.out;
    up_[static_cast<std::size_t>(l)] = u;
    decoder_[static_cast<std::size_t>(2 * l)] = conv(2 * config_.channels(l), config_.channels(l), 3);
    decoder_[static_cast<std::size_t>(2 * l + 1)] = conv(config_.channels(l), config_.channels(l), 3);
  }
  pred_head_ = conv(config_.channels(0), config_.out_channels_pred, 1);
  scale_head_ = conv(config_.channels(0), config_.out_channels_scale, 1);
  return offset;
}

template <typename Scalar>
Eigen::Index UNet<Scalar>::parameter_count(const BackboneConfig& config) {
  config.validate();
  UNet<Scalar> probe;
  probe.config_ = config;
  return probe.layout();
}

template <typename Scalar>
UNet<Scalar>::UNet(const BackboneConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  params_ = Vec<Scalar>::Zero(layout());
  Rng rng(init_seed);
  auto fill = [&](Eigen::Index offset, Eigen::Index n, double sd) {
    for (Eigen::Index i = 0; i < n; ++i) params_[offset + i] = static_cast<Scalar>(sd * rng.normal());
  };
  // Inverted dropout scales the second moment of every masked input by 1 / keep, so layers
  // fed by masked activations start with weights shrunk by keep. Without this, sampled passes
  // through a deep unnormalized stack blow up geometrically with depth.
  const double keep = 1.0 - config_.dropout_p;
  auto he = [&](const ConvLayer& l, double gain) {
    const int fan_in = l.in * l.kernel * l.kernel;
    fill(l.weight_offset, static_cast<Eigen::Index>(l.out) * fan_in, std::sqrt(2.0 * gain / fan_in));
  };
  for (std::size_t i = 0; i < encoder_.size(); ++i) he(encoder_[i], i == 0 ? 1.0 : keep);
  for (const auto& l : bottleneck_) he(l, keep);
  for (int lvl = config_.depth - 1; lvl >= 0; --lvl) {
    const auto& u = up_[static_cast<std::size_t>(lvl)];
    fill(u.weight_offset, 4 * static_cast<Eigen::Index>(u.out) * u.in, std::sqrt(keep / u.in));
    he(decoder_[static_cast<std::size_t>(2 * lvl)], keep);
    he(decoder_[static_cast<std::size_t>(2 * lvl + 1)], keep);
  }
  for (const auto* head : {&pred_head_, &scale_head_}) {
    fill(head->weight_offset, static_cast<Eigen::Index>(head->out) * head->in, std::sqrt(keep / head->in));
  }
}

template <typename Scalar>
auto UNet<Scalar>::forward(const FloatMap& image, DropoutMode mode, std::uint64_t seed) const
    -> Output {
  if (config_.in_channels != 1) throw BoundsError("forward: model expects multi-channel input");
  const int h = static_cast<int>(image.rows()), w = static_cast<int>(image.cols());
  Tensor<Scalar> input = Eigen::Map<const Tensor<Scalar>>(image.template cast<Scalar>().eval().data(), 1,
                                                          static_cast<Eigen::Index>(h) * w);
  return forward(input, h, w, mode, seed);
}

template <typename Scalar>
auto UNet<Scalar>::forward(const Tensor<Scalar>& input, int height, int width, DropoutMode mode,
                           std::uint64_t seed, Tape* tape) const -> Output {
  if (input.rows() != config_.in_channels || input.cols() != static_cast<Eigen::Index>(height) * width) {
    throw BoundsError("forward: input shape does not match the model");
  }
  config_.validate_input(height, width);
  const bool sample = mode == DropoutMode::Sample && config_.dropout_p > 0.0;
  Rng rng(seed);
  const Scalar* P = params_.data();

  if (tape) {
    *tape = Tape{};
    tape->height = height;
    tape->width = width;
  }

  Tensor<Scalar> col;
  auto conv_block = [&](const ConvLayer& l, const Tensor<Scalar>& x, int h, int w) {
    im2col3(x, h, w, col);
    Eigen::Map<const Map2<Scalar>> W(P + l.weight_offset, l.out, l.in * 9);
    Eigen::Map<const Vec<Scalar>> b(P + l.bias_offset, l.out);
    Tensor<Scalar> z = W * col;
    z.colwise() += b;
    Tensor<Scalar> mult = (z.array() > Scalar(0)).template cast<Scalar>();
    if (sample) dropout_multiplier(mult, config_.dropout_p, rng);
    z.array() *= mult.array();
    if (tape) {
      tape->conv_input.push_back(x);
      tape->conv_multiplier.push_back(std::move(mult));
    }
    return z;
  };

  int h = height, w = width;
  std::vector<Tensor<Scalar>> skips(static_cast<std::size_t>(config_.depth));
  Tensor<Scalar> x = input;
  for (int l = 0; l < config_.depth; ++l) {
    x = conv_block(encoder_[static_cast<std::size_t>(2 * l)], x, h, w);
    x = conv_block(encoder_[static_cast<std::size_t>(2 * l + 1)], x, h, w);
    skips[static_cast<std::size_t>(l)] = x;
    std::vector<std::int32_t>* am = nullptr;
    if (tape) am = &tape->pool_argmax.emplace_back();
    x = maxpool2(x, h, w, am);
    h /= 2;
    w /= 2;
  }
  x = conv_block(bottleneck_[0], x, h, w);
  x = conv_block(bottleneck_[1], x, h, w);

  for (int l = config_.depth - 1; l >= 0; --l) {
    const auto& u = up_[static_cast<std::size_t>(l)];
    if (tape) tape->up_input.push_back(x);
    Eigen::Map<const Map2<Scalar>> W(P + u.weight_offset, 4 * u.out, u.in);
    const Tensor<Scalar> y = W * x;
    const int oh = 2 * h, ow = 2 * w;
    Tensor<Scalar> cat(2 * u.out, static_cast<Eigen::Index>(oh) * ow);
    cat.topRows(u.out) = skips[static_cast<std::size_t>(l)];
    for (int c = 0; c < u.out; ++c) {
      const Scalar bias = P[u.bias_offset + c];
      Scalar* dst = cat.row(u.out + c).data();
      for (int q = 0; q < 4; ++q) {
        const int dy = q / 2, dx = q % 2;
        const Scalar* src = y.row(q * u.out + c).data();
        for (int yy = 0; yy < h; ++yy) {
          for (int xx = 0; xx < w; ++xx) {
            dst[(2 * yy + dy) * ow + 2 * xx + dx] = src[yy * w + xx] + bias;
          }
        }
      }
    }
    h = oh;
    w = ow;
    x = conv_block(decoder_[static_cast<std::size_t>(2 * l)], cat, h, w);
    x = conv_block(decoder_[static_cast<std::size_t>(2 * l + 1)], x, h, w);
  }

  Output out;
  out.height = height;
  out.width = width;
  {
    Eigen::Map<const Map2<Scalar>> Wp(P + pred_head_.weight_offset, pred_head_.out, pred_head_.in);
    Eigen::Map<const Vec<Scalar>> bp(P + pred_head_.bias_offset, pred_head_.out);
    out.pred = Wp * x;
    out.pred.colwise() += bp;
    Eigen::Map<const Map2<Scalar>> Ws(P + scale_head_.weight_offset, scale_head_.out, scale_head_.in);
    Eigen::Map<const Vec<Scalar>> bs(P + scale_head_.bias_offset, scale_head_.out);
    Tensor<Scalar> s = Ws * x;
    s.colwise() += bs;
    const auto lo = static_cast<Scalar>(config_.log_scale_min);
    const auto hi = static_cast<Scalar>(config_.log_scale_max);
    if (tape) {
      tape->log_scale_side = (s.array() > hi).template cast<Scalar>() - (s.array() < lo).template cast<Scalar>();
      tape->head_input = x;
    }
    out.log_scale = s.cwiseMax(lo).cwiseMin(hi);
  }
  return out;
}

template <typename Scalar>
void UNet<Scalar>::backward(const Tape& tape, const Tensor<Scalar>& d_pred,
                            const Tensor<Scalar>& d_log_scale, Vec<Scalar>& grad) const {
  if (grad.size() != params_.size()) grad = Vec<Scalar>::Zero(params_.size());
  const Scalar* P = params_.data();
  Scalar* G = grad.data();

  Tensor<Scalar> g;
  {
    Eigen::Map<const Map2<Scalar>> Wp(P + pred_head_.weight_offset, pred_head_.out, pred_head_.in);
    Eigen::Map<const Map2<Scalar>> Ws(P + scale_head_.weight_offset, scale_head_.out, scale_head_.in);
    // Outside the clamp range the gradient is kept only when descent moves back inside;
    // a hard zero there lets units stick at the bounds for good.
    const Tensor<Scalar> ds = d_log_scale.binaryExpr(tape.log_scale_side, [](Scalar d, Scalar side) {
      return side == Scalar(0) || (side > Scalar(0)) == (d > Scalar(0)) ? d : Scalar(0);
    });
    Eigen::Map<Map2<Scalar>>(G + pred_head_.weight_offset, pred_head_.out, pred_head_.in).noalias() +=
        d_pred * tape.head_input.transpose();
    Eigen::Map<Vec<Scalar>>(G + pred_head_.bias_offset, pred_head_.out) += d_pred.rowwise().sum();
    Eigen::Map<Map2<Scalar>>(G + scale_head_.weight_offset, scale_head_.out, scale_head_.in).noalias() +=
        ds * tape.head_input.transpose();
    Eigen::Map<Vec<Scalar>>(G + scale_head_.bias_offset, scale_head_.out) += ds.rowwise().sum();
    g = Wp.transpose() * d_pred;
    g.noalias() += Ws.transpose() * ds;
  }

  auto conv_idx = static_cast<std::ptrdiff_t>(tape.conv_input.size()) - 1;
  Tensor<Scalar> col;
  auto conv_back = [&](const ConvLayer& l, const Tensor<Scalar>& g_out, int h, int w) {
    const auto idx = static_cast<std::size_t>(conv_idx--);
    const Tensor<Scalar> dz = g_out.cwiseProduct(tape.conv_multiplier[idx]);
    im2col3(tape.conv_input[idx], h, w, col);
    Eigen::Map<Map2<Scalar>>(G + l.weight_offset, l.out, l.in * 9).noalias() += dz * col.transpose();
    Eigen::Map<Vec<Scalar>>(G + l.bias_offset, l.out) += dz.rowwise().sum();
    Eigen::Map<const Map2<Scalar>> W(P + l.weight_offset, l.out, l.in * 9);
    col.noalias() = W.transpose() * dz;
    return col2im3(col, h, w);
  };

  const int depth = config_.depth;
  std::vector<Tensor<Scalar>> g_skip(static_cast<std::size_t>(depth));
  for (int l = 0; l < depth; ++l) {
    const int h = tape.height >> l, w = tape.width >> l;
    g = conv_back(decoder_[static_cast<std::size_t>(2 * l + 1)], g, h, w);
    g = conv_back(decoder_[static_cast<std::size_t>(2 * l)], g, h, w);
    const auto& u = up_[static_cast<std::size_t>(l)];
    g_skip[static_cast<std::size_t>(l)] = g.topRows(u.out);
    const int ih = h / 2, iw = w / 2;
    Tensor<Scalar> gy(4 * u.out, static_cast<Eigen::Index>(ih) * iw);
    for (int c = 0; c < u.out; ++c) {
      const Scalar* src = g.row(u.out + c).data();
      Scalar bias_grad = 0;
      for (int q = 0; q < 4; ++q) {
        const int dy = q / 2, dx = q % 2;
        Scalar* dst = gy.row(q * u.out + c).data();
        for (int yy = 0; yy < ih; ++yy) {
          for (int xx = 0; xx < iw; ++xx) {
            const Scalar v = src[(2 * yy + dy) * w + 2 * xx + dx];
            dst[yy * iw + xx] = v;
            bias_grad += v;
          }
        }
      }
      G[u.bias_offset + c] += bias_grad;
    }
    const auto& x_in = tape.up_input[static_cast<std::size_t>(depth - 1 - l)];
    Eigen::Map<Map2<Scalar>>(G + u.weight_offset, 4 * u.out, u.in).noalias() += gy * x_in.transpose();
    Eigen::Map<const Map2<Scalar>> W(P + u.weight_offset, 4 * u.out, u.in);
    g = W.transpose() * gy;
  }

  {
    const int h = tape.height >> depth, w = tape.width >> depth;
    g = conv_back(bottleneck_[1], g, h, w);
    g = conv_back(bottleneck_[0], g, h, w);
  }

  for (int l = depth - 1; l >= 0; --l) {
    const int h = tape.height >> l, w = tape.width >> l;
    const auto& am = tape.pool_argmax[static_cast<std::size_t>(l)];
    Tensor<Scalar> up = g_skip[static_cast<std::size_t>(l)];
    for (Eigen::Index c = 0; c < g.rows(); ++c) {
      for (Eigen::Index o = 0; o < g.cols(); ++o) {
        up(c, am[static_cast<std::size_t>(c * g.cols() + o)]) += g(c, o);
      }
    }
    g = conv_back(encoder_[static_cast<std::size_t>(2 * l + 1)], up, h, w);
    g = conv_back(encoder_[static_cast<std::size_t>(2 * l)], g, h, w);
  }
}

template struct StochasticForwardOutput<float>;
template struct StochasticForwardOutput<double>;
template class UNet<float>;
template class UNet<double>;

Model build_backbone(const BackboneConfig& config, std::uint64_t init_seed) {
  return Model(config, init_seed);
}

StochasticForwardOutput<float> forward_stochastic(const Model& model, const Image& image,
                                                  std::uint64_t rng_seed) {
  return model.forward(image.pixels, DropoutMode::Sample, rng_seed);
}

void write_model(std::ostream& out, const Model& model) {
  const auto& c = model.config();
  out.write("UQNM", 4);
  binio::put<std::uint32_t>(out, 1);
  binio::put<std::int32_t>(out, c.depth);
  binio::put<std::int32_t>(out, c.base_channels);
  binio::put<double>(out, c.dropout_p);
  binio::put<std::int32_t>(out, c.in_channels);
  binio::put<std::int32_t>(out, c.out_channels_pred);
  binio::put<std::int32_t>(out, c.out_channels_scale);
  binio::put<std::int32_t>(out, static_cast<std::int32_t>(c.task));
  binio::put<double>(out, c.log_scale_min);
  binio::put<double>(out, c.log_scale_max);
  binio::put_vec(out, model.parameters());
}

Model read_model(std::istream& in) {
  binio::expect_magic(in, "UQNM");
  if (binio::get<std::uint32_t>(in) != 1) throw IoError("model: unsupported version");
  BackboneConfig c;
  c.depth = binio::get<std::int32_t>(in);
  c.base_channels = binio::get<std::int32_t>(in);
  c.dropout_p = binio::get<double>(in);
  c.in_channels = binio::get<std::int32_t>(in);
  c.out_channels_pred = binio::get<std::int32_t>(in);
  c.out_channels_scale = binio::get<std::int32_t>(in);
  c.task = static_cast<Task>(binio::get<std::int32_t>(in));
  c.log_scale_min = binio::get<double>(in);
  c.log_scale_max = binio::get<double>(in);
  Model m(c, 0);
  auto params = binio::get_vec<float>(in);
  if (params.size() != m.parameter_count()) throw IoError("model: weight count does not match config");
  m.parameters() = std::move(params);
  return m;
}

}  // namespace uqaug
