#pragma once

// Multi-view noise predictor eps_theta(Z_t, t, y).
//
// A small encoder/decoder over `levels` resolutions with additive skips.
// Every residual block normalises its input per site (LN over channels); in
// rcn mode that norm is modulated by the target rays at the block's
// resolution. The other conditioning variants feed rays as extra input
// channels (concat_input), additionally at every block (concat_multiscale), or
// feed a relative pose vector into the global embedding (pose_token).
//
// The source view enters twice: concatenated to the noisy target along
// channels, and through a strided conv encoder whose pooled output joins the
// timestep embedding. With attention enabled, a view-axis attention layer
// follows every block.
//
// Batch layout: images ordered (instance, view); `views` targets per instance
// share the source image and the timestep.

#include <string>
#include <vector>

#include "mvdiff/nn/modulation.hpp"
#include "mvdiff/nn/ops.hpp"
#include "mvdiff/nn/parameters.hpp"

namespace mvdiff::nn {

template <class T>
struct DenoiserInput {
  int instances = 1;
  int views = 1;
  FeatureMap<T> noisy;              // image_channels × (instances·views·H·W)
  FeatureMap<T> source;             // image_channels × (instances·H·W)
  std::vector<int> timesteps;       // one per instance
  Mat<T> pose;                      // pose_dim × (instances·views); pose_token mode
  std::vector<FeatureMap<T>> rays;  // per level, ray_dim × (instances·views·h_l·w_l); ray modes

  int images() const { return instances * views; }
};

namespace detail {

inline std::string level_name(const char* prefix, int l) { return std::string(prefix) + std::to_string(l); }

struct LinearIdx {
  int w = -1, b = -1;
};
struct BlockIdx {
  LinearIdx conv1, conv2, temb, mod1, mod2;
  int level = 0;
  bool rcn() const { return mod1.w >= 0; }
};
struct AttnIdx {
  int q = -1, k = -1, v = -1, o = -1, ob = -1;
  bool enabled() const { return q >= 0; }
};

}  // namespace detail

/// Registers every tensor of the architecture (values zero).
template <class T>
Parameters<T> build_parameters(const NetworkConfig& cfg) {
  cfg.validate();
  Parameters<T> p;
  p.config = cfg;
  const int D = cfg.time_dim;
  const int R = cfg.ray_dim();
  const int C_img = cfg.image_channels;
  auto linear = [&](const std::string& name, int out, int in, ParamGroup g = ParamGroup::backbone,
                    Init init = Init::fan_in) {
    p.add(name + ".w", out, in, g, init, in);
    p.add(name + ".b", out, 1, g, init, in);
  };
  auto conv = [&](const std::string& name, int out, int in) {
    p.add(name + ".w", out, 9 * in, ParamGroup::backbone, Init::fan_in, 9 * in);
    p.add(name + ".b", out, 1, ParamGroup::backbone, Init::fan_in, 9 * in);
  };
  auto block = [&](const std::string& name, int level) {
    const int C = cfg.channels[level];
    const bool ms = cfg.mode == ConditioningMode::concat_multiscale;
    if (cfg.mode == ConditioningMode::rcn) {
      linear(name + ".rcn.l1", cfg.mod_hidden, R, ParamGroup::fresh);
      linear(name + ".rcn.l2", 2 * C, cfg.mod_hidden, ParamGroup::fresh, Init::zero);
    }
    conv(name + ".conv1", C, C + (ms ? R : 0));
    linear(name + ".temb", C, D);
    conv(name + ".conv2", C, C);
    if (cfg.attention) {
      const std::string a = name + ".attn";
      p.add(a + ".q.w", C, C, ParamGroup::fresh, Init::fan_in, C);
      p.add(a + ".k.w", C, C, ParamGroup::fresh, Init::fan_in, C);
      p.add(a + ".v.w", C, C, ParamGroup::fresh, Init::fan_in, C);
      p.add(a + ".o.w", C, C, ParamGroup::fresh, Init::zero, C);
      p.add(a + ".o.b", C, 1, ParamGroup::fresh, Init::zero, C);
    }
  };

  linear("time.l1", D, D);
  linear("time.l2", D, D);
  const int Cg = cfg.encoder_channels;
  for (int i = 0; i < 4; ++i) conv("src.c" + std::to_string(i), Cg, i == 0 ? C_img : Cg);
  linear("src.proj", D, Cg);
  if (cfg.mode == ConditioningMode::pose_token) {
    linear("pose.l1", D, NetworkConfig::pose_dim, ParamGroup::fresh);
    linear("pose.l2", D, D, ParamGroup::fresh, Init::zero);
  }
  conv("in", cfg.channels[0], 2 * C_img + (cfg.rays_at_input() ? R : 0));
  const int L = cfg.levels();
  for (int l = 0; l < L; ++l) {
    block(detail::level_name("enc", l), l);
    if (l + 1 < L) conv(detail::level_name("down", l), cfg.channels[l + 1], cfg.channels[l]);
  }
  block("mid", L - 1);
  for (int l = L - 2; l >= 0; --l) {
    conv(detail::level_name("up", l), cfg.channels[l], cfg.channels[l + 1]);
    block(detail::level_name("dec", l), l);
  }
  conv("out", C_img, cfg.channels[0]);
  return p;
}

/// Fan-in uniform init for backbone weights, zero biases, zero modulation
/// output layers and attention output projections.
template <class T>
Parameters<T> init_parameters(const NetworkConfig& cfg, std::uint64_t seed) {
  auto p = build_parameters<T>(cfg);
  p.initialize(seed);
  return p;
}

template <class T>
struct BlockTape {
  LayerNormCache<T> ln1;
  ModulateCache<T> mod;
  ModulationParams<T> mp;
  Mat<T> n1;
  ConvCache<T> conv1;
  LayerNormCache<T> ln2;
  ConvCache<T> conv2;
};

template <class T>
struct DenoiserTape {
  Mat<T> t_sin, time_pre, time_act;
  std::vector<ConvCache<T>> src_conv;
  std::vector<Mat<T>> src_pre;
  Grid src_last;
  Mat<T> pooled;
  Mat<T> pose_pre, pose_act;
  Mat<T> emb, emb_act;
  ConvCache<T> in_conv;
  std::vector<BlockTape<T>> enc, dec;
  std::vector<AttentionCache<T>> enc_attn, dec_attn;
  std::vector<ConvCache<T>> down, up;
  std::vector<Grid> up_in;
  BlockTape<T> mid;
  AttentionCache<T> mid_attn;
  Mat<T> out_in;
  LayerNormCache<T> out_ln;
  ConvCache<T> out_conv;
};

template <class T>
class Denoiser {
 public:
  explicit Denoiser(const Parameters<T>& params) : p_(params), cfg_(params.config) { resolve(); }

  const NetworkConfig& config() const { return cfg_; }

  void check_input(const DenoiserInput<T>& in) const {
    const int S = cfg_.image_size;
    require(in.instances >= 1 && in.views >= 1, "denoiser: need at least one instance and view");
    require(in.noisy.grid == Grid{in.images(), S, S} && in.noisy.channels() == cfg_.image_channels,
            "denoiser: noisy latent shape does not match the network");
    require(in.source.grid == Grid{in.instances, S, S} && in.source.channels() == cfg_.image_channels,
            "denoiser: source latent shape does not match the network");
    require(static_cast<int>(in.timesteps.size()) == in.instances, "denoiser: one timestep per instance");
    if (cfg_.mode == ConditioningMode::pose_token)
      require(in.pose.rows() == NetworkConfig::pose_dim && in.pose.cols() == in.images(),
              "denoiser: pose_token mode needs a pose vector per view");
    if (cfg_.uses_rays()) {
      require(static_cast<int>(in.rays.size()) >= cfg_.levels(), "denoiser: ray embeddings missing for some levels");
      for (int l = 0; l < cfg_.levels(); ++l) {
        const int s = cfg_.level_size(l);
        require(in.rays[l].grid == Grid{in.images(), s, s} && in.rays[l].channels() == cfg_.ray_dim(),
                "denoiser: ray embedding resolution mismatch at level " + std::to_string(l));
      }
    }
  }

  FeatureMap<T> forward(const DenoiserInput<T>& in, DenoiserTape<T>* tape = nullptr) const {
    check_input(in);
    DenoiserTape<T> local;
    DenoiserTape<T>& tp = tape ? *tape : local;
    const int L = cfg_.levels();
    const int V = in.views;

    // global embedding: timestep + pooled source code (+ pose)
    tp.t_sin = timestep_embedding<T>(in.timesteps, cfg_.time_dim);
    tp.time_pre = linear(tp.t_sin, W(time1_.w), W(time1_.b));
    tp.time_act = silu(tp.time_pre);
    const Mat<T> et = linear(tp.time_act, W(time2_.w), W(time2_.b));

    tp.src_conv.assign(4, {});
    tp.src_pre.assign(4, {});
    FeatureMap<T> cur = in.source;
    for (int i = 0; i < 4; ++i) {
      FeatureMap<T> pre = conv3x3(cur, W(src_[i].w), W(src_[i].b), 2, &tp.src_conv[i]);
      cur = FeatureMap<T>(pre.grid, silu(pre.data));
      tp.src_pre[i] = std::move(pre.data);
    }
    tp.src_last = cur.grid;
    tp.pooled = mean_pool(cur);
    const Mat<T> g = linear(tp.pooled, W(src_proj_.w), W(src_proj_.b));

    tp.emb.resize(cfg_.time_dim, in.images());
    for (int n = 0; n < in.images(); ++n) tp.emb.col(n) = et.col(n / V) + g.col(n / V);
    if (pose1_.w >= 0) {
      tp.pose_pre = linear(in.pose, W(pose1_.w), W(pose1_.b));
      tp.pose_act = silu(tp.pose_pre);
      tp.emb += linear(tp.pose_act, W(pose2_.w), W(pose2_.b));
    }
    tp.emb_act = silu(tp.emb);

    // input stem
    const FeatureMap<T> src_rep = repeat_images(in.source, V);
    const int cin = 2 * cfg_.image_channels + (cfg_.rays_at_input() ? cfg_.ray_dim() : 0);
    FeatureMap<T> x0(in.noisy.grid, Mat<T>(cin, in.noisy.sites()));
    x0.data.topRows(cfg_.image_channels) = in.noisy.data;
    x0.data.middleRows(cfg_.image_channels, cfg_.image_channels) = src_rep.data;
    if (cfg_.rays_at_input()) x0.data.bottomRows(cfg_.ray_dim()) = in.rays[0].data;
    FeatureMap<T> h = conv3x3(x0, W(in_.w), W(in_.b), 1, &tp.in_conv);

    tp.enc.assign(L, {});
    tp.enc_attn.assign(L, {});
    tp.down.assign(L, {});
    std::vector<FeatureMap<T>> skips(L);
    for (int l = 0; l < L; ++l) {
      h = block_forward(h, enc_[l], in, tp.emb_act, tp.enc[l]);
      if (enc_attn_[l].enabled()) h = view_attention(h, V, attn_weights(enc_attn_[l]), &tp.enc_attn[l]);
      if (l + 1 < L) {
        skips[l] = h;
        h = conv3x3(h, W(down_[l].w), W(down_[l].b), 2, &tp.down[l]);
      }
    }
    h = block_forward(h, mid_, in, tp.emb_act, tp.mid);
    if (mid_attn_.enabled()) h = view_attention(h, V, attn_weights(mid_attn_), &tp.mid_attn);

    tp.dec.assign(L, {});
    tp.dec_attn.assign(L, {});
    tp.up.assign(L, {});
    tp.up_in.assign(L, {});
    for (int l = L - 2; l >= 0; --l) {
      tp.up_in[l] = h.grid;
      h = conv3x3(upsample2(h), W(up_[l].w), W(up_[l].b), 1, &tp.up[l]);
      h.data += skips[l].data;
      h = block_forward(h, dec_[l], in, tp.emb_act, tp.dec[l]);
      if (dec_attn_[l].enabled()) h = view_attention(h, V, attn_weights(dec_attn_[l]), &tp.dec_attn[l]);
    }

    const Mat<T> n = layer_norm(h.data, &tp.out_ln);
    FeatureMap<T> a(h.grid, silu(n));
    return conv3x3(a, W(out_.w), W(out_.b), 1, &tp.out_conv);
  }

  /// Accumulates d(loss)/d(param) into `grads` (layout of Parameters::zeros_like).
  void backward(const DenoiserInput<T>& in, const DenoiserTape<T>& tp, const FeatureMap<T>& d_out,
                std::vector<Mat<T>>& grads) const {
    require(grads.size() == p_.size(), "denoiser: gradient buffer does not match parameters");
    const int L = cfg_.levels();
    const int V = in.views;
    Mat<T> d_emb_act = Mat<T>::Zero(cfg_.time_dim, in.images());

    FeatureMap<T> d_a = conv3x3_backward(d_out, W(out_.w), tp.out_conv, G(grads, out_.w), G(grads, out_.b));
    const Mat<T> d_n = silu_backward(d_a.data, tp.out_ln.y);
    FeatureMap<T> dh(d_a.grid, layer_norm_backward(d_n, tp.out_ln));

    std::vector<FeatureMap<T>> d_skips(L);
    for (int l = 0; l <= L - 2; ++l) {
      if (dec_attn_[l].enabled())
        dh = view_attention_backward(dh, attn_weights(dec_attn_[l]), tp.dec_attn[l], attn_grads(grads, dec_attn_[l]));
      dh = block_backward(dh, dec_[l], in, tp.emb_act, tp.dec[l], grads, d_emb_act);
      d_skips[l] = dh;
      const FeatureMap<T> d_up = conv3x3_backward(dh, W(up_[l].w), tp.up[l], G(grads, up_[l].w), G(grads, up_[l].b));
      dh = upsample2_backward(d_up, tp.up_in[l]);
    }
    if (mid_attn_.enabled())
      dh = view_attention_backward(dh, attn_weights(mid_attn_), tp.mid_attn, attn_grads(grads, mid_attn_));
    dh = block_backward(dh, mid_, in, tp.emb_act, tp.mid, grads, d_emb_act);
    for (int l = L - 1; l >= 0; --l) {
      if (l + 1 < L) {
        dh = conv3x3_backward(dh, W(down_[l].w), tp.down[l], G(grads, down_[l].w), G(grads, down_[l].b));
        dh.data += d_skips[l].data;
      }
      if (enc_attn_[l].enabled())
        dh = view_attention_backward(dh, attn_weights(enc_attn_[l]), tp.enc_attn[l], attn_grads(grads, enc_attn_[l]));
      dh = block_backward(dh, enc_[l], in, tp.emb_act, tp.enc[l], grads, d_emb_act);
    }
    conv3x3_backward(dh, W(in_.w), tp.in_conv, G(grads, in_.w), G(grads, in_.b), false);

    // global embedding
    const Mat<T> d_emb = silu_backward(d_emb_act, tp.emb);
    if (pose1_.w >= 0) {
      const Mat<T> d_pact = linear_backward(d_emb, tp.pose_act, W(pose2_.w), G(grads, pose2_.w), G(grads, pose2_.b));
      linear_backward(silu_backward(d_pact, tp.pose_pre), in.pose, W(pose1_.w), G(grads, pose1_.w),
                      G(grads, pose1_.b), false);
    }
    Mat<T> d_inst = Mat<T>::Zero(cfg_.time_dim, in.instances);
    for (int n = 0; n < in.images(); ++n) d_inst.col(n / V) += d_emb.col(n);

    const Mat<T> d_pooled = linear_backward(d_inst, tp.pooled, W(src_proj_.w), G(grads, src_proj_.w),
                                            G(grads, src_proj_.b));
    FeatureMap<T> d_cur = mean_pool_backward(d_pooled, tp.src_last);
    for (int i = 3; i >= 0; --i) {
      FeatureMap<T> d_pre(d_cur.grid, silu_backward(d_cur.data, tp.src_pre[i]));
      d_cur = conv3x3_backward(d_pre, W(src_[i].w), tp.src_conv[i], G(grads, src_[i].w), G(grads, src_[i].b), i > 0);
    }

    const Mat<T> d_tact = linear_backward(d_inst, tp.time_act, W(time2_.w), G(grads, time2_.w), G(grads, time2_.b));
    linear_backward(silu_backward(d_tact, tp.time_pre), tp.t_sin, W(time1_.w), G(grads, time1_.w),
                    G(grads, time1_.b), false);
  }

 private:
  using LinearIdx = detail::LinearIdx;
  using BlockIdx = detail::BlockIdx;
  using AttnIdx = detail::AttnIdx;

  const Mat<T>& W(int i) const { return p_[i].value; }
  static Mat<T>& G(std::vector<Mat<T>>& g, int i) { return g[i]; }

  int idx(const std::string& name, bool optional = false) const {
    const int i = p_.find(name);
    if (i < 0 && !optional) throw ConfigError("denoiser: parameters lack tensor '" + name + "'");
    return i;
  }
  LinearIdx lin(const std::string& name, bool optional = false) const {
    return {idx(name + ".w", optional), idx(name + ".b", optional)};
  }
  BlockIdx blk(const std::string& name, int level) const {
    BlockIdx b;
    b.level = level;
    b.conv1 = lin(name + ".conv1");
    b.conv2 = lin(name + ".conv2");
    b.temb = lin(name + ".temb");
    if (cfg_.mode == ConditioningMode::rcn) {
      b.mod1 = lin(name + ".rcn.l1");
      b.mod2 = lin(name + ".rcn.l2");
    }
    return b;
  }
  AttnIdx att(const std::string& name) const {
    if (!cfg_.attention) return {};
    return {idx(name + ".attn.q.w"), idx(name + ".attn.k.w"), idx(name + ".attn.v.w"), idx(name + ".attn.o.w"),
            idx(name + ".attn.o.b")};
  }

  void resolve() {
    cfg_.validate();
    const int L = cfg_.levels();
    time1_ = lin("time.l1");
    time2_ = lin("time.l2");
    for (int i = 0; i < 4; ++i) src_[i] = lin("src.c" + std::to_string(i));
    src_proj_ = lin("src.proj");
    if (cfg_.mode == ConditioningMode::pose_token) {
      pose1_ = lin("pose.l1");
      pose2_ = lin("pose.l2");
    }
    in_ = lin("in");
    enc_.resize(L);
    enc_attn_.resize(L);
    down_.resize(L);
    up_.resize(L);
    dec_.resize(L);
    dec_attn_.resize(L);
    for (int l = 0; l < L; ++l) {
      enc_[l] = blk(detail::level_name("enc", l), l);
      enc_attn_[l] = att(detail::level_name("enc", l));
      if (l + 1 < L) {
        down_[l] = lin(detail::level_name("down", l));
        up_[l] = lin(detail::level_name("up", l));
        dec_[l] = blk(detail::level_name("dec", l), l);
        dec_attn_[l] = att(detail::level_name("dec", l));
      }
    }
    mid_ = blk("mid", L - 1);
    mid_attn_ = att("mid");
    out_ = lin("out");
  }

  AttentionWeights<T> attn_weights(const AttnIdx& a) const {
    return {&W(a.q), &W(a.k), &W(a.v), &W(a.o), &W(a.ob)};
  }
  static AttentionGrads<T> attn_grads(std::vector<Mat<T>>& g, const AttnIdx& a) {
    return {&g[a.q], &g[a.k], &g[a.v], &g[a.o], &g[a.ob]};
  }
  ModulationHead<T> head(const BlockIdx& b) const {
    return {&W(b.mod1.w), &W(b.mod1.b), &W(b.mod2.w), &W(b.mod2.b)};
  }

  FeatureMap<T> block_forward(const FeatureMap<T>& x, const BlockIdx& b, const DenoiserInput<T>& in,
                              const Mat<T>& emb_act, BlockTape<T>& tp) const {
    const bool ms = cfg_.mode == ConditioningMode::concat_multiscale;
    if (b.rcn()) {
      tp.mp = modulation_params(in.rays[b.level].data, head(b));
      tp.n1 = modulate(x.data, tp.mp.gamma_beta, &tp.mod);
    } else {
      tp.n1 = layer_norm(x.data, &tp.ln1);
    }
    Mat<T> a1 = silu(tp.n1);
    if (ms) {
      Mat<T> cat(a1.rows() + cfg_.ray_dim(), a1.cols());
      cat.topRows(a1.rows()) = a1;
      cat.bottomRows(cfg_.ray_dim()) = in.rays[b.level].data;
      a1 = std::move(cat);
    }
    FeatureMap<T> h1 = conv3x3(FeatureMap<T>(x.grid, std::move(a1)), W(b.conv1.w), W(b.conv1.b), 1, &tp.conv1);
    add_per_image(h1, linear(emb_act, W(b.temb.w), W(b.temb.b)));
    const Mat<T> n2 = layer_norm(h1.data, &tp.ln2);
    FeatureMap<T> out = conv3x3(FeatureMap<T>(x.grid, silu(n2)), W(b.conv2.w), W(b.conv2.b), 1, &tp.conv2);
    out.data += x.data;
    return out;
  }

  FeatureMap<T> block_backward(const FeatureMap<T>& dy, const BlockIdx& b, const DenoiserInput<T>& in,
                               const Mat<T>& emb_act, const BlockTape<T>& tp, std::vector<Mat<T>>& g,
                               Mat<T>& d_emb_act) const {
    const int C = dy.channels();
    const FeatureMap<T> d_a2 = conv3x3_backward(dy, W(b.conv2.w), tp.conv2, g[b.conv2.w], g[b.conv2.b]);
    const FeatureMap<T> d_h1(dy.grid, layer_norm_backward(silu_backward(d_a2.data, tp.ln2.y), tp.ln2));
    d_emb_act += linear_backward(add_per_image_backward(d_h1, static_cast<int>(emb_act.cols())), emb_act,
                                 W(b.temb.w), g[b.temb.w], g[b.temb.b]);
    const FeatureMap<T> d_a1 = conv3x3_backward(d_h1, W(b.conv1.w), tp.conv1, g[b.conv1.w], g[b.conv1.b]);
    const Mat<T> d_n1 = silu_backward(Mat<T>(d_a1.data.topRows(C)), tp.n1);
    FeatureMap<T> dx = dy;
    if (b.rcn()) {
      Mat<T> d_gb;
      dx.data += modulate_backward(d_n1, tp.mp.gamma_beta, tp.mod, d_gb);
      modulation_params_backward(d_gb, in.rays[b.level].data, tp.mp, head(b),
                                 ModulationHeadGrads<T>{&g[b.mod1.w], &g[b.mod1.b], &g[b.mod2.w], &g[b.mod2.b]});
    } else {
      dx.data += layer_norm_backward(d_n1, tp.ln1);
    }
    return dx;
  }

  const Parameters<T>& p_;
  NetworkConfig cfg_;
  LinearIdx time1_, time2_, src_[4], src_proj_, pose1_, pose2_, in_, out_;
  std::vector<BlockIdx> enc_, dec_;
  std::vector<AttnIdx> enc_attn_, dec_attn_;
  std::vector<LinearIdx> down_, up_;
  BlockIdx mid_;
  AttnIdx mid_attn_;
};

}  // namespace mvdiff::nn
