#include "muie/blocks.hpp"

namespace muie {

namespace {
constexpr double kNormEps = 1e-5;

template <typename Scalar>
Var<Scalar> depthwise3x3(const Var<Scalar>& x, const ConvVars<Scalar>& c) {
  return conv2d(x, c.weight, c.bias, 1, 1, static_cast<int>(x.shape().c));
}

template <typename Scalar>
Var<Scalar> pointwise(const Var<Scalar>& x, const ConvVars<Scalar>& c) {
  return conv2d(x, c.weight, c.bias, 1, 0, 1);
}

template <typename Scalar>
Var<Scalar> norm(const Var<Scalar>& x, const NormVars<Scalar>& n) {
  return layer_norm(x, n.gamma, n.beta, kNormEps);
}

}  // namespace

std::int64_t conv_macs(std::int64_t cin, std::int64_t cout, int k, int groups, std::int64_t pix) {
  return static_cast<std::int64_t>(k) * k * cin / groups * cout * pix;
}

template <typename Scalar>
VSSWeights<Scalar> VSSWeights<Scalar>::bind(const ParamSet<Scalar>& p, const std::string& prefix) {
  VSSWeights w;
  w.ln_in = NormVars<Scalar>::bind(p, prefix + ".ln_in");
  w.ln_scan = NormVars<Scalar>::bind(p, prefix + ".ln_scan");
  w.ln_out = NormVars<Scalar>::bind(p, prefix + ".ln_out");
  w.proj_b1 = ConvVars<Scalar>::bind(p, prefix + ".proj_b1");
  w.proj_b2 = ConvVars<Scalar>::bind(p, prefix + ".proj_b2");
  w.dwconv = ConvVars<Scalar>::bind(p, prefix + ".dwconv");
  w.proj_out = ConvVars<Scalar>::bind(p, prefix + ".proj_out");
  w.scan = bind_ss2d(p, prefix + ".scan");
  return w;
}

template <typename Scalar>
DIBWeights<Scalar> DIBWeights<Scalar>::bind(const ParamSet<Scalar>& p, const std::string& prefix) {
  return {ConvVars<Scalar>::bind(p, prefix + ".pw_spatial"), ConvVars<Scalar>::bind(p, prefix + ".pw_channel"),
          ConvVars<Scalar>::bind(p, prefix + ".dw_local")};
}

template <typename Scalar>
SGFNWeights<Scalar> SGFNWeights<Scalar>::bind(const ParamSet<Scalar>& p, const std::string& prefix) {
  return {NormVars<Scalar>::bind(p, prefix + ".ln"), ConvVars<Scalar>::bind(p, prefix + ".pw_expand"),
          ConvVars<Scalar>::bind(p, prefix + ".dw_gate"), ConvVars<Scalar>::bind(p, prefix + ".pw_project")};
}

template <typename Scalar>
MambaBlockWeights<Scalar> MambaBlockWeights<Scalar>::bind(const ParamSet<Scalar>& p, const std::string& prefix) {
  return {VSSWeights<Scalar>::bind(p, prefix + ".vss"), DIBWeights<Scalar>::bind(p, prefix + ".dib"),
          SGFNWeights<Scalar>::bind(p, prefix + ".sgfn")};
}

template <typename Scalar>
void add_block_weights(WeightStore<Scalar>& store, const std::string& prefix, const BlockDims& dims, Rng& rng) {
  const std::int64_t c = dims.channels, e = dims.inner(), r = dims.hidden();
  const std::string vss = prefix + ".vss";
  add_layer_norm(store, vss + ".ln_in", c);
  add_conv(store, vss + ".proj_b1", c, e, 1, 1, rng);
  add_conv(store, vss + ".proj_b2", c, e, 1, 1, rng);
  add_conv(store, vss + ".dwconv", e, e, 3, static_cast<int>(e), rng);
  add_ss2d_params(store, vss + ".scan", e, dims.n_state, rng);
  add_layer_norm(store, vss + ".ln_scan", e);
  add_layer_norm(store, vss + ".ln_out", e);
  add_conv(store, vss + ".proj_out", e, c, 1, 1, rng);

  const std::string dib = prefix + ".dib";
  add_conv(store, dib + ".pw_spatial", c, 1, 1, 1, rng);
  add_conv(store, dib + ".pw_channel", c, c, 1, 1, rng);
  add_conv(store, dib + ".dw_local", c, c, 3, static_cast<int>(c), rng);

  const std::string ffn = prefix + ".sgfn";
  add_layer_norm(store, ffn + ".ln", c);
  add_conv(store, ffn + ".pw_expand", c, 2 * r, 1, 1, rng);
  add_conv(store, ffn + ".dw_gate", r, r, 3, static_cast<int>(r), rng);
  add_conv(store, ffn + ".pw_project", r, c, 1, 1, rng);
}

template <typename Scalar>
Var<Scalar> vss_block(const Var<Scalar>& x, const VSSWeights<Scalar>& w) {
  if (x.shape().c != w.proj_b1.weight.shape().c)
    throw ShapeError("vss_block: input " + x.shape().str() + " does not match weights");
  const Var<Scalar> normed = norm(x, w.ln_in);
  const Var<Scalar> gate = pointwise(normed, w.proj_b1);
  Var<Scalar> branch = activation(depthwise3x3(pointwise(normed, w.proj_b2), w.dwconv), Activation::Silu);
  branch = norm(ss2d<Scalar>(branch, w.scan), w.ln_scan);
  return add(x, pointwise(norm(mul(branch, gate), w.ln_out), w.proj_out));
}

template <typename Scalar>
Var<Scalar> dib_spatial_map(const Var<Scalar>& map_vss, const DIBWeights<Scalar>& w) {
  return activation(activation(pointwise(map_vss, w.pw_spatial), Activation::Gelu), Activation::Sigmoid);
}

template <typename Scalar>
Var<Scalar> dib_channel_map(const Var<Scalar>& map_local, const DIBWeights<Scalar>& w) {
  return activation(activation(pointwise(global_avg_pool(map_local), w.pw_channel), Activation::Gelu),
                    Activation::Sigmoid);
}

template <typename Scalar>
Var<Scalar> dib(const Var<Scalar>& map_vss, const Var<Scalar>& map_local, const DIBWeights<Scalar>& w) {
  if (map_vss.shape() != map_local.shape())
    throw ShapeError("dib: " + map_vss.shape().str() + " vs " + map_local.shape().str());
  const Var<Scalar> spatial = dib_spatial_map(map_vss, w);
  const Var<Scalar> channel = dib_channel_map(map_local, w);
  return add(mul(spatial, map_local), mul(channel, map_vss));
}

template <typename Scalar>
Var<Scalar> di_vss_block(const Var<Scalar>& x, const VSSWeights<Scalar>& vss, const DIBWeights<Scalar>& dw) {
  const Var<Scalar> map_vss = vss_block(x, vss);
  const Var<Scalar> map_local = depthwise3x3(x, dw.dw_local);
  return dib(map_vss, map_local, dw);
}

template <typename Scalar>
Var<Scalar> sgfn(const Var<Scalar>& x, const SGFNWeights<Scalar>& w) {
  const std::int64_t expanded = w.pw_expand.weight.shape().n;
  if (expanded % 2 != 0) throw ShapeError("sgfn: odd expansion width " + std::to_string(expanded));
  const Var<Scalar> h = pointwise(norm(x, w.ln), w.pw_expand);
  const Var<Scalar> gate = slice_channels(h, 0, expanded / 2);
  const Var<Scalar> value = slice_channels(h, expanded / 2, expanded / 2);
  const Var<Scalar> mixed = mul(activation(depthwise3x3(gate, w.dw_gate), Activation::Gelu), value);
  return add(x, pointwise(mixed, w.pw_project));
}

template <typename Scalar>
Var<Scalar> efficient_mamba_block(const Var<Scalar>& x, const MambaBlockWeights<Scalar>& w) {
  return sgfn(di_vss_block(x, w.vss, w.dib), w.sgfn);
}

std::int64_t block_macs(const BlockDims& dims, std::int64_t h, std::int64_t w) {
  const std::int64_t pix = h * w, c = dims.channels, e = dims.inner(), r = dims.hidden();
  std::int64_t macs = 0;
  // VSS
  macs += 2 * conv_macs(c, e, 1, 1, pix);
  macs += conv_macs(e, e, 3, static_cast<int>(e), pix);
  macs += 4 * scan_direction_macs(pix, e, dims.n_state);
  macs += conv_macs(e, c, 1, 1, pix);
  // DIB
  macs += conv_macs(c, c, 3, static_cast<int>(c), pix);
  macs += conv_macs(c, 1, 1, 1, pix);
  macs += conv_macs(c, c, 1, 1, 1);
  // SGFN
  macs += conv_macs(c, 2 * r, 1, 1, pix);
  macs += conv_macs(r, r, 3, static_cast<int>(r), pix);
  macs += conv_macs(r, c, 1, 1, pix);
  return macs;
}

#define MUIE_INSTANTIATE_BLOCKS(T)                                                                  \
  template struct VSSWeights<T>;                                                                    \
  template struct DIBWeights<T>;                                                                    \
  template struct SGFNWeights<T>;                                                                   \
  template struct MambaBlockWeights<T>;                                                             \
  template void add_block_weights(WeightStore<T>&, const std::string&, const BlockDims&, Rng&);     \
  template Var<T> vss_block(const Var<T>&, const VSSWeights<T>&);                                   \
  template Var<T> dib_spatial_map(const Var<T>&, const DIBWeights<T>&);                             \
  template Var<T> dib_channel_map(const Var<T>&, const DIBWeights<T>&);                             \
  template Var<T> dib(const Var<T>&, const Var<T>&, const DIBWeights<T>&);                          \
  template Var<T> di_vss_block(const Var<T>&, const VSSWeights<T>&, const DIBWeights<T>&);          \
  template Var<T> sgfn(const Var<T>&, const SGFNWeights<T>&);                                       \
  template Var<T> efficient_mamba_block(const Var<T>&, const MambaBlockWeights<T>&);

MUIE_INSTANTIATE_BLOCKS(float)
MUIE_INSTANTIATE_BLOCKS(double)

}  // namespace muie
