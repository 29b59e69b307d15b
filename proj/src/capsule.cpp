#include "capsvl/capsule.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "capsvl/errors.hpp"

namespace capsvl::capsule {

namespace {

bool all_finite(const ag::Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

void ImageEmbedding::validate() const {
  if (!grid.defined() || grid.rank() != 4) throw InputError("image embedding must be [B, h, w, d]");
  for (std::size_t i = 0; i < 4; ++i)
    if (grid.shape()[i] == 0) throw InputError("image embedding has an empty dimension");
  if (!all_finite(grid)) throw InputError("image embedding contains non-finite values");
}

ag::Tensor CapsuleTensor::packed() const {
  auto blocks = ag::concat({poses, activations}, -1);
  return ag::reshape(blocks, {batch(), cells(), packed_dim()});
}

void RoutingConfig::validate() const {
  if (iterations < 1) throw ConfigError("routing iterations must be >= 1");
  if (inverse_temperature.size() != iterations)
    throw ConfigError("routing schedule has " + std::to_string(inverse_temperature.size()) + " entries for " +
                      std::to_string(iterations) + " iterations");
  for (double l : inverse_temperature)
    if (!(l > 0.0)) throw ConfigError("routing inverse temperatures must be positive");
  if (!(epsilon > 0.0)) throw ConfigError("routing epsilon must be positive");
}

CapsuleMask mask_from_logits(const ag::Tensor& logits, int source_layer) {
  return CapsuleMask{ag::softmax(logits, -1), source_layer};
}

PrimaryCapsules make_primary_capsules(const ImageEmbedding& embedding, const nn::Linear& conv, std::size_t kernel,
                                      std::size_t capsules, std::size_t pose_size) {
  embedding.validate();
  const std::size_t kk = pose_size * pose_size;
  const std::size_t dp = packed_dim(capsules, pose_size);
  if (conv.out_features() != dp)
    throw ConfigError("primary capsule conv emits " + std::to_string(conv.out_features()) + " channels, expected " +
                      std::to_string(dp));
  const std::size_t in = kernel * kernel * embedding.model_dim();
  if (conv.in_features() != in)
    throw ConfigError("primary capsule conv expects " + std::to_string(conv.in_features()) + " inputs, got " +
                      std::to_string(in));
  const auto x = kernel > 1 ? ag::unfold2d(embedding.grid, kernel) : embedding.grid;
  const auto y = ag::reshape(conv(x), {embedding.batch(), embedding.height(), embedding.width(), capsules, kk + 1});
  PrimaryCapsules out;
  out.poses = ag::slice(y, -1, 0, kk);
  out.activations = ag::sigmoid(ag::slice(y, -1, kk, 1));
  out.pose_size = pose_size;
  return out;
}

CapsuleGrid em_route(const PrimaryCapsules& primary, const RoutingParams& params, const RoutingConfig& cfg,
                     RoutingTrace* trace) {
  cfg.validate();
  const std::size_t B = primary.batch(), h = primary.height(), w = primary.width();
  const std::size_t cin = primary.capsules(), K = primary.pose_size, kk = K * K;
  const std::size_t cout = params.transforms.dim(1);
  if (params.transforms.rank() != 4 || params.transforms.dim(0) != cin || params.transforms.dim(2) != K ||
      params.transforms.dim(3) != K)
    throw ConfigError("routing transforms " + ag::shape_str(params.transforms.shape()) + " do not fit " +
                      std::to_string(cin) + " capsules with " + std::to_string(K) + "x" + std::to_string(K) +
                      " poses");
  if (cout != cin) throw ConfigError("routing requires equal capsule counts in both layers");
  if (params.beta_a.numel() != cout || params.beta_u.numel() != cout)
    throw ConfigError("routing cost offsets must have one entry per output capsule");

  const std::size_t N = B * h * w;
  const auto votes = ag::capsule_votes(ag::reshape(primary.poses, {N, cin, K, K}), params.transforms);
  const auto a_in = ag::reshape(primary.activations, {N, cin, 1, 1});
  const auto beta_a = ag::reshape(params.beta_a, {1, 1, cout, 1});
  const auto beta_u = ag::reshape(params.beta_u, {1, 1, cout, 1});
  const double eps = cfg.epsilon;
  const double log_2pi = std::log(2.0 * std::numbers::pi);

  auto R = ag::Tensor::full({N, cin, cout, 1}, 1.0 / static_cast<double>(cout));
  if (trace) {
    trace->coefficients.clear();
    trace->cells = N;
    trace->inputs = cin;
    trace->outputs = cout;
    trace->coefficients.emplace_back(R.data().begin(), R.data().end());
  }

  ag::Tensor mu, logit;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const double lambda = cfg.inverse_temperature[it];
    // M-step
    const auto Ra = R * a_in;
    const auto sum_r = ag::sum(Ra, 1, true);
    const auto denom = ag::clamp_min(sum_r, eps);
    mu = ag::sum(Ra * votes, 1, true) / denom;
    const auto diff_sq = ag::square(votes - mu);
    const auto var = ag::add_scalar(ag::sum(Ra * diff_sq, 1, true) / denom, eps);
    const auto log_var = ag::log(var);
    const auto cost = ag::sum((beta_u + 0.5 * log_var) * sum_r, 3, true);
    logit = lambda * (beta_a - cost);
    if (!all_finite(mu) || !all_finite(var) || !all_finite(logit))
      throw NumericalError("em_route: non-finite value in M-step at iteration " + std::to_string(it + 1));
    if (it + 1 == cfg.iterations) break;
    // E-step
    const auto log_p = ag::sum(-0.5 * (diff_sq / var + ag::add_scalar(log_var, log_2pi)), 3, true);
    R = ag::softmax(ag::log_sigmoid(logit) + log_p, 2);
    if (!all_finite(R))
      throw NumericalError("em_route: non-finite value in E-step at iteration " + std::to_string(it + 1));
    if (trace) trace->coefficients.emplace_back(R.data().begin(), R.data().end());
  }

  CapsuleGrid out;
  out.poses = ag::reshape(mu, {B, h, w, cout, kk});
  out.activations = ag::reshape(ag::sigmoid(logit), {B, h, w, cout, 1});
  out.pose_size = K;
  return out;
}

CapsuleGrid select_capsules(const CapsuleGrid& grid, const CapsuleMask& mask) {
  const std::size_t B = grid.batch(), C = grid.capsules();
  if (mask.probabilities.rank() != 2 || mask.probabilities.dim(0) != B || mask.probabilities.dim(1) != C)
    throw ConfigError("capsule mask " + ag::shape_str(mask.probabilities.shape()) + " does not match " +
                      std::to_string(B) + " x " + std::to_string(C) + " capsules");
  const auto m = ag::reshape(mask.probabilities, {B, 1, 1, C, 1});
  CapsuleGrid out;
  out.poses = grid.poses * m;
  out.activations = grid.activations * m;
  out.pose_size = grid.pose_size;
  return out;
}

ag::Tensor upsample_tokens(const CapsuleGrid& selected, const nn::Linear& upsampler) {
  if (upsampler.in_features() != selected.packed_dim())
    throw ConfigError("upsampler expects " + std::to_string(upsampler.in_features()) + " inputs, capsules pack " +
                      std::to_string(selected.packed_dim()));
  return upsampler(selected.packed());
}

VisualTokenSequence flatten_and_upsample(const CapsuleGrid& selected, const nn::Linear& upsampler,
                                         const ag::Tensor& img_token, const ag::Tensor& positions) {
  const std::size_t B = selected.batch(), n = selected.cells(), d = upsampler.out_features();
  if (positions.rank() != 2 || positions.dim(0) != n + 1 || positions.dim(1) != d)
    throw ConfigError("position table " + ag::shape_str(positions.shape()) + " does not fit " +
                      std::to_string(n + 1) + " visual tokens");
  if (img_token.numel() != d) throw ConfigError("[IMG] token size mismatch");
  const auto cells = upsample_tokens(selected, upsampler);
  const auto img = ag::expand(ag::reshape(img_token, {1, 1, d}), {B, 1, d});
  return VisualTokenSequence{ag::add(ag::concat({img, cells}, 1), positions)};
}

CapsuleEncoder::CapsuleEncoder(nn::ParameterStore& store, std::size_t model_dim, std::size_t capsules,
                               std::size_t pose_size, std::size_t kernel, RoutingConfig routing)
    : capsules_(capsules), pose_size_(pose_size), kernel_(kernel), routing_(std::move(routing)) {
  routing_.validate();
  if (capsules == 0 || pose_size == 0) throw ConfigError("capsule count and pose size must be positive");
  if (kernel % 2 == 0) throw ConfigError("primary capsule kernel must be odd");
  conv_ = nn::Linear(store, "capsule.primary", kernel * kernel * model_dim, packed_dim(capsules, pose_size),
                     nn::ParamGroup::Capsule, nn::fan_in_std(kernel * kernel * model_dim));
  params_.transforms = store.normal("capsule.routing.transforms", {capsules, capsules, pose_size, pose_size},
                                    1.0 / std::sqrt(static_cast<double>(pose_size)), nn::ParamGroup::Capsule);
  params_.beta_a = store.constant("capsule.routing.beta_a", {capsules}, 0.0, nn::ParamGroup::Capsule);
  params_.beta_u = store.constant("capsule.routing.beta_u", {capsules}, 0.0, nn::ParamGroup::Capsule);
}

CapsuleGrid CapsuleEncoder::encode(const ImageEmbedding& embedding, RoutingTrace* trace) const {
  const auto primary = make_primary_capsules(embedding, conv_, kernel_, capsules_, pose_size_);
  ++routing_calls_;
  return em_route(primary, params_, routing_, trace);
}

}  // namespace capsvl::capsule
