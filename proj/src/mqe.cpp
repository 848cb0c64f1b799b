#include "mqe_align/mqe.hpp"

#include <algorithm>
#include <numeric>

#include "mqe_align/error.hpp"

namespace mqe {

template <typename Real>
std::vector<Real> RoutingDecision<Real>::weight_values() const {
  auto d = weights.data();
  return {d.begin(), d.end()};
}

std::vector<std::size_t> top_indices(std::span<const double> weights, std::size_t g) {
  std::vector<std::size_t> idx(weights.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
  idx.resize(std::min(g, idx.size()));
  return idx;
}

namespace {

template <typename Real>
std::vector<std::size_t> select_experts(const Tensor<Real>& weights, RouterMode mode,
                                        std::size_t g) {
  const auto w = weights.data();
  std::vector<double> wd(w.begin(), w.end());
  const std::size_t take = mode == RouterMode::sparse ? g : wd.size();
  return top_indices(wd, take);
}

}  // namespace

template <typename Real>
RoutingDecision<Real> decision_from_weights(std::vector<Real> weights, RouterMode mode,
                                            std::size_t g) {
  if (weights.empty()) throw ConfigError("mqe: expert bank is empty");
  if (g < 1) throw ConfigError("mqe: top-g must be >= 1");
  RoutingDecision<Real> d;
  const std::size_t k = weights.size();
  d.weights = Tensor<Real>(Shape{1, k}, std::move(weights));
  d.mode = mode;
  d.selected = select_experts(d.weights, mode, g);
  return d;
}

template <typename Real>
void MixtureOfQueryExperts<Real>::describe(ParameterManifest& m, const MqeConfig& cfg,
                                           const QFormerConfig& qf) {
  cfg.validate();
  const auto tag = ModuleTag::mqe;
  for (std::size_t q = 0; q < cfg.experts; ++q) {
    m.add({expert_path(q), {qf.queries, qf.hidden}, tag, PeftKind::query_expert, false});
  }
  m.add({"mqe.router.fc1.weight", {cfg.router_in, cfg.router_hidden}, tag, PeftKind::router, false});
  m.add({"mqe.router.fc1.bias", {cfg.router_hidden}, tag, PeftKind::router, false});
  m.add({"mqe.router.fc2.weight", {cfg.router_hidden, cfg.experts}, tag, PeftKind::router, false});
  m.add({"mqe.router.fc2.bias", {cfg.experts}, tag, PeftKind::router, false});
}

template <typename Real>
MixtureOfQueryExperts<Real>::MixtureOfQueryExperts(const MqeConfig& cfg,
                                                   const ParameterStore<Real>& store)
    : cfg_(cfg) {
  cfg_.validate();
  for (std::size_t q = 0; q < cfg.experts; ++q) experts_.push_back(store.at(expert_path(q)));
  fc1_ = bind_linear(store, "mqe.router.fc1");
  fc2_ = bind_linear(store, "mqe.router.fc2");
}

template <typename Real>
RoutingDecision<Real> MixtureOfQueryExperts<Real>::route(const Tensor<Real>& hidden) const {
  if (cfg_.top < 1) throw ConfigError("mqe: top-g must be >= 1");
  if (hidden.rank() != 2 || hidden.cols() != cfg_.router_in) {
    throw DimensionError("route: hidden is " + shape_str(hidden.shape()) + ", router expects width " +
                         std::to_string(cfg_.router_in));
  }
  const std::size_t k = experts_.size();
  if (cfg_.mode == RouterMode::constant) {
    return decision_from_weights(std::vector<Real>(k, Real(1) / static_cast<Real>(k)),
                                 RouterMode::constant, k);
  }
  auto logits = fc2_(ops::gelu(fc1_(ops::mean_rows(hidden))));
  RoutingDecision<Real> d;
  d.weights = ops::softmax(logits, true);
  d.mode = cfg_.mode;
  d.selected = select_experts(d.weights, cfg_.mode, cfg_.top);
  return d;
}

template <typename Real>
Tensor<Real> MixtureOfQueryExperts<Real>::combine(const Tensor<Real>& y,
                                                  const RoutingDecision<Real>& decision,
                                                  const QFormer<Real>& qformer) const {
  if (experts_.empty()) throw ConfigError("mqe: expert bank is empty");
  if (decision.weights.numel() != experts_.size()) {
    throw DimensionError("mqe_forward: " + std::to_string(decision.weights.numel()) +
                         " weights for " + std::to_string(experts_.size()) + " experts");
  }
  struct Term {
    Real w;
    Tensor<Real> value;
  };
  std::vector<Term> terms;
  for (std::size_t q : decision.selected) {
    auto out = qformer(y, experts_.at(q));
    terms.push_back({decision.weights[q], ops::mul_scalar(out, ops::select(decision.weights, q))});
  }
  // Reduce in an order fixed by the terms themselves so relabelling experts
  // cannot change the rounding.
  std::stable_sort(terms.begin(), terms.end(), [](const Term& a, const Term& b) {
    if (a.w != b.w) return a.w > b.w;
    const auto da = a.value.data(), db = b.value.data();
    return std::lexicographical_compare(da.begin(), da.end(), db.begin(), db.end());
  });
  Tensor<Real> acc = terms.front().value;
  for (std::size_t i = 1; i < terms.size(); ++i) acc = ops::add(acc, terms[i].value);
  return acc;
}

template struct RoutingDecision<float>;
template struct RoutingDecision<double>;
template RoutingDecision<float> decision_from_weights(std::vector<float>, RouterMode, std::size_t);
template RoutingDecision<double> decision_from_weights(std::vector<double>, RouterMode, std::size_t);
template class MixtureOfQueryExperts<float>;
template class MixtureOfQueryExperts<double>;

}  // namespace mqe
