#include "mqe_align/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mqe_align/dataset.hpp"
#include "mqe_align/model.hpp"
#include "mqe_align/rng.hpp"

namespace mqe {

bool GradcheckReport::pass() const {
  if (!unselected_zero) return false;
  return std::all_of(rows.begin(), rows.end(), [](const GradcheckRow& r) { return r.pass; });
}

namespace {

struct Block {
  std::string name;
  std::vector<std::string> paths;
};

}  // namespace

GradcheckReport run_gradcheck(const Config& base, const GradcheckOptions& opts) {
  Config cfg = base;
  cfg.set("seed", std::to_string(opts.seed));
  cfg.set("mqe.router", "sparse");
  auto mc = ModelConfig::from_config(cfg);
  AlignmentModel<double> model(mc);
  auto& manifest = model.manifest();
  auto& store = model.store();

  Rng rng(derive_seed(opts.seed, "gradcheck"));
  for (const auto& e : manifest.entries()) {
    if (e.kind == PeftKind::lora_B) {
      for (auto& v : store.at(e.path).data()) v = 0.05 * rng.normal();
    }
    if (e.kind == PeftKind::norm) {
      for (auto& v : store.at(e.path).data()) v += 0.1 * rng.normal();
    }
  }

  ObjectRecord obj{"", "cone", "red", 2, ""};
  obj.caption = brief_caption(obj);
  const auto cloud = sample_object(obj, static_cast<std::size_t>(cfg.integer("data.points")), rng);
  const auto x = model.encode(cloud);

  // Finite differences are only meaningful away from a change in the top-g
  // selection, so redraw the router's output layer until the g-th and
  // (g+1)-th weights are well apart.
  const std::size_t k = mc.mqe.experts, g = std::min(mc.mqe.top, k);
  for (int attempt = 0; g < k; ++attempt) {
    for (auto& v : store.at("mqe.router.fc2.weight").data()) v = rng.normal();
    for (auto& v : store.at("mqe.router.fc2.bias").data()) v = 0.5 * rng.normal();
    NoGradGuard guard;
    auto w = model.experts().route(model.projection()(x).hidden).weight_values();
    std::sort(w.begin(), w.end(), std::greater<>());
    if (w[g - 1] - w[g] > 1e-2 || attempt == 100) break;
  }
  const auto seq = build_sequence(mc.qformer.queries, {{"What is this?", obj.caption},
                                                       {"What color is it?", obj.color}});

  std::vector<Block> blocks{{"pc_projection", {}},  {"modality_projector", {}},
                            {"qformer_peft", {}},   {"expert_queries", {}},
                            {"router", {}},         {"lm_peft", {}},
                            {"embeddings", {"lm.tok_embed", "lm.pos_embed"}}};
  for (const auto& e : manifest.entries()) {
    switch (e.module) {
      case ModuleTag::pc_projection: blocks[0].paths.push_back(e.path); break;
      case ModuleTag::modality_projector: blocks[1].paths.push_back(e.path); break;
      case ModuleTag::qformer_peft: blocks[2].paths.push_back(e.path); break;
      case ModuleTag::mqe:
        (e.kind == PeftKind::query_expert ? blocks[3] : blocks[4]).paths.push_back(e.path);
        break;
      case ModuleTag::lm_peft: blocks[5].paths.push_back(e.path); break;
      default: break;
    }
  }
  for (const auto& b : blocks) {
    for (const auto& p : b.paths) store.at(p).set_requires_grad(true);
  }

  auto loss = model.sequence_loss(x, seq, true);
  loss.backward();
  const auto decision = model.experts().route(model.projection()(x).hidden);
  std::set<std::size_t> selected(decision.selected.begin(), decision.selected.end());

  GradcheckReport report;
  report.tolerance = opts.tolerance;
  for (std::size_t q = 0; q < model.experts().experts(); ++q) {
    if (selected.count(q)) continue;
    const auto path = MixtureOfQueryExperts<double>::expert_path(q);
    report.unselected_experts.push_back(path);
    const auto& t = store.at(path);
    if (t.has_grad()) {
      for (double g : t.grad()) {
        if (g != 0.0) report.unselected_zero = false;
      }
    }
  }

  // Rows of the embedding tables that the sample actually touches.
  std::vector<std::size_t> used_tokens, used_positions;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    used_positions.push_back(i);
    if (seq.ids[i] >= 0) used_tokens.push_back(static_cast<std::size_t>(seq.ids[i]));
  }
  std::sort(used_tokens.begin(), used_tokens.end());
  used_tokens.erase(std::unique(used_tokens.begin(), used_tokens.end()), used_tokens.end());

  auto eval = [&] {
    NoGradGuard guard;
    return model.sequence_loss(x, seq, true).item();
  };

  for (const auto& b : blocks) {
    GradcheckRow row;
    row.block = b.name;
    double diff_sq = 0, a_sq = 0, n_sq = 0;
    for (const auto& path : b.paths) {
      if (b.name == "expert_queries") {
        const auto q = static_cast<std::size_t>(std::stoul(path.substr(path.rfind('.') + 1)));
        if (!selected.count(q)) continue;
      }
      auto& t = store.at(path);
      ++row.tensors;
      // Coordinates with the largest analytic gradient: far above the
      // round-off floor of the loss difference.
      std::vector<std::size_t> candidates;
      if (path == "lm.tok_embed" || path == "lm.pos_embed") {
        for (std::size_t r : path == "lm.tok_embed" ? used_tokens : used_positions) {
          for (std::size_t c = 0; c < t.cols(); ++c) candidates.push_back(r * t.cols() + c);
        }
      } else {
        candidates.resize(t.numel());
        std::iota(candidates.begin(), candidates.end(), 0);
      }
      const auto grad_at = [&](std::size_t i) { return t.has_grad() ? std::abs(t.grad()[i]) : 0.0; };
      const std::size_t take = std::min(opts.coords_per_tensor, candidates.size());
      std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                        candidates.end(), [&](std::size_t a, std::size_t b) {
                          const double ga = grad_at(a), gb = grad_at(b);
                          return ga != gb ? ga > gb : a < b;
                        });
      const std::vector<std::size_t> coords(candidates.begin(),
                                            candidates.begin() + static_cast<std::ptrdiff_t>(take));
      for (std::size_t i : coords) {
        const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
        const double saved = t.data()[i];
        t.data()[i] = saved + opts.step;
        const double up = eval();
        t.data()[i] = saved - opts.step;
        const double down = eval();
        t.data()[i] = saved;
        const double numeric = (up - down) / (2 * opts.step);
        diff_sq += (analytic - numeric) * (analytic - numeric);
        a_sq += analytic * analytic;
        n_sq += numeric * numeric;
        const double scale = std::max(std::abs(analytic), std::abs(numeric));
        if (scale > 1e-10) {
          row.max_coord_error = std::max(row.max_coord_error, std::abs(analytic - numeric) / scale);
        }
        ++row.coords;
      }
    }
    const double denom = std::sqrt(std::max(a_sq, n_sq));
    row.rel_error = denom > 0 ? std::sqrt(diff_sq) / denom : 0.0;
    row.pass = row.coords > 0 && denom > 0 && row.rel_error < opts.tolerance;
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace mqe
