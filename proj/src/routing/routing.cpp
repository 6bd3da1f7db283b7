#include "trelm/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trelm/errors.hpp"

namespace trelm {

namespace {

std::vector<std::size_t> target_positions(const std::vector<AssessTarget>& targets) {
  std::vector<std::size_t> out;
  for (const auto& t : targets) out.push_back(t.position);
  return out;
}

// Sum over targets of p(gold | hidden row) under the full-vocabulary softmax of
// the knowledge-matching scores.
Var gold_probability_sum(const TransformerModel& model, ParamBinding& b, Var hidden,
                         const std::vector<AssessTarget>& targets) {
  Tape& tape = b.tape();
  const auto rows = target_positions(targets);
  Var h_d = model.knowledge_vectors(b, ops::select_rows(hidden, rows));
  Var probs = ops::softmax_rows(model.match_scores_all(b, h_d));
  const std::size_t v = model.config().vocab_size;
  Tensor onehot({targets.size(), v});
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t].gold >= v) throw ValidationError("gold token outside the vocabulary");
    onehot.at(t, targets[t].gold) = 1.0;
  }
  return ops::sum(ops::mul(probs, tape.constant(std::move(onehot))));
}

std::size_t count_targets(std::span<const AssessSequence> batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.targets.size();
  return n;
}

}  // namespace

double correct_response_prob(const TransformerModel& model, std::span<const AssessSequence> batch,
                             std::span<const Intervention> interventions) {
  const std::size_t n_targets = count_targets(batch);
  if (n_targets == 0) throw ValidationError("correct_response_prob: batch has no gold targets");
  double total = 0.0;
  for (const auto& seq : batch) {
    if (seq.targets.empty()) continue;
    Tape tape(GradMode::disabled);
    ParamBinding b(tape, model);
    EncoderOutput enc = model.encode(b, tape.constant(seq.input), interventions);
    total += tape.value(gold_probability_sum(model, b, enc.hidden, seq.targets)).item();
  }
  return total / static_cast<double>(n_targets);
}

// ---------------------------------------------------------------------------

ModelLayerSurface::ModelLayerSurface(const TransformerModel& model,
                                     std::span<const AssessSequence> batch, std::size_t layer)
    : model_(model), layer_(layer) {
  if (layer >= model.config().n_layers) throw ValidationError("attribution layer out of range");
  const std::size_t f = model.config().ffn_dim;
  for (const auto& seq : batch) {
    if (seq.targets.empty()) continue;
    Tape tape(GradMode::disabled);
    ParamBinding b(tape, model);
    EncoderOutput enc = model.encode(b, tape.constant(seq.input));
    Cached c{enc.ffn_residual[layer], tape.value(enc.activations[layer]), seq.targets, n_targets_};
    for (const auto& t : seq.targets) {
      if (t.position >= c.activations.rows()) throw ValidationError("target position out of range");
    }
    n_targets_ += seq.targets.size();
    cache_.push_back(std::move(c));
  }
  if (n_targets_ == 0) throw ValidationError("attribution batch has no gold targets");
  baseline_ = Tensor({n_targets_ * f});
  for (const auto& c : cache_) {
    for (std::size_t t = 0; t < c.targets.size(); ++t) {
      const auto row = c.activations.row(c.targets[t].position);
      std::copy(row.begin(), row.end(), baseline_.data().begin() + static_cast<std::ptrdiff_t>((c.first_target + t) * f));
    }
  }
}

double ModelLayerSurface::value(const Tensor& v) const { return evaluate(v, nullptr); }

double ModelLayerSurface::value_and_grad(const Tensor& v, Tensor& grad) const {
  return evaluate(v, &grad);
}

double ModelLayerSurface::evaluate(const Tensor& v, Tensor* grad) const {
  if (v.size() != baseline_.size()) throw ShapeError("surface input width mismatch");
  const std::size_t f = model_.config().ffn_dim;
  if (grad) *grad = Tensor({v.size()});
  double total = 0.0;
  for (const auto& c : cache_) {
    Tensor act = c.activations;
    for (std::size_t t = 0; t < c.targets.size(); ++t) {
      const double* src = v.raw() + (c.first_target + t) * f;
      std::copy(src, src + f, act.row(c.targets[t].position).begin());
    }
    Tape tape(grad ? GradMode::enabled : GradMode::disabled);
    ParamBinding b(tape, model_);
    Var leaf = grad ? tape.leaf(std::move(act)) : tape.constant(std::move(act));
    Var hidden = model_.resume_from_ffn(b, layer_, c.residual, leaf);
    Var p = gold_probability_sum(model_, b, hidden, c.targets);
    total += tape.value(p).item();
    if (grad) {
      tape.backward(p);
      const Tensor& g = tape.grad(leaf);
      for (std::size_t t = 0; t < c.targets.size(); ++t) {
        const auto row = g.row(c.targets[t].position);
        std::copy(row.begin(), row.end(), grad->data().begin() + static_cast<std::ptrdiff_t>((c.first_target + t) * f));
      }
    }
  }
  const double scale = 1.0 / static_cast<double>(n_targets_);
  if (grad) {
    for (double& x : grad->data()) x *= scale;
  }
  return total * scale;
}

// ---------------------------------------------------------------------------

double neuron_attribution(const ResponseSurface& surface, std::size_t i, std::size_t m) {
  if (m < 1) throw ValidationError("Riemann steps m must be >= 1");
  const Tensor& base = surface.baseline();
  if (i >= base.size()) throw ValidationError("neuron index out of range");
  const double vbar = base[i];
  if (vbar == 0.0) return 0.0;
  Tensor v = base, g;
  double sum = 0.0;
  for (std::size_t k = 1; k <= m; ++k) {
    v[i] = static_cast<double>(k) / static_cast<double>(m) * vbar;
    surface.value_and_grad(v, g);
    sum += g[i];
  }
  return vbar / static_cast<double>(m) * sum;
}

Tensor layer_attribution(const ResponseSurface& surface, std::size_t m, Execution execution) {
  if (m < 1) throw ValidationError("Riemann steps m must be >= 1");
  const Tensor& base = surface.baseline();
  const std::size_t w = base.size();
  std::vector<Tensor> grads(m);
  auto step = [&](std::size_t k) {
    const double alpha = static_cast<double>(k + 1) / static_cast<double>(m);
    Tensor v = base;
    for (double& x : v.data()) x *= alpha;
    surface.value_and_grad(v, grads[k]);
  };
  const auto n = static_cast<std::ptrdiff_t>(m);
  if (execution == Execution::parallel) {
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t k = 0; k < n; ++k) step(static_cast<std::size_t>(k));
  } else {
    for (std::ptrdiff_t k = 0; k < n; ++k) step(static_cast<std::size_t>(k));
  }
  Tensor attr({w});
  for (std::size_t i = 0; i < w; ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < m; ++k) sum += grads[k][i];
    attr[i] = base[i] / static_cast<double>(m) * sum;
  }
  return attr;
}

AttributionTable attribute(const TransformerModel& model, std::span<const AssessSequence> batch,
                           std::size_t m, Execution execution) {
  const std::size_t f = model.config().ffn_dim;
  AttributionTable table;
  table.riemann_steps = m;
  for (std::size_t l = 0; l < model.config().n_layers; ++l) {
    ModelLayerSurface surface(model, batch, l);
    const Tensor per_coord = layer_attribution(surface, m, execution);
    const std::size_t T = surface.n_targets();
    Tensor score({f}), base({f});
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < f; ++i) {
        score[i] += per_coord[t * f + i];
        base[i] += surface.baseline()[t * f + i];
      }
    }
    for (double& x : base.data()) x /= static_cast<double>(T);
    require_finite(score, "attribution scores");
    table.score.push_back(std::move(score));
    table.baseline.push_back(std::move(base));
  }
  return table;
}

void write_attribution_header(std::ostream& out) {
  out << "step,layer,neuron,baseline_activation,attr_score,selected\n";
}

void write_attribution_rows(std::ostream& out, std::uint64_t step, const AttributionTable& table,
                            const KnowledgePath* path) {
  char buf[64];
  for (std::size_t l = 0; l < table.score.size(); ++l) {
    std::vector<char> sel(table.score[l].size(), 0);
    if (path && l < path->layers.size()) {
      for (std::size_t j : path->layers[l].inter) sel.at(j) = 1;
    }
    for (std::size_t i = 0; i < table.score[l].size(); ++i) {
      out << step << ',' << l << ',' << i << ',';
      std::snprintf(buf, sizeof buf, "%.17g", table.baseline[l][i]);
      out << buf << ',';
      std::snprintf(buf, sizeof buf, "%.17g", table.score[l][i]);
      out << buf << ',' << int(sel[i]) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------

bool KnowledgePath::operator==(const KnowledgePath& o) const {
  if (layers.size() != o.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].input != o.layers[l].input || layers[l].inter != o.layers[l].inter ||
        layers[l].output != o.layers[l].output) {
      return false;
    }
  }
  return true;
}

std::vector<std::size_t> top_fraction(std::span<const double> scores, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ValidationError("selection fraction p must be in (0, 1]");
  if (scores.empty()) throw ValidationError("cannot select from an empty score list");
  const double want = std::ceil(p * static_cast<double>(scores.size()) - 1e-9);
  const auto k = std::min(scores.size(), static_cast<std::size_t>(std::max(1.0, want)));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

KnowledgePath select_paths(const AttributionTable& table, double p, const TransformerModel& model) {
  if (table.score.empty()) throw ValidationError("empty attribution table");
  const auto& cfg = model.config();
  if (table.score.size() != cfg.n_layers) throw ValidationError("attribution table / model layer mismatch");
  const std::size_t d = cfg.hidden_dim, f = cfg.ffn_dim;
  KnowledgePath path;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (table.score[l].size() != f) throw ValidationError("attribution table width != ffn_dim");
    LayerPath lp;
    lp.inter = top_fraction(table.score[l].data(), p);
    const Tensor& w_in = model.params()[model.layer(l).ffn_in_weight];
    const Tensor& w_out = model.params()[model.layer(l).ffn_out_weight];
    for (std::size_t k = 0; k < d; ++k) {
      bool in = false, out = false;
      for (std::size_t j : lp.inter) {
        in = in || w_in.at(k, j) != 0.0;
        out = out || w_out.at(j, k) != 0.0;
      }
      if (in) lp.input.push_back(k);
      if (out) lp.output.push_back(k);
    }
    path.layers.push_back(std::move(lp));
  }
  return path;
}

double ffn_coverage(const ParamMask& mask, const TransformerModel& model) {
  std::size_t on = 0, total = 0;
  for (ParamId id : model.ffn_param_ids()) {
    on += mask.count_true(id);
    total += model.params()[id].size();
  }
  return total == 0 ? 0.0 : static_cast<double>(on) / static_cast<double>(total);
}

GradientMask build_mask(const KnowledgePath& path, const TransformerModel& model) {
  const auto& cfg = model.config();
  const std::size_t d = cfg.hidden_dim, f = cfg.ffn_dim;
  if (!path.layers.empty() && path.layers.size() != cfg.n_layers) {
    throw ValidationError("knowledge path / model layer mismatch");
  }
  GradientMask gm{ParamMask(model.shapes(), false), 0.0};
  for (std::size_t l = 0; l < path.layers.size(); ++l) {
    const auto& ids = model.layer(l);
    for (std::size_t j : path.layers[l].inter) {
      if (j >= f) throw ValidationError("path neuron " + std::to_string(j) + " >= ffn_dim");
      for (std::size_t k = 0; k < d; ++k) {
        gm.mask.set(ids.ffn_in_weight, k * f + j, true);
        gm.mask.set(ids.ffn_out_weight, j * d + k, true);
      }
      gm.mask.set(ids.ffn_in_bias, j, true);
    }
  }
  gm.coverage_fraction = ffn_coverage(gm.mask, model);
  return gm;
}

GradientMask full_mask(const TransformerModel& model) {
  GradientMask gm{ParamMask(model.shapes(), false), 0.0};
  for (ParamId id : model.ffn_param_ids()) gm.mask.fill(id, true);
  gm.coverage_fraction = ffn_coverage(gm.mask, model);
  return gm;
}

NonFfnPolicy non_ffn_policy_from_string(const std::string& s) {
  if (s == "full") return NonFfnPolicy::full;
  if (s == "freeze") return NonFfnPolicy::freeze;
  throw ValidationError("unknown non-FFN policy '" + s + "'");
}

std::string to_string(NonFfnPolicy p) { return p == NonFfnPolicy::full ? "full" : "freeze"; }

ParamMask effective_mask(const GradientMask& mask, const TransformerModel& model,
                         NonFfnPolicy policy) {
  const auto shapes = model.shapes();
  if (mask.mask.size() != shapes.size()) throw ShapeError("gradient mask / model parameter count mismatch");
  ParamMask out(shapes, policy == NonFfnPolicy::full);
  for (ParamId id = 0; id < shapes.size(); ++id) {
    if (mask.mask.shape(id) != shapes[id]) throw ShapeError("gradient mask shape mismatch");
    if (!model.is_ffn_param(id)) continue;
    const auto src = mask.mask.bits(id);
    std::copy(src.begin(), src.end(), out.bits(id).begin());
  }
  return out;
}

void masked_step(TransformerModel& model, const GradientStore& grads, SgdOptimizer& optimizer,
                 const GradientMask& mask, NonFfnPolicy policy) {
  const ParamMask eff = effective_mask(mask, model, policy);
  optimizer.step(model.params(), grads, &eff);
}

void masked_step(TransformerModel& model, const GradientStore& grads, double lr,
                 const GradientMask& mask, NonFfnPolicy policy) {
  const ParamMask eff = effective_mask(mask, model, policy);
  sgd_step(model.params(), grads, lr, &eff);
}

}  // namespace trelm
