#pragma once

// Dynamic knowledge routing: integrated-gradients attribution of FFN
// neurons, knowledge-path selection and the induced gradient mask.

#include <filesystem>
#include <memory>
#include <ostream>
#include <span>
#include <vector>

#include "trelm/model.hpp"
#include "trelm/optim.hpp"

namespace trelm {

/// A scalar response P(v) of a vector of neuron values v, with its gradient.
/// Implementations must be safe to evaluate concurrently.
class ResponseSurface {
 public:
  virtual ~ResponseSurface() = default;
  virtual std::size_t width() const = 0;
  /// Recorded (unintervened) neuron values.
  virtual const Tensor& baseline() const = 0;
  virtual double value(const Tensor& v) const = 0;
  virtual double value_and_grad(const Tensor& v, Tensor& grad) const = 0;
};

/// One assessed position: the sequence it belongs to, where, and the gold token.
struct AssessTarget {
  std::size_t position = 0;
  TokenId gold = 0;
};

/// Input for probability-of-correct-response evaluation: a sequence's
/// encoder input embeddings and its assessed positions.
struct AssessSequence {
  Tensor input;  // [n, d1] encoder input embeddings
  std::vector<AssessTarget> targets;
};

/// Mean over all targets of softmax_y f(h_d, y) evaluated at y = gold, with
/// the full vocabulary in the normalizer.
double correct_response_prob(const TransformerModel& model, std::span<const AssessSequence> batch,
                             std::span<const Intervention> interventions = {});

/// P as a function of layer `layer`'s FFN neurons at every target position.
/// Coordinates are laid out target-major: v[t * d_ff + i]. Layers below
/// `layer` are encoded once; each evaluation resumes from the FFN output.
class ModelLayerSurface : public ResponseSurface {
 public:
  ModelLayerSurface(const TransformerModel& model, std::span<const AssessSequence> batch,
                    std::size_t layer);
  std::size_t width() const override { return baseline_.size(); }
  const Tensor& baseline() const override { return baseline_; }
  double value(const Tensor& v) const override;
  double value_and_grad(const Tensor& v, Tensor& grad) const override;
  std::size_t n_targets() const { return n_targets_; }

 private:
  struct Cached {
    Tensor residual;     // [n, d1] stream entering W_out
    Tensor activations;  // [n, d_ff]
    std::vector<AssessTarget> targets;
    std::size_t first_target = 0;
  };
  double evaluate(const Tensor& v, Tensor* grad) const;

  const TransformerModel& model_;
  std::size_t layer_;
  std::vector<Cached> cache_;
  std::size_t n_targets_ = 0;
  Tensor baseline_;
};

enum class Execution { parallel, serial };

/// Riemann attribution of one coordinate: clamp only coordinate i to k/m v_i.
double neuron_attribution(const ResponseSurface& surface, std::size_t i, std::size_t m);

/// Riemann attribution of every coordinate, scaling all coordinates together
/// at each step (one gradient per step). Steps run under OpenMP unless serial;
/// both orders of summation are fixed, so the results agree bitwise.
Tensor layer_attribution(const ResponseSurface& surface, std::size_t m,
                         Execution execution = Execution::parallel);

struct AttributionTable {
  std::size_t riemann_steps = 20;
  std::vector<Tensor> baseline;  // per layer [d_ff], mean over targets
  std::vector<Tensor> score;     // per layer [d_ff]
};

/// Attribution of every FFN neuron of every layer. Per-target coordinates of
/// the same neuron are summed into the neuron's score.
AttributionTable attribute(const TransformerModel& model, std::span<const AssessSequence> batch,
                           std::size_t m, Execution execution = Execution::parallel);

/// CSV rows (step, layer, neuron, baseline_activation, attr_score, selected).
void write_attribution_header(std::ostream& out);
void write_attribution_rows(std::ostream& out, std::uint64_t step, const AttributionTable& table,
                            const struct KnowledgePath* path);

struct LayerPath {
  std::vector<std::size_t> input;  // d1 coordinates feeding the selected neurons
  std::vector<std::size_t> inter;  // selected FFN neurons, ascending
  std::vector<std::size_t> output; // d1 coordinates fed by them
};

struct KnowledgePath {
  std::vector<LayerPath> layers;
  bool operator==(const KnowledgePath& o) const;
};

/// Top ceil(p * n) indices by score, ties to the lower index, returned ascending.
std::vector<std::size_t> top_fraction(std::span<const double> scores, double p);

/// Intermediate sets from the table; input/output sets are the d1
/// coordinates connected to a selected neuron by a nonzero weight.
KnowledgePath select_paths(const AttributionTable& table, double p, const TransformerModel& model);

struct GradientMask {
  ParamMask mask;  // over every model parameter; only FFN entries are meaningful
  double coverage_fraction = 0.0;
};

/// Column j of W_in, entry j of b_in and row j of W_out for each selected
/// neuron j. b_out is never on a path.
GradientMask build_mask(const KnowledgePath& path, const TransformerModel& model);
/// All FFN entries true (the full-update run).
GradientMask full_mask(const TransformerModel& model);

enum class NonFfnPolicy { full, freeze };
NonFfnPolicy non_ffn_policy_from_string(const std::string& s);
std::string to_string(NonFfnPolicy p);

/// ParamMask applied by masked_step: FFN entries from `mask`, every other
/// parameter entirely true (full) or false (freeze).
ParamMask effective_mask(const GradientMask& mask, const TransformerModel& model,
                         NonFfnPolicy policy);

/// Fraction of FFN entries a step with this mask may change.
double ffn_coverage(const ParamMask& mask, const TransformerModel& model);

void masked_step(TransformerModel& model, const GradientStore& grads, SgdOptimizer& optimizer,
                 const GradientMask& mask, NonFfnPolicy policy);
void masked_step(TransformerModel& model, const GradientStore& grads, double lr,
                 const GradientMask& mask, NonFfnPolicy policy);

}  // namespace trelm
