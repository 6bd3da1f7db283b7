#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "internal.hpp"
#include "trelm/errors.hpp"
#include "trelm/random.hpp"

namespace trelm {

namespace {

using detail::format_double;

constexpr std::uint64_t model_stream = 5, order_stream = 6, mask_stream = 7, negative_stream = 8;

const char* const kMetricColumns[] = {
    "step",  "epoch",     "l_mlm",         "l_cka",         "l_total",
    "lambda_q", "theta",  "gamma",         "window_k",      "riemann_steps",
    "path_fraction", "coverage_fraction", "n_injected", "n_memory_mixed"};

struct Prepared {
  MaskedSequence masked;
  std::vector<InjectedSpan> injections;
  std::vector<std::vector<TokenId>> negatives;
  std::size_t n_memory = 0;
};

struct Outcome {
  double l_mlm = 0.0;
  double l_cka = 0.0;
  double l_total = 0.0;
  bool has_cka = false;
  Tensor input;   // encoder input embeddings
  Tensor hidden;  // final-layer states
};

class Trainer {
 public:
  Trainer(const RunConfig& config, const Dataset& data)
      : cfg_(config),
        data_(data),
        mode_(config.run_mode()),
        seed_(config.require_seed()),
        model_(model_config(config)),
        bank_(config.hidden_dim),
        optimizer_(SgdOptions{config.lr, config.momentum}, model_.shapes()),
        selection_(detail::selection_options(config)),
        long_tail_(detail::long_tail_set(config, data.counts)),
        sampler_(config.vocab_size, config.n_negatives),
        direction_(cka_direction_from_string(config.cka_direction)),
        policy_(non_ffn_policy_from_string(config.non_ffn_policy)),
        normalizer_(config.local_normalizer == "literal" ? LocalNormalizer::literal
                                                        : LocalNormalizer::window_count),
        parallel_(config.execution == "parallel"),
        theta_(mode_ == RunMode::trelm ? config.theta : 1.0),
        mask_(full_mask(model_)) {}

  PretrainResult run(const StepObserver& observer);

 private:
  static TransformerConfig model_config(const RunConfig& c) {
    TransformerConfig t = c.transformer_config();
    t.seed = derive_seed(c.require_seed(), {model_stream});
    return t;
  }

  Prepared prepare(const AnnotatedSequence& seq, std::uint64_t step, std::size_t i,
                   CkaDirection side, double lambda) const;
  Outcome forward_backward(const Prepared& p, GradientStore* grads, double weight) const;
  void step(const std::vector<std::size_t>& batch, std::size_t epoch, double lambda);
  ProbeContext probe_context(double lambda) const;
  void write_artifacts() const;

  const RunConfig& cfg_;
  const Dataset& data_;
  RunMode mode_;
  std::uint64_t seed_;
  TransformerModel model_;
  MemoryBank bank_;
  SgdOptimizer optimizer_;
  SelectionOptions selection_;
  std::set<EntityId> long_tail_;
  NegativeSampler sampler_;
  CkaDirection direction_;
  NonFfnPolicy policy_;
  LocalNormalizer normalizer_;
  bool parallel_;
  double theta_;

  std::uint64_t step_ = 0;
  GradientMask mask_;
  std::ofstream metrics_, timing_, attribution_;
  std::vector<double> epoch_totals_;
  double coverage_sum_ = 0.0;
  double first_loss_ = 0.0;
  StepObserver observer_;
};

Prepared Trainer::prepare(const AnnotatedSequence& seq, std::uint64_t step, std::size_t i,
                          CkaDirection side, double lambda) const {
  Prepared p;
  MaskOptions mo;
  mo.mask_rate = cfg_.mask_rate;
  mo.side = side;
  p.masked = mask_sequence(seq, cfg_.vocab_size, mo, derive_seed(seed_, {mask_stream, step, i}));
  if (mode_ != RunMode::trelm) return p;

  // Entities whose span lost a token to masking are not injected: injecting
  // them would hand the model the answer.
  std::vector<EntitySpan> eligible;
  for (const auto& span : seq.spans) {
    bool masked = false;
    for (std::size_t pos : p.masked.label_positions) masked = masked || (pos >= span.first && pos <= span.last);
    if (!masked) eligible.push_back(span);
  }
  p.injections = detail::build_injections(model_, p.masked.input, eligible, long_tail_, selection_,
                                          data_.kg_embeddings, bank_, lambda, &p.n_memory);
  std::mt19937_64 rng(derive_seed(seed_, {negative_stream, step, i}));
  for (TokenId gold : p.masked.cka_gold) p.negatives.push_back(sampler_.sample(gold, rng));
  return p;
}

Outcome Trainer::forward_backward(const Prepared& p, GradientStore* grads, double weight) const {
  Tape tape(GradMode::enabled, grads);
  ParamBinding b(tape, model_);
  Var x = model_.embed(b, p.masked.input, p.injections);
  EncoderOutput enc = model_.encode(b, x);
  Var rows = ops::select_rows(enc.hidden, p.masked.label_positions);
  Var l_mlm = mlm_loss(model_.mlm_logits(b, rows), p.masked.label_tokens);
  Var loss = l_mlm;
  Outcome out;
  if (mode_ == RunMode::trelm && !p.masked.cka_positions.empty()) {
    Var h_d = model_.knowledge_vectors(b, ops::select_rows(enc.hidden, p.masked.cka_positions));
    Var l_cka = cka_loss(model_, b, h_d, p.masked.cka_gold, p.negatives);
    loss = total_loss(l_mlm, l_cka, theta_);
    out.l_cka = tape.value(l_cka).item();
    out.has_cka = true;
  }
  out.l_mlm = tape.value(l_mlm).item();
  out.l_total = tape.value(loss).item();
  tape.backward(ops::scale(loss, weight));
  out.input = tape.value(x);
  out.hidden = tape.value(enc.hidden);
  return out;
}

void Trainer::step(const std::vector<std::size_t>& batch, std::size_t epoch, double lambda) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t B = batch.size();
  const CkaDirection side = cka_side(direction_, step_);

  // Inputs, forward pass, losses and gradients, in fixed shards so
  // the reduction order does not depend on the thread count.
  const std::size_t n_shards = std::min(cfg_.grad_shards, B);
  std::vector<GradientStore> shard_grads(n_shards, GradientStore(model_.shapes()));
  std::vector<Prepared> prepared(B);
  std::vector<Outcome> outcomes(B);
  std::vector<std::exception_ptr> errors(n_shards);
  const double weight = 1.0 / static_cast<double>(B);
  auto run_shard = [&](std::size_t s) {
    try {
      const std::size_t lo = s * B / n_shards, hi = (s + 1) * B / n_shards;
      for (std::size_t i = lo; i < hi; ++i) {
        prepared[i] = prepare(data_.corpus[batch[i]], step_, i, side, lambda);
        outcomes[i] = forward_backward(prepared[i], &shard_grads[s], weight);
      }
    } catch (...) {
      errors[s] = std::current_exception();
    }
  };
  const auto ns = static_cast<std::ptrdiff_t>(n_shards);
  if (parallel_) {
#pragma omp parallel for schedule(dynamic, 1)
    for (std::ptrdiff_t s = 0; s < ns; ++s) run_shard(static_cast<std::size_t>(s));
  } else {
    for (std::ptrdiff_t s = 0; s < ns; ++s) run_shard(static_cast<std::size_t>(s));
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  GradientStore grads(model_.shapes());
  for (const auto& g : shard_grads) grads.add(g);

  // Attribution and path selection on the pre-update parameters.
  double coverage = 1.0;
  if (mode_ == RunMode::trelm) {
    if (cfg_.path_fraction >= 1.0) {
      mask_ = full_mask(model_);
    } else if (step_ % cfg_.path_every == 0) {
      std::vector<AssessSequence> assess;
      for (std::size_t i = 0; i < B && assess.size() < cfg_.attribution_batch; ++i) {
        const auto& m = prepared[i].masked;
        if (m.cka_positions.empty()) continue;
        AssessSequence a{outcomes[i].input, {}};
        for (std::size_t j = 0; j < m.cka_positions.size(); ++j) {
          a.targets.push_back({m.cka_positions[j], m.cka_gold[j]});
        }
        assess.push_back(std::move(a));
      }
      if (!assess.empty()) {
        const AttributionTable table =
            attribute(model_, assess, cfg_.riemann_steps, parallel_ ? Execution::parallel : Execution::serial);
        const KnowledgePath path = select_paths(table, cfg_.path_fraction, model_);
        mask_ = build_mask(path, model_);
        if (attribution_.is_open()) write_attribution_rows(attribution_, step_, table, &path);
      }
    }
    coverage = ffn_coverage(effective_mask(mask_, model_, policy_), model_);
  }

  // Memory bank, from this forward pass's final-layer outputs.
  std::size_t n_injected = 0, n_memory = 0;
  for (std::size_t i = 0; i < B; ++i) {
    for (const auto& inj : prepared[i].injections) n_injected += inj.positions.empty() ? 0 : 1;
    n_memory += prepared[i].n_memory;
    if (mode_ != RunMode::trelm) continue;
    const Tensor& h = outcomes[i].hidden;
    for (const auto& span : data_.corpus[batch[i]].spans) {
      MemoryEntry& e = bank_.entry(span.entity);
      update_local(e, local_memory(h, span.first, span.last, cfg_.window_k, normalizer_).data(), cfg_.gamma);
      update_global(e, h.row(0));
    }
  }

  // Masked update.
  if (mode_ == RunMode::trelm) {
    masked_step(model_, grads, optimizer_, mask_, policy_);
  } else {
    optimizer_.step(model_.params(), grads);
  }

  double l_mlm = 0.0, l_cka = 0.0, l_total = 0.0;
  std::size_t n_cka = 0;
  for (const auto& o : outcomes) {
    l_mlm += o.l_mlm;
    l_total += o.l_total;
    if (o.has_cka) {
      l_cka += o.l_cka;
      ++n_cka;
    }
  }
  l_mlm /= static_cast<double>(B);
  l_total /= static_cast<double>(B);
  if (n_cka > 0) l_cka /= static_cast<double>(n_cka);
  if (step_ == 0) first_loss_ = l_total;
  epoch_totals_[epoch] += l_total;
  coverage_sum_ += coverage;

  const std::vector<std::string> row = {
      std::to_string(step_), std::to_string(epoch), format_double(l_mlm), format_double(l_cka),
      format_double(l_total), format_double(lambda), format_double(theta_), format_double(cfg_.gamma),
      std::to_string(cfg_.window_k), std::to_string(cfg_.riemann_steps),
      format_double(cfg_.path_fraction), format_double(coverage), std::to_string(n_injected),
      std::to_string(n_memory)};
  for (std::size_t c = 0; c < row.size(); ++c) metrics_ << (c ? "," : "") << row[c];
  metrics_ << '\n';
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  timing_ << step_ << ',' << format_double(ms) << '\n';
  if (observer_) {
    nlohmann::json j;
    for (std::size_t c = 0; c < row.size(); ++c) j[kMetricColumns[c]] = row[c];
    j["wallclock_ms"] = ms;
    observer_(j);
  }
  ++step_;
}

ProbeContext Trainer::probe_context(double lambda) const {
  ProbeContext ctx;
  ctx.kg = &data_.kg;
  if (mode_ == RunMode::trelm) {
    ctx.kg_embeddings = &data_.kg_embeddings;
    ctx.bank = &bank_;
    ctx.lambda = lambda;
    ctx.long_tail = long_tail_;
    ctx.selection = selection_;
  }
  return ctx;
}

void Trainer::write_artifacts() const {
  const std::filesystem::path dir = cfg_.out_dir;
  detail::write_text_file(dir / "config.json", to_json(cfg_).dump(2) + "\n");
  write_kg(dir / "kg.json", data_.kg);
  write_split(dir / "split.json", data_.split);
  write_corpus(dir / "corpus.jsonl", data_.corpus);
  write_kg_embeddings(dir / "kg_embeddings.bin", data_.kg_embeddings);
}

PretrainResult Trainer::run(const StepObserver& observer) {
  observer_ = observer;
  const std::filesystem::path dir = cfg_.out_dir;
  std::filesystem::create_directories(dir);
  write_artifacts();

  PretrainResult result;
  result.metrics = dir / "metrics.csv";
  result.checkpoint = dir / "checkpoint_last.bin";
  result.best_checkpoint = dir / "checkpoint_best.bin";
  result.bank = dir / "bank.bin";
  metrics_.open(result.metrics, std::ios::binary);
  timing_.open(dir / "timing.csv", std::ios::binary);
  if (!metrics_ || !timing_) throw std::runtime_error("cannot write metrics in " + dir.string());
  for (std::size_t c = 0; c < std::size(kMetricColumns); ++c) metrics_ << (c ? "," : "") << kMetricColumns[c];
  metrics_ << '\n';
  timing_ << "step,wallclock_ms\n";
  if (cfg_.attribution_csv && mode_ == RunMode::trelm) {
    attribution_.open(dir / "attribution.csv", std::ios::binary);
    write_attribution_header(attribution_);
  }
  std::ofstream history(dir / "probe_history.csv", std::ios::binary);
  history << "epoch,step,heldout_p_at_1,train_p_at_1\n";

  std::vector<Triple> heldout, train;
  for (std::size_t i : data_.split.heldout) heldout.push_back(data_.kg.triples[i]);
  for (std::size_t i : data_.split.train) train.push_back(data_.kg.triples[i]);

  const MixSchedule schedule{cfg_.lambda0, cfg_.beta};
  epoch_totals_.assign(cfg_.epochs, 0.0);
  double best = -1.0;
  const std::size_t n = data_.corpus.size();
  for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    const double lambda = mode_ == RunMode::trelm ? lambda_schedule(schedule, epoch) : 0.0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed_, {order_stream, epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t steps_this_epoch = 0;
    for (std::size_t lo = 0; lo < n; lo += cfg_.batch_size) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, lo + cfg_.batch_size)));
      try {
        step(batch, epoch, lambda);
      } catch (const std::exception& e) {
        metrics_.flush();
        std::ofstream log(dir / "error.log", std::ios::binary);
        log << "step " << step_ << " (epoch " << epoch << "): " << e.what() << '\n';
        throw;
      }
      ++steps_this_epoch;
    }
    epoch_totals_[epoch] /= static_cast<double>(steps_this_epoch);

    const ProbeContext ctx = probe_context(lambda);
    result.heldout = heldout.empty() ? ProbeResult{} : probe(model_, ctx, heldout);
    result.train = probe(model_, ctx, train);
    history << epoch << ',' << step_ << ',' << format_double(result.heldout.macro_p_at_1) << ','
            << format_double(result.train.macro_p_at_1) << std::endl;
    const nlohmann::json extra = {{"mode", to_string(mode_)},
                                  {"lambda", lambda},
                                  {"heldout_p_at_1", result.heldout.macro_p_at_1},
                                  {"train_p_at_1", result.train.macro_p_at_1}};
    save_checkpoint(result.checkpoint, model_, step_, epoch, extra);
    if (result.heldout.macro_p_at_1 > best) {
      best = result.heldout.macro_p_at_1;
      save_checkpoint(result.best_checkpoint, model_, step_, epoch, extra);
    }
    write_memory_bank(result.bank, bank_);
  }
  metrics_.close();
  timing_.close();
  nlohmann::json probe_json = {{"heldout", to_json(result.heldout)}, {"train", to_json(result.train)}};
  detail::write_text_file(dir / "probe.json", probe_json.dump(2) + "\n");

  result.first_loss = first_loss_;
  result.epoch_loss = epoch_totals_;
  result.steps = step_;
  result.mean_coverage = step_ ? coverage_sum_ / static_cast<double>(step_) : 0.0;
  return result;
}

}  // namespace

PretrainResult pretrain(const RunConfig& config, const StepObserver& observer) {
  const Dataset data = prepare_dataset(config);
  return pretrain(config, data, observer);
}

PretrainResult pretrain(const RunConfig& config, const Dataset& data, const StepObserver& observer) {
  config.validate();
  Trainer trainer(config, data);
  return trainer.run(observer);
}

}  // namespace trelm
