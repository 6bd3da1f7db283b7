// trelm: data generation, pre-training, probing, attribution and run comparison.
//
// Every subcommand reads an optional --config JSON file; each config key can
// also be given as a flag of the same name, which wins over the file.
// Exit status: 0 success, 1 invalid input, 2 runtime failure.

#include <fstream>
#include <iostream>
#include <map>
#include <numeric>

#include "CLI11.hpp"

#include "trelm/errors.hpp"
#include "trelm/harness.hpp"

namespace {

using namespace trelm;

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
    for (const auto& key : run_config_keys()) {
      cmd->add_option_function<std::string>(
          "--" + key, [this, key](const std::string& v) { values[key] = v; }, "config key " + key);
    }
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : read_run_config(config_path);
    c = apply_overrides(c, values);
    c.validate();
    return c;
  }
};

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::filesystem::path out_dir(const RunConfig& c) {
  std::filesystem::create_directories(c.out_dir);
  return c.out_dir;
}

// First `count` sentence ids that carry a fact, or the explicit list.
std::vector<std::size_t> pick_sentences(const LoadedRun& run, const std::vector<std::size_t>& ids,
                                        std::size_t count, bool need_fact) {
  if (!ids.empty()) return ids;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < run.corpus.size() && out.size() < count; ++i) {
    if (!need_fact || run.corpus[i].fact) out.push_back(i);
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"TRELM desk-scale pre-training"};
  app.require_subcommand(1);

  ConfigFlags gen_kg_flags, gen_corpus_flags, embed_flags, pretrain_flags;

  auto* gen_kg = app.add_subcommand("gen-kg", "generate a synthetic knowledge graph into <out_dir>/kg.json");
  gen_kg_flags.attach(gen_kg);
  gen_kg->callback([&] {
    const RunConfig c = gen_kg_flags.resolve();
    write_kg(out_dir(c) / "kg.json", dataset_kg(c));
  });

  auto* gen_corpus = app.add_subcommand(
      "gen-corpus", "split triples and verbalize the training ones into <out_dir>/corpus.jsonl");
  gen_corpus_flags.attach(gen_corpus);
  gen_corpus->callback([&] {
    const RunConfig c = gen_corpus_flags.resolve();
    const KnowledgeGraph kg = dataset_kg(c);
    const TripleSplit split = dataset_split(c, kg);
    const auto dir = out_dir(c);
    write_split(dir / "split.json", split);
    write_corpus(dir / "corpus.jsonl", dataset_corpus(c, kg, split));
  });

  auto* embed = app.add_subcommand("kg-embed", "train TransE vectors into <out_dir>/kg_embeddings.bin");
  embed_flags.attach(embed);
  embed->callback([&] {
    const RunConfig c = embed_flags.resolve();
    const KnowledgeGraph kg = dataset_kg(c);
    const KgEmbeddings emb = dataset_kg_embeddings(c, kg);
    write_kg_embeddings(out_dir(c) / "kg_embeddings.bin", emb);
    std::cout << "final epoch loss " << (emb.epoch_loss.empty() ? 0.0 : emb.epoch_loss.back()) << '\n';
  });

  bool quiet = false;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "train a model; writes metrics, probes and checkpoints");
  pretrain_flags.attach(pretrain_cmd);
  pretrain_cmd->add_flag("--quiet", quiet, "no per-epoch progress");
  pretrain_cmd->callback([&] {
    if (!pretrain_flags.values.count("seed")) throw ValidationError("--seed is required for pretrain");
    const RunConfig c = pretrain_flags.resolve();
    const PretrainResult r = pretrain(c);
    if (!quiet) {
      for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
        std::cout << "epoch " << e << " mean loss " << r.epoch_loss[e] << '\n';
      }
    }
    std::cout << "held-out P@1 " << r.heldout.macro_p_at_1 << ", train P@1 " << r.train.macro_p_at_1
              << ", mean FFN coverage " << r.mean_coverage << '\n';
  });

  std::string probe_dir, probe_ckpt, probe_out, probe_set = "heldout";
  auto* probe_cmd = app.add_subcommand("probe", "cloze P@1 of a finished run");
  probe_cmd->add_option("run_dir", probe_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  probe_cmd->add_option("--checkpoint", probe_ckpt, "checkpoint (default checkpoint_last.bin)");
  probe_cmd->add_option("--triples", probe_set, "heldout or train")->check(CLI::IsMember({"heldout", "train"}));
  probe_cmd->add_option("--out", probe_out, "write the result JSON here");
  probe_cmd->callback([&] {
    const ProbeResult r = probe_run(probe_dir, probe_set == "heldout", probe_ckpt);
    const nlohmann::json j = to_json(r);
    if (probe_out.empty()) {
      std::cout << j.dump(2) << '\n';
    } else {
      write_json(probe_out, j);
    }
    for (const auto& rel : r.excluded) {
      std::cerr << "relation " << index(rel) << " has no queries; left out of the average\n";
    }
  });

  std::string attr_dir, attr_ckpt, attr_out, si_out;
  std::vector<std::size_t> attr_ids;
  std::size_t attr_count = 2, attr_steps = 0;
  double attr_p = -1.0;
  auto* attr_cmd = app.add_subcommand("attribute", "integrated-gradients scores of every FFN neuron");
  attr_cmd->add_option("run_dir", attr_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  attr_cmd->add_option("--checkpoint", attr_ckpt, "checkpoint (default checkpoint_last.bin)");
  attr_cmd->add_option("--sentences", attr_ids, "corpus sentence ids (default: the first facts)");
  attr_cmd->add_option("--count", attr_count, "number of sentences when --sentences is absent");
  attr_cmd->add_option("--riemann_steps", attr_steps, "Riemann steps (default: the run's)");
  attr_cmd->add_option("--path_fraction", attr_p, "selection fraction (default: the run's)");
  attr_cmd->add_option("--out", attr_out, "attribution CSV")->required();
  attr_cmd->add_option("--si-table", si_out, "also write the per-entity SI table CSV here");
  attr_cmd->callback([&] {
    const LoadedRun run = load_run(attr_dir, attr_ckpt);
    const std::size_t m = attr_steps ? attr_steps : run.config.riemann_steps;
    const double p = attr_p >= 0.0 ? attr_p : run.config.path_fraction;
    if (p <= 0.0 || p > 1.0) throw ValidationError("--path_fraction must be in (0, 1]");
    const auto ids = pick_sentences(run, attr_ids, attr_count, true);
    const auto batch = tail_assessment(run, ids);
    const AttributionTable table = attribute(run.model, batch, m);
    const KnowledgePath path = select_paths(table, p, run.model);
    std::ofstream out(attr_out);
    if (!out) throw std::runtime_error("cannot write " + attr_out);
    write_attribution_header(out);
    write_attribution_rows(out, 0, table, &path);
    if (!si_out.empty()) {
      std::ofstream si(si_out);
      if (!si) throw std::runtime_error("cannot write " + si_out);
      write_si_table(si, run, ids);
    }
  });

  std::vector<std::string> cmp_dirs;
  std::string cmp_csv = "compare.csv", cmp_json = "compare.json";
  auto* cmp_cmd = app.add_subcommand("compare", "align the metric logs of two or more runs");
  cmp_cmd->add_option("run_dirs", cmp_dirs, "run directories (the first is the reference)")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmp_cmd->add_option("--csv", cmp_csv, "per-step report");
  cmp_cmd->add_option("--json", cmp_json, "summary report");
  cmp_cmd->callback([&] {
    std::vector<std::filesystem::path> dirs(cmp_dirs.begin(), cmp_dirs.end());
    const CompareReport report = compare_runs(dirs);
    write_compare_report(report, cmp_csv, cmp_json);
    std::cout << report.summary.dump(2) << '\n';
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const trelm::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const trelm::ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const trelm::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return 2;
  }
}
