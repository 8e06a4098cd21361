// cfl-probe: dataset generation, training and evaluation front end.
//
// Logs go to stderr; tables and JSON go to files or stdout.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "cflprobe/cflprobe.hpp"

namespace fs = std::filesystem;
using namespace cflprobe;

namespace {

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- gen ----

struct GenArgs {
  std::string lang = "dyck";
  std::string spec_file;
  std::size_t k = 2, m = 3, n = 2;
  GenConfig cfg;
  std::string out;
};

PdaSpec spec_for(const GenArgs& a) {
  if (!a.spec_file.empty()) return load_spec(a.spec_file);
  if (a.lang == "dyck") return build_dyck(a.k, a.m);
  if (a.lang == "anbn") return build_anbn(a.m);
  if (a.lang == "parity") return build_parity();
  if (a.lang == "wcwr") return build_wcwr(a.k, a.m, a.n);
  throw std::invalid_argument("unknown language '" + a.lang + "' (dyck, anbn, parity, wcwr)");
}

int run_gen(const GenArgs& a) {
  a.cfg.validate();
  const PdaSpec spec = spec_for(a);
  const auto t0 = std::chrono::steady_clock::now();
  auto splits = build_dataset(spec, a.cfg);
  ordered_json extra;
  extra["source"] = a.spec_file.empty() ? a.lang : "file";
  write_dataset_dir(a.out, spec, splits, "pda", extra);
  std::cerr << "gen: " << spec.name() << " train=" << splits.train.records.size()
            << " test=" << splits.test.records.size() << " -> " << a.out << " ("
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s)\n";
  return 0;
}

// ---- scan-prep ----

struct ScanArgs {
  ScanDatasetOptions opt;
  std::string out;
};

int run_scan(const ScanArgs& a) {
  auto ds = build_scan_dataset(a.opt);
  ordered_json extra;
  extra["language_size"] = ds.language_size;
  extra["max_depth"] = ds.max_depth;
  extra["max_records"] = a.opt.max_records;
  write_dataset_dir(a.out, scan_pda(), ds.splits, "scan", extra);
  std::cerr << "scan-prep: " << ds.language_size << " commands, kept " << ds.splits.train.records.size() << "+"
            << ds.splits.test.records.size() << ", max depth " << ds.max_depth << " -> " << a.out << "\n";
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string data;
  std::string family = "lstm";
  std::string mode = "forced";
  std::size_t alpha = 1, layers = 1, heads = 8;
  double dropout = 0.1;
  bool no_residual = false;
  bool no_stack_loss = false;
  bool no_cotrain = false;
  std::string loss_weights = "fixed";
  std::string phase = "oracle";
  std::string init;
  std::string ckpt;
  std::string metrics;
  std::size_t max_train = 0;
  TrainConfig tc;
};

ModelConfig model_config(const TrainArgs& a, const DatasetInfo& info) {
  auto c = model_config_for(info, family_from_string(a.family), decomposition_from_string(a.mode), a.alpha, a.layers,
                            a.tc.seed);
  c.heads = a.heads;
  c.dropout = a.dropout;
  c.residual = !a.no_residual;
  c.validate();
  return c;
}

int run_train(TrainArgs a) {
  auto data = load_dataset(a.data);
  if (a.max_train && a.max_train < data.train.size()) data.train.resize(a.max_train);
  const ModelConfig mcfg = model_config(a, data.info);
  check_metadata(mcfg, data.info);
  TrainConfig tc = a.tc;
  tc.phase = phase_from_string(a.phase);
  tc.loss_mode = loss_mode_from_string(a.loss_weights);
  tc.stack_loss = !a.no_stack_loss;
  tc.classifier_cotrain = !a.no_cotrain;
  if (tc.phase != Phase::Oracle && tc.loss_mode != LossMode::Fixed) {
    throw std::invalid_argument("classification phases use the plain BCE loss; drop --loss-weights");
  }
  Model model(mcfg);
  if (tc.phase == Phase::Phase1) {
    if (a.init.empty()) throw std::invalid_argument("phase1 needs --init with an oracle checkpoint");
    auto ck = ad::load_checkpoint(a.init);
    auto stored = ModelConfig::from_json(nlohmann::json::parse(ck.config));
    ModelConfig x = stored, y = mcfg;
    x.seed = y.seed = 0;
    if (x.text() != y.text()) throw MetadataMismatch("--init checkpoint has a different model config: " + stored.text());
    model.load_weights(ck);
  } else if (!a.init.empty()) {
    throw std::invalid_argument("--init is only used by --phase phase1");
  }
  LossWeights w = tc.loss_mode == LossMode::Fixed ? LossWeights::fixed() : LossWeights::learnable();
  std::cerr << "train: " << data.info.spec_name << " " << to_string(mcfg.family) << "/" << to_string(mcfg.mode)
            << " alpha=" << mcfg.alpha << " d=" << mcfg.hidden() << " params=" << model.params().count()
            << " records=" << data.train.size() << " phase=" << to_string(tc.phase) << "\n";
  auto res = train(model, data.train, tc, w, [](const EpochStats& s) {
    std::cerr << "  epoch " << s.epoch << " loss " << fmt_double(s.loss) << " (sym " << fmt_double(s.symbol)
              << " state " << fmt_double(s.state) << " stack " << fmt_double(s.stack) << " cls "
              << fmt_double(s.classifier) << ")\n";
  });
  const Metrics m = evaluate(model, data.test);
  std::cerr << "test: " << m.to_json().dump() << "\n";
  if (!a.ckpt.empty()) {
    if (auto parent = fs::path(a.ckpt).parent_path(); !parent.empty()) fs::create_directories(parent);
    model.save(a.ckpt);
  }
  write_text(a.metrics, train_csv(res, m));
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string ckpt, data, split = "test", out;
  std::size_t batch_size = 64;
};

std::vector<DatasetRecord> read_split(const std::string& dir, const std::string& split) {
  if (split != "train" && split != "test") throw std::invalid_argument("split must be train or test");
  return read_records(fs::path(dir) / (split + ".jsonl"));
}

int run_eval(const EvalArgs& a) {
  Model model = Model::load(a.ckpt);
  const auto info = read_dataset_info(a.data);
  check_metadata(model.config(), info);
  const auto recs = read_split(a.data, a.split);
  const Metrics m = evaluate(model, recs, a.batch_size);
  nlohmann::ordered_json j;
  j["checkpoint"] = a.ckpt;
  j["data"] = a.data;
  j["split"] = a.split;
  j["spec"] = info.spec_name;
  j["model"] = nlohmann::ordered_json::parse(model.config().text());
  j["metrics"] = m.to_json();
  write_text(a.out, j.dump(2) + "\n");
  return 0;
}

// ---- grid ----

struct GridArgs {
  std::string config, out, table, cache;
  std::size_t jobs = 0;
};

int run_grid_cmd(const GridArgs& a) {
  const auto j = nlohmann::json::parse(read_text(a.config));
  GridConfig g = parse_grid(j, fs::path(a.config).parent_path());
  if (!a.cache.empty()) g.cache_dir = a.cache;
  if (a.jobs) g.jobs = a.jobs;
  std::cerr << "grid: " << g.cells.size() << " cells, " << g.jobs << " jobs, cache " << g.cache_dir << "\n";
  std::size_t done = 0;
  auto rows = run_grid(g, {}, [&](const GridRow& r) {
    ++done;
    std::cerr << "  [" << done << "/" << g.cells.size() << "] " << r.id << " " << to_string(r.cell.family) << "/"
              << to_string(r.cell.mode) << " alpha=" << r.cell.alpha << " seed=" << r.cell.seed << " " << r.status
              << (r.cached ? " (cached)" : "") << (r.error.empty() ? "" : ": " + r.error) << "\n";
  });
  write_text(a.out, grid_csv(rows));
  if (!a.table.empty()) write_text(a.table, scan_table_csv(rows));
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.status != "ok";
  if (failed) std::cerr << "grid: " << failed << " of " << rows.size() << " cells failed\n";
  return failed ? 1 : 0;
}

// ---- dump-hidden ----

struct DumpArgs {
  std::string ckpt, data, out, split = "test";
  std::size_t limit = 0;
};

int run_dump(const DumpArgs& a) {
  Model model = Model::load(a.ckpt);
  check_metadata(model.config(), read_dataset_info(a.data));
  const PdaSpec spec = load_spec((fs::path(a.data) / "spec.pda").string());
  auto recs = read_split(a.data, a.split);
  // positives only: corrupted records have no trace past the failing step
  std::vector<DatasetRecord> pos;
  for (auto& r : recs) {
    if (r.label != Label::Positive) continue;
    pos.push_back(std::move(r));
    if (a.limit && pos.size() == a.limit) break;
  }
  const std::size_t d = model.config().hidden();
  std::ostringstream out;
  out << "seq,step,symbol,state,stack";
  for (std::size_t i = 0; i < d; ++i) out << ",h" << i;
  out << "\n";
  for (const auto& batch : make_batches<std::mt19937_64>(pos, 64, nullptr)) {
    auto pb = prepare_batch(batch, model.config().max_stack);
    ad::Tensor h = model.encode(pb.batch, false);
    const std::size_t T = pb.batch.T, B = pb.batch.B;
    for (std::size_t b = 0; b < B; ++b) {
      const auto& r = *batch[b];
      for (std::size_t t = 0; t < T; ++t) {
        std::string stack;
        for (std::size_t j = 0; j < r.trace.stacks[t].size(); ++j) {
          stack += (j ? " " : "") + spec.stack_symbols().name(r.trace.stacks[t][j]);
        }
        out << r.id << "," << t << "," << csv_escape(spec.alphabet().name(r.sequence[t])) << ","
            << csv_escape(spec.states().name(r.trace.states[t])) << "," << csv_escape(stack);
        const std::size_t row = t * B + b;
        for (std::size_t i = 0; i < d; ++i) out << "," << fmt_double(h.data()[row * d + i]);
        out << "\n";
      }
    }
  }
  write_text(a.out, out.str());
  std::cerr << "dump-hidden: " << pos.size() << " sequences, d=" << d << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cfl-probe: bounded PDA datasets and oracle-trained sequence models"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate an annotated dataset directory");
  g->add_option("--lang", gen.lang, "dyck | anbn | parity | wcwr")->capture_default_str();
  g->add_option("--spec", gen.spec_file, "PDA text file instead of a built-in language");
  g->add_option("--k", gen.k, "bracket / character types")->capture_default_str();
  g->add_option("--m", gen.m, "stack bound")->capture_default_str();
  g->add_option("--n", gen.n, "wcwr block count")->capture_default_str();
  g->add_option("--n-train", gen.cfg.n_train)->capture_default_str();
  g->add_option("--n-test", gen.cfg.n_test)->capture_default_str();
  g->add_option("--max-len", gen.cfg.max_len, "0 = language default")->capture_default_str();
  g->add_option("--seed", gen.cfg.seed)->capture_default_str();
  g->add_flag("--enumerate", gen.cfg.enumerate, "every accepted string up to max-len, split by hash");
  g->add_option("--p-stop", gen.cfg.p_stop)->capture_default_str();
  g->add_option("--threads", gen.cfg.threads)->capture_default_str();
  g->add_option("--out", gen.out)->required();

  ScanArgs scan;
  auto* s = app.add_subcommand("scan-prep", "parse SCAN commands into a dataset directory");
  s->add_option("--seed", scan.opt.seed)->capture_default_str();
  s->add_option("--max-records", scan.opt.max_records, "0 = all commands")->capture_default_str();
  s->add_option("--threads", scan.opt.threads)->capture_default_str();
  s->add_option("--out", scan.out)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train one model and print the metrics CSV");
  t->add_option("--data", tr.data)->required();
  t->add_option("--family", tr.family, "lstm | transformer_encoder | transformer_decoder")->capture_default_str();
  t->add_option("--mode", tr.mode, "forced | latent")->capture_default_str();
  t->add_option("--alpha", tr.alpha)->capture_default_str();
  t->add_option("--layers", tr.layers)->capture_default_str();
  t->add_option("--heads", tr.heads)->capture_default_str();
  t->add_option("--dropout", tr.dropout)->capture_default_str();
  t->add_flag("--no-residual", tr.no_residual, "drop residual + layer norm in Transformers");
  t->add_flag("--no-stack-loss", tr.no_stack_loss);
  t->add_flag("--no-cotrain", tr.no_cotrain, "oracle phase without the classifier loss");
  t->add_option("--loss-weights", tr.loss_weights, "fixed | learnable")->capture_default_str();
  t->add_option("--phase", tr.phase, "oracle | phase0 | phase1")->capture_default_str();
  t->add_option("--init", tr.init, "oracle checkpoint for phase1");
  t->add_option("--seed", tr.tc.seed)->capture_default_str();
  t->add_option("--epochs", tr.tc.epochs)->capture_default_str();
  t->add_option("--batch-size", tr.tc.batch_size)->capture_default_str();
  t->add_option("--lr", tr.tc.lr)->capture_default_str();
  t->add_option("--patience", tr.tc.patience)->capture_default_str();
  t->add_option("--min-delta", tr.tc.min_delta)->capture_default_str();
  t->add_option("--max-train", tr.max_train, "use only the first N training records")->capture_default_str();
  t->add_option("--ckpt", tr.ckpt, "write the trained model here");
  t->add_option("--metrics", tr.metrics, "CSV path (default stdout)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "metrics of a checkpoint on a dataset split, as JSON");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--split", ev.split)->capture_default_str();
  e->add_option("--batch-size", ev.batch_size)->capture_default_str();
  e->add_option("--out", ev.out, "JSON path (default stdout)");

  GridArgs gr;
  auto* gc = app.add_subcommand("grid", "run an experiment grid; exit 1 if any cell fails");
  gc->add_option("--config", gr.config)->required();
  gc->add_option("--out", gr.out, "results CSV (default stdout)");
  gc->add_option("--table", gr.table, "also write the perplexity/accuracy table");
  gc->add_option("--cache", gr.cache, "override the cache directory");
  gc->add_option("--jobs", gr.jobs, "override the job count");

  DumpArgs du;
  auto* dh = app.add_subcommand("dump-hidden", "hidden states with oracle stack labels, one row per step");
  dh->add_option("--ckpt", du.ckpt)->required();
  dh->add_option("--data", du.data)->required();
  dh->add_option("--out", du.out, "CSV path (default stdout)");
  dh->add_option("--split", du.split)->capture_default_str();
  dh->add_option("--limit", du.limit, "max sequences, 0 = all")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return run_gen(gen);
    if (*s) return run_scan(scan);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*gc) return run_grid_cmd(gr);
    if (*dh) return run_dump(du);
  } catch (const std::exception& ex) {
    std::cerr << "cfl-probe: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}
