#include <omp.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "crossdiff/checkpoint.hpp"
#include "crossdiff/alignment.hpp"
#include "crossdiff/errors.hpp"
#include "crossdiff/experiment.hpp"
#include "crossdiff/training.hpp"
#include "crossdiff/transfer.hpp"

namespace fs = std::filesystem;
using namespace crossdiff;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string preset;
  std::string out;
  int64_t seed = -1;
  int threads = 0;
};

ExperimentConfig resolve_config(const CommonOpts& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) {
    nlohmann::json j;
    {
      std::ifstream in(o.config_path);
      if (!in) throw config_error("cannot open config file: " + o.config_path);
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw config_error("config parse error in " + o.config_path + ": " + e.what());
      }
    }
    if (!o.preset.empty()) j["preset"] = o.preset;
    cfg = config_from_json(j);
  } else if (!o.preset.empty()) {
    nlohmann::json j;
    j["preset"] = o.preset;
    cfg = config_from_json(j);
  } else {
    throw config_error("provide --config and/or --preset");
  }
  if (o.seed >= 0) cfg.seeds = {static_cast<uint64_t>(o.seed)};
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.validate();
  return cfg;
}

FixtureTokenizer tokenizer_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  std::vector<std::string> vocab = j.value("vocab", std::vector<std::string>{});
  std::vector<int32_t> special = j.value("special", std::vector<int32_t>{});
  TokenizerKind k;
  if (kind == "char") {
    k = TokenizerKind::Char;
  } else if (kind == "word") {
    k = TokenizerKind::Word;
  } else if (kind == "merge") {
    k = TokenizerKind::GreedyMerge;
  } else {
    throw config_error("unknown tokenizer kind '" + kind + "' (expected char|word|merge)");
  }
  return FixtureTokenizer(k, std::move(vocab), std::move(special), /*allow_extend=*/false);
}

std::vector<std::vector<int32_t>> read_token_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open token file: " + path);
  std::vector<std::vector<int32_t>> docs;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<int32_t> ids;
    std::istringstream ss(line);
    int64_t v;
    while (ss >> v) ids.push_back(static_cast<int32_t>(v));
    docs.push_back(std::move(ids));
  }
  return docs;
}

int cmd_run(const CommonOpts& o) {
  const ExperimentConfig cfg = resolve_config(o);
  const auto summaries = run_experiment(cfg);
  std::cout << "completed " << summaries.size() << " runs under " << cfg.output_dir << "\n";
  return 0;
}

int cmd_sweep(const CommonOpts& o, const std::vector<int64_t>& dict_sizes) {
  const ExperimentConfig cfg = resolve_config(o);
  const auto summaries = sweep_dictionary(cfg, dict_sizes);
  std::cout << "completed " << summaries.size() << " sweep runs under " << cfg.output_dir << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& checkpoint_path) {
  const ExperimentConfig cfg = resolve_config(o);
  if (cfg.seeds.size() != 1)
    throw config_error("eval: pass --seed (the bank seed the checkpoint was trained with)");
  const uint64_t seed = cfg.seeds[0];
  const CrosscoderModel model = load_checkpoint(checkpoint_path);
  if (model.d_a != cfg.toy.d_act || model.d_b != cfg.toy.d_act)
    throw config_error("eval: checkpoint dimensions do not match the toy config");
  const ConceptBank bank = build_concept_bank(cfg.toy, seed);

  // Reproduce the training normalization from the calibration prefix.
  ToyBatchSource calib_stream(bank, cfg.train.batch, cfg.toy.sigma_noise,
                              derive_seed(seed, SeedDomain::DataStream));
  ActivationPairBatch calib = calib_stream.next();
  for (int64_t i = 1; i < cfg.train.calibration_batches; ++i) {
    ActivationPairBatch b = calib_stream.next();
    Mat xa(calib.x_a.rows + b.x_a.rows, calib.x_a.cols);
    Mat xb(calib.x_b.rows + b.x_b.rows, calib.x_b.cols);
    std::copy(calib.x_a.data.begin(), calib.x_a.data.end(), xa.data.begin());
    std::copy(b.x_a.data.begin(), b.x_a.data.end(), xa.data.begin() + calib.x_a.data.size());
    std::copy(calib.x_b.data.begin(), calib.x_b.data.end(), xb.data.begin());
    std::copy(b.x_b.data.begin(), b.x_b.data.end(), xb.data.begin() + calib.x_b.data.size());
    calib.x_a = std::move(xa);
    calib.x_b = std::move(xb);
  }
  auto [scale_a, scale_b] = compute_normalization(calib, model.d_a, model.d_b);

  // Without train-time counters, treat features that never fire on the
  // heldout pass as dead.
  ToyBatchSource heldout(bank, cfg.train.batch, cfg.toy.sigma_noise,
                         derive_seed(seed, SeedDomain::Heldout));
  std::vector<uint8_t> fired(model.dict_size, 0);
  {
    ToyBatchSource probe(bank, cfg.train.batch, cfg.toy.sigma_noise,
                         derive_seed(seed, SeedDomain::Heldout));
    int64_t rows = 0;
    while (rows < cfg.eval.heldout_rows) {
      ActivationPairBatch b = probe.next();
      for (double& v : b.x_a.data) v *= scale_a;
      for (double& v : b.x_b.data) v *= scale_b;
      const ForwardTrace t = forward(model, b.x_a, b.x_b, model.k);
      for (int64_t idx = 0; idx < t.acts.nnz(); ++idx) fired[t.acts.col[idx]] = 1;
      rows += b.rows();
    }
  }
  std::vector<int32_t> dead;
  for (int64_t j = 0; j < model.dict_size; ++j) {
    if (!fired[j]) dead.push_back(static_cast<int32_t>(j));
  }

  const EvalThresholds th{cfg.eval.theta_recovery, cfg.eval.theta_low, cfg.eval.theta_high};
  const EvalReport rep = evaluate(model, bank, th, dead,
                                  cfg.eval.heldout_rows > 0 ? &heldout : nullptr,
                                  cfg.eval.heldout_rows, scale_a, scale_b);
  const std::string out_path = o.out.empty() ? "report.json" : o.out;
  std::ofstream out(out_path);
  if (!out) throw io_error("cannot open for writing: " + out_path);
  out << report_to_json(rep, "eval", model.arch, model.dict_size, seed).dump(2) << "\n";
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_align(const std::string& tokens_a, const std::string& tokens_b,
              const std::string& fixtures, const std::string& out_dir, int64_t max_window) {
  nlohmann::json spec;
  {
    std::ifstream in(fixtures);
    if (!in) throw config_error("cannot open fixtures file: " + fixtures);
    try {
      in >> spec;
    } catch (const nlohmann::json::exception& e) {
      throw config_error("fixtures parse error: " + std::string(e.what()));
    }
  }
  FixtureTokenizer tok_a = tokenizer_from_json(spec.at("a"));
  FixtureTokenizer tok_b = tokenizer_from_json(spec.at("b"));
  const auto docs_a = read_token_file(tokens_a);
  const auto docs_b = read_token_file(tokens_b);
  if (docs_a.size() != docs_b.size())
    throw config_error("align: token files have different document counts");

  fs::create_directories(out_dir);
  std::vector<AlignmentResult> results;
  std::vector<std::pair<int64_t, int64_t>> lengths;
  std::string pairs_csv = "doc,idx_a,idx_b\n";
  for (size_t d = 0; d < docs_a.size(); ++d) {
    TokenStream sa{docs_a[d], &tok_a};
    TokenStream sb{docs_b[d], &tok_b};
    AlignmentResult r = align(sa, sb, max_window);
    for (const AlignedPair& p : r.pairs) {
      pairs_csv += std::to_string(d) + "," + std::to_string(p.idx_a) + "," +
                   std::to_string(p.idx_b) + "\n";
    }
    lengths.emplace_back(docs_a[d].size(), docs_b[d].size());
    results.push_back(std::move(r));
  }
  const CorpusStats stats = alignment_stats(results, lengths);
  nlohmann::json js;
  js["total"] = stats.total;
  js["success"] = stats.success;
  js["success_rate"] = stats.success_rate() ? nlohmann::json(*stats.success_rate())
                                            : nlohmann::json(nullptr);
  nlohmann::json reasons = nlohmann::json::object();
  for (const auto& [reason, count] : stats.failure_reasons) {
    reasons[failure_reason_name(reason)] = count;
  }
  js["failure_reasons"] = reasons;

  std::ofstream pout(out_dir + "/pairs.csv");
  pout << pairs_csv;
  std::ofstream sout(out_dir + "/stats.json");
  sout << js.dump(2) << "\n";
  std::cout << "aligned " << stats.success << "/" << stats.total << " documents\n";
  return 0;
}

int cmd_stitch(const CommonOpts& o, const std::string& pairs_path, int64_t pairs_count,
               double ridge, double inversion_weight) {
  std::vector<ActivationPairBatch> train_pairs;
  ActivationPairBatch heldout;
  if (!pairs_path.empty()) {
    ActivationPairBatch all = load_activation_dump(pairs_path);
    const int64_t rows = all.rows();
    if (rows < 2) throw config_error("stitch: need at least 2 rows");
    const int64_t held = std::max<int64_t>(1, rows / 10);
    std::vector<uint8_t> keep_train(rows, 1);
    for (int64_t r = rows - held; r < rows; ++r) keep_train[r] = 0;
    ActivationPairBatch train_part = filter_rows(all, keep_train);
    for (auto& k : keep_train) k = !k;
    heldout = filter_rows(all, keep_train);
    train_pairs.push_back(std::move(train_part));
  } else {
    const ExperimentConfig cfg = resolve_config(o);
    if (cfg.seeds.size() != 1) throw config_error("stitch: pass --seed");
    const ConceptBank bank = build_concept_bank(cfg.toy, cfg.seeds[0]);
    ToyBatchSource stream(bank, cfg.train.batch, cfg.toy.sigma_noise,
                          derive_seed(cfg.seeds[0], SeedDomain::Stitch));
    const int64_t n_batches = (pairs_count + cfg.train.batch - 1) / cfg.train.batch;
    for (int64_t i = 0; i < n_batches; ++i) train_pairs.push_back(stream.next());
    heldout = stream.next();
  }
  const StitchMap map = fit_stitch(train_pairs, heldout, ridge, inversion_weight, true);
  const std::string out_path = o.out.empty() ? "stitch.xstc" : o.out;
  save_stitch(map, out_path);
  std::cout << "fit_mse " << map.fit_mse << " fit_mse_inverse " << map.fit_mse_inverse
            << " -> " << out_path << "\n";
  return 0;
}

int cmd_inspect(const std::string& path) {
  const CrosscoderModel m = load_checkpoint(path);
  std::cout << "arch " << arch_name(m.arch) << "\n"
            << "d_a " << m.d_a << " d_b " << m.d_b << " M " << m.dict_size << " k " << m.k << "\n"
            << "partitions a_exclusive [" << m.layout.a_exclusive.begin << ","
            << m.layout.a_exclusive.end << ") b_exclusive [" << m.layout.b_exclusive.begin << ","
            << m.layout.b_exclusive.end << ") shared [" << m.layout.shared.begin << ","
            << m.layout.shared.end << ")\n";
  if (m.dsf_designated) {
    std::cout << "dsf designated [" << m.dsf_designated->range.begin << ","
              << m.dsf_designated->range.end << ") multiplier " << m.dsf_designated->k_multiplier
              << "\n";
  }
  auto tensor_stats = [](const char* name, const Mat& t) {
    double mn = 0, mx = 0, sq = 0;
    if (!t.data.empty()) {
      mn = mx = t.data[0];
      for (double v : t.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
        sq += v * v;
      }
    }
    std::cout << name << " " << t.rows << "x" << t.cols << " min " << format_double(mn) << " max "
              << format_double(mx) << " fro " << format_double(std::sqrt(sq)) << "\n";
  };
  tensor_stats("w_enc_a", m.w_enc_a);
  tensor_stats("w_enc_b", m.w_enc_b);
  tensor_stats("w_dec_a", m.w_dec_a);
  tensor_stats("w_dec_b", m.w_dec_b);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crossdiff: a desk-scale laboratory for cross-architecture crosscoder diffing"};
  app.require_subcommand(1);

  CommonOpts opts;
  app.add_option("--threads", opts.threads, "OpenMP thread count (0 = library default)");

  auto add_common = [&](CLI::App* sub, bool with_out = true) {
    sub->add_option("--config", opts.config_path, "experiment config JSON");
    sub->add_option("--preset", opts.preset, "desk|paper preset")
        ->check(CLI::IsMember({"desk", "paper"}));
    sub->add_option("--seed", opts.seed, "override the seed list with one seed");
    if (with_out) sub->add_option("--out", opts.out, "output directory / file");
  };

  CLI::App* run = app.add_subcommand("run", "run the full experiment (train + evaluate)");
  add_common(run);

  CLI::App* sweep = app.add_subcommand("sweep", "recovery vs dictionary size sweep");
  add_common(sweep);
  std::vector<int64_t> dict_sizes;
  sweep->add_option("--dict-sizes", dict_sizes, "dictionary sizes to sweep")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint against its toy bank");
  add_common(eval);
  std::string checkpoint_path;
  eval->add_option("--checkpoint", checkpoint_path, "XCKP checkpoint path")->required();

  CLI::App* alignc = app.add_subcommand("align", "align two token-id streams");
  std::string tokens_a, tokens_b, fixtures;
  int64_t max_window = 16;
  alignc->add_option("--tokens-a", tokens_a, "token ids for model A (one doc per line)")->required();
  alignc->add_option("--tokens-b", tokens_b, "token ids for model B")->required();
  alignc->add_option("--fixtures", fixtures, "tokenizer fixture spec JSON")->required();
  alignc->add_option("--max-window", max_window, "window expansion bound");
  alignc->add_option("--out", opts.out, "output directory");

  CLI::App* stitch = app.add_subcommand("stitch", "fit an affine stitch map");
  add_common(stitch);
  std::string pairs_path;
  int64_t pairs_count = 100000;
  double ridge = 1e-6, inversion_weight = 0.0;
  stitch->add_option("--pairs", pairs_path, "XDIF activation dump (otherwise toy pairs)");
  stitch->add_option("--pairs-count", pairs_count, "toy pairs to generate");
  stitch->add_option("--ridge", ridge, "ridge strength (trace-scaled)");
  stitch->add_option("--inversion-weight", inversion_weight, "round-trip penalty weight");

  CLI::App* plot = app.add_subcommand("plot-data", "emit plot CSV bundles for a finished run");
  std::string plot_dir;
  plot->add_option("--dir", plot_dir, "experiment output directory")->required();

  CLI::App* inspect = app.add_subcommand("inspect-checkpoint", "print checkpoint header and stats");
  std::string inspect_path;
  inspect->add_option("--checkpoint", inspect_path, "XCKP checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (opts.threads > 0) omp_set_num_threads(opts.threads);

  try {
    if (run->parsed()) return cmd_run(opts);
    if (sweep->parsed()) return cmd_sweep(opts, dict_sizes);
    if (eval->parsed()) return cmd_eval(opts, checkpoint_path);
    if (alignc->parsed())
      return cmd_align(tokens_a, tokens_b, fixtures, opts.out.empty() ? "." : opts.out, max_window);
    if (stitch->parsed()) return cmd_stitch(opts, pairs_path, pairs_count, ridge, inversion_weight);
    if (plot->parsed()) {
      emit_plot_data(plot_dir);
      std::cout << "wrote plot_data under " << plot_dir << "\n";
      return 0;
    }
    if (inspect->parsed()) return cmd_inspect(inspect_path);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
