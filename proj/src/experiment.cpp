#include "crossdiff/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "crossdiff/checkpoint.hpp"
#include "crossdiff/errors.hpp"
#include "crossdiff/training.hpp"
#include "crossdiff/transfer.hpp"

namespace fs = std::filesystem;

namespace crossdiff {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

namespace {

std::string opt_str(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string("na");
}

std::string run_label(const ArchSpec& spec) {
  return spec.label.empty() ? arch_name(spec.arch) : spec.label;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  out << content;
  out.close();
  if (!out) throw io_error("write failed: " + path);
}

nlohmann::json opt_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

std::string curve_csv(const std::vector<RecoveryPoint>& curve) {
  std::string s = "step,shared,a_excl,b_excl,fp_rate\n";
  for (const RecoveryPoint& p : curve) {
    s += std::to_string(p.step) + "," + opt_str(p.shared) + "," + opt_str(p.a_excl) + "," +
         opt_str(p.b_excl) + "," + opt_str(p.fp_rate) + "\n";
  }
  return s;
}

std::string metrics_jsonl(const std::vector<MetricsRecord>& metrics) {
  std::string s;
  for (const MetricsRecord& m : metrics) {
    nlohmann::json j = {
        {"step", m.step},         {"loss_recon_a", m.loss_recon_a},
        {"loss_recon_b", m.loss_recon_b}, {"loss_aux", m.loss_aux},
        {"k", m.k},               {"lr", m.lr},
        {"dead_frac", m.dead_frac}, {"fve_a", m.fve_a},
        {"fve_b", m.fve_b},
    };
    s += j.dump() + "\n";
  }
  return s;
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& report, const std::string& label, Arch arch,
                              int64_t M, uint64_t seed) {
  nlohmann::json j;
  j["meta"] = {{"label", label}, {"arch", arch_name(arch)}, {"M", M}, {"seed", seed}};
  j["recovery"] = {
      {"total", opt_json(report.recovery_total)},
      {"shared", opt_json(report.recovery_shared)},
      {"a_exclusive", opt_json(report.recovery_a_excl)},
      {"b_exclusive", opt_json(report.recovery_b_excl)},
      {"exclusive_combined", opt_json(report.recovery_excl_combined)},
  };
  j["false_positives"] = {
      {"rate", opt_json(report.false_positive_rate)},
      {"shared_as_exclusive", report.fp_shared_as_exclusive},
      {"no_concept", report.fp_no_concept},
      {"exclusive_classified", report.exclusive_classified},
  };
  j["fve"] = {{"a", report.fve_a}, {"b", report.fve_b}};
  j["dead_fraction"] = report.dead_fraction;
  j["relative_norm_histogram"] = {
      {"bins", report.relative_norm_histogram.size()},
      {"lo", 0.0},
      {"hi", 1.0},
      {"counts", report.relative_norm_histogram},
  };
  nlohmann::json matches = nlohmann::json::array();
  for (const Match& m : report.matches) {
    matches.push_back({m.feature, m.concept_idx, m.cosine,
                       m.category == ConceptClass::Shared       ? "shared"
                       : m.category == ConceptClass::AExclusive ? "a_exclusive"
                                                                : "b_exclusive"});
  }
  j["matches"] = std::move(matches);
  std::map<std::string, int64_t> class_counts;
  for (FeatureClass c : report.classes) class_counts[feature_class_name(c)]++;
  j["classification_counts"] = class_counts;
  j["detection_score"] = opt_json(report.detection_score);
  if (!report.exclusivity_proxy.empty()) {
    nlohmann::json ex = nlohmann::json::array();
    for (const ExclusivityRecord& r : report.exclusivity_proxy) {
      ex.push_back({r.feature, r.score, feature_class_name(r.cls)});
    }
    j["exclusivity_proxy"] = std::move(ex);
  }
  return j;
}

RunSummary run_single(const ExperimentConfig& cfg, const ArchSpec& spec, uint64_t seed,
                      const std::string& run_dir) {
  RunSummary out;
  out.label = run_label(spec);
  out.arch = spec.arch;
  out.M = spec.M;
  out.seed = seed;

  const ConceptBank bank = build_concept_bank(cfg.toy, seed);
  CrosscoderModel model =
      init_model(spec.arch, cfg.toy.d_act, cfg.toy.d_act, spec.M, cfg.train.k_final,
                 spec.make_layout(), cfg.init_decoder_norm, seed, spec.make_dsf());

  ToyBatchSource stream(bank, cfg.train.batch, cfg.toy.sigma_noise,
                        derive_seed(seed, SeedDomain::DataStream));

  if (!run_dir.empty()) {
    fs::create_directories(run_dir + "/checkpoints");
    write_file(run_dir + "/effective_config.json", effective_config_json(cfg).dump(2) + "\n");
  }

  const EvalThresholds th{cfg.eval.theta_recovery, cfg.eval.theta_low, cfg.eval.theta_high};
  TrainHooks hooks;
  hooks.on_eval = [&](int64_t step, const CrosscoderModel& m, const TrainState& state) {
    EvalReport rep;
    rep.matches = match_concepts(m, bank, th.theta_recovery);
    rep.classes = classify_features(m, th.theta_low, th.theta_high,
                                    dead_features(state, cfg.train.dead_window_tokens));
    recovery_and_fp(rep.matches, rep.classes, bank, rep);
    out.curve.push_back(
        {step, rep.recovery_shared, rep.recovery_a_excl, rep.recovery_b_excl,
         rep.false_positive_rate});
  };
  if (!run_dir.empty() && cfg.train.checkpoint_every > 0) {
    hooks.on_checkpoint = [&](int64_t step, const CrosscoderModel& m, const TrainState&) {
      char name[32];
      std::snprintf(name, sizeof(name), "step_%08lld.xckp", static_cast<long long>(step));
      save_checkpoint(m, run_dir + "/checkpoints/" + name);
    };
  }

  TrainResult tr = train(model, stream, cfg.train, hooks);
  out.scale_a = tr.state.norm_scale_a;
  out.scale_b = tr.state.norm_scale_b;

  const std::vector<int32_t> dead = dead_features(tr.state, cfg.train.dead_window_tokens);
  ToyBatchSource heldout(bank, cfg.train.batch, cfg.toy.sigma_noise,
                         derive_seed(seed, SeedDomain::Heldout));
  out.report = evaluate(model, bank, th, dead, cfg.eval.heldout_rows > 0 ? &heldout : nullptr,
                        cfg.eval.heldout_rows, tr.state.norm_scale_a, tr.state.norm_scale_b);

  if (cfg.eval.exclusivity_proxy) {
    const int64_t n_batches =
        (cfg.eval.stitch_pairs + cfg.train.batch - 1) / cfg.train.batch;
    ToyBatchSource stitch_stream(bank, cfg.train.batch, cfg.toy.sigma_noise,
                                 derive_seed(seed, SeedDomain::Stitch));
    std::vector<ActivationPairBatch> train_pairs;
    train_pairs.reserve(n_batches);
    for (int64_t i = 0; i < n_batches; ++i) train_pairs.push_back(stitch_stream.next());
    const ActivationPairBatch stitch_heldout = stitch_stream.next();
    // The stitch is fitted in the model's normalized coordinates so decoder
    // directions and data go through the same frames.
    for (auto& b : train_pairs) {
      for (double& v : b.x_a.data) v *= tr.state.norm_scale_a;
      for (double& v : b.x_b.data) v *= tr.state.norm_scale_b;
    }
    ActivationPairBatch ho = stitch_heldout;
    for (double& v : ho.x_a.data) v *= tr.state.norm_scale_a;
    for (double& v : ho.x_b.data) v *= tr.state.norm_scale_b;
    const StitchMap stitch = fit_stitch(train_pairs, ho, cfg.eval.stitch_ridge, 0.0, true);

    // The proxy compares stitched directions against the bank's raw frames;
    // normalization is a per-model scalar, so directions are unaffected by it
    // except through the fitted map, which absorbs the ratio.
    out.report.exclusivity_proxy = exclusivity_proxy_all(model, stitch, bank, out.report.classes);
    if (!run_dir.empty()) save_stitch(stitch, run_dir + "/stitch.xstc");
  }

  out.recovery_excl_combined = out.report.recovery_excl_combined;

  if (!run_dir.empty()) {
    save_checkpoint(model, run_dir + "/checkpoints/final.xckp");
    write_file(run_dir + "/metrics.jsonl", metrics_jsonl(tr.metrics));
    write_file(run_dir + "/report.json",
               report_to_json(out.report, out.label, out.arch, out.M, seed).dump(2) + "\n");
    if (!out.curve.empty()) write_file(run_dir + "/curve.csv", curve_csv(out.curve));
  }
  return out;
}

namespace {

struct Stats {
  double mean = 0.0;
  double se = 0.0;
  int64_t n = 0;
};

Stats mean_se(const std::vector<double>& xs) {
  Stats s;
  s.n = static_cast<int64_t>(xs.size());
  if (s.n == 0) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(s.n);
  if (s.n > 1) {
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    var /= static_cast<double>(s.n - 1);
    s.se = std::sqrt(var / static_cast<double>(s.n));
  }
  return s;
}

std::string stats_str(const Stats& s) {
  if (s.n == 0) return "na,na";
  return format_double(s.mean) + "," + format_double(s.se);
}

}  // namespace

void write_aggregate_csv(const std::vector<RunSummary>& summaries, const std::string& path) {
  std::map<std::pair<std::string, int64_t>, std::vector<const RunSummary*>> groups;
  for (const RunSummary& s : summaries) groups[{s.label, s.M}].push_back(&s);
  std::string csv =
      "label,M,seeds,recovery_excl_mean,recovery_excl_se,recovery_shared_mean,"
      "recovery_shared_se,fpr_mean,fpr_se,fve_a_mean,fve_b_mean,dead_frac_mean\n";
  for (const auto& [key, runs] : groups) {
    std::vector<double> excl, shared, fpr, fa, fb, deadf;
    for (const RunSummary* r : runs) {
      if (r->recovery_excl_combined) excl.push_back(*r->recovery_excl_combined);
      if (r->report.recovery_shared) shared.push_back(*r->report.recovery_shared);
      if (r->report.false_positive_rate) fpr.push_back(*r->report.false_positive_rate);
      fa.push_back(r->report.fve_a);
      fb.push_back(r->report.fve_b);
      deadf.push_back(r->report.dead_fraction);
    }
    csv += key.first + "," + std::to_string(key.second) + "," + std::to_string(runs.size()) + "," +
           stats_str(mean_se(excl)) + "," + stats_str(mean_se(shared)) + "," +
           stats_str(mean_se(fpr)) + "," + format_double(mean_se(fa).mean) + "," +
           format_double(mean_se(fb).mean) + "," + format_double(mean_se(deadf).mean) + "\n";
  }
  write_file(path, csv);
}

void write_sweep_csv(const std::vector<RunSummary>& summaries, const std::string& path) {
  std::string csv = "arch,M,seed,recovery_excl,recovery_shared,fpr\n";
  for (const RunSummary& s : summaries) {
    csv += std::string(arch_name(s.arch)) + "," + std::to_string(s.M) + "," +
           std::to_string(s.seed) + "," + opt_str(s.recovery_excl_combined) + "," +
           opt_str(s.report.recovery_shared) + "," + opt_str(s.report.false_positive_rate) + "\n";
  }
  write_file(path, csv);
}

std::vector<RunSummary> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.output_dir);
  write_file(cfg.output_dir + "/effective_config.json",
             effective_config_json(cfg).dump(2) + "\n");
  std::vector<RunSummary> summaries;
  for (const ArchSpec& spec : cfg.archs) {
    for (uint64_t seed : cfg.seeds) {
      const std::string dir =
          cfg.output_dir + "/" + run_label(spec) + "/" + std::to_string(seed);
      summaries.push_back(run_single(cfg, spec, seed, dir));
    }
  }
  write_aggregate_csv(summaries, cfg.output_dir + "/aggregate.csv");
  return summaries;
}

std::vector<RunSummary> sweep_dictionary(const ExperimentConfig& cfg,
                                         const std::vector<int64_t>& dict_sizes) {
  cfg.validate();
  if (dict_sizes.empty()) throw config_error("sweep: dictionary sizes must be nonempty");
  for (int64_t m : dict_sizes) {
    if (m < cfg.train.k_final)
      throw config_error("sweep: dictionary size " + std::to_string(m) + " below k_final");
  }
  fs::create_directories(cfg.output_dir);
  write_file(cfg.output_dir + "/effective_config.json",
             effective_config_json(cfg).dump(2) + "\n");
  std::vector<RunSummary> summaries;
  for (const ArchSpec& base : cfg.archs) {
    for (int64_t m : dict_sizes) {
      ArchSpec spec = base;
      spec.M = m;
      spec.label = run_label(base) + "-m" + std::to_string(m);
      for (uint64_t seed : cfg.seeds) {
        const std::string dir =
            cfg.output_dir + "/" + spec.label + "/" + std::to_string(seed);
        summaries.push_back(run_single(cfg, spec, seed, dir));
      }
    }
  }
  write_sweep_csv(summaries, cfg.output_dir + "/sweep.csv");
  write_aggregate_csv(summaries, cfg.output_dir + "/aggregate.csv");
  return summaries;
}

void emit_plot_data(const std::string& experiment_dir) {
  const std::string cfg_path = experiment_dir + "/effective_config.json";
  if (!fs::exists(cfg_path)) throw io_error("emit_plot_data: missing " + cfg_path);

  // Enumerate run directories (label/seed) that exist on disk.
  std::vector<std::tuple<std::string, std::string, std::string>> runs;  // label, seed, dir
  std::vector<std::string> missing;
  for (const auto& label_entry : fs::directory_iterator(experiment_dir)) {
    if (!label_entry.is_directory() || label_entry.path().filename() == "plot_data") continue;
    for (const auto& seed_entry : fs::directory_iterator(label_entry.path())) {
      if (!seed_entry.is_directory()) continue;
      const std::string rep = seed_entry.path().string() + "/report.json";
      if (!fs::exists(rep)) {
        missing.push_back(rep);
      } else {
        runs.emplace_back(label_entry.path().filename().string(),
                          seed_entry.path().filename().string(), seed_entry.path().string());
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "emit_plot_data: missing reports:";
    for (const std::string& m : missing) msg += " " + m;
    throw io_error(msg);
  }
  if (runs.empty()) throw io_error("emit_plot_data: no completed runs under " + experiment_dir);
  std::sort(runs.begin(), runs.end());

  fs::create_directories(experiment_dir + "/plot_data");

  // Recovery curves (learning-dynamics plot).
  std::string curves = "label,seed,step,shared,a_excl,b_excl,fp_rate\n";
  bool any_curve = false;
  for (const auto& [label, seed, dir] : runs) {
    const std::string cpath = dir + "/curve.csv";
    if (!fs::exists(cpath)) {
      std::cerr << "warning: no recovery curve for " << dir << " (run without inline evals)\n";
      continue;
    }
    std::ifstream in(cpath);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (!line.empty()) curves += label + "," + seed + "," + line + "\n";
    }
    any_curve = true;
  }
  if (any_curve) {
    write_file(experiment_dir + "/plot_data/recovery_curves.csv", curves);
  } else {
    std::cerr << "warning: recovery-curve CSV skipped (no curves present)\n";
  }

  // Relative-norm histogram and FP breakdown from the reports.
  std::map<std::string, std::vector<int64_t>> hist_by_label;
  std::string fp = "label,M,seed,fp_shared_as_exclusive,fp_no_concept,exclusive_classified,fp_rate\n";
  for (const auto& [label, seed, dir] : runs) {
    std::ifstream in(dir + "/report.json");
    nlohmann::json j;
    in >> j;
    const auto& counts = j.at("relative_norm_histogram").at("counts");
    auto& acc = hist_by_label[label];
    if (acc.empty()) acc.assign(counts.size(), 0);
    for (size_t i = 0; i < counts.size(); ++i) acc[i] += counts[i].get<int64_t>();
    const auto& f = j.at("false_positives");
    fp += label + "," + j.at("meta").at("M").dump() + "," + seed + "," +
          f.at("shared_as_exclusive").dump() + "," + f.at("no_concept").dump() + "," +
          f.at("exclusive_classified").dump() + "," +
          (f.at("rate").is_null() ? "na" : format_double(f.at("rate").get<double>())) + "\n";
  }
  std::string hist = "label,bin_lo,bin_hi,count\n";
  for (const auto& [label, counts] : hist_by_label) {
    const double width = 1.0 / static_cast<double>(counts.size());
    for (size_t i = 0; i < counts.size(); ++i) {
      hist += label + "," + format_double(width * static_cast<double>(i)) + "," +
              format_double(width * static_cast<double>(i + 1)) + "," +
              std::to_string(counts[i]) + "\n";
    }
  }
  write_file(experiment_dir + "/plot_data/relative_norm_histogram.csv", hist);
  write_file(experiment_dir + "/plot_data/fp_breakdown.csv", fp);
}

}  // namespace crossdiff
