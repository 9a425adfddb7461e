#include "crossdiff/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "crossdiff/errors.hpp"

namespace crossdiff {

PartitionLayout ArchSpec::make_layout() const {
  if (arch == Arch::DFC) {
    const int64_t n_a = std::llround(exclusive_frac_a * static_cast<double>(M));
    const int64_t n_b = std::llround(exclusive_frac_b * static_cast<double>(M));
    return PartitionLayout::dfc(M, n_a, n_b);
  }
  return PartitionLayout::standard(M);
}

std::optional<DsfDesignated> ArchSpec::make_dsf() const {
  if (arch != Arch::DSF) return std::nullopt;
  DsfDesignated d;
  const int64_t n = std::llround(dsf_fraction * static_cast<double>(M));
  d.range = {0, n};
  d.k_multiplier = dsf_k_multiplier;
  return d;
}

void ExperimentConfig::validate() const {
  toy.validate();
  train.validate();
  if (archs.empty()) throw config_error("ExperimentConfig.archs must be nonempty");
  if (seeds.empty()) throw config_error("ExperimentConfig.seeds must be nonempty");
  std::set<std::string> labels;
  for (const ArchSpec& a : archs) {
    if (a.M < 1) throw config_error("ArchSpec.M must be >= 1");
    if (a.M < train.k_final) throw config_error("ArchSpec.M must be >= TrainConfig.k_final");
    if (a.arch == Arch::DFC) {
      if (a.exclusive_frac_a < 0.0 || a.exclusive_frac_b < 0.0 ||
          a.exclusive_frac_a + a.exclusive_frac_b >= 1.0) {
        throw config_error(
            "ArchSpec.exclusive_frac_a/b must be >= 0 and sum below 1 (fractions sum to 1 with "
            "the shared remainder)");
      }
    }
    if (a.arch == Arch::DSF) {
      if (a.dsf_fraction <= 0.0 || a.dsf_fraction >= 1.0)
        throw config_error("ArchSpec.dsf_fraction must be in (0, 1)");
      if (a.dsf_k_multiplier <= 0.0) throw config_error("ArchSpec.dsf_k_multiplier must be > 0");
    }
    const std::string label = a.label.empty() ? arch_name(a.arch) : a.label;
    if (!labels.insert(label).second)
      throw config_error("duplicate arch label '" + label + "' (set ArchSpec.label)");
  }
  if (eval.theta_recovery <= 0.0 || eval.theta_recovery >= 1.0)
    throw config_error("EvalConfig.theta_recovery must be in (0, 1)");
  if (!(0.0 < eval.theta_low && eval.theta_low < eval.theta_high && eval.theta_high < 1.0))
    throw config_error("EvalConfig thresholds need 0 < theta_low < theta_high < 1");
  if (eval.heldout_rows < 0) throw config_error("EvalConfig.heldout_rows must be >= 0");
  if (eval.stitch_pairs < 1) throw config_error("EvalConfig.stitch_pairs must be >= 1");
  if (eval.stitch_ridge < 0.0) throw config_error("EvalConfig.stitch_ridge must be >= 0");
  if (init_decoder_norm <= 0.0) throw config_error("ExperimentConfig.init_decoder_norm must be > 0");
  if (output_dir.empty()) throw config_error("ExperimentConfig.output_dir must be nonempty");
}

ExperimentConfig paper_preset() {
  ExperimentConfig cfg;
  cfg.toy = ToyConfig{};  // 2048 concepts, d_act 256
  cfg.train.lr = 1e-4;
  cfg.train.steps = 100000;
  cfg.train.warmup_steps = 1000;
  cfg.train.batch = 2048;
  cfg.train.k_final = 200;
  cfg.train.k_initial = 1000;
  cfg.train.anneal_steps = 5000;
  cfg.train.alpha_aux = 0.03;
  cfg.train.k_aux = 512;
  cfg.train.dead_window_tokens = 10000000;
  cfg.train.eval_every = 1000;
  cfg.archs = {
      {Arch::Standard, 2048, 0.05, 0.05, 0.1, 2.0, ""},
      {Arch::DFC, 2048, 0.05, 0.05, 0.1, 2.0, ""},
      {Arch::DSF, 2048, 0.05, 0.05, 0.1, 2.0, ""},
  };
  return cfg;
}

ExperimentConfig desk_preset() {
  ExperimentConfig cfg;
  cfg.toy = ToyConfig{};
  cfg.toy.n_concepts = 256;
  cfg.toy.d_act = 64;
  cfg.train.lr = 1e-4;
  cfg.train.steps = 20000;
  cfg.train.warmup_steps = 1000;
  cfg.train.batch = 256;
  cfg.train.k_final = 8;
  // Fixed sparsity from step 0 (the annealed schedule stays available via
  // config, as in the paper preset).
  cfg.train.k_initial = 8;
  cfg.train.anneal_steps = 0;
  cfg.train.alpha_aux = 0.03;
  cfg.train.k_aux = 512;
  cfg.train.dead_window_tokens = 50 * 256;
  cfg.train.eval_every = 250;
  cfg.archs = {
      {Arch::Standard, 256, 0.05, 0.05, 0.1, 2.0, ""},
      {Arch::DFC, 256, 0.05, 0.05, 0.1, 2.0, ""},
  };
  return cfg;
}

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw config_error("unknown config field '" + where + "." + it.key() + "'");
  }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

void parse_toy(const json& j, ToyConfig& t) {
  check_keys(j,
             {"n_concepts", "d_act", "r_exclusive", "k_target", "rank", "lambda", "tau",
              "sigma_noise", "eps_min", "sigma_diag", "identity_transform"},
             "toy");
  get_to(j, "n_concepts", t.n_concepts);
  get_to(j, "d_act", t.d_act);
  get_to(j, "r_exclusive", t.r_exclusive);
  get_to(j, "k_target", t.k_target);
  get_to(j, "rank", t.corr_rank);
  get_to(j, "lambda", t.decay_lambda);
  get_to(j, "tau", t.tau);
  get_to(j, "sigma_noise", t.sigma_noise);
  get_to(j, "eps_min", t.eps_min);
  get_to(j, "sigma_diag", t.sigma_diag);
  get_to(j, "identity_transform", t.identity_transform);
}

void parse_train(const json& j, TrainConfig& t) {
  check_keys(j,
             {"lr", "steps", "warmup_steps", "batch", "k_final", "k_initial", "anneal_steps",
              "alpha_aux", "k_aux", "dead_window_tokens", "outlier_factor", "adam_beta1",
              "adam_beta2", "adam_eps", "calibration_batches", "checkpoint_every", "eval_every"},
             "train");
  get_to(j, "lr", t.lr);
  get_to(j, "steps", t.steps);
  get_to(j, "warmup_steps", t.warmup_steps);
  get_to(j, "batch", t.batch);
  get_to(j, "k_final", t.k_final);
  get_to(j, "k_initial", t.k_initial);
  get_to(j, "anneal_steps", t.anneal_steps);
  get_to(j, "alpha_aux", t.alpha_aux);
  get_to(j, "k_aux", t.k_aux);
  get_to(j, "dead_window_tokens", t.dead_window_tokens);
  get_to(j, "outlier_factor", t.outlier_factor);
  get_to(j, "adam_beta1", t.adam_beta1);
  get_to(j, "adam_beta2", t.adam_beta2);
  get_to(j, "adam_eps", t.adam_eps);
  get_to(j, "calibration_batches", t.calibration_batches);
  get_to(j, "checkpoint_every", t.checkpoint_every);
  get_to(j, "eval_every", t.eval_every);
}

void parse_eval(const json& j, EvalConfig& e) {
  check_keys(j,
             {"theta_recovery", "theta_low", "theta_high", "heldout_rows", "exclusivity_proxy",
              "stitch_pairs", "stitch_ridge"},
             "eval");
  get_to(j, "theta_recovery", e.theta_recovery);
  get_to(j, "theta_low", e.theta_low);
  get_to(j, "theta_high", e.theta_high);
  get_to(j, "heldout_rows", e.heldout_rows);
  get_to(j, "exclusivity_proxy", e.exclusivity_proxy);
  get_to(j, "stitch_pairs", e.stitch_pairs);
  get_to(j, "stitch_ridge", e.stitch_ridge);
}

ArchSpec parse_arch(const json& j) {
  check_keys(j,
             {"arch", "M", "exclusive_frac_a", "exclusive_frac_b", "dsf_fraction",
              "dsf_k_multiplier", "label"},
             "archs[]");
  ArchSpec a;
  if (!j.contains("arch")) throw config_error("archs[].arch is required");
  a.arch = arch_from_name(j.at("arch").get<std::string>());
  get_to(j, "M", a.M);
  get_to(j, "exclusive_frac_a", a.exclusive_frac_a);
  get_to(j, "exclusive_frac_b", a.exclusive_frac_b);
  get_to(j, "dsf_fraction", a.dsf_fraction);
  get_to(j, "dsf_k_multiplier", a.dsf_k_multiplier);
  get_to(j, "label", a.label);
  return a;
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
  check_keys(j, {"preset", "toy", "archs", "train", "eval", "seeds", "output_dir",
                 "init_decoder_norm"},
             "");
  ExperimentConfig cfg = desk_preset();
  if (j.contains("preset")) {
    const std::string p = j.at("preset").get<std::string>();
    if (p == "paper") {
      cfg = paper_preset();
    } else if (p == "desk") {
      cfg = desk_preset();
    } else {
      throw config_error("unknown preset '" + p + "' (expected desk|paper)");
    }
  }
  if (j.contains("toy")) parse_toy(j.at("toy"), cfg.toy);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("eval")) parse_eval(j.at("eval"), cfg.eval);
  if (j.contains("archs")) {
    cfg.archs.clear();
    for (const auto& a : j.at("archs")) cfg.archs.push_back(parse_arch(a));
  }
  if (j.contains("seeds")) j.at("seeds").get_to(cfg.seeds);
  if (j.contains("output_dir")) j.at("output_dir").get_to(cfg.output_dir);
  if (j.contains("init_decoder_norm")) j.at("init_decoder_norm").get_to(cfg.init_decoder_norm);
  cfg.validate();
  return cfg;
}

nlohmann::json effective_config_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["toy"] = {
      {"n_concepts", cfg.toy.n_concepts},
      {"d_act", cfg.toy.d_act},
      {"r_exclusive", cfg.toy.r_exclusive},
      {"k_target", cfg.toy.k_target},
      {"rank", cfg.toy.corr_rank},
      {"lambda", cfg.toy.decay_lambda},
      {"tau", cfg.toy.tau},
      {"sigma_noise", cfg.toy.sigma_noise},
      {"eps_min", cfg.toy.eps_min},
      {"sigma_diag", cfg.toy.sigma_diag},
      {"identity_transform", cfg.toy.identity_transform},
  };
  j["train"] = {
      {"lr", cfg.train.lr},
      {"steps", cfg.train.steps},
      {"warmup_steps", cfg.train.warmup_steps},
      {"batch", cfg.train.batch},
      {"k_final", cfg.train.k_final},
      {"k_initial", cfg.train.k_initial},
      {"anneal_steps", cfg.train.anneal_steps},
      {"alpha_aux", cfg.train.alpha_aux},
      {"k_aux", cfg.train.k_aux},
      {"dead_window_tokens", cfg.train.dead_window_tokens},
      {"outlier_factor", cfg.train.outlier_factor},
      {"adam_beta1", cfg.train.adam_beta1},
      {"adam_beta2", cfg.train.adam_beta2},
      {"adam_eps", cfg.train.adam_eps},
      {"calibration_batches", cfg.train.calibration_batches},
      {"checkpoint_every", cfg.train.checkpoint_every},
      {"eval_every", cfg.train.eval_every},
  };
  j["eval"] = {
      {"theta_recovery", cfg.eval.theta_recovery},
      {"theta_low", cfg.eval.theta_low},
      {"theta_high", cfg.eval.theta_high},
      {"heldout_rows", cfg.eval.heldout_rows},
      {"exclusivity_proxy", cfg.eval.exclusivity_proxy},
      {"stitch_pairs", cfg.eval.stitch_pairs},
      {"stitch_ridge", cfg.eval.stitch_ridge},
  };
  j["archs"] = nlohmann::json::array();
  for (const ArchSpec& a : cfg.archs) {
    j["archs"].push_back({
        {"arch", arch_name(a.arch)},
        {"M", a.M},
        {"exclusive_frac_a", a.exclusive_frac_a},
        {"exclusive_frac_b", a.exclusive_frac_b},
        {"dsf_fraction", a.dsf_fraction},
        {"dsf_k_multiplier", a.dsf_k_multiplier},
        {"label", a.label},
    });
  }
  j["seeds"] = cfg.seeds;
  j["output_dir"] = cfg.output_dir;
  j["init_decoder_norm"] = cfg.init_decoder_norm;
  return j;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace crossdiff
