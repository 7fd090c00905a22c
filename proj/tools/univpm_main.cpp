// Command-line entry point: corpus generation, training (with ablation
// variants), evaluation, and the uniform-effect clustering demo.

#include <univpm/benchmark.hpp>
#include <univpm/univpm.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

namespace fs = std::filesystem;
using namespace univpm;

namespace {

std::map<std::string, std::string> load_entries(const std::string& config_path,
                                                std::string* raw_text) {
  if (config_path.empty()) return {};
  std::string text = read_text_file(config_path);
  if (raw_text != nullptr) *raw_text = text;
  return parse_flat_config(text);
}

std::map<std::string, std::string> corpus_snapshot(const CorpusConfig& cfg, int sequences) {
  std::map<std::string, std::string> snap;
  snap["phoneme_count"] = std::to_string(cfg.phoneme_count);
  snap["viseme_count"] = std::to_string(cfg.viseme_count);
  snap["feature_dim"] = std::to_string(cfg.feature_dim);
  snap["frames_per_sequence"] = std::to_string(cfg.frames_per_sequence);
  snap["zipf_exponent"] = std::to_string(cfg.zipf_exponent);
  snap["noise_snr_db"] =
      cfg.noise_snr_db.has_value() ? std::to_string(*cfg.noise_snr_db) : "none";
  snap["seed"] = std::to_string(cfg.seed);
  snap["sample_seed"] = std::to_string(cfg.sample_seed);
  snap["prototype_radius"] = std::to_string(cfg.prototype_radius);
  snap["base_spread"] = std::to_string(cfg.base_spread);
  snap["homophene_spread_ratio"] = std::to_string(cfg.homophene_spread_ratio);
  snap["head_spread"] = std::to_string(cfg.head_spread);
  snap["cross_modal_correlation"] = std::to_string(cfg.cross_modal_correlation);
  snap["sequences"] = std::to_string(sequences);
  return snap;
}

std::map<std::string, std::string> trainer_snapshot(const TrainerConfig& cfg) {
  std::map<std::string, std::string> snap;
  snap["lambda_gan"] = std::to_string(cfg.lambda_gan);
  snap["lambda_rec"] = std::to_string(cfg.lambda_rec);
  snap["lambda_var"] = std::to_string(cfg.lambda_var);
  snap["bank_update_interval_epochs"] = std::to_string(cfg.bank_update_interval_epochs);
  snap["epochs"] = std::to_string(cfg.epochs);
  snap["batch_sequences"] = std::to_string(cfg.batch_sequences);
  snap["lr_generator"] = std::to_string(cfg.lr_generator);
  snap["lr_discriminator"] = std::to_string(cfg.lr_discriminator);
  snap["seed"] = std::to_string(cfg.seed);
  snap["temperature"] = std::to_string(cfg.temperature);
  snap["bank_clusters"] = std::to_string(cfg.bank_clusters);
  snap["bank_max_size"] = std::to_string(cfg.bank_max_size);
  snap["bank_init_buffer"] = std::to_string(cfg.bank_init_buffer);
  snap["encoder_hidden"] = std::to_string(cfg.encoder_hidden);
  snap["statistic_hidden"] = std::to_string(cfg.statistic_hidden);
  snap["encoder_init_gain"] = std::to_string(cfg.encoder_init_gain);
  snap["noisy_probability"] = std::to_string(cfg.noisy_probability);
  snap["noisy_stream"] = cfg.uses_noisy_stream() ? "true" : "false";
  snap["variant"] = variant_name(cfg.variant);
  snap["freeze_banks"] = cfg.freeze_banks ? "true" : "false";
  snap["literal_var_sign"] = cfg.literal_var_sign ? "true" : "false";
  return snap;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 int sequences, long long seed_override) {
  std::string raw_config;
  auto entries = load_entries(config_path, &raw_config);
  CorpusConfig cfg = corpus_config_from_entries(entries);
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  cfg.validate();

  Corpus corpus = sample_corpus(cfg, sequences);
  save_corpus(corpus, out_dir);

  RunManifest manifest =
      make_run_manifest("gen-data", corpus_snapshot(cfg, sequences), cfg.seed,
                        {raw_config}, {"manifest.json", "visual.f32", "audio.f32",
                                       "labels.i32"});
  write_run_manifest(manifest, out_dir);
  std::cout << "wrote corpus: P=" << cfg.phoneme_count << " V=" << cfg.viseme_count
            << " D=" << cfg.feature_dim << " T=" << cfg.frames_per_sequence
            << " sequences=" << sequences << " -> " << out_dir << "\n";
  std::cout << "run_id=" << manifest.run_id << " input_hash=" << manifest.input_hash
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& corpus_dir,
              const std::string& out_dir, const std::string& variant, int epochs_override,
              long long seed_override) {
  std::string raw_config;
  auto entries = load_entries(config_path, &raw_config);
  TrainerConfig cfg = trainer_config_from_entries(entries);
  if (!variant.empty()) cfg.variant = variant_from_name(variant);
  if (epochs_override >= 0) cfg.epochs = epochs_override;
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  cfg.validate();

  Corpus corpus = load_corpus(corpus_dir);
  TrainerState state = train(cfg, corpus);

  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "metrics.csv", metrics_csv(state.metrics));
  save_checkpoint(state, fs::path(out_dir) / "checkpoint");

  RunManifest manifest = make_run_manifest("train", trainer_snapshot(cfg), cfg.seed,
                                           {raw_config, corpus_dir},
                                           {"metrics.csv", "checkpoint"});
  write_run_manifest(manifest, out_dir);

  double final_acc =
      state.metrics.empty() ? 0.0 : state.metrics.back().phoneme_match_acc;
  std::cout << "trained variant=" << variant_name(cfg.variant)
            << " epochs=" << cfg.epochs << " final_match_acc=" << final_acc << " -> "
            << out_dir << "\n";
  std::cout << "run_id=" << manifest.run_id << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_dir, const std::string& corpus_dir,
             const std::string& out_dir) {
  TrainerState state = load_checkpoint(checkpoint_dir);
  Corpus corpus = load_corpus(corpus_dir);
  RunReport report = evaluate_trained(state, corpus);

  fs::create_directories(out_dir);
  nlohmann::json j;
  j["run"] = {{"variant", variant_name(state.config.variant)},
              {"seed", state.config.seed},
              {"epochs_completed", state.epochs_completed}};
  j["metrics"] = report_to_json(report);
  write_text_file(fs::path(out_dir) / "report.json", j.dump(2) + "\n");

  EncodedCorpus encoded = encode_corpus(state, corpus);
  export_embeddings(state.viseme_bank, state.phoneme_bank, encoded.visual, encoded.audio,
                    encoded.labels, fs::path(out_dir) / "embeddings");

  RunManifest manifest = make_run_manifest(
      "eval", {{"checkpoint", checkpoint_dir}, {"corpus", corpus_dir}},
      state.config.seed, {}, {"report.json", "embeddings"});
  write_run_manifest(manifest, out_dir);

  std::cout << "phoneme_match_acc=" << report.phoneme_match_acc
            << " mapping_accuracy=" << report.mapping_accuracy
            << " oracle_clean_acc=" << report.oracle_clean_accuracy << " -> " << out_dir
            << "\n";
  return 0;
}

int cmd_demo_cluster(double imbalance, const std::string& variant, int seeds,
                     const std::string& out_dir) {
  if (variant != "balanced" && variant != "pruning")
    throw ConfigError("demo-cluster variant must be 'balanced' or 'pruning'");

  TwoBlobConfig cfg;
  cfg.imbalance = imbalance;
  cfg.pruning = variant == "pruning";

  int all_covered_runs = 0;
  double ratio_sum = 0.0;
  std::string csv = "seed,variant,covered_components,all_covered,size_ratio\n";
  char buf[128];
  for (int seed = 0; seed < seeds; ++seed) {
    cfg.seed = static_cast<std::uint64_t>(seed);
    TwoBlobResult result = run_two_blob_stream(cfg);
    if (result.all_covered) ++all_covered_runs;
    ratio_sum += result.size_ratio;
    std::snprintf(buf, sizeof(buf), "%d,%s,%d,%d,%.9g\n", seed, variant.c_str(),
                  result.covered_count, result.all_covered ? 1 : 0, result.size_ratio);
    csv += buf;
    std::cout << "seed=" << seed << " covered_components=" << result.covered_count
              << " all_covered=" << (result.all_covered ? "yes" : "no")
              << " size_ratio=" << result.size_ratio << "\n";
  }
  std::cout << "variant=" << variant << " imbalance=" << imbalance
            << " runs_with_full_coverage=" << all_covered_runs << "/" << seeds
            << " mean_size_ratio=" << ratio_sum / seeds << "\n";

  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "coverage.csv", csv);
  RunManifest manifest = make_run_manifest(
      "demo-cluster",
      {{"imbalance", std::to_string(imbalance)}, {"variant", variant},
       {"seeds", std::to_string(seeds)}},
      0, {}, {"coverage.csv"});
  write_run_manifest(manifest, out_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UniVPM mechanism runner: online balanced clustering, adversarial "
               "MI mapping, and retrieval-based modality transfer on synthetic "
               "paired-modality corpora"};
  app.require_subcommand(1);

  std::string config_path, out_dir, corpus_dir, checkpoint_dir;
  std::string variant;
  int sequences = 60;
  int seeds = 5;
  int epochs_override = -1;
  long long seed_override = -1;
  double imbalance = 0.9;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic paired corpus");
  gen->add_option("--config", config_path,
                  "Flat key=value config (phoneme_count, viseme_count, feature_dim, "
                  "frames_per_sequence, zipf_exponent, noise_snr_db, seed, sample_seed, "
                  "prototype_radius, base_spread, homophene_spread_ratio, head_spread, "
                  "cross_modal_correlation)");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--sequences", sequences, "Number of sequences to draw");
  gen->add_option("--seed", seed_override, "Seed override");

  auto* train_cmd = app.add_subcommand("train", "Train on a generated corpus");
  train_cmd->add_option("--config", config_path,
                        "Flat key=value config (lambda_gan, lambda_rec, lambda_var, "
                        "bank_update_interval_epochs, epochs, batch_sequences, "
                        "lr_generator, lr_discriminator, seed, temperature, "
                        "bank_clusters, bank_max_size, bank_init_buffer, "
                        "encoder_hidden, statistic_hidden, encoder_init_gain, "
                        "noisy_probability, noisy_stream, variant, freeze_banks, "
                        "literal_var_sign)");
  train_cmd->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_option("--variant", variant,
                        "univpm | no-amie | pruning-baseline | noisy");
  train_cmd->add_option("--epochs", epochs_override, "Epoch override");
  train_cmd->add_option("--seed", seed_override, "Seed override");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
  eval_cmd->add_option("--corpus", corpus_dir, "Evaluation corpus directory")->required();
  eval_cmd->add_option("--out", out_dir, "Output directory")->required();

  auto* demo = app.add_subcommand("demo-cluster",
                                  "Uniform-effect demo on an imbalanced two-blob stream");
  demo->add_option("--imbalance", imbalance, "Majority component fraction in (0,1)");
  demo->add_option("--variant", variant, "balanced | pruning")->required();
  demo->add_option("--seeds", seeds, "Number of seeded runs");
  demo->add_option("--out", out_dir, "Output directory (default demo-cluster-out)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir, sequences, seed_override);
    if (train_cmd->parsed())
      return cmd_train(config_path, corpus_dir, out_dir, variant, epochs_override,
                       seed_override);
    if (eval_cmd->parsed()) return cmd_eval(checkpoint_dir, corpus_dir, out_dir);
    if (demo->parsed()) {
      if (out_dir.empty()) out_dir = "demo-cluster-out";
      return cmd_demo_cluster(imbalance, variant, seeds, out_dir);
    }
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const StateError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
