#pragma once

#include <univpm/common.hpp>
#include <univpm/corpus.hpp>
#include <univpm/io.hpp>
#include <univpm/trainer.hpp>

#include <json.hpp>

#include <filesystem>
#include <map>
#include <sstream>
#include <string>

namespace univpm {

// Flat `key = value` text format; '#' starts a comment, blank lines ignored.
inline std::map<std::string, std::string> parse_flat_config(const std::string& text) {
  std::map<std::string, std::string> entries;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return std::string();
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    entries[key] = value;
  }
  return entries;
}

inline std::map<std::string, std::string> load_flat_config(const std::filesystem::path& path) {
  return parse_flat_config(read_text_file(path));
}

namespace detail {

inline double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    double d = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  }
}

inline long long to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

}  // namespace detail

// Applies recognized corpus keys; unknown keys are left for the trainer
// parser (and vice versa), so one file can configure a whole run.
inline CorpusConfig corpus_config_from_entries(
    const std::map<std::string, std::string>& entries) {
  CorpusConfig cfg;
  for (const auto& [key, value] : entries) {
    if (key == "phoneme_count") cfg.phoneme_count = static_cast<int>(detail::to_int(key, value));
    else if (key == "viseme_count") cfg.viseme_count = static_cast<int>(detail::to_int(key, value));
    else if (key == "feature_dim") cfg.feature_dim = static_cast<int>(detail::to_int(key, value));
    else if (key == "frames_per_sequence")
      cfg.frames_per_sequence = static_cast<int>(detail::to_int(key, value));
    else if (key == "zipf_exponent") cfg.zipf_exponent = detail::to_double(key, value);
    else if (key == "noise_snr_db") {
      if (value == "none") cfg.noise_snr_db = std::nullopt;
      else cfg.noise_snr_db = detail::to_double(key, value);
    } else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(detail::to_int(key, value));
    else if (key == "sample_seed")
      cfg.sample_seed = static_cast<std::uint64_t>(detail::to_int(key, value));
    else if (key == "prototype_radius") cfg.prototype_radius = detail::to_double(key, value);
    else if (key == "base_spread") cfg.base_spread = detail::to_double(key, value);
    else if (key == "homophene_spread_ratio")
      cfg.homophene_spread_ratio = detail::to_double(key, value);
    else if (key == "head_spread") cfg.head_spread = detail::to_double(key, value);
    else if (key == "cross_modal_correlation")
      cfg.cross_modal_correlation = detail::to_double(key, value);
  }
  return cfg;
}

inline TrainerConfig trainer_config_from_entries(
    const std::map<std::string, std::string>& entries) {
  TrainerConfig cfg;
  for (const auto& [key, value] : entries) {
    if (key == "lambda_gan") cfg.lambda_gan = detail::to_double(key, value);
    else if (key == "lambda_rec") cfg.lambda_rec = detail::to_double(key, value);
    else if (key == "lambda_var") cfg.lambda_var = detail::to_double(key, value);
    else if (key == "bank_update_interval_epochs")
      cfg.bank_update_interval_epochs = static_cast<int>(detail::to_int(key, value));
    else if (key == "epochs") cfg.epochs = static_cast<int>(detail::to_int(key, value));
    else if (key == "batch_sequences")
      cfg.batch_sequences = static_cast<int>(detail::to_int(key, value));
    else if (key == "lr_generator") cfg.lr_generator = detail::to_double(key, value);
    else if (key == "lr_discriminator") cfg.lr_discriminator = detail::to_double(key, value);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(detail::to_int(key, value));
    else if (key == "temperature") cfg.temperature = detail::to_double(key, value);
    else if (key == "bank_clusters") cfg.bank_clusters = static_cast<int>(detail::to_int(key, value));
    else if (key == "bank_max_size") cfg.bank_max_size = static_cast<int>(detail::to_int(key, value));
    else if (key == "bank_init_buffer")
      cfg.bank_init_buffer = static_cast<int>(detail::to_int(key, value));
    else if (key == "encoder_hidden") cfg.encoder_hidden = static_cast<int>(detail::to_int(key, value));
    else if (key == "statistic_hidden")
      cfg.statistic_hidden = static_cast<int>(detail::to_int(key, value));
    else if (key == "encoder_init_gain") cfg.encoder_init_gain = detail::to_double(key, value);
    else if (key == "noisy_probability") cfg.noisy_probability = detail::to_double(key, value);
    else if (key == "noisy_stream") cfg.noisy_stream = detail::to_bool(key, value);
    else if (key == "variant") cfg.variant = variant_from_name(value);
    else if (key == "freeze_banks") cfg.freeze_banks = detail::to_bool(key, value);
    else if (key == "literal_var_sign") cfg.literal_var_sign = detail::to_bool(key, value);
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Run manifests: enough to reproduce a command byte-for-byte.
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string run_id;
  std::string command;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config_snapshot;
  std::vector<std::string> artifact_paths;
  std::string input_hash;
};

inline RunManifest make_run_manifest(const std::string& command,
                                     const std::map<std::string, std::string>& config_snapshot,
                                     std::uint64_t seed,
                                     const std::vector<std::string>& input_texts,
                                     const std::vector<std::string>& artifact_paths) {
  RunManifest manifest;
  manifest.command = command;
  manifest.seed = seed;
  manifest.config_snapshot = config_snapshot;
  manifest.artifact_paths = artifact_paths;
  std::uint64_t h = fnv1a_hash(command);
  for (const auto& [k, v] : config_snapshot) h = fnv1a_hash(k + "=" + v, h);
  for (const std::string& text : input_texts) h = fnv1a_hash(text, h);
  h = fnv1a_hash(std::to_string(seed), h);
  manifest.input_hash = hash_hex(h);
  manifest.run_id = command + "-" + manifest.input_hash.substr(0, 12);
  return manifest;
}

inline void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& dir) {
  nlohmann::json j;
  j["run_id"] = manifest.run_id;
  j["command"] = manifest.command;
  j["seed"] = manifest.seed;
  j["config"] = manifest.config_snapshot;
  j["artifacts"] = manifest.artifact_paths;
  j["input_hash"] = manifest.input_hash;
  write_text_file(dir / "run_manifest.json", j.dump(2) + "\n");
}

}  // namespace univpm
