#pragma once

#include <univpm/common.hpp>
#include <univpm/io.hpp>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <optional>
#include <vector>

namespace univpm {

// One phoneme class of the synthetic inventory. Phonemes that share a viseme
// group have identical visual prototypes (homophenes) but keep distinct audio
// prototypes and distinct noise scales.
struct PhonemeSpec {
  int id = 0;
  Vector audio_prototype;
  Vector visual_prototype;
  double spread = 0.0;
  double frequency_weight = 0.0;
};

struct VisemeGroupMap {
  std::vector<int> phoneme_to_viseme;
  int viseme_count = 0;
};

struct CorpusConfig {
  int phoneme_count = 10;             // P
  int viseme_count = 6;               // V
  int feature_dim = 16;               // D
  int frames_per_sequence = 64;       // T
  double zipf_exponent = 0.7;
  std::optional<double> noise_snr_db = 0.0;
  std::uint64_t seed = 1;
  // Seed for frame sampling only; 0 reuses `seed`. Lets a held-out corpus
  // share the phoneme inventory while drawing fresh sequences.
  std::uint64_t sample_seed = 0;

  // Geometry of the generated inventory.
  double prototype_radius = 4.0;
  double base_spread = 0.15;
  double homophene_spread_ratio = 2.5;
  // The first phoneme models a broad head class (silence-like); its noise
  // scale is set directly instead of through the shell ladder.
  double head_spread = 2.0;
  // How strongly each viseme prototype correlates with the audio prototype
  // of its most frequent phoneme: 1 collapses the modalities onto one point,
  // 0 makes them independent. Mid-range values mimic a co-trained but
  // imperfect shared embedding space.
  double cross_modal_correlation = 0.6;

  std::uint64_t effective_sample_seed() const {
    return sample_seed == 0 ? seed : sample_seed;
  }

  void validate() const {
    if (phoneme_count < 1) throw ConfigError("phoneme_count must be >= 1");
    if (viseme_count < 1) throw ConfigError("viseme_count must be >= 1");
    if (phoneme_count < viseme_count)
      throw ConfigError("phoneme_count must be >= viseme_count");
    if (feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
    if (frames_per_sequence < 1) throw ConfigError("frames_per_sequence must be >= 1");
    if (zipf_exponent < 0.0) throw ConfigError("zipf_exponent must be >= 0");
    if (!(base_spread > 0.0)) throw ConfigError("base_spread must be > 0");
    if (!(homophene_spread_ratio > 0.0))
      throw ConfigError("homophene_spread_ratio must be > 0");
    if (!(head_spread > 0.0)) throw ConfigError("head_spread must be > 0");
    if (cross_modal_correlation < 0.0 || cross_modal_correlation > 1.0)
      throw ConfigError("cross_modal_correlation must lie in [0, 1]");
  }
};

struct PairedSequence {
  Matrix visual;                       // T x D
  Matrix audio;                        // T x D, clean
  std::vector<int> labels;             // T phoneme ids
  std::optional<Matrix> audio_noisy;   // T x D
};

// weight_k proportional to 1/k^s (k = 1..P), normalized to sum 1.
inline std::vector<double> zipf_weights(int phoneme_count, double exponent) {
  if (phoneme_count < 1) throw ConfigError("zipf_weights: phoneme_count must be >= 1");
  if (exponent < 0.0) throw ConfigError("zipf_weights: exponent must be >= 0");
  std::vector<double> weights(phoneme_count);
  double total = 0.0;
  for (int k = 0; k < phoneme_count; ++k) {
    weights[k] = 1.0 / std::pow(static_cast<double>(k + 1), exponent);
    total += weights[k];
  }
  for (double& w : weights) w /= total;
  return weights;
}

// Consecutive phonemes share visemes: the surplus (P - V) phonemes are
// distributed round-robin onto the second and third viseme groups, so the
// homophene groups hold members of comparable frequency while every viseme
// keeps at least one phoneme.
inline VisemeGroupMap make_viseme_map(int phoneme_count, int viseme_count) {
  if (viseme_count < 1 || phoneme_count < viseme_count)
    throw ConfigError("make_viseme_map: need 1 <= viseme_count <= phoneme_count");
  VisemeGroupMap map;
  map.viseme_count = viseme_count;
  map.phoneme_to_viseme.resize(phoneme_count);

  std::vector<int> group_sizes(viseme_count, 1);
  const int extras = phoneme_count - viseme_count;
  if (viseme_count == 1) {
    group_sizes[0] += extras;
  } else {
    const int targets = std::min(2, viseme_count - 1);
    for (int e = 0; e < extras; ++e) group_sizes[1 + e % targets] += 1;
  }
  int phoneme = 0;
  for (int v = 0; v < viseme_count; ++v)
    for (int k = 0; k < group_sizes[v]; ++k) map.phoneme_to_viseme[phoneme++] = v;
  return map;
}

namespace detail {

inline Vector random_prototype(Rng& rng, int dim, double radius) {
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v(i) = gaussian(rng);
  double norm = v.norm();
  while (norm < 1e-9) {
    for (int i = 0; i < dim; ++i) v(i) = gaussian(rng);
    norm = v.norm();
  }
  return v * (radius / norm);
}

// Draws prototypes on the radius sphere, re-drawing any that land too close
// to an earlier one so classes stay separable.
inline std::vector<Vector> separated_prototypes(Rng& rng, int count, int dim,
                                                double radius) {
  const double min_dist = 0.8 * radius;
  std::vector<Vector> protos;
  protos.reserve(count);
  for (int i = 0; i < count; ++i) {
    Vector candidate;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      candidate = random_prototype(rng, dim, radius);
      bool ok = true;
      for (const Vector& p : protos)
        if ((candidate - p).norm() < min_dist) { ok = false; break; }
      if (ok) break;
      if (attempt == 999)
        throw DataError("separated_prototypes: cannot place distinct prototypes");
    }
    protos.push_back(candidate);
  }
  return protos;
}

}  // namespace detail

// Deterministically derives the phoneme inventory from the config. Within a
// homophene group the members get geometrically increasing noise scales, so
// their visual frames share a mean but remain statistically distinguishable.
// Each viseme prototype partially correlates with the audio prototype of the
// group's most frequent member, the synthetic counterpart of a co-trained
// but imperfect shared audio-visual embedding space. The first phoneme is a
// broad head class.
inline std::vector<PhonemeSpec> make_phoneme_inventory(const CorpusConfig& config,
                                                       const VisemeGroupMap& map) {
  config.validate();
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  auto audio_protos = detail::separated_prototypes(rng, config.phoneme_count,
                                                   config.feature_dim,
                                                   config.prototype_radius);
  auto weights = zipf_weights(config.phoneme_count, config.zipf_exponent);

  std::vector<int> group_rank(config.phoneme_count, 0);
  std::vector<int> group_head(config.viseme_count, -1);
  std::vector<int> seen_in_group(config.viseme_count, 0);
  for (int p = 0; p < config.phoneme_count; ++p) {
    int v = map.phoneme_to_viseme[p];
    if (group_head[v] < 0) group_head[v] = p;
    group_rank[p] = seen_in_group[v]++;
  }

  std::vector<Vector> visual_protos(config.viseme_count);
  const double alpha = config.cross_modal_correlation;
  for (int v = 0; v < config.viseme_count; ++v) {
    Vector anchor = audio_protos[group_head[v]] / audio_protos[group_head[v]].norm();
    Vector fresh = detail::random_prototype(rng, config.feature_dim, 1.0);
    Vector mix = alpha * anchor + (1.0 - alpha) * fresh;
    double norm = mix.norm();
    while (norm < 1e-9) {
      fresh = detail::random_prototype(rng, config.feature_dim, 1.0);
      mix = alpha * anchor + (1.0 - alpha) * fresh;
      norm = mix.norm();
    }
    visual_protos[v] = mix * (config.prototype_radius / norm);
  }

  std::vector<PhonemeSpec> specs(config.phoneme_count);
  for (int p = 0; p < config.phoneme_count; ++p) {
    specs[p].id = p;
    specs[p].audio_prototype = audio_protos[p];
    specs[p].visual_prototype = visual_protos[map.phoneme_to_viseme[p]];
    specs[p].spread =
        p == 0 ? config.head_spread
               : config.base_spread *
                     std::pow(config.homophene_spread_ratio, group_rank[p]);
    specs[p].frequency_weight = weights[p];
  }
  return specs;
}

// Additive white Gaussian noise scaled so the empirical SNR hits the target.
inline Matrix add_noise(const Matrix& audio, double snr_db, std::uint64_t seed) {
  double signal_power = audio.squaredNorm() / static_cast<double>(audio.size());
  if (!(signal_power > 0.0))
    throw DataError("add_noise: signal power is zero");
  Rng rng(seed);
  Matrix noise(audio.rows(), audio.cols());
  for (Eigen::Index r = 0; r < noise.rows(); ++r)
    for (Eigen::Index c = 0; c < noise.cols(); ++c)
      noise(r, c) = gaussian(rng);
  double noise_power = noise.squaredNorm() / static_cast<double>(noise.size());
  double target_noise_power = signal_power / std::pow(10.0, snr_db / 10.0);
  noise *= std::sqrt(target_noise_power / noise_power);
  return audio + noise;
}

// Draws `count` paired sequences from an explicit inventory. Frames are iid:
// label from the frequency weights, then prototype + spread * gaussian per
// modality with independent noise draws.
inline std::vector<PairedSequence> sample_sequences(
    const std::vector<PhonemeSpec>& specs, int frames_per_sequence, int count,
    std::uint64_t seed, std::optional<double> noise_snr_db = std::nullopt) {
  if (specs.empty()) throw ConfigError("sample_sequences: empty inventory");
  if (frames_per_sequence < 1)
    throw ConfigError("sample_sequences: frames_per_sequence must be >= 1");
  const int dim = static_cast<int>(specs.front().audio_prototype.size());
  std::vector<double> weights(specs.size());
  for (std::size_t p = 0; p < specs.size(); ++p) weights[p] = specs[p].frequency_weight;

  Rng rng(seed);
  std::vector<PairedSequence> sequences;
  sequences.reserve(count);
  for (int s = 0; s < count; ++s) {
    PairedSequence seq;
    seq.visual.resize(frames_per_sequence, dim);
    seq.audio.resize(frames_per_sequence, dim);
    seq.labels.resize(frames_per_sequence);
    for (int t = 0; t < frames_per_sequence; ++t) {
      int label = weighted_index(rng, weights);
      seq.labels[t] = label;
      const PhonemeSpec& spec = specs[label];
      for (int d = 0; d < dim; ++d)
        seq.audio(t, d) = spec.audio_prototype(d) + spec.spread * gaussian(rng);
      for (int d = 0; d < dim; ++d)
        seq.visual(t, d) = spec.visual_prototype(d) + spec.spread * gaussian(rng);
    }
    if (noise_snr_db.has_value()) {
      std::uint64_t noise_seed = seed ^ (0xda3e39cb94b95bdbull + static_cast<std::uint64_t>(s));
      seq.audio_noisy = add_noise(seq.audio, *noise_snr_db, noise_seed);
    }
    sequences.push_back(std::move(seq));
  }
  return sequences;
}

struct Corpus {
  CorpusConfig config;
  VisemeGroupMap viseme_map;
  std::vector<PhonemeSpec> specs;
  std::vector<PairedSequence> sequences;

  int total_frames() const {
    return static_cast<int>(sequences.size()) * config.frames_per_sequence;
  }
};

inline Corpus sample_corpus(const CorpusConfig& config, int sequence_count) {
  config.validate();
  if (sequence_count < 0) throw ConfigError("sample_corpus: negative sequence count");
  Corpus corpus;
  corpus.config = config;
  corpus.viseme_map = make_viseme_map(config.phoneme_count, config.viseme_count);
  corpus.specs = make_phoneme_inventory(config, corpus.viseme_map);
  corpus.sequences =
      sample_sequences(corpus.specs, config.frames_per_sequence, sequence_count,
                       config.effective_sample_seed(), config.noise_snr_db);
  return corpus;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json + row-major little-endian float32 blocks.
// visual.f32 / audio.f32 are (count*T) x D, labels.i32 is count*T ints.
// ---------------------------------------------------------------------------

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("save_corpus: cannot create " + dir.string());

  const CorpusConfig& cfg = corpus.config;
  nlohmann::json manifest;
  manifest["P"] = cfg.phoneme_count;
  manifest["V"] = cfg.viseme_count;
  manifest["D"] = cfg.feature_dim;
  manifest["T"] = cfg.frames_per_sequence;
  manifest["seed"] = cfg.seed;
  manifest["sample_seed"] = cfg.sample_seed;
  manifest["zipf_exponent"] = cfg.zipf_exponent;
  manifest["prototype_radius"] = cfg.prototype_radius;
  manifest["base_spread"] = cfg.base_spread;
  manifest["homophene_spread_ratio"] = cfg.homophene_spread_ratio;
  manifest["head_spread"] = cfg.head_spread;
  manifest["cross_modal_correlation"] = cfg.cross_modal_correlation;
  manifest["sequence_count"] = corpus.sequences.size();
  manifest["phoneme_to_viseme"] = corpus.viseme_map.phoneme_to_viseme;
  if (cfg.noise_snr_db.has_value()) manifest["noise_snr_db"] = *cfg.noise_snr_db;

  nlohmann::json specs = nlohmann::json::array();
  for (const PhonemeSpec& s : corpus.specs) {
    nlohmann::json j;
    j["id"] = s.id;
    j["spread"] = s.spread;
    j["frequency_weight"] = s.frequency_weight;
    j["audio_prototype"] = std::vector<double>(s.audio_prototype.data(),
                                               s.audio_prototype.data() + s.audio_prototype.size());
    j["visual_prototype"] = std::vector<double>(s.visual_prototype.data(),
                                                s.visual_prototype.data() + s.visual_prototype.size());
    specs.push_back(j);
  }
  manifest["phonemes"] = specs;
  manifest["files"] = {{"visual", "visual.f32"},
                       {"audio", "audio.f32"},
                       {"labels", "labels.i32"}};
  bool has_noisy = !corpus.sequences.empty() && corpus.sequences.front().audio_noisy.has_value();
  if (has_noisy) manifest["files"]["audio_noisy"] = "audio_noisy.f32";

  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  auto visual_out = open_output(dir / "visual.f32");
  auto audio_out = open_output(dir / "audio.f32");
  auto labels_out = open_output(dir / "labels.i32");
  std::ofstream noisy_out;
  if (has_noisy) noisy_out = open_output(dir / "audio_noisy.f32");
  for (const PairedSequence& seq : corpus.sequences) {
    write_f32_matrix(visual_out, seq.visual);
    write_f32_matrix(audio_out, seq.audio);
    write_i32_values(labels_out, seq.labels);
    if (has_noisy) {
      if (!seq.audio_noisy.has_value())
        throw DataError("save_corpus: inconsistent noisy channel");
      write_f32_matrix(noisy_out, *seq.audio_noisy);
    }
  }
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  nlohmann::json manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
  Corpus corpus;
  CorpusConfig& cfg = corpus.config;
  cfg.phoneme_count = manifest.at("P").get<int>();
  cfg.viseme_count = manifest.at("V").get<int>();
  cfg.feature_dim = manifest.at("D").get<int>();
  cfg.frames_per_sequence = manifest.at("T").get<int>();
  cfg.seed = manifest.at("seed").get<std::uint64_t>();
  cfg.sample_seed = manifest.at("sample_seed").get<std::uint64_t>();
  cfg.zipf_exponent = manifest.at("zipf_exponent").get<double>();
  cfg.prototype_radius = manifest.at("prototype_radius").get<double>();
  cfg.base_spread = manifest.at("base_spread").get<double>();
  cfg.homophene_spread_ratio = manifest.at("homophene_spread_ratio").get<double>();
  cfg.head_spread = manifest.at("head_spread").get<double>();
  cfg.cross_modal_correlation = manifest.at("cross_modal_correlation").get<double>();
  if (manifest.contains("noise_snr_db"))
    cfg.noise_snr_db = manifest.at("noise_snr_db").get<double>();
  else
    cfg.noise_snr_db = std::nullopt;

  corpus.viseme_map.phoneme_to_viseme =
      manifest.at("phoneme_to_viseme").get<std::vector<int>>();
  corpus.viseme_map.viseme_count = cfg.viseme_count;

  for (const auto& j : manifest.at("phonemes")) {
    PhonemeSpec s;
    s.id = j.at("id").get<int>();
    s.spread = j.at("spread").get<double>();
    s.frequency_weight = j.at("frequency_weight").get<double>();
    auto ap = j.at("audio_prototype").get<std::vector<double>>();
    auto vp = j.at("visual_prototype").get<std::vector<double>>();
    s.audio_prototype = Eigen::Map<const Vector>(ap.data(), ap.size());
    s.visual_prototype = Eigen::Map<const Vector>(vp.data(), vp.size());
    corpus.specs.push_back(std::move(s));
  }

  const int count = manifest.at("sequence_count").get<int>();
  const int T = cfg.frames_per_sequence;
  const int D = cfg.feature_dim;
  auto visual_in = open_input(dir / "visual.f32");
  auto audio_in = open_input(dir / "audio.f32");
  auto labels_in = open_input(dir / "labels.i32");
  bool has_noisy = manifest.at("files").contains("audio_noisy");
  std::ifstream noisy_in;
  if (has_noisy) noisy_in = open_input(dir / "audio_noisy.f32");

  corpus.sequences.reserve(count);
  for (int s = 0; s < count; ++s) {
    PairedSequence seq;
    seq.visual = read_f32_matrix(visual_in, T, D);
    seq.audio = read_f32_matrix(audio_in, T, D);
    seq.labels = read_i32_values(labels_in, T);
    if (has_noisy) seq.audio_noisy = read_f32_matrix(noisy_in, T, D);
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

}  // namespace univpm
