#pragma once

#include <univpm/common.hpp>
#include <univpm/io.hpp>

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace univpm {

struct BankConfig {
  int cluster_count = 40;    // N
  int max_cluster_size = 20; // S_max
  int init_buffer_min = 0;   // 0 selects the default of 5 * N
  int lloyd_iterations = 1;  // reallocate/renew rounds per batch
  std::uint64_t seed = 1;

  int effective_init_buffer() const {
    int floor = std::max(cluster_count, init_buffer_min);
    if (init_buffer_min == 0) floor = 5 * cluster_count;
    return std::max(floor, cluster_count);
  }

  void validate() const {
    if (cluster_count < 1) throw ConfigError("cluster_count must be >= 1");
    if (max_cluster_size < 1) throw ConfigError("max_cluster_size must be >= 1");
    if (lloyd_iterations < 1) throw ConfigError("lloyd_iterations must be >= 1");
  }
};

// K-Means++ seeding: first center uniform, each next drawn with probability
// proportional to the squared distance to the nearest already chosen center.
inline Matrix kmeanspp_init(const std::vector<Vector>& samples, int cluster_count, Rng& rng) {
  if (cluster_count < 1) throw ConfigError("kmeanspp_init: cluster_count must be >= 1");
  if (static_cast<int>(samples.size()) < cluster_count)
    throw DataError("kmeanspp_init: fewer samples than clusters");

  const int n = static_cast<int>(samples.size());
  const int dim = static_cast<int>(samples.front().size());
  Matrix centers(cluster_count, dim);
  std::vector<double> nearest_sq(n, std::numeric_limits<double>::max());

  int first = uniform_index(rng, n);
  centers.row(0) = samples[first].transpose();
  for (int k = 1; k < cluster_count; ++k) {
    for (int i = 0; i < n; ++i) {
      double d2 = (samples[i] - centers.row(k - 1).transpose()).squaredNorm();
      nearest_sq[i] = std::min(nearest_sq[i], d2);
    }
    double total = std::accumulate(nearest_sq.begin(), nearest_sq.end(), 0.0);
    if (!(total > 0.0))
      throw DataError("kmeanspp_init: not enough distinct samples");
    double u = uniform_real(rng, 0.0, total);
    double acc = 0.0;
    int chosen = -1;
    for (int i = 0; i < n; ++i) {
      if (nearest_sq[i] <= 0.0) continue;
      acc += nearest_sq[i];
      chosen = i;
      if (u < acc) break;
    }
    if (chosen < 0) throw DataError("kmeanspp_init: not enough distinct samples");
    centers.row(k) = samples[chosen].transpose();
  }
  return centers;
}

inline Matrix kmeanspp_init(const std::vector<Vector>& samples, int cluster_count,
                            std::uint64_t seed) {
  Rng rng(seed);
  return kmeanspp_init(samples, cluster_count, rng);
}

// Streaming cluster bank with per-cluster sample caches (Alg. 1 state). The
// overall cache is the multiset union of the cluster caches plus any frames
// appended since the last reallocation; before initialization it is the
// buffering area that feeds K-Means++.
class ClusterBank {
 public:
  struct CachedSample {
    Vector value;
    // Batch index at which this sample was synthesized by oversampling;
    // excludes it from acting as a donor within the same batch.
    std::int64_t synthetic_batch = -1;
  };

  ClusterBank() = default;
  explicit ClusterBank(const BankConfig& config) : config_(config), rng_(config.seed) {
    config_.validate();
  }

  static ClusterBank from_state(const BankConfig& config, const Matrix& centers,
                                std::vector<std::vector<Vector>> caches) {
    config.validate();
    if (centers.rows() != config.cluster_count)
      throw ShapeError("from_state: center count mismatch");
    if (static_cast<int>(caches.size()) != config.cluster_count)
      throw ShapeError("from_state: cache count mismatch");
    ClusterBank bank(config);
    bank.centers_ = centers;
    bank.dim_ = static_cast<int>(centers.cols());
    bank.caches_.resize(config.cluster_count);
    for (int i = 0; i < config.cluster_count; ++i)
      for (Vector& v : caches[i])
        bank.caches_[i].push_back(CachedSample{std::move(v), -1});
    bank.initialized_ = true;
    return bank;
  }

  const BankConfig& config() const { return config_; }
  bool initialized() const { return initialized_; }
  int dim() const { return dim_; }
  int cluster_count() const { return config_.cluster_count; }
  const Matrix& centers() const {
    require_initialized();
    return centers_;
  }
  int cluster_size(int i) const {
    require_initialized();
    return static_cast<int>(caches_[i].size());
  }
  std::vector<int> cluster_sizes() const {
    require_initialized();
    std::vector<int> sizes(caches_.size());
    for (std::size_t i = 0; i < caches_.size(); ++i)
      sizes[i] = static_cast<int>(caches_[i].size());
    return sizes;
  }
  // Threshold that bounded cluster sizes at the most recent resample.
  int last_size_threshold() const { return last_s_thr_; }

  int total_size() const {
    if (!initialized_) return static_cast<int>(buffer_.size());
    std::size_t n = pending_.size();
    for (const auto& cache : caches_) n += cache.size();
    return static_cast<int>(n);
  }

  // Snapshot of the overall cache B (union of cluster caches and pending
  // frames, or the pre-init buffer).
  std::vector<Vector> overall_cache() const {
    std::vector<Vector> all;
    if (!initialized_) {
      all = buffer_;
      return all;
    }
    for (const auto& cache : caches_)
      for (const CachedSample& s : cache) all.push_back(s.value);
    for (const Vector& v : pending_) all.push_back(v);
    return all;
  }

  std::vector<Vector> cluster_cache(int i) const {
    require_initialized();
    std::vector<Vector> values;
    values.reserve(caches_[i].size());
    for (const CachedSample& s : caches_[i]) values.push_back(s.value);
    return values;
  }

  // Nearest center under Euclidean distance; ties go to the lowest index.
  std::pair<int, Vector> nearest_center(const Vector& frame) const {
    require_initialized();
    if (frame.size() != dim_) throw ShapeError("nearest_center: dimension mismatch");
    int best = 0;
    double best_d2 = (frame - centers_.row(0).transpose()).squaredNorm();
    for (int i = 1; i < config_.cluster_count; ++i) {
      double d2 = (frame - centers_.row(i).transpose()).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = i;
      }
    }
    return {best, centers_.row(best).transpose()};
  }

  // Alg. 1 main loop body. Buffers frames until the init threshold, then
  // seeds centers with K-Means++; afterwards every batch runs
  // append -> reallocate -> renew_centers -> resample.
  void ingest_batch(std::span<const Vector> frames) { ingest(frames, Mode::Balanced); }

  // Appendix C.3 baseline: identical loop but oversized clusters keep a
  // uniformly random subset and there is no oversampling.
  void ingest_batch_pruning_baseline(std::span<const Vector> frames) {
    ingest(frames, Mode::Pruning);
  }

  void ingest_batch(const std::vector<Vector>& frames) {
    ingest_batch(std::span<const Vector>(frames));
  }
  void ingest_batch_pruning_baseline(const std::vector<Vector>& frames) {
    ingest_batch_pruning_baseline(std::span<const Vector>(frames));
  }

  // Re-assigns every cached sample to its nearest center (ties to the lowest
  // cluster index). Exposed for the Lloyd-iteration oracle tests.
  void reallocate() {
    require_initialized();
    std::vector<CachedSample> all;
    for (auto& cache : caches_) {
      for (CachedSample& s : cache) all.push_back(std::move(s));
      cache.clear();
    }
    for (Vector& v : pending_) all.push_back(CachedSample{std::move(v), -1});
    pending_.clear();
    for (CachedSample& s : all) {
      int idx = nearest_center(s.value).first;
      caches_[idx].push_back(std::move(s));
    }
  }

  // Each center with a nonempty cache becomes the mean of its cache; empty
  // caches leave the center unchanged.
  void renew_centers() {
    require_initialized();
    for (int i = 0; i < config_.cluster_count; ++i) {
      if (caches_[i].empty()) continue;
      Vector mean = Vector::Zero(dim_);
      for (const CachedSample& s : caches_[i]) mean += s.value;
      centers_.row(i) = (mean / static_cast<double>(caches_[i].size())).transpose();
    }
  }

  // Alg. 1 re-sampling. S_thr = min(len(B)/N, S_max) is computed once;
  // clusters above it keep their S_thr nearest samples, clusters strictly
  // below gain one sample interpolated between the nearest cached sample and
  // the center. Clusters sitting exactly at S_thr are left unchanged so the
  // post-resample size bound holds.
  void resample() {
    require_initialized();
    const int s_thr = compute_size_threshold();
    last_s_thr_ = s_thr;
    for (int i = 0; i < config_.cluster_count; ++i) {
      auto& cache = caches_[i];
      const int size = static_cast<int>(cache.size());
      if (size > s_thr) {
        keep_nearest(cache, centers_.row(i).transpose(), s_thr);
      } else if (size < s_thr && !cache.empty()) {
        const CachedSample* donor = nearest_donor(cache, centers_.row(i).transpose());
        if (donor == nullptr) continue;
        double alpha = uniform_open01(rng_);
        Vector fresh = interpolate_minority(donor->value, centers_.row(i).transpose(), alpha);
        cache.push_back(CachedSample{std::move(fresh), batch_counter_});
      }
    }
  }

  // d_new = d_near * alpha + center * (1 - alpha).
  static Vector interpolate_minority(const Vector& nearest_sample, const Vector& center,
                                     double alpha) {
    return nearest_sample * alpha + center * (1.0 - alpha);
  }

  void save(const std::filesystem::path& path_prefix) const {
    nlohmann::json header;
    header["N"] = config_.cluster_count;
    header["S_max"] = config_.max_cluster_size;
    header["init_buffer_min"] = config_.init_buffer_min;
    header["lloyd_iterations"] = config_.lloyd_iterations;
    header["seed"] = config_.seed;
    header["D"] = dim_;
    header["initialized"] = initialized_;
    header["last_s_thr"] = last_s_thr_;
    header["batch_counter"] = batch_counter_;
    if (initialized_) {
      std::vector<int> sizes;
      for (const auto& cache : caches_) sizes.push_back(static_cast<int>(cache.size()));
      header["cluster_sizes"] = sizes;
      header["pending"] = static_cast<int>(pending_.size());
    } else {
      header["buffered"] = static_cast<int>(buffer_.size());
    }
    write_text_file(path_prefix.string() + ".json", header.dump(2) + "\n");

    auto out = open_output(path_prefix.string() + ".bin");
    if (initialized_) {
      write_f32_matrix(out, centers_);
      for (const auto& cache : caches_)
        for (const CachedSample& s : cache) write_f32_vector(out, s.value);
      for (const Vector& v : pending_) write_f32_vector(out, v);
    } else {
      for (const Vector& v : buffer_) write_f32_vector(out, v);
    }
  }

  static ClusterBank load(const std::filesystem::path& path_prefix) {
    nlohmann::json header =
        nlohmann::json::parse(read_text_file(path_prefix.string() + ".json"));
    BankConfig config;
    config.cluster_count = header.at("N").get<int>();
    config.max_cluster_size = header.at("S_max").get<int>();
    config.init_buffer_min = header.at("init_buffer_min").get<int>();
    config.lloyd_iterations = header.at("lloyd_iterations").get<int>();
    config.seed = header.at("seed").get<std::uint64_t>();
    ClusterBank bank(config);
    bank.dim_ = header.at("D").get<int>();
    bank.last_s_thr_ = header.at("last_s_thr").get<int>();
    bank.batch_counter_ = header.at("batch_counter").get<std::int64_t>();
    bank.initialized_ = header.at("initialized").get<bool>();

    auto in = open_input(path_prefix.string() + ".bin");
    if (bank.initialized_) {
      bank.centers_ = read_f32_matrix(in, config.cluster_count, bank.dim_);
      auto sizes = header.at("cluster_sizes").get<std::vector<int>>();
      bank.caches_.resize(config.cluster_count);
      for (int i = 0; i < config.cluster_count; ++i)
        for (int k = 0; k < sizes[i]; ++k)
          bank.caches_[i].push_back(CachedSample{read_f32_vector(in, bank.dim_), -1});
      int pending = header.at("pending").get<int>();
      for (int k = 0; k < pending; ++k) bank.pending_.push_back(read_f32_vector(in, bank.dim_));
    } else {
      int buffered = header.at("buffered").get<int>();
      for (int k = 0; k < buffered; ++k) bank.buffer_.push_back(read_f32_vector(in, bank.dim_));
    }
    return bank;
  }

 private:
  enum class Mode { Balanced, Pruning };

  void require_initialized() const {
    if (!initialized_) throw StateError("cluster bank is not initialized");
  }

  void check_dim(const Vector& v) {
    if (dim_ == 0) dim_ = static_cast<int>(v.size());
    if (v.size() != dim_) throw ShapeError("ingest: frame dimension mismatch");
  }

  void ingest(std::span<const Vector> frames, Mode mode) {
    ++batch_counter_;
    if (!initialized_) {
      for (const Vector& f : frames) {
        check_dim(f);
        buffer_.push_back(f);
      }
      if (static_cast<int>(buffer_.size()) < config_.effective_init_buffer()) return;
      centers_ = kmeanspp_init(buffer_, config_.cluster_count, rng_);
      caches_.assign(config_.cluster_count, {});
      for (Vector& v : buffer_) pending_.push_back(std::move(v));
      buffer_.clear();
      initialized_ = true;
    } else {
      for (const Vector& f : frames) {
        check_dim(f);
        pending_.push_back(f);
      }
    }
    for (int it = 0; it < config_.lloyd_iterations; ++it) {
      reallocate();
      renew_centers();
    }
    if (mode == Mode::Balanced)
      resample();
    else
      prune_random();
  }

  int compute_size_threshold() const {
    int total = 0;
    for (const auto& cache : caches_) total += static_cast<int>(cache.size());
    int s_avg = total / config_.cluster_count;  // floor division
    return std::min(s_avg, config_.max_cluster_size);
  }

  void keep_nearest(std::vector<CachedSample>& cache, const Vector& center, int keep) {
    std::vector<int> order(cache.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> d2(cache.size());
    for (std::size_t k = 0; k < cache.size(); ++k)
      d2[k] = (cache[k].value - center).squaredNorm();
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return d2[a] < d2[b]; });
    std::vector<CachedSample> kept;
    kept.reserve(keep);
    for (int k = 0; k < keep; ++k) kept.push_back(std::move(cache[order[k]]));
    cache = std::move(kept);
  }

  const CachedSample* nearest_donor(const std::vector<CachedSample>& cache,
                                    const Vector& center) const {
    const CachedSample* best = nullptr;
    double best_d2 = std::numeric_limits<double>::max();
    for (const CachedSample& s : cache) {
      if (s.synthetic_batch == batch_counter_) continue;
      double d2 = (s.value - center).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = &s;
      }
    }
    return best;
  }

  // Appendix C.3: oversized clusters keep S_thr uniformly random samples.
  void prune_random() {
    const int s_thr = compute_size_threshold();
    last_s_thr_ = s_thr;
    for (auto& cache : caches_) {
      const int size = static_cast<int>(cache.size());
      if (size <= s_thr) continue;
      std::vector<int> order(size);
      std::iota(order.begin(), order.end(), 0);
      for (int k = 0; k < s_thr; ++k) {
        std::uniform_int_distribution<int> pick(k, size - 1);
        std::swap(order[k], order[pick(rng_)]);
      }
      order.resize(s_thr);
      std::sort(order.begin(), order.end());
      std::vector<CachedSample> kept;
      kept.reserve(s_thr);
      for (int idx : order) kept.push_back(std::move(cache[idx]));
      cache = std::move(kept);
    }
  }

  void write_f32_vector(std::ostream& out, const Vector& v) const {
    for (Eigen::Index i = 0; i < v.size(); ++i)
      detail::write_le<float>(out, static_cast<float>(v(i)));
  }

  static Vector read_f32_vector(std::istream& in, int dim) {
    Vector v(dim);
    for (int i = 0; i < dim; ++i)
      v(i) = static_cast<double>(detail::read_le<float>(in));
    return v;
  }

  BankConfig config_;
  Rng rng_;
  int dim_ = 0;
  bool initialized_ = false;
  Matrix centers_;
  std::vector<std::vector<CachedSample>> caches_;
  std::vector<Vector> pending_;  // appended since last reallocate
  std::vector<Vector> buffer_;   // pre-initialization accumulation
  std::int64_t batch_counter_ = 0;
  int last_s_thr_ = 0;
};

}  // namespace univpm
