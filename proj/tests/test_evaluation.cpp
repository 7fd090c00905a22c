#include <univpm/corpus.hpp>
#include <univpm/evaluation.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <numeric>

using namespace univpm;

namespace {

double assignment_cost(const Matrix& cost, const std::vector<int>& perm) {
  double total = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) total += cost(i, perm[i]);
  return total;
}

double brute_force_min_cost(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::max();
  do {
    best = std::min(best, assignment_cost(cost, perm));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("assignment oracle on hand-checked instances") {
  Matrix identity_cost(3, 3);
  identity_cost << 0, 1, 1, 1, 0, 1, 1, 1, 0;
  auto perm = optimal_assignment_oracle(identity_cost);
  REQUIRE(perm == std::vector<int>({0, 1, 2}));

  Matrix swap_cost(2, 2);
  swap_cost << 2, 1, 1, 2;
  perm = optimal_assignment_oracle(swap_cost);
  REQUIRE(perm == std::vector<int>({1, 0}));
  REQUIRE(assignment_cost(swap_cost, perm) == 2.0);
}

TEST_CASE("assignment oracle rejects bad input") {
  REQUIRE_THROWS_AS(optimal_assignment_oracle(Matrix::Random(3, 4)), ShapeError);
  Matrix nan_cost = Matrix::Zero(2, 2);
  nan_cost(0, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(optimal_assignment_oracle(nan_cost), DataError);
}

TEST_CASE("assignment oracle matches exhaustive enumeration up to n=8") {
  Rng rng(3);
  for (int n = 2; n <= 8; ++n) {
    for (int instance = 0; instance < (n == 8 ? 3 : 8); ++instance) {
      Matrix cost(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) cost(i, j) = uniform_real(rng, -5.0, 5.0);
      auto perm = optimal_assignment_oracle(cost);
      // Permutation validity.
      std::vector<bool> used(n, false);
      for (int p : perm) {
        REQUIRE(p >= 0);
        REQUIRE(p < n);
        REQUIRE_FALSE(used[p]);
        used[p] = true;
      }
      REQUIRE(assignment_cost(cost, perm) ==
              Catch::Approx(brute_force_min_cost(cost)).margin(1e-9));
    }
  }
}

TEST_CASE("hungarian row match accuracy on a permutation-supported confusion") {
  ConfusionMatrix confusion;
  confusion.counts = Eigen::MatrixXi::Zero(4, 4);
  confusion.counts << 0, 90, 3, 1,
                      80, 0, 2, 0,
                      1, 2, 0, 70,
                      0, 1, 60, 2;
  REQUIRE(hungarian_row_match_accuracy(confusion) == 1.0);

  // Two rows dominated by the same column: at most one of them can match.
  ConfusionMatrix ambiguous;
  ambiguous.counts = Eigen::MatrixXi::Zero(3, 3);
  ambiguous.counts << 50, 1, 0,
                      45, 2, 1,
                      0, 0, 40;
  REQUIRE(hungarian_row_match_accuracy(ambiguous) == Catch::Approx(2.0 / 3.0));
}

TEST_CASE("oracle classifier reaches the accuracy gate on separable classes") {
  CorpusConfig cfg;
  cfg.seed = 15;
  cfg.noise_snr_db = std::nullopt;
  Corpus corpus = sample_corpus(cfg, 40);

  Matrix audio(corpus.total_frames(), cfg.feature_dim);
  std::vector<int> labels;
  int row = 0;
  for (const auto& seq : corpus.sequences) {
    audio.middleRows(row, cfg.frames_per_sequence) = seq.audio;
    labels.insert(labels.end(), seq.labels.begin(), seq.labels.end());
    row += cfg.frames_per_sequence;
  }

  OracleConfig oracle_cfg;
  OracleClassifier oracle =
      train_oracle_classifier(audio, labels, cfg.phoneme_count, oracle_cfg);
  REQUIRE(oracle.clean_accuracy >= 0.99);

  SECTION("restored equal to clean scores 100 percent") {
    REQUIRE(phoneme_match_accuracy(oracle, audio, audio) == 100.0);
  }

  SECTION("a single wrong prototype scores about that phoneme's frequency") {
    const int wrong = 2;
    Matrix restored(audio.rows(), audio.cols());
    for (Eigen::Index i = 0; i < restored.rows(); ++i)
      restored.row(i) = corpus.specs[wrong].audio_prototype.transpose();
    double acc = phoneme_match_accuracy(oracle, restored, audio);
    double expected = 100.0 * corpus.specs[wrong].frequency_weight;
    REQUIRE(std::abs(acc - expected) < 2.5);
  }

  SECTION("untrained oracle is a state error") {
    OracleClassifier untrained;
    untrained.net = oracle.net;
    REQUIRE_THROWS_AS(untrained.predict(audio), StateError);
    REQUIRE_THROWS_AS(phoneme_match_accuracy(untrained, audio, audio), StateError);
  }
}

TEST_CASE("mapping confusion conserves frames and detects perfect mappings") {
  // Hand-built geometry: three phoneme centers and three viseme centers,
  // frames exactly at the matching centers.
  BankConfig bank_cfg;
  bank_cfg.cluster_count = 3;
  Matrix audio_centers(3, 2), visual_centers(3, 2);
  audio_centers << 0, 0, 10, 0, 0, 10;
  visual_centers << 5, 5, -5, 5, 5, -5;
  auto phoneme_bank =
      ClusterBank::from_state(bank_cfg, audio_centers, std::vector<std::vector<Vector>>(3));
  auto viseme_bank =
      ClusterBank::from_state(bank_cfg, visual_centers, std::vector<std::vector<Vector>>(3));

  const int frames = 60;
  Matrix f_a(frames, 2), f_v(frames, 2);
  std::vector<int> labels(frames);
  Rng rng(16);
  for (int i = 0; i < frames; ++i) {
    int cls = uniform_index(rng, 3);
    labels[i] = cls;
    f_a.row(i) = audio_centers.row(cls);
    f_v.row(i) = visual_centers.row((cls + 1) % 3);  // permuted but 1-1
  }

  MappingConfusion confusion =
      mapping_confusion(viseme_bank, phoneme_bank, f_v, f_a, labels, 3);
  REQUIRE(confusion.label_vs_phoneme_center.total() == frames);
  REQUIRE(confusion.phoneme_center_vs_viseme_center.total() == frames);

  // Row sums of matrix 1 equal per-class frame counts.
  for (int c = 0; c < 3; ++c) {
    int count = static_cast<int>(std::count(labels.begin(), labels.end(), c));
    REQUIRE(confusion.label_vs_phoneme_center.counts.row(c).sum() == count);
  }
  // Strict 1-1 mapping scores perfect Hungarian row accuracy.
  REQUIRE(hungarian_row_match_accuracy(confusion.phoneme_center_vs_viseme_center) == 1.0);

  ClusterBank empty_bank{BankConfig{}};
  REQUIRE_THROWS_AS(mapping_confusion(empty_bank, phoneme_bank, f_v, f_a, labels, 3),
                    StateError);
}

TEST_CASE("coverage report on exact and collapsed center placements") {
  BankConfig cfg;
  cfg.cluster_count = 3;
  Matrix prototypes(3, 2);
  prototypes << 0, 0, 8, 0, 0, 8;
  Vector spreads = Vector::Constant(3, 0.5);

  SECTION("centers at prototypes cover everything with zero distance") {
    std::vector<std::vector<Vector>> caches(3);
    caches[0] = {prototypes.row(0).transpose()};
    caches[1] = {prototypes.row(1).transpose(), prototypes.row(1).transpose()};
    caches[2] = {prototypes.row(2).transpose()};
    auto bank = ClusterBank::from_state(cfg, prototypes, caches);
    CoverageReport report = coverage_report(bank, prototypes, spreads);
    REQUIRE(report.covered_count == 3);
    for (const auto& e : report.per_class) {
      REQUIRE(e.covered);
      REQUIRE(e.distance == 0.0);
    }
    REQUIRE(report.size_ratio == 2.0);
  }

  SECTION("all centers on one prototype cover exactly one class") {
    Matrix collapsed(3, 2);
    collapsed << 0, 0, 0.1, 0, 0, 0.1;
    auto bank =
        ClusterBank::from_state(cfg, collapsed, std::vector<std::vector<Vector>>(3));
    CoverageReport report = coverage_report(bank, prototypes, spreads);
    REQUIRE(report.covered_count == 1);
    REQUIRE(report.per_class[0].covered);
    REQUIRE_FALSE(report.per_class[1].covered);
    REQUIRE_FALSE(report.per_class[2].covered);
  }
}

TEST_CASE("embedding export writes headers, rows, and survives empty sets") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "univpm_export";
  fs::remove_all(dir);

  BankConfig cfg;
  cfg.cluster_count = 2;
  Matrix centers(2, 3);
  centers << 1, 2, 3, 4, 5, 6;
  auto bank = ClusterBank::from_state(cfg, centers, std::vector<std::vector<Vector>>(2));

  SECTION("empty evaluation set gives header-only frame files") {
    export_embeddings(bank, bank, Matrix(0, 3), Matrix(0, 3), {}, dir);
    std::string text = read_text_file(dir / "visual_frames.csv");
    REQUIRE(text == "frame_id,label,x0,x1,x2\n");
  }

  SECTION("row counts equal frames plus centers and values survive round trip") {
    Matrix frames = Matrix::Random(5, 3);
    std::vector<int> labels = {0, 1, 0, 1, 1};
    export_embeddings(bank, bank, frames, frames, labels, dir);

    auto count_lines = [](const std::string& text) {
      return std::count(text.begin(), text.end(), '\n');
    };
    std::string centers_csv = read_text_file(dir / "phoneme_centers.csv");
    std::string frames_csv = read_text_file(dir / "audio_frames.csv");
    REQUIRE(count_lines(centers_csv) == 1 + 2);
    REQUIRE(count_lines(frames_csv) == 1 + 5);

    // Parse one value back and compare at float32 precision.
    std::istringstream in(frames_csv);
    std::string line;
    std::getline(in, line);  // header
    std::getline(in, line);
    auto last_comma = line.find_last_of(',');
    double parsed = std::stod(line.substr(last_comma + 1));
    REQUIRE(parsed == Catch::Approx(frames(0, 2)).margin(1e-6));
  }
  fs::remove_all(dir);
}
