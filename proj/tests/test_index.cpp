#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <random>

#include "retgen/index.hpp"

using namespace retgen;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 32;
  cfg.eos_token_id = Tokenizer::kEos;
  cfg.seed = 21;
  return cfg;
}

Collection small_collection(int n) {
  Collection c;
  for (int i = 0; i < n; ++i) {
    char pid[16];
    std::snprintf(pid, sizeof(pid), "p%03d", i);
    c.add(Passage{pid, Tokenizer::word(i % 40) + " " + Tokenizer::word((i * 7) % 40)});
  }
  return c;
}

DenseIndex random_index(int rows, int d, std::mt19937_64& rng) {
  DenseIndex idx;
  idx.d_model = d;
  idx.fingerprint = 1;
  std::normal_distribution<double> g;
  for (int i = 0; i < rows; ++i) {
    char pid[16];
    std::snprintf(pid, sizeof(pid), "p%04d", i);
    idx.pids.push_back(pid);
    for (int j = 0; j < d; ++j) idx.embeddings.push_back(g(rng));
  }
  return idx;
}

}  // namespace

TEST_CASE("build_index") {
  Tokenizer tok(64);
  ModelState state = ModelState::init(small_config());

  SECTION("one passage gives one row") {
    Collection c = small_collection(1);
    DenseIndex idx = build_index(c, state, tok, 16);
    CHECK(idx.size() == 1);
    CHECK(idx.embeddings.size() == 8);
    CHECK(idx.fingerprint == state.fingerprint());
  }

  SECTION("empty collection rejected") {
    Collection c;
    CHECK_THROWS_AS(build_index(c, state, tok, 16), ArgumentError);
  }

  SECTION("rebuild with the same checkpoint is bit-identical") {
    Collection c = small_collection(5);
    DenseIndex a = build_index(c, state, tok, 16);
    DenseIndex b = build_index(c, state, tok, 16);
    CHECK(a.embeddings == b.embeddings);
  }

  SECTION("parameter change is caught by the fingerprint") {
    Collection c = small_collection(3);
    DenseIndex idx = build_index(c, state, tok, 16);
    ModelState other = state;
    other.unembed.at(0, 0) += 1e-12;
    QueryContext ctx;
    ctx.tokens = {7, 9};
    ctx.repr_index = 2;
    CHECK_THROWS_AS(search(idx, other, "q1", ctx, 3), IntegrityError);
  }
}

TEST_CASE("search ranking") {
  SECTION("hand-computed dot products and order") {
    DenseIndex idx;
    idx.d_model = 2;
    idx.pids = {"p1", "p2", "p3"};
    idx.embeddings = {2, 0, 1, 0, 0, 5};
    RankedList r = search_vector(idx, "q", {1, 0}, 3);
    REQUIRE(r.entries.size() == 3);
    CHECK(r.entries[0].pid == "p1");
    CHECK(r.entries[0].score == 2.0);
    CHECK(r.entries[1].pid == "p2");
    CHECK(r.entries[1].score == 1.0);
    CHECK(r.entries[2].pid == "p3");
    CHECK(r.entries[2].score == 0.0);
  }

  SECTION("identical embeddings order by passage id") {
    DenseIndex idx;
    idx.d_model = 2;
    idx.pids = {"pz", "pa"};
    idx.embeddings = {1, 1, 1, 1};
    RankedList r = search_vector(idx, "q", {0.5, 0.5}, 2);
    CHECK(r.entries[0].pid == "pa");
    CHECK(r.entries[1].pid == "pz");
  }

  SECTION("k beyond the collection returns everything ordered") {
    std::mt19937_64 rng(3);
    DenseIndex idx = random_index(20, 4, rng);
    std::vector<double> q = {1, -1, 0.5, 2};
    RankedList r = search_vector(idx, "q", q, 100);
    REQUIRE(r.entries.size() == 20);
    for (size_t i = 1; i < r.entries.size(); ++i)
      CHECK(r.entries[i - 1].score >= r.entries[i].score);
  }

  SECTION("matches a brute-force oracle exactly") {
    std::mt19937_64 rng(17);
    DenseIndex idx = random_index(500, 8, rng);
    std::normal_distribution<double> g;
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<double> q(8);
      for (double& v : q) v = g(rng);
      RankedList got = search_vector(idx, "q", q, 10);

      std::vector<std::pair<double, std::string>> all;
      for (size_t i = 0; i < idx.size(); ++i)
        all.emplace_back(dot(q.data(), idx.row(i), idx.d_model), idx.pids[i]);
      std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      REQUIRE(got.entries.size() == 10);
      for (int i = 0; i < 10; ++i) {
        CHECK(got.entries[static_cast<size_t>(i)].pid == all[static_cast<size_t>(i)].second);
        CHECK(got.entries[static_cast<size_t>(i)].score == all[static_cast<size_t>(i)].first);
      }
    }
  }

  SECTION("stored scores recompute to the same bits") {
    std::mt19937_64 rng(29);
    DenseIndex idx = random_index(50, 6, rng);
    std::vector<double> q = {0.1, 0.2, 0.3, -0.4, 0.5, -0.6};
    RankedList r = search_vector(idx, "q", q, 50);
    for (const ScoredPassage& sp : r.entries) {
      const size_t row =
          static_cast<size_t>(std::find(idx.pids.begin(), idx.pids.end(), sp.pid) -
                              idx.pids.begin());
      CHECK(sp.score == dot(q.data(), idx.row(row), idx.d_model));
    }
  }
}

TEST_CASE("index persistence and run files") {
  auto dir = std::filesystem::temp_directory_path() / "retgen_index_test";
  std::filesystem::create_directories(dir);

  SECTION("round-trip") {
    std::mt19937_64 rng(5);
    DenseIndex idx = random_index(10, 4, rng);
    idx.save(dir / "x.idx");
    DenseIndex loaded = DenseIndex::load(dir / "x.idx");
    CHECK(loaded.fingerprint == idx.fingerprint);
    CHECK(loaded.pids == idx.pids);
    CHECK(loaded.embeddings == idx.embeddings);
  }

  SECTION("run file round-trip with ranks from one") {
    std::vector<RankedList> lists = {
        RankedList{"s0_1", {{"p2", 1.5}, {"p1", 0.25}}},
        RankedList{"s0_2", {{"p9", -3.0}}},
    };
    write_run_file(lists, "retgen", dir / "run.txt");
    std::ifstream is(dir / "run.txt");
    std::string line;
    std::getline(is, line);
    CHECK(line == "s0_1 Q0 p2 1 1.5 retgen");
    auto parsed = read_run_file(dir / "run.txt");
    REQUIRE(parsed.size() == 2);
    CHECK(parsed[0].entries[0].pid == "p2");
    CHECK(parsed[0].entries[1].score == 0.25);
    CHECK(parsed[1].qid == "s0_2");
  }
}
