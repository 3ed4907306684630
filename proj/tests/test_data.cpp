#include <filesystem>
#include <set>

#include "doctest.h"
#include "mmfm/data.hpp"
#include "mmfm/errors.hpp"
#include "oracle.hpp"

using namespace mmfm;

TEST_CASE("caption template") {
  Scene s;
  s.objects = {{ShapeKind::Circle, Color::Red, 0, 0}};
  CHECK(caption_of(s) == "a red circle");
  s.objects.push_back({ShapeKind::Square, Color::Blue, 0, 1});
  s.objects.insert(s.objects.begin(), {ShapeKind::Triangle, Color::Green, 3, 3});
  CHECK(caption_of(s) == "a red circle and a blue square and a green triangle");
  const auto sample = make_task_sample(s, TaskTag::Caption, 1);
  REQUIRE(sample);
  const Tokenizer tok(512);
  CHECK(sample->gold_answer == tok.encode(caption_of(s)));
}

TEST_CASE("scenes respect placement constraints") {
  for (std::uint64_t i = 0; i < 2000; ++i) {
    const Scene s = Scene::generate(scene_seed(SeedNamespace::Instruct, 5, i));
    REQUIRE(!s.objects.empty());
    REQUIRE(s.objects.size() <= static_cast<std::size_t>(kMaxObjects));
    std::set<int> cells;
    std::set<std::pair<int, int>> kinds;
    for (const auto& o : s.objects) {
      CHECK(o.row >= 0);
      CHECK(o.row < kPlacementGrid);
      CHECK(o.col >= 0);
      CHECK(o.col < kPlacementGrid);
      cells.insert(o.row * kPlacementGrid + o.col);
      kinds.insert({static_cast<int>(o.shape), static_cast<int>(o.color)});
    }
    CHECK(cells.size() == s.objects.size());
    CHECK(kinds.size() == s.objects.size());
  }
}

TEST_CASE("cell center pixel carries the nominal colour") {
  for (std::uint64_t i = 0; i < 500; ++i) {
    const Scene s = Scene::generate(scene_seed(SeedNamespace::Pretrain, 17, i));
    const auto img = s.render();
    for (const auto& o : s.objects) {
      const int y = o.row * kCellPixels + kCellPixels / 2, x = o.col * kCellPixels + kCellPixels / 2;
      const std::size_t p = (static_cast<std::size_t>(y) * kCanvas + x) * 3;
      const auto rgb = rgb_of(o.color);
      CHECK(img[p] == rgb[0]);
      CHECK(img[p + 1] == rgb[1]);
      CHECK(img[p + 2] == rgb[2]);
    }
    // empty cells stay black
    for (int cell = 0; cell < kPlacementGrid * kPlacementGrid; ++cell) {
      const int r = cell / kPlacementGrid, c = cell % kPlacementGrid;
      bool occupied = false;
      for (const auto& o : s.objects) occupied |= o.row == r && o.col == c;
      if (occupied) continue;
      for (int y = 0; y < kCellPixels; ++y)
        for (int x = 0; x < kCellPixels; ++x)
          for (int ch = 0; ch < 3; ++ch)
            REQUIRE(img[(static_cast<std::size_t>(r * kCellPixels + y) * kCanvas + c * kCellPixels + x) * 3 + ch] == 0);
    }
  }
}

TEST_CASE("every gold answer matches the independent rule checker") {
  std::vector<Sample> all = gen_pretrain_corpus(300, 3);
  auto add = [&](std::vector<Sample> v) { all.insert(all.end(), v.begin(), v.end()); };
  add(gen_instruction_corpus(2000, 11, default_instruction_mix()));
  for (const auto& name : benchmark_names()) add(gen_benchmark({name, 400, 99}));
  const Tokenizer tok(512);
  for (const auto& s : all) {
    INFO(s.id << ": " << s.question);
    CHECK(oracle::answer(s.question, s.scene) == s.answer);
    CHECK(tok.decode(s.gold_answer) == s.answer);
    CHECK(s.sequence().size() + 16 <= 256u);
  }
}

TEST_CASE("corpus generation is deterministic") {
  const auto a = gen_instruction_corpus(300, 42, default_instruction_mix());
  const auto b = gen_instruction_corpus(300, 42, default_instruction_mix());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].scene.objects == b[i].scene.objects);
    CHECK(a[i].sequence() == b[i].sequence());
  }
  const auto c = gen_instruction_corpus(300, 43, default_instruction_mix());
  int same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i].scene.seed == c[i].scene.seed;
  CHECK(same == 0);
}

TEST_CASE("large pretrain corpus has unique ids") {
  const auto corpus = gen_pretrain_corpus(10000, 1);
  std::set<std::string> ids;
  for (const auto& s : corpus) {
    ids.insert(s.id);
    CHECK(s.task == TaskTag::Caption);
  }
  CHECK(ids.size() == 10000);
  CHECK_THROWS_AS(gen_pretrain_corpus(0, 1), InputError);
}

TEST_CASE("instruction examples") {
  SUBCASE("absent object gets no") {
    Scene s;
    s.objects = {{ShapeKind::Circle, Color::Red, 0, 0}, {ShapeKind::Square, Color::Green, 2, 1}};
    for (std::uint64_t k = 0; k < 20; ++k) {
      const auto smp = make_task_sample(s, TaskTag::Existence, k, false);
      REQUIRE(smp);
      CHECK(smp->answer == "no");
      CHECK(smp->question.find("red circle") == std::string::npos);
      CHECK(smp->question.find("green square") == std::string::npos);
    }
  }
  SUBCASE("count of a three-object scene") {
    Scene s;
    s.objects = {{ShapeKind::Circle, Color::Red, 0, 0}, {ShapeKind::Square, Color::Green, 2, 1}, {ShapeKind::Triangle, Color::Blue, 3, 3}};
    bool saw_total = false;
    for (std::uint64_t k = 0; k < 50; ++k) {
      const auto smp = make_task_sample(s, TaskTag::Count, k);
      if (smp->question == "how many objects are there ?") {
        CHECK(smp->answer == "3");
        saw_total = true;
      }
    }
    CHECK(saw_total);
  }
  SUBCASE("single-task mix") {
    for (const auto& s : gen_instruction_corpus(200, 4, parse_mix("existence=1.0"))) CHECK(s.task == TaskTag::Existence);
  }
  SUBCASE("mix proportions are honoured") {
    const auto corpus = gen_instruction_corpus(5000, 8, default_instruction_mix());
    std::map<TaskTag, int> n;
    for (const auto& s : corpus) ++n[s.task];
    for (const auto& [tag, c] : n) CHECK(std::abs(c / 5000.0 - 0.2) < 0.03);
  }
  SUBCASE("invalid mixes") {
    CHECK_THROWS_AS(parse_mix("existence=0.5,count=0.4"), InputError);
    CHECK_THROWS_AS(parse_mix("existence=1.5,count=-0.5"), InputError);
    CHECK_THROWS_AS(parse_mix("colour=1.0"), InputError);
    CHECK_THROWS_AS(parse_mix(""), InputError);
    CHECK_THROWS_AS(gen_instruction_corpus(5, 1, {}), InputError);
  }
  SUBCASE("answers come from the closed answer space") {
    const std::set<std::string> closed = {"yes", "no", "red", "green", "blue", "yellow", "0", "1", "2", "3", "4",
                                          "left", "right", "above", "below"};
    for (const auto& s : gen_instruction_corpus(1000, 9, parse_mix("existence=0.25,attribute=0.25,count=0.25,spatial=0.25")))
      CHECK(closed.count(s.answer) == 1);
  }
}

TEST_CASE("benchmarks") {
  SUBCASE("toy-pope is balanced") {
    for (int n : {100, 200, 37}) {
      const auto b = gen_benchmark({"toy-pope", n, 99});
      int pos = 0;
      for (const auto& s : b) pos += s.answer == "yes";
      CHECK(pos == n / 2);
    }
  }
  SUBCASE("toy-gqa attribute question") {
    Scene s;
    s.objects = {{ShapeKind::Triangle, Color::Blue, 1, 1}, {ShapeKind::Circle, Color::Red, 0, 3}, {ShapeKind::Circle, Color::Green, 3, 0}};
    const auto smp = make_task_sample(s, TaskTag::Attribute, 3);
    REQUIRE(smp);
    CHECK(smp->question == "what color is the triangle ?");
    CHECK(smp->answer == "blue");
  }
  SUBCASE("item ids are stable under a fixed seed") {
    const auto a = gen_benchmark({"toy-vqa", 50, 5});
    const auto b = gen_benchmark({"toy-vqa", 80, 5});
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].id == b[i].id);
      CHECK(a[i].question == b[i].question);
    }
    CHECK(a[7].id == "toy-vqa-5-000007");
  }
  SUBCASE("scene seeds never collide with training namespaces") {
    std::set<std::uint64_t> train;
    for (const auto& s : gen_pretrain_corpus(3000, 17)) train.insert(s.scene.seed);
    for (const auto& s : gen_instruction_corpus(3000, 17, default_instruction_mix())) train.insert(s.scene.seed);
    int collisions = 0;
    for (const auto& name : benchmark_names())
      for (const auto& s : gen_benchmark({name, 1000, 17})) {
        collisions += static_cast<int>(train.count(s.scene.seed));
        CHECK(namespace_of(s.scene.seed) != SeedNamespace::Pretrain);
        CHECK(namespace_of(s.scene.seed) != SeedNamespace::Instruct);
      }
    CHECK(collisions == 0);
  }
  SUBCASE("unknown benchmark") { CHECK_THROWS_AS(gen_benchmark({"toy-mme", 10, 1}), InputError); }
}

TEST_CASE("tokenizer") {
  const Tokenizer small(512), large(8192);
  CHECK(small.encode("a red circle").size() == 3);
  CHECK(small.decode(small.encode("a red circle")) == "a red circle");
  CHECK(small.encode("").empty());
  CHECK(small.encode("   ").empty());
  for (const auto& w : Tokenizer::closed_vocabulary()) {
    CHECK(small.encode(w) == large.encode(w));
    CHECK(small.decode(small.encode(w)) == w);
  }
  for (const auto& s : gen_instruction_corpus(200, 2, default_instruction_mix())) {
    CHECK(small.encode(s.question) == large.encode(s.question));
    CHECK(small.decode(small.encode(s.question)) == s.question);
  }
  CHECK(small.encode("purple") == std::vector<int>{Tokenizer::kUnk});
  CHECK_THROWS_AS(Tokenizer(Tokenizer::closed_size() - 1), ConfigError);
  CHECK_NOTHROW(Tokenizer(Tokenizer::closed_size()));
  CHECK(small.id_of("USER:") == Tokenizer::kUser);
  CHECK(small.id_of("ASSISTANT:") == Tokenizer::kAssistant);
  CHECK(small.id_of("<eoa>") == Tokenizer::kEndOfAnswer);
}

TEST_CASE("sequence layout") {
  const auto s = gen_instruction_corpus(1, 3, parse_mix("count=1"))[0];
  const Tokenizer tok(512);
  CHECK(tok.decode(s.sequence()) == "USER: " + s.question + " ASSISTANT: " + s.answer + " <eoa>");
  CHECK(tok.decode(s.prompt()) == "USER: " + s.question + " ASSISTANT:");
}

TEST_CASE("corpus persistence round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "mmfm_test_corpus";
  std::filesystem::remove_all(dir);
  const auto corpus = gen_benchmark({"toy-gqa", 60, 4});
  save_corpus(dir, {"benchmark", "toy-gqa", 60, 4, mix_string(benchmark_mix("toy-gqa"))}, corpus);
  CorpusInfo info;
  const auto back = load_corpus(dir, &info);
  CHECK(info.kind == "benchmark");
  CHECK(info.n == 60);
  REQUIRE(back.size() == corpus.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].id == corpus[i].id);
    CHECK(back[i].scene.objects == corpus[i].scene.objects);
    CHECK(back[i].sequence() == corpus[i].sequence());
    CHECK(back[i].task == corpus[i].task);
  }
  std::filesystem::resize_file(dir / "images.bin", 100);
  CHECK_THROWS_AS(load_corpus(dir), FormatError);
  std::filesystem::remove_all(dir);
}
