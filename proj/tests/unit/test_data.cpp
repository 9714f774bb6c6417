#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "tah/data/corpus.hpp"
#include "tah/data/tasks.hpp"

using namespace tah;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tah_data_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Tasks, ExampleDependsOnlyOnSeedAndIndex) {
  TaskSpec t;
  auto all = generate_task(t, 20, 7);
  for (std::uint64_t i = 0; i < 20; ++i) {
    auto ex = generate_example(t, 7, i);
    EXPECT_EQ(ex.text, all[i].text);
    EXPECT_EQ(ex.key, all[i].key);
  }
  EXPECT_NE(generate_example(t, 8, 0).text + generate_example(t, 8, 1).text, all[0].text + all[1].text);
}

TEST(Tasks, ModChainResponsesAreRunningSums) {
  TaskSpec t;
  t.modulus = 7;
  for (const auto& ex : generate_task(t, 200, 3)) {
    ASSERT_EQ(ex.text.size(), ex.key.size());
    ASSERT_EQ(ex.text[ex.prompt_len - 1], '=');
    std::vector<int> terms;
    for (std::size_t i = 0; i + 1 < ex.prompt_len; i += 2) terms.push_back(ex.text[i] - '0');
    int acc = 0;
    std::string expect;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      acc = (acc + terms[i]) % 7;
      if (i) expect += ',';
      expect += static_cast<char>('0' + acc);
    }
    expect += '.';
    EXPECT_EQ(ex.text.substr(ex.prompt_len), expect);
    for (std::size_t i = 0; i < ex.prompt_len; ++i) EXPECT_EQ(ex.key[i], 'p');
  }
}

TEST(Tasks, CopyAndBracketsAnswers) {
  TaskSpec c;
  c.kind = TaskKind::copy;
  c.copy_reverse = true;
  for (const auto& ex : generate_task(c, 30, 1)) {
    auto src = ex.text.substr(0, ex.prompt_len - 1);
    std::string rev(src.rbegin(), src.rend());
    EXPECT_EQ(ex.text.substr(ex.prompt_len), rev + ".");
  }
  TaskSpec b;
  b.kind = TaskKind::brackets;
  std::set<char> seen;
  for (const auto& ex : generate_task(b, 200, 1)) {
    const char ans = ex.text[ex.prompt_len];
    seen.insert(ans);
    int depth = 0;
    bool ok = true;
    std::string st;
    for (std::size_t i = 0; i + 1 < ex.prompt_len; ++i) {
      char ch = ex.text[i];
      if (ch == '(' || ch == '[') st += ch;
      else if (!st.empty() && ((ch == ')' && st.back() == '(') || (ch == ']' && st.back() == '['))) st.pop_back();
      else ok = false;
    }
    (void)depth;
    EXPECT_EQ(ans, ok && st.empty() ? '1' : '0') << ex.text;
  }
  EXPECT_EQ(seen.size(), 2u);
}

TEST(Tasks, InvalidSpecRejected) {
  TaskSpec t;
  t.modulus = 1;
  EXPECT_THROW(generate_task(t, 1, 0), ConfigError);
  EXPECT_THROW(parse_task_kind("sorting"), ConfigError);
}

TEST(Corpus, TokenizeReportsOutOfVocabulary) {
  Vocabulary v("ab.");
  EXPECT_EQ(tokenize("ab.a", v), (std::vector<std::int64_t>{0, 1, 2, 0}));
  EXPECT_EQ(detokenize({1, 0, 2}, v), "ba.");
  try {
    tokenize("axbyx", v);
    FAIL();
  } catch (const TokenizationError& e) {
    EXPECT_NE(std::string(e.what()).find("xy"), std::string::npos);
  }
}

TEST(Corpus, SplitSizesAndDeterminism) {
  TaskSpec t;
  auto raw = generate_task(t, 50, 2);
  auto c = build_corpus(t, raw, 0.2, 11);
  EXPECT_EQ(c.indices(Split::validation).size(), 10u);
  EXPECT_EQ(c.indices(Split::train).size(), 40u);
  auto c2 = build_corpus(t, raw, 0.2, 11);
  EXPECT_EQ(c.split, c2.split);
  EXPECT_EQ(validation_count(3, 0.01), 1u);
  EXPECT_EQ(validation_count(2, 0.9), 1u);
  EXPECT_EQ(validation_count(10, 0.0), 0u);
  EXPECT_THROW(build_corpus(t, {}, 0.1, 0), EmptyCorpusError);
}

TEST(Corpus, TargetsCoverTheResponseOnly) {
  Sequence s{{5, 6, 7, 8, 9}, "ppccf", 2};
  EXPECT_EQ(s.targets(), (std::vector<std::int64_t>{-1, 7, 8, 9, -1}));
}

TEST(Corpus, FileRoundTrip) {
  TaskSpec t;
  t.kind = TaskKind::copy;
  auto c = build_corpus(t, generate_task(t, 12, 4), 0.25, 4);
  const auto path = scratch("rt") / "corpus.txt";
  write_corpus(path, c);
  auto r = read_corpus(path);
  EXPECT_EQ(r.vocab.chars(), c.vocab.chars());
  EXPECT_EQ(r.split, c.split);
  ASSERT_EQ(r.sequences.size(), c.sequences.size());
  for (std::size_t i = 0; i < c.sequences.size(); ++i) {
    EXPECT_EQ(r.sequences[i].ids, c.sequences[i].ids);
    EXPECT_EQ(r.sequences[i].key, c.sequences[i].key);
    EXPECT_EQ(r.sequences[i].prompt_len, c.sequences[i].prompt_len);
  }
  EXPECT_EQ(r.task.kind, TaskKind::copy);
}

TEST(Corpus, VocabularyEscapesSurviveRoundTrip) {
  TokenizedCorpus c;
  c.vocab = Vocabulary(std::string("a \t\n\\"));
  c.sequences.push_back({{0, 1, 2, 3, 4}, "ppccf", 2});
  c.split.push_back(Split::train);
  const auto path = scratch("esc") / "c.txt";
  write_corpus(path, c);
  EXPECT_EQ(read_corpus(path).vocab.chars(), c.vocab.chars());
}

TEST(Corpus, CorruptFileRejected) {
  const auto path = scratch("bad") / "c.txt";
  std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << "hello\n";
  EXPECT_THROW(read_corpus(path), IoError);
  EXPECT_THROW(read_corpus(scratch("missing") / "none.txt"), IoError);
}

TEST(Batches, CoverPoolOncePerEpochWithPadding) {
  TaskSpec t;
  auto c = build_corpus(t, generate_task(t, 23, 5), 0.0, 5);
  auto pool = c.indices(Split::train);
  auto b = make_batches(c, pool, 5, 256, 9, 0);
  ASSERT_EQ(b.size(), 5u);
  std::multiset<std::size_t> seen;
  for (const auto& x : b) {
    ASSERT_EQ(x.sequence_ids.size(), 5u);
    for (std::size_t k = 0; k < 5; ++k) {
      if (x.sequence_ids[k] == static_cast<std::size_t>(-1)) {
        for (auto m : x.mask[k]) EXPECT_EQ(m, 0);
        continue;
      }
      seen.insert(x.sequence_ids[k]);
      const auto& s = c.sequences[x.sequence_ids[k]];
      for (std::size_t i = 0; i < x.width; ++i) EXPECT_EQ(x.mask[k][i], i < s.ids.size() ? 1 : 0);
    }
  }
  EXPECT_EQ(seen, std::multiset<std::size_t>(pool.begin(), pool.end()));
  auto again = make_batches(c, pool, 5, 256, 9, 0);
  auto other = make_batches(c, pool, 5, 256, 9, 1);
  EXPECT_EQ(again[0].sequence_ids, b[0].sequence_ids);
  bool differs = false;
  for (std::size_t i = 0; i < b.size(); ++i) differs |= other[i].sequence_ids != b[i].sequence_ids;
  EXPECT_TRUE(differs);
}

TEST(Batches, LongSequencesDropped) {
  TaskSpec t;
  auto c = build_corpus(t, generate_task(t, 40, 5), 0.0, 5);
  auto b = make_batches(c, c.indices(Split::train), 64, 9, 0, 0);
  for (auto id : b[0].sequence_ids)
    if (id != static_cast<std::size_t>(-1)) EXPECT_LE(c.sequences[id].ids.size(), 9u);
  EXPECT_THROW(make_batches(c, c.indices(Split::train), 4, 2, 0, 0), EmptyCorpusError);
}
