#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "d4s/evaluation.hpp"
#include "support.hpp"

using namespace d4s;
using namespace d4s_test;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::synthetic(64, 2, 3, 4);
  return v;
}

std::string e(std::size_t i) { return "e" + std::to_string(i); }

FactRecord make_fact(std::size_t i) {
  FactRecord f;
  f.subject = {e(i), e(20)};
  f.relation = "{s} r0.0 {o}";
  f.old_object = {e(21)};
  f.new_object = {e(30 + i), e(40)};
  f.paraphrases = {"{s} r0.1 {o}", "r0.2 {s} {o}"};
  f.neighbors = {{{e(i), e(22)}, "{s} r1.0 {o}", {e(23)}},
                 {{e(i), e(24)}, "{s} r1.0 {o}", {e(25)}}};
  return f;
}

std::vector<FactRecord> make_facts(std::size_t n) {
  std::vector<FactRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_fact(i));
  return out;
}

LookupModel lookup() {
  LookupModel m;
  m.vocab_size = vocab().size();
  return m;
}

void teach_edit(LookupModel& m, const FactRecord& f) {
  m.teach(render_prompt(f, Variant::base(), vocab()), vocab().encode(f.new_object));
}

}  // namespace

TEST(Perplexity, UniformScoresGiveVocabularySize) {
  const ConstantModel m{Vector(256, 0.0)};
  const FactRecord f = make_fact(0);
  const Vector lp = target_logprobs(m, render_prompt(f, Variant::base(), vocab()),
                                    vocab().encode(f.new_object));
  EXPECT_NEAR(perplexity(lp), 256.0, 256.0 * 1e-14);
}

TEST(Perplexity, ConfidentCorrectModelGivesOne) {
  LookupModel m = lookup();
  m.margin = 1e6;
  const FactRecord f = make_fact(0);
  teach_edit(m, f);
  const Vector lp = target_logprobs(m, render_prompt(f, Variant::base(), vocab()),
                                    vocab().encode(f.new_object));
  EXPECT_EQ(perplexity(lp), 1.0);
}

TEST(Perplexity, EmptySequenceIsAnError) {
  EXPECT_THROW(perplexity(Vector{}), Error);
}

TEST(Perplexity, HandExample) {
  const Vector lp = {std::log(0.5), std::log(0.125)};
  EXPECT_NEAR(perplexity(lp), 4.0, 1e-15);
}

TEST(ArgmaxToken, TiesGoToLowestId) {
  const Vector s = {0.0, 2.0, 2.0, 1.0};
  EXPECT_EQ(argmax_token(s), 1);
}

TEST(Predicts, MultiTokenTargetNeedsEveryToken) {
  LookupModel m = lookup();
  const FactRecord f = make_fact(0);
  const RenderedPrompt p = render_prompt(f, Variant::base(), vocab());
  const TokenSeq target = vocab().encode(f.new_object);
  m.teach(p, std::span<const Token>(target).first(1));
  EXPECT_FALSE(predicts(m, p, target));
  m.teach(p, target);
  EXPECT_TRUE(predicts(m, p, target));
}

TEST(Metrics, EfficacyIsFractionOfEditsRecalled) {
  LookupModel m = lookup();
  const auto facts = make_facts(4);
  teach_edit(m, facts[0]);
  teach_edit(m, facts[2]);
  teach_edit(m, facts[3]);
  EXPECT_EQ(evaluate_efficacy(m, facts, vocab()), 0.75);
}

TEST(Metrics, ParaphraseAveragesPerFactFractions) {
  LookupModel m = lookup();
  const auto facts = make_facts(2);
  const TokenSeq t0 = vocab().encode(facts[0].new_object);
  m.teach(render_prompt(facts[0], Variant::paraphrase(0), vocab()), t0);
  m.teach(render_prompt(facts[0], Variant::paraphrase(1), vocab()), t0);
  m.teach(render_prompt(facts[1], Variant::paraphrase(1), vocab()),
          vocab().encode(facts[1].new_object));
  EXPECT_EQ(evaluate_paraphrase(m, facts, vocab()), 0.75);
}

TEST(Metrics, SpecificityScoresNeighborObjects) {
  LookupModel m = lookup();
  const auto facts = make_facts(1);
  const auto& n = facts[0].neighbors[1];
  m.teach(render_prompt(facts[0], Variant::neighbor(1), vocab()), vocab().encode(n.object));
  EXPECT_EQ(evaluate_specificity(m, facts, vocab()), 0.5);
}

TEST(Metrics, ReportAverageIsMeanOfThree) {
  LookupModel m = lookup();
  const auto facts = make_facts(2);
  teach_edit(m, facts[0]);
  const EvalReport r = evaluate_report(m, facts, vocab());
  EXPECT_EQ(r.efficacy, 0.5);
  EXPECT_EQ(r.paraphrase, 0.0);
  EXPECT_EQ(r.specificity, 0.0);
  EXPECT_EQ(r.average, 0.5 / 3.0);
}

TEST(Metrics, EmptyFactListIsConfigError) {
  const LookupModel m = lookup();
  EXPECT_THROW(evaluate_efficacy(m, std::vector<FactRecord>{}, vocab()), ConfigError);
  EXPECT_THROW(evaluate_specificity(m, std::vector<FactRecord>{}, vocab()), ConfigError);
}

TEST(Metrics, BaseAccuracyScoresOldObject) {
  LookupModel m = lookup();
  const auto facts = make_facts(2);
  m.teach(render_prompt(facts[1], Variant::base(), vocab()), vocab().encode(facts[1].old_object));
  EXPECT_EQ(base_fact_accuracy(m, facts, vocab()), 0.5);
}

TEST(Metrics, ObjectivePerplexityOfUniformModel) {
  const ConstantModel m{Vector(64, 0.0)};
  EXPECT_NEAR(objective_perplexity(m, make_facts(3), vocab()), 64.0, 64.0 * 1e-14);
}

TEST(Forgetting, OverallTracksEveryEditSoFar) {
  const auto facts = make_facts(4);
  LookupModel after2 = lookup(), after4 = lookup();
  teach_edit(after2, facts[0]);
  teach_edit(after2, facts[1]);
  teach_edit(after4, facts[0]);
  teach_edit(after4, facts[2]);
  teach_edit(after4, facts[3]);
  const std::vector<ModelCheckpoint<LookupModel>> cps = {{2, &after2}, {4, &after4}};
  const ForgettingCurve c =
      forgetting_overall<LookupModel>(cps, facts, vocab(), 2);
  EXPECT_EQ(c.checkpoints, (std::vector<std::size_t>{2, 4}));
  ASSERT_EQ(c.buckets.size(), 2u);
  EXPECT_EQ(c.buckets[0].efficacy, 1.0);
  EXPECT_EQ(c.buckets[1].efficacy, 0.75);
}

TEST(Forgetting, MisalignedCheckpointIsIndexError) {
  const auto facts = make_facts(4);
  const LookupModel m = lookup();
  const std::vector<ModelCheckpoint<LookupModel>> cps = {{3, &m}};
  EXPECT_THROW(forgetting_overall<LookupModel>(cps, facts, vocab(), 2), IndexError);
  const std::vector<ModelCheckpoint<LookupModel>> beyond = {{6, &m}};
  EXPECT_THROW(forgetting_overall<LookupModel>(beyond, facts, vocab(), 2), IndexError);
  EXPECT_THROW(forgetting_overall<LookupModel>(cps, facts, vocab(), 0), ConfigError);
}

TEST(Forgetting, DegreeBucketsCoverEveryEditOnce) {
  const auto facts = make_facts(7);
  LookupModel m = lookup();
  for (std::size_t i : {0, 1, 2, 6}) teach_edit(m, facts[i]);
  const ForgettingCurve c = forgetting_degree(m, std::span<const FactRecord>(facts), vocab(), 3);
  ASSERT_EQ(c.buckets.size(), 3u);
  EXPECT_EQ(c.buckets[0].begin, 0u);
  EXPECT_EQ(c.buckets[0].end, 3u);
  EXPECT_EQ(c.buckets[0].efficacy, 1.0);
  EXPECT_EQ(c.buckets[1].efficacy, 0.0);
  EXPECT_EQ(c.buckets[2].begin, 6u);
  EXPECT_EQ(c.buckets[2].end, 7u);
  EXPECT_EQ(c.buckets[2].efficacy, 1.0);
  EXPECT_THROW(forgetting_degree(m, std::span<const FactRecord>(facts), vocab(), 0), ConfigError);
}

TEST(SeriesCsv, RoundTripIsExact) {
  const auto dir = scratch_dir("series");
  const std::vector<SeriesRow> rows = {
      {1, "target_prob", 0.1}, {2, "l1_layer0", 1.0 / 3.0}, {2, "overall_efficacy", 1e-300}};
  write_series_csv(dir / "s.csv", rows);
  const auto back = read_series_csv(dir / "s.csv");
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].edit_index, rows[i].edit_index);
    EXPECT_EQ(back[i].metric, rows[i].metric);
    EXPECT_EQ(back[i].value, rows[i].value);
  }
  EXPECT_EQ(slurp(dir / "s.csv").substr(0, 23), "edit_index,metric,value");
  std::filesystem::remove_all(dir);
}

TEST(SeriesCsv, MalformedLineIsParseError) {
  const auto dir = scratch_dir("series_bad");
  {
    std::ofstream os(dir / "b.csv");
    os << "edit_index,metric,value\n1;target_prob;0.5\n";
  }
  EXPECT_THROW(read_series_csv(dir / "b.csv"), ParseError);
  std::filesystem::remove_all(dir);
}
