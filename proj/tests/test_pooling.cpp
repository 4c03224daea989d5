#include <gtest/gtest.h>

#include "btok/pooling.hpp"
#include "support.hpp"

namespace btok {
namespace {

using namespace btok::testing;

TEST(InitBtoks, CopiesTheInitRow) {
  const auto c = tiny_config();
  const auto p = init_parameters<double>(c, 1);
  EXPECT_EQ(kDefaultBTokCount, 4);
  const auto bank = init_btoks(p, kDefaultBTokCount, 1);
  ASSERT_EQ(bank.size(), 4);
  for (Index k = 0; k < 4; ++k) EXPECT_TRUE(bank.rows.row(k) == p.token_embedding.row(1));
  const auto one = init_btoks(p, 1, 5);
  ASSERT_EQ(one.size(), 1);
  EXPECT_TRUE(one.rows.row(0) == p.token_embedding.row(5));
  EXPECT_THROW(init_btoks(p, 0, 1), ConfigError);
  EXPECT_THROW(init_btoks(p, 2, 16), ConfigError);
  EXPECT_THROW(init_btoks(p, 2, -1), ConfigError);
}

TEST(Augment, LayoutArithmetic) {
  const auto c = tiny_config();
  const auto s = spread_state(c, 4, 2);
  Tape<double> tape(GradMode::inference);
  const auto vars = bind(tape, s.params, nullptr);
  const auto bank = tape.constant(s.bank.rows);
  const TokenSequence x{3, 4, 5, 6, 7};
  const auto a = augment(tape, vars, x, bank);
  EXPECT_EQ(a.length(), 9);
  EXPECT_EQ(a.btok_begin(), 5);
  const M e = tape.value(a.embeddings);
  for (Index i = 0; i < 5; ++i) EXPECT_TRUE(e.row(i) == s.params.token_embedding.row(x[static_cast<std::size_t>(i)]));
  EXPECT_TRUE(bitwise_equal(M(e.bottomRows(4)), s.bank.rows));

  const auto empty = augment(tape, vars, TokenSequence{}, bank);
  EXPECT_EQ(empty.length(), 4);
  EXPECT_TRUE(bitwise_equal(M(tape.value(empty.embeddings)), s.bank.rows));

  const auto other = augment(tape, vars, TokenSequence{9, 9}, bank);
  EXPECT_TRUE(bitwise_equal(M(tape.value(other.embeddings).bottomRows(4)), M(e.bottomRows(4))));
}

TEST(Augment, LengthOverflow) {
  const auto c = tiny_config(16, 8, 1, 2, 6);
  const auto s = spread_state(c, 4, 2);
  Tape<double> tape(GradMode::inference);
  const auto vars = bind(tape, s.params, nullptr);
  EXPECT_THROW(augment(tape, vars, TokenSequence{1, 2, 3}, tape.constant(s.bank.rows)), ShapeError);
  EXPECT_THROW(embed(s.params, s.bank, TokenSequence{1, 2, 3}), ShapeError);
}

// Independent pass: causal forward over the augmented sequence, then an explicit sum.
M btok_hidden(const ModelState<double>& s, const TokenSequence& x) {
  Tape<double> tape(GradMode::inference);
  const auto vars = bind(tape, s.params, nullptr);
  std::vector<Tape<double>::Var> parts;
  if (!x.empty()) parts.push_back(embed_tokens(tape, vars, x));
  parts.push_back(tape.constant(s.bank.rows));
  const auto r = forward(tape, vars, tape.concat_rows(parts), AttentionMaskSpec::causal());
  return tape.value(r.hidden).bottomRows(s.bank.size());
}

TEST(Embed, MeanOfBtokStates) {
  const auto c = tiny_config();
  const auto s = spread_state(c, 3, 5);
  const TokenSequence x{1, 2, 3, 4};
  const M h = btok_hidden(s, x);
  RowVector<double> sum = RowVector<double>::Zero(8);
  for (Index k = 0; k < 3; ++k) sum += h.row(k);
  const auto e = embed(s.params, s.bank, x);
  EXPECT_LT(max_abs(e.values, sum / 3.0), 1e-15);
  EXPECT_EQ(e.produced_by, PoolingKind::btok_mean);
  EXPECT_EQ(e.positions_processed, 7);
}

TEST(Embed, SingleBtokIsItsHiddenState) {
  const auto c = tiny_config();
  const auto s = spread_state(c, 1, 6);
  const TokenSequence x{5, 6};
  EXPECT_TRUE(embed(s.params, s.bank, x).values == btok_hidden(s, x).row(0));
}

TEST(Embed, FixedCapacityForAllLengths) {
  const auto c = tiny_config(16, 8, 2, 2, 128);
  const auto s = spread_state(c, 4, 6);
  Rng g(2);
  for (Index n : {0, 1, 7, 100}) {
    const auto e = embed(s.params, s.bank, random_tokens(g, n, 16));
    EXPECT_EQ(e.values.size(), 8);
    EXPECT_EQ(e.positions_processed, n + 4);
  }
}

TEST(Embed, PositionsProcessedAtHundred) {
  const auto c = tiny_config(16, 8, 1, 2, 128);
  const auto s = spread_state(c, 4, 6);
  Rng g(3);
  EXPECT_EQ(embed(s.params, s.bank, random_tokens(g, 100, 16)).positions_processed, 104);
}

TEST(Embed, OrderSensitive) {
  const auto c = tiny_config();
  const auto s = spread_state(c, 2, 7);
  const auto a = embed(s.params, s.bank, TokenSequence{3, 8, 5});
  const auto b = embed(s.params, s.bank, TokenSequence{8, 3, 5});
  EXPECT_GT(max_abs(a.values, b.values), 1e-6);
}

TEST(Embed, BtokVisibility) {
  const auto c = tiny_config();
  auto s = spread_state(c, 3, 8);
  const TokenSequence x{2, 4, 6, 8};
  const M h0 = btok_hidden(s, x);
  for (std::size_t j = 0; j < x.size(); ++j) {
    auto y = x;
    y[j] = 11;
    const M h1 = btok_hidden(s, y);
    for (Index k = 0; k < 3; ++k) EXPECT_GT((h1.row(k) - h0.row(k)).norm(), 0.0);
  }
  // Input states are unchanged when the bank moves.
  auto run_inputs = [&](const BTokBank<double>& bank) {
    Tape<double> tape(GradMode::inference);
    const auto vars = bind(tape, s.params, nullptr);
    const auto r = forward(tape, vars, augment(tape, vars, x, tape.constant(bank.rows)).embeddings,
                           AttentionMaskSpec::causal());
    return M(tape.value(r.hidden).topRows(4));
  };
  auto moved = s.bank;
  moved.rows.array() += 0.5;
  EXPECT_TRUE(bitwise_equal(run_inputs(s.bank), run_inputs(moved)));
}

TEST(EosBaseline, LastStateAfterAppendedEos) {
  const auto c = tiny_config();
  const auto s = spread_state(c, 1, 9);
  Tape<double> tape(GradMode::inference);
  const auto vars = bind(tape, s.params, nullptr);
  const auto r = forward(tape, vars, embed_tokens(tape, vars, TokenSequence{4, 1}), AttentionMaskSpec::causal());
  const auto e = embed_eos_baseline(s.params, TokenSequence{4}, 1);
  EXPECT_TRUE(e.values == M(tape.value(r.hidden)).row(1));
  EXPECT_EQ(e.produced_by, PoolingKind::eos_last);
  EXPECT_EQ(e.positions_processed, 2);
  EXPECT_TRUE(embed_eos_baseline(s.params, TokenSequence{4}, 1).values == e.values);
  EXPECT_GT(max_abs(e.values, embed(s.params, s.bank, TokenSequence{4}).values), 1e-6);
  EXPECT_EQ(embed_eos_baseline(s.params, TokenSequence{}, 1).positions_processed, 1);
}

TEST(Embed, FloatPathTracksDouble) {
  const auto c = tiny_config();
  const auto s = spread_state(c, 2, 10);
  ModelState<float> f;
  f.params = init_parameters<float>(c, 0);
  auto src = flatten(s);
  std::size_t i = 0;
  f.params.for_each([&](const std::string&, Matrix<float>& m) { m = src[i++].cast<float>(); });
  f.bank.rows = s.bank.rows.cast<float>();
  const TokenSequence x{1, 2, 3};
  EXPECT_LT(max_abs(embed(f.params, f.bank, x).values, embed(s.params, s.bank, x).values), 1e-4);
}

}  // namespace
}  // namespace btok
