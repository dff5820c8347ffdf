#include "relpos/corpus.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <set>

using namespace relpos;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    const std::string path = std::string(::testing::TempDir()) + name;
    std::ofstream out(path, std::ios::binary);
    out << content;
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Vocab, CountingOracleOrdersByFrequencyThenBytes) {
    auto v = build_vocab_from_text("a a b", 100, 1);
    EXPECT_EQ(v.size(), 5);
    EXPECT_EQ(v.id_of("a"), 3);
    EXPECT_EQ(v.id_of("b"), 4);
    EXPECT_EQ(v.token_of(0), "<pad>");
    EXPECT_EQ(v.token_of(1), "<unk>");
    EXPECT_EQ(v.token_of(2), "<mask>");
    EXPECT_EQ(v.count_of(3), 2);
    EXPECT_EQ(v.count_of(4), 1);
}

TEST(Vocab, MaxSizeKeepsMostFrequent) {
    auto v = build_vocab_from_text("a a b", 4, 1);
    EXPECT_EQ(v.size(), 4);
    EXPECT_EQ(v.id_of("a"), 3);
    EXPECT_EQ(v.id_of("b"), kUnkId);
}

TEST(Vocab, TieBreaksLexicographically) {
    auto v = build_vocab_from_text("z q m z q m", 100, 1);
    EXPECT_EQ(v.id_of("m"), 3);
    EXPECT_EQ(v.id_of("q"), 4);
    EXPECT_EQ(v.id_of("z"), 5);
}

TEST(Vocab, EmptyCorpusIsAnError) {
    EXPECT_THROW(build_vocab_from_text("", 100, 1), ConfigError);
    EXPECT_THROW(build_vocab_from_text("  \n\n  ", 100, 1), ConfigError);
}

TEST(Vocab, UnreadableFileIsAnIoError) {
    EXPECT_THROW(build_vocab({"/nonexistent/corpus.txt"}, 100, 1), IoError);
}

TEST(Vocab, MinFreqFilters) {
    auto v = build_vocab_from_text("a a a b b c", 100, 2);
    EXPECT_EQ(v.size(), 5);
    EXPECT_EQ(v.id_of("c"), kUnkId);
}

TEST(Vocab, FileAndTextBuildersAgree) {
    const std::string text = "the cat sat\nthe mat\n";
    const auto path = write_temp("corpus_agree.txt", text);
    auto v1 = build_vocab({path}, 100, 1);
    auto v2 = build_vocab_from_text(text, 100, 1);
    EXPECT_EQ(v1.to_json(), v2.to_json());
    std::remove(path.c_str());
}

TEST(Vocab, SaveIsByteIdenticalAcrossPasses) {
    const std::string text = "b a a c c c\nd d b\n";
    auto p1 = std::string(::testing::TempDir()) + "vocab1.json";
    auto p2 = std::string(::testing::TempDir()) + "vocab2.json";
    build_vocab_from_text(text, 100, 1).save(p1);
    build_vocab_from_text(text, 100, 1).save(p2);
    const auto b1 = slurp(p1);
    EXPECT_FALSE(b1.empty());
    EXPECT_EQ(b1, slurp(p2));
    auto loaded = Vocab::load(p1);
    EXPECT_EQ(loaded.id_of("c"), 3);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST(Encode, LookupAndUnk) {
    auto v = build_vocab_from_text("a a b", 100, 1);
    EXPECT_EQ(encode("a b", v), (std::vector<std::int32_t>{3, 4}));
    EXPECT_EQ(encode("z", v), (std::vector<std::int32_t>{kUnkId}));
    EXPECT_EQ(encode("A  B", v), (std::vector<std::int32_t>{3, 4}));  // lowercased
}

TEST(Encode, RoundtripForInVocabText) {
    auto v = build_vocab_from_text("the cat sat on the mat", 100, 1);
    const std::string text = "the cat sat on the mat";
    EXPECT_EQ(decode(encode(text, v), v), text);
}

TEST(Pack, ArithmeticOracle) {
    std::vector<std::int32_t> stream(300);
    for (int i = 0; i < 300; ++i) stream[i] = i;
    auto seqs = pack_sequences(stream, 128);
    ASSERT_EQ(seqs.size(), 2u);  // 44 tokens dropped
    EXPECT_EQ(seqs[0][0], 0);
    EXPECT_EQ(seqs[1][0], 128);
    EXPECT_EQ(seqs[1][127], 255);
}

TEST(Pack, ExactAndShortStreams) {
    std::vector<std::int32_t> s128(128, 7);
    EXPECT_EQ(pack_sequences(s128, 128).size(), 1u);
    std::vector<std::int32_t> s127(127, 7);
    EXPECT_TRUE(pack_sequences(s127, 128).empty());
    EXPECT_THROW(pack_sequences(s128, 1), ConfigError);
}

TEST(Batch, DeterministicInSeedAndStep) {
    std::vector<std::vector<std::int32_t>> pool;
    for (int i = 0; i < 100; ++i) pool.push_back(std::vector<std::int32_t>(8, i));
    for (const std::int64_t step : {1, 2, 57}) {
        auto b1 = next_batch(pool, 10, 99, step);
        auto b2 = next_batch(pool, 10, 99, step);
        EXPECT_EQ(b1.token_ids, b2.token_ids);
    }
}

TEST(Batch, DifferentSeedsDiffer) {
    std::vector<std::vector<std::int32_t>> pool;
    for (int i = 0; i < 1000; ++i) pool.push_back(std::vector<std::int32_t>(8, i));
    auto b1 = next_batch(pool, 16, 1, 1);
    auto b2 = next_batch(pool, 16, 2, 1);
    EXPECT_NE(b1.token_ids, b2.token_ids);
}

TEST(Batch, PoolSmallerThanBatchIsAnError) {
    std::vector<std::vector<std::int32_t>> pool(5, std::vector<std::int32_t>(8, 0));
    EXPECT_THROW(next_batch(pool, 6, 1, 1), ConfigError);
}

TEST(Batch, OneEpochCoversPoolExactlyOnce) {
    const int pool_size = 96, bs = 16;
    std::vector<std::vector<std::int32_t>> pool;
    for (int i = 0; i < pool_size; ++i) pool.push_back(std::vector<std::int32_t>(4, i));
    for (int epoch = 0; epoch < 2; ++epoch) {
        std::multiset<std::int32_t> seen;
        for (int slot = 0; slot < pool_size / bs; ++slot) {
            const std::int64_t step = epoch * (pool_size / bs) + slot + 1;
            auto b = next_batch(pool, bs, 7, step);
            for (int r = 0; r < bs; ++r) seen.insert(b.at(r, 0));
        }
        ASSERT_EQ(seen.size(), static_cast<std::size_t>(pool_size));
        for (int i = 0; i < pool_size; ++i) EXPECT_EQ(seen.count(i), 1u) << "sequence " << i;
    }
}

TEST(Batch, NoPadTokensInPretrainingBatches) {
    // packed sequences never contain PAD because packing drops the tail
    SyntheticConfig cfg;
    cfg.vocab_size = 40;
    cfg.num_tokens = 4000;
    auto vocab = build_vocab_from_text(synth_corpus_text(cfg), 64, 1);
    auto ids = encode(synth_corpus_text(cfg), vocab);
    auto seqs = pack_sequences(ids, 16);
    auto b = next_batch(seqs, 8, 3, 5);
    for (const auto id : b.token_ids) {
        EXPECT_NE(id, kPadId);
        EXPECT_LT(id, vocab.size());
        EXPECT_GE(id, 0);
    }
}

TEST(Synthetic, DeterministicAndDecodable) {
    SyntheticConfig cfg;
    cfg.vocab_size = 50;
    cfg.num_tokens = 2000;
    cfg.seed = 11;
    const auto text1 = synth_corpus_text(cfg);
    const auto text2 = synth_corpus_text(cfg);
    EXPECT_EQ(text1, text2);
    auto vocab = build_vocab_from_text(text1, 64, 1);
    auto ids = encode(text1, vocab);
    EXPECT_EQ(static_cast<std::int64_t>(ids.size()), cfg.num_tokens);
    for (const auto id : ids) EXPECT_GE(id, kNumSpecials);  // every token in-vocab
}

TEST(Synthetic, RunsFollowCircularOrder) {
    SyntheticConfig cfg;
    cfg.vocab_size = 100;
    cfg.num_tokens = 5000;
    cfg.noise = 0.0;
    const auto text = synth_corpus_text(cfg);
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto toks = whitespace_tokenize(line);
        for (std::size_t i = 1; i < toks.size(); ++i) {
            const int prev = std::stoi(toks[i - 1].substr(1));
            const int cur = std::stoi(toks[i].substr(1));
            EXPECT_EQ(cur, (prev + 1) % cfg.vocab_size);
        }
    }
}
