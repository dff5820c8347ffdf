#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "relpos/error.hpp"
#include "relpos/rng.hpp"

namespace relpos {

constexpr std::int32_t kPadId = 0;
constexpr std::int32_t kUnkId = 1;
constexpr std::int32_t kMaskId = 2;
constexpr int kNumSpecials = 3;

inline const char* kSpecialNames[kNumSpecials] = {"<pad>", "<unk>", "<mask>"};

// Token-string <-> id map with reserved specials at fixed indices 0..2.
// Non-special ids are assigned by descending corpus frequency, ties broken
// by byte order of the token string.
class Vocab {
  public:
    Vocab() = default;

    // tokens/counts exclude specials and must already be in id order.
    Vocab(std::vector<std::string> tokens, std::vector<std::int64_t> counts)
        : tokens_(std::move(tokens)), counts_(std::move(counts)) {
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            id_of_[tokens_[i]] = static_cast<std::int32_t>(i) + kNumSpecials;
        }
    }

    std::int32_t size() const { return static_cast<std::int32_t>(tokens_.size()) + kNumSpecials; }

    std::int32_t id_of(const std::string& token) const {
        auto it = id_of_.find(token);
        return it == id_of_.end() ? kUnkId : it->second;
    }

    const std::string& token_of(std::int32_t id) const {
        if (id < 0 || id >= size()) throw IndexError("Vocab: id " + std::to_string(id) + " out of range");
        if (id < kNumSpecials) {
            static const std::string specials[kNumSpecials] = {kSpecialNames[0], kSpecialNames[1],
                                                               kSpecialNames[2]};
            return specials[id];
        }
        return tokens_[static_cast<std::size_t>(id - kNumSpecials)];
    }

    std::int64_t count_of(std::int32_t id) const {
        if (id < kNumSpecials || id >= size()) return 0;
        return counts_[static_cast<std::size_t>(id - kNumSpecials)];
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["version"] = 1;
        j["specials"] = {kSpecialNames[0], kSpecialNames[1], kSpecialNames[2]};
        j["tokens"] = tokens_;
        j["counts"] = counts_;
        return j;
    }

    static Vocab from_json(const nlohmann::json& j) {
        if (!j.contains("tokens") || !j.contains("counts")) {
            throw IntegrityError("vocab json missing tokens/counts");
        }
        return Vocab(j["tokens"].get<std::vector<std::string>>(),
                     j["counts"].get<std::vector<std::int64_t>>());
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write vocab file " + path);
        out << to_json().dump(2) << '\n';
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read vocab file " + path);
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

  private:
    std::vector<std::string> tokens_;
    std::vector<std::int64_t> counts_;
    std::unordered_map<std::string, std::int32_t> id_of_;
};

inline std::vector<std::string> whitespace_tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (const char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

namespace detail {

inline void count_tokens(std::istream& in, std::unordered_map<std::string, std::int64_t>& freq,
                         std::int64_t& total) {
    std::string line;
    while (std::getline(in, line)) {
        for (auto& tok : whitespace_tokenize(line)) {
            ++freq[tok];
            ++total;
        }
    }
}

inline Vocab vocab_from_counts(std::unordered_map<std::string, std::int64_t>&& freq,
                               std::int64_t total, std::int32_t max_size, std::int64_t min_freq) {
    if (total == 0) throw ConfigError("build_vocab: empty corpus");
    std::vector<std::pair<std::string, std::int64_t>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> tokens;
    std::vector<std::int64_t> counts;
    for (auto& [tok, cnt] : items) {
        if (cnt < min_freq) break;
        if (static_cast<std::int32_t>(tokens.size()) >= max_size - kNumSpecials) break;
        tokens.push_back(std::move(tok));
        counts.push_back(cnt);
    }
    return Vocab(std::move(tokens), std::move(counts));
}

}  // namespace detail

// Frequency counting over UTF-8 text files, one document per line.
inline Vocab build_vocab(const std::vector<std::string>& corpus_paths, std::int32_t max_size,
                         std::int64_t min_freq = 1) {
    if (max_size <= kNumSpecials) throw ConfigError("build_vocab: max_size must exceed the 3 specials");
    std::unordered_map<std::string, std::int64_t> freq;
    std::int64_t total = 0;
    for (const auto& path : corpus_paths) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read corpus file " + path);
        detail::count_tokens(in, freq, total);
    }
    return detail::vocab_from_counts(std::move(freq), total, max_size, min_freq);
}

// Same counting rule applied to an in-memory text.
inline Vocab build_vocab_from_text(const std::string& text, std::int32_t max_size,
                                   std::int64_t min_freq = 1) {
    if (max_size <= kNumSpecials) throw ConfigError("build_vocab: max_size must exceed the 3 specials");
    std::unordered_map<std::string, std::int64_t> freq;
    std::int64_t total = 0;
    std::istringstream in(text);
    detail::count_tokens(in, freq, total);
    return detail::vocab_from_counts(std::move(freq), total, max_size, min_freq);
}

inline std::vector<std::int32_t> encode(const std::string& text, const Vocab& vocab) {
    std::vector<std::int32_t> ids;
    for (const auto& tok : whitespace_tokenize(text)) ids.push_back(vocab.id_of(tok));
    return ids;
}

inline std::string decode(const std::vector<std::int32_t>& ids, const Vocab& vocab) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out.push_back(' ');
        out += vocab.token_of(ids[i]);
    }
    return out;
}

// Fixed-length contexts for pretraining: no padding, ragged tail dropped.
struct SequenceBatch {
    int batch_size = 0;
    int seq_len = 0;
    std::vector<std::int32_t> token_ids;  // row-major [batch_size x seq_len]

    std::int32_t at(int row, int slot) const {
        return token_ids[static_cast<std::size_t>(row) * static_cast<std::size_t>(seq_len) +
                         static_cast<std::size_t>(slot)];
    }
};

// Consecutive non-overlapping chunks of exactly seq_len tokens.
inline std::vector<std::vector<std::int32_t>> pack_sequences(
    const std::vector<std::int32_t>& token_stream, int seq_len) {
    if (seq_len < 2) throw ConfigError("pack_sequences: seq_len must be >= 2");
    std::vector<std::vector<std::int32_t>> out;
    const auto n = static_cast<std::int64_t>(token_stream.size());
    for (std::int64_t start = 0; start + seq_len <= n; start += seq_len) {
        out.emplace_back(token_stream.begin() + start, token_stream.begin() + start + seq_len);
    }
    return out;
}

// Epoch-reshuffled sampling without replacement, a pure function of
// (seed, step). Steps are 1-based. Each epoch covers floor(pool/batch)
// batches; with batch_size dividing the pool, one epoch visits every
// sequence exactly once.
inline std::vector<std::int64_t> batch_indices(std::int64_t pool_size, int batch_size,
                                               std::uint64_t seed, std::int64_t step) {
    if (pool_size < batch_size) {
        throw ConfigError("batching: pool of " + std::to_string(pool_size) +
                          " sequences is smaller than batch size " + std::to_string(batch_size));
    }
    if (step < 1) throw ContractError("batching: steps are 1-based");
    const std::int64_t per_epoch = pool_size / batch_size;
    const std::int64_t epoch = (step - 1) / per_epoch;
    const std::int64_t slot = (step - 1) % per_epoch;
    Rng rng(derive_seed(seed, "epoch-shuffle", static_cast<std::uint64_t>(epoch)));
    std::vector<std::int64_t> order(static_cast<std::size_t>(pool_size));
    for (std::int64_t i = 0; i < pool_size; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order.begin(), order.end());
    return {order.begin() + slot * batch_size, order.begin() + (slot + 1) * batch_size};
}

inline SequenceBatch next_batch(const std::vector<std::vector<std::int32_t>>& sequences,
                                int batch_size, std::uint64_t seed, std::int64_t step) {
    const auto rows = batch_indices(static_cast<std::int64_t>(sequences.size()), batch_size, seed, step);
    SequenceBatch b;
    b.batch_size = batch_size;
    b.seq_len = static_cast<int>(sequences.front().size());
    b.token_ids.reserve(static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(b.seq_len));
    for (const auto r : rows) {
        const auto& seq = sequences[static_cast<std::size_t>(r)];
        b.token_ids.insert(b.token_ids.end(), seq.begin(), seq.end());
    }
    return b;
}

struct SyntheticConfig {
    std::int32_t vocab_size = 253;    // circular alphabet size, before the 3 specials
    std::int64_t num_tokens = 320000;
    std::uint64_t seed = 1;
    int min_run = 16;
    int max_run = 48;
    double noise = 0.05;
};

// Token stream with positional regularities: contiguous runs through a
// circular alphabet (word i is followed by word i+1 mod N), with occasional
// uniform-noise replacements. One run per output line. The in-run token ids
// determine relative positions, which makes order recoverable from content.
inline std::string synth_corpus_text(const SyntheticConfig& cfg) {
    if (cfg.vocab_size < 2) throw ConfigError("synthetic corpus: vocab_size must be >= 2");
    if (cfg.num_tokens < 1) throw ConfigError("synthetic corpus: num_tokens must be >= 1");
    if (cfg.min_run < 1 || cfg.max_run < cfg.min_run) throw ConfigError("synthetic corpus: bad run bounds");
    int width = 1;
    for (std::int32_t v = cfg.vocab_size - 1; v >= 10; v /= 10) ++width;
    Rng rng(derive_seed(cfg.seed, "synthetic-corpus"));
    std::ostringstream out;
    std::int64_t emitted = 0;
    while (emitted < cfg.num_tokens) {
        const int run = cfg.min_run + static_cast<int>(rng.next_below(cfg.max_run - cfg.min_run + 1));
        const auto start = static_cast<std::int32_t>(rng.next_below(cfg.vocab_size));
        for (int t = 0; t < run && emitted < cfg.num_tokens; ++t, ++emitted) {
            std::int32_t id = (start + t) % cfg.vocab_size;
            if (rng.next_real() < cfg.noise) id = static_cast<std::int32_t>(rng.next_below(cfg.vocab_size));
            if (t) out << ' ';
            out << 'w';
            const std::string digits = std::to_string(id);
            for (int pad = width - static_cast<int>(digits.size()); pad > 0; --pad) out << '0';
            out << digits;
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace relpos
