#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relpos/error.hpp"
#include "relpos/rng.hpp"
#include "relpos/tensor.hpp"

namespace relpos {

enum class Objective { mlm, pmlm, pplm, pplm_some, pplm_binary };

inline const char* objective_name(Objective o) {
    switch (o) {
        case Objective::mlm: return "mlm";
        case Objective::pmlm: return "pmlm";
        case Objective::pplm: return "pplm";
        case Objective::pplm_some: return "pplm-some";
        case Objective::pplm_binary: return "pplm-binary";
    }
    return "?";
}

inline Objective objective_from_name(const std::string& name) {
    for (const auto o : {Objective::mlm, Objective::pmlm, Objective::pplm, Objective::pplm_some,
                         Objective::pplm_binary}) {
        if (name == objective_name(o)) return o;
    }
    throw ConfigError("unknown objective '" + name + "'");
}

inline bool is_position_objective(Objective o) { return o != Objective::mlm; }

enum class CorruptionMode { none, mask, permute };

// floor(rate * k), guarded against representation error in rate * k
// (e.g. 0.7 * 10 evaluating just below 7).
inline int corrupted_slot_count(double rate, int k) {
    return static_cast<int>(rate * k + 1e-9);
}

inline CorruptionMode corruption_mode_for(Objective o) {
    switch (o) {
        case Objective::mlm: return CorruptionMode::none;
        case Objective::pmlm: return CorruptionMode::mask;
        default: return CorruptionMode::permute;
    }
}

// Per-sequence record of which position slots are corrupted and how.
// `pi` maps slot -> presented position: slot t carries the position signal
// of original slot pi[t]. pi is the identity off the selected set and a
// bijection of the selected set onto itself.
struct CorruptionPlan {
    CorruptionMode mode = CorruptionMode::none;
    double rate = 0.0;
    int seq_len = 0;
    std::vector<int> selected;  // sorted, |selected| = floor(rate * seq_len)
    std::vector<int> pi;        // size seq_len

    bool is_selected(int t) const {
        return std::binary_search(selected.begin(), selected.end(), t);
    }
};

inline CorruptionPlan sample_corruption(int k, double rate, CorruptionMode mode, Rng& rng) {
    if (k < 1) throw ConfigError("sample_corruption: seq_len must be >= 1");
    if (rate < 0.0 || rate > 1.0) throw ConfigError("sample_corruption: rate must be in [0, 1]");
    CorruptionPlan plan;
    plan.mode = mode;
    plan.rate = rate;
    plan.seq_len = k;
    plan.pi.resize(static_cast<std::size_t>(k));
    for (int t = 0; t < k; ++t) plan.pi[static_cast<std::size_t>(t)] = t;
    if (mode == CorruptionMode::none) return plan;
    const int s = static_cast<int>(rate * k);
    plan.selected = rng.sample_indices(k, s);
    if (mode == CorruptionMode::permute && s > 1) {
        // uniform permutation of the selected slots, fixed points permitted
        std::vector<int> shuffled = plan.selected;
        rng.shuffle(shuffled.begin(), shuffled.end());
        for (int a = 0; a < s; ++a) {
            plan.pi[static_cast<std::size_t>(plan.selected[static_cast<std::size_t>(a)])] =
                shuffled[static_cast<std::size_t>(a)];
        }
    }
    return plan;
}

// Fully determined by (mode, rate, k, seed).
inline CorruptionPlan sample_corruption(int k, double rate, CorruptionMode mode,
                                        std::uint64_t seed) {
    Rng rng(derive_seed(seed, "corruption"));
    return sample_corruption(k, rate, mode, rng);
}

// Ground-truth signed relative positions in the original order, plus the
// per-pair correctness bit for the presented (possibly permuted) order.
struct RelPosLabels {
    int k = 0;
    int max_positions = 0;  // L; class count n_p = 2L - 1

    int offset(int i, int j) const { return j - i; }
    int num_classes() const { return 2 * max_positions - 1; }
    // signed offset -> class index in [0, n_p)
    int class_index(int i, int j) const { return offset(i, j) + max_positions - 1; }

    std::vector<std::uint8_t> binary_correct;  // [k*k], 1 iff presented offset matches

    bool binary(int i, int j) const {
        return binary_correct[static_cast<std::size_t>(i) * static_cast<std::size_t>(k) +
                              static_cast<std::size_t>(j)] != 0;
    }
};

inline RelPosLabels rel_pos_labels(int k, int max_positions, const CorruptionPlan& plan) {
    if (k > max_positions) {
        throw ConfigError("rel_pos_labels: seq_len " + std::to_string(k) +
                          " exceeds max_positions " + std::to_string(max_positions));
    }
    if (plan.seq_len != k) throw ContractError("rel_pos_labels: plan/seq_len mismatch");
    RelPosLabels labels;
    labels.k = k;
    labels.max_positions = max_positions;
    labels.binary_correct.assign(static_cast<std::size_t>(k) * static_cast<std::size_t>(k), 0);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            const bool ok = plan.pi[static_cast<std::size_t>(i)] - plan.pi[static_cast<std::size_t>(j)] ==
                            i - j;
            labels.binary_correct[static_cast<std::size_t>(i) * static_cast<std::size_t>(k) +
                                  static_cast<std::size_t>(j)] = ok ? 1 : 0;
        }
    }
    return labels;
}

struct SeqPair {
    int i = 0;
    int j = 0;
};

// Ordered pairs whose relative position the variant predicts, diagonal
// included wherever the rule admits it:
//   pplm, pplm-binary: all k^2 pairs
//   pplm-some:         pairs with both endpoints permuted
//   pmlm:              pairs with at least one masked endpoint
inline std::vector<SeqPair> select_pairs(const CorruptionPlan& plan, Objective variant) {
    if (!is_position_objective(variant)) {
        throw ContractError("select_pairs: mlm has token targets, not pair targets");
    }
    if (plan.mode != corruption_mode_for(variant)) {
        throw ContractError(std::string("select_pairs: plan mode inconsistent with ") +
                            objective_name(variant));
    }
    const int k = plan.seq_len;
    std::vector<SeqPair> pairs;
    switch (variant) {
        case Objective::pplm:
        case Objective::pplm_binary:
            pairs.reserve(static_cast<std::size_t>(k) * static_cast<std::size_t>(k));
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) pairs.push_back({i, j});
            break;
        case Objective::pplm_some:
            pairs.reserve(plan.selected.size() * plan.selected.size());
            for (const int i : plan.selected)
                for (const int j : plan.selected) pairs.push_back({i, j});
            break;
        case Objective::pmlm: {
            std::vector<char> sel(static_cast<std::size_t>(k), 0);
            for (const int t : plan.selected) sel[static_cast<std::size_t>(t)] = 1;
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j)
                    if (sel[static_cast<std::size_t>(i)] || sel[static_cast<std::size_t>(j)])
                        pairs.push_back({i, j});
            break;
        }
        default: break;
    }
    return pairs;
}

// Class targets for a variant's pair list.
inline std::vector<std::int64_t> pair_targets(const RelPosLabels& labels,
                                              const std::vector<SeqPair>& pairs,
                                              Objective variant) {
    std::vector<std::int64_t> targets;
    targets.reserve(pairs.size());
    if (variant == Objective::pplm_binary) {
        for (const auto& p : pairs) targets.push_back(labels.binary(p.i, p.j) ? 1 : 0);
    } else {
        for (const auto& p : pairs) targets.push_back(labels.class_index(p.i, p.j));
    }
    return targets;
}

struct ReadoutConfig {
    enum class Kind { affine, mlp };
    Kind kind = Kind::affine;
    int hidden = 64;  // mlp only

    static ReadoutConfig from_name(const std::string& name) {
        ReadoutConfig cfg;
        if (name == "affine") {
            cfg.kind = Kind::affine;
        } else if (name == "mlp") {
            cfg.kind = Kind::mlp;
        } else {
            throw ConfigError("unknown readout '" + name + "' (expected affine or mlp)");
        }
        return cfg;
    }
    const char* name() const { return kind == Kind::affine ? "affine" : "mlp"; }
};

// The map from a pair's per-head score vector to relative-position logits:
// a single affine layer by default, optionally one GELU hidden layer.
template <typename T>
class ReadoutHead {
  public:
    ReadoutHead() = default;

    static ReadoutHead init(int in_dim, int out_dim, ReadoutConfig cfg, Rng& rng) {
        ReadoutHead head;
        head.cfg_ = cfg;
        head.in_dim_ = in_dim;
        head.out_dim_ = out_dim;
        const T std = T(0.02);
        if (cfg.kind == ReadoutConfig::Kind::affine) {
            head.w1_ = Tensor<T>::randn({in_dim, out_dim}, rng, std).set_requires_grad();
            head.b1_ = Tensor<T>::zeros({out_dim}).set_requires_grad();
        } else {
            head.w1_ = Tensor<T>::randn({in_dim, cfg.hidden}, rng, std).set_requires_grad();
            head.b1_ = Tensor<T>::zeros({cfg.hidden}).set_requires_grad();
            head.w2_ = Tensor<T>::randn({cfg.hidden, out_dim}, rng, std).set_requires_grad();
            head.b2_ = Tensor<T>::zeros({out_dim}).set_requires_grad();
        }
        return head;
    }

    int out_dim() const { return out_dim_; }
    int in_dim() const { return in_dim_; }
    const ReadoutConfig& config() const { return cfg_; }

    // feats: [num_pairs, in_dim] -> logits [num_pairs, out_dim]
    Tensor<T> apply(const Tensor<T>& feats) const {
        if (feats.dim(-1) != in_dim_) {
            throw ShapeError("readout: feature dim " + std::to_string(feats.dim(-1)) +
                             " does not match head input " + std::to_string(in_dim_));
        }
        auto h = add_bias(matmul(feats, w1_), b1_);
        if (cfg_.kind == ReadoutConfig::Kind::affine) return h;
        return add_bias(matmul(gelu(h), w2_), b2_);
    }

    std::vector<std::pair<std::string, Tensor<T>>> parameters() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("readout.w1", w1_);
        out.emplace_back("readout.b1", b1_);
        if (cfg_.kind == ReadoutConfig::Kind::mlp) {
            out.emplace_back("readout.w2", w2_);
            out.emplace_back("readout.b2", b2_);
        }
        return out;
    }

  private:
    ReadoutConfig cfg_;
    int in_dim_ = 0;
    int out_dim_ = 0;
    Tensor<T> w1_, b1_, w2_, b2_;
};

// Logits for each selected pair of one sequence from its head-score tensor
// [k, k, n_h]; softmax of a row realizes the distribution over relative
// positions.
template <typename T>
Tensor<T> relpos_logits(const Tensor<T>& head_scores, const ReadoutHead<T>& readout,
                        const std::vector<SeqPair>& pairs) {
    if (head_scores.rank() != 3 || head_scores.dim(0) != head_scores.dim(1)) {
        throw ShapeError("relpos_logits: expected [k, k, n_h] head scores, got " +
                         shape_str(head_scores.shape()));
    }
    const std::int64_t k = head_scores.dim(0);
    const std::int64_t n_h = head_scores.dim(2);
    std::vector<std::int64_t> flat;
    flat.reserve(pairs.size());
    for (const auto& p : pairs) flat.push_back(p.i * k + p.j);
    auto feats = gather_rows(reshape(head_scores, {k * k, n_h}), flat,
                             {static_cast<std::int64_t>(pairs.size())});
    return readout.apply(feats);
}

// Mean cross-entropy over the selected pairs. Raised (not zero) on an empty
// pair set so the trainer can skip the batch.
struct SkipBatch : Error {
    SkipBatch() : Error("empty pair set; skip batch") {}
};

template <typename T>
Tensor<T> variant_loss(const Tensor<T>& logits, const RelPosLabels& labels,
                       const std::vector<SeqPair>& pairs, Objective variant) {
    if (pairs.empty()) throw SkipBatch();
    const int want = variant == Objective::pplm_binary ? 2 : labels.num_classes();
    if (logits.dim(-1) != want) {
        throw ShapeError("variant_loss: logits have " + std::to_string(logits.dim(-1)) +
                         " classes, expected " + std::to_string(want));
    }
    return cross_entropy_mean(logits, pair_targets(labels, pairs, variant));
}

}  // namespace relpos
