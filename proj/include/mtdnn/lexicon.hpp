// Lexicon encoder: special-token framing of one or two sentences, and the
// summed word + positional + segment embedding.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtdnn/ops.hpp"
#include "mtdnn/vocab.hpp"

namespace mtdnn {

struct TokenSequence {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;     // 0 up to and including the first SEP, 1 after
    std::vector<int> attention_mask;  // 1 for real tokens, 0 for PAD

    int length() const { return int(token_ids.size()); }
    int real_length() const {
        int n = 0;
        for (int m : attention_mask) n += m;
        return n;
    }

    void pad_to(int target_len) {
        MTDNN_CHECK(target_len >= length(), ContractError,
                    "pad_to: target " << target_len << " below current length " << length());
        token_ids.resize(size_t(target_len), tok::kPad);
        segment_ids.resize(size_t(target_len), 0);
        attention_mask.resize(size_t(target_len), 0);
    }
};

// [CLS] x1 [SEP] for single inputs, [CLS] x1 [SEP] x2 [SEP] for pairs.
// Over-length inputs are truncated longest-first from the right (ties trim
// x1) until the framed length fits max_seq_len.
inline TokenSequence encode_pair(const std::string& x1, const std::optional<std::string>& x2,
                                 const Vocabulary& vocab, int max_seq_len) {
    std::vector<std::string> t1 = whitespace_tokenize(x1);
    MTDNN_CHECK(!t1.empty(), DataError, "encode_pair: first text is empty");
    std::vector<std::string> t2 = x2 ? whitespace_tokenize(*x2) : std::vector<std::string>{};
    const int framing = x2 ? 3 : 2;  // CLS + SEPs
    MTDNN_CHECK(max_seq_len >= framing + 1, ContractError,
                "encode_pair: max_seq_len " << max_seq_len << " leaves no room for tokens");
    while (int(t1.size() + t2.size()) + framing > max_seq_len) {
        if (t2.size() > t1.size())
            t2.pop_back();
        else
            t1.pop_back();
        MTDNN_CHECK(!t1.empty(), DataError,
                    "encode_pair: truncation to max_seq_len " << max_seq_len
                                                              << " consumed the first text");
    }
    TokenSequence seq;
    seq.token_ids.push_back(tok::kCls);
    seq.segment_ids.push_back(0);
    for (const auto& t : t1) {
        seq.token_ids.push_back(vocab.id(t));
        seq.segment_ids.push_back(0);
    }
    seq.token_ids.push_back(tok::kSep);
    seq.segment_ids.push_back(0);
    if (x2) {
        for (const auto& t : t2) {
            seq.token_ids.push_back(vocab.id(t));
            seq.segment_ids.push_back(1);
        }
        seq.token_ids.push_back(tok::kSep);
        seq.segment_ids.push_back(1);
    }
    seq.attention_mask.assign(seq.token_ids.size(), 1);
    return seq;
}

template <typename T>
struct EmbeddingTables {
    Param<T> word;      // [V x d]
    Param<T> position;  // [max_seq_len x d]
    Param<T> segment;   // [2 x d]

    EmbeddingTables() = default;
    EmbeddingTables(int vocab_size, int max_seq_len, int d)
        : word("lexicon.word", {vocab_size, d}),
          position("lexicon.position", {max_seq_len, d}),
          segment("lexicon.segment", {2, d}) {}

    void init(Rng& rng, double sigma) {
        word.fill_normal(rng, sigma);
        position.fill_normal(rng, sigma);
        segment.fill_normal(rng, sigma);
    }
};

// Bound (possibly tape-tracked) views of the three tables.
template <typename T>
struct BoundTables {
    Tensor<T> word, position, segment;
};

template <typename T>
BoundTables<T> bind_tables(EmbeddingTables<T>& tables, Tape<T>* tape) {
    if (tape)
        return {tape->leaf(tables.word), tape->leaf(tables.position), tape->leaf(tables.segment)};
    return {Tensor<T>::from(tables.word.shape, tables.word.value),
            Tensor<T>::from(tables.position.shape, tables.position.value),
            Tensor<T>::from(tables.segment.shape, tables.segment.value)};
}

// Row i = word[token_ids[i]] + position[i] + segment[segment_ids[i]].
template <typename T>
Tensor<T> embed_sequence(const TokenSequence& seq, const BoundTables<T>& tables) {
    const int m = seq.length();
    MTDNN_CHECK(m <= tables.position.shape[0], ContractError,
                "embed_sequence: length " << m << " exceeds max_seq_len "
                                          << tables.position.shape[0]);
    std::vector<int> positions(size_t(m));
    for (int i = 0; i < m; ++i) positions[size_t(i)] = i;
    auto w = gather_rows(tables.word, seq.token_ids);
    auto p = gather_rows(tables.position, positions);
    auto s = gather_rows(tables.segment, seq.segment_ids);
    return add(add(w, p), s);
}

}  // namespace mtdnn
