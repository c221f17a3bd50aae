// Word-level vocabulary with fixed reserved ids.
#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtdnn/common.hpp"

namespace mtdnn {

namespace tok {
constexpr int kPad = 0;
constexpr int kUnk = 1;
constexpr int kCls = 2;
constexpr int kSep = 3;
constexpr int kMask = 4;
constexpr int kReserved = 5;
}  // namespace tok

inline std::vector<std::string> whitespace_tokenize(const std::string& text, bool lowercase = true) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(lowercase ? char(std::tolower(static_cast<unsigned char>(ch))) : ch);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

class Vocabulary {
  public:
    Vocabulary() = default;

    // Tokens ordered by (frequency desc, then lexicographic); reserved ids
    // occupy [0,5).
    static Vocabulary build(const std::vector<std::string>& corpus_lines, int min_count) {
        MTDNN_CHECK(!corpus_lines.empty(), DataError, "build_vocab: corpus is empty");
        std::map<std::string, int64_t> counts;
        for (const auto& line : corpus_lines)
            for (const auto& t : whitespace_tokenize(line)) ++counts[t];
        std::vector<std::pair<std::string, int64_t>> kept;
        for (const auto& [t, c] : counts)
            if (c >= min_count) kept.emplace_back(t, c);
        std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocabulary v;
        for (auto& [t, c] : kept) v.add_token(t);
        return v;
    }

    static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
        Vocabulary v;
        for (const auto& t : tokens) v.add_token(t);
        return v;
    }

    int id(const std::string& token) const {
        auto it = map_.find(token);
        return it == map_.end() ? tok::kUnk : it->second;
    }

    bool contains(const std::string& token) const { return map_.count(token) > 0; }

    const std::string& token(int id) const {
        static const std::string kReservedNames[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
        MTDNN_CHECK(id >= 0 && id < size(), IndexError,
                    "vocab: id " << id << " out of range [0," << size() << ")");
        if (id < tok::kReserved) return kReservedNames[id];
        return tokens_[size_t(id - tok::kReserved)];
    }

    int size() const { return int(tokens_.size()) + tok::kReserved; }
    const std::vector<std::string>& word_tokens() const { return tokens_; }

    // One token per line; line number = id - 5 (reserved ids implicit).
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        MTDNN_CHECK(out.good(), DataError, "vocab: cannot write " << path);
        for (const auto& t : tokens_) out << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        MTDNN_CHECK(in.good(), DataError, "vocab: cannot read " << path);
        Vocabulary v;
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
            if (!line.empty()) v.add_token(line);
        }
        return v;
    }

  private:
    void add_token(const std::string& t) {
        MTDNN_CHECK(map_.emplace(t, size()).second, DataError, "vocab: duplicate token '" << t << "'");
        tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;  // id = index + kReserved
    std::unordered_map<std::string, int> map_;
};

}  // namespace mtdnn
