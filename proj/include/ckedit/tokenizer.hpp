// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ckedit {

// Whitespace tokenizer over a fixed vocabulary. The vocabulary file is UTF-8,
// one token per line, line number = token id. "<unk>" and "<eot>" must be
// present.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> tokens);

    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    int size() const { return static_cast<int>(tokens_.size()); }
    int unk_id() const { return unk_id_; }
    int eot_id() const { return eot_id_; }

    // Unknown words map to <unk>.
    std::vector<int> encode(const std::string& text) const;
    std::string decode(std::span<const int> ids) const;

    int id_of(const std::string& token) const;  // -1 when absent
    const std::string& token(int id) const { return tokens_[static_cast<size_t>(id)]; }
    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int unk_id_ = -1;
    int eot_id_ = -1;
};

std::vector<std::string> split_whitespace(const std::string& text);

}  // namespace ckedit
