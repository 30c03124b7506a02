// SPDX-License-Identifier: Apache-2.0

#include "ckedit/tokenizer.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ckedit {

std::vector<std::string> split_whitespace(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) words.push_back(w);
    return words;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
        auto [it, inserted] = index_.emplace(tokens_[static_cast<size_t>(i)], i);
        if (!inserted) {
            throw std::invalid_argument("Vocabulary: duplicate token '" + tokens_[static_cast<size_t>(i)] + "'");
        }
    }
    unk_id_ = id_of("<unk>");
    eot_id_ = id_of("<eot>");
    if (unk_id_ < 0 || eot_id_ < 0) {
        throw std::invalid_argument("Vocabulary: <unk> and <eot> are required");
    }
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("Vocabulary: cannot open " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("Vocabulary: cannot write " + path);
    for (const auto& t : tokens_) out << t << '\n';
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_whitespace(text)) {
        const int id = id_of(w);
        ids.push_back(id >= 0 ? id : unk_id_);
    }
    return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= size()) throw std::invalid_argument("decode: id out of range");
        if (i > 0) out += ' ';
        out += tokens_[static_cast<size_t>(ids[i])];
    }
    return out;
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? -1 : it->second;
}

}  // namespace ckedit
