// SPDX-License-Identifier: Apache-2.0

#include "ckedit/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "ckedit/numerics.hpp"
#include "json.hpp"

namespace ckedit {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::string lower(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

bool mentions_person(const std::string& text) {
    const std::string t = lower(text);
    return t.find("personx") != std::string::npos || t.find("persony") != std::string::npos;
}

bool has_slots(const std::string& tmpl) {
    return tmpl.find("E1") != std::string::npos && tmpl.find("E2") != std::string::npos;
}

}  // namespace

const std::vector<RelationTemplate>& relation_registry() {
    static const std::vector<RelationTemplate> registry = {
        {"oWant", "as a result, personY want to", "as a result, others want to", 7775},
        {"xEffect", "as a result, PersonX will", "resulting in", 13862},
        {"xIntent", "because PersonX wanted", "which means", 8558},
        {"xNeed", "which means PersonX need", "", 13734},
        {"xWant", "as a result, PersonX wants", "", 7775},
        {"xReact", "which indicates that personX", "", 10689},
        {"oEffect", "resulting in personY", "resulting in others", 5181},
        {"oReact", "and personY's reaction is", "and others's reaction is", 4740},
        {"xAttr", "which means that PersonX", "which means that", 19441},
        {"AtLocation", "located in the", "", 234},
        {"ObjectUse", "are used to", "", 311},
        {"Desires", "desires", "", 271},
        {"HasProperty", "has the property of", "", 428},
        {"NotDesires", "have no desire to", "", 287},
        {"Causes", "causes", "", 322},
        {"HasSubEvent", "The sub event of E1 is to E2", "", 118},
        {"xReason", "The reason for E1 is E2", "", 290},
        {"CapableOf", "is/are capable of", "", 512},
        {"MadeUpOf", "made up of", "", 291},
        {"isAfter", "happens after", "", 465},
        {"isBefore", "happens before", "", 164},
        {"isFilledBy", "blank can be filled by", "", 174},
        {"HinderedBy", "can be hindered by", "", 612},
    };
    return registry;
}

bool is_registered_relation(const std::string& relation) {
    for (const auto& r : relation_registry()) {
        if (r.relation == relation) return true;
    }
    return false;
}

const RelationTemplate& relation_template(const std::string& relation) {
    for (const auto& r : relation_registry()) {
        if (r.relation == relation) return r;
    }
    throw std::invalid_argument("unregistered relation: " + relation);
}

std::vector<std::string> relation_match_phrases(const std::string& relation) {
    const RelationTemplate& r = relation_template(relation);
    if (has_slots(r.template_text)) {
        // Leading literal up to the E1 slot.
        const auto pos = r.template_text.find("E1");
        std::string lead = r.template_text.substr(0, pos);
        while (!lead.empty() && lead.back() == ' ') lead.pop_back();
        return {lead};
    }
    std::vector<std::string> phrases{r.template_text};
    if (!r.starred_text.empty()) phrases.push_back(r.starred_text);
    return phrases;
}

std::string rewrite_template(const std::string& relation, const std::string& event1,
                             const std::string& event2) {
    const RelationTemplate& r = relation_template(relation);
    if (has_slots(r.template_text)) {
        std::string out = r.template_text;
        out.replace(out.find("E1"), 2, event1);
        const auto e2 = out.find("E2");
        out = out.substr(0, e2);
        while (!out.empty() && out.back() == ' ') out.pop_back();
        return out;
    }
    const bool starred =
        !r.starred_text.empty() && !mentions_person(event1) && !mentions_person(event2);
    return event1 + ", " + (starred ? r.starred_text : r.template_text);
}

std::string normalize_text(const std::string& text) {
    std::string cleaned;
    cleaned.reserve(text.size());
    for (size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '&') continue;
        if (text[i] == '_' && i + 2 < text.size() && text[i + 1] == '_' && text[i + 2] == '_') {
            i += 2;
            continue;
        }
        cleaned += text[i];
    }
    std::istringstream in(cleaned);
    std::string w, out;
    while (in >> w) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

std::string validate_record(const CKRecord& record) {
    if (!is_registered_relation(record.relation)) {
        return "unknown relation '" + record.relation + "'";
    }
    if (record.target_new.empty()) return "empty target_new";
    const auto words = split_whitespace(record.prompt);
    if (record.subject_span_start < 0 || record.subject_span_end <= record.subject_span_start ||
        record.subject_span_end > static_cast<int>(words.size())) {
        return "subject span [" + std::to_string(record.subject_span_start) + ", " +
               std::to_string(record.subject_span_end) + ") invalid for a " +
               std::to_string(words.size()) + "-token prompt";
    }
    std::string span_text;
    for (int i = record.subject_span_start; i < record.subject_span_end; ++i) {
        if (!span_text.empty()) span_text += ' ';
        span_text += words[static_cast<size_t>(i)];
    }
    if (span_text != record.subject) {
        return "subject span detokenizes to '" + span_text + "', not '" + record.subject + "'";
    }
    bool phrase_found = false;
    for (const auto& phrase : relation_match_phrases(record.relation)) {
        if (record.prompt.find(phrase) != std::string::npos) {
            phrase_found = true;
            break;
        }
    }
    if (!phrase_found) return "prompt lacks the template phrase for relation " + record.relation;
    return "";
}

namespace {

CKRecord record_from_json(const json& j) {
    CKRecord r;
    r.case_id = j.at("case_id").get<int>();
    r.relation = j.at("relation").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    const auto& subj = j.at("subject");
    r.subject = subj.at("text").get<std::string>();
    r.subject_span_start = subj.at("span").at(0).get<int>();
    r.subject_span_end = subj.at("span").at(1).get<int>();
    r.target_new = j.at("target_new").get<std::string>();
    r.paraphrase_prompts = j.at("paraphrase_prompts").get<std::vector<std::string>>();
    r.neighborhood_prompts = j.at("neighborhood_prompts").get<std::vector<std::string>>();
    r.sub_neighborhood_prompts = j.at("sub_neighborhood_prompts").get<std::vector<std::string>>();
    return r;
}

ordered_json record_to_json(const CKRecord& r) {
    ordered_json j;
    j["case_id"] = r.case_id;
    j["relation"] = r.relation;
    j["prompt"] = r.prompt;
    j["subject"] = {{"text", r.subject}, {"span", {r.subject_span_start, r.subject_span_end}}};
    j["target_new"] = r.target_new;
    j["paraphrase_prompts"] = r.paraphrase_prompts;
    j["neighborhood_prompts"] = r.neighborhood_prompts;
    j["sub_neighborhood_prompts"] = r.sub_neighborhood_prompts;
    return j;
}

}  // namespace

std::vector<CKRecord> load_records(const std::string& path, bool normalize) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_records: cannot open " + path);
    std::vector<CKRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        line_no += 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw std::runtime_error("load_records: line " + std::to_string(line_no) +
                                     ": malformed JSON");
        }
        CKRecord r;
        try {
            r = record_from_json(j);
        } catch (const std::exception& e) {
            throw std::runtime_error("load_records: line " + std::to_string(line_no) + ": " +
                                     e.what());
        }
        if (normalize) {
            r.prompt = normalize_text(r.prompt);
            r.subject = normalize_text(r.subject);
            r.target_new = normalize_text(r.target_new);
            for (auto& p : r.paraphrase_prompts) p = normalize_text(p);
            for (auto& p : r.neighborhood_prompts) p = normalize_text(p);
            for (auto& p : r.sub_neighborhood_prompts) p = normalize_text(p);
        }
        const std::string err = validate_record(r);
        if (!err.empty()) {
            throw std::runtime_error("load_records: line " + std::to_string(line_no) + ": " + err);
        }
        records.push_back(std::move(r));
    }
    return records;
}

void save_records(const std::vector<CKRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_records: cannot write " + path);
    for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Toy corpus
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> words = {
        "apple",  "anchor", "basket", "beach",  "bridge", "candle", "canyon", "carpet",
        "castle", "cello",  "cherry", "circle", "cloud",  "coffee", "copper", "coral",
        "cotton", "cradle", "desert", "diamond", "dolphin", "donkey", "eagle",  "ember",
        "engine", "fabric", "falcon", "feather", "fiddle", "flame",  "forest", "fossil",
        "garden", "garlic", "ginger", "glacier", "goblet", "granite", "guitar", "hammer",
        "harbor", "hazel",  "helmet", "hollow", "honey",  "island", "ivory",  "jacket",
        "jungle", "kettle", "lagoon", "lantern", "lemon",  "lily",   "lobster", "lumber",
        "magnet", "mantle", "marble", "meadow", "mirror", "mosaic", "mountain", "nectar",
        "needle", "nickel", "oasis",  "onion",  "orchid", "otter",  "oyster", "paddle",
        "parrot", "pebble", "pepper", "piano",  "pillow", "pine",   "pirate", "pistol",
        "planet", "plaster", "pocket", "pony",  "poster", "pumpkin", "quartz", "rabbit",
        "raft",   "raven",  "ribbon", "river",  "rocket", "saddle", "salmon", "sandal",
        "sapphire", "scarf", "shadow", "shell", "silver", "sketch", "sledge", "spider",
        "spruce", "squirrel", "stable", "statue", "summit", "sunset", "tablet", "tailor",
        "temple", "thistle", "thunder", "ticket", "tiger", "timber", "toffee", "tractor",
        "trumpet", "tulip", "tunnel", "turtle", "valley", "velvet", "violin", "walnut",
        "walrus", "whistle", "willow", "window", "winter", "wizard", "yarn",  "zebra",
    };
    return words;
}

const std::vector<std::string>& name_pool() {
    static const std::vector<std::string> names = {
        "Alice",  "Bob",   "Carol", "David", "Erin",   "Frank", "Grace", "Henry",
        "Irene",  "Jack",  "Karen", "Louis", "Mona",   "Nathan", "Olive", "Peter",
        "Quinn",  "Rosa",  "Simon", "Tara",  "Ursula", "Victor", "Wendy", "Xavier",
        "Yvonne", "Zane",
    };
    return names;
}

const std::vector<std::string>& prefix_pool() {
    static const std::vector<std::string> prefixes = {
        "Clearly", "Indeed", "Actually", "Reportedly", "Apparently", "Notably",
    };
    return prefixes;
}

std::vector<std::string> template_tokens() {
    std::set<std::string> toks;
    for (const auto& r : relation_registry()) {
        for (const auto& w : split_whitespace(r.template_text)) {
            if (w != "E1" && w != "E2") toks.insert(w);
        }
        for (const auto& w : split_whitespace(r.starred_text)) toks.insert(w);
    }
    toks.insert("PersonX");
    toks.insert("PersonX,");
    return {toks.begin(), toks.end()};
}

int require_token(const Vocabulary& vocab, const std::string& tok) {
    const int id = vocab.id_of(tok);
    if (id < 0) {
        throw std::invalid_argument("generate_toy_corpus: vocabulary too small, missing '" + tok +
                                    "'");
    }
    return id;
}

std::vector<int> encode_strict(const Vocabulary& vocab, const std::string& text) {
    std::vector<int> ids;
    for (const auto& w : split_whitespace(text)) ids.push_back(require_token(vocab, w));
    return ids;
}

}  // namespace

std::vector<std::string> toy_vocabulary_tokens() {
    std::vector<std::string> tokens{"<unk>", "<eot>"};
    for (const auto& t : template_tokens()) tokens.push_back(t);
    for (const auto& n : name_pool()) tokens.push_back(n);
    for (const auto& p : prefix_pool()) tokens.push_back(p);
    for (const auto& w : filler_words()) {
        tokens.push_back(w);
        tokens.push_back(w + ",");
    }
    return tokens;
}

ToyCorpus generate_toy_corpus(uint64_t seed, int n_records, const Vocabulary& vocab) {
    if (n_records < 1) throw std::invalid_argument("generate_toy_corpus: n_records must be >= 1");
    const auto& fillers = filler_words();
    if (n_records > static_cast<int>(fillers.size())) {
        throw std::invalid_argument("generate_toy_corpus: vocabulary too small for that many records");
    }
    for (const auto& t : template_tokens()) require_token(vocab, t);

    Rng rng(derive_seed(seed, 0x746f79ull));
    const int eot = vocab.eot_id();
    const auto& registry = relation_registry();

    ToyCorpus corpus;
    std::set<std::vector<std::string>> used_targets;

    // The subject's final word is record-unique so edit keys and covariance
    // keys separate cleanly across cases; everything else draws from the rest
    // of the pool.
    if (n_records > static_cast<int>(fillers.size())) {
        throw std::invalid_argument("generate_toy_corpus: vocabulary too small for that many records");
    }
    auto draw_filler = [&]() {
        return fillers[static_cast<size_t>(
            rng.uniform_int(n_records, static_cast<int>(fillers.size()) - 1))];
    };
    auto draw_target = [&]() {
        // 3-6 tokens without repetition, distinct across all draws.
        for (;;) {
            const int len = rng.uniform_int(3, 6);
            std::vector<std::string> toks;
            while (static_cast<int>(toks.size()) < len) {
                const std::string w = draw_filler();
                if (std::find(toks.begin(), toks.end(), w) != toks.end()) continue;
                toks.push_back(w);
            }
            if (used_targets.insert(toks).second) {
                std::string text;
                for (const auto& t : toks) {
                    if (!text.empty()) text += ' ';
                    text += t;
                }
                return text;
            }
        }
    };

    for (int i = 0; i < n_records; ++i) {
        const RelationTemplate& rel = registry[static_cast<size_t>(i) % registry.size()];
        const std::string wa = draw_filler();
        const std::string wb = fillers[static_cast<size_t>(i)];
        const std::string event1 = "PersonX " + wa + " " + wb;

        CKRecord r;
        r.case_id = i + 1;
        r.relation = rel.relation;
        r.prompt = rewrite_template(rel.relation, event1, "PersonX placeholder");

        const auto prompt_words = split_whitespace(r.prompt);
        const auto subject_words = split_whitespace(event1);
        int start = -1;
        for (size_t s = 0; s + subject_words.size() <= prompt_words.size() && start < 0; ++s) {
            bool match = true;
            for (size_t k = 0; k < subject_words.size() && match; ++k) {
                const std::string& got = prompt_words[s + k];
                match = got == subject_words[k] || got == subject_words[k] + ",";
            }
            if (match) start = static_cast<int>(s);
        }
        if (start < 0) throw std::logic_error("generate_toy_corpus: subject not found in prompt");
        r.subject_span_start = start;
        r.subject_span_end = start + static_cast<int>(subject_words.size());
        std::string span_text;
        for (int k = r.subject_span_start; k < r.subject_span_end; ++k) {
            if (!span_text.empty()) span_text += ' ';
            span_text += prompt_words[static_cast<size_t>(k)];
        }
        r.subject = span_text;

        const std::string target_mem = draw_target();
        r.target_new = draw_target();

        for (int p = 0; p < 2; ++p) {
            const auto& pref =
                prefix_pool()[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(prefix_pool().size()) - 1))];
            r.paraphrase_prompts.push_back(pref + " " + r.prompt);
        }

        std::vector<std::string> neighbor_targets;
        for (int p = 0; p < 2; ++p) {
            const auto& other =
                registry[static_cast<size_t>((i + 1 + rng.uniform_int(0, static_cast<int>(registry.size()) - 2)) %
                                             registry.size())];
            r.neighborhood_prompts.push_back(rewrite_template(other.relation, event1, "PersonX placeholder"));
            neighbor_targets.push_back(draw_target());
        }

        for (int p = 0; p < 2; ++p) {
            const auto& name =
                name_pool()[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(name_pool().size()) - 1))];
            std::string sub;
            for (const auto& w : prompt_words) {
                if (!sub.empty()) sub += ' ';
                if (w == "PersonX") {
                    sub += name;
                } else if (w == "PersonX,") {
                    sub += name + ",";
                } else {
                    sub += w;
                }
            }
            r.sub_neighborhood_prompts.push_back(sub);
        }

        const std::string err = validate_record(r);
        if (!err.empty()) throw std::logic_error("generate_toy_corpus: invalid record: " + err);

        // Memorized fact plus one fact per neighborhood prompt.
        {
            std::vector<int> seq = encode_strict(vocab, r.prompt);
            const auto tgt = encode_strict(vocab, target_mem);
            seq.insert(seq.end(), tgt.begin(), tgt.end());
            seq.push_back(eot);
            corpus.memorization.push_back(std::move(seq));
        }
        for (size_t p = 0; p < r.neighborhood_prompts.size(); ++p) {
            std::vector<int> seq = encode_strict(vocab, r.neighborhood_prompts[p]);
            const auto tgt = encode_strict(vocab, neighbor_targets[p]);
            seq.insert(seq.end(), tgt.begin(), tgt.end());
            seq.push_back(eot);
            corpus.memorization.push_back(std::move(seq));
        }

        CKRecord trace = r;
        trace.target_new = target_mem;
        corpus.trace_records.push_back(std::move(trace));
        corpus.records.push_back(std::move(r));
    }

    corpus.person_names = name_pool();
    return corpus;
}

}  // namespace ckedit
