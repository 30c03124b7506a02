// SPDX-License-Identifier: Apache-2.0
//
// Commonsense editing records: JSONL schema, the 23-relation template
// registry, validation, and a deterministic toy-corpus generator.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ckedit/tokenizer.hpp"

namespace ckedit {

// One editing case. The subject span indexes into the whitespace-tokenized
// prompt and is fixed at construction time.
struct CKRecord {
    int case_id = 0;
    std::string relation;
    std::string prompt;
    std::string subject;
    int subject_span_start = 0;
    int subject_span_end = 0;  // exclusive
    std::string target_new;
    std::vector<std::string> paraphrase_prompts;
    std::vector<std::string> neighborhood_prompts;
    std::vector<std::string> sub_neighborhood_prompts;
};

struct RelationTemplate {
    std::string relation;
    std::string template_text;   // human-readable template
    std::string starred_text;    // variant used when PersonX/PersonY are absent ("" if none)
    int source_sample_size = 0;
};

// Exactly 23 relations.
const std::vector<RelationTemplate>& relation_registry();
bool is_registered_relation(const std::string& relation);
const RelationTemplate& relation_template(const std::string& relation);

// Phrases a valid prompt for this relation must contain (either template
// variant; the leading literal for slotted templates).
std::vector<std::string> relation_match_phrases(const std::string& relation);

// event1 + template, with the starred variant when neither event mentions
// PersonX/PersonY. Templates carrying E1/E2 slots are filled with event1 and
// cut before the E2 slot. event2 only participates in variant selection; it
// is the record's target, not part of the prompt.
std::string rewrite_template(const std::string& relation, const std::string& event1,
                             const std::string& event2);

// Strips filler markers ("___") and invalid characters ("&"), collapsing
// whitespace.
std::string normalize_text(const std::string& text);

// Throws std::runtime_error naming the offending line on any invalid record.
std::vector<CKRecord> load_records(const std::string& path, bool normalize = false);
void save_records(const std::vector<CKRecord>& records, const std::string& path);

// Record-level validation shared by the loader and the generator; returns an
// empty string when the record is valid, else the failure reason.
std::string validate_record(const CKRecord& record);

// ---------------------------------------------------------------------------
// Toy corpus
// ---------------------------------------------------------------------------

struct ToyCorpus {
    // target_new holds the redirect target for editing runs.
    std::vector<CKRecord> records;
    // Same cases with target_new set to the memorized continuation, usable
    // for localization runs against a trained model.
    std::vector<CKRecord> trace_records;
    // prompt + memorized target + <eot> sequences (plus neighborhood facts)
    // for train_toy.
    std::vector<std::vector<int>> memorization;
    // Single-token person names usable as decoupling substitutions.
    std::vector<std::string> person_names;
};

// Token list the toy generator draws from; includes <unk>/<eot>, all template
// words, person names, prefixes, and filler words with comma variants.
std::vector<std::string> toy_vocabulary_tokens();

ToyCorpus generate_toy_corpus(uint64_t seed, int n_records, const Vocabulary& vocab);

}  // namespace ckedit
