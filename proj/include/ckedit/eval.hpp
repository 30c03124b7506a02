// SPDX-License-Identifier: Apache-2.0
//
// Editing metrics over an edited/original checkpoint pair. Decode horizons
// are the record's target length; prompt lists that are empty for a record
// drop out of that metric's mean (a metric with no evidence at all reports 1).

#pragma once

#include <span>
#include <string>
#include <vector>

#include "ckedit/dataset.hpp"
#include "ckedit/editor.hpp"
#include "ckedit/model.hpp"
#include "ckedit/tokenizer.hpp"

namespace ckedit {

struct RecordMetrics {
    int case_id = 0;
    double efficacy = 0.0;
    double generalization = 0.0;
    double specificity = 0.0;
    double consistency = 0.0;
    double commonsense = 0.0;
    double fluency = 0.0;
};

struct EvalReport {
    double efficacy = 0.0;
    double generalization = 0.0;
    double specificity = 0.0;
    double consistency = 0.0;
    double commonsense = 0.0;
    double fluency = 0.0;  // entropy units, not bounded to [0, 1]
    double score = 0.0;    // harmonic mean of efficacy/generalization/specificity/commonsense
    std::vector<RecordMetrics> per_record;
};

// Base-2 entropy of the order-n n-gram distribution of a token sequence.
double ngram_entropy(std::span<const int> tokens, int n);

// 2/3 bigram + 1/3 trigram entropy; needs at least 3 tokens.
double fluency(std::span<const int> tokens);

double harmonic_mean(std::span<const double> values);

EvalReport evaluate(const Checkpoint& edited, const Checkpoint& original, const Vocabulary& vocab,
                    const std::vector<CKRecord>& records, const std::vector<EditReceipt>& receipts);

std::string eval_report_json(const EvalReport& report);
std::string eval_report_csv(const EvalReport& report);
std::string eval_report_table(const EvalReport& report);

}  // namespace ckedit
