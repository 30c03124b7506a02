// SPDX-License-Identifier: Apache-2.0

#include "ckedit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "ckedit/localization.hpp"
#include "json.hpp"

namespace ckedit {

double ngram_entropy(std::span<const int> tokens, int n) {
    if (static_cast<int>(tokens.size()) < n) {
        throw std::invalid_argument("ngram_entropy: sequence shorter than n");
    }
    std::map<std::vector<int>, int> counts;
    const int total = static_cast<int>(tokens.size()) - n + 1;
    for (int i = 0; i < total; ++i) {
        counts[std::vector<int>(tokens.begin() + i, tokens.begin() + i + n)] += 1;
    }
    double h = 0.0;
    for (const auto& [gram, c] : counts) {
        const double p = static_cast<double>(c) / total;
        h -= p * std::log2(p);
    }
    return h;
}

double fluency(std::span<const int> tokens) {
    if (tokens.size() < 3) throw std::invalid_argument("fluency: need at least 3 tokens");
    return (2.0 / 3.0) * ngram_entropy(tokens, 2) + (1.0 / 3.0) * ngram_entropy(tokens, 3);
}

double harmonic_mean(std::span<const double> values) {
    double inv = 0.0;
    for (double v : values) {
        if (v <= 0.0) return 0.0;
        inv += 1.0 / v;
    }
    return static_cast<double>(values.size()) / inv;
}

namespace {

// Mean that ignores missing entries (NaN); vacuous means report 1.
struct Mean {
    double sum = 0.0;
    int n = 0;
    void add(double v) {
        if (std::isnan(v)) return;
        sum += v;
        n += 1;
    }
    double value() const { return n == 0 ? 1.0 : sum / n; }
};

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

}  // namespace

EvalReport evaluate(const Checkpoint& edited, const Checkpoint& original, const Vocabulary& vocab,
                    const std::vector<CKRecord>& records,
                    const std::vector<EditReceipt>& receipts) {
    if (records.empty()) throw std::invalid_argument("evaluate: empty record set");
    if (records.size() != receipts.size()) {
        throw std::invalid_argument("evaluate: records and receipts differ in length");
    }
    for (size_t i = 0; i < records.size(); ++i) {
        if (records[i].case_id != receipts[i].case_id) {
            throw std::invalid_argument("evaluate: case_id mismatch at position " + std::to_string(i));
        }
    }

    EvalReport report;
    Mean eff, gen, spec, cons, common, fluent;

    for (const auto& record : records) {
        const auto target = vocab.encode(record.target_new);
        if (target.empty()) throw std::invalid_argument("evaluate: empty target for case " +
                                                        std::to_string(record.case_id));
        const int horizon = static_cast<int>(target.size());
        const int eot = vocab.eot_id();

        auto decode = [&](const Checkpoint& ckpt, const std::string& prompt) {
            return generate_greedy(ckpt, vocab.encode(prompt), horizon, eot);
        };

        RecordMetrics m;
        m.case_id = record.case_id;

        const auto edit_decode = decode(edited, record.prompt);
        m.efficacy = target_similarity(edit_decode, target);

        if (record.paraphrase_prompts.empty()) {
            m.generalization = kMissing;
        } else {
            double acc = 0.0;
            for (const auto& p : record.paraphrase_prompts) {
                acc += target_similarity(decode(edited, p), target);
            }
            m.generalization = acc / static_cast<double>(record.paraphrase_prompts.size());
        }

        auto drift = [&](const std::vector<std::string>& prompts) {
            if (prompts.empty()) return kMissing;
            double acc = 0.0;
            for (const auto& p : prompts) {
                const auto after = decode(edited, p);
                const auto before = decode(original, p);
                acc += before.empty() ? (after.empty() ? 1.0 : 0.0)
                                      : target_similarity(after, before);
            }
            return acc / static_cast<double>(prompts.size());
        };
        m.specificity = drift(record.neighborhood_prompts);
        m.commonsense = drift(record.sub_neighborhood_prompts);

        if (record.paraphrase_prompts.size() < 2) {
            m.consistency = kMissing;
        } else {
            std::vector<std::vector<int>> decodes;
            for (const auto& p : record.paraphrase_prompts) decodes.push_back(decode(edited, p));
            double acc = 0.0;
            int pairs = 0;
            for (size_t i = 0; i < decodes.size(); ++i) {
                for (size_t j = i + 1; j < decodes.size(); ++j) {
                    acc += decodes[j].empty() ? (decodes[i].empty() ? 1.0 : 0.0)
                                              : target_similarity(decodes[i], decodes[j]);
                    pairs += 1;
                }
            }
            m.consistency = acc / pairs;
        }

        m.fluency = edit_decode.size() >= 3 ? fluency(edit_decode) : kMissing;

        eff.add(m.efficacy);
        gen.add(m.generalization);
        spec.add(m.specificity);
        cons.add(m.consistency);
        common.add(m.commonsense);
        fluent.add(m.fluency);
        report.per_record.push_back(m);
    }

    report.efficacy = eff.value();
    report.generalization = gen.value();
    report.specificity = spec.value();
    report.consistency = cons.value();
    report.commonsense = common.value();
    report.fluency = fluent.n == 0 ? 0.0 : fluent.value();
    const double parts[4] = {report.efficacy, report.generalization, report.specificity,
                             report.commonsense};
    report.score = harmonic_mean(parts);
    return report;
}

std::string eval_report_json(const EvalReport& report) {
    nlohmann::ordered_json j;
    j["score"] = report.score;
    j["efficacy"] = report.efficacy;
    j["generalization"] = report.generalization;
    j["specificity"] = report.specificity;
    j["consistency"] = report.consistency;
    j["commonsense"] = report.commonsense;
    j["fluency"] = report.fluency;
    auto& rows = j["per_record"] = nlohmann::ordered_json::array();
    for (const auto& m : report.per_record) {
        nlohmann::ordered_json row;
        row["case_id"] = m.case_id;
        for (auto [name, v] : {std::pair<const char*, double>{"efficacy", m.efficacy},
                               {"generalization", m.generalization},
                               {"specificity", m.specificity},
                               {"consistency", m.consistency},
                               {"commonsense", m.commonsense},
                               {"fluency", m.fluency}}) {
            if (std::isnan(v)) {
                row[name] = nullptr;
            } else {
                row[name] = v;
            }
        }
        rows.push_back(std::move(row));
    }
    return j.dump();
}

std::string eval_report_csv(const EvalReport& report) {
    std::string out = "case_id,efficacy,generalization,specificity,consistency,commonsense,fluency\n";
    char buf[256];
    for (const auto& m : report.per_record) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.case_id,
                      m.efficacy, m.generalization, m.specificity, m.consistency, m.commonsense,
                      m.fluency);
        out += buf;
    }
    return out;
}

std::string eval_report_table(const EvalReport& report) {
    char buf[512];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-16s %8s\n", "metric", "value");
    out += buf;
    for (auto [name, v] : {std::pair<const char*, double>{"score", report.score},
                           {"efficacy", report.efficacy},
                           {"generalization", report.generalization},
                           {"specificity", report.specificity},
                           {"consistency", report.consistency},
                           {"commonsense", report.commonsense},
                           {"fluency", report.fluency}}) {
        std::snprintf(buf, sizeof(buf), "%-16s %8.4f\n", name, v);
        out += buf;
    }
    return out;
}

}  // namespace ckedit
