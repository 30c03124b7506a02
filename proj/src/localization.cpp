// SPDX-License-Identifier: Apache-2.0

#include "ckedit/localization.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace ckedit {

double target_similarity(std::span<const int> generated, std::span<const int> target) {
    if (target.empty()) throw std::invalid_argument("target_similarity: empty target");
    if (generated.empty()) return 0.0;
    std::map<int, int> gen_counts, tgt_counts;
    for (int t : generated) gen_counts[t] += 1;
    for (int t : target) tgt_counts[t] += 1;
    int overlap = 0;
    for (const auto& [tok, n] : gen_counts) {
        auto it = tgt_counts.find(tok);
        if (it != tgt_counts.end()) overlap += std::min(n, it->second);
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(generated.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(target.size());
    return 2.0 * precision * recall / (precision + recall);
}

namespace {

struct TraceSetup {
    std::vector<int> prompt;
    std::vector<int> target;
    std::vector<Intervention> noise;
};

TraceSetup trace_setup(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record,
                       const TraceConfig& cfg) {
    TraceSetup s;
    s.prompt = vocab.encode(record.prompt);
    s.target = vocab.encode(record.target_new);
    if (s.target.empty()) throw std::invalid_argument("trace: empty target");
    if (record.subject_span_start >= record.subject_span_end) {
        throw std::invalid_argument("trace: empty subject span");
    }
    if (record.subject_span_end > static_cast<int>(s.prompt.size())) {
        throw std::invalid_argument("trace: subject span outside prompt");
    }
    if (static_cast<int>(s.prompt.size() + s.target.size()) > ckpt.config.max_seq) {
        throw std::invalid_argument("trace: prompt + target exceeds max_seq");
    }
    const double sigma = cfg.sigma_mult * embedding_std(ckpt);
    for (int t = record.subject_span_start; t < record.subject_span_end; ++t) {
        s.noise.push_back(Intervention::add_noise({0, SiteKind::Embedding, t}, sigma, cfg.noise_seed));
    }
    return s;
}

double decode_and_score(const Checkpoint& ckpt, const Vocabulary& vocab,
                        const std::vector<int>& prompt, const std::vector<int>& target,
                        const std::vector<Intervention>& ivs) {
    const auto decoded =
        generate_greedy(ckpt, prompt, static_cast<int>(target.size()), vocab.eot_id(), ivs);
    return target_similarity(decoded, target);
}

std::span<const double> tape_value(const ActivationTape& tape, Site site) {
    switch (site.kind) {
        case SiteKind::Block: return tape.block_out[static_cast<size_t>(site.layer)].row(site.token);
        case SiteKind::Attn: return tape.attn_out[static_cast<size_t>(site.layer)].row(site.token);
        case SiteKind::Mlp: return tape.mlp_out[static_cast<size_t>(site.layer)].row(site.token);
        case SiteKind::Embedding: return tape.block_in[0].row(site.token);
    }
    throw std::invalid_argument("tape_value: bad site kind");
}

}  // namespace

CleanRun clean_run(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record) {
    TraceConfig cfg;
    cfg.sigma_mult = 1.0;  // unused; setup just validates and tokenizes
    TraceSetup s = trace_setup(ckpt, vocab, record, cfg);
    CleanRun run;
    run.prompt_tokens = s.prompt;
    run.target_tokens = s.target;
    run.tape = forward(ckpt, s.prompt).tape;
    run.p_clean = decode_and_score(ckpt, vocab, s.prompt, s.target, {});
    return run;
}

double corrupted_run(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record,
                     const TraceConfig& cfg) {
    TraceSetup s = trace_setup(ckpt, vocab, record, cfg);
    return decode_and_score(ckpt, vocab, s.prompt, s.target, s.noise);
}

double restore_run(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record,
                   const TraceConfig& cfg, const CleanRun& clean, Site site) {
    if (clean.tape.n_tokens == 0) throw std::invalid_argument("restore_run: missing clean tape");
    TraceSetup s = trace_setup(ckpt, vocab, record, cfg);
    const int t_len = static_cast<int>(s.prompt.size());
    if (site.token < 0 || site.token >= t_len) throw std::invalid_argument("restore_run: bad site token");
    if (site.kind != SiteKind::Embedding &&
        (site.layer < 0 || site.layer >= ckpt.config.n_layers)) {
        throw std::invalid_argument("restore_run: bad site layer");
    }

    std::vector<Intervention> ivs = s.noise;
    const int half = (cfg.window - 1) / 2;
    for (int off = -half; off < cfg.window - half; ++off) {
        const int tok = site.token + off;
        if (tok < 0 || tok >= t_len) continue;
        Site at{site.layer, site.kind, tok};
        const auto v = tape_value(clean.tape, at);
        ivs.push_back(Intervention::replace_with(at, std::vector<double>(v.begin(), v.end())));
    }
    return decode_and_score(ckpt, vocab, s.prompt, s.target, ivs);
}

TraceGrid trace_grid(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record,
                     const TraceConfig& cfg) {
    const CleanRun clean = clean_run(ckpt, vocab, record);
    TraceGrid grid;
    grid.case_id = record.case_id;
    grid.kinds = cfg.kinds;
    grid.n_tokens = static_cast<int>(clean.prompt_tokens.size());
    grid.n_layers = ckpt.config.n_layers;
    grid.p.assign(cfg.kinds.size() * static_cast<size_t>(grid.n_tokens) * grid.n_layers, 0.0);
    grid.p_clean = clean.p_clean;
    grid.p_corr = corrupted_run(ckpt, vocab, record, cfg);

    std::string error;
    for (size_t ki = 0; ki < cfg.kinds.size(); ++ki) {
        const SiteKind kind = cfg.kinds[ki];
#pragma omp parallel for collapse(2) schedule(dynamic)
        for (int tok = 0; tok < grid.n_tokens; ++tok) {
            for (int layer = 0; layer < grid.n_layers; ++layer) {
                try {
                    const int site_layer = kind == SiteKind::Embedding ? 0 : layer;
                    grid.at(static_cast<int>(ki), tok, layer) = restore_run(
                        ckpt, vocab, record, cfg, clean, Site{site_layer, kind, tok});
                } catch (const std::exception& e) {
#pragma omp critical
                    if (error.empty()) error = e.what();
                }
            }
        }
    }
    if (!error.empty()) throw std::runtime_error("trace_grid: " + error);
    return grid;
}

std::vector<int> top_k_layers(const TraceGrid& grid, SiteKind kind, int k) {
    if (k < 1 || k > grid.n_layers) throw std::invalid_argument("top_k_layers: k out of range");
    int kind_idx = -1;
    for (size_t i = 0; i < grid.kinds.size(); ++i) {
        if (grid.kinds[i] == kind) kind_idx = static_cast<int>(i);
    }
    if (kind_idx < 0) throw std::invalid_argument("top_k_layers: kind not traced in this grid");

    std::vector<double> layer_max(static_cast<size_t>(grid.n_layers), 0.0);
    for (int layer = 0; layer < grid.n_layers; ++layer) {
        double mx = 0.0;
        for (int tok = 0; tok < grid.n_tokens; ++tok) {
            mx = std::max(mx, grid.at(kind_idx, tok, layer));
        }
        layer_max[static_cast<size_t>(layer)] = mx;
    }
    std::vector<int> order(static_cast<size_t>(grid.n_layers));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (layer_max[static_cast<size_t>(a)] != layer_max[static_cast<size_t>(b)]) {
            return layer_max[static_cast<size_t>(a)] > layer_max[static_cast<size_t>(b)];
        }
        return a < b;
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

std::map<SiteKind, std::set<int>> decouple(const Checkpoint& ckpt, const Vocabulary& vocab,
                                           const CKRecord& record,
                                           const std::vector<std::string>& substitutions,
                                           const TraceConfig& cfg) {
    if (substitutions.size() < 2) {
        throw std::invalid_argument("decouple: need at least 2 substitutions");
    }
    const auto words = split_whitespace(record.prompt);
    bool substitutable = false;
    for (const auto& w : words) {
        if (w == "PersonX" || w == "PersonX,") substitutable = true;
    }
    if (!substitutable) throw std::invalid_argument("decouple: record has no substitutable entity token");

    std::map<SiteKind, std::set<int>> result;
    bool first = true;
    for (const auto& name : substitutions) {
        if (name.empty() || name.find(' ') != std::string::npos) {
            throw std::invalid_argument("decouple: substitutions must be single tokens");
        }
        CKRecord sub = record;
        std::string prompt, subject;
        for (size_t i = 0; i < words.size(); ++i) {
            std::string w = words[i];
            if (w == "PersonX") w = name;
            if (w == "PersonX,") w = name + ",";
            if (!prompt.empty()) prompt += ' ';
            prompt += w;
            if (static_cast<int>(i) >= record.subject_span_start &&
                static_cast<int>(i) < record.subject_span_end) {
                if (!subject.empty()) subject += ' ';
                subject += w;
            }
        }
        sub.prompt = prompt;
        sub.subject = subject;

        const TraceGrid grid = trace_grid(ckpt, vocab, sub, cfg);
        for (SiteKind kind : cfg.kinds) {
            const auto layers = top_k_layers(grid, kind, cfg.top_k);
            std::set<int> layer_set(layers.begin(), layers.end());
            if (first) {
                result[kind] = layer_set;
            } else {
                std::set<int> inter;
                std::set_intersection(result[kind].begin(), result[kind].end(), layer_set.begin(),
                                      layer_set.end(), std::inserter(inter, inter.begin()));
                result[kind] = std::move(inter);
            }
        }
        first = false;
    }
    return result;
}

namespace {

std::vector<int> top_candidates(const std::vector<double>& logits, int k) {
    std::vector<int> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    const int kk = std::min<int>(k, static_cast<int>(logits.size()));
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int a, int b) {
        if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)]) {
            return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
        }
        return a < b;
    });
    order.resize(static_cast<size_t>(kk));
    return order;
}

}  // namespace

RecallProfile recall_profile(const Checkpoint& ckpt, std::span<const int> prompt, int k) {
    const ForwardResult fr = forward(ckpt, prompt);
    const int last = fr.tape.n_tokens - 1;
    const int d = ckpt.config.d_model;
    RecallProfile profile;

    auto probe = [&](std::span<const double> h_in, std::span<const double> sub_out) {
        RecallEntry e;
        std::vector<double> h_out(h_in.begin(), h_in.end());
        bool sub_zero = true;
        for (int i = 0; i < d; ++i) {
            h_out[static_cast<size_t>(i)] += sub_out[static_cast<size_t>(i)];
            if (sub_out[static_cast<size_t>(i)] != 0.0) sub_zero = false;
        }
        // h_out == h_in when the sublayer contributes nothing; report exactly 1
        // instead of paying sqrt roundoff.
        e.cosine = sub_zero ? 1.0 : cosine_similarity(h_in, h_out);
        e.in_candidates = top_candidates(lm_head(ckpt, h_in), k);
        e.out_candidates = top_candidates(lm_head(ckpt, h_out), k);
        e.simpson = simpson_overlap(e.in_candidates, e.out_candidates);
        return e;
    };

    for (int l = 0; l < ckpt.config.n_layers; ++l) {
        const auto h_in = fr.tape.block_in[static_cast<size_t>(l)].row(last);
        profile.attn.push_back(probe(h_in, fr.tape.attn_out[static_cast<size_t>(l)].row(last)));
        profile.mlp.push_back(probe(h_in, fr.tape.mlp_out[static_cast<size_t>(l)].row(last)));
    }
    return profile;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string trace_grid_json(const TraceGrid& grid) {
    nlohmann::ordered_json j;
    j["case_id"] = grid.case_id;
    j["p_clean"] = grid.p_clean;
    j["p_corr"] = grid.p_corr;
    j["n_tokens"] = grid.n_tokens;
    j["n_layers"] = grid.n_layers;
    auto& scores = j["p"] = nlohmann::ordered_json::object();
    for (size_t ki = 0; ki < grid.kinds.size(); ++ki) {
        auto rows = nlohmann::ordered_json::array();
        for (int tok = 0; tok < grid.n_tokens; ++tok) {
            auto row = nlohmann::ordered_json::array();
            for (int layer = 0; layer < grid.n_layers; ++layer) {
                row.push_back(grid.at(static_cast<int>(ki), tok, layer));
            }
            rows.push_back(std::move(row));
        }
        scores[site_kind_name(grid.kinds[ki])] = std::move(rows);
    }
    return j.dump();
}

std::string trace_grid_csv(const TraceGrid& grid) {
    std::string out = "kind,token,layer,score\n";
    char buf[64];
    for (size_t ki = 0; ki < grid.kinds.size(); ++ki) {
        for (int tok = 0; tok < grid.n_tokens; ++tok) {
            for (int layer = 0; layer < grid.n_layers; ++layer) {
                std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.17g\n", site_kind_name(grid.kinds[ki]),
                              tok, layer, grid.at(static_cast<int>(ki), tok, layer));
                out += buf;
            }
        }
    }
    return out;
}

std::string recall_profile_csv(const RecallProfile& profile) {
    std::string out = "kind,layer,cosine,simpson\n";
    char buf[96];
    auto dump = [&](const char* kind, const std::vector<RecallEntry>& entries) {
        for (size_t l = 0; l < entries.size(); ++l) {
            std::snprintf(buf, sizeof(buf), "%s,%zu,%.17g,%.17g\n", kind, l, entries[l].cosine,
                          entries[l].simpson);
            out += buf;
        }
    };
    dump("mlp", profile.mlp);
    dump("attn", profile.attn);
    return out;
}

std::string recall_profile_json(const RecallProfile& profile) {
    nlohmann::ordered_json j;
    auto dump_entries = [](const std::vector<RecallEntry>& entries) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& e : entries) {
            arr.push_back({{"cosine", e.cosine},
                           {"simpson", e.simpson},
                           {"in_candidates", e.in_candidates},
                           {"out_candidates", e.out_candidates}});
        }
        return arr;
    };
    j["mlp"] = dump_entries(profile.mlp);
    j["attn"] = dump_entries(profile.attn);
    return j.dump();
}

}  // namespace ckedit
