// SPDX-License-Identifier: Apache-2.0
//
// Free-text knowledge localization: clean/corrupted/restoration tracing with
// multi-token targets, factual decoupling, and the layer-contribution recall
// probe.

#pragma once

#include <map>
#include <set>
#include <span>
#include <vector>

#include "ckedit/dataset.hpp"
#include "ckedit/model.hpp"
#include "ckedit/tokenizer.hpp"

namespace ckedit {

struct TraceConfig {
    double sigma_mult = 3.0;   // noise std relative to embedding-entry std
    uint64_t noise_seed = 0;
    int window = 1;            // tokens restored around a site (centered)
    int top_k = 3;
    std::vector<SiteKind> kinds = {SiteKind::Block, SiteKind::Mlp, SiteKind::Attn};
};

// Restoration scores over (site kind x token x layer), all in [0, 1].
struct TraceGrid {
    int case_id = 0;
    std::vector<SiteKind> kinds;
    int n_tokens = 0;
    int n_layers = 0;
    std::vector<double> p;
    double p_clean = 0.0;
    double p_corr = 0.0;

    double& at(int kind_idx, int token, int layer) {
        return p[(static_cast<size_t>(kind_idx) * n_tokens + token) * n_layers + layer];
    }
    double at(int kind_idx, int token, int layer) const {
        return p[(static_cast<size_t>(kind_idx) * n_tokens + token) * n_layers + layer];
    }
};

// Token-level F1 between bags of tokens, in [0, 1]. Throws on an empty
// target; an empty generation scores 0.
double target_similarity(std::span<const int> generated, std::span<const int> target);

struct CleanRun {
    double p_clean = 0.0;
    ActivationTape tape;              // prompt-position states for restoration
    std::vector<int> prompt_tokens;
    std::vector<int> target_tokens;
};

CleanRun clean_run(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record);

double corrupted_run(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record,
                     const TraceConfig& cfg);

// Corruption noise plus clean-state restoration at one site (window applied
// on the token axis).
double restore_run(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record,
                   const TraceConfig& cfg, const CleanRun& clean, Site site);

TraceGrid trace_grid(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record,
                     const TraceConfig& cfg);

// Layers ranked by max-over-tokens restoration score; ties prefer the lower
// layer; result sorted ascending.
std::vector<int> top_k_layers(const TraceGrid& grid, SiteKind kind, int k);

// Runs trace_grid once per entity substitution and intersects the per-kind
// top-k layer sets.
std::map<SiteKind, std::set<int>> decouple(const Checkpoint& ckpt, const Vocabulary& vocab,
                                           const CKRecord& record,
                                           const std::vector<std::string>& substitutions,
                                           const TraceConfig& cfg);

// Per-layer contribution probe at the last prompt token.
struct RecallEntry {
    double cosine = 0.0;
    double simpson = 0.0;
    std::vector<int> in_candidates;
    std::vector<int> out_candidates;
};

struct RecallProfile {
    std::vector<RecallEntry> mlp;   // one entry per layer
    std::vector<RecallEntry> attn;
};

RecallProfile recall_profile(const Checkpoint& ckpt, std::span<const int> prompt, int k = 50);

// Plot-ready serializations.
std::string trace_grid_json(const TraceGrid& grid);
std::string trace_grid_csv(const TraceGrid& grid);
std::string recall_profile_json(const RecallProfile& profile);
std::string recall_profile_csv(const RecallProfile& profile);

}  // namespace ckedit
