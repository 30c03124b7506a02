// SPDX-License-Identifier: Apache-2.0
//
// Dynamics-aware editing: per-sample layer selection by last-token block
// cosine, target-value optimization at the deepest selected layer, and
// closed-form ridge updates to MLP and Attn output weights, with ablation
// modes and exactly revertible receipts.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ckedit/dataset.hpp"
#include "ckedit/model.hpp"
#include "ckedit/tokenizer.hpp"

namespace ckedit {

// ---------------------------------------------------------------------------
// Layer selection
// ---------------------------------------------------------------------------

struct LayerSelection {
    // (layer index, |cosine|), ascending by |cosine|; ties prefer lower index.
    std::vector<std::pair<int, double>> entries;
    std::vector<SiteKind> kinds = {SiteKind::Mlp, SiteKind::Attn};

    std::vector<int> layers_ascending() const;
};

// Ranking core over per-layer (h_in, h_out) pairs at the last token; the
// layers whose |cosine| sits closest to zero contribute most and are picked.
LayerSelection select_from_states(
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& io_pairs, int k);

LayerSelection select_layers(const Checkpoint& ckpt, std::span<const int> prompt, int k);

// ---------------------------------------------------------------------------
// Covariance of previously memorized keys
// ---------------------------------------------------------------------------

struct CovarianceStats {
    int layer = 0;
    SiteKind kind = SiteKind::Mlp;
    Matrix c0;            // key_dim x key_dim, mu * E[k k^T]
    int sample_count = 0;
    double mu = 0.0;
};

CovarianceStats compute_covariance(const Checkpoint& ckpt,
                                   const std::vector<std::vector<int>>& corpus, int layer,
                                   SiteKind kind, double mu);

// ---------------------------------------------------------------------------
// Target-value (delta) optimization
// ---------------------------------------------------------------------------

struct DeltaOptimConfig {
    double alpha = 0.0625;  // KL weight
    double beta = 1.0;      // NLL weight
    int steps = 25;
    double step_size = 0.5;
    double clamp_mult = 4.0;  // per-row |delta| <= clamp_mult * |original site output|
    std::vector<std::string> prefixes;              // prepended prompt variants
    std::vector<std::string> entity_substitutions;  // PersonX replacements
};

// One delta per target token: row j lives at the teacher-forced position that
// predicts target token j, starting at the last prompt token. Free-running
// decode then reproduces each row's context, so the stacked edit carries the
// whole multi-token target.
struct DeltaTargets {
    int layer = 0;
    std::vector<int> positions;      // predictor positions in prompt + target
    Matrix delta_mlp, delta_attn;    // u x d_model
    Matrix v_mlp, v_attn;            // original sublayer output + delta, u x d_model
    std::vector<double> loss_trace;  // losses at accepted steps
};

// The optimized objective: alpha * KL(edited || original) at the last prompt
// token plus beta * mean teacher-forced target NLL over the prompt variants,
// as a function of the per-position injected deltas (u x d_model each).
double delta_loss(const Checkpoint& ckpt, const Vocabulary& vocab, const CKRecord& record,
                  int layer, const DeltaOptimConfig& cfg, const Matrix& delta_mlp,
                  const Matrix& delta_attn);

struct DeltaGrads {
    double loss = 0.0;
    Matrix d_mlp, d_attn;  // u x d_model
};

DeltaGrads delta_loss_grads(const Checkpoint& ckpt, const Vocabulary& vocab,
                            const CKRecord& record, int layer, const DeltaOptimConfig& cfg,
                            const Matrix& delta_mlp, const Matrix& delta_attn);

DeltaTargets optimize_deltas(const Checkpoint& ckpt, const Vocabulary& vocab,
                             const CKRecord& record, const LayerSelection& selection,
                             const DeltaOptimConfig& cfg);

// Deepest selected layer whose edit-position sites can still influence the
// continuation (final-layer sites cannot); hosts the delta optimization and
// the residual measurement.
int delta_host_layer(const LayerSelection& selection, int n_layers);

// ---------------------------------------------------------------------------
// Closed-form incremental weights
// ---------------------------------------------------------------------------

// Delta = R K1^T (C0 + K1 K1^T)^-1 with R out_dim x u and K1 key_dim x u
// (columns stack edits). Returned in the same out_dim x key_dim orientation.
Matrix compute_delta_weights(const Matrix& r, const Matrix& k1, const CovarianceStats& c0);

// ---------------------------------------------------------------------------
// Apply / revert
// ---------------------------------------------------------------------------

enum class EditMode { Dem, FixedLayer, MlpOnly, AttnOnly };

const char* edit_mode_name(EditMode mode);
EditMode edit_mode_from_name(const std::string& name);

struct SiteEditRecord {
    int layer = 0;
    SiteKind kind = SiteKind::Mlp;
    Matrix delta;     // shape of the edited weight
    Matrix k1, v1, r; // column convention: key_dim x u / out_dim x u
    double pre_norm = 0.0;   // Frobenius, before/after
    double post_norm = 0.0;
    Matrix w_before;  // exact revert payload
};

struct EditReceipt {
    int case_id = 0;
    EditMode mode = EditMode::Dem;
    LayerSelection selection;
    std::vector<SiteEditRecord> edits;
    uint64_t pre_weights_hash = 0;
    uint64_t post_weights_hash = 0;
    std::string config_echo;  // JSON text
};

struct EditConfig {
    EditMode mode = EditMode::Dem;
    int k = 3;
    double mu = 1.0;
    std::vector<int> fixed_layers;  // FixedLayer mode only
    DeltaOptimConfig opt;
    std::vector<std::vector<int>> covariance_corpus;
    // Precomputed per-site covariances (batch drivers fill this once from the
    // pre-edit model); apply_edit falls back to covariance_corpus when a
    // selected site is missing.
    std::vector<CovarianceStats> covariance_cache;

    std::string to_json() const;
};

// Selects layers per mode, optimizes target values at the deepest selected
// layer, then walks the selected layers in ascending order computing keys at
// the predictor positions, an equal share of the outstanding residual, and
// the ridge update for each edited output weight.
std::pair<Checkpoint, EditReceipt> apply_edit(const Checkpoint& ckpt, const Vocabulary& vocab,
                                              const CKRecord& record, const EditConfig& cfg);

// Bit-exact inverse of apply_edit for the matching checkpoint lineage.
Checkpoint revert_edit(const Checkpoint& ckpt, const EditReceipt& receipt);

// Folds an applied edit's keys into cached covariances as unscaled k k^T
// terms, so later solves in a batch retain earlier edits (the retain half of
// the ridge objective). Batch drivers call this after every apply_edit.
void absorb_edit_keys(std::vector<CovarianceStats>& cache, const EditReceipt& receipt);

// Receipt container: same layout as checkpoints with kind tag "KSRC".
void save_receipt(const EditReceipt& receipt, const std::string& path);
EditReceipt load_receipt(const std::string& path);

}  // namespace ckedit
