// SPDX-License-Identifier: Apache-2.0
//
// Toy decoder-only transformer: deterministic init, forward with an
// activation tape and interventions, reverse-mode gradients, greedy decoding,
// plain-GD training, and binary checkpoint I/O.
//
// Block wiring is pre-norm with a parallel-summed residual,
//   h^l = h^{l-1} + a^l + m^l,
// where both sublayers read the block input:
//   a_i = W_o_attn . attn(ln_attn(h_1..h_i))
//   m_i = W_o_mlp  . gelu(W_mlp_in . ln_mlp(h_i))

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ckedit/numerics.hpp"

namespace ckedit {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 0;
    int n_layers = 0;
    int n_heads = 0;
    int d_mlp = 0;  // 0 means 4 * d_model
    int max_seq = 0;
    double ln_epsilon = 1e-5;
    uint64_t seed = 0;

    // Resolves defaults and throws std::invalid_argument on a bad config.
    ModelConfig validated() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Matrix w_q, w_k, w_v;      // d_model x d_model
    Matrix w_o_attn;           // d_model x d_model
    Matrix ln_attn_g, ln_attn_b;  // 1 x d_model
    Matrix w_mlp_in;           // d_model x d_mlp
    Matrix w_o_mlp;            // d_mlp x d_model
    Matrix ln_mlp_g, ln_mlp_b;    // 1 x d_model
};

struct Checkpoint {
    ModelConfig config;
    Matrix tok_emb;            // vocab x d_model
    Matrix pos_emb;            // max_seq x d_model
    std::vector<LayerWeights> layers;
    Matrix ln_final_g, ln_final_b;  // 1 x d_model
    Matrix unembed;            // d_model x vocab (untied)
};

// Fixed manifest order for I/O, init, and gradient bookkeeping.
std::vector<std::string> tensor_names(const ModelConfig& cfg);
void for_each_tensor(Checkpoint& ckpt, const std::function<void(const std::string&, Matrix&)>& fn);
void for_each_tensor(const Checkpoint& ckpt, const std::function<void(const std::string&, const Matrix&)>& fn);
Matrix& tensor_by_name(Checkpoint& ckpt, const std::string& name);

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

enum class SiteKind { Block, Attn, Mlp, Embedding };

const char* site_kind_name(SiteKind k);
SiteKind site_kind_from_name(const std::string& name);

struct Site {
    int layer = 0;       // Embedding uses layer 0
    SiteKind kind = SiteKind::Block;
    int token = 0;
    bool operator==(const Site&) const = default;
};

enum class InterventionAction { Replace, Add, AddNoise };

struct Intervention {
    Site site;
    InterventionAction action = InterventionAction::Replace;
    std::vector<double> value;  // Replace / Add
    double sigma = 0.0;         // AddNoise
    uint64_t noise_seed = 0;

    static Intervention replace_with(Site s, std::vector<double> v);
    static Intervention add(Site s, std::vector<double> v);
    static Intervention add_noise(Site s, double sigma, uint64_t noise_seed);
};

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Per-layer, per-token record of block inputs, sublayer outputs and block
// outputs, all post-intervention. block_in[l] is what layer l consumed.
struct ActivationTape {
    int n_tokens = 0;
    int n_layers = 0;
    std::vector<Matrix> block_in;   // per layer: T x d_model
    std::vector<Matrix> attn_out;
    std::vector<Matrix> mlp_out;
    std::vector<Matrix> block_out;
    Matrix logits;                  // T x vocab
};

struct ForwardResult {
    Matrix logits;
    ActivationTape tape;
};

Checkpoint init_model(const ModelConfig& cfg);

ForwardResult forward(const Checkpoint& ckpt, std::span<const int> tokens,
                      const std::vector<Intervention>& interventions = {});

// Argmax decoding; ties break toward the lowest token id; stops after max_new
// tokens or before emitting eot_id (pass -1 for no end-of-text handling).
// Interventions address absolute positions and stay active at every step.
std::vector<int> generate_greedy(const Checkpoint& ckpt, std::span<const int> prompt, int max_new,
                                 int eot_id = -1, const std::vector<Intervention>& interventions = {});

// Final layer norm + unembedding applied to one hidden state.
std::vector<double> lm_head(const Checkpoint& ckpt, std::span<const double> h);

// Keys feeding a site's output weight: post-activation MLP hidden (T x d_mlp)
// for Mlp, pre-projection attention mix (T x d_model) for Attn.
Matrix sublayer_keys(const Checkpoint& ckpt, std::span<const int> tokens, int layer, SiteKind kind);

// Std of all token-embedding entries; corruption noise scales against it.
double embedding_std(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

struct GradRequest {
    bool all_params = false;
    std::vector<std::string> params;           // manifest tensor names
    std::vector<size_t> intervention_values;   // indices into the intervention list
};

struct Gradients {
    std::map<std::string, Matrix> params;
    std::map<size_t, std::vector<double>> intervention_values;
};

// Mean next-token negative log-likelihood. targets[i] is the id predicted
// from position i; -1 ignores the position.
double nll_loss(const Matrix& logits, std::span<const int> targets);

struct LossResult {
    double loss = 0.0;
    Gradients grads;
};

LossResult loss_and_grads(const Checkpoint& ckpt, std::span<const int> tokens,
                          std::span<const int> targets,
                          const std::vector<Intervention>& interventions,
                          const GradRequest& request);

// Generic reverse pass seeded with d(loss)/d(logits); the composite
// objectives in the editor build their own seeds and reuse this.
Gradients backward_from_logit_grads(const Checkpoint& ckpt, std::span<const int> tokens,
                                    const std::vector<Intervention>& interventions,
                                    const Matrix& dlogits, const GradRequest& request);

// Full-batch plain gradient descent on mean NLL over the corpus sequences.
// Deterministic; the input checkpoint is left untouched.
Checkpoint train_toy(const Checkpoint& ckpt, const std::vector<std::vector<int>>& corpus,
                     int steps, double lr);

// ---------------------------------------------------------------------------
// Checkpoint container: magic "KSCK", u32 version, u64 header length, JSON
// header (config + ordered tensor manifest), then row-major little-endian f64
// tensors in manifest order.
// ---------------------------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Hash of all tensor payloads in manifest order (edit lineage checks).
uint64_t checkpoint_weights_hash(const Checkpoint& ckpt);

}  // namespace ckedit
