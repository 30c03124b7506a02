// SPDX-License-Identifier: Apache-2.0

#include "ckedit/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container I/O assumes a little-endian host");

namespace ckedit {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

int kind_index(SiteKind k) { return static_cast<int>(k); }

}  // namespace

// ---------------------------------------------------------------------------
// Config / checkpoint plumbing
// ---------------------------------------------------------------------------

ModelConfig ModelConfig::validated() const {
    ModelConfig c = *this;
    if (c.d_mlp == 0) c.d_mlp = 4 * c.d_model;
    if (c.vocab_size < 1 || c.d_model < 1 || c.n_layers < 1 || c.n_heads < 1 || c.d_mlp < 1) {
        throw std::invalid_argument("ModelConfig: all counts must be >= 1");
    }
    if (c.max_seq < 2) throw std::invalid_argument("ModelConfig: max_seq must be >= 2");
    if (c.d_model % c.n_heads != 0) {
        throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    }
    if (!(c.ln_epsilon > 0.0)) throw std::invalid_argument("ModelConfig: ln_epsilon must be > 0");
    return c;
}

std::vector<std::string> tensor_names(const ModelConfig& cfg) {
    std::vector<std::string> names{"tok_emb", "pos_emb"};
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        for (const char* t : {"w_q", "w_k", "w_v", "w_o_attn", "ln_attn_g", "ln_attn_b",
                              "w_mlp_in", "w_o_mlp", "ln_mlp_g", "ln_mlp_b"}) {
            names.push_back(p + t);
        }
    }
    names.emplace_back("ln_final_g");
    names.emplace_back("ln_final_b");
    names.emplace_back("unembed");
    return names;
}

void for_each_tensor(Checkpoint& ckpt, const std::function<void(const std::string&, Matrix&)>& fn) {
    fn("tok_emb", ckpt.tok_emb);
    fn("pos_emb", ckpt.pos_emb);
    for (size_t l = 0; l < ckpt.layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights& w = ckpt.layers[l];
        fn(p + "w_q", w.w_q);
        fn(p + "w_k", w.w_k);
        fn(p + "w_v", w.w_v);
        fn(p + "w_o_attn", w.w_o_attn);
        fn(p + "ln_attn_g", w.ln_attn_g);
        fn(p + "ln_attn_b", w.ln_attn_b);
        fn(p + "w_mlp_in", w.w_mlp_in);
        fn(p + "w_o_mlp", w.w_o_mlp);
        fn(p + "ln_mlp_g", w.ln_mlp_g);
        fn(p + "ln_mlp_b", w.ln_mlp_b);
    }
    fn("ln_final_g", ckpt.ln_final_g);
    fn("ln_final_b", ckpt.ln_final_b);
    fn("unembed", ckpt.unembed);
}

void for_each_tensor(const Checkpoint& ckpt,
                     const std::function<void(const std::string&, const Matrix&)>& fn) {
    for_each_tensor(const_cast<Checkpoint&>(ckpt),
                    [&](const std::string& n, Matrix& m) { fn(n, m); });
}

Matrix& tensor_by_name(Checkpoint& ckpt, const std::string& name) {
    Matrix* found = nullptr;
    for_each_tensor(ckpt, [&](const std::string& n, Matrix& m) {
        if (n == name) found = &m;
    });
    if (found == nullptr) throw std::invalid_argument("tensor_by_name: unknown tensor " + name);
    return *found;
}

const char* site_kind_name(SiteKind k) {
    switch (k) {
        case SiteKind::Block: return "block";
        case SiteKind::Attn: return "attn";
        case SiteKind::Mlp: return "mlp";
        case SiteKind::Embedding: return "embedding";
    }
    return "?";
}

SiteKind site_kind_from_name(const std::string& name) {
    if (name == "block") return SiteKind::Block;
    if (name == "attn") return SiteKind::Attn;
    if (name == "mlp") return SiteKind::Mlp;
    if (name == "embedding") return SiteKind::Embedding;
    throw std::invalid_argument("unknown site kind: " + name);
}

Intervention Intervention::replace_with(Site s, std::vector<double> v) {
    Intervention iv;
    iv.site = s;
    iv.action = InterventionAction::Replace;
    iv.value = std::move(v);
    return iv;
}

Intervention Intervention::add(Site s, std::vector<double> v) {
    Intervention iv;
    iv.site = s;
    iv.action = InterventionAction::Add;
    iv.value = std::move(v);
    return iv;
}

Intervention Intervention::add_noise(Site s, double sigma, uint64_t noise_seed) {
    Intervention iv;
    iv.site = s;
    iv.action = InterventionAction::AddNoise;
    iv.sigma = sigma;
    iv.noise_seed = noise_seed;
    return iv;
}

// ---------------------------------------------------------------------------
// Init
// ---------------------------------------------------------------------------

Checkpoint init_model(const ModelConfig& cfg_in) {
    const ModelConfig cfg = cfg_in.validated();
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.tok_emb = Matrix(cfg.vocab_size, cfg.d_model);
    ckpt.pos_emb = Matrix(cfg.max_seq, cfg.d_model);
    ckpt.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& w : ckpt.layers) {
        w.w_q = Matrix(cfg.d_model, cfg.d_model);
        w.w_k = Matrix(cfg.d_model, cfg.d_model);
        w.w_v = Matrix(cfg.d_model, cfg.d_model);
        w.w_o_attn = Matrix(cfg.d_model, cfg.d_model);
        w.ln_attn_g = Matrix(1, cfg.d_model);
        w.ln_attn_b = Matrix(1, cfg.d_model);
        w.w_mlp_in = Matrix(cfg.d_model, cfg.d_mlp);
        w.w_o_mlp = Matrix(cfg.d_mlp, cfg.d_model);
        w.ln_mlp_g = Matrix(1, cfg.d_model);
        w.ln_mlp_b = Matrix(1, cfg.d_model);
    }
    ckpt.ln_final_g = Matrix(1, cfg.d_model);
    ckpt.ln_final_b = Matrix(1, cfg.d_model);
    ckpt.unembed = Matrix(cfg.d_model, cfg.vocab_size);

    Rng rng(derive_seed(cfg.seed, 0x6d6f64656cull));  // independent init stream
    for_each_tensor(ckpt, [&](const std::string& name, Matrix& m) {
        const bool is_gain = name.ends_with("_g");
        const bool is_bias = name.ends_with("_b");
        for (double& v : m.data) {
            if (is_gain) {
                v = 1.0;
            } else if (is_bias) {
                v = 0.0;
            } else {
                v = rng.gaussian(0.0, 0.02);
            }
        }
    });
    return ckpt;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

struct LayerCache {
    Matrix x;  // block input, post-intervention
    Matrix ln1, q, k, v, att, mix, a;
    Matrix ln2, z, hid, m;
    std::vector<double> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Matrix h_final;
    Matrix lnf;
    std::vector<double> lnf_mean, lnf_rstd;
    Matrix logits;
};

void layernorm_forward(const Matrix& x, const Matrix& g, const Matrix& b, double eps, Matrix& out,
                       std::vector<double>& means, std::vector<double>& rstds) {
    const int t_len = x.rows;
    const int d = x.cols;
    out = Matrix(t_len, d);
    means.assign(static_cast<size_t>(t_len), 0.0);
    rstds.assign(static_cast<size_t>(t_len), 0.0);
    for (int t = 0; t < t_len; ++t) {
        const double* xr = x.data.data() + static_cast<size_t>(t) * d;
        double mean = 0.0;
        for (int i = 0; i < d; ++i) mean += xr[i];
        mean /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            const double s = xr[i] - mean;
            var += s * s;
        }
        var /= d;
        const double rstd = 1.0 / std::sqrt(var + eps);
        means[static_cast<size_t>(t)] = mean;
        rstds[static_cast<size_t>(t)] = rstd;
        double* yr = out.data.data() + static_cast<size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            yr[i] = g.data[static_cast<size_t>(i)] * (xr[i] - mean) * rstd + b.data[static_cast<size_t>(i)];
        }
    }
}

// dX for one already-normalized tensor; accumulates dgamma/dbeta when wanted.
void layernorm_backward(const Matrix& dy, const Matrix& x, const Matrix& g,
                        const std::vector<double>& means, const std::vector<double>& rstds,
                        Matrix& dx, Matrix* dg, Matrix* db) {
    const int t_len = x.rows;
    const int d = x.cols;
    dx = Matrix(t_len, d);
    for (int t = 0; t < t_len; ++t) {
        const double* xr = x.data.data() + static_cast<size_t>(t) * d;
        const double* dyr = dy.data.data() + static_cast<size_t>(t) * d;
        double* dxr = dx.data.data() + static_cast<size_t>(t) * d;
        const double mean = means[static_cast<size_t>(t)];
        const double rstd = rstds[static_cast<size_t>(t)];
        double m1 = 0.0;
        double m2 = 0.0;
        for (int i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mean) * rstd;
            const double dxhat = dyr[i] * g.data[static_cast<size_t>(i)];
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 /= d;
        m2 /= d;
        for (int i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mean) * rstd;
            const double dxhat = dyr[i] * g.data[static_cast<size_t>(i)];
            dxr[i] = rstd * (dxhat - m1 - xhat * m2);
            if (dg != nullptr) dg->data[static_cast<size_t>(i)] += dyr[i] * xhat;
            if (db != nullptr) db->data[static_cast<size_t>(i)] += dyr[i];
        }
    }
}

std::vector<double> noise_vector(const Intervention& iv, int dim) {
    const uint64_t salt = (static_cast<uint64_t>(iv.site.layer) << 40) |
                          (static_cast<uint64_t>(kind_index(iv.site.kind)) << 32) |
                          static_cast<uint64_t>(static_cast<uint32_t>(iv.site.token));
    Rng rng(derive_seed(iv.noise_seed, salt));
    std::vector<double> v(static_cast<size_t>(dim));
    for (double& x : v) x = rng.gaussian(0.0, iv.sigma);
    return v;
}

void validate_interventions(const ModelConfig& cfg, int t_len,
                            const std::vector<Intervention>& ivs) {
    for (const auto& iv : ivs) {
        const Site& s = iv.site;
        if (s.token < 0 || s.token >= t_len) {
            throw std::invalid_argument("intervention token index out of range");
        }
        if (s.kind == SiteKind::Embedding) {
            if (s.layer != 0) throw std::invalid_argument("embedding intervention must use layer 0");
        } else if (s.layer < 0 || s.layer >= cfg.n_layers) {
            throw std::invalid_argument("intervention layer out of range");
        }
        if (iv.action != InterventionAction::AddNoise &&
            static_cast<int>(iv.value.size()) != cfg.d_model) {
            throw std::invalid_argument("intervention vector dimension must equal d_model");
        }
        if (iv.action == InterventionAction::AddNoise && iv.sigma < 0.0) {
            throw std::invalid_argument("intervention noise sigma must be >= 0");
        }
    }
}

void apply_site_interventions(Matrix& t, int layer, SiteKind kind,
                              const std::vector<Intervention>& ivs) {
    for (const auto& iv : ivs) {
        if (iv.site.kind != kind || iv.site.layer != layer) continue;
        double* row = t.data.data() + static_cast<size_t>(iv.site.token) * t.cols;
        switch (iv.action) {
            case InterventionAction::Replace:
                std::copy(iv.value.begin(), iv.value.end(), row);
                break;
            case InterventionAction::Add:
                for (int i = 0; i < t.cols; ++i) row[i] += iv.value[static_cast<size_t>(i)];
                break;
            case InterventionAction::AddNoise: {
                const auto v = noise_vector(iv, t.cols);
                for (int i = 0; i < t.cols; ++i) row[i] += v[static_cast<size_t>(i)];
                break;
            }
        }
    }
}

ForwardCache forward_full(const Checkpoint& ckpt, std::span<const int> tokens,
                          const std::vector<Intervention>& ivs) {
    const ModelConfig& cfg = ckpt.config;
    const int t_len = static_cast<int>(tokens.size());
    if (t_len == 0) throw std::invalid_argument("forward: empty token sequence");
    if (t_len > cfg.max_seq) throw std::invalid_argument("forward: sequence longer than max_seq");
    for (int id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("forward: token id out of vocabulary");
    }
    validate_interventions(cfg, t_len, ivs);

    const int d = cfg.d_model;
    const int heads = cfg.n_heads;
    const int hd = d / heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    ForwardCache fc;
    fc.layers.resize(static_cast<size_t>(cfg.n_layers));

    Matrix h(t_len, d);
    for (int t = 0; t < t_len; ++t) {
        const double* e = ckpt.tok_emb.data.data() + static_cast<size_t>(tokens[static_cast<size_t>(t)]) * d;
        const double* p = ckpt.pos_emb.data.data() + static_cast<size_t>(t) * d;
        double* hr = h.data.data() + static_cast<size_t>(t) * d;
        for (int i = 0; i < d; ++i) hr[i] = e[i] + p[i];
    }
    apply_site_interventions(h, 0, SiteKind::Embedding, ivs);

    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerCache& lc = fc.layers[static_cast<size_t>(l)];
        const LayerWeights& w = ckpt.layers[static_cast<size_t>(l)];
        lc.x = h;

        layernorm_forward(lc.x, w.ln_attn_g, w.ln_attn_b, cfg.ln_epsilon, lc.ln1, lc.ln1_mean, lc.ln1_rstd);
        lc.q = matmul(lc.ln1, w.w_q);
        lc.k = matmul(lc.ln1, w.w_k);
        lc.v = matmul(lc.ln1, w.w_v);

        lc.att = Matrix(heads * t_len, t_len);
        lc.mix = Matrix(t_len, d);
        for (int hh = 0; hh < heads; ++hh) {
            const int c0 = hh * hd;
            for (int i = 0; i < t_len; ++i) {
                double* att_row = lc.att.data.data() + static_cast<size_t>(hh * t_len + i) * t_len;
                const double* qi = lc.q.data.data() + static_cast<size_t>(i) * d + c0;
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = lc.k.data.data() + static_cast<size_t>(j) * d + c0;
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_hd;
                    att_row[j] = s;
                    mx = std::max(mx, s);
                }
                double sum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    att_row[j] = std::exp(att_row[j] - mx);
                    sum += att_row[j];
                }
                double* mix_i = lc.mix.data.data() + static_cast<size_t>(i) * d + c0;
                for (int j = 0; j <= i; ++j) {
                    att_row[j] /= sum;
                    const double* vj = lc.v.data.data() + static_cast<size_t>(j) * d + c0;
                    for (int c = 0; c < hd; ++c) mix_i[c] += att_row[j] * vj[c];
                }
            }
        }

        lc.a = matmul(lc.mix, w.w_o_attn);
        apply_site_interventions(lc.a, l, SiteKind::Attn, ivs);

        layernorm_forward(lc.x, w.ln_mlp_g, w.ln_mlp_b, cfg.ln_epsilon, lc.ln2, lc.ln2_mean, lc.ln2_rstd);
        lc.z = matmul(lc.ln2, w.w_mlp_in);
        lc.hid = lc.z;
        for (double& v : lc.hid.data) v = gelu(v);
        lc.m = matmul(lc.hid, w.w_o_mlp);
        apply_site_interventions(lc.m, l, SiteKind::Mlp, ivs);

        for (size_t i = 0; i < h.data.size(); ++i) {
            h.data[i] = lc.x.data[i] + lc.a.data[i] + lc.m.data[i];
        }
        apply_site_interventions(h, l, SiteKind::Block, ivs);
    }

    fc.h_final = h;
    layernorm_forward(fc.h_final, ckpt.ln_final_g, ckpt.ln_final_b, cfg.ln_epsilon, fc.lnf,
                      fc.lnf_mean, fc.lnf_rstd);
    fc.logits = matmul(fc.lnf, ckpt.unembed);
    return fc;
}

}  // namespace

ForwardResult forward(const Checkpoint& ckpt, std::span<const int> tokens,
                      const std::vector<Intervention>& interventions) {
    ForwardCache fc = forward_full(ckpt, tokens, interventions);
    ForwardResult r;
    r.logits = fc.logits;
    r.tape.n_tokens = static_cast<int>(tokens.size());
    r.tape.n_layers = ckpt.config.n_layers;
    r.tape.logits = fc.logits;
    const int n_layers = ckpt.config.n_layers;
    r.tape.block_in.reserve(static_cast<size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) {
        LayerCache& lc = fc.layers[static_cast<size_t>(l)];
        r.tape.block_in.push_back(lc.x);
        r.tape.attn_out.push_back(std::move(lc.a));
        r.tape.mlp_out.push_back(std::move(lc.m));
        r.tape.block_out.push_back(l + 1 < n_layers ? fc.layers[static_cast<size_t>(l + 1)].x
                                                    : fc.h_final);
    }
    return r;
}

std::vector<int> generate_greedy(const Checkpoint& ckpt, std::span<const int> prompt, int max_new,
                                 int eot_id, const std::vector<Intervention>& interventions) {
    if (prompt.empty()) throw std::invalid_argument("generate_greedy: empty prompt");
    if (static_cast<int>(prompt.size()) + max_new > ckpt.config.max_seq) {
        throw std::invalid_argument("generate_greedy: prompt + max_new exceeds max_seq");
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        // An intervention addressing a position the sequence has not reached
        // yet becomes active once generation gets there.
        std::vector<Intervention> active;
        for (const auto& iv : interventions) {
            if (iv.site.token < static_cast<int>(seq.size())) active.push_back(iv);
        }
        const ForwardCache fc = forward_full(ckpt, seq, active);
        const int last = static_cast<int>(seq.size()) - 1;
        const double* row = fc.logits.data.data() + static_cast<size_t>(last) * fc.logits.cols;
        int best = 0;
        for (int j = 1; j < fc.logits.cols; ++j) {
            if (row[j] > row[best]) best = j;  // ties keep the lowest id
        }
        if (best == eot_id) break;
        out.push_back(best);
        seq.push_back(best);
    }
    return out;
}

std::vector<double> lm_head(const Checkpoint& ckpt, std::span<const double> h) {
    const int d = ckpt.config.d_model;
    if (static_cast<int>(h.size()) != d) throw std::invalid_argument("lm_head: dimension mismatch");
    double mean = 0.0;
    for (double v : h) mean += v;
    mean /= d;
    double var = 0.0;
    for (double v : h) var += (v - mean) * (v - mean);
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + ckpt.config.ln_epsilon);
    std::vector<double> normed(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        normed[static_cast<size_t>(i)] =
            ckpt.ln_final_g.data[static_cast<size_t>(i)] * (h[static_cast<size_t>(i)] - mean) * rstd +
            ckpt.ln_final_b.data[static_cast<size_t>(i)];
    }
    std::vector<double> logits(static_cast<size_t>(ckpt.config.vocab_size), 0.0);
    for (int i = 0; i < d; ++i) {
        const double x = normed[static_cast<size_t>(i)];
        if (x == 0.0) continue;
        const double* wrow = ckpt.unembed.data.data() + static_cast<size_t>(i) * ckpt.unembed.cols;
        for (int j = 0; j < ckpt.config.vocab_size; ++j) logits[static_cast<size_t>(j)] += x * wrow[j];
    }
    return logits;
}

Matrix sublayer_keys(const Checkpoint& ckpt, std::span<const int> tokens, int layer, SiteKind kind) {
    if (layer < 0 || layer >= ckpt.config.n_layers) {
        throw std::invalid_argument("sublayer_keys: layer out of range");
    }
    if (kind != SiteKind::Mlp && kind != SiteKind::Attn) {
        throw std::invalid_argument("sublayer_keys: keys exist only for mlp/attn sites");
    }
    ForwardCache fc = forward_full(ckpt, tokens, {});
    return kind == SiteKind::Mlp ? std::move(fc.layers[static_cast<size_t>(layer)].hid)
                                 : std::move(fc.layers[static_cast<size_t>(layer)].mix);
}

double embedding_std(const Checkpoint& ckpt) {
    const auto& v = ckpt.tok_emb.data;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    return std::sqrt(var);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

double nll_loss(const Matrix& logits, std::span<const int> targets) {
    if (static_cast<int>(targets.size()) != logits.rows) {
        throw std::invalid_argument("nll_loss: targets misaligned with positions");
    }
    double total = 0.0;
    int n = 0;
    for (int t = 0; t < logits.rows; ++t) {
        const int y = targets[static_cast<size_t>(t)];
        if (y < 0) continue;
        if (y >= logits.cols) throw std::invalid_argument("nll_loss: target id out of vocabulary");
        const double* row = logits.data.data() + static_cast<size_t>(t) * logits.cols;
        double mx = row[0];
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < logits.cols; ++j) sum += std::exp(row[j] - mx);
        total += mx + std::log(sum) - row[y];
        n += 1;
    }
    if (n == 0) throw std::invalid_argument("nll_loss: no supervised positions");
    return total / n;
}

namespace {

struct GradSink {
    const GradRequest* request = nullptr;
    Gradients* out = nullptr;
    std::set<std::string> wanted_params;

    bool wants(const std::string& name) const {
        return request->all_params || wanted_params.count(name) > 0;
    }

    Matrix& param(const std::string& name, int rows, int cols) {
        auto it = out->params.find(name);
        if (it == out->params.end()) {
            it = out->params.emplace(name, Matrix(rows, cols)).first;
        }
        return it->second;
    }
};

// Reverse-order intervention handling on the gradient of a site tensor:
// Replace cuts the upstream flow at its token; Add passes through. Gradients
// w.r.t. requested intervention vectors are captured here.
void backward_site_interventions(Matrix& grad, int layer, SiteKind kind,
                                 const std::vector<Intervention>& ivs, GradSink& sink) {
    for (size_t idx = ivs.size(); idx-- > 0;) {
        const Intervention& iv = ivs[idx];
        if (iv.site.kind != kind || iv.site.layer != layer) continue;
        double* row = grad.data.data() + static_cast<size_t>(iv.site.token) * grad.cols;
        const bool wanted = std::find(sink.request->intervention_values.begin(),
                                      sink.request->intervention_values.end(),
                                      idx) != sink.request->intervention_values.end();
        if (wanted) {
            auto& g = sink.out->intervention_values[idx];
            if (g.empty()) g.assign(static_cast<size_t>(grad.cols), 0.0);
            for (int i = 0; i < grad.cols; ++i) g[static_cast<size_t>(i)] += row[i];
        }
        if (iv.action == InterventionAction::Replace) {
            std::fill(row, row + grad.cols, 0.0);
        }
    }
}

void backward_with_cache(const Checkpoint& ckpt, const ForwardCache& fc,
                         std::span<const int> tokens, const std::vector<Intervention>& ivs,
                         const Matrix& dlogits, const GradRequest& request, Gradients& out) {
    const ModelConfig& cfg = ckpt.config;
    const int t_len = static_cast<int>(tokens.size());
    if (dlogits.rows != t_len || dlogits.cols != cfg.vocab_size) {
        throw std::invalid_argument("backward: dlogits shape mismatch");
    }

    GradSink sink;
    sink.request = &request;
    sink.out = &out;
    sink.wanted_params.insert(request.params.begin(), request.params.end());

    const int d = cfg.d_model;
    const int heads = cfg.n_heads;
    const int hd = d / heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    // logits -> final layer norm
    if (sink.wants("unembed")) {
        add_inplace(sink.param("unembed", d, cfg.vocab_size), matmul_tn(fc.lnf, dlogits));
    }
    Matrix dlnf = matmul_nt(dlogits, ckpt.unembed);
    Matrix dh;
    {
        Matrix* dgf = sink.wants("ln_final_g") ? &sink.param("ln_final_g", 1, d) : nullptr;
        Matrix* dbf = sink.wants("ln_final_b") ? &sink.param("ln_final_b", 1, d) : nullptr;
        layernorm_backward(dlnf, fc.h_final, ckpt.ln_final_g, fc.lnf_mean, fc.lnf_rstd, dh, dgf, dbf);
    }

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerCache& lc = fc.layers[static_cast<size_t>(l)];
        const LayerWeights& w = ckpt.layers[static_cast<size_t>(l)];
        const std::string p = "layers." + std::to_string(l) + ".";

        backward_site_interventions(dh, l, SiteKind::Block, ivs, sink);

        // h = x + a + m
        Matrix da = dh;
        Matrix dm = dh;
        Matrix dx = dh;

        // MLP path
        backward_site_interventions(dm, l, SiteKind::Mlp, ivs, sink);
        if (sink.wants(p + "w_o_mlp")) {
            add_inplace(sink.param(p + "w_o_mlp", cfg.d_mlp, d), matmul_tn(lc.hid, dm));
        }
        Matrix dhid = matmul_nt(dm, w.w_o_mlp);
        for (size_t i = 0; i < dhid.data.size(); ++i) dhid.data[i] *= gelu_grad(lc.z.data[i]);
        if (sink.wants(p + "w_mlp_in")) {
            add_inplace(sink.param(p + "w_mlp_in", d, cfg.d_mlp), matmul_tn(lc.ln2, dhid));
        }
        Matrix dln2 = matmul_nt(dhid, w.w_mlp_in);
        {
            Matrix dx_mlp;
            Matrix* dg = sink.wants(p + "ln_mlp_g") ? &sink.param(p + "ln_mlp_g", 1, d) : nullptr;
            Matrix* db = sink.wants(p + "ln_mlp_b") ? &sink.param(p + "ln_mlp_b", 1, d) : nullptr;
            layernorm_backward(dln2, lc.x, w.ln_mlp_g, lc.ln2_mean, lc.ln2_rstd, dx_mlp, dg, db);
            add_inplace(dx, dx_mlp);
        }

        // Attention path
        backward_site_interventions(da, l, SiteKind::Attn, ivs, sink);
        if (sink.wants(p + "w_o_attn")) {
            add_inplace(sink.param(p + "w_o_attn", d, d), matmul_tn(lc.mix, da));
        }
        Matrix dmix = matmul_nt(da, w.w_o_attn);

        Matrix dq(t_len, d);
        Matrix dk(t_len, d);
        Matrix dv(t_len, d);
        std::vector<double> datt(static_cast<size_t>(t_len));
        for (int hh = 0; hh < heads; ++hh) {
            const int c0 = hh * hd;
            for (int i = 0; i < t_len; ++i) {
                const double* att_row = lc.att.data.data() + static_cast<size_t>(hh * t_len + i) * t_len;
                const double* dmix_i = dmix.data.data() + static_cast<size_t>(i) * d + c0;
                double dot_av = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double* vj = lc.v.data.data() + static_cast<size_t>(j) * d + c0;
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += dmix_i[c] * vj[c];
                    datt[static_cast<size_t>(j)] = s;
                    dot_av += att_row[j] * s;
                    double* dvj = dv.data.data() + static_cast<size_t>(j) * d + c0;
                    for (int c = 0; c < hd; ++c) dvj[c] += att_row[j] * dmix_i[c];
                }
                double* dqi = dq.data.data() + static_cast<size_t>(i) * d + c0;
                const double* qi = lc.q.data.data() + static_cast<size_t>(i) * d + c0;
                for (int j = 0; j <= i; ++j) {
                    const double ds = att_row[j] * (datt[static_cast<size_t>(j)] - dot_av) * inv_sqrt_hd;
                    if (ds == 0.0) continue;
                    const double* kj = lc.k.data.data() + static_cast<size_t>(j) * d + c0;
                    double* dkj = dk.data.data() + static_cast<size_t>(j) * d + c0;
                    for (int c = 0; c < hd; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }

        if (sink.wants(p + "w_q")) add_inplace(sink.param(p + "w_q", d, d), matmul_tn(lc.ln1, dq));
        if (sink.wants(p + "w_k")) add_inplace(sink.param(p + "w_k", d, d), matmul_tn(lc.ln1, dk));
        if (sink.wants(p + "w_v")) add_inplace(sink.param(p + "w_v", d, d), matmul_tn(lc.ln1, dv));

        Matrix dln1 = matmul_nt(dq, w.w_q);
        add_inplace(dln1, matmul_nt(dk, w.w_k));
        add_inplace(dln1, matmul_nt(dv, w.w_v));
        {
            Matrix dx_attn;
            Matrix* dg = sink.wants(p + "ln_attn_g") ? &sink.param(p + "ln_attn_g", 1, d) : nullptr;
            Matrix* db = sink.wants(p + "ln_attn_b") ? &sink.param(p + "ln_attn_b", 1, d) : nullptr;
            layernorm_backward(dln1, lc.x, w.ln_attn_g, lc.ln1_mean, lc.ln1_rstd, dx_attn, dg, db);
            add_inplace(dx, dx_attn);
        }

        dh = std::move(dx);
    }

    backward_site_interventions(dh, 0, SiteKind::Embedding, ivs, sink);
    const bool want_tok = sink.wants("tok_emb");
    const bool want_pos = sink.wants("pos_emb");
    if (want_tok || want_pos) {
        Matrix* dtok = want_tok ? &sink.param("tok_emb", cfg.vocab_size, d) : nullptr;
        Matrix* dpos = want_pos ? &sink.param("pos_emb", cfg.max_seq, d) : nullptr;
        for (int t = 0; t < t_len; ++t) {
            const double* dhr = dh.data.data() + static_cast<size_t>(t) * d;
            if (dtok != nullptr) {
                double* row = dtok->data.data() + static_cast<size_t>(tokens[static_cast<size_t>(t)]) * d;
                for (int i = 0; i < d; ++i) row[i] += dhr[i];
            }
            if (dpos != nullptr) {
                double* row = dpos->data.data() + static_cast<size_t>(t) * d;
                for (int i = 0; i < d; ++i) row[i] += dhr[i];
            }
        }
    }
}

void backward_into(const Checkpoint& ckpt, std::span<const int> tokens,
                   const std::vector<Intervention>& ivs, const Matrix& dlogits,
                   const GradRequest& request, Gradients& out) {
    const ForwardCache fc = forward_full(ckpt, tokens, ivs);
    backward_with_cache(ckpt, fc, tokens, ivs, dlogits, request, out);
}

// Mean-NLL gradient seed over supervised positions.
Matrix nll_logit_grads(const Matrix& logits, std::span<const int> targets) {
    int n = 0;
    for (int y : targets) {
        if (y >= 0) n += 1;
    }
    Matrix dlogits(logits.rows, logits.cols);
    for (int t = 0; t < logits.rows; ++t) {
        const int y = targets[static_cast<size_t>(t)];
        if (y < 0) continue;
        const auto probs = softmax(logits.row(t));
        double* row = dlogits.data.data() + static_cast<size_t>(t) * dlogits.cols;
        for (int j = 0; j < dlogits.cols; ++j) row[j] = probs[static_cast<size_t>(j)] / n;
        row[y] -= 1.0 / n;
    }
    return dlogits;
}

}  // namespace

Gradients backward_from_logit_grads(const Checkpoint& ckpt, std::span<const int> tokens,
                                    const std::vector<Intervention>& interventions,
                                    const Matrix& dlogits, const GradRequest& request) {
    Gradients out;
    backward_into(ckpt, tokens, interventions, dlogits, request, out);
    // Materialize zero gradients for requested intervention values the loss
    // never reached (e.g. sites shadowed by a downstream replace).
    for (size_t idx : request.intervention_values) {
        if (out.intervention_values.count(idx) == 0 && idx < interventions.size()) {
            out.intervention_values[idx].assign(static_cast<size_t>(ckpt.config.d_model), 0.0);
        }
    }
    return out;
}

LossResult loss_and_grads(const Checkpoint& ckpt, std::span<const int> tokens,
                          std::span<const int> targets,
                          const std::vector<Intervention>& interventions,
                          const GradRequest& request) {
    const ForwardCache fc = forward_full(ckpt, tokens, interventions);
    LossResult r;
    r.loss = nll_loss(fc.logits, targets);
    const Matrix dlogits = nll_logit_grads(fc.logits, targets);
    backward_with_cache(ckpt, fc, tokens, interventions, dlogits, request, r.grads);
    for (size_t idx : request.intervention_values) {
        if (r.grads.intervention_values.count(idx) == 0 && idx < interventions.size()) {
            r.grads.intervention_values[idx].assign(static_cast<size_t>(ckpt.config.d_model), 0.0);
        }
    }
    return r;
}

Checkpoint train_toy(const Checkpoint& ckpt, const std::vector<std::vector<int>>& corpus,
                     int steps, double lr) {
    if (corpus.empty()) throw std::invalid_argument("train_toy: empty corpus");
    for (const auto& seq : corpus) {
        if (seq.size() < 2) throw std::invalid_argument("train_toy: sequences need >= 2 tokens");
    }
    Checkpoint model = ckpt;
    GradRequest req;
    req.all_params = true;

    // Plain gradient descent, one sequence per step in round-robin order.
    for (int step = 0; step < steps; ++step) {
        const auto& seq = corpus[static_cast<size_t>(step) % corpus.size()];
        std::span<const int> tokens(seq.data(), seq.size() - 1);
        const std::vector<int> targets(seq.begin() + 1, seq.end());

        Gradients grads;
        const ForwardCache fc = forward_full(model, tokens, {});
        const Matrix dlogits = nll_logit_grads(fc.logits, targets);
        backward_with_cache(model, fc, tokens, {}, dlogits, req, grads);

        for_each_tensor(model, [&](const std::string& name, Matrix& m) {
            const Matrix& g = grads.params.at(name);
            for (size_t i = 0; i < m.data.size(); ++i) m.data[i] -= lr * g.data[i];
        });
    }
    return model;
}

// ---------------------------------------------------------------------------
// Container I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'K', 'S', 'C', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

nlohmann::ordered_json config_to_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_layers"] = cfg.n_layers;
    j["n_heads"] = cfg.n_heads;
    j["d_mlp"] = cfg.d_mlp;
    j["max_seq"] = cfg.max_seq;
    j["ln_epsilon"] = cfg.ln_epsilon;
    j["seed"] = cfg.seed;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_mlp = j.at("d_mlp").get<int>();
    cfg.max_seq = j.at("max_seq").get<int>();
    cfg.ln_epsilon = j.at("ln_epsilon").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::ordered_json header;
    header["config"] = config_to_json(ckpt.config);
    auto& manifest = header["tensors"] = nlohmann::ordered_json::array();
    for_each_tensor(ckpt, [&](const std::string& name, const Matrix& m) {
        manifest.push_back({{"name", name}, {"shape", {m.rows, m.cols}}});
    });
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(kCheckpointMagic, 4);
    const uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for_each_tensor(ckpt, [&](const std::string&, const Matrix& m) {
        out.write(reinterpret_cast<const char*>(m.data.data()),
                  static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    });
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    const auto file_size = static_cast<uint64_t>(in.tellg());
    in.seekg(0);

    char magic[4];
    uint32_t version = 0;
    uint64_t header_len = 0;
    if (file_size < 16 || !in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kCheckpointVersion) {
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    }
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (16 + header_len > file_size) throw std::runtime_error("load_checkpoint: truncated header");

    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("load_checkpoint: malformed header JSON");

    const ModelConfig cfg = config_from_json(header.at("config")).validated();
    Checkpoint ckpt = init_model(cfg);  // allocates the right shapes

    const auto expected = tensor_names(cfg);
    const auto& manifest = header.at("tensors");
    if (manifest.size() != expected.size()) {
        throw std::runtime_error("load_checkpoint: tensor manifest inconsistent with config");
    }
    uint64_t payload = 0;
    for (size_t i = 0; i < expected.size(); ++i) {
        if (manifest[i].at("name").get<std::string>() != expected[i]) {
            throw std::runtime_error("load_checkpoint: unexpected tensor " +
                                     manifest[i].at("name").get<std::string>());
        }
        const auto shape = manifest[i].at("shape");
        const Matrix& m = tensor_by_name(ckpt, expected[i]);
        if (shape.size() != 2 || shape[0].get<int>() != m.rows || shape[1].get<int>() != m.cols) {
            throw std::runtime_error("load_checkpoint: shape mismatch for " + expected[i]);
        }
        payload += m.data.size() * sizeof(double);
    }
    if (16 + header_len + payload != file_size) {
        throw std::runtime_error("load_checkpoint: payload length inconsistent with manifest");
    }

    for_each_tensor(ckpt, [&](const std::string& name, Matrix& m) {
        in.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("load_checkpoint: truncated payload at " + name);
        if (!all_finite(m)) throw std::runtime_error("load_checkpoint: non-finite values in " + name);
    });
    return ckpt;
}

uint64_t checkpoint_weights_hash(const Checkpoint& ckpt) {
    uint64_t h = 0xcbf29ce484222325ull;
    for_each_tensor(ckpt, [&](const std::string&, const Matrix& m) {
        h = fnv1a64(m.data.data(), m.data.size() * sizeof(double), h);
    });
    return h;
}

}  // namespace ckedit
