// SPDX-License-Identifier: Apache-2.0
//
// Batch experiment runner: trace, edit, eval, dataset-validate, toy-init.
// Machine consumption goes through files; stdout carries human-readable
// tables only. Exit codes: 0 success, 2 usage/validation, 1 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ckedit/dataset.hpp"
#include "ckedit/editor.hpp"
#include "ckedit/eval.hpp"
#include "ckedit/localization.hpp"
#include "ckedit/model.hpp"
#include "ckedit/numerics.hpp"
#include "ckedit/tokenizer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

std::string hash_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ckedit::to_hex(ckedit::fnv1a64(bytes.data(), bytes.size()));
}

// Output directories are content-addressed by the run configuration so that
// sweeps never collide; --out and --force stay out of the hash.
struct RunDir {
    fs::path dir;
    ordered_json config;
    std::vector<fs::path> artifacts;

    static RunDir open(const std::string& out_root, const std::string& command,
                       ordered_json config, bool force) {
        RunDir rd;
        rd.config = std::move(config);
        const std::string dump = rd.config.dump();
        const std::string id = ckedit::to_hex(ckedit::fnv1a64(dump.data(), dump.size()));
        rd.dir = fs::path(out_root) / (command + "-" + id);
        if (fs::exists(rd.dir)) {
            if (!force) {
                throw UsageError("output directory " + rd.dir.string() +
                                 " already exists (pass --force to overwrite)");
            }
            fs::remove_all(rd.dir);
        }
        fs::create_directories(rd.dir);
        return rd;
    }

    void add(const std::string& name, const std::string& content) {
        write_file(dir / name, content);
        artifacts.push_back(dir / name);
    }

    void note(const fs::path& path) { artifacts.push_back(path); }

    void finish(const std::string& command) {
        ordered_json manifest;
        manifest["command"] = command;
        manifest["config"] = config;
        auto& arts = manifest["artifacts"] = ordered_json::array();
        for (const auto& p : artifacts) {
            arts.push_back({{"path", fs::relative(p, dir).string()}, {"hash", hash_file(p)}});
        }
        write_file(dir / "manifest.json", manifest.dump(2) + "\n");
        std::printf("wrote %s\n", dir.string().c_str());
    }
};

void require_file(const std::string& path, const char* flag) {
    if (path.empty()) throw UsageError(std::string("missing required flag ") + flag);
    if (!fs::exists(path)) {
        throw UsageError(std::string(flag) + " path does not exist: " + path);
    }
}

// Input-loading failures are validation errors (exit 2), not runtime ones.
template <typename F>
auto load_input(F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

std::string default_vocab_path(const std::string& model_path) {
    fs::path p(model_path);
    p.replace_extension(".vocab");
    return p.string();
}

ckedit::Vocabulary load_vocab_for(const std::string& model_path, std::string vocab_flag) {
    if (vocab_flag.empty()) vocab_flag = default_vocab_path(model_path);
    require_file(vocab_flag, "--vocab");
    return ckedit::Vocabulary::load(vocab_flag);
}

std::vector<std::vector<int>> covariance_corpus_from_records(
    const ckedit::Vocabulary& vocab, const std::vector<ckedit::CKRecord>& records) {
    std::vector<std::vector<int>> corpus;
    for (const auto& r : records) {
        corpus.push_back(vocab.encode(r.prompt));
        for (const auto& p : r.neighborhood_prompts) corpus.push_back(vocab.encode(p));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// toy-init
// ---------------------------------------------------------------------------

struct ToyInitArgs {
    std::string out;
    uint64_t seed = 0;
    int records = 50;
    int train_steps = 10000;
    double lr = 0.25;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_mlp = 0;
    int max_seq = 48;
    bool force = false;
};

int cmd_toy_init(const ToyInitArgs& a) {
    ordered_json cfg;
    cfg["seed"] = a.seed;
    cfg["records"] = a.records;
    cfg["train_steps"] = a.train_steps;
    cfg["lr"] = a.lr;
    cfg["d_model"] = a.d_model;
    cfg["n_layers"] = a.n_layers;
    cfg["n_heads"] = a.n_heads;
    cfg["d_mlp"] = a.d_mlp;
    cfg["max_seq"] = a.max_seq;
    RunDir rd = RunDir::open(a.out, "toy-init", cfg, a.force);

    const ckedit::Vocabulary vocab(ckedit::toy_vocabulary_tokens());
    const ckedit::ToyCorpus corpus = ckedit::generate_toy_corpus(a.seed, a.records, vocab);

    ckedit::ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.d_model = a.d_model;
    mc.n_layers = a.n_layers;
    mc.n_heads = a.n_heads;
    mc.d_mlp = a.d_mlp;
    mc.max_seq = a.max_seq;
    mc.seed = a.seed;

    std::printf("training toy model: %d records, %zu memorization sequences, %d steps\n",
                a.records, corpus.memorization.size(), a.train_steps);
    ckedit::Checkpoint ckpt = ckedit::init_model(mc);
    ckpt = ckedit::train_toy(ckpt, corpus.memorization, a.train_steps, a.lr);

    double nll = 0.0;
    for (const auto& seq : corpus.memorization) {
        std::span<const int> tokens(seq.data(), seq.size() - 1);
        std::vector<int> targets(seq.begin() + 1, seq.end());
        nll += ckedit::nll_loss(ckedit::forward(ckpt, tokens).logits, targets);
    }
    std::printf("final mean NLL over corpus: %.6f\n", nll / corpus.memorization.size());

    ckedit::save_checkpoint(ckpt, (rd.dir / "model.ksck").string());
    rd.note(rd.dir / "model.ksck");
    vocab.save((rd.dir / "model.vocab").string());
    rd.note(rd.dir / "model.vocab");
    ckedit::save_records(corpus.records, (rd.dir / "records.jsonl").string());
    rd.note(rd.dir / "records.jsonl");
    ckedit::save_records(corpus.trace_records, (rd.dir / "trace_records.jsonl").string());
    rd.note(rd.dir / "trace_records.jsonl");
    rd.finish("toy-init");
    return 0;
}

// ---------------------------------------------------------------------------
// trace
// ---------------------------------------------------------------------------

struct TraceArgs {
    std::string model, data, out, vocab;
    uint64_t seed = 0;
    double sigma_mult = 3.0;
    int k = 3;
    int window = 1;
    int limit = 0;
    bool force = false;
};

int cmd_trace(const TraceArgs& a) {
    require_file(a.model, "--model");
    require_file(a.data, "--data");

    ordered_json cfg;
    cfg["model"] = hash_file(a.model);
    cfg["data"] = hash_file(a.data);
    cfg["seed"] = a.seed;
    cfg["sigma_mult"] = a.sigma_mult;
    cfg["k"] = a.k;
    cfg["window"] = a.window;
    cfg["limit"] = a.limit;
    RunDir rd = RunDir::open(a.out, "trace", cfg, a.force);

    const ckedit::Checkpoint ckpt = load_input([&] { return ckedit::load_checkpoint(a.model); });
    const ckedit::Vocabulary vocab = load_input([&] { return load_vocab_for(a.model, a.vocab); });
    std::vector<ckedit::CKRecord> records = load_input([&] { return ckedit::load_records(a.data); });
    if (a.limit > 0 && static_cast<int>(records.size()) > a.limit) {
        records.resize(static_cast<size_t>(a.limit));
    }

    ckedit::TraceConfig tc;
    tc.sigma_mult = a.sigma_mult;
    tc.noise_seed = a.seed;
    tc.window = a.window;
    tc.top_k = std::min(a.k, ckpt.config.n_layers);

    // relation -> kind -> per-layer mean of max-over-tokens scores + top-k hits
    struct RelationSummary {
        std::map<std::string, std::vector<double>> layer_scores;
        std::map<std::string, std::vector<int>> top_k_counts;
        int n = 0;
    };
    std::map<std::string, RelationSummary> summary;

    for (const auto& record : records) {
        const ckedit::TraceGrid grid = ckedit::trace_grid(ckpt, vocab, record, tc);
        const std::string stem = "grid_case_" + std::to_string(record.case_id);
        rd.add(stem + ".json", ckedit::trace_grid_json(grid));
        rd.add(stem + ".csv", ckedit::trace_grid_csv(grid));

        RelationSummary& rs = summary[record.relation];
        rs.n += 1;
        for (size_t ki = 0; ki < grid.kinds.size(); ++ki) {
            const std::string kind = ckedit::site_kind_name(grid.kinds[ki]);
            auto& scores = rs.layer_scores[kind];
            auto& counts = rs.top_k_counts[kind];
            scores.resize(static_cast<size_t>(grid.n_layers), 0.0);
            counts.resize(static_cast<size_t>(grid.n_layers), 0);
            for (int layer = 0; layer < grid.n_layers; ++layer) {
                double mx = 0.0;
                for (int tok = 0; tok < grid.n_tokens; ++tok) {
                    mx = std::max(mx, grid.at(static_cast<int>(ki), tok, layer));
                }
                scores[static_cast<size_t>(layer)] += mx;
            }
            for (int layer : ckedit::top_k_layers(grid, grid.kinds[ki], tc.top_k)) {
                counts[static_cast<size_t>(layer)] += 1;
            }
        }
    }

    ordered_json sj;
    for (auto& [relation, rs] : summary) {
        ordered_json entry;
        entry["records"] = rs.n;
        for (auto& [kind, scores] : rs.layer_scores) {
            for (auto& s : scores) s /= rs.n;
            entry[kind] = {{"mean_layer_score", scores},
                           {"top_k_counts", rs.top_k_counts[kind]}};
        }
        sj[relation] = std::move(entry);
    }
    rd.add("summary.json", sj.dump(2) + "\n");
    rd.finish("trace");
    std::printf("traced %zu records\n", records.size());
    return 0;
}

// ---------------------------------------------------------------------------
// edit
// ---------------------------------------------------------------------------

struct EditArgs {
    std::string model, data, out, vocab, mode = "dem", layers;
    uint64_t seed = 0;
    int k = 3;
    double mu = 1.0;
    double alpha = 0.0625;
    double beta = 1.0;
    int steps = 25;
    double step_size = 0.5;
    bool force = false;
};

std::vector<int> parse_layer_list(const std::string& s) {
    std::vector<int> layers;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) layers.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    return layers;
}

int cmd_edit(const EditArgs& a) {
    require_file(a.model, "--model");
    require_file(a.data, "--data");
    const ckedit::EditMode mode = ckedit::edit_mode_from_name(a.mode);

    ordered_json cfg;
    cfg["model"] = hash_file(a.model);
    cfg["data"] = hash_file(a.data);
    cfg["seed"] = a.seed;
    cfg["mode"] = a.mode;
    cfg["k"] = a.k;
    cfg["mu"] = a.mu;
    cfg["alpha"] = a.alpha;
    cfg["beta"] = a.beta;
    cfg["steps"] = a.steps;
    cfg["step_size"] = a.step_size;
    cfg["layers"] = a.layers;
    RunDir rd = RunDir::open(a.out, "edit", cfg, a.force);

    ckedit::Checkpoint ckpt = load_input([&] { return ckedit::load_checkpoint(a.model); });
    const ckedit::Vocabulary vocab = load_input([&] { return load_vocab_for(a.model, a.vocab); });
    const std::vector<ckedit::CKRecord> records = load_input([&] { return ckedit::load_records(a.data); });

    ckedit::EditConfig ec;
    ec.mode = mode;
    ec.k = std::min(a.k, ckpt.config.n_layers);
    ec.mu = a.mu;
    ec.opt.alpha = a.alpha;
    ec.opt.beta = a.beta;
    ec.opt.steps = a.steps;
    ec.opt.step_size = a.step_size;
    ec.covariance_corpus = covariance_corpus_from_records(vocab, records);
    if (mode == ckedit::EditMode::FixedLayer) {
        ec.fixed_layers = parse_layer_list(a.layers);
        if (ec.fixed_layers.empty()) {
            throw UsageError("--layers is required for --mode fixed-layer");
        }
    }

    for (int l = 0; l < ckpt.config.n_layers; ++l) {
        for (ckedit::SiteKind kind : {ckedit::SiteKind::Mlp, ckedit::SiteKind::Attn}) {
            ec.covariance_cache.push_back(
                ckedit::compute_covariance(ckpt, ec.covariance_corpus, l, kind, ec.mu));
        }
    }

    fs::create_directories(rd.dir / "receipts");
    for (const auto& record : records) {
        ckedit::EditConfig rc = ec;
        for (const auto& p : record.paraphrase_prompts) {
            // Paraphrases are prefix-augmented prompts; recover the prefixes.
            const auto pos = p.rfind(record.prompt);
            if (pos != std::string::npos && pos > 0) {
                std::string pref = p.substr(0, pos);
                while (!pref.empty() && pref.back() == ' ') pref.pop_back();
                rc.opt.prefixes.push_back(pref);
            }
        }
        rc.covariance_cache = ec.covariance_cache;
        auto [edited, receipt] = ckedit::apply_edit(ckpt, vocab, record, rc);
        ckpt = std::move(edited);
        ckedit::absorb_edit_keys(ec.covariance_cache, receipt);
        const fs::path rpath = rd.dir / "receipts" / ("case_" + std::to_string(record.case_id) + ".ksrc");
        ckedit::save_receipt(receipt, rpath.string());
        rd.note(rpath);
    }

    ckedit::save_checkpoint(ckpt, (rd.dir / "edited.ksck").string());
    rd.note(rd.dir / "edited.ksck");
    rd.finish("edit");
    std::printf("edited %zu records (%s mode)\n", records.size(), a.mode.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string model, original, data, receipts, out, vocab;
    uint64_t seed = 0;
    bool force = false;
};

int cmd_eval(const EvalArgs& a) {
    require_file(a.model, "--model");
    require_file(a.original, "--original");
    require_file(a.data, "--data");
    require_file(a.receipts, "--receipts");

    ordered_json cfg;
    cfg["model"] = hash_file(a.model);
    cfg["original"] = hash_file(a.original);
    cfg["data"] = hash_file(a.data);
    cfg["seed"] = a.seed;
    RunDir rd = RunDir::open(a.out, "eval", cfg, a.force);

    const ckedit::Checkpoint edited = load_input([&] { return ckedit::load_checkpoint(a.model); });
    const ckedit::Checkpoint original = load_input([&] { return ckedit::load_checkpoint(a.original); });
    const ckedit::Vocabulary vocab = load_input([&] { return load_vocab_for(a.original, a.vocab); });
    const std::vector<ckedit::CKRecord> records = load_input([&] { return ckedit::load_records(a.data); });

    std::vector<ckedit::EditReceipt> receipts;
    for (const auto& record : records) {
        const fs::path rpath =
            fs::path(a.receipts) / ("case_" + std::to_string(record.case_id) + ".ksrc");
        if (!fs::exists(rpath)) {
            throw UsageError("missing receipt for case_id " + std::to_string(record.case_id) +
                             ": " + rpath.string());
        }
        try {
            receipts.push_back(ckedit::load_receipt(rpath.string()));
        } catch (const std::exception& e) {
            throw UsageError("corrupt receipt for case_id " + std::to_string(record.case_id) +
                             ": " + e.what());
        }
    }

    const ckedit::EvalReport report = ckedit::evaluate(edited, original, vocab, records, receipts);
    rd.add("report.json", ckedit::eval_report_json(report));
    rd.add("report.csv", ckedit::eval_report_csv(report));
    rd.finish("eval");
    std::fputs(ckedit::eval_report_table(report).c_str(), stdout);
    return 0;
}

// ---------------------------------------------------------------------------
// dataset-validate
// ---------------------------------------------------------------------------

int cmd_dataset_validate(const std::string& data, bool normalize) {
    require_file(data, "--data");
    const auto records = load_input([&] { return ckedit::load_records(data, normalize); });
    std::printf("%zu records valid\n", records.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"commonsense knowledge editing experiments"};
    app.require_subcommand(1);

    ToyInitArgs toy;
    auto* toy_cmd = app.add_subcommand("toy-init", "build and train the reference toy model");
    toy_cmd->add_option("--out", toy.out, "output directory")->required();
    toy_cmd->add_option("--seed", toy.seed, "rng seed")->required();
    toy_cmd->add_option("--records", toy.records, "number of generated records");
    toy_cmd->add_option("--train-steps", toy.train_steps, "gradient descent steps");
    toy_cmd->add_option("--lr", toy.lr, "learning rate");
    toy_cmd->add_option("--d-model", toy.d_model, "model width");
    toy_cmd->add_option("--n-layers", toy.n_layers, "layer count");
    toy_cmd->add_option("--n-heads", toy.n_heads, "head count");
    toy_cmd->add_option("--d-mlp", toy.d_mlp, "mlp width (0 = 4*d_model)");
    toy_cmd->add_option("--max-seq", toy.max_seq, "maximum sequence length");
    toy_cmd->add_flag("--force", toy.force, "overwrite existing outputs");

    TraceArgs trace;
    auto* trace_cmd = app.add_subcommand("trace", "restoration tracing over records");
    trace_cmd->add_option("--model", trace.model, "checkpoint path")->required();
    trace_cmd->add_option("--data", trace.data, "records JSONL")->required();
    trace_cmd->add_option("--out", trace.out, "output directory")->required();
    trace_cmd->add_option("--seed", trace.seed, "noise seed")->required();
    trace_cmd->add_option("--sigma-mult", trace.sigma_mult, "noise std multiplier");
    trace_cmd->add_option("--k", trace.k, "top-k layers in the summary");
    trace_cmd->add_option("--window", trace.window, "restoration window");
    trace_cmd->add_option("--limit", trace.limit, "trace only the first N records");
    trace_cmd->add_option("--vocab", trace.vocab, "vocabulary path");
    trace_cmd->add_flag("--force", trace.force, "overwrite existing outputs");

    EditArgs edit;
    auto* edit_cmd = app.add_subcommand("edit", "apply knowledge edits");
    edit_cmd->add_option("--model", edit.model, "checkpoint path")->required();
    edit_cmd->add_option("--data", edit.data, "records JSONL")->required();
    edit_cmd->add_option("--out", edit.out, "output directory")->required();
    edit_cmd->add_option("--seed", edit.seed, "seed echoed into the manifest")->required();
    edit_cmd->add_option("--mode", edit.mode, "dem | fixed-layer | mlp-only | attn-only");
    edit_cmd->add_option("--k", edit.k, "layers selected per edit");
    edit_cmd->add_option("--mu", edit.mu, "covariance strength");
    edit_cmd->add_option("--alpha", edit.alpha, "KL weight");
    edit_cmd->add_option("--beta", edit.beta, "NLL weight");
    edit_cmd->add_option("--steps", edit.steps, "delta optimization steps");
    edit_cmd->add_option("--step-size", edit.step_size, "delta optimization step size");
    edit_cmd->add_option("--layers", edit.layers, "fixed layer list, e.g. 0,1,2");
    edit_cmd->add_option("--vocab", edit.vocab, "vocabulary path");
    edit_cmd->add_flag("--force", edit.force, "overwrite existing outputs");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "score an edited checkpoint");
    eval_cmd->add_option("--model", ev.model, "edited checkpoint")->required();
    eval_cmd->add_option("--original", ev.original, "original checkpoint")->required();
    eval_cmd->add_option("--data", ev.data, "records JSONL")->required();
    eval_cmd->add_option("--receipts", ev.receipts, "receipts directory")->required();
    eval_cmd->add_option("--out", ev.out, "output directory")->required();
    eval_cmd->add_option("--seed", ev.seed, "seed echoed into the manifest");
    eval_cmd->add_option("--vocab", ev.vocab, "vocabulary path");
    eval_cmd->add_flag("--force", ev.force, "overwrite existing outputs");

    std::string validate_data;
    bool validate_normalize = false;
    auto* val_cmd = app.add_subcommand("dataset-validate", "validate a records file");
    val_cmd->add_option("--data", validate_data, "records JSONL")->required();
    val_cmd->add_flag("--normalize", validate_normalize, "apply text normalization first");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (*toy_cmd) return cmd_toy_init(toy);
        if (*trace_cmd) return cmd_trace(trace);
        if (*edit_cmd) return cmd_edit(edit);
        if (*eval_cmd) return cmd_eval(ev);
        if (*val_cmd) return cmd_dataset_validate(validate_data, validate_normalize);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return 1;
    }
    return 2;
}
