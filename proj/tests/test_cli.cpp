// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line tool: artifact layout, exit codes,
// byte-determinism, and receipt-based reverts. Each run works in a fresh
// temp directory.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ckedit/editor.hpp"
#include "ckedit/model.hpp"
#include "doctest.h"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(CKEDIT_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path find_run_dir(const fs::path& root, const std::string& command) {
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory() && e.path().filename().string().rfind(command + "-", 0) == 0) {
            return e.path();
        }
    }
    FAIL(("no run directory for " + command + " under " + root.string()).c_str());
    return {};
}

struct CliFixture {
    fs::path root;
    fs::path toy_dir;

    CliFixture() {
        root = fs::temp_directory_path() / ("ckedit_cli_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
        const std::string args =
            "toy-init --out " + (root / "toy").string() +
            " --seed 3 --records 4 --train-steps 40 --lr 0.3 --d-model 16 --n-layers 2"
            " --n-heads 2 --d-mlp 32 --max-seq 48";
        REQUIRE(run(args) == 0);
        toy_dir = find_run_dir(root / "toy", "toy-init");
    }
};

const CliFixture& fixture() {
    static CliFixture f;
    return f;
}

}  // namespace

TEST_CASE("toy-init writes the model bundle with a manifest") {
    const auto& f = fixture();
    for (const char* name : {"model.ksck", "model.vocab", "records.jsonl", "trace_records.jsonl",
                             "manifest.json"}) {
        CHECK(fs::exists(f.toy_dir / name));
    }
    const std::string manifest = slurp(f.toy_dir / "manifest.json");
    CHECK(manifest.find("\"command\": \"toy-init\"") != std::string::npos);
    CHECK(manifest.find("model.ksck") != std::string::npos);
}

TEST_CASE("dataset-validate exit codes") {
    const auto& f = fixture();
    CHECK(run("dataset-validate --data " + (f.toy_dir / "records.jsonl").string()) == 0);

    const fs::path bad = f.root / "bad.jsonl";
    std::ofstream(bad) << "{\"case_id\": 1, \"relation\": \"nope\"}\n";
    CHECK(run("dataset-validate --data " + bad.string()) == 2);
    CHECK(run("dataset-validate --data /nonexistent.jsonl") == 2);
    CHECK(run("dataset-validate") == 2);  // missing required flag
}

TEST_CASE("trace runs are deterministic byte for byte") {
    const auto& f = fixture();
    const std::string common = "trace --model " + (f.toy_dir / "model.ksck").string() +
                               " --data " + (f.toy_dir / "trace_records.jsonl").string() +
                               " --seed 5 --limit 2 --k 2";
    REQUIRE(run(common + " --out " + (f.root / "t1").string()) == 0);
    REQUIRE(run(common + " --out " + (f.root / "t2").string()) == 0);
    const fs::path d1 = find_run_dir(f.root / "t1", "trace");
    const fs::path d2 = find_run_dir(f.root / "t2", "trace");
    CHECK(d1.filename() == d2.filename());  // same config hash
    int compared = 0;
    for (const auto& e : fs::directory_iterator(d1)) {
        const auto name = e.path().filename();
        CHECK(slurp(e.path()) == slurp(d2 / name));
        compared += 1;
    }
    CHECK(compared >= 4);  // grids + summary + manifest
    CHECK(fs::exists(d1 / "grid_case_1.json"));
    CHECK(fs::exists(d1 / "grid_case_1.csv"));
    CHECK(fs::exists(d1 / "summary.json"));

    // rerunning into the same root refuses to overwrite without --force
    CHECK(run(common + " --out " + (f.root / "t1").string()) == 2);
    CHECK(run(common + " --out " + (f.root / "t1").string() + " --force") == 0);
}

TEST_CASE("edit produces receipts that revert to the original bytes") {
    const auto& f = fixture();
    const std::string cmd = "edit --model " + (f.toy_dir / "model.ksck").string() +
                            " --data " + (f.toy_dir / "records.jsonl").string() +
                            " --out " + (f.root / "e1").string() +
                            " --seed 7 --mode dem --k 2 --mu 50 --alpha 0 --steps 4";
    REQUIRE(run(cmd) == 0);
    const fs::path dir = find_run_dir(f.root / "e1", "edit");
    CHECK(fs::exists(dir / "edited.ksck"));
    for (int cid = 1; cid <= 4; ++cid) {
        CHECK(fs::exists(dir / "receipts" / ("case_" + std::to_string(cid) + ".ksrc")));
    }

    // revert edits in reverse order; the original checkpoint bytes come back
    ckedit::Checkpoint ckpt = ckedit::load_checkpoint((dir / "edited.ksck").string());
    for (int cid = 4; cid >= 1; --cid) {
        const auto receipt = ckedit::load_receipt(
            (dir / "receipts" / ("case_" + std::to_string(cid) + ".ksrc")).string());
        ckpt = ckedit::revert_edit(ckpt, receipt);
    }
    const fs::path reverted = f.root / "reverted.ksck";
    ckedit::save_checkpoint(ckpt, reverted.string());
    CHECK(slurp(reverted) == slurp(f.toy_dir / "model.ksck"));

    // fixed-layer mode wiring and the unknown-mode exit code
    CHECK(run("edit --model " + (f.toy_dir / "model.ksck").string() + " --data " +
              (f.toy_dir / "records.jsonl").string() + " --out " + (f.root / "e2").string() +
              " --seed 7 --mode fixed-layer --layers 0,1 --mu 50 --alpha 0 --steps 2") == 0);
    CHECK(run("edit --model " + (f.toy_dir / "model.ksck").string() + " --data " +
              (f.toy_dir / "records.jsonl").string() + " --out " + (f.root / "e3").string() +
              " --seed 7 --mode bogus") == 2);
    CHECK(run("edit --model " + (f.toy_dir / "model.ksck").string() + " --data " +
              (f.toy_dir / "records.jsonl").string() + " --out " + (f.root / "e4").string() +
              " --seed 7 --mode fixed-layer") == 2);  // missing --layers
}

TEST_CASE("eval writes reports and prints the metric table") {
    const auto& f = fixture();
    const fs::path edit_dir = find_run_dir(f.root / "e1", "edit");
    const std::string cmd = "eval --model " + (edit_dir / "edited.ksck").string() +
                            " --original " + (f.toy_dir / "model.ksck").string() +
                            " --data " + (f.toy_dir / "records.jsonl").string() +
                            " --receipts " + (edit_dir / "receipts").string() +
                            " --vocab " + (f.toy_dir / "model.vocab").string() +
                            " --out " + (f.root / "v1").string();
    REQUIRE(run(cmd) == 0);
    const fs::path dir = find_run_dir(f.root / "v1", "eval");
    CHECK(fs::exists(dir / "report.json"));
    CHECK(fs::exists(dir / "report.csv"));
    const std::string report = slurp(dir / "report.json");
    CHECK(report.find("\"efficacy\"") != std::string::npos);

    // stdout carries the table
    const std::string out_file = (f.root / "eval_stdout.txt").string();
    const std::string cmd2 = std::string(CKEDIT_BIN) + " eval --model " +
                             (edit_dir / "edited.ksck").string() + " --original " +
                             (f.toy_dir / "model.ksck").string() + " --data " +
                             (f.toy_dir / "records.jsonl").string() + " --receipts " +
                             (edit_dir / "receipts").string() + " --vocab " +
                             (f.toy_dir / "model.vocab").string() + " --out " +
                             (f.root / "v2").string() + " > " + out_file + " 2>/dev/null";
    REQUIRE(WEXITSTATUS(std::system(cmd2.c_str())) == 0);
    const std::string table = slurp(out_file);
    CHECK(table.find("efficacy") != std::string::npos);
    CHECK(table.find("specificity") != std::string::npos);

    // corrupt receipt: exit 2 naming the case
    const fs::path broken_dir = f.root / "broken_receipts";
    fs::create_directories(broken_dir);
    for (int cid = 1; cid <= 4; ++cid) {
        fs::copy_file(edit_dir / "receipts" / ("case_" + std::to_string(cid) + ".ksrc"),
                      broken_dir / ("case_" + std::to_string(cid) + ".ksrc"),
                      fs::copy_options::overwrite_existing);
    }
    std::ofstream(broken_dir / "case_2.ksrc", std::ios::binary) << "garbage";
    const std::string err_file = (f.root / "eval_stderr.txt").string();
    const std::string cmd3 = std::string(CKEDIT_BIN) + " eval --model " +
                             (edit_dir / "edited.ksck").string() + " --original " +
                             (f.toy_dir / "model.ksck").string() + " --data " +
                             (f.toy_dir / "records.jsonl").string() + " --receipts " +
                             broken_dir.string() + " --vocab " +
                             (f.toy_dir / "model.vocab").string() + " --out " +
                             (f.root / "v3").string() + " >/dev/null 2> " + err_file;
    CHECK(WEXITSTATUS(std::system(cmd3.c_str())) == 2);
    CHECK(slurp(err_file).find("case_id 2") != std::string::npos);
}

TEST_CASE("missing flags name themselves in usage errors") {
    const auto& f = fixture();
    const std::string err_file = (f.root / "usage_stderr.txt").string();
    const std::string cmd = std::string(CKEDIT_BIN) + " trace --model " +
                            (f.toy_dir / "model.ksck").string() + " --out " +
                            (f.root / "t9").string() + " --seed 1 >/dev/null 2> " + err_file;
    CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 2);
    CHECK(slurp(err_file).find("--data") != std::string::npos);
}
