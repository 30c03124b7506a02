// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <set>

#include "ckedit/dataset.hpp"
#include "doctest.h"

using namespace ckedit;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name, const std::string& content) {
    const auto dir = fs::temp_directory_path() / "ckedit_dataset_tests";
    fs::create_directories(dir);
    const auto path = dir / name;
    std::ofstream out(path, std::ios::binary);
    out << content;
    return path;
}

std::string sample_record_line() {
    return R"({"case_id": 1, "relation": "xWant",)"
           R"( "prompt": "PersonX about to get married, as a result, PersonX wants to",)"
           R"( "subject": {"text": "PersonX about to get married,", "span": [0, 5]},)"
           R"( "target_new": "live happily ever after",)"
           R"( "paraphrase_prompts": ["Indeed PersonX about to get married, as a result, PersonX wants to"],)"
           R"( "neighborhood_prompts": ["PersonX about to get married, which means PersonX need"],)"
           R"( "sub_neighborhood_prompts": ["Alice about to get married, as a result, Alice wants to"]})";
}

}  // namespace

TEST_CASE("registry holds exactly 23 relations with the starred six") {
    const auto& registry = relation_registry();
    CHECK(registry.size() == 23);
    std::set<std::string> names;
    for (const auto& r : registry) {
        CHECK(!r.template_text.empty());
        names.insert(r.relation);
    }
    CHECK(names.size() == 23);

    const std::set<std::string> starred{"oWant", "xEffect", "xIntent", "oEffect", "oReact", "xAttr"};
    for (const auto& r : registry) {
        if (starred.count(r.relation) > 0) {
            CHECK(!r.starred_text.empty());
        } else {
            CHECK(r.starred_text.empty());
        }
    }
    CHECK(is_registered_relation("xNeed"));
    CHECK(!is_registered_relation("xFoo"));
}

TEST_CASE("rewrite_template composes prompts") {
    CHECK(rewrite_template("xNeed", "PersonX drops the cup", "fetch a towel") ==
          "PersonX drops the cup, which means PersonX need");
    // No PersonX/PersonY in either event: starred variant.
    CHECK(rewrite_template("oWant", "the cup drops", "a towel") ==
          "the cup drops, as a result, others want to");
    CHECK(rewrite_template("oWant", "PersonX drops the cup", "a towel") ==
          "PersonX drops the cup, as a result, personY want to");
    // Slotted templates cut before the target slot.
    CHECK(rewrite_template("HasSubEvent", "PersonX bakes bread", "knead the dough") ==
          "The sub event of PersonX bakes bread is to");
    CHECK_THROWS_AS(rewrite_template("unknownRel", "a", "b"), std::invalid_argument);
}

TEST_CASE("normalize_text strips markers and collapses whitespace") {
    CHECK(normalize_text("PersonX buys ___ at the store") == "PersonX buys at the store");
    CHECK(normalize_text("salt & pepper") == "salt pepper");
    CHECK(normalize_text("  spaced   out  ") == "spaced out");
}

TEST_CASE("load_records accepts the reference sample") {
    const auto path = temp_file("ok.jsonl", sample_record_line() + "\n");
    const auto records = load_records(path.string());
    REQUIRE(records.size() == 1);
    CHECK(records[0].relation == "xWant");
    CHECK(records[0].target_new == "live happily ever after");
    CHECK(records[0].subject_span_start == 0);
    CHECK(records[0].subject_span_end == 5);
}

TEST_CASE("load_records rejects bad records with line numbers") {
    auto expect_error = [](const char* name, std::string line, const char* needle) {
        const auto path = temp_file(name, sample_record_line() + "\n" + line + "\n");
        try {
            load_records(path.string());
            FAIL_CHECK("expected a validation error");
        } catch (const std::runtime_error& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 2") != std::string::npos);
            CHECK(msg.find(needle) != std::string::npos);
        }
    };

    std::string unknown = sample_record_line();
    const auto pos = unknown.find("xWant");
    unknown.replace(pos, 5, "xFoo!");
    expect_error("unknown_rel.jsonl", unknown, "relation");

    std::string bad_span = sample_record_line();
    const auto spos = bad_span.find("[0, 5]");
    bad_span.replace(spos, 6, "[5, 5]");
    expect_error("bad_span.jsonl", bad_span, "span");

    std::string empty_target = sample_record_line();
    const auto tpos = empty_target.find("live happily ever after");
    empty_target.replace(tpos, 23, "");
    expect_error("empty_target.jsonl", empty_target, "target");

    expect_error("malformed.jsonl", "{not json", "malformed");
}

TEST_CASE("record JSONL round trip") {
    const auto path = temp_file("roundtrip.jsonl", sample_record_line() + "\n");
    const auto records = load_records(path.string());
    const auto out = temp_file("roundtrip_out.jsonl", "");
    save_records(records, out.string());
    const auto again = load_records(out.string());
    REQUIRE(again.size() == records.size());
    CHECK(again[0].prompt == records[0].prompt);
    CHECK(again[0].subject == records[0].subject);
    CHECK(again[0].paraphrase_prompts == records[0].paraphrase_prompts);
}

TEST_CASE("toy corpus generation is deterministic, covering, and validator-clean") {
    const Vocabulary vocab(toy_vocabulary_tokens());
    CHECK(vocab.size() <= 512);

    const ToyCorpus a = generate_toy_corpus(5, 23, vocab);
    const ToyCorpus b = generate_toy_corpus(5, 23, vocab);
    const ToyCorpus c = generate_toy_corpus(6, 23, vocab);
    REQUIRE(a.records.size() == 23);
    CHECK(a.records[4].prompt == b.records[4].prompt);
    CHECK(a.memorization == b.memorization);

    bool any_diff = false;
    for (size_t i = 0; i < a.records.size(); ++i) {
        any_diff = any_diff || a.records[i].prompt != c.records[i].prompt;
    }
    CHECK(any_diff);

    // One record per relation at n = 23.
    std::set<std::string> relations;
    for (const auto& r : a.records) relations.insert(r.relation);
    CHECK(relations.size() == 23);

    for (const auto& r : a.records) {
        CHECK(validate_record(r).empty());
        const auto target_len = split_whitespace(r.target_new).size();
        CHECK(target_len >= 3);
        CHECK(target_len <= 6);
        CHECK(r.paraphrase_prompts.size() == 2);
        CHECK(r.neighborhood_prompts.size() == 2);
        CHECK(r.sub_neighborhood_prompts.size() == 2);
    }
    for (const auto& r : a.trace_records) {
        CHECK(validate_record(r).empty());
    }

    // Memorization sequences all end with <eot> and stay within vocab.
    for (const auto& seq : a.memorization) {
        CHECK(seq.size() >= 4);
        CHECK(seq.back() == vocab.eot_id());
        for (int id : seq) {
            CHECK(id >= 0);
            CHECK(id < vocab.size());
        }
    }

    // Round trip through the validator-backed loader.
    const auto path = (fs::temp_directory_path() / "ckedit_dataset_tests" / "toy.jsonl").string();
    save_records(a.records, path);
    CHECK(load_records(path).size() == a.records.size());

    CHECK_THROWS_AS(generate_toy_corpus(1, 0, vocab), std::invalid_argument);
    CHECK_THROWS_AS(generate_toy_corpus(1, 100000, vocab), std::invalid_argument);
}

TEST_CASE("generator refuses a vocabulary missing template words") {
    const Vocabulary tiny(std::vector<std::string>{"<unk>", "<eot>", "alpha"});
    CHECK_THROWS_AS(generate_toy_corpus(1, 5, tiny), std::invalid_argument);
}
