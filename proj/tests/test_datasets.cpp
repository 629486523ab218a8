#include <doctest.h>

#include <specdesk/datasets.hpp>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <string>

using namespace specdesk::datasets;

namespace {

// independent left-to-right evaluator for the arithmetic task
long eval_expr(const std::string& expr, std::vector<long>* states = nullptr) {
    size_t i = 0;
    auto read_num = [&]() {
        long v = 0;
        REQUIRE(i < expr.size());
        REQUIRE(isdigit(expr[i]));
        while (i < expr.size() && isdigit(expr[i])) {
            v = v * 10 + (expr[i] - '0');
            ++i;
        }
        return v;
    };
    long acc = read_num();
    while (i < expr.size() && expr[i] != '=') {
        const char op = expr[i++];
        const long v = read_num();
        if (op == '+') acc += v;
        else if (op == '-') acc -= v;
        else if (op == '*') acc *= v;
        else FAIL("unexpected operator ", op);
        if (states) states->push_back(acc);
    }
    return acc;
}

std::string temp_path(const char* name) {
    return std::string("/tmp/specdesk_test_") + name;
}

}  // namespace

TEST_CASE("arithmetic generation is deterministic") {
    auto a = gen_arithmetic(42, 20, 5, 5);
    auto b = gen_arithmetic(42, 20, 5, 5);
    REQUIRE(a.train.size() == 20);
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train.examples[i].prompt == b.train.examples[i].prompt);
        CHECK(a.train.examples[i].completion == b.train.examples[i].completion);
    }
    auto c = gen_arithmetic(43, 20, 5, 5);
    CHECK(a.train.examples[0].prompt != c.train.examples[0].prompt);
}

TEST_CASE("arithmetic completions re-verify under an expression evaluator") {
    auto data = gen_arithmetic(7, 60, 10, 10, {2, 3});
    const auto& tok = data.tokenizer;
    for (const auto* ds : {&data.train, &data.val, &data.test}) {
        for (const auto& e : ds->examples) {
            const std::string prompt = tok.decode(e.prompt);
            const std::string completion = tok.decode(e.completion);
            REQUIRE(prompt.back() == '=');

            std::vector<long> states;
            const long answer = eval_expr(prompt.substr(0, prompt.size() - 1), &states);

            // completion: "a<op>b=c;c<op>d=e; <name> says the answer is N"
            const std::string marker = " says the answer is ";
            const auto marker_at = completion.rfind(marker);
            REQUIRE(marker_at != std::string::npos);
            CHECK(std::stol(completion.substr(marker_at + marker.size())) == answer);
            const auto name_at = completion.rfind("; ", marker_at);
            REQUIRE(name_at != std::string::npos);
            const std::string name = completion.substr(name_at + 2, marker_at - name_at - 2);
            CHECK(name.size() >= 3);
            CHECK(name.size() <= 5);
            for (char c : name) {
                CHECK(std::islower(static_cast<unsigned char>(c)));
            }

            std::string chain = completion.substr(0, name_at);
            size_t start = 0;
            size_t step = 0;
            while (start < chain.size()) {
                size_t end = chain.find(';', start);
                if (end == std::string::npos) end = chain.size();
                const std::string part = chain.substr(start, end - start);
                const auto eq = part.find('=');
                REQUIRE(eq != std::string::npos);
                CHECK(eval_expr(part.substr(0, eq)) == std::stol(part.substr(eq + 1)));
                REQUIRE(step < states.size());
                CHECK(std::stol(part.substr(eq + 1)) == states[step]);
                ++step;
                start = end + 1;
            }
            CHECK(step == states.size());
        }
    }
}

TEST_CASE("generated text stays inside the tokenizer vocabulary") {
    auto data = gen_arithmetic(3, 30, 5, 5);
    for (const auto& e : data.train.examples) {
        // decode -> encode is the identity when every symbol is in-vocab
        CHECK(data.tokenizer.encode(data.tokenizer.decode(e.prompt)) == e.prompt);
    }
    auto tpl = gen_template(3, 30, 5, 5);
    for (const auto& e : tpl.train.examples) {
        CHECK(tpl.tokenizer.encode(tpl.tokenizer.decode(e.prompt)) == e.prompt);
    }
}

TEST_CASE("template completions are the known-optimal continuations") {
    auto data = gen_template(11, 80, 10, 10);
    const auto& tok = data.tokenizer;
    int copies = 0, sorts = 0, recalls = 0;
    for (const auto& e : data.train.examples) {
        const std::string prompt = tok.decode(e.prompt);
        const std::string completion = tok.decode(e.completion);
        const auto qm = prompt.find('?');
        const char tag = prompt.back();
        std::string body = prompt.substr(0, prompt.size() - 1);
        if (qm == std::string::npos && tag == '|') {
            CHECK(completion == body);
            ++copies;
        } else if (qm == std::string::npos && tag == '>') {
            std::string sorted = body;
            std::sort(sorted.begin(), sorted.end());
            CHECK(completion == sorted);
            ++sorts;
        } else {
            // key/value recall: "a=3,b=7,c=2?b"
            REQUIRE(qm != std::string::npos);
            const char key = prompt[qm + 1];
            std::string found;
            for (size_t i = 0; i + 2 < qm; i += 4) {
                if (prompt[i] == key) {
                    found = std::string(1, prompt[i + 2]);
                }
            }
            CHECK(completion == found);
            ++recalls;
        }
    }
    CHECK(copies > 0);
    CHECK(sorts > 0);
    CHECK(recalls > 0);
}

TEST_CASE("splits are prompt-disjoint") {
    auto data = gen_arithmetic(5, 50, 20, 20);
    auto key = [&](const Example& e) { return data.tokenizer.decode(e.prompt); };
    std::set<std::string> train, val, test;
    for (const auto& e : data.train.examples) train.insert(key(e));
    for (const auto& e : data.val.examples) val.insert(key(e));
    for (const auto& e : data.test.examples) test.insert(key(e));
    CHECK(train.size() == 50);
    for (const auto& p : val) CHECK(train.count(p) == 0);
    for (const auto& p : test) {
        CHECK(train.count(p) == 0);
        CHECK(val.count(p) == 0);
    }
}

TEST_CASE("jsonl round trip preserves token ids") {
    auto data = gen_arithmetic(9, 12, 2, 2);
    const std::string path = temp_path("roundtrip.jsonl");
    export_jsonl(data.train, data.tokenizer, path);
    auto loaded = load_jsonl(path, data.tokenizer, 0);
    REQUIRE(loaded.size() == data.train.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded.examples[i].prompt == data.train.examples[i].prompt);
        CHECK(loaded.examples[i].completion == data.train.examples[i].completion);
    }
    std::remove(path.c_str());
}

TEST_CASE("jsonl errors carry line numbers") {
    const std::string path = temp_path("bad.jsonl");
    auto tok = Tokenizer::char_default();
    {
        std::ofstream out(path);
        out << R"({"prompt": "1+1=", "completion": "2"})" << "\n";
        out << "not json at all\n";
    }
    CHECK_THROWS_WITH_AS(load_jsonl(path, tok, 0), doctest::Contains(":2"), std::runtime_error);
    {
        std::ofstream out(path);
        out << R"({"prompt": "1+1="})" << "\n";
    }
    CHECK_THROWS_WITH_AS(load_jsonl(path, tok, 0), doctest::Contains("completion"), std::runtime_error);
    {
        std::ofstream out(path);
        out << R"({"prompt": "ok=", "completion": "fine"})" << "\n";
        out << R"({"prompt": "toolong=", "completion": "aaaaaaaaaaaaaaaaaaaa"})" << "\n";
    }
    CHECK_THROWS_WITH_AS(load_jsonl(path, tok, 16), doctest::Contains(":2"), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("empty jsonl loads as an empty dataset") {
    const std::string path = temp_path("empty.jsonl");
    std::ofstream(path).close();
    auto tok = Tokenizer::char_default();
    auto ds = load_jsonl(path, tok, 0);
    CHECK(ds.size() == 0);
    std::remove(path.c_str());
}

TEST_CASE("batchify: one example supervises exactly the completion") {
    auto data = gen_arithmetic(13, 1, 1, 1);
    BatchStream stream(data.train, 1, 128, data.tokenizer, 0);
    Batch b;
    REQUIRE(stream.next(b));
    const auto& e = data.train.examples[0];
    CHECK(b.supervised() == static_cast<int64_t>(e.completion.size()));
    CHECK_FALSE(stream.next(b));

    // labels are the inputs shifted by one over the supervised span
    std::vector<int32_t> full = e.prompt;
    full.insert(full.end(), e.completion.begin(), e.completion.end());
    for (int t = 0; t < b.seq_len; ++t) {
        const int32_t label = b.labels[t];
        if (label != kIgnoreLabel) {
            CHECK(label == full[t + 1]);
        }
    }
}

TEST_CASE("batchify: same epoch seed gives identical batch order") {
    auto data = gen_arithmetic(17, 40, 2, 2);
    BatchStream a(data.train, 8, 128, data.tokenizer, 5);
    BatchStream b(data.train, 8, 128, data.tokenizer, 5);
    Batch ba, bb;
    while (a.next(ba)) {
        REQUIRE(b.next(bb));
        CHECK(ba.example_ids == bb.example_ids);
        CHECK(ba.inputs == bb.inputs);
    }
    BatchStream c(data.train, 8, 128, data.tokenizer, 6);
    Batch bc;
    REQUIRE(c.next(bc));
    BatchStream d(data.train, 8, 128, data.tokenizer, 5);
    Batch bd;
    REQUIRE(d.next(bd));
    CHECK(bc.example_ids != bd.example_ids);
}

TEST_CASE("batchify: supervised token count matches completion lengths") {
    auto data = gen_arithmetic(21, 33, 2, 2);
    int64_t want = 0;
    for (const auto& e : data.train.examples) {
        want += static_cast<int64_t>(e.completion.size());
    }
    BatchStream stream(data.train, 8, 128, data.tokenizer, 1);
    int64_t got = 0;
    Batch b;
    size_t batches = 0;
    while (stream.next(b)) {
        got += b.supervised();
        ++batches;
        for (int r = 0; r < b.rows; ++r) {
            for (int t = 0; t < b.seq_len; ++t) {
                const int32_t label = b.labels[static_cast<size_t>(r) * b.seq_len + t];
                if (label == kIgnoreLabel) continue;
                // no supervised label at a pad position
                CHECK(b.inputs[static_cast<size_t>(r) * b.seq_len + t] != data.tokenizer.pad_id());
            }
        }
    }
    CHECK(got == want);
    CHECK(batches == stream.batch_count());
}

TEST_CASE("batchify rejects examples longer than the context") {
    auto data = gen_arithmetic(25, 4, 1, 1);
    CHECK_THROWS_WITH_AS(BatchStream(data.train, 2, 8, data.tokenizer, 0), doctest::Contains("context"),
                         std::invalid_argument);
}
