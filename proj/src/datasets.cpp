#include <specdesk/datasets.hpp>
#include <specdesk/rng.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <functional>
#include <iostream>
#include <stdexcept>
#include <unordered_set>

namespace specdesk::datasets {

int Dataset::max_total_len() const {
    int m = 0;
    for (const auto& e : examples) {
        m = std::max(m, e.total_len());
    }
    return m;
}

namespace {

struct TextPair {
    std::string prompt, completion;
};

Example to_example(const TextPair& p, const Tokenizer& tok) {
    Example e;
    e.prompt = tok.encode(p.prompt);
    e.completion = tok.encode(p.completion);
    e.completion.push_back(tok.eos_id());
    if (e.prompt.empty()) {
        throw std::invalid_argument("dataset: empty prompt in example '" + p.completion + "'");
    }
    return e;
}

// Draw unique-prompt examples from one stream and split them in order, so the
// train/val/test prompt sets are disjoint by construction.
TaskData assemble(const std::string& task, uint64_t seed, int n_train, int n_val, int n_test,
                  Rng& rng, const std::function<TextPair(Rng&)>& draw) {
    TaskData data{Tokenizer::char_default(), {}, {}, {}};
    const size_t total = static_cast<size_t>(n_train) + n_val + n_test;
    std::unordered_set<std::string> seen;
    std::vector<TextPair> pairs;
    pairs.reserve(total);
    size_t attempts = 0;
    const size_t max_attempts = total * 1000 + 1000;
    while (pairs.size() < total) {
        if (++attempts > max_attempts) {
            throw std::runtime_error("dataset: task '" + task + "' cannot produce " +
                                     std::to_string(total) + " distinct prompts");
        }
        TextPair p = draw(rng);
        if (seen.insert(p.prompt).second) {
            pairs.push_back(std::move(p));
        }
    }
    auto fill = [&](Dataset& ds, const std::string& split, size_t begin, size_t count) {
        ds.task = task;
        ds.split = split;
        ds.seed = seed;
        ds.examples.reserve(count);
        for (size_t i = begin; i < begin + count; ++i) {
            ds.examples.push_back(to_example(pairs[i], data.tokenizer));
        }
    };
    fill(data.train, "train", 0, n_train);
    fill(data.val, "val", n_train, n_val);
    fill(data.test, "test", static_cast<size_t>(n_train) + n_val, n_test);
    return data;
}

}  // namespace

TaskData gen_arithmetic(uint64_t seed, int n_train, int n_val, int n_test, const ArithmeticSpec& spec) {
    if (spec.digits < 1 || spec.digits > 3) {
        throw std::invalid_argument("gen_arithmetic: digits must be in [1,3], got " + std::to_string(spec.digits));
    }
    if (spec.steps < 1 || spec.steps > 4) {
        throw std::invalid_argument("gen_arithmetic: steps must be in [1,4], got " + std::to_string(spec.steps));
    }
    const int lo = spec.digits == 1 ? 2 : (spec.digits == 2 ? 10 : 100);
    const int hi = spec.digits == 1 ? 9 : (spec.digits == 2 ? 99 : 999);
    Rng rng(seed);
    auto draw = [lo, hi, steps = spec.steps](Rng& r) {
        int acc = lo + static_cast<int>(r.below(hi - lo + 1));
        std::string expr = std::to_string(acc);
        std::string chain;
        for (int s = 0; s < steps; ++s) {
            // keep the running value inside [0, 999]
            char op = 0;
            int v = 0, next = 0;
            for (;;) {
                const int pick = static_cast<int>(r.below(3));
                if (pick == 0) {
                    v = lo + static_cast<int>(r.below(hi - lo + 1));
                    next = acc + v;
                    if (next <= 999) {
                        op = '+';
                        break;
                    }
                } else if (pick == 1) {
                    v = lo + static_cast<int>(r.below(hi - lo + 1));
                    next = acc - v;
                    if (next >= 0) {
                        op = '-';
                        break;
                    }
                } else {
                    v = 2 + static_cast<int>(r.below(8));
                    next = acc * v;
                    if (next <= 999) {
                        op = '*';
                        break;
                    }
                }
            }
            expr += op + std::to_string(v);
            if (s > 0) {
                chain += ';';
            }
            chain += std::to_string(acc) + op + std::to_string(v) + "=" + std::to_string(next);
            acc = next;
        }
        // a random speaker name: unpredictable text mixed into the easy glue
        std::string name;
        const int name_len = 3 + static_cast<int>(r.below(3));
        for (int i = 0; i < name_len; ++i) {
            name += static_cast<char>('a' + r.below(26));
        }
        TextPair p;
        p.prompt = expr + "=";
        p.completion = chain + "; " + name + " says the answer is " + std::to_string(acc);
        return p;
    };
    return assemble("arithmetic", seed, n_train, n_val, n_test, rng, draw);
}

TaskData gen_template(uint64_t seed, int n_train, int n_val, int n_test) {
    Rng rng(seed);
    auto draw = [](Rng& r) {
        TextPair p;
        const int style = static_cast<int>(r.below(3));
        if (style == 0 || style == 1) {
            const int len = 3 + static_cast<int>(r.below(4));
            std::string s;
            for (int i = 0; i < len; ++i) {
                s += static_cast<char>('a' + r.below(10));
            }
            if (style == 0) {
                p.prompt = s + "|";
                p.completion = s;
            } else {
                std::string sorted = s;
                std::sort(sorted.begin(), sorted.end());
                p.prompt = s + ">";
                p.completion = sorted;
            }
        } else {
            // key/value recall over distinct keys
            const int pairs = 3;
            std::string keys = "abcdefghij";
            for (int i = 0; i < pairs; ++i) {
                std::swap(keys[i], keys[i + r.below(keys.size() - i)]);
            }
            std::string vals;
            for (int i = 0; i < pairs; ++i) {
                vals += static_cast<char>('0' + r.below(10));
            }
            const int q = static_cast<int>(r.below(pairs));
            for (int i = 0; i < pairs; ++i) {
                if (i > 0) p.prompt += ',';
                p.prompt += keys[i];
                p.prompt += '=';
                p.prompt += vals[i];
            }
            p.prompt += '?';
            p.prompt += keys[q];
            p.completion = std::string(1, vals[q]);
        }
        return p;
    };
    return assemble("template", seed, n_train, n_val, n_test, rng, draw);
}

Dataset load_jsonl(const std::string& path, const Tokenizer& tokenizer, int max_total_len,
                   const std::string& split) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_jsonl: cannot open '" + path + "'");
    }
    Dataset ds;
    ds.task = "jsonl:" + path;
    ds.split = split;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const std::string where = path + ":" + std::to_string(line_no);
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object()) {
            throw std::runtime_error("load_jsonl: " + where + ": malformed JSON line");
        }
        if (!rec.contains("prompt") || !rec["prompt"].is_string() || !rec.contains("completion") ||
            !rec["completion"].is_string()) {
            throw std::runtime_error("load_jsonl: " + where + ": missing string field 'prompt' or 'completion'");
        }
        TextPair p{rec["prompt"].get<std::string>(), rec["completion"].get<std::string>()};
        Example e;
        try {
            e = to_example(p, tokenizer);
        } catch (const std::exception& ex) {
            throw std::runtime_error("load_jsonl: " + where + ": " + ex.what());
        }
        if (max_total_len > 0 && e.total_len() > max_total_len) {
            throw std::runtime_error("load_jsonl: " + where + ": example length " +
                                     std::to_string(e.total_len()) + " exceeds limit " +
                                     std::to_string(max_total_len));
        }
        ds.examples.push_back(std::move(e));
    }
    if (ds.examples.empty()) {
        std::cerr << "load_jsonl: warning: '" << path << "' holds no examples\n";
    }
    return ds;
}

void export_jsonl(const Dataset& ds, const Tokenizer& tokenizer, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("export_jsonl: cannot open '" + path + "' for writing");
    }
    for (const auto& e : ds.examples) {
        nlohmann::json rec;
        rec["prompt"] = tokenizer.decode(e.prompt);
        rec["completion"] = tokenizer.decode(e.completion);
        out << rec.dump() << "\n";
    }
}

int64_t Batch::supervised() const {
    int64_t n = 0;
    for (int32_t l : labels) {
        n += l != kIgnoreLabel;
    }
    return n;
}

BatchStream::BatchStream(const Dataset& ds, int batch_size, int context_len, const Tokenizer& tokenizer,
                         uint64_t epoch_seed)
    : ds_(&ds), batch_size_(batch_size), pad_(tokenizer.pad_id()) {
    if (batch_size < 1) {
        throw std::invalid_argument("batchify: batch_size must be >= 1");
    }
    int longest = 0;
    for (size_t i = 0; i < ds.examples.size(); ++i) {
        const auto& e = ds.examples[i];
        if (e.completion.empty()) {
            throw std::invalid_argument("batchify: example " + std::to_string(i) + " has empty completion");
        }
        if (e.total_len() - 1 > context_len) {
            throw std::invalid_argument("batchify: example " + std::to_string(i) + " needs " +
                                        std::to_string(e.total_len() - 1) + " positions but context is " +
                                        std::to_string(context_len));
        }
        longest = std::max(longest, e.total_len());
    }
    seq_len_ = std::max(1, longest - 1);
    reset(epoch_seed);
}

size_t BatchStream::batch_count() const {
    return (order_.size() + batch_size_ - 1) / batch_size_;
}

void BatchStream::reset(uint64_t epoch_seed) {
    order_.resize(ds_->examples.size());
    for (size_t i = 0; i < order_.size(); ++i) {
        order_[i] = static_cast<int32_t>(i);
    }
    Rng rng(epoch_seed);
    rng.shuffle(order_);
    cursor_ = 0;
}

bool BatchStream::next(Batch& out) {
    if (cursor_ >= order_.size()) {
        return false;
    }
    const int rows = static_cast<int>(std::min<size_t>(batch_size_, order_.size() - cursor_));
    out.rows = rows;
    out.seq_len = seq_len_;
    out.inputs.assign(static_cast<size_t>(rows) * seq_len_, pad_);
    out.labels.assign(static_cast<size_t>(rows) * seq_len_, kIgnoreLabel);
    out.example_ids.resize(rows);
    for (int r = 0; r < rows; ++r) {
        const int32_t idx = order_[cursor_ + r];
        out.example_ids[r] = idx;
        const auto& e = ds_->examples[idx];
        std::vector<int32_t> full = e.prompt;
        full.insert(full.end(), e.completion.begin(), e.completion.end());
        const int T = static_cast<int>(full.size());
        const int plen = static_cast<int>(e.prompt.size());
        for (int t = 0; t < T - 1; ++t) {
            out.inputs[static_cast<size_t>(r) * seq_len_ + t] = full[t];
            // positions that predict prompt tokens stay ignored
            if (t >= plen - 1) {
                out.labels[static_cast<size_t>(r) * seq_len_ + t] = full[t + 1];
            }
        }
    }
    cursor_ += rows;
    return true;
}

}  // namespace specdesk::datasets
