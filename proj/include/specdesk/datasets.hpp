#pragma once

#include <specdesk/tokenizer.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace specdesk::datasets {

// prompt/completion pair in token ids; the completion always ends with eos
struct Example {
    std::vector<int32_t> prompt;
    std::vector<int32_t> completion;

    int total_len() const { return static_cast<int>(prompt.size() + completion.size()); }
};

struct Dataset {
    std::string task;
    std::string split;  // train / val / test
    uint64_t seed = 0;
    std::vector<Example> examples;

    int max_total_len() const;
    size_t size() const { return examples.size(); }
};

struct TaskData {
    Tokenizer tokenizer = Tokenizer::char_default();
    Dataset train, val, test;
};

struct ArithmeticSpec {
    int digits = 2;  // operand width, in [1,3]
    int steps = 3;   // chained operations, in [1,4]
};

// Left-to-right arithmetic chains: prompt "37+85*2=", completion
// "37+85=122;122*2=244; the answer is 244". Intermediate values stay in
// [0,999]. Splits are prompt-disjoint by construction.
TaskData gen_arithmetic(uint64_t seed, int n_train, int n_val, int n_test, const ArithmeticSpec& spec = {});

// Pattern completion with a known optimal continuation: copy ("abcab|" ->
// "abcab"), sorted copy ("cba>" -> "abc") and key/value recall
// ("a=3,b=7?b" -> "7").
TaskData gen_template(uint64_t seed, int n_train, int n_val, int n_test);

// One JSON object per line with string fields "prompt" and "completion".
// Malformed lines, missing fields, out-of-vocabulary symbols and pairs
// longer than max_total_len are errors naming the line number.
Dataset load_jsonl(const std::string& path, const Tokenizer& tokenizer, int max_total_len,
                   const std::string& split = "train");
void export_jsonl(const Dataset& ds, const Tokenizer& tokenizer, const std::string& path);

// Rectangular training batch. labels[i] is the token that should follow
// inputs[i]; prompt and pad positions carry kIgnoreLabel.
struct Batch {
    int rows = 0;
    int seq_len = 0;
    std::vector<int32_t> inputs;       // rows * seq_len
    std::vector<int32_t> labels;       // rows * seq_len
    std::vector<int32_t> example_ids;  // dataset index per row

    int64_t supervised() const;
};

// Deterministically shuffled epoch over fixed-shape batches. Every batch has
// seq_len() columns; the final batch may hold fewer rows.
class BatchStream {
  public:
    BatchStream(const Dataset& ds, int batch_size, int context_len, const Tokenizer& tokenizer,
                uint64_t epoch_seed);

    int seq_len() const { return seq_len_; }
    size_t batch_count() const;
    bool next(Batch& out);
    void reset(uint64_t epoch_seed);

  private:
    const Dataset* ds_;
    int batch_size_;
    int seq_len_;
    int32_t pad_;
    std::vector<int32_t> order_;
    size_t cursor_ = 0;
};

}  // namespace specdesk::datasets
