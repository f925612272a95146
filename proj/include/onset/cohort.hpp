#pragma once

#include <unordered_map>

#include "onset/corpus.hpp"

namespace onset {

// Fixed month-to-day mapping: 12mo history=365d, 3mo gap=91d, 6mo
// prediction=183d, 3mo slide=91d, 2mo minimum prediction span=61d.
struct WindowConfig {
    int history_days = 365;
    int gap_days = 91;
    int prediction_days = 183;
    int slide_days = 91;
    int min_history_encounters = 2;
    int min_prediction_encounters = 2;
    int min_prediction_span_days = 61;

    void validate() const;  // throws ConfigError naming the field
};

struct TargetCodeMap {
    CodeSets sets;  // per-disease code sets, indexed by Disease
    std::unordered_map<std::string, unsigned> code_mask;  // code -> disease bitmask

    static TargetCodeMap load(const std::string& path);

    // bit d set when the code belongs to disease d; 0 for unknown codes
    unsigned mask_for(const std::string& code) const {
        auto it = code_mask.find(code);
        return it == code_mask.end() ? 0u : it->second;
    }
};

// One windowed instance. History covers [anchor-365, anchor); labels come
// from [anchor+91, anchor+274); masks[d] is false when the patient carried a
// code for d before anchor+91.
struct Example {
    std::string patient_id;
    int patient_index = -1;   // into Corpus::patients
    Date anchor;
    std::vector<int> history;  // encounter indices, date-ascending
    std::array<std::uint8_t, kNumDiseases> labels{};
    std::array<std::uint8_t, kNumDiseases> masks{};

    bool operator==(const Example&) const = default;
};

// Anchor grid: first encounter date + history_days, advancing by slide_days.
// An anchor survives iff >=2 history encounters, >=2 prediction encounters,
// and the prediction encounters span >= 61 days. All intervals half-open.
std::vector<Date> enumerate_windows(const Patient& patient, const WindowConfig& wc);

void label_and_mask(const Patient& patient, Date anchor, const WindowConfig& wc,
                    const TargetCodeMap& tm,
                    std::array<std::uint8_t, kNumDiseases>& labels,
                    std::array<std::uint8_t, kNumDiseases>& masks);

// All-masks-false examples are dropped.
std::vector<Example> build_examples(const Corpus& corpus, const WindowConfig& wc,
                                    const TargetCodeMap& tm);

enum class Split { Train = 0, Val = 1, Test = 2 };
const char* split_name(Split s);

// stable hash of (patient_id, seed) cut at 0.7 / 0.8 for a 7:1:2 ratio
Split split_of(const std::string& patient_id, u64 seed);

struct SplitExamples {
    std::vector<Example> train, val, test;
};

SplitExamples split_by_patient(const std::vector<Example>& examples, u64 seed);

// JSON Lines: patient_id, anchor, encounter_ids, labels, masks.
void save_examples(const std::string& path, const Corpus& corpus,
                   const std::vector<Example>& examples,
                   const std::string& config_hash = "");
std::vector<Example> load_examples(const std::string& path, const Corpus& corpus);

}  // namespace onset
