#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "onset/common.hpp"
#include "onset/corpus.hpp"

namespace onset {

inline constexpr int kLabItemCount = 50;
inline constexpr int kLabStatCount = 3;  // median, min, max
inline constexpr int kLabFeatureDim = kLabItemCount * kLabStatCount;

enum class LabStat { Median = 0, Min = 1, Max = 2 };

// ---------------------------------------------------------------------------
// Value dictionary: the fixed, ordered 50-item list with synonyms,
// extraction patterns, unit conversions and plausible ranges. Shipped as an
// editable JSON data file.
// ---------------------------------------------------------------------------

struct UnitConversion {
    std::string unit;   // lowercase token, e.g. "lb"
    double factor = 1;  // canonical = raw * factor + offset
    double offset = 0;
};

struct DictItem {
    std::string name;
    std::vector<std::string> synonyms;  // lowercase; may be multi-word; empty for
                                        // the diastolic half of a paired pattern
    std::string unit;                   // canonical unit token ("" = unitless)
    std::vector<UnitConversion> conversions;
    double range_lo = 0;
    double range_hi = 0;
    double prevalence = 0;  // configured encounter prevalence (generation + ordering)
    double gen_mean = 0;
    double gen_sd = 0;
    int decimals = 1;           // rendering precision in generated notes
    std::string pair_with;      // systolic half names its diastolic partner
};

struct ValueDictionary {
    std::vector<DictItem> items;

    static ValueDictionary load(const std::string& path);
    int index_of(const std::string& name) const;    // -1 when absent
    int require(const std::string& name) const;     // throws DictionaryError
};

struct Measurement {
    int item = -1;        // index into ValueDictionary::items
    double value = 0.0;   // canonical unit

    bool operator==(const Measurement&) const = default;
};

struct ExtractionAudit {
    std::string item;
    std::string raw_span;
    double value = 0.0;
};

// Scans raw note text (pre-tokenization). Every in-range dictionary pattern
// match yields one Measurement; blood-pressure pairs yield two; out-of-range
// matches are dropped; units converted to canonical. ValueExtractor amortizes
// the pattern index across notes; the free function is a one-shot convenience.
class ValueExtractor {
  public:
    explicit ValueExtractor(const ValueDictionary& dict);
    ~ValueExtractor();
    ValueExtractor(const ValueExtractor&) = delete;
    ValueExtractor& operator=(const ValueExtractor&) = delete;

    std::vector<Measurement> run(const std::string& text,
                                 std::vector<ExtractionAudit>* audit = nullptr) const;

  private:
    struct Index;
    const ValueDictionary& dict_;
    std::unique_ptr<Index> index_;
};

std::vector<Measurement> extract_values(const std::string& text,
                                        const ValueDictionary& dict,
                                        std::vector<ExtractionAudit>* audit = nullptr);

// Converts a raw reading to a canonical-unit Measurement, applying range
// filtering. Returns false when rejected. Shared by extraction and the
// corpus generator so rendered values re-extract exactly.
bool convert_and_check(const ValueDictionary& dict, int item, double raw,
                       const std::string& unit, Measurement& out);

// ---------------------------------------------------------------------------
// Per-encounter aggregation and patient-sequence imputation.
// ---------------------------------------------------------------------------

struct EncounterLabs {
    // layout: stats[item * 3 + stat]
    std::vector<double> stats;
    std::vector<std::uint8_t> observed;  // measured in this encounter
    std::vector<std::uint8_t> filled;    // observed now or carried from before

    explicit EncounterLabs(int n_items = kLabItemCount)
        : stats(static_cast<std::size_t>(n_items) * kLabStatCount, 0.0),
          observed(n_items, 0),
          filled(n_items, 0) {}

    double& at(int item, LabStat s) { return stats[item * 3 + static_cast<int>(s)]; }
    double at(int item, LabStat s) const { return stats[item * 3 + static_cast<int>(s)]; }
};

// median = mean of the middle two at even counts
EncounterLabs aggregate_encounter(const std::vector<Measurement>& measurements,
                                  int n_items = kLabItemCount);

// Fills missing (item, stat) slots with the most recent prior observation;
// never-observed slots stay zero. Sequence must be date-sorted.
void carry_forward(std::vector<EncounterLabs>& sequence);

// ---------------------------------------------------------------------------
// Normalization. Fitted on observed (non-imputed) training values only;
// imputed-zero slots bypass normalization and stay exactly 0.
// ---------------------------------------------------------------------------

struct LabStatsEntry {
    double mean = 0.0;
    double stdev = 0.0;
    long long count = 0;
};

struct LabStats {
    std::vector<LabStatsEntry> entries;  // [item * 3 + stat]

    explicit LabStats(int n_items = kLabItemCount)
        : entries(static_cast<std::size_t>(n_items) * kLabStatCount) {}

    double normalize(double v, int item, LabStat s) const;
    std::string to_json() const;
    static LabStats from_json(const std::string& text);
};

// Accumulates observed values from the filled sequences of training examples.
class LabStatsFitter {
  public:
    explicit LabStatsFitter(int n_items = kLabItemCount)
        : n_items_(n_items),
          sum_(static_cast<std::size_t>(n_items) * kLabStatCount, 0.0),
          sumsq_(static_cast<std::size_t>(n_items) * kLabStatCount, 0.0),
          count_(static_cast<std::size_t>(n_items) * kLabStatCount, 0) {}

    void add_encounter(const EncounterLabs& labs);
    LabStats finish() const;

  private:
    int n_items_;
    std::vector<double> sum_, sumsq_;
    std::vector<long long> count_;
};

// 150-vector for one encounter: normalized where filled, zero otherwise.
std::vector<double> encounter_feature_vector(const EncounterLabs& labs,
                                             const LabStats& stats);

// Elementwise mean of per-encounter vectors across a history window.
std::vector<double> window_lab_mean(const std::vector<std::vector<double>>& vectors);

// ---------------------------------------------------------------------------
// Demographics encoding: one-hot(6) ++ one-hot(52) ++ one-hot(2) ++ age.
// Unknown category -> all-zero block.
// ---------------------------------------------------------------------------

const std::vector<std::string>& ethnicity_categories();
const std::vector<std::string>& race_categories();
const std::vector<std::string>& gender_categories();

std::vector<double> encode_demographics(const Demographics& demo);

// Per-item fraction of encounters with at least one measurement, descending.
std::vector<std::pair<std::string, double>> lab_prevalence(const Corpus& corpus,
                                                           const ValueDictionary& dict);

}  // namespace onset
