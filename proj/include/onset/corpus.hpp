#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "onset/common.hpp"

namespace onset {

struct ValueDictionary;  // values.hpp

enum class Disease { Chf = 0, Kidney = 1, Stroke = 2 };
inline constexpr int kNumDiseases = 3;
const char* disease_name(Disease d);
const char* disease_name(int d);

/// One-hot dimensionality of the demographics block: 6 + 52 + 2 categories
/// plus age in years = 61 features.
inline constexpr int kEthnicityCount = 6;
inline constexpr int kRaceCount = 52;
inline constexpr int kGenderCount = 2;
inline constexpr int kDemographicDim = kEthnicityCount + kRaceCount + kGenderCount + 1;

struct Demographics {
    // empty string = unknown; encoded as an all-zero one-hot block
    std::string ethnicity;
    std::string race;
    std::string gender;
    double age = 0.0;

    bool operator==(const Demographics&) const = default;
};

struct Encounter {
    std::string encounter_id;
    Date date;
    std::string note;
    std::vector<std::string> codes;  // ICD-10, kept sorted

    bool operator==(const Encounter&) const = default;
};

// letter + two digits + optional dot suffix, e.g. "I50.9", "N18", "S93.401"
bool valid_icd10(const std::string& code);

struct Patient {
    std::string patient_id;
    Demographics demographics;
    std::vector<Encounter> encounters;  // strictly date-ascending, ties by id

    bool operator==(const Patient&) const = default;
};

struct Corpus {
    std::vector<Patient> patients;

    bool operator==(const Corpus&) const = default;
};

// ---------------------------------------------------------------------------
// Synthetic corpus generation. The generator plants learnable structure:
// future-positive patients get target codes in late encounters, elevated
// signal-token frequency and shifted lab values in earlier notes;
// future-negative patients mention signal tokens only under negation.
// ---------------------------------------------------------------------------

struct GeneratorConfig {
    int n_patients = 0;
    Date date_start;
    Date date_end;
    std::array<double, kNumDiseases> prevalence{};
    std::array<std::vector<std::string>, kNumDiseases> signal_tokens;
    double negated_signal_rate = 0.0;
    // per disease: (dictionary item name, additive mean offset)
    std::array<std::vector<std::pair<std::string, double>>, kNumDiseases> lab_shift;
    int notes_per_patient_min = 0;
    int notes_per_patient_max = 0;
    int words_per_note_min = 0;
    int words_per_note_max = 0;
    u64 seed = 0;

    // shaping knobs beyond the planted-signal contract
    double signal_rate = 2.0;           // mean plain signal mentions per positive note
    double silent_positive_rate = 0.05; // positives with labs shifted but no text signal
    double lab_mention_rate = 1.0;      // scale on per-item mention prevalence
    double benign_code_rate = 0.6;      // encounters carrying incidental ICD-10 codes
    double unknown_demo_rate = 0.1;

    void validate() const;  // throws ConfigError naming the bad field
};

Corpus generate_corpus(const GeneratorConfig& cfg, const ValueDictionary& dict);

// JSON Lines, one patient per line. load(save(c)) == c.
void save_corpus(const Corpus& corpus, const std::string& path,
                 const std::string& config_hash = "");
Corpus load_corpus(const std::string& path);
std::string corpus_to_jsonl(const Corpus& corpus);

// ---------------------------------------------------------------------------
// Corpus statistics: note counts, log-scale note length histogram,
// demographic distributions, per-disease class counts.
// ---------------------------------------------------------------------------

struct StatsReport {
    int n_patients = 0;
    int n_notes = 0;
    double mean_words_per_note = 0.0;
    std::map<int, int> notes_per_patient;        // note count -> patients
    std::map<int, int> words_log2_hist;          // bin k = [2^k, 2^(k+1)) -> notes
    std::map<std::string, int> ethnicity_counts; // "" bucket = unknown
    std::map<std::string, int> race_counts;
    std::map<std::string, int> gender_counts;
    std::array<int, kNumDiseases> class_counts{};  // patients with any target code

    std::string to_csv() const;
};

// per-disease target code sets, indexed by Disease
using CodeSets = std::array<std::set<std::string>, kNumDiseases>;

// class_counts stay zero when targets is null
StatsReport corpus_stats(const Corpus& corpus, const CodeSets* targets = nullptr);

}  // namespace onset
