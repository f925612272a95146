#include "onset/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "onset/values.hpp"

namespace onset {

using nlohmann::json;

const char* disease_name(Disease d) { return disease_name(static_cast<int>(d)); }

const char* disease_name(int d) {
    switch (d) {
        case 0: return "chf";
        case 1: return "kidney";
        case 2: return "stroke";
    }
    throw IndexError("disease index out of range");
}

bool valid_icd10(const std::string& code) {
    if (code.size() < 3) return false;
    if (!std::isupper(static_cast<unsigned char>(code[0]))) return false;
    if (!std::isdigit(static_cast<unsigned char>(code[1])) ||
        !std::isdigit(static_cast<unsigned char>(code[2])))
        return false;
    if (code.size() == 3) return true;
    if (code[3] != '.' || code.size() == 4) return false;
    for (std::size_t i = 4; i < code.size(); ++i)
        if (!std::isalnum(static_cast<unsigned char>(code[i]))) return false;
    return true;
}

void GeneratorConfig::validate() const {
    auto bad = [](const std::string& field) {
        throw ConfigError("generator config: invalid " + field);
    };
    if (n_patients < 1) bad("n_patients");
    if (!(date_start.days < date_end.days)) bad("date_range");
    for (int d = 0; d < kNumDiseases; ++d)
        if (!(prevalence[d] >= 0.0 && prevalence[d] <= 1.0))
            bad(std::string("prevalence[") + disease_name(d) + "]");
    if (!(negated_signal_rate >= 0.0 && negated_signal_rate <= 1.0))
        bad("negated_signal_rate");
    if (notes_per_patient_min < 1 || notes_per_patient_max < notes_per_patient_min)
        bad("notes_per_patient");
    if (words_per_note_min < 1 || words_per_note_max < words_per_note_min)
        bad("words_per_note");
    if (!(signal_rate >= 0.0)) bad("signal_rate");
    if (!(silent_positive_rate >= 0.0 && silent_positive_rate <= 1.0))
        bad("silent_positive_rate");
    if (!(lab_mention_rate >= 0.0)) bad("lab_mention_rate");
    if (!(benign_code_rate >= 0.0 && benign_code_rate <= 1.0)) bad("benign_code_rate");
    if (!(unknown_demo_rate >= 0.0 && unknown_demo_rate <= 1.0)) bad("unknown_demo_rate");
    // the date range must admit at least notes_per_patient_max distinct days
    if (date_end.days - date_start.days < notes_per_patient_max) bad("date_range");
}

namespace {

// Benign filler vocabulary. Deliberately avoids dictionary synonyms,
// negation triggers and anything a demo config would use as a signal token.
const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> words = {
        "patient", "presents", "today", "for", "routine", "clinic", "visit", "reports",
        "mild", "moderate", "occasional", "intermittent", "chronic", "stable",
        "improved", "unchanged", "ongoing", "follow", "up", "discussed", "plan",
        "continue", "current", "medications", "reviewed", "lifestyle", "diet",
        "exercise", "counseling", "provided", "sleep", "fair", "good", "appetite",
        "normal", "energy", "baseline", "ambulating", "independently", "alert",
        "oriented", "cooperative", "pleasant", "well", "appearing", "nourished",
        "hydrated", "skin", "warm", "dry", "intact", "lungs", "clear", "heart",
        "regular", "rhythm", "abdomen", "soft", "nontender", "extremities", "trace",
        "swelling", "noted", "gait", "steady", "mood", "affect", "appropriate",
        "speech", "fluent", "memory", "grossly", "exam", "unremarkable", "ordered",
        "results", "pending", "return", "weeks", "months", "as", "needed",
        "questions", "answered", "education", "cessation", "moderation", "seasonal",
        "allergies", "congestion", "cough", "resolving", "rest", "fluids", "advised",
        "the", "and", "of", "to", "in", "on", "was", "is", "are", "has", "had",
        "this", "that", "with", "at", "by", "from", "will", "be", "been", "feels",
        "states", "notes", "some", "more", "less", "also", "over", "past", "week",
        "daily", "twice", "morning", "evening", "tolerated", "therapy", "referral",
        "placed", "scheduled", "annual", "screening", "vaccination", "administered",
        // also used inside negated phrase stems; present here so their bare
        // occurrence carries no class signal
        "evidence", "recent", "history",
    };
    return words;
}

const std::vector<std::string>& benign_codes() {
    static const std::vector<std::string> codes = {
        "Z00.00", "Z01.419", "Z12.31", "Z23",    "J06.9",  "J02.9",  "J30.9",
        "J45.909", "K21.9",  "K59.00", "L30.9",  "M54.5",  "M25.511", "R51",
        "R05",     "R53.83", "H10.9",  "H66.90", "B34.9",  "F41.9",  "G47.00",
        "E78.5",   "S93.401", "T78.40", "W19",   "R42",
    };
    return codes;
}

// Representative onset codes per disease; each appears in the shipped
// target-code list so downstream labeling recognizes them.
const std::vector<std::string>& onset_codes(int d) {
    static const std::array<std::vector<std::string>, kNumDiseases> codes = {{
        {"I50.9", "I50.22", "I50.32", "I11.0"},
        {"N18.3", "N18.4", "N17.9", "N18.9"},
        {"I63.9", "I61.0", "G45.9", "I63.50"},
    }};
    return codes[d];
}

struct Phrase {
    std::vector<std::string> chunks;
};

// value rounded to a fixed number of decimals, without scientific notation
std::string render_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

double parse_or_throw(const std::string& s) {
    bool ok = false;
    double v = parse_double(s, ok);
    if (!ok) throw ParseError("generator rendered unparseable number: " + s);
    return v;
}

// Draws a value, renders it in canonical or alternate units, and reports the
// measurement exactly as extraction will read it back. Returns false when the
// rounded value lands outside the plausible range.
bool render_measurement(Rng& rng, const ValueDictionary& dict, int item_idx,
                        double mean_offset, Phrase& phrase, Measurement& planted) {
    const DictItem& item = dict.items[item_idx];
    double v = rng.normal(item.gen_mean + mean_offset, item.gen_sd);
    v = std::clamp(v, item.range_lo, item.range_hi);

    bool alt_unit = !item.conversions.empty() && rng.bernoulli(0.15);
    const std::string& syn = item.synonyms[rng.below(item.synonyms.size())];
    int sep = rng.range_int(0, 2);  // none, colon, equals

    std::string value_str;
    std::string unit_str;
    if (alt_unit) {
        const UnitConversion& c = item.conversions[rng.below(item.conversions.size())];
        double raw = (v - c.offset) / c.factor;
        value_str = render_fixed(raw, item.decimals + 1);
        unit_str = c.unit;
    } else {
        value_str = render_fixed(v, item.decimals);
        if (!item.unit.empty() && rng.bernoulli(0.7)) unit_str = item.unit;
    }

    if (!convert_and_check(dict, item_idx, parse_or_throw(value_str), unit_str, planted))
        return false;

    phrase.chunks.clear();
    for (const auto& w : split_ws(syn)) phrase.chunks.push_back(w);
    if (sep == 1) phrase.chunks.push_back(":");
    else if (sep == 2) phrase.chunks.push_back("=");
    phrase.chunks.push_back(value_str);
    if (!unit_str.empty()) phrase.chunks.push_back(unit_str);
    return true;
}

bool render_bp_pair(Rng& rng, const ValueDictionary& dict, int sys_idx,
                    double sys_offset, Phrase& phrase) {
    const DictItem& sys = dict.items[sys_idx];
    int dia_idx = dict.require(sys.pair_with);
    const DictItem& dia = dict.items[dia_idx];

    double sv = std::clamp(rng.normal(sys.gen_mean + sys_offset, sys.gen_sd),
                           sys.range_lo, sys.range_hi);
    double dv = std::clamp(rng.normal(dia.gen_mean + sys_offset / 2.0, dia.gen_sd),
                           dia.range_lo, dia.range_hi);
    std::string sv_str = render_fixed(sv, sys.decimals);
    std::string dv_str = render_fixed(dv, dia.decimals);

    phrase.chunks.clear();
    phrase.chunks.push_back(sys.synonyms[rng.below(sys.synonyms.size())]);
    if (rng.bernoulli(0.3)) phrase.chunks.push_back(":");
    phrase.chunks.push_back(sv_str + "/" + dv_str);
    return true;
}

Phrase negated_phrase(Rng& rng, const std::string& signal) {
    static const std::vector<std::vector<std::string>> stems = {
        {"no"},
        {"not"},
        {"without"},
        {"no", "evidence", "of"},
        {"no", "recent", "history", "of"},
    };
    Phrase p;
    p.chunks = stems[rng.below(stems.size())];
    p.chunks.push_back(signal);
    return p;
}

// Inserts phrases at uniform positions into a filler-word stream, keeping
// each phrase contiguous. Total word count stays ~words_n when the budget
// allows.
std::string assemble_note(Rng& rng, int words_n, const std::vector<Phrase>& phrases) {
    int phrase_words = 0;
    for (const auto& p : phrases) phrase_words += static_cast<int>(p.chunks.size());

    std::vector<std::string> words;
    int filler_n = std::max(0, words_n - phrase_words);
    words.reserve(static_cast<std::size_t>(filler_n) + phrase_words);
    for (int i = 0; i < filler_n; ++i) words.push_back(rng.choice(filler_words()));

    for (const auto& p : phrases) {
        std::size_t pos = rng.below(words.size() + 1);
        words.insert(words.begin() + pos, p.chunks.begin(), p.chunks.end());
    }

    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

std::string pad_int(long long v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

}  // namespace

Corpus generate_corpus(const GeneratorConfig& cfg, const ValueDictionary& dict) {
    cfg.validate();
    for (int d = 0; d < kNumDiseases; ++d)
        for (const auto& [name, off] : cfg.lab_shift[d])
            dict.require(name);

    Rng root(cfg.seed);
    Corpus corpus;
    corpus.patients.reserve(cfg.n_patients);

    const int n_days = cfg.date_end.days - cfg.date_start.days;

    for (int pi = 0; pi < cfg.n_patients; ++pi) {
        Rng rng = root.fork(static_cast<u64>(pi) + 1);
        Patient pat;
        pat.patient_id = "P" + pad_int(pi, 6);

        if (rng.bernoulli(cfg.unknown_demo_rate)) {
            // leave all three categoricals unknown
        } else {
            pat.demographics.ethnicity = ethnicity_categories()[rng.below(kEthnicityCount)];
            pat.demographics.race = race_categories()[rng.below(kRaceCount)];
            pat.demographics.gender = gender_categories()[rng.below(kGenderCount)];
        }
        pat.demographics.age = static_cast<double>(rng.range_int(18, 90));

        std::array<bool, kNumDiseases> positive{};
        std::array<bool, kNumDiseases> silent{};
        for (int d = 0; d < kNumDiseases; ++d) {
            positive[d] = rng.bernoulli(cfg.prevalence[d]);
            silent[d] = positive[d] && rng.bernoulli(cfg.silent_positive_rate);
        }

        const int n_notes = rng.range_int(cfg.notes_per_patient_min, cfg.notes_per_patient_max);

        std::set<int> day_set;
        while (static_cast<int>(day_set.size()) < n_notes)
            day_set.insert(static_cast<int>(rng.below(static_cast<u64>(n_days))));
        std::vector<int> days(day_set.begin(), day_set.end());

        std::array<int, kNumDiseases> onset_idx;
        for (int d = 0; d < kNumDiseases; ++d) {
            onset_idx[d] = n_notes;  // never, for negatives
            if (positive[d]) {
                int idx = static_cast<int>(std::floor(n_notes * rng.range_real(0.55, 0.85)));
                onset_idx[d] = std::clamp(idx, 1, n_notes - 1);
            }
        }

        for (int ei = 0; ei < n_notes; ++ei) {
            Encounter enc;
            enc.encounter_id = pat.patient_id + "-E" + pad_int(ei, 3);
            enc.date = Date{cfg.date_start.days + days[ei]};

            std::vector<Phrase> phrases;

            // affirmative signal mentions before onset
            for (int d = 0; d < kNumDiseases; ++d) {
                if (!positive[d] || silent[d] || ei >= onset_idx[d]) continue;
                if (cfg.signal_tokens[d].empty()) continue;
                int n_sig = static_cast<int>(std::floor(cfg.signal_rate));
                if (rng.bernoulli(cfg.signal_rate - std::floor(cfg.signal_rate))) ++n_sig;
                for (int s = 0; s < n_sig; ++s) {
                    Phrase p;
                    p.chunks.push_back(rng.choice(cfg.signal_tokens[d]));
                    phrases.push_back(std::move(p));
                }
            }

            // negated mentions for future-negative patients
            for (int d = 0; d < kNumDiseases; ++d) {
                if (positive[d] || cfg.signal_tokens[d].empty()) continue;
                if (rng.bernoulli(cfg.negated_signal_rate))
                    phrases.push_back(negated_phrase(rng, rng.choice(cfg.signal_tokens[d])));
            }

            // lab and vital mentions; positives get shifted means before onset
            for (int item_idx = 0; item_idx < static_cast<int>(dict.items.size()); ++item_idx) {
                const DictItem& item = dict.items[item_idx];
                if (item.synonyms.empty()) continue;  // pair-only partner
                if (!rng.bernoulli(item.prevalence * cfg.lab_mention_rate)) continue;

                double offset = 0.0;
                for (int d = 0; d < kNumDiseases; ++d) {
                    if (!positive[d] || ei >= onset_idx[d]) continue;
                    for (const auto& [name, off] : cfg.lab_shift[d])
                        if (name == item.name) offset += off;
                }

                Phrase phrase;
                if (!item.pair_with.empty()) {
                    if (render_bp_pair(rng, dict, item_idx, offset, phrase))
                        phrases.push_back(std::move(phrase));
                } else {
                    Measurement planted;
                    if (render_measurement(rng, dict, item_idx, offset, phrase, planted))
                        phrases.push_back(std::move(phrase));
                }
            }

            const int words_n = rng.range_int(cfg.words_per_note_min, cfg.words_per_note_max);
            enc.note = assemble_note(rng, words_n, phrases);

            // diagnosis codes: incidental benign everywhere, targets from onset on
            std::set<std::string> code_set;
            if (rng.bernoulli(cfg.benign_code_rate)) {
                int n_codes = rng.range_int(1, 2);
                for (int c = 0; c < n_codes; ++c) code_set.insert(rng.choice(benign_codes()));
            }
            for (int d = 0; d < kNumDiseases; ++d) {
                if (!positive[d] || ei < onset_idx[d]) continue;
                if (ei == onset_idx[d] || rng.bernoulli(0.8))
                    code_set.insert(rng.choice(onset_codes(d)));
            }
            enc.codes.assign(code_set.begin(), code_set.end());

            pat.encounters.push_back(std::move(enc));
        }
        corpus.patients.push_back(std::move(pat));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// JSON Lines persistence
// ---------------------------------------------------------------------------

namespace {

json patient_to_json(const Patient& p) {
    json encs = json::array();
    for (const auto& e : p.encounters) {
        encs.push_back({
            {"encounter_id", e.encounter_id},
            {"date", e.date.to_string()},
            {"note", e.note},
            {"codes", e.codes},
        });
    }
    return json{
        {"patient_id", p.patient_id},
        {"demographics",
         {{"ethnicity", p.demographics.ethnicity},
          {"race", p.demographics.race},
          {"gender", p.demographics.gender},
          {"age", p.demographics.age}}},
        {"encounters", encs},
    };
}

Patient patient_from_json(const json& j) {
    Patient p;
    p.patient_id = j.at("patient_id").get<std::string>();
    const json& d = j.at("demographics");
    p.demographics.ethnicity = d.at("ethnicity").get<std::string>();
    p.demographics.race = d.at("race").get<std::string>();
    p.demographics.gender = d.at("gender").get<std::string>();
    p.demographics.age = d.at("age").get<double>();
    for (const json& ej : j.at("encounters")) {
        Encounter e;
        e.encounter_id = ej.at("encounter_id").get<std::string>();
        e.date = Date::parse(ej.at("date").get<std::string>());
        e.note = ej.at("note").get<std::string>();
        for (const json& c : ej.at("codes")) e.codes.push_back(c.get<std::string>());
        p.encounters.push_back(std::move(e));
    }
    return p;
}

}  // namespace

std::string corpus_to_jsonl(const Corpus& corpus) {
    std::string out;
    for (const auto& p : corpus.patients) {
        out += patient_to_json(p).dump();
        out += '\n';
    }
    return out;
}

void save_corpus(const Corpus& corpus, const std::string& path,
                 const std::string& config_hash) {
    std::string out;
    if (!config_hash.empty())
        out += json{{"config_hash", config_hash}}.dump() + "\n";
    out += corpus_to_jsonl(corpus);
    write_text_file(path, out);
}

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open corpus file: " + path);
    Corpus corpus;
    std::string line;
    long long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (line_no == 1 && j.is_object() && j.contains("config_hash") &&
            !j.contains("patient_id"))
            continue;  // artifact header
        try {
            corpus.patients.push_back(patient_from_json(j));
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

StatsReport corpus_stats(const Corpus& corpus, const CodeSets* targets) {
    if (corpus.patients.empty()) throw EmptyInputError("corpus_stats: empty corpus");
    StatsReport rep;
    rep.n_patients = static_cast<int>(corpus.patients.size());
    long long total_words = 0;
    for (const auto& p : corpus.patients) {
        rep.notes_per_patient[static_cast<int>(p.encounters.size())] += 1;
        rep.ethnicity_counts[p.demographics.ethnicity] += 1;
        rep.race_counts[p.demographics.race] += 1;
        rep.gender_counts[p.demographics.gender] += 1;

        std::array<bool, kNumDiseases> hit{};
        for (const auto& e : p.encounters) {
            ++rep.n_notes;
            int words = static_cast<int>(split_ws(e.note).size());
            total_words += words;
            int bin = words > 0 ? static_cast<int>(std::floor(std::log2(double(words)))) : -1;
            rep.words_log2_hist[bin] += 1;
            if (targets) {
                for (int d = 0; d < kNumDiseases; ++d)
                    for (const auto& c : e.codes)
                        if ((*targets)[d].count(c)) hit[d] = true;
            }
        }
        for (int d = 0; d < kNumDiseases; ++d)
            if (hit[d]) rep.class_counts[d] += 1;
    }
    rep.mean_words_per_note =
        rep.n_notes == 0 ? 0.0 : static_cast<double>(total_words) / rep.n_notes;
    return rep;
}

std::string StatsReport::to_csv() const {
    std::ostringstream out;
    out << "section,key,value\n";
    out << "summary,n_patients," << n_patients << "\n";
    out << "summary,n_notes," << n_notes << "\n";
    out << "summary,mean_words_per_note," << format_double(mean_words_per_note) << "\n";
    for (const auto& [k, v] : notes_per_patient)
        out << "notes_per_patient," << k << "," << v << "\n";
    for (const auto& [k, v] : words_log2_hist)
        out << "words_log2_bin," << k << "," << v << "\n";
    auto cat = [&](const char* name, const std::map<std::string, int>& m) {
        for (const auto& [k, v] : m)
            out << name << "," << (k.empty() ? std::string("unknown") : k) << "," << v << "\n";
    };
    cat("ethnicity", ethnicity_counts);
    cat("race", race_counts);
    cat("gender", gender_counts);
    for (int d = 0; d < kNumDiseases; ++d)
        out << "class," << disease_name(d) << "," << class_counts[d] << "\n";
    return out.str();
}

}  // namespace onset
