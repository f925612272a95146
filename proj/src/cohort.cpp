#include "onset/cohort.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace onset {

using nlohmann::json;

void WindowConfig::validate() const {
    auto bad = [](const char* field) {
        throw ConfigError(std::string("window config: invalid ") + field);
    };
    if (history_days < 1) bad("history_days");
    if (gap_days < 0) bad("gap_days");
    if (prediction_days < 1) bad("prediction_days");
    if (slide_days < 1) bad("slide_days");
    if (slide_days > history_days) bad("slide_days");
    if (min_history_encounters < 1) bad("min_history_encounters");
    if (min_prediction_encounters < 1) bad("min_prediction_encounters");
    if (min_prediction_span_days < 0) bad("min_prediction_span_days");
}

TargetCodeMap TargetCodeMap::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open target code file: " + path);
    TargetCodeMap tm;
    std::string line;
    int section = -1;
    long long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            std::string name = t.substr(1, t.size() - 2);
            section = -1;
            for (int d = 0; d < kNumDiseases; ++d)
                if (name == disease_name(d)) section = d;
            if (section < 0)
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": unknown disease section '" + name + "'");
            continue;
        }
        if (section < 0)
            throw ParseError(path + ":" + std::to_string(line_no) +
                             ": code before any disease section");
        if (!valid_icd10(t))
            throw ParseError(path + ":" + std::to_string(line_no) +
                             ": malformed ICD-10 code '" + t + "'");
        tm.sets[section].insert(t);
        tm.code_mask[t] |= 1u << section;
    }
    for (int d = 0; d < kNumDiseases; ++d)
        if (tm.sets[d].empty())
            throw ParseError(path + ": no codes for disease '" +
                             std::string(disease_name(d)) + "'");
    return tm;
}

std::vector<Date> enumerate_windows(const Patient& patient, const WindowConfig& wc) {
    wc.validate();
    std::vector<Date> anchors;
    if (patient.encounters.empty()) return anchors;

    const int first = patient.encounters.front().date.days;
    const int last = patient.encounters.back().date.days;

    for (int a = first + wc.history_days; a + wc.gap_days <= last; a += wc.slide_days) {
        const int hist_lo = a - wc.history_days, hist_hi = a;
        const int pred_lo = a + wc.gap_days, pred_hi = pred_lo + wc.prediction_days;

        int hist_n = 0, pred_n = 0;
        int pred_first = 0, pred_last = 0;
        for (const auto& e : patient.encounters) {
            const int d = e.date.days;
            if (d >= hist_lo && d < hist_hi) ++hist_n;
            if (d >= pred_lo && d < pred_hi) {
                if (pred_n == 0) pred_first = d;
                pred_last = d;
                ++pred_n;
            }
        }
        if (hist_n < wc.min_history_encounters) continue;
        if (pred_n < wc.min_prediction_encounters) continue;
        if (pred_last - pred_first < wc.min_prediction_span_days) continue;
        anchors.push_back(Date{a});
    }
    return anchors;
}

void label_and_mask(const Patient& patient, Date anchor, const WindowConfig& wc,
                    const TargetCodeMap& tm,
                    std::array<std::uint8_t, kNumDiseases>& labels,
                    std::array<std::uint8_t, kNumDiseases>& masks) {
    const int pred_lo = anchor.days + wc.gap_days;
    const int pred_hi = pred_lo + wc.prediction_days;

    labels.fill(0);
    masks.fill(1);
    for (const auto& e : patient.encounters) {
        unsigned m = 0;
        for (const auto& c : e.codes) m |= tm.mask_for(c);
        if (!m) continue;
        for (int d = 0; d < kNumDiseases; ++d) {
            if (!(m >> d & 1u)) continue;
            if (e.date.days < pred_lo) masks[d] = 0;
            else if (e.date.days < pred_hi) labels[d] = 1;
        }
    }
}

std::vector<Example> build_examples(const Corpus& corpus, const WindowConfig& wc,
                                    const TargetCodeMap& tm) {
    std::vector<Example> out;
    for (int pi = 0; pi < static_cast<int>(corpus.patients.size()); ++pi) {
        const Patient& p = corpus.patients[pi];
        for (Date anchor : enumerate_windows(p, wc)) {
            Example ex;
            ex.patient_id = p.patient_id;
            ex.patient_index = pi;
            ex.anchor = anchor;
            label_and_mask(p, anchor, wc, tm, ex.labels, ex.masks);
            if (!ex.masks[0] && !ex.masks[1] && !ex.masks[2]) continue;
            for (int ei = 0; ei < static_cast<int>(p.encounters.size()); ++ei) {
                const int d = p.encounters[ei].date.days;
                if (d >= anchor.days - wc.history_days && d < anchor.days)
                    ex.history.push_back(ei);
            }
            out.push_back(std::move(ex));
        }
    }
    return out;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    throw IndexError("bad split value");
}

Split split_of(const std::string& patient_id, u64 seed) {
    double u = hash_unit(patient_id, seed);
    if (u < 0.7) return Split::Train;
    if (u < 0.8) return Split::Val;
    return Split::Test;
}

SplitExamples split_by_patient(const std::vector<Example>& examples, u64 seed) {
    if (examples.empty()) throw EmptyInputError("split_by_patient: no examples");
    SplitExamples out;
    for (const auto& ex : examples) {
        switch (split_of(ex.patient_id, seed)) {
            case Split::Train: out.train.push_back(ex); break;
            case Split::Val: out.val.push_back(ex); break;
            case Split::Test: out.test.push_back(ex); break;
        }
    }
    return out;
}

void save_examples(const std::string& path, const Corpus& corpus,
                   const std::vector<Example>& examples, const std::string& config_hash) {
    std::string out;
    if (!config_hash.empty()) out += json{{"config_hash", config_hash}}.dump() + "\n";
    for (const auto& ex : examples) {
        if (ex.patient_index < 0 ||
            ex.patient_index >= static_cast<int>(corpus.patients.size()))
            throw IndexError("save_examples: bad patient index");
        const Patient& p = corpus.patients[ex.patient_index];
        json ids = json::array();
        for (int ei : ex.history) ids.push_back(p.encounters.at(ei).encounter_id);
        json labels = json::array(), masks = json::array();
        for (int d = 0; d < kNumDiseases; ++d) {
            labels.push_back(static_cast<int>(ex.labels[d]));
            masks.push_back(static_cast<int>(ex.masks[d]));
        }
        out += json{{"patient_id", ex.patient_id},
                    {"anchor", ex.anchor.to_string()},
                    {"encounter_ids", ids},
                    {"labels", labels},
                    {"masks", masks}}
                   .dump();
        out += '\n';
    }
    write_text_file(path, out);
}

std::vector<Example> load_examples(const std::string& path, const Corpus& corpus) {
    std::unordered_map<std::string, int> patient_index;
    for (int pi = 0; pi < static_cast<int>(corpus.patients.size()); ++pi)
        patient_index[corpus.patients[pi].patient_id] = pi;

    std::ifstream in(path);
    if (!in) throw ParseError("cannot open examples file: " + path);
    std::vector<Example> out;
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
            continue;
        try {
            Example ex;
            ex.patient_id = j.at("patient_id").get<std::string>();
            auto pit = patient_index.find(ex.patient_id);
            if (pit == patient_index.end())
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": patient '" + ex.patient_id + "' not in corpus");
            ex.patient_index = pit->second;
            ex.anchor = Date::parse(j.at("anchor").get<std::string>());

            const Patient& p = corpus.patients[ex.patient_index];
            std::unordered_map<std::string, int> enc_index;
            for (int ei = 0; ei < static_cast<int>(p.encounters.size()); ++ei)
                enc_index[p.encounters[ei].encounter_id] = ei;
            for (const json& id : j.at("encounter_ids")) {
                auto eit = enc_index.find(id.get<std::string>());
                if (eit == enc_index.end())
                    throw ParseError(path + ":" + std::to_string(line_no) +
                                     ": encounter '" + id.get<std::string>() +
                                     "' not in corpus");
                ex.history.push_back(eit->second);
            }
            for (int d = 0; d < kNumDiseases; ++d) {
                ex.labels[d] = j.at("labels").at(d).get<int>() != 0;
                ex.masks[d] = j.at("masks").at(d).get<int>() != 0;
            }
            out.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace onset
