#include "onset/values.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace onset {

namespace {

using nlohmann::json;

struct Token {
    enum Kind { Word, Num, Punct } kind;
    std::string text;
    std::size_t begin = 0, end = 0;
};

std::vector<Token> lex(const std::string& text) {
    std::vector<Token> out;
    std::size_t i = 0, n = text.size();
    while (i < n) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (std::isdigit(c)) {
            std::size_t j = i + 1;
            while (j < n && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
            if (j + 1 < n && text[j] == '.' &&
                std::isdigit(static_cast<unsigned char>(text[j + 1]))) {
                j += 2;
                while (j < n && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
            }
            out.push_back({Token::Num, text.substr(i, j - i), i, j});
            i = j;
            continue;
        }
        if (std::isalpha(c)) {
            std::size_t j = i + 1;
            while (j < n && (std::isalnum(static_cast<unsigned char>(text[j])) ||
                             text[j] == '_'))
                ++j;
            std::string w = to_lower(text.substr(i, j - i));
            out.push_back({Token::Word, std::move(w), i, j});
            i = j;
            continue;
        }
        out.push_back({Token::Punct, std::string(1, text[i]), i, i + 1});
        ++i;
    }
    return out;
}

struct Pattern {
    int item;
    std::vector<std::string> words;
};

bool unit_token_matches(const DictItem& item, const Token& t) {
    if (t.kind == Token::Word || (t.kind == Token::Punct && t.text == "%")) {
        if (!item.unit.empty() && t.text == item.unit) return true;
        for (const auto& c : item.conversions)
            if (t.text == c.unit) return true;
    }
    return false;
}

double stat_of(const std::vector<double>& sorted, LabStat s) {
    switch (s) {
        case LabStat::Min:
            return sorted.front();
        case LabStat::Max:
            return sorted.back();
        case LabStat::Median: {
            std::size_t n = sorted.size();
            if (n % 2 == 1) return sorted[n / 2];
            return (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
        }
    }
    return 0.0;
}

}  // namespace

// Patterns grouped by first word, longest first so "oxygen saturation"
// beats a hypothetical "oxygen".
struct ValueExtractor::Index {
    std::unordered_map<std::string, std::vector<Pattern>> by_first;

    explicit Index(const ValueDictionary& dict) {
        for (int it = 0; it < static_cast<int>(dict.items.size()); ++it) {
            for (const auto& syn : dict.items[it].synonyms) {
                Pattern p{it, split_ws(syn)};
                if (p.words.empty()) continue;
                by_first[p.words.front()].push_back(std::move(p));
            }
        }
        for (auto& [w, pats] : by_first) {
            std::stable_sort(pats.begin(), pats.end(),
                             [](const Pattern& a, const Pattern& b) {
                                 return a.words.size() > b.words.size();
                             });
        }
    }
};

ValueExtractor::ValueExtractor(const ValueDictionary& dict)
    : dict_(dict), index_(std::make_unique<Index>(dict)) {}

ValueExtractor::~ValueExtractor() = default;

ValueDictionary ValueDictionary::load(const std::string& path) {
    json doc;
    try {
        doc = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ParseError("value dictionary " + path + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("items") || !doc["items"].is_array())
        throw ParseError("value dictionary " + path + ": expected top-level {\"items\": [...]}");

    ValueDictionary dict;
    for (const auto& j : doc["items"]) {
        DictItem item;
        try {
            item.name = j.at("name").get<std::string>();
            for (const auto& s : j.at("synonyms")) item.synonyms.push_back(s.get<std::string>());
            item.unit = j.value("unit", std::string());
            if (j.contains("conversions")) {
                for (const auto& c : j["conversions"]) {
                    UnitConversion uc;
                    uc.unit = c.at("unit").get<std::string>();
                    uc.factor = c.at("factor").get<double>();
                    uc.offset = c.value("offset", 0.0);
                    item.conversions.push_back(std::move(uc));
                }
            }
            item.range_lo = j.at("range").at(0).get<double>();
            item.range_hi = j.at("range").at(1).get<double>();
            item.prevalence = j.at("prevalence").get<double>();
            item.gen_mean = j.at("gen_mean").get<double>();
            item.gen_sd = j.at("gen_sd").get<double>();
            item.decimals = j.value("decimals", 1);
            item.pair_with = j.value("pair_with", std::string());
        } catch (const json::exception& e) {
            throw ParseError("value dictionary item '" + item.name + "': " + e.what());
        }
        if (item.range_lo >= item.range_hi)
            throw DictionaryError("item '" + item.name + "': empty plausible range");
        dict.items.push_back(std::move(item));
    }
    if (dict.items.empty()) throw DictionaryError("value dictionary " + path + " has no items");
    for (const auto& it : dict.items)
        if (!it.pair_with.empty() && dict.index_of(it.pair_with) < 0)
            throw DictionaryError("item '" + it.name + "' pairs with unknown '" + it.pair_with + "'");
    return dict;
}

int ValueDictionary::index_of(const std::string& name) const {
    for (int i = 0; i < static_cast<int>(items.size()); ++i)
        if (items[i].name == name) return i;
    return -1;
}

int ValueDictionary::require(const std::string& name) const {
    int i = index_of(name);
    if (i < 0) throw DictionaryError("unknown dictionary item '" + name + "'");
    return i;
}

bool convert_and_check(const ValueDictionary& dict, int item, double raw,
                       const std::string& unit, Measurement& out) {
    if (item < 0 || item >= static_cast<int>(dict.items.size()))
        throw DictionaryError("dictionary item index out of range");
    const DictItem& it = dict.items[item];
    double factor = 1.0, offset = 0.0;
    if (!unit.empty() && unit != it.unit) {
        bool found = false;
        for (const auto& c : it.conversions) {
            if (c.unit == unit) {
                factor = c.factor;
                offset = c.offset;
                found = true;
                break;
            }
        }
        if (!found) return false;
    }
    double v = raw * factor + offset;
    if (!std::isfinite(v) || v < it.range_lo || v > it.range_hi) return false;
    out = Measurement{item, v};
    return true;
}

std::vector<Measurement> ValueExtractor::run(const std::string& text,
                                             std::vector<ExtractionAudit>* audit) const {
    const ValueDictionary& dict = dict_;
    std::vector<Token> toks = lex(text);
    std::vector<Measurement> out;

    auto emit = [&](int item, double raw, const std::string& unit, std::size_t b,
                    std::size_t e) {
        Measurement m;
        if (!convert_and_check(dict, item, raw, unit, m)) return;
        out.push_back(m);
        if (audit)
            audit->push_back({dict.items[item].name, text.substr(b, e - b), m.value});
    };

    std::size_t i = 0;
    while (i < toks.size()) {
        if (toks[i].kind != Token::Word) {
            ++i;
            continue;
        }
        auto at = index_->by_first.find(toks[i].text);
        bool advanced = false;
        if (at != index_->by_first.end()) {
            for (const Pattern& pat : at->second) {
                std::size_t w = pat.words.size();
                if (i + w > toks.size()) continue;
                bool name_ok = true;
                for (std::size_t k = 0; k < w; ++k) {
                    if (toks[i + k].kind != Token::Word || toks[i + k].text != pat.words[k]) {
                        name_ok = false;
                        break;
                    }
                }
                if (!name_ok) continue;

                std::size_t j = i + w;
                if (j < toks.size() && toks[j].kind == Token::Punct &&
                    (toks[j].text == ":" || toks[j].text == "="))
                    ++j;
                if (j >= toks.size() || toks[j].kind != Token::Num) continue;

                const DictItem& item = dict.items[pat.item];
                bool ok = false;
                double first = parse_double(toks[j].text, ok);
                if (!ok) continue;

                if (!item.pair_with.empty() && j + 2 < toks.size() &&
                    toks[j + 1].kind == Token::Punct && toks[j + 1].text == "/" &&
                    toks[j + 2].kind == Token::Num) {
                    double second = parse_double(toks[j + 2].text, ok);
                    if (!ok) continue;
                    std::size_t k = j + 3;
                    std::string unit;
                    if (k < toks.size() && unit_token_matches(item, toks[k])) {
                        unit = toks[k].text;
                        ++k;
                    }
                    std::size_t span_end = toks[k - 1].end;
                    emit(pat.item, first, unit, toks[i].begin, span_end);
                    emit(dict.require(item.pair_with), second, unit, toks[i].begin, span_end);
                    i = k;
                } else {
                    std::size_t k = j + 1;
                    std::string unit;
                    if (k < toks.size() && unit_token_matches(item, toks[k])) {
                        unit = toks[k].text;
                        ++k;
                    }
                    emit(pat.item, first, unit, toks[i].begin, toks[k - 1].end);
                    i = k;
                }
                advanced = true;
                break;
            }
        }
        if (!advanced) ++i;
    }
    return out;
}

std::vector<Measurement> extract_values(const std::string& text,
                                        const ValueDictionary& dict,
                                        std::vector<ExtractionAudit>* audit) {
    return ValueExtractor(dict).run(text, audit);
}

EncounterLabs aggregate_encounter(const std::vector<Measurement>& measurements, int n_items) {
    EncounterLabs labs(n_items);
    std::vector<std::vector<double>> per_item(n_items);
    for (const auto& m : measurements) {
        if (m.item < 0 || m.item >= n_items)
            throw IndexError("measurement item index out of range");
        per_item[m.item].push_back(m.value);
    }
    for (int it = 0; it < n_items; ++it) {
        auto& vals = per_item[it];
        if (vals.empty()) continue;
        std::sort(vals.begin(), vals.end());
        labs.observed[it] = 1;
        labs.filled[it] = 1;
        labs.at(it, LabStat::Median) = stat_of(vals, LabStat::Median);
        labs.at(it, LabStat::Min) = stat_of(vals, LabStat::Min);
        labs.at(it, LabStat::Max) = stat_of(vals, LabStat::Max);
    }
    return labs;
}

void carry_forward(std::vector<EncounterLabs>& sequence) {
    if (sequence.empty()) return;
    const std::size_t n_items = sequence.front().observed.size();
    std::vector<std::array<double, 3>> carry(n_items);
    std::vector<std::uint8_t> have(n_items, 0);
    for (auto& enc : sequence) {
        if (enc.observed.size() != n_items)
            throw ShapeError("carry_forward: inconsistent item counts in sequence");
        for (std::size_t it = 0; it < n_items; ++it) {
            if (enc.observed[it]) {
                for (int s = 0; s < 3; ++s) carry[it][s] = enc.stats[it * 3 + s];
                have[it] = 1;
                enc.filled[it] = 1;
            } else if (have[it]) {
                for (int s = 0; s < 3; ++s) enc.stats[it * 3 + s] = carry[it][s];
                enc.filled[it] = 1;
            }
        }
    }
}

double LabStats::normalize(double v, int item, LabStat s) const {
    std::size_t idx = static_cast<std::size_t>(item) * 3 + static_cast<int>(s);
    if (idx >= entries.size()) throw DictionaryError("lab stats: item index out of range");
    const auto& e = entries[idx];
    if (e.count == 0 || e.stdev <= 0.0) return 0.0;
    return (v - e.mean) / e.stdev;
}

std::string LabStats::to_json() const {
    json arr = json::array();
    for (const auto& e : entries)
        arr.push_back({{"mean", e.mean}, {"stdev", e.stdev}, {"count", e.count}});
    return json{{"entries", arr}}.dump();
}

LabStats LabStats::from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
        LabStats stats(0);
        for (const auto& j : doc.at("entries")) {
            LabStatsEntry e;
            e.mean = j.at("mean").get<double>();
            e.stdev = j.at("stdev").get<double>();
            e.count = j.at("count").get<long long>();
            stats.entries.push_back(e);
        }
        if (stats.entries.size() % kLabStatCount != 0)
            throw ParseError("lab stats: entry count not a multiple of 3");
        return stats;
    } catch (const json::exception& e) {
        throw ParseError(std::string("lab stats: ") + e.what());
    }
}

void LabStatsFitter::add_encounter(const EncounterLabs& labs) {
    if (static_cast<int>(labs.observed.size()) != n_items_)
        throw ShapeError("lab stats fitter: item count mismatch");
    for (int it = 0; it < n_items_; ++it) {
        if (!labs.observed[it]) continue;
        for (int s = 0; s < 3; ++s) {
            double v = labs.stats[it * 3 + s];
            sum_[it * 3 + s] += v;
            sumsq_[it * 3 + s] += v * v;
            ++count_[it * 3 + s];
        }
    }
}

LabStats LabStatsFitter::finish() const {
    LabStats stats(n_items_);
    for (std::size_t i = 0; i < stats.entries.size(); ++i) {
        auto& e = stats.entries[i];
        e.count = count_[i];
        if (e.count == 0) continue;
        e.mean = sum_[i] / static_cast<double>(e.count);
        double var = sumsq_[i] / static_cast<double>(e.count) - e.mean * e.mean;
        e.stdev = var > 0.0 ? std::sqrt(var) : 0.0;
    }
    return stats;
}

std::vector<double> encounter_feature_vector(const EncounterLabs& labs, const LabStats& stats) {
    const int n_items = static_cast<int>(labs.observed.size());
    if (stats.entries.size() != static_cast<std::size_t>(n_items) * 3)
        throw ShapeError("lab feature vector: stats/item count mismatch");
    std::vector<double> out(static_cast<std::size_t>(n_items) * 3, 0.0);
    for (int it = 0; it < n_items; ++it) {
        if (!labs.filled[it]) continue;
        for (int s = 0; s < 3; ++s)
            out[it * 3 + s] =
                stats.normalize(labs.stats[it * 3 + s], it, static_cast<LabStat>(s));
    }
    return out;
}

std::vector<double> window_lab_mean(const std::vector<std::vector<double>>& vectors) {
    if (vectors.empty()) return std::vector<double>(kLabFeatureDim, 0.0);
    std::vector<double> out(vectors.front().size(), 0.0);
    for (const auto& v : vectors) {
        if (v.size() != out.size())
            throw ShapeError("window_lab_mean: inconsistent vector lengths");
        for (std::size_t i = 0; i < v.size(); ++i) out[i] += v[i];
    }
    for (auto& x : out) x /= static_cast<double>(vectors.size());
    return out;
}

const std::vector<std::string>& ethnicity_categories() {
    static const std::vector<std::string> cats = {
        "hispanic_or_latino", "not_hispanic_or_latino", "ashkenazi_jewish",
        "sephardic_jewish",   "multiple",               "other",
    };
    return cats;
}

const std::vector<std::string>& race_categories() {
    static const std::vector<std::string> cats = {
        "white", "black_or_african_american", "american_indian", "alaska_native",
        "asian_indian", "bangladeshi", "bhutanese", "burmese", "cambodian", "chinese",
        "filipino", "hmong", "indonesian", "japanese", "korean", "laotian", "malaysian",
        "mongolian", "nepalese", "okinawan", "pakistani", "sri_lankan", "taiwanese",
        "thai", "vietnamese", "other_asian", "native_hawaiian", "samoan", "tahitian",
        "tongan", "fijian", "guamanian", "chamorro", "marshallese", "palauan",
        "other_pacific_islander", "mexican_american_indian", "central_american_indian",
        "south_american_indian", "canadian_inuit", "eskimo", "aleut", "middle_eastern",
        "north_african", "cuban", "dominican", "puerto_rican", "multiracial",
        "some_other_race", "declined", "unknown", "not_recorded",
    };
    return cats;
}

const std::vector<std::string>& gender_categories() {
    static const std::vector<std::string> cats = {"female", "male"};
    return cats;
}

namespace {
void one_hot_block(std::vector<double>& out, std::size_t offset,
                   const std::vector<std::string>& cats, const std::string& value) {
    if (value.empty()) return;
    for (std::size_t i = 0; i < cats.size(); ++i) {
        if (cats[i] == value) {
            out[offset + i] = 1.0;
            return;
        }
    }
    // unrecognized value behaves like unknown: block stays zero
}
}  // namespace

std::vector<double> encode_demographics(const Demographics& demo) {
    static_assert(kDemographicDim == kEthnicityCount + kRaceCount + kGenderCount + 1);
    if (!(demo.age >= 0.0) || !std::isfinite(demo.age))
        throw ContractError("demographics: age must be finite and non-negative");
    std::vector<double> out(kDemographicDim, 0.0);
    one_hot_block(out, 0, ethnicity_categories(), demo.ethnicity);
    one_hot_block(out, kEthnicityCount, race_categories(), demo.race);
    one_hot_block(out, kEthnicityCount + kRaceCount, gender_categories(), demo.gender);
    out[kDemographicDim - 1] = demo.age;
    return out;
}

std::vector<std::pair<std::string, double>> lab_prevalence(const Corpus& corpus,
                                                           const ValueDictionary& dict) {
    const int n_items = static_cast<int>(dict.items.size());
    const ValueExtractor extractor(dict);
    std::vector<long long> hits(n_items, 0);
    long long total = 0;
    for (const auto& p : corpus.patients) {
        for (const auto& enc : p.encounters) {
            ++total;
            std::vector<std::uint8_t> seen(n_items, 0);
            for (const auto& m : extractor.run(enc.note)) seen[m.item] = 1;
            for (int it = 0; it < n_items; ++it) hits[it] += seen[it];
        }
    }
    std::vector<std::pair<std::string, double>> out;
    for (int it = 0; it < n_items; ++it) {
        double frac = total == 0 ? 0.0 : static_cast<double>(hits[it]) / static_cast<double>(total);
        out.emplace_back(dict.items[it].name, frac);
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    return out;
}

}  // namespace onset
