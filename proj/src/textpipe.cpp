#include "onset/textpipe.hpp"

#include <algorithm>
#include <fstream>

namespace onset {

const char* reserved_surface(int id) {
    switch (id) {
        case kPadId: return "<pad>";
        case kUnkId: return "<unk>";
        case kNumId: return "<num>";
        case kNameId: return "<name>";
        case kAddrId: return "<addr>";
        case kLocId: return "<loc>";
    }
    throw IndexError("reserved_surface: id out of range");
}

std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> out;
    std::size_t i = 0, n = text.size();
    while (i < n) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (std::isalnum(c)) {
            std::size_t j = i + 1;
            while (j < n && std::isalnum(static_cast<unsigned char>(text[j]))) ++j;
            out.push_back({to_lower(text.substr(i, j - i)), false});
            i = j;
            continue;
        }
        out.push_back({std::string(1, static_cast<char>(std::tolower(c))), false});
        ++i;
    }
    return out;
}

namespace {

bool all_digits(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!std::isdigit(static_cast<unsigned char>(c))) return false;
    return true;
}

bool all_alpha(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!std::isalpha(static_cast<unsigned char>(c))) return false;
    return true;
}

int placeholder_id(const std::string& word) {
    if (word == "name") return kNameId;
    if (word == "addr") return kAddrId;
    if (word == "loc") return kLocId;
    return -1;
}

}  // namespace

std::vector<Token> replace_entities(std::vector<Token> tokens) {
    std::vector<Token> out;
    out.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        // "[" name "]" triple from tokenizing a [NAME]-style placeholder
        if (tokens[i].surface == "[" && i + 2 < tokens.size() &&
            tokens[i + 2].surface == "]") {
            int id = placeholder_id(tokens[i + 1].surface);
            if (id >= 0) {
                out.push_back({reserved_surface(id), false});
                i += 2;
                continue;
            }
        }
        if (all_digits(tokens[i].surface)) {
            out.push_back({reserved_surface(kNumId), tokens[i].negated});
            continue;
        }
        out.push_back(std::move(tokens[i]));
    }
    return out;
}

void NegationRules::validate() const {
    if (pre.empty()) throw ConfigError("negation rules: no pre-triggers");
    if (terminators.empty()) throw ConfigError("negation rules: no terminators");
    if (max_scope < 1) throw ConfigError("negation rules: max_scope must be >= 1");
}

NegationRules NegationRules::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open negation rules: " + path);
    NegationRules rules;
    rules.max_scope = 0;
    std::string line, section;
    long long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = t.substr(1, t.size() - 2);
            continue;
        }
        if (section == "pre") rules.pre.push_back(split_ws(to_lower(t)));
        else if (section == "post") rules.post.push_back(split_ws(to_lower(t)));
        else if (section == "pseudo") rules.pseudo.push_back(split_ws(to_lower(t)));
        else if (section == "terminators") rules.terminators.insert(to_lower(t));
        else if (section == "scope") {
            bool ok = false;
            rules.max_scope = static_cast<int>(parse_double(t, ok));
            if (!ok)
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": bad scope value '" + t + "'");
        } else {
            throw ParseError(path + ":" + std::to_string(line_no) +
                             ": line outside a known section");
        }
    }
    rules.validate();
    return rules;
}

namespace {

// longest phrase in `phrases` matching token surfaces at position i, 0 if none
std::size_t longest_match(const std::vector<Token>& toks, std::size_t i,
                          const std::vector<std::vector<std::string>>& phrases) {
    std::size_t best = 0;
    for (const auto& ph : phrases) {
        if (ph.size() <= best || i + ph.size() > toks.size()) continue;
        bool ok = true;
        for (std::size_t k = 0; k < ph.size(); ++k) {
            if (toks[i + k].surface != ph[k]) {
                ok = false;
                break;
            }
        }
        if (ok) best = ph.size();
    }
    return best;
}

}  // namespace

std::vector<Token> tag_negation(std::vector<Token> tokens, const NegationRules& rules) {
    rules.validate();
    const std::size_t n = tokens.size();

    // trigger spans with pseudo suppression: a pseudo match at least as long
    // as the trigger match starting at the same position wins
    std::vector<std::size_t> pre_len(n, 0), post_len(n, 0);
    std::vector<std::uint8_t> in_trigger(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t ps = longest_match(tokens, i, rules.pseudo);
        std::size_t pr = longest_match(tokens, i, rules.pre);
        std::size_t po = longest_match(tokens, i, rules.post);
        if (ps >= pr) pr = 0;
        if (ps >= po) po = 0;
        // one trigger kind per position: the longer match wins
        if (pr >= po) po = 0;
        else pr = 0;
        pre_len[i] = pr;
        post_len[i] = po;
        std::size_t span = std::max(pr, po);
        for (std::size_t k = 0; k < span; ++k) in_trigger[i + k] = 1;
    }

    auto is_terminator = [&](const Token& t) {
        return rules.terminators.count(t.surface) > 0;
    };

    // forward pass: pre-triggers flag following alphabetic tokens
    int remaining = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (is_terminator(tokens[i])) {
            remaining = 0;
            continue;
        }
        if (pre_len[i] > 0) {
            remaining = rules.max_scope;
            i += pre_len[i] - 1;
            continue;
        }
        if (in_trigger[i]) continue;  // part of a post-trigger (or suppressed span)
        if (remaining > 0 && all_alpha(tokens[i].surface)) {
            tokens[i].negated = true;
            --remaining;
        }
    }

    // backward pass: post-triggers flag preceding alphabetic tokens
    for (std::size_t i = 0; i < n; ++i) {
        if (post_len[i] == 0) continue;
        int budget = rules.max_scope;
        for (std::size_t j = i; j-- > 0 && budget > 0;) {
            if (is_terminator(tokens[j]) || in_trigger[j]) break;
            if (all_alpha(tokens[j].surface)) {
                tokens[j].negated = true;
                --budget;
            }
        }
        i += post_len[i] - 1;
    }
    return tokens;
}

std::set<std::string> load_stoplist(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open stoplist: " + path);
    std::set<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        words.insert(to_lower(t));
    }
    if (words.empty()) throw ParseError("stoplist " + path + " is empty");
    return words;
}

std::vector<Token> remove_stopwords(std::vector<Token> tokens,
                                    const std::set<std::string>& stoplist) {
    std::vector<Token> out;
    out.reserve(tokens.size());
    for (auto& t : tokens)
        if (!stoplist.count(t.surface)) out.push_back(std::move(t));
    return out;
}

std::vector<Token> process_note(const std::string& text, const NegationRules& rules,
                                const std::set<std::string>& stoplist) {
    return remove_stopwords(tag_negation(replace_entities(tokenize(text)), rules),
                            stoplist);
}

Vocab build_vocab(const std::vector<std::vector<Token>>& train_docs, int max_size,
                  double df_cap) {
    if (max_size < 0) throw ConfigError("vocab: max_size must be >= 0");
    std::unordered_map<std::string, long long> term_count, doc_count;
    for (const auto& doc : train_docs) {
        std::set<std::string> seen;
        for (const auto& t : doc) {
            bool reserved = false;
            for (int r = 0; r < kReservedIds; ++r)
                if (t.surface == reserved_surface(r)) reserved = true;
            if (reserved) continue;
            ++term_count[t.surface];
            seen.insert(t.surface);
        }
        for (const auto& s : seen) ++doc_count[s];
    }

    const double n_docs = static_cast<double>(train_docs.size());
    std::vector<std::pair<std::string, long long>> ranked;
    ranked.reserve(term_count.size());
    for (const auto& [surface, count] : term_count) {
        if (n_docs > 0 && doc_count[surface] > df_cap * n_docs) continue;
        ranked.emplace_back(surface, count);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (static_cast<int>(ranked.size()) > max_size) ranked.resize(max_size);

    Vocab v;
    for (int r = 0; r < kReservedIds; ++r) {
        v.id_to_token.push_back(reserved_surface(r));
        v.doc_freq.push_back(0);
        v.token_to_id[reserved_surface(r)] = r;
    }
    for (const auto& [surface, count] : ranked) {
        v.token_to_id[surface] = static_cast<int>(v.id_to_token.size());
        v.id_to_token.push_back(surface);
        v.doc_freq.push_back(doc_count[surface]);
    }
    return v;
}

void save_vocab(const std::string& path, const Vocab& vocab,
                const std::string& config_hash) {
    std::string out;
    if (!config_hash.empty()) out += "# config_hash=" + config_hash + "\n";
    for (int i = 0; i < vocab.size(); ++i) {
        out += vocab.id_to_token[i];
        out += '\t';
        out += std::to_string(vocab.doc_freq[i]);
        out += '\n';
    }
    write_text_file(path, out);
}

Vocab load_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open vocab: " + path);
    Vocab v;
    std::string line;
    long long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_on(line, '\t');
        if (fields.empty() || fields.size() > 2)
            throw ParseError(path + ":" + std::to_string(line_no) + ": bad vocab line");
        int id = v.size();
        v.token_to_id[fields[0]] = id;
        v.id_to_token.push_back(fields[0]);
        long long df = 0;
        if (fields.size() == 2) {
            bool ok = false;
            df = static_cast<long long>(parse_double(fields[1], ok));
            if (!ok)
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": bad document frequency");
        }
        v.doc_freq.push_back(df);
    }
    for (int r = 0; r < kReservedIds; ++r)
        if (v.size() <= r || v.id_to_token[r] != reserved_surface(r))
            throw ParseError(path + ": reserved vocabulary rows missing or reordered");
    return v;
}

Encoded encode(const std::vector<Token>& tokens, const Vocab& vocab, int max_len) {
    if (max_len < 1) throw ConfigError("encode: max_len must be >= 1");
    Encoded enc;
    enc.ids.assign(max_len, kPadId);
    enc.neg.assign(max_len, 0);
    std::size_t start = tokens.size() > static_cast<std::size_t>(max_len)
                            ? tokens.size() - max_len
                            : 0;
    int j = 0;
    for (std::size_t i = start; i < tokens.size(); ++i, ++j) {
        enc.ids[j] = vocab.id_of(tokens[i].surface);
        enc.neg[j] = tokens[i].negated ? 1 : 0;
    }
    return enc;
}

}  // namespace onset
