#pragma once

#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "onset/common.hpp"

namespace onset {

struct Token {
    std::string surface;  // lowercase
    bool negated = false;

    bool operator==(const Token&) const = default;
};

// Reserved vocabulary slots. Ids are fixed; surfaces are what the ids decode
// to and what replace_entities rewrites matched tokens into.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kNumId = 2;
inline constexpr int kNameId = 3;
inline constexpr int kAddrId = 4;
inline constexpr int kLocId = 5;
inline constexpr int kReservedIds = 6;

const char* reserved_surface(int id);  // "<pad>", "<unk>", ...

// Lowercases; alphanumeric runs and individual punctuation marks become
// separate tokens; whitespace vanishes.
std::vector<Token> tokenize(const std::string& text);

// Numeric literals -> <num>; bracketed de-identification placeholders
// [NAME] / [ADDR] / [LOC] -> <name> / <addr> / <loc>.
std::vector<Token> replace_entities(std::vector<Token> tokens);

// Negex-style rule set, shipped as an editable data file.
struct NegationRules {
    std::vector<std::vector<std::string>> pre;      // flag following tokens
    std::vector<std::vector<std::string>> post;     // flag preceding tokens
    std::vector<std::vector<std::string>> pseudo;   // suppress trigger matches
    std::set<std::string> terminators;              // stop scopes ("but", ".", ...)
    int max_scope = 6;  // counted over alphabetic tokens only

    static NegationRules load(const std::string& path);
    void validate() const;
};

std::vector<Token> tag_negation(std::vector<Token> tokens, const NegationRules& rules);

std::set<std::string> load_stoplist(const std::string& path);

std::vector<Token> remove_stopwords(std::vector<Token> tokens,
                                    const std::set<std::string>& stoplist);

// tokenize -> replace_entities -> tag_negation -> remove_stopwords.
// Numeric value extraction happens on the raw text, outside this chain.
std::vector<Token> process_note(const std::string& text, const NegationRules& rules,
                                const std::set<std::string>& stoplist);

struct Vocab {
    std::vector<std::string> id_to_token;  // ids dense; [0..5] reserved
    std::unordered_map<std::string, int> token_to_id;
    std::vector<long long> doc_freq;  // aligned with id_to_token; 0 for reserved

    int size() const { return static_cast<int>(id_to_token.size()); }
    int id_of(const std::string& surface) const {
        auto it = token_to_id.find(surface);
        return it == token_to_id.end() ? kUnkId : it->second;
    }
};

// Ranks surfaces by total occurrence count (ties broken lexicographically),
// drops surfaces present in more than df_cap of the documents, keeps at most
// max_size beyond the reserved ids. Fit on training documents only.
Vocab build_vocab(const std::vector<std::vector<Token>>& train_docs,
                  int max_size = 20000, double df_cap = 0.8);

void save_vocab(const std::string& path, const Vocab& vocab,
                const std::string& config_hash = "");
Vocab load_vocab(const std::string& path);

struct Encoded {
    std::vector<int> ids;
    std::vector<std::uint8_t> neg;
};

// Keeps the last max_len tokens (most recent text wins), right-pads with PAD.
Encoded encode(const std::vector<Token>& tokens, const Vocab& vocab, int max_len);

}  // namespace onset
