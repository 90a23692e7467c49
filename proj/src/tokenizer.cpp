#include "perk/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "perk/common.hpp"

namespace perk {

namespace {

const char* kSpecials[] = {"<pad>", "<eos>", "<sep>", "<q>"};

bool is_word_char(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) != 0 || c == '_';
}

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

bool is_left_attaching(const std::string& tok) {
    return tok == "," || tok == ":" || tok == "." || tok == "?" || tok == "!" || tok == ")" ||
           tok == ";";
}

bool is_digit_tok(const std::string& tok) { return tok.size() == 1 && is_digit(tok[0]); }

}  // namespace

std::vector<std::string> Vocab::split_text(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        const char c = text[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (c == '<') {
            // special marker like <eos>
            const std::size_t close = text.find('>', i);
            if (close != std::string::npos) {
                out.push_back(text.substr(i, close - i + 1));
                i = close + 1;
                continue;
            }
        }
        if (is_word_char(c)) {
            std::size_t j = i;
            while (j < n && is_word_char(text[j])) {
                ++j;
            }
            out.push_back(text.substr(i, j - i));
            i = j;
            continue;
        }
        // digits and punctuation are single-character tokens
        out.push_back(std::string(1, c));
        ++i;
    }
    return out;
}

Vocab Vocab::build(std::vector<std::string> words) {
    std::set<std::string> uniq;
    for (auto& w : words) {
        for (auto& tok : split_text(w)) {
            if (tok.size() == 1 && (is_digit(tok[0]) || !is_word_char(tok[0]))) {
                continue;  // digits/punctuation enter via the fixed blocks below
            }
            uniq.insert(tok);
        }
    }
    Vocab v;
    for (const char* s : kSpecials) {
        v.tokens_.emplace_back(s);
    }
    for (char d = '0'; d <= '9'; ++d) {
        v.tokens_.emplace_back(1, d);
    }
    for (const char* p : {",", ":", ".", "?", "!", "(", ")", ";", "-"}) {
        v.tokens_.emplace_back(p);
    }
    for (const auto& w : uniq) {
        v.tokens_.push_back(w);
    }
    v.rebuild_index();
    return v;
}

void Vocab::rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        index_[tokens_[i]] = static_cast<std::int32_t>(i);
    }
    if (tokens_.size() != index_.size()) {
        throw ConfigError("vocabulary contains duplicate tokens");
    }
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open vocabulary file: " + path);
    }
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
        v.tokens_.push_back(line);
    }
    v.rebuild_index();
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
        throw ConfigError("cannot write vocabulary file: " + path);
    }
    for (const auto& t : tokens_) {
        out << t << '\n';
    }
}

std::int32_t Vocab::id(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) {
        throw std::invalid_argument("out-of-vocabulary token '" + tok + "'");
    }
    return it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
    if (id < 0 || id >= size()) {
        throw std::invalid_argument("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(const std::string& text) const {
    std::vector<std::int32_t> out;
    for (const auto& tok : split_text(text)) {
        out.push_back(id(tok));
    }
    return out;
}

std::string Vocab::decode(const std::vector<std::int32_t>& ids, bool skip_special) const {
    std::string out;
    std::string prev;
    std::string prev_prev;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::string& tok = token(ids[i]);
        if (skip_special && ids[i] < 4) {
            continue;
        }
        bool attach = false;
        if (!out.empty()) {
            if (is_left_attaching(tok) && tok != ".") {
                attach = true;
            } else if (tok == ".") {
                attach = true;  // period attaches left in all cases
            } else if (prev == "(") {
                attach = true;
            } else if (is_digit_tok(tok) && is_digit_tok(prev)) {
                attach = true;
            } else if (is_digit_tok(tok) && prev == "." && is_digit_tok(prev_prev)) {
                attach = true;  // decimal fraction digits
            }
        }
        if (!out.empty() && !attach) {
            out += ' ';
        }
        out += tok;
        prev_prev = prev;
        prev = tok;
    }
    return out;
}

std::string Vocab::normalize(const std::string& text) {
    std::ostringstream os;
    bool first = true;
    for (const auto& tok : split_text(text)) {
        if (tok == "<pad>" || tok == "<eos>" || tok == "<sep>" || tok == "<q>") {
            continue;
        }
        if (!first) {
            os << ' ';
        }
        os << tok;
        first = false;
    }
    return os.str();
}

}  // namespace perk
