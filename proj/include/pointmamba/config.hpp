// Line-oriented `key = value` configuration text.
#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace pointmamba::cfg {

inline std::string trim(std::string s)
{
    const auto ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

struct Entry {
    std::string key;
    std::string value;
    std::size_t line = 0;
};

// '#' starts a comment; blank lines are skipped; every other line must be key = value.
inline std::vector<Entry> parse(const std::string& text)
{
    std::vector<Entry> out;
    std::istringstream in(text);
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("config line " + std::to_string(no) + ": expected key = value");
        Entry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), no};
        if (e.key.empty()) throw Error("config line " + std::to_string(no) + ": empty key");
        out.push_back(std::move(e));
    }
    return out;
}

inline std::string read_file(const std::string& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline std::size_t to_size(const std::string& key, const std::string& v)
{
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw Error(key + ": '" + v + "' is not a non-negative integer");
    return out;
}

inline double to_double(const std::string& key, const std::string& v)
{
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw Error("");
        return d;
    } catch (...) {
        throw Error(key + ": '" + v + "' is not a number");
    }
}

inline bool to_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw Error(key + ": '" + v + "' is not a boolean");
}

inline std::vector<std::size_t> to_size_list(const std::string& key, const std::string& v)
{
    std::vector<std::size_t> out;
    std::string s = v;
    if (!s.empty() && s.front() == '(' && s.back() == ')') s = s.substr(1, s.size() - 2);
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(to_size(key, trim(item)));
    if (out.empty()) throw Error(key + ": empty list");
    return out;
}

inline std::string join(const std::vector<std::size_t>& xs)
{
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(xs[i]);
    }
    return s;
}

}  // namespace pointmamba::cfg
