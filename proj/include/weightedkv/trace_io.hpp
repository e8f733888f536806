// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "weightedkv/error.hpp"
#include "weightedkv/toy_model.hpp"

namespace wkv {

/// Shortest is not enough here: the format promises 17 significant digits.
inline std::string format_double(double x) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
    detail::require(res.ec == std::errc{}, "format_double: conversion failed");
    return {buf, res.ptr};
}

namespace detail {

inline void write_array(std::ostream& os, const Vec& v) {
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) {
            os << ',';
        }
        os << format_double(v[i]);
    }
    os << ']';
}

}  // namespace detail

/// One JSON object per line, step-major then layer then head:
/// {"step":0,"layer":0,"head":0,"token_id":17,"q":[...],"k":[...],"v":[...]}
inline void write_trace_jsonl(std::ostream& os, const QKVTrace& trace) {
    for (std::size_t s = 0; s < trace.steps(); ++s) {
        for (std::size_t l = 0; l < trace.layers; ++l) {
            for (std::size_t h = 0; h < trace.heads; ++h) {
                const HeadQKV& r = trace.at(s, l, h);
                os << "{\"step\":" << s << ",\"layer\":" << l << ",\"head\":" << h
                   << ",\"token_id\":" << trace.token_ids[s] << ",\"q\":";
                detail::write_array(os, r.q);
                os << ",\"k\":";
                detail::write_array(os, r.k);
                os << ",\"v\":";
                detail::write_array(os, r.v);
                os << "}\n";
            }
        }
    }
    detail::require(static_cast<bool>(os), "write_trace_jsonl: write failed");
}

/// Parses a trace written by write_trace_jsonl. Records may appear in any
/// order but must cover every (step, layer, head) exactly once.
inline QKVTrace read_trace_jsonl(std::istream& is) {
    struct Parsed {
        std::size_t step, layer, head;
        std::int64_t token;
        HeadQKV qkv;
    };
    std::vector<Parsed> parsed;
    std::string line;
    std::size_t line_no = 0;
    std::size_t max_step = 0, max_layer = 0, max_head = 0, d = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            Parsed p{j.at("step").get<std::size_t>(), j.at("layer").get<std::size_t>(),
                     j.at("head").get<std::size_t>(), j.at("token_id").get<std::int64_t>(),
                     {j.at("q").get<Vec>(), j.at("k").get<Vec>(), j.at("v").get<Vec>()}};
            if (parsed.empty()) {
                d = p.qkv.q.size();
            }
            detail::require(d > 0 && p.qkv.q.size() == d && p.qkv.k.size() == d && p.qkv.v.size() == d,
                            "inconsistent vector length");
            max_step = std::max(max_step, p.step);
            max_layer = std::max(max_layer, p.layer);
            max_head = std::max(max_head, p.head);
            parsed.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw Error("trace line " + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw Error("trace line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    detail::require(!parsed.empty(), "read_trace_jsonl: empty trace");

    QKVTrace trace;
    trace.layers = max_layer + 1;
    trace.heads = max_head + 1;
    trace.d_head = d;
    const std::size_t steps = max_step + 1;
    detail::require(parsed.size() == steps * trace.layers * trace.heads,
                    "read_trace_jsonl: trace is not rectangular (" + std::to_string(parsed.size()) + " records for " +
                        std::to_string(steps) + " steps x " + std::to_string(trace.layers) + " layers x " +
                        std::to_string(trace.heads) + " heads)");
    trace.token_ids.assign(steps, 0);
    trace.records.resize(parsed.size());
    std::vector<bool> seen(parsed.size(), false);
    for (auto& p : parsed) {
        const std::size_t idx = (p.step * trace.layers + p.layer) * trace.heads + p.head;
        detail::require(!seen[idx], "read_trace_jsonl: duplicate record for step " + std::to_string(p.step));
        seen[idx] = true;
        trace.token_ids[p.step] = p.token;
        trace.records[idx] = std::move(p.qkv);
    }
    return trace;
}

inline void save_trace(const std::string& path, const QKVTrace& trace) {
    std::ofstream os(path);
    detail::require(static_cast<bool>(os), "cannot open '" + path + "' for writing");
    write_trace_jsonl(os, trace);
}

inline QKVTrace load_trace(const std::string& path) {
    std::ifstream is(path);
    detail::require(static_cast<bool>(is), "cannot open '" + path + "'");
    return read_trace_jsonl(is);
}

/// Whitespace-separated integer token ids.
inline std::vector<std::int64_t> load_token_file(const std::string& path) {
    std::ifstream is(path);
    detail::require(static_cast<bool>(is), "cannot open '" + path + "'");
    std::vector<std::int64_t> tokens;
    std::int64_t t = 0;
    while (is >> t) {
        tokens.push_back(t);
    }
    detail::require(is.eof(), "token file '" + path + "' contains a non-integer entry");
    detail::require(!tokens.empty(), "token file '" + path + "' is empty");
    return tokens;
}

}  // namespace wkv
