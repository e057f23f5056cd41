// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mosld/error.hpp"

namespace mosld {
namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

bool is_bare_key(const std::string& s) {
    if (s.empty()) {
        return false;
    }
    for (char c : s) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
            return false;
        }
    }
    return true;
}

class ValueParser {
public:
    ValueParser(std::string_view text, std::string where) : s_(text), where_(std::move(where)) {}

    ConfigValue parse_all() {
        ConfigValue v = value();
        skip_ws();
        if (i_ != s_.size()) {
            fail("trailing characters after value");
        }
        return v;
    }

private:
    [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(where_ + ": " + msg); }

    void skip_ws() {
        while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t' || s_[i_] == '\n' || s_[i_] == '\r')) {
            ++i_;
        }
    }

    ConfigValue value() {
        skip_ws();
        if (i_ >= s_.size()) {
            fail("missing value");
        }
        const char c = s_[i_];
        if (c == '"') {
            return ConfigValue{string()};
        }
        if (c == '[') {
            return array();
        }
        if (s_.substr(i_, 4) == "true") {
            i_ += 4;
            return ConfigValue{true};
        }
        if (s_.substr(i_, 5) == "false") {
            i_ += 5;
            return ConfigValue{false};
        }
        return number();
    }

    std::string string() {
        ++i_;
        std::string out;
        while (i_ < s_.size() && s_[i_] != '"') {
            char c = s_[i_++];
            if (c == '\\') {
                if (i_ >= s_.size()) {
                    break;
                }
                const char e = s_[i_++];
                switch (e) {
                    case 'n': c = '\n'; break;
                    case 't': c = '\t'; break;
                    case '"': c = '"'; break;
                    case '\\': c = '\\'; break;
                    default: fail(std::string("unsupported escape \\") + e);
                }
            }
            out.push_back(c);
        }
        if (i_ >= s_.size()) {
            fail("unterminated string");
        }
        ++i_;
        return out;
    }

    ConfigValue array() {
        ++i_;
        ConfigArray items;
        skip_ws();
        if (i_ < s_.size() && s_[i_] == ']') {
            ++i_;
            return ConfigValue{items};
        }
        while (true) {
            ConfigValue item = value();
            if (std::holds_alternative<ConfigArray>(item.v)) {
                fail("nested arrays are not supported");
            }
            items.push_back(std::move(item));
            skip_ws();
            if (i_ < s_.size() && s_[i_] == ',') {
                ++i_;
                skip_ws();
                if (i_ < s_.size() && s_[i_] == ']') {
                    ++i_;
                    break;
                }
                continue;
            }
            if (i_ < s_.size() && s_[i_] == ']') {
                ++i_;
                break;
            }
            fail("expected ',' or ']' in array");
        }
        return ConfigValue{items};
    }

    ConfigValue number() {
        std::size_t end = i_;
        while (end < s_.size() && std::string_view("+-0123456789.eE_").find(s_[end]) != std::string_view::npos) {
            ++end;
        }
        std::string tok;
        for (std::size_t k = i_; k < end; ++k) {
            if (s_[k] != '_') {
                tok.push_back(s_[k]);
            }
        }
        if (tok.empty()) {
            fail("unrecognized value '" + std::string(s_.substr(i_)) + "'");
        }
        if (tok.front() == '+') {
            tok.erase(0, 1);
        }
        i_ = end;
        const bool is_float = tok.find_first_of(".eE") != std::string::npos;
        if (!is_float) {
            std::int64_t v = 0;
            auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (ec != std::errc{} || p != tok.data() + tok.size()) {
                fail("invalid integer '" + tok + "'");
            }
            return ConfigValue{v};
        }
        double v = 0.0;
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc{} || p != tok.data() + tok.size()) {
            fail("invalid number '" + tok + "'");
        }
        return ConfigValue{v};
    }

    std::string_view s_;
    std::string where_;
    std::size_t i_ = 0;
};

// Strips a trailing comment, ignoring '#' inside strings.
std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '\\' && in_str) {
            ++i;
        } else if (line[i] == '"') {
            in_str = !in_str;
        } else if (line[i] == '#' && !in_str) {
            return line.substr(0, i);
        }
    }
    return line;
}

int bracket_balance(const std::string& s) {
    int depth = 0;
    bool in_str = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && in_str) {
            ++i;
        } else if (s[i] == '"') {
            in_str = !in_str;
        } else if (!in_str && s[i] == '[') {
            ++depth;
        } else if (!in_str && s[i] == ']') {
            --depth;
        }
    }
    return depth;
}

// Schema reader. Records which keys were consumed so leftovers can be reported.
class Reader {
public:
    explicit Reader(const ConfigDoc& doc) : doc_(doc) {}

    const ConfigValue* find(const std::string& sec, const std::string& key) {
        auto s = doc_.sections.find(sec);
        if (s == doc_.sections.end()) {
            return nullptr;
        }
        auto k = s->second.find(key);
        if (k == s->second.end()) {
            return nullptr;
        }
        used_.insert(sec + "." + key);
        return &k->second;
    }

    static std::string field(const std::string& sec, const std::string& key) {
        return sec.empty() ? key : sec + "." + key;
    }

    const ConfigValue& require(const std::string& sec, const std::string& key) {
        const ConfigValue* v = find(sec, key);
        if (v == nullptr) {
            throw ConfigError("missing required field '" + field(sec, key) + "'");
        }
        return *v;
    }

    static std::size_t as_count(const ConfigValue& v, const std::string& name) {
        if (const auto* i = std::get_if<std::int64_t>(&v.v)) {
            if (*i < 0) {
                throw ConfigError("field '" + name + "' must be non-negative, got " + std::to_string(*i));
            }
            return static_cast<std::size_t>(*i);
        }
        throw ConfigError("field '" + name + "' must be an integer");
    }

    static double as_real(const ConfigValue& v, const std::string& name) {
        if (const auto* d = std::get_if<double>(&v.v)) {
            return *d;
        }
        if (const auto* i = std::get_if<std::int64_t>(&v.v)) {
            return static_cast<double>(*i);
        }
        throw ConfigError("field '" + name + "' must be a number");
    }

    static const std::string& as_string(const ConfigValue& v, const std::string& name) {
        if (const auto* s = std::get_if<std::string>(&v.v)) {
            return *s;
        }
        throw ConfigError("field '" + name + "' must be a string");
    }

    static bool as_bool(const ConfigValue& v, const std::string& name) {
        if (const auto* b = std::get_if<bool>(&v.v)) {
            return *b;
        }
        throw ConfigError("field '" + name + "' must be true or false");
    }

    static const ConfigArray& as_array(const ConfigValue& v, const std::string& name) {
        if (const auto* a = std::get_if<ConfigArray>(&v.v)) {
            return *a;
        }
        throw ConfigError("field '" + name + "' must be an array");
    }

    template <class T>
    void count(const std::string& sec, const std::string& key, T& out) {
        if (const ConfigValue* v = find(sec, key)) {
            out = static_cast<T>(as_count(*v, field(sec, key)));
        }
    }
    void real(const std::string& sec, const std::string& key, double& out) {
        if (const ConfigValue* v = find(sec, key)) {
            out = as_real(*v, field(sec, key));
        }
    }
    void boolean(const std::string& sec, const std::string& key, bool& out) {
        if (const ConfigValue* v = find(sec, key)) {
            out = as_bool(*v, field(sec, key));
        }
    }

    void reject_unknown() const {
        for (const auto& [sec, keys] : doc_.sections) {
            for (const auto& [key, value] : keys) {
                if (!used_.contains(sec + "." + key)) {
                    throw ConfigError("unknown field '" + field(sec, key) + "'");
                }
            }
        }
    }

private:
    const ConfigDoc& doc_;
    std::set<std::string> used_;
};

std::string fmt_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::string s = buf;
    if (s.find_first_of(".eEn") == std::string::npos) {
        s += ".0";
    }
    return s;
}

}  // namespace

bool ConfigDoc::has(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    return s != sections.end() && s->second.contains(key);
}

ConfigDoc parse_config(const std::string& text, const std::string& source) {
    ConfigDoc doc;
    doc.sections[""];
    std::string section;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::size_t start_line = line_no;
        std::string line = strip_comment(raw);
        // Arrays may span lines.
        while (bracket_balance(line) > 0 && std::getline(in, raw)) {
            ++line_no;
            line += "\n" + strip_comment(raw);
        }
        const std::string where = source + ":" + std::to_string(start_line);
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        if (t.front() == '[') {
            if (t.back() != ']') {
                throw ConfigError(where + ": malformed section header");
            }
            section = trim(std::string_view(t).substr(1, t.size() - 2));
            if (!is_bare_key(section)) {
                throw ConfigError(where + ": invalid section name '" + section + "'");
            }
            if (doc.sections.contains(section) && section != "") {
                throw ConfigError(where + ": section [" + section + "] defined twice");
            }
            doc.sections[section];
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(where + ": expected 'key = value'");
        }
        const std::string key = trim(std::string_view(t).substr(0, eq));
        if (!is_bare_key(key)) {
            throw ConfigError(where + ": invalid key '" + key + "'");
        }
        auto& sec = doc.sections[section];
        if (sec.contains(key)) {
            throw ConfigError(where + ": duplicate key '" + Reader::field(section, key) + "'");
        }
        sec.emplace(key, ValueParser(std::string_view(t).substr(eq + 1), where).parse_all());
    }
    return doc;
}

ConfigDoc load_config_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("cannot read config file '" + path + "'");
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path);
}

void apply_override(ConfigDoc& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override '" + assignment + "' must look like section.key=value");
    }
    const std::string path = trim(std::string_view(assignment).substr(0, eq));
    const std::string raw = trim(std::string_view(assignment).substr(eq + 1));
    const auto dot = path.rfind('.');
    const std::string section = dot == std::string::npos ? "" : path.substr(0, dot);
    const std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
    if (!is_bare_key(key) || (!section.empty() && !is_bare_key(section))) {
        throw ConfigError("override '" + assignment + "' has an invalid field name");
    }
    ConfigValue value;
    try {
        value = ValueParser(raw, "override " + path).parse_all();
    } catch (const ConfigError&) {
        value = ConfigValue{raw};
    }
    doc.sections[section][key] = std::move(value);
}

ExperimentConfig experiment_from(const ConfigDoc& doc) {
    Reader r(doc);
    ExperimentConfig cfg;

    if (!doc.sections.contains("backbone")) {
        throw ConfigError("missing required section [backbone]");
    }
    BackboneConfig& b = cfg.backbone;
    b.n_layers = Reader::as_count(r.require("backbone", "n_layers"), "backbone.n_layers");
    b.d_model = Reader::as_count(r.require("backbone", "d_model"), "backbone.d_model");
    b.n_heads = Reader::as_count(r.require("backbone", "n_heads"), "backbone.n_heads");
    r.count("backbone", "vocab", b.vocab);
    r.count("backbone", "context", b.context);
    r.count("backbone", "ffn_mult", b.ffn_mult);

    AdapterHyper& a = cfg.adapter;
    r.count("adapter", "rank", a.rank);
    r.real("adapter", "alpha", a.alpha);
    r.real("adapter", "dropout", a.drop_p);
    r.real("adapter", "a_init_sigma", a.a_init_sigma);
    if (const ConfigValue* v = r.find("adapter", "targets")) {
        a.targets.clear();
        for (const ConfigValue& item : Reader::as_array(*v, "adapter.targets")) {
            const std::string& name = Reader::as_string(item, "adapter.targets");
            if (name == "q") {
                a.targets.push_back(Target::Q);
            } else if (name == "v") {
                a.targets.push_back(Target::V);
            } else {
                throw ConfigError("field 'adapter.targets': unknown target '" + name + "' (expected q or v)");
            }
        }
    }
    std::size_t top_k = 2;
    r.count("adapter", "top_k", top_k);
    const ConfigValue* experts = r.find("adapter", "experts");
    const ConfigValue* preset = r.find("adapter", "allocation");
    if (experts != nullptr && preset != nullptr) {
        throw ConfigError("fields 'adapter.experts' and 'adapter.allocation' are mutually exclusive");
    }
    if (experts != nullptr) {
        cfg.allocation.per_layer.clear();
        for (const ConfigValue& item : Reader::as_array(*experts, "adapter.experts")) {
            cfg.allocation.per_layer.push_back(Reader::as_count(item, "adapter.experts"));
        }
        cfg.allocation.top_k = top_k;
    } else {
        const std::string name = preset != nullptr ? Reader::as_string(*preset, "adapter.allocation") : "descending";
        cfg.allocation = ExpertAllocation::preset(name, b.n_layers, top_k);
    }

    std::size_t seq_len = 4;
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    std::size_t modulus = 100;
    double validation_fraction = 0.0;
    bool with_ood = true;
    r.count("tasks", "seq_len", seq_len);
    r.count("tasks", "n_train", n_train);
    r.count("tasks", "n_test", n_test);
    r.count("tasks", "modulus", modulus);
    r.real("tasks", "validation_fraction", validation_fraction);
    r.boolean("tasks", "ood", with_ood);
    const TaskSuite full = default_suite(seq_len, n_train, n_test, modulus);
    cfg.suite = full;
    if (const ConfigValue* v = r.find("tasks", "names")) {
        cfg.suite.in_domain.clear();
        for (const ConfigValue& item : Reader::as_array(*v, "tasks.names")) {
            const TaskKind k = parse_task(Reader::as_string(item, "tasks.names"));
            bool found = false;
            for (const TaskSpec& t : full.in_domain) {
                if (t.kind == k) {
                    cfg.suite.in_domain.push_back(t);
                    found = true;
                }
            }
            if (!found) {
                throw ConfigError("field 'tasks.names': '" + to_string(k) + "' is not an in-domain task");
            }
        }
    }
    for (TaskSpec& t : cfg.suite.in_domain) {
        t.validation_fraction = validation_fraction;
    }
    if (!with_ood) {
        cfg.suite.ood.reset();
    }

    r.count("pretrain", "examples_per_task", cfg.pretrain.examples_per_task);
    r.count("pretrain", "epochs", cfg.pretrain.epochs);
    r.real("pretrain", "lr", cfg.pretrain.lr);
    r.count("pretrain", "batch_size", cfg.pretrain.batch_size);

    TrainConfig& tr = cfg.train;
    r.real("train", "lr", tr.lr);
    r.count("train", "epochs", tr.epochs);
    r.count("train", "batch_size", tr.batch_size);
    r.real("train", "balance_weight", tr.balance_weight);
    r.boolean("train", "dropout", tr.dropout);
    r.count("train", "seed", tr.seed);
    if (const ConfigValue* v = r.find("train", "optimizer")) {
        const std::string& name = Reader::as_string(*v, "train.optimizer");
        if (name == "adam") {
            tr.optimizer = OptimizerKind::Adam;
        } else if (name == "sgd") {
            tr.optimizer = OptimizerKind::SGD;
        } else {
            throw ConfigError("field 'train.optimizer': expected 'adam' or 'sgd', got '" + name + "'");
        }
    }
    r.count("", "data_seed", cfg.data_seed);

    r.reject_unknown();
    cfg.validate();
    return cfg;
}

std::string canonical_config(const ExperimentConfig& cfg) {
    std::ostringstream s;
    s << "data_seed = " << cfg.data_seed << "\n";
    const BackboneConfig& b = cfg.backbone;
    s << "\n[backbone]\nn_layers = " << b.n_layers << "\nd_model = " << b.d_model << "\nn_heads = " << b.n_heads
      << "\nvocab = " << b.vocab << "\ncontext = " << b.context << "\nffn_mult = " << b.ffn_mult << "\n";
    const AdapterHyper& a = cfg.adapter;
    s << "\n[adapter]\nrank = " << a.rank << "\nalpha = " << fmt_real(a.alpha) << "\ndropout = " << fmt_real(a.drop_p)
      << "\na_init_sigma = " << fmt_real(a.a_init_sigma) << "\ntargets = [";
    for (std::size_t i = 0; i < a.targets.size(); ++i) {
        s << (i ? ", " : "") << '"' << to_string(a.targets[i]) << '"';
    }
    s << "]\nexperts = [";
    for (std::size_t i = 0; i < cfg.allocation.per_layer.size(); ++i) {
        s << (i ? ", " : "") << cfg.allocation.per_layer[i];
    }
    s << "]\ntop_k = " << cfg.allocation.top_k << "\n";
    s << "\n[tasks]\nnames = [";
    for (std::size_t i = 0; i < cfg.suite.in_domain.size(); ++i) {
        s << (i ? ", " : "") << '"' << cfg.suite.in_domain[i].name() << '"';
    }
    s << "]\n";
    if (!cfg.suite.in_domain.empty()) {
        const TaskSpec& first = cfg.suite.in_domain.front();
        s << "seq_len = " << first.seq_len << "\nn_train = " << first.n_train << "\nn_test = " << first.n_test
          << "\nmodulus = " << first.modulus << "\nvalidation_fraction = " << fmt_real(first.validation_fraction)
          << "\n";
    }
    auto spec = [&](const TaskSpec& t, const std::string& prefix) {
        s << prefix << " = { seq_len = " << t.seq_len << ", slice = [" << t.slice.lo << ", " << t.slice.hi
          << "], n_train = " << t.n_train << ", n_test = " << t.n_test << ", modulus = " << t.modulus
          << ", validation_fraction = " << fmt_real(t.validation_fraction) << " }\n";
    };
    for (const TaskSpec& t : cfg.suite.in_domain) {
        spec(t, "# " + t.name());
    }
    s << "ood = " << (cfg.suite.ood ? "true" : "false") << "\n";
    if (cfg.suite.ood) {
        spec(*cfg.suite.ood, "# " + cfg.suite.ood->name());
    }
    const PretrainConfig& p = cfg.pretrain;
    s << "\n[pretrain]\nexamples_per_task = " << p.examples_per_task << "\nepochs = " << p.epochs
      << "\nlr = " << fmt_real(p.lr) << "\nbatch_size = " << p.batch_size << "\n";
    const TrainConfig& t = cfg.train;
    s << "\n[train]\nlr = " << fmt_real(t.lr) << "\nepochs = " << t.epochs << "\nbatch_size = " << t.batch_size
      << "\nbalance_weight = " << fmt_real(t.balance_weight)
      << "\noptimizer = \"" << (t.optimizer == OptimizerKind::Adam ? "adam" : "sgd") << "\"\nseed = " << t.seed
      << "\ndropout = " << (t.dropout ? "true" : "false") << "\n";
    return s.str();
}

}  // namespace mosld
