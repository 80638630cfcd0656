#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "filo/core/autograd.hpp"
#include "filo/core/error.hpp"
#include "filo/core/rng.hpp"
#include "filo/core/tensor.hpp"

// Fine-grained description prompting: learnable templates, the per-class
// anomaly-phrase registry, the nine-position vocabulary, and grouped text
// features [F_n, F_a].
namespace filo {

// Learnable template vectors: one bank for normal prompts, one for abnormal
// prompts, each [n_ctx, width]. Stored as autograd leaves so the training
// loop can optimize them in place.
struct ContextVectors {
    ad::Var normal_ctx;   // [n, width]
    ad::Var abnormal_ctx; // [n, width]

    static ContextVectors init(int n_ctx, int width, double stddev, rng::Rng& rng) {
        require(n_ctx >= 1, ErrorKind::config, "n_ctx must be >= 1");
        ContextVectors cv;
        cv.normal_ctx = ad::Var::leaf(Tensor::gaussian({n_ctx, width}, rng, stddev));
        cv.abnormal_ctx = ad::Var::leaf(Tensor::gaussian({n_ctx, width}, rng, stddev));
        return cv;
    }

    int count() const { return normal_ctx.val().dim(0); }
    int width() const { return normal_ctx.val().dim(1); }

    void validate() const {
        require(normal_ctx.defined() && abnormal_ctx.defined(), ErrorKind::config,
                "context vectors not initialized");
        require(normal_ctx.val().same_shape(abnormal_ctx.val()), ErrorKind::config,
                "normal/abnormal context banks must share shape");
        require(normal_ctx.val().all_finite() && abnormal_ctx.val().all_finite(),
                ErrorKind::config, "context vectors must be finite");
    }
};

// Per-class fine-grained anomaly phrases plus the generic state word lists.
// Shipped as an editable JSON data file; see data/descriptions.json.
struct DescriptionRegistry {
    std::map<std::string, std::vector<std::string>> classes;
    std::vector<std::string> normal_states;
    std::vector<std::string> abnormal_states;

    bool has_class(const std::string& name) const { return classes.count(name) > 0; }

    const std::vector<std::string>& phrases(const std::string& name) const {
        auto it = classes.find(name);
        require(it != classes.end(), ErrorKind::data, "class not registered: " + name);
        return it->second;
    }

    std::vector<std::string> class_names() const {
        std::vector<std::string> out;
        out.reserve(classes.size());
        for (const auto& [k, _] : classes) out.push_back(k);
        return out;
    }

    void validate() const {
        require(!normal_states.empty() && !abnormal_states.empty(), ErrorKind::data,
                "registry must list normal and abnormal state words");
        for (const auto& [cls, ph] : classes) {
            require(!cls.empty(), ErrorKind::data, "registry has an empty class name");
            require(!ph.empty(), ErrorKind::data,
                    "class has no anomaly phrases: " + cls);
            for (const auto& p : ph)
                require(!p.empty(), ErrorKind::data, "empty phrase under class " + cls);
        }
    }

    static DescriptionRegistry from_json(const nlohmann::json& j) {
        DescriptionRegistry reg;
        require(j.is_object() && j.contains("classes"), ErrorKind::data,
                "registry JSON must contain a 'classes' object");
        for (const auto& [cls, arr] : j.at("classes").items()) {
            std::vector<std::string> phrases;
            for (const auto& p : arr) phrases.push_back(p.get<std::string>());
            reg.classes[cls] = std::move(phrases);
        }
        for (const auto& s : j.at("normal_states")) reg.normal_states.push_back(s.get<std::string>());
        for (const auto& s : j.at("abnormal_states")) reg.abnormal_states.push_back(s.get<std::string>());
        reg.validate();
        return reg;
    }

    static DescriptionRegistry load(const std::string& path) {
        std::ifstream in(path);
        require(in.good(), ErrorKind::io, "cannot open description registry: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::io, "registry parse error in " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

// The nine position phrases on a 3x3 grid of the unit square, indexed by
// coordinate thirds (row-major: top row first).
struct PositionVocabulary {
    static constexpr int kCount = 9;

    static const std::vector<std::string>& phrases() {
        static const std::vector<std::string> v = {
            "top left", "top",    "top right", "left",        "center",
            "right",    "bottom left", "bottom", "bottom right"};
        return v;
    }

    // Grid cell for a point in the unit square.
    static const std::string& phrase_at(double x, double y) {
        auto third = [](double t) {
            if (t < 1.0 / 3.0) return 0;
            if (t < 2.0 / 3.0) return 1;
            return 2;
        };
        static const char* kGrid[3][3] = {
            {"top left", "top", "top right"},
            {"left", "center", "right"},
            {"bottom left", "bottom", "bottom right"}};
        const int r = third(y), c = third(x);
        const auto& all = phrases();
        for (const auto& p : all)
            if (p == kGrid[r][c]) return p;
        fail(ErrorKind::internal, "position grid lookup failed");
    }

    static bool is_phrase(const std::string& s) {
        const auto& all = phrases();
        return std::find(all.begin(), all.end(), s) != all.end();
    }
};

// One expanded prompt: the literal token text plus the slot values it was
// built from, so the grammar can be round-tripped exactly.
struct Prompt {
    std::string text;      // rendered form, e.g. "[W1]...[W12] damaged bottle with crack at top left."
    std::string state;
    std::string class_name;
    std::string anomaly_phrase; // empty for normal prompts
    std::string position;       // empty when absent
    bool abnormal = false;
};

struct PromptSet {
    std::vector<Prompt> normal_prompts;
    std::vector<Prompt> abnormal_prompts;
    std::string class_name;
    int n_ctx = 0; // context slots per template

    void validate() const {
        for (const auto& p : normal_prompts)
            require(!p.abnormal && p.anomaly_phrase.empty() && p.position.empty(),
                    ErrorKind::internal, "normal prompt carries anomaly slots");
        for (const auto& p : abnormal_prompts)
            require(p.abnormal && !p.anomaly_phrase.empty(), ErrorKind::internal,
                    "abnormal prompt missing its anomaly phrase");
    }
};

// Group-averaged unit-norm text features.
struct TextFeatureBank {
    ad::Var f_normal;   // [C], unit norm
    ad::Var f_abnormal; // [C], unit norm

    int width() const { return f_normal.val().dim(0); }
};

namespace prompt_text {

// Class names use dataset-style underscores ("metal_nut"); prompts render
// them with spaces.
inline std::string display_class(const std::string& cls) {
    std::string s = cls;
    std::replace(s.begin(), s.end(), '_', ' ');
    return s;
}

inline std::string undisplay_class(const std::string& s) {
    std::string c = s;
    std::replace(c.begin(), c.end(), ' ', '_');
    return c;
}

inline std::string ctx_marker(bool abnormal, int i) {
    std::ostringstream os;
    os << '[' << (abnormal ? 'W' : 'V') << (i + 1) << ']';
    return os.str();
}

} // namespace prompt_text

// Expands the learnable templates for one class:
//   normal:   [V1]..[Vn] <state> <class>.
//   abnormal: [W1]..[Wn] <state> <class> with <phrase> at <pos>.
// One normal prompt per normal state; one abnormal prompt per
// (abnormal state x anomaly phrase). The position clause is attached to
// abnormal prompts only and elided when `pos` is absent.
inline PromptSet expand_templates(const DescriptionRegistry& registry,
                                  const std::string& class_name,
                                  const std::optional<std::string>& pos,
                                  int n_ctx) {
    require(registry.has_class(class_name), ErrorKind::data,
            "class not registered: " + class_name);
    if (pos)
        require(PositionVocabulary::is_phrase(*pos), ErrorKind::data,
                "unknown position phrase: " + *pos);

    const std::string shown = prompt_text::display_class(class_name);
    auto ctx_prefix = [n_ctx](bool abnormal) {
        std::string s;
        for (int i = 0; i < n_ctx; ++i) {
            if (i) s += ' ';
            s += prompt_text::ctx_marker(abnormal, i);
        }
        return s;
    };

    PromptSet set;
    set.class_name = class_name;
    set.n_ctx = n_ctx;
    const std::string normal_prefix = ctx_prefix(false);
    for (const auto& state : registry.normal_states) {
        Prompt p;
        p.state = state;
        p.class_name = class_name;
        p.abnormal = false;
        p.text = normal_prefix + " " + state + " " + shown + ".";
        set.normal_prompts.push_back(std::move(p));
    }
    const std::string abnormal_prefix = ctx_prefix(true);
    for (const auto& state : registry.abnormal_states) {
        for (const auto& phrase : registry.phrases(class_name)) {
            Prompt p;
            p.state = state;
            p.class_name = class_name;
            p.anomaly_phrase = phrase;
            p.abnormal = true;
            p.text = abnormal_prefix + " " + state + " " + shown + " with " + phrase;
            if (pos) {
                p.position = *pos;
                p.text += " at " + *pos;
            }
            p.text += ".";
            set.abnormal_prompts.push_back(std::move(p));
        }
    }
    set.validate();
    return set;
}

// Restriction of expand_templates to a single anomaly phrase; used for
// per-phrase description ranking.
inline std::vector<Prompt> expand_for_phrase(const DescriptionRegistry& registry,
                                             const std::string& class_name,
                                             const std::string& phrase,
                                             const std::optional<std::string>& pos,
                                             int n_ctx) {
    DescriptionRegistry one;
    one.classes[class_name] = {phrase};
    one.normal_states = registry.normal_states;
    one.abnormal_states = registry.abnormal_states;
    return expand_templates(one, class_name, pos, n_ctx).abnormal_prompts;
}

// Parsed slot values recovered from a rendered prompt.
struct ParsedPrompt {
    bool abnormal = false;
    int n_ctx = 0;
    std::string state;
    std::string class_name;
    std::string anomaly_phrase;
    std::string position;
};

// Inverts the template grammar. The registry pins the state lists and class
// names; the position vocabulary disambiguates the trailing "at" clause.
inline ParsedPrompt parse_prompt(const std::string& text,
                                 const DescriptionRegistry& registry) {
    ParsedPrompt out;
    std::string s = text;
    require(!s.empty() && s.back() == '.', ErrorKind::data,
            "prompt must end with '.': " + text);
    s.pop_back();

    // Context markers.
    std::size_t pos = 0;
    char kind = 0;
    while (pos < s.size() && s[pos] == '[') {
        const std::size_t close = s.find(']', pos);
        require(close != std::string::npos, ErrorKind::data, "unterminated ctx marker");
        const std::string marker = s.substr(pos + 1, close - pos - 1);
        require(marker.size() >= 2 && (marker[0] == 'V' || marker[0] == 'W'),
                ErrorKind::data, "bad ctx marker [" + marker + "]");
        if (kind == 0) kind = marker[0];
        require(marker[0] == kind, ErrorKind::data, "mixed ctx marker kinds");
        int num = 0;
        for (std::size_t i = 1; i < marker.size(); ++i) {
            require(marker[i] >= '0' && marker[i] <= '9', ErrorKind::data,
                    "bad ctx marker [" + marker + "]");
            num = num * 10 + (marker[i] - '0');
        }
        require(num == out.n_ctx + 1, ErrorKind::data, "ctx markers out of order");
        ++out.n_ctx;
        pos = close + 1;
        if (pos < s.size() && s[pos] == ' ') ++pos;
    }
    require(out.n_ctx > 0, ErrorKind::data, "prompt has no ctx markers");
    out.abnormal = kind == 'W';
    s = s.substr(pos);

    // Optional trailing " at <pos>" (abnormal only): match against the fixed
    // nine-position vocabulary, longest phrase first.
    if (out.abnormal) {
        std::string best;
        for (const auto& p : PositionVocabulary::phrases()) {
            const std::string suffix = " at " + p;
            if (s.size() >= suffix.size() &&
                s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0 &&
                p.size() > best.size())
                best = p;
        }
        if (!best.empty()) {
            out.position = best;
            s = s.substr(0, s.size() - (" at " + best).size());
        }
    }

    // State word: longest registry state matching the head of the string.
    const auto& states = out.abnormal ? registry.abnormal_states : registry.normal_states;
    std::string state;
    for (const auto& st : states) {
        if (s.size() > st.size() && s.compare(0, st.size(), st) == 0 &&
            s[st.size()] == ' ' && st.size() > state.size())
            state = st;
    }
    require(!state.empty(), ErrorKind::data, "no registry state matches: " + s);
    out.state = state;
    s = s.substr(state.size() + 1);

    if (out.abnormal) {
        // "<class> with <phrase>": the class may not contain " with ", so the
        // first separator splits correctly even when the phrase contains one.
        const std::size_t sep = s.find(" with ");
        require(sep != std::string::npos, ErrorKind::data,
                "abnormal prompt missing 'with' clause: " + s);
        out.class_name = prompt_text::undisplay_class(s.substr(0, sep));
        out.anomaly_phrase = s.substr(sep + 6);
    } else {
        out.class_name = prompt_text::undisplay_class(s);
    }
    require(registry.has_class(out.class_name), ErrorKind::data,
            "parsed class not registered: " + out.class_name);
    return out;
}

// Text encoder contract. A token is either a literal word or an embedding
// vector (a learnable context slot). Implementations return a unit-norm
// feature and must be deterministic for fixed inputs; gradients flow
// through vector tokens.
struct TextToken {
    std::string word;
    ad::Var vec;

    static TextToken from_word(std::string w) {
        TextToken t;
        t.word = std::move(w);
        return t;
    }
    static TextToken from_vec(ad::Var v) {
        TextToken t;
        t.vec = std::move(v);
        return t;
    }
    bool is_vec() const { return vec.defined(); }
};

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual int width() const = 0;
    virtual ad::Var encode(const std::vector<TextToken>& tokens) const = 0;
};

// Conditional-template meta network: a two-layer bottleneck mapping the
// global image feature to a bias added to every context vector.
struct MetaNet {
    ad::Var w1, b1; // [hidden, C], [hidden]
    ad::Var w2, b2; // [ctx_width, hidden], [ctx_width]

    // The output layer starts at zero so an untrained meta net is exactly
    // the unconditional template (bias identically zero).
    static MetaNet init(int feature_width, int ctx_width, int bottleneck_divisor,
                        rng::Rng& rng) {
        const int hidden = std::max(1, feature_width / std::max(1, bottleneck_divisor));
        MetaNet m;
        m.w1 = ad::Var::leaf(Tensor::gaussian({hidden, feature_width}, rng,
                                              std::sqrt(2.0 / feature_width)));
        m.b1 = ad::Var::leaf(Tensor(std::vector<int>{hidden}, 0.0));
        m.w2 = ad::Var::leaf(Tensor(std::vector<int>{ctx_width, hidden}, 0.0));
        m.b2 = ad::Var::leaf(Tensor(std::vector<int>{ctx_width}, 0.0));
        return m;
    }

    // pi = W2 relu(W1 g + b1) + b2
    ad::Var bias(const ad::Var& image_feature) const {
        return ad::linear(ad::relu(ad::linear(image_feature, w1, b1)), w2, b2);
    }
};

namespace detail {

inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> words;
    std::istringstream is(s);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

// Token sequence for one prompt: context rows (with optional conditional
// bias) followed by the literal template words.
inline std::vector<TextToken> tokens_for_prompt(const Prompt& p,
                                                const ContextVectors& ctx,
                                                const std::optional<ad::Var>& meta_bias) {
    std::vector<TextToken> tokens;
    const ad::Var& bank = p.abnormal ? ctx.abnormal_ctx : ctx.normal_ctx;
    for (int i = 0; i < ctx.count(); ++i) {
        ad::Var v = ad::row(bank, i);
        if (meta_bias) v = ad::add(v, *meta_bias);
        tokens.push_back(TextToken::from_vec(std::move(v)));
    }
    std::string tail = p.state + " " + prompt_text::display_class(p.class_name);
    if (p.abnormal) {
        tail += " with " + p.anomaly_phrase;
        if (!p.position.empty()) tail += " at " + p.position;
    }
    for (auto& w : split_words(tail)) tokens.push_back(TextToken::from_word(std::move(w)));
    return tokens;
}

inline ad::Var group_average(const std::vector<ad::Var>& features) {
    require(!features.empty(), ErrorKind::internal, "empty feature group");
    ad::Var acc = features[0];
    for (std::size_t i = 1; i < features.size(); ++i) acc = ad::add(acc, features[i]);
    return ad::mul_const(acc, 1.0 / static_cast<double>(features.size()));
}

} // namespace detail

// Encodes every prompt, averages within the normal and abnormal groups, and
// unit-normalizes. When `meta_bias` is present (conditional mode) it is
// added to every context vector before encoding; a zero bias reproduces the
// unconditional result exactly.
inline TextFeatureBank encode_prompts(const PromptSet& prompts,
                                      const ContextVectors& ctx,
                                      const TextEncoder& encoder,
                                      const std::optional<ad::Var>& meta_bias = std::nullopt) {
    ctx.validate();
    require(prompts.n_ctx == ctx.count(), ErrorKind::config,
            "prompt set was expanded for " + std::to_string(prompts.n_ctx) +
                " context slots but the bank holds " + std::to_string(ctx.count()));
    require(ctx.width() == encoder.width(), ErrorKind::config,
            "context width does not match encoder width");
    if (meta_bias)
        require(meta_bias->val().ndim() == 1 && meta_bias->val().dim(0) == ctx.width(),
                ErrorKind::config, "meta bias width mismatch");
    require(!prompts.normal_prompts.empty() && !prompts.abnormal_prompts.empty(),
            ErrorKind::data, "prompt set must contain both groups");

    auto encode_group = [&](const std::vector<Prompt>& group) {
        std::vector<ad::Var> feats;
        feats.reserve(group.size());
        for (const auto& p : group)
            feats.push_back(encoder.encode(detail::tokens_for_prompt(p, ctx, meta_bias)));
        return ad::l2_normalize(detail::group_average(feats));
    };

    TextFeatureBank bank;
    bank.f_normal = encode_group(prompts.normal_prompts);
    bank.f_abnormal = encode_group(prompts.abnormal_prompts);
    return bank;
}

// Group-averaged unit feature for each anomaly phrase of a class, in
// registry order. Drives the description ranking / interpretability output.
inline std::vector<std::pair<std::string, ad::Var>> per_phrase_features(
    const DescriptionRegistry& registry, const std::string& class_name,
    const std::optional<std::string>& pos, const ContextVectors& ctx,
    const TextEncoder& encoder, const std::optional<ad::Var>& meta_bias = std::nullopt) {
    std::vector<std::pair<std::string, ad::Var>> out;
    for (const auto& phrase : registry.phrases(class_name)) {
        std::vector<ad::Var> feats;
        for (const auto& p : expand_for_phrase(registry, class_name, phrase, pos, ctx.count()))
            feats.push_back(encoder.encode(detail::tokens_for_prompt(p, ctx, meta_bias)));
        out.emplace_back(phrase, ad::l2_normalize(detail::group_average(feats)));
    }
    return out;
}

struct RankedDescription {
    std::string phrase;
    double similarity = 0.0;
};

// Descending cosine-similarity ranking of anomaly phrases against an image
// feature. Ties keep registry order (stable sort).
inline std::vector<RankedDescription> rank_descriptions(
    const Tensor& image_feature, const std::vector<std::pair<std::string, Tensor>>& phrase_features) {
    require(!phrase_features.empty(), ErrorKind::data, "no phrase features to rank");
    const double norm = image_feature.norm2();
    require(norm > 0.0, ErrorKind::shape, "image feature has zero norm");
    std::vector<RankedDescription> ranked;
    ranked.reserve(phrase_features.size());
    for (const auto& [phrase, feat] : phrase_features) {
        require(feat.same_shape(image_feature), ErrorKind::shape,
                "phrase feature width mismatch for '" + phrase + "'");
        double dotv = 0.0;
        for (std::int64_t i = 0; i < feat.size(); ++i) dotv += feat[i] * image_feature[i];
        ranked.push_back({phrase, dotv / norm});
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const RankedDescription& a, const RankedDescription& b) {
                         return a.similarity > b.similarity;
                     });
    return ranked;
}

} // namespace filo
