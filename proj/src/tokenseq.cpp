#include "heterodiff/tokenseq.hpp"

#include <algorithm>

namespace hd {

SlotKind slot_kind(int slot, int n_max) {
    int M = seq_length(n_max);
    if (slot < 0 || slot >= M) throw std::out_of_range("slot_kind: slot out of range");
    if (slot == 0) return SlotKind::sos;
    if (slot == M - 1) return SlotKind::eos;
    switch ((slot - 1) % 6) {
        case 0: return SlotKind::type;
        case 5: return SlotKind::sep;
        default: return SlotKind::coord;
    }
}

int slot_block(int slot, int n_max) {
    SlotKind k = slot_kind(slot, n_max);
    if (k == SlotKind::sos || k == SlotKind::eos) return -1;
    return (slot - 1) / 6;
}

TokenSeq tokenize(const Layout& layout, const Vocabulary& vocab, int n_max) {
    if (layout.n() > n_max) throw std::invalid_argument("tokenize: too many elements");
    if (layout.n() == 0) throw std::invalid_argument("tokenize: empty layout");
    TokenSeq seq;
    seq.n_max = n_max;
    seq.tokens.assign(seq_length(n_max), vocab.pad());
    seq.tokens.front() = vocab.sos();
    seq.tokens.back() = vocab.eos();
    for (int b = 0; b < layout.n(); ++b) {
        const Element& e = layout.elements[b];
        int s = 1 + 6 * b;
        seq.tokens[s + 0] = vocab.type_token(e.type);
        seq.tokens[s + 1] = vocab.coord_token(e.l);
        seq.tokens[s + 2] = vocab.coord_token(e.t);
        seq.tokens[s + 3] = vocab.coord_token(e.r);
        seq.tokens[s + 4] = vocab.coord_token(e.b);
        seq.tokens[s + 5] = vocab.sep();
    }
    return seq;
}

static std::string token_desc(int tok, const Vocabulary& v) {
    if (tok < 0 || tok >= v.V()) return "out-of-range(" + std::to_string(tok) + ")";
    if (tok < v.K) return "coord(" + std::to_string(tok) + ")";
    if (tok == v.mask()) return "MASK";
    if (tok < v.mask()) return "type(" + v.type_names[tok - v.K] + ")";
    if (tok == v.sos()) return "SOS";
    if (tok == v.eos()) return "EOS";
    if (tok == v.sep()) return "SEP";
    return "PAD";
}

std::vector<SlotViolation> validate_sequence(const TokenSeq& seq, const Vocabulary& vocab) {
    std::vector<SlotViolation> out;
    int n_max = seq.n_max;
    if (seq.M() != seq_length(n_max)) {
        out.push_back({0, "length " + std::to_string(seq_length(n_max)),
                       "length " + std::to_string(seq.M())});
        return out;
    }
    auto bad = [&](int slot, const std::string& expected) {
        out.push_back({slot, expected, token_desc(seq.tokens[slot], vocab)});
    };
    for (int s = 0; s < seq.M(); ++s) {
        int tok = seq.tokens[s];
        if (tok < 0 || tok >= vocab.V()) {
            bad(s, "valid token index");
            continue;
        }
        switch (slot_kind(s, n_max)) {
            case SlotKind::sos:
                if (tok != vocab.sos()) bad(s, "SOS");
                break;
            case SlotKind::eos:
                if (tok != vocab.eos()) bad(s, "EOS");
                break;
            default:
                break;  // block slots handled below, PAD-awareness needed
        }
    }
    // per-block checks: either wholly PAD or kind-matching content
    bool seen_pad_block = false;
    int real = 0;
    for (int b = 0; b < n_max; ++b) {
        int s = 1 + 6 * b;
        int pad_count = 0;
        for (int k = 0; k < 6; ++k)
            if (seq.tokens[s + k] == vocab.pad()) ++pad_count;
        if (pad_count == 6) {
            seen_pad_block = true;
            continue;
        }
        if (pad_count > 0) {
            for (int k = 0; k < 6; ++k)
                if (seq.tokens[s + k] == vocab.pad()) bad(s + k, "whole-block PAD or block content");
        }
        if (seen_pad_block) bad(s, "PAD (padded blocks must be trailing)");
        ++real;
        // type slot: real type or MASK
        int tt = seq.tokens[s];
        if (!(tt >= vocab.K && tt <= vocab.mask()) && tt != vocab.pad()) bad(s, "type token or MASK");
        for (int k = 1; k <= 4; ++k) {
            int ct = seq.tokens[s + k];
            if (!(ct >= 0 && ct < vocab.K) && ct != vocab.pad()) bad(s + k, "coordinate token");
        }
        if (seq.tokens[s + 5] != vocab.sep() && seq.tokens[s + 5] != vocab.pad()) bad(s + 5, "SEP");
    }
    if (real == 0) out.push_back({1, "at least one real element block", "all PAD"});
    return out;
}

Layout detokenize(const TokenSeq& seq, const Vocabulary& vocab) {
    auto violations = validate_sequence(seq, vocab);
    if (!violations.empty()) {
        std::string msg = "illegal sequence: ";
        for (size_t i = 0; i < violations.size(); ++i) {
            if (i) msg += "; ";
            msg += "slot " + std::to_string(violations[i].slot) + " expected " +
                   violations[i].expected + ", got " + violations[i].got;
        }
        throw IllegalSequenceError(std::move(violations), msg);
    }
    Layout out;
    for (int b = 0; b < seq.n_max; ++b) {
        int s = 1 + 6 * b;
        if (seq.tokens[s] == vocab.pad()) break;  // trailing PAD blocks
        if (seq.tokens[s] == vocab.mask()) throw MaskedTypeError(s);
        Element e;
        e.type = vocab.type_id(seq.tokens[s]);
        e.l = seq.tokens[s + 1];
        e.t = seq.tokens[s + 2];
        e.r = seq.tokens[s + 3];
        e.b = seq.tokens[s + 4];
        // model output may order a pair badly; normalize rather than reject
        if (e.l > e.r) std::swap(e.l, e.r);
        if (e.t > e.b) std::swap(e.t, e.b);
        out.elements.push_back(e);
    }
    canonicalize(out);
    return out;
}

int real_blocks(const TokenSeq& seq, const Vocabulary& vocab) {
    int n = 0;
    for (int b = 0; b < seq.n_max; ++b) {
        if (seq.tokens[1 + 6 * b] == vocab.pad()) break;
        ++n;
    }
    return n;
}

}  // namespace hd
