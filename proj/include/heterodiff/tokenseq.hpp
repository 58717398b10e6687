#pragma once
#include <stdexcept>
#include <string>
#include <vector>

#include "heterodiff/layout.hpp"
#include "heterodiff/vocab.hpp"

namespace hd {

// Slot kinds are fixed by position: slot 0 = SOS, then N_max blocks of
// [type, coord, coord, coord, coord, SEP], final slot = EOS. M = 6*N_max + 2.
enum class SlotKind { sos, type, coord, sep, eos };

struct TokenSeq {
    std::vector<int> tokens;
    int n_max = 0;

    int M() const { return int(tokens.size()); }
    bool operator==(const TokenSeq&) const = default;
};

inline int seq_length(int n_max) { return 6 * n_max + 2; }

SlotKind slot_kind(int slot, int n_max);
// block index for a type/coord/sep slot, -1 for SOS/EOS
int slot_block(int slot, int n_max);

struct SlotViolation {
    int slot = 0;
    std::string expected;  // slot-kind description
    std::string got;       // offending token description
};

struct IllegalSequenceError : std::runtime_error {
    IllegalSequenceError(std::vector<SlotViolation> v, const std::string& msg)
        : std::runtime_error(msg), violations(std::move(v)) {}
    std::vector<SlotViolation> violations;
};

struct MaskedTypeError : std::runtime_error {
    explicit MaskedTypeError(int s)
        : std::runtime_error("MASK token survives in type slot " + std::to_string(s)), slot(s) {}
    int slot;
};

TokenSeq tokenize(const Layout& layout, const Vocabulary& vocab, int n_max);

// All slot-kind violations (empty = legal). Checks per-slot kind match, PAD blocks
// whole and trailing, SOS/EOS/SEP placement, and at least one real block.
std::vector<SlotViolation> validate_sequence(const TokenSeq& seq, const Vocabulary& vocab);

// Legal sequence -> Layout. Throws IllegalSequenceError listing every violation, or
// MaskedTypeError if a MASK survives in a type slot. Inverted box pairs (r < l or
// b < t, possible in model output) are swapped, and elements re-sorted canonically.
Layout detokenize(const TokenSeq& seq, const Vocabulary& vocab);

// number of leading non-PAD blocks
int real_blocks(const TokenSeq& seq, const Vocabulary& vocab);

}  // namespace hd
