#pragma once
#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

namespace hd {

enum class TokenKind { coord, type, special };

// Token index layout: coordinate bins [0, K), real types [K, K+C), MASK at K+C,
// then SOS/EOS/SEP/PAD. MASK counts as kind=type (it lives in the type transition
// block); SOS/EOS/SEP/PAD are special and frozen under corruption.
struct Vocabulary {
    int K = 0;
    std::vector<std::string> type_names;  // sorted; id = index

    Vocabulary() = default;
    Vocabulary(int k, std::vector<std::string> names) : K(k), type_names(std::move(names)) {
        if (K < 2) throw std::invalid_argument("Vocabulary: K must be >= 2");
        if (type_names.empty()) throw std::invalid_argument("Vocabulary: no type names");
        // canonical element order is alphabetical by type name; keeping the table
        // sorted makes type_id order equal name order
        std::sort(type_names.begin(), type_names.end());
        type_names.erase(std::unique(type_names.begin(), type_names.end()), type_names.end());
    }

    int C() const { return int(type_names.size()); }
    int V() const { return K + C() + 5; }
    int mask() const { return K + C(); }
    int sos() const { return K + C() + 1; }
    int eos() const { return K + C() + 2; }
    int sep() const { return K + C() + 3; }
    int pad() const { return K + C() + 4; }

    int coord_token(int bin) const {
        if (bin < 0 || bin >= K) throw std::out_of_range("coord_token: bin out of range");
        return bin;
    }
    int type_token(int type_id) const {
        if (type_id < 0 || type_id >= C()) throw std::out_of_range("type_token: id out of range");
        return K + type_id;
    }

    TokenKind kind(int token) const {
        if (token < 0 || token >= V()) throw std::out_of_range("kind: token out of range");
        if (token < K) return TokenKind::coord;
        if (token <= mask()) return TokenKind::type;  // MASK included
        return TokenKind::special;
    }

    bool is_mask(int token) const { return token == mask(); }

    int coord_bin(int token) const {
        if (token < 0 || token >= K) throw std::invalid_argument("coord_bin: not a coordinate token");
        return token;
    }
    // real type id; MASK is not a real type
    int type_id(int token) const {
        if (token < K || token >= mask()) throw std::invalid_argument("type_id: not a real type token");
        return token - K;
    }

    int type_id_by_name(const std::string& name) const {
        auto it = std::lower_bound(type_names.begin(), type_names.end(), name);
        if (it == type_names.end() || *it != name) return -1;
        return int(it - type_names.begin());
    }
};

}  // namespace hd
