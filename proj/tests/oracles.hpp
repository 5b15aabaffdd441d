#pragma once

// Slow reference scorers used to cross-check the ROUGE implementation.

#include "camrw/eval.hpp"
#include "camrw/rng.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

namespace camrw::testing {

inline std::vector<std::vector<int>> all_ngrams(const std::vector<int>& s, int n) {
  std::vector<std::vector<int>> out;
  for (int i = 0; i + n <= static_cast<int>(s.size()); ++i) out.emplace_back(s.begin() + i, s.begin() + i + n);
  return out;
}

// Clipped overlap by repeated linear scans: each candidate n-gram consumes
// one unused identical reference n-gram.
inline double brute_ngram_f1(const std::vector<int>& cand, const std::vector<int>& ref, int n) {
  const auto c = all_ngrams(cand, n);
  const auto r = all_ngrams(ref, n);
  std::vector<bool> used(r.size(), false);
  int overlap = 0;
  for (const auto& g : c) {
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (!used[j] && r[j] == g) {
        used[j] = true;
        ++overlap;
        break;
      }
    }
  }
  const double p = c.empty() ? 0.0 : static_cast<double>(overlap) / static_cast<double>(c.size());
  const double rc = r.empty() ? 0.0 : static_cast<double>(overlap) / static_cast<double>(r.size());
  return p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
}

inline bool is_subsequence(const std::vector<int>& sub, const std::vector<int>& seq) {
  std::size_t i = 0;
  for (int t : seq) {
    if (i < sub.size() && sub[i] == t) ++i;
  }
  return i == sub.size();
}

// Longest common subsequence by enumerating every subsequence of the
// candidate (lengths stay small in tests).
inline int brute_lcs(const std::vector<int>& a, const std::vector<int>& b) {
  int best = 0;
  const std::uint32_t n = static_cast<std::uint32_t>(a.size());
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    std::vector<int> sub;
    for (std::uint32_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) sub.push_back(a[i]);
    }
    if (static_cast<int>(sub.size()) > best && is_subsequence(sub, b)) best = static_cast<int>(sub.size());
  }
  return best;
}

inline RougeScores brute_rouge(const std::vector<int>& cand, const std::vector<int>& ref) {
  RougeScores s;
  s.rouge1_f = brute_ngram_f1(cand, ref, 1);
  s.rouge2_f = brute_ngram_f1(cand, ref, 2);
  const double l = brute_lcs(cand, ref);
  const double p = cand.empty() ? 0.0 : l / static_cast<double>(cand.size());
  const double r = ref.empty() ? 0.0 : l / static_cast<double>(ref.size());
  s.rougeL_f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  return s;
}

// Token ids in [kNumReserved, kNumReserved + vocab), no padding.
inline std::vector<int> random_sequence(Rng& rng, int max_len, int vocab) {
  std::vector<int> s(static_cast<std::size_t>(rng.range(0, max_len)));
  for (int& t : s) t = kNumReserved + rng.range(0, vocab - 1);
  return s;
}

}  // namespace camrw::testing
