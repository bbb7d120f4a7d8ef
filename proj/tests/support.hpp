#pragma once

// Shared fixtures and independent oracles for the test suites. The oracles
// deliberately avoid the library's kernels: they recompute results from the
// definitions with plain nested loops.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "c3/c3.hpp"

namespace c3::fixtures {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.data[r * t.cols() + c];
  return m;
}

inline Matrix mat_mul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < b.size(); ++p) s += a[i][p] * b[p][j];
      c[i][j] = s;
    }
  return c;
}

inline std::vector<double> layer_norm_row(const std::vector<double>& x, const Tensor& gain, const Tensor& bias) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean) / n;
  std::vector<double> y(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) y[c] = gain.data[c] * (x[c] - mean) / std::sqrt(var + 1e-6) + bias.data[c];
  return y;
}

/// Final token states for the unmasked members followed by the item, from
/// the textbook definition of the encoder (evaluation mode).
inline Matrix reference_encode(const C3Model& m, const std::vector<std::size_t>& members, std::size_t item) {
  const std::size_t d = m.config.dim, heads = m.config.heads, dk = d / heads;
  Matrix h;
  for (auto u : members) h.push_back(to_matrix(m.user_emb)[u]);
  h.push_back(to_matrix(m.item_emb)[item]);
  const std::size_t T = h.size();
  for (const auto& L : m.layers) {
    const Matrix q = mat_mul(h, to_matrix(L.wq)), k = mat_mul(h, to_matrix(L.wk)), v = mat_mul(h, to_matrix(L.wv));
    Matrix concat(T, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> w(T);
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += q[i][hd * dk + c] * k[j][hd * dk + c];
          w[j] = s / std::sqrt(static_cast<double>(dk));
        }
        const double mx = *std::max_element(w.begin(), w.end());
        double z = 0.0;
        for (double& x : w) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < T; ++j)
          for (std::size_t c = 0; c < dk; ++c) concat[i][hd * dk + c] += w[j] / z * v[j][hd * dk + c];
      }
    const Matrix attn = mat_mul(concat, to_matrix(L.wo));
    Matrix next(T);
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> r(d);
      for (std::size_t c = 0; c < d; ++c) r[c] = h[i][c] + attn[i][c];
      const auto n1 = layer_norm_row(r, L.ln1_gain, L.ln1_bias);
      std::vector<double> hid(L.w1.cols());
      for (std::size_t j = 0; j < hid.size(); ++j) {
        double s = L.b1.data[j];
        for (std::size_t c = 0; c < d; ++c) s += n1[c] * L.w1.data[c * hid.size() + j];
        hid[j] = s > 0.0 ? s : 0.0;
      }
      std::vector<double> r2(d);
      for (std::size_t c = 0; c < d; ++c) {
        double s = L.b2.data[c];
        for (std::size_t j = 0; j < hid.size(); ++j) s += hid[j] * L.w2.data[j * d + c];
        r2[c] = n1[c] + s;
      }
      next[i] = layer_norm_row(r2, L.ln2_gain, L.ln2_bias);
    }
    h = std::move(next);
  }
  return h;
}

/// σ(W·mean(tokens) + b) for the unmasked members and the item.
inline double reference_score(const C3Model& m, const std::vector<std::size_t>& members, std::size_t item) {
  const Matrix h = reference_encode(m, members, item);
  double z = m.head_b.data[0];
  for (std::size_t c = 0; c < m.config.dim; ++c) {
    double mean = 0.0;
    for (const auto& row : h) mean += row[c];
    z += m.head_w.data[c] * mean / static_cast<double>(h.size());
  }
  return 1.0 / (1.0 + std::exp(-z));
}

/// NDCG@K of one single-relevant-item list from the general DCG/IDCG definition.
inline double brute_force_ndcg(std::size_t rank, std::size_t list_len, std::size_t k) {
  std::vector<int> rel(list_len, 0);
  rel[rank - 1] = 1;
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, list_len); ++i) dcg += (std::pow(2.0, rel[i]) - 1.0) / std::log2(i + 2.0);
  std::vector<int> ideal = rel;
  std::sort(ideal.rbegin(), ideal.rend());
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, list_len); ++i) idcg += (std::pow(2.0, ideal[i]) - 1.0) / std::log2(i + 2.0);
  return dcg / idcg;
}

/// Rank of `target` among all items that are not positives of the entity,
/// by sorting the whole catalog.
template <class Score>
std::size_t exhaustive_rank(const InteractionDataset& ds, Task task, std::size_t entity, std::size_t target,
                            Score score) {
  std::vector<std::pair<double, std::size_t>> list{{score(target), target}};
  for (std::size_t i = 0; i < ds.num_items; ++i)
    if (!ds.is_positive(task, entity, i)) list.emplace_back(score(i), i);
  std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (std::size_t r = 0; r < list.size(); ++r)
    if (list[r].second == target) return r + 1;
  return 0;
}

inline InteractionDataset split_synthetic(std::size_t users, std::size_t items, std::size_t groups,
                                          std::uint64_t seed = 7) {
  SyntheticConfig sc;
  sc.num_users = users;
  sc.num_items = items;
  sc.num_groups = groups;
  sc.seed = seed;
  return leave_one_out_split(generate_synthetic(sc).data, seed);
}

/// A four-row group batch: two groups, one positive and one negative each,
/// with masking views on both positives so that InfoNCE is non-degenerate.
inline TrainBatch four_row_batch(std::size_t num_users, std::size_t num_items, std::uint64_t seed) {
  Rng rng(seed, "four-row-batch");
  TrainBatch b;
  b.task = Task::group;
  b.max_members = 4;
  const std::size_t sizes[2] = {4, 3};
  for (std::size_t g = 0; g < 2; ++g) {
    std::vector<std::size_t> members;
    while (members.size() < sizes[g]) {
      const auto u = rng.below(num_users);
      if (std::find(members.begin(), members.end(), u) == members.end()) members.push_back(u);
    }
    const std::size_t pos = rng.below(num_items);
    std::size_t neg = rng.below(num_items);
    while (neg == pos) neg = rng.below(num_items);
    for (const auto item : {pos, neg}) {
      for (std::size_t j = 0; j < b.max_members; ++j) {
        b.member_ids.push_back(j < members.size() ? members[j] : num_users);
        b.member_mask.push_back(j < members.size() ? 1 : 0);
      }
      b.item_ids.push_back(item);
      b.labels.push_back(item == pos ? 1 : 0);
      b.group_ids.push_back(g);
    }
    AugmentedView v;
    v.row = 2 * g;
    v.mask_a.assign(b.member_mask.end() - 2 * b.max_members, b.member_mask.end() - b.max_members);
    v.mask_b = v.mask_a;
    v.mask_a[0] = 0;
    v.mask_b[sizes[g] - 1] = 0;
    b.aug_views.push_back(v);
  }
  return b;
}

/// Temporary directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("c3-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace c3::fixtures
