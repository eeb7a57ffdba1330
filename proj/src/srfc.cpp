#include "rfc/srfc.hpp"

#include <cmath>

#include "rfc/errors.hpp"

namespace rfc {

Tensor position_encoding(const RegionGeometry& geo) {
  Tensor enc({geo.boxes.size(), 4});
  for (std::size_t i = 0; i < geo.boxes.size(); ++i) {
    const RegionBox& b = geo.boxes[i];
    if (!b.present) continue;
    enc.at(i, 0) = b.y;
    enc.at(i, 1) = b.x;
    enc.at(i, 2) = b.h;
    enc.at(i, 3) = b.w;
  }
  return enc;
}

Tensor position_similarity(const RegionGeometry& geo) {
  const std::size_t n = geo.boxes.size();
  check_valid(geo.grid_h >= 1 && geo.grid_w >= 1,
              "position_similarity: empty grid");
  Tensor ps({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double dy =
          (geo.boxes[i].y - geo.boxes[j].y) / static_cast<double>(geo.grid_h);
      const double dx =
          (geo.boxes[i].x - geo.boxes[j].x) / static_cast<double>(geo.grid_w);
      ps.at(i, j) = 1.0 - 2.0 * std::sqrt(dy * dy + dx * dx);
    }
  return ps;
}

SrfcOut srfc_forward(const Var& f, const RegionGeometry& geo,
                     const SrfcParams& p) {
  check_dim(f.value().rank() == 2, "srfc_forward: f must be N x D");
  const std::size_t n = f.value().dim(0), d = f.value().dim(1);
  check_dim(p.appearance.value().rank() == 2 && p.appearance.value().dim(0) == d,
            "srfc_forward: appearance head shape mismatch");
  const std::size_t k = p.appearance.value().dim(1);
  check_valid(k >= 1 && k < n, "srfc_forward: cluster count must satisfy 1 <= K < N");
  check_dim(geo.boxes.size() == n, "srfc_forward: geometry region count mismatch");
  check_dim(p.pos_hidden.value().dim(0) == 4 && p.pos_hidden.value().dim(1) == d &&
                p.pos_out.value().dim(0) == d && p.pos_out.value().dim(1) == k,
            "srfc_forward: position head shape mismatch");

  SrfcOut out;
  out.assign.appearance = softmax_rows(matmul(f, p.appearance));
  // Position descriptors are mask geometry: constants in the graph.
  Var pos_desc = constant(position_encoding(geo));
  out.assign.position =
      softmax_rows(matmul(relu(matmul(pos_desc, p.pos_hidden)), p.pos_out));
  out.assign.combined =
      scale(add(out.assign.appearance, out.assign.position), 0.5);
  out.assign.encoding = l1_normalize_columns(out.assign.combined);
  out.assign.decoding = transpose(out.assign.combined);
  Var clusters_raw = matmul(transpose(out.assign.encoding), f);
  out.assign.clusters =
      add_rowvec(matmul(clusters_raw, p.enc_w), p.enc_b);
  Var decoded = matmul(out.assign.combined, out.assign.clusters);
  Var delta = add_rowvec(matmul(decoded, p.dec_w), p.dec_b);
  out.o = add(f, delta);
  return out;
}

Var appearance_regularizer(const Var& sa, const Var& f) {
  check_dim(sa.value().rank() == 2 && f.value().rank() == 2 &&
                sa.value().dim(0) == f.value().dim(0),
            "appearance_regularizer: row count mismatch");
  const std::size_t n = sa.value().dim(0);
  std::vector<Var> sa_rows, f_rows;
  sa_rows.reserve(n);
  f_rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    sa_rows.push_back(row(sa, i));
    f_rows.push_back(row(f, i));
  }
  std::vector<Var> terms;
  terms.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      terms.push_back(abs(sub(cosine(sa_rows[i], sa_rows[j]),
                              cosine(f_rows[i], f_rows[j]))));
  return sum_vars(terms);
}

Var position_regularizer(const Var& sp, const Tensor& ps) {
  check_dim(sp.value().rank() == 2, "position_regularizer: S^P must be N x K");
  const std::size_t n = sp.value().dim(0);
  check_dim(ps.rank() == 2 && ps.dim(0) == n && ps.dim(1) == n,
            "position_regularizer: similarity table must be N x N");
  std::vector<Var> sp_rows;
  sp_rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) sp_rows.push_back(row(sp, i));
  std::vector<Var> terms;
  terms.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      terms.push_back(abs(sub(cosine(sp_rows[i], sp_rows[j]),
                              constant(Tensor::scalar(ps.at(i, j))))));
  return sum_vars(terms);
}

}  // namespace rfc
