#include "rfc/trfc.hpp"

#include "rfc/errors.hpp"

namespace rfc {

TrfcOut trfc_forward(const std::vector<Var>& o_frames, const TrfcParams& p) {
  const std::size_t t_len = o_frames.size();
  check_valid(t_len >= 2,
              "trfc_forward: unsupported sequence, needs at least 2 frames");
  check_dim(o_frames[0].value().rank() == 2, "trfc_forward: frames must be N x D");
  const std::size_t n = o_frames[0].value().dim(0),
                    d = o_frames[0].value().dim(1);
  for (const Var& f : o_frames)
    check_dim(f.value().rank() == 2 && f.value().dim(0) == n &&
                  f.value().dim(1) == d,
              "trfc_forward: frame shape mismatch");
  check_dim(p.gate_w_raw.value().rank() == 2 && p.gate_w_raw.value().dim(0) == d &&
                p.gate_w_raw.value().dim(1) == d &&
                p.gate_b.value().size() == d,
            "trfc_forward: gate parameter shape mismatch");

  // Positivity constraint applied once per forward; shared by every query.
  Var w_eff = relu(p.gate_w_raw);
  Var ones_row = constant(Tensor::full({1, d}, 1.0));

  std::vector<std::vector<Var>> rows(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    rows[t].reserve(n);
    for (std::size_t i = 0; i < n; ++i) rows[t].push_back(row(o_frames[t], i));
  }

  TrfcOut out;
  out.alpha.resize(t_len);
  out.e.reserve(t_len);
  out.gates.reserve(t_len);
  out.contexts.reserve(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    std::vector<Var> e_rows, g_rows, v_rows;
    e_rows.reserve(n);
    g_rows.reserve(n);
    v_rows.reserve(n);
    out.alpha[t].reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Var> scores;
      std::vector<Var> memory;
      scores.reserve(t_len - 1);
      memory.reserve(t_len - 1);
      for (std::size_t k = 0; k < t_len; ++k) {
        if (k == t) continue;
        scores.push_back(dot(rows[t][i], rows[k][i]));
        memory.push_back(rows[k][i]);
      }
      Var alpha = softmax_rows(stack_scalars(scores));
      Var v = matmul(alpha, concat_rows(memory));
      Var g = sigmoid(add_rowvec(matmul(rows[t][i], w_eff), p.gate_b));
      Var e = add(mul(g, rows[t][i]), mul(sub(ones_row, g), v));
      out.alpha[t].push_back(alpha);
      e_rows.push_back(e);
      g_rows.push_back(g);
      v_rows.push_back(v);
    }
    out.e.push_back(concat_rows(e_rows));
    out.gates.push_back(concat_rows(g_rows));
    out.contexts.push_back(concat_rows(v_rows));
  }
  return out;
}

}  // namespace rfc
