#include "attnprune/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "attnprune/errors.hpp"

namespace attnprune {

namespace {

// Columns [h*n_c, (h+1)*n_c) of m.
Matrix head_cols(const Matrix& m, int head, int n_c) {
  Matrix out(m.rows(), n_c);
  for (int i = 0; i < m.rows(); ++i)
    for (int c = 0; c < n_c; ++c) out.at(i, c) = m.at(i, head * n_c + c);
  return out;
}

void put_head_cols(Matrix& dst, const Matrix& src, int head, int n_c) {
  for (int i = 0; i < src.rows(); ++i)
    for (int c = 0; c < n_c; ++c) dst.at(i, head * n_c + c) = src.at(i, c);
}

void check_input(const AttentionBlock& block, const Matrix& x) {
  block.validate();
  if (block.n_h_qk != block.n_h_vo) {
    throw ShapeError("attention_forward: head-count mismatch, QK side has " +
                     std::to_string(block.n_h_qk) + " heads, VO side has " +
                     std::to_string(block.n_h_vo));
  }
  if (x.cols() != block.d) {
    throw ShapeError("attention_forward: input is " + x.shape_str() + ", block expects n x " +
                     std::to_string(block.d));
  }
}

}  // namespace

void PruneMask::add_qk(int head, int channel) {
  const auto p = std::make_pair(head, channel);
  const auto it = std::lower_bound(qk_.begin(), qk_.end(), p);
  if (it == qk_.end() || *it != p) qk_.insert(it, p);
}

void PruneMask::add_vo(int head, int channel) {
  const auto p = std::make_pair(head, channel);
  const auto it = std::lower_bound(vo_.begin(), vo_.end(), p);
  if (it == vo_.end() || *it != p) vo_.insert(it, p);
}

bool PruneMask::contains_qk(int head, int channel) const {
  return std::binary_search(qk_.begin(), qk_.end(), std::make_pair(head, channel));
}

bool PruneMask::contains_vo(int head, int channel) const {
  return std::binary_search(vo_.begin(), vo_.end(), std::make_pair(head, channel));
}

void AttentionBlock::validate() const {
  if (d <= 0 || n_h_qk <= 0 || n_c_qk <= 0 || n_h_vo <= 0 || n_c_vo <= 0) {
    throw ShapeError("attention block: non-positive factorization (d=" + std::to_string(d) +
                     ", n_h_qk=" + std::to_string(n_h_qk) + ", n_c_qk=" + std::to_string(n_c_qk) +
                     ", n_h_vo=" + std::to_string(n_h_vo) + ", n_c_vo=" + std::to_string(n_c_vo) +
                     ")");
  }
  if (w_q.rows() != qk_rows() || w_k.rows() != qk_rows()) {
    throw ShapeError("attention block: w_q " + w_q.shape_str() + " and w_k " + w_k.shape_str() +
                     " must both have n_h_qk*n_c_qk = " + std::to_string(qk_rows()) + " rows");
  }
  if (w_v.rows() != vo_rows() || w_o.cols() != vo_rows()) {
    throw ShapeError("attention block: w_v rows (" + w_v.shape_str() + ") and w_o cols (" +
                     w_o.shape_str() + ") must both equal n_h_vo*n_c_vo = " +
                     std::to_string(vo_rows()));
  }
  if (w_q.cols() != d || w_k.cols() != d || w_v.cols() != d || w_o.rows() != d) {
    throw ShapeError("attention block: embed dimension mismatch, d=" + std::to_string(d) +
                     " vs w_q " + w_q.shape_str() + ", w_k " + w_k.shape_str() + ", w_v " +
                     w_v.shape_str() + ", w_o " + w_o.shape_str());
  }
  if (scale <= 0.0) {
    throw ShapeError("attention block: scale must be positive");
  }
}

AttentionBlock make_attention_block(int d, int n_h, int n_c, Rng& rng, double init_std) {
  return make_attention_block(d, n_h, n_c, n_h, n_c, rng, init_std);
}

AttentionBlock make_attention_block(int d, int n_h_qk, int n_c_qk, int n_h_vo, int n_c_vo,
                                    Rng& rng, double init_std) {
  AttentionBlock b;
  b.d = d;
  b.n_h_qk = n_h_qk;
  b.n_c_qk = n_c_qk;
  b.n_h_vo = n_h_vo;
  b.n_c_vo = n_c_vo;
  b.w_q = random_normal_matrix(rng, n_h_qk * n_c_qk, d, init_std);
  b.w_k = random_normal_matrix(rng, n_h_qk * n_c_qk, d, init_std);
  b.w_v = random_normal_matrix(rng, n_h_vo * n_c_vo, d, init_std);
  b.w_o = random_normal_matrix(rng, d, n_h_vo * n_c_vo, init_std);
  b.scale = 1.0 / std::sqrt(static_cast<double>(n_c_qk));
  b.validate();
  return b;
}

Matrix attention_forward(const AttentionBlock& block, const Matrix& x) {
  check_input(block, x);
  const int n = x.rows();
  const Matrix q = matmul(x, transpose(block.w_q));  // n x qk_rows
  const Matrix k = matmul(x, transpose(block.w_k));
  const Matrix v = matmul(x, transpose(block.w_v));  // n x vo_rows

  Matrix z(n, block.vo_rows());
  for (int h = 0; h < block.n_h_qk; ++h) {
    const Matrix qh = head_cols(q, h, block.n_c_qk);
    const Matrix kh = head_cols(k, h, block.n_c_qk);
    const Matrix vh = head_cols(v, h, block.n_c_vo);
    const Matrix attn = softmax_rows(scale(matmul(qh, transpose(kh)), block.scale));
    put_head_cols(z, matmul(attn, vh), h, block.n_c_vo);
  }
  return matmul(z, transpose(block.w_o));
}

Matrix attention_head_logits(const AttentionBlock& block, const Matrix& x, int head) {
  check_input(block, x);
  if (head < 0 || head >= block.n_h_qk) {
    throw ShapeError("attention_head_logits: head " + std::to_string(head) + " out of range");
  }
  const Matrix q = matmul(x, transpose(block.w_q));
  const Matrix k = matmul(x, transpose(block.w_k));
  const Matrix qh = head_cols(q, head, block.n_c_qk);
  const Matrix kh = head_cols(k, head, block.n_c_qk);
  return scale(matmul(qh, transpose(kh)), block.scale);
}

AttentionBlock masked_copy(const AttentionBlock& block, const PruneMask& mask) {
  block.validate();
  AttentionBlock out = block;
  for (const auto& [h, c] : mask.qk()) {
    if (h < 0 || h >= block.n_h_qk || c < 0 || c >= block.n_c_qk) {
      throw ValidationError("mask: QK index (head " + std::to_string(h) + ", channel " +
                            std::to_string(c) + ") out of range for " +
                            std::to_string(block.n_h_qk) + "x" + std::to_string(block.n_c_qk));
    }
    const int r = h * block.n_c_qk + c;
    for (int j = 0; j < block.d; ++j) {
      out.w_q.at(r, j) = 0.0;
      out.w_k.at(r, j) = 0.0;
    }
  }
  for (const auto& [h, c] : mask.vo()) {
    if (h < 0 || h >= block.n_h_vo || c < 0 || c >= block.n_c_vo) {
      throw ValidationError("mask: VO index (head " + std::to_string(h) + ", channel " +
                            std::to_string(c) + ") out of range for " +
                            std::to_string(block.n_h_vo) + "x" + std::to_string(block.n_c_vo));
    }
    const int r = h * block.n_c_vo + c;
    for (int j = 0; j < block.d; ++j) {
      out.w_v.at(r, j) = 0.0;
      out.w_o.at(j, r) = 0.0;
    }
  }
  return out;
}

Matrix attention_forward_masked(const AttentionBlock& block, const PruneMask& mask,
                                const Matrix& x) {
  return attention_forward(masked_copy(block, mask), x);
}

AttentionGradients attention_backward(const AttentionBlock& block, const Matrix& x,
                                      const Matrix& upstream) {
  check_input(block, x);
  if (upstream.rows() != x.rows() || upstream.cols() != block.d) {
    throw ShapeError("attention_backward: upstream is " + upstream.shape_str() + ", expected " +
                     std::to_string(x.rows()) + "x" + std::to_string(block.d));
  }
  const int n = x.rows();

  // Recompute the forward intermediates.
  const Matrix q = matmul(x, transpose(block.w_q));
  const Matrix k = matmul(x, transpose(block.w_k));
  const Matrix v = matmul(x, transpose(block.w_v));

  Matrix z(n, block.vo_rows());
  std::vector<Matrix> attn_per_head(block.n_h_qk);
  for (int h = 0; h < block.n_h_qk; ++h) {
    const Matrix qh = head_cols(q, h, block.n_c_qk);
    const Matrix kh = head_cols(k, h, block.n_c_qk);
    const Matrix vh = head_cols(v, h, block.n_c_vo);
    attn_per_head[h] = softmax_rows(scale(matmul(qh, transpose(kh)), block.scale));
    put_head_cols(z, matmul(attn_per_head[h], vh), h, block.n_c_vo);
  }

  // O = Z W_o^T
  const Matrix d_z = matmul(upstream, block.w_o);            // n x vo_rows
  const Matrix g_wo = matmul(transpose(upstream), z);        // d x vo_rows

  Matrix d_q(n, block.qk_rows());
  Matrix d_k(n, block.qk_rows());
  Matrix d_v(n, block.vo_rows());
  for (int h = 0; h < block.n_h_qk; ++h) {
    const Matrix qh = head_cols(q, h, block.n_c_qk);
    const Matrix kh = head_cols(k, h, block.n_c_qk);
    const Matrix vh = head_cols(v, h, block.n_c_vo);
    const Matrix& attn = attn_per_head[h];
    const Matrix d_zh = head_cols(d_z, h, block.n_c_vo);

    const Matrix d_attn = matmul(d_zh, transpose(vh));  // n x n
    put_head_cols(d_v, matmul(transpose(attn), d_zh), h, block.n_c_vo);

    // Softmax backward, row-wise: dL = A .* (dA - rowdot(dA, A)).
    Matrix d_logits(n, n);
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += d_attn.at(i, j) * attn.at(i, j);
      for (int j = 0; j < n; ++j) {
        d_logits.at(i, j) = attn.at(i, j) * (d_attn.at(i, j) - dot);
      }
    }

    put_head_cols(d_q, scale(matmul(d_logits, kh), block.scale), h, block.n_c_qk);
    put_head_cols(d_k, scale(matmul(transpose(d_logits), qh), block.scale), h, block.n_c_qk);
  }

  AttentionGradients g;
  g.w_q = matmul(transpose(d_q), x);  // qk_rows x d
  g.w_k = matmul(transpose(d_k), x);
  g.w_v = matmul(transpose(d_v), x);  // vo_rows x d
  g.w_o = g_wo;
  g.x = add(add(matmul(d_q, block.w_q), matmul(d_k, block.w_k)), matmul(d_v, block.w_v));
  return g;
}

}  // namespace attnprune
