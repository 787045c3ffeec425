#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "attnprune/matrix.hpp"
#include "attnprune/rng.hpp"

namespace attnprune {

// Structural removals for one attention block, as (head, channel) pairs.
// The QK side and the VO side are decoupled: the only shape constraints in
// the block are that w_q/w_k share their output dimension and that w_v's
// output matches w_o's input, so each side carries its own removal set.
class PruneMask {
 public:
  void add_qk(int head, int channel);
  void add_vo(int head, int channel);

  const std::vector<std::pair<int, int>>& qk() const { return qk_; }
  const std::vector<std::pair<int, int>>& vo() const { return vo_; }

  bool contains_qk(int head, int channel) const;
  bool contains_vo(int head, int channel) const;
  bool empty() const { return qk_.empty() && vo_.empty(); }

 private:
  // kept sorted and unique for deterministic iteration
  std::vector<std::pair<int, int>> qk_;
  std::vector<std::pair<int, int>> vo_;
};

// One self-attention block: four projection matrices with an explicit
// (n_h, n_c) factorization per side. Row r of a projection belongs to head
// r / n_c, channel r % n_c; every head of one side has the same channel
// count. The softmax logit scale is frozen at 1/sqrt(n_c_qk at
// construction) and survives pruning unchanged, which is what makes masked
// and structural pruning exactly equivalent.
struct AttentionBlock {
  int d = 0;  // embed dimension; fixed, it is the block's external interface

  int n_h_qk = 0;
  int n_c_qk = 0;
  int n_h_vo = 0;
  int n_c_vo = 0;

  Matrix w_q;  // (n_h_qk*n_c_qk) x d
  Matrix w_k;  // (n_h_qk*n_c_qk) x d
  Matrix w_v;  // (n_h_vo*n_c_vo) x d
  Matrix w_o;  // d x (n_h_vo*n_c_vo)

  double scale = 0.0;

  int qk_rows() const { return n_h_qk * n_c_qk; }
  int vo_rows() const { return n_h_vo * n_c_vo; }
  std::size_t param_count() const {
    return w_q.size() + w_k.size() + w_v.size() + w_o.size();
  }

  // Throws ShapeError if any of the factorization/shape invariants fail.
  void validate() const;
};

AttentionBlock make_attention_block(int d, int n_h, int n_c, Rng& rng, double init_std = 0.2);
AttentionBlock make_attention_block(int d, int n_h_qk, int n_c_qk, int n_h_vo, int n_c_vo,
                                    Rng& rng, double init_std = 0.2);

struct AttentionGradients {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;
  Matrix w_o;
  Matrix x;
};

// x is n tokens by d. Per head h: A_h = softmax(scale * Q_h K_h^T),
// Z_h = A_h V_h; the Z_h concatenate and project through w_o. Requires
// n_h_qk == n_h_vo (mismatched head counts are representable but rejected;
// none of the implemented pruning patterns produce them).
Matrix attention_forward(const AttentionBlock& block, const Matrix& x);

// Forward of a copy whose masked weights are zeroed: for each removed QK
// (h, c), row h*n_c_qk+c of both w_q and w_k; for each removed VO (h, c),
// row h*n_c_vo+c of w_v and column h*n_c_vo+c of w_o. Simulates pruning
// without a structural change.
Matrix attention_forward_masked(const AttentionBlock& block, const PruneMask& mask,
                                const Matrix& x);

// The zeroed copy used by attention_forward_masked. Throws on out-of-range
// mask indices.
AttentionBlock masked_copy(const AttentionBlock& block, const PruneMask& mask);

// Exact reverse-mode gradients of sum(upstream .* forward(block, x)) with
// respect to the four weight matrices and the input.
AttentionGradients attention_backward(const AttentionBlock& block, const Matrix& x,
                                      const Matrix& upstream);

// Pre-softmax logit matrix of one head (n x n), scale included. Exposed for
// the logit-delta property of channel removal.
Matrix attention_head_logits(const AttentionBlock& block, const Matrix& x, int head);

}  // namespace attnprune
