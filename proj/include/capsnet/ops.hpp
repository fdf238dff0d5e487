#pragma once

#include "capsnet/tensor.hpp"

namespace capsnet {

// Every op computes eagerly and, when `tape` is non-null and some input
// carries grad, records a backward rule on it. Gradients accumulate into
// inputs with requires_grad set.

// Elementwise; b must match a's shape exactly or be a scalar.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape = nullptr);

// Reduce all elements to a scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, Tape<T>* tape = nullptr);

// a [m,k] x b [k,n] -> [m,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b,
                 Tape<T>* tape = nullptr);

// Cross-correlation. x [C_in,H,W], kernel [C_out,C_in,kH,kW], bias [C_out]
// or undefined -> [C_out,H',W'] with H' = (H + 2*padding - kH)/stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride, int padding,
                 Tape<T>* tape = nullptr);

// Softmax along `axis` (negative counts from the end).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis, Tape<T>* tape = nullptr);

// Normalizes each slice along `axis` to zero mean and unit population
// variance, then applies gain/bias (each [shape[axis]], undefined = identity).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, int axis, T eps,
                     const Tensor<T>& gain, const Tensor<T>& bias,
                     Tape<T>* tape = nullptr);

// logits [C], target class index -> scalar -log softmax(logits)[target].
template <typename T>
Tensor<T> multiclass_ce(const Tensor<T>& logits, int64_t target,
                        Tape<T>* tape = nullptr);

// logits [C], target [C] of 0/1 indicators -> scalar mean over classes of
// the per-class sigmoid cross-entropy.
template <typename T>
Tensor<T> binary_ce(const Tensor<T>& logits, const Tensor<T>& target,
                    Tape<T>* tape = nullptr);

// ---- capsule kernels ----
// All carry a leading window axis G; fully-connected layers use G = 1 and
// weights are shared across windows.

// children [G,Nc,d_in]; weights [Nc,Np,d_out,d_in] (vector poses) or
// [Nc,Np,r,r] (matrix poses, d_in = d_out = r*r) -> votes [G,Nc,Np,d_out].
template <typename T>
Tensor<T> capsule_votes(const Tensor<T>& children, const Tensor<T>& weights,
                        PoseStructure structure, Tape<T>* tape = nullptr);

// votes [G,Nc,Np,d], parents [G,Np,d] -> dot products [G,Nc,Np].
template <typename T>
Tensor<T> capsule_agreements(const Tensor<T>& votes, const Tensor<T>& parents,
                             Tape<T>* tape = nullptr);

// coeff [G,Nc,Np], votes [G,Nc,Np,d] -> per-parent sums [G,Np,d].
template <typename T>
Tensor<T> capsule_weighted_sum(const Tensor<T>& coeff, const Tensor<T>& votes,
                               Tape<T>* tape = nullptr);

// grid [H,W,N,d] -> windows [H'*W', k*k*N, d] (no padding); window rows are
// ordered (kernel position, capsule type).
template <typename T>
Tensor<T> unfold_capsules(const Tensor<T>& grid, int kernel, int stride,
                          Tape<T>* tape = nullptr);

// Norm-bounding nonlinearity over the last axis:
// s -> (|s|^2 / (1+|s|^2)) * s/|s|.
template <typename T>
Tensor<T> squash(const Tensor<T>& x, Tape<T>* tape = nullptr);

// poses [N,d], w [d], b [1] -> one shared affine logit per row, [N].
template <typename T>
Tensor<T> shared_linear(const Tensor<T>& poses, const Tensor<T>& w,
                        const Tensor<T>& b, Tape<T>* tape = nullptr);

// x [C,H,W] with C = types*d -> [H,W,types,d]; channel t*d+k becomes pose
// coordinate k of capsule type t.
template <typename T>
Tensor<T> chw_to_capsule_grid(const Tensor<T>& x, int64_t types, int64_t d,
                              Tape<T>* tape = nullptr);

}  // namespace capsnet
