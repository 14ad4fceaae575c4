"""Detail fusion via single-head cross attention.

The per-scale tokens act as queries; the fine-grained big map provides keys
and values. Attended detail features are concatenated onto the original
tokens along the channel axis, so the token count never grows and the
original token values pass through untouched in the first half of the
output channels.
"""

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor, TensorError

LN_PLACEMENTS = ("pre", "post")


@dataclass
class FusionWeights:
    """Q/K/V projections with their layer norms.

    Queries and key/value inputs are normalized independently. With `pre`
    placement the norm is applied before each linear map, with `post` after
    it. The attention scale is 1/sqrt(d_k) with d_k the projected feature
    dimension (the column count of wq).
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    ln_q_gamma: Tensor
    ln_q_beta: Tensor
    ln_kv_gamma: Tensor
    ln_kv_beta: Tensor
    ln_placement: str = "pre"
    eps: float = 1e-5

    def __post_init__(self):
        if self.ln_placement not in LN_PLACEMENTS:
            raise TensorError(f"unknown ln placement {self.ln_placement!r}")

    @property
    def d_k(self):
        return self.wq.shape[1]


@dataclass
class FusionResult:
    fused: Tensor       # (n, 2*C')
    attention: Tensor   # (n, m), rows sum to 1


def _project(x, w, b, gamma, beta, placement, eps):
    if placement == "pre":
        return T.linear(T.layer_norm(x, gamma, beta, eps), w, b)
    return T.layer_norm(T.linear(x, w, b), gamma, beta, eps)


def fuse_detail(small, big, weights):
    """Cross-attend detail features from `big` into `small` and concat.

    small: (n, C') query tokens; big: (m, C') key/value tokens. Returns the
    fused (n, 2*C') tokens together with the (n, m) attention weights.
    """
    if small.ndim != 2 or big.ndim != 2:
        raise TensorError("fuse_detail expects 2-D token matrices")
    if small.shape[1] != big.shape[1]:
        raise TensorError(
            f"fuse_detail: channel mismatch {small.shape[1]} vs {big.shape[1]}"
        )
    if small.shape[0] < 1 or big.shape[0] < 1:
        raise TensorError("fuse_detail: empty token matrix")
    w = weights
    q = _project(small, w.wq, w.bq, w.ln_q_gamma, w.ln_q_beta,
                 w.ln_placement, w.eps)
    k = _project(big, w.wk, w.bk, w.ln_kv_gamma, w.ln_kv_beta,
                 w.ln_placement, w.eps)
    v = _project(big, w.wv, w.bv, w.ln_kv_gamma, w.ln_kv_beta,
                 w.ln_placement, w.eps)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / (w.d_k ** 0.5))
    attention = T.softmax_rows(logits)
    attended = T.matmul(attention, v)
    fused = T.concat([small, attended], axis=1)
    return FusionResult(fused=fused, attention=attention)


def attention_labels(result):
    """Query labels q1..qn and key labels k1..km for an attention matrix."""
    n, m = result.attention.shape
    return [f"q{i + 1}" for i in range(n)], [f"k{j + 1}" for j in range(m)]


def export_attention(result):
    """Attention weights as (query_labels, key_labels, matrix copy).

    Values are exported exactly as computed, with no renormalization.
    """
    rows, cols = attention_labels(result)
    return rows, cols, result.attention.data.copy()


def attention_csv(result):
    """CSV text: header row of key labels, one row per query, full precision."""
    rows, cols, matrix = export_attention(result)
    lines = ["query," + ",".join(cols)]
    for label, row in zip(rows, matrix):
        lines.append(label + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
