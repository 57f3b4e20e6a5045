"""Training objectives.

- contrastive_loss: symmetric in-batch InfoNCE over unit-norm embedding rows,
  each direction averaged over the batch and the two directions summed.
- generative_loss: token-level negative log-likelihood summed over non-PAD
  positions (batched input averages the per-sample sums).
- pretraining_loss: alpha * contrastive + beta * generative.
- rank adapter: a residual projection applied to frozen image embeddings,
  scored by cosine against a frozen text anchor and trained with a pairwise
  hinge over every strictly-ordered label pair in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"loss weights must be nonnegative with a positive sum, "
                             f"got alpha={self.alpha}, beta={self.beta}")


def _check_unit_rows(name: str, t: Tensor, tol: float = 1e-3) -> None:
    norms = np.sqrt((t.data ** 2).sum(axis=-1))
    if np.abs(norms - 1.0).max() > tol:
        raise ValueError(f"{name}: rows must be unit-norm (max deviation "
                         f"{np.abs(norms - 1.0).max():.2e})")


def contrastive_loss(x: Tensor, y: Tensor, tau) -> Tensor:
    """Bidirectional in-batch contrastive loss over N aligned pairs.

    x, y: (N, D) unit-norm rows; diagonal entries are the positives.
    tau: temperature, a positive scalar (Tensor to train it jointly).
    """
    if x.data.ndim != 2 or x.shape != y.shape:
        raise ad.ShapeError(f"contrastive_loss: expected matching (N, D) inputs, "
                            f"got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 1:
        raise ValueError("contrastive_loss: empty batch")
    _check_unit_rows("contrastive_loss x", x)
    _check_unit_rows("contrastive_loss y", y)
    if not isinstance(tau, Tensor):
        if tau <= 0:
            raise ValueError(f"contrastive_loss: tau must be positive, got {tau}")
        tau = Tensor(np.asarray(tau, dtype=x.dtype.type))
    elif float(tau.data) <= 0:
        raise ValueError(f"contrastive_loss: tau must be positive, got {float(tau.data)}")
    sim = ad.matmul(x, ad.swapaxes(y, 0, 1))
    inv_tau = ad.exp(ad.neg(ad.log(tau)))
    logits = ad.mul(sim, inv_tau)
    diag = np.arange(n)
    loss_i2t = ad.scale(ad.sum_(ad.cross_entropy_with_logits(logits, diag)), 1.0 / n)
    loss_t2i = ad.scale(ad.sum_(ad.cross_entropy_with_logits(ad.swapaxes(logits, 0, 1), diag)),
                        1.0 / n)
    return ad.add(loss_i2t, loss_t2i)


def generative_loss(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """Sum of -log P(target) over unmasked positions.

    logits: (L, V) for one sequence, or (N, L, V) batched; batched input
    returns the mean over samples of the per-sample sums. pad_mask is True
    at real positions, False at PAD.
    """
    targets = np.asarray(targets, dtype=np.int64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or pad_mask.shape != targets.shape:
        raise ad.ShapeError(f"generative_loss: logits {logits.shape}, targets "
                            f"{targets.shape}, mask {pad_mask.shape} do not conform")
    safe_targets = np.where(pad_mask, targets, 0)
    nll = ad.cross_entropy_with_logits(logits, safe_targets)
    masked = ad.mul(nll, Tensor(pad_mask.astype(nll.dtype)))
    total = ad.sum_(masked)
    if logits.data.ndim == 3:
        return ad.scale(total, 1.0 / logits.shape[0])
    return total


def pretraining_loss(loss_con: Tensor, loss_gen: Tensor, weights: LossWeights) -> Tensor:
    for name, t in (("contrastive", loss_con), ("generative", loss_gen)):
        if not np.isfinite(t.data).all():
            raise ValueError(f"pretraining_loss: non-finite {name} component")
    return ad.add(ad.scale(loss_con, weights.alpha), ad.scale(loss_gen, weights.beta))


# ---------------------------------------------------------------------------
# rank-based adapter
# ---------------------------------------------------------------------------

@dataclass
class AdapterState:
    """Residual projection plus frozen anchor for rank-based scoring.

    residual: (D, D) learnable matrix applied as v @ residual.
    anchor: frozen unit-norm text embedding; never touched by the optimizer.
    learnable_anchor: replaces the frozen anchor when use_text_anchor=False.
    """
    residual: Tensor
    anchor: np.ndarray
    margin: float = 0.1
    use_residual: bool = True
    use_text_anchor: bool = True
    learnable_anchor: Tensor | None = None

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64 if
                                 self.residual.dtype == np.float64 else np.float32)
        norm = float(np.linalg.norm(self.anchor.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"adapter anchor must be unit-norm, got norm {norm}")
        d = self.anchor.shape[0]
        if self.residual.shape != (d, d):
            raise ad.ShapeError(f"adapter residual must be ({d}, {d}), "
                                f"got {self.residual.shape}")
        if not self.use_text_anchor and self.learnable_anchor is None:
            raise ValueError("use_text_anchor=False requires a learnable_anchor")

    @classmethod
    def zero_init(cls, anchor: np.ndarray, margin: float = 0.1,
                  use_residual: bool = True, use_text_anchor: bool = True,
                  anchor_init_seed: int = 0, dtype=np.float32) -> "AdapterState":
        anchor = np.asarray(anchor, dtype=dtype)
        d = anchor.shape[0]
        learnable = None
        if not use_text_anchor:
            rng = np.random.default_rng(anchor_init_seed)
            learnable = Tensor(rng.standard_normal(d).astype(dtype) * 0.02,
                               requires_grad=True)
        return cls(residual=Tensor(np.zeros((d, d), dtype=dtype), requires_grad=True),
                   anchor=anchor, margin=margin, use_residual=use_residual,
                   use_text_anchor=use_text_anchor, learnable_anchor=learnable)

    def trainable(self) -> dict[str, Tensor]:
        out = {"adapter/residual": self.residual}
        if not self.use_text_anchor:
            out["adapter/anchor"] = self.learnable_anchor
        return out

    def anchor_tensor(self) -> Tensor:
        if self.use_text_anchor:
            return Tensor(self.anchor)
        return ad.l2_normalize(self.learnable_anchor)


def adapt_embedding(v: Tensor, adapter: AdapterState) -> Tensor:
    """Rank-adjusted unit embedding: normalize(v @ residual + v), or without
    the skip connection when use_residual is off."""
    single = v.data.ndim == 1
    vm = ad.reshape(v, (1, v.shape[0])) if single else v
    projected = ad.matmul(vm, adapter.residual)
    adjusted = ad.add(projected, vm) if adapter.use_residual else projected
    out = ad.l2_normalize(adjusted, axis=-1)
    return ad.index(out, 0) if single else out


def adapter_score(v_adjusted: Tensor, adapter: AdapterState) -> Tensor:
    """Cosine of the adjusted embedding against the anchor, in [-1, 1]."""
    anchor = adapter.anchor_tensor()
    single = v_adjusted.data.ndim == 1
    vm = ad.reshape(v_adjusted, (1, v_adjusted.shape[0])) if single else v_adjusted
    scores = ad.matmul(vm, ad.reshape(anchor, (anchor.shape[0], 1)))
    scores = ad.reshape(scores, (vm.shape[0],))
    return ad.index(scores, 0) if single else scores


def score_images(v: Tensor, adapter: AdapterState) -> Tensor:
    return adapter_score(adapt_embedding(v, adapter), adapter)


def rank_adapter_loss(v_batch: Tensor, labels: np.ndarray, adapter: AdapterState) -> Tensor:
    """Mean hinge over all strictly-ordered label pairs in the batch.

    For every (i, j) with label_i > label_j the pair contributes
    max(0, margin - score_i + score_j); ties contribute nothing.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if v_batch.data.ndim != 2 or labels.shape != (v_batch.shape[0],):
        raise ad.ShapeError(f"rank_adapter_loss: embeddings {v_batch.shape} and labels "
                            f"{labels.shape} do not conform")
    n = v_batch.shape[0]
    if n < 2:
        raise ValueError("rank_adapter_loss: need at least two samples")
    pair_mask = labels[:, None] > labels[None, :]
    num_pairs = int(pair_mask.sum())
    if num_pairs == 0:
        raise ValueError("rank_adapter_loss: all-tied batch (no strictly ordered pair)")
    scores = score_images(v_batch, adapter)
    col = ad.reshape(scores, (n, 1))
    row = ad.reshape(scores, (1, n))
    ones_row = Tensor(np.ones((1, n), dtype=scores.data.dtype))
    ones_col = Tensor(np.ones((n, 1), dtype=scores.data.dtype))
    s_i = ad.matmul(col, ones_row)   # (n, n), s_i[i, j] = score_i
    s_j = ad.matmul(ones_col, row)   # (n, n), s_j[i, j] = score_j
    margin = ad.full((n, n), adapter.margin, dtype=scores.data.dtype)
    # difference first: tied scores cancel exactly, so the hinge is exactly m
    hinge = ad.relu(ad.sub(margin, ad.sub(s_i, s_j)))
    masked = ad.mul(hinge, Tensor(pair_mask.astype(scores.data.dtype)))
    return ad.scale(ad.sum_(masked), 1.0 / num_pairs)
