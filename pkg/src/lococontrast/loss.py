"""Anchor-extended NT-Xent loss and a loop-based reference version of it.

For crop embedding ``z_i`` and its positive cell ``z_j`` the per-pair loss is

    l(i, j) = -log  exp(s(z_i, z_j) / t)
                    / ( sum_{k in 2N, k != i} exp(s(z_i, z_k) / t)
                        + sum_{a in anchors(i)} exp(s(z_i, z_a) / t) )

where the 2N set is every crop embedding and every positive in the batch, so
the positive itself sits in the denominator (as in SimCLR) and the loss is
never negative. With no anchors this is one direction of plain NT-Xent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, ContractViolation

NORM_TOL = 1e-4


@dataclass
class LossConfig:
    temperature: float = 0.5
    include_symmetric: bool = False
    anchor_scope: str = "own-image"  # or "all-images"

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.anchor_scope not in ("own-image", "all-images"):
            raise ConfigError(f"unknown anchor_scope {self.anchor_scope!r}")


@dataclass
class PairBatch:
    """Embeddings for one pyramid level.

    z_i: N x d crops, z_j: N x d positives, z_a: N x A x d anchors of each
    image. ``anchor_mask`` (N x A, bool) marks real anchors when images
    contribute unequal counts; None means all are real.
    """

    z_i: torch.Tensor
    z_j: torch.Tensor
    z_a: torch.Tensor | None = None
    anchor_mask: torch.Tensor | None = None
    level: int | None = None

    def __post_init__(self):
        if self.z_a is None:
            n, d = self.z_i.shape
            self.z_a = self.z_i.new_zeros((n, 0, d))

    @property
    def N(self) -> int:
        return int(self.z_i.shape[0])

    @property
    def A(self) -> int:
        return int(self.z_a.shape[1])

    def mask(self) -> torch.Tensor:
        if self.anchor_mask is None:
            return torch.ones(self.z_a.shape[:2], dtype=torch.bool, device=self.z_a.device)
        return self.anchor_mask


def cosine_sim(z1, z2) -> float:
    z1 = torch.as_tensor(z1)
    z2 = torch.as_tensor(z2)
    return float(torch.dot(z1.flatten(), z2.flatten()))


def _check_unit(name: str, z: torch.Tensor, mask: torch.Tensor | None = None) -> None:
    if z.numel() == 0:
        return
    norms = z.detach().norm(dim=-1)
    if mask is not None:
        norms = norms[mask]
    if norms.numel() and (norms - 1).abs().max() > NORM_TOL:
        raise ContractViolation(f"{name} embeddings are not unit-norm "
                                f"(max deviation {float((norms - 1).abs().max()):.2e})")


def _one_direction(q: torch.Tensor, pos: torch.Tensor, others: torch.Tensor,
                   anchors: torch.Tensor, mask: torch.Tensor, scope: str,
                   t: float) -> torch.Tensor:
    """Per-row loss for queries q whose positives are pos (row-aligned).

    Denominator: all of ``pos``, all of ``others`` except the query's own row,
    and the anchors in scope.
    """
    n = q.shape[0]
    s_pos = q @ pos.T / t
    s_others = q @ others.T / t
    eye = torch.eye(n, dtype=torch.bool, device=q.device)
    s_others = s_others.masked_fill(eye, float("-inf"))
    parts = [s_pos, s_others]
    if anchors.shape[1] > 0:
        if scope == "own-image":
            s_anchor = torch.einsum("nd,nad->na", q, anchors) / t
            parts.append(s_anchor.masked_fill(~mask, float("-inf")))
        else:
            pool = anchors[mask]
            parts.append(q @ pool.T / t)
    denom = torch.logsumexp(torch.cat(parts, dim=1), dim=1)
    return denom - s_pos.diagonal()


def anchor_ntxent(batch, config: LossConfig | None = None) -> torch.Tensor:
    """Mean anchor NT-Xent over pairs; a list of per-level batches is averaged with equal weight."""
    config = config or LossConfig()
    config.validate()
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ContractViolation("no levels to average")
        return torch.stack([anchor_ntxent(b, config) for b in batch]).mean()

    if batch.N < 1:
        raise ContractViolation("PairBatch needs N >= 1")
    mask = batch.mask()
    _check_unit("z_i", batch.z_i)
    _check_unit("z_j", batch.z_j)
    _check_unit("z_a", batch.z_a, mask)

    t = config.temperature
    scope = config.anchor_scope
    losses = _one_direction(batch.z_i, batch.z_j, batch.z_i, batch.z_a, mask, scope, t)
    if config.include_symmetric:
        back = _one_direction(batch.z_j, batch.z_i, batch.z_j, batch.z_a, mask, scope, t)
        losses = torch.cat([losses, back])
    return losses.mean()


# ---------------------------------------------------------------------------
# reference implementation: plain Python floats and loops, no shared code


def reference_ntxent(batch, config: LossConfig | None = None) -> float:
    config = config or LossConfig()
    if not config.temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {config.temperature}")
    if isinstance(batch, (list, tuple)):
        vals = [reference_ntxent(b, config) for b in batch]
        return sum(vals) / len(vals)

    zi = batch.z_i.detach().double().tolist()
    zj = batch.z_j.detach().double().tolist()
    za = batch.z_a.detach().double().tolist()
    m = batch.mask().tolist()
    n = len(zi)
    if n < 1:
        raise ContractViolation("PairBatch needs N >= 1")
    t = config.temperature

    def dot(u, v):
        total = 0.0
        for a, b in zip(u, v):
            total += a * b
        return total

    for group in (zi, zj):
        for v in group:
            if abs(math.sqrt(dot(v, v)) - 1.0) > NORM_TOL:
                raise ContractViolation("embeddings are not unit-norm")

    def anchors_for(i):
        if config.anchor_scope == "own-image":
            return [za[i][a] for a in range(len(za[i])) if m[i][a]]
        return [za[k][a] for k in range(n) for a in range(len(za[k])) if m[k][a]]

    def pair_loss(query, positive, everyone, own, anchors):
        denom = 0.0
        for k, other in enumerate(everyone):
            if k == own:
                continue
            denom += math.exp(dot(query, other) / t)
        for a in anchors:
            denom += math.exp(dot(query, a) / t)
        num = math.exp(dot(query, positive) / t)
        return -math.log(num / denom)

    terms = []
    for i in range(n):
        everyone = zi + zj  # index i is the query itself
        terms.append(pair_loss(zi[i], zj[i], everyone, i, anchors_for(i)))
    if config.include_symmetric:
        for i in range(n):
            everyone = zi + zj
            terms.append(pair_loss(zj[i], zi[i], everyone, n + i, anchors_for(i)))
    return sum(terms) / len(terms)
