"""Quick oracle checks runnable from the CLI (``lococontrast selfcheck``)."""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch
import torch.nn.functional as F

from .cropper import CropClampWarning, CropSpec, sample_crop
from .encoders import CellIndex, cell_center, grid_geometry
from .evalkit.metrics import LocalizationRecord, tally
from .loss import LossConfig, PairBatch, anchor_ntxent, reference_ntxent
from .pairing import select_positive


def _unit(rng, *shape):
    return F.normalize(torch.as_tensor(rng.normal(size=shape)), dim=-1)


def check_loss_vs_reference(rng, trials: int = 25) -> bool:
    for _ in range(trials):
        n, a, d = int(rng.integers(1, 9)), int(rng.integers(0, 17)), int(rng.integers(8, 33))
        batch = PairBatch(_unit(rng, n, d), _unit(rng, n, d), _unit(rng, n, a, d))
        for t in (0.1, 0.5, 1.0):
            for scope in ("own-image", "all-images"):
                cfg = LossConfig(t, bool(rng.integers(2)), scope)
                if abs(float(anchor_ntxent(batch, cfg)) - reference_ntxent(batch, cfg)) > 1e-6:
                    return False
    z = _unit(rng, 1, 16)
    if float(anchor_ntxent(PairBatch(z, z.clone()), LossConfig(0.5))) != 0.0:
        return False
    e0 = torch.zeros(1, 16, dtype=torch.float64)
    e0[0, 0] = 1
    e1 = torch.zeros(1, 1, 16, dtype=torch.float64)
    e1[0, 0, 1] = 1
    hand = math.log(1 + math.exp(-1))
    return abs(float(anchor_ntxent(PairBatch(e0, e0.clone(), e1), LossConfig(1.0))) - hand) < 1e-6


def check_simclr_reduction(rng, trials: int = 25) -> bool:
    """With no anchors and both directions, the loss is SimCLR's 2N-way cross-entropy."""
    for _ in range(trials):
        n, d = int(rng.integers(1, 9)), 16
        zi, zj = _unit(rng, n, d), _unit(rng, n, d)
        t = float(rng.choice([0.1, 0.5, 1.0]))
        z = torch.cat([zi, zj])
        logits = (z @ z.T / t).fill_diagonal_(float("-inf"))
        targets = torch.cat([torch.arange(n, 2 * n), torch.arange(n)])
        simclr = float(F.cross_entropy(logits, targets))
        ours = float(anchor_ntxent(PairBatch(zi, zj), LossConfig(t, include_symmetric=True)))
        if abs(simclr - ours) > 1e-6:
            return False
    return True


def check_select_positive(rng, trials: int = 300) -> bool:
    for _ in range(trials):
        W, H = (int(v) for v in rng.integers(1, 700, size=2))
        grid = grid_geometry(W, H)
        level = int(rng.integers(5))
        x, y = rng.uniform(0, W), rng.uniform(0, H)
        rows, cols = grid.dims[level]
        best = min(((math.hypot(cell_center(grid, CellIndex(level, r, c))[0] - x,
                                cell_center(grid, CellIndex(level, r, c))[1] - y), r, c)
                    for r in range(rows) for c in range(cols)))
        if select_positive(grid, level, x, y) != CellIndex(level, best[1], best[2]):
            return False
    return True


def check_crop_invariants(rng, trials: int = 2000) -> bool:
    for _ in range(trials):
        W, H = (int(v) for v in rng.integers(40, 1000, size=2))
        with warnings.catch_warnings():
            # extreme aspect ratios are drawn on purpose to exercise the clamp
            warnings.simplefilter("ignore", CropClampWarning)
            c = sample_crop(W, H, rng)
        m = max(W, H)
        if not (c.w == c.h and 0.10 * m - 1e-9 <= c.w <= min(0.25 * m, min(W, H)) + 1e-9
                and 0 <= c.a <= W - c.w and 0 <= c.b <= H - c.h):
            # clamped sides are the only permitted departure from the 10% floor
            if not (c.w == min(W, H) and 0.10 * m > min(W, H)):
                return False
    return True


def check_metric_fixture() -> bool:
    grid = grid_geometry(64, 64)
    crop = CropSpec(0, 0, 16, 16)
    inside = [CellIndex(l, 0, 0) for l in range(5)]
    outside = [CellIndex(l, grid.dims[l][0] - 1, grid.dims[l][1] - 1) for l in range(5)]
    recs = [LocalizationRecord(str(i), crop, grid, inside if i < 3 else outside,
                               inside if i == 0 else outside) for i in range(4)]
    report = tally(recs, "center")
    m = report.level(0)
    return (m.sgi, m.rigi, m.sga, m.riga, m.gap_r) == (3, 1, 0.75, 0.25, 3.0)


CHECKS = {
    "loss matches loop reference": check_loss_vs_reference,
    "no-anchor loss equals SimCLR NT-Xent": check_simclr_reduction,
    "positive cell equals brute-force nearest center": check_select_positive,
    "crop sampler invariants": check_crop_invariants,
}


def run_all(seed: int = 0, echo=print) -> bool:
    ok_all = True
    for name, check in CHECKS.items():
        ok = check(np.random.default_rng(seed))
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}")
    ok = check_metric_fixture()
    ok_all &= ok
    echo(f"{'PASS' if ok else 'FAIL'}  metric tally on hand fixture")
    return ok_all
