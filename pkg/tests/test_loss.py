import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from lococontrast.errors import ConfigError, ContractViolation
from lococontrast.loss import LossConfig, PairBatch, anchor_ntxent, cosine_sim, reference_ntxent

from conftest import unit


def basis(d, *idx):
    out = torch.zeros(len(idx), d, dtype=torch.float64)
    for row, i in enumerate(idx):
        out[row, i] = 1.0
    return out


def test_cosine_sim_examples():
    u = basis(8, 0)[0]
    assert cosine_sim(u, u) == 1.0
    assert cosine_sim(u, basis(8, 3)[0]) == 0.0
    z1 = torch.tensor([0.6, 0.8, 0, 0, 0, 0, 0, 0], dtype=torch.float64)
    assert cosine_sim(z1, u) == pytest.approx(0.6, abs=1e-15)
    assert cosine_sim(z1, u) == cosine_sim(u, z1)


@pytest.mark.parametrize("tau", [0.05, 0.5, 1.0, 3.0])
def test_single_pair_without_anchors_is_zero(tau, rng):
    z = unit(rng, 1, 16)
    assert float(anchor_ntxent(PairBatch(z, z.clone()), LossConfig(tau))) == 0.0
    assert reference_ntxent(PairBatch(z, z.clone()), LossConfig(tau)) == 0.0


def test_hand_computed_orthogonal_anchor():
    # numerator e^1, denominator e^1 (positive) + e^0 (orthogonal anchor)
    z = basis(16, 0)
    batch = PairBatch(z, z.clone(), basis(16, 1)[None])
    expected = math.log(1 + math.exp(-1))
    assert expected == pytest.approx(0.31326, abs=1e-5)
    assert float(anchor_ntxent(batch, LossConfig(1.0))) == pytest.approx(expected, abs=1e-12)
    assert reference_ntxent(batch, LossConfig(1.0)) == pytest.approx(expected, abs=1e-12)


def test_two_pairs_no_anchor_hand_value():
    # z_i = (e0, e1), z_j = (e0, e1), tau = 1: denominator for row 0 holds
    # z_i[1] (sim 0), z_j[0] (sim 1), z_j[1] (sim 0)
    z = basis(8, 0, 1)
    expected = -math.log(math.e / (math.e + 2))
    assert float(anchor_ntxent(PairBatch(z, z.clone()), LossConfig(1.0))) == pytest.approx(expected)


@pytest.mark.parametrize("scope", ["own-image", "all-images"])
@pytest.mark.parametrize("symmetric", [False, True])
def test_matches_reference_on_random_batches(rng, scope, symmetric):
    for _ in range(30):
        n, a, d = int(rng.integers(1, 9)), int(rng.integers(0, 17)), int(rng.integers(8, 40))
        batch = PairBatch(unit(rng, n, d), unit(rng, n, d), unit(rng, n, a, d))
        for tau in (0.1, 0.5, 1.0):
            cfg = LossConfig(tau, symmetric, scope)
            assert float(anchor_ntxent(batch, cfg)) == pytest.approx(
                reference_ntxent(batch, cfg), abs=1e-9)


def test_masked_anchors_match_reference(rng):
    n, a, d = 4, 6, 12
    mask = torch.tensor(rng.random((n, a)) < 0.6)
    batch = PairBatch(unit(rng, n, d), unit(rng, n, d), unit(rng, n, a, d), anchor_mask=mask)
    for scope in ("own-image", "all-images"):
        cfg = LossConfig(0.3, anchor_scope=scope)
        assert float(anchor_ntxent(batch, cfg)) == pytest.approx(reference_ntxent(batch, cfg), abs=1e-9)


def test_no_anchors_equals_simclr_formulation(rng):
    # textbook SimCLR: 2N x 2N logits with the diagonal removed, cross-entropy on the partner
    for _ in range(20):
        n, d = int(rng.integers(1, 9)), 24
        zi, zj = unit(rng, n, d), unit(rng, n, d)
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        z = torch.cat([zi, zj])
        logits = (z @ z.T / tau).fill_diagonal_(float("-inf"))
        targets = torch.cat([torch.arange(n, 2 * n), torch.arange(n)])
        simclr_both = float(F.cross_entropy(logits, targets))
        simclr_crops = float(F.cross_entropy(logits[:n], targets[:n]))
        assert float(anchor_ntxent(PairBatch(zi, zj), LossConfig(tau, True))) == pytest.approx(
            simclr_both, abs=1e-9)
        assert float(anchor_ntxent(PairBatch(zi, zj), LossConfig(tau))) == pytest.approx(
            simclr_crops, abs=1e-9)


def test_gradients_match_finite_differences(rng):
    for _ in range(4):
        n, a, d = int(rng.integers(1, 5)), int(rng.integers(0, 9)), 6
        tensors = [unit(rng, n, d), unit(rng, n, d), unit(rng, n, a, d)]
        cfg = LossConfig(0.4, include_symmetric=bool(rng.integers(2)))

        # differentiate through normalization so perturbed points stay valid inputs
        def f(zi, zj, za):
            return anchor_ntxent(PairBatch(F.normalize(zi, dim=-1), F.normalize(zj, dim=-1),
                                           F.normalize(za, dim=-1)), cfg)

        raw = [t.clone().requires_grad_(True) for t in tensors]
        f(*raw).backward()
        eps = 1e-6
        for which, t in enumerate(tensors):
            flat = t.reshape(-1)
            for k in range(flat.numel()):
                plus = [x.clone() for x in tensors]
                minus = [x.clone() for x in tensors]
                plus[which].reshape(-1)[k] += eps
                minus[which].reshape(-1)[k] -= eps
                fd = (float(f(*plus)) - float(f(*minus))) / (2 * eps)
                an = float(raw[which].grad.reshape(-1)[k])
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-3)


def _hard_negative_case():
    # sim(z_i, z_j) = 0.9, sim(z_i, z_a) = 0.8
    zi = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    zj = torch.tensor([[0.9, math.sqrt(1 - 0.81), 0.0]], dtype=torch.float64)
    za = torch.tensor([[[0.8, 0.0, 0.6]]], dtype=torch.float64)
    return PairBatch(zi, zj, za)


def test_temperature_values_at_fixed_geometry():
    # with every negative below the positive the loss is log(1 + sum exp((s_k - s_p) / tau)),
    # which shrinks as tau shrinks
    batch = _hard_negative_case()
    sharp = float(anchor_ntxent(batch, LossConfig(0.1)))
    soft = float(anchor_ntxent(batch, LossConfig(1.0)))
    assert sharp == pytest.approx(math.log(1 + math.exp(-1.0)), abs=1e-12)
    assert soft == pytest.approx(math.log(1 + math.exp(-0.1)), abs=1e-12)
    assert sharp < soft


def test_sharper_temperature_concentrates_on_hard_negative():
    # the hard negative's share of the negative weight grows as tau shrinks
    zi = torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    zj = torch.tensor([[0.9, math.sqrt(1 - 0.81), 0.0, 0.0]], dtype=torch.float64)
    za = torch.tensor([[[0.8, 0.0, 0.6, 0.0], [0.0, 0.0, 0.0, 1.0]]], dtype=torch.float64)
    shares = []
    for tau in (1.0, 0.1):
        raw = za.clone().requires_grad_(True)
        anchor_ntxent(PairBatch(zi, zj, raw), LossConfig(tau)).backward()
        g = raw.grad[0].norm(dim=-1)
        shares.append(float(g[0] / g.sum()))
    assert shares[1] > shares[0]


def test_raising_anchor_similarity_increases_loss(rng):
    zi = basis(4, 0)
    zj = torch.tensor([[0.7, 0.7141428428542850, 0, 0]], dtype=torch.float64)
    losses = []
    for s in np.linspace(-0.9, 0.9, 7):
        za = torch.tensor([[[s, 0, math.sqrt(1 - s * s), 0]]], dtype=torch.float64)
        losses.append(reference_ntxent(PairBatch(zi, zj, za), LossConfig(0.5)))
    assert all(b > a for a, b in zip(losses, losses[1:]))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 5), a=st.integers(0, 8), seed=st.integers(0, 2**31 - 1))
def test_anchor_order_does_not_matter(n, a, seed):
    rng = np.random.default_rng(seed)
    batch = PairBatch(unit(rng, n, 8), unit(rng, n, 8), unit(rng, n, a, 8))
    perm = torch.as_tensor(rng.permutation(a), dtype=torch.long)
    shuffled = PairBatch(batch.z_i, batch.z_j, batch.z_a[:, perm])
    for scope in ("own-image", "all-images"):
        cfg = LossConfig(0.5, anchor_scope=scope)
        assert float(anchor_ntxent(batch, cfg)) == pytest.approx(float(anchor_ntxent(shuffled, cfg)),
                                                                 abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 6), a=st.integers(0, 10), tau=st.floats(0.05, 5.0),
       seed=st.integers(0, 2**31 - 1), symmetric=st.booleans())
def test_loss_is_non_negative(n, a, tau, seed, symmetric):
    rng = np.random.default_rng(seed)
    batch = PairBatch(unit(rng, n, 8), unit(rng, n, 8), unit(rng, n, a, 8))
    assert float(anchor_ntxent(batch, LossConfig(tau, symmetric))) >= 0.0


def test_level_list_is_averaged(rng):
    zi = unit(rng, 3, 8)
    levels = [PairBatch(zi, unit(rng, 3, 8), unit(rng, 3, 2, 8)) for _ in range(3)]
    cfg = LossConfig(0.5)
    expected = np.mean([float(anchor_ntxent(b, cfg)) for b in levels])
    assert float(anchor_ntxent(levels, cfg)) == pytest.approx(expected)
    assert reference_ntxent(levels, cfg) == pytest.approx(expected)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_bad_temperature(rng, tau):
    z = unit(rng, 1, 8)
    with pytest.raises(ConfigError):
        anchor_ntxent(PairBatch(z, z), LossConfig(tau))
    with pytest.raises(ConfigError):
        reference_ntxent(PairBatch(z, z), LossConfig(tau))


def test_non_unit_inputs_rejected(rng):
    z = unit(rng, 2, 8)
    with pytest.raises(ContractViolation):
        anchor_ntxent(PairBatch(z * 2, z), LossConfig())
    with pytest.raises(ContractViolation):
        anchor_ntxent(PairBatch(z, z, torch.ones(2, 1, 8, dtype=torch.float64)), LossConfig())
    with pytest.raises(ContractViolation):
        reference_ntxent(PairBatch(z * 2, z), LossConfig())
