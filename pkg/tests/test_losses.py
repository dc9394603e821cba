import math
import random

import numpy as np
import pytest
import torch

from dynaseg.core import LabelMap, ResponseMap, argmax_labels, normalize_response
from dynaseg.exceptions import DynaSegInvalidQPrimeError, DynaSegShapeMismatchError, DynaSegTooSmallError
from dynaseg.losses import combined_loss, compute_mu, feature_similarity_loss, is_finite, spatial_continuity_loss
from dynaseg.schemas.config import MuSchedule


def _naive_continuity(values: np.ndarray) -> float:
    h, w, q = values.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(q):
                if i + 1 < h:
                    total += abs(float(values[i + 1, j, k]) - float(values[i, j, k]))
                if j + 1 < w:
                    total += abs(float(values[i, j + 1, k]) - float(values[i, j, k]))
    return total


def _naive_similarity(values: np.ndarray, labels: np.ndarray) -> float:
    h, w, _ = values.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            row = [float(v) for v in values[i, j]]
            top = max(row)
            lse = top + math.log(sum(math.exp(v - top) for v in row))
            total += lse - row[labels[i, j]]
    return total / (h * w)


def test_spatial_continuity_matches_naive_loops():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h, w, q = (int(v) for v in rng.integers(2, [17, 17, 9]))
        values = rng.normal(size=(h, w, q))
        resp = ResponseMap(values=torch.from_numpy(values))

        expected = _naive_continuity(values)
        total = float(spatial_continuity_loss(resp, "sum"))
        mean = float(spatial_continuity_loss(resp, "mean"))

        assert total == pytest.approx(expected, rel=1e-6)
        assert mean == pytest.approx(expected / (q * (h * (w - 1) + (h - 1) * w)), rel=1e-6)


def test_feature_similarity_matches_log_sum_exp():
    rng = np.random.default_rng(1)
    for _ in range(50):
        h, w, q = (int(v) for v in rng.integers(2, [9, 9, 7]))
        values = rng.normal(size=(h, w, q)) * 3
        labels = rng.integers(0, q, size=(h, w))
        resp = ResponseMap(values=torch.from_numpy(values))

        loss = float(feature_similarity_loss(resp, LabelMap(labels=labels)))
        assert loss == pytest.approx(_naive_similarity(values, labels), rel=1e-6)


def test_sum_reduction_scales_similarity():
    values = torch.randn(4, 5, 3, dtype=torch.float64)
    resp = ResponseMap(values=values)
    labels = argmax_labels(resp)

    mean = float(feature_similarity_loss(resp, labels, "mean"))
    total = float(feature_similarity_loss(resp, labels, "sum"))
    assert total == pytest.approx(mean * 20, rel=1e-9)


def test_loss_errors():
    resp = ResponseMap(values=torch.randn(4, 4, 3))

    with pytest.raises(DynaSegShapeMismatchError):
        feature_similarity_loss(resp, LabelMap(labels=np.zeros((4, 3), dtype=np.int64)))
    with pytest.raises(DynaSegTooSmallError):
        spatial_continuity_loss(ResponseMap(values=torch.randn(1, 4, 3)))
    with pytest.raises(DynaSegTooSmallError):
        spatial_continuity_loss(ResponseMap(values=torch.randn(4, 1, 3)))
    with pytest.raises(DynaSegInvalidQPrimeError):
        compute_mu(MuSchedule(kind="fsf"), 0)


def test_mu_schedules_are_exact_divisions():
    rng = random.Random(0)
    for _ in range(50):
        alpha = rng.uniform(0.5, 300.0)
        q_prime = rng.randint(1, 100)

        assert compute_mu(MuSchedule(kind="fsf", alpha=alpha), q_prime) == q_prime / alpha
        assert compute_mu(MuSchedule(kind="scf", alpha=alpha), q_prime) == alpha / q_prime


def test_mu_defaults():
    assert compute_mu(MuSchedule(kind="fsf"), 30) == 30 / 15
    assert compute_mu(MuSchedule(kind="scf"), 10) == 50 / 10
    assert compute_mu(MuSchedule(kind="fixed"), 10) == 5.0
    assert compute_mu(MuSchedule(kind="fixed", mu=100), 3) == 100.0


def test_combined_loss_breakdown():
    torch.manual_seed(0)
    resp = normalize_response(ResponseMap(values=torch.randn(6, 6, 4)))
    labels = argmax_labels(resp)
    schedule = MuSchedule(kind="scf", alpha=8)
    breakdown = combined_loss(resp, labels, schedule, labels.unique_count)

    assert breakdown.mu == 8 / labels.unique_count
    assert breakdown.total == breakdown.sim + breakdown.mu * breakdown.con
    assert float(breakdown.objective) == pytest.approx(breakdown.total, rel=1e-5)
    assert is_finite(breakdown)
    assert "objective" not in breakdown.model_dump()


@pytest.mark.parametrize(
    "schedule",
    [MuSchedule(kind="fsf"), MuSchedule(kind="scf"), MuSchedule(kind="fixed")],
)
def test_combined_loss_gradient_matches_finite_differences(schedule):
    torch.manual_seed(3)
    values = torch.randn(5, 5, 4, dtype=torch.float64, requires_grad=True)
    labels = argmax_labels(normalize_response(ResponseMap(values=values.detach())))
    q_prime = labels.unique_count

    def objective(v):
        resp = normalize_response(ResponseMap(values=v))
        return combined_loss(resp, labels, schedule, q_prime).objective

    assert torch.autograd.gradcheck(objective, (values,), eps=1e-4, atol=1e-5, rtol=1e-3)


def test_spatial_continuity_hand_case():
    resp = ResponseMap(values=torch.tensor([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))

    assert float(spatial_continuity_loss(resp, "sum")) == 6.0
    assert float(spatial_continuity_loss(resp, "mean")) == pytest.approx(6.0 / 4)


def test_spatial_continuity_ignores_uniform_shift():
    torch.manual_seed(1)
    values = torch.randn(5, 7, 3, dtype=torch.float64)

    base = float(spatial_continuity_loss(ResponseMap(values=values)))
    shifted = float(spatial_continuity_loss(ResponseMap(values=values + 4.5)))
    assert shifted == pytest.approx(base, rel=1e-12)


def test_mu_is_monotone_in_q_prime():
    fsf = [compute_mu(MuSchedule(kind="fsf"), q) for q in range(1, 101)]
    scf = [compute_mu(MuSchedule(kind="scf"), q) for q in range(1, 101)]

    assert all(a < b for a, b in zip(fsf, fsf[1:]))
    assert all(a > b for a, b in zip(scf, scf[1:]))


def test_fixed_mu_combination():
    torch.manual_seed(2)
    resp = normalize_response(ResponseMap(values=torch.randn(4, 4, 3, dtype=torch.float64)))
    labels = argmax_labels(resp)
    breakdown = combined_loss(resp, labels, MuSchedule(kind="fixed", mu=5), labels.unique_count)

    sim = float(feature_similarity_loss(resp, labels))
    con = float(spatial_continuity_loss(resp))
    assert breakdown.mu == 5.0
    assert breakdown.total == pytest.approx(sim + 5 * con, rel=1e-9)
