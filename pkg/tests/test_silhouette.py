import math

import numpy as np
import pytest
import torch

from dynaseg.core import ImageTensor, ResponseMap
from dynaseg.datasets import synthetic_corpus
from dynaseg.exceptions import DynaSegInvalidSpecError, DynaSegSingleClusterError
from dynaseg.schemas.config import RunConfig, SyntheticSpec
from dynaseg.schemas.results import GateDecision
from dynaseg.silhouette import homogeneous_mask, local_variation, select_opt_nC, should_stop, silhouette_score
from dynaseg.trainer import segment_image

CANDIDATES = list(range(2, 9))


def _blank_response(image):
    return ResponseMap(values=torch.zeros(image.height, image.width, 4))


def test_silhouette_score_hand_computed():
    points = [[0.0], [1.0], [10.0], [11.0]]
    expected = (9.5 / 10.5 + 8.5 / 9.5) / 2

    assert silhouette_score(points, [0, 0, 1, 1]) == pytest.approx(expected)


def test_silhouette_score_singletons_score_zero():
    assert silhouette_score([[0.0], [1.0], [5.0]], [0, 1, 2]) == 0.0


def test_silhouette_score_needs_two_clusters():
    with pytest.raises(DynaSegSingleClusterError):
        silhouette_score([[0.0], [1.0]], [0, 0])


@pytest.mark.parametrize("blocks", [2, 3, 4, 5])
def test_noiseless_blocks_recover_block_count(blocks):
    image, _ = synthetic_corpus(SyntheticSpec(num_images=1, block_counts=[blocks], noise=0.0))[0]
    result = select_opt_nC(image, _blank_response(image), CANDIDATES, 2000, feature_source="color")

    assert result.opt_nC == blocks


def test_three_blocks_across_seeds():
    for seed in range(10):
        image, _ = synthetic_corpus(SyntheticSpec(num_images=1, block_counts=[3], noise=0.0, seed=seed))[0]
        result = select_opt_nC(
            image, _blank_response(image), CANDIDATES, 2000, seed=seed, feature_source="color"
        )
        assert result.opt_nC == 3


def _blended_stripes(h=32, w=48, q=6):
    # 3 franjas de 16 columnas; las 4 columnas alrededor de cada borde mezclan ambos vectores
    rng = np.random.default_rng(0)
    centers = rng.normal(scale=3.0, size=(3, q))
    values = np.empty((h, w, q))
    for col in range(w):
        stripe = col // 16
        values[:, col] = centers[stripe]
        for boundary in (16, 32):
            if boundary - 2 <= col < boundary + 2:
                t = (col - boundary + 3) / 5
                values[:, col] = (1 - t) * centers[boundary // 16 - 1] + t * centers[boundary // 16]
    return values


def test_local_variation_marks_region_borders():
    values = np.zeros((3, 4, 2))
    values[:, 2:] = [3.0, 4.0]
    variation = local_variation(values)

    assert variation.tolist() == [[0.0, 5.0, 5.0, 0.0]] * 3
    assert homogeneous_mask(values, 0.4).tolist() == [[True, False, False, True]] * 3
    assert homogeneous_mask(values, 1.0).all()


def test_boundary_responses_do_not_inflate_cluster_count():
    values = _blended_stripes()
    image = ImageTensor(pixels=np.zeros((32, 48, 3), dtype=np.float32), source_id="stripes")
    resp = ResponseMap(values=torch.from_numpy(values), normalized=True)

    result = select_opt_nC(image, resp, list(range(2, 21)), 2000)
    assert result.opt_nC == 3
    assert result.candidate_ks == [2, 3]


def test_default_response_features_recover_three_blocks_across_seeds():
    image, _ = synthetic_corpus(SyntheticSpec(num_images=1, block_counts=[3], noise=0.0))[0]
    for seed in range(10):
        config = RunConfig.model_validate({"seed": seed, "train": {"max_iters": 1}})
        result = segment_image(image, config)

        assert result.silhouette is not None
        assert result.silhouette.opt_nC == 3


def test_result_only_lists_valid_candidates():
    image, _ = synthetic_corpus(SyntheticSpec(num_images=1, block_counts=[3], noise=0.0))[0]
    result = select_opt_nC(image, _blank_response(image), CANDIDATES, 500, feature_source="color", jobs=2)

    assert result.candidate_ks == [2, 3]
    assert all(-1.0 <= s <= 1.0 and math.isfinite(s) for s in result.scores)
    assert result.scores[1] == pytest.approx(1.0, abs=1e-3)


def test_response_features_are_deterministic():
    torch.manual_seed(0)
    image, _ = synthetic_corpus(SyntheticSpec(num_images=1, size=32))[0]
    resp = ResponseMap(values=torch.randn(32, 32, 6))

    a = select_opt_nC(image, resp, CANDIDATES, 300, seed=4)
    b = select_opt_nC(image, resp, CANDIDATES, 300, seed=4)
    assert a == b


def test_invalid_candidates():
    image, _ = synthetic_corpus(SyntheticSpec(num_images=1, size=16))[0]
    resp = _blank_response(image)

    with pytest.raises(DynaSegInvalidSpecError):
        select_opt_nC(image, resp, [], 100)
    with pytest.raises(DynaSegInvalidSpecError):
        select_opt_nC(image, resp, [1, 2, 3], 100)


def test_constant_image_has_no_valid_candidate():
    image, _ = synthetic_corpus(SyntheticSpec(num_images=1, block_counts=[1], noise=0.0, size=16))[0]

    with pytest.raises(DynaSegSingleClusterError):
        select_opt_nC(image, _blank_response(image), CANDIDATES, 100, feature_source="color")


def test_should_stop_precedence():
    assert should_stop(3, 3, 64, 64) == GateDecision.STOP_THRESHOLD
    assert should_stop(2, 3, 0, 64) == GateDecision.STOP_THRESHOLD
    assert should_stop(5, 3, 64, 64) == GateDecision.STOP_MAX_ITERS
    assert should_stop(5, 3, 10, 64) == GateDecision.CONTINUE
