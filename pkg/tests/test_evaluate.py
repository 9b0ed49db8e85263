import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gensync.autodiff import Tensor
from gensync.errors import ContractError, DimensionError, UnknownIdentityError
from gensync.evaluate import (
    EVAL_SCHEMA, SyncReport, cross_drive, drive, evaluate_suite, ground_truth_predictor, pearson,
    predicted_aperture, psnr, report_json, swap_identities,
)
from gensync.model import GenSyncModel, ModelConfig
from gensync.scene import GaussianCloud
from gensync.synthetic import constant_audio, generate_dataset, load_dataset, synth_audio


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_data")
    generate_dataset(4, 20, 8, root, image_size=16)
    return load_dataset(root)


def fresh_model(labels=("A", "B"), seed=0):
    model = GenSyncModel.init(ModelConfig(n_gaussians=30, image_size=16), seed)
    for k, label in enumerate(labels):
        model.add_identity(label, k + 1)
        model.gains[label] = (0.3, 0.1)[k % 2]
    return model


def moving_model():
    """A model whose F_d is non-zero so apertures vary with audio."""
    model = fresh_model()
    rng = np.random.default_rng(4)
    model.f_d.weights[-1].data[...] = rng.normal(0, 0.5, model.f_d.weights[-1].shape)
    model.identities.vectors["A"].data[...] = rng.normal(0, 1.0, 8)
    return model


# ---------------------------------------------------------------- psnr

def test_psnr_examples():
    black, white = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
    assert psnr(black, white) == 0.0
    assert psnr(black, np.full((4, 4, 3), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(white, white) == math.inf


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# ---------------------------------------------------------------- pearson

def two_pass_r(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=3, max_size=40))
def test_pearson_matches_independent_two_pass(pairs):
    x, y = [p[0] for p in pairs], [p[1] for p in pairs]
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    r, degenerate = pearson(x, y)
    assert not degenerate
    assert r == pytest.approx(two_pass_r(x, y), abs=1e-12)


def test_pearson_degenerate_and_exact():
    assert pearson([1.0, 1.0, 1.0], [0.0, 1.0, 2.0]) == (0.0, True)
    assert pearson([1.0], [2.0]) == (0.0, True)
    assert pearson([0.0, 1.0, 2.0], [1.0, 3.0, 5.0]) == (1.0, False)
    assert pearson([0.0, 1.0, 2.0], [2.0, 1.0, 0.0]) == (-1.0, False)
    with pytest.raises(DimensionError):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])


def test_sync_report_invariants():
    SyncReport("A", 0.5, 0.1)
    with pytest.raises(ContractError):
        SyncReport("A", 1.5, 0.1)
    with pytest.raises(ContractError):
        SyncReport("A", 0.5, -1.0)


# ---------------------------------------------------------------- apertures

def test_fresh_model_has_zero_aperture():
    model = fresh_model()
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert predicted_aperture(model, "A", rng.uniform(0, 1, 16), rng.uniform(0, 1, 2),
                                  (rng.uniform(-1, 1), 0.0)) == 0.0


def test_aperture_matches_mouth_displacement_directly():
    model = moving_model()
    out = model.forward_frame("A", np.full(16, 0.7), (0.0, 0.0), (0.0, 0.0), render_image=False)
    mask = model.cloud("A").region_tags == 1
    expected = -out.deformation.d_position.data[mask, 1].mean()
    assert predicted_aperture(model, "A", np.full(16, 0.7)) == expected


def test_aperture_is_invariant_to_gaussian_order():
    model = moving_model()
    audio = synth_audio(1, 2).embedding[0]
    before = predicted_aperture(model, "A", audio)
    c = model.cloud("A")
    perm = np.random.default_rng(1).permutation(c.count)
    model.clouds["A"] = GaussianCloud(Tensor(c.positions.data[perm], True), Tensor(c.features.data[perm], True),
                                      c.fc, c.region_tags[perm])
    assert predicted_aperture(model, "A", audio) == pytest.approx(before, abs=1e-15)


def test_drive_checks_audio_width():
    with pytest.raises(DimensionError):
        drive(fresh_model(), "A", np.zeros((5, 12)))


def test_zero_track_cross_drive_on_fresh_model():
    report, frames = cross_drive(fresh_model(), "A", constant_audio(6), render_frames=False)
    assert report.amplitude == 0.0 and report.degenerate
    assert frames is None


# ---------------------------------------------------------------- swap

def test_swap_rejects_self_and_unknown():
    model = fresh_model()
    audio = synth_audio(5, 0)
    with pytest.raises(ContractError):
        swap_identities(model, "A", "A", audio)
    with pytest.raises(UnknownIdentityError):
        swap_identities(model, "Z", "A", audio)


def test_swap_with_equal_vectors_is_bitwise_own(tmp_path):
    model = moving_model()
    model.identities.vectors["B"].data[...] = model.identities.vectors["A"].data
    res = swap_identities(model, "A", "B", synth_audio(4, 1), out_dir=tmp_path)
    for a, b in zip(res.own_frames, res.swapped_frames):
        np.testing.assert_array_equal(a, b)
    assert res.own.amplitude == res.swapped.amplitude
    assert len(list((tmp_path / "own").glob("frame_*.ppm"))) == 4
    assert len(list((tmp_path / "swapped").glob("frame_*.ppm"))) == 4


def test_swap_changes_motion_when_vectors_differ():
    model = moving_model()
    res = swap_identities(model, "A", "B", synth_audio(8, 1), render_frames=False)
    assert res.own.amplitude != res.swapped.amplitude


# ---------------------------------------------------------------- suite

def test_ground_truth_suite_is_exact(data):
    report = evaluate_suite(None, data, predictor=ground_truth_predictor(data))
    assert report["schema"] == EVAL_SCHEMA
    assert len(report["identities"]) == 4
    assert report["aggregate"]["identities"] == 4
    for entry in report["identities"]:
        assert entry["psnr"] == math.inf
        assert entry["sync_r"] == 1.0
        assert entry["frames"] == 2


def test_suite_requires_every_identity(data):
    with pytest.raises(UnknownIdentityError):
        evaluate_suite(fresh_model(), data)


def test_report_json_writes_inf_as_string(data):
    text = report_json(evaluate_suite(None, data, predictor=ground_truth_predictor(data)))
    doc = json.loads(text)
    assert doc["identities"][0]["psnr"] == "inf"
    assert doc["aggregate"]["psnr"] == "inf"
