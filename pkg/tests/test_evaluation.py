import csv
import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from graphdiff.data import DatasetError, synth_toy_dataset
from graphdiff.diffusion import SamplerConfig, sample_items
from graphdiff.evaluation import evaluate, mpjpe, p_mpjpe, procrustes_align, root_relative
from graphdiff.schedule import cosine_schedule

SCH = cosine_schedule(100)


def test_mpjpe_hand_example():
    gt = np.zeros((4, 3))
    pred = gt + np.array([3.0, 4.0, 0.0])
    assert mpjpe(pred, gt) == 5.0
    pred[0] = [0, 0, 0]
    assert mpjpe(pred, gt) == pytest.approx(15 / 4)
    assert mpjpe(np.stack([pred, gt]), np.stack([gt, gt])).tolist() == [3.75, 0.0]
    with pytest.raises(ValueError):
        mpjpe(np.zeros((3, 3)), np.zeros((4, 3)))


def test_root_relative():
    pose = np.arange(12.0).reshape(4, 3)
    out = root_relative(pose, 1)
    np.testing.assert_array_equal(out[1], 0)
    np.testing.assert_array_equal(out[0], pose[0] - pose[1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_similarity_copy_is_aligned_exactly(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(17, 3)) * 300
    R = Rotation.random(random_state=rng).as_matrix()
    pred = rng.uniform(0.3, 3.0) * gt @ R.T + rng.normal(size=3) * 500
    aligned, tf = procrustes_align(pred, gt, return_transform=True)
    assert np.abs(aligned - gt).max() < 1e-8
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0)
    assert not tf.degenerate


def sse(pred, gt):
    return ((pred - gt) ** 2).sum()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.booleans())
def test_alignment_is_least_squares_optimal(seed, scale):
    rng = np.random.default_rng(seed)
    gt, pred = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))

    def objective(v):
        s = np.exp(v[6]) if scale else 1.0
        return sse(s * pred @ Rotation.from_rotvec(v[:3]).as_matrix().T + v[3:6], gt)

    best = min(minimize(objective, rng.normal(size=7) * k, method="BFGS").fun for k in (0.0, 1.0, 2.0, 3.0))
    assert sse(procrustes_align(pred, gt, scale=scale), gt) <= best + 1e-7


def test_mirror_image_is_not_reflected_into_place():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(17, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    _, tf = procrustes_align(mirrored, gt, return_transform=True)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0)
    assert p_mpjpe(mirrored, gt) > 1e-3


def test_rigid_alignment_keeps_scale():
    gt = np.random.default_rng(1).normal(size=(17, 3))
    assert p_mpjpe(2 * gt, gt, scale=False) > 0.1
    assert p_mpjpe(2 * gt, gt, scale=True) < 1e-10


@pytest.mark.parametrize("pred", [np.ones((5, 3)), np.outer(np.arange(5.0), [1.0, 2.0, 3.0])])
def test_degenerate_prediction_only_translates(pred):
    gt = np.random.default_rng(2).normal(size=(5, 3))
    aligned, tf = procrustes_align(pred, gt, return_transform=True)
    assert tf.degenerate
    assert np.all(np.isfinite(aligned))
    np.testing.assert_allclose(aligned.mean(axis=0), gt.mean(axis=0))


def test_batched_alignment_matches_single():
    rng = np.random.default_rng(3)
    pred, gt = rng.normal(size=(4, 17, 3)), rng.normal(size=(4, 17, 3))
    batched = p_mpjpe(pred, gt)
    assert batched == pytest.approx([p_mpjpe(pred[i], gt[i]) for i in range(4)])


def test_oracle_evaluation_is_exact_and_report_layout():
    ds = synth_toy_dataset(3, 20)
    rep = evaluate(None, ds, SCH, SamplerConfig(num_hypotheses=2, clip_x0=None), oracle=True)
    assert rep.average[0] < 1e-6 and rep.average[1] < 1e-6
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["action", "mpjpe_mm", "p_mpjpe_mm", "count"]
    assert rows[-1][0] == "Avg" and int(rows[-1][3]) == 20
    assert sum(int(r[3]) for r in rows[1:-1]) == 20
    table = rep.to_table().splitlines()
    assert table[0].split()[-1] == "Avg"
    assert table[1].startswith("MPJPE") and table[2].startswith("P-MPJPE")


def test_best_of_n_picks_closest_hypothesis():
    ds = synth_toy_dataset(4, 6)

    def noisy(x_t, t, y):
        return 0.5 * x_t

    cfg = SamplerConfig(mode="ddim", ddim_steps=5, ddim_eta=1.0, num_hypotheses=4)
    best = evaluate(noisy, ds, SCH, cfg, aggregate="best")
    mean = evaluate(noisy, ds, SCH, cfg, aggregate="mean")
    from graphdiff.diffusion import sample_items

    _, y = ds.network_arrays()
    hyps = sample_items(noisy, torch.tensor(y), SCH, cfg).numpy() * 1000
    gt = root_relative(ds.joints)
    per_hyp = mpjpe(root_relative(hyps), np.broadcast_to(gt[:, None], hyps.shape))
    np.testing.assert_allclose(best.per_item_mpjpe, per_hyp.min(axis=1), rtol=1e-9)
    np.testing.assert_allclose(mean.per_item_mpjpe, mpjpe(root_relative(hyps.mean(axis=1)), gt), rtol=1e-9)
    assert "best-of-N" in best.sampler


def test_evaluate_rejects_unlabelled_data():
    ds = synth_toy_dataset(0, 4)
    ds.joints[1] = np.nan
    with pytest.raises(DatasetError):
        evaluate(None, ds, SCH, oracle=True)
    with pytest.raises(ValueError):
        evaluate(None, synth_toy_dataset(0, 4), SCH, aggregate="median", oracle=True)
