"""Shallow init, latent imputer, and the merge pipeline."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from prflow.errors import EmptySampleError, ShapeError
from prflow.flow import FlowNetwork
from prflow.imputer import (
    ImputerNetwork,
    MaskedSample,
    impute,
    impute_batch,
    impute_dataset,
    imputer_apply,
    merge_observed,
    reconstruct_batch,
    shallow_init,
    shallow_init_batch,
)

from util import nearest_fill_reference, randomize_module_

torch.set_num_threads(1)


def test_masked_sample_validation():
    with pytest.raises(ShapeError):
        MaskedSample(np.zeros((3,)), np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        MaskedSample(np.zeros((3, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        MaskedSample(np.zeros((2, 2)), np.full((2, 2), 0.5))
    s = MaskedSample(np.zeros((2, 2, 3)), np.eye(2))
    assert s.pixel_mask.shape == (2, 2, 3)


def test_shallow_init_hand_case():
    values = np.array([[0.8, 0.0], [0.0, 0.2]])
    mask = np.array([[1, 0], [0, 1]], dtype=bool)
    filled = shallow_init(MaskedSample(values, mask))
    # Both missing pixels are at distance 1 from both observed ones; the
    # tie goes to the donor earlier in row-major order, pixel (0, 0).
    assert filled[0, 1] == 0.8
    assert filled[1, 0] == 0.8
    assert filled[0, 0] == 0.8 and filled[1, 1] == 0.2


def test_shallow_init_matches_brute_force():
    rng = np.random.default_rng(17)
    for trial in range(8):
        values = rng.random((6, 7))
        mask = rng.random((6, 7)) > 0.6
        if not mask.any():
            mask[0, 0] = True
        got = shallow_init(MaskedSample(values, mask))
        ref = nearest_fill_reference(values, mask)
        assert np.array_equal(got, ref)


def test_shallow_init_preserves_observed_bitwise():
    rng = np.random.default_rng(3)
    values = rng.random((5, 5))
    mask = rng.random((5, 5)) > 0.5
    mask[2, 2] = True
    filled = shallow_init(MaskedSample(values, mask))
    assert np.array_equal(filled[mask], values[mask])


def test_shallow_init_requires_an_observed_pixel():
    with pytest.raises(EmptySampleError):
        shallow_init(MaskedSample(np.zeros((3, 3)), np.zeros((3, 3), dtype=bool)))


def test_shallow_init_multichannel_shares_donor():
    rng = np.random.default_rng(5)
    values = rng.random((4, 4, 3))
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = True
    mask[3, 3] = True
    filled = shallow_init(MaskedSample(values, mask))
    # The donor pixel is chosen once per pixel, so every channel copies
    # from the same place as the per-channel brute force would.
    for c in range(3):
        assert np.array_equal(filled[:, :, c], nearest_fill_reference(values[:, :, c], mask))


def test_imputer_identity_at_zero_init_scale():
    net = ImputerNetwork(6, hidden=8, init_scale=0.0, seed=0)
    y = torch.from_numpy(np.random.default_rng(0).normal(size=(4, 6)))
    out = imputer_apply(net, y)
    assert torch.equal(out, y)


def test_imputer_near_identity_at_default_scale():
    net = ImputerNetwork(6, hidden=8, seed=0)
    y = torch.from_numpy(np.random.default_rng(0).normal(size=(4, 6)))
    with torch.no_grad():
        out = imputer_apply(net, y)
    assert float((out - y).abs().max()) < 0.05


def test_imputer_seed_determinism():
    a = ImputerNetwork(5, hidden=8, seed=4)
    b = ImputerNetwork(5, hidden=8, seed=4)
    c = ImputerNetwork(5, hidden=8, seed=5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_merge_observed_clamps_and_preserves():
    values = np.array([[0.3, 0.9], [0.1, 0.5]])
    mask = np.array([[1, 0], [0, 1]], dtype=bool)
    sample = MaskedSample(values, mask)
    x_hat = np.array([[5.0, 5.0], [-1.0, -1.0]])
    merged = merge_observed(x_hat, sample)
    assert merged[0, 0] == 0.3 and merged[1, 1] == 0.5
    assert merged[0, 1] == 1.0 and merged[1, 0] == 0.0


def test_impute_single_matches_batch_pipeline():
    rng = np.random.default_rng(7)
    flow = FlowNetwork(9, num_layers=2, hidden=8, seed=1)
    randomize_module_(flow, rng, scale=0.2)
    net = ImputerNetwork(9, hidden=8, seed=2)
    randomize_module_(net, rng, scale=0.2)
    values = rng.random((3, 3))
    mask = rng.random((3, 3)) > 0.4
    mask[1, 1] = True
    sample = MaskedSample(values * mask, mask)
    x_prev = shallow_init(sample)
    single = impute(x_prev, sample, flow, net)
    batch = impute_batch(
        x_prev.reshape(1, -1),
        sample.values.reshape(1, -1),
        sample.pixel_mask.reshape(1, -1),
        flow,
        net,
    )
    assert np.array_equal(single, batch.reshape(3, 3))
    assert np.array_equal(single[mask], sample.values[mask])
    assert single.min() >= 0.0 and single.max() <= 1.0


def test_reconstruct_batch_identity_at_init():
    flow = FlowNetwork(8, num_layers=2, hidden=8, seed=0)
    net = ImputerNetwork(8, hidden=8, init_scale=0.0, seed=0)
    x = torch.from_numpy(np.random.default_rng(2).random((5, 8)))
    y_rec, x_rec, logdet = reconstruct_batch(x, flow, net)
    assert torch.allclose(x_rec, x, atol=1e-12)
    assert torch.equal(logdet, torch.zeros(5, dtype=torch.float64))
    assert torch.equal(y_rec, flow.forward(x)[0])


def test_impute_dataset_observed_bitwise_every_pass():
    rng = np.random.default_rng(9)
    flow = FlowNetwork(16, num_layers=3, hidden=12, seed=3)
    randomize_module_(flow, rng, scale=0.3)
    net = ImputerNetwork(16, hidden=12, seed=3)
    randomize_module_(net, rng, scale=0.3)
    images = rng.random((6, 4, 4))
    masks = rng.random((6, 4, 4)) > 0.5
    masks[:, 0, 0] = True
    observed = np.where(masks, images, 0.0)
    for passes in (1, 2, 4):
        rec = impute_dataset(observed, masks, flow, net, passes=passes)
        assert np.array_equal(rec[masks], images[masks])
        assert rec.min() >= 0.0 and rec.max() <= 1.0
    with pytest.raises(ValueError):
        impute_dataset(observed, masks, flow, net, passes=0)


def test_impute_dataset_ignores_values_at_missing_positions():
    # Whatever garbage sits at unobserved entries must not leak through.
    rng = np.random.default_rng(13)
    flow = FlowNetwork(9, num_layers=2, hidden=8, seed=5)
    randomize_module_(flow, rng, scale=0.2)
    net = ImputerNetwork(9, hidden=8, seed=5)
    images = rng.random((4, 3, 3))
    masks = rng.random((4, 3, 3)) > 0.5
    masks[:, 1, 1] = True
    a = impute_dataset(np.where(masks, images, 0.0), masks, flow, net)
    b = impute_dataset(np.where(masks, images, 0.77), masks, flow, net)
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), rate=st.floats(0.0, 0.9))
def test_shallow_init_batch_property(seed, rate):
    rng = np.random.default_rng(seed)
    values = rng.random((3, 5, 5))
    masks = rng.random((3, 5, 5)) >= rate
    masks[:, 2, 2] = True
    filled = shallow_init_batch(np.where(masks, values, 0.0), masks)
    assert np.array_equal(filled[masks], values[masks])
    assert np.isfinite(filled).all()
    # Every filled value is the value of some observed pixel of its image.
    for i in range(3):
        obs_vals = set(values[i][masks[i]].tolist())
        for v in filled[i][~masks[i]].tolist():
            assert v in obs_vals
