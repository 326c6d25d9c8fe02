import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from graphdiff.denoiser import (
    DenoiserConfig,
    GraphDenoiser,
    ModulatedGraphConv,
    build_denoiser,
    count_parameters,
    gcn_layer_forward,
    modulated_gcn_forward,
    normalize_affinity,
    timestep_embedding,
)
from graphdiff.skeleton import binary_affinity, h36m17, normalized_affinity

from oracles import brute_force_modulated_gcn, layer_params, random_layer


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), J=st.integers(1, 6), d_in=st.integers(1, 5), d_out=st.integers(1, 5))
def test_modulated_gcn_matches_brute_force(seed, J, d_in, d_out):
    rng = np.random.default_rng(seed)
    H, A, P, Q, W, M, b = random_layer(rng, J, d_in, d_out)
    got = modulated_gcn_forward(torch.tensor(H), layer_params(A, P, Q, W, M, b)).numpy()
    np.testing.assert_allclose(got, brute_force_modulated_gcn(H, A, P, Q, W, M, b), atol=1e-10)


def test_unmodulated_layer_reduces_to_vanilla_gcn(rng):
    spec = h36m17()
    A = binary_affinity(spec).values
    W = rng.normal(size=(8, 5))
    H = rng.normal(size=(5, 17))
    ones, zeros = np.ones((17, 17)), np.zeros((17, 17))
    params = layer_params(A, ones, zeros, W, np.ones((17, 8)), np.zeros(8))
    vanilla = gcn_layer_forward(torch.tensor(H), torch.tensor(normalized_affinity(spec).values), torch.tensor(W))
    torch.testing.assert_close(modulated_gcn_forward(torch.tensor(H), params), vanilla)


def test_layer_module_row_form_matches_column_function():
    torch.manual_seed(0)
    layer = ModulatedGraphConv(4, 6, binary_affinity(h36m17()).values).double()
    with torch.no_grad():
        layer.p_raw.uniform_(0.5, 1.5)
        layer.q_raw.uniform_(-0.1, 0.1)
        layer.modulation.uniform_(0.5, 1.5)
        layer.bias.normal_()
    x = torch.randn(3, 17, 4, dtype=torch.float64)
    params = layer_params(*(v.detach().numpy() for v in (layer.adjacency.double(), layer.p_raw, layer.q_raw,
                                                         layer.weight.T, layer.modulation, layer.bias)))
    for b in range(3):
        col = modulated_gcn_forward(x[b].T, params, activation=False)
        torch.testing.assert_close(layer(x[b]), col.T)


def test_masks_are_symmetric():
    layer = ModulatedGraphConv(2, 2, binary_affinity(h36m17()).values)
    with torch.no_grad():
        layer.p_raw.normal_()
        layer.q_raw.normal_()
    P, A = layer.mask_P(), layer.normalized_modulated_affinity()
    torch.testing.assert_close(P, P.T)
    torch.testing.assert_close(layer.layer_params().effective_Q(), layer.layer_params().effective_Q().T)
    torch.testing.assert_close(A, A.T)


def test_degree_floor_keeps_affinity_finite():
    a = torch.tensor([[0.0, -1.0], [-1.0, 0.0]])
    assert torch.isfinite(normalize_affinity(a)).all()


def test_fresh_layer_uses_normalized_skeleton_affinity():
    spec = h36m17()
    layer = ModulatedGraphConv(3, 3, binary_affinity(spec).values).double()
    np.testing.assert_allclose(layer.normalized_modulated_affinity().detach().numpy(),
                               normalized_affinity(spec).values, atol=1e-7)


def test_timestep_embedding_distinct_and_unit_pairs():
    t = torch.arange(0, 101)
    emb = timestep_embedding(t, 128)
    assert emb.shape == (101, 128)
    np.testing.assert_allclose((emb[:, :64] ** 2 + emb[:, 64:] ** 2).numpy(), 1.0, atol=1e-12)
    dists = torch.cdist(emb, emb) + torch.eye(101) * 10
    assert dists.min() > 1e-3
    assert timestep_embedding(torch.tensor([3]), 7).shape == (1, 7)


def test_default_parameter_count():
    model = GraphDenoiser(DenoiserConfig())
    assert count_parameters(model) == 2_821_475


def small_config(**kw):
    return DenoiserConfig(**{"model_dim": 16, "num_blocks": 2, "time_embed_dim": 8, **kw})


def test_output_shapes_and_unbatched_call():
    model = build_denoiser(small_config(), seed=0)
    x, y = torch.randn(4, 17, 3), torch.randn(4, 17, 2)
    out = model(x, torch.tensor([1, 5, 50, 100]), y)
    assert out.eps.shape == (4, 17, 3) and out.y_recon.shape == (4, 17, 2)
    single = model(x[1], 5, y[1])
    torch.testing.assert_close(single.eps, out.eps[1], atol=1e-6, rtol=1e-5)


def test_batch_items_are_independent():
    model = build_denoiser(small_config(), seed=3, dtype=torch.float64)
    x, y = torch.randn(6, 17, 3, dtype=torch.float64), torch.randn(6, 17, 2, dtype=torch.float64)
    t = torch.randint(1, 101, (6,))
    full = model(x, t, y).eps
    for i in range(6):
        torch.testing.assert_close(model(x[i:i + 1], t[i:i + 1], y[i:i + 1]).eps[0], full[i])


def test_timestep_changes_prediction():
    model = build_denoiser(small_config(), seed=0, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x, y = torch.randn(1, 17, 3, dtype=torch.float64), torch.randn(1, 17, 2, dtype=torch.float64)
    assert not torch.allclose(model(x, 1, y).eps, model(x, 80, y).eps)


@pytest.mark.parametrize("blocks", [1, 2, 4])
def test_depth_variants_run(blocks):
    model = build_denoiser(small_config(num_blocks=blocks))
    assert model(torch.zeros(2, 17, 3), 3, torch.zeros(2, 17, 2)).eps.shape == (2, 17, 3)


def test_build_is_seeded():
    a, b = build_denoiser(small_config(), seed=5), build_denoiser(small_config(), seed=5)
    c = build_denoiser(small_config(), seed=6)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_input_validation():
    model = build_denoiser(small_config())
    with pytest.raises(ValueError):
        model(torch.zeros(2, 16, 3), 1, torch.zeros(2, 16, 2))
    with pytest.raises(ValueError):
        model(torch.zeros(2, 17, 3), 101, torch.zeros(2, 17, 2))
    with pytest.raises(ValueError):
        model(torch.zeros(2, 17, 3), 1, torch.zeros(3, 17, 2))


def test_config_round_trip_and_validation(chain4):
    cfg = small_config(skeleton=chain4, activation="silu")
    assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        DenoiserConfig(activation="swish")
    with pytest.raises(ValueError):
        DenoiserConfig(model_dim=0)


def test_layer_gradcheck():
    torch.manual_seed(0)
    layer = ModulatedGraphConv(2, 3, binary_affinity(h36m17()).values).double()
    x = torch.randn(17, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(layer, (x,))
