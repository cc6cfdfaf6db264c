import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multifuture.belief import build_global_grid, compute_grid_geometry
from multifuture.data import SceneWindow, SynthSpec, build_windows, synth_generate
from multifuture.model import (
    ACVRNN,
    DTYPE,
    GaussianParams,
    ModelConfig,
    NumericError,
    collate,
    gaussian_kl_rows,
    prepare_window,
    reparameterize,
    rollout,
    window_terms,
)

TINY = dict(feature_dim=8, hidden_dim=8, latent_dim=4, heads=2, head_dim=3)


def tiny_model(seed=0, **kw):
    torch.manual_seed(seed)
    return ACVRNN(ModelConfig(**{**TINY, **kw})).eval()


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def rand(*shape, seed=0):
    return torch.randn(*shape, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))


def uniform_b(p, dim=25):
    return torch.full((p, dim), 1.0 / dim, dtype=DTYPE)


@pytest.fixture(scope="module")
def fork():
    scene = synth_generate(SynthSpec("y_fork", n_peds=2, n_windows=3, noise_std=0.05, seed=4))
    tracks = scene.tracks()
    return build_windows(scene), build_global_grid(tracks, compute_grid_geometry(tracks))


# -- configuration -------------------------------------------------------------


def test_default_shapes():
    m = ACVRNN()
    assert m.phi_x[0].in_features == 2 and m.phi_x[2].out_features == 64
    assert m.phi_b[0].in_features == 25
    assert m.prior[0].in_features == 128
    assert m.enc[0].in_features == 192 and m.dec[0].in_features == 192
    assert m.prior_mean.out_features == 16 and m.dec_mean.out_features == 2
    assert m.rnn.input_size == 128 and m.rnn.hidden_size == 64
    assert m.gat.W.shape == (4, 8, 64)
    assert m.refine_proj.in_features == 128 and m.refine_proj.out_features == 64


@pytest.mark.parametrize("bad", [dict(latent_dim=0), dict(gru_layers=2), dict(decoder_mean_clip=0), dict(init_mode="x")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_config_dict_roundtrip():
    cfg = ModelConfig(**TINY, init_mode="zero")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- Gaussian heads --------------------------------------------------------------


def test_zero_networks_give_unit_gaussians():
    m = tiny_model()
    zero_(m)
    h, b, x, z = torch.zeros(3, 8, dtype=DTYPE), uniform_b(3), rand(3, 2), rand(3, 4)
    for g in (m.prior_step(h, b), m.encoder_step(x, h, b), m.decoder_step(z, h, b)):
        assert not g.mean.any() and not g.log_var.any()


def test_prior_rows_and_belief_dependence():
    m = tiny_model(1)
    h = rand(1, 8).repeat(2, 1)
    g = m.prior_step(h, uniform_b(2))
    assert torch.equal(g.mean[0], g.mean[1])
    b = torch.softmax(rand(2, 25, seed=3), -1)
    assert not torch.allclose(m.prior_step(h, b).mean, g.mean)


def test_encoder_differs_from_prior():
    m = tiny_model(2)
    h, b = rand(2, 8), uniform_b(2)
    assert not torch.allclose(m.encoder_step(rand(2, 2, seed=1), h, b).mean, m.prior_step(h, b).mean)


def test_non_finite_input_rejected():
    m = tiny_model()
    h = rand(2, 8)
    h[0, 0] = float("nan")
    with pytest.raises(NumericError):
        m.prior_step(h, uniform_b(2))
    with pytest.raises(NumericError):
        m.encoder_step(torch.full((2, 2), float("inf"), dtype=DTYPE), rand(2, 8), uniform_b(2))


def test_decoder_mean_saturates():
    m = tiny_model()
    with torch.no_grad():
        m.dec_mean.bias.fill_(1e6)
        m.dec_logvar.bias.fill_(-1e6)
    g = m.decoder_step(rand(2, 4), rand(2, 8), uniform_b(2))
    assert torch.equal(g.mean, torch.full((2, 2), 10.0, dtype=DTYPE))
    assert torch.equal(g.log_var, torch.full((2, 2), -10.0, dtype=DTYPE))


def test_encoder_input_gradient():
    m = tiny_model(3)
    h, b = rand(2, 8), uniform_b(2)
    x = rand(2, 2, seed=5).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda v: m.encoder_step(v, h, b), (x,), eps=1e-6, atol=1e-8, rtol=1e-4)


class DecoderOnly(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, z, h, b):
        return tuple(self.model.decoder_step(z, h, b))


def test_decoder_parameter_gradients():
    m = tiny_model(4)
    z, h, b = rand(2, 4), rand(2, 8, seed=1), torch.softmax(rand(2, 25, seed=2), -1)
    wrapper = DecoderOnly(m)
    names = [n for n, _ in wrapper.named_parameters() if n.startswith(("model.dec", "model.phi_z", "model.phi_b"))]
    params = dict(wrapper.named_parameters())
    values = tuple(params[n].detach().clone().requires_grad_(True) for n in names)

    def f(*v):
        return torch.func.functional_call(wrapper, dict(zip(names, v)), (z, h, b))

    assert torch.autograd.gradcheck(f, values, eps=1e-6, atol=1e-8, rtol=1e-4)


# -- reparameterisation --------------------------------------------------------------


def test_reparameterize_identities():
    g = GaussianParams(rand(3, 4), rand(3, 4, seed=1))
    assert torch.equal(reparameterize(g, torch.zeros(3, 4, dtype=DTYPE)), g.mean)
    n = rand(3, 4, seed=2)
    assert torch.equal(reparameterize(GaussianParams(g.mean, torch.zeros(3, 4, dtype=DTYPE)), n), g.mean + n)


def test_reparameterize_monte_carlo():
    mean = torch.tensor([0.3, -1.2], dtype=DTYPE)
    log_var = torch.tensor([0.5, -0.7], dtype=DTYPE)
    z = reparameterize(GaussianParams(mean, log_var), rand(100_000, 2, seed=9))
    sd = torch.exp(0.5 * log_var)
    assert ((z.mean(0) - mean).abs() < 3 * sd / math.sqrt(1e5)).all()
    np.testing.assert_allclose(z.std(0).numpy(), sd.numpy(), rtol=1e-2)


# -- recurrence ----------------------------------------------------------------------


def hand_gru(x, h, w_ih, w_hh, b_ih, b_hh):
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    gi = x @ w_ih.T + b_ih
    gh = h @ w_hh.T + b_hh
    n = h.shape[1]
    r = sig(gi[:, :n] + gh[:, :n])
    u = sig(gi[:, n : 2 * n] + gh[:, n : 2 * n])
    c = np.tanh(gi[:, 2 * n :] + r * gh[:, 2 * n :])
    return (1 - u) * c + u * h


def test_recurrence_matches_hand_rolled_gru():
    m = tiny_model(5)
    x, z, h = rand(3, 2), rand(3, 4, seed=1), rand(3, 8, seed=2).tanh()
    inp = torch.cat([m.phi_x(x), m.phi_z(z)], -1).detach().numpy()
    cell = m.rnn
    expected = hand_gru(inp, h.numpy(), *(t.detach().numpy() for t in (cell.weight_ih, cell.weight_hh, cell.bias_ih, cell.bias_hh)))
    out = m.recurrence_step(x, z, h).detach().numpy()
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
    assert (np.abs(out) < 1).all()


def test_update_gate_one_keeps_state():
    m = tiny_model(6)
    with torch.no_grad():
        m.rnn.bias_ih[8:16] = 1e3
    h = rand(3, 8, seed=3).tanh()
    out = m.recurrence_step(rand(3, 2), rand(3, 4, seed=1), h)
    # torch evaluates n + u * (h - n), exact up to one rounding
    np.testing.assert_allclose(out.detach().numpy(), h.numpy(), rtol=0, atol=1e-15)


def test_zero_recurrence():
    m = tiny_model()
    zero_(m.rnn)
    h = torch.zeros(2, 8, dtype=DTYPE)
    assert not m.recurrence_step(torch.zeros(2, 2, dtype=DTYPE), torch.zeros(2, 4, dtype=DTYPE), h).any()


# -- observation and generation steps ---------------------------------------------------


def test_observe_step_deterministic_and_kl_nonnegative():
    m = tiny_model(7)
    args = (rand(3, 2), rand(3, 8, seed=1), torch.softmax(rand(3, 25, seed=2), -1), torch.ones(3, 3, dtype=torch.bool))
    a, ha = m.observe_step(*args, gen=torch.Generator().manual_seed(1))
    b, hb = m.observe_step(*args, gen=torch.Generator().manual_seed(1))
    assert all(torch.equal(x, y) for x, y in zip(a, b)) and torch.equal(ha, hb)
    assert (a.kl_latent >= 0).all()
    assert ha.shape == (3, 8)


def test_observe_singleton_scene():
    m = tiny_model(8)
    terms, h = m.observe_step(rand(1, 2), rand(1, 8), uniform_b(1), torch.ones(1, 1, dtype=torch.bool))
    assert torch.isfinite(h).all() and all(torch.isfinite(t).all() for t in terms)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gaussian_kl_nonnegative(seed):
    q = GaussianParams(rand(4, 16, seed=seed), rand(4, 16, seed=seed + 1))
    p = GaussianParams(rand(4, 16, seed=seed + 2), rand(4, 16, seed=seed + 3))
    assert (gaussian_kl_rows(q, p) >= 0).all()
    assert not gaussian_kl_rows(q, q).any()


def test_generate_modes():
    m = tiny_model(9)
    h, pos, b = rand(2, 8), rand(2, 2, seed=1), uniform_b(2)
    adj = lambda p: torch.ones(2, 2, dtype=torch.bool)
    x1, h1 = m.generate_step(h, pos, b, adj, mode="mean")
    x2, h2 = m.generate_step(h, pos, b, adj, mode="mean")
    assert torch.equal(x1, x2) and torch.equal(h1, h2)
    s1, _ = m.generate_step(h, pos, b, adj, torch.Generator().manual_seed(3))
    s2, _ = m.generate_step(h, pos, b, adj, torch.Generator().manual_seed(3))
    assert torch.equal(s1, s2)
    with pytest.raises(ValueError):
        m.generate_step(h, pos, b, adj, mode="median")


def test_sample_approaches_mean_at_min_log_var():
    m = tiny_model(10)
    with torch.no_grad():
        m.dec_logvar.bias.fill_(-1e3)
        m.prior_logvar.bias.fill_(-1e3)
    h, pos, b = rand(2, 8), rand(2, 2, seed=1), uniform_b(2)
    adj = lambda p: torch.ones(2, 2, dtype=torch.bool)
    mean, _ = m.generate_step(h, pos, b, adj, mode="mean")
    sample, _ = m.generate_step(h, pos, b, adj, torch.Generator().manual_seed(0))
    # every draw moves by at most a few exp(-5) standard deviations
    assert (sample - mean).abs().max() < 5 * math.exp(-5) * 4


# -- windows and rollout ------------------------------------------------------------------


def test_window_terms_cover_all_transitions(fork):
    wins, grid = fork
    m = tiny_model(11)
    batch, weights = collate([prepare_window(w, grid, m.cfg) for w in wins])
    assert weights.sum().item() == pytest.approx(1.0)
    terms = window_terms(m, batch, torch.Generator().manual_seed(0), map_samples=10)
    assert len(terms) == 19
    assert terms[0].nll.shape == (batch.n_peds,)
    assert all((t.kl_belief >= 0).all() for t in terms)


def test_rollout_shape_and_determinism(fork):
    wins, grid = fork
    m = tiny_model(12)
    a = rollout(m, wins[0], grid, k=5, gen=torch.Generator().manual_seed(2))
    b = rollout(m, wins[0], grid, k=5, gen=torch.Generator().manual_seed(2))
    assert a.shape == (5, 2, 12, 2)
    assert np.array_equal(a, b)
    assert rollout(m, wins[0], grid, k=3, steps=30).shape == (3, 2, 30, 2)


def test_rollout_mean_single_future(fork):
    wins, grid = fork
    m = tiny_model(13)
    a = rollout(m, wins[1], grid, k=1, mode="mean")
    b = rollout(m, wins[1], grid, k=1, mode="mean")
    assert a.shape == (1, 2, 12, 2) and np.array_equal(a, b)


def test_rollout_samples_are_independent_copies(fork):
    wins, grid = fork
    m = tiny_model(14)
    many = rollout(m, wins[0], grid, k=4, mode="mean")
    # with no noise the four disconnected copies must agree exactly
    for i in range(1, 4):
        np.testing.assert_allclose(many[i], many[0], rtol=0, atol=1e-12)


def test_rollout_permutation_equivariant(fork):
    wins, grid = fork
    w = wins[2]
    m = tiny_model(15)
    perm = [1, 0]
    swapped = SceneWindow(
        [w.ped_ids[i] for i in perm], w.abs_positions[perm], w.displacements[perm], w.t_obs, w.t_pred, w.start_frame
    )
    a = rollout(m, w, grid, k=1, mode="mean")
    b = rollout(m, swapped, grid, k=1, mode="mean")
    np.testing.assert_allclose(b[:, perm], a, rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", ["zero", "learned", "absolute"])
def test_init_modes(mode):
    m = tiny_model(init_mode=mode)
    h = m.init_hidden(rand(3, 2))
    assert h.shape == (3, 8)
    if mode == "zero":
        assert not h.any()
    if mode == "learned":
        assert torch.equal(h[0], h[1])
