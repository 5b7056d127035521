import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from embgen.errors import NumericalError, ValidationError
from embgen.hvae import (
    GroupGaussian,
    LatentHierarchySpec,
    build_model,
    decode,
    elbo,
    encode,
    kl_gaussian,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)
from embgen.store import NormalizationStats

from oracles import central_difference_grad, kl_diag_gaussian

torch.set_num_threads(1)


def tiny_spec(**overrides):
    base = dict(levels=2, groups_per_level=1, dims_per_group=2, hidden_size=8, input_dim=4)
    base.update(overrides)
    return LatentHierarchySpec(**base)


def gg(mean, logvar):
    return GroupGaussian(torch.as_tensor(mean, dtype=torch.float64),
                         torch.as_tensor(logvar, dtype=torch.float64))


# ---------------------------------------------------------------------------
# spec and construction

def test_paper_shaped_configs_group_counts():
    wide = LatentHierarchySpec(levels=2, groups_per_level=5, dims_per_group=20,
                               hidden_size=64, input_dim=1024)
    assert wide.total_groups == 10
    assert wide.total_latent_dims == 200
    assert wide.resolved_backbone() == "conv"
    narrow = LatentHierarchySpec(levels=2, groups_per_level=3, dims_per_group=8,
                                 hidden_size=64, input_dim=192)
    assert narrow.total_groups == 6
    assert narrow.total_latent_dims == 48
    assert narrow.resolved_backbone() == "conv"


def test_small_input_falls_back_to_mlp():
    assert tiny_spec().resolved_backbone() == "mlp"


def test_invalid_spec_rejected():
    with pytest.raises(ValidationError):
        LatentHierarchySpec(levels=0, groups_per_level=1, dims_per_group=1,
                            hidden_size=4, input_dim=4)


def test_build_model_deterministic():
    spec = tiny_spec()
    a = build_model(spec, seed=11)
    b = build_model(spec, seed=11)
    for (na, pa), (nb, pb) in zip(a.net.named_parameters(), b.net.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb)
    c = build_model(spec, seed=12)
    assert any(not torch.equal(pa, pc) for (_, pa), (_, pc)
               in zip(a.net.named_parameters(), c.net.named_parameters()))


def test_posterior_equals_prior_at_init():
    model = build_model(tiny_spec(), seed=0)
    x = np.array([0.1, -0.2, 0.3, 0.0])
    qs = encode(model, x)
    assert torch.allclose(qs[0].mean, torch.zeros(2, dtype=torch.float64))
    assert torch.allclose(qs[0].logvar, torch.zeros(2, dtype=torch.float64))


@pytest.mark.parametrize("spec", [
    LatentHierarchySpec(2, 5, 20, 64, 1024),
    LatentHierarchySpec(2, 3, 8, 64, 192),
    LatentHierarchySpec(1, 2, 3, 16, 8),
    tiny_spec(),
])
def test_encode_decode_shape_round_trip(spec):
    model = build_model(spec, seed=3)
    rng = np.random.default_rng(5)
    x = np.clip(rng.normal(size=spec.input_dim), -1, 1)
    qs = encode(model, x)
    assert len(qs) == spec.total_groups
    for q in qs:
        assert q.mean.shape == (spec.dims_per_group,)
        assert q.logvar.shape == (spec.dims_per_group,)
    x_mean, x_logvar = decode(model, [q.mean for q in qs])
    assert x_mean.shape == (spec.input_dim,)
    assert x_logvar.shape == (spec.input_dim,)


# ---------------------------------------------------------------------------
# encode / decode contracts

def test_encode_deterministic_and_batch_consistent():
    model = build_model(tiny_spec(), seed=7)
    rng = np.random.default_rng(1)
    x = np.clip(rng.normal(size=(3, 4)), -1, 1)
    qs1 = encode(model, x)
    qs2 = encode(model, x)
    for a, b in zip(qs1, qs2):
        assert torch.equal(a.mean, b.mean) and torch.equal(a.logvar, b.logvar)
    single = encode(model, x[1])
    for a, b in zip(qs1, single):
        assert torch.allclose(a.mean[1], b.mean)


def test_encode_rejects_wrong_dim():
    model = build_model(tiny_spec(), seed=0)
    with pytest.raises(ValidationError):
        encode(model, np.zeros(5))


def test_encode_logvar_within_clamp_bounds():
    model = build_model(tiny_spec(), seed=2)
    for _ in range(3):
        x = np.clip(np.random.default_rng(0).normal(size=4), -1, 1)
        for q in encode(model, x):
            assert torch.all(q.logvar >= -8.0) and torch.all(q.logvar <= 4.0)


def test_decode_deterministic_and_validates():
    spec = tiny_spec()
    model = build_model(spec, seed=9)
    z = [np.array([0.5, -0.5]), np.array([1.0, 2.0])]
    m1, lv1 = decode(model, z)
    m2, lv2 = decode(model, z)
    assert torch.equal(m1, m2) and torch.equal(lv1, lv2)
    assert torch.all(lv1 >= -8.0) and torch.all(lv1 <= 4.0)
    with pytest.raises(ValidationError):
        decode(model, z[:1])
    with pytest.raises(ValidationError):
        decode(model, [np.zeros(3), np.zeros(3)])


def test_decoded_mean_is_bounded():
    model = build_model(tiny_spec(), seed=4)
    z = [np.array([5.0, -5.0]), np.array([3.0, 3.0])]
    x_mean, _ = decode(model, z)
    assert torch.all(x_mean > -1.0) and torch.all(x_mean < 1.0)


# ---------------------------------------------------------------------------
# reparameterization

def test_reparameterize_zero_noise_is_mean():
    g = gg([0.3, -0.7], [0.5, -1.0])
    assert torch.equal(reparameterize(g, np.zeros(2)), g.mean)


def test_reparameterize_unit_logvar_unit_noise():
    g = gg([1.0, 2.0], [0.0, 0.0])
    out = reparameterize(g, np.array([1.0, 0.0]))
    assert torch.allclose(out, torch.tensor([2.0, 2.0], dtype=torch.float64))


def test_reparameterize_variance_matches_monte_carlo():
    n = 100_000
    logvar = 0.7
    g = gg(np.full((n, 1), 0.3), np.full((n, 1), logvar))
    gen = torch.Generator().manual_seed(123)
    eps = torch.randn(n, 1, generator=gen, dtype=torch.float64)
    draws = reparameterize(g, eps)
    observed = float(draws.var(unbiased=True))
    assert observed == pytest.approx(np.exp(logvar), rel=0.05)


# ---------------------------------------------------------------------------
# KL divergence

def test_kl_identical_is_zero():
    g = gg([0.1, 0.2, 0.3], [0.5, -0.5, 0.0])
    assert float(kl_gaussian(g, g)) == pytest.approx(0.0, abs=1e-12)


def test_kl_unit_mean_shift():
    q = gg([0.0], [0.0])
    p = gg([1.0], [0.0])
    assert float(kl_gaussian(q, p)) == pytest.approx(0.5, abs=1e-12)


def test_kl_variance_mismatch():
    q = gg([0.0], [np.log(4.0)])
    p = gg([0.0], [0.0])
    expected = 0.5 * (4.0 - 1.0 - np.log(4.0))
    assert float(kl_gaussian(q, p)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.8069, abs=5e-5)


def test_kl_matches_closed_form_oracle_on_random_pairs():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(1000):
        dim = int(rng.integers(1, 8))
        mq, mp = rng.normal(size=dim), rng.normal(size=dim)
        lq, lp = rng.uniform(-4, 3, size=dim), rng.uniform(-4, 3, size=dim)
        ours = float(kl_gaussian(gg(mq, lq), gg(mp, lp)))
        ref = kl_diag_gaussian(mq, lq, mp, lp)
        worst = max(worst, abs(ours - ref))
    assert worst < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6).flatmap(
    lambda mq: st.tuples(
        st.just(mq),
        st.lists(st.floats(-6, 3), min_size=len(mq), max_size=len(mq)),
        st.lists(st.floats(-5, 5), min_size=len(mq), max_size=len(mq)),
        st.lists(st.floats(-6, 3), min_size=len(mq), max_size=len(mq)),
    )))
def test_property_kl_non_negative(args):
    mq, lq, mp, lp = args
    assert float(kl_gaussian(gg(mq, lq), gg(mp, lp))) >= -1e-9


# ---------------------------------------------------------------------------
# ELBO

def fixed_noise(spec, batch, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [torch.randn(batch, spec.dims_per_group, generator=gen, dtype=torch.float64)
            for _ in range(spec.total_groups)]


def test_elbo_beta_zero_is_pure_reconstruction():
    spec = tiny_spec()
    model = build_model(spec, seed=1)
    x = np.array([0.2, -0.1, 0.4, -0.3])
    out = elbo(model, x, beta=0.0, noise=fixed_noise(spec, 1))
    assert out.total_loss.item() == pytest.approx(-out.recon_loglik.item(), abs=1e-12)


def test_elbo_free_bits_floor_dominates_when_kl_small():
    spec = tiny_spec()
    model = build_model(spec, seed=1)  # posteriors == priors at init, so KL == 0
    x = np.array([0.2, -0.1, 0.4, -0.3])
    lam = 0.25
    out = elbo(model, x, beta=0.5, free_bits_lambda=lam, noise=fixed_noise(spec, 1))
    assert torch.all(out.kl_per_group < lam)
    expected_kl_term = 0.5 * spec.total_groups * lam
    assert out.total_loss.item() == pytest.approx(
        -out.recon_loglik.item() + expected_kl_term, abs=1e-12)


def test_elbo_breakdown_invariants_random_model():
    spec = tiny_spec()
    model = build_model(spec, seed=1)
    gen = torch.Generator().manual_seed(55)
    with torch.no_grad():
        for p in model.net.parameters():
            p.add_(0.2 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    x = np.clip(np.random.default_rng(2).normal(size=(5, 4)), -1, 1)
    lam = 0.1
    out = elbo(model, x, beta=0.7, free_bits_lambda=lam, noise=fixed_noise(spec, 5))
    assert torch.all(out.kl_per_group >= -1e-6)
    assert torch.allclose(out.kl_clamped_per_group,
                          torch.clamp(out.kl_per_group, min=lam))
    assert out.total_loss.item() == pytest.approx(
        -out.recon_loglik.item() + 0.7 * out.kl_clamped_per_group.detach().sum().item(), rel=1e-12)


def test_elbo_deterministic_given_noise_and_generator():
    spec = tiny_spec()
    model = build_model(spec, seed=3)
    x = np.array([0.2, -0.1, 0.4, -0.3])
    noise = fixed_noise(spec, 1, seed=9)
    a = elbo(model, x, noise=noise)
    b = elbo(model, x, noise=noise)
    assert a.total_loss.item() == b.total_loss.item()
    g1 = elbo(model, x, generator=torch.Generator().manual_seed(77))
    g2 = elbo(model, x, generator=torch.Generator().manual_seed(77))
    assert g1.total_loss.item() == g2.total_loss.item()


def test_elbo_rejects_bad_beta():
    model = build_model(tiny_spec(), seed=0)
    with pytest.raises(ValidationError):
        elbo(model, np.zeros(4), beta=1.5)


def test_elbo_raises_numerical_error_on_nan_parameter():
    spec = tiny_spec()
    model = build_model(spec, seed=0)
    with torch.no_grad():
        model.net.backbone.out_fc.weight[0, 0] = float("nan")
    with pytest.raises(NumericalError):
        elbo(model, np.zeros(4), noise=fixed_noise(spec, 1))


# ---------------------------------------------------------------------------
# gradient fidelity: analytic (autograd) vs central finite differences

def relative_block_error(analytic, numeric):
    a = np.linalg.norm(analytic - numeric)
    b = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return a / b


@pytest.mark.slow
def test_gradients_match_finite_differences_on_every_block():
    spec = tiny_spec()  # D=4, L=2
    model = build_model(spec, seed=21)
    gen = torch.Generator().manual_seed(100)
    with torch.no_grad():
        for p in model.net.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    x = np.array([[0.4, -0.2, 0.1, 0.3], [-0.5, 0.2, 0.0, -0.1]])
    noise = fixed_noise(spec, 2, seed=8)

    def loss():
        return elbo(model, x, beta=1.0, free_bits_lambda=0.0, noise=noise).total_loss

    model.net.zero_grad()
    loss().backward()
    checked = 0
    for name, p in model.net.named_parameters():
        numeric = central_difference_grad(p, loss, step=1e-4)
        analytic = p.grad.numpy() if p.grad is not None else np.zeros(tuple(p.shape))
        err = relative_block_error(analytic, numeric)
        assert err < 1e-3, f"gradient mismatch on block {name}: rel err {err:.2e}"
        checked += 1
    assert checked == sum(1 for _ in model.net.parameters())


def test_encoder_decoder_parameter_partition_covers_everything():
    model = build_model(tiny_spec(), seed=0)
    enc = {n for n, _ in model.encoder_parameters()}
    dec = {n for n, _ in model.decoder_parameters()}
    all_names = {n for n, _ in model.net.named_parameters()}
    assert enc | dec == all_names
    assert not (enc & dec)
    assert any("posterior_heads" in n for n in enc)
    assert any("obs_logvar" in n for n in dec)


# ---------------------------------------------------------------------------
# checkpoint container

def test_checkpoint_round_trip_bit_exact(tmp_path):
    spec = tiny_spec()
    stats = NormalizationStats(dim=4, q_low=np.array([-1.0, -2.0, 0.0, -0.5]),
                               q_high=np.array([1.0, 2.0, 0.0, 1.5]))
    model = build_model(spec, seed=5, norm_stats=stats)
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(model, first, free_bits_lambda=0.1,
                    schedule={"epochs_completed": 3, "beta": 0.25})
    loaded, header = load_checkpoint(first)
    save_checkpoint(loaded, second, free_bits_lambda=header["free_bits_lambda"],
                    schedule=header["schedule"])
    assert first.read_bytes() == second.read_bytes()
    assert header["format"] == "hvae-checkpoint-v1"
    assert header["schedule"]["epochs_completed"] == 3
    assert loaded.spec == spec
    assert np.array_equal(loaded.norm_stats.q_low, stats.q_low)


def test_checkpoint_preserves_behaviour(tmp_path):
    spec = tiny_spec()
    model = build_model(spec, seed=6)
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    x = np.array([0.3, -0.3, 0.2, 0.1])
    a = encode(model, x)
    b = encode(loaded, x)
    for qa, qb in zip(a, b):
        # float32 storage rounds the parameters, so compare loosely
        assert torch.allclose(qa.mean, qb.mean, atol=1e-5)


def test_checkpoint_bad_magic_rejected(tmp_path):
    target = tmp_path / "x.ckpt"
    target.write_bytes(b"NOTACKPTxxxxxxx")
    with pytest.raises(Exception):
        load_checkpoint(target)
