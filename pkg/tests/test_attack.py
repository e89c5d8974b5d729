import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pcattack.attack import (
    AttackConfig,
    AttackError,
    AttackFailure,
    attack_batch,
    clip_valid,
    pca_attack,
    project_linf,
)
from pcattack.defenses import DefenseSpec
from pcattack.images import make_shapes
from pcattack.vae import build_vae


ULP = np.spacing(0.5)


def identity_encoder(x):
    """Closed-form toy: mu = x, log sigma^2 = 0."""
    return x, torch.zeros_like(x)


def const(value, shape=(4, 4, 3)):
    return np.full(shape, value, dtype=np.float64)


@pytest.fixture(scope="module")
def untrained():
    return build_vae(seed=0)


class TestProjection:
    def test_examples(self):
        d = np.array([-0.2, -0.05, 0.0, 0.03, 0.5])
        np.testing.assert_array_equal(project_linf(d, 0.1), [-0.1, -0.05, 0.0, 0.03, 0.1])

    def test_budget_example(self):
        np.testing.assert_array_equal(project_linf(np.array([0.1, -0.02]), 16 / 255), [16 / 255, -0.02])
        np.testing.assert_array_equal(project_linf(np.zeros(3), 16 / 255), np.zeros(3))

    def test_zero_budget(self):
        np.testing.assert_array_equal(project_linf(np.array([0.3, -0.3]), 0.0), [0.0, 0.0])

    def test_negative_budget(self):
        with pytest.raises(ValueError):
            project_linf(np.zeros(3), -0.1)

    def test_tensor(self):
        t = torch.tensor([2.0, -2.0, 0.01])
        assert torch.equal(project_linf(t, 0.5), torch.tensor([0.5, -0.5, 0.01]))

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(0, 2))
    def test_idempotent_and_bounded(self, values, eps):
        d = np.array(values)
        once = project_linf(d, eps)
        assert np.all(np.abs(once) <= eps)
        np.testing.assert_array_equal(project_linf(once, eps), once)

    def test_clip(self):
        np.testing.assert_array_equal(clip_valid(np.array([-0.3, 0.4, 1.2])), [0.0, 0.4, 1.0])
        np.testing.assert_array_equal(clip_valid(torch.tensor([-0.3, 1.2])), torch.tensor([0.0, 1.0]))


class TestConfig:
    def test_defaults(self):
        c = AttackConfig()
        assert c.epsilon == 16 / 255 and c.alpha == 2 / 255 and c.steps == 40
        assert c.variance_target == 1e-8 and c.sign == -1.0
        m = AttackConfig(direction="maximize")
        assert m.variance_target == 1.0 and m.sign == 1.0

    def test_units(self):
        c = AttackConfig.from_units(epsilon=8, alpha=1)
        assert c.epsilon == 8 / 255 and c.alpha == 1 / 255

    @pytest.mark.parametrize(
        "kw",
        [
            {"epsilon": -1.0},
            {"steps": -1},
            {"alpha": 0.0},
            {"direction": "sideways"},
            {"criterion": "hinge"},
            {"variance_target": 0.0},
            {"in_loop_transform": DefenseSpec("jpeg")},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttackConfig(**kw)

    def test_round_trip(self):
        c = AttackConfig(steps=7, in_loop_transform=DefenseSpec("gaussian_blur"), criterion="mse")
        assert AttackConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            AttackConfig.from_dict({"epsilon": 0.1, "gamma": 3})


class TestAnalyticTrace:
    """mu = x, x0 = 0.5, four steps of 2/255 against a 16/255 budget.

    Equality is to one float64 ulp: the re-projection ``x0 + (x - x0)`` may round.
    """

    def test_minimize(self):
        r = pca_attack(const(0.5), identity_encoder, AttackConfig(steps=4))
        np.testing.assert_allclose(r.adversarial, const(0.5 - 8 / 255), rtol=0, atol=ULP)

    def test_maximize(self):
        r = pca_attack(const(0.5), identity_encoder, AttackConfig(steps=4, direction="maximize"))
        np.testing.assert_allclose(r.adversarial, const(0.5 + 8 / 255), rtol=0, atol=ULP)

    def test_trace_values(self):
        # reverse KL of N(x, 1) against N(0, 1) is x^2 / 2 per coordinate
        r = pca_attack(const(0.5), identity_encoder, AttackConfig(steps=4, direction="maximize"))
        expected = [48 * (0.5 + k * 2 / 255) ** 2 / 2 for k in range(5)]
        np.testing.assert_allclose(r.loss_trace, expected, rtol=1e-12)

    @pytest.mark.parametrize("direction", ["minimize", "maximize"])
    def test_strictly_monotone_while_unprojected(self, direction):
        # eight steps of 2/255 reach the 16/255 boundary, so the first eight are free
        r = pca_attack(const(0.5), identity_encoder, AttackConfig(steps=8, direction=direction))
        diffs = np.diff(r.loss_trace)
        assert np.all(diffs < 0) if direction == "minimize" else np.all(diffs > 0)

    def test_scalar_pixel(self):
        r = pca_attack(np.full((1, 1, 1), 0.5), identity_encoder, AttackConfig(steps=4, variance_target=1.0))
        assert abs(r.adversarial.item() - (0.5 - 8 / 255)) <= ULP

    def test_budget_binds(self):
        r = pca_attack(const(0.5), identity_encoder, AttackConfig(steps=40))
        np.testing.assert_allclose(r.adversarial, const(0.5 - 16 / 255), atol=1e-15)
        assert r.linf <= 16 / 255 + 1e-12

    def test_range_clip_binds(self):
        r = pca_attack(const(0.01), identity_encoder, AttackConfig(steps=10))
        np.testing.assert_array_equal(r.adversarial, const(0.0))


class TestEdgeCases:
    def test_zero_steps(self, untrained, rng):
        img = rng.random((32, 32, 3))
        r = pca_attack(img, untrained.encoder, AttackConfig(steps=0))
        np.testing.assert_array_equal(r.adversarial, img)
        assert len(r.loss_trace) == 1 and r.linf == 0.0

    def test_zero_budget(self, untrained, rng):
        img = rng.random((32, 32, 3))
        r = pca_attack(img, untrained.encoder, AttackConfig(epsilon=0.0, steps=5))
        np.testing.assert_array_equal(r.adversarial, img)

    def test_nan_aborts_with_step(self):
        calls = {"n": 0}

        def flaky(x):
            calls["n"] += 1
            mean = x * (np.nan if calls["n"] == 3 else 1.0)
            return mean, torch.zeros_like(x)

        with pytest.raises(AttackError) as info:
            pca_attack(const(0.5), flaky, AttackConfig(steps=5))
        assert info.value.step == 2

    def test_bad_shape(self, untrained):
        with pytest.raises(ValueError):
            pca_attack(np.zeros((30, 30, 3)), untrained.encoder)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            pca_attack(const(1.5), identity_encoder)


class TestInvariants:
    @settings(max_examples=15, deadline=None)
    @given(
        st.integers(0, 2**31 - 1),
        st.integers(0, 16),
        st.integers(1, 4),
        st.integers(0, 6),
        st.sampled_from(["minimize", "maximize"]),
    )
    def test_ball_and_range(self, seed, eps, alpha, steps, direction):
        img = np.random.default_rng(seed).random((8, 8, 3))
        encoder = lambda x: (torch.sin(7 * x) * x, -x)  # noqa: E731
        r = pca_attack(img, encoder, AttackConfig.from_units(eps, alpha, steps=steps, direction=direction))
        assert r.linf <= eps / 255 + 1e-12
        assert r.adversarial.min() >= 0.0 and r.adversarial.max() <= 1.0
        np.testing.assert_allclose(r.adversarial - img, r.delta, atol=1e-15)
        assert len(r.loss_trace) == steps + 1

    def test_minimize_lowers_loss(self, untrained, rng):
        img = rng.random((32, 32, 3))
        r = pca_attack(img, untrained.encoder, AttackConfig(steps=10))
        assert r.loss_trace[-1] < r.loss_trace[0]

    def test_maximize_raises_loss(self, untrained, rng):
        img = rng.random((32, 32, 3))
        r = pca_attack(img, untrained.encoder, AttackConfig(steps=10, direction="maximize"))
        assert r.loss_trace[-1] > r.loss_trace[0]

    def test_deterministic(self, untrained, rng):
        img = rng.random((32, 32, 3))
        a = pca_attack(img, untrained.encoder, AttackConfig(steps=5))
        b = pca_attack(img, untrained.encoder, AttackConfig(steps=5))
        np.testing.assert_array_equal(a.delta, b.delta)

    def test_in_loop_transform_changes_result(self, untrained, rng):
        img = rng.random((32, 32, 3))
        plain = pca_attack(img, untrained.encoder, AttackConfig(steps=3))
        adaptive = pca_attack(img, untrained.encoder, AttackConfig(steps=3, in_loop_transform=DefenseSpec("gaussian_blur")))
        identity = pca_attack(img, untrained.encoder, AttackConfig(steps=3, in_loop_transform=DefenseSpec("identity")))
        assert not np.array_equal(plain.adversarial, adaptive.adversarial)
        np.testing.assert_array_equal(plain.adversarial, identity.adversarial)


class TestBatch:
    def test_matches_single(self, untrained, rng):
        imgs = rng.random((3, 32, 32, 3))
        cfg = AttackConfig(steps=3)
        batch = attack_batch(imgs, untrained.encoder, cfg)
        for img, r in zip(imgs, batch):
            np.testing.assert_array_equal(r.adversarial, pca_attack(img, untrained.encoder, cfg).adversarial)

    def test_batch_of_one(self, untrained, rng):
        img = rng.random((32, 32, 3))
        cfg = AttackConfig(steps=3)
        (only,) = attack_batch([img], untrained.encoder, cfg)
        np.testing.assert_array_equal(only.adversarial, pca_attack(img, untrained.encoder, cfg).adversarial)
        assert only.loss_trace == pca_attack(img, untrained.encoder, cfg).loss_trace

    def test_sweep_64px(self):
        vae = build_vae(image_size=64, seed=1)
        imgs = make_shapes(100, 64, 4)
        eps = 16 / 255
        for x, r in zip(imgs, attack_batch(imgs, vae.encoder, AttackConfig())):
            assert not isinstance(r, AttackFailure)
            assert np.abs(r.adversarial - x).max() <= eps + 1e-6
            assert r.adversarial.min() >= 0 and r.adversarial.max() <= 1

    def test_per_image_seed(self, untrained, rng):
        out = attack_batch(rng.random((3, 32, 32, 3)), untrained.encoder, AttackConfig(steps=1, seed=10))
        assert [r.config.seed for r in out] == [10, 11, 12]

    def test_permutation(self, untrained, rng):
        imgs = rng.random((3, 32, 32, 3))
        cfg = AttackConfig(steps=2)
        fwd = attack_batch(imgs, untrained.encoder, cfg)
        rev = attack_batch(imgs[::-1], untrained.encoder, cfg)
        for a, b in zip(fwd, rev[::-1]):
            np.testing.assert_array_equal(a.adversarial, b.adversarial)

    def test_failure_recorded(self):
        def bright_breaks(x):
            scale = np.inf if float(x.detach().mean()) > 0.8 else 1.0
            return x * scale, torch.zeros_like(x)

        out = attack_batch([const(0.5), const(0.9)], bright_breaks, AttackConfig(steps=2))
        assert not isinstance(out[0], AttackFailure)
        assert isinstance(out[1], AttackFailure) and out[1].index == 1 and out[1].step == 0

    def test_mixed_shapes(self, untrained):
        with pytest.raises(ValueError):
            attack_batch([np.zeros((32, 32, 3)), np.zeros((16, 16, 3))], untrained.encoder)

    def test_empty(self, untrained):
        assert attack_batch([], untrained.encoder) == []
