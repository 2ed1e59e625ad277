import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdpo import rng as rngs
from rdpo.dynamics import (
    Dataset,
    DatasetConfig,
    Kind,
    Trajectory,
    WorldFamily,
    WorldKind,
    default_families,
    flatten,
    identify,
    initial_bounds,
    make_dataset,
    physics_residual,
    residuals,
    sample_initial,
    simulate,
    step_map,
    unflatten,
)
from rdpo.formats import FormatError

FAMILIES = default_families()


def test_constant_velocity_example():
    tr = simulate(WorldKind(Kind.CONSTANT_VELOCITY), [0, 0, 1, 2], 4, 1.0)
    np.testing.assert_array_equal(tr.states[:, :2], [[0, 0], [1, 2], [2, 4], [3, 6]])


def test_projectile_example():
    tr = simulate(WorldKind(Kind.PROJECTILE, (1.0,)), [0, 0, 0, 0], 4, 1.0)
    np.testing.assert_array_equal(tr.states[:, 1], [0, -0.5, -2, -4.5])
    assert physics_residual(tr) == 0.0


def _brute_bounce(initial, g, e, hw, floor, duration, dt):
    """Tiny-step integration with contact reflection at each sub-step."""
    x, y, vx, vy = initial
    n = int(round(duration / dt))
    for _ in range(n):
        vy -= g * dt
        x += vx * dt
        y += vy * dt
        if y < floor:
            y = floor + (floor - y)
            vy = -e * vy
        if abs(x) > hw:
            x = math.copysign(hw, x) * 2 - x
            vx = -e * vx
    return np.array([x, y, vx, vy])


def test_bouncing_ball_elastic_drop_keeps_speed():
    world = WorldKind(Kind.BOUNCING_BALL, (4.0, 1.0, 1.5, -1.0))
    tr = simulate(world, [0.0, 0.5, 0.0, 0.0], 16, 0.0625)
    # energy per unit mass is conserved through the bounce
    energy = 0.5 * tr.states[:, 3] ** 2 + 4.0 * (tr.states[:, 1] + 1.0)
    assert np.ptp(energy) < 1e-9
    assert np.any(np.diff(tr.states[:, 3]) > 0), "the drop must include a bounce"


def test_bouncing_ball_matches_brute_force():
    world = WorldKind(Kind.BOUNCING_BALL, (4.0, 1.0, 1.5, -1.0))
    initial = np.array([1.0, 0.5, 1.3, 0.2])
    dt = 0.0625
    tr = simulate(world, initial, 16, dt)
    brute = _brute_bounce(initial, 4.0, 1.0, 1.5, -1.0, 15 * dt, dt / 1000)
    np.testing.assert_allclose(tr.states[-1], brute, atol=5e-3)
    # elastic: pre and post contact speeds equal
    speed = np.hypot(tr.states[:, 2], tr.states[:, 3]) ** 2 + 8.0 * (tr.states[:, 1] + 1.0)
    assert np.ptp(speed) < 1e-9


def test_sample_initial_determinism_and_shape():
    for k in Kind:
        w = FAMILIES[k].midpoint()
        a = sample_initial(w, rngs.stream(5, 1))
        b = sample_initial(w, rngs.stream(5, 1))
        assert a.shape == (4,)
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", list(Kind))
def test_sample_initial_within_bounds(kind):
    w = FAMILIES[kind].midpoint()
    lo, hi = initial_bounds(w)
    g = rngs.stream(11, kind)
    draws = np.stack([sample_initial(w, g) for _ in range(10_000)])
    assert np.all(draws >= lo) and np.all(draws <= hi)


@pytest.mark.parametrize("kind", list(Kind))
def test_simulated_data_has_zero_residual(kind, small_dataset):
    trajs = [t for t in small_dataset.trajectories if t.world.kind == kind]
    states = np.stack([t.states for t in trajs])
    assert max(physics_residual(t) for t in trajs) <= 1e-9
    assert residuals(states, FAMILIES[kind], small_dataset.dt).max() <= 1e-9


def test_identify_recovers_constants(small_dataset):
    for kind in (Kind.PROJECTILE, Kind.SPRING):
        trajs = [t for t in small_dataset.trajectories if t.world.kind == kind]
        est = identify(np.stack([t.states for t in trajs]), FAMILIES[kind], small_dataset.dt)
        true = np.array([t.world.params for t in trajs])
        np.testing.assert_allclose(est, true, rtol=1e-4, atol=1e-5)


def test_wrong_constants_are_penalised(small_dataset):
    tr = next(t for t in small_dataset.trajectories if t.world.kind == Kind.PROJECTILE)
    g = tr.world.param("g")
    wrong = WorldKind(Kind.PROJECTILE, (g + 1.0,))
    assert physics_residual(tr, wrong) > 1e-3


def test_perturbation_residual_matches_expectation():
    """i.i.d. position noise of variance s2 gives expected residual 4 * s2 per transition."""
    world = WorldKind(Kind.PROJECTILE, (2.0,))
    tr = simulate(world, [0.1, 0.2, 0.5, 1.0], 16, 0.0625)
    s2 = 1e-4
    g = np.random.default_rng(0)
    n = 10_000
    noisy = np.repeat(tr.states[None], n, axis=0)
    noisy[:, :, :2] += g.normal(0.0, math.sqrt(s2), (n, 16, 2))
    measured = residuals(noisy, world, tr.dt).mean()
    assert abs(measured - 4 * s2) / (4 * s2) < 0.05


def test_residual_grows_with_noise():
    world = WorldKind(Kind.SPRING, (9.0, 0.1))
    tr = simulate(world, [0.5, -0.3, 0.2, 0.1], 16, 0.0625)
    g = np.random.default_rng(1)
    vals = [residuals(tr.states + s * g.standard_normal(tr.states.shape), world, tr.dt)[0]
            for s in (1e-3, 1e-2, 1e-1)]
    assert vals[0] < vals[1] < vals[2]


def test_step_map_matches_simulation():
    for kind in (Kind.CONSTANT_VELOCITY, Kind.PROJECTILE, Kind.SPRING):
        w = FAMILIES[kind].midpoint()
        tr = simulate(w, sample_initial(w, rngs.stream(2, kind)), 8, 0.0625)
        m, b = step_map(w, 0.0625)
        np.testing.assert_allclose(tr.states[1:], tr.states[:-1] @ m.T + b, atol=1e-12)


@given(st.integers(3, 20), st.integers(1, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_flatten_roundtrip(frames, dim, seed):
    states = np.random.default_rng(seed).standard_normal((frames, dim))
    flat = flatten(states)
    assert flat.shape == (frames * dim,)
    np.testing.assert_array_equal(unflatten(flat, frames, dim), states)


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ValueError):
        unflatten(np.zeros(10), 3, 4)


@pytest.mark.parametrize("params", [(0.0,), (-1.0,), (float("nan"),)])
def test_world_rejects_bad_gravity(params):
    with pytest.raises(ValueError):
        WorldKind(Kind.PROJECTILE, params)


def test_world_rejects_bad_ranges():
    with pytest.raises(ValueError):
        WorldKind(Kind.BOUNCING_BALL, (1.0, 1.5, 1.0, -1.0))
    with pytest.raises(ValueError):
        WorldKind(Kind.SPRING, (-1.0, 0.1))
    with pytest.raises(ValueError):
        WorldFamily(Kind.SPRING, ((4.0, 1.0), (0.0, 0.1)))


def test_simulate_errors():
    w = WorldKind(Kind.CONSTANT_VELOCITY)
    with pytest.raises(ValueError):
        simulate(w, [0, 0, 1, 1], 2, 0.1)
    with pytest.raises(ValueError):
        simulate(w, [0, float("inf"), 1, 1], 5, 0.1)
    with pytest.raises(ValueError):
        simulate(FAMILIES[Kind.BOUNCING_BALL].midpoint(), [0, -3, 0, 0], 5, 0.1)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(WorldKind(Kind.CONSTANT_VELOCITY), np.zeros((2, 4)), 0.1)
    with pytest.raises(ValueError):
        Trajectory(WorldKind(Kind.CONSTANT_VELOCITY), np.full((4, 4), np.nan), 0.1)


def test_split_arithmetic():
    ds = make_dataset(DatasetConfig(counts={Kind.PROJECTILE: 100}, heldout_fraction=0.1))
    assert len(ds.train) == 90 and len(ds.heldout) == 10
    assert not {t.id for t in ds.train} & {t.id for t in ds.heldout}


def test_dataset_bytes_deterministic_and_roundtrip(tmp_path):
    cfg = DatasetConfig(counts={k: 20 for k in Kind}, seed=9)
    h1 = make_dataset(cfg, tmp_path / "a.bin").save(tmp_path / "a.bin")
    h2 = make_dataset(cfg).save(tmp_path / "b.bin")
    assert h1 == h2
    ds = Dataset.load(tmp_path / "a.bin")
    again = make_dataset(cfg)
    for a, b in zip(ds.trajectories, again.trajectories):
        assert a.id == b.id and a.world == b.world
        np.testing.assert_array_equal(a.states, b.states)
    assert ds.to_bytes() == again.to_bytes()


def test_dataset_rejects_corruption(tmp_path):
    data = make_dataset(DatasetConfig(counts={Kind.PROJECTILE: 3})).to_bytes()
    with pytest.raises(FormatError):
        Dataset.from_bytes(b"XXXXXXX\n" + data[8:])
    with pytest.raises(FormatError):
        Dataset.from_bytes(data[:-3])
    with pytest.raises(FormatError):
        Dataset.from_bytes(data + b"\0")


def test_dataset_rejects_zero_counts():
    with pytest.raises(ValueError):
        make_dataset(DatasetConfig(counts={k: 0 for k in Kind}))


def test_residual_ignores_id_and_grows_with_noise_in_expectation():
    world = FAMILIES[Kind.SPRING].midpoint()
    tr = simulate(world, [0.3, -0.2, 0.1, 0.4], 16, 0.0625, id=4)
    relabeled = Trajectory(tr.world, tr.states, tr.dt, id=99)
    assert physics_residual(tr) == physics_residual(relabeled)
    g = np.random.default_rng(7)
    noise = g.standard_normal((1000, 16, 4))
    lo = residuals(tr.states + 1e-3 * noise, world, tr.dt).mean()
    hi = residuals(tr.states + 3e-3 * noise, world, tr.dt).mean()
    assert lo < hi
