"""Synthetic physics worlds and the residual oracle that scores trajectories.

Each world has an exact discrete law, so a trajectory produced by
:func:`simulate` has (numerically) zero residual and anything a model
generates can be scored against the same law.

State layout per frame is ``(px, py, vx, vy)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 4
MAX_EVENTS_PER_FRAME = 64


class Kind(enum.IntEnum):
    CONSTANT_VELOCITY = 0
    PROJECTILE = 1
    BOUNCING_BALL = 2
    SPRING = 3


KIND_NAMES = {
    Kind.CONSTANT_VELOCITY: "ConstantVelocity",
    Kind.PROJECTILE: "Projectile",
    Kind.BOUNCING_BALL: "BouncingBall",
    Kind.SPRING: "SpringOscillator",
}

PARAM_NAMES: dict[Kind, tuple[str, ...]] = {
    Kind.CONSTANT_VELOCITY: (),
    Kind.PROJECTILE: ("g",),
    Kind.BOUNCING_BALL: ("g", "restitution", "half_width", "floor"),
    Kind.SPRING: ("k", "damping"),
}

DEFAULT_RANGES: dict[Kind, tuple[tuple[float, float], ...]] = {
    Kind.CONSTANT_VELOCITY: (),
    Kind.PROJECTILE: ((0.5, 4.0),),
    Kind.BOUNCING_BALL: ((2.0, 6.0), (0.6, 0.95), (1.5, 1.5), (-1.0, -1.0)),
    Kind.SPRING: ((4.0, 36.0), (0.0, 0.25)),
}


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class WorldKind:
    """A world law plus the constants of one particular scene.

    Constants are rounded to float32 on construction so that a world read
    back from disk is identical to the one that generated the data.

    Valid ranges: g > 0, restitution in (0, 1], half_width > 0, k > 0,
    damping in [0, 1) (underdamped).
    """

    kind: Kind
    params: tuple[float, ...] = ()

    def __post_init__(self):
        kind = Kind(self.kind)
        params = tuple(_f32(p) for p in self.params)
        if len(params) != len(PARAM_NAMES[kind]):
            raise ValueError(
                f"{KIND_NAMES[kind]} expects params {PARAM_NAMES[kind]}, got {self.params!r}"
            )
        if not all(math.isfinite(p) for p in params):
            raise ValueError(f"non-finite world params {params!r}")
        p = dict(zip(PARAM_NAMES[kind], params))
        if "g" in p and p["g"] <= 0:
            raise ValueError("gravity must be positive")
        if "restitution" in p and not 0 < p["restitution"] <= 1:
            raise ValueError("restitution must lie in (0, 1]")
        if "half_width" in p and p["half_width"] <= 0:
            raise ValueError("half_width must be positive")
        if "k" in p and p["k"] <= 0:
            raise ValueError("spring constant must be positive")
        if "damping" in p and not 0 <= p["damping"] < 1:
            raise ValueError("damping must lie in [0, 1)")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", params)

    @property
    def name(self) -> str:
        return KIND_NAMES[self.kind]

    def param(self, name: str) -> float:
        return self.params[PARAM_NAMES[self.kind].index(name)]


@dataclass(frozen=True)
class WorldFamily:
    """A world kind with the range each scene constant is drawn from.

    A degenerate range ``(v, v)`` pins the constant (the box geometry of the
    bouncing ball, for instance).
    """

    kind: Kind
    ranges: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        kind = Kind(self.kind)
        ranges = tuple((_f32(lo), _f32(hi)) for lo, hi in self.ranges)
        if len(ranges) != len(PARAM_NAMES[kind]):
            raise ValueError(f"{KIND_NAMES[kind]} needs ranges for {PARAM_NAMES[kind]}")
        if any(lo > hi for lo, hi in ranges):
            raise ValueError("range lower bound exceeds upper bound")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "ranges", ranges)
        # validates both corners against the physical constraints
        WorldKind(kind, tuple(lo for lo, _ in ranges))
        WorldKind(kind, tuple(hi for _, hi in ranges))

    @classmethod
    def default(cls, kind: Kind) -> "WorldFamily":
        return cls(Kind(kind), DEFAULT_RANGES[Kind(kind)])

    @property
    def name(self) -> str:
        return KIND_NAMES[self.kind]

    def range(self, name: str) -> tuple[float, float]:
        return self.ranges[PARAM_NAMES[self.kind].index(name)]

    def midpoint(self) -> WorldKind:
        return WorldKind(self.kind, tuple(0.5 * (lo + hi) for lo, hi in self.ranges))

    def sample(self, rng: np.random.Generator) -> WorldKind:
        return WorldKind(self.kind, tuple(lo if lo == hi else rng.uniform(lo, hi) for lo, hi in self.ranges))

    def contains(self, world: WorldKind) -> bool:
        return world.kind == self.kind and all(lo <= p <= hi for p, (lo, hi) in zip(world.params, self.ranges))

    def to_dict(self) -> dict:
        return {
            "id": int(self.kind),
            "kind": self.name,
            "params": list(PARAM_NAMES[self.kind]),
            "ranges": [list(r) for r in self.ranges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldFamily":
        return cls(Kind(d["id"]), tuple(tuple(r) for r in d["ranges"]))


def default_families() -> dict[Kind, WorldFamily]:
    return {k: WorldFamily.default(k) for k in Kind}


@dataclass(frozen=True)
class Condition:
    world_onehot: np.ndarray
    initial_state: np.ndarray

    def __post_init__(self):
        onehot = np.asarray(self.world_onehot, dtype=np.float64)
        if onehot.shape != (len(Kind),) or np.count_nonzero(onehot) != 1 or onehot.sum() != 1:
            raise ValueError("world_onehot must be a one-hot vector over world kinds")
        init = np.asarray(self.initial_state, dtype=np.float64)
        if init.shape != (STATE_DIM,) or not np.all(np.isfinite(init)):
            raise ValueError("initial_state must be a finite state vector")
        object.__setattr__(self, "world_onehot", onehot)
        object.__setattr__(self, "initial_state", init)

    @property
    def kind(self) -> Kind:
        return Kind(int(np.argmax(self.world_onehot)))

    def encode(self) -> np.ndarray:
        return np.concatenate([self.world_onehot, self.initial_state])

    @classmethod
    def decode(cls, vec: np.ndarray) -> "Condition":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[: len(Kind)], vec[len(Kind):])


COND_DIM = len(Kind) + STATE_DIM


def encode_conditions(kinds: np.ndarray, initial_states: np.ndarray) -> np.ndarray:
    """Batch version of ``Condition.encode``: ``(N,)`` kinds, ``(N, D)`` states."""
    kinds = np.asarray(kinds, dtype=np.int64)
    out = np.zeros((len(kinds), COND_DIM))
    out[np.arange(len(kinds)), kinds] = 1.0
    out[:, len(Kind):] = initial_states
    return out


@dataclass(eq=False)
class Trajectory:
    world: WorldKind
    states: np.ndarray
    dt: float
    id: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 3:
            raise ValueError("a trajectory needs at least 3 frames")
        if self.states.shape[1] != STATE_DIM:
            raise ValueError(f"state dimension must be {STATE_DIM}, got {self.states.shape[1]}")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite values")

    @property
    def frames(self) -> int:
        return self.states.shape[0]

    def condition(self) -> Condition:
        onehot = np.zeros(len(Kind))
        onehot[self.world.kind] = 1.0
        return Condition(onehot, self.states[0])


def flatten(traj: Trajectory | np.ndarray) -> np.ndarray:
    """Frame-major latent of length F*D."""
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj)
    return states.reshape(-1).copy()


def unflatten(latent: np.ndarray, frames: int, dim: int = STATE_DIM) -> np.ndarray:
    latent = np.asarray(latent)
    if latent.ndim != 1 or latent.shape[0] != frames * dim:
        raise ValueError(f"latent of shape {latent.shape} cannot hold {frames}x{dim} states")
    return latent.reshape(frames, dim).copy()


# ---------------------------------------------------------------------------
# initial states

def initial_bounds(world: WorldKind) -> tuple[np.ndarray, np.ndarray]:
    """Box (lo, hi) that :func:`sample_initial` draws from."""
    k = world.kind
    if k == Kind.CONSTANT_VELOCITY or k == Kind.SPRING:
        return np.array([-1.0, -1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0, 1.0])
    if k == Kind.PROJECTILE:
        return np.array([-1.0, -0.5, -1.0, -0.5]), np.array([1.0, 1.0, 1.0, 1.5])
    hw, floor = world.param("half_width"), world.param("floor")
    return (
        np.array([-hw * 2 / 3, floor + 0.75, -1.5, -1.0]),
        np.array([hw * 2 / 3, floor + 2.0, 1.5, 1.0]),
    )


def sample_initial(world: WorldKind, rng: np.random.Generator) -> np.ndarray:
    lo, hi = initial_bounds(world)
    return rng.uniform(lo, hi)


# ---------------------------------------------------------------------------
# simulation

def _spring_axis(p0, v0, t, k, zeta):
    w = math.sqrt(k)
    wd = w * math.sqrt(1.0 - zeta * zeta)
    decay = np.exp(-zeta * w * t)
    c, s = np.cos(wd * t), np.sin(wd * t)
    b = (v0 + zeta * w * p0) / wd
    p = decay * (p0 * c + b * s)
    v = decay * ((b * wd - zeta * w * p0) * c - (p0 * wd + zeta * w * b) * s)
    return p, v


def _bounce_advance(state, dt, g, e, hw, floor):
    x, y, vx, vy = (float(v) for v in state)
    remaining = dt
    for _ in range(MAX_EVENTS_PER_FRAME):
        height = max(y - floor, 0.0)
        disc = vy * vy + 2.0 * g * height
        root = math.sqrt(disc)
        # time until the floor is reached, stable for either sign of vy
        if vy > 0:
            t_floor = (vy + root) / g
        elif root - vy > 0:
            t_floor = 2.0 * height / (root - vy)
        else:
            raise ValueError("bouncing ball came to rest on the floor")
        if vx > 0:
            t_wall = (hw - x) / vx
        elif vx < 0:
            t_wall = (-hw - x) / vx
        else:
            t_wall = math.inf
        t_event = min(t_floor, t_wall)
        if t_event >= remaining:
            x += vx * remaining
            y += vy * remaining - 0.5 * g * remaining * remaining
            vy -= g * remaining
            return np.array([x, y, vx, vy])
        x += vx * t_event
        remaining -= t_event
        if t_floor <= t_wall:
            y = floor
            vy = e * root
        else:
            y += vy * t_event - 0.5 * g * t_event * t_event
            vy -= g * t_event
        if t_wall <= t_floor:
            x = hw if vx > 0 else -hw
            vx = -e * vx
    raise ValueError("too many contact events within one frame")


def simulate(world: WorldKind, initial, frames: int, dt: float, id: int = 0) -> Trajectory:
    """Roll ``world`` forward from ``initial`` for ``frames`` frames.

    Closed-form for the smooth worlds; the bouncing ball is integrated
    event by event with exact flight arcs between contacts.
    """
    initial = np.asarray(initial, dtype=np.float64)
    if initial.shape != (STATE_DIM,):
        raise ValueError(f"initial state must have {STATE_DIM} entries")
    if not np.all(np.isfinite(initial)):
        raise ValueError("initial state must be finite")
    if frames < 3:
        raise ValueError("need at least 3 frames")
    if not (dt > 0 and math.isfinite(dt)):
        raise ValueError("dt must be positive and finite")

    t = np.arange(frames) * dt
    p0, v0 = initial[:2], initial[2:]
    states = np.empty((frames, STATE_DIM))
    k = world.kind
    if k == Kind.CONSTANT_VELOCITY:
        states[:, :2] = p0 + np.outer(t, v0)
        states[:, 2:] = v0
    elif k == Kind.PROJECTILE:
        a = np.array([0.0, -world.param("g")])
        states[:, :2] = p0 + np.outer(t, v0) + 0.5 * np.outer(t * t, a)
        states[:, 2:] = v0 + np.outer(t, a)
    elif k == Kind.SPRING:
        kk, zeta = world.param("k"), world.param("damping")
        for ax in range(2):
            states[:, ax], states[:, 2 + ax] = _spring_axis(p0[ax], v0[ax], t, kk, zeta)
    else:
        g, e = world.param("g"), world.param("restitution")
        hw, floor = world.param("half_width"), world.param("floor")
        if abs(initial[0]) > hw or initial[1] < floor:
            raise ValueError("initial position lies outside the box")
        states[0] = initial
        for f in range(1, frames):
            states[f] = _bounce_advance(states[f - 1], dt, g, e, hw, floor)
    return Trajectory(world, states, dt, id)


# ---------------------------------------------------------------------------
# residual oracle

def _spring_maps(k: np.ndarray, zeta: np.ndarray, dt: float) -> np.ndarray:
    """Per-scene one-frame maps of the damped oscillator, shape ``(N, 4, 4)``."""
    w = np.sqrt(k)
    wd = w * np.sqrt(1.0 - zeta * zeta)
    decay = np.exp(-zeta * w * dt)
    c, s = np.cos(wd * dt), np.sin(wd * dt)
    zw = zeta * w
    pp = decay * (c + zw / wd * s)
    pv = decay * s / wd
    vp = decay * (-(wd + zw * zw / wd) * s)
    vv = decay * (c - zw / wd * s)
    m = np.zeros((len(k), STATE_DIM, STATE_DIM))
    for ax in range(2):
        m[:, ax, ax], m[:, ax, 2 + ax] = pp, pv
        m[:, 2 + ax, ax], m[:, 2 + ax, 2 + ax] = vp, vv
    return m


def step_maps(kind: Kind, params: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact one-frame updates ``x[f+1] = M @ x[f] + b`` for ``N`` scenes.

    ``params`` has shape ``(N, n_params)``. For the bouncing ball the map is
    free flight between contacts.
    """
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    n = params.shape[0]
    if kind == Kind.SPRING:
        return _spring_maps(params[:, 0], params[:, 1], dt), np.zeros((n, STATE_DIM))
    m = np.broadcast_to(np.eye(STATE_DIM), (n, STATE_DIM, STATE_DIM)).copy()
    m[:, 0, 2] = m[:, 1, 3] = dt
    b = np.zeros((n, STATE_DIM))
    if kind in (Kind.PROJECTILE, Kind.BOUNCING_BALL):
        b[:, 1] = -0.5 * params[:, 0] * dt * dt
        b[:, 3] = -params[:, 0] * dt
    return m, b


def step_map(world: WorldKind, dt: float) -> tuple[np.ndarray, np.ndarray]:
    m, b = step_maps(world.kind, np.array([world.params]) if world.params else np.zeros((1, 0)), dt)
    return m[0], b[0]


def _contacts(states, g, e, floor):
    """Contact flags and restitution errors per transition for the bouncing ball."""
    y, vx, vy = states[..., 1], states[..., 2], states[..., 3]
    # in flight gravity only lowers vy and vx never changes sign
    floor_hit = vy[:, 1:] > vy[:, :-1]
    wall_hit = vx[:, 1:] * vx[:, :-1] < 0
    speed = np.sqrt(np.maximum(vy * vy + 2.0 * g[:, None] * (y - floor), 0.0))
    floor_pair = (speed[:, :-1], speed[:, 1:])
    wall_pair = (np.abs(vx[:, :-1]), np.abs(vx[:, 1:]))
    return floor_hit, wall_hit, floor_pair, wall_pair


def _clip_to(values, rng_):
    lo, hi = rng_
    return np.clip(values, lo, hi)


def identify(states: np.ndarray, family: WorldFamily, dt: float) -> np.ndarray:
    """Least-squares estimate of each scene's constants, clipped to the family ranges.

    Exact (up to rounding) on simulated trajectories; for anything else it
    returns the in-range constants that best explain the motion.
    """
    states = np.asarray(states, dtype=np.float64)
    n = states.shape[0]
    kind = family.kind
    if kind == Kind.CONSTANT_VELOCITY:
        return np.zeros((n, 0))
    if kind == Kind.SPRING:
        y, x1, x2 = states[:, 2:], states[:, 1:-1], states[:, :-2]
        s11 = np.einsum("nfd,nfd->n", x1, x1)
        s22 = np.einsum("nfd,nfd->n", x2, x2)
        s12 = np.einsum("nfd,nfd->n", x1, x2)
        t1 = np.einsum("nfd,nfd->n", y, x1)
        t2 = np.einsum("nfd,nfd->n", y, x2)
        # y = A x1 - B x2
        det = s11 * s22 - s12 * s12
        det = np.where(np.abs(det) > 1e-300, det, 1e-300)
        A = (t1 * s22 - t2 * s12) / det
        B = (t1 * s12 - t2 * s11) / det
        k_lo, k_hi = family.range("k")
        z_lo, z_hi = family.range("damping")
        b_min = math.exp(-2.0 * z_hi * math.sqrt(k_hi) * dt)
        B = np.clip(B, min(b_min, 1.0) * 0.5, 1.0)
        zw = -np.log(B) / (2.0 * dt)
        cosv = np.clip(A / (2.0 * np.sqrt(B)), -1.0, 1.0)
        wd = np.arccos(cosv) / dt
        w2 = wd * wd + zw * zw
        k = _clip_to(w2, (k_lo, k_hi))
        zeta = _clip_to(zw / np.sqrt(np.maximum(w2, 1e-300)), (z_lo, z_hi))
        return np.stack([k, zeta], axis=1)

    m, _ = step_maps(kind, np.ones((n, 1 if kind == Kind.PROJECTILE else 4)), dt)
    r0 = states[:, 1:] - np.einsum("nij,nfj->nfi", m, states[:, :-1])
    unit = np.array([0.0, -0.5 * dt * dt, 0.0, -dt])
    if kind == Kind.PROJECTILE:
        g = np.einsum("nfd,d->n", r0, unit) / ((states.shape[1] - 1) * unit @ unit)
        return _clip_to(g, family.range("g"))[:, None]

    # bouncing ball: gravity from free-flight transitions, restitution from contacts
    vy = states[..., 3]
    flight = ~(vy[:, 1:] > vy[:, :-1])
    num = np.einsum("nf,nf->n", flight, r0[..., 1] * unit[1] + r0[..., 3] * unit[3])
    cnt = flight.sum(axis=1)
    g_mid = 0.5 * sum(family.range("g"))
    g = np.where(cnt > 0, num / np.maximum(cnt, 1) / (unit @ unit), g_mid)
    g = _clip_to(g, family.range("g"))
    floor = family.range("floor")[0]
    floor_hit, wall_hit, (fb, fa), (wb, wa) = _contacts(states, g, None, floor)
    num = (floor_hit * fa * fb).sum(axis=1) + (wall_hit * wa * wb).sum(axis=1)
    den = (floor_hit * fb * fb).sum(axis=1) + (wall_hit * wb * wb).sum(axis=1)
    e_mid = 0.5 * sum(family.range("restitution"))
    e = np.where(den > 0, num / np.where(den > 0, den, 1.0), e_mid)
    e = _clip_to(e, family.range("restitution"))
    hw = np.full(n, family.range("half_width")[0])
    return np.stack([g, e, hw, np.full(n, floor)], axis=1)


def residuals(states: np.ndarray, world, dt: float) -> np.ndarray:
    """Physics residual of a batch ``(N, F, D)`` of trajectories of one kind.

    ``world`` is either a :class:`WorldKind` (known constants) or a
    :class:`WorldFamily`, in which case each trajectory's constants are first
    identified from its own motion.

    The residual is the mean over frame transitions of the squared violation
    of the world's exact one-frame update. Bouncing-ball transitions that
    contain a contact are scored on the contact axis by the restitution
    error of the contact instead (speeds at impact are recovered through
    energy conservation in flight).
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    if states.ndim != 3 or states.shape[2] != STATE_DIM:
        raise ValueError(f"{world.name} states must have dimension {STATE_DIM}")
    if states.shape[1] < 3:
        raise ValueError("need at least 3 frames")
    n = states.shape[0]
    if isinstance(world, WorldFamily):
        params = identify(states, world, dt)
    else:
        params = np.broadcast_to(np.asarray(world.params, dtype=np.float64), (n, len(world.params)))
    m, b = step_maps(world.kind, params, dt)
    r = states[:, 1:] - np.einsum("nij,nfj->nfi", m, states[:, :-1]) - b[:, None, :]
    sq = r * r
    if world.kind != Kind.BOUNCING_BALL:
        return sq.sum(axis=2).mean(axis=1)

    g, e, floor = params[:, 0], params[:, 1], params[0, 3]
    floor_hit, wall_hit, (fb, fa), (wb, wa) = _contacts(states, g, e, floor)
    floor_err = (fa - e[:, None] * fb) ** 2
    wall_err = (wa - e[:, None] * wb) ** 2
    score = np.where(wall_hit, wall_err, sq[..., 0] + sq[..., 2])
    score = score + np.where(floor_hit, floor_err, sq[..., 1] + sq[..., 3])
    return score.mean(axis=1)


def physics_residual(traj: Trajectory, world=None) -> float:
    """Residual of one trajectory under ``world`` (defaults to its own scene)."""
    world = traj.world if world is None else world
    if world.kind != traj.world.kind and isinstance(world, WorldKind):
        raise ValueError(f"trajectory of {traj.world.name} scored as {world.name}")
    return float(residuals(traj.states, world, traj.dt)[0])


# ---------------------------------------------------------------------------
# datasets

DATASET_MAGIC = b"RDPODS1\n"
DATASET_SCHEMA = 1


@dataclass
class DatasetConfig:
    counts: dict = field(default_factory=lambda: {k: 1000 for k in Kind})
    frames: int = 16
    dt: float = 0.0625
    seed: int = 0
    heldout_fraction: float = 0.1
    families: dict = field(default_factory=default_families)


@dataclass(eq=False)
class Dataset:
    """Trajectories ordered by id; ids ``< n_train`` form the train split."""

    trajectories: list
    n_train: int
    frames: int
    dt: float
    seed: int
    families: dict

    @property
    def train(self) -> list:
        return self.trajectories[: self.n_train]

    @property
    def heldout(self) -> list:
        return self.trajectories[self.n_train:]

    def latents(self, trajs=None) -> np.ndarray:
        trajs = self.trajectories if trajs is None else trajs
        return np.stack([t.states.reshape(-1) for t in trajs])

    def conditions(self, trajs=None) -> np.ndarray:
        trajs = self.trajectories if trajs is None else trajs
        return encode_conditions([t.world.kind for t in trajs], np.stack([t.states[0] for t in trajs]))

    def kinds(self, trajs=None) -> np.ndarray:
        trajs = self.trajectories if trajs is None else trajs
        return np.array([int(t.world.kind) for t in trajs], dtype=np.int64)

    def header(self) -> dict:
        counts = {KIND_NAMES[k]: 0 for k in Kind}
        for t in self.trajectories:
            counts[t.world.name] += 1
        return {
            "schema": DATASET_SCHEMA,
            "count": len(self.trajectories),
            "counts": counts,
            "n_train": self.n_train,
            "n_heldout": len(self.trajectories) - self.n_train,
            "frames": self.frames,
            "dim": STATE_DIM,
            "dt": self.dt,
            "seed": self.seed,
            "worlds": families_to_list(self.families),
        }

    def to_bytes(self) -> bytes:
        from .formats import dump_header, f32_bytes

        out = [DATASET_MAGIC, dump_header(self.header())]
        for t in self.trajectories:
            out.append(int(t.id).to_bytes(4, "little"))
            out.append(int(t.world.kind).to_bytes(1, "little"))
            out.append(f32_bytes(t.world.params))
            out.append(f32_bytes(t.states.reshape(-1)))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        from .formats import FormatError, Reader, read_container

        header, payload = read_container(data, DATASET_MAGIC)
        if header.get("schema") != DATASET_SCHEMA:
            raise FormatError(f"unsupported dataset schema {header.get('schema')!r}")
        families = families_from_list(header["worlds"])
        frames, dim, dt = header["frames"], header["dim"], header["dt"]
        r = Reader(payload)
        trajs = []
        for _ in range(header["count"]):
            tid = r.uint(4)
            kind = Kind(r.uint(1))
            world = WorldKind(kind, tuple(r.floats(len(PARAM_NAMES[kind]))))
            if not families[kind].contains(world):
                raise FormatError(f"record {tid} has constants outside the world table")
            states = r.floats(frames * dim).reshape(frames, dim)
            trajs.append(Trajectory(world, states, dt, tid))
        r.done()
        return cls(trajs, header["n_train"], frames, dt, header["seed"], families)

    def save(self, path) -> str:
        from .formats import sha256_bytes, write_atomic

        data = self.to_bytes()
        write_atomic(path, data)
        return sha256_bytes(data)

    @classmethod
    def load(cls, path) -> "Dataset":
        from pathlib import Path

        return cls.from_bytes(Path(path).read_bytes())


def families_to_list(families: dict) -> list:
    return [families[k].to_dict() for k in sorted(families)]


def families_from_list(items: list) -> dict:
    return {Kind(d["id"]): WorldFamily.from_dict(d) for d in items}


def make_dataset(cfg: DatasetConfig, path=None) -> Dataset:
    """Simulate, split and (optionally) persist a dataset.

    Each trajectory gets its own scene constants drawn from its family.
    States are rounded to float32 before splitting so that the in-memory
    dataset equals what a reader of the file gets back.
    """
    from . import rng as rngs
    from .formats import to_f32

    counts = {Kind(k): int(n) for k, n in cfg.counts.items()}
    if sum(counts.values()) <= 0 or any(n < 0 for n in counts.values()):
        raise ValueError("dataset counts must be non-negative with a positive total")
    if not 0 <= cfg.heldout_fraction < 1:
        raise ValueError("heldout_fraction must lie in [0, 1)")

    made = []
    for kind in sorted(counts):
        family = cfg.families[kind]
        for i in range(counts[kind]):
            g = rngs.stream(cfg.seed, rngs.DATA, int(kind), i)
            world = family.sample(g)
            traj = simulate(world, sample_initial(world, g), cfg.frames, cfg.dt)
            made.append((world, to_f32(traj.states)))
    order = rngs.stream(cfg.seed, rngs.DATA, 0xFFFF).permutation(len(made))
    trajs = [Trajectory(made[j][0], made[j][1], cfg.dt, new_id) for new_id, j in enumerate(order)]
    n_heldout = int(round(len(trajs) * cfg.heldout_fraction))
    ds = Dataset(trajs, len(trajs) - n_heldout, cfg.frames, cfg.dt, cfg.seed, dict(cfg.families))
    if path is not None:
        ds.save(path)
    return ds
