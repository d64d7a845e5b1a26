"""Benchmark dynamics, the learned control-affine surrogate, and dataset generation.

Dataset CSV schema: header x0..x{n_x-1}, u0..u{n_u-1}, dx0..dx{n_x-1}, one
sample per row, labels evaluated on the true dynamics (noiseless).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ConfigError, InvalidInputError
from .nets import Mlp, forward, input_jacobian, mlp_from_dict, mlp_to_dict

GRAVITY = 9.81
QUAD_MASS = 0.486
QUAD_ARM = 0.25
QUAD_INERTIA = 0.125


@dataclass(frozen=True)
class SystemSpec:
    """A benchmark system: true dynamics plus sampling boxes and collision geometry."""

    name: str
    n_x: int
    n_u: int
    state_box: np.ndarray  # (n_x, 2) low/high
    control_box: np.ndarray  # (n_u, 2)
    position_indices: Tuple[int, ...]
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)

    def __post_init__(self):
        sb = np.asarray(self.state_box, dtype=float)
        cb = np.asarray(self.control_box, dtype=float)
        if sb.shape != (self.n_x, 2) or cb.shape != (self.n_u, 2):
            raise InvalidInputError("state/control boxes have wrong shape")
        if np.any(sb[:, 1] < sb[:, 0]) or np.any(cb[:, 1] < cb[:, 0]):
            raise InvalidInputError("boxes must have low <= high")
        for i in self.position_indices:
            if not 0 <= i < self.n_x:
                raise InvalidInputError("position index out of range")
        object.__setattr__(self, "state_box", sb)
        object.__setattr__(self, "control_box", cb)


def _car_dynamics(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    theta, v = x[..., 2], x[..., 3]
    return np.stack(
        [v * np.cos(theta), v * np.sin(theta), u[..., 0], u[..., 1]], axis=-1
    )


def _quadrotor_dynamics(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    phi, vx, vz, phidot = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
    thrust = (u[..., 0] + u[..., 1]) / QUAD_MASS
    torque = (u[..., 0] - u[..., 1]) * QUAD_ARM / QUAD_INERTIA
    return np.stack(
        [
            vx * np.cos(phi) - vz * np.sin(phi),
            vx * np.sin(phi) + vz * np.cos(phi),
            phidot,
            vz * phidot - GRAVITY * np.sin(phi),
            -vx * phidot - GRAVITY * np.cos(phi) + thrust,
            torque,
        ],
        axis=-1,
    )


LINEAR4D_A = np.array(
    [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
)
LINEAR4D_B = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def _linear4d_dynamics(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return x @ LINEAR4D_A.T + u @ LINEAR4D_B.T


_HOVER = QUAD_MASS * GRAVITY / 2.0

_SYSTEMS = {
    "car": SystemSpec(
        name="car",
        n_x=4,
        n_u=2,
        state_box=np.array([[0.0, 5.0], [-5.0, 5.0], [-1.0, 1.0], [0.3, 1.0]]),
        control_box=np.array([[-1.0, 1.0], [-1.0, 1.0]]),
        position_indices=(0, 1),
        dynamics=_car_dynamics,
    ),
    "planar_quadrotor": SystemSpec(
        name="planar_quadrotor",
        n_x=6,
        n_u=2,
        state_box=np.array(
            [
                [-2.0, 2.0],
                [-2.0, 2.0],
                [-np.pi / 3, np.pi / 3],
                [-1.0, 1.0],
                [-1.0, 1.0],
                [-np.pi / 4, np.pi / 4],
            ]
        ),
        control_box=np.array([[0.0, 2.0 * _HOVER], [0.0, 2.0 * _HOVER]]),
        position_indices=(0, 1),
        dynamics=_quadrotor_dynamics,
    ),
    "linear4d": SystemSpec(
        name="linear4d",
        n_x=4,
        n_u=2,
        state_box=np.array([[-2.0, 2.0], [-2.0, 2.0], [-1.0, 1.0], [-1.0, 1.0]]),
        control_box=np.array([[-2.0, 2.0], [-2.0, 2.0]]),
        position_indices=(0, 1),
        dynamics=_linear4d_dynamics,
    ),
}


def get_system(name: str) -> SystemSpec:
    try:
        return _SYSTEMS[name]
    except KeyError:
        raise ConfigError(f"unknown system '{name}' (known: {sorted(_SYSTEMS)})") from None


def eval_true(sys: SystemSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """True state derivative h(x, u); broadcasts over leading batch dims."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != sys.n_x or u.shape[-1] != sys.n_u:
        raise InvalidInputError("state/control dimension mismatch")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise InvalidInputError("non-finite state or control")
    return sys.dynamics(x, u)


# -- learned control-affine model --------------------------------------------------


@dataclass
class ControlAffineModel:
    """g(x, u) = f(x) + B(x) u with neural f and B.

    With sparse_b the actuation matrix is [0; B_theta(x)]: the top
    (n_x - n_u) x n_u block is identically zero and b_net outputs only the
    bottom n_u x n_u block.
    """

    f_net: Mlp
    b_net: Mlp
    n_x: int
    n_u: int
    sparse_b: bool = True

    def __post_init__(self):
        if self.f_net.in_dim != self.n_x or self.f_net.out_dim != self.n_x:
            raise InvalidInputError("f_net must map n_x -> n_x")
        rows = self.n_u if self.sparse_b else self.n_x
        if self.b_net.in_dim != self.n_x or self.b_net.out_dim != rows * self.n_u:
            raise InvalidInputError("b_net output width inconsistent with sparse flag")

    def b_matrix(self, x: np.ndarray) -> np.ndarray:
        """B(x), shape (..., n_x, n_u)."""
        x = np.asarray(x, dtype=float)
        raw = forward(self.b_net, x)
        if self.sparse_b:
            bottom = raw.reshape(x.shape[:-1] + (self.n_u, self.n_u))
            top = np.zeros(x.shape[:-1] + (self.n_x - self.n_u, self.n_u))
            return np.concatenate([top, bottom], axis=-2)
        return raw.reshape(x.shape[:-1] + (self.n_x, self.n_u))

    def f_jacobian(self, x: np.ndarray) -> np.ndarray:
        return input_jacobian(self.f_net, x)

    def b_jacobian(self, x: np.ndarray) -> np.ndarray:
        """dB/dx, shape (..., n_x_deriv, n_x, n_u)."""
        x = np.asarray(x, dtype=float)
        jac = input_jacobian(self.b_net, x)  # (..., out, n_x)
        jac = np.swapaxes(jac, -1, -2)  # (..., n_x_deriv, out)
        if self.sparse_b:
            bottom = jac.reshape(x.shape[:-1] + (self.n_x, self.n_u, self.n_u))
            top = np.zeros(x.shape[:-1] + (self.n_x, self.n_x - self.n_u, self.n_u))
            return np.concatenate([top, bottom], axis=-2)
        return jac.reshape(x.shape[:-1] + (self.n_x, self.n_x, self.n_u))


def eval_learned(g: ControlAffineModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Learned derivative g(x, u) = f(x) + B(x) u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != g.n_x or u.shape[-1] != g.n_u:
        raise InvalidInputError("state/control dimension mismatch")
    fx = forward(g.f_net, x)
    bu = np.einsum("...ij,...j->...i", g.b_matrix(x), u)
    return fx + bu


def model_to_dict(g: ControlAffineModel) -> dict:
    return {
        "format": "ccmplan-model-v1",
        "n_x": g.n_x,
        "n_u": g.n_u,
        "sparse_b": bool(g.sparse_b),
        "f_net": mlp_to_dict(g.f_net),
        "b_net": mlp_to_dict(g.b_net),
    }


def model_from_dict(d: dict) -> ControlAffineModel:
    if d.get("format") != "ccmplan-model-v1":
        raise InvalidInputError(f"unknown model format: {d.get('format')}")
    return ControlAffineModel(
        f_net=mlp_from_dict(d["f_net"]),
        b_net=mlp_from_dict(d["b_net"]),
        n_x=int(d["n_x"]),
        n_u=int(d["n_u"]),
        sparse_b=bool(d["sparse_b"]),
    )


# -- datasets ---------------------------------------------------------------------


@dataclass
class Dataset:
    """State-control-derivative triples; `role` tags the training set vs. the
    independent estimation samples."""

    x: np.ndarray
    u: np.ndarray
    dx: np.ndarray
    role: str = "S"

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.dx = np.atleast_2d(np.asarray(self.dx, dtype=float))
        if not (self.x.shape[0] == self.u.shape[0] == self.dx.shape[0]):
            raise InvalidInputError("sample counts differ between fields")
        if self.x.shape != self.dx.shape:
            raise InvalidInputError("dx must match state dimension")
        if not all(np.all(np.isfinite(a)) for a in (self.x, self.u, self.dx)):
            raise InvalidInputError("dataset has non-finite entries")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def zu(self) -> np.ndarray:
        """Stacked (x, u) rows."""
        return np.concatenate([self.x, self.u], axis=1)


def _uniform_box(rng: np.random.Generator, box: np.ndarray, n: int) -> np.ndarray:
    return rng.uniform(box[:, 0], box[:, 1], size=(n, box.shape[0]))


def generate_dataset(
    sys: SystemSpec,
    n: int,
    mode: str = "uniform-box",
    seed: int = 0,
    base: Optional[Dataset] = None,
    radius: float = 0.1,
    role: str = "S",
) -> Dataset:
    """Sample (x, u) pairs and label them with the true dynamics.

    uniform-box: i.i.d. uniform over the declared state/control boxes.
    perturbed-trajectories: uniform over the union of `radius`-balls around the
    rows of `base`, clipped back into the boxes (i.i.d. samples near the data).
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if mode == "uniform-box":
        x = _uniform_box(rng, sys.state_box, n)
        u = _uniform_box(rng, sys.control_box, n)
    elif mode == "perturbed-trajectories":
        if base is None or len(base) == 0:
            raise ConfigError("perturbed-trajectories mode requires a base dataset")
        z = base.zu
        d = z.shape[1]
        idx = rng.integers(0, z.shape[0], size=n)
        direction = rng.normal(size=(n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radii = radius * rng.uniform(size=n) ** (1.0 / d)
        pts = z[idx] + radii[:, None] * direction
        x = np.clip(pts[:, : sys.n_x], sys.state_box[:, 0], sys.state_box[:, 1])
        u = np.clip(pts[:, sys.n_x :], sys.control_box[:, 0], sys.control_box[:, 1])
    else:
        raise ConfigError(f"unknown dataset mode '{mode}'")
    dx = eval_true(sys, x, u)
    return Dataset(x, u, dx, role=role)


def save_dataset_csv(path: Path, data: Dataset) -> None:
    n_x, n_u = data.x.shape[1], data.u.shape[1]
    header = (
        [f"x{i}" for i in range(n_x)]
        + [f"u{i}" for i in range(n_u)]
        + [f"dx{i}" for i in range(n_x)]
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(data)):
            row = np.concatenate([data.x[i], data.u[i], data.dx[i]])
            writer.writerow([f"{v:.17g}" for v in row])


def load_dataset_csv(path: Path, role: str = "S") -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    n_x = sum(1 for h in header if h.startswith("x"))
    n_u = sum(1 for h in header if h.startswith("u"))
    return Dataset(rows[:, :n_x], rows[:, n_x : n_x + n_u], rows[:, n_x + n_u :], role=role)
