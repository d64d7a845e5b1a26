"""Feedforward networks and the structured metric/controller parameterizations.

Every network has two evaluation paths: a plain numpy path used by
certification, planning and simulation (hot loops, no graph bookkeeping), and
a tape path used by training. The tests pin both paths to agree.

Checkpoint format (JSON, versioned):
    {"format": "ccmplan-net-v1", "widths": [...], "activations": [...],
     "weights": [row-major nested lists], "biases": [nested lists]}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError

_ACTIVATIONS = ("tanh", "softplus", "linear")


@dataclass
class Mlp:
    """Fully connected network; one activation tag per layer (output layer included)."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise InvalidInputError("layer lists must have equal length")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise InvalidInputError(f"unknown activation '{act}'")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise InvalidInputError(f"layer {i} has inconsistent shapes")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidInputError(f"layer {i} input dim mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidInputError(f"layer {i} has non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def widths(self) -> List[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def mlp_init(widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
             scale: Optional[float] = None) -> Mlp:
    """Uniform(-s, s) init with s = scale/sqrt(fan_in); zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        s = (scale if scale is not None else 1.0) / np.sqrt(fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases, list(activations))


def _apply_act(z: np.ndarray, act: str) -> np.ndarray:
    if act == "tanh":
        return np.tanh(z)
    if act == "softplus":
        return np.logaddexp(0.0, z)
    return z


def _act_grad(post: np.ndarray, pre: np.ndarray, act: str) -> np.ndarray:
    if act == "tanh":
        return 1.0 - post**2
    if act == "softplus":
        return 1.0 / (1.0 + np.exp(-pre))
    return np.ones_like(pre)


def forward(net: Mlp, z: np.ndarray) -> np.ndarray:
    """Evaluate the network on (..., in_dim) input."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != net.in_dim:
        raise InvalidInputError(
            f"input dim {z.shape[-1]} does not match network input {net.in_dim}"
        )
    a = z
    for w, b, act in zip(net.weights, net.biases, net.activations):
        a = _apply_act(a @ w.T + b, act)
    return a


def input_jacobian(net: Mlp, z: np.ndarray) -> np.ndarray:
    """Exact Jacobian d(forward)/dz, shape (..., out_dim, in_dim)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != net.in_dim:
        raise InvalidInputError(
            f"input dim {z.shape[-1]} does not match network input {net.in_dim}"
        )
    a = z
    jac = None
    for w, b, act in zip(net.weights, net.biases, net.activations):
        pre = a @ w.T + b
        a = _apply_act(pre, act)
        d = _act_grad(a, pre, act)
        if jac is None:
            jac = d[..., :, None] * w
        else:
            jac = d[..., :, None] * (w @ jac)
    return jac


# -- tape path -----------------------------------------------------------------


class TapeMlp:
    """Parameter tensors sharing the buffers of an Mlp, for in-place optimization."""

    def __init__(self, net: Mlp):
        self.net = net
        self.weights = [ad.Tensor(w, requires_grad=True) for w in net.weights]
        self.biases = [ad.Tensor(b, requires_grad=True) for b in net.biases]

    def parameters(self) -> List[ad.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def tape_forward(tm: TapeMlp, z: ad.Tensor) -> ad.Tensor:
    """Graph evaluation on a (..., in_dim) input tensor."""
    a = z
    for w, b, act in zip(tm.weights, tm.biases, tm.net.activations):
        pre = ad.matmul(a, ad.transpose_last(w)) if a.ndim >= 2 else ad.matvec(w, a)
        pre = pre + b
        if act == "tanh":
            a = ad.tanh(pre)
        elif act == "softplus":
            a = ad.softplus(pre)
        else:
            a = pre
    return a


def tape_forward_and_jacobian(tm: TapeMlp, z: ad.Tensor) -> Tuple[ad.Tensor, ad.Tensor]:
    """Graph evaluation plus the closed-form input Jacobian (..., out, in) as graph nodes."""
    a = z
    jac = None
    for w, b, act in zip(tm.weights, tm.biases, tm.net.activations):
        pre = (ad.matmul(a, ad.transpose_last(w)) if a.ndim >= 2 else ad.matvec(w, a)) + b
        if act == "tanh":
            a = ad.tanh(pre)
            d = 1.0 - a * a
        elif act == "softplus":
            a = ad.softplus(pre)
            d = 1.0 / (1.0 + ad.exp(-pre))
        else:
            a = pre
            d = None
        if jac is None:
            step = w if d is None else ad.reshape(d, d.shape + (1,)) * w
        else:
            step = ad.matmul(w, jac)
            if d is not None:
                step = ad.reshape(d, d.shape + (1,)) * step
        jac = step
    return a, jac


# -- metric parameterization ------------------------------------------------------


@dataclass
class PsdMetricNet:
    """Dual metric W(x) = V(x)^T V(x) + floor * I with V produced by an Mlp.

    `input_mask` lists the state indices the metric may depend on; the Jacobian
    of W along every other coordinate is exactly zero by construction.
    """

    base: Mlp
    n: int
    floor: float
    input_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.floor <= 0:
            raise InvalidInputError("metric floor must be positive")
        if self.input_mask is None:
            self.input_mask = np.arange(self.n)
        self.input_mask = np.asarray(self.input_mask, dtype=int)
        if self.base.in_dim != self.input_mask.size:
            raise InvalidInputError("base input width must equal mask size")
        if self.base.out_dim != self.n * self.n:
            raise InvalidInputError("base output width must be n*n")


def eval_metric(m: PsdMetricNet, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (W(x), M(x) = W^{-1}(x)) for (..., n_x) input."""
    x = np.asarray(x, dtype=float)
    v = forward(m.base, x[..., m.input_mask]).reshape(x.shape[:-1] + (m.n, m.n))
    w = np.swapaxes(v, -1, -2) @ v + m.floor * np.eye(m.n)
    w = 0.5 * (w + np.swapaxes(w, -1, -2))
    metric = np.linalg.inv(w)
    metric = 0.5 * (metric + np.swapaxes(metric, -1, -2))
    return w, metric


def metric_w_jacobian(m: PsdMetricNet, x: np.ndarray) -> np.ndarray:
    """dW/dx as (..., n_x, n, n); zero along coordinates outside the mask."""
    x = np.asarray(x, dtype=float)
    n_x = x.shape[-1]
    z = x[..., m.input_mask]
    v = forward(m.base, z).reshape(x.shape[:-1] + (m.n, m.n))
    jz = input_jacobian(m.base, z)  # (..., n*n, len(mask))
    dv = np.swapaxes(jz, -1, -2).reshape(x.shape[:-1] + (m.input_mask.size, m.n, m.n))
    dvt_v = np.swapaxes(dv, -1, -2) @ v[..., None, :, :]
    dw_masked = dvt_v + np.swapaxes(dvt_v, -1, -2)
    dw = np.zeros(x.shape[:-1] + (n_x, m.n, m.n))
    dw[..., m.input_mask, :, :] = dw_masked
    return dw


# -- tanh tracking controller ------------------------------------------------------


@dataclass
class TanhController:
    """u = |gain| * tanh(U(xt, xs) @ xt) + us, so the feedback never exceeds ||gain||."""

    gain: np.ndarray
    net: Mlp
    n_x: int
    n_u: int
    invariance_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=float)
        if self.gain.shape != (self.n_u,):
            raise InvalidInputError("gain must have one entry per control channel")
        if self.invariance_mask is None:
            self.invariance_mask = np.array([], dtype=int)
        self.invariance_mask = np.asarray(self.invariance_mask, dtype=int)
        keep = self.n_x - self.invariance_mask.size
        if self.net.in_dim != self.n_x + keep:
            raise InvalidInputError(
                f"controller net input must be {self.n_x + keep} (xt + reduced xs)"
            )
        if self.net.out_dim != self.n_u * self.n_x:
            raise InvalidInputError("controller net output must be n_u*n_x")

    @property
    def kept_state_indices(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_x), self.invariance_mask)

    def feedback_bound(self) -> float:
        return float(np.linalg.norm(self.gain))


def _controller_input(c: TanhController, xt: np.ndarray, xs: np.ndarray) -> np.ndarray:
    return np.concatenate([xt, xs[..., c.kept_state_indices]], axis=-1)


def eval_controller(c: TanhController, xt: np.ndarray, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Tracking control for deviation xt around nominal (xs, us)."""
    xt = np.asarray(xt, dtype=float)
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    umat = forward(c.net, _controller_input(c, xt, xs))
    umat = umat.reshape(xt.shape[:-1] + (c.n_u, c.n_x))
    y = np.einsum("...ij,...j->...i", umat, xt)
    return np.abs(c.gain) * np.tanh(y) + us


def controller_deviation_jacobian(c: TanhController, xt: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """K = du/d(xt), shape (..., n_u, n_x)."""
    xt = np.asarray(xt, dtype=float)
    xs = np.asarray(xs, dtype=float)
    z = _controller_input(c, xt, xs)
    umat = forward(c.net, z).reshape(xt.shape[:-1] + (c.n_u, c.n_x))
    jz = input_jacobian(c.net, z)[..., : c.n_x]  # derivative w.r.t. the xt block
    dmat = np.swapaxes(jz, -1, -2).reshape(xt.shape[:-1] + (c.n_x, c.n_u, c.n_x))
    y = np.einsum("...ij,...j->...i", umat, xt)
    dy = umat + np.einsum("...ikj,...j->...ki", dmat, xt)
    sech2 = 1.0 - np.tanh(y) ** 2
    return (np.abs(c.gain) * sech2)[..., :, None] * dy


# -- checkpoint serialization ---------------------------------------------------------

NET_FORMAT = "ccmplan-net-v1"


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "format": NET_FORMAT,
        "widths": net.widths,
        "activations": list(net.activations),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def mlp_from_dict(d: dict) -> Mlp:
    if d.get("format") != NET_FORMAT:
        raise InvalidInputError(f"unknown checkpoint format: {d.get('format')}")
    return Mlp(
        [np.asarray(w, dtype=float) for w in d["weights"]],
        [np.asarray(b, dtype=float) for b in d["biases"]],
        list(d["activations"]),
    )


def save_json(path: Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_json(path: Path) -> dict:
    return json.loads(Path(path).read_text())
