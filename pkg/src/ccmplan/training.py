"""Two-stage learning: dynamics first, then the contraction metric/controller.

The dynamics stage minimizes the mean squared residual plus a batch-wise
slope estimate of the residual's Lipschitz constant. The metric stage keeps
the model frozen and drives the batch-max eigenvalue of the contraction
matrix negative through a linear-penalty/log-barrier wrapper, while shaping
the metric condition ratio (and the strong-mode feedback gain factor) that
multiplies the tube size.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InvalidInputError, TrainingDivergedError
from .nets import (
    Mlp,
    PsdMetricNet,
    TanhController,
    TapeMlp,
    controller_deviation_jacobian,
    eval_controller,
    eval_metric,
    metric_w_jacobian,
    mlp_from_dict,
    mlp_init,
    mlp_to_dict,
    tape_forward,
    tape_forward_and_jacobian,
)
from .systems import ControlAffineModel, Dataset, eval_learned


@dataclass
class RampSchedule:
    """Linear ramp start -> end over `ramp_epochs`, constant afterwards."""

    start: float
    end: float
    ramp_epochs: int = 0

    def __post_init__(self):
        if self.end < self.start:
            raise ConfigError("schedules must be monotone non-decreasing")
        if self.ramp_epochs < 0:
            raise ConfigError("ramp_epochs must be >= 0")

    def __call__(self, epoch: int) -> float:
        if self.ramp_epochs <= 0 or epoch >= self.ramp_epochs:
            return self.end
        return self.start + (self.end - self.start) * epoch / self.ramp_epochs


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    learning_rate: float = 1e-2
    lam: float = 0.1
    w_floor: float = 0.01
    barrier_margin: float = 1e-3
    seed: int = 0
    alpha1: RampSchedule = field(default_factory=lambda: RampSchedule(0.0, 0.01, 10))
    alpha2: RampSchedule = field(default_factory=lambda: RampSchedule(0.0, 10.0, 20))
    alpha3: RampSchedule = field(default_factory=lambda: RampSchedule(0.0, 0.5, 20))
    val_fraction: float = 0.1
    weak_deviation_radius: float = 0.1

    def __post_init__(self):
        if self.batch_size < 2 or self.epochs < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size >= 2, epochs >= 1, learning_rate > 0 required")
        if self.lam <= 0:
            raise ConfigError("target contraction rate must be positive")
        if self.w_floor <= 0 or self.barrier_margin <= 0:
            raise ConfigError("w_floor and barrier_margin must be positive")


@dataclass
class CcmBundle:
    """A candidate certificate: metric (plus controller in weak mode) at rate lam."""

    mode: str  # "strong" | "weak"
    metric: PsdMetricNet
    lam: float
    n_x: int
    n_u: int
    controller: Optional[TanhController] = None

    def __post_init__(self):
        if self.mode not in ("strong", "weak"):
            raise ConfigError(f"unknown bundle mode '{self.mode}'")
        if self.lam <= 0:
            raise ConfigError("lam must be positive")
        if self.metric.n != self.n_x:
            raise InvalidInputError("metric dimension must equal n_x")
        if self.mode == "strong":
            expected = np.arange(self.n_x - self.n_u)
            if not np.array_equal(self.metric.input_mask, expected):
                raise ConfigError(
                    "strong mode requires the metric to depend only on the first n_x - n_u states"
                )
        if self.mode == "weak" and self.controller is None:
            raise ConfigError("weak mode requires a controller")


def null_basis_selector(n_x: int, n_u: int) -> np.ndarray:
    """Basis of the null space of B^T for the sparse actuation structure: [I; 0]."""
    e = np.zeros((n_x, n_x - n_u))
    e[: n_x - n_u, : n_x - n_u] = np.eye(n_x - n_u)
    return e


# -- contraction matrices (plain numpy; certification path) -------------------------


def strong_contraction_parts(
    bundle: CcmBundle, g: ControlAffineModel, x: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (F(x), C_s(x)) where C_s is the null-space projection of F.

    F = -dW along f + sym(Jf W) + 2 lam W; both batched over leading dims.
    """
    if not g.sparse_b:
        raise ConfigError("strong contraction conditions require a sparse-structured B(x)")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w, _ = eval_metric(bundle.metric, x)
    dw = metric_w_jacobian(bundle.metric, x)  # (B, n_x, n, n)
    from .nets import forward as _fwd

    f = _fwd(g.f_net, x)
    jf = g.f_jacobian(x)
    lie = np.einsum("bi,binm->bnm", f, dw)
    jfw = jf @ w
    full = -lie + jfw + np.swapaxes(jfw, -1, -2) + 2.0 * bundle.lam * w
    e = null_basis_selector(bundle.n_x, bundle.n_u)
    proj = np.swapaxes(e, 0, 1) @ full @ e
    return full, proj


def weak_contraction_matrix(
    bundle: CcmBundle,
    g: ControlAffineModel,
    xt: np.ndarray,
    xs: np.ndarray,
    us: np.ndarray,
) -> np.ndarray:
    """C_w at deviation xt around nominal (xs, us), evaluated at x = xs + xt."""
    if bundle.controller is None:
        raise ConfigError("weak contraction matrix requires a controller")
    xt = np.atleast_2d(np.asarray(xt, dtype=float))
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    us = np.atleast_2d(np.asarray(us, dtype=float))
    x = xs + xt
    w, m = eval_metric(bundle.metric, x)
    dw = metric_w_jacobian(bundle.metric, x)
    dm = -m[:, None] @ dw @ m[:, None]
    u = eval_controller(bundle.controller, xt, xs, us)
    k = controller_deviation_jacobian(bundle.controller, xt, xs)
    jf = g.f_jacobian(x)
    db = g.b_jacobian(x)  # (B, n_x_deriv, n_x_row, n_u)
    a = jf + np.einsum("bu,bknu->bnk", u, db)
    bmat = g.b_matrix(x)
    from .nets import forward as _fwd

    xdot = _fwd(g.f_net, x) + np.einsum("bnu,bu->bn", bmat, u)
    mdot = np.einsum("bi,binm->bnm", xdot, dm)
    acl = a + bmat @ k
    macl = m @ acl
    return mdot + macl + np.swapaxes(macl, -1, -2) + 2.0 * bundle.lam * m


def contraction_matrix(bundle: CcmBundle, g: ControlAffineModel, point) -> np.ndarray:
    """Contraction-condition matrix at a point (batched).

    Strong mode: `point` is the state x. Weak mode: `point` is (xt, xs, us).
    """
    if bundle.mode == "strong":
        _, proj = strong_contraction_parts(bundle, g, point)
        return proj
    xt, xs, us = point
    return weak_contraction_matrix(bundle, g, xt, xs, us)


def delta_u_pointwise(bundle: CcmBundle, g: ControlAffineModel, x: np.ndarray) -> np.ndarray:
    """Feedback-gain factor of the geodesic controller at x (the quantity whose
    supremum over the domain bounds ||u_fb|| <= eps * delta_u)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    full, _ = strong_contraction_parts(bundle, g, x)
    w, _ = eval_metric(bundle.metric, x)
    c = np.linalg.cholesky(w)  # W = C C^T, so L = C^T and L^{-1} = C^{-T}
    c_inv = np.linalg.inv(c)
    mid = c_inv @ full @ np.swapaxes(c_inv, -1, -2)
    num = np.linalg.eigvalsh(0.5 * (mid + np.swapaxes(mid, -1, -2)))[..., -1]
    bt_linv = np.swapaxes(g.b_matrix(x), -1, -2) @ np.swapaxes(c_inv, -1, -2)
    sv = np.linalg.svd(bt_linv, compute_uv=False)
    smax = sv[..., :1]
    positive = sv > 1e-9 * smax
    idx = positive.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    smin = np.take_along_axis(sv, idx[..., None], axis=-1)[..., 0]
    return num / (2.0 * smin)


# -- tape-side loss construction -------------------------------------------------------


class TapeModel:
    """Trainable view of a ControlAffineModel (shared parameter buffers)."""

    def __init__(self, model: ControlAffineModel):
        self.model = model
        self.f = TapeMlp(model.f_net)
        self.b = TapeMlp(model.b_net)

    def parameters(self) -> List[ad.Tensor]:
        return self.f.parameters() + self.b.parameters()

    def eval(self, x: np.ndarray, u: np.ndarray) -> ad.Tensor:
        xb = np.atleast_2d(x)
        ub = np.atleast_2d(u)
        fx = tape_forward(self.f, ad.constant(xb))
        braw = tape_forward(self.b, ad.constant(xb))
        n_x, n_u = self.model.n_x, self.model.n_u
        if self.model.sparse_b:
            bottom = ad.reshape(braw, (xb.shape[0], n_u, n_u))
            bu = ad.matvec(bottom, ad.constant(ub))
            zeros = ad.constant(np.zeros((xb.shape[0], n_x - n_u)))
            bu = ad.concat([zeros, bu], axis=1)
        else:
            bmat = ad.reshape(braw, (xb.shape[0], n_x, n_u))
            bu = ad.matvec(bmat, ad.constant(ub))
        return fx + bu


class TapeMetric:
    """Trainable view of a PsdMetricNet."""

    def __init__(self, metric: PsdMetricNet):
        self.metric = metric
        self.base = TapeMlp(metric.base)

    def parameters(self) -> List[ad.Tensor]:
        return self.base.parameters()

    def w_and_jacobian(self, x: np.ndarray) -> Tuple[ad.Tensor, ad.Tensor]:
        """W(x) (B, n, n) and dW/dz over masked coords (B, m, n, n), as graph nodes."""
        x = np.atleast_2d(x)
        m = self.metric
        z = ad.constant(x[:, m.input_mask])
        v_flat, jv = tape_forward_and_jacobian(self.base, z)
        batch = x.shape[0]
        v = ad.reshape(v_flat, (batch, m.n, m.n))
        w = ad.matmul(ad.transpose_last(v), v) + np.eye(m.n) * m.floor
        w = 0.5 * (w + ad.transpose_last(w))
        dv = ad.reshape(ad.transpose_last(jv), (batch, m.input_mask.size, m.n, m.n))
        v_b = ad.reshape(v, (batch, 1, m.n, m.n))
        term = ad.matmul(ad.transpose_last(dv), v_b)
        dw = term + ad.transpose_last(term)
        return w, dw


class TapeController:
    """Trainable view of a TanhController."""

    def __init__(self, ctrl: TanhController):
        self.ctrl = ctrl
        self.gain = ad.Tensor(ctrl.gain, requires_grad=True)
        self.net = TapeMlp(ctrl.net)

    def parameters(self) -> List[ad.Tensor]:
        return [self.gain] + self.net.parameters()

    def u_and_deviation_jacobian(
        self, xt: np.ndarray, xs: np.ndarray, us: np.ndarray
    ) -> Tuple[ad.Tensor, ad.Tensor]:
        c = self.ctrl
        xt2 = np.atleast_2d(xt)
        xs2 = np.atleast_2d(xs)
        us2 = np.atleast_2d(us)
        batch = xt2.shape[0]
        z = ad.constant(
            np.concatenate([xt2, xs2[:, c.kept_state_indices]], axis=1)
        )
        uraw, jnet = tape_forward_and_jacobian(self.net, z)
        umat = ad.reshape(uraw, (batch, c.n_u, c.n_x))
        sel = np.zeros((z.shape[1], c.n_x))
        sel[: c.n_x, : c.n_x] = np.eye(c.n_x)
        jxt = ad.matmul(jnet, sel)  # (B, n_u*n_x, n_x)
        dmat = ad.reshape(ad.transpose_last(jxt), (batch, c.n_x, c.n_u, c.n_x))
        xt_c = ad.constant(xt2)
        y = ad.matvec(umat, xt_c)
        t_term = ad.transpose_last(
            ad.matvec(dmat, ad.reshape(xt_c, (batch, 1, c.n_x)))
        )
        dy = umat + t_term
        th = ad.tanh(y)
        gain_abs = ad.absolute(self.gain)
        u = gain_abs * th + us2
        scale = ad.reshape(gain_abs * (1.0 - th * th), (batch, c.n_u, 1))
        return u, scale * dy


def _relu(t: ad.Tensor) -> ad.Tensor:
    return 0.5 * (t + ad.absolute(t))


def logb(s: ad.Tensor, margin: float) -> ad.Tensor:
    """Log barrier for s > margin; linear penalty (C1-continuous) otherwise."""
    if float(s.value) > margin:
        return -ad.log(s)
    return (margin - s) * (1.0 / margin) - float(np.log(margin))


def dyn_loss(
    model: TapeModel | ControlAffineModel,
    x: np.ndarray,
    u: np.ndarray,
    dx: np.ndarray,
    alpha1: float,
) -> ad.Tensor:
    """Mean squared residual plus alpha1 times the batch-max residual slope.

    Pairs at (numerically) duplicate inputs are excluded from the slope term.
    """
    tape = model if isinstance(model, TapeModel) else TapeModel(model)
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    dx = np.atleast_2d(dx)
    if x.shape[0] < 2:
        raise InvalidInputError("dyn_loss requires a batch of at least 2 samples")
    pred = tape.eval(x, u)
    err = ad.norm2(pred - dx, axis=-1)
    loss = ad.mean(err * err)
    if alpha1 > 0.0:
        zu = np.concatenate([x, u], axis=1)
        diff = zu[:, None, :] - zu[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        ii, jj = np.triu_indices(x.shape[0], k=1)
        keep = dist[ii, jj] > 1e-12
        ii, jj = ii[keep], jj[keep]
        if ii.size:
            num = ad.absolute(ad.take(err, ii) - ad.take(err, jj))
            ratios = num * (1.0 / dist[ii, jj])
            loss = loss + alpha1 * ad.amax(ratios)
    return loss


def _strong_loss_terms(
    metric_tape: TapeMetric,
    g: ControlAffineModel,
    bundle: CcmBundle,
    x: np.ndarray,
) -> Tuple[ad.Tensor, ad.Tensor]:
    """(L_NSD, per-sample tube factor ratio*(1+delta_u)) for a batch of states."""
    from .nets import forward as _fwd

    x = np.atleast_2d(x)
    batch = x.shape[0]
    n = bundle.n_x
    w, dw = metric_tape.w_and_jacobian(x)
    f = _fwd(g.f_net, x)
    jf = g.f_jacobian(x)
    f_mask = f[:, metric_tape.metric.input_mask]
    lie = ad.sum_(ad.reshape(f_mask, (batch, -1, 1, 1)) * dw, axis=1)
    jfw = ad.matmul(ad.constant(jf), w)
    full = -lie + jfw + ad.transpose_last(jfw) + (2.0 * bundle.lam) * w
    e = null_basis_selector(bundle.n_x, bundle.n_u)
    proj = ad.matmul(ad.matmul(e.T, full), e)
    lnsd = ad.amax(eig_batch_max(proj))
    # per-sample feedback factor and metric condition ratio
    chol = ad.cholesky_lower(w)
    c_inv = ad.inverse(chol)
    mid = ad.matmul(ad.matmul(c_inv, full), ad.transpose_last(c_inv))
    num = eig_batch_max(mid)
    bt = np.swapaxes(g.b_matrix(x), -1, -2)
    bt_linv = ad.matmul(ad.constant(bt), ad.transpose_last(c_inv))
    den = ad.min_positive_sv(bt_linv)
    delta_u = _relu(num / (2.0 * den))
    ratio = ad.sqrt(eig_batch_max(w) / eig_batch_min(w))
    return lnsd, ratio * (1.0 + delta_u)


def eig_batch_max(a: ad.Tensor) -> ad.Tensor:
    return ad.eig_max_sym(a)


def eig_batch_min(a: ad.Tensor) -> ad.Tensor:
    return ad.eig_min_sym(a)


def _weak_loss_terms(
    metric_tape: TapeMetric,
    ctrl_tape: TapeController,
    g: ControlAffineModel,
    bundle: CcmBundle,
    xt: np.ndarray,
    xs: np.ndarray,
    us: np.ndarray,
) -> Tuple[ad.Tensor, ad.Tensor]:
    from .nets import forward as _fwd

    xt = np.atleast_2d(xt)
    xs = np.atleast_2d(xs)
    us = np.atleast_2d(us)
    batch = xt.shape[0]
    n = bundle.n_x
    x = xs + xt
    w, dw = metric_tape.w_and_jacobian(x)
    m = ad.inverse(w)
    m_b = ad.reshape(m, (batch, 1, n, n))
    dm = -ad.matmul(ad.matmul(m_b, dw), m_b)
    u, k = ctrl_tape.u_and_deviation_jacobian(xt, xs, us)
    jf = g.f_jacobian(x)
    db = g.b_jacobian(x)
    # A = Jf + sum_i u^i dB^i/dx with (dB^i/dx)[row, col] = db[col, row, i]
    db_by_channel = np.einsum("bknu->bunk", db)
    a_cl = ad.constant(jf) + ad.sum_(
        ad.reshape(u, (batch, -1, 1, 1)) * db_by_channel, axis=1
    )
    bmat = g.b_matrix(x)
    xdot = _fwd(g.f_net, x) + ad.matvec(ad.constant(bmat), u)
    mask = metric_tape.metric.input_mask
    sel = np.zeros((mask.size, n))
    sel[np.arange(mask.size), mask] = 1.0
    xdot_mask = ad.matvec(sel, xdot)
    mdot = ad.sum_(ad.reshape(xdot_mask, (batch, -1, 1, 1)) * dm, axis=1)
    acl = a_cl + ad.matmul(ad.constant(bmat), k)
    macl = ad.matmul(m, acl)
    cw = mdot + macl + ad.transpose_last(macl) + (2.0 * bundle.lam) * m
    lnsd = ad.amax(eig_batch_max(cw))
    ratio = ad.sqrt(eig_batch_max(w) / eig_batch_min(w))
    return lnsd, ratio


def ccm_loss(
    bundle_tapes,
    g: ControlAffineModel,
    bundle: CcmBundle,
    batch,
    l_est: float,
    alpha2: float,
    alpha3: float = 0.0,
    margin: float = 1e-3,
) -> ad.Tensor:
    """Barrier-wrapped feasibility penalty plus the tube-size shaping term.

    `l_est` (a batch estimate of the model-error Lipschitz constant) is part
    of the operation contract; the shaping term itself is the rate-independent
    surrogate max_i ratio_i [* (1 + delta_u_i) in strong mode], so l_est does
    not enter the returned value.
    """
    if l_est < 0:
        raise InvalidInputError("l_est must be nonnegative")
    if bundle.mode == "strong":
        metric_tape = bundle_tapes
        lnsd, factor = _strong_loss_terms(metric_tape, g, bundle, batch)
        loss = logb(-lnsd, margin) + alpha2 * ad.amax(factor)
        return loss
    metric_tape, ctrl_tape = bundle_tapes
    xt, xs, us = batch
    lnsd, ratio = _weak_loss_terms(metric_tape, ctrl_tape, g, bundle, xt, xs, us)
    loss = logb(-lnsd, margin) + alpha2 * ad.amax(ratio)
    loss = loss + alpha3 * ad.norm2(ad.absolute(ctrl_tape.gain), axis=-1)
    return loss


# -- optimizer & loops -------------------------------------------------------------


class Adam:
    """Adaptive per-parameter steps with bias-corrected first/second moments."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for k in range(0, n, batch_size):
        idx = order[k : k + batch_size]
        if idx.size >= 2:
            yield idx


def train_dynamics(
    model: ControlAffineModel, data: Dataset, config: TrainConfig
) -> List[Dict[str, float]]:
    """Fit g to the dataset; returns per-epoch loss history."""
    rng = np.random.default_rng(config.seed)
    n_val = max(1, int(len(data) * config.val_fraction))
    perm = rng.permutation(len(data))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if tr_idx.size < 2:
        raise InvalidInputError("not enough samples to train")
    tape = TapeModel(model)
    opt = Adam(tape.parameters(), config.learning_rate)
    history: List[Dict[str, float]] = []
    for epoch in range(config.epochs):
        a1 = config.alpha1(epoch)
        total, count = 0.0, 0
        for idx in _batches(tr_idx.size, config.batch_size, rng):
            sel = tr_idx[idx]
            loss = dyn_loss(tape, data.x[sel], data.u[sel], data.dx[sel], a1)
            if not np.isfinite(loss.value):
                raise TrainingDivergedError("dynamics loss became non-finite", epoch)
            grads = ad.param_gradients(loss, tape.parameters())
            opt.step(grads)
            total += float(loss.value)
            count += 1
        res = eval_learned(model, data.x[val_idx], data.u[val_idx]) - data.dx[val_idx]
        val_mse = float(np.mean(np.sum(res**2, axis=1)))
        history.append(
            {"epoch": epoch, "loss": total / max(count, 1), "val_mse": val_mse, "alpha1": a1}
        )
    return history


def train_ccm(
    bundle: CcmBundle,
    g: ControlAffineModel,
    data: Dataset,
    config: TrainConfig,
) -> List[Dict[str, float]]:
    """Fit the metric (and controller in weak mode) for a frozen model."""
    rng = np.random.default_rng(config.seed + 1)
    metric_tape = TapeMetric(bundle.metric)
    if bundle.mode == "strong":
        params = metric_tape.parameters()
        tapes = metric_tape
    else:
        ctrl_tape = TapeController(bundle.controller)
        params = metric_tape.parameters() + ctrl_tape.parameters()
        tapes = (metric_tape, ctrl_tape)
    opt = Adam(params, config.learning_rate)
    res = eval_learned(g, data.x, data.u) - data.dx
    errs = np.linalg.norm(res, axis=1)
    history: List[Dict[str, float]] = []
    for epoch in range(config.epochs):
        a2 = config.alpha2(epoch)
        a3 = config.alpha3(epoch)
        total, worst, count = 0.0, -np.inf, 0
        for idx in _batches(len(data), config.batch_size, rng):
            zu = np.concatenate([data.x[idx], data.u[idx]], axis=1)
            diff = zu[:, None, :] - zu[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            ii, jj = np.triu_indices(idx.size, k=1)
            keep = dist[ii, jj] > 1e-12
            l_est = 0.0
            if np.any(keep):
                slopes = np.abs(errs[idx][ii[keep]] - errs[idx][jj[keep]]) / dist[ii, jj][keep]
                l_est = float(slopes.max())
            if bundle.mode == "strong":
                batch = data.x[idx]
            else:
                d = rng.normal(size=(idx.size, bundle.n_x))
                d /= np.linalg.norm(d, axis=1, keepdims=True)
                radii = config.weak_deviation_radius * rng.uniform(size=idx.size) ** (
                    1.0 / bundle.n_x
                )
                batch = (radii[:, None] * d, data.x[idx], data.u[idx])
            loss = ccm_loss(
                tapes, g, bundle, batch, l_est, a2, a3, config.barrier_margin
            )
            if not np.isfinite(loss.value):
                raise TrainingDivergedError("ccm loss became non-finite", epoch)
            grads = ad.param_gradients(loss, params)
            opt.step(grads)
            total += float(loss.value)
            count += 1
        # feasibility snapshot on a fixed probe batch
        probe = data.x[: min(len(data), 256)]
        if bundle.mode == "strong":
            c = contraction_matrix(bundle, g, probe)
        else:
            c = contraction_matrix(
                bundle, g, (np.zeros_like(probe), probe, data.u[: probe.shape[0]])
            )
        lnsd_probe = float(np.linalg.eigvalsh(c)[..., -1].max())
        history.append(
            {
                "epoch": epoch,
                "loss": total / max(count, 1),
                "probe_max_eig": lnsd_probe,
                "alpha2": a2,
                "alpha3": a3,
            }
        )
    return history


def train(stage: str, config: TrainConfig, data: Dataset, *, model=None, bundle=None):
    """Dispatch to a training stage; the dynamics stage must precede the ccm stage."""
    if stage == "dynamics":
        if model is None:
            raise ConfigError("dynamics stage requires a model")
        return model, train_dynamics(model, data, config)
    if stage == "ccm":
        if model is None or bundle is None:
            raise ConfigError("ccm stage requires a trained model and a bundle")
        return bundle, train_ccm(bundle, model, data, config)
    raise ConfigError(f"unknown training stage '{stage}'")


# -- bundle construction & serialization ---------------------------------------------


def make_metric_net(
    n_x: int,
    hidden: Sequence[int],
    input_mask: Optional[np.ndarray],
    floor: float,
    rng: np.random.Generator,
    init_scale: float = 0.3,
) -> PsdMetricNet:
    mask = np.arange(n_x) if input_mask is None else np.asarray(input_mask, dtype=int)
    widths = [mask.size] + list(hidden) + [n_x * n_x]
    acts = ["tanh"] * len(hidden) + ["linear"]
    return PsdMetricNet(mlp_init(widths, acts, rng, init_scale), n=n_x, floor=floor, input_mask=mask)


def make_controller(
    n_x: int,
    n_u: int,
    hidden: Sequence[int],
    rng: np.random.Generator,
    gain0: float = 0.5,
    invariance_mask: Optional[np.ndarray] = None,
) -> TanhController:
    inv = np.array([], dtype=int) if invariance_mask is None else np.asarray(invariance_mask, int)
    in_dim = n_x + (n_x - inv.size)
    widths = [in_dim] + list(hidden) + [n_u * n_x]
    acts = ["tanh"] * len(hidden) + ["linear"]
    return TanhController(
        gain=np.full(n_u, gain0), net=mlp_init(widths, acts, rng), n_x=n_x, n_u=n_u,
        invariance_mask=inv,
    )


def make_constant_metric(w0: np.ndarray, floor: float, input_mask: np.ndarray) -> PsdMetricNet:
    """Wrap a constant dual metric W0 as a zero-weight network with bias sqrt(W0 - floor I)."""
    w0 = np.asarray(w0, dtype=float)
    n = w0.shape[0]
    core = w0 - floor * np.eye(n)
    chol = np.linalg.cholesky(core + 1e-15 * np.eye(n))
    v = chol.T  # V^T V = core
    mask = np.asarray(input_mask, dtype=int)
    base = Mlp(
        [np.zeros((n * n, mask.size))], [v.reshape(-1)], ["linear"]
    )
    return PsdMetricNet(base, n=n, floor=floor, input_mask=mask)


def bundle_to_dict(bundle: CcmBundle) -> dict:
    d = {
        "format": "ccmplan-bundle-v1",
        "mode": bundle.mode,
        "lam": bundle.lam,
        "n_x": bundle.n_x,
        "n_u": bundle.n_u,
        "metric": {
            "n": bundle.metric.n,
            "floor": bundle.metric.floor,
            "input_mask": bundle.metric.input_mask.tolist(),
            "base": mlp_to_dict(bundle.metric.base),
        },
        "controller": None,
    }
    if bundle.controller is not None:
        c = bundle.controller
        d["controller"] = {
            "gain": c.gain.tolist(),
            "n_x": c.n_x,
            "n_u": c.n_u,
            "invariance_mask": c.invariance_mask.tolist(),
            "net": mlp_to_dict(c.net),
        }
    return d


def bundle_from_dict(d: dict) -> CcmBundle:
    if d.get("format") != "ccmplan-bundle-v1":
        raise InvalidInputError(f"unknown bundle format: {d.get('format')}")
    md = d["metric"]
    metric = PsdMetricNet(
        mlp_from_dict(md["base"]),
        n=int(md["n"]),
        floor=float(md["floor"]),
        input_mask=np.asarray(md["input_mask"], dtype=int),
    )
    ctrl = None
    if d.get("controller"):
        cd = d["controller"]
        ctrl = TanhController(
            gain=np.asarray(cd["gain"], dtype=float),
            net=mlp_from_dict(cd["net"]),
            n_x=int(cd["n_x"]),
            n_u=int(cd["n_u"]),
            invariance_mask=np.asarray(cd["invariance_mask"], dtype=int),
        )
    return CcmBundle(
        mode=d["mode"],
        metric=metric,
        lam=float(d["lam"]),
        n_x=int(d["n_x"]),
        n_u=int(d["n_u"]),
        controller=ctrl,
    )
