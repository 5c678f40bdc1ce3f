"""Cost, exact gradients, Adam training and RMSE evaluation.

Gradients are hand-written adjoints: backpropagation through time over the
rollout (including the forward-substitution layer) followed by the reverse
pass through :func:`renfdi.ren.materialize`. Both are checked against
central finite differences in the test suite.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import ren as rc
from .dataset import N_SENSORS, filter_input, training_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    k0: int = 4
    epochs: int = 1000
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grad_check_every: int = 0
    n_z: int = 8
    n_v: int = 32
    beta: float = 10000.0
    gamma: float = 1.0
    q: float = 100.0
    alpha_bar: float = rc.DEFAULT_ALPHA_BAR
    epsilon: float = rc.DEFAULT_EPSILON
    init_scale: float = 1.0

    def __post_init__(self):
        if self.k0 < 0:
            raise ValueError("k0 must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dims(self, n_in: int = 6) -> rc.RenDims:
        return rc.RenDims(self.n_z, self.n_v, n_in)

    def spec(self, sensor_index: int, l: int = 2, m: int = N_SENSORS):
        return rc.PerformanceSpec(self.beta, self.gamma, self.q,
                                  sensor_index, l, m)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    initial_loss: float = float("nan")
    wall_time: float = 0.0
    grad_check_worst: float = float("nan")
    checkpoint: str | None = None

    def write_log(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "grad_norm"])
            for e, (l, g) in enumerate(zip(self.losses, self.grad_norms)):
                w.writerow([e, repr(l), repr(g)])


def _stack_pairs(pairs):
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    lengths = {len(t) for _, t in pairs}
    if len(lengths) != 1:
        raise ValueError("all pairs must have the same length")
    U = np.stack([np.asarray(u, dtype=float) for u, _ in pairs])
    F = np.stack([np.asarray(t, dtype=float) for _, t in pairs])
    return U, F


def _trace(ren: rc.ExplicitRen, U: np.ndarray):
    """Batched rollout from zero state keeping pre-update states and neuron
    outputs for the backward pass."""
    B, T, _ = U.shape
    Z = np.empty((B, T, ren.n_z))
    W = np.empty((B, T, ren.n_v))
    Rz = np.empty((B, T))
    z = np.zeros((B, ren.n_z))
    uv = U @ ren.D12.T + ren.bias_v
    uz = U @ ren.B2.T + ren.bias_z
    ur = U @ ren.D22[0] + ren.bias_r
    for k in range(T):
        Z[:, k] = z
        w = rc.equilibrium(ren.D11, z @ ren.C1.T + uv[:, k])
        W[:, k] = w
        Rz[:, k] = z @ ren.C2[0] + w @ ren.D21[0] + ur[:, k]
        z = z @ ren.A.T + w @ ren.B1.T + uz[:, k]
    return Rz, Z, W


def _rollout_vjp(ren: rc.ExplicitRen, U, Z, W, g_r) -> dict[str, np.ndarray]:
    """Gradient of ``sum(g_r * r)`` with respect to the explicit weights."""
    B, T, _ = U.shape
    nz, nv = ren.n_z, ren.n_v
    A, B1, C1, D11 = ren.A, ren.B1, ren.C1, ren.D11
    c2, d21 = ren.C2[0], ren.D21[0]
    GZN = np.zeros((B, T, nz))   # gradient w.r.t. the post-update state
    GV = np.empty((B, T, nv))
    slope = 1.0 - W * W
    gz_next = np.zeros((B, nz))
    for k in range(T - 1, -1, -1):
        GZN[:, k] = gz_next
        g = g_r[:, k]
        gw = gz_next @ B1 + g[:, None] * d21
        gv = GV[:, k]
        sp = slope[:, k]
        for j in range(nv - 1, -1, -1):
            acc = gw[:, j]
            if j < nv - 1:
                acc = acc + gv[:, j + 1:] @ D11[j + 1:, j]
            gv[:, j] = sp[:, j] * acc
        gz_next = gz_next @ A + g[:, None] * c2 + gv @ C1

    Zf, Wf, Uf = (x.reshape(B * T, -1) for x in (Z, W, U))
    GZf, GVf, gr = GZN.reshape(B * T, nz), GV.reshape(B * T, nv), g_r.reshape(-1)
    return {
        "A": GZf.T @ Zf, "B1": GZf.T @ Wf, "B2": GZf.T @ Uf,
        "bias_z": GZf.sum(0),
        "C1": GVf.T @ Zf, "D11": np.tril(GVf.T @ Wf, -1), "D12": GVf.T @ Uf,
        "bias_v": GVf.sum(0),
        "C2": (gr @ Zf)[None], "D21": (gr @ Wf)[None], "D22": (gr @ Uf)[None],
        "bias_r": float(gr.sum()),
    }


def materialize_vjp(dims: rc.RenDims, spec: rc.PerformanceSpec,
                    params: rc.DirectParams, inter: rc.Intermediates,
                    ren: rc.ExplicitRen, g: dict) -> dict[str, np.ndarray]:
    """Pull gradients of the explicit weights back to the direct parameters."""
    nz, nv, p = dims.n_z, dims.n_v, dims.n_in
    i1, i2 = nz, nz + nv
    q, abar = float(spec.q), params.alpha_bar
    lam = inter.lam

    # rows scaled by E^{-1}: [A, B1, B2, bias_z] = E^{-1} [F, B1_imp, B2_imp, eta_z]
    Y = np.hstack([ren.A, ren.B1, ren.B2, ren.bias_z[:, None]])
    gY = np.hstack([g["A"], g["B1"], g["B2"], np.asarray(g["bias_z"])[:, None]])
    gRhs = sla.lu_solve(inter.E_lu, gY, trans=1)
    gE = -gRhs @ Y.T
    gF, gB1i = gRhs[:, :nz], gRhs[:, nz:nz + nv]
    gB2i = gRhs[:, nz + nv:nz + nv + p].copy()
    g_eta_z = gRhs[:, -1]

    # rows scaled by Lambda^{-1}
    inv = 1.0 / lam
    gC1i = g["C1"] * inv[:, None]
    gL = np.tril(g["D11"], -1) * inv[:, None]
    gD12i = g["D12"] * inv[:, None]
    g_eta_v = np.asarray(g["bias_v"]) * inv
    g_lam = -(np.sum(g["C1"] * ren.C1, 1) + np.sum(g["D11"] * ren.D11, 1)
              + np.sum(g["D12"] * ren.D12, 1) + g["bias_v"] * ren.bias_v) * inv

    gC2 = np.array(g["C2"], dtype=float).reshape(1, nz)
    gD21 = np.array(g["D21"], dtype=float).reshape(1, nv)
    gd = np.array(g["D22"], dtype=float).reshape(p)

    # H partition
    gH = np.zeros((dims.n_x, dims.n_x))
    gH[:i1, :i1] += 0.5 * gE
    gH[i2:, i2:] += 0.5 * gE / abar**2
    gY1 = 0.5 * (gE - gE.T)
    gH[i2:, :i1] += gF
    gH[i2:, i1:i2] += gB1i
    gH[i1:i2, :i1] -= gC1i
    gH22 = np.diag(0.5 * g_lam) - np.tril(gL, -1)
    gH[i1:i2, i1:i2] += gH22
    # H was symmetrized as (H + H^T) / 2
    gH = 0.5 * (gH + gH.T)

    # H = X^T X + eps I + G Rt^{-1} G^T + q K K^T
    X = np.asarray(params.X, dtype=float)
    gHs = gH + gH.T
    gX = X @ gHs
    S_Gt = sla.cho_solve(inter.r_tilde_chol, inter.G.T)       # Rt^{-1} G^T
    gG = gHs @ S_Gt.T
    gS = inter.G.T @ gH @ inter.G
    S = sla.cho_solve(inter.r_tilde_chol, np.eye(p))
    gRt = -S @ gS @ S
    gK = q * gHs @ inter.K
    gC2 += gK[:nz][None]
    gD21 += gK[nz:nz + nv][None]
    gC2t = gG[:nz].T           # (p, nz)
    gD21t = gG[nz:nz + nv].T   # (p, nv)
    gB2i += gG[nz + nv:]

    d = inter.D22[0]
    c2, d21 = np.asarray(params.C2, dtype=float)[0], np.asarray(params.D21, dtype=float)[0]
    gd += -q * (gC2t @ c2) - q * (gD21t @ d21) - q * ((gRt + gRt.T) @ d)
    gC2 += (-q * gC2t.T @ d)[None]
    gD21 += (-q * gD21t.T @ d)[None]
    gD12i = gD12i - gD21t.T

    # D22 = N * sqrt(R_diag) / sqrt(q), then the Cayley block
    gN = gd * np.sqrt(spec.r_diagonal()) / np.sqrt(q)
    M = inter.M
    z3 = np.asarray(params.Z3, dtype=float).reshape(p - 1)
    gM = gN[0] * (-2.0 / (1 + M) ** 2) + gN[1:] @ (2.0 * z3) / (1 + M) ** 2
    gZ3 = gN[1:] * (-2.0 / (1 + M)) + 2.0 * z3 * gM
    gX3 = np.array(2.0 * float(params.X3) * gM)

    g_eta = np.concatenate([g_eta_z, g_eta_v, [float(g["bias_r"])]])
    return {
        "B2_imp": gB2i, "C2": gC2, "D12_imp": gD12i, "D21": gD21,
        "eta_tilde": g_eta, "X3": gX3, "Y3": np.array(0.0), "Z3": gZ3,
        "X": gX, "Y1": gY1,
    }


def _loss_mask(T: int, k0: int) -> np.ndarray:
    if not 0 <= k0 < T:
        raise ValueError(f"k0={k0} must lie in [0, {T})")
    mask = np.zeros(T)
    mask[k0:] = 1.0
    return mask


def tracking_cost(ren: rc.ExplicitRen, pairs, k0: int = 4) -> float:
    """Sum over scenarios of squared tracking error on samples ``k >= k0``,
    from a zero initial filter state."""
    U, F = _stack_pairs(pairs)
    mask = _loss_mask(U.shape[1], k0)
    R, _, _ = _trace(ren, U)
    e = (R - F) * mask
    return float(np.sum(e * e))


def cost(params, dims, spec, pairs, k0: int = 4) -> float:
    return tracking_cost(rc.materialize(dims, spec, params), pairs, k0)


def gradient(params, dims, spec, pairs, k0: int = 4):
    """Return ``(J, grads)`` with one array per trainable field."""
    U, F = _stack_pairs(pairs)
    mask = _loss_mask(U.shape[1], k0)
    if not params.is_finite():
        raise ValueError("direct parameters must be finite")
    ren, inter = rc.materialize_with_intermediates(dims, spec, params)
    R, Z, W = _trace(ren, U)
    e = (R - F) * mask
    J = float(np.sum(e * e))
    g_exp = _rollout_vjp(ren, U, Z, W, 2.0 * e)
    return J, materialize_vjp(dims, spec, params, inter, ren, g_exp)


def finite_difference_gradient(params, dims, spec, pairs, k0=4, rel_step=1e-5,
                               indices=None):
    """Central differences with ``h = rel_step * (1 + |theta|)``."""
    theta = params.to_vector()
    idx = range(theta.size) if indices is None else indices
    out = np.full(theta.size, np.nan)
    for i in idx:
        h = rel_step * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        jp = cost(params.from_vector(tp), dims, spec, pairs, k0)
        jm = cost(params.from_vector(tm), dims, spec, pairs, k0)
        out[i] = (jp - jm) / (2 * h)
    return out


def flatten(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) for k in rc.TRAINABLE])


def relative_errors(analytic, numeric, floor=1e-6):
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


class Adam:
    """Adam over a dict of arrays; updates are returned, not applied in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return out


def train_filter(i: int, dims: rc.RenDims, spec: rc.PerformanceSpec, scenarios,
                 config: TrainConfig, params: rc.DirectParams | None = None,
                 checkpoint: str | Path | None = None):
    """Train filter ``i`` (1-based) on ``scenarios`` with full-batch Adam.

    Returns ``(params, report)``. Every iterate is materialized, so the
    certificates are re-checked each epoch; a non-finite loss aborts.
    """
    pairs = training_pairs(scenarios, i)
    if params is None:
        params = rc.init_params(dims, spec, config.seed + i, config.init_scale,
                                config.epsilon, config.alpha_bar)
    report = TrainReport()
    opt = Adam(config.step_size, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.Generator(np.random.Philox(config.seed))
    t0 = time.perf_counter()
    theta = params.trainables()
    for epoch in range(config.epochs):
        J, grads = gradient(params, dims, spec, pairs, config.k0)
        if not np.isfinite(J):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        gnorm = float(np.linalg.norm(flatten(grads)))
        report.losses.append(J)
        report.grad_norms.append(gnorm)
        if config.grad_check_every and epoch % config.grad_check_every == 0:
            worst = _spot_check(params, dims, spec, pairs, config.k0, grads, rng)
            report.grad_check_worst = np.nanmax([report.grad_check_worst, worst])
            log.info("filter %d epoch %d gradient spot check worst rel err %.2e",
                     i, epoch, worst)
        if epoch % 50 == 0:
            log.info("filter %d epoch %d loss %.6g", i, epoch, J)
        theta = opt.step(theta, grads)
        params = params.with_trainables(theta)
    final = cost(params, dims, spec, pairs, config.k0)
    report.final_loss = final
    report.initial_loss = report.losses[0] if report.losses else final
    report.wall_time = time.perf_counter() - t0
    if checkpoint is not None:
        rc.save_checkpoint(checkpoint, dims, spec, params, seed=config.seed,
                           extra={"filter_index": i, "epochs": config.epochs,
                                  "k0": config.k0, "final_loss": final})
        report.checkpoint = str(checkpoint)
    return params, report


def _spot_check(params, dims, spec, pairs, k0, grads, rng, n=5):
    g = flatten(grads)
    idx = rng.choice(g.size, size=min(n, g.size), replace=False)
    fd = finite_difference_gradient(params, dims, spec, pairs, k0, indices=idx)
    return float(np.max(relative_errors(g[idx], fd[idx])))


@dataclass
class FilterBank:
    dims: rc.RenDims
    specs: list[rc.PerformanceSpec]
    params: list[rc.DirectParams]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self._rens = [rc.materialize(self.dims, s, p)
                      for s, p in zip(self.specs, self.params)]

    def __len__(self):
        return len(self.params)

    @property
    def rens(self) -> list[rc.ExplicitRen]:
        return self._rens

    def residuals(self, inputs) -> np.ndarray:
        """Residuals of every filter from zero state; shape ``(..., T, m)``."""
        inputs = np.asarray(inputs, dtype=float)
        z0 = np.zeros(self.dims.n_z)
        return np.stack([rc.rollout(r, z0, inputs)[0] for r in self._rens], -1)

    def save(self, out_dir, seed=None):
        out_dir = Path(out_dir)
        for s, p in zip(self.specs, self.params):
            rc.save_checkpoint(out_dir / f"filter_{s.sensor_index}.json",
                               self.dims, s, p, seed=seed)

    @classmethod
    def load(cls, in_dir) -> "FilterBank":
        files = sorted(Path(in_dir).glob("filter_*.json"),
                       key=lambda p: int(p.stem.split("_")[1]))
        if not files:
            raise FileNotFoundError(f"no filter checkpoints in {in_dir}")
        loaded = [rc.load_checkpoint(f) for f in files]
        dims = loaded[0][0]
        return cls(dims, [x[1] for x in loaded], [x[2] for x in loaded],
                   {"seeds": [x[3] for x in loaded]})


CLASS_ROWS = ((1,), (2,), (1, 2))


def scenario_rmse(residuals, faults, k0: int = 4) -> np.ndarray:
    """Per-filter RMSE over samples ``k >= k0``."""
    e = np.asarray(residuals)[..., k0:, :] - np.asarray(faults)[..., k0:, :]
    return np.sqrt(np.mean(e * e, axis=-2))


def evaluate_rmse(bank, scenarios, k0: int = 4, rows=CLASS_ROWS):
    """Mean RMSE table with one row per fault class and one column per filter.

    ``bank`` is a :class:`FilterBank` or any callable mapping a stacked input
    array ``(S, T, 6)`` to residuals ``(S, T, m)``.
    """
    scenarios = list(scenarios)
    for s in scenarios:
        if s.label is None:
            raise ValueError(f"scenario {s.id} is unlabeled")
    table = np.full((len(rows), N_SENSORS), np.nan)
    counts = []
    for r, label in enumerate(rows):
        members = [s for s in scenarios if tuple(s.label) == tuple(label)]
        counts.append(len(members))
        if not members:
            continue
        U = np.stack([filter_input(s) for s in members])
        F = np.stack([s.faults for s in members])
        res = bank.residuals(U) if hasattr(bank, "residuals") else bank(U)
        table[r] = scenario_rmse(res, F, k0).mean(0)
    return table, counts


def format_table(table, rows=CLASS_ROWS) -> str:
    names = ["Sensor " + " & ".join(map(str, r)) for r in rows]
    head = f"{'Fault scenario':<16}" + "".join(f"{'Filter ' + str(j + 1):>11}"
                                               for j in range(table.shape[1]))
    lines = [head]
    for n, row in zip(names, table):
        lines.append(f"{n:<16}" + "".join(f"{v:>11.4f}" for v in row))
    return "\n".join(lines)


def write_table_csv(path, table, rows=CLASS_ROWS):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario"] + [f"filter_{j + 1}" for j in range(table.shape[1])])
        for r, row in zip(rows, table):
            w.writerow(["+".join(map(str, r))] + [repr(float(v)) for v in row])


def load_train_config(path) -> TrainConfig:
    """Read a JSON training config; missing keys take the defaults."""
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))
