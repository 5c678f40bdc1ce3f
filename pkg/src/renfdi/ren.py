"""Robust acyclic recurrent equilibrium network (R-aREN) filters.

A filter maps the stacked input ``u_bar = col[u, y]`` to a scalar residual::

    z+ = A z + B1 w + B2 u_bar + bias_z
    v  = C1 z + D11 w + D12 u_bar + bias_v,    w = tanh(v)
    r  = C2 z + D21 w + D22 u_bar + bias_r

with ``D11`` strictly lower triangular, so ``v`` is solved by forward
substitution. The explicit weights are never trained directly; they are
produced by :func:`materialize` from unconstrained :class:`DirectParams`,
and every finite parameter vector yields a contracting filter satisfying the
incremental quadratic constraint defined by ``(Q, R)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

FORMAT_VERSION = "renfdi-filter/1"

DEFAULT_EPSILON = 1e-4
DEFAULT_ALPHA_BAR = 0.7
COND_LIMIT = 1e12

TRAINABLE = ("B2_imp", "C2", "D12_imp", "D21", "eta_tilde",
             "X3", "Y3", "Z3", "X", "Y1")


class CertificateError(RuntimeError):
    """A well-posedness certificate failed during materialization."""

    def __init__(self, certificate: str, detail: str):
        super().__init__(f"{certificate}: {detail}")
        self.certificate = certificate


@dataclass(frozen=True)
class RenDims:
    n_z: int
    n_v: int
    n_in: int
    n_out: int = 1

    def __post_init__(self):
        for name in ("n_z", "n_v", "n_in"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_out != 1:
            raise ValueError("only scalar residuals are supported (n_out == 1)")

    @property
    def n_x(self) -> int:
        """Side length of the ``H`` matrix, ``2 n_z + n_v``."""
        return 2 * self.n_z + self.n_v


@dataclass(frozen=True)
class PerformanceSpec:
    """Sensitivity weights of the filter for sensor ``sensor_index`` (1-based).

    ``beta`` weights the road inputs and the filter's own sensor, ``gamma`` the
    other sensors, and ``q`` the residual. Requires ``0 < gamma < q < beta``.
    """

    beta: float = 10000.0
    gamma: float = 1.0
    q: float = 100.0
    sensor_index: int = 1
    l: int = 2
    m: int = 4

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma > 0 and self.q > 0):
            raise ValueError("beta, gamma and q must be positive")
        if not (self.gamma < self.q < self.beta):
            raise ValueError(
                f"weights must satisfy gamma < q < beta, got "
                f"gamma={self.gamma}, q={self.q}, beta={self.beta}")
        if self.l < 1 or self.m < 1:
            raise ValueError("l and m must be >= 1")
        if not 1 <= self.sensor_index <= self.m:
            raise ValueError(f"sensor_index must lie in [1, {self.m}]")

    @property
    def n_in(self) -> int:
        return self.l + self.m

    def r_diagonal(self) -> np.ndarray:
        d = np.full(self.n_in, float(self.gamma))
        d[: self.l] = self.beta
        d[self.l + self.sensor_index - 1] = self.beta
        return d


def build_weight_spec(spec: PerformanceSpec) -> tuple[np.ndarray, float]:
    """Return ``(R, Q)`` with ``R = diag(beta I_l, gamma I_{i-1}, beta, gamma I_{m-i})``
    and ``Q = -q``."""
    return np.diag(spec.r_diagonal()), -float(spec.q)


@dataclass(frozen=True)
class DirectParams:
    B2_imp: np.ndarray
    C2: np.ndarray
    D12_imp: np.ndarray
    D21: np.ndarray
    eta_tilde: np.ndarray
    X3: np.ndarray
    Y3: np.ndarray
    Z3: np.ndarray
    X: np.ndarray
    Y1: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    alpha_bar: float = DEFAULT_ALPHA_BAR

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.alpha_bar <= 1:
            raise ValueError("alpha_bar must lie in (0, 1]")

    @classmethod
    def zeros(cls, dims: RenDims, epsilon=DEFAULT_EPSILON,
              alpha_bar=DEFAULT_ALPHA_BAR) -> "DirectParams":
        shapes = param_shapes(dims)
        return cls(**{k: np.zeros(s) for k, s in shapes.items()},
                   epsilon=epsilon, alpha_bar=alpha_bar)

    def trainables(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in TRAINABLE}

    def with_trainables(self, values: dict[str, np.ndarray]) -> "DirectParams":
        return replace(self, **{k: np.asarray(values[k], dtype=float)
                                for k in TRAINABLE})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, k)) for k in TRAINABLE])

    def from_vector(self, vec: np.ndarray) -> "DirectParams":
        vec = np.asarray(vec, dtype=float)
        out, pos = {}, 0
        for k in TRAINABLE:
            shape = np.shape(getattr(self, k))
            n = int(np.prod(shape))
            out[k] = vec[pos:pos + n].reshape(shape)
            pos += n
        if pos != vec.size:
            raise ValueError(f"expected {pos} entries, got {vec.size}")
        return self.with_trainables(out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.trainables().values())


def param_shapes(dims: RenDims) -> dict[str, tuple[int, ...]]:
    nz, nv, p = dims.n_z, dims.n_v, dims.n_in
    return {
        "B2_imp": (nz, p),
        "C2": (1, nz),
        "D12_imp": (nv, p),
        "D21": (1, nv),
        "eta_tilde": (nz + nv + 1,),
        "X3": (),
        "Y3": (),
        "Z3": (p - 1,),
        "X": (dims.n_x, dims.n_x),
        "Y1": (nz, nz),
    }


@dataclass(frozen=True)
class ExplicitRen:
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    C2: np.ndarray
    D21: np.ndarray
    D22: np.ndarray
    bias_z: np.ndarray
    bias_v: np.ndarray
    bias_r: float

    @property
    def n_z(self) -> int:
        return self.A.shape[0]

    @property
    def n_v(self) -> int:
        return self.D11.shape[0]

    @property
    def n_in(self) -> int:
        return self.B2.shape[1]


class Intermediates(NamedTuple):
    """Quantities produced on the way to the explicit weights.

    Kept for certificate reporting and for the reverse-mode pass.
    """

    M: float
    N: np.ndarray
    D22: np.ndarray
    r_tilde_chol: tuple
    G: np.ndarray
    K: np.ndarray
    H: np.ndarray
    lam: np.ndarray
    L: np.ndarray
    E: np.ndarray
    E_lu: tuple | None
    e_condition: float
    h_min_pivot: float
    h_posdef: bool


def _cayley_block(params: DirectParams, p: int):
    x3 = float(params.X3)
    z3 = np.asarray(params.Z3, dtype=float).reshape(p - 1)
    # The |Z3|^2 term keeps sigma_max(N) < 1 for every Z3.
    M = x3 * x3 + float(z3 @ z3) + params.epsilon
    N = np.empty(p)
    N[0] = (1.0 - M) / (1.0 + M)
    N[1:] = -2.0 * z3 / (1.0 + M)
    return M, N


def _forward_map(dims: RenDims, spec: PerformanceSpec, params: DirectParams,
                 strict: bool) -> tuple[ExplicitRen, Intermediates]:
    nz, nv, p = dims.n_z, dims.n_v, dims.n_in
    if p != spec.n_in:
        raise ValueError(f"dims.n_in={p} but spec has l+m={spec.n_in}")
    eps, abar = params.epsilon, params.alpha_bar
    q = float(spec.q)
    lr = np.sqrt(spec.r_diagonal())
    R = np.diag(spec.r_diagonal())

    M, N = _cayley_block(params, p)
    D22 = (N * lr / np.sqrt(q)).reshape(1, p)

    C2 = np.asarray(params.C2, dtype=float).reshape(1, nz)
    D21 = np.asarray(params.D21, dtype=float).reshape(1, nv)
    B2i = np.asarray(params.B2_imp, dtype=float)
    D12i = np.asarray(params.D12_imp, dtype=float)
    d = D22[0]
    C2t = -q * np.outer(d, C2[0])
    D21t = -q * np.outer(d, D21[0]) - D12i.T
    Rt = R - q * np.outer(d, d)
    Rt_chol = sla.cho_factor(Rt, lower=True)

    G = np.vstack([C2t.T, D21t.T, B2i])
    K = np.concatenate([C2[0], D21[0], np.zeros(nz)])
    X = np.asarray(params.X, dtype=float)
    H = X.T @ X + eps * np.eye(dims.n_x) + G @ sla.cho_solve(Rt_chol, G.T) \
        + q * np.outer(K, K)
    H = 0.5 * (H + H.T)

    try:
        h_chol = np.linalg.cholesky(H)
        h_min_pivot = float(np.min(np.diag(h_chol)) ** 2)
        h_posdef = True
    except np.linalg.LinAlgError:
        h_min_pivot = float(np.min(np.linalg.eigvalsh(H)))
        h_posdef = False
    if strict and not h_posdef:
        raise CertificateError("H positive definite",
                               f"Cholesky failed, min eigenvalue {h_min_pivot:.3e}")

    i1, i2 = nz, nz + nv
    H11, H21, H22 = H[:i1, :i1], H[i1:i2, :i1], H[i1:i2, i1:i2]
    H31, H32, H33 = H[i2:, :i1], H[i2:, i1:i2], H[i2:, i2:]
    phi = np.diag(H22).copy()
    L = -np.tril(H22, -1)
    lam = 0.5 * phi
    if strict and np.any(phi <= 0):
        raise CertificateError("Lambda positive",
                               f"min diagonal {float(phi.min()):.3e}")

    Y1 = np.asarray(params.Y1, dtype=float)
    E = 0.5 * (H11 + H33 / abar**2 + Y1 - Y1.T)
    e_condition = float(np.linalg.cond(E))
    if not np.isfinite(e_condition):
        e_condition = np.inf
    if strict and e_condition > COND_LIMIT:
        raise CertificateError("E invertible",
                               f"condition estimate {e_condition:.3e}")

    eta = np.asarray(params.eta_tilde, dtype=float)
    eta_z, eta_v, eta_r = eta[:nz], eta[nz:nz + nv], float(eta[nz + nv])
    E_lu = None
    if e_condition < np.inf:
        E_lu = sla.lu_factor(E)
        rhs = np.hstack([H31, H32, B2i, eta_z[:, None]])
        sol = sla.lu_solve(E_lu, rhs)
        A, B1, B2 = sol[:, :nz], sol[:, nz:nz + nv], sol[:, nz + nv:nz + nv + p]
        bias_z = sol[:, -1]
    else:
        A = np.full((nz, nz), np.nan)
        B1 = np.full((nz, nv), np.nan)
        B2 = np.full((nz, p), np.nan)
        bias_z = np.full(nz, np.nan)

    inv_lam = 1.0 / lam
    ren = ExplicitRen(
        A=A, B1=B1, B2=B2,
        C1=-H21 * inv_lam[:, None],
        D11=L * inv_lam[:, None],
        D12=D12i * inv_lam[:, None],
        C2=C2.copy(), D21=D21.copy(), D22=D22,
        bias_z=bias_z, bias_v=eta_v * inv_lam, bias_r=eta_r,
    )
    inter = Intermediates(M=M, N=N, D22=D22, r_tilde_chol=Rt_chol, G=G, K=K,
                          H=H, lam=lam, L=L, E=E, E_lu=E_lu,
                          e_condition=e_condition, h_min_pivot=h_min_pivot,
                          h_posdef=h_posdef)
    return ren, inter


def materialize(dims: RenDims, spec: PerformanceSpec,
                params: DirectParams) -> ExplicitRen:
    """Map free parameters to explicit filter weights.

    Raises :class:`CertificateError` if ``H`` is not positive definite, a
    diagonal entry of ``Lambda`` is not positive, or ``E`` is numerically
    singular. None of these can happen for finite parameters; a failure points
    at a bug, not at bad parameters.
    """
    if not params.is_finite():
        raise ValueError("direct parameters must be finite")
    ren, _ = _forward_map(dims, spec, params, strict=True)
    return ren


def materialize_with_intermediates(dims, spec, params, strict=True):
    return _forward_map(dims, spec, params, strict=strict)


def activation(v):
    """Entrywise ``tanh``: zero at the origin, slope in ``[0, 1]``."""
    return np.tanh(v)


def equilibrium(D11: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Solve ``w = tanh(base + w D11^T)`` by forward substitution.

    ``base`` has shape ``(..., n_v)``; row ``k`` of ``D11`` only reaches
    neurons ``0..k-1``.
    """
    w = np.zeros_like(base)
    w[..., 0] = np.tanh(base[..., 0])
    for k in range(1, base.shape[-1]):
        w[..., k] = np.tanh(base[..., k] + w[..., :k] @ D11[k, :k])
    return w


def step(ren: ExplicitRen, z, u_bar):
    """One filter update. Returns ``(z_next, r, w)``."""
    z = np.asarray(z, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    base = ren.C1 @ z + ren.D12 @ u_bar + ren.bias_v
    w = equilibrium(ren.D11, base)
    r = float(ren.C2[0] @ z + ren.D21[0] @ w + ren.D22[0] @ u_bar + ren.bias_r)
    z_next = ren.A @ z + ren.B1 @ w + ren.B2 @ u_bar + ren.bias_z
    return z_next, r, w


def rollout(ren: ExplicitRen, z0, inputs):
    """Run the filter over an input sequence.

    ``inputs`` has shape ``(T, n_in)`` or ``(batch, T, n_in)``; ``z0`` has
    shape ``(n_z,)`` or ``(batch, n_z)``. ``residuals[..., k]`` is the output
    at sample ``k`` (before the update) and ``states[..., k, :]`` the state
    after it.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape[-2] == 0:
        raise ValueError("input sequence is empty")
    batched = inputs.ndim == 3
    U = inputs if batched else inputs[None]
    B, T, _ = U.shape
    z = np.broadcast_to(np.asarray(z0, dtype=float), (B, ren.n_z)).copy()
    residuals = np.empty((B, T))
    states = np.empty((B, T, ren.n_z))
    # input contributions for all samples at once
    uv = U @ ren.D12.T + ren.bias_v
    uz = U @ ren.B2.T + ren.bias_z
    ur = U @ ren.D22[0] + ren.bias_r
    for k in range(T):
        w = equilibrium(ren.D11, z @ ren.C1.T + uv[:, k])
        residuals[:, k] = z @ ren.C2[0] + w @ ren.D21[0] + ur[:, k]
        z = z @ ren.A.T + w @ ren.B1.T + uz[:, k]
        states[:, k] = z
    if not batched:
        return residuals[0], states[0]
    return residuals, states


def init_params(dims: RenDims, spec: PerformanceSpec, seed: int, scale: float = 1.0,
                epsilon: float = DEFAULT_EPSILON,
                alpha_bar: float = DEFAULT_ALPHA_BAR) -> DirectParams:
    """Draw trainable fields from ``N(0, scale^2 / fan_in)``.

    ``scale=0`` gives all-zero trainables.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    fan_in = {
        "B2_imp": dims.n_in, "C2": dims.n_z, "D12_imp": dims.n_in,
        "D21": dims.n_v, "eta_tilde": dims.n_z + dims.n_v + 1, "X3": 1,
        "Y3": 1, "Z3": dims.n_in, "X": dims.n_x, "Y1": dims.n_z,
    }
    values = {}
    for k, shape in param_shapes(dims).items():
        values[k] = scale / np.sqrt(fan_in[k]) * rng.standard_normal(shape)
    return DirectParams(**values, epsilon=epsilon, alpha_bar=alpha_bar)


def _to_nested(a):
    a = np.asarray(a, dtype=np.float64)
    return float(a) if a.ndim == 0 else a.tolist()


def save_checkpoint(path, dims: RenDims, spec: PerformanceSpec,
                    params: DirectParams, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    doc = {
        "format_version": FORMAT_VERSION,
        "dims": {"n_z": dims.n_z, "n_v": dims.n_v, "n_in": dims.n_in,
                 "n_out": dims.n_out},
        "spec": {"beta": spec.beta, "gamma": spec.gamma, "q": spec.q,
                 "sensor_index": spec.sensor_index, "l": spec.l, "m": spec.m},
        "alpha_bar": params.alpha_bar,
        "epsilon": params.epsilon,
        "seed": seed,
        "params": {k: _to_nested(getattr(params, k)) for k in TRAINABLE},
    }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_checkpoint(path):
    """Read a filter checkpoint. Returns ``(dims, spec, params, seed)``."""
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r} in {path}")
    dims = RenDims(**doc["dims"])
    spec = PerformanceSpec(**doc["spec"])
    shapes = param_shapes(dims)
    values = {}
    for k in TRAINABLE:
        a = np.array(doc["params"][k], dtype=np.float64)
        if a.shape != shapes[k]:
            raise ValueError(f"{path}: field {k} has shape {a.shape}, "
                             f"expected {shapes[k]}")
        values[k] = a
    params = DirectParams(**values, epsilon=float(doc["epsilon"]),
                          alpha_bar=float(doc["alpha_bar"]))
    return dims, spec, params, doc.get("seed")


def explicit_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(ExplicitRen))
