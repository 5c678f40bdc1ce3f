"""Executable checks of the filter guarantees.

Each check runs paired rollouts and reports margins instead of raising:
well-posedness certificates of the parameter map, contraction of paired state
trajectories, the incremental quadratic constraint, and the fault sensitivity
and insensitivity bounds it implies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ren as rc

BOUND_RTOL = 1e-6
IQC_RTOL = 1e-8
CONTRACTION_MARGIN = 0.02
CONVERGED_FRACTION = 1e-10


@dataclass(frozen=True)
class WellPosednessReport:
    h_posdef: bool
    h_min_pivot: float
    lambda_positive: bool
    lambda_min: float
    e_condition: float
    d11_strictly_lower: bool
    n_norm: float

    @property
    def passed(self) -> bool:
        return (self.h_posdef and self.lambda_positive and self.d11_strictly_lower
                and self.e_condition < rc.COND_LIMIT and self.n_norm < 1.0)


def wellposedness_report(ren: rc.ExplicitRen,
                         inter: rc.Intermediates) -> WellPosednessReport:
    upper = np.triu(ren.D11)
    return WellPosednessReport(
        h_posdef=bool(inter.h_posdef),
        h_min_pivot=float(inter.h_min_pivot),
        lambda_positive=bool(np.all(inter.lam > 0)),
        lambda_min=float(np.min(inter.lam)),
        e_condition=float(inter.e_condition),
        d11_strictly_lower=bool(np.all(upper == 0) and np.all(np.isfinite(ren.D11))),
        n_norm=float(np.linalg.norm(inter.N, 2)),
    )


def check_wellposed(dims, spec, params) -> WellPosednessReport:
    """Materialize and report every certificate; never raises on a failure."""
    if not params.is_finite():
        raise ValueError("direct parameters must be finite")
    ren, inter = rc.materialize_with_intermediates(dims, spec, params, strict=False)
    return wellposedness_report(ren, inter)


@dataclass(frozen=True)
class ContractionResult:
    ratios: np.ndarray
    geometric_mean: float
    converged_at: int | None
    distances: np.ndarray
    passed: bool

    @property
    def converged(self) -> bool:
        return self.converged_at is not None


def contraction_test(ren, inputs, z0_a, z0_b, alpha_bar=rc.DEFAULT_ALPHA_BAR,
                     margin=CONTRACTION_MARGIN) -> ContractionResult:
    """Paired rollouts from two initial states under the same input.

    ``ratios[k] = |dz(k+1)| / |dz(k)|`` in the Euclidean norm, counted while
    the distance is above ``1e-10 |dz(0)|``. Passes when the geometric mean of
    the counted ratios is at most ``alpha_bar + margin``.
    """
    z0_a = np.asarray(z0_a, dtype=float)
    z0_b = np.asarray(z0_b, dtype=float)
    if np.array_equal(z0_a, z0_b):
        raise ValueError("degenerate contraction test: identical initial states")
    _, sa = rc.rollout(ren, z0_a, inputs)
    _, sb = rc.rollout(ren, z0_b, inputs)
    d = np.concatenate([[np.linalg.norm(z0_a - z0_b)],
                        np.linalg.norm(sa - sb, axis=1)])
    floor = CONVERGED_FRACTION * d[0]
    below = np.nonzero(d[1:] < floor)[0]
    converged_at = int(below[0]) + 1 if below.size else None
    stop = converged_at if converged_at is not None else len(d) - 1
    ratios = d[1:stop + 1] / d[:stop]
    if np.any(ratios == 0):
        gm = 0.0
    else:
        gm = float(np.exp(np.mean(np.log(ratios))))
    return ContractionResult(ratios, gm, converged_at, d, gm <= alpha_bar + margin)


@dataclass(frozen=True)
class IqcGap:
    gaps: np.ndarray
    min_gap: float
    energy: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.min_gap >= -self.tol


def iqc_gap(ren, spec: rc.PerformanceSpec, input_a, input_b, z0=None) -> IqcGap:
    """Truncated incremental quadratic constraint between two input sequences.

    ``gaps[k_f] = -q |dr|^2 + beta |du|^2 + gamma |dy_before|^2
    + beta |dy_i|^2 + gamma |dy_after|^2``, all summed over ``k <= k_f``.
    Both rollouts start from the same ``z0``, so every gap should be
    non-negative.
    """
    a = np.asarray(input_a, dtype=float)
    b = np.asarray(input_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"input length mismatch: {a.shape} vs {b.shape}")
    z0 = np.zeros(ren.n_z) if z0 is None else np.asarray(z0, dtype=float)
    ra, _ = rc.rollout(ren, z0, a)
    rb, _ = rc.rollout(ren, z0, b)
    du = b - a
    l, i = spec.l, spec.sensor_index
    parts = (
        spec.beta * np.sum(du[:, :l] ** 2, 1),
        spec.gamma * np.sum(du[:, l:l + i - 1] ** 2, 1),
        spec.beta * du[:, l + i - 1] ** 2,
        spec.gamma * np.sum(du[:, l + i:] ** 2, 1),
    )
    supply = np.cumsum(sum(parts))
    gaps = supply - spec.q * np.cumsum((rb - ra) ** 2)
    energy = float(supply[-1])
    return IqcGap(gaps, float(gaps.min()), energy, IQC_RTOL * energy)


@dataclass(frozen=True)
class BoundCheck:
    lhs: np.ndarray
    rhs: np.ndarray
    gain: float

    @property
    def worst_margin(self) -> float:
        return float(np.min(self.rhs - self.lhs))

    @property
    def relative_margin(self) -> float:
        """Smallest ``1 - lhs/rhs`` over truncations with a nonzero bound."""
        live = self.rhs > 0
        if not np.any(live):
            return 0.0 if np.all(self.lhs == 0) else -np.inf
        return float(np.min(1.0 - self.lhs[live] / self.rhs[live]))

    @property
    def passed(self) -> bool:
        return bool(np.all(self.lhs <= self.rhs * (1.0 + BOUND_RTOL)))


def _truncated_norm(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    sq = x * x if x.ndim == 1 else np.sum(x * x, axis=1)
    return np.sqrt(np.cumsum(sq))


def _residual_increment(ren, healthy, faulty, z0):
    z0 = np.zeros(ren.n_z) if z0 is None else np.asarray(z0, dtype=float)
    r1, _ = rc.rollout(ren, z0, healthy)
    r2, _ = rc.rollout(ren, z0, faulty)
    return r2 - r1


def sensitivity_bound_check(ren, spec: rc.PerformanceSpec, healthy_inputs,
                            fault_i, z0=None) -> BoundCheck:
    """``|dr|_kf <= sqrt(beta/q) |f_i|_kf`` for a fault on the filter's own
    sensor, at every truncation ``k_f``."""
    healthy = np.asarray(healthy_inputs, dtype=float)
    fault_i = np.asarray(fault_i, dtype=float)
    if fault_i.shape != (healthy.shape[0],):
        raise ValueError(f"fault length {fault_i.shape} does not match "
                         f"{healthy.shape[0]} input samples")
    faulty = healthy.copy()
    faulty[:, spec.l + spec.sensor_index - 1] += fault_i
    dr = _residual_increment(ren, healthy, faulty, z0)
    gain = float(np.sqrt(spec.beta / spec.q))
    return BoundCheck(_truncated_norm(dr), gain * _truncated_norm(fault_i), gain)


def insensitivity_bound_check(ren, spec: rc.PerformanceSpec, healthy_inputs,
                              fault_other, z0=None) -> BoundCheck:
    """``|dr|_kf <= sqrt(gamma/q) |f~|_kf`` for faults on the other sensors.

    ``fault_other`` has one column per sensor; the filter's own column must be
    identically zero.
    """
    healthy = np.asarray(healthy_inputs, dtype=float)
    f = np.asarray(fault_other, dtype=float)
    if f.shape != (healthy.shape[0], spec.m):
        raise ValueError(f"fault shape {f.shape} does not match "
                         f"({healthy.shape[0]}, {spec.m})")
    if np.any(f[:, spec.sensor_index - 1] != 0):
        raise ValueError("the filter's own sensor must carry no fault")
    faulty = healthy.copy()
    faulty[:, spec.l:] += f
    dr = _residual_increment(ren, healthy, faulty, z0)
    gain = float(np.sqrt(spec.gamma / spec.q))
    return BoundCheck(_truncated_norm(dr), gain * _truncated_norm(f), gain)


def _random_fault(rng, n, spec_ms):
    from .signals import draw_multisine, evaluate_multisine
    draw = draw_multisine(spec_ms, rng)
    f = evaluate_multisine(draw, np.arange(n) / spec_ms.sample_rate)
    f[: int(rng.integers(0, n))] = 0.0
    return f


def run_suite(dims, specs, params_list, healthy_inputs, seed=0, trials=100,
              contraction_pairs=20):
    """Run every property check on a bank of filters.

    ``healthy_inputs`` is an array ``(S, T, n_in)`` of fault-free filter
    inputs used as the base signals. Returns one record per check with the
    keys ``name``, ``seed``, ``pass`` and ``worst_margin``. Margins of the
    IQC and the bounds are relative (gap over supplied energy, ``1 - lhs/rhs``).
    """
    from .signals import FAULT_SPEC, make_rng

    healthy_inputs = np.asarray(healthy_inputs, dtype=float)
    S, T, _ = healthy_inputs.shape
    records = []
    for spec, params in zip(specs, params_list):
        i = spec.sensor_index
        tag = f"filter_{i}"
        wp = check_wellposed(dims, spec, params)
        records.append({"name": f"{tag}/wellposed", "seed": seed,
                        "pass": wp.passed,
                        "worst_margin": min(wp.h_min_pivot, wp.lambda_min,
                                            1.0 - wp.n_norm)})
        ren = rc.materialize(dims, spec, params)

        rng = make_rng(seed, i, 0)
        ok, worst = True, -np.inf
        for _ in range(contraction_pairs):
            u = healthy_inputs[rng.integers(S)]
            c = contraction_test(ren, u, rng.standard_normal(dims.n_z),
                                 rng.standard_normal(dims.n_z),
                                 alpha_bar=params.alpha_bar)
            ok &= c.passed and c.converged
            worst = max(worst, c.geometric_mean)
        records.append({"name": f"{tag}/contraction", "seed": seed, "pass": bool(ok),
                        "worst_margin": float(params.alpha_bar + CONTRACTION_MARGIN
                                              - worst)})

        rng = make_rng(seed, i, 1)
        iqc_ok, iqc_worst = True, np.inf
        sens_ok, sens_worst = True, np.inf
        ins_ok, ins_worst = True, np.inf
        implied_ok = True
        for _ in range(trials):
            base = healthy_inputs[rng.integers(S)]
            other = healthy_inputs[rng.integers(S)]
            g = iqc_gap(ren, spec, base, other)
            iqc_ok &= g.passed
            if g.energy > 0:
                iqc_worst = min(iqc_worst, g.min_gap / g.energy)

            f_i = _random_fault(rng, T, FAULT_SPEC)
            b = sensitivity_bound_check(ren, spec, base, f_i)
            f_o = np.zeros((T, spec.m))
            others = [j for j in range(spec.m) if j != i - 1]
            hit = [j for j in others if rng.random() < 0.7] or [rng.choice(others)]
            for j in hit:
                f_o[:, j] = _random_fault(rng, T, FAULT_SPEC)
            bo = insensitivity_bound_check(ren, spec, base, f_o)
            sens_ok &= b.passed
            ins_ok &= bo.passed
            sens_worst = min(sens_worst, b.relative_margin)
            ins_worst = min(ins_worst, bo.relative_margin)

            # the bounds are the IQC restricted to one channel group
            gi = iqc_gap(ren, spec, base, base + _embed(spec, f_i=f_i))
            go = iqc_gap(ren, spec, base, base + _embed(spec, f_other=f_o))
            if gi.passed and not b.passed or go.passed and not bo.passed:
                implied_ok = False
        records += [
            {"name": f"{tag}/iqc", "seed": seed, "pass": bool(iqc_ok),
             "worst_margin": float(iqc_worst)},
            {"name": f"{tag}/sensitivity", "seed": seed, "pass": bool(sens_ok),
             "worst_margin": float(sens_worst)},
            {"name": f"{tag}/insensitivity", "seed": seed, "pass": bool(ins_ok),
             "worst_margin": float(ins_worst)},
            {"name": f"{tag}/iqc_implies_bounds", "seed": seed,
             "pass": bool(implied_ok), "worst_margin": 0.0},
        ]
    return records


def _embed(spec, f_i=None, f_other=None):
    n = len(f_i) if f_i is not None else f_other.shape[0]
    d = np.zeros((n, spec.n_in))
    if f_i is not None:
        d[:, spec.l + spec.sensor_index - 1] = f_i
    if f_other is not None:
        d[:, spec.l:] = f_other
    return d
