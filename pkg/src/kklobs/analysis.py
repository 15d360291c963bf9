"""Error-bound certificates, constant estimation, SMAPE, benchmark harness.

The worst-case certificate evaluates

    ||x(t) - xhat(t)|| <= eps_dec + l_dec * (kappa e^{-lam t} ||xi_z(0)||
                          + eps_pde * kappa / lam + eps_enc)

with the unobservable (eps_enc, eps_dec) pair replaced by the computable
round-trip proxy: eps_enc <- 0 and eps_dec <- eps_rt = sup ||x - T*(T(x))||.
All epsilon-constants are maxima over a declared evaluation grid plus the
states visited by test trajectories, so the certificate is empirical, not
a proof.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import networks as nets
from . import rng as rngmod
from .diffcore import Graph
from .diffcore import jvp as graph_jvp
from .dynamics import (
    SystemSpec,
    Trajectory,
    add_noise,
    integrate,
    sample_initial_condition,
    sample_input,
)
from .observer import (
    ModelBundle,
    check_matrices,
    modulated_forward_batch,
    pde_residual_batch,
    run_observer,
    sliding_windows,
)

__all__ = [
    "BoundConstants",
    "SmapeReport",
    "smape",
    "estimate_constants",
    "worst_case_bound",
    "asymptotic_bound",
    "noisy_bound",
    "run_benchmark",
    "smape_report_csv",
    "smape_report_json",
]

REGIMES = ("zero", "constant", "sinusoid", "square")
SMAPE_EPS = 1e-8
SMAPE_CAP = 200.0


def smape(truth: np.ndarray, estimate: np.ndarray, times: np.ndarray | None = None,
          t_skip: float = 0.0) -> float:
    """Symmetric mean absolute percentage error, in percent (range [0, 200]).

    Computed over all state components and all grid times >= t_skip.
    """
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {estimate.shape}")
    if times is not None:
        mask = np.asarray(times) >= t_skip
        truth = truth[mask]
        estimate = estimate[mask]
    num = 2.0 * np.abs(truth - estimate)
    den = np.abs(truth) + np.abs(estimate) + SMAPE_EPS
    return float(100.0 * np.mean(num / den))


# -- bound constants ----------------------------------------------------------

@dataclass
class BoundConstants:
    kappa: float
    lam: float
    eps_pde: float
    eps_rt: float
    l_dec: float
    l_enc: float
    B_norm: float
    w_bar: float = 0.0
    v_bar: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BoundConstants":
        return cls(**d)


def _state_lattice(spec: SystemSpec, visited: np.ndarray | None, per_axis: int | None) -> np.ndarray:
    """Lattice over the IC box, inflated to cover visited states."""
    lo = np.array([b[0] for b in spec.x0_box])
    hi = np.array([b[1] for b in spec.x0_box])
    if visited is not None and visited.size:
        lo = np.minimum(lo, visited.min(axis=0))
        hi = np.maximum(hi, visited.max(axis=0))
    if per_axis is None:
        per_axis = 50 if spec.n_x <= 2 else 20
    axes = [np.linspace(lo[d], hi[d], per_axis) for d in range(spec.n_x)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _jacobian_sigma_max(forward_graph, binds, in_name: str, x_batch: np.ndarray,
                        out_dim: int, iterations: int = 30) -> np.ndarray:
    """Top singular value of d(out)/d(in) at every batch row.

    Builds the full (small) Jacobian column-by-column with batched forward
    jvps, then runs batched power iteration on J^T J.
    """
    n, d_in = x_batch.shape
    cols = []
    for j in range(d_in):
        e = np.zeros((n, d_in))
        e[:, j] = 1.0
        cols.append(graph_jvp(forward_graph, binds, in_name, e))
    J = np.stack(cols, axis=2)  # (n, out_dim, d_in)
    v = np.full((n, d_in), 1.0 / math.sqrt(d_in))
    for _ in range(iterations):
        u = np.einsum("nod,nd->no", J, v)
        nu = np.linalg.norm(u, axis=1, keepdims=True)
        u = u / np.maximum(nu, 1e-300)
        v = np.einsum("nod,no->nd", J, u)
        nv = np.linalg.norm(v, axis=1, keepdims=True)
        v = v / np.maximum(nv, 1e-300)
    return np.linalg.norm(np.einsum("nod,nd->no", J, v), axis=1)


def _static_mlp_graph(w: nets.MlpWeights, batch: int, prefix: str, in_name: str):
    g = Graph()
    x = g.leaf(in_name, (batch, w.dims[0]))
    layers = nets.mlp_leaves(g, prefix, w.dims)
    g.output(nets.build_mlp(g, x, layers))
    return g


def estimate_constants(bundle: ModelBundle, test_trajectories: list[Trajectory],
                       n_inputs: int = 16, per_axis: int | None = None,
                       w_bar: float = 0.0, v_bar: float = 0.0,
                       traj_stride: int = 2, chunk: int = 4096,
                       input_levels: np.ndarray | None = None) -> BoundConstants:
    """Empirical constants over a state lattice plus the test trajectories.

    The lattice is crossed with ``n_inputs`` constant input levels spanning
    [-1, 1] (constant-valued windows for the time-varying variant);
    trajectory samples additionally contribute their true windows and
    window derivatives. ``input_levels`` overrides the default levels, e.g.
    ``[0.0]`` for a purely autonomous certificate.
    """
    spec = bundle.spec()
    visited = (np.concatenate([t.states for t in test_trajectories], axis=0)
               if test_trajectories else None)
    grid = _state_lattice(spec, visited, per_axis)
    u_levels = (np.linspace(-1.0, 1.0, n_inputs) if input_levels is None
                else np.asarray(input_levels, dtype=np.float64))

    needs_windows = bundle.variant == "dyn"
    omega = bundle.omega
    eps_pde = 0.0
    eps_rt = 0.0
    states_for_lip = []
    windows_for_lip = []

    # lattice x input levels (constant windows: zero temporal derivative)
    for u in u_levels:
        for s in range(0, grid.shape[0], chunk):
            xs = grid[s:s + chunk]
            us = np.full((xs.shape[0], spec.n_u), u)
            if needs_windows:
                win = np.broadcast_to(us[:, None, :], (xs.shape[0], omega, spec.n_u)).copy()
                r = pde_residual_batch(bundle, xs, us, win, win)
                rt = xs - _roundtrip(bundle, xs, win)
            else:
                r = pde_residual_batch(bundle, xs, us)
                rt = xs - _roundtrip(bundle, xs, None)
            eps_pde = max(eps_pde, float(np.linalg.norm(r, axis=1).max()))
            eps_rt = max(eps_rt, float(np.linalg.norm(rt, axis=1).max()))
    states_for_lip.append(grid[:: max(1, grid.shape[0] // 512)])
    if needs_windows:
        mid = np.zeros((states_for_lip[-1].shape[0], omega, spec.n_u))
        windows_for_lip.append(mid)

    # trajectory samples with true windows
    for traj in test_trajectories:
        wins = sliding_windows(traj.inputs, omega)
        ks = np.arange(0, traj.times.shape[0] - 1, traj_stride)
        xs = traj.states[ks]
        us = traj.inputs[ks]
        if needs_windows:
            r = pde_residual_batch(bundle, xs, us, wins[ks], wins[ks + 1])
            rt = xs - _roundtrip(bundle, xs, wins[ks])
        else:
            r = pde_residual_batch(bundle, xs, us)
            rt = xs - _roundtrip(bundle, xs, None)
        eps_pde = max(eps_pde, float(np.linalg.norm(r, axis=1).max()))
        eps_rt = max(eps_rt, float(np.linalg.norm(rt, axis=1).max()))
        states_for_lip.append(xs[:: max(1, xs.shape[0] // 64)])
        if needs_windows:
            windows_for_lip.append(wins[ks][:: max(1, xs.shape[0] // 64)])

    lip_states = np.concatenate(states_for_lip, axis=0)
    lip_wins = np.concatenate(windows_for_lip, axis=0) if needs_windows else None
    l_enc, l_dec = _lipschitz_estimates(bundle, lip_states, lip_wins)

    rep = check_matrices(bundle.matrices)
    B_norm = float(np.linalg.svd(bundle.matrices.B, compute_uv=False)[0])
    return BoundConstants(rep.kappa, rep.lam, eps_pde, eps_rt, l_dec, l_enc,
                          B_norm, w_bar, v_bar)


def _roundtrip(bundle: ModelBundle, x: np.ndarray, windows: np.ndarray | None) -> np.ndarray:
    if bundle.variant != "dyn":
        return nets.mlp_forward(bundle.decoder, nets.mlp_forward(bundle.encoder, x))
    contexts = nets.hyper_context(bundle.hyper, windows)
    facs = nets.hyper_factors(bundle.hyper, contexts)
    enc_f = [facs[i] for i in bundle.encoder_layer_indices()]
    dec_f = [facs[i] for i in bundle.decoder_layer_indices()]
    z = modulated_forward_batch(bundle.encoder, enc_f, bundle.hyper.scale, x)
    return modulated_forward_batch(bundle.decoder, dec_f, bundle.hyper.scale, z)


def _lipschitz_estimates(bundle: ModelBundle, states: np.ndarray,
                         windows: np.ndarray | None) -> tuple[float, float]:
    """Max encoder/decoder Jacobian spectral norms over the sampled states.

    For the time-varying variant the Jacobians are taken at the modulated
    weights induced by each sample's window.
    """
    n = states.shape[0]
    if bundle.variant != "dyn":
        g_enc = _static_mlp_graph(bundle.encoder, n, "enc", "x")
        binds = {"x": states}
        binds.update(nets.mlp_params(bundle.encoder, "enc"))
        l_enc = float(_jacobian_sigma_max(g_enc, binds, "x", states, bundle.n_z).max())
        z = nets.mlp_forward(bundle.encoder, states)
        g_dec = _static_mlp_graph(bundle.decoder, n, "dec", "z")
        dbinds = {"z": z}
        dbinds.update(nets.mlp_params(bundle.decoder, "dec"))
        l_dec = float(_jacobian_sigma_max(g_dec, dbinds, "z", z, states.shape[1]).max())
        return l_enc, l_dec

    contexts = nets.hyper_context(bundle.hyper, windows)
    facs = nets.hyper_factors(bundle.hyper, contexts)
    s = bundle.hyper.scale
    l_enc = l_dec = 0.0
    enc_f = [facs[i] for i in bundle.encoder_layer_indices()]
    dec_f = [facs[i] for i in bundle.decoder_layer_indices()]
    z = modulated_forward_batch(bundle.encoder, enc_f, s, states)
    for i in range(n):
        enc_i = nets.apply_delta(bundle.encoder,
                                 [nets.LowRankDelta(a[i], b[i], s) for a, b in enc_f])
        dec_i = nets.apply_delta(bundle.decoder,
                                 [nets.LowRankDelta(a[i], b[i], s) for a, b in dec_f])
        l_enc = max(l_enc, _mlp_sigma(enc_i, states[i]))
        l_dec = max(l_dec, _mlp_sigma(dec_i, z[i]))
    return l_enc, l_dec


def _mlp_sigma(w: nets.MlpWeights, x: np.ndarray, iterations: int = 30) -> float:
    """Spectral norm of the MLP Jacobian at one point (exact chain product)."""
    J = None
    h = x
    last = len(w.layers) - 1
    for i, (W, b) in enumerate(w.layers):
        pre = h @ W + b
        Ji = W.T if J is None else W.T @ J
        if i < last:
            h = np.tanh(pre)
            Ji = (1.0 - h * h)[:, None] * Ji
        else:
            h = pre
        J = Ji
    # batched power iteration is overkill for one small matrix
    return float(np.linalg.svd(J, compute_uv=False)[0])


# -- certificates --------------------------------------------------------------

def worst_case_bound(c: BoundConstants, xi_z0_norm: float, t) -> np.ndarray | float:
    """Worst-case estimation-error certificate at time(s) t."""
    t = np.asarray(t, dtype=np.float64)
    out = c.eps_rt + c.l_dec * (c.kappa * np.exp(-c.lam * t) * xi_z0_norm
                                + c.eps_pde * c.kappa / c.lam)
    return float(out) if out.ndim == 0 else out


def asymptotic_bound(c: BoundConstants) -> float:
    return c.eps_rt + c.l_dec * c.eps_pde * c.kappa / c.lam


def noisy_bound(c: BoundConstants) -> float:
    """Asymptotic certificate with bounded process/measurement noise."""
    k_over_l = c.kappa / c.lam
    return c.eps_rt + c.l_dec * (c.eps_pde * k_over_l
                                 + k_over_l * c.l_enc * c.w_bar
                                 + k_over_l * c.B_norm * c.v_bar)


# -- benchmark harness -----------------------------------------------------------

@dataclass
class SmapeReport:
    system: str
    seed: int
    n_trials: int
    t_skip: float
    noise_var: float
    regimes: list[str]
    variants: list[str]
    trials: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    # trials[variant][regime] = per-trial SMAPE list

    def mean(self, variant: str, regime: str) -> float:
        return float(np.mean(self.trials[variant][regime]))

    def to_dict(self) -> dict:
        return {
            "system": self.system, "seed": self.seed, "n_trials": self.n_trials,
            "t_skip": self.t_skip, "noise_var": self.noise_var,
            "regimes": self.regimes, "variants": self.variants,
            "trials": self.trials,
            "means": {v: {r: self.mean(v, r) for r in self.regimes} for v in self.variants},
            "note": ("certificate proxy: eps_dec <- round-trip sup, eps_enc <- 0; "
                     "SMAPE excludes the observer transient before t_skip"),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SmapeReport":
        return cls(d["system"], d["seed"], d["n_trials"], d["t_skip"], d["noise_var"],
                   list(d["regimes"]), list(d["variants"]),
                   {v: {r: list(x) for r, x in rr.items()} for v, rr in d["trials"].items()})


def run_benchmark(bundles: dict[str, ModelBundle], spec: SystemSpec,
                  regimes: list[str], n_trials: int, noise_var: float,
                  seed: int, t_skip: float = 5.0, T: float = 50.0,
                  dt: float = 0.05) -> SmapeReport:
    """Per (regime, trial): fresh IC and input realization, noisy truth,
    every variant's observer from zhat = 0, SMAPE after the transient.

    Divergent or non-finite estimates score the 200-percent cap instead of
    aborting the run.
    """
    variants = list(bundles)
    report = SmapeReport(spec.name, seed, n_trials, t_skip, noise_var,
                         list(regimes), variants,
                         {v: {r: [] for r in regimes} for v in variants})
    for regime in regimes:
        for trial in range(n_trials):
            r = rngmod.derive(seed, "eval", regime, trial)
            x0 = sample_initial_condition(spec, r)
            signal = sample_input(regime, r, spec.n_u)
            clean = integrate(spec, x0, signal, T, dt)
            measured = add_noise(clean, noise_var, r, spec)
            for v in variants:
                try:
                    trace = run_observer(bundles[v], measured)
                    if not np.all(np.isfinite(trace.xhat)):
                        raise FloatingPointError("non-finite estimate")
                    val = smape(measured.states, trace.xhat, measured.times, t_skip)
                    val = min(val, SMAPE_CAP)
                except FloatingPointError:
                    val = SMAPE_CAP
                report.trials[v][regime].append(val)
    return report


def smape_report_csv(report: SmapeReport, path) -> None:
    """Table layout: one row per variant, one column per regime (means)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("system,variant," + ",".join(report.regimes) + "\n")
        for v in report.variants:
            cells = ",".join(f"{report.mean(v, r):.3f}" for r in report.regimes)
            fh.write(f"{report.system},{v},{cells}\n")


def smape_report_json(report: SmapeReport, path, extra: dict | None = None) -> None:
    d = report.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=1, sort_keys=True)
        fh.write("\n")
