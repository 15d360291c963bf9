"""Dataset construction and the four training procedures.

Phase 1 pretrains the base encoder on co-simulated autonomous latent
targets with a warmed-up PDE penalty, then fits the decoder on the frozen
encoder's outputs. Phase 2 trains either the latent-injection network
(dynamics matching) or the hypernetwork (reconstruction + dynamic PDE
residual) with the base weights frozen. The curriculum baseline instead
fine-tunes copies of the base maps on forced data in stages of increasing
input complexity.

All mini-batch losses are means over the batch of squared norms. Batch
order, weight init and data generation draw from named rng streams, so a
fixed (seed, config) reproduces training bitwise.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import networks as nets
from . import rng as rngmod
from .diffcore import (
    AdamState,
    CosineSchedule,
    Graph,
    PlateauSchedule,
    Var,
    adam_step,
    clip_global_norm,
    evaluate,
    global_norm,
    gradient,
)
from .dynamics import (
    SystemSpec,
    integrate,
    integrate_ode,
    sample_initial_condition,
    sample_input,
)
from .observer import ObserverMatrices, check_matrices

__all__ = [
    "TrainConfig",
    "TrainingDivergence",
    "DatasetSample",
    "AutonomousDataset",
    "ForcedDataset",
    "build_autonomous_dataset",
    "build_forced_dataset",
    "nu_schedule",
    "burn_in_steps",
    "train_phase1",
    "train_obs",
    "train_dyn",
    "train_curriculum",
    "encoder_loss_graph",
    "decoder_loss_graph",
    "obs_loss_graph",
    "dyn_loss_graph",
    "encoder_targets",
    "encoder_time_derivatives",
    "write_metrics_log",
]

FORCED_KINDS = ("constant", "sinusoid", "square")


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; carries the diagnostic context."""


@dataclass
class TrainConfig:
    """Every knob the data generation and trainers consume.

    Defaults are the desk-scale Duffing configuration: the full pipeline
    fits in well under 30 minutes on one CPU core. ``batches_per_epoch_*``
    caps the number of mini-batches visited per epoch (None = full pass);
    the forced dataset is large enough that uncapped phase-2 epochs would
    dominate the budget without measurably better observers.
    """

    seed: int = 0
    # data generation
    n_traj: int = 20
    n_inp: int = 15
    T: float = 50.0
    dt: float = 0.05
    omega: int = 100
    # Training initial conditions may be drawn from an inflated box so that
    # contracting systems still cover the nominal domain after burn-in; the
    # burn-in time may be overridden for the same reason.
    ic_scale: float = 1.0
    burn_time: float | None = None
    # network sizes
    hidden: int = 150
    n_hidden_layers: int = 3
    gru_hidden: int = 64
    d_ell: int = 16
    injection_hidden: int = 64
    embed_dim: int = 16
    backbone_hidden: int = 128
    rank: int = 4
    scale_init: float = 0.01
    # optimization
    epochs_enc: int = 200          # E1
    epochs_dec: int = 200          # E2
    epochs_phase2: int = 100       # E
    batch_size: int = 256
    lr: float = 1e-4
    nu_max: float = 0.1
    lambda_pde: float = 1.0
    grad_clip: float = 1.0
    batches_per_epoch_phase1: int | None = None
    batches_per_epoch_obs: int | None = 20
    batches_per_epoch_dyn: int | None = 4
    batches_per_epoch_curriculum: int | None = 40
    # schedulers
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    lr_min: float = 1e-6
    # optional spectral normalization of the trained decoder
    spectral_normalize_decoder: bool = False

    def encoder_dims(self, n_x: int, n_z: int) -> list[int]:
        return [n_x] + [self.hidden] * self.n_hidden_layers + [n_z]

    def decoder_dims(self, n_x: int, n_z: int) -> list[int]:
        return [n_z] + [self.hidden] * self.n_hidden_layers + [n_x]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def nu_schedule(nu_max: float, epoch: int) -> float:
    """PDE-weight linear warmup over the first five epochs (0-based)."""
    return nu_max * min(1.0, epoch / 5.0)


def burn_in_steps(lam: float, dt: float) -> int:
    """Grid steps until the arbitrary z(0) = 0 transient contracts below 1e-4."""
    return math.ceil(math.log(1e4) / lam / dt)


# -- datasets ------------------------------------------------------------------

@dataclass
class DatasetSample:
    """One materialized training tuple."""

    x: np.ndarray            # (n_x,)
    y: np.ndarray            # (n_y,)
    u_window: np.ndarray     # (omega, n_u), ends at t_k
    u_window_next: np.ndarray
    xdot: np.ndarray         # f(x_k, u_k)
    u: np.ndarray            # (n_u,)


@dataclass
class AutonomousDataset:
    x: np.ndarray        # (M, n_x)
    z: np.ndarray        # (M, n_z) co-simulated targets
    y: np.ndarray        # (M, n_y)
    xdot: np.ndarray     # f(x, 0)
    t_burn: float
    burn_steps: int

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class ForcedDataset:
    """Eq.-style forced dataset; windows are materialized lazily per batch
    from the per-trajectory input series (two adjacent windows per sample)."""

    system: str
    omega: int
    dt: float
    x: np.ndarray          # (M, n_x)
    y: np.ndarray          # (M, n_y)
    u: np.ndarray          # (M, n_u)
    xdot: np.ndarray       # (M, n_x)
    traj_id: np.ndarray    # (M,)
    k: np.ndarray          # (M,) grid index of the sample
    u_series: np.ndarray   # (n_traj_total, N+1, n_u)
    x_series: np.ndarray   # (n_traj_total, N+1, n_x)
    y_series: np.ndarray   # (n_traj_total, N+1, n_y)
    kind_id: np.ndarray    # (n_traj_total,) index into FORCED_KINDS

    def __len__(self) -> int:
        return self.x.shape[0]

    def _gather(self, idx: np.ndarray, shift: int) -> np.ndarray:
        t = self.traj_id[idx]
        kk = self.k[idx] + shift
        offs = np.arange(-self.omega + 1, 1)
        w = self.u_series[t[:, None], kk[:, None] + offs, :]
        return w.reshape(len(idx), -1)

    def windows(self, idx: np.ndarray) -> np.ndarray:
        """Flattened (batch, omega * n_u) windows ending at each sample's t_k."""
        return self._gather(np.asarray(idx), 0)

    def windows_next(self, idx: np.ndarray) -> np.ndarray:
        return self._gather(np.asarray(idx), 1)

    def sample(self, i: int) -> DatasetSample:
        n_u = self.u_series.shape[2]
        idx = np.array([i])
        return DatasetSample(
            x=self.x[i].copy(),
            y=self.y[i].copy(),
            u_window=self.windows(idx)[0].reshape(self.omega, n_u),
            u_window_next=self.windows_next(idx)[0].reshape(self.omega, n_u),
            xdot=self.xdot[i].copy(),
            u=self.u[i].copy(),
        )


def build_autonomous_dataset(spec: SystemSpec, matrices: ObserverMatrices,
                             cfg: TrainConfig) -> AutonomousDataset:
    """Co-simulate (x, z) with u = 0 and z(0) = 0; keep post-burn-in samples."""
    rep = check_matrices(matrices)
    if not rep.hurwitz:
        raise ValueError("latent matrix A must be Hurwitz")
    lam = rep.lam
    burn = (burn_in_steps(lam, cfg.dt) if cfg.burn_time is None
            else math.ceil(cfg.burn_time / cfg.dt))
    n_steps = round(cfg.T / cfg.dt)
    if burn >= n_steps:
        raise ValueError(f"burn-in ({burn} steps) consumes the whole horizon ({n_steps})")
    times = np.arange(n_steps + 1) * cfg.dt
    n_x = spec.n_x
    A, B = matrices.A, matrices.B
    zero_u = np.zeros(spec.n_u)

    def aug(t, v):
        x, z = v[:n_x], v[n_x:]
        return np.concatenate([spec.drift(x, zero_u), A @ z + B @ spec.output(x)])

    xs, zs = [], []
    for i in range(cfg.n_traj):
        r = rngmod.derive(cfg.seed, "aut-ic", i)
        x0 = cfg.ic_scale * sample_initial_condition(spec, r)
        v0 = np.concatenate([x0, np.zeros(matrices.n_z)])
        states = integrate_ode(aug, times, v0)
        xs.append(states[burn:n_steps, :n_x])
        zs.append(states[burn:n_steps, n_x:])
    x = np.concatenate(xs, axis=0)
    z = np.concatenate(zs, axis=0)
    y = spec.output(x)
    xdot = spec.drift(x, np.zeros((x.shape[0], spec.n_u)))
    return AutonomousDataset(x, z, y, xdot, burn * cfg.dt, burn)


def build_forced_dataset(spec: SystemSpec, cfg: TrainConfig) -> ForcedDataset:
    """Cartesian product of initial conditions and mixed-kind input signals,
    sampled at every valid window index with both adjacent windows."""
    n_steps = round(cfg.T / cfg.dt)
    n_wind = cfg.omega
    if n_wind >= n_steps:
        raise ValueError("window length exceeds the horizon")
    ks = np.arange(n_wind, n_steps)
    n_total = cfg.n_traj * cfg.n_inp

    signals = []
    kind_id = np.empty(n_total, dtype=np.int64)
    u_series = np.empty((n_total, n_steps + 1, spec.n_u))
    x_series = np.empty((n_total, n_steps + 1, spec.n_x))
    y_series = np.empty((n_total, n_steps + 1, spec.n_y))

    for j in range(cfg.n_inp):
        kind = FORCED_KINDS[j % len(FORCED_KINDS)]
        signals.append(sample_input(kind, rngmod.derive(cfg.seed, "sig", j), spec.n_u))

    t = 0
    for i in range(cfg.n_traj):
        x0 = sample_initial_condition(spec, rngmod.derive(cfg.seed, "fic", i))
        for j, sig in enumerate(signals):
            traj = integrate(spec, x0, sig, cfg.T, cfg.dt)
            u_series[t] = traj.inputs
            x_series[t] = traj.states
            y_series[t] = traj.outputs
            kind_id[t] = j % len(FORCED_KINDS)
            t += 1

    traj_id = np.repeat(np.arange(n_total), len(ks))
    k = np.tile(ks, n_total)
    x = x_series[traj_id, k]
    y = y_series[traj_id, k]
    u = u_series[traj_id, k]
    xdot = spec.drift(x, u)
    return ForcedDataset(spec.name, cfg.omega, cfg.dt, x, y, u, xdot,
                         traj_id, k, u_series, x_series, y_series, kind_id)


# -- loss graphs ----------------------------------------------------------------

@dataclass
class LossGraphs:
    total: Graph
    terms: dict[str, Graph] = field(default_factory=dict)


def _static_encoder_inner(enc_dims: list[int], batch: int) -> Graph:
    inner = Graph()
    x = inner.leaf("x", (batch, enc_dims[0]))
    layers = nets.mlp_leaves(inner, "enc", enc_dims)
    inner.output(nets.build_mlp(inner, x, layers))
    return inner


def encoder_loss_graph(enc_dims: list[int], batch: int,
                       matrices: ObserverMatrices) -> LossGraphs:
    """Latent-target MSE plus nu-weighted static PDE residual.

    Leaves: x, z, y, xdot, nu, and the encoder parameters. Both terms are
    batch means of squared norms; the spatial derivative enters through a
    differentiable jvp node so the PDE term trains the encoder.
    """
    n_z = matrices.n_z

    def build(parts: str) -> Graph:
        g = Graph()
        x = g.leaf("x", (batch, enc_dims[0]))
        z = g.leaf("z", (batch, n_z))
        y = g.leaf("y", (batch, matrices.B.shape[1]))
        xdot = g.leaf("xdot", (batch, enc_dims[0]))
        nu = g.leaf("nu", ())
        enc_layers = nets.mlp_leaves(g, "enc", enc_dims)
        zhat = nets.build_mlp(g, x, enc_layers)
        mse = pde = None
        if parts in ("total", "mse"):
            mse = g.affine(g.sqnorm(zhat - z), 1.0 / batch)
        if parts in ("total", "pde"):
            inner = _static_encoder_inner(enc_dims, batch)
            binds = {"x": x}
            binds.update({f"enc.{i}.W": W for i, (W, _) in enumerate(enc_layers)})
            binds.update({f"enc.{i}.b": b for i, (_, b) in enumerate(enc_layers)})
            zdot = g.jvp(inner, binds, {"x": xdot})
            At = g.const(matrices.A.T)
            Bt = g.const(matrices.B.T)
            resid = zdot - (zhat @ At + y @ Bt)
            pde = g.affine(g.sqnorm(resid), 1.0 / batch)
        if parts == "total":
            return g.output(mse + nu * pde)
        return g.output(mse if parts == "mse" else pde)

    return LossGraphs(build("total"), {"mse": build("mse"), "pde": build("pde")})


def decoder_loss_graph(dec_dims: list[int], batch: int) -> LossGraphs:
    """Plain reconstruction MSE for the decoder: mean ||dec(z) - x||^2."""
    g = Graph()
    z = g.leaf("z", (batch, dec_dims[0]))
    x = g.leaf("x", (batch, dec_dims[-1]))
    layers = nets.mlp_leaves(g, "dec", dec_dims)
    xhat = nets.build_mlp(g, z, layers)
    g.output(g.affine(g.sqnorm(xhat - x), 1.0 / batch))
    return LossGraphs(g)


def obs_loss_graph(iw: nets.InjectionWeights, batch: int, matrices: ObserverMatrices,
                   omega: int, n_u: int) -> LossGraphs:
    """Dynamics-matching loss for the injection network.

    Leaves: precomputed frozen-encoder latents z and their time derivatives
    zdot (no encoder parameters appear — the base maps are frozen), the
    output y, the input window, plus the injection parameters.
    """
    n_z = matrices.n_z
    g = Graph()
    z = g.leaf("z", (batch, n_z))
    y = g.leaf("y", (batch, matrices.B.shape[1]))
    zdot = g.leaf("zdot", (batch, n_z))
    win = g.leaf("win", (batch, omega * n_u))
    leaves = nets.injection_leaves(g, iw)
    phi = nets.build_injection(g, z, win, leaves, omega, n_u)
    At = g.const(matrices.A.T)
    Bt = g.const(matrices.B.T)
    mismatch = z @ At + y @ Bt + phi - zdot
    g.output(g.affine(g.sqnorm(mismatch), 1.0 / batch))
    return LossGraphs(g)


def _modulated_encoder_inner(enc_dims: list[int], hw: nets.HyperNetWeights,
                             batch: int, omega: int, n_u: int,
                             enc_indices: list[int]) -> Graph:
    inner = Graph()
    x = inner.leaf("x", (batch, enc_dims[0]))
    win = inner.leaf("win", (batch, omega * n_u))
    hl = nets.hyper_leaves(inner, hw)
    h = nets.build_gru(inner, win, hl["gates"], omega, n_u)
    facs = nets.build_hyper_factors(inner, h, hw, hl, enc_indices)
    layers = nets.mlp_leaves(inner, "enc", enc_dims)
    inner.output(nets.build_modulated_mlp(inner, x, layers, facs, hl["scale"]))
    return inner


def dyn_loss_graph(enc_dims: list[int], dec_dims: list[int], hw: nets.HyperNetWeights,
                   batch: int, matrices: ObserverMatrices, omega: int, n_u: int,
                   lambda_pde: float) -> LossGraphs:
    """Reconstruction plus dynamic PDE residual for the hypernetwork.

    The residual's spatial term is a jvp of the modulated encoder in the
    state direction f(x, u); the temporal term is a jvp in the window
    direction (window_next - window) / dt. Gradients flow only into the
    hypernetwork parameters.
    """
    n_enc = len(enc_dims) - 1
    n_dec = len(dec_dims) - 1
    enc_idx = list(range(n_enc))
    dec_idx = list(range(n_enc, n_enc + n_dec))
    n_z = matrices.n_z

    def build(parts: str) -> Graph:
        g = Graph()
        x = g.leaf("x", (batch, enc_dims[0]))
        y = g.leaf("y", (batch, matrices.B.shape[1]))
        xdot = g.leaf("xdot", (batch, enc_dims[0]))
        win = g.leaf("win", (batch, omega * n_u))
        udot = g.leaf("udot", (batch, omega * n_u))
        hl = nets.hyper_leaves(g, hw)
        h = nets.build_gru(g, win, hl["gates"], omega, n_u)
        enc_facs = nets.build_hyper_factors(g, h, hw, hl, enc_idx)
        enc_layers = nets.mlp_leaves(g, "enc", enc_dims)
        ztil = nets.build_modulated_mlp(g, x, enc_layers, enc_facs, hl["scale"])
        rec = pde = None
        if parts in ("total", "rec"):
            dec_facs = nets.build_hyper_factors(g, h, hw, hl, dec_idx)
            dec_layers = nets.mlp_leaves(g, "dec", dec_dims)
            xrec = nets.build_modulated_mlp(g, ztil, dec_layers, dec_facs, hl["scale"])
            rec = g.affine(g.sqnorm(xrec - x), 1.0 / batch)
        if parts in ("total", "pde"):
            inner = _modulated_encoder_inner(enc_dims, hw, batch, omega, n_u, enc_idx)
            binds = {"x": x, "win": win}
            for name in inner.leaf_ids:
                if name not in ("x", "win"):
                    binds[name] = Var(g, g.leaf_ids[name], g.nodes[g.leaf_ids[name]].shape)
            # spatial + temporal derivative in one dual pass (jvp is linear
            # in its seeds): dT/dx f + dT/dt, dt-dir = (win_next - win)/dt
            dz = g.jvp(inner, binds, {"x": xdot, "win": udot})
            At = g.const(matrices.A.T)
            Bt = g.const(matrices.B.T)
            resid = dz - (ztil @ At + y @ Bt)
            pde = g.affine(g.sqnorm(resid), 1.0 / batch)
        if parts == "total":
            return g.output(rec + g.affine(pde, lambda_pde))
        return g.output(rec if parts == "rec" else pde)

    return LossGraphs(build("total"), {"rec": build("rec"), "pde": build("pde")})


# -- generic epoch loop -----------------------------------------------------------

def _run_training(name: str, cfg: TrainConfig, n_samples: int,
                  params: dict[str, np.ndarray], make_graphs, make_bindings,
                  epochs: int, batches_cap: int | None, scheduler,
                  epoch_extra=None, frozen: dict | None = None,
                  records: list | None = None) -> dict[str, np.ndarray]:
    """Shuffled mini-batch Adam with clipping, NaN abort and metrics records."""
    wrt = list(params)
    opt = AdamState.init(params, lr=cfg.lr)
    shuffle_rng = rngmod.derive(cfg.seed, "shuffle", name)
    cache: dict[int, LossGraphs] = {}
    frozen = frozen or {}
    for epoch in range(epochs):
        t0 = time.perf_counter()
        if isinstance(scheduler, CosineSchedule):
            opt.lr = scheduler.lr(epoch)
        else:
            opt.lr = scheduler.current
        order = shuffle_rng.permutation(n_samples)
        starts = range(0, n_samples, cfg.batch_size)
        batches = [order[s:s + cfg.batch_size] for s in starts]
        if batches_cap is not None:
            batches = batches[:batches_cap]
        extra = epoch_extra(epoch) if epoch_extra is not None else {}
        losses = []
        gnorm = 0.0
        term_vals = {}
        for bi, idx in enumerate(batches):
            b = len(idx)
            if b not in cache:
                cache[b] = make_graphs(b)
            lg = cache[b]
            binds = make_bindings(idx)
            binds.update(frozen)
            binds.update(params)
            binds.update(extra)
            val, grads = gradient(lg.total, binds, wrt, check_finite=False,
                                  return_value=True)
            if not math.isfinite(val):
                raise TrainingDivergence(
                    f"{name}: non-finite loss at epoch {epoch}, batch {bi}")
            if bi == 0:
                for tname, tg in lg.terms.items():
                    term_vals[f"loss_{tname}"] = float(evaluate(tg, binds, check_finite=False))
            grads = clip_global_norm(grads, cfg.grad_clip)
            gnorm = global_norm(grads)
            params = adam_step(opt, params, grads)
            losses.append(val)
        mean_loss = float(np.mean(losses))
        if isinstance(scheduler, PlateauSchedule):
            scheduler.step(mean_loss)
        if records is not None:
            rec = {"trainer": name, "epoch": epoch, "loss": mean_loss,
                   "lr": opt.lr, "grad_norm": gnorm,
                   "wall_ms": 1000.0 * (time.perf_counter() - t0)}
            rec.update(term_vals)
            rec.update({k: float(v) for k, v in extra.items()})
            records.append(rec)
    return params


def write_metrics_log(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- helpers shared by trainers ------------------------------------------------------

def encoder_targets(enc: nets.MlpWeights, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
    outs = [nets.mlp_forward(enc, x[s:s + chunk]) for s in range(0, x.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


def encoder_time_derivatives(enc: nets.MlpWeights, x: np.ndarray, xdot: np.ndarray,
                             chunk: int = 8192) -> np.ndarray:
    """dz/dt = (dT/dx) xdot through the encoder, batched in chunks."""
    from .diffcore import jvp as fjvp

    outs = []
    dims = enc.dims
    cache: dict[int, Graph] = {}
    for s in range(0, x.shape[0], chunk):
        xb = x[s:s + chunk]
        b = xb.shape[0]
        if b not in cache:
            cache[b] = _static_encoder_inner(dims, b)
        binds = {"x": xb}
        binds.update(nets.mlp_params(enc, "enc"))
        outs.append(fjvp(cache[b], binds, "x", xdot[s:s + chunk]))
    return np.concatenate(outs, axis=0)


# -- trainers ----------------------------------------------------------------------

def train_phase1(spec: SystemSpec, matrices: ObserverMatrices, cfg: TrainConfig,
                 dataset: AutonomousDataset | None = None,
                 records: list | None = None) -> tuple[nets.MlpWeights, nets.MlpWeights]:
    """Stage A encoder (MSE + warmed-up PDE, plateau LR), then Stage B decoder."""
    if dataset is None:
        dataset = build_autonomous_dataset(spec, matrices, cfg)
    n_z = matrices.n_z
    enc_dims = cfg.encoder_dims(spec.n_x, n_z)
    dec_dims = cfg.decoder_dims(spec.n_x, n_z)
    enc = nets.mlp_init(enc_dims, rngmod.derive(cfg.seed, "init", "enc"))
    params = nets.mlp_params(enc, "enc")

    def binds_a(idx):
        return {"x": dataset.x[idx], "z": dataset.z[idx], "y": dataset.y[idx],
                "xdot": dataset.xdot[idx]}

    params = _run_training(
        "phase1-enc", cfg, len(dataset), params,
        lambda b: encoder_loss_graph(enc_dims, b, matrices),
        binds_a, cfg.epochs_enc, cfg.batches_per_epoch_phase1,
        PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min),
        epoch_extra=lambda e: {"nu": np.asarray(nu_schedule(cfg.nu_max, e))},
        records=records,
    )
    enc = nets.mlp_from_params(params, "enc", len(enc_dims) - 1)

    # Stage B: regenerate targets through the trained encoder
    z_targets = encoder_targets(enc, dataset.x)
    dec = nets.mlp_init(dec_dims, rngmod.derive(cfg.seed, "init", "dec"))
    dparams = nets.mlp_params(dec, "dec")

    def binds_b(idx):
        return {"z": z_targets[idx], "x": dataset.x[idx]}

    dparams = _run_training(
        "phase1-dec", cfg, len(dataset), dparams,
        lambda b: decoder_loss_graph(dec_dims, b),
        binds_b, cfg.epochs_dec, cfg.batches_per_epoch_phase1,
        PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min),
        records=records,
    )
    dec = nets.mlp_from_params(dparams, "dec", len(dec_dims) - 1)
    if cfg.spectral_normalize_decoder:
        dec, _ = nets.spectral_normalize(dec)
    return enc, dec


def train_obs(spec: SystemSpec, base: tuple[nets.MlpWeights, nets.MlpWeights],
              matrices: ObserverMatrices, cfg: TrainConfig,
              forced: ForcedDataset | None = None,
              records: list | None = None) -> nets.InjectionWeights:
    """Fit the injection network to the frozen-encoder latent dynamics gap."""
    enc, _ = base
    if forced is None:
        forced = build_forced_dataset(spec, cfg)
    z = encoder_targets(enc, forced.x)
    zdot = encoder_time_derivatives(enc, forced.x, forced.xdot)
    iw = nets.injection_init(matrices.n_z, spec.n_u, rngmod.derive(cfg.seed, "init", "inj"),
                             hidden=cfg.injection_hidden, gru_hidden=cfg.gru_hidden,
                             d_ell=cfg.d_ell)
    params = nets.injection_params(iw)

    def binds(idx):
        return {"z": z[idx], "y": forced.y[idx], "zdot": zdot[idx],
                "win": forced.windows(idx)}

    params = _run_training(
        "obs", cfg, len(forced), params,
        lambda b: obs_loss_graph(iw, b, matrices, cfg.omega, spec.n_u),
        binds, cfg.epochs_phase2, cfg.batches_per_epoch_obs,
        CosineSchedule(cfg.lr, cfg.epochs_phase2, cfg.lr_min),
        records=records,
    )
    return nets.injection_from_params(params)


def train_dyn(spec: SystemSpec, base: tuple[nets.MlpWeights, nets.MlpWeights],
              matrices: ObserverMatrices, cfg: TrainConfig,
              forced: ForcedDataset | None = None,
              records: list | None = None) -> nets.HyperNetWeights:
    """Fit the hypernetwork; base encoder/decoder stay frozen bitwise."""
    enc, dec = base
    if forced is None:
        forced = build_forced_dataset(spec, cfg)
    enc_dims = enc.dims
    dec_dims = dec.dims
    layer_dims = ([(W.shape[0], W.shape[1]) for W, _ in enc.layers]
                  + [(W.shape[0], W.shape[1]) for W, _ in dec.layers])
    hw = nets.hyper_init(layer_dims, spec.n_u, rngmod.derive(cfg.seed, "init", "hyp"),
                         rank=cfg.rank, gru_hidden=cfg.gru_hidden,
                         embed_dim=cfg.embed_dim, backbone_hidden=cfg.backbone_hidden,
                         scale_init=cfg.scale_init)
    params = nets.hyper_params(hw)
    frozen = {}
    frozen.update(nets.mlp_params(enc, "enc"))
    frozen.update(nets.mlp_params(dec, "dec"))

    def binds(idx):
        w = forced.windows(idx)
        wn = forced.windows_next(idx)
        return {"x": forced.x[idx], "y": forced.y[idx], "xdot": forced.xdot[idx],
                "win": w, "udot": (wn - w) / cfg.dt}

    params = _run_training(
        "dyn", cfg, len(forced), params,
        lambda b: dyn_loss_graph(enc_dims, dec_dims, hw, b, matrices,
                                 cfg.omega, spec.n_u, cfg.lambda_pde),
        binds, cfg.epochs_phase2, cfg.batches_per_epoch_dyn,
        CosineSchedule(cfg.lr, cfg.epochs_phase2, cfg.lr_min),
        frozen=frozen,
        records=records,
    )
    return nets.hyper_from_params(params, layer_dims, cfg.rank)


def latent_series_targets(y_series: np.ndarray, matrices: ObserverMatrices,
                          dt: float) -> np.ndarray:
    """Co-simulated latent targets z' = A z + B y along stored forced
    trajectories, z(0) = 0; vectorized fixed-step RK4 with y interpolated."""
    m, n1, _ = y_series.shape
    n_z = matrices.n_z
    At, Bt = matrices.A.T, matrices.B.T
    z = np.zeros((m, n_z))
    out = np.empty((m, n1, n_z))
    out[:, 0] = z
    for k in range(n1 - 1):
        y0, y1 = y_series[:, k], y_series[:, k + 1]
        ym = 0.5 * (y0 + y1)

        k1 = z @ At + y0 @ Bt
        k2 = (z + 0.5 * dt * k1) @ At + ym @ Bt
        k3 = (z + 0.5 * dt * k2) @ At + ym @ Bt
        k4 = (z + dt * k3) @ At + y1 @ Bt
        z = z + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[:, k + 1] = z
    return out


def train_curriculum(spec: SystemSpec, base: tuple[nets.MlpWeights, nets.MlpWeights],
                     matrices: ObserverMatrices, cfg: TrainConfig,
                     forced: ForcedDataset | None = None,
                     records: list | None = None) -> tuple[nets.MlpWeights, nets.MlpWeights]:
    """Fine-tune copies of the base maps on forced data in three stages of
    increasing input complexity: constant, then sinusoid, then square."""
    enc, dec = base[0].copy(), base[1].copy()
    if forced is None:
        forced = build_forced_dataset(spec, cfg)
    lam = check_matrices(matrices).lam
    burn = (burn_in_steps(lam, cfg.dt) if cfg.burn_time is None
            else math.ceil(cfg.burn_time / cfg.dt))
    z_series = latent_series_targets(forced.y_series, matrices, cfg.dt)
    stage_epochs = max(1, cfg.epochs_phase2 // 3)
    enc_dims = enc.dims
    dec_dims = dec.dims

    for stage, kind in enumerate(FORCED_KINDS):
        tsel = np.where(forced.kind_id == stage)[0]
        mask = np.isin(forced.traj_id, tsel) & (forced.k >= burn)
        sel = np.where(mask)[0]
        if sel.size == 0:
            raise ValueError(f"no curriculum samples for stage {kind!r}")
        x = forced.x[sel]
        y = forced.y[sel]
        xdot = forced.xdot[sel]
        z = z_series[forced.traj_id[sel], forced.k[sel]]

        params = nets.mlp_params(enc, "enc")

        def binds_e(idx, x=x, z=z, y=y, xdot=xdot):
            return {"x": x[idx], "z": z[idx], "y": y[idx], "xdot": xdot[idx]}

        params = _run_training(
            f"curriculum-enc-{kind}", cfg, x.shape[0], params,
            lambda b: encoder_loss_graph(enc_dims, b, matrices),
            binds_e, stage_epochs, cfg.batches_per_epoch_curriculum,
            PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min),
            epoch_extra=lambda e: {"nu": np.asarray(nu_schedule(cfg.nu_max, e))},
            records=records,
        )
        enc = nets.mlp_from_params(params, "enc", len(enc_dims) - 1)

        z_rt = encoder_targets(enc, x)
        dparams = nets.mlp_params(dec, "dec")

        def binds_d(idx, x=x, z_rt=z_rt):
            return {"z": z_rt[idx], "x": x[idx]}

        dparams = _run_training(
            f"curriculum-dec-{kind}", cfg, x.shape[0], dparams,
            lambda b: decoder_loss_graph(dec_dims, b),
            binds_d, stage_epochs, cfg.batches_per_epoch_curriculum,
            PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min),
            records=records,
        )
        dec = nets.mlp_from_params(dparams, "dec", len(dec_dims) - 1)
    return enc, dec
