"""Parameterized function families for the observer pipeline.

Four building blocks:

* tanh MLPs (base encoder/decoder, identity output layer);
* a bias-free GRU context encoder — bias-free so that a zero input window
  provably yields an exactly zero hidden state;
* the latent-injection network: GRU context -> bias-free projection,
  then a gated MLP of [z; context] whose output vanishes exactly when the
  context is zero;
* the hypernetwork emitting rank-r weight deltas for encoder and decoder
  layers, with the left factor a bias-free linear image of the context so
  the deltas vanish exactly at zero context.

Every family has two synchronized implementations: a vectorized numpy
forward (inference) and a graph builder (training); tests pin them to each
other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid

from .diffcore import Graph, Var

__all__ = [
    "MlpWeights",
    "GruWeights",
    "InjectionWeights",
    "HyperNetWeights",
    "LowRankDelta",
    "mlp_init",
    "mlp_forward",
    "mlp_params",
    "mlp_from_params",
    "mlp_leaves",
    "gru_init",
    "gru_encode",
    "gru_params",
    "gru_from_params",
    "gru_leaves",
    "injection_init",
    "injection_forward",
    "injection_context",
    "injection_params",
    "injection_from_params",
    "injection_leaves",
    "hyper_init",
    "hyper_context",
    "hyper_factors",
    "hyper_generate",
    "hyper_params",
    "hyper_from_params",
    "hyper_leaves",
    "apply_delta",
    "spectral_normalize",
    "power_iteration_sigma",
    "build_mlp",
    "build_gru",
    "build_injection",
    "build_hyper_factors",
    "build_modulated_mlp",
]


def _uniform_fan_in(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / d_in)
    return rng.uniform(-limit, limit, size=(d_in, d_out))


# -- MLP ----------------------------------------------------------------------

@dataclass
class MlpWeights:
    """Row-convention layers: y = x @ W + b, tanh on hidden, identity output."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers]

    def copy(self) -> "MlpWeights":
        return MlpWeights([(W.copy(), b.copy()) for W, b in self.layers])


def mlp_init(dims: list[int], rng: np.random.Generator) -> MlpWeights:
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers.append((_uniform_fan_in(rng, d_in, d_out), np.zeros(d_out)))
    return MlpWeights(layers)


def mlp_forward(w: MlpWeights, x: np.ndarray) -> np.ndarray:
    """Forward pass, batched over leading axes of ``x``."""
    h = np.asarray(x, dtype=np.float64)
    last = len(w.layers) - 1
    for i, (W, b) in enumerate(w.layers):
        h = h @ W + b
        if i < last:
            h = np.tanh(h)
    return h


def mlp_params(w: MlpWeights, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (W, b) in enumerate(w.layers):
        out[f"{prefix}.{i}.W"] = W
        out[f"{prefix}.{i}.b"] = b
    return out


def mlp_from_params(params: dict, prefix: str, n_layers: int) -> MlpWeights:
    return MlpWeights(
        [(params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"]) for i in range(n_layers)]
    )


def build_mlp(g: Graph, x: Var, layer_vars: list[tuple[Var, Var | None]]) -> Var:
    """Graph counterpart of :func:`mlp_forward`; ``None`` bias is omitted."""
    h = x
    last = len(layer_vars) - 1
    for i, (W, b) in enumerate(layer_vars):
        h = h @ W
        if b is not None:
            h = h + b
        if i < last:
            h = g.tanh(h)
    return h


def mlp_leaves(g: Graph, prefix: str, dims: list[int]) -> list[tuple[Var, Var]]:
    out = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        out.append((g.leaf(f"{prefix}.{i}.W", (d_in, d_out)),
                    g.leaf(f"{prefix}.{i}.b", (d_out,))))
    return out


# -- bias-free GRU -------------------------------------------------------------

_GRU_GATES = ("iz", "hz", "ir", "hr", "in", "hn")


@dataclass
class GruWeights:
    """Update/reset/candidate gate matrices; no bias terms anywhere."""

    w_iz: np.ndarray
    w_hz: np.ndarray
    w_ir: np.ndarray
    w_hr: np.ndarray
    w_in: np.ndarray
    w_hn: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_hz.shape[0]

    @property
    def n_in(self) -> int:
        return self.w_iz.shape[0]

    def copy(self) -> "GruWeights":
        return GruWeights(*(getattr(self, f"w_{g}").copy() for g in _GRU_GATES))


def gru_init(n_in: int, hidden: int, rng: np.random.Generator) -> GruWeights:
    mats = []
    for gate in _GRU_GATES:
        d_in = n_in if gate[0] == "i" else hidden
        mats.append(_uniform_fan_in(rng, d_in, hidden))
    return GruWeights(*mats)


def gru_encode(w: GruWeights, window: np.ndarray) -> np.ndarray:
    """Final hidden state after the window; ``window`` is (..., omega, n_in).

    A zero window maps to an exactly zero hidden state: with no biases every
    pre-activation is 0, the candidate tanh(0) = 0, and the convex gate
    update preserves 0. The three gate matmuls are fused into one wide GEMM
    per side.
    """
    window = np.asarray(window, dtype=np.float64)
    lead = window.shape[:-2]
    H = w.hidden
    h = np.zeros(lead + (H,))
    wi = np.concatenate([w.w_iz, w.w_ir, w.w_in], axis=1)
    wh = np.concatenate([w.w_hz, w.w_hr, w.w_hn], axis=1)
    for t in range(window.shape[-2]):
        ui = window[..., t, :] @ wi
        hh = h @ wh
        z = _sigmoid(ui[..., :H] + hh[..., :H])
        r = _sigmoid(ui[..., H:2 * H] + hh[..., H:2 * H])
        n = np.tanh(ui[..., 2 * H:] + r * hh[..., 2 * H:])
        h = (1.0 - z) * n + z * h
    return h


def gru_params(w: GruWeights, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{g}": getattr(w, f"w_{g}") for g in _GRU_GATES}


def gru_from_params(params: dict, prefix: str) -> GruWeights:
    return GruWeights(*(params[f"{prefix}.{g}"] for g in _GRU_GATES))


def gru_leaves(g: Graph, prefix: str, n_in: int, hidden: int) -> dict[str, Var]:
    out = {}
    for gate in _GRU_GATES:
        d_in = n_in if gate[0] == "i" else hidden
        out[gate] = g.leaf(f"{prefix}.{gate}", (d_in, hidden))
    return out


def build_gru(g: Graph, window: Var, gates: dict[str, Var], omega: int, n_in: int) -> Var:
    """GRU unrolled on the graph; ``window`` is (batch, omega * n_in) flat.

    Gate matmuls are fused as in :func:`gru_encode`.
    """
    batch = window.shape[0]
    H = gates["hz"].shape[0]
    wi = g.concat([gates["iz"], gates["ir"], gates["in"]], axis=1)
    wh = g.concat([gates["hz"], gates["hr"], gates["hn"]], axis=1)
    h = g.const(np.zeros((batch, H)))
    for t in range(omega):
        ui = g.slice_cols(window, t * n_in, (t + 1) * n_in) @ wi
        hh = h @ wh
        z = g.sigmoid(g.slice_cols(ui, 0, H) + g.slice_cols(hh, 0, H))
        r = g.sigmoid(g.slice_cols(ui, H, 2 * H) + g.slice_cols(hh, H, 2 * H))
        n = g.tanh(g.slice_cols(ui, 2 * H, 3 * H) + r * g.slice_cols(hh, 2 * H, 3 * H))
        h = g.affine(z, -1.0, 1.0) * n + z * h
    return h


# -- injection network ---------------------------------------------------------

@dataclass
class InjectionWeights:
    """GRU + bias-free projection + gated MLP producing the latent correction."""

    gru: GruWeights
    w_proj: np.ndarray           # (H, d_ell), no bias
    phi: MlpWeights              # [n_z + d_ell, hidden, n_z]; output layer bias-free
    w_gate: np.ndarray           # (d_ell, n_z), no bias

    def copy(self) -> "InjectionWeights":
        return InjectionWeights(self.gru.copy(), self.w_proj.copy(),
                                self.phi.copy(), self.w_gate.copy())


def injection_init(n_z: int, n_u: int, rng: np.random.Generator,
                   hidden: int = 64, gru_hidden: int = 64, d_ell: int = 16) -> InjectionWeights:
    gru = gru_init(n_u, gru_hidden, rng)
    w_proj = _uniform_fan_in(rng, gru_hidden, d_ell)
    phi = mlp_init([n_z + d_ell, hidden, n_z], rng)
    w_gate = _uniform_fan_in(rng, d_ell, n_z)
    return InjectionWeights(gru, w_proj, phi, w_gate)


def injection_context(iw: InjectionWeights, window: np.ndarray) -> np.ndarray:
    """Bias-free projected context; exactly zero for a zero window."""
    return gru_encode(iw.gru, window) @ iw.w_proj


def injection_forward(iw: InjectionWeights, z: np.ndarray, window: np.ndarray,
                      ell: np.ndarray | None = None) -> np.ndarray:
    """Latent correction Phi(z, window); precomputed ``ell`` may be passed."""
    if ell is None:
        ell = injection_context(iw, window)
    zl = np.concatenate([z, ell], axis=-1)
    (W1, b1), (W2, _) = iw.phi.layers
    core = np.tanh(zl @ W1 + b1) @ W2
    return (ell @ iw.w_gate) * core


def injection_params(iw: InjectionWeights, prefix: str = "inj") -> dict[str, np.ndarray]:
    out = gru_params(iw.gru, f"{prefix}.gru")
    out[f"{prefix}.proj.W"] = iw.w_proj
    out[f"{prefix}.phi.0.W"], out[f"{prefix}.phi.0.b"] = iw.phi.layers[0]
    out[f"{prefix}.phi.1.W"] = iw.phi.layers[1][0]
    out[f"{prefix}.gate.W"] = iw.w_gate
    return out


def injection_from_params(params: dict, prefix: str = "inj") -> InjectionWeights:
    n_z = params[f"{prefix}.phi.1.W"].shape[1]
    phi = MlpWeights([
        (params[f"{prefix}.phi.0.W"], params[f"{prefix}.phi.0.b"]),
        (params[f"{prefix}.phi.1.W"], np.zeros(n_z)),
    ])
    return InjectionWeights(gru_from_params(params, f"{prefix}.gru"),
                            params[f"{prefix}.proj.W"], phi, params[f"{prefix}.gate.W"])


def build_injection(g: Graph, z: Var, window: Var, leaves: dict[str, Var],
                    omega: int, n_u: int) -> Var:
    """Graph counterpart of :func:`injection_forward`.

    ``leaves`` holds the GRU gates plus 'proj', 'phi0W', 'phi0b', 'phi1W',
    'gate'.
    """
    h = build_gru(g, window, leaves, omega, n_u)
    ell = h @ leaves["proj"]
    zl = g.concat([z, ell], axis=1)
    core = g.tanh(zl @ leaves["phi0W"] + leaves["phi0b"]) @ leaves["phi1W"]
    return (ell @ leaves["gate"]) * core


def injection_leaves(g: Graph, iw: InjectionWeights, prefix: str = "inj") -> dict[str, Var]:
    gates = gru_leaves(g, f"{prefix}.gru", iw.gru.n_in, iw.gru.hidden)
    gates["proj"] = g.leaf(f"{prefix}.proj.W", iw.w_proj.shape)
    gates["phi0W"] = g.leaf(f"{prefix}.phi.0.W", iw.phi.layers[0][0].shape)
    gates["phi0b"] = g.leaf(f"{prefix}.phi.0.b", iw.phi.layers[0][1].shape)
    gates["phi1W"] = g.leaf(f"{prefix}.phi.1.W", iw.phi.layers[1][0].shape)
    gates["gate"] = g.leaf(f"{prefix}.gate.W", iw.w_gate.shape)
    return gates


# -- hypernetwork with low-rank deltas ------------------------------------------

@dataclass
class LowRankDelta:
    """Rank-r weight perturbation: full matrix = scale * a @ b."""

    a: np.ndarray       # (d_in, r)
    b: np.ndarray       # (r, d_out)
    scale: float

    def full(self) -> np.ndarray:
        return self.scale * (self.a @ self.b)


@dataclass
class HyperNetWeights:
    """Shared GRU + per-layer embeddings + backbone + per-layer factor heads.

    The left factor of every delta is a bias-free linear function of the
    GRU context alone, which forces all deltas to vanish exactly at zero
    context; the right factor may depend on [context; embedding] with
    biases.
    """

    gru: GruWeights
    embed: np.ndarray                 # (L, embed_dim)
    backbone: MlpWeights              # (H + embed_dim) -> bb -> bb, tanh throughout
    heads: list[tuple[np.ndarray, np.ndarray]]   # per layer: (bb, r*d_out) + bias
    lefts: list[np.ndarray]           # per layer: (H, d_in*r), no bias
    scale: float
    layer_dims: list[tuple[int, int]]
    rank: int = 4

    def copy(self) -> "HyperNetWeights":
        return HyperNetWeights(
            self.gru.copy(), self.embed.copy(), self.backbone.copy(),
            [(W.copy(), b.copy()) for W, b in self.heads],
            [A.copy() for A in self.lefts],
            self.scale, list(self.layer_dims), self.rank,
        )


def hyper_init(layer_dims: list[tuple[int, int]], n_u: int, rng: np.random.Generator,
               rank: int = 4, gru_hidden: int = 64, embed_dim: int = 16,
               backbone_hidden: int = 128, scale_init: float = 0.01) -> HyperNetWeights:
    gru = gru_init(n_u, gru_hidden, rng)
    embed = rng.uniform(-1.0, 1.0, size=(len(layer_dims), embed_dim)) / math.sqrt(embed_dim)
    backbone = mlp_init([gru_hidden + embed_dim, backbone_hidden, backbone_hidden], rng)
    heads = []
    lefts = []
    for d_in, d_out in layer_dims:
        heads.append((_uniform_fan_in(rng, backbone_hidden, rank * d_out), np.zeros(rank * d_out)))
        lefts.append(_uniform_fan_in(rng, gru_hidden, d_in * rank))
    return HyperNetWeights(gru, embed, backbone, heads, lefts, scale_init, list(layer_dims), rank)


def _backbone_features(hw: HyperNetWeights, h: np.ndarray, layer: int) -> np.ndarray:
    e = np.broadcast_to(hw.embed[layer], h.shape[:-1] + (hw.embed.shape[1],))
    f = np.concatenate([h, e], axis=-1)
    for W, b in hw.backbone.layers:
        f = np.tanh(f @ W + b)
    return f


def hyper_context(hw: HyperNetWeights, window: np.ndarray) -> np.ndarray:
    return gru_encode(hw.gru, window)


def hyper_factors(hw: HyperNetWeights, h: np.ndarray):
    """Per-layer (a, b) factors for a batch of contexts h (..., H)."""
    factors = []
    for l, (d_in, d_out) in enumerate(hw.layer_dims):
        a = (h @ hw.lefts[l]).reshape(h.shape[:-1] + (d_in, hw.rank))
        W, bvec = hw.heads[l]
        f = _backbone_features(hw, h, l)
        b = (f @ W + bvec).reshape(h.shape[:-1] + (hw.rank, d_out))
        factors.append((a, b))
    return factors


def hyper_generate(hw: HyperNetWeights, window: np.ndarray) -> list[LowRankDelta]:
    """Low-rank deltas for one input window (omega, n_u)."""
    h = hyper_context(hw, window[None, ...])[0]
    out = []
    for l, (d_in, d_out) in enumerate(hw.layer_dims):
        a = (h @ hw.lefts[l]).reshape(d_in, hw.rank)
        W, bvec = hw.heads[l]
        f = _backbone_features(hw, h[None, :], l)[0]
        b = (f @ W + bvec).reshape(hw.rank, d_out)
        out.append(LowRankDelta(a, b, hw.scale))
    return out


def apply_delta(base: MlpWeights, deltas: list[LowRankDelta]) -> MlpWeights:
    """W'_l = W_l + delta_l, biases copied unchanged."""
    if len(deltas) != len(base.layers):
        raise ValueError(f"{len(deltas)} deltas for {len(base.layers)} layers")
    layers = []
    for (W, b), d in zip(base.layers, deltas):
        full = d.full()
        if full.shape != W.shape:
            raise ValueError(f"delta shape {full.shape} != weight shape {W.shape}")
        layers.append((W + full, b.copy()))
    return MlpWeights(layers)


def hyper_params(hw: HyperNetWeights, prefix: str = "hyp") -> dict[str, np.ndarray]:
    out = gru_params(hw.gru, f"{prefix}.gru")
    for l in range(hw.embed.shape[0]):
        out[f"{prefix}.embed.{l}"] = hw.embed[l:l + 1]
    out.update(mlp_params(hw.backbone, f"{prefix}.bb"))
    for l, (W, b) in enumerate(hw.heads):
        out[f"{prefix}.head.{l}.W"] = W
        out[f"{prefix}.head.{l}.b"] = b
    for l, A in enumerate(hw.lefts):
        out[f"{prefix}.left.{l}.W"] = A
    out[f"{prefix}.scale"] = np.asarray(hw.scale)
    return out


def hyper_from_params(params: dict, layer_dims: list[tuple[int, int]], rank: int = 4,
                      prefix: str = "hyp") -> HyperNetWeights:
    L = len(layer_dims)
    return HyperNetWeights(
        gru=gru_from_params(params, f"{prefix}.gru"),
        embed=np.concatenate([params[f"{prefix}.embed.{l}"] for l in range(L)], axis=0),
        backbone=mlp_from_params(params, f"{prefix}.bb", 2),
        heads=[(params[f"{prefix}.head.{l}.W"], params[f"{prefix}.head.{l}.b"]) for l in range(L)],
        lefts=[params[f"{prefix}.left.{l}.W"] for l in range(L)],
        scale=float(params[f"{prefix}.scale"]),
        layer_dims=list(layer_dims),
        rank=rank,
    )


def hyper_leaves(g: Graph, hw: HyperNetWeights, prefix: str = "hyp") -> dict:
    leaves = {"gates": gru_leaves(g, f"{prefix}.gru", hw.gru.n_in, hw.gru.hidden)}
    leaves["embed"] = [
        g.leaf(f"{prefix}.embed.{l}", (1, hw.embed.shape[1]))
        for l in range(hw.embed.shape[0])
    ]
    leaves["bb"] = [
        (g.leaf(f"{prefix}.bb.{i}.W", W.shape), g.leaf(f"{prefix}.bb.{i}.b", b.shape))
        for i, (W, b) in enumerate(hw.backbone.layers)
    ]
    leaves["heads"] = [
        (g.leaf(f"{prefix}.head.{l}.W", W.shape), g.leaf(f"{prefix}.head.{l}.b", b.shape))
        for l, (W, b) in enumerate(hw.heads)
    ]
    leaves["lefts"] = [g.leaf(f"{prefix}.left.{l}.W", A.shape) for l, A in enumerate(hw.lefts)]
    leaves["scale"] = g.leaf(f"{prefix}.scale", ())
    return leaves


def build_hyper_factors(g: Graph, h: Var, hw: HyperNetWeights, leaves: dict,
                        layer_indices: list[int]) -> list[tuple[Var, Var]]:
    """Graph factors (a3, b3) for the requested modulated layers.

    h is the context (batch, H); a3 is (batch, d_in, r), b3 (batch, r, d_out).
    The per-layer embedding row is replicated across the batch with a
    ones-matmul so its gradient is accumulated over the batch.
    """
    batch = h.shape[0]
    ones = g.const(np.ones((batch, 1)))
    out = []
    for l in layer_indices:
        d_in, d_out = hw.layer_dims[l]
        a3 = g.reshape(h @ leaves["lefts"][l], (batch, d_in, hw.rank))
        f = g.concat([h, ones @ leaves["embed"][l]], axis=1)
        for W, b in leaves["bb"]:
            f = g.tanh(f @ W + b)
        hW, hb = leaves["heads"][l]
        b3 = g.reshape(f @ hW + hb, (batch, hw.rank, d_out))
        out.append((a3, b3))
    return out


def build_modulated_mlp(g: Graph, x: Var, base_layers: list[tuple[Var, Var]],
                        factors: list[tuple[Var, Var]], scale: Var) -> Var:
    """Forward through base weights plus scaled low-rank per-sample deltas.

    Per layer: out = x @ W + scale * rowdot(rowdot(x, a3), b3) + b; never
    materializes the delta matrices.
    """
    h = x
    last = len(base_layers) - 1
    for i, ((W, b), (a3, b3)) in enumerate(zip(base_layers, factors)):
        mod = g.rowdot(g.rowdot(h, a3), b3)
        h = h @ W + scale * mod + b
        if i < last:
            h = g.tanh(h)
    return h


# -- spectral normalization ------------------------------------------------------

def power_iteration_sigma(M: np.ndarray, iterations: int = 30,
                          u0: np.ndarray | None = None,
                          tol: float = 0.0, max_iterations: int = 10_000,
                          ) -> tuple[float, np.ndarray]:
    """Largest singular value of a matrix via power iteration on M M^T.

    Runs at least ``iterations`` steps; with ``tol`` > 0 it continues until
    the estimate's relative change drops below ``tol`` (random matrices
    with tight singular-value gaps need more than the nominal 30 steps).
    """
    d_in = M.shape[0]
    u = np.full(d_in, 1.0 / math.sqrt(d_in)) if u0 is None else u0
    prev = math.inf
    k = 0
    while True:
        v = u @ M
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u
        v = v / nv
        u = M @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0, u
        u = u / nu
        k += 1
        if k >= iterations:
            sigma = float(np.linalg.norm(u @ M))
            if tol <= 0.0 or abs(sigma - prev) <= tol * sigma or k >= max_iterations:
                return sigma, u
            prev = sigma


def spectral_normalize(w: MlpWeights, iterations: int = 30,
                       state: dict | None = None) -> tuple[MlpWeights, dict]:
    """Divide each weight matrix by its estimated top singular value.

    Power iteration is run past ``iterations`` until the estimate settles,
    so the normalized spectral norm lands within 1e-3 of 1. ``state``
    carries warm-start vectors between calls. Zero matrices are left
    untouched.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    state = {} if state is None else state
    layers = []
    for i, (W, b) in enumerate(w.layers):
        sigma, u = power_iteration_sigma(W, iterations, state.get(i), tol=1e-7)
        state[i] = u
        layers.append((W if sigma == 0.0 else W / sigma, b.copy()))
    return MlpWeights(layers), state
