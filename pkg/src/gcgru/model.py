"""Forward and backward passes of the graph-convolutional GRU.

Architecture, per window sample of P days over N stocks:

  for t = 1..P:
      X_t^gcn = relu(P2 @ relu(P1 @ X_t @ W1) @ W2)          two GCN layers
      r_t = sigmoid([H_{t-1}, X_t, X_t^gcn] @ Wr + br)
      u_t = sigmoid([H_{t-1}, X_t, X_t^gcn] @ Wu + bu)
      Hc_t = tanh([r_t * H_{t-1}, X_t, X_t^gcn] @ Wh + bh)
      H_t = u_t * H_{t-1} + (1 - u_t) * Hc_t
  out = sigmoid(sigmoid(H_P @ Wg) @ w)                       per-stock probability

The per-layer propagators P1, P2 come from one of four modes:

  single   polynomial in one normalized Laplacian
  multi    polynomial in a coefficient-weighted sum of three Laplacians
  dynamic  a free trainable N x N matrix
  none     no graph path at all (GRU on raw features, ablation)

With kernel size 1 the polynomial degenerates to a constant, so the one-hop
renormalized propagator D^{-1/2}(A+I)D^{-1/2} is used instead of L^0 = I;
kernel size >= 2 uses plain powers of L. The backward pass is hand-derived
reverse-mode differentiation of the mean cross-entropy loss and is verified
against central finite differences (see training.gradcheck).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .graphs import Laplacian, sorted_matmul

MODES = ("single", "multi", "dynamic", "none")
N_GCN_LAYERS = 2
PROB_CLAMP = 1e-12
CHECKPOINT_VERSION = 1

GRAPH_ORDER = ("shareholding", "industry", "topicality")


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


_ACTIVATIONS = {
    "relu": relu,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class ModelDims:
    """Width of every tensor in the network."""

    n_stocks: int
    n_features: int = 4
    gcn_hidden: int = 16
    gcn_out: int = 32
    gru_hidden: int = 32
    gru_out: int = 32
    kernel_size: int = 1

    def __post_init__(self) -> None:
        if self.n_stocks < 2:
            raise ValueError("need at least 2 stocks")
        for name in ("n_features", "gcn_hidden", "gcn_out", "gru_hidden", "gru_out", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Tensor iteration order is fixed: optimizer updates, checkpoints and
# gradient reports all rely on it.
_TENSOR_ORDER = (
    "gcn_w1",
    "gcn_w2",
    "poly_coeffs",
    "graph_coeffs",
    "dynamic_l",
    "gru_wr",
    "gru_wu",
    "gru_wh",
    "gru_br",
    "gru_bu",
    "gru_bh",
    "gru_wg",
    "out_w",
)


@dataclass
class ModelParams:
    """Every trainable tensor; GCN-side tensors are None when the mode omits them."""

    mode: str
    dims: ModelDims
    seed: int
    gcn_w1: np.ndarray | None
    gcn_w2: np.ndarray | None
    poly_coeffs: np.ndarray | None  # (layers, K)
    graph_coeffs: np.ndarray | None  # (3,) for multi mode
    dynamic_l: np.ndarray | None  # (N, N) for dynamic mode
    gru_wr: np.ndarray
    gru_wu: np.ndarray
    gru_wh: np.ndarray
    gru_br: np.ndarray
    gru_bu: np.ndarray
    gru_bh: np.ndarray
    gru_wg: np.ndarray
    out_w: np.ndarray

    @property
    def gcn_width(self) -> int:
        """Width of the cross-effect features fed to the GRU (0 for mode none)."""
        return 0 if self.mode == "none" else self.dims.gcn_out

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        return [
            (name, getattr(self, name))
            for name in _TENSOR_ORDER
            if getattr(self, name) is not None
        ]

    def copy(self) -> "ModelParams":
        kwargs = {
            name: (None if getattr(self, name) is None else getattr(self, name).copy())
            for name in _TENSOR_ORDER
        }
        return ModelParams(mode=self.mode, dims=self.dims, seed=self.seed, **kwargs)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        d = self.dims
        gru_in = d.gru_hidden + d.n_features + self.gcn_width
        expected: dict[str, tuple[int, ...] | None] = {
            "gcn_w1": (d.n_features, d.gcn_hidden),
            "gcn_w2": (d.gcn_hidden, d.gcn_out),
            "poly_coeffs": (N_GCN_LAYERS, d.kernel_size),
            "graph_coeffs": (3,),
            "dynamic_l": (d.n_stocks, d.n_stocks),
            "gru_wr": (gru_in, d.gru_hidden),
            "gru_wu": (gru_in, d.gru_hidden),
            "gru_wh": (gru_in, d.gru_hidden),
            "gru_br": (d.gru_hidden,),
            "gru_bu": (d.gru_hidden,),
            "gru_bh": (d.gru_hidden,),
            "gru_wg": (d.gru_hidden, d.gru_out),
            "out_w": (d.gru_out, 1),
        }
        if self.mode in ("dynamic", "none"):
            expected["poly_coeffs"] = None
        if self.mode != "multi":
            expected["graph_coeffs"] = None
        if self.mode != "dynamic":
            expected["dynamic_l"] = None
        if self.mode == "none":
            expected["gcn_w1"] = expected["gcn_w2"] = None
        for name, shape in expected.items():
            value = getattr(self, name)
            if shape is None:
                if value is not None:
                    raise ValueError(f"{name} must be absent in mode {self.mode!r}")
                continue
            if value is None:
                raise ValueError(f"{name} missing in mode {self.mode!r}")
            if value.shape != shape:
                raise ValueError(f"{name} has shape {value.shape}, expected {shape}")
            if not np.isfinite(value).all():
                raise ValueError(f"{name} contains non-finite entries")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(dims: ModelDims, mode: str, seed: int) -> ModelParams:
    """Deterministic initialization.

    Weight matrices are uniform in +-sqrt(6 / (fan_in + fan_out)), biases are
    zero, polynomial coefficients start at 1, the three graph coefficients at
    1/3 each, and the dynamic mixing matrix at I plus uniform +-0.01 noise.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    d = dims
    use_gcn = mode != "none"
    gru_in = d.gru_hidden + d.n_features + (d.gcn_out if use_gcn else 0)

    gcn_w1 = _glorot(rng, d.n_features, d.gcn_hidden, (d.n_features, d.gcn_hidden)) if use_gcn else None
    gcn_w2 = _glorot(rng, d.gcn_hidden, d.gcn_out, (d.gcn_hidden, d.gcn_out)) if use_gcn else None
    poly = np.ones((N_GCN_LAYERS, d.kernel_size)) if mode in ("single", "multi") else None
    graph = np.full(3, 1.0 / 3.0) if mode == "multi" else None
    dynamic = (
        np.eye(d.n_stocks) + rng.uniform(-0.01, 0.01, size=(d.n_stocks, d.n_stocks))
        if mode == "dynamic"
        else None
    )
    params = ModelParams(
        mode=mode,
        dims=dims,
        seed=seed,
        gcn_w1=gcn_w1,
        gcn_w2=gcn_w2,
        poly_coeffs=poly,
        graph_coeffs=graph,
        dynamic_l=dynamic,
        gru_wr=_glorot(rng, gru_in, d.gru_hidden, (gru_in, d.gru_hidden)),
        gru_wu=_glorot(rng, gru_in, d.gru_hidden, (gru_in, d.gru_hidden)),
        gru_wh=_glorot(rng, gru_in, d.gru_hidden, (gru_in, d.gru_hidden)),
        gru_br=np.zeros(d.gru_hidden),
        gru_bu=np.zeros(d.gru_hidden),
        gru_bh=np.zeros(d.gru_hidden),
        gru_wg=_glorot(rng, d.gru_hidden, d.gru_out, (d.gru_hidden, d.gru_out)),
        out_w=_glorot(rng, d.gru_out, 1, (d.gru_out, 1)),
    )
    params.validate()
    return params


# ---------------------------------------------------------------------------
# propagators


@dataclass(frozen=True)
class Propagators:
    """Per-layer N x N mixing matrices plus the power bases they came from."""

    mode: str
    per_layer: tuple[np.ndarray, ...]
    bases: tuple[tuple[np.ndarray, ...], ...]  # one tuple of K matrices per graph


def power_basis(laplacian: Laplacian, kernel_size: int) -> tuple[np.ndarray, ...]:
    """Matrices multiplied by the polynomial coefficients theta_0..theta_{K-1}.

    K = 1 swaps in the renormalized one-hop propagator (theta_0 * I would mix
    nothing); K >= 2 returns (I, L, L^2, ...).
    """
    if kernel_size < 1:
        raise ValueError("kernel size must be >= 1")
    if kernel_size == 1:
        return (laplacian.one_hop,)
    powers = [np.eye(laplacian.n), laplacian.matrix]
    for _ in range(kernel_size - 2):
        powers.append(sorted_matmul(powers[-1], laplacian.matrix))
    return tuple(powers)


def build_propagators(
    params: ModelParams, laplacians: Sequence[Laplacian] | None
) -> Propagators:
    """Assemble the per-layer propagators for the current parameter values."""
    mode = params.mode
    k = params.dims.kernel_size
    if mode == "none":
        return Propagators(mode, (), ())
    if mode == "dynamic":
        return Propagators(mode, (params.dynamic_l, params.dynamic_l), ())

    laplacians = tuple(laplacians or ())
    needed = 1 if mode == "single" else 3
    if len(laplacians) != needed:
        raise ValueError(f"mode {mode!r} needs {needed} laplacian(s), got {len(laplacians)}")
    for lap in laplacians:
        if lap.n != params.dims.n_stocks:
            raise ValueError("laplacian size does not match the universe")
    bases = tuple(power_basis(lap, k) for lap in laplacians)

    per_layer = []
    for layer in range(N_GCN_LAYERS):
        theta = params.poly_coeffs[layer]
        if mode == "single":
            combo = [bases[0][i] for i in range(k)]
        else:
            gc = params.graph_coeffs
            combo = [
                gc[0] * bases[0][i] + gc[1] * bases[1][i] + gc[2] * bases[2][i]
                for i in range(k)
            ]
        prop = theta[0] * combo[0]
        for i in range(1, k):
            prop = prop + theta[i] * combo[i]
        per_layer.append(prop)
    return Propagators(mode, tuple(per_layer), bases)


def assemble_propagator(
    mode: str,
    laplacians: Sequence[Laplacian] | None,
    params: ModelParams,
    layer: int = 0,
) -> np.ndarray:
    """The N x N mixing matrix for one GCN layer under the given mode."""
    if mode != params.mode:
        raise ValueError(f"mode {mode!r} does not match params mode {params.mode!r}")
    if mode == "none":
        raise ValueError("mode 'none' has no propagator")
    return build_propagators(params, laplacians).per_layer[layer]


def _propagator_param_grads(
    params: ModelParams, props: Propagators, d_props: list[np.ndarray]
) -> dict[str, np.ndarray]:
    """Project propagator gradients onto the coefficients that built them."""
    mode = params.mode
    if mode == "dynamic":
        return {"dynamic_l": d_props[0] + d_props[1]}
    k = params.dims.kernel_size
    grads: dict[str, np.ndarray] = {}
    if mode == "single":
        basis = props.bases[0]
        d_poly = np.zeros_like(params.poly_coeffs)
        for layer in range(N_GCN_LAYERS):
            for i in range(k):
                d_poly[layer, i] = np.sum(d_props[layer] * basis[i])
        grads["poly_coeffs"] = d_poly
        return grads
    # multi: prop_l = sum_i theta_{l,i} (gc_0 B0_i + gc_1 B1_i + gc_2 B2_i)
    gc = params.graph_coeffs
    d_poly = np.zeros_like(params.poly_coeffs)
    d_gc = np.zeros_like(gc)
    for layer in range(N_GCN_LAYERS):
        theta = params.poly_coeffs[layer]
        for i in range(k):
            inner = [np.sum(d_props[layer] * props.bases[g][i]) for g in range(3)]
            d_poly[layer, i] = gc[0] * inner[0] + gc[1] * inner[1] + gc[2] * inner[2]
            for g in range(3):
                d_gc[g] += theta[i] * inner[g]
    grads["poly_coeffs"] = d_poly
    grads["graph_coeffs"] = d_gc
    return grads


# ---------------------------------------------------------------------------
# layers


def gcn_layer(
    h_in: np.ndarray,
    propagator: np.ndarray,
    weight: np.ndarray,
    activation: str = "relu",
) -> np.ndarray:
    """activation(propagator @ h_in @ weight)."""
    act = _ACTIVATIONS[activation]
    out = act(sorted_matmul(propagator, h_in) @ weight)
    if not np.isfinite(out).all():
        raise ValueError("non-finite output in gcn layer")
    return out


def multi_gcn_forward(
    x_t: np.ndarray, propagators: Sequence[np.ndarray], params: ModelParams
) -> np.ndarray:
    """Two stacked GCN layers producing the cross-effect features for one day."""
    return _gcn_traced(x_t, propagators, params)[-1]


def _gcn_traced(x_t, propagators, params):
    m1 = sorted_matmul(propagators[0], x_t)
    z1 = m1 @ params.gcn_w1
    a1 = relu(z1)
    m2 = sorted_matmul(propagators[1], a1)
    z2 = m2 @ params.gcn_w2
    out = relu(z2)
    if not np.isfinite(z1).all():
        raise ValueError("non-finite output in gcn layer 1")
    if not np.isfinite(z2).all():
        raise ValueError("non-finite output in gcn layer 2")
    return m1, z1, a1, m2, z2, out


def gru_step(
    h_prev: np.ndarray,
    x_t: np.ndarray,
    x_gcn: np.ndarray,
    params: ModelParams,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """One GRU step over all stocks; weights are shared across the node axis.

    Returns the new hidden state and the gate trace needed by the backward
    pass. Features are concatenated as [H_{t-1}, X_t, X_t^gcn].
    """
    concat_g = np.hstack([h_prev, x_t, x_gcn])
    r = sigmoid(concat_g @ params.gru_wr + params.gru_br)
    u = sigmoid(concat_g @ params.gru_wu + params.gru_bu)
    concat_h = np.hstack([r * h_prev, x_t, x_gcn])
    h_cand = np.tanh(concat_h @ params.gru_wh + params.gru_bh)
    h_t = u * h_prev + (1.0 - u) * h_cand
    if not (np.isfinite(r).all() and np.isfinite(u).all() and np.isfinite(h_cand).all()):
        raise ValueError("non-finite gate values in gru step")
    trace = {"concat_g": concat_g, "concat_h": concat_h, "r": r, "u": u, "h_cand": h_cand}
    return h_t, trace


def gru_output(h_t: np.ndarray, w_g: np.ndarray) -> np.ndarray:
    """sigmoid(H_t @ Wg)."""
    return sigmoid(h_t @ w_g)


def predict(x_gru: np.ndarray, out_w: np.ndarray) -> np.ndarray:
    """Per-stock up-probability: sigmoid(X^gru @ w), flattened to (N,)."""
    return sigmoid(x_gru @ out_w).ravel()


# ---------------------------------------------------------------------------
# full window forward / backward


@dataclass
class StepTrace:
    x: np.ndarray
    m1: np.ndarray | None
    z1: np.ndarray | None
    a1: np.ndarray | None
    m2: np.ndarray | None
    z2: np.ndarray | None
    gcn_out: np.ndarray
    concat_g: np.ndarray
    concat_h: np.ndarray
    r: np.ndarray
    u: np.ndarray
    h_cand: np.ndarray


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, stored per time step."""

    steps: list[StepTrace]
    hidden: list[np.ndarray]  # length P + 1, hidden[0] = 0
    x_gru: np.ndarray
    yhat: np.ndarray
    propagators: Propagators


def forward_window(
    window: np.ndarray, params: ModelParams, props: Propagators
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network over one P-day window; H_0 = 0.

    Returns the per-stock probabilities for the target day and the full
    activation trace.
    """
    lag, n, _ = window.shape
    d = params.dims
    h = np.zeros((n, d.gru_hidden))
    hidden = [h]
    steps: list[StepTrace] = []
    use_gcn = params.mode != "none"
    empty = np.zeros((n, 0))
    for t in range(lag):
        x_t = window[t]
        if use_gcn:
            m1, z1, a1, m2, z2, gcn_out = _gcn_traced(x_t, props.per_layer, params)
        else:
            m1 = z1 = a1 = m2 = z2 = None
            gcn_out = empty
        h, gate = gru_step(h, x_t, gcn_out, params)
        steps.append(
            StepTrace(x=x_t, m1=m1, z1=z1, a1=a1, m2=m2, z2=z2, gcn_out=gcn_out, **gate)
        )
        hidden.append(h)
    x_gru = gru_output(h, params.gru_wg)
    yhat = predict(x_gru, params.out_w)
    return yhat, ForwardTrace(steps=steps, hidden=hidden, x_gru=x_gru, yhat=yhat, propagators=props)


def backward_window(
    trace: ForwardTrace, labels: np.ndarray, params: ModelParams
) -> dict[str, np.ndarray]:
    """Analytic gradients of the mean cross-entropy loss for one sample.

    Reverse-mode differentiation through the predictor, the GRU recurrence and
    both GCN layers, including the propagator coefficients (polynomial, graph
    and dynamic). Probabilities outside the loss clamp contribute zero
    gradient, matching the clamped loss exactly.
    """
    d = params.dims
    n = d.n_stocks
    hsz, fsz, gsz = d.gru_hidden, d.n_features, params.gcn_width
    lag = len(trace.steps)
    y = np.asarray(labels, dtype=np.float64)
    p = trace.yhat

    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    d_zout = np.where(inside, (p - y) / n, 0.0)[:, None]

    grads: dict[str, np.ndarray] = {"out_w": trace.x_gru.T @ d_zout}
    d_xgru = d_zout @ params.out_w.T
    d_s = d_xgru * trace.x_gru * (1.0 - trace.x_gru)
    grads["gru_wg"] = trace.hidden[lag].T @ d_s
    d_h = d_s @ params.gru_wg.T

    g_wr = np.zeros_like(params.gru_wr)
    g_wu = np.zeros_like(params.gru_wu)
    g_wh = np.zeros_like(params.gru_wh)
    g_br = np.zeros_like(params.gru_br)
    g_bu = np.zeros_like(params.gru_bu)
    g_bh = np.zeros_like(params.gru_bh)
    use_gcn = params.mode != "none"
    if use_gcn:
        g_w1 = np.zeros_like(params.gcn_w1)
        g_w2 = np.zeros_like(params.gcn_w2)
        d_props = [np.zeros((n, n)), np.zeros((n, n))]

    for t in reversed(range(lag)):
        st = trace.steps[t]
        h_prev = trace.hidden[t]
        d_u = d_h * (h_prev - st.h_cand)
        d_hc = d_h * (1.0 - st.u)
        d_hprev = d_h * st.u

        d_ah = d_hc * (1.0 - st.h_cand**2)
        g_wh += st.concat_h.T @ d_ah
        g_bh += d_ah.sum(axis=0)
        d_concat_h = d_ah @ params.gru_wh.T
        d_rh = d_concat_h[:, :hsz]
        d_gcn = d_concat_h[:, hsz + fsz :]
        d_r = d_rh * h_prev
        d_hprev += d_rh * st.r

        d_ar = d_r * st.r * (1.0 - st.r)
        d_au = d_u * st.u * (1.0 - st.u)
        g_wr += st.concat_g.T @ d_ar
        g_br += d_ar.sum(axis=0)
        g_wu += st.concat_g.T @ d_au
        g_bu += d_au.sum(axis=0)
        d_concat_g = d_ar @ params.gru_wr.T + d_au @ params.gru_wu.T
        d_hprev += d_concat_g[:, :hsz]
        if gsz:
            d_gcn = d_gcn + d_concat_g[:, hsz + fsz :]

        if use_gcn:
            d_z2 = d_gcn * (st.z2 > 0)
            g_w2 += st.m2.T @ d_z2
            d_m2 = d_z2 @ params.gcn_w2.T
            d_props[1] += d_m2 @ st.a1.T
            d_a1 = trace.propagators.per_layer[1].T @ d_m2
            d_z1 = d_a1 * (st.z1 > 0)
            g_w1 += st.m1.T @ d_z1
            d_m1 = d_z1 @ params.gcn_w1.T
            d_props[0] += d_m1 @ st.x.T

        d_h = d_hprev

    grads.update(
        gru_wr=g_wr, gru_wu=g_wu, gru_wh=g_wh, gru_br=g_br, gru_bu=g_bu, gru_bh=g_bh
    )
    if use_gcn:
        grads["gcn_w1"] = g_w1
        grads["gcn_w2"] = g_w2
        grads.update(_propagator_param_grads(params, trace.propagators, d_props))
    return grads


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    """Versioned binary dump; tensors round-trip bit-exactly."""
    params.validate()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "mode": params.mode,
        "seed": params.seed,
        "dims": params.dims.to_dict(),
        "extra": extra or {},
    }
    tensors = {name: value for name, value in params.named_tensors()}
    buffer = io.BytesIO()
    np.savez(buffer, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **tensors)
    Path(path).write_bytes(buffer.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        tensors = {name: data[name] for name in data.files if name != "__meta__"}
    dims = ModelDims(**meta["dims"])
    kwargs = {name: tensors.get(name) for name in _TENSOR_ORDER}
    params = ModelParams(mode=meta["mode"], dims=dims, seed=meta["seed"], **kwargs)
    params.validate()
    return params, meta
