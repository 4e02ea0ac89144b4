"""The ObsNODE model.

Latent dynamics in triangular observable normal form: the state is split into
m blocks of size d_y, block i drifts with z^(i+1) plus a learned correction
phi_i(z^(1..i), a), the last block is fully learned, and the observation is
the first block. A gated recurrent encoder with a learnable imputation layer
turns an irregular observation/treatment history into a point estimate of the
filtering state, from which forecasts under hypothetical treatment paths are
produced by integrating the field forward.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .odeint import ControlPath, IntegrationConfig, integrate


@dataclass
class ObsNodeConfig:
    d_y: int
    m: int
    d_a: int
    phi_hidden_dim: int = 64
    phi_layers: int = 2
    phi_activation: str = "leakyrelu"
    encoder_hidden_dim: int = 64
    rollout_mode: str = "long_horizon"
    recursive_chunk: float = 1.0
    treatment_scale: tuple | None = None

    def __post_init__(self):
        if self.d_y < 1 or self.m < 1 or self.d_a < 0:
            raise ConfigError("d_y and m must be >= 1, d_a >= 0")
        if self.treatment_scale is not None:
            self.treatment_scale = tuple(float(s) for s in self.treatment_scale)
            if len(self.treatment_scale) != self.d_a:
                raise ConfigError("treatment_scale must have d_a entries")
            if any(s <= 0 for s in self.treatment_scale):
                raise ConfigError("treatment_scale entries must be positive")
        if self.phi_activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.phi_activation!r}")
        if self.rollout_mode not in ("long_horizon", "recursive"):
            raise ConfigError(f"unknown rollout_mode {self.rollout_mode!r}")
        if self.rollout_mode == "recursive" and self.recursive_chunk <= 0:
            raise ConfigError("recursive_chunk must be positive")

    @property
    def d_z(self):
        return self.m * self.d_y

    @property
    def encoder_input_dim(self):
        # (imputed y, mask, treatment, delta-t)
        return 2 * self.d_y + self.d_a + 1


@dataclass
class EncodedState:
    z: Tensor  # (n, d_z)
    t: float


@dataclass
class History:
    """Per-time observation/treatment record, batched over units.

    times: (T,); y, mask: (T, n, d_y); a: (T, n, d_a). Missing y entries may
    hold any placeholder; mask defines validity.
    """

    times: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.times.size == 0:
            raise ValueError("History: empty history")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("History: times must be ascending")

    def extended(self, times, y, mask, a):
        return History(
            np.concatenate([self.times, np.asarray(times, dtype=np.float64)]),
            np.concatenate([self.y, y]),
            np.concatenate([self.mask, mask]),
            np.concatenate([self.a, a]),
        )


def _linear(x, W, b):
    n = x.data.shape[0]
    return ad.add(ad.matmul(x, W), ad.expand(b, (n, b.data.shape[1])))


class ObsNodeParams:
    """All learnable parameters: phi-block MLPs, gated recurrent encoder,
    imputation constants, and the affine initial-state head."""

    def __init__(self, cfg: ObsNodeConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_y, m, d_a = cfg.d_y, cfg.m, cfg.d_a
        H = cfg.encoder_hidden_dim

        def w(shape, scale=None):
            if scale is None:
                scale = 1.0 / np.sqrt(shape[0])
            return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        # phi-block MLPs; the output layer starts at zero so the initial
        # dynamics is the pure chain of integrators.
        self.phi = []
        for i in range(1, m + 1):
            dims = [i * d_y + d_a] + [cfg.phi_hidden_dim] * cfg.phi_layers + [d_y]
            layers = []
            for l, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
                last = l == len(dims) - 2
                layers.append((zeros((din, dout)) if last else w((din, dout)),
                               zeros((1, dout))))
            self.phi.append(layers)

        x_dim = cfg.encoder_input_dim
        self.enc = {}
        for gate in ("r", "u", "h"):
            self.enc["W" + gate] = w((x_dim, H))
            self.enc["U" + gate] = w((H, H))
            self.enc["b" + gate] = zeros((1, H))
        self.b_impute = zeros((1, d_y))
        self.head_W = w((H, cfg.d_z), scale=0.05 / np.sqrt(H))
        self.head_b = zeros((1, cfg.d_z))

    def named_parameters(self):
        out = []
        for i, layers in enumerate(self.phi, start=1):
            for l, (W, b) in enumerate(layers):
                out.append((f"phi{i}.W{l}", W))
                out.append((f"phi{i}.b{l}", b))
        for key in ("Wr", "Ur", "br", "Wu", "Uu", "bu", "Wh", "Uh", "bh"):
            out.append((f"enc.{key}", self.enc[key]))
        out.append(("b_impute", self.b_impute))
        out.append(("head.W", self.head_W))
        out.append(("head.b", self.head_b))
        return out

    def tensors(self):
        return [t for _, t in self.named_parameters()]

    def load_state(self, arrays: dict):
        for name, t in self.named_parameters():
            if name not in arrays:
                raise ValueError(f"checkpoint missing tensor {name!r}")
            if tuple(arrays[name].shape) != t.data.shape:
                raise ValueError(f"checkpoint tensor {name!r} has shape "
                                 f"{arrays[name].shape}, expected {t.data.shape}")
            t.data = arrays[name].copy()

    def _mlp(self, i, x):
        act = ad.ACTIVATIONS[self.cfg.phi_activation]
        layers = self.phi[i]
        for W, b in layers[:-1]:
            x = act(_linear(x, W, b))
        W, b = layers[-1]
        return _linear(x, W, b)


def _as_batch(t):
    if isinstance(t, Tensor):
        return (ad.reshape(t, (1, t.data.shape[0])), True) if t.data.ndim == 1 else (t, False)
    arr = np.asarray(t, dtype=np.float64)
    return (Tensor(arr.reshape(1, -1)), True) if arr.ndim == 1 else (Tensor(arr), False)


def triangular_rhs(z, a, params: ObsNodeParams):
    """Vector field of the triangular normal form; z (n, d_z), a (n, d_a)."""
    cfg = params.cfg
    z, squeeze = _as_batch(z)
    a, _ = _as_batch(a)
    if z.data.shape[1] != cfg.d_z:
        raise ValueError(f"triangular_rhs: state dim {z.data.shape[1]} != {cfg.d_z}")
    if a.data.shape[1] != cfg.d_a:
        raise ValueError(f"triangular_rhs: control dim {a.data.shape[1]} != {cfg.d_a}")
    if a.data.shape[0] == 1 and z.data.shape[0] > 1:
        a = ad.expand(a, (z.data.shape[0], cfg.d_a))
    if cfg.treatment_scale is not None and cfg.d_a:
        inv = 1.0 / np.asarray(cfg.treatment_scale)
        a = ad.hadamard(a, Tensor(np.broadcast_to(inv, a.data.shape).copy()))
    d_y, m = cfg.d_y, cfg.m
    blocks = []
    for i in range(1, m + 1):
        seen = ad.slice_axis(z, 0, i * d_y, axis=1)
        inp = ad.concat([seen, a], axis=1) if cfg.d_a else seen
        phi = params._mlp(i - 1, inp)
        if i < m:
            nxt = ad.slice_axis(z, i * d_y, (i + 1) * d_y, axis=1)
            blocks.append(ad.add(nxt, phi))
        else:
            blocks.append(phi)
    out = ad.concat(blocks, axis=1)
    return ad.reshape(out, (cfg.d_z,)) if squeeze else out


def emit(z, cfg: ObsNodeConfig):
    """Observation map: the first state block."""
    z, squeeze = _as_batch(z)
    if z.data.shape[1] != cfg.d_z:
        raise ValueError(f"emit: state dim {z.data.shape[1]} != {cfg.d_z}")
    y = ad.slice_axis(z, 0, cfg.d_y, axis=1)
    return ad.reshape(y, (cfg.d_y,)) if squeeze else y


def impute(y, mask, b):
    """Replace unobserved components with the learnable constants b."""
    y, squeeze = _as_batch(y)
    mask, _ = _as_batch(mask)
    b, _ = _as_batch(b)
    n = y.data.shape[0]
    ones = Tensor(np.ones_like(mask.data))
    b_full = ad.expand(b, (n, b.data.shape[1]))
    out = ad.add(ad.hadamard(y, mask), ad.hadamard(b_full, ad.sub(ones, mask)))
    return ad.reshape(out, (out.data.shape[1],)) if squeeze else out


def _gru_step(x, h, enc):
    r = ad.sigmoid(ad.add(_linear(x, enc["Wr"], enc["br"]), ad.matmul(h, enc["Ur"])))
    u = ad.sigmoid(ad.add(_linear(x, enc["Wu"], enc["bu"]), ad.matmul(h, enc["Uu"])))
    cand = ad.tanh(ad.add(_linear(x, enc["Wh"], enc["bh"]),
                          ad.matmul(ad.hadamard(r, h), enc["Uh"])))
    ones = Tensor(np.ones_like(u.data))
    return ad.add(ad.hadamard(ad.sub(ones, u), h), ad.hadamard(u, cand))


def encode(history: History, params: ObsNodeParams) -> EncodedState:
    """Run the recurrent cell over the history and map the final hidden state
    to a latent point estimate at the last history time."""
    cfg = params.cfg
    T = history.times.size
    n = history.y.shape[1]
    if history.y.shape[2] != cfg.d_y or history.a.shape[2] != cfg.d_a:
        raise ValueError("encode: history dimensions do not match config")
    h = Tensor(np.zeros((n, cfg.encoder_hidden_dim)))
    prev_t = history.times[0]
    for k in range(T):
        y = Tensor(history.y[k])
        mask = Tensor(history.mask[k])
        a_raw = history.a[k]
        if cfg.treatment_scale is not None and cfg.d_a:
            a_raw = a_raw / np.asarray(cfg.treatment_scale)
        a = Tensor(a_raw)
        dt = Tensor(np.full((n, 1), history.times[k] - prev_t))
        prev_t = history.times[k]
        ytil = impute(y, mask, params.b_impute)
        x = ad.concat([ytil, mask, a, dt], axis=1)
        h = _gru_step(x, h, params.enc)
    z = _linear(h, params.head_W, params.head_b)
    return EncodedState(z=z, t=float(history.times[-1]))


def forecast(state: EncodedState, control: ControlPath, query_times, params: ObsNodeParams,
             int_cfg: IntegrationConfig, history: History | None = None,
             re_encode=None):
    """Predicted outcomes at `query_times` under the given treatment path.

    Returns a list of (n, d_y) Tensors aligned with query_times. In recursive
    rollout mode the horizon is covered in chunks: each chunk's predictions
    are appended to the history as pseudo-observations (mask all ones)
    together with the applied treatments, the encoder is re-run, and the next
    chunk starts from the refreshed state. `re_encode` overrides the encoder
    (used to test against a perfect state reconstructor).
    """
    cfg = params.cfg
    query_times = [float(t) for t in sorted(query_times)]
    if not query_times:
        return []
    field = lambda z, a, _p: triangular_rhs(z, a, params)

    if cfg.rollout_mode == "long_horizon":
        states = integrate(field, state.z, control, state.t, max(query_times),
                           int_cfg, query_times)
        return [emit(s, cfg) for s in states]
    if history is None:
        raise ValueError("forecast: recursive rollout needs the encoding history")

    preds = []
    cur = state
    remaining = list(query_times)
    t_end = max(query_times)
    while remaining:
        chunk_end = min(cur.t + cfg.recursive_chunk, t_end)
        qs = [q for q in remaining if q <= chunk_end + 1e-12]
        step_queries = sorted(set(qs + [chunk_end]))
        states = integrate(field, cur.z, control, cur.t, chunk_end, int_cfg, step_queries)
        by_time = dict(zip(step_queries, states))
        preds.extend(emit(by_time[q], cfg) for q in qs)
        remaining = remaining[len(qs):]
        if not remaining:
            break
        n = cur.z.data.shape[0]
        new_times = np.array(step_queries)
        new_y = np.stack([emit(by_time[t], cfg).data for t in step_queries])
        new_mask = np.ones((len(step_queries), n, cfg.d_y))
        new_a = np.stack([np.broadcast_to(control.value_at(t), (n, cfg.d_a)).copy()
                          for t in step_queries])
        history = history.extended(new_times, new_y, new_mask, new_a)
        if re_encode is not None:
            z = re_encode(history)
            cur = EncodedState(z=z if isinstance(z, Tensor) else Tensor(z), t=chunk_end)
        else:
            cur = encode(history, params)
            cur = EncodedState(z=cur.z, t=chunk_end)
    return preds


def observability_probe(params: ObsNodeParams, control: ControlPath, z_pairs,
                        horizon: float, n_samples: int = 50,
                        int_cfg: IntegrationConfig | None = None):
    """Min over state pairs of the max-over-time output discrepancy under a
    shared control; strictly positive values witness distinguishability."""
    cfg = params.cfg
    if int_cfg is None:
        int_cfg = IntegrationConfig(method="rk4", step_size=horizon / max(n_samples, 1))
    times = np.linspace(0.0, horizon, n_samples + 1)[1:]
    field = lambda z, a, _p: triangular_rhs(z, a, params)
    best = np.inf
    for zeta, eta in z_pairs:
        zeta = np.asarray(zeta, dtype=np.float64).reshape(1, -1)
        eta = np.asarray(eta, dtype=np.float64).reshape(1, -1)
        if np.linalg.norm(zeta - eta) < 1e-3:
            raise ValueError("observability_probe: pair members too close")
        ya = integrate(field, Tensor(zeta), control, 0.0, horizon, int_cfg, times)
        yb = integrate(field, Tensor(eta), control, 0.0, horizon, int_cfg, times)
        disc = max(float(np.max(np.abs(emit(sa, cfg).data - emit(sb, cfg).data)))
                   for sa, sb in zip(ya, yb))
        best = min(best, disc)
    return best


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_model(path, params: ObsNodeParams, norm_stats=None, extra=None):
    meta = {"format_version": 1, "config": asdict(params.cfg), "cell": "gru"}
    if norm_stats is not None:
        meta["norm_stats"] = {"mean": list(map(float, norm_stats.mean)),
                              "std": list(map(float, norm_stats.std))}
    if extra:
        meta.update(extra)
    ad.save_checkpoint(path, params.named_parameters(), metadata=meta)


def load_model(path):
    from .train import NormStats  # local import to avoid a cycle

    arrays, meta = ad.load_checkpoint(path)
    if meta is None or "config" not in meta:
        raise ValueError("checkpoint is missing the model metadata header")
    cfg = ObsNodeConfig(**meta["config"])
    params = ObsNodeParams(cfg, np.random.default_rng(0))
    params.load_state(arrays)
    stats = None
    if "norm_stats" in meta:
        stats = NormStats(mean=np.array(meta["norm_stats"]["mean"]),
                          std=np.array(meta["norm_stats"]["std"]))
    return params, cfg, stats
