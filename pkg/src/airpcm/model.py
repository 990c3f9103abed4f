"""The four-stage forecaster: spatial correlation modelling (MSCM), patching
and embedding, masked meteorology-to-pollutant attention, and decoding.

All stages operate on a leading batch axis ``B`` of windows; the public
shapes in docstrings omit it where the batch is one window.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .data import WIND_DIRECTION, WIND_PAIR, WindowBatch, WindowSample, stack_windows
from .geo import StationGraph
from .tensor import Parameter, Tensor


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """Wraps a failure inside one forward stage with the stage name."""


@dataclass
class AirPCMConfig:
    N: int
    K: int
    C: int
    tau: int
    kappa: int
    d_h: int = 32
    d_p: int = 64
    patch_len: int = 6
    patch_stride: int = 3
    omega: Optional[int] = None
    n_heads: int = 4
    depth: int = 2
    gat_heads: int = 2
    dropout: float = 0.1
    k_neighbors: int = 5
    conv_kernel: int = 3
    ffn_mult: int = 2
    symmetric_graph: bool = True
    use_altitude: bool = False
    lag_reference: str = "patch"

    def __post_init__(self):
        if self.omega is None:
            self.omega = min(self.tau, 24)
        for name in ("N", "K", "C", "tau", "kappa", "d_h", "d_p", "patch_len", "patch_stride",
                     "omega", "n_heads", "depth", "gat_heads", "conv_kernel", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.patch_len > self.tau:
            raise ConfigError(f"patch_len {self.patch_len} exceeds tau {self.tau}")
        if self.patch_stride > self.patch_len:
            raise ConfigError(f"patch_stride {self.patch_stride} exceeds patch_len {self.patch_len}")
        if self.omega > self.tau:
            raise ConfigError(f"omega {self.omega} exceeds tau {self.tau}")
        if self.d_p % self.n_heads or self.d_h % self.n_heads:
            raise ConfigError(f"n_heads {self.n_heads} must divide d_p {self.d_p} and d_h {self.d_h}")
        if self.d_h % self.gat_heads:
            raise ConfigError(f"gat_heads {self.gat_heads} must divide d_h {self.d_h}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lag_reference not in ("patch", "window"):
            raise ConfigError("lag_reference must be 'patch' or 'window'")

    @property
    def n_patches(self) -> int:
        return patch_count(self.tau, self.patch_len, self.patch_stride)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AirPCMConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def patch_count(tau: int, patch_len: int, stride: int) -> int:
    return (tau - patch_len) // stride + 2


# ---------------------------------------------------------------- parameters

def _xavier(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape), {"kind": "xavier_uniform", "scale": bound}


def parameter_shapes(cfg: AirPCMConfig) -> "OrderedDict[str, Tuple[tuple, str]]":
    """Ordered ``name -> (shape, init kind)``; a pure function of the config."""
    s: "OrderedDict[str, Tuple[tuple, str]]" = OrderedDict()
    dh, dp, k = cfg.d_h, cfg.d_p, cfg.conv_kernel
    for branch, D in (("pol", cfg.K), ("met", cfg.C)):
        p = f"mscm.{branch}"
        s[f"{p}.conv_in.kernel"] = ((dh, D, 1, k), "xavier")
        s[f"{p}.conv_in.bias"] = ((dh,), "zeros")
        if cfg.use_altitude:
            s[f"{p}.altitude"] = ((dh,), "xavier")
        s[f"{p}.gat.weight"] = ((dh, dh), "xavier")
        s[f"{p}.gat.att_src"] = ((cfg.gat_heads, dh // cfg.gat_heads), "xavier")
        s[f"{p}.gat.att_dst"] = ((cfg.gat_heads, dh // cfg.gat_heads), "xavier")
        s[f"{p}.gat.bias"] = ((dh,), "zeros")
        for w in ("wq", "wk", "wv"):
            s[f"{p}.msa.{w}"] = ((dh, dh), "xavier")
        _ffn_shapes(s, f"{p}.ffn", dh, cfg.ffn_mult)
        s[f"{p}.conv_out.kernel"] = ((D, dh, 1, k), "xavier")
        s[f"{p}.conv_out.bias"] = ((D,), "zeros")
    s["pe.patch.weight"] = ((cfg.patch_len, dp), "xavier")
    s["pe.patch.bias"] = ((dp,), "zeros")
    s["pe.pos.weight"] = ((1, dp), "xavier")
    s["pe.pos.bias"] = ((dp,), "zeros")
    s["pe.time.weight"] = ((4, dp), "xavier")
    s["pe.time.bias"] = ((dp,), "zeros")
    s["mptc.met.weight"] = ((1, dp), "xavier")
    s["mptc.met.bias"] = ((dp,), "zeros")
    s["mptc.var_emb"] = ((cfg.C, dp), "xavier")
    s["mptc.lag_emb"] = ((cfg.omega, dp), "xavier")
    for w in ("wq", "wk", "wv"):
        s[f"mptc.{w}"] = ((dp, dp), "xavier")
    s["deco.fuse.weight"] = ((2 * dp, dp), "xavier")
    s["deco.fuse.bias"] = ((dp,), "zeros")
    for layer in range(cfg.depth):
        p = f"deco.block{layer}"
        for w in ("wq", "wk", "wv"):
            s[f"{p}.msa.{w}"] = ((dp, dp), "xavier")
        _ffn_shapes(s, f"{p}.ffn", dp, cfg.ffn_mult)
    s["deco.adapter.weight"] = ((cfg.K, dp, dp), "xavier")
    s["deco.adapter.bias"] = ((cfg.K, dp), "zeros")
    s["deco.out.weight"] = ((cfg.K, cfg.n_patches * dp, cfg.kappa), "xavier")
    s["deco.out.bias"] = ((cfg.K, cfg.kappa), "zeros")
    return s


def _ffn_shapes(s, p, d, mult):
    s[f"{p}.ln1.gain"] = ((d,), "ones")
    s[f"{p}.ln1.bias"] = ((d,), "zeros")
    s[f"{p}.w1"] = ((d, mult * d), "xavier")
    s[f"{p}.b1"] = ((mult * d,), "zeros")
    s[f"{p}.w2"] = ((mult * d, d), "xavier")
    s[f"{p}.b2"] = ((d,), "zeros")
    s[f"{p}.ln2.gain"] = ((d,), "ones")
    s[f"{p}.ln2.bias"] = ((d,), "zeros")


def _fans(shape):
    if len(shape) == 4:  # conv: C_out x C_in x 1 x k
        return shape[1] * shape[3], shape[0] * shape[3]
    if len(shape) == 3:  # per-pollutant stacks
        return shape[1], shape[2]
    if len(shape) == 2:
        return shape[0], shape[1]
    return 1, shape[0]


def init_weights(cfg: AirPCMConfig, seed: int = 0) -> "OrderedDict[str, Parameter]":
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Parameter]" = OrderedDict()
    for name, (shape, kind) in parameter_shapes(cfg).items():
        if kind == "zeros":
            data, spec = np.zeros(shape), {"kind": "zeros"}
        elif kind == "ones":
            data, spec = np.ones(shape), {"kind": "ones"}
        else:
            data, spec = _xavier(rng, shape, *_fans(shape))
        params[name] = Parameter(name, data, spec)
    return params


# ---------------------------------------------------------------- building blocks

def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, d) -> (..., heads, L, d/heads)"""
    *lead, L, d = x.shape
    x = tn.reshape(x, (*lead, L, heads, d // heads))
    nd = x.ndim
    return tn.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, dh) -> (..., L, heads*dh)"""
    *lead, h, L, d = x.shape
    nd = x.ndim
    x = tn.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return tn.reshape(x, (*lead, L, h * d))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None,
                         dropout: float = 0.0, rng=None, training: bool = False):
    """Scaled dot-product attention over the second-to-last axis.

    Returns the merged output and the (pre-dropout) attention weights.
    """
    d = q.shape[-1] // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = tn.matmul(qh, tn.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(d))
    attn = tn.masked_softmax(scores, mask)
    out = tn.matmul(tn.dropout(attn, dropout, rng, training), vh)
    return _merge_heads(out), attn


def ffn_block(x: Tensor, attended: Tensor, W: Dict[str, Parameter], p: str, dropout: float,
              rng=None, training: bool = False) -> Tensor:
    """Residual + layer norm around the attention output, then a residual FFN."""
    u = tn.layer_norm(x + tn.dropout(attended, dropout, rng, training), W[f"{p}.ln1.gain"], W[f"{p}.ln1.bias"])
    hidden = tn.relu(tn.linear(u, W[f"{p}.w1"], W[f"{p}.b1"]))
    f = tn.linear(tn.dropout(hidden, dropout, rng, training), W[f"{p}.w2"], W[f"{p}.b2"])
    return tn.layer_norm(u + tn.dropout(f, dropout, rng, training), W[f"{p}.ln2.gain"], W[f"{p}.ln2.bias"])


def _conv(x: Tensor, W, p: str) -> Tensor:
    b = W[f"{p}.bias"]
    return tn.conv2d(x, W[f"{p}.kernel"]) + tn.reshape(b, (b.shape[0], 1))


def gat_layer(h: Tensor, adjacency: np.ndarray, W, p: str, heads: int, dropout: float = 0.0,
              rng=None, training: bool = False) -> Tensor:
    """Graph attention over stations, applied independently per timestep.

    ``h`` is (..., N, d); ``adjacency[i, j] == 1`` lets station i attend to j
    (self-loops included).  Additive attention with leaky slope 0.2, ELU out.
    """
    *lead, n, d = h.shape
    z = _split_heads(tn.linear(h, W[f"{p}.weight"]), heads)  # (..., H, N, d/H)
    a_src = tn.reshape(W[f"{p}.att_src"], (heads, 1, d // heads))
    a_dst = tn.reshape(W[f"{p}.att_dst"], (heads, 1, d // heads))
    e_src = tn.tsum(z * a_src, axis=-1, keepdims=True)  # (..., H, N, 1)
    e_dst = tn.swapaxes(tn.tsum(z * a_dst, axis=-1, keepdims=True), -1, -2)  # (..., H, 1, N)
    scores = tn.leaky_relu(e_src + e_dst, 0.2)
    alpha = tn.masked_softmax(scores, adjacency)
    out = _merge_heads(tn.matmul(tn.dropout(alpha, dropout, rng, training), z))
    return tn.elu(out + W[f"{p}.bias"])


# ---------------------------------------------------------------- stages

def mscm_forward(x: Tensor, graph: StationGraph, W, cfg: AirPCMConfig, branch: str,
                 rng=None, training: bool = False, adjacency: Optional[np.ndarray] = None) -> Tensor:
    """Spatial correlation stage: (B, N, D, tau) -> (B, N, D, tau).

    Time-only conv into ``d_h`` channels, per-timestep GAT, spatial MSA with
    queries from the conv features and keys/values from the GAT output, a
    residual FFN, and a conv back to ``D`` channels.
    """
    x = tn.as_tensor(x)
    p = f"mscm.{branch}"
    D = cfg.K if branch == "pol" else cfg.C
    if x.ndim != 4 or x.shape[1:] != (cfg.N, D, cfg.tau):
        raise ConfigError(f"mscm[{branch}]: expected (B, {cfg.N}, {D}, {cfg.tau}), got {x.shape}")
    if graph.n != cfg.N:
        raise ConfigError(f"mscm[{branch}]: graph has {graph.n} stations, config N={cfg.N}")
    adj = graph.adjacency() if adjacency is None else adjacency
    h = tn.transpose(_conv(x, W, f"{p}.conv_in"), (0, 3, 1, 2))  # B, tau, N, d_h
    if cfg.use_altitude:
        alt = np.array([s.altitude for s in graph.stations]).reshape(cfg.N, 1) / 1000.0
        h = h + Tensor(alt) * W[f"{p}.altitude"]
    h_gat = gat_layer(h, adj, W, f"{p}.gat", cfg.gat_heads, cfg.dropout, rng, training)
    q = tn.linear(h, W[f"{p}.msa.wq"])
    k = tn.linear(h_gat, W[f"{p}.msa.wk"])
    v = tn.linear(h_gat, W[f"{p}.msa.wv"])
    att, _ = multi_head_attention(q, k, v, cfg.n_heads, None, cfg.dropout, rng, training)
    u = ffn_block(h, att, W, f"{p}.ffn", cfg.dropout, rng, training)
    return _conv(tn.transpose(u, (0, 2, 3, 1)), W, f"{p}.conv_out")


def patch_index(tau: int, patch_len: int, stride: int) -> np.ndarray:
    """(n_p, l_p) time indices into the series, end-padded by replication."""
    n_p = patch_count(tau, patch_len, stride)
    raw = np.arange(n_p)[:, None] * stride + np.arange(patch_len)[None, :]
    return np.minimum(raw, tau - 1)


def patchify(x, patch_len: int, stride: int):
    """Split the trailing time axis into overlapping patches.

    Works on numpy arrays and tensors: (..., tau) -> (..., n_p, l_p).
    """
    tau = x.shape[-1]
    if patch_len > tau:
        raise ValueError(f"patch length {patch_len} is longer than the sequence ({tau})")
    if stride < 1:
        raise ValueError("patch stride must be >= 1")
    idx = patch_index(tau, patch_len, stride)
    if isinstance(x, Tensor):
        return tn.getitem(x, (Ellipsis, idx))
    return np.asarray(x)[..., idx]


def patch_ends(cfg: AirPCMConfig) -> np.ndarray:
    """Last real (unpadded) timestep covered by each patch."""
    i = np.arange(cfg.n_patches)
    return np.minimum(i * cfg.patch_stride + cfg.patch_len - 1, cfg.tau - 1)


def time_features(start_times: np.ndarray, step_hours: float, cfg: AirPCMConfig) -> np.ndarray:
    """(B, n_p, 4) of (year/2000, month/12, day/31, hour/24) at each patch start."""
    starts = np.asarray(start_times, dtype="datetime64[s]").reshape(-1, 1)
    offs = np.arange(cfg.n_patches) * cfg.patch_stride * step_hours * 3600.0
    stamps = starts + offs.round().astype("timedelta64[s]")
    years = stamps.astype("datetime64[Y]")
    months = stamps.astype("datetime64[M]")
    days = stamps.astype("datetime64[D]")
    hours = stamps.astype("datetime64[h]")
    year = years.astype(np.int64) + 1970
    month = (months - years).astype(np.int64) + 1
    day = (days - months).astype(np.int64) + 1
    hour = (hours - days).astype(np.int64)
    return np.stack([year / 2000.0, month / 12.0, day / 31.0, hour / 24.0], axis=-1).astype(np.float64)


def embed_patches(patches: Tensor, start_times, step_hours: float, W, cfg: AirPCMConfig) -> Tensor:
    """Patch content + patch index + start-time projections: (B, N, K, n_p, d_p)."""
    content = tn.linear(patches, W["pe.patch.weight"], W["pe.patch.bias"])
    pos = tn.linear(Tensor(np.arange(cfg.n_patches, dtype=float)[:, None]), W["pe.pos.weight"], W["pe.pos.bias"])
    tf = time_features(start_times, step_hours, cfg)
    tim = tn.linear(Tensor(tf), W["pe.time.weight"], W["pe.time.bias"])  # B, n_p, d_p
    B = tf.shape[0]
    tim = tn.reshape(tim, (B, 1, 1, cfg.n_patches, cfg.d_p))
    return content + pos + tim


def build_causal_mask(cfg: AirPCMConfig) -> np.ndarray:
    """(n_p, omega) 0/1 mask: patch i may see met position j iff its absolute
    timestep ``tau - omega + j`` is no later than the patch's last real step.
    Rows with no admissible position fall back to position 0."""
    ends = patch_ends(cfg)
    abs_t = cfg.tau - cfg.omega + np.arange(cfg.omega)
    mask = (abs_t[None, :] <= ends[:, None]).astype(np.float64)
    empty = mask.sum(axis=1) == 0
    mask[empty, 0] = 1.0
    return mask


def met_embeddings(m_window: Tensor, W, cfg: AirPCMConfig) -> Tensor:
    """(B, N, C, omega) scalars -> (B, N, C*omega, d_p) with variable and lag identity."""
    B = m_window.shape[0]
    m = tn.reshape(m_window, (B, cfg.N, cfg.C, cfg.omega, 1))
    emb = tn.linear(m, W["mptc.met.weight"], W["mptc.met.bias"])
    emb = emb + tn.reshape(W["mptc.var_emb"], (cfg.C, 1, cfg.d_p)) + W["mptc.lag_emb"]
    return tn.reshape(emb, (B, cfg.N, cfg.C * cfg.omega, cfg.d_p))


def mptc_forward(p_emb: Tensor, m_window: Tensor, mask: np.ndarray, W, cfg: AirPCMConfig,
                 rng=None, training: bool = False):
    """Pollutant patches attend to lagged meteorology under the causal mask.

    Returns ``p_mcam`` (B, N, K, n_p, d_p) and attention weights
    (B, N, heads, K, n_p, C, omega).
    """
    m_window = tn.as_tensor(m_window)
    B = p_emb.shape[0]
    if m_window.shape != (B, cfg.N, cfg.C, cfg.omega):
        raise ConfigError(f"mptc: met window {m_window.shape} should be {(B, cfg.N, cfg.C, cfg.omega)}")
    n_p, KP = cfg.n_patches, cfg.K * cfg.n_patches
    p_met = met_embeddings(m_window, W, cfg)
    q = tn.reshape(tn.linear(p_emb, W["mptc.wq"]), (B, cfg.N, KP, cfg.d_p))
    k = tn.linear(p_met, W["mptc.wk"])
    v = tn.linear(p_met, W["mptc.wv"])
    full_mask = np.tile(np.repeat(mask[:, None, :], cfg.C, axis=1).reshape(n_p, cfg.C * cfg.omega), (cfg.K, 1))
    out, attn = multi_head_attention(q, k, v, cfg.n_heads, full_mask, cfg.dropout, rng, training)
    p_mcam = tn.reshape(out, (B, cfg.N, cfg.K, n_p, cfg.d_p))
    weights = attn.data.reshape(B, cfg.N, cfg.n_heads, cfg.K, n_p, cfg.C, cfg.omega)
    return p_mcam, weights


def deco_forward(p_mcam: Tensor, p_emb: Tensor, W, cfg: AirPCMConfig, rng=None, training: bool = False) -> Tensor:
    """Fuse, run ``depth`` temporal self-attention blocks over patches, then
    per-pollutant adapters and output projectors: (B, N, K, kappa)."""
    if p_mcam.shape != p_emb.shape or p_mcam.shape[-2:] != (cfg.n_patches, cfg.d_p):
        raise ConfigError(f"deco: inputs {p_mcam.shape} and {p_emb.shape} disagree with config")
    B = p_emb.shape[0]
    x = tn.linear(tn.concat([p_mcam, p_emb], axis=-1), W["deco.fuse.weight"], W["deco.fuse.bias"])
    for layer in range(cfg.depth):
        p = f"deco.block{layer}"
        q = tn.linear(x, W[f"{p}.msa.wq"])
        k = tn.linear(x, W[f"{p}.msa.wk"])
        v = tn.linear(x, W[f"{p}.msa.wv"])
        att, _ = multi_head_attention(q, k, v, cfg.n_heads, None, cfg.dropout, rng, training)
        x = ffn_block(x, att, W, f"{p}.ffn", cfg.dropout, rng, training)
    adapted = tn.relu(tn.matmul(x, W["deco.adapter.weight"])
                      + tn.reshape(W["deco.adapter.bias"], (cfg.K, 1, cfg.d_p)))
    flat = tn.reshape(adapted, (B, cfg.N, cfg.K, 1, cfg.n_patches * cfg.d_p))
    out = tn.reshape(tn.matmul(flat, W["deco.out.weight"]), (B, cfg.N, cfg.K, cfg.kappa))
    return out + W["deco.out.bias"]


# ---------------------------------------------------------------- attention map

@dataclass
class CausalAttentionMap:
    """Attention mass per (station, pollutant, met variable, lag position).

    ``weights`` is N x K x C x omega; position ``j`` is a lag of
    ``omega - 1 - j`` steps (most recent last).  With ``lag_reference ==
    'patch'`` lags are measured back from the end of each querying patch,
    otherwise from the end of the input window.
    """
    weights: np.ndarray
    station_ids: List[str]
    pollutant_names: List[str]
    met_names: List[str]
    step_hours: float
    lag_reference: str = "patch"

    @property
    def omega(self) -> int:
        return self.weights.shape[-1]

    def lags(self) -> np.ndarray:
        return self.omega - 1 - np.arange(self.omega)

    def merged(self) -> "CausalAttentionMap":
        """Sum the wind-direction (sin, cos) pair back into one variable."""
        if not all(n in self.met_names for n in WIND_PAIR):
            return self
        i, j = self.met_names.index(WIND_PAIR[0]), self.met_names.index(WIND_PAIR[1])
        keep = [c for c in range(len(self.met_names)) if c != j]
        w = self.weights.copy()
        w[:, :, i] += w[:, :, j]
        names = [WIND_DIRECTION if c == i else self.met_names[c] for c in keep]
        return CausalAttentionMap(w[:, :, keep], self.station_ids, self.pollutant_names, names,
                                  self.step_hours, self.lag_reference)

    def mean_lag(self, pollutant: int, variable: int, station: Optional[int] = None) -> float:
        """Attention-mass-weighted mean lag (in steps) for one pollutant/variable pair."""
        w = self.weights[:, pollutant, variable] if station is None else self.weights[station, pollutant, variable][None]
        w = w.sum(axis=0)
        return float((w * self.lags()).sum() / w.sum())

    @staticmethod
    def average(maps: Sequence["CausalAttentionMap"]) -> "CausalAttentionMap":
        first = maps[0]
        w = np.mean([m.weights for m in maps], axis=0)
        return CausalAttentionMap(w, first.station_ids, first.pollutant_names, first.met_names,
                                  first.step_hours, first.lag_reference)


def attention_to_lag_mass(weights: np.ndarray, cfg: AirPCMConfig) -> np.ndarray:
    """Head- and patch-averaged attention, (B, N, heads, K, n_p, C, omega) -> (B, N, K, C, omega).

    For the 'patch' reference each patch's positions are shifted so that
    index ``omega - 1`` means "same step as the patch's last observation";
    masked positions carry zero mass so nothing admissible is dropped.
    """
    w = weights.mean(axis=2)  # B, N, K, n_p, C, omega
    if cfg.lag_reference == "window":
        return w.mean(axis=3)
    out = np.zeros(w.shape[:3] + w.shape[4:])
    shifts = cfg.tau - 1 - patch_ends(cfg)
    for i, d in enumerate(shifts):
        target = np.minimum(np.arange(cfg.omega) + d, cfg.omega - 1)
        np.add.at(out, (Ellipsis, target), w[:, :, :, i])
    return out / cfg.n_patches


# ---------------------------------------------------------------- full model

class AirPCM:
    """Parameters, station graph and config bundled for forward passes."""

    def __init__(self, cfg: AirPCMConfig, graph: StationGraph, params: Optional[Dict[str, Parameter]] = None,
                 seed: int = 0, pollutant_names: Optional[List[str]] = None, met_names: Optional[List[str]] = None):
        if graph.n != cfg.N:
            raise ConfigError(f"graph has {graph.n} stations, config N={cfg.N}")
        self.cfg = cfg
        self.graph = graph
        self.params = params if params is not None else init_weights(cfg, seed)
        expected = parameter_shapes(cfg)
        if list(self.params) != list(expected):
            raise ConfigError("parameter names do not match the config")
        for name, (shape, _) in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        self.mask = build_causal_mask(cfg)
        self.pollutant_names = pollutant_names or [f"pol{k}" for k in range(cfg.K)]
        self.met_names = met_names or [f"met{c}" for c in range(cfg.C)]

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, batch, training: bool = False, rng: Optional[np.random.Generator] = None):
        """Forecast a batch (or one window): returns (B, N, K, kappa) tensor and
        raw MPTC attention (B, N, heads, K, n_p, C, omega)."""
        if isinstance(batch, WindowSample):
            batch = stack_windows([batch])
        cfg, W = self.cfg, self.params
        stage = "mscm"
        try:
            xp = mscm_forward(Tensor(batch.past_pollutants), self.graph, W, cfg, "pol", rng, training)
            mp = mscm_forward(Tensor(batch.past_meteorology), self.graph, W, cfg, "met", rng, training)
            stage = "patch-embed"
            p_emb = embed_patches(patchify(xp, cfg.patch_len, cfg.patch_stride), batch.start_times,
                                  batch.step_hours, W, cfg)
            stage = "mptc"
            m_window = tn.getitem(mp, (Ellipsis, slice(cfg.tau - cfg.omega, cfg.tau)))
            p_mcam, attn = mptc_forward(p_emb, m_window, self.mask, W, cfg, rng, training)
            stage = "deco"
            pred = deco_forward(p_mcam, p_emb, W, cfg, rng, training)
        except (ValueError, RuntimeError) as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(f"{stage}: {exc}") from exc
        return pred, attn

    def causal_map(self, attn: np.ndarray, window: Optional[int] = None) -> CausalAttentionMap:
        """Build the attention map for one window of the batch, or averaged over all."""
        mass = attention_to_lag_mass(attn, self.cfg)
        w = mass.mean(axis=0) if window is None else mass[window]
        return CausalAttentionMap(w, [s.id for s in self.graph.stations], list(self.pollutant_names),
                                  list(self.met_names), 0.0, self.cfg.lag_reference)


def forward(window, graph: StationGraph, weights: Dict[str, Parameter], config: AirPCMConfig):
    """Pure-function form: one window in, (N x K x kappa forecast, attention map) out."""
    model = AirPCM(config, graph, weights)
    pred, attn = model.forward(window)
    cmap = model.causal_map(attn, 0)
    cmap.step_hours = window.step_hours
    return pred.data[0], cmap
