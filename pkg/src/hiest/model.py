"""Hierarchical spatio-temporal forecaster.

Per layer: gated dilated TCN over time, a skip projection of the last step,
then cross-hierarchy graph convolution (CHGCN): pool sensor features to
regions (``M_or``) and to learned global nodes (``M_rg``), run one shared
graph-convolution weight on all three graphs, push information down the
hierarchy (enhance) and back up (update).  Accumulated skips feed a
two-layer output head that emits every horizon step at once.

Features are laid out ``(batch, time, node, channel)`` throughout.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Hierarchy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HiestConfig:
    blocks: int = 4
    layers_per_block: int = 2
    hidden: int = 32
    num_global: int = 15
    eta1: float = 1.0
    eta2: float = 1.0
    eta3: float = 1.0
    eta4: float = 1.0
    horizon: int = 12
    history: int = 12
    tcn_kernel: int = 2
    skip_dim: int = 64
    in_dim: int = 1
    out_dim: int = 1
    adjacency_norm: str = "rownorm"  # or "raw"
    ag_refresh: str = "step"  # or "epoch"

    def __post_init__(self):
        for name in ("blocks", "layers_per_block", "hidden", "num_global", "horizon", "history",
                     "tcn_kernel", "skip_dim", "in_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for k in range(1, 5):
            if getattr(self, f"eta{k}") < 0:
                raise ValueError(f"eta{k} must be nonnegative")
        if self.adjacency_norm not in ("rownorm", "raw"):
            raise ValueError(f"adjacency_norm must be 'rownorm' or 'raw', got {self.adjacency_norm!r}")
        if self.ag_refresh not in ("step", "epoch"):
            raise ValueError(f"ag_refresh must be 'step' or 'epoch', got {self.ag_refresh!r}")
        if self.receptive_field > 2 * self.history:
            raise ValueError(
                f"receptive field {self.receptive_field} exceeds twice the history {self.history}; "
                "reduce blocks, layers or kernel"
            )

    @property
    def num_layers(self) -> int:
        return self.blocks * self.layers_per_block

    def dilation(self, layer: int) -> int:
        return 2 ** (layer % self.layers_per_block)

    @property
    def receptive_field(self) -> int:
        return 1 + sum((self.tcn_kernel - 1) * self.dilation(l) for l in range(self.num_layers))

    @property
    def etas(self) -> tuple[float, float, float, float]:
        return (self.eta1, self.eta2, self.eta3, self.eta4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HiestConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                continue
            default = getattr(cls, k)
            kwargs[k] = type(default)(v)
        return cls(**kwargs)

    def with_etas(self, value: float) -> "HiestConfig":
        return replace(self, eta1=value, eta2=value, eta3=value, eta4=value)


@dataclass
class HierState:
    """Features of the three hierarchy levels after the last layer's update step."""

    h_o: Tensor
    h_r: Tensor
    h_g: Tensor
    m_rg: Tensor


class ForwardError(RuntimeError):
    pass


def init_params(config: HiestConfig, num_regions: int, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero mapping logits."""
    rng = np.random.default_rng(seed)
    d, s, k = config.hidden, config.skip_dim, config.tcn_kernel

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params: dict[str, np.ndarray] = {
        "input.weight": uniform((config.in_dim, d), config.in_dim),
        "input.bias": np.zeros(d),
    }
    for l in range(config.num_layers):
        params[f"layer{l}.tcn_filter"] = uniform((d, d, k), d * k)
        params[f"layer{l}.tcn_filter_bias"] = np.zeros(d)
        params[f"layer{l}.tcn_gate"] = uniform((d, d, k), d * k)
        params[f"layer{l}.tcn_gate_bias"] = np.zeros(d)
        params[f"layer{l}.gcn"] = uniform((d, d), d)
        params[f"layer{l}.skip"] = uniform((d, s), d)
        params[f"layer{l}.skip_bias"] = np.zeros(s)
    params["mapping.theta"] = np.zeros((num_regions, config.num_global))
    params["output.hidden"] = uniform((s, s), s)
    params["output.hidden_bias"] = np.zeros(s)
    params["output.weight"] = uniform((s, config.horizon * config.out_dim), s)
    params["output.bias"] = np.zeros(config.horizon * config.out_dim)
    return {name: Tensor(v, requires_grad=True, name=name) for name, v in params.items()}


def normalize_adjacency(a: np.ndarray, mode: str = "rownorm") -> np.ndarray:
    """``rownorm(A + I)`` or the raw matrix."""
    if mode == "raw":
        return np.asarray(a, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64) + np.eye(a.shape[0])
    return a / a.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def global_mapping(theta: Tensor) -> Tensor:
    """Soft regional->global mapping: softmax over regions, so each column sums to 1."""
    return ad.softmax(theta, axis=0)


def global_views(a_r, h_r: Tensor, m_rg: Tensor) -> tuple[Tensor, Tensor]:
    """``A_g = M_rg^T A_r M_rg`` and ``H_g = M_rg^T H_r`` (per batch/time slice)."""
    a_r = a_r if isinstance(a_r, Tensor) else Tensor(a_r)
    m_t = ad.transpose(m_rg)
    return ad.matmul(ad.matmul(m_t, a_r), m_rg), ad.matmul(m_t, h_r)


def meta_gcn(a_norm, h: Tensor, w: Tensor) -> Tensor:
    """``A H W`` applied to every (batch, time) slice of ``h``."""
    a_norm = a_norm if isinstance(a_norm, Tensor) else Tensor(a_norm)
    if a_norm.shape[-1] != h.shape[-2] or w.shape[0] != h.shape[-1]:
        raise ad.ShapeError(f"meta_gcn: A {a_norm.shape}, H {h.shape}, W {w.shape} do not conform")
    return ad.matmul(ad.matmul(a_norm, h), w)


def temporal_conv(h: Tensor, w: Tensor, b: Tensor, dilation: int) -> Tensor:
    """Causal dilated convolution over the time axis of a ``(B, T, N, D)`` tensor, plus bias."""
    return ad.add_bias(ad.causal_conv_time(h, w, dilation), b, axis=-1)


def gated_tcn(h: Tensor, theta1: Tensor, theta2: Tensor, b1: Tensor, b2: Tensor, dilation: int) -> Tensor:
    """``tanh(theta1 * H + b1) . sigmoid(theta2 * H + b2)`` with ``*`` a causal dilated conv."""
    return ad.mul(ad.tanh(temporal_conv(h, theta1, b1, dilation)),
                  ad.sigmoid(temporal_conv(h, theta2, b2, dilation)))


def enhance(h_o, h_r, h_g, m_or, m_rg, eta1: float, eta2: float) -> tuple[Tensor, Tensor]:
    """Top-down pass: global -> regional, then the enhanced regional -> sensors."""
    m_or = m_or if isinstance(m_or, Tensor) else Tensor(m_or)
    h_r = ad.add(h_r, ad.scale(ad.relu(ad.matmul(m_rg, h_g)), eta1))
    h_o_star = ad.add(h_o, ad.scale(ad.relu(ad.matmul(m_or, h_r)), eta2))
    return h_r, h_o_star


def update(h_o_star, h_r, h_g, m_or, m_rg, eta3: float, eta4: float) -> tuple[Tensor, Tensor]:
    """Bottom-up pass: sensors -> regional, then the updated regional -> global."""
    m_or = m_or if isinstance(m_or, Tensor) else Tensor(m_or)
    h_r_star = ad.add(h_r, ad.scale(ad.relu(ad.matmul(ad.transpose(m_or), h_o_star)), eta3))
    h_g_star = ad.add(h_g, ad.scale(ad.relu(ad.matmul(ad.transpose(m_rg), h_r_star)), eta4))
    return h_r_star, h_g_star


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b, axis=-1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------
class Hiest:
    """Parameters plus the fixed hierarchy they operate on."""

    def __init__(self, config: HiestConfig, hierarchy: Hierarchy, seed: int = 0,
                 params: Optional[dict[str, Tensor]] = None):
        self.config = config
        self.hierarchy = hierarchy
        self.params = params if params is not None else init_params(config, hierarchy.num_regions, seed)
        mode = config.adjacency_norm
        self.a_o = Tensor(normalize_adjacency(hierarchy.graph.adjacency, mode))
        self.a_r_norm = Tensor(normalize_adjacency(hierarchy.a_r, mode))
        self.a_r = Tensor(hierarchy.a_r)
        self.m_or = Tensor(hierarchy.m_or)
        self._frozen_ag: Optional[Tensor] = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def gcn_weights(self) -> list[Tensor]:
        return [p for name, p in self.params.items() if name.endswith(".gcn")]

    def global_adjacency(self, m_rg: Tensor) -> Tensor:
        a_g = ad.matmul(ad.matmul(ad.transpose(m_rg), self.a_r), m_rg)
        if self.config.adjacency_norm == "raw":
            return a_g
        eye = Tensor(np.eye(a_g.shape[0]))
        return ad.row_normalize(ad.add(a_g, eye))

    def refresh_global_adjacency(self) -> None:
        """Freeze the normalized ``A_g`` from the current mapping (``ag_refresh='epoch'``)."""
        with ad.no_grad():
            self._frozen_ag = Tensor(self.global_adjacency(global_mapping(self.params["mapping.theta"])).data)

    def forward(self, x, return_state: bool = False):
        """Predict ``(B, horizon, N_o, out_dim)`` from ``(B, history, N_o, in_dim)``.

        With ``return_state`` also returns the last layer's :class:`HierState`,
        which the auxiliary losses read.
        """
        cfg, p = self.config, self.params
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != cfg.history or x.shape[2] != self.hierarchy.num_nodes \
                or x.shape[3] != cfg.in_dim:
            raise ad.ShapeError(
                f"input must be (B, {cfg.history}, {self.hierarchy.num_nodes}, {cfg.in_dim}), got {x.shape}"
            )
        bsz = x.shape[0]
        pad = cfg.receptive_field - cfg.history
        if pad > 0:
            x = ad.pad_axis(x, 1, pad)
        h = dense(x, p["input.weight"], p["input.bias"])

        m_rg = global_mapping(p["mapping.theta"])
        if cfg.ag_refresh == "epoch":
            if self._frozen_ag is None:
                self.refresh_global_adjacency()
            a_g = self._frozen_ag
        else:
            a_g = self.global_adjacency(m_rg)

        skip = None
        state = None
        for l in range(cfg.num_layers):
            try:
                h, skip, state = self._layer(l, h, skip, m_rg, a_g)
            except (ValueError, ZeroDivisionError) as exc:
                raise ForwardError(f"layer {l}: {exc}") from exc

        out = ad.relu(skip)
        out = ad.relu(dense(out, p["output.hidden"], p["output.hidden_bias"]))
        out = dense(out, p["output.weight"], p["output.bias"])
        out = ad.reshape(out, (bsz, self.hierarchy.num_nodes, cfg.horizon, cfg.out_dim))
        y_hat = ad.transpose(out, (0, 2, 1, 3))
        return (y_hat, state) if return_state else y_hat

    __call__ = forward

    def _layer(self, l: int, h: Tensor, skip: Optional[Tensor], m_rg: Tensor, a_g: Tensor):
        cfg, p = self.config, self.params
        residual = h
        h = gated_tcn(h, p[f"layer{l}.tcn_filter"], p[f"layer{l}.tcn_gate"],
                      p[f"layer{l}.tcn_filter_bias"], p[f"layer{l}.tcn_gate_bias"], cfg.dilation(l))
        t_out = h.shape[1]

        last = ad.reshape(ad.slice_axis(h, 1, t_out - 1), (h.shape[0], h.shape[2], h.shape[3]))
        s = dense(last, p[f"layer{l}.skip"], p[f"layer{l}.skip_bias"])
        skip = s if skip is None else ad.add(skip, s)

        w = p[f"layer{l}.gcn"]
        h_r = ad.matmul(ad.transpose(self.m_or), h)
        h_g = ad.matmul(ad.transpose(m_rg), h_r)
        h_o = meta_gcn(self.a_o, h, w)
        h_r = meta_gcn(self.a_r_norm, h_r, w)
        h_g = meta_gcn(a_g, h_g, w)

        e1, e2, e3, e4 = cfg.etas
        h_r, h_o_star = enhance(h_o, h_r, h_g, self.m_or, m_rg, e1, e2)
        h_r_star, h_g_star = update(h_o_star, h_r, h_g, self.m_or, m_rg, e3, e4)

        h_next = ad.add(h_o_star, ad.slice_axis(residual, 1, residual.shape[1] - t_out))
        return h_next, skip, HierState(h_o_star, h_r_star, h_g_star, m_rg)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ad.ShapeError(f"{name}: stored shape {arrays[name].shape} != {t.shape}")
            t.data[...] = arrays[name]
        self._frozen_ag = None
