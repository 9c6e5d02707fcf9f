"""Radial relay/satellite backbone.

One relay node carries the query representation; n satellite nodes carry
the candidate LLMs. Each layer updates every satellite from its own
previous state, its model embedding, and the relay, then updates the relay
from its previous state and all fresh satellite states. Satellites never
attend to each other directly, which keeps the per-layer cost linear in n.

Alternative backbones used by the ablation harness (ring-neighbor
topology, full attention over all nodes, attention-free MLP mixing) share
the same parameter layout and are selected via config.backbone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError
from .numcore import Tensor

BACKBONES = ("radialformer", "star_transformer", "full_attention", "mlp_only")


@dataclass
class RadialFormerConfig:
    n: int          # satellite count = candidate LLMs
    d: int          # hidden dimension
    layers: int     # update rounds T
    heads: int = 4
    share_layer_weights: bool = False
    backbone: str = "radialformer"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"need at least one satellite, got n={self.n}")
        if self.layers < 1:
            raise ConfigError(f"need at least one layer, got {self.layers}")
        if self.d < 2:
            raise ConfigError(f"hidden dimension must be >= 2, got {self.d}")
        if self.d % self.heads != 0:
            raise ConfigError(
                f"hidden dim {self.d} not divisible by {self.heads} heads")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        return {"n": self.n, "d": self.d, "layers": self.layers,
                "heads": self.heads,
                "share_layer_weights": self.share_layer_weights,
                "backbone": self.backbone}

    @classmethod
    def from_dict(cls, d: dict) -> "RadialFormerConfig":
        return cls(**d)


@dataclass
class LayerWeights:
    sat_wq: Tensor
    sat_wk: Tensor
    sat_wv: Tensor
    sat_wo: Tensor
    sat_gain: Tensor
    sat_bias: Tensor
    rel_wq: Tensor
    rel_wk: Tensor
    rel_wv: Tensor
    rel_wo: Tensor
    rel_gain: Tensor
    rel_bias: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{k}", getattr(self, k)) for k in
                ("sat_wq", "sat_wk", "sat_wv", "sat_wo", "sat_gain", "sat_bias",
                 "rel_wq", "rel_wk", "rel_wv", "rel_wo", "rel_gain", "rel_bias")]


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return nc.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


@dataclass
class RadialFormerParams:
    config: RadialFormerConfig
    model_embeddings: list[Tensor]
    layer_weights: list[LayerWeights]

    @classmethod
    def init(cls, config: RadialFormerConfig,
             rng: np.random.Generator) -> "RadialFormerParams":
        d = config.d
        embeddings = [nc.parameter(0.02 * rng.standard_normal((1, d)))
                      for _ in range(config.n)]
        n_blocks = 1 if config.share_layer_weights else config.layers
        blocks = []
        for _ in range(n_blocks):
            blocks.append(LayerWeights(
                sat_wq=_init_weight(rng, d, d), sat_wk=_init_weight(rng, d, d),
                sat_wv=_init_weight(rng, d, d), sat_wo=_init_weight(rng, d, d),
                sat_gain=nc.parameter(np.ones((1, d))),
                sat_bias=nc.parameter(np.zeros((1, d))),
                rel_wq=_init_weight(rng, d, d), rel_wk=_init_weight(rng, d, d),
                rel_wv=_init_weight(rng, d, d), rel_wo=_init_weight(rng, d, d),
                rel_gain=nc.parameter(np.ones((1, d))),
                rel_bias=nc.parameter(np.zeros((1, d))),
            ))
        return cls(config=config, model_embeddings=embeddings, layer_weights=blocks)

    def layer(self, t: int) -> LayerWeights:
        """Weights for the update taking the state from step t to t+1."""
        if self.config.share_layer_weights:
            return self.layer_weights[0]
        return self.layer_weights[t]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"embedding.{i}", m) for i, m in enumerate(self.model_embeddings)]
        for li, block in enumerate(self.layer_weights):
            out.extend(block.named(f"layer.{li}"))
        return out


@dataclass
class RadialState:
    relay: Tensor
    satellites: list[Tensor]
    step: int = 0
    staged: dict[int, Tensor] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.satellites)

    def satellite_matrix(self) -> Tensor:
        return nc.concat_rows(self.satellites)


def init_state(query_embedding: Tensor, params: RadialFormerParams) -> RadialState:
    """Relay starts at the query embedding, satellite i at embedding m_i."""
    d = params.config.d
    if query_embedding.shape != (1, d):
        raise ConfigError(
            f"query embedding shape {query_embedding.shape} != (1, {d})")
    return RadialState(relay=query_embedding,
                       satellites=list(params.model_embeddings), step=0)


def _node_update(query: Tensor, context: Tensor, wq, wk, wv, wo, gain, bias,
                 heads: int) -> Tensor:
    a = nc.multi_head_attention(query, context, wq, wk, wv, wo, heads)
    return nc.layer_norm(nc.relu(a), gain, bias)


def _satellite_context(state: RadialState, i: int, params: RadialFormerParams):
    backbone = params.config.backbone
    s_i = state.satellites[i]
    m_i = params.model_embeddings[i]
    if backbone == "radialformer":
        # row order fixed: previous state, initial embedding, relay
        return [s_i, m_i, state.relay]
    if backbone == "star_transformer":
        n = state.n
        left = state.satellites[(i - 1) % n]
        right = state.satellites[(i + 1) % n]
        return [left, s_i, right, m_i, state.relay]
    if backbone == "full_attention":
        return [state.relay] + list(state.satellites)
    raise ConfigError(f"backbone {backbone!r} has no attention context")


def update_satellite(state: RadialState, i: int,
                     params: RadialFormerParams) -> Tensor:
    """Compute satellite i at step t+1 and stage it; commit happens in
    update_relay. Only (s_i, m_i, relay)-derived context rows are read, so
    other satellites cannot influence the result."""
    cfg = params.config
    if not (0 <= i < cfg.n):
        raise IndexError(f"satellite index {i} out of range [0, {cfg.n})")
    if state.step >= cfg.layers:
        raise ContractError(f"state already at final step {state.step}")
    w = params.layer(state.step)
    if cfg.backbone == "mlp_only":
        pre = nc.add(nc.matmul(state.satellites[i], w.sat_wq),
                     nc.matmul(state.relay, w.sat_wk))
        new = nc.layer_norm(nc.relu(pre), w.sat_gain, w.sat_bias)
    else:
        ctx = nc.concat_rows(_satellite_context(state, i, params))
        new = _node_update(state.satellites[i], ctx, w.sat_wq, w.sat_wk,
                           w.sat_wv, w.sat_wo, w.sat_gain, w.sat_bias, cfg.heads)
    state.staged[i] = new
    return new


def update_relay(state: RadialState, params: RadialFormerParams) -> Tensor:
    """Update the relay from its previous state and all freshly staged
    satellites, then commit the layer (satellites first, relay second)."""
    cfg = params.config
    if len(state.staged) != cfg.n:
        missing = [i for i in range(cfg.n) if i not in state.staged]
        raise ContractError(
            f"relay update before satellite updates at layer {state.step + 1}: "
            f"missing satellites {missing}")
    w = params.layer(state.step)
    fresh = [state.staged[i] for i in range(cfg.n)]
    if cfg.backbone == "mlp_only":
        new_relay = state.relay  # relay is a pass-through without attention
    elif cfg.backbone == "full_attention":
        ctx = nc.concat_rows([state.relay] + list(state.satellites))
        new_relay = _node_update(state.relay, ctx, w.rel_wq, w.rel_wk,
                                 w.rel_wv, w.rel_wo, w.rel_gain, w.rel_bias,
                                 cfg.heads)
    else:
        ctx = nc.concat_rows([state.relay] + fresh)
        new_relay = _node_update(state.relay, ctx, w.rel_wq, w.rel_wk,
                                 w.rel_wv, w.rel_wo, w.rel_gain, w.rel_bias,
                                 cfg.heads)
    state.satellites = fresh
    state.relay = new_relay
    state.step += 1
    state.staged = {}
    return new_relay


def forward(query_embedding: Tensor, params: RadialFormerParams) -> RadialState:
    """Run all layers; returns the state at step T."""
    state = init_state(query_embedding, params)
    for _ in range(params.config.layers):
        for i in range(params.config.n):
            update_satellite(state, i, params)
        update_relay(state, params)
    return state


def _rows_layer_norm(z: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = z.mean(axis=1, keepdims=True)
    centered = z - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return gain * centered / np.sqrt(var + nc.LAYER_NORM_EPS) + bias


def forward_values(query_row: np.ndarray, params: RadialFormerParams
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Gradient-free forward over plain arrays, batching all satellite
    updates per layer into a handful of BLAS calls. Serving-path twin of
    forward(); agrees with it to floating-point noise (see tests).

    Returns (satellites (n, d), relay (1, d)) at step T.
    """
    cfg = params.config
    if cfg.backbone != "radialformer":
        state = forward(nc.constant(query_row), params)
        return state.satellite_matrix().values, state.relay.values
    n, d, h = cfg.n, cfg.d, cfg.heads
    dh = d // h
    inv_scale = 1.0 / np.sqrt(dh)
    M = np.vstack([m.values for m in params.model_embeddings])
    S = M
    r = np.asarray(query_row, dtype=np.float64).reshape(1, d)

    for t in range(cfg.layers):
        w = params.layer(t)
        K_all = np.empty((n, 3, d))
        V_all = np.empty((n, 3, d))
        K_all[:, 0], K_all[:, 1] = S @ w.sat_wk.values, M @ w.sat_wk.values
        K_all[:, 2] = r @ w.sat_wk.values
        V_all[:, 0], V_all[:, 1] = S @ w.sat_wv.values, M @ w.sat_wv.values
        V_all[:, 2] = r @ w.sat_wv.values
        Qh = (S @ w.sat_wq.values).reshape(n, h, dh)
        Kh = K_all.reshape(n, 3, h, dh)
        Vh = V_all.reshape(n, 3, h, dh)
        scores = np.einsum("nhd,nmhd->nhm", Qh, Kh) * inv_scale
        scores -= scores.max(axis=2, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=2, keepdims=True)
        merged = np.einsum("nhm,nmhd->nhd", att, Vh).reshape(n, d)
        S_new = _rows_layer_norm(np.maximum(merged @ w.sat_wo.values, 0.0),
                                 w.sat_gain.values, w.sat_bias.values)

        ctx = np.vstack([r, S_new])
        rQh = (r @ w.rel_wq.values).reshape(h, dh)
        rKh = (ctx @ w.rel_wk.values).reshape(n + 1, h, dh)
        rVh = (ctx @ w.rel_wv.values).reshape(n + 1, h, dh)
        rs = np.einsum("hd,mhd->hm", rQh, rKh) * inv_scale
        rs -= rs.max(axis=1, keepdims=True)
        re = np.exp(rs)
        ra = re / re.sum(axis=1, keepdims=True)
        rm = np.einsum("hm,mhd->hd", ra, rVh).reshape(1, d)
        r = _rows_layer_norm(np.maximum(rm @ w.rel_wo.values, 0.0),
                             w.rel_gain.values, w.rel_bias.values)
        S = S_new
    return S, r


def flop_count(config: RadialFormerConfig) -> int:
    """Closed-form multiply-add count of one forward pass.

    Counts matmul work only (projections and attention products), matching
    what an instrumented forward tallies. Per layer: n satellite updates
    over 3 context rows plus one relay update over n+1 rows, hence affine
    in n for fixed d.
    """
    if config.backbone != "radialformer":
        raise ConfigError("flop formula is defined for the radial backbone")
    n, d, t = config.n, config.d, config.layers
    satellite = 8 * d * d + 6 * d          # (2m+2)d^2 + 2md with m=3
    relay = (2 * n + 4) * d * d + 2 * (n + 1) * d
    return t * (n * satellite + relay)
