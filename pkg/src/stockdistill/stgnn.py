"""Spatiotemporal encoders: a gated recurrent pass over the lookback days,
then message passing over the stock relation graph.

Two graph flavors share the same stacking: plain normalized-adjacency
convolution, and single-head attention that re-derives edge weights from
node states (leaky-ReLU scoring, softmax over each node's neighbors
including itself).  Each graph layer applies ReLU; a final linear
projection maps to the requested output width.

All forwards run batched as [windows x stocks x ...]; an unbatched input
is lifted to a singleton batch and squeezed on the way out.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ndgrad as nd

_GATE_NAMES = ("r", "z", "n")
NEG_MASK = -1e30  # additive mask for non-edges before the attention softmax


@dataclass(frozen=True)
class STConfig:
    temporal_kind: str = "gru"
    spatial_kind: str = "gcn"  # "gcn" | "gat"
    hidden_dim: int = 32
    spatial_layers: int = 1
    output_dim: int = 32

    def __post_init__(self):
        if self.temporal_kind != "gru":
            raise ValueError(f"unsupported temporal encoder '{self.temporal_kind}'")
        if self.spatial_kind not in ("gcn", "gat"):
            raise ValueError(f"unsupported spatial encoder '{self.spatial_kind}'")
        if self.hidden_dim < 1 or self.output_dim < 1:
            raise ValueError("dims must be >= 1")
        if self.spatial_layers not in (1, 2):
            raise ValueError("spatial_layers must be 1 or 2")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class STModel:
    """Parameter collection for one spatiotemporal encoder."""

    def __init__(self, config: STConfig, input_dim: int, params: dict[str, np.ndarray]):
        self.config = config
        self.input_dim = input_dim
        self.params = params
        for name, arr in params.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite parameter '{name}'")

    @classmethod
    def init(cls, config: STConfig, input_dim: int, rng: np.random.Generator) -> "STModel":
        h = config.hidden_dim
        params: dict[str, np.ndarray] = {}
        for gate in _GATE_NAMES:
            params[f"temporal.0.wx{gate}"] = _uniform(rng, input_dim, (input_dim, h))
            params[f"temporal.0.wh{gate}"] = _uniform(rng, h, (h, h))
            params[f"temporal.0.b{gate}"] = np.zeros(h)
        for layer in range(config.spatial_layers):
            params[f"spatial.{layer}.w"] = _uniform(rng, h, (h, h))
            params[f"spatial.{layer}.b"] = np.zeros(h)
            if config.spatial_kind == "gat":
                params[f"spatial.{layer}.asrc"] = _uniform(rng, h, (h, 1))
                params[f"spatial.{layer}.adst"] = _uniform(rng, h, (h, 1))
        params["proj.0.w"] = _uniform(rng, h, (h, config.output_dim))
        params["proj.0.b"] = np.zeros(config.output_dim)
        return cls(config, input_dim, params)

    def copy(self) -> "STModel":
        return STModel(self.config, self.input_dim, {k: v.copy() for k, v in self.params.items()})


def temporal_encode(params: Mapping[str, nd.Tensor], history: np.ndarray) -> nd.Tensor:
    """Final hidden state of the gated cell run left-to-right over L steps.

    ``history`` is a plain [R, L, M] array (rows = stock series); gradients
    flow to the cell parameters only.
    """
    if not np.all(np.isfinite(history)):
        raise nd.ComputeError("history contains non-finite values")
    rows, steps, _ = history.shape
    hidden = nd.constant(np.zeros((rows, params["temporal.0.whr"].shape[0])))
    for t in range(steps):
        x_t = nd.constant(history[:, t, :])
        r = nd.sigmoid(nd.add(nd.add(nd.matmul(x_t, params["temporal.0.wxr"]),
                                     nd.matmul(hidden, params["temporal.0.whr"])),
                              params["temporal.0.br"]))
        z = nd.sigmoid(nd.add(nd.add(nd.matmul(x_t, params["temporal.0.wxz"]),
                                     nd.matmul(hidden, params["temporal.0.whz"])),
                              params["temporal.0.bz"]))
        n = nd.tanh(nd.add(nd.add(nd.matmul(x_t, params["temporal.0.wxn"]),
                                  nd.mul(r, nd.matmul(hidden, params["temporal.0.whn"]))),
                           params["temporal.0.bn"]))
        one_minus_z = nd.sub(nd.constant(1.0), z)
        hidden = nd.add(nd.mul(one_minus_z, n), nd.mul(z, hidden))
    return hidden


def _gcn_layer(x: nd.Tensor, adj: np.ndarray, w: nd.Tensor, b: nd.Tensor) -> nd.Tensor:
    mixed = nd.batched_matmul(nd.constant(adj), x)
    return nd.relu(nd.add(nd.batched_matmul(mixed, w), b))


def _gat_layer(x: nd.Tensor, adj: np.ndarray, w: nd.Tensor, b: nd.Tensor,
               a_src: nd.Tensor, a_dst: nd.Tensor) -> nd.Tensor:
    n = adj.shape[0]
    xw = nd.batched_matmul(x, w)  # [B, N, H]
    src = nd.batched_matmul(xw, a_src)  # [B, N, 1]
    dst = nd.batched_matmul(xw, a_dst)
    ones_row = nd.constant(np.ones((1, n)))
    ones_col = nd.constant(np.ones((n, 1)))
    scores = nd.add(nd.batched_matmul(src, ones_row),
                    nd.batched_matmul(ones_col, nd.transpose(dst, (0, 2, 1))))
    scores = nd.leaky_relu(scores, 0.2)
    mask = np.where(adj > 0, 0.0, NEG_MASK)
    weights = nd.softmax(nd.add(scores, nd.constant(mask)), axis=-1)
    return nd.relu(nd.add(nd.batched_matmul(weights, xw), b))


def gat_attention_weights(model: STModel, node_states: np.ndarray,
                          adjacency: np.ndarray, layer: int = 0) -> np.ndarray:
    """Evaluate one layer's neighbor-attention matrix (rows sum to 1)."""
    params = bind_params(model.params, None)
    x = nd.constant(node_states[None, :, :] if node_states.ndim == 2 else node_states)
    n = adjacency.shape[0]
    xw = nd.batched_matmul(x, params[f"spatial.{layer}.w"])
    src = nd.batched_matmul(xw, params[f"spatial.{layer}.asrc"])
    dst = nd.batched_matmul(xw, params[f"spatial.{layer}.adst"])
    scores = nd.add(nd.batched_matmul(src, nd.constant(np.ones((1, n)))),
                    nd.batched_matmul(nd.constant(np.ones((n, 1))),
                                      nd.transpose(dst, (0, 2, 1))))
    scores = nd.leaky_relu(scores, 0.2)
    mask = np.where(adjacency > 0, 0.0, NEG_MASK)
    return nd.softmax(nd.add(scores, nd.constant(mask)), axis=-1).data[0]


def spatial_aggregate(config: STConfig, params: Mapping[str, nd.Tensor],
                      node_states: nd.Tensor, adjacency: np.ndarray) -> nd.Tensor:
    """Stack of graph layers, then the linear output projection."""
    adj = np.asarray(getattr(adjacency, "values", adjacency), dtype=np.float64)
    n = node_states.shape[-2]
    if adj.shape != (n, n):
        raise nd.ShapeError(f"relation matrix {adj.shape} does not match {n} stocks")
    x = node_states
    for layer in range(config.spatial_layers):
        w, b = params[f"spatial.{layer}.w"], params[f"spatial.{layer}.b"]
        if config.spatial_kind == "gcn":
            x = _gcn_layer(x, adj, w, b)
        else:
            x = _gat_layer(x, adj, w, b,
                           params[f"spatial.{layer}.asrc"], params[f"spatial.{layer}.adst"])
    return nd.add(nd.batched_matmul(x, params["proj.0.w"]), params["proj.0.b"])


def bind_params(params: Mapping[str, np.ndarray], tape: nd.Tape | None) -> dict[str, nd.Tensor]:
    """Wrap raw arrays as tape variables (training) or constants (eval)."""
    if tape is None:
        return {k: nd.constant(v) for k, v in params.items()}
    return {k: tape.variable(v) for k, v in params.items()}


def st_forward_bound(config: STConfig, params: Mapping[str, nd.Tensor],
                     history: np.ndarray, adjacency) -> nd.Tensor:
    """[B, N, L, M] (or [N, L, M]) history -> [B, N, out] embeddings."""
    history = np.asarray(history, dtype=np.float64)
    squeeze = history.ndim == 3
    if squeeze:
        history = history[None]
    b, n, steps, feats = history.shape
    states = temporal_encode(params, history.reshape(b * n, steps, feats))
    states = nd.reshape(states, (b, n, states.shape[-1]))
    out = spatial_aggregate(config, params, states, adjacency)
    return nd.reshape(out, out.shape[1:]) if squeeze else out


def st_forward(model: STModel, history: np.ndarray, adjacency) -> np.ndarray:
    """Evaluation-mode forward pass returning a plain array."""
    return st_forward_bound(model.config, bind_params(model.params, None),
                            history, adjacency).data
