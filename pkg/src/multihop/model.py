"""Multi-branch network over a hop-graph set with configurable fusion.

Each branch is a two-layer spectral network bound to one hop graph: dropout,
convolution, ELU, dropout, convolution. Branch outputs (N x classes) are
fused adaptively (softmax-weighted), by summation, or by elementwise max.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from multihop import nn
from multihop.graph import PropagationMatrix, estimate_lambda_max, scaled_laplacian, sym_renormalize
from multihop.khop import HopGraphSet
from multihop.nn import AwcParams, Tensor2


class ConfigError(ValueError):
    """Inconsistent model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; serializes verbatim to/from JSON."""

    branches: int = 3
    conv: str = "first-order"  # or "chebyshev"
    cheb_k: int = 3
    layer_widths: tuple[int, ...] = (16, 7)
    fusion: str = "awc"  # or "sum" / "max"
    awc_init: str = "glorot"  # or "zeros": start the fusion gate neutral
    dropout_rate: float = 0.5
    l2_weight: float = 5e-4
    exact_distance: bool = True

    def __post_init__(self):
        if self.branches < 1:
            raise ConfigError("branches must be >= 1")
        if self.conv not in ("first-order", "chebyshev"):
            raise ConfigError(f"unknown conv kind {self.conv!r}")
        if self.conv == "chebyshev" and self.cheb_k < 1:
            raise ConfigError("chebyshev order must be >= 1")
        if self.fusion not in ("awc", "sum", "max"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.awc_init not in ("glorot", "zeros"):
            raise ConfigError(f"unknown awc_init {self.awc_init!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must be in [0,1)")
        if len(self.layer_widths) != 2:
            raise ConfigError("branches are two-layer networks; give two widths")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f for f in ModelConfig.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config fields: {sorted(extra)}")
        if "layer_widths" in d:
            d = dict(d, layer_widths=tuple(d["layer_widths"]))
        return ModelConfig(**d)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor2:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor2(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)


class MultiHopModel:
    """Parameter container plus forward/backward for the branch ensemble."""

    def __init__(
        self,
        config: ModelConfig,
        props: Sequence[PropagationMatrix],
        branch_params: list[list[list[Tensor2]]],
        awc: AwcParams | None,
        in_dim: int,
    ):
        self.config = config
        self.props = list(props)
        # branch_params[b][layer] is a list of parameter matrices: one for
        # first-order convolutions, K+1 for Chebyshev filters.
        self.branch_params = branch_params
        self.awc = awc
        self.in_dim = in_dim

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor2]]:
        out = []
        for b, layers in enumerate(self.branch_params):
            for layer, mats in enumerate(layers):
                for t, mat in enumerate(mats):
                    out.append((f"branch{b}.layer{layer}.theta{t}", mat))
        if self.awc is not None:
            out.append(("awc.alpha", self.awc.alpha))
        return out

    def parameters(self) -> list[Tensor2]:
        return [p for _, p in self.named_parameters()]

    def conv_parameters(self) -> list[Tensor2]:
        """Convolution weight matrices only (fusion vector excluded)."""
        return [
            mat for layers in self.branch_params for mats in layers for mat in mats
        ]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def get_values(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def set_values(self, values: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(values) != len(params):
            raise ConfigError("parameter count mismatch")
        for p, v in zip(params, values):
            if p.values.shape != v.shape:
                raise ConfigError("parameter shape mismatch")
            p.values = v.copy()

    # -- forward ------------------------------------------------------------

    def _branch_forward(self, b: int, features, training: bool, rng: np.random.Generator) -> Tensor2:
        cfg = self.config
        prop = self.props[b]
        x = nn.dropout_array(features, cfg.dropout_rate, rng, training)
        layer0, layer1 = self.branch_params[b]
        if cfg.conv == "first-order":
            h = nn.propagate(prop, nn.const_matmul(x, layer0[0]))
        else:
            h = _cheb_const(prop, x, layer0)
        h = nn.elu(h)
        h = nn.dropout(h, cfg.dropout_rate, rng, training)
        if cfg.conv == "first-order":
            return nn.gcn_layer_forward(prop, h, layer1[0])
        return nn.cheb_layer_forward(prop, h, layer1)

    def forward(
        self, features, training: bool, rng: np.random.Generator | None = None
    ) -> tuple[Tensor2, np.ndarray | None]:
        """Returns (logits N x C, fusion weights N x branches or None)."""
        if rng is None:
            if training:
                raise ValueError("training forward needs an rng for dropout")
            rng = np.random.default_rng(0)
        if features.shape[1] != self.in_dim:
            raise nn.ShapeError(f"feature dim {features.shape[1]}, model expects {self.in_dim}")
        outs = [self._branch_forward(b, features, training, rng) for b in range(self.config.branches)]
        if self.config.fusion == "awc":
            fused, weights = nn.awc_forward(outs, self.awc)
            return fused, weights.values
        if self.config.fusion == "sum":
            fused = outs[0]
            for o in outs[1:]:
                fused = nn.add(fused, o)
            return fused, None
        return nn.branch_max(outs), None

    def loss_and_grads(
        self,
        features,
        labels: np.ndarray,
        train_mask: np.ndarray,
        rng: np.random.Generator,
        training: bool = True,
    ) -> tuple[float, list[np.ndarray | None]]:
        """Masked cross-entropy plus L2 on convolution weights; grads via backward."""
        self.zero_grad()
        logits, _ = self.forward(features, training=training, rng=rng)
        loss = nn.masked_softmax_xent(logits, labels, train_mask)
        if self.config.l2_weight > 0:
            loss = nn.add(loss, nn.l2_penalty(self.conv_parameters(), self.config.l2_weight))
        nn.backward(loss)
        return loss.item(), [p.grad for p in self.parameters()]

    # -- checkpoints ---------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        """Flat little-endian float32 binary plus a JSON manifest sidecar."""
        path = Path(path)
        manifest = []
        offset = 0
        with open(path, "wb") as fh:
            for name, p in self.named_parameters():
                flat = np.ascontiguousarray(p.values, dtype="<f4").ravel()
                fh.write(flat.tobytes())
                manifest.append({"name": name, "shape": list(p.values.shape), "offset": offset})
                offset += flat.size * 4
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps({"format": "multihop-checkpoint-v1", "tensors": manifest}, indent=1)
        )

    def load_checkpoint(self, path: str | Path) -> None:
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        blob = path.read_bytes()
        by_name = {name: p for name, p in self.named_parameters()}
        for entry in meta["tensors"]:
            p = by_name.pop(entry["name"], None)
            if p is None:
                raise ConfigError(f"checkpoint names unknown parameter {entry['name']!r}")
            shape = tuple(entry["shape"])
            if shape != p.values.shape:
                raise ConfigError(
                    f"shape mismatch for {entry['name']}: checkpoint {shape}, model {p.values.shape}"
                )
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
            p.values = arr.reshape(shape).astype(p.values.dtype)
        if by_name:
            raise ConfigError(f"checkpoint missing parameters: {sorted(by_name)}")


def _cheb_const(prop: PropagationMatrix, x, thetas: list[Tensor2]) -> Tensor2:
    """Chebyshev layer over a constant input (features never need gradients)."""
    mat = prop.entries
    z_prev = x
    z_cur = mat @ x
    out = nn.add(nn.const_matmul(z_prev, thetas[0]), nn.const_matmul(z_cur, thetas[1]))
    for k in range(2, len(thetas)):
        z_next = 2.0 * (mat @ z_cur) - z_prev
        out = nn.add(out, nn.const_matmul(z_next, thetas[k]))
        z_prev, z_cur = z_cur, z_next
    return out


def build_model(
    cfg: ModelConfig,
    hops: HopGraphSet,
    in_dim: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> MultiHopModel:
    """Glorot-initialized model with branch b bound to hop graph b+1."""
    if cfg.branches != hops.max_hop:
        raise ConfigError(f"config wants {cfg.branches} branches, hop set has {hops.max_hop}")
    props = []
    for k in range(1, cfg.branches + 1):
        g = hops.hop(k)
        if cfg.conv == "first-order":
            props.append(sym_renormalize(g))
        else:
            lam = estimate_lambda_max(g)
            props.append(scaled_laplacian(g, lam.value))
    n_terms = 1 if cfg.conv == "first-order" else cfg.cheb_k + 1
    widths = [in_dim, *cfg.layer_widths]
    branch_params = []
    for _ in range(cfg.branches):
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            layers.append([_glorot(rng, fan_in, fan_out, dtype) for _ in range(n_terms)])
        branch_params.append(layers)
    awc = None
    if cfg.fusion == "awc":
        init_rng = None if cfg.awc_init == "zeros" else rng
        awc = AwcParams.create(cfg.layer_widths[-1], init_rng, dtype)
    # cast propagation entries to the training dtype for consistent outputs
    props = [
        PropagationMatrix(p.n, p.entries.astype(dtype), kind=p.kind) for p in props
    ]
    return MultiHopModel(cfg, props, branch_params, awc, in_dim)
