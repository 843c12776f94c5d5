"""Encoder, projection-head bank, and the shared temperature network.

The temperature network maps a projected vector through one affine layer
and squashes pairwise inner products with a bounded sigmoid, so every
emitted temperature lies strictly inside (eta, eta + iota).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation, DomainError
from .rng import SplitMix64, derive
from .tensor import Tensor


@dataclass(frozen=True)
class TempBounds:
    """Lower bound offset ``eta`` and range width ``iota``."""

    eta: float = 1e-5
    iota: float = 2.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ContractViolation(f"eta must be > 0, got {self.eta}")
        if not self.iota > 0:
            raise ContractViolation(f"iota must be > 0, got {self.iota}")


def bounded_sigmoid(r: Tensor | float, bounds: TempBounds) -> Tensor:
    """iota / (1 + exp(r)) + eta: strictly decreasing, range (eta, eta+iota)."""
    r = T.as_tensor(r)
    tau = bounds.iota / (1.0 + T.exp(r)) + bounds.eta
    _assert_in_bounds(tau.data, bounds)
    return tau


def _assert_in_bounds(values: np.ndarray, bounds: TempBounds) -> None:
    if np.any(values <= bounds.eta) or np.any(values >= bounds.eta + bounds.iota):
        raise DomainError(
            f"temperature escaped ({bounds.eta}, {bounds.eta + bounds.iota}): "
            f"range [{values.min()}, {values.max()}]"
        )


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths input -> hidden... -> output; relu on hidden layers only."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ContractViolation("an MLP needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise ContractViolation(f"all widths must be >= 1, got {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


class Mlp:
    """Plain fully connected network over autodiff tensors."""

    def __init__(self, spec: MlpSpec, params: list[Tensor]):
        if len(params) != 2 * spec.n_layers:
            raise ContractViolation("parameter count does not match spec")
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: MlpSpec, seed: int) -> "Mlp":
        """He-uniform weights (variance 2/fan_in), zero biases, from a
        splitmix64 stream, so identical (spec, seed) gives identical bits."""
        params: list[Tensor] = []
        for layer, (fan_in, fan_out) in enumerate(zip(spec.widths, spec.widths[1:])):
            stream = SplitMix64(derive(seed, "layer", layer))
            limit = math.sqrt(6.0 / fan_in)
            w = (2.0 * stream.floats(fan_in * fan_out) - 1.0) * limit
            params.append(Tensor(w.reshape(fan_in, fan_out)))
            params.append(Tensor(np.zeros(fan_out)))
        return cls(spec, params)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.widths[0]:
            raise ContractViolation(
                f"input width {x.shape[-1]} != expected {self.spec.widths[0]}"
            )
        out = x
        last = self.spec.n_layers - 1
        for layer in range(self.spec.n_layers):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            out = T.matmul(out, w) + b
            if layer != last:
                out = T.relu(out)
        return out


@dataclass
class ModelBundle:
    """Encoder f, C projection heads with independent parameters, shared
    temperature net phi, plus optional predictor (negative-cosine variant)
    and optional batch-width temperature net (cross-correlation variant)."""

    encoder: Mlp
    heads: list[Mlp]
    temp_net: Mlp
    predictor: Mlp | None = None
    temp_net_bt: Mlp | None = None

    def __post_init__(self):
        if len(self.heads) < 1:
            raise ContractViolation("need at least one projection head")
        specs = {h.spec for h in self.heads}
        if len(specs) != 1:
            raise ContractViolation("all heads must share one MlpSpec")

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def parameters(self) -> list[Tensor]:
        out = list(self.encoder.params)
        for head in self.heads:
            out.extend(head.params)
        out.extend(self.temp_net.params)
        if self.predictor is not None:
            out.extend(self.predictor.params)
        if self.temp_net_bt is not None:
            out.extend(self.temp_net_bt.params)
        return out

    def temperature_parameters(self) -> list[Tensor]:
        out = list(self.temp_net.params)
        if self.temp_net_bt is not None:
            out.extend(self.temp_net_bt.params)
        return out

    @classmethod
    def build(cls, d_in: int, d: int, d_prime: int, n_heads: int, seed: int,
              with_predictor: bool = False, bt_width: int | None = None) -> "ModelBundle":
        """Smallest faithful instantiation: 2-layer encoder, 2-layer heads
        with hidden width d, single affine temperature layer."""
        encoder = Mlp.init(MlpSpec((d_in, d, d)), derive(seed, "encoder"))
        head_spec = MlpSpec((d, d, d_prime))
        heads = [Mlp.init(head_spec, derive(seed, "head", c)) for c in range(n_heads)]
        temp_net = Mlp.init(MlpSpec((d_prime, d_prime)), derive(seed, "temp"))
        predictor = None
        if with_predictor:
            predictor = Mlp.init(MlpSpec((d_prime, d_prime, d_prime)), derive(seed, "predictor"))
        temp_net_bt = None
        if bt_width is not None:
            temp_net_bt = Mlp.init(MlpSpec((bt_width, bt_width)), derive(seed, "temp_bt"))
        return cls(encoder, heads, temp_net, predictor, temp_net_bt)


def forward_views(bundle: ModelBundle, x: Tensor, x_pos: Tensor):
    """Encode two view batches and project them through every head.

    Heads consume unit-normalized backbone features: without
    normalization layers inside the MLPs, feeding raw features lets the
    encoder norm inflate through a positive feedback loop under SGD,
    while the normalized form damps head gradients as 1/|h|.

    Returns (h, h_pos, pairs) where pairs[c] holds the l2-normalized
    projections (z_c, z_pos_c); everything stays on the autodiff graph.
    """
    if x.shape[0] != x_pos.shape[0]:
        raise ContractViolation(f"batch extents differ: {x.shape[0]} vs {x_pos.shape[0]}")
    h = bundle.encoder(x)
    h_pos = bundle.encoder(x_pos)
    hn = T.l2_normalize(h)
    hn_pos = T.l2_normalize(h_pos)
    pairs = []
    for head in bundle.heads:
        z = T.l2_normalize(head(hn))
        z_pos = T.l2_normalize(head(hn_pos))
        pairs.append((z, z_pos))
    return h, h_pos, pairs


def adaptive_temperature(u: Tensor, v: Tensor, temp_net: Mlp, bounds: TempBounds) -> Tensor:
    """Pair-adaptive temperature: bounded sigmoid of <phi(u), phi(v)>.

    ``u`` and ``v`` are one vector each or aligned (B, d') rows; the
    result is a scalar or a (B,) tensor, differentiable with respect to
    both inputs and phi's parameters.
    """
    if u.shape[-1] != temp_net.spec.widths[0] or v.shape[-1] != temp_net.spec.widths[0]:
        raise ContractViolation(
            f"temperature net expects width {temp_net.spec.widths[0]}, "
            f"got {u.shape[-1]} and {v.shape[-1]}"
        )
    r = T.sum_(T.mul(temp_net(u), temp_net(v)), axis=-1)
    return bounded_sigmoid(r, bounds)


def adaptive_temperature_matrix(u_rows: Tensor, v_rows: Tensor, temp_net: Mlp,
                                bounds: TempBounds) -> Tensor:
    """All-pairs temperatures: entry (i, j) is the temperature of row i of
    ``u_rows`` against row j of ``v_rows``."""
    r = T.matmul(temp_net(u_rows), T.transpose(temp_net(v_rows)))
    return bounded_sigmoid(r, bounds)


# -- checkpoint format ----------------------------------------------------
# A checkpoint is an 8-byte little-endian manifest length, the JSON
# manifest, then concatenated AMTD tensor records. Offsets in the manifest
# are relative to the start of the payload.

def _component_entries(bundle: ModelBundle):
    yield "encoder", bundle.encoder
    for c, head in enumerate(bundle.heads):
        yield f"head{c}", head
    yield "temp_net", bundle.temp_net
    if bundle.predictor is not None:
        yield "predictor", bundle.predictor
    if bundle.temp_net_bt is not None:
        yield "temp_net_bt", bundle.temp_net_bt


def save_bundle(bundle: ModelBundle, path) -> None:
    tensors = []
    payload = bytearray()
    specs = {}
    for name, mlp in _component_entries(bundle):
        specs[name] = list(mlp.spec.widths)
        for layer in range(mlp.spec.n_layers):
            for kind, param in (("w", mlp.params[2 * layer]), ("b", mlp.params[2 * layer + 1])):
                blob = T.amtd_encode(param.data, dtype_code=0)
                tensors.append({
                    "name": f"{name}/{layer}/{kind}",
                    "shape": list(param.shape),
                    "offset": len(payload),
                    "length": len(blob),
                })
                payload.extend(blob)
    manifest = {
        "format": "contrastlab-checkpoint",
        "version": 1,
        "n_heads": bundle.n_heads,
        "specs": specs,
        "tensors": tensors,
    }
    body = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(body).to_bytes(8, "little"))
        fh.write(body)
        fh.write(bytes(payload))


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    manifest_len = int.from_bytes(blob[:8], "little")
    manifest = json.loads(blob[8:8 + manifest_len].decode("utf-8"))
    payload = blob[8 + manifest_len:]
    arrays = {}
    for entry in manifest["tensors"]:
        record = payload[entry["offset"]:entry["offset"] + entry["length"]]
        arr = T.amtd_decode(record)
        if list(arr.shape) != entry["shape"]:
            raise ContractViolation(f"checkpoint tensor {entry['name']} has wrong shape")
        arrays[entry["name"]] = arr

    def rebuild(name: str) -> Mlp:
        spec = MlpSpec(tuple(manifest["specs"][name]))
        params = []
        for layer in range(spec.n_layers):
            params.append(Tensor(arrays[f"{name}/{layer}/w"]))
            params.append(Tensor(arrays[f"{name}/{layer}/b"]))
        return Mlp(spec, params)

    heads = [rebuild(f"head{c}") for c in range(manifest["n_heads"])]
    predictor = rebuild("predictor") if "predictor" in manifest["specs"] else None
    temp_bt = rebuild("temp_net_bt") if "temp_net_bt" in manifest["specs"] else None
    return ModelBundle(rebuild("encoder"), heads, rebuild("temp_net"), predictor, temp_bt)
