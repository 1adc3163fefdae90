"""Fully connected networks with hand-written forward and backward passes.

Three trunk topologies share one parameter layout convention: each linear map
stores its weight as a ``(fan_in, fan_out)`` matrix so a batch ``x`` of shape
``(n, fan_in)`` maps to ``x @ W + b``.

``plain``
    linear -> ReLU for every hidden width.
``residual``
    every hidden stage computes ``g(h) = W2 relu(W1 h + b1) + b2`` and emits
    ``relu(g(h) + skip(h))``; ``skip`` is the identity when widths agree and a
    learned bias-free projection otherwise.
``dense_concat``
    stage ``k`` sees the concatenation of the network input and the outputs of
    all earlier stages; the head sees the concatenation of everything.

Heads: ``classifier7`` is a single linear layer producing 7 logits; ``va2`` has
two width-1 linear heads squashed by tanh (valence in column 0, arousal in
column 1).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

TOPOLOGIES = ("plain", "residual", "dense_concat")
HEADS = ("classifier7", "va2")


class ContractError(ValueError):
    """Inputs violate a documented precondition (shape, stale cache, ...)."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 285
    topology: str = "plain"
    hidden: tuple[int, ...] = (512, 256, 128)
    head: str = "classifier7"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}; expected one of {TOPOLOGIES}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be >= 1")

    @property
    def output_dim(self) -> int:
        return 7 if self.head == "classifier7" else 2

    def stage_input_dims(self) -> list[int]:
        dims = []
        width = self.input_dim
        for h in self.hidden:
            dims.append(width)
            width = width + h if self.topology == "dense_concat" else h
        return dims

    def head_input_dim(self) -> int:
        if self.topology == "dense_concat":
            return self.input_dim + sum(self.hidden)
        return self.hidden[-1] if self.hidden else self.input_dim

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for k, (d_in, h) in enumerate(zip(self.stage_input_dims(), self.hidden)):
            if self.topology == "residual":
                shapes += [(f"block{k}.W1", (d_in, h)), (f"block{k}.b1", (h,)),
                           (f"block{k}.W2", (h, h)), (f"block{k}.b2", (h,))]
                if d_in != h:
                    shapes.append((f"block{k}.skip", (d_in, h)))
            else:
                shapes += [(f"stage{k}.W", (d_in, h)), (f"stage{k}.b", (h,))]
        d = self.head_input_dim()
        if self.head == "classifier7":
            shapes += [("head.W", (d, 7)), ("head.b", (7,))]
        else:
            shapes += [("valence.W", (d, 1)), ("valence.b", (1,)),
                       ("arousal.W", (d, 1)), ("arousal.b", (1,))]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(input_dim=int(d["input_dim"]), topology=d["topology"],
                   hidden=tuple(d["hidden"]), head=d["head"])


class NetworkParams(dict):
    """Ordered name -> array mapping. ``version`` changes whenever weights move."""

    version = 0

    def touch(self):
        self.version += 1

    def copy(self) -> NetworkParams:
        out = NetworkParams((k, v.copy()) for k, v in self.items())
        return out

    def check(self, spec: NetworkSpec):
        expected = spec.param_shapes()
        if [k for k, _ in expected] != list(self.keys()):
            raise ContractError("parameter names do not match the network spec")
        for name, shape in expected:
            if self[name].shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {self[name].shape}")


@dataclass
class ForwardCache:
    spec: NetworkSpec
    params_id: int
    params_version: int
    x: np.ndarray
    stages: list
    head_input: np.ndarray
    output: np.ndarray


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def init_network(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    params = NetworkParams()
    for name, shape in spec.param_shapes():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / shape[0])
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def forward(params: NetworkParams, spec: NetworkSpec, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ContractError(f"input: expected (n, {spec.input_dim}), got {x.shape}")
    for name, shape in spec.param_shapes():
        if name not in params:
            raise ContractError(f"{name}: missing parameter")
        if params[name].shape != shape:
            raise ContractError(f"{name}: expected shape {shape}, got {params[name].shape}")

    stages = []
    h = x
    if spec.topology == "plain":
        for k in range(len(spec.hidden)):
            z = h @ params[f"stage{k}.W"] + params[f"stage{k}.b"]
            stages.append((h, z))
            h = relu(z)
    elif spec.topology == "residual":
        for k in range(len(spec.hidden)):
            p = f"block{k}."
            z1 = h @ params[p + "W1"] + params[p + "b1"]
            a1 = relu(z1)
            g = a1 @ params[p + "W2"] + params[p + "b2"]
            skip = h @ params[p + "skip"] if p + "skip" in params else h
            pre = g + skip
            stages.append((h, z1, a1, pre))
            h = relu(pre)
    else:
        pieces = [x]
        for k in range(len(spec.hidden)):
            c = np.concatenate(pieces, axis=1) if len(pieces) > 1 else x
            z = c @ params[f"stage{k}.W"] + params[f"stage{k}.b"]
            stages.append((c, z))
            pieces.append(relu(z))
        h = np.concatenate(pieces, axis=1) if len(pieces) > 1 else x

    if spec.head == "classifier7":
        out = h @ params["head.W"] + params["head.b"]
    else:
        v = np.tanh(h @ params["valence.W"] + params["valence.b"])
        a = np.tanh(h @ params["arousal.W"] + params["arousal.b"])
        out = np.concatenate([v, a], axis=1)
    cache = ForwardCache(spec=spec, params_id=id(params), params_version=getattr(params, "version", 0),
                         x=x, stages=stages, head_input=h, output=out)
    return out, cache


def _split_add(acc: list, grad: np.ndarray, widths: list[int]):
    start = 0
    for i, w in enumerate(widths):
        acc[i] = acc[i] + grad[:, start:start + w]
        start += w


def backward(params: NetworkParams, spec: NetworkSpec, cache: ForwardCache, output_grad) -> NetworkParams:
    """Parameter gradients of ``mean_i <output_grad_i, output_i>``.

    ``output_grad`` holds per-sample derivatives with respect to the network
    output; the returned gradients are averaged over the batch rows.
    """
    if cache.spec != spec or cache.params_id != id(params) \
            or cache.params_version != getattr(params, "version", 0):
        raise ContractError("forward cache does not belong to these parameters")
    gout = np.asarray(output_grad, dtype=np.float64)
    if gout.shape != cache.output.shape:
        raise ContractError(f"output_grad: expected shape {cache.output.shape}, got {gout.shape}")

    n = len(gout)
    g = gout / n
    h = cache.head_input
    grads = {}
    if spec.head == "classifier7":
        grads["head.W"] = h.T @ g
        grads["head.b"] = g.sum(axis=0)
        dh = g @ params["head.W"].T
    else:
        gv = g[:, :1] * (1.0 - cache.output[:, :1] ** 2)
        ga = g[:, 1:] * (1.0 - cache.output[:, 1:] ** 2)
        grads["valence.W"] = h.T @ gv
        grads["valence.b"] = gv.sum(axis=0)
        grads["arousal.W"] = h.T @ ga
        grads["arousal.b"] = ga.sum(axis=0)
        dh = gv @ params["valence.W"].T + ga @ params["arousal.W"].T

    if spec.topology == "plain":
        for k in reversed(range(len(spec.hidden))):
            h_in, z = cache.stages[k]
            dz = dh * (z > 0)
            grads[f"stage{k}.W"] = h_in.T @ dz
            grads[f"stage{k}.b"] = dz.sum(axis=0)
            dh = dz @ params[f"stage{k}.W"].T
    elif spec.topology == "residual":
        for k in reversed(range(len(spec.hidden))):
            p = f"block{k}."
            h_in, z1, a1, pre = cache.stages[k]
            dpre = dh * (pre > 0)
            grads[p + "W2"] = a1.T @ dpre
            grads[p + "b2"] = dpre.sum(axis=0)
            dz1 = (dpre @ params[p + "W2"].T) * (z1 > 0)
            grads[p + "W1"] = h_in.T @ dz1
            grads[p + "b1"] = dz1.sum(axis=0)
            dh = dz1 @ params[p + "W1"].T
            if p + "skip" in params:
                grads[p + "skip"] = h_in.T @ dpre
                dh = dh + dpre @ params[p + "skip"].T
            else:
                dh = dh + dpre
    else:
        widths = [spec.input_dim] + list(spec.hidden)
        acc = [np.zeros((n, w)) for w in widths]
        _split_add(acc, dh, widths)
        for k in reversed(range(len(spec.hidden))):
            c, z = cache.stages[k]
            dz = acc[k + 1] * (z > 0)
            grads[f"stage{k}.W"] = c.T @ dz
            grads[f"stage{k}.b"] = dz.sum(axis=0)
            _split_add(acc, dz @ params[f"stage{k}.W"].T, widths[:k + 1])

    return NetworkParams((name, grads[name]) for name, _ in spec.param_shapes())


def predict_class(logits) -> np.ndarray:
    z = np.asarray(logits)
    if z.ndim != 2 or z.shape[1] != 7:
        raise ContractError(f"logits: expected (n, 7), got {z.shape}")
    return np.argmax(z, axis=1)


# Checkpoint layout (all integers little-endian):
#   8 bytes  magic b"PAFFCKPT"
#   u32      format version (1)
#   u32      header length H
#   H bytes  UTF-8 JSON: {"spec": {...}, "meta": {...}, "arrays": [{"name", "shape"}, ...]}
#   then each array from the header, in order, as C-order float64 little-endian
CHECKPOINT_MAGIC = b"PAFFCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, spec: NetworkSpec, params: NetworkParams, meta: dict | None = None):
    params.check(spec)
    header = {
        "spec": spec.to_dict(),
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for v in params.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[NetworkSpec, NetworkParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    spec = NetworkSpec.from_dict(header["spec"])
    params = NetworkParams()
    offset = 16 + hlen
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params[entry["name"]] = arr.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing or missing data")
    params.check(spec)
    return spec, params, header["meta"]
