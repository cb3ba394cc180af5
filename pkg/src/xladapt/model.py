"""Network architecture: shared TDNN trunk plus per-task heads.

A network is a stack of temporal-context affine+ReLU layers (the trunk,
shared by every task) followed, per task, by one plain affine+ReLU pre-final
layer and one linear softmax-output layer. Parameters live in a flat
name -> (W, b) map; a fixed per-dimension input normalization (scale, shift)
rides along with the parameters and is never trained.

Checkpoints are little-endian binary: magic "XLAC", u32 format version, the
architecture as a canonical JSON text block, a per-layer shape table, the raw
float64 parameter payload in architecture order, then provenance records as
length-prefixed JSON. Round-trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    LayerCache,
    Rng,
    affine_forward,
    gather_rows,
    relu,
    splice_index,
)

CHECKPOINT_MAGIC = b"XLAC"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("tdnn_affine_relu", "affine_relu", "softmax_output")


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Bad magic or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload does."""


class CheckpointShapeError(CheckpointError):
    """Shape table disagrees with the architecture or the payload."""


# -----------------------------------------------------------------------------
# Specs
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_dim: int
    out_dim: int
    context: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer {self.name}: dims must be positive")
        object.__setattr__(self, "context", tuple(int(o) for o in self.context))
        if self.kind == "softmax_output":
            if self.context:
                raise ValueError(f"layer {self.name}: softmax output takes no context")
        else:
            if not self.context:
                raise ValueError(f"layer {self.name}: context must be non-empty")
            if list(self.context) != sorted(set(self.context)):
                raise ValueError(f"layer {self.name}: context must be sorted, unique")

    @property
    def weight_rows(self) -> int:
        return self.in_dim * max(1, len(self.context))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "context": list(self.context),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], d["name"], d["in_dim"], d["out_dim"], tuple(d["context"]))


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    trunk: tuple[LayerSpec, ...]
    heads: dict[str, tuple[LayerSpec, LayerSpec]]

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(
            self, "heads", {k: tuple(v) for k, v in sorted(self.heads.items())}
        )
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.trunk:
            raise ValueError("trunk must have at least one layer")
        if not self.heads:
            raise ValueError("at least one head is required")
        prev_name, prev_dim = "input", self.input_dim
        for layer in self.trunk:
            if layer.in_dim != prev_dim:
                raise ValueError(
                    f"dim chain broken between {prev_name} (out {prev_dim}) and "
                    f"{layer.name} (in {layer.in_dim})"
                )
            prev_name, prev_dim = layer.name, layer.out_dim
        for task, (pre, out) in self.heads.items():
            if pre.kind != "affine_relu" or out.kind != "softmax_output":
                raise ValueError(f"head {task}: expected affine_relu + softmax_output")
            if pre.in_dim != prev_dim:
                raise ValueError(
                    f"dim chain broken between {prev_name} (out {prev_dim}) and "
                    f"{pre.name} (in {pre.in_dim})"
                )
            if out.in_dim != pre.out_dim:
                raise ValueError(
                    f"dim chain broken between {pre.name} (out {pre.out_dim}) and "
                    f"{out.name} (in {out.in_dim})"
                )
        names = [l.name for l in self.layers()]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")

    def layers(self) -> list[LayerSpec]:
        out = list(self.trunk)
        for pre, head_out in self.heads.values():
            out.extend((pre, head_out))
        return out

    def head_layers(self, task: str) -> tuple[LayerSpec, LayerSpec]:
        if task not in self.heads:
            raise KeyError(
                f"unknown task {task!r}; known tasks: {sorted(self.heads)}"
            )
        return self.heads[task]

    def senones(self, task: str) -> int:
        return self.head_layers(task)[1].out_dim

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "trunk": [l.to_dict() for l in self.trunk],
            "heads": {
                t: [pre.to_dict(), out.to_dict()] for t, (pre, out) in self.heads.items()
            },
        }

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            d["input_dim"],
            tuple(LayerSpec.from_dict(x) for x in d["trunk"]),
            {
                t: (LayerSpec.from_dict(pre), LayerSpec.from_dict(out))
                for t, (pre, out) in d["heads"].items()
            },
        )


DEFAULT_TRUNK_CONTEXTS = ((-1, 0, 1),) * 3 + ((-3, 0, 3),) * 3 + ((0,),)


def make_tdnn_spec(
    input_dim: int,
    hidden_dim: int,
    head_senones: dict[str, int],
    trunk_contexts: tuple[tuple[int, ...], ...] = DEFAULT_TRUNK_CONTEXTS,
) -> NetworkSpec:
    """Widening-context trunk (depth = len(trunk_contexts)) plus one head per task."""
    trunk = []
    prev = input_dim
    for i, ctx in enumerate(trunk_contexts, start=1):
        trunk.append(LayerSpec("tdnn_affine_relu", f"trunk{i}", prev, hidden_dim, ctx))
        prev = hidden_dim
    heads = {}
    for task, senones in head_senones.items():
        heads[task] = (
            LayerSpec("affine_relu", f"{task}.prefinal", prev, hidden_dim, (0,)),
            LayerSpec("softmax_output", f"{task}.output", hidden_dim, senones, ()),
        )
    return NetworkSpec(input_dim, tuple(trunk), heads)


# -----------------------------------------------------------------------------
# Network
# -----------------------------------------------------------------------------


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, tuple[np.ndarray, np.ndarray]]
    input_scale: np.ndarray
    input_shift: np.ndarray
    provenance: list[dict] = field(default_factory=list)

    def copy(self) -> "Network":
        return Network(
            self.spec,
            {k: (w.copy(), b.copy()) for k, (w, b) in self.params.items()},
            self.input_scale.copy(),
            self.input_shift.copy(),
            [dict(r) for r in self.provenance],
        )

    def add_provenance(self, stage: str, **details) -> None:
        self.provenance.append({"stage": stage, **details})

    def trainable_layer_names(self) -> list[str]:
        return [l.name for l in self.spec.layers()]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.params.values())


def build_network(spec: NetworkSpec, rng: Rng) -> Network:
    """Initialize weights U(-a, a) with a = sqrt(6/(fan_in+fan_out)), zero biases.

    Each layer draws from its own named substream, so layer parameters do not
    depend on how many other layers exist.
    """
    init_rng = rng.split("init")
    params = {}
    for layer in spec.layers():
        fan_in, fan_out = layer.weight_rows, layer.out_dim
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = init_rng.split(layer.name).uniform(-a, a, (fan_in, fan_out))
        params[layer.name] = (w, np.zeros(layer.out_dim))
    return Network(
        spec,
        params,
        np.ones(spec.input_dim),
        np.zeros(spec.input_dim),
        [],
    )


def splice_context(features: np.ndarray, context: tuple[int, ...]) -> np.ndarray:
    """Row t becomes the concatenation of rows t+o per offset, edges clamped."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"features must be a non-empty 2-D array, got {features.shape}")
    return gather_rows(features, splice_index(features.shape[0], tuple(context)))


def forward_batch(
    net: Network, task: str, frame_seqs: list[np.ndarray]
) -> tuple[np.ndarray, list[LayerCache], list[tuple[int, int]]]:
    """Run trunk + one head over several frame sequences stacked row-wise.

    Splicing is applied per sequence (edges clamp at sequence boundaries); the
    affine and ReLU stages act row-wise on the stack, so the stacked result is
    bit-identical to concatenating per-sequence forward passes.
    """
    pre, out = net.spec.head_layers(task)
    if not frame_seqs:
        raise ValueError("forward needs at least one frame sequence")
    for f in frame_seqs:
        if f.ndim != 2 or f.shape[1] != net.spec.input_dim:
            raise ValueError(
                f"frame width {f.shape} incompatible with input_dim {net.spec.input_dim}"
            )
        if f.shape[0] < 1:
            raise ValueError("empty frame sequence")
    segments = []
    start = 0
    for f in frame_seqs:
        segments.append((start, start + f.shape[0]))
        start += f.shape[0]
    h = np.vstack(frame_seqs) * net.input_scale + net.input_shift
    caches: list[LayerCache] = []
    for layer in list(net.spec.trunk) + [pre, out]:
        w, b = net.params[layer.name]
        if layer.context in ((), (0,)):
            x, index = h, None
        else:
            index = [splice_index(b_ - a_, layer.context) for a_, b_ in segments]
            x = np.vstack(
                [gather_rows(h[a_:b_], idx) for (a_, b_), idx in zip(segments, index)]
            )
        z = affine_forward(x, w, b)
        is_output = layer.kind == "softmax_output"
        caches.append(
            LayerCache(
                name=layer.name,
                w=w,
                x=x,
                preact=None if is_output else z,
                index=index,
                segments=segments,
            )
        )
        h = z if is_output else relu(z)
    return h, caches, segments


def forward(
    net: Network, task: str, frames: np.ndarray
) -> tuple[np.ndarray, list[LayerCache]]:
    """Logits (T x senones) for one frame sequence, plus the backward cache."""
    logits, caches, _ = forward_batch(net, task, [np.asarray(frames, dtype=np.float64)])
    return logits, caches


# -----------------------------------------------------------------------------
# Freeze masks
# -----------------------------------------------------------------------------


@dataclass
class FreezeMask:
    """Per-layer learning-rate scale; 0 freezes a layer outright."""

    scales: dict[str, float]

    def validate(self, spec: NetworkSpec) -> None:
        names = {l.name for l in spec.layers()}
        missing = names - set(self.scales)
        extra = set(self.scales) - names
        if missing or extra:
            raise ValueError(f"mask does not cover network: missing={sorted(missing)} extra={sorted(extra)}")
        for name, s in self.scales.items():
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"mask scale for {name} outside [0, 1]: {s}")

    def scale(self, name: str) -> float:
        return self.scales[name]

    def unfrozen_names(self) -> set[str]:
        return {n for n, s in self.scales.items() if s != 0.0}

    @classmethod
    def all_unfrozen(cls, spec: NetworkSpec) -> "FreezeMask":
        return cls({l.name: 1.0 for l in spec.layers()})

    @classmethod
    def shared_adaptation(cls, spec: NetworkSpec, k_layers: int) -> "FreezeMask":
        """Unfreeze trunk layers 1..k only; deeper trunk and every head stay frozen."""
        if not 1 <= k_layers <= len(spec.trunk):
            raise ValueError(
                f"k_layers {k_layers} out of range 1..{len(spec.trunk)}"
            )
        scales = {l.name: 0.0 for l in spec.layers()}
        for layer in spec.trunk[:k_layers]:
            scales[layer.name] = 1.0
        return cls(scales)


# -----------------------------------------------------------------------------
# Trunk grafting
# -----------------------------------------------------------------------------


def transfer_shared_layers(
    adapted: Network, original: Network, boundary: int | None = None
) -> Network:
    """Copy the adapted trunk (layers 1..boundary) onto the original network.

    The original's heads are kept untouched; parameter copies are bitwise.
    """
    depth = len(original.spec.trunk)
    if boundary is None:
        boundary = depth
    if not 1 <= boundary <= min(depth, len(adapted.spec.trunk)):
        raise ValueError(f"boundary {boundary} out of range 1..{depth}")
    diffs = []
    for i in range(boundary):
        a, o = adapted.spec.trunk[i], original.spec.trunk[i]
        if a != o:
            diffs.append(
                f"  layer {i + 1}: adapted {a.name} "
                f"({a.weight_rows}x{a.out_dim}, ctx {a.context}) vs original "
                f"{o.name} ({o.weight_rows}x{o.out_dim}, ctx {o.context})"
            )
    if diffs:
        raise ValueError(
            "trunk spec mismatch at or below boundary:\n" + "\n".join(diffs)
        )
    result = original.copy()
    for layer in original.spec.trunk[:boundary]:
        w, b = adapted.params[layer.name]
        result.params[layer.name] = (w.copy(), b.copy())
    result.input_scale = adapted.input_scale.copy()
    result.input_shift = adapted.input_shift.copy()
    result.provenance = [dict(r) for r in adapted.provenance]
    result.add_provenance("graft", boundary=boundary)
    return result


# -----------------------------------------------------------------------------
# Checkpoint I/O
# -----------------------------------------------------------------------------

_INPUT_NORM = "__input_norm__"


def _payload_entries(net: Network) -> list[tuple[str, np.ndarray, np.ndarray]]:
    entries = [(_INPUT_NORM, net.input_scale.reshape(1, -1), net.input_shift)]
    for layer in net.spec.layers():
        w, b = net.params[layer.name]
        entries.append((layer.name, w, b))
    return entries


def save_checkpoint(net: Network, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    spec_text = net.spec.canonical_text().encode("utf-8")
    buf.write(struct.pack("<Q", len(spec_text)))
    buf.write(spec_text)
    entries = _payload_entries(net)
    buf.write(struct.pack("<I", len(entries)))
    for name, w, b in entries:
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<III", w.shape[0], w.shape[1], b.shape[0]))
    for _, w, b in entries:
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(net.provenance)))
    for record in net.provenance:
        rec = json.dumps(record, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<Q", len(rec)))
        buf.write(rec)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointVersionError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )
    (spec_len,) = r.unpack("<Q")
    spec = NetworkSpec.from_dict(json.loads(r.take(spec_len).decode("utf-8")))
    (n_entries,) = r.unpack("<I")
    table = []
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        w_rows, w_cols, b_len = r.unpack("<III")
        table.append((name, w_rows, w_cols, b_len))
    expected = [(_INPUT_NORM, 1, spec.input_dim, spec.input_dim)] + [
        (l.name, l.weight_rows, l.out_dim, l.out_dim) for l in spec.layers()
    ]
    if [t for t in table] != expected:
        raise CheckpointShapeError(
            f"shape table does not match architecture: {table} vs {expected}"
        )
    arrays = {}
    for name, w_rows, w_cols, b_len in table:
        w = np.frombuffer(r.take(8 * w_rows * w_cols), dtype="<f8").reshape(w_rows, w_cols)
        b = np.frombuffer(r.take(8 * b_len), dtype="<f8")
        arrays[name] = (w.copy(), b.copy())
    (n_prov,) = r.unpack("<I")
    provenance = []
    for _ in range(n_prov):
        (rec_len,) = r.unpack("<Q")
        provenance.append(json.loads(r.take(rec_len).decode("utf-8")))
    if r.pos != len(r.data):
        raise CheckpointTruncatedError(
            f"{len(r.data) - r.pos} trailing bytes after provenance"
        )
    scale_w, shift = arrays.pop(_INPUT_NORM)
    return Network(spec, arrays, scale_w.reshape(-1), shift, provenance)
