"""Desk-scale multi-pathway model builders.

Four topologies cover the useful arrangements of pathways:

  m1 - independent copies of one column, each seeing the full input
  m2 - one convolutional trunk with classifier heads at three depths
  m3 - a trunk ending in a 4x4 feature grid whose 1x1/2x2/4x4 prediction
       maps are upsampled and added, one pathway per grid cell (16 total)
  m4 - independent columns, each consuming one rectangular input region

All builders return a MultiPathModel whose forward() yields a LogitBundle.
Initialization is uniform in +/-sqrt(6/fan_in) with zero biases and is
bit-reproducible from the seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .routing import LogitBundle
from .tensor import (
    DimensionError,
    Tensor,
    conv1x1,
    conv2d,
    crop,
    matmul,
    maxpool2,
    nearest_resize,
    nearest_upsample,
    relu,
    reshape,
)

__all__ = [
    "ColumnSpec",
    "MultiPathModel",
    "ConfigurationError",
    "CheckpointFormatError",
    "build_m1",
    "build_m2",
    "build_m3",
    "build_m4",
    "forward_all",
    "default_regions",
    "quad_tree_regions",
    "nearest_upsample",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigurationError(ValueError):
    """A model builder was given an unusable configuration."""


class CheckpointFormatError(ValueError):
    """A checkpoint file does not follow the expected binary layout."""


@dataclass(frozen=True)
class ColumnSpec:
    """Architecture and input geometry shared by a model's columns."""

    n_classes: int
    in_channels: int = 1
    height: int = 8
    width: int = 8
    kind: str = "mlp"  # mlp | cnn
    hidden: tuple = (32, 32)  # mlp hidden widths
    channels: tuple = (8, 16)  # cnn conv widths
    activation: str = "relu"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.n_classes}")
        if self.kind not in ("mlp", "cnn"):
            raise ConfigurationError(f"unknown column kind {self.kind!r}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ConfigurationError(f"hidden must be two positive widths, got {self.hidden}")
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ConfigurationError(f"channels must be positive, got {self.channels}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def geometry(self) -> tuple:
        return (self.in_channels, self.height, self.width)


def _init_weight(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, shape), grad_enabled=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), grad_enabled=True)


class _Linear:
    def __init__(self, rng, name, n_in, n_out):
        self.name = name
        self.weight = _init_weight(rng, (n_in, n_out), fan_in=n_in)
        self.bias = _zeros((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


class _Conv3x3:
    def __init__(self, rng, name, c_in, c_out):
        self.name = name
        self.kernel = _init_weight(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9)
        self.bias = _zeros((c_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias)

    def params(self):
        return [(f"{self.name}.kernel", self.kernel), (f"{self.name}.bias", self.bias)]


class _Conv1x1:
    def __init__(self, rng, name, c_in, c_out):
        self.name = name
        self.weight = _init_weight(rng, (c_out, c_in), fan_in=c_in)
        self.bias = _zeros((c_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1x1(x, self.weight, self.bias)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


def _flatten(x: Tensor) -> Tensor:
    n = x.data.shape[0]
    return reshape(x, (n, x.data.size // n))


class _Column:
    """A full input-to-logits column: 2-hidden-layer MLP or 2-conv-block CNN."""

    def __init__(self, rng, name, spec: ColumnSpec):
        c, h, w = spec.geometry
        self.kind = spec.kind
        self.layers: list = []
        if spec.kind == "mlp":
            h1, h2 = spec.hidden
            self.layers = [
                _Linear(rng, f"{name}.fc1", c * h * w, h1),
                _Linear(rng, f"{name}.fc2", h1, h2),
                _Linear(rng, f"{name}.head", h2, spec.n_classes),
            ]
        else:
            if h % 4 or w % 4:
                raise ConfigurationError(
                    f"cnn columns pool twice and need spatial sizes divisible by 4, got {h}x{w}"
                )
            c1, c2 = spec.channels[0], spec.channels[min(1, len(spec.channels) - 1)]
            self.layers = [
                _Conv3x3(rng, f"{name}.conv1", c, c1),
                _Conv3x3(rng, f"{name}.conv2", c1, c2),
                _Linear(rng, f"{name}.head", c2 * (h // 4) * (w // 4), spec.n_classes),
            ]

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "mlp":
            fc1, fc2, head = self.layers
            return head(relu(fc2(relu(fc1(_flatten(x))))))
        conv1, conv2, head = self.layers
        x = maxpool2(relu(conv1(x)))
        x = maxpool2(relu(conv2(x)))
        return head(_flatten(x))

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


class MultiPathModel:
    """A built topology: named parameters plus a forward map to a LogitBundle."""

    def __init__(
        self,
        topology: str,
        n_pathways: int,
        n_classes: int,
        geometry: tuple,
        parameters: list,
        forward_fn: Callable[[Tensor], list],
        build_config: dict,
    ):
        self.topology = topology
        self.n_pathways = n_pathways
        self.n_classes = n_classes
        self.geometry = tuple(geometry)
        self.parameters = parameters  # list of (name, Tensor)
        self._forward_fn = forward_fn
        self.build_config = build_config

    def forward(self, batch: Tensor) -> LogitBundle:
        c, h, w = self.geometry
        if batch.data.ndim != 4 or batch.data.shape[1:] != (c, h, w):
            raise DimensionError(
                f"batch shape {batch.data.shape} does not match model geometry "
                f"[n, {c}, {h}, {w}]"
            )
        return LogitBundle(pathways=self._forward_fn(batch))

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters:
            if name not in state:
                raise CheckpointFormatError(f"missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise CheckpointFormatError(
                    f"parameter {name!r} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data[...] = arr

    def zero_grads(self) -> None:
        for _, t in self.parameters:
            t.grad = None


def forward_all(model: MultiPathModel, batch) -> LogitBundle:
    """Run every pathway of the model on one batch, all on a single tape."""
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=np.float64))
    return model.forward(batch)


def parameter_count(model: MultiPathModel) -> int:
    return sum(t.data.size for _, t in model.parameters)


def _spec_from_config(cfg: dict) -> ColumnSpec:
    d = dict(cfg)
    d["hidden"] = tuple(d.get("hidden", (32, 32)))
    d["channels"] = tuple(d.get("channels", (8, 16)))
    return ColumnSpec(**d)


def build_m1(
    n_columns: int,
    spec: ColumnSpec,
    seed: int,
    column_seeds: Optional[Sequence[int]] = None,
) -> MultiPathModel:
    """Independent copies of one column, initialized from per-column seeds."""
    if n_columns < 2:
        raise ConfigurationError(f"m1 needs at least 2 columns, got {n_columns}")
    if column_seeds is not None and len(column_seeds) != n_columns:
        raise ConfigurationError("column_seeds must have one entry per column")
    columns = []
    for i in range(n_columns):
        rng = (
            np.random.default_rng((int(column_seeds[i]),))
            if column_seeds is not None
            else np.random.default_rng((int(seed), i))
        )
        columns.append(_Column(rng, f"column{i}", spec))

    def forward_fn(batch: Tensor) -> list:
        return [col(batch) for col in columns]

    params = [p for col in columns for p in col.params()]
    config = {
        "topology": "m1",
        "n_columns": n_columns,
        "seed": int(seed),
        "column_seeds": list(map(int, column_seeds)) if column_seeds is not None else None,
        "spec": asdict(spec),
    }
    return MultiPathModel("m1", n_columns, spec.n_classes, spec.geometry, params, forward_fn, config)


def build_m2(spec: ColumnSpec, seed: int) -> MultiPathModel:
    """One shared 3-block convolutional trunk with heads at three depths.

    Blocks 1 and 2 halve the spatial size; block 3 keeps it. Each head
    flattens its block's features into class logits, so the bundle runs
    shallow to deep.
    """
    c, h, w = spec.geometry
    if h % 4 or w % 4:
        raise ConfigurationError(f"m2 pools twice and needs spatial sizes divisible by 4, got {h}x{w}")
    widths = tuple(spec.channels) + (spec.channels[-1],) * (3 - len(spec.channels))
    widths = widths[:3]
    rng = np.random.default_rng((int(seed),))
    conv_a = _Conv3x3(rng, "trunk.block1", c, widths[0])
    conv_b = _Conv3x3(rng, "trunk.block2", widths[0], widths[1])
    conv_c = _Conv3x3(rng, "trunk.block3", widths[1], widths[2])
    head1 = _Linear(rng, "head1", widths[0] * (h // 2) * (w // 2), spec.n_classes)
    head2 = _Linear(rng, "head2", widths[1] * (h // 4) * (w // 4), spec.n_classes)
    head3 = _Linear(rng, "head3", widths[2] * (h // 4) * (w // 4), spec.n_classes)

    def forward_fn(batch: Tensor) -> list:
        f1 = maxpool2(relu(conv_a(batch)))
        f2 = maxpool2(relu(conv_b(f1)))
        f3 = relu(conv_c(f2))
        return [head1(_flatten(f1)), head2(_flatten(f2)), head3(_flatten(f3))]

    params = (
        conv_a.params() + conv_b.params() + conv_c.params()
        + head1.params() + head2.params() + head3.params()
    )
    config = {"topology": "m2", "seed": int(seed), "spec": asdict(spec)}
    return MultiPathModel("m2", 3, spec.n_classes, spec.geometry, params, forward_fn, config)


def build_m3(spec: ColumnSpec, seed: int) -> MultiPathModel:
    """Feature-grid heads: 16 pathways, one per cell of a 4x4 grid.

    The trunk pools the input down to 4x4. Pointwise heads predict class
    maps at 4x4, 2x2 and 1x1 resolution; the coarser maps are nearest-
    neighbor upsampled to 4x4 and added, and each resulting cell is one
    pathway (row-major order).
    """
    c, h, w = spec.geometry
    if h != w or h < 4 or (h & (h - 1)) or h % 4:
        raise ConfigurationError(
            f"m3 needs square power-of-two inputs of at least 4 (it must pool down to a 4x4 grid), got {h}x{w}"
        )
    n_pool = int(np.log2(h // 4))
    rng = np.random.default_rng((int(seed),))
    convs = []
    width_in = c
    for i in range(max(1, n_pool)):
        width_out = spec.channels[min(i, len(spec.channels) - 1)]
        convs.append(_Conv3x3(rng, f"trunk.block{i + 1}", width_in, width_out))
        width_in = width_out
    head4 = _Conv1x1(rng, "head4x4", width_in, spec.n_classes)
    head2 = _Conv1x1(rng, "head2x2", width_in, spec.n_classes)
    head1 = _Conv1x1(rng, "head1x1", width_in, spec.n_classes)

    def forward_fn(batch: Tensor) -> list:
        feat = batch
        for i, conv in enumerate(convs):
            feat = relu(conv(feat))
            if i < n_pool:
                feat = maxpool2(feat)
        grid2 = maxpool2(feat)
        grid1 = maxpool2(grid2)
        combined = (
            nearest_upsample(head1(grid1), 4)
            + nearest_upsample(head2(grid2), 2)
            + head4(feat)
        )
        n = batch.data.shape[0]
        cells = []
        for r in range(4):
            for col in range(4):
                cells.append(reshape(crop(combined, r, col, 1, 1), (n, spec.n_classes)))
        return cells

    params = [p for conv in convs for p in conv.params()]
    params += head4.params() + head2.params() + head1.params()
    config = {"topology": "m3", "seed": int(seed), "spec": asdict(spec)}
    return MultiPathModel("m3", 16, spec.n_classes, spec.geometry, params, forward_fn, config)


def default_regions(height: int, width: int) -> list[tuple]:
    """Full image plus the four quadrants: (top, left, height, width) each."""
    h2, w2 = height // 2, width // 2
    return [
        (0, 0, height, width),
        (0, 0, h2, w2),
        (0, w2, h2, width - w2),
        (h2, 0, height - h2, w2),
        (h2, w2, height - h2, width - w2),
    ]


def quad_tree_regions(height: int, width: int) -> list[tuple]:
    """A 23-rectangle pyramid: full image, quadrants, overlapping half-size
    windows, and horizontal/vertical scan strips."""
    if height < 8 or width < 8:
        raise ConfigurationError(f"pyramid layout needs inputs of at least 8x8, got {height}x{width}")
    h2, w2, h4, w4 = height // 2, width // 2, height // 4, width // 4
    regions = [(0, 0, height, width)]
    regions += default_regions(height, width)[1:]  # 4 quadrants
    # center plus edge-centered half windows (5)
    regions += [
        (h4, w4, h2, w2),
        (0, w4, h2, w2),
        (height - h2, w4, h2, w2),
        (h4, 0, h2, w2),
        (h4, width - w2, h2, w2),
    ]
    # 3 half-height horizontal strips, 3 half-width vertical strips
    regions += [(min(i * h4, height - h2), 0, h2, width) for i in range(3)]
    regions += [(0, min(i * w4, width - w2), height, w2) for i in range(3)]
    # 7 quarter-height scan strips
    regions += [(min(i * height // 8, height - h4), 0, h4, width) for i in range(7)]
    assert len(regions) == 23
    return regions


def build_m4(regions: Sequence[tuple], spec: ColumnSpec, seed: int) -> MultiPathModel:
    """One independent column per input region.

    Each column sees its rectangle cropped out and nearest-neighbor resized
    to the column's expected input size, so a column is blind to pixels
    outside its region.
    """
    c, h, w = spec.geometry
    regions = [tuple(int(v) for v in r) for r in regions]
    if not regions:
        raise ConfigurationError("m4 needs at least one region")
    for top, left, rh, rw in regions:
        if top < 0 or left < 0 or rh < 1 or rw < 1 or top + rh > h or left + rw > w:
            raise ConfigurationError(
                f"region ({top},{left},{rh},{rw}) lies outside the {h}x{w} input"
            )
    columns = [
        _Column(np.random.default_rng((int(seed), i)), f"region{i}", spec)
        for i in range(len(regions))
    ]

    def forward_fn(batch: Tensor) -> list:
        out = []
        for (top, left, rh, rw), col in zip(regions, columns):
            patch = crop(batch, top, left, rh, rw)
            if (rh, rw) != (h, w):
                patch = nearest_resize(patch, h, w)
            out.append(col(patch))
        return out

    params = [p for col in columns for p in col.params()]
    config = {
        "topology": "m4",
        "seed": int(seed),
        "regions": [list(r) for r in regions],
        "spec": asdict(spec),
    }
    return MultiPathModel("m4", len(regions), spec.n_classes, spec.geometry, params, forward_fn, config)


def rebuild(config: dict) -> MultiPathModel:
    """Reconstruct a model from its build_config (fresh initialization)."""
    cfg = dict(config)
    topology = cfg.get("topology")
    spec = _spec_from_config(cfg["spec"])
    if topology == "m1":
        return build_m1(cfg["n_columns"], spec, cfg["seed"], cfg.get("column_seeds"))
    if topology == "m2":
        return build_m2(spec, cfg["seed"])
    if topology == "m3":
        return build_m3(spec, cfg["seed"])
    if topology == "m4":
        return build_m4([tuple(r) for r in cfg["regions"]], spec, cfg["seed"])
    raise CheckpointFormatError(f"unknown topology {topology!r}")


_MAGIC = b"WKRT"
_VERSION = 1


def _write_str(out: list, s: str) -> None:
    raw = s.encode("utf-8")
    out.append(struct.pack("<I", len(raw)))
    out.append(raw)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError("checkpoint file is truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save_checkpoint(
    path,
    model: MultiPathModel,
    params: Optional[dict[str, np.ndarray]] = None,
    extra: Optional[dict] = None,
) -> None:
    """Versioned binary checkpoint: magic, topology, config, named tensors.

    ``extra`` (e.g. normalization statistics) is stored inside the config
    blob so a checkpoint is self-contained for later evaluation.
    """
    state = params if params is not None else model.state()
    config = dict(model.build_config)
    if extra:
        config["extra"] = extra
    out: list = [_MAGIC, struct.pack("<I", _VERSION)]
    _write_str(out, model.topology)
    _write_str(out, json.dumps(config, sort_keys=True))
    names = [name for name, _ in model.parameters]
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        _write_str(out, name)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path) -> tuple[MultiPathModel, dict]:
    """Rebuild the stored model and return it with the config's extra block."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic = reader.take(4)
    if magic != _MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    version = reader.u32()
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    topology = reader.string()
    config = json.loads(reader.string())
    if config.get("topology") != topology:
        raise CheckpointFormatError("topology tag disagrees with stored config")
    extra = config.pop("extra", {})
    model = rebuild(config)
    n_params = reader.u32()
    state: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        name = reader.string()
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(dims)
        state[name] = arr.astype(np.float64)
    model.load_state(state)
    return model, extra
