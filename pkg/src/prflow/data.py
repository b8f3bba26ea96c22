"""Datasets, masks, IDX files, and the checkpoint container.

Masks are counter-based: each sample's Bernoulli draws come from a Philox
generator keyed by (seed, stream) with the sample index in the counter
word, so mask i is reproducible in isolation and train/test streams never
collide.

Checkpoints are a small sectioned binary format (magic ``PRFLOWCK``).
All multi-byte integers are little-endian; array payloads are raw
little-endian bytes, so a save/load cycle is bitwise exact.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .errors import CheckpointError, ConfigError, IdxFormatError, ShapeError
from .training import AdamStateData, TrainConfig, TrainState

_IDX_DTYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {np.dtype("u1"): 0x08, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}


@dataclass
class ImageDataset:
    """Immutable stack of images in [0, 1] with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim not in (3, 4):
            raise ShapeError(f"images must be (N, H, W) or (N, H, W, C), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ShapeError("labels must be one integer per image")
            self.labels.setflags(write=False)
        self.images.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index) -> "ImageDataset":
        labels = None if self.labels is None else self.labels[index]
        return ImageDataset(self.images[index].copy(), labels)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (unsigned-byte, float32, or float64 payloads)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[0] != 0 or blob[1] != 0:
        raise IdxFormatError(f"{path}: bad magic {blob[:4].hex()}; first two bytes must be zero")
    type_byte, ndim = blob[2], blob[3]
    if type_byte not in _IDX_DTYPES:
        raise IdxFormatError(f"{path}: unsupported type byte 0x{type_byte:02x}")
    dtype = _IDX_DTYPES[type_byte]
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxFormatError(f"{path}: header claims {ndim} dimensions but file is {len(blob)} bytes")
    dims = struct.unpack(">" + "I" * ndim, blob[4:header])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(blob) - header
    if payload != expected:
        raise IdxFormatError(
            f"{path}: payload is {payload} bytes but dimensions {dims} require {expected}"
        )
    arr = np.frombuffer(blob, dtype=dtype, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def save_idx(path, array: np.ndarray) -> None:
    """Write an array as an IDX file; dtype must be uint8, float32, or float64."""
    array = np.asarray(array)
    key = np.dtype(array.dtype.str.lstrip("<>=|"))
    if key not in _IDX_CODES:
        raise IdxFormatError(f"cannot encode dtype {array.dtype} as IDX")
    if array.ndim > 255:
        raise IdxFormatError("IDX supports at most 255 dimensions")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, _IDX_CODES[key], array.ndim]))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=key.newbyteorder(">")).tobytes())


def load_idx(images_path, labels_path=None) -> ImageDataset:
    """Build a dataset from IDX files, rescaling unsigned-byte images to [0, 1]."""
    raw = read_idx(images_path)
    if raw.ndim not in (3, 4):
        raise IdxFormatError(f"{images_path}: expected (N, H, W[, C]) images, got shape {raw.shape}")
    images = raw.astype(np.float64) / 255.0 if raw.dtype == np.uint8 else raw.astype(np.float64)
    labels = None
    if labels_path is not None:
        lab = read_idx(labels_path)
        if lab.ndim != 1:
            raise IdxFormatError(f"{labels_path}: labels must be one-dimensional, got {lab.shape}")
        if lab.shape[0] != images.shape[0]:
            raise IdxFormatError(
                f"{labels_path}: {lab.shape[0]} labels for {images.shape[0]} images"
            )
        labels = lab.astype(np.int64)
    return ImageDataset(images, labels)


def generate_synthetic(kind: str, n: int, shape=(8, 8), seed: int = 0) -> ImageDataset:
    """Small deterministic corpora with known statistics.

    ``constant``: flat images, label = level decile. ``ramp``: linear ramps
    along rows or columns, label = axis. ``blocks``: two-level split images,
    label = split orientation.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w = shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x53594E54]))
    images = np.empty((n, h, w), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    if kind == "constant":
        levels = rng.random(n)
        for i, lv in enumerate(levels):
            images[i] = lv
            labels[i] = min(9, int(lv * 10))
    elif kind == "ramp":
        for i in range(n):
            axis = i % 2
            lo, hi = np.sort(rng.random(2))
            line = np.linspace(lo, hi, w if axis == 0 else h)
            images[i] = np.tile(line, (h, 1)) if axis == 0 else np.tile(line[:, None], (1, w))
            labels[i] = axis
    elif kind == "blocks":
        for i in range(n):
            k = int(rng.integers(2, 5))
            rects = [(0, h, 0, w)]
            for _ in range(k - 1):
                j = max(range(len(rects)), key=lambda t: (rects[t][1] - rects[t][0]) * (rects[t][3] - rects[t][2]))
                r0, r1, c0, c1 = rects.pop(j)
                if (r1 - r0 >= c1 - c0 and r1 - r0 > 1) or c1 - c0 <= 1:
                    cut = int(rng.integers(r0 + 1, r1))
                    rects += [(r0, cut, c0, c1), (cut, r1, c0, c1)]
                else:
                    cut = int(rng.integers(c0 + 1, c1))
                    rects += [(r0, r1, c0, cut), (r0, r1, cut, c1)]
            img = np.empty((h, w))
            for r0, r1, c0, c1 in rects:
                img[r0:r1, c0:c1] = rng.random()
            images[i] = img
            labels[i] = len(rects) - 2
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return ImageDataset(images, labels)


def load_digits_dataset(train_size: int = 1297) -> tuple[ImageDataset, ImageDataset]:
    """The scikit-learn 8x8 digits corpus split into train/test stacks."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = bunch.images.astype(np.float64) / 16.0
    labels = bunch.target.astype(np.int64)
    if not 1 <= train_size < images.shape[0]:
        raise ValueError(f"train_size must be in [1, {images.shape[0] - 1}]")
    train = ImageDataset(images[:train_size], labels[:train_size])
    test = ImageDataset(images[train_size:], labels[train_size:])
    return train, test


# -- masks -------------------------------------------------------------------

TRAIN_STREAM = 0
TEST_STREAM = 1


@dataclass(frozen=True)
class MaskSpec:
    """Where and how densely pixels go missing.

    ``stream`` separates independent mask families under one seed (train
    vs. test); checkpoints and configs only ever store (seed, stream).
    """

    missing_rate: float
    seed: int = 0
    stream: int = TRAIN_STREAM

    def __post_init__(self):
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ConfigError(f"missing_rate must lie in [0, 1], got {self.missing_rate}")


def mask_for_index(spec: MaskSpec, index: int, shape) -> np.ndarray:
    """The (H, W) mask of one sample (True = observed).

    Draws come from Philox keyed by (seed, stream) with the sample index in
    the counter, one uniform per pixel in row-major order: the mask depends
    only on (seed, stream, index, H, W), never on batch layout or how many
    other masks were drawn.
    """
    h, w = shape[0], shape[1]
    bg = np.random.Philox(key=np.array([spec.seed, spec.stream], dtype=np.uint64),
                          counter=np.array([0, index, 0, 0], dtype=np.uint64))
    u = np.random.Generator(bg).random(h * w)
    return (u >= spec.missing_rate).reshape(h, w)


def sample_mask(shape, spec: MaskSpec) -> np.ndarray:
    """Observation masks for a stack shape (N, H, W[, C]) or a single (H, W).

    Color channels share one decision per pixel, so the result never has a
    channel axis: (N, H, W) for stacks, (H, W) for a single image.
    """
    if len(shape) == 2:
        return mask_for_index(spec, 0, shape)
    if len(shape) not in (3, 4):
        raise ShapeError(f"mask shape must be (H, W), (N, H, W) or (N, H, W, C), got {tuple(shape)}")
    n, h, w = shape[0], shape[1], shape[2]
    out = np.empty((n, h, w), dtype=bool)
    for i in range(n):
        out[i] = mask_for_index(spec, i, (h, w))
    return out


# -- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = b"PRFLOWCK"
_CKPT_VERSION = 1
_ARRAY_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_ARRAY_TAGS = {np.dtype("f8"): 0, np.dtype("i8"): 1, np.dtype("u1"): 2}


def _pack_arrays(arrays) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for arr in arrays:
        arr = np.asarray(arr)
        key = np.dtype(arr.dtype.str.lstrip("<>=|"))
        if key not in _ARRAY_TAGS:
            raise CheckpointError(f"cannot serialize dtype {arr.dtype}")
        buf.write(struct.pack("<BI", _ARRAY_TAGS[key], arr.ndim))
        buf.write(struct.pack("<" + "Q" * arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=key.newbyteorder("<")).tobytes())
    return buf.getvalue()


def _unpack_arrays(buf: io.BytesIO, what: str) -> list:
    def take(fmt):
        size = struct.calcsize(fmt)
        raw = buf.read(size)
        if len(raw) != size:
            raise CheckpointError(f"truncated {what} section")
        return struct.unpack(fmt, raw)

    (count,) = take("<I")
    arrays = []
    for _ in range(count):
        code, ndim = take("<BI")
        if code not in _ARRAY_CODES:
            raise CheckpointError(f"{what}: unknown array dtype code {code}")
        dims = take("<" + "Q" * ndim) if ndim else ()
        dtype = _ARRAY_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = buf.read(nbytes)
        if len(raw) != nbytes:
            raise CheckpointError(f"truncated {what} section")
        arrays.append(np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="), copy=True))
    return arrays


def _pack_adam(state: AdamStateData) -> bytes:
    return struct.pack("<Q", state.t) + _pack_arrays(state.m) + _pack_arrays(state.v)


def _unpack_adam(payload: bytes, what: str) -> AdamStateData:
    buf = io.BytesIO(payload)
    raw = buf.read(8)
    if len(raw) != 8:
        raise CheckpointError(f"truncated {what} section")
    (t,) = struct.unpack("<Q", raw)
    m = _unpack_arrays(buf, what)
    v = _unpack_arrays(buf, what)
    return AdamStateData(m=m, v=v, t=t)


def save_checkpoint(state: TrainState, path) -> None:
    """Serialize a training snapshot; loading it back is bitwise exact."""
    meta = {
        "config": asdict(state.config),
        "image_shape": list(state.image_shape),
        "round_index": state.round_index,
        "lam": state.lam,
        "learning_rate": state.learning_rate,
        "j2_history": list(map(float, state.j2_history)),
        "mask_seed": state.mask_seed,
        "rng_state": state.rng_state,
    }
    sections = [
        (b"METAJSON", json.dumps(meta, sort_keys=True).encode("utf-8")),
        (b"THETAARR", _pack_arrays(state.theta)),
        (b"PHIARRAY", _pack_arrays(state.phi)),
        (b"ADAMFLOW", _pack_adam(state.adam_flow)),
        (b"ADAMIMPU", _pack_adam(state.adam_imputer)),
        (b"IMPTRAIN", _pack_arrays([state.imputed_train])),
    ]
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(sections)))
        for tag, payload in sections:
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path) -> TrainState:
    """Read a checkpoint file back into a training snapshot."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if blob[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}, expected {_CKPT_MAGIC!r}")
    version, count = struct.unpack("<II", blob[8:16])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    sections = {}
    offset = 16
    for _ in range(count):
        if offset + 16 > len(blob):
            raise CheckpointError(f"{path}: truncated section table")
        tag = blob[offset : offset + 8]
        (length,) = struct.unpack("<Q", blob[offset + 8 : offset + 16])
        offset += 16
        if offset + length > len(blob):
            raise CheckpointError(f"{path}: section {tag!r} runs past end of file")
        sections[tag] = blob[offset : offset + length]
        offset += length
    required = (b"METAJSON", b"THETAARR", b"PHIARRAY", b"ADAMFLOW", b"ADAMIMPU", b"IMPTRAIN")
    for tag in required:
        if tag not in sections:
            raise CheckpointError(f"{path}: missing section {tag!r}")
    try:
        meta = json.loads(sections[b"METAJSON"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata section: {exc}") from exc
    known = {f.name for f in TrainConfig.__dataclass_fields__.values()}
    cfg_dict = meta.get("config", {})
    unknown = set(cfg_dict) - known
    if unknown:
        raise CheckpointError(f"{path}: unknown config keys {sorted(unknown)}")
    config = TrainConfig(**cfg_dict)
    imputed = _unpack_arrays(io.BytesIO(sections[b"IMPTRAIN"]), "IMPTRAIN")
    if len(imputed) != 1:
        raise CheckpointError(f"{path}: IMPTRAIN must hold exactly one array")
    return TrainState(
        config=config,
        image_shape=tuple(meta["image_shape"]),
        round_index=int(meta["round_index"]),
        lam=meta["lam"],
        learning_rate=float(meta["learning_rate"]),
        theta=_unpack_arrays(io.BytesIO(sections[b"THETAARR"]), "THETAARR"),
        phi=_unpack_arrays(io.BytesIO(sections[b"PHIARRAY"]), "PHIARRAY"),
        adam_flow=_unpack_adam(sections[b"ADAMFLOW"], "ADAMFLOW"),
        adam_imputer=_unpack_adam(sections[b"ADAMIMPU"], "ADAMIMPU"),
        rng_state=meta["rng_state"],
        imputed_train=imputed[0],
        j2_history=[float(x) for x in meta["j2_history"]],
        mask_seed=int(meta["mask_seed"]),
    )
