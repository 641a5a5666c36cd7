"""File formats: the portable parameter container, PGM images and metrics CSV.

Container layout (all integers little-endian)::

    magic      8 bytes  b"DFALIGN1"
    version    u32
    kind       u32      0 model, 1 adapter, 2 detector, 3 dataset
    T          u32      schedule length (0 when absent)
    beta_start f64
    beta_end   f64
    meta_len   u32, then meta_len bytes of UTF-8 JSON
    count      u32
    per entry: u16 name length, name, u8 ndim, ndim x u32 extents,
               prod(extents) x f64 values
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .diffusion import IMAGE_SIDE, DenoiserParams, NoiseSchedule, make_schedule
from .errors import ContractError
from .lora import AdapterSet, LoraBlock
from .rewards import ConceptDetector, ConceptRemovalReward

MAGIC = b"DFALIGN1"
FORMAT_VERSION = 1
KIND_MODEL, KIND_ADAPTER, KIND_DETECTOR, KIND_DATASET = 0, 1, 2, 3
_KIND_NAMES = {KIND_MODEL: "model", KIND_ADAPTER: "adapter", KIND_DETECTOR: "detector",
               KIND_DATASET: "dataset"}


class FormatError(ContractError):
    pass


@dataclass
class Container:
    kind: int
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    T: int = 0
    beta_start: float = 0.0
    beta_end: float = 0.0


def write_container(path, c: Container) -> None:
    meta = json.dumps(c.meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, c.kind, c.T),
             struct.pack("<dd", c.beta_start, c.beta_end),
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(c.arrays))]
    for name, arr in c.arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path) -> Container:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a parameter file (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        version, kind, T = take("<III")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        beta_start, beta_end = take("<dd")
        (meta_len,) = take("<I")
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (n,) = take("<H")
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = take("<B")
            shape = take(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            arrays[name] = arr.reshape(shape)
    except FormatError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt or truncated file ({exc})") from None
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return Container(kind, arrays, meta, T, beta_start, beta_end)


def _expect(c: Container, kind: int, path) -> None:
    if c.kind != kind:
        raise FormatError(f"{path}: expected a {_KIND_NAMES[kind]} file, found {_KIND_NAMES.get(c.kind, c.kind)}")


def save_model(path, params: DenoiserParams, schedule: NoiseSchedule) -> None:
    meta = {"data_dim": params.data_dim, "n_classes": params.n_classes, "hidden": params.hidden,
            "time_dim": params.time_dim, "class_dim": params.class_dim,
            "layers": list(params.layers)}
    arrays = {k: v.data for k, v in params.tensors.items()}
    write_container(path, Container(KIND_MODEL, arrays, meta, schedule.T,
                                    schedule.beta_start, schedule.beta_end))


def load_model(path) -> tuple[DenoiserParams, NoiseSchedule]:
    c = read_container(path)
    _expect(c, KIND_MODEL, path)
    m = c.meta
    tensors = {k: Tensor(v) for k, v in c.arrays.items()}
    params = DenoiserParams(tensors, m["data_dim"], m["n_classes"], m["hidden"], m["time_dim"],
                            m["class_dim"], tuple(m["layers"]), c.T)
    return params, make_schedule(c.T, c.beta_start, c.beta_end)


def save_adapters(path, adapters: AdapterSet, schedule: NoiseSchedule | None = None) -> None:
    meta = {"hosts": list(adapters.hosts), "rank": adapters.rank,
            "window": list(adapters.window) if adapters.window else None}
    T, b0, b1 = (schedule.T, schedule.beta_start, schedule.beta_end) if schedule else (0, 0.0, 0.0)
    write_container(path, Container(KIND_ADAPTER, adapters.named_arrays(), meta, T, b0, b1))


def load_adapters(path) -> AdapterSet:
    c = read_container(path)
    _expect(c, KIND_ADAPTER, path)
    blocks = {h: LoraBlock(h, Tensor(c.arrays[f"{h}.down"]), Tensor(c.arrays[f"{h}.up"]))
              for h in c.meta["hosts"]}
    window = tuple(c.meta["window"]) if c.meta.get("window") else None
    return AdapterSet(blocks, window)


def save_detector(path, reward: ConceptRemovalReward) -> None:
    det = reward.detector
    write_container(path, Container(KIND_DETECTOR, {"weight": det.weight, "bias": np.array([det.bias])},
                                    {"concept": "stripes"}))


def load_detector(path) -> ConceptRemovalReward:
    c = read_container(path)
    _expect(c, KIND_DETECTOR, path)
    return ConceptRemovalReward(ConceptDetector(c.arrays["weight"], float(c.arrays["bias"][0])))


def save_dataset(path, dataset) -> None:
    arrays = {"images": dataset.images, "labels": dataset.labels.astype(np.float64),
              "stripes": dataset.stripes.astype(np.float64)}
    write_container(path, Container(KIND_DATASET, arrays, {"side": IMAGE_SIDE}))


def load_dataset(path):
    from .data import ShapesDataset

    c = read_container(path)
    _expect(c, KIND_DATASET, path)
    return ShapesDataset(c.arrays["images"], c.arrays["labels"].astype(np.int64),
                         c.arrays["stripes"] > 0.5)


def image_bytes(x0, side: int = IMAGE_SIDE) -> np.ndarray:
    """8-bit pixels: clamp to [-1, 1], then ``floor(255 * (v + 1) / 2 + 0.5)``."""
    v = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    if v.size != side * side:
        raise ContractError(f"image must have {side * side} values, got {v.size}")
    v = np.clip(v.reshape(side, side), -1.0, 1.0)
    return np.floor(255.0 * (v + 1.0) / 2.0 + 0.5).astype(np.uint8)


def export_image(x0, path, side: int = IMAGE_SIDE) -> Path:
    """Write a binary PGM (P5) image."""
    pix = image_bytes(x0, side)
    path = Path(path)
    path.write_bytes(f"P5\n{side} {side}\n255\n".encode("ascii") + pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    header = buf.split(b"\n", 3)
    if header[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = map(int, header[1].split())
    return np.frombuffer(header[3], dtype=np.uint8).reshape(h, w)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics.COLUMNS)
        for row in metrics.rows():
            w.writerow([_fmt(v) for v in row])


def read_metrics_csv(path):
    from .finetune import RunMetrics

    m = RunMetrics()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RunMetrics.COLUMNS:
            raise FormatError(f"{path}: unexpected columns {reader.fieldnames}")
        for r in reader:
            m.append(int(r["step"]), float(r["mean_reward"]), float(r["loss"]), int(r["K_drawn"]),
                     float(r["diversity"]) if r["diversity"] else None, int(r["saved_values"]),
                     float(r["wall_ms"]))
    return m


def write_table_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
