"""Self-describing binary checkpoints.

Layout::

    DFFW-CHECKPOINT\\n
    key=value lines (format_version first, then kind, dims, seeds, ...)
    END\\n
    records: <u2 name length> <name utf-8> <u8 count> <count x f8 little-endian>

Records appear in the fixed order of ``ARRAY_ORDER``; bank-2 records are
absent for the single-tensor model and the two ``norm.*`` records are
written with zero length when no normalizer is attached.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import NormStats
from .model import FactorBank, LayerDims, ModelParams
from .training import TrainConfig

MAGIC = b"DFFW-CHECKPOINT\n"
END = b"END\n"
FORMAT_VERSION = 1
ARRAY_ORDER = (
    "bank1.w_v", "bank1.w_h", "bank1.w_hist", "bank1.w_l",
    "bank2.w_v", "bank2.w_h", "bank2.w_hist", "bank2.w_l",
    "a", "b", "c", "sigma", "sigma_hist", "norm.mean", "norm.std",
)
_TRAIN_KEYS = ("alpha", "rho", "gamma", "cd_steps", "epochs", "seed", "positive_hidden")


class CheckpointError(ValueError):
    code = "checkpoint_error"


class CheckpointFormatError(CheckpointError):
    code = "bad_format"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class TruncatedArrayError(CheckpointError):
    code = "truncated_array"

    def __init__(self, name: str):
        super().__init__(f"truncated array {name}")
        self.name = name


class DimsMismatchError(CheckpointError):
    code = "dims_mismatch"


@dataclass
class ModelCheckpoint:
    params: ModelParams
    norm: NormStats | None = None
    train: TrainConfig | None = None
    init_seed: int | None = None
    fold: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.params.kind


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _header(ckpt: ModelCheckpoint) -> list[tuple[str, str]]:
    d = ckpt.params.dims
    items = [
        ("format_version", str(FORMAT_VERSION)),
        ("kind", ckpt.kind),
        ("dims", ",".join(str(x) for x in (d.n_v, d.n_h, d.n_vlt, d.n_l, d.n_f1, d.n_f2))),
        ("init_seed", "none" if ckpt.init_seed is None else str(ckpt.init_seed)),
        ("fold", "none" if ckpt.fold is None else str(ckpt.fold)),
        ("norm.n_present", "none" if ckpt.norm is None else str(ckpt.norm.n_present)),
    ]
    if ckpt.train is not None:
        items += [(f"train.{k}", _fmt(getattr(ckpt.train, k))) for k in _TRAIN_KEYS]
    items += [(k, str(v)) for k, v in ckpt.extra.items()]
    for k, v in items:
        if "\n" in k + v or "=" in k:
            raise CheckpointFormatError(f"header entry {k!r} cannot be serialized")
    return items


def _arrays(ckpt: ModelCheckpoint):
    p = ckpt.params
    named = dict(p.groups())
    named["sigma"], named["sigma_hist"] = p.sigma, p.sigma_hist
    if ckpt.norm is not None:
        named["norm.mean"], named["norm.std"] = ckpt.norm.mean, ckpt.norm.std
    else:
        named["norm.mean"] = named["norm.std"] = np.zeros(0)
    return [(name, named[name]) for name in ARRAY_ORDER if name in named]


def dumps(ckpt: ModelCheckpoint) -> bytes:
    out = bytearray(MAGIC)
    for k, v in _header(ckpt):
        out += f"{k}={v}\n".encode("utf-8")
    out += END
    for name, arr in _arrays(ckpt):
        raw = name.encode("utf-8")
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<Q", flat.size) + flat.tobytes()
    return bytes(out)


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def _parse_header(data: bytes):
    if not data.startswith(MAGIC):
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    end = data.find(b"\n" + END, len(MAGIC) - 1)
    if end < 0:
        raise CheckpointFormatError("header END marker missing")
    text = data[len(MAGIC):end + 1].decode("utf-8")
    header = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed header line {line!r}")
        header[key] = value
    return header, end + 1 + len(END)


def _opt_int(value: str):
    return None if value == "none" else int(value)


def loads(data: bytes) -> ModelCheckpoint:
    header, pos = _parse_header(data)
    version = header.get("format_version")
    if version != str(FORMAT_VERSION):
        raise VersionMismatchError(f"unsupported format_version {version} (expected {FORMAT_VERSION})")
    try:
        dims = LayerDims(*(int(x) for x in header["dims"].split(",")))
        kind = header["kind"]
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"bad dims/kind header: {exc}") from exc
    if kind != dims.kind:
        raise DimsMismatchError(f"kind {kind} disagrees with dims {header['dims']}")

    expected = {name: int(np.prod(dims.group_shape(name))) for name in ARRAY_ORDER[:11]
                if name.startswith("bank1") or name in ("a", "b", "c") or dims.n_f2 > 0}
    expected["sigma"], expected["sigma_hist"] = dims.n_v, dims.n_vlt
    arrays = {}
    for name in ARRAY_ORDER:
        if name not in expected and not name.startswith("norm."):
            continue
        if pos + 2 > len(data):
            raise TruncatedArrayError(name)
        (n_name,) = struct.unpack_from("<H", data, pos)
        got = data[pos + 2:pos + 2 + n_name].decode("utf-8", errors="replace")
        if got != name:
            if pos + 2 + n_name > len(data):
                raise TruncatedArrayError(name)
            raise CheckpointFormatError(f"expected array {name}, found {got!r}")
        pos += 2 + n_name
        if pos + 8 > len(data):
            raise TruncatedArrayError(name)
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if name in expected and count != expected[name]:
            raise DimsMismatchError(f"array {name} has {count} values, dims require {expected[name]}")
        if pos + 8 * count > len(data):
            raise TruncatedArrayError(name)
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(float)
        pos += 8 * count
    if pos != len(data):
        raise CheckpointFormatError(f"{len(data) - pos} trailing bytes after last array")

    def bank(k):
        return FactorBank(*(arrays[f"bank{k}.w_{layer}"].reshape(dims.group_shape(f"bank{k}.w_{layer}"))
                            for layer in ("v", "h", "hist", "l")))

    params = ModelParams(dims, bank(1), bank(2) if dims.n_f2 > 0 else None,
                         arrays["a"], arrays["b"], arrays["c"], arrays["sigma"], arrays["sigma_hist"])

    norm = None
    n_present = _opt_int(header.get("norm.n_present", "none"))
    if n_present is not None:
        mean, std = arrays["norm.mean"], arrays["norm.std"]
        if mean.size != dims.n_v + dims.n_vlt or std.size != mean.size:
            raise DimsMismatchError(
                f"normalizer has {mean.size}/{std.size} features, dims require {dims.n_v + dims.n_vlt}")
        norm = NormStats(mean, std, n_present)

    train = None
    if "train.alpha" in header:
        kw = {}
        for k in _TRAIN_KEYS:
            raw = header[f"train.{k}"]
            kw[k] = raw if k == "positive_hidden" else (float(raw) if k in ("alpha", "rho", "gamma") else int(raw))
        train = TrainConfig(**kw)

    known = {"format_version", "kind", "dims", "init_seed", "fold", "norm.n_present"}
    known |= {f"train.{k}" for k in _TRAIN_KEYS}
    extra = {k: v for k, v in header.items() if k not in known}
    return ModelCheckpoint(params, norm, train, _opt_int(header.get("init_seed", "none")),
                           _opt_int(header.get("fold", "none")), extra)


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
