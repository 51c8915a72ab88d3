"""Binary checkpoint container.

Layout (little-endian): magic "DEPA", format version u32, tensor count u32,
then per tensor {name length u32, UTF-8 name, rank u32, dims u64 each, raw
float32 payload}, then a footer {byte length u32, UTF-8 key=value lines}.
The footer carries the hyperparameters in the same key=value syntax the
config files use; loading validates every tensor shape against them.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .corpus import TargetVocabFilter
from .errors import DataError
from .model import Hyper, Model
from .numerics import assert_finite

MAGIC = b"DEPA"
VERSION = 1
FILTER_KEY = "target_filter.keep"


def write_tensor_file(path: Path, tensors: dict[str, np.ndarray], footer: dict[str, str]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    text = "".join(f"{k}={v}\n" for k, v in footer.items()).encode("utf-8")
    chunks.append(struct.pack("<I", len(text)))
    chunks.append(text)
    path.write_bytes(b"".join(chunks))


def read_tensor_file(path: Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = np.array(arr, dtype=np.float32)
    (flen,) = struct.unpack_from("<I", raw, off)
    off += 4
    footer: dict[str, str] = {}
    for line in raw[off : off + flen].decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            footer[k] = v
    return tensors, footer


_HYPER_KEYS = {
    "vocab_size": int, "d_model": int, "n_heads": int, "enc_layers": int,
    "dec_layers": int, "d_ff": int, "max_offset": int, "t_max": int,
    "dropout": float, "use_it": lambda s: s == "true",
    "compress_dim": int, "scaled_it_softmax": lambda s: s == "true",
    "share_embeddings": lambda s: s == "true", "model_kind": str,
}


def _hyper_footer(hyper: Hyper) -> dict[str, str]:
    out = {}
    for key in _HYPER_KEYS:
        v = getattr(hyper, key)
        out[key] = ("true" if v else "false") if isinstance(v, bool) else str(v)
    return out


def vocab_digest(vocab_path: Path) -> str:
    return hashlib.sha256(vocab_path.read_bytes()).hexdigest()[:16]


def save_model(path: Path, model: Model, extra_footer: dict[str, str] | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        assert_finite(p, f"checkpoint tensor {name}")
        tensors[name] = p.data
    tensors[FILTER_KEY] = model.filter.keep.astype(np.float32)
    footer = _hyper_footer(model.hyper)
    if extra_footer:
        footer.update(extra_footer)
    write_tensor_file(path, tensors, footer)


def load_model(path: Path) -> tuple[Model, dict[str, str]]:
    tensors, footer = read_tensor_file(path)
    missing = [k for k in _HYPER_KEYS if k not in footer]
    if missing:
        raise DataError(f"{path}: checkpoint footer missing keys {missing}")
    hyper = Hyper(**{k: conv(footer[k]) for k, conv in _HYPER_KEYS.items()})
    if FILTER_KEY not in tensors:
        raise DataError(f"{path}: checkpoint has no target filter")
    keep = tensors.pop(FILTER_KEY).astype(bool)
    filt = TargetVocabFilter(keep=keep, kept_ids=np.flatnonzero(keep))
    model = Model(hyper, filt, seed=0)
    expected = set(model.params)
    got = set(tensors)
    if expected != got:
        raise DataError(
            f"{path}: tensor set mismatch; missing {sorted(expected - got)}, "
            f"unexpected {sorted(got - expected)}"
        )
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise DataError(
                f"{path}: tensor {name} has shape {arr.shape}, "
                f"hyperparameters imply {model.params[name].shape}"
            )
        model.params[name].data = arr
    return model, footer
