"""Binary trial files, checkpoint files and the results CSV."""

from __future__ import annotations

import csv
import io as _io
import math
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .synthdata import TrialBatch
from .trainer import Checkpoint

EPOCH_MAGIC = b"EEGC"
EPOCH_VERSION = 1
# magic, version u32, n-trials u64, channels u32, samples u32, n-classes u16, n-nuisance u16
_EPOCH_HEADER = struct.Struct("<4sIQIIHH")
_TRIAL_LABELS = struct.Struct("<BH")

CKPT_MAGIC = b"CNSR"
CKPT_VERSION = 1

RESULT_FIELDS = ("run_id", "seed", "fold", "censor_mode", "censor_method", "lambda", "projection",
                 "eval_point", "epochs_trained", "train_ba", "val_ba", "test_ba", "overfit_ratio",
                 "probe_ba", "status")


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# epoch files


def epoch_file_size(n_trials: int, channels: int, samples: int) -> int:
    return _EPOCH_HEADER.size + n_trials * (_TRIAL_LABELS.size + 4 * channels * samples)


def write_epoch_file(path, batch: TrialBatch):
    """Write ``batch`` as an epoch file; vector trials are stored with one channel."""
    x = batch.x
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3:
        raise ValueError(f"trials must be vectors or (channels, samples) arrays, got {batch.x.shape}")
    n, channels, samples = x.shape
    if n and (batch.y.max() > 255 or batch.s.max() > 65534):
        raise ValueError("labels exceed the u8 / u16 field widths")
    if batch.n_classes > 256 or batch.n_nuisance > 65535:
        raise ValueError("label counts exceed the u16 header fields")
    if n and (batch.y.min() < 0 or batch.s.min() < 0):
        raise ValueError("labels must be non-negative")
    rec = np.dtype([("y", "<u1"), ("s", "<u2"), ("x", "<f4", (channels * samples,))])
    body = np.empty(n, dtype=rec)
    body["y"] = batch.y
    body["s"] = batch.s
    body["x"] = x.reshape(n, channels * samples)
    header = _EPOCH_HEADER.pack(EPOCH_MAGIC, EPOCH_VERSION, n, channels, samples,
                                int(batch.n_classes), int(batch.n_nuisance))
    with open(path, "wb") as f:
        f.write(header)
        f.write(body.tobytes())


def read_epoch_file(path) -> TrialBatch:
    data = Path(path).read_bytes()
    if len(data) < _EPOCH_HEADER.size:
        raise FormatError(f"{path}: header truncated at offset {len(data)}, "
                          f"need {_EPOCH_HEADER.size} bytes")
    magic, version, n, channels, samples, n_classes, n_nuisance = _EPOCH_HEADER.unpack_from(data)
    if magic != EPOCH_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {EPOCH_MAGIC!r}")
    if version != EPOCH_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = epoch_file_size(n, channels, samples)
    if len(data) != expected:
        raise FormatError(f"{path}: payload length mismatch, expected {expected} bytes "
                          f"for {n} trials, found {len(data)}")
    rec = np.dtype([("y", "<u1"), ("s", "<u2"), ("x", "<f4", (channels * samples,))])
    body = np.frombuffer(data, dtype=rec, count=n, offset=_EPOCH_HEADER.size)
    y = body["y"].astype(np.int64)
    s = body["s"].astype(np.int64)
    if n and (y.max() >= n_classes or s.max() >= n_nuisance):
        bad = int(np.flatnonzero((y >= n_classes) | (s >= n_nuisance))[0])
        raise FormatError(f"{path}: trial {bad} at offset "
                          f"{_EPOCH_HEADER.size + bad * rec.itemsize} has labels out of range")
    x = body["x"].astype(np.float64).reshape(n, channels, samples)
    if channels == 1:
        x = x[:, 0, :]
    return TrialBatch(x, y, s, n_classes=n_classes, n_nuisance=n_nuisance)


# --------------------------------------------------------------------------- #
# checkpoint files


def write_checkpoint(path, ckpt: Checkpoint):
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at offset 0, expected {CKPT_MAGIC!r}")
    if len(data) < 8:
        raise FormatError(f"{path}: header truncated at offset {len(data)}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    pos = 8
    tensors = {}

    def need(k):
        if pos + k > len(data):
            raise FormatError(f"{path}: record truncated at offset {pos}, "
                              f"need {k} more bytes, {len(data) - pos} left")

    while pos < len(data):
        need(2)
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(nlen + 1)
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = data[pos]
        pos += 1
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = math.prod(shape)
        need(8 * count)
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return Checkpoint(tensors)


# --------------------------------------------------------------------------- #
# results CSV


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else repr(v))
    return str(v)


def result_row(result) -> dict:
    d = result.as_dict() if hasattr(result, "as_dict") else dict(result)
    if "lam" in d:
        d["lambda"] = d.pop("lam")
    return {k: d[k] for k in RESULT_FIELDS}


class ResultSink:
    """Append-only CSV writer; the header is written when the file is created."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(RESULT_FIELDS)

    def append(self, result):
        row = result_row(result)
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow([_fmt(row[k]) for k in RESULT_FIELDS])
            f.flush()
            os.fsync(f.fileno())


def format_results(results: Iterable) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in results:
        row = result_row(r)
        w.writerow([_fmt(row[k]) for k in RESULT_FIELDS])
    return buf.getvalue()


_INT_FIELDS = {"run_id", "seed", "fold", "epochs_trained"}
_FLOAT_FIELDS = {"lambda", "train_ba", "val_ba", "test_ba", "overfit_ratio", "probe_ba"}


def read_results(path) -> list[dict]:
    """Rows of a results CSV with numeric fields parsed; ``lambda`` is exposed as ``lam``."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for line_no, raw in enumerate(reader, start=2):
            try:
                row = {k: (int(v) if k in _INT_FIELDS else float(v) if k in _FLOAT_FIELDS else v)
                       for k, v in raw.items()}
            except ValueError as e:
                raise FormatError(f"{path}: line {line_no}: {e}") from None
            row["lam"] = row.pop("lambda")
            rows.append(row)
    return rows
