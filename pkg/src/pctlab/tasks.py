"""Seeded synthetic task generators, FFT-MNIST preprocessing and dataset I/O.

Every generator is a pure function of its parameters and ``seed``; ``seed`` may
be an int or a sequence of ints (fed to :func:`numpy.random.default_rng`), so
per-sample seeds can be derived as ``(run_seed, stream, index)``.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .stack import TaskIO


@dataclass
class TaskSample:
    inputs: np.ndarray          # int token ids (N,) or complex features (N, C)
    target: np.ndarray          # (N,) class ids, () class id, or (K,) bits
    loss_mask: np.ndarray       # bool, same leading shape as the per-position target
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.loss_mask.size == 0 or not self.loss_mask.any():
            raise ValueError("loss_mask must select at least one position")


# -----------------------------------------------------------------------------
# copy
# -----------------------------------------------------------------------------


def gen_copy(K: int = 10, delay: int = 100, V: int = 16, seed=0) -> TaskSample:
    """``K`` tokens from ``1..V-1``, ``delay`` blanks (0), ``K`` query slots (``V``).

    Targets are the source tokens at the last ``K`` positions.
    """
    if K < 1 or delay < 0 or V < 2:
        raise ValueError("copy needs K >= 1, delay >= 0, V >= 2")
    rng = np.random.default_rng(seed)
    src = rng.integers(1, V, size=K)
    tokens = np.concatenate([src, np.zeros(delay, dtype=np.int64), np.full(K, V)])
    n = 2 * K + delay
    target = np.zeros(n, dtype=np.int64)
    target[-K:] = src
    mask = np.zeros(n, dtype=bool)
    mask[-K:] = True
    return TaskSample(tokens.astype(np.int64), target, mask, {"K": K, "delay": delay, "V": V})


# -----------------------------------------------------------------------------
# needle in a haystack
# -----------------------------------------------------------------------------


def gen_niah(L: int = 64, vocab: int = 64, depth_ratio: float = 0.5, seed=0) -> TaskSample:
    """Key/value needle at ``floor(depth_ratio*L)``; the last token repeats the key."""
    if not 0.0 < depth_ratio < 1.0:
        raise ValueError("depth_ratio must lie in (0, 1)")
    if L < 8 or vocab < 3:
        raise ValueError("niah needs L >= 8 and vocab >= 3")
    rng = np.random.default_rng(seed)
    pos = int(math.floor(depth_ratio * L))
    if pos + 1 >= L - 1:
        raise ValueError("needle would overlap the query slot")
    key = int(rng.integers(vocab))
    value = int(rng.integers(vocab - 1))
    value += value >= key  # uniform over tokens != key
    hay = rng.integers(vocab - 1, size=L)
    hay = hay + (hay >= key)  # key appears only at the needle and the query
    hay[pos], hay[pos + 1], hay[L - 1] = key, value, key
    target = np.zeros(L, dtype=np.int64)
    target[L - 1] = value
    mask = np.zeros(L, dtype=bool)
    mask[L - 1] = True
    return TaskSample(hay.astype(np.int64), target, mask,
                      {"L": L, "vocab": vocab, "depth_ratio": depth_ratio, "needle_pos": pos})


# -----------------------------------------------------------------------------
# ListOps
# -----------------------------------------------------------------------------

LISTOPS_OPS = ("MAX", "MIN", "MED", "SM")
LISTOPS_PAD = 0
LISTOPS_CLOSE = 15
LISTOPS_VOCAB = 16
_OP_TOKEN = {op: 11 + i for i, op in enumerate(LISTOPS_OPS)}
_TOKEN_OP = {v: k for k, v in _OP_TOKEN.items()}


def _apply_op(op: str, args: list[int]) -> int:
    if op == "MAX":
        return max(args)
    if op == "MIN":
        return min(args)
    if op == "MED":
        return sorted(args)[(len(args) - 1) // 2]
    if op == "SM":
        return sum(args) % 10
    raise ValueError(f"unknown op {op!r}")


def _gen_tree(rng, depth: int, max_depth: int, max_args: int, p_nest: float):
    op = LISTOPS_OPS[rng.integers(len(LISTOPS_OPS))]
    n = int(rng.integers(2, max_args + 1))
    args = []
    for _ in range(n):
        if depth < max_depth and rng.random() < p_nest:
            args.append(_gen_tree(rng, depth + 1, max_depth, max_args, p_nest))
        else:
            args.append(int(rng.integers(10)))
    return (op, args)


def _tree_value(node) -> int:
    if isinstance(node, int):
        return node
    op, args = node
    return _apply_op(op, [_tree_value(a) for a in args])


def _tree_tokens(node, out: list[int]) -> None:
    if isinstance(node, int):
        out.append(node + 1)
        return
    op, args = node
    out.append(_OP_TOKEN[op])
    for a in args:
        _tree_tokens(a, out)
    out.append(LISTOPS_CLOSE)


def listops_tokenize(expr: str) -> np.ndarray:
    """``"[MAX 2 [MIN 4 9] 1]"`` to token ids (unpadded)."""
    out = []
    for w in expr.replace("]", " ] ").split():
        if w.startswith("["):
            if w[1:] not in _OP_TOKEN:
                raise ValueError(f"unknown ListOps operator {w[1:]!r}")
            out.append(_OP_TOKEN[w[1:]])
        elif w == "]":
            out.append(LISTOPS_CLOSE)
        elif w.isdigit() and len(w) == 1:
            out.append(int(w) + 1)
        else:
            raise ValueError(f"bad ListOps token {w!r}")
    return np.array(out, dtype=np.int64)


def listops_evaluate(tokens) -> int:
    """Recursive-descent evaluator over token ids; trailing padding is ignored."""
    toks = [int(t) for t in tokens if int(t) != LISTOPS_PAD]

    def parse(i: int) -> tuple[int, int]:
        t = toks[i]
        if 1 <= t <= 10:
            return t - 1, i + 1
        if t not in _TOKEN_OP:
            raise ValueError(f"unexpected token {t} at {i}")
        i += 1
        args = []
        while toks[i] != LISTOPS_CLOSE:
            v, i = parse(i)
            args.append(v)
        if not args:
            raise ValueError("operator without arguments")
        return _apply_op(_TOKEN_OP[t], args), i + 1

    value, end = parse(0)
    if end != len(toks):
        raise ValueError("trailing tokens after expression")
    return value


def gen_listops(max_depth: int = 2, max_args: int = 3, max_len: int = 32, seed=0,
                p_nest: float = 0.35) -> TaskSample:
    """Nested prefix expression padded to ``max_len``; label in ``0..9``."""
    if max_depth < 1 or max_args < 2:
        raise ValueError("listops needs max_depth >= 1 and max_args >= 2")
    if max_len < 4:
        raise ValueError("max_len too small for any expression")
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        tree = _gen_tree(rng, 1, max_depth, max_args, p_nest)
        toks: list[int] = []
        _tree_tokens(tree, toks)
        if len(toks) <= max_len:
            break
    else:
        raise RuntimeError("could not fit an expression into max_len")
    tokens = np.full(max_len, LISTOPS_PAD, dtype=np.int64)
    tokens[:len(toks)] = toks
    return TaskSample(tokens, np.array(_tree_value(tree), dtype=np.int64), np.ones(1, dtype=bool),
                      {"max_depth": max_depth, "max_args": max_args, "length": len(toks)})


# -----------------------------------------------------------------------------
# phase memory
# -----------------------------------------------------------------------------


def phase_bin(theta, bins: int) -> np.ndarray:
    theta = np.mod(np.asarray(theta, dtype=float), 2 * np.pi)
    return np.minimum((theta * bins / (2 * np.pi)).astype(np.int64), bins - 1)


def gen_phase_memory(K: int = 8, delay: int = 30, bins: int = 16, seed=0) -> TaskSample:
    """Channel 0 carries ``exp(i theta_k)`` at the sources; channel 1 flags recall slots."""
    if K < 1 or bins < 2 or delay < 0:
        raise ValueError("phase memory needs K >= 1, bins >= 2, delay >= 0")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * np.pi, size=K)
    n = 2 * K + delay
    x = np.zeros((n, 2), dtype=np.complex128)
    x[:K, 0] = np.exp(1j * theta)
    x[-K:, 1] = 1.0
    target = np.zeros(n, dtype=np.int64)
    target[-K:] = phase_bin(theta, bins)
    mask = np.zeros(n, dtype=bool)
    mask[-K:] = True
    return TaskSample(x, target, mask, {"K": K, "delay": delay, "bins": bins, "theta": theta})


# -----------------------------------------------------------------------------
# multi-pitch
# -----------------------------------------------------------------------------


def pitch_frequencies(K: int) -> np.ndarray:
    return 2 * np.pi * (np.arange(K) + 1) / (2 * K)


def gen_multipitch(K: int = 16, n_active: int = 3, n_samples: int = 256, snr_db: float | None = 10.0,
                   seed=0) -> TaskSample:
    """Sum of ``n_active`` unit complex tones on a fixed grid plus complex Gaussian noise.

    ``snr_db=None`` gives a noiseless signal. Target is the K-bit activity mask.
    """
    if not 1 <= n_active <= K:
        raise ValueError(f"n_active must lie in [1, {K}]")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    active = np.sort(rng.choice(K, size=n_active, replace=False))
    phases = rng.uniform(0, 2 * np.pi, size=n_active)
    t = np.arange(n_samples)
    w = pitch_frequencies(K)[active]
    x = np.exp(1j * (np.outer(t, w) + phases)).sum(axis=1)
    if snr_db is not None:
        sigma2 = n_active / 10 ** (snr_db / 10)
        x = x + np.sqrt(sigma2 / 2) * (rng.normal(size=n_samples) + 1j * rng.normal(size=n_samples))
    target = np.zeros(K, dtype=np.int64)
    target[active] = 1
    return TaskSample(x[:, None], target, np.ones(K, dtype=bool),
                      {"K": K, "n_active": n_active, "snr_db": snr_db, "active": active})


def multipitch_dft_oracle(x: np.ndarray, K: int, threshold: float = 0.5) -> np.ndarray:
    """Activity mask from the DFT magnitude at each grid frequency (normalised by length)."""
    x = np.asarray(x).reshape(-1)
    t = np.arange(len(x))
    amp = np.abs(np.exp(-1j * np.outer(pitch_frequencies(K), t)) @ x) / len(x)
    return (amp > threshold).astype(np.int64)


# -----------------------------------------------------------------------------
# FFT-MNIST
# -----------------------------------------------------------------------------


def bilinear_resize(img: np.ndarray, t: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of a 2-D array to ``t x t``."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")

    def coords(n_in: int):
        src = (np.arange(t) + 0.5) * n_in / t - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = coords(img.shape[0])
    c0, c1, fc = coords(img.shape[1])
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def fft_mnist_prepare(image, t: int = 16, normalize: bool = False) -> np.ndarray:
    """28x28 image to ``(t*t, 1)`` complex tokens: resize, 2-D FFT, row-major flatten.

    ``normalize`` divides by ``t`` (unitary scaling) and maps 0..255 pixels to [0, 1].
    """
    img = np.asarray(image, dtype=float)
    if img.shape != (28, 28):
        raise ValueError(f"expected a 28x28 image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite pixels")
    if t not in (8, 16):
        raise ValueError("t must be 8 or 16")
    small = bilinear_resize(img / 255.0 if normalize else img, t)
    f = np.fft.fft2(small)
    if normalize:
        f = f / t
    return f.reshape(t * t, 1)


_IDX_DTYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed)."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError("not an IDX file (bad magic)")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"unknown IDX dtype code 0x{code:02x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    dt = _IDX_DTYPES[code]
    body = raw[4 + 4 * ndim:]
    count = int(np.prod(dims)) if dims else 1
    if len(body) != count * dt.itemsize:
        raise ValueError(f"IDX payload size {len(body)} does not match dims {dims}")
    return np.frombuffer(body, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def write_idx(path, arr: np.ndarray, compress: bool = False) -> None:
    arr = np.asarray(arr)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}.get(arr.dtype)
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX code")
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    data = head + arr.astype(_IDX_DTYPES[code]).tobytes()
    Path(path).write_bytes(gzip.compress(data, mtime=0) if compress else data)


def load_mnist(data_dir, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images ``(n, 28, 28)`` uint8 and labels ``(n,)`` from the standard IDX files."""
    prefix = {"train": "train", "test": "t10k"}[split]
    d = Path(data_dir)
    found = {}
    for kind, stem in (("images", f"{prefix}-images-idx3-ubyte"), ("labels", f"{prefix}-labels-idx1-ubyte")):
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            if (d / name).exists():
                found[kind] = d / name
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {d}; download MNIST manually (see README)")
    return read_idx(found["images"]), read_idx(found["labels"]).astype(np.int64)


def gen_fft_mnist(data_dir: str = "", t: int = 16, split: str = "train", seed=0) -> TaskSample:
    images, labels = _mnist_cache(data_dir, split)
    i = int(np.random.default_rng(seed).integers(len(labels)))
    return TaskSample(fft_mnist_prepare(images[i], t, normalize=True), np.array(labels[i]),
                      np.ones(1, dtype=bool), {"t": t, "index": i})


_MNIST: dict = {}


def _mnist_cache(data_dir: str, split: str):
    key = (str(data_dir), split)
    if key not in _MNIST:
        _MNIST[key] = load_mnist(data_dir, split)
    return _MNIST[key]


# -----------------------------------------------------------------------------
# task registry, batching and metrics
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskDef:
    name: str
    generator: Callable[..., TaskSample]
    defaults: dict
    metric: str
    io: Callable[[dict], TaskIO]
    seq_len: Callable[[dict], int]
    chance: Callable[[dict], float]


TASKS: dict[str, TaskDef] = {
    "copy": TaskDef(
        "copy", gen_copy, {"K": 10, "delay": 100, "V": 16}, "copy_acc",
        lambda p: TaskIO("tokens", vocab=p["V"] + 1, n_classes=p["V"], readout="token"),
        lambda p: 2 * p["K"] + p["delay"], lambda p: 1.0 / (p["V"] - 1)),
    "niah": TaskDef(
        "niah", gen_niah, {"L": 64, "vocab": 64, "depth_ratio": 0.5}, "needle_acc",
        lambda p: TaskIO("tokens", vocab=p["vocab"], n_classes=p["vocab"], readout="token"),
        lambda p: p["L"], lambda p: 1.0 / p["vocab"]),
    "listops": TaskDef(
        "listops", gen_listops, {"max_depth": 2, "max_args": 3, "max_len": 32}, "listops_acc",
        lambda p: TaskIO("tokens", vocab=LISTOPS_VOCAB, n_classes=10, readout="pool"),
        lambda p: p["max_len"], lambda p: 0.1),
    "phase_memory": TaskDef(
        "phase_memory", gen_phase_memory, {"K": 8, "delay": 30, "bins": 16}, "phase_acc",
        lambda p: TaskIO("complex", channels=2, n_classes=p["bins"], readout="token"),
        lambda p: 2 * p["K"] + p["delay"], lambda p: 1.0 / p["bins"]),
    "multipitch": TaskDef(
        "multipitch", gen_multipitch, {"K": 16, "n_active": 3, "n_samples": 256, "snr_db": 10.0},
        "multipitch_per_label_acc",
        lambda p: TaskIO("complex", channels=1, n_classes=p["K"], readout="pool", loss="bce"),
        lambda p: p["n_samples"], lambda p: (p["K"] - p["n_active"]) / p["K"]),
    "fft_mnist": TaskDef(
        "fft_mnist", gen_fft_mnist, {"data_dir": "", "t": 16}, "mnist_acc",
        lambda p: TaskIO("complex", channels=1, n_classes=10, readout="pool"),
        lambda p: p["t"] ** 2, lambda p: 0.1),
}
TASK_NAMES = tuple(TASKS)


def get_task(name: str) -> TaskDef:
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    return TASKS[name]


def resolve_params(name: str, params: dict | None = None) -> dict:
    task = get_task(name)
    params = dict(params or {})
    unknown = set(params) - set(task.defaults)
    if unknown:
        raise ValueError(f"unknown parameters for task {name!r}: {sorted(unknown)}")
    return {**task.defaults, **params}


def sample(name: str, params: dict, seed) -> TaskSample:
    return get_task(name).generator(**resolve_params(name, params), seed=seed)


@dataclass
class Batch:
    inputs: np.ndarray
    target: np.ndarray
    loss_mask: np.ndarray


def make_batch(name: str, params: dict, seed: int, stream: int, start: int, n: int) -> Batch:
    """Samples ``start .. start+n-1`` of the given stream; sample ``i`` uses seed ``(seed, stream, i)``."""
    items = [sample(name, params, (seed, stream, i)) for i in range(start, start + n)]
    return Batch(np.stack([s.inputs for s in items]), np.stack([s.target for s in items]),
                 np.stack([s.loss_mask for s in items]))


def compute_metric(logits: np.ndarray, target: np.ndarray, mask: np.ndarray, loss: str = "ce") -> float:
    """Accuracy over masked positions (argmax for ce, per-label sign for bce)."""
    if loss == "bce":
        pred = (logits > 0).astype(np.int64)
        hit = pred == target
        return float(hit[mask].mean())
    pred = logits.argmax(axis=-1)
    if target.ndim == pred.ndim and mask.shape != pred.shape:
        return float((pred == target).mean())
    return float((pred == target)[mask].mean())


def monte_carlo_chance(name: str, params: dict | None = None, n: int = 10_000, seed: int = 0) -> float:
    """Score of a uniform random guesser (all-inactive for multi-label tasks)."""
    p = resolve_params(name, params)
    task = get_task(name)
    io = task.io(p)
    rng = np.random.default_rng(seed)
    hits, total = 0.0, 0
    for i in range(n):
        s = task.generator(**p, seed=(seed, 99, i))
        if io.loss == "bce":
            hits += float((s.target == 0).sum())
            total += s.target.size
            continue
        tgt = s.target[s.loss_mask] if s.target.shape == s.loss_mask.shape else s.target.reshape(1)
        lo = 1 if name == "copy" else 0
        guess = rng.integers(lo, io.n_classes, size=tgt.shape)
        hits += float((guess == tgt).sum())
        total += tgt.size
    return hits / total


# -----------------------------------------------------------------------------
# binary record stream
# -----------------------------------------------------------------------------

STREAM_FORMAT = "pctlab-records"
STREAM_VERSION = 1
FIELDS = ("inputs", "target", "loss_mask")
DTYPE_CODES = {"int64": 1, "float64": 2, "complex128": 3, "bool": 4}
_CODE_DTYPES = {v: np.dtype(k) for k, v in DTYPE_CODES.items()}


def _encode_field(fid: int, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    name = arr.dtype.name
    if arr.dtype.kind in "iu":
        arr, name = arr.astype(np.int64), "int64"
    elif arr.dtype.kind == "f":
        arr, name = arr.astype(np.float64), "float64"
    elif arr.dtype.kind == "c":
        arr, name = arr.astype(np.complex128), "complex128"
    if name not in DTYPE_CODES:
        raise TypeError(f"cannot encode dtype {arr.dtype}")
    head = struct.pack("<BBB", fid, DTYPE_CODES[name], arr.ndim) + struct.pack("<" + "I" * arr.ndim, *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<")).tobytes()


def encode_record(s: TaskSample) -> bytes:
    payload = b"".join(_encode_field(i, getattr(s, f)) for i, f in enumerate(FIELDS))
    return struct.pack("<I", len(payload)) + payload


def decode_records(data: bytes) -> list[TaskSample]:
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated record header")
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        end = pos + length
        if end > len(data):
            raise ValueError("truncated record payload")
        fields = {}
        while pos < end:
            fid, code, ndim = struct.unpack_from("<BBB", data, pos)
            pos += 3
            dims = struct.unpack_from("<" + "I" * ndim, data, pos)
            pos += 4 * ndim
            dt = _CODE_DTYPES[code].newbyteorder("<")
            nbytes = int(np.prod(dims)) * dt.itemsize if ndim else dt.itemsize
            fields[FIELDS[fid]] = np.frombuffer(data, dt, count=nbytes // dt.itemsize,
                                                offset=pos).reshape(dims).astype(dt.newbyteorder("="))
            pos += nbytes
        out.append(TaskSample(fields["inputs"], fields["target"], fields["loss_mask"]))
    return out


def write_dataset(path, name: str, params: dict | None, n: int, seed: int) -> tuple[Path, Path]:
    """Write ``n`` samples to ``path`` (records) and ``path.json`` (sidecar)."""
    p = resolve_params(name, params)
    path = Path(path)
    blob = b"".join(encode_record(sample(name, p, (seed, 0, i))) for i in range(n))
    path.write_bytes(blob)
    side = {
        "format": STREAM_FORMAT, "version": STREAM_VERSION, "task": name, "params": p,
        "n": n, "seed": seed, "seed_rule": "sample i uses default_rng([seed, 0, i])",
        "record": "u32 little-endian payload length, then fields "
                  "[u8 field_id][u8 dtype_code][u8 ndim][u32 dims...][little-endian data]",
        "fields": list(FIELDS), "dtype_codes": DTYPE_CODES,
        "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest(),
    }
    side_path = path.with_name(path.name + ".json")
    side_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path, side_path


def read_dataset(path) -> tuple[list[TaskSample], dict]:
    path = Path(path)
    side = json.loads(path.with_name(path.name + ".json").read_text())
    if side.get("format") != STREAM_FORMAT:
        raise ValueError("sidecar does not describe a record stream")
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != side["sha256"]:
        raise ValueError("record stream does not match its sidecar checksum")
    return decode_records(data), side
