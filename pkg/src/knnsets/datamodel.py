"""Core records, bundle ingestion/serialization and small numeric helpers."""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(ArithmeticError):
    """A fit or computation produced non-finite values."""


class Split(str, enum.Enum):
    TRAIN = "train"
    CALIBRATION = "calibration"
    TEST = "test"


@dataclass(frozen=True)
class Instance:
    id: str
    split: Split
    label: int | None
    logits: tuple[float, ...] | None
    exemplar: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class SplitData(Sequence):
    """Column-oriented storage for one split; indexes as a sequence of Instance.

    ``labels`` uses -1 for a missing label. ``logits`` is None only when every
    instance of the split lacks logits (allowed for test instances).
    """

    split: Split
    ids: tuple[str, ...]
    labels: np.ndarray
    logits: np.ndarray | None
    exemplars: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        label = int(self.labels[i])
        return Instance(
            id=self.ids[i],
            split=self.split,
            label=None if label < 0 else label,
            logits=None if self.logits is None else tuple(self.logits[i].tolist()),
            exemplar=tuple(self.exemplars[i].tolist()),
        )

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self[i]

    @property
    def has_labels(self) -> bool:
        return bool(np.all(self.labels >= 0))

    @classmethod
    def from_instances(cls, split: Split, instances: Sequence[Instance], num_classes: int, dim: int) -> "SplitData":
        n = len(instances)
        labels = np.full(n, -1, dtype=np.int64)
        exemplars = np.zeros((n, dim), dtype=np.float64)
        has_logits = [inst.logits is not None for inst in instances]
        if any(has_logits) and not all(has_logits):
            raise DataError(f"{split.value}: logits present for some instances but not others")
        logits = np.zeros((n, num_classes), dtype=np.float64) if (n and all(has_logits)) else None
        for i, inst in enumerate(instances):
            if inst.label is not None:
                labels[i] = inst.label
            exemplars[i] = inst.exemplar
            if logits is not None:
                logits[i] = inst.logits
        return cls(split, tuple(inst.id for inst in instances), labels, logits, exemplars)


def _freeze(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    num_classes: int
    dim: int
    train: SplitData
    calibration: SplitData
    test: SplitData
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        validate_bundle(self)
        for part in (self.train, self.calibration, self.test):
            _freeze(part.labels)
            _freeze(part.logits)
            _freeze(part.exemplars)

    @classmethod
    def from_arrays(
        cls,
        num_classes: int,
        train: tuple,
        calibration: tuple,
        test: tuple,
        label_names: Sequence[str] | None = None,
    ) -> "DatasetBundle":
        """Build from ``(ids, labels, logits, exemplars)`` tuples per split."""
        parts = []
        for split, (ids, labels, logits, exemplars) in zip(Split, (train, calibration, test)):
            exemplars = np.ascontiguousarray(exemplars, dtype=np.float64)
            if exemplars.ndim != 2:
                raise DataError(f"{split.value}: exemplars must be 2-D")
            labels = np.full(len(ids), -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
            logits = None if logits is None else np.ascontiguousarray(logits, dtype=np.float64)
            parts.append(SplitData(split, tuple(str(i) for i in ids), labels, logits, exemplars))
        dim = parts[0].exemplars.shape[1] if parts[0].exemplars.ndim == 2 else 0
        return cls(num_classes, dim, *parts, label_names=None if label_names is None else tuple(label_names))

    def split(self, name: Split | str) -> SplitData:
        return {Split.TRAIN: self.train, Split.CALIBRATION: self.calibration, Split.TEST: self.test}[Split(name)]

    def content_hash(self) -> str:
        """SHA-256 over all numeric content and ids (stable across formats)."""
        h = hashlib.sha256()
        h.update(struct.pack("<qq", self.num_classes, self.dim))
        for part in (self.train, self.calibration, self.test):
            h.update(part.split.value.encode())
            h.update(struct.pack("<q", len(part)))
            h.update("\x00".join(part.ids).encode())
            h.update(np.ascontiguousarray(part.labels, dtype="<i8").tobytes())
            if part.logits is not None:
                h.update(np.ascontiguousarray(part.logits, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(part.exemplars, dtype="<f8").tobytes())
        return h.hexdigest()


def validate_bundle(bundle: DatasetBundle) -> None:
    C, D = bundle.num_classes, bundle.dim
    if C < 2:
        raise DataError(f"num_classes must be >= 2, got {C}")
    if D < 1:
        raise DataError(f"dim must be >= 1, got {D}")
    if len(bundle.train) == 0 or len(bundle.calibration) == 0:
        raise DataError("train and calibration splits must be non-empty")
    seen: set[str] = set()
    for part in (bundle.train, bundle.calibration, bundle.test):
        name = part.split.value
        n = len(part)
        if part.exemplars.shape != (n, D):
            raise DataError(f"{name}: exemplar dimension mismatch, expected (n, {D}), got {part.exemplars.shape}")
        if part.labels.shape != (n,):
            raise DataError(f"{name}: label array has wrong shape")
        if part.logits is None:
            if part.split is not Split.TEST and n:
                raise DataError(f"{name}: logits are required")
        elif part.logits.shape != (n, C):
            raise DataError(f"{name}: logits dimension mismatch, expected (n, {C}), got {part.logits.shape}")
        if part.split is not Split.TEST and np.any(part.labels < 0):
            raise DataError(f"{name}: missing label")
        if np.any(part.labels >= C):
            raise DataError(f"{name}: label out of range [0, {C})")
        if not np.all(np.isfinite(part.exemplars)) or (part.logits is not None and not np.all(np.isfinite(part.logits))):
            raise DataError(f"{name}: non-finite value")
        for i in part.ids:
            if i in seen:
                raise DataError(f"duplicate id {i!r}")
            seen.add(i)


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.1
    delta: float = 1.0
    kappa: int = 1000
    k_neighbors: int = 25
    k_sample: int | None = None
    use_h_guard: bool = True
    resample: bool = False
    activation: str = "tanh"
    seed: int = 0
    # fitting budgets (not in the method itself; recorded in fit metadata)
    knn_epochs: int = 300
    knn_lr: float = 0.5
    knnknn_epochs: int = 50
    knnknn_lr: float = 2.0
    knnknn_max_fit_points: int = 1000
    num_bins: int = 4

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.kappa < 1:
            raise ValueError("kappa must be positive")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive")
        if self.k_sample is not None and self.k_sample < 1:
            raise ValueError("k_sample must be positive")
        if self.resample and self.k_sample is None:
            raise ValueError("resample requires k_sample")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# numeric helpers


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts 1-D or 2-D input."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of empty input")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def rescale_l2_logits(g, m: float) -> np.ndarray:
    """Map per-class match distances to scores in [-1, 1]; smaller distance -> larger score.

    ``m`` is the maximum match distance observed over calibration.
    """
    if not m > 0:
        raise ValueError("m must be positive")
    g = np.asarray(g, dtype=np.float64)
    return np.clip(1.0 - g / (m / 2.0), -1.0, 1.0)


# ---------------------------------------------------------------------------
# JSONL


def _label_from_json(value, vocab: dict[str, int] | None):
    if value is None:
        return None
    if isinstance(value, bool):
        raise DataError(f"invalid label {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        if vocab is None or value not in vocab:
            raise DataError(f"unknown string label {value!r}")
        return vocab[value]
    raise DataError(f"invalid label {value!r}")


def _vocab_path(path: Path) -> Path:
    return path.with_name(path.name + ".vocab.json")


def _read_jsonl(path: Path) -> DatasetBundle:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: parse failure: {e.msg}") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: record is not an object")
            records.append((lineno, rec))
    if not records:
        raise DataError(f"{path}: empty bundle")

    label_names = None
    vocab = None
    string_labels = sorted({r["label"] for _, r in records if isinstance(r.get("label"), str)})
    if string_labels:
        vp = _vocab_path(path)
        label_names = tuple(json.loads(vp.read_text())) if vp.exists() else tuple(string_labels)
        vocab = {name: i for i, name in enumerate(label_names)}

    C = D = None
    grouped: dict[Split, list[Instance]] = {s: [] for s in Split}
    for lineno, rec in records:
        try:
            split = Split(rec["split"])
            exemplar = rec["exemplar"]
            logits = rec.get("logits")
            ident = rec["id"]
        except (KeyError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: bad record ({e})") from None
        if not isinstance(ident, str):
            raise DataError(f"{path}:{lineno}: id must be a string")
        if D is None:
            D = len(exemplar)
        elif len(exemplar) != D:
            raise DataError(f"{path}:{lineno}: dimension mismatch: exemplar length {len(exemplar)} != {D}")
        if logits is not None:
            if C is None:
                C = len(logits)
            elif len(logits) != C:
                raise DataError(f"{path}:{lineno}: dimension mismatch: logits length {len(logits)} != {C}")
        label = _label_from_json(rec.get("label"), vocab)
        if label is None and split is not Split.TEST:
            raise DataError(f"{path}:{lineno}: missing label on {split.value} record {ident!r}")
        try:
            inst = Instance(
                ident,
                split,
                label,
                None if logits is None else tuple(float(v) for v in logits),
                tuple(float(v) for v in exemplar),
            )
        except (TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: bad numeric field ({e})") from None
        grouped[split].append(inst)
    if C is None:
        raise DataError(f"{path}: no logits present")
    if label_names is not None and len(label_names) > C:
        raise DataError(f"{path}: {len(label_names)} label names but only {C} classes")
    parts = [SplitData.from_instances(s, grouped[s], C, D) for s in Split]
    return DatasetBundle(C, D, *parts, label_names=label_names)


def _write_jsonl(bundle: DatasetBundle, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for part in (bundle.train, bundle.calibration, bundle.test):
            for inst in part:
                rec = {
                    "id": inst.id,
                    "split": inst.split.value,
                    "label": inst.label,
                    "logits": None if inst.logits is None else list(inst.logits),
                    "exemplar": list(inst.exemplar),
                }
                fh.write(json.dumps(rec) + "\n")
    if bundle.label_names is not None:
        _vocab_path(path).write_text(json.dumps(list(bundle.label_names)))


# ---------------------------------------------------------------------------
# packed binary
#
# header: magic b"KNNB", version u8, C u32, D u32, n_train u64, n_cal u64,
#         n_test u64, id_width u16          (all little-endian)
# record: id utf-8 null-padded to id_width bytes, split u8, flags u8
#         (bit0 label present, bit1 logits present), label i32,
#         C x f64 logits (zeros when absent), D x f64 exemplar

BINARY_MAGIC = b"KNNB"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sBIIQQQH")
_SPLIT_CODES = {Split.TRAIN: 0, Split.CALIBRATION: 1, Split.TEST: 2}


def _record_dtype(C: int, D: int, id_width: int) -> np.dtype:
    return np.dtype(
        [
            ("id", f"S{id_width}"),
            ("split", "u1"),
            ("flags", "u1"),
            ("label", "<i4"),
            ("logits", "<f8", (C,)),
            ("exemplar", "<f8", (D,)),
        ]
    )


def _write_binary(bundle: DatasetBundle, path: Path) -> None:
    C, D = bundle.num_classes, bundle.dim
    parts = (bundle.train, bundle.calibration, bundle.test)
    encoded = [[i.encode("utf-8") for i in p.ids] for p in parts]
    id_width = max(1, max((len(b) for ids in encoded for b in ids), default=1))
    if id_width > 0xFFFF:
        raise DataError("id too long for binary format")
    dt = _record_dtype(C, D, id_width)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, C, D, *(len(p) for p in parts), id_width))
        for part, ids in zip(parts, encoded):
            rec = np.zeros(len(part), dtype=dt)
            rec["id"] = ids
            rec["split"] = _SPLIT_CODES[part.split]
            has_label = part.labels >= 0
            rec["flags"] = has_label.astype(np.uint8) | (np.uint8(2) if part.logits is not None else np.uint8(0))
            rec["label"] = np.where(has_label, part.labels, 0)
            if part.logits is not None:
                rec["logits"] = part.logits
            rec["exemplar"] = part.exemplars
            fh.write(rec.tobytes())
    if bundle.label_names is not None:
        _vocab_path(path).write_text(json.dumps(list(bundle.label_names)))


def _read_binary(path: Path) -> DatasetBundle:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, C, D, n_tr, n_ca, n_te, id_width = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise DataError(f"{path}: unsupported binary version {version}")
    dt = _record_dtype(C, D, id_width)
    n = n_tr + n_ca + n_te
    if len(raw) != _HEADER.size + n * dt.itemsize:
        raise DataError(f"{path}: size does not match header")
    rec = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=n)
    parts = []
    start = 0
    for split, count in zip(Split, (n_tr, n_ca, n_te)):
        r = rec[start : start + count]
        start += count
        if np.any(r["split"] != _SPLIT_CODES[split]):
            raise DataError(f"{path}: records out of split order")
        flags = r["flags"]
        has_logits = (flags & 2) != 0
        if count and np.any(has_logits != has_logits[0]):
            raise DataError(f"{path}: {split.value}: logits present for some instances but not others")
        labels = np.where((flags & 1) != 0, r["label"].astype(np.int64), -1)
        logits = r["logits"].astype(np.float64) if count and has_logits[0] else None
        ids = tuple(b.decode("utf-8") for b in r["id"])
        parts.append(SplitData(split, ids, labels, logits, np.array(r["exemplar"], dtype=np.float64)))
    vp = _vocab_path(path)
    label_names = tuple(json.loads(vp.read_text())) if vp.exists() else None
    return DatasetBundle(C, D, *parts, label_names=label_names)


def _infer_schema(path: Path) -> str:
    return "binary" if path.suffix in (".bin", ".knnb") else "jsonl"


def load_bundle(path, schema: str | None = None) -> DatasetBundle:
    """Load and validate a bundle from JSONL (canonical) or the packed binary format."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    schema = schema or _infer_schema(path)
    if schema == "jsonl":
        return _read_jsonl(path)
    if schema == "binary":
        return _read_binary(path)
    raise ValueError(f"unknown schema {schema!r}")


def save_bundle(bundle: DatasetBundle, path, schema: str | None = None) -> None:
    path = Path(path)
    schema = schema or _infer_schema(path)
    if schema == "jsonl":
        _write_jsonl(bundle, path)
    elif schema == "binary":
        _write_binary(bundle, path)
    else:
        raise ValueError(f"unknown schema {schema!r}")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
