"""Embedding matrices, manifests, vocabularies and prompt templates on disk.

Binary embedding files (``.emb``) use a fixed little-endian header::

    magic   8 bytes  b"DFMZEMB1"
    version u32      1
    rows    u64
    dim     u32
    dtype   u8       1 = float32
    payload rows*dim float32, row-major

CSV embedding files carry a header ``id,f0,...,f{d-1}``.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .exceptions import (
    DataError,
    DegenerateRow,
    FormatError,
    ManifestError,
    TemplateError,
    UnsupportedDtype,
    VocabError,
)

MAGIC = b"DFMZEMB1"
VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<8sIQIB")
HEADER_SIZE = _HEADER.size

ZERO_NORM = 1e-12
UNIT_TOL = 1e-4
# Rows already this close to unit norm are left untouched so that
# normalization is bitwise idempotent.
_RENORM_SKIP = 1e-6

PLACEHOLDER = "{disease}"


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Dense ``rows x dim`` float32 matrix with an L2-normalized flag."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype="<f4")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, 0)
        if arr.ndim != 2:
            raise DataError(f"embedding data must be 2-D, got {arr.ndim}-D")
        if arr is self.data or np.shares_memory(arr, self.data):
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __len__(self):
        return self.rows

    def validate(self) -> None:
        """Raise :class:`DataError` if the matrix violates its invariants."""
        if not np.all(np.isfinite(self.data)):
            bad = int(np.flatnonzero(~np.isfinite(self.data).all(axis=1))[0])
            raise DataError(f"non-finite value in row {bad}")
        if self.normalized and self.rows:
            norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
            off = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
            if off.size:
                raise DataError(
                    f"row {int(off[0])} has norm {norms[off[0]]:.6g} but matrix is flagged normalized"
                )


def as_float_array(x) -> np.ndarray:
    """Return a 2-D float64 view of an EmbeddingMatrix or array-like."""
    arr = np.asarray(x.data if isinstance(x, EmbeddingMatrix) else x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def normalize_rows(m) -> EmbeddingMatrix:
    """L2-normalize every row.

    Raises :class:`DegenerateRow` on the first row whose norm is below 1e-12.
    The operation is idempotent bit for bit: matrices already flagged as
    normalized, and rows already within 1e-6 of unit length, are returned
    unchanged.
    """
    if isinstance(m, EmbeddingMatrix) and m.normalized:
        return m
    src = m.data if isinstance(m, EmbeddingMatrix) else np.asarray(m, dtype="<f4")
    if src.ndim == 1:
        src = src.reshape(1, -1)
    x = src.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(~(norms >= ZERO_NORM))
    if bad.size:
        raise DegenerateRow(bad[0])
    out = (x / norms[:, None]).astype("<f4")
    keep = np.abs(norms - 1.0) <= _RENORM_SKIP
    out[keep] = src[keep]
    return EmbeddingMatrix(out, normalized=True)


def _write_matrix(fh: BinaryIO, m) -> None:
    data = m.data if isinstance(m, EmbeddingMatrix) else np.ascontiguousarray(m, dtype="<f4")
    if data.ndim != 2:
        raise DataError("only 2-D matrices can be saved")
    fh.write(_HEADER.pack(MAGIC, VERSION, data.shape[0], data.shape[1], DTYPE_FLOAT32))
    fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes(order="C"))


def _read_matrix(fh: BinaryIO, source="<stream>") -> EmbeddingMatrix:
    head = fh.read(HEADER_SIZE)
    if len(head) < 8 or head[:8] != MAGIC:
        raise FormatError(f"{source}: bad magic, expected {MAGIC!r}")
    if len(head) < HEADER_SIZE:
        raise FormatError(f"{source}: truncated header")
    _, version, rows, dim, dtype = _HEADER.unpack(head)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedDtype(f"{source}: dtype code {dtype} (only 1=float32 is supported)")
    nbytes = rows * dim * 4
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"{source}: payload has {len(payload)} bytes, header declares {nbytes}")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    return EmbeddingMatrix(data.copy())


def save_embeddings(path, m) -> None:
    with open(path, "wb") as fh:
        _write_matrix(fh, m)


def load_embeddings(path, validate: bool = False) -> EmbeddingMatrix:
    """Read a ``DFMZEMB1`` file. Trailing bytes after the payload are rejected."""
    path = Path(path)
    with open(path, "rb") as fh:
        m = _read_matrix(fh, source=str(path))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    if validate:
        m.validate()
    return m


def encode_embeddings(m) -> bytes:
    buf = io.BytesIO()
    _write_matrix(buf, m)
    return buf.getvalue()


def decode_embeddings(raw: bytes) -> EmbeddingMatrix:
    return _read_matrix(io.BytesIO(raw))


def load_embeddings_csv(path) -> tuple[list[str], EmbeddingMatrix]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV") from None
        if not header or header[0] != "id":
            raise FormatError(f"{path}: first column must be 'id'")
        expected = [f"f{i}" for i in range(len(header) - 1)]
        if header[1:] != expected:
            raise FormatError(f"{path}: feature columns must be named f0..f{len(header) - 2}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            ids.append(rec[0])
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    data = np.asarray(rows, dtype="<f4").reshape(len(rows), len(header) - 1)
    return ids, EmbeddingMatrix(data)


def save_embeddings_csv(path, m, ids: Sequence[str] | None = None) -> None:
    data = m.data if isinstance(m, EmbeddingMatrix) else np.asarray(m, dtype="<f4")
    ids = list(ids) if ids is not None else [str(i) for i in range(data.shape[0])]
    if len(ids) != data.shape[0]:
        raise DataError("ids length does not match row count")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"f{i}" for i in range(data.shape[1])])
        for rid, row in zip(ids, data):
            # repr of a float32 widened to float64 round-trips exactly
            w.writerow([rid] + [repr(float(v)) for v in row])


def read_matrix(path, validate: bool = False) -> EmbeddingMatrix:
    """Load ``.emb`` or ``.csv`` by extension."""
    if str(path).lower().endswith(".csv"):
        m = load_embeddings_csv(path)[1]
        if validate:
            m.validate()
        return m
    return load_embeddings(path, validate=validate)


@dataclass(frozen=True)
class DatasetManifest:
    """Row metadata for an embedding matrix.

    ``pair_ids[i]`` names the text row matched to image row ``i``; the text
    rows are identified by ``text_ids`` when given, otherwise by their row
    index rendered as a string.
    """

    ids: list[str]
    labels: list[int] | None = None
    class_names: list[str] = field(default_factory=list)
    split: list[str] | None = None
    pair_ids: list[str] | None = None
    text_ids: list[str] | None = None

    def __post_init__(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise ManifestError("ids must be unique")
        if self.labels is not None:
            if len(self.labels) != n:
                raise ManifestError(f"{len(self.labels)} labels for {n} ids")
            C = len(self.class_names)
            for i, lab in enumerate(self.labels):
                if isinstance(lab, bool) or not isinstance(lab, (int, np.integer)):
                    raise ManifestError(f"label at row {i} is not an integer")
                if not 0 <= lab < C:
                    raise ManifestError(f"label {lab} at row {i} outside [0, {C})")
        if self.split is not None:
            if len(self.split) != n:
                raise ManifestError("split length does not match ids")
            bad = set(self.split) - {"train", "val", "test"}
            if bad:
                raise ManifestError(f"unknown split tags {sorted(bad)}")
        if self.pair_ids is not None:
            if len(self.pair_ids) != n:
                raise ManifestError("pair_ids length does not match ids")
            if len(set(self.pair_ids)) != n:
                raise ManifestError("pair_ids must be one-to-one")
        if self.text_ids is not None and len(set(self.text_ids)) != len(self.text_ids):
            raise ManifestError("text_ids must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def label_array(self) -> np.ndarray:
        if self.labels is None:
            raise ManifestError("manifest carries no labels")
        return np.asarray(self.labels, dtype=np.int64)

    def rows_in_split(self, tag: str) -> np.ndarray:
        if self.split is None:
            raise ManifestError("manifest carries no split tags")
        return np.flatnonzero(np.asarray(self.split) == tag)

    def pairing(self, n_candidates: int, candidate_ids: Sequence[str] | None = None) -> np.ndarray:
        """Candidate row index matched to each query row.

        The pairing must be a bijection onto the candidate set.
        """
        if self.pair_ids is None:
            raise ManifestError("manifest carries no pair_ids")
        cids = candidate_ids if candidate_ids is not None else self.text_ids
        if cids is None:
            cids = [str(i) for i in range(n_candidates)]
        cids = list(cids)
        if len(cids) != n_candidates:
            raise ManifestError(f"{len(cids)} candidate ids for {n_candidates} candidate rows")
        index = {c: i for i, c in enumerate(cids)}
        out = np.empty(len(self.pair_ids), dtype=np.int64)
        for i, pid in enumerate(self.pair_ids):
            if pid not in index:
                raise ManifestError(f"query {self.ids[i]!r} has no matching candidate {pid!r}")
            out[i] = index[pid]
        if len(out) != n_candidates:
            raise ManifestError(
                f"pairing is not a bijection: {len(out)} queries vs {n_candidates} candidates"
            )
        return out

    def to_dict(self) -> dict:
        d = {"ids": list(self.ids), "class_names": list(self.class_names)}
        for key in ("labels", "split", "pair_ids", "text_ids"):
            val = getattr(self, key)
            if val is not None:
                d[key] = [int(v) for v in val] if key == "labels" else list(val)
        return d


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict) or "ids" not in raw:
        raise ManifestError(f"{path}: manifest must be an object with an 'ids' list")
    known = {"ids", "labels", "class_names", "split", "pair_ids", "text_ids"}
    unknown = set(raw) - known
    if unknown:
        raise ManifestError(f"{path}: unknown manifest keys {sorted(unknown)}")
    return DatasetManifest(
        ids=[str(i) for i in raw["ids"]],
        labels=raw.get("labels"),
        class_names=[str(c) for c in raw.get("class_names", [])],
        split=raw.get("split"),
        pair_ids=None if raw.get("pair_ids") is None else [str(p) for p in raw["pair_ids"]],
        text_ids=None if raw.get("text_ids") is None else [str(t) for t in raw["text_ids"]],
    )


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise TemplateError("template set is empty")
        for i, t in enumerate(self.templates):
            if t.count(PLACEHOLDER) != 1:
                raise TemplateError(f"template {i} must contain {PLACEHOLDER!r} exactly once: {t!r}")

    def __len__(self):
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    def expand(self, class_names: Sequence[str]) -> list[list[str]]:
        """Prompt strings per class, ready for an external text encoder."""
        return [[t.replace(PLACEHOLDER, name) for t in self.templates] for name in class_names]


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.rstrip("\n").rstrip("\r") for ln in fh if ln.strip()]


def load_templates(path=None) -> PromptTemplateSet:
    """Load newline-delimited templates; ``None`` loads the packaged default set."""
    if path is None:
        text = resources.files("embedlab").joinpath("data/templates.txt").read_text("utf-8")
        return PromptTemplateSet([ln for ln in text.splitlines() if ln.strip()])
    return PromptTemplateSet(_read_lines(path))


@dataclass(frozen=True, eq=False)
class Vocabulary:
    terms: tuple[str, ...]
    term_embeddings: EmbeddingMatrix

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if len(set(self.terms)) != len(self.terms):
            raise VocabError("vocabulary terms must be unique")
        if self.term_embeddings.rows != len(self.terms):
            raise VocabError(
                f"{len(self.terms)} terms but {self.term_embeddings.rows} embedding rows"
            )
        if not self.term_embeddings.normalized:
            object.__setattr__(self, "term_embeddings", normalize_rows(self.term_embeddings))

    def __len__(self):
        return len(self.terms)


def load_vocabulary(terms_path, embeddings_path) -> Vocabulary:
    terms = _read_lines(terms_path)
    emb = read_matrix(embeddings_path)
    return Vocabulary(terms, emb)


def load_demo_terms() -> list[str]:
    """Illustrative dermatology concept terms (not the original study's vocabulary)."""
    text = resources.files("embedlab").joinpath("data/demo_vocabulary.txt").read_text("utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
