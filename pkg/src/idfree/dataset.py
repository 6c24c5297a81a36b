"""Interaction logs, per-user splits and modality features."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .sparse import SparseCSR

log = logging.getLogger(__name__)

MODALITIES = ("text", "visual")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class AlignmentError(DataError):
    pass


_HEADER_TOKENS = {"user", "user_id", "userid", "uid", "item", "item_id", "itemid", "iid"}


def load_interactions(path, fmt: str | None = None) -> list[tuple[str, str]]:
    """Read ``(user, item)`` pairs in file order.

    ``fmt`` is ``"tsv"`` or ``"csv"``; by default the delimiter is chosen from
    the first line.  A header row is skipped when its first two fields look
    like column names.  Columns after the second are ignored.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = [(n, ln) for n, ln in enumerate(lines, start=1) if ln.strip()]
    if not body:
        raise EmptyInputError(f"{path}: no interactions")
    if fmt is None:
        first = body[0][1]
        fmt = "tsv" if "\t" in first else "csv"
    delim = {"tsv": "\t", "csv": ","}.get(fmt)
    if delim is None:
        raise ValueError(f"unknown interaction format {fmt!r}")
    pairs = []
    for k, row in enumerate(csv.reader([ln for _, ln in body], delimiter=delim)):
        lineno = body[k][0]
        fields = [f.strip() for f in row]
        if k == 0 and len(fields) >= 2 and {fields[0].lower(), fields[1].lower()} <= _HEADER_TOKENS:
            continue
        if len(fields) < 2 or not fields[0] or not fields[1]:
            raise ParseError(f"{path}:{lineno}: expected user and item columns, got {row!r}")
        pairs.append((fields[0], fields[1]))
    if not pairs:
        raise EmptyInputError(f"{path}: header only, no interactions")
    return pairs


def _order_ids(ids) -> list[str]:
    """First-appearance order, or numeric order when every id is an integer."""
    seen = list(dict.fromkeys(ids))
    if all(s.lstrip("-").isdigit() for s in seen):
        return sorted(seen, key=int)
    return seen


def _pairs_to_csr(pairs: np.ndarray, n_users: int, n_items: int) -> SparseCSR:
    if len(pairs) == 0:
        return SparseCSR.empty(n_users, n_items)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return SparseCSR.from_coo(pairs[:, 0], pairs[:, 1], np.ones(len(pairs)), (n_users, n_items))


@dataclass
class InteractionSet:
    n_users: int
    n_items: int
    train: SparseCSR
    val: SparseCSR
    test: SparseCSR
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    @property
    def cold_users(self) -> np.ndarray:
        """Mask of users without any training interaction."""
        return self.train.row_nnz() == 0

    def split(self, name: str) -> SparseCSR:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def id_maps(self) -> dict:
        return {"users": {u: i for i, u in enumerate(self.user_ids)},
                "items": {t: i for i, t in enumerate(self.item_ids)}}

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "id_maps.json").write_text(json.dumps(self.id_maps(), indent=1) + "\n")
        for name in ("train", "val", "test"):
            m = self.split(name)
            with open(out / f"{name}.tsv", "w") as fh:
                for u, i in zip(m.row_ids(), m.col_idx):
                    fh.write(f"{u}\t{i}\n")

    @classmethod
    def load(cls, data_dir) -> "InteractionSet":
        d = Path(data_dir)
        maps = json.loads((d / "id_maps.json").read_text())
        user_ids = [None] * len(maps["users"])
        for k, v in maps["users"].items():
            user_ids[v] = k
        item_ids = [None] * len(maps["items"])
        for k, v in maps["items"].items():
            item_ids[v] = k
        nu, ni = len(user_ids), len(item_ids)
        splits = {}
        for name in ("train", "val", "test"):
            text = (d / f"{name}.tsv").read_text().split()
            arr = np.array(text, dtype=np.int64).reshape(-1, 2)
            splits[name] = _pairs_to_csr(arr, nu, ni)
        return cls(nu, ni, splits["train"], splits["val"], splits["test"], user_ids, item_ids)


def build_splits(pairs, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                 item_ids: list[str] | None = None) -> InteractionSet:
    """Deduplicate and split each user's interactions into train/val/test.

    A user with ``n`` unique items gets ``floor(r_val*n)`` validation and
    ``floor(r_test*n)`` test items; training takes the remainder.  ``item_ids``
    fixes the dense item order (e.g. feature-file row order); pairs naming
    items outside it raise :class:`AlignmentError`.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    pairs = list(dict.fromkeys((str(u), str(i)) for u, i in pairs))
    if not pairs:
        raise EmptyInputError("no interactions to split")
    user_ids = _order_ids(u for u, _ in pairs)
    if item_ids is None:
        item_ids = _order_ids(i for _, i in pairs)
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {t: k for k, t in enumerate(item_ids)}
    per_user: list[list[int]] = [[] for _ in user_ids]
    for u, i in pairs:
        if i not in iidx:
            raise AlignmentError(f"item {i!r} is not in the item id list")
        per_user[uidx[u]].append(iidx[i])

    rng = np.random.default_rng(seed)
    out = {"train": [], "val": [], "test": []}
    for u, items in enumerate(per_user):
        if not items:
            log.warning("user %s has no interactions; excluded", user_ids[u])
            continue
        items = np.array(items, dtype=np.int64)[rng.permutation(len(items))]
        n = len(items)
        n_val = math.floor(ratios[1] * n + 1e-9)
        n_test = math.floor(ratios[2] * n + 1e-9)
        n_train = n - n_val - n_test
        for name, chunk in (("train", items[:n_train]),
                            ("val", items[n_train:n_train + n_val]),
                            ("test", items[n_train + n_val:])):
            out[name].extend((u, i) for i in chunk)
    nu, ni = len(user_ids), len(item_ids)
    return InteractionSet(nu, ni, _pairs_to_csr(out["train"], nu, ni),
                          _pairs_to_csr(out["val"], nu, ni),
                          _pairs_to_csr(out["test"], nu, ni), user_ids, list(item_ids))


@dataclass
class FeatureMatrix:
    modality: str
    data: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def save(self, path) -> None:
        formats.write_matrix(path, self.data)


def load_features(path, n_rows: int | None = None, modality: str = "text") -> FeatureMatrix:
    """Load an IDFV1 file, or a headerless CSV with one entity per line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    if formats.is_idfv(path):
        data = formats.read_matrix(path)
    else:
        try:
            data = np.loadtxt(path, delimiter=",", dtype=np.float32, ndmin=2)
        except ValueError as e:
            raise DataError(f"{path}: cannot parse CSV features ({e})") from None
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0])
        raise DataError(f"{path}: non-finite value in row {bad}")
    if n_rows is not None and data.shape[0] != n_rows:
        raise AlignmentError(f"{path}: {data.shape[0]} feature rows but {n_rows} entities")
    return FeatureMatrix(modality, data)


def user_modal_features(r_train: SparseCSR, item_feats: FeatureMatrix) -> tuple[FeatureMatrix, np.ndarray]:
    """Mean of each user's training-item feature rows.

    Returns the user feature matrix and a cold-user mask; cold users get a
    zero row.
    """
    if r_train.n_cols != item_feats.n_rows:
        raise AlignmentError(
            f"interaction matrix has {r_train.n_cols} items, features have {item_feats.n_rows} rows")
    counts = r_train.row_sums()
    cold = counts == 0
    inv = np.zeros_like(counts)
    inv[~cold] = 1.0 / counts[~cold]
    m = r_train.to_scipy()
    sums = m @ item_feats.data.astype(np.float64)
    data = (sums * inv[:, None]).astype(np.float32)
    return FeatureMatrix(item_feats.modality, data), cold
