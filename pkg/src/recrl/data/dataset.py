"""Interaction logs, item catalogs and the delimited-text dataset format.

A dataset is described by a small key-value descriptor file::

    train = train.csv
    test = test.csv
    categories = categories.csv      # optional
    delimiter = ,
    user_col = user_id
    item_col = item_id
    reward_col = rating
    timestamp_col = timestamp        # optional; file order otherwise
    reward_min = 1
    reward_max = 5
    n_users = 290                    # optional; ids then must already be dense
    n_items = 300

Paths are resolved relative to the descriptor. Without ``n_users``/``n_items``
raw ids are re-indexed densely (sorted raw id order over train and test).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from recrl.errors import DataError, DataFormatError

DATA_ROOT_ENV = "RECRL_DATA_ROOT"

_DESCRIPTOR_KEYS = {
    "train", "test", "categories", "delimiter", "user_col", "item_col", "reward_col",
    "timestamp_col", "reward_min", "reward_max", "n_users", "n_items", "name",
}


@dataclass
class InteractionLog:
    """Columnar (user, item, reward, timestamp) records."""

    users: np.ndarray
    items: np.ndarray
    rewards: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.users)
        if not (len(self.items) == len(self.rewards) == len(self.timestamps) == n):
            raise DataFormatError("record columns have different lengths")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise DataFormatError(f"user id out of range [0, {self.n_users})")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise DataFormatError(f"item id out of range [0, {self.n_items})")

    def __len__(self) -> int:
        return len(self.users)

    def sorted_order(self) -> np.ndarray:
        """Record order by (user, timestamp, item) - the deterministic per-user time order."""
        return np.lexsort((self.items, self.timestamps, self.users))

    def user_sequences(self) -> dict[int, list[tuple[int, float]]]:
        """Per user, (item, reward) pairs in time order."""
        out: dict[int, list[tuple[int, float]]] = {}
        for k in self.sorted_order():
            out.setdefault(int(self.users[k]), []).append((int(self.items[k]), float(self.rewards[k])))
        return out

    def as_dict(self) -> dict[tuple[int, int], float]:
        """(user, item) -> reward; a later record for the same pair wins."""
        return {(int(u), int(i)): float(r) for u, i, r in zip(self.users, self.items, self.rewards)}

    def subset(self, mask: np.ndarray) -> "InteractionLog":
        return InteractionLog(self.users[mask], self.items[mask], self.rewards[mask],
                              self.timestamps[mask], self.n_users, self.n_items)


@dataclass
class ItemCatalog:
    n_items: int
    category: np.ndarray
    popularity: np.ndarray
    n_train_records: int
    has_categories: bool = True

    def __post_init__(self):
        self.category = np.asarray(self.category, dtype=np.int64)
        self.popularity = np.asarray(self.popularity, dtype=np.float64)
        if self.category.shape != (self.n_items,) or self.popularity.shape != (self.n_items,):
            raise DataFormatError("catalog arrays must have one entry per item")

    @classmethod
    def from_log(cls, log: InteractionLog, category: np.ndarray | None = None) -> "ItemCatalog":
        if len(log) == 0:
            raise DataError("cannot build a catalog from an empty log")
        counts = np.bincount(log.items, minlength=log.n_items).astype(np.float64)
        has = category is not None
        # without categories every item is its own category
        cat = np.asarray(category) if has else np.arange(log.n_items)
        return cls(log.n_items, cat, counts / counts.sum(), len(log), has)


@dataclass
class Dataset:
    name: str
    train: InteractionLog
    test: InteractionLog
    catalog: ItemCatalog
    reward_min: float
    reward_max: float
    extra: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


def read_descriptor(path: str | os.PathLike) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"descriptor not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _DESCRIPTOR_KEYS:
            raise DataFormatError(f"{path}:{lineno}: unknown descriptor key {key!r}")
        out[key] = value
    for key in ("train", "test", "user_col", "item_col", "reward_col"):
        if key not in out:
            raise DataFormatError(f"{path}: descriptor is missing {key!r}")
    return out


def write_descriptor(path: str | os.PathLike, desc: dict[str, object]) -> None:
    lines = [f"{k} = {v}" for k, v in desc.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _delimiter(desc: dict[str, str]) -> str:
    d = desc.get("delimiter", ",")
    return {"tab": "\t", "\\t": "\t", "comma": ","}.get(d, d)


def _read_table(path: Path, desc: dict[str, str]) -> dict[str, list[str]]:
    if not path.exists():
        raise DataFormatError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=_delimiter(desc))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        cols: dict[str, list[str]] = {h: [] for h in header}
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row has {len(row)} fields, header has {len(header)}")
            for h, v in zip(header, row):
                cols[h].append(v.strip())
    needed = [desc["user_col"], desc["item_col"], desc["reward_col"]]
    if desc.get("timestamp_col"):
        needed.append(desc["timestamp_col"])
    for c in needed:
        if c not in cols:
            raise DataFormatError(f"{path}: missing column {c!r}")
    return cols


def _parse_ints(values: list[str], what: str, path: Path) -> np.ndarray:
    try:
        return np.array([int(v) for v in values], dtype=np.int64)
    except ValueError:
        raise DataFormatError(f"{path}: non-integer {what}") from None


def read_categories(path: Path, delimiter: str = ",") -> dict[str, str]:
    """Raw item id -> raw category label; a non-numeric first line is a header."""
    if not path.exists():
        raise DataFormatError(f"category file not found: {path}")
    out: dict[str, str] = {}
    with path.open(newline="") as fh:
        for k, row in enumerate(csv.reader(fh, delimiter=delimiter)):
            if not row:
                continue
            if len(row) < 2:
                raise DataFormatError(f"{path}: expected 'item_id, category' per line")
            item, cat = row[0].strip(), row[1].strip()
            if k == 0 and not item.lstrip("-").isdigit():
                continue
            out[item] = cat
    return out


def load_dataset(path: str | os.PathLike, require_categories: bool = False) -> Dataset:
    """Load train/test logs and the item catalog described by ``path``.

    Relative descriptor paths are looked up under ``$RECRL_DATA_ROOT`` when
    they do not exist relative to the working directory.
    """
    path = Path(path)
    if not path.exists() and not path.is_absolute() and os.environ.get(DATA_ROOT_ENV):
        path = Path(os.environ[DATA_ROOT_ENV]) / path
    desc = read_descriptor(path)
    base = path.parent
    tables = {split: _read_table(base / desc[split], desc) for split in ("train", "test")}
    for split, cols in tables.items():
        if not cols[desc["user_col"]]:
            raise DataError(f"{split} split is empty")

    raw_u = {s: c[desc["user_col"]] for s, c in tables.items()}
    raw_i = {s: c[desc["item_col"]] for s, c in tables.items()}
    if "n_users" in desc and "n_items" in desc:
        n_users, n_items = int(desc["n_users"]), int(desc["n_items"])
        umap = imap = None
    else:
        umap = _dense_map(raw_u["train"] + raw_u["test"])
        imap = _dense_map(raw_i["train"] + raw_i["test"])
        n_users, n_items = len(umap), len(imap)

    logs = {}
    for split, cols in tables.items():
        fpath = base / desc[split]
        if umap is None:
            users = _parse_ints(raw_u[split], "user id", fpath)
            items = _parse_ints(raw_i[split], "item id", fpath)
        else:
            users = np.array([umap[u] for u in raw_u[split]], dtype=np.int64)
            items = np.array([imap[i] for i in raw_i[split]], dtype=np.int64)
        try:
            rewards = np.array([float(v) for v in cols[desc["reward_col"]]])
        except ValueError:
            raise DataFormatError(f"{fpath}: non-numeric reward") from None
        if desc.get("timestamp_col"):
            ts = _parse_ints(cols[desc["timestamp_col"]], "timestamp", fpath)
        else:
            ts = np.arange(len(users), dtype=np.int64)
        logs[split] = InteractionLog(users, items, rewards, ts, n_users, n_items)

    category = None
    if desc.get("categories"):
        raw_cat = read_categories(base / desc["categories"], _delimiter(desc))
        labels = sorted(set(raw_cat.values()), key=_natural_key)
        lab_index = {c: k for k, c in enumerate(labels)}
        category = np.full(n_items, -1, dtype=np.int64)
        for raw_item, c in raw_cat.items():
            idx = _item_index(raw_item, imap, n_items)
            if idx is not None:
                category[idx] = lab_index[c]
        if np.any(category < 0):
            raise DataFormatError(f"{desc['categories']}: {int((category < 0).sum())} items have no category")
    elif require_categories:
        raise DataFormatError(f"{path}: no category file configured, but categories are required")

    rmin = float(desc["reward_min"]) if "reward_min" in desc else float(min(logs["train"].rewards.min(), logs["test"].rewards.min()))
    rmax = float(desc["reward_max"]) if "reward_max" in desc else float(max(logs["train"].rewards.max(), logs["test"].rewards.max()))
    catalog = ItemCatalog.from_log(logs["train"], category)
    return Dataset(desc.get("name", path.stem), logs["train"], logs["test"], catalog, rmin, rmax)


def _dense_map(raw: list[str]) -> dict[str, int]:
    return {r: k for k, r in enumerate(sorted(set(raw), key=_natural_key))}


def _natural_key(s: str):
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


def _item_index(raw_item: str, imap: dict[str, int] | None, n_items: int) -> int | None:
    if imap is None:
        try:
            k = int(raw_item)
        except ValueError:
            raise DataFormatError(f"category file: non-integer item id {raw_item!r}") from None
        if not 0 <= k < n_items:
            raise DataFormatError(f"category file: item id {k} out of range [0, {n_items})")
        return k
    return imap.get(raw_item)


def save_dataset(ds: Dataset, directory: str | os.PathLike, name: str | None = None) -> Path:
    """Write ``ds`` as CSV files plus a descriptor; returns the descriptor path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, log in (("train", ds.train), ("test", ds.test)):
        with (directory / f"{split}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "item_id", "rating", "timestamp"])
            for row in zip(log.users, log.items, log.rewards, log.timestamps):
                w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), int(row[3])])
    desc = {
        "name": name or ds.name, "train": "train.csv", "test": "test.csv", "delimiter": ",",
        "user_col": "user_id", "item_col": "item_id", "reward_col": "rating",
        "timestamp_col": "timestamp", "reward_min": repr(ds.reward_min), "reward_max": repr(ds.reward_max),
        "n_users": ds.n_users, "n_items": ds.n_items,
    }
    if ds.catalog.has_categories:
        with (directory / "categories.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id", "category"])
            for i, c in enumerate(ds.catalog.category):
                w.writerow([i, int(c)])
        desc["categories"] = "categories.csv"
    out = directory / "dataset.desc"
    write_descriptor(out, desc)
    return out
