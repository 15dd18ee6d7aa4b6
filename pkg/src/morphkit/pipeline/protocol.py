"""Pair protocol CSV: ``pair_id,img_a,img_b,lmk_a,lmk_b``."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

COLUMNS = ["pair_id", "img_a", "img_b", "lmk_a", "lmk_b"]


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class MorphPair:
    pair_id: str
    img_a: str
    img_b: str
    lmk_a: str
    lmk_b: str

    @property
    def subject_a(self) -> str:
        return subject_id(self.img_a)

    @property
    def subject_b(self) -> str:
        return subject_id(self.img_b)

    def missing(self) -> list[str]:
        return [p for p in (self.img_a, self.img_b, self.lmk_a, self.lmk_b) if not os.path.isfile(p)]


def subject_id(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def read_protocol(path, root=None) -> list[MorphPair]:
    """Parse the protocol, resolving relative paths against ``root`` (default: the CSV's folder)."""
    root = os.path.dirname(os.path.abspath(path)) if root is None else root
    pairs, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != COLUMNS:
            raise ProtocolError(f"{path}: header must be {','.join(COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            vals = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            if any(not vals.get(c) for c in COLUMNS):
                raise ProtocolError(f"{path}: line {lineno}: empty field")
            if vals["pair_id"] in seen:
                raise ProtocolError(f"{path}: line {lineno}: duplicate pair id {vals['pair_id']!r}")
            seen.add(vals["pair_id"])
            fix = {c: os.path.normpath(os.path.join(root, vals[c])) for c in COLUMNS[1:]}
            pair = MorphPair(vals["pair_id"], **fix)
            if pair.subject_a == pair.subject_b:
                raise ProtocolError(f"{path}: line {lineno}: pair {pair.pair_id} uses one subject twice")
            pairs.append(pair)
    if not pairs:
        raise ProtocolError(f"{path}: no pairs")
    return pairs


def write_protocol(path, pairs: list[MorphPair], root=None):
    root = os.path.dirname(os.path.abspath(path)) if root is None else root
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for p in pairs:
            w.writerow([p.pair_id] + [os.path.relpath(getattr(p, c), root) for c in COLUMNS[1:]])
