"""Detection records, IoU matching, train/test splitting and JSONL I/O."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

BOX_FIELDS = ("cx", "cy", "w", "h")
SAMPLE_FIELDS = ("score",) + BOX_FIELDS


class DataError(ValueError):
    """Raised for malformed or out-of-range input data."""


class FeatureSubset(enum.Enum):
    CONF_ONLY = "conf_only"
    CONF_POS = "conf_pos"
    CONF_SHAPE = "conf_shape"
    FULL = "full"

    @property
    def box_fields(self) -> tuple[str, ...]:
        return _SUBSET_BOX_FIELDS[self]

    @property
    def fields(self) -> tuple[str, ...]:
        """Selected raw inputs, confidence first."""
        return ("score",) + self.box_fields

    @classmethod
    def parse(cls, value: "str | FeatureSubset") -> "FeatureSubset":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            try:
                return cls[str(value).upper()]
            except KeyError:
                raise ValueError(f"unknown feature subset {value!r}") from None


_SUBSET_BOX_FIELDS = {
    FeatureSubset.CONF_ONLY: (),
    FeatureSubset.CONF_POS: ("cx", "cy"),
    FeatureSubset.CONF_SHAPE: ("w", "h"),
    FeatureSubset.FULL: BOX_FIELDS,
}


def _check_unit(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value)):
        raise DataError(f"{name} must be a finite number, got {value!r}")
    if not 0.0 <= value <= 1.0:
        raise DataError(f"{name}={value} outside [0, 1]")


def _check_box(cx: float, cy: float, w: float, h: float) -> None:
    for name, v in zip(BOX_FIELDS, (cx, cy, w, h)):
        _check_unit(name, v)
    if w <= 0 or h <= 0:
        raise DataError(f"box width and height must be positive, got w={w}, h={h}")


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    score: float
    cx: float
    cy: float
    w: float
    h: float
    category_id: int | None = None

    def __post_init__(self):
        _check_unit("score", self.score)
        _check_box(self.cx, self.cy, self.w, self.h)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    cx: float
    cy: float
    w: float
    h: float
    category_id: int | None = None

    def __post_init__(self):
        _check_box(self.cx, self.cy, self.w, self.h)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class MatchedSample:
    score: float
    cx: float
    cy: float
    w: float
    h: float
    matched: int
    image_id: str = ""

    def __post_init__(self):
        _check_unit("score", self.score)
        for name in BOX_FIELDS:
            _check_unit(name, getattr(self, name))
        if self.matched not in (0, 1):
            raise DataError(f"matched must be 0 or 1, got {self.matched!r}")


class SampleSet(Sequence[MatchedSample]):
    """Ordered, immutable collection of matched samples.

    Stored column-wise as read-only numpy arrays so that calibration code can
    work on whole columns; indexing yields :class:`MatchedSample` objects.
    """

    def __init__(
        self,
        score,
        cx,
        cy,
        w,
        h,
        matched,
        image_ids: Sequence[str] | None = None,
        iou_threshold: float = 0.5,
        provenance: str = "",
        validate: bool = True,
    ):
        cols = {}
        for name, values in zip(SAMPLE_FIELDS, (score, cx, cy, w, h)):
            arr = np.array(values, dtype=np.float64).reshape(-1)
            cols[name] = arr
        m = np.array(matched).reshape(-1)
        n = len(cols["score"])
        if any(len(a) != n for a in cols.values()) or len(m) != n:
            raise DataError("sample columns have different lengths")
        if validate:
            for name, arr in cols.items():
                bad = ~np.isfinite(arr) | (arr < 0.0) | (arr > 1.0)
                if bad.any():
                    i = int(np.flatnonzero(bad)[0])
                    raise DataError(f"sample {i}: {name}={arr[i]} outside [0, 1]")
            if not np.isin(m, (0, 1)).all():
                raise DataError("matched must be 0 or 1")
        if not 0.0 < iou_threshold <= 1.0:
            raise DataError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
        cols["matched"] = m.astype(np.int8)
        for arr in cols.values():
            arr.flags.writeable = False
        self._cols = cols
        self._image_ids = tuple(image_ids) if image_ids is not None else ("",) * n
        if len(self._image_ids) != n:
            raise DataError("image_ids length does not match samples")
        self.iou_threshold = float(iou_threshold)
        self.provenance = provenance

    @classmethod
    def from_samples(
        cls,
        samples: Iterable[MatchedSample],
        iou_threshold: float = 0.5,
        provenance: str = "",
    ) -> "SampleSet":
        samples = list(samples)
        return cls(
            *([getattr(s, f) for s in samples] for f in SAMPLE_FIELDS),
            matched=[s.matched for s in samples],
            image_ids=[s.image_id for s in samples],
            iou_threshold=iou_threshold,
            provenance=provenance,
            validate=False,
        )

    def __len__(self) -> int:
        return len(self._cols["score"])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(np.arange(len(self))[i])
        c = self._cols
        return MatchedSample(
            float(c["score"][i]),
            float(c["cx"][i]),
            float(c["cy"][i]),
            float(c["w"][i]),
            float(c["h"][i]),
            int(c["matched"][i]),
            self._image_ids[i],
        )

    def __iter__(self) -> Iterator[MatchedSample]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        # provenance is bookkeeping and does not take part in equality
        if not isinstance(other, SampleSet):
            return NotImplemented
        return (
            len(self) == len(other)
            and all(np.array_equal(self._cols[k], other._cols[k]) for k in self._cols)
            and self._image_ids == other._image_ids
            and self.iou_threshold == other.iou_threshold
        )

    def __repr__(self) -> str:
        return f"SampleSet(n={len(self)}, iou_threshold={self.iou_threshold}, provenance={self.provenance!r})"

    @property
    def samples(self) -> list[MatchedSample]:
        return list(self)

    @property
    def image_ids(self) -> tuple[str, ...]:
        return self._image_ids

    @property
    def matched(self) -> np.ndarray:
        return self._cols["matched"]

    def column(self, name: str) -> np.ndarray:
        return self._cols[name]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        """Stack the named columns into an ``(n, len(names))`` array."""
        return np.column_stack([self._cols[n] for n in names])

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        return SampleSet(
            *(self._cols[f][index] for f in SAMPLE_FIELDS),
            matched=self._cols["matched"][index],
            image_ids=[self._image_ids[i] for i in np.arange(len(self))[index]],
            iou_threshold=self.iou_threshold,
            provenance=self.provenance,
            validate=False,
        )

    def with_scores(self, scores) -> "SampleSet":
        """Copy with the confidence column replaced (e.g. by calibrated values)."""
        c = self._cols
        return SampleSet(
            scores, c["cx"], c["cy"], c["w"], c["h"], c["matched"],
            image_ids=self._image_ids,
            iou_threshold=self.iou_threshold,
            provenance=self.provenance,
        )

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(
            *(np.concatenate([self._cols[f], other._cols[f]]) for f in SAMPLE_FIELDS),
            matched=np.concatenate([self.matched, other.matched]),
            image_ids=self._image_ids + other._image_ids,
            iou_threshold=self.iou_threshold,
            provenance=self.provenance,
            validate=False,
        )


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two axis-aligned boxes given as (cx, cy, w, h)."""
    acx, acy, aw, ah = a
    bcx, bcy, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("boxes must have positive width and height")
    # 1-D overlap of [c - s/2, c + s/2] intervals; exact for identical boxes
    ix = min(aw, bw, (aw + bw) / 2 - abs(acx - bcx))
    iy = min(ah, bh, (ah + bh) / 2 - abs(acy - bcy))
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return min(1.0, max(0.0, inter / union))


def match_detections(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5,
    provenance: str = "",
) -> SampleSet:
    """Greedy one-to-one matching of detections to ground truth boxes.

    Per image, detections are visited in descending score order (stable for
    ties) and take the still-unmatched ground truth box of the same category
    with the highest IoU, provided it reaches ``iou_threshold``. IoU ties go to
    the ground truth box listed first. The output keeps the input order of
    ``dets``.
    """
    if not dets:
        raise DataError("no detections to match")
    if not 0.0 < iou_threshold <= 1.0:
        raise DataError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")

    gts_by_image: dict[str, list[GroundTruthBox]] = {}
    for g in gts:
        gts_by_image.setdefault(g.image_id, []).append(g)

    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gts_by_image.items()}
    matched = [0] * len(dets)
    for i in order:
        d = dets[i]
        candidates = gts_by_image.get(d.image_id, ())
        used = taken.get(d.image_id)
        best, best_iou = -1, -1.0
        for j, g in enumerate(candidates):
            if used[j] or g.category_id != d.category_id:
                continue
            v = iou(d.box, g.box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
            matched[i] = 1

    return SampleSet(
        [d.score for d in dets],
        [d.cx for d in dets],
        [d.cy for d in dets],
        [d.w for d in dets],
        [d.h for d in dets],
        matched,
        image_ids=[d.image_id for d in dets],
        iou_threshold=iou_threshold,
        provenance=provenance,
    )


def split_train_test(
    samples: SampleSet, train_fraction: float = 0.7, seed: int = 0
) -> tuple[SampleSet, SampleSet]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(samples)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise DataError(f"split of {n} samples at {train_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    # sorted indices keep the original relative order inside each split
    return samples.subset(np.sort(perm[:n_train])), samples.subset(np.sort(perm[n_train:]))


# --------------------------------------------------------------------------
# JSON lines I/O


def _parse_line(line: str, lineno: int, fields: Sequence[str], need_matched: bool) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    out = {"image_id": str(obj.get("image_id", ""))}
    if "img_w" in obj or "img_h" in obj:
        obj = _normalize_pixels(obj, lineno)
    for f in fields:
        if f not in obj:
            raise DataError(f"line {lineno}: missing field {f!r}")
        v = obj[f]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise DataError(f"line {lineno}: field {f!r} is not a finite number")
        if not 0.0 <= v <= 1.0:
            raise DataError(f"line {lineno}: field {f!r}={v} outside [0, 1]")
        out[f] = float(v)
    if need_matched:
        if "matched" not in obj:
            raise DataError(f"line {lineno}: missing field 'matched'")
        if obj["matched"] not in (0, 1) or isinstance(obj["matched"], float):
            raise DataError(f"line {lineno}: field 'matched' must be 0 or 1")
        out["matched"] = int(obj["matched"])
    cat = obj.get("category_id")
    if cat is not None and (isinstance(cat, bool) or not isinstance(cat, int)):
        raise DataError(f"line {lineno}: field 'category_id' must be an integer")
    out["category_id"] = cat
    return out


def _normalize_pixels(obj: dict, lineno: int) -> dict:
    """Convert absolute pixel boxes to relative ones using img_w/img_h."""
    try:
        img_w, img_h = float(obj["img_w"]), float(obj["img_h"])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"line {lineno}: 'img_w' and 'img_h' must both be numbers") from None
    if not (img_w > 0 and img_h > 0):
        raise DataError(f"line {lineno}: image size must be positive")
    obj = dict(obj)
    for f, scale in (("cx", img_w), ("w", img_w), ("cy", img_h), ("h", img_h)):
        if isinstance(obj.get(f), (int, float)) and not isinstance(obj.get(f), bool):
            obj[f] = obj[f] / scale
    return obj


def _read_rows(path, fields, need_matched) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rows.append(_parse_line(line, lineno, fields, need_matched))
    return rows


def load_samples(path, iou_threshold: float = 0.5) -> SampleSet:
    rows = _read_rows(path, SAMPLE_FIELDS, need_matched=True)
    if not rows:
        raise DataError(f"{path}: no samples")
    return SampleSet(
        *([r[f] for r in rows] for f in SAMPLE_FIELDS),
        matched=[r["matched"] for r in rows],
        image_ids=[r["image_id"] for r in rows],
        iou_threshold=iou_threshold,
        provenance=str(path),
    )


def save_samples(samples: SampleSet, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "image_id": s.image_id,
                "score": s.score,
                "cx": s.cx,
                "cy": s.cy,
                "w": s.w,
                "h": s.h,
                "matched": s.matched,
            }) + "\n")
    tmp.replace(path)


def load_detections(path) -> list[DetectionRecord]:
    rows = _read_rows(path, SAMPLE_FIELDS, need_matched=False)
    try:
        return [
            DetectionRecord(r["image_id"], r["score"], r["cx"], r["cy"], r["w"], r["h"], r["category_id"])
            for r in rows
        ]
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_ground_truth(path) -> list[GroundTruthBox]:
    rows = _read_rows(path, BOX_FIELDS, need_matched=False)
    try:
        return [GroundTruthBox(r["image_id"], r["cx"], r["cy"], r["w"], r["h"], r["category_id"]) for r in rows]
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
