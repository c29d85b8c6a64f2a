"""Dataset loading, validation, and synthetic dataset generation.

File formats (all human-inspectable text):
  * label set — plain UTF-8 text, one label per line;
  * scores — newline-delimited JSON, one object per item:
    ``{"item_id": str, "truth": str, "image_ref": str|null, "scores": [float, ...]}``;
  * exemplar listing — newline-delimited JSON: ``{"label": str, "refs": [str, ...]}``;
  * manifest — a JSON document naming the three files plus a split tag.

Loads are atomic: the first violation raises and nothing partial is
returned.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import LabelSet, entropy, normalize_label, softmax
from .errors import ValidationError
from .prompts import ExemplarBank

SPLITS = ("test", "validation")

# Synthetic score vectors follow a geometric probability profile; per-item
# peakedness is drawn so softmax(T=1) entropies spread uniformly across this
# band (as fractions of ln N), keeping threshold sweeps informative.
SYNTH_ENTROPY_BAND = (0.1, 0.9)
_SYNTH_BETA_GRID_SIZE = 512


@dataclass(eq=False)
class ScoreRecord:
    """One item's raw base-scorer scores over the label set plus its truth."""

    item_id: str
    raw_scores: np.ndarray
    truth: int
    image_ref: str | None = None

    def __post_init__(self) -> None:
        self.raw_scores = np.asarray(self.raw_scores, dtype=np.float64)
        if self.raw_scores.ndim != 1 or self.raw_scores.size == 0:
            raise ValidationError(f"item {self.item_id!r}: scores must be a non-empty 1-D vector")
        if not np.all(np.isfinite(self.raw_scores)):
            bad = int(np.flatnonzero(~np.isfinite(self.raw_scores))[0])
            raise ValidationError(f"item {self.item_id!r}: score at index {bad} is not finite")
        if not 0 <= self.truth < self.raw_scores.size:
            raise ValidationError(f"item {self.item_id!r}: truth index {self.truth} out of range")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScoreRecord):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.truth == other.truth
            and self.image_ref == other.image_ref
            and np.array_equal(self.raw_scores, other.raw_scores)
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Paths to one dataset's files, resolved and existence-checked."""

    name: str
    label_set_path: Path
    scores_path: Path
    exemplars_path: Path | None
    split: str


def load_label_set(path: str | Path) -> LabelSet:
    """Read a one-label-per-line UTF-8 file into a LabelSet.

    Blank lines are skipped. Duplicates after canonical normalization are
    rejected with both line numbers.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"label set file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path}: not valid UTF-8: {exc}") from exc
    labels: list[str] = []
    first_line: dict[str, int] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        label = raw_line.strip()
        if not label:
            continue
        key = normalize_label(label)
        if key in first_line:
            raise ValidationError(
                f"{path}: duplicate label {label!r} on lines {first_line[key]} and {lineno}"
            )
        first_line[key] = lineno
        labels.append(label)
    if not labels:
        raise ValidationError(f"{path}: label set file is empty")
    return LabelSet(labels=tuple(labels))


def load_scores(path: str | Path, labels: LabelSet) -> list[ScoreRecord]:
    """Read newline-delimited score records, validated against the label set.

    Each record's width must match the vocabulary, every score must be
    finite, the truth label must resolve to a known index, and item ids must
    be unique.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"scores file not found: {path}")
    records: list[ScoreRecord] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("item_id", "truth", "scores"):
                if key not in obj:
                    raise ValidationError(f"{path}:{lineno}: record missing {key!r}")
            item_id = str(obj["item_id"])
            if item_id in seen_ids:
                raise ValidationError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
            seen_ids.add(item_id)
            scores = obj["scores"]
            if len(scores) != len(labels):
                raise ValidationError(
                    f"{path}:{lineno}: item {item_id!r} has {len(scores)} scores, "
                    f"label set has {len(labels)}"
                )
            truth_index = labels.index_of(str(obj["truth"]))
            if truth_index is None:
                raise ValidationError(
                    f"{path}:{lineno}: item {item_id!r} truth label {obj['truth']!r} "
                    f"is not in the label set"
                )
            records.append(
                ScoreRecord(
                    item_id=item_id,
                    raw_scores=np.asarray(scores, dtype=np.float64),
                    truth=truth_index,
                    image_ref=obj.get("image_ref"),
                )
            )
    if not records:
        raise ValidationError(f"{path}: scores file is empty")
    return records


def save_scores(records: Sequence[ScoreRecord], labels: LabelSet, path: str | Path) -> None:
    """Write records as newline-delimited JSON with truth as a label string."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(
                json.dumps(
                    {
                        "item_id": record.item_id,
                        "truth": labels[record.truth],
                        "image_ref": record.image_ref,
                        "scores": [float(s) for s in record.raw_scores],
                    },
                    separators=(", ", ": "),
                )
                + "\n"
            )


def save_label_set(labels: LabelSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{label}\n" for label in labels), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a dataset manifest; referenced paths resolve relative to it."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: invalid manifest: {exc}") from exc
    for key in ("name", "label_set", "scores", "split"):
        if key not in obj:
            raise ValidationError(f"{path}: manifest missing {key!r}")
    if obj["split"] not in SPLITS:
        raise ValidationError(f"{path}: split must be one of {SPLITS}, got {obj['split']!r}")
    base = path.parent

    def resolve(key: str) -> Path:
        candidate = (base / obj[key]).resolve()
        if not candidate.exists():
            raise ValidationError(f"{path}: {key} file does not exist: {candidate}")
        return candidate

    exemplars = resolve("exemplars") if obj.get("exemplars") else None
    return DatasetManifest(
        name=str(obj["name"]),
        label_set_path=resolve("label_set"),
        scores_path=resolve("scores"),
        exemplars_path=exemplars,
        split=obj["split"],
    )


def load_dataset(manifest: DatasetManifest) -> tuple[LabelSet, list[ScoreRecord]]:
    """Load and cross-validate a manifest's label set and score records."""
    labels = load_label_set(manifest.label_set_path)
    records = load_scores(manifest.scores_path, labels)
    return labels, records


def load_exemplar_listing(path: str | Path) -> dict[str, list[str]]:
    """Read a newline-delimited exemplar listing into label -> refs.

    Repeated lines for a label extend its ref pool.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"exemplar listing not found: {path}")
    refs_by_label: dict[str, list[str]] = {}
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "label" not in obj or "refs" not in obj:
                raise ValidationError(f"{path}:{lineno}: listing record needs 'label' and 'refs'")
            refs_by_label.setdefault(str(obj["label"]), []).extend(str(r) for r in obj["refs"])
    return refs_by_label


def _label_rng(seed: int, label: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}\x1f{label}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def build_exemplar_bank(
    refs_by_label: Mapping[str, Sequence[str]],
    labels: LabelSet,
    shots_per_class: int,
    seed: int,
) -> ExemplarBank:
    """Select ``shots_per_class`` exemplars per label, seeded and stable.

    Selection is uniform without replacement, with an independent RNG stream
    per label (derived from the seed and the label), so the bank does not
    depend on label iteration order. An under-covered label raises, naming
    it. ``shots_per_class=0`` yields an accepted empty bank.
    """
    if shots_per_class < 0:
        raise ValidationError(f"shots_per_class must be >= 0, got {shots_per_class}")
    if shots_per_class == 0:
        return ExemplarBank(refs_by_label={}, seed=seed, shots_per_class=0)
    normalized_pool = {normalize_label(k): v for k, v in refs_by_label.items()}
    selected: dict[str, tuple[str, ...]] = {}
    for label in labels:
        pool = refs_by_label.get(label)
        if pool is None:
            pool = normalized_pool.get(normalize_label(label))
        if pool is None or len(pool) < shots_per_class:
            have = 0 if pool is None else len(pool)
            raise ValidationError(
                f"label {label!r} has {have} exemplars, need {shots_per_class}"
            )
        rng = _label_rng(seed, label)
        selected[label] = tuple(rng.sample(list(pool), shots_per_class))
    return ExemplarBank(refs_by_label=selected, seed=seed, shots_per_class=shots_per_class)


def _entropy_to_beta_grid(n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Monotone (entropy, beta) grid for the geometric profile p_i ~ exp(-beta*i)."""
    lo, hi = 1e-4, 60.0 / max(n_classes - 1, 1)
    # Widen until the grid straddles the target entropy band.
    ranks = np.arange(n_classes, dtype=np.float64)
    ln_n = math.log(n_classes)

    def h(beta: float) -> float:
        return entropy(softmax(-beta * ranks))

    while h(lo) < SYNTH_ENTROPY_BAND[1] * ln_n and lo > 1e-12:
        lo /= 2.0
    while h(hi) > SYNTH_ENTROPY_BAND[0] * ln_n and hi < 1e6:
        hi *= 2.0
    betas = np.geomspace(lo, hi, _SYNTH_BETA_GRID_SIZE)
    entropies = np.array([h(b) for b in betas])
    # Entropy decreases with beta; flip so np.interp sees ascending x.
    return entropies[::-1], betas[::-1]


def synthesize_dataset(
    n_items: int,
    n_classes: int,
    target_top1: float,
    target_topk: tuple[int, float],
    seed: int = 0,
) -> tuple[LabelSet, list[ScoreRecord]]:
    """Generate score records with planted top-1 / top-k accuracy.

    Per item the truth's rank is placed explicitly: rank 1 with probability
    ``target_top1``, uniformly within ranks 2..k with probability
    ``target_topk[1] - target_top1``, else uniformly within ranks
    k+1..n_classes, so empirical top-1/top-k rates converge on the targets.
    Score vectors are geometric profiles with per-item peakedness, giving
    non-uniform, non-one-hot distributions whose entropies spread across the
    interior of [0, ln n_classes].

    Raises on infeasible targets (e.g. mass between top-1 and top-k when
    k < 2, or mass beyond top-k when k >= n_classes).
    """
    k, target_rate = target_topk
    if n_items < 1:
        raise ValidationError(f"n_items must be >= 1, got {n_items}")
    if n_classes < 2:
        raise ValidationError(f"n_classes must be >= 2, got {n_classes}")
    if not (0.0 <= target_top1 <= target_rate <= 1.0):
        raise ValidationError(
            f"need 0 <= top1 <= topk rate <= 1, got top1={target_top1}, topk={target_rate}"
        )
    if not 1 <= k <= n_classes:
        raise ValidationError(f"k must be in [1, {n_classes}], got {k}")
    if target_rate > target_top1 and k < 2:
        raise ValidationError("topk rate above top1 requires k >= 2")
    if target_rate < 1.0 and k >= n_classes:
        raise ValidationError("misses beyond top-k require k < n_classes")

    width = len(str(n_classes - 1))
    labels = LabelSet(labels=tuple(f"class_{i:0{width}d}" for i in range(n_classes)))
    entropies_grid, betas_grid = _entropy_to_beta_grid(n_classes)
    ln_n = math.log(n_classes)
    rng = np.random.default_rng(seed)
    ranks = np.arange(n_classes, dtype=np.float64)

    records: list[ScoreRecord] = []
    id_width = len(str(n_items - 1))
    for i in range(n_items):
        u = rng.random()
        if u < target_top1:
            truth_rank = 0
        elif u < target_rate:
            truth_rank = int(rng.integers(1, k))
        else:
            truth_rank = int(rng.integers(k, n_classes))
        truth = int(rng.integers(0, n_classes))

        fraction = SYNTH_ENTROPY_BAND[0] + (SYNTH_ENTROPY_BAND[1] - SYNTH_ENTROPY_BAND[0]) * rng.random()
        beta = float(np.interp(fraction * ln_n, entropies_grid, betas_grid))

        permutation = rng.permutation(n_classes)
        current = int(np.flatnonzero(permutation == truth)[0])
        permutation[current], permutation[truth_rank] = permutation[truth_rank], permutation[current]

        scores = np.empty(n_classes, dtype=np.float64)
        scores[permutation] = -beta * ranks

        item_id = f"item_{i:0{id_width}d}"
        records.append(
            ScoreRecord(
                item_id=item_id,
                raw_scores=scores,
                truth=truth,
                image_ref=f"synthetic://{item_id}",
            )
        )
    return labels, records


def synthesize_exemplar_listing(labels: Iterable[str], per_label: int = 3) -> dict[str, list[str]]:
    """Opaque synthetic exemplar refs, enough to cover few-shot rendering."""
    return {
        label: [f"synthetic://exemplar/{label}/{j}" for j in range(per_label)]
        for label in labels
    }
