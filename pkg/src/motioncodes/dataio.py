"""Loading, normalizing, and synthesizing frame-wise motion sequences.

Real data arrives as delimited numeric tables (one frame per line) described
by a plain-text manifest; synthetic data is generated from a small set of
waveform primitives so the whole pipeline can be exercised at desk scale.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "test")


class ParseError(ValueError):
    """A sequence file or manifest that cannot be read; names file and line."""


@dataclass
class MotionSequence:
    """One recorded sequence: n_f frames of n_j channels, optionally labeled."""

    sequence_id: str
    subject_id: str
    sample_rate: float
    frames: np.ndarray  # (n_f, n_j)
    labels: np.ndarray | None = None  # (n_f,) int
    split: str = "train"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 2:
            raise ValueError(
                f"sequence {self.sequence_id!r} needs a 2-D frame matrix with >= 2 frames, "
                f"got shape {self.frames.shape}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"sequence {self.sequence_id!r} contains non-finite frame values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.frames.shape[0],):
                raise ValueError(
                    f"sequence {self.sequence_id!r}: {len(self.labels)} labels for "
                    f"{self.frames.shape[0]} frames"
                )
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_channels(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class TableSpec:
    """How to read one delimited numeric table."""

    columns: tuple[int, ...]
    delimiter: str = "auto"  # auto | comma | tab | space
    label_column: int | None = None
    sample_rate: float = 30.0


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    sequence_id: str
    subject_id: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    table: TableSpec
    entries: list[ManifestEntry] = field(default_factory=list)

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ParseError(f"{path}: manifest not found or empty")
        if "dataset" not in parser:
            raise ParseError(f"{path}: missing [dataset] section")
        ds = parser["dataset"]
        known = {"columns", "delimiter", "label_column", "sample_rate"}
        unknown = set(ds) - known
        if unknown:
            raise ParseError(f"{path}: unknown [dataset] keys {sorted(unknown)}")
        try:
            columns = tuple(int(c) for c in ds["columns"].split(",") if c.strip() != "")
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}: [dataset] columns must be a comma list of ints") from exc
        label_column = ds.getint("label_column") if "label_column" in ds else None
        table = TableSpec(
            columns=columns,
            delimiter=ds.get("delimiter", "auto"),
            label_column=label_column,
            sample_rate=ds.getfloat("sample_rate", 30.0),
        )
        entries = []
        for section in parser.sections():
            if section == "dataset":
                continue
            if not section.startswith("sequence."):
                raise ParseError(f"{path}: unexpected section [{section}]")
            sec = parser[section]
            unknown = set(sec) - {"path", "subject", "split"}
            if unknown:
                raise ParseError(f"{path}: unknown keys {sorted(unknown)} in [{section}]")
            entries.append(
                ManifestEntry(
                    path=sec["path"],
                    sequence_id=section[len("sequence.") :],
                    subject_id=sec.get("subject", "unknown"),
                    split=sec.get("split", "train"),
                )
            )
        return cls(root=path.parent, table=table, entries=entries)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        lines = ["[dataset]"]
        lines.append("columns = " + ",".join(str(c) for c in self.table.columns))
        lines.append(f"delimiter = {self.table.delimiter}")
        if self.table.label_column is not None:
            lines.append(f"label_column = {self.table.label_column}")
        lines.append(f"sample_rate = {self.table.sample_rate:g}")
        for e in self.entries:
            lines.append("")
            lines.append(f"[sequence.{e.sequence_id}]")
            lines.append(f"path = {e.path}")
            lines.append(f"subject = {e.subject_id}")
            lines.append(f"split = {e.split}")
        path.write_text("\n".join(lines) + "\n")


def _split_line(line: str, delimiter: str) -> list[str]:
    if delimiter == "comma":
        return [c.strip() for c in line.split(",")]
    if delimiter == "tab":
        return line.split("\t")
    return line.split()


def _detect_delimiter(line: str) -> str:
    if "," in line:
        return "comma"
    if "\t" in line:
        return "tab"
    return "space"


def load_sequence(
    path: str | Path,
    table: TableSpec,
    *,
    sequence_id: str = "",
    subject_id: str = "",
    split: str = "train",
) -> MotionSequence:
    """Parse one delimited table into a MotionSequence.

    Columns are picked in the order given by ``table.columns``; a label
    column, when configured, is read as integer class indices. Ragged rows
    and non-numeric cells fail with the 1-based line number.
    """
    path = Path(path)
    raw_lines = path.read_text().splitlines()
    delimiter = table.delimiter
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        if delimiter == "auto":
            delimiter = _detect_delimiter(line)
        cells = _split_line(line, delimiter)
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise ParseError(f"{path}:{lineno}: ragged row ({len(cells)} cells, expected {width})")
        needed = max(table.columns) if table.columns else -1
        if table.label_column is not None:
            needed = max(needed, table.label_column)
        if needed >= len(cells):
            raise ParseError(
                f"{path}:{lineno}: row has {len(cells)} columns, column {needed} requested"
            )
        try:
            rows.append([float(cells[c]) for c in table.columns])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric cell: {exc}") from exc
        if table.label_column is not None:
            cell = cells[table.label_column]
            try:
                labels.append(int(float(cell)))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric label {cell!r}") from exc
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return MotionSequence(
        sequence_id=sequence_id or path.stem,
        subject_id=subject_id,
        sample_rate=table.sample_rate,
        frames=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64) if labels else None,
        split=split,
    )


def load_dataset(manifest: DatasetManifest) -> list[MotionSequence]:
    """Load every manifest entry; all sequences must agree on channel count."""
    sequences = []
    for entry in manifest.entries:
        seq = load_sequence(
            manifest.root / entry.path,
            manifest.table,
            sequence_id=entry.sequence_id,
            subject_id=entry.subject_id,
            split=entry.split,
        )
        sequences.append(seq)
    widths = {s.n_channels for s in sequences}
    if len(widths) > 1:
        raise ParseError(f"sequences disagree on channel count after selection: {sorted(widths)}")
    return sequences


@dataclass
class NormalizationStats:
    """Per-channel affine statistics, fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, sequences: list[MotionSequence]) -> "NormalizationStats":
        train = [s for s in sequences if s.split == "train"]
        if not train:
            raise ValueError("no training sequences to fit normalization stats")
        stacked = np.concatenate([s.frames for s in train], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        constant = std <= 0
        if constant.any():
            log.warning(
                "channels %s are constant on the train split; using sigma=1",
                np.flatnonzero(constant).tolist(),
            )
            std = np.where(constant, 1.0, std)
        return cls(mean=mean, std=std)

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean) / self.std

    def invert(self, frames: np.ndarray) -> np.ndarray:
        return frames * self.std + self.mean


def normalize(seq: MotionSequence, stats: NormalizationStats) -> MotionSequence:
    if stats.mean.shape[0] != seq.n_channels:
        raise ValueError(
            f"stats cover {stats.mean.shape[0]} channels, sequence has {seq.n_channels}"
        )
    return replace(seq, frames=stats.apply(seq.frames))


# ---------------------------------------------------------------------------
# Synthetic motion


@dataclass(frozen=True)
class MotionPrimitive:
    """A channel-wise waveform playable for a random duration."""

    name: str
    kind: str  # hold | ramp | sinusoid
    amplitude: float = 1.0
    period: float = 40.0
    level: float = 0.0
    channel_gains: tuple[float, ...] | None = None
    duration: tuple[int, int] = (30, 60)

    def render(self, n_frames: int, n_channels: int, scale: float = 1.0) -> np.ndarray:
        t = np.arange(n_frames, dtype=np.float64)
        if self.kind == "hold":
            base = np.full(n_frames, self.level)
        elif self.kind == "ramp":
            base = self.level + self.amplitude * (t / max(n_frames - 1, 1))
        elif self.kind == "sinusoid":
            base = self.level + self.amplitude * np.sin(2 * np.pi * t / self.period)
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        gains = self.channel_gains
        if gains is None:
            gains = tuple(1.0 for _ in range(n_channels))
        if len(gains) != n_channels:
            raise ValueError(
                f"primitive {self.name!r} has {len(gains)} channel gains for {n_channels} channels"
            )
        return scale * base[:, None] * np.asarray(gains)[None, :]


@dataclass
class SyntheticConfig:
    primitives: list[MotionPrimitive]
    n_channels: int = 4
    subjects: dict[str, tuple[int, ...]] = field(default_factory=dict)
    subject_scale: dict[str, float] = field(default_factory=dict)
    train_per_subject: int = 4
    test_per_subject: int = 2
    target_frames: int = 600
    sample_rate: float = 30.0

    def validate(self) -> None:
        if not self.primitives:
            raise ValueError("primitive set must be non-empty")
        for prim in self.primitives:
            lo, hi = prim.duration
            if not (1 <= lo <= hi):
                raise ValueError(f"primitive {prim.name!r}: bad duration range {prim.duration}")
        for subject, chosen in self.subjects.items():
            if not chosen:
                raise ValueError(f"subject {subject!r} has an empty primitive subset")
            if any(i < 0 or i >= len(self.primitives) for i in chosen):
                raise ValueError(f"subject {subject!r} references an unknown primitive")


def default_synthetic_config() -> SyntheticConfig:
    """Two subjects with overlapping but non-identical primitive repertoires."""
    prims = [
        MotionPrimitive("rest", "hold", level=0.2, channel_gains=(1.0, -0.5, 0.8, 0.3), duration=(25, 45)),
        MotionPrimitive("sway", "sinusoid", amplitude=1.0, period=37.0, channel_gains=(1.0, 0.6, -0.9, 0.2), duration=(35, 70)),
        MotionPrimitive("reach", "ramp", amplitude=1.6, level=-0.8, channel_gains=(0.4, 1.0, 0.5, -0.7), duration=(25, 50)),
        MotionPrimitive("shake", "sinusoid", amplitude=0.8, period=13.0, channel_gains=(-0.3, 0.8, 1.0, 0.9), duration=(30, 60)),
    ]
    return SyntheticConfig(
        primitives=prims,
        n_channels=4,
        subjects={"A": (0, 1, 2), "B": (1, 2, 3)},
        subject_scale={"A": 1.0, "B": 1.25},
    )


GeneratorLog = dict[str, list[tuple[int, int, int]]]


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[list[MotionSequence], GeneratorLog]:
    """Concatenate random primitives into labeled sequences.

    Every sequence starts with a permutation of its subject's repertoire, so
    each available primitive occurs at least once; remaining room is filled
    with uniform draws. The returned log holds the concatenation points
    (start, end, primitive index) per sequence and is the ground-truth oracle
    for segmentation tests.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    sequences: list[MotionSequence] = []
    logbook: GeneratorLog = {}
    for subject in sorted(config.subjects):
        chosen = config.subjects[subject]
        scale = config.subject_scale.get(subject, 1.0)
        counts = [("train", config.train_per_subject), ("test", config.test_per_subject)]
        for split, count in counts:
            for k in range(count):
                seq_id = f"{subject}_{split}{k:02d}"
                frames = np.zeros((0, config.n_channels))
                labels: list[int] = []
                segments: list[tuple[int, int, int]] = []
                order = list(rng.permutation(np.array(chosen)))
                while frames.shape[0] < config.target_frames:
                    prim_idx = int(order.pop(0)) if order else int(rng.choice(np.array(chosen)))
                    prim = config.primitives[prim_idx]
                    dur = int(rng.integers(prim.duration[0], prim.duration[1] + 1))
                    start = frames.shape[0]
                    frames = np.concatenate(
                        [frames, prim.render(dur, config.n_channels, scale)], axis=0
                    )
                    labels.extend([prim_idx] * dur)
                    segments.append((start, frames.shape[0], prim_idx))
                if frames.shape[0] > config.target_frames:
                    frames = frames[: config.target_frames]
                    labels = labels[: config.target_frames]
                    last = segments[-1]
                    segments[-1] = (last[0], config.target_frames, last[2])
                sequences.append(
                    MotionSequence(
                        sequence_id=seq_id,
                        subject_id=subject,
                        sample_rate=config.sample_rate,
                        frames=frames,
                        labels=np.array(labels),
                        split=split,
                    )
                )
                logbook[seq_id] = segments
    return sequences, logbook


def write_dataset(
    sequences: list[MotionSequence],
    out_dir: str | Path,
    *,
    sample_rate: float | None = None,
) -> Path:
    """Write sequences as whitespace tables plus a manifest; returns manifest path.

    Labels, when present, go in an extra last column so the manifest's
    label_column points back at them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_channels = sequences[0].n_channels
    has_labels = all(s.labels is not None for s in sequences)
    entries = []
    for seq in sequences:
        fname = f"{seq.sequence_id}.txt"
        with open(out_dir / fname, "w") as fh:
            for i in range(seq.n_frames):
                cells = [f"{v:.9g}" for v in seq.frames[i]]
                if has_labels:
                    cells.append(str(int(seq.labels[i])))
                fh.write(" ".join(cells) + "\n")
        entries.append(
            ManifestEntry(path=fname, sequence_id=seq.sequence_id, subject_id=seq.subject_id, split=seq.split)
        )
    table = TableSpec(
        columns=tuple(range(n_channels)),
        delimiter="space",
        label_column=n_channels if has_labels else None,
        sample_rate=sample_rate if sample_rate is not None else sequences[0].sample_rate,
    )
    manifest = DatasetManifest(root=out_dir, table=table, entries=entries)
    manifest_path = out_dir / "manifest.ini"
    manifest.write(manifest_path)
    return manifest_path
