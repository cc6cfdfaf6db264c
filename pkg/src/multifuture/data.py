"""Annotation parsing, scene windowing, displacement encoding and synthetic scenes."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

DEFAULT_LAYOUT = ("frame", "ped_id", "x", "y")

SYNTH_KINDS = ("linear", "y_fork", "t_junction")


class DataError(Exception):
    """Base class for problems with input trajectories."""


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class IntegrityError(DataError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Scene:
    """Flat annotation table sorted by (ped_id, frame).

    ``labels`` is optional per-pedestrian metadata; the synthetic generator uses
    it to record which branch a walker took.
    """

    frames: np.ndarray
    ped_ids: np.ndarray
    xy: np.ndarray
    dt: float = 0.4
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.ped_ids = np.asarray(self.ped_ids, dtype=np.int64).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if not (len(self.frames) == len(self.ped_ids) == len(self.xy)):
            raise IntegrityError("frames, ped_ids and xy must have equal length")
        order = np.lexsort((self.frames, self.ped_ids))
        self.frames = self.frames[order]
        self.ped_ids = self.ped_ids[order]
        self.xy = self.xy[order]
        if len(self.frames) > 1:
            same = (np.diff(self.ped_ids) == 0) & (np.diff(self.frames) == 0)
            if same.any():
                i = int(np.flatnonzero(same)[0])
                raise IntegrityError(
                    f"duplicate annotation for frame {self.frames[i]}, ped {self.ped_ids[i]}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def pedestrians(self) -> np.ndarray:
        return np.unique(self.ped_ids)

    def track(self, ped_id: int) -> tuple[np.ndarray, np.ndarray]:
        sel = self.ped_ids == ped_id
        return self.frames[sel], self.xy[sel]

    def tracks(self) -> list[np.ndarray]:
        """Position sequences, one per pedestrian."""
        return [self.track(p)[1] for p in self.pedestrians]


@dataclass
class SceneWindow:
    ped_ids: list
    abs_positions: np.ndarray
    displacements: np.ndarray
    t_obs: int
    t_pred: int
    start_frame: int = 0

    @property
    def n_peds(self) -> int:
        return self.abs_positions.shape[0]

    @property
    def observed(self) -> np.ndarray:
        return self.abs_positions[:, : self.t_obs]

    @property
    def future(self) -> np.ndarray:
        return self.abs_positions[:, self.t_obs :]


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "linear"
    n_peds: int = 1
    n_windows: int = 8
    noise_std: float = 0.0
    seed: int = 0
    speed: float = 0.5
    t_obs: int = 8
    t_pred: int = 12


def parse_annotations(
    stream: TextIO | str, layout: Sequence[str] = DEFAULT_LAYOUT, dt: float = 0.4
) -> Scene:
    """Read whitespace-separated annotation records.

    ``layout`` names the meaning of the four columns; it must be a permutation
    of ``frame, ped_id, x, y``.
    """
    if sorted(layout) != sorted(DEFAULT_LAYOUT):
        raise ConfigError(f"layout must be a permutation of {DEFAULT_LAYOUT}, got {layout}")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    col = {name: i for i, name in enumerate(layout)}
    frames, peds, xy = [], [], []
    for line_no, line in enumerate(stream, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise ParseError(line_no, f"expected 4 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields]
        except ValueError as exc:
            raise ParseError(line_no, str(exc)) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError(line_no, "non-finite value")
        frame, ped = values[col["frame"]], values[col["ped_id"]]
        if frame != int(frame) or ped != int(ped):
            raise ParseError(line_no, "frame and ped_id must be integers")
        frames.append(int(frame))
        peds.append(int(ped))
        xy.append((values[col["x"]], values[col["y"]]))
    return Scene(frames, peds, np.asarray(xy, dtype=np.float64).reshape(-1, 2), dt=dt)


def write_annotations(scene: Scene, stream: TextIO) -> None:
    order = np.lexsort((scene.ped_ids, scene.frames))
    for i in order:
        x, y = (float(v) for v in scene.xy[i])
        stream.write(f"{scene.frames[i]}\t{scene.ped_ids[i]}\t{x!r}\t{y!r}\n")


def _frame_step(frames: np.ndarray) -> int:
    uniq = np.unique(frames)
    if len(uniq) < 2:
        return 1
    return int(np.diff(uniq).min())


def build_windows(
    scene: Scene, t_obs: int = 8, t_pred: int = 12, stride: int | None = None
) -> list[SceneWindow]:
    """Cut a scene into fixed-length windows of fully present pedestrians.

    Window starts advance by ``stride`` frame ticks (default: one full window,
    i.e. non-overlapping). A pedestrian joins a window only if annotated at
    every one of its ``t_obs + t_pred`` frames.
    """
    if t_obs < 1 or t_pred < 1:
        raise ConfigError("t_obs and t_pred must be >= 1")
    total = t_obs + t_pred
    stride = total if stride is None else stride
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if len(scene) == 0:
        return []
    step = _frame_step(scene.frames)
    first, last = int(scene.frames.min()), int(scene.frames.max())

    tracks = {}
    for pid in scene.pedestrians:
        frames, xy = scene.track(pid)
        tracks[int(pid)] = dict(zip(frames.tolist(), map(tuple, xy)))

    windows = []
    start = first
    while start + (total - 1) * step <= last:
        wanted = [start + i * step for i in range(total)]
        ids, positions = [], []
        for pid, by_frame in tracks.items():
            if all(f in by_frame for f in wanted):
                ids.append(pid)
                positions.append([by_frame[f] for f in wanted])
        if ids:
            pos = np.asarray(positions, dtype=np.float64)
            windows.append(
                SceneWindow(ids, pos, to_displacements(pos), t_obs, t_pred, start_frame=start)
            )
        start += stride * step
    return windows


def to_displacements(abs_positions: np.ndarray) -> np.ndarray:
    pos = np.asarray(abs_positions, dtype=np.float64)
    out = np.zeros_like(pos)
    out[..., 1:, :] = pos[..., 1:, :] - pos[..., :-1, :]
    return out


def reconstruct_absolute(displacements: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_displacements`: running sum anchored at ``start``.

    Summation is strictly sequential, so ``start + d1 + d2 ...`` reproduces
    each original point whenever the forward differences were exact.
    """
    disp = np.asarray(displacements, dtype=np.float64)
    seq = disp.copy()
    seq[..., 0, :] = np.asarray(start, dtype=np.float64)
    return np.cumsum(seq, axis=-2)


def center_scene(scene: Scene, center: Iterable[float]) -> Scene:
    c = np.asarray(tuple(center), dtype=np.float64)
    return Scene(scene.frames.copy(), scene.ped_ids.copy(), scene.xy - c, scene.dt, dict(scene.labels))


def _stem_then_turn(total: int, turn_at: int, speed: float, angle: float) -> np.ndarray:
    """Unit-speed walk along +x that rotates by ``angle`` after ``turn_at`` steps."""
    steps = np.zeros((total, 2))
    heading = np.where(np.arange(total) < turn_at, 0.0, angle)
    steps[1:, 0] = speed * np.cos(heading[1:])
    steps[1:, 1] = speed * np.sin(heading[1:])
    return np.cumsum(steps, axis=0)


def synth_generate(spec: SynthSpec) -> Scene:
    """Deterministic synthetic crowd for desk-scale training.

    Each window gets its own block of frames and fresh pedestrian ids, so
    ``build_windows(scene, spec.t_obs, spec.t_pred)`` recovers exactly
    ``spec.n_windows`` windows. Pedestrians in a window walk in lanes 2 units
    apart. ``y_fork`` walkers branch 45 degrees left or right two steps after
    the observed prefix ends; ``t_junction`` walkers turn 90 degrees there.
    """
    if spec.kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {spec.kind!r}; expected one of {SYNTH_KINDS}")
    if spec.n_peds < 1 or spec.n_windows < 1:
        raise ConfigError("n_peds and n_windows must be >= 1")
    rng = np.random.default_rng(spec.seed)
    total = spec.t_obs + spec.t_pred
    turn_at = spec.t_obs + 2
    lane = 2.0

    frames, peds, xy, labels = [], [], [], {}
    for w in range(spec.n_windows):
        for i in range(spec.n_peds):
            pid = w * spec.n_peds + i + 1
            if spec.kind == "linear":
                angle, label = 0.0, 0
            else:
                branch = int(rng.integers(2))
                sign = 1.0 if branch else -1.0
                angle = sign * (math.pi / 4 if spec.kind == "y_fork" else math.pi / 2)
                label = branch
            path = _stem_then_turn(total, turn_at, spec.speed, angle)
            path = path + np.array([rng.uniform(-0.5, 0.5), i * lane])
            if spec.noise_std > 0:
                path = path + rng.normal(0.0, spec.noise_std, size=path.shape)
            frames.extend(w * total + np.arange(total))
            peds.extend([pid] * total)
            xy.append(path)
            labels[pid] = label
    return Scene(frames, peds, np.concatenate(xy), dt=0.4, labels=labels)
