"""Shared data types, dataset ingestion, sample pairing and story splits.

A dataset on disk is a directory with the following layout (all matrices
are row-major little-endian float32):

    root/manifest.json                       dataset descriptor
    root/stimuli/<story>.wav                 mono PCM (16-bit int or 32-bit float)
    root/responses/<participant>/<story>.f32 n_TRs x n_voxels response matrix
    root/responses/<participant>/<story>.json  {n_trs, n_voxels, tr_seconds, zscored}
    root/atlas.json                          {voxel_space_id, n_voxels, rois: {...}}
    root/repeats/<participant>/<story>.rep<k>.f32  repeated presentations (optional)

``manifest.json`` holds {dataset_id, tr_seconds, sample_rate,
stories: [{id, wav, duration_s}], participants: [...], voxel_space_id,
n_voxels}. Story order in the manifest is meaningful: contiguous batch
sampling and prefix-based data-size selection follow it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DataError

DEFAULT_SNIPPET_SECONDS = 2.0
DEFAULT_CONTEXT_SECONDS = 8.0


def _load_roi_groups() -> dict[str, list[str]]:
    with resources.files("multibrain.data").joinpath("roi_label_groups.json").open() as f:
        return json.load(f)


#: Named region groups -> fine-grained atlas labels (cortical parcellation
#: labels for auditory and late language regions). Region groups may overlap.
ROI_LABEL_GROUPS: dict[str, list[str]] = _load_roi_groups()


@dataclass
class StimulusStory:
    """One audio story: mono PCM samples at a fixed rate."""

    story_id: str
    waveform: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.waveform = np.asarray(self.waveform, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise DataError(f"story {self.story_id}: sample_rate must be positive")
        if not np.all(np.isfinite(self.waveform)):
            raise DataError(f"story {self.story_id}: waveform contains non-finite samples")
        self.waveform.setflags(write=False)

    @property
    def duration(self) -> float:
        return self.waveform.shape[0] / self.sample_rate


@dataclass
class ParticipantResponses:
    """Per-story response matrices (n_TRs x n_voxels) for one participant.

    Values are z-scored BOLD amplitudes in a shared voxel space; every
    story matrix must have the same voxel count.
    """

    participant_id: str
    tr_seconds: float
    matrices: dict[str, np.ndarray]
    voxel_space_id: str

    def __post_init__(self):
        n_voxels = None
        for sid, mat in self.matrices.items():
            mat = np.asarray(mat, dtype=np.float32)
            if mat.ndim != 2:
                raise DataError(
                    f"participant {self.participant_id} story {sid}: matrix must be 2-D"
                )
            if not np.all(np.isfinite(mat)):
                raise DataError(
                    f"participant {self.participant_id} story {sid}: non-finite responses"
                )
            if n_voxels is None:
                n_voxels = mat.shape[1]
            elif mat.shape[1] != n_voxels:
                raise DataError(
                    f"participant {self.participant_id} story {sid}: voxel count "
                    f"{mat.shape[1]} != {n_voxels} of other stories"
                )
            mat.setflags(write=False)
            self.matrices[sid] = mat
        if self.tr_seconds <= 0:
            raise DataError(f"participant {self.participant_id}: tr_seconds must be positive")

    @property
    def n_voxels(self) -> int:
        return next(iter(self.matrices.values())).shape[1]


@dataclass
class RoiAtlas:
    """Named ROI labels -> sorted voxel-index lists over a common space."""

    voxel_space_id: str
    n_voxels: int
    roi_map: dict[str, np.ndarray]

    def __post_init__(self):
        for name, idx in self.roi_map.items():
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size != np.unique(idx).size:
                raise DataError(f"ROI {name}: duplicate voxel indices")
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_voxels):
                raise DataError(f"ROI {name}: voxel index out of range [0, {self.n_voxels})")
            idx = np.sort(idx)
            idx.setflags(write=False)
            self.roi_map[name] = idx

    def to_json_dict(self) -> dict:
        return {
            "voxel_space_id": self.voxel_space_id,
            "n_voxels": self.n_voxels,
            "rois": {name: idx.tolist() for name, idx in self.roi_map.items()},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RoiAtlas":
        return cls(
            voxel_space_id=d["voxel_space_id"],
            n_voxels=int(d["n_voxels"]),
            roi_map={name: np.asarray(v, dtype=np.int64) for name, v in d["rois"].items()},
        )


@dataclass
class PairedSample:
    """One training unit: an audio clip and its response vector per participant.

    The clip is a zero-copy view into the story waveform, covering the
    snippet TR plus its preceding context, and ending exactly at the TR
    boundary the responses belong to.
    """

    story_id: str
    tr_index: int
    clip: np.ndarray
    responses: dict[str, np.ndarray]


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint story-id sets for train / validation / test."""

    train_stories: tuple[str, ...]
    val_stories: tuple[str, ...]
    test_stories: tuple[str, ...]

    def __post_init__(self):
        sets = [set(self.train_stories), set(self.val_stories), set(self.test_stories)]
        if sum(len(s) for s in sets) != len(set().union(*sets)):
            raise ConfigError("split sets must be pairwise disjoint")
        if not self.test_stories:
            raise ConfigError("split must contain at least one test story")


@dataclass
class Dataset:
    """An ingested dataset: stories, responses, atlas and repeat matrices."""

    dataset_id: str
    tr_seconds: float
    sample_rate: int
    stories: dict[str, StimulusStory]
    responses: dict[str, ParticipantResponses]
    atlas: RoiAtlas
    story_order: list[str]
    repeats: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    root: Path | None = None

    @property
    def n_voxels(self) -> int:
        return self.atlas.n_voxels

    @property
    def participant_ids(self) -> list[str]:
        return list(self.responses)

    def total_audio_seconds(self, story_ids=None) -> float:
        ids = self.story_order if story_ids is None else story_ids
        return float(sum(self.stories[s].duration for s in ids))


# ---------------------------------------------------------------------------
# Layout writers (used by the synthetic generator and by tests).
# ---------------------------------------------------------------------------


def write_story_wav(root: Path, story: StimulusStory) -> Path:
    path = Path(root) / "stimuli" / f"{story.story_id}.wav"
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, story.sample_rate, story.waveform.astype(np.float32))
    return path


def write_response_matrix(
    root: Path, participant_id: str, story_id: str, matrix: np.ndarray,
    tr_seconds: float, zscored: bool,
) -> Path:
    d = Path(root) / "responses" / participant_id
    d.mkdir(parents=True, exist_ok=True)
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    (d / f"{story_id}.f32").write_bytes(mat.tobytes())
    sidecar = {
        "n_trs": int(mat.shape[0]),
        "n_voxels": int(mat.shape[1]),
        "tr_seconds": tr_seconds,
        "zscored": bool(zscored),
    }
    (d / f"{story_id}.json").write_text(json.dumps(sidecar))
    return d / f"{story_id}.f32"


def write_repeat_matrix(
    root: Path, participant_id: str, story_id: str, rep_index: int, matrix: np.ndarray
) -> Path:
    d = Path(root) / "repeats" / participant_id
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{story_id}.rep{rep_index}.f32"
    path.write_bytes(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    return path


def write_atlas(root: Path, atlas: RoiAtlas) -> Path:
    path = Path(root) / "atlas.json"
    path.write_text(json.dumps(atlas.to_json_dict()))
    return path


def write_manifest(
    root: Path, dataset_id: str, tr_seconds: float, sample_rate: int,
    stories: list[StimulusStory], participant_ids: list[str],
    voxel_space_id: str, n_voxels: int,
) -> Path:
    manifest = {
        "dataset_id": dataset_id,
        "tr_seconds": tr_seconds,
        "sample_rate": sample_rate,
        "stories": [
            {"id": s.story_id, "wav": f"stimuli/{s.story_id}.wav", "duration_s": s.duration}
            for s in stories
        ],
        "participants": list(participant_ids),
        "voxel_space_id": voxel_space_id,
        "n_voxels": n_voxels,
    }
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


# ---------------------------------------------------------------------------
# Ingestion.
# ---------------------------------------------------------------------------


def _read_wav(path: Path, story_id: str, expected_rate: int) -> np.ndarray:
    if not path.exists():
        raise DataError(f"story {story_id}: missing wav file {path}")
    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise DataError(
            f"story {story_id}: sample rate {rate} != manifest rate {expected_rate}"
        )
    if data.ndim != 1:
        raise DataError(f"story {story_id}: expected mono PCM, got shape {data.shape}")
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float32)
    raise DataError(f"story {story_id}: unsupported wav sample format {data.dtype}")


def _read_matrix(path: Path, n_trs: int, n_voxels: int, what: str) -> np.ndarray:
    raw = path.read_bytes()
    expected = 4 * n_trs * n_voxels
    if len(raw) != expected:
        raise DataError(
            f"{what}: matrix file {path.name} has {len(raw)} bytes, "
            f"expected {expected} ({n_trs} x {n_voxels} float32)"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(n_trs, n_voxels).copy()


def zscore_responses(matrix: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-voxel z-scoring of one story's response matrix.

    Voxels with (near) zero variance are centered but not rescaled.
    """
    mean = matrix.mean(axis=0, keepdims=True)
    sd = matrix.std(axis=0, keepdims=True)
    sd = np.where(sd < eps, 1.0, sd)
    return ((matrix - mean) / sd).astype(np.float32)


def ingest_dataset(root, normalize_raw: bool = True) -> Dataset:
    """Load a dataset directory, validating the full layout contract.

    Response matrices whose sidecar declares ``zscored: false`` are
    z-scored per voxel per story on load when ``normalize_raw`` is true;
    matrices already flagged as z-scored are taken verbatim.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())

    atlas_path = root / "atlas.json"
    if not atlas_path.exists():
        raise DataError(f"missing atlas.json under {root}")
    atlas = RoiAtlas.from_json_dict(json.loads(atlas_path.read_text()))
    if atlas.voxel_space_id != manifest["voxel_space_id"]:
        raise DataError(
            f"atlas voxel space {atlas.voxel_space_id!r} != manifest "
            f"{manifest['voxel_space_id']!r}"
        )
    if atlas.n_voxels != manifest["n_voxels"]:
        raise DataError(
            f"atlas n_voxels {atlas.n_voxels} != manifest n_voxels {manifest['n_voxels']}"
        )

    sample_rate = int(manifest["sample_rate"])
    tr_seconds = float(manifest["tr_seconds"])

    stories: dict[str, StimulusStory] = {}
    story_order: list[str] = []
    for entry in manifest["stories"]:
        sid = entry["id"]
        waveform = _read_wav(root / entry["wav"], sid, sample_rate)
        stories[sid] = StimulusStory(sid, waveform, sample_rate)
        story_order.append(sid)

    responses: dict[str, ParticipantResponses] = {}
    repeats: dict[tuple[str, str], np.ndarray] = {}
    for pid in manifest["participants"]:
        pdir = root / "responses" / pid
        matrices: dict[str, np.ndarray] = {}
        for sidecar_path in sorted(pdir.glob("*.json")) if pdir.exists() else []:
            sid = sidecar_path.stem
            if sid not in stories:
                raise DataError(f"participant {pid}: responses for unknown story {sid}")
            meta = json.loads(sidecar_path.read_text())
            n_trs, n_vox = int(meta["n_trs"]), int(meta["n_voxels"])
            if n_vox != atlas.n_voxels:
                raise DataError(
                    f"participant {pid} story {sid}: n_voxels {n_vox} != atlas "
                    f"n_voxels {atlas.n_voxels}"
                )
            if abs(float(meta["tr_seconds"]) - tr_seconds) > 1e-9:
                raise DataError(
                    f"participant {pid} story {sid}: tr_seconds {meta['tr_seconds']} "
                    f"!= manifest tr_seconds {tr_seconds}"
                )
            duration = stories[sid].duration
            if abs(n_trs * tr_seconds - duration) > tr_seconds:
                raise DataError(
                    f"participant {pid} story {sid}: {n_trs} TRs x {tr_seconds}s "
                    f"mismatches story duration {duration:.2f}s by more than one TR"
                )
            mat_path = pdir / f"{sid}.f32"
            if not mat_path.exists():
                raise DataError(f"missing response matrix for participant {pid} story {sid}")
            mat = _read_matrix(mat_path, n_trs, n_vox, f"participant {pid} story {sid}")
            if not np.all(np.isfinite(mat)):
                raise DataError(f"participant {pid} story {sid}: non-finite responses")
            if normalize_raw and not meta.get("zscored", False):
                mat = zscore_responses(mat)
            matrices[sid] = mat

            rep_dir = root / "repeats" / pid
            rep_paths = sorted(rep_dir.glob(f"{sid}.rep*.f32")) if rep_dir.exists() else []
            if rep_paths:
                reps = [
                    _read_matrix(p, n_trs, n_vox, f"repeat {p.name} of participant {pid}")
                    for p in rep_paths
                ]
                repeats[(pid, sid)] = np.stack(reps)
        if not matrices:
            raise DataError(f"participant {pid}: no response matrices found")
        responses[pid] = ParticipantResponses(pid, tr_seconds, matrices, atlas.voxel_space_id)

    return Dataset(
        dataset_id=manifest["dataset_id"],
        tr_seconds=tr_seconds,
        sample_rate=sample_rate,
        stories=stories,
        responses=responses,
        atlas=atlas,
        story_order=story_order,
        repeats=repeats,
        root=root,
    )


# ---------------------------------------------------------------------------
# Pairing, ROI selection, splits.
# ---------------------------------------------------------------------------


def context_tr_count(context_seconds: float, tr_seconds: float) -> int:
    """Number of leading TRs that lack full audio context and are dropped."""
    return int(math.ceil(context_seconds / tr_seconds - 1e-9))


def build_paired_samples(
    story: StimulusStory,
    responses,
    snippet_seconds: float = DEFAULT_SNIPPET_SECONDS,
    context_seconds: float = DEFAULT_CONTEXT_SECONDS,
) -> list[PairedSample]:
    """Pair every TR of a story with its (context + snippet) audio clip.

    One sample is emitted per TR whose full clip window lies inside the
    story; leading TRs with incomplete context are dropped together with
    their response rows. Participants that did not hear the story simply
    do not appear; if none did, the result is empty.
    """
    present = [r for r in responses if story.story_id in r.matrices]
    if not present:
        return []
    for r in present:
        if abs(r.tr_seconds - snippet_seconds) > 1e-9:
            raise ConfigError(
                f"snippet_seconds {snippet_seconds} must equal tr_seconds "
                f"{r.tr_seconds} of participant {r.participant_id}"
            )
    sr = story.sample_rate
    clip_samples = int(round((snippet_seconds + context_seconds) * sr))
    tr_samples = int(round(snippet_seconds * sr))
    n_trs = min(r.matrices[story.story_id].shape[0] for r in present)
    first = context_tr_count(context_seconds, snippet_seconds)

    samples = []
    for tr_index in range(first, n_trs):
        end = (tr_index + 1) * tr_samples
        start = end - clip_samples
        if start < 0 or end > story.waveform.shape[0]:
            continue
        samples.append(
            PairedSample(
                story_id=story.story_id,
                tr_index=tr_index,
                clip=story.waveform[start:end],
                responses={
                    r.participant_id: r.matrices[story.story_id][tr_index] for r in present
                },
            )
        )
    return samples


def select_roi_voxels(atlas: RoiAtlas, roi_names) -> np.ndarray:
    """Sorted, deduplicated union of voxel indices for the named ROIs.

    A name may be a label present in the atlas or one of the known region
    groups (:data:`ROI_LABEL_GROUPS`), which expands to its labels.
    """
    labels: list[str] = []
    for name in roi_names:
        if name in atlas.roi_map:
            labels.append(name)
        elif name in ROI_LABEL_GROUPS:
            for label in ROI_LABEL_GROUPS[name]:
                if label not in atlas.roi_map:
                    raise DataError(
                        f"ROI group {name!r}: label {label!r} not present in atlas"
                    )
                labels.append(label)
        else:
            raise DataError(f"unknown ROI name {name!r}")
    if not labels:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate([atlas.roi_map[l] for l in labels]))


def make_split(story_ids, n_val: int = 2, n_test: int = 1, seed: int = 0) -> SplitPlan:
    """Seeded train/val/test story split; a pure function of (sorted ids, seed)."""
    ids = sorted(story_ids)
    if len(ids) <= n_val + n_test:
        raise ConfigError(
            f"need more than {n_val + n_test} stories to split, got {len(ids)}"
        )
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    test = tuple(sorted(perm[:n_test]))
    val = tuple(sorted(perm[n_test:n_test + n_val]))
    train = tuple(sorted(perm[n_test + n_val:]))
    return SplitPlan(train_stories=train, val_stories=val, test_stories=test)


def make_split_fixed_test(story_ids, test_stories, n_val: int = 2, seed: int = 0) -> SplitPlan:
    """Split with a pinned test set (e.g. the stories that have repeats)."""
    test = tuple(sorted(test_stories))
    rest = sorted(set(story_ids) - set(test))
    if len(rest) < n_val + 1:
        raise ConfigError("not enough stories left for validation and training")
    rng = np.random.default_rng(seed)
    perm = [rest[i] for i in rng.permutation(len(rest))]
    val = tuple(sorted(perm[:n_val]))
    train = tuple(sorted(perm[n_val:]))
    return SplitPlan(train_stories=train, val_stories=val, test_stories=test)
