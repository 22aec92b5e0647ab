"""Synthetic multi-participant datasets with analytic ground truth.

The generative model: each story is band-limited noise whose per-band
gains drift slowly over time. Log band energies of the audio drive a
shared latent (one fixed random linear map for all participants) and one
private latent per participant; both are smoothed with a causal
exponential kernel to mimic the sluggishness of the measured responses.
A participant's noiseless signal mixes shared and private latents into
voxel space, and every written response matrix is signal plus fresh
Gaussian noise, z-scored per voxel per story.

Because the noiseless signal is known exactly, per-voxel noise ceilings
(signal variance over signal-plus-noise variance) are exact arithmetic,
which makes the repeat-based ceiling estimator and the whole encoding
stack testable against ground truth. Splitting the seed into a structure
seed and a noise seed lets tests redraw noise while keeping mixings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

from . import datamodel as dm
from .errors import ConfigError

GENERATOR_FRAME_SECONDS = 0.1
SMOOTHING_TIME_CONSTANT = 2.0
SMOOTHING_SPAN_SECONDS = 6.0
N_AUDIO_BANDS = 12


@dataclass
class SynthSpec:
    """Parameters of one synthetic dataset."""

    stories: list[tuple[str, float]]
    n_participants: int = 5
    n_voxels: int = 600
    latent_dim: int = 4
    tr_seconds: float = 2.0
    sample_rate: int = 16000
    noise_sd: float | list[float] = 1.0
    shared_fraction: float = 0.7
    seed: int = 0
    noise_seed: int | None = None
    n_repeats: int = 2
    n_repeat_stories: int = 1
    dataset_id: str = "synth"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ConfigError("shared_fraction must lie in [0, 1]")
        if np.any(np.asarray(self.noise_levels) < 0):
            raise ConfigError("noise_sd must be >= 0")
        for sid, dur in self.stories:
            if dur < 2 * self.tr_seconds:
                raise ConfigError(f"story {sid}: duration {dur}s is below two TRs")

    @property
    def noise_levels(self) -> np.ndarray:
        if np.isscalar(self.noise_sd):
            return np.full(self.n_participants, float(self.noise_sd))
        levels = np.asarray(self.noise_sd, dtype=np.float64)
        if levels.shape != (self.n_participants,):
            raise ConfigError("noise_sd list must have one entry per participant")
        return levels

    @property
    def participant_ids(self) -> list[str]:
        return [f"P{i:02d}" for i in range(self.n_participants)]

    @property
    def repeat_story_ids(self) -> list[str]:
        return [sid for sid, _ in self.stories[len(self.stories) - self.n_repeat_stories:]]

    def to_json_dict(self) -> dict:
        return {
            "stories": [[sid, dur] for sid, dur in self.stories],
            "n_participants": self.n_participants,
            "n_voxels": self.n_voxels,
            "latent_dim": self.latent_dim,
            "tr_seconds": self.tr_seconds,
            "sample_rate": self.sample_rate,
            "noise_sd": self.noise_sd if np.isscalar(self.noise_sd) else list(self.noise_sd),
            "shared_fraction": self.shared_fraction,
            "seed": self.seed,
            "noise_seed": self.noise_seed,
            "n_repeats": self.n_repeats,
            "n_repeat_stories": self.n_repeat_stories,
            "dataset_id": self.dataset_id,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["stories"] = [(sid, float(dur)) for sid, dur in d["stories"]]
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "SynthSpec":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class SynthGroundTruth:
    """Everything the generator knows: maps, mixings, latents, ceilings."""

    latent_dim: int
    band_edges_hz: list[float]
    shared_feature_map: np.ndarray                      # (n_bands, k)
    private_feature_maps: dict[str, np.ndarray]         # pid -> (n_bands, k)
    shared_mixings: dict[str, np.ndarray]               # pid -> (k, n_voxels), effective
    private_mixings: dict[str, np.ndarray]              # pid -> (k, n_voxels), effective
    noise_sd: dict[str, float]
    shared_latents: dict[str, np.ndarray]               # story -> (n_trs, k), TR grid
    private_latents: dict[str, dict[str, np.ndarray]]   # pid -> story -> (n_trs, k)
    signal_variance: dict[str, dict[str, np.ndarray]]   # pid -> story -> (n_voxels,)
    ceilings: dict[str, dict[str, np.ndarray]]          # pid -> repeat story -> (n_voxels,)
    repeat_story_ids: list[str] = field(default_factory=list)

    def analytic_ceiling(self, participant_id: str, story_id: str | None = None):
        """Exact per-voxel explainable variance fraction in [0, 1]."""
        if story_id is None:
            story_id = self.repeat_story_ids[0]
        return self.ceilings[participant_id][story_id]

    def to_json_dict(self) -> dict:
        arr = lambda a: np.asarray(a).tolist()
        return {
            "latent_dim": self.latent_dim,
            "band_edges_hz": self.band_edges_hz,
            "shared_feature_map": arr(self.shared_feature_map),
            "private_feature_maps": {p: arr(m) for p, m in self.private_feature_maps.items()},
            "shared_mixings": {p: arr(m) for p, m in self.shared_mixings.items()},
            "private_mixings": {p: arr(m) for p, m in self.private_mixings.items()},
            "noise_sd": self.noise_sd,
            "shared_latents": {s: arr(z) for s, z in self.shared_latents.items()},
            "private_latents": {
                p: {s: arr(z) for s, z in per.items()}
                for p, per in self.private_latents.items()
            },
            "signal_variance": {
                p: {s: arr(v) for s, v in per.items()}
                for p, per in self.signal_variance.items()
            },
            "ceilings": {
                p: {s: arr(c) for s, c in per.items()} for p, per in self.ceilings.items()
            },
            "repeat_story_ids": self.repeat_story_ids,
        }

    @classmethod
    def from_json_file(cls, path) -> "SynthGroundTruth":
        d = json.loads(Path(path).read_text())
        to_arr = np.asarray
        return cls(
            latent_dim=d["latent_dim"],
            band_edges_hz=d["band_edges_hz"],
            shared_feature_map=to_arr(d["shared_feature_map"]),
            private_feature_maps={p: to_arr(m) for p, m in d["private_feature_maps"].items()},
            shared_mixings={p: to_arr(m) for p, m in d["shared_mixings"].items()},
            private_mixings={p: to_arr(m) for p, m in d["private_mixings"].items()},
            noise_sd=d["noise_sd"],
            shared_latents={s: to_arr(z) for s, z in d["shared_latents"].items()},
            private_latents={
                p: {s: to_arr(z) for s, z in per.items()}
                for p, per in d["private_latents"].items()
            },
            signal_variance={
                p: {s: to_arr(v) for s, v in per.items()}
                for p, per in d["signal_variance"].items()
            },
            ceilings={
                p: {s: to_arr(c) for s, c in per.items()} for p, per in d["ceilings"].items()
            },
            repeat_story_ids=d["repeat_story_ids"],
        )


def explainable_fraction(signal_var, noise_var):
    """signal_var / (signal_var + noise_var), the ceiling of a noisy channel."""
    signal_var = np.asarray(signal_var, dtype=np.float64)
    total = signal_var + noise_var
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, signal_var / np.maximum(total, 1e-300), 1.0)
    return out


# ---------------------------------------------------------------------------
# Audio synthesis and generator-side features.
# ---------------------------------------------------------------------------


def band_edges(n_bands: int = N_AUDIO_BANDS, lo: float = 100.0, hi: float = 7000.0):
    return np.geomspace(lo, hi, n_bands + 1)


def synthesize_story_audio(rng: np.random.Generator, duration: float, sample_rate: int,
                           n_bands: int = N_AUDIO_BANDS) -> np.ndarray:
    """Band-limited noise whose per-band gains drift slowly over the story."""
    n = int(round(duration * sample_rate))
    edges = band_edges(n_bands)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    spectrum = np.fft.rfft(rng.standard_normal(n))

    # Slow per-band gain envelopes: smoothed random walks at 1 Hz control
    # points, exponentiated so gains stay positive.
    n_ctrl = max(int(duration) + 2, 4)
    ctrl_t = np.linspace(0.0, duration, n_ctrl)
    t = np.arange(n) / sample_rate
    base_gain = np.exp(0.5 * rng.standard_normal(n_bands))

    audio = np.zeros(n)
    for b in range(n_bands):
        mask = (freqs >= edges[b]) & (freqs < edges[b + 1])
        if not mask.any():
            continue
        band = np.fft.irfft(np.where(mask, spectrum, 0.0), n=n)
        walk = np.cumsum(rng.standard_normal(n_ctrl))
        walk = (walk - walk.mean()) / max(walk.std(), 1e-9)
        env = np.exp(0.8 * np.interp(t, ctrl_t, walk)) * base_gain[b]
        audio += env * band
    rms = np.sqrt(np.mean(audio**2))
    return (0.1 * audio / max(rms, 1e-12)).astype(np.float32)


def log_band_energies(waveform: np.ndarray, sample_rate: int,
                      frame_seconds: float = GENERATOR_FRAME_SECONDS,
                      n_bands: int = N_AUDIO_BANDS) -> np.ndarray:
    """(n_frames, n_bands) log band energies on the generator's frame grid."""
    hop = int(round(frame_seconds * sample_rate))
    n_frames = waveform.shape[0] // hop
    frames = waveform[: n_frames * hop].reshape(n_frames, hop).astype(np.float64)
    spec = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    freqs = np.fft.rfftfreq(hop, d=1.0 / sample_rate)
    edges = band_edges(n_bands)
    out = np.empty((n_frames, n_bands))
    for b in range(n_bands):
        mask = (freqs >= edges[b]) & (freqs < edges[b + 1])
        out[:, b] = np.log(spec[:, mask].sum(axis=1) + 1e-8)
    return out


def smooth_causal(x: np.ndarray, frame_seconds: float = GENERATOR_FRAME_SECONDS,
                  tau: float = SMOOTHING_TIME_CONSTANT,
                  span: float = SMOOTHING_SPAN_SECONDS) -> np.ndarray:
    """Causal exponential smoothing with a kernel truncated at ``span`` seconds.

    The leading edge is renormalized by the cumulative kernel mass so early
    frames are unbiased.
    """
    lags = np.arange(0, int(round(span / frame_seconds)) + 1)
    kernel = np.exp(-lags * frame_seconds / tau)
    kernel /= kernel.sum()
    smoothed = lfilter(kernel, [1.0], x, axis=0)
    norm = lfilter(kernel, [1.0], np.ones(x.shape[0]))
    return smoothed / norm[:, None]


def latents_at_tr_grid(smoothed: np.ndarray, tr_seconds: float, n_trs: int,
                       frame_seconds: float = GENERATOR_FRAME_SECONDS) -> np.ndarray:
    """Sample smoothed frame-rate latents at each TR's end time."""
    idx = np.round((np.arange(1, n_trs + 1) * tr_seconds) / frame_seconds).astype(int) - 1
    idx = np.clip(idx, 0, smoothed.shape[0] - 1)
    return smoothed[idx]


# ---------------------------------------------------------------------------
# Dataset generation.
# ---------------------------------------------------------------------------


def _roi_atlas_for(n_voxels: int, voxel_space_id: str) -> dm.RoiAtlas:
    """Partition the voxel axis into contiguous chunks, one per known label."""
    labels = sorted({l for group in dm.ROI_LABEL_GROUPS.values() for l in group})
    chunks = np.array_split(np.arange(n_voxels, dtype=np.int64), len(labels))
    return dm.RoiAtlas(voxel_space_id, n_voxels,
                       {label: chunk for label, chunk in zip(labels, chunks)})


def _scaled_mixing(rng: np.random.Generator, k: int, n_voxels: int) -> np.ndarray:
    """Random mixing with per-voxel column norms spread over [0.5, 1.5]."""
    w = rng.standard_normal((k, n_voxels))
    w /= np.linalg.norm(w, axis=0, keepdims=True)
    return w * rng.uniform(0.5, 1.5, size=n_voxels)


def generate(spec: SynthSpec, out_dir) -> tuple[Path, SynthGroundTruth]:
    """Write a synthetic dataset in the standard layout plus ground_truth.json.

    Deterministic given ``spec.seed``; redrawing with a different
    ``noise_seed`` keeps audio, maps and mixings fixed and changes only
    the additive response noise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    structure_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 11]))
    noise_master = spec.seed if spec.noise_seed is None else spec.noise_seed
    noise_rng = np.random.default_rng(np.random.SeedSequence([noise_master, 23]))

    pids = spec.participant_ids
    k, nv = spec.latent_dim, spec.n_voxels
    noise_levels = spec.noise_levels
    voxel_space_id = f"{spec.dataset_id}-space"

    # Structure: feature maps and mixings.
    m_shared = structure_rng.standard_normal((N_AUDIO_BANDS, k)) / np.sqrt(N_AUDIO_BANDS)
    m_private = {p: structure_rng.standard_normal((N_AUDIO_BANDS, k)) / np.sqrt(N_AUDIO_BANDS)
                 for p in pids}
    w_shared = {p: _scaled_mixing(structure_rng, k, nv) for p in pids}
    w_private = {p: _scaled_mixing(structure_rng, k, nv) for p in pids}

    # Audio and latent trajectories.
    stories: list[dm.StimulusStory] = []
    shared_latents: dict[str, np.ndarray] = {}
    private_latents: dict[str, dict[str, np.ndarray]] = {p: {} for p in pids}
    for sid, dur in spec.stories:
        audio_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 37, len(stories)]))
        story = dm.StimulusStory(sid, synthesize_story_audio(audio_rng, dur, spec.sample_rate),
                                 spec.sample_rate)
        stories.append(story)
        logE = log_band_energies(story.waveform, spec.sample_rate)
        logE = logE - logE.mean(axis=0, keepdims=True)
        n_trs = int(round(story.duration / spec.tr_seconds))
        shared_latents[sid] = latents_at_tr_grid(smooth_causal(logE @ m_shared),
                                                 spec.tr_seconds, n_trs)
        for p in pids:
            private_latents[p][sid] = latents_at_tr_grid(smooth_causal(logE @ m_private[p]),
                                                         spec.tr_seconds, n_trs)

    # Standardize latents over the concatenated dataset so mixing scales mean
    # the same thing for every seed and story set.
    def standardize(latents: dict[str, np.ndarray]):
        allz = np.concatenate(list(latents.values()), axis=0)
        mu, sd = allz.mean(axis=0), np.maximum(allz.std(axis=0), 1e-9)
        return {s: (z - mu) / sd for s, z in latents.items()}

    shared_latents = standardize(shared_latents)
    private_latents = {p: standardize(per) for p, per in private_latents.items()}

    # Noiseless signals, globally rescaled so the average voxel variance of
    # the shared part is shared_fraction and of the private part the rest.
    signals: dict[str, dict[str, np.ndarray]] = {}
    signal_var: dict[str, dict[str, np.ndarray]] = {}
    eff_shared: dict[str, np.ndarray] = {}
    eff_private: dict[str, np.ndarray] = {}
    for p in pids:
        sh = {s: z @ w_shared[p] for s, z in shared_latents.items()}
        pr = {s: z @ w_private[p] for s, z in private_latents[p].items()}

        def part_scale(parts: dict[str, np.ndarray], target: float) -> float:
            if target <= 0:
                return 0.0
            allv = np.concatenate(list(parts.values()), axis=0)
            return float(np.sqrt(target / max(allv.var(axis=0).mean(), 1e-12)))

        cs = part_scale(sh, spec.shared_fraction)
        cp = part_scale(pr, 1.0 - spec.shared_fraction)
        eff_shared[p] = cs * w_shared[p]
        eff_private[p] = cp * w_private[p]
        signals[p] = {s: cs * sh[s] + cp * pr[s] for s in sh}
        signal_var[p] = {s: sig.var(axis=0) for s, sig in signals[p].items()}

    # Write the dataset.
    dm.write_manifest(out_dir, spec.dataset_id, spec.tr_seconds, spec.sample_rate,
                      stories, pids, voxel_space_id, nv)
    for story in stories:
        dm.write_story_wav(out_dir, story)
    atlas = _roi_atlas_for(nv, voxel_space_id)
    dm.write_atlas(out_dir, atlas)

    repeat_ids = set(spec.repeat_story_ids)
    ceilings: dict[str, dict[str, np.ndarray]] = {p: {} for p in pids}
    for pi, p in enumerate(pids):
        sd_n = noise_levels[pi]
        for story in stories:
            sid = story.story_id
            sig = signals[p][sid]
            draw = lambda: sig + sd_n * noise_rng.standard_normal(sig.shape)
            dm.write_response_matrix(out_dir, p, sid, dm.zscore_responses(draw()),
                                     spec.tr_seconds, zscored=True)
            if sid in repeat_ids:
                for rep in range(1, spec.n_repeats + 1):
                    dm.write_repeat_matrix(out_dir, p, sid, rep, dm.zscore_responses(draw()))
                ceilings[p][sid] = explainable_fraction(signal_var[p][sid], sd_n**2)

    gt = SynthGroundTruth(
        latent_dim=k,
        band_edges_hz=band_edges().tolist(),
        shared_feature_map=m_shared,
        private_feature_maps=m_private,
        shared_mixings=eff_shared,
        private_mixings=eff_private,
        noise_sd={p: float(noise_levels[i]) for i, p in enumerate(pids)},
        shared_latents=shared_latents,
        private_latents=private_latents,
        signal_variance=signal_var,
        ceilings=ceilings,
        repeat_story_ids=sorted(repeat_ids),
    )
    (out_dir / "ground_truth.json").write_text(json.dumps(gt.to_json_dict()))
    return out_dir, gt


# ---------------------------------------------------------------------------
# Labeled probe clips (phoneme inventory + sentence types).
# ---------------------------------------------------------------------------

PHONEME_INVENTORY = [f"ph{i:02d}" for i in range(39)]
SENTENCE_TYPES = ["SA", "SX", "SI"]


def generate_probe_dataset(out_dir, n_train: int = 120, n_test: int = 60,
                           clip_seconds: float = 2.0, sample_rate: int = 16000,
                           seed: int = 0, min_phonemes: int = 2,
                           max_phonemes: int = 6) -> Path:
    """Write a labeled-clip probe dataset: clips/<id>.wav + labels.jsonl.

    Sentence type is encoded as the spectral register of the background
    noise (low / mid / high third of the band range), which makes the
    3-class task linearly separable from band-energy features. Each
    "phoneme" is a tone burst at a label-specific frequency; a clip's
    multi-label set is the bursts it contains.
    """
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = int(round(clip_seconds * sample_rate))
    t = np.arange(n) / sample_rate
    burst_len = int(0.12 * sample_rate)
    tone_freqs = np.linspace(300.0, 7300.0, len(PHONEME_INVENTORY))
    registers = [(150.0, 900.0), (900.0, 2800.0), (2800.0, 7600.0)]

    records = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        cls = int(rng.integers(0, len(SENTENCE_TYPES)))
        lo, hi = registers[cls]
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
        band = np.fft.irfft(np.where((freqs >= lo) & (freqs < hi), spectrum, 0.0), n=n)
        clip = band / max(np.sqrt(np.mean(band**2)), 1e-12)

        n_ph = int(rng.integers(min_phonemes, max_phonemes + 1))
        chosen = sorted(rng.choice(len(PHONEME_INVENTORY), size=n_ph, replace=False).tolist())
        for j, ph in enumerate(chosen):
            start = int(rng.integers(0, max(n - burst_len, 1)))
            seg = slice(start, start + burst_len)
            clip[seg] += 1.5 * np.sin(2 * np.pi * tone_freqs[ph] * t[seg])

        clip = (0.1 * clip / max(np.sqrt(np.mean(clip**2)), 1e-12)).astype(np.float32)
        cid = f"clip{i:04d}"
        wavfile.write(out_dir / "clips" / f"{cid}.wav", sample_rate, clip)
        records.append({
            "id": cid,
            "phonemes": [PHONEME_INVENTORY[ph] for ph in chosen],
            "sentence_type": SENTENCE_TYPES[cls],
            "split": split,
        })

    with (out_dir / "labels.jsonl").open("w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return out_dir
