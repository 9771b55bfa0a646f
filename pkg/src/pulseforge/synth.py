"""Synthetic pulsatile-video benchmark.

Real rPPG corpora are not available at desk scale, so training and
evaluation run on generated clips: a skin-colored patch whose pixel values
pulse with a controllable blood-volume waveform, composited with optional
illumination drift, patch motion, and sensor noise.  Channel gains follow
hemoglobin absorption (green strongest), which makes the color cue
physically plausible without modeling optics.

Every byte of a dataset is determined by (scenario, seed): per-clip seeds
are derived by seed-splitting, and clips are stored as raw float32 tensors
(no video codec) beside a plain-text manifest.  Externally produced
directories with the same layout can be imported for real-data use.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from pulseforge import tensor as T
from pulseforge.dsp import Waveform, WelchConfig, estimate_hr, welch_psd

__all__ = [
    "ScenarioSpec",
    "VideoClip",
    "PRESETS",
    "gen_bvp",
    "render_clip",
    "build_dataset",
    "load_dataset",
    "DatasetIndex",
    "ClipRecord",
]

CHANNEL_GAINS = (0.5, 1.0, 0.3)  # R, G, B pulsatile gain (hemoglobin favors green)
BASE_SKIN = (0.55, 0.42, 0.35)  # patch base color
BACKGROUND = 0.15


@dataclass
class ScenarioSpec:
    """Difficulty axes of a generated clip family."""

    preset: str = "static"
    frames: int = 128
    height: int = 72
    width: int = 72
    fps: float = 30.0
    hr_lo: float = 55.0
    hr_hi: float = 110.0
    amplitude: float = 0.02  # pulsatile modulation depth
    illumination_amp: float = 0.0  # global additive drift amplitude
    illumination_period_s: float = 10.0
    motion_max_px: int = 0  # max patch translation
    motion_speed_hz: float = 0.2
    sensor_noise_sigma: float = 0.002
    baseline_amp: float = 0.0  # low-frequency baseline in the BVP itself
    patch_frac: float = 0.6  # patch side as a fraction of the frame

    def validate(self) -> None:
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if self.sensor_noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not 40.0 <= self.hr_lo <= self.hr_hi <= 180.0:
            raise ValueError(f"hr range [{self.hr_lo}, {self.hr_hi}] outside [40, 180]")
        if not 0.05 <= self.patch_frac <= 1.0:
            raise ValueError("patch_frac must lie in [0.05, 1]")
        ph = int(self.height * self.patch_frac)
        pw = int(self.width * self.patch_frac)
        if ph < 1 or pw < 1:
            raise ValueError("patch does not cover a single pixel")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k == "preset":
                kwargs[k] = str(v)
            elif k in ("frames", "height", "width", "motion_max_px"):
                kwargs[k] = int(v)
            else:
                kwargs[k] = float(v)
        spec = cls(**kwargs)
        spec.validate()
        return spec


def preset_scenario(name: str, **overrides) -> ScenarioSpec:
    """The four difficulty presets: static, lighting, motion, mixed."""
    base = dict(preset=name)
    if name == "static":
        pass
    elif name == "lighting":
        base.update(illumination_amp=0.08, sensor_noise_sigma=0.004)
    elif name == "motion":
        base.update(motion_max_px=6, sensor_noise_sigma=0.004)
    elif name == "mixed":
        base.update(illumination_amp=0.08, motion_max_px=6, sensor_noise_sigma=0.006)
    else:
        raise ValueError(f"unknown preset {name!r}")
    base.update(overrides)
    spec = ScenarioSpec(**base)
    spec.validate()
    return spec


PRESETS = ("static", "lighting", "motion", "mixed")


@dataclass
class VideoClip:
    """One labeled sample: frames (3, T, H, W) in [0, 1] plus ground truth."""

    clip: np.ndarray
    fps: float
    gt_bvp: Waveform
    gt_hr: float
    scenario: ScenarioSpec
    seed: int


def gen_bvp(hr: float, fps: float, frames: int, seed: int, baseline_amp: float = 0.0) -> Waveform:
    """Pulse model: fundamental plus a 0.3-amplitude second harmonic with a
    seeded phase, peak-normalized, plus an optional slow baseline."""
    if not 40.0 <= hr <= 180.0:
        raise ValueError(f"hr {hr} outside the [40, 180] bpm grid")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    f = hr / 60.0
    t = np.arange(frames) / fps
    s = np.sin(2.0 * np.pi * f * t + phase) + 0.3 * np.sin(4.0 * np.pi * f * t + 2.0 * phase + 0.7)
    s = s / np.max(np.abs(s))
    if baseline_amp > 0:
        s = s + baseline_amp * np.sin(2.0 * np.pi * 0.08 * t + rng.uniform(0, 2 * np.pi))
    return Waveform(samples=s, fps=fps)


def render_clip(bvp: Waveform, spec: ScenarioSpec, seed: int) -> np.ndarray:
    """Deterministically composite one clip (3, T, H, W), clamped to [0, 1].

    The skin patch pulses as base + amplitude * gain_c * bvp(t); illumination
    drift adds a global sinusoid, motion translates the patch, and sensor
    noise perturbs every pixel.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    t_len, h, w = spec.frames, spec.height, spec.width
    if bvp.samples.size != t_len:
        raise ValueError(f"bvp length {bvp.samples.size} != frames {t_len}")
    ph = int(h * spec.patch_frac)
    pw = int(w * spec.patch_frac)
    top0 = (h - ph) // 2
    left0 = (w - pw) // 2

    clip = np.full((3, t_len, h, w), BACKGROUND, dtype=np.float64)
    tt = np.arange(t_len) / spec.fps

    if spec.motion_max_px > 0:
        mphase = rng.uniform(0, 2 * np.pi, size=2)
        dx = spec.motion_max_px * np.sin(2 * np.pi * spec.motion_speed_hz * tt + mphase[0])
        dy = spec.motion_max_px * np.sin(2 * np.pi * spec.motion_speed_hz * tt + mphase[1])
    else:
        dx = dy = np.zeros(t_len)

    illum = (
        spec.illumination_amp * np.sin(2 * np.pi * tt / spec.illumination_period_s + rng.uniform(0, 2 * np.pi))
        if spec.illumination_amp > 0
        else np.zeros(t_len)
    )

    for ti in range(t_len):
        top = int(round(top0 + dy[ti]))
        left = int(round(left0 + dx[ti]))
        top = min(max(top, 0), h - ph)  # clamp the patch inside the frame
        left = min(max(left, 0), w - pw)
        pulse = spec.amplitude * bvp.samples[ti]
        for c in range(3):
            frame = clip[c, ti]
            frame += illum[ti]
            frame[top : top + ph, left : left + pw] = (
                BASE_SKIN[c] + CHANNEL_GAINS[c] * pulse + illum[ti]
            )
    if spec.sensor_noise_sigma > 0:
        clip += rng.normal(0.0, spec.sensor_noise_sigma, size=clip.shape)
    np.clip(clip, 0.0, 1.0, out=clip)
    return clip.astype(np.float32)


def make_clip(spec: ScenarioSpec, hr: float, seed: int) -> VideoClip:
    bvp = gen_bvp(hr, spec.fps, spec.frames, seed, baseline_amp=spec.baseline_amp)
    clip = render_clip(bvp, spec, seed)
    return VideoClip(clip=clip, fps=spec.fps, gt_bvp=bvp, gt_hr=hr, scenario=spec, seed=seed)


# -- dataset persistence -------------------------------------------------------


@dataclass
class ClipRecord:
    clip_id: int
    split: str
    seed: int
    gt_hr: float
    clip_file: str
    bvp_file: str


@dataclass
class DatasetIndex:
    root: str
    scenario: ScenarioSpec
    seed: int
    records: list[ClipRecord] = field(default_factory=list)

    def split(self, name: str) -> list[ClipRecord]:
        return [r for r in self.records if r.split == name]

    def load_clip(self, rec: ClipRecord) -> VideoClip:
        clip = T.load_tensor(os.path.join(self.root, rec.clip_file))
        bvp = T.load_tensor(os.path.join(self.root, rec.bvp_file))
        return VideoClip(
            clip=clip,
            fps=self.scenario.fps,
            gt_bvp=Waveform(samples=bvp, fps=self.scenario.fps),
            gt_hr=rec.gt_hr,
            scenario=self.scenario,
            seed=rec.seed,
        )


MANIFEST_NAME = "manifest.txt"
_FORMAT_TAG = "pulseforge-dataset-v1"


def build_dataset(
    out_dir: str,
    n_clips: int,
    spec: ScenarioSpec,
    split_ratios: tuple[float, ...] = (0.8, 0.2),
    seed: int = 0,
    split_names: tuple[str, ...] = ("train", "val"),
) -> DatasetIndex:
    """Generate and persist ``n_clips`` labeled clips plus a manifest.

    HRs are sampled uniformly from the scenario's range; split sizes follow
    ``split_ratios`` (must sum to 1) in record order.
    """
    spec.validate()
    if len(split_ratios) != len(split_names):
        raise ValueError("split_ratios and split_names must align")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {split_ratios}")
    os.makedirs(os.path.join(out_dir, "clips"), exist_ok=True)

    counts = [int(round(r * n_clips)) for r in split_ratios]
    counts[-1] = n_clips - sum(counts[:-1])
    if min(counts) < 0:
        raise ValueError(f"split ratios {split_ratios} produce negative counts")
    labels: list[str] = []
    for name, cnt in zip(split_names, counts):
        labels += [name] * cnt

    root_ss = np.random.SeedSequence(seed)
    hr_rng = np.random.default_rng(root_ss.spawn(1)[0])
    clip_seeds = [int(s.generate_state(1)[0]) for s in root_ss.spawn(n_clips + 1)[1:]]

    index = DatasetIndex(root=out_dir, scenario=spec, seed=seed)
    for i in range(n_clips):
        hr = float(hr_rng.uniform(spec.hr_lo, spec.hr_hi))
        vc = make_clip(spec, hr, clip_seeds[i])
        clip_file = f"clips/clip_{i:04d}.pft"
        bvp_file = f"clips/bvp_{i:04d}.pft"
        T.save_tensor(os.path.join(out_dir, clip_file), vc.clip)
        T.save_tensor(os.path.join(out_dir, bvp_file), vc.gt_bvp.samples)
        index.records.append(
            ClipRecord(
                clip_id=i,
                split=labels[i],
                seed=clip_seeds[i],
                gt_hr=hr,
                clip_file=clip_file,
                bvp_file=bvp_file,
            )
        )

    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        fh.write(f"format={_FORMAT_TAG}\n")
        fh.write(f"seed={seed}\n")
        fh.write(f"n_clips={n_clips}\n")
        for k, v in spec.to_dict().items():
            fh.write(f"scenario.{k}={v!r}\n" if isinstance(v, str) else f"scenario.{k}={v}\n")
        fh.write("[clips]\n")
        fh.write("# id|split|seed|gt_hr|clip_file|bvp_file\n")
        for r in index.records:
            fh.write(f"{r.clip_id}|{r.split}|{r.seed}|{r.gt_hr!r}|{r.clip_file}|{r.bvp_file}\n")
    return index


def load_dataset(root: str) -> DatasetIndex:
    """Parse a dataset directory (generated here or imported externally)."""
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    header: dict[str, str] = {}
    records: list[ClipRecord] = []
    in_clips = False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line == "[clips]":
                in_clips = True
                continue
            if not in_clips:
                k, _, v = line.partition("=")
                header[k.strip()] = v.strip()
            else:
                parts = line.split("|")
                if len(parts) != 6:
                    raise ValueError(f"malformed clip record: {line!r}")
                records.append(
                    ClipRecord(
                        clip_id=int(parts[0]),
                        split=parts[1],
                        seed=int(parts[2]),
                        gt_hr=float(parts[3].strip("'\"")),
                        clip_file=parts[4],
                        bvp_file=parts[5],
                    )
                )
    if header.get("format") != _FORMAT_TAG:
        raise ValueError(f"unrecognized dataset format {header.get('format')!r}")
    scen = {}
    for k, v in header.items():
        if k.startswith("scenario."):
            scen[k[len("scenario.") :]] = v.strip("'\"")
    spec = ScenarioSpec.from_dict(scen)
    idx = DatasetIndex(root=root, scenario=spec, seed=int(header.get("seed", "0")), records=records)
    declared = int(header.get("n_clips", len(records)))
    if declared != len(records):
        raise ValueError(f"manifest declares {declared} clips but lists {len(records)}")
    return idx


def verify_ground_truth(index: DatasetIndex, f_lo: float = 0.66, f_hi: float = 3.0) -> float:
    """Worst |estimate_hr(welch(gt_bvp)) - gt_hr| over the dataset, in bpm."""
    worst = 0.0
    for rec in index.records:
        vc = index.load_clip(rec)
        seg = min(128, vc.gt_bvp.samples.size)
        psd = welch_psd(vc.gt_bvp.samples, vc.fps, WelchConfig(segment=seg))
        worst = max(worst, abs(estimate_hr(psd, f_lo, f_hi) - rec.gt_hr))
    return worst
