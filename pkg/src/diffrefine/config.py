"""Sectioned key-value experiment configuration (INI syntax).

Every key has a default here; a config file only needs the keys it changes.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .schedule import NoiseSchedule

REFERENCE_SIGMA_PX = 3.0


def snr_matched_step(t_ref: int, sigma_ref: float, sigma: float, schedule: NoiseSchedule) -> int:
    """Step whose heatmap signal-to-noise ratio matches ``t_ref`` at ``sigma_ref``."""
    ab = schedule.alpha_bar
    target = ab[t_ref] / (1 - ab[t_ref]) * sigma_ref ** 2 / sigma ** 2
    snr = ab[1:] / (1 - ab[1:])
    return int(np.argmin(np.abs(np.log(snr) - np.log(target)))) + 1


@dataclass
class DatasetSection:
    n: int = 2000  # training scenes
    labeled_fraction: float = 0.1
    grid: int = 16  # heatmap side length, pixels
    sigma: float = 1.0  # ground-truth Gaussian sigma, pixels
    cone_extent: float = 0.15  # reach of the gaze-direction field from the head, normalized units
    max_distractors: int = 6
    direction_jitter_deg: float = 15.0  # target offset from the encoded gaze direction
    decoy_prob: float = 0.8  # chance of one distractor inside the gaze cone
    decoy_min_angle_deg: float = 0.0
    decoy_max_angle_deg: float = 12.0
    saliency_min: float = 0.2  # distractor saliency range
    saliency_max: float = 0.8
    target_saliency_min: float = 0.6  # target saliency is drawn from [this, 1]
    test_n: int = 500  # evaluation scenes
    test_seed: int = 100_000  # test scenes come from this seed regardless of run seed
    prior_probs: str = "0.45,0.30,0.15,0.10"  # concentrated,dispersed,wrong,noise


@dataclass
class TeacherSection:
    T: int = 500
    beta_start: float = 2e-4
    beta_end: float = 0.04
    base: int = 16
    time_dim: int = 32
    lr: float = 2e-3
    batch_size: int = 32
    steps: int = 500


@dataclass
class SamplerSection:
    t_init: int = 0  # 0 selects 250, or 200 when labeled_fraction < 0.1
    n_steps: int = 2
    noise_steps: int = 2  # denoiser calls when sampling from pure noise


@dataclass
class StudentSection:
    base: int = 8
    lr: float = 5e-3
    batch_size: int = 64
    labeled_per_batch: int = 16  # 0 disables the labeled quota
    steps: int = 400
    mapper_steps: int = 600  # direct-mapping baseline (prior -> gt regressor)


@dataclass
class MTSection:
    consistency_weight: float = 0.01  # KL over a whole map is ~1000x the per-pixel x0 loss
    ramp_fraction: float = 0.1
    ema_decay: float = 0.99
    shift_px: int = 1
    angle_deg: float = 5.0
    consistency_batch: int = 32


@dataclass
class EvalSection:
    n_annotations: int = 10
    annotation_sigma_px: float = 0.5
    auc_mode: str = "multi"
    auc_threshold: float = 0.5


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    student: StudentSection = field(default_factory=StudentSection)
    mt: MTSection = field(default_factory=MTSection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("dataset", "teacher", "sampler", "student", "mt", "eval")

    def t_init(self) -> int:
        """Explicit ``sampler.t_init``, or the reference step matched to this heatmap sigma.

        The reference steps (250, or 200 below 10% labeled) belong to sigma = 3 px
        heatmaps. A narrower Gaussian carries less energy, so the same step would
        bury it deeper in noise; we pick the step with the same signal-to-noise
        ratio ``alpha_bar / (1 - alpha_bar) * pi * sigma^2`` instead.
        """
        if self.sampler.t_init:
            return self.sampler.t_init
        ref = 200 if self.dataset.labeled_fraction < 0.1 else 250
        return snr_matched_step(ref, REFERENCE_SIGMA_PX, self.dataset.sigma,
                                NoiseSchedule.linear(self.teacher.T, self.teacher.beta_start, self.teacher.beta_end))

    def validate(self) -> None:
        if not 0 < self.dataset.labeled_fraction < 1:
            raise InvalidArgument(f"labeled_fraction must be in (0, 1), got {self.dataset.labeled_fraction}")
        if self.dataset.grid % 4:
            raise InvalidArgument(f"grid must be divisible by 4, got {self.dataset.grid}")
        d = self.dataset
        if not 0 <= d.saliency_min <= d.saliency_max <= 1 or not 0 <= d.target_saliency_min <= 1:
            raise InvalidArgument("saliency bounds must satisfy 0 <= min <= max <= 1")
        if self.mt.consistency_weight < 0:
            raise InvalidArgument("consistency_weight must be >= 0")
        if not 0 <= self.mt.ema_decay <= 1:
            raise InvalidArgument("ema_decay must be in [0, 1]")

    def set(self, dotted: str, value: str) -> None:
        """Override one key from a ``section.key=value`` string."""
        try:
            section, key = dotted.split(".", 1)
            sec = getattr(self, section)
        except (ValueError, AttributeError):
            raise InvalidArgument(f"unknown config key {dotted!r}") from None
        if section not in self.SECTIONS or key not in {f.name for f in dataclasses.fields(sec)}:
            raise InvalidArgument(f"unknown config key {dotted!r}")
        current = getattr(sec, key)
        try:
            setattr(sec, key, type(current)(value))
        except ValueError:
            raise InvalidArgument(f"bad value for {dotted}: {value!r}") from None

    def to_ini(self) -> str:
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                lines.append(f"{f.name} = {getattr(getattr(self, name), f.name)}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in self.SECTIONS}

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(path):
            raise FileNotFoundError(path)
        cfg = cls()
        for section in parser.sections():
            if section not in cls.SECTIONS:
                raise InvalidArgument(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
        return cfg
