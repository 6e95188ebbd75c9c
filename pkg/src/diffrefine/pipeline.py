"""Semi-supervised training: teacher, pseudo-labels, student, mean-teacher variants."""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import engine
from .config import ExperimentConfig
from .denoiser import DenoiserConfig, NetDenoiser, UNet, build_unet, train_denoiser, x0_loss
from .errors import InvalidArgument, NumericalFailure
from .heatmap import argmax_points, render_gaussians
from .metrics import MetricsReport, evaluate, jitter_annotations
from .sampler import InferencePlan, refine, sample_from_noise
from .schedule import NoiseSchedule
from .synth import Dataset, PriorQualityMix, SceneParams, UnlabeledView, make_dataset

log = logging.getLogger(__name__)


class PseudoLabelMethod(enum.Enum):
    GCDR = "gcdr"
    NO_REFINE = "no-refine"
    ARGMAX_REFINE = "argmax-refine"
    DIRECT_MAPPING = "direct-mapping"
    PURE_NOISE = "pure-noise"


# Runs that are not a pseudo-label method on their own.
SUPERVISED = "supervised"
GCDR_MT = "gcdr-mt"
VAT_MT = "vat-mt"
ALL_RUNS = [m.value for m in PseudoLabelMethod] + [SUPERVISED, GCDR_MT, VAT_MT]


def schedule_from(cfg: ExperimentConfig) -> NoiseSchedule:
    return NoiseSchedule.linear(cfg.teacher.T, cfg.teacher.beta_start, cfg.teacher.beta_end)


def scene_params(cfg: ExperimentConfig) -> SceneParams:
    d = cfg.dataset
    return SceneParams(grid=d.grid, sigma=d.sigma, object_sigma=d.sigma, cone_extent=d.cone_extent,
                       max_distractors=d.max_distractors, direction_jitter_deg=d.direction_jitter_deg,
                       decoy_prob=d.decoy_prob, decoy_min_angle_deg=d.decoy_min_angle_deg,
                       decoy_max_angle_deg=d.decoy_max_angle_deg, saliency_range=(d.saliency_min, d.saliency_max),
                       target_saliency_range=(d.target_saliency_min, 1.0))


def prior_mix(cfg: ExperimentConfig) -> PriorQualityMix:
    probs = tuple(float(v) for v in cfg.dataset.prior_probs.split(","))
    return PriorQualityMix(probs=probs)


def denoiser_config(cfg: ExperimentConfig) -> DenoiserConfig:
    t = cfg.teacher
    return DenoiserConfig(base=t.base, time_dim=t.time_dim, lr=t.lr, batch_size=t.batch_size, steps=t.steps)


# ------------------------------------------------------------------ regressors

def train_regressor(inputs: np.ndarray, targets: np.ndarray, *, base: int, lr: float, batch_size: int,
                    steps: int, seed: int, labeled_mask: np.ndarray | None = None, labeled_per_batch: int = 0,
                    extra_loss=None, after_step=None):
    """MSE regression of heatmaps from input channels with a small U-Net (no timestep).

    With ``labeled_per_batch > 0`` every batch holds that many rows drawn from
    ``labeled_mask`` and fills the rest from the other rows.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if len(inputs) == 0:
        raise InvalidArgument("cannot train on an empty set")
    net = build_unet({"in_channels": inputs.shape[1], "base": base, "time_dim": 0}, seed)
    opt = engine.make_optimizer(net.parameters(), lr)
    rng = np.random.default_rng([seed, 2])
    lab = unl = None
    if labeled_mask is not None and labeled_per_batch > 0:
        lab = np.flatnonzero(labeled_mask)
        unl = np.flatnonzero(~labeled_mask)
        if len(lab) == 0 or len(unl) == 0:
            lab = unl = None
    trace = []
    net.train()
    for step in range(steps):
        if lab is None:
            idx = rng.integers(0, len(inputs), size=min(batch_size, len(inputs)))
        else:
            k = min(labeled_per_batch, batch_size)
            idx = np.concatenate([lab[rng.integers(0, len(lab), size=k)],
                                  unl[rng.integers(0, len(unl), size=batch_size - k)]])
        pred = net(torch.from_numpy(inputs[idx]))
        loss = x0_loss(pred, torch.from_numpy(targets[idx]))
        total = loss if extra_loss is None else loss + extra_loss(net, step)
        if not torch.isfinite(total):
            raise NumericalFailure(f"non-finite regression loss at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        trace.append(loss.item())
        if after_step is not None:
            after_step(net, step)
    net.eval()
    return net, trace


def predict(net: UNet, inputs: np.ndarray, chunk: int = 256) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float32)
    out = []
    with torch.no_grad():
        for s in range(0, len(inputs), chunk):
            out.append(net(torch.from_numpy(inputs[s:s + chunk])).numpy())
    return np.concatenate(out) if out else np.empty((0,) + inputs.shape[2:], dtype=np.float32)


@dataclass
class StudentModel:
    net: UNet
    trace: list

    def predict(self, conditions: np.ndarray) -> np.ndarray:
        return predict(self.net, conditions)


def train_student(conditions: np.ndarray, targets: np.ndarray, labeled_mask: np.ndarray,
                  cfg: ExperimentConfig, seed: int) -> StudentModel:
    """Minimize mean pixel MSE over ground-truth and pseudo-labeled samples alike."""
    s = cfg.student
    net, trace = train_regressor(conditions, targets, base=s.base, lr=s.lr, batch_size=s.batch_size,
                                 steps=s.steps, seed=seed, labeled_mask=labeled_mask,
                                 labeled_per_batch=s.labeled_per_batch)
    return StudentModel(net, trace)


def train_direct_mapping(labeled: Dataset, cfg: ExperimentConfig, seed: int) -> UNet:
    """Prior -> ground-truth regressor, trained on the labeled split only."""
    s = cfg.student
    net, _ = train_regressor(labeled.priors[:, None], labeled.gt_heatmaps, base=s.base, lr=s.lr,
                             batch_size=min(s.batch_size, 32), steps=s.mapper_steps, seed=seed + 17)
    return net


# ------------------------------------------------------------------ pseudo labels

def pseudo_label(method: PseudoLabelMethod | str, unlabeled: UnlabeledView, *, cfg: ExperimentConfig,
                 seed: int, teacher: UNet | None = None, mapper: UNet | None = None) -> np.ndarray:
    """Pseudo-annotations for unlabeled samples. Only conditions and priors are visible here."""
    method = PseudoLabelMethod(method)
    schedule = schedule_from(cfg)
    sigma = cfg.dataset.sigma
    if method is PseudoLabelMethod.NO_REFINE:
        return unlabeled.priors.copy()
    if method is PseudoLabelMethod.ARGMAX_REFINE:
        size = cfg.dataset.grid
        from .heatmap import GridSize
        return render_gaussians(argmax_points(unlabeled.priors), sigma, GridSize.square(size))
    if method is PseudoLabelMethod.DIRECT_MAPPING:
        if mapper is None:
            raise InvalidArgument("direct mapping needs a trained prior->gt mapper")
        return np.clip(predict(mapper, unlabeled.priors[:, None]), 0.0, 1.0)
    if teacher is None or teacher.time_dim == 0:
        raise InvalidArgument(f"{method.value} needs a trained diffusion teacher")
    den = NetDenoiser(teacher).bind(unlabeled.conditions)
    if method is PseudoLabelMethod.GCDR:
        plan = InferencePlan(cfg.t_init(), cfg.sampler.n_steps)
        return refine(den, unlabeled.priors, plan, schedule, seed=seed, ids=unlabeled.ids)
    plan = InferencePlan(schedule.T, cfg.sampler.noise_steps)
    return sample_from_noise(den, len(unlabeled), unlabeled.priors.shape[1:], plan, schedule,
                             seed=seed, ids=unlabeled.ids)


# ------------------------------------------------------------------ mean teacher

class EmaTeacher:
    """Shadow copy of a network whose weights track an exponential moving average."""

    def __init__(self, net: UNet, decay: float):
        if not 0 <= decay <= 1:
            raise InvalidArgument(f"decay must be in [0, 1], got {decay}")
        self.decay = decay
        self.net = build_unet(net.config(), 0)
        self.net.load_state_dict(net.state_dict())
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def update(self, student: UNet) -> None:
        with torch.no_grad():
            for shadow, p in zip(self.net.parameters(), student.parameters()):
                shadow.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)


def ema_update(shadow: dict, student: dict, decay: float) -> dict:
    """Functional EMA on name-keyed arrays: ``decay * shadow + (1 - decay) * student``."""
    if not 0 <= decay <= 1:
        raise InvalidArgument(f"decay must be in [0, 1], got {decay}")
    if set(shadow) != set(student):
        raise InvalidArgument("shadow and student parameter names differ")
    out = {}
    for k, s in shadow.items():
        p = student[k]
        if np.shape(s) != np.shape(p):
            raise InvalidArgument(f"shape mismatch for {k}")
        out[k] = decay * s + (1.0 - decay) * p
    return out


def perturb_conditions(cond: np.ndarray, rng: np.random.Generator, shift_px: int, angle_deg: float) -> np.ndarray:
    """Head-mask translation and gaze-angle noise, drawn independently per sample."""
    out = cond.copy()
    for i in range(len(out)):
        if shift_px:
            dy, dx = rng.integers(-shift_px, shift_px + 1, size=2)
            out[i, 0] = np.roll(out[i, 0], (int(dy), int(dx)), axis=(0, 1))
        if angle_deg:
            a = math.radians(angle_deg) * rng.standard_normal()
            c, s = math.cos(a), math.sin(a)
            gx, gy = cond[i, 1], cond[i, 2]
            out[i, 1] = c * gx - s * gy
            out[i, 2] = s * gx + c * gy
    return out


def _ramp(cfg: ExperimentConfig, step: int, total: int) -> float:
    ramp = max(1, int(cfg.mt.ramp_fraction * total))
    return cfg.mt.consistency_weight * min(1.0, (step + 1) / ramp)


def mean_teacher_train(labeled: Dataset, unlabeled: UnlabeledView, cfg: ExperimentConfig, seed: int,
                       kind: str = "denoiser"):
    """Mean-teacher training of a diffusion denoiser (``kind='denoiser'``) or regressor.

    Supervised loss on labeled data plus a ramped KL consistency between the
    EMA teacher's and the student's normalized outputs on all data, under
    independent condition perturbations per branch. Returns
    ``(teacher_net, student_net, trace)``.
    """
    if cfg.mt.consistency_weight < 0:
        raise InvalidArgument("consistency weight must be >= 0")
    schedule = schedule_from(cfg)
    rng = np.random.default_rng([seed, 3])
    all_cond = np.concatenate([labeled.conditions, unlabeled.conditions])
    # clean-map proxies for the consistency inputs: gt where known, prior otherwise
    all_maps = np.concatenate([labeled.gt_heatmaps, unlabeled.priors])
    state: dict = {}

    def consistency(net, step):
        idx = rng.integers(0, len(all_cond), size=cfg.mt.consistency_batch)
        c_student = perturb_conditions(all_cond[idx], rng, cfg.mt.shift_px, cfg.mt.angle_deg)
        c_teacher = perturb_conditions(all_cond[idx], rng, cfg.mt.shift_px, cfg.mt.angle_deg)
        if kind == "denoiser":
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            noise = rng.standard_normal(all_maps[idx].shape).astype(np.float32)
            h_t = schedule.forward_sample(all_maps[idx], t, noise)[:, None]
            tt = torch.from_numpy(t)
            xs = torch.from_numpy(np.concatenate([h_t, c_student], 1))
            xt = torch.from_numpy(np.concatenate([h_t, c_teacher], 1))
            out_s = net(xs, tt)
            with torch.no_grad():
                out_t = state["ema"].net(xt, tt)
        else:
            out_s = net(torch.from_numpy(c_student))
            with torch.no_grad():
                out_t = state["ema"].net(torch.from_numpy(c_teacher))
        return _ramp(cfg, step, total_steps) * engine.kl_consistency(out_t, out_s)

    def after(net, step):
        state["ema"].update(net)

    if kind == "denoiser":
        dcfg = denoiser_config(cfg)
        total_steps = dcfg.steps
        net = build_unet({"in_channels": 1 + all_cond.shape[1], "base": dcfg.base,
                          "time_dim": dcfg.time_dim}, seed)
        state["ema"] = EmaTeacher(net, cfg.mt.ema_decay)
        net, trace = train_denoiser(labeled.gt_heatmaps, labeled.conditions, schedule, dcfg, seed,
                                    extra_loss=consistency, after_step=after, net=net)
    elif kind == "regressor":
        s = cfg.student
        total_steps = s.steps
        # train_regressor builds its own net from the same seed; mirror it for the EMA copy
        state["ema"] = EmaTeacher(build_unet({"in_channels": all_cond.shape[1], "base": s.base,
                                              "time_dim": 0}, seed), cfg.mt.ema_decay)
        net, trace = train_regressor(labeled.conditions, labeled.gt_heatmaps, base=s.base, lr=s.lr,
                                     batch_size=min(s.batch_size, len(labeled)), steps=s.steps, seed=seed,
                                     extra_loss=consistency, after_step=after)
    else:
        raise InvalidArgument(f"unknown mean-teacher kind {kind!r}")
    return state["ema"].net, net, trace


# ------------------------------------------------------------------ experiments

@dataclass
class TestSet:
    conditions: np.ndarray
    annotations: np.ndarray
    ids: np.ndarray


def make_testset(cfg: ExperimentConfig) -> TestSet:
    ds = make_dataset(cfg.dataset.test_n, 0.0, cfg.dataset.test_seed, scene_params(cfg), mix=None)
    rng = np.random.default_rng([cfg.dataset.test_seed, 0xA77])
    anns = jitter_annotations(ds.gt_points, cfg.eval.n_annotations, cfg.eval.annotation_sigma_px, ds.size, rng)
    return TestSet(ds.conditions, anns, ds.ids)


def evaluate_student(student: StudentModel, test: TestSet, cfg: ExperimentConfig, meta: dict) -> MetricsReport:
    preds = student.predict(test.conditions)
    return evaluate(preds, test.annotations, mode=cfg.eval.auc_mode, threshold=cfg.eval.auc_threshold,
                    sigma=cfg.dataset.sigma, ids=test.ids, meta=meta)


class SeedRun:
    """Caches per-seed artifacts (dataset, teachers, pseudo-labels) across methods."""

    def __init__(self, cfg: ExperimentConfig, seed: int, test: TestSet | None = None):
        self.cfg = cfg
        self.seed = seed
        self.data = make_dataset(cfg.dataset.n, cfg.dataset.labeled_fraction, seed, scene_params(cfg),
                                 prior_mix(cfg))
        self.labeled = self.data.labeled_part()
        self.unlabeled = self.data.unlabeled_view()
        self.test = test if test is not None else make_testset(cfg)
        self._teacher = None
        self._mt_teacher = None
        self._mapper = None
        self.timings: dict[str, float] = {}

    def _timed(self, name, fn):
        start = time.perf_counter()
        out = fn()
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start
        return out

    @property
    def teacher(self) -> UNet:
        if self._teacher is None:
            self._teacher = self._timed("teacher", lambda: train_denoiser(
                self.labeled.gt_heatmaps, self.labeled.conditions, schedule_from(self.cfg),
                denoiser_config(self.cfg), self.seed)[0])
        return self._teacher

    @property
    def mt_teacher(self) -> UNet:
        if self._mt_teacher is None:
            self._mt_teacher = self._timed("mt_teacher", lambda: mean_teacher_train(
                self.labeled, self.unlabeled, self.cfg, self.seed, kind="denoiser")[0])
        return self._mt_teacher

    @property
    def mapper(self) -> UNet:
        if self._mapper is None:
            self._mapper = self._timed("mapper", lambda: train_direct_mapping(self.labeled, self.cfg, self.seed))
        return self._mapper

    def pseudo_labels(self, method: str) -> np.ndarray:
        if method == GCDR_MT:
            return self._timed("pseudo", lambda: pseudo_label(
                PseudoLabelMethod.GCDR, self.unlabeled, cfg=self.cfg, seed=self.seed, teacher=self.mt_teacher))
        m = PseudoLabelMethod(method)
        kwargs = {}
        if m in (PseudoLabelMethod.GCDR, PseudoLabelMethod.PURE_NOISE):
            kwargs["teacher"] = self.teacher
        elif m is PseudoLabelMethod.DIRECT_MAPPING:
            kwargs["mapper"] = self.mapper
        return self._timed("pseudo", lambda: pseudo_label(m, self.unlabeled, cfg=self.cfg, seed=self.seed,
                                                          **kwargs))

    def run(self, method: str) -> MetricsReport:
        cfg = self.cfg
        meta = {"method": method, "fraction": cfg.dataset.labeled_fraction, "seed": self.seed,
                "t_init": cfg.t_init(), "steps": cfg.sampler.n_steps}
        if method == SUPERVISED:
            student = self._timed("student", lambda: train_student(
                self.labeled.conditions, self.labeled.gt_heatmaps, np.ones(len(self.labeled), bool),
                cfg, self.seed))
        elif method == VAT_MT:
            net = self._timed("student", lambda: mean_teacher_train(
                self.labeled, self.unlabeled, cfg, self.seed, kind="regressor")[0])
            student = StudentModel(net, [])
        else:
            pseudo = self.pseudo_labels(method)
            cond = np.concatenate([self.labeled.conditions, self.unlabeled.conditions])
            targets = np.concatenate([self.labeled.gt_heatmaps, pseudo])
            mask = np.zeros(len(cond), bool)
            mask[:len(self.labeled)] = True
            student = self._timed("student", lambda: train_student(cond, targets, mask, cfg, self.seed))
        return evaluate_student(student, self.test, cfg, meta)


def run_experiment(cfg: ExperimentConfig, methods, seeds, test: TestSet | None = None) -> list[MetricsReport]:
    """Generate, train teacher, pseudo-label, train student and evaluate for every (seed, method)."""
    cfg.validate()
    for m in methods:
        if m not in ALL_RUNS:
            raise InvalidArgument(f"unknown method {m!r}; choose from {ALL_RUNS}")
    test = test if test is not None else make_testset(cfg)
    reports = []
    for seed in seeds:
        run = SeedRun(cfg, seed, test)
        for m in methods:
            rep = run.run(m)
            log.info("seed %d %-15s avg %.4f min %.4f auc %.4f", seed, m, rep.mean_avg_dist,
                     rep.mean_min_dist, rep.mean_auc)
            reports.append(rep)
    return reports
