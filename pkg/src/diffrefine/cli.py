"""Command-line entry point: generate, train-teacher, refine, train-student, evaluate, ablate.

Artifacts of one seed live under ``<out-dir>/seed<k>/``. Each command writes
its outputs and then a ``manifest-<command>.json`` listing them.

Exit codes: 0 success, 2 usage error, 3 missing artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .config import ExperimentConfig
from .denoiser import NetDenoiser, UNet, build_unet, train_denoiser
from .errors import InvalidArgument, InvalidData, MissingArtifact, NumericalFailure
from .heatmap import argmax_points, write_pgm
from .metrics import write_per_sample, write_report_table
from .pipeline import (
    ALL_RUNS,
    GCDR_MT,
    SUPERVISED,
    VAT_MT,
    PseudoLabelMethod,
    StudentModel,
    denoiser_config,
    evaluate_student,
    make_testset,
    mean_teacher_train,
    prior_mix,
    pseudo_label,
    run_experiment,
    scene_params,
    schedule_from,
    train_direct_mapping,
    train_student,
)
from .sampler import InferencePlan, refine
from .synth import Dataset, make_dataset

log = logging.getLogger("diffrefine")

OUT_ENV = "DIFFREFINE_OUT"
EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


# ------------------------------------------------------------------ artifacts

@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def input_hash(self, root: Path) -> str:
        """sha256 over the config snapshot, the seed and every input file's bytes."""
        h = hashlib.sha256(json.dumps({"config": self.config, "seed": self.seed}, sort_keys=True).encode())
        for rel in sorted(self.inputs):
            h.update(rel.encode())
            h.update((root / rel).read_bytes())
        return h.hexdigest()

    def write(self, root: Path) -> Path:
        body = {"command": self.command, "seed": self.seed, "config": self.config,
                "inputs": sorted(self.inputs), "outputs": sorted(self.outputs),
                "input_hash": self.input_hash(root), "timings": self.timings,
                "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        path = root / f"manifest-{self.command}.json"
        atomic_write(path, (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())
        return path


def atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def save_array(path: Path, arr: np.ndarray) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.save(f, np.ascontiguousarray(arr), allow_pickle=False)
    tmp.replace(path)


def need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, stage)
    return path


def save_net(path: Path, net: UNet) -> None:
    engine.save_checkpoint(path, engine.module_state(net), {"unet": net.config()})


def load_net(path: Path, stage: str) -> UNet:
    state, meta = engine.load_checkpoint(need(path, stage))
    net = build_unet(meta["unet"], 0)
    engine.load_module_state(net, state)
    net.eval()
    return net


@dataclass
class Context:
    cfg: ExperimentConfig
    seed: int
    root: Path
    dump_pgm: int = 0

    @property
    def dataset_path(self) -> Path:
        return self.root / "dataset.gcdr"

    def teacher_path(self, mean_teacher: bool = False) -> Path:
        return self.root / ("teacher-mt.ckpt" if mean_teacher else "teacher.ckpt")

    def pseudo_path(self, method: str) -> Path:
        return self.root / f"pseudo-{method}.npy"

    def student_path(self, method: str) -> Path:
        return self.root / f"student-{method}.ckpt"

    def report_path(self, method: str) -> Path:
        return self.root / f"report-{method}.tsv"

    def manifest(self, command: str) -> RunManifest:
        return RunManifest(command, self.seed, self.cfg.to_dict())

    def rel(self, path: Path) -> str:
        return str(path.relative_to(self.root))

    def load_dataset(self) -> Dataset:
        return Dataset.load(need(self.dataset_path, "generate"))


# ------------------------------------------------------------------ commands

def cmd_generate(ctx: Context) -> RunManifest:
    cfg = ctx.cfg
    man = ctx.manifest("generate")
    start = time.perf_counter()
    ds = make_dataset(cfg.dataset.n, cfg.dataset.labeled_fraction, ctx.seed, scene_params(cfg), prior_mix(cfg))
    ds.save(ctx.dataset_path)
    man.outputs += [ctx.rel(ctx.dataset_path), ctx.rel(ctx.dataset_path) + ".manifest.json"]
    if ctx.dump_pgm:
        pgm_dir = ctx.root / "pgm"
        pgm_dir.mkdir(exist_ok=True)
        for i in range(min(ctx.dump_pgm, len(ds))):
            # ground truth on the left, prior on the right
            path = pgm_dir / f"sample{i:05d}.pgm"
            write_pgm(path, np.concatenate([ds.gt_heatmaps[i], ds.priors[i]], axis=1))
            man.outputs.append(ctx.rel(path))
    man.timings["generate"] = time.perf_counter() - start
    return man


def cmd_train_teacher(ctx: Context, mean_teacher: bool = False) -> RunManifest:
    cfg = ctx.cfg
    man = ctx.manifest("train-teacher-mt" if mean_teacher else "train-teacher")
    ds = ctx.load_dataset()
    man.inputs.append(ctx.rel(ctx.dataset_path))
    start = time.perf_counter()
    if mean_teacher:
        net = mean_teacher_train(ds.labeled_part(), ds.unlabeled_view(), cfg, ctx.seed, kind="denoiser")[0]
    else:
        lab = ds.labeled_part()
        net = train_denoiser(lab.gt_heatmaps, lab.conditions, schedule_from(cfg), denoiser_config(cfg),
                             ctx.seed)[0]
    path = ctx.teacher_path(mean_teacher)
    save_net(path, net)
    man.outputs.append(ctx.rel(path))
    man.timings["teacher"] = time.perf_counter() - start
    return man


def cmd_refine(ctx: Context, method: str) -> RunManifest:
    cfg = ctx.cfg
    man = ctx.manifest(f"refine-{method}")
    ds = ctx.load_dataset()
    man.inputs.append(ctx.rel(ctx.dataset_path))
    view = ds.unlabeled_view()
    start = time.perf_counter()
    if method == GCDR_MT:
        path = ctx.teacher_path(True)
        teacher = load_net(path, "train-teacher --mean-teacher")
        man.inputs.append(ctx.rel(path))
        pseudo = pseudo_label(PseudoLabelMethod.GCDR, view, cfg=cfg, seed=ctx.seed, teacher=teacher)
    else:
        m = PseudoLabelMethod(method)
        kwargs = {}
        if m in (PseudoLabelMethod.GCDR, PseudoLabelMethod.PURE_NOISE):
            path = ctx.teacher_path()
            kwargs["teacher"] = load_net(path, "train-teacher")
            man.inputs.append(ctx.rel(path))
        elif m is PseudoLabelMethod.DIRECT_MAPPING:
            mapper = train_direct_mapping(ds.labeled_part(), cfg, ctx.seed)
            save_net(ctx.root / "mapper.ckpt", mapper)
            man.outputs.append("mapper.ckpt")
            kwargs["mapper"] = mapper
        pseudo = pseudo_label(m, view, cfg=cfg, seed=ctx.seed, **kwargs)
    if not np.all(np.isfinite(pseudo)):
        raise NumericalFailure(f"non-finite pseudo-labels from {method}")
    save_array(ctx.pseudo_path(method), pseudo.astype(np.float32))
    man.outputs.append(ctx.rel(ctx.pseudo_path(method)))
    man.timings["refine"] = time.perf_counter() - start
    return man


def cmd_train_student(ctx: Context, method: str) -> RunManifest:
    cfg = ctx.cfg
    man = ctx.manifest(f"train-student-{method}")
    ds = ctx.load_dataset()
    man.inputs.append(ctx.rel(ctx.dataset_path))
    lab = ds.labeled_part()
    start = time.perf_counter()
    if method == SUPERVISED:
        net = train_student(lab.conditions, lab.gt_heatmaps, np.ones(len(lab), bool), cfg, ctx.seed).net
    elif method == VAT_MT:
        net = mean_teacher_train(lab, ds.unlabeled_view(), cfg, ctx.seed, kind="regressor")[0]
    else:
        path = need(ctx.pseudo_path(method), f"refine --method {method}")
        man.inputs.append(ctx.rel(path))
        pseudo = np.load(path, allow_pickle=False)
        unl = ds.unlabeled_view()
        if len(pseudo) != len(unl):
            raise InvalidData(f"{path}: {len(pseudo)} pseudo-labels for {len(unl)} unlabeled samples")
        cond = np.concatenate([lab.conditions, unl.conditions])
        targets = np.concatenate([lab.gt_heatmaps, pseudo])
        mask = np.zeros(len(cond), bool)
        mask[:len(lab)] = True
        net = train_student(cond, targets, mask, cfg, ctx.seed).net
    save_net(ctx.student_path(method), net)
    man.outputs.append(ctx.rel(ctx.student_path(method)))
    man.timings["student"] = time.perf_counter() - start
    return man


def cmd_evaluate(ctx: Context, method: str) -> RunManifest:
    cfg = ctx.cfg
    man = ctx.manifest(f"evaluate-{method}")
    path = ctx.student_path(method)
    net = load_net(path, f"train-student --method {method}")
    man.inputs.append(ctx.rel(path))
    start = time.perf_counter()
    meta = {"method": method, "fraction": cfg.dataset.labeled_fraction, "seed": ctx.seed,
            "t_init": cfg.t_init(), "steps": cfg.sampler.n_steps}
    report = evaluate_student(StudentModel(net, []), make_testset(cfg), cfg, meta)
    write_report_table(ctx.report_path(method), [report])
    samples = ctx.root / f"samples-{method}.json"
    write_per_sample(samples, report)
    man.outputs += [ctx.rel(ctx.report_path(method)), ctx.rel(samples)]
    man.timings["evaluate"] = time.perf_counter() - start
    print(f"{method}\tavg_dist={report.mean_avg_dist:.4f}\tmin_dist={report.mean_min_dist:.4f}"
          f"\tauc={report.mean_auc:.4f}")
    return man


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_ablate(ctx: Context, methods: list[str], seeds: list[int], t_inits: list[int],
               n_steps: list[int], radius_px: float = 2.0) -> RunManifest:
    """Method grid over seeds, then the (t_init x n_steps) grid on the first seed.

    The refinement grid scores pseudo-labels of the unlabeled split directly:
    ``pseudo_avg_dist`` is the peak distance to the hidden ground truth and
    ``faithfulness`` the share of peaks within ``radius_px`` of the prior peak.
    """
    cfg = ctx.cfg
    man = ctx.manifest("ablate")
    start = time.perf_counter()
    reports = run_experiment(cfg, methods, seeds)
    write_report_table(ctx.root / "ablate-methods.tsv", reports)
    man.outputs.append("ablate-methods.tsv")
    man.timings["methods"] = time.perf_counter() - start

    start = time.perf_counter()
    seed = seeds[0]
    ds = make_dataset(cfg.dataset.n, cfg.dataset.labeled_fraction, seed, scene_params(cfg), prior_mix(cfg))
    lab = ds.labeled_part()
    schedule = schedule_from(cfg)
    teacher = train_denoiser(lab.gt_heatmaps, lab.conditions, schedule, denoiser_config(cfg), seed)[0]
    unl = ds.subset(~ds.labeled)
    den = NetDenoiser(teacher).bind(unl.conditions)
    prior_peaks = argmax_points(unl.priors)
    radius = radius_px / (cfg.dataset.grid - 1)
    rows, curve = [], {}
    for t in t_inits:
        for k in n_steps:
            out = refine(den, unl.priors, InferencePlan(t, k), schedule, seed=seed, ids=unl.ids)
            peaks = argmax_points(out)
            dist = float(np.mean(np.linalg.norm(peaks - unl.gt_points, axis=1)))
            faith = float(np.mean(np.linalg.norm(peaks - prior_peaks, axis=1) <= radius))
            rows.append([t, k, f"{dist:.6f}", f"{faith:.6f}"])
            if k == cfg.sampler.n_steps:
                curve[t] = faith
    _write_tsv(ctx.root / "ablate-refine.tsv", ["t_init", "n_steps", "pseudo_avg_dist", "faithfulness"], rows)
    _write_tsv(ctx.root / "faithfulness-curve.tsv", ["x", "y"], [[t, f"{v:.6f}"] for t, v in sorted(curve.items())])
    man.outputs += ["ablate-refine.tsv", "faithfulness-curve.tsv"]
    man.timings["refine_grid"] = time.perf_counter() - start
    return man


# ------------------------------------------------------------------ argument parsing

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffrefine", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="INI file with [dataset] [teacher] [sampler] [student] [mt] [eval]")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable; wins over --config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=None,
                   help=f"output root (default: ${OUT_ENV} or ./runs)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--dump-pgm", type=int, default=0, metavar="N", help="write N gt|prior PGM images")
    p.add_argument("--fraction", type=float, help="shortcut for --set dataset.labeled_fraction=...")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="write the synthetic dataset")
    t = sub.add_parser("train-teacher", help="train the diffusion teacher on the labeled split")
    t.add_argument("--mean-teacher", action="store_true", help="train with mean-teacher consistency")
    methods = [m.value for m in PseudoLabelMethod] + [GCDR_MT]
    r = sub.add_parser("refine", help="pseudo-label the unlabeled split")
    r.add_argument("--method", choices=methods, default="gcdr")
    s = sub.add_parser("train-student", help="train the student on labels plus pseudo-labels")
    s.add_argument("--method", choices=ALL_RUNS, default="gcdr")
    e = sub.add_parser("evaluate", help="score a trained student on the test scenes")
    e.add_argument("--method", choices=ALL_RUNS, default="gcdr")
    a = sub.add_parser("ablate", help="method grid plus the refinement (t_init x n_steps) grid")
    a.add_argument("--methods", default="gcdr,direct-mapping,pure-noise,argmax-refine,no-refine")
    a.add_argument("--seeds", type=_int_list, default=None, help="comma-separated (default: --seed)")
    a.add_argument("--t-inits", type=_int_list, default=[50, 100, 150, 250, 350, 450])
    a.add_argument("--n-steps", type=_int_list, default=[1, 2, 5])
    return p


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        if not args.config.exists():
            raise MissingArtifact(args.config)
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidArgument(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if args.fraction is not None:
        cfg.dataset.labeled_fraction = args.fraction
    cfg.validate()
    return cfg


def run(args) -> RunManifest:
    cfg = load_config(args)
    out = args.out_dir or Path(os.environ.get(OUT_ENV, "runs"))
    root = out / f"seed{args.seed}"
    root.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, args.seed, root, args.dump_pgm)
    if args.command == "generate":
        man = cmd_generate(ctx)
    elif args.command == "train-teacher":
        man = cmd_train_teacher(ctx, args.mean_teacher)
    elif args.command == "refine":
        man = cmd_refine(ctx, args.method)
    elif args.command == "train-student":
        man = cmd_train_student(ctx, args.method)
    elif args.command == "evaluate":
        man = cmd_evaluate(ctx, args.method)
    else:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        man = cmd_ablate(ctx, methods, args.seeds or [args.seed], args.t_inits, args.n_steps)
    man.write(root)
    return man


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    engine.configure(args.threads)
    try:
        run(args)
    except (MissingArtifact, InvalidData) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
