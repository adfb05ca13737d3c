"""Command-line experiment harness.

Every command reads a JSON config (``--config``), writes into ``--out`` and
stamps each CSV row with the config hash. Re-running a command with the same
config and flags reproduces every non-timing column byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import channel_sim as cs
from . import numerics as nx
from . import training as tr
from .backbone import StudentConfig, StudentModel
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash, load_config
from .distill import RelationConfig
from .errors import ContractError, CsiAlmError
from .estimators import CSIALMRegressor, pretrain_backbone
from .numerics import AdamState

DATASET_FILE = "dataset.bin"
RESULT_COLUMNS = ("experiment", "model", "condition", "nmse_db", "params", "inference_us", "seed", "config_hash")
VELOCITY_COLUMNS = ("model", "velocity_kmh", "n_samples", "nmse_db", "seed", "config_hash")
SNR_COLUMNS = ("model", "snr_db", "velocity_kmh", "nmse_db", "seed", "config_hash")
COST_COLUMNS = ("model", "total_params", "trainable_params", "trainable_fraction", "latency_us_median", "runs",
                "config_hash")
TIMING_COLUMNS = {"wall_ms", "inference_us", "latency_us_median"}


# -- small helpers ------------------------------------------------------------

def write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    return path


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


class Context:
    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.cfg = load_config(args.config, command)
        seeds = [args.seed] if args.seed is not None else list(self.cfg.get("seeds", [0]))
        self.seeds = seeds
        self.seed = seeds[0]
        self.few_shot = args.few_shot
        self.out = Path(args.out)
        self.hash = config_hash(self.cfg, seeds=seeds, few_shot=self.few_shot)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def scenario(self) -> cs.ScenarioConfig:
        return cs.ScenarioConfig.from_dict(self.cfg["scenario"])

    def dataset(self) -> cs.DatasetSplit:
        path = getattr(self.args, "data", None)
        path = Path(path) if path else self.out / DATASET_FILE
        counts = self.cfg["dataset"]
        if path.exists():
            ds = cs.read_dataset(path)
            expected = (self.scenario, counts["n_train"], counts["n_val"], counts["n_test"])
            if (ds.config, len(ds.train), len(ds.val), len(ds.test)) != expected:
                raise ContractError(f"{path} was generated from a different scenario or split sizes")
            return ds
        if getattr(self.args, "data", None):
            raise FileNotFoundError(f"dataset not found: {path}")
        return cs.make_dataset(self.scenario, counts["n_train"], counts["n_val"], counts["n_test"])

    def train_split(self, ds: cs.DatasetSplit) -> cs.SampleSet:
        if self.few_shot is None:
            return ds.train
        return tr.few_shot_subset(ds.train, self.few_shot, self.seed)


def teacher_estimator(cfg: dict, seed: int, ablation: str | None = None) -> CSIALMRegressor:
    t, train = cfg["teacher"], cfg["train"]
    ablation = ablation or t["ablation"]
    return CSIALMRegressor(
        layers=t["layers"], hidden=t["hidden"], heads=t["heads"], vocab=t["vocab"],
        max_positions=t["max_positions"], lora_rank=t["lora_rank"], lora_alpha=t["lora_alpha"],
        frozen_base=t["frozen_base"], pretrained=t["pretrained"] and ablation != "no_pretrain",
        pretrain_steps=t["pretrain_steps"], corpus=dict(t["corpus"]), patch_size=t["patch_size"],
        cssa_dim=t["cssa_dim"], dict_size=t["dict_size"], anchors=t["anchors"], prompts=t["prompts"],
        use_cross_modal=ablation != "no_cross_modal", use_prompts=ablation != "no_prompts",
        use_alignment=ablation != "no_alignment", lambda1=train["lambda1"], epochs=train["epochs"],
        batch_size=train["batch_size"], lr=train["lr"], patience=train["patience"], seed=seed,
    )


_PRETRAIN_CACHE: dict = {}


def _pretrained(est: CSIALMRegressor):
    if not est.pretrained:
        return None
    key = (est.backbone_config(), est.corpus_config(), est.pretrain_steps, est.seed)
    if key not in _PRETRAIN_CACHE:
        _PRETRAIN_CACHE[key] = pretrain_backbone(est.backbone_config(), est.pretrain_steps, est.seed,
                                                 est.corpus_config()).weights
    return _PRETRAIN_CACHE[key]


# -- checkpoints ---------------------------------------------------------------

def _run_meta(run: tr.TrainRun) -> dict:
    return {"epochs_run": run.epochs_run, "steps": run.steps, "best_epoch": run.best_epoch,
            "best_val_nmse": run.best_val_nmse, "stopped_early": run.stopped_early, "log": run.log,
            "adam_step": run.optimizer.step if run.optimizer else 0}


def save_model(path: Path, model, kind: str, params: dict, n_subcarriers: int, ctx: Context,
               run: tr.TrainRun | None = None) -> Path:
    state = dict(model.state_dict())
    if run is not None and run.optimizer is not None and run.optimizer.m:
        for i, (m, v) in enumerate(zip(run.optimizer.m, run.optimizer.v)):
            state[f"optim:m:{i:04d}"] = m
            state[f"optim:v:{i:04d}"] = v
    meta = {"kind": kind, "params": params, "n_subcarriers": n_subcarriers, "config_hash": ctx.hash,
            "seed": ctx.seed, "run": _run_meta(run) if run is not None else None}
    return save_checkpoint(path, state, meta)


# a resumed run may extend its schedule but not change the model
_SCHEDULE_KEYS = {"epochs", "patience", "lr", "batch_size"}


def _arch(params: dict) -> dict:
    return {k: v for k, v in params.items() if k not in _SCHEDULE_KEYS}


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, meta, optimizer moments)."""
    state, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "teacher":
        model = CSIALMRegressor(**meta["params"]).build(meta["n_subcarriers"])
    elif kind == "student":
        model = StudentModel(meta["n_subcarriers"], StudentConfig(**meta["params"]))
    else:
        raise ContractError(f"{path}: unknown model kind {kind!r}")
    optim = {k: v for k, v in state.items() if k.startswith("optim:")}
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("optim:")})
    model.eval()
    return model, meta, optim


def _restore_run(meta: dict, optim: dict, cfg: tr.TrainConfig, lr: float) -> tr.TrainRun:
    info = meta.get("run") or {}
    run = tr.TrainRun(cfg, log=list(info.get("log", [])), epochs_run=info.get("epochs_run", 0),
                      steps=info.get("steps", 0), best_epoch=info.get("best_epoch", -1),
                      best_val_nmse=info.get("best_val_nmse", float("inf")))
    if optim:
        n = len(optim) // 2
        run.optimizer = AdamState(lr=lr, step=info.get("adam_step", 0),
                                  m=[optim[f"optim:m:{i:04d}"] for i in range(n)],
                                  v=[optim[f"optim:v:{i:04d}"] for i in range(n)])
    return run


def _metric_rows(run: tr.TrainRun, ctx: Context):
    return [{**row, "seed": ctx.seed, "config_hash": ctx.hash} for row in run.log]


METRIC_COLUMNS = tr.LOG_COLUMNS + ("seed", "config_hash")


# -- commands ------------------------------------------------------------------

def cmd_generate(ctx: Context) -> list[Path]:
    counts = ctx.cfg["dataset"]
    ds = cs.make_dataset(ctx.scenario, counts["n_train"], counts["n_val"], counts["n_test"])
    ds.extra["config_hash"] = ctx.hash
    path, sidecar = cs.write_dataset(ctx.out / DATASET_FILE, ds)
    return [path, sidecar]


def cmd_train(ctx: Context) -> list[Path]:
    ds = ctx.dataset()
    est = teacher_estimator(ctx.cfg, ctx.seed)
    name = ctx.args.name or ("teacher" if ctx.cfg["teacher"]["ablation"] == "none"
                             else f"teacher_{ctx.cfg['teacher']['ablation']}")
    ckpt = ctx.out / f"{name}.ckpt"
    train_cfg = est._train_config()
    run = None
    if ctx.args.resume:
        model, meta, optim = load_model(ckpt)
        if _arch(meta["params"]) != _arch(est.get_params()):
            raise ContractError(f"{ckpt} was trained with different model settings; cannot resume")
        model.train()
        run = _restore_run(meta, optim, train_cfg, est.lr)
    else:
        model = est.build(ds.config.F, _pretrained(est))
    model, run = tr.train_teacher(ctx.train_split(ds), ds.val, model, train_cfg,
                                  tr.TeacherLossConfig(est.lambda1), run)
    save_model(ckpt, model, "teacher", est.get_params(), ds.config.F, ctx, run)
    metrics = write_csv(ctx.out / f"metrics_{name}.csv", METRIC_COLUMNS, _metric_rows(run, ctx))
    return [ckpt, metrics]


def student_settings(cfg: dict) -> tuple[StudentConfig, tr.TrainConfig, tr.StudentLossConfig]:
    s, d = cfg["student"], cfg["distill"]
    scfg = StudentConfig(layers=s["layers"], hidden=s["hidden"], heads=s["heads"], prompt_len=s["prompt_len"],
                         max_positions=s["max_positions"])
    alpha = tuple(tuple(int(a) for a in row) for row in d["alpha"])
    loss = tr.StudentLossConfig(d["lambda2"], RelationConfig(d["relation_heads"], alpha))
    return scfg, d, loss


def cmd_distill(ctx: Context) -> list[Path]:
    ds = ctx.dataset()
    scfg, d, loss = student_settings(ctx.cfg)
    train_cfg = tr.TrainConfig(epochs=d["epochs"], batch_size=d["batch_size"], lr=d["lr"], seed=ctx.seed,
                               patience=d["patience"])
    teacher = None
    if loss.lambda2 > 0:
        teacher_path = Path(ctx.args.teacher) if ctx.args.teacher else ctx.out / "teacher.ckpt"
        if not teacher_path.exists():
            raise FileNotFoundError(f"teacher checkpoint not found: {teacher_path}")
        teacher, _, _ = load_model(teacher_path)
    name = ctx.args.name or ("student" if teacher is not None else "student_plain")
    ckpt = ctx.out / f"{name}.ckpt"
    run = None
    if ctx.args.resume:
        student, meta, optim = load_model(ckpt)
        student.train()
        run = _restore_run(meta, optim, train_cfg, d["lr"])
    else:
        student = StudentModel(ds.config.F, scfg, seed=ctx.seed)
    student, run = tr.train_student(ctx.train_split(ds), ds.val, teacher, student, train_cfg, loss, run)
    params = {f: getattr(scfg, f) for f in ("layers", "hidden", "heads", "prompt_len", "ffn_mult", "max_positions")}
    save_model(ckpt, student, "student", params, ds.config.F, ctx, run)
    metrics = write_csv(ctx.out / f"metrics_{name}.csv", METRIC_COLUMNS, _metric_rows(run, ctx))
    return [ckpt, metrics]


def _checkpoints(ctx: Context) -> list[tuple[str, Path]]:
    given = getattr(ctx.args, "checkpoint", None) or []
    pairs = []
    for item in given:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        pairs.append((name, Path(path)))
    if not given:
        pairs = [(p.stem, p) for p in sorted(ctx.out.glob("*.ckpt"))]
    return pairs


class _Persistence:
    def predict(self, samples: cs.SampleSet) -> np.ndarray:
        return samples.history[..., -1]


class _Zero:
    def predict(self, samples: cs.SampleSet) -> np.ndarray:
        return np.zeros_like(samples.target)


class _Neural:
    def __init__(self, model):
        self.model = model

    def predict(self, samples: cs.SampleSet) -> np.ndarray:
        return tr.predict_samples(self.model, samples)


def _timed_predict(predictor, samples):
    start = time.perf_counter()
    pred = predictor.predict(samples)
    elapsed = (time.perf_counter() - start) * 1e6 / max(len(samples), 1)
    return pred, elapsed


def _noisy(samples: cs.SampleSet, snr_db: float, seed: int, index: int) -> cs.SampleSet:
    rng = np.random.default_rng([seed, 11, index])
    hist = cs.add_noise(samples.history, snr_db, rng, sample_axis=0).astype(np.complex64)
    return cs.SampleSet(hist, samples.target, samples.velocity_kmh)


def cmd_eval(ctx: Context) -> list[Path]:
    ds = ctx.dataset()
    ev = ctx.cfg["eval"]
    pairs = _checkpoints(ctx)
    if not pairs:
        raise FileNotFoundError(f"no checkpoints to evaluate in {ctx.out}")
    models = [("persistence", _Persistence(), 0), ("zero", _Zero(), 0)]
    for name, path in pairs:
        model, _, _ = load_model(path)
        models.append((name, _Neural(model), model.num_parameters()))
    test = ds.test
    snr_v = ev["snr_velocity_kmh"]
    snr_set = test.subset(np.flatnonzero(test.velocity_kmh == snr_v))
    if len(snr_set) == 0:
        raise ContractError(f"no test samples at the SNR sweep velocity {snr_v} km/h")
    snr_inputs = [_noisy(snr_set, s, ev["noise_seed"], i) for i, s in enumerate(ev["snr_grid_db"])]

    cells = [(mi, None) for mi in range(len(models))]
    cells += [(mi, si) for mi in range(len(models)) for si in range(len(snr_inputs))]

    def run_cell(cell):
        mi, si = cell
        samples = test if si is None else snr_inputs[si]
        pred, us = _timed_predict(models[mi][1], samples)
        return pred, us

    with ThreadPoolExecutor(max_workers=max(1, ev["workers"])) as pool:
        outputs = list(pool.map(run_cell, cells))

    pred_dir = ctx.out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    results, velocity_rows, snr_rows = [], [], []
    base = {"seed": ctx.seed, "config_hash": ctx.hash}
    for (mi, si), (pred, us) in zip(cells, outputs):
        name, _, n_params = models[mi]
        if si is None:
            np.savez(pred_dir / f"{name}.npz", prediction=pred, target=test.target, velocity_kmh=test.velocity_kmh)
            results.append({"experiment": "test", "model": name, "condition": "all",
                            "nmse_db": tr.to_db(tr.nmse(pred, test.target), tr.DB_FLOOR), "params": n_params,
                            "inference_us": us, **base})
            for v in np.unique(test.velocity_kmh):
                sel = test.velocity_kmh == v
                db = tr.to_db(tr.nmse(pred[sel], test.target[sel]), tr.DB_FLOOR)
                velocity_rows.append({"model": name, "velocity_kmh": float(v), "n_samples": int(sel.sum()),
                                      "nmse_db": db, **base})
                results.append({"experiment": "velocity", "model": name, "condition": f"v={v:g}",
                                "nmse_db": db, "params": n_params, "inference_us": us, **base})
        else:
            snr = ev["snr_grid_db"][si]
            db = tr.to_db(tr.nmse(pred, snr_set.target), tr.DB_FLOOR)
            snr_rows.append({"model": name, "snr_db": float(snr), "velocity_kmh": float(snr_v), "nmse_db": db, **base})
            results.append({"experiment": "snr", "model": name, "condition": f"snr={snr:g}", "nmse_db": db,
                            "params": n_params, "inference_us": us, **base})
    return [
        write_csv(ctx.out / "results.csv", RESULT_COLUMNS, results),
        write_csv(ctx.out / "velocity.csv", VELOCITY_COLUMNS, velocity_rows),
        write_csv(ctx.out / "snr.csv", SNR_COLUMNS, snr_rows),
    ]


def median_latency_us(model, n_subcarriers: int, t_history: int, runs: int, warmup: int = 5) -> float:
    x = np.random.default_rng(0).normal(size=(1, 2 * n_subcarriers, t_history)).astype(np.float32)
    model.eval()
    times = []
    with nx.no_grad():
        for i in range(warmup + runs):
            start = time.perf_counter()
            model(x)
            if i >= warmup:
                times.append((time.perf_counter() - start) * 1e6)
    return float(np.median(times))


def cmd_cost(ctx: Context) -> list[Path]:
    ev = ctx.cfg["eval"]
    scen = ctx.scenario
    entries = []
    if "teacher" in ctx.cfg and "train" in ctx.cfg:
        entries.append(("teacher(config)", teacher_estimator(ctx.cfg, ctx.seed).build(scen.F)))
    if "student" in ctx.cfg:
        scfg = student_settings({**ctx.cfg, "distill": ctx.cfg.get("distill", {"alpha": [[1, 0, 0]] * 3,
                                                                                "lambda2": 0.0,
                                                                                "relation_heads": 1})})[0]
        entries.append(("student(config)", StudentModel(scen.F, scfg, seed=ctx.seed)))
    for name, path in _checkpoints(ctx):
        entries.append((name, load_model(path)[0]))
    if not entries:
        raise FileNotFoundError("cost: no checkpoints found and no model sections in the config")
    rows = []
    for name, model in entries:
        total = model.num_parameters()
        trainable = model.num_parameters(trainable_only=True)
        rows.append({"model": name, "total_params": total, "trainable_params": trainable,
                     "trainable_fraction": trainable / total,
                     "latency_us_median": median_latency_us(model, scen.F, scen.T_history, ev["latency_runs"]),
                     "runs": ev["latency_runs"], "config_hash": ctx.hash})
    return [write_csv(ctx.out / "cost.csv", COST_COLUMNS, rows)]


def cmd_dump_embeddings(ctx: Context) -> list[Path]:
    ds = ctx.dataset()
    pairs = _checkpoints(ctx)
    path = dict(pairs).get("teacher") if not getattr(ctx.args, "checkpoint", None) else pairs[0][1]
    if path is None:
        raise FileNotFoundError(f"teacher checkpoint not found in {ctx.out}")
    model, meta, _ = load_model(path)
    if meta["kind"] != "teacher":
        raise ContractError("dump-embeddings needs a teacher checkpoint")
    n = ctx.cfg["eval"]["embed_samples"]
    x, _ = tr.sequences(ds.test)
    if n > len(x):
        raise ContractError(f"requested {n} CSI embeddings but the test split has {len(x)} sequences")
    csi, words = model.embeddings(x[:n])
    dim = csi.shape[1]
    columns = ("kind", "index") + tuple(f"e{i}" for i in range(dim)) + ("config_hash",)
    rows = []
    for kind, table in (("word", words), ("csi", csi)):
        for i, vec in enumerate(table):
            rows.append({"kind": kind, "index": i, **{f"e{j}": float(vec[j]) for j in range(dim)},
                         "config_hash": ctx.hash})
    return [write_csv(ctx.out / "embeddings.csv", columns, rows)]


def cmd_ablate(ctx: Context) -> list[Path]:
    ds = ctx.dataset()
    variants = ctx.cfg["ablation"]["variants"]
    rows, metric_rows = [], []
    per_variant: dict = {v: [] for v in variants}
    for seed in ctx.seeds:
        for variant in variants:
            est = teacher_estimator(ctx.cfg, seed, variant)
            model = est.build(ds.config.F, _pretrained(est))
            _, run = tr.train_teacher(ctx.train_split(ds), ds.val, model, est._train_config(),
                                      tr.TeacherLossConfig(est.lambda1))
            pred, us = _timed_predict(_Neural(model), ds.test)
            db = tr.to_db(tr.nmse(pred, ds.test.target), tr.DB_FLOOR)
            per_variant[variant].append(db)
            rows.append({"experiment": "ablation", "model": variant, "condition": f"seed={seed}", "nmse_db": db,
                         "params": model.num_parameters(), "inference_us": us, "seed": seed,
                         "config_hash": ctx.hash})
            metric_rows += [{**r, "variant": variant, "seed": seed, "config_hash": ctx.hash} for r in run.log]
    for variant in variants:
        rows.append({"experiment": "ablation", "model": variant, "condition": "median",
                     "nmse_db": float(np.median(per_variant[variant])), "params": "", "inference_us": "",
                     "seed": "", "config_hash": ctx.hash})
    return [
        write_csv(ctx.out / "ablation.csv", RESULT_COLUMNS, rows),
        write_csv(ctx.out / "metrics_ablation.csv", ("variant",) + METRIC_COLUMNS, metric_rows),
    ]


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "distill": cmd_distill, "eval": cmd_eval,
    "cost": cmd_cost, "dump-embeddings": cmd_dump_embeddings, "ablate": cmd_ablate,
}


def _fraction(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"few-shot fraction must be in (0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csialm", description="Channel prediction experiment harness.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config's seed list")
        p.add_argument("--few-shot", type=_fraction, default=None, metavar="FRACTION",
                       help="train on a velocity-stratified fraction of the training split")
        p.add_argument("--out", default="runs", help="output directory")
        if name != "generate":
            p.add_argument("--data", default=None, help="dataset file (default: OUT/dataset.bin or regenerate)")
        if name in ("train", "distill"):
            p.add_argument("--name", default=None, help="output stem for the checkpoint and metric log")
            p.add_argument("--resume", action="store_true", help="continue training from the checkpoint")
        if name == "distill":
            p.add_argument("--teacher", default=None, help="teacher checkpoint (default: OUT/teacher.ckpt)")
        if name in ("eval", "cost", "dump-embeddings"):
            p.add_argument("--checkpoint", action="append", default=None, metavar="[NAME=]PATH")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args, args.command)
        for path in COMMANDS[args.command](ctx):
            print(path)
    except (CsiAlmError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"csialm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
