"""Command-line driver: one subcommand per pipeline stage.

Every subcommand reads an optional JSON config (validated against the schema
in :data:`SCHEMAS`), writes its outputs plus a ``<output>.manifest.json``
recording content hashes, the resolved config, the seed and wall-clock time.
The environment variable ``MKDT_SEED`` overrides the config seed.

Failures print one JSON object to stderr (``{"error": ..., "message": ...,
"keys": [...]}``) and exit nonzero: 2 for invalid configs, 1 otherwise.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import jsonschema

from . import __version__, models
from . import datagen as dg
from . import distill as di
from . import evaluation as ev
from . import trajectories as tr
from . import variance as va
from .errors import ConfigError

log = logging.getLogger("mkdt")

SEED_ENV = "MKDT_SEED"

# ---------------------------------------------------------------------------
# schemas

_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}
_SEED = {"type": "integer", "minimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_DATA = _obj(
    {
        "d": _POS_INT,
        "num_classes": _POS_INT,
        "n": _POS_INT,
        "sigma_noise": _NONNEG,
        "sigma_aug": _NONNEG,
        "m": _POS_INT,
        "seed": _SEED,
        "outlier_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "outlier_scale": _NONNEG,
    }
)
_TRAIN_PROPS = {
    "epochs": _NONNEG_INT,
    "batch_size": _POS_INT,
    "lr": _NONNEG,
    "momentum": _NONNEG,
    "weight_decay": _NONNEG,
    "optimizer": {"enum": ["sgd", "adam"]},
    "ssl_loss": {"enum": ["barlow", "spectral"]},
    "sigma_aug": _NONNEG,
    "m": _POS_INT,
    "bt_lambda": _NONNEG,
    "adam_betas": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
    "adam_eps": _NONNEG,
}
_ARCH_PROPS = {"hidden": _POS_INT, "r": _POS_INT, "activation": {"enum": list(models.ACTIVATIONS)}}
_TRAIN = _obj(_TRAIN_PROPS)
_DISTILL_PROPS = {
    "S": _NONNEG_INT,
    "N": _POS_INT,
    "expert_epochs": _POS_INT,
    "T_plus": _NONNEG_INT,
    "pixel_lr": _NONNEG,
    "alpha_lr": _NONNEG,
    "batch_size": {"type": ["integer", "null"], "minimum": 1},
    "momentum": _NONNEG,
    "alpha0": {"type": "number", "exclusiveMinimum": 0},
    "seed": _SEED,
    "m": _POS_INT,
    "sigma_aug": _NONNEG,
    "ssl_loss": {"enum": ["barlow", "spectral"]},
    "bt_lambda": _NONNEG,
    "log_every": _POS_INT,
}
_PRETRAIN_PROPS = {
    "epochs": _NONNEG_INT,
    "batch_size": _POS_INT,
    "lr": {"type": ["number", "null"], "minimum": 0},
    "momentum": _NONNEG,
    "weight_decay": _NONNEG,
    "hidden": _POS_INT,
    "activation": {"enum": list(models.ACTIVATIONS)},
    "seed": _SEED,
}
_PROBE_PROPS = {
    "l2_weight": _NONNEG,
    "label_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "max_iter": _POS_INT,
    "grad_tol": {"type": "number", "exclusiveMinimum": 0},
    "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "seed": _SEED,
}
_METHOD = _obj(
    {
        "name": {"type": "string", "minLength": 1},
        "kind": {"enum": ["synthetic", "random", "none"]},
        "syn": {"type": "string"},
        "size": _POS_INT,
        "lr": {"type": ["number", "null"], "minimum": 0},
    },
    required=("name", "kind"),
)

SCHEMAS = {
    "gen-data": _DATA,
    "train-teacher": _obj({**_TRAIN_PROPS, **_ARCH_PROPS, "seed": _SEED}),
    "train-experts": _obj({**_TRAIN_PROPS, **_ARCH_PROPS, "seed": _SEED}),
    "select-init": _obj({"alpha0": {"type": "number", "exclusiveMinimum": 0}, "seed": _SEED}),
    "distill": _obj(_DISTILL_PROPS),
    "pretrain": _obj(_PRETRAIN_PROPS),
    "probe": _obj(_PROBE_PROPS),
    "compare": _obj(
        {
            "methods": {"type": "array", "items": _METHOD, "minItems": 1},
            "n_seeds": _POS_INT,
            "pretrain": _obj(_PRETRAIN_PROPS),
            "probe": _obj(_PROBE_PROPS),
            "seed": _SEED,
        },
        required=("methods",),
    ),
    "variance": _obj(
        {
            "data": _DATA,
            "batch_size": _POS_INT,
            "n_samples": {"type": "integer", "minimum": 2},
            "exact": {"type": "boolean"},
            "n_partitions": {"type": "integer", "minimum": 2},
            "lr": _NONNEG,
            "kinds": {"type": "array", "items": {"enum": ["sl", "ssl", "kd"]}, "minItems": 1},
            "lengths": {"type": "array", "items": _NONNEG_INT, "minItems": 1},
            "n_runs": {"type": "integer", "minimum": 2},
            "train": _TRAIN,
            "hidden": _POS_INT,
            "r": _POS_INT,
            "init_seed": _SEED,
            "seed": _SEED,
        }
    ),
    "pipeline": _obj(
        {
            "data": _DATA,
            "teacher": _obj({**_TRAIN_PROPS, **_ARCH_PROPS}),
            "experts": _obj({**_TRAIN_PROPS, **_ARCH_PROPS}),
            "k": _POS_INT,
            "init_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "distill": _obj(_DISTILL_PROPS),
            "pretrain": _obj(_PRETRAIN_PROPS),
            "baseline_lr": _NONNEG,
            "probe": _obj(_PROBE_PROPS),
            "n_seeds": _POS_INT,
            "seed": _SEED,
        }
    ),
}

# desk-scale defaults for the pipeline; stage commands fall back to module defaults
DESK_PIPELINE = {
    "data": {"d": 32, "num_classes": 10, "n": 2000, "sigma_noise": 0.3},
    "teacher": {**tr.TEACHER_DEFAULTS.to_dict(), "hidden": 64, "r": 16},
    "experts": {**tr.EXPERT_DEFAULTS.to_dict(), "hidden": 16},
    "k": 10,
    "init_fraction": 0.05,
    "distill": {},
    "pretrain": {},
    "baseline_lr": 0.1,
    "probe": {"label_fraction": 0.05},
    "n_seeds": 5,
    "seed": 0,
}


def schema_errors(command: str, config: dict) -> list[tuple[str, str]]:
    """``(key, message)`` for every schema violation; dotted keys for nested entries."""
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    out = []
    for err in sorted(validator.iter_errors(config), key=lambda e: list(map(str, e.absolute_path))):
        prefix = ".".join(str(p) for p in err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            out += [(_join(prefix, k), f"unknown key {k!r}") for k in extra]
        elif err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            out += [(_join(prefix, k), f"missing required key {k!r}") for k in missing]
        else:
            out.append((prefix or "<root>", err.message))
    return out


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def load_config(command: str, path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})", ["<root>"]) from exc
    errors = schema_errors(command, config)
    if errors:
        keys = [k for k, _ in errors]
        detail = "; ".join(f"{k}: {m}" for k, m in errors)
        raise ConfigError(f"{path}: invalid {command} config ({detail})", keys)
    return config


def resolve_seed(config: dict, default: int = 0) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip() != "":
        try:
            seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer", [SEED_ENV]) from exc
        if seed < 0:
            raise ConfigError(f"{SEED_ENV} must be non-negative", [SEED_ENV])
        return seed
    return int(config.get("seed", default))


# ---------------------------------------------------------------------------
# manifests


def content_hash(path) -> str:
    """Git blob hash (SHA-1 over ``b"blob <size>\\0" + content``)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_map(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            if not q.name.endswith(".manifest.json"):
                out[str(q)] = content_hash(q)
    return out


class Run:
    """Collects inputs/outputs of one subcommand and writes its manifest."""

    def __init__(self, command: str, argv, config_path, config: dict, seed: int):
        self.command, self.argv, self.config_path = command, list(argv), config_path
        self.config, self.seed = config, seed
        self.inputs, self.outputs = [], []
        self.extra: dict = {}
        self.t0 = time.perf_counter()

    def input(self, path):
        if path is not None:
            self.inputs.append(path)
        return path

    def output(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    def write_manifest(self, path=None) -> Path:
        if path is None:
            path = Path(str(self.outputs[0]) + ".manifest.json")
        record = {
            "command": self.command,
            "argv": self.argv,
            "config": None if self.config_path is None else str(self.config_path),
            "config_hash": None if self.config_path is None else content_hash(self.config_path),
            "resolved_config": self.config,
            "seed": self.seed,
            "inputs": _hash_map(self.inputs),
            "outputs": _hash_map(self.outputs),
            "wall_clock_s": time.perf_counter() - self.t0,
            "version": __version__,
            **self.extra,
        }
        Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        return Path(path)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _start(args, command: str) -> tuple[Run, dict]:
    config = load_config(command, getattr(args, "config", None))
    seed = resolve_seed(config)
    run = Run(command, args.argv, getattr(args, "config", None), config, seed)
    run.input(getattr(args, "config", None))
    return run, config


def _train_cfg(config: dict, base: tr.TrainConfig) -> tr.TrainConfig:
    picked = {k: v for k, v in config.items() if k in tr.TrainConfig.__dataclass_fields__}
    return tr.TrainConfig.from_dict({**base.to_dict(), **picked})


def _load_experts(path) -> list[tr.ExpertTrajectory]:
    files = sorted(Path(path).glob("*.traj"))
    if not files:
        raise FileNotFoundError(f"no .traj files in {path}")
    return [tr.load_trajectory(f) for f in files]


# ---------------------------------------------------------------------------
# subcommands


def make_dataset(config: dict, seed=None):
    """Dataset from a ``gen-data`` style config; returns ``(data, planted_indices, resolved)``."""
    config = dict(config)
    frac = config.pop("outlier_fraction", 0.0)
    scale = config.pop("outlier_scale", 4.0)
    if seed is not None:
        config["seed"] = seed
    cfg = dg.SparseCodingConfig(**config)
    resolved = {**cfg.to_dict(), "outlier_fraction": frac, "outlier_scale": scale}
    if frac > 0:
        data, planted = dg.generate_with_outliers(cfg, frac, scale)
        return data, [int(i) for i in planted], resolved
    return dg.generate_sparse_coding(cfg), [], resolved


def cmd_gen_data(args):
    run, config = _start(args, "gen-data")
    data, planted, run.config = make_dataset(config, run.seed)
    if planted:
        run.extra["planted_outliers"] = planted
    dg.save_dataset(run.output(args.out), data)
    run.write_manifest()


def cmd_train_teacher(args):
    run, config = _start(args, "train-teacher")
    data = dg.load_dataset(run.input(args.data))
    cfg = _train_cfg(config, tr.TEACHER_DEFAULTS)
    arch = models.teacher_arch(data.d, config.get("hidden", 64), config.get("r", 16))
    if "activation" in config:
        arch = models.ArchSpec(arch.kind, arch.dims, config["activation"])
    res = tr.train_teacher_ssl(data, arch, cfg, run.seed)
    traj = tr.ExpertTrajectory(res.checkpoints, arch, cfg, run.seed, "ssl", res.eval_loss)
    tr.save_trajectory(run.output(args.out), traj)
    run.config = {**cfg.to_dict(), "arch": arch.to_dict()}
    run.extra["epoch_loss"] = res.epoch_loss
    run.write_manifest()


def cmd_teacher_reps(args):
    run, _ = _start(args, "teacher-reps")
    data = dg.load_dataset(run.input(args.data))
    teacher = tr.load_trajectory(run.input(args.teacher))
    reps = tr.compute_teacher_reps(teacher.encoder_at(teacher.epochs), data)
    tr.save_teacher_reps(run.output(args.out), reps)
    run.write_manifest()


def cmd_train_experts(args):
    run, config = _start(args, "train-experts")
    data = dg.load_dataset(run.input(args.data))
    cfg = _train_cfg(config, tr.EXPERT_DEFAULTS)
    if args.objective == "kd":
        if args.reps is None:
            raise ConfigError("kd experts need --reps", ["--reps"])
        Z = tr.load_teacher_reps(run.input(args.reps)).Z
        r = Z.shape[1]
    else:
        Z, r = None, config.get("r", 16)
    arch = models.student_arch(data.d, config.get("hidden", 16), r)
    if "activation" in config:
        arch = models.ArchSpec(arch.kind, arch.dims, config["activation"])
    experts = tr.train_experts(data, Z, arch, cfg, args.k, run.seed, args.objective, args.threads)
    out = Path(args.out_dir)
    for i, e in enumerate(experts):
        tr.save_trajectory(run.output(out / f"expert_{i:03d}.traj"), e)
    run.config = {**cfg.to_dict(), "arch": arch.to_dict(), "k": args.k, "objective": args.objective}
    run.write_manifest(out / "experts.manifest.json")


def cmd_select_init(args):
    run, config = _start(args, "select-init")
    data = dg.load_dataset(run.input(args.data))
    reps = tr.load_teacher_reps(run.input(args.reps))
    if args.mode == "high-loss":
        if args.experts is None:
            raise ConfigError("high-loss selection needs --experts", ["--experts"])
        idx = di.select_high_loss_init(data, _load_experts(run.input(args.experts)), reps, args.size)
    else:
        idx = di.select_random_init(data.n, args.size, run.seed)
    syn = di.init_synthetic(data, reps, idx, config.get("alpha0", 0.1))
    di.save_synthetic(run.output(args.out), syn)
    run.config = {"mode": args.mode, "size": args.size, "alpha0": syn.alpha, "seed": run.seed}
    run.write_manifest()


def cmd_distill(args):
    run, config = _start(args, "distill")
    cfg = di.DistillConfig(**{**config, "seed": run.seed, "mode": args.mode})
    init = di.load_synthetic(run.input(args.init))
    if "alpha0" in config:
        init.alpha = cfg.alpha0
    experts = _load_experts(run.input(args.experts))
    cfg.check_experts(experts)
    syn, rows = di.run_distillation(experts, init, cfg)
    di.save_synthetic(run.output(args.out), syn)
    di.write_log_csv(run.output(args.log if args.log else str(args.out) + ".log.csv"), rows)
    run.config = cfg.to_dict()
    run.write_manifest()


def _pretrain_settings(config: dict) -> dict:
    return {
        "epochs": config.get("epochs", 20),
        "batch_size": config.get("batch_size", 256),
        "momentum": config.get("momentum", 0.0),
        "weight_decay": config.get("weight_decay", 1e-4),
        "lr": config.get("lr"),
        "hidden": config.get("hidden", 16),
        "activation": config.get("activation", "tanh"),
    }


def _student_for(syn: di.SyntheticDataset, s: dict) -> models.ArchSpec:
    return models.ArchSpec("mlp", (syn.D.shape[1], s["hidden"], syn.Z.shape[1]), s["activation"])


def _pretrain(syn, s: dict, seed: int, lr=None) -> models.Encoder:
    lr = s["lr"] if lr is None else lr
    return ev.pretrain_on_synthetic(
        syn, _student_for(syn, s), s["epochs"], seed, lr, s["batch_size"], s["momentum"], s["weight_decay"]
    )


def cmd_pretrain(args):
    run, config = _start(args, "pretrain")
    s = _pretrain_settings(config)
    syn = di.load_synthetic(run.input(args.syn))
    enc = _pretrain(syn, s, run.seed, args.lr)
    models.save_encoder(run.output(args.out), enc)
    lr = args.lr if args.lr is not None else s["lr"]
    run.config = {**s, "lr": syn.alpha if lr is None else lr, "seed": run.seed}
    run.write_manifest()


def _probe_cfg(config: dict, seed: int) -> ev.ProbeConfig:
    return ev.ProbeConfig(**{**config, "seed": seed})


def cmd_probe(args):
    run, config = _start(args, "probe")
    data = dg.load_dataset(run.input(args.data))
    enc = None if args.encoder is None else models.load_encoder(run.input(args.encoder))
    cfg = _probe_cfg(config, run.seed)
    res = ev.linear_probe(enc, data, cfg)
    record = {
        "accuracy": res.accuracy,
        "err": res.err,
        "per_class": {str(k): v for k, v in res.per_class.items()},
        "grad_norm": res.grad_norm,
        "n_train": res.n_train,
        "n_test": res.n_test,
        "config": asdict(cfg),
    }
    _write_json(run.output(args.out), record)
    run.config = asdict(cfg)
    run.write_manifest()


def _method_builder(method: dict, data, reps, s: dict, base_seed: int, base_dir: Path, run: Run):
    kind = method["kind"]
    if kind == "synthetic":
        if "syn" not in method:
            raise ConfigError(f"method {method['name']!r} needs 'syn'", [f"methods.{method['name']}.syn"])
        path = Path(method["syn"])
        path = path if path.is_absolute() else base_dir / path
        syn = di.load_synthetic(run.input(path))
        return lambda seed: _pretrain(syn, s, base_seed + seed, method.get("lr"))
    if kind == "random":
        if "size" not in method or reps is None:
            raise ConfigError(f"method {method['name']!r} needs 'size' and --reps", [f"methods.{method['name']}.size"])

        def build(seed):
            idx = di.select_random_init(data.n, method["size"], base_seed + seed)
            return _pretrain(di.init_synthetic(data, reps, idx), s, base_seed + seed, method.get("lr", 0.1))

        return build
    r = reps.Z.shape[1] if reps is not None else s.get("r", 16)
    arch = models.ArchSpec("mlp", (data.d, s["hidden"], r), s["activation"])
    return lambda seed: models.init(arch, "fan_in", [base_seed + seed, 0])


def cmd_compare(args):
    run, config = _start(args, "compare")
    data = dg.load_dataset(run.input(args.data))
    reps = None if args.reps is None else tr.load_teacher_reps(run.input(args.reps))
    s = _pretrain_settings(config.get("pretrain", {}))
    probe = _probe_cfg(config.get("probe", {}), config.get("probe", {}).get("seed", run.seed))
    base_dir = Path(args.config).parent if args.config else Path(".")
    names = [m["name"] for m in config["methods"]]
    if len(set(names)) != len(names):
        raise ConfigError("method names must be unique", ["methods"])
    methods = {m["name"]: _method_builder(m, data, reps, s, run.seed, base_dir, run) for m in config["methods"]}
    rows, summaries = ev.compare_methods(data, methods, probe, config.get("n_seeds", 5))
    ev.write_report_csv(run.output(args.out), rows)
    summary = [{"method": m.method, "mean": m.mean, "std": m.std, "accuracies": m.accuracies} for m in summaries]
    _write_json(run.output(str(args.out) + ".summary.json"), summary)
    run.config = {**config, "pretrain": s, "probe": asdict(probe), "seed": run.seed}
    run.write_manifest()
    for m in summaries:
        print(f"{m.method:>12s}  {m.mean:.4f} +- {m.std:.4f}")


def cmd_variance(args):
    run, config = _start(args, "variance")
    seed = run.seed
    rows = []
    if args.experiment in ("grad", "partition"):
        data = make_dataset(config.get("data", {}))[0]
        kinds = config.get("kinds", ["sl", "ssl"])
        b = config.get("batch_size", 2 if args.experiment == "grad" else 8)
        for kind in kinds:
            if kind not in va.LOSS_KINDS:
                raise ConfigError(f"{args.experiment} variance supports {va.LOSS_KINDS}", ["kinds"])
            if args.experiment == "grad":
                rep = va.grad_variance_mc(kind, data, b, config.get("n_samples", 5000), seed)
                rows += va.csv_rows("grad", kind, "batch_size", [b], [rep])
                if config.get("exact", False):
                    rows += va.csv_rows("grad-exact", kind, "batch_size", [b], [va.grad_variance_exact(kind, data, b)])
            else:
                lr = config.get("lr", 0.01)
                rep = va.partition_variance(kind, data, b, config.get("n_partitions", 200), lr, seed)
                rows += va.csv_rows("partition", kind, "batch_size", [b], [rep])
                gap = va.adversarial_gap(kind, data, b, lr)
                rows += va.csv_rows("partition-adversarial", kind, "batch_size", [b], [va.VarianceReport(gap, 2)])
    else:
        if args.data is None:
            raise ConfigError("trajectory variance needs --data", ["--data"])
        data = dg.load_dataset(run.input(args.data))
        Z = None if args.reps is None else tr.load_teacher_reps(run.input(args.reps)).Z
        kinds = config.get("kinds", ["kd", "ssl"])
        if "kd" in kinds and Z is None:
            raise ConfigError("kd trajectories need --reps", ["--reps"])
        r = Z.shape[1] if Z is not None else config.get("r", 16)
        arch = models.student_arch(data.d, config.get("hidden", 16), r)
        init = models.init(arch, "fan_in", [config.get("init_seed", 100), 0])
        cfg = _train_cfg(config.get("train", {}), tr.EXPERT_DEFAULTS)
        lengths = config.get("lengths", [1, 2, 4, 8])
        for kind in kinds:
            reps_ = va.trajectory_variance(kind, data, init, config.get("n_runs", 5), lengths, cfg, seed, Z)
            rows += va.csv_rows("trajectory", kind, "epochs", lengths, reps_)
    va.write_variance_csv(run.output(args.out), rows)
    run.config = {**config, "experiment": args.experiment, "seed": seed}
    run.write_manifest()


def cmd_pipeline(args):
    """data -> teacher -> reps -> experts -> inits -> distill -> pretrain -> probe -> compare, in ``--out-dir``."""
    run, config = _start(args, "pipeline")
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DESK_PIPELINE.items()}
    for k, v in config.items():
        cfg[k] = {**cfg[k], **v} if isinstance(v, dict) else v
    seed = run.seed
    out = Path(args.out_dir)
    cdir = out / "configs"
    cdir.mkdir(parents=True, exist_ok=True)

    def conf(name, body):
        path = cdir / f"{name}.json"
        _write_json(path, body)
        return str(path)

    def step(argv):
        log.info("pipeline step: %s", " ".join(argv))
        dispatch(argv)

    data_cfg = {**cfg["data"], "seed": seed}
    n = data_cfg["n"]
    size = max(1, int(round(cfg["init_fraction"] * n)))
    step(["gen-data", "--config", conf("data", data_cfg), "--out", str(out / "data.mkdt")])
    step(["train-teacher", "--data", str(out / "data.mkdt"), "--config", conf("teacher", {**cfg["teacher"], "seed": seed}),
          "--out", str(out / "teacher.traj")])
    step(["teacher-reps", "--data", str(out / "data.mkdt"), "--teacher", str(out / "teacher.traj"), "--out", str(out / "reps.mkdt")])
    step(["train-experts", "--data", str(out / "data.mkdt"), "--reps", str(out / "reps.mkdt"), "--k", str(cfg["k"]),
          "--config", conf("experts", {**cfg["experts"], "seed": seed}), "--out-dir", str(out / "experts")])
    common = ["--data", str(out / "data.mkdt"), "--reps", str(out / "reps.mkdt"), "--size", str(size)]
    sel = conf("select", {"alpha0": cfg["distill"].get("alpha0", 0.1), "seed": seed})
    step(["select-init", *common, "--mode", "high-loss", "--experts", str(out / "experts"), "--config", sel,
          "--out", str(out / "init_high_loss.syn")])
    step(["select-init", *common, "--mode", "random", "--config", sel, "--out", str(out / "init_random.syn")])
    step(["distill", "--mode", "mkdt", "--init", str(out / "init_high_loss.syn"), "--experts", str(out / "experts"),
          "--config", conf("distill", {**cfg["distill"], "seed": seed}), "--out", str(out / "syn_mkdt.syn"),
          "--log", str(out / "distill_log.csv")])
    pre = conf("pretrain", {**cfg["pretrain"], "seed": seed})
    step(["pretrain", "--syn", str(out / "syn_mkdt.syn"), "--config", pre, "--out", str(out / "encoder_mkdt.enc")])
    step(["probe", "--data", str(out / "data.mkdt"), "--encoder", str(out / "encoder_mkdt.enc"),
          "--config", conf("probe", {**cfg["probe"], "seed": seed}), "--out", str(out / "probe_mkdt.json")])
    blr = cfg["baseline_lr"]
    compare = {
        "methods": [
            {"name": "mkdt", "kind": "synthetic", "syn": "../syn_mkdt.syn"},
            {"name": "high-loss", "kind": "synthetic", "syn": "../init_high_loss.syn", "lr": blr},
            {"name": "random", "kind": "random", "size": size, "lr": blr},
            {"name": "none", "kind": "none"},
        ],
        "n_seeds": cfg["n_seeds"],
        "pretrain": cfg["pretrain"],
        "probe": cfg["probe"],
        "seed": seed,
    }
    step(["compare", "--data", str(out / "data.mkdt"), "--reps", str(out / "reps.mkdt"),
          "--config", conf("compare", compare), "--out", str(out / "report.csv")])
    run.output(out)
    run.config = {**cfg, "seed": seed}
    run.write_manifest(out / "pipeline.manifest.json")


def cmd_rerun(args):
    """Re-execute a manifest's command line and compare output hashes against the record."""
    record = json.loads(Path(args.manifest).read_text())
    dispatch(record["argv"])
    fresh = _hash_map(record["outputs"])
    diff = sorted(p for p in set(record["outputs"]) | set(fresh) if record["outputs"].get(p) != fresh.get(p))
    if diff:
        raise RuntimeError(f"outputs differ from the manifest: {diff}")
    print(f"reproduced {len(fresh)} output files")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mkdt", description="Desk-scale trajectory-matching distillation for SSL pre-training.")
    ap.add_argument("--version", action="version", version=f"mkdt {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None, help="JSON config (see README for keys)")
        return p

    p = add("gen-data", cmd_gen_data, "generate the sparse-coding toy dataset")
    p.add_argument("--out", required=True)

    p = add("train-teacher", cmd_train_teacher, "SSL-train the teacher encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("teacher-reps", cmd_teacher_reps, "encode the dataset with the trained teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)

    p = add("train-experts", cmd_train_experts, "train K expert trajectories")
    p.add_argument("--data", required=True)
    p.add_argument("--reps", default=None, help="teacher representations (kd objective)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--objective", choices=["kd", "ssl"], default="kd")
    p.add_argument("--out-dir", required=True)

    p = add("select-init", cmd_select_init, "choose the real examples that seed the synthetic set")
    p.add_argument("--data", required=True)
    p.add_argument("--reps", required=True)
    p.add_argument("--experts", default=None, help="expert directory (high-loss mode)")
    p.add_argument("--mode", choices=["random", "high-loss"], required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("distill", cmd_distill, "optimize synthetic inputs and learning rate by trajectory matching")
    p.add_argument("--mode", choices=list(di.MODES), default="mkdt")
    p.add_argument("--init", required=True, help="synthetic set from select-init")
    p.add_argument("--experts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="loss log CSV (default: <out>.log.csv)")

    p = add("pretrain", cmd_pretrain, "KD pre-training of a student on a synthetic set")
    p.add_argument("--syn", required=True)
    p.add_argument("--lr", type=float, default=None, help="fixed learning rate instead of the synthetic one")
    p.add_argument("--out", required=True)

    p = add("probe", cmd_probe, "linear probe on frozen representations")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", default=None, help="encoder file; raw inputs when omitted")
    p.add_argument("--out", required=True)

    p = add("compare", cmd_compare, "probe several pre-training methods over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--reps", default=None)
    p.add_argument("--out", required=True)

    p = add("variance", cmd_variance, "gradient, partition or trajectory variance experiments")
    p.add_argument("--experiment", choices=["grad", "partition", "trajectory"], required=True)
    p.add_argument("--data", default=None, help="dataset (trajectory experiment)")
    p.add_argument("--reps", default=None, help="teacher representations (kd trajectories)")
    p.add_argument("--out", required=True)

    p = add("pipeline", cmd_pipeline, "run every stage end to end at desk scale")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("rerun", help="replay a manifest and check its output hashes")
    p.set_defaults(fn=cmd_rerun)
    p.add_argument("--manifest", required=True)
    return ap


def dispatch(argv) -> None:
    """Parse and run one subcommand; exceptions propagate."""
    args = build_parser().parse_args(argv)
    args.argv = list(argv)
    args.fn(args)


def error_record(exc: BaseException, command=None) -> dict:
    keys = getattr(exc, "keys", None)
    return {
        "error": type(exc).__name__,
        "message": str(exc),
        "keys": list(keys) if isinstance(keys, list) else [],
        "command": command,
    }


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(json.dumps(error_record(exc, args.command), sort_keys=True), file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError, jsonschema.SchemaError) as exc:
        print(json.dumps(error_record(exc, args.command), sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
