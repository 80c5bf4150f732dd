"""Command-line entry points: dataset generation, two-phase training,
sampling, and evaluation, all reproducible from a flat key-value config.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from .diffusion import (
    InteractionDiffusionModel,
    ModelConfig,
    TrainConfig,
    sample,
    train_phase,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GenerationError,
    InteractDiffError,
    NumericError,
)
from . import numerics as N
from .evaluation import (
    DetectorConfig,
    detect,
    detection_map,
    image_features,
    kid_analog,
)
from .scenes import (
    VOCAB,
    SceneConfig,
    SceneSpec,
    build_dataset,
    read_dataset,
    render,
    write_dataset,
    write_ppm,
)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Every tunable in one flat, typed namespace.

    Values come from defaults, then a `key = value` config file, then CLI
    flags, in increasing priority. Unknown file keys are rejected.
    """

    # dataset
    train_scenes: int = 8000
    test_scenes: int = 1000
    data_seed: int = 0
    image_size: int = 32
    n_max: int = 4
    # model
    base_channels: int = 16
    mid_channels: int = 64
    d_tok: int = 64
    n_heads: int = 4
    time_dim: int = 64
    caption_len: int = 24
    d_text: int = 64
    n_freqs: int = 8
    init_seed: int = 0
    # schedule
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # training
    steps_phase1: int = 6000
    steps_phase2: int = 6000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 200
    caption_dropout: float = 0.1
    grad_accum: int = 1
    train_seed: int = 0
    save_every: int = 2000
    log_every: int = 25
    dtype: str = "float32"
    # sampling
    omega: float = 0.8
    steps: int = 50
    cfg_scale: float = 1.0
    sample_seed: int = 0
    gate_low_noise_end: bool = False
    # evaluation
    eval_count: int = 500
    eval_batch: int = 50
    iou_thresh: float = 0.5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            mid_channels=self.mid_channels,
            d_tok=self.d_tok,
            n_heads=self.n_heads,
            time_dim=self.time_dim,
            caption_len=self.caption_len,
            n_max=self.n_max,
            d_text=self.d_text,
            n_freqs=self.n_freqs,
            t_train=self.t_train,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            init_seed=self.init_seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps_phase1=self.steps_phase1,
            steps_phase2=self.steps_phase2,
            batch_size=self.batch_size,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            caption_dropout=self.caption_dropout,
            grad_accum=self.grad_accum,
            seed=self.train_seed,
            save_every=self.save_every,
            log_every=self.log_every,
            dtype=self.dtype,
        )

    def scene_config(self) -> SceneConfig:
        return SceneConfig(image_size=self.image_size, n_max=self.n_max)


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {typ.__name__}") from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- config file <- explicit overrides."""
    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    typemap = {"int": int, "float": float, "str": str, "bool": bool}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in types:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                typ = typemap.get(str(types[key]), None) or (
                    types[key] if isinstance(types[key], type) else str
                )
                setattr(cfg, key, _parse_value(raw, typ))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not 0.0 <= cfg.omega <= 1.0:
        raise ConfigError(f"omega must be in [0,1], got {cfg.omega}")
    if cfg.steps < 1 or cfg.steps > cfg.t_train:
        raise ConfigError(f"steps must be in 1..{cfg.t_train}, got {cfg.steps}")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {cfg.dtype!r}")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    for name in ("train_scenes", "test_scenes", "eval_count"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")


def _write_config_echo(cfg: RunConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "config": cfg.to_dict()}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, {"data_seed": args.seed})
    count = args.count if args.count is not None else cfg.train_scenes
    scenes = build_dataset(count, cfg.data_seed, cfg.scene_config())
    os.makedirs(args.out, exist_ok=True)
    write_dataset(scenes, os.path.join(args.out, "scenes.jsonl"))
    _write_config_echo(cfg, args.out)
    freq: dict = {}
    for scene in scenes:
        for inst in scene.interactions:
            key = (VOCAB.token(inst.s), VOCAB.token(inst.a), VOCAB.token(inst.o))
            freq[key] = freq.get(key, 0) + 1
    print(f"wrote {len(scenes)} scenes to {args.out} ({len(freq)} triplet classes)")
    for key in sorted(freq):
        print(f"  {' '.join(key)}: {freq[key]}")
    return 0


def _load_pairs(data_dir):
    path = os.path.join(data_dir, "scenes.jsonl")
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    return list(read_dataset(path))


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    with N.dtype_mode(cfg.dtype):
        return _cmd_train(args, cfg)


def _cmd_train(args, cfg: RunConfig) -> int:
    dataset = _load_pairs(args.data)
    if not dataset:
        raise DataError(f"dataset at {args.data} is empty")
    tcfg = cfg.train_config()
    phases = [1, 2] if args.phase == "both" else [int(args.phase)]
    if args.resume:
        model, meta = InteractionDiffusionModel.load(args.resume)
        phases = [int(meta.get("phase", phases[0]))]
    elif phases == [2]:
        base = args.base_ckpt or os.path.join(args.out, "phase1_final.ckpt")
        if not os.path.exists(base):
            raise DataError(
                f"phase 2 requires the phase-1 checkpoint; {base} not found "
                "(run --phase 1 first or pass --base-ckpt)"
            )
        model, _ = InteractionDiffusionModel.load(base)
    else:
        model = InteractionDiffusionModel(cfg.model_config())
    _write_config_echo(cfg, args.out)
    for phase in phases:
        start = 0
        if args.resume:
            _, meta = InteractionDiffusionModel.load(args.resume)
            start = int(meta.get("step", 0))
        final = train_phase(model, dataset, tcfg, phase, args.out, start_step=start)
        print(f"phase {phase} complete -> {final}")
    return 0


def _read_conditions(path, limit=None):
    conditions = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            conditions.append(SceneSpec.from_json_obj(obj))
            if limit is not None and len(conditions) >= limit:
                break
    return conditions


def _sample_batched(model, specs, cfg: RunConfig, omega, seed):
    """Sample images for a list of SceneSpec conditions, batch by batch."""
    images = []
    for lo in range(0, len(specs), cfg.eval_batch):
        chunk = specs[lo : lo + cfg.eval_batch]
        imgs = sample(
            model,
            [list(s.caption_ids) for s in chunk],
            [list(s.interactions) for s in chunk],
            steps=cfg.steps,
            omega=omega,
            seed=seed + lo,
            cfg_scale=cfg.cfg_scale,
            gate_low_noise_end=cfg.gate_low_noise_end,
        )
        images.extend(imgs)
    return images


def cmd_sample(args) -> int:
    cfg = load_run_config(
        args.config,
        {
            "omega": args.omega,
            "steps": args.steps,
            "sample_seed": args.seed,
            "cfg_scale": args.cfg,
        },
    )
    with N.dtype_mode(cfg.dtype):
        return _cmd_sample(args, cfg)


def _cmd_sample(args, cfg: RunConfig) -> int:
    model, _ = InteractionDiffusionModel.load(args.ckpt)
    specs = _read_conditions(args.scene_json, limit=args.count)
    if not specs:
        raise DataError(f"no conditions in {args.scene_json}")
    os.makedirs(args.out, exist_ok=True)
    _write_config_echo(cfg, args.out)
    images = _sample_batched(model, specs, cfg, cfg.omega, cfg.sample_seed)
    for i, (spec, img) in enumerate(zip(specs, images)):
        name = f"sample_{i:05d}"
        write_ppm(os.path.join(args.out, f"{name}.ppm"), img)
        sidecar = spec.to_json_obj(f"{name}.ppm")
        sidecar["omega"] = cfg.omega
        sidecar["steps"] = cfg.steps
        sidecar["seed"] = cfg.sample_seed
        sidecar["schema_version"] = SCHEMA_VERSION
        with open(os.path.join(args.out, f"{name}.json"), "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True)
            fh.write("\n")
    print(f"wrote {len(images)} samples to {args.out}")
    return 0


def evaluate_images(images, specs, real_images, cfg: RunConfig):
    """Detection mAP + distribution distance for generated images vs their
    conditioning scenes."""
    det_cfg = DetectorConfig()
    detections = [detect(img, det_cfg) for img in images]
    gts = [list(s.interactions) for s in specs]
    report = detection_map(detections, gts, iou_thresh=cfg.iou_thresh)
    if real_images is not None and len(images) >= 100 and len(real_images) >= 100:
        feats_gen = np.stack([image_features(img, config=det_cfg) for img in images])
        feats_real = np.stack(
            [image_features(img, config=det_cfg) for img in real_images]
        )
        kid, kid_err = kid_analog(feats_real, feats_gen)
        report.kid = kid
        report.config_echo["kid_stderr"] = kid_err
    return report


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, {"eval_count": args.count})
    with N.dtype_mode(cfg.dtype):
        return _cmd_eval(args, cfg)


def _cmd_eval(args, cfg: RunConfig) -> int:
    pairs = _load_pairs(args.data)
    if not pairs:
        raise DataError(f"test set at {args.data} is empty")
    pairs = pairs[: cfg.eval_count]
    specs = [p[0] for p in pairs]
    real_images = [p[1] for p in pairs]
    os.makedirs(args.out, exist_ok=True)
    _write_config_echo(cfg, args.out)
    try:
        omegas = [float(v) for v in args.omega_sweep.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --omega-sweep: {args.omega_sweep!r}") from exc
    if any(not 0.0 <= w <= 1.0 for w in omegas):
        raise ConfigError("all sweep omegas must be in [0,1]")
    rows = []
    if args.use_renders:
        report = evaluate_images(real_images, specs, real_images, cfg)
        report.config_echo.update(cfg.to_dict())
        with open(os.path.join(args.out, "report_renders.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
        report.write_csv(os.path.join(args.out, "per_class_ap_renders.csv"))
        print(f"renders: map_full={report.map_full:.4f} map_rare={report.map_rare:.4f}")
        return 0
    model, _ = InteractionDiffusionModel.load(args.ckpt)
    for omega in omegas:
        images = _sample_batched(model, specs, cfg, omega, cfg.sample_seed)
        report = evaluate_images(images, specs, real_images, cfg)
        report.config_echo.update(cfg.to_dict())
        report.config_echo["omega"] = omega
        tag = f"omega{omega:.2f}"
        with open(os.path.join(args.out, f"report_{tag}.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
        report.write_csv(os.path.join(args.out, f"per_class_ap_{tag}.csv"))
        kid_txt = "n/a" if report.kid is None else f"{report.kid:.6f}"
        rows.append((omega, report.map_full, report.map_rare, kid_txt))
        print(
            f"omega={omega:.2f}: map_full={report.map_full:.4f} "
            f"map_rare={report.map_rare:.4f} kid={kid_txt}"
        )
    with open(os.path.join(args.out, "summary.csv"), "w") as fh:
        fh.write("omega,map_full,map_rare,kid\n")
        for omega, mf, mr, kid_txt in rows:
            fh.write(f"{omega},{mf:.6f},{mr:.6f},{kid_txt}\n")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interactdiff",
        description="Interaction-conditioned diffusion on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a scene dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one or both training phases")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phase", choices=["1", "2", "both"], default="both")
    p.add_argument("--base-ckpt", default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample images for stored conditions")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene-json", required=True)
    p.add_argument("--omega", type=float, default=None)  # config default 0.8
    p.add_argument("--steps", type=int, default=None)  # config default 50
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cfg", type=float, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="detection mAP and KID over an omega sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--omega-sweep", default="0.8")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--use-renders", action="store_true",
                   help="evaluate the ground-truth renders instead of sampling")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("INTERACTDIFF_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(cap))
    except ImportError:
        pass


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except InteractDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
