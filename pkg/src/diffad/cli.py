"""Command-line front end and experiment orchestration.

Subcommands: synth-data, train, score, attack, certify, report.
Configuration precedence: flags > JSON config file > defaults.  Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.

Metric files (JSON lines, CSV summaries) are byte-reproducible for a fixed
seed; wall-clock metadata lives only in run_meta.json.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import attacks, certify, data, denoiser, rng, schedule, scoring
from .reconstruction import ReconstructionConfig

TOOLKIT_VERSION = "0.1.0"

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"root": "", "category": "synthetic", "resolution": 64},
    "schedule": {"type": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "denoiser": {"base_channels": 32, "channel_multipliers": [1, 1, 2],
                 "attention_resolution": 16, "num_heads": 1,
                 "image_channels": 3, "image_size": 64},
    "train": {"learning_rate": 1e-4, "batch_size": 2, "iterations": 3000,
              "lambda_vb": 0.001, "use_ema": False, "ema_decay": 0.999},
    "reconstruction": {"k": 100, "mode": "one_shot", "steps": None},
    "scoring": {"filter_size": 11, "repeats": 1},
    "attack": {"norm": "linf", "eps": 2.0 / 255.0, "alpha": None, "iters": 40,
               "eot": 0, "bpda": False},
    "smoothing": {"sigma": 0.125, "n": 1000, "n0": 100, "alpha_c": 0.001,
                  "radii": [0.0, 0.05, 0.1, 0.2]},
}


class ConfigError(Exception):
    pass


def _merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = DEFAULT_CONFIG
    if path:
        with open(path) as fh:
            cfg = _merge(cfg, json.load(fh))
    return _merge(cfg, overrides)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _write_jsonl(path: Path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_summary(out_dir: Path, name: str, cfg: dict, metrics: dict):
    payload = {"run_id": f"{name}-{cfg['seed']}", "config": cfg,
               "config_hash": config_hash(cfg), "metrics": metrics,
               "toolkit_version": TOOLKIT_VERSION}
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    with open(out_dir / "run_meta.json", "w") as fh:
        json.dump({"timestamp": time.time(), "command": name}, fh)


def _load_detector(cfg: dict, checkpoint: str, train_samples):
    model, dcfg, sched, header, reference = denoiser.load_checkpoint(checkpoint)
    rc = cfg["reconstruction"]
    steps = tuple(rc["steps"]) if rc["steps"] else None
    recon_cfg = ReconstructionConfig(k=rc["k"], mode=rc["mode"], steps=steps,
                                     seed=cfg["seed"])
    if reference is None:
        images = [s.image for s in train_samples]
        reference = scoring.fit_normal_reference(
            images, model, sched, recon_cfg, cfg["seed"],
            filter_size=cfg["scoring"]["filter_size"],
            repeats=cfg["scoring"]["repeats"])
    return scoring.AnomalyDetector(
        model=model, schedule=sched, recon_cfg=recon_cfg, reference=reference,
        filter_size=cfg["scoring"]["filter_size"])


def _dataset(cfg: dict, split: str):
    spec = data.DatasetSpec(root=cfg["data"]["root"],
                            category=cfg["data"]["category"],
                            resolution=cfg["data"]["resolution"], split=split)
    return data.load_benchmark_layout(spec)


def _labeled(samples):
    return [attacks.LabeledSample(x=s.image, y=s.label, sample_id=s.id)
            for s in samples]


# -- commands ---------------------------------------------------------------

def cmd_synth_data(args) -> int:
    root = data.synth_generate(
        seed=args.seed, out_root=args.out, n_train=args.n_train,
        n_test_normal=args.n_test_normal, n_test_anomalous=args.n_test_anomalous,
        resolution=args.resolution, category=args.category)
    print(f"wrote synthetic dataset to {root}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples = _dataset(cfg, "train")
    images = torch.stack([s.image for s in train_samples])

    sched = schedule.schedule_from_descriptor(cfg["schedule"])
    dcfg = denoiser.DenoiserConfig(
        **{**cfg["denoiser"],
           "channel_multipliers": tuple(cfg["denoiser"]["channel_multipliers"]),
           "image_size": cfg["data"]["resolution"]})
    tcfg = denoiser.TrainConfig(seed=cfg["seed"], **cfg["train"])

    start_iter = 0
    if args.resume:
        model, dcfg, sched, header, _ = denoiser.load_checkpoint(args.resume)
        start_iter = header["iteration"]
    else:
        model = denoiser.build_model(dcfg, init_seed=cfg["seed"])
    model.train()
    trainer = denoiser.Trainer(model, sched, tcfg)
    trainer.iteration = start_iter

    losses = []
    for it in range(start_iter, start_iter + tcfg.iterations):
        idx = rng.uniform_int(0, len(images), (tcfg.batch_size,),
                              cfg["seed"], "train-batch", it)
        loss = trainer.step(images[idx])
        losses.append((it, loss))
        if (it + 1) % 100 == 0:
            print(f"iter {it + 1}  loss {loss:.5f}")

    denoiser.save_checkpoint(out_dir / "checkpoint.npz", model, dcfg,
                             sched.descriptor, cfg["seed"], trainer.iteration)
    with open(out_dir / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        writer.writerows([(i, f"{l:.8f}") for i, l in losses])
    _write_summary(out_dir, "train", cfg,
                   {"final_loss": losses[-1][1], "iterations": trainer.iteration})
    return 0


def cmd_score(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples = _dataset(cfg, "train")
    test_samples = _dataset(cfg, "test")
    detector = _load_detector(cfg, args.checkpoint, train_samples)

    records = []
    for s in test_samples:
        stream = rng.NoiseStream(rng.child_seed(cfg["seed"], "eval", s.id))
        score = scoring.anomaly_score(s.image, detector, stream)
        records.append({"sample_id": s.id, "label": s.label,
                        "score": score, "seed": cfg["seed"]})
    auc = attacks.roc_auc([r["score"] for r in records],
                          [r["label"] for r in records])
    _write_jsonl(out_dir / "scores.jsonl", records)
    _write_summary(out_dir, "score", cfg, {"standard_auc": auc})
    print(f"standard AUC {auc:.4f}")
    return 0


def cmd_attack(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples = _dataset(cfg, "train")
    test_samples = _dataset(cfg, "test")
    detector = _load_detector(cfg, args.checkpoint, train_samples)

    ac = cfg["attack"]
    attack_cfg = attacks.AttackConfig(
        norm=ac["norm"], epsilon=ac["eps"], alpha=ac["alpha"], iters=ac["iters"],
        eot_samples=ac["eot"], bpda=ac["bpda"])
    make = scoring.as_bpda_score_function if ac["bpda"] else scoring.as_score_function

    def score_fn_for(sample):
        return make(detector, sample.sample_id, cfg["seed"])

    standard, robust, records = attacks.evaluate_robust_auc(
        _labeled(test_samples), score_fn_for, attack_cfg)
    for rec in records:
        rec.update({"norm": ac["norm"], "epsilon": ac["eps"],
                    "iters": ac["iters"], "seed": cfg["seed"]})
    _write_jsonl(out_dir / "attack.jsonl", records)
    _write_summary(out_dir, "attack", cfg,
                   {"standard_auc": standard, "robust_auc": robust})
    print(f"standard AUC {standard:.4f}  robust AUC {robust:.4f}")
    return 0


def cmd_certify(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples = _dataset(cfg, "train")
    test_samples = _dataset(cfg, "test")
    detector = _load_detector(cfg, args.checkpoint, train_samples)

    sm = cfg["smoothing"]
    sigmas = [sm["sigma"]] if isinstance(sm["sigma"], (int, float)) else sm["sigma"]
    radii = sm["radii"]
    rows = []
    records = []
    for sigma in sigmas:
        scfg = certify.SmoothedConfig(sigma=sigma, n=sm["n"], n0=sm["n0"],
                                      alpha_c=sm["alpha_c"])

        def score_fn_for(sample):
            det_stream = rng.NoiseStream(
                rng.child_seed(cfg["seed"], "eval", sample.sample_id))
            return lambda x: scoring.anomaly_score(x, detector, det_stream)

        def gen_for(sample):
            return rng.generator(cfg["seed"], "certify", sigma, sample.sample_id)

        collected = certify.collect_noisy_scores(
            _labeled(test_samples), score_fn_for, scfg, gen_for)
        auc_map = certify.certified_auc_from_scores(collected, radii, scfg)
        rows.append([sigma] + [auc_map[float(r)] for r in radii])
        for sample, sel, est in collected:
            res = certify.certify_from_scores(sel, est, scfg.threshold, scfg)
            records.append({"sample_id": sample.sample_id, "label": sample.y,
                            "prediction": res.prediction, "p_lower": res.p_lower,
                            "radius": res.radius, "smoothed_score": res.smoothed_score,
                            "sigma": sigma, "n": sm["n"], "alpha_c": sm["alpha_c"]})
    with open(out_dir / "certified_auc.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma"] + [f"radius_{r}" for r in radii])
        for row in rows:
            writer.writerow([f"{v:.6f}" for v in row])
    _write_jsonl(out_dir / "certify.jsonl", records)
    _write_summary(out_dir, "certify", cfg,
                   {"certified_auc": {f"{row[0]}": row[1:] for row in rows}})
    print("certified AUC table written")
    return 0


def cmd_report(args) -> int:
    run_dirs = [p for p in sorted(Path(args.runs).iterdir()) if p.is_dir()]
    summaries = []
    for d in run_dirs:
        summary_path = d / "summary.json"
        if summary_path.exists():
            with open(summary_path) as fh:
                summaries.append((d.name, json.load(fh)))
    if not summaries:
        raise ConfigError(f"no run summaries found under {args.runs}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, s in summaries:
        for metric, value in s["metrics"].items():
            if isinstance(value, (int, float)):
                rows.append((s["run_id"], name, metric, value))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "run_dir", "metric", "value"])
        writer.writerows(rows)
    lines = ["| run id | run dir | metric | value |", "| --- | --- | --- | --- |"]
    lines += [f"| {r[0]} | {r[1]} | {r[2]} | {r[3]:.4f} |" for r in rows]
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
    print(f"aggregated {len(summaries)} runs")
    return 0


# -- argument parsing -------------------------------------------------------

def _overrides(args) -> dict:
    """Map set CLI flags onto config paths (flags win over file values)."""
    o: dict = {}

    def put(path, value):
        if value is None:
            return
        node = o
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value

    put(("seed",), getattr(args, "seed", None))
    put(("data", "root"), getattr(args, "data", None))
    put(("data", "category"), getattr(args, "category", None))
    put(("data", "resolution"), getattr(args, "resolution", None))
    put(("train", "iterations"), getattr(args, "iterations", None))
    put(("train", "batch_size"), getattr(args, "batch_size", None))
    put(("reconstruction", "k"), getattr(args, "k", None))
    mode = getattr(args, "mode", None)
    if mode:
        put(("reconstruction", "mode"),
            {"one": "one_shot", "full": "full_shot", "arbitrary": "arbitrary_shot"}[mode])
    steps = getattr(args, "steps", None)
    if steps:
        put(("reconstruction", "steps"), [int(s) for s in steps.split(",")])
    put(("attack", "norm"), getattr(args, "norm", None))
    put(("attack", "eps"), getattr(args, "eps", None))
    put(("attack", "alpha"), getattr(args, "alpha", None))
    put(("attack", "iters"), getattr(args, "iters", None))
    put(("attack", "eot"), getattr(args, "eot", None))
    if getattr(args, "bpda", False):
        put(("attack", "bpda"), True)
    put(("smoothing", "sigma"), getattr(args, "sigma", None))
    put(("smoothing", "n"), getattr(args, "n", None))
    put(("smoothing", "n0"), getattr(args, "n0", None))
    put(("smoothing", "alpha_c"), getattr(args, "alpha_c", None))
    radii = getattr(args, "radii", None)
    if radii:
        put(("smoothing", "radii"), [float(r) for r in radii.split(",")])
    return o


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffad",
        description="Diffusion-based robust anomaly detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--data", default=None)
        p.add_argument("--category", default=None)
        p.add_argument("--resolution", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic defect dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test-normal", type=int, default=50)
    p.add_argument("--n-test-anomalous", type=int, default=50)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--category", default="synthetic")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the denoiser")
    common(p, checkpoint=False)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="fit reference and score the test split")
    common(p)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mode", choices=["one", "full", "arbitrary"], default=None)
    p.add_argument("--steps", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("attack", help="robust AUC under PGD")
    common(p)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mode", choices=["one", "full", "arbitrary"], default=None)
    p.add_argument("--steps", default=None)
    p.add_argument("--norm", choices=["linf", "l2"], default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--eot", type=int, default=None)
    p.add_argument("--bpda", action="store_true")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("certify", help="certified AUC over a sigma x radius grid")
    common(p)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mode", choices=["one", "full", "arbitrary"], default=None)
    p.add_argument("--steps", default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--n0", type=int, default=None)
    p.add_argument("--alpha-c", type=float, default=None, dest="alpha_c")
    p.add_argument("--radii", default=None)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("report", help="aggregate run summaries")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 1
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
