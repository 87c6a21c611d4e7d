"""Command-line surface: gen-data, train, attack, eval, report.

Every command resolves its configuration (built-in defaults, overridden by
an optional key-value config file, overridden by explicit flags), runs,
and writes a manifest.json capturing the fully resolved configuration so
the run can be replayed exactly.  Wall-clock timing goes to a separate
timing.txt because manifests must be byte-stable across reruns.

Exit codes: 0 success, 2 validation error, 3 I/O or parse error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__, attacks, net
from .data import (Dataset, PointCloud, SORConfig, default_spec, generate,
                   load_dataset, save_dataset, sor_filter)
from .errors import NumericalError, ParseError, ValidationError
from .etf import ETFHead, build_etf, load_head, save_head
from .metrics import (MetricsReport, accuracy, append_metrics_row,
                      export_features, metrics_to_text, nc_report, silhouette)
from .reporting import read_metrics, write_report
from .train import (TrainConfig, LinearHead, init_for_config, load_history,
                    load_linear_head, save_history, save_linear_head, train)

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _read_config_file(path) -> dict[str, str]:
    """key value / key=value lines; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, ln in enumerate(f, start=1):
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" in ln:
                key, _, val = ln.partition("=")
            else:
                parts = ln.split(None, 1)
                if len(parts) != 2:
                    raise ParseError(f"{path}:{lineno}: expected 'key value'")
                key, val = parts
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def _resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _read_config_file(args.config)
        for key, raw in file_cfg.items():
            if key not in resolved:
                raise ValidationError(f"config file: unknown key '{key}'")
            ref = resolved[key]
            if isinstance(ref, bool):
                resolved[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(ref, int):
                resolved[key] = int(raw)
            elif isinstance(ref, float):
                resolved[key] = float(raw)
            else:
                resolved[key] = raw
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    return resolved


def _write_manifest(out_dir, command: str, config: dict, inputs: dict,
                    outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8",
              newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "timing.txt"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(f"duration_s {time.time() - started:.3f}\n")


def _counts(raw) -> list[int] | None:
    if raw is None:
        return None
    if isinstance(raw, str):
        return [int(v) for v in raw.split(",") if v.strip()]
    return list(raw)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

GEN_DEFAULTS = {"seed": 0, "points_per_cloud": 256, "jitter": 0.01,
                "classes": 6, "train_counts": "", "test_counts": ""}


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _resolve(args, GEN_DEFAULTS)
    spec = default_spec(seed=cfg["seed"], points_per_cloud=cfg["points_per_cloud"],
                        jitter_sigma=cfg["jitter"], num_classes=cfg["classes"],
                        train_counts=_counts(cfg["train_counts"] or None),
                        test_counts=_counts(cfg["test_counts"] or None))
    dataset = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(dataset, args.out)
    config = dict(cfg)
    config["class_names"] = dataset.class_names
    outputs = ["manifest.txt"] + [f"clouds/{c.id}.txt"
                                  for c in dataset.train + dataset.test]
    _write_manifest(args.out, "gen-data", config, {}, outputs, started)
    print(f"gen-data: {len(dataset.train)} train / {len(dataset.test)} test "
          f"clouds, {len(dataset.class_names)} classes -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {"seed": 0, "epochs": 60, "warmup": 10, "lr": 1e-3,
                  "lam": 5.0, "batch_size": 16, "dim": 64,
                  "fixed_etf": False, "no_rbl": False, "no_fdl": False,
                  "ce_baseline": False}


def cmd_train(args) -> int:
    started = time.time()
    cfg = _resolve(args, TRAIN_DEFAULTS)
    if cfg["ce_baseline"] and (cfg["fixed_etf"] or cfg["no_rbl"] or cfg["no_fdl"]):
        raise ValidationError("--ce-baseline cannot be combined with frame-head flags")
    config = TrainConfig(epochs=cfg["epochs"], warmup=cfg["warmup"], lr=cfg["lr"],
                         lam=cfg["lam"], batch_size=cfg["batch_size"],
                         seed=cfg["seed"], dim=cfg["dim"],
                         rbl_on=not cfg["no_rbl"], fdl_on=not cfg["no_fdl"],
                         etf_fixed=cfg["fixed_etf"], ce_baseline=cfg["ce_baseline"])
    dataset = load_dataset(args.data)
    if not dataset.train or not dataset.test:
        raise ValidationError(f"dataset at {args.data} is missing a split")
    head, params = init_for_config(config, dataset.num_classes)
    result = train(config, dataset, head, params)
    os.makedirs(args.out, exist_ok=True)
    net.save_params(result.params, os.path.join(args.out, "params.txt"))
    if config.ce_baseline:
        save_linear_head(result.head, os.path.join(args.out, "linear_head.txt"))
        head_file = "linear_head.txt"
    else:
        save_head(result.head, os.path.join(args.out, "head.txt"))
        head_file = "head.txt"
    save_history(result.history, os.path.join(args.out, "history.csv"),
                 ce=config.ce_baseline)
    _write_manifest(args.out, "train", cfg, {"data": args.data},
                    ["params.txt", head_file, "history.csv"], started)
    final = result.history[-1]
    print(f"train: {config.epochs} epochs -> {args.out} "
          f"(clean_acc {final['clean_acc']:.3f})")
    return 0


def _load_model(model_dir):
    params = net.load_params(os.path.join(model_dir, "params.txt"))
    linear_path = os.path.join(model_dir, "linear_head.txt")
    head: ETFHead | LinearHead
    if os.path.exists(linear_path):
        head = load_linear_head(linear_path)
        head_d = head.W.shape[0]
    else:
        head = load_head(os.path.join(model_dir, "head.txt"))
        head_d = head.d
    if params.d != head_d:
        raise ValidationError(
            f"checkpoint dims disagree: extractor d={params.d}, head d={head_d}")
    return params, head


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

ATTACK_DEFAULTS = {"seed": 0, "kind": "ifgm", "step": 0.0, "iters": -1,
                   "epsilon": 0.5, "dist_weight": 0.5, "drop_count": 25,
                   "drop_rounds": 5, "limit": 0}


def cmd_attack(args) -> int:
    started = time.time()
    cfg = _resolve(args, ATTACK_DEFAULTS)
    base = attacks.default_attack_config(cfg["kind"], seed=cfg["seed"])
    acfg = attacks.AttackConfig(
        kind=cfg["kind"],
        step=cfg["step"] if cfg["step"] > 0 else base.step,
        iters=cfg["iters"] if cfg["iters"] >= 0 else base.iters,
        epsilon=cfg["epsilon"], dist_weight=cfg["dist_weight"],
        drop_count=cfg["drop_count"], drop_rounds=cfg["drop_rounds"],
        seed=cfg["seed"])
    params, head = _load_model(args.model)
    dataset = load_dataset(args.data, num_classes=head.K)
    clouds = dataset.test
    if cfg["limit"]:
        clouds = clouds[:cfg["limit"]]
    if not clouds:
        raise ValidationError(f"dataset at {args.data} has no test clouds")

    clouds_dir = os.path.join(args.out, "clouds")
    os.makedirs(clouds_dir, exist_ok=True)
    manifest_lines = []
    rows = []
    for cloud in clouds:
        res = attacks.run_attack(params, head, cloud, acfg)
        rel = os.path.join("clouds", f"{cloud.id}.txt")
        from .data import save_cloud
        save_cloud(res.cloud, os.path.join(args.out, rel))
        manifest_lines.append(f"test {rel}")
        rows.append([cloud.id, acfg.kind, cloud.label, int(res.success),
                     "%.17g" % res.perturbation_norm, res.iterations,
                     int(res.stalled)])
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write("\n".join(manifest_lines) + "\n")
    with open(os.path.join(args.out, "sidecars.csv"), "w", encoding="utf-8",
              newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "kind", "label", "success", "perturbation_norm",
                         "iterations", "stalled"])
        writer.writerows(rows)
    n = len(rows)
    success_rate = sum(r[3] for r in rows) / n
    mean_norm = float(np.mean([float(r[4]) for r in rows]))
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(f"kind {acfg.kind}\nn {n}\nsuccess_rate {success_rate:.17g}\n"
                f"mean_perturbation_norm {mean_norm:.17g}\n")
    resolved = attacks.config_as_dict(acfg)
    resolved["limit"] = cfg["limit"]
    _write_manifest(args.out, "attack", resolved,
                    {"data": args.data, "model": args.model},
                    ["manifest.txt", "sidecars.csv", "summary.txt"] +
                    [ln.split()[1] for ln in manifest_lines], started)
    print(f"attack {acfg.kind}: success rate {success_rate:.3f} over {n} clouds "
          f"-> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {"sor": False, "sor_k": 2, "sor_alpha": 1.1, "split": "test"}


def _maybe_sor(clouds, enabled: bool, cfg: SORConfig):
    if not enabled:
        return clouds
    return [PointCloud(sor_filter(c.points, cfg), c.label, c.id) for c in clouds]


def _attack_name(adv_dir) -> str:
    manifest_path = os.path.join(adv_dir, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as f:
            kind = json.load(f).get("config", {}).get("kind")
        if kind:
            return kind
    return os.path.basename(os.path.normpath(adv_dir))


def cmd_eval(args) -> int:
    started = time.time()
    cfg = _resolve(args, EVAL_DEFAULTS)
    params, head = _load_model(args.model)
    sor_cfg = SORConfig(k=cfg["sor_k"], alpha=cfg["sor_alpha"])
    report = MetricsReport()
    os.makedirs(args.out, exist_ok=True)
    outputs = ["metrics.txt", "metrics.csv"]

    features = labels = None
    if args.data:
        dataset = load_dataset(args.data)
        clouds = dataset.train if cfg["split"] == "train" else dataset.test
        if not clouds:
            raise ValidationError(f"no clouds in split '{cfg['split']}' at {args.data}")
        max_label = max(c.label for c in clouds)
        if max_label >= head.K:
            raise ValidationError(
                f"dataset needs {max_label + 1} classes but head has K={head.K}")
        clouds = _maybe_sor(clouds, cfg["sor"], sor_cfg)
        features = net.batch_features(params, clouds)
        labels = np.array([c.label for c in clouds])
        preds = np.argmax(head.logits(features), axis=1)
        report.clean_acc = accuracy(preds, labels)
        report.sc = silhouette(features, labels)
        report.nc = nc_report(features, labels, head)
        report.sample_counts["clean"] = len(clouds)

    for adv_dir in args.adv or []:
        adv = load_dataset(adv_dir, num_classes=head.K).test
        if not adv:
            raise ValidationError(f"no adversarial clouds at {adv_dir}")
        adv = _maybe_sor(adv, cfg["sor"], sor_cfg)
        feats = net.batch_features(params, adv)
        preds = np.argmax(head.logits(feats), axis=1)
        name = _attack_name(adv_dir)
        report.attack_acc[name] = accuracy(preds, [c.label for c in adv])
        report.sample_counts[name] = len(adv)

    if report.clean_acc is None and not report.attack_acc:
        raise ValidationError("nothing to evaluate: pass --data and/or --adv")

    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(metrics_to_text(report))
    append_metrics_row(report, os.path.join(args.out, "metrics.csv"))
    if args.features_out and features is not None:
        export_features(features, labels, os.path.join(args.out, "features.csv"))
        outputs.append("features.csv")
    _write_manifest(args.out, "eval", cfg,
                    {"data": args.data or "", "model": args.model,
                     "adv": list(args.adv or [])}, outputs, started)
    summary = metrics_to_text(report).replace("\n", "  ").strip()
    print(f"eval: {summary}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    started = time.time()
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.runs):
        raise ValidationError(
            f"--labels has {len(labels)} entries for {len(args.runs)} runs")
    runs = []
    for i, run_dir in enumerate(args.runs):
        metrics = read_metrics(os.path.join(run_dir, "metrics.txt"))
        label = labels[i] if labels else os.path.basename(os.path.normpath(run_dir))
        runs.append((label, metrics))
    artifacts = write_report(runs, args.out)
    _write_manifest(args.out, "report", {"labels": labels or []},
                    {"runs": list(args.runs)}, artifacts, started)
    print(f"report: {len(runs)} runs -> {args.out} ({', '.join(artifacts)})")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etfpc",
        description="Train, attack, and evaluate point-cloud classifiers "
                    "with an equiangular-tight-frame head.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--points-per-cloud", type=int, dest="points_per_cloud")
    p.add_argument("--jitter", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--train-counts", dest="train_counts")
    p.add_argument("--test-counts", dest="test_counts")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dim", type=int)
    p.add_argument("--fixed-etf", dest="fixed_etf", action="store_const", const=True)
    p.add_argument("--no-rbl", dest="no_rbl", action="store_const", const=True)
    p.add_argument("--no-fdl", dest="no_fdl", action="store_const", const=True)
    p.add_argument("--ce-baseline", dest="ce_baseline", action="store_const",
                   const=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run a white-box attack on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--kind", choices=attacks.ATTACK_KINDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--dist-weight", type=float, dest="dist_weight")
    p.add_argument("--drop-count", type=int, dest="drop_count")
    p.add_argument("--drop-rounds", type=int, dest="drop_rounds")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="evaluate a model on clean/adversarial data")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--adv", action="append")
    p.add_argument("--config")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--sor", action="store_const", const=True)
    p.add_argument("--sor-k", type=int, dest="sor_k")
    p.add_argument("--sor-alpha", type=float, dest="sor_alpha")
    p.add_argument("--features-out", dest="features_out", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate eval outputs into a table + figures")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--labels")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ParseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
