"""Command-line experiment harness.

Subcommands cover the full desk-scale experiment matrix: single
train/eval runs, the interpolation-type sweep, the tuning/init ablation
grid, few-shot curves, distribution-shift grids, and run verification.
Every command is a pure function of (config, seed): rerunning a command
into a fresh directory reproduces byte-identical outputs, and each run
directory carries a manifest (resolved config plus FNV-1a file checksums)
sufficient to rerun or audit it.

Config files are plain text `key = value` lines; `#` starts a comment.
Exit codes: 0 success, 1 verification failure, 2 config error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import metrics as metricsmod
from . import prompt as promptmod
from . import training
from .encoders import export_prototypes, fnv1a64
from .training import BASELINE, COOP, METHODS, ORDINALCLIP, ZEROSHOT, TrainConfig


class ConfigError(Exception):
    pass


class VerificationError(Exception):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(v) for v in raw.split(","))


# key -> (parser, default). The manifest echoes every resolved key, so new
# knobs must be added here to stay reproducible.
CONFIG_SCHEMA = {
    # data
    "data_source": (str, "synthetic"),
    "csv_path": (str, ""),
    "num_ranks": (int, 20),
    "per_rank": (int, 40),
    "input_dim": (int, 16),
    "noise_sigma": (float, 0.25),
    "data_seed": (int, 0),
    "train_fraction": (float, 0.8),
    # method and prompt
    "method": (str, ORDINALCLIP),
    "num_base_ranks": (int, 3),
    "num_context": (int, 4),
    "word_dim": (int, 32),
    "interpolation": (str, promptmod.LINEAR),
    "epsilon": (float, 1e-5),
    "tune_rank": (_parse_bool, True),
    "tune_ctx": (_parse_bool, True),
    "init_ctx": (_parse_bool, False),
    # encoders
    "latent_dim": (int, 64),
    "hidden_dim": (int, 32),
    "max_len": (int, 16),
    "vocab_size": (int, 64),
    "encoder_seed": (int, 7),
    # training
    "epochs": (int, 50),
    "batch_size": (int, 64),
    "learning_rate": (float, 1.2e-3),
    "lr_decay_factor": (float, 0.1),
    "decay_epochs": (_parse_int_list, (30,)),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "temperature": (float, 0.07),
    "seed": (int, 0),
    "last_layer_lr_mult": (float, 1.0),
    # evaluation
    "prediction_rule": (str, metricsmod.ARGMAX),
    "eval_seeds": (int, 3),
}

# Echoed in the manifest only for prompt-based methods.
PROMPT_KEYS = (
    "num_base_ranks",
    "num_context",
    "word_dim",
    "interpolation",
    "epsilon",
    "tune_rank",
    "tune_ctx",
    "init_ctx",
    "max_len",
    "vocab_size",
)


def load_config(path: str | None) -> dict:
    """Resolve a config file against the schema defaults."""
    cfg = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise ConfigError(
                    f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                    + ", ".join(sorted(CONFIG_SCHEMA))
                )
            parser = CONFIG_SCHEMA[key][0]
            try:
                cfg[key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if cfg["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg['method']!r}")
    if cfg["data_source"] not in ("synthetic", "csv"):
        raise ConfigError(f"data_source must be synthetic or csv, got {cfg['data_source']!r}")
    if cfg["data_source"] == "csv" and not cfg["csv_path"]:
        raise ConfigError("missing required key: csv_path (data_source = csv)")
    if cfg["interpolation"] not in promptmod.INTERPOLATION_KINDS:
        raise ConfigError(
            f"interpolation must be one of {promptmod.INTERPOLATION_KINDS}, "
            f"got {cfg['interpolation']!r}"
        )
    if cfg["prediction_rule"] not in metricsmod.PREDICTION_RULES:
        raise ConfigError(
            f"prediction_rule must be one of {metricsmod.PREDICTION_RULES}, "
            f"got {cfg['prediction_rule']!r}"
        )
    if cfg["eval_seeds"] < 1:
        raise ConfigError(f"eval_seeds must be >= 1, got {cfg['eval_seeds']}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# building blocks shared by the commands


def _load_dataset(cfg: dict) -> datamod.OrdinalDataset:
    if cfg["data_source"] == "csv":
        return datamod.load_csv(cfg["csv_path"])
    return datamod.generate_synthetic(
        cfg["num_ranks"], cfg["per_rank"], cfg["input_dim"], cfg["noise_sigma"], cfg["data_seed"]
    )


def _split(cfg: dict, ds: datamod.OrdinalDataset):
    spec = datamod.SplitSpec(
        train_fraction=cfg["train_fraction"],
        test_fraction=1.0 - cfg["train_fraction"],
        seed=cfg["data_seed"],
    )
    return datamod.train_test_split(ds, spec)


def _prompt_config(cfg: dict, num_ranks: int, **overrides) -> promptmod.PromptConfig:
    merged = dict(
        num_ranks=num_ranks,
        num_base_ranks=cfg["num_base_ranks"],
        num_context=cfg["num_context"],
        word_dim=cfg["word_dim"],
        interpolation=cfg["interpolation"],
        epsilon=cfg["epsilon"],
        tune_rank=cfg["tune_rank"],
        tune_ctx=cfg["tune_ctx"],
        init_ctx=cfg["init_ctx"],
    )
    merged.update(overrides)
    return promptmod.PromptConfig(**merged)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        lr_decay_factor=cfg["lr_decay_factor"],
        decay_epochs=cfg["decay_epochs"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        adam_eps=cfg["adam_eps"],
        temperature=cfg["temperature"],
        seed=seed,
        last_layer_lr_mult=cfg["last_layer_lr_mult"],
    ).validate()


def _build_model(cfg: dict, method: str, num_ranks: int, input_dim: int, init_seed: int,
                 **prompt_overrides) -> training.ModelState:
    prompt_cfg = None
    if method != BASELINE:
        prompt_cfg = _prompt_config(cfg, num_ranks, **prompt_overrides)
    return training.build_model(
        method,
        num_ranks,
        prompt_cfg=prompt_cfg,
        input_dim=input_dim,
        hidden_dim=cfg["hidden_dim"],
        latent_dim=cfg["latent_dim"],
        max_len=cfg["max_len"],
        vocab_size=max(cfg["vocab_size"], num_ranks),
        encoder_seed=cfg["encoder_seed"],
        init_seed=init_seed,
    )


def _run_cell(cfg: dict, method: str, train_ds, test_ds, seed: int,
              **prompt_overrides):
    """Train one model and evaluate it; returns (report, state, trace)."""
    state = _build_model(
        cfg, method, train_ds.num_ranks, train_ds.input_dim, seed, **prompt_overrides
    )
    trace = training.LossTrace()
    if method != ZEROSHOT:
        trace = training.fit(state, train_ds, _train_config(cfg, seed))
    report = training.evaluate(
        state, test_ds, rule=cfg["prediction_rule"], temperature=cfg["temperature"]
    )
    return report, state, trace


def _mean_over_seeds(cfg: dict, method: str, make_train_ds, test_ds, **prompt_overrides):
    """Mean (mae, ordinality) over eval_seeds training repetitions.

    make_train_ds(rep_seed) supplies the (possibly subsampled) training
    split so all methods see identically seeded subsamples per repetition.
    """
    maes, ords = [], []
    for rep in range(cfg["eval_seeds"]):
        rep_seed = cfg["seed"] + rep
        report, _, _ = _run_cell(
            cfg, method, make_train_ds(rep_seed), test_ds, rep_seed, **prompt_overrides
        )
        maes.append(report.mae)
        ords.append(report.ordinality)
    return float(np.mean(maes)), float(np.mean(ords))


# ---------------------------------------------------------------------------
# manifest


def _write_manifest(out_dir: Path, cfg: dict, method: str, extra: dict | None = None) -> None:
    lines = ["# run manifest"]
    skip = set() if method != BASELINE else set(PROMPT_KEYS)
    for key in sorted(CONFIG_SCHEMA):
        if key in skip:
            continue
        lines.append(f"{key} = {_format_value(cfg[key])}")
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key} = {_format_value(value)}")
    lines.append("[files]")
    for path in sorted(out_dir.iterdir()):
        if path.name == "manifest.txt" or path.is_dir():
            continue
        blob = path.read_bytes()
        lines.append(f"{path.name} {len(blob)} {fnv1a64(blob):016x}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _read_manifest(out_dir: Path) -> tuple[dict, list[tuple[str, int, str]]]:
    path = out_dir / "manifest.txt"
    if not path.exists():
        raise VerificationError(f"missing manifest: {path}")
    config, files = {}, []
    in_files = False
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[files]":
            in_files = True
            continue
        if in_files:
            name, size, digest = line.rsplit(" ", 2)
            files.append((name, int(size), digest))
        else:
            key, value = (part.strip() for part in line.split("=", 1))
            config[key] = value
    return config, files


def _write_metrics_csv(report: metricsmod.MetricReport, path: Path) -> None:
    lines = [
        "metric,value",
        f"mae,{report.mae:.12g}",
        f"accuracy,{report.accuracy:.12g}",
        f"ordinality,{report.ordinality:.12g}",
    ]
    for rank, count in enumerate(report.per_rank_counts):
        lines.append(f"count_{rank},{count}")
    path.write_text("\n".join(lines) + "\n")


def _write_table_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            f"{v:.12g}" if isinstance(v, float) else str(v) for v in row
        ))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(config_path: str | None, out_dir: str) -> int:
    cfg = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    method = cfg["method"]
    train_ds, test_ds = _split(cfg, _load_dataset(cfg))
    report, state, trace = _run_cell(cfg, method, train_ds, test_ds, cfg["seed"])

    training.save_state(state, out / "checkpoint.bin")
    trace.to_csv(out / "loss_trace.csv")
    _write_metrics_csv(report, out / "metrics.csv")
    protos = training.prototypes_of(state)
    export_prototypes(out / "prototypes.bin", protos)
    metricsmod.export_heatmap(
        metricsmod.prototype_similarity(protos, cfg["temperature"]),
        out / "prototype_similarity",
    )
    if state.interpolation is not None:
        metricsmod.export_heatmap(state.interpolation, out / "interpolation_matrix")

    extra = {}
    if method != BASELINE and not (cfg["tune_rank"] or cfg["tune_ctx"]) and method != ZEROSHOT:
        extra["mode_note"] = "image-encoder-only"
    _write_manifest(out, cfg, method, extra)
    print(f"run complete: method={method} test_mae={report.mae:.4f} "
          f"accuracy={report.accuracy:.4f} ordinality={report.ordinality:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_sweep_interpolation(config_path: str | None, out_dir: str,
                            counts: tuple[int, ...], kinds: tuple[str, ...]) -> int:
    cfg = load_config(config_path)
    for kind in kinds:
        if kind not in promptmod.INTERPOLATION_KINDS:
            raise ConfigError(f"unknown interpolation type {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = _split(cfg, _load_dataset(cfg))
    rows = []
    for kind in kinds:
        row = [kind]
        for count in counts:
            report, _, _ = _run_cell(
                cfg, ORDINALCLIP, train_ds, test_ds, cfg["seed"],
                interpolation=kind, num_base_ranks=count,
            )
            row.append(report.mae)
        rows.append(row)
    header = ["interpolation"] + [f"base_{c}" for c in counts]
    _write_table_csv(out / "interpolation_sweep.csv", header, rows)
    _write_manifest(out, cfg, ORDINALCLIP,
                    {"sweep_counts": counts, "sweep_types": ",".join(kinds)})
    _print_table(header, rows)
    return 0


ABLATION_CELLS = (
    # (tune_rank, tune_ctx, init_ctx) in the ablation table's column order
    (True, False, False),
    (False, True, False),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


def cmd_ablation(config_path: str | None, out_dir: str) -> int:
    cfg = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = _split(cfg, _load_dataset(cfg))
    rows = []
    for method in (COOP, ORDINALCLIP):
        for tune_rank, tune_ctx, init_ctx in ABLATION_CELLS:
            mean_mae, mean_ord = _mean_over_seeds(
                cfg, method, lambda rep_seed: train_ds, test_ds,
                tune_rank=tune_rank, tune_ctx=tune_ctx, init_ctx=init_ctx,
            )
            rows.append([
                method, _format_value(tune_rank), _format_value(tune_ctx),
                _format_value(init_ctx), mean_mae, mean_ord,
            ])
    header = ["method", "tune_rank", "tune_ctx", "init_ctx", "mae", "ordinality"]
    _write_table_csv(out / "ablation.csv", header, rows)
    _write_manifest(out, cfg, ORDINALCLIP)
    _print_table(header, rows)
    return 0


TABLE_METHODS = (BASELINE, COOP, ORDINALCLIP)


def cmd_fewshot(config_path: str | None, out_dir: str, shots: tuple[int, ...]) -> int:
    cfg = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = _split(cfg, _load_dataset(cfg))
    mae_rows, ord_rows = [], []
    for method in TABLE_METHODS:
        mae_row, ord_row = [method], [method]
        for shot in shots:
            mean_mae, mean_ord = _mean_over_seeds(
                cfg, method,
                lambda rep_seed, s=shot: datamod.few_shot_subsample(train_ds, s, rep_seed),
                test_ds,
            )
            mae_row.append(mean_mae)
            ord_row.append(mean_ord)
        mae_rows.append(mae_row)
        ord_rows.append(ord_row)
    header = ["method"] + [f"shot_{s}" for s in shots]
    _write_table_csv(out / "fewshot_mae.csv", header, mae_rows)
    _write_table_csv(out / "fewshot_ordinality.csv", header, ord_rows)
    _write_manifest(out, cfg, ORDINALCLIP, {"shots": shots})
    _print_table(header, mae_rows)
    return 0


def _parse_grid(raw: str) -> tuple[tuple[int, float], ...]:
    cells = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            cls_part, frac_part = token.split(":")
            cells.append((int(cls_part), float(frac_part)))
        except ValueError as exc:
            raise ConfigError(
                f"bad distribution-shift cell {token!r}; expected classes:fraction"
            ) from exc
    if not cells:
        raise ConfigError("distribution-shift grid is empty")
    return tuple(cells)


def cmd_distshift(config_path: str | None, out_dir: str, grid: str) -> int:
    cfg = load_config(config_path)
    cells = _parse_grid(grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = _split(cfg, _load_dataset(cfg))
    mae_rows, ord_rows = [], []
    for method in TABLE_METHODS:
        mae_row, ord_row = [method], [method]
        for reduce_classes, reduce_fraction in cells:
            mean_mae, mean_ord = _mean_over_seeds(
                cfg, method,
                lambda rep_seed, c=reduce_classes, f=reduce_fraction:
                    datamod.distribution_shift_subsample(train_ds, c, f, rep_seed),
                test_ds,
            )
            mae_row.append(mean_mae)
            ord_row.append(mean_ord)
        mae_rows.append(mae_row)
        ord_rows.append(ord_row)
    header = ["method"] + [f"{c}-{int(round(f * 100))}" for c, f in cells]
    _write_table_csv(out / "distshift_mae.csv", header, mae_rows)
    _write_table_csv(out / "distshift_ordinality.csv", header, ord_rows)
    _write_manifest(out, cfg, ORDINALCLIP, {"grid": grid})
    _print_table(header, mae_rows)
    return 0


def cmd_report(run_dir: str) -> int:
    out = Path(run_dir)
    try:
        config, files = _read_manifest(out)
    except VerificationError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print("# configuration")
    for key in sorted(config):
        print(f"{key} = {config[key]}")
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        print("# metrics")
        print(metrics_path.read_text().strip())
    print("# files")
    failures = []
    for name, size, digest in files:
        path = out / name
        if not path.exists():
            failures.append(f"missing file: {name}")
            print(f"{name}  MISSING")
            continue
        blob = path.read_bytes()
        ok = len(blob) == size and f"{fnv1a64(blob):016x}" == digest
        print(f"{name}  {len(blob)} bytes  {'ok' if ok else 'CHECKSUM MISMATCH'}")
        if not ok:
            failures.append(f"checksum mismatch: {name}")
    if failures:
        for failure in failures:
            print(failure, file=sys.stderr)
        return 1
    return 0


def _print_table(header: list[str], rows: list[list]) -> None:
    print(",".join(header))
    for row in rows:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordinalproto",
        description="Ordinal regression with interpolated language prototypes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one model and write a run directory")
    train.add_argument("--config", default=None, help="key = value config file")
    train.add_argument("--out", required=True, help="output run directory")

    sweep = sub.add_parser("sweep-interpolation", help="base-rank count x type sweep")
    sweep.add_argument("--config", default=None)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--counts", default="2,3,4,5,6,7,8,9",
                       help="comma-separated base-rank counts")
    sweep.add_argument("--types", default=",".join(promptmod.INTERPOLATION_KINDS),
                       help="comma-separated interpolation types")

    ablation = sub.add_parser("ablation", help="tune/init grid for coop and ordinalclip")
    ablation.add_argument("--config", default=None)
    ablation.add_argument("--out", required=True)

    fewshot = sub.add_parser("fewshot", help="few-shot curves for all methods")
    fewshot.add_argument("--config", default=None)
    fewshot.add_argument("--out", required=True)
    fewshot.add_argument("--shots", default="1,2,4,8", help="comma-separated shot counts")

    distshift = sub.add_parser("distshift", help="distribution-shift grid for all methods")
    distshift.add_argument("--config", default=None)
    distshift.add_argument("--out", required=True)
    distshift.add_argument("--grid", default="8:0.9",
                           help="comma-separated classes:fraction cells")

    report = sub.add_parser("report", help="verify and summarize a run directory")
    report.add_argument("run_dir")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out)
        if args.command == "sweep-interpolation":
            counts = _parse_int_list(args.counts)
            kinds = tuple(k.strip() for k in args.types.split(",") if k.strip())
            return cmd_sweep_interpolation(args.config, args.out, counts, kinds)
        if args.command == "ablation":
            return cmd_ablation(args.config, args.out)
        if args.command == "fewshot":
            return cmd_fewshot(args.config, args.out, _parse_int_list(args.shots))
        if args.command == "distshift":
            return cmd_distshift(args.config, args.out, args.grid)
        if args.command == "report":
            return cmd_report(args.run_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
