"""Command-line entry point: train, sample, gmm, eval, synth-data.

Runs are driven by an INI config file (key/value pairs under one section per
command) with command-line flags taking precedence over file values. Every
command writes a ``<out>.run.json`` manifest embedding the resolved
configuration, and report paths render a matplotlib figure next to the
structured output. Commands are byte-deterministic given (config, seed) in
single-threaded mode. Set EMBGEN_LOG=debug|info|warning for verbosity.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import EmbgenError, NumericalError, ValidationError
from .evalkit import (
    EvalConfig,
    StubConversionBackend,
    assemble_report,
    build_eval_sets,
    convert_eval_sets,
    error_rates,
    load_transcripts,
)
from .gmm import fit_gmm, gmm_mse, sample_gmm, save_gmm, scan_k
from .hvae import LatentHierarchySpec, build_model, load_checkpoint
from .sampler import SampleRequest, reconstruct, sample_embeddings
from .store import EmbeddingDataset, load_dataset, save_dataset
from .synth import SynthConfig, generate_dataset
from .trainer import TrainConfig, train

log = logging.getLogger("embgen")

DEFAULT_MODEL = {"levels": 2, "groups_per_level": 5, "dims_per_group": 20,
                 "hidden_size": 64, "backbone": "auto"}


def _load_config(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        target = Path(path)
        if not target.exists():
            raise ValidationError(f"config file not found: {target}")
        parser.read(target)
    return parser


def _get(cfg: configparser.ConfigParser, section: str, key: str, cast, default):
    if cfg.has_option(section, key):
        raw = cfg.get(section, key)
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def _require_dataset(cfg, args) -> EmbeddingDataset:
    path = getattr(args, "data", None) or _get(cfg, "data", "path", str, None)
    if path is None:
        raise ValidationError("no dataset path configured ([data] path or --data)")
    fmt = args.format or _get(cfg, "data", "format", str, "manifest_binary")
    try:
        return load_dataset(path, format=fmt)
    except EmbgenError:
        raise
    except FileNotFoundError as exc:
        raise ValidationError(f"dataset not found: {path}") from exc


def _out_base(args, command: str) -> Path:
    base = Path(args.out) if args.out else Path(f"embgen-{command}")
    if base.parent != Path("."):
        base.parent.mkdir(parents=True, exist_ok=True)
    return base


def _write_run_manifest(base: Path, command: str, resolved: dict) -> Path:
    path = base.with_name(base.name + ".run.json")
    payload = {"command": command, "config": resolved}
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _seed_override(args, fallback: int) -> int:
    return args.seed if args.seed is not None else fallback


# ---------------------------------------------------------------------------
# commands

def cmd_synth_data(args, cfg) -> int:
    section = "synth"
    config = SynthConfig(
        speakers=_get(cfg, section, "speakers", int, 10),
        utterances_per_speaker=_get(cfg, section, "utterances_per_speaker", int, 20),
        dim=_get(cfg, section, "dim", int, 16),
        clusters=_get(cfg, section, "clusters", int, 0),
        center_spread=_get(cfg, section, "center_spread", float, 1.0),
        center_jitter=_get(cfg, section, "center_jitter", float, 0.25),
        within_std=_get(cfg, section, "within_std", float, 0.1),
        seed=_seed_override(args, _get(cfg, section, "seed", int, 0)),
    )
    fmt = args.format or _get(cfg, "data", "format", str, "manifest_binary")
    base = _out_base(args, "synth-data")
    data, truth = generate_dataset(config)
    written = save_dataset(data, base, format=fmt)
    truth_path = base.with_name(base.name + ".truth.json")
    truth_path.write_text(json.dumps(truth.to_json(), sort_keys=True) + "\n", encoding="utf-8")
    resolved = truth.to_json()
    resolved.pop("macro_centers")
    resolved.pop("speaker_centers")
    resolved["format"] = fmt
    _write_run_manifest(base, "synth-data", resolved)
    log.info("synth-data: wrote %d records to %s", len(data), written[0])
    print(f"synth-data: {len(data)} records, dim {data.dim} -> {written[0]}")
    return 0


def _model_spec_from_config(cfg, input_dim: int) -> LatentHierarchySpec:
    return LatentHierarchySpec(
        levels=_get(cfg, "model", "levels", int, DEFAULT_MODEL["levels"]),
        groups_per_level=_get(cfg, "model", "groups_per_level", int,
                              DEFAULT_MODEL["groups_per_level"]),
        dims_per_group=_get(cfg, "model", "dims_per_group", int,
                            DEFAULT_MODEL["dims_per_group"]),
        hidden_size=_get(cfg, "model", "hidden_size", int, DEFAULT_MODEL["hidden_size"]),
        input_dim=_get(cfg, "model", "input_dim", int, input_dim),
        backbone=_get(cfg, "model", "backbone", str, DEFAULT_MODEL["backbone"]),
    )


def cmd_train(args, cfg) -> int:
    data = _require_dataset(cfg, args)
    spec = _model_spec_from_config(cfg, data.dim)
    config = TrainConfig(
        epochs=_get(cfg, "train", "epochs", int, 1000),
        batch_size=_get(cfg, "train", "batch_size", int, 1024),
        learning_rate=_get(cfg, "train", "learning_rate", float, 1e-3),
        warmup_fraction=_get(cfg, "train", "warmup_fraction", float, 0.3),
        free_bits_lambda=_get(cfg, "train", "free_bits_lambda", float, 0.1),
        seed=_seed_override(args, _get(cfg, "train", "seed", int, 0)),
        checkpoint_every=_get(cfg, "train", "checkpoint_every", int, 100),
    )
    base = _out_base(args, "train")
    ckpt = base.with_name(base.name + ".ckpt")
    model = build_model(spec, seed=config.seed)
    model, report = train(model, data, config, checkpoint_path=ckpt)
    telemetry = report.write_telemetry(base.with_name(base.name + ".telemetry.jsonl"))
    from .report import save_loss_curves

    figure = save_loss_curves(report, base.with_name(base.name + ".loss.png"))
    _write_run_manifest(base, "train", {"model": spec.to_json(), "train": config.to_json(),
                                        "dataset": data.source_tag, "records": len(data)})
    final = report.epochs[-1].total_loss if report.epochs else float("nan")
    log.info("train: %d epochs in %.1fs", config.epochs, report.duration_seconds)
    print(f"train: {config.epochs} epochs, final loss {final:.4f} -> {ckpt} "
          f"(telemetry {telemetry.name}, figure {figure.name})")
    return 0


def cmd_sample(args, cfg) -> int:
    ckpt = args.checkpoint or _get(cfg, "sample", "checkpoint", str, None)
    if ckpt is None:
        raise ValidationError("no checkpoint configured ([sample] checkpoint or --checkpoint)")
    model, _ = load_checkpoint(ckpt)
    req = SampleRequest(
        count=args.count if args.count is not None else _get(cfg, "sample", "count", int, 1000),
        temperature=(args.temperature if args.temperature is not None
                     else _get(cfg, "sample", "temperature", float, 1.0)),
        seed=_seed_override(args, _get(cfg, "sample", "seed", int, 0)),
    )
    fmt = args.format or _get(cfg, "data", "format", str, "manifest_binary")
    base = _out_base(args, "sample")
    out = sample_embeddings(model, req)
    written = save_dataset(out, base, format=fmt)
    _write_run_manifest(base, "sample", {
        "checkpoint": str(ckpt),
        "count": req.count,
        "temperature": req.temperature,
        "seed": req.seed,
        "format": fmt,
    })
    print(f"sample: {req.count} embeddings at temperature {req.temperature} -> {written[0]}")
    return 0


def cmd_gmm(args, cfg) -> int:
    data = _require_dataset(cfg, args)
    seed = _seed_override(args, _get(cfg, "gmm", "seed", int, 0))
    max_iters = _get(cfg, "gmm", "max_iters", int, 200)
    tol = _get(cfg, "gmm", "tol", float, 1e-7)
    n_init = _get(cfg, "gmm", "n_init", int, 1)
    do_scan = args.scan or _get(cfg, "gmm", "scan", bool, False)
    base = _out_base(args, "gmm")
    resolved = {"seed": seed, "max_iters": max_iters, "tol": tol, "n_init": n_init,
                "dataset": data.source_tag, "records": len(data)}
    scan_report = None
    if do_scan and args.k is None:
        lo = _get(cfg, "gmm", "scan_min", int, 3)
        hi = _get(cfg, "gmm", "scan_max", int, 150)
        ks = [k for k in range(lo, hi + 1) if k <= len(data)]
        scan_report = scan_k(data, ks, seed=seed, max_iters=max_iters, tol=tol, n_init=n_init)
        k = scan_report.selected_k
        resolved.update({"scan": True, "scan_min": lo, "scan_max": hi, "selected_k": k})
    else:
        k = args.k if args.k is not None else _get(cfg, "gmm", "k", int, 16)
        resolved.update({"scan": False, "k": k})
    model = fit_gmm(data, k=k, seed=seed, max_iters=max_iters, tol=tol, n_init=n_init)
    model_path = save_gmm(model, base.with_name(base.name + ".gmm"))
    mse = gmm_mse(data, model)
    resolved["mse"] = mse
    if scan_report is not None:
        scan_json = base.with_name(base.name + ".kscan.json")
        payload = scan_report.to_json()
        payload["config"] = resolved
        scan_json.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                             encoding="utf-8")
        from .report import save_kscan_curve

        save_kscan_curve(scan_report, base.with_name(base.name + ".kscan.png"))
    _write_run_manifest(base, "gmm", resolved)
    count = _get(cfg, "gmm", "sample_count", int, 0)
    if count > 0:
        generated = sample_gmm(model, count=count, seed=seed)
        fmt = args.format or _get(cfg, "data", "format", str, "manifest_binary")
        save_dataset(generated, base.with_name(base.name + ".samples"), format=fmt)
    print(f"gmm: k={k}, per-dim MSE {mse:.6f} -> {model_path}")
    return 0


def _load_optional_set(cfg, key) -> EmbeddingDataset | None:
    path = _get(cfg, "eval", key, str, None)
    if path is None:
        return None
    fmt = _get(cfg, "data", "format", str, "manifest_binary")
    return load_dataset(path, format=fmt)


def cmd_eval(args, cfg) -> int:
    data = _require_dataset(cfg, args)
    config = EvalConfig(
        m=_get(cfg, "eval", "m", int, 1000),
        seed=_seed_override(args, _get(cfg, "eval", "seed", int, 0)),
        pairwise_sample_cap=_get(cfg, "eval", "pairwise_sample_cap", int, None),
    )
    mode = _get(cfg, "eval", "mode", str, "stub")
    base = _out_base(args, "eval")
    resolved = {"m": config.m, "seed": config.seed, "mode": mode,
                "pairwise_sample_cap": config.pairwise_sample_cap,
                "dataset": data.source_tag}
    sets = build_eval_sets(data, config)
    if mode == "stub":
        noise_scale = _get(cfg, "eval", "noise_scale", float, 0.05)
        per_speaker = _get(cfg, "eval", "conversions_per_speaker", int, 4)
        backend = StubConversionBackend(noise_scale=noise_scale, seed=config.seed)
        generated = _load_optional_set(cfg, "generated")
        ckpt = _get(cfg, "eval", "checkpoint", str, None)
        reconstruct_fn = None
        if ckpt is not None:
            model, _ = load_checkpoint(ckpt)
            reconstruct_fn = lambda vec: reconstruct(model, np.asarray(vec, dtype=np.float64))
        sets = convert_eval_sets(sets, backend, generated=generated,
                                 reconstruct_fn=reconstruct_fn,
                                 conversions_per_speaker=per_speaker)
        resolved.update({"noise_scale": noise_scale, "conversions_per_speaker": per_speaker,
                         "checkpoint": ckpt,
                         "generated": _get(cfg, "eval", "generated", str, None)})
    elif mode == "files":
        sets.s_syn = _load_optional_set(cfg, "s_syn")
        sets.s_recon = _load_optional_set(cfg, "s_recon")
        sets.g_syn = _load_optional_set(cfg, "g_syn")
        join_path = _get(cfg, "eval", "g_syn_join", str, None)
        if join_path is not None:
            sets.g_syn_join = json.loads(Path(join_path).read_text(encoding="utf-8"))
    else:
        raise ValidationError(f"unknown eval mode {mode!r}")
    report = assemble_report(sets, data, config)
    payload = report.to_json()
    payload["config"] = resolved
    report_json = base.with_name(base.name + ".similarity.json")
    report_json.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                           encoding="utf-8")
    base.with_name(base.name + ".similarity.txt").write_text(
        report.render_text() + "\n", encoding="utf-8")
    from .report import save_similarity_bars

    save_similarity_bars(report, base.with_name(base.name + ".similarity.png"))
    transcripts = _get(cfg, "eval", "transcripts", str, None)
    if transcripts is not None:
        rates = error_rates(load_transcripts(transcripts))
        rates["config"] = resolved
        base.with_name(base.name + ".error_rates.json").write_text(
            json.dumps(rates, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _write_run_manifest(base, "eval", resolved)
    if report.omitted:
        print("eval: omitted rows (missing inputs): " + ", ".join(report.omitted))
    print(report.render_text())
    print(f"eval: report -> {report_json}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embgen",
        description="Generative modeling toolkit for speaker-embedding tables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file with per-command sections")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", help="output base path (files get derived suffixes)")
        p.add_argument("--format", choices=["manifest_binary", "jsonl"], default=None,
                       help="embedding file format")
        p.add_argument("--data", default=None, help="dataset base path (overrides [data] path)")

    p_train = sub.add_parser("train", help="train the hierarchical VAE on an embedding table")
    common(p_train)

    p_sample = sub.add_parser("sample", help="sample novel embeddings from a checkpoint")
    common(p_sample)
    p_sample.add_argument("--checkpoint", default=None)
    p_sample.add_argument("--count", type=int, default=None)
    p_sample.add_argument("--temperature", type=float, default=None)

    p_gmm = sub.add_parser("gmm", help="fit the GMM baseline, optionally scanning k")
    common(p_gmm)
    p_gmm.add_argument("--k", type=int, default=None, help="fixed component count (skips scan)")
    p_gmm.add_argument("--scan", action="store_true", help="scan k over the configured range")

    p_eval = sub.add_parser("eval", help="build evaluation sets and score generation quality")
    common(p_eval)

    p_synth = sub.add_parser("synth-data", help="generate a planted-mixture embedding table")
    common(p_synth)
    return parser


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "gmm": cmd_gmm,
    "eval": cmd_eval,
    "synth-data": cmd_synth_data,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("EMBGEN_LOG", "warning").upper(), logging.WARNING)
    )
    torch.set_num_threads(1)
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except NumericalError as exc:
        print(f"embgen {args.command}: numerical abort: {exc}", file=sys.stderr)
        return 2
    except EmbgenError as exc:
        print(f"embgen {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
