"""``dtmil`` command line: gen, train, eval and explain.

Settings come from built-in defaults, then an optional JSON config file with
the sections ``generator``, ``model``, ``train`` and ``eval``, then flags.
Flags win.  ``--seed`` seeds generation, the split and training alike unless a
section sets its own seed and no flag overrides it.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import json
import logging
import sys
from collections import Counter
from pathlib import Path

import click
import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, NormStats, apply_normalizer, load_dataset, save_dataset
from .errors import ConfigError, DimensionError, DtmilError
from .evaluate import DEFAULT_DELTA, PrecursorReport, check_delta, emit_explanation, emit_flap_timing, evaluate_split
from .flightgen import GenConfig, generate
from .mil import AggregationKind
from .model import ModelArch, predict_batch, predict_instances
from .train import TrainConfig, train, write_log

SECTIONS = ("generator", "model", "train", "eval")
VARIANT_FLAGS = {"full": "full", "no-temporal": "no_temporal", "shallow": "shallow"}
AGG_FLAGS = {"max": "max", "mean": "mean", "noisy-or": "noisy_or", "smooth-max": "smooth_max"}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(cfg) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return cfg


def _section(ctx, name: str) -> dict:
    return dict(ctx.obj["config"].get(name, {}))


def _seed(ctx, section: dict):
    """Flag seed beats the section's seed, which beats a top-level config seed."""
    if ctx.obj["seed"] is not None:
        return ctx.obj["seed"]
    if "seed" in section:
        return section["seed"]
    return ctx.obj["config"].get("seed", 0)


def _echo_config(out: Path, command: str, settings: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}_config.json").write_text(json.dumps(settings, sort_keys=True, indent=2) + "\n")


def _overrides(**flags) -> dict:
    return {k: v for k, v in flags.items() if v is not None}


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON file with generator/model/train/eval sections.")
@click.option("--seed", type=int, default=None, help="Global seed (generation, split and training).")
@click.option("--out", type=click.Path(file_okay=False), default="dtmil-out", show_default=True,
              help="Output directory.")
@click.option("-v", "--verbose", is_flag=True, help="Log every training epoch.")
@click.pass_context
def cli(ctx, config_path, seed, out, verbose):
    """Multiple-instance precursor mining on flight time series."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    ctx.ensure_object(dict)
    ctx.obj.update(config=load_config(config_path), config_path=config_path, seed=seed, out=Path(out))


@cli.command()
@click.option("--n-flights", type=int, default=None)
@click.option("--split-seed", type=int, default=None, help="Seed of the train/val/test shuffle.")
@click.pass_context
def gen(ctx, n_flights, split_seed):
    """Generate a synthetic dataset into OUT."""
    section = _section(ctx, "generator")
    split_cfg = section.pop("split", {})
    section["seed"] = _seed(ctx, section)
    section.update(_overrides(n_flights=n_flights))
    cfg = GenConfig.from_dict(section)
    proportions = tuple(split_cfg.get("proportions", (0.5, 0.3, 0.2)))
    s_seed = split_seed if split_seed is not None else split_cfg.get("seed", cfg.seed)
    records = generate(cfg)
    ds = Dataset.build(records, proportions, s_seed, cfg.airspeed_correlated, cfg.to_dict())
    out = ctx.obj["out"]
    save_dataset(out, ds)
    settings = {"generator": cfg.to_dict(), "split": {"proportions": list(proportions), "seed": s_seed}}
    _echo_config(out, "gen", settings)
    labels = np.array([r.label for r in records])
    mech = Counter()
    for r in records:
        mech.update(k for k, v in r.mechanisms.items() if v)
    click.echo(f"flights {len(records)}  incident rate {labels.mean():.4f}")
    click.echo("mechanisms " + "  ".join(f"{k} {mech[k]}" for k in ("high_ref", "corrected", "late_flaps")))
    sizes = Counter(ds.assignment)
    click.echo("splits " + "  ".join(f"{k} {sizes[k]}" for k in ("train", "val", "test")))
    click.echo(f"wrote {out}")


@cli.command(name="train")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--variant", type=click.Choice(list(VARIANT_FLAGS)), default=None)
@click.option("--agg", type=click.Choice(list(AGG_FLAGS)), default=None)
@click.option("--alpha", type=float, default=None, help="Sharpness of smooth-max.")
@click.option("--gru-units", type=int, default=None)
@click.option("--dense-units", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--l2", "l2_coeff", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--patience", type=int, default=None)
@click.pass_context
def train_cmd(ctx, data_dir, variant, agg, alpha, gru_units, dense_units, **train_flags):
    """Train on the train split, select on val, write model.ckpt and train_log.csv."""
    ds = load_dataset(data_dir)
    m = _section(ctx, "model")
    m.update(_overrides(variant=VARIANT_FLAGS.get(variant), aggregation=AGG_FLAGS.get(agg), alpha=alpha,
                        gru_units=gru_units, dense_units=dense_units))
    unknown = set(m) - {"variant", "aggregation", "alpha", "gru_units", "dense_units"}
    if unknown:
        raise ConfigError(f"unknown model settings {sorted(unknown)}")
    arch = ModelArch(
        input_dim=ds.D,
        variant=m.get("variant", "full"),
        gru_units=int(m.get("gru_units", 20)),
        dense_units=int(m.get("dense_units", 500)),
        aggregation=AggregationKind(m.get("aggregation", "max"), float(m.get("alpha", 20.0))),
    )
    t = _section(ctx, "train")
    t["seed"] = _seed(ctx, t)
    t.update(_overrides(**train_flags))
    unknown = set(t) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown train settings {sorted(unknown)}")
    cfg = TrainConfig(**t)
    out = ctx.obj["out"]
    _echo_config(out, "train", {"data": str(data_dir), "model": arch.to_dict(), "train": cfg.to_dict()})
    res = train(ds.bagset("train"), ds.bagset("val"), arch, cfg)
    meta = {"best_epoch": res.best_epoch, "features": ds.channel_names, "train": cfg.to_dict()}
    if res.log:
        meta["best_val_auc"] = res.best_val_auc
    save_checkpoint(out / "model.ckpt", res.params, cfg.seed, ds.norm, meta)
    write_log(out / "train_log.csv", res.log)
    click.echo(f"epochs {len(res.log)}  best epoch {res.best_epoch}  best val AUC {res.best_val_auc:.4f}")
    click.echo(f"wrote {out / 'model.ckpt'}")


def _load_model(checkpoint, ds: Dataset):
    params, header, norm = load_checkpoint(checkpoint)
    if params.arch.input_dim != ds.D:
        raise DimensionError(f"checkpoint expects {params.arch.input_dim} input channels, dataset has {ds.D}")
    if norm is None:
        raise DimensionError("checkpoint carries no normaliser")
    channels, mean, sd = norm
    if list(channels) != list(ds.channel_names):
        raise DimensionError(f"checkpoint channels {channels} differ from dataset channels {ds.channel_names}")
    return params, NormStats(mean, sd, tuple(channels))


@cli.command(name="eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="test", show_default=True)
@click.option("--delta", type=float, default=None, help="Precursor threshold in (0, 1).")
@click.pass_context
def eval_cmd(ctx, checkpoint, data_dir, split, delta):
    """Bag AUC, confusion counts and localization metrics for one split."""
    e = _section(ctx, "eval")
    e.update(_overrides(delta=delta))
    delta = check_delta(e.get("delta", DEFAULT_DELTA))
    ds = load_dataset(data_dir)
    params, norm = _load_model(checkpoint, ds)
    out = ctx.obj["out"]
    _echo_config(out, "eval", {"checkpoint": str(checkpoint), "data": str(data_dir), "split": split,
                               "delta": delta})
    bags = ds.bagset(split, norm)
    recs = ds.records if split == "all" else ds.split_records(split)
    p, y_hat = predict_batch(bags.x, bags.mask, params)
    summary = evaluate_split(split, y_hat, bags.y, p, bags.mask, recs, delta)
    (out / f"eval_{split}.json").write_text(summary.to_json())
    click.echo(summary.to_json(), nl=False)


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--delta", type=float, default=None, help="Precursor threshold in (0, 1).")
@click.argument("ids", nargs=-1, type=int, required=True)
@click.pass_context
def explain(ctx, checkpoint, data_dir, delta, ids):
    """Per-step probability traces for the given flight IDS plus flap-timing statistics."""
    e = _section(ctx, "eval")
    e.update(_overrides(delta=delta))
    delta = check_delta(e.get("delta", DEFAULT_DELTA))
    channels = tuple(e.get("channels", ("speed_reference", "engine_n1", "flap_setting", "autopilot")))
    ds = load_dataset(data_dir)
    known = {r.id for r in ds.records}
    missing = [i for i in ids if i not in known]
    if missing:
        raise ConfigError(f"unknown flight ids {missing}; available ids are {min(known)}..{max(known)}"
                          if known else f"unknown flight ids {missing}; dataset is empty")
    params, norm = _load_model(checkpoint, ds)
    out = ctx.obj["out"]
    _echo_config(out, "explain", {"checkpoint": str(checkpoint), "data": str(data_dir), "ids": list(ids),
                                  "delta": delta, "channels": list(channels)})
    for fid in ids:
        rec = ds.by_id(fid)
        p = predict_instances(apply_normalizer(ds.features(rec), norm), None, params)
        report = PrecursorReport.build(rec.id, p, delta, rec.checkpoint_step, rec.truth_windows)
        emit_explanation(rec, report, out / f"flight_{fid}.csv", channels)
        click.echo(f"flight {fid}  label {rec.label}  max p {p.max():.3f} at step {report.argmax_step}  "
                   f"precursors {len(report.precursors)}")
    early = emit_flap_timing(ds.records, out / "flap_timing.csv")
    click.echo(f"final flaps >= 1 nm before checkpoint: nominal {early[0]:.3f}  incident {early[1]:.3f}")


def main(argv=None) -> int:
    try:
        return cli.main(args=argv, prog_name="dtmil", standalone_mode=False) or 0
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except (DtmilError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
