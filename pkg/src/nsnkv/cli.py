"""Command-line entry point: codebook lifecycle, verification, simulation, stats."""

from __future__ import annotations

import json
import sys

import click

from . import codebook as cbm
from . import stats as stats_mod
from . import verify as verify_mod
from .codebook import BitMode
from .config import RunConfig, build_config, parse_config_file
from .core import load_tensor, make_rng
from .errors import NsnKvError
from .simulate import Workload, run_simulation, write_csv


def _common_options(fn):
    opts = [
        click.option("--bit-mode", type=click.Choice(["1b", "2b"]), default=None,
                     help="Quantization mode (default 2b)."),
        click.option("--residual-size", type=int, default=None,
                     help="Full-precision buffer size (default 64)."),
        click.option("--strategy", type=click.Choice(["none", "s1", "s2", "s3"]), default=None,
                     help="Scale adjustment strategy (default s3)."),
        click.option("--seed", type=int, default=None, help="Master seed (default 0)."),
        click.option("--no-dq", "no_dq", is_flag=True, default=False,
                     help="Disable double quantization of byproducts."),
        click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                     help="Flat key=value config file (CLI flags win)."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _make_config(config_path, **cli) -> RunConfig:
    file_values = parse_config_file(config_path) if config_path else {}
    if cli.pop("no_dq", False):
        cli["dq_enabled"] = False
    if cli.pop("no_finetune", False):
        cli["finetune"] = False
    return build_config(file_values, cli)


class _Group(click.Group):
    """Surface package errors as clean CLI errors (nonzero exit, no traceback)."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except NsnKvError as e:
            raise click.ClickException(str(e)) from e


@click.group(cls=_Group)
def main():
    """Calibration-free KV-cache vector quantization toolkit."""


@main.command("build-codebook")
@_common_options
@click.option("--no-finetune", "no_finetune", is_flag=True, default=False,
              help="Stop after the K-Means baseline.")
@click.option("--pack4", is_flag=True, default=False,
              help="Attach 4-bit packed entries to the file.")
@click.option("--out", "out_path", type=click.Path(), default="codebook.nsnc",
              show_default=True, help="Codebook file to write.")
def cmd_build_codebook(config_path, out_path, pack4, **cli):
    """Build (and by default tune) the global codebook from synthetic data."""
    cfg = _make_config(config_path, **cli)
    rng = make_rng(cfg.seed)
    cb = cbm.kmeans_init(rng, cfg.bit_mode, n_samples=cfg.kmeans_samples,
                         n_iters=cfg.kmeans_iters, seed=cfg.seed)
    report = None
    if cfg.finetune:
        cb, report = cbm.finetune(cb, rng, n_samples=cfg.tune_batch,
                                  n_steps=cfg.tune_steps, lr=cfg.tune_lr)
    if pack4:
        cb = cbm.pack4(cb)
    cbm.save_codebook(out_path, cb)
    payload = {
        "config": cfg.to_dict(),
        "heldout_mean_cossim": cbm.heldout_cossim(cb),
        "tuned": cb.tuned,
        "packed4": cb.packed4 is not None,
    }
    if report is not None:
        payload["tune_report"] = report.to_dict()
    report_path = str(out_path) + ".report.json"
    with open(report_path, "w") as f:
        json.dump(payload, f, indent=2)
    click.echo(f"wrote {out_path} (held-out cossim {payload['heldout_mean_cossim']:.4f}) "
               f"and {report_path}")


def _load_codebooks(codebook_path, cfg: RunConfig):
    """The file's codebook plus a quick K-Means one for the other bit mode
    (cross-mode checks need both)."""
    cb = cbm.load_codebook(codebook_path)
    other_mode = BitMode.ONE_BIT if cb.bit_mode is BitMode.TWO_BIT else BitMode.TWO_BIT
    other = cbm.kmeans_init(make_rng(cfg.seed), other_mode,
                            n_samples=1 << 15, n_iters=20, seed=cfg.seed)
    if cb.bit_mode is BitMode.TWO_BIT:
        return cb, other
    return other, cb


@main.command("verify")
@_common_options
@click.option("--codebook", "codebook_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the per-check JSON report here.")
def cmd_verify(config_path, codebook_path, out_path, **cli):
    """Run every registered invariant check; nonzero exit on any failure."""
    cfg = _make_config(config_path, **cli)
    cb2, cb1 = _load_codebooks(codebook_path, cfg)
    ctx = verify_mod.VerifyContext(cb2=cb2, cb1=cb1, config=cfg, seed=cfg.seed)
    results = verify_mod.run_all(ctx)
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        click.echo(f"[{mark}] {r.name}")
        if r.name == "vq.ledger_reference_widths":
            trunc = lambda x: int(x * 100) / 100  # reference table truncates
            click.echo(f"       avg bits/value: 2b={trunc(r.details['avg_bits_2b'])} "
                       f"1b={trunc(r.details['avg_bits_1b'])} "
                       f"2b-no-dq={trunc(r.details['avg_bits_2b_no_dq'])} "
                       f"(exact {r.details['avg_bits_2b']:.4f} / "
                       f"{r.details['avg_bits_1b']:.4f} / "
                       f"{r.details['avg_bits_2b_no_dq']:.4f})")
        if not r.passed:
            click.echo(f"       {r.details}")
    n_fail = sum(not r.passed for r in results)
    if out_path:
        with open(out_path, "w") as f:
            json.dump(
                {
                    "config": cfg.to_dict(),
                    "checks": [
                        {"name": r.name, "passed": r.passed, "details": r.details}
                        for r in results
                    ],
                    "failures": n_fail,
                },
                f,
                indent=2,
            )
    click.echo(f"{len(results) - n_fail}/{len(results)} checks passed")
    if n_fail:
        sys.exit(1)


@main.command("simulate")
@_common_options
@click.option("--codebook", "codebook_path", type=click.Path(exists=True), required=True)
@click.option("--prefill", type=int, default=128, show_default=True)
@click.option("--decode", type=int, default=32, show_default=True)
@click.option("--heads", type=int, default=1, show_default=True)
@click.option("--prefill-fp", "prefill_fp", is_flag=True, default=False,
              help="Keep the whole prefill in full precision (quantize decode only).")
@click.option("--dump", "dumps", type=click.Path(exists=True), multiple=True,
              help="Q, K, V tensor dumps (give exactly three) instead of synthetic data.")
@click.option("--out", "out_path", type=click.Path(), default="simulate.csv",
              show_default=True, help="Per-step metrics CSV.")
def cmd_simulate(config_path, codebook_path, prefill, decode, heads, dumps, out_path,
                 prefill_fp, **cli):
    """Prefill + decode with the quantized cache against the exact reference."""
    cli["prefill_fp"] = prefill_fp or None
    cfg = _make_config(config_path, **cli)
    cb = cbm.load_codebook(codebook_path)
    if cb.bit_mode is not cfg.bit_mode:
        raise click.ClickException(
            f"codebook is {cb.bit_mode.name}, config wants {cfg.bit_mode.name}")
    tensors = None
    if dumps:
        if len(dumps) != 3:
            raise click.ClickException("--dump needs exactly three paths: Q K V")
        tensors = tuple(load_tensor(p) for p in dumps)
    workload = Workload(n_prefill=prefill, n_decode=decode, n_heads=heads, seed=cfg.seed)
    records, summary = run_simulation(cfg, workload, cb, cb, tensors=tensors)
    write_csv(out_path, records)
    click.echo(json.dumps(summary, indent=2))
    click.echo(f"wrote {out_path}")


@main.command("stats")
@_common_options
@click.option("--dump", "dump_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
def cmd_stats(config_path, dump_path, out_path, **cli):
    """Alignment diagnostics (KL, covariance, correlation, variance band) for a dump."""
    cfg = _make_config(config_path, **cli)
    t = load_tensor(dump_path)
    kl = stats_mod.channel_kl(t)
    # the variance-band check transforms rows, so it needs a power-of-two width
    lemma = None
    if t.shape[1] >= 2 and (t.shape[1] & (t.shape[1] - 1)) == 0:
        lemma = stats_mod.lemma_band_check(t, alpha=0.05, trials=30, rng=make_rng(cfg.seed))
    payload = {
        "config": cfg.to_dict(),
        "shape": list(t.shape),
        "kl": kl.to_dict(),
        "offdiag_frobenius": stats_mod.offdiag_frobenius(t),
        "mean_abs_correlation": (
            stats_mod.mean_abs_correlation(t, group=8) if t.shape[1] % 8 == 0 else None
        ),
        "lemma_band": lemma.to_dict() if lemma is not None else None,
    }
    text = json.dumps(payload, indent=2)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
    click.echo(text)


if __name__ == "__main__":  # pragma: no cover
    main()
