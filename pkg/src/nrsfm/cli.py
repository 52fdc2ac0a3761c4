"""Command line front end.

Flags mirror the pipeline config; a flat key=value config file can supply
any of them, with explicit command-line flags taking precedence. --dry-run
prints the resolved configuration and exits without touching anything.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from nrsfm import pipeline
from nrsfm.errors import ConfigError, NrsfmError, StageError


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_sigmas(s: str):
    return tuple(float(x) for x in s.split(",") if x.strip())


# config-file key -> (converter, pipeline config attribute)
_SCHEMA = {
    "input": (str, "input"),
    "gt_shape": (str, "gt_shape"),
    "gt_rot": (str, "gt_rot"),
    "K": (int, "K"),
    "N": (int, "N"),
    "delta": (float, "delta"),
    "seed": (int, "seed"),
    "restarts": (int, "restarts"),
    "out": (str, "out"),
    "format": (str, "input_format"),
    "experiment": (str, "experiment"),
    "dump_triplets": (_parse_bool, "dump_triplets"),
    "dump_rotations": (_parse_bool, "dump_rotations"),
    "alignment": (str, "alignment"),
    "trials": (int, "trials"),
    "sigmas": (_parse_sigmas, "sigmas"),
    "mu": (float, "mu"),
    "xi": (float, "xi"),
    "max_iter": (int, "max_iter"),
    "eps_t": (float, "eps_t"),
    "sra_iters": (int, "sra_iters"),
}


def read_config_file(path: str) -> dict:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        conv, attr = _SCHEMA[key]
        try:
            values[attr] = conv(val)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nrsfm",
        description="Non-rigid structure from motion with rotation averaging "
        "and a weighted low-rank shape prior.",
    )
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--input", help="track file (csv, NRSM binary, or MoCap text)")
    p.add_argument("--gt-shape", dest="gt_shape", help="NRSG ground-truth shapes")
    p.add_argument("--gt-rot", dest="gt_rot", help="NRSR ground-truth rotations")
    p.add_argument("-K", type=int, help="number of basis shapes (rank/3)")
    p.add_argument("-N", type=int, help="leading singular values to preserve")
    p.add_argument("--delta", type=float, help="rotation filtering radius, radians")
    p.add_argument("--seed", type=int, help="RNG seed for restarts/experiments")
    p.add_argument("--restarts", type=int, help="triplet refinement restarts")
    p.add_argument("--out", help="output directory for artifacts")
    p.add_argument(
        "--experiment",
        choices=pipeline.EXPERIMENTS,
        help="run a harness instead of a single pipeline pass",
    )
    p.add_argument(
        "--format",
        dest="input_format",
        choices=("auto", "csv", "binary", "mocap"),
        help="input layout (default: guess from the extension)",
    )
    p.add_argument(
        "--alignment",
        choices=("none", "flipOnly", "globalRotation"),
        help="gauge removal mode before e3d",
    )
    p.add_argument("--trials", type=int, help="runs per experiment setting")
    p.add_argument(
        "--sigmas", type=_parse_sigmas, help="comma-separated noise levels"
    )
    p.add_argument("--dump-triplets", action="store_true", default=None)
    p.add_argument("--dump-rotations", action="store_true", default=None)
    p.add_argument(
        "--dry-run",
        action="store_true",
        help="print the resolved configuration and exit",
    )
    return p


def resolve_config(args: argparse.Namespace) -> pipeline.PipelineConfig:
    values = read_config_file(args.config) if args.config else {}
    for _, attr in _SCHEMA.values():
        cli_val = getattr(args, attr, None)
        if cli_val is not None:
            values[attr] = cli_val
    return pipeline.PipelineConfig(**values)


def _fmt(x, width=10) -> str:
    if x is None:
        return "-".rjust(width)
    return f"{x:.6g}".rjust(width)


def _print_table(report: dict, wall_time: float) -> None:
    print(
        "sequence".ljust(20),
        "K".rjust(3),
        "e3d".rjust(10),
        "eR".rjust(10),
        "reproj".rjust(10),
        "iters".rjust(5),
        "wall[s]".rjust(8),
    )
    print(
        str(report["sequence"])[:20].ljust(20),
        str(report["K"]).rjust(3),
        _fmt(report["e3d"]),
        _fmt(report["eR"]),
        _fmt(report["reprojection"]),
        str(report["admmIterations"]).rjust(5),
        f"{wall_time:.2f}".rjust(8),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    if args.dry_run:
        for key in sorted(_SCHEMA):
            _, attr = _SCHEMA[key]
            print(f"{key}={getattr(cfg, attr)}")
        print(f"effective_restarts={cfg.effective_restarts}")
        print(f"backend={pipeline.backend_name()}")
        return 0

    try:
        if cfg.experiment == "noiseSweep":
            rows = pipeline.run_noise_sweep(cfg)
            print("sigma       mean_e3d    std_e3d     mean_eR     std_eR")
            for r in rows:
                print(
                    f"{r['sigma']:<10.4g} {r['meanE3d']:<11.6g} "
                    f"{r['stdE3d']:<11.6g} {r['meanER']:<11.6g} {r['stdER']:<.6g}"
                )
        elif cfg.experiment == "nSweep":
            _, summary = pipeline.run_n_sweep(cfg)
            print("N    median_e3d")
            for r in summary:
                print(f"{r['N']:<4d} {r['medianE3d']:.6g}")
        elif cfg.experiment == "rotationAblation":
            rows = pipeline.run_rotation_ablation(cfg)
            print("rotation   e3d_init    e3d_final")
            for r in rows:
                print(f"{r['rotation']:<10} {r['e3dInit']:<11.6g} {r['e3dFinal']:.6g}")
        else:
            run = pipeline.run_pipeline(cfg)
            _print_table(run.report, run.wall_time)
            for w in run.report["warnings"]:
                print(f"warning: {w}", file=sys.stderr)
    except StageError as e:
        print(f"error [{e.stage}]: {e.cause}", file=sys.stderr)
        return 1
    except NrsfmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
