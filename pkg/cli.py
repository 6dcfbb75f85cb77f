"""
Command-line interface for training, registration, sampling, transport and evaluation.

Exit codes: 0 success, 2 invalid input (config, grid, model, dataset, missing
file), 3 numerical abort during training.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import ConfigError, dump_run_config, load_run_config
from cvae_model import CvaeRegistrationModel, ModelError, RegistrationMode, RegistrationResult
from evaluation import ManifestEvaluator
from grid_field import (
    FieldKind, GridError, VectorField, choose_scaling_N, exponentiate, jacobian_map,
    negative_jacobian_fraction, normalize_intensity,
)
from latent_analysis import CcaError, sample_deformation, transport, write_projection_table
from similarity import format_report
from synth_data import DatasetError, SynthSpec, generate_dataset, load_dataset, save_dataset
from tensor_io import ContainerError, load_field, load_image, read_container, save_field, save_image, write_container
from trainer import NumericalAbort, Trainer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORT = 3


class UsageError(ValueError):
    """Flags that are individually valid but inconsistent."""


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_image(path: str, normalize: bool):
    if not Path(path).is_file():
        raise FileNotFoundError(f"image not found: {path}")
    img = load_image(path)
    return normalize_intensity(img) if normalize else img


def _read_masks(specs: Optional[List[str]]) -> Dict[str, np.ndarray]:
    masks = {}
    for spec in specs or []:
        label, sep, path = spec.partition("=")
        if not sep or not label:
            raise UsageError(f"mask must be given as LABEL=PATH, got {spec!r}")
        values, _ = read_container(path)
        masks[label] = values > 0.5
    return masks


def _load_model(path: str) -> CvaeRegistrationModel:
    return CvaeRegistrationModel.load(path)


def _write_result(out: Path, result: RegistrationResult, prefix: str = "", record_wall_time: bool = True):
    save_field(out / f"{prefix}velocity.tc", result.velocity)
    save_field(out / f"{prefix}displacement.tc", result.phi.displacement)
    save_image(out / f"{prefix}warped.tc", result.warped)
    save_image(out / f"{prefix}jacobian.tc", jacobian_map(result.phi))
    if result.latent is not None:
        write_container(out / f"{prefix}z.tc", result.latent.z)
    metrics = dict(result.metrics)
    metrics["wall_ms"] = result.wall_ms if record_wall_time else 0.0
    (out / f"{prefix}metrics.txt").write_text(format_report(metrics), encoding="utf-8")


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    pairs = load_dataset(args.data, split=args.split)
    out = _out_dir(args.out)
    dump_run_config(config, out / "run_config.json")
    model = CvaeRegistrationModel(config.model, seed=config.train.seed)
    history = Trainer(model, config.train, out).train(pairs)
    print(f"✓ Trained {len(history.records)} steps, final loss {history.records[-1].total:.4f}")
    print(f"Checkpoints saved to: {out}")
    return EXIT_OK


def cmd_register(args) -> int:
    if args.stochastic and args.seed is None:
        raise UsageError("--stochastic requires --seed")
    model = _load_model(args.model)
    M = _read_image(args.moving, args.normalize)
    F = _read_image(args.fixed, args.normalize)
    mode = RegistrationMode.STOCHASTIC if args.stochastic else RegistrationMode.DETERMINISTIC
    rng = np.random.default_rng(args.seed) if args.stochastic else None
    result = model.register(M, F, mode, rng, _read_masks(args.moving_mask), _read_masks(args.fixed_mask))
    out = _out_dir(args.out)
    _write_result(out, result, record_wall_time=not args.no_wall_time)
    print(f"✓ Registered, lcc={result.metrics['lcc']:.4f}")
    print(f"Output saved to: {out}")
    return EXIT_OK


def cmd_exp(args) -> int:
    v = load_field(args.velocity)
    v = VectorField(v.grid, v.vectors, kind=FieldKind.VELOCITY)
    steps = args.n if args.n is not None else choose_scaling_N([v])
    phi = exponentiate(v, steps)
    jac = jacobian_map(phi)
    out = _out_dir(args.out)
    save_field(out / "displacement.tc", phi.displacement)
    save_image(out / "jacobian.tc", jac)
    report = {
        "scaling_steps": steps,
        "neg_jac_fraction": negative_jacobian_fraction(phi),
        "min_jacobian": float(jac.values.min()),
        "max_jacobian": float(jac.values.max()),
    }
    (out / "report.txt").write_text(format_report(report), encoding="utf-8")
    print(f"✓ Exponentiated with N={steps}")
    print(f"Output saved to: {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model = _load_model(args.model)
    M = _read_image(args.conditioning, args.normalize)
    out = _out_dir(args.out)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        _write_result(out, sample_deformation(model, M, rng), prefix=f"sample_{i:03d}_",
                      record_wall_time=not args.no_wall_time)
    print(f"✓ Drew {args.count} sample(s)")
    print(f"Output saved to: {out}")
    return EXIT_OK


def cmd_transport(args) -> int:
    model = _load_model(args.model)
    if args.zcode:
        z, _ = read_container(args.zcode)
    else:
        source_moving = _read_image(args.source_pair[0], args.normalize)
        source_fixed = _read_image(args.source_pair[1], args.normalize)
        z, _ = model.encode(source_fixed, source_moving)
    target = _read_image(args.target, args.normalize)
    result = transport(model, z.astype(np.float64), target)
    out = _out_dir(args.out)
    _write_result(out, result, record_wall_time=not args.no_wall_time)
    print("✓ Transported deformation code")
    print(f"Output saved to: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    evaluator = ManifestEvaluator(model, workers=args.workers, record_wall_time=not args.no_wall_time,
                                  seed=args.seed)
    report = evaluator.evaluate(args.manifest, split=args.split)
    out = _out_dir(args.out)
    (out / "metrics.txt").write_text(format_report(report.as_metrics()), encoding="utf-8")
    if report.projection is not None:
        write_projection_table(out / "projection.csv", report.projection, report.labels)
    print("✓ " + evaluator.get_summary_text(report))
    print(f"Report saved to: {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(grid_dims=tuple(args.size), n_per_class=args.n_per_class,
                     seed=args.seed, noise_sigma=args.noise)
    manifest = save_dataset(generate_dataset(spec), args.out)
    print(f"✓ Generated {spec.n_per_class * 4} pairs")
    print(f"Manifest saved to: {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cli.py",
        description="Probabilistic diffeomorphic registration with a conditional variational network.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    def with_common(p, wall_time=True, normalize=True):
        if wall_time:
            p.add_argument("--no-wall-time", action="store_true", help="write wall_ms as 0")
        if normalize:
            p.add_argument("--normalize", action="store_true", help="min-max normalize input images")
        return p

    p = commands.add_parser("train", help="train a model on a synthetic dataset directory")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory with manifest.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="train", help="manifest split to train on")
    p.set_defaults(handler=cmd_train)

    p = with_common(commands.add_parser("register", help="register a moving image onto a fixed image"))
    p.add_argument("--model", required=True, help="checkpoint archive")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stochastic", action="store_true", help="draw z from the posterior")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--moving-mask", action="append", metavar="LABEL=PATH")
    p.add_argument("--fixed-mask", action="append", metavar="LABEL=PATH")
    p.set_defaults(handler=cmd_register)

    p = commands.add_parser("exp", help="exponentiate a stationary velocity field")
    p.add_argument("--velocity", required=True)
    p.add_argument("--n", type=int, default=None, help="scaling steps; chosen from the field when omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_exp)

    p = with_common(commands.add_parser("sample", help="sample deformations from the prior"))
    p.add_argument("--model", required=True)
    p.add_argument("--conditioning", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_sample)

    p = with_common(commands.add_parser("transport", help="apply a deformation code to another image"))
    p.add_argument("--model", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--zcode", help="z-code container")
    source.add_argument("--source-pair", nargs=2, metavar=("MOVING", "FIXED"))
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_transport)

    p = with_common(commands.add_parser("eval", help="evaluate a model over a manifest"), normalize=False)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="fold assignment seed")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--size", type=int, nargs="+", default=[64, 64])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(handler=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s")
    try:
        return args.handler(args)
    except NumericalAbort as e:
        print(f"✗ Training aborted: {e}")
        return EXIT_ABORT
    except (ConfigError, GridError, ModelError, DatasetError, ContainerError, CcaError,
            UsageError, FileNotFoundError) as e:
        print(f"✗ {e}")
        return EXIT_INVALID
    except ValueError as e:
        # pydantic validation of command-line derived specs
        print(f"✗ Invalid arguments: {e}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
