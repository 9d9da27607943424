"""Command-line interface: synth, fit, eval, ablate, weights.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import evaluation, io, model
from .fitting import VARIANTS, WeightConfig, adaptive_weights, fit_variant
from .model import generate_synthetic_basis, load_model, save_model, synthesize
from .pose import DegenerateConfigurationError

_VARIANT_ALIASES = {"full": "2D+3D+P+W"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="morphfit",
                     description="Landmark-driven morphable face model fitting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(name="synth", help="generate a synthetic model file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output model path (.mfit or .json)")
    p.add_argument("--vertices", type=int, default=2000)
    p.add_argument("--shape-dims", type=int, default=40)
    p.add_argument("--expr-dims", type=int, default=10)

    p = sub.add_parser(name="fit", help="fit a model to detected landmarks")
    p.add_argument("--model", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--variant", default="full",
                   choices=sorted(set(VARIANTS) | set(_VARIANT_ALIASES)))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iters", type=int, default=4)

    p = sub.add_parser(name="eval", help="score a reconstruction against ground truth")
    p.add_argument("--recon", required=True, help="reconstructed mesh OBJ")
    p.add_argument("--truth", required=True, help="ground-truth mesh OBJ")
    p.add_argument("--nose-index", type=int, required=True,
                   help="0-based nose tip vertex index in the reconstruction")
    p.add_argument("--radius", type=float, default=85.0)

    p = sub.add_parser(name="ablate", help="run the synthetic ablation benchmark")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--yaw-min", type=float, default=60.0, help="degrees")
    p.add_argument("--yaw-max", type=float, default=80.0, help="degrees")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--noise-2d", type=float, default=1.0)
    p.add_argument("--noise-3d", type=float, default=1.0)
    p.add_argument("--noise-depth", type=float, default=2.0)
    p.add_argument("--noise-silhouette", type=float, default=30.0)
    p.add_argument("--vertices", type=int, default=2000)

    p = sub.add_parser(name="weights", help="print the adaptive weight schedule")
    p.add_argument("--yaw-deg", type=float, required=True)

    return parser


def _cmd_synth(args) -> int:
    basis = generate_synthetic_basis(args.seed, num_vertices=args.vertices,
                                     num_shape=args.shape_dims, num_expr=args.expr_dims)
    save_model(basis, args.out)
    print(f"wrote {args.out} (V={basis.num_vertices}, "
          f"shape={basis.num_shape}, expr={basis.num_expr})")
    return 0


def _cmd_fit(args) -> int:
    basis = load_model(args.model)
    lm = io.load_landmarks(args.landmarks)
    variant = _VARIANT_ALIASES.get(args.variant, args.variant)
    cfg = WeightConfig(iters=args.iters)
    report = fit_variant(basis, lm, cfg, variant)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_params(report.params, out / "params.json")
    io.export_obj(synthesize(basis, report.params), out / "mesh.obj")
    io.save_fit_report(report, out / "report.json")
    last = report.per_iteration[-1]
    print(f"variant={variant} converged={str(report.converged).lower()} "
          f"yaw_deg={last.yaw * 57.29577951308232:.3f} e_fit={last.energy_fit:.6f}")
    return 0 if report.converged else 3


def _cmd_eval(args) -> int:
    recon = io.read_obj(args.recon)
    truth = io.read_obj(args.truth)
    result = evaluation.evaluate_reconstruction(recon, truth, args.nose_index,
                                                radius=args.radius)
    print(f"rmse_mm={result.rmse_mm:.6f}")
    return 0


def _cmd_ablate(args) -> int:
    noise = evaluation.NoiseModel(sigma_2d=args.noise_2d, sigma_3d=args.noise_3d,
                                  sigma_depth=args.noise_depth,
                                  silhouette_px=args.noise_silhouette)
    result = evaluation.run_ablation_benchmark(
        args.seed, args.cases, yaw_range_deg=(args.yaw_min, args.yaw_max),
        noise=noise, num_vertices=args.vertices, csv_path=args.out)
    for variant in VARIANTS:
        print(f"{variant}\tmean_rmse_mm={result.mean_rmse[variant]:.6f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_weights(args) -> int:
    import math
    l2d, l3d = adaptive_weights(math.radians(args.yaw_deg))
    print(f"lambda_2d={l2d:.6f} lambda_3d={l3d:.6f}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "weights": _cmd_weights,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (model.ModelFormatError, io.LandmarkFormatError,
            DegenerateConfigurationError, evaluation.DegenerateCloudError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
