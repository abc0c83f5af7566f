"""Command-line interface: ``gcpsgd {fit,generate,score,gradcheck,variance}``.

Exit status is 0 on success, 1 on runtime failures (bad data, I/O) and 2 on
invalid flags. Progress goes to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import io as tio
from .errors import GCPError
from .losses import parse_loss
from .mttkrp import gradient_full, vectorize
from .optimizer import FitConfig, fit_gcp_adam, initial_guess
from .rng import make_rng
from .sampling import (
    SAMPLER_NAMES,
    SamplerKind,
    empirical_bias_variance,
    gradient_mean,
)
from .synthetic import (
    BinaryProblemSpec,
    cosine_similarity_score,
    gen_binary_problem,
    gen_gamma_problem,
    is_recovered,
)
from .tensor import SparseTensor

log = logging.getLogger("gcpsgd")


class UsageError(Exception):
    """Invalid or inconsistent flags (exit status 2)."""


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag defaults (flags given on the command line win)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for large gradient kernels")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed-order reductions in threaded kernels")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")


def _add_problem(p: argparse.ArgumentParser, sampler_default=None) -> None:
    p.add_argument("--input", help="tensor file (.tns sparse, .bin dense binary, other dense text)")
    p.add_argument("--loss", help="gaussian|poisson|bernoulli-odds|gamma|beta-half|huber:<delta>")
    p.add_argument("--rank", type=int)
    p.add_argument("--sampler", choices=SAMPLER_NAMES, default=sampler_default)
    p.add_argument("--samples", type=int, help="gradient samples s (default: sum of extents)")
    p.add_argument("--nonzero-samples", type=int, help="p for stratified samplers")
    p.add_argument("--zero-samples", type=int, help="q for stratified samplers")
    p.add_argument("--oversample", type=float, default=1.1)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="gcpsgd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("fit", help="fit a GCP model with GCP-Adam")
    _add_problem(p)
    _add_common(p)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--epoch-iters", type=int, default=1000)
    p.add_argument("--max-bad-epochs", type=int, default=1)
    p.add_argument("--decay", type=float, default=0.1)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--lower-bound", default="auto", help="'auto', 'none' or a number")
    p.add_argument("--estimator-samples", type=int, default=100_000)
    p.add_argument("--estimator", choices=("uniform", "stratified"))
    p.add_argument("--output", help="model output path")
    p.add_argument("--trace", help="trace CSV output path")
    subs["fit"] = p

    p = sub.add_parser("generate", help="generate a synthetic problem")
    p.add_argument("--kind", choices=("gamma", "binary"), default="gamma")
    p.add_argument("--shape", type=int, nargs="+")
    p.add_argument("--rank", type=int)
    p.add_argument("--delta", type=float, default=0.15)
    p.add_argument("--p-high", type=float, default=0.9)
    p.add_argument("--p-low", type=float, default=0.0025)
    p.add_argument("--output", help="data tensor path")
    p.add_argument("--truth", help="true model path")
    _add_common(p)
    subs["generate"] = p

    p = sub.add_parser("score", help="cosine similarity of a model against the truth")
    p.add_argument("--model")
    p.add_argument("--truth")
    _add_common(p)
    subs["score"] = p

    p = sub.add_parser("gradcheck", help="compare the mean stochastic gradient with the exact one")
    _add_problem(p)
    _add_common(p)
    p.add_argument("--model", help="model at which to evaluate (default: random initial guess)")
    p.add_argument("--draws", type=int, default=2000)
    subs["gradcheck"] = p

    p = sub.add_parser("variance", help="empirical bias and variance per sampler")
    _add_problem(p)
    _add_common(p)
    p.add_argument("--model", help="model at which to evaluate (default: random initial guess)")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--samplers", nargs="+", choices=SAMPLER_NAMES)
    subs["variance"] = p
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot load config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config must be a JSON object")
        known = vars(args)
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        unknown = sorted(set(overrides) - set(known))
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        subs[args.command].set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required flag(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _loss(args):
    try:
        return parse_loss(args.loss)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_sampler(args, x) -> None:
    if args.sampler and args.sampler != "uniform" and not isinstance(x, SparseTensor):
        raise UsageError(f"--sampler {args.sampler} needs sparse (.tns) input")


def _sampler_kind(args, x, name) -> SamplerKind:
    s = args.samples if args.samples is not None else sum(x.shape.dims)
    if name == "uniform":
        return SamplerKind(name, samples=s, oversample=args.oversample)
    p = args.nonzero_samples if args.nonzero_samples is not None else s // 2
    q = args.zero_samples if args.zero_samples is not None else s - s // 2
    return SamplerKind(name, nonzeros=p, zeros=q, oversample=args.oversample)


def _lower_bound(token: str):
    if token in ("auto", "none"):
        return "auto" if token == "auto" else None
    try:
        return float(token)
    except ValueError:
        raise UsageError(f"bad --lower-bound {token!r}") from None


def cmd_fit(args) -> int:
    _require(args, "input", "loss", "rank")
    loss = _loss(args)
    x = tio.read_tensor(args.input)
    _check_sampler(args, x)
    if args.estimator == "stratified" and not isinstance(x, SparseTensor):
        raise UsageError("--estimator stratified needs sparse (.tns) input")
    try:
        cfg = FitConfig(
            rank=args.rank, loss=loss, sampler=args.sampler, samples=args.samples,
            nonzero_samples=args.nonzero_samples, zero_samples=args.zero_samples,
            oversample=args.oversample, learning_rate=args.learning_rate,
            beta1=args.beta1, beta2=args.beta2, epsilon=args.epsilon,
            epoch_iters=args.epoch_iters, max_bad_epochs=args.max_bad_epochs,
            decay=args.decay, lower_bound=_lower_bound(args.lower_bound),
            estimator_samples=args.estimator_samples, estimator_kind=args.estimator,
            max_epochs=args.max_epochs, seed=args.seed, threads=max(1, args.threads),
            deterministic=args.deterministic,
        )
        cfg.resolve_sampler(x)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model, trace = fit_gcp_adam(x, cfg)
    if args.output:
        tio.write_model(model, args.output)
    if args.trace:
        tio.write_trace_csv(trace, args.trace)
    print(f"final loss estimate: {trace.records[-1].loss_estimate:.17g}")
    return 0


def cmd_generate(args) -> int:
    _require(args, "shape", "rank", "output")
    rng = make_rng(args.seed, "generate")
    try:
        if args.kind == "gamma":
            x, truth = gen_gamma_problem(args.shape, args.rank, rng)
        else:
            spec = BinaryProblemSpec(tuple(args.shape), args.rank, args.delta, args.p_high, args.p_low)
            x, truth = gen_binary_problem(spec, rng)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tio.write_tensor(x, args.output)
    if args.truth:
        tio.write_model(truth, args.truth)
    nnz = x.nnz
    print(f"wrote {args.output}: shape {'x'.join(map(str, x.shape.dims))}, "
          f"{nnz} nonzeros ({nnz / x.shape.total:.4%})")
    return 0


def cmd_score(args) -> int:
    _require(args, "model", "truth")
    score = cosine_similarity_score(tio.read_model(args.model), tio.read_model(args.truth))
    print(f"{score:.6f} {'recovered' if is_recovered(score) else 'not recovered'}")
    return 0


def _problem(args):
    _require(args, "input", "loss")
    loss = _loss(args)
    x = tio.read_tensor(args.input)
    _check_sampler(args, x)
    loss.check_data(x.values)
    if args.model:
        model = tio.read_model(args.model)
    else:
        _require(args, "rank")
        model = initial_guess(x, args.rank, make_rng(args.seed, "init"))
    return x, loss, model


def cmd_gradcheck(args) -> int:
    x, loss, model = _problem(args)
    name = args.sampler or ("stratified" if isinstance(x, SparseTensor) else "uniform")
    kind = _sampler_kind(args, x, name)
    exact = vectorize(gradient_full(x, model, loss))
    mean, stderr = gradient_mean(kind, x, model, loss, args.draws, make_rng(args.seed, "gradient"))
    rel = np.linalg.norm(mean - exact) / np.linalg.norm(exact)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stderr > 0, np.abs(mean - exact) / stderr, 0.0)
    print(f"sampler {name}: relative error {rel:.6e}, max |z| {z.max():.3f} over {args.draws} draws")
    return 0


def cmd_variance(args) -> int:
    x, loss, model = _problem(args)
    names = args.samplers or (list(SAMPLER_NAMES) if isinstance(x, SparseTensor) else ["uniform"])
    if any(n != "uniform" for n in names) and not isinstance(x, SparseTensor):
        raise UsageError("stratified samplers need sparse (.tns) input")
    exact = gradient_full(x, model, loss)
    print(f"# ||g||_2 = {np.linalg.norm(vectorize(exact)):.3e}, N = {args.draws}")
    print(f"{'sampler':<16} {'emp. bias':>12} {'emp. var.':>12}")
    for name in names:
        rng = make_rng(args.seed, f"variance:{name}")
        bias, var = empirical_bias_variance(
            _sampler_kind(args, x, name), x, model, loss, args.draws, rng, exact=exact
        )
        print(f"{name:<16} {bias:>12.3e} {var:>12.3e}")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "generate": cmd_generate,
    "score": cmd_score,
    "gradcheck": cmd_gradcheck,
    "variance": cmd_variance,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gcpsgd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (GCPError, OSError, ValueError, TypeError) as exc:
        print(f"gcpsgd {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
