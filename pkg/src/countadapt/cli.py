"""Command-line interface: synth, train, eval, predict, gradcheck.

Every option can come from three places with the precedence
flags > config file > defaults; the config file is flat ``key=value`` lines.
Each command echoes its fully resolved configuration before doing anything,
so a run can be reproduced from its log alone. Exit codes: 0 success,
2 configuration problem, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck, perturb_params
from .data import (SOURCE, TARGET, DensityKernelSpec, DensityMap,
                   SceneDomainParams, load_annotations, read_ppm,
                   save_annotations, synth_scene, write_dmap, write_ppm)
from .errors import ConfigError, CountAdaptError, ValidationError
from .evaluation import (METRICS_CSV_HEADER, compare_domains, evaluate,
                         format_report, report_csv_rows)
from .models import (DiscriminatorConfig, EstimatorConfig, discriminator_forward,
                     estimator_config_from_params, estimator_forward, init_params,
                     load_checkpoint, predict_count)
from .training import (STEP_CSV_HEADER, TrainConfig, adversarial_loss,
                       density_loss, derive_seed, discriminator_loss, train)


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------

def _to_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict:
    """Flat key=value file; '#' starts a comment; blank lines ignored."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def resolve_options(args, spec) -> dict:
    """Merge flag values, config-file values, and defaults (in that order).

    ``spec`` maps option name -> (converter, default); a default of
    ``...`` marks the option as required after resolution.
    """
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(spec)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; valid: {sorted(spec)}")
    resolved = {}
    for name, (convert, default) in spec.items():
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            resolved[name] = flag_value
        elif name in file_cfg:
            try:
                resolved[name] = convert(file_cfg[name])
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"config key {name}: {e}") from e
        elif default is ...:
            raise ConfigError(f"missing required option --{name.replace('_', '-')}")
        else:
            resolved[name] = default
    return resolved


def echo_config(command: str, resolved: dict):
    print(f"[config] command = {command}")
    for key, value in resolved.items():
        print(f"[config] {key} = {value}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def load_domain_specs(path) -> dict[str, SceneDomainParams]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read domain spec file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"domain spec file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict) or not raw:
        raise ConfigError(f"domain spec file {path} must map domain names to parameter objects")
    specs = {}
    for name, fields in raw.items():
        if not isinstance(fields, dict):
            raise ConfigError(f"domain {name!r}: expected a parameter object")
        if "object_count_range" in fields:
            fields = dict(fields, object_count_range=tuple(fields["object_count_range"]))
        try:
            specs[name] = SceneDomainParams(name=name, **fields)
        except (TypeError, ValidationError) as e:
            raise ConfigError(f"domain {name!r}: {e}") from e
    return specs


def cmd_synth(args) -> int:
    spec = {
        "out": (str, ...),
        "domains": (str, ...),
        "per_domain": (int, 10),
        "seed": (int, 0),
        "deterministic": (_to_bool, True),
    }
    opts = resolve_options(args, spec)
    echo_config("synth", opts)
    domain_specs = load_domain_specs(opts["domains"])
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, params in domain_specs.items():
        img_dir = out_dir / name
        img_dir.mkdir(exist_ok=True)
        base_seed = derive_seed(opts["seed"], f"data.{name}")
        records = []
        total_objects = 0
        for i in range(opts["per_domain"]):
            scene = synth_scene(params, base_seed * 100_003 + i)
            rel = f"{name}/img_{i:05d}.ppm"
            write_ppm(out_dir / rel, scene.image)
            records.append((rel, name, scene.boxes))
            total_objects += scene.count
        save_annotations(out_dir / f"{name}.jsonl", records)
        if opts["per_domain"] == 0:
            print(f"warning: domain {name}: wrote 0 images (empty annotation file)")
        print(f"domain {name}: {len(records)} images, {total_objects} objects "
              f"-> {out_dir / (name + '.jsonl')}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    spec = {
        "source": (str, ...),
        "target": (str, None),
        "out": (str, ...),
        "lambda_adv": (float, 0.01),
        "epochs": (int, 1),
        "batch_size": (int, 4),
        "lr_psi": (float, 1e-4),
        "lr_theta": (float, 1e-4),
        "sigma_ratio": (float, 0.25),
        "depth": (int, 4),
        "base_channels": (int, 16),
        "eval_every": (int, 200),
        "seed": (int, 0),
        "deterministic": (_to_bool, True),
    }
    opts = resolve_options(args, spec)
    echo_config("train", opts)
    if opts["lambda_adv"] > 0 and not opts["target"]:
        raise ConfigError("--lambda-adv > 0 requires --target annotations")

    source = load_annotations(opts["source"], domain=SOURCE)
    target = load_annotations(opts["target"], domain=TARGET) if opts["target"] else []
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    cfg = TrainConfig(
        lambda_adv=opts["lambda_adv"],
        lr_psi=opts["lr_psi"],
        lr_theta=opts["lr_theta"],
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        sigma_ratio=opts["sigma_ratio"],
        seed=opts["seed"],
        eval_every=opts["eval_every"],
        checkpoint_dir=str(out_dir),
        estimator=EstimatorConfig(in_channels=3, depth=opts["depth"],
                                  base_channels=opts["base_channels"]),
        deterministic=opts["deterministic"],
    )
    with open(out_dir / "config_resolved.txt", "w", encoding="utf-8") as f:
        for key, value in opts.items():
            f.write(f"{key}={value}\n")

    with open(out_dir / "history.csv", "w", encoding="utf-8") as csv:
        csv.write(STEP_CSV_HEADER + "\n")
        psi, history = train(source, target, cfg,
                             report_sink=lambda r: csv.write(r.csv_row() + "\n"))
    last = history[-1]
    print(f"trained {last.step} steps; final l_density_map={last.l_density_map:.6g} "
          f"l_regression={last.l_regression:.6g} l_adv={last.l_adv:.6g} "
          f"l_disc={last.l_disc:.6g}")
    print(f"checkpoints and history.csv written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval / predict
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    spec = {
        "ckpt": (str, ...),
        "data": (str, ...),
        "compare": (str, None),
        "csv": (str, None),
        "sigma_ratio": (float, 0.25),
        "seed": (int, 0),
        "deterministic": (_to_bool, True),
    }
    opts = resolve_options(args, spec)
    echo_config("eval", opts)
    params = load_checkpoint(opts["ckpt"])
    estimator_config_from_params(params)  # layout check up front
    kernel = DensityKernelSpec(sigma_ratio=opts["sigma_ratio"])
    data = load_annotations(opts["data"], domain=SOURCE)
    csv_rows = [METRICS_CSV_HEADER]
    if opts["compare"]:
        other = load_annotations(opts["compare"], domain=TARGET)
        cmp = compare_domains(params, data, other, kernel)
        print(format_report(cmp.source, label="data"))
        print(format_report(cmp.target, label="compare"))
        ratio_text = " ".join(f"{k}={v:.4f}" for k, v in cmp.ratios.items())
        print(f"ratios (compare / data): {ratio_text}")
        csv_rows += report_csv_rows("data", cmp.source)
        csv_rows += report_csv_rows("compare", cmp.target)
    else:
        report = evaluate(params, data, kernel)
        print(format_report(report, label="data"))
        csv_rows += report_csv_rows("data", report)
    if opts["csv"]:
        Path(opts["csv"]).write_text("\n".join(csv_rows) + "\n", encoding="utf-8")
        print(f"metrics csv written to {opts['csv']}")
    return 0


def cmd_predict(args) -> int:
    spec = {
        "ckpt": (str, ...),
        "image": (str, ...),
        "out": (str, ...),
        "seed": (int, 0),
        "deterministic": (_to_bool, True),
    }
    opts = resolve_options(args, spec)
    echo_config("predict", opts)
    params = load_checkpoint(opts["ckpt"])
    estimator_config_from_params(params)
    image = Tensor(read_ppm(opts["image"]))
    with ad.no_grad():
        density = estimator_forward(params, image)
    write_dmap(opts["out"], DensityMap(density))
    count = predict_count(density)
    print(f"count {count:.4f}")
    print(f"density map written to {opts['out']}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _ops_checks(seed):
    rng = np.random.default_rng(seed)
    pool_vals = rng.permutation(3 * 8 * 8).astype(np.float64) * 0.01
    leaky_vals = rng.uniform(0.1, 1.0, 24) * rng.choice([-1.0, 1.0], 24)
    return [
        ("conv2d k3 s1 p1", lambda x, w, b: ad.conv2d(x, w, b, 1, 1),
         [(2, 6, 6), (3, 2, 3, 3), (3,)]),
        ("conv2d k4 s2 p1", lambda x, w, b: ad.conv2d(x, w, b, 2, 1),
         [(1, 8, 8), (2, 1, 4, 4), (2,)]),
        ("max_pool2d k2 s2", lambda t: ad.max_pool2d(t, 2, 2),
         [Tensor(pool_vals.reshape(3, 8, 8), requires_grad=True)]),
        ("upsample_nearest2x", ad.upsample_nearest2x, [(2, 4, 4)]),
        ("concat_channels", ad.concat_channels, [(2, 4, 4), (3, 4, 4)]),
        ("leaky_relu 0.2", lambda t: ad.leaky_relu(t, 0.2),
         [Tensor(leaky_vals, requires_grad=True)]),
        ("sigmoid", ad.sigmoid, [(4, 5)]),
        ("mse_loss", ad.mse_loss, [(4, 4), (4, 4)]),
        ("add/mul/sum", lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), b)),
         [(3, 3), (3, 3)]),
        ("log(clamp_min)", lambda t: ad.log(ad.clamp_min(t, 1e-7)),
         [Tensor(rng.uniform(0.2, 1.0, 12), requires_grad=True)]),
    ]


def _loss_checks(seed):
    rng = np.random.default_rng(seed)
    gt = Tensor(rng.uniform(0, 1, (8, 8)), dtype=np.float64)
    probs = lambda: Tensor(rng.uniform(0.2, 0.9, (1, 2, 2)), dtype=np.float64,  # noqa: E731
                           requires_grad=True)
    return [
        ("density_loss", lambda p: density_loss(p, gt), [(8, 8)]),
        ("adversarial_loss", adversarial_loss, [probs()]),
        ("discriminator_loss y=1", lambda p: discriminator_loss(p, SOURCE), [probs()]),
        ("discriminator_loss y=0", lambda p: discriminator_loss(p, TARGET), [probs()]),
    ]


def run_gradcheck_scope(scope: str, n_seeds: int = 3):
    """Run one gradcheck suite; returns (all_passed, printable report lines)."""
    lines = []
    all_ok = True

    def run_simple(checks_for_seed, tolerance):
        nonlocal all_ok
        worst: dict[str, float] = {}
        for seed in range(n_seeds):
            for name, fn, inputs in checks_for_seed(seed):
                report = gradcheck(fn, inputs, tolerance=tolerance, seed=seed)
                worst[name] = max(worst.get(name, 0.0), report.max_rel_err)
        for name, err in worst.items():
            ok = err < tolerance
            all_ok &= ok
            lines.append(f"  {name}: max rel err {err:.3e} ({'PASS' if ok else 'FAIL'})")

    if scope == "ops":
        run_simple(_ops_checks, 1e-6)
    elif scope == "losses":
        run_simple(_loss_checks, 1e-6)
    elif scope == "psi":
        for seed in range(n_seeds):
            params = init_params(EstimatorConfig(3, 2, 2), rng_seed=seed, dtype=np.float64)
            perturb_params(params, seed=seed + 100)
            rng = np.random.default_rng(seed)
            image = Tensor(rng.uniform(0, 1, (3, 32, 32)), dtype=np.float64)
            gt = Tensor(rng.uniform(0, 0.02, (32, 32)), dtype=np.float64)
            report = gradcheck(lambda *_: density_loss(estimator_forward(params, image), gt),
                               params.tensors(), tolerance=1e-4, step=1e-6,
                               seed=seed, max_coords=6)
            ok = report.passed
            all_ok &= ok
            lines.append(f"  estimator+density_loss seed {seed}: max rel err "
                         f"{report.max_rel_err:.3e} ({'PASS' if ok else 'FAIL'})")
    elif scope == "theta":
        for seed in range(n_seeds):
            params = init_params(DiscriminatorConfig(), rng_seed=seed, dtype=np.float64)
            perturb_params(params, seed=seed + 200)
            rng = np.random.default_rng(seed)
            density = Tensor(rng.uniform(0, 1, (1, 32, 32)), dtype=np.float64)
            report = gradcheck(
                lambda *_: discriminator_loss(discriminator_forward(params, density), TARGET),
                params.tensors(), tolerance=1e-4, step=1e-6, seed=seed, max_coords=3)
            ok = report.passed
            all_ok &= ok
            lines.append(f"  discriminator+bce seed {seed}: max rel err "
                         f"{report.max_rel_err:.3e} ({'PASS' if ok else 'FAIL'})")
    else:
        raise ConfigError(f"unknown gradcheck scope {scope!r} "
                          "(expected ops, losses, psi, or theta)")
    return all_ok, lines


def cmd_gradcheck(args) -> int:
    spec = {
        "scope": (str, ...),
        "seeds": (int, 3),
        "seed": (int, 0),
        "deterministic": (_to_bool, True),
    }
    opts = resolve_options(args, spec)
    echo_config("gradcheck", opts)
    ok, lines = run_gradcheck_scope(opts["scope"], n_seeds=opts["seeds"])
    print(f"gradcheck scope {opts['scope']} over {opts['seeds']} seeds:")
    for line in lines:
        print(line)
    print("RESULT:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file (flags override it)")
    common.add_argument("--seed", type=int, help="master seed for all sub-streams")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=None, help="bit-reproducible mode (default: on)")

    parser = argparse.ArgumentParser(
        prog="countadapt",
        description="Density-map object counting with adversarial domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="render a synthetic multi-domain dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--domains", help="JSON file mapping domain names to scene parameters")
    p.add_argument("--per-domain", dest="per_domain", type=int, help="images per domain")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train an estimator")
    p.add_argument("--source", help="source-domain annotation file (JSON lines)")
    p.add_argument("--target", help="target-domain annotation file (images used unlabeled)")
    p.add_argument("--out", help="output directory for checkpoints and history")
    p.add_argument("--lambda-adv", dest="lambda_adv", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-psi", dest="lr_psi", type=float)
    p.add_argument("--lr-theta", dest="lr_theta", type=float)
    p.add_argument("--sigma-ratio", dest="sigma_ratio", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="compute counting metrics")
    p.add_argument("--ckpt", help="estimator checkpoint")
    p.add_argument("--data", help="annotation file to evaluate")
    p.add_argument("--compare", help="second annotation file for a domain-gap comparison")
    p.add_argument("--csv", help="also write metrics as CSV to this path")
    p.add_argument("--sigma-ratio", dest="sigma_ratio", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common],
                       help="predict a density map and count for one image")
    p.add_argument("--ckpt", help="estimator checkpoint")
    p.add_argument("--image", help="input P6 pixmap")
    p.add_argument("--out", help="output density map (DMAP)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference verification of gradients")
    p.add_argument("--scope", choices=["ops", "losses", "psi", "theta"])
    p.add_argument("--seeds", type=int, help="number of seeds per check")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except CountAdaptError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
