"""
kafforge - Command Line
=======================
Train and audit networks with multi-kernel activation functions.

    python kafforge.py train configs/glyphs_multikaf.cfg
    python kafforge.py gradcheck --seed 0
    python kafforge.py plot-act runs/glyphs_multikaf/model.kafw --layer 2 --neuron 0 --range=-3:3 --steps 121
    python kafforge.py export-mu runs/glyphs_multikaf/model.kafw --layer 2 --sample 8 --seed 0
    python kafforge.py gen-data glyphs --classes 8 --n-per-class 400 data/glyphs.icrd
    python kafforge.py compare configs/glyphs_multikaf.cfg --variants relu,multikaf --seeds 5 --out runs/compare
    python kafforge.py kernels --sets 50

Exit codes: 0 success, 1 audit failure, 2 usage/config error, 3 numeric abort.
"""

import os
import sys

from dotenv import load_dotenv

# BLAS reads its thread count once, at import time
load_dotenv()
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.getenv("KAFFORGE_THREADS", "1"))

import argparse  # noqa: E402
import functools  # noqa: E402
import traceback  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

import gradcheck  # noqa: E402
from config import (  # noqa: E402
    parse_network_config,
    parse_run_config,
    runtime_threads,
    runtime_verbose,
    write_network_config,
)
from data import GENERATORS, save_icrd  # noqa: E402
from errors import ConfigError, DomainError, FormatError, KafForgeError, NumericError, ParseError  # noqa: E402
from kaf import MULTI_KERNELS, PLAIN_KERNELS, activation_table, default_kernels, make_dictionary  # noqa: E402
from kernels import KernelKind, KernelSpec, RQVariant, psd_report  # noqa: E402
from nn import ActivationKind, build_network, load_checkpoint, save_checkpoint  # noqa: E402
from train import iterations_to_reach, split_dataset, train  # noqa: E402

EXIT_OK = 0
EXIT_AUDIT = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

CHECKPOINT_NAME = "model.kafw"
NETWORK_CONFIG_NAME = "network.cfg"
CSV_FLOAT = "%.17g"

GENERATOR_DEFAULTS = {
    "blobs": {"n_per_class": 100, "C": 2, "dim": 2, "spread": 0.1, "seed": 0},
    "glyphs": {"n_per_class": 100, "C": 8, "H": 16, "W": 16, "noise": 0.02, "seed": 0, "max_shift": 2},
}


def exit_codes(command):
    """Map library exceptions onto the CLI exit codes"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (NumericError, FloatingPointError) as e:
            print(f"❌ Numeric abort: {e}")
            return EXIT_NUMERIC
        except (ConfigError, DomainError, FormatError, ParseError, OSError) as e:
            print(f"❌ {type(e).__name__}: {e}")
            return EXIT_USAGE
        except KafForgeError as e:
            print(f"❌ {e}")
            return EXIT_USAGE
        except Exception:
            traceback.print_exc()
            return EXIT_NUMERIC

    return wrapper


# ============================================================================
# SHARED HELPERS
# ============================================================================

def _write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=CSV_FLOAT)


def _run(cfg, dataset, out_dir, network_config=None, seed=None, verbose=False):
    """One training run; writes curves, report, checkpoint and network.cfg into out_dir"""
    network_config = network_config or cfg.network
    train_config = cfg.train if seed is None else replace(cfg.train, seed=seed)
    splits = split_dataset(dataset, cfg.data.n_val, cfg.data.n_test, cfg.data.split_seed)
    network = build_network(network_config.spec(dataset.sample_shape, dataset.class_count, train_config.seed))
    if verbose:
        print(f"🔄 {network_config.arch} / {ActivationKind(network_config.activation).value}: "
              f"{network.param_count()} parameters, {splits.train.n}/{splits.val.n}/{splits.test.n} samples")
        print(network.describe())

    report = train(network, splits, train_config, verbose=verbose, threads=runtime_threads())

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csvs(out_dir)
    (out_dir / "report.txt").write_text(report.summary() + "\n", encoding="utf-8")
    save_checkpoint(network, out_dir / CHECKPOINT_NAME)
    write_network_config(out_dir / NETWORK_CONFIG_NAME, network_config, dataset.sample_shape, dataset.class_count)
    return network, report


def load_trained(checkpoint, config=None):
    """Rebuild the network described by network.cfg (next to the checkpoint by default) and load it"""
    checkpoint = Path(checkpoint)
    config = Path(config) if config else checkpoint.with_name(NETWORK_CONFIG_NAME)
    network_config, input_shape, classes = parse_network_config(config)
    network = build_network(network_config.spec(tuple(input_shape), classes))
    return load_checkpoint(network, checkpoint)


def _kaf_layer(network, layer, multi=False):
    if not 0 <= layer < len(network.layers):
        raise DomainError(f"layer {layer} outside [0, {len(network.layers)})")
    target = network.layers[layer]
    kaf = getattr(target, "kaf", None)
    if kaf is None:
        raise DomainError(f"layer {layer} ({target!r}) is not a kernel activation")
    if multi and kaf.n_kernels < 2:
        raise DomainError(f"layer {layer} is a single-kernel KAF, not a multi-KAF")
    return target


def parse_range(text):
    lo, sep, hi = text.partition(":")
    try:
        lo, hi = float(lo), float(hi)
    except ValueError:
        sep = ""
    if not sep or not lo < hi:
        raise argparse.ArgumentTypeError(f"expected lo:hi with lo < hi, got '{text}'")
    return lo, hi


# ============================================================================
# COMMANDS
# ============================================================================

@exit_codes
def cmd_train(config_path):
    cfg = parse_run_config(config_path)
    verbose = runtime_verbose()
    dataset = cfg.data.load()
    _, report = _run(cfg, dataset, cfg.output_dir, verbose=verbose)
    print(report.summary())
    print(f"✅ Results written to {cfg.output_dir}")
    return EXIT_OK


@exit_codes
def cmd_gradcheck(seed=0):
    results = gradcheck.run_audit(seed)
    for r in results:
        mark = "✅" if r.passed else "❌"
        print(f"{mark} {r.name:<22} max rel err {r.error:.3e}  (threshold {r.threshold:.0e})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"❌ Gradient audit failed: {', '.join(failed)}")
        return EXIT_AUDIT
    print("✅ Gradient audit passed")
    return EXIT_OK


@exit_codes
def cmd_plot_activation(checkpoint, layer, neuron, lo, hi, steps, out=None, config=None):
    if steps < 1:
        raise DomainError(f"steps must be positive, got {steps}")
    if not lo < hi:
        raise DomainError(f"range must satisfy lo < hi, got {lo}:{hi}")
    network = load_trained(checkpoint, config)
    target = _kaf_layer(network, layer)
    if not 0 <= neuron < target.neurons:
        raise DomainError(f"neuron {neuron} outside [0, {target.neurons})")
    table = activation_table(target.kaf, neuron, np.linspace(lo, hi, steps))
    out = Path(out) if out else Path(checkpoint).with_name(f"activation_layer{layer}_neuron{neuron}.csv")
    _write_csv(table, out)
    print(f"✅ {steps} samples of layer {layer}, neuron {neuron} written to {out}")
    return EXIT_OK


@exit_codes
def cmd_export_mu(checkpoint, layer, n_sample, seed=0, out=None, config=None):
    network = load_trained(checkpoint, config)
    target = _kaf_layer(network, layer, multi=True)
    if not 1 <= n_sample <= target.neurons:
        raise DomainError(f"cannot sample {n_sample} of {target.neurons} neurons")
    neurons = np.sort(np.random.default_rng(seed).choice(target.neurons, size=n_sample, replace=False))
    table = pd.DataFrame(target.kaf.mu[neurons], columns=[f"mu{m + 1}" for m in range(target.kaf.n_kernels)])
    table.insert(0, "neuron", neurons)
    out = Path(out) if out else Path(checkpoint).with_name(f"mu_layer{layer}.csv")
    _write_csv(table, out)
    print(f"✅ Mixing weights of {n_sample} neurons of layer {layer} written to {out}")
    return EXIT_OK


@exit_codes
def cmd_gen_data(generator, args, out_path):
    if generator not in GENERATORS:
        raise DomainError(f"unknown generator '{generator}' (known: {', '.join(GENERATORS)})")
    unused = set(args) - set(GENERATOR_DEFAULTS[generator])
    if unused:
        raise DomainError(f"{generator} does not take {', '.join(sorted(unused))}")
    dataset = GENERATORS[generator](**{**GENERATOR_DEFAULTS[generator], **args})
    save_icrd(dataset, out_path)
    counts = ", ".join(f"{c}: {k}" for c, k in enumerate(dataset.histogram()))
    print(f"✅ {dataset.n} samples of shape {dataset.sample_shape} written to {out_path}")
    print(f"   class histogram: {counts}")
    return EXIT_OK


def _variant_config(network_config, variant):
    kind = ActivationKind(variant)
    kaf = network_config.kaf
    if kind is ActivationKind.KAF and len(kaf.kernels) != 1:
        kaf = replace(kaf, kernels=PLAIN_KERNELS)
    elif kind is ActivationKind.MULTIKAF and len(kaf.kernels) == 1:
        kaf = replace(kaf, kernels=MULTI_KERNELS)
    return replace(network_config, activation=kind, kaf=kaf)


def _population_std(values):
    return values.std(ddof=0)


@exit_codes
def cmd_compare(config_path, variants, seeds, out_dir=None):
    """
    Repeat a run for every activation variant and seed. The first variant is
    the reference: the others are timed on how many iterations they need to
    reach its mean final validation accuracy.
    """
    cfg = parse_run_config(config_path)
    variants = [ActivationKind(v) for v in variants]
    if not variants or seeds < 1:
        raise DomainError("compare needs at least one variant and one seed")
    out_dir = Path(out_dir) if out_dir else cfg.output_dir
    dataset = cfg.data.load()
    verbose = runtime_verbose()

    runs, losses, vals = [], [], []
    for variant in variants:
        network_config = _variant_config(cfg.network, variant)
        for k in range(seeds):
            seed = cfg.train.seed + k
            print(f"🔄 {variant.value}, seed {seed}")
            _, report = _run(cfg, dataset, out_dir / variant.value / f"seed_{seed}",
                             network_config=network_config, seed=seed, verbose=verbose)
            runs.append((variant.value, seed, report))
            losses.append(report.loss_frame().assign(variant=variant.value, seed=seed))
            vals.append(report.val_frame().assign(variant=variant.value, seed=seed))

    reference = variants[0].value
    target = float(np.mean([r.final_val_accuracy for v, _, r in runs if v == reference]))
    summary = pd.DataFrame([{
        "variant": v,
        "seed": seed,
        "param_count": r.param_count,
        "best_val_accuracy": r.best_val_accuracy,
        "final_val_accuracy": r.final_val_accuracy,
        "test_accuracy": r.test_accuracy,
        "stopped_iteration": r.stopped_iteration,
        "iterations_to_reach_reference": iterations_to_reach(r.val_curve, target),
    } for v, seed, r in runs])
    for column in ("test_accuracy", "iterations_to_reach_reference"):
        summary[column] = summary[column].astype("float64")

    aggregate = summary.groupby("variant", sort=False).agg(
        runs=("seed", "count"),
        param_count=("param_count", "first"),
        test_accuracy_mean=("test_accuracy", "mean"),
        test_accuracy_std=("test_accuracy", _population_std),
        best_val_accuracy_mean=("best_val_accuracy", "mean"),
        best_val_accuracy_std=("best_val_accuracy", _population_std),
        stopped_iteration_mean=("stopped_iteration", "mean"),
        iterations_to_reach_mean=("iterations_to_reach_reference", "mean"),
        iterations_to_reach_std=("iterations_to_reach_reference", _population_std),
        reached=("iterations_to_reach_reference", "count"),
    ).reset_index()
    aggregate.insert(1, "reference_accuracy", target)

    loss_curves = pd.concat(losses).groupby(["variant", "iteration"], sort=False).agg(
        loss_mean=("loss", "mean"), loss_std=("loss", _population_std)).reset_index()
    val_curves = pd.concat(vals).groupby(["variant", "iteration"], sort=False).agg(
        accuracy_mean=("accuracy", "mean"), accuracy_std=("accuracy", _population_std)).reset_index()
    curves = loss_curves.merge(val_curves, on=["variant", "iteration"], how="outer")
    order = {v.value: i for i, v in enumerate(variants)}
    curves = curves.sort_values(["variant", "iteration"], key=lambda col: col.map(order) if col.name == "variant" else col)

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(summary, out_dir / "summary.csv")
    _write_csv(aggregate, out_dir / "aggregate.csv")
    _write_csv(curves, out_dir / "curves.csv")
    print(aggregate.to_string(index=False))
    print(f"✅ Comparison written to {out_dir}")
    return EXIT_OK


def psd_kernels():
    """The kernels checked by `kernels`: the default mixture plus the standard-minus RQ"""
    dictionary = make_dictionary()
    return default_kernels(dictionary) + (
        KernelSpec(KernelKind.RATIONAL_QUADRATIC, rq_variant=RQVariant.STANDARD_MINUS),
    )


@exit_codes
def cmd_kernels(sets=50, seed=0, points=20):
    if sets < 0 or points < 1:
        raise DomainError("need a non-negative number of sets of at least one point")
    rng = np.random.default_rng(seed)
    point_sets = [make_dictionary().points] + [rng.uniform(-3.0, 3.0, size=points) for _ in range(sets)]
    report = pd.DataFrame(psd_report(psd_kernels(), point_sets))
    print(report.to_string(index=False))
    if (report["passed"] == False).any():  # noqa: E712
        print("❌ A kernel expected to be PSD produced a negative Gram eigenvalue")
        return EXIT_AUDIT
    print(f"✅ PSD kernels hold over {len(point_sets)} point sets")
    return EXIT_OK


# ============================================================================
# ENTRY POINT
# ============================================================================

def build_parser():
    parser = argparse.ArgumentParser(prog="kafforge", description="Multi-kernel activation function networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("config")

    p = sub.add_parser("gradcheck", help="finite-difference audit of every backward pass")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plot-act", help="sample one neuron's activation to CSV")
    p.add_argument("checkpoint")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--neuron", type=int, required=True)
    p.add_argument("--range", type=parse_range, default=(-3.0, 3.0), help="lo:hi (use --range=-3:3)")
    p.add_argument("--steps", type=int, default=121)
    p.add_argument("--config", help="network.cfg to rebuild from (default: next to the checkpoint)")
    p.add_argument("--out")

    p = sub.add_parser("export-mu", help="export kernel mixing weights of sampled neurons to CSV")
    p.add_argument("checkpoint")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--sample", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out")

    p = sub.add_parser("gen-data", help="write a synthetic ICRD dataset")
    p.add_argument("generator", choices=sorted(GENERATORS))
    p.add_argument("--n-per-class", dest="n_per_class", type=int)
    p.add_argument("--classes", dest="C", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--spread", type=float)
    p.add_argument("--height", dest="H", type=int)
    p.add_argument("--width", dest="W", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--max-shift", dest="max_shift", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("out")

    p = sub.add_parser("compare", help="repeat a run across activation variants and seeds")
    p.add_argument("config")
    p.add_argument("--variants", default="relu,multikaf")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out")

    p = sub.add_parser("kernels", help="report minimum Gram eigenvalues of the base kernels")
    p.add_argument("--sets", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seed)
    if args.command == "plot-act":
        lo, hi = args.range
        return cmd_plot_activation(args.checkpoint, args.layer, args.neuron, lo, hi, args.steps,
                                   out=args.out, config=args.config)
    if args.command == "export-mu":
        return cmd_export_mu(args.checkpoint, args.layer, args.sample, args.seed,
                             out=args.out, config=args.config)
    if args.command == "gen-data":
        names = ("n_per_class", "C", "dim", "spread", "H", "W", "noise", "max_shift", "seed")
        gen_args = {k: getattr(args, k) for k in names if getattr(args, k) is not None}
        return cmd_gen_data(args.generator, gen_args, args.out)
    if args.command == "compare":
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        unknown = [v for v in variants if v not in {k.value for k in ActivationKind}]
        if unknown:
            print(f"❌ unknown variant(s): {', '.join(unknown)}")
            return EXIT_USAGE
        return cmd_compare(args.config, variants, args.seeds, args.out)
    return cmd_kernels(args.sets, args.seed)


if __name__ == "__main__":
    sys.exit(main())
