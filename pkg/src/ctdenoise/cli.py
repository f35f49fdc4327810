"""Config-driven command line: convert, corrupt, train, evaluate,
verify-causal, grid.

Exit codes: 0 success, 2 validation failure, 3 training divergence,
4 partial grid failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np
import torch
import yaml

from . import scm as scm_mod
from .config import ExperimentConfig, load_experiment_config, parse_experiment_config
from .convert import convert_vendor_dataset
from .data import LabeledDataset, SplitSpec, load_dataset, make_synthetic_blobs, save_dataset, split
from .errors import CtdenoiseError, DivergenceError, ValidationError
from .evaluate import accuracy, compare_transition, plot_report
from .noise import (
    CorruptionRecord,
    apply_noise,
    averaged_true_transition,
    load_corruption_record,
    perturb_instances,
    save_corruption_record,
)
from .models import load_checkpoint, make_classifier, save_checkpoint
from .semi import SemiHeads, infer_semi, semi_fit
from .training import (
    RunReport,
    TrainConfig,
    fit,
    fit_ce_baseline,
    init_twin_state,
    load_twin_state,
    predict_labels,
    save_twin_state,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_GRID_PARTIAL = 4


def _load_base_dataset(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Materialize the (train, test) pair described by the config."""
    if config.synthetic is not None:
        syn = config.synthetic
        ds = make_synthetic_blobs(syn.k, syn.n_per_class, syn.dim, syn.separation, syn.seed)
        sp = config.split
        return split(ds, SplitSpec(sp.train_fraction, sp.seed, sp.stratified))
    train_set = load_dataset(config.manifest_path)
    if config.test_manifest_path is not None:
        return train_set, load_dataset(config.test_manifest_path)
    sp = config.split
    return split(train_set, SplitSpec(sp.train_fraction, sp.seed, sp.stratified))


def _perturb_seed(seed: int, gamma: float) -> int:
    ss = np.random.SeedSequence([seed, int(round(gamma * 1e6))])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & 0x7FFF_FFFF_FFFF_FFFF


def prepare_run_data(
    config: ExperimentConfig,
) -> tuple[LabeledDataset, LabeledDataset, CorruptionRecord | None]:
    """Load/generate, corrupt, and perturb the data for one run."""
    train_set, test_set = _load_base_dataset(config)
    record = None
    if config.noise is not None:
        train_set, record = apply_noise(train_set, config.noise)
    elif train_set.noisy_labels is None:
        raise ValidationError("train dataset has no noisy labels and no noise block given")
    if config.perturb_gamma > 0:
        seed_base = config.noise.seed if config.noise is not None else 0
        perturbed = perturb_instances(
            train_set.features, config.perturb_gamma, _perturb_seed(seed_base, config.perturb_gamma)
        )
        train_set = LabeledDataset(
            features=perturbed,
            manifest=train_set.manifest,
            clean_labels=train_set.clean_labels,
            noisy_labels=train_set.noisy_labels,
            provenance=dict(train_set.provenance, perturb_gamma=config.perturb_gamma),
        )
    return train_set, test_set, record


def _oracle_semi_split(
    train_set: LabeledDataset, record: CorruptionRecord, fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Clean/noisy split for the semi-supervised mode: the clean side is drawn
    from instances whose label survived corruption."""
    n = len(train_set)
    rng = np.random.default_rng(seed)
    unflipped = np.flatnonzero(~record.flip_mask)
    rng.shuffle(unflipped)
    n_clean = min(int(round(fraction * n)), unflipped.size)
    clean_idx = np.sort(unflipped[:n_clean])
    mask = np.zeros(n, dtype=bool)
    mask[clean_idx] = True
    noisy_idx = np.flatnonzero(~mask)

    def subset(indices, suffix):
        manifest = replace(
            train_set.manifest,
            name=f"{train_set.manifest.name}-{suffix}",
            num_examples=int(indices.size),
        )
        return LabeledDataset(
            features=train_set.features[indices],
            manifest=manifest,
            clean_labels=None
            if train_set.clean_labels is None
            else train_set.clean_labels[indices],
            noisy_labels=None
            if train_set.noisy_labels is None
            else train_set.noisy_labels[indices],
            provenance=dict(train_set.provenance, semi_subset=suffix),
        )

    return subset(clean_idx, "clean"), subset(noisy_idx, "noisy")


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Execute one training run per the config mode and write its artifacts."""
    os.makedirs(config.out_dir, exist_ok=True)
    train_set, test_set, record = prepare_run_data(config)
    if record is not None:
        save_corruption_record(record, config.out_dir, "corruption")

    if config.mode == "ce_baseline":
        model, report = fit_ce_baseline(train_set, test_set, config.train)
        save_checkpoint(os.path.join(config.out_dir, "checkpoint.npz"), {"classifier": model})
    elif config.mode == "semi":
        if record is None:
            raise ValidationError("semi mode needs a noise block (oracle split uses the record)")
        clean_set, noisy_set = _oracle_semi_split(
            train_set, record, config.semi_clean_fraction, config.semi.seed
        )
        heads, report = semi_fit(clean_set, noisy_set, test_set, config.semi)
        save_checkpoint(os.path.join(config.out_dir, "checkpoint.npz"), {"semi_heads": heads})
    else:
        state, report = fit(train_set, test_set, config.train)
        save_twin_state(state, os.path.join(config.out_dir, "checkpoint.npz"))

    report.config_snapshot = dict(report.config_snapshot, experiment_mode=config.mode)
    report.to_json(os.path.join(config.out_dir, "report.json"))
    plot_report(report, config.out_dir)

    if record is not None and report.estimated_transition is not None:
        truth, undefined = averaged_true_transition(record, train_set.clean_labels)
        if not undefined:
            comparison = compare_transition(report.estimated_transition, truth)
            with open(os.path.join(config.out_dir, "transition_comparison.json"), "w") as fh:
                json.dump(
                    {
                        "frobenius_error": comparison.frobenius_error,
                        "per_row_l1": comparison.per_row_l1.tolist(),
                    },
                    fh,
                    indent=2,
                )
                fh.write("\n")
    return report


def cmd_convert(args) -> int:
    train_path, test_path = convert_vendor_dataset(
        args.format,
        args.input,
        args.output,
        name=args.name,
        train_limit=args.train_limit,
        test_limit=args.test_limit,
    )
    print(f"wrote {train_path}")
    print(f"wrote {test_path}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    config = _load_config(args)
    if config.noise is None:
        raise ValidationError("corrupt requires a noise block in the config")
    os.makedirs(config.out_dir, exist_ok=True)
    train_set, test_set = _load_base_dataset(config)
    corrupted, record = apply_noise(train_set, config.noise)
    train_manifest = save_dataset(corrupted, config.out_dir, name="corrupted-train")
    test_manifest = save_dataset(test_set, config.out_dir, name="clean-test")
    record_path = save_corruption_record(record, config.out_dir, "corruption")
    print(f"wrote {train_manifest}")
    print(f"wrote {test_manifest}")
    print(f"wrote {record_path} (realized_rate={record.realized_rate:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    report = run_experiment(config)
    print(
        f"mode={config.mode} final_test_accuracy={report.final_test_accuracy:.4f} "
        f"selected_twin={report.selected_twin} out={config.out_dir}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = RunReport.from_json(os.path.join(args.run_dir, "report.json"))
    test_set = load_dataset(args.manifest)
    snapshot = report.config_snapshot
    mode = args.mode or snapshot.get("experiment_mode", "full")
    result = {"run_dir": args.run_dir, "manifest": args.manifest}

    x = torch.from_numpy(test_set.features.copy())
    checkpoint_path = os.path.join(args.run_dir, "checkpoint.npz")
    if mode == "ce_baseline":
        model = make_classifier(
            test_set.manifest.feature_shape,
            test_set.num_classes,
            arch=snapshot.get("classifier_arch", "auto"),
            width=int(snapshot.get("classifier_width", 16)),
        )
        load_checkpoint(checkpoint_path, {"classifier": model})
        with torch.no_grad():
            preds = torch.cat(
                [model(x[s : s + 1024]).argmax(dim=1) for s in range(0, x.shape[0], 1024)]
            )
    elif mode == "semi":
        heads = SemiHeads(
            test_set.manifest.feature_shape,
            test_set.num_classes,
            width=int(snapshot.get("trunk_width", 16)),
        )
        load_checkpoint(checkpoint_path, {"semi_heads": heads})
        preds = torch.cat(
            [infer_semi(heads, x[s : s + 1024]) for s in range(0, x.shape[0], 1024)]
        )
    else:
        train_cfg = TrainConfig.from_json_dict(snapshot)
        state = init_twin_state(test_set.manifest.feature_shape, test_set.num_classes, train_cfg)
        load_twin_state(state, checkpoint_path)
        twin = state.twins[report.selected_twin]
        preds = predict_labels(twin.g1, twin.f, x)

    result["accuracy"] = accuracy(preds.numpy(), test_set.clean_labels)
    record_path = os.path.join(args.run_dir, "corruption.record.json")
    if report.estimated_transition is not None and os.path.isfile(record_path):
        record = load_corruption_record(record_path)
        truth, undefined = averaged_true_transition(record, record.clean_labels)
        if not undefined:
            comparison = compare_transition(report.estimated_transition, truth)
            result["transition_frobenius_error"] = comparison.frobenius_error

    out_path = os.path.join(args.run_dir, "evaluation.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_verify_causal(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(","))
    ok = True

    if args.scm is not None:
        model = scm_mod.scm_from_json(args.scm)
        r1 = scm_mod.verify_theorem1(model, args.tol)
        r2 = scm_mod.verify_theorem2(model, args.tol)
        print(f"scm_file theorem1 ok={r1.ok} max_error={r1.max_error:.3e}")
        print(f"scm_file theorem2 ok={r2.ok} max_error={r2.max_error:.3e}")
        return EXIT_OK if (r1.ok and r2.ok) else EXIT_VALIDATION

    max1 = 0.0
    max2 = 0.0
    for i in range(args.num_scms):
        model = scm_mod.random_scm(sizes, args.seed + i)
        r1 = scm_mod.verify_theorem1(model, args.tol)
        r2 = scm_mod.verify_theorem2(model, args.tol)
        max1 = max(max1, r1.max_error)
        max2 = max(max2, r2.max_error)
        ok = ok and r1.ok and r2.ok
    print(f"conforming: n={args.num_scms} theorem1 max_error={max1:.3e} theorem2 max_error={max2:.3e}")

    n_adv = min(args.num_scms, 10)
    adv1 = [
        scm_mod.verify_theorem1(scm_mod.random_theorem1_violator(sizes, args.seed + i), args.tol)
        for i in range(n_adv)
    ]
    adv2 = [
        scm_mod.verify_theorem2(scm_mod.random_theorem2_violator(sizes, args.seed + i), args.tol)
        for i in range(n_adv)
    ]
    rejected1 = all((not r.ok) and r.max_error > 0.01 for r in adv1)
    rejected2 = all((not r.ok) and r.max_error > 0.01 for r in adv2)
    print(
        f"adversarial: n={n_adv} theorem1 min_violation={min(r.max_error for r in adv1):.3e} "
        f"theorem2 min_violation={min(r.max_error for r in adv2):.3e}"
    )
    ok = ok and rejected1 and rejected2
    print(f"verdict: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_grid(args) -> int:
    gammas = [float(g) for g in args.gammas.split(",")]
    rates = [float(r) for r in args.rates.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    if not gammas or not rates or not seeds:
        raise ValidationError("grid axes must be nonempty")

    with open(args.config, "r", encoding="utf-8") as fh:
        base_doc = yaml.safe_load(fh)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    out_root = args.out or parse_experiment_config(dict(base_doc), base_dir).out_dir
    os.makedirs(out_root, exist_ok=True)

    rows = []
    any_failed = False
    for gamma in gammas:
        for rate in rates:
            for seed in seeds:
                doc = json.loads(json.dumps(base_doc))  # deep copy
                doc["perturb_gamma"] = gamma
                doc.setdefault("noise", {})["rate"] = rate
                doc["noise"]["seed"] = int(doc["noise"].get("seed", 0)) + seed
                doc.setdefault("train", {})["seed"] = seed
                cell_dir = os.path.join(out_root, f"gamma{gamma}_rate{rate}_seed{seed}")
                doc["out_dir"] = cell_dir
                row = {"gamma": gamma, "rate": rate, "seed": seed}
                try:
                    cell_config = parse_experiment_config(doc, base_dir=base_dir)
                    report = run_experiment(cell_config)
                    row["final_test_accuracy"] = report.final_test_accuracy
                    row["status"] = "ok"
                except CtdenoiseError as exc:
                    any_failed = True
                    row["final_test_accuracy"] = float("nan")
                    row["status"] = f"error: {exc}"
                rows.append(row)
                print(
                    f"cell gamma={gamma} rate={rate} seed={seed} -> "
                    f"{row['status']} acc={row['final_test_accuracy']}"
                )

    csv_path = os.path.join(out_root, "grid.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["gamma", "rate", "seed", "final_test_accuracy", "status"]
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {csv_path}")
    return EXIT_GRID_PARTIAL if any_failed else EXIT_OK


def _load_config(args) -> ExperimentConfig:
    with open(args.config, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValidationError("config root must be a mapping")
    if getattr(args, "mode", None):
        doc["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        doc.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "out", None):
        doc["out_dir"] = args.out
    return parse_experiment_config(doc, base_dir=os.path.dirname(os.path.abspath(args.config)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctdenoise", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert a vendor dataset into the portable format")
    p.add_argument("--format", required=True, choices=["fashion-mnist", "cifar10"])
    p.add_argument("--input", required=True, help="directory with the vendor files")
    p.add_argument("--output", required=True)
    p.add_argument("--name", default=None)
    p.add_argument("--train-limit", type=int, default=None)
    p.add_argument("--test-limit", type=int, default=None)
    p.set_defaults(func=cmd_convert)

    for cmd, func, extra_mode in (
        ("corrupt", cmd_corrupt, False),
        ("train", cmd_train, True),
    ):
        p = sub.add_parser(cmd)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if extra_mode:
            p.add_argument("--mode", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="score a finished run on a clean manifest")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-causal", help="exact checks of the two identifiability theorems")
    p.add_argument("--num-scms", type=int, default=100)
    p.add_argument("--sizes", default="3,3,3,3,3")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scm", default=None, help="verify one serialized SCM instead")
    p.set_defaults(func=cmd_verify_causal)

    p = sub.add_parser("grid", help="sweep perturbation intensities and noise rates")
    p.add_argument("--config", required=True)
    p.add_argument("--gammas", required=True)
    p.add_argument("--rates", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CtdenoiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
