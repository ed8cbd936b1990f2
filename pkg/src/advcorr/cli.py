"""Command-line harness for reproducible experiments.

Subcommands: pretrain, attack, finetune, baseline-retrain, eval. A JSON
config file supplies the dataset, architecture and stage parameters;
command-line flags override selected fields. Every artifact written embeds
the fully resolved configuration, and each output directory gets a
resolved_config.json audit copy.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attacks import (
    ATTACK_PRESETS,
    AttackConfig,
    attack_accuracy,
    generate_adv_dataset,
    load_adv_dataset,
    save_adv_dataset,
)
from .checkpoint import load_checkpoint, model_checksum, save_checkpoint
from .cuts import total_violation
from .datasets import SyntheticConfig, load_idx, make_synthetic
from .errors import ConfigError, DataError, NumericalError
from .finetune import FinetuneConfig, pool_to_json, run_finetune
from .network import LabeledDataset, Network, loss
from .training import TrainConfig, evaluate_accuracy, pretrain, retrain_with_adversarial

_TOP_KEYS = {"seed", "out", "threads", "dataset", "architecture", "train",
             "attack", "attack_size", "finetune"}
_DATASET_KEYS = {
    "mnist": {"kind", "train_images", "train_labels", "test_images",
              "test_labels", "train_limit"},
    "synthetic": {"kind", "generator", "n_per_class", "noise_std", "input_dim",
                  "num_classes", "test_fraction"},
}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "seed", "optimizer"}
_ATTACK_KEYS = {"preset", "kind", "epsilon", "step_size", "iterations", "seed"}
_FINETUNE_KEYS = {"max_iterations", "omega", "delta", "epsilon_bar", "xi",
                  "alpha_grid", "block", "seed", "target_violation", "qp_tol",
                  "qp_max_sweeps", "max_cuts"}
_BLOCK_KEYS = {"p", "T"}


def _reject_unknown(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")


def load_run_config(path, overrides: dict) -> dict:
    """Parse, validate and resolve the run configuration."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "top level")

    cfg = dict(raw)
    for key in ("seed", "out", "threads"):
        if overrides.get(key) is not None:
            cfg[key] = overrides[key]
    cfg.setdefault("seed", 0)
    cfg.setdefault("threads", 1)
    if int(cfg["threads"]) < 1:
        raise ConfigError(f"threads must be >= 1, got {cfg['threads']}")
    cfg["seed"] = int(cfg["seed"])
    cfg["threads"] = int(cfg["threads"])

    dataset = cfg.get("dataset")
    if not isinstance(dataset, dict) or "kind" not in dataset:
        raise ConfigError("config needs a dataset section with a 'kind'")
    kind = dataset["kind"]
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    _reject_unknown(dataset, _DATASET_KEYS[kind], f"dataset ({kind})")
    if kind == "mnist":
        for field in ("train_images", "train_labels", "test_images", "test_labels"):
            if field not in dataset:
                raise ConfigError(f"mnist dataset config needs {field!r}")

    arch = cfg.get("architecture") or {}
    _reject_unknown(arch, {"hidden"}, "architecture")
    hidden = arch.get("hidden", [32])
    if not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError(f"architecture.hidden must be positive integers, got {hidden}")
    cfg["architecture"] = {"hidden": list(hidden)}

    train = dict(cfg.get("train") or {})
    _reject_unknown(train, _TRAIN_KEYS, "train")
    train.setdefault("seed", cfg["seed"])
    cfg["train"] = asdict(TrainConfig(**train))

    attack = dict(cfg.get("attack") or {"preset": "mnist_pgd"})
    _reject_unknown(attack, _ATTACK_KEYS, "attack")
    if "preset" in attack:
        preset = attack.pop("preset")
        if preset not in ATTACK_PRESETS:
            raise ConfigError(
                f"unknown attack preset {preset!r} (have {sorted(ATTACK_PRESETS)})"
            )
        base = asdict(ATTACK_PRESETS[preset])
        base.update(attack)
        attack = base
    attack.setdefault("seed", cfg["seed"])
    cfg["attack"] = asdict(AttackConfig(**attack))

    if "attack_size" in cfg and (not isinstance(cfg["attack_size"], int) or cfg["attack_size"] < 1):
        raise ConfigError(f"attack_size must be a positive integer, got {cfg['attack_size']}")

    finetune = dict(cfg.get("finetune") or {})
    _reject_unknown(finetune, _FINETUNE_KEYS, "finetune")
    if isinstance(finetune.get("block"), dict):
        _reject_unknown(finetune["block"], _BLOCK_KEYS, "finetune.block")
    for key in ("omega", "delta", "epsilon_bar", "xi"):
        if overrides.get(key) is not None:
            finetune[key] = overrides[key]
    if overrides.get("iters") is not None:
        finetune["max_iterations"] = overrides["iters"]
    if overrides.get("block_p") is not None or overrides.get("block_T") is not None:
        block = dict(finetune.get("block") or {})
        if overrides.get("block_p") is not None:
            block["p"] = overrides["block_p"]
        if overrides.get("block_T") is not None:
            block["T"] = overrides["block_T"]
        finetune["block"] = block
    finetune.setdefault("seed", cfg["seed"])
    ft = FinetuneConfig(**finetune)
    cfg["finetune"] = asdict(ft)

    return cfg


def _dataset_checksum(data: LabeledDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.inputs).astype("<f8").tobytes())
    h.update(np.ascontiguousarray(data.labels).astype("<i8").tobytes())
    return h.hexdigest()


def load_datasets(cfg: dict):
    """Returns (train, test) datasets for the resolved config."""
    ds = cfg["dataset"]
    if ds["kind"] == "mnist":
        train = load_idx(ds["train_images"], ds["train_labels"])
        test = load_idx(ds["test_images"], ds["test_labels"])
        limit = ds.get("train_limit")
        if limit:
            train = train.subset(np.arange(min(int(limit), len(train))))
        return train, test
    syn = SyntheticConfig(
        kind=ds.get("generator", "gaussian_blobs"),
        n_per_class=ds.get("n_per_class", 100),
        noise_std=ds.get("noise_std", 0.05),
        seed=cfg["seed"],
        input_dim=ds.get("input_dim", 2),
        num_classes=ds.get("num_classes", 2),
    )
    full = make_synthetic(syn)
    frac = float(ds.get("test_fraction", 0.25))
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"test_fraction must be in (0,1), got {frac}")
    rng = np.random.default_rng(cfg["seed"] + 1)
    order = rng.permutation(len(full))
    n_test = max(1, int(frac * len(full)))
    return full.subset(order[n_test:]), full.subset(order[:n_test])


def _layer_dims(cfg: dict, train: LabeledDataset):
    num_classes = int(train.labels.max()) + 1
    if cfg["dataset"]["kind"] == "synthetic":
        num_classes = cfg["dataset"].get("num_classes", 2)
    return (train.input_dim, *cfg["architecture"]["hidden"], num_classes)


def _eval_configs(cfg: dict):
    attack = AttackConfig(**cfg["attack"])
    fgsm_cfg = AttackConfig(kind="fgsm", epsilon=attack.epsilon, seed=attack.seed)
    if attack.kind == "pgd":
        pgd_cfg = attack
    else:
        pgd_cfg = AttackConfig(kind="pgd", epsilon=attack.epsilon, step_size=attack.epsilon / 10,
                               iterations=50, seed=attack.seed)
    return fgsm_cfg, pgd_cfg


def evaluation_battery(net: Network, train, test, cfg: dict) -> dict:
    fgsm_cfg, pgd_cfg = _eval_configs(cfg)
    return {
        "loss": loss(net, train),
        "clean_acc": evaluate_accuracy(net, test),
        "fgsm_acc": attack_accuracy(net, test, fgsm_cfg),
        "pgd_acc": attack_accuracy(net, test, pgd_cfg),
    }


def _out_dir(cfg: dict, args) -> Path:
    out = getattr(args, "out", None) or cfg.get("out")
    if not out:
        raise ConfigError("no output directory: set --out or config 'out'")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _embed(cfg: dict) -> dict:
    # the output location is not part of the experiment identity; leaving it
    # out keeps artifacts byte-identical across reruns into different dirs
    return {k: v for k, v in cfg.items() if k != "out"}


def _write_json(path: Path, doc: dict):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def _audit(out: Path, cfg: dict):
    _write_json(out / "resolved_config.json", cfg)


def _print_metrics(title: str, metrics: dict, reference: dict | None = None):
    print(title)
    keys = ["loss", "clean_acc", "fgsm_acc", "pgd_acc"]
    names = {"loss": "train loss", "clean_acc": "clean acc",
             "fgsm_acc": "FGSM acc", "pgd_acc": "PGD acc"}
    for key in keys:
        val = metrics[key]
        scale = 1.0 if key == "loss" else 100.0
        unit = "" if key == "loss" else "%"
        line = f"  {names[key]:<10} {val * scale:8.4f}{unit}"
        if reference is not None:
            delta = (val - reference[key]) * scale
            line += f" ({delta:+.4f})"
        print(line)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, vars(args))
    out = _out_dir(cfg, args)
    train, test = load_datasets(cfg)
    dims = _layer_dims(cfg, train)
    net = pretrain(dims, train, TrainConfig(**cfg["train"]))
    meta = {
        "seed": cfg["seed"],
        "train_config": cfg["train"],
        "dataset_checksum": _dataset_checksum(train),
        "run_config": _embed(cfg),
    }
    ckpt_path = out / "checkpoint.json"
    save_checkpoint(net, meta, ckpt_path)
    metrics = evaluation_battery(net, train, test, cfg)
    _write_json(out / "metrics.json", {"metrics": metrics, "config": _embed(cfg)})
    _audit(out, cfg)
    _print_metrics("pretrained model", metrics)
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_attack(args) -> int:
    cfg = load_run_config(args.config, vars(args))
    if args.size is not None:
        cfg["attack_size"] = int(args.size)
    if "attack_size" not in cfg:
        raise ConfigError("attack size not set (config attack_size or --size)")
    out = _out_dir(cfg, args)
    net = load_checkpoint(args.checkpoint)
    train, _ = load_datasets(cfg)
    attack_cfg = AttackConfig(**cfg["attack"])
    examples = generate_adv_dataset(net, train, cfg["attack_size"], attack_cfg)
    adv_path = out / "adversarial.json"
    save_adv_dataset(adv_path, examples, attack_cfg, model_checksum(net),
                     extra={"config": _embed(cfg)})
    _audit(out, cfg)
    print(f"wrote {len(examples)} adversarial examples to {adv_path}")
    return 0


def _load_bound_adv(adv_path, net):
    examples, attack_cfg, checksum = load_adv_dataset(adv_path)
    if not examples:
        raise DataError(f"{adv_path}: adversarial set is empty")
    actual = model_checksum(net)
    if checksum != actual:
        raise DataError(
            f"{adv_path} was generated for a different model "
            f"(stored {checksum[:12]}…, checkpoint {actual[:12]}…); regenerate it"
        )
    return examples, attack_cfg


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config, vars(args))
    out = _out_dir(cfg, args)
    net = load_checkpoint(args.checkpoint)
    examples, _ = _load_bound_adv(args.adv, net)
    train, test = load_datasets(cfg)

    before = evaluation_battery(net, train, test, cfg)
    before["violation"] = total_violation(net, examples)

    ft_cfg = FinetuneConfig(**cfg["finetune"])
    tuned, history, pool = run_finetune(net, examples, train, ft_cfg)

    after = evaluation_battery(tuned, train, test, cfg)
    after["violation"] = total_violation(tuned, examples)

    save_checkpoint(tuned, {"seed": cfg["seed"], "run_config": _embed(cfg),
                            "finetuned_from": model_checksum(net)},
                    out / "finetuned.json")
    history.to_csv(out / "history.csv")
    pool_to_json(pool, out / "pool.json", include_params=args.dump_params)
    _write_json(out / "finetune_metrics.json",
                {"before": before, "after": after, "config": _embed(cfg)})
    _audit(out, cfg)

    _print_metrics("before fine-tuning", before)
    print(f"  violation  {before['violation']:10.6f}")
    _print_metrics("after fine-tuning", after, reference=before)
    print(f"  violation  {after['violation']:10.6f} "
          f"({after['violation'] - before['violation']:+.6f})")
    print(f"iterations: {len(history)}; pool size: {len(pool)}; "
          f"outputs in {out}")
    return 0


def cmd_baseline_retrain(args) -> int:
    cfg = load_run_config(args.config, vars(args))
    out = _out_dir(cfg, args)
    net = load_checkpoint(args.checkpoint)
    examples, _ = _load_bound_adv(args.adv, net)
    train, test = load_datasets(cfg)

    before = evaluation_battery(net, train, test, cfg)
    dims = _layer_dims(cfg, train)
    retrained = retrain_with_adversarial(dims, train, examples, TrainConfig(**cfg["train"]))
    after = evaluation_battery(retrained, train, test, cfg)

    save_checkpoint(retrained, {"seed": cfg["seed"], "run_config": _embed(cfg),
                                "baseline_of": model_checksum(net)},
                    out / "baseline_checkpoint.json")
    _write_json(out / "baseline_metrics.json",
                {"pretrained": before, "retrained": after, "config": _embed(cfg)})
    _audit(out, cfg)

    _print_metrics("pretrained model", before)
    _print_metrics("retrained with adversarial data appended", after, reference=before)
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, vars(args))
    out = _out_dir(cfg, args)
    net = load_checkpoint(args.checkpoint)
    train, test = load_datasets(cfg)
    metrics = evaluation_battery(net, train, test, cfg)
    _write_json(out / "eval_metrics.json", {"metrics": metrics, "config": _embed(cfg)})
    _audit(out, cfg)
    _print_metrics(f"evaluation of {args.checkpoint}", metrics)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advcorr",
        description="Cutting-plane adversary correction for dense classifiers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (evaluation is vectorized; recorded in the audit config)")

    p = sub.add_parser("pretrain", help="train the baseline model")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("attack", help="generate the adversarial dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, default=None,
                   help="number of adversarial examples (multiple of the class count)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("finetune", help="run the cutting-plane correction loop")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adv", required=True, help="adversarial dataset JSON")
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--epsilon-bar", dest="epsilon_bar", type=float, default=None)
    p.add_argument("--xi", type=float, default=None)
    p.add_argument("--block-p", dest="block_p", type=float, default=None)
    p.add_argument("--block-T", dest="block_T", type=int, default=None)
    p.add_argument("--dump-params", action="store_true",
                   help="include candidate parameters in pool.json")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("baseline-retrain",
                       help="retrain with adversarial data appended to the training set")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adv", required=True)
    p.set_defaults(func=cmd_baseline_retrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
