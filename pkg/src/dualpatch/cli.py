"""``dualpatch`` command line: reproducible runs driven by a YAML config.

Every command accepts ``--config FILE``; explicit flags override file values.
The fully resolved config is printed and written next to the outputs as
``config_resolved.yaml``. Exit codes: 0 ok, 2 configuration error, 3 I/O
error, 4 numeric or training failure.
"""
import dataclasses
import functools
import hashlib
import json
import os
import sys
import typing
from dataclasses import dataclass, field

import click
import numpy as np
import yaml

from .compositor import EotConfig
from .errors import (FormatError, ParameterDomainError, ProtocolError, RegistrationError, TrainingDivergenceError,
                     TrainingFailure, UndefinedASRError)
from .losses import LossWeights

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ParameterDomainError):
    pass


@dataclass
class DataSettings:
    root: str = "data"
    n_images: int = 800
    image_size: int = 96
    min_ir_contrast: float = 0.12
    n_boards: int = 8


@dataclass
class AdapterSettings:
    path: str = "runs/adapter.npz"
    n_pairs: int = 10000
    n_heldout: int = 2000
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 256


@dataclass
class DetectorSettings:
    path: str = "runs/detector.pt"
    variant_seed: int = 0
    width: int = 16
    epochs: int = 30
    learning_rate: float = 2e-3
    pos_weight: float = 4.0
    min_images: int = 500
    min_recall: float = 0.9


@dataclass
class AttackSettings:
    patch_path: str = "runs/patch.png"
    patch_size: int = 256
    iterations: int = 1000
    batch_size: int = 8
    learning_rate: float = 0.03
    optimizer: str = "adam"
    weights: LossWeights = field(default_factory=lambda: LossWeights(2.5, 1.0, "mean"))
    eot: EotConfig = field(default_factory=EotConfig)
    coverage_cap: float = 0.3
    use_adapter: bool = True
    use_augmentation: bool = True
    init_mode: str = "random"
    aug_prob: float = 0.5
    dilation_factors: tuple = (2, 4, 8)
    iou_min: float = 0.1


@dataclass
class EvalSettings:
    split: str = "val"
    limit: typing.Optional[int] = None
    threshold: float = 0.5
    thresholds: tuple = (0.3, 0.4, 0.5, 0.6, 0.7)
    matched: bool = True
    ir_source: str = "physics"
    multiscale: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    data: DataSettings = field(default_factory=DataSettings)
    adapter: AdapterSettings = field(default_factory=AdapterSettings)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    attack: AttackSettings = field(default_factory=AttackSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def attack_config(self):
        from .attack import AttackConfig

        kw = {f.name: getattr(self.attack, f.name) for f in dataclasses.fields(self.attack) if f.name != "patch_path"}
        return AttackConfig(seed=self.seed, **kw)

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, mapping, where):
    """Instantiate dataclass ``cls`` from ``mapping``; unknown keys are errors."""
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(mapping).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kw = {}
    for key, value in mapping.items():
        hint = hints[key]
        sub = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(hint):
            kw[key] = _build(hint, value, sub)
        elif hint is tuple:
            kw[key] = tuple(value) if isinstance(value, (list, tuple)) else value
        else:
            kw[key] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_run_config(path=None, overrides=None):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(raw, dotted, value)
    return _build(RunConfig, raw, "")


def echo_config(cfg, out_dir):
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=True)
    click.echo("# resolved config\n" + text.rstrip())
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.yaml"), "w") as fh:
        fh.write(text)


def file_checksum(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _exit_code(exc):
    if isinstance(exc, (TrainingDivergenceError, TrainingFailure, UndefinedASRError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, ProtocolError, RegistrationError)):
        return EXIT_IO
    if isinstance(exc, (ParameterDomainError, ValueError, KeyError, TypeError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    return None


def handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except Exception as exc:  # mapped to documented exit codes
            code = _exit_code(exc)
            if code is None:
                raise
            click.echo(f"error: {exc}", err=True)
            sys.exit(code)
    return wrapper


def _require_dir(path, what="data directory"):
    if not os.path.isdir(path):
        raise ConfigError(f"{what} not found: {path}")


def _resolve(config, overrides):
    return load_run_config(config, overrides)


config_option = click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
                             help="YAML run config; flags override its values.")


@click.group()
def main():
    """Cross-modal adversarial patch toolkit (toy visible + infrared stack)."""


@main.command("gen-data")
@config_option
@click.option("--out", default=None, help="Output dataset root.")
@click.option("--n", "n", type=int, default=None, help="Number of scene pairs (train + val).")
@click.option("--seed", type=int, default=None)
@handled
def gen_data(config, out, n, seed):
    """Write a seeded synthetic paired dataset."""
    from .data import SyntheticConfig, gen_synthetic_dataset

    cfg = _resolve(config, {"data.root": out, "data.n_images": n, "seed": seed})
    if cfg.data.n_images < 1:
        raise ConfigError(f"--n must be >= 1, got {cfg.data.n_images}")
    syn = SyntheticConfig(image_size=cfg.data.image_size, min_ir_contrast=cfg.data.min_ir_contrast,
                          n_boards=cfg.data.n_boards)
    echo_config(cfg, cfg.data.root)
    manifests = gen_synthetic_dataset(cfg.data.n_images, syn, rng_seed=cfg.seed, out_root=cfg.data.root)
    for m in manifests:
        click.echo(f"{m.split}: {len(m)} pairs")


@main.command("train-adapter")
@config_option
@click.option("--data", default=None, help="Dataset root (uses its 'boards' split, else 'train').")
@click.option("--out", default=None, help="Adapter file (.npz).")
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@handled
def train_adapter_cmd(config, data, out, epochs, seed):
    """Fit the RGB->infrared adapter and report held-out MSE."""
    from .adapter import RGBToIRAdapter, sample_pixel_pairs, save_adapter
    from .data import load_pairs

    cfg = _resolve(config, {"data.root": data, "adapter.path": out, "adapter.epochs": epochs, "seed": seed})
    _require_dir(cfg.data.root)
    split = "boards" if os.path.isdir(os.path.join(cfg.data.root, "boards")) else "train"
    pairs = load_pairs(cfg.data.root, split)
    echo_config(cfg, os.path.dirname(os.path.abspath(cfg.adapter.path)))
    fit_set = sample_pixel_pairs(pairs, cfg.adapter.n_pairs, rng_seed=[cfg.seed, 0])
    # held-out pixels come from scenes the adapter never saw
    held_split = "val" if os.path.isdir(os.path.join(cfg.data.root, "val")) else split
    held = sample_pixel_pairs(load_pairs(cfg.data.root, held_split), cfg.adapter.n_heldout, rng_seed=[cfg.seed, 1])
    a = cfg.adapter
    model = RGBToIRAdapter(learning_rate=a.learning_rate, epochs=a.epochs, batch_size=a.batch_size,
                           random_state=cfg.seed).fit(fit_set.inputs, fit_set.targets)
    mse = float(np.mean((model.predict(held.inputs) - held.targets[:, 0]) ** 2))
    save_adapter(model, a.path)
    click.echo(f"held-out MSE: {mse:.3e}")
    click.echo(f"adapter written to {a.path} (sha256 {file_checksum(a.path)})")


@main.command("train-detector")
@config_option
@click.option("--data", default=None)
@click.option("--out", default=None, help="Detector file.")
@click.option("--variant-seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--width", type=int, default=None)
@handled
def train_detector_cmd(config, data, out, variant_seed, epochs, width):
    """Train a dual-branch toy victim and gate it on held-out recall."""
    from .data import load_pairs
    from .detectors.gateway import save_detector, train_toy_detector

    cfg = _resolve(config, {"data.root": data, "detector.path": out, "detector.variant_seed": variant_seed,
                            "detector.epochs": epochs, "detector.width": width})
    _require_dir(cfg.data.root)
    d = cfg.detector
    echo_config(cfg, os.path.dirname(os.path.abspath(d.path)))
    handle = train_toy_detector(load_pairs(cfg.data.root, "train"), variant_seed=d.variant_seed,
                                val_pairs=load_pairs(cfg.data.root, "val"), width=d.width, epochs=d.epochs,
                                min_images=d.min_images, min_recall=d.min_recall, learning_rate=d.learning_rate,
                                pos_weight=d.pos_weight)
    save_detector(handle, d.path)
    click.echo(f"held-out recall: {json.dumps(handle.report, sort_keys=True)}")
    click.echo(f"detector written to {d.path} (sha256 {file_checksum(d.path)})")


@main.command("train-patch")
@config_option
@click.option("--data", default=None)
@click.option("--detector", default=None, help="Victim detector file.")
@click.option("--adapter", default=None, help="Adapter file.")
@click.option("--out", default=None, help="Patch image path (.png); metadata goes to <out>.json.")
@click.option("--iterations", type=int, default=None)
@click.option("--seed", type=int, default=None)
@handled
def train_patch_cmd(config, data, detector, adapter, out, iterations, seed):
    """Optimise a universal patch against a toy victim."""
    from .adapter import load_adapter
    from .attack import save_patch, train_patch
    from .data import load_pairs
    from .detectors.gateway import load_detector

    cfg = _resolve(config, {"data.root": data, "detector.path": detector, "adapter.path": adapter,
                            "attack.patch_path": out, "attack.iterations": iterations, "seed": seed})
    _require_dir(cfg.data.root)
    acfg = cfg.attack_config()
    victim = load_detector(cfg.detector.path)
    model = load_adapter(cfg.adapter.path) if acfg.use_adapter else None
    echo_config(cfg, os.path.dirname(os.path.abspath(cfg.attack.patch_path)))
    patch, history = train_patch(load_pairs(cfg.data.root, "train"), victim, model, acfg)
    save_patch(patch, cfg.attack.patch_path, acfg)
    click.echo(f"final loss {history[-1]['loss']:.4f}; patch written to {cfg.attack.patch_path} "
               f"(sha256 {file_checksum(cfg.attack.patch_path)})")


def _eval_setup(cfg, patch_path=None):
    from .adapter import load_adapter
    from .attack import load_patch
    from .data import load_pairs
    from .detectors.gateway import load_detector

    _require_dir(cfg.data.root)
    pairs = load_pairs(cfg.data.root, cfg.eval.split, cfg.eval.limit)
    victim = load_detector(cfg.detector.path)
    patch = load_patch(patch_path or cfg.attack.patch_path, expected_config=cfg.attack_config())
    adapter = load_adapter(cfg.adapter.path) if cfg.eval.ir_source == "adapter" else None
    return pairs, victim, patch, adapter


def _print_reports(reports):
    for r in reports:
        click.echo(f"{r.variant or '-':>16} {r.modality:>9} thr={r.threshold:.2f} n_clean={r.n_clean:4d} "
                   f"n_patch={r.n_patch:4d} ASR={r.asr:.4f}")


@main.command("eval")
@config_option
@click.option("--data", default=None)
@click.option("--detector", default=None)
@click.option("--patch", default=None)
@click.option("--out-dir", default=None)
@click.option("--threshold", type=float, default=None, help="Confidence threshold (default 0.5).")
@handled
def eval_cmd(config, data, detector, patch, out_dir, threshold):
    """ASR of a patch on one victim, per modality and fused."""
    from .evaluation import compute_asr, emit_report

    cfg = _resolve(config, {"data.root": data, "detector.path": detector, "attack.patch_path": patch,
                            "out_dir": out_dir, "eval.threshold": threshold})
    pairs, victim, p, adapter = _eval_setup(cfg)
    echo_config(cfg, cfg.out_dir)
    reps = compute_asr(pairs, p, victim, cfg.eval.threshold, cfg.eval.matched, cfg.eval.ir_source, adapter,
                       cfg.attack.coverage_cap, variant="patch")
    _print_reports(reps.values())
    for path in emit_report(list(reps.values()), cfg.out_dir, cfg.attack_config().hash(), "asr"):
        click.echo(f"wrote {path} (sha256 {file_checksum(path)})")


@main.command("sweep")
@config_option
@click.option("--data", default=None)
@click.option("--detector", default=None)
@click.option("--patch", default=None)
@click.option("--out-dir", default=None)
@handled
def sweep_cmd(config, data, detector, patch, out_dir):
    """ASR across confidence thresholds (one detection pass)."""
    from .evaluation import emit_report, threshold_sweep

    cfg = _resolve(config, {"data.root": data, "detector.path": detector, "attack.patch_path": patch,
                            "out_dir": out_dir})
    pairs, victim, p, adapter = _eval_setup(cfg)
    echo_config(cfg, cfg.out_dir)
    reps = threshold_sweep(pairs, p, victim, cfg.eval.thresholds, cfg.eval.matched, cfg.eval.ir_source, adapter,
                           cfg.attack.coverage_cap, variant="patch")
    _print_reports(reps)
    for path in emit_report(reps, cfg.out_dir, cfg.attack_config().hash(), "sweep"):
        click.echo(f"wrote {path}")


@main.command("transfer")
@config_option
@click.option("--data", default=None)
@click.option("--detector", "detectors", multiple=True, required=True, help="Victim file; repeat per victim.")
@click.option("--patch", "patches", multiple=True, required=True,
              help="Patch trained on the matching --detector; repeat in the same order.")
@click.option("--out-dir", default=None)
@handled
def transfer_cmd(config, data, detectors, patches, out_dir):
    """Transfer matrix: every patch against every victim."""
    from .attack import load_patch
    from .data import load_pairs
    from .detectors.gateway import load_detector
    from .evaluation import emit_report, transfer_eval

    cfg = _resolve(config, {"data.root": data, "out_dir": out_dir})
    if len(detectors) != len(patches):
        raise ConfigError(f"got {len(detectors)} detectors but {len(patches)} patches")
    _require_dir(cfg.data.root)
    victims = [load_detector(d) for d in detectors]
    ids = [v.id for v in victims]
    if len(set(ids)) != len(ids):
        for k, v in enumerate(victims):
            v.id = f"{v.id}#{k}"
    pmap = {v.id: load_patch(p) for v, p in zip(victims, patches)}
    echo_config(cfg, cfg.out_dir)
    tm = transfer_eval(pmap, victims, load_pairs(cfg.data.root, cfg.eval.split, cfg.eval.limit),
                       cfg.eval.threshold, matched=cfg.eval.matched, coverage_cap=cfg.attack.coverage_cap)
    for i, src in enumerate(tm.victim_ids):
        click.echo(f"{src:>20}: " + " ".join(f"{c:.4f}" for c in tm.cells[i]))
    for path in emit_report(tm, cfg.out_dir, cfg.attack_config().hash(), "transfer"):
        click.echo(f"wrote {path}")


@main.command("ablate")
@config_option
@click.option("--data", default=None)
@click.option("--detector", default=None)
@click.option("--adapter", default=None)
@click.option("--out-dir", default=None)
@handled
def ablate_cmd(config, data, detector, adapter, out_dir):
    """Full attack versus no-adapter and no-augmentation variants."""
    from .adapter import load_adapter
    from .data import load_pairs
    from .detectors.gateway import load_detector
    from .evaluation import ablation_suite, emit_report, multiscale_test_split

    cfg = _resolve(config, {"data.root": data, "detector.path": detector, "adapter.path": adapter,
                            "out_dir": out_dir})
    _require_dir(cfg.data.root)
    victim = load_detector(cfg.detector.path)
    model = load_adapter(cfg.adapter.path)
    test = load_pairs(cfg.data.root, cfg.eval.split, cfg.eval.limit)
    if cfg.eval.multiscale:
        test = multiscale_test_split(test, cfg.attack.dilation_factors, rng_seed=cfg.seed)
    echo_config(cfg, cfg.out_dir)
    res = ablation_suite(load_pairs(cfg.data.root, "train"), victim, model, cfg.attack_config(), test,
                         cfg.eval.threshold, cfg.eval.ir_source)
    for name, v, r in res.rows:
        click.echo(f"{name:>16}: visible ASR {v:.4f}  infrared ASR {r:.4f}")
    for path in emit_report(res, cfg.out_dir, cfg.attack_config().hash(), "ablation"):
        click.echo(f"wrote {path}")


@main.command("render")
@config_option
@click.option("--data", default=None)
@click.option("--patch", default=None)
@click.option("--out-dir", default=None)
@click.option("--n", "n", type=int, default=4, show_default=True, help="Number of pairs to render.")
@handled
def render_cmd(config, data, patch, out_dir, n):
    """Side-by-side clean/patched visible and infrared images."""
    from PIL import Image

    from .attack import apply_patch, load_patch
    from .data import load_pairs

    cfg = _resolve(config, {"data.root": data, "attack.patch_path": patch, "out_dir": out_dir})
    _require_dir(cfg.data.root)
    p = load_patch(cfg.attack.patch_path)
    pairs = load_pairs(cfg.data.root, cfg.eval.split, n)
    echo_config(cfg, cfg.out_dir)
    for pair in pairs:
        q = apply_patch(pair, p, coverage_cap=cfg.attack.coverage_cap)
        tiles = [pair.visible, q.visible, np.repeat(pair.infrared, 3, axis=2), np.repeat(q.infrared, 3, axis=2)]
        sheet = np.concatenate(tiles, axis=1)
        path = os.path.join(cfg.out_dir, f"render_{pair.id}.png")
        Image.fromarray(np.clip(np.round(sheet * 255), 0, 255).astype(np.uint8), "RGB").save(path)
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
