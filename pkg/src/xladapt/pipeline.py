"""Experiment harness: corpora, the nine systems, the adaptation sweep, tables.

Systems (desk benchmark):
  mono_lr_src     low-resource language, source-domain training only
  mono_wr_src     well-resourced language, source-domain training only
  oracle_lr_tgt   low-resource language trained on target-domain data (oracle)
  multiling       two-task shared-trunk training on both source corpora
  proposed        multiling -> adapt trunk[1..k] on WR target -> graft
  multitask3      three tasks: LR source, WR source, WR target
  multitask3_ft   multitask3 plus frozen-trunk fine-tuning on WR target
  multicond       two tasks where the WR task pools source+target data
  multicond_ft    multicond plus frozen-trunk fine-tuning on WR target

The metric everywhere is frame error (percent, argmax over senone logits);
reports label it explicitly. All outputs (corpora, checkpoints, logs, result
files) are deterministic functions of the config and seeds: no timestamps,
no absolute paths.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import (
    DEFAULT_TRUNK_CONTEXTS,
    Network,
    build_network,
    forward_batch,
    load_checkpoint,
    make_tdnn_spec,
    save_checkpoint,
    transfer_shared_layers,
)
from .numerics import Rng
from .synthdata import (
    Corpus,
    bayes_oracle_error,
    identity_domain,
    load_corpus,
    make_language,
    merge_corpora,
    rotation_domain,
    sample_corpus,
    save_corpus,
)
from .training import (
    TrainConfig,
    adapt_shared_layers,
    set_input_normalization,
    train_multitask,
    train_single_task,
)

RESULTS_FORMAT_VERSION = 1

SYSTEMS = (
    "mono_lr_src",
    "mono_wr_src",
    "oracle_lr_tgt",
    "multiling",
    "proposed",
    "multitask3",
    "multitask3_ft",
    "multicond",
    "multicond_ft",
)

TRAIN_CORPORA = {
    "wr_src": ("wr", "src"),
    "lr_src": ("lr", "src"),
    "wr_tgt": ("wr", "tgt"),
    "lr_tgt": ("lr", "tgt"),
}

TEST_CONDITIONS = (
    ("wr", "src"),
    ("wr", "tgt"),
    ("wr", "tb"),
    ("lr", "src"),
    ("lr", "tgt"),
    ("lr", "tb"),
)

MONO_SYSTEMS = {
    "mono_lr_src": ("lr", "lr_src"),
    "mono_wr_src": ("wr", "wr_src"),
    "oracle_lr_tgt": ("lr", "lr_tgt"),
}


class ConfigError(ValueError):
    """Bad experiment configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Missing or inconsistent corpora (CLI exit code 3)."""


class IncompleteResultsError(RuntimeError):
    """Result cells missing for a selected system (CLI exit code 5)."""


# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    # data generation
    data_seed: int = 2024
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    feature_dim: int = 16
    latent_dim: int = 8
    wr_senones: int = 40
    lr_senones: int = 30
    alpha: float = 0.7
    mixing_jitter: float = 0.5
    class_sep: float = 1.0
    self_loop: float = 0.8
    mean_utt_len: int = 50
    noise_std: float = 0.25
    gain_range: tuple[float, float] = (0.9, 1.1)
    tgt_angle_deg: float = 55.0
    tb_angle_deg: float = 40.0
    wr_src_frames: int = 20_000
    lr_src_frames: int = 4_000
    wr_tgt_frames: int = 20_000
    lr_tgt_frames: int = 8_000
    test_frames: int = 6_000
    oracle_samples: int = 20_000
    # architecture
    hidden_dim: int = 64
    trunk_contexts: tuple[tuple[int, ...], ...] = DEFAULT_TRUNK_CONTEXTS
    # training
    train: TrainConfig = field(default_factory=lambda: TrainConfig(minibatch=64))
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1.0, minibatch=64))
    adapt_k: int = 3
    adapt_lr_restart: bool = True
    # experiment selection
    systems: tuple[str, ...] = SYSTEMS
    run_sweep: bool = False
    sweep_k: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    sweep_epochs: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0)

    def __post_init__(self):
        unknown = set(self.systems) - set(SYSTEMS)
        if unknown:
            raise ConfigError(f"unknown systems {sorted(unknown)}; valid: {SYSTEMS}")
        if "proposed" in self.systems and (not self.sweep_k or not self.sweep_epochs):
            raise ConfigError("sweep grid must be non-empty when proposed is selected")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        for name in ("feature_dim", "latent_dim", "wr_senones", "lr_senones",
                     "hidden_dim", "mean_utt_len", "wr_src_frames", "lr_src_frames",
                     "wr_tgt_frames", "lr_tgt_frames", "test_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        d["adapt"] = self.adapt.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            d["train"] = TrainConfig.from_dict(d["train"]) if "train" in d else TrainConfig(minibatch=64)
            d["adapt"] = TrainConfig.from_dict(d["adapt"]) if "adapt" in d else TrainConfig(epochs=1.0, minibatch=64)
            for key in ("seeds", "systems", "sweep_k", "sweep_epochs", "gain_range"):
                if key in d:
                    d[key] = tuple(d[key])
            if "trunk_contexts" in d:
                d["trunk_contexts"] = tuple(tuple(c) for c in d["trunk_contexts"])
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad config: {e}") from e

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def desk_profile(**overrides) -> ExperimentConfig:
    """Minutes-scale CPU benchmark; the configuration acceptance runs against."""
    base = dict(
        profile="desk",
        hidden_dim=64,
        train=TrainConfig(initial_lr=0.04, epochs=3.0, minibatch=64),
        adapt=TrainConfig(initial_lr=0.04, epochs=1.0, minibatch=64),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def paper_profile(**overrides) -> ExperimentConfig:
    """Published-scale architecture and optimizer settings.

    Feature dimension, trunk width/depth and the optimizer constants follow
    the published system; senone inventory sizes are stand-ins since the
    original inventories are corpus-dependent.
    """
    base = dict(
        profile="paper",
        feature_dim=43,
        latent_dim=20,
        wr_senones=4000,
        lr_senones=2000,
        hidden_dim=650,
        train=TrainConfig(initial_lr=0.0015, epochs=3.0, minibatch=256),
        adapt=TrainConfig(initial_lr=0.0015, epochs=1.0, minibatch=256),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def load_config_file(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    profile = raw.pop("profile", "desk")
    base = paper_profile() if profile == "paper" else desk_profile()
    merged = base.to_dict()
    for key, value in raw.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        if key in ("train", "adapt"):
            merged[key].update(value)
        else:
            merged[key] = value
    merged["profile"] = profile
    return ExperimentConfig.from_dict(merged)


# -----------------------------------------------------------------------------
# Data bundle
# -----------------------------------------------------------------------------


@dataclass
class DataBundle:
    train: dict[str, Corpus]
    test: dict[tuple[str, str], Corpus]


def build_languages(cfg: ExperimentConfig) -> dict:
    rng = Rng(cfg.data_seed)
    wr = make_language(
        rng, "wr", cfg.wr_senones, cfg.latent_dim, cfg.feature_dim,
        class_sep=cfg.class_sep,
    )
    lr = make_language(
        rng, "lr", cfg.lr_senones, cfg.latent_dim, cfg.feature_dim,
        base=wr, alpha=cfg.alpha, class_sep=cfg.class_sep,
        mixing_jitter=cfg.mixing_jitter,
    )
    return {"wr": wr, "lr": lr}


def build_domains(cfg: ExperimentConfig) -> dict:
    rng = Rng(cfg.data_seed)
    return {
        "src": identity_domain("src", cfg.feature_dim, cfg.noise_std, cfg.gain_range),
        "tgt": rotation_domain(
            rng, "tgt", cfg.feature_dim, cfg.tgt_angle_deg, cfg.noise_std, cfg.gain_range
        ),
        "tb": rotation_domain(
            rng, "tb", cfg.feature_dim, cfg.tb_angle_deg, cfg.noise_std, cfg.gain_range
        ),
    }


def _train_budget(cfg: ExperimentConfig, key: str) -> int:
    return {
        "wr_src": cfg.wr_src_frames,
        "lr_src": cfg.lr_src_frames,
        "wr_tgt": cfg.wr_tgt_frames,
        "lr_tgt": cfg.lr_tgt_frames,
    }[key]


def generate_bundle(cfg: ExperimentConfig) -> DataBundle:
    languages = build_languages(cfg)
    domains = build_domains(cfg)
    rng = Rng(cfg.data_seed)
    train = {}
    for key, (lang, dom) in TRAIN_CORPORA.items():
        train[key] = sample_corpus(
            rng.split(f"train.{key}"),
            languages[lang],
            domains[dom],
            _train_budget(cfg, key),
            cfg.mean_utt_len,
            f"{key}-train",
            cfg.self_loop,
        )
    test = {}
    for lang, dom in TEST_CONDITIONS:
        test[(lang, dom)] = sample_corpus(
            rng.split(f"test.{lang}.{dom}"),
            languages[lang],
            domains[dom],
            cfg.test_frames,
            cfg.mean_utt_len,
            f"{lang}-{dom}-test",
            cfg.self_loop,
        )
    return DataBundle(train, test)


def save_bundle(bundle: DataBundle, data_dir) -> None:
    data_dir = Path(data_dir)
    for key, corpus in bundle.train.items():
        save_corpus(corpus, data_dir / f"train_{key}")
    for (lang, dom), corpus in bundle.test.items():
        save_corpus(corpus, data_dir / f"test_{lang}_{dom}")


def load_bundle(data_dir) -> DataBundle:
    data_dir = Path(data_dir)
    train = {}
    for key in TRAIN_CORPORA:
        path = data_dir / f"train_{key}"
        if path.exists():
            train[key] = load_corpus(path)
    test = {}
    for lang, dom in TEST_CONDITIONS:
        path = data_dir / f"test_{lang}_{dom}"
        if path.exists():
            test[(lang, dom)] = load_corpus(path)
    return DataBundle(train, test)


def ensure_bundle(cfg: ExperimentConfig, data_dir) -> DataBundle:
    data_dir = Path(data_dir)
    if (data_dir / "train_wr_src" / "manifest.json").exists():
        return load_bundle(data_dir)
    bundle = generate_bundle(cfg)
    save_bundle(bundle, data_dir)
    return bundle


def _required_corpora(systems) -> set[str]:
    need = set()
    for system in systems:
        if system in MONO_SYSTEMS:
            need.add(MONO_SYSTEMS[system][1])
        else:
            need.update(("lr_src", "wr_src"))
        if system in ("proposed", "multitask3", "multitask3_ft", "multicond", "multicond_ft"):
            need.add("wr_tgt")
    return need


def validate_bundle(bundle: DataBundle, systems) -> None:
    missing = sorted(_required_corpora(systems) - set(bundle.train))
    if missing:
        raise DataError(f"missing training corpora for selected systems: {missing}")
    missing_test = [f"{l}_{d}" for l, d in TEST_CONDITIONS if (l, d) not in bundle.test]
    if missing_test:
        raise DataError(f"missing test corpora: {missing_test}")


def oracle_report(cfg: ExperimentConfig) -> dict:
    """Bayes-error floor per (language, domain), for calibration context."""
    languages = build_languages(cfg)
    domains = build_domains(cfg)
    rng = Rng(cfg.data_seed)
    out = {}
    for lang in ("wr", "lr"):
        for dom in ("src", "tgt", "tb"):
            est = bayes_oracle_error(
                languages[lang], domains[dom], cfg.oracle_samples,
                rng.split(f"oracle.{lang}.{dom}"),
            )
            out[f"{lang}_{dom}"] = {
                "error_percent": 100.0 * est.error,
                "stderr_percent": 100.0 * est.stderr,
                "n_samples": est.n_samples,
            }
    return out


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------


def evaluate(net: Network, head: str, corpus: Corpus, group: int = 64) -> float:
    """Frame error percent: argmax over logits vs labels; deterministic."""
    if net.spec.senones(head) != corpus.senone_count:
        raise ValueError(
            f"head {head!r} has {net.spec.senones(head)} senones but corpus "
            f"has {corpus.senone_count}"
        )
    wrong = 0
    total = 0
    utts = corpus.utterances
    for i in range(0, len(utts), group):
        chunk = utts[i : i + group]
        logits, _, _ = forward_batch(net, head, [u.frames for u in chunk])
        labels = np.concatenate([u.labels for u in chunk])
        wrong += int(np.sum(logits.argmax(axis=1) != labels))
        total += labels.size
    return 100.0 * wrong / total


# -----------------------------------------------------------------------------
# Result rows
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    system: str
    language: str
    domain: str
    head: str
    frame_error: float
    seed: int
    config_hash: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        return cls(**d)


def write_results(rows: list[ResultRow], path, config_hash: str) -> None:
    rows = sorted(rows, key=lambda r: (r.system, r.language, r.domain, r.seed))
    with open(path, "w") as f:
        header = {
            "format_version": RESULTS_FORMAT_VERSION,
            "config_hash": config_hash,
            "metric": "frame_error_percent",
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")


def load_results(path) -> tuple[dict, list[ResultRow]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"empty results file {path}")
    header = json.loads(lines[0])
    if header.get("format_version") != RESULTS_FORMAT_VERSION:
        raise DataError(f"unsupported results format {header.get('format_version')}")
    return header, [ResultRow.from_dict(json.loads(l)) for l in lines[1:]]


def aggregate(rows: list[ResultRow]) -> dict[tuple[str, str, str], dict]:
    cells: dict[tuple[str, str, str], list[ResultRow]] = {}
    for row in rows:
        cells.setdefault((row.system, row.language, row.domain), []).append(row)
    out = {}
    for key, cell in sorted(cells.items()):
        errs = np.array([r.frame_error for r in cell])
        out[key] = {
            "mean": float(errs.mean()),
            "std": float(errs.std(ddof=1)) if errs.size > 1 else 0.0,
            "n": int(errs.size),
            "seeds": sorted(r.seed for r in cell),
        }
    return out


def relative_improvement(baseline: float, improved: float) -> float:
    """(baseline - improved) / baseline; the report's improvement arithmetic."""
    return (baseline - improved) / baseline


# -----------------------------------------------------------------------------
# Systems
# -----------------------------------------------------------------------------


@dataclass
class SeedContext:
    cfg: ExperimentConfig
    bundle: DataBundle
    seed: int
    out_dir: Path
    cache: dict[str, Network] = field(default_factory=dict)

    def system_dir(self, system: str) -> Path:
        d = self.out_dir / f"seed{self.seed}" / system
        d.mkdir(parents=True, exist_ok=True)
        return d


class _LogWriter:
    def __init__(self, path):
        self._f = open(path, "w")

    def __call__(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._f.close()


def _stage_train_cfg(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return replace(cfg.train, seed=seed)


def _stage_adapt_cfg(
    cfg: ExperimentConfig, seed: int, epochs: float | None = None
) -> TrainConfig:
    adapt = replace(cfg.adapt, seed=seed, epochs=epochs if epochs is not None else cfg.adapt.epochs)
    if not cfg.adapt_lr_restart:
        adapt = replace(adapt, initial_lr=cfg.train.initial_lr / cfg.train.final_lr_factor)
    return adapt


def _spec_for(cfg: ExperimentConfig, head_senones: dict[str, int]):
    return make_tdnn_spec(cfg.feature_dim, cfg.hidden_dim, head_senones, cfg.trunk_contexts)


def _eval_rows(
    ctx: SeedContext, system: str, net: Network, conditions: list[tuple[str, str, str]]
) -> list[ResultRow]:
    rows = []
    for head, lang, dom in conditions:
        err = evaluate(net, head, ctx.bundle.test[(lang, dom)])
        rows.append(
            ResultRow(system, lang, dom, head, err, ctx.seed, ctx.cfg.config_hash())
        )
    return rows


def _lang_conditions(head: str, lang: str) -> list[tuple[str, str, str]]:
    return [(head, lang, dom) for dom in ("src", "tgt", "tb")]


def _run_mono(ctx: SeedContext, system: str) -> list[ResultRow]:
    lang, corpus_key = MONO_SYSTEMS[system]
    corpus = ctx.bundle.train[corpus_key]
    senones = {"lr": ctx.cfg.lr_senones, "wr": ctx.cfg.wr_senones}[lang]
    net = build_network(_spec_for(ctx.cfg, {lang: senones}), Rng(ctx.seed).split(f"init.{system}"))
    set_input_normalization(net, [corpus])
    log = _LogWriter(ctx.system_dir(system) / "train.log.jsonl")
    try:
        train_single_task(net, lang, corpus, _stage_train_cfg(ctx.cfg, ctx.seed),
                          stage=system, log=log)
    finally:
        log.close()
    save_checkpoint(net, ctx.system_dir(system) / "final.ckpt")
    return _eval_rows(ctx, system, net, _lang_conditions(lang, lang))


def _ensure_multiling(ctx: SeedContext) -> Network:
    if "multiling" not in ctx.cache:
        cfg = ctx.cfg
        corpora = {"lr": ctx.bundle.train["lr_src"], "wr": ctx.bundle.train["wr_src"]}
        spec = _spec_for(cfg, {"lr": cfg.lr_senones, "wr": cfg.wr_senones})
        net = build_network(spec, Rng(ctx.seed).split("init.multiling"))
        set_input_normalization(net, list(corpora.values()))
        log = _LogWriter(ctx.system_dir("multiling") / "train.log.jsonl")
        try:
            train_multitask(net, corpora, _stage_train_cfg(cfg, ctx.seed),
                            stage="multiling", log=log)
        finally:
            log.close()
        save_checkpoint(net, ctx.system_dir("multiling") / "final.ckpt")
        ctx.cache["multiling"] = net
    return ctx.cache["multiling"]


_BILINGUAL_CONDITIONS = [("wr", "wr", d) for d in ("src", "tgt", "tb")] + [
    ("lr", "lr", d) for d in ("src", "tgt", "tb")
]


def _run_multiling(ctx: SeedContext) -> list[ResultRow]:
    net = _ensure_multiling(ctx)
    return _eval_rows(ctx, "multiling", net, _BILINGUAL_CONDITIONS)


def _run_proposed(ctx: SeedContext, k: int | None = None, epochs: float | None = None,
                  system: str = "proposed", save: bool = True) -> tuple[Network, list[ResultRow]]:
    cfg = ctx.cfg
    multiling = _ensure_multiling(ctx)
    k = cfg.adapt_k if k is None else k
    out_dir = ctx.system_dir(system)
    log = _LogWriter(out_dir / "adapt.log.jsonl")
    try:
        adapted = adapt_shared_layers(
            multiling, "wr", ctx.bundle.train["wr_tgt"], k,
            _stage_adapt_cfg(cfg, ctx.seed, epochs), stage="adapt", log=log,
        )
    finally:
        log.close()
    grafted = transfer_shared_layers(adapted, multiling)
    if save:
        save_checkpoint(adapted, out_dir / "adapted.ckpt")
        save_checkpoint(grafted, out_dir / "final.ckpt")
    return grafted, _eval_rows(ctx, system, grafted, _BILINGUAL_CONDITIONS)


def _ensure_multitask3(ctx: SeedContext) -> Network:
    if "multitask3" not in ctx.cache:
        cfg = ctx.cfg
        corpora = {
            "lr": ctx.bundle.train["lr_src"],
            "wr_src": ctx.bundle.train["wr_src"],
            "wr_tgt": ctx.bundle.train["wr_tgt"],
        }
        spec = _spec_for(cfg, {
            "lr": cfg.lr_senones, "wr_src": cfg.wr_senones, "wr_tgt": cfg.wr_senones,
        })
        net = build_network(spec, Rng(ctx.seed).split("init.multitask3"))
        set_input_normalization(net, list(corpora.values()))
        log = _LogWriter(ctx.system_dir("multitask3") / "train.log.jsonl")
        try:
            train_multitask(net, corpora, _stage_train_cfg(cfg, ctx.seed),
                            stage="multitask3", log=log)
        finally:
            log.close()
        save_checkpoint(net, ctx.system_dir("multitask3") / "final.ckpt")
        ctx.cache["multitask3"] = net
    return ctx.cache["multitask3"]


_MULTITASK3_CONDITIONS = (
    [("wr_src", "wr", "src")]
    + [("wr_tgt", "wr", d) for d in ("tgt", "tb")]
    + [("lr", "lr", d) for d in ("src", "tgt", "tb")]
)


def _run_multitask3(ctx: SeedContext) -> list[ResultRow]:
    net = _ensure_multitask3(ctx)
    return _eval_rows(ctx, "multitask3", net, _MULTITASK3_CONDITIONS)


def _run_multitask3_ft(ctx: SeedContext, k: int, epochs: float) -> list[ResultRow]:
    base = _ensure_multitask3(ctx)
    out_dir = ctx.system_dir("multitask3_ft")
    log = _LogWriter(out_dir / "adapt.log.jsonl")
    try:
        adapted = adapt_shared_layers(
            base, "wr_tgt", ctx.bundle.train["wr_tgt"], k,
            _stage_adapt_cfg(ctx.cfg, ctx.seed, epochs), stage="adapt", log=log,
        )
    finally:
        log.close()
    save_checkpoint(adapted, out_dir / "final.ckpt")
    return _eval_rows(ctx, "multitask3_ft", adapted, _MULTITASK3_CONDITIONS)


def _ensure_multicond(ctx: SeedContext) -> Network:
    if "multicond" not in ctx.cache:
        cfg = ctx.cfg
        corpora = {
            "lr": ctx.bundle.train["lr_src"],
            "wr": merge_corpora(ctx.bundle.train["wr_src"], ctx.bundle.train["wr_tgt"]),
        }
        spec = _spec_for(cfg, {"lr": cfg.lr_senones, "wr": cfg.wr_senones})
        net = build_network(spec, Rng(ctx.seed).split("init.multicond"))
        set_input_normalization(net, list(corpora.values()))
        log = _LogWriter(ctx.system_dir("multicond") / "train.log.jsonl")
        try:
            train_multitask(net, corpora, _stage_train_cfg(cfg, ctx.seed),
                            stage="multicond", log=log)
        finally:
            log.close()
        save_checkpoint(net, ctx.system_dir("multicond") / "final.ckpt")
        ctx.cache["multicond"] = net
    return ctx.cache["multicond"]


def _run_multicond(ctx: SeedContext) -> list[ResultRow]:
    net = _ensure_multicond(ctx)
    return _eval_rows(ctx, "multicond", net, _BILINGUAL_CONDITIONS)


def _run_multicond_ft(ctx: SeedContext, k: int, epochs: float) -> list[ResultRow]:
    base = _ensure_multicond(ctx)
    out_dir = ctx.system_dir("multicond_ft")
    log = _LogWriter(out_dir / "adapt.log.jsonl")
    try:
        adapted = adapt_shared_layers(
            base, "wr", ctx.bundle.train["wr_tgt"], k,
            _stage_adapt_cfg(ctx.cfg, ctx.seed, epochs), stage="adapt", log=log,
        )
    finally:
        log.close()
    save_checkpoint(adapted, out_dir / "final.ckpt")
    return _eval_rows(ctx, "multicond_ft", adapted, _BILINGUAL_CONDITIONS)


def run_system(ctx: SeedContext, system: str,
               ft_k: int | None = None, ft_epochs: float | None = None) -> list[ResultRow]:
    if system in MONO_SYSTEMS:
        return _run_mono(ctx, system)
    if system == "multiling":
        return _run_multiling(ctx)
    if system == "proposed":
        return _run_proposed(ctx)[1]
    if system == "multitask3":
        return _run_multitask3(ctx)
    if system == "multitask3_ft":
        return _run_multitask3_ft(ctx, ft_k or ctx.cfg.adapt_k,
                                  ft_epochs or ctx.cfg.adapt.epochs)
    if system == "multicond":
        return _run_multicond(ctx)
    if system == "multicond_ft":
        return _run_multicond_ft(ctx, ft_k or ctx.cfg.adapt_k,
                                 ft_epochs or ctx.cfg.adapt.epochs)
    raise ConfigError(f"unknown system {system!r}")


# -----------------------------------------------------------------------------
# Sweep
# -----------------------------------------------------------------------------


def run_sweep(cfg: ExperimentConfig, ctxs: list[SeedContext], out_dir) -> dict:
    """One adaptation run per (k, epochs) grid point per seed, shared stage 1."""
    out_dir = Path(out_dir)
    points = []
    for k in cfg.sweep_k:
        for epochs in cfg.sweep_epochs:
            lr_errs, wr_errs = [], []
            for ctx in ctxs:
                grafted, rows = _run_proposed(
                    ctx, k=k, epochs=epochs,
                    system=f"sweep/k{k}_e{epochs:g}", save=False,
                )
                save_checkpoint(
                    grafted,
                    ctx.system_dir(f"sweep/k{k}_e{epochs:g}") / "final.ckpt",
                )
                by_cond = {(r.language, r.domain): r.frame_error for r in rows}
                lr_errs.append(by_cond[("lr", "tgt")])
                wr_errs.append(by_cond[("wr", "tgt")])
            points.append(
                {
                    "k_layers": k,
                    "epochs": epochs,
                    "lr_tgt_mean": float(np.mean(lr_errs)),
                    "wr_tgt_mean": float(np.mean(wr_errs)),
                    "lr_tgt_per_seed": lr_errs,
                    "wr_tgt_per_seed": wr_errs,
                }
            )
    best = min(points, key=lambda p: p["lr_tgt_mean"])
    means = [p["lr_tgt_mean"] for p in points]
    report = {
        "config_hash": cfg.config_hash(),
        "grid_points": points,
        "argmin": {"k_layers": best["k_layers"], "epochs": best["epochs"],
                   "lr_tgt_mean": best["lr_tgt_mean"]},
        "lr_tgt_spread": float(max(means) - min(means)),
        "seeds": [ctx.seed for ctx in ctxs],
    }
    with open(out_dir / "sweep.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_sweep_table(report, out_dir / "sweep.txt", cfg)
    return report


def _write_sweep_table(report: dict, path, cfg: ExperimentConfig) -> None:
    lines = [
        "Adaptation sweep: LR-target frame error % (WR-target in parentheses)",
        f"config {report['config_hash']}  seeds {report['seeds']}",
        "",
    ]
    header = "k\\epochs" + "".join(f"{e:>16g}" for e in cfg.sweep_epochs)
    lines.append(header)
    by_point = {(p["k_layers"], p["epochs"]): p for p in report["grid_points"]}
    best = (report["argmin"]["k_layers"], report["argmin"]["epochs"])
    for k in cfg.sweep_k:
        cells = []
        for e in cfg.sweep_epochs:
            p = by_point[(k, e)]
            mark = "*" if (k, e) == best else " "
            cells.append(f"{p['lr_tgt_mean']:7.2f} ({p['wr_tgt_mean']:5.2f}){mark}")
        lines.append(f"{k:<8d}" + "".join(f"{c:>16s}" for c in cells))
    lines.append("")
    lines.append(f"spread (max-min of LR-target means): {report['lr_tgt_spread']:.2f}")
    lines.append(f"argmin: k={best[0]} epochs={best[1]:g}")
    Path(path).write_text("\n".join(lines) + "\n")


# -----------------------------------------------------------------------------
# Tables and reports
# -----------------------------------------------------------------------------


_TABLE2_ROWS = (
    ("mono", {"wr": ("mono_wr_src", "wr"), "lr": ("mono_lr_src", "lr")}),
    ("multiling", {"wr": ("multiling", "wr"), "lr": ("multiling", "lr")}),
    ("proposed", {"wr": ("proposed", "wr"), "lr": ("proposed", "lr")}),
    ("multitask3", {"wr": ("multitask3", "wr"), "lr": ("multitask3", "lr")}),
    ("multitask3_ft", {"wr": ("multitask3_ft", "wr"), "lr": ("multitask3_ft", "lr")}),
    ("multicond", {"wr": ("multicond", "wr"), "lr": ("multicond", "lr")}),
    ("multicond_ft", {"wr": ("multicond_ft", "wr"), "lr": ("multicond_ft", "lr")}),
)


def _required_cells(systems) -> list[tuple[str, str, str]]:
    cells = []
    for system in systems:
        if system in MONO_SYSTEMS:
            lang = MONO_SYSTEMS[system][0]
            cells.extend((system, lang, d) for d in ("src", "tgt", "tb"))
        elif system in ("multitask3", "multitask3_ft"):
            cells.extend((system, l, d) for _, l, d in _MULTITASK3_CONDITIONS)
        else:
            cells.extend((system, l, d) for _, l, d in _BILINGUAL_CONDITIONS)
    return cells


def check_complete(rows: list[ResultRow], systems, seeds) -> None:
    have = {(r.system, r.language, r.domain, r.seed) for r in rows}
    missing = [
        f"{s}/{l}/{d}/seed{seed}"
        for (s, l, d) in _required_cells(systems)
        for seed in seeds
        if (s, l, d, seed) not in have
    ]
    if missing:
        raise IncompleteResultsError(f"missing result cells: {missing}")


def _fmt_cell(agg: dict, key) -> str:
    if key not in agg:
        return f"{'---':>14s}"
    c = agg[key]
    return f"{c['mean']:8.2f}±{c['std']:<5.2f}"


def emit_tables(rows: list[ResultRow], cfg: ExperimentConfig, out_dir,
                systems=None, sweep_report: dict | None = None) -> dict:
    """Write results.jsonl plus aligned-text tables; returns the report dict."""
    out_dir = Path(out_dir)
    systems = tuple(systems if systems is not None else cfg.systems)
    seeds = sorted({r.seed for r in rows})
    check_complete(rows, systems, seeds)
    config_hash = cfg.config_hash()
    write_results(rows, out_dir / "results.jsonl", config_hash)
    agg = aggregate(rows)

    lines = [
        "All results: frame error % (mean±std over seeds); metric is frame error,",
        "not WER (no decoding is performed).",
        f"config {config_hash}  seeds {seeds}",
        "",
        f"{'system':<16s}{'language':<10s}{'domain':<8s}{'mean':>8s}{'std':>7s}{'n':>4s}",
    ]
    for (system, lang, dom), cell in agg.items():
        lines.append(
            f"{system:<16s}{lang:<10s}{dom:<8s}{cell['mean']:8.2f}{cell['std']:7.2f}"
            f"{cell['n']:4d}"
        )
    (out_dir / "results_table.txt").write_text("\n".join(lines) + "\n")

    report: dict = {
        "format_version": RESULTS_FORMAT_VERSION,
        "config_hash": config_hash,
        "metric": "frame_error_percent",
        "seeds": seeds,
        "aggregates": {
            f"{s}/{l}/{d}": cell for (s, l, d), cell in agg.items()
        },
    }

    def cell_mean(system, lang, dom="tgt"):
        key = (system, lang, dom)
        return agg[key]["mean"] if key in agg else None

    # Target-domain comparison table (the seven-system layout).
    t2 = [
        "Target-domain comparison: frame error % (mean±std over seeds)",
        f"config {config_hash}  seeds {seeds}",
        "",
        f"{'system':<16s}{'WR tgt':>16s}{'LR tgt':>16s}",
    ]
    for label, pick in _TABLE2_ROWS:
        wr_sys, wr_head = pick["wr"]
        lr_sys, lr_head = pick["lr"]
        t2.append(
            f"{label:<16s}{_fmt_cell(agg, (wr_sys, 'wr', 'tgt')):>16s}"
            f"{_fmt_cell(agg, (lr_sys, 'lr', 'tgt')):>16s}"
        )
    (out_dir / "comparison_table.txt").write_text("\n".join(t2) + "\n")

    # Baseline table: matched/oracle vs cross-domain vs multilingual.
    t1 = [
        "Baseline systems: frame error % (mean±std over seeds)",
        f"config {config_hash}  seeds {seeds}",
        "",
        f"{'system':<16s}{'WR src':>16s}{'WR tgt':>16s}{'LR src':>16s}{'LR tgt':>16s}",
    ]
    for label, system in (("oracle_lr_tgt", "oracle_lr_tgt"),
                          ("mono", None), ("multiling", "multiling")):
        if label == "mono":
            cells = [_fmt_cell(agg, ("mono_wr_src", "wr", "src")),
                     _fmt_cell(agg, ("mono_wr_src", "wr", "tgt")),
                     _fmt_cell(agg, ("mono_lr_src", "lr", "src")),
                     _fmt_cell(agg, ("mono_lr_src", "lr", "tgt"))]
        else:
            cells = [_fmt_cell(agg, (system, "wr", "src")),
                     _fmt_cell(agg, (system, "wr", "tgt")),
                     _fmt_cell(agg, (system, "lr", "src")),
                     _fmt_cell(agg, (system, "lr", "tgt"))]
        t1.append(f"{label:<16s}" + "".join(f"{c:>16s}" for c in cells))
    (out_dir / "baseline_table.txt").write_text("\n".join(t1) + "\n")

    # Wideband conditions table for the low-resource language.
    t3 = [
        "LR language across target conditions: frame error % (mean over seeds)",
        f"config {config_hash}  seeds {seeds}  (language similarity alpha={cfg.alpha})",
        "",
        f"{'system':<16s}{'tgt':>10s}{'tb':>10s}{'avg':>10s}",
    ]
    for system in ("mono_lr_src", "multiling", "proposed"):
        a = cell_mean(system, "lr", "tgt")
        b = cell_mean(system, "lr", "tb")
        if a is None or b is None:
            continue
        t3.append(f"{system:<16s}{a:10.2f}{b:10.2f}{(a + b) / 2:10.2f}")
    (out_dir / "poor_match_table.txt").write_text("\n".join(t3) + "\n")

    # Headline comparisons and flags.
    mono = cell_mean("mono_lr_src", "lr")
    multi = cell_mean("multiling", "lr")
    prop = cell_mean("proposed", "lr")
    oracle = cell_mean("oracle_lr_tgt", "lr")
    chain = {}
    if mono is not None and multi is not None:
        chain["mono_to_multiling_relative"] = relative_improvement(mono, multi)
    if multi is not None and prop is not None:
        chain["multiling_to_proposed_relative"] = relative_improvement(multi, prop)
    report["lr_tgt_chain"] = {
        "oracle": oracle, "proposed": prop, "multiling": multi, "mono": mono,
        **chain,
    }

    flags = []
    comparisons = {}
    for rival in ("multitask3", "multicond"):
        r = cell_mean(rival, "lr")
        if prop is not None and r is not None:
            ok = prop <= r + 0.3
            comparisons[f"proposed_vs_{rival}"] = {
                "proposed": prop, rival: r, "within_slack": ok,
            }
            if not ok:
                flags.append(
                    f"proposed ({prop:.2f}) does not beat {rival} ({r:.2f}) "
                    "within the 0.3-point slack on LR target"
                )
    for base_sys in ("multitask3", "multicond"):
        base_err = cell_mean(base_sys, "lr")
        ft_err = cell_mean(f"{base_sys}_ft", "lr")
        if base_err is not None and ft_err is not None:
            delta = ft_err - base_err
            comparisons[f"{base_sys}_ft_delta"] = {"delta": delta,
                                                    "small": abs(delta) <= 0.5}
            if abs(delta) > 0.5:
                flags.append(
                    f"fine-tuning moved {base_sys} by {delta:+.2f} points "
                    "(expected |delta| <= 0.5)"
                )
    report["comparisons"] = comparisons
    report["flags"] = flags
    if sweep_report is not None:
        report["sweep"] = {
            "argmin": sweep_report["argmin"],
            "lr_tgt_spread": sweep_report["lr_tgt_spread"],
        }
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


# -----------------------------------------------------------------------------
# Orchestration
# -----------------------------------------------------------------------------


_FT_SYSTEMS = ("multitask3_ft", "multicond_ft")


def run_all(cfg: ExperimentConfig, out_dir, systems=None) -> dict:
    """Full benchmark: data, systems over seeds, optional sweep, tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    systems = tuple(systems if systems is not None else cfg.systems)
    unknown = set(systems) - set(SYSTEMS)
    if unknown:
        raise ConfigError(f"unknown systems {sorted(unknown)}")
    with open(out_dir / "config.json", "w") as f:
        json.dump({"config_hash": cfg.config_hash(), **cfg.to_dict()}, f,
                  indent=2, sort_keys=True)
        f.write("\n")
    bundle = ensure_bundle(cfg, out_dir / "data")
    validate_bundle(bundle, systems)
    with open(out_dir / "oracle.json", "w") as f:
        json.dump(oracle_report(cfg), f, indent=2, sort_keys=True)
        f.write("\n")

    ctxs = [SeedContext(cfg, bundle, seed, out_dir) for seed in cfg.seeds]
    rows: list[ResultRow] = []
    first_stage = [s for s in systems if s not in _FT_SYSTEMS]
    for ctx in ctxs:
        for system in first_stage:
            rows.extend(run_system(ctx, system))

    sweep_report = None
    if cfg.run_sweep:
        sweep_report = run_sweep(cfg, ctxs, out_dir)
    ft_k, ft_epochs = cfg.adapt_k, cfg.adapt.epochs
    if sweep_report is not None:
        ft_k = sweep_report["argmin"]["k_layers"]
        ft_epochs = sweep_report["argmin"]["epochs"]

    for ctx in ctxs:
        for system in systems:
            if system in _FT_SYSTEMS:
                rows.extend(run_system(ctx, system, ft_k=ft_k, ft_epochs=ft_epochs))

    return emit_tables(rows, cfg, out_dir, systems, sweep_report)
