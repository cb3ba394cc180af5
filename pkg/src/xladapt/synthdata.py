"""Synthetic bilingual, bidomain frame-classification corpora.

A language is a Gaussian class mixture in a latent space plus a
language-specific mixing map into feature space; a domain is a fixed linear
channel plus additive noise with per-utterance gain drift:

    features = channel @ (mixing_map.T @ latent) + gain * noise_std * eps

Class labels follow a first-order Markov chain over senones (uniform
stationary distribution), which gives temporal-context layers something to
exploit. Labels depend only on the latent stream, never on the domain, so the
same latent stream rendered under two domains differs in features only.

Language similarity is a single knob: class means (and covariances) of a
derived language interpolate toward a base language's, while the mixing map
is always a fresh draw. With orthogonal channels and equal noise settings,
domain rendering is a rotation of the feature ensemble, so the Bayes-optimal
frame error is domain-invariant by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

CORPUS_FORMAT_VERSION = 1
_FEAT_MAGIC = b"XFEA"
_LABEL_MAGIC = b"XLAB"


class CorpusFormatError(RuntimeError):
    """Corpus directory fails to parse or validate."""


# -----------------------------------------------------------------------------
# Specs
# -----------------------------------------------------------------------------


@dataclass
class LanguageSpec:
    name: str
    senone_count: int
    latent_dim: int
    class_means: np.ndarray  # (senones, latent_dim)
    class_covs: np.ndarray  # (senones, latent_dim) diagonal entries
    mixing_map: np.ndarray  # (latent_dim, feature_dim)
    similarity_to: tuple[str, float] | None = None

    def __post_init__(self):
        if np.any(self.class_covs <= 0):
            raise ValueError(f"language {self.name}: covariances must be positive")
        if np.linalg.matrix_rank(self.mixing_map) < self.latent_dim:
            raise ValueError(f"language {self.name}: mixing_map must have full row rank")
        if self.similarity_to is not None:
            alpha = self.similarity_to[1]
            if not 0.0 <= alpha <= 1.0:
                raise ValueError(f"similarity weight {alpha} outside [0, 1]")

    @property
    def feature_dim(self) -> int:
        return self.mixing_map.shape[1]


@dataclass
class DomainSpec:
    name: str
    channel: np.ndarray  # (feature_dim, feature_dim)
    noise_std: float
    gain_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if not np.all(np.isfinite(self.channel)):
            raise ValueError(f"domain {self.name}: channel must be finite")
        if self.noise_std < 0:
            raise ValueError(f"domain {self.name}: noise_std must be >= 0")
        lo, hi = self.gain_range
        if lo > hi or lo < 0:
            raise ValueError(f"domain {self.name}: bad gain range {self.gain_range}")


@dataclass
class Utterance:
    utterance_id: str
    language: str
    domain: str
    frames: np.ndarray  # (T, feature_dim)
    labels: np.ndarray  # (T,) int64


@dataclass
class Corpus:
    utterances: list[Utterance]
    feature_dim: int
    senone_count: int

    def __post_init__(self):
        ids = [u.utterance_id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValueError("utterance ids must be unique")

    def n_frames(self) -> int:
        return sum(u.frames.shape[0] for u in self.utterances)

    def all_labels(self) -> np.ndarray:
        return np.concatenate([u.labels for u in self.utterances])


def merge_corpora(*corpora: Corpus) -> Corpus:
    """Concatenate corpora (e.g. multi-condition pooling); ids must stay unique."""
    dims = {c.feature_dim for c in corpora}
    senones = {c.senone_count for c in corpora}
    if len(dims) != 1 or len(senones) != 1:
        raise ValueError("cannot merge corpora with differing dims or senone counts")
    utts = [u for c in corpora for u in c.utterances]
    return Corpus(utts, dims.pop(), senones.pop())


# -----------------------------------------------------------------------------
# Generators
# -----------------------------------------------------------------------------


def make_language(
    rng: Rng,
    name: str,
    senone_count: int,
    latent_dim: int,
    feature_dim: int,
    base: LanguageSpec | None = None,
    alpha: float | None = None,
    class_sep: float = 1.0,
    mixing_jitter: float = 0.5,
) -> LanguageSpec:
    """Draw a language; with a base, alpha interpolates its class geometry.

    alpha=1 copies the base's means/covariances (a relabeled language behind a
    new mixing map); alpha=0 is an independent draw. The mixing map is always
    language-specific; when derived from a base it is the base's projection
    plus a jittered fresh draw, so the two languages inhabit the same
    observation space the way two languages share one acoustic space.
    """
    r = rng.split(f"language.{name}")
    means = r.split("means").normal((senone_count, latent_dim), scale=class_sep)
    covs = r.split("covs").uniform(0.5, 1.5, (senone_count, latent_dim))
    mixing = r.split("mixing").normal((latent_dim, feature_dim), scale=1.0 / np.sqrt(latent_dim))
    similarity = None
    if base is not None:
        if alpha is None or not 0.0 <= alpha <= 1.0:
            raise ValueError(f"similarity weight {alpha} outside [0, 1]")
        if base.latent_dim != latent_dim:
            raise ValueError("latent_dim must match the base language's")
        idx = np.arange(senone_count) % base.senone_count
        means = alpha * base.class_means[idx] + (1.0 - alpha) * means
        covs = alpha * base.class_covs[idx] + (1.0 - alpha) * covs
        mixing = base.mixing_map + mixing_jitter * mixing
        similarity = (base.name, alpha)
    return LanguageSpec(name, senone_count, latent_dim, means, covs, mixing, similarity)


def identity_domain(name: str, feature_dim: int, noise_std: float,
                    gain_range: tuple[float, float] = (1.0, 1.0)) -> DomainSpec:
    return DomainSpec(name, np.eye(feature_dim), noise_std, gain_range)


def rotation_domain(
    rng: Rng,
    name: str,
    feature_dim: int,
    angle_deg: float,
    noise_std: float,
    gain_range: tuple[float, float] = (1.0, 1.0),
) -> DomainSpec:
    """Orthogonal channel rotating floor(dim/2) random planes by a fixed angle."""
    r = rng.split(f"domain.{name}")
    gauss = r.normal((feature_dim, feature_dim))
    q, _ = np.linalg.qr(gauss)
    theta = np.deg2rad(angle_deg)
    block = np.eye(feature_dim)
    for p in range(feature_dim // 2):
        c, s = np.cos(theta), np.sin(theta)
        i, j = 2 * p, 2 * p + 1
        block[i, i], block[i, j] = c, -s
        block[j, i], block[j, j] = s, c
    return DomainSpec(name, q @ block @ q.T, noise_std, gain_range)


@dataclass
class LatentUtterance:
    utterance_id: str
    language: str
    states: np.ndarray  # (T,) int64
    latents: np.ndarray  # (T, latent_dim)


def markov_transition(senones: int, self_loop: float) -> np.ndarray:
    """Symmetric chain: stay with prob self_loop, else uniform over the rest."""
    if senones == 1:
        return np.ones((1, 1))
    off = (1.0 - self_loop) / (senones - 1)
    trans = np.full((senones, senones), off)
    np.fill_diagonal(trans, self_loop)
    return trans


def sample_latents(
    rng: Rng,
    lang: LanguageSpec,
    n_frames: int,
    mean_utt_len: int,
    id_prefix: str,
    self_loop: float = 0.8,
) -> list[LatentUtterance]:
    """Draw labeled latent utterances totalling exactly n_frames frames."""
    if n_frames < 1 or mean_utt_len < 1:
        raise ValueError("frame budget and utterance length must be positive")
    trans = markov_transition(lang.senone_count, self_loop)
    init = np.full(lang.senone_count, 1.0 / lang.senone_count)
    len_rng = rng.split("lens")
    out = []
    remaining = n_frames
    i = 0
    while remaining > 0:
        t = int(round(float(len_rng.normal((), scale=mean_utt_len / 3.0)) + mean_utt_len))
        t = max(4, min(t, remaining)) if remaining >= 4 else remaining
        u_rng = rng.split(f"utt.{i}")
        states = u_rng.split("markov").markov_path(trans, init, t)
        eps = u_rng.split("latent").normal((t, lang.latent_dim))
        z = lang.class_means[states] + np.sqrt(lang.class_covs[states]) * eps
        out.append(LatentUtterance(f"{id_prefix}-{i:05d}", lang.name, states, z))
        remaining -= t
        i += 1
    return out


def render_corpus(
    latents: list[LatentUtterance],
    lang: LanguageSpec,
    domain: DomainSpec,
    rng: Rng,
) -> Corpus:
    """Project latents through the language map and the domain channel.

    Labels are copied from the latent stream, so two renderings of the same
    stream agree on labels bit for bit.
    """
    utts = []
    lo, hi = domain.gain_range
    for i, lu in enumerate(latents):
        u_rng = rng.split(f"utt.{i}")
        clean = (lu.latents @ lang.mixing_map) @ domain.channel.T
        gain = float(u_rng.split("gain").uniform(lo, hi, ()))
        if domain.noise_std > 0:
            eps = u_rng.split("noise").normal(clean.shape)
            feats = clean + gain * domain.noise_std * eps
        else:
            feats = clean
        utts.append(
            Utterance(lu.utterance_id, lang.name, domain.name, feats, lu.states.copy())
        )
    return Corpus(utts, lang.feature_dim, lang.senone_count)


def sample_corpus(
    rng: Rng,
    lang: LanguageSpec,
    domain: DomainSpec,
    n_frames: int,
    mean_utt_len: int,
    id_prefix: str,
    self_loop: float = 0.8,
) -> Corpus:
    latents = sample_latents(
        rng.split("latent"), lang, n_frames, mean_utt_len, id_prefix, self_loop
    )
    return render_corpus(latents, lang, domain, rng.split(f"render.{domain.name}"))


# -----------------------------------------------------------------------------
# Bayes-error oracle
# -----------------------------------------------------------------------------


@dataclass
class OracleEstimate:
    error: float
    stderr: float
    n_samples: int


def bayes_oracle_error(
    lang: LanguageSpec, domain: DomainSpec, n_samples: int, rng: Rng
) -> OracleEstimate:
    """Monte-Carlo estimate of the optimal frame error under the true model.

    Samples (class, latent, gain, noise) from the generative process and
    classifies with exact class-conditional Gaussian likelihoods; the prior is
    the chain's stationary distribution (uniform).
    """
    if n_samples < 10_000:
        raise ValueError("oracle needs at least 1e4 samples")
    s = lang.senone_count
    a = lang.mixing_map @ domain.channel.T  # latent -> feature, as right factor
    feat_means = lang.class_means @ a
    # Per class: cov = A_c + (gain*noise)^2 I with A_c = a.T diag(cov_c) a.
    eigvals, eigvecs = [], []
    ridge = 1e-9
    for c in range(s):
        cov = a.T @ (lang.class_covs[c][:, None] * a)
        lam, u = np.linalg.eigh(cov)
        eigvals.append(np.maximum(lam, 0.0) + ridge)
        eigvecs.append(u)
    r = rng.split("oracle")
    classes = r.split("class").integers(0, s, n_samples)
    z_eps = r.split("latent").normal((n_samples, lang.latent_dim))
    gains = r.split("gain").uniform(domain.gain_range[0], domain.gain_range[1], n_samples)
    z = lang.class_means[classes] + np.sqrt(lang.class_covs[classes]) * z_eps
    x = z @ a
    if domain.noise_std > 0:
        x = x + (gains * domain.noise_std)[:, None] * r.split("noise").normal(x.shape)
    noise_var = (gains * domain.noise_std) ** 2
    scores = np.empty((n_samples, s))
    for c in range(s):
        y = (x - feat_means[c]) @ eigvecs[c]
        denom = eigvals[c][None, :] + noise_var[:, None]
        scores[:, c] = -0.5 * ((y * y) / denom).sum(axis=1) - 0.5 * np.log(denom).sum(axis=1)
    pred = scores.argmax(axis=1)
    err = float(np.mean(pred != classes))
    return OracleEstimate(err, float(np.sqrt(err * (1 - err) / n_samples)), n_samples)


# -----------------------------------------------------------------------------
# On-disk corpus directory format
# -----------------------------------------------------------------------------


def _write_feat(path: Path, frames: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC)
        f.write(struct.pack("<III", CORPUS_FORMAT_VERSION, frames.shape[0], frames.shape[1]))
        f.write(np.ascontiguousarray(frames, dtype="<f8").tobytes())


def _write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(_LABEL_MAGIC)
        f.write(struct.pack("<II", CORPUS_FORMAT_VERSION, labels.shape[0]))
        f.write(np.ascontiguousarray(labels, dtype="<i8").tobytes())


def _read_feat(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:4] != _FEAT_MAGIC:
        raise CorpusFormatError(f"{path}: bad feature magic")
    version, t, d = struct.unpack("<III", data[4:16])
    if version != CORPUS_FORMAT_VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    want = 16 + 8 * t * d
    if len(data) != want:
        raise CorpusFormatError(f"{path}: expected {want} bytes, found {len(data)}")
    return np.frombuffer(data[16:], dtype="<f8").reshape(t, d).copy()


def _read_labels(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:4] != _LABEL_MAGIC:
        raise CorpusFormatError(f"{path}: bad label magic")
    version, t = struct.unpack("<II", data[4:12])
    if version != CORPUS_FORMAT_VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    want = 12 + 8 * t
    if len(data) != want:
        raise CorpusFormatError(f"{path}: expected {want} bytes, found {len(data)}")
    return np.frombuffer(data[12:], dtype="<i8").copy()


def save_corpus(corpus: Corpus, directory) -> None:
    """Write manifest + per-utterance flat binary feature/label files."""
    directory = Path(directory)
    (directory / "utts").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CORPUS_FORMAT_VERSION,
        "feature_dim": corpus.feature_dim,
        "senone_count": corpus.senone_count,
        "utterances": [],
    }
    for u in corpus.utterances:
        feat_file = f"utts/{u.utterance_id}.feat"
        label_file = f"utts/{u.utterance_id}.lab"
        _write_feat(directory / feat_file, u.frames)
        _write_labels(directory / label_file, u.labels)
        manifest["utterances"].append(
            {
                "utterance_id": u.utterance_id,
                "language": u.language,
                "domain": u.domain,
                "frames": int(u.frames.shape[0]),
                "feature_file": feat_file,
                "label_file": label_file,
            }
        )
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CorpusFormatError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != CORPUS_FORMAT_VERSION:
        raise CorpusFormatError(
            f"unsupported corpus format version {manifest.get('format_version')}"
        )
    utts = []
    for rec in manifest["utterances"]:
        frames = _read_feat(directory / rec["feature_file"])
        labels = _read_labels(directory / rec["label_file"])
        if frames.shape[0] != rec["frames"] or labels.shape[0] != rec["frames"]:
            raise CorpusFormatError(
                f"{rec['utterance_id']}: frame count mismatch with manifest"
            )
        utts.append(
            Utterance(rec["utterance_id"], rec["language"], rec["domain"], frames, labels)
        )
    return Corpus(utts, manifest["feature_dim"], manifest["senone_count"])
