"""Shared text/motion embedding space and the metrics computed in it."""

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from textmotion import checkpoint
from textmotion.errors import BadArgument, BadCorpus, DataError, EmptyCorpus, NumericalError, TooFewSamples
from textmotion.rotations import pose_rotations
from textmotion.skeleton import default_skeleton, forward_kinematics, resample_motion
from textmotion.text import HashedTextEncoder

EVAL_FRAMES = 196
# Features are metres, m/s or unitless; a degenerate training std must not amplify small deviations.
FEATURE_STD_FLOOR = 1e-2


def _heading(rot):
    """Yaw of a root rotation: angle of its facing (+z) axis in the ground plane."""
    f = rot[..., :, 2]
    return np.arctan2(f[..., 0], f[..., 2])


def _yaw_matrix(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def motion_features(motion, skeleton=None, frames=EVAL_FRAMES):
    """Fixed-length statistics of FK joint trajectories.

    The clip is resampled to ``frames`` frames and expressed in the body frame
    of its first pose (origin at the first root position, yaw removed).
    Features: per-joint position mean and std, per-joint velocity mean and
    std, final root displacement and the sine/cosine of the total heading
    change.
    """
    skeleton = skeleton or default_skeleton()
    if motion.num_frames >= 2 and motion.num_frames != frames:
        motion = resample_motion(motion, frames)
    pos, world = forward_kinematics(skeleton, motion.frames, return_rotations=True)
    yaw = _heading(world[:, 0])
    canon = _yaw_matrix(-yaw[0])
    rel = (pos - pos[0, 0]) @ canon.T
    vel = np.diff(rel, axis=0) * motion.fps if motion.num_frames > 1 else np.zeros_like(rel[:1])
    dyaw = yaw[-1] - yaw[0]
    return np.concatenate(
        [
            rel.mean(axis=0).ravel(),
            rel.std(axis=0).ravel(),
            vel.mean(axis=0).ravel(),
            vel.std(axis=0).ravel(),
            rel[-1, 0] - rel[0, 0],
            [math.sin(dyaw), math.cos(dyaw)],
        ]
    )


@dataclass
class EvaluatorConfig:
    dim: int = 64
    text_dim: int = 64
    text_seed: int = 1
    steps: int = 600
    lr: float = 3e-3
    batch_size: int = 64
    temperature: float = 0.07
    weight_decay: float = 1e-4
    seed: int = 0
    frames: int = EVAL_FRAMES


class EmbeddingProvider:
    """Motion encoder (featurizer + affine map) and text encoder (hashed tokens + affine map)."""

    def __init__(self, params, text_encoder, frames=EVAL_FRAMES, skeleton=None):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.text_encoder = text_encoder
        self.frames = frames
        self.skeleton = skeleton or default_skeleton()
        self.dim = self.params["motion_w"].shape[1]

    @classmethod
    def untrained(cls, n_features, config=None):
        config = config or EvaluatorConfig()
        rng = np.random.default_rng([config.seed, 7])
        params = {
            "feat_mean": np.zeros(n_features),
            "feat_std": np.ones(n_features),
            "motion_w": rng.standard_normal((n_features, config.dim)) / math.sqrt(n_features),
            "motion_b": np.zeros(config.dim),
            "text_w": rng.standard_normal((config.text_dim, config.dim)) / math.sqrt(config.text_dim),
            "text_b": np.zeros(config.dim),
        }
        return cls(params, HashedTextEncoder(config.text_dim, config.text_seed), config.frames)

    def features(self, motions):
        return np.stack([motion_features(m, self.skeleton, self.frames) for m in motions])

    def embed_features(self, feats):
        p = self.params
        return ((feats - p["feat_mean"]) / p["feat_std"]) @ p["motion_w"] + p["motion_b"]

    def embed_motions(self, motions):
        return self.embed_features(self.features(motions))

    def text_features(self, captions):
        return self.text_encoder.pooled(captions)

    def embed_texts(self, captions):
        return self.text_features(captions) @ self.params["text_w"] + self.params["text_b"]

    def save(self, path):
        meta = {
            "kind": "evaluator",
            "frames": self.frames,
            "text_provider": self.text_encoder.to_dict(),
            "skeleton_version": self.skeleton.version,
        }
        return checkpoint.save(path, self.params, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "evaluator":
            raise DataError(f"{path} is not an evaluator checkpoint")
        return cls(tensors, HashedTextEncoder.from_dict(meta["text_provider"]), meta["frames"])


def checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _class_labels(corpus):
    labels = []
    for m in corpus:
        fam = (m.meta or {}).get("family")
        labels.append(f"{fam}:{m.meta.get('side')}" if fam else m.caption)
    return labels


def train_evaluator(corpus, config=None, log=None):
    """Contrastively fit the two affine maps with symmetric InfoNCE on matched pairs."""
    config = config or EvaluatorConfig()
    corpus = [m for m in corpus if m.caption is not None]
    if len(set(_class_labels(corpus))) < 2:
        raise BadCorpus("evaluator training needs at least two caption classes")
    text_enc = HashedTextEncoder(config.text_dim, config.text_seed)
    base = EmbeddingProvider.untrained(1, config)
    feats = base.features(corpus)
    fmean = feats.mean(axis=0)
    fstd = np.maximum(feats.std(axis=0), FEATURE_STD_FLOOR)
    provider = EmbeddingProvider.untrained(feats.shape[1], config)
    provider.params["feat_mean"], provider.params["feat_std"] = fmean, fstd
    provider.text_encoder = text_enc

    X = torch.as_tensor((feats - fmean) / fstd, dtype=torch.float64)
    Tx = torch.as_tensor(text_enc.pooled([m.caption for m in corpus]), dtype=torch.float64)
    params = {k: torch.tensor(provider.params[k], requires_grad=True) for k in ("motion_w", "motion_b", "text_w", "text_b")}
    opt = torch.optim.AdamW(params.values(), lr=config.lr, weight_decay=config.weight_decay)
    g = torch.Generator().manual_seed(int(config.seed))
    n = X.shape[0]
    B = min(config.batch_size, n)
    for step in range(config.steps):
        idx = torch.randperm(n, generator=g)[:B]
        zm = torch.nn.functional.normalize(X[idx] @ params["motion_w"] + params["motion_b"], dim=-1)
        zt = torch.nn.functional.normalize(Tx[idx] @ params["text_w"] + params["text_b"], dim=-1)
        logits = zm @ zt.T / config.temperature
        target = torch.arange(B)
        loss = 0.5 * (torch.nn.functional.cross_entropy(logits, target) + torch.nn.functional.cross_entropy(logits.T, target))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (step % 100 == 0 or step == config.steps - 1):
            log(f"evaluator step {step} infonce={float(loss.detach()):.4f}")
    for k, v in params.items():
        provider.params[k] = v.detach().numpy().copy()
    return provider


# -- metrics ------------------------------------------------------------------


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(emb):
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise TooFewSamples("a Gaussian fit needs at least two embeddings")
    cov = np.cov(emb, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    return GaussianFit(emb.mean(axis=0), np.atleast_2d(cov))


def _psd_sqrt(mat):
    w, V = np.linalg.eigh(mat)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -1e-8 * scale:
        raise NumericalError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(a, b, jitter=1e-6):
    """Fréchet distance between two :class:`GaussianFit` objects.

    The trace of ``(cov_a cov_b)^(1/2)`` is taken as the trace of the
    symmetric ``(A^(1/2) cov_b A^(1/2))^(1/2)`` with ``A = cov_a``.
    """
    d = a.mean.shape[0]
    ca = a.cov + jitter * np.eye(d)
    cb = b.cov + jitter * np.eye(d)
    sa = _psd_sqrt(ca)
    inner = sa @ cb @ sa
    tr_sqrt = np.trace(_psd_sqrt(0.5 * (inner + inner.T)))
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    if value < -1e-6:
        raise NumericalError(f"Fréchet distance came out negative ({value:.3e})")
    return max(value, 0.0)


def fid(set_a, set_b, jitter=1e-6):
    return frechet_distance(fit_gaussian(set_a), fit_gaussian(set_b), jitter)


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def r_precision_from_embeddings(motion_emb, text_emb, captions, k=3, pool=32, seed=0, repeats=1):
    """Fraction of pools in which the true caption ranks within the top ``k``.

    Each query motion is scored against its own caption and ``pool - 1``
    distractor captions drawn (seeded, without replacement) from pairs whose
    caption text differs. Ties count against the true caption.
    """
    n = len(captions)
    m = _unit(motion_emb)
    t = _unit(text_emb)
    caps = np.asarray(captions, dtype=object)
    rng = np.random.default_rng([seed, 303])
    hits = 0
    total = 0
    for _ in range(repeats):
        for i in rng.permutation(n):
            others = np.flatnonzero(caps != caps[i])
            if len(others) < pool - 1:
                raise TooFewSamples(f"need {pool - 1} distractor captions for pair {i}, have {len(others)}")
            distract = rng.choice(others, size=pool - 1, replace=False)
            s_true = m[i] @ t[i]
            s_dis = t[distract] @ m[i]
            rank = int(np.sum(s_dis >= s_true))
            hits += rank < k
            total += 1
    return hits / total


def r_precision(provider, pairs, k=3, batch=32, seed=0, repeats=1):
    """R-Precision over ``(motion, caption)`` pairs; motions are resampled by the provider."""
    if len(pairs) < batch:
        raise TooFewSamples(f"R-Precision needs at least {batch} pairs, got {len(pairs)}")
    motions = [m for m, _ in pairs]
    captions = [c for _, c in pairs]
    return r_precision_from_embeddings(
        provider.embed_motions(motions), provider.embed_texts(captions), captions, k, batch, seed, repeats
    )


def diversity(embeddings, pairs=300, seed=0):
    """Mean Euclidean distance over ``pairs`` seeded random index pairs ``i != j``."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    if n < 2:
        raise TooFewSamples("diversity needs at least two embeddings")
    rng = np.random.default_rng([seed, 404])
    i = rng.integers(0, n, size=pairs)
    j = (i + rng.integers(1, n, size=pairs)) % n
    return float(np.linalg.norm(emb[i] - emb[j], axis=-1).mean())


def rank_by_cosine(query, corpus, k):
    """``[(index, similarity)]`` of the ``k`` most similar rows, ties by index."""
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise EmptyCorpus("nearest-neighbor search over an empty corpus")
    if not 1 <= k <= corpus.shape[0]:
        raise BadArgument(f"k must lie in [1, {corpus.shape[0]}], got {k}")
    sims = _unit(corpus) @ _unit(query)
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    return [(int(i), float(sims[i])) for i in order]


def nearest_neighbors(provider, corpus, k=6, query_text=None, query_motion=None, against=None):
    """Rank corpus items by cosine similarity to a text or motion query.

    ``against`` selects which side of the corpus is compared: ``"motion"``
    (corpus clips) or ``"text"`` (corpus captions). It defaults to the
    query's own modality.
    """
    if (query_text is None) == (query_motion is None):
        raise BadArgument("give exactly one of query_text or query_motion")
    if not corpus:
        raise EmptyCorpus("nearest-neighbor search over an empty corpus")
    if query_text is not None:
        q = provider.embed_texts([query_text])[0]
        against = against or "text"
    else:
        q = provider.embed_motions([query_motion])[0]
        against = against or "motion"
    if against == "text":
        items = [m for m in corpus if m.caption is not None]
        idx_map = [i for i, m in enumerate(corpus) if m.caption is not None]
        emb = provider.embed_texts([m.caption for m in items])
    elif against == "motion":
        idx_map = list(range(len(corpus)))
        emb = provider.embed_motions(corpus)
    else:
        raise BadArgument(f"against must be 'motion' or 'text', got {against!r}")
    return [(idx_map[i], s) for i, s in rank_by_cosine(q, emb, k)]


def mean_ci95(values):
    """Mean and the half-width of a normal-approximation 95% confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std() / math.sqrt(len(v)))
