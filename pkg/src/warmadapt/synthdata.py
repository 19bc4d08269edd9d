"""Synthetic tree-structured "languages" and their datasets.

Each node of a language tree owns a latent matrix (one row per global
symbol). A leaf language's emission prototypes are the sum of the latent
matrices along its root path plus a small leaf-specific perturbation, so
languages that share deep branches emit similar frames — tree distance
orders transfer difficulty by construction.

Utterances are label sequences over the language's alphabet, each symbol
emitted for a few noisy frames, with one separator frame before every
symbol and after the last. That layout guarantees T >= 2U+1 frames for U
labels, so every utterance admits a CTC alignment.

On disk a dataset is one JSON-lines file per language and split plus a
vocab.json mapping global symbol index -> glyph.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_seed

PROFILES = {"ten_min": 64, "one_hour": 384}
DEV_UTTS = 32
TEST_UTTS = 64


@dataclass(frozen=True)
class GenConfig:
    input_dim: int = 20
    global_vocab: int = 26
    alphabet_size: int = 10
    latent_scale: float = 1.0
    leaf_scale: float = 0.3
    noise_scale: float = 0.25
    repeat_min: int = 1
    repeat_max: int = 3

    def __post_init__(self):
        if self.alphabet_size > self.global_vocab:
            raise ValueError("alphabet_size cannot exceed the global vocabulary")
        if not (1 <= self.repeat_min <= self.repeat_max):
            raise ValueError("repeat range must satisfy 1 <= min <= max")
        if min(self.input_dim, self.global_vocab, self.alphabet_size) < 1:
            raise ValueError("dims must be positive")
        if self.noise_scale < 0 or self.latent_scale <= 0 or self.leaf_scale < 0:
            raise ValueError("scales must be non-negative (latent_scale positive)")


@dataclass(frozen=True)
class LengthConfig:
    min_labels: int = 3
    max_labels: int = 6

    def __post_init__(self):
        if not (1 <= self.min_labels <= self.max_labels):
            raise ValueError("label length range must satisfy 1 <= min <= max")


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    code: str
    alphabet: tuple  # sorted global symbol indices
    prototypes: np.ndarray  # (len(alphabet), input_dim), row i for alphabet[i]
    noise_scale: float
    repeat_min: int
    repeat_max: int

    def __post_init__(self):
        if len(self.alphabet) == 0:
            raise ValueError("alphabet must be non-empty")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("prototypes must be finite")


def generate_family(tree, seed, gen_cfg=None):
    """One SyntheticLanguageSpec per leaf of ``tree``, keyed by code."""
    cfg = gen_cfg or GenConfig()
    latents = {}

    def latent(nid):
        if nid not in latents:
            rng = np.random.default_rng(derive_seed(seed, "latent", nid))
            latents[nid] = rng.normal(0.0, cfg.latent_scale, size=(cfg.global_vocab, cfg.input_dim))
        return latents[nid]

    specs = {}
    for code in tree.leaf_codes():
        leaf = tree.node_id(code)
        # internal nodes on the root path (the leaf's own variation is the
        # perturbation below, at a smaller scale)
        path = []
        nid = tree.node(leaf).parent
        while nid is not None:
            path.append(nid)
            nid = tree.node(nid).parent
        base = sum((latent(n) for n in path), np.zeros((cfg.global_vocab, cfg.input_dim)))
        rng = np.random.default_rng(derive_seed(seed, "leaf", code))
        table = base + rng.normal(0.0, cfg.leaf_scale, size=base.shape)
        alphabet = tuple(sorted(rng.choice(cfg.global_vocab, size=cfg.alphabet_size, replace=False).tolist()))
        specs[code] = SyntheticLanguageSpec(
            code=code,
            alphabet=alphabet,
            prototypes=np.ascontiguousarray(table[list(alphabet)]),
            noise_scale=cfg.noise_scale,
            repeat_min=cfg.repeat_min,
            repeat_max=cfg.repeat_max,
        )
    return specs


def sample_utterance(spec, seed, length_cfg=None):
    """(features, labels) for one utterance; labels are global symbol ids."""
    lcfg = length_cfg or LengthConfig()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lcfg.min_labels, lcfg.max_labels + 1))
    picks = rng.integers(0, len(spec.alphabet), size=n)
    labels = [int(spec.alphabet[i]) for i in picks]
    dim = spec.prototypes.shape[1]
    frames = []
    for i in range(n):
        frames.append(np.zeros(dim))  # separator
        k = int(rng.integers(spec.repeat_min, spec.repeat_max + 1))
        frames.extend(spec.prototypes[picks[i]] for _ in range(k))
    frames.append(np.zeros(dim))
    feats = np.stack(frames)
    if spec.noise_scale > 0:
        feats = feats + rng.normal(0.0, spec.noise_scale, size=feats.shape)
    return feats, labels


@dataclass
class Utterance:
    lang: str
    split: str
    labels: list
    features: np.ndarray


@dataclass
class Dataset:
    profile: str
    data: dict = field(default_factory=dict)  # (lang, split) -> [Utterance]

    def get(self, lang, split):
        try:
            return self.data[(lang, split)]
        except KeyError:
            raise KeyError(f"no utterances for language {lang!r} split {split!r}") from None

    def languages(self):
        return sorted({lang for lang, _ in self.data})

    def add(self, utt):
        self.data.setdefault((utt.lang, utt.split), []).append(utt)


def make_dataset(specs, profile, seed, length_cfg=None):
    """Datasets for every language in ``specs`` at the given size profile.

    Split sizes: train 64 (ten_min) or 384 (one_hour, the 6x analog of
    10 vs 60 minutes), dev 32, test 64. Each utterance draws from its own
    seed stream keyed by (seed, language, split, index), so splits are
    disjoint by construction.
    """
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    sizes = {"train": PROFILES[profile], "dev": DEV_UTTS, "test": TEST_UTTS}
    ds = Dataset(profile=profile)
    for code in sorted(specs):
        spec = specs[code]
        for split, count in sizes.items():
            for i in range(count):
                feats, labels = sample_utterance(
                    spec, derive_seed(seed, code, split, i), length_cfg
                )
                ds.add(Utterance(lang=code, split=split, labels=labels, features=feats))
    return ds


# -- disk format -------------------------------------------------------------


def glyph(index):
    return chr(ord("a") + index) if index < 26 else f"u{index}"


def save_dataset(ds, outdir, global_vocab=26):
    os.makedirs(outdir, exist_ok=True)
    for (lang, split), utts in sorted(ds.data.items()):
        path = os.path.join(outdir, f"{lang}.{split}.jsonl")
        with open(path, "w", encoding="utf-8") as f:
            for u in utts:
                f.write(
                    json.dumps(
                        {
                            "lang": u.lang,
                            "split": u.split,
                            "labels": [int(x) for x in u.labels],
                            "features": u.features.tolist(),
                        }
                    )
                )
                f.write("\n")
    with open(os.path.join(outdir, "vocab.json"), "w", encoding="utf-8") as f:
        json.dump({str(i): glyph(i) for i in range(global_vocab)}, f, indent=1)
    with open(os.path.join(outdir, "profile.json"), "w", encoding="utf-8") as f:
        json.dump({"profile": ds.profile}, f)


def load_dataset(indir, languages=None, splits=None):
    try:
        with open(os.path.join(indir, "profile.json"), encoding="utf-8") as f:
            profile = json.load(f)["profile"]
    except FileNotFoundError:
        profile = "unknown"
    ds = Dataset(profile=profile)
    for name in sorted(os.listdir(indir)):
        if not name.endswith(".jsonl"):
            continue
        lang, split, _ = name.rsplit(".", 2)
        if languages is not None and lang not in languages:
            continue
        if splits is not None and split not in splits:
            continue
        with open(os.path.join(indir, name), encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                ds.add(
                    Utterance(
                        lang=rec["lang"],
                        split=rec["split"],
                        labels=list(rec["labels"]),
                        features=np.asarray(rec["features"], dtype=np.float64),
                    )
                )
    return ds
