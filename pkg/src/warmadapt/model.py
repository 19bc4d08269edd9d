"""Frozen-backbone recognizer with inserted adapters and a CTC head.

The parameter set splits into a backbone encoder (pre-trained once, then
frozen), bottleneck adapters spliced into each backbone block, and a
downstream transformer ending in a per-language CTC head. Training loops
choose which groups receive gradients; the forward graph is identical
either way, so gradients always flow *through* frozen weights.

Checkpoints are .npz archives: a JSON metadata entry (configs, partition
tags, format version) plus one array entry per parameter.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1

GROUPS = ("backbone", "adapter", "downstream_body", "ctc_head")


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    input_dim: int = 20

    def __post_init__(self):
        if min(self.num_blocks, self.hidden_dim, self.ffn_dim, self.num_heads, self.input_dim) < 1:
            raise ValueError("all backbone dims must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck_dim: int = 4

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ValueError("bottleneck_dim must be positive")


@dataclass(frozen=True)
class DownstreamConfig:
    num_blocks: int = 2
    hidden_dim: int = 16
    vocab_size: int = 12  # excluding blank
    num_heads: int = 2
    ffn_dim: int | None = None  # None -> 2 * hidden_dim

    def __post_init__(self):
        if min(self.num_blocks, self.hidden_dim, self.vocab_size, self.num_heads) < 1:
            raise ValueError("all downstream dims must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")

    @property
    def ffn(self):
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.hidden_dim


@lru_cache(maxsize=64)
def _posenc(T, d):
    """Sinusoidal position table, cached and read-only."""
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


def _linear_init(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def _block_params(rng, prefix, hidden, ffn, out):
    out[f"{prefix}.ln1.g"] = np.ones(hidden)
    out[f"{prefix}.ln1.b"] = np.zeros(hidden)
    for w in ("Wq", "Wk", "Wv", "Wo"):
        out[f"{prefix}.attn.{w}"] = _linear_init(rng, hidden, hidden)
        out[f"{prefix}.attn.{w.replace('W', 'b')}"] = np.zeros(hidden)
    out[f"{prefix}.ln2.g"] = np.ones(hidden)
    out[f"{prefix}.ln2.b"] = np.zeros(hidden)
    out[f"{prefix}.ffn.W1"] = _linear_init(rng, hidden, ffn)
    out[f"{prefix}.ffn.b1"] = np.zeros(ffn)
    out[f"{prefix}.ffn.W2"] = _linear_init(rng, ffn, hidden)
    out[f"{prefix}.ffn.b2"] = np.zeros(hidden)


def _head_params(rng, hidden, vocab_size):
    return {
        "head.W": _linear_init(rng, hidden, vocab_size + 1),
        "head.b": np.zeros(vocab_size + 1),
    }


def group_of(name):
    """Partition tag for a parameter name."""
    if name.startswith("bb."):
        return "backbone"
    if name.startswith("ad."):
        return "adapter"
    if name.startswith("head."):
        return "ctc_head"
    if name.startswith("ds."):
        return "downstream_body"
    raise ValueError(f"parameter {name!r} matches no partition group")


class Model:
    """Parameter store plus the forward-graph builder.

    One training loop mutates a model at a time; snapshots (``clone``) may
    be evaluated concurrently.
    """

    def __init__(self, backbone_cfg, adapter_cfg, downstream_cfg, params, backbone_frozen=True):
        self.backbone_cfg = backbone_cfg
        self.adapter_cfg = adapter_cfg  # None -> no adapters in the graph
        self.downstream_cfg = downstream_cfg
        self.params = params
        self.backbone_frozen = backbone_frozen
        self.phase = None  # free-form tag carried by checkpoints (e.g. "post-IA")
        self.head_vocab = None  # global symbol ids the head rows map to, once trained

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, backbone_cfg=None, adapter_cfg=None, downstream_cfg=None, seed=0,
              with_adapters=True, backbone_frozen=True):
        """Deterministic random init. Adapter up-projections start at zero,
        so a fresh model computes exactly the adapter-free function."""
        bb = backbone_cfg or BackboneConfig()
        ds = downstream_cfg or DownstreamConfig()
        adp = (adapter_cfg or AdapterConfig()) if with_adapters else None
        # independent stream per section, so toggling adapters off leaves
        # every other parameter draw untouched
        rng_bb, rng_ad, rng_ds, rng_head = (np.random.default_rng((seed, k)) for k in range(4))
        p = {}
        p["bb.in.W"] = _linear_init(rng_bb, bb.input_dim, bb.hidden_dim)
        p["bb.in.b"] = np.zeros(bb.hidden_dim)
        for i in range(bb.num_blocks):
            _block_params(rng_bb, f"bb.{i}", bb.hidden_dim, bb.ffn_dim, p)
        p["bb.ln.g"] = np.ones(bb.hidden_dim)
        p["bb.ln.b"] = np.zeros(bb.hidden_dim)
        if adp is not None:
            if adp.bottleneck_dim >= bb.hidden_dim:
                raise ValueError("bottleneck_dim must be smaller than backbone hidden_dim")
            for i in range(bb.num_blocks):
                p[f"ad.{i}.down.W"] = _linear_init(rng_ad, bb.hidden_dim, adp.bottleneck_dim)
                p[f"ad.{i}.down.b"] = np.zeros(adp.bottleneck_dim)
                p[f"ad.{i}.up.W"] = np.zeros((adp.bottleneck_dim, bb.hidden_dim))
                p[f"ad.{i}.up.b"] = np.zeros(bb.hidden_dim)
        p["ds.in.W"] = _linear_init(rng_ds, bb.hidden_dim, ds.hidden_dim)
        p["ds.in.b"] = np.zeros(ds.hidden_dim)
        for i in range(ds.num_blocks):
            _block_params(rng_ds, f"ds.{i}", ds.hidden_dim, ds.ffn, p)
        p["ds.ln.g"] = np.ones(ds.hidden_dim)
        p["ds.ln.b"] = np.zeros(ds.hidden_dim)
        p.update(_head_params(rng_head, ds.hidden_dim, ds.vocab_size))
        params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in p.items()}
        return cls(bb, adp, ds, params, backbone_frozen=backbone_frozen)

    def clone(self):
        m = Model(
            self.backbone_cfg,
            self.adapter_cfg,
            self.downstream_cfg,
            {k: v.copy() for k, v in self.params.items()},
            backbone_frozen=self.backbone_frozen,
        )
        m.phase = self.phase
        m.head_vocab = list(self.head_vocab) if self.head_vocab is not None else None
        return m

    def reinit_ctc_head(self, new_vocab_size, seed):
        """Fresh randomly-initialized head for a (possibly different) vocab;
        every non-head parameter is carried over bit-identically."""
        if new_vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        out = self.clone()
        rng = np.random.default_rng(seed)
        out.params.update(
            {k: np.ascontiguousarray(v) for k, v in
             _head_params(rng, self.downstream_cfg.hidden_dim, new_vocab_size).items()}
        )
        cfg = asdict(self.downstream_cfg)
        cfg["vocab_size"] = int(new_vocab_size)
        out.downstream_cfg = DownstreamConfig(**cfg)
        out.head_vocab = None  # stale mapping; the new head means nothing yet
        return out

    # -- forward graph ------------------------------------------------------

    def bind(self, tape, trainable=frozenset()):
        """Attach every parameter to a tape, marking the given groups
        trainable. The frozen backbone cannot be marked trainable."""
        trainable = frozenset(trainable)
        unknown = trainable - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        if "backbone" in trainable and self.backbone_frozen:
            raise ValueError("backbone is frozen; build with backbone_frozen=False to tune it")
        return {
            name: tape.param(name, value, trainable=group_of(name) in trainable)
            for name, value in self.params.items()
        }

    def _attention(self, b, prefix, h, T, hidden, heads):
        hd = hidden // heads
        q = ad.bias_add(ad.matmul(h, b[f"{prefix}.attn.Wq"]), b[f"{prefix}.attn.bq"])
        k = ad.bias_add(ad.matmul(h, b[f"{prefix}.attn.Wk"]), b[f"{prefix}.attn.bk"])
        v = ad.bias_add(ad.matmul(h, b[f"{prefix}.attn.Wv"]), b[f"{prefix}.attn.bv"])

        def split(x):  # (T, hidden) -> (heads, T, head_dim)
            return ad.swapaxes(ad.reshape(x, (T, heads, hd)), 0, 1)

        scores = ad.scale(ad.matmul(split(q), ad.swapaxes(split(k), 1, 2)), 1.0 / np.sqrt(hd))
        ctx = ad.matmul(ad.softmax(scores), split(v))
        ctx = ad.reshape(ad.swapaxes(ctx, 0, 1), (T, hidden))
        return ad.bias_add(ad.matmul(ctx, b[f"{prefix}.attn.Wo"]), b[f"{prefix}.attn.bo"])

    def _ffn(self, b, prefix, h):
        u = ad.gelu(ad.bias_add(ad.matmul(h, b[f"{prefix}.ffn.W1"]), b[f"{prefix}.ffn.b1"]))
        return ad.bias_add(ad.matmul(u, b[f"{prefix}.ffn.W2"]), b[f"{prefix}.ffn.b2"])

    def _block(self, b, prefix, h, T, hidden, heads, adapter=None):
        ln1 = ad.layer_norm(h, b[f"{prefix}.ln1.g"], b[f"{prefix}.ln1.b"])
        h = ad.add(h, self._attention(b, prefix, ln1, T, hidden, heads))
        ln2 = ad.layer_norm(h, b[f"{prefix}.ln2.g"], b[f"{prefix}.ln2.b"])
        u = self._ffn(b, prefix, ln2)
        if adapter is not None:
            # bottleneck with internal residual; zero-init up-projection
            # means this starts as the identity
            z = ad.gelu(ad.bias_add(ad.matmul(u, b[f"{adapter}.down.W"]), b[f"{adapter}.down.b"]))
            u = ad.add(u, ad.bias_add(ad.matmul(z, b[f"{adapter}.up.W"]), b[f"{adapter}.up.b"]))
        return ad.add(h, u)

    def forward(self, tape, bound, features):
        """Log-probabilities (T, vocab+1) for one utterance of T frames."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"features must be (T>=1, input_dim), got {x.shape}")
        bb, ds = self.backbone_cfg, self.downstream_cfg
        if x.shape[1] != bb.input_dim:
            raise ValueError(f"feature dim {x.shape[1]} != input_dim {bb.input_dim}")
        T = x.shape[0]

        h = ad.bias_add(ad.matmul(tape.const(x), bound["bb.in.W"]), bound["bb.in.b"])
        h = ad.add(h, tape.const(_posenc(T, bb.hidden_dim)))
        for i in range(bb.num_blocks):
            adapter = f"ad.{i}" if self.adapter_cfg is not None else None
            h = self._block(bound, f"bb.{i}", h, T, bb.hidden_dim, bb.num_heads, adapter)
        h = ad.layer_norm(h, bound["bb.ln.g"], bound["bb.ln.b"])

        h = ad.bias_add(ad.matmul(h, bound["ds.in.W"]), bound["ds.in.b"])
        h = ad.add(h, tape.const(_posenc(T, ds.hidden_dim)))
        for i in range(ds.num_blocks):
            h = self._block(bound, f"ds.{i}", h, T, ds.hidden_dim, ds.num_heads)
        h = ad.layer_norm(h, bound["ds.ln.g"], bound["ds.ln.b"])
        logits = ad.bias_add(ad.matmul(h, bound["head.W"]), bound["head.b"])
        return ad.log_softmax(logits)

    def infer(self, features):
        """Forward pass without gradient bookkeeping; returns an ndarray."""
        tape = ad.Tape()
        return self.forward(tape, self.bind(tape), features).data

    # -- reporting & identity -----------------------------------------------

    def param_counts(self):
        counts = dict.fromkeys(GROUPS, 0)
        for name, v in self.params.items():
            counts[group_of(name)] += v.size
        return {g: c for g, c in counts.items() if c or g != "adapter"}

    def param_report(self):
        return percent_table(self.param_counts())

    def tunable_fraction(self):
        """Percent of all parameters a default training loop may update
        (everything outside the frozen backbone)."""
        counts = self.param_counts()
        total = sum(counts.values())
        tunable = sum(c for g, c in counts.items() if not (g == "backbone" and self.backbone_frozen))
        return 100.0 * tunable / total

    def group_hash(self, group):
        """SHA-256 over a partition group's arrays (name, shape, bytes);
        the before/after witness that frozen really means frozen."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            if group_of(name) != group:
                continue
            v = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()

    # -- checkpoint io ------------------------------------------------------

    def save(self, path, phase=None):
        meta = {
            "version": CHECKPOINT_VERSION,
            "backbone": asdict(self.backbone_cfg),
            "adapter": asdict(self.adapter_cfg) if self.adapter_cfg else None,
            "downstream": asdict(self.downstream_cfg),
            "backbone_frozen": self.backbone_frozen,
            "phase": phase if phase is not None else self.phase,
            "head_vocab": self.head_vocab,
            "partition": {name: group_of(name) for name in sorted(self.params)},
        }
        arrays = {f"p::{name}": v for name, v in self.params.items()}
        np.savez_compressed(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            if "meta" not in z:
                raise ValueError("not a model checkpoint: missing metadata entry")
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(
                    f"checkpoint version {meta.get('version')!r} not supported "
                    f"(expected {CHECKPOINT_VERSION})"
                )
            params = {k[3:]: np.ascontiguousarray(z[k]) for k in z.files if k.startswith("p::")}
        m = cls(
            BackboneConfig(**meta["backbone"]),
            AdapterConfig(**meta["adapter"]) if meta["adapter"] else None,
            DownstreamConfig(**meta["downstream"]),
            params,
            backbone_frozen=meta["backbone_frozen"],
        )
        m.phase = meta.get("phase")
        m.head_vocab = meta.get("head_vocab")
        return m


def save_backbone(path, backbone):
    """Persist a backbone-only parameter set (output of pretraining)."""
    bad = [k for k in backbone if not k.startswith("bb.")]
    if bad:
        raise ValueError(f"not backbone parameters: {bad}")
    meta = {"version": CHECKPOINT_VERSION, "kind": "backbone"}
    np.savez_compressed(
        path,
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        **{f"p::{k}": v for k, v in backbone.items()},
    )


def load_backbone(path):
    with np.load(path) as z:
        if "meta" not in z:
            raise ValueError("not a backbone checkpoint: missing metadata entry")
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("kind") != "backbone" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a supported backbone checkpoint")
        return {k[3:]: np.ascontiguousarray(z[k]) for k in z.files if k.startswith("p::")}


def percent_table(counts):
    """Rows of (group, count, percent-of-total) from raw group counts.

    Percentages are of the grand total over every group, the usual
    adapter-literature convention. E.g. a 95M frozen encoder with a 0.7M
    adapter and a 4.6M downstream stack reports 0.7% adapter and 4.6%
    downstream (both over the 100.3M total), not fractions of the encoder
    alone.
    """
    total = sum(counts.values())
    if total <= 0:
        raise ValueError("no parameters to report")
    return [(g, int(c), 100.0 * c / total) for g, c in counts.items()]
