"""Warm-up and fine-tuning loops: multi-task training, first-order
meta-learning, per-target fine-tuning, and the cold-start baselines.

All loops share one epoch engine so that degenerate cases collapse exactly
(joint multilingual training on a single target IS fine-tuning on it, bit
for bit). Every random draw comes from a seed derived with
:func:`warmadapt.seeding.derive_seed`, so (config, seed, data) fully
determine the final parameters.

Losses are pluggable: the real training objective wraps a model and its
CTC head, while unit tests substitute a quadratic bowl whose optima are
known in closed form. An objective only needs ``live_params`` /
``param_values`` / ``set_param_values`` / ``loss_and_grads`` / ``loss``.
"""

import csv
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import ctc, metrics
from .model import group_of
from .seeding import derive_seed

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

FINETUNE_MODES = {
    "peft": frozenset({"adapter", "downstream_body", "ctc_head"}),
    "freeze_ft": frozenset({"downstream_body", "ctc_head"}),
    "full_ft": frozenset({"backbone", "downstream_body", "ctc_head"}),
}


@dataclass(frozen=True)
class AdaptationConfig:
    algorithm: str = "mtl"  # or "fomaml"
    alpha: float = 0.001  # inner-loop SGD rate
    beta: float = 0.0001  # outer-loop Adam rate
    inner_steps: int = 1
    mtl_lr: float = 0.0001
    batch_size: int = 8
    max_epochs: int = 40
    patience: int = 5
    support_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("mtl", "fomaml"):
            raise ValueError(f"algorithm must be 'mtl' or 'fomaml', got {self.algorithm!r}")
        # alpha = 0 is allowed: it degenerates the inner loop to the identity,
        # which the meta-update contract is checked against
        if self.alpha < 0 or self.beta <= 0 or self.mtl_lr <= 0:
            raise ValueError("learning rates must be positive (alpha may be 0)")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not 0.0 < self.support_fraction < 1.0:
            raise ValueError("support_fraction must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size/patience must be positive, max_epochs >= 0")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, lr):
        self.lr = float(lr)

    def step(self, params, grads):
        for name, g in grads.items():
            params[name] = params[name] - self.lr * g


class Adam:
    def __init__(self, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


class CtcObjective:
    """CTC loss of a model on (features, head-label) items.

    ``vocab`` is the sorted list of global symbol ids the head covers; the
    model's head must already be sized to it. Gradients flow to the groups
    named in ``trainable``; everything else stays frozen.
    """

    def __init__(self, model, vocab, trainable):
        if model.downstream_cfg.vocab_size != len(vocab):
            raise ValueError(
                f"head covers {model.downstream_cfg.vocab_size} symbols "
                f"but vocab has {len(vocab)}"
            )
        self.model = model
        self.vocab = list(vocab)
        self.trainable = frozenset(trainable)
        self._names = sorted(n for n in model.params if group_of(n) in self.trainable)
        self.grad_calls = 0

    def live_params(self):
        return self.model.params

    def param_values(self):
        return {n: self.model.params[n].copy() for n in self._names}

    def set_param_values(self, values):
        for n in self._names:
            self.model.params[n] = values[n].copy()

    def loss_and_grads(self, batch):
        self.grad_calls += 1
        tape = ad.Tape()
        bound = self.model.bind(tape, self.trainable)
        losses = [
            ctc.ctc_loss(self.model.forward(tape, bound, feats), labels)
            for feats, labels in batch
        ]
        total = ad.scale(ad.add_n(losses), 1.0 / len(losses))
        return float(total.data), ad.backward(tape, total)

    def loss(self, batch):
        vals = [
            ctc.forward_backward(self.model.infer(feats), labels)[0] for feats, labels in batch
        ]
        return float(np.mean(vals))


class QuadraticObjective:
    """Test hook: mean over batch items c of ½‖θ − c‖², per parameter.

    Batch items are dicts param-name -> center. The unique minimizer of a
    mixture of such bowls is the mean of the centers, which makes every
    optimizer property checkable in closed form.
    """

    def __init__(self, theta):
        self.params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in theta.items()}
        self.grad_calls = 0

    def live_params(self):
        return self.params

    def param_values(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_param_values(self, values):
        for k in self.params:
            self.params[k] = values[k].copy()

    def loss_and_grads(self, batch):
        self.grad_calls += 1
        loss = 0.0
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        for item in batch:
            for k, v in self.params.items():
                d = v - item[k]
                loss += 0.5 * float(np.sum(d * d))
                grads[k] += d
        n = len(batch)
        return loss / n, {k: g / n for k, g in grads.items()}

    def loss(self, batch):
        loss = 0.0
        for item in batch:
            for k, v in self.params.items():
                d = v - item[k]
                loss += 0.5 * float(np.sum(d * d))
        return loss / len(batch)


# ---------------------------------------------------------------------------
# vocabulary & data plumbing
# ---------------------------------------------------------------------------


def observed_vocab(data, langs):
    """Sorted union of symbol ids in the train+dev labels of ``langs``."""
    symbols = set()
    for lang in langs:
        for split in ("train", "dev"):
            for utt in data.get(lang, split):
                symbols.update(int(x) for x in utt.labels)
    if not symbols:
        raise ValueError("no labels observed; cannot build a vocabulary")
    return sorted(symbols)


def _prep(utts, vocab):
    g2h = {g: i for i, g in enumerate(vocab)}
    return [(u.features, [g2h[int(x)] for x in u.labels]) for u in utts]


def _lang_data(data, langs, vocab):
    return {
        lang: (_prep(data.get(lang, "train"), vocab), _prep(data.get(lang, "dev"), vocab))
        for lang in langs
    }


def head_seed(seed, vocab):
    """Head re-init seed depends only on (run seed, vocabulary), never on
    which code path asked — degenerate cases must collapse exactly."""
    return derive_seed("head", seed, *vocab)


def evaluate(model, vocab, data, lang, split):
    """Greedy-decode CER tally for one language/split."""
    pairs = []
    for utt in data.get(lang, split):
        hyp = [vocab[i] for i in ctc.greedy_decode(model.infer(utt.features))]
        pairs.append((tuple(int(x) for x in utt.labels), tuple(hyp)))
    return metrics.EvalReport.from_pairs(lang, split, pairs)


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------

LOG_FIELDS = ["phase", "epoch", "step", "language", "loss", "dev_loss", "wall_ms"]


@dataclass
class LogRow:
    phase: str
    epoch: int
    step: int
    language: str
    loss: float
    dev_loss: float
    wall_ms: float


def write_training_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow(
                [r.phase, r.epoch, r.step, r.language, repr(r.loss), repr(r.dev_loss), repr(r.wall_ms)]
            )


# ---------------------------------------------------------------------------
# epoch engines
# ---------------------------------------------------------------------------


def fomaml_step(objective, support, query, alpha, inner_steps, outer_opt):
    """One first-order meta step.

    Inner: ``inner_steps`` plain SGD updates at rate ``alpha`` on the
    support batch, starting from the current parameters θ. Outer: the query
    batch's gradient, taken at the adapted parameters θ', is handed to
    ``outer_opt`` and applied at θ. No second-order terms anywhere.
    Returns the query loss (the convergence signal).
    """
    theta0 = objective.param_values()
    inner = SGD(alpha)
    for _ in range(inner_steps):
        _, g = objective.loss_and_grads(support)
        adapted = objective.param_values()
        inner.step(adapted, g)
        objective.set_param_values(adapted)
    qloss, qgrad = objective.loss_and_grads(query)
    objective.set_param_values(theta0)
    outer_opt.step(objective.live_params(), qgrad)
    return qloss


def _split_batch(batch, support_fraction):
    if len(batch) < 2:
        raise ValueError("batch too small to split into support and query")
    n_support = min(max(1, round(len(batch) * support_fraction)), len(batch) - 1)
    return batch[:n_support], batch[n_support:]


def _dev_items(lang_data):
    items = []
    for lang in sorted(lang_data):
        items.extend(lang_data[lang][1])
    return items


def _run_epochs(objective, lang_data, cfg, phase, step_fn, opt):
    """Shared epoch/patience engine.

    ``step_fn(batch, rng) -> loss`` consumes one sampled batch and applies
    one update via ``opt``. Languages are sampled uniformly per step; an
    epoch is one pooled pass worth of steps. Early stopping watches the
    pooled dev loss with ``cfg.patience``; the best-dev parameters are
    restored at the end.
    """
    langs = sorted(lang_data)
    if not langs:
        raise ValueError("no languages to train on")
    rng = np.random.default_rng(derive_seed(cfg.seed, "order"))
    total_train = sum(len(tr) for tr, _ in lang_data.values())
    if total_train == 0:
        raise ValueError("no training utterances")
    steps_per_epoch = max(1, math.ceil(total_train / cfg.batch_size))
    dev_items = _dev_items(lang_data)

    rows = []
    best_dev = math.inf
    best_params = objective.param_values()
    bad_epochs = 0
    gstep = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lang_losses = {}
        for _ in range(steps_per_epoch):
            lang = langs[rng.integers(len(langs))]
            train = lang_data[lang][0]
            take = min(cfg.batch_size, len(train))
            idx = rng.choice(len(train), size=take, replace=False)
            loss = step_fn([train[i] for i in idx], rng)
            lang_losses.setdefault(lang, []).append(loss)
            gstep += 1
        dev_loss = objective.loss(dev_items) if dev_items else math.nan
        wall_ms = (time.perf_counter() - t0) * 1000.0
        for lang in sorted(lang_losses):
            rows.append(
                LogRow(
                    phase=phase,
                    epoch=epoch,
                    step=gstep,
                    language=lang,
                    loss=float(np.mean(lang_losses[lang])),
                    dev_loss=float(dev_loss),
                    wall_ms=wall_ms,
                )
            )
        if dev_items and dev_loss < best_dev:
            best_dev = dev_loss
            best_params = objective.param_values()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if dev_items and bad_epochs >= cfg.patience:
                break
    objective.set_param_values(best_params)
    return rows


def mtl_train(objective, lang_data, cfg, phase="mtl", lr=None):
    """Joint multi-task training: Adam on the mean batch loss, language
    sampled uniformly per step."""
    opt = Adam(lr if lr is not None else cfg.mtl_lr)

    def step(batch, rng):
        loss, grads = objective.loss_and_grads(batch)
        opt.step(objective.live_params(), grads)
        return loss

    return _run_epochs(objective, lang_data, cfg, phase, step, opt)


def fomaml_train(objective, lang_data, cfg, phase="fomaml"):
    """Meta training: per step, split the sampled batch into support and
    query halves and take one first-order meta step (SGD inside, Adam
    outside)."""
    opt = Adam(cfg.beta)

    def step(batch, rng):
        support, query = _split_batch(batch, cfg.support_fraction)
        return fomaml_step(objective, support, query, cfg.alpha, cfg.inner_steps, opt)

    return _run_epochs(objective, lang_data, cfg, phase, step, opt)


# ---------------------------------------------------------------------------
# public operations on models + datasets
# ---------------------------------------------------------------------------

IA_GROUPS = frozenset({"adapter", "downstream_body", "ctc_head"})


def _ia(model, data, sources, cfg, algorithm):
    if not sources:
        raise ValueError("need at least one source language")
    if model.adapter_cfg is None:
        raise ValueError("intermediate adaptation expects a model with adapters")
    vocab = observed_vocab(data, sorted(sources))
    warm = model.reinit_ctc_head(len(vocab), head_seed(cfg.seed, vocab))
    warm.head_vocab = list(vocab)
    objective = CtcObjective(warm, vocab, IA_GROUPS)
    lang_data = _lang_data(data, sorted(sources), vocab)
    if algorithm == "mtl":
        rows = mtl_train(objective, lang_data, cfg, phase="ia_mtl")
    else:
        rows = fomaml_train(objective, lang_data, cfg, phase="ia_fomaml")
    warm.phase = "post-IA"
    return warm, rows


def ia_mtl(model, data, sources, cfg):
    """Warm up adapters + downstream on the source pool by joint training.

    Returns a new model (input untouched) with the head sized to the union
    vocabulary of the sources, plus the training log.
    """
    return _ia(model, data, sources, cfg, "mtl")


def ia_fomaml(model, data, sources, cfg):
    """Warm up adapters + downstream with first-order meta-learning."""
    return _ia(model, data, sources, cfg, "fomaml")


def finetune_target(warm_model, data, target, mode, cfg):
    """Adapt to one target language and evaluate on its test split.

    Reinitializes the CTC head to the target vocabulary first (source and
    target character sets differ), then trains the parameter groups the
    mode designates: 'peft' tunes adapters + downstream, 'freeze_ft' only
    the downstream, 'full_ft' everything including the backbone. The input
    model is never mutated. Returns (model, EvalReport, log rows).
    """
    if mode not in FINETUNE_MODES:
        raise ValueError(f"unknown mode {mode!r}; pick one of {sorted(FINETUNE_MODES)}")
    groups = FINETUNE_MODES[mode]
    if "adapter" in groups and warm_model.adapter_cfg is None:
        raise ValueError("peft mode needs a model with adapters")
    vocab = observed_vocab(data, [target])
    m = warm_model.reinit_ctc_head(len(vocab), head_seed(cfg.seed, vocab))
    m.head_vocab = list(vocab)
    objective = CtcObjective(m, vocab, groups)
    rows = mtl_train(objective, _lang_data(data, [target], vocab), cfg, phase=f"finetune_{mode}")
    report = evaluate(m, vocab, data, target, "test")
    return m, report, rows


def st_mtl(model, data, sources, targets, cfg):
    """Joint multilingual training over sources plus targets, evaluated on
    each target without any per-target fine-tuning. One parameter set
    serves every target."""
    langs = sorted(set(sources) | set(targets))
    if not langs:
        raise ValueError("need at least one language")
    if model.adapter_cfg is None:
        raise ValueError("joint multilingual training expects a model with adapters")
    vocab = observed_vocab(data, langs)
    m = model.reinit_ctc_head(len(vocab), head_seed(cfg.seed, vocab))
    m.head_vocab = list(vocab)
    objective = CtcObjective(m, vocab, IA_GROUPS)
    rows = mtl_train(objective, _lang_data(data, langs, vocab), cfg, phase="st_mtl")
    reports = [evaluate(m, vocab, data, t, "test") for t in sorted(targets)]
    return m, reports, rows


def pretrain_backbone(data, pool, cfg, backbone_cfg=None, downstream_cfg=None):
    """Train a throwaway full model on the pre-training language pool and
    keep only its backbone weights. The caller grafts them into every
    later build, where they stay frozen."""
    from .model import BackboneConfig, DownstreamConfig, Model

    if not pool:
        raise ValueError("pre-training pool is empty")
    vocab = observed_vocab(data, sorted(pool))
    bb = backbone_cfg or BackboneConfig()
    ds_cfg = downstream_cfg or DownstreamConfig()
    m = Model.build(
        backbone_cfg=bb,
        downstream_cfg=replace(ds_cfg, vocab_size=len(vocab)),
        seed=derive_seed(cfg.seed, "pretrain-init"),
        with_adapters=False,
        backbone_frozen=False,
    )
    objective = CtcObjective(m, vocab, frozenset({"backbone", "downstream_body", "ctc_head"}))
    rows = mtl_train(objective, _lang_data(data, sorted(pool), vocab), cfg, phase="pretrain")
    backbone = {k: v.copy() for k, v in m.params.items() if k.startswith("bb.")}
    return backbone, rows
