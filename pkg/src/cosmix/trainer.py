"""Training: batch composition, the combined loss, Adam, evaluation.

Every random draw derives from (seed, epoch, batch, row, stream)
counters, so runs are reproducible regardless of scheduling, and modes
nest exactly: with the contrastive weight at zero the computation is
bit-identical to plain mixup, and with the mix ratio at zero mixup is
bit-identical to the baseline.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, BetaParams, mixup_waveforms, sample_beta, \
    spec_augment, time_shift, time_stretch
from .dataset import KEYWORDS, load_wav, pad_or_trim
from .errors import ContractError, DatasetError, NumericError
from .features import FBankSpec, log_fbank_batch, log_fbank_cached
from .model import Checkpoint, ModelConfig, classifier_forward, encoder_forward, \
    init_params, projector_forward, save_checkpoint

MODES = ("baseline", "mixup", "cosmix")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 70
    lr0: float = 5e-3
    decay_rate: float = 0.85
    decay_every: int = 4
    decay_start_epoch: int = 5
    decay_end_epoch: int = 70
    beta_penalty: float = 0.5
    alpha: float = 10.0
    mix_ratio: float = 0.5
    cls_loss: str = "softmax_ce"
    seed: int = 0

    def __post_init__(self):
        if self.beta_penalty < 0:
            raise ValueError("beta_penalty must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.cls_loss not in ("softmax_ce", "sigmoid_bce"):
            raise ValueError(f"unknown cls_loss {self.cls_loss!r}")
        BetaParams(self.alpha, self.mix_ratio)

    @property
    def beta_params(self):
        return BetaParams(self.alpha, self.mix_ratio)


@dataclass
class MixedBatch:
    """Features of the mixed view plus the two pre-mix views and labels.

    For non-mixed rows source j == source i, lambda is recorded as 1,
    and the two pre-mix views are independent augmentations of the same
    clip. ``feats_i``/``feats_j`` are None when the caller skips them.
    """

    feats_mix: np.ndarray
    feats_i: np.ndarray | None
    feats_j: np.ndarray | None
    y_i: np.ndarray
    y_j: np.ndarray
    lambdas: np.ndarray
    is_mixed: np.ndarray


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m={n: np.zeros_like(t.values) for n, t in params.items()},
                   v={n: np.zeros_like(t.values) for n, t in params.items()})


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss_mix: float
    loss_cos: float
    loss_total: float
    train_acc: float
    val_acc: float
    lr: float
    seconds: float

    def to_json_line(self):
        return json.dumps({"epoch": self.epoch, "loss_mix": self.loss_mix,
                           "loss_cos": self.loss_cos, "loss_total": self.loss_total,
                           "train_acc": self.train_acc, "val_acc": self.val_acc,
                           "lr": self.lr, "seconds": self.seconds})


@dataclass
class TrainResult:
    history: list
    batch_losses: list  # one list of per-batch total losses per epoch
    best_epoch: int
    best_val_acc: float
    params: ad.ParameterSet
    best_values: dict


class ClipStore:
    """Loads and caches padded waveforms and evaluation features."""

    def __init__(self, manifest, spec=FBankSpec()):
        self.manifest = manifest
        self.spec = spec
        self._waves = {}
        self._eval_feats = {}

    def wave(self, entry):
        cached = self._waves.get(entry.path)
        if cached is None:
            clip = pad_or_trim(load_wav(entry.path, root=self.manifest.root))
            cached = self._waves[entry.path] = clip.samples
        return cached

    def eval_features(self, entry):
        cached = self._eval_feats.get(entry.path)
        if cached is None:
            values = log_fbank_cached(self.wave(entry), self.spec).values
            cached = self._eval_feats[entry.path] = values.astype(np.float32)
        return cached


def one_hot(label):
    v = np.zeros(len(KEYWORDS))
    v[label] = 1.0
    return v


def _augment_wave(wave, rng, aug_cfg):
    return time_stretch(time_shift(wave, rng, aug_cfg), rng, aug_cfg)


def _augment_view(wave, rng, aug_cfg, spec):
    values = log_fbank_cached(_augment_wave(wave, rng, aug_cfg), spec).values
    return spec_augment(values, rng, aug_cfg)


def compose_batch(store, indices, cfg, aug_cfg=AugmentConfig(), spec=FBankSpec(),
                  epoch=1, batch_idx=0, with_views=True):
    """Build one MixedBatch; deterministic given (seed, epoch, batch index).

    ``indices`` selects the i-side clips from the train split; partners
    are drawn uniformly from the whole train split excluding i. Each of
    the (up to) three views per row owns its own generator, consumed by
    shift, stretch, then masking; featurization draws nothing, so all
    views can share one batched filterbank pass.
    """
    entries = store.manifest.split_entries("train")
    n = len(entries)
    if n < 2:
        raise DatasetError(f"need >= 2 train entries, found {n}")
    b = len(indices)
    n_views = 3 if with_views else 1
    waves = np.empty((n_views, b, len(store.wave(entries[0]))))
    rngs = [[None] * b for _ in range(n_views)]
    y_i = np.empty((b, len(KEYWORDS)))
    y_j = np.empty((b, len(KEYWORDS)))
    lambdas = np.empty(b)
    is_mixed = np.empty(b, dtype=bool)
    beta = cfg.beta_params

    for row, i_idx in enumerate(indices):
        i_idx = int(i_idx)
        key = [cfg.seed, epoch, batch_idx, row]
        rng = np.random.default_rng(key + [0])
        mixed = bool(rng.random() < cfg.mix_ratio)
        if mixed:
            j_idx = int(rng.integers(0, n - 1))
            if j_idx >= i_idx:
                j_idx += 1
            lam = sample_beta(beta, rng)
        else:
            j_idx = i_idx
            lam = 1.0
        wave_i = store.wave(entries[i_idx])
        wave_j = store.wave(entries[j_idx])
        view_waves = (mixup_waveforms(wave_i, wave_j, lam), wave_i, wave_j)
        for v in range(n_views):
            rngs[v][row] = np.random.default_rng(key + [v + 1])
            waves[v, row] = _augment_wave(view_waves[v], rngs[v][row], aug_cfg)
        y_i[row] = one_hot(entries[i_idx].label)
        y_j[row] = one_hot(entries[j_idx].label)
        lambdas[row] = lam
        is_mixed[row] = mixed

    feats = log_fbank_batch(waves.reshape(n_views * b, -1), spec, dtype=np.float32)
    feats = feats.reshape(n_views, b, *feats.shape[1:])
    for v in range(n_views):
        for row in range(b):
            feats[v, row] = spec_augment(feats[v, row], rngs[v][row], aug_cfg)
    return MixedBatch(feats[0],
                      feats[1] if with_views else None,
                      feats[2] if with_views else None,
                      y_i, y_j, lambdas, is_mixed)


# ---------------------------------------------------------------------------
# losses

def _rowwise_loss(cls_loss):
    if cls_loss == "softmax_ce":
        return ad.softmax_cross_entropy_rowwise
    if cls_loss == "sigmoid_bce":
        return ad.sigmoid_bce_rowwise
    raise ValueError(f"unknown cls_loss {cls_loss!r}")


def loss_mix(logits, y_i, y_j, lambdas, cls_loss="softmax_ce"):
    """Batch mean of lam * CE(logits, y_i) + (1 - lam) * CE(logits, y_j)."""
    rows = _rowwise_loss(cls_loss)
    dtype = logits.values.dtype if isinstance(logits, ad.Tensor) else np.float64
    lam = ad.Tensor(np.asarray(lambdas, dtype=dtype))
    one_minus = ad.Tensor(1.0 - np.asarray(lambdas, dtype=dtype))
    ce_i = rows(logits, ad.Tensor(np.asarray(y_i, dtype=dtype)))
    ce_j = rows(logits, ad.Tensor(np.asarray(y_j, dtype=dtype)))
    return ad.mean_all(ad.add(ad.mul(lam, ce_i), ad.mul(one_minus, ce_j)))


def loss_cos(proj_mix, proj_r):
    """Per-row negative cosine between projections; wrap proj_r in
    stop_gradient first so the pre-mixed branch stays a fixed target."""
    return ad.scale(ad.cosine_similarity(proj_mix, proj_r), -1.0)


def lambda_weight(lam, is_mixed):
    """Contrastive weights for one row: (lam, 1 - lam) when two sources
    were mixed, a single weight of 1 otherwise."""
    if is_mixed:
        return (float(lam), 1.0 - float(lam))
    return (1.0,)


def _project_views(both, params, tracked):
    """One [2B] forward through encoder and projector for the two views."""
    if tracked:
        proj = projector_forward(encoder_forward(ad.Tensor(both), params), params)
        return ad.stop_gradient(proj).values
    with ad.pause_recording():
        return projector_forward(encoder_forward(ad.Tensor(both), params),
                                 params).values


def target_projections(batch, params):
    """Plain-forward projections of the two pre-mix views (no recording)."""
    dtype = next(iter(params.tensors())).values.dtype
    both = np.concatenate([batch.feats_i, batch.feats_j]).astype(dtype, copy=False)
    vals = _project_views(both, params, tracked=False)
    b = batch.feats_i.shape[0]
    return vals[:b], vals[b:]


def total_loss(batch, params, cfg, track_targets=False, frozen_targets=None):
    """Combined loss: classification on the mixed view plus the weighted
    contrastive pull toward each (stop-gradient) pre-mixed projection.

    ``frozen_targets`` pins the target projections to precomputed values,
    which is what a finite-difference oracle of the stop-gradient loss
    needs. Returns (scalar tensor, logits tensor, component dict).
    """
    dtype = next(iter(params.tensors())).values.dtype
    feats_mix = ad.Tensor(batch.feats_mix.astype(dtype, copy=False))
    emb = encoder_forward(feats_mix, params)
    logits = classifier_forward(emb, params)
    l_mix = loss_mix(logits, batch.y_i, batch.y_j, batch.lambdas, cfg.cls_loss)

    parts = {"loss_mix": float(l_mix.values), "loss_cos": 0.0}
    if cfg.beta_penalty != 0.0:
        if frozen_targets is None and (batch.feats_i is None or batch.feats_j is None):
            raise ContractError("contrastive loss requires the pre-mix views")
        proj_mix = projector_forward(emb, params)
        if frozen_targets is not None:
            vals_i = np.asarray(frozen_targets[0], dtype=dtype)
            vals_j = np.asarray(frozen_targets[1], dtype=dtype)
        else:
            both = np.concatenate([batch.feats_i, batch.feats_j]).astype(dtype, copy=False)
            vals = _project_views(both, params, tracked=track_targets)
            b = batch.feats_i.shape[0]
            vals_i, vals_j = vals[:b], vals[b:]
        c_i = loss_cos(proj_mix, ad.stop_gradient(ad.Tensor(vals_i)))
        c_j = loss_cos(proj_mix, ad.stop_gradient(ad.Tensor(vals_j)))
        w_i = ad.Tensor(batch.lambdas.astype(dtype))
        w_j = ad.Tensor((1.0 - batch.lambdas).astype(dtype))
        contrast = ad.mean_all(ad.add(ad.mul(w_i, c_i), ad.mul(w_j, c_j)))
        total = ad.add(l_mix, ad.scale(contrast, cfg.beta_penalty))
        parts["loss_cos"] = float(contrast.values)
    else:
        total = l_mix
    parts["loss_total"] = float(total.values)
    return total, logits, parts


def lr_at_epoch(epoch, cfg):
    """Step decay: multiply by the rate at each decay point reached."""
    if epoch < 1:
        raise ValueError("epoch is 1-based")
    points = range(cfg.decay_start_epoch, cfg.decay_end_epoch + 1, cfg.decay_every)
    d = sum(1 for p in points if p <= epoch)
    return cfg.lr0 * cfg.decay_rate ** d


def adam_step(params, state, lr):
    """Standard bias-corrected Adam; one call per batch."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ContractError(f"adam_step: grad {g.shape} vs param {p.values.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# evaluation and export

def _forward_logits(feats, params):
    with ad.pause_recording():
        return classifier_forward(encoder_forward(ad.Tensor(feats), params), params).values


def _forward_embeddings(feats, params):
    with ad.pause_recording():
        return encoder_forward(ad.Tensor(feats), params).values


def evaluate(store, split, params, eval_batch=256):
    """Accuracy and confusion matrix on a split, no augmentation applied."""
    entries = store.manifest.split_entries(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    confusion = np.zeros((len(KEYWORDS), len(KEYWORDS)), dtype=np.int64)
    for start in range(0, len(entries), eval_batch):
        chunk = entries[start:start + eval_batch]
        feats = np.stack([store.eval_features(e) for e in chunk])
        logits = _forward_logits(feats, params)
        preds = logits.argmax(axis=1)  # ties resolve to the lowest index
        for e, p in zip(chunk, preds):
            confusion[e.label, int(p)] += 1
    accuracy = float(np.trace(confusion)) / len(entries)
    return accuracy, confusion


def export_embeddings(store, split, params, path, eval_batch=256):
    """One CSV record per utterance: label index then the embedding values."""
    entries = store.manifest.split_entries(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    lines = []
    for start in range(0, len(entries), eval_batch):
        chunk = entries[start:start + eval_batch]
        feats = np.stack([store.eval_features(e) for e in chunk])
        emb = _forward_embeddings(feats, params)
        for e, row in zip(chunk, emb):
            lines.append(",".join([str(e.label)] + [repr(float(x)) for x in row]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(entries)


# ---------------------------------------------------------------------------
# the training loop

def resolve_mode(cfg, mode):
    """baseline: no mixing, no contrastive term; mixup: no contrastive term."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "baseline":
        return replace(cfg, mix_ratio=0.0, beta_penalty=0.0)
    if mode == "mixup":
        return replace(cfg, beta_penalty=0.0)
    return cfg


def _dominant_label(y_i, y_j, lambdas):
    soft = lambdas[:, None] * y_i + (1.0 - lambdas[:, None]) * y_j
    return soft.argmax(axis=1)


def train(cfg, manifest, mode="cosmix", aug_cfg=AugmentConfig(),
          model_cfg=ModelConfig(), spec=FBankSpec(), metrics_path=None,
          checkpoint_dir=None, resume_from=None, clock=time.monotonic,
          store=None):
    """Run the full loop; returns metrics history and the best parameters.

    One epoch visits every train entry once in seeded shuffled order.
    The checkpoint with the best validation accuracy is kept, plus a
    rolling last-epoch checkpoint for resumption. Pass a prebuilt
    ``store`` to share loaded waveforms across runs on one manifest.
    """
    eff = resolve_mode(cfg, mode)
    if store is None:
        store = ClipStore(manifest, spec)
    elif store.manifest is not manifest:
        raise ContractError("store was built for a different manifest")
    n_train = len(manifest.split_entries("train"))
    if n_train < 2:
        raise DatasetError(f"need >= 2 train entries, found {n_train}")
    with_views = eff.beta_penalty != 0.0

    params = init_params(model_cfg, dtype=np.float32)
    adam = AdamState.for_params(params)
    start_epoch = 1
    if resume_from is not None:
        ckpt = resume_from
        model_values = {k: v for k, v in ckpt.parameters.items() if not k.startswith("opt.")}
        params.load_values(model_values)
        for name in adam.m:
            adam.m[name] = ckpt.parameters[f"opt.m.{name}"].astype(np.float32).copy()
            adam.v[name] = ckpt.parameters[f"opt.v.{name}"].astype(np.float32).copy()
        state = json.loads(ckpt.rng_state.decode("utf-8"))
        if state["seed"] != eff.seed:
            raise ContractError(f"checkpoint seed {state['seed']} != config seed {eff.seed}")
        adam.t = state["adam_t"]
        start_epoch = ckpt.epoch + 1

    metrics_fh = open(metrics_path, "a", encoding="utf-8", newline="\n") \
        if metrics_path else None
    history = []
    batch_losses = []
    best_val = -1.0
    best_epoch = 0
    best_values = params.copy_values()
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            t0 = clock()
            lr = lr_at_epoch(epoch, eff)
            order = np.random.default_rng([eff.seed, epoch]).permutation(n_train)
            sums = {"loss_mix": 0.0, "loss_cos": 0.0, "loss_total": 0.0}
            hits = 0
            losses_this_epoch = []
            for batch_idx in range(0, (n_train + eff.batch_size - 1) // eff.batch_size):
                indices = order[batch_idx * eff.batch_size:(batch_idx + 1) * eff.batch_size]
                batch = compose_batch(store, indices, eff, aug_cfg, spec,
                                      epoch=epoch, batch_idx=batch_idx,
                                      with_views=with_views)
                params.zero_grad()
                try:
                    with ad.Tape():
                        total, logits, parts = total_loss(batch, params, eff)
                        ad.backward(total)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} batch {batch_idx}: {exc}") from None
                adam_step(params, adam, lr)
                nb = len(indices)
                for k in sums:
                    sums[k] += parts[k] * nb
                hits += int((logits.values.argmax(axis=1) ==
                             _dominant_label(batch.y_i, batch.y_j, batch.lambdas)).sum())
                losses_this_epoch.append(parts["loss_total"])
            val_acc, _ = evaluate(store, "validation", params)
            metrics = EpochMetrics(epoch=epoch,
                                   loss_mix=sums["loss_mix"] / n_train,
                                   loss_cos=sums["loss_cos"] / n_train,
                                   loss_total=sums["loss_total"] / n_train,
                                   train_acc=hits / n_train,
                                   val_acc=val_acc,
                                   lr=lr,
                                   seconds=clock() - t0)
            history.append(metrics)
            batch_losses.append(losses_this_epoch)
            if metrics_fh:
                metrics_fh.write(metrics.to_json_line() + "\n")
                metrics_fh.flush()
            if val_acc > best_val:
                best_val = val_acc
                best_epoch = epoch
                best_values = params.copy_values()
            if checkpoint_dir is not None:
                _save_train_checkpoint(checkpoint_dir, "last.ckpt", model_cfg, params,
                                       adam, eff.seed, epoch, metrics)
                if best_epoch == epoch:
                    _save_train_checkpoint(checkpoint_dir, "best.ckpt", model_cfg,
                                           params, adam, eff.seed, epoch, metrics)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(history=history, batch_losses=batch_losses,
                       best_epoch=best_epoch, best_val_acc=best_val,
                       params=params, best_values=best_values)


def _save_train_checkpoint(directory, name, model_cfg, params, adam, seed, epoch,
                           metrics):
    from pathlib import Path
    parameters = params.copy_values()
    for pname in list(adam.m):
        parameters[f"opt.m.{pname}"] = adam.m[pname]
        parameters[f"opt.v.{pname}"] = adam.v[pname]
    rng_state = json.dumps({"seed": seed, "adam_t": adam.t}).encode("utf-8")
    ckpt = Checkpoint(config=model_cfg, parameters=parameters, epoch=epoch,
                      rng_state=rng_state, metrics_tail=json.loads(metrics.to_json_line()))
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / (name + ".tmp")
    save_checkpoint(tmp, ckpt)
    tmp.replace(directory / name)


def params_from_checkpoint(ckpt):
    """Rebuild a float32 ParameterSet holding the checkpoint's model weights."""
    params = init_params(ckpt.config, dtype=np.float32)
    params.load_values({k: v for k, v in ckpt.parameters.items()
                        if not k.startswith("opt.")})
    return params


def params_from_values(model_cfg, values):
    """ParameterSet from a plain name -> array mapping (e.g. best_values)."""
    params = init_params(model_cfg, dtype=np.float32)
    params.load_values(values)
    return params
