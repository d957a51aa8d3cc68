"""Three-stage training: encoder (identity cross-entropy), set-level
correlation (global projections + local adapters with the clustering loss),
then fusion.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from corrreid import encoder as enc
from corrreid import fusion, gcm, lcm
from corrreid.errors import StateError
from corrreid.numerics import l2_normalize, l2_normalize_backward

logger = logging.getLogger(__name__)


class DivergenceError(StateError):
    def __init__(self, stage, epoch, loss):
        self.stage = stage
        self.epoch = epoch
        super().__init__(f"stage {stage} epoch {epoch}: non-finite loss {loss}")


def stage_schedule(tcfg, stage):
    """``(epochs, base_lr)`` of a 1-based stage after per-stage overrides."""
    epochs = tcfg.stage_epochs[stage - 1] if tcfg.stage_epochs else tcfg.epochs_per_stage
    return epochs, tcfg.base_lr * tcfg.stage_lr_scale[stage - 1]


def learning_rate(epoch, base_lr, warmup_epochs, total_epochs, min_lr=1e-5):
    """Linear warmup then cosine decay to ``min_lr``; ``epoch`` is 1-based."""
    if warmup_epochs > 0 and epoch <= warmup_epochs:
        return base_lr * epoch / warmup_epochs
    span = total_epochs - warmup_epochs
    if span <= 0:
        return base_lr
    progress = min(1.0, (epoch - warmup_epochs) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, momentum=0.9, weight_decay=1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self, params, grads, lr):
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g + self.weight_decay * p
            v = self._velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self._velocity[name] = v
            p -= lr * v


def init_head(dim, num_classes):
    return {"w": np.zeros((dim, num_classes)), "b": np.zeros(num_classes)}


def cross_entropy(x, head, labels, scale=1.0):
    """Mean softmax cross-entropy of ``scale * (x @ w + b)``; returns loss, dx, head grads."""
    logits = scale * (x @ head["w"] + head["b"])
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    total = p.sum(axis=1, keepdims=True)
    p /= total
    n = x.shape[0]
    loss = (np.log(total[:, 0]) - logits[np.arange(n), labels]).mean()
    dlog = p.copy()
    dlog[np.arange(n), labels] -= 1.0
    dlog *= scale / n
    return loss, dlog @ head["w"].T, {"w": x.T @ dlog, "b": dlog.sum(axis=0)}


def _check(stage, epoch, loss):
    if not np.isfinite(loss):
        raise DivergenceError(stage, epoch, loss)


@dataclass
class StageLog:
    stage: int
    records: list = field(default_factory=list)

    def add(self, **kw):
        kw["stage"] = self.stage
        self.records.append(kw)
        logger.info("stage %d epoch %d loss %.6f", self.stage, kw["epoch"], kw["loss"])

    @property
    def losses(self):
        return [r["loss"] for r in self.records]


def _prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


def train_encoder(images, labels, params, tcfg, seed, on_epoch=None):
    """Stage 1: identity cross-entropy on the unit-norm class output."""
    labels = np.asarray(labels)
    classes = int(labels.max()) + 1
    head = init_head(params.embed_dim, classes)
    opt = SGD(tcfg.sgd_momentum, tcfg.weight_decay)
    rng = np.random.default_rng(seed)
    log = StageLog(1)
    n = images.shape[0]
    epochs, base_lr = stage_schedule(tcfg, 1)
    for epoch in range(1, epochs + 1):
        lr = learning_rate(epoch, base_lr, tcfg.warmup_epochs, epochs, tcfg.min_lr)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tcfg.batch_size_stage1):
            idx = order[start:start + tcfg.batch_size_stage1]
            g, _, state = enc.encode_with_grad(images[idx], params)
            loss, dg, dhead = cross_entropy(g, head, labels[idx], tcfg.logit_scale)
            _check(1, epoch, loss)
            grads = enc.encode_backward(state, params, grad_g=dg)
            grads.update(_prefixed("head", dhead))
            arrays = params.arrays()
            arrays.update(_prefixed("head", head))
            opt.step(arrays, grads, lr)
            total += loss * len(idx)
        log.add(epoch=epoch, lr=lr, loss=total / n)
        if on_epoch:
            on_epoch(epoch, head)
    return head, log


def _normalized_ce(x, head, labels, scale=1.0):
    y, norms = l2_normalize(x)
    loss, dy, dhead = cross_entropy(y, head, labels, scale)
    return loss, l2_normalize_backward(y, norms, dy), dhead


def _head_arrays(head, frozen):
    return {} if frozen else _prefixed("head", head)


class GcmTrainer:
    """Global path of stage 2: projections trained with cross-entropy on the
    normalized correlated features of the full training set.

    With ``shared_head`` the stage-1 classifier is kept frozen, so ``u`` stays
    in the embedding space of ``g`` (and of ``v`` when the local path shares
    it too); otherwise a private copy of the head is trained alongside.
    """

    def __init__(self, params, head, tcfg):
        self.params = params
        self.frozen_head = tcfg.shared_head
        self.scale = tcfg.logit_scale
        self.head = head if self.frozen_head else {k: v.copy() for k, v in head.items()}
        self.opt = SGD(tcfg.sgd_momentum, tcfg.weight_decay)
        self.log = StageLog(2)

    def step(self, g, labels, lr, epoch):
        res = gcm.gcm_forward(g, self.params)
        loss, du, dhead = _normalized_ce(res.u, self.head, labels, self.scale)
        _check(2, epoch, loss)
        grads = gcm.gcm_backward(res, self.params, du)
        arrays = self.params.arrays()
        arrays.update(_head_arrays(self.head, self.frozen_head))
        grads.update(_prefixed("head", dhead))
        dg = grads.pop("g")
        self.opt.step(arrays, grads, lr)
        self.log.add(epoch=epoch, lr=lr, loss=float(loss), path="gcm",
                     mask_density=res.diagnostics["mask_density"])
        return dg


class LcmTrainer:
    """Local path of stage 2: per-part adapters and the reduction map, trained
    with the clustering loss against a momentum memory bank plus
    cross-entropy on ``v``.

    Stage 2 runs the whole training set as one batch, so positives are mined
    once per epoch (which is also once per iteration).
    """

    def __init__(self, params, head, tcfg, lcfg, l_init, bank=None):
        self.params = params
        self.frozen_head = tcfg.shared_head
        self.scale = tcfg.logit_scale
        self.head = head if self.frozen_head else {k: v.copy() for k, v in head.items()}
        self.opt = SGD(tcfg.sgd_momentum, tcfg.weight_decay)
        self.lcfg = lcfg
        self.log = StageLog(2)
        if bank is None:
            n, p, d = l_init.shape
            bank = lcm.MemoryBank.empty(p, n, d, lcfg.momentum)
            bank = lcm.bank_update(bank, lcm.adapt_parts(l_init, params.adapters)[0], 0)
        self.bank = bank

    def step(self, l, labels, lr, epoch):
        lcfg = self.lcfg
        adapted, astate = lcm.adapt_parts(l, self.params.adapters)
        positives = lcm.mine_all_positives(adapted, self.bank, lcfg.k, lcfg.include_anchor)
        closs, dl_cluster = lcm.clustering_loss(adapted, self.bank, positives, lcfg.tau)
        v, vstate = lcm.fuse_local_with_grad(adapted, self.params.reduce)
        celoss, dv, dhead = cross_entropy(v, self.head, labels, self.scale)
        loss = lcfg.clustering_weight * closs + celoss
        _check(2, epoch, loss)
        fgrads = lcm.fuse_local_backward(vstate, self.params.reduce, dv)
        dadapted = lcfg.clustering_weight * dl_cluster + fgrads["l"]
        agrads = lcm.adapt_parts_backward(astate, self.params.adapters, dadapted)
        arrays = self.params.arrays()
        arrays.update(_head_arrays(self.head, self.frozen_head))
        grads = {"reduce": fgrads["reduce"], "adapters": agrads["adapters"]}
        grads.update(_prefixed("head", dhead))
        self.opt.step(arrays, grads, lr)
        adapted, _ = lcm.adapt_parts(l, self.params.adapters)
        self.bank = lcm.bank_update(self.bank, adapted, self.bank.epoch)
        self.log.add(epoch=epoch, lr=lr, loss=float(loss), path="lcm", clustering=float(closs),
                     cross_entropy=float(celoss),
                     positive_similarity=lcm.anchor_positive_similarity(adapted, self.bank, positives))
        return agrads["l"]


def train_correlation(images, labels, enc_params, gcm_trainer, lcm_trainer, tcfg,
                      unfreeze_encoder=False, on_epoch=None):
    """Stage 2 over the full training set in a single batch per epoch.

    With a frozen encoder the features are computed once; otherwise the
    gradients of both paths flow back into the encoder each epoch.
    """
    labels = np.asarray(labels)
    epochs, base_lr = stage_schedule(tcfg, 2)
    enc_opt = SGD(tcfg.sgd_momentum, tcfg.weight_decay) if unfreeze_encoder else None
    if not unfreeze_encoder:
        g, l = enc.encode(images, enc_params)
    for epoch in range(1, epochs + 1):
        lr = learning_rate(epoch, base_lr, tcfg.warmup_epochs, epochs, tcfg.min_lr)
        if unfreeze_encoder:
            g, l, state = enc.encode_with_grad(images, enc_params)
        dg = gcm_trainer.step(g, labels, lr, epoch) if gcm_trainer else None
        dl = lcm_trainer.step(l, labels, lr, epoch) if lcm_trainer else None
        if unfreeze_encoder and (dg is not None or dl is not None):
            grads = enc.encode_backward(state, enc_params, grad_g=dg, grad_l=dl)
            enc_opt.step(enc_params.arrays(), grads, lr)
        if on_epoch:
            on_epoch(epoch)


def train_fusion(u, v, labels, params, tcfg, seed, on_epoch=None, head=None):
    """Stage 3: MCA gate maps trained with cross-entropy on normalized z.

    A given ``head`` is used frozen; otherwise a fresh one is trained.
    """
    opt = SGD(tcfg.sgd_momentum, tcfg.weight_decay)
    frozen = head is not None
    if not frozen:
        head = init_head(u.shape[1], int(np.max(labels)) + 1)
    rng = np.random.default_rng(seed)
    log = StageLog(3)
    n = u.shape[0]
    epochs, base_lr = stage_schedule(tcfg, 3)
    for epoch in range(1, epochs + 1):
        lr = learning_rate(epoch, base_lr, tcfg.warmup_epochs, epochs, tcfg.min_lr)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tcfg.batch_size_stage3):
            idx = order[start:start + tcfg.batch_size_stage3]
            z = fusion.fuse(u[idx], v[idx], params)[:, :, 0, 0]
            loss, dz, dhead = _normalized_ce(z, head, labels[idx], tcfg.logit_scale)
            _check(3, epoch, loss)
            fg = fusion.fuse_backward(u[idx], v[idx], params, dz)
            arrays = params.arrays()
            arrays.update(_head_arrays(head, frozen))
            grads = {"c1": fg["c1"], "c2": fg["c2"]}
            grads.update(_prefixed("head", dhead))
            opt.step(arrays, grads, lr)
            total += loss * len(idx)
        log.add(epoch=epoch, lr=lr, loss=total / n)
        if on_epoch:
            on_epoch(epoch)
    return head, log
