"""Training regimes: bilevel augmentation learning, FLAG, and baselines.

The bilevel trainer records each inner SGD step as its own tape segment
(an unroll window entry). At outer time the pseudo-validation gradient is
chained backwards segment by segment: each vector-Jacobian product runs
over that segment's tape, where the grad-of-grad through the recorded
training gradient supplies the augmenter's share of the hypergradient.
Parameters and momenta entering the oldest kept segment act as constants,
which is exactly the truncation.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import augment as aug
from . import autodiff as ad
from . import models
from .autodiff import Params, Tape, Tensor
from .graphs import batch_graphs

REGIMES = ("plain", "noise_baseline", "flag", "gabo")


class TrainingAbort(RuntimeError):
    """Non-finite loss or gradient; carries the diagnostic message."""


@dataclass
class BilevelConfig:
    outer_lr: float = 0.01
    outer_period: int = 10          # inner steps between augmenter updates
    window: int = 4                 # truncation length of the unroll
    inner_lr: float = 0.1
    momentum: float = 0.9
    l2_augmenter: float = 0.01
    l2_classifier: float = 5e-4
    epochs: int = 200
    patience: int = 30
    milestones: tuple = (60, 120, 160)
    lr_factor: float = 0.2

    def __post_init__(self):
        if self.window > self.outer_period:
            raise ValueError(f"window {self.window} exceeds outer period {self.outer_period}")
        for name in ("outer_lr", "inner_lr", "lr_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FlagConfig:
    ascent_steps: int = 3           # M
    step_size: float = 0.01         # alpha
    ascent_rule: str = "sign"       # or "normalized"

    def __post_init__(self):
        if self.ascent_steps < 1:
            raise ValueError(f"ascent_steps must be >= 1, got {self.ascent_steps}")
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.ascent_rule not in ("sign", "normalized"):
            raise ValueError(f"unknown ascent_rule {self.ascent_rule!r}")


@dataclass
class SchedulerState:
    """Stepwise decay: lr = base * factor^(milestones passed)."""

    base_lr: float
    milestones: tuple = (60, 120, 160)
    factor: float = 0.2
    epoch: int = 0

    @property
    def lr(self) -> float:
        passed = sum(1 for m in self.milestones if self.epoch >= m)
        return self.base_lr * self.factor ** passed

    def step(self):
        self.epoch += 1


@dataclass
class StepRecord:
    """One inner step kept replayable: its tape segment plus endpoints."""

    tape: Tape
    theta_in: Params | None
    omega_in: Params
    v_in: list
    omega_out: list
    v_out: list
    loss: float
    batch: object = None
    noise_step: int | None = None


class UnrollWindow:
    """Ring buffer of the last ``maxlen`` recorded inner steps."""

    def __init__(self, maxlen: int):
        self.maxlen = maxlen
        self._steps: deque[StepRecord] = deque(maxlen=maxlen)

    def append(self, rec: StepRecord):
        self._steps.append(rec)

    def clear(self):
        self._steps.clear()

    def steps(self):
        return list(self._steps)

    def __len__(self):
        return len(self._steps)


def _check_finite(value, what, step):
    arr = np.asarray(value)
    if not np.isfinite(arr).all():
        raise TrainingAbort(f"non-finite {what} at step {step}")


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float((g.data ** 2).sum()) for g in grads)))


# ---------------------------------------------------------------------------
# inner steps
#
# loss_fn(omega: Params, theta: Params | None) -> (scalar Tensor, aux dict)


def inner_step(loss_fn, omega: Params, buffers, theta: Params | None,
               lr: float, momentum: float, window: UnrollWindow | None = None,
               step: int = 0):
    """One classifier step; records a window segment when ``window`` is given.

    The augmenter parameters are frozen here: they enter as leaves of the
    step's tape so the outer loop can differentiate against them, but the
    returned state never touches them.
    """
    tape = Tape()
    om = omega.leaf_view(tape)
    th = theta.leaf_view(tape) if theta is not None else None
    v_in = [tape.leaf_view(b) for b in buffers]
    tracked = window is not None

    loss, aux = loss_fn(om, th)
    lval = loss.item()
    grads = ad.grad(loss, om.tensors(), create_graph=tracked)
    gnorm = _grad_norm(grads)
    if not np.isfinite(lval) or not np.isfinite(gnorm):
        raise TrainingAbort(f"non-finite loss at step {step}: "
                            f"loss={lval}, grad_norm={gnorm}")
    new_p, new_v = ad.sgd_momentum_step(om.tensors(), grads, v_in, lr, momentum,
                                        weight_decay=0.0, tracked=tracked)
    if tracked:
        window.append(StepRecord(tape=tape, theta_in=th, omega_in=om, v_in=v_in,
                                 omega_out=new_p, v_out=new_v, loss=lval,
                                 batch=aux.get("batch"), noise_step=aux.get("noise_step")))
    omega_next = omega.replace_values(t.detach() for t in new_p)
    buffers_next = [t.detach() for t in new_v]
    return omega_next, buffers_next, lval, aux


# ---------------------------------------------------------------------------
# outer step


def window_hypergradient(window: UnrollWindow, pval_loss_fn, omega_final: Params):
    """Truncated hypergradient w.r.t. the augmenter over the kept segments.

    Chains dL_pval/d omega backwards through each recorded update: within a
    segment the reverse pass supplies d omega'/d gradient (the momentum
    chain times -lr) and, via grad-of-grad, d gradient/d theta. Returns
    (theta gradient arrays by name, pseudo-val loss value).
    """
    if len(window) == 0:
        raise ValueError("outer step with an empty unroll window")
    tape = Tape()
    om = omega_final.leaf_view(tape)
    ploss = pval_loss_fn(om)
    pval = ploss.item()
    g_omega = [g.data for g in ad.grad(ploss, om.tensors())]
    g_v = [np.zeros_like(g) for g in g_omega]

    theta_acc: dict[str, np.ndarray] | None = None
    for rec in reversed(window.steps()):
        s = None
        for out_t, cot in zip(rec.omega_out + rec.v_out, g_omega + g_v):
            term = ad.tsum(ad.mul(out_t, Tensor(cot)))
            s = term if s is None else ad.add(s, term)
        theta_leaves = rec.theta_in.tensors() if rec.theta_in is not None else []
        n_theta = len(theta_leaves)
        n_omega = len(rec.omega_in)
        wrt = theta_leaves + rec.omega_in.tensors() + rec.v_in
        gs = ad.grad(s, wrt)
        if rec.theta_in is not None:
            names = rec.theta_in.names()
            if theta_acc is None:
                theta_acc = {k: gs[i].data.copy() for i, k in enumerate(names)}
            else:
                for i, k in enumerate(names):
                    theta_acc[k] = theta_acc[k] + gs[i].data
        g_omega = [g.data for g in gs[n_theta:n_theta + n_omega]]
        g_v = [g.data for g in gs[n_theta + n_omega:]]
    return theta_acc or {}, pval


def outer_step(theta: Params, window: UnrollWindow, pval_loss_fn,
               omega_final: Params, outer_lr: float, l2_augmenter: float,
               step: int = 0):
    """Augmenter update from the truncated hypergradient; clears the window.

    theta' = theta - outer_lr * (hypergradient + l2 * 2 * theta). The
    classifier parameters are read, never written.
    """
    hg, pval = window_hypergradient(window, pval_loss_fn, omega_final)
    theta_new = {}
    total = 0.0
    for name, t in theta.items():
        g = hg.get(name)
        g = np.zeros_like(t.data) if g is None else g
        g = g + l2_augmenter * 2.0 * t.data
        total += float((g ** 2).sum())
        theta_new[name] = Tensor(t.data - outer_lr * g)
    if not np.isfinite(total) or not np.isfinite(pval):
        raise TrainingAbort(f"non-finite hypergradient at outer step {step}: "
                            f"pval_loss={pval}, hypergrad_norm={np.sqrt(total)}")
    window.clear()
    return Params(theta_new), {"pval_loss": pval, "hypergrad_norm": float(np.sqrt(total))}


# ---------------------------------------------------------------------------
# FLAG


def flag_train_step(omega: Params, buffers, batch, model_cfg, fcfg: FlagConfig,
                    lr: float, momentum: float, l2_classifier: float, rng,
                    step: int = 0):
    """Free adversarial step: M ascent rounds on the embedding perturbation,
    gradient accumulated across rounds, one model update at the end.

    The perturbation is unbounded; its reach is implicitly alpha * M.
    """
    d = model_cfg.embed_dim
    delta = rng.uniform(-fcfg.step_size, fcfg.step_size, size=(batch.num_nodes, d))
    acc = None
    loss_first = loss_last = None
    for m in range(fcfg.ascent_steps):
        tape = Tape()
        om = omega.leaf_view(tape)
        dlt = tape.leaf(delta)
        h = models.atom_encode(om, batch.node_feats, model_cfg.vocab_sizes)
        logits = models.classify_from_embeddings(om, model_cfg, ad.add(h, dlt), batch)
        loss = ad.add(models.bce_loss(logits, batch.labels),
                      ad.mul(om.l2_sumsq(), Tensor(l2_classifier)))
        lval = loss.item()
        loss_last = lval
        if m == 0:
            loss_first = lval
        grads = ad.grad(loss, om.tensors() + [dlt])
        gnorm = _grad_norm(grads)
        if not np.isfinite(lval) or not np.isfinite(gnorm):
            raise TrainingAbort(f"non-finite loss at step {step}: "
                                f"loss={lval}, grad_norm={gnorm}")
        g_om, g_delta = grads[:-1], grads[-1].data
        if acc is None:
            acc = [g.data.copy() for g in g_om]
        else:
            for a, g in zip(acc, g_om):
                a += g.data
        delta = delta + fcfg.step_size * _ascent_direction(g_delta, fcfg.ascent_rule)
        if not np.isfinite(delta).all():
            raise TrainingAbort(f"non-finite perturbation at step {step}")
    scale = 1.0 / fcfg.ascent_steps
    mean_grads = [Tensor(a * scale) for a in acc]
    new_p, new_v = ad.sgd_momentum_step(omega.tensors(), mean_grads, buffers,
                                        lr, momentum, weight_decay=0.0, tracked=False)
    return (omega.replace_values(new_p), new_v, loss_first,
            {"loss_last": loss_last, "delta": delta})


def _ascent_direction(g: np.ndarray, rule: str) -> np.ndarray:
    if rule == "sign":
        return np.sign(g)
    norm = np.sqrt((g ** 2).sum())
    return g / max(norm, 1e-12)


# ---------------------------------------------------------------------------
# experiment loop


@dataclass
class ExperimentResult:
    epochs: list = field(default_factory=list)      # metric dicts per epoch
    timings: list = field(default_factory=list)     # {epoch, wall_ms}
    best_val_auc: float | None = None
    best_epoch: int | None = None
    stop_epoch: int | None = None
    test_auc: float | None = None
    lr_drop_epochs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    best_classifier: Params | None = None
    best_augmenter: Params | None = None

    def summary(self) -> dict:
        return {
            "best_val_auc": self.best_val_auc,
            "best_epoch": self.best_epoch,
            "stop_epoch": self.stop_epoch,
            "test_auc": self.test_auc,
            "lr_drop_epochs": self.lr_drop_epochs,
            "warnings": self.warnings,
        }


def _score_graphs(omega, model_cfg, graphs, indices, batch_size):
    scores = np.zeros(len(indices))
    for start in range(0, len(indices), batch_size):
        chunk = [graphs[i] for i in indices[start:start + batch_size]]
        batch = batch_graphs(chunk)
        logits = models.classifier_forward(omega, model_cfg, batch)
        scores[start:start + len(chunk)] = logits.data.ravel()
    return scores


def evaluate_auc(omega, model_cfg, graphs, indices, batch_size, warnings=None):
    """Pooled ROC-AUC over all listed graphs; None if only one class present."""
    if not indices:
        return None
    labels = np.array([graphs[i].label for i in indices])
    if len(np.unique(labels)) < 2:
        if warnings is not None:
            warnings.append("single-class evaluation pool; AUC skipped")
        return None
    scores = _score_graphs(omega, model_cfg, graphs, indices, batch_size)
    return models.roc_auc(scores, labels)


def _make_gabo_loss(model_cfg, aug_cfg, batch, l2_classifier, seed, step):
    """Training loss closure for one batch; returns (loss, aux with phi norms)."""

    def loss_fn(omega, theta):
        h = models.atom_encode(omega, batch.node_feats, model_cfg.vocab_sizes)
        aux = {"phi_norm": 0.0, "batch": batch, "noise_step": step}
        if theta is not None and aug_cfg.transform_type != aug.IDENTITY_TRANSFORM:
            rng = aug.noise_rng(seed, step)
            inputs = aug.build_generator_input(aug_cfg, batch, rng,
                                               atom_embeddings=h, aug_params=theta)
            phi = aug.generate_phi(theta, aug_cfg, inputs)
            h = aug.apply_transform(h, phi, aug_cfg.transform_type)
            aux["phi_norm"] = float(aug.phi_row_norms(phi).mean())
        logits = models.classify_from_embeddings(omega, model_cfg, h, batch)
        loss = ad.add(models.bce_loss(logits, batch.labels),
                      ad.mul(omega.l2_sumsq(), Tensor(l2_classifier)))
        return loss, aux

    return loss_fn


def _make_noise_loss(model_cfg, batch, l2_classifier, seed, step):
    def loss_fn(omega, theta):
        h = models.atom_encode(omega, batch.node_feats, model_cfg.vocab_sizes)
        rng = aug.noise_rng(seed, step)
        u = rng.uniform(-1.0, 1.0, size=(batch.num_nodes, model_cfg.embed_dim))
        h = ad.add(h, Tensor(u))
        logits = models.classify_from_embeddings(omega, model_cfg, h, batch)
        loss = ad.add(models.bce_loss(logits, batch.labels),
                      ad.mul(omega.l2_sumsq(), Tensor(l2_classifier)))
        return loss, {"phi_norm": float(np.sqrt((u ** 2).sum(axis=1)).mean())}

    return loss_fn


def _make_plain_loss(model_cfg, batch, l2_classifier):
    def loss_fn(omega, theta):
        logits = models.classifier_forward(omega, model_cfg, batch)
        loss = ad.add(models.bce_loss(logits, batch.labels),
                      ad.mul(omega.l2_sumsq(), Tensor(l2_classifier)))
        return loss, {"phi_norm": 0.0}

    return loss_fn


def _make_pval_loss(model_cfg, batch):
    def pval_loss_fn(omega):
        logits = models.classifier_forward(omega, model_cfg, batch)
        return models.bce_loss(logits, batch.labels)

    return pval_loss_fn


def run_experiment(config, graphs, split) -> ExperimentResult:
    """Full training loop for one configuration over a prepared split.

    ``config`` is an ExperimentConfig (see gabo.config). Early stopping
    watches validation ROC-AUC; the returned test AUC belongs to the
    best-validation checkpoint.
    """
    if config.regime not in REGIMES:
        raise ValueError(f"unknown regime {config.regime!r}")
    model_cfg = config.model_config()
    aug_cfg = config.augmenter_config() if config.regime == "gabo" else None
    fcfg = config.flag_config() if config.regime == "flag" else None
    bcfg = config.bilevel_config()

    ss = np.random.SeedSequence(config.seed)
    init_cls_rng, init_aug_rng, batch_rng = (np.random.default_rng(s)
                                             for s in ss.spawn(3))
    omega = models.init_classifier_params(model_cfg, init_cls_rng)
    theta = (aug.init_augmenter_params(aug_cfg, init_aug_rng)
             if config.regime == "gabo" else None)
    buffers = [Tensor(np.zeros(t.shape)) for t in omega.tensors()]
    window = UnrollWindow(bcfg.window)
    scheduler = SchedulerState(base_lr=bcfg.inner_lr, milestones=tuple(bcfg.milestones),
                               factor=bcfg.lr_factor)

    pval_batches = [batch_graphs([graphs[i] for i in split.pseudo_val[s:s + config.batch_size]])
                    for s in range(0, len(split.pseudo_val), config.batch_size)]
    if config.regime == "gabo" and not pval_batches:
        raise ValueError("gabo regime needs a non-empty pseudo-validation split")

    result = ExperimentResult()
    best_val = -np.inf
    stagnant = 0
    step = 0
    pval_cursor = 0
    prev_lr = scheduler.lr

    for epoch in range(bcfg.epochs):
        lr = scheduler.lr
        if lr != prev_lr:
            result.lr_drop_epochs.append(epoch)
            prev_lr = lr
        t0 = time.perf_counter()
        order = batch_rng.permutation(len(split.train))
        losses, phi_norms = [], []
        for start in range(0, len(order), config.batch_size):
            idx = [split.train[i] for i in order[start:start + config.batch_size]]
            batch = batch_graphs([graphs[i] for i in idx])
            step += 1
            if config.regime == "flag":
                flag_rng = np.random.default_rng([config.seed, 0xF1A6, step])
                omega, buffers, lval, _ = flag_train_step(
                    omega, buffers, batch, model_cfg, fcfg, lr, bcfg.momentum,
                    bcfg.l2_classifier, flag_rng, step=step)
                phi_norms.append(0.0)
            else:
                if config.regime == "gabo":
                    loss_fn = _make_gabo_loss(model_cfg, aug_cfg, batch,
                                              bcfg.l2_classifier, config.seed, step)
                    omega, buffers, lval, aux = inner_step(
                        loss_fn, omega, buffers, theta, lr, bcfg.momentum,
                        window=window, step=step)
                elif config.regime == "noise_baseline":
                    loss_fn = _make_noise_loss(model_cfg, batch, bcfg.l2_classifier,
                                               config.seed, step)
                    omega, buffers, lval, aux = inner_step(
                        loss_fn, omega, buffers, None, lr, bcfg.momentum, step=step)
                else:
                    loss_fn = _make_plain_loss(model_cfg, batch, bcfg.l2_classifier)
                    omega, buffers, lval, aux = inner_step(
                        loss_fn, omega, buffers, None, lr, bcfg.momentum, step=step)
                phi_norms.append(aux["phi_norm"])
            losses.append(lval)

            if config.regime == "gabo" and step % bcfg.outer_period == 0 and len(window):
                pval_batch = pval_batches[pval_cursor % len(pval_batches)]
                pval_cursor += 1
                theta, _ = outer_step(theta, window, _make_pval_loss(model_cfg, pval_batch),
                                      omega, bcfg.outer_lr, bcfg.l2_augmenter, step=step)

        val_auc = evaluate_auc(omega, model_cfg, graphs, split.val,
                               config.batch_size, result.warnings)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        result.epochs.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else None,
            "val_auc": val_auc,
            "lr": lr,
            "phi_l2_mean": float(np.mean(phi_norms)) if phi_norms else 0.0,
        })
        result.timings.append({"epoch": epoch, "wall_ms": wall_ms})

        if val_auc is not None and val_auc > best_val:
            best_val = val_auc
            result.best_val_auc = val_auc
            result.best_epoch = epoch
            result.best_classifier = omega.copy()
            result.best_augmenter = theta.copy() if theta is not None else None
            stagnant = 0
        else:
            stagnant += 1
        result.stop_epoch = epoch
        scheduler.step()
        if stagnant >= bcfg.patience:
            break

    final_model = result.best_classifier if result.best_classifier is not None else omega
    result.test_auc = evaluate_auc(final_model, model_cfg, graphs, split.test,
                                   config.batch_size, result.warnings)
    return result
