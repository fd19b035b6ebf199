"""Masked SGD training loop.

Protocol: SGD with momentum and weight decay, learning rate divided by 10
at each milestone epoch, optional label smoothing, optional ghost
schedules (soft neurons swapped back to exact relu and skip gates cut to
0 at the scheduled epoch), optional learned initialization rescaling
before the first step. Masked coordinates of both the parameters and the
momentum buffers are exactly 0 after every step: the gradient, the weight
decay term and the buffer are all gated by the mask.

Runs are deterministic given (seed, config, dataset); batch order is a
seeded per-epoch permutation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from sparselab import autodiff as ad
from sparselab import diagnostics, rescale
from sparselab.diagnostics import ProbeConfig
from sparselab.ghost import ConfigError, GhostConfig, ghost_mode
from sparselab.rescale import LRsIConfig

DIVERGENCE_LOSS = 1e6


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    milestones: tuple = (30, 45)
    ls_alpha: float = 0.0
    seed: int = 0
    ghost: GhostConfig | None = None
    lrsi: LRsIConfig | None = None
    probes: ProbeConfig | None = None

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {ms}")
        if self.epochs and ms and ms[-1] >= self.epochs:
            raise ConfigError(f"milestones {ms} must lie before the last epoch {self.epochs}")
        if not 0.0 <= self.ls_alpha < 1.0:
            raise ConfigError(f"ls_alpha must be in [0,1), got {self.ls_alpha}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.milestones = ms


@dataclass
class RunRecord:
    epoch: int
    lr: float
    beta: float
    alpha: float
    train_loss: float
    test_loss: float
    test_acc: float
    grad_flow: float
    act_sparsity: tuple = ()
    top_eigs: tuple | None = None
    eig_residuals: tuple | None = None
    swap_deviation: float | None = None
    diverged: bool = False


def smooth_labels(target_class, n_classes, ls_alpha):
    """Smoothed target row: correct class 1-a+a/K, the rest a/K."""
    if not 0.0 <= ls_alpha < 1.0:
        raise ValueError(f"smooth_labels: ls_alpha must be in [0,1), got {ls_alpha}")
    if n_classes < 2:
        raise ValueError(f"smooth_labels: need at least 2 classes, got {n_classes}")
    k = int(target_class)
    if not 0 <= k < n_classes:
        raise ValueError(f"smooth_labels: class {target_class} out of range [0,{n_classes})")
    row = np.full(n_classes, ls_alpha / n_classes)
    row[k] += 1.0 - ls_alpha
    return row


def smooth_labels_batch(labels, n_classes, ls_alpha):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("smooth_labels_batch: label out of range")
    out = np.full((labels.size, n_classes), ls_alpha / n_classes)
    out[np.arange(labels.size), labels] += 1.0 - ls_alpha
    return out


def cross_entropy(logits, targets):
    """Mean softmax cross entropy as a float; accepts arrays or a Tensor."""
    t = logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)
    return float(ad.softmax_cross_entropy(t, np.asarray(targets, dtype=np.float64)).data)


def lr_at(epoch, lr0, milestones):
    """Step schedule: lr0 / 10^(number of milestones at or before epoch)."""
    return lr0 * 0.1 ** sum(1 for m in milestones if m <= epoch)


def sgd_step(block, grad, lr, momentum=0.9, weight_decay=2e-4):
    """One heavy-ball step on a parameter block, fully gated by its mask."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise ad.NumericError(f"sgd_step: non-finite gradient for block {block.name}")
    g = grad + weight_decay * block.value
    if block.mask is not None:
        g = g * block.mask
    block.momentum = momentum * block.momentum + g
    block.value = block.value - lr * block.momentum


def evaluate(model, x, y, batch_size, *, activation=None, beta=1.0, alpha=0.0):
    """Test loss (one-hot) and accuracy under eval-mode batchnorm."""
    n = len(x)
    total_loss, correct = 0.0, 0
    for start in range(0, n, batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        res = model.forward(xb, training=False, activation=activation, beta=beta, alpha=alpha)
        onehot = smooth_labels_batch(yb, model.n_classes, 0.0)
        total_loss += cross_entropy(res.logits, onehot) * len(xb)
        correct += int((res.logits.data.argmax(axis=1) == yb).sum())
    return total_loss / n, correct / n


def _ghost_knobs(config, state):
    """Effective (activation, beta, alpha) for an epoch's ghost state."""
    if state is None or config.ghost is None:
        return None, math.inf, 0.0
    g = config.ghost
    act = g.activation if (g.soft_neurons and state.phase == "ghost") else None
    beta = state.beta if g.soft_neurons else math.inf
    alpha = state.alpha if g.skip_gates else 0.0
    return act, beta, alpha


def train(model, dataset, config, mask=None):
    """Run the full protocol; returns one RunRecord per completed epoch.

    Divergence (non-finite or exploding loss) aborts the run with a final
    record flagged ``diverged`` instead of raising.
    """
    if mask is not None:
        from sparselab.masks import apply_mask
        apply_mask(model, mask)
    if config.epochs == 0:
        return []

    x_train, y_train = dataset.x_train, dataset.y_train
    n = len(x_train)
    k_classes = model.n_classes
    pc = config.probes
    probe_n = min(pc.probe_batch if pc else 256, n)
    probe_x, probe_y = x_train[:probe_n], y_train[:probe_n]
    act_eps = pc.act_eps if pc else 1e-6

    policy = ghost_mode(config.ghost, config.milestones) if config.ghost else None

    if config.lrsi and config.lrsi.enabled:
        bx = x_train[:min(config.batch_size, n)]
        bt = smooth_labels_batch(y_train[:len(bx)], k_classes, config.ls_alpha)
        state0 = policy.state_at(0) if policy else None
        act0, beta0, alpha0 = _ghost_knobs(config, state0)
        # the first-step objective sees the exact epoch-0 network, ghosts included
        scales = _learn_scales_ghosted(model, (bx, bt), config, act0, beta0, alpha0)
        rescale.apply_scales(model, scales)
        model.applied_scales = scales

    rng = np.random.default_rng([config.seed, 2])
    masks_by_name = {b.name: b.mask for b in model.maskable_blocks()}
    history = []
    prev_phase = None

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config.lr0, config.milestones)
        state = policy.state_at(epoch) if policy else None
        act_kind, beta, alpha = _ghost_knobs(config, state)

        perm = rng.permutation(n)
        losses, flows = [], []
        diverged = False
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = x_train[idx]
            targets = smooth_labels_batch(y_train[idx], k_classes, config.ls_alpha)
            try:
                res = model.forward(xb, training=True, activation=act_kind,
                                    beta=beta, alpha=alpha)
                loss = ad.softmax_cross_entropy(res.logits, targets, label="train_loss")
            except ad.NumericError:
                diverged = True
                break
            val = float(loss.data)
            if not math.isfinite(val) or val > DIVERGENCE_LOSS:
                diverged = True
                break
            ad.backward(loss)
            grads = {name: res.leaves[name].grad for name in masks_by_name}
            flows.append(diagnostics.avg_gradient_flow(grads, masks_by_name))
            for name, blk in model.blocks.items():
                g = res.leaves[name].grad
                if g is None:
                    g = np.zeros_like(blk.value)
                sgd_step(blk, g, lr, config.momentum, config.weight_decay)
            losses.append(val)

        if diverged:
            history.append(RunRecord(epoch=epoch, lr=lr, beta=beta, alpha=alpha,
                                     train_loss=math.nan, test_loss=math.nan,
                                     test_acc=math.nan, grad_flow=math.nan,
                                     diverged=True))
            return history

        test_loss, test_acc = evaluate(model, dataset.x_test, dataset.y_test,
                                       config.batch_size, activation=act_kind,
                                       beta=beta, alpha=alpha)
        act_sp = diagnostics.activation_sparsity(model, probe_x, act_eps,
                                                 activation=act_kind, beta=beta, alpha=alpha)

        swap_dev = None
        if (state is not None and state.phase == "post_ghost" and prev_phase == "ghost"
                and config.ghost.soft_neurons and config.ghost.activation == "pswish"):
            swap_dev = _swap_deviation(model, probe_x, config.ghost.beta_max)
        prev_phase = state.phase if state else None

        top_eigs = resids = None
        if pc and pc.enabled and epoch % pc.every == 0:
            onehot = smooth_labels_batch(probe_y, k_classes, 0.0)
            _, grad_fn, theta0 = diagnostics.probe_functions(
                model, probe_x, onehot, activation=act_kind, beta=beta, alpha=alpha)
            record, _ = diagnostics.top_hessian_eigs(
                grad_fn, theta0, k=pc.eig_count, iters=pc.power_iters,
                tol=pc.tol, seed=config.seed * 1000 + epoch, epoch=epoch)
            top_eigs, resids = record.eigenvalues, record.residuals

        history.append(RunRecord(
            epoch=epoch, lr=lr, beta=beta, alpha=alpha,
            train_loss=float(np.mean(losses)) if losses else math.nan,
            test_loss=test_loss, test_acc=test_acc,
            grad_flow=float(np.mean(flows)) if flows else math.nan,
            act_sparsity=tuple(act_sp), top_eigs=top_eigs, eig_residuals=resids,
            swap_deviation=swap_dev,
        ))
    return history


def _learn_scales_ghosted(model, batch, config, act_kind, beta, alpha):
    """LRsI with the epoch-0 ghost state folded into the objective."""
    if act_kind is None and alpha == 0.0:
        return rescale.learn_scales(model, batch, config.lr0, config.lrsi)
    # wrap forward so the rescale module sees the ghosted network
    class _Ghosted:
        def __init__(self, inner):
            self._inner = inner
            self.blocks = inner.blocks

        def forward(self, x, **kw):
            kw.setdefault("activation", act_kind)
            kw.setdefault("beta", beta)
            kw.setdefault("alpha", alpha)
            return self._inner.forward(x, **kw)

    return rescale.learn_scales(_Ghosted(model), batch, config.lr0, config.lrsi)


def _swap_deviation(model, x, beta_max):
    """Max |pswish(z, beta_max) - relu(z)| over the pre-activation values
    observed at the swap epoch."""
    res = model.forward(x, training=False, record=True)
    dev = 0.0
    for z in res.preacts:
        s = 1.0 / (1.0 + np.exp(-np.clip(beta_max * z, -700, 700)))
        dev = max(dev, float(np.abs(z * s - np.maximum(z, 0.0)).max()))
    return dev


# ---------------------------------------------------------------------------
# metrics CSV
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def metrics_header(n_act_layers, eig_count):
    cols = ["epoch", "lr", "beta", "alpha", "train_loss", "test_loss", "test_acc", "grad_flow"]
    cols += [f"act_sparsity_L{i + 1}" for i in range(n_act_layers)]
    cols += [f"top_eig_{j + 1}" for j in range(eig_count)]
    return cols


def write_metrics_csv(path, history, n_act_layers, eig_count):
    """Per-epoch metrics, RFC-4180, LF line endings, round-trip-exact floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(n_act_layers, eig_count))
        for rec in history:
            row = [rec.epoch, _fmt(rec.lr), _fmt(rec.beta), _fmt(rec.alpha),
                   _fmt(rec.train_loss), _fmt(rec.test_loss), _fmt(rec.test_acc),
                   _fmt(rec.grad_flow)]
            sp = list(rec.act_sparsity) + [None] * (n_act_layers - len(rec.act_sparsity))
            row += [_fmt(v) for v in sp]
            eigs = list(rec.top_eigs) if rec.top_eigs else []
            eigs += [None] * (eig_count - len(eigs))
            row += [_fmt(v) for v in eigs]
            writer.writerow(row)
