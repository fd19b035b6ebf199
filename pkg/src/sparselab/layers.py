"""Layer primitives and small trainable models.

Two families of desk-scale architectures are provided: a plain MLP stack
and a tiny residual conv net ("resnet-tiny": stem conv, three residual
blocks with stride-2 transitions, global average pool, classifier head).

Every shape-preserving conv/dense position, and both conv sub-blocks
inside each residual block, is enumerated as a *ghost skip site*: an
extra identity shortcut that can be gated in at runtime with a gain
``alpha`` and removed without residue (``alpha=0`` takes the exact same
code path as a model built without ghost sites).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sparselab import autodiff as ad
from sparselab.autodiff import mish, pswish, relu  # noqa: F401  (re-exported op surface)

# Tiny eps: guards the zero-variance channel while keeping batchnorm
# exactly scale-equivariant to 1e-9 (weight rescaling must be absorbed).
BN_EPS = 1e-12
BN_MOMENTUM = 0.1

ACTIVATION_KINDS = ("relu", "pswish", "mish")


class BuildError(ValueError):
    """Model description failed validation."""


@dataclass
class LayerSpec:
    kind: str                 # dense | conv3x3 | batchnorm | activation | residual_block | global_pool
    width: int = 0            # dense out features / conv out channels / block channels
    stride: int = 1
    activation: str = "relu"  # for activation layers
    has_native_skip: bool = True  # residual blocks only

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise BuildError(f"layer {self.kind}: stride must be 1 or 2, got {self.stride}")
        if self.kind == "activation" and self.activation not in ACTIVATION_KINDS:
            raise BuildError(f"unknown activation kind {self.activation!r}")


@dataclass
class ParamBlock:
    """Named trainable array with optional binary mask and momentum buffer."""

    name: str
    kind: str                 # weight | bias | bn_scale | bn_shift
    value: np.ndarray
    group: str                # scale group: a layer's weight and bias share one
    mask: np.ndarray | None = None
    momentum: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.value)

    @property
    def maskable(self):
        return self.kind == "weight"

    def copy(self):
        blk = ParamBlock(self.name, self.kind, self.value.copy(), self.group,
                         None if self.mask is None else self.mask.copy(),
                         self.momentum.copy())
        return blk


@dataclass
class ForwardContext:
    training: bool = False
    activation: str | None = None   # runtime replacement for relu sites
    beta: float = 1.0
    alpha: float = 0.0
    update_stats: bool = False
    record: bool = False
    bn_passthrough: bool = False    # skip batchnorm entirely (synflow scoring)
    activations: list = field(default_factory=list)
    preacts: list = field(default_factory=list)


@dataclass
class ForwardResult:
    logits: ad.Tensor
    leaves: dict
    activations: list | None = None
    preacts: list | None = None


def _apply_activation(t, kind, ctx, label):
    if kind == "relu" and ctx.activation is not None:
        kind = ctx.activation
    if ctx.record:
        ctx.preacts.append(t.data.copy())
    if kind == "relu":
        out = ad.relu(t, label=label)
    elif kind == "pswish":
        out = ad.pswish(t, ctx.beta, label=label)
    elif kind == "mish":
        out = ad.mish(t, label=label)
    else:
        raise BuildError(f"unknown activation kind {kind!r}")
    if ctx.record:
        ctx.activations.append(out.data.copy())
    return out


class _Dense:
    def __init__(self, name, in_dim, out_dim, flatten):
        self.name = name
        self.w = f"{name}.w"
        self.b = f"{name}.b"
        self.flatten = flatten
        self.ghost_site = (in_dim == out_dim) and not flatten

    def forward(self, x, ctx, P):
        if self.flatten:
            x = ad.reshape(x, (x.data.shape[0], -1), label=self.name)
        z = ad.add(ad.matmul(x, P[self.w], label=self.name), P[self.b], label=self.name)
        if self.ghost_site and ctx.alpha != 0.0:
            z = ad.add(z, ad.scale(x, ctx.alpha, label=self.name), label=self.name)
        return z


class _Conv:
    def __init__(self, name, in_ch, out_ch, stride):
        self.name = name
        self.w = f"{name}.w"
        self.b = f"{name}.b"
        self.stride = stride
        self.ghost_site = (in_ch == out_ch) and stride == 1

    def forward(self, x, ctx, P):
        z = ad.conv2d(x, P[self.w], stride=self.stride, label=self.name)
        z = ad.add(z, ad.reshape(P[self.b], (1, -1, 1, 1)), label=self.name)
        if self.ghost_site and ctx.alpha != 0.0:
            z = ad.add(z, ad.scale(x, ctx.alpha, label=self.name), label=self.name)
        return z


class _BatchNorm:
    def __init__(self, name, dim):
        self.name = name
        self.g = f"{name}.g"
        self.b = f"{name}.b"
        self.dim = dim

    def forward(self, x, ctx, P, stats):
        if ctx.bn_passthrough:
            return x
        if ctx.training:
            out, mean, var = ad.batchnorm_train(x, P[self.g], P[self.b], eps=BN_EPS, label=self.name)
            if ctx.update_stats:
                m, v = stats[self.name]
                stats[self.name] = ((1 - BN_MOMENTUM) * m + BN_MOMENTUM * mean,
                                    (1 - BN_MOMENTUM) * v + BN_MOMENTUM * var)
            return out
        m, v = stats[self.name]
        return ad.batchnorm_eval(x, P[self.g], P[self.b], m, v, eps=BN_EPS, label=self.name)


class _Activation:
    def __init__(self, name, kind):
        self.name = name
        self.kind = kind

    def forward(self, x, ctx, P):
        return _apply_activation(x, self.kind, ctx, self.name)


class _GlobalPool:
    def __init__(self, name):
        self.name = name

    def forward(self, x, ctx, P):
        return ad.global_avg_pool(x, label=self.name)


class _ResidualBlock:
    """conv-BN-act-conv-BN with a native identity skip added pre-final
    activation, plus two ghost sites (one around each conv+BN sub-block)."""

    def __init__(self, name, channels, has_native_skip, activation):
        self.name = name
        self.channels = channels
        self.has_native_skip = has_native_skip
        self.activation = activation
        self.conv1 = _Conv(f"{name}.conv1", channels, channels, 1)
        self.conv2 = _Conv(f"{name}.conv2", channels, channels, 1)
        self.bn1 = _BatchNorm(f"{name}.bn1", channels)
        self.bn2 = _BatchNorm(f"{name}.bn2", channels)
        # the two conv sub-blocks are the ghost sites; disable the plain-conv hook
        self.conv1.ghost_site = False
        self.conv2.ghost_site = False

    def forward(self, x, ctx, P, stats):
        z1 = self.bn1.forward(self.conv1.forward(x, ctx, P), ctx, P, stats)
        if ctx.alpha != 0.0:
            z1 = ad.add(z1, ad.scale(x, ctx.alpha, label=f"{self.name}.ghost1"), label=self.name)
        h1 = _apply_activation(z1, self.activation, ctx, f"{self.name}.act1")
        z2 = self.bn2.forward(self.conv2.forward(h1, ctx, P), ctx, P, stats)
        if ctx.alpha != 0.0:
            z2 = ad.add(z2, ad.scale(h1, ctx.alpha, label=f"{self.name}.ghost2"), label=self.name)
        if self.has_native_skip:
            z2 = ad.add(z2, x, label=f"{self.name}.skip")
        return _apply_activation(z2, self.activation, ctx, f"{self.name}.act2")


class Model:
    """Ordered layers plus named parameter blocks and BN running stats.

    Forward rebuilds the autodiff graph on every call (tape style); the
    returned leaves carry gradients after ``backward`` on a loss built
    from the logits.
    """

    def __init__(self, specs, layers, blocks, bn_stats, ghost_skip_sites, in_shape, n_classes):
        self.specs = specs
        self.layers = layers
        self.blocks = blocks          # dict name -> ParamBlock (insertion ordered)
        self.bn_stats = bn_stats      # dict bn name -> (running_mean, running_var)
        self.ghost_skip_sites = ghost_skip_sites
        self.in_shape = tuple(in_shape)
        self.n_classes = n_classes
        self.applied_scales = None    # ScaleSet once the trainer rescales the init

    # -- forward ------------------------------------------------------------

    def forward(self, x, *, training=False, activation=None, beta=1.0, alpha=0.0,
                update_stats=None, record=False, bn_passthrough=False, values=None):
        """Run the network on a batch.

        ``activation`` replaces every relu site at runtime ("ghost soft
        neurons"); ``alpha`` gates the ghost skip additions; ``values``
        optionally overrides parameter arrays without touching the model.
        """
        if update_stats is None:
            update_stats = training
        ctx = ForwardContext(training=training, activation=activation, beta=beta,
                             alpha=alpha, update_stats=update_stats, record=record,
                             bn_passthrough=bn_passthrough)
        P = {}
        for name, blk in self.blocks.items():
            data = blk.value if values is None or name not in values else values[name]
            P[name] = ad.Tensor(data, requires_grad=True, name=name)
        t = ad.Tensor(x)
        for layer in self.layers:
            if isinstance(layer, (_BatchNorm, _ResidualBlock)):
                t = layer.forward(t, ctx, P, self.bn_stats)
            else:
                t = layer.forward(t, ctx, P)
        return ForwardResult(logits=t, leaves=P,
                             activations=ctx.activations if record else None,
                             preacts=ctx.preacts if record else None)

    # -- bookkeeping ----------------------------------------------------------

    def param_count(self):
        return sum(b.value.size for b in self.blocks.values())

    def maskable_blocks(self):
        return [b for b in self.blocks.values() if b.maskable]

    def clone(self):
        blocks = {n: b.copy() for n, b in self.blocks.items()}
        stats = {n: (m.copy(), v.copy()) for n, (m, v) in self.bn_stats.items()}
        out = Model(self.specs, self.layers, blocks, stats,
                    list(self.ghost_skip_sites), self.in_shape, self.n_classes)
        out.applied_scales = self.applied_scales
        return out

    def activation_site_names(self):
        names = []
        for layer in self.layers:
            if isinstance(layer, _Activation):
                names.append(layer.name)
            elif isinstance(layer, _ResidualBlock):
                names.extend([f"{layer.name}.act1", f"{layer.name}.act2"])
        return names

    # -- flat views over free (unmasked) coordinates -------------------------

    def free_vector(self, values=None):
        parts = []
        for name, blk in self.blocks.items():
            arr = blk.value if values is None else values[name]
            if blk.mask is not None:
                parts.append(arr[blk.mask > 0].ravel())
            else:
                parts.append(arr.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def values_from_free(self, vec):
        """Rebuild full per-block arrays from a free vector (masked coords stay 0)."""
        values, ofs = {}, 0
        for name, blk in self.blocks.items():
            if blk.mask is not None:
                arr = np.zeros_like(blk.value)
                idx = blk.mask > 0
                n = int(idx.sum())
                arr[idx] = vec[ofs:ofs + n]
            else:
                n = blk.value.size
                arr = np.asarray(vec[ofs:ofs + n], dtype=np.float64).reshape(blk.value.shape).copy()
            values[name] = arr
            ofs += n
        return values

    def state_dict(self):
        state = {n: b.value.copy() for n, b in self.blocks.items()}
        for n, b in self.blocks.items():
            if b.mask is not None:
                state[f"{n}.mask"] = b.mask.copy()
        for n, (m, v) in self.bn_stats.items():
            state[f"{n}.rmean"] = m.copy()
            state[f"{n}.rvar"] = v.copy()
        return state

    def load_state_dict(self, state):
        for n, b in self.blocks.items():
            if n in state:
                b.value = np.asarray(state[n], dtype=np.float64).reshape(b.value.shape)
            if f"{n}.mask" in state:
                b.mask = np.asarray(state[f"{n}.mask"], dtype=np.float64).reshape(b.value.shape)
        for n in list(self.bn_stats):
            if f"{n}.rmean" in state:
                self.bn_stats[n] = (np.asarray(state[f"{n}.rmean"], dtype=np.float64).ravel(),
                                    np.asarray(state[f"{n}.rvar"], dtype=np.float64).ravel())


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------

def preset_layers(preset, n_classes, hidden=(256, 256, 256), channels=(8, 16, 32)):
    """Layer list for a named preset architecture."""
    if preset == "mlp":
        layers = []
        for h in hidden:
            layers.append(LayerSpec("dense", width=h))
            layers.append(LayerSpec("activation"))
        layers.append(LayerSpec("dense", width=n_classes))
        return layers
    if preset == "resnet-tiny":
        layers = []
        strides = [1] + [2] * (len(channels) - 1)
        for ch, st in zip(channels, strides):
            layers.append(LayerSpec("conv3x3", width=ch, stride=st))
            layers.append(LayerSpec("batchnorm"))
            layers.append(LayerSpec("activation"))
            layers.append(LayerSpec("residual_block", width=ch))
        layers.append(LayerSpec("global_pool"))
        layers.append(LayerSpec("dense", width=n_classes))
        return layers
    raise BuildError(f"unknown preset {preset!r}")


def _conv_out(h, stride):
    return (h + 2 - 3) // stride + 1


def build_model(spec, seed=0):
    """Construct a Model from a structured description.

    ``spec`` keys: either ``preset`` ("mlp" | "resnet-tiny") or ``layers``
    (a list of LayerSpec/dicts), plus ``in_shape`` and ``classes``.
    Parameters: conv/dense weights are fan-in-scaled normal
    (std = sqrt(2/fan_in)), biases 0, BN gamma=1 beta=0.
    """
    if not spec:
        raise BuildError("empty model spec")
    if "in_shape" not in spec or "classes" not in spec:
        raise BuildError("model spec needs in_shape and classes")
    in_shape = tuple(int(d) for d in spec["in_shape"])
    n_classes = int(spec["classes"])
    if "preset" in spec:
        extra = {}
        if "hidden" in spec:
            extra["hidden"] = tuple(spec["hidden"])
        if "channels" in spec:
            extra["channels"] = tuple(spec["channels"])
        lspecs = preset_layers(spec["preset"], n_classes, **extra)
    elif "layers" in spec:
        lspecs = [ls if isinstance(ls, LayerSpec) else LayerSpec(**ls) for ls in spec["layers"]]
    else:
        raise BuildError("model spec needs a preset or a layers list")
    if not lspecs:
        raise BuildError("empty layer list")

    rng = np.random.default_rng(seed)
    layers, blocks, bn_stats, sites = [], {}, {}, []
    shape = in_shape

    def add_block(name, kind, value, group):
        blocks[name] = ParamBlock(name, kind, value, group)

    def make_conv(name, in_ch, out_ch, stride):
        w = rng.normal(size=(out_ch, in_ch, 3, 3)) * np.sqrt(2.0 / (in_ch * 9))
        add_block(f"{name}.w", "weight", w, name)
        add_block(f"{name}.b", "bias", np.zeros(out_ch), name)
        return _Conv(name, in_ch, out_ch, stride)

    def make_bn(name, dim):
        add_block(f"{name}.g", "bn_scale", np.ones(dim), name)
        add_block(f"{name}.b", "bn_shift", np.zeros(dim), name)
        bn_stats[name] = (np.zeros(dim), np.ones(dim))
        return _BatchNorm(name, dim)

    for i, ls in enumerate(lspecs):
        name = f"L{i:02d}.{ls.kind}"
        if ls.kind == "dense":
            flat_in = int(np.prod(shape))
            flatten = len(shape) > 1
            w = rng.normal(size=(flat_in, ls.width)) * np.sqrt(2.0 / flat_in)
            add_block(f"{name}.w", "weight", w, name)
            add_block(f"{name}.b", "bias", np.zeros(ls.width), name)
            layer = _Dense(name, flat_in, ls.width, flatten)
            if layer.ghost_site:
                sites.append(name)
            shape = (ls.width,)
        elif ls.kind == "conv3x3":
            if len(shape) != 3:
                raise BuildError(f"layer {i} ({ls.kind}): needs (C,H,W) input, has {shape}")
            layer = make_conv(name, shape[0], ls.width, ls.stride)
            if layer.ghost_site:
                sites.append(name)
            shape = (ls.width, _conv_out(shape[1], ls.stride), _conv_out(shape[2], ls.stride))
        elif ls.kind == "batchnorm":
            layer = make_bn(name, shape[0])
        elif ls.kind == "activation":
            layer = _Activation(name, ls.activation)
        elif ls.kind == "residual_block":
            if len(shape) != 3:
                raise BuildError(f"layer {i} ({ls.kind}): needs (C,H,W) input, has {shape}")
            if shape[0] != ls.width:
                raise BuildError(
                    f"layer {i} ({ls.kind}): native skip needs {ls.width} input channels, has {shape[0]}"
                )
            layer = _ResidualBlock(name, ls.width, ls.has_native_skip, ls.activation)
            for conv, bn in ((layer.conv1, layer.bn1), (layer.conv2, layer.bn2)):
                make_conv(conv.name, ls.width, ls.width, 1)
                make_bn(bn.name, ls.width)
            sites.extend([f"{name}.ghost1", f"{name}.ghost2"])
        elif ls.kind == "global_pool":
            if len(shape) != 3:
                raise BuildError(f"layer {i} ({ls.kind}): needs (C,H,W) input, has {shape}")
            layer = _GlobalPool(name)
            shape = (shape[0],)
        else:
            raise BuildError(f"layer {i}: unknown kind {ls.kind!r}")
        layers.append(layer)

    if shape != (n_classes,):
        raise BuildError(f"network output shape {shape} does not match classes {n_classes}")
    return Model(lspecs, layers, blocks, bn_stats, sites, in_shape, n_classes)


# ---------------------------------------------------------------------------
# standalone contract helpers
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta_shift, mode, running_mean, running_var,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization with explicit mode and running statistics.

    Returns ``(out, new_running_mean, new_running_var)``; the inputs are
    never mutated. Train mode normalizes by batch statistics and folds
    them into the running stats; eval mode uses the running stats.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm_forward: mode must be train or eval, got {mode!r}")
    rm = np.asarray(running_mean, dtype=np.float64)
    rv = np.asarray(running_var, dtype=np.float64)
    if mode == "train":
        out, mean, var = ad.batchnorm_train(x, gamma, beta_shift, eps=eps)
        return out, (1 - momentum) * rm + momentum * mean, (1 - momentum) * rv + momentum * var
    return ad.batchnorm_eval(x, gamma, beta_shift, rm, rv, eps=eps), rm, rv


def residual_block_forward(model, block_index, x, alpha, *, training=False,
                           activation=None, beta=1.0):
    """Run the ``block_index``-th residual block of ``model`` on a raw batch."""
    res_layers = [l for l in model.layers if isinstance(l, _ResidualBlock)]
    if not res_layers:
        raise BuildError("model has no residual blocks")
    layer = res_layers[block_index]
    ctx = ForwardContext(training=training, activation=activation, beta=beta,
                         alpha=alpha, update_stats=False)
    P = {n: ad.Tensor(b.value, requires_grad=True, name=n) for n, b in model.blocks.items()}
    return layer.forward(ad.Tensor(x), ctx, P, model.bn_stats)
