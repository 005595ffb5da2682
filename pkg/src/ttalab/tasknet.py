"""Frozen encoder-decoder translation model with per-layer feature taps.

The model is symmetric: spatial dims and channel counts at depth i match those
at depth n-i, so encoder/decoder features can be concatenated channel-wise per
level. The symmetry is also used computationally: each decoder feature adds
its mirror encoder feature (h_j = act(conv(h_{j-1})) + h_{n-j}), which keeps
full-resolution detail flowing to the head instead of everything passing
through the bottleneck. The output head is tanh, so outputs live in [-1, 1];
the final conv is zero-initialised, so an untrained model maps everything to 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ConvLayer, LayerSpec, params_checksum, set_requires_grad
from .tensor import LrSchedule, Tensor, adam_step, make_adam, zero_grads


def default_layer_plan(n_layers: int = 7, io_channels: int = 1,
                       base_channels: int = 16, max_channels: int = 64) -> list[LayerSpec]:
    """Symmetric n-layer plan: encoder (first layer full-res, then stride-2),
    bottleneck layer(s), nearest-upsample decoder, tanh output head."""
    if not 5 <= n_layers <= 9:
        raise ValueError(f"n_layers must be in 5..9, got {n_layers}")
    k = (n_layers - 1) // 2
    mid = n_layers - 2 * k  # 1 for odd n, 2 for even
    ch = [min(base_channels * 2 ** (i - 1), max_channels) for i in range(1, k + 1)]
    specs: list[LayerSpec] = []
    for j in range(1, k + 1):
        specs.append(LayerSpec(in_ch=io_channels if j == 1 else ch[j - 2],
                               out_ch=ch[j - 1], stride=1 if j == 1 else 2))
    for _ in range(mid):
        specs.append(LayerSpec(in_ch=ch[-1], out_ch=ch[-1], stride=1))
    for j in range(k + mid + 1, n_layers):
        i = n_layers - j  # mirrored encoder depth, k-1 .. 1
        specs.append(LayerSpec(in_ch=ch[i], out_ch=ch[i - 1], upsample=True))
    specs.append(LayerSpec(in_ch=ch[0], out_ch=io_channels, activation="tanh"))
    return specs


@dataclass
class FeatureTrace:
    """Per-depth feature maps h_1..h_n of one forward pass; h_n is the output."""

    features: dict[int, Tensor]
    output: Tensor

    def spatial(self, depth: int) -> tuple[int, int]:
        return self.features[depth].data.shape[-2:]


class TaskModel:
    """n-layer translation network; frozen after training, taps at every depth."""

    def __init__(self, n_layers: int = 7, io_channels: int = 1, image_size: int = 32,
                 base_channels: int = 16, max_channels: int = 64, seed: int = 0):
        self.n_layers = n_layers
        self.io_channels = io_channels
        self.image_size = image_size
        self.base_channels = base_channels
        self.max_channels = max_channels
        self.seed = seed
        self.trained_epochs = 0
        rng = np.random.default_rng(seed)
        specs = default_layer_plan(n_layers, io_channels, base_channels, max_channels)
        # zero-init the output head so the fresh model maps to tanh(0) = 0
        self.layers = [ConvLayer(s, rng, zero_init=(i == len(specs) - 1))
                       for i, s in enumerate(specs)]

    @property
    def num_levels(self) -> int:
        """Intermediate reconstruction levels: floor((n-1)/2)."""
        return (self.n_layers - 1) // 2

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def checksum(self) -> str:
        return params_checksum(self.params())

    def channels_at(self, depth: int) -> int:
        return self.layers[depth - 1].spec.out_ch

    def forward_trace(self, x: Tensor, feature_hook=None) -> FeatureTrace:
        """Forward pass recording every tap; feature_hook(depth, h) -> h may
        replace an intermediate feature (depths 1..n-1) before propagation.

        Depths k+1..n-1 add their mirror encoder feature h_{n-depth} after the
        activation (the hook, when present, has already run on the mirror).
        """
        h = x
        features: dict[int, Tensor] = {}
        for depth, layer in enumerate(self.layers, start=1):
            h = layer.forward(h)
            if 2 * depth > self.n_layers and depth < self.n_layers:
                h = T.add(h, features[self.n_layers - depth])
            if feature_hook is not None and depth < self.n_layers:
                h = feature_hook(depth, h)
            features[depth] = h
        return FeatureTrace(features=features, output=h)

    def config_dict(self) -> dict:
        return {"n_layers": self.n_layers, "io_channels": self.io_channels,
                "image_size": self.image_size, "base_channels": self.base_channels,
                "max_channels": self.max_channels, "seed": self.seed,
                "trained_epochs": self.trained_epochs}


def translate(model: TaskModel, x: Tensor) -> FeatureTrace:
    """Deterministic unadapted forward pass with all taps recorded."""
    if x.data.shape[-3:] != (model.io_channels, model.image_size, model.image_size):
        raise ValueError(f"input shape {x.shape} does not match model io "
                         f"({model.io_channels},{model.image_size},{model.image_size})")
    return model.forward_trace(x)


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    lr_by_epoch: list[float] = field(default_factory=list)
    seed: int = 0

    @property
    def improved(self) -> bool:
        return len(self.epoch_losses) > 0 and self.epoch_losses[-1] < self.epoch_losses[0]


def _iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_task(model: TaskModel, dataset, schedule: LrSchedule, seed: int = 0,
               batch_size: int = 8) -> TrainReport:
    """Supervised training of the task model with a per-pixel L1 objective.

    dataset: sequence of (x, y) float32 arrays shaped [C,H,W].
    Shuffling is deterministic from the seed; the Adam lr follows the schedule
    per epoch. Raises on an empty dataset.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = model.params()
    set_requires_grad(params, True)
    adam = make_adam(params, schedule.base_lr)
    xs = np.stack([np.asarray(x, dtype=np.float32) for x, _ in dataset])
    ys = np.stack([np.asarray(y, dtype=np.float32) for _, y in dataset])
    report = TrainReport(seed=seed)
    for epoch in range(schedule.total_epochs):
        adam.lr = schedule.lr(epoch)
        rng = np.random.default_rng((seed, epoch))
        losses = []
        for idx in _iter_batches(len(dataset), batch_size, rng):
            xb = Tensor(xs[idx])
            yb = Tensor(ys[idx])
            trace = model.forward_trace(xb)
            loss = T.l1_distance(trace.output, yb)
            zero_grads(params)
            T.backward(loss)
            adam_step(params, adam)
            losses.append(loss.item())
        report.epoch_losses.append(float(np.mean(losses)))
        report.lr_by_epoch.append(adam.lr)
    set_requires_grad(params, False)
    model.trained_epochs += schedule.total_epochs
    return report


# ---------------------------------------------------------------------------
# CycleGAN loss terms as standalone computable operations. The default task
# training above is supervised; these exist as unit-tested building blocks.

_PROB_CLAMP = 1e-7


def _arr(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)


def adversarial_loss(d_real, d_fake) -> float:
    """mean[log d_real] + mean[log(1 - d_fake)] on given discriminator maps.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    dr = np.clip(_arr(d_real), _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    df = np.clip(_arr(d_fake), _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    return float(np.log(dr).mean() + np.log(1.0 - df).mean())


def cycle_consistency_loss(x, f_g_x, y, g_f_y) -> float:
    """mean|F(G(x)) - x| + mean|G(F(y)) - y|."""
    xa, fg = _arr(x), _arr(f_g_x)
    ya, gf = _arr(y), _arr(g_f_y)
    if xa.shape != fg.shape or ya.shape != gf.shape:
        raise ValueError("shape mismatch in cycle_consistency_loss")
    return float(np.abs(fg - xa).mean() + np.abs(gf - ya).mean())


def identity_loss(g_x, x, f_y, y) -> float:
    """mean|G(x) - x| + mean|F(y) - y|."""
    gx, xa = _arr(g_x), _arr(x)
    fy, ya = _arr(f_y), _arr(y)
    if gx.shape != xa.shape or fy.shape != ya.shape:
        raise ValueError("shape mismatch in identity_loss")
    return float(np.abs(gx - xa).mean() + np.abs(fy - ya).mean())


def cyclegan_total_loss(adv: float, cyc: float, idt: float,
                        lambda1: float = 10.0, lambda2: float = 5.0) -> float:
    """adv + lambda1 * cyc + lambda2 * idt."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return float(adv + lambda1 * cyc + lambda2 * idt)
