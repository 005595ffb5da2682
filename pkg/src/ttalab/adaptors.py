"""Per-sample trainable adaptors and the M-step test-time adaptation loop.

A fresh AdaptorSet is an exact identity end to end: the input adaptor is a
residual conv stack with a zero-initialised final layer, and every level
adaptor is a 1x1 conv initialised to the identity channel map. Only adaptor
parameters are ever updated at test time; the task model and the
reconstruction suite stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ConvLayer, LayerSpec
from .recon import ReconSuite, ShiftErrors, concat_symmetric
from .tasknet import FeatureTrace, TaskModel
from .tensor import NumericError, Tensor, adam_step, backward, make_adam, zero_grads


@dataclass(frozen=True)
class Configuration:
    """Non-empty subset of intermediate levels 1..k, sorted ascending."""

    active: tuple[int, ...]

    def __post_init__(self):
        if len(self.active) == 0:
            raise ValueError("configuration must be non-empty")
        if list(self.active) != sorted(set(self.active)):
            raise ValueError(f"configuration indices must be sorted and unique: {self.active}")
        if self.active[0] < 1:
            raise ValueError(f"level indices start at 1: {self.active}")

    @staticmethod
    def of(levels) -> "Configuration":
        return Configuration(tuple(sorted(set(int(i) for i in levels))))

    def code(self) -> int:
        """Bitmask over levels, used to key per-configuration RNG streams."""
        return sum(1 << (i - 1) for i in self.active)

    def __str__(self) -> str:
        return "+".join(str(i) for i in self.active)


class InputAdaptor:
    """Residual conv stack on the input image: x + f(x), f zero-initialised."""

    def __init__(self, io_channels: int, width: int, rng: np.random.Generator):
        self.conv1 = ConvLayer(LayerSpec(in_ch=io_channels, out_ch=width), rng)
        self.conv2 = ConvLayer(LayerSpec(in_ch=width, out_ch=io_channels,
                                         activation="linear"), rng, zero_init=True)

    def params(self) -> list[Tensor]:
        return self.conv1.params() + self.conv2.params()

    def forward(self, x: Tensor) -> Tensor:
        return T.add(x, self.conv2.forward(self.conv1.forward(x)))


class LevelAdaptor:
    """1x1 channel map applied at depth i and its mirror n-i.

    When both placements have the same channel count a single parameter block
    is shared across them; otherwise two blocks sit under one selector bit.
    """

    def __init__(self, ch_enc: int, ch_dec: int):
        self.shared = ch_enc == ch_dec
        self._blocks = [self._identity_block(ch_enc)]
        if not self.shared:
            self._blocks.append(self._identity_block(ch_dec))

    @staticmethod
    def _identity_block(c: int) -> tuple[Tensor, Tensor]:
        w = np.eye(c, dtype=np.float32).reshape(c, c, 1, 1)
        return Tensor(w), Tensor(np.zeros(c, dtype=np.float32))

    def params(self) -> list[Tensor]:
        return [t for blk in self._blocks for t in blk]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params())

    def forward(self, h: Tensor, placement: int) -> Tensor:
        w, b = self._blocks[0 if self.shared else placement]
        return T.conv2d_1x1(h, w, b)


class AdaptorSet:
    """Input adaptor, per-level 1x1 adaptors, and the per-level selector."""

    def __init__(self, task: TaskModel, seed: int = 0, input_width: int = 8):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.n_layers = task.n_layers
        self.num_levels = task.num_levels
        self.input_adaptor = InputAdaptor(task.io_channels, input_width, rng)
        self.level_adaptors: dict[int, LevelAdaptor] = {}
        for i in range(1, task.num_levels + 1):
            self.level_adaptors[i] = LevelAdaptor(task.channels_at(i),
                                                  task.channels_at(task.n_layers - i))
        self.selector: set[int] = set()

    def set_selector(self, omega: Configuration | None) -> None:
        if omega is None:
            self.selector = set()
            return
        if max(omega.active) > self.num_levels:
            raise ValueError(f"configuration {omega} exceeds {self.num_levels} levels")
        self.selector = set(omega.active)

    def params(self) -> list[Tensor]:
        out = self.input_adaptor.params()
        for i in sorted(self.level_adaptors):
            out.extend(self.level_adaptors[i].params())
        return out

    def trainable_params(self, omega: Configuration) -> list[Tensor]:
        out = self.input_adaptor.params()
        for i in omega.active:
            out.extend(self.level_adaptors[i].params())
        return out

    def param_count(self, level: int) -> int:
        return self.level_adaptors[level].param_count()


def init_adaptors(task: TaskModel, seed: int = 0, input_width: int = 8) -> AdaptorSet:
    """Fresh identity-initialised adaptor set for one sample."""
    return AdaptorSet(task, seed=seed, input_width=input_width)


@dataclass
class AdaptedPass:
    """One adapted forward pass; eps_* are taped scalar Tensors."""

    x_a: Tensor
    trace: FeatureTrace
    eps_x: Tensor
    eps_i: dict[int, Tensor]
    eps_y: Tensor

    def errors(self) -> ShiftErrors:
        return ShiftErrors(eps_x=self.eps_x.item(),
                           eps_i={i: t.item() for i, t in self.eps_i.items()},
                           eps_y=self.eps_y.item())


def _adapted_pass(task: TaskModel, suite: ReconSuite, adaptors: AdaptorSet,
                  omega: Configuration, x: Tensor) -> AdaptedPass:
    adaptors.set_selector(omega)
    active = adaptors.selector
    mirrors = {task.n_layers - i: i for i in active}

    def hook(depth: int, h: Tensor) -> Tensor:
        if depth in active:
            return adaptors.level_adaptors[depth].forward(h, placement=0)
        if depth in mirrors:
            return adaptors.level_adaptors[mirrors[depth]].forward(h, placement=1)
        return h

    x_a = adaptors.input_adaptor.forward(x)
    trace = task.forward_trace(x_a, feature_hook=hook)
    eps_x = suite.member_error("x", x_a)
    eps_y = suite.member_error("y", trace.output)
    eps_i = {}
    for i in sorted(active):
        hc = concat_symmetric(trace, i, task.n_layers)
        eps_i[i] = suite.member_error(i, hc)
    return AdaptedPass(x_a=x_a, trace=trace, eps_x=eps_x, eps_i=eps_i, eps_y=eps_y)


def adapted_forward(task: TaskModel, suite: ReconSuite, adaptors: AdaptorSet,
                    omega: Configuration, x) -> tuple[FeatureTrace, ShiftErrors]:
    """Forward pass with the selector honoring omega; errors for active levels only."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    with T.no_grad():
        ap = _adapted_pass(task, suite, adaptors, omega, xt)
    return ap.trace, ap.errors()


@dataclass
class StepRecord:
    step: int
    loss: float
    eps_x: float
    eps_i: dict[int, float]
    eps_y: float
    chosen: bool = False

    def to_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, "eps_x": self.eps_x,
                "eps_i": {str(k): v for k, v in self.eps_i.items()},
                "eps_y": self.eps_y, "chosen": self.chosen}


@dataclass
class StepTrace:
    """Record of one configuration's M adaptation steps with a best-step snapshot."""

    omega: tuple[int, ...]
    steps: list[StepRecord] = field(default_factory=list)
    best_step: int = 0
    best_eps_y: float = float("inf")
    best_output: np.ndarray | None = None
    failed: bool = False

    def to_dict(self) -> dict:
        return {"omega": list(self.omega), "best_step": self.best_step,
                "best_eps_y": self.best_eps_y, "failed": self.failed,
                "steps": [s.to_dict() for s in self.steps]}


def adapt_steps(task: TaskModel, suite: ReconSuite, adaptors: AdaptorSet,
                omega: Configuration, x, m_steps: int, lr: float = 3e-4,
                loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> StepTrace:
    """Run M adaptation iterations and snapshot the output at the lowest-eps_y step.

    Each step: adapted forward, record eps_y, assemble the adaptation loss
    (w_x*eps_x + w_mid*sum eps_i + w_y*eps_y), backprop, Adam update on the
    input adaptor and the active level adaptors only. Step 1 therefore
    evaluates the identity-initialised adaptors, so the returned best-step
    eps_y can never exceed the unadapted error. A numeric failure mid-run is
    recorded and the best snapshot so far (or the unadapted output) stands.
    """
    if m_steps < 1:
        raise ValueError("m_steps must be >= 1")
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    w_x, w_mid, w_y = loss_weights
    params = adaptors.trainable_params(omega)
    for p in params:
        p.requires_grad = True
    adam = make_adam(params, lr)
    trace = StepTrace(omega=omega.active)
    try:
        for step in range(1, m_steps + 1):
            ap = _adapted_pass(task, suite, adaptors, omega, xt)
            eps_y_val = ap.eps_y.item()
            loss = T.scale(ap.eps_y, w_y)
            loss = T.add(loss, T.scale(ap.eps_x, w_x))
            for i in sorted(ap.eps_i):
                loss = T.add(loss, T.scale(ap.eps_i[i], w_mid))
            trace.steps.append(StepRecord(step=step, loss=loss.item(),
                                          eps_x=ap.eps_x.item(),
                                          eps_i={i: t.item() for i, t in ap.eps_i.items()},
                                          eps_y=eps_y_val))
            if eps_y_val < trace.best_eps_y:
                trace.best_eps_y = eps_y_val
                trace.best_step = step
                trace.best_output = ap.trace.output.data.copy()
            zero_grads(params)
            backward(loss)
            adam_step(params, adam)
    except NumericError:
        trace.failed = True
    finally:
        for p in params:
            p.requires_grad = False
    if trace.best_output is None:
        # failure before the first record: fall back to the unadapted output
        with T.no_grad():
            unadapted = task.forward_trace(xt)
            trace.best_eps_y = suite.member_error("y", unadapted.output).item()
            trace.best_output = unadapted.output.data.copy()
            trace.best_step = 0
    for rec in trace.steps:
        rec.chosen = rec.step == trace.best_step
    return trace
