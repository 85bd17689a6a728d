"""Minimal reverse-mode tape and trainer for voting networks.

The tape is a flat list of nodes created in topological order: a small
convolutional trunk feeding three 1x1 heads (sigmoid confidence, two
linearly scaled offset planes), optionally a differentiable vote node, and
weighted loss terms. It exists to drive gradients through the voting
operator end to end at desk scale, nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import synthdata
from .errors import ConfigError, ShapeError
from .field import DisplacementField, ScalarField, displacement_from_arrays, field_from_array
from .kernels import KernelSpec
from .supervision import (
    KeypointSet,
    LossParams,
    bce_loss,
    huber_loss_masked,
    localization_errors,
    make_disk_target,
    make_gaussian_target,
    make_offset_target,
    mse_loss,
    pck_metric,
)
from .voting import ADDITIVE, MODES, VoteGraph, chain_graph, vote_backward, vote_forward, within_graph

VARIANTS = ("novote", "posthoc", "mdn")
TASKS = ("within", "cross")


class Param:
    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


class Node:
    """One tape entry; ``out`` is set by forward, ``grad`` by children."""

    def __init__(self, *parents: "Node"):
        self.parents = parents
        self.out = None
        self.grad = None

    def forward(self):
        raise NotImplementedError

    def backward(self):
        raise NotImplementedError

    def push(self, parent: "Node", g):
        parent.grad = g if parent.grad is None else parent.grad + g


class InputNode(Node):
    def set(self, value: np.ndarray):
        self.out = value

    def forward(self):
        pass

    def backward(self):
        pass


class _ColBuffer:
    """Reusable zero-padded im2col scratch; the border is written once."""

    def __init__(self, channels: int, k: int, height: int, width: int):
        pad = k // 2
        self.k = k
        self.pad = pad
        self.shape = (channels, height, width)
        self.padded = np.zeros((channels, height + 2 * pad, width + 2 * pad))
        self.patches = np.empty((channels, k, k, height, width))

    def fill(self, x: np.ndarray) -> np.ndarray:
        c, height, width = self.shape
        self.padded[:, self.pad : self.pad + height, self.pad : self.pad + width] = x
        for u in range(self.k):
            for v in range(self.k):
                self.patches[:, u, v] = self.padded[:, u : u + height, v : v + width]
        return self.patches.reshape(c * self.k * self.k, height * width)


class Conv2d(Node):
    """Same-padding stride-1 cross-correlation with odd square kernels."""

    def __init__(self, parent: Node, weight: Param):
        super().__init__(parent)
        if weight.value.ndim != 4:
            raise ShapeError("conv weights must be (out_ch, in_ch, k, k)")
        kh, kw = weight.value.shape[2:]
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"conv kernels must be odd squares, got {kh}x{kw}")
        self.weight = weight
        self._fwd_buf: _ColBuffer | None = None
        self._bwd_buf: _ColBuffer | None = None
        self._patches = None

    def _buffer(self, which: str, x: np.ndarray) -> np.ndarray:
        k = self.weight.value.shape[2]
        buf = getattr(self, which)
        if buf is None or buf.shape != x.shape:
            buf = _ColBuffer(x.shape[0], k, x.shape[1], x.shape[2])
            setattr(self, which, buf)
        return buf.fill(x)

    def forward(self):
        x = self.parents[0].out
        w = self.weight.value
        cout, cin, k, _ = w.shape
        if x.shape[0] != cin:
            raise ShapeError(f"conv expects {cin} input channels, got {x.shape[0]}")
        _, height, width = x.shape
        self._patches = self._buffer("_fwd_buf", x)
        self.out = (w.reshape(cout, -1) @ self._patches).reshape(cout, height, width)

    def backward(self):
        w = self.weight.value
        cout, cin, k, _ = w.shape
        _, height, width = self.parents[0].out.shape
        gout = self.grad.reshape(cout, -1)
        self.weight.grad += (gout @ self._patches.T).reshape(w.shape)
        # Input gradient is a correlation of the output gradient with the
        # spatially flipped, channel-swapped weights.
        wt = w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1].reshape(cin, -1)
        gpatches = self._buffer("_bwd_buf", self.grad)
        self.push(self.parents[0], (wt @ gpatches).reshape(cin, height, width))
        self._patches = None


class Bias(Node):
    def __init__(self, parent: Node, bias: Param):
        super().__init__(parent)
        self.bias = bias

    def forward(self):
        self.out = self.parents[0].out + self.bias.value[:, None, None]

    def backward(self):
        self.bias.grad += self.grad.sum(axis=(1, 2))
        self.push(self.parents[0], self.grad)


class Relu(Node):
    def forward(self):
        self.out = np.maximum(self.parents[0].out, 0.0)

    def backward(self):
        self.push(self.parents[0], self.grad * (self.parents[0].out > 0.0))


class Sigmoid(Node):
    def forward(self):
        x = self.parents[0].out
        # Evaluate from the non-overflowing side of the exponential.
        pos = x >= 0
        ex = np.exp(np.where(pos, -x, x))
        self.out = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward(self):
        self.push(self.parents[0], self.grad * self.out * (1.0 - self.out))


class Scale(Node):
    """Multiplication by a learnable scalar."""

    def __init__(self, parent: Node, scale: Param):
        super().__init__(parent)
        self.scale = scale

    def forward(self):
        self.out = self.parents[0].out * self.scale.value

    def backward(self):
        self.scale.grad += np.sum(self.grad * self.parents[0].out)
        self.push(self.parents[0], self.grad * self.scale.value)


class AvgPool(Node):
    """Non-overlapping mean pooling by an integer factor."""

    def __init__(self, parent: Node, factor: int):
        super().__init__(parent)
        self.factor = factor

    def forward(self):
        c, height, width = self.parents[0].out.shape
        f = self.factor
        if height % f or width % f:
            raise ShapeError(f"pool factor {f} must divide the grid {height}x{width}")
        self.out = self.parents[0].out.reshape(c, height // f, f, width // f, f).mean(axis=(2, 4))

    def backward(self):
        f = self.factor
        g = self.grad / (f * f)
        self.push(self.parents[0], np.repeat(np.repeat(g, f, axis=1), f, axis=2))


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Dense 1-D interpolation matrix mapping a coarse axis to a fine one."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        s = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(s))
        frac = s - i0
        a = min(max(i0, 0), n_in - 1)
        b = min(max(i0 + 1, 0), n_in - 1)
        w[o, a] += 1.0 - frac
        w[o, b] += frac
    return w


class BilinearUp(Node):
    """Bilinear upsampling by an integer factor (adjoint used in backward)."""

    def __init__(self, parent: Node, factor: int):
        super().__init__(parent)
        self.factor = factor
        self._wy = None
        self._wx = None

    def forward(self):
        x = self.parents[0].out
        _, height, width = x.shape
        f = self.factor
        if self._wy is None or self._wy.shape != (height * f, height):
            self._wy = _bilinear_matrix(height * f, height)
            self._wx = _bilinear_matrix(width * f, width)
        self.out = self._wy @ x @ self._wx.T

    def backward(self):
        self.push(self.parents[0], self._wy.T @ self.grad @ self._wx)


class MdnVote(Node):
    """Differentiable vote node; offsets arrive normalized and are scaled to
    pixels by the task's fixed normalizer before voting."""

    def __init__(self, c: Node, ox: Node, oy: Node, spec: KernelSpec, mode: str,
                 graph: VoteGraph, pixel_scale: float, threads: int = 1):
        super().__init__(c, ox, oy)
        self.spec = spec
        self.mode = mode
        self.graph = graph
        self.pixel_scale = float(pixel_scale)
        self.threads = threads
        self._cache = None

    def forward(self):
        c = ScalarField(self.parents[0].out.copy())
        o = displacement_from_arrays(
            self.parents[1].out * self.pixel_scale, self.parents[2].out * self.pixel_scale
        )
        m, ctx = vote_forward(c, o, self.spec, self.mode, self.graph, threads=self.threads)
        self.out = m.data
        self._cache = (c, o, ctx)

    def backward(self):
        c, o, ctx = self._cache
        gc, gox, goy = vote_backward(
            ScalarField(self.grad.copy()), c, o, self.spec, self.mode, self.graph, ctx,
            threads=self.threads,
        )
        self.push(self.parents[0], gc.data)
        self.push(self.parents[1], gox.data * self.pixel_scale)
        self.push(self.parents[2], goy.data * self.pixel_scale)
        self._cache = None


class FieldLoss(Node):
    """BCE or MSE against a per-step target field."""

    def __init__(self, parent: Node, kind: str):
        super().__init__(parent)
        if kind not in ("bce", "mse"):
            raise ConfigError(f"unknown field loss {kind!r}")
        self.kind = kind
        self.target: ScalarField | None = None
        self._grad_field = None

    def forward(self):
        pred = ScalarField(self.parents[0].out.copy())
        fn = bce_loss if self.kind == "bce" else mse_loss
        self.out, self._grad_field = fn(pred, self.target)

    def backward(self):
        self.push(self.parents[0], self.grad * self._grad_field.data)


class OffsetLoss(Node):
    """Masked Huber loss over both offset planes."""

    def __init__(self, ox: Node, oy: Node, delta: float):
        super().__init__(ox, oy)
        self.delta = delta
        self.target: tuple[ScalarField, ScalarField, ScalarField] | None = None
        self._grads = None

    def forward(self):
        tx, ty, mask = self.target
        lx, gx = huber_loss_masked(ScalarField(self.parents[0].out.copy()), tx, mask, self.delta)
        ly, gy = huber_loss_masked(ScalarField(self.parents[1].out.copy()), ty, mask, self.delta)
        self.out = lx + ly
        self._grads = (gx, gy)

    def backward(self):
        self.push(self.parents[0], self.grad * self._grads[0].data)
        self.push(self.parents[1], self.grad * self._grads[1].data)


class WeightedSum(Node):
    def __init__(self, terms: list[Node], weights: list[float]):
        super().__init__(*terms)
        self.weights = list(weights)

    def forward(self):
        self.out = float(sum(w * t.out for w, t in zip(self.weights, self.parents)))

    def backward(self):
        for w, t in zip(self.weights, self.parents):
            self.push(t, self.grad * w)


class Tape:
    """Nodes in creation order; forward runs them in order, backward reversed."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[Param] = []

    def add(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def param(self, name: str, value: np.ndarray) -> Param:
        p = Param(name, value)
        self.params.append(p)
        return p

    def forward_backward(self, loss_node: Node) -> float:
        for p in self.params:
            p.zero_grad()
        for n in self.nodes:
            n.grad = None
            n.forward()
        loss_node.grad = 1.0
        for n in reversed(self.nodes):
            if n.grad is not None:
                n.backward()
        return float(loss_node.out)

    def forward_only(self, upto: Node):
        for n in self.nodes:
            n.forward()
            if n is upto:
                return n.out
        raise ShapeError("node is not on this tape")


@dataclass
class RmsPropState:
    """Per-parameter mean-square accumulators for the RMSProp update."""

    learning_rate: float = 0.0025
    decay: float = 0.99
    epsilon: float = 1e-8
    acc: dict = dc_field(default_factory=dict)


def rmsprop_step(params: list[Param], state: RmsPropState) -> None:
    """acc <- decay*acc + (1-decay)*g^2;  p <- p - lr*g/(sqrt(acc)+eps)."""
    for p in params:
        acc = state.acc.get(p.name)
        if acc is None:
            acc = np.zeros_like(p.value)
        acc = state.decay * acc + (1.0 - state.decay) * p.grad * p.grad
        state.acc[p.name] = acc
        p.value -= state.learning_rate * p.grad / (np.sqrt(acc) + state.epsilon)


# ---------------------------------------------------------------------------
# Network assembly and the training loop.


@dataclass
class TrainConfig:
    task: str = "within"
    variant: str = "mdn"
    mode: str = "noisy_or"
    kernel: KernelSpec = KernelSpec("gaussian", 5)
    steps: int = 800
    seed: int = 0
    learning_rate: float = 0.0025
    decay: float = 0.99
    loss: LossParams = LossParams()
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    trunk_layers: int = 3
    trunk_channels: int = 16
    trunk_ksize: int = 5
    pool_factor: int = 8
    pck_tol: float = 2.0
    eval_every: int = 0
    eval_limit: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")

    @property
    def graph(self) -> VoteGraph:
        return within_graph(1) if self.task == "within" else chain_graph(3)

    @property
    def offset_normalizer(self) -> float:
        # Within-part offsets are normalized by the vicinity radius; cross-part
        # ones by the output resolution.
        return self.loss.eps_c - 1.0 if self.task == "within" else float(synthdata.SIZE)

    @property
    def occlude(self) -> bool:
        return self.task == "cross"


class PoseNet:
    """Trunk + heads (+ optional vote node) assembled on a tape."""

    def __init__(self, config: TrainConfig):
        self.config = config
        graph = config.graph
        rng = np.random.default_rng(config.seed)
        tape = Tape()
        self.tape = tape
        self.image = tape.add(InputNode())

        # The trunk deliberately loses spatial acuity: after the first conv it
        # pools to a coarse grid, and the head inputs are produced by bilinear
        # upsampling. Smooth, band-limited predictions are the regime in which
        # displacement voting has something to add.
        x = self.image
        cin = 1
        for layer in range(config.trunk_layers):
            cout = config.trunk_channels
            k = config.trunk_ksize
            w = tape.param(
                f"trunk{layer}.w",
                rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k)),
            )
            b = tape.param(f"trunk{layer}.b", np.zeros(cout))
            x = tape.add(Conv2d(x, w))
            x = tape.add(Bias(x, b))
            x = tape.add(Relu(x))
            if layer == 0 and config.pool_factor > 1:
                x = tape.add(AvgPool(x, config.pool_factor))
            cin = cout
        if config.pool_factor > 1:
            x = tape.add(BilinearUp(x, config.pool_factor))

        def head(name: str, channels: int, bias_init: float = 0.0) -> Node:
            w = tape.param(f"{name}.w", rng.normal(0.0, 0.01, (channels, cin, 1, 1)))
            b = tape.param(f"{name}.b", np.full(channels, bias_init))
            return tape.add(Bias(tape.add(Conv2d(x, w)), b))

        # Start the confidence head at the disk prior so the heavily
        # imbalanced BCE does not saturate the sigmoid in the first steps.
        side = 2.0 * config.loss.eps_c + 1.0
        prior = min(0.5, side * side / float(synthdata.SIZE * synthdata.SIZE))
        self.c_head = tape.add(
            Sigmoid(head("conf", graph.num_joints, float(np.log(prior / (1.0 - prior)))))
        )
        sx = tape.param("ox.scale", np.array(1.0))
        sy = tape.param("oy.scale", np.array(1.0))
        self.ox_head = tape.add(Scale(head("ox", graph.num_edges), sx))
        self.oy_head = tape.add(Scale(head("oy", graph.num_edges), sy))

        self.vote = None
        if config.variant == "mdn":
            self.vote = tape.add(
                MdnVote(self.c_head, self.ox_head, self.oy_head, config.kernel, config.mode,
                        graph, config.offset_normalizer, config.threads)
            )

        self.loss_conf = tape.add(FieldLoss(self.c_head, "bce"))
        self.loss_offset = tape.add(OffsetLoss(self.ox_head, self.oy_head, config.loss.huber_delta))
        weights = list(config.loss_weights)
        terms = [self.loss_conf, self.loss_offset]
        if config.variant == "novote":
            weights = [weights[0], 0.0]
        elif config.variant == "posthoc":
            weights = [weights[0], weights[1]]
        self.loss_final = None
        if self.vote is not None:
            kind = "mse" if config.mode == ADDITIVE else "bce"
            self.loss_final = tape.add(FieldLoss(self.vote, kind))
            terms.append(self.loss_final)
            weights = [weights[0], weights[1], config.loss_weights[2]]
        self.total = tape.add(WeightedSum(terms, weights))

    def set_scene(self, scene: synthdata.Scene):
        cfg = self.config
        shape = (scene.image.height, scene.image.width)
        self.image.set(scene.image.data)
        self.loss_conf.target = make_disk_target(scene.keypoints, cfg.loss.eps_c, shape)
        self.loss_offset.target = make_offset_target(
            scene.keypoints, cfg.graph, cfg.loss.eps_c, cfg.offset_normalizer, shape
        )
        if self.loss_final is not None:
            if self.loss_final.kind == "mse":
                self.loss_final.target = make_gaussian_target(
                    scene.keypoints, cfg.loss.gaussian_target_sigma, shape
                )
            else:
                self.loss_final.target = make_disk_target(scene.keypoints, cfg.loss.eps_m, shape)

    def train_step(self, scene: synthdata.Scene) -> dict:
        self.set_scene(scene)
        total = self.tape.forward_backward(self.total)
        return {
            "total": total,
            "conf": float(self.loss_conf.out),
            "offset": float(self.loss_offset.out),
            "final": float(self.loss_final.out) if self.loss_final is not None else 0.0,
        }

    def predict(self, image: ScalarField) -> ScalarField:
        """Inference-time localization map: voted mass where the variant votes
        (post-hoc variants vote here even though training did not), otherwise
        the raw confidence head."""
        cfg = self.config
        self.image.set(image.data)
        for n in self.tape.nodes:
            if isinstance(n, (FieldLoss, OffsetLoss, WeightedSum, MdnVote)):
                break
            n.forward()
        c = ScalarField(self.c_head.out.copy())
        if cfg.variant == "novote":
            return c
        o = displacement_from_arrays(
            self.ox_head.out * cfg.offset_normalizer, self.oy_head.out * cfg.offset_normalizer
        )
        m, _ = vote_forward(c, o, cfg.kernel, cfg.mode, cfg.graph, threads=cfg.threads)
        return m

    def heads(self, image: ScalarField) -> tuple[ScalarField, DisplacementField]:
        cfg = self.config
        self.image.set(image.data)
        for n in self.tape.nodes:
            if isinstance(n, (FieldLoss, OffsetLoss, WeightedSum, MdnVote)):
                break
            n.forward()
        o = displacement_from_arrays(
            self.ox_head.out * cfg.offset_normalizer, self.oy_head.out * cfg.offset_normalizer
        )
        return ScalarField(self.c_head.out.copy()), o


@dataclass
class TrainResult:
    config: TrainConfig
    model: PoseNet
    metrics: list[dict]
    final: dict

    def metrics_csv(self) -> str:
        cols = ["step", "loss_total", "loss_conf", "loss_offset", "loss_final",
                "pck", "mean_err_mid"]
        lines = [",".join(cols)]
        for row in self.metrics:
            lines.append(",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return f"{v:.17g}"


def _eval_scene(task: str, seed: int, occlude: bool) -> synthdata.Scene:
    if task == "within":
        return synthdata.gen_within(seed)
    return synthdata.gen_cross(seed, occlude=occlude)


def evaluate(model: PoseNet, limit: int | None = None) -> dict:
    """Held-out PCK and per-joint localization error for a trained model."""
    cfg = model.config
    seeds = list(synthdata.eval_seeds())
    if limit is not None:
        seeds = seeds[:limit]
    pcks = []
    errs = []
    for s in seeds:
        scene = _eval_scene(cfg.task, s, cfg.occlude)
        pred = model.predict(scene.image)
        pcks.append(pck_metric(pred, scene.keypoints, cfg.pck_tol))
        errs.append(localization_errors(pred, scene.keypoints))
    err = np.array(errs)
    mean_err = np.nanmean(err, axis=0)
    return {
        "pck": float(np.mean(pcks)),
        "mean_err": [float(v) for v in mean_err],
        "mean_err_mid": float(mean_err[1]) if len(mean_err) > 2 else float(mean_err[0]),
        "scenes": len(seeds),
    }


def train(config: TrainConfig) -> TrainResult:
    """Train a variant to convergence; deterministic for a fixed seed."""
    model = PoseNet(config)
    state = RmsPropState(learning_rate=config.learning_rate, decay=config.decay)
    metrics: list[dict] = []
    eval_every = config.eval_every if config.eval_every > 0 else max(1, config.steps)

    def log(step: int, sums: dict, count: int):
        ev = evaluate(model, config.eval_limit)
        denom = max(1, count)
        metrics.append({
            "step": step,
            "loss_total": sums["total"] / denom,
            "loss_conf": sums["conf"] / denom,
            "loss_offset": sums["offset"] / denom,
            "loss_final": sums["final"] / denom,
            "pck": ev["pck"],
            "mean_err_mid": ev["mean_err_mid"],
        })
        return ev

    sums = {"total": 0.0, "conf": 0.0, "offset": 0.0, "final": 0.0}
    ev = log(0, sums, 0)
    count = 0
    for step in range(1, config.steps + 1):
        seed = synthdata.TRAIN_SEED_START + (step - 1 + 911 * config.seed) % (
            synthdata.TRAIN_SEED_END - synthdata.TRAIN_SEED_START
        )
        scene = _eval_scene(config.task, seed, config.occlude)
        losses = model.train_step(scene)
        rmsprop_step(model.tape.params, state)
        for k in sums:
            sums[k] += losses[k]
        count += 1
        if step % eval_every == 0 or step == config.steps:
            ev = log(step, sums, count)
            sums = {k: 0.0 for k in sums}
            count = 0
    return TrainResult(config, model, metrics, ev)
