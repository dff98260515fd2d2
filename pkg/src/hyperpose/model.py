"""The pose regressor: shared CNN backbone, dual main/hyper encoder branches, adaptive heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .geometry import LossParams, Pose, RotationRepr, raw_to_quat_np
from .nn import Conv2d, Linear, Module, TransformerEncoder, build_sequence, encode, trunc_normal
from .tensor import ShapeError, Tensor

BRANCHES = ("position", "orientation")
# Which backbone reduction level feeds each branch.
BRANCH_TAP = {"position": 4, "orientation": 3}


class StageShapeError(ShapeError):
    """A tensor arrived at a model seam with the wrong shape."""

    def __init__(self, stage: str, got, expected):
        self.stage = stage
        super().__init__(stage, got, expected, detail=f"shape mismatch at stage '{stage}'")


# ---------------------------------------------------------------------------
# Backbone


class Backbone(Module):
    """Stride-2 conv stages with taps at reductions 3 and 4.

    Each reduction halves the spatial extent (rounding up for odd sizes), so a
    224 input yields 28x28 and 14x14 taps and a 56 input yields 7x7 and 4x4.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, with_terminal: bool = False):
        self.stem = Conv2d(3, cfg.stem_channels, 3, rng, stride=1, padding=1)
        self.stages = []
        size, c_in = cfg.input_size, cfg.stem_channels
        self.extents = []
        for c_out in cfg.stage_channels:
            k = 4 if size % 2 == 0 else 3
            convs = [Conv2d(c_in, c_out, k, rng, stride=2, padding=1)]
            size = convs[0].out_extent(size)
            for _ in range(cfg.convs_per_stage - 1):
                convs.append(Conv2d(c_out, c_out, 3, rng, stride=1, padding=1))
            self.stages.append(convs)
            self.extents.append(size)
            c_in = c_out
        self.channels = tuple(cfg.stage_channels)
        self.terminal = Conv2d(c_in, cfg.terminal_channels, 1, rng) if with_terminal else None
        self.input_size = cfg.input_size
        self.calls = 0

    def named_parameters(self, prefix: str = ""):
        yield from self.stem.named_parameters(f"{prefix}stem.")
        for i, convs in enumerate(self.stages):
            for j, conv in enumerate(convs):
                yield from conv.named_parameters(f"{prefix}stages.{i}.{j}.")
        if self.terminal is not None:
            yield from self.terminal.named_parameters(f"{prefix}terminal.")

    def _children(self):
        yield self.stem
        for convs in self.stages:
            yield from convs
        if self.terminal is not None:
            yield self.terminal

    def tap_shape(self, reduction: int) -> tuple[int, int, int]:
        e = self.extents[reduction - 1]
        return self.channels[reduction - 1], e, e

    def __call__(self, images: Tensor) -> dict:
        expected = (3, self.input_size, self.input_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise StageShapeError("backbone.input", images.shape, ("N",) + expected)
        self.calls += 1
        x = T.swish(self.stem(images))
        taps = {}
        for r, convs in enumerate(self.stages, start=1):
            for conv in convs:
                x = T.swish(conv(x))
            taps[r] = x
        if self.terminal is not None:
            taps["terminal"] = T.swish(self.terminal(x)).mean(axis=(2, 3))
        return taps


# ---------------------------------------------------------------------------
# Heads and weight generation


@dataclass(frozen=True)
class HeadSpec:
    in_dim: int
    widths: tuple[int, ...]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.in_dim,) + tuple(self.widths)
        return [(dims[i], dims[i + 1]) for i in range(len(self.widths))]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def generated_layers(self, regressed: int) -> list[int]:
        """Layer indices produced by the hypernetwork: 1 -> output only, 2 -> input+output, 3 -> all."""
        n = len(self.widths)
        if regressed >= n:
            return list(range(n))
        if regressed == 1:
            return [n - 1]
        return [0, n - 1]

    def generated_size(self, regressed: int, with_bias: bool = True) -> int:
        total = 0
        for i in self.generated_layers(regressed):
            c_in, c_out = self.layer_shapes[i]
            total += c_in * c_out + (c_out if with_bias else 0)
        return total


@dataclass
class GeneratedHeadWeights:
    """Per-image weights for the generated layers of one head (leading axis = image)."""

    spec: HeadSpec
    layers: list[int]
    weights: list[Tensor]
    biases: list[Tensor | None]

    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(w.shape[-2:]) for w in self.weights]

    def bias_shapes(self) -> list[tuple[int, ...] | None]:
        return [None if b is None else tuple(b.shape[-1:]) for b in self.biases]

    def count(self) -> int:
        """Generated scalars per image."""
        n = 0
        for w, b in zip(self.weights, self.biases):
            n += int(np.prod(w.shape[-2:])) + (0 if b is None else b.shape[-1])
        return n

    def flatten(self) -> np.ndarray:
        """[N, count()] array of every generated scalar, layer by layer (weights then bias)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            n = w.shape[0]
            parts.append(w.data.reshape(n, -1))
            if b is not None:
                parts.append(b.data.reshape(n, -1))
        return np.concatenate(parts, axis=1).astype(np.float64)


class WeightGenerator(Module):
    """Two-layer Swish MLP mapping a hyper latent to one head layer's weights (and bias)."""

    def __init__(self, latent: int, hidden: int, c_in: int, c_out: int, with_bias: bool,
                 rng: np.random.Generator):
        self.c_in, self.c_out, self.with_bias = c_in, c_out, with_bias
        self.fc1 = Linear(latent, hidden, rng)
        n_out = c_in * c_out + (c_out if with_bias else 0)
        self.fc2 = Linear(hidden, n_out, rng)
        # The output bias is the image-independent part of the generated layer;
        # initialise it like a fan-in scaled static layer.
        self.fc2.bias.data[: c_in * c_out] = trunc_normal(rng, (c_in * c_out,), 1.0 / np.sqrt(c_in))

    def __call__(self, latent: Tensor) -> tuple[Tensor, Tensor | None]:
        flat = self.fc2(T.swish(self.fc1(latent)))
        n = flat.shape[0]
        k = self.c_in * self.c_out
        theta = flat[:, :k].reshape(n, self.c_in, self.c_out)
        bias = flat[:, k:] if self.with_bias else None
        return theta, bias


def apply_adaptive_head(latent: Tensor, weights: GeneratedHeadWeights, static: dict | None = None) -> Tensor:
    """Run a head whose generated layers use per-image weights.

    h0 = latent; h_{i+1} = swish(h_i @ W_i + b_i) for all but the last layer,
    which is affine.  Layers not in ``weights.layers`` come from ``static``.
    """
    spec = weights.spec
    if latent.shape[-1] != spec.in_dim:
        raise StageShapeError("adaptive_head.input", latent.shape, (spec.in_dim,))
    gen = {i: (w, b) for i, w, b in zip(weights.layers, weights.weights, weights.biases)}
    h = latent
    n_layers = len(spec.widths)
    for i, (c_in, c_out) in enumerate(spec.layer_shapes):
        if i in gen:
            w, b = gen[i]
            if tuple(w.shape[-2:]) != (c_in, c_out):
                raise StageShapeError(f"adaptive_head.layer{i}", w.shape, (c_in, c_out))
            h = T.matmul(h.reshape(h.shape[0], 1, c_in), w).reshape(h.shape[0], c_out)
            if b is not None:
                h = h + b
        else:
            if static is None or str(i) not in static:
                raise ShapeError("adaptive_head", (i,), (), detail=f"layer {i} is neither generated nor static")
            h = static[str(i)](h)
        if i < n_layers - 1:
            h = T.swish(h)
    return h


def compose_residual(static_out: Tensor | None, adaptive_out: Tensor, mode: str) -> Tensor:
    if mode == "direct":
        return adaptive_out
    if mode == "residual":
        if static_out.shape != adaptive_out.shape:
            raise StageShapeError("compose_residual", static_out.shape, adaptive_out.shape)
        return static_out + adaptive_out
    raise ValueError(f"unknown output mode {mode!r}")


class StaticHead(Module):
    def __init__(self, spec: HeadSpec, rng: np.random.Generator):
        self.layers = [Linear(c_in, c_out, rng, std=None) for c_in, c_out in spec.layer_shapes]

    def __call__(self, h: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.swish(h)
        return h


class HyperEmbedding(Module):
    """MLP hypernetwork latent from the backbone's pooled terminal vector (ablation)."""

    def __init__(self, c_in: int, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(c_in, dim, rng, std=None)
        self.fc2 = Linear(dim, dim, rng, std=None)

    def __call__(self, v: Tensor) -> Tensor:
        return self.fc2(T.swish(self.fc1(v)))


class Branch(Module):
    """Main encoder, hypernetwork and regression head(s) for one pose component."""

    def __init__(self, cfg: ModelConfig, tap_shape: tuple[int, int, int], spec: HeadSpec,
                 rng: np.random.Generator):
        c_tap, h, w = tap_shape
        seq_len = h * w + 1
        self.spec = spec
        self.seq_len = seq_len
        self.main_proj = Conv2d(c_tap, cfg.main_dim, 1, rng, std=0.02)
        self.main_encoder = TransformerEncoder(cfg.main_dim, seq_len, rng, cfg.encoder_layers, cfg.heads,
                                               cfg.dropout, cfg.pe_mode, cfg.ln_eps)
        if cfg.hypernet_arch == "transformer":
            self.hyper_proj = Conv2d(c_tap, cfg.hyper_dim, 1, rng, std=0.02)
            self.hyper_encoder = TransformerEncoder(cfg.hyper_dim, seq_len, rng, cfg.encoder_layers, cfg.heads,
                                                    cfg.dropout, cfg.pe_mode, cfg.ln_eps)
            self.hyper_embed = None
        else:
            self.hyper_proj = None
            self.hyper_encoder = None
            self.hyper_embed = HyperEmbedding(cfg.terminal_channels, cfg.hyper_dim, rng)
        hidden = cfg.generator_hidden or cfg.hyper_dim
        self.generated = spec.generated_layers(cfg.regressed_layers)
        self.generators = {
            str(i): WeightGenerator(cfg.hyper_dim, hidden, *spec.layer_shapes[i], cfg.generate_bias, rng)
            for i in self.generated
        }
        self.static_layers = {
            str(i): Linear(c_in, c_out, rng, std=None)
            for i, (c_in, c_out) in enumerate(spec.layer_shapes)
            if i not in self.generated
        }
        self.static_head = StaticHead(spec, rng) if cfg.output_mode == "residual" else None
        self.output_mode = cfg.output_mode

    def hyper_latent(self, fmap: Tensor, terminal: Tensor | None, training: bool) -> Tensor:
        if self.hyper_encoder is not None:
            seq = build_sequence(fmap, self.hyper_proj, self.hyper_encoder.token, "hyper")
            return encode(seq, self.hyper_encoder, training)
        return self.hyper_embed(terminal)

    def generate(self, latent_h: Tensor) -> GeneratedHeadWeights:
        ws, bs = [], []
        for i in self.generated:
            w, b = self.generators[str(i)](latent_h)
            ws.append(w)
            bs.append(b)
        return GeneratedHeadWeights(self.spec, list(self.generated), ws, bs)

    def __call__(self, fmap: Tensor, terminal: Tensor | None, training: bool):
        seq = build_sequence(fmap, self.main_proj, self.main_encoder.token, "main")
        if seq.length != self.seq_len:
            raise StageShapeError("sequence", seq.tokens.shape, (self.seq_len,))
        latent = encode(seq, self.main_encoder, training)
        latent_h = self.hyper_latent(fmap, terminal, training)
        weights = self.generate(latent_h)
        adaptive = apply_adaptive_head(latent, weights, self.static_layers)
        static = self.static_head(latent) if self.static_head is not None else None
        return compose_residual(static, adaptive, self.output_mode), weights, latent, latent_h


@dataclass
class ForwardResult:
    position: Tensor  # [N, 3]
    orientation: Tensor  # [N, 4] or [N, 6] raw regressor output
    weights: dict[str, GeneratedHeadWeights]
    rotation_repr: RotationRepr
    diagnostics: dict = field(default_factory=dict)

    def quaternions(self) -> np.ndarray:
        return raw_to_quat_np(self.rotation_repr, self.orientation.data)

    def pose(self, i: int = 0) -> Pose:
        return Pose(self.position.data[i], self.quaternions()[i])


class HyperPoseModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0, s_x_init: float = 0.0,
                 s_q_init: float = 0.0):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.config = cfg
        self.backbone = Backbone(cfg, rng, with_terminal=cfg.hypernet_arch == "backbone_embedding")
        self.head_specs = {
            "position": HeadSpec(cfg.main_dim, cfg.position_head),
            "orientation": HeadSpec(cfg.main_dim, cfg.orientation_head),
        }
        self.position = Branch(cfg, self.backbone.tap_shape(BRANCH_TAP["position"]), self.head_specs["position"], rng)
        self.orientation = Branch(cfg, self.backbone.tap_shape(BRANCH_TAP["orientation"]),
                                  self.head_specs["orientation"], rng)
        self.loss = LossParams(s_x_init, s_q_init)

    @property
    def rotation_repr(self) -> RotationRepr:
        return self.config.repr

    def forward(self, images, training: bool = False) -> ForwardResult:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.backbone.stem.weight.dtype))
        if images.ndim == 3:
            images = images.reshape(1, *images.shape)
        taps = self.backbone(images)
        terminal = taps.get("terminal")
        x, w_pos, lat_pos, hyp_pos = self.position(taps[BRANCH_TAP["position"]], terminal, training)
        q, w_ori, lat_ori, hyp_ori = self.orientation(taps[BRANCH_TAP["orientation"]], terminal, training)
        diag = {
            "backbone_calls": self.backbone.calls,
            "latent_position": lat_pos.data,
            "latent_orientation": lat_ori.data,
            "hyper_latent_position": hyp_pos.data,
            "hyper_latent_orientation": hyp_ori.data,
            "tap_shapes": {r: taps[r].shape for r in (3, 4)},
        }
        return ForwardResult(x, q, {"position": w_pos, "orientation": w_ori}, self.rotation_repr, diag)

    __call__ = forward

    def sequence_shapes(self) -> dict[str, tuple[int, int]]:
        cfg = self.config
        return {
            "position": (self.position.seq_len, cfg.main_dim),
            "orientation": (self.orientation.seq_len, cfg.main_dim),
        }

    def branch_parameter_names(self, branch: str, scope: str = "branch") -> list[str]:
        """Names of parameters that belong to one branch (scope 'heads' keeps only regression layers)."""
        names = [n for n, _ in self.named_parameters() if n.startswith(branch + ".")]
        if scope == "heads":
            keep = ("generators.", "static_layers.", "static_head.")
            names = [n for n in names if any(k in n for k in keep)]
        return names

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError("load_state_dict", arr.shape, p.shape, detail=name)
            p.data = arr.astype(p.dtype, copy=True)
