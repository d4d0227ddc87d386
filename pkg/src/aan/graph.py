"""Prior-guided graph reasoning over attribute nodes and the model state.

A frame is a graph whose nodes are the extracted attribute features.  Each
reasoning block computes a per-frame, per-head attention adjacency, adds the
global co-occurrence prior, propagates node features with a residual graph
convolution, then mixes information across neighbouring frames with a
depthwise temporal convolution wrapped in channel mixes (again residual).
Node features are mean-pooled per frame and classified with a shared linear
head into per-class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .attributes import (
    AttributeExtractorParams,
    attribute_loss,
    extract_attributes,
    init_extractor,
)
from .data import AttributeMap
from .optim import AdamState
from .tensor import (
    BatchNormState,
    ConfigurationError,
    DimensionError,
    Tensor,
    affine,
    bce_with_logits,
    depthwise_temporal_conv,
    mean_pool_nodes,
    softmax_lastaxis,
)

ABLATIONS = ("full", "extractor-only", "linear")


# ---------------------------------------------------------------------------
# co-occurrence prior
# ---------------------------------------------------------------------------

@dataclass
class CoOccurrencePrior:
    """Frame-level conditional co-occurrence of attributes in training labels."""

    probabilities: np.ndarray     # [N, N], P[i, j] = P(j active | i active)
    counts: np.ndarray            # [N, N] joint frame counts
    totals: np.ndarray            # [N] per-attribute frame counts

    @property
    def attribute_count(self) -> int:
        return self.totals.shape[0]


def build_prior(label_sets: list, attribute_map: AttributeMap, n_attributes: int,
                frame_counts: list | None = None) -> CoOccurrencePrior:
    """Count frame-level attribute co-occurrence over training labels.

    An attribute is active at a frame iff some active class involves it.
    Rows of attributes that never occur are all zero.
    """
    if attribute_map.attribute_count != n_attributes:
        raise DimensionError(
            f"attribute map covers {attribute_map.attribute_count} attributes, expected {n_attributes}"
        )
    counts = np.zeros((n_attributes, n_attributes), dtype=np.int64)
    if frame_counts is None:
        frame_counts = [ls.min_frame_count() for ls in label_sets]
    for ls, t in zip(label_sets, frame_counts):
        if t == 0:
            continue
        dense = ls.densify(t)
        active = attribute_map.frame_attributes(dense).astype(np.int64)
        counts += active.T @ active
    totals = np.diag(counts).copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        probs = np.where(totals[:, None] > 0, counts / totals[:, None], 0.0)
    return CoOccurrencePrior(probabilities=probs, counts=counts, totals=totals)


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    n_attributes: int
    n_classes: int
    input_dim: int                # D0
    hidden_dim: int = 256         # D1
    n_blocks: int = 5             # L
    n_heads: int = 4              # H
    kernel_size: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    use_batch_norm: bool = True
    mix_bias: bool = True
    attribute_weight: float = 1.0
    normalize_anchors: bool = False
    ablation: str = "full"
    disable_attention: bool = False
    disable_temporal: bool = False
    dtype: str = "float64"

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} must be divisible by n_heads {self.n_heads}"
            )
        if self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        for name in ("n_attributes", "n_classes", "input_dim", "hidden_dim", "n_blocks", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class SchedulerState:
    best_value: float = float("inf")
    num_bad_epochs: int = 0


@dataclass
class ModelState:
    """All learnable parameters, buffers, prior, optimizer and schedule state."""

    config: ModelConfig
    params: dict                  # name -> Tensor (learnable)
    buffers: dict                 # name -> np.ndarray (running statistics)
    prior: CoOccurrencePrior
    adam: AdamState
    scheduler: SchedulerState = field(default_factory=SchedulerState)
    epoch: int = 0

    def extractor(self) -> AttributeExtractorParams:
        bn = None
        if self.config.use_batch_norm:
            bn = BatchNormState(
                gain=self.params["extractor.bn.gain"],
                bias=self.params["extractor.bn.bias"],
                running_mean=self.buffers["extractor.bn.running_mean"],
                running_var=self.buffers["extractor.bn.running_var"],
                eps=self.config.bn_eps,
                momentum=self.config.bn_momentum,
            )
        return AttributeExtractorParams(weight=self.params["extractor.weight"], bn=bn)

    def active_param_names(self) -> list:
        """Parameters the optimizer may touch under the configured ablation."""
        cfg = self.config
        if cfg.ablation == "linear":
            return ["linear.weight", "linear.bias"]
        names = ["extractor.weight"]
        if cfg.use_batch_norm:
            names += ["extractor.bn.gain", "extractor.bn.bias"]
        names += ["bottleneck.weight", "classifier.weight", "classifier.bias"]
        if cfg.ablation == "full":
            for i in range(cfg.n_blocks):
                if not cfg.disable_attention:
                    names += [f"blocks.{i}.attn.w1", f"blocks.{i}.attn.w2", f"blocks.{i}.attn.w3"]
                if not cfg.disable_temporal:
                    names += [f"blocks.{i}.mix.w4", f"blocks.{i}.mix.kernel", f"blocks.{i}.mix.w5"]
                    if cfg.mix_bias:
                        names += [f"blocks.{i}.mix.b4", f"blocks.{i}.mix.b5"]
        return names

    def active_params(self) -> dict:
        return {name: self.params[name] for name in self.active_param_names()}


def init_model_state(config: ModelConfig, prior: CoOccurrencePrior, seed: int,
                     learning_rate: float = 1e-4) -> ModelState:
    """Build a freshly initialized model.

    Linear weights draw from a uniform fan-in scheme; biases start at zero;
    temporal kernels start as a near-identity impulse so early training
    behaves like per-frame classification.
    """
    config.validate()
    if prior.attribute_count != config.n_attributes:
        raise DimensionError(
            f"prior covers {prior.attribute_count} attributes, model expects {config.n_attributes}"
        )
    rng = np.random.default_rng(seed)
    dt = config.np_dtype

    def fan_in(shape, fan):
        bound = 1.0 / np.sqrt(fan)
        return Tensor(rng.uniform(-bound, bound, shape).astype(dt), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    params: dict = {}
    extractor = init_extractor(config.n_attributes, config.input_dim, rng,
                               bn_eps=config.bn_eps, bn_momentum=config.bn_momentum,
                               use_batch_norm=config.use_batch_norm, dtype=dt)
    params["extractor.weight"] = extractor.weight
    buffers: dict = {}
    if extractor.bn is not None:
        params["extractor.bn.gain"] = extractor.bn.gain
        params["extractor.bn.bias"] = extractor.bn.bias
        buffers["extractor.bn.running_mean"] = extractor.bn.running_mean
        buffers["extractor.bn.running_var"] = extractor.bn.running_var

    d0, d1, h, dh = config.input_dim, config.hidden_dim, config.n_heads, config.head_dim
    params["bottleneck.weight"] = fan_in((d0, d1), d0)
    for i in range(config.n_blocks):
        params[f"blocks.{i}.attn.w1"] = fan_in((h, dh, dh), dh)
        params[f"blocks.{i}.attn.w2"] = fan_in((h, dh, dh), dh)
        params[f"blocks.{i}.attn.w3"] = fan_in((h, dh, dh), dh)
        params[f"blocks.{i}.mix.w4"] = fan_in((d1, d1), d1)
        params[f"blocks.{i}.mix.b4"] = zeros(d1)
        kernel = np.zeros((d1, config.kernel_size), dtype=dt)
        kernel[:, config.kernel_size // 2] = 1.0
        kernel += 0.01 * rng.standard_normal(kernel.shape).astype(dt)
        params[f"blocks.{i}.mix.kernel"] = Tensor(kernel, requires_grad=True)
        params[f"blocks.{i}.mix.w5"] = fan_in((d1, d1), d1)
        params[f"blocks.{i}.mix.b5"] = zeros(d1)
    params["classifier.weight"] = fan_in((d1, config.n_classes), d1)
    params["classifier.bias"] = zeros(config.n_classes)
    params["linear.weight"] = fan_in((d0, config.n_classes), d0)
    params["linear.bias"] = zeros(config.n_classes)

    adam = AdamState.for_params(params, learning_rate=learning_rate)
    return ModelState(config=config, params=params, buffers=buffers, prior=prior, adam=adam)


def clone_state(state: ModelState) -> ModelState:
    """Independent deep copy (parameters, buffers, prior, optimizer, schedule)."""
    import copy

    params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
              for k, v in state.params.items()}
    buffers = {k: v.copy() for k, v in state.buffers.items()}
    prior = CoOccurrencePrior(state.prior.probabilities.copy(),
                              state.prior.counts.copy(), state.prior.totals.copy())
    adam = AdamState(
        learning_rate=state.adam.learning_rate,
        beta1=state.adam.beta1, beta2=state.adam.beta2, epsilon=state.adam.epsilon,
        step_count=state.adam.step_count,
        first_moment={k: v.copy() for k, v in state.adam.first_moment.items()},
        second_moment={k: v.copy() for k, v in state.adam.second_moment.items()},
    )
    return ModelState(config=copy.deepcopy(state.config), params=params, buffers=buffers,
                      prior=prior, adam=adam,
                      scheduler=SchedulerState(state.scheduler.best_value,
                                               state.scheduler.num_bad_epochs),
                      epoch=state.epoch)


# ---------------------------------------------------------------------------
# graph operations
# ---------------------------------------------------------------------------

def bottleneck(extracted: Tensor, weight: Tensor) -> Tensor:
    """Shared linear squeeze from D0 to D1 applied per node per frame."""
    return affine(extracted, weight)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[T, N, D1] -> [T, H, N, D1/H]."""
    t, n, d1 = x.shape
    return x.reshape(t, n, n_heads, d1 // n_heads).transpose((0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[T, H, N, Dh] -> [T, N, H*Dh]."""
    t, h, n, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(t, n, h * dh)


def attention_adjacency(x_heads: Tensor, w1: Tensor, w2: Tensor,
                        prior: np.ndarray) -> Tensor:
    """Per-frame, per-head adjacency: softmax over keys plus the prior.

    x_heads is [T, H, N, Dh]; the result is [T, H, N, N].  Each row is a
    probability vector plus the corresponding prior row, so rows sum to
    1 + sum(prior row).  The prior is added after the softmax, without
    renormalization.
    """
    queries = x_heads @ w1
    keys = x_heads @ w2
    scores = queries @ keys.transpose((0, 1, 3, 2))
    return softmax_lastaxis(scores) + Tensor(prior.astype(x_heads.data.dtype))


def graph_conv(x_heads: Tensor, adjacency: Tensor, w3: Tensor) -> Tensor:
    """Residual graph propagation per head: relu(A @ X @ W3) + X."""
    return (adjacency @ x_heads @ w3).relu() + x_heads


def temporal_mix(x: Tensor, w4: Tensor, b4: Tensor | None, kernel: Tensor,
                 w5: Tensor, b5: Tensor | None,
                 mask: np.ndarray | None = None) -> Tensor:
    """Residual temporal block: channel mix, depthwise conv over frames,
    rectify, channel mix, add input."""
    mixed = affine(x, w4, b4)
    conv = depthwise_temporal_conv(mixed, kernel, mask=mask)
    return affine(conv.relu(), w5, b5) + x


def classify(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Mean-pool nodes per frame, then map to per-class logits [T, C]."""
    return affine(mean_pool_nodes(x), weight, bias)


# ---------------------------------------------------------------------------
# full forward and loss
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: Tensor                # [T, C]
    attributes: Tensor | None     # [T, N, D0] (absent in the linear ablation)


def forward(features: np.ndarray, anchors_selected: np.ndarray | None,
            state: ModelState, mode: str,
            mask: np.ndarray | None = None) -> ForwardResult:
    """Run the configured wiring on one video's frames [T, D0]."""
    cfg = state.config
    dt = cfg.np_dtype
    frames = Tensor(np.asarray(features, dtype=dt))
    if frames.shape[1] != cfg.input_dim:
        raise DimensionError(
            f"features dim {frames.shape[1]} does not match model input_dim {cfg.input_dim}"
        )

    if cfg.ablation == "linear":
        logits = affine(frames, state.params["linear.weight"], state.params["linear.bias"])
        return ForwardResult(logits=logits, attributes=None)

    extracted = extract_attributes(frames, state.extractor(), mode, mask=mask)
    x = bottleneck(extracted, state.params["bottleneck.weight"])

    if cfg.ablation == "full":
        p = state.prior.probabilities
        for i in range(cfg.n_blocks):
            if not cfg.disable_attention:
                heads = split_heads(x, cfg.n_heads)
                adjacency = attention_adjacency(
                    heads, state.params[f"blocks.{i}.attn.w1"],
                    state.params[f"blocks.{i}.attn.w2"], p)
                heads = graph_conv(heads, adjacency, state.params[f"blocks.{i}.attn.w3"])
                x = merge_heads(heads)
            if not cfg.disable_temporal:
                b4 = state.params[f"blocks.{i}.mix.b4"] if cfg.mix_bias else None
                b5 = state.params[f"blocks.{i}.mix.b5"] if cfg.mix_bias else None
                x = temporal_mix(x, state.params[f"blocks.{i}.mix.w4"], b4,
                                 state.params[f"blocks.{i}.mix.kernel"],
                                 state.params[f"blocks.{i}.mix.w5"], b5, mask=mask)

    logits = classify(x, state.params["classifier.weight"], state.params["classifier.bias"])
    return ForwardResult(logits=logits, attributes=extracted)


@dataclass
class LossBreakdown:
    total: Tensor
    action: float
    attribute: float


def total_loss(result: ForwardResult, dense_labels: np.ndarray,
               anchors_selected: np.ndarray | None, mask: np.ndarray | None,
               attribute_weight: float = 1.0,
               normalize_anchors: bool = False) -> LossBreakdown:
    """Action BCE plus the (weighted) attribute anchor term."""
    action = bce_with_logits(result.logits, dense_labels, mask)
    if result.attributes is None or anchors_selected is None:
        return LossBreakdown(total=action, action=action.item(), attribute=0.0)
    anchors = np.asarray(anchors_selected, dtype=result.attributes.data.dtype)
    if normalize_anchors:
        anchors = anchors / np.linalg.norm(anchors, axis=1, keepdims=True)
    attr = attribute_loss(result.attributes, Tensor(anchors), mask)
    if attribute_weight == 1.0:
        total = action + attr
    else:
        total = action + attr * attribute_weight
    return LossBreakdown(total=total, action=action.item(), attribute=attr.item())


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(doc: dict) -> ModelConfig:
    cfg = ModelConfig(**doc)
    cfg.validate()
    return cfg
