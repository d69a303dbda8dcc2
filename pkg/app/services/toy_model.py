"""
Toy Model Service
A three-layer 3x3 convolutional depth-completion network in numpy with hand-written
forward and backward passes. Inputs are either sparse depth (SP: depth, validity)
or Depth Coefficients (DC: one channel per bin), optionally with a guide channel.
The head is either a single depth channel trained with masked MSE or N logits
trained with cross-entropy against the encoded ground truth.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.services.dc_codec import BinGrid, DCImage, DepthImage, decode_image, encode_image
from app.services.loss_service import cross_entropy_image, softmax
from app.services.scene_service import SceneSample
from app.utils import ConfigurationError, EmptyMaskError, FormatError, TrainingDivergedError

logger = logging.getLogger(__name__)

InputMode = Literal["sp", "dc"]
LossMode = Literal["mse", "ce"]
OptimizerKind = Literal["sgd", "adam"]

PARAMS_FORMAT_VERSION = 1.0
_INPUT_CODES = {"sp": 0.0, "dc": 1.0}
_LOSS_CODES = {"mse": 0.0, "ce": 1.0}


class TrainConfig(BaseModel):
    """Hyperparameters of one toy training run."""

    model_config = ConfigDict(frozen=True)

    input_mode: InputMode
    loss_mode: LossMode
    learning_rate: float = Field(default=settings.TOY_LEARNING_RATE, gt=0)
    epochs: int = Field(default=settings.TOY_EPOCHS, gt=0)
    batch_size: int = Field(default=settings.TOY_BATCH_SIZE, gt=0)
    seed: int = 0
    optimizer: OptimizerKind = "adam"
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0)
    lr_halving_epochs: Optional[int] = Field(default=None, gt=0)
    hidden_channels: int = Field(default=settings.TOY_HIDDEN_CHANNELS, gt=0)
    use_guide: bool = True
    workers: int = Field(default=settings.TRAIN_WORKERS, ge=1)
    shard_size: int = Field(default=settings.TRAIN_SHARD_SIZE, gt=0)

    @property
    def name(self) -> str:
        return f"{self.input_mode.upper()}/{self.loss_mode.upper()}"

    def learning_rate_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch, halved every lr_halving_epochs when set."""
        if self.lr_halving_epochs is None:
            return self.learning_rate
        return self.learning_rate * 0.5 ** (epoch // self.lr_halving_epochs)


@dataclass
class ToyModelParams:
    """Weights (3, 3, C_in, C_out) and biases (C_out,) of the three layers, plus Adam moments."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input_mode: InputMode
    loss_mode: LossMode
    grid: BinGrid
    use_guide: bool = True
    adam_m: List[np.ndarray] = field(default_factory=list)
    adam_v: List[np.ndarray] = field(default_factory=list)
    adam_step: int = 0

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ConfigurationError("the toy network has exactly three layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 4 or w.shape[:2] != (3, 3) or b.shape != (w.shape[3],):
                raise ConfigurationError(f"layer {i} has inconsistent shapes {w.shape} / {b.shape}")
            if i > 0 and w.shape[2] != self.weights[i - 1].shape[3]:
                raise ConfigurationError(f"layer {i} expects {w.shape[2]} channels, previous emits "
                                         f"{self.weights[i - 1].shape[3]}")
        if self.in_channels != input_channels(self.input_mode, self.grid, self.use_guide):
            raise ConfigurationError(f"{self.input_mode} input needs "
                                     f"{input_channels(self.input_mode, self.grid, self.use_guide)} channels")
        if self.out_channels != output_channels(self.loss_mode, self.grid):
            raise ConfigurationError(f"{self.loss_mode} head needs "
                                     f"{output_channels(self.loss_mode, self.grid)} output channels")

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[3]

    def arrays(self) -> List[np.ndarray]:
        """Parameters in fixed order W1, b1, W2, b2, W3, b3 (views, not copies)."""
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ToyModelParams":
        return ToyModelParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            input_mode=self.input_mode,
            loss_mode=self.loss_mode,
            grid=self.grid,
            use_guide=self.use_guide,
            adam_m=[m.copy() for m in self.adam_m],
            adam_v=[v.copy() for v in self.adam_v],
            adam_step=self.adam_step,
        )


@dataclass
class ToyExample:
    """Network input with its training target and the pixels carrying ground truth."""

    x: np.ndarray
    target: np.ndarray
    mask: np.ndarray


@dataclass
class TrainResult:
    params: ToyModelParams
    curve: List[float]
    config: TrainConfig


def input_channels(input_mode: InputMode, grid: BinGrid, use_guide: bool) -> int:
    base = 2 if input_mode == "sp" else grid.n_bins
    return base + (1 if use_guide else 0)


def output_channels(loss_mode: LossMode, grid: BinGrid) -> int:
    return 1 if loss_mode == "mse" else grid.n_bins


# ==================== Layers ====================

def im2col(x: np.ndarray) -> np.ndarray:
    """(..., H, W, C) -> (..., H, W, 9C) zero-padded 3x3 neighborhoods, ordered (row, col, channel)."""
    height, width = x.shape[-3:-1]
    xp = np.pad(x, [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)])
    return np.concatenate(
        [xp[..., i : i + height, j : j + width, :] for i in range(3) for j in range(3)], axis=-1
    )


def conv2d_same(
    x: Optional[np.ndarray], w: np.ndarray, b: np.ndarray, cols: Optional[np.ndarray] = None
) -> np.ndarray:
    """3x3 same-padded convolution (cross-correlation) of an (..., H, W, C_in) tensor."""
    if cols is None:
        cols = im2col(x)
    out = cols.reshape(-1, cols.shape[-1]) @ w.reshape(-1, w.shape[3]) + b
    return out.reshape(cols.shape[:-1] + (w.shape[3],))


def conv2d_same_backward(
    x: Optional[np.ndarray],
    w: np.ndarray,
    dout: np.ndarray,
    cols: Optional[np.ndarray] = None,
    need_dx: bool = True,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Gradients (dW, db, dx) of conv2d_same given the upstream gradient dout.

    Leading batch axes are summed into dW and db. dx is None when need_dx is False.
    """
    if cols is None:
        cols = im2col(x)
    c_in, c_out = w.shape[2], w.shape[3]
    flat_cols = cols.reshape(-1, cols.shape[-1])
    flat_dout = dout.reshape(-1, c_out)
    dw = (flat_cols.T @ flat_dout).reshape(w.shape)
    db = flat_dout.sum(axis=0)
    if not need_dx:
        return dw, db, None
    dcols = (flat_dout @ w.reshape(-1, c_out).T).reshape(cols.shape)
    height, width = dout.shape[-3:-1]
    dxp = np.zeros(dout.shape[:-3] + (height + 2, width + 2, c_in))
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[..., i : i + height, j : j + width, :] += dcols[..., k * c_in : (k + 1) * c_in]
    return dw, db, dxp[..., 1:-1, 1:-1, :]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ==================== Network ====================

def init_params(
    input_mode: InputMode,
    loss_mode: LossMode,
    grid: BinGrid,
    rng: np.random.Generator,
    hidden_channels: int = 16,
    use_guide: bool = True,
) -> ToyModelParams:
    """Uniform init in +-sqrt(1 / fan_in) for weights and biases, fan_in = 9 * C_in."""
    sizes = [
        input_channels(input_mode, grid, use_guide),
        hidden_channels,
        hidden_channels,
        output_channels(loss_mode, grid),
    ]
    weights, biases = [], []
    for c_in, c_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(1.0 / (9 * c_in))
        weights.append(rng.uniform(-bound, bound, size=(3, 3, c_in, c_out)))
        biases.append(rng.uniform(-bound, bound, size=(c_out,)))
    return ToyModelParams(weights, biases, input_mode, loss_mode, grid, use_guide)


def forward(params: ToyModelParams, x: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Run the network on one (H, W, C_in) input or a (B, H, W, C_in) stack of inputs.

    Returns:
        (output (..., H, W, C_out), activation cache for backward)

    Raises:
        ConfigurationError: If the input does not match the parameters
    """
    if x.ndim not in (3, 4) or x.shape[-1] != params.in_channels:
        raise ConfigurationError(f"input must be [B x] H x W x {params.in_channels}, got {x.shape}")
    w1, w2, w3 = params.weights
    b1, b2, b3 = params.biases
    cols1 = im2col(x)
    a1 = conv2d_same(x, w1, b1, cols1)
    cols2 = im2col(relu(a1))
    a2 = conv2d_same(None, w2, b2, cols2)
    cols3 = im2col(relu(a2))
    out = conv2d_same(None, w3, b3, cols3)
    return out, {"cols1": cols1, "a1": a1, "cols2": cols2, "a2": a2, "cols3": cols3}


def backward(
    params: ToyModelParams,
    x: np.ndarray,
    upstream: np.ndarray,
    cache: Optional[Dict[str, np.ndarray]] = None,
) -> List[np.ndarray]:
    """
    Parameter gradients for an upstream gradient on the network output.

    For stacked inputs the gradients are summed over the stack.

    Returns:
        Gradients in the order of ToyModelParams.arrays()
    """
    if cache is None:
        _, cache = forward(params, x)
    expected = cache["a2"].shape[:-1] + (params.out_channels,)
    if upstream.shape != expected:
        raise ConfigurationError(f"upstream gradient must be {expected}, got {upstream.shape}")
    w1, w2, w3 = params.weights
    dw3, db3, dh2 = conv2d_same_backward(None, w3, upstream, cache["cols3"])
    da2 = dh2 * (cache["a2"] > 0)
    dw2, db2, dh1 = conv2d_same_backward(None, w2, da2, cache["cols2"])
    da1 = dh1 * (cache["a1"] > 0)
    dw1, db1, _ = conv2d_same_backward(None, w1, da1, cache["cols1"], need_dx=False)
    return [dw1, db1, dw2, db2, dw3, db3]


def stack_examples(examples: Sequence[ToyExample]) -> ToyExample:
    """Stack scenes of one shape along a leading batch axis."""
    shapes = {ex.x.shape for ex in examples}
    if len(shapes) != 1:
        raise ConfigurationError(f"stacked scenes must share one input shape, got {sorted(shapes)}")
    return ToyExample(
        x=np.stack([ex.x for ex in examples]),
        target=np.stack([ex.target for ex in examples]),
        mask=np.stack([ex.mask for ex in examples]),
    )


def batch_head_loss(params: ToyModelParams, out: np.ndarray, batch: ToyExample) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-scene losses of a stacked output and the gradient of their sum.

    MSE compares the depth head with depth / d_max over ground-truth pixels;
    CE compares softmax(logits) with the encoded ground truth over the same pixels.
    Each scene is averaged over its own pixels.
    """
    if params.loss_mode == "mse":
        n_pixels = np.count_nonzero(batch.mask, axis=(1, 2))
        if np.any(n_pixels == 0):
            raise EmptyMaskError("MSE needs at least one pixel with ground truth")
        residual = (out[..., 0] - batch.target) * batch.mask
        losses = np.sum(residual ** 2, axis=(1, 2)) / n_pixels
        return losses, (2.0 * residual / n_pixels[:, None, None])[..., None]
    losses = np.empty(out.shape[0])
    grad = np.empty_like(out)
    for k in range(out.shape[0]):
        report, grad[k] = cross_entropy_image(batch.target[k], out[k], batch.mask[k])
        losses[k] = report.per_pixel_mean
    return losses, grad


def head_loss(params: ToyModelParams, out: np.ndarray, example: ToyExample) -> Tuple[float, np.ndarray]:
    """Loss of one scene and its gradient with respect to the network output."""
    losses, grad = batch_head_loss(params, out[None], stack_examples([example]))
    return float(losses[0]), grad[0]


def batch_loss_and_gradients(params: ToyModelParams, batch: ToyExample) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Forward, per-scene losses and summed parameter gradients for a stacked batch."""
    out, cache = forward(params, batch.x)
    losses, upstream = batch_head_loss(params, out, batch)
    return losses, backward(params, batch.x, upstream, cache)


def loss_and_gradients(params: ToyModelParams, example: ToyExample) -> Tuple[float, List[np.ndarray]]:
    """Forward, loss and backward for one scene."""
    losses, grads = batch_loss_and_gradients(params, stack_examples([example]))
    return float(losses[0]), grads


# ==================== Data preparation ====================

def build_input(
    sparse: DepthImage,
    grid: BinGrid,
    input_mode: InputMode,
    guide: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Stack the network input channels.

    SP: sparse depth / d_max and the validity mask. DC: the encoded sparse depth
    (depths clamped into the grid). A guide image in [0, 1] is appended when given.
    """
    if input_mode == "sp":
        channels = [sparse.depth[..., None] / grid.d_max, sparse.valid[..., None].astype(np.float64)]
    elif input_mode == "dc":
        channels = [encode_image(sparse, grid, clamp=True).data]
    else:
        raise ConfigurationError(f"Unknown input mode: {input_mode}")
    if guide is not None:
        if guide.shape != sparse.depth.shape:
            raise ConfigurationError(f"guide shape {guide.shape} differs from depth {sparse.depth.shape}")
        channels.append(np.asarray(guide, dtype=np.float64)[..., None])
    return np.concatenate(channels, axis=2)


def prepare_example(
    scene: SceneSample, grid: BinGrid, input_mode: InputMode, loss_mode: LossMode, use_guide: bool = True
) -> ToyExample:
    x = build_input(scene.sparse, grid, input_mode, scene.guide if use_guide else None)
    mask = scene.gt.valid
    if loss_mode == "mse":
        target = scene.gt.depth / grid.d_max
    else:
        target = encode_image(scene.gt, grid, clamp=True).data
    return ToyExample(x=x, target=target, mask=mask)


def predict_depth(params: ToyModelParams, x: np.ndarray) -> DepthImage:
    """
    Dense prediction in meters, always inside [D_1, D_N].

    The depth head is scaled by d_max and clipped; the logit head is decoded from
    softmax coefficients with peak (3-coefficient) reconstruction.
    """
    out, _ = forward(params, x)
    grid = params.grid
    if params.loss_mode == "mse":
        depth = np.clip(out[..., 0] * grid.d_max, grid.centers[0], grid.centers[-1])
        return DepthImage(depth)
    return decode_image(DCImage(softmax(out, axis=-1), grid), mode="3coeff")


def predict_coefficients(params: ToyModelParams, x: np.ndarray) -> DCImage:
    """Softmax coefficients of a logit-head model."""
    if params.loss_mode != "ce":
        raise ConfigurationError("only the cross-entropy head predicts coefficients")
    out, _ = forward(params, x)
    return DCImage(softmax(out, axis=-1), params.grid)


# ==================== Training ====================

class ToyTrainer:
    """
    Mini-batch trainer. A batch is split into shards of shard_size scenes, each shard
    runs as one stacked forward/backward pass, and shard gradients are reduced in
    shard order. The shards do not depend on the worker count, so running them on a
    thread pool (workers > 1) gives the same parameters as a serial run.
    """

    def __init__(self, config: TrainConfig, grid: BinGrid):
        self.config = config
        self.grid = grid

    def _batch_gradients(
        self, params: ToyModelParams, batch: Sequence[ToyExample], pool: Optional[ThreadPoolExecutor]
    ) -> Tuple[List[float], List[np.ndarray]]:
        size = self.config.shard_size
        shards = [stack_examples(batch[i : i + size]) for i in range(0, len(batch), size)]
        if pool is None:
            results = [batch_loss_and_gradients(params, shard) for shard in shards]
        else:
            results = list(pool.map(lambda shard: batch_loss_and_gradients(params, shard), shards))
        losses = [float(loss) for shard_losses, _ in results for loss in shard_losses]
        total = [np.zeros_like(a) for a in params.arrays()]
        for _, grads in results:
            for acc, g in zip(total, grads):
                acc += g
        return losses, [g / len(batch) for g in total]

    def _apply(self, params: ToyModelParams, grads: List[np.ndarray], lr: float) -> None:
        arrays = params.arrays()
        if self.config.optimizer == "sgd":
            for p, g in zip(arrays, grads):
                p -= lr * g
            return
        cfg = self.config
        if not params.adam_m:
            params.adam_m = [np.zeros_like(p) for p in arrays]
            params.adam_v = [np.zeros_like(p) for p in arrays]
        params.adam_step += 1
        step = params.adam_step
        for p, g, m, v in zip(arrays, grads, params.adam_m, params.adam_v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1 ** step)
            v_hat = v / (1.0 - cfg.beta2 ** step)
            p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def train(
        self, examples: Sequence[ToyExample], params: Optional[ToyModelParams] = None
    ) -> TrainResult:
        """
        Train on prepared examples.

        Args:
            examples: Training scenes (at least one)
            params: Starting parameters; seeded init when None

        Returns:
            TrainResult with the final parameters and the per-epoch mean scene loss

        Raises:
            TrainingDivergedError: If a loss or parameter becomes non-finite
        """
        cfg = self.config
        if not examples:
            raise ConfigurationError("training needs at least one scene")
        rng = np.random.default_rng(cfg.seed)
        if params is None:
            params = init_params(cfg.input_mode, cfg.loss_mode, self.grid, rng, cfg.hidden_channels, cfg.use_guide)
        elif (params.input_mode, params.loss_mode) != (cfg.input_mode, cfg.loss_mode):
            raise ConfigurationError(f"parameters are {params.input_mode}/{params.loss_mode}, config is {cfg.name}")
        if params.in_channels != examples[0].x.shape[2]:
            raise ConfigurationError(
                f"examples carry {examples[0].x.shape[2]} channels, model expects {params.in_channels}"
            )

        pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        curve: List[float] = []
        try:
            for epoch in range(cfg.epochs):
                lr = cfg.learning_rate_at(epoch)
                order = rng.permutation(len(examples))
                epoch_losses: List[float] = []
                for start in range(0, len(order), cfg.batch_size):
                    batch = [examples[i] for i in order[start : start + cfg.batch_size]]
                    losses, grads = self._batch_gradients(params, batch, pool)
                    batch_loss = float(np.mean(losses))
                    if not np.isfinite(batch_loss):
                        raise TrainingDivergedError(epoch + 1, batch_loss)
                    self._apply(params, grads, lr)
                    epoch_losses.extend(losses)
                if not all(np.all(np.isfinite(p)) for p in params.arrays()):
                    raise TrainingDivergedError(epoch + 1, float("nan"))
                curve.append(float(np.mean(epoch_losses)))
                logger.debug(f"{cfg.name} epoch {epoch + 1}/{cfg.epochs} loss={curve[-1]:.6f} lr={lr:g}")
        finally:
            if pool is not None:
                pool.shutdown()

        logger.info(f"Trained {cfg.name} for {cfg.epochs} epochs: loss {curve[0]:.5f} -> {curve[-1]:.5f}")
        return TrainResult(params=params, curve=curve, config=cfg)


def train(config: TrainConfig, scenes: Sequence[SceneSample], grid: BinGrid) -> TrainResult:
    """Prepare scenes for the configured input/head and train."""
    examples = [prepare_example(s, grid, config.input_mode, config.loss_mode, config.use_guide) for s in scenes]
    return ToyTrainer(config, grid).train(examples)


# ==================== Serialization ====================

def params_to_tensors(params: ToyModelParams) -> List[np.ndarray]:
    """Header vector followed by W1, b1, W2, b2, W3, b3."""
    grid = params.grid
    header = np.array([
        PARAMS_FORMAT_VERSION,
        _INPUT_CODES[params.input_mode],
        _LOSS_CODES[params.loss_mode],
        grid.d_min,
        grid.d_max,
        float(grid.n_bins),
        1.0 if params.use_guide else 0.0,
    ])
    return [header] + params.arrays()


def params_from_tensors(arrays: Sequence[np.ndarray]) -> ToyModelParams:
    if len(arrays) != 7 or arrays[0].shape != (7,):
        raise FormatError("parameter file must hold a header and six tensors")
    header = arrays[0]
    if header[0] != PARAMS_FORMAT_VERSION:
        raise FormatError(f"unsupported parameter format version {header[0]}")
    input_mode = {v: k for k, v in _INPUT_CODES.items()}.get(float(header[1]))
    loss_mode = {v: k for k, v in _LOSS_CODES.items()}.get(float(header[2]))
    if input_mode is None or loss_mode is None:
        raise FormatError("unknown input or loss mode in parameter header")
    grid = BinGrid(d_min=float(header[3]), d_max=float(header[4]), n_bins=int(header[5]))
    weights = [np.array(arrays[i]) for i in (1, 3, 5)]
    biases = [np.array(arrays[i]) for i in (2, 4, 6)]
    return ToyModelParams(weights, biases, input_mode, loss_mode, grid, use_guide=bool(header[6]))
