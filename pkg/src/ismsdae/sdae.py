"""Stacked denoising autoencoder pretraining and classifier fine-tuning.

Each stage is a sigmoid encoder plus linear decoder trained to reconstruct
its clean input from a freshly dusted copy, with a KL sparsity penalty on
the mean bottleneck activation. Three stages are trained greedily, their
encoders are stacked under a new softmax layer, and the whole network is
then fine-tuned with dropout.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError, TrainingDivergenceError
from .nn import (
    DenseLayer,
    DenseNetwork,
    OptimizerState,
    SparsityConfig,
    TrainConfig,
    backward,
    dae_objective,
    flat_grads,
    forward,
    mse_loss,
    optimize_step,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)

DEFAULT_BOTTLENECKS = (196, 96, 20)
DEFAULT_DUSTING = (0.3, 0.2, 0.1)
REFERENCE_FC_DIMS = (256, 256, 128, 64, 32, 4)


@dataclass
class DaeConfig:
    input_dim: int
    bottleneck_dim: int
    dusting_sigma: float = 0.1
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0 < self.bottleneck_dim < self.input_dim:
            raise ParameterError("bottleneck_dim must be positive and smaller than input_dim")
        if not (np.isfinite(self.dusting_sigma) and self.dusting_sigma >= 0):
            raise ParameterError("dusting_sigma must be finite and >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["sparsity"] = SparsityConfig(**d.get("sparsity", {}))
        d["train"] = TrainConfig(**d.get("train", {}))
        return cls(**d)


@dataclass
class DaeStage:
    encoder: DenseLayer
    decoder: DenseLayer
    config: DaeConfig
    final_train_loss: float
    history: list = field(default_factory=list)

    def __post_init__(self):
        c = self.config
        if self.encoder.activation != "sigmoid":
            raise ParameterError("encoder must use a sigmoid bottleneck")
        if (self.encoder.in_dim != c.input_dim or self.encoder.out_dim != c.bottleneck_dim
                or self.decoder.in_dim != c.bottleneck_dim or self.decoder.out_dim != c.input_dim):
            raise ParameterError("encoder/decoder shapes disagree with the stage config")

    def autoencoder(self):
        return DenseNetwork([self.encoder, self.decoder])


@dataclass
class SdaeStack:
    stages: list

    def __post_init__(self):
        check_chain([s.config for s in self.stages])


def check_chain(configs):
    if len(configs) != 3:
        raise ParameterError(f"an SDAE stack has exactly 3 stages, got {len(configs)}")
    for i, (a, b) in enumerate(zip(configs, configs[1:])):
        if b.input_dim != a.bottleneck_dim:
            raise ParameterError(
                f"stage {i + 2} input {b.input_dim} != stage {i + 1} bottleneck {a.bottleneck_dim}")


def default_configs(input_dim=256, bottlenecks=DEFAULT_BOTTLENECKS, dusting=DEFAULT_DUSTING,
                    sparsity=None, train=None, seed=0):
    sparsity = sparsity or SparsityConfig()
    train = train or TrainConfig(epochs=30, batch_size=64, learning_rate=1e-3)
    dims = (input_dim,) + tuple(bottlenecks)
    return [
        DaeConfig(dims[i], dims[i + 1], dusting[i], sparsity,
                  TrainConfig(**{**asdict(train), "seed": seed + i}))
        for i in range(3)
    ]


def dust(x, sigma, rng):
    """Add i.i.d. N(0, sigma) corruption; every call draws fresh noise."""
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, sigma, size=x.shape)


def _as_matrix(data, dim=None):
    x = np.atleast_2d(np.asarray(getattr(data, "features", data), dtype=np.float64))
    if dim is not None and x.shape[1] != dim:
        raise ParameterError(f"data dimension {x.shape[1]} != expected {dim}")
    return x


def train_dae(data, config, holdout=None, stage=None):
    """Train one denoising autoencoder stage.

    ``history`` on the returned stage holds the clean reconstruction loss on
    ``holdout`` (or on the training data) before training and after each epoch.
    """
    x = _as_matrix(data, config.input_dim)
    if x.shape[0] == 0:
        raise ParameterError("no training data")
    hx = x if holdout is None else _as_matrix(holdout, config.input_dim)
    tc = config.train
    rng = np.random.default_rng(tc.seed)
    net = DenseNetwork([
        DenseLayer.init(config.input_dim, config.bottleneck_dim, "sigmoid", rng),
        DenseLayer.init(config.bottleneck_dim, config.input_dim, "linear", rng),
    ])
    state = OptimizerState()
    rho, lam = config.sparsity.rho, config.sparsity.lam

    def held_out_loss():
        return mse_loss(forward(net, hx).output, hx)

    history = [held_out_loss()]
    final = float("nan")
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(x.shape[0])
        total = 0.0
        for i in range(0, x.shape[0], tc.batch_size):
            clean = x[order[i:i + tc.batch_size]]
            noisy = dust(clean, config.dusting_sigma, rng)
            loss, grads, _ = dae_objective(net, noisy, clean, rho, lam)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"DAE loss became {loss} at epoch {epoch}", epoch, stage)
            optimize_step(net.params(), flat_grads(grads), state, tc)
            total += loss * clean.shape[0]
        final = total / x.shape[0]
        history.append(held_out_loss())
        log.debug("dae stage=%s epoch=%d loss=%.5f holdout=%.5f", stage, epoch, final, history[-1])
    return DaeStage(net.layers[0], net.layers[1], config, float(final), history)


def encode_dataset(stage, data):
    """Bottleneck activations of ``stage`` for every row; no corruption."""
    x = _as_matrix(data, stage.encoder.in_dim)
    return forward(DenseNetwork([stage.encoder]), x).output


def build_stack(data, configs, holdout=None):
    """Greedy layer-wise training: each stage learns from the previous stage's codes."""
    check_chain(configs)
    x = _as_matrix(data, configs[0].input_dim)
    hx = None if holdout is None else _as_matrix(holdout, configs[0].input_dim)
    stages = []
    for i, cfg in enumerate(configs):
        stage = train_dae(x, cfg, holdout=hx, stage=i + 1)
        log.info("stage %d (%d->%d) final loss %.4f", i + 1, cfg.input_dim,
                 cfg.bottleneck_dim, stage.final_train_loss)
        stages.append(stage)
        x = encode_dataset(stage, x)
        if hx is not None:
            hx = encode_dataset(stage, hx)
    return SdaeStack(stages)


def assemble_classifier(stack, n_classes, seed=0):
    """Stacked encoder copies under a fresh Glorot-initialized softmax layer."""
    if n_classes < 2:
        raise ParameterError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    layers = [s.encoder.copy() for s in stack.stages]
    layers.append(DenseLayer.init(layers[-1].out_dim, n_classes, "softmax", rng))
    return DenseNetwork(layers)


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    valid_acc: float
    loss: float = float("nan")
    tracked: dict = field(default_factory=dict)


def accuracy(net, data):
    x = _as_matrix(data)
    y = np.asarray(data.labels)
    if y.size == 0:
        return float("nan")
    return float(np.mean(net.predict(x) == y))


def fine_tune(classifier, train, valid, config, *, trainable=None, track=None, log_to=None):
    """Supervised cross-entropy training with best-validation selection.

    ``trainable`` optionally restricts updates to the given layer indices
    (e.g. ``[-1]`` to fit only the softmax head). The starting model is a
    selection candidate, so the result never validates worse than the input.
    ``track`` maps names to extra datasets whose accuracy is logged per
    epoch; records are appended to ``log_to`` when given.
    """
    net = classifier.copy()
    x = _as_matrix(train, net.layers[0].in_dim)
    y = np.asarray(train.labels, dtype=np.int64)
    _as_matrix(valid, net.layers[0].in_dim)
    n_layers = len(net.layers)
    train_idx = sorted({i % n_layers for i in (range(n_layers) if trainable is None else trainable)})
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    track = track or {}

    def record(epoch, loss):
        rec = EpochRecord(epoch, accuracy(net, train), accuracy(net, valid), loss,
                          {k: accuracy(net, d) for k, d in track.items()})
        if log_to is not None:
            log_to.append(rec)
        log.info("epoch %d train=%.4f valid=%.4f", epoch, rec.train_acc, rec.valid_acc)
        return rec

    best = record(0, float("nan"))
    best_net = net.copy()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(x.shape[0])
        total = 0.0
        for i in range(0, x.shape[0], config.batch_size):
            idx = order[i:i + config.batch_size]
            trace = forward(net, x[idx], dropout_rate=config.dropout_rate, rng=rng,
                            training=True)
            loss, g = softmax_cross_entropy(trace.pre[-1], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"loss became {loss} at epoch {epoch}", epoch)
            grads = backward(net, trace, g, wrt="logits")
            params, flat = [], []
            for j in train_idx:
                params.extend((net.layers[j].weights, net.layers[j].bias))
                flat.extend(grads[j])
            optimize_step(params, flat, state, config)
            total += loss * idx.size
        rec = record(epoch, total / x.shape[0])
        if rec.valid_acc > best.valid_acc:
            best, best_net = rec, net.copy()
    best_net.meta["best_epoch"] = best.epoch
    best_net.meta["best_valid_acc"] = best.valid_acc
    return best_net


def train_reference_fc(train, valid, config, dims=REFERENCE_FC_DIMS, log_to=None, track=None):
    """Conventionally trained FC baseline: relu hidden layers, softmax head."""
    if _as_matrix(train).shape[1] != dims[0]:
        raise ParameterError(f"reference FC expects {dims[0]} features")
    rng = np.random.default_rng(config.seed)
    net = DenseNetwork.build(dims, "relu", "softmax", rng)
    return fine_tune(net, train, valid, config, log_to=log_to, track=track)


def train_sdae_classifier(train, valid, configs, head_config, tune_config, n_classes=4,
                          log_to=None, track=None, holdout=None):
    """Pretrain the stack, fit the softmax head on frozen codes, then fine-tune all layers.

    Returns ``(classifier, stack, head_only_classifier)``.
    """
    stack = build_stack(train, configs, holdout=holdout)
    net = assemble_classifier(stack, n_classes, seed=head_config.seed)
    head = fine_tune(net, train, valid, head_config, trainable=[-1])
    tuned = fine_tune(head, train, valid, tune_config, log_to=log_to, track=track)
    return tuned, stack, head


def grid_search(train, valid, base_configs, head_config, tune_config,
                rhos=(0.05, 0.1, 0.2), lams=(0.1, 1.0, 10.0)):
    """Validation accuracy for every (rho, lambda) pair shared by all three stages."""
    rows = []
    for rho in rhos:
        for lam in lams:
            sp = SparsityConfig(rho, lam)
            cfgs = [DaeConfig(c.input_dim, c.bottleneck_dim, c.dusting_sigma, sp, c.train)
                    for c in base_configs]
            net, _, _ = train_sdae_classifier(train, valid, cfgs, head_config, tune_config)
            rows.append((rho, lam, accuracy(net, valid)))
    return rows
