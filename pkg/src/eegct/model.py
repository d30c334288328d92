"""Conv + transformer EEG classifier.

Front end: grouped temporal convolutions (a depth conv block, then
separable conv blocks) with average pooling and selective-kernel channel
attention.  Back end: a learnable class token, additive position
embedding, a stack of pre-norm transformer encoder layers, and a linear
head on the class-token state.  Channel lineage is preserved end to end:
every conv is grouped per feature channel, so feature channel c always
descends from EEG channel c // channel_multiplier.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .layers import (
    BatchNorm1d,
    Conv1d,
    Conv1dSpec,
    LayerNorm,
    Linear,
    avg_pool1d,
    dropout,
    uniform_init,
)


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int
    input_len: int
    n_classes: int
    channel_multiplier: int = 4
    conv_kernel: int = 15
    n_sconv_blocks: int = 2
    pool1: int = 4
    pool2: int = 5
    sk_kernel_sizes: tuple[int, ...] = (1, 3, 5, 7)
    sk_reduction: int = 4
    sk_min_dim: int = 32
    n_encoder_layers: int = 6
    n_heads: int = 8
    head_dim: int = 256
    mlp_dim: int = 128
    dropout_p: float = 0.5
    use_depth_block: bool = True
    use_sk_attention: bool = True
    use_transformer: bool = True

    def __post_init__(self):
        for name in ("n_channels", "input_len", "n_classes", "channel_multiplier",
                     "conv_kernel", "pool1", "pool2", "sk_reduction", "sk_min_dim",
                     "n_encoder_layers", "n_heads", "head_dim", "mlp_dim"):
            if getattr(self, name) < 1:
                raise ShapeError(f"config field {name} must be positive")
        if self.n_sconv_blocks < 0:
            raise ShapeError("n_sconv_blocks must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ShapeError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.use_sk_attention:
            if len(self.sk_kernel_sizes) < 2:
                raise ShapeError("selective-kernel attention needs >= 2 kernel sizes")
            for k in self.sk_kernel_sizes:
                if k % 2 == 0:
                    raise ShapeError(f"even SK kernel size {k}: symmetric padding impossible")
        if self.seq_len < 1:
            raise ShapeError(f"derived sequence length {self.seq_len} < 1")

    @property
    def feature_channels(self) -> int:
        if self.use_depth_block:
            return self.n_channels * self.channel_multiplier
        return self.n_channels

    @property
    def conv_len(self) -> int:
        shrink = 2 * (self.conv_kernel - 1) if self.use_depth_block else 0
        return self.input_len - shrink

    @property
    def seq_len(self) -> int:
        return (self.conv_len // self.pool1) // self.pool2

    @property
    def embed_dim(self) -> int:
        return self.feature_channels

    @property
    def sk_mix_dim(self) -> int:
        return max(self.feature_channels // self.sk_reduction, self.sk_min_dim)

    @classmethod
    def thu_ep(cls, **overrides) -> "ModelConfig":
        base = dict(n_channels=30, input_len=1750, n_classes=9)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def deap(cls, **overrides) -> "ModelConfig":
        base = dict(n_channels=28, input_len=1536, n_classes=2)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sk_kernel_sizes"] = list(self.sk_kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["sk_kernel_sizes"] = tuple(d["sk_kernel_sizes"])
        return cls(**d)


class ParameterStore:
    """Ordered, uniquely named map of learnable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._params[name] = t
        return t

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)


@dataclass
class ForwardTrace:
    """Captured intermediates for shape audits and explainability."""

    step_shapes: list = field(default_factory=list)
    sk_weights: np.ndarray | None = None          # (B, n_streams, K2)
    attention: list = field(default_factory=list)  # per layer (B, h, S+1, S+1)
    post_conv: np.ndarray | None = None            # (B, K2, seq_len)
    token_embedding: np.ndarray | None = None      # (B, embed_dim)


class _EncoderLayer:
    def __init__(self, cfg: ModelConfig, store: ParameterStore, prefix: str,
                 rng: np.random.Generator):
        d, h, dk, mlp = cfg.embed_dim, cfg.n_heads, cfg.head_dim, cfg.mlp_dim
        self.n_heads, self.head_dim = h, dk
        self.ln1 = LayerNorm(d)
        store.register(f"{prefix}.ln1.gamma", self.ln1.gamma)
        store.register(f"{prefix}.ln1.beta", self.ln1.beta)
        self.wq = store.register(f"{prefix}.attn.wq",
                                 Tensor(uniform_init(rng, (d, h * dk), d)))
        self.wk = store.register(f"{prefix}.attn.wk",
                                 Tensor(uniform_init(rng, (d, h * dk), d)))
        self.wv = store.register(f"{prefix}.attn.wv",
                                 Tensor(uniform_init(rng, (d, h * dk), d)))
        self.wo = store.register(f"{prefix}.attn.wo",
                                 Tensor(uniform_init(rng, (h * dk, d), h * dk)))
        self.ln2 = LayerNorm(d)
        store.register(f"{prefix}.ln2.gamma", self.ln2.gamma)
        store.register(f"{prefix}.ln2.beta", self.ln2.beta)
        self.w1 = store.register(f"{prefix}.mlp.w1", Tensor(uniform_init(rng, (d, mlp), d)))
        self.b1 = store.register(f"{prefix}.mlp.b1", Tensor(np.zeros(mlp)))
        self.w2 = store.register(f"{prefix}.mlp.w2", Tensor(uniform_init(rng, (mlp, d), mlp)))
        self.b2 = store.register(f"{prefix}.mlp.b2", Tensor(np.zeros(d)))

    def attend(self, x: Tensor, trace: ForwardTrace | None) -> Tensor:
        bsz, s1, d = x.shape
        h, dk = self.n_heads, self.head_dim

        def split_heads(t: Tensor) -> Tensor:
            return t.reshape((bsz, s1, h, dk)).transpose((0, 2, 1, 3))

        q = split_heads(T.matmul(x, self.wq))
        k = split_heads(T.matmul(x, self.wk))
        v = split_heads(T.matmul(x, self.wv))
        scores = T.scale(T.matmul(q, k.transpose((0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        attn = T.softmax(scores, axis=-1)
        if trace is not None:
            trace.attention.append(attn.data.copy())
        ctx = T.matmul(attn, v)
        ctx = ctx.transpose((0, 2, 1, 3)).reshape((bsz, s1, h * dk))
        return T.matmul(ctx, self.wo)

    def __call__(self, x: Tensor, trace: ForwardTrace | None) -> Tensor:
        sa = self.attend(self.ln1(x), trace) + x
        hidden = T.relu(T.matmul(self.ln2(sa), self.w1) + self.b1)
        return T.matmul(hidden, self.w2) + self.b2 + sa


class _SeparableBlock:
    """Two separable conv layers (depthwise + per-channel pointwise), then
    BN, ReLU, dropout.  Time length is preserved by symmetric padding."""

    def __init__(self, cfg: ModelConfig, store: ParameterStore, prefix: str,
                 rng: np.random.Generator):
        k2, p = cfg.feature_channels, cfg.conv_kernel
        depth_spec = Conv1dSpec(k2, k2, p, groups=k2, padding=(p - 1) // 2, bias=False)
        point_spec = Conv1dSpec(k2, k2, 1, groups=k2, bias=False)
        self.layers = []
        for i in (1, 2):
            depth = Conv1d(depth_spec, rng)
            point = Conv1d(point_spec, rng)
            store.register(f"{prefix}.l{i}.depth.w", depth.w)
            store.register(f"{prefix}.l{i}.point.w", point.w)
            self.layers.append((depth, point))
        self.bn = BatchNorm1d(k2)
        store.register(f"{prefix}.bn.gamma", self.bn.gamma)
        store.register(f"{prefix}.bn.beta", self.bn.beta)

    def __call__(self, x, training, drop_p, rng, record, label):
        depth1, point1 = self.layers[0]
        depth2, point2 = self.layers[1]
        h = point1(depth1(x))
        record(f"{label}_l1", h)
        h = point2(depth2(h))
        h = dropout(T.relu(self.bn(h, training)), drop_p, training, rng)
        record(f"{label}_l2", h)
        return h


class _SelectiveKernel:
    """Split / fuse / select channel attention over parallel conv streams."""

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: np.random.Generator):
        k2, d = cfg.feature_channels, cfg.sk_mix_dim
        self.branches = []
        for i, k in enumerate(cfg.sk_kernel_sizes, start=1):
            spec = Conv1dSpec(k2, k2, k, groups=k2, padding=(k - 1) // 2, bias=False)
            conv = Conv1d(spec, rng)
            bn = BatchNorm1d(k2)
            store.register(f"sk.branch{i}.w", conv.w)
            store.register(f"sk.branch{i}.bn.gamma", bn.gamma)
            store.register(f"sk.branch{i}.bn.beta", bn.beta)
            self.branches.append((conv, bn))
        self.fuse_w = store.register("sk.fuse.w", Tensor(uniform_init(rng, (k2, d), k2)))
        self.select_w = [
            store.register(f"sk.select{i}.w", Tensor(uniform_init(rng, (d, k2), d)))
            for i in range(1, len(cfg.sk_kernel_sizes) + 1)
        ]

    def __call__(self, x: Tensor, training: bool, trace: ForwardTrace | None) -> Tensor:
        bsz, k2, _ = x.shape
        streams = [T.relu(bn(conv(x), training)) for conv, bn in self.branches]
        fused = streams[0]
        for u in streams[1:]:
            fused = fused + u
        stats = fused.mean(axis=-1)                      # (B, K2)
        z = T.matmul(stats, self.fuse_w)                 # (B, d)
        logits = [T.matmul(z, w).reshape((bsz, 1, k2)) for w in self.select_w]
        weights = T.softmax(T.concat(logits, axis=1), axis=1)   # (B, n_streams, K2)
        if trace is not None:
            trace.sk_weights = weights.data.copy()
        out = None
        for i, u in enumerate(streams):
            wi = T.narrow(weights, 1, i, 1).reshape((bsz, k2, 1))
            term = T.mul(u, wi)
            out = term if out is None else out + term
        return out


class ConvTransformer:
    """The full classifier; owns parameters, BN buffers and the dropout stream."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        init_rng, drop_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
        self.dropout_rng = drop_rng
        self.params = ParameterStore()
        self._bn_layers: dict[str, BatchNorm1d] = {}
        cfg = config
        k2, p = cfg.feature_channels, cfg.conv_kernel

        if cfg.use_depth_block:
            m = cfg.n_channels
            self.depth1 = Conv1d(Conv1dSpec(m, k2, p, groups=m, bias=False), init_rng)
            self.depth2 = Conv1d(Conv1dSpec(k2, k2, p, groups=k2, bias=False), init_rng)
            self.depth_bn = BatchNorm1d(k2)
            self.params.register("depth.conv1.w", self.depth1.w)
            self.params.register("depth.conv2.w", self.depth2.w)
            self.params.register("depth.bn.gamma", self.depth_bn.gamma)
            self.params.register("depth.bn.beta", self.depth_bn.beta)
            self._bn_layers["depth.bn"] = self.depth_bn

        self.sconv_blocks = []
        for i in range(1, cfg.n_sconv_blocks + 1):
            block = _SeparableBlock(cfg, self.params, f"sconv{i}", init_rng)
            self._bn_layers[f"sconv{i}.bn"] = block.bn
            self.sconv_blocks.append(block)

        if cfg.use_sk_attention:
            self.sk = _SelectiveKernel(cfg, self.params, init_rng)
            for i, (_, bn) in enumerate(self.sk.branches, start=1):
                self._bn_layers[f"sk.branch{i}.bn"] = bn

        if cfg.use_transformer:
            self.cls_token = self.params.register(
                "cls_token", Tensor(init_rng.standard_normal((1, cfg.embed_dim))))
            self.pos_embed = self.params.register(
                "pos_embed", Tensor(init_rng.standard_normal((cfg.seq_len + 1, cfg.embed_dim))))
            self.encoder = [
                _EncoderLayer(cfg, self.params, f"enc{i}", init_rng)
                for i in range(1, cfg.n_encoder_layers + 1)
            ]

        self.head = Linear(cfg.embed_dim, cfg.n_classes, init_rng)
        self.params.register("head.w", self.head.w)
        self.params.register("head.b", self.head.b)

    # -- state access ---------------------------------------------------

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, bn in self._bn_layers.items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def state_snapshot(self) -> dict[str, np.ndarray]:
        snap = {name: t.data.copy() for name, t in self.params.items()}
        snap.update({name: arr.copy() for name, arr in self.buffers().items()})
        return snap

    def load_state(self, snap: dict[str, np.ndarray]):
        for name, t in self.params.items():
            t.data = np.ascontiguousarray(snap[name].copy())
        for name, bn in self._bn_layers.items():
            bn.running_mean = snap[f"{name}.running_mean"].copy()
            bn.running_var = snap[f"{name}.running_var"].copy()

    def zero_grad(self):
        for t in self.params.tensors():
            t.grad = None

    # -- forward ---------------------------------------------------------

    def forward(self, x, training: bool = False, trace: bool = False):
        """Run the model. x: (B, M, T) or (M, T) array or Tensor.
        Returns (logits, ForwardTrace | None)."""
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim == 2:
            x = x.reshape((1,) + x.shape)
        if x.shape[1] != cfg.n_channels or x.shape[2] != cfg.input_len:
            raise ShapeError(
                f"input {x.shape} does not match config "
                f"({cfg.n_channels} channels x {cfg.input_len} samples)")
        tr = ForwardTrace() if trace else None
        step = [0]

        def record(name, t: Tensor):
            step[0] += 1
            if tr is not None:
                tr.step_shapes.append((step[0], name, tuple(t.shape[1:])))

        record("input", x)
        h = x
        if cfg.use_depth_block:
            h = self.depth1(h)
            record("depth_conv1", h)
            h = self.depth2(h)
            h = dropout(T.relu(self.depth_bn(h, training)), cfg.dropout_p, training,
                        self.dropout_rng)
            record("depth_conv2", h)
        h = avg_pool1d(h, cfg.pool1)
        record("avg_pool1", h)
        for i, block in enumerate(self.sconv_blocks, start=1):
            h = block(h, training, cfg.dropout_p, self.dropout_rng, record, f"sconv{i}")
        h = avg_pool1d(h, cfg.pool2)
        record("avg_pool2", h)
        if cfg.use_sk_attention:
            h = self.sk(h, training, tr)
            record("sk_attention", h)
        if tr is not None:
            tr.post_conv = h.data.copy()

        if cfg.use_transformer:
            bsz = h.shape[0]
            tokens = h.transpose((0, 2, 1))
            record("reshape", tokens)
            cls = self.cls_token.reshape((1, 1, cfg.embed_dim))
            cls = cls + Tensor(np.zeros((bsz, 1, cfg.embed_dim)))
            record("class_token", cls)
            seq = T.concat([cls, tokens], axis=1) + self.pos_embed
            record("concat_pos", seq)
            for i, layer in enumerate(self.encoder, start=1):
                seq = layer(seq, tr)
                record(f"encoder{i}", seq)
            feat = T.narrow(seq, 1, 0, 1).reshape((seq.shape[0], cfg.embed_dim))
            record("class_token_out", feat)
        else:
            feat = h.mean(axis=-1)
            record("token_mean", feat)

        if tr is not None:
            tr.token_embedding = feat.data.copy()
        logits = self.head(feat)
        record("fc", logits)
        return logits, tr

    def predict(self, x) -> np.ndarray:
        with T.no_grad():
            logits, _ = self.forward(x, training=False)
        return np.argmax(logits.data, axis=-1)


def count_flops(config: ModelConfig) -> int:
    """Closed-form forward flop count for one segment (2 flops per MAC),
    covering conv, linear and attention matmuls."""
    cfg = config
    k2, p = cfg.feature_channels, cfg.conv_kernel
    macs = 0
    t = cfg.input_len
    if cfg.use_depth_block:
        t1 = t - (p - 1)
        macs += k2 * p * t1
        t2 = t1 - (p - 1)
        macs += k2 * p * t2
        t = t2
    t = t // cfg.pool1
    for _ in range(cfg.n_sconv_blocks):
        for _ in range(2):
            macs += k2 * p * t      # depthwise stage
            macs += k2 * t          # per-channel pointwise stage
    t = t // cfg.pool2
    if cfg.use_sk_attention:
        for k in cfg.sk_kernel_sizes:
            macs += k2 * k * t
        d = cfg.sk_mix_dim
        macs += k2 * d
        macs += len(cfg.sk_kernel_sizes) * d * k2
    if cfg.use_transformer:
        s1 = cfg.seq_len + 1
        dm, h, dk, mlp = cfg.embed_dim, cfg.n_heads, cfg.head_dim, cfg.mlp_dim
        per_layer = (
            3 * s1 * dm * (h * dk)        # q, k, v projections
            + 2 * h * s1 * s1 * dk        # scores and context products
            + s1 * (h * dk) * dm          # output projection
            + s1 * (dm * mlp + mlp * dm)  # feedforward
        )
        macs += cfg.n_encoder_layers * per_layer
    macs += cfg.embed_dim * cfg.n_classes
    return 2 * macs
