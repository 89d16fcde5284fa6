"""FREA-Unet: a six-down/six-up encoder-decoder with skip connections,
frequency branch heads on two decoder layers, and spatial attention gates.

The forward pass runs in two stages. Stage one evaluates the whole network
with identity (uniform) gates and keeps the penultimate full-resolution
activation as the global descriptor. Stage two scores each branch's features
against a pooled, projected copy of that descriptor, gates the features, and
re-evaluates the fusion tail to produce the output image. Branch heads emit
the low/high frequency predictions; gradients flow through both stages.
"""

import json
import struct
from dataclasses import dataclass, asdict, replace

import numpy as np

from .tensor_core import (
    Tensor, add, avg_pool2d, batch_norm, concat_channels, conv2d,
    conv_transpose2d, dropout, mul, no_grad, relu, scale, spatial_softmax,
    sum_channels, tanh, upsample_bilinear,
)

CHECKPOINT_MAGIC = b"FREAM1"
KERNEL = 4
STRIDE = 2
PAD = 1

ABLATIONS = ("unet", "wo-freq", "wo-att", "full")

DEFAULT_ENCODER = (64, 128, 256, 512, 512, 512)
DEFAULT_DECODER = (512, 1024, 1024, 512, 256, 128)
REDUCED_ENCODER = (8, 16, 16, 16, 16, 16)
REDUCED_DECODER = (16, 16, 16, 16, 16, 8)


@dataclass
class ModelConfig:
    """Architecture hyperparameters; see ``build`` for how they are used."""

    input_size: int = 256
    encoder_filters: tuple = DEFAULT_ENCODER
    decoder_filters: tuple = DEFAULT_DECODER
    low_branch_layer: int = 4
    high_branch_layer: int = 5
    use_attention: bool = True
    use_freq_branches: bool = True
    dropout_p: float = 0.5
    lambda_low: float = 1.0
    lambda_high: float = 1.0
    lambda_rec: float = 1.0
    init_std: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        self.encoder_filters = tuple(int(f) for f in self.encoder_filters)
        self.decoder_filters = tuple(int(f) for f in self.decoder_filters)
        s = self.input_size
        if s < 64 or s & (s - 1):
            raise ValueError(f"input_size must be a power of two >= 64, got {s}")
        if len(self.encoder_filters) != 6 or len(self.decoder_filters) != 6:
            raise ValueError("encoder/decoder filter lists must have length 6")
        if not 1 <= self.low_branch_layer < self.high_branch_layer <= 5:
            raise ValueError(
                "branch layers must satisfy 1 <= low < high <= 5 (layer 6 is "
                f"re-evaluated after fusion), got {self.low_branch_layer}/"
                f"{self.high_branch_layer}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")

    def to_dict(self):
        d = asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        d["decoder_filters"] = list(self.decoder_filters)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def ablation_config(name, base=None):
    """Config for one ablation arm: unet, wo-freq, wo-att, or full."""
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    base = base if base is not None else ModelConfig()
    return replace(base,
                   use_attention=name in ("wo-freq", "full"),
                   use_freq_branches=name in ("wo-att", "full"))


@dataclass
class ForwardOutput:
    """Branch predictions, final image, and post-softmax attention maps."""

    low_pred: Tensor
    high_pred: Tensor
    final: Tensor
    attention_maps: dict


class _Block:
    """One conv or transposed-conv layer with optional batch-norm state."""

    def __init__(self, w, b, gamma=None, beta=None, c_out=None):
        self.w = w
        self.b = b
        self.gamma = gamma
        self.beta = beta
        if gamma is not None:
            self.running_mean = np.zeros(c_out)
            self.running_var = np.ones(c_out)
        else:
            self.running_mean = None
            self.running_var = None


class FreaUnetModel:
    """Instantiated parameter set. Use ``build`` to construct one."""

    def __init__(self, config):
        self.config = config
        self.mode = "train"
        self.enc = []
        self.dec = []
        self.fuse = None
        self.attn_low = None
        self.attn_high = None
        self.low_head = None
        self.high_head = None
        self.final = None
        self._forward_count = 0

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def named_parameters(self):
        items = []
        for i, blk in enumerate(self.enc):
            items.append((f"enc{i + 1}.w", blk.w))
            items.append((f"enc{i + 1}.b", blk.b))
            if blk.gamma is not None:
                items.append((f"enc{i + 1}.gamma", blk.gamma))
                items.append((f"enc{i + 1}.beta", blk.beta))
        for j, blk in enumerate(self.dec):
            items.append((f"dec{j + 1}.w", blk.w))
            items.append((f"dec{j + 1}.b", blk.b))
            items.append((f"dec{j + 1}.gamma", blk.gamma))
            items.append((f"dec{j + 1}.beta", blk.beta))
        for name, blk in (("fuse", self.fuse), ("attn_low", self.attn_low),
                          ("attn_high", self.attn_high), ("low_head", self.low_head),
                          ("high_head", self.high_head), ("final", self.final)):
            items.append((f"{name}.w", blk.w))
            items.append((f"{name}.b", blk.b))
        return items

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        items = []
        for i, blk in enumerate(self.enc):
            if blk.running_mean is not None:
                items.append((f"enc{i + 1}.running_mean", blk.running_mean))
                items.append((f"enc{i + 1}.running_var", blk.running_var))
        for j, blk in enumerate(self.dec):
            items.append((f"dec{j + 1}.running_mean", blk.running_mean))
            items.append((f"dec{j + 1}.running_var", blk.running_var))
        return items

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def predict(self, mr):
        """Inference helper: final output image data for one input."""
        with no_grad():
            return forward(self, mr).final.data


def build(config):
    """Deterministically initialize a model from its config.

    Encoder layers: 4x4 conv, stride 2, pad 1, then ReLU, then batch norm
    (skipped on the first layer). Decoder layers: 4x4 transposed conv,
    stride 2, pad 1, input concatenated with the mirror encoder features for
    layers 2..6, then ReLU, batch norm, and dropout on layers 1..3. All
    parameters are drawn from N(0, init_std²) in build order.
    """
    rng = np.random.default_rng(config.rng_seed)
    std = config.init_std

    def param(*shape):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    def conv_block(c_in, c_out, with_bn, transposed=False):
        w = param(c_in, c_out, KERNEL, KERNEL) if transposed \
            else param(c_out, c_in, KERNEL, KERNEL)
        b = param(c_out)
        if with_bn:
            return _Block(w, b, param(c_out), param(c_out), c_out)
        return _Block(w, b)

    def proj_block(c_in, c_out):
        return _Block(param(c_out, c_in, 1, 1), param(c_out))

    m = FreaUnetModel(config)
    enc_f = config.encoder_filters
    dec_f = config.decoder_filters

    c_prev = 1
    for i, c_out in enumerate(enc_f):
        m.enc.append(conv_block(c_prev, c_out, with_bn=i > 0))
        c_prev = c_out

    # Decoder layer j >= 2 consumes concat(previous output, mirror encoder
    # features); the fused stream entering layer 6 keeps layer 5's width.
    dec_in = [enc_f[5]]
    for j in range(1, 6):
        dec_in.append(dec_f[j - 1] + enc_f[5 - j])
    for j, c_out in enumerate(dec_f):
        m.dec.append(conv_block(dec_in[j], c_out, with_bn=True, transposed=True))

    m.fuse = proj_block(dec_f[3], dec_f[4])
    m.attn_low = proj_block(dec_f[5], dec_f[3])
    m.attn_high = proj_block(dec_f[5], dec_f[4])
    m.low_head = proj_block(dec_f[3], 1)
    m.high_head = proj_block(dec_f[4], 1)
    m.final = proj_block(dec_f[5], 1)
    return m


def attention_scores(f, g):
    """Per-position compatibility between features and a global descriptor.

    ``f`` and ``g`` are (N, C, h, w); the score at each position is the
    channel dot product, normalized by softmax over the h*w positions.
    """
    if f.data.shape != g.data.shape:
        raise ValueError(
            f"feature/descriptor shape mismatch: {f.data.shape} vs {g.data.shape}")
    return spatial_softmax(sum_channels(mul(f, g)))


def attention_apply(f, scores):
    """Gate features by n * scores, broadcast over channels.

    Uniform scores of exactly 1/n are an exact identity when n is a power of
    two (always true here: spatial sizes are powers of two).
    """
    if scores.data.shape[0] != f.data.shape[0] or scores.data.shape[1] != 1 \
            or scores.data.shape[2:] != f.data.shape[2:]:
        raise ValueError(
            f"score map {scores.data.shape} does not match features {f.data.shape}")
    n = scores.data.shape[2] * scores.data.shape[3]
    return mul(f, scale(scores, float(n)))


def _uniform_map(n_batch, h, w):
    return Tensor(np.full((n_batch, 1, h, w), 1.0 / (h * w)))


def forward(model, mr, dropout_seed=None, force_uniform_attention=False):
    """Run the network on a normalized input image.

    Returns branch predictions upsampled to the input size, the final output,
    and the post-softmax attention maps (uniform maps when attention is off).
    ``force_uniform_attention`` re-runs the gated stage with identity gates,
    which must reproduce the ungated stage bit for bit.
    """
    cfg = model.config
    s = cfg.input_size
    if mr.data.ndim != 4 or mr.data.shape[1] != 1 or mr.data.shape[2:] != (s, s):
        raise ValueError(f"expected input (N, 1, {s}, {s}), got {mr.data.shape}")
    if not np.isfinite(mr.data).all():
        raise ValueError("input contains non-finite values")

    train = model.mode == "train"
    if train and cfg.dropout_p > 0:
        if dropout_seed is None:
            dropout_seed = model._forward_count
            model._forward_count += 1
        drop_rng = np.random.default_rng([cfg.rng_seed, 7, int(dropout_seed)])
    else:
        drop_rng = None

    def run_block(x, blk, transposed):
        op = conv_transpose2d if transposed else conv2d
        h = op(x, blk.w, blk.b, STRIDE, PAD)
        h = relu(h)
        if blk.gamma is not None:
            h = batch_norm(h, blk.gamma, blk.beta, blk.running_mean,
                           blk.running_var, model.mode)
        return h

    feats = []
    h = mr
    for blk in model.enc:
        h = run_block(h, blk, transposed=False)
        feats.append(h)

    h = feats[5]
    dec_outs = []
    for j in range(5):
        inp = h if j == 0 else concat_channels(h, feats[4 - (j - 1)])
        h = run_block(inp, model.dec[j], transposed=True)
        if j < 3 and drop_rng is not None:
            h = dropout(h, cfg.dropout_p, "train", drop_rng)
        dec_outs.append(h)

    f_low = dec_outs[cfg.low_branch_layer - 1]
    f_high = dec_outs[cfg.high_branch_layer - 1]

    def tail(d4s, d5s):
        up = upsample_bilinear(d4s, d5s.data.shape[2], d5s.data.shape[3])
        fused = add(conv2d(up, model.fuse.w, model.fuse.b, 1, 0), d5s)
        return run_block(concat_channels(fused, feats[0]), model.dec[5], transposed=True)

    a0 = tail(f_low, f_high)  # descriptor stage: identity gates

    n_batch = mr.data.shape[0]
    if cfg.use_attention and not force_uniform_attention:
        def branch_scores(f, proj):
            pooled = avg_pool2d(a0, s // f.data.shape[2])
            return attention_scores(f, conv2d(pooled, proj.w, proj.b, 1, 0))

        s_low = branch_scores(f_low, model.attn_low)
        s_high = branch_scores(f_high, model.attn_high)
        a4 = attention_apply(f_low, s_low)
        a5 = attention_apply(f_high, s_high)
        pen = tail(a4, a5)
    else:
        s_low = _uniform_map(n_batch, f_low.data.shape[2], f_low.data.shape[3])
        s_high = _uniform_map(n_batch, f_high.data.shape[2], f_high.data.shape[3])
        a4, a5 = f_low, f_high
        pen = tail(f_low, f_high) if force_uniform_attention else a0

    final = tanh(conv2d(pen, model.final.w, model.final.b, 1, 0))

    low_pred = high_pred = None
    if cfg.use_freq_branches:
        low = tanh(conv2d(a4, model.low_head.w, model.low_head.b, 1, 0))
        high = tanh(conv2d(a5, model.high_head.w, model.high_head.b, 1, 0))
        low_pred = upsample_bilinear(low, s, s)
        high_pred = upsample_bilinear(high, s, s)

    return ForwardOutput(low_pred, high_pred, final,
                         {"low": s_low, "high": s_high})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_array(f, name, arr):
    raw = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode("utf-8")
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<I", raw.ndim))
    f.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
    f.write(raw.tobytes())


def save_checkpoint(model, path):
    """Serialize config, parameters (build order) and running stats."""
    entries = [(n, p.data) for n, p in model.named_parameters()]
    entries += model.named_buffers()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_array(f, name, arr)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returned model is in eval mode."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: unsupported magic {blob[:6]!r}")
    off = 6
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = ModelConfig.from_dict(json.loads(blob[off:off + cfg_len].decode("utf-8")))
    off += cfg_len
    (n_entries,) = struct.unpack_from("<I", blob, off)
    off += 4

    arrays = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                     offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")

    model = build(config)
    for name, p in model.named_parameters():
        if name not in arrays:
            raise ValueError(f"{path}: missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        p.data = arrays[name]
    for name, buf in model.named_buffers():
        if name not in arrays:
            raise ValueError(f"{path}: missing buffer {name}")
        buf[:] = arrays[name]
    return model.eval()
