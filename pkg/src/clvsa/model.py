"""Convolutional-LSTM sequence-to-sequence classifier with self/inter-attention
and a backward decoder that forms the approximate posterior over z.

Hidden grids have shape [batch, 5, 6, channels]. For attention and the
heads they are flattened to vectors of length D = 5 * 6 * channels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Kernel, Node, Tape

N_CLASSES = 3
LOGVAR_BOUND = 10.0
N_ATTRIBUTES = 5
FRAME_WIDTH = 6

MODEL_KINDS = ("clvsa", "clsa", "seq2seq", "lstm", "cnn")


@dataclass
class ModelConfig:
    kind: str = "clvsa"
    layers: int = 2
    channels: int = 32
    kernel_width: int = 3
    z_dim: int = 64
    variational: bool = True
    attention: bool = True
    convolutional: bool = True
    use_encoder: bool = True
    recurrent: bool = True
    backward_inter_attention: bool = True
    dropout: float = 0.1
    classifier_units: tuple = (200, 50)
    prior_units: int = 512
    posterior_units: int = 256

    def __post_init__(self):
        self.classifier_units = tuple(int(u) for u in self.classifier_units)
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")
        if self.kernel_width % 2 == 0:
            raise ValueError("kernel width must be odd")
        if self.layers < 1 or self.channels < 1 or self.z_dim < 1:
            raise ValueError("layers, channels and z_dim must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def hidden_size(self) -> int:
        return N_ATTRIBUTES * FRAME_WIDTH * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classifier_units"] = list(self.classifier_units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ConvLstmState:
    H: Node
    C: Node


@dataclass
class Batch:
    day_a: np.ndarray      # [B, L, 5, 6] normalized
    day_b: np.ndarray      # [B, L, 5, 6]
    labels: np.ndarray     # [B, L] class indices, IGNORE_INDEX where unlabelled

    @property
    def size(self) -> int:
        return self.day_b.shape[0]

    @property
    def steps(self) -> int:
        return self.day_b.shape[1]

    @property
    def labels_reversed(self) -> np.ndarray:
        return self.labels[:, ::-1].copy()


@dataclass
class ModelOutput:
    probs: Node                           # [B, L, 3], forward decoder
    bwd_probs: Node | None = None         # [B, L, 3], emission (reversed) order
    prior_mu: Node | None = None          # [B, L, z]
    prior_logvar: Node | None = None
    post_mu: Node | None = None
    post_logvar: Node | None = None
    z: list = field(default_factory=list)
    backward_hidden: list = field(default_factory=list)
    attention_weights: list = field(default_factory=list)


def label_to_class(y) -> np.ndarray:
    """Up/Flat/Down (1/0/-1) -> class index 0/1/2."""
    return 1 - np.asarray(y, dtype=np.int64)


def class_to_label(c) -> np.ndarray:
    return 1 - np.asarray(c, dtype=np.int64)


# -- parameter layout ------------------------------------------------------

def _cell_specs(prefix: str, cin: int, cfg: ModelConfig) -> list:
    specs = []
    C = cfg.channels
    for gate in ("i", "f", "o", "c"):
        if cfg.convolutional:
            specs.append((f"{prefix}.W{gate}.w", (cfg.kernel_width, cin + C, C),
                          cfg.kernel_width * (cin + C)))
            specs.append((f"{prefix}.W{gate}.b", (C,), None))
        else:
            n_in = N_ATTRIBUTES * FRAME_WIDTH * (cin + C)
            specs.append((f"{prefix}.W{gate}.w", (cfg.hidden_size, n_in), n_in))
            specs.append((f"{prefix}.W{gate}.b", (cfg.hidden_size,), None))
    return specs


def _dense(prefix, n_in, n_out, bias=True):
    out = [(f"{prefix}.W", (n_out, n_in), n_in)]
    if bias:
        out.append((f"{prefix}.b", (n_out,), None))
    return out


def _classifier_specs(prefix, n_in, cfg):
    specs, width = [], n_in
    for k, units in enumerate(cfg.classifier_units):
        specs += _dense(f"{prefix}.fc{k}", width, units)
        width = units
    return specs + _dense(f"{prefix}.out", width, N_CLASSES)


def _stack_specs(prefix, cfg, inter):
    specs = []
    D = cfg.hidden_size
    for layer in range(cfg.layers):
        cin = 1 if layer == 0 else cfg.channels
        specs += _cell_specs(f"{prefix}.l{layer}.cell", cin, cfg)
        if cfg.attention:
            specs += _dense(f"{prefix}.l{layer}.self_attn", 2 * D, D, bias=False)
            if inter:
                specs += _dense(f"{prefix}.l{layer}.inter_attn", 2 * D, D, bias=False)
    return specs


def parameter_specs(cfg: ModelConfig) -> list:
    """(name, shape, fan_in) for every trainable tensor; fan_in None = bias."""
    D = cfg.hidden_size
    if not cfg.recurrent:
        C, w = cfg.channels, cfg.kernel_width
        specs = [("cnn.conv0.w", (w, 1, C), w), ("cnn.conv0.b", (C,), None),
                 ("cnn.conv1.w", (w, C, C), w * C), ("cnn.conv1.b", (C,), None)]
        return specs + _classifier_specs("cls", D, cfg)

    specs = []
    if cfg.use_encoder:
        specs += _stack_specs("enc", cfg, inter=False)
    specs += _stack_specs("dec", cfg, inter=cfg.use_encoder)
    z = cfg.z_dim if cfg.variational else 0
    specs += _classifier_specs("cls", D + z, cfg)
    if cfg.variational:
        specs += _dense("prior.fc", D + z, cfg.prior_units)
        specs += _dense("prior.mu", cfg.prior_units, z)
        specs += _dense("prior.logvar", cfg.prior_units, z)
        specs += _stack_specs("bwd", cfg, inter=cfg.use_encoder and cfg.backward_inter_attention)
        specs += _classifier_specs("bwd.cls", D, cfg)
        specs += _dense("post.fc", D, cfg.posterior_units)
        specs += _dense("post.mu", cfg.posterior_units, z)
        specs += _dense("post.logvar", cfg.posterior_units, z)
    return specs


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in parameter_specs(cfg):
        if fan_in is None:
            params[name] = np.zeros(shape)
        else:
            a = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_specs(cfg))


def bind(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Node]:
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


# -- building blocks -------------------------------------------------------

def _gate(p, prefix, gate, xh, cfg):
    if cfg.convolutional:
        return dc.conv1d_row_shared(xh, Kernel(p[f"{prefix}.W{gate}.w"], p[f"{prefix}.W{gate}.b"]))
    B = xh.shape[0]
    flat = dc.reshape(xh, (B, -1))
    out = dc.affine(p[f"{prefix}.W{gate}.w"], flat, p[f"{prefix}.W{gate}.b"])
    return dc.reshape(out, (B, N_ATTRIBUTES, FRAME_WIDTH, cfg.channels))


def convlstm_step(p: dict, prefix: str, x: Node, state: ConvLstmState,
                  cfg: ModelConfig) -> ConvLstmState:
    """One gated update; gates see the channel concatenation [x, H_prev]."""
    if x.shape[:-1] != state.H.shape[:-1]:
        raise ValueError(f"input grid {x.shape} does not match state {state.H.shape}")
    xh = dc.concat_last(x, state.H)
    i = dc.sigmoid(_gate(p, prefix, "i", xh, cfg))
    f = dc.sigmoid(_gate(p, prefix, "f", xh, cfg))
    o = dc.sigmoid(_gate(p, prefix, "o", xh, cfg))
    g = dc.tanh(_gate(p, prefix, "c", xh, cfg))
    C = dc.add(dc.hadamard(f, state.C), dc.hadamard(i, g))
    H = dc.hadamard(o, dc.tanh(C))
    return ConvLstmState(H, C)


def zero_state(tape: Tape, batch: int, cfg: ModelConfig) -> ConvLstmState:
    shape = (batch, N_ATTRIBUTES, FRAME_WIDTH, cfg.channels)
    return ConvLstmState(tape.constant(np.zeros(shape)), tape.constant(np.zeros(shape)))


def self_attend(h: Node, history: list[Node], W: Node):
    """Mix h with a softmax-weighted average of earlier outputs.

    Returns (h', weights); the context is zero when history is empty.
    """
    if history:
        keys = dc.stack(history, axis=-2)
        weights = dc.softmax_last(dc.dot_last(keys, h))
        context = dc.weighted_sum(weights, keys)
        w_value = weights.value
    else:
        context = h.tape.constant(np.zeros(h.shape))
        w_value = None
    return dc.tanh(dc.affine(W, dc.concat_last(h, context))), w_value


def inter_attend(hd: Node, encoder_states: Node, W: Node):
    """Attend from a decoder vector over stacked encoder states [B, Le, D]."""
    if encoder_states is None or encoder_states.shape[-2] == 0:
        raise ValueError("inter-attention needs encoder states")
    weights = dc.softmax_last(dc.dot_last(encoder_states, hd))
    context = dc.weighted_sum(weights, encoder_states)
    return dc.tanh(dc.affine(W, dc.concat_last(hd, context))), weights.value


class _Stack:
    """Layers of recurrent cell + optional attention for one sequence."""

    def __init__(self, p, prefix, cfg, tape, batch, encoder_states=None, record=None):
        self.p, self.prefix, self.cfg = p, prefix, cfg
        self.states = [zero_state(tape, batch, cfg) for _ in range(cfg.layers)]
        self.history = [[] for _ in range(cfg.layers)]
        self.encoder_states = encoder_states
        self.record = record if record is not None else []

    def step(self, x: Node) -> Node:
        cfg, p = self.cfg, self.p
        B = x.shape[0]
        out = None
        for layer in range(cfg.layers):
            name = f"{self.prefix}.l{layer}"
            self.states[layer] = convlstm_step(p, f"{name}.cell", x, self.states[layer], cfg)
            out = dc.reshape(self.states[layer].H, (B, cfg.hidden_size))
            if cfg.attention:
                out, w = self_attend(out, self.history[layer], p[f"{name}.self_attn.W"])
                self.history[layer].append(out)
                if w is not None:
                    self.record.append(w)
                if self.encoder_states is not None:
                    out, w = inter_attend(out, self.encoder_states, p[f"{name}.inter_attn.W"])
                    self.record.append(w)
            x = dc.reshape(out, (B, N_ATTRIBUTES, FRAME_WIDTH, cfg.channels))
        return out


def _frame_inputs(tape, frames: np.ndarray) -> list[Node]:
    # [B, L, 5, 6] -> L nodes of [B, 5, 6, 1]
    return [tape.constant(frames[:, t, :, :, None]) for t in range(frames.shape[1])]


def classify(p, prefix, x: Node, cfg, training, rng) -> Node:
    for k in range(len(cfg.classifier_units)):
        x = dc.relu(dc.affine(p[f"{prefix}.fc{k}.W"], x, p[f"{prefix}.fc{k}.b"]))
        x = dc.dropout(x, cfg.dropout, training, rng)
    return dc.softmax_last(dc.affine(p[f"{prefix}.out.W"], x, p[f"{prefix}.out.b"]))


def classifier_input(h: Node, z: Node | None) -> Node:
    """Where z enters the model: concatenated onto the classifier input."""
    return h if z is None else dc.concat_last(h, z)


def _gaussian_head(p, prefix, x):
    hidden = dc.relu(dc.affine(p[f"{prefix}.fc.W"], x, p[f"{prefix}.fc.b"]))
    mu = dc.affine(p[f"{prefix}.mu.W"], hidden, p[f"{prefix}.mu.b"])
    logvar = dc.clip(dc.affine(p[f"{prefix}.logvar.W"], hidden, p[f"{prefix}.logvar.b"]),
                     -LOGVAR_BOUND, LOGVAR_BOUND)
    return mu, logvar


def prior_params(p, h: Node, z_prev: Node):
    return _gaussian_head(p, "prior", dc.concat_last(h, z_prev))


def posterior_params(p, b_aligned: Node):
    return _gaussian_head(p, "post", b_aligned)


def encode_day(p, tape, day_a: np.ndarray, cfg, record=None) -> list[Node]:
    stack = _Stack(p, "enc", cfg, tape, day_a.shape[0], record=record)
    return [stack.step(x) for x in _frame_inputs(tape, day_a)]


def decode_day_backward(p, tape, day_b_reversed: np.ndarray, encoder_states, cfg,
                        training, rng, record=None):
    """Run the mirror decoder over reversed frames.

    Returns (hidden vectors in emission order, probabilities [B, L, 3]).
    """
    if not cfg.variational:
        raise ValueError("backward decoder requires the variational flag")
    enc = encoder_states if cfg.backward_inter_attention else None
    stack = _Stack(p, "bwd", cfg, tape, day_b_reversed.shape[0], enc, record)
    hidden = [stack.step(x) for x in _frame_inputs(tape, day_b_reversed)]
    probs = [classify(p, "bwd.cls", b, cfg, training, rng) for b in hidden]
    return hidden, dc.stack(probs, axis=1)


def decode_day_forward(p, tape, day_b: np.ndarray, encoder_states, cfg, training, rng,
                       posterior=None, record=None) -> ModelOutput:
    """Forward decoder with prior head and classifier.

    ``posterior`` is a list of per-step (mu, logvar) used to sample z in
    training; without it z is the prior mean.
    """
    if cfg.use_encoder and cfg.attention and encoder_states is None:
        raise ValueError("forward decoder needs encoder states")
    B, L = day_b.shape[:2]
    stack = _Stack(p, "dec", cfg, tape, B, encoder_states, record)
    z_prev = tape.constant(np.zeros((B, cfg.z_dim))) if cfg.variational else None
    probs, priors, zs = [], [], []
    for t, x in enumerate(_frame_inputs(tape, day_b)):
        h = stack.step(x)
        z = None
        if cfg.variational:
            mu_p, lv_p = prior_params(p, h, z_prev)
            priors.append((mu_p, lv_p))
            if posterior is not None:
                mu_q, lv_q = posterior[t]
                z = dc.reparameterize(mu_q, lv_q, rng.standard_normal(mu_q.shape))
            else:
                z = mu_p
            zs.append(z.value)
            z_prev = z
        probs.append(classify(p, "cls", classifier_input(h, z), cfg, training, rng))
    out = ModelOutput(probs=dc.stack(probs, axis=1), z=zs)
    if priors:
        out.prior_mu = dc.stack([m for m, _ in priors], axis=1)
        out.prior_logvar = dc.stack([v for _, v in priors], axis=1)
    return out


def _cnn_forward(p, tape, day_b, cfg, training, rng, record) -> ModelOutput:
    B, L = day_b.shape[:2]
    x = tape.constant(day_b.reshape(B * L, N_ATTRIBUTES, FRAME_WIDTH, 1))
    for k in range(2):
        x = dc.relu(dc.conv1d_row_shared(x, Kernel(p[f"cnn.conv{k}.w"], p[f"cnn.conv{k}.b"])))
    flat = dc.reshape(x, (B * L, cfg.hidden_size))
    probs = classify(p, "cls", flat, cfg, training, rng)
    return ModelOutput(probs=dc.reshape(probs, (B, L, N_CLASSES)))


def forward_pass(p: dict[str, Node], batch: Batch, cfg: ModelConfig, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> ModelOutput:
    """Run the model on a batch of day pairs.

    ``train``: z sampled from the posterior (one draw per step), dropout on.
    ``eval``: z is the prior mean, backward decoder skipped, dropout off.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and rng is None:
        raise ValueError("train mode needs an rng")
    tape = next(iter(p.values())).tape
    record: list = []
    if not cfg.recurrent:
        out = _cnn_forward(p, tape, batch.day_b, cfg, training, rng, record)
        out.attention_weights = record
        return out

    enc_states = None
    if cfg.use_encoder:
        enc = encode_day(p, tape, batch.day_a, cfg, record)
        enc_states = dc.stack(enc, axis=1) if cfg.attention else None

    posterior = None
    bwd_hidden, bwd_probs = [], None
    if cfg.variational and training:
        rev = np.ascontiguousarray(batch.day_b[:, ::-1])
        bwd_hidden, bwd_probs = decode_day_backward(p, tape, rev, enc_states, cfg, training,
                                                    rng, record)
        aligned = bwd_hidden[::-1]
        posterior = [posterior_params(p, b) for b in aligned]

    out = decode_day_forward(p, tape, batch.day_b, enc_states, cfg, training, rng,
                             posterior, record)
    out.bwd_probs = bwd_probs
    out.backward_hidden = bwd_hidden
    if posterior is not None:
        out.post_mu = dc.stack([m for m, _ in posterior], axis=1)
        out.post_logvar = dc.stack([v for _, v in posterior], axis=1)
    out.attention_weights = record
    return out


def predict_proba(params: dict[str, np.ndarray], batch: Batch, cfg: ModelConfig) -> np.ndarray:
    tape = Tape()
    out = forward_pass(bind(tape, params), batch, cfg, "eval")
    return out.probs.value
